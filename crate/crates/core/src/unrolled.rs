//! The unrolled iterative reconstruction network.
//!
//! Each block applies one damped gradient-descent step on the projection
//! fidelity term plus two learned correction paths: a three-layer CNN in
//! image space and a two-layer graph module in patch space. The graph
//! adjacency is built exactly twice per forward pass: once from the
//! initial image (coarse stage) and once from the iterate after the last
//! coarse block (fine stage). Reverse mode treats both adjacencies as
//! constants; only the step sizes and kernel weights receive gradients.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    back_project, forward_project, normal_operator, normal_operator_norm, ImageGrid, ScanGeometry,
    Sinogram,
};
use crate::graphconv::{
    gcn_module_psi_backward, gcn_module_psi_traced, GraphKernels, PsiTrace,
};
use crate::patchgraph::{
    assemble_adjoint, assemble_patches, build_graph, extract_adjoint, extract_patches,
    PatchLayout, SparseGraph,
};
use crate::spatialconv::{
    cnn_module_phi_backward, cnn_module_phi_traced, Activation, SpatialKernels, SpatialTrace,
};

/// Learnable state of one unrolled block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub step_size: f64,
    pub spatial: SpatialKernels,
    pub graph: GraphKernels,
}

/// Static shape of the network; everything needed to rebuild parameter
/// tensors and the patch layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub n_blocks: usize,
    /// Blocks 1..=n_coarse use the adjacency built from the initial image.
    pub n_coarse: usize,
    /// CNN channel width.
    pub channels: usize,
    /// Graph module internal width.
    pub graph_width: usize,
    pub image_rows: usize,
    pub image_cols: usize,
    pub patch_rows: usize,
    pub patch_cols: usize,
    pub step_rows: usize,
    pub step_cols: usize,
    /// Nearest neighbors per patch node.
    pub neighbors: usize,
    pub activation: Activation,
    /// When false the graph path is skipped entirely (the plain unrolled
    /// baseline); no adjacency is ever built.
    pub graph_enabled: bool,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 {
            return Err(Error::config("network needs at least one block"));
        }
        if self.n_coarse == 0 || self.n_coarse > self.n_blocks {
            return Err(Error::config(format!(
                "coarse stage must span 1..={} blocks, got {}",
                self.n_blocks, self.n_coarse
            )));
        }
        if self.channels == 0 || self.graph_width == 0 {
            return Err(Error::config("channel and graph widths must be positive"));
        }
        let layout = self.patch_layout()?;
        if self.graph_enabled {
            let n = layout.n_patches();
            if self.neighbors == 0 || self.neighbors >= n {
                return Err(Error::config(format!(
                    "neighbor count must lie in [1, {}], got {}",
                    n - 1,
                    self.neighbors
                )));
            }
        }
        Ok(())
    }

    pub fn patch_layout(&self) -> Result<PatchLayout> {
        PatchLayout::new(
            self.image_rows,
            self.image_cols,
            self.patch_rows,
            self.patch_cols,
            self.step_rows,
            self.step_cols,
        )
    }

    /// Length of one vectorized patch.
    pub fn feature_len(&self) -> usize {
        self.patch_rows * self.patch_cols
    }
}

/// The full unrolled network: configuration plus per-block parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MagicNetwork {
    pub config: NetworkConfig,
    pub blocks: Vec<BlockParams>,
}

impl MagicNetwork {
    /// Fresh network with fan-in-scaled uniform kernels and every step
    /// size set to 1/L where L estimates the projector normal-operator
    /// norm, so the first fidelity steps are stable.
    pub fn init(config: NetworkConfig, geom: &ScanGeometry, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        if (geom.image_rows, geom.image_cols) != (config.image_rows, config.image_cols) {
            return Err(Error::config(format!(
                "config is for {}x{} images, geometry produces {}x{}",
                config.image_rows, config.image_cols, geom.image_rows, geom.image_cols
            )));
        }
        let step0 = 1.0 / normal_operator_norm(geom)?;
        let d = config.feature_len();
        let blocks = (0..config.n_blocks)
            .map(|_| {
                Ok(BlockParams {
                    step_size: step0,
                    spatial: SpatialKernels::init(config.channels, rng)?,
                    graph: GraphKernels::init(d, config.graph_width, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MagicNetwork { config, blocks })
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.blocks.len() != self.config.n_blocks {
            return Err(Error::config(format!(
                "network holds {} blocks, config says {}",
                self.blocks.len(),
                self.config.n_blocks
            )));
        }
        let d = self.config.feature_len();
        for (t, block) in self.blocks.iter().enumerate() {
            if !block.step_size.is_finite() {
                return Err(Error::config(format!("block {t} step size is not finite")));
            }
            block.spatial.validate()?;
            if block.spatial.channels() != self.config.channels {
                return Err(Error::config(format!(
                    "block {t} has {} channels, config says {}",
                    block.spatial.channels(),
                    self.config.channels
                )));
            }
            block.graph.validate()?;
            if block.graph.feature_len() != d || block.graph.width() != self.config.graph_width {
                return Err(Error::config(format!(
                    "block {t} graph kernels are {}x{}, config says {}x{}",
                    block.graph.feature_len(),
                    block.graph.width(),
                    d,
                    self.config.graph_width
                )));
            }
        }
        Ok(())
    }

    /// Total scalar parameter count.
    pub fn parameter_count(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| {
                1 + b.spatial.w1.len()
                    + b.spatial.w2.len()
                    + b.spatial.w3.len()
                    + b.graph.theta1.len()
                    + b.graph.theta2.len()
            })
            .sum()
    }
}

/// One plain unrolled step: x - alpha * At(Ax - y) + Phi(x).
pub fn learn_block(
    x: &ImageGrid,
    y: &Sinogram,
    geom: &ScanGeometry,
    params: &BlockParams,
    activation: Activation,
) -> Result<ImageGrid> {
    let (out, _) = learn_block_traced(x, y, geom, params, activation)?;
    Ok(out)
}

fn learn_block_traced(
    x: &ImageGrid,
    y: &Sinogram,
    geom: &ScanGeometry,
    params: &BlockParams,
    activation: Activation,
) -> Result<(ImageGrid, (ImageGrid, SpatialTrace))> {
    let mut residual = forward_project(x, geom)?;
    residual.values -= &y.values;
    let atr = back_project(&residual, geom)?;
    let (phi, trace) = cnn_module_phi_traced(x, &params.spatial, activation)?;
    let values = &x.values - &(&atr.values * params.step_size) + &phi.values;
    Ok((ImageGrid { values }, (atr, trace)))
}

/// One graph-augmented step: the plain step plus the patch-graph
/// correction assembled back into image space.
pub fn magic_block(
    x: &ImageGrid,
    y: &Sinogram,
    geom: &ScanGeometry,
    graph: &SparseGraph,
    layout: &PatchLayout,
    params: &BlockParams,
    activation: Activation,
) -> Result<ImageGrid> {
    if graph.n_nodes() != layout.n_patches() {
        return Err(Error::config(format!(
            "graph has {} nodes, layout produces {} patches",
            graph.n_nodes(),
            layout.n_patches()
        )));
    }
    let (base, _) = learn_block_traced(x, y, geom, params, activation)?;
    let patches = extract_patches(x, layout)?;
    let psi = crate::graphconv::gcn_module_psi(
        &patches,
        graph.propagation(),
        &params.graph,
        activation,
    )?;
    let psi_img = assemble_patches(&psi, layout)?;
    Ok(ImageGrid {
        values: base.values + psi_img.values,
    })
}

/// Intermediates of one block, kept for the backward pass.
#[derive(Debug, Clone)]
struct BlockTape {
    x_in: ImageGrid,
    /// At(Ax - y), reused for the step-size gradient.
    atr: ImageGrid,
    spatial: SpatialTrace,
    psi: Option<PsiTrace>,
    used_fine_graph: bool,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    blocks: Vec<BlockTape>,
    coarse_graph: Option<SparseGraph>,
    fine_graph: Option<SparseGraph>,
    layout: PatchLayout,
    /// How many times an adjacency was constructed; exactly 2 with the
    /// graph path enabled, 0 without.
    pub adjacency_builds: usize,
    pub output: ImageGrid,
}

/// Run all blocks with the two-stage adjacency schedule, recording the
/// tape for reverse mode.
pub fn forward_pass(
    net: &MagicNetwork,
    geom: &ScanGeometry,
    x0: &ImageGrid,
    y: &Sinogram,
) -> Result<(ImageGrid, ForwardTape)> {
    net.validate()?;
    geom.validate()?;
    x0.matches(geom)?;
    y.matches(geom)?;
    let cfg = &net.config;
    let layout = cfg.patch_layout()?;
    let activation = cfg.activation;
    let mut builds = 0usize;
    let coarse_graph = if cfg.graph_enabled {
        let patches = extract_patches(x0, &layout)?;
        builds += 1;
        Some(build_graph(&patches, cfg.neighbors)?)
    } else {
        None
    };

    let mut fine_graph: Option<SparseGraph> = None;
    let mut x = x0.clone();
    let mut tapes = Vec::with_capacity(cfg.n_blocks);
    for (t, params) in net.blocks.iter().enumerate() {
        let use_fine = t >= cfg.n_coarse;
        let (base, (atr, spatial_trace)) = learn_block_traced(&x, y, geom, params, activation)?;
        let mut out = base;
        let mut psi_trace = None;
        if cfg.graph_enabled {
            let graph = if use_fine {
                fine_graph.as_ref().expect("fine graph built at stage switch")
            } else {
                coarse_graph.as_ref().expect("coarse graph built up front")
            };
            let patches = extract_patches(&x, &layout)?;
            let (psi, trace) =
                gcn_module_psi_traced(&patches, graph.propagation(), &params.graph, activation)?;
            let psi_img = assemble_patches(&psi, &layout)?;
            out.values += &psi_img.values;
            psi_trace = Some(trace);
        }
        tapes.push(BlockTape {
            x_in: x,
            atr,
            spatial: spatial_trace,
            psi: psi_trace,
            used_fine_graph: use_fine,
        });
        x = out;
        // The fine-stage adjacency comes from the iterate right after the
        // last coarse block, even when no fine blocks remain.
        if cfg.graph_enabled && t + 1 == cfg.n_coarse {
            let patches = extract_patches(&x, &layout)?;
            builds += 1;
            fine_graph = Some(build_graph(&patches, cfg.neighbors)?);
        }
    }
    let tape = ForwardTape {
        blocks: tapes,
        coarse_graph,
        fine_graph,
        layout,
        adjacency_builds: builds,
        output: x.clone(),
    };
    Ok((x, tape))
}

/// Forward pass without keeping the tape.
pub fn reconstruct(
    net: &MagicNetwork,
    geom: &ScanGeometry,
    x0: &ImageGrid,
    y: &Sinogram,
) -> Result<ImageGrid> {
    Ok(forward_pass(net, geom, x0, y)?.0)
}

/// Gradients of one block's parameters.
#[derive(Debug, Clone)]
pub struct BlockGradients {
    pub step_size: f64,
    pub w1: Array4<f64>,
    pub w2: Array4<f64>,
    pub w3: Array4<f64>,
    pub theta1: Array2<f64>,
    pub theta2: Array2<f64>,
}

/// Gradients for every network parameter, shaped like the network.
#[derive(Debug, Clone)]
pub struct NetworkGradients {
    pub blocks: Vec<BlockGradients>,
}

impl NetworkGradients {
    pub fn zeros_like(net: &MagicNetwork) -> Self {
        let blocks = net
            .blocks
            .iter()
            .map(|b| BlockGradients {
                step_size: 0.0,
                w1: Array4::zeros(b.spatial.w1.dim()),
                w2: Array4::zeros(b.spatial.w2.dim()),
                w3: Array4::zeros(b.spatial.w3.dim()),
                theta1: Array2::zeros(b.graph.theta1.dim()),
                theta2: Array2::zeros(b.graph.theta2.dim()),
            })
            .collect();
        NetworkGradients { blocks }
    }

    /// Elementwise accumulate, for batch averaging.
    pub fn add(&mut self, other: &NetworkGradients) {
        assert_eq!(self.blocks.len(), other.blocks.len());
        for (a, b) in self.blocks.iter_mut().zip(other.blocks.iter()) {
            a.step_size += b.step_size;
            a.w1 += &b.w1;
            a.w2 += &b.w2;
            a.w3 += &b.w3;
            a.theta1 += &b.theta1;
            a.theta2 += &b.theta2;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for b in self.blocks.iter_mut() {
            b.step_size *= s;
            b.w1 *= s;
            b.w2 *= s;
            b.w3 *= s;
            b.theta1 *= s;
            b.theta2 *= s;
        }
    }

    /// Euclidean norm over every entry.
    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0;
        for b in &self.blocks {
            acc += b.step_size * b.step_size;
            for t in [&b.w1, &b.w2, &b.w3] {
                acc += t.iter().map(|v| v * v).sum::<f64>();
            }
            for t in [&b.theta1, &b.theta2] {
                acc += t.iter().map(|v| v * v).sum::<f64>();
            }
        }
        acc.sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().all(|b| {
            b.step_size.is_finite()
                && [&b.w1, &b.w2, &b.w3].iter().all(|t| t.iter().all(|v| v.is_finite()))
                && [&b.theta1, &b.theta2]
                    .iter()
                    .all(|t| t.iter().all(|v| v.is_finite()))
        })
    }
}

/// Reverse-mode sweep through the tape. `loss_grad` is the gradient of
/// the scalar loss with respect to the final image. Returns parameter
/// gradients and, as a byproduct, the gradient with respect to the
/// initial image.
pub fn backward_pass(
    net: &MagicNetwork,
    geom: &ScanGeometry,
    tape: &ForwardTape,
    loss_grad: &ImageGrid,
) -> Result<(NetworkGradients, ImageGrid)> {
    if tape.blocks.len() != net.blocks.len() {
        return Err(Error::internal(format!(
            "tape has {} blocks, network has {}",
            tape.blocks.len(),
            net.blocks.len()
        )));
    }
    if net.config.graph_enabled && (tape.coarse_graph.is_none() || tape.fine_graph.is_none()) {
        return Err(Error::internal("tape is missing its adjacency stages"));
    }
    if loss_grad.values.dim() != tape.output.values.dim() {
        return Err(Error::input(format!(
            "loss gradient is {:?}, output is {:?}",
            loss_grad.values.dim(),
            tape.output.values.dim()
        )));
    }
    let activation = net.config.activation;
    let mut grads = NetworkGradients::zeros_like(net);
    let mut g = loss_grad.clone();
    for (t, (params, block_tape)) in net
        .blocks
        .iter()
        .zip(tape.blocks.iter())
        .enumerate()
        .rev()
    {
        let out = &mut grads.blocks[t];
        // Step size: d/d alpha of -alpha * At(Ax - y) under <g, .>.
        out.step_size = -g
            .values
            .iter()
            .zip(block_tape.atr.values.iter())
            .map(|(a, b)| a * b)
            .sum::<f64>();

        // CNN path.
        let spatial = cnn_module_phi_backward(
            &g,
            &block_tape.x_in,
            &block_tape.spatial,
            &params.spatial,
            activation,
        )?;
        out.w1 = spatial.w1;
        out.w2 = spatial.w2;
        out.w3 = spatial.w3;

        // Graph path; the adjacency is a constant of the stage.
        let mut psi_input_grad: Option<ImageGrid> = None;
        if let Some(psi_trace) = &block_tape.psi {
            let graph = if block_tape.used_fine_graph {
                tape.fine_graph.as_ref().expect("checked above")
            } else {
                tape.coarse_graph.as_ref().expect("checked above")
            };
            let patch_cotangent = assemble_adjoint(&g, &tape.layout)?;
            let psi = gcn_module_psi_backward(
                &patch_cotangent,
                psi_trace,
                graph.propagation(),
                &params.graph,
                activation,
            )?;
            out.theta1 = psi.theta1;
            out.theta2 = psi.theta2;
            psi_input_grad = Some(extract_adjoint(&psi.input, &tape.layout)?);
        }

        // Input gradient: (I - alpha AtA) g + Phi path + Psi path.
        let normal = normal_operator(&g, geom)?;
        let mut next =
            &g.values - &(&normal.values * params.step_size) + &spatial.input.values;
        if let Some(psi_grad) = psi_input_grad {
            next += &psi_grad.values;
        }
        g = ImageGrid { values: next };
    }
    Ok((grads, g))
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"MAGNET01";

fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

/// Serialize the network to a versioned binary container plus a JSON
/// sidecar of caller-provided metadata next to it.
pub fn save_checkpoint(
    net: &MagicNetwork,
    metadata: &serde_json::Value,
    path: &Path,
) -> Result<()> {
    net.validate()?;
    let config_json = serde_json::to_vec(&net.config)
        .map_err(|e| Error::internal(format!("config serialization: {e}")))?;
    let mut bytes = Vec::new();
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(config_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&config_json);
    let push_tensor = |bytes: &mut Vec<u8>, values: &mut dyn Iterator<Item = f64>, len: usize| {
        bytes.extend_from_slice(&(len as u64).to_le_bytes());
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    };
    for block in &net.blocks {
        bytes.extend_from_slice(&block.step_size.to_le_bytes());
        push_tensor(&mut bytes, &mut block.spatial.w1.iter().cloned(), block.spatial.w1.len());
        push_tensor(&mut bytes, &mut block.spatial.w2.iter().cloned(), block.spatial.w2.len());
        push_tensor(&mut bytes, &mut block.spatial.w3.iter().cloned(), block.spatial.w3.len());
        push_tensor(&mut bytes, &mut block.graph.theta1.iter().cloned(), block.graph.theta1.len());
        push_tensor(&mut bytes, &mut block.graph.theta2.iter().cloned(), block.graph.theta2.len());
    }
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    let sidecar = sidecar_path(path);
    let pretty = serde_json::to_vec_pretty(metadata)
        .map_err(|e| Error::internal(format!("metadata serialization: {e}")))?;
    fs::write(&sidecar, pretty).map_err(|e| Error::io(&sidecar, e))
}

/// Load a checkpoint written by `save_checkpoint`, including the sidecar.
pub fn load_checkpoint(path: &Path) -> Result<(MagicNetwork, serde_json::Value)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let parse = |offset: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        offset,
        message,
    };
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(parse(*pos, format!("file truncated, needed {n} more bytes")));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let magic = take(&mut pos, 8)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(parse(0, "not a model checkpoint (bad magic)".to_string()));
    }
    let len_bytes = take(&mut pos, 8)?;
    let config_len = u64::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
    let config_at = pos;
    let config_bytes = take(&mut pos, config_len)?;
    let config: NetworkConfig = serde_json::from_slice(config_bytes)
        .map_err(|e| parse(config_at, format!("config block: {e}")))?;
    config.validate().map_err(|e| parse(config_at, e.to_string()))?;

    let d = config.feature_len();
    let shapes = [
        (config.channels, 1usize, 3usize, 3usize),
        (config.channels, config.channels, 3, 3),
        (1, config.channels, 3, 3),
    ];
    let read_f64 = |pos: &mut usize| -> Result<f64> {
        let b = take(pos, 8)?;
        let v = f64::from_le_bytes(b.try_into().unwrap());
        if !v.is_finite() {
            return Err(parse(*pos - 8, format!("non-finite parameter {v}")));
        }
        Ok(v)
    };
    let read_tensor = |pos: &mut usize, expect: usize| -> Result<Vec<f64>> {
        let at = *pos;
        let len_b = take(pos, 8)?;
        let len = u64::from_le_bytes(len_b.try_into().unwrap()) as usize;
        if len != expect {
            return Err(parse(at, format!("tensor holds {len} values, expected {expect}")));
        }
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            out.push(read_f64(pos)?);
        }
        Ok(out)
    };
    let mut blocks = Vec::with_capacity(config.n_blocks);
    for _ in 0..config.n_blocks {
        let step_size = read_f64(&mut pos)?;
        let w1 = read_tensor(&mut pos, shapes[0].0 * shapes[0].1 * 9)?;
        let w2 = read_tensor(&mut pos, shapes[1].0 * shapes[1].1 * 9)?;
        let w3 = read_tensor(&mut pos, shapes[2].0 * shapes[2].1 * 9)?;
        let t1 = read_tensor(&mut pos, d * config.graph_width)?;
        let t2 = read_tensor(&mut pos, config.graph_width * d)?;
        let to4 = |v: Vec<f64>, s: (usize, usize, usize, usize)| {
            Array4::from_shape_vec(s, v).expect("length checked")
        };
        blocks.push(BlockParams {
            step_size,
            spatial: SpatialKernels {
                w1: to4(w1, shapes[0]),
                w2: to4(w2, shapes[1]),
                w3: to4(w3, shapes[2]),
            },
            graph: GraphKernels {
                theta1: Array2::from_shape_vec((d, config.graph_width), t1).expect("checked"),
                theta2: Array2::from_shape_vec((config.graph_width, d), t2).expect("checked"),
            },
        });
    }
    if pos != bytes.len() {
        return Err(parse(pos, format!("{} trailing bytes", bytes.len() - pos)));
    }
    let net = MagicNetwork { config, blocks };
    net.validate()?;
    let sidecar = sidecar_path(path);
    let meta_bytes = fs::read(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let metadata = serde_json::from_slice(&meta_bytes).map_err(|e| Error::Parse {
        path: sidecar.clone(),
        offset: 0,
        message: format!("sidecar: {e}"),
    })?;
    Ok((net, metadata))
}
