//! Plain 2-D convolution and the three-layer CNN regularizer used inside
//! every unrolled block, with hand-derived adjoints for reverse mode.
//!
//! Convolution is cross-correlation with zero padding, so the output keeps
//! the input shape and the adjoint is another correlation with flipped
//! kernels. Kernel stacks are indexed (out_channel, in_channel, ky, kx).

use ndarray::{Array3, Array4};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ImageGrid;

/// Pointwise nonlinearity between convolution layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative at x; the rectifier uses subgradient 0 at the kink.
    pub fn grad(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::config(format!(
                "unknown activation {other:?}; expected relu or identity"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }
}

fn check_conv_shapes(input: &Array3<f64>, kernels: &Array4<f64>) -> Result<(usize, usize)> {
    let (c_in, _, _) = input.dim();
    let (_, kc_in, kh, kw) = kernels.dim();
    if kc_in != c_in {
        return Err(Error::input(format!(
            "kernel expects {kc_in} input channels, image has {c_in}"
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 || kh == 0 || kw == 0 {
        return Err(Error::input(format!(
            "kernel sides must be odd, got {kh}x{kw}"
        )));
    }
    Ok((kh, kw))
}

/// Zero-padded same-size cross-correlation. Output channel co holds
/// sum over ci of input[ci] correlated with kernels[co, ci].
pub fn conv2d(input: &Array3<f64>, kernels: &Array4<f64>) -> Result<Array3<f64>> {
    let (kh, kw) = check_conv_shapes(input, kernels)?;
    let (c_in, m, n) = input.dim();
    let c_out = kernels.dim().0;
    let (ch, cw) = (kh / 2, kw / 2);
    let planes: Vec<ndarray::Array2<f64>> = (0..c_out)
        .into_par_iter()
        .map(|co| {
            let mut plane = ndarray::Array2::zeros((m, n));
            for ci in 0..c_in {
                for u in 0..kh {
                    for v in 0..kw {
                        let k = kernels[[co, ci, u, v]];
                        if k == 0.0 {
                            continue;
                        }
                        // input row = i + u - ch, clipped to the image.
                        let i_lo = ch.saturating_sub(u);
                        let i_hi = (m + ch).saturating_sub(u).min(m);
                        let j_lo = cw.saturating_sub(v);
                        let j_hi = (n + cw).saturating_sub(v).min(n);
                        for i in i_lo..i_hi {
                            let src = input.index_axis(ndarray::Axis(0), ci);
                            let row = src.row(i + u - ch);
                            for j in j_lo..j_hi {
                                plane[[i, j]] += k * row[j + v - cw];
                            }
                        }
                    }
                }
            }
            plane
        })
        .collect();
    let mut out = Array3::zeros((c_out, m, n));
    for (co, plane) in planes.into_iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), co).assign(&plane);
    }
    Ok(out)
}

/// Adjoint of `conv2d` with respect to its input: maps an output-shaped
/// gradient back to an input-shaped one.
pub fn conv2d_adjoint_input(grad_out: &Array3<f64>, kernels: &Array4<f64>) -> Result<Array3<f64>> {
    let (c_out, m, n) = grad_out.dim();
    let (kc_out, c_in, kh, kw) = kernels.dim();
    if kc_out != c_out {
        return Err(Error::input(format!(
            "kernel produces {kc_out} channels, gradient has {c_out}"
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::input(format!(
            "kernel sides must be odd, got {kh}x{kw}"
        )));
    }
    let (ch, cw) = (kh / 2, kw / 2);
    let planes: Vec<ndarray::Array2<f64>> = (0..c_in)
        .into_par_iter()
        .map(|ci| {
            let mut plane = ndarray::Array2::zeros((m, n));
            for co in 0..c_out {
                let g = grad_out.index_axis(ndarray::Axis(0), co);
                for u in 0..kh {
                    for v in 0..kw {
                        let k = kernels[[co, ci, u, v]];
                        if k == 0.0 {
                            continue;
                        }
                        // gradient row = a - u + ch for input row a.
                        let a_lo = u.saturating_sub(ch);
                        let a_hi = (m + u).saturating_sub(ch).min(m);
                        let b_lo = v.saturating_sub(cw);
                        let b_hi = (n + v).saturating_sub(cw).min(n);
                        for a in a_lo..a_hi {
                            let row = g.row(a + ch - u);
                            for b in b_lo..b_hi {
                                plane[[a, b]] += k * row[b + cw - v];
                            }
                        }
                    }
                }
            }
            plane
        })
        .collect();
    let mut out = Array3::zeros((c_in, m, n));
    for (ci, plane) in planes.into_iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), ci).assign(&plane);
    }
    Ok(out)
}

/// Gradient of `conv2d` with respect to the kernels for a given input and
/// output-shaped gradient.
pub fn conv2d_kernel_grad(
    input: &Array3<f64>,
    grad_out: &Array3<f64>,
    kh: usize,
    kw: usize,
) -> Result<Array4<f64>> {
    let (c_in, m, n) = input.dim();
    let (c_out, gm, gn) = grad_out.dim();
    if (gm, gn) != (m, n) {
        return Err(Error::input(format!(
            "gradient is {gm}x{gn}, input is {m}x{n}"
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 || kh == 0 || kw == 0 {
        return Err(Error::input(format!(
            "kernel sides must be odd, got {kh}x{kw}"
        )));
    }
    let (ch, cw) = (kh / 2, kw / 2);
    let grads: Vec<Array3<f64>> = (0..c_out)
        .into_par_iter()
        .map(|co| {
            let g = grad_out.index_axis(ndarray::Axis(0), co);
            let mut slab = Array3::zeros((c_in, kh, kw));
            for ci in 0..c_in {
                let src = input.index_axis(ndarray::Axis(0), ci);
                for u in 0..kh {
                    for v in 0..kw {
                        let i_lo = ch.saturating_sub(u);
                        let i_hi = (m + ch).saturating_sub(u).min(m);
                        let j_lo = cw.saturating_sub(v);
                        let j_hi = (n + cw).saturating_sub(v).min(n);
                        let mut acc = 0.0;
                        for i in i_lo..i_hi {
                            let grow = g.row(i);
                            let srow = src.row(i + u - ch);
                            for j in j_lo..j_hi {
                                acc += grow[j] * srow[j + v - cw];
                            }
                        }
                        slab[[ci, u, v]] = acc;
                    }
                }
            }
            slab
        })
        .collect();
    let mut out = Array4::zeros((c_out, c_in, kh, kw));
    for (co, slab) in grads.into_iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), co).assign(&slab);
    }
    Ok(out)
}

const KERNEL_SIDE: usize = 3;

/// The three 3x3 kernel stacks of the CNN regularizer: 1 -> c -> c -> 1
/// channels.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialKernels {
    pub w1: Array4<f64>,
    pub w2: Array4<f64>,
    pub w3: Array4<f64>,
}

impl SpatialKernels {
    /// Zero-mean uniform init scaled by fan-in: each weight is drawn from
    /// ±1/sqrt(in_channels · 3 · 3).
    pub fn init(channels: usize, rng: &mut impl Rng) -> Result<Self> {
        if channels == 0 {
            return Err(Error::config("channel width must be at least 1"));
        }
        let mut draw = |c_out: usize, c_in: usize| {
            let bound = 1.0 / ((c_in * KERNEL_SIDE * KERNEL_SIDE) as f64).sqrt();
            let mut k = Array4::zeros((c_out, c_in, KERNEL_SIDE, KERNEL_SIDE));
            for v in k.iter_mut() {
                *v = rng.random_range(-bound..bound);
            }
            k
        };
        Ok(SpatialKernels {
            w1: draw(channels, 1),
            w2: draw(channels, channels),
            w3: draw(1, channels),
        })
    }

    pub fn zeros(channels: usize) -> Result<Self> {
        if channels == 0 {
            return Err(Error::config("channel width must be at least 1"));
        }
        Ok(SpatialKernels {
            w1: Array4::zeros((channels, 1, KERNEL_SIDE, KERNEL_SIDE)),
            w2: Array4::zeros((channels, channels, KERNEL_SIDE, KERNEL_SIDE)),
            w3: Array4::zeros((1, channels, KERNEL_SIDE, KERNEL_SIDE)),
        })
    }

    pub fn channels(&self) -> usize {
        self.w1.dim().0
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        let expect = [
            (self.w1.dim(), (c, 1, KERNEL_SIDE, KERNEL_SIDE)),
            (self.w2.dim(), (c, c, KERNEL_SIDE, KERNEL_SIDE)),
            (self.w3.dim(), (1, c, KERNEL_SIDE, KERNEL_SIDE)),
        ];
        for (got, want) in expect {
            if got != want {
                return Err(Error::config(format!(
                    "kernel stack is {got:?}, expected {want:?}"
                )));
            }
        }
        for w in [&self.w1, &self.w2, &self.w3] {
            if w.iter().any(|v| !v.is_finite()) {
                return Err(Error::config("kernel weights must be finite"));
            }
        }
        Ok(())
    }
}

/// Pre-activation intermediates of one CNN module application.
#[derive(Debug, Clone)]
pub struct SpatialTrace {
    pub z1: Array3<f64>,
    pub z2: Array3<f64>,
}

/// Parameter and input gradients of one CNN module application.
#[derive(Debug, Clone)]
pub struct SpatialGradients {
    pub w1: Array4<f64>,
    pub w2: Array4<f64>,
    pub w3: Array4<f64>,
    pub input: ImageGrid,
}

fn image_as_stack(img: &ImageGrid) -> Array3<f64> {
    let (m, n) = img.values.dim();
    img.values
        .clone()
        .into_shape_with_order((1, m, n))
        .expect("reshape to single-channel stack")
}

fn map_activation(x: &Array3<f64>, activation: Activation) -> Array3<f64> {
    x.mapv(|v| activation.apply(v))
}

/// The regularizer w3 * sigma(w2 * sigma(w1 * x)) with no outer
/// activation; returns the pre-activation tape alongside the output.
pub fn cnn_module_phi_traced(
    x: &ImageGrid,
    kernels: &SpatialKernels,
    activation: Activation,
) -> Result<(ImageGrid, SpatialTrace)> {
    kernels.validate()?;
    let stack = image_as_stack(x);
    let z1 = conv2d(&stack, &kernels.w1)?;
    let a1 = map_activation(&z1, activation);
    let z2 = conv2d(&a1, &kernels.w2)?;
    let a2 = map_activation(&z2, activation);
    let out = conv2d(&a2, &kernels.w3)?;
    let (m, n) = x.values.dim();
    let values = out
        .into_shape_with_order((m, n))
        .expect("single output channel");
    Ok((ImageGrid { values }, SpatialTrace { z1, z2 }))
}

/// Forward-only variant of the CNN module.
pub fn cnn_module_phi(
    x: &ImageGrid,
    kernels: &SpatialKernels,
    activation: Activation,
) -> Result<ImageGrid> {
    Ok(cnn_module_phi_traced(x, kernels, activation)?.0)
}

/// Reverse-mode gradients of the CNN module; activations are recomputed
/// from the stored pre-activations.
pub fn cnn_module_phi_backward(
    grad_out: &ImageGrid,
    x: &ImageGrid,
    trace: &SpatialTrace,
    kernels: &SpatialKernels,
    activation: Activation,
) -> Result<SpatialGradients> {
    let (m, n) = x.values.dim();
    if grad_out.values.dim() != (m, n) {
        return Err(Error::input(format!(
            "gradient is {:?}, image is {m}x{n}",
            grad_out.values.dim()
        )));
    }
    let g3 = image_as_stack(grad_out);
    let a2 = map_activation(&trace.z2, activation);
    let g_w3 = conv2d_kernel_grad(&a2, &g3, KERNEL_SIDE, KERNEL_SIDE)?;
    let g_a2 = conv2d_adjoint_input(&g3, &kernels.w3)?;
    let g_z2 = &g_a2 * &trace.z2.mapv(|v| activation.grad(v));
    let a1 = map_activation(&trace.z1, activation);
    let g_w2 = conv2d_kernel_grad(&a1, &g_z2, KERNEL_SIDE, KERNEL_SIDE)?;
    let g_a1 = conv2d_adjoint_input(&g_z2, &kernels.w2)?;
    let g_z1 = &g_a1 * &trace.z1.mapv(|v| activation.grad(v));
    let g_w1 = conv2d_kernel_grad(&image_as_stack(x), &g_z1, KERNEL_SIDE, KERNEL_SIDE)?;
    let g_x = conv2d_adjoint_input(&g_z1, &kernels.w1)?;
    let values = g_x
        .into_shape_with_order((m, n))
        .expect("single input channel");
    Ok(SpatialGradients {
        w1: g_w1,
        w2: g_w2,
        w3: g_w3,
        input: ImageGrid { values },
    })
}
