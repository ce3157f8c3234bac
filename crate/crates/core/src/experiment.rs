//! End-to-end desk-scale experiments: simulate low-dose scans of random
//! phantoms, reconstruct with FBP, train the graph-augmented network and
//! its graph-free counterpart on identical budgets, and compare metrics.
//! Shared by the acceptance suite and the command-line harness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{make_phantom, split_dataset, PhantomKind};
use crate::error::{Error, Result};
use crate::fbp::{fbp_reconstruct, RampWindow};
use crate::geometry::{forward_project, ImageGrid, ScanGeometry, Sinogram};
use crate::metrics::{psnr, ssim};
use crate::noise::{simulate_lowdose, DoseModel};
use crate::spatialconv::Activation;
use crate::training::{train, train_supervised, LossRecord, TrainConfig, TrainSample};
use crate::unrolled::{reconstruct, MagicNetwork, NetworkConfig};

/// Everything that defines one desk experiment run.
#[derive(Debug, Clone)]
pub struct DeskConfig {
    pub train_count: usize,
    pub test_count: usize,
    pub image_size: usize,
    pub n_views: usize,
    pub n_detectors: usize,
    pub source_radius_mm: f64,
    pub detector_radius_mm: f64,
    pub detector_arc_mm: f64,
    pub phantom: PhantomKind,
    pub dose: DoseModel,
    /// Phantoms are generated on [0, 1] and scaled to attenuation per mm.
    pub attenuation_per_mm: f64,
    pub fbp_window: RampWindow,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    /// Fraction of the training set carrying labels.
    pub labeled_fraction: f64,
    /// Seeds phantom shapes, noise, and the data split.
    pub seed: u64,
}

impl DeskConfig {
    pub fn geometry(&self) -> ScanGeometry {
        fan_geometry(
            self.image_size,
            self.n_views,
            self.n_detectors,
            self.source_radius_mm,
            self.detector_radius_mm,
            self.detector_arc_mm,
        )
    }
}

/// Fan-beam geometry with explicit scanner dimensions; the detector arc is
/// given as total arc length and split evenly across cells.
pub fn fan_geometry(
    image_size: usize,
    n_views: usize,
    n_detectors: usize,
    source_radius_mm: f64,
    detector_radius_mm: f64,
    detector_arc_mm: f64,
) -> ScanGeometry {
    ScanGeometry {
        source_to_center_mm: source_radius_mm,
        detector_to_center_mm: detector_radius_mm,
        n_detectors,
        detector_pitch_mm: detector_arc_mm / n_detectors as f64,
        n_views,
        angular_span_rad: 2.0 * std::f64::consts::PI,
        image_rows: image_size,
        image_cols: image_size,
        pixel_size_mm: 0.6641 * 256.0 / image_size as f64,
    }
}

/// Fan-beam geometry covering a centered field of view at any grid size.
pub fn desk_geometry(image_size: usize, n_views: usize, n_detectors: usize) -> ScanGeometry {
    fan_geometry(image_size, n_views, n_detectors, 250.0, 250.0, 400.0)
}

pub fn desk_network(image_size: usize, graph_enabled: bool) -> NetworkConfig {
    NetworkConfig {
        n_blocks: 6,
        n_coarse: 3,
        channels: 8,
        graph_width: 16,
        image_rows: image_size,
        image_cols: image_size,
        patch_rows: 6,
        patch_cols: 6,
        step_rows: 3,
        step_cols: 3,
        neighbors: 8,
        activation: Activation::Relu,
        graph_enabled,
    }
}

/// The frozen configuration behind the acceptance experiments: 20/5
/// random-ellipse phantoms at 64x64, 180 views, 10% dose, six blocks
/// split 3+3.
pub fn desk_config() -> DeskConfig {
    DeskConfig {
        train_count: 20,
        test_count: 5,
        image_size: 64,
        n_views: 180,
        n_detectors: 128,
        source_radius_mm: 250.0,
        detector_radius_mm: 250.0,
        detector_arc_mm: 400.0,
        phantom: PhantomKind::RandomEllipses,
        dose: DoseModel::preset("10%").expect("built-in preset"),
        attenuation_per_mm: 0.02,
        fbp_window: RampWindow::Hann,
        network: desk_network(64, true),
        train: TrainConfig {
            epochs: 100,
            batch_size: 1,
            learning_rate: 1e-3,
            seed: 7,
            max_steps: Some(2000),
            ..TrainConfig::default()
        },
        labeled_fraction: 1.0,
        seed: 20260816,
    }
}

/// One simulated scan: ground truth, measurements, and the FBP input.
#[derive(Debug, Clone)]
pub struct SimulatedCase {
    pub id: String,
    pub truth: ImageGrid,
    pub clean: Sinogram,
    pub noisy: Sinogram,
    pub fbp: ImageGrid,
    pub labeled: bool,
}

/// Simulated train/test split of one desk run.
#[derive(Debug, Clone)]
pub struct SimulatedSet {
    pub train: Vec<SimulatedCase>,
    pub test: Vec<SimulatedCase>,
    pub geometry: ScanGeometry,
}

/// Generate phantoms, project, add dose-dependent noise, and reconstruct
/// the FBP inputs. Deterministic in the config seed.
pub fn simulate_set(config: &DeskConfig) -> Result<SimulatedSet> {
    let geom = config.geometry();
    geom.validate()?;
    if !(config.attenuation_per_mm > 0.0) || !config.attenuation_per_mm.is_finite() {
        return Err(Error::config("attenuation scale must be positive"));
    }
    let total = config.train_count + config.test_count;
    if total == 0 {
        return Err(Error::config("experiment needs at least one phantom"));
    }
    let mut items = Vec::with_capacity(total);
    for i in 0..total {
        let mut phantom = make_phantom(
            config.phantom,
            config.image_size,
            config.image_size,
            config.seed.wrapping_add(i as u64),
        )?;
        phantom.values *= config.attenuation_per_mm;
        items.push((format!("case-{i:03}"), phantom));
    }
    let train_fraction = config.train_count as f64 / total as f64;
    let split = split_dataset(items, train_fraction, config.labeled_fraction, config.seed)?;
    if split.train.len() != config.train_count || split.test.len() != config.test_count {
        return Err(Error::internal(format!(
            "split produced {}/{} cases, wanted {}/{}",
            split.train.len(),
            split.test.len(),
            config.train_count,
            config.test_count
        )));
    }
    let build_case = |index: usize, labeled: bool, noise_tag: u64| -> Result<SimulatedCase> {
        let (id, truth) = &split.items[index];
        let clean = forward_project(truth, &geom)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (noise_tag << 32) ^ index as u64);
        let noisy = simulate_lowdose(&clean, &config.dose, &mut rng)?;
        let fbp = fbp_reconstruct(&noisy, &geom, config.fbp_window)?;
        Ok(SimulatedCase {
            id: id.clone(),
            truth: truth.clone(),
            clean,
            noisy,
            fbp,
            labeled,
        })
    };
    let mut train_cases = Vec::with_capacity(config.train_count);
    for (k, &index) in split.train.iter().enumerate() {
        train_cases.push(build_case(index, split.labeled[k], 1)?);
    }
    let mut test_cases = Vec::with_capacity(config.test_count);
    for &index in &split.test {
        test_cases.push(build_case(index, true, 2)?);
    }
    Ok(SimulatedSet {
        train: train_cases,
        test: test_cases,
        geometry: geom,
    })
}

pub fn to_samples(cases: &[SimulatedCase]) -> Vec<TrainSample> {
    cases
        .iter()
        .map(|c| TrainSample {
            sinogram: c.noisy.clone(),
            initial: c.fbp.clone(),
            label: c.labeled.then(|| c.truth.clone()),
        })
        .collect()
}

/// Per-case and mean quality of one method on the test set.
#[derive(Debug, Clone)]
pub struct MethodMetrics {
    pub psnr_db: Vec<f64>,
    pub ssim: Vec<f64>,
}

impl MethodMetrics {
    pub fn mean_psnr_db(&self) -> f64 {
        self.psnr_db.iter().sum::<f64>() / self.psnr_db.len() as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.ssim.iter().sum::<f64>() / self.ssim.len() as f64
    }
}

pub fn evaluate_images(preds: &[ImageGrid], cases: &[SimulatedCase]) -> Result<MethodMetrics> {
    let mut psnr_db = Vec::with_capacity(cases.len());
    let mut ssim_vals = Vec::with_capacity(cases.len());
    for (pred, case) in preds.iter().zip(cases.iter()) {
        psnr_db.push(psnr(pred, &case.truth, None)?.db_or_infinity());
        ssim_vals.push(ssim(pred, &case.truth, None)?);
    }
    Ok(MethodMetrics {
        psnr_db,
        ssim: ssim_vals,
    })
}

pub fn evaluate_network(net: &MagicNetwork, set: &SimulatedSet) -> Result<MethodMetrics> {
    let mut preds = Vec::with_capacity(set.test.len());
    for case in &set.test {
        preds.push(reconstruct(net, &set.geometry, &case.fbp, &case.noisy)?);
    }
    evaluate_images(&preds, &set.test)
}

/// Outcome of the ordering experiment: FBP input quality versus the two
/// trained networks, plus the canonical metrics table.
#[derive(Debug, Clone)]
pub struct OrderingOutcome {
    pub fbp: MethodMetrics,
    pub magic: MethodMetrics,
    pub learn: MethodMetrics,
    pub magic_network: MagicNetwork,
    pub learn_network: MagicNetwork,
    pub magic_curve: Vec<LossRecord>,
    pub learn_curve: Vec<LossRecord>,
    /// The metrics table as written to disk; byte-stable across reruns.
    pub metrics_csv: String,
}

/// Render the per-case metrics table; float formatting is the shortest
/// round-trip form, so equal runs give equal bytes.
pub fn metrics_csv(
    cases: &[SimulatedCase],
    methods: &[(&str, &MethodMetrics)],
) -> String {
    let mut out = String::from("method,case,psnr_db,ssim\n");
    for (name, m) in methods {
        for (i, case) in cases.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                name, case.id, m.psnr_db[i], m.ssim[i]
            ));
        }
        out.push_str(&format!(
            "{},mean,{},{}\n",
            name,
            m.mean_psnr_db(),
            m.mean_ssim()
        ));
    }
    out
}

/// Train the graph network and the graph-free network on the same data
/// and budget, then score all three methods on the held-out cases.
pub fn run_ordering_experiment(config: &DeskConfig) -> Result<OrderingOutcome> {
    let set = simulate_set(config)?;
    let samples = to_samples(&set.train);
    let geom = &set.geometry;

    let fbp_inputs: Vec<ImageGrid> = set.test.iter().map(|c| c.fbp.clone()).collect();
    let fbp = evaluate_images(&fbp_inputs, &set.test)?;

    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xA11CE);
    let magic_net = MagicNetwork::init(config.network.clone(), geom, &mut init_rng)?;
    let mut learn_cfg = config.network.clone();
    learn_cfg.graph_enabled = false;
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xA11CE);
    let learn_net = MagicNetwork::init(learn_cfg, geom, &mut init_rng)?;

    let magic_out = train(magic_net, geom, &samples, &config.train)?;
    let learn_out = train(learn_net, geom, &samples, &config.train)?;

    let magic = evaluate_network(&magic_out.network, &set)?;
    let learn = evaluate_network(&learn_out.network, &set)?;
    let csv = metrics_csv(
        &set.test,
        &[("fbp", &fbp), ("magic", &magic), ("learn", &learn)],
    );
    Ok(OrderingOutcome {
        fbp,
        magic,
        learn,
        magic_network: magic_out.network,
        learn_network: learn_out.network,
        magic_curve: magic_out.curve,
        learn_curve: learn_out.curve,
        metrics_csv: csv,
    })
}

/// Outcome of the label-budget experiment.
#[derive(Debug, Clone)]
pub struct SemiOutcome {
    pub semi: MethodMetrics,
    pub supervised: MethodMetrics,
    /// Trained with the mixed objective and every label present.
    pub all_label_semi_network: MagicNetwork,
    /// Trained with the purely supervised objective.
    pub supervised_network: MagicNetwork,
    pub labeled_count: usize,
}

/// Train once with a reduced label budget and the mixed objective, once
/// fully supervised, and once with the mixed objective but all labels;
/// the last two must coincide.
pub fn run_semi_experiment(config: &DeskConfig, labeled_fraction: f64) -> Result<SemiOutcome> {
    let mut semi_config = config.clone();
    semi_config.labeled_fraction = labeled_fraction;
    let semi_set = simulate_set(&semi_config)?;

    let mut full_config = config.clone();
    full_config.labeled_fraction = 1.0;
    let full_set = simulate_set(&full_config)?;

    let geom = &semi_set.geometry;
    let init = |cfg: &DeskConfig| -> Result<MagicNetwork> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xA11CE);
        MagicNetwork::init(cfg.network.clone(), geom, &mut rng)
    };

    let semi_samples = to_samples(&semi_set.train);
    let labeled_count = semi_samples.iter().filter(|s| s.label.is_some()).count();
    let semi_out = train(init(config)?, geom, &semi_samples, &config.train)?;

    let full_samples = to_samples(&full_set.train);
    let supervised_out = train_supervised(init(config)?, geom, &full_samples, &config.train)?;
    let all_label_out = train(init(config)?, geom, &full_samples, &config.train)?;

    let semi = evaluate_network(&semi_out.network, &semi_set)?;
    let supervised = evaluate_network(&supervised_out.network, &full_set)?;
    Ok(SemiOutcome {
        semi,
        supervised,
        all_label_semi_network: all_label_out.network,
        supervised_network: supervised_out.network,
        labeled_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    // Small enough to run in seconds while exercising the full pipeline.
    fn tiny_config() -> DeskConfig {
        DeskConfig {
            train_count: 3,
            test_count: 2,
            image_size: 32,
            n_views: 45,
            n_detectors: 48,
            source_radius_mm: 250.0,
            detector_radius_mm: 250.0,
            detector_arc_mm: 400.0,
            phantom: PhantomKind::RandomEllipses,
            dose: DoseModel::preset("10%").unwrap(),
            attenuation_per_mm: 0.02,
            fbp_window: RampWindow::Hann,
            network: NetworkConfig {
                n_blocks: 2,
                n_coarse: 1,
                channels: 2,
                graph_width: 4,
                image_rows: 32,
                image_cols: 32,
                patch_rows: 6,
                patch_cols: 6,
                step_rows: 3,
                step_cols: 3,
                neighbors: 4,
                activation: Activation::Relu,
                graph_enabled: true,
            },
            train: TrainConfig {
                epochs: 100,
                max_steps: Some(12),
                learning_rate: 1e-3,
                seed: 5,
                ..TrainConfig::default()
            },
            labeled_fraction: 1.0,
            seed: 99,
        }
    }

    #[test]
    fn simulation_is_deterministic_and_well_shaped() {
        let config = tiny_config();
        let a = simulate_set(&config).unwrap();
        let b = simulate_set(&config).unwrap();
        assert_eq!(a.train.len(), 3);
        assert_eq!(a.test.len(), 2);
        for (x, y) in a.train.iter().zip(b.train.iter()) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.truth.values, y.truth.values);
            assert_eq!(x.noisy.values, y.noisy.values);
            assert_eq!(x.fbp.values, y.fbp.values);
        }
        // Train and test draw distinct phantoms.
        assert!(a
            .train
            .iter()
            .all(|t| a.test.iter().all(|s| s.id != t.id)));
        // Noise actually perturbs the measurements.
        for c in &a.train {
            assert!(c.noisy.values != c.clean.values);
        }
    }

    #[test]
    fn labeled_fraction_controls_label_count() {
        let mut config = tiny_config();
        config.labeled_fraction = 0.34;
        let set = simulate_set(&config).unwrap();
        let labeled = set.train.iter().filter(|c| c.labeled).count();
        // ceil(0.34 * 3) = 2.
        assert_eq!(labeled, 2);
        assert!(set.test.iter().all(|c| c.labeled));
    }

    #[test]
    fn ordering_experiment_is_byte_deterministic() {
        let config = tiny_config();
        let a = run_ordering_experiment(&config).unwrap();
        let b = run_ordering_experiment(&config).unwrap();
        assert_eq!(a.metrics_csv, b.metrics_csv);
        assert_eq!(a.magic_network, b.magic_network);
        assert!(a.metrics_csv.starts_with("method,case,psnr_db,ssim\n"));
        // 3 methods x (2 cases + mean row) + header.
        assert_eq!(a.metrics_csv.lines().count(), 1 + 3 * 3);
        assert!(a.fbp.psnr_db.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn semi_experiment_all_label_paths_coincide() {
        let config = tiny_config();
        let outcome = run_semi_experiment(&config, 0.34).unwrap();
        assert_eq!(outcome.labeled_count, 2);
        assert_eq!(
            outcome.all_label_semi_network,
            outcome.supervised_network
        );
        assert!(outcome.semi.psnr_db.iter().all(|v| v.is_finite()));
        assert!(outcome.supervised.psnr_db.iter().all(|v| v.is_finite()));
    }
}
