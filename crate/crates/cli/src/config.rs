use std::fmt::Write as _;
use std::path::Path;

use magic_ct::data::PhantomKind;
use magic_ct::error::{Error, Result};
use magic_ct::experiment::{fan_geometry, DeskConfig};
use magic_ct::fbp::RampWindow;
use magic_ct::geometry::ScanGeometry;
use magic_ct::metrics::Roi;
use magic_ct::noise::DoseModel;
use magic_ct::patchgraph::PatchLayout;
use magic_ct::spatialconv::Activation;
use magic_ct::training::{LossWeights, TrainConfig};
use magic_ct::unrolled::NetworkConfig;
use serde::{Deserialize, Serialize};
use toml::value::{Table, Value};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub phantom: String,
    pub train_count: usize,
    pub test_count: usize,
    pub image_size: usize,
    pub labeled_fraction: f64,
    pub attenuation_per_mm: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            phantom: "random-ellipses".into(),
            train_count: 20,
            test_count: 5,
            image_size: 64,
            labeled_fraction: 1.0,
            attenuation_per_mm: 0.02,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GeometrySection {
    pub n_views: usize,
    pub n_detectors: usize,
    pub source_radius_mm: f64,
    pub detector_radius_mm: f64,
    pub detector_arc_mm: f64,
}

impl Default for GeometrySection {
    fn default() -> Self {
        GeometrySection {
            n_views: 180,
            n_detectors: 128,
            source_radius_mm: 250.0,
            detector_radius_mm: 250.0,
            detector_arc_mm: 400.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DoseSection {
    /// Tiers simulated by `simulate`; training uses the first entry.
    pub presets: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub incident_photons: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub electronic_variance: Option<f64>,
}

impl Default for DoseSection {
    fn default() -> Self {
        DoseSection {
            presets: vec!["10%".into()],
            incident_photons: None,
            electronic_variance: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FbpSection {
    pub window: String,
}

impl Default for FbpSection {
    fn default() -> Self {
        FbpSection { window: "hann".into() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkSection {
    pub n_blocks: usize,
    pub n_coarse: usize,
    pub channels: usize,
    pub graph_width: usize,
    pub patch_size: usize,
    pub patch_step: usize,
    pub neighbors: usize,
    pub activation: String,
    pub graph_enabled: bool,
}

impl Default for NetworkSection {
    fn default() -> Self {
        NetworkSection {
            n_blocks: 6,
            n_coarse: 3,
            channels: 8,
            graph_width: 32,
            patch_size: 6,
            patch_step: 3,
            neighbors: 8,
            activation: "relu".into(),
            graph_enabled: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    /// "semi" mixes labeled and unlabeled samples; "supervised" trains on
    /// the labeled subset only.
    pub mode: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub mse_weight: f64,
    pub projection_weight: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            mode: "semi".into(),
            epochs: 100,
            batch_size: 1,
            learning_rate: 1e-3,
            clip_norm: 10.0,
            mse_weight: 1.0,
            projection_weight: 1.0,
            max_steps: Some(1500),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DisplaySection {
    pub window_lo: f64,
    pub window_hi: f64,
    /// Difference images are windowed to [0, diff_hi].
    pub diff_hi: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hu_slope: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hu_intercept: Option<f64>,
}

impl Default for DisplaySection {
    fn default() -> Self {
        DisplaySection {
            window_lo: 0.0,
            window_hi: 0.04,
            diff_hi: 0.01,
            hu_slope: None,
            hu_intercept: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsSection {
    /// [row, col, rows, cols]; empty means a centered square of half the
    /// image side.
    pub roi: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr_peak: Option<f64>,
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection { roi: vec![], psnr_peak: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSection {
    pub parameter: String,
    pub values: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection { parameter: "patch_size".into(), values: vec![4.0, 6.0, 8.0] }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct CliConfig {
    pub seed: u64,
    pub data: DataSection,
    pub geometry: GeometrySection,
    pub dose: DoseSection,
    pub fbp: FbpSection,
    pub network: NetworkSection,
    pub train: TrainSection,
    pub display: DisplaySection,
    pub metrics: MetricsSection,
    pub sweep: SweepSection,
}

/// Option-typed keys that are legal but absent from the default table.
const OPTIONAL_KEYS: [&str; 6] = [
    "dose.incident_photons",
    "dose.electronic_variance",
    "train.max_steps",
    "display.hu_slope",
    "display.hu_intercept",
    "metrics.psnr_peak",
];

fn flatten(prefix: &str, table: &Table, out: &mut Vec<(String, Value)>) {
    for (key, value) in table {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match value {
            Value::Table(inner) => flatten(&path, inner, out),
            other => out.push((path, other.clone())),
        }
    }
}

fn merge_into(base: &mut Table, overlay: &Table) {
    for (key, value) in overlay {
        match (base.get_mut(key), value) {
            (Some(Value::Table(b)), Value::Table(o)) => merge_into(b, o),
            _ => {
                base.insert(key.clone(), value.clone());
            }
        }
    }
}

/// Parse one `--set key.path=value` override into a single-leaf table.
fn override_table(assignment: &str) -> Result<Table> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("--set needs key=value, got {assignment:?}")))?;
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(Error::config(format!("--set key path {path:?} is malformed")));
    }
    // A bare word is a string; anything else must parse as a TOML value.
    let value = match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => Value::String(raw.to_string()),
    };
    let mut table = Table::new();
    let mut keys: Vec<&str> = path.split('.').collect();
    let leaf = keys.pop().unwrap();
    let mut cursor = &mut table;
    for key in keys {
        cursor = match cursor
            .entry(key.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
        {
            Value::Table(t) => t,
            _ => unreachable!(),
        };
    }
    cursor.insert(leaf.to_string(), value);
    Ok(table)
}

/// The effective configuration plus how it was assembled.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: CliConfig,
    /// Key paths filled from defaults because no source set them.
    pub applied_defaults: Vec<(String, Value)>,
    /// Rendered effective config, written into run directories.
    pub echo: String,
}

/// Read the config file (optional), apply `--set` overrides, fill defaults.
/// Unknown keys are collected and reported all at once.
pub fn load_config(path: Option<&Path>, sets: &[String], seed: Option<u64>) -> Result<LoadedConfig> {
    let mut user = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            text.parse::<Table>().map_err(|e| Error::Parse {
                path: p.to_path_buf(),
                offset: e.span().map(|s| s.start).unwrap_or(0),
                message: e.message().to_string(),
            })?
        }
        None => Table::new(),
    };
    for assignment in sets {
        merge_into(&mut user, &override_table(assignment)?);
    }
    if let Some(s) = seed {
        user.insert("seed".into(), Value::Integer(s as i64));
    }

    let default_table: Table = toml::Value::try_from(CliConfig::default())
        .expect("default config serializes")
        .try_into()
        .expect("default config is a table");

    // Reject paths the schema does not know, listing every one.
    let mut default_leaves = Vec::new();
    flatten("", &default_table, &mut default_leaves);
    let mut user_leaves = Vec::new();
    flatten("", &user, &mut user_leaves);
    let known = |path: &str| {
        default_leaves.iter().any(|(p, _)| p == path) || OPTIONAL_KEYS.contains(&path)
    };
    let unknown: Vec<&str> = user_leaves
        .iter()
        .map(|(p, _)| p.as_str())
        .filter(|p| !known(p))
        .collect();
    if !unknown.is_empty() {
        return Err(Error::config(format!("unknown keys: {}", unknown.join(", "))));
    }

    let applied_defaults: Vec<(String, Value)> = default_leaves
        .iter()
        .filter(|(p, _)| !user_leaves.iter().any(|(q, _)| q == p))
        .cloned()
        .collect();

    let mut effective = default_table;
    merge_into(&mut effective, &user);
    let config: CliConfig = Value::Table(effective)
        .try_into()
        .map_err(|e| Error::config(format!("config does not fit the schema: {e}")))?;
    let echo = toml::to_string_pretty(&config).expect("effective config serializes");
    Ok(LoadedConfig { config, applied_defaults, echo })
}

impl CliConfig {
    pub fn scan_geometry(&self) -> ScanGeometry {
        fan_geometry(
            self.data.image_size,
            self.geometry.n_views,
            self.geometry.n_detectors,
            self.geometry.source_radius_mm,
            self.geometry.detector_radius_mm,
            self.geometry.detector_arc_mm,
        )
    }

    pub fn network_config(&self) -> NetworkConfig {
        NetworkConfig {
            n_blocks: self.network.n_blocks,
            n_coarse: self.network.n_coarse,
            channels: self.network.channels,
            graph_width: self.network.graph_width,
            image_rows: self.data.image_size,
            image_cols: self.data.image_size,
            patch_rows: self.network.patch_size,
            patch_cols: self.network.patch_size,
            step_rows: self.network.patch_step,
            step_cols: self.network.patch_step,
            neighbors: self.network.neighbors,
            activation: match self.network.activation.as_str() {
                "identity" => Activation::Identity,
                _ => Activation::Relu,
            },
            graph_enabled: self.network.graph_enabled,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            clip_norm: Some(self.train.clip_norm),
            weights: LossWeights {
                mse: self.train.mse_weight,
                projection: self.train.projection_weight,
            },
            seed: self.seed ^ 0x5EED,
            max_steps: self.train.max_steps,
            diagnostic_dir: None,
        }
    }

    pub fn training_dose(&self) -> Result<DoseModel> {
        match (self.dose.incident_photons, self.dose.electronic_variance) {
            (Some(i0), sigma) => DoseModel::new(i0, sigma.unwrap_or(10.0)),
            (None, _) => DoseModel::preset(
                self.dose
                    .presets
                    .first()
                    .ok_or_else(|| Error::config("dose.presets is empty"))?,
            ),
        }
    }

    pub fn desk_config(&self) -> Result<DeskConfig> {
        Ok(DeskConfig {
            train_count: self.data.train_count,
            test_count: self.data.test_count,
            image_size: self.data.image_size,
            n_views: self.geometry.n_views,
            n_detectors: self.geometry.n_detectors,
            source_radius_mm: self.geometry.source_radius_mm,
            detector_radius_mm: self.geometry.detector_radius_mm,
            detector_arc_mm: self.geometry.detector_arc_mm,
            phantom: match self.data.phantom.as_str() {
                "shepp-logan" => PhantomKind::SheppLogan,
                _ => PhantomKind::RandomEllipses,
            },
            dose: self.training_dose()?,
            attenuation_per_mm: self.data.attenuation_per_mm,
            fbp_window: RampWindow::parse(&self.fbp.window)
                .ok_or_else(|| Error::config(format!("unknown fbp window {:?}", self.fbp.window)))?,
            network: self.network_config(),
            train: self.train_config(),
            labeled_fraction: self.data.labeled_fraction,
            seed: self.seed,
        })
    }

    pub fn roi(&self) -> Roi {
        if self.metrics.roi.len() == 4 {
            Roi {
                row: self.metrics.roi[0],
                col: self.metrics.roi[1],
                rows: self.metrics.roi[2],
                cols: self.metrics.roi[3],
            }
        } else {
            let side = (self.data.image_size / 2).max(1);
            let off = (self.data.image_size - side) / 2;
            Roi { row: off, col: off, rows: side, cols: side }
        }
    }

    /// Every schema violation, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                out.push(msg);
            }
        };

        let d = &self.data;
        check(
            d.phantom == "random-ellipses" || d.phantom == "shepp-logan",
            format!("data.phantom: unknown kind {:?} (random-ellipses or shepp-logan)", d.phantom),
        );
        check(d.train_count >= 1, "data.train_count: need at least 1".into());
        check(d.test_count >= 1, "data.test_count: need at least 1".into());
        check(
            d.image_size >= 16,
            format!("data.image_size: need at least 16, got {}", d.image_size),
        );
        check(
            (0.0..=1.0).contains(&d.labeled_fraction),
            format!("data.labeled_fraction: must lie in [0, 1], got {}", d.labeled_fraction),
        );
        check(
            d.attenuation_per_mm > 0.0 && d.attenuation_per_mm.is_finite(),
            format!("data.attenuation_per_mm: must be positive, got {}", d.attenuation_per_mm),
        );

        let g = &self.geometry;
        check(g.n_views >= 2, format!("geometry.n_views: need at least 2, got {}", g.n_views));
        check(
            g.n_detectors >= 2,
            format!("geometry.n_detectors: need at least 2, got {}", g.n_detectors),
        );
        for (key, v) in [
            ("source_radius_mm", g.source_radius_mm),
            ("detector_radius_mm", g.detector_radius_mm),
            ("detector_arc_mm", g.detector_arc_mm),
        ] {
            check(
                v > 0.0 && v.is_finite(),
                format!("geometry.{key}: must be positive, got {v}"),
            );
        }
        let geometry_ok = g.n_views >= 2
            && g.n_detectors >= 2
            && [g.source_radius_mm, g.detector_radius_mm, g.detector_arc_mm]
                .iter()
                .all(|v| *v > 0.0 && v.is_finite());
        if geometry_ok {
            // Coverage: the fan must see the whole reconstruction circle.
            let geom = self.scan_geometry();
            let arc = geom.detector_pitch_mm * geom.n_detectors as f64;
            let half_arc = arc / 2.0 / geom.source_detector_distance();
            let covered = geom.source_to_center_mm * half_arc.min(std::f64::consts::FRAC_PI_2).sin();
            let fov = geom.pixel_size_mm * d.image_size as f64 / 2.0;
            check(
                covered + 1e-9 >= fov,
                format!(
                    "geometry: detector arc covers a {covered:.1} mm radius but the image \
                     field of view needs {fov:.1} mm; widen detector_arc_mm or the radii"
                ),
            );
        }

        check(
            !self.dose.presets.is_empty() || self.dose.incident_photons.is_some(),
            "dose: set presets or incident_photons".into(),
        );
        for p in &self.dose.presets {
            if let Err(e) = DoseModel::preset(p) {
                check(false, format!("dose.presets: {e}"));
            }
        }
        if let Some(i0) = self.dose.incident_photons {
            if let Err(e) = DoseModel::new(i0, self.dose.electronic_variance.unwrap_or(10.0)) {
                check(false, format!("dose: {e}"));
            }
        }

        check(
            RampWindow::parse(&self.fbp.window).is_some(),
            format!("fbp.window: unknown window {:?} (ramp or hann)", self.fbp.window),
        );

        let n = &self.network;
        check(n.n_blocks >= 1, "network.n_blocks: need at least 1".into());
        check(
            n.n_coarse >= 1 && n.n_coarse <= n.n_blocks,
            format!(
                "network.n_coarse: stage split must satisfy 1 <= n_coarse <= n_blocks, \
                 got {} of {}",
                n.n_coarse, n.n_blocks
            ),
        );
        check(n.channels >= 1, "network.channels: need at least 1".into());
        check(n.graph_width >= 1, "network.graph_width: need at least 1".into());
        check(
            n.patch_size >= 2 && n.patch_size <= d.image_size,
            format!(
                "network.patch_size: must lie in [2, image size], got {}",
                n.patch_size
            ),
        );
        check(
            n.patch_step >= 1 && n.patch_step <= n.patch_size,
            format!(
                "network.patch_step: step must not exceed the patch size or patches \
                 stop overlapping, got step {} with patch {}",
                n.patch_step, n.patch_size
            ),
        );
        check(
            n.activation == "relu" || n.activation == "identity",
            format!("network.activation: unknown activation {:?}", n.activation),
        );
        if let Ok(layout) = PatchLayout::new(
            d.image_size,
            d.image_size,
            n.patch_size,
            n.patch_size,
            n.patch_step.max(1),
            n.patch_step.max(1),
        ) {
            let nodes = layout.anchors.len();
            check(
                n.neighbors >= 1 && n.neighbors < nodes,
                format!(
                    "network.neighbors: must lie in [1, {nodes}) for {nodes} patch nodes, got {}",
                    n.neighbors
                ),
            );
        }

        let t = &self.train;
        check(
            t.mode == "semi" || t.mode == "supervised",
            format!("train.mode: unknown mode {:?} (semi or supervised)", t.mode),
        );
        check(t.epochs >= 1, "train.epochs: need at least 1".into());
        check(t.batch_size >= 1, "train.batch_size: need at least 1".into());
        check(
            t.learning_rate > 0.0 && t.learning_rate.is_finite(),
            format!("train.learning_rate: must be positive, got {}", t.learning_rate),
        );
        check(
            t.clip_norm > 0.0 && t.clip_norm.is_finite(),
            format!("train.clip_norm: must be positive, got {}", t.clip_norm),
        );
        check(
            t.mse_weight >= 0.0 && t.projection_weight >= 0.0
                && t.mse_weight + t.projection_weight > 0.0,
            "train: loss weights must be non-negative and not both zero".into(),
        );
        if let Some(m) = t.max_steps {
            check(m >= 1, "train.max_steps: need at least 1".into());
        }
        if t.mode == "supervised" {
            check(
                d.labeled_fraction > 0.0,
                "train.mode: supervised training needs a labeled fraction above zero".into(),
            );
        }

        let v = &self.display;
        check(
            v.window_hi > v.window_lo && v.window_lo.is_finite() && v.window_hi.is_finite(),
            format!(
                "display: window needs finite hi > lo, got [{}, {}]",
                v.window_lo, v.window_hi
            ),
        );
        check(
            v.diff_hi > 0.0 && v.diff_hi.is_finite(),
            format!("display.diff_hi: must be positive, got {}", v.diff_hi),
        );
        check(
            v.hu_slope.is_some() == v.hu_intercept.is_some(),
            "display: hu_slope and hu_intercept come as a pair".into(),
        );

        let m = &self.metrics;
        check(
            m.roi.is_empty() || m.roi.len() == 4,
            format!("metrics.roi: expected [row, col, rows, cols], got {} values", m.roi.len()),
        );
        if m.roi.len() == 4 {
            let fits = m.roi[2] >= 1
                && m.roi[3] >= 1
                && m.roi[0] + m.roi[2] <= d.image_size
                && m.roi[1] + m.roi[3] <= d.image_size;
            check(
                fits,
                format!(
                    "metrics.roi: {:?} does not fit a {size}x{size} image",
                    m.roi,
                    size = d.image_size
                ),
            );
        }
        if let Some(p) = m.psnr_peak {
            check(p > 0.0 && p.is_finite(), format!("metrics.psnr_peak: must be positive, got {p}"));
        }

        let s = &self.sweep;
        const SWEEPABLE: [&str; 4] = ["n_blocks", "patch_size", "graph_width", "labeled_fraction"];
        check(
            SWEEPABLE.contains(&s.parameter.as_str()),
            format!(
                "sweep.parameter: unknown parameter {:?} (one of {})",
                s.parameter,
                SWEEPABLE.join(", ")
            ),
        );
        check(!s.values.is_empty(), "sweep.values: need at least one value".into());
        for &value in &s.values {
            let ok = if s.parameter == "labeled_fraction" {
                (0.0..=1.0).contains(&value)
            } else {
                value >= 1.0 && value.fract() == 0.0
            };
            check(
                ok,
                format!("sweep.values: {value} is not a valid {} value", s.parameter),
            );
        }

        out
    }
}

/// Human-readable applied-defaults block printed at startup.
pub fn render_defaults(applied: &[(String, Value)]) -> String {
    let mut text = String::new();
    for (path, value) in applied {
        let _ = writeln!(text, "default applied: {path} = {value}");
    }
    text
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn write_config(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn defaults_validate_cleanly() {
        let loaded = load_config(None, &[], None).unwrap();
        assert!(loaded.config.violations().is_empty());
        // Nothing set, so every leaf is a reported default.
        assert!(loaded.applied_defaults.iter().any(|(p, _)| p == "train.learning_rate"));
        assert!(loaded.applied_defaults.iter().any(|(p, _)| p == "seed"));
    }

    #[test]
    fn file_values_override_defaults() {
        let f = write_config("seed = 9\n[train]\nepochs = 3\n");
        let loaded = load_config(Some(f.path()), &[], None).unwrap();
        assert_eq!(loaded.config.seed, 9);
        assert_eq!(loaded.config.train.epochs, 3);
        assert!(!loaded.applied_defaults.iter().any(|(p, _)| p == "train.epochs"));
        assert!(loaded.applied_defaults.iter().any(|(p, _)| p == "train.batch_size"));
    }

    #[test]
    fn set_overrides_beat_the_file() {
        let f = write_config("[train]\nepochs = 3\n");
        let sets = vec!["train.epochs=11".to_string(), "fbp.window=ramp".to_string()];
        let loaded = load_config(Some(f.path()), &sets, None).unwrap();
        assert_eq!(loaded.config.train.epochs, 11);
        assert_eq!(loaded.config.fbp.window, "ramp");
    }

    #[test]
    fn seed_flag_wins() {
        let f = write_config("seed = 9\n");
        let loaded = load_config(Some(f.path()), &[], Some(123)).unwrap();
        assert_eq!(loaded.config.seed, 123);
    }

    #[test]
    fn unknown_keys_are_all_listed() {
        let f = write_config("[train]\nepoches = 3\nlearning = 1.0\n");
        let err = load_config(Some(f.path()), &[], None).unwrap_err().to_string();
        assert!(err.contains("train.epoches"), "{err}");
        assert!(err.contains("train.learning"), "{err}");
    }

    #[test]
    fn violations_are_collected_not_truncated() {
        let f = write_config(
            "[network]\npatch_size = 6\npatch_step = 7\nn_blocks = 4\nn_coarse = 9\n",
        );
        let loaded = load_config(Some(f.path()), &[], None).unwrap();
        let v = loaded.config.violations();
        assert!(v.iter().any(|m| m.contains("patch_step") && m.contains("overlap")), "{v:?}");
        assert!(v.iter().any(|m| m.contains("n_coarse")), "{v:?}");
        assert_eq!(v.len(), 2, "{v:?}");
    }

    #[test]
    fn malformed_toml_is_a_parse_error() {
        let f = write_config("[train\nepochs = 3\n");
        match load_config(Some(f.path()), &[], None) {
            Err(Error::Parse { .. }) => {}
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_set_spec_is_rejected() {
        assert!(load_config(None, &["train.epochs".to_string()], None).is_err());
        assert!(load_config(None, &["=3".to_string()], None).is_err());
    }

    #[test]
    fn set_parses_strings_without_quotes() {
        let sets = vec!["fbp.window=ramp".to_string(), "train.learning_rate=5e-4".to_string()];
        let loaded = load_config(None, &sets, None).unwrap();
        assert_eq!(loaded.config.fbp.window, "ramp");
        assert_eq!(loaded.config.train.learning_rate, 5e-4);
    }

    #[test]
    fn coverage_violation_reported() {
        let f = write_config("[geometry]\ndetector_arc_mm = 40.0\n");
        let loaded = load_config(Some(f.path()), &[], None).unwrap();
        let v = loaded.config.violations();
        assert!(v.iter().any(|m| m.contains("field of view")), "{v:?}");
    }

    #[test]
    fn default_roi_is_centered() {
        let loaded = load_config(None, &[], None).unwrap();
        let roi = loaded.config.roi();
        assert_eq!((roi.row, roi.col, roi.rows, roi.cols), (16, 16, 32, 32));
    }
}
