use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use magic_ct::data::{
    export_png, load_image, load_sinogram, make_phantom, save_image, save_sinogram,
    AffineRescale, DisplayWindow, PhantomKind,
};
use magic_ct::error::{Error, Result};
use magic_ct::experiment::{simulate_set, to_samples, SimulatedSet};
use magic_ct::fbp::fbp_reconstruct;
use magic_ct::fbp::RampWindow;
use magic_ct::geometry::ImageGrid;
use magic_ct::metrics::{psnr, roi_stats, ssim, PsnrValue};
use magic_ct::noise::DoseModel;
use magic_ct::patchgraph::{build_graph, extract_patches, PatchLayout};
use magic_ct::training::{train, train_supervised, write_loss_csv, TrainOutcome};
use magic_ct::unrolled::{load_checkpoint, reconstruct, save_checkpoint, MagicNetwork};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{render_defaults, CliConfig, LoadedConfig};

/// A self-contained run directory: effective config echo plus a log.
pub struct RunDir {
    root: PathBuf,
    log: File,
}

impl RunDir {
    pub fn create(out_dir: &Path, loaded: &LoadedConfig) -> Result<Self> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let config_path = out_dir.join("config.toml");
        fs::write(&config_path, &loaded.echo).map_err(|e| Error::io(&config_path, e))?;
        let log_path = out_dir.join("log.txt");
        let mut log = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        let defaults = render_defaults(&loaded.applied_defaults);
        log.write_all(defaults.as_bytes())
            .map_err(|e| Error::io(&log_path, e))?;
        Ok(RunDir { root: out_dir.to_path_buf(), log })
    }

    pub fn log(&mut self, line: &str) {
        println!("{line}");
        let _ = writeln!(self.log, "{line}");
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn phantom_kind(config: &CliConfig) -> PhantomKind {
    match config.data.phantom.as_str() {
        "shepp-logan" => PhantomKind::SheppLogan,
        _ => PhantomKind::RandomEllipses,
    }
}

fn validated(loaded: &LoadedConfig) -> Result<()> {
    let violations = loaded.config.violations();
    if violations.is_empty() {
        return Ok(());
    }
    Err(Error::config(violations.join("; ")))
}

fn simulate_from(config: &CliConfig) -> Result<SimulatedSet> {
    simulate_set(&config.desk_config()?)
}

fn display_window(config: &CliConfig) -> DisplayWindow {
    DisplayWindow { lo: config.display.window_lo, hi: config.display.window_hi }
}

fn rescale(config: &CliConfig) -> Option<AffineRescale> {
    match (config.display.hu_slope, config.display.hu_intercept) {
        (Some(slope), Some(intercept)) => Some(AffineRescale { slope, intercept }),
        _ => None,
    }
}

/// "10%" -> "10pct", "2.5%" -> "2p5pct"; keeps directory names portable.
fn dose_slug(name: &str) -> String {
    name.replace('.', "p").replace('%', "pct")
}

pub fn cmd_validate(loaded: &LoadedConfig) -> Result<()> {
    print!("{}", render_defaults(&loaded.applied_defaults));
    println!("effective configuration:");
    for line in loaded.echo.lines() {
        println!("  {line}");
    }
    let violations = loaded.config.violations();
    if violations.is_empty() {
        println!("configuration valid");
        return Ok(());
    }
    for v in &violations {
        println!("violation: {v}");
    }
    Err(Error::config(format!("{} violation(s)", violations.len())))
}

pub fn cmd_simulate(loaded: &LoadedConfig, out_dir: &Path) -> Result<()> {
    validated(loaded)?;
    let config = &loaded.config;
    let mut run = RunDir::create(out_dir, loaded)?;
    let geom = config.scan_geometry();

    let tiers: Vec<(String, DoseModel)> = if let Some(i0) = config.dose.incident_photons {
        let model = DoseModel::new(i0, config.dose.electronic_variance.unwrap_or(10.0))?;
        vec![("custom".to_string(), model)]
    } else {
        config
            .dose
            .presets
            .iter()
            .map(|p| Ok((p.clone(), DoseModel::preset(p)?)))
            .collect::<Result<_>>()?
    };

    for (name, model) in tiers {
        let mut desk = config.desk_config()?;
        desk.dose = model;
        let set = simulate_set(&desk)?;
        let tier = dose_slug(&name);
        let mut manifest = Vec::new();
        for (split, cases) in [("train", &set.train), ("test", &set.test)] {
            for case in cases.iter() {
                let base = format!("{tier}/{}", case.id);
                let truth = run.path(&format!("{base}-truth.raw"));
                let clean = run.path(&format!("{base}-clean.raw"));
                let noisy = run.path(&format!("{base}-noisy.raw"));
                let fbp = run.path(&format!("{base}-fbp.raw"));
                fs::create_dir_all(truth.parent().unwrap())
                    .map_err(|e| Error::io(truth.parent().unwrap(), e))?;
                save_image(&case.truth, geom.pixel_size_mm, None, &truth)?;
                save_sinogram(&case.clean, geom.detector_pitch_mm, None, &clean)?;
                save_sinogram(&case.noisy, geom.detector_pitch_mm, Some(&name), &noisy)?;
                save_image(&case.fbp, geom.pixel_size_mm, Some(&name), &fbp)?;
                manifest.push(serde_json::json!({
                    "id": case.id,
                    "split": split,
                    "labeled": case.labeled,
                    "truth": format!("{base}-truth.raw"),
                    "clean": format!("{base}-clean.raw"),
                    "noisy": format!("{base}-noisy.raw"),
                    "fbp": format!("{base}-fbp.raw"),
                }));
            }
        }
        let doc = serde_json::json!({ "dose": name, "cases": manifest });
        run.write(
            &format!("{tier}/manifest.json"),
            serde_json::to_string_pretty(&doc).expect("manifest serializes").as_bytes(),
        )?;
        run.log(&format!(
            "simulated dose tier {name}: {} train + {} test cases into {tier}/",
            set.train.len(),
            set.test.len()
        ));
    }
    Ok(())
}

fn train_from_config(config: &CliConfig, set: &SimulatedSet) -> Result<TrainOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xA11CE);
    let net = MagicNetwork::init(config.network_config(), &set.geometry, &mut rng)?;
    let tc = config.train_config();
    match config.train.mode.as_str() {
        "supervised" => {
            let labeled: Vec<_> = set.train.iter().filter(|c| c.labeled).cloned().collect();
            if labeled.is_empty() {
                return Err(Error::config(
                    "supervised training needs labeled cases; raise data.labeled_fraction",
                ));
            }
            train_supervised(net, &set.geometry, &to_samples(&labeled), &tc)
        }
        _ => train(net, &set.geometry, &to_samples(&set.train), &tc),
    }
}

pub fn cmd_train(loaded: &LoadedConfig, out_dir: &Path) -> Result<()> {
    validated(loaded)?;
    let config = &loaded.config;
    let mut run = RunDir::create(out_dir, loaded)?;
    let started = Instant::now();
    let set = simulate_from(config)?;
    run.log(&format!(
        "simulated {} train + {} test cases ({} labeled)",
        set.train.len(),
        set.test.len(),
        set.train.iter().filter(|c| c.labeled).count()
    ));
    let outcome = train_from_config(config, &set)?;
    let elapsed = started.elapsed().as_secs_f64();
    run.log(&format!(
        "trained {} steps in {elapsed:.1}s, final loss {:.6e}",
        outcome.steps_run,
        outcome.curve.last().map(|r| r.total).unwrap_or(f64::NAN)
    ));
    write_loss_csv(&run.path("loss.csv"), &outcome.curve)?;
    let metadata = serde_json::json!({
        "seed": config.seed,
        "mode": config.train.mode,
        "steps_run": outcome.steps_run,
        "dose": config.dose.presets.first().cloned().unwrap_or_else(|| "custom".into()),
        "image_size": config.data.image_size,
        "n_views": config.geometry.n_views,
        "n_detectors": config.geometry.n_detectors,
    });
    save_checkpoint(&outcome.network, &metadata, &run.path("checkpoint.ckpt"))?;
    run.log("wrote checkpoint.ckpt and loss.csv");
    Ok(())
}

pub fn cmd_reconstruct(
    loaded: &LoadedConfig,
    out_dir: &Path,
    checkpoint: &Path,
    sinogram: &Path,
) -> Result<()> {
    validated(loaded)?;
    let config = &loaded.config;
    let mut run = RunDir::create(out_dir, loaded)?;
    let (net, metadata) = load_checkpoint(checkpoint)?;
    let (sino, _header) = load_sinogram(sinogram)?;
    let geom = config.scan_geometry();
    if net.config.image_rows != geom.image_rows || net.config.image_cols != geom.image_cols {
        return Err(Error::config(format!(
            "checkpoint reconstructs {}x{} images but the config says {}x{}",
            net.config.image_rows, net.config.image_cols, geom.image_rows, geom.image_cols
        )));
    }
    let window = RampWindow::parse(&config.fbp.window).expect("validated");
    let x0 = fbp_reconstruct(&sino, &geom, window)?;
    let out = reconstruct(&net, &geom, &x0, &sino)?;
    save_image(&out, geom.pixel_size_mm, None, &run.path("reconstruction.raw"))?;
    export_png(
        &out,
        display_window(config),
        rescale(config),
        &run.path("reconstruction.png"),
    )?;
    run.log(&format!(
        "reconstructed {} with a {}-block checkpoint (metadata: {})",
        sinogram.display(),
        net.config.n_blocks,
        metadata
    ));
    Ok(())
}

/// Sorted (id, path) pairs of every .raw file directly inside dir.
fn raw_entries(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().is_some_and(|e| e == "raw") {
            let id = path.file_stem().unwrap().to_string_lossy().into_owned();
            out.push((id, path));
        }
    }
    out.sort();
    Ok(out)
}

pub fn cmd_evaluate(
    loaded: &LoadedConfig,
    out_dir: &Path,
    pred_dir: &Path,
    ref_dir: &Path,
    method: &str,
) -> Result<()> {
    validated(loaded)?;
    let config = &loaded.config;
    let mut run = RunDir::create(out_dir, loaded)?;
    let preds = raw_entries(pred_dir)?;
    if preds.is_empty() {
        return Err(Error::input(format!("no .raw images under {}", pred_dir.display())));
    }
    let roi = config.roi();
    let mut csv = String::from("id,method,psnr_db,ssim,roi_mean,roi_sd\n");
    for (id, pred_path) in &preds {
        let ref_path = ref_dir.join(format!("{id}.raw"));
        if !ref_path.exists() {
            return Err(Error::input(format!(
                "prediction {id} has no reference {}",
                ref_path.display()
            )));
        }
        let (pred, _) = load_image(pred_path)?;
        let (reference, _) = load_image(&ref_path)?;
        let peak = config.metrics.psnr_peak;
        let psnr_cell = match psnr(&pred, &reference, peak)? {
            PsnrValue::Identical => "identical".to_string(),
            PsnrValue::Db(v) => v.to_string(),
        };
        let ssim_value = ssim(&pred, &reference, peak)?;
        let (roi_mean, roi_sd) = roi_stats(&pred, roi)?;
        let _ = writeln!(csv, "{id},{method},{psnr_cell},{ssim_value},{roi_mean},{roi_sd}");
        let diff = ImageGrid { values: (&pred.values - &reference.values).mapv(f64::abs) };
        export_png(
            &diff,
            DisplayWindow { lo: 0.0, hi: config.display.diff_hi },
            None,
            &run.path(&format!("diff-{id}.png")),
        )?;
    }
    run.write("metrics.csv", csv.as_bytes())?;
    run.log(&format!(
        "evaluated {} images as method {method}; wrote metrics.csv and difference images",
        preds.len()
    ));
    Ok(())
}

pub fn cmd_sweep(loaded: &LoadedConfig, out_dir: &Path) -> Result<()> {
    validated(loaded)?;
    let base = &loaded.config;
    let mut run = RunDir::create(out_dir, loaded)?;
    let mut csv = String::from("parameter,value,psnr_db,ssim\n");
    for &value in &base.sweep.values {
        let mut point = base.clone();
        match base.sweep.parameter.as_str() {
            "n_blocks" => {
                point.network.n_blocks = value as usize;
                point.network.n_coarse = (value as usize).div_ceil(2);
            }
            "patch_size" => {
                point.network.patch_size = value as usize;
                point.network.patch_step = point.network.patch_step.min(value as usize);
            }
            "graph_width" => point.network.graph_width = value as usize,
            _ => point.data.labeled_fraction = value,
        }
        let violations = point.violations();
        if !violations.is_empty() {
            return Err(Error::config(format!(
                "sweep point {} = {value} is invalid: {}",
                base.sweep.parameter,
                violations.join("; ")
            )));
        }
        let started = Instant::now();
        let set = simulate_from(&point)?;
        let outcome = train_from_config(&point, &set)?;
        let peak = point.metrics.psnr_peak;
        let mut psnr_sum = 0.0;
        let mut ssim_sum = 0.0;
        for case in &set.test {
            let pred = reconstruct(&outcome.network, &set.geometry, &case.fbp, &case.noisy)?;
            psnr_sum += psnr(&pred, &case.truth, peak)?.db_or_infinity();
            ssim_sum += ssim(&pred, &case.truth, peak)?;
        }
        let n = set.test.len() as f64;
        let (mean_psnr, mean_ssim) = (psnr_sum / n, ssim_sum / n);
        let _ = writeln!(csv, "{},{value},{mean_psnr},{mean_ssim}", base.sweep.parameter);
        run.log(&format!(
            "sweep {} = {value}: {mean_psnr:.3} dB / ssim {mean_ssim:.4} \
             ({} steps, {:.1}s)",
            base.sweep.parameter,
            outcome.steps_run,
            started.elapsed().as_secs_f64()
        ));
    }
    run.write("sweep.csv", csv.as_bytes())?;
    Ok(())
}

pub fn cmd_graph(loaded: &LoadedConfig, out_dir: &Path, input: Option<&Path>) -> Result<()> {
    validated(loaded)?;
    let config = &loaded.config;
    let mut run = RunDir::create(out_dir, loaded)?;
    let image = match input {
        Some(path) => load_image(path)?.0,
        None => {
            let mut phantom = make_phantom(
                phantom_kind(config),
                config.data.image_size,
                config.data.image_size,
                config.seed,
            )?;
            phantom.values *= config.data.attenuation_per_mm;
            phantom
        }
    };
    let (rows, cols) = image.values.dim();
    let n = &config.network;
    let layout = PatchLayout::new(rows, cols, n.patch_size, n.patch_size, n.patch_step, n.patch_step)?;
    let features = extract_patches(&image, &layout)?;
    let graph = build_graph(&features, n.neighbors)?;

    let nodes = graph.adjacency.n();
    let mut edges = String::from("i,j,weight\n");
    let mut degrees = vec![0usize; nodes];
    for i in 0..nodes {
        for (j, w) in graph.adjacency.row(i) {
            degrees[i] += 1;
            if i < j {
                let _ = writeln!(edges, "{i},{j},{w}");
            }
        }
    }
    run.write("edges.csv", edges.as_bytes())?;

    let max_degree = degrees.iter().copied().max().unwrap_or(0);
    let mut hist = String::from("degree,count\n");
    for d in 0..=max_degree {
        let count = degrees.iter().filter(|&&x| x == d).count();
        if count > 0 {
            let _ = writeln!(hist, "{d},{count}");
        }
    }
    run.write("degree_histogram.csv", hist.as_bytes())?;
    run.log(&format!(
        "graph over {nodes} patch nodes: {} undirected edges, sigma {:.4e}",
        graph.adjacency.nnz() / 2,
        graph.sigma
    ));
    Ok(())
}
