//! Losses and the optimizer loop.
//!
//! Supervised samples contribute a mean-squared reconstruction error,
//! unlabeled ones a projection-consistency error; the two terms are
//! normalized by their own set sizes within each batch and summed. The
//! supervised regime is the same code path with every sample labeled.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array, Dimension, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{back_project, forward_project, ImageGrid, ScanGeometry, Sinogram};
use crate::unrolled::{
    backward_pass, forward_pass, save_checkpoint, MagicNetwork, NetworkGradients,
};

/// One training case: measured data, the starting image fed to the
/// network, and the ground truth when available.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub sinogram: Sinogram,
    pub initial: ImageGrid,
    pub label: Option<ImageGrid>,
}

/// A batch with its labeled/unlabeled index partition.
#[derive(Debug, Clone)]
pub struct Batch {
    pub samples: Vec<TrainSample>,
    labeled: Vec<usize>,
    unlabeled: Vec<usize>,
}

impl Batch {
    pub fn new(samples: Vec<TrainSample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::input("batch is empty"));
        }
        let (labeled, unlabeled): (Vec<usize>, Vec<usize>) =
            (0..samples.len()).partition(|&i| samples[i].label.is_some());
        Ok(Batch {
            samples,
            labeled,
            unlabeled,
        })
    }

    pub fn labeled(&self) -> &[usize] {
        &self.labeled
    }

    pub fn unlabeled(&self) -> &[usize] {
        &self.unlabeled
    }
}

fn squared_norm(a: &ndarray::Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum()
}

/// Mean over samples of the squared reconstruction error.
pub fn mse_loss(pred: &[ImageGrid], labels: &[ImageGrid]) -> Result<f64> {
    if pred.len() != labels.len() {
        return Err(Error::input(format!(
            "{} predictions vs {} labels",
            pred.len(),
            labels.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::input("no samples"));
    }
    let mut acc = 0.0;
    for (p, l) in pred.iter().zip(labels.iter()) {
        if p.values.dim() != l.values.dim() {
            return Err(Error::input("prediction and label shapes differ"));
        }
        acc += squared_norm(&(&p.values - &l.values));
    }
    Ok(acc / pred.len() as f64)
}

/// Mean over samples of the squared projection residual.
pub fn projection_loss(
    pred: &[ImageGrid],
    sinos: &[Sinogram],
    geom: &ScanGeometry,
) -> Result<f64> {
    if pred.len() != sinos.len() {
        return Err(Error::input(format!(
            "{} predictions vs {} sinograms",
            pred.len(),
            sinos.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::input("no samples"));
    }
    let mut acc = 0.0;
    for (p, y) in pred.iter().zip(sinos.iter()) {
        let proj = forward_project(p, geom)?;
        acc += squared_norm(&(&proj.values - &y.values));
    }
    Ok(acc / pred.len() as f64)
}

/// Relative weighting of the two loss terms; both default to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub mse: f64,
    pub projection: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            mse: 1.0,
            projection: 1.0,
        }
    }
}

/// The two terms of one batch loss and their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SemiLoss {
    pub mse_term: f64,
    pub proj_term: f64,
    pub total: f64,
}

/// Labeled-average reconstruction error plus unlabeled-average
/// projection error; a term vanishes with its set.
pub fn semi_loss(
    batch: &Batch,
    preds: &[ImageGrid],
    geom: &ScanGeometry,
    weights: LossWeights,
) -> Result<SemiLoss> {
    if preds.len() != batch.samples.len() {
        return Err(Error::input(format!(
            "{} predictions for a batch of {}",
            preds.len(),
            batch.samples.len()
        )));
    }
    let mut mse_term = 0.0;
    for &i in &batch.labeled {
        let label = batch.samples[i].label.as_ref().expect("labeled index");
        mse_term += squared_norm(&(&preds[i].values - &label.values));
    }
    if !batch.labeled.is_empty() {
        mse_term /= batch.labeled.len() as f64;
    }
    let mut proj_term = 0.0;
    for &i in &batch.unlabeled {
        let proj = forward_project(&preds[i], geom)?;
        proj_term += squared_norm(&(&proj.values - &batch.samples[i].sinogram.values));
    }
    if !batch.unlabeled.is_empty() {
        proj_term /= batch.unlabeled.len() as f64;
    }
    Ok(SemiLoss {
        mse_term,
        proj_term,
        total: weights.mse * mse_term + weights.projection * proj_term,
    })
}

/// Gradient of the batch loss with respect to one prediction.
fn semi_loss_grad(
    batch: &Batch,
    preds: &[ImageGrid],
    index: usize,
    geom: &ScanGeometry,
    weights: LossWeights,
) -> Result<ImageGrid> {
    let sample = &batch.samples[index];
    if let Some(label) = &sample.label {
        let scale = 2.0 * weights.mse / batch.labeled.len() as f64;
        Ok(ImageGrid {
            values: (&preds[index].values - &label.values) * scale,
        })
    } else {
        let scale = 2.0 * weights.projection / batch.unlabeled.len() as f64;
        let mut residual = forward_project(&preds[index], geom)?;
        residual.values -= &sample.sinogram.values;
        let mut grad = back_project(&residual, geom)?;
        grad.values *= scale;
        Ok(grad)
    }
}

/// Adaptive-moment optimizer with bias correction and no weight decay.
///
/// The adaptive step has magnitude ~learning_rate in parameter units.
/// Kernels live at fan-in scale (~0.1) where that is a sane relative
/// move, but the fidelity step sizes live at 1/||AtA||, several orders
/// of magnitude smaller, and a flat rate destroys them within a few
/// steps. Each step size therefore trains at the learning rate scaled
/// by its own initial magnitude.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step_size_scales: Vec<f64>,
    first: NetworkGradients,
    second: NetworkGradients,
    steps: usize,
}

impl Adam {
    pub fn new(net: &MagicNetwork, learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_size_scales: net.blocks.iter().map(|b| b.step_size.abs()).collect(),
            first: NetworkGradients::zeros_like(net),
            second: NetworkGradients::zeros_like(net),
            steps: 0,
        }
    }

    pub fn step(&mut self, net: &mut MagicNetwork, grads: &NetworkGradients) {
        assert_eq!(net.blocks.len(), grads.blocks.len());
        self.steps += 1;
        let bias1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bias2 = 1.0 - self.beta2.powi(self.steps as i32);
        let (beta1, beta2, epsilon) = (self.beta1, self.beta2, self.epsilon);
        let update = move |lr: f64, p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= lr * (*m / bias1) / ((*v / bias2).sqrt() + epsilon);
        };
        fn update_tensor<D: Dimension>(
            lr: f64,
            p: &mut Array<f64, D>,
            g: &Array<f64, D>,
            m: &mut Array<f64, D>,
            v: &mut Array<f64, D>,
            f: impl Fn(f64, &mut f64, f64, &mut f64, &mut f64),
        ) {
            Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| f(lr, p, g, m, v));
        }
        let lr = self.learning_rate;
        for (t, block) in net.blocks.iter_mut().enumerate() {
            let g = &grads.blocks[t];
            let m = &mut self.first.blocks[t];
            let v = &mut self.second.blocks[t];
            let step_lr = lr * self.step_size_scales[t];
            update(step_lr, &mut block.step_size, g.step_size, &mut m.step_size, &mut v.step_size);
            update_tensor(lr, &mut block.spatial.w1, &g.w1, &mut m.w1, &mut v.w1, update);
            update_tensor(lr, &mut block.spatial.w2, &g.w2, &mut m.w2, &mut v.w2, update);
            update_tensor(lr, &mut block.spatial.w3, &g.w3, &mut m.w3, &mut v.w3, update);
            update_tensor(lr, &mut block.graph.theta1, &g.theta1, &mut m.theta1, &mut v.theta1, update);
            update_tensor(lr, &mut block.graph.theta2, &g.theta2, &mut m.theta2, &mut v.theta2, update);
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Gradients above this global norm are rescaled onto it.
    pub clip_norm: Option<f64>,
    pub weights: LossWeights,
    pub seed: u64,
    /// Optional hard cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    /// Where to dump a checkpoint when the loss stops being finite.
    pub diagnostic_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 1,
            learning_rate: 1e-4,
            clip_norm: Some(10.0),
            weights: LossWeights::default(),
            seed: 0,
            max_steps: None,
            diagnostic_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::config("learning rate must be finite and nonnegative"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::config("clip norm must be positive"));
            }
        }
        for (name, w) in [("mse", self.weights.mse), ("projection", self.weights.projection)] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::config(format!(
                    "{name} weight must be finite and nonnegative"
                )));
            }
        }
        Ok(())
    }
}

/// One optimizer step in the loss curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub mse_term: f64,
    pub proj_term: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: MagicNetwork,
    pub curve: Vec<LossRecord>,
    pub steps_run: usize,
}

/// Optimize the network on the given samples. Sample order is a seeded
/// shuffle per epoch; gradients within a batch are reduced in order, so
/// a fixed seed reproduces parameters bitwise.
pub fn train(
    net: MagicNetwork,
    geom: &ScanGeometry,
    samples: &[TrainSample],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    net.validate()?;
    if samples.is_empty() {
        return Err(Error::input("training set is empty"));
    }
    for s in samples {
        s.sinogram.matches(geom)?;
        s.initial.matches(geom)?;
        if let Some(l) = &s.label {
            l.matches(geom)?;
        }
    }
    let mut net = net;
    let mut adam = Adam::new(&net, config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut curve = Vec::new();
    let mut step = 0usize;

    'epochs: for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            if let Some(cap) = config.max_steps {
                if step >= cap {
                    break 'epochs;
                }
            }
            step += 1;
            let batch = Batch::new(chunk.iter().map(|&i| samples[i].clone()).collect())?;
            let mut preds = Vec::with_capacity(batch.samples.len());
            let mut tapes = Vec::with_capacity(batch.samples.len());
            for sample in &batch.samples {
                let (pred, tape) = forward_pass(&net, geom, &sample.initial, &sample.sinogram)?;
                preds.push(pred);
                tapes.push(tape);
            }
            let loss = semi_loss(&batch, &preds, geom, config.weights)?;
            let mut grads = NetworkGradients::zeros_like(&net);
            for i in 0..batch.samples.len() {
                let g_out = semi_loss_grad(&batch, &preds, i, geom, config.weights)?;
                let (g, _) = backward_pass(&net, geom, &tapes[i], &g_out)?;
                grads.add(&g);
            }
            if !loss.total.is_finite() || !grads.is_finite() {
                let detail = diverged(&net, config, epoch, step, loss.total)?;
                return Err(Error::Divergence { step, detail });
            }
            if let Some(cap) = config.clip_norm {
                let norm = grads.global_norm();
                if norm > cap {
                    grads.scale(cap / norm);
                }
            }
            adam.step(&mut net, &grads);
            curve.push(LossRecord {
                epoch,
                step,
                mse_term: loss.mse_term,
                proj_term: loss.proj_term,
                total: loss.total,
            });
        }
    }
    Ok(TrainOutcome {
        network: net,
        curve,
        steps_run: step,
    })
}

/// Purely supervised optimization of the mean-squared reconstruction
/// error; every sample must carry a label. With all samples labeled this
/// produces bitwise the same parameters as `train`, which is how the two
/// loss definitions are cross-checked.
pub fn train_supervised(
    net: MagicNetwork,
    geom: &ScanGeometry,
    samples: &[TrainSample],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    net.validate()?;
    if samples.is_empty() {
        return Err(Error::input("training set is empty"));
    }
    for (i, s) in samples.iter().enumerate() {
        s.sinogram.matches(geom)?;
        s.initial.matches(geom)?;
        match &s.label {
            Some(l) => l.matches(geom)?,
            None => {
                return Err(Error::input(format!(
                    "supervised training needs labels, sample {i} has none"
                )))
            }
        }
    }
    let mut net = net;
    let mut adam = Adam::new(&net, config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut curve = Vec::new();
    let mut step = 0usize;

    'epochs: for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            if let Some(cap) = config.max_steps {
                if step >= cap {
                    break 'epochs;
                }
            }
            step += 1;
            let mut preds = Vec::with_capacity(chunk.len());
            let mut tapes = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (pred, tape) =
                    forward_pass(&net, geom, &samples[i].initial, &samples[i].sinogram)?;
                preds.push(pred);
                tapes.push(tape);
            }
            let labels: Vec<ImageGrid> = chunk
                .iter()
                .map(|&i| samples[i].label.clone().expect("validated above"))
                .collect();
            let mse = mse_loss(&preds, &labels)?;
            let total = config.weights.mse * mse;
            let mut grads = NetworkGradients::zeros_like(&net);
            let scale = 2.0 * config.weights.mse / chunk.len() as f64;
            for (k, tape) in tapes.iter().enumerate() {
                let g_out = ImageGrid {
                    values: (&preds[k].values - &labels[k].values) * scale,
                };
                let (g, _) = backward_pass(&net, geom, tape, &g_out)?;
                grads.add(&g);
            }
            if !total.is_finite() || !grads.is_finite() {
                let detail = diverged(&net, config, epoch, step, total)?;
                return Err(Error::Divergence { step, detail });
            }
            if let Some(cap) = config.clip_norm {
                let norm = grads.global_norm();
                if norm > cap {
                    grads.scale(cap / norm);
                }
            }
            adam.step(&mut net, &grads);
            curve.push(LossRecord {
                epoch,
                step,
                mse_term: mse,
                proj_term: 0.0,
                total,
            });
        }
    }
    Ok(TrainOutcome {
        network: net,
        curve,
        steps_run: step,
    })
}

// Writes the diagnostic checkpoint if a configured directory exists and
// returns the divergence detail line.
fn diverged(
    net: &MagicNetwork,
    config: &TrainConfig,
    epoch: usize,
    step: usize,
    total: f64,
) -> Result<String> {
    let mut detail = format!("loss became {total} at epoch {epoch}");
    if let Some(dir) = &config.diagnostic_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("diverged.ckpt");
        let meta = serde_json::json!({
            "diverged_at_epoch": epoch,
            "diverged_at_step": step,
            "total_loss": total.to_string(),
        });
        save_checkpoint(net, &meta, &path)?;
        detail.push_str(&format!(", parameters dumped to {}", path.display()));
    }
    Ok(detail)
}

/// Append-style CSV dump of a loss curve; one row per optimizer step.
pub fn write_loss_csv(path: &Path, records: &[LossRecord]) -> Result<()> {
    let mut out = String::from("epoch,step,mse_term,proj_term,total\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.step, r.mse_term, r.proj_term, r.total
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
