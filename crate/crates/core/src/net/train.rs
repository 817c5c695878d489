//! Mini-batch training with Adam or SGD under a cosine learning-rate schedule.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_batch, init_model, sample_loss_grad, NetConfig, NetError, Tensor, Weights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
    Sgd,
}

impl std::str::FromStr for Optimizer {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(Optimizer::Adam),
            "sgd" => Ok(Optimizer::Sgd),
            other => Err(format!("unknown optimizer `{other}` (expected adam or sgd)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr0: f64,
    pub optimizer: Optimizer,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 100, batch: 10, lr0: 1e-2, optimizer: Optimizer::Adam, seed: 0 }
    }
}

impl TrainConfig {
    /// `epochs == 0` is accepted and returns the initial weights.
    pub fn validate(&self) -> Result<(), NetError> {
        if self.batch == 0 {
            return Err(NetError::Config("batch must be >= 1".into()));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(NetError::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        Ok(())
    }
}

/// Cosine annealing from `lr0` at epoch 0 towards 0 at epoch `total`.
pub fn cosine_lr(lr0: f64, epoch: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    lr0 * (1.0 + (std::f64::consts::PI * epoch as f64 / total as f64).cos()) / 2.0
}

/// Quality of the enhanced block as seen by a training monitor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochQuality {
    pub psnr: f64,
    pub olr_percent: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean squared error over every pixel seen during the epoch.
    pub loss: f64,
    pub psnr: Option<f64>,
    pub olr_percent: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }
}

/// Receives the network outputs produced during an epoch (indexed like the
/// training samples) and scores them.
pub type Monitor<'a> = dyn Fn(&[Vec<f64>]) -> EpochQuality + Sync + 'a;

/// Padded, normalized network inputs with their `[0, 1]` targets.
#[derive(Debug, Clone)]
pub struct TrainSet {
    pub inputs: Vec<Tensor>,
    pub targets: Vec<Vec<f64>>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        }
    }
}

/// Trains a freshly initialized model on `data`.
///
/// Per-sample gradients may be computed in parallel but are summed in a
/// fixed order, so the result is bit-identical for any thread count.
pub fn train(
    data: &TrainSet,
    net: &NetConfig,
    cfg: &TrainConfig,
    monitor: Option<&Monitor>,
) -> Result<(Weights, TrainLog), NetError> {
    cfg.validate()?;
    let mut weights = init_model(net)?;
    check_batch(&weights, &data.inputs, &data.targets)?;
    let n = data.inputs.len();
    let pixels: usize = data.targets.iter().map(Vec::len).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut adam = Adam::new(weights.len());
    let mut log = TrainLog::default();
    let mut outputs: Vec<Vec<f64>> = vec![Vec::new(); n];

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.lr0, epoch, cfg.epochs);
        order.shuffle(&mut rng);
        let mut sse = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let batch_pixels: usize = chunk.iter().map(|&i| data.targets[i].len()).sum();
            let scale = 1.0 / batch_pixels as f64;
            let w = &weights;
            let parts: Vec<(f64, Vec<f64>, Vec<f64>)> = chunk
                .par_iter()
                .map(|&i| sample_loss_grad(w, &data.inputs[i], &data.targets[i], scale))
                .collect();
            let mut grad = vec![0.0; weights.len()];
            for (&i, (s, g, out)) in chunk.iter().zip(parts) {
                sse += s;
                grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                outputs[i] = out;
            }
            match cfg.optimizer {
                Optimizer::Adam => adam.step(&mut weights.params, &grad, lr),
                Optimizer::Sgd => weights.params.iter_mut().zip(&grad).for_each(|(p, g)| *p -= lr * g),
            }
        }
        let loss = sse / pixels as f64;
        if !loss.is_finite() || weights.params.iter().any(|p| !p.is_finite()) {
            return Err(NetError::Diverged { epoch });
        }
        let quality = monitor.map(|m| m(&outputs));
        log.epochs.push(EpochRecord {
            epoch,
            lr,
            loss,
            psnr: quality.map(|q| q.psnr),
            olr_percent: quality.map(|q| q.olr_percent),
        });
    }
    Ok((weights, log))
}
