//! Mini-batch Adam training with global-norm clipping and a step-decay
//! learning rate.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::model::{loss_and_grad, LstmModel, N_IN, N_OUT};
use crate::{Error, Result};

pub const HYPERPARAMETER_NAMES: [&str; 8] = [
    "max_epochs",
    "validation_frequency",
    "gradient_threshold",
    "initial_learning_rate",
    "lr_drop_period",
    "lr_drop_factor",
    "mini_batch_size",
    "sequence_length",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// iterations between validation passes
    pub validation_frequency: usize,
    pub gradient_threshold: f64,
    pub initial_learning_rate: f64,
    /// epochs between learning-rate drops
    pub lr_drop_period: usize,
    pub lr_drop_factor: f64,
    pub mini_batch_size: usize,
    pub sequence_length: usize,
    /// distance between consecutive training windows; defaults to a
    /// non-overlapping tiling when absent
    #[serde(default)]
    pub window_stride: Option<usize>,
    /// worker threads for the per-sequence gradients (1 = serial)
    #[serde(default = "one")]
    pub threads: usize,
}

fn one() -> usize {
    1
}

impl TrainConfig {
    /// The tuned values reported for the full-scale problem.
    pub fn table_ii() -> Self {
        TrainConfig {
            max_epochs: 508,
            validation_frequency: 10,
            gradient_threshold: 0.886,
            initial_learning_rate: 0.0039,
            lr_drop_period: 162,
            lr_drop_factor: 0.386,
            mini_batch_size: 116,
            sequence_length: 6553,
            window_stride: None,
            threads: 1,
        }
    }

    /// Small preset that trains in seconds on the desk dataset.
    pub fn desk() -> Self {
        TrainConfig {
            max_epochs: 30,
            validation_frequency: 10,
            gradient_threshold: 0.886,
            initial_learning_rate: 0.01,
            lr_drop_period: 20,
            lr_drop_factor: 0.386,
            mini_batch_size: 16,
            sequence_length: 256,
            window_stride: Some(32),
            threads: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train config: {m}")));
        if self.max_epochs == 0 || self.mini_batch_size == 0 || self.sequence_length == 0 {
            return bad("epochs, batch size and sequence length must be positive");
        }
        if self.validation_frequency == 0 || self.lr_drop_period == 0 {
            return bad("validation frequency and drop period must be positive");
        }
        if !(self.gradient_threshold > 0.0 && self.initial_learning_rate > 0.0) {
            return bad("gradient threshold and learning rate must be positive");
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor <= 1.0) {
            return bad("drop factor must lie in (0, 1]");
        }
        if self.window_stride == Some(0) {
            return bad("window stride must be positive");
        }
        Ok(())
    }

    /// Replaces the eight tunable fields, in the order of
    /// `HYPERPARAMETER_NAMES`. Integer fields are rounded.
    pub fn with_hyperparameters(&self, v: &[f64]) -> Result<Self> {
        if v.len() != HYPERPARAMETER_NAMES.len() {
            return Err(Error::LengthMismatch(v.len(), HYPERPARAMETER_NAMES.len()));
        }
        let n = |x: f64| x.round().max(1.0) as usize;
        let mut c = self.clone();
        c.max_epochs = n(v[0]);
        c.validation_frequency = n(v[1]);
        c.gradient_threshold = v[2];
        c.initial_learning_rate = v[3];
        c.lr_drop_period = n(v[4]);
        c.lr_drop_factor = v[5];
        c.mini_batch_size = n(v[6]);
        c.sequence_length = n(v[7]);
        c.validate()?;
        Ok(c)
    }

    pub fn hyperparameters(&self) -> [f64; 8] {
        [
            self.max_epochs as f64,
            self.validation_frequency as f64,
            self.gradient_threshold,
            self.initial_learning_rate,
            self.lr_drop_period as f64,
            self.lr_drop_factor,
            self.mini_batch_size as f64,
            self.sequence_length as f64,
        ]
    }

    /// Learning rate used during 0-based epoch `epoch`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.initial_learning_rate * self.lr_drop_factor.powi((epoch / self.lr_drop_period) as i32)
    }

    fn stride(&self) -> usize {
        self.window_stride.unwrap_or(self.sequence_length)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationPoint {
    pub epoch: usize,
    pub iteration: usize,
    pub rmse: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// mean mini-batch loss per epoch
    pub epoch_loss: Vec<f64>,
    pub validation: Vec<ValidationPoint>,
    /// largest gradient norm seen after clipping
    pub max_clipped_norm: f64,
    pub iterations: usize,
    /// validation RMSE after the last epoch
    pub final_validation_rmse: f64,
    /// training-split RMSE after the last epoch
    pub final_train_rmse: f64,
}

/// Scales `g` in place so its Euclidean norm is at most `threshold`;
/// returns the norm before clipping.
pub fn clip_global_norm(g: &mut [f64], threshold: f64) -> f64 {
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > threshold {
        let k = threshold / norm;
        g.iter_mut().for_each(|v| *v *= k);
    }
    norm
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], g: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * g[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * g[i] * g[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Start indices of windows of length `len` tiled with `stride` after
/// `offset`; a series shorter than `len` yields one full-length window.
pub fn window_starts(n: usize, len: usize, stride: usize, offset: usize) -> Vec<usize> {
    if n <= len {
        return vec![0];
    }
    let mut out = Vec::new();
    let mut s = offset.min(n - len);
    while s + len <= n {
        out.push(s);
        s += stride;
    }
    out
}

/// Mean loss and gradient over the windows in `batch`, split across
/// `threads` workers. Chunk results are summed in a fixed order so the
/// result does not depend on scheduling.
fn batch_gradient(
    model: &LstmModel,
    x: &[[f64; N_IN]],
    y: &[[f64; N_OUT]],
    batch: &[usize],
    len: usize,
    threads: usize,
) -> Result<(f64, Vec<f64>)> {
    let n = x.len();
    let count: usize = batch.iter().map(|&s| (n - s).min(len) * N_OUT).sum();
    let w = 1.0 / count.max(1) as f64;
    let work = |starts: &[usize]| -> Result<(f64, Vec<f64>)> {
        let mut g = vec![0.0; model.params.len()];
        let mut loss = 0.0;
        for &s in starts {
            let e = (s + len).min(n);
            loss += loss_and_grad(model, &x[s..e], &y[s..e], w, Some(&mut g))?;
        }
        Ok((loss, g))
    };
    let threads = threads.clamp(1, batch.len().max(1));
    if threads == 1 {
        return work(batch);
    }
    let chunk = batch.len().div_ceil(threads);
    let parts: Vec<Result<(f64, Vec<f64>)>> = std::thread::scope(|sc| {
        let handles: Vec<_> = batch.chunks(chunk).map(|c| sc.spawn(move || work(c))).collect();
        handles.into_iter().map(|h| h.join().expect("gradient worker panicked")).collect()
    });
    let mut total = 0.0;
    let mut g = vec![0.0; model.params.len()];
    for p in parts {
        let (l, gp) = p?;
        total += l;
        g.iter_mut().zip(&gp).for_each(|(a, b)| *a += b);
    }
    Ok((total, g))
}

/// RMSE on normalized targets over non-overlapping windows of `len`.
pub fn split_rmse(model: &LstmModel, x: &[[f64; N_IN]], y: &[[f64; N_OUT]], len: usize) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::Config("empty evaluation split".into()));
    }
    let mut sq = 0.0;
    let mut count = 0usize;
    let mut s = 0;
    while s < x.len() {
        let e = (s + len).min(x.len());
        let c = model.forward(&x[s..e])?;
        for (pred, tgt) in c.outputs.iter().zip(&y[s..e]) {
            for o in 0..N_OUT {
                sq += (pred[o] - tgt[o]).powi(2);
            }
        }
        count += (e - s) * N_OUT;
        s = e;
    }
    Ok((sq / count as f64).sqrt())
}

/// Trains `model` in place on the dataset's training split. The model's
/// normalization is replaced by the dataset's.
pub fn train<R: Rng + ?Sized>(model: &mut LstmModel, data: &Dataset, cfg: &TrainConfig, rng: &mut R) -> Result<TrainHistory> {
    cfg.validate()?;
    model.arch.validate()?;
    model.norm = data.norm.clone();
    let (tx, ty) = data.normalized(data.train.clone());
    let (vx, vy) = data.normalized(data.validation.clone());
    if tx.is_empty() {
        return Err(Error::Config("empty training split".into()));
    }
    let len = cfg.sequence_length;
    let mut adam = Adam::new(model.params.len());
    let mut hist = TrainHistory::default();
    let mut iteration = 0usize;
    let validate = |m: &LstmModel| -> Result<f64> {
        if vx.is_empty() {
            Ok(f64::NAN)
        } else {
            split_rmse(m, &vx, &vy, len)
        }
    };
    for epoch in 0..cfg.max_epochs {
        let lr = cfg.learning_rate(epoch);
        let offset = if tx.len() > len { rng.random_range(0..cfg.stride().min(tx.len() - len + 1)) } else { 0 };
        let mut starts = window_starts(tx.len(), len, cfg.stride(), offset);
        starts.shuffle(rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch in starts.chunks(cfg.mini_batch_size) {
            let (loss, mut g) = batch_gradient(model, &tx, &ty, batch, len, cfg.threads)?;
            if !loss.is_finite() {
                return Err(Error::NanLoss { epoch, iteration });
            }
            clip_global_norm(&mut g, cfg.gradient_threshold);
            let clipped = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(clipped <= cfg.gradient_threshold * (1.0 + 1e-12), "clipped norm {clipped} above threshold");
            hist.max_clipped_norm = hist.max_clipped_norm.max(clipped);
            adam.step(&mut model.params, &g, lr);
            iteration += 1;
            epoch_loss += loss;
            batches += 1;
            if iteration.is_multiple_of(cfg.validation_frequency) {
                hist.validation.push(ValidationPoint { epoch, iteration, rmse: validate(model)? });
            }
        }
        hist.epoch_loss.push(epoch_loss / batches.max(1) as f64);
        log::debug!("epoch {epoch}: loss {:.5}, lr {lr:.2e}", epoch_loss / batches.max(1) as f64);
    }
    hist.iterations = iteration;
    hist.final_validation_rmse = validate(model)?;
    hist.final_train_rmse = split_rmse(model, &tx, &ty, len)?;
    Ok(hist)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lstm::model::Arch;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_drops_after_period() {
        let c = TrainConfig::table_ii();
        assert_eq!(c.learning_rate(0), 0.0039);
        assert_eq!(c.learning_rate(161), 0.0039);
        assert!((c.learning_rate(162) - 0.0039 * 0.386).abs() < 1e-18);
        assert!((c.learning_rate(324) - 0.0039 * 0.386 * 0.386).abs() < 1e-18);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let scale: f64 = rng.random_range(0.01..100.0);
            let mut g: Vec<f64> = (0..50).map(|_| rng.random_range(-scale..scale)).collect();
            let before: Vec<f64> = g.clone();
            let n0 = clip_global_norm(&mut g, 0.886);
            let n1 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(n1 <= 0.886 * (1.0 + 1e-12));
            if n0 <= 0.886 {
                assert_eq!(g, before);
            } else {
                // direction preserved
                let k = g[0] / before[0];
                assert!(g.iter().zip(&before).all(|(a, b)| (a - k * b).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn windows_tile_series() {
        assert_eq!(window_starts(10, 4, 4, 0), vec![0, 4]);
        assert_eq!(window_starts(10, 4, 4, 2), vec![2, 6]);
        assert_eq!(window_starts(10, 4, 2, 1), vec![1, 3, 5]);
        assert_eq!(window_starts(3, 4, 4, 0), vec![0]);
    }

    #[test]
    fn fits_zero_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 400;
        let inputs: Vec<[f64; N_IN]> = (0..n).map(|i| std::array::from_fn(|k| ((i * (k + 1)) as f64 * 0.05).sin())).collect();
        let data = Dataset::from_series(inputs, vec![[0.0; N_OUT]; n], 300, 50, 50).unwrap();
        let mut model = LstmModel::init(Arch { hidden: 4, layers: 1 }, &mut rng);
        let cfg = TrainConfig {
            max_epochs: 50,
            validation_frequency: 5,
            gradient_threshold: 1.0,
            initial_learning_rate: 0.02,
            lr_drop_period: 10,
            lr_drop_factor: 0.5,
            mini_batch_size: 2,
            sequence_length: 25,
            window_stride: Some(1),
            threads: 1,
        };
        let h = train(&mut model, &data, &cfg, &mut rng).unwrap();
        assert!(h.final_train_rmse < 1e-3, "{}", h.final_train_rmse);
        assert!(h.max_clipped_norm <= 1.0 + 1e-12);
        assert_eq!(h.epoch_loss.len(), 50);
        assert!(!h.validation.is_empty());
    }

    #[test]
    fn threaded_gradient_matches_serial() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = LstmModel::init(Arch { hidden: 5, layers: 2 }, &mut rng);
        let x: Vec<[f64; N_IN]> = (0..200).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
        let y: Vec<[f64; N_OUT]> = (0..200).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
        let batch = [0, 20, 40, 60, 80, 100, 120];
        let (l1, g1) = batch_gradient(&model, &x, &y, &batch, 30, 1).unwrap();
        let (l3, g3) = batch_gradient(&model, &x, &y, &batch, 30, 3).unwrap();
        assert!((l1 - l3).abs() < 1e-12);
        for (a, b) in g1.iter().zip(&g3) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn hyperparameter_roundtrip() {
        let c = TrainConfig::table_ii();
        let d = TrainConfig::desk().with_hyperparameters(&c.hyperparameters()).unwrap();
        assert_eq!(d.hyperparameters(), c.hyperparameters());
        assert_eq!(d.window_stride, TrainConfig::desk().window_stride);
        let mut v = c.hyperparameters();
        v[6] = 115.6;
        assert_eq!(c.with_hyperparameters(&v).unwrap().mini_batch_size, 116);
    }

    #[test]
    fn invalid_config_rejected() {
        let mut c = TrainConfig::desk();
        c.lr_drop_factor = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::desk();
        c.mini_batch_size = 0;
        assert!(c.validate().is_err());
    }
}
