//! Gaussian-process Bayesian optimization with expected improvement.
//!
//! The surrogate is a Matérn-5/2 kernel with one length scale per
//! dimension, fitted on the unit box to standardized objective values.

use std::io::Write;
use std::path::Path;

use argmin::core::{CostFunction, Executor, State};
use argmin::solver::neldermead::NelderMead;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dim {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    pub integer: bool,
}

impl Dim {
    pub fn new(name: &str, lower: f64, upper: f64, integer: bool) -> Self {
        Dim { name: name.into(), lower, upper, integer }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub dims: Vec<Dim>,
}

impl SearchSpace {
    /// The eight LSTM training hyperparameter ranges.
    pub fn table_ii() -> Self {
        SearchSpace {
            dims: vec![
                Dim::new("max_epochs", 500.0, 700.0, true),
                Dim::new("validation_frequency", 3.0, 10.0, true),
                Dim::new("gradient_threshold", 0.5, 1.5, false),
                Dim::new("initial_learning_rate", 0.001, 0.01, false),
                Dim::new("lr_drop_period", 100.0, 200.0, true),
                Dim::new("lr_drop_factor", 0.2, 0.4, false),
                Dim::new("mini_batch_size", 32.0, 128.0, true),
                Dim::new("sequence_length", 5000.0, 10000.0, true),
            ],
        }
    }

    /// Ranges shrunk to match the desk dataset (about a tenth of the data
    /// and a few percent of the epochs).
    pub fn desk() -> Self {
        SearchSpace {
            dims: vec![
                Dim::new("max_epochs", 15.0, 35.0, true),
                Dim::new("validation_frequency", 3.0, 10.0, true),
                Dim::new("gradient_threshold", 0.5, 1.5, false),
                Dim::new("initial_learning_rate", 0.001, 0.02, false),
                Dim::new("lr_drop_period", 5.0, 20.0, true),
                Dim::new("lr_drop_factor", 0.2, 0.4, false),
                Dim::new("mini_batch_size", 4.0, 32.0, true),
                Dim::new("sequence_length", 128.0, 512.0, true),
            ],
        }
    }

    pub fn unit(n: usize) -> Self {
        SearchSpace { dims: (0..n).map(|i| Dim::new(&format!("x{i}"), 0.0, 1.0, false)).collect() }
    }

    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() {
            return Err(Error::Config("search space has no dimensions".into()));
        }
        for d in &self.dims {
            if !(d.lower < d.upper) || !d.lower.is_finite() || !d.upper.is_finite() {
                return Err(Error::Config(format!("dimension {} has an empty range", d.name)));
            }
        }
        Ok(())
    }

    /// Maps a unit-box point to the space, rounding integer dimensions.
    pub fn from_unit(&self, u: &[f64]) -> Vec<f64> {
        self.dims
            .iter()
            .zip(u)
            .map(|(d, &v)| {
                let x = d.lower + v.clamp(0.0, 1.0) * (d.upper - d.lower);
                if d.integer {
                    x.round().clamp(d.lower.ceil(), d.upper.floor())
                } else {
                    x
                }
            })
            .collect()
    }

    pub fn to_unit(&self, x: &[f64]) -> Vec<f64> {
        self.dims.iter().zip(x).map(|(d, &v)| ((v - d.lower) / (d.upper - d.lower)).clamp(0.0, 1.0)).collect()
    }
}

/// `n` Latin-hypercube points in the unit box.
pub fn latin_hypercube<R: Rng + ?Sized>(n: usize, dims: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut pts = vec![vec![0.0; dims]; n];
    for j in 0..dims {
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(rng);
        for (pt, s) in pts.iter_mut().zip(strata) {
            pt[j] = (s as f64 + rng.random::<f64>()) / n as f64;
        }
    }
    pts
}

const NOISE_FLOOR: f64 = 1e-10;
const JITTER: f64 = 1e-8;

/// Log-scale kernel hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpHyper {
    pub log_length: Vec<f64>,
    pub log_signal_var: f64,
    pub log_noise_var: f64,
}

impl GpHyper {
    fn to_vec(&self) -> Vec<f64> {
        let mut v = self.log_length.clone();
        v.push(self.log_signal_var);
        v.push(self.log_noise_var);
        v
    }

    /// Clamps into the search box used by the likelihood fit.
    fn from_vec(v: &[f64]) -> Self {
        let d = v.len() - 2;
        GpHyper {
            log_length: v[..d].iter().map(|x| x.clamp((1e-2f64).ln(), (20.0f64).ln())).collect(),
            log_signal_var: v[d].clamp((1e-6f64).ln(), (1e2f64).ln()),
            log_noise_var: v[d + 1].clamp(NOISE_FLOOR.ln(), 0.0),
        }
    }
}

fn matern52(a: &[f64], b: &[f64], inv_len: &[f64], sf2: f64) -> f64 {
    let r2: f64 = a.iter().zip(b).zip(inv_len).map(|((x, y), l)| ((x - y) * l).powi(2)).sum();
    let r = (5.0 * r2).sqrt();
    sf2 * (1.0 + r + 5.0 * r2 / 3.0) * (-r).exp()
}

#[derive(Debug, Clone)]
pub struct GpSurrogate {
    x: Vec<Vec<f64>>,
    y_mean: f64,
    y_std: f64,
    pub hyper: GpHyper,
    inv_len: Vec<f64>,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

/// Factorizes the kernel matrix; returns the factor, alpha and the log
/// marginal likelihood of the standardized targets.
fn factorize(x: &[Vec<f64>], ys: &DVector<f64>, h: &GpHyper) -> Option<(Cholesky<f64, Dyn>, DVector<f64>, f64)> {
    let n = x.len();
    let inv_len: Vec<f64> = h.log_length.iter().map(|l| (-l).exp()).collect();
    let sf2 = h.log_signal_var.exp();
    let sn2 = h.log_noise_var.exp().max(NOISE_FLOOR);
    let k = DMatrix::from_fn(n, n, |i, j| matern52(&x[i], &x[j], &inv_len, sf2) + if i == j { sn2 + JITTER } else { 0.0 });
    let chol = k.cholesky()?;
    let alpha = chol.solve(ys);
    let logdet: f64 = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
    let lml = -0.5 * ys.dot(&alpha) - 0.5 * logdet - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    lml.is_finite().then_some((chol, alpha, lml))
}

struct NegLml<'a> {
    x: &'a [Vec<f64>],
    ys: &'a DVector<f64>,
}

impl CostFunction for NegLml<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        // penalize leaving the box so the simplex comes back inside
        let h = GpHyper::from_vec(p);
        let outside: f64 = p.iter().zip(h.to_vec()).map(|(a, b)| (a - b).powi(2)).sum();
        Ok(match factorize(self.x, self.ys, &h) {
            Some((_, _, lml)) => -lml + 10.0 * outside,
            None => 1e10,
        })
    }
}

/// Minimizes `f` with Nelder-Mead from an axis-aligned simplex.
fn nelder_mead<C>(cost: C, start: Vec<f64>, step: f64, iters: u64) -> Option<(Vec<f64>, f64)>
where
    C: CostFunction<Param = Vec<f64>, Output = f64>,
{
    let mut simplex = vec![start.clone()];
    for i in 0..start.len() {
        let mut p = start.clone();
        p[i] += step;
        simplex.push(p);
    }
    let solver = NelderMead::new(simplex).with_sd_tolerance(1e-9).ok()?;
    let res = Executor::new(cost, solver).configure(|s| s.max_iters(iters)).run().ok()?;
    let st = res.state();
    Some((st.get_best_param()?.clone(), st.get_best_cost()))
}

impl GpSurrogate {
    /// Fits the surrogate by maximizing the log marginal likelihood from
    /// several starts. Points are expected in the unit box.
    pub fn fit<R: Rng + ?Sized>(points: &[Vec<f64>], values: &[f64], rng: &mut R) -> Result<Self> {
        if points.len() != values.len() {
            return Err(Error::LengthMismatch(points.len(), values.len()));
        }
        if points.len() < 2 {
            return Err(Error::Config("GP fit needs at least two points".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("GP targets must be finite".into()));
        }
        let d = points[0].len();
        let n = values.len() as f64;
        let y_mean = values.iter().sum::<f64>() / n;
        let sd = (values.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / n).sqrt();
        let y_std = if sd > 1e-12 * y_mean.abs().max(1.0) { sd } else { 1.0 };
        let ys = DVector::from_iterator(values.len(), values.iter().map(|v| (v - y_mean) / y_std));

        let mut starts = vec![GpHyper { log_length: vec![(0.3f64).ln(); d], log_signal_var: 0.0, log_noise_var: (1e-6f64).ln() }];
        for _ in 0..4 {
            starts.push(GpHyper {
                log_length: (0..d).map(|_| rng.random_range((0.05f64).ln()..(2.0f64).ln())).collect(),
                log_signal_var: rng.random_range(-1.0..1.0),
                log_noise_var: rng.random_range((1e-8f64).ln()..(1e-2f64).ln()),
            });
        }
        let mut best: Option<(GpHyper, f64)> = None;
        for s in starts {
            let cost = NegLml { x: points, ys: &ys };
            if let Some((p, c)) = nelder_mead(cost, s.to_vec(), 0.5, 150 * (d as u64 + 2)) {
                let h = GpHyper::from_vec(&p);
                if c.is_finite() && best.as_ref().is_none_or(|(_, bc)| c < *bc) {
                    best = Some((h, c));
                }
            }
        }
        let hyper = best.map(|b| b.0).ok_or_else(|| Error::Numerical("GP likelihood fit failed".into()))?;
        Self::with_hyper(points, values, hyper, y_mean, y_std)
    }

    /// Conditions on data with fixed kernel hyperparameters and scaling.
    fn with_hyper(points: &[Vec<f64>], values: &[f64], hyper: GpHyper, y_mean: f64, y_std: f64) -> Result<Self> {
        let ys = DVector::from_iterator(values.len(), values.iter().map(|v| (v - y_mean) / y_std));
        let (chol, alpha, _) =
            factorize(points, &ys, &hyper).ok_or_else(|| Error::Numerical("kernel matrix is not positive definite".into()))?;
        let inv_len = hyper.log_length.iter().map(|l| (-l).exp()).collect();
        Ok(GpSurrogate { x: points.to_vec(), y_mean, y_std, hyper, inv_len, chol, alpha })
    }

    /// Same kernel, extra observations (used for constant-liar fill-in).
    pub fn condition(&self, points: &[Vec<f64>], values: &[f64]) -> Result<Self> {
        Self::with_hyper(points, values, self.hyper.clone(), self.y_mean, self.y_std)
    }

    /// Noise variance in objective units.
    pub fn noise_var(&self) -> f64 {
        self.hyper.log_noise_var.exp().max(NOISE_FLOOR) * self.y_std * self.y_std
    }

    /// Posterior mean and variance of the latent function.
    pub fn predict(&self, u: &[f64]) -> (f64, f64) {
        let sf2 = self.hyper.log_signal_var.exp();
        let k = DVector::from_iterator(self.x.len(), self.x.iter().map(|xi| matern52(xi, u, &self.inv_len, sf2)));
        let mean = k.dot(&self.alpha);
        let v = self.chol.solve(&k);
        let var = (sf2 - k.dot(&v)).max(0.0);
        (self.y_mean + self.y_std * mean, var * self.y_std * self.y_std)
    }
}

/// Expected improvement below `f_best` for a Gaussian prediction.
pub fn expected_improvement(mean: f64, var: f64, f_best: f64) -> f64 {
    let sigma = var.max(0.0).sqrt();
    if sigma <= 0.0 {
        return 0.0;
    }
    let z = (f_best - mean) / sigma;
    let n = Normal::standard();
    ((f_best - mean) * n.cdf(z) + sigma * n.pdf(z)).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoConfig {
    pub initial_points: usize,
    pub candidates: usize,
    /// EI maxima refined by a local search
    pub polish: usize,
    /// objective evaluations per batch
    pub parallel: usize,
    /// value recorded when the objective fails and nothing has been
    /// observed yet
    pub failure_value: f64,
}

impl Default for BoConfig {
    fn default() -> Self {
        BoConfig { initial_points: 5, candidates: 2048, polish: 3, parallel: 1, failure_value: 1e3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    /// 1-based evaluation index
    pub iter: usize,
    pub x: Vec<f64>,
    pub value: f64,
    /// best value so far, including this trial
    pub incumbent: f64,
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoResult {
    pub best_x: Vec<f64>,
    pub best_value: f64,
    /// 1-based index of the best trial
    pub best_iter: usize,
    pub history: Vec<Trial>,
}

struct NegEi<'a> {
    gp: &'a GpSurrogate,
    f_best: f64,
}

impl CostFunction for NegEi<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, u: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        let c: Vec<f64> = u.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let (m, v) = self.gp.predict(&c);
        Ok(-expected_improvement(m, v, self.f_best))
    }
}

fn argmax_ei<R: Rng + ?Sized>(gp: &GpSurrogate, f_best: f64, d: usize, cfg: &BoConfig, rng: &mut R) -> Vec<f64> {
    let mut scored: Vec<(f64, Vec<f64>)> = (0..cfg.candidates.max(1))
        .map(|_| {
            let u: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
            let (m, v) = gp.predict(&u);
            (expected_improvement(m, v, f_best), u)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut best = scored[0].clone();
    for (ei, u) in scored.into_iter().take(cfg.polish) {
        if let Some((p, c)) = nelder_mead(NegEi { gp, f_best }, u, 0.05, 60 * d as u64) {
            if -c > best.0.max(ei) {
                best = (-c, p.iter().map(|v| v.clamp(0.0, 1.0)).collect());
            }
        }
    }
    best.1
}

/// Minimizes `objective` over `space` with `budget` evaluations. Failed
/// evaluations are recorded with a penalty above the worst value seen.
pub fn optimize<F, R>(objective: F, space: &SearchSpace, budget: usize, cfg: &BoConfig, rng: &mut R) -> Result<BoResult>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
    R: Rng + ?Sized,
{
    space.validate()?;
    if budget < cfg.initial_points.max(2) {
        return Err(Error::Config(format!("budget {budget} is below the {} initial points", cfg.initial_points)));
    }
    let d = space.len();
    let mut units: Vec<Vec<f64>> = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    let mut history: Vec<Trial> = Vec::new();

    let evaluate = |batch: &[Vec<f64>]| -> Vec<Option<f64>> {
        let xs: Vec<Vec<f64>> = batch.iter().map(|u| space.from_unit(u)).collect();
        if xs.len() == 1 {
            return vec![objective(&xs[0]).ok().filter(|v| v.is_finite())];
        }
        std::thread::scope(|sc| {
            let hs: Vec<_> = xs.iter().map(|x| sc.spawn(|| objective(x).ok().filter(|v| v.is_finite()))).collect();
            hs.into_iter().map(|h| h.join().unwrap_or(None)).collect()
        })
    };
    let init = latin_hypercube(cfg.initial_points, d, rng);
    for chunk in init.chunks(cfg.parallel.max(1)) {
        let r = evaluate(chunk);
        record(space, cfg, &mut history, &mut units, &mut values, chunk.to_vec(), r);
    }
    while values.len() < budget {
        let gp = GpSurrogate::fit(&units, &values, rng)?;
        let width = cfg.parallel.max(1).min(budget - values.len());
        let f_best = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut batch: Vec<Vec<f64>> = Vec::new();
        let mut lied_u = units.clone();
        let mut lied_v = values.clone();
        let mut surrogate = gp;
        for _ in 0..width {
            let u = argmax_ei(&surrogate, f_best, d, cfg, rng);
            // snap integer dimensions before the point is used
            let u = space.to_unit(&space.from_unit(&u));
            batch.push(u.clone());
            if batch.len() < width {
                lied_u.push(u);
                lied_v.push(f_best);
                surrogate = surrogate.condition(&lied_u, &lied_v)?;
            }
        }
        let r = evaluate(&batch);
        record(space, cfg, &mut history, &mut units, &mut values, batch, r);
        log::info!("bo iteration {}: incumbent {:.6}", values.len(), history.last().map_or(f64::NAN, |t| t.incumbent));
    }
    let best = history.iter().min_by(|a, b| a.value.total_cmp(&b.value)).expect("non-empty history");
    Ok(BoResult { best_x: best.x.clone(), best_value: best.value, best_iter: best.iter, history })
}

fn record(
    space: &SearchSpace,
    cfg: &BoConfig,
    history: &mut Vec<Trial>,
    units: &mut Vec<Vec<f64>>,
    values: &mut Vec<f64>,
    batch: Vec<Vec<f64>>,
    results: Vec<Option<f64>>,
) {
    for (u, r) in batch.into_iter().zip(results) {
        let (value, failed) = match r {
            Some(v) => (v, false),
            None => {
                let finite: Vec<f64> = history.iter().filter(|t| !t.failed).map(|t| t.value).collect();
                let pen = if finite.is_empty() {
                    cfg.failure_value
                } else {
                    let hi = finite.iter().cloned().fold(f64::MIN, f64::max);
                    let lo = finite.iter().cloned().fold(f64::MAX, f64::min);
                    hi + (hi - lo).max(1e-6)
                };
                (pen, true)
            }
        };
        let x = space.from_unit(&u);
        let prev = history.last().map_or(f64::INFINITY, |t| t.incumbent);
        units.push(space.to_unit(&x));
        history.push(Trial { iter: history.len() + 1, x, value, incumbent: prev.min(value), failed });
        values.push(value);
    }
}

/// Uniform random sampling with the same budget, for comparison.
pub fn random_search<F, R>(objective: F, space: &SearchSpace, budget: usize, rng: &mut R) -> Result<BoResult>
where
    F: Fn(&[f64]) -> Result<f64>,
    R: Rng + ?Sized,
{
    space.validate()?;
    let mut history: Vec<Trial> = Vec::new();
    for i in 0..budget {
        let u: Vec<f64> = (0..space.len()).map(|_| rng.random::<f64>()).collect();
        let x = space.from_unit(&u);
        let (value, failed) = match objective(&x) {
            Ok(v) if v.is_finite() => (v, false),
            _ => (f64::INFINITY, true),
        };
        let prev = history.last().map_or(f64::INFINITY, |t| t.incumbent);
        history.push(Trial { iter: i + 1, x, value, incumbent: prev.min(value), failed });
    }
    let best = history.iter().min_by(|a, b| a.value.total_cmp(&b.value)).ok_or(Error::Config("zero budget".into()))?;
    Ok(BoResult { best_x: best.x.clone(), best_value: best.value, best_iter: best.iter, history })
}

/// Writes `iter,<dims>,objective,incumbent`.
pub fn write_history_csv(path: &Path, space: &SearchSpace, history: &[Trial]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let names: Vec<&str> = space.dims.iter().map(|d| d.name.as_str()).collect();
    writeln!(f, "iter,{},objective,incumbent", names.join(","))?;
    for t in history {
        let xs: Vec<String> = t.x.iter().map(|v| v.to_string()).collect();
        writeln!(f, "{},{},{},{}", t.iter, xs.join(","), t.value, t.incumbent)?;
    }
    f.flush()?;
    Ok(())
}
