//! Stacked LSTM with a per-step linear head. Parameters live in one flat
//! vector so the optimizer, clipping and gradient checks treat them
//! uniformly. Gate order within each 4H block is input, forget, candidate,
//! output.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const N_IN: usize = 5;
pub const N_OUT: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub hidden: usize,
    pub layers: usize,
}

impl Arch {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.layers == 0 {
            return Err(Error::Config("LSTM hidden size and layer count must be positive".into()));
        }
        Ok(())
    }

    fn layer_input(&self, l: usize) -> usize {
        if l == 0 {
            N_IN
        } else {
            self.hidden
        }
    }

    fn layer_len(&self, l: usize) -> usize {
        let h = self.hidden;
        4 * h * (self.layer_input(l) + h + 1)
    }

    pub fn param_count(&self) -> usize {
        (0..self.layers).map(|l| self.layer_len(l)).sum::<usize>() + N_OUT * (self.hidden + 1)
    }

    /// Offsets of (W_x, W_h, b) for layer `l`.
    fn layer_offsets(&self, l: usize) -> (usize, usize, usize) {
        let start: usize = (0..l).map(|k| self.layer_len(k)).sum();
        let h = self.hidden;
        let wx = start;
        let wh = wx + 4 * h * self.layer_input(l);
        let b = wh + 4 * h * h;
        (wx, wh, b)
    }

    /// Offsets of the head weight and bias.
    fn head_offsets(&self) -> (usize, usize) {
        let start: usize = (0..self.layers).map(|k| self.layer_len(k)).sum();
        (start, start + N_OUT * self.hidden)
    }
}

/// Per-channel affine normalization of inputs and targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub in_mean: [f64; N_IN],
    pub in_std: [f64; N_IN],
    pub out_mean: [f64; N_OUT],
    pub out_std: [f64; N_OUT],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization { in_mean: [0.0; N_IN], in_std: [1.0; N_IN], out_mean: [0.0; N_OUT], out_std: [1.0; N_OUT] }
    }
}

fn mean_std<const N: usize>(rows: &[[f64; N]]) -> ([f64; N], [f64; N]) {
    let n = rows.len().max(1) as f64;
    let mut mean = [0.0; N];
    for r in rows {
        for i in 0..N {
            mean[i] += r[i] / n;
        }
    }
    let mut var = [0.0; N];
    for r in rows {
        for i in 0..N {
            var[i] += (r[i] - mean[i]).powi(2) / n;
        }
    }
    // constant channels keep unit scale
    (mean, var.map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 }))
}

impl Normalization {
    pub fn fit(inputs: &[[f64; N_IN]], targets: &[[f64; N_OUT]]) -> Self {
        let (in_mean, in_std) = mean_std(inputs);
        let (out_mean, out_std) = mean_std(targets);
        Normalization { in_mean, in_std, out_mean, out_std }
    }

    pub fn input(&self, x: &[f64; N_IN]) -> [f64; N_IN] {
        std::array::from_fn(|i| (x[i] - self.in_mean[i]) / self.in_std[i])
    }

    pub fn target(&self, y: &[f64; N_OUT]) -> [f64; N_OUT] {
        std::array::from_fn(|i| (y[i] - self.out_mean[i]) / self.out_std[i])
    }

    pub fn denormalize(&self, y: &[f64; N_OUT]) -> [f64; N_OUT] {
        std::array::from_fn(|i| y[i] * self.out_std[i] + self.out_mean[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmModel {
    pub arch: Arch,
    pub params: Vec<f64>,
    pub norm: Normalization,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Activations kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Cache {
    pub t: usize,
    /// per layer, the layer input at each step (T x in)
    inputs: Vec<Vec<f64>>,
    /// per layer, post-activation gates (T x 4H)
    gates: Vec<Vec<f64>>,
    /// per layer, cell state (T+1 x H), row 0 is the zero initial state
    cell: Vec<Vec<f64>>,
    /// per layer, hidden state (T+1 x H)
    hidden: Vec<Vec<f64>>,
    pub outputs: Vec<[f64; N_OUT]>,
}

impl LstmModel {
    pub fn zeros(arch: Arch) -> Self {
        LstmModel { arch, params: vec![0.0; arch.param_count()], norm: Normalization::default() }
    }

    /// Glorot-uniform weights, zero biases except a unit forget-gate bias.
    pub fn init<R: Rng + ?Sized>(arch: Arch, rng: &mut R) -> Self {
        let mut m = Self::zeros(arch);
        let h = arch.hidden;
        for l in 0..arch.layers {
            let (wx, wh, b) = arch.layer_offsets(l);
            let nin = arch.layer_input(l);
            let ax = (6.0 / (nin + 4 * h) as f64).sqrt();
            let ah = (6.0 / (5 * h) as f64).sqrt();
            for v in &mut m.params[wx..wh] {
                *v = rng.random_range(-ax..ax);
            }
            for v in &mut m.params[wh..b] {
                *v = rng.random_range(-ah..ah);
            }
            for v in &mut m.params[b + h..b + 2 * h] {
                *v = 1.0;
            }
        }
        let (wy, by) = arch.head_offsets();
        let ay = (6.0 / (h + N_OUT) as f64).sqrt();
        for v in &mut m.params[wy..by] {
            *v = rng.random_range(-ay..ay);
        }
        m
    }

    /// Runs the network over a normalized sequence.
    pub fn forward(&self, seq: &[[f64; N_IN]]) -> Result<Cache> {
        let a = self.arch;
        let h = a.hidden;
        let t_len = seq.len();
        if t_len == 0 {
            return Err(Error::Config("empty LSTM input sequence".into()));
        }
        let mut cache = Cache {
            t: t_len,
            inputs: Vec::with_capacity(a.layers),
            gates: Vec::with_capacity(a.layers),
            cell: Vec::with_capacity(a.layers),
            hidden: Vec::with_capacity(a.layers),
            outputs: Vec::with_capacity(t_len),
        };
        let mut layer_in: Vec<f64> = seq.iter().flat_map(|r| r.iter().copied()).collect();
        for l in 0..a.layers {
            let nin = a.layer_input(l);
            let (wx, wh, b) = a.layer_offsets(l);
            let p = &self.params;
            let mut gates = vec![0.0; t_len * 4 * h];
            let mut cell = vec![0.0; (t_len + 1) * h];
            let mut hid = vec![0.0; (t_len + 1) * h];
            for t in 0..t_len {
                let x = &layer_in[t * nin..(t + 1) * nin];
                let hp = &hid[t * h..(t + 1) * h];
                let g = &mut gates[t * 4 * h..(t + 1) * 4 * h];
                for r in 0..4 * h {
                    let mut z = p[b + r];
                    let rx = &p[wx + r * nin..wx + (r + 1) * nin];
                    for k in 0..nin {
                        z += rx[k] * x[k];
                    }
                    let rh = &p[wh + r * h..wh + (r + 1) * h];
                    for k in 0..h {
                        z += rh[k] * hp[k];
                    }
                    g[r] = if (2 * h..3 * h).contains(&r) { z.tanh() } else { sigmoid(z) };
                }
                for j in 0..h {
                    let c = g[h + j] * cell[t * h + j] + g[j] * g[2 * h + j];
                    cell[(t + 1) * h + j] = c;
                    let hv = g[3 * h + j] * c.tanh();
                    if !hv.is_finite() {
                        return Err(Error::NonFiniteActivation { step: t });
                    }
                    hid[(t + 1) * h + j] = hv;
                }
            }
            let next: Vec<f64> = hid[h..].to_vec();
            cache.inputs.push(std::mem::replace(&mut layer_in, next));
            cache.gates.push(gates);
            cache.cell.push(cell);
            cache.hidden.push(hid);
        }
        let (wy, by) = a.head_offsets();
        let top = cache.hidden.last().expect("at least one layer");
        for t in 0..t_len {
            let hv = &top[(t + 1) * h..(t + 2) * h];
            let mut y = [0.0; N_OUT];
            for (o, yo) in y.iter_mut().enumerate() {
                let row = &self.params[wy + o * h..wy + (o + 1) * h];
                *yo = self.params[by + o] + row.iter().zip(hv).map(|(w, v)| w * v).sum::<f64>();
            }
            cache.outputs.push(y);
        }
        Ok(cache)
    }

    /// Accumulates into `grad` the gradient of sum_t <dy_t, y_t>, where
    /// `dy` holds dLoss/dy for each step.
    pub fn backward(&self, cache: &Cache, dy: &[[f64; N_OUT]], grad: &mut [f64]) {
        let a = self.arch;
        let h = a.hidden;
        let t_len = cache.t;
        let p = &self.params;
        let (wy, by) = a.head_offsets();
        // gradient flowing into the top layer's hidden state
        let mut dh_in = vec![0.0; t_len * h];
        let top = cache.hidden.last().expect("at least one layer");
        for t in 0..t_len {
            let hv = &top[(t + 1) * h..(t + 2) * h];
            for o in 0..N_OUT {
                let d = dy[t][o];
                if d == 0.0 {
                    continue;
                }
                grad[by + o] += d;
                for j in 0..h {
                    grad[wy + o * h + j] += d * hv[j];
                    dh_in[t * h + j] += d * p[wy + o * h + j];
                }
            }
        }
        for l in (0..a.layers).rev() {
            let nin = a.layer_input(l);
            let (wx, wh, b) = a.layer_offsets(l);
            let xs = &cache.inputs[l];
            let gates = &cache.gates[l];
            let cell = &cache.cell[l];
            let hid = &cache.hidden[l];
            let mut dx = vec![0.0; t_len * nin];
            let mut dh_next = vec![0.0; h];
            let mut dc_next = vec![0.0; h];
            let mut da = vec![0.0; 4 * h];
            for t in (0..t_len).rev() {
                let g = &gates[t * 4 * h..(t + 1) * 4 * h];
                for j in 0..h {
                    let (ig, fg, gg, og) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
                    let c = cell[(t + 1) * h + j];
                    let c_prev = cell[t * h + j];
                    let tc = c.tanh();
                    let dh = dh_in[t * h + j] + dh_next[j];
                    let dc = dh * og * (1.0 - tc * tc) + dc_next[j];
                    da[j] = dc * gg * ig * (1.0 - ig);
                    da[h + j] = dc * c_prev * fg * (1.0 - fg);
                    da[2 * h + j] = dc * ig * (1.0 - gg * gg);
                    da[3 * h + j] = dh * tc * og * (1.0 - og);
                    dc_next[j] = dc * fg;
                }
                let x = &xs[t * nin..(t + 1) * nin];
                let hp = &hid[t * h..(t + 1) * h];
                dh_next.iter_mut().for_each(|v| *v = 0.0);
                for r in 0..4 * h {
                    let d = da[r];
                    grad[b + r] += d;
                    for k in 0..nin {
                        grad[wx + r * nin + k] += d * x[k];
                        dx[t * nin + k] += d * p[wx + r * nin + k];
                    }
                    for k in 0..h {
                        grad[wh + r * h + k] += d * hp[k];
                        dh_next[k] += d * p[wh + r * h + k];
                    }
                }
            }
            dh_in = dx;
        }
    }

    /// Denormalized last-step prediction for a raw (unnormalized) window.
    /// The flag is set when any normalized input exceeds 10 standard
    /// deviations.
    pub fn predict_last(&self, window: &[[f64; N_IN]]) -> Result<([f64; N_OUT], bool)> {
        let mut flag = false;
        let seq: Vec<[f64; N_IN]> = window
            .iter()
            .map(|x| {
                let z = self.norm.input(x);
                if z.iter().any(|v| v.abs() > 10.0) {
                    flag = true;
                }
                z
            })
            .collect();
        let cache = self.forward(&seq)?;
        let last = cache.outputs.last().expect("non-empty");
        Ok((self.norm.denormalize(last), flag))
    }
}

/// How per-step squared errors are reduced to a scalar loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// mean over sequences, steps and channels
    Mean,
    Sum,
}

/// MSE loss of one normalized (input, target) pair; adds the gradient scaled
/// by `weight` into `grad`.
pub fn loss_and_grad(
    model: &LstmModel,
    seq: &[[f64; N_IN]],
    target: &[[f64; N_OUT]],
    weight: f64,
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    if seq.len() != target.len() {
        return Err(Error::LengthMismatch(seq.len(), target.len()));
    }
    let cache = model.forward(seq)?;
    let mut loss = 0.0;
    let mut dy = vec![[0.0; N_OUT]; seq.len()];
    for t in 0..seq.len() {
        for o in 0..N_OUT {
            let e = cache.outputs[t][o] - target[t][o];
            loss += e * e;
            dy[t][o] = 2.0 * e * weight;
        }
    }
    if let Some(g) = grad {
        model.backward(&cache, &dy, g);
    }
    Ok(loss * weight)
}

/// Borrowed (input sequence, target sequence) pair.
pub type SeqPair<'a> = (&'a [[f64; N_IN]], &'a [[f64; N_OUT]]);

/// Loss and gradient over a batch of equal-or-unequal length pairs.
pub fn batch_loss_and_grad(
    model: &LstmModel,
    batch: &[SeqPair],
    reduction: Reduction,
) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; model.params.len()];
    let mut loss = 0.0;
    let count: usize = batch.iter().map(|(x, _)| x.len() * N_OUT).sum();
    let weight = match reduction {
        Reduction::Mean => 1.0 / count.max(1) as f64,
        Reduction::Sum => 1.0,
    };
    for (x, y) in batch {
        loss += loss_and_grad(model, x, y, weight, Some(&mut grad))?;
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_model(hidden: usize, layers: usize, seed: u64) -> LstmModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = LstmModel::zeros(Arch { hidden, layers });
        for v in &mut m.params {
            *v = rng.random_range(-0.8..0.8);
        }
        m
    }

    fn random_seq(t: usize, rng: &mut ChaCha8Rng) -> (Vec<[f64; N_IN]>, Vec<[f64; N_OUT]>) {
        let x = (0..t).map(|_| std::array::from_fn(|_| rng.random_range(-1.5..1.5))).collect();
        let y = (0..t).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
        (x, y)
    }

    #[test]
    fn zero_model_outputs_zero() {
        let m = LstmModel::zeros(Arch { hidden: 6, layers: 2 });
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (x, _) = random_seq(7, &mut rng);
        let c = m.forward(&x).unwrap();
        assert!(c.outputs.iter().all(|y| y.iter().all(|&v| v == 0.0)));
        let (f, _) = m.predict_last(&[[0.0; N_IN]; 4]).unwrap();
        assert_eq!(f, [0.0; N_OUT]);
    }

    #[test]
    fn causal_first_step() {
        let m = random_model(5, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (x, _) = random_seq(2, &mut rng);
        let one = m.forward(&x[..1]).unwrap();
        let two = m.forward(&x).unwrap();
        assert_eq!(one.outputs[0], two.outputs[0]);
    }

    /// Straight-line single-layer cell written with explicit gate matrices.
    fn transcribed_forward(m: &LstmModel, x: &[[f64; N_IN]]) -> Vec<[f64; N_OUT]> {
        let h = m.arch.hidden;
        let p = &m.params;
        let wx = |gate: usize, j: usize, k: usize| p[(gate * h + j) * N_IN + k];
        let off_h = 4 * h * N_IN;
        let wh = |gate: usize, j: usize, k: usize| p[off_h + (gate * h + j) * h + k];
        let off_b = off_h + 4 * h * h;
        let bias = |gate: usize, j: usize| p[off_b + gate * h + j];
        let off_y = off_b + 4 * h;
        let mut hs = vec![0.0; h];
        let mut cs = vec![0.0; h];
        let mut out = Vec::new();
        for xt in x {
            let pre = |gate: usize, j: usize| -> f64 {
                bias(gate, j) + (0..N_IN).map(|k| wx(gate, j, k) * xt[k]).sum::<f64>() + (0..h).map(|k| wh(gate, j, k) * hs[k]).sum::<f64>()
            };
            let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
            let i: Vec<f64> = (0..h).map(|j| sig(pre(0, j))).collect();
            let f: Vec<f64> = (0..h).map(|j| sig(pre(1, j))).collect();
            let g: Vec<f64> = (0..h).map(|j| pre(2, j).tanh()).collect();
            let o: Vec<f64> = (0..h).map(|j| sig(pre(3, j))).collect();
            for j in 0..h {
                cs[j] = f[j] * cs[j] + i[j] * g[j];
            }
            hs = (0..h).map(|j| o[j] * cs[j].tanh()).collect();
            out.push(std::array::from_fn(|r| p[off_y + N_OUT * h + r] + (0..h).map(|j| p[off_y + r * h + j] * hs[j]).sum::<f64>()));
        }
        out
    }

    #[test]
    fn forward_matches_transcription() {
        let m = random_model(4, 1, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (x, _) = random_seq(5, &mut rng);
        let a = m.forward(&x).unwrap().outputs;
        let b = transcribed_forward(&m, &x);
        for (ya, yb) in a.iter().zip(&b) {
            for o in 0..N_OUT {
                assert!((ya[o] - yb[o]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn perfect_prediction_has_zero_gradient() {
        let m = random_model(4, 2, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (x, _) = random_seq(5, &mut rng);
        let y = m.forward(&x).unwrap().outputs;
        let (loss, g) = batch_loss_and_grad(&m, &[(&x, &y)], Reduction::Mean).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    pub(crate) fn max_gradient_error(layers: usize, seed: u64) -> f64 {
        let mut m = random_model(4, layers, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let (x, y) = random_seq(5, &mut rng);
        let (_, g) = batch_loss_and_grad(&m, &[(&x, &y)], Reduction::Mean).unwrap();
        let step = 1e-5;
        let mut worst: f64 = 0.0;
        for (i, gi) in g.iter().enumerate() {
            let orig = m.params[i];
            m.params[i] = orig + step;
            let lp = batch_loss_and_grad(&m, &[(&x, &y)], Reduction::Mean).unwrap().0;
            m.params[i] = orig - step;
            let lm = batch_loss_and_grad(&m, &[(&x, &y)], Reduction::Mean).unwrap().0;
            m.params[i] = orig;
            let fd = (lp - lm) / (2.0 * step);
            let err = (fd - gi).abs() / fd.abs().max(gi.abs()).max(1e-6);
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for layers in [1, 2] {
            for seed in 0..3 {
                let e = max_gradient_error(layers, seed);
                assert!(e < 1e-4, "layers {layers} seed {seed}: {e}");
            }
        }
    }

    #[test]
    fn duplicated_pair_doubles_gradient_under_sum() {
        let m = random_model(4, 1, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (x, y) = random_seq(5, &mut rng);
        let (_, g1) = batch_loss_and_grad(&m, &[(&x, &y)], Reduction::Sum).unwrap();
        let (_, g2) = batch_loss_and_grad(&m, &[(&x, &y), (&x, &y)], Reduction::Sum).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn normalization_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (x, y) = random_seq(100, &mut rng);
        let y: Vec<[f64; N_OUT]> = y.iter().map(|r| r.map(|v| 300.0 * v + 50.0)).collect();
        let n = Normalization::fit(&x, &y);
        let back = n.denormalize(&n.target(&y[3]));
        for o in 0..N_OUT {
            assert!((back[o] - y[3][o]).abs() < 1e-9);
        }
        let z: Vec<[f64; N_IN]> = x.iter().map(|r| n.input(r)).collect();
        let (m, s) = mean_std(&z);
        for i in 0..N_IN {
            assert!(m[i].abs() < 1e-12 && (s[i] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_forward() {
        let m = random_model(6, 2, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (x, _) = random_seq(30, &mut rng);
        assert_eq!(m.forward(&x).unwrap().outputs, m.forward(&x).unwrap().outputs);
    }
}
