//! Two-hidden-layer perceptron whose output is squashed into the control box.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// A dense layer `y = W x + b` with `W` stored row-major (`rows × cols`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Dense { rows, cols, w: vec![0.0; rows * cols], b: vec![0.0; rows] }
    }

    /// Uniform Glorot initialization, zero bias.
    fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let w = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
        Dense { rows, cols, w, b: vec![0.0; rows] }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        self.w
            .chunks_exact(self.cols)
            .zip(&self.b)
            .map(|(row, b)| row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + b)
            .collect()
    }

    /// Adds `dy xᵀ` and `dy` into `grad` and returns `Wᵀ dy`.
    fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Dense) -> Vec<f64> {
        let mut dx = vec![0.0; self.cols];
        for (r, &d) in dy.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            grad.b[r] += d;
            let row = &self.w[r * self.cols..(r + 1) * self.cols];
            let grow = &mut grad.w[r * self.cols..(r + 1) * self.cols];
            for c in 0..self.cols {
                grow[c] += d * x[c];
                dx[c] += d * row[c];
            }
        }
        dx
    }

    fn n_params(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// `g(x) = low + sigmoid(W₃ relu(W₂ relu(W₁ x̃ + b₁) + b₂) + b₃)·(high − low)`
/// with `x̃ = (x − shift)/scale` a fixed per-coordinate standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub hidden_sizes: (usize, usize),
    pub input_dim: usize,
    pub output_dim: usize,
    pub w1: Dense,
    pub w2: Dense,
    pub w_out: Dense,
    pub low: Vec<f64>,
    pub high: Vec<f64>,
    pub input_shift: Vec<f64>,
    pub input_scale: Vec<f64>,
}

/// Activations kept from the forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct Trace {
    input: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
    s: Vec<f64>,
    pub output: Vec<f64>,
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|t| t.max(0.0)).collect()
}

impl MlpModel {
    /// Glorot-initialized model with the identity input standardization.
    pub fn new(input_dim: usize, hidden_sizes: (usize, usize), low: Vec<f64>, high: Vec<f64>, seed: u64) -> Self {
        assert_eq!(low.len(), high.len(), "box bounds differ in length");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h1, h2) = hidden_sizes;
        let output_dim = low.len();
        MlpModel {
            hidden_sizes,
            input_dim,
            output_dim,
            w1: Dense::glorot(h1, input_dim, &mut rng),
            w2: Dense::glorot(h2, h1, &mut rng),
            w_out: Dense::glorot(output_dim, h2, &mut rng),
            low,
            high,
            input_shift: vec![0.0; input_dim],
            input_scale: vec![1.0; input_dim],
        }
    }

    /// All weights and biases zero: the output is the box midpoint.
    pub fn zeros(input_dim: usize, hidden_sizes: (usize, usize), low: Vec<f64>, high: Vec<f64>) -> Self {
        let mut m = Self::new(input_dim, hidden_sizes, low, high, 0);
        m.set_params(&vec![0.0; m.n_params()]);
        m
    }

    /// Sets the output biases so that a zero hidden layer predicts the
    /// coordinate means of `targets`, kept a little inside the box.
    pub fn fit_output_bias<'a>(&mut self, targets: impl IntoIterator<Item = &'a [f64]>) {
        let mut n = 0usize;
        let mut sum = vec![0.0; self.output_dim];
        for y in targets {
            n += 1;
            sum.iter_mut().zip(y).for_each(|(s, v)| *s += v);
        }
        if n == 0 {
            return;
        }
        for (i, s) in sum.iter().enumerate() {
            let width = self.high[i] - self.low[i];
            if width <= 0.0 {
                continue;
            }
            let t = ((s / n as f64 - self.low[i]) / width).clamp(1e-3, 1.0 - 1e-3);
            self.w_out.b[i] = (t / (1.0 - t)).ln();
        }
    }

    /// Sets the standardization from the column means and deviations of
    /// `inputs`. Constant columns get scale 1.
    pub fn fit_standardization<'a>(&mut self, inputs: impl IntoIterator<Item = &'a [f64]>) {
        let mut n = 0usize;
        let mut sum = vec![0.0; self.input_dim];
        let mut sq = vec![0.0; self.input_dim];
        for x in inputs {
            n += 1;
            for ((s, q), v) in sum.iter_mut().zip(&mut sq).zip(x) {
                *s += v;
                *q += v * v;
            }
        }
        if n == 0 {
            return;
        }
        for j in 0..self.input_dim {
            let mean = sum[j] / n as f64;
            let var = (sq[j] / n as f64 - mean * mean).max(0.0);
            self.input_shift[j] = mean;
            self.input_scale[j] = if var.sqrt() > 1e-9 { var.sqrt() } else { 1.0 };
        }
    }

    pub fn n_params(&self) -> usize {
        self.w1.n_params() + self.w2.n_params() + self.w_out.n_params()
    }

    fn layers(&self) -> [&Dense; 3] {
        [&self.w1, &self.w2, &self.w_out]
    }

    fn layers_mut(&mut self) -> [&mut Dense; 3] {
        [&mut self.w1, &mut self.w2, &mut self.w_out]
    }

    /// Flat parameters: each layer's weights then biases, input layer first.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in self.layers() {
            out.extend(&l.w);
            out.extend(&l.b);
        }
        out
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.n_params(), "parameter vector length");
        let mut at = 0;
        for l in self.layers_mut() {
            let nw = l.w.len();
            l.w.copy_from_slice(&p[at..at + nw]);
            at += nw;
            let nb = l.b.len();
            l.b.copy_from_slice(&p[at..at + nb]);
            at += nb;
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_trace(x).output
    }

    pub fn forward_trace(&self, x: &[f64]) -> Trace {
        assert_eq!(x.len(), self.input_dim, "input length");
        let input: Vec<f64> =
            x.iter().zip(self.input_shift.iter().zip(&self.input_scale)).map(|(v, (m, s))| (v - m) / s).collect();
        let h1 = relu(self.w1.apply(&input));
        let h2 = relu(self.w2.apply(&h1));
        let s: Vec<f64> = self.w_out.apply(&h2).into_iter().map(sigmoid).collect();
        let output = s.iter().zip(self.low.iter().zip(&self.high)).map(|(s, (lo, hi))| lo + s * (hi - lo)).collect();
        Trace { input, h1, h2, s, output }
    }

    /// Flat parameter gradient given `∂ℓ/∂output`.
    pub fn backward(&self, trace: &Trace, d_output: &[f64]) -> Vec<f64> {
        let mut g1 = Dense::zeros(self.w1.rows, self.w1.cols);
        let mut g2 = Dense::zeros(self.w2.rows, self.w2.cols);
        let mut g3 = Dense::zeros(self.w_out.rows, self.w_out.cols);
        let d_pre: Vec<f64> = d_output
            .iter()
            .zip(&trace.s)
            .zip(self.low.iter().zip(&self.high))
            .map(|((d, s), (lo, hi))| d * (hi - lo) * s * (1.0 - s))
            .collect();
        let mut d_h2 = self.w_out.backward(&trace.h2, &d_pre, &mut g3);
        mask(&mut d_h2, &trace.h2);
        let mut d_h1 = self.w2.backward(&trace.h1, &d_h2, &mut g2);
        mask(&mut d_h1, &trace.h1);
        self.w1.backward(&trace.input, &d_h1, &mut g1);
        let mut out = Vec::with_capacity(self.n_params());
        for l in [g1, g2, g3] {
            out.extend(l.w);
            out.extend(l.b);
        }
        out
    }
}

/// ReLU derivative, taking 0 at the kink.
fn mask(d: &mut [f64], h: &[f64]) {
    for (d, h) in d.iter_mut().zip(h) {
        if *h <= 0.0 {
            *d = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> MlpModel {
        let mut m = MlpModel::new(3, (5, 4), vec![-1.0, 0.0], vec![1.0, 2.0], 7);
        m.input_shift = vec![0.1, -0.2, 0.3];
        m.input_scale = vec![2.0, 0.5, 1.0];
        for b in m.w1.b.iter_mut().chain(m.w2.b.iter_mut()) {
            *b = 0.1;
        }
        m
    }

    #[test]
    fn zero_model_outputs_midpoint() {
        let m = MlpModel::zeros(4, (3, 2), vec![0.0, 0.9], vec![2.0, 1.1]);
        let y = m.forward(&[5.0, -3.0, 1.0, 0.0]);
        assert_eq!(y[0], 1.0);
        assert!((y[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn params_round_trip() {
        let mut m = small();
        let p: Vec<f64> = (0..m.n_params()).map(|i| i as f64 * 0.01).collect();
        m.set_params(&p);
        assert_eq!(m.params(), p);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let m = small();
        let x = [0.4, -0.7, 1.3];
        let c = [0.7, -1.1];
        let loss = |m: &MlpModel| m.forward(&x).iter().zip(&c).map(|(y, c)| y * c).sum::<f64>();
        let g = m.backward(&m.forward_trace(&x), &c);
        let p0 = m.params();
        let h = 1e-6;
        for j in 0..p0.len() {
            let mut up = m.clone();
            let mut pu = p0.clone();
            pu[j] += h;
            up.set_params(&pu);
            let mut dn = m.clone();
            let mut pd = p0.clone();
            pd[j] -= h;
            dn.set_params(&pd);
            let num = (loss(&up) - loss(&dn)) / (2.0 * h);
            assert!((num - g[j]).abs() < 1e-7, "param {j}: {num} vs {}", g[j]);
        }
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(800.0) == 1.0 && sigmoid(-800.0) == 0.0);
    }

    #[test]
    fn standardization_from_data() {
        let mut m = MlpModel::new(2, (2, 2), vec![0.0], vec![1.0], 1);
        let rows = [[1.0, 5.0], [3.0, 5.0]];
        m.fit_standardization(rows.iter().map(|r| r.as_slice()));
        assert_eq!(m.input_shift, vec![2.0, 5.0]);
        assert_eq!(m.input_scale, vec![1.0, 1.0]);
    }

    #[test]
    fn output_bias_hits_the_target_mean() {
        let mut m = MlpModel::zeros(2, (3, 2), vec![0.0, 1.0], vec![2.0, 2.0]);
        let targets = [[0.5, 2.0], [1.0, 2.0]];
        m.fit_output_bias(targets.iter().map(|r| r.as_slice()));
        let y = m.forward(&[0.3, -0.2]);
        assert!((y[0] - 0.75).abs() < 1e-12, "{y:?}");
        // A mean on the bound is pulled just inside it.
        assert!(y[1] < 2.0 && y[1] > 1.99, "{y:?}");
    }

    proptest::proptest! {
        #[test]
        fn output_stays_in_box(seed in 0u64..500, scale in 0.0f64..1e3) {
            let m = MlpModel::new(4, (8, 6), vec![0.2, 0.95, -3.0], vec![1.4, 1.05, -1.0], seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let x: Vec<f64> = (0..4).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
            for (y, (lo, hi)) in m.forward(&x).iter().zip(m.low.iter().zip(&m.high)) {
                proptest::prop_assert!(lo <= y && y <= hi);
            }
        }
    }
}
