//! Flat-parameter dense layers with explicit backward passes.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Act {
    Tanh,
    Linear,
}

/// A slice of the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub offset: usize,
    pub len: usize,
}

impl Span {
    pub fn of<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.offset..self.offset + self.len]
    }

    pub fn of_mut<'a>(&self, p: &'a mut [f64]) -> &'a mut [f64] {
        &mut p[self.offset..self.offset + self.len]
    }
}

/// Hands out consecutive spans of a flat parameter vector.
#[derive(Debug, Default)]
pub struct Layout {
    next: usize,
}

impl Layout {
    pub fn alloc(&mut self, len: usize) -> Span {
        let s = Span {
            offset: self.next,
            len,
        };
        self.next += len;
        s
    }

    pub fn total(&self) -> usize {
        self.next
    }
}

/// `y = act(W x + b)` with `W` stored row-major `[n_out][n_in]`.
#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub w: Span,
    pub b: Span,
    pub n_in: usize,
    pub n_out: usize,
    pub act: Act,
}

impl Dense {
    pub fn new(layout: &mut Layout, n_in: usize, n_out: usize, act: Act) -> Self {
        Self {
            w: layout.alloc(n_in * n_out),
            b: layout.alloc(n_out),
            n_in,
            n_out,
            act,
        }
    }

    pub fn init<R: Rng>(&self, params: &mut [f64], rng: &mut R) {
        let bound = (6.0 / (self.n_in + self.n_out) as f64).sqrt();
        for w in self.w.of_mut(params) {
            *w = rng.gen_range(-bound..bound);
        }
        self.b.of_mut(params).fill(0.0);
    }

    pub fn forward(&self, params: &[f64], x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n_in);
        debug_assert_eq!(y.len(), self.n_out);
        let w = self.w.of(params);
        let b = self.b.of(params);
        for (o, yo) in y.iter_mut().enumerate() {
            let row = &w[o * self.n_in..(o + 1) * self.n_in];
            let s = b[o] + dot(row, x);
            *yo = match self.act {
                Act::Tanh => s.tanh(),
                Act::Linear => s,
            };
        }
    }

    /// Backward through the layer given its input `x`, output `y` and the
    /// upstream gradient `dy`. Accumulates into `dparams` and `dx` when given.
    pub fn backward(
        &self,
        params: &[f64],
        x: &[f64],
        y: &[f64],
        dy: &[f64],
        dparams: Option<&mut [f64]>,
        dx: Option<&mut [f64]>,
    ) {
        let mut dpre = vec![0.0; self.n_out];
        for o in 0..self.n_out {
            dpre[o] = match self.act {
                Act::Tanh => dy[o] * (1.0 - y[o] * y[o]),
                Act::Linear => dy[o],
            };
        }
        self.backward_pre(params, x, &dpre, dparams, dx);
    }

    /// Backward given the gradient with respect to the pre-activation.
    pub fn backward_pre(
        &self,
        params: &[f64],
        x: &[f64],
        dpre: &[f64],
        dparams: Option<&mut [f64]>,
        dx: Option<&mut [f64]>,
    ) {
        if let Some(dp) = dparams {
            for o in 0..self.n_out {
                let g = dpre[o];
                if g == 0.0 {
                    continue;
                }
                let row =
                    &mut dp[self.w.offset + o * self.n_in..self.w.offset + (o + 1) * self.n_in];
                for (r, xi) in row.iter_mut().zip(x) {
                    *r += g * xi;
                }
                dp[self.b.offset + o] += g;
            }
        }
        if let Some(dx) = dx {
            let w = self.w.of(params);
            for o in 0..self.n_out {
                let g = dpre[o];
                if g == 0.0 {
                    continue;
                }
                let row = &w[o * self.n_in..(o + 1) * self.n_in];
                for (d, wi) in dx.iter_mut().zip(row) {
                    *d += g * wi;
                }
            }
        }
    }
}

/// Plain matrix `M` of shape `[rows][cols]` without bias.
#[derive(Debug, Clone, Copy)]
pub struct Matrix {
    pub w: Span,
    pub rows: usize,
    pub cols: usize,
}

impl Matrix {
    pub fn new(layout: &mut Layout, rows: usize, cols: usize) -> Self {
        Self {
            w: layout.alloc(rows * cols),
            rows,
            cols,
        }
    }

    pub fn init<R: Rng>(&self, params: &mut [f64], rng: &mut R) {
        let bound = (6.0 / (self.rows + self.cols) as f64).sqrt();
        for w in self.w.of_mut(params) {
            *w = rng.gen_range(-bound..bound);
        }
    }

    pub fn apply(&self, params: &[f64], x: &[f64], y: &mut [f64]) {
        let w = self.w.of(params);
        for (r, yr) in y.iter_mut().enumerate() {
            *yr = dot(&w[r * self.cols..(r + 1) * self.cols], x);
        }
    }

    /// Accumulates `dW += dy x^T` and `dx += W^T dy`.
    pub fn backward(
        &self,
        params: &[f64],
        x: &[f64],
        dy: &[f64],
        dparams: Option<&mut [f64]>,
        dx: Option<&mut [f64]>,
    ) {
        if let Some(dp) = dparams {
            for r in 0..self.rows {
                let g = dy[r];
                let row =
                    &mut dp[self.w.offset + r * self.cols..self.w.offset + (r + 1) * self.cols];
                for (d, xi) in row.iter_mut().zip(x) {
                    *d += g * xi;
                }
            }
        }
        if let Some(dx) = dx {
            let w = self.w.of(params);
            for r in 0..self.rows {
                let g = dy[r];
                for (d, wi) in dx.iter_mut().zip(&w[r * self.cols..(r + 1) * self.cols]) {
                    *d += g * wi;
                }
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dense_backward_matches_finite_differences() {
        let mut layout = Layout::default();
        let layer = Dense::new(&mut layout, 4, 3, Act::Tanh);
        let mut params = vec![0.0; layout.total()];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        layer.init(&mut params, &mut rng);
        let x = [0.3, -0.2, 0.9, 0.1];
        let weights = [0.7, -1.3, 0.4];
        let loss = |p: &[f64], x: &[f64]| {
            let mut y = [0.0; 3];
            layer.forward(p, x, &mut y);
            dot(&y, &weights)
        };
        let mut y = [0.0; 3];
        layer.forward(&params, &x, &mut y);
        let mut dp = vec![0.0; params.len()];
        let mut dx = vec![0.0; 4];
        layer.backward(&params, &x, &y, &weights, Some(&mut dp), Some(&mut dx));
        let h = 1e-6;
        for i in 0..params.len() {
            let mut p = params.clone();
            p[i] += h;
            let up = loss(&p, &x);
            p[i] -= 2.0 * h;
            let dn = loss(&p, &x);
            assert!(((up - dn) / (2.0 * h) - dp[i]).abs() < 1e-7);
        }
        for i in 0..4 {
            let mut xx = x;
            xx[i] += h;
            let up = loss(&params, &xx);
            xx[i] -= 2.0 * h;
            let dn = loss(&params, &xx);
            assert!(((up - dn) / (2.0 * h) - dx[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn log_softmax_normalizes() {
        let l = log_softmax(&[1000.0, 1001.0, 999.0]);
        let s: f64 = l.iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}
