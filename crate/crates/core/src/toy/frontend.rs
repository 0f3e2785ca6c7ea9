//! Fixed differentiable acoustic front-end: non-overlapping frames, log
//! energy at each tone frequency plus broadband log energy.

use serde::{Deserialize, Serialize};

const BIN_FLOOR: f64 = 1e-3;
const BROADBAND_FLOOR: f64 = 1e-4;
const FEAT_MEAN: f64 = -4.0;
const FEAT_SCALE: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontEndConfig {
    pub sample_rate: u32,
    pub frame_len: usize,
    pub bin_frequencies: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FrontEnd {
    cfg: FrontEndConfig,
    cos: Vec<f64>,
    sin: Vec<f64>,
    gain: f64,
}

/// Per-frame features plus the intermediates needed for the backward pass.
#[derive(Debug, Clone)]
pub struct Features {
    pub n_frames: usize,
    pub dim: usize,
    /// `[n_frames][dim]`
    pub values: Vec<f64>,
    re: Vec<f64>,
    im: Vec<f64>,
    energy: Vec<f64>,
    mean_square: Vec<f64>,
}

impl Features {
    pub fn frame(&self, t: usize) -> &[f64] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    /// Features for `self` followed by `other`, as if computed on the
    /// concatenated audio (valid because frames do not overlap).
    pub fn concat(&self, other: &Features) -> Features {
        let cat = |a: &Vec<f64>, b: &Vec<f64>| {
            let mut v = a.clone();
            v.extend_from_slice(b);
            v
        };
        Features {
            n_frames: self.n_frames + other.n_frames,
            dim: self.dim,
            values: cat(&self.values, &other.values),
            re: cat(&self.re, &other.re),
            im: cat(&self.im, &other.im),
            energy: cat(&self.energy, &other.energy),
            mean_square: cat(&self.mean_square, &other.mean_square),
        }
    }
}

impl FrontEnd {
    pub fn new(cfg: FrontEndConfig) -> Self {
        let h = cfg.frame_len;
        let k = cfg.bin_frequencies.len();
        let mut cos = vec![0.0; k * h];
        let mut sin = vec![0.0; k * h];
        for (b, &f) in cfg.bin_frequencies.iter().enumerate() {
            let w = 2.0 * std::f64::consts::PI * f / f64::from(cfg.sample_rate);
            for n in 0..h {
                cos[b * h + n] = (w * n as f64).cos();
                sin[b * h + n] = (w * n as f64).sin();
            }
        }
        let gain = (2.0 / h as f64).powi(2);
        Self {
            cfg,
            cos,
            sin,
            gain,
        }
    }

    pub fn config(&self) -> &FrontEndConfig {
        &self.cfg
    }

    pub fn dim(&self) -> usize {
        self.cfg.bin_frequencies.len() + 1
    }

    pub fn frame_len(&self) -> usize {
        self.cfg.frame_len
    }

    pub fn n_frames(&self, n_samples: usize) -> usize {
        n_samples / self.cfg.frame_len
    }

    pub fn forward(&self, samples: &[f64]) -> Features {
        let h = self.cfg.frame_len;
        let k = self.cfg.bin_frequencies.len();
        let dim = k + 1;
        let n_frames = self.n_frames(samples.len());
        let mut out = Features {
            n_frames,
            dim,
            values: vec![0.0; n_frames * dim],
            re: vec![0.0; n_frames * k],
            im: vec![0.0; n_frames * k],
            energy: vec![0.0; n_frames * k],
            mean_square: vec![0.0; n_frames],
        };
        for t in 0..n_frames {
            let x = &samples[t * h..(t + 1) * h];
            for b in 0..k {
                let re: f64 = x
                    .iter()
                    .zip(&self.cos[b * h..(b + 1) * h])
                    .map(|(a, c)| a * c)
                    .sum();
                let im: f64 = x
                    .iter()
                    .zip(&self.sin[b * h..(b + 1) * h])
                    .map(|(a, s)| a * s)
                    .sum();
                let e = (re * re + im * im) * self.gain;
                out.re[t * k + b] = re;
                out.im[t * k + b] = im;
                out.energy[t * k + b] = e;
                out.values[t * dim + b] = ((e + BIN_FLOOR).ln() - FEAT_MEAN) / FEAT_SCALE;
            }
            let ms = x.iter().map(|v| v * v).sum::<f64>() / h as f64;
            out.mean_square[t] = ms;
            out.values[t * dim + k] = ((ms + BROADBAND_FLOOR).ln() - FEAT_MEAN) / FEAT_SCALE;
        }
        out
    }

    /// Gradient with respect to the samples given the gradient with respect
    /// to the features. Samples past the last full frame get zero gradient.
    pub fn backward(&self, samples: &[f64], feats: &Features, d_values: &[f64]) -> Vec<f64> {
        let h = self.cfg.frame_len;
        let k = self.cfg.bin_frequencies.len();
        let dim = k + 1;
        let mut dx = vec![0.0; samples.len()];
        for t in 0..feats.n_frames {
            let x = &samples[t * h..(t + 1) * h];
            let g = &mut dx[t * h..(t + 1) * h];
            for b in 0..k {
                let df = d_values[t * dim + b];
                if df == 0.0 {
                    continue;
                }
                let e = feats.energy[t * k + b];
                let scale = df / FEAT_SCALE * 2.0 * self.gain / (e + BIN_FLOOR);
                let cre = scale * feats.re[t * k + b];
                let cim = scale * feats.im[t * k + b];
                let cs = &self.cos[b * h..(b + 1) * h];
                let sn = &self.sin[b * h..(b + 1) * h];
                for n in 0..h {
                    g[n] += cre * cs[n] + cim * sn[n];
                }
            }
            let df = d_values[t * dim + k];
            if df != 0.0 {
                let scale =
                    df / FEAT_SCALE * 2.0 / (h as f64 * (feats.mean_square[t] + BROADBAND_FLOOR));
                for n in 0..h {
                    g[n] += scale * x[n];
                }
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fe() -> FrontEnd {
        FrontEnd::new(FrontEndConfig {
            sample_rate: 16_000,
            frame_len: 160,
            bin_frequencies: vec![500.0, 800.0, 1100.0],
        })
    }

    #[test]
    fn on_bin_tone_energy_is_amplitude_squared() {
        let f = fe();
        let x: Vec<f64> = (0..320)
            .map(|n| 0.5 * (2.0 * std::f64::consts::PI * 800.0 * n as f64 / 16_000.0 + 0.3).sin())
            .collect();
        let feats = f.forward(&x);
        assert_eq!(feats.n_frames, 2);
        assert!((feats.energy[1] - 0.25).abs() < 1e-9);
        assert!(feats.energy[0] < 1e-20 && feats.energy[2] < 1e-20);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let f = fe();
        let x: Vec<f64> = (0..330)
            .map(|n| ((n * 37 % 101) as f64 / 101.0 - 0.5) * 0.4)
            .collect();
        let weights: Vec<f64> = (0..2 * 4).map(|i| (i as f64 * 0.7).sin()).collect();
        let loss = |x: &[f64]| -> f64 {
            f.forward(x)
                .values
                .iter()
                .zip(&weights)
                .map(|(a, b)| a * b)
                .sum()
        };
        let feats = f.forward(&x);
        let grad = f.backward(&x, &feats, &weights);
        assert_eq!(grad.len(), 330);
        assert!(grad[320..].iter().all(|&g| g == 0.0));
        for &i in &[0usize, 17, 159, 160, 250, 319] {
            let mut xp = x.clone();
            xp[i] += 1e-6;
            let up = loss(&xp);
            xp[i] -= 2e-6;
            let dn = loss(&xp);
            let fd = (up - dn) / 2e-6;
            assert!(
                (fd - grad[i]).abs() < 1e-6 * (1.0 + fd.abs()),
                "{i}: {fd} vs {}",
                grad[i]
            );
        }
    }
}
