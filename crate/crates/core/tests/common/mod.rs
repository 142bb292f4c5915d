//! Independent reference implementations used as test oracles. Nothing in
//! this file calls into the code under test except to read parameters; the
//! `checks` submodule drives the code under test against these oracles.

#![allow(dead_code)]

pub mod checks;

use cbp_core::net::Network;

/// Forward pass written directly from the layer definitions, one unit at a
/// time.
pub fn naive_forward(net: &Network, x: &[f64]) -> Vec<f64> {
    let mut a = x.to_vec();
    for layer in net.layers() {
        let mut z = vec![0.0; layer.fan_out()];
        for (k, zk) in z.iter_mut().enumerate() {
            *zk = layer.biases()[k];
            for (j, &aj) in a.iter().enumerate() {
                *zk += layer.weight(j, k) * aj;
            }
        }
        let mut h = vec![0.0; z.len()];
        layer.activation().apply(&z, &mut h);
        a = h;
    }
    a
}

/// Loss `Σ c_k · y_k` whose gradient with respect to the output is `c`.
pub fn linear_loss(net: &Network, x: &[f64], c: &[f64]) -> f64 {
    naive_forward(net, x)
        .iter()
        .zip(c)
        .map(|(y, c)| y * c)
        .sum()
}

/// Central finite-difference gradient of [`linear_loss`] for every weight
/// and bias, laid out like the network parameters.
pub fn fd_gradients(net: &Network, x: &[f64], c: &[f64], h: f64) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut out = Vec::new();
    for l in 0..net.layers().len() {
        let nw = net.layer(l).weights().len();
        let nb = net.layer(l).biases().len();
        let mut gw = vec![0.0; nw];
        let mut gb = vec![0.0; nb];
        for i in 0..nw {
            let mut p = net.clone();
            p.layer_mut(l).weights_mut()[i] += h;
            let mut m = net.clone();
            m.layer_mut(l).weights_mut()[i] -= h;
            gw[i] = (linear_loss(&p, x, c) - linear_loss(&m, x, c)) / (2.0 * h);
        }
        for i in 0..nb {
            let mut p = net.clone();
            p.layer_mut(l).biases_mut()[i] += h;
            let mut m = net.clone();
            m.layer_mut(l).biases_mut()[i] -= h;
            gb[i] = (linear_loss(&p, x, c) - linear_loss(&m, x, c)) / (2.0 * h);
        }
        out.push((gw, gb));
    }
    out
}

/// Relative error with gradients below `floor` compared on an absolute
/// scale of `floor`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Scalar Adam for one parameter with its own timestep.
#[derive(Debug, Clone, Copy)]
pub struct ScalarAdam {
    pub m: f64,
    pub v: f64,
    pub t: i32,
}

impl ScalarAdam {
    pub fn new() -> Self {
        Self {
            m: 0.0,
            v: 0.0,
            t: 0,
        }
    }

    pub fn step(&mut self, w: f64, g: f64, alpha: f64, b1: f64, b2: f64, eps: f64) -> f64 {
        self.t += 1;
        self.m = b1 * self.m + (1.0 - b1) * g;
        self.v = b2 * self.v + (1.0 - b2) * g * g;
        let mh = self.m / (1.0 - b1.powi(self.t));
        let vh = self.v / (1.0 - b2.powi(self.t));
        w - alpha * mh / (vh.sqrt() + eps)
    }
}

/// `Σ_{s=1..t} (1−η) η^{t−s} xs[s]`, a running average written as an
/// explicit sum over the whole history (1-based `t`, `xs[0]` unused).
pub fn ema_sum(xs: &[f64], t: usize, eta: f64) -> f64 {
    (1..=t)
        .map(|s| (1.0 - eta) * eta.powi((t - s) as i32) * xs[s])
        .sum()
}

/// Per-step history of one feature since it was created: `h[s]`, `in_mag[s]`
/// and `out_mag[s]` at age `s` (index 0 unused).
#[derive(Debug, Clone, Default)]
pub struct FeatureHistory {
    pub h: Vec<f64>,
    pub in_mag: Vec<f64>,
    pub out_mag: Vec<f64>,
}

impl FeatureHistory {
    pub fn new() -> Self {
        Self {
            h: vec![0.0],
            in_mag: vec![0.0],
            out_mag: vec![0.0],
        }
    }

    pub fn age(&self) -> usize {
        self.h.len() - 1
    }

    fn f_hat(&self, t: usize, eta: f64) -> f64 {
        // Bias-corrected mean activation from the previous step's average.
        let prev = if t == 0 {
            0.0
        } else {
            ema_sum(&self.h, t - 1, eta)
        };
        if t == 0 {
            0.0
        } else {
            prev / (1.0 - eta.powi(t as i32))
        }
    }

    /// Contribution utility after the full history.
    pub fn contribution(&self, eta: f64) -> f64 {
        let y: Vec<f64> = (0..=self.age())
            .map(|s| self.h[s].abs() * self.out_mag[s])
            .collect();
        ema_sum(&y, self.age(), eta)
    }

    pub fn mean_corrected(&self, eta: f64) -> f64 {
        let y: Vec<f64> = (0..=self.age())
            .map(|s| (self.h[s] - self.f_hat(s, eta)).abs() * self.out_mag[s])
            .collect();
        ema_sum(&y, self.age(), eta)
    }

    pub fn adaptation(&self, eta: f64) -> f64 {
        let y: Vec<f64> = (0..=self.age())
            .map(|s| {
                if s == 0 {
                    0.0
                } else {
                    1.0 / self.in_mag[s].max(1e-8)
                }
            })
            .collect();
        ema_sum(&y, self.age(), eta)
    }

    pub fn weight_magnitude(&self, eta: f64) -> f64 {
        ema_sum(&self.out_mag, self.age(), eta)
    }

    fn overall_terms(&self, eta: f64) -> Vec<f64> {
        (0..=self.age())
            .map(|s| {
                if s == 0 {
                    0.0
                } else {
                    (self.h[s] - self.f_hat(s, eta)).abs() * self.out_mag[s]
                        / self.in_mag[s].max(1e-8)
                }
            })
            .collect()
    }

    /// Running overall utility `u` after the full history.
    pub fn overall(&self, eta: f64) -> f64 {
        ema_sum(&self.overall_terms(eta), self.age(), eta)
    }

    /// Bias-corrected overall utility ranked at the latest step, built from
    /// the utility before that step's update.
    pub fn overall_hat(&self, eta: f64) -> f64 {
        let t = self.age();
        if t == 0 {
            return 0.0;
        }
        ema_sum(&self.overall_terms(eta), t - 1, eta) / (1.0 - eta.powi(t as i32))
    }

    pub fn mean_activation(&self, eta: f64) -> f64 {
        ema_sum(&self.h, self.age(), eta)
    }
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}
