//! Tree-structured Parzen estimator over the unit square, minimizing.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

/// One finished evaluation at `(u, v)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub u: f64,
    pub v: f64,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TpeConfig {
    /// Fraction of the history treated as good.
    pub gamma: f64,
    pub n_ei_candidates: usize,
    pub min_bandwidth: f64,
}

impl Default for TpeConfig {
    fn default() -> Self {
        TpeConfig {
            gamma: 0.25,
            n_ei_candidates: 24,
            min_bandwidth: 0.05,
        }
    }
}

pub fn uniform_point<R: Rng>(rng: &mut R) -> (f64, f64) {
    (rng.random::<f64>(), rng.random::<f64>())
}

/// Mixture of a uniform prior and truncated Gaussians on `[0, 1]^2`.
#[derive(Debug, Clone)]
pub struct Parzen {
    centers: Vec<[f64; 2]>,
    sigma: [f64; 2],
    /// Normalizing mass of each kernel inside the box, per dimension.
    mass: Vec<[f64; 2]>,
    weight: f64,
}

fn std_normal() -> Normal {
    Normal::standard()
}

impl Parzen {
    /// Kernels at each point with bandwidth `max(1 / sqrt(n), min_bandwidth)`,
    /// 1 being the width of the search box; prior and kernels share weight
    /// `1 / (n + 1)`.
    pub fn fit(points: &[[f64; 2]], min_bandwidth: f64) -> Self {
        let n = points.len().max(1) as f64;
        // the search box is [0, 1] in both dimensions
        let s = (1.0 / n.sqrt()).max(min_bandwidth);
        let sigma = [s, s];
        let z = std_normal();
        let mass = points
            .iter()
            .map(|p| {
                let m = |d: usize| z.cdf((1.0 - p[d]) / sigma[d]) - z.cdf(-p[d] / sigma[d]);
                [m(0), m(1)]
            })
            .collect();
        Parzen {
            centers: points.to_vec(),
            sigma,
            mass,
            weight: 1.0 / (points.len() as f64 + 1.0),
        }
    }

    pub fn density(&self, x: [f64; 2]) -> f64 {
        let z = std_normal();
        let kernels: f64 = self
            .centers
            .iter()
            .zip(&self.mass)
            .map(|(c, m)| {
                (0..2)
                    .map(|d| z.pdf((x[d] - c[d]) / self.sigma[d]) / (self.sigma[d] * m[d]))
                    .product::<f64>()
            })
            .sum();
        self.weight * (1.0 + kernels)
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> [f64; 2] {
        let k = rng.random_range(0..=self.centers.len());
        if k == self.centers.len() {
            let (u, v) = uniform_point(rng);
            return [u, v];
        }
        let c = self.centers[k];
        let z = std_normal();
        let mut out = [0.0; 2];
        for d in 0..2 {
            // inverse-CDF draw restricted to [0, 1]
            let lo = z.cdf(-c[d] / self.sigma[d]);
            let hi = z.cdf((1.0 - c[d]) / self.sigma[d]);
            let p = lo + rng.random::<f64>() * (hi - lo);
            out[d] = (c[d] + self.sigma[d] * z.inverse_cdf(p)).clamp(0.0, 1.0);
        }
        out
    }
}

/// Split the history at the `gamma` quantile. Ties with the cut value go to
/// the good side.
pub fn split_history(history: &[Observation], gamma: f64) -> (Vec<[f64; 2]>, Vec<[f64; 2]>) {
    if history.is_empty() {
        return (vec![], vec![]);
    }
    let mut values: Vec<f64> = history.iter().map(|o| o.value).collect();
    values.sort_by(f64::total_cmp);
    let n_good = ((gamma * history.len() as f64).ceil() as usize).clamp(1, history.len());
    let cut = values[n_good - 1];
    let (good, bad): (Vec<_>, Vec<_>) = history.iter().partition(|o| o.value <= cut);
    let pts = |s: Vec<&Observation>| s.into_iter().map(|o| [o.u, o.v]).collect();
    (pts(good), pts(bad))
}

/// Next point: the candidate drawn from the good density that maximizes
/// `l(x) / g(x)`. Falls back to a uniform draw when either side is empty.
pub fn suggest<R: Rng>(history: &[Observation], cfg: &TpeConfig, rng: &mut R) -> (f64, f64) {
    let (good, bad) = split_history(history, cfg.gamma);
    if good.is_empty() || bad.is_empty() {
        return uniform_point(rng);
    }
    let l = Parzen::fit(&good, cfg.min_bandwidth);
    let g = Parzen::fit(&bad, cfg.min_bandwidth);
    let mut best = ([0.0, 0.0], f64::NEG_INFINITY);
    for _ in 0..cfg.n_ei_candidates.max(1) {
        let x = l.sample(rng);
        let score = l.density(x).ln() - g.density(x).ln();
        if score > best.1 {
            best = (x, score);
        }
    }
    (best.0[0], best.0[1])
}
