//! Discretized two-dimensional Gaussian mixtures as tabular models.

use crate::diffusion::TabularModel;
use crate::error::{Error, Result};
use crate::numeric::{log_normalize, log_sum_exp};
use crate::types::Vocab;

#[derive(Debug, Clone, PartialEq)]
pub struct GmmComponent {
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
    pub weight: f64,
}

impl GmmComponent {
    pub fn isotropic(mean: [f64; 2], std: f64, weight: f64) -> Self {
        let v = std * std;
        Self {
            mean,
            cov: [[v, 0.0], [0.0, v]],
            weight,
        }
    }

    fn log_density_fn(&self) -> Result<impl Fn(f64, f64) -> f64> {
        let [[a, b], [c, d]] = self.cov;
        if [a, b, c, d].iter().any(|x| !x.is_finite()) || (b - c).abs() > 1e-12 * (1.0 + b.abs()) {
            return Err(Error::Config(format!("covariance {:?} is not symmetric", self.cov)));
        }
        let det = a * d - b * b;
        if !(a > 0.0 && det > 0.0) {
            return Err(Error::Config(format!("covariance {:?} is not positive definite", self.cov)));
        }
        if !(self.weight > 0.0 && self.weight.is_finite()) {
            return Err(Error::Config(format!("component weight must be > 0, got {}", self.weight)));
        }
        let [mx, my] = self.mean;
        if !(mx.is_finite() && my.is_finite()) {
            return Err(Error::Config("component mean must be finite".into()));
        }
        let (ia, ib, id) = (d / det, -b / det, a / det);
        let log_norm = self.weight.ln() - (2.0 * std::f64::consts::PI).ln() - 0.5 * det.ln();
        Ok(move |x: f64, y: f64| {
            let (dx, dy) = (x - mx, y - my);
            log_norm - 0.5 * (ia * dx * dx + 2.0 * ib * dx * dy + id * dy * dy)
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmSpec {
    pub components: Vec<GmmComponent>,
    pub grid_size: usize,
}

impl Default for GmmSpec {
    /// Four equal isotropic blobs (std 6) centred in the grid quadrants.
    fn default() -> Self {
        let components = [[16.0, 16.0], [16.0, 48.0], [48.0, 16.0], [48.0, 48.0]]
            .into_iter()
            .map(|m| GmmComponent::isotropic(m, 6.0, 0.25))
            .collect();
        Self {
            components,
            grid_size: 64,
        }
    }
}

impl GmmSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 2 {
            return Err(Error::Config(format!("grid_size must be >= 2, got {}", self.grid_size)));
        }
        if self.components.is_empty() {
            return Err(Error::Config("mixture has no components".into()));
        }
        for c in &self.components {
            let _ = c.log_density_fn()?;
        }
        Ok(())
    }
}

/// Mixture density at integer cell centres `(i, j)`, normalized over the
/// grid. Weights need not sum to one; only their ratios matter.
pub fn build_gmm_table(spec: &GmmSpec) -> Result<TabularModel> {
    spec.validate()?;
    let g = spec.grid_size;
    let dens = spec
        .components
        .iter()
        .map(|c| c.log_density_fn())
        .collect::<Result<Vec<_>>>()?;
    let mut logs = Vec::with_capacity(g * g);
    let mut buf = vec![0.0; dens.len()];
    for i in 0..g {
        for j in 0..g {
            for (b, f) in buf.iter_mut().zip(&dens) {
                *b = f(i as f64, j as f64);
            }
            logs.push(log_sum_exp(&buf));
        }
    }
    let (normed, _) = log_normalize(&logs)?;
    let table: Vec<f64> = normed.into_iter().map(f64::exp).collect();
    let total: f64 = table.iter().sum();
    TabularModel::new(Vocab::masked(g)?, 2, table.into_iter().map(|p| p / total).collect())
}
