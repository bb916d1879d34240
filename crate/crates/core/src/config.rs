use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyperparameters and stopping rules of one layer sparsification.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SparsifyConfig {
    /// Weight of Σ w log w. Must be negative so that low-entropy (sparse)
    /// channel distributions are preferred.
    pub eps_w: f64,
    /// Ridge weight on Λ, intercept included.
    pub eps_l2: f64,
    /// Relative tolerance on the change of the loss between outer iterations.
    pub outer_tol: f64,
    pub max_outer_iters: usize,
    /// Projected-gradient norm at which a w-step stops.
    pub w_step_tol: f64,
    pub max_w_iters: usize,
    /// Channels with `w_d` below this are pruned.
    pub prune_threshold: f64,
    /// Cap on the number of lifted data points per layer.
    pub max_points: usize,
    pub seed: u64,
}

impl Default for SparsifyConfig {
    fn default() -> Self {
        Self {
            eps_w: -0.01,
            eps_l2: 0.01,
            outer_tol: 1e-8,
            max_outer_iters: 200,
            w_step_tol: 1e-9,
            max_w_iters: 500,
            prune_threshold: 1e-6,
            max_points: 50_000,
            seed: 0,
        }
    }
}

impl SparsifyConfig {
    pub fn with_eps(mut self, eps_w: f64, eps_l2: f64) -> Self {
        self.eps_w = eps_w;
        self.eps_l2 = eps_l2;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps_w < 0.0) {
            return Err(Error::Config(format!(
                "eps_w must be < 0 (got {}); a nonnegative entropy weight does not sparsify",
                self.eps_w
            )));
        }
        if !(self.eps_l2 >= 0.0) || !self.eps_l2.is_finite() {
            return Err(Error::Config(format!(
                "eps_l2 must be finite and >= 0 (got {})",
                self.eps_l2
            )));
        }
        if !(self.outer_tol > 0.0) || !(self.w_step_tol > 0.0) || !(self.prune_threshold > 0.0)
        {
            return Err(Error::Config(
                "outer_tol, w_step_tol and prune_threshold must be positive".into(),
            ));
        }
        if self.max_outer_iters == 0 || self.max_w_iters == 0 || self.max_points == 0 {
            return Err(Error::Config(
                "max_outer_iters, max_w_iters and max_points must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = SparsifyConfig::default();
        c.validate().unwrap();
        assert_eq!(c.prune_threshold, 1e-6);
        assert_eq!(c.outer_tol, 1e-8);
        assert_eq!(c.max_outer_iters, 200);
        assert_eq!(c.w_step_tol, 1e-9);
        assert_eq!(c.max_w_iters, 500);
    }

    #[test]
    fn rejects_nonnegative_entropy_weight() {
        for eps_w in [0.0, 0.01, f64::NAN] {
            let c = SparsifyConfig::default().with_eps(eps_w, 0.01);
            assert!(matches!(c.validate(), Err(Error::Config(_))));
        }
        let c = SparsifyConfig::default().with_eps(-0.01, -1.0);
        assert!(c.validate().is_err());
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: SparsifyConfig = serde_json::from_str(r#"{"eps_w": -0.05}"#).unwrap();
        assert_eq!(c.eps_w, -0.05);
        assert_eq!(c.eps_l2, SparsifyConfig::default().eps_l2);
    }
}
