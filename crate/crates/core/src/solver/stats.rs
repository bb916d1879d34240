//! Sufficient statistics of a lifted dataset, from which both alternating
//! steps are formed without revisiting the data.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lifting::{channel_scale, RegressionDataset};

use super::wstep::WQuadratic;

/// Smallest squared Cholesky pivot, relative to the largest diagonal entry,
/// accepted as full rank.
const PIVOT_RTOL: f64 = 1e-13;

#[derive(Debug, Clone)]
pub(crate) struct SufficientStats {
    pub t: f64,
    pub m: usize,
    pub taps: usize,
    pub channels: usize,
    /// XXᵀ, F×F.
    pub c: DMatrix<f64>,
    /// Row sums of X.
    pub s: DVector<f64>,
    /// XYᵀ, F×M.
    pub p: DMatrix<f64>,
    pub ysum: DVector<f64>,
    pub ysq: DVector<f64>,
}

impl SufficientStats {
    pub fn new(data: &RegressionDataset) -> Self {
        let x = &data.x;
        let y = &data.y;
        Self {
            t: data.len() as f64,
            m: y.nrows(),
            taps: data.geometry.taps(),
            channels: data.geometry.in_channels,
            c: x * x.transpose(),
            s: x.column_sum(),
            p: x * y.transpose(),
            ysum: y.column_sum(),
            ysq: y.component_mul(y).column_sum(),
        }
    }

    fn features(&self) -> usize {
        self.c.nrows()
    }

    /// Ridge weight on the normal equations that makes the Λ-step the exact
    /// minimizer of the mean-squared loss plus `eps_l2 ‖Λ‖²`.
    pub fn ridge(&self, eps_l2: f64) -> f64 {
        self.t * self.m as f64 * eps_l2
    }

    /// Minimizes the loss over Λ (`M × (F+1)`, intercept first) for fixed w.
    pub fn lambda_step(&self, w: &[f64], eps_l2: f64, layer: &str) -> Result<DMatrix<f64>> {
        let wf = channel_scale(w, self.taps);
        let active: Vec<usize> = (0..self.features()).filter(|&f| wf[f] != 0.0).collect();
        let n = active.len() + 1;
        let ridge = self.ridge(eps_l2);

        let mut a = DMatrix::<f64>::zeros(n, n);
        a[(0, 0)] = self.t + ridge;
        for (i, &fi) in active.iter().enumerate() {
            let v = wf[fi] * self.s[fi];
            a[(0, i + 1)] = v;
            a[(i + 1, 0)] = v;
            for (j, &fj) in active.iter().enumerate() {
                a[(i + 1, j + 1)] = wf[fi] * self.c[(fi, fj)] * wf[fj];
            }
            a[(i + 1, i + 1)] += ridge;
        }
        let mut rhs = DMatrix::<f64>::zeros(n, self.m);
        for m in 0..self.m {
            rhs[(0, m)] = self.ysum[m];
            for (i, &fi) in active.iter().enumerate() {
                rhs[(i + 1, m)] = wf[fi] * self.p[(fi, m)];
            }
        }
        let singular = || Error::Singular {
            layer: layer.to_string(),
            reason: if ridge == 0.0 {
                "normal equations are singular with eps_l2 = 0".into()
            } else {
                "normal equations are not numerically positive definite".into()
            },
        };
        let scale = a.diagonal().max();
        let chol = a.cholesky().ok_or_else(singular)?;
        // Cholesky accepts pivots at round-off level; treat those as rank loss.
        let floor = PIVOT_RTOL * scale;
        if chol.l_dirty().diagonal().iter().any(|p| !(p * p > floor)) {
            return Err(singular());
        }
        let sol = chol.solve(&rhs);
        if sol.iter().any(|v| !v.is_finite()) {
            return Err(Error::Singular {
                layer: layer.to_string(),
                reason: "ridge solve produced non-finite coefficients".into(),
            });
        }

        let mut lambda = DMatrix::<f64>::zeros(self.m, self.features() + 1);
        for m in 0..self.m {
            lambda[(m, 0)] = sol[(0, m)];
            for (i, &fi) in active.iter().enumerate() {
                lambda[(m, fi + 1)] = sol[(i + 1, m)];
            }
        }
        Ok(lambda)
    }

    /// Expands the data-fit term as a quadratic in w for fixed Λ.
    pub fn quadratic(&self, lambda: &DMatrix<f64>) -> WQuadratic {
        let f = self.features();
        let scale = 1.0 / (self.t * self.m as f64);
        let coef = lambda.columns(1, f);
        let intercept = lambda.column(0);

        let k = (coef.transpose() * coef).component_mul(&self.c);
        let (d_count, taps) = (self.channels, self.taps);
        let mut g = DMatrix::<f64>::zeros(d_count, d_count);
        for d1 in 0..d_count {
            for d2 in 0..d_count {
                g[(d1, d2)] = k.view((d1 * taps, d2 * taps), (taps, taps)).sum() * scale;
            }
        }
        // Symmetrize away round-off so the eigen solve sees an exact symmetric matrix.
        let g = (&g + g.transpose()) * 0.5;

        let mut b = DVector::<f64>::zeros(d_count);
        for m in 0..self.m {
            let l0 = intercept[m];
            for fi in 0..f {
                b[fi / taps] += coef[(m, fi)] * (self.p[(fi, m)] - l0 * self.s[fi]);
            }
        }
        b *= 2.0 * scale;

        let c = (0..self.m)
            .map(|m| {
                let l0 = intercept[m];
                self.ysq[m] - 2.0 * l0 * self.ysum[m] + self.t * l0 * l0
            })
            .sum::<f64>()
            * scale;
        WQuadratic { g, b, c }
    }
}
