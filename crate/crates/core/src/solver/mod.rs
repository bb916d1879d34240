//! Alternating minimization of the entropy-regularized channel regression
//!
//! ```text
//! L(w, Λ) = ε_w Σ_d w_d log w_d + ε_l2 ‖Λ‖²
//!         + 1/(T*M) Σ_{t,m} (Y_{m,t} − Λ_{m,0} − Σ_d w_d Σ_l Λ_{m,(d,l)} X_{(d,l),t})²
//! ```
//!
//! over channel weights `w` on the probability simplex and the regression
//! matrix `Λ` (`M × (k²D + 1)`, intercept in column 0).

mod stats;
pub mod wstep;

use std::fs;
use std::path::Path;

use log::{debug, warn};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::config::SparsifyConfig;
use crate::distribution::{neg_entropy, ProbabilityVector};
use crate::error::{Error, Result};
use crate::lifting::{channel_scale, RegressionDataset};
use crate::tensor::Tensor;

use stats::SufficientStats;
pub use wstep::{project_simplex, projected_gradient_norm, w_step, WQuadratic};

/// Loss increase between half-steps treated as an implementation fault.
pub const DIVERGENCE_SLACK: f64 = 1e-8;

pub const RESULT_FILE: &str = "result.json";
pub const LAMBDA_FILE: &str = "lambda.tdf";
pub const QHAT_FILE: &str = "qhat.tdf";

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub layer_id: String,
    pub w: ProbabilityVector,
    /// `M × (k²D + 1)`, intercept in column 0.
    pub lambda: DMatrix<f64>,
    /// Loss after every half-step, Λ-step first.
    pub loss_trace: Vec<f64>,
    /// Ascending channel indices with `w_d ≥ prune_threshold`.
    pub support: Vec<usize>,
    /// Refit kernels `Λ·D(w)` without the intercept, `M × k²D`, columns of
    /// pruned channels zeroed.
    pub qhat: DMatrix<f64>,
    /// `Λ_{·,0}`.
    pub intercept: Vec<f64>,
    /// Mean-squared error term at the final `(w, Λ)`.
    pub mse: f64,
    pub iterations: usize,
    pub converged: bool,
    pub config: SparsifyConfig,
}

#[derive(Serialize, Deserialize)]
struct ResultRecord {
    layer_id: String,
    w: Vec<f64>,
    support: Vec<usize>,
    loss_trace: Vec<f64>,
    mse: f64,
    iterations: usize,
    converged: bool,
    config: SparsifyConfig,
}

impl SolveResult {
    /// Writes `result.json`, `lambda.tdf` and `qhat.tdf` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let record = ResultRecord {
            layer_id: self.layer_id.clone(),
            w: self.w.as_slice().to_vec(),
            support: self.support.clone(),
            loss_trace: self.loss_trace.clone(),
            mse: self.mse,
            iterations: self.iterations,
            converged: self.converged,
            config: self.config,
        };
        let path = dir.join(RESULT_FILE);
        let text = serde_json::to_string_pretty(&record).expect("result serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        matrix_tensor(&self.lambda)?.save(dir.join(LAMBDA_FILE))?;
        matrix_tensor(&self.qhat)?.save(dir.join(QHAT_FILE))
    }
}

/// Row-major 2-d tensor of a matrix.
pub(crate) fn matrix_tensor(m: &DMatrix<f64>) -> Result<Tensor> {
    let data = m.transpose().as_slice().to_vec();
    Tensor::new(vec![m.nrows(), m.ncols()], data)
}

fn check_dims(w: &[f64], lambda: &DMatrix<f64>, data: &RegressionDataset) -> Result<()> {
    if w.len() != data.channels() {
        return Err(Error::Shape(format!(
            "w has {} entries, layer {} has {} input channels",
            w.len(),
            data.layer_id,
            data.channels()
        )));
    }
    if lambda.nrows() != data.outputs() || lambda.ncols() != data.geometry.lifted_len() + 1 {
        return Err(Error::Shape(format!(
            "Λ is {}x{}, layer {} needs {}x{}",
            lambda.nrows(),
            lambda.ncols(),
            data.layer_id,
            data.outputs(),
            data.geometry.lifted_len() + 1
        )));
    }
    Ok(())
}

/// Mean-squared error term of the loss, evaluated directly on the data.
pub fn data_mse(w: &[f64], lambda: &DMatrix<f64>, data: &RegressionDataset) -> Result<f64> {
    check_dims(w, lambda, data)?;
    let scale = channel_scale(w, data.geometry.taps());
    let mut xw = data.x.clone();
    for (mut row, &s) in xw.row_iter_mut().zip(&scale) {
        row *= s;
    }
    let coef = lambda.columns(1, lambda.ncols() - 1);
    let mut resid = &data.y - coef * xw;
    for (mut row, &l0) in resid.row_iter_mut().zip(lambda.column(0).iter()) {
        row.add_scalar_mut(-l0);
    }
    Ok(resid.norm_squared() / (data.len() * data.outputs()) as f64)
}

/// Full loss at `(w, Λ)`.
pub fn evaluate_loss(
    w: &ProbabilityVector,
    lambda: &DMatrix<f64>,
    data: &RegressionDataset,
    cfg: &SparsifyConfig,
) -> Result<f64> {
    if lambda.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "layer {}: non-finite entry in Λ",
            data.layer_id
        )));
    }
    let mse = data_mse(w.as_slice(), lambda, data)?;
    let loss = cfg.eps_w * neg_entropy(w.as_slice()) + cfg.eps_l2 * lambda.norm_squared() + mse;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("layer {}: loss is {loss}", data.layer_id)));
    }
    Ok(loss)
}

/// Exact minimizer of the loss over Λ for fixed `w`.
///
/// Per output row this is the ridge solve `(Z₁Z₁ᵀ + T*·M·ε_l2·I)⁻¹ Z₁Yᵀ`
/// with `Z₁ = [1; D(w)X]`. Channels with `w_d = 0` receive zero coefficients.
pub fn lambda_step(w: &ProbabilityVector, data: &RegressionDataset, eps_l2: f64) -> Result<DMatrix<f64>> {
    if w.len() != data.channels() {
        return Err(Error::Shape(format!(
            "w has {} entries, layer {} has {} input channels",
            w.len(),
            data.layer_id,
            data.channels()
        )));
    }
    if !(eps_l2 >= 0.0) {
        return Err(Error::Config(format!("eps_l2 must be >= 0, got {eps_l2}")));
    }
    SufficientStats::new(data).lambda_step(w.as_slice(), eps_l2, &data.layer_id)
}

/// The data-fit term as `wᵀGw − bᵀw + c` for fixed Λ.
pub fn build_w_quadratic(lambda: &DMatrix<f64>, data: &RegressionDataset) -> Result<WQuadratic> {
    check_dims(&vec![0.0; data.channels()], lambda, data)?;
    Ok(SufficientStats::new(data).quadratic(lambda))
}

fn push_loss(trace: &mut Vec<f64>, loss: f64, layer: &str, step: &str) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("layer {layer}: loss became {loss} after {step}")));
    }
    if let Some(&prev) = trace.last() {
        if loss > prev + DIVERGENCE_SLACK {
            return Err(Error::AlgorithmViolation {
                layer: layer.to_string(),
                reason: format!("loss rose from {prev} to {loss} in {step} {}", trace.len() / 2 + 1),
            });
        }
    }
    trace.push(loss);
    Ok(())
}

/// Runs the alternating Λ-step / w-step iteration from uniform `w`.
pub fn solve(data: &RegressionDataset, cfg: &SparsifyConfig) -> Result<SolveResult> {
    cfg.validate()?;
    let layer = data.layer_id.as_str();
    let stats = SufficientStats::new(data);
    let d_count = data.channels();

    let mut w = ProbabilityVector::uniform(d_count);
    let mut trace = Vec::with_capacity(2 * cfg.max_outer_iters);
    let mut lambda = DMatrix::zeros(data.outputs(), data.geometry.lifted_len() + 1);
    let mut prev: Option<f64> = None;
    let mut converged = false;
    let mut iterations = 0;
    let mut last_mse = f64::NAN;

    while iterations < cfg.max_outer_iters {
        iterations += 1;
        lambda = stats.lambda_step(w.as_slice(), cfg.eps_l2, layer)?;
        let quad = stats.quadratic(&lambda);
        let ridge = cfg.eps_l2 * lambda.norm_squared();
        let after_lambda = cfg.eps_w * neg_entropy(w.as_slice()) + ridge + quad.mse(w.as_slice());
        push_loss(&mut trace, after_lambda, layer, "Λ-step")?;

        w = w_step(&quad, cfg.eps_w, &w, cfg.w_step_tol, cfg.max_w_iters)?;
        last_mse = quad.mse(w.as_slice());
        let after_w = cfg.eps_w * neg_entropy(w.as_slice()) + ridge + last_mse;
        push_loss(&mut trace, after_w, layer, "w-step")?;

        if let Some(p) = prev {
            if (p - after_w).abs() < cfg.outer_tol * p.abs().max(1.0) {
                converged = true;
                break;
            }
        }
        prev = Some(after_w);
    }
    debug!(
        "layer {layer}: {iterations} outer iterations, converged={converged}, loss={:?}",
        trace.last()
    );

    let mut support = w.support(cfg.prune_threshold);
    if support.is_empty() {
        let keep = w.argmax();
        warn!("layer {layer}: every channel fell below the threshold; keeping channel {keep}");
        support.push(keep);
    }
    let taps = data.geometry.taps();
    let mut mask = vec![0.0; d_count];
    for &d in &support {
        mask[d] = w.as_slice()[d];
    }
    let scale = channel_scale(&mask, taps);
    let mut qhat = lambda.columns(1, lambda.ncols() - 1).into_owned();
    for (mut col, &s) in qhat.column_iter_mut().zip(&scale) {
        col *= s;
    }
    let intercept = lambda.column(0).iter().copied().collect();

    Ok(SolveResult {
        layer_id: data.layer_id.clone(),
        w,
        lambda,
        loss_trace: trace,
        support,
        qhat,
        intercept,
        mse: last_mse,
        iterations,
        converged,
        config: *cfg,
    })
}
