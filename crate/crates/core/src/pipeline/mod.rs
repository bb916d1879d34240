//! Layer-by-layer sparsification of a network from captured dumps.

mod prune;
mod report;
mod run;

use nalgebra::DMatrix;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::SparsifyConfig;
use crate::distribution::ProbabilityVector;
use crate::dump::LayerDump;
use crate::error::{Error, Result};
use crate::geometry::ConvGeometry;
use crate::lifting::{all_positions, devectorize_kernels, extract_patches, vectorize_kernels, Position, RegressionDataset};
use crate::solver::{self, SolveResult};
use crate::tensor::Tensor;

pub use prune::{install_in_place, prune_network, trace_producer, PruneMode, Upstream};
pub use report::{report, report_with, GroupRow, PruneReport, ReportRow, ReportTotals};
pub use run::{
    LAYERS_DIR, PRUNED_NET_FILE, REPORT_JSON_FILE, REPORT_TEXT_FILE,
    eligible_layers, load_dumps, residual_pairs, sparsify_network, NetworkPruneOptions, NetworkPruneOutcome,
};

/// Output of sparsifying one layer.
#[derive(Debug, Clone)]
pub struct LayerPruneResult {
    pub layer_id: String,
    pub solve: SolveResult,
    /// Geometry of the layer before pruning.
    pub geometry: ConvGeometry,
    /// Surviving input channels, ascending.
    pub kept_in: Vec<usize>,
    pub new_geometry: ConvGeometry,
    /// `|kept_in| × M × k × k`.
    pub refit_kernels: Tensor,
    /// Intercepts `Λ_{·,0}`, one per output channel.
    pub refit_bias: Vec<f64>,
}

impl LayerPruneResult {
    pub fn from_solve(solve: SolveResult, geometry: ConvGeometry) -> Result<Self> {
        let kept_in = solve.support.clone();
        let taps = geometry.taps();
        let new_geometry = ConvGeometry {
            in_channels: kept_in.len(),
            ..geometry
        };
        let mut cols = Vec::with_capacity(kept_in.len() * taps);
        for &d in &kept_in {
            cols.extend(d * taps..(d + 1) * taps);
        }
        let kept_qvec = solve.qhat.select_columns(&cols);
        let refit_kernels = devectorize_kernels(&kept_qvec, &new_geometry)?;
        Ok(Self {
            layer_id: solve.layer_id.clone(),
            refit_bias: solve.intercept.clone(),
            solve,
            geometry,
            kept_in,
            new_geometry,
            refit_kernels,
        })
    }
}

/// Output positions used to build a layer's regression: every position when
/// they fit under `cfg.max_points`, otherwise a seeded uniform sample without
/// replacement, in ascending order.
pub fn sample_positions(dump: &LayerDump, cfg: &SparsifyConfig) -> Vec<Position> {
    let all = all_positions(dump);
    if all.len() <= cfg.max_points {
        return all;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut picked = index::sample(&mut rng, all.len(), cfg.max_points).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| all[i]).collect()
}

/// Sparsifies an already lifted regression problem.
pub fn sparsify_dataset(data: &RegressionDataset, cfg: &SparsifyConfig) -> Result<LayerPruneResult> {
    let solve = solver::solve(data, cfg).map_err(|e| e.in_layer(&data.layer_id))?;
    LayerPruneResult::from_solve(solve, data.geometry)
}

/// Samples, lifts and solves one layer dump.
pub fn sparsify_layer(dump: &LayerDump, cfg: &SparsifyConfig) -> Result<LayerPruneResult> {
    cfg.validate()?;
    let positions = sample_positions(dump, cfg);
    let data = extract_patches(dump, &positions).map_err(|e| e.in_layer(&dump.layer_id))?;
    sparsify_dataset(&data, cfg)
}

/// Refits a layer for a fixed channel distribution `w` (one Λ-step).
pub fn refit_with(data: &RegressionDataset, w: &ProbabilityVector, cfg: &SparsifyConfig) -> Result<LayerPruneResult> {
    let lambda = solver::lambda_step(w, data, cfg.eps_l2).map_err(|e| e.in_layer(&data.layer_id))?;
    let loss = solver::evaluate_loss(w, &lambda, data, cfg)?;
    let mse = solver::data_mse(w.as_slice(), &lambda, data)?;
    let mut support = w.support(cfg.prune_threshold);
    if support.is_empty() {
        support.push(w.argmax());
    }
    let taps = data.geometry.taps();
    let mut qhat = lambda.columns(1, lambda.ncols() - 1).into_owned();
    for (f, mut col) in qhat.column_iter_mut().enumerate() {
        let d = f / taps;
        col *= if support.contains(&d) { w.as_slice()[d] } else { 0.0 };
    }
    let solve = SolveResult {
        layer_id: data.layer_id.clone(),
        w: w.clone(),
        intercept: lambda.column(0).iter().copied().collect(),
        lambda,
        loss_trace: vec![loss],
        support,
        qhat,
        mse,
        iterations: 0,
        converged: true,
        config: *cfg,
    };
    LayerPruneResult::from_solve(solve, data.geometry)
}

/// Elementwise maximum of two channel distributions, renormalized.
pub fn merge_residual_w(a: &ProbabilityVector, b: &ProbabilityVector) -> Result<ProbabilityVector> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cannot merge distributions of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let merged = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x.max(*y)).collect();
    ProbabilityVector::from_unnormalized(merged)
}

/// Mean-squared error of the installed refit (kept channels only, with
/// intercept) on lifted data of the original layer.
pub fn lifted_mse(result: &LayerPruneResult, data: &RegressionDataset) -> Result<f64> {
    let taps = result.geometry.taps();
    let mut rows = Vec::with_capacity(result.kept_in.len() * taps);
    for &d in &result.kept_in {
        rows.extend(d * taps..(d + 1) * taps);
    }
    let x = data.x.select_rows(&rows);
    let q = vectorize_kernels(&result.refit_kernels)?;
    let mut resid: DMatrix<f64> = &data.y - q * x;
    for (mut row, &b) in resid.row_iter_mut().zip(&result.refit_bias) {
        row.add_scalar_mut(-b);
    }
    Ok(resid.norm_squared() / (data.len() * data.outputs()) as f64)
}
