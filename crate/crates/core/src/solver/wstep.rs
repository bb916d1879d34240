//! Channel-weight update: minimize `wᵀGw − bᵀw + ε_w Σ w log w` over the
//! probability simplex by projected gradient descent with Armijo backtracking.
//!
//! With `ε_w < 0` the objective is concave along the entropy term and has
//! local minima on the faces of the simplex. After each descent the step also
//! compares every vertex and every single-channel removal (mass renormalized
//! over the rest), restarts descent from the best improving candidate, and
//! repeats until none improves.

use nalgebra::{DMatrix, DVector};

use crate::distribution::{neg_entropy, ProbabilityVector};
use crate::error::{Error, Result};

/// Floor applied to `w` inside the logarithm of the entropy gradient.
pub const LOG_FLOOR: f64 = 1e-15;
const ARMIJO_C: f64 = 1e-4;
const BACKTRACK: f64 = 0.5;
const MAX_BACKTRACKS: usize = 60;
/// Slack allowed on the final objective relative to the starting point.
pub const DESCENT_SLACK: f64 = 1e-12;

/// The quadratic `wᵀGw − bᵀw + c` equal to the data-fit term for a fixed Λ.
#[derive(Debug, Clone, PartialEq)]
pub struct WQuadratic {
    pub g: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: f64,
}

impl WQuadratic {
    pub fn mse(&self, w: &[f64]) -> f64 {
        let w = DVector::from_column_slice(w);
        (w.transpose() * &self.g * &w)[(0, 0)] - self.b.dot(&w) + self.c
    }

    /// Objective of the w-subproblem without the constant `c`.
    pub fn objective(&self, w: &[f64], eps_w: f64) -> f64 {
        let wv = DVector::from_column_slice(w);
        (wv.transpose() * &self.g * &wv)[(0, 0)] - self.b.dot(&wv) + eps_w * neg_entropy(w)
    }
}

/// Euclidean projection onto the probability simplex (sort-and-shift).
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cum += uj;
        let t = (cum - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

fn gradient(g: &DMatrix<f64>, b: &DVector<f64>, eps_w: f64, w: &[f64]) -> Vec<f64> {
    let wv = DVector::from_column_slice(w);
    let lin = 2.0 * g * &wv - b;
    lin.iter()
        .zip(w)
        .map(|(l, &wi)| l + eps_w * (wi.max(LOG_FLOOR).ln() + 1.0))
        .collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Norm of `w − P(w − ∇f(w))`, zero exactly at KKT points.
pub fn projected_gradient_norm(q: &WQuadratic, eps_w: f64, w: &[f64]) -> f64 {
    let grad = gradient(&q.g, &q.b, eps_w, w);
    let stepped: Vec<f64> = w.iter().zip(&grad).map(|(x, g)| x - g).collect();
    dist(w, &project_simplex(&stepped))
}

/// Projected gradient descent from `w` (objective `f`) until the projected
/// gradient norm drops below `tol`, no step is accepted, or `max_iters`.
fn descend(
    q: &WQuadratic,
    eps_w: f64,
    step0: f64,
    mut w: Vec<f64>,
    mut f: f64,
    tol: f64,
    max_iters: usize,
) -> (Vec<f64>, f64) {
    for _ in 0..max_iters {
        let grad = gradient(&q.g, &q.b, eps_w, &w);
        let unit: Vec<f64> = w.iter().zip(&grad).map(|(x, g)| x - g).collect();
        if dist(&w, &project_simplex(&unit)) < tol {
            break;
        }
        let mut alpha = step0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let trial: Vec<f64> = w.iter().zip(&grad).map(|(x, g)| x - alpha * g).collect();
            let cand = project_simplex(&trial);
            let decrease: f64 = grad.iter().zip(cand.iter().zip(&w)).map(|(g, (c, x))| g * (c - x)).sum();
            let fc = q.objective(&cand, eps_w);
            if fc <= f + ARMIJO_C * decrease {
                accepted = Some((cand, fc));
                break;
            }
            alpha *= BACKTRACK;
        }
        match accepted {
            Some((cand, fc)) => {
                let moved = dist(&cand, &w);
                w = cand;
                f = fc;
                if moved == 0.0 {
                    break;
                }
            }
            None => break,
        }
    }
    (w, f)
}

/// Best point among the simplex vertices and the single-channel removals of
/// `w`, if it improves on `f`. Each removal is scored in O(1) from `Gw`.
fn face_move(q: &WQuadratic, eps_w: f64, w: &[f64], f: f64) -> Option<Vec<f64>> {
    let wv = DVector::from_column_slice(w);
    let gw = &q.g * &wv;
    let quad = wv.dot(&gw);
    let lin = q.b.dot(&wv);
    let ent = neg_entropy(w);
    let mut best: Option<(f64, usize, bool)> = None;
    let mut consider = |val: f64, i: usize, vertex: bool| {
        if best.is_none_or(|(b, _, _)| val < b) {
            best = Some((val, i, vertex));
        }
    };
    for i in 0..w.len() {
        consider(q.g[(i, i)] - q.b[i], i, true);
        let wi = w[i];
        if wi > 0.0 && wi < 1.0 {
            let s = 1.0 / (1.0 - wi);
            let quad_i = s * s * (quad - 2.0 * wi * gw[i] + wi * wi * q.g[(i, i)]);
            let lin_i = s * (lin - q.b[i] * wi);
            let ent_i = s * (ent - wi * wi.ln()) + s.ln();
            consider(quad_i - lin_i + eps_w * ent_i, i, false);
        }
    }
    let (val, i, vertex) = best?;
    if !(val < f - DESCENT_SLACK * f.abs().max(1.0)) {
        return None;
    }
    Some(if vertex {
        (0..w.len()).map(|j| if j == i { 1.0 } else { 0.0 }).collect()
    } else {
        let s = 1.0 / (1.0 - w[i]);
        w.iter().enumerate().map(|(j, x)| if j == i { 0.0 } else { x * s }).collect()
    })
}

/// Descends from `w_init` to an approximate KKT point of the w-subproblem.
///
/// The returned objective never exceeds that of `w_init` by more than
/// [`DESCENT_SLACK`].
pub fn w_step(
    q: &WQuadratic,
    eps_w: f64,
    w_init: &ProbabilityVector,
    tol: f64,
    max_iters: usize,
) -> Result<ProbabilityVector> {
    let n = w_init.len();
    if q.g.nrows() != n || q.g.ncols() != n || q.b.len() != n {
        return Err(Error::Shape(format!(
            "w-step: G is {}x{}, b has {} entries, w has {n}",
            q.g.nrows(),
            q.g.ncols(),
            q.b.len()
        )));
    }
    if q.g.iter().chain(q.b.iter()).any(|v| !v.is_finite()) || !eps_w.is_finite() {
        return Err(Error::Numeric("w-step: non-finite G, b or eps_w".into()));
    }
    let spectral = q
        .g
        .clone()
        .symmetric_eigenvalues()
        .iter()
        .fold(0.0f64, |a, v| a.max(v.abs()));
    let step0 = 1.0 / (2.0 * spectral + 1.0);

    let start = w_init.as_slice();
    let f_start = q.objective(start, eps_w);
    let (mut w, mut f) = descend(q, eps_w, step0, start.to_vec(), f_start, tol, max_iters);
    if eps_w < 0.0 {
        for _ in 0..n {
            let Some(cand) = face_move(q, eps_w, &w, f) else {
                break;
            };
            let fc = q.objective(&cand, eps_w);
            let (wn, fn_) = descend(q, eps_w, step0, cand, fc, tol, max_iters);
            if fn_ >= f {
                break;
            }
            w = wn;
            f = fn_;
        }
    }
    if !(f <= f_start + DESCENT_SLACK) {
        return Ok(w_init.clone());
    }
    ProbabilityVector::from_unnormalized(w)
}
