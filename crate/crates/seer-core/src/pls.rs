//! Single-predictor-group component machinery.
//!
//! Rank-1 solvers for the covariance programs, deflation, multi-rank PLS1,
//! dependent-side redundancy components, and the locally nested two-block
//! regression they combine into. These are standalone methods and the
//! building blocks of the multi-group algorithms in [`crate::seer`].

use nalgebra::{DMatrix, DVector};

use crate::criteria::stack_scores;
use crate::error::{Error, Result};
use crate::linalg::{max_gen_eig, symmetrize, GroupSpec, Metric, ProjectionBasis, Weights};

/// Covariance below which a dependent variable is treated as carrying nothing.
const NULL_COVARIANCE_TOL: f64 = 1e-14;

/// A score vector paired with its loading, group identity and rank.
#[derive(Debug, Clone)]
pub struct Component {
    /// Score in observation space: F = X·M·u (or G = Y·N·v), X taken at the
    /// deflation stage recorded by `rank`.
    pub score: DVector<f64>,
    /// Loading with unit M-norm (u'Mu = 1, resp. v'Nv = 1).
    pub loading: DVector<f64>,
    pub group: String,
    /// 1-based extraction rank within the group.
    pub rank: usize,
    /// λ, η, or the criterion value at the solution, depending on the solver.
    pub eigenvalue: f64,
}

/// A data matrix together with its residuals after regression on extracted scores.
#[derive(Debug, Clone)]
pub struct DeflationState {
    original: DMatrix<f64>,
    pub residual: DMatrix<f64>,
    pub extracted: Vec<DVector<f64>>,
}

impl DeflationState {
    pub fn new(x: &DMatrix<f64>) -> Self {
        Self {
            original: x.clone(),
            residual: x.clone(),
            extracted: Vec::new(),
        }
    }

    pub fn original(&self) -> &DMatrix<f64> {
        &self.original
    }
}

/// Modified Gram-Schmidt under the P-scalar product, dropping vectors already
/// inside the span.
fn p_orthonormal_span(vectors: &[DVector<f64>], w: &Weights) -> Vec<DVector<f64>> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for v in vectors {
        let scale = w.norm(v).max(f64::MIN_POSITIVE);
        let mut r = v.clone();
        for b in &basis {
            r -= b * w.dot(b, &r);
        }
        if w.norm(&r) > 1e-12 * scale {
            let r = w.unit(&r);
            basis.push(r);
        }
    }
    basis
}

/// Replaces the residual matrix by the residuals of the original matrix
/// regressed jointly on all extracted scores plus `f`.
///
/// Joint re-projection and sequential single-score deflation agree because
/// extracted scores are mutually P-orthogonal; re-deflating by a score already
/// in the span is a no-op.
pub fn deflate(state: DeflationState, f: &DVector<f64>, w: &Weights) -> Result<DeflationState> {
    let mut extracted = state.extracted;
    extracted.push(f.clone());
    let span = p_orthonormal_span(&extracted, w);
    let basis =
        ProjectionBasis::from_vectors(&span.iter().collect::<Vec<_>>(), state.original.nrows(), w)?;
    let residual = basis.residual_mat(&state.original);
    Ok(DeflationState {
        original: state.original,
        residual,
        extracted,
    })
}

/// Rank-1 covariance component of y on (X, M, P): u = X'Py/λ, λ = ‖X'Py‖_M.
pub(crate) fn rank1_component(
    x: &DMatrix<f64>,
    metric: &Metric,
    y: &DVector<f64>,
    w: &Weights,
    group: &str,
    rank: usize,
) -> Result<Component> {
    let py = DVector::from_fn(y.len(), |i, _| w.as_vector()[i] * y[i]);
    let xpy = x.tr_mul(&py);
    let lambda = metric.sq_norm(&xpy).max(0.0).sqrt();
    if lambda < NULL_COVARIANCE_TOL {
        return Err(Error::NullCovariance);
    }
    let u = xpy / lambda;
    let score = x * metric.apply(&u);
    Ok(Component {
        score,
        loading: u,
        group: group.to_string(),
        rank,
        eigenvalue: lambda,
    })
}

/// Rank-1 solution of the single-y covariance program.
pub fn pls1_rank1(group: &GroupSpec, y: &DVector<f64>) -> Result<Component> {
    rank1_component(
        &group.data.x,
        &group.metric,
        y,
        group.weights(),
        &group.name,
        1,
    )
}

/// A component sequence that may stop early when covariance runs out.
#[derive(Debug, Clone)]
pub struct ComponentSequence {
    pub components: Vec<Component>,
    /// Rank at which extraction hit zero covariance, if it did.
    pub truncated_at: Option<usize>,
}

/// Multi-rank PLS1: each rank solves the rank-1 program on the deflated matrix.
///
/// The metric is never recomputed on deflated matrices. Zero covariance at
/// rank 1 is an error; at a later rank the shorter list is returned with
/// `truncated_at` set.
pub fn pls1(group: &GroupSpec, y: &DVector<f64>, k: usize) -> Result<ComponentSequence> {
    let w = group.weights().clone();
    let mut state = DeflationState::new(&group.data.x);
    let mut components = Vec::with_capacity(k);
    let mut truncated_at = None;
    for rank in 1..=k {
        match rank1_component(&state.residual, &group.metric, y, &w, &group.name, rank) {
            Ok(c) => {
                state = deflate(state, &c.score, &w)?;
                components.push(c);
            }
            Err(Error::NullCovariance) if rank > 1 => {
                truncated_at = Some(rank);
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(ComponentSequence {
        components,
        truncated_at,
    })
}

/// The matched component pair of the two-block covariance program.
#[derive(Debug, Clone)]
pub struct CovariancePair {
    pub f: Component,
    pub g: Component,
    /// Shared top eigenvalue; √η is the covariance ⟨F|G⟩_P at the solution.
    pub eta: f64,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn q3_pair(
    x: &DMatrix<f64>,
    m: &Metric,
    x_name: &str,
    x_rank: usize,
    y: &DMatrix<f64>,
    n_metric: &Metric,
    y_name: &str,
    y_rank: usize,
    w: &Weights,
) -> Result<CovariancePair> {
    let xpy = w.cross(x, y);
    let s = symmetrize(&(&xpy * n_metric.matrix() * xpy.transpose()));
    let pair = max_gen_eig(&s, m, 1)?.remove(0);
    let eta = pair.value.max(0.0);
    if eta.sqrt() < NULL_COVARIANCE_TOL {
        return Err(Error::NullCovariance);
    }
    let u = pair.vector;
    let f_score = x * m.apply(&u);
    let v = xpy.tr_mul(&m.apply(&u)) / eta.sqrt();
    let g_score = y * n_metric.apply(&v);
    Ok(CovariancePair {
        f: Component {
            score: f_score,
            loading: u,
            group: x_name.to_string(),
            rank: x_rank,
            eigenvalue: eta,
        },
        g: Component {
            score: g_score,
            loading: v,
            group: y_name.to_string(),
            rank: y_rank,
            eigenvalue: eta,
        },
        eta,
    })
}

/// Rank-1 two-block solution: F and G maximize ⟨XMu|YNv⟩_P under unit metric
/// norms; η is the shared top eigenvalue of the composed resultant operators.
pub fn q3_rank1(x_group: &GroupSpec, y_group: &GroupSpec) -> Result<CovariancePair> {
    q3_pair(
        &x_group.data.x,
        &x_group.metric,
        &x_group.name,
        1,
        &y_group.data.x,
        &y_group.metric,
        &y_group.name,
        1,
        x_group.weights(),
    )
}

/// The predictor-side component of the two-block program.
///
/// The F-characterizations of the one-sided and two-sided programs coincide,
/// so this returns the F of [`q3_rank1`]; it is kept as a named operation
/// because the programs are stated separately.
pub fn q2_rank1(x_group: &GroupSpec, y_group: &GroupSpec) -> Result<Component> {
    Ok(q3_rank1(x_group, y_group)?.f)
}

/// Redundancy components of (Y, N, P) on a fixed score span, with Y-deflation.
///
/// G¹ solves the two-block program with the predictor side flattened to
/// ⟨F_basis⟩; each later rank works on the residuals of Y regressed on the
/// previous G's. Scores come out mutually P-orthogonal.
pub fn mra_components(
    f_basis: &DMatrix<f64>,
    y_group: &GroupSpec,
    l: usize,
) -> Result<Vec<Component>> {
    let w = y_group.weights().clone();
    let basis = ProjectionBasis::new(f_basis.clone(), &w)?;
    let mut state = DeflationState::new(&y_group.data.x);
    let mut out = Vec::with_capacity(l);
    for rank in 1..=l {
        let y_hat = basis.fitted_mat(&state.residual);
        let q = symmetrize(&w.cross(&y_hat, &y_hat));
        let pair = max_gen_eig(&q, &y_group.metric, 1)?.remove(0);
        let eta = pair.value.max(0.0);
        if eta < NULL_COVARIANCE_TOL {
            return Err(Error::NullCovariance);
        }
        let score = &state.residual * y_group.metric.apply(&pair.vector);
        state = deflate(state, &score, &w)?;
        out.push(Component {
            score,
            loading: pair.vector,
            group: y_group.name.clone(),
            rank,
            eigenvalue: eta,
        });
    }
    Ok(out)
}

/// A locally nested two-block fit: ordered predictor components, then
/// dependent components extracted on the fixed predictor span.
#[derive(Debug, Clone)]
pub struct LnPls2Fit {
    pub f_components: Vec<Component>,
    pub g_components: Vec<Component>,
    /// Rank at which F-extraction hit zero covariance, if it did.
    pub truncated_at: Option<usize>,
}

/// Locally nested two-block regression.
///
/// F^k solves the two-block rank-1 program on X deflated by F¹…F^{k−1} against
/// the full Y; afterwards the G's are the redundancy components of (Y, N, P)
/// on ⟨F¹…F^Kx⟩. Both families are P-orthogonal within themselves.
pub fn ln_pls2(
    x_group: &GroupSpec,
    y_group: &GroupSpec,
    kx: usize,
    ky: usize,
) -> Result<LnPls2Fit> {
    let w = x_group.weights().clone();
    let mut state = DeflationState::new(&x_group.data.x);
    let mut f_components = Vec::with_capacity(kx);
    let mut truncated_at = None;
    for rank in 1..=kx {
        match q3_pair(
            &state.residual,
            &x_group.metric,
            &x_group.name,
            rank,
            &y_group.data.x,
            &y_group.metric,
            &y_group.name,
            1,
            &w,
        ) {
            Ok(pair) => {
                state = deflate(state, &pair.f.score, &w)?;
                f_components.push(pair.f);
            }
            Err(Error::NullCovariance) if rank > 1 => {
                truncated_at = Some(rank);
                break;
            }
            Err(e) => return Err(e),
        }
    }
    let scores: Vec<DVector<f64>> = f_components.iter().map(|c| c.score.clone()).collect();
    let f_basis = stack_scores(&scores, x_group.n());
    let g_components = mra_components(&f_basis, y_group, ky)?;
    Ok(LnPls2Fit {
        f_components,
        g_components,
        truncated_at,
    })
}
