//! Multiple covariance criteria and regression diagnostics.
//!
//! The central object is [`CriterionContext`]: for a dependent block (Y, N) and
//! a conditioning basis Z it represents the two symmetric operators
//!
//! ```text
//! B = P·Π_{Z⊥} = P − P·Z·(ZᵀPZ)⁻¹·ZᵀP
//! A = tr(Y·N·Yᵀ·P·Π_Z)·B + B·Y·N·Yᵀ·B
//! ```
//!
//! The operators only ever appear inside quadratic forms, so they are held
//! implicitly through the Z-projector instead of as dense n×n matrices;
//! [`CriterionContext::dense_a`] and [`CriterionContext::dense_b`] materialize
//! them for oracle checks.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::linalg::{max_gen_eig, symmetrize, Metric, ProjectionBasis, Weights};

/// Stacks score vectors into an n×R basis matrix.
pub(crate) fn stack_scores(scores: &[DVector<f64>], n: usize) -> DMatrix<f64> {
    let mut z = DMatrix::zeros(n, scores.len());
    for (j, f) in scores.iter().enumerate() {
        z.set_column(j, f);
    }
    z
}

fn strength_product(scores: &[DVector<f64>], w: &Weights) -> f64 {
    scores.iter().map(|f| w.sq_norm(f)).product()
}

/// Quadratic-form context for one conditioned criterion evaluation.
#[derive(Debug, Clone)]
pub struct CriterionContext {
    y: DMatrix<f64>,
    n_metric: Metric,
    basis: ProjectionBasis,
    y_res: DMatrix<f64>,
    trace_term: f64,
    weights: Weights,
}

impl CriterionContext {
    /// Builds the context for dependent block (Y, N) conditioned on Z (possibly
    /// zero columns).
    pub fn build(
        y: &DMatrix<f64>,
        n_metric: &Metric,
        z: &DMatrix<f64>,
        w: &Weights,
    ) -> Result<Self> {
        if n_metric.dim() != y.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "dependent block has {} columns but N is {}x{}",
                y.ncols(),
                n_metric.dim(),
                n_metric.dim()
            )));
        }
        let basis = ProjectionBasis::new(z.clone(), w)?;
        let y_fit = basis.fitted_mat(y);
        let y_res = y - &y_fit;
        let trace_term = (n_metric.matrix() * w.cross(&y_fit, &y_fit)).trace();
        Ok(Self {
            y: y.clone(),
            n_metric: n_metric.clone(),
            basis,
            y_res,
            trace_term,
            weights: w.clone(),
        })
    }

    /// Single-variable context: K = 1 with a unit weight.
    pub fn univariate(y: &DVector<f64>, z: &DMatrix<f64>, w: &Weights) -> Result<Self> {
        let ym = DMatrix::from_columns(std::slice::from_ref(y));
        Self::build(&ym, &Metric::identity(1), z, w)
    }

    /// tr(Y·N·Yᵀ·P·Π_Z); zero when Z is empty.
    pub fn trace_term(&self) -> f64 {
        self.trace_term
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn conditioning(&self) -> &DMatrix<f64> {
        self.basis.basis()
    }

    pub fn dependent(&self) -> &DMatrix<f64> {
        &self.y
    }

    /// B·v.
    pub fn apply_b(&self, v: &DVector<f64>) -> DVector<f64> {
        let r = self.basis.residual(v);
        DVector::from_fn(r.len(), |i, _| self.weights.as_vector()[i] * r[i])
    }

    /// A·v.
    pub fn apply_a(&self, v: &DVector<f64>) -> DVector<f64> {
        let bv = self.apply_b(v);
        let c = self.n_metric.matrix() * self.y_res.tr_mul(&bv);
        let py_res = self.weights.scale_rows(&self.y_res);
        self.trace_term * &bv + py_res * c
    }

    /// vᵀBv = ‖Π_{Z⊥}v‖²_P.
    pub fn quad_b(&self, v: &DVector<f64>) -> f64 {
        self.weights.sq_norm(&self.basis.residual(v))
    }

    /// vᵀAv.
    pub fn quad_a(&self, v: &DVector<f64>) -> f64 {
        let r = self.basis.residual(v);
        let pr = DVector::from_fn(r.len(), |i, _| self.weights.as_vector()[i] * r[i]);
        let c = self.y_res.tr_mul(&pr);
        self.trace_term * self.weights.sq_norm(&r) + c.dot(&(self.n_metric.matrix() * &c))
    }

    /// XᵀBX.
    pub fn gram_b(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let xr = self.basis.residual_mat(x);
        symmetrize(&self.weights.cross(&xr, &xr))
    }

    /// XᵀAX.
    pub fn gram_a(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let cross = self.weights.cross(x, &self.y_res);
        symmetrize(
            &(self.trace_term * self.gram_b(x)
                + &cross * self.n_metric.matrix() * cross.transpose()),
        )
    }

    /// Materialized B, for tests and small-n oracles.
    pub fn dense_b(&self) -> DMatrix<f64> {
        let n = self.weights.len();
        let id = DMatrix::identity(n, n);
        let res = self.basis.residual_mat(&id);
        symmetrize(&self.weights.scale_rows(&res))
    }

    /// Materialized A, for tests and small-n oracles.
    pub fn dense_a(&self) -> DMatrix<f64> {
        let by = self.weights.scale_rows(&self.y_res);
        symmetrize(
            &(self.trace_term * self.dense_b() + &by * self.n_metric.matrix() * by.transpose()),
        )
    }
}

/// The criterion-decomposition scalars of a component against a context.
#[derive(Debug, Clone, Copy)]
pub struct BetaGamma {
    /// FᵀAF / FᵀBF; at a solution, the variance of y explained by all components.
    pub beta: f64,
    /// FᵀPF / FᵀBF = 1 / cos²_P(F, ⟨Z⟩-complement); ≥ 1 whenever F ∉ ⟨Z⟩.
    pub gamma: f64,
}

/// β(F) and γ(F). Errors with `DegenerateComponent` when F lies in ⟨Z⟩.
pub fn beta_gamma(f: &DVector<f64>, ctx: &CriterionContext) -> Result<BetaGamma> {
    let fpf = ctx.weights.sq_norm(f);
    let fbf = ctx.quad_b(f);
    if fbf <= 1e-14 * fpf.max(f64::MIN_POSITIVE) {
        return Err(Error::DegenerateComponent {
            group: String::new(),
            rank: 0,
        });
    }
    Ok(BetaGamma {
        beta: ctx.quad_a(f) / fbf,
        gamma: fpf / fbf,
    })
}

/// ⟨F|y⟩_P, the covariance of a component with a centred variable.
pub fn c1(f: &DVector<f64>, y: &DVector<f64>, w: &Weights) -> f64 {
    w.dot(f, y)
}

/// ‖Π_{⟨F_1…F_R⟩} y‖²_P · Π_r ‖F_r‖²_P.
///
/// The first factor is ‖y‖²_P cos²_P(y, ⟨F_1…F_R⟩); y's norm is kept as
/// supplied (it is 1 for standardized y), never re-standardized here.
pub fn c4(y: &DVector<f64>, scores: &[DVector<f64>], w: &Weights) -> Result<f64> {
    let basis = ProjectionBasis::from_vectors(&scores.iter().collect::<Vec<_>>(), y.len(), w)?;
    Ok(w.sq_norm(&basis.fitted(y)) * strength_product(scores, w))
}

/// tr(N·ŶᵀPŶ) with Ŷ = Π_{⟨F_1…F_R⟩} Y: the N-weighted explained inertia of
/// the dependent block on the score span.
pub(crate) fn explained_trace(
    y: &DMatrix<f64>,
    n_mat: &DMatrix<f64>,
    scores: &[DVector<f64>],
    w: &Weights,
) -> Result<f64> {
    let basis = ProjectionBasis::from_vectors(&scores.iter().collect::<Vec<_>>(), y.nrows(), w)?;
    let y_fit = basis.fitted_mat(y);
    Ok((n_mat * w.cross(&y_fit, &y_fit)).trace())
}

/// tr(N·ŶᵀPŶ) · Π_r ‖F_r‖²_P with Ŷ = Π_{⟨F_1…F_R⟩} Y.
///
/// For diagonal N this equals Σ_k n_k·c4(y^k, …); the trace form also accepts
/// a general symmetric N.
pub fn c5(
    y: &DMatrix<f64>,
    n_mat: &DMatrix<f64>,
    scores: &[DVector<f64>],
    w: &Weights,
) -> Result<f64> {
    Ok(explained_trace(y, n_mat, scores, w)? * strength_product(scores, w))
}

/// ‖G‖²_P cos²_P(G, ⟨F_1…F_R⟩) · Π_r ‖F_r‖²_P = ‖Π G‖²_P · Π_r ‖F_r‖²_P.
pub fn c6(g: &DVector<f64>, scores: &[DVector<f64>], w: &Weights) -> Result<f64> {
    let basis = ProjectionBasis::from_vectors(&scores.iter().collect::<Vec<_>>(), g.len(), w)?;
    Ok(w.sq_norm(&basis.fitted(g)) * strength_product(scores, w))
}

/// Result of maximizing the co-determination criterion over the dependent side.
#[derive(Debug, Clone)]
pub struct PartialMax {
    /// η·Π_r‖F_r‖²_P, the criterion value.
    pub value: f64,
    /// Largest eigenvalue of Y·N·Yᵀ·P·Π_{⟨F,Z⟩}.
    pub eta: f64,
    /// G = Y·N·v.
    pub score: DVector<f64>,
    /// v with v'Nv = 1.
    pub loading: DVector<f64>,
}

/// Maximizes C6 over G = Y·N·v, v'Nv = 1, with the components and Z held fixed.
pub fn c6_partial_max(
    scores: &[DVector<f64>],
    y: &DMatrix<f64>,
    n_metric: &Metric,
    z: &DMatrix<f64>,
    w: &Weights,
) -> Result<PartialMax> {
    let mut columns: Vec<DVector<f64>> = scores.to_vec();
    for c in z.column_iter() {
        columns.push(c.into_owned());
    }
    let basis = ProjectionBasis::from_vectors(&columns.iter().collect::<Vec<_>>(), y.nrows(), w)?;
    let y_fit = basis.fitted_mat(y);
    let q = symmetrize(&w.cross(&y_fit, &y_fit));
    let pair = max_gen_eig(&q, n_metric, 1)?.remove(0);
    let score = y * n_metric.apply(&pair.vector);
    Ok(PartialMax {
        value: pair.value * strength_product(scores, w),
        eta: pair.value,
        score,
        loading: pair.vector,
    })
}

/// ‖Π_{⟨regressors⟩} y‖²_P / ‖y‖²_P.
pub fn r_squared(y: &DVector<f64>, regressors: &DMatrix<f64>, w: &Weights) -> Result<f64> {
    let basis = ProjectionBasis::new(regressors.clone(), w)?;
    Ok(w.sq_norm(&basis.fitted(y)) / w.sq_norm(y))
}

/// One regressor's weighted-least-squares statistics.
#[derive(Debug, Clone, Copy)]
pub struct CoefficientStat {
    pub coefficient: f64,
    pub std_error: f64,
    pub t_value: f64,
    pub p_value: f64,
}

/// Descriptive WLS t-test statistics for y regressed on component scores.
///
/// These are the usual linear-model p-values; because the regressors are fitted
/// components rather than exogenous variables they are descriptive indicators
/// only. One degree of freedom is charged for the centring of the variables.
pub fn pseudo_pvalues(
    y: &DVector<f64>,
    regressors: &DMatrix<f64>,
    w: &Weights,
) -> Result<Vec<CoefficientStat>> {
    let n = y.len();
    let s = regressors.ncols();
    if n <= s + 1 {
        return Err(Error::InsufficientDof { n, regressors: s });
    }
    let df = (n - s - 1) as f64;
    let basis = ProjectionBasis::new(regressors.clone(), w)?;
    let coef = basis.coefficients(y);
    let resid = basis.residual(y);
    let sigma2 = w.sq_norm(&resid) / df;
    let g = symmetrize(&w.cross(regressors, regressors));
    let g_inv = crate::linalg::invert_spd(&g)?;
    let dist = StudentsT::new(0.0, 1.0, df).expect("df >= 1");
    let mut out = Vec::with_capacity(s);
    for j in 0..s {
        let se = (sigma2 * g_inv[(j, j)]).sqrt();
        let t = if se > 0.0 {
            coef[j] / se
        } else if coef[j] == 0.0 {
            0.0
        } else {
            f64::INFINITY * coef[j].signum()
        };
        let p = if t.is_finite() {
            2.0 * (1.0 - dist.cdf(t.abs()))
        } else {
            0.0
        };
        out.push(CoefficientStat {
            coefficient: coef[j],
            std_error: se,
            t_value: t,
            p_value: p,
        });
    }
    Ok(out)
}

/// Star coding for p-values: 0 < '***' < 0.001 < '**' < 0.01 < '*' < 0.05 < '' < 1.
pub fn significance_stars(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}
