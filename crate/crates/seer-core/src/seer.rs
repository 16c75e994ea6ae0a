//! Multi-predictor-group component extraction.
//!
//! One fixed-point engine ([`a0`]) maximizes a conditioned multiple covariance
//! criterion over a single group component. The drivers cycle it: [`a1`]/[`a2`]
//! extract one component per group against a single variable or a dependent
//! block, [`a3`] extends them to locally nested multi-rank sequences, and
//! [`b1`]/[`b2`] co-determine the dependent components with the predictors.
//! [`backward_select`] prunes rank counts, one component per step.

use nalgebra::{DMatrix, DVector};

use crate::criteria::{c4, c5, c6, explained_trace, stack_scores, CriterionContext};
use crate::error::{Error, Result};
use crate::linalg::{
    gram, max_gen_eig, numerical_rank, symmetrize, triplet_pca, GroupSpec, Metric,
    ProjectionBasis, Weights,
};
use crate::pls::{mra_components, Component};

/// How the rank-1 drivers seed their component iterates.
#[derive(Debug, Clone)]
pub enum InitRule {
    /// First principal component of each group's triplet (the default).
    FirstPc,
    /// The group's j-th column (0-based), standardized.
    Column(usize),
    /// Explicit starting scores, one per predictor group.
    Given(Vec<DVector<f64>>),
}

/// Iteration controls shared by every fixed-point driver.
#[derive(Debug, Clone)]
pub struct ConvergenceOptions {
    /// Outer-loop stop: every component's standardized score must move less
    /// than this between sweeps (sign-aligned).
    pub component_tol: f64,
    /// Inner fixed-point stop for [`a0`], on standardized iterates.
    pub inner_tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub init: InitRule,
}

impl Default for ConvergenceOptions {
    fn default() -> Self {
        Self {
            component_tol: 1e-9,
            inner_tol: 1e-9,
            max_outer: 200,
            max_inner: 200,
            init: InitRule::FirstPc,
        }
    }
}

/// A dependent group, ordered predictor groups, and per-group component counts.
#[derive(Debug, Clone)]
pub struct ThematicModel {
    pub dependent: GroupSpec,
    pub predictors: Vec<GroupSpec>,
    /// J_r: components wanted in each predictor group.
    pub counts: Vec<usize>,
    /// L: components wanted in the dependent group.
    pub dependent_count: usize,
    pub options: ConvergenceOptions,
}

impl ThematicModel {
    pub fn new(
        dependent: GroupSpec,
        predictors: Vec<GroupSpec>,
        counts: Vec<usize>,
        dependent_count: usize,
        options: ConvergenceOptions,
    ) -> Result<Self> {
        if predictors.is_empty() {
            return Err(Error::InvalidModel("at least one predictor group".into()));
        }
        if counts.len() != predictors.len() {
            return Err(Error::InvalidModel(format!(
                "{} predictor groups but {} counts",
                predictors.len(),
                counts.len()
            )));
        }
        let n = dependent.n();
        let mut names = vec![dependent.name.clone()];
        for g in &predictors {
            if g.n() != n {
                return Err(Error::InvalidModel(format!(
                    "group `{}` has {} observations, dependent has {n}",
                    g.name,
                    g.n()
                )));
            }
            let dw = dependent.weights().as_vector();
            let gw = g.weights().as_vector();
            if (dw - gw).amax() > 1e-12 {
                return Err(Error::InvalidModel(format!(
                    "group `{}` does not share the dependent group's weights",
                    g.name
                )));
            }
            names.push(g.name.clone());
        }
        names.sort();
        names.dedup();
        if names.len() != predictors.len() + 1 {
            return Err(Error::InvalidModel("group names must be unique".into()));
        }
        for (g, &j) in predictors.iter().zip(&counts) {
            let rank = numerical_rank(&g.data.x);
            if j > rank {
                return Err(Error::InvalidModel(format!(
                    "group `{}` has rank {rank}, cannot extract {j} components",
                    g.name
                )));
            }
        }
        let y_rank = numerical_rank(&dependent.data.x);
        if dependent_count > y_rank {
            return Err(Error::InvalidModel(format!(
                "dependent group has rank {y_rank}, cannot extract {dependent_count} components"
            )));
        }
        Ok(Self {
            dependent,
            predictors,
            counts,
            dependent_count,
            options,
        })
    }

    pub fn n_groups(&self) -> usize {
        self.predictors.len()
    }

    pub fn weights(&self) -> &Weights {
        self.dependent.weights()
    }

    /// Same model with different per-group counts.
    pub fn with_counts(&self, counts: Vec<usize>) -> Result<Self> {
        Self::new(
            self.dependent.clone(),
            self.predictors.clone(),
            counts,
            self.dependent_count,
            self.options.clone(),
        )
    }
}

/// Identifies a sub-model: group `group` truncated to `retained` components.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubModelId {
    pub group: usize,
    pub retained: usize,
}

impl SubModelId {
    /// Rank of the component whose removal produced this sub-model.
    pub fn removed_rank(&self) -> usize {
        self.retained + 1
    }
}

/// One inner fixed-point run's diagnostics.
#[derive(Debug, Clone)]
pub struct InnerRunStat {
    pub group: String,
    pub rank: usize,
    /// Outer sweep during which the run happened (1-based; 0 for standalone runs).
    pub outer: usize,
    pub iterations: usize,
    pub converged: bool,
    /// Whether the run's criterion trace was nondecreasing (within 1e-12).
    pub monotone: bool,
}

/// Ordered components per predictor group.
#[derive(Debug, Clone)]
pub struct GroupComponents {
    pub group: String,
    pub components: Vec<Component>,
}

/// A fitted component set with its convergence record.
#[derive(Debug, Clone)]
pub struct ModelComponents {
    pub groups: Vec<GroupComponents>,
    /// Dependent components G¹…G^L (empty unless extracted).
    pub dependent: Vec<Component>,
    /// (outer iteration, criterion value) per sweep.
    pub criterion_trace: Vec<(usize, f64)>,
    /// (outer iteration, max standardized component movement) per sweep.
    pub delta_trace: Vec<(usize, f64)>,
    pub converged: bool,
    pub iterations: usize,
    /// Per-a0-run iteration counts, in execution order.
    pub inner_runs: Vec<InnerRunStat>,
}

impl ModelComponents {
    /// All predictor scores in group order, ranks in order within each group.
    pub fn all_scores(&self) -> Vec<DVector<f64>> {
        self.groups
            .iter()
            .flat_map(|g| g.components.iter().map(|c| c.score.clone()))
            .collect()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.groups.iter().map(|g| g.components.len()).collect()
    }

    pub fn group(&self, name: &str) -> Option<&GroupComponents> {
        self.groups.iter().find(|g| g.group == name)
    }
}

/// True when a criterion trace never decreases by more than 1e-12.
pub fn trace_is_monotone(trace: &[f64]) -> bool {
    trace.windows(2).all(|p| p[1] >= p[0] - 1e-12)
}

/// The fixed point of one inner criterion maximization.
#[derive(Debug, Clone)]
pub struct InnerFit {
    /// Component at the constrained scale (score = X·M·u with u'Mu = 1);
    /// `eigenvalue` holds the criterion value at the solution.
    pub component: Component,
    pub converged: bool,
    pub iterations: usize,
    /// Criterion value at the initial point and after every eigen step.
    pub trace: Vec<f64>,
}

fn degenerate(group: &str, rank: usize) -> Error {
    Error::DegenerateComponent {
        group: group.to_string(),
        rank,
    }
}

/// Sign-aligned distance between standardized score iterates.
fn aligned_delta(a: &DVector<f64>, b: &DVector<f64>, w: &Weights) -> f64 {
    w.norm(&(a - b)).min(w.norm(&(a + b)))
}

/// First principal loading of a raw matrix under a metric.
fn first_pc_loading(x: &DMatrix<f64>, metric: &Metric, w: &Weights) -> Result<DVector<f64>> {
    let g = symmetrize(&w.cross(x, x));
    Ok(max_gen_eig(&g, metric, 1)?.remove(0).vector)
}

/// Evaluates the constrained criterion and its pieces in loading space.
struct LoadingForms {
    /// M·(XᵀPX)·M, M·(XᵀAX)·M, M·(XᵀBX)·M.
    sp: DMatrix<f64>,
    sa: DMatrix<f64>,
    sb: DMatrix<f64>,
}

impl LoadingForms {
    fn quads(&self, u: &DVector<f64>) -> (f64, f64, f64) {
        (
            u.dot(&(&self.sp * u)),
            u.dot(&(&self.sa * u)),
            u.dot(&(&self.sb * u)),
        )
    }

    /// C4(X·M·u) for u on the metric sphere.
    fn value(&self, u: &DVector<f64>) -> f64 {
        let (p, a, b) = self.quads(u);
        p * a / b
    }

    /// Euclidean gradient of the criterion at u.
    fn gradient(&self, u: &DVector<f64>) -> DVector<f64> {
        let (p, a, b) = self.quads(u);
        let gp = 2.0 * (&self.sp * u);
        let ga = 2.0 * (&self.sa * u);
        let gb = 2.0 * (&self.sb * u);
        (a / b) * gp + (p / b) * ga - (p * a / (b * b)) * gb
    }
}

fn normalize_m(metric: &Metric, u: &DVector<f64>) -> DVector<f64> {
    u / metric.sq_norm(u).max(f64::MIN_POSITIVE).sqrt()
}

/// Exact 1-D maximization of the criterion over the metric-sphere circle
/// spanned by two M-orthonormalized directions: coarse scan plus golden
/// refinement. Returns the best loading and its value.
fn plane_search(
    forms: &LoadingForms,
    metric: &Metric,
    e1: &DVector<f64>,
    e2: &DVector<f64>,
) -> (DVector<f64>, f64) {
    let at = |theta: f64| -> DVector<f64> { theta.cos() * e1 + theta.sin() * e2 };
    let mut best_theta = 0.0;
    let mut best_val = f64::NEG_INFINITY;
    let steps = 720;
    for i in 0..steps {
        let theta = std::f64::consts::PI * (i as f64 / steps as f64 - 0.5);
        let val = forms.value(&at(theta));
        if val > best_val {
            best_val = val;
            best_theta = theta;
        }
    }
    let span = std::f64::consts::PI / steps as f64;
    let (mut lo, mut hi) = (best_theta - span, best_theta + span);
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let mut t1 = hi - phi * (hi - lo);
    let mut t2 = lo + phi * (hi - lo);
    let mut v1 = forms.value(&at(t1));
    let mut v2 = forms.value(&at(t2));
    for _ in 0..60 {
        if v1 < v2 {
            lo = t1;
            t1 = t2;
            v1 = v2;
            t2 = lo + phi * (hi - lo);
            v2 = forms.value(&at(t2));
        } else {
            hi = t2;
            t2 = t1;
            v2 = v1;
            t1 = hi - phi * (hi - lo);
            v1 = forms.value(&at(t1));
        }
    }
    let theta = 0.5 * (lo + hi);
    let u = normalize_m(metric, &at(theta));
    let val = forms.value(&u);
    if val > best_val {
        (u, val)
    } else {
        (normalize_m(metric, &at(best_theta)), best_val)
    }
}

/// Fixed-point extractor for one conditioned component.
///
/// Maximizes the conditioned criterion over F = X·M·u, u'Mu = 1, starting from
/// the loading `u0`. Each iteration evaluates β and γ at the current iterate
/// and takes the top generalized eigenpair of
/// (γ·XᵀAX + β·XᵀPX − γβ·XᵀBX)·M·u = λ·u — the fixed-point step — whenever it
/// does not decrease the criterion. When it would (the iteration can cycle on
/// unfavourable instances), the step is replaced by an exact maximization over
/// the metric-sphere plane spanned by the iterate and the candidate, and
/// failing that by a projected-gradient ascent step; a vanishing tangent
/// gradient is a convergence exit in its own right. The criterion trace is
/// therefore nondecreasing, every entry being the constrained value C4(X·M·u).
///
/// Stops when consecutive standardized scores differ by less than `inner_tol`
/// in P-norm. On hitting `max_inner` the best iterate is returned with
/// `converged = false`.
pub fn a0(
    ctx: &CriterionContext,
    x: &DMatrix<f64>,
    metric: &Metric,
    u0: &DVector<f64>,
    group: &str,
    rank: usize,
    opts: &ConvergenceOptions,
) -> Result<InnerFit> {
    if opts.max_inner == 0 {
        return Err(Error::InvalidModel("max_inner must be at least 1".into()));
    }
    let w = ctx.weights().clone();
    let g_p = symmetrize(&w.cross(x, x));
    let g_b = ctx.gram_b(x);
    let g_a = ctx.gram_a(x);
    let m = metric.matrix();
    let forms = LoadingForms {
        sp: symmetrize(&(m * &g_p * m)),
        sa: symmetrize(&(m * &g_a * m)),
        sb: symmetrize(&(m * &g_b * m)),
    };

    let score_scale = x.amax().max(f64::MIN_POSITIVE);
    let feasible = |u: &DVector<f64>| -> Result<()> {
        let (p, _, b) = forms.quads(u);
        if p.sqrt() <= 1e-12 * score_scale || b <= 1e-14 * p.max(f64::MIN_POSITIVE) {
            return Err(degenerate(group, rank));
        }
        Ok(())
    };

    if metric.sq_norm(u0) <= 0.0 {
        return Err(degenerate(group, rank));
    }
    let mut u = normalize_m(metric, u0);
    feasible(&u)?;
    let mut crit = forms.value(&u);
    let mut f_unit = w.unit(&(x * metric.apply(&u)));
    let mut trace = vec![crit];

    let mut best: (f64, DVector<f64>) = (crit, u.clone());
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..opts.max_inner {
        iterations += 1;
        let (q_p, q_a, q_b) = forms.quads(&u);
        let beta = q_a / q_b;
        let gamma = q_p / q_b;
        let c_mat = symmetrize(&(gamma * &g_a + beta * &g_p - gamma * beta * &g_b));
        let cand = max_gen_eig(&c_mat, metric, 1)?.remove(0).vector;
        feasible(&cand)?;
        let cand_val = forms.value(&cand);

        let (u_new, crit_new) = if cand_val >= crit {
            (cand, cand_val)
        } else {
            // Safeguard 1: exact search of the {u, cand} plane on the sphere.
            let mut cand_orth = &cand - metric.inner(&u, &cand) * &u;
            let plane = if metric.sq_norm(&cand_orth) > 1e-24 {
                cand_orth = normalize_m(metric, &cand_orth);
                let (u_p, v_p) = plane_search(&forms, metric, &u, &cand_orth);
                if v_p > crit {
                    Some((u_p, v_p))
                } else {
                    None
                }
            } else {
                None
            };
            match plane {
                Some(step) => step,
                None => {
                    // Safeguard 2: projected-gradient ascent with backtracking.
                    let grad = forms.gradient(&u);
                    let minv_grad = {
                        let l = metric.chol_l();
                        let tmp = l
                            .solve_lower_triangular(&grad)
                            .expect("Cholesky factor is nonsingular");
                        l.transpose()
                            .solve_upper_triangular(&tmp)
                            .expect("Cholesky factor is nonsingular")
                    };
                    let h = &minv_grad - u.dot(&grad) * &u;
                    let slope = grad.dot(&h);
                    let scale = crit.abs().max(f64::MIN_POSITIVE);
                    if slope <= 1e-13 * scale {
                        converged = true;
                        break;
                    }
                    let h_norm = metric.sq_norm(&h).sqrt();
                    let mut t = 1.0 / h_norm.max(f64::MIN_POSITIVE);
                    let mut accepted = None;
                    for _ in 0..60 {
                        let u_try = normalize_m(metric, &(&u + t * &h));
                        let v_try = forms.value(&u_try);
                        if v_try >= crit + 1e-4 * t * slope {
                            accepted = Some((u_try, v_try));
                            break;
                        }
                        t *= 0.5;
                    }
                    match accepted {
                        Some(step) => step,
                        None => {
                            // No ascent representable in floating point.
                            converged = true;
                            break;
                        }
                    }
                }
            }
        };

        let mut u_new = u_new;
        let mut f_new_unit = w.unit(&(x * metric.apply(&u_new)));
        if w.dot(&f_new_unit, &f_unit) < 0.0 {
            f_new_unit.neg_mut();
            u_new.neg_mut();
        }
        let delta = w.norm(&(&f_new_unit - &f_unit));
        u = u_new;
        crit = crit_new;
        trace.push(crit);
        if crit > best.0 {
            best = (crit, u.clone());
        }
        f_unit = f_new_unit;
        if delta < opts.inner_tol {
            converged = true;
            break;
        }
    }

    // At convergence the current iterate is the fixed point; otherwise fall
    // back to the best iterate seen so the caller gets an inspectable result.
    let (crit, u) = if converged { (crit, u) } else { best };
    let score = x * metric.apply(&u);
    Ok(InnerFit {
        component: Component {
            score,
            loading: u,
            group: group.to_string(),
            rank,
            eigenvalue: crit,
        },
        converged,
        iterations,
        trace,
    })
}

/// The dependent side handed to the rank-1 drivers.
enum DependentBlock<'a> {
    Single(&'a DVector<f64>),
    Multi(&'a GroupSpec),
}

impl DependentBlock<'_> {
    fn context(&self, z: &DMatrix<f64>, w: &Weights) -> Result<CriterionContext> {
        match self {
            DependentBlock::Single(y) => CriterionContext::univariate(y, z, w),
            DependentBlock::Multi(g) => CriterionContext::build(&g.data.x, &g.metric, z, w),
        }
    }

    fn criterion(&self, scores: &[DVector<f64>], w: &Weights) -> Result<f64> {
        match self {
            DependentBlock::Single(y) => c4(y, scores, w),
            DependentBlock::Multi(g) => c5(&g.data.x, g.metric.matrix(), scores, w),
        }
    }
}

/// Resolves the starting loading for group `r` under the configured rule.
///
/// `Given` supplies score vectors; the loading is recovered by least squares
/// on the group's feasible manifold.
fn initial_loading(group: &GroupSpec, r: usize, init: &InitRule) -> Result<DVector<f64>> {
    match init {
        InitRule::FirstPc => {
            let pca = triplet_pca(&group.data, &group.metric, 1)?;
            Ok(pca.components[0].loading.clone())
        }
        InitRule::Column(j) => {
            if *j >= group.n_vars() {
                return Err(Error::InvalidModel(format!(
                    "init column {j} out of range for group `{}`",
                    group.name
                )));
            }
            let mut u = DVector::zeros(group.n_vars());
            u[*j] = 1.0;
            Ok(u)
        }
        InitRule::Given(vecs) => {
            let f = vecs.get(r).ok_or_else(|| {
                Error::InvalidModel(format!("no init vector for group index {r}"))
            })?;
            score_to_loading(&group.data.x, &group.metric, f, group.weights())
        }
    }
}

/// Least-squares loading for a target score: solve M·XᵀPX·M·u = M·XᵀP·f.
fn score_to_loading(
    x: &DMatrix<f64>,
    metric: &Metric,
    f: &DVector<f64>,
    w: &Weights,
) -> Result<DVector<f64>> {
    let g = symmetrize(&w.cross(x, x));
    let m = metric.matrix();
    let lhs = symmetrize(&(m * &g * m));
    let pf = DVector::from_fn(f.len(), |i, _| w.as_vector()[i] * f[i]);
    let rhs = m * x.tr_mul(&pf);
    let inv = crate::linalg::invert_spd(&lhs)?;
    Ok(inv * rhs)
}

/// Shared cyclic driver for the rank-1 algorithms.
fn rank1_cycle(
    dep: &DependentBlock,
    predictors: &[GroupSpec],
    opts: &ConvergenceOptions,
) -> Result<ModelComponents> {
    if predictors.is_empty() {
        return Err(Error::InvalidModel("at least one predictor group".into()));
    }
    if opts.max_outer == 0 {
        return Err(Error::InvalidModel("max_outer must be at least 1".into()));
    }
    let w = predictors[0].weights().clone();
    let r_count = predictors.len();
    let mut loadings: Vec<DVector<f64>> = Vec::with_capacity(r_count);
    let mut scores: Vec<DVector<f64>> = Vec::with_capacity(r_count);
    for (r, g) in predictors.iter().enumerate() {
        let u = initial_loading(g, r, &opts.init)?;
        scores.push(&g.data.x * g.metric.apply(&u));
        loadings.push(u);
    }
    let mut units: Vec<DVector<f64>> = scores.iter().map(|f| w.unit(f)).collect();
    let mut comps: Vec<Option<Component>> = vec![None; r_count];
    let mut inner_runs = Vec::new();
    let mut trace = Vec::new();
    let mut deltas = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for outer in 1..=opts.max_outer {
        iterations = outer;
        let prev_units = units.clone();
        for r in 0..r_count {
            let others: Vec<DVector<f64>> = (0..r_count)
                .filter(|&s| s != r)
                .map(|s| scores[s].clone())
                .collect();
            let z = stack_scores(&others, w.len());
            let ctx = dep.context(&z, &w)?;
            let inner = a0(
                &ctx,
                &predictors[r].data.x,
                &predictors[r].metric,
                &loadings[r],
                &predictors[r].name,
                1,
                opts,
            )?;
            inner_runs.push(InnerRunStat {
                group: predictors[r].name.clone(),
                rank: 1,
                outer,
                iterations: inner.iterations,
                converged: inner.converged,
                monotone: trace_is_monotone(&inner.trace),
            });
            scores[r] = inner.component.score.clone();
            loadings[r] = inner.component.loading.clone();
            units[r] = w.unit(&scores[r]);
            comps[r] = Some(inner.component);
        }
        let crit = dep.criterion(&scores, &w)?;
        trace.push((outer, crit));
        let max_delta = units
            .iter()
            .zip(&prev_units)
            .map(|(a, b)| aligned_delta(a, b, &w))
            .fold(0.0f64, f64::max);
        deltas.push((outer, max_delta));
        if max_delta < opts.component_tol {
            converged = true;
            break;
        }
    }

    let groups = predictors
        .iter()
        .zip(comps)
        .map(|(g, c)| GroupComponents {
            group: g.name.clone(),
            components: vec![c.expect("every group solved at least once")],
        })
        .collect();
    Ok(ModelComponents {
        groups,
        dependent: Vec::new(),
        criterion_trace: trace,
        delta_trace: deltas,
        converged,
        iterations,
        inner_runs,
    })
}

/// One component per predictor group against a single dependent variable.
///
/// Cyclic sweeps over the groups, each solving its conditioned program with
/// the other groups' current components fixed; the summed covariance
/// criterion is nondecreasing across sweeps.
pub fn a1(
    y: &DVector<f64>,
    predictors: &[GroupSpec],
    opts: &ConvergenceOptions,
) -> Result<ModelComponents> {
    rank1_cycle(&DependentBlock::Single(y), predictors, opts)
}

/// One component per predictor group against a dependent block (Y, N).
pub fn a2(
    y_group: &GroupSpec,
    predictors: &[GroupSpec],
    opts: &ConvergenceOptions,
) -> Result<ModelComponents> {
    rank1_cycle(&DependentBlock::Multi(y_group), predictors, opts)
}

/// Locally nested multi-rank extraction.
///
/// Component (r, j) is extracted from the residuals of X_r on its own
/// lower-rank components (which enforces within-group P-orthogonality),
/// conditioning the criterion on the full current component sets of all other
/// groups. Initial values are each group's leading principal components; the
/// outer loop stops when every standardized score is stable.
pub fn a3(model: &ThematicModel) -> Result<ModelComponents> {
    a3_with_init(model, None)
}

pub(crate) fn a3_with_init(
    model: &ThematicModel,
    warm: Option<&[Vec<DVector<f64>>]>,
) -> Result<ModelComponents> {
    dependent_block_nested(
        model,
        &NestedDependent::Fixed(&model.dependent),
        warm,
        &model.options,
    )
}

/// What the nested driver regresses on: the model's dependent group, or a
/// moving set of dependent scores (for the co-determination variant).
enum NestedDependent<'a> {
    Fixed(&'a GroupSpec),
    Scores(&'a [DVector<f64>]),
}

fn nested_context(
    dep: &NestedDependent,
    z: &DMatrix<f64>,
    w: &Weights,
) -> Result<CriterionContext> {
    match dep {
        NestedDependent::Fixed(g) => CriterionContext::build(&g.data.x, &g.metric, z, w),
        NestedDependent::Scores(scores) => {
            let g_mat = stack_scores(scores, w.len());
            CriterionContext::build(&g_mat, &Metric::identity(scores.len()), z, w)
        }
    }
}

/// One full nested sweep state: per group, per rank scores and loadings.
struct NestedState {
    scores: Vec<Vec<DVector<f64>>>,
    loadings: Vec<Vec<DVector<f64>>>,
    units: Vec<Vec<DVector<f64>>>,
    comps: Vec<Vec<Option<Component>>>,
}

impl NestedState {
    fn flat_scores(&self) -> Vec<DVector<f64>> {
        self.scores.iter().flatten().cloned().collect()
    }
}

/// Builds the initial nested state: warm loadings where provided, each
/// group's leading principal loadings otherwise. Scores are materialized
/// sequentially against the deflated group matrices.
fn nested_init(
    model: &ThematicModel,
    warm: Option<&[Vec<DVector<f64>>]>,
) -> Result<NestedState> {
    let w = model.weights().clone();
    let mut scores = Vec::with_capacity(model.n_groups());
    let mut loadings = Vec::with_capacity(model.n_groups());
    for (r, g) in model.predictors.iter().enumerate() {
        let j_r = model.counts[r];
        let mut group_scores: Vec<DVector<f64>> = Vec::with_capacity(j_r);
        let mut group_loadings: Vec<DVector<f64>> = Vec::with_capacity(j_r);
        let warm_group = warm.and_then(|ws| ws.get(r));
        let pca = if warm_group.map_or(0, |v| v.len()) < j_r {
            Some(triplet_pca(&g.data, &g.metric, j_r)?)
        } else {
            None
        };
        for j in 0..j_r {
            let u = if let Some(u) = warm_group.and_then(|v| v.get(j)) {
                u.clone()
            } else {
                pca.as_ref().expect("pca computed when needed").components[j]
                    .loading
                    .clone()
            };
            let x_defl = if group_scores.is_empty() {
                g.data.x.clone()
            } else {
                let basis = ProjectionBasis::from_vectors(
                    &group_scores.iter().collect::<Vec<_>>(),
                    w.len(),
                    &w,
                )?;
                basis.residual_mat(&g.data.x)
            };
            group_scores.push(&x_defl * g.metric.apply(&u));
            group_loadings.push(u);
        }
        scores.push(group_scores);
        loadings.push(group_loadings);
    }
    let units = scores
        .iter()
        .map(|gs| gs.iter().map(|f| w.unit(f)).collect())
        .collect();
    let comps = model.counts.iter().map(|&j| vec![None; j]).collect();
    Ok(NestedState {
        scores,
        loadings,
        units,
        comps,
    })
}

fn dependent_block_nested(
    model: &ThematicModel,
    dep: &NestedDependent,
    warm: Option<&[Vec<DVector<f64>>]>,
    opts: &ConvergenceOptions,
) -> Result<ModelComponents> {
    if opts.max_outer == 0 {
        return Err(Error::InvalidModel("max_outer must be at least 1".into()));
    }
    let w = model.weights().clone();
    let r_count = model.n_groups();
    let mut state = nested_init(model, warm)?;
    let mut inner_runs = Vec::new();
    let mut trace = Vec::new();
    let mut deltas = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for outer in 1..=opts.max_outer {
        iterations = outer;
        let prev_units: Vec<Vec<DVector<f64>>> = state.units.clone();
        for r in 0..r_count {
            for j in 0..model.counts[r] {
                // Residualize the group matrix on its own lower-rank components.
                let own_lower: Vec<&DVector<f64>> = state.scores[r][..j].iter().collect();
                let x_defl = if own_lower.is_empty() {
                    model.predictors[r].data.x.clone()
                } else {
                    let basis = ProjectionBasis::from_vectors(&own_lower, w.len(), &w)?;
                    basis.residual_mat(&model.predictors[r].data.x)
                };
                // Condition on the other groups' full current component sets.
                let mut z_cols: Vec<DVector<f64>> = Vec::new();
                for (s, group_scores) in state.scores.iter().enumerate() {
                    if s != r {
                        z_cols.extend(group_scores.iter().cloned());
                    }
                }
                let z = stack_scores(&z_cols, w.len());
                let ctx = nested_context(dep, &z, &w)?;
                let mut u0 = state.loadings[r][j].clone();
                let f0 = &x_defl * model.predictors[r].metric.apply(&u0);
                if ctx.quad_b(&f0) <= 1e-12 * w.sq_norm(&f0).max(f64::MIN_POSITIVE) {
                    // The warm start collapsed into the conditioning span;
                    // restart from the deflated matrix's leading component.
                    u0 = first_pc_loading(&x_defl, &model.predictors[r].metric, &w)?;
                }
                let inner = a0(
                    &ctx,
                    &x_defl,
                    &model.predictors[r].metric,
                    &u0,
                    &model.predictors[r].name,
                    j + 1,
                    opts,
                )?;
                inner_runs.push(InnerRunStat {
                    group: model.predictors[r].name.clone(),
                    rank: j + 1,
                    outer,
                    iterations: inner.iterations,
                    converged: inner.converged,
                    monotone: trace_is_monotone(&inner.trace),
                });
                state.scores[r][j] = inner.component.score.clone();
                state.loadings[r][j] = inner.component.loading.clone();
                state.units[r][j] = w.unit(&state.scores[r][j]);
                state.comps[r][j] = Some(inner.component);
            }
        }
        let flat = state.flat_scores();
        let crit = match dep {
            NestedDependent::Fixed(g) => c5(&g.data.x, g.metric.matrix(), &flat, &w)?,
            NestedDependent::Scores(gs) => {
                let g_mat = stack_scores(gs, w.len());
                let id = DMatrix::identity(gs.len(), gs.len());
                c5(&g_mat, &id, &flat, &w)?
            }
        };
        trace.push((outer, crit));
        let mut max_delta = 0.0f64;
        for (gu, pu) in state.units.iter().zip(&prev_units) {
            for (a, b) in gu.iter().zip(pu) {
                max_delta = max_delta.max(aligned_delta(a, b, &w));
            }
        }
        deltas.push((outer, max_delta));
        if max_delta < opts.component_tol {
            converged = true;
            break;
        }
    }

    let groups = model
        .predictors
        .iter()
        .zip(state.comps)
        .map(|(g, cs)| GroupComponents {
            group: g.name.clone(),
            components: cs
                .into_iter()
                .map(|c| c.expect("every requested rank solved"))
                .collect(),
        })
        .collect();
    Ok(ModelComponents {
        groups,
        dependent: Vec::new(),
        criterion_trace: trace,
        delta_trace: deltas,
        converged,
        iterations,
        inner_runs,
    })
}

/// Criterion quotient between the full model and the sub-model dropping group
/// r's last retained component.
///
/// Equals ‖F_r^{j_r}‖²_P · Σ_k n_k‖Π_{⟨M⟩}y^k‖²_P / Σ_k n_k‖Π_{⟨SM_r⟩}y^k‖²_P,
/// which is exactly C5(full)/C5(sub). Infinite when the sub-model explains
/// nothing.
pub fn criterion_ratio(
    mc: &ModelComponents,
    y_group: &GroupSpec,
    r: usize,
) -> Result<f64> {
    let w = y_group.weights();
    let group = mc
        .groups
        .get(r)
        .ok_or_else(|| Error::InvalidModel(format!("no predictor group at index {r}")))?;
    let last = group
        .components
        .last()
        .ok_or_else(|| Error::InvalidModel(format!("group `{}` has no components", group.group)))?;
    let full = mc.all_scores();
    let mut sub: Vec<DVector<f64>> = Vec::with_capacity(full.len() - 1);
    for (s, g) in mc.groups.iter().enumerate() {
        let keep = if s == r {
            g.components.len() - 1
        } else {
            g.components.len()
        };
        sub.extend(g.components[..keep].iter().map(|c| c.score.clone()));
    }
    let n_mat = y_group.metric.matrix();
    let num = explained_trace(&y_group.data.x, n_mat, &full, w)?;
    let den = explained_trace(&y_group.data.x, n_mat, &sub, w)?;
    let strength = w.sq_norm(&last.score);
    if den <= 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(strength * num / den)
}

/// Which group-comparable weight normalizes component strengths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OmegaKind {
    /// ω_r = 1 / tr(M_r·X_rᵀPX_r), the group's total inertia.
    InvInertia,
    /// ω_r = 1 / λ₁(X_r, M_r, P), the group's leading eigenvalue.
    InvLambda1,
}

/// When backward selection stops besides running out of removable components.
#[derive(Debug, Clone, Default)]
pub struct StopRule {
    /// Per-group minimum retained counts; selection never goes below them.
    pub target_counts: Option<Vec<usize>>,
    /// Stop once the refit criterion falls below this value.
    pub min_criterion: Option<f64>,
}

/// One removal step of the backward procedure.
#[derive(Debug, Clone)]
pub struct SelectionStep {
    pub step: usize,
    pub removed: SubModelId,
    /// ω_r·‖F_r^{j_r}‖²_P·ratio per group; `None` for groups not removable at
    /// this step.
    pub scores: Vec<Option<f64>>,
    /// Criterion of the refit model after the removal.
    pub criterion_after: f64,
}

/// Full backward-selection record.
#[derive(Debug, Clone)]
pub struct SelectionOutcome {
    pub steps: Vec<SelectionStep>,
    pub final_counts: Vec<usize>,
    pub final_fit: ModelComponents,
}

/// ω_r weights over the original group triplets.
pub(crate) fn omega_weights(predictors: &[GroupSpec], kind: OmegaKind) -> Result<Vec<f64>> {
    predictors
        .iter()
        .map(|g| {
            let gm = gram(&g.data);
            let value = match kind {
                OmegaKind::InvInertia => (g.metric.matrix() * &gm).trace(),
                OmegaKind::InvLambda1 => max_gen_eig(&gm, &g.metric, 1)?.remove(0).value,
            };
            if value <= 0.0 {
                return Err(Error::InvalidModel(format!(
                    "group `{}` carries no inertia",
                    g.name
                )));
            }
            Ok(1.0 / value)
        })
        .collect()
}

/// Removes the weakest last-rank component one step at a time, refitting after
/// each removal.
///
/// Each step evaluates ω_r·‖F_r^{j_r}‖²_P·C5(M)/C5(SM(r, j_r−1)) for every
/// removable group, removes the arg-min (lowest index on ties), and re-runs
/// the nested fit warm-started from the surviving components.
pub fn backward_select(
    model: &ThematicModel,
    mc: &ModelComponents,
    omega: OmegaKind,
    stop: &StopRule,
) -> Result<SelectionOutcome> {
    let omegas = omega_weights(&model.predictors, omega)?;
    let mins = stop
        .target_counts
        .clone()
        .unwrap_or_else(|| vec![0; model.n_groups()]);
    if mins.len() != model.n_groups() {
        return Err(Error::InvalidModel(format!(
            "{} target counts for {} groups",
            mins.len(),
            model.n_groups()
        )));
    }
    let mut counts = mc.counts();
    let mut current = mc.clone();
    let mut steps = Vec::new();
    let mut step_no = 0;

    loop {
        let candidates: Vec<usize> = (0..model.n_groups())
            .filter(|&r| counts[r] > mins[r])
            .collect();
        if candidates.is_empty() {
            break;
        }
        let mut scores: Vec<Option<f64>> = vec![None; model.n_groups()];
        for &r in &candidates {
            let ratio = criterion_ratio(&current, &model.dependent, r)?;
            scores[r] = Some(omegas[r] * ratio);
        }
        // Strict comparison keeps the lowest index on ties.
        let mut s = candidates[0];
        for &r in &candidates[1..] {
            if scores[r].unwrap() < scores[s].unwrap() {
                s = r;
            }
        }
        counts[s] -= 1;
        step_no += 1;

        let warm: Vec<Vec<DVector<f64>>> = current
            .groups
            .iter()
            .enumerate()
            .map(|(r, g)| {
                g.components[..counts[r].min(g.components.len())]
                    .iter()
                    .map(|c| c.loading.clone())
                    .collect()
            })
            .collect();
        let sub_model = model.with_counts(counts.clone())?;
        current = a3_with_init(&sub_model, Some(&warm))?;
        let criterion_after = current
            .criterion_trace
            .last()
            .map(|&(_, c)| c)
            .unwrap_or(0.0);
        steps.push(SelectionStep {
            step: step_no,
            removed: SubModelId {
                group: s,
                retained: counts[s],
            },
            scores,
            criterion_after,
        });
        if let Some(threshold) = stop.min_criterion {
            if criterion_after < threshold {
                break;
            }
        }
    }

    Ok(SelectionOutcome {
        steps,
        final_counts: counts,
        final_fit: current,
    })
}

/// Dependent components on the span of all retained predictor components:
/// redundancy extraction with Y-deflation.
pub fn dependent_components(
    mc: &ModelComponents,
    y_group: &GroupSpec,
    l: usize,
) -> Result<Vec<Component>> {
    let scores = mc.all_scores();
    let basis = stack_scores(&scores, y_group.n());
    mra_components(&basis, y_group, l)
}

/// Co-determination with one component per group: alternate the predictor
/// sweeps (against the current dependent component G) with the rank-1
/// redundancy update of G on the predictor span. The product criterion is
/// nondecreasing across full cycles.
pub fn b1(
    y_group: &GroupSpec,
    predictors: &[GroupSpec],
    opts: &ConvergenceOptions,
) -> Result<ModelComponents> {
    if predictors.is_empty() {
        return Err(Error::InvalidModel("at least one predictor group".into()));
    }
    if opts.max_outer == 0 {
        return Err(Error::InvalidModel("max_outer must be at least 1".into()));
    }
    let w = y_group.weights().clone();
    let r_count = predictors.len();
    let mut loadings: Vec<DVector<f64>> = Vec::with_capacity(r_count);
    let mut scores: Vec<DVector<f64>> = Vec::with_capacity(r_count);
    for (r, g) in predictors.iter().enumerate() {
        let u = initial_loading(g, r, &opts.init)?;
        scores.push(&g.data.x * g.metric.apply(&u));
        loadings.push(u);
    }
    let mut units: Vec<DVector<f64>> = scores.iter().map(|f| w.unit(f)).collect();
    let mut g_score = match &opts.init {
        InitRule::Column(j) if *j < y_group.n_vars() => {
            let col = y_group.data.column(*j);
            w.unit(&col)
        }
        _ => {
            let pca = triplet_pca(&y_group.data, &y_group.metric, 1)?;
            pca.components[0].score.clone()
        }
    };
    let mut g_unit = w.unit(&g_score);
    let mut g_comp: Option<Component> = None;
    let mut comps: Vec<Option<Component>> = vec![None; r_count];
    let mut inner_runs = Vec::new();
    let mut trace = Vec::new();
    let mut deltas = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for outer in 1..=opts.max_outer {
        iterations = outer;
        let prev_units = units.clone();
        let prev_g_unit = g_unit.clone();
        for r in 0..r_count {
            let others: Vec<DVector<f64>> = (0..r_count)
                .filter(|&s| s != r)
                .map(|s| scores[s].clone())
                .collect();
            let z = stack_scores(&others, w.len());
            let ctx = CriterionContext::univariate(&g_score, &z, &w)?;
            let inner = a0(
                &ctx,
                &predictors[r].data.x,
                &predictors[r].metric,
                &loadings[r],
                &predictors[r].name,
                1,
                opts,
            )?;
            inner_runs.push(InnerRunStat {
                group: predictors[r].name.clone(),
                rank: 1,
                outer,
                iterations: inner.iterations,
                converged: inner.converged,
                monotone: trace_is_monotone(&inner.trace),
            });
            scores[r] = inner.component.score.clone();
            loadings[r] = inner.component.loading.clone();
            units[r] = w.unit(&scores[r]);
            comps[r] = Some(inner.component);
        }
        // Rank-1 redundancy update of the dependent component on ⟨F⟩.
        let basis = ProjectionBasis::from_vectors(&scores.iter().collect::<Vec<_>>(), w.len(), &w)?;
        let y_hat = basis.fitted_mat(&y_group.data.x);
        let q = symmetrize(&w.cross(&y_hat, &y_hat));
        let pair = max_gen_eig(&q, &y_group.metric, 1)?.remove(0);
        g_score = &y_group.data.x * y_group.metric.apply(&pair.vector);
        g_unit = w.unit(&g_score);
        g_comp = Some(Component {
            score: g_score.clone(),
            loading: pair.vector,
            group: y_group.name.clone(),
            rank: 1,
            eigenvalue: pair.value,
        });
        let crit = c6(&g_score, &scores, &w)?;
        trace.push((outer, crit));
        let mut max_delta = aligned_delta(&g_unit, &prev_g_unit, &w);
        for (a, b) in units.iter().zip(&prev_units) {
            max_delta = max_delta.max(aligned_delta(a, b, &w));
        }
        deltas.push((outer, max_delta));
        if max_delta < opts.component_tol {
            converged = true;
            break;
        }
    }

    let groups = predictors
        .iter()
        .zip(comps)
        .map(|(g, c)| GroupComponents {
            group: g.name.clone(),
            components: vec![c.expect("every group solved at least once")],
        })
        .collect();
    Ok(ModelComponents {
        groups,
        dependent: vec![g_comp.expect("dependent component extracted")],
        criterion_trace: trace,
        delta_trace: deltas,
        converged,
        iterations,
        inner_runs,
    })
}

/// Multi-rank co-determination.
///
/// Starts from the nested fit and its dependent components, then alternates:
/// every F_r^j is re-extracted against the current dependent scores (equal
/// identity weights over the L scores), and the G's are refreshed by
/// redundancy extraction with Y-deflation on the new predictor span. The
/// recorded criterion trace is the nested criterion against the original
/// dependent block, so successive entries stay comparable.
pub fn b2(model: &ThematicModel) -> Result<ModelComponents> {
    let l = model.dependent_count;
    if l == 0 {
        return Err(Error::InvalidModel(
            "co-determination needs at least one dependent component".into(),
        ));
    }
    let w = model.weights().clone();
    let opts = &model.options;
    let init_fit = a3(model)?;
    let mut g_comps = dependent_components(&init_fit, &model.dependent, l)?;
    let warm: Vec<Vec<DVector<f64>>> = init_fit
        .groups
        .iter()
        .map(|g| g.components.iter().map(|c| c.loading.clone()).collect())
        .collect();
    let mut state = nested_init(model, Some(&warm))?;
    let mut inner_runs = init_fit.inner_runs;
    let mut trace = Vec::new();
    let mut deltas = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for outer in 1..=opts.max_outer {
        iterations = outer;
        let prev_units = state.units.clone();
        let prev_g_units: Vec<DVector<f64>> =
            g_comps.iter().map(|c| w.unit(&c.score)).collect();
        let g_scores: Vec<DVector<f64>> = g_comps.iter().map(|c| c.score.clone()).collect();
        for r in 0..model.n_groups() {
            for j in 0..model.counts[r] {
                let own_lower: Vec<&DVector<f64>> = state.scores[r][..j].iter().collect();
                let x_defl = if own_lower.is_empty() {
                    model.predictors[r].data.x.clone()
                } else {
                    let basis = ProjectionBasis::from_vectors(&own_lower, w.len(), &w)?;
                    basis.residual_mat(&model.predictors[r].data.x)
                };
                let mut z_cols: Vec<DVector<f64>> = Vec::new();
                for (s, group_scores) in state.scores.iter().enumerate() {
                    if s != r {
                        z_cols.extend(group_scores.iter().cloned());
                    }
                }
                let z = stack_scores(&z_cols, w.len());
                let ctx = nested_context(&NestedDependent::Scores(&g_scores), &z, &w)?;
                let mut u0 = state.loadings[r][j].clone();
                let f0 = &x_defl * model.predictors[r].metric.apply(&u0);
                if ctx.quad_b(&f0) <= 1e-12 * w.sq_norm(&f0).max(f64::MIN_POSITIVE) {
                    u0 = first_pc_loading(&x_defl, &model.predictors[r].metric, &w)?;
                }
                let inner = a0(
                    &ctx,
                    &x_defl,
                    &model.predictors[r].metric,
                    &u0,
                    &model.predictors[r].name,
                    j + 1,
                    opts,
                )?;
                inner_runs.push(InnerRunStat {
                    group: model.predictors[r].name.clone(),
                    rank: j + 1,
                    outer,
                    iterations: inner.iterations,
                    converged: inner.converged,
                    monotone: trace_is_monotone(&inner.trace),
                });
                state.scores[r][j] = inner.component.score.clone();
                state.loadings[r][j] = inner.component.loading.clone();
                state.units[r][j] = w.unit(&state.scores[r][j]);
                state.comps[r][j] = Some(inner.component);
            }
        }
        let flat = state.flat_scores();
        let f_basis = stack_scores(&flat, w.len());
        g_comps = mra_components(&f_basis, &model.dependent, l)?;
        let crit = c5(
            &model.dependent.data.x,
            model.dependent.metric.matrix(),
            &flat,
            &w,
        )?;
        trace.push((outer, crit));
        let mut max_delta = 0.0f64;
        for (gu, pu) in state.units.iter().zip(&prev_units) {
            for (a, b) in gu.iter().zip(pu) {
                max_delta = max_delta.max(aligned_delta(a, b, &w));
            }
        }
        for (c, prev) in g_comps.iter().zip(&prev_g_units) {
            max_delta = max_delta.max(aligned_delta(&w.unit(&c.score), prev, &w));
        }
        deltas.push((outer, max_delta));
        if max_delta < opts.component_tol {
            converged = true;
            break;
        }
    }

    let groups = model
        .predictors
        .iter()
        .zip(state.comps)
        .map(|(g, cs)| GroupComponents {
            group: g.name.clone(),
            components: cs
                .into_iter()
                .map(|c| c.expect("every requested rank solved"))
                .collect(),
        })
        .collect();
    Ok(ModelComponents {
        groups,
        dependent: g_comps,
        criterion_trace: trace,
        delta_trace: deltas,
        converged,
        iterations,
        inner_runs,
    })
}
