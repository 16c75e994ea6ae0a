//! Weighted-metric linear algebra.
//!
//! Everything here lives in the triplet world (X, M, P): a data matrix X whose
//! columns are variables, a symmetric positive definite column metric M, and a
//! diagonal observation weight matrix P = diag(p_i) with Σ p_i = 1. The variable
//! space R^n carries the P-scalar product ⟨x|y⟩_P = x'Py, so for centred columns
//! inner products are covariances.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative singular-value threshold below which a basis counts as rank deficient.
pub const SINGULARITY_TOL: f64 = 1e-12;

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (m + m.transpose())
}

pub(crate) fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Observation weights p_i > 0, normalized to sum 1, interpreted as P = diag(p_i).
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    p: DVector<f64>,
}

impl Weights {
    /// Builds weights from raw positive values; they are rescaled to sum 1.
    pub fn new(raw: Vec<f64>) -> Result<Self> {
        for (index, &value) in raw.iter().enumerate() {
            if !value.is_finite() || value <= 0.0 {
                return Err(Error::NonPositiveWeight { index, value });
            }
        }
        let mut p = DVector::from_vec(raw);
        let total = p.sum();
        p /= total;
        Ok(Self { p })
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            p: DVector::from_element(n, 1.0 / n as f64),
        }
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.len() == 0
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.p
    }

    /// ⟨a|b⟩_P = Σ p_i a_i b_i.
    pub fn dot(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.p.len() {
            acc += self.p[i] * a[i] * b[i];
        }
        acc
    }

    /// ‖a‖²_P.
    pub fn sq_norm(&self, a: &DVector<f64>) -> f64 {
        self.dot(a, a)
    }

    /// ‖a‖_P.
    pub fn norm(&self, a: &DVector<f64>) -> f64 {
        self.sq_norm(a).sqrt()
    }

    /// P-weighted mean Σ p_i a_i.
    pub fn mean(&self, a: &DVector<f64>) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.p.len() {
            acc += self.p[i] * a[i];
        }
        acc
    }

    /// P·M: row i scaled by p_i.
    pub fn scale_rows(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = m.clone();
        for (i, mut row) in out.row_iter_mut().enumerate() {
            row *= self.p[i];
        }
        out
    }

    /// AᵀPB.
    pub fn cross(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        a.transpose() * self.scale_rows(b)
    }

    /// x / ‖x‖_P. Callers guarantee x ≠ 0 and centred.
    pub fn unit(&self, x: &DVector<f64>) -> DVector<f64> {
        x / self.norm(x)
    }
}

/// How `standardize` treats column scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StandardizeMode {
    CenterOnly,
    CenterScale,
}

/// A centred (optionally standardized) observation matrix with its weights.
#[derive(Debug, Clone)]
pub struct WeightedDataset {
    pub x: DMatrix<f64>,
    pub weights: Weights,
    pub column_names: Vec<String>,
}

impl WeightedDataset {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_vars(&self) -> usize {
        self.x.ncols()
    }

    pub fn column(&self, j: usize) -> DVector<f64> {
        self.x.column(j).into_owned()
    }
}

/// Centers (and in `CenterScale` mode rescales to unit P-variance) every column.
pub fn standardize(
    raw: &DMatrix<f64>,
    names: Vec<String>,
    w: &Weights,
    mode: StandardizeMode,
) -> Result<WeightedDataset> {
    if raw.nrows() < 2 {
        return Err(Error::DimensionMismatch(format!(
            "need at least 2 observations, got {}",
            raw.nrows()
        )));
    }
    if raw.nrows() != w.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} rows but {} weights",
            raw.nrows(),
            w.len()
        )));
    }
    if names.len() != raw.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "{} columns but {} names",
            raw.ncols(),
            names.len()
        )));
    }
    let mut x = raw.clone();
    for (j, mut col) in x.column_iter_mut().enumerate() {
        let owned = col.clone_owned();
        let mean = w.mean(&owned);
        col.add_scalar_mut(-mean);
        if mode == StandardizeMode::CenterScale {
            let centred = col.clone_owned();
            let var = w.sq_norm(&centred);
            if var < 1e-14 {
                return Err(Error::ConstantColumn(names[j].clone()));
            }
            col /= var.sqrt();
        }
    }
    Ok(WeightedDataset {
        x,
        weights: w.clone(),
        column_names: names,
    })
}

/// XᵀPX of a dataset.
pub fn gram(ds: &WeightedDataset) -> DMatrix<f64> {
    symmetrize(&ds.weights.cross(&ds.x, &ds.x))
}

/// Which construction produced a metric matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    Identity,
    InverseGram,
    BlockInverse,
    Custom,
}

/// Symmetric positive definite column metric with its Cholesky factor M = L·Lᵀ.
#[derive(Debug, Clone)]
pub struct Metric {
    m: DMatrix<f64>,
    kind: MetricKind,
    chol: DMatrix<f64>,
}

impl Metric {
    pub fn new(m: DMatrix<f64>, kind: MetricKind) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "metric must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let asym = max_asymmetry(&m);
        if asym > 1e-12 * m.amax().max(f64::MIN_POSITIVE) {
            return Err(Error::NotSymmetric(asym));
        }
        let sym = symmetrize(&m);
        let chol = Cholesky::new(sym.clone())
            .ok_or(Error::NotPositiveDefinite)?
            .l();
        Ok(Self { m: sym, kind, chol })
    }

    pub fn identity(j: usize) -> Self {
        Self {
            m: DMatrix::identity(j, j),
            kind: MetricKind::Identity,
            chol: DMatrix::identity(j, j),
        }
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn kind(&self) -> MetricKind {
        self.kind
    }

    /// Lower triangular L with M = L·Lᵀ.
    pub fn chol_l(&self) -> &DMatrix<f64> {
        &self.chol
    }

    /// M·u.
    pub fn apply(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.m * u
    }

    /// u'Mu.
    pub fn sq_norm(&self, u: &DVector<f64>) -> f64 {
        u.dot(&(&self.m * u))
    }

    /// a'Mb.
    pub fn inner(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        a.dot(&(&self.m * b))
    }
}

/// Inverts a symmetric positive semi-definite matrix, refusing near-singular input.
pub(crate) fn invert_spd(g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let svd = g.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd
        .singular_values
        .iter()
        .fold(f64::INFINITY, |a, &b| a.min(b));
    if smax <= 0.0 || smin <= SINGULARITY_TOL * smax {
        return Err(Error::SingularBasis(smin / smax.max(f64::MIN_POSITIVE)));
    }
    let inv = svd
        .pseudo_inverse(0.0)
        .map_err(|_| Error::SingularBasis(0.0))?;
    Ok(symmetrize(&inv))
}

/// Builds a column metric from the dataset: identity, inverse-gram (treats
/// the group as its mere subspace), or block-inverse (neutralizes
/// within-subgroup correlation).
///
/// `blocks` partitions column indices and is required for `BlockInverse`;
/// every column must appear in exactly one block.
pub fn make_metric(
    kind: MetricKind,
    ds: &WeightedDataset,
    blocks: Option<&[Vec<usize>]>,
) -> Result<Metric> {
    let j = ds.n_vars();
    match kind {
        MetricKind::Identity => Ok(Metric::identity(j)),
        MetricKind::InverseGram => {
            let inv = invert_spd(&gram(ds))?;
            Metric::new(inv, MetricKind::InverseGram)
        }
        MetricKind::BlockInverse => {
            let blocks = blocks.ok_or_else(|| {
                Error::InvalidBlocks("block_inverse requires a column partition".into())
            })?;
            let mut seen = vec![false; j];
            for block in blocks {
                for &c in block {
                    if c >= j {
                        return Err(Error::InvalidBlocks(format!(
                            "column index {c} out of range ({j} columns)"
                        )));
                    }
                    if seen[c] {
                        return Err(Error::InvalidBlocks(format!(
                            "column index {c} appears in two blocks"
                        )));
                    }
                    seen[c] = true;
                }
            }
            if seen.iter().any(|s| !s) {
                return Err(Error::InvalidBlocks(
                    "partition must cover every column".into(),
                ));
            }
            let g = gram(ds);
            let mut m = DMatrix::zeros(j, j);
            for block in blocks {
                let sub = g.select_rows(block.iter()).select_columns(block.iter());
                let inv = invert_spd(&sub)?;
                for (bi, &ci) in block.iter().enumerate() {
                    for (bj, &cj) in block.iter().enumerate() {
                        m[(ci, cj)] = inv[(bi, bj)];
                    }
                }
            }
            Metric::new(m, MetricKind::BlockInverse)
        }
        MetricKind::Custom => Err(Error::InvalidBlocks(
            "custom metrics are built directly with Metric::new".into(),
        )),
    }
}

/// Result of a P-orthogonal projection: y = fitted + residual.
#[derive(Debug, Clone)]
pub struct Projection {
    pub fitted: DVector<f64>,
    pub residual: DVector<f64>,
}

/// P-orthogonal projector onto the span of a column basis Z.
///
/// Stores (ZᵀPZ)⁻¹ once so repeated projections are cheap. Construction fails
/// with `SingularBasis` when ZᵀPZ has a relative singular value below
/// [`SINGULARITY_TOL`]; there is no silent pseudo-inverse fallback.
#[derive(Debug, Clone)]
pub struct ProjectionBasis {
    z: DMatrix<f64>,
    pz: DMatrix<f64>,
    gram_inv: DMatrix<f64>,
}

impl ProjectionBasis {
    pub fn empty(n: usize) -> Self {
        Self {
            z: DMatrix::zeros(n, 0),
            pz: DMatrix::zeros(n, 0),
            gram_inv: DMatrix::zeros(0, 0),
        }
    }

    pub fn new(z: DMatrix<f64>, w: &Weights) -> Result<Self> {
        if z.ncols() == 0 {
            return Ok(Self::empty(z.nrows()));
        }
        if z.nrows() != w.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} rows but {} weights",
                z.nrows(),
                w.len()
            )));
        }
        let pz = w.scale_rows(&z);
        let g = symmetrize(&(z.transpose() * &pz));
        let gram_inv = invert_spd(&g)?;
        Ok(Self { z, pz, gram_inv })
    }

    /// Stacks a set of score vectors into a basis.
    pub fn from_vectors(vectors: &[&DVector<f64>], n: usize, w: &Weights) -> Result<Self> {
        if vectors.is_empty() {
            return Ok(Self::empty(n));
        }
        let mut z = DMatrix::zeros(n, vectors.len());
        for (j, v) in vectors.iter().enumerate() {
            z.set_column(j, v);
        }
        Self::new(z, w)
    }

    pub fn n_cols(&self) -> usize {
        self.z.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.z.ncols() == 0
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.z
    }

    /// (ZᵀPZ)⁻¹ZᵀPy, the regression coefficients of y on the basis.
    pub fn coefficients(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.gram_inv * self.pz.tr_mul(y)
    }

    pub fn fitted(&self, y: &DVector<f64>) -> DVector<f64> {
        if self.is_empty() {
            return DVector::zeros(y.len());
        }
        &self.z * self.coefficients(y)
    }

    pub fn residual(&self, y: &DVector<f64>) -> DVector<f64> {
        y - self.fitted(y)
    }

    pub fn project(&self, y: &DVector<f64>) -> Projection {
        let fitted = self.fitted(y);
        let residual = y - &fitted;
        Projection { fitted, residual }
    }

    pub fn fitted_mat(&self, ym: &DMatrix<f64>) -> DMatrix<f64> {
        if self.is_empty() {
            return DMatrix::zeros(ym.nrows(), ym.ncols());
        }
        &self.z * (&self.gram_inv * self.pz.tr_mul(ym))
    }

    pub fn residual_mat(&self, ym: &DMatrix<f64>) -> DMatrix<f64> {
        ym - self.fitted_mat(ym)
    }
}

/// Projects y onto the span of Z's columns under the P-scalar product.
///
/// An empty Z (zero columns) gives fitted = 0, residual = y.
pub fn project(y: &DVector<f64>, z: &DMatrix<f64>, w: &Weights) -> Result<Projection> {
    Ok(ProjectionBasis::new(z.clone(), w)?.project(y))
}

/// A generalized eigenpair (λ, u) of S·M·u = λ·u with u'Mu = 1.
#[derive(Debug, Clone)]
pub struct EigenPair {
    pub value: f64,
    pub vector: DVector<f64>,
}

/// Flips a vector so its largest-magnitude entry (lowest index on ties) is positive.
pub(crate) fn fix_sign(u: &mut DVector<f64>) {
    let mut idx = 0;
    let mut best = 0.0f64;
    for (i, &v) in u.iter().enumerate() {
        if v.abs() > best {
            best = v.abs();
            idx = i;
        }
    }
    if u[idx] < 0.0 {
        u.neg_mut();
    }
}

/// Top-k pairs of the generalized symmetric problem S·M·u = λ·u, u'Mu = 1.
///
/// Solved in conjugated form: with M = L·Lᵀ, the symmetric problem
/// Lᵀ·S·L·w = λ·w shares the spectrum, and u = L⁻ᵀ·w restores the loading with
/// u'Mu = w'w = 1. Pairs come back sorted by descending eigenvalue, each vector
/// signed so its largest-magnitude entry is positive.
pub fn max_gen_eig(s: &DMatrix<f64>, metric: &Metric, k: usize) -> Result<Vec<EigenPair>> {
    let j = metric.dim();
    if s.nrows() != j || s.ncols() != j {
        return Err(Error::DimensionMismatch(format!(
            "matrix is {}x{} but metric has dimension {}",
            s.nrows(),
            s.ncols(),
            j
        )));
    }
    if k > j {
        return Err(Error::DimensionMismatch(format!(
            "requested {k} pairs from a dimension-{j} problem"
        )));
    }
    let asym = max_asymmetry(s);
    if asym > 1e-10 * s.amax().max(f64::MIN_POSITIVE) {
        return Err(Error::NotSymmetric(asym));
    }
    let l = metric.chol_l();
    let conjugated = symmetrize(&(l.transpose() * s * l));
    let eig = SymmetricEigen::new(conjugated);
    let mut order: Vec<usize> = (0..j).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("eigenvalues are finite")
    });
    let lt = l.transpose();
    let mut pairs = Vec::with_capacity(k);
    for &idx in order.iter().take(k) {
        let w_vec = eig.eigenvectors.column(idx).into_owned();
        let mut u = lt
            .solve_upper_triangular(&w_vec)
            .expect("Cholesky factor is nonsingular");
        fix_sign(&mut u);
        pairs.push(EigenPair {
            value: eig.eigenvalues[idx],
            vector: u,
        });
    }
    Ok(pairs)
}

/// One principal component of a triplet (X, M, P).
#[derive(Debug, Clone)]
pub struct PrincipalComponent {
    /// Score F = X·M·u.
    pub score: DVector<f64>,
    /// Loading u with u'Mu = 1.
    pub loading: DVector<f64>,
    /// ‖F‖²_P, the inertia carried by the component.
    pub eigenvalue: f64,
}

#[derive(Debug, Clone)]
pub struct TripletPca {
    pub components: Vec<PrincipalComponent>,
    /// tr(M·XᵀPX), the total inertia of the triplet.
    pub total_inertia: f64,
}

/// Principal components of the triplet (X, M, P).
pub fn triplet_pca(ds: &WeightedDataset, metric: &Metric, k: usize) -> Result<TripletPca> {
    let g = gram(ds);
    let total_inertia = (metric.matrix() * &g).trace();
    let pairs = max_gen_eig(&g, metric, k)?;
    let components = pairs
        .into_iter()
        .map(|pair| {
            let score = &ds.x * metric.apply(&pair.vector);
            PrincipalComponent {
                score,
                loading: pair.vector,
                eigenvalue: pair.value,
            }
        })
        .collect();
    Ok(TripletPca {
        components,
        total_inertia,
    })
}

/// A named variable group: its centred data and resolved column metric.
#[derive(Debug, Clone)]
pub struct GroupSpec {
    pub name: String,
    pub data: WeightedDataset,
    pub metric: Metric,
}

impl GroupSpec {
    pub fn new(name: impl Into<String>, data: WeightedDataset, metric: Metric) -> Result<Self> {
        if metric.dim() != data.n_vars() {
            return Err(Error::DimensionMismatch(format!(
                "group has {} variables but metric dimension is {}",
                data.n_vars(),
                metric.dim()
            )));
        }
        Ok(Self {
            name: name.into(),
            data,
            metric,
        })
    }

    pub fn n(&self) -> usize {
        self.data.n()
    }

    pub fn n_vars(&self) -> usize {
        self.data.n_vars()
    }

    pub fn weights(&self) -> &Weights {
        &self.data.weights
    }
}

/// Count of singular values above the relative rank threshold.
pub fn numerical_rank(x: &DMatrix<f64>) -> usize {
    if x.nrows() == 0 || x.ncols() == 0 {
        return 0;
    }
    let svd = x.clone().svd(false, false);
    let smax = svd.singular_values.max();
    if smax <= 0.0 {
        return 0;
    }
    svd.singular_values
        .iter()
        .filter(|&&s| s > SINGULARITY_TOL * smax)
        .count()
}
