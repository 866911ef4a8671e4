//! Welch-bound-equality signature design.
//!
//! A signature set is an `L x K` complex matrix whose unit-norm columns are
//! the spreading sequences of `K` users over `L` resource elements. Three
//! quality indicators are supported:
//!
//! * total squared correlation, lower-bounded by the Welch bound `K^2 / L`,
//! * worst-case coherence `max_{i != j} |s_i^H s_j|`,
//! * minimum chordal distance between subspaces spanned by column groups.
//!
//! Generation is deterministic given `(K, L, pi, seed, iters)`.

use std::fmt;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Column norms must be within this distance of 1.
pub const UNIT_NORM_TOL: f64 = 1e-9;
pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_ITERS: usize = 5000;

#[derive(Debug, Error, PartialEq)]
pub enum SeqError {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("column {column} has norm {norm}, expected 1")]
    NotUnitNorm { column: usize, norm: f64 },
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("malformed signature file: {0}")]
    Format(String),
}

/// Performance indicator optimized during generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PiKind {
    #[serde(rename = "tsc")]
    TotalSquaredCorrelation,
    #[serde(rename = "coherence")]
    WorstCaseCoherence,
    #[serde(rename = "chordal")]
    MinChordalDistance,
}

impl fmt::Display for PiKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PiKind::TotalSquaredCorrelation => "tsc",
            PiKind::WorstCaseCoherence => "coherence",
            PiKind::MinChordalDistance => "chordal",
        })
    }
}

impl std::str::FromStr for PiKind {
    type Err = SeqError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "tsc" | "total_squared_correlation" => Ok(PiKind::TotalSquaredCorrelation),
            "coherence" | "mu" | "worst_case_coherence" => Ok(PiKind::WorstCaseCoherence),
            "chordal" | "dcord" | "min_chordal_distance" => Ok(PiKind::MinChordalDistance),
            other => Err(SeqError::Format(format!("unknown performance indicator `{other}`"))),
        }
    }
}

/// `L x K` matrix of unit-norm spreading sequences, column `k` is `s_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct SignatureMatrix {
    entries: DMatrix<Complex64>,
}

impl SignatureMatrix {
    /// Wraps a matrix whose columns already have unit norm.
    pub fn new(entries: DMatrix<Complex64>) -> Result<Self, SeqError> {
        if entries.nrows() == 0 || entries.ncols() == 0 {
            return Err(SeqError::InvalidDimension(format!(
                "signature matrix must be at least 1x1, got {}x{}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        for (k, col) in entries.column_iter().enumerate() {
            let norm = col.norm();
            if !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(SeqError::NotUnitNorm { column: k, norm });
            }
        }
        Ok(Self { entries })
    }

    /// Normalizes every column, failing on zero or non-finite columns.
    pub fn from_columns_normalized(mut entries: DMatrix<Complex64>) -> Result<Self, SeqError> {
        for (k, mut col) in entries.column_iter_mut().enumerate() {
            let norm = col.norm();
            if norm == 0.0 || !norm.is_finite() {
                return Err(SeqError::NotUnitNorm { column: k, norm });
            }
            col.unscale_mut(norm);
        }
        Self::new(entries)
    }

    pub fn identity(k: usize) -> Result<Self, SeqError> {
        Self::new(DMatrix::identity(k, k))
    }

    pub fn spread_length(&self) -> usize {
        self.entries.nrows()
    }

    pub fn user_count(&self) -> usize {
        self.entries.ncols()
    }

    pub fn overloading_factor(&self) -> f64 {
        self.user_count() as f64 / self.spread_length() as f64
    }

    pub fn entries(&self) -> &DMatrix<Complex64> {
        &self.entries
    }

    /// Spreading sequence of user `k` as a vector of length `L`.
    pub fn column(&self, k: usize) -> Vec<Complex64> {
        self.entries.column(k).iter().copied().collect()
    }

    /// Left-multiplies by an `L x L` matrix and renormalizes.
    pub fn rotated(&self, unitary: &DMatrix<Complex64>) -> Result<Self, SeqError> {
        if unitary.nrows() != self.spread_length() || unitary.ncols() != self.spread_length() {
            return Err(SeqError::InvalidDimension("rotation must be L x L".into()));
        }
        Self::from_columns_normalized(unitary * &self.entries)
    }
}

/// Grammian `S^H S`.
pub fn gram(s: &SignatureMatrix) -> DMatrix<Complex64> {
    s.entries.adjoint() * &s.entries
}

/// Total squared correlation, including the diagonal terms.
pub fn tsc(s: &SignatureMatrix) -> f64 {
    gram(s).iter().map(|g| g.norm_sqr()).sum()
}

/// Welch lower bound `K^2 / L` on the total squared correlation.
pub fn welch_bound(k: usize, l: usize) -> Result<f64, SeqError> {
    if k == 0 || l == 0 {
        return Err(SeqError::InvalidDimension(format!(
            "K and L must be positive, got K={k}, L={l}"
        )));
    }
    Ok((k * k) as f64 / l as f64)
}

/// Lower bound on the worst-case coherence of `K` unit vectors in `C^L`.
/// Zero when `K <= L`.
pub fn coherence_bound(k: usize, l: usize) -> f64 {
    if k <= l {
        return 0.0;
    }
    (((k - l) as f64) / ((l * (k - 1)) as f64)).sqrt()
}

fn pairwise_rho(s: &SignatureMatrix) -> DMatrix<f64> {
    gram(s).map(|g| g.norm())
}

/// Worst-case coherence; 0 for a single column.
pub fn coherence(s: &SignatureMatrix) -> f64 {
    let rho = pairwise_rho(s);
    let k = s.user_count();
    let mut mu = 0.0f64;
    for i in 0..k {
        for j in 0..k {
            if i != j {
                mu = mu.max(rho[(i, j)]);
            }
        }
    }
    mu
}

fn validate_partition(s: &SignatureMatrix, partition: &[Vec<usize>]) -> Result<(), SeqError> {
    if partition.len() < 2 {
        return Err(SeqError::InvalidPartition(
            "need at least two column groups".into(),
        ));
    }
    let mut seen = vec![false; s.user_count()];
    for (g, group) in partition.iter().enumerate() {
        if group.is_empty() {
            return Err(SeqError::InvalidPartition(format!("group {g} is empty")));
        }
        if group.len() > s.spread_length() {
            return Err(SeqError::InvalidPartition(format!(
                "group {g} has {} columns, more than L={}",
                group.len(),
                s.spread_length()
            )));
        }
        for &c in group {
            if c >= s.user_count() {
                return Err(SeqError::InvalidPartition(format!(
                    "column {c} out of range (K={})",
                    s.user_count()
                )));
            }
            if seen[c] {
                return Err(SeqError::InvalidPartition(format!(
                    "column {c} appears in more than one group"
                )));
            }
            seen[c] = true;
        }
    }
    Ok(())
}

/// Orthonormal basis of the span of the selected columns (modified
/// Gram-Schmidt, dependent columns dropped).
fn orthonormal_basis(m: &DMatrix<Complex64>, cols: &[usize]) -> DMatrix<Complex64> {
    let mut basis: Vec<nalgebra::DVector<Complex64>> = Vec::with_capacity(cols.len());
    for &c in cols {
        let mut v = m.column(c).clone_owned();
        for b in &basis {
            let proj = b.dotc(&v);
            v.axpy(-proj, b, Complex64::new(1.0, 0.0));
        }
        let n = v.norm();
        if n > 1e-10 {
            basis.push(v.unscale(n));
        }
    }
    if basis.is_empty() {
        return DMatrix::zeros(m.nrows(), 0);
    }
    DMatrix::from_columns(&basis)
}

fn chordal_between(qa: &DMatrix<Complex64>, qb: &DMatrix<Complex64>) -> f64 {
    // sum of cos^2 of the principal angles is ||Qa^H Qb||_F^2
    let cross = qa.adjoint() * qb;
    let dim = qa.ncols().min(qb.ncols()) as f64;
    (dim - cross.norm_squared()).max(0.0).sqrt()
}

/// Chordal distance `sqrt(sum sin^2 theta_i)` between the subspaces spanned by
/// two column groups.
pub fn chordal_distance(
    s: &SignatureMatrix,
    group_a: &[usize],
    group_b: &[usize],
) -> Result<f64, SeqError> {
    validate_partition(s, &[group_a.to_vec(), group_b.to_vec()])?;
    Ok(chordal_between(
        &orthonormal_basis(&s.entries, group_a),
        &orthonormal_basis(&s.entries, group_b),
    ))
}

/// Minimum pairwise chordal distance over the groups of `partition`.
pub fn min_chordal_distance(
    s: &SignatureMatrix,
    partition: &[Vec<usize>],
) -> Result<f64, SeqError> {
    validate_partition(s, partition)?;
    let bases: Vec<_> = partition
        .iter()
        .map(|g| orthonormal_basis(&s.entries, g))
        .collect();
    Ok(min_pairwise(&bases))
}

fn min_pairwise(bases: &[DMatrix<Complex64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..bases.len() {
        for j in i + 1..bases.len() {
            best = best.min(chordal_between(&bases[i], &bases[j]));
        }
    }
    best
}

/// Consecutive column pairs, or singletons when `L == 1`. The last group is
/// a singleton when `K` is odd.
pub fn default_partition(k: usize, l: usize) -> Vec<Vec<usize>> {
    let size = l.clamp(1, 2);
    (0..k)
        .collect::<Vec<_>>()
        .chunks(size)
        .map(|c| c.to_vec())
        .collect()
}

/// Summary of correlation properties.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationReport {
    pub tsc: f64,
    pub welch_bound: f64,
    pub wbe_gap: f64,
    pub mu: f64,
    pub pairwise_rho: Vec<Vec<f64>>,
    pub min_chordal: f64,
    pub is_wbe: bool,
}

/// Aggregates TSC, Welch bound, coherence, and the minimum chordal distance
/// over [`default_partition`] (over singletons when that partition has a
/// single group).
pub fn verify(s: &SignatureMatrix, tol: f64) -> CorrelationReport {
    let k = s.user_count();
    let l = s.spread_length();
    let rho = pairwise_rho(s);
    let tsc_value = tsc(s);
    let wb = welch_bound(k, l).expect("valid matrix has positive dimensions");
    let mut partition = default_partition(k, l);
    if partition.len() < 2 {
        partition = (0..k).map(|c| vec![c]).collect();
    }
    let min_chordal = if partition.len() < 2 {
        0.0
    } else {
        min_chordal_distance(s, &partition).expect("default partition is valid")
    };
    CorrelationReport {
        tsc: tsc_value,
        welch_bound: wb,
        wbe_gap: tsc_value - wb,
        mu: coherence(s),
        pairwise_rho: (0..k).map(|i| (0..k).map(|j| rho[(i, j)]).collect()).collect(),
        min_chordal,
        is_wbe: (tsc_value - wb).abs() <= tol,
    }
}

/// Generation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerateOptions {
    pub seed: u64,
    pub iters: usize,
    pub tol: f64,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            iters: DEFAULT_ITERS,
            tol: DEFAULT_TOL,
        }
    }
}

/// Result of [`generate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub matrix: SignatureMatrix,
    pub pi: PiKind,
    /// Achieved value of the optimized indicator.
    pub achieved: f64,
    /// Target the optimizer aimed for (Welch bound, coherence bound, or
    /// the simplex bound on chordal distance).
    pub target: f64,
    pub converged: bool,
    pub iterations: usize,
    /// `K < L`: the set is not overloaded and the Welch bound is not tight.
    pub underloaded: bool,
}

/// Generates a signature set optimized for `pi`.
pub fn generate(k: usize, l: usize, pi: PiKind, opts: GenerateOptions) -> Result<Generated, SeqError> {
    welch_bound(k, l)?;
    if !(opts.tol.is_finite() && opts.tol >= 0.0) {
        return Err(SeqError::InvalidDimension(format!("tol must be nonnegative, got {}", opts.tol)));
    }
    if k <= l {
        // orthonormal columns achieve every indicator's optimum
        let mut m = DMatrix::zeros(l, k);
        for c in 0..k {
            m[(c, c)] = Complex64::new(1.0, 0.0);
        }
        let matrix = SignatureMatrix::new(m)?;
        let (achieved, target) = match pi {
            PiKind::TotalSquaredCorrelation => (tsc(&matrix), k as f64),
            PiKind::WorstCaseCoherence => (0.0, 0.0),
            PiKind::MinChordalDistance => {
                let d = singleton_or_default_chordal(&matrix);
                (d, d)
            }
        };
        return Ok(Generated {
            matrix,
            pi,
            achieved,
            target,
            converged: true,
            iterations: 0,
            underloaded: k < l,
        });
    }
    match pi {
        PiKind::TotalSquaredCorrelation => generate_tight_frame(k, l, opts),
        PiKind::WorstCaseCoherence => generate_low_coherence(k, l, opts),
        PiKind::MinChordalDistance => generate_subspace_packing(k, l, opts),
    }
}

fn singleton_or_default_chordal(s: &SignatureMatrix) -> f64 {
    let mut p = default_partition(s.user_count(), s.spread_length());
    if p.len() < 2 {
        p = (0..s.user_count()).map(|c| vec![c]).collect();
    }
    if p.len() < 2 {
        return 0.0;
    }
    min_chordal_distance(s, &p).unwrap_or(0.0)
}

/// `L` rows of the `K`-point DFT matrix scaled by `1/sqrt(L)`: rows are
/// orthogonal with squared norm `K/L`, so `S S^H = (K/L) I` and the TSC
/// meets the Welch bound exactly.
fn dft_frame(k: usize, l: usize) -> DMatrix<Complex64> {
    let scale = 1.0 / (l as f64).sqrt();
    DMatrix::from_fn(l, k, |row, col| {
        let phase = -2.0 * std::f64::consts::PI * ((row * col) % k) as f64 / k as f64;
        Complex64::from_polar(scale, phase)
    })
}

fn generate_tight_frame(k: usize, l: usize, opts: GenerateOptions) -> Result<Generated, SeqError> {
    let target = welch_bound(k, l)?;
    let mut matrix = SignatureMatrix::from_columns_normalized(dft_frame(k, l))?;
    let mut achieved = tsc(&matrix);
    let mut iterations = 0;
    // Frame-potential refinement: S <- S (S^H S)^{-1/2}-style tightening by
    // repeated row orthogonalization and column renormalization.
    while (achieved - target).abs() > opts.tol && iterations < opts.iters {
        let frame_op = &matrix.entries * matrix.entries.adjoint();
        let eig = SymmetricEigen::new(frame_op);
        let inv_sqrt = &eig.eigenvectors
            * DMatrix::from_diagonal(&eig.eigenvalues.map(|e| {
                Complex64::new(((k as f64 / l as f64) / e.max(1e-300)).sqrt(), 0.0)
            }))
            * eig.eigenvectors.adjoint();
        matrix = SignatureMatrix::from_columns_normalized(inv_sqrt * &matrix.entries)?;
        achieved = tsc(&matrix);
        iterations += 1;
    }
    Ok(Generated {
        converged: (achieved - target).abs() <= opts.tol,
        matrix,
        pi: PiKind::TotalSquaredCorrelation,
        achieved,
        target,
        iterations,
        underloaded: false,
    })
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<Complex64> {
    DMatrix::from_fn(rows, cols, |_, _| {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        Complex64::new(re, im)
    })
}

/// Rank-`l` PSD approximation `V_l diag(lambda_l) V_l^H`, returned as the
/// factor `diag(sqrt(lambda_l)) V_l^H` of shape `l x K`.
fn rank_l_factor(g: DMatrix<Complex64>, l: usize) -> DMatrix<Complex64> {
    let k = g.nrows();
    let eig = SymmetricEigen::new(g);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut factor = DMatrix::zeros(l, k);
    for (row, &idx) in order.iter().take(l).enumerate() {
        let w = eig.eigenvalues[idx].max(0.0).sqrt();
        for col in 0..k {
            factor[(row, col)] = eig.eigenvectors[(col, idx)].conj() * w;
        }
    }
    factor
}

/// Alternating projection between the set of Grammians with unit diagonal and
/// off-diagonal magnitude at most `mu_target`, and the rank-`L` PSD cone.
fn generate_low_coherence(k: usize, l: usize, opts: GenerateOptions) -> Result<Generated, SeqError> {
    let target = coherence_bound(k, l);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let start = SignatureMatrix::from_columns_normalized(random_matrix(&mut rng, l, k))?;
    let mut best_mu = coherence(&start);
    let mut best = start.clone();
    let mut current = start;
    let mut iterations = 0;
    while iterations < opts.iters && best_mu > target + opts.tol {
        iterations += 1;
        let mut g = gram(&current);
        for i in 0..k {
            g[(i, i)] = Complex64::new(1.0, 0.0);
            for j in 0..k {
                if i != j {
                    let mag = g[(i, j)].norm();
                    if mag > target {
                        g[(i, j)] *= target / mag;
                    }
                }
            }
        }
        let factor = rank_l_factor(g, l);
        current = match SignatureMatrix::from_columns_normalized(factor) {
            Ok(s) => s,
            // a collapsed column: restart from a fresh random point
            Err(_) => SignatureMatrix::from_columns_normalized(random_matrix(&mut rng, l, k))?,
        };
        let mu = coherence(&current);
        if mu < best_mu {
            best_mu = mu;
            best = current.clone();
        }
    }
    Ok(Generated {
        converged: best_mu <= target + opts.tol,
        matrix: best,
        pi: PiKind::WorstCaseCoherence,
        achieved: best_mu,
        target,
        iterations,
        underloaded: false,
    })
}

/// Simplex (Rankin-type) upper bound on the squared chordal distance of `n`
/// subspaces of dimension `m` in `C^l`.
pub fn chordal_simplex_bound(n: usize, m: usize, l: usize) -> f64 {
    if n < 2 {
        return f64::INFINITY;
    }
    let sq = (m as f64 * (l - m.min(l)) as f64 / l as f64) * (n as f64 / (n as f64 - 1.0));
    sq.sqrt()
}

fn stack_bases(bases: &[DMatrix<Complex64>], l: usize, k: usize) -> DMatrix<Complex64> {
    let mut m = DMatrix::zeros(l, k);
    let mut c = 0;
    for b in bases {
        for j in 0..b.ncols() {
            m.set_column(c, &b.column(j));
            c += 1;
        }
    }
    m
}

/// Best-effort subspace packing by randomized hill climbing over the
/// orthonormal bases of the default partition.
fn generate_subspace_packing(k: usize, l: usize, opts: GenerateOptions) -> Result<Generated, SeqError> {
    let partition = default_partition(k, l);
    let dim = partition[0].len();
    let target = chordal_simplex_bound(partition.len(), dim, l);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut bases: Vec<DMatrix<Complex64>> = partition
        .iter()
        .map(|g| {
            let raw = random_matrix(&mut rng, l, g.len());
            orthonormal_basis(&raw, &(0..g.len()).collect::<Vec<_>>())
        })
        .collect();
    let mut best = min_pairwise(&bases);
    let mut step = 0.5;
    let mut iterations = 0;
    while iterations < opts.iters && best < target - opts.tol {
        iterations += 1;
        let idx = (rand::Rng::random::<u64>(&mut rng) % bases.len() as u64) as usize;
        let cols = bases[idx].ncols();
        let proposal_raw = &bases[idx] + random_matrix(&mut rng, l, cols) * Complex64::new(step, 0.0);
        let proposal = orthonormal_basis(&proposal_raw, &(0..cols).collect::<Vec<_>>());
        if proposal.ncols() != cols {
            continue;
        }
        let previous = std::mem::replace(&mut bases[idx], proposal);
        let d = min_pairwise(&bases);
        if d > best {
            best = d;
        } else {
            bases[idx] = previous;
            step = (step * 0.995).max(1e-4);
        }
    }
    let matrix = SignatureMatrix::from_columns_normalized(stack_bases(&bases, l, k))?;
    Ok(Generated {
        converged: best >= target - opts.tol,
        achieved: best,
        matrix,
        pi: PiKind::MinChordalDistance,
        target,
        iterations,
        underloaded: false,
    })
}

/// On-disk signature set: `{"L", "K", "pi", "seed", "entries"}` with
/// `entries` a column-major list of `[re, im]` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignatureFile {
    #[serde(rename = "L")]
    pub l: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub pi: Option<PiKind>,
    pub seed: Option<u64>,
    pub entries: Vec<[f64; 2]>,
}

impl SignatureFile {
    pub fn from_matrix(s: &SignatureMatrix, pi: Option<PiKind>, seed: Option<u64>) -> Self {
        // nalgebra storage is column-major
        let entries = s.entries.iter().map(|c| [c.re, c.im]).collect();
        Self {
            l: s.spread_length(),
            k: s.user_count(),
            pi,
            seed,
            entries,
        }
    }

    pub fn to_matrix(&self) -> Result<SignatureMatrix, SeqError> {
        if self.entries.len() != self.l * self.k {
            return Err(SeqError::Format(format!(
                "expected {} entries for L={} K={}, found {}",
                self.l * self.k,
                self.l,
                self.k,
                self.entries.len()
            )));
        }
        let m = DMatrix::from_iterator(
            self.l,
            self.k,
            self.entries.iter().map(|[re, im]| Complex64::new(*re, *im)),
        );
        SignatureMatrix::new(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("signature file serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, SeqError> {
        serde_json::from_str(text).map_err(|e| SeqError::Format(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn identity_gram_and_tsc() {
        let s = SignatureMatrix::identity(4).unwrap();
        assert_eq!(gram(&s), DMatrix::identity(4, 4));
        assert_eq!(tsc(&s), 4.0);
        assert_eq!(coherence(&s), 0.0);
    }

    #[test]
    fn single_column_tsc_is_one() {
        let m = DMatrix::from_column_slice(3, 1, &[Complex64::new(0.6, 0.0), Complex64::new(0.0, 0.8), Complex64::new(0.0, 0.0)]);
        let s = SignatureMatrix::new(m).unwrap();
        assert!(close(tsc(&s), 1.0, 1e-12));
        assert_eq!(coherence(&s), 0.0);
    }

    #[test]
    fn welch_bound_arithmetic() {
        assert_eq!(welch_bound(4, 2).unwrap(), 8.0);
        assert_eq!(welch_bound(7, 7).unwrap(), 7.0);
        assert_eq!(welch_bound(12, 6).unwrap(), 24.0);
        assert!(welch_bound(0, 3).is_err());
        assert!(welch_bound(3, 0).is_err());
    }

    #[test]
    fn rejects_non_unit_columns() {
        let m = DMatrix::from_element(2, 2, Complex64::new(1.0, 0.0));
        assert!(matches!(SignatureMatrix::new(m), Err(SeqError::NotUnitNorm { column: 0, .. })));
        assert!(SignatureMatrix::new(DMatrix::zeros(0, 3)).is_err());
    }

    #[test]
    fn dft_gram_matches_naive_inner_products() {
        let s = generate(4, 2, PiKind::TotalSquaredCorrelation, GenerateOptions::default())
            .unwrap()
            .matrix;
        let g = gram(&s);
        for i in 0..4 {
            for j in 0..4 {
                let mut acc = Complex64::new(0.0, 0.0);
                for r in 0..2 {
                    acc += s.entries()[(r, i)].conj() * s.entries()[(r, j)];
                }
                assert!((g[(i, j)] - acc).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn tsc_generation_meets_welch_bound() {
        for (k, l, expect) in [(4, 2, 8.0), (6, 4, 9.0)] {
            let g = generate(k, l, PiKind::TotalSquaredCorrelation, GenerateOptions::default()).unwrap();
            assert!(g.converged);
            assert!(close(tsc(&g.matrix), expect, 1e-6), "K={k} L={l}: {}", tsc(&g.matrix));
        }
    }

    #[test]
    fn square_case_is_orthonormal_for_every_pi() {
        for pi in [PiKind::TotalSquaredCorrelation, PiKind::WorstCaseCoherence, PiKind::MinChordalDistance] {
            let g = generate(3, 3, pi, GenerateOptions::default()).unwrap();
            assert!(close(tsc(&g.matrix), 3.0, 1e-12));
            assert_eq!(coherence(&g.matrix), 0.0);
            assert!(!g.underloaded);
        }
        assert!(generate(2, 4, PiKind::TotalSquaredCorrelation, GenerateOptions::default())
            .unwrap()
            .underloaded);
    }

    #[test]
    fn grassmann_four_in_three() {
        let g = generate(4, 3, PiKind::WorstCaseCoherence, GenerateOptions::default()).unwrap();
        assert!(close(g.achieved, 1.0 / 3.0, 1e-3), "mu = {}", g.achieved);
        // equiangular: every off-diagonal rho close to mu
        let rho = pairwise_rho(&g.matrix);
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert!(close(rho[(i, j)], g.achieved, 2e-3));
                }
            }
        }
    }

    #[test]
    fn chordal_distance_basics() {
        let s = SignatureMatrix::identity(2).unwrap();
        assert!(close(chordal_distance(&s, &[0], &[1]).unwrap(), 1.0, 1e-12));
        let same = SignatureMatrix::new(DMatrix::from_element(2, 2, Complex64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0))).unwrap();
        assert!(close(chordal_distance(&same, &[0], &[1]).unwrap(), 0.0, 1e-7));
    }

    #[test]
    fn partition_errors() {
        let s = SignatureMatrix::identity(3).unwrap();
        assert!(matches!(
            min_chordal_distance(&s, &[vec![0, 1], vec![1, 2]]),
            Err(SeqError::InvalidPartition(_))
        ));
        let wide = generate(4, 2, PiKind::TotalSquaredCorrelation, GenerateOptions::default()).unwrap().matrix;
        assert!(min_chordal_distance(&wide, &[vec![0, 1, 2], vec![3]]).is_err());
        assert!(min_chordal_distance(&s, &[vec![0]]).is_err());
    }

    #[test]
    fn verify_identity() {
        let r = verify(&SignatureMatrix::identity(4).unwrap(), DEFAULT_TOL);
        assert_eq!(r.tsc, 4.0);
        assert_eq!(r.welch_bound, 4.0);
        assert_eq!(r.wbe_gap, 0.0);
        assert_eq!(r.mu, 0.0);
        assert!(r.is_wbe);
    }

    #[test]
    fn subspace_packing_improves_on_start() {
        let g = generate(6, 4, PiKind::MinChordalDistance, GenerateOptions { iters: 800, ..Default::default() }).unwrap();
        let d = min_chordal_distance(&g.matrix, &default_partition(6, 4)).unwrap();
        assert!(close(d, g.achieved, 1e-9));
        assert!(g.achieved > 0.5 && g.achieved <= g.target + 1e-9, "{g:?}");
        // groups are orthonormal pairs
        let rho = pairwise_rho(&g.matrix);
        assert!(rho[(0, 1)] < 1e-9 && rho[(2, 3)] < 1e-9);
    }

    #[test]
    fn generation_is_deterministic() {
        let opts = GenerateOptions { seed: 7, iters: 300, tol: 1e-6 };
        for pi in [PiKind::WorstCaseCoherence, PiKind::MinChordalDistance] {
            let a = generate(6, 3, pi, opts).unwrap();
            let b = generate(6, 3, pi, opts).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn file_round_trip_is_exact() {
        let g = generate(5, 3, PiKind::WorstCaseCoherence, GenerateOptions { seed: 3, iters: 50, tol: 1e-6 }).unwrap();
        let file = SignatureFile::from_matrix(&g.matrix, Some(g.pi), Some(3));
        let text = file.to_json();
        let back = SignatureFile::from_json(&text).unwrap();
        assert_eq!(back, file);
        assert_eq!(back.to_matrix().unwrap(), g.matrix);
        assert!(text.contains("\"L\": 3"));
        assert!(text.contains("\"pi\": \"coherence\""));
    }

    #[test]
    fn file_rejects_wrong_entry_count() {
        let text = r#"{"L": 2, "K": 2, "pi": null, "seed": null, "entries": [[1.0, 0.0]]}"#;
        assert!(SignatureFile::from_json(text).unwrap().to_matrix().is_err());
        assert!(SignatureFile::from_json(r#"{"L": 2}"#).is_err());
    }
}
