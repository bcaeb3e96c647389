//! Homological equations `{N + ℬ + ℬ̄, F} + R = [R]` with small-divisor reporting.
//!
//! Matrix-level solvers come first; [`HomologicalSolver`] applies them to a whole
//! truncated perturbation, one `(k, unit)` system at a time.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::hamiltonian_algebra::{conj_var, var_is_conj, var_slot, Mono, Series, Var, WVec, C64, I};
use crate::normal_form::NormalForm;

/// Absolute floor guarding floating-point noise.
pub const ABSOLUTE_FLOOR: f64 = 1e-13;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DivisorKind {
    Scalar,
    BlockEigen,
    Tensor4,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmallDivisorReport {
    pub divisor_value: f64,
    pub threshold: f64,
    pub kind: DivisorKind,
    pub k: Vec<i64>,
    /// Block, site or eigen-index identifiers.
    pub indices: Vec<i64>,
}

impl SmallDivisorReport {
    pub fn flagged(&self) -> bool {
        self.divisor_value < self.threshold
    }
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum SolverError {
    #[error("{} small divisor(s), smallest {:e}", .0.len(), .0.iter().map(|r| r.divisor_value).fold(f64::INFINITY, f64::min))]
    SmallDivisor(Vec<SmallDivisorReport>),
    #[error("block asymmetry {asym:e} exceeds tolerance for norm {norm:e}")]
    Asymmetric { asym: f64, norm: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("scalar equation needs k ≠ 0")]
    ZeroK,
    #[error("unit {0} mixes integer frequencies")]
    MixedUnit(usize),
    #[error("unit of size {0} is neither Hermitian nor 2×2")]
    UnsupportedUnit(usize),
}

pub fn k_dot(k: &[i64], omega: &[f64]) -> f64 {
    k.iter().zip(omega).map(|(a, b)| *a as f64 * b).sum()
}

/// `F = i·rhs/⟨k,ω⟩`.
pub fn solve_scalar(k: &[i64], omega: &[f64], rhs: C64, floor: f64) -> Result<C64, SolverError> {
    if k.iter().all(|&x| x == 0) {
        return Err(SolverError::ZeroK);
    }
    let d = k_dot(k, omega);
    let thr = floor.max(ABSOLUTE_FLOOR);
    if d.abs() < thr {
        return Err(SolverError::SmallDivisor(vec![SmallDivisorReport {
            divisor_value: d.abs(),
            threshold: thr,
            kind: DivisorKind::Scalar,
            k: k.to_vec(),
            indices: Vec::new(),
        }]));
    }
    Ok(I * rhs / d)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockDiagonalization {
    /// Columns are eigenvectors: `A = Q Λ Qᴴ`.
    pub q: DMatrix<C64>,
    pub lambda: Vec<f64>,
}

impl BlockDiagonalization {
    /// `‖QᴴAQ − Λ‖_max`.
    pub fn residual(&self, a: &DMatrix<C64>) -> f64 {
        let d = self.q.adjoint() * a * &self.q;
        let mut worst: f64 = 0.0;
        for i in 0..d.nrows() {
            for j in 0..d.ncols() {
                let t = if i == j { C64::new(self.lambda[i], 0.0) } else { C64::default() };
                worst = worst.max((d[(i, j)] - t).norm());
            }
        }
        worst
    }

    /// `‖QᵀQ̄ − I‖_max`.
    pub fn unitarity_defect(&self) -> f64 {
        let m = self.q.transpose() * self.q.map(|x| x.conj());
        let mut worst: f64 = 0.0;
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                let t = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((m[(i, j)] - t).norm());
            }
        }
        worst
    }
}

fn max_entry(a: &DMatrix<C64>) -> f64 {
    a.iter().map(|x| x.norm()).fold(0.0, f64::max)
}

/// Hermitian eigen-decomposition, after taking the Hermitian part.
pub fn diagonalize_block(a: &DMatrix<C64>) -> Result<BlockDiagonalization, SolverError> {
    if a.nrows() != a.ncols() {
        return Err(SolverError::Dimension(format!("{}×{} block", a.nrows(), a.ncols())));
    }
    let norm = max_entry(a);
    let asym = max_entry(&(a - a.adjoint()));
    if asym > 1e-12 * norm.max(f64::MIN_POSITIVE) && asym > 0.0 {
        return Err(SolverError::Asymmetric { asym, norm });
    }
    let h = (a + a.adjoint()).scale(0.5);
    let n = h.nrows();
    if n == 0 {
        return Ok(BlockDiagonalization { q: h, lambda: Vec::new() });
    }
    let eig = SymmetricEigen::new(h);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[x].total_cmp(&eig.eigenvalues[y]));
    let mut q = DMatrix::zeros(n, n);
    let mut lambda = Vec::with_capacity(n);
    for (c, &src) in order.iter().enumerate() {
        q.set_column(c, &eig.eigenvectors.column(src));
        lambda.push(eig.eigenvalues[src]);
    }
    Ok(BlockDiagonalization { q, lambda })
}

pub fn real_matrix(rows: &[Vec<f64>]) -> DMatrix<C64> {
    let n = rows.len();
    let m = rows.first().map_or(0, |r| r.len());
    DMatrix::from_fn(n, m, |i, j| C64::new(rows[i][j], 0.0))
}

/// `F = i(⟨k,ω⟩I + sign·A)⁻¹ rhs` for Hermitian `A`.
pub fn solve_block_vector(kw: f64, a: &DMatrix<C64>, rhs: &DVector<C64>, sign: f64, floor: f64) -> Result<DVector<C64>, SolverError> {
    if rhs.len() != a.nrows() {
        return Err(SolverError::Dimension(format!("rhs {} vs block {}", rhs.len(), a.nrows())));
    }
    let bd = diagonalize_block(a)?;
    let thr = floor.max(ABSOLUTE_FLOOR);
    let mut reports = Vec::new();
    let rh = bd.q.adjoint() * rhs;
    let mut fh = DVector::zeros(rhs.len());
    for j in 0..rhs.len() {
        let d = kw + sign * bd.lambda[j];
        if d.abs() < thr {
            reports.push(SmallDivisorReport { divisor_value: d.abs(), threshold: thr, kind: DivisorKind::BlockEigen, k: Vec::new(), indices: vec![j as i64] });
            continue;
        }
        fh[j] = I * rh[j] / d;
    }
    if !reports.is_empty() {
        return Err(SolverError::SmallDivisor(reports));
    }
    Ok(&bd.q * fh)
}

/// `(⟨k,ω⟩I + s₁A)X + s₂XB = iC` for Hermitian `A`, `B`, solved entrywise in the
/// doubly diagonalized frame.
pub fn solve_sylvester(
    kw: f64,
    a: &DMatrix<C64>,
    b: &DMatrix<C64>,
    c: &DMatrix<C64>,
    signs: (f64, f64),
    floor: f64,
) -> Result<DMatrix<C64>, SolverError> {
    if c.nrows() != a.nrows() || c.ncols() != b.nrows() {
        return Err(SolverError::Dimension(format!("C is {}×{}", c.nrows(), c.ncols())));
    }
    let da = diagonalize_block(a)?;
    let db = diagonalize_block(b)?;
    let thr = floor.max(ABSOLUTE_FLOOR);
    let ch = da.q.adjoint() * c * &db.q;
    let mut xh = DMatrix::zeros(c.nrows(), c.ncols());
    let mut reports = Vec::new();
    for i in 0..c.nrows() {
        for j in 0..c.ncols() {
            let d = kw + signs.0 * da.lambda[i] + signs.1 * db.lambda[j];
            if d.abs() < thr {
                reports.push(SmallDivisorReport {
                    divisor_value: d.abs(),
                    threshold: thr,
                    kind: DivisorKind::Tensor4,
                    k: Vec::new(),
                    indices: vec![i as i64, j as i64],
                });
                continue;
            }
            xh[(i, j)] = I * ch[(i, j)] / d;
        }
    }
    if !reports.is_empty() {
        return Err(SolverError::SmallDivisor(reports));
    }
    Ok(&da.q * xh * db.q.adjoint())
}

/// The Kronecker operator `vec X ↦ vec((⟨k,ω⟩I + s₁A)X + s₂XB)` (column-major vec).
pub fn sylvester_operator(kw: f64, a: &DMatrix<C64>, b: &DMatrix<C64>, signs: (f64, f64)) -> DMatrix<C64> {
    let (p, q) = (a.nrows(), b.nrows());
    let left = DMatrix::<C64>::identity(p, p).scale(kw) + a.scale(signs.0);
    let mut op = DMatrix::zeros(p * q, p * q);
    for col in 0..q {
        for i in 0..p {
            for k in 0..p {
                op[(col * p + i, col * p + k)] += left[(i, k)];
            }
        }
    }
    // (XB)_{i,col} = Σ_j X_{i,j} B_{j,col}
    for col in 0..q {
        for j in 0..q {
            for i in 0..p {
                op[(col * p + i, j * p + i)] += b[(j, col)] * signs.1;
            }
        }
    }
    op
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SylvesterVerdict {
    pub spectral_gap: f64,
    pub smallest_singular_value: f64,
    pub spectral_solvable: bool,
    pub tensor_solvable: bool,
}

/// Solvability by the spectral gap and, independently, by the smallest singular value
/// of the Kronecker operator.
pub fn sylvester_verdict(kw: f64, a: &DMatrix<C64>, b: &DMatrix<C64>, signs: (f64, f64), floor: f64) -> Result<SylvesterVerdict, SolverError> {
    let da = diagonalize_block(a)?;
    let db = diagonalize_block(b)?;
    let mut gap = f64::INFINITY;
    for x in &da.lambda {
        for y in &db.lambda {
            gap = gap.min((kw + signs.0 * x + signs.1 * y).abs());
        }
    }
    let op = sylvester_operator(kw, a, b, signs);
    let sv = op.svd(false, false).singular_values;
    let smin = sv.iter().copied().fold(f64::INFINITY, f64::min);
    let thr = floor.max(ABSOLUTE_FLOOR);
    Ok(SylvesterVerdict { spectral_gap: gap, smallest_singular_value: smin, spectral_solvable: gap >= thr, tensor_solvable: smin >= thr })
}

/// `det(A⊗I ± I⊗B)` for 2×2 `A`, `B` by the trace/determinant identity.
pub fn kron_det_identity(a: [[C64; 2]; 2], b: [[C64; 2]; 2], sign: f64) -> C64 {
    let (da, db) = (det2(a), det2(b));
    let (ta, tb) = (a[0][0] + a[1][1], b[0][0] + b[1][1]);
    (da - db) * (da - db) + da * tb * tb + db * ta * ta + (da + db) * ta * tb * sign
}

fn det2(a: [[C64; 2]; 2]) -> C64 {
    a[0][0] * a[1][1] - a[0][1] * a[1][0]
}

/// `A⊗I₂ + s·I₂⊗B` in the basis `(nn′, nm′, mn′, mm′)`.
pub fn kron_sum(a: [[C64; 2]; 2], b: [[C64; 2]; 2], sign: f64) -> DMatrix<C64> {
    DMatrix::from_fn(4, 4, |r, c| {
        let (ra, rb) = (r / 2, r % 2);
        let (ca, cb) = (c / 2, c % 2);
        let mut v = C64::default();
        if rb == cb {
            v += a[ra][ca];
        }
        if ra == ca {
            v += b[rb][cb] * sign;
        }
        v
    })
}

pub fn to_c2(m: [[f64; 2]; 2]) -> [[C64; 2]; 2] {
    [[C64::new(m[0][0], 0.0), C64::new(m[0][1], 0.0)], [C64::new(m[1][0], 0.0), C64::new(m[1][1], 0.0)]]
}

/// Eigen-decomposition of a general complex 2×2 matrix: `(eigenvalues, V)` with `A V = V D`.
pub fn eig2(a: [[C64; 2]; 2]) -> ([C64; 2], [[C64; 2]; 2]) {
    let tr = a[0][0] + a[1][1];
    let det = det2(a);
    let root = (tr * tr * 0.25 - det).sqrt();
    let l = [tr * 0.5 + root, tr * 0.5 - root];
    let scale = a.iter().flatten().map(|x| x.norm()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let mut v = [[C64::default(); 2]; 2];
    for (c, &lam) in l.iter().enumerate() {
        let (x, y) = if a[0][1].norm() > 1e-14 * scale || (a[0][0] - lam).norm() > 1e-14 * scale {
            (a[0][1], lam - a[0][0])
        } else {
            (lam - a[1][1], a[1][0])
        };
        let (x, y) = if x.norm() + y.norm() == 0.0 {
            if c == 0 {
                (C64::new(1.0, 0.0), C64::default())
            } else {
                (C64::default(), C64::new(1.0, 0.0))
            }
        } else {
            (x, y)
        };
        let n = (x.norm_sqr() + y.norm_sqr()).sqrt();
        v[0][c] = x / n;
        v[1][c] = y / n;
    }
    if l[0] == l[1] && a[0][1] == C64::default() && a[1][0] == C64::default() {
        v = [[C64::new(1.0, 0.0), C64::default()], [C64::default(), C64::new(1.0, 0.0)]];
    }
    (l, v)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum L2Case {
    /// `(⟨k,ω⟩I + s·𝒜_n) f = i·rhs` on two components.
    Mixed { sign: f64 },
    /// `(⟨k,ω⟩I + s₁𝒜_n⊗I + s₂I⊗𝒜_{n′}) f = i·rhs`, basis `(nn′, nm′, mn′, mm′)`.
    PairPair { s1: f64, s2: f64 },
}

/// Coupled second-type systems, solved in the eigenbasis of the (non-normal) `𝒜` blocks.
/// The floor is applied to the determinant (and to every eigen-divisor).
pub fn solve_l2_coupled(
    kw: f64,
    an: [[f64; 2]; 2],
    an_prime: Option<[[f64; 2]; 2]>,
    rhs: &[C64],
    case: L2Case,
    floor: f64,
) -> Result<Vec<C64>, SolverError> {
    let thr = floor.max(ABSOLUTE_FLOOR);
    let a = to_c2(an);
    let (op, det, divisors, basis): (DMatrix<C64>, C64, Vec<C64>, DMatrix<C64>) = match case {
        L2Case::Mixed { sign } => {
            if rhs.len() != 2 {
                return Err(SolverError::Dimension("mixed case needs 2 components".into()));
            }
            let m = DMatrix::from_fn(2, 2, |r, c| a[r][c] * sign + if r == c { C64::new(kw, 0.0) } else { C64::default() });
            let (l, v) = eig2(a);
            let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
            (m, det, l.iter().map(|x| kw + x * sign).collect(), DMatrix::from_fn(2, 2, |r, c| v[r][c]))
        }
        L2Case::PairPair { s1, s2 } => {
            if rhs.len() != 4 {
                return Err(SolverError::Dimension("pair-pair case needs 4 components".into()));
            }
            let b = to_c2(an_prime.ok_or_else(|| SolverError::Dimension("missing second block".into()))?);
            let mut ak = a;
            for r in 0..2 {
                for c in 0..2 {
                    ak[r][c] = a[r][c] * s1 + if r == c { C64::new(kw, 0.0) } else { C64::default() };
                }
            }
            let bk = [[b[0][0] * s2, b[0][1] * s2], [b[1][0] * s2, b[1][1] * s2]];
            let m = kron_sum(ak, bk, 1.0);
            let det = kron_det_identity(ak, bk, 1.0);
            let (la, va) = eig2(a);
            let (lb, vb) = eig2(b);
            let mut divs = Vec::new();
            for x in la {
                for y in lb {
                    divs.push(kw + x * s1 + y * s2);
                }
            }
            let basis = DMatrix::from_fn(4, 4, |r, c| va[r / 2][c / 2] * vb[r % 2][c % 2]);
            (m, det, divs, basis)
        }
    };
    let kind = if matches!(case, L2Case::Mixed { .. }) { DivisorKind::BlockEigen } else { DivisorKind::Tensor4 };
    if det.norm() < thr {
        return Err(SolverError::SmallDivisor(vec![SmallDivisorReport { divisor_value: det.norm(), threshold: thr, kind, k: Vec::new(), indices: Vec::new() }]));
    }
    let minv = divisors.iter().map(|d| d.norm()).fold(f64::INFINITY, f64::min);
    if minv < thr {
        return Err(SolverError::SmallDivisor(vec![SmallDivisorReport { divisor_value: minv, threshold: thr, kind, k: Vec::new(), indices: Vec::new() }]));
    }
    let r = DVector::from_iterator(rhs.len(), rhs.iter().map(|x| I * x));
    let Some(binv) = basis.clone().try_inverse() else {
        // defective block: dense fallback
        let sol = op.lu().solve(&r).ok_or_else(|| SolverError::SmallDivisor(Vec::new()))?;
        return Ok(sol.iter().copied().collect());
    };
    let mut rh = binv * r;
    for (x, d) in rh.iter_mut().zip(&divisors) {
        *x /= d;
    }
    let f = basis * rh;
    Ok(f.iter().copied().collect())
}

/// Every Melnikov-type condition at one `k`: `|⟨k,ω⟩|` (k ≠ 0), `|⟨k,ω⟩ ± λ̃_i|`,
/// `|⟨k,ω⟩ ± λ̃_i ± λ̃_j|` and `|det|`; returns the instances below `γ/K^τ`.
pub fn divisor_floor(k: &[i64], omega: &[f64], lambdas: &[f64], dets: &[C64], gamma: f64, kk: u32, tau: f64) -> Vec<SmallDivisorReport> {
    let thr = gamma / (kk.max(1) as f64).powf(tau);
    let kw = k_dot(k, omega);
    let mut out = Vec::new();
    let mut push = |v: f64, kind: DivisorKind, idx: Vec<i64>| {
        if v < thr {
            out.push(SmallDivisorReport { divisor_value: v, threshold: thr, kind, k: k.to_vec(), indices: idx });
        }
    };
    if k.iter().any(|&x| x != 0) {
        push(kw.abs(), DivisorKind::Scalar, Vec::new());
    }
    for (i, l) in lambdas.iter().enumerate() {
        for s in [1.0, -1.0] {
            push((kw + s * l).abs(), DivisorKind::BlockEigen, vec![i as i64, s as i64]);
        }
    }
    for (i, li) in lambdas.iter().enumerate() {
        for (j, lj) in lambdas.iter().enumerate().skip(i) {
            for (s1, s2) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                if i == j && s1 != s2 && k.iter().all(|&x| x == 0) {
                    continue;
                }
                push((kw + s1 * li + s2 * lj).abs(), DivisorKind::Tensor4, vec![i as i64, j as i64, s1 as i64, s2 as i64]);
            }
        }
    }
    for (i, d) in dets.iter().enumerate() {
        push(d.norm(), DivisorKind::Tensor4, vec![i as i64]);
    }
    out
}

/// A set of normal variables closed under `{N₂, ·}`.
#[derive(Clone, Debug)]
pub struct Unit {
    pub vars: Vec<Var>,
    /// Common signed integer frequency: `+μ` for `z`, `−μ` for `z̄`.
    pub lam: i64,
    /// `G̃[p][q]`: coefficient of `x_p` in `{N₂,rest, x_q}`.
    pub g: DMatrix<C64>,
    pub eigenvalues: Vec<C64>,
    pub v: DMatrix<C64>,
    pub v_inv: DMatrix<C64>,
    pub hermitian: bool,
    pub conj_unit: usize,
}

#[derive(Clone, Debug)]
pub struct HomologicalSolver {
    pub units: Vec<Unit>,
    pub var_unit: FxHashMap<Var, (usize, usize)>,
    pub eps: f64,
    pub omega_lin: Vec<i64>,
    pub omega_rest: Vec<f64>,
}

/// Solution of one homological step.
#[derive(Clone, Debug)]
pub struct HomologySolution {
    pub f: Series,
    /// `k = 0` terms kept in the normal form: constant, `⟨ω̂, I⟩`, `U × Ū` quadratics.
    pub kept: Series,
    /// Terms with a vanishing divisor and negligible right-hand side.
    pub skipped: usize,
    pub smallest_divisor: f64,
}

fn find(parent: &mut [usize], x: usize) -> usize {
    let mut r = x;
    while parent[r] != r {
        r = parent[r];
    }
    let mut c = x;
    while parent[c] != r {
        let n = parent[c];
        parent[c] = r;
        c = n;
    }
    r
}

impl HomologicalSolver {
    pub fn new(nf: &NormalForm) -> Result<Self, SolverError> {
        let nvars = 2 * nf.modes.len();
        let mut parent: Vec<usize> = (0..nvars).collect();
        // G̃ columns from {N₂,rest, x_q}.
        let mut cols: Vec<Vec<(Var, C64)>> = vec![Vec::new(); nvars];
        let mut quad_by_var: FxHashMap<Var, Vec<(&Mono, C64)>> = FxHashMap::default();
        for (m, c) in &nf.quad_rest.terms {
            if m.w.len() != 2 || m.k.iter().any(|&x| x != 0) || m.l_norm() != 0 {
                continue;
            }
            let mut last = None;
            for &v in &m.w {
                if last != Some(v) {
                    quad_by_var.entry(v).or_default().push((m, *c));
                    last = Some(v);
                }
            }
        }
        for q in 0..nvars {
            let xq = q as Var;
            // {A, z} = −i A_z̄, {A, z̄} = i A_z
            let d = conj_var(xq);
            let sign = if var_is_conj(xq) { I } else { -I };
            if let Some(list) = quad_by_var.get(&d) {
                for &(m, c) in list {
                    let mult = m.mult(d) as f64;
                    let other: Vec<Var> = {
                        let mut w = m.w.clone();
                        let pos = w.iter().position(|&x| x == d).unwrap();
                        w.remove(pos);
                        w.to_vec()
                    };
                    cols[q].push((other[0], sign * c * mult));
                }
            }
        }
        for (q, col) in cols.iter().enumerate() {
            for &(p, c) in col {
                if c.norm() > 0.0 {
                    let (a, b) = (find(&mut parent, q), find(&mut parent, p as usize));
                    parent[a] = b;
                }
            }
        }
        let mut groups: FxHashMap<usize, Vec<Var>> = FxHashMap::default();
        for v in 0..nvars {
            let r = find(&mut parent, v);
            groups.entry(r).or_default().push(v as Var);
        }
        let mut unit_vars: Vec<Vec<Var>> = groups.into_values().collect();
        for u in unit_vars.iter_mut() {
            u.sort_unstable();
        }
        unit_vars.sort();
        let mut var_unit = FxHashMap::default();
        for (ui, u) in unit_vars.iter().enumerate() {
            for (pos, &v) in u.iter().enumerate() {
                var_unit.insert(v, (ui, pos));
            }
        }
        let mut units = Vec::with_capacity(unit_vars.len());
        for (ui, vars) in unit_vars.iter().enumerate() {
            let signed = |v: Var| -> i64 {
                let mu = nf.mu[var_slot(v)];
                if var_is_conj(v) {
                    -mu
                } else {
                    mu
                }
            };
            let lam = signed(vars[0]);
            if vars.iter().any(|&v| signed(v) != lam) {
                return Err(SolverError::MixedUnit(ui));
            }
            let n = vars.len();
            let mut g = DMatrix::zeros(n, n);
            for (qi, &q) in vars.iter().enumerate() {
                for &(p, c) in &cols[q as usize] {
                    let pi = var_unit[&p].1;
                    g[(pi, qi)] += c;
                }
            }
            let all_same = vars.iter().all(|&v| var_is_conj(v) == var_is_conj(vars[0]));
            let conj_unit = var_unit[&conj_var(vars[0])].0;
            let (eigenvalues, v, hermitian) = if all_same {
                // G̃ = ∓iM̃ with M̃ Hermitian
                let factor = if var_is_conj(vars[0]) { -I } else { I };
                let m = g.map(|x| x * factor);
                let bd = diagonalize_block(&m)?;
                let ev: Vec<C64> = bd.lambda.iter().map(|&l| C64::new(l, 0.0) / factor).collect();
                (ev, bd.q, true)
            } else if n == 2 {
                let (l, vv) = eig2([[g[(0, 0)], g[(0, 1)]], [g[(1, 0)], g[(1, 1)]]]);
                (l.to_vec(), DMatrix::from_fn(2, 2, |r, c| vv[r][c]), false)
            } else {
                return Err(SolverError::UnsupportedUnit(n));
            };
            let v_inv = if hermitian { v.adjoint() } else { v.clone().try_inverse().ok_or(SolverError::UnsupportedUnit(n))? };
            units.push(Unit { vars: vars.clone(), lam, g, eigenvalues, v, v_inv, hermitian, conj_unit });
        }
        Ok(HomologicalSolver { units, var_unit, eps: nf.eps, omega_lin: nf.omega_lin.clone(), omega_rest: nf.omega_rest.clone() })
    }

    fn k_parts(&self, k: &[i16]) -> (i64, f64) {
        let lin: i64 = k.iter().zip(&self.omega_lin).map(|(a, b)| *a as i64 * b).sum();
        let rest: f64 = k.iter().zip(&self.omega_rest).map(|(a, b)| *a as f64 * b).sum();
        (lin, rest)
    }

    /// Solves `{N + ℬ + ℬ̄, F} + R = kept`; `floor` is `γ/K^τ`.
    pub fn solve(&self, r: &Series, floor: f64) -> Result<HomologySolution, SolverError> {
        let thr = floor.max(ABSOLUTE_FLOOR);
        let e3 = 1.0 / self.eps.powi(3);
        let rmax = r.max_abs();
        let negligible = 1e-13 * rmax;
        let mut f = r.like();
        let mut kept = r.like();
        let mut reports = Vec::new();
        let mut skipped = 0usize;
        let mut smallest = f64::INFINITY;
        let mut linear: FxHashMap<(Vec<i16>, usize), Vec<(usize, C64)>> = FxHashMap::default();
        let mut quadratic: FxHashMap<(Vec<i16>, usize, usize), Vec<(usize, usize, C64)>> = FxHashMap::default();
        let ks = |m: &Mono| -> Vec<i64> { m.k.iter().map(|&x| x as i64).collect() };
        for (m, &c) in r.sorted_terms() {
            let k0 = m.k.iter().all(|&x| x == 0);
            match m.w.len() {
                0 => {
                    if k0 {
                        kept.add_term(m.clone(), c);
                        continue;
                    }
                    let (lin, rest) = self.k_parts(&m.k);
                    let d = lin as f64 * e3 + rest;
                    if d.abs() < thr {
                        if c.norm() <= negligible {
                            skipped += 1;
                        } else {
                            reports.push(SmallDivisorReport { divisor_value: d.abs(), threshold: thr, kind: DivisorKind::Scalar, k: ks(m), indices: Vec::new() });
                        }
                        continue;
                    }
                    smallest = smallest.min(d.abs());
                    f.add_term(m.clone(), I * c / d);
                }
                1 if m.l_norm() == 0 => {
                    let (u, pos) = self.var_unit[&m.w[0]];
                    linear.entry((m.k.to_vec(), u)).or_default().push((pos, c));
                }
                2 if m.l_norm() == 0 => {
                    let (u1, p1) = self.var_unit[&m.w[0]];
                    let (u2, p2) = self.var_unit[&m.w[1]];
                    let ((ua, pa), (ub, pb)) = if (u1, p1) <= (u2, p2) { ((u1, p1), (u2, p2)) } else { ((u2, p2), (u1, p1)) };
                    if k0 && self.units[ua].conj_unit == ub {
                        kept.add_term(m.clone(), c);
                        continue;
                    }
                    quadratic.entry((m.k.to_vec(), ua, ub)).or_default().push((pa, pb, c));
                }
                _ => {
                    return Err(SolverError::Dimension(format!("term outside the truncation shape: |w| = {}, |l| = {}", m.w.len(), m.l_norm())));
                }
            }
        }
        let mut linear: Vec<_> = linear.into_iter().collect();
        linear.sort_by(|a, b| a.0.cmp(&b.0));
        for ((k, u), entries) in linear {
            let unit = &self.units[u];
            let n = unit.vars.len();
            let mut rv = DVector::zeros(n);
            for (pos, c) in entries {
                rv[pos] += c;
            }
            let (lin, rest) = self.k_parts(&k);
            let l = lin - unit.lam;
            let rh = &unit.v_inv * rv;
            let mut fh = DVector::zeros(n);
            for p in 0..n {
                let d = I * (l as f64 * e3 + rest) + unit.eigenvalues[p];
                if d.norm() < thr {
                    if rh[p].norm() <= negligible {
                        skipped += 1;
                    } else {
                        reports.push(SmallDivisorReport {
                            divisor_value: d.norm(),
                            threshold: thr,
                            kind: DivisorKind::BlockEigen,
                            k: k.iter().map(|&x| x as i64).collect(),
                            indices: vec![u as i64, p as i64],
                        });
                    }
                    continue;
                }
                smallest = smallest.min(d.norm());
                fh[p] = -rh[p] / d;
            }
            let fv = &unit.v * fh;
            for p in 0..n {
                if fv[p] != C64::default() {
                    f.add_term(Mono::new(&k, &vec![0; r.b], &[unit.vars[p]]), fv[p]);
                }
            }
        }
        let mut quadratic: Vec<_> = quadratic.into_iter().collect();
        quadratic.sort_by(|a, b| a.0.cmp(&b.0));
        for ((k, ua, ub), entries) in quadratic {
            let (u1, u2) = (&self.units[ua], &self.units[ub]);
            let (n1, n2) = (u1.vars.len(), u2.vars.len());
            let mut rm = DMatrix::zeros(n1, n2);
            let same = ua == ub;
            for (pa, pb, c) in entries {
                if same && pa != pb {
                    rm[(pa, pb)] += c * 0.5;
                    rm[(pb, pa)] += c * 0.5;
                } else {
                    rm[(pa, pb)] += c;
                }
            }
            let (lin, rest) = self.k_parts(&k);
            let l = lin - u1.lam - u2.lam;
            let rh = &u1.v_inv * rm * u2.v_inv.transpose();
            let mut fh = DMatrix::zeros(n1, n2);
            for p in 0..n1 {
                for q in 0..n2 {
                    let d = I * (l as f64 * e3 + rest) + u1.eigenvalues[p] + u2.eigenvalues[q];
                    if d.norm() < thr {
                        if rh[(p, q)].norm() <= negligible {
                            skipped += 1;
                        } else {
                            reports.push(SmallDivisorReport {
                                divisor_value: d.norm(),
                                threshold: thr,
                                kind: DivisorKind::Tensor4,
                                k: k.iter().map(|&x| x as i64).collect(),
                                indices: vec![ua as i64, ub as i64, p as i64, q as i64],
                            });
                        }
                        continue;
                    }
                    smallest = smallest.min(d.norm());
                    fh[(p, q)] = -rh[(p, q)] / d;
                }
            }
            let fm = &u1.v * fh * u2.v.transpose();
            let zl = vec![0u8; r.b];
            for p in 0..n1 {
                for q in 0..n2 {
                    if same && q < p {
                        continue;
                    }
                    let coef = if same && p != q { fm[(p, q)] + fm[(q, p)] } else { fm[(p, q)] };
                    if coef != C64::default() {
                        let mut w = WVec::new();
                        w.push(u1.vars[p]);
                        w.push(u2.vars[q]);
                        w.sort_unstable();
                        f.add_term(Mono::new(&k, &zl, &w), coef);
                    }
                }
            }
        }
        if !reports.is_empty() {
            return Err(SolverError::SmallDivisor(reports));
        }
        f.terms.retain(|_, c| c.norm() > 0.0);
        Ok(HomologySolution { f, kept, skipped, smallest_divisor: smallest })
    }
}

/// `{N + ℬ + ℬ̄, F} + R − kept` computed through the exact integer parts of `N`.
pub fn homological_residual(nf: &NormalForm, sol: &HomologySolution, r: &Series) -> Series {
    let mut res = nf.bracket_with(&sol.f);
    res.bounds = r.bounds;
    let mut out = r.like();
    out.add_assign(&res);
    out.add_assign(r);
    out.add_scaled(&sol.kept, C64::new(-1.0, 0.0));
    out.terms.retain(|_, c| c.norm() > 0.0);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cm(rows: &[&[f64]]) -> DMatrix<C64> {
        real_matrix(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
    }

    #[test]
    fn scalar_examples() {
        let f = solve_scalar(&[1, 0], &[2.0, std::f64::consts::PI], C64::new(1.0, 0.0), 1e-8).unwrap();
        assert!((f - I * 0.5).norm() < 1e-15);
        assert_eq!(solve_scalar(&[1, 0], &[2.0, 1.0], C64::default(), 1e-8).unwrap(), C64::default());
        assert!(matches!(solve_scalar(&[1, -1], &[1.0, 1.0 + 1e-10], C64::new(1.0, 0.0), 1e-6), Err(SolverError::SmallDivisor(_))));
        assert_eq!(solve_scalar(&[0, 0], &[1.0, 1.0], C64::new(1.0, 0.0), 1e-6), Err(SolverError::ZeroK));
    }

    #[test]
    fn diagonalize_examples() {
        let a = cm(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let bd = diagonalize_block(&a).unwrap();
        assert!((bd.lambda[0] + 1.0).abs() < 1e-14 && (bd.lambda[1] - 1.0).abs() < 1e-14);
        assert!(bd.residual(&a) < 1e-14);
        let d = cm(&[&[3.0, 0.0], &[0.0, -1.0]]);
        let bd = diagonalize_block(&d).unwrap();
        assert_eq!(bd.lambda, vec![-1.0, 3.0]);
        let bad = cm(&[&[0.0, 1.0], &[0.5, 0.0]]);
        assert!(matches!(diagonalize_block(&bad), Err(SolverError::Asymmetric { .. })));
    }

    #[test]
    fn block_vector_diagonal_case() {
        let a = cm(&[&[1.0, 0.0], &[0.0, 2.0]]);
        let rhs = DVector::from_vec(vec![C64::new(1.0, 0.0), C64::new(3.0, 0.0)]);
        let f = solve_block_vector(5.0, &a, &rhs, -1.0, 1e-8).unwrap();
        assert!((f[0] - I * 0.25).norm() < 1e-15);
        assert!((f[1] - I * 1.0).norm() < 1e-15);
        assert!(solve_block_vector(2.0, &a, &rhs, -1.0, 1e-8).is_err());
    }

    #[test]
    fn sylvester_example() {
        let a = cm(&[&[2.0, 0.0], &[0.0, 3.0]]);
        let b = cm(&[&[1.0]]);
        let c = DMatrix::from_element(2, 1, C64::new(1.0, 0.0));
        let x = solve_sylvester(0.0, &a, &b, &c, (1.0, -1.0), 1e-8).unwrap();
        assert!((x[(0, 0)] - I).norm() < 1e-15);
        assert!((x[(1, 0)] - I * 0.5).norm() < 1e-15);
        let z = solve_sylvester(0.0, &a, &b, &DMatrix::zeros(2, 1), (1.0, -1.0), 1e-8).unwrap();
        assert!(z.iter().all(|x| x.norm() == 0.0));
    }

    #[test]
    fn kron_identity_units() {
        let id = to_c2([[1.0, 0.0], [0.0, 1.0]]);
        assert!((kron_det_identity(id, id, 1.0) - 16.0).norm() < 1e-14);
        assert!(kron_det_identity(id, id, -1.0).norm() < 1e-14);
    }

    #[test]
    fn l2_coupled_zero_rhs_and_hyperbolic() {
        let a = [[0.01, -0.05], [0.05, -0.012]];
        let f = solve_l2_coupled(0.0, a, None, &[C64::default(); 2], L2Case::Mixed { sign: 1.0 }, 1e-10).unwrap();
        assert!(f.iter().all(|x| x.norm() == 0.0));
        let rhs = [C64::new(1.0, 0.0), C64::new(0.0, 1.0), C64::new(0.5, 0.0), C64::new(-1.0, 0.2)];
        let f = solve_l2_coupled(0.0, a, Some(a), &rhs, L2Case::PairPair { s1: 1.0, s2: 1.0 }, 1e-10).unwrap();
        let m = kron_sum(to_c2(a), to_c2(a), 1.0);
        let fv = DVector::from_vec(f);
        let res = m * fv - DVector::from_iterator(4, rhs.iter().map(|x| I * x));
        assert!(res.norm() < 1e-10);
    }

    #[test]
    fn divisor_floor_flags() {
        assert!(divisor_floor(&[1, -1], &[1.0, 1.0], &[0.5], &[], 0.0, 10, 1.0).is_empty());
        let r = divisor_floor(&[1, -1], &[1.0, 1.0], &[], &[], 1e-4, 10, 1.0);
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].kind, DivisorKind::Scalar);
    }
}
