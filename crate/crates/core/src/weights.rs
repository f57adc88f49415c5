//! Spatial weight construction and blockwise operators on stacked L-vectors.

use std::sync::OnceLock;

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Drivers closer than this (Euclidean distance) are treated as coincident.
pub const COINCIDE_EPS: f64 = 1e-10;

const ROW_SUM_TOL: f64 = 1e-12;

/// Lattice contiguity rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Contiguity {
    /// Shared edges only.
    Rook,
    /// Shared edges or corners.
    Queen,
}

impl std::str::FromStr for Contiguity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rook" => Ok(Self::Rook),
            "queen" => Ok(Self::Queen),
            other => Err(Error::InvalidInput(format!("unknown contiguity scheme '{other}'"))),
        }
    }
}

impl std::fmt::Display for Contiguity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Rook => "rook",
            Self::Queen => "queen",
        })
    }
}

/// Whether composed weights are row-normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    #[default]
    Row,
    None,
}

/// 0/1 contiguity matrix of a sqrt(n) x sqrt(n) lattice, units numbered row by row.
pub fn grid_contiguity(n: usize, scheme: Contiguity) -> Result<DMatrix<f64>> {
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n || side < 2 {
        return Err(Error::NotPerfectSquare(n));
    }
    let mut w = DMatrix::zeros(n, n);
    for r in 0..side {
        for c in 0..side {
            let i = r * side + c;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    if scheme == Contiguity::Rook && dr != 0 && dc != 0 {
                        continue;
                    }
                    let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                    if rr < 0 || cc < 0 || rr >= side as i64 || cc >= side as i64 {
                        continue;
                    }
                    w[(i, rr as usize * side + cc as usize)] = 1.0;
                }
            }
        }
    }
    Ok(w)
}

/// Inverse-distance kernel 1/|z_i - z_j| with a zero diagonal.
pub fn economic_kernel(z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !z.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("weight drivers".into()));
    }
    let n = z.nrows();
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let d = (z.row(i) - z.row(j)).norm();
            if d < COINCIDE_EPS {
                return Err(Error::CoincidentDrivers { i, j, distance: d });
            }
            w[(i, j)] = 1.0 / d;
            w[(j, i)] = 1.0 / d;
        }
    }
    Ok(w)
}

fn check_nonnegative(w: &DMatrix<f64>) -> Result<()> {
    for j in 0..w.ncols() {
        for i in 0..w.nrows() {
            let v = w[(i, j)];
            if v.is_nan() {
                return Err(Error::NonFinite("weight matrix".into()));
            }
            if v < 0.0 {
                return Err(Error::NegativeWeight { i, j, value: v });
            }
        }
    }
    Ok(())
}

/// Divides each row with a positive sum by that sum; zero rows stay zero.
pub fn row_normalize(w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_nonnegative(w)?;
    let mut out = w.clone();
    let mut buf = Vec::with_capacity(w.ncols());
    for i in 0..w.nrows() {
        // sorted summation makes the result invariant to unit relabeling
        buf.clear();
        buf.extend(w.row(i).iter().copied());
        buf.sort_by(f64::total_cmp);
        let s: f64 = buf.iter().sum();
        if s > 0.0 {
            out.row_mut(i).scale_mut(1.0 / s);
        }
    }
    Ok(out)
}

/// Row-normalized Hadamard product of a contiguity mask and a kernel.
pub fn compose_weights(wd: &DMatrix<f64>, we: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if wd.shape() != we.shape() || wd.nrows() != wd.ncols() {
        return Err(Error::Dimension(format!(
            "mask is {:?} but kernel is {:?}",
            wd.shape(),
            we.shape()
        )));
    }
    let mut h = wd.component_mul(we);
    h.fill_diagonal(0.0);
    row_normalize(&h)
}

/// Per-period weights W_0, ..., W_T.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSequence {
    n: usize,
    initial: Option<DMatrix<f64>>,
    periods: Vec<DMatrix<f64>>,
}

impl WeightSequence {
    /// Wraps user-supplied matrices after checking the weight invariants.
    pub fn new(initial: Option<DMatrix<f64>>, periods: Vec<DMatrix<f64>>) -> Result<Self> {
        let n = periods
            .first()
            .map(|w| w.nrows())
            .ok_or_else(|| Error::InvalidInput("weight sequence needs at least one period".into()))?;
        for w in initial.iter().chain(periods.iter()) {
            if w.shape() != (n, n) {
                return Err(Error::Dimension(format!(
                    "weight matrix is {:?}, expected {n}x{n}",
                    w.shape()
                )));
            }
            if !w.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("weight matrix".into()));
            }
            check_nonnegative(w)?;
            for i in 0..n {
                if w[(i, i)] != 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "weight matrix has nonzero diagonal at unit {i}"
                    )));
                }
            }
        }
        Ok(Self {
            n,
            initial,
            periods,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of sample periods T (excluding t = 0).
    pub fn periods(&self) -> usize {
        self.periods.len()
    }

    /// W_t for t = 0..=T; `None` for t = 0 when no initial weights were supplied.
    pub fn get(&self, t: usize) -> Option<&DMatrix<f64>> {
        if t == 0 {
            self.initial.as_ref()
        } else {
            self.periods.get(t - 1)
        }
    }

    pub fn initial(&self) -> Option<&DMatrix<f64>> {
        self.initial.as_ref()
    }

    /// W_1, ..., W_T.
    pub fn sample(&self) -> &[DMatrix<f64>] {
        &self.periods
    }

    /// Number of matrices held, T + 1 when W_0 is present.
    pub fn len(&self) -> usize {
        self.periods.len() + usize::from(self.initial.is_some())
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// True when every row sums to 0 or 1 within 1e-12.
    pub fn is_row_normalized(&self) -> bool {
        self.initial.iter().chain(self.periods.iter()).all(|w| {
            (0..w.nrows()).all(|i| {
                let s: f64 = w.row(i).sum();
                s == 0.0 || (s - 1.0).abs() <= ROW_SUM_TOL
            })
        })
    }

    /// C_w = max over periods of the maximum absolute row sum.
    pub fn row_sum_bound(&self) -> f64 {
        self.periods
            .iter()
            .chain(self.initial.iter())
            .map(|w| {
                (0..w.nrows())
                    .map(|i| w.row(i).iter().map(|v| v.abs()).sum::<f64>())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    }

    /// Same sequence with the units relabeled: W -> P W P' where unit i becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.n;
        if perm.len() != n {
            return Err(Error::Dimension("permutation length differs from n".into()));
        }
        let apply = |w: &DMatrix<f64>| {
            let mut out = DMatrix::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    out[(perm[i], perm[j])] = w[(i, j)];
                }
            }
            out
        };
        Ok(Self {
            n,
            initial: self.initial.as_ref().map(apply),
            periods: self.periods.iter().map(apply).collect(),
        })
    }

    /// Restriction to the first `periods` sample periods.
    pub fn truncated(&self, periods: usize) -> Self {
        Self {
            n: self.n,
            initial: self.initial.clone(),
            periods: self.periods[..periods.min(self.periods.len())].to_vec(),
        }
    }
}

/// W_t = compose_weights(Wd, kernel(Z_t)) for t = 0..=T, optionally without normalization.
pub fn build_weight_sequence(
    z0: &DMatrix<f64>,
    z: &[DMatrix<f64>],
    wd: &DMatrix<f64>,
    normalization: Normalization,
) -> Result<WeightSequence> {
    let one = |zt: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let we = economic_kernel(zt)?;
        match normalization {
            Normalization::Row => compose_weights(wd, &we),
            Normalization::None => {
                if wd.shape() != we.shape() {
                    return Err(Error::Dimension("mask and kernel shapes differ".into()));
                }
                let mut h = wd.component_mul(&we);
                h.fill_diagonal(0.0);
                check_nonnegative(&h)?;
                Ok(h)
            }
        }
    };
    let initial = one(z0)?;
    let periods = z.iter().map(one).collect::<Result<Vec<_>>>()?;
    WeightSequence::new(Some(initial), periods)
}

/// One of the block operators on stacked L-vectors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BlockOperator {
    /// blockdiag(W_1, ..., W_T).
    W1,
    /// I_n on the first block subdiagonal.
    W2,
    /// W_1, ..., W_{T-1} on the first block subdiagonal.
    W3,
    /// S_L(eta) = I - lambda W1 - gamma W2 - rho W3.
    S { lambda: f64, gamma: f64, rho: f64 },
}

impl BlockOperator {
    pub fn s(eta: [f64; 3]) -> Self {
        Self::S {
            lambda: eta[0],
            gamma: eta[1],
            rho: eta[2],
        }
    }
}

fn check_len(v_len: usize, n: usize, periods: usize) -> Result<()> {
    if v_len != n * periods {
        return Err(Error::Dimension(format!(
            "vector has length {v_len}, expected nT = {}",
            n * periods
        )));
    }
    Ok(())
}

/// Applies a block operator to an L-vector blockwise.
pub fn apply_block(op: BlockOperator, v: &DVector<f64>, seq: &WeightSequence) -> Result<DVector<f64>> {
    let (n, periods) = (seq.n(), seq.periods());
    check_len(v.len(), n, periods)?;
    let w = seq.sample();
    let mut out = DVector::zeros(v.len());
    match op {
        BlockOperator::W1 => {
            for t in 0..periods {
                out.rows_mut(t * n, n).copy_from(&(&w[t] * v.rows(t * n, n)));
            }
        }
        BlockOperator::W2 => {
            for t in 1..periods {
                out.rows_mut(t * n, n).copy_from(&v.rows((t - 1) * n, n));
            }
        }
        BlockOperator::W3 => {
            for t in 1..periods {
                out.rows_mut(t * n, n)
                    .copy_from(&(&w[t - 1] * v.rows((t - 1) * n, n)));
            }
        }
        BlockOperator::S { lambda, gamma, rho } => {
            out.copy_from(v);
            for t in 0..periods {
                let mut blk = out.rows_mut(t * n, n);
                blk -= &w[t] * v.rows(t * n, n) * lambda;
                if t > 0 {
                    let prev = v.rows((t - 1) * n, n);
                    blk -= prev * gamma;
                    blk -= &w[t - 1] * prev * rho;
                }
            }
        }
    }
    Ok(out)
}

/// Solves S_L(eta) x = b by forward block substitution.
pub fn solve_s(eta: [f64; 3], b: &DVector<f64>, seq: &WeightSequence) -> Result<DVector<f64>> {
    let (n, periods) = (seq.n(), seq.periods());
    check_len(b.len(), n, periods)?;
    let [lambda, gamma, rho] = eta;
    let w = seq.sample();
    let mut x = DVector::zeros(b.len());
    for t in 0..periods {
        let mut rhs = b.rows(t * n, n).into_owned();
        if t > 0 {
            let prev = x.rows((t - 1) * n, n).into_owned();
            rhs += &prev * gamma + &w[t - 1] * &prev * rho;
        }
        let a = DMatrix::identity(n, n) - &w[t] * lambda;
        let sol = a
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Singular(format!("I - lambda W_{}", t + 1)))?;
        x.rows_mut(t * n, n).copy_from(&sol);
    }
    Ok(x)
}

/// Assumption-6 style stability check |lambda| C_w + |rho| + |gamma| C_w < 1.
pub fn spectral_guard(eta: [f64; 3], seq: &WeightSequence) -> bool {
    let cw = seq.row_sum_bound();
    let [lambda, gamma, rho] = eta;
    lambda.abs() * cw + rho.abs() + gamma.abs() * cw < 1.0
}

/// Spectra of W_1..W_T for fast log-determinants and trace functions of lambda,
/// computed on first use.
#[derive(Debug, Clone, Default)]
pub struct Spectrum {
    eig: OnceLock<Option<Vec<Vec<Complex<f64>>>>>,
}

impl Spectrum {
    pub fn new(_seq: &WeightSequence) -> Self {
        Self::default()
    }

    fn eigenvalues(&self, seq: &WeightSequence) -> Option<&Vec<Vec<Complex<f64>>>> {
        self.eig
            .get_or_init(|| {
                let mut all = Vec::with_capacity(seq.periods());
                for w in seq.sample() {
                    let schur = nalgebra::Schur::try_new(w.clone(), 1e-14, 10_000)?;
                    all.push(schur.complex_eigenvalues().iter().copied().collect());
                }
                Some(all)
            })
            .as_ref()
    }

    /// Whether eigenvalues were obtained; otherwise evaluation falls back to LU.
    pub fn has_eigenvalues(&self, seq: &WeightSequence) -> bool {
        self.eigenvalues(seq).is_some()
    }

    /// sum_t ln |det(I - lambda W_t)|, erroring if any determinant is not positive.
    pub fn log_det(&self, lambda: f64, seq: &WeightSequence) -> Result<f64> {
        if lambda == 0.0 {
            return Ok(0.0);
        }
        match self.eigenvalues(seq) {
            Some(eig) => {
                let mut total = 0.0;
                for (t, mus) in eig.iter().enumerate() {
                    for mu in mus {
                        let f = Complex::new(1.0, 0.0) - mu * lambda;
                        if f.norm() < 1e-12 || (mu.im.abs() < 1e-10 && f.re <= 0.0) {
                            return Err(Error::Singular(format!(
                                "I - lambda W_{} at lambda = {lambda}",
                                t + 1
                            )));
                        }
                        total += f.norm().ln();
                    }
                }
                Ok(total)
            }
            None => log_det_lu(lambda, seq),
        }
    }

    /// (sum_t tr(W_t A_t), sum_t tr((W_t A_t)^2)) with A_t = (I - lambda W_t)^{-1}.
    pub fn resolvent_traces(&self, lambda: f64, seq: &WeightSequence) -> Result<(f64, f64)> {
        if lambda == 0.0 {
            let (mut t1, mut t2) = (0.0, 0.0);
            for w in seq.sample() {
                t1 += w.trace();
                t2 += w.component_mul(&w.transpose()).sum();
            }
            return Ok((t1, t2));
        }
        match self.eigenvalues(seq) {
            Some(eig) => {
                let (mut t1, mut t2) = (0.0, 0.0);
                for mus in eig {
                    for mu in mus {
                        let g = mu / (Complex::new(1.0, 0.0) - mu * lambda);
                        t1 += g.re;
                        t2 += (g * g).re;
                    }
                }
                Ok((t1, t2))
            }
            None => {
                let (mut t1, mut t2) = (0.0, 0.0);
                for (t, w) in seq.sample().iter().enumerate() {
                    let g = w * resolvent(w, lambda, t + 1)?;
                    t1 += g.trace();
                    t2 += (&g * &g).trace();
                }
                Ok((t1, t2))
            }
        }
    }
}

/// (I - lambda W)^{-1}; `t` labels the period in error messages.
pub fn resolvent(w: &DMatrix<f64>, lambda: f64, t: usize) -> Result<DMatrix<f64>> {
    let n = w.nrows();
    (DMatrix::identity(n, n) - w * lambda)
        .try_inverse()
        .ok_or_else(|| Error::Singular(format!("I - lambda W_{t}")))
}

fn log_det_lu(lambda: f64, seq: &WeightSequence) -> Result<f64> {
    let mut total = 0.0;
    for (t, w) in seq.sample().iter().enumerate() {
        let n = w.nrows();
        let det = (DMatrix::identity(n, n) - w * lambda).lu().determinant();
        if !(det > 0.0) {
            return Err(Error::Singular(format!(
                "I - lambda W_{} at lambda = {lambda} (det = {det})",
                t + 1
            )));
        }
        total += det.ln();
    }
    Ok(total)
}

/// ln |S_L(eta)| = sum_t ln |I - lambda W_t|.
pub fn log_det_s(eta: [f64; 3], seq: &WeightSequence) -> Result<f64> {
    log_det_lu(eta[0], seq)
}

/// tr(W_1L^2) = sum_t sum_ij w_ij,t w_ji,t.
pub fn trace_w1_squared(seq: &WeightSequence) -> f64 {
    seq.sample()
        .iter()
        .map(|w| w.component_mul(&w.transpose()).sum())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn degrees(w: &DMatrix<f64>) -> Vec<f64> {
        (0..w.nrows()).map(|i| w.row(i).sum()).collect()
    }

    #[test]
    fn rook_and_queen_degrees_on_three_by_three() {
        let rook = grid_contiguity(9, Contiguity::Rook).unwrap();
        assert_eq!(degrees(&rook), vec![2., 3., 2., 3., 4., 3., 2., 3., 2.]);
        let queen = grid_contiguity(9, Contiguity::Queen).unwrap();
        assert_eq!(degrees(&queen), vec![3., 5., 3., 5., 8., 5., 3., 5., 3.]);
        for w in [&rook, &queen] {
            assert_eq!(w, &w.transpose());
            assert!((0..9).all(|i| w[(i, i)] == 0.0));
        }
    }

    #[test]
    fn non_square_grid_fails() {
        assert_eq!(
            grid_contiguity(10, Contiguity::Rook).unwrap_err(),
            Error::NotPerfectSquare(10)
        );
    }

    #[test]
    fn kernel_scalar_and_vector_drivers() {
        let z = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 4.0]);
        let w = economic_kernel(&z).unwrap();
        assert_abs_diff_eq!(w[(0, 1)], 1.0);
        assert_abs_diff_eq!(w[(0, 2)], 1.0 / 3.0);
        assert_abs_diff_eq!(w[(1, 2)], 0.5);
        assert_eq!(w, w.transpose());

        let z = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let w = economic_kernel(&z).unwrap();
        assert_abs_diff_eq!(w[(0, 1)], 1.0 / 2f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(w[(0, 2)], 1.0);
        assert_abs_diff_eq!(w[(1, 2)], 1.0);
    }

    #[test]
    fn coincident_drivers_fail() {
        let z = DMatrix::from_column_slice(2, 1, &[0.0, 0.0]);
        assert!(matches!(
            economic_kernel(&z),
            Err(Error::CoincidentDrivers { i: 0, j: 1, .. })
        ));
    }

    #[test]
    fn row_normalize_cases() {
        let w = DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 3.0, 0.0]);
        assert_eq!(
            row_normalize(&w).unwrap(),
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])
        );
        let w = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0]);
        assert_eq!(row_normalize(&w).unwrap(), w);
        let w = DMatrix::from_row_slice(3, 3, &[0., 1., 1., 3., 0., 1., 2., 3., 0.]);
        let r = row_normalize(&w).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(r.row(i).sum(), 1.0, epsilon = 1e-15);
        }
        let bad = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        assert!(matches!(row_normalize(&bad), Err(Error::NegativeWeight { .. })));
    }

    #[test]
    fn compose_cases() {
        let z = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 4.0]);
        let we = economic_kernel(&z).unwrap();
        let ones = DMatrix::from_fn(3, 3, |i, j| if i == j { 0.0 } else { 1.0 });
        assert_abs_diff_eq!(
            compose_weights(&ones, &we).unwrap(),
            row_normalize(&we).unwrap(),
            epsilon = 1e-15
        );
        assert_eq!(
            compose_weights(&DMatrix::zeros(3, 3), &we).unwrap(),
            DMatrix::zeros(3, 3)
        );
        assert!(compose_weights(&DMatrix::zeros(2, 2), &we).is_err());

        let wd = grid_contiguity(4, Contiguity::Rook).unwrap();
        let z = DMatrix::from_column_slice(4, 1, &[1.0, 2.0, 3.0, 4.0]);
        let w = compose_weights(&wd, &economic_kernel(&z).unwrap()).unwrap();
        // unit 0 neighbours 1 (d=1) and 2 (d=2): weights 2/3, 1/3
        assert_abs_diff_eq!(w[(0, 1)], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(w[(0, 2)], 1.0 / 3.0, epsilon = 1e-15);
        for i in 0..4 {
            assert_abs_diff_eq!(w.row(i).sum(), 1.0, epsilon = 1e-15);
            for j in 0..4 {
                if wd[(i, j)] == 0.0 {
                    assert_eq!(w[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn sequence_shapes() {
        let wd = grid_contiguity(4, Contiguity::Queen).unwrap();
        let z0 = DMatrix::from_column_slice(4, 1, &[1.0, 2.0, 3.5, 5.0]);
        let seq = build_weight_sequence(&z0, &[z0.clone()], &wd, Normalization::Row).unwrap();
        assert_eq!(seq.len(), 2);
        assert_eq!(seq.get(0), seq.get(1));
        let seq = build_weight_sequence(&z0, &vec![z0.clone(); 3], &wd, Normalization::Row).unwrap();
        assert!((1..=3).all(|t| seq.get(t) == seq.get(0)));
    }

    #[test]
    fn two_unit_log_det() {
        let w = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let seq = WeightSequence::new(None, vec![w]).unwrap();
        assert_eq!(log_det_s([0.0, 0.3, 0.2], &seq).unwrap(), 0.0);
        assert_abs_diff_eq!(
            log_det_s([0.5, 0.0, 0.0], &seq).unwrap(),
            0.75f64.ln(),
            epsilon = 1e-15
        );
        let spec = Spectrum::new(&seq);
        assert_abs_diff_eq!(spec.log_det(0.5, &seq).unwrap(), 0.75f64.ln(), epsilon = 1e-14);
        let (t1, _) = spec.resolvent_traces(0.5, &seq).unwrap();
        assert_abs_diff_eq!(t1, 4.0 / 3.0, epsilon = 1e-14);
    }

    fn random_sequence(n: usize, periods: usize, seed: u64) -> WeightSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let side = (n as f64).sqrt() as usize;
        let wd = if side * side == n {
            grid_contiguity(n, Contiguity::Queen).unwrap()
        } else {
            DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { 1.0 })
        };
        let z0 = DMatrix::from_fn(n, 1, |_, _| rng.random::<f64>());
        let z: Vec<_> = (0..periods)
            .map(|_| DMatrix::from_fn(n, 1, |_, _| rng.random::<f64>()))
            .collect();
        build_weight_sequence(&z0, &z, &wd, Normalization::Row).unwrap()
    }

    fn dense(op: BlockOperator, seq: &WeightSequence) -> DMatrix<f64> {
        let (n, t) = (seq.n(), seq.periods());
        let mut m = DMatrix::zeros(n * t, n * t);
        for c in 0..n * t {
            let mut e = DVector::zeros(n * t);
            e[c] = 1.0;
            m.set_column(c, &apply_block(op, &e, seq).unwrap());
        }
        m
    }

    #[test]
    fn block_log_det_matches_dense_assembly() {
        let seq = random_sequence(6, 3, 11);
        let eta = [0.4, 0.3, -0.2];
        let s = dense(BlockOperator::s(eta), &seq);
        let dense_ld = s.clone().lu().determinant().ln();
        assert_abs_diff_eq!(log_det_s(eta, &seq).unwrap(), dense_ld, epsilon = 1e-10);
        let spec = Spectrum::new(&seq);
        assert!(spec.has_eigenvalues(&seq));
        assert_abs_diff_eq!(spec.log_det(0.4, &seq).unwrap(), dense_ld, epsilon = 1e-10);

        let b = DVector::from_fn(18, |i, _| (i as f64 * 0.37).sin());
        let x = solve_s(eta, &b, &seq).unwrap();
        assert_abs_diff_eq!(&s * x, b, epsilon = 1e-12);

        let w1 = dense(BlockOperator::W1, &seq);
        let ga = &w1 * s.try_inverse().unwrap();
        let (t1, t2) = spec.resolvent_traces(0.4, &seq).unwrap();
        assert_abs_diff_eq!(t1, ga.trace(), epsilon = 1e-10);
        assert_abs_diff_eq!(t2, (&ga * &ga).trace(), epsilon = 1e-10);
        assert_abs_diff_eq!(trace_w1_squared(&seq), (&w1 * &w1).trace(), epsilon = 1e-12);
    }

    #[test]
    fn singular_resolvent_detected() {
        let w = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let seq = WeightSequence::new(None, vec![w]).unwrap();
        assert!(matches!(log_det_s([1.0, 0.0, 0.0], &seq), Err(Error::Singular(_))));
        assert!(Spectrum::new(&seq).log_det(1.0, &seq).is_err());
    }

    #[test]
    fn weight_sequence_rejects_bad_matrices() {
        let diag = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!(WeightSequence::new(None, vec![diag]).is_err());
        let neg = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 0.0, 0.0]);
        assert!(WeightSequence::new(None, vec![neg]).is_err());
    }

    proptest! {
        #[test]
        fn generated_sequences_satisfy_invariants(seed in 0u64..1000, periods in 1usize..4) {
            let seq = random_sequence(9, periods, seed);
            prop_assert!(seq.is_row_normalized());
            for t in 0..=periods {
                let w = seq.get(t).unwrap();
                for i in 0..9 {
                    prop_assert_eq!(w[(i, i)], 0.0);
                    prop_assert!(w.row(i).iter().all(|v| *v >= 0.0));
                }
            }
            prop_assert!(spectral_guard([0.3, 0.3, 0.3], &seq));
            prop_assert!(!spectral_guard([0.5, 0.3, 0.3], &seq));
        }

        #[test]
        fn composition_commutes_with_relabeling(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 9;
            let wd = grid_contiguity(n, Contiguity::Queen).unwrap();
            let z = DMatrix::from_fn(n, 1, |_, _| rng.random::<f64>());
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                let j = rng.random_range(0..=i);
                perm.swap(i, j);
            }
            let w = compose_weights(&wd, &economic_kernel(&z).unwrap()).unwrap();
            let mut zp = z.clone();
            let mut wdp = wd.clone();
            for i in 0..n {
                zp[(perm[i], 0)] = z[(i, 0)];
                for j in 0..n {
                    wdp[(perm[i], perm[j])] = wd[(i, j)];
                }
            }
            let wp = compose_weights(&wdp, &economic_kernel(&zp).unwrap()).unwrap();
            let seq = WeightSequence::new(None, vec![w]).unwrap().permuted(&perm).unwrap();
            prop_assert_eq!(seq.get(1).unwrap(), &wp);
        }

        #[test]
        fn log_det_matches_dense(seed in 0u64..200, lam in -0.9f64..0.9) {
            let seq = random_sequence(4, 3, seed);
            let s = dense(BlockOperator::s([lam, 0.1, 0.1]), &seq);
            let d = s.lu().determinant().ln();
            prop_assert!((log_det_s([lam, 0.1, 0.1], &seq).unwrap() - d).abs() < 1e-10);
            prop_assert!((Spectrum::new(&seq).log_det(lam, &seq).unwrap() - d).abs() < 1e-10);
        }
    }
}
