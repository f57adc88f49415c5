//! Panel data model, parameter layout and the two-way within projection.
//!
//! Every L-vector (L = nT) in this crate is stacked period-major: the n units
//! of period 1, then the n units of period 2, and so on. Periods are indexed
//! 1..=T in the model; `t = 0` refers to the observed initial values.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Observed panel: outcome, regressors, weight drivers and initial values.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelData {
    n: usize,
    periods: usize,
    /// n x T outcome matrix, column t-1 holds period t.
    y: DMatrix<f64>,
    y0: Option<DVector<f64>>,
    x1: Vec<DMatrix<f64>>,
    x2: Vec<DMatrix<f64>>,
    z: Vec<DMatrix<f64>>,
    z0: DMatrix<f64>,
    w0: Option<DMatrix<f64>>,
}

fn check_finite(name: &str, m: &DMatrix<f64>) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(name.to_string()))
    }
}

impl PanelData {
    /// Builds a validated panel.
    ///
    /// `y` is n x T; `x1`, `x2` and `z` hold one matrix per period.
    pub fn new(
        y: DMatrix<f64>,
        y0: Option<DVector<f64>>,
        x1: Vec<DMatrix<f64>>,
        x2: Vec<DMatrix<f64>>,
        z: Vec<DMatrix<f64>>,
        z0: DMatrix<f64>,
        w0: Option<DMatrix<f64>>,
    ) -> Result<Self> {
        let (n, periods) = y.shape();
        if n < 2 {
            return Err(Error::InvalidInput(format!("need n >= 2 units, got {n}")));
        }
        if periods < 2 {
            return Err(Error::InvalidInput(format!(
                "need T >= 2 periods, got {periods}"
            )));
        }
        for (name, list) in [("x1", &x1), ("x2", &x2), ("z", &z)] {
            if list.len() != periods {
                return Err(Error::Dimension(format!(
                    "{name} has {} periods, expected {periods}",
                    list.len()
                )));
            }
        }
        let k1 = x1[0].ncols();
        let k2 = x2[0].ncols();
        let p = z0.ncols();
        if p == 0 {
            return Err(Error::InvalidInput("need at least one weight driver".into()));
        }
        if k1 == 0 {
            return Err(Error::InvalidInput("need at least one main regressor".into()));
        }
        for t in 0..periods {
            let checks = [
                ("x1", &x1[t], k1),
                ("x2", &x2[t], k2),
                ("z", &z[t], p),
            ];
            for (name, m, cols) in checks {
                if m.shape() != (n, cols) {
                    return Err(Error::Dimension(format!(
                        "{name}[{}] is {}x{}, expected {n}x{cols}",
                        t + 1,
                        m.nrows(),
                        m.ncols()
                    )));
                }
                check_finite(name, m)?;
            }
        }
        if z0.nrows() != n {
            return Err(Error::Dimension(format!(
                "z0 has {} rows, expected {n}",
                z0.nrows()
            )));
        }
        check_finite("y", &y)?;
        check_finite("z0", &z0)?;
        if let Some(y0) = &y0 {
            if y0.len() != n {
                return Err(Error::Dimension(format!(
                    "y0 has length {}, expected {n}",
                    y0.len()
                )));
            }
            if !y0.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("y0".into()));
            }
        }
        if let Some(w0) = &w0 {
            if w0.shape() != (n, n) {
                return Err(Error::Dimension("w0 must be n x n".into()));
            }
            check_finite("w0", w0)?;
            for i in 0..n {
                if w0[(i, i)] != 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "w0 has nonzero diagonal at {i}"
                    )));
                }
                for j in 0..n {
                    if w0[(i, j)] < 0.0 {
                        return Err(Error::NegativeWeight {
                            i,
                            j,
                            value: w0[(i, j)],
                        });
                    }
                }
            }
        }
        Ok(Self {
            n,
            periods,
            y,
            y0,
            x1,
            x2,
            z,
            z0,
            w0,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn periods(&self) -> usize {
        self.periods
    }

    pub fn nt(&self) -> usize {
        self.n * self.periods
    }

    pub fn dims(&self) -> Dims {
        Dims {
            k1: self.x1[0].ncols(),
            k2: self.x2[0].ncols(),
            p: self.z0.ncols(),
        }
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn y0(&self) -> Option<&DVector<f64>> {
        self.y0.as_ref()
    }

    pub fn x1(&self) -> &[DMatrix<f64>] {
        &self.x1
    }

    pub fn x2(&self) -> &[DMatrix<f64>] {
        &self.x2
    }

    pub fn z(&self) -> &[DMatrix<f64>] {
        &self.z
    }

    pub fn z0(&self) -> &DMatrix<f64> {
        &self.z0
    }

    pub fn w0(&self) -> Option<&DMatrix<f64>> {
        self.w0.as_ref()
    }

    /// Replaces the main-equation regressors, keeping everything else.
    pub fn with_x1(&self, x1: Vec<DMatrix<f64>>) -> Result<Self> {
        Self::new(
            self.y.clone(),
            self.y0.clone(),
            x1,
            self.x2.clone(),
            self.z.clone(),
            self.z0.clone(),
            self.w0.clone(),
        )
    }

    /// Y_L.
    pub fn stacked_y(&self) -> DVector<f64> {
        DVector::from_iterator(self.nt(), self.y.iter().copied())
    }

    /// Y_{L,-1} = (Y_0', ..., Y_{T-1}')'.
    pub fn stacked_y_lag(&self) -> Option<DVector<f64>> {
        let y0 = self.y0.as_ref()?;
        let mut out = DVector::zeros(self.nt());
        out.rows_mut(0, self.n).copy_from(y0);
        for t in 1..self.periods {
            out.rows_mut(t * self.n, self.n).copy_from(&self.y.column(t - 1));
        }
        Some(out)
    }

    pub fn stacked_x1(&self) -> DMatrix<f64> {
        stack_rows(&self.x1)
    }

    pub fn stacked_x2(&self) -> DMatrix<f64> {
        stack_rows(&self.x2)
    }

    pub fn stacked_z(&self) -> DMatrix<f64> {
        stack_rows(&self.z)
    }

    /// Z_{L,-1} = (Z_0', ..., Z_{T-1}')'.
    pub fn stacked_z_lag(&self) -> DMatrix<f64> {
        let mut blocks = Vec::with_capacity(self.periods);
        blocks.push(self.z0.clone());
        blocks.extend(self.z[..self.periods - 1].iter().cloned());
        stack_rows(&blocks)
    }

    /// K_L = [Z_{L,-1}, X_{2L}].
    pub fn stacked_k(&self) -> DMatrix<f64> {
        let zl = self.stacked_z_lag();
        let x2 = self.stacked_x2();
        let mut k = DMatrix::zeros(self.nt(), zl.ncols() + x2.ncols());
        k.columns_mut(0, zl.ncols()).copy_from(&zl);
        k.columns_mut(zl.ncols(), x2.ncols()).copy_from(&x2);
        k
    }
}

pub(crate) fn stack_rows(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let n = blocks[0].nrows();
    let m = blocks[0].ncols();
    let mut out = DMatrix::zeros(n * blocks.len(), m);
    for (t, b) in blocks.iter().enumerate() {
        out.view_mut((t * n, 0), (n, m)).copy_from(b);
    }
    out
}

/// Regressor and driver dimensions (k1, k2, p).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub k1: usize,
    pub k2: usize,
    pub p: usize,
}

impl Dims {
    pub fn new(k1: usize, k2: usize, p: usize) -> Self {
        Self { k1, k2, p }
    }

    /// Number of distinct elements of the p x p driver covariance.
    pub fn n_alpha(&self) -> usize {
        self.p * (self.p + 1) / 2
    }

    /// Rows of Phi_2 = (kappa', Gamma')'.
    pub fn k_phi(&self) -> usize {
        self.p + self.k2
    }

    pub fn len(&self) -> usize {
        3 + self.k1 + self.p + self.k_phi() * self.p + 1 + self.n_alpha()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index(&self) -> BlockIndex {
        BlockIndex::new(*self)
    }
}

/// Named ranges into the canonical flat parameter order
/// (lambda, gamma, rho, beta, delta, vec(Phi_2), sigma_xi^2, alpha).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockIndex {
    pub lambda: usize,
    pub gamma: usize,
    pub rho: usize,
    pub beta: Range<usize>,
    pub delta: Range<usize>,
    pub phi2: Range<usize>,
    pub sigma2: usize,
    pub alpha: Range<usize>,
    pub len: usize,
}

impl BlockIndex {
    pub fn new(d: Dims) -> Self {
        let beta = 3..3 + d.k1;
        let delta = beta.end..beta.end + d.p;
        let phi2 = delta.end..delta.end + d.k_phi() * d.p;
        let sigma2 = phi2.end;
        let alpha = sigma2 + 1..sigma2 + 1 + d.n_alpha();
        let len = alpha.end;
        Self {
            lambda: 0,
            gamma: 1,
            rho: 2,
            beta,
            delta,
            phi2,
            sigma2,
            alpha,
            len,
        }
    }

    pub fn eta(&self) -> Range<usize> {
        0..3
    }

    /// phi_1 = (gamma, rho, beta')'.
    pub fn phi1(&self) -> Range<usize> {
        1..self.beta.end
    }

    /// omega = (beta', sigma_xi^2)' as used by the score tests.
    pub fn omega(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.beta.clone().collect();
        v.push(self.sigma2);
        v
    }

    /// Psi = (lambda, phi_1', sigma_xi^2)' as used by the conditional LM test.
    pub fn psi(&self) -> Vec<usize> {
        let mut v = vec![self.lambda];
        v.extend(self.phi1());
        v.push(self.sigma2);
        v
    }

    /// (phi_2, alpha), block diagonal to everything else at the restricted points.
    pub fn driver_block(&self) -> Vec<usize> {
        self.phi2.clone().chain(self.alpha.clone()).collect()
    }
}

/// Full parameter vector of the endogenous-weights SDPD model.
///
/// Serialized with plain arrays; matrices are lists of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ParamRepr", try_from = "ParamRepr")]
pub struct ParamVector {
    pub lambda: f64,
    pub gamma: f64,
    pub rho: f64,
    pub beta: DVector<f64>,
    pub delta: DVector<f64>,
    /// p x p lag coefficient of the driver equation.
    pub kappa: DMatrix<f64>,
    /// k2 x p coefficient on the auxiliary regressors.
    pub gamma_x: DMatrix<f64>,
    pub sigma_xi2: f64,
    pub sigma_eps: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct ParamRepr {
    lambda: f64,
    gamma: f64,
    rho: f64,
    beta: Vec<f64>,
    delta: Vec<f64>,
    kappa: Vec<Vec<f64>>,
    gamma_x: Vec<Vec<f64>>,
    sigma_xi2: f64,
    sigma_eps: Vec<Vec<f64>>,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>], ncols: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Dimension(format!("{what} rows must have {ncols} entries")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

impl From<ParamVector> for ParamRepr {
    fn from(t: ParamVector) -> Self {
        Self {
            lambda: t.lambda,
            gamma: t.gamma,
            rho: t.rho,
            beta: t.beta.iter().copied().collect(),
            delta: t.delta.iter().copied().collect(),
            kappa: rows_of(&t.kappa),
            gamma_x: rows_of(&t.gamma_x),
            sigma_xi2: t.sigma_xi2,
            sigma_eps: rows_of(&t.sigma_eps),
        }
    }
}

impl TryFrom<ParamRepr> for ParamVector {
    type Error = Error;

    fn try_from(r: ParamRepr) -> Result<Self> {
        let p = r.delta.len();
        Ok(Self {
            lambda: r.lambda,
            gamma: r.gamma,
            rho: r.rho,
            beta: DVector::from_vec(r.beta),
            delta: DVector::from_vec(r.delta),
            kappa: from_rows(&r.kappa, p, "kappa")?,
            gamma_x: from_rows(&r.gamma_x, p, "gamma_x")?,
            sigma_xi2: r.sigma_xi2,
            sigma_eps: from_rows(&r.sigma_eps, p, "sigma_eps")?,
        })
    }
}

impl ParamVector {
    /// All coefficients zero, unit variances.
    pub fn zeros(d: Dims) -> Self {
        Self {
            lambda: 0.0,
            gamma: 0.0,
            rho: 0.0,
            beta: DVector::zeros(d.k1),
            delta: DVector::zeros(d.p),
            kappa: DMatrix::zeros(d.p, d.p),
            gamma_x: DMatrix::zeros(d.k2, d.p),
            sigma_xi2: 1.0,
            sigma_eps: DMatrix::identity(d.p, d.p),
        }
    }

    pub fn dims(&self) -> Dims {
        Dims {
            k1: self.beta.len(),
            k2: self.gamma_x.nrows(),
            p: self.delta.len(),
        }
    }

    pub fn eta(&self) -> [f64; 3] {
        [self.lambda, self.gamma, self.rho]
    }

    /// Phi_2 = (kappa', Gamma')', a (p + k2) x p matrix.
    pub fn phi2(&self) -> DMatrix<f64> {
        let d = self.dims();
        let mut m = DMatrix::zeros(d.k_phi(), d.p);
        m.rows_mut(0, d.p).copy_from(&self.kappa);
        m.rows_mut(d.p, d.k2).copy_from(&self.gamma_x);
        m
    }

    pub fn set_phi2(&mut self, phi2: &DMatrix<f64>) {
        let d = self.dims();
        self.kappa.copy_from(&phi2.rows(0, d.p));
        self.gamma_x.copy_from(&phi2.rows(d.p, d.k2));
    }

    /// Lower triangle of Sigma_eps, column-major.
    pub fn alpha(&self) -> DVector<f64> {
        let p = self.sigma_eps.nrows();
        let mut out = Vec::with_capacity(p * (p + 1) / 2);
        for j in 0..p {
            for i in j..p {
                out.push(self.sigma_eps[(i, j)]);
            }
        }
        DVector::from_vec(out)
    }

    pub fn pack(&self) -> DVector<f64> {
        let d = self.dims();
        let idx = d.index();
        let mut v = DVector::zeros(idx.len);
        v[idx.lambda] = self.lambda;
        v[idx.gamma] = self.gamma;
        v[idx.rho] = self.rho;
        v.rows_mut(idx.beta.start, d.k1).copy_from(&self.beta);
        v.rows_mut(idx.delta.start, d.p).copy_from(&self.delta);
        let phi2 = self.phi2();
        for (k, x) in phi2.iter().enumerate() {
            v[idx.phi2.start + k] = *x;
        }
        v[idx.sigma2] = self.sigma_xi2;
        v.rows_mut(idx.alpha.start, d.n_alpha())
            .copy_from(&self.alpha());
        v
    }

    pub fn unpack(flat: &DVector<f64>, d: Dims) -> Result<Self> {
        let idx = d.index();
        if flat.len() != idx.len {
            return Err(Error::Dimension(format!(
                "flat parameter vector has length {}, expected {}",
                flat.len(),
                idx.len
            )));
        }
        let phi2 = DMatrix::from_iterator(d.k_phi(), d.p, flat.rows(idx.phi2.start, idx.phi2.len()).iter().copied());
        let mut sigma_eps = DMatrix::zeros(d.p, d.p);
        let mut k = idx.alpha.start;
        for j in 0..d.p {
            for i in j..d.p {
                sigma_eps[(i, j)] = flat[k];
                sigma_eps[(j, i)] = flat[k];
                k += 1;
            }
        }
        Ok(Self {
            lambda: flat[idx.lambda],
            gamma: flat[idx.gamma],
            rho: flat[idx.rho],
            beta: flat.rows(idx.beta.start, d.k1).into_owned(),
            delta: flat.rows(idx.delta.start, d.p).into_owned(),
            kappa: phi2.rows(0, d.p).into_owned(),
            gamma_x: phi2.rows(d.p, d.k2).into_owned(),
            sigma_xi2: flat[idx.sigma2],
            sigma_eps,
        })
    }

    /// Checks sigma_xi^2 > 0 and Sigma_eps symmetric positive definite.
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_xi2 > 0.0) {
            return Err(Error::InvalidInput(format!(
                "sigma_xi^2 must be positive, got {}",
                self.sigma_xi2
            )));
        }
        let s = &self.sigma_eps;
        if (s - s.transpose()).amax() > 1e-12 * (1.0 + s.amax()) {
            return Err(Error::NotPositiveDefinite("Sigma_eps is not symmetric".into()));
        }
        if s.clone().cholesky().is_none() {
            return Err(Error::NotPositiveDefinite("Sigma_eps".into()));
        }
        Ok(())
    }
}

/// Applies J_L = J_T (x) J_n to the columns of an L x m matrix without forming J_L.
pub fn within_transform(a: &DMatrix<f64>, n: usize, periods: usize) -> Result<DMatrix<f64>> {
    let l = a.nrows();
    if n == 0 || l % n != 0 {
        return Err(Error::Dimension(format!(
            "row count {l} is not divisible by n = {n}"
        )));
    }
    if l / n != periods {
        return Err(Error::Dimension(format!(
            "row count {l} does not equal n*T = {}",
            n * periods
        )));
    }
    let mut out = a.clone();
    let tf = periods as f64;
    let nf = n as f64;
    for c in 0..a.ncols() {
        let col = a.column(c);
        let mut unit_mean = vec![0.0; n];
        let mut period_mean = vec![0.0; periods];
        let mut grand = 0.0;
        for t in 0..periods {
            for i in 0..n {
                let v = col[t * n + i];
                unit_mean[i] += v;
                period_mean[t] += v;
                grand += v;
            }
        }
        unit_mean.iter_mut().for_each(|m| *m /= tf);
        period_mean.iter_mut().for_each(|m| *m /= nf);
        grand /= nf * tf;
        let mut oc = out.column_mut(c);
        for t in 0..periods {
            for i in 0..n {
                oc[t * n + i] = col[t * n + i] - unit_mean[i] - period_mean[t] + grand;
            }
        }
    }
    Ok(out)
}

pub fn within_vector(v: &DVector<f64>, n: usize, periods: usize) -> Result<DVector<f64>> {
    let m = DMatrix::from_column_slice(v.len(), 1, v.as_slice());
    let out = within_transform(&m, n, periods)?;
    Ok(DVector::from_column_slice(out.as_slice()))
}

/// l_0(gamma, rho): gamma Y_0 + rho W_0 Y_0 in the first n rows, zeros elsewhere.
pub fn ell0(
    gamma: f64,
    rho: f64,
    y0: Option<&DVector<f64>>,
    w0: Option<&DMatrix<f64>>,
    periods: usize,
) -> Result<DVector<f64>> {
    let n = match (y0, w0) {
        (Some(y), _) => y.len(),
        (None, Some(w)) => w.nrows(),
        (None, None) => return Err(Error::MissingInitial("Y_0 is required to size l_0")),
    };
    let mut out = DVector::zeros(n * periods);
    if gamma == 0.0 && rho == 0.0 {
        return Ok(out);
    }
    let y0 = y0.ok_or(Error::MissingInitial("Y_0 is required when gamma or rho is nonzero"))?;
    let mut head = y0 * gamma;
    if rho != 0.0 {
        let w0 = w0.ok_or(Error::MissingInitial("W_0 is required when rho is nonzero"))?;
        if w0.shape() != (n, n) {
            return Err(Error::Dimension("W_0 must be n x n".into()));
        }
        head += w0 * y0 * rho;
    }
    out.rows_mut(0, n).copy_from(&head);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn param_json_is_plain_and_round_trips() {
        let mut t = ParamVector::zeros(Dims::new(2, 1, 2));
        t.kappa[(0, 1)] = 0.25;
        t.gamma_x[(0, 0)] = -1.5;
        let text = serde_json::to_string(&t).unwrap();
        assert!(text.contains("\"kappa\":[[0.0,0.25],[0.0,0.0]]"));
        let back: ParamVector = serde_json::from_str(&text).unwrap();
        assert_eq!(back, t);
        let bad = text.replace("[[0.0,0.25],[0.0,0.0]]", "[[0.0],[0.0]]");
        assert!(serde_json::from_str::<ParamVector>(&bad).is_err());
    }

    fn dense_projector(n: usize, periods: usize) -> DMatrix<f64> {
        let jn = DMatrix::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64);
        let jt = DMatrix::identity(periods, periods)
            - DMatrix::from_element(periods, periods, 1.0 / periods as f64);
        jt.kronecker(&jn)
    }

    #[test]
    fn scalar_model_packs_to_nine_entries() {
        let d = Dims::new(1, 1, 1);
        let theta = ParamVector::zeros(d);
        let flat = theta.pack();
        assert_eq!(flat.len(), 9);
        assert_eq!(flat[d.index().sigma2], 1.0);
        assert_eq!(flat[d.index().alpha.start], 1.0);
        assert_eq!(ParamVector::unpack(&flat, d).unwrap(), theta);
    }

    #[test]
    fn unpack_rejects_wrong_length() {
        let d = Dims::new(2, 1, 1);
        let err = ParamVector::unpack(&DVector::zeros(5), d).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn block_index_covers_flat_vector() {
        let d = Dims::new(2, 3, 2);
        let idx = d.index();
        let mut seen = vec![0; idx.len];
        for i in [idx.lambda, idx.gamma, idx.rho, idx.sigma2] {
            seen[i] += 1;
        }
        for r in [&idx.beta, &idx.delta, &idx.phi2, &idx.alpha] {
            for i in r.clone() {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        let mut partition: Vec<usize> = idx.delta.clone().collect();
        partition.extend(idx.eta());
        partition.extend(idx.omega());
        partition.extend(idx.driver_block());
        partition.sort_unstable();
        assert_eq!(partition, (0..idx.len).collect::<Vec<_>>());
    }

    #[test]
    fn within_kills_constants() {
        let a = DMatrix::from_element(12, 2, 3.7);
        let out = within_transform(&a, 3, 4).unwrap();
        assert!(out.amax() < 1e-14);
    }

    #[test]
    fn within_matches_dense_kronecker_projector() {
        let a = DMatrix::from_column_slice(4, 1, &[1.0, 2.0, 3.0, 4.0]);
        let dense = dense_projector(2, 2) * &a;
        let fast = within_transform(&a, 2, 2).unwrap();
        assert_abs_diff_eq!(dense, fast, epsilon = 1e-14);
        // (1,2,3,4): unit means (2,3), period means (1.5,3.5), grand 2.5
        assert!(fast.amax() < 1e-14);

        let b = DMatrix::from_fn(12, 3, |i, j| ((i * 7 + j * 3) % 5) as f64 - 0.3 * j as f64);
        assert_abs_diff_eq!(
            dense_projector(3, 4) * &b,
            within_transform(&b, 3, 4).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn within_rejects_indivisible_rows() {
        assert!(within_transform(&DMatrix::zeros(7, 1), 2, 3).is_err());
    }

    #[test]
    fn dense_projector_rank() {
        for n in 2..=4 {
            for t in 2..=4 {
                let rank = dense_projector(n, t).rank(1e-9);
                assert_eq!(rank, (n - 1) * (t - 1));
            }
        }
    }

    #[test]
    fn ell0_cases() {
        let y0 = DVector::from_vec(vec![1.0, 2.0]);
        assert_eq!(ell0(0.0, 0.0, Some(&y0), None, 2).unwrap(), DVector::zeros(4));
        assert_eq!(
            ell0(1.0, 0.0, Some(&y0), None, 2).unwrap(),
            DVector::from_vec(vec![1.0, 2.0, 0.0, 0.0])
        );
        let w0 = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let y0 = DVector::from_vec(vec![2.0, 4.0]);
        assert_eq!(
            ell0(0.5, 0.5, Some(&y0), Some(&w0), 2).unwrap(),
            DVector::from_vec(vec![3.0, 3.0, 0.0, 0.0])
        );
        assert!(matches!(
            ell0(0.0, 0.5, Some(&y0), None, 2),
            Err(Error::MissingInitial(_))
        ));
    }

    proptest! {
        #[test]
        fn pack_unpack_bijection(
            k1 in 1usize..=4, k2 in 1usize..=4, p in 1usize..=4,
            seed in proptest::collection::vec(-5.0f64..5.0, 200)
        ) {
            let d = Dims::new(k1, k2, p);
            let idx = d.index();
            let flat = DVector::from_iterator(idx.len, seed.iter().copied().cycle().take(idx.len));
            let theta = ParamVector::unpack(&flat, d).unwrap();
            prop_assert_eq!(theta.pack(), flat.clone());
            let again = ParamVector::unpack(&theta.pack(), d).unwrap();
            prop_assert_eq!(again, theta);
        }

        #[test]
        fn within_output_is_doubly_demeaned(
            n in 2usize..6, t in 2usize..6,
            vals in proptest::collection::vec(-10.0f64..10.0, 36)
        ) {
            let a = DMatrix::from_iterator(n * t, 1, vals.iter().copied().cycle().take(n * t));
            let out = within_transform(&a, n, t).unwrap();
            for i in 0..n {
                let s: f64 = (0..t).map(|s| out[(s * n + i, 0)]).sum();
                prop_assert!(s.abs() < 1e-12);
            }
            for s in 0..t {
                let col: f64 = (0..n).map(|i| out[(s * n + i, 0)]).sum();
                prop_assert!(col.abs() < 1e-12);
            }
            let twice = within_transform(&out, n, t).unwrap();
            prop_assert!((twice - &out).amax() < 1e-12);
        }
    }
}
