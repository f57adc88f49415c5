//! Concentrated log-likelihood, analytic score, bias terms and information matrices.
//!
//! Scores and information matrices are returned on the per-observation scale,
//! i.e. divided by nT.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::panel::{within_transform, within_vector, BlockIndex, Dims, PanelData, ParamVector};
use crate::weights::{apply_block, resolvent, solve_s, BlockOperator, Spectrum, WeightSequence};

/// Variances at or below this are treated as a degenerate fit.
pub const SIGMA_FLOOR: f64 = 1e-12;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// L x L masks multiplying a G_jL operator inside a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mask {
    Identity,
    /// J_T (x) J_n.
    Within,
    /// (1/T) 1_T 1_T' (x) J_n.
    TimeMean,
    /// I_T (x) (1/n) 1_n 1_n'.
    UnitMean,
}

/// G_jL(eta) = W_jL S_L(eta)^{-1} for j = 1, 2, 3.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GOperator {
    G1,
    G2,
    G3,
}

impl GOperator {
    fn idx(self) -> usize {
        match self {
            GOperator::G1 => 0,
            GOperator::G2 => 1,
            GOperator::G3 => 2,
        }
    }
}

/// All trace functionals of G_1L, G_2L, G_3L needed by the bias terms and information.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GTraces {
    pub plain: [f64; 3],
    pub time_mean: [f64; 3],
    pub unit_mean: [f64; 3],
    /// tr(G_1L^2).
    pub g1_squared: f64,
}

impl GTraces {
    pub fn get(&self, op: GOperator, mask: Mask) -> f64 {
        let j = op.idx();
        match mask {
            Mask::Identity => self.plain[j],
            Mask::TimeMean => self.time_mean[j],
            Mask::UnitMean => self.unit_mean[j],
            Mask::Within => self.plain[j] - self.time_mean[j] - self.unit_mean[j],
        }
    }
}

/// tr(J_n M) = tr(M) - (1/n) 1'M1.
fn trace_jn(m: &DMatrix<f64>) -> f64 {
    m.trace() - m.sum() / m.nrows() as f64
}

/// Blockwise traces of G_jL(eta) against every mask.
///
/// With A_t = (I - lambda W_t)^{-1} and B_t = gamma I + rho W_t, the block-row
/// sums of S_L^{-1} obey U_t = A_t (I + B_{t-1} U_{t-1}).
pub fn g_traces(eta: [f64; 3], seq: &WeightSequence) -> Result<GTraces> {
    let [lambda, gamma, rho] = eta;
    let (n, periods) = (seq.n(), seq.periods());
    let w = seq.sample();
    let tf = periods as f64;
    let nf = n as f64;
    let mut out = GTraces {
        plain: [0.0; 3],
        time_mean: [0.0; 3],
        unit_mean: [0.0; 3],
        g1_squared: 0.0,
    };
    let identity = DMatrix::<f64>::identity(n, n);
    let mut sum_g = [
        DMatrix::<f64>::zeros(n, n),
        DMatrix::zeros(n, n),
        DMatrix::zeros(n, n),
    ];
    let mut u_prev: Option<Option<DMatrix<f64>>> = None;
    for t in 0..periods {
        let a = if lambda == 0.0 {
            None
        } else {
            Some(resolvent(&w[t], lambda, t + 1)?)
        };
        let p = match &a {
            Some(a) => &w[t] * a,
            None => w[t].clone(),
        };
        out.plain[0] += p.trace();
        out.g1_squared += p.component_mul(&p.transpose()).sum();
        out.unit_mean[0] += p.sum() / nf;
        // None stands for U_t = I
        let u = match &u_prev {
            Some(up) if gamma != 0.0 || rho != 0.0 => {
                let b = &identity * gamma + &w[t - 1] * rho;
                let inner = &identity + b * up.as_ref().unwrap_or(&identity);
                Some(match &a {
                    Some(a) => a * inner,
                    None => inner,
                })
            }
            _ => a.clone(),
        };
        let wu = match &u {
            Some(u) => &w[t] * u,
            None => w[t].clone(),
        };
        sum_g[0] += &wu;
        if t + 1 < periods {
            match &u {
                Some(u) => sum_g[1] += u,
                None => sum_g[1] += &identity,
            }
            sum_g[2] += &wu;
        }
        u_prev = Some(u);
    }
    for j in 0..3 {
        out.time_mean[j] = trace_jn(&sum_g[j]) / tf;
    }
    Ok(out)
}

/// tr(G_jL(eta) M) for one of the supported masks, computed blockwise.
pub fn masked_trace(op: GOperator, mask: Mask, eta: [f64; 3], seq: &WeightSequence) -> Result<f64> {
    Ok(g_traces(eta, seq)?.get(op, mask))
}

/// Sum_{t=1}^{T-1} Sum_{h=1}^{T-t} kappa'^(h-1), accumulated as Sum_h (T-h) kappa'^(h-1).
pub fn kappa_power_sum(kappa: &DMatrix<f64>, periods: usize) -> DMatrix<f64> {
    let p = kappa.nrows();
    let kt = kappa.transpose();
    let mut power = DMatrix::<f64>::identity(p, p);
    let mut total = DMatrix::zeros(p, p);
    for h in 1..periods {
        total += &power * (periods - h) as f64;
        power = &power * &kt;
        if power.amax() < 1e-14 {
            break;
        }
    }
    total
}

/// Partial derivative of Sigma_eps with respect to the k-th element of alpha.
pub fn sigma_derivative(p: usize, k: usize) -> DMatrix<f64> {
    let (a, b) = alpha_position(p, k);
    let mut d = DMatrix::zeros(p, p);
    d[(a, b)] = 1.0;
    d[(b, a)] = 1.0;
    d
}

/// (row, col) of alpha_k in the column-major lower triangle.
pub fn alpha_position(p: usize, k: usize) -> (usize, usize) {
    let mut idx = 0;
    for j in 0..p {
        for i in j..p {
            if idx == k {
                return (i, j);
            }
            idx += 1;
        }
    }
    panic!("alpha index {k} out of range for p = {p}");
}

/// Gradient of a function of Sigma written as tr(M dSigma) with respect to alpha.
fn alpha_gradient(m: &DMatrix<f64>) -> DVector<f64> {
    let p = m.nrows();
    let mut out = Vec::with_capacity(p * (p + 1) / 2);
    for j in 0..p {
        for i in j..p {
            out.push(if i == j { m[(i, i)] } else { m[(i, j)] + m[(j, i)] });
        }
    }
    DVector::from_vec(out)
}

fn sigma_inverse(sigma: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let chol = sigma
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("Sigma_eps".into()))?;
    let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok((chol.inverse(), log_det))
}

fn sym(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// Stacked and within-transformed model quantities for one panel and weight sequence.
#[derive(Debug, Clone)]
pub struct Likelihood<'a> {
    data: &'a PanelData,
    seq: &'a WeightSequence,
    dims: Dims,
    spectrum: Spectrum,
    y: DVector<f64>,
    wy: DVector<f64>,
    ylag: Option<DVector<f64>>,
    wylag: Option<DVector<f64>>,
    x1: DMatrix<f64>,
    z: DMatrix<f64>,
    k: DMatrix<f64>,
    jy: DVector<f64>,
    jwy: DVector<f64>,
    jylag: Option<DVector<f64>>,
    jwylag: Option<DVector<f64>>,
    jx1: DMatrix<f64>,
    jz: DMatrix<f64>,
    jk: DMatrix<f64>,
}

impl<'a> Likelihood<'a> {
    pub fn new(data: &'a PanelData, seq: &'a WeightSequence) -> Result<Self> {
        let (n, periods) = (data.n(), data.periods());
        if seq.n() != n || seq.periods() != periods {
            return Err(Error::Dimension(format!(
                "weights cover n={} T={}, data has n={n} T={periods}",
                seq.n(),
                seq.periods()
            )));
        }
        let y = data.stacked_y();
        let wy = apply_block(BlockOperator::W1, &y, seq)?;
        let ylag = data.stacked_y_lag();
        let w0 = data.w0().or(seq.initial());
        let wylag = match (&ylag, w0) {
            (Some(_), Some(w0)) => {
                let y0 = data.y0().expect("lagged outcome implies Y_0");
                let mut v = DVector::zeros(n * periods);
                v.rows_mut(0, n).copy_from(&(w0 * y0));
                v.rows_mut(n, n * (periods - 1))
                    .copy_from(&wy.rows(0, n * (periods - 1)));
                Some(v)
            }
            _ => None,
        };
        let x1 = data.stacked_x1();
        let z = data.stacked_z();
        let k = data.stacked_k();
        let jv = |v: &DVector<f64>| within_vector(v, n, periods);
        let jm = |m: &DMatrix<f64>| within_transform(m, n, periods);
        Ok(Self {
            data,
            seq,
            dims: data.dims(),
            spectrum: Spectrum::new(seq),
            jy: jv(&y)?,
            jwy: jv(&wy)?,
            jylag: ylag.as_ref().map(jv).transpose()?,
            jwylag: wylag.as_ref().map(jv).transpose()?,
            jx1: jm(&x1)?,
            jz: jm(&z)?,
            jk: jm(&k)?,
            y,
            wy,
            ylag,
            wylag,
            x1,
            z,
            k,
        })
    }

    pub fn data(&self) -> &PanelData {
        self.data
    }

    pub fn seq(&self) -> &WeightSequence {
        self.seq
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn index(&self) -> BlockIndex {
        self.dims.index()
    }

    pub fn n(&self) -> usize {
        self.data.n()
    }

    pub fn periods(&self) -> usize {
        self.data.periods()
    }

    pub fn nt(&self) -> f64 {
        self.data.nt() as f64
    }

    pub fn spectrum(&self) -> &Spectrum {
        &self.spectrum
    }

    /// J_L Y_L.
    pub fn jy(&self) -> &DVector<f64> {
        &self.jy
    }

    /// J_L W_1L Y_L.
    pub fn jwy(&self) -> &DVector<f64> {
        &self.jwy
    }

    /// J_L Y_{L,-1}, when Y_0 is available.
    pub fn jylag(&self) -> Option<&DVector<f64>> {
        self.jylag.as_ref()
    }

    /// J_L (W Y)_{L,-1}, when Y_0 and W_0 are available.
    pub fn jwylag(&self) -> Option<&DVector<f64>> {
        self.jwylag.as_ref()
    }

    pub fn jx1(&self) -> &DMatrix<f64> {
        &self.jx1
    }

    pub fn jz(&self) -> &DMatrix<f64> {
        &self.jz
    }

    pub fn jk(&self) -> &DMatrix<f64> {
        &self.jk
    }

    fn lag_terms(&self, gamma: f64, rho: f64) -> Result<(Option<&DVector<f64>>, Option<&DVector<f64>>)> {
        let ylag = if gamma != 0.0 {
            Some(self.ylag.as_ref().ok_or(Error::MissingInitial(
                "Y_0 is required when gamma is nonzero",
            ))?)
        } else {
            None
        };
        let wylag = if rho != 0.0 {
            if self.ylag.is_none() {
                return Err(Error::MissingInitial("Y_0 is required when rho is nonzero"));
            }
            Some(self.wylag.as_ref().ok_or(Error::MissingInitial(
                "W_0 is required when rho is nonzero",
            ))?)
        } else {
            None
        };
        Ok((ylag, wylag))
    }

    /// epsilon_L = Z_L - K_L Phi_2.
    pub fn residual_eps(&self, phi2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if phi2.shape() != (self.k.ncols(), self.z.ncols()) {
            return Err(Error::Dimension(format!(
                "Phi_2 is {:?}, expected {:?}",
                phi2.shape(),
                (self.k.ncols(), self.z.ncols())
            )));
        }
        Ok(&self.z - &self.k * phi2)
    }

    /// J_L (Z_L - K_L Phi_2).
    pub fn j_eps(&self, phi2: &DMatrix<f64>) -> DMatrix<f64> {
        &self.jz - &self.jk * phi2
    }

    fn check_theta(&self, theta: &ParamVector) -> Result<()> {
        if theta.dims() != self.dims {
            return Err(Error::Dimension(format!(
                "parameter dims {:?} differ from data dims {:?}",
                theta.dims(),
                self.dims
            )));
        }
        Ok(())
    }

    /// xi_L(theta) = S_L(eta) Y_L - X_1L beta - epsilon_L delta - l_0(gamma, rho), before J_L.
    pub fn residual_xi(&self, theta: &ParamVector) -> Result<DVector<f64>> {
        self.check_theta(theta)?;
        let (ylag, wylag) = self.lag_terms(theta.gamma, theta.rho)?;
        let mut r = &self.y - &self.wy * theta.lambda - &self.x1 * &theta.beta;
        if let Some(v) = ylag {
            r -= v * theta.gamma;
        }
        if let Some(v) = wylag {
            r -= v * theta.rho;
        }
        if theta.delta.iter().any(|d| *d != 0.0) {
            r -= self.residual_eps(&theta.phi2())? * &theta.delta;
        }
        Ok(r)
    }

    /// J_L xi_L(theta), assembled from pre-transformed columns.
    pub fn j_residual_xi(&self, theta: &ParamVector) -> Result<DVector<f64>> {
        self.check_theta(theta)?;
        let (_, _) = self.lag_terms(theta.gamma, theta.rho)?;
        let mut r = &self.jy - &self.jwy * theta.lambda - &self.jx1 * &theta.beta;
        if theta.gamma != 0.0 {
            r -= self.jylag.as_ref().expect("checked") * theta.gamma;
        }
        if theta.rho != 0.0 {
            r -= self.jwylag.as_ref().expect("checked") * theta.rho;
        }
        if theta.delta.iter().any(|d| *d != 0.0) {
            r -= self.j_eps(&theta.phi2()) * &theta.delta;
        }
        Ok(r)
    }

    /// ln L^c_L(theta).
    pub fn loglik(&self, theta: &ParamVector) -> Result<f64> {
        self.check_theta(theta)?;
        let s2 = theta.sigma_xi2;
        if !(s2 > SIGMA_FLOOR) {
            return Err(Error::DegenerateFit(s2));
        }
        let (sinv, log_det_sigma) = sigma_inverse(&theta.sigma_eps)?;
        let nt = self.nt();
        let log_det_s = self.spectrum.log_det(theta.lambda, self.seq)?;
        let jeps = self.j_eps(&theta.phi2());
        let eps = self.residual_eps(&theta.phi2())?;
        let quad_eps = (sinv * (eps.transpose() * &jeps)).trace();
        let jr = self.j_residual_xi(theta)?;
        let r = self.residual_xi(theta)?;
        let quad_xi = r.dot(&jr);
        Ok(-0.5 * nt * LN_2PI + log_det_s
            - 0.5 * nt * s2.ln()
            - 0.5 * nt * log_det_sigma
            - 0.5 * quad_eps
            - quad_xi / (2.0 * s2))
    }

    /// Analytic gradient of ln L^c_L divided by nT, in canonical order.
    pub fn score(&self, theta: &ParamVector) -> Result<DVector<f64>> {
        self.check_theta(theta)?;
        let s2 = theta.sigma_xi2;
        if !(s2 > SIGMA_FLOOR) {
            return Err(Error::DegenerateFit(s2));
        }
        let d = self.dims;
        let idx = d.index();
        let nt = self.nt();
        let (sinv, _) = sigma_inverse(&theta.sigma_eps)?;
        let phi2 = theta.phi2();
        let eps = self.residual_eps(&phi2)?;
        let jeps = self.j_eps(&phi2);
        let jr = self.j_residual_xi(theta)?;
        let (tr_g1, _) = self.spectrum.resolvent_traces(theta.lambda, self.seq)?;

        let mut g = DVector::zeros(idx.len);
        g[idx.lambda] = -tr_g1 + self.wy.dot(&jr) / s2;
        g[idx.gamma] = match &self.ylag {
            Some(v) => v.dot(&jr) / s2,
            None => f64::NAN,
        };
        g[idx.rho] = match &self.wylag {
            Some(v) => v.dot(&jr) / s2,
            None => f64::NAN,
        };
        g.rows_mut(idx.beta.start, d.k1)
            .copy_from(&(self.x1.transpose() * &jr / s2));
        g.rows_mut(idx.delta.start, d.p)
            .copy_from(&(eps.transpose() * &jr / s2));
        let kj_eps = self.k.transpose() * &jeps;
        let kj_r = self.k.transpose() * &jr;
        let gphi = kj_eps * &sinv - kj_r * theta.delta.transpose() / s2;
        for (i, v) in gphi.iter().enumerate() {
            g[idx.phi2.start + i] = *v;
        }
        g[idx.sigma2] = -nt / (2.0 * s2) + self.y_quad(&jr, theta)? / (2.0 * s2 * s2);
        let ej_e = eps.transpose() * &jeps;
        let m = &sinv * (-0.5 * nt) + &sinv * ej_e * &sinv * 0.5;
        g.rows_mut(idx.alpha.start, d.n_alpha())
            .copy_from(&alpha_gradient(&m));
        Ok(g / nt)
    }

    fn y_quad(&self, jr: &DVector<f64>, theta: &ParamVector) -> Result<f64> {
        Ok(self.residual_xi(theta)?.dot(jr))
    }

    /// Individual-effect bias vector a_1 at theta.
    pub fn bias_a1(&self, theta: &ParamVector) -> Result<DVector<f64>> {
        let tr = g_traces(theta.eta(), self.seq)?;
        self.bias_a1_with(theta, &tr)
    }

    /// Time-effect bias vector a_2 at theta.
    pub fn bias_a2(&self, theta: &ParamVector) -> Result<DVector<f64>> {
        let tr = g_traces(theta.eta(), self.seq)?;
        self.bias_a2_with(theta, &tr)
    }

    pub fn bias_a1_with(&self, theta: &ParamVector, tr: &GTraces) -> Result<DVector<f64>> {
        self.check_theta(theta)?;
        let d = self.dims;
        let idx = d.index();
        let nm1 = (self.n() - 1) as f64;
        let tf = self.periods() as f64;
        let mut a = DVector::zeros(idx.len);
        a[idx.lambda] = -tr.time_mean[0] / nm1;
        a[idx.gamma] = -tr.time_mean[1] / nm1;
        a[idx.rho] = -tr.time_mean[2] / nm1;
        let ks = kappa_power_sum(&theta.kappa, self.periods()) / (-tf);
        let kphi = d.k_phi();
        for c in 0..d.p {
            for r in 0..d.p {
                a[idx.phi2.start + c * kphi + r] = ks[(r, c)];
            }
        }
        self.fill_variance_bias(theta, &mut a)?;
        Ok(a)
    }

    pub fn bias_a2_with(&self, theta: &ParamVector, tr: &GTraces) -> Result<DVector<f64>> {
        self.check_theta(theta)?;
        let idx = self.index();
        let tf = self.periods() as f64;
        let mut a = DVector::zeros(idx.len);
        a[idx.lambda] = -tr.unit_mean[0] / tf;
        self.fill_variance_bias(theta, &mut a)?;
        Ok(a)
    }

    fn fill_variance_bias(&self, theta: &ParamVector, a: &mut DVector<f64>) -> Result<()> {
        let idx = self.index();
        if !(theta.sigma_xi2 > SIGMA_FLOOR) {
            return Err(Error::DegenerateFit(theta.sigma_xi2));
        }
        a[idx.sigma2] = -0.5 / theta.sigma_xi2;
        let (sinv, _) = sigma_inverse(&theta.sigma_eps)?;
        let dl = alpha_gradient(&sinv);
        for (k, v) in dl.iter().enumerate() {
            a[idx.alpha.start + k] = -0.5 * v;
        }
        Ok(())
    }

    /// (Delta_1, Delta_2) with Delta_L / sqrt(nT) = Delta_1 + Delta_2 exactly.
    pub fn bias_terms(&self, theta: &ParamVector) -> Result<(DVector<f64>, DVector<f64>)> {
        let tr = g_traces(theta.eta(), self.seq)?;
        let root = self.nt().sqrt();
        let a1 = self.bias_a1_with(theta, &tr)?;
        let a2 = self.bias_a2_with(theta, &tr)?;
        Ok((
            a1 * ((self.n() - 1) as f64 / root),
            a2 * (self.periods() as f64 / root),
        ))
    }

    /// Plug-in information at a point with delta = 0, divided by nT.
    ///
    /// Blocks that need the lagged outcome are NaN when Y_0 (or W_0 for rho) is missing.
    pub fn information_plugin(&self, theta: &ParamVector) -> Result<DMatrix<f64>> {
        let tr = g_traces(theta.eta(), self.seq)?;
        self.information_plugin_with(theta, &tr)
    }

    pub fn information_plugin_with(&self, theta: &ParamVector, tr: &GTraces) -> Result<DMatrix<f64>> {
        self.check_theta(theta)?;
        let s2 = theta.sigma_xi2;
        if !(s2 > SIGMA_FLOOR) {
            return Err(Error::DegenerateFit(s2));
        }
        let d = self.dims;
        let idx = d.index();
        let nt = self.nt();
        let (n, periods) = (self.n() as f64, self.periods() as f64);
        let (sinv, _) = sigma_inverse(&theta.sigma_eps)?;
        let jeps = self.j_eps(&theta.phi2());
        let nan = DVector::from_element(self.jy.len(), f64::NAN);

        // columns of J_L [W_1L Y, Y_{-1}, (WY)_{-1}, X_1]
        let mut cols = DMatrix::zeros(self.jy.len(), 3 + d.k1);
        cols.set_column(0, &self.jwy);
        cols.set_column(1, self.jylag.as_ref().unwrap_or(&nan));
        cols.set_column(2, self.jwylag.as_ref().unwrap_or(&nan));
        cols.columns_mut(3, d.k1).copy_from(&self.jx1);
        let gram = cols.transpose() * &cols;

        let mut info = DMatrix::zeros(idx.len, idx.len);
        let eta_beta: Vec<usize> = (0..3).chain(idx.beta.clone()).collect();
        for (a, &ia) in eta_beta.iter().enumerate() {
            for (b, &ib) in eta_beta.iter().enumerate() {
                info[(ia, ib)] = gram[(a, b)];
            }
        }
        info[(idx.lambda, idx.lambda)] += s2 * tr.g1_squared;

        let ej_wy = jeps.transpose() * &self.jwy;
        let ej_e = jeps.transpose() * &jeps;
        for i in 0..d.p {
            let r = idx.delta.start + i;
            info[(r, idx.lambda)] = ej_wy[i];
            info[(idx.lambda, r)] = ej_wy[i];
            for j in 0..d.p {
                info[(r, idx.delta.start + j)] = ej_e[(i, j)];
            }
        }

        let kjk = self.jk.transpose() * &self.jk;
        let phi_block = (&sinv * s2).kronecker(&kjk);
        info.view_mut((idx.phi2.start, idx.phi2.start), (idx.phi2.len(), idx.phi2.len()))
            .copy_from(&phi_block);

        info[(idx.sigma2, idx.lambda)] = tr.plain[0];
        info[(idx.lambda, idx.sigma2)] = tr.plain[0];
        info[(idx.sigma2, idx.sigma2)] = (nt / 2.0 - periods - n + 1.0) / s2;

        let na = d.n_alpha();
        for kk in 0..na {
            let dk = &sinv * sigma_derivative(d.p, kk);
            for jj in 0..na {
                let dj = &sinv * sigma_derivative(d.p, jj);
                info[(idx.alpha.start + kk, idx.alpha.start + jj)] =
                    0.5 * nt * s2 * (&dk * dj).trace();
            }
        }
        info /= nt * s2;
        sym(&mut info);
        Ok(info)
    }

    /// Expected information with a caller-supplied Q_1L, divided by nT.
    ///
    /// Q_1L involves the unobserved fixed effects, so this is meant for simulations
    /// where they are known. Data moments replace their expectations.
    pub fn information_expected(&self, theta: &ParamVector, q1: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_theta(theta)?;
        if q1.len() != self.jy.len() {
            return Err(Error::Dimension("Q_1L must have length nT".into()));
        }
        let s2 = theta.sigma_xi2;
        if !(s2 > SIGMA_FLOOR) {
            return Err(Error::DegenerateFit(s2));
        }
        let d = self.dims;
        let idx = d.index();
        let nt = self.nt();
        let (n, periods) = (self.n(), self.periods());
        let tr = g_traces(theta.eta(), self.seq)?;
        let (sinv, _) = sigma_inverse(&theta.sigma_eps)?;
        let eps = self.residual_eps(&theta.phi2())?;
        let jeps = self.j_eps(&theta.phi2());
        let jq = within_vector(q1, n, periods)?;
        let nan = DVector::from_element(self.jy.len(), f64::NAN);
        let mut r = DMatrix::zeros(self.jy.len(), 2 + d.k1);
        r.set_column(0, self.jylag.as_ref().unwrap_or(&nan));
        r.set_column(1, self.jwylag.as_ref().unwrap_or(&nan));
        r.columns_mut(2, d.k1).copy_from(&self.jx1);

        // tr(G_1' J G_1) column by column
        let mut tr_gjg = 0.0;
        for c in 0..self.jy.len() {
            let mut e = DVector::zeros(self.jy.len());
            e[c] = 1.0;
            let col = apply_block(BlockOperator::W1, &solve_s(theta.eta(), &e, self.seq)?, self.seq)?;
            tr_gjg += within_vector(&col, n, periods)?.norm_squared();
        }

        let mut info = DMatrix::zeros(idx.len, idx.len);
        info[(idx.lambda, idx.lambda)] = q1.dot(&jq) + s2 * (tr.g1_squared + tr_gjg);
        let rjq = r.transpose() * &jq;
        let rjr = r.transpose() * &r;
        let phi1: Vec<usize> = idx.phi1().collect();
        for (a, &ia) in phi1.iter().enumerate() {
            info[(ia, idx.lambda)] = rjq[a];
            for (b, &ib) in phi1.iter().enumerate() {
                info[(ia, ib)] = rjr[(a, b)];
            }
        }
        let mut g_eps_delta = DVector::zeros(self.jy.len());
        if theta.delta.iter().any(|v| *v != 0.0) {
            let v = &eps * &theta.delta;
            g_eps_delta = within_vector(
                &apply_block(BlockOperator::W1, &solve_s(theta.eta(), &v, self.seq)?, self.seq)?,
                n,
                periods,
            )?;
        }
        let dl = jeps.transpose() * &jq + eps.transpose() * &g_eps_delta;
        let ej_e = jeps.transpose() * &jeps;
        for i in 0..d.p {
            info[(idx.delta.start + i, idx.lambda)] = dl[i];
            for j in 0..d.p {
                info[(idx.delta.start + i, idx.delta.start + j)] = ej_e[(i, j)];
            }
        }
        let kjq = self.jk.transpose() * &jq;
        let kjr = self.jk.transpose() * &r;
        let kphi = d.k_phi();
        for c in 0..d.p {
            for row in 0..kphi {
                let ia = idx.phi2.start + c * kphi + row;
                info[(ia, idx.lambda)] = -theta.delta[c] * kjq[row];
                for (b, &ib) in phi1.iter().enumerate() {
                    info[(ia, ib)] = -theta.delta[c] * kjr[(row, b)];
                }
            }
        }
        let kjk = self.jk.transpose() * &self.jk;
        let outer = &sinv * s2 + &theta.delta * theta.delta.transpose();
        info.view_mut((idx.phi2.start, idx.phi2.start), (idx.phi2.len(), idx.phi2.len()))
            .copy_from(&outer.kronecker(&kjk));
        info[(idx.sigma2, idx.lambda)] = tr.plain[0];
        info[(idx.sigma2, idx.sigma2)] = (nt / 2.0 - (periods + n) as f64 + 1.0) / s2;
        let na = d.n_alpha();
        for kk in 0..na {
            let dk = &sinv * sigma_derivative(d.p, kk);
            for jj in 0..na {
                let dj = &sinv * sigma_derivative(d.p, jj);
                info[(idx.alpha.start + kk, idx.alpha.start + jj)] =
                    0.5 * nt * s2 * (&dk * dj).trace();
            }
        }
        info.fill_upper_triangle_with_lower_triangle();
        info /= nt * s2;
        Ok(info)
    }

    /// Score, bias terms, plug-in information and residuals at theta.
    pub fn report(&self, theta: &ParamVector) -> Result<ScoreReport> {
        let score = self.score(theta)?;
        let (delta1, delta2) = self.bias_terms(theta)?;
        let info = self.information_plugin(theta)?;
        Ok(ScoreReport {
            theta: theta.clone(),
            score,
            delta1,
            delta2,
            info,
            residual_xi: self.residual_xi(theta)?,
            residual_eps: self.residual_eps(&theta.phi2())?,
        })
    }
}

/// Everything needed to form bias-corrected scores at one parameter point.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub theta: ParamVector,
    /// Gradient of ln L^c divided by nT.
    pub score: DVector<f64>,
    pub delta1: DVector<f64>,
    pub delta2: DVector<f64>,
    pub info: DMatrix<f64>,
    pub residual_xi: DVector<f64>,
    pub residual_eps: DMatrix<f64>,
}

pub fn residual_xi(theta: &ParamVector, data: &PanelData, seq: &WeightSequence) -> Result<DVector<f64>> {
    Likelihood::new(data, seq)?.residual_xi(theta)
}

pub fn residual_eps(phi2: &DMatrix<f64>, data: &PanelData) -> Result<DMatrix<f64>> {
    let k = data.stacked_k();
    let z = data.stacked_z();
    if phi2.shape() != (k.ncols(), z.ncols()) {
        return Err(Error::Dimension("Phi_2 shape does not match (p + k2) x p".into()));
    }
    Ok(z - k * phi2)
}

pub fn concentrated_loglik(theta: &ParamVector, data: &PanelData, seq: &WeightSequence) -> Result<f64> {
    Likelihood::new(data, seq)?.loglik(theta)
}

pub fn score(theta: &ParamVector, data: &PanelData, seq: &WeightSequence) -> Result<DVector<f64>> {
    Likelihood::new(data, seq)?.score(theta)
}
