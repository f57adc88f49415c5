//! Brute-force reference evaluators: dense L x L assembly, finite differences and
//! a Kolmogorov-Smirnov goodness-of-fit check. Intended for validation only.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::likelihood::{sigma_derivative, Likelihood};
use crate::panel::{ell0, Dims, PanelData, ParamVector};
use crate::weights::{build_weight_sequence, Normalization, WeightSequence};

/// Largest nT for which dense matrices are assembled.
pub const DENSE_CAP: usize = 64;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Fully assembled operators of one panel at a fixed eta.
#[derive(Debug, Clone)]
pub struct DenseModel {
    pub n: usize,
    pub periods: usize,
    pub eta: [f64; 3],
    pub j: DMatrix<f64>,
    pub w1: DMatrix<f64>,
    pub w2: DMatrix<f64>,
    pub w3: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub g: [DMatrix<f64>; 3],
}

impl DenseModel {
    pub fn new(seq: &WeightSequence, eta: [f64; 3]) -> Result<Self> {
        let (n, periods) = (seq.n(), seq.periods());
        let l = n * periods;
        if l > DENSE_CAP {
            return Err(Error::TooLarge(l));
        }
        let jn = DMatrix::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64);
        let jt = DMatrix::identity(periods, periods)
            - DMatrix::from_element(periods, periods, 1.0 / periods as f64);
        let j = jt.kronecker(&jn);
        let mut w1 = DMatrix::zeros(l, l);
        let mut w2 = DMatrix::zeros(l, l);
        let mut w3 = DMatrix::zeros(l, l);
        for t in 0..periods {
            let wt = seq.get(t + 1).expect("sample period");
            w1.view_mut((t * n, t * n), (n, n)).copy_from(wt);
            if t > 0 {
                w2.view_mut((t * n, (t - 1) * n), (n, n))
                    .copy_from(&DMatrix::identity(n, n));
                w3.view_mut((t * n, (t - 1) * n), (n, n))
                    .copy_from(seq.get(t).expect("sample period"));
            }
        }
        let [lambda, gamma, rho] = eta;
        let s = DMatrix::identity(l, l) - &w1 * lambda - &w2 * gamma - &w3 * rho;
        let sinv = s
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Singular("dense S_L".into()))?;
        let g = [&w1 * &sinv, &w2 * &sinv, &w3 * &sinv];
        Ok(Self {
            n,
            periods,
            eta,
            j,
            w1,
            w2,
            w3,
            s,
            g,
        })
    }

    /// (1/T) 1 1' (x) J_n.
    pub fn time_mean_mask(&self) -> DMatrix<f64> {
        let (n, t) = (self.n, self.periods);
        let jn = DMatrix::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64);
        DMatrix::from_element(t, t, 1.0 / t as f64).kronecker(&jn)
    }

    /// I_T (x) (1/n) 1 1'.
    pub fn unit_mean_mask(&self) -> DMatrix<f64> {
        let (n, t) = (self.n, self.periods);
        DMatrix::<f64>::identity(t, t).kronecker(&DMatrix::from_element(n, n, 1.0 / n as f64))
    }

    pub fn log_det_s(&self) -> f64 {
        self.s.clone().lu().determinant().ln()
    }

    /// Y_{L,-1} assembled as W_2L Y_L + l_0(1, 0).
    pub fn y_lag(&self, data: &PanelData) -> Result<DVector<f64>> {
        Ok(&self.w2 * data.stacked_y() + ell0(1.0, 0.0, data.y0(), None, self.periods)?)
    }

    /// (W Y)_{L,-1} assembled as W_3L Y_L + l_0(0, 1).
    pub fn wy_lag(&self, data: &PanelData, w0: &DMatrix<f64>) -> Result<DVector<f64>> {
        Ok(&self.w3 * data.stacked_y() + ell0(0.0, 1.0, data.y0(), Some(w0), self.periods)?)
    }

    /// Eq.-(6)-style concentrated log-likelihood from dense matrices.
    pub fn loglik(&self, data: &PanelData, w0: Option<&DMatrix<f64>>, theta: &ParamVector) -> Result<f64> {
        let l = (self.n * self.periods) as f64;
        let eps = data.stacked_z() - data.stacked_k() * theta.phi2();
        let l0 = ell0(theta.gamma, theta.rho, data.y0(), w0, self.periods)?;
        let r = &self.s * data.stacked_y() - data.stacked_x1() * &theta.beta - &eps * &theta.delta - l0;
        let sinv = theta
            .sigma_eps
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Singular("Sigma_eps".into()))?;
        let vec_eps = DVector::from_column_slice(eps.as_slice());
        let quad_eps = (vec_eps.transpose() * sinv.kronecker(&self.j) * &vec_eps)[(0, 0)];
        let quad_xi = (r.transpose() * &self.j * &r)[(0, 0)];
        Ok(-0.5 * l * LN_2PI + self.log_det_s()
            - 0.5 * l * theta.sigma_xi2.ln()
            - 0.5 * l * theta.sigma_eps.determinant().ln()
            - 0.5 * quad_eps
            - quad_xi / (2.0 * theta.sigma_xi2))
    }

    /// Plug-in information at delta = 0 from dense products, divided by nT.
    pub fn information_plugin(&self, data: &PanelData, w0: &DMatrix<f64>, theta: &ParamVector) -> Result<DMatrix<f64>> {
        let d = theta.dims();
        let idx = d.index();
        let (n, t) = (self.n as f64, self.periods as f64);
        let l = n * t;
        let s2 = theta.sigma_xi2;
        let y = data.stacked_y();
        let wy = &self.w1 * &y;
        let mut r = DMatrix::zeros(y.len(), 2 + d.k1);
        r.set_column(0, &self.y_lag(data)?);
        r.set_column(1, &self.wy_lag(data, w0)?);
        r.columns_mut(2, d.k1).copy_from(&data.stacked_x1());
        let eps = data.stacked_z() - data.stacked_k() * theta.phi2();
        let k = data.stacked_k();
        let sinv = theta
            .sigma_eps
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Singular("Sigma_eps".into()))?;
        let g1 = &self.g[0];
        let mut info = DMatrix::zeros(idx.len, idx.len);
        info[(0, 0)] = (wy.transpose() * &self.j * &wy)[(0, 0)] + s2 * (g1 * g1).trace();
        let rjw = r.transpose() * &self.j * &wy;
        let rjr = r.transpose() * &self.j * &r;
        let phi1: Vec<usize> = idx.phi1().collect();
        for (a, &ia) in phi1.iter().enumerate() {
            info[(ia, 0)] = rjw[a];
            info[(0, ia)] = rjw[a];
            for (b, &ib) in phi1.iter().enumerate() {
                info[(ia, ib)] = rjr[(a, b)];
            }
        }
        let ejw = eps.transpose() * &self.j * &wy;
        let eje = eps.transpose() * &self.j * &eps;
        for i in 0..d.p {
            let ri = idx.delta.start + i;
            info[(ri, 0)] = ejw[i];
            info[(0, ri)] = ejw[i];
            for jj in 0..d.p {
                info[(ri, idx.delta.start + jj)] = eje[(i, jj)];
            }
        }
        let block = (&sinv * s2).kronecker(&(k.transpose() * &self.j * &k));
        info.view_mut((idx.phi2.start, idx.phi2.start), (idx.phi2.len(), idx.phi2.len()))
            .copy_from(&block);
        info[(idx.sigma2, 0)] = g1.trace();
        info[(0, idx.sigma2)] = g1.trace();
        info[(idx.sigma2, idx.sigma2)] = (l / 2.0 - t - n + 1.0) / s2;
        for a in 0..d.n_alpha() {
            for b in 0..d.n_alpha() {
                let m = &sinv * sigma_derivative(d.p, a) * &sinv * sigma_derivative(d.p, b);
                info[(idx.alpha.start + a, idx.alpha.start + b)] = 0.5 * l * s2 * m.trace();
            }
        }
        Ok(info / (l * s2))
    }
}

/// Seeded small instance with Gaussian data and inverse-distance weights on a complete graph.
///
/// Used for oracle comparisons where n need not be a perfect square.
pub fn random_instance(n: usize, periods: usize, dims: Dims, seed: u64) -> Result<(PanelData, WeightSequence)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal));
    let z0 = normal(n, dims.p);
    let z: Vec<_> = (0..periods).map(|_| normal(n, dims.p)).collect();
    let x1: Vec<_> = (0..periods).map(|_| normal(n, dims.k1)).collect();
    let x2: Vec<_> = (0..periods).map(|_| normal(n, dims.k2)).collect();
    let y = normal(n, periods);
    let y0 = DVector::from_column_slice(normal(n, 1).as_slice());
    let mask = DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { 1.0 });
    let seq = build_weight_sequence(&z0, &z, &mask, Normalization::Row)?;
    let w0 = seq.initial().cloned();
    let data = PanelData::new(y, Some(y0), x1, x2, z, z0, w0)?;
    Ok((data, seq))
}

/// A random interior parameter point (|lambda| + |gamma| + |rho| < 0.9).
pub fn random_theta(dims: Dims, rng: &mut impl Rng) -> ParamVector {
    let mut th = ParamVector::zeros(dims);
    let mut u = |a: f64| rng.random_range(-a..a);
    th.lambda = u(0.3);
    th.gamma = u(0.3);
    th.rho = u(0.3);
    th.beta.iter_mut().for_each(|b| *b = u(1.5));
    th.delta.iter_mut().for_each(|b| *b = u(0.8));
    th.kappa.iter_mut().for_each(|b| *b = u(0.4));
    th.gamma_x.iter_mut().for_each(|b| *b = u(0.8));
    th.sigma_xi2 = 0.5 + u(0.5).abs() * 2.0;
    let p = dims.p;
    let a = DMatrix::from_fn(p, p, |_, _| u(1.0));
    th.sigma_eps = &a * a.transpose() + DMatrix::identity(p, p) * 0.5;
    th
}

fn check_step(h: f64) -> Result<()> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidInput(format!("finite-difference step must be positive, got {h}")));
    }
    Ok(())
}

fn eval<F: Fn(&DVector<f64>) -> Result<f64>>(f: &F, x: &DVector<f64>) -> Result<f64> {
    let v = f(x)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite("objective in finite-difference stencil".into()))
    }
}

/// Central-difference gradient.
pub fn fd_gradient<F>(f: F, x: &DVector<f64>, h: f64) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> Result<f64>,
{
    check_step(h)?;
    let mut g = DVector::zeros(x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let fp = eval(&f, &xp)?;
        xp[i] = x[i] - h;
        let fm = eval(&f, &xp)?;
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    Ok(g)
}

/// Central second-difference Hessian, symmetrized.
pub fn fd_hessian<F>(f: F, x: &DVector<f64>, h: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> Result<f64>,
{
    check_step(h)?;
    let m = x.len();
    let mut hess = DMatrix::zeros(m, m);
    let mut xp = x.clone();
    for i in 0..m {
        for j in i..m {
            let mut corner = |si: f64, sj: f64| -> Result<f64> {
                xp[i] += si * h;
                xp[j] += sj * h;
                let v = eval(&f, &xp);
                xp[i] = x[i];
                xp[j] = x[j];
                v
            };
            let v = (corner(1.0, 1.0)? - corner(1.0, -1.0)? - corner(-1.0, 1.0)? + corner(-1.0, -1.0)?)
                / (4.0 * h * h);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    Ok(hess)
}

/// Maximum absolute deviations between blockwise and dense evaluations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DenseReport {
    pub log_det: f64,
    pub masked_traces: f64,
    pub loglik: f64,
    pub score: f64,
    pub information: f64,
}

impl DenseReport {
    pub fn max(&self) -> f64 {
        [self.log_det, self.masked_traces, self.loglik, self.score, self.information]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

/// Compares every blockwise quantity with its dense counterpart at theta.
///
/// The score is compared against a dense-loglik finite difference, so its
/// deviation reflects truncation error (around 1e-8) rather than round-off.
pub fn dense_check(data: &PanelData, seq: &WeightSequence, theta: &ParamVector) -> Result<DenseReport> {
    use crate::likelihood::{g_traces, GOperator, Mask};
    let dense = DenseModel::new(seq, theta.eta())?;
    let lik = Likelihood::new(data, seq)?;
    let w0 = data
        .w0()
        .or(seq.initial())
        .ok_or(Error::MissingInitial("W_0 is required for the dense check"))?;
    let mut rep = DenseReport {
        log_det: (lik.spectrum().log_det(theta.lambda, seq)? - dense.log_det_s()).abs(),
        ..Default::default()
    };
    rep.log_det = rep
        .log_det
        .max((crate::weights::log_det_s(theta.eta(), seq)? - dense.log_det_s()).abs());

    let tr = g_traces(theta.eta(), seq)?;
    let masks = [
        (Mask::Identity, DMatrix::identity(dense.j.nrows(), dense.j.nrows())),
        (Mask::Within, dense.j.clone()),
        (Mask::TimeMean, dense.time_mean_mask()),
        (Mask::UnitMean, dense.unit_mean_mask()),
    ];
    for (op, g) in [GOperator::G1, GOperator::G2, GOperator::G3].iter().zip(dense.g.iter()) {
        for (mask, m) in &masks {
            let dev = (tr.get(*op, *mask) - (g * m).trace()).abs();
            rep.masked_traces = rep.masked_traces.max(dev);
        }
    }
    rep.masked_traces = rep
        .masked_traces
        .max((tr.g1_squared - (&dense.g[0] * &dense.g[0]).trace()).abs());

    rep.loglik = (lik.loglik(theta)? - dense.loglik(data, Some(w0), theta)?).abs();

    let d = theta.dims();
    let nt = data.nt() as f64;
    let f = |x: &DVector<f64>| -> Result<f64> {
        let th = ParamVector::unpack(x, d)?;
        let dm = DenseModel::new(seq, th.eta())?;
        dm.loglik(data, Some(w0), &th)
    };
    let fd = fd_gradient(f, &theta.pack(), 1e-6)? / nt;
    rep.score = (lik.score(theta)? - fd).amax();

    if theta.delta.iter().all(|v| *v == 0.0) {
        let block = lik.information_plugin(theta)?;
        let dense_info = dense.information_plugin(data, w0, theta)?;
        rep.information = (block - dense_info).amax();
    }
    Ok(rep)
}

/// Kolmogorov-Smirnov statistic sup |F_n - F|.
pub fn ks_statistic<F: Fn(f64) -> f64>(sample: &[f64], cdf: F) -> f64 {
    let mut xs: Vec<f64> = sample.to_vec();
    xs.sort_by(f64::total_cmp);
    let m = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / m).max((i + 1) as f64 / m - f)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic Kolmogorov p-value for statistic `d` on `m` observations.
pub fn ks_pvalue(d: f64, m: usize) -> f64 {
    let sm = (m as f64).sqrt();
    let lam = (sm + 0.12 + 0.11 / sm) * d;
    if lam < 1e-3 {
        return 1.0;
    }
    let mut total = 0.0;
    for k in 1..=200 {
        let kf = k as f64;
        let term = 2.0 * (-1f64).powi(k - 1) * (-2.0 * kf * kf * lam * lam).exp();
        total += term;
        if term.abs() < 1e-16 {
            break;
        }
    }
    total.clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn quadratic_is_exact() {
        let f = |x: &DVector<f64>| Ok(x[0] * x[0] + 3.0 * x[0] * x[1] - 2.0 * x[1] * x[1] + x[1]);
        let x = DVector::from_vec(vec![0.7, -1.2]);
        let g = fd_gradient(f, &x, 1e-4).unwrap();
        assert_abs_diff_eq!(g[0], 2.0 * 0.7 + 3.0 * -1.2, epsilon = 1e-9);
        assert_abs_diff_eq!(g[1], 3.0 * 0.7 - 4.0 * -1.2 + 1.0, epsilon = 1e-9);
        let h = fd_hessian(f, &x, 1e-3).unwrap();
        assert_abs_diff_eq!(h, DMatrix::from_row_slice(2, 2, &[2.0, 3.0, 3.0, -4.0]), epsilon = 1e-6);
    }

    #[test]
    fn zero_step_rejected() {
        let f = |x: &DVector<f64>| Ok(x[0]);
        assert!(fd_gradient(f, &DVector::zeros(1), 0.0).is_err());
        assert!(fd_hessian(f, &DVector::zeros(1), 0.0).is_err());
    }

    #[test]
    fn nonfinite_objective_rejected() {
        let g = |_: &DVector<f64>| Ok(f64::NAN);
        assert!(matches!(fd_gradient(g, &DVector::zeros(1), 1e-6), Err(Error::NonFinite(_))));
    }

    #[test]
    fn size_cap() {
        let w = DMatrix::from_fn(9, 9, |i, j| if i == j { 0.0 } else { 1.0 / 8.0 });
        let seq = WeightSequence::new(None, vec![w; 8]).unwrap();
        assert_eq!(DenseModel::new(&seq, [0.0; 3]).unwrap_err(), Error::TooLarge(72));
    }

    #[test]
    fn ks_uniform_sample() {
        let sample: Vec<f64> = (0..1000).map(|i| (i as f64 + 0.5) / 1000.0).collect();
        let d = ks_statistic(&sample, |x| x);
        assert!(d <= 0.0005 + 1e-12);
        assert!(ks_pvalue(d, 1000) > 0.99);
        let shifted: Vec<f64> = sample.iter().map(|x| x * x).collect();
        assert!(ks_pvalue(ks_statistic(&shifted, |x| x), 1000) < 1e-6);
    }
}
