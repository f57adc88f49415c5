//! Restricted and unrestricted maximum-likelihood fits and the analytic bias correction.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::{Likelihood, SIGMA_FLOOR};
use crate::panel::{within_transform, within_vector, Dims, PanelData, ParamVector};
use crate::weights::{spectral_guard, WeightSequence};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Which parameters were held at zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Restriction {
    /// delta = 0 and eta = 0.
    JointNull,
    /// delta = 0.
    DeltaNull,
    None,
}

impl std::str::FromStr for Restriction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint-null" => Ok(Self::JointNull),
            "delta-null" => Ok(Self::DeltaNull),
            "none" => Ok(Self::None),
            other => Err(Error::InvalidInput(format!("unknown restriction '{other}'"))),
        }
    }
}

/// Outcome of one likelihood fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub theta: ParamVector,
    /// Bias-corrected estimate theta - B1/T - B2/n.
    pub theta_bc: ParamVector,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub restriction: Restriction,
    /// Which of (lambda, gamma, rho) were estimated.
    pub free_eta: [bool; 3],
}

/// Optimizer settings for the iterative fits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Which of (lambda, gamma, rho) are estimated; the rest stay at zero.
    pub free_eta: [bool; 3],
    pub max_iter: usize,
    pub grad_tol: f64,
    pub step_tol: f64,
    /// Extra randomly perturbed starting points.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            free_eta: [true; 3],
            max_iter: 200,
            grad_tol: 1e-7,
            step_tol: 1e-9,
            restarts: 0,
            seed: 0,
        }
    }
}

impl FitOptions {
    /// Five perturbed starts in addition to the default one.
    pub fn with_multistart(mut self, seed: u64) -> Self {
        self.restarts = 5;
        self.seed = seed;
        self
    }
}

/// Least squares of `y` on the columns of `x` (both already within-transformed).
pub fn within_ols(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.ncols() == 0 {
        return Ok(DMatrix::zeros(0, y.ncols()));
    }
    let singular = || Error::Singular("within cross-product of regressors".into());
    let xtx = x.transpose() * x;
    let scale = xtx.diagonal().max();
    let chol = xtx.cholesky().ok_or_else(singular)?;
    let pivot = chol.l_dirty().diagonal().iter().fold(f64::INFINITY, |m, d| m.min(d * d));
    if !(pivot > 1e-12 * scale) {
        return Err(singular());
    }
    Ok(chol.solve(&(x.transpose() * y)))
}

fn vec_to_mat(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v.as_slice())
}

/// Closed-form driver-equation estimates (Phi_2, Sigma_eps) and J eps.
fn driver_fit(data: &PanelData) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (n, t) = (data.n(), data.periods());
    let jk = within_transform(&data.stacked_k(), n, t)?;
    let jz = within_transform(&data.stacked_z(), n, t)?;
    let phi2 = within_ols(&jk, &jz)?;
    let eps = &jz - &jk * &phi2;
    let sigma = eps.transpose() * &eps / data.nt() as f64;
    if sigma.clone().cholesky().is_none() {
        return Err(Error::NotPositiveDefinite("estimated Sigma_eps".into()));
    }
    Ok((phi2, sigma))
}

/// Restricted fit with delta = 0 and eta = 0, all in closed form.
pub fn fit_joint_null(data: &PanelData) -> Result<FitResult> {
    let (n, t) = (data.n(), data.periods());
    let nt = data.nt() as f64;
    let dims = data.dims();
    let jx = within_transform(&data.stacked_x1(), n, t)?;
    let jy = vec_to_mat(&within_vector(&data.stacked_y(), n, t)?);
    let beta = within_ols(&jx, &jy)?;
    let resid = &jy - &jx * &beta;
    let s2 = resid.norm_squared() / nt;
    if !(s2 > SIGMA_FLOOR) {
        return Err(Error::DegenerateFit(s2));
    }
    let (phi2, sigma) = driver_fit(data)?;
    let mut theta = ParamVector::zeros(dims);
    theta.beta = beta.column(0).into_owned();
    theta.set_phi2(&phi2);
    theta.sigma_xi2 = s2;
    theta.sigma_eps = sigma.clone();
    let log_det_sigma = sigma.determinant().ln();
    let loglik = -0.5 * nt * (LN_2PI + s2.ln() + 1.0) - 0.5 * nt * (log_det_sigma + dims.p as f64);

    // The free block (beta, Phi_2, sigma^2, alpha) never touches the weights, so
    // a zero weight sequence gives the same correction as any other.
    let zeros = WeightSequence::new(None, vec![DMatrix::zeros(n, n); t])?;
    let lik = Likelihood::new(data, &zeros)?;
    let theta_bc = bias_correct_with(&lik, &theta, Restriction::JointNull, None)?;
    Ok(FitResult {
        theta,
        theta_bc,
        loglik,
        converged: true,
        iterations: 0,
        restriction: Restriction::JointNull,
        free_eta: [false; 3],
    })
}

/// Restricted fit with delta = 0: eta by quasi-Newton on the profile likelihood.
pub fn fit_null_delta(data: &PanelData, seq: &WeightSequence, opts: &FitOptions) -> Result<FitResult> {
    let lik = Likelihood::new(data, seq)?;
    let dims = data.dims();
    let free: Vec<usize> = (0..3).filter(|&i| opts.free_eta[i]).collect();
    check_initials(&lik, &opts.free_eta)?;
    let (phi2, sigma) = driver_fit(data)?;
    let profile = EtaProfile::new(&lik, &free, None)?;
    let obj = |x: &DVector<f64>| profile.objective(x, seq);
    let x0 = DVector::zeros(free.len());
    let best = multistart(&obj, &x0, opts)?;

    let eta = profile.eta(&best.x);
    let (beta, s2) = profile.concentrate(&eta)?;
    let mut theta = ParamVector::zeros(dims);
    theta.lambda = eta[0];
    theta.gamma = eta[1];
    theta.rho = eta[2];
    theta.beta = beta;
    theta.sigma_xi2 = s2;
    theta.set_phi2(&phi2);
    theta.sigma_eps = sigma;
    let loglik = lik.loglik(&theta)?;
    let theta_bc = bias_correct_with(&lik, &theta, Restriction::DeltaNull, Some(&opts.free_eta))?;
    if !best.converged {
        return Err(Error::NoConvergence {
            iterations: best.iterations,
            grad_norm: best.grad_norm,
        });
    }
    Ok(FitResult {
        theta,
        theta_bc,
        loglik,
        converged: best.converged,
        iterations: best.iterations,
        restriction: Restriction::DeltaNull,
        free_eta: opts.free_eta,
    })
}

/// Unrestricted fit: (eta, delta, Phi_2) by quasi-Newton with (beta, sigma^2, Sigma_eps) concentrated.
pub fn fit_full(data: &PanelData, seq: &WeightSequence, opts: &FitOptions) -> Result<FitResult> {
    let lik = Likelihood::new(data, seq)?;
    let dims = data.dims();
    let free: Vec<usize> = (0..3).filter(|&i| opts.free_eta[i]).collect();
    check_initials(&lik, &opts.free_eta)?;
    let (phi2_0, _) = driver_fit(data)?;
    let profile = EtaProfile::new(&lik, &free, Some(dims))?;
    let obj = |x: &DVector<f64>| profile.objective(x, seq);
    let ne = free.len();
    let mut x0 = DVector::zeros(ne + dims.p + phi2_0.len());
    for (i, v) in phi2_0.iter().enumerate() {
        x0[ne + dims.p + i] = *v;
    }
    let best = multistart(&obj, &x0, opts)?;
    let theta = profile.assemble_full(&best.x)?;
    let loglik = lik.loglik(&theta)?;
    let theta_bc = bias_correct_with(&lik, &theta, Restriction::None, Some(&opts.free_eta))?;
    if !best.converged {
        return Err(Error::NoConvergence {
            iterations: best.iterations,
            grad_norm: best.grad_norm,
        });
    }
    Ok(FitResult {
        theta,
        theta_bc,
        loglik,
        converged: best.converged,
        iterations: best.iterations,
        restriction: Restriction::None,
        free_eta: opts.free_eta,
    })
}

fn check_initials(lik: &Likelihood<'_>, free: &[bool; 3]) -> Result<()> {
    if (free[1] || free[2]) && lik.jylag().is_none() {
        return Err(Error::MissingInitial("Y_0 is required to estimate gamma or rho"));
    }
    if free[2] && lik.jwylag().is_none() {
        return Err(Error::MissingInitial("W_0 is required to estimate rho"));
    }
    Ok(())
}

/// Concentrated (in beta and sigma^2, and in Sigma_eps for the full fit) objective.
struct EtaProfile<'a, 'b> {
    lik: &'b Likelihood<'a>,
    free: Vec<usize>,
    /// Some(dims) when delta and Phi_2 are also optimized.
    full: Option<Dims>,
    /// J-transformed columns [y, w1y, ylag, wylag] (missing ones zero).
    base: [DVector<f64>; 4],
    gram: DMatrix<f64>,
    xtx_chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    cross: DMatrix<f64>,
}

impl<'a, 'b> EtaProfile<'a, 'b> {
    fn new(lik: &'b Likelihood<'a>, free: &[usize], full: Option<Dims>) -> Result<Self> {
        let len = lik.jy().len();
        let zero = DVector::zeros(len);
        let base = [
            lik.jy().clone(),
            lik.jwy().clone(),
            lik.jylag().cloned().unwrap_or_else(|| zero.clone()),
            lik.jwylag().cloned().unwrap_or(zero),
        ];
        let mut cols = DMatrix::zeros(len, 4);
        for (i, c) in base.iter().enumerate() {
            cols.set_column(i, c);
        }
        let gram = cols.transpose() * &cols;
        let x = lik.jx1();
        let xtx_chol = (x.transpose() * x)
            .cholesky()
            .ok_or_else(|| Error::Singular("within cross-product of regressors".into()))?;
        let cross = x.transpose() * &cols;
        Ok(Self {
            lik,
            free: free.to_vec(),
            full,
            base,
            gram,
            xtx_chol,
            cross,
        })
    }

    fn eta(&self, x: &DVector<f64>) -> [f64; 3] {
        let mut eta = [0.0; 3];
        for (k, &i) in self.free.iter().enumerate() {
            eta[i] = x[k];
        }
        eta
    }

    fn weights(eta: &[f64; 3]) -> DVector<f64> {
        DVector::from_vec(vec![1.0, -eta[0], -eta[1], -eta[2]])
    }

    /// (beta(eta), sigma^2(eta)) at delta = 0 using the precomputed Gram matrices.
    fn concentrate(&self, eta: &[f64; 3]) -> Result<(DVector<f64>, f64)> {
        let v = Self::weights(eta);
        let xc = &self.cross * &v;
        let beta = self.xtx_chol.solve(&xc);
        let ssr = (v.transpose() * &self.gram * &v)[(0, 0)] - xc.dot(&beta);
        let s2 = ssr / self.lik.nt();
        if !(s2 > SIGMA_FLOOR) {
            return Err(Error::DegenerateFit(s2));
        }
        Ok((beta, s2))
    }

    fn split_full(&self, x: &DVector<f64>, d: Dims) -> (DVector<f64>, DMatrix<f64>) {
        let ne = self.free.len();
        let delta = x.rows(ne, d.p).into_owned();
        let phi2 = DMatrix::from_column_slice(d.k_phi(), d.p, x.rows(ne + d.p, d.k_phi() * d.p).as_slice());
        (delta, phi2)
    }

    /// Profile pieces of the full fit: (beta, sigma^2, Sigma_eps, ln|Sigma_eps|).
    fn concentrate_full(&self, x: &DVector<f64>, d: Dims) -> Result<(DVector<f64>, f64, DMatrix<f64>, f64)> {
        let eta = self.eta(x);
        let (delta, phi2) = self.split_full(x, d);
        let jeps = self.lik.jz() - self.lik.jk() * &phi2;
        let sigma = jeps.transpose() * &jeps / self.lik.nt();
        let chol = sigma
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("profiled Sigma_eps".into()))?;
        let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let mut c = &self.base[0] - &self.base[1] * eta[0] - &self.base[2] * eta[1] - &self.base[3] * eta[2];
        c -= &jeps * &delta;
        let x1 = self.lik.jx1();
        let beta = self.xtx_chol.solve(&(x1.transpose() * &c));
        let r = c - x1 * &beta;
        let s2 = r.norm_squared() / self.lik.nt();
        if !(s2 > SIGMA_FLOOR) {
            return Err(Error::DegenerateFit(s2));
        }
        Ok((beta, s2, sigma, log_det))
    }

    /// Negative profile log-likelihood divided by nT; +inf outside the stability region.
    fn objective(&self, x: &DVector<f64>, seq: &WeightSequence) -> f64 {
        let eta = self.eta(x);
        if !spectral_guard(eta, seq) {
            return f64::INFINITY;
        }
        let Ok(log_det) = self.lik.spectrum().log_det(eta[0], seq) else {
            return f64::INFINITY;
        };
        let nt = self.lik.nt();
        let value = match self.full {
            None => match self.concentrate(&eta) {
                Ok((_, s2)) => log_det - 0.5 * nt * s2.ln(),
                Err(_) => return f64::INFINITY,
            },
            Some(d) => match self.concentrate_full(x, d) {
                Ok((_, s2, _, ld)) => log_det - 0.5 * nt * s2.ln() - 0.5 * nt * ld,
                Err(_) => return f64::INFINITY,
            },
        };
        -value / nt
    }

    fn assemble_full(&self, x: &DVector<f64>) -> Result<ParamVector> {
        let d = self.full.expect("full profile");
        let eta = self.eta(x);
        let (delta, phi2) = self.split_full(x, d);
        let (beta, s2, sigma, _) = self.concentrate_full(x, d)?;
        let mut theta = ParamVector::zeros(d);
        theta.lambda = eta[0];
        theta.gamma = eta[1];
        theta.rho = eta[2];
        theta.beta = beta;
        theta.delta = delta;
        theta.set_phi2(&phi2);
        theta.sigma_xi2 = s2;
        theta.sigma_eps = sigma;
        Ok(theta)
    }
}

/// Result of one quasi-Newton run.
#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: DVector<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    pub grad_norm: f64,
}

fn fd_grad<F: Fn(&DVector<f64>) -> f64>(f: &F, x: &DVector<f64>, fx: f64) -> DVector<f64> {
    let mut g = DVector::zeros(x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let h = 1e-6 * (1.0 + x[i].abs());
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        g[i] = match (fp.is_finite(), fm.is_finite()) {
            (true, true) => (fp - fm) / (2.0 * h),
            (true, false) => (fp - fx) / h,
            (false, true) => (fx - fm) / h,
            (false, false) => f64::NAN,
        };
    }
    g
}

/// BFGS with central finite-difference gradients and Armijo backtracking.
pub fn minimize<F: Fn(&DVector<f64>) -> f64>(f: &F, x0: &DVector<f64>, opts: &FitOptions) -> Result<Minimum> {
    let m = x0.len();
    let mut x = x0.clone();
    let mut fx = f(&x);
    if !fx.is_finite() {
        return Err(Error::Unstable {
            lambda: x.get(0).copied().unwrap_or(0.0),
            gamma: x.get(1).copied().unwrap_or(0.0),
            rho: x.get(2).copied().unwrap_or(0.0),
        });
    }
    if m == 0 {
        return Ok(Minimum {
            x,
            value: fx,
            iterations: 0,
            converged: true,
            grad_norm: 0.0,
        });
    }
    let mut g = fd_grad(f, &x, fx);
    let mut h = DMatrix::<f64>::identity(m, m);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iter {
        let gnorm = g.amax();
        if !gnorm.is_finite() {
            break;
        }
        if gnorm < opts.grad_tol {
            converged = true;
            break;
        }
        iterations += 1;
        let mut dir = -(&h * &g);
        if dir.dot(&g) >= 0.0 {
            h = DMatrix::identity(m, m);
            dir = -g.clone();
        }
        let slope = dir.dot(&g);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xn = &x + &dir * step;
            let fnew = f(&xn);
            if fnew.is_finite() && fnew <= fx + 1e-4 * step * slope {
                accepted = Some((xn, fnew));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fnew)) = accepted else {
            // no descent possible at this resolution
            converged = g.amax() < opts.grad_tol.sqrt();
            break;
        };
        let s = &xn - &x;
        let gn = fd_grad(f, &xn, fnew);
        let yv = &gn - &g;
        let sy = s.dot(&yv);
        if sy > 1e-16 {
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(m, m);
            let a = &i - &s * yv.transpose() * rho;
            let b = &i - &yv * s.transpose() * rho;
            h = &a * &h * &b + &s * s.transpose() * rho;
        }
        let step_norm = s.amax();
        x = xn;
        fx = fnew;
        g = gn;
        if step_norm < opts.step_tol {
            converged = true;
            break;
        }
    }
    Ok(Minimum {
        x,
        value: fx,
        iterations,
        converged,
        grad_norm: g.amax(),
    })
}

fn multistart<F: Fn(&DVector<f64>) -> f64>(f: &F, x0: &DVector<f64>, opts: &FitOptions) -> Result<Minimum> {
    let mut best = minimize(f, x0, opts)?;
    if opts.restarts == 0 {
        return Ok(best);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for _ in 0..opts.restarts {
        let start = x0.map(|v| v + rng.random_range(-0.1..0.1));
        if !f(&start).is_finite() {
            continue;
        }
        let cand = minimize(f, &start, opts)?;
        if cand.value < best.value || (!best.converged && cand.converged) {
            best = cand;
        }
    }
    Ok(best)
}

fn free_indices(lik: &Likelihood<'_>, restriction: Restriction, free_eta: Option<&[bool; 3]>) -> Vec<usize> {
    let idx = lik.index();
    let mut free = Vec::with_capacity(idx.len);
    if restriction != Restriction::JointNull {
        let mask = free_eta.copied().unwrap_or([true; 3]);
        free.extend((0..3).filter(|&i| mask[i]));
    }
    free.extend(idx.beta.clone());
    if restriction == Restriction::None {
        free.extend(idx.delta.clone());
    }
    free.extend(idx.phi2.clone());
    free.push(idx.sigma2);
    free.extend(idx.alpha.clone());
    free
}

/// Observed information -d score / d theta' from central differences of the analytic score.
pub fn observed_information(lik: &Likelihood<'_>, theta: &ParamVector) -> Result<DMatrix<f64>> {
    let d = theta.dims();
    let x = theta.pack();
    let m = x.len();
    let mut jac = DMatrix::zeros(m, m);
    for i in 0..m {
        let h = 1e-5 * (1.0 + x[i].abs());
        let mut xp = x.clone();
        xp[i] += h;
        let sp = lik.score(&ParamVector::unpack(&xp, d)?)?;
        xp[i] = x[i] - h;
        let sm = lik.score(&ParamVector::unpack(&xp, d)?)?;
        jac.set_column(i, &((sp - sm) / (2.0 * h)));
    }
    let info = -(&jac + jac.transpose()) * 0.5;
    Ok(info)
}

fn bias_correct_with(
    lik: &Likelihood<'_>,
    theta: &ParamVector,
    restriction: Restriction,
    free_eta: Option<&[bool; 3]>,
) -> Result<ParamVector> {
    let free = free_indices(lik, restriction, free_eta);
    let info = match restriction {
        Restriction::None => observed_information(lik, theta)?,
        _ => lik.information_plugin(theta)?,
    };
    let a1 = lik.bias_a1(theta)?;
    let a2 = lik.bias_a2(theta)?;
    let sub = DMatrix::from_fn(free.len(), free.len(), |i, j| info[(free[i], free[j])]);
    let a1f = DVector::from_iterator(free.len(), free.iter().map(|&i| a1[i]));
    let a2f = DVector::from_iterator(free.len(), free.iter().map(|&i| a2[i]));
    let lu = sub.lu();
    let b1 = lu
        .solve(&a1f)
        .ok_or_else(|| Error::Singular("information block of the free parameters".into()))?;
    let b2 = lu
        .solve(&a2f)
        .ok_or_else(|| Error::Singular("information block of the free parameters".into()))?;
    let (n, t) = (lik.n() as f64, lik.periods() as f64);
    let mut flat = theta.pack();
    for (k, &i) in free.iter().enumerate() {
        flat[i] -= b1[k] / t + b2[k] / n;
    }
    ParamVector::unpack(&flat, theta.dims())
}

/// Bias-corrected estimate for a finished fit.
pub fn bias_correct(fit: &FitResult, data: &PanelData, seq: &WeightSequence) -> Result<ParamVector> {
    let lik = Likelihood::new(data, seq)?;
    bias_correct_with(&lik, &fit.theta, fit.restriction, Some(&fit.free_eta))
}
