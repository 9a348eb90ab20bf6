//! Concrete PDE and control problems together with their reference values.
//!
//! PDEs are written in the canonical form
//! `∂ₜu + μ·Du + ½Tr(σσᵀD²u) = driver`, `u(T,·) = g`, where `(μ, σ)` are the
//! coefficients of the training diffusion. For the portfolio problems the
//! training process differs from the linear part of the HJB equation; the
//! difference is folded into the driver so the representation along the
//! training process is exact.

use std::sync::Arc;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::Activation;
use crate::sim::{fill_normals, ConstantCoefficients, Diffusion, GeometricBrownian};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProblemError {
    #[error("unknown problem id `{0}`")]
    UnknownId(String),
    #[error("invalid parameter: {0}")]
    Invalid(String),
}

/// Semilinear driver `f(t, x, y, z)` with `z = σᵀDu`.
pub trait SemilinearDriver: Send + Sync {
    /// Returns `(f, ∂f/∂y)` and writes `∂f/∂z` into `dz`.
    fn eval(&self, t: f64, x: &[f64], y: f64, z: &[f64], dz: &mut [f64]) -> (f64, f64);
}

/// Fully nonlinear driver `F(t, x, y, z, γ)` with `z = Du`, `γ = D²u` (row-major).
pub trait FullyNonlinearDriver: Send + Sync {
    /// Returns `(F, ∂F/∂y)` and writes `∂F/∂z` into `dz`.
    fn eval(&self, t: f64, x: &[f64], y: f64, z: &[f64], gamma: &[f64], dz: &mut [f64]) -> (f64, f64);

    fn value(&self, t: f64, x: &[f64], y: f64, z: &[f64], gamma: &[f64]) -> f64 {
        let mut dz = vec![0.0; z.len()];
        self.eval(t, x, y, z, gamma, &mut dz).0
    }
}

#[derive(Clone)]
pub enum Driver {
    Semilinear(Arc<dyn SemilinearDriver>),
    FullyNonlinear(Arc<dyn FullyNonlinearDriver>),
}

/// Terminal condition `g` with optional derivatives.
pub trait Terminal: Send + Sync {
    fn value(&self, x: &[f64]) -> f64;
    /// Writes `Dg(x)`; returns `false` when no gradient is available.
    fn gradient(&self, _x: &[f64], _out: &mut [f64]) -> bool {
        false
    }
    /// Writes `D²g(x)` row-major; returns `false` when unavailable.
    fn hessian(&self, _x: &[f64], _out: &mut [f64]) -> bool {
        false
    }
}

/// Closed-form solution `u(t, x)` with analytic derivatives.
pub trait ReferenceSolution: Send + Sync {
    fn value(&self, t: f64, x: &[f64]) -> f64;
    fn time_derivative(&self, t: f64, x: &[f64]) -> f64;
    fn gradient(&self, t: f64, x: &[f64], out: &mut [f64]);
    fn hessian(&self, t: f64, x: &[f64], out: &mut [f64]);
}

#[derive(Clone)]
pub struct PdeProblem {
    pub id: String,
    pub dim: usize,
    pub maturity: f64,
    pub x0: Vec<f64>,
    pub dynamics: Arc<dyn Diffusion>,
    pub driver: Driver,
    pub terminal: Arc<dyn Terminal>,
    pub reference_value: Option<f64>,
    pub reference_solution: Option<Arc<dyn ReferenceSolution>>,
    /// Hidden-layer activation used for this problem's networks.
    pub activation: Activation,
}

impl std::fmt::Debug for PdeProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PdeProblem")
            .field("id", &self.id)
            .field("dim", &self.dim)
            .field("maturity", &self.maturity)
            .field("x0", &self.x0)
            .field("reference_value", &self.reference_value)
            .finish_non_exhaustive()
    }
}

impl PdeProblem {
    pub fn is_semilinear(&self) -> bool {
        matches!(self.driver, Driver::Semilinear(_))
    }

    /// PDE residual of the reference solution at `(t, x)`, using its analytic
    /// derivatives. `None` without a reference solution.
    pub fn reference_residual(&self, t: f64, x: &[f64]) -> Option<f64> {
        let u = self.reference_solution.as_ref()?;
        let d = self.dim;
        let (mut mu, mut sig) = (vec![0.0; d], vec![0.0; d * d]);
        self.dynamics.drift(t, x, &mut mu);
        self.dynamics.diffusion(t, x, &mut sig);
        let (mut du, mut d2u) = (vec![0.0; d], vec![0.0; d * d]);
        u.gradient(t, x, &mut du);
        u.hessian(t, x, &mut d2u);
        let y = u.value(t, x);
        let mut lhs = u.time_derivative(t, x) + mu.iter().zip(&du).map(|(a, b)| a * b).sum::<f64>();
        // ½ Tr(σσᵀ D²u)
        for a in 0..d {
            for b in 0..d {
                let sst: f64 = (0..d).map(|k| sig[a * d + k] * sig[b * d + k]).sum();
                lhs += 0.5 * sst * d2u[b * d + a];
            }
        }
        let mut dz = vec![0.0; d];
        let rhs = match &self.driver {
            Driver::Semilinear(f) => {
                let mut z = vec![0.0; d];
                crate::sim::mat_t_vec(&sig, &du, &mut z);
                f.eval(t, x, y, &z, &mut dz).0
            }
            Driver::FullyNonlinear(f) => f.eval(t, x, y, &du, &d2u, &mut dz).0,
        };
        Some(lhs - rhs)
    }
}

// ---------------------------------------------------------------------------
// Generic drivers and terminal conditions

#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroDriver;

impl SemilinearDriver for ZeroDriver {
    fn eval(&self, _t: f64, _x: &[f64], _y: f64, _z: &[f64], dz: &mut [f64]) -> (f64, f64) {
        dz.iter_mut().for_each(|v| *v = 0.0);
        (0.0, 0.0)
    }
}

impl FullyNonlinearDriver for ZeroDriver {
    fn eval(&self, _t: f64, _x: &[f64], _y: f64, _z: &[f64], _g: &[f64], dz: &mut [f64]) -> (f64, f64) {
        dz.iter_mut().for_each(|v| *v = 0.0);
        (0.0, 0.0)
    }
}

/// Fully nonlinear view of a semilinear driver under `σ = I`: `F(t,x,y,z,γ) = f(t,x,y,z)`.
pub struct GammaFree(pub Arc<dyn SemilinearDriver>);

impl FullyNonlinearDriver for GammaFree {
    fn eval(&self, t: f64, x: &[f64], y: f64, z: &[f64], _g: &[f64], dz: &mut [f64]) -> (f64, f64) {
        self.0.eval(t, x, y, z, dz)
    }
}

/// `g(x) = aᵀx + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineTerminal {
    pub slope: Vec<f64>,
    pub intercept: f64,
}

impl Terminal for AffineTerminal {
    fn value(&self, x: &[f64]) -> f64 {
        self.intercept + self.slope.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
    }
    fn gradient(&self, _x: &[f64], out: &mut [f64]) -> bool {
        out.copy_from_slice(&self.slope);
        true
    }
    fn hessian(&self, _x: &[f64], out: &mut [f64]) -> bool {
        out.iter_mut().for_each(|v| *v = 0.0);
        true
    }
}

/// `g(x) = xᵀAx` for symmetric `A` (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticTerminal {
    pub matrix: Vec<f64>,
    /// Whether `D²g` is exposed; turning it off exercises fallback estimators.
    pub expose_hessian: bool,
}

impl QuadraticTerminal {
    /// `g(x) = |x|²`.
    pub fn squared_norm(d: usize) -> Self {
        Self {
            matrix: crate::sim::diag(&vec![1.0; d]),
            expose_hessian: true,
        }
    }
}

impl Terminal for QuadraticTerminal {
    fn value(&self, x: &[f64]) -> f64 {
        let d = x.len();
        let mut s = 0.0;
        for a in 0..d {
            for b in 0..d {
                s += x[a] * self.matrix[a * d + b] * x[b];
            }
        }
        s
    }
    fn gradient(&self, x: &[f64], out: &mut [f64]) -> bool {
        let d = x.len();
        for a in 0..d {
            out[a] = 2.0 * (0..d).map(|b| self.matrix[a * d + b] * x[b]).sum::<f64>();
        }
        true
    }
    fn hessian(&self, _x: &[f64], out: &mut [f64]) -> bool {
        if !self.expose_hessian {
            return false;
        }
        for (o, m) in out.iter_mut().zip(&self.matrix) {
            *o = 2.0 * m;
        }
        true
    }
}

// ---------------------------------------------------------------------------
// CVA in a d-dimensional Black–Scholes model

/// `f(t,x,y,z) = −β (y⁺ − y)`.
#[derive(Debug, Clone, Copy)]
pub struct CvaDriver {
    pub beta: f64,
}

impl SemilinearDriver for CvaDriver {
    fn eval(&self, _t: f64, _x: &[f64], y: f64, _z: &[f64], dz: &mut [f64]) -> (f64, f64) {
        dz.iter_mut().for_each(|v| *v = 0.0);
        if y < 0.0 {
            (self.beta * y, self.beta)
        } else {
            (0.0, 0.0)
        }
    }
}

/// Straddle `g(x) = |Σxᵢ − d| − 0.1`. The gradient uses the zero subgradient at the kink.
#[derive(Debug, Clone, Copy)]
pub struct Straddle {
    pub dim: usize,
}

impl Terminal for Straddle {
    fn value(&self, x: &[f64]) -> f64 {
        (x.iter().sum::<f64>() - self.dim as f64).abs() - 0.1
    }
    fn gradient(&self, x: &[f64], out: &mut [f64]) -> bool {
        let s = x.iter().sum::<f64>() - self.dim as f64;
        let sign = if s > 0.0 {
            1.0
        } else if s < 0.0 {
            -1.0
        } else {
            0.0
        };
        out.iter_mut().for_each(|v| *v = sign);
        true
    }
}

/// CVA values at `X₀ = 1, T = 1, β = 0.03, σ = 0.2` (50 time steps).
pub const CVA_REFERENCE: [(usize, f64); 6] = [
    (1, 0.05950),
    (3, 0.17797),
    (5, 0.25956),
    (10, 0.40930),
    (15, 0.52353),
    (30, 0.78239),
];

pub fn make_cva_problem(dim: usize, vol: f64, beta: f64, maturity: f64) -> Result<PdeProblem, ProblemError> {
    if dim == 0 {
        return Err(ProblemError::Invalid("cva dimension must be at least 1".into()));
    }
    let default_params = vol == 0.2 && beta == 0.03 && maturity == 1.0;
    let reference_value = default_params
        .then(|| CVA_REFERENCE.iter().find(|(d, _)| *d == dim).map(|(_, v)| *v))
        .flatten();
    Ok(PdeProblem {
        id: "cva".into(),
        dim,
        maturity,
        x0: vec![1.0; dim],
        dynamics: Arc::new(GeometricBrownian { dim, vol }),
        driver: Driver::Semilinear(Arc::new(CvaDriver { beta })),
        terminal: Arc::new(Straddle { dim }),
        reference_value,
        reference_solution: None,
        activation: Activation::Relu,
    })
}

// ---------------------------------------------------------------------------
// Portfolio selection with exponential utility

/// `U(x) = −exp(−η x)` applied to the wealth coordinate `x[0]`.
#[derive(Debug, Clone, Copy)]
pub struct ExponentialUtility {
    pub eta: f64,
}

impl Terminal for ExponentialUtility {
    fn value(&self, x: &[f64]) -> f64 {
        -(-self.eta * x[0]).exp()
    }
    fn gradient(&self, x: &[f64], out: &mut [f64]) -> bool {
        out.iter_mut().for_each(|v| *v = 0.0);
        out[0] = self.eta * (-self.eta * x[0]).exp();
        true
    }
    fn hessian(&self, x: &[f64], out: &mut [f64]) -> bool {
        out.iter_mut().for_each(|v| *v = 0.0);
        out[0] = -self.eta * self.eta * (-self.eta * x[0]).exp();
        true
    }
}

/// Ornstein–Uhlenbeck volatility factor with premium `λ(v) = λ v`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolFactor {
    pub lambda: f64,
    pub theta: f64,
    pub nu: f64,
    pub kappa: f64,
    pub rho: f64,
}

/// Magnitudes of `∂²ₓₓu` below this are pushed out to it, keeping the sign.
pub const HESSIAN_FLOOR: f64 = 1e-6;

#[inline]
pub fn guard_denominator(g: f64) -> f64 {
    if g.abs() >= HESSIAN_FLOOR {
        g
    } else if g > 0.0 {
        HESSIAN_FLOOR
    } else {
        -HESSIAN_FLOOR
    }
}

/// HJB driver for exponential-utility portfolio selection, state `(x, v₁..vₙ)`.
///
/// The nonlinear part is `½R(v)(∂ₓu)²/∂²ₓₓu + Σ[ρλ(v)ν ∂ₓu ∂²ₓᵥu/∂²ₓₓu + ½ρ²ν²(∂²ₓᵥu)²/∂²ₓₓu]`,
/// with `R(v) = premium² + Σ λᵢ(vᵢ)²`. The linear part of the HJB equation is
/// swapped for the training generator via
/// `F = NL + (μ_train − μ_pde)·z + ½Tr((σσᵀ_train − σσᵀ_pde) γ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PortfolioDriver {
    /// Constant market price of risk (Merton case); zero when factors carry the premium.
    pub premium: f64,
    pub factors: Vec<VolFactor>,
    pub train_drift: Vec<f64>,
    /// Diagonal of `σσᵀ` of the training process.
    pub train_var: Vec<f64>,
}

impl PortfolioDriver {
    pub fn sharpe_ratio(&self, v: &[f64]) -> f64 {
        self.premium * self.premium
            + self
                .factors
                .iter()
                .zip(v)
                .map(|(f, vi)| (f.lambda * vi).powi(2))
                .sum::<f64>()
    }
}

impl FullyNonlinearDriver for PortfolioDriver {
    fn eval(&self, _t: f64, x: &[f64], _y: f64, z: &[f64], gamma: &[f64], dz: &mut [f64]) -> (f64, f64) {
        let d = x.len();
        let v = &x[1..];
        let g = guard_denominator(gamma[0]);
        let r = self.sharpe_ratio(v);
        let zx = z[0];
        let mut value = 0.5 * r * zx * zx / g;
        let mut dzx = r * zx / g;
        for (i, f) in self.factors.iter().enumerate() {
            let gxv = gamma[i + 1];
            let lam = f.lambda * v[i];
            value += f.rho * lam * f.nu * zx * gxv / g + 0.5 * f.rho * f.rho * f.nu * f.nu * gxv * gxv / g;
            dzx += f.rho * lam * f.nu * gxv / g;
        }
        // Generator swap.
        value += self.train_drift[0] * zx + 0.5 * self.train_var[0] * gamma[0];
        dz[0] = dzx + self.train_drift[0];
        for (i, f) in self.factors.iter().enumerate() {
            let k = i + 1;
            let drift_gap = self.train_drift[k] - f.kappa * (f.theta - v[i]);
            value += drift_gap * z[k] + 0.5 * (self.train_var[k] - f.nu * f.nu) * gamma[k * d + k];
            dz[k] = drift_gap;
        }
        (value, 0.0)
    }
}

/// Exponential-utility value function
/// `u = −exp(−ηx − ½p²(T−t) + Σ qᵢ ψᵢ(T−t, vᵢ))`, where each
/// `ψ(τ, v) = a(τ) + b(τ)v + ½c(τ)v²` solves a Riccati system and
/// `q = 1/(1−ρ²)` linearizes the correlated factor equation.
#[derive(Debug, Clone, PartialEq)]
pub struct PortfolioClosedForm {
    pub eta: f64,
    pub maturity: f64,
    pub premium: f64,
    pub factors: Vec<VolFactor>,
}

const RICCATI_STEPS_PER_UNIT: f64 = 2000.0;

impl PortfolioClosedForm {
    /// Coefficients of the transformed factor equation: mean-reversion
    /// speed, its `κθ` product and the effective squared premium.
    fn transformed(f: &VolFactor) -> (f64, f64, f64) {
        let kappa = f.kappa + f.rho * f.lambda * f.nu;
        (kappa, f.kappa * f.theta, (1.0 - f.rho * f.rho) * f.lambda * f.lambda)
    }

    fn riccati_rhs(f: &VolFactor, s: [f64; 3]) -> [f64; 3] {
        let (k, kt, l2) = Self::transformed(f);
        let [_, b, c] = s;
        let n2 = f.nu * f.nu;
        [kt * b + 0.5 * n2 * (c + b * b), kt * c - k * b + n2 * b * c, -2.0 * k * c + n2 * c * c - l2]
    }

    /// `(a, b, c)` at time-to-maturity `tau` by classical RK4.
    fn riccati(f: &VolFactor, tau: f64) -> [f64; 3] {
        let mut s = [0.0; 3];
        if tau <= 0.0 {
            return s;
        }
        let n = (tau * RICCATI_STEPS_PER_UNIT).ceil().max(1.0) as usize;
        let h = tau / n as f64;
        let add = |s: [f64; 3], k: [f64; 3], w: f64| [s[0] + w * k[0], s[1] + w * k[1], s[2] + w * k[2]];
        for _ in 0..n {
            let k1 = Self::riccati_rhs(f, s);
            let k2 = Self::riccati_rhs(f, add(s, k1, h / 2.0));
            let k3 = Self::riccati_rhs(f, add(s, k2, h / 2.0));
            let k4 = Self::riccati_rhs(f, add(s, k3, h));
            for j in 0..3 {
                s[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
            }
        }
        s
    }

    /// Exponent, factor sensitivities `qᵢ(bᵢ + cᵢvᵢ)`, curvatures `qᵢcᵢ` and `∂ₜ(exponent)`.
    fn parts(&self, t: f64, x: &[f64]) -> (f64, Vec<f64>, Vec<f64>, f64) {
        let tau = self.maturity - t;
        let mut e = -self.eta * x[0] - 0.5 * self.premium * self.premium * tau;
        let mut dt = 0.5 * self.premium * self.premium;
        let mut sens = Vec::with_capacity(self.factors.len());
        let mut curv = Vec::with_capacity(self.factors.len());
        for (f, &v) in self.factors.iter().zip(&x[1..]) {
            let q = 1.0 / (1.0 - f.rho * f.rho);
            let s = Self::riccati(f, tau);
            let r = Self::riccati_rhs(f, s);
            e += q * (s[0] + s[1] * v + 0.5 * s[2] * v * v);
            dt -= q * (r[0] + r[1] * v + 0.5 * r[2] * v * v);
            sens.push(q * (s[1] + s[2] * v));
            curv.push(q * s[2]);
        }
        (e, sens, curv, dt)
    }
}

impl ReferenceSolution for PortfolioClosedForm {
    fn value(&self, t: f64, x: &[f64]) -> f64 {
        -self.parts(t, x).0.exp()
    }

    fn time_derivative(&self, t: f64, x: &[f64]) -> f64 {
        let (e, _, _, dt) = self.parts(t, x);
        -e.exp() * dt
    }

    fn gradient(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let (e, sens, _, _) = self.parts(t, x);
        let u = -e.exp();
        out[0] = -self.eta * u;
        for (o, s) in out[1..].iter_mut().zip(&sens) {
            *o = s * u;
        }
    }

    fn hessian(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let d = x.len();
        let (e, sens, curv, _) = self.parts(t, x);
        let u = -e.exp();
        let mut de = vec![-self.eta];
        de.extend_from_slice(&sens);
        for a in 0..d {
            for b in 0..d {
                let mut h = de[a] * de[b];
                if a == b && a > 0 {
                    h += curv[a - 1];
                }
                out[a * d + b] = h * u;
            }
        }
    }
}

pub const MERTON_TABLE_VALUE: f64 = -0.50662;
pub const SCOTT_ONE_ASSET_REFERENCE: f64 = -0.53609477;
pub const NO_LEVERAGE_REFERENCE: [(usize, f64); 3] = [(1, -0.501566), (4, -0.44176462), (9, -0.27509173)];

/// Merton problem on wealth alone, trained along `X += |λ|Δt + ΔW`.
pub fn make_merton_problem(eta: f64, lambda: &[f64], maturity: f64, x0: f64) -> Result<PdeProblem, ProblemError> {
    if eta <= 0.0 {
        return Err(ProblemError::Invalid("utility parameter η must be positive".into()));
    }
    let premium = lambda.iter().map(|l| l * l).sum::<f64>().sqrt();
    let closed = PortfolioClosedForm {
        eta,
        maturity,
        premium,
        factors: Vec::new(),
    };
    let reference_value = closed.value(0.0, &[x0]);
    Ok(PdeProblem {
        id: "merton".into(),
        dim: 1,
        maturity,
        x0: vec![x0],
        dynamics: Arc::new(ConstantCoefficients::diagonal(vec![premium], &[1.0])),
        driver: Driver::FullyNonlinear(Arc::new(PortfolioDriver {
            premium,
            factors: Vec::new(),
            train_drift: vec![premium],
            train_var: vec![1.0],
        })),
        terminal: Arc::new(ExponentialUtility { eta }),
        reference_value: Some(reference_value),
        reference_solution: Some(Arc::new(closed)),
        activation: Activation::Tanh,
    })
}

fn factor_problem(
    id: &str,
    eta: f64,
    factors: Vec<VolFactor>,
    maturity: f64,
    x0: f64,
    reference_value: Option<f64>,
    closed_form: bool,
) -> Result<PdeProblem, ProblemError> {
    if eta <= 0.0 {
        return Err(ProblemError::Invalid("utility parameter η must be positive".into()));
    }
    if factors.iter().any(|f| f.rho.abs() >= 1.0 || f.nu < 0.0) {
        return Err(ProblemError::Invalid("need |ρ| < 1 and ν ≥ 0".into()));
    }
    let n = factors.len();
    let mut train_drift = vec![0.0; n + 1];
    train_drift[0] = factors.iter().map(|f| f.lambda * f.theta).sum();
    let mut vols = vec![1.0];
    vols.extend(factors.iter().map(|f| f.nu));
    let mut start = vec![x0];
    start.extend(factors.iter().map(|f| f.theta));
    let closed = PortfolioClosedForm {
        eta,
        maturity,
        premium: 0.0,
        factors: factors.clone(),
    };
    let reference_value = reference_value.or_else(|| closed_form.then(|| closed.value(0.0, &start)));
    Ok(PdeProblem {
        id: id.into(),
        dim: n + 1,
        maturity,
        x0: start,
        dynamics: Arc::new(ConstantCoefficients::diagonal(train_drift.clone(), &vols)),
        driver: Driver::FullyNonlinear(Arc::new(PortfolioDriver {
            premium: 0.0,
            factors,
            train_var: vols.iter().map(|v| v * v).collect(),
            train_drift,
        })),
        terminal: Arc::new(ExponentialUtility { eta }),
        reference_value,
        reference_solution: closed_form.then(|| Arc::new(closed) as Arc<dyn ReferenceSolution>),
        activation: Activation::Tanh,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScottParams {
    pub eta: f64,
    pub lambda: f64,
    pub theta: f64,
    pub nu: f64,
    pub kappa: f64,
    pub rho: f64,
    pub maturity: f64,
}

impl Default for ScottParams {
    fn default() -> Self {
        Self {
            eta: 0.5,
            lambda: 1.5,
            theta: 0.4,
            nu: 0.4,
            kappa: 1.0,
            rho: -0.7,
            maturity: 1.0,
        }
    }
}

/// One risky asset with Scott volatility and leverage effect; state `(x, v)`.
/// The reference value is the tabulated one for the default parameters.
pub fn make_scott_one_asset(p: ScottParams) -> Result<PdeProblem, ProblemError> {
    let reference = (p == ScottParams::default()).then_some(SCOTT_ONE_ASSET_REFERENCE);
    let factor = VolFactor {
        lambda: p.lambda,
        theta: p.theta,
        nu: p.nu,
        kappa: p.kappa,
        rho: p.rho,
    };
    factor_problem("scott1", p.eta, vec![factor], p.maturity, 1.0, reference, false)
}

/// Default `(λ, θ, ν, κ)` of the no-leverage problems.
pub fn no_leverage_defaults(n: usize) -> Option<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
    match n {
        1 => Some((vec![1.5], vec![0.4], vec![0.2], vec![1.0])),
        4 => Some((
            vec![1.5, 1.1, 2.0, 0.8],
            vec![0.1, 0.2, 0.3, 0.4],
            vec![0.2, 0.15, 0.25, 0.31],
            vec![1.0, 0.8, 1.1, 1.3],
        )),
        9 => Some((
            vec![1.5, 1.1, 2.0, 0.8, 0.5, 1.7, 0.9, 1.0, 0.9],
            vec![0.1, 0.2, 0.3, 0.4, 0.25, 0.15, 0.18, 0.08, 0.91],
            vec![0.2, 0.15, 0.25, 0.31, 0.4, 0.35, 0.22, 0.4, 0.15],
            vec![1.0, 0.8, 1.1, 1.3, 0.95, 0.99, 1.02, 1.06, 1.6],
        )),
        _ => None,
    }
}

/// `n` uncorrelated assets without leverage effect; state `(x, v₁..vₙ)`.
pub fn make_no_leverage(
    eta: f64,
    lambda: &[f64],
    theta: &[f64],
    nu: &[f64],
    kappa: &[f64],
    maturity: f64,
) -> Result<PdeProblem, ProblemError> {
    let n = lambda.len();
    if n == 0 || theta.len() != n || nu.len() != n || kappa.len() != n {
        return Err(ProblemError::Invalid("factor parameter vectors must share a positive length".into()));
    }
    let factors: Vec<VolFactor> = (0..n)
        .map(|i| VolFactor {
            lambda: lambda[i],
            theta: theta[i],
            nu: nu[i],
            kappa: kappa[i],
            rho: 0.0,
        })
        .collect();
    let is_default = eta == 0.5
        && maturity == 1.0
        && no_leverage_defaults(n).is_some_and(|(l, t, v, k)| l == lambda && t == theta && v == nu && k == kappa);
    let reference = if is_default {
        NO_LEVERAGE_REFERENCE.iter().find(|(m, _)| *m == n).map(|(_, v)| *v)
    } else {
        None
    };
    factor_problem(&format!("noleverage{n}"), eta, factors, maturity, 1.0, reference, true)
}

// ---------------------------------------------------------------------------
// Discrete-time control

/// Markov decision problem `X_{t+1} = F(X_t, a_t, ε_{t+1})` with cost
/// `Σ f(X_t, a_t) + g(X_T)` to be minimized. Matrices are row-major.
pub trait ControlProblem: Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn noise_dim(&self) -> usize;
    fn horizon(&self) -> usize;
    fn x0(&self) -> &[f64];
    fn sample_noise(&self, rng: &mut dyn RngCore, out: &mut [f64]);
    /// Draw from the training distribution of `X_t`.
    fn sample_training_state(&self, t: usize, rng: &mut dyn RngCore, out: &mut [f64]);
    fn dynamics(&self, x: &[f64], a: &[f64], eps: &[f64], out: &mut [f64]);
    /// `∂F/∂x` (`d × d`) and `∂F/∂a` (`d × q`).
    fn dynamics_jacobians(&self, x: &[f64], a: &[f64], eps: &[f64], jx: &mut [f64], ja: &mut [f64]);
    fn running_cost(&self, x: &[f64], a: &[f64]) -> f64;
    fn running_cost_grad(&self, x: &[f64], a: &[f64], gx: &mut [f64], ga: &mut [f64]);
    fn terminal_cost(&self, x: &[f64]) -> f64;
    fn terminal_cost_grad(&self, x: &[f64], gx: &mut [f64]);
    /// Box `[lo, hi]` for each control coordinate; `None` for unconstrained controls.
    fn control_bounds(&self) -> Option<(&[f64], &[f64])> {
        None
    }
}

type ConstraintFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;
type ConstraintGrad = Arc<dyn Fn(&[f64], &[f64], &mut [f64], &mut [f64]) + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintKind {
    /// `h(x, a) = 0`
    Equality,
    /// `h(x, a) ≥ 0`
    Inequality,
}

#[derive(Clone)]
pub struct Constraint {
    pub kind: ConstraintKind,
    pub weight: f64,
    pub h: ConstraintFn,
    /// Writes `(∂h/∂x, ∂h/∂a)`.
    pub grad: ConstraintGrad,
}

impl Constraint {
    pub fn new(
        kind: ConstraintKind,
        weight: f64,
        h: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
        grad: impl Fn(&[f64], &[f64], &mut [f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self {
            kind,
            weight,
            h: Arc::new(h),
            grad: Arc::new(grad),
        }
    }
}

/// Penalty `L(x,a) = Σ_eq μ|h|² + Σ_ineq μ max(0, −h)`.
#[derive(Clone, Default)]
pub struct Penalty {
    constraints: Vec<Constraint>,
}

impl Penalty {
    pub fn new(constraints: Vec<Constraint>) -> Result<Self, ProblemError> {
        if constraints.iter().any(|c| !(c.weight >= 0.0)) {
            return Err(ProblemError::Invalid("penalty weights must be nonnegative".into()));
        }
        Ok(Self { constraints })
    }

    pub fn value(&self, x: &[f64], a: &[f64]) -> f64 {
        self.constraints
            .iter()
            .map(|c| {
                let h = (c.h)(x, a);
                match c.kind {
                    ConstraintKind::Equality => c.weight * h * h,
                    ConstraintKind::Inequality => c.weight * (-h).max(0.0),
                }
            })
            .sum()
    }

    /// Adds `∂L/∂x`, `∂L/∂a` into `gx`, `ga`.
    pub fn add_grad(&self, x: &[f64], a: &[f64], gx: &mut [f64], ga: &mut [f64]) {
        let (mut hx, mut ha) = (vec![0.0; x.len()], vec![0.0; a.len()]);
        for c in &self.constraints {
            let h = (c.h)(x, a);
            let scale = match c.kind {
                ConstraintKind::Equality => 2.0 * c.weight * h,
                ConstraintKind::Inequality if h < 0.0 => -c.weight,
                ConstraintKind::Inequality => 0.0,
            };
            if scale == 0.0 {
                continue;
            }
            (c.grad)(x, a, &mut hx, &mut ha);
            gx.iter_mut().zip(&hx).for_each(|(g, v)| *g += scale * v);
            ga.iter_mut().zip(&ha).for_each(|(g, v)| *g += scale * v);
        }
    }
}

/// Scalar problem `X_{t+1} = X_t + a_t + ε_{t+1}`, `f = c_a a² (+ L)`, `g = c_g x²`,
/// `ε ~ N(0, σ_ε²)`. Training states are `x₀ + N(0, s² + t σ_ε²)`.
#[derive(Clone)]
pub struct LinearQuadratic {
    pub horizon: usize,
    pub control_cost: f64,
    pub terminal_weight: f64,
    pub noise_sd: f64,
    pub x0: Vec<f64>,
    pub start_sd: f64,
    pub penalty: Option<Penalty>,
}

impl LinearQuadratic {
    /// Optimal cost-to-go `V_t(x) = p_t x² + r_t` from the backward Riccati recursion,
    /// returned as `(p_t, r_t)` for `t = 0..=T`.
    pub fn riccati(&self) -> Vec<(f64, f64)> {
        let (ca, s2) = (self.control_cost, self.noise_sd * self.noise_sd);
        let mut out = vec![(0.0, 0.0); self.horizon + 1];
        out[self.horizon] = (self.terminal_weight, 0.0);
        for t in (0..self.horizon).rev() {
            let (p, r) = out[t + 1];
            // min_a c_a a² + p (x + a)²  at  a = −p x / (c_a + p)
            out[t] = (ca * p / (ca + p), r + p * s2);
        }
        out
    }

    /// Optimal feedback gain `k_t` with `a*_t(x) = −k_t x`.
    pub fn optimal_gain(&self, t: usize) -> f64 {
        let p = self.riccati()[t + 1].0;
        p / (self.control_cost + p)
    }

    pub fn optimal_cost(&self) -> f64 {
        let (p, r) = self.riccati()[0];
        p * self.x0[0] * self.x0[0] + r
    }
}

impl ControlProblem for LinearQuadratic {
    fn state_dim(&self) -> usize {
        1
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn noise_dim(&self) -> usize {
        1
    }
    fn horizon(&self) -> usize {
        self.horizon
    }
    fn x0(&self) -> &[f64] {
        &self.x0
    }
    fn sample_noise(&self, rng: &mut dyn RngCore, out: &mut [f64]) {
        fill_normals(rng, out);
        out[0] *= self.noise_sd;
    }
    fn sample_training_state(&self, t: usize, rng: &mut dyn RngCore, out: &mut [f64]) {
        fill_normals(rng, out);
        let sd = (self.start_sd * self.start_sd + t as f64 * self.noise_sd * self.noise_sd).sqrt();
        out[0] = self.x0[0] + sd * out[0];
    }
    fn dynamics(&self, x: &[f64], a: &[f64], eps: &[f64], out: &mut [f64]) {
        out[0] = x[0] + a[0] + eps[0];
    }
    fn dynamics_jacobians(&self, _x: &[f64], _a: &[f64], _eps: &[f64], jx: &mut [f64], ja: &mut [f64]) {
        jx[0] = 1.0;
        ja[0] = 1.0;
    }
    fn running_cost(&self, x: &[f64], a: &[f64]) -> f64 {
        self.control_cost * a[0] * a[0] + self.penalty.as_ref().map_or(0.0, |p| p.value(x, a))
    }
    fn running_cost_grad(&self, x: &[f64], a: &[f64], gx: &mut [f64], ga: &mut [f64]) {
        gx[0] = 0.0;
        ga[0] = 2.0 * self.control_cost * a[0];
        if let Some(p) = &self.penalty {
            p.add_grad(x, a, gx, ga);
        }
    }
    fn terminal_cost(&self, x: &[f64]) -> f64 {
        self.terminal_weight * x[0] * x[0]
    }
    fn terminal_cost_grad(&self, x: &[f64], gx: &mut [f64]) {
        gx[0] = 2.0 * self.terminal_weight * x[0];
    }
}

pub fn make_lq_control(
    horizon: usize,
    control_cost: f64,
    terminal_weight: f64,
    noise_sd: f64,
    x0: f64,
) -> Result<LinearQuadratic, ProblemError> {
    if horizon == 0 {
        return Err(ProblemError::Invalid("horizon must be at least one step".into()));
    }
    if control_cost <= 0.0 || terminal_weight < 0.0 || noise_sd < 0.0 {
        return Err(ProblemError::Invalid("need c_a > 0, c_g ≥ 0, σ_ε ≥ 0".into()));
    }
    Ok(LinearQuadratic {
        horizon,
        control_cost,
        terminal_weight,
        noise_sd,
        x0: vec![x0],
        start_sd: 1.0,
        penalty: None,
    })
}

/// Cost with every term identically zero; any policy is optimal.
#[derive(Clone)]
pub struct NullControl {
    pub horizon: usize,
    pub x0: Vec<f64>,
    pub terminal: f64,
}

impl ControlProblem for NullControl {
    fn state_dim(&self) -> usize {
        1
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn noise_dim(&self) -> usize {
        1
    }
    fn horizon(&self) -> usize {
        self.horizon
    }
    fn x0(&self) -> &[f64] {
        &self.x0
    }
    fn sample_noise(&self, _rng: &mut dyn RngCore, out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn sample_training_state(&self, _t: usize, rng: &mut dyn RngCore, out: &mut [f64]) {
        fill_normals(rng, out);
    }
    fn dynamics(&self, x: &[f64], a: &[f64], _eps: &[f64], out: &mut [f64]) {
        out[0] = x[0] + a[0];
    }
    fn dynamics_jacobians(&self, _x: &[f64], _a: &[f64], _eps: &[f64], jx: &mut [f64], ja: &mut [f64]) {
        jx[0] = 1.0;
        ja[0] = 1.0;
    }
    fn running_cost(&self, _x: &[f64], _a: &[f64]) -> f64 {
        0.0
    }
    fn running_cost_grad(&self, _x: &[f64], _a: &[f64], gx: &mut [f64], ga: &mut [f64]) {
        gx[0] = 0.0;
        ga[0] = 0.0;
    }
    fn terminal_cost(&self, _x: &[f64]) -> f64 {
        self.terminal
    }
    fn terminal_cost_grad(&self, _x: &[f64], gx: &mut [f64]) {
        gx[0] = 0.0;
    }
}

// ---------------------------------------------------------------------------
// Catalog

/// Problem identifiers accepted by [`build_problem`].
pub const PROBLEM_IDS: [&str; 7] = ["cva", "merton", "scott1", "noleverage1", "noleverage4", "noleverage9", "lq"];

/// Optional parameter overrides; unset fields take the documented defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemParams {
    pub dim: Option<usize>,
    pub maturity: Option<f64>,
    pub vol: Option<f64>,
    pub beta: Option<f64>,
    pub eta: Option<f64>,
    pub lambda: Option<Vec<f64>>,
    pub theta: Option<Vec<f64>>,
    pub nu: Option<Vec<f64>>,
    pub kappa: Option<Vec<f64>>,
    pub rho: Option<f64>,
    pub x0: Option<f64>,
    pub horizon: Option<usize>,
    pub control_cost: Option<f64>,
    pub terminal_weight: Option<f64>,
    pub noise_sd: Option<f64>,
}

pub enum ProblemInstance {
    Pde(PdeProblem),
    Control(LinearQuadratic),
}

impl ProblemInstance {
    pub fn dim(&self) -> usize {
        match self {
            ProblemInstance::Pde(p) => p.dim,
            ProblemInstance::Control(c) => c.state_dim(),
        }
    }

    pub fn reference_value(&self) -> Option<f64> {
        match self {
            ProblemInstance::Pde(p) => p.reference_value,
            ProblemInstance::Control(c) => Some(c.optimal_cost()),
        }
    }
}

pub fn build_problem(id: &str, p: &ProblemParams) -> Result<ProblemInstance, ProblemError> {
    let maturity = p.maturity.unwrap_or(1.0);
    let inst = match id {
        "cva" => ProblemInstance::Pde(make_cva_problem(
            p.dim.unwrap_or(1),
            p.vol.unwrap_or(0.2),
            p.beta.unwrap_or(0.03),
            maturity,
        )?),
        "merton" => ProblemInstance::Pde(make_merton_problem(
            p.eta.unwrap_or(0.5),
            p.lambda.as_deref().unwrap_or(&[0.6]),
            maturity,
            p.x0.unwrap_or(1.0),
        )?),
        "scott1" => {
            let d = ScottParams::default();
            let scalar = |v: &Option<Vec<f64>>, dflt: f64| -> Result<f64, ProblemError> {
                match v.as_deref() {
                    None => Ok(dflt),
                    Some([x]) => Ok(*x),
                    Some(_) => Err(ProblemError::Invalid("scott1 takes one-element factor vectors".into())),
                }
            };
            ProblemInstance::Pde(make_scott_one_asset(ScottParams {
                eta: p.eta.unwrap_or(d.eta),
                lambda: scalar(&p.lambda, d.lambda)?,
                theta: scalar(&p.theta, d.theta)?,
                nu: scalar(&p.nu, d.nu)?,
                kappa: scalar(&p.kappa, d.kappa)?,
                rho: p.rho.unwrap_or(d.rho),
                maturity,
            })?)
        }
        "noleverage1" | "noleverage4" | "noleverage9" => {
            let n: usize = id["noleverage".len()..].parse().expect("catalog id");
            let (l, t, v, k) = no_leverage_defaults(n).expect("catalog id");
            ProblemInstance::Pde(make_no_leverage(
                p.eta.unwrap_or(0.5),
                p.lambda.as_deref().unwrap_or(&l),
                p.theta.as_deref().unwrap_or(&t),
                p.nu.as_deref().unwrap_or(&v),
                p.kappa.as_deref().unwrap_or(&k),
                maturity,
            )?)
        }
        "lq" => ProblemInstance::Control(make_lq_control(
            p.horizon.unwrap_or(2),
            p.control_cost.unwrap_or(1.0),
            p.terminal_weight.unwrap_or(1.0),
            p.noise_sd.unwrap_or(0.5),
            p.x0.unwrap_or(1.0),
        )?),
        other => return Err(ProblemError::UnknownId(other.to_string())),
    };
    Ok(inst)
}
