//! The weak-solution counterexample: a static standard-normal path with
//! zero velocity against a tilted-Gaussian family whose rate switches on at
//! time tau. The flow-matching loss equals eps while the terminal KL exceeds
//! M — and the breakdown is visible directly: the ODE route through the
//! velocity field recovers almost none of the actual KL, because the density
//! family jumps at tau where no strong continuity solution exists.

use crate::autodiff::{Scalar, VelocityField};
use crate::error::{Error, Result};
use crate::ode::{rk4_solve, IvpConfig};
use crate::paths::{adaptive_simpson, std_normal_logpdf};
use crate::rng::{mean_stderr, RngStream};
use serde::Serialize;

#[derive(Clone, Debug, Serialize)]
pub struct CounterexampleSpec {
    /// Claimed KL lower bound.
    pub m: f64,
    /// Flow-matching loss level, in (0, M).
    pub eps: f64,
    /// Tilt direction (nonzero).
    pub b: Vec<f64>,
    /// Switch-on time in (0, 1).
    pub tau: f64,
}

impl CounterexampleSpec {
    pub fn new(m: f64, eps: f64, b: Vec<f64>, tau: f64) -> Result<Self> {
        let spec = CounterexampleSpec { m, eps, b, tau };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        if !(self.m > self.eps && self.eps > 0.0) {
            return Err(Error::Argument(format!(
                "need M > eps > 0, got M = {}, eps = {}",
                self.m, self.eps
            )));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Argument(format!("tau must lie in (0,1), got {}", self.tau)));
        }
        if self.b.is_empty() || self.b_norm_sq() <= 0.0 || !self.b_norm_sq().is_finite() {
            return Err(Error::Argument("direction b must be nonzero and finite".into()));
        }
        Ok(())
    }

    pub fn b_norm_sq(&self) -> f64 {
        self.b.iter().map(|v| v * v).sum()
    }
}

/// `v(x, t) = -delta a(t) b`, constant in x (zero divergence everywhere).
#[derive(Clone, Debug)]
pub struct TiltedField {
    delta: f64,
    eta: f64,
    tau: f64,
    b: Vec<f64>,
}

impl TiltedField {
    pub fn a(&self, t: f64) -> f64 {
        if t > self.tau {
            self.eta * (self.delta * (t - self.tau)).exp()
        } else {
            0.0
        }
    }
}

impl VelocityField for TiltedField {
    fn dim(&self) -> usize {
        self.b.len()
    }

    fn eval_batch<S: Scalar>(&self, xs: &[S], t: f64, out: &mut [S]) {
        let d = self.b.len();
        let scale = -self.delta * self.a(t);
        for i in 0..xs.len() / d {
            for c in 0..d {
                out[i * d + c] = S::from_real(scale * self.b[c]);
            }
        }
    }
}

/// Smooth extension of the upper branch (`a = eta e^{delta (t - tau)}` for
/// all t); used to integrate across [tau, 1] without touching the switch.
struct UpperBranch {
    delta: f64,
    eta: f64,
    tau: f64,
    b: Vec<f64>,
}

impl VelocityField for UpperBranch {
    fn dim(&self) -> usize {
        self.b.len()
    }
    fn eval_batch<S: Scalar>(&self, xs: &[S], t: f64, out: &mut [S]) {
        let d = self.b.len();
        let scale = -self.delta * self.eta * (self.delta * (t - self.tau)).exp();
        for i in 0..xs.len() / d {
            for c in 0..d {
                out[i * d + c] = S::from_real(scale * self.b[c]);
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct CounterexampleInstance {
    pub spec: CounterexampleSpec,
    /// eps / M.
    pub delta: f64,
    /// Integral of a^2 over [0,1].
    pub j: f64,
    /// Branch amplitude at tau+.
    pub eta: f64,
    pub field: TiltedField,
    /// Set when the tau -> 1 denominator is too small to trust.
    pub conditioning_warning: Option<String>,
}

impl CounterexampleInstance {
    pub fn a(&self, t: f64) -> f64 {
        self.field.a(t)
    }
}

/// Solve for the instance: `delta = eps/M`, `J = eps / (delta^2 |b|^2)`,
/// `eta = sqrt(2 delta J / (e^{2 delta (1-tau)} - 1))`.
pub fn build_counterexample(spec: CounterexampleSpec) -> Result<CounterexampleInstance> {
    spec.validate()?;
    let delta = spec.eps / spec.m;
    let bsq = spec.b_norm_sq();
    let j = spec.eps / (delta * delta * bsq);
    let denom = (2.0 * delta * (1.0 - spec.tau)).exp_m1();
    let conditioning_warning = (denom < 1e-12).then(|| {
        format!("eta is ill-conditioned: e^(2 delta (1-tau)) - 1 = {denom:.3e} below 1e-12")
    });
    if denom <= 0.0 {
        return Err(Error::Domain("eta denominator vanished".into()));
    }
    let eta = (2.0 * delta * j / denom).sqrt();
    let field =
        TiltedField { delta, eta, tau: spec.tau, b: spec.b.clone() };
    Ok(CounterexampleInstance { spec, delta, j, eta, field, conditioning_warning })
}

/// Flow-matching loss of the instance: closed form `delta^2 |b|^2 J = eps`
/// plus an independent quadrature of `delta^2 a(t)^2 |b|^2` over [tau, 1]
/// (the expectation over x is trivial; v does not depend on x).
pub fn counterexample_fm_loss(inst: &CounterexampleInstance) -> (f64, f64) {
    let bsq = inst.spec.b_norm_sq();
    let closed = inst.delta * inst.delta * bsq * inst.j;
    let (delta, eta, tau) = (inst.delta, inst.eta, inst.spec.tau);
    let quad = adaptive_simpson(
        &|t| {
            let a = eta * (delta * (t - tau)).exp();
            delta * delta * a * a * bsq
        },
        tau,
        1.0,
        1e-12,
    );
    (closed, quad)
}

/// Terminal KL two ways: directly from `q_1 = N(-a(1) b, I)` (mean-shift
/// Gaussian KL `a(1)^2 |b|^2 / 2`) and as the weak-solution path integral
/// `delta J |b|^2 = M`, which omits the jump `eta^2 |b|^2 / 2` at tau.
pub fn counterexample_kl(inst: &CounterexampleInstance) -> (f64, f64) {
    let bsq = inst.spec.b_norm_sq();
    let a1 = inst.a(1.0);
    (a1 * a1 * bsq / 2.0, inst.delta * inst.j * bsq)
}

/// Log-density of the flow actually generated by the velocity field,
/// integrating backward from t = 1 and splitting at tau (below tau the field
/// vanishes, so only the upper branch moves mass; divergence is zero
/// everywhere).
pub fn ode_route_logdensity(
    inst: &CounterexampleInstance,
    x: &[f64],
    ode: &IvpConfig,
) -> Result<f64> {
    let upper = UpperBranch {
        delta: inst.delta,
        eta: inst.eta,
        tau: inst.spec.tau,
        b: inst.spec.b.clone(),
    };
    let x_tau = rk4_solve(&upper, x, 1.0, inst.spec.tau, ode)?;
    Ok(std_normal_logpdf(&x_tau))
}

#[derive(Debug, Serialize)]
pub struct CounterexampleReport {
    pub spec: CounterexampleSpec,
    pub delta: f64,
    pub j: f64,
    pub eta: f64,
    pub a_terminal: f64,
    pub fm_loss_closed: f64,
    pub fm_loss_quadrature: f64,
    pub kl_direct: f64,
    pub kl_path_integral: f64,
    /// The jump at tau: kl_direct - kl_path_integral = eta^2 |b|^2 / 2.
    pub kl_jump: f64,
    /// MC estimate of KL(p_1 || q_1) against the tilted closed form.
    pub kl_mc: f64,
    pub kl_mc_se: f64,
    /// KL recovered by integrating the velocity field's ODE backward — the
    /// flow the field actually generates misses the jump at tau, which is
    /// the substance of the counterexample.
    pub ode_route_kl: f64,
    pub conditioning_warning: Option<String>,
}

fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1e-300)
}

/// Build, compute every quantity, and assert the construction's identities.
pub fn verify_counterexample(
    spec: CounterexampleSpec,
    n: usize,
    seed: u64,
) -> Result<CounterexampleReport> {
    let inst = build_counterexample(spec)?;
    let (fm_closed, fm_quad) = counterexample_fm_loss(&inst);
    let (kl_direct, kl_path) = counterexample_kl(&inst);
    let bsq = inst.spec.b_norm_sq();
    let kl_jump = inst.eta * inst.eta * bsq / 2.0;

    if rel_err(fm_closed, inst.spec.eps) > 1e-10 {
        return Err(Error::Verification(format!(
            "fm_loss_closed = {fm_closed}, expected eps = {}",
            inst.spec.eps
        )));
    }
    if rel_err(fm_quad, inst.spec.eps) > 1e-6 {
        return Err(Error::Verification(format!(
            "fm_loss_quadrature = {fm_quad}, expected eps = {}",
            inst.spec.eps
        )));
    }
    if rel_err(kl_path, inst.spec.m) > 1e-10 {
        return Err(Error::Verification(format!(
            "kl_path_integral = {kl_path}, expected M = {}",
            inst.spec.m
        )));
    }
    if kl_direct < inst.spec.m {
        return Err(Error::Verification(format!(
            "kl_direct = {kl_direct} below M = {}",
            inst.spec.m
        )));
    }
    if rel_err(kl_direct - kl_path, kl_jump) > 1e-8 {
        return Err(Error::Verification(format!(
            "kl jump mismatch: {} vs {kl_jump}",
            kl_direct - kl_path
        )));
    }

    // MC cross-check of kl_direct: x ~ p_1 = N(0, I) against the tilted
    // closed form q_1 = N(-a(1) b, I).
    let d = inst.spec.b.len();
    let a1 = inst.a(1.0);
    let stream = RngStream::new(seed, "counterexample");
    let mut x = vec![0.0; d];
    let diffs: Vec<f64> = (0..n)
        .map(|i| {
            stream.fill_normal((i * d) as u64, &mut x);
            let shifted: Vec<f64> = x.iter().zip(&inst.spec.b).map(|(&v, &bc)| v + a1 * bc).collect();
            std_normal_logpdf(&x) - std_normal_logpdf(&shifted)
        })
        .collect();
    let (kl_mc, kl_mc_se) = mean_stderr(&diffs);
    if (kl_mc - kl_direct).abs() > 3.0 * kl_mc_se {
        return Err(Error::Verification(format!(
            "kl_mc = {kl_mc} (se {kl_mc_se}) not within 3 se of kl_direct = {kl_direct}"
        )));
    }

    // The ODE route: MC of log p_1 - log q_ode with q_ode from the backward
    // solve. The field is constant in x, so the solve is a pure translation
    // by delta b int a = eta (e^{delta (1-tau)} - 1) b, and the resulting KL
    // is far below kl_direct.
    let ode = IvpConfig::default();
    let shift = inst.eta * (inst.delta * (1.0 - inst.spec.tau)).exp_m1();
    let ode_diffs: Vec<f64> = (0..n.min(2000))
        .map(|i| {
            stream.fill_normal((i * d) as u64, &mut x);
            let lq = ode_route_logdensity(&inst, &x, &ode)?;
            // Per-point check against the translation closed form.
            let translated: Vec<f64> =
                x.iter().zip(&inst.spec.b).map(|(&v, &bc)| v + shift * bc).collect();
            let closed = std_normal_logpdf(&translated);
            if (lq - closed).abs() > 1e-4 {
                return Err(Error::Verification(format!(
                    "ode log-density {lq} disagrees with translation closed form {closed}"
                )));
            }
            Ok(std_normal_logpdf(&x) - lq)
        })
        .collect::<Result<_>>()?;
    let (ode_route_kl, ode_route_se) = mean_stderr(&ode_diffs);
    let ode_closed = shift * shift * bsq / 2.0;
    if (ode_route_kl - ode_closed).abs() > 3.0 * ode_route_se + 1e-6 {
        return Err(Error::Verification(format!(
            "ode_route_kl = {ode_route_kl} (se {ode_route_se}) not within 3 se of {ode_closed}"
        )));
    }

    Ok(CounterexampleReport {
        delta: inst.delta,
        j: inst.j,
        eta: inst.eta,
        a_terminal: a1,
        fm_loss_closed: fm_closed,
        fm_loss_quadrature: fm_quad,
        kl_direct,
        kl_path_integral: kl_path,
        kl_jump,
        kl_mc,
        kl_mc_se,
        ode_route_kl,
        conditioning_warning: inst.conditioning_warning.clone(),
        spec: inst.spec,
    })
}
