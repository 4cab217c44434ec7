//! Forward-mode automatic differentiation with first- and second-order dual
//! numbers, plus the velocity-field evaluation contract built on top of it.
//!
//! Every gradient, Jacobian, divergence, and gradient-of-divergence query in
//! this crate goes through the probes defined here; there is no external
//! autodiff framework. Supported elementary operations are fixed to:
//! add, sub, mul, div, neg, exp, sin, cos, tanh, sqrt. Fields must compose
//! from this list so the second-order rules stay auditable.

use std::ops::{Add, Div, Mul, Neg, Sub};

/// Scalar kinds a velocity field can be evaluated over: plain `f64`,
/// first-order [`Dual`], or second-order [`Dual2`].
pub trait Scalar:
    Copy
    + std::fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn from_real(v: f64) -> Self;
    /// The primal (value-slot) part.
    fn real(self) -> f64;
    /// Multiply by a constant. Cheaper than lifting the constant first.
    fn mul_real(self, c: f64) -> Self;
    /// Add a constant to the value slot.
    fn add_real(self, c: f64) -> Self;
    fn exp(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
}

impl Scalar for f64 {
    #[inline(always)]
    fn from_real(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn real(self) -> f64 {
        self
    }
    #[inline(always)]
    fn mul_real(self, c: f64) -> Self {
        self * c
    }
    #[inline(always)]
    fn add_real(self, c: f64) -> Self {
        self + c
    }
    #[inline(always)]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline(always)]
    fn sin(self) -> Self {
        f64::sin(self)
    }
    #[inline(always)]
    fn cos(self) -> Self {
        f64::cos(self)
    }
    #[inline(always)]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    #[inline(always)]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
}

/// First-order dual number `val + dot * eps` with `eps^2 = 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual {
    pub val: f64,
    pub dot: f64,
}

impl Dual {
    #[inline(always)]
    pub fn new(val: f64, dot: f64) -> Self {
        Dual { val, dot }
    }
    /// Variable seeded with unit tangent.
    #[inline(always)]
    pub fn var(val: f64) -> Self {
        Dual { val, dot: 1.0 }
    }
    /// Constant (zero tangent).
    #[inline(always)]
    pub fn con(val: f64) -> Self {
        Dual { val, dot: 0.0 }
    }
}

impl Add for Dual {
    type Output = Dual;
    #[inline(always)]
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.val + o.val, self.dot + o.dot)
    }
}
impl Sub for Dual {
    type Output = Dual;
    #[inline(always)]
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.val - o.val, self.dot - o.dot)
    }
}
impl Mul for Dual {
    type Output = Dual;
    #[inline(always)]
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.val * o.val, self.dot * o.val + self.val * o.dot)
    }
}
impl Div for Dual {
    type Output = Dual;
    #[inline(always)]
    fn div(self, o: Dual) -> Dual {
        let inv = 1.0 / o.val;
        Dual::new(self.val * inv, (self.dot - self.val * inv * o.dot) * inv)
    }
}
impl Neg for Dual {
    type Output = Dual;
    #[inline(always)]
    fn neg(self) -> Dual {
        Dual::new(-self.val, -self.dot)
    }
}

impl Scalar for Dual {
    #[inline(always)]
    fn from_real(v: f64) -> Self {
        Dual::con(v)
    }
    #[inline(always)]
    fn real(self) -> f64 {
        self.val
    }
    #[inline(always)]
    fn mul_real(self, c: f64) -> Self {
        Dual::new(self.val * c, self.dot * c)
    }
    #[inline(always)]
    fn add_real(self, c: f64) -> Self {
        Dual::new(self.val + c, self.dot)
    }
    #[inline(always)]
    fn exp(self) -> Self {
        let e = self.val.exp();
        Dual::new(e, self.dot * e)
    }
    #[inline(always)]
    fn sin(self) -> Self {
        Dual::new(self.val.sin(), self.dot * self.val.cos())
    }
    #[inline(always)]
    fn cos(self) -> Self {
        Dual::new(self.val.cos(), -self.dot * self.val.sin())
    }
    #[inline(always)]
    fn tanh(self) -> Self {
        let t = self.val.tanh();
        Dual::new(t, self.dot * (1.0 - t * t))
    }
    #[inline(always)]
    fn sqrt(self) -> Self {
        let r = self.val.sqrt();
        Dual::new(r, self.dot * 0.5 / r)
    }
}

/// Second-order dual along a single probe direction: the nested dual-over-dual
/// collapsed to `(value, first, second)` directional Taylor coefficients, i.e.
/// `f(x + h u) = val + first * h + second * h^2 / 2 + O(h^3)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual2 {
    pub val: f64,
    pub first: f64,
    pub second: f64,
}

impl Dual2 {
    #[inline(always)]
    pub fn new(val: f64, first: f64, second: f64) -> Self {
        Dual2 { val, first, second }
    }
    /// Variable with tangent component `dir` along the probe direction.
    #[inline(always)]
    pub fn var(val: f64, dir: f64) -> Self {
        Dual2::new(val, dir, 0.0)
    }
    #[inline(always)]
    pub fn con(val: f64) -> Self {
        Dual2::new(val, 0.0, 0.0)
    }

    /// Apply a C^2 univariate function given its value and first two
    /// derivatives at `self.val`.
    #[inline(always)]
    fn chain(self, f0: f64, f1: f64, f2: f64) -> Self {
        Dual2::new(
            f0,
            f1 * self.first,
            f1 * self.second + f2 * self.first * self.first,
        )
    }
}

impl Add for Dual2 {
    type Output = Dual2;
    #[inline(always)]
    fn add(self, o: Dual2) -> Dual2 {
        Dual2::new(self.val + o.val, self.first + o.first, self.second + o.second)
    }
}
impl Sub for Dual2 {
    type Output = Dual2;
    #[inline(always)]
    fn sub(self, o: Dual2) -> Dual2 {
        Dual2::new(self.val - o.val, self.first - o.first, self.second - o.second)
    }
}
impl Mul for Dual2 {
    type Output = Dual2;
    #[inline(always)]
    fn mul(self, o: Dual2) -> Dual2 {
        Dual2::new(
            self.val * o.val,
            self.first * o.val + self.val * o.first,
            self.second * o.val + 2.0 * self.first * o.first + self.val * o.second,
        )
    }
}
impl Div for Dual2 {
    type Output = Dual2;
    #[inline(always)]
    fn div(self, o: Dual2) -> Dual2 {
        // self * (1/o), with (1/g)' = -g'/g^2 and (1/g)'' = (2g'^2 - g g'')/g^3.
        let inv = 1.0 / o.val;
        let inv2 = inv * inv;
        let r = Dual2::new(
            inv,
            -o.first * inv2,
            (2.0 * o.first * o.first - o.val * o.second) * inv2 * inv,
        );
        self * r
    }
}
impl Neg for Dual2 {
    type Output = Dual2;
    #[inline(always)]
    fn neg(self) -> Dual2 {
        Dual2::new(-self.val, -self.first, -self.second)
    }
}

impl Scalar for Dual2 {
    #[inline(always)]
    fn from_real(v: f64) -> Self {
        Dual2::con(v)
    }
    #[inline(always)]
    fn real(self) -> f64 {
        self.val
    }
    #[inline(always)]
    fn mul_real(self, c: f64) -> Self {
        Dual2::new(self.val * c, self.first * c, self.second * c)
    }
    #[inline(always)]
    fn add_real(self, c: f64) -> Self {
        Dual2::new(self.val + c, self.first, self.second)
    }
    #[inline(always)]
    fn exp(self) -> Self {
        let e = self.val.exp();
        self.chain(e, e, e)
    }
    #[inline(always)]
    fn sin(self) -> Self {
        let (s, c) = self.val.sin_cos();
        self.chain(s, c, -s)
    }
    #[inline(always)]
    fn cos(self) -> Self {
        let (s, c) = self.val.sin_cos();
        self.chain(c, -s, -c)
    }
    #[inline(always)]
    fn tanh(self) -> Self {
        let t = self.val.tanh();
        let sech2 = 1.0 - t * t;
        self.chain(t, sech2, -2.0 * t * sech2)
    }
    #[inline(always)]
    fn sqrt(self) -> Self {
        let r = self.val.sqrt();
        self.chain(r, 0.5 / r, -0.25 / (r * r * r))
    }
}

/// The uniform evaluation contract for velocity fields `v(x, t)`.
///
/// Fields are evaluated over a batch of points sharing one time so
/// per-time work (schedule rates, layer setup) amortizes across samples.
/// `xs` and `out` are `n * dim` flattened, sample-major. Evaluation with
/// zero tangents must reproduce plain evaluation bit-exactly, which holds by
/// construction since the value slot carries exactly the `f64` computation.
pub trait VelocityField {
    fn dim(&self) -> usize;

    fn eval_batch<S: Scalar>(&self, xs: &[S], t: f64, out: &mut [S]);

    /// Single-point convenience wrapper.
    fn eval<S: Scalar>(&self, x: &[S], t: f64) -> Vec<S> {
        let mut out = vec![S::from_real(0.0); self.dim()];
        self.eval_batch(x, t, &mut out);
        out
    }
}

fn check_finite(what: &str, vals: &[f64]) -> crate::error::Result<()> {
    for (i, v) in vals.iter().enumerate() {
        if !v.is_finite() {
            return Err(crate::error::Error::Numeric {
                step: 0,
                msg: format!("{what}: non-finite output at coordinate {i}"),
            });
        }
    }
    Ok(())
}

/// Jacobian of `f` at `(x, t)`, row-major: entry `[i * d + j]` is
/// `d f_i / d x_j`, computed by `d` forward-mode passes.
pub fn jacobian<F: VelocityField>(f: &F, x: &[f64], t: f64) -> crate::error::Result<Vec<f64>> {
    let d = f.dim();
    let mut jac = vec![0.0; d * d];
    let mut probe: Vec<Dual> = x.iter().map(|&v| Dual::con(v)).collect();
    for j in 0..d {
        probe[j].dot = 1.0;
        let out = f.eval(&probe, t);
        for i in 0..d {
            jac[i * d + j] = out[i].dot;
        }
        probe[j].dot = 0.0;
    }
    check_finite("jacobian", &jac)?;
    Ok(jac)
}

/// Divergence of `f` at `(x, t)`: trace of the Jacobian accumulated across
/// `d` forward passes without materializing the matrix.
pub fn divergence<F: VelocityField>(f: &F, x: &[f64], t: f64) -> crate::error::Result<f64> {
    let d = f.dim();
    let mut acc = 0.0;
    let mut probe: Vec<Dual> = x.iter().map(|&v| Dual::con(v)).collect();
    for j in 0..d {
        probe[j].dot = 1.0;
        let out = f.eval(&probe, t);
        acc += out[j].dot;
        probe[j].dot = 0.0;
    }
    check_finite("divergence", &[acc])?;
    Ok(acc)
}

/// Gradient of the divergence at `(x, t)`.
///
/// Uses `d` axis-aligned second-order probes plus one per direction pair; the
/// mixed Hessian entries come from polarization
/// `H[j,k] = (D2_{e_j+e_k} - D2_{e_j} - D2_{e_k}) / 2`.
pub fn grad_divergence<F: VelocityField>(
    f: &F,
    x: &[f64],
    t: f64,
) -> crate::error::Result<Vec<f64>> {
    let d = f.dim();
    // second[c][j*d+k] = d^2 f_c / (dx_j dx_k)
    let mut hessians = vec![0.0; d * d * d];
    let mut probe: Vec<Dual2> = x.iter().map(|&v| Dual2::con(v)).collect();

    // Axis probes: diagonal curvature.
    for j in 0..d {
        probe[j].first = 1.0;
        let out = f.eval(&probe, t);
        for c in 0..d {
            hessians[c * d * d + j * d + j] = out[c].second;
        }
        probe[j].first = 0.0;
    }
    // Pair probes: mixed curvature by polarization.
    for j in 0..d {
        for k in (j + 1)..d {
            probe[j].first = 1.0;
            probe[k].first = 1.0;
            let out = f.eval(&probe, t);
            for c in 0..d {
                let h = c * d * d;
                let mixed =
                    0.5 * (out[c].second - hessians[h + j * d + j] - hessians[h + k * d + k]);
                hessians[h + j * d + k] = mixed;
                hessians[h + k * d + j] = mixed;
            }
            probe[j].first = 0.0;
            probe[k].first = 0.0;
        }
    }

    let mut grad = vec![0.0; d];
    for k in 0..d {
        let mut acc = 0.0;
        for c in 0..d {
            acc += hessians[c * d * d + c * d + k];
        }
        grad[k] = acc;
    }
    check_finite("grad_divergence", &grad)?;
    Ok(grad)
}

/// All derivative quantities the augmented ODE solvers need, for a whole
/// batch of points at one shared time.
pub struct BatchDerivs {
    pub dim: usize,
    /// `n * d` field values.
    pub value: Vec<f64>,
    /// `n * d * d` row-major Jacobians.
    pub jac: Vec<f64>,
    /// `n` divergences.
    pub div: Vec<f64>,
    /// `n * d` gradients of the divergence (empty unless requested).
    pub grad_div: Vec<f64>,
}

impl BatchDerivs {
    pub fn new(dim: usize, n: usize, second_order: bool) -> Self {
        BatchDerivs {
            dim,
            value: vec![0.0; n * dim],
            jac: vec![0.0; n * dim * dim],
            div: vec![0.0; n],
            grad_div: if second_order { vec![0.0; n * dim] } else { Vec::new() },
        }
    }
}

/// Scratch buffers for [`batch_derivs`], reused across RK4 stages.
pub struct DerivScratch {
    probe2: Vec<Dual2>,
    out2: Vec<Dual2>,
    probe1: Vec<Dual>,
    out1: Vec<Dual>,
    diag: Vec<f64>,
}

impl DerivScratch {
    pub fn new() -> Self {
        DerivScratch {
            probe2: Vec::new(),
            out2: Vec::new(),
            probe1: Vec::new(),
            out1: Vec::new(),
            diag: Vec::new(),
        }
    }
}

impl Default for DerivScratch {
    fn default() -> Self {
        Self::new()
    }
}

/// Value, Jacobian, divergence and (optionally) gradient-of-divergence for a
/// batch of points at one time, with `d` (+ `d(d-1)/2` when second order)
/// probes shared across the whole batch.
pub fn batch_derivs<F: VelocityField>(
    f: &F,
    xs: &[f64],
    t: f64,
    second_order: bool,
    scratch: &mut DerivScratch,
    out: &mut BatchDerivs,
) {
    let d = f.dim();
    let n = xs.len() / d;
    debug_assert_eq!(out.value.len(), n * d);

    if !second_order {
        // First-order probes are enough for value, Jacobian and divergence.
        scratch.probe1.clear();
        scratch.probe1.extend(xs.iter().map(|&v| Dual::con(v)));
        scratch.out1.clear();
        scratch.out1.resize(n * d, Dual::con(0.0));
        out.div.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..d {
            for s in 0..n {
                scratch.probe1[s * d + j].dot = 1.0;
            }
            f.eval_batch(&scratch.probe1, t, &mut scratch.out1);
            for s in 0..n {
                for i in 0..d {
                    let o = scratch.out1[s * d + i];
                    if j == 0 {
                        out.value[s * d + i] = o.val;
                    }
                    out.jac[s * d * d + i * d + j] = o.dot;
                }
                out.div[s] += scratch.out1[s * d + j].dot;
            }
            for s in 0..n {
                scratch.probe1[s * d + j].dot = 0.0;
            }
        }
        return;
    }

    scratch.probe2.clear();
    scratch.probe2.extend(xs.iter().map(|&v| Dual2::con(v)));
    scratch.out2.clear();
    scratch.out2.resize(n * d, Dual2::con(0.0));
    // diag[s*d*d + c*d + j] = d^2 f_c / dx_j^2 at sample s
    scratch.diag.clear();
    scratch.diag.resize(n * d * d, 0.0);
    out.div.iter_mut().for_each(|v| *v = 0.0);
    out.grad_div.iter_mut().for_each(|v| *v = 0.0);

    for j in 0..d {
        for s in 0..n {
            scratch.probe2[s * d + j].first = 1.0;
        }
        f.eval_batch(&scratch.probe2, t, &mut scratch.out2);
        for s in 0..n {
            for i in 0..d {
                let o = scratch.out2[s * d + i];
                if j == 0 {
                    out.value[s * d + i] = o.val;
                }
                out.jac[s * d * d + i * d + j] = o.first;
                scratch.diag[s * d * d + i * d + j] = o.second;
            }
            out.div[s] += scratch.out2[s * d + j].first;
            // Diagonal Hessian contribution to grad(div): H_c[c,j] for c == j.
            out.grad_div[s * d + j] += scratch.out2[s * d + j].second;
        }
        for s in 0..n {
            scratch.probe2[s * d + j].first = 0.0;
        }
    }

    // Pair probes give the mixed entries H_c[j,k] by polarization; grad_div[k]
    // needs H_c[c,k], so each pair (j,k) contributes H_j[j,k] to grad_div[k]
    // and H_k[k,j] to grad_div[j].
    for j in 0..d {
        for k in (j + 1)..d {
            for s in 0..n {
                scratch.probe2[s * d + j].first = 1.0;
                scratch.probe2[s * d + k].first = 1.0;
            }
            f.eval_batch(&scratch.probe2, t, &mut scratch.out2);
            for s in 0..n {
                let h = s * d * d;
                let mixed_j = 0.5
                    * (scratch.out2[s * d + j].second
                        - scratch.diag[h + j * d + j]
                        - scratch.diag[h + j * d + k]);
                let mixed_k = 0.5
                    * (scratch.out2[s * d + k].second
                        - scratch.diag[h + k * d + j]
                        - scratch.diag[h + k * d + k]);
                // mixed_j = H_j[j,k] contributes to grad_div component k.
                out.grad_div[s * d + k] += mixed_j;
                out.grad_div[s * d + j] += mixed_k;
            }
            for s in 0..n {
                scratch.probe2[s * d + j].first = 0.0;
                scratch.probe2[s * d + k].first = 0.0;
            }
        }
    }
}

/// Central-difference step balancing truncation against round-off:
/// `h = cbrt(eps) * (1 + |x|)`.
pub fn fd_step(x: f64) -> f64 {
    f64::EPSILON.cbrt() * (1.0 + x.abs())
}
