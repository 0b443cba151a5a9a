//! Hamiltonians `H_t = H⁰ + F_t` with a convolution-type nonlinearity
//!
//! `F_t(u) = -½ ∫ f(|(u*ψ)(x)|², x, t) dx`, where `ψ` is a real even smoothing
//! kernel and `f` is drawn from a small closed catalog. All gradients are L²
//! gradients with respect to the real inner product `Re⟨·,·⟩`, and Hamiltonian
//! vector fields follow `X^H = i∇H`.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dynamics::free_flow;
use crate::error::{invalid, Error, Result};
use crate::spectral::{analyze, convolve_real, grid_point, synthesize, GridField, SpectralField};

/// Descriptive tag recording how a kernel was built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayLaw {
    BandLimited { support: usize },
    Exponential { rate: f64 },
    Custom,
}

/// Real, even kernel coefficients `ψ̂(n) = ψ̂(-n) ≥ 0`, stored for `n = 0..=k_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "KernelConfig", into = "KernelConfig")]
pub struct KernelSpec {
    psi_hat: Vec<f64>,
    decay_law: DecayLaw,
}

/// File representation of a kernel.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelConfig {
    /// `ψ̂(n)` for `n = 0..=ℓ`, zero beyond.
    BandLimited { values: Vec<f64> },
    /// `ψ̂(n) = e^{-rate·|n|}` for `|n| ≤ k_max`.
    Exponential { rate: f64, k_max: usize },
    /// Full coefficient list ordered `n = -k..=k`; must be even.
    Inline { coeffs: Vec<f64> },
}

impl TryFrom<KernelConfig> for KernelSpec {
    type Error = Error;

    fn try_from(cfg: KernelConfig) -> Result<Self> {
        match cfg {
            KernelConfig::BandLimited { values } => KernelSpec::band_limited(values),
            KernelConfig::Exponential { rate, k_max } => KernelSpec::exponential(rate, k_max),
            KernelConfig::Inline { coeffs } => KernelSpec::from_symmetric(&coeffs),
        }
    }
}

impl From<KernelSpec> for KernelConfig {
    fn from(k: KernelSpec) -> Self {
        match k.decay_law {
            DecayLaw::BandLimited { .. } => KernelConfig::BandLimited { values: k.psi_hat },
            DecayLaw::Exponential { rate } => KernelConfig::Exponential {
                rate,
                k_max: k.psi_hat.len() - 1,
            },
            DecayLaw::Custom => {
                let km = k.psi_hat.len() as i64 - 1;
                KernelConfig::Inline {
                    coeffs: (-km..=km).map(|n| k.psi_hat[n.unsigned_abs() as usize]).collect(),
                }
            }
        }
    }
}

fn check_coeffs(values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(invalid("kernel needs at least the n = 0 coefficient"));
    }
    for (n, &v) in values.iter().enumerate() {
        if !v.is_finite() || v < 0.0 {
            return Err(invalid(format!("kernel coefficient ψ̂({n}) = {v} must be finite and ≥ 0")));
        }
    }
    Ok(())
}

impl KernelSpec {
    pub fn band_limited(values: Vec<f64>) -> Result<Self> {
        check_coeffs(&values)?;
        let support = values.len() - 1;
        Ok(Self {
            psi_hat: values,
            decay_law: DecayLaw::BandLimited { support },
        })
    }

    pub fn exponential(rate: f64, k_max: usize) -> Result<Self> {
        if !(rate.is_finite() && rate > 0.0) {
            return Err(invalid(format!("decay rate {rate} must be positive")));
        }
        Ok(Self {
            psi_hat: (0..=k_max).map(|n| (-rate * n as f64).exp()).collect(),
            decay_law: DecayLaw::Exponential { rate },
        })
    }

    /// Coefficients `ψ̂(n)` for `n = 0..=k_max`, tagged as custom.
    pub fn custom(values: Vec<f64>) -> Result<Self> {
        check_coeffs(&values)?;
        Ok(Self {
            psi_hat: values,
            decay_law: DecayLaw::Custom,
        })
    }

    /// Full list ordered `n = -k..=k`; rejected unless even.
    pub fn from_symmetric(coeffs: &[f64]) -> Result<Self> {
        if coeffs.len() % 2 == 0 {
            return Err(invalid("kernel list must have odd length 2k+1"));
        }
        let k = coeffs.len() / 2;
        for n in 1..=k {
            if coeffs[k + n] != coeffs[k - n] {
                return Err(invalid(format!("kernel is not even at n = {n}")));
            }
        }
        Self::custom(coeffs[k..].to_vec())
    }

    pub fn k_max(&self) -> usize {
        self.psi_hat.len() - 1
    }

    pub fn decay_law(&self) -> &DecayLaw {
        &self.decay_law
    }

    /// `ψ̂(|n|)` for `n = 0..=k_max`.
    pub fn half_coeffs(&self) -> &[f64] {
        &self.psi_hat
    }

    pub fn coeff(&self, n: i64) -> f64 {
        self.psi_hat.get(n.unsigned_abs() as usize).copied().unwrap_or(0.0)
    }

    pub fn l2_norm(&self) -> f64 {
        self.tail_norm_sqr(0, true).sqrt()
    }

    pub fn max_coeff(&self) -> f64 {
        self.psi_hat.iter().copied().fold(0.0, f64::max)
    }

    fn tail_norm_sqr(&self, from: usize, include_zero: bool) -> f64 {
        self.psi_hat
            .iter()
            .enumerate()
            .skip(from)
            .map(|(n, v)| if n == 0 { if include_zero { v * v } else { 0.0 } } else { 2.0 * v * v })
            .sum()
    }

    /// `L2(ψ - ψᵏ)`
    pub fn tail_l2(&self, k: usize) -> f64 {
        self.tail_norm_sqr(k + 1, false).sqrt()
    }

    /// `max_{|n|>k} ψ̂(n)`
    pub fn tail_max(&self, k: usize) -> f64 {
        self.psi_hat.iter().skip(k + 1).copied().fold(0.0, f64::max)
    }

    /// The Galerkin kernel `ψᵏ`: coefficients beyond `k` are dropped.
    pub fn truncate(&self, k: usize) -> Result<Self> {
        if k > self.k_max() {
            return Err(invalid(format!(
                "truncation bandwidth {k} exceeds kernel bandwidth {}",
                self.k_max()
            )));
        }
        Ok(Self {
            psi_hat: self.psi_hat[..=k].to_vec(),
            decay_law: self.decay_law.clone(),
        })
    }

    /// As a spectral field on bandwidth `k` (zero-padded or cut).
    pub fn to_field(&self, k: usize) -> SpectralField {
        SpectralField::from_fn(k, |n| Complex64::new(self.coeff(n), 0.0))
    }
}

/// A real trigonometric potential `V(x) = Σ_m a_m cos(mx) + Σ_m b_m sin(mx)`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Potential {
    #[serde(default)]
    pub cos: Vec<f64>,
    #[serde(default)]
    pub sin: Vec<f64>,
}

impl Potential {
    pub fn cosine(amplitudes: Vec<f64>) -> Self {
        Self {
            cos: amplitudes,
            sin: Vec::new(),
        }
    }

    pub fn value(&self, x: f64) -> f64 {
        let c: f64 = self.cos.iter().enumerate().map(|(m, a)| a * (m as f64 * x).cos()).sum();
        let s: f64 = self.sin.iter().enumerate().map(|(m, b)| b * (m as f64 * x).sin()).sum();
        c + s
    }

    /// `Σ|a_m| + Σ|b_m| ≥ sup|V|`
    pub fn sup_bound(&self) -> f64 {
        self.cos.iter().chain(&self.sin).map(|v| v.abs()).sum()
    }

    /// Highest frequency carrying a nonzero amplitude.
    pub fn support(&self) -> usize {
        let last = |v: &[f64]| v.iter().rposition(|a| *a != 0.0).unwrap_or(0);
        last(&self.cos).max(last(&self.sin))
    }

    pub fn sample(&self, n: usize) -> GridField {
        GridField::from_fn(n, |x| Complex64::new(self.value(x), 0.0))
    }

    fn validate(&self) -> Result<()> {
        if self.cos.iter().chain(&self.sin).any(|v| !v.is_finite()) {
            return Err(invalid("potential amplitudes must be finite"));
        }
        Ok(())
    }
}

/// Catalog of nonlinearities `f(w, x, t)`, before multiplication by the strength.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Nonlinearity {
    /// `f = c`
    Constant { c: f64 },
    /// `f = w`
    Hartree,
    /// `f = w²`
    Quadratic,
    /// `f = V(x)·w`
    Potential { potential: Potential },
    /// `f = (1 + cos 2πt)·f_base`
    TimeModulated { base: Box<Nonlinearity> },
}

impl Nonlinearity {
    fn modulation(t: f64) -> f64 {
        1.0 + (2.0 * PI * t.rem_euclid(1.0)).cos()
    }

    pub fn value(&self, w: f64, x: f64, t: f64) -> f64 {
        match self {
            Self::Constant { c } => *c,
            Self::Hartree => w,
            Self::Quadratic => w * w,
            Self::Potential { potential } => potential.value(x) * w,
            Self::TimeModulated { base } => Self::modulation(t) * base.value(w, x, t),
        }
    }

    /// `∂₁f(w, x, t)`
    pub fn d1(&self, w: f64, x: f64, t: f64) -> f64 {
        match self {
            Self::Constant { .. } => 0.0,
            Self::Hartree => 1.0,
            Self::Quadratic => 2.0 * w,
            Self::Potential { potential } => potential.value(x),
            Self::TimeModulated { base } => Self::modulation(t) * base.d1(w, x, t),
        }
    }

    /// Upper bound on `sup|f|` over `[0, w_max] × S¹ × [0, 1]`.
    pub fn sup_bound(&self, w_max: f64) -> f64 {
        match self {
            Self::Constant { c } => c.abs(),
            Self::Hartree => w_max,
            Self::Quadratic => w_max * w_max,
            Self::Potential { potential } => potential.sup_bound() * w_max,
            Self::TimeModulated { base } => 2.0 * base.sup_bound(w_max),
        }
    }

    /// Upper bounds on `sup|∂₁f|` and `sup|∂₁₁f|` over `[0, w_max] × S¹ × [0, 1]`.
    pub fn derivative_bounds(&self, w_max: f64) -> (f64, f64) {
        match self {
            Self::Constant { .. } => (0.0, 0.0),
            Self::Hartree => (1.0, 0.0),
            Self::Quadratic => (2.0 * w_max, 2.0),
            Self::Potential { potential } => (potential.sup_bound(), 0.0),
            Self::TimeModulated { base } => {
                let (a, b) = base.derivative_bounds(w_max);
                (2.0 * a, 2.0 * b)
            }
        }
    }

    /// Whether `F` is the diagonal quadratic form `-½Σ c(t) ψ̂²|û|²`.
    pub fn is_hartree_like(&self) -> bool {
        match self {
            Self::Hartree => true,
            Self::TimeModulated { base } => matches!(**base, Self::Hartree),
            _ => false,
        }
    }

    /// `∫_{t0}^{t1}` of the time factor multiplying a hartree-like base.
    pub(crate) fn time_factor_integral(&self, t0: f64, t1: f64) -> f64 {
        match self {
            Self::TimeModulated { .. } => {
                let s = |t: f64| t + (2.0 * PI * t).sin() / (2.0 * PI);
                s(t1) - s(t0)
            }
            _ => t1 - t0,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Self::Constant { c } if !c.is_finite() => Err(invalid("constant c must be finite")),
            Self::Potential { potential } => potential.validate(),
            Self::TimeModulated { base } => match **base {
                Self::TimeModulated { .. } => Err(invalid("time modulation cannot be nested")),
                ref b => b.validate(),
            },
            _ => Ok(()),
        }
    }
}

/// A complete Hamiltonian: kernel, nonlinearity, strength `ε` and bandwidth `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelRepr", into = "ModelRepr")]
pub struct ModelSpec {
    kernel: KernelSpec,
    nonlinearity: Nonlinearity,
    strength: f64,
    k: usize,
    psi: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelRepr {
    kernel: KernelSpec,
    nonlinearity: Nonlinearity,
    #[serde(default = "one")]
    strength: f64,
    bandwidth: usize,
}

fn one() -> f64 {
    1.0
}

impl TryFrom<ModelRepr> for ModelSpec {
    type Error = Error;

    fn try_from(r: ModelRepr) -> Result<Self> {
        ModelSpec::new(r.kernel, r.nonlinearity, r.strength, r.bandwidth)
    }
}

impl From<ModelSpec> for ModelRepr {
    fn from(m: ModelSpec) -> Self {
        ModelRepr {
            kernel: m.kernel,
            nonlinearity: m.nonlinearity,
            strength: m.strength,
            bandwidth: m.k,
        }
    }
}

impl ModelSpec {
    pub fn new(kernel: KernelSpec, nonlinearity: Nonlinearity, strength: f64, k: usize) -> Result<Self> {
        nonlinearity.validate()?;
        if !strength.is_finite() {
            return Err(invalid("strength must be finite"));
        }
        let psi = (0..=k).map(|n| kernel.coeff(n as i64)).collect();
        Ok(Self {
            kernel,
            nonlinearity,
            strength,
            k,
            psi,
        })
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn nonlinearity(&self) -> &Nonlinearity {
        &self.nonlinearity
    }

    pub fn strength(&self) -> f64 {
        self.strength
    }

    pub fn bandwidth(&self) -> usize {
        self.k
    }

    /// `ψ̂(|n|)` for `n = 0..=k`.
    pub fn psi(&self) -> &[f64] {
        &self.psi
    }

    pub fn with_strength(&self, strength: f64) -> Self {
        Self {
            strength,
            ..self.clone()
        }
    }

    pub fn with_bandwidth(&self, k: usize) -> Self {
        Self::new(self.kernel.clone(), self.nonlinearity.clone(), self.strength, k)
            .expect("already validated")
    }

    /// Same model with the kernel replaced by its truncation `ψᵏ`.
    pub fn with_truncated_kernel(&self, k: usize) -> Result<Self> {
        Self::new(self.kernel.truncate(k)?, self.nonlinearity.clone(), self.strength, self.k)
    }

    /// Quadrature nodes for `F` and `∇F`.
    pub fn quad_points(&self) -> usize {
        4 * (2 * self.k + 1)
    }

    pub fn f(&self, w: f64, x: f64, t: f64) -> f64 {
        self.strength * self.nonlinearity.value(w, x, t)
    }

    pub fn d1f(&self, w: f64, x: f64, t: f64) -> f64 {
        self.strength * self.nonlinearity.d1(w, x, t)
    }

    /// Certified bound on `sup|f|` over `[0, L2(ψ)²] × S¹ × [0, 1]`.
    pub fn sup_f_bound(&self) -> f64 {
        let w_max = self.kernel.l2_norm().powi(2);
        self.strength.abs() * self.nonlinearity.sup_bound(w_max)
    }

    /// `sup|f| < 1/8`, which keeps the Hofer norm below `π/2`.
    pub fn sufficient_gate(&self) -> bool {
        self.sup_f_bound() < 0.125
    }

    fn checked(&self, u: &SpectralField) -> Result<Option<SpectralField>> {
        match u.bandwidth().cmp(&self.k) {
            std::cmp::Ordering::Equal => Ok(None),
            std::cmp::Ordering::Less => Ok(Some(u.with_bandwidth(self.k))),
            std::cmp::Ordering::Greater => Err(Error::ShapeMismatch(format!(
                "field bandwidth {} exceeds model bandwidth {}",
                u.bandwidth(),
                self.k
            ))),
        }
    }

    /// `v = u*ψ` sampled on the quadrature grid.
    fn smoothed_samples(&self, u: &SpectralField) -> GridField {
        let v = convolve_real(u, &self.psi);
        synthesize(&v, self.quad_points()).expect("quadrature grid resolves the band")
    }

    /// `F_t(u) = -½ ∫ f(|(u*ψ)(x)|², x, t) dx` by the trapezoid rule.
    pub fn eval_f(&self, u: &SpectralField, t: f64) -> Result<f64> {
        let embedded = self.checked(u)?;
        let u = embedded.as_ref().unwrap_or(u);
        let g = self.smoothed_samples(u);
        let n = g.len();
        let sum: f64 = g
            .values()
            .iter()
            .enumerate()
            .map(|(j, v)| self.f(v.norm_sqr(), grid_point(j, n), t))
            .sum();
        Ok(-0.5 * 2.0 * PI / n as f64 * sum)
    }

    /// `∇F_t(u) = -ψ * (∂₁f(|u*ψ|², x, t)·(u*ψ))`, the exact gradient of the
    /// quadrature used by [`Self::eval_f`].
    pub fn grad_f(&self, u: &SpectralField, t: f64) -> Result<SpectralField> {
        let embedded = self.checked(u)?;
        let u = embedded.as_ref().unwrap_or(u);
        let mut g = self.smoothed_samples(u);
        let n = g.len();
        for (j, v) in g.values_mut().iter_mut().enumerate() {
            *v *= self.d1f(v.norm_sqr(), grid_point(j, n), t);
        }
        let mut out = analyze(&g, self.k)?;
        for (c, n) in out.coeffs_mut().iter_mut().zip(-(self.k as i64)..) {
            *c *= -self.psi[n.unsigned_abs() as usize];
        }
        Ok(out)
    }

    /// `G_t = F_t ∘ φ⁰_t`
    pub fn eval_g(&self, u: &SpectralField, t: f64) -> Result<f64> {
        self.eval_f(&free_flow(u, t), t)
    }

    /// `∇G_t(u) = φ⁰_{-t} ∇F_t(φ⁰_t u)`
    pub fn grad_g(&self, u: &SpectralField, t: f64) -> Result<SpectralField> {
        Ok(free_flow(&self.grad_f(&free_flow(u, t), t)?, -t))
    }

    /// `X^F = i∇F`
    pub fn vector_field_f(&self, u: &SpectralField, t: f64) -> Result<SpectralField> {
        Ok(self.grad_f(u, t)?.scale(Complex64::i()))
    }
}

/// `H⁰(u) = -Σ (n²/2)|û(n)|²`
pub fn free_energy(u: &SpectralField) -> f64 {
    -0.5 * u.iter_modes().map(|(n, c)| (n * n) as f64 * c.norm_sqr()).sum::<f64>()
}

/// `∇H⁰(u)(n) = -n² û(n)`
pub fn free_gradient(u: &SpectralField) -> SpectralField {
    SpectralField::from_fn(u.bandwidth(), |n| -u.coeff(n) * (n * n) as f64)
}

/// Uniform random point on the sphere of radius `r` in `ℂ^{2k+1}`.
pub fn random_sphere_point(k: usize, r: f64, rng: &mut impl Rng) -> SpectralField {
    let u = SpectralField::from_fn(k, |_| {
        Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
    });
    u.normalized().map(|v| v.scale_re(r)).unwrap_or(u)
}

/// Sampled Galerkin gaps between `F` and its truncation `Fᵏ`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GapReport {
    pub k: usize,
    pub radius: f64,
    pub samples: usize,
    /// `sup |F(u) - Fᵏ(u)|` over the samples.
    pub f_gap: f64,
    /// `sup L2(∇F(u) - ∇Fᵏ(u))` over the samples.
    pub grad_gap: f64,
    /// `sup |u*ψ - u*ψᵏ|_∞` over the samples.
    pub conv_gap: f64,
    /// `R·L2(ψ - ψᵏ)`
    pub conv_bound: f64,
    /// Rigorous bound on `f_gap`: a Lipschitz constant times `conv_bound`.
    pub f_gap_bound: f64,
    /// Rigorous bound on `grad_gap`.
    pub grad_gap_bound: f64,
}

/// Compares `F` with the truncated-kernel Hamiltonian `Fᵏ` on `samples` seeded
/// points of the ball `{L2(u) ≤ R}` at time `t`.
pub fn galerkin_gap(model: &ModelSpec, k: usize, radius: f64, samples: usize, seed: u64, t: f64) -> Result<GapReport> {
    if k >= model.bandwidth() {
        return Err(invalid(format!(
            "truncation {k} must be below the model bandwidth {}",
            model.bandwidth()
        )));
    }
    if !(radius >= 0.0) {
        return Err(invalid("radius must be non-negative"));
    }
    let truncated = model.with_bandwidth(model.bandwidth()).with_truncated_kernel(k.min(model.kernel.k_max()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let km = model.bandwidth();
    let (mut f_gap, mut grad_gap, mut conv_gap) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..samples {
        let r = if i % 2 == 0 { radius } else { radius * rng.gen::<f64>() };
        let u = random_sphere_point(km, r, &mut rng);
        f_gap = f_gap.max((model.eval_f(&u, t)? - truncated.eval_f(&u, t)?).abs());
        let dg = model.grad_f(&u, t)?.sub(&truncated.grad_f(&u, t)?)?;
        grad_gap = grad_gap.max(dg.l2_norm());
        let dv = convolve_real(&u, model.psi()).sub(&convolve_real(&u, truncated.psi()))?;
        conv_gap = conv_gap.max(dv.norm(crate::spectral::NormKind::Sup));
    }
    let tail = model.kernel.tail_l2(k);
    let conv_bound = radius * tail;
    let psi_norm = model.kernel.l2_norm();
    let w_max = (radius * psi_norm).powi(2) / (2.0 * PI);
    let eps = model.strength.abs();
    let (d1, d2) = model.nonlinearity.derivative_bounds(w_max);
    let f_lip = eps * d1 * radius * psi_norm;
    let grad_lip = model.kernel.max_coeff() * eps * (2.0 * d1 + 2.0 * d2 * w_max);
    Ok(GapReport {
        k,
        radius,
        samples,
        f_gap,
        grad_gap,
        conv_gap,
        conv_bound,
        f_gap_bound: f_lip * conv_bound,
        grad_gap_bound: grad_lip * conv_bound,
    })
}

/// Optimizer settings for [`hofer_norm`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HoferConfig {
    pub t_nodes: usize,
    pub starts: usize,
    pub max_iter: usize,
    /// Stop once the Riemannian gradient norm falls below this.
    pub grad_tol: f64,
    pub seed: u64,
}

impl Default for HoferConfig {
    fn default() -> Self {
        Self {
            t_nodes: 16,
            starts: 8,
            max_iter: 2000,
            grad_tol: 1e-10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HoferNode {
    pub t: f64,
    pub max: f64,
    pub min: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HoferReport {
    /// Trapezoid integral of the sampled oscillation `max F_t - min F_t`.
    pub estimate: f64,
    pub nodes: Vec<HoferNode>,
    /// Every extremum search reached the gradient tolerance.
    pub converged: bool,
    /// `2π·sup|f|`, an upper bound on the oscillation at every `t`.
    pub certified_upper: f64,
    pub sup_f_bound: f64,
    pub sufficient_gate: bool,
}

/// Riemannian gradient ascent of `sign·F_t` on the unit sphere. Returns the
/// best value of `F_t` found and whether the gradient tolerance was met.
fn sphere_extremum(model: &ModelSpec, t: f64, sign: f64, start: SpectralField, cfg: &HoferConfig) -> Result<(f64, bool)> {
    let mut u = start;
    let mut val = sign * model.eval_f(&u, t)?;
    let mut step = 1.0;
    for _ in 0..cfg.max_iter {
        let g = model.grad_f(&u, t)?.scale_re(sign);
        let radial = g.inner_re(&u);
        let tangent = g.axpy(Complex64::new(-radial, 0.0), &u)?;
        let gnorm2 = tangent.norm_sqr();
        if gnorm2.sqrt() < cfg.grad_tol {
            return Ok((sign * val, true));
        }
        let mut accepted = false;
        for _ in 0..60 {
            let trial = u
                .axpy(Complex64::new(step, 0.0), &tangent)?
                .normalized()
                .ok_or_else(|| Error::NonFinite("degenerate sphere step".into()))?;
            let tv = sign * model.eval_f(&trial, t)?;
            if tv >= val + 1e-4 * step * gnorm2 {
                u = trial;
                val = tv;
                step *= 2.0;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // No ascent possible at machine precision: the gradient is numerically zero.
            return Ok((sign * val, gnorm2.sqrt() < cfg.grad_tol.sqrt()));
        }
    }
    Ok((sign * val, false))
}

/// Estimates `|||F||| = ∫₀¹ (max F_t - min F_t) dt` over the unit sphere of the
/// model band, together with the certified `|f| < 1/8` gate.
pub fn hofer_norm(model: &ModelSpec, cfg: &HoferConfig) -> Result<HoferReport> {
    if model.bandwidth() < 1 {
        return Err(invalid("Hofer estimate needs bandwidth ≥ 1"));
    }
    if cfg.t_nodes == 0 || cfg.starts == 0 {
        return Err(invalid("t_nodes and starts must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let starts: Vec<SpectralField> = (0..cfg.starts)
        .map(|_| random_sphere_point(model.bandwidth(), 1.0, &mut rng))
        .collect();
    let mut nodes = Vec::with_capacity(cfg.t_nodes);
    for j in 0..cfg.t_nodes {
        let t = j as f64 / cfg.t_nodes as f64;
        let (mut max, mut min) = (f64::NEG_INFINITY, f64::INFINITY);
        let mut converged = true;
        for s in &starts {
            let (hi, c1) = sphere_extremum(model, t, 1.0, s.clone(), cfg)?;
            let (lo, c2) = sphere_extremum(model, t, -1.0, s.clone(), cfg)?;
            max = max.max(hi);
            min = min.min(lo);
            converged &= c1 && c2;
        }
        nodes.push(HoferNode { t, max, min, converged });
    }
    // Periodic trapezoid rule on [0, 1].
    let estimate = nodes.iter().map(|n| n.max - n.min).sum::<f64>() / cfg.t_nodes as f64;
    let sup_f = model.sup_f_bound();
    Ok(HoferReport {
        estimate,
        converged: nodes.iter().all(|n| n.converged),
        nodes,
        certified_upper: 2.0 * PI * sup_f,
        sup_f_bound: sup_f,
        sufficient_gate: model.sufficient_gate(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn exp_model(nl: Nonlinearity, eps: f64, k: usize) -> ModelSpec {
        ModelSpec::new(KernelSpec::exponential(1.0, k).unwrap(), nl, eps, k).unwrap()
    }

    pub(crate) fn catalog() -> Vec<Nonlinearity> {
        let pot = Potential {
            cos: vec![0.3, 1.0, 0.0, 0.5],
            sin: vec![0.0, 0.2],
        };
        vec![
            Nonlinearity::Constant { c: 0.1 },
            Nonlinearity::Hartree,
            Nonlinearity::Quadratic,
            Nonlinearity::Potential { potential: pot.clone() },
            Nonlinearity::TimeModulated { base: Box::new(Nonlinearity::Quadratic) },
            Nonlinearity::TimeModulated { base: Box::new(Nonlinearity::Potential { potential: pot }) },
        ]
    }

    fn random_field(k: usize, rng: &mut impl Rng) -> SpectralField {
        SpectralField::from_fn(k, |_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
    }

    #[test]
    fn truncation_examples() {
        let bl = KernelSpec::band_limited(vec![1.0, 0.5, 0.25]).unwrap();
        let extended = KernelSpec::custom(vec![1.0, 0.5, 0.25, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(extended.truncate(5).unwrap(), extended);
        assert_eq!(extended.tail_l2(2), 0.0);
        assert_eq!(bl.truncate(2).unwrap(), bl);

        let ek = KernelSpec::exponential(1.0, 40).unwrap();
        let expected = 2.0 * (-8f64).exp() / (1.0 - (-2f64).exp());
        assert!((ek.tail_l2(3).powi(2) - expected).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for k in 0..=40 {
            let t = ek.tail_l2(k);
            assert!(t <= prev);
            prev = t;
        }
        assert_eq!(ek.tail_l2(40), 0.0);
        assert!(ek.truncate(41).is_err());
    }

    #[test]
    fn kernels_must_be_real_even_nonnegative() {
        assert!(KernelSpec::from_symmetric(&[0.5, 1.0, 0.4]).is_err());
        assert!(KernelSpec::from_symmetric(&[0.5, 1.0, 0.5]).is_ok());
        assert!(KernelSpec::band_limited(vec![1.0, -0.1]).is_err());
        let json = r#"{"inline": {"coeffs": [[1.0, 0.0]]}}"#;
        assert!(serde_json::from_str::<KernelSpec>(json).is_err());
    }

    #[test]
    fn constant_f_gives_minus_pi_c() {
        let m = exp_model(Nonlinearity::Constant { c: 0.1 }, 1.0, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let u = random_field(6, &mut rng);
            assert!((m.eval_f(&u, 0.3).unwrap() + PI / 10.0).abs() < 1e-14);
            assert!(m.grad_f(&u, 0.3).unwrap().l2_norm() == 0.0);
            assert!(m.grad_g(&u, 0.7).unwrap().l2_norm() == 0.0);
        }
    }

    #[test]
    fn hartree_closed_forms() {
        let m = exp_model(Nonlinearity::Hartree, 0.1, 5);
        let u0 = SpectralField::single_mode(5, 0).unwrap();
        assert!((m.eval_f(&u0, 0.0).unwrap() + 0.05).abs() < 1e-15);
        let g = m.grad_f(&u0, 0.0).unwrap();
        assert!((g.coeff(0) - Complex64::new(-0.1, 0.0)).norm() < 1e-15);
        assert!(m.eval_f(&SpectralField::zeros(5), 0.0).unwrap() == 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u = random_field(5, &mut rng);
        let closed: f64 = -0.05 * u.iter_modes().map(|(n, c)| m.psi()[n.unsigned_abs() as usize].powi(2) * c.norm_sqr()).sum::<f64>();
        assert!((m.eval_f(&u, 0.0).unwrap() - closed).abs() < 1e-14);
        for t in [0.0, 0.37, 1.5] {
            let gg = m.grad_g(&u, t).unwrap();
            for (n, c) in gg.iter_modes() {
                let expected = -u.coeff(n) * 0.1 * m.psi()[n.unsigned_abs() as usize].powi(2);
                assert!((c - expected).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn grad_g_at_time_zero_is_grad_f() {
        let m = exp_model(Nonlinearity::Quadratic, 0.2, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = random_field(6, &mut rng);
        assert_eq!(m.grad_g(&u, 0.0).unwrap(), m.grad_f(&u, 0.0).unwrap());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for nl in catalog() {
            let m = exp_model(nl.clone(), 0.3, 8);
            for _ in 0..10 {
                let u = random_field(8, &mut rng);
                let h = random_field(8, &mut rng);
                let t: f64 = rng.gen();
                let tau = 1e-5;
                for (grad, eval) in [
                    (m.grad_f(&u, t).unwrap(), Box::new(|v: &SpectralField| m.eval_f(v, t).unwrap()) as Box<dyn Fn(&SpectralField) -> f64>),
                    (m.grad_g(&u, t).unwrap(), Box::new(|v: &SpectralField| m.eval_g(v, t).unwrap())),
                ] {
                    let an = grad.inner_re(&h);
                    let fd = (eval(&u.axpy(Complex64::new(tau, 0.0), &h).unwrap())
                        - eval(&u.axpy(Complex64::new(-tau, 0.0), &h).unwrap()))
                        / (2.0 * tau);
                    let scale = an.abs().max(1e-9);
                    assert!((an - fd).abs() / scale < 1e-6, "{nl:?}: {an} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn vector_field_is_orthogonal_to_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for nl in catalog() {
            let m = exp_model(nl, 0.5, 7);
            for _ in 0..10 {
                let u = random_field(7, &mut rng);
                let x = m.vector_field_f(&u, rng.gen()).unwrap();
                assert!(u.inner_re(&x).abs() < 1e-13 * (1.0 + x.l2_norm() * u.l2_norm()));
            }
        }
    }

    #[test]
    fn time_periodicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for nl in catalog() {
            let m = exp_model(nl, 0.5, 5);
            let u = random_field(5, &mut rng);
            for t in [0.0, 0.25, 0.3, 0.9] {
                let a = m.eval_f(&u, t).unwrap();
                let b = m.eval_f(&u, t + 1.0).unwrap();
                assert!((a - b).abs() <= 1e-14 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn gap_examples() {
        let bl = ModelSpec::new(
            KernelSpec::band_limited(vec![1.0, 0.6, 0.3]).unwrap(),
            Nonlinearity::Quadratic,
            0.2,
            8,
        )
        .unwrap();
        let r = galerkin_gap(&bl, 3, 1.5, 20, 1, 0.0).unwrap();
        assert_eq!((r.f_gap, r.grad_gap, r.conv_gap, r.conv_bound), (0.0, 0.0, 0.0, 0.0));

        let em = exp_model(Nonlinearity::Quadratic, 0.2, 12);
        let r0 = galerkin_gap(&em, 4, 0.0, 10, 1, 0.0).unwrap();
        assert_eq!((r0.f_gap, r0.grad_gap), (0.0, 0.0));

        for nl in catalog() {
            let m = exp_model(nl, 0.4, 12);
            for k in [2, 5] {
                let r = galerkin_gap(&m, k, 2.0, 30, 9, 0.4).unwrap();
                let expected = 2.0 * (2.0 * (-2.0 * (k as f64 + 1.0)).exp() / (1.0 - (-2f64).exp())).sqrt();
                // Kernel stops at the model band, so the analytic tail is slightly smaller.
                assert!(r.conv_bound <= expected && r.conv_bound > 0.99 * expected);
                assert!(r.conv_gap <= r.conv_bound);
                assert!(r.f_gap <= r.f_gap_bound * (1.0 + 1e-12) + 1e-15);
                assert!(r.grad_gap <= r.grad_gap_bound * (1.0 + 1e-12) + 1e-15);
            }
        }
    }

    #[test]
    fn hofer_constant_and_hartree() {
        let c = exp_model(Nonlinearity::Constant { c: 0.1 }, 1.0, 3);
        let r = hofer_norm(&c, &HoferConfig::default()).unwrap();
        assert_eq!(r.estimate, 0.0);

        let k = 4;
        let eps = 0.1;
        let h = exp_model(Nonlinearity::Hartree, eps, k);
        let r = hofer_norm(&h, &HoferConfig { t_nodes: 2, ..Default::default() }).unwrap();
        let closed = eps / 2.0 * (1.0 - (-2.0 * k as f64).exp());
        assert!((r.estimate - closed).abs() < 0.01 * closed, "{} vs {closed}", r.estimate);
        assert!(r.estimate <= r.certified_upper);
    }

    #[test]
    fn sufficient_gate_threshold() {
        let kernel = KernelSpec::exponential(1.0, 30).unwrap();
        let l2sq = kernel.l2_norm().powi(2);
        let gate = |eps: f64| ModelSpec::new(kernel.clone(), Nonlinearity::Hartree, eps, 4).unwrap().sufficient_gate();
        assert!(gate(0.12 / l2sq));
        assert!(!gate(0.13 / l2sq));
    }

    #[test]
    fn model_json_round_trip() {
        let m = ModelSpec::new(
            KernelSpec::exponential(1.0, 10).unwrap(),
            Nonlinearity::TimeModulated { base: Box::new(Nonlinearity::Potential { potential: Potential::cosine(vec![0.0, 1.0]) }) },
            0.05,
            6,
        )
        .unwrap();
        let s = serde_json::to_string(&m).unwrap();
        let back: ModelSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(m, back);
    }
}
