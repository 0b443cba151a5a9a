//! Time evolution, projective geometry and fixed points of the time-one map.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{invalid, Error, Result};
use crate::model::{ModelSpec, Nonlinearity};
use crate::spectral::{analyze, synthesize, GridField, SpectralField};

/// Exact free flow `û(n) ↦ e^{-in²t}û(n)`.
pub fn free_flow(u: &SpectralField, t: f64) -> SpectralField {
    SpectralField::from_fn(u.bandwidth(), |n| {
        u.coeff(n) * Complex64::from_polar(1.0, -((n * n) as f64) * t)
    })
}

/// Pointwise phase multiplication `u(x) ↦ e^{itV(x)}u(x)` on the grid of `v`.
pub fn potential_flow(u: &SpectralField, v: &GridField, t: f64) -> Result<SpectralField> {
    if v.values().iter().any(|x| x.im != 0.0 || !x.re.is_finite()) {
        return Err(invalid("potential must be real and finite"));
    }
    let mut g = synthesize(u, v.len())?;
    for (x, p) in g.values_mut().iter_mut().zip(v.values()) {
        *x *= Complex64::from_polar(1.0, t * p.re);
    }
    analyze(&g, u.bandwidth())
}

/// Result of [`evolve`].
#[derive(Debug, Clone)]
pub struct Evolution {
    pub state: SpectralField,
    /// Largest deviation of `L2(u)` from its initial value over all steps.
    pub l2_drift: f64,
}

/// Precomputed exact propagator for nonlinearities whose `F` is a quadratic
/// form `½Re⟨Lu, u⟩` times a scalar time factor.
enum LinearPart {
    Diagonal(Vec<f64>),
    Dense {
        vectors: DMatrix<Complex64>,
        values: DVector<f64>,
    },
}

impl LinearPart {
    fn build(model: &ModelSpec) -> Option<Self> {
        let base = match model.nonlinearity() {
            Nonlinearity::TimeModulated { base } => base.as_ref(),
            other => other,
        };
        if !matches!(base, Nonlinearity::Constant { .. } | Nonlinearity::Hartree | Nonlinearity::Potential { .. }) {
            return None;
        }
        let k = model.bandwidth();
        let m = 2 * k + 1;
        match base {
            Nonlinearity::Constant { .. } => return Some(Self::Diagonal(vec![0.0; m])),
            Nonlinearity::Hartree => {
                let psi = model.psi();
                return Some(Self::Diagonal(
                    (-(k as i64)..=k as i64)
                        .map(|n| -model.strength() * psi[n.unsigned_abs() as usize].powi(2))
                        .collect(),
                ));
            }
            _ => {}
        }
        let stripped = ModelSpec::new(model.kernel().clone(), base.clone(), model.strength(), k).ok()?;
        let mut l = DMatrix::<Complex64>::zeros(m, m);
        for j in 0..m {
            let mut e = SpectralField::zeros(k);
            e.coeffs_mut()[j] = Complex64::new(1.0, 0.0);
            let col = stripped.grad_f(&e, 0.0).ok()?;
            for (i, c) in col.coeffs().iter().enumerate() {
                l[(i, j)] = *c;
            }
        }
        let l = (&l + l.adjoint()) * Complex64::new(0.5, 0.0);
        let eig = SymmetricEigen::new(l);
        Some(Self::Dense {
            vectors: eig.eigenvectors,
            values: eig.eigenvalues,
        })
    }

    /// `u ↦ exp(iθL)u`
    fn apply(&self, u: &mut SpectralField, theta: f64) {
        match self {
            Self::Diagonal(d) => {
                for (c, l) in u.coeffs_mut().iter_mut().zip(d) {
                    *c *= Complex64::from_polar(1.0, theta * l);
                }
            }
            Self::Dense { vectors, values } => {
                let x = DVector::from_column_slice(u.coeffs());
                let mut y = vectors.adjoint() * x;
                for (c, l) in y.iter_mut().zip(values.iter()) {
                    *c *= Complex64::from_polar(1.0, theta * l);
                }
                let z = vectors * y;
                u.coeffs_mut().copy_from_slice(z.as_slice());
            }
        }
    }
}

/// Classical RK4 for `∂_t u = i∇F_t(u)` over `[t, t + h]`.
fn rk4_substep(model: &ModelSpec, u: &SpectralField, t: f64, h: f64) -> Result<SpectralField> {
    let k1 = model.vector_field_f(u, t)?;
    let k2 = model.vector_field_f(&u.axpy(Complex64::new(h / 2.0, 0.0), &k1)?, t + h / 2.0)?;
    let k3 = model.vector_field_f(&u.axpy(Complex64::new(h / 2.0, 0.0), &k2)?, t + h / 2.0)?;
    let k4 = model.vector_field_f(&u.axpy(Complex64::new(h, 0.0), &k3)?, t + h)?;
    let mut out = u.clone();
    for (j, o) in out.coeffs_mut().iter_mut().enumerate() {
        *o += (k1.coeffs()[j] + 2.0 * k2.coeffs()[j] + 2.0 * k3.coeffs()[j] + k4.coeffs()[j]) * (h / 6.0);
    }
    Ok(out)
}

/// Integrates `∂_t u = i∇H⁰(u) + i∇F_t(u)` from `t0` to `t1` by Strang
/// splitting: half free step, nonlinear step, half free step.
///
/// The nonlinear step is exact when `F` is a quadratic form (constant,
/// hartree and potential kinds, modulated or not) and RK4 otherwise.
pub fn evolve(model: &ModelSpec, u: &SpectralField, t0: f64, t1: f64, steps: usize) -> Result<Evolution> {
    if steps == 0 {
        return Err(invalid("evolve needs at least one step"));
    }
    if u.bandwidth() > model.bandwidth() {
        return Err(Error::ShapeMismatch(format!(
            "field bandwidth {} exceeds model bandwidth {}",
            u.bandwidth(),
            model.bandwidth()
        )));
    }
    let linear = LinearPart::build(model);
    let h = (t1 - t0) / steps as f64;
    let mut state = u.with_bandwidth(model.bandwidth());
    let n0 = state.l2_norm();
    let mut drift = 0.0f64;
    for j in 0..steps {
        let t = t0 + j as f64 * h;
        state = free_flow(&state, h / 2.0);
        match &linear {
            Some(lin) => {
                let theta = model.nonlinearity().time_factor_integral(t, t + h);
                lin.apply(&mut state, theta);
            }
            None => state = rk4_substep(model, &state, t, h)?,
        }
        state = free_flow(&state, h / 2.0);
        if !state.is_finite() {
            return Err(Error::NonFinite(format!("state diverged at step {j} (t = {t:.6})")));
        }
        drift = drift.max((state.l2_norm() - n0).abs());
    }
    Ok(Evolution { state, l2_drift: drift })
}

/// Unit-norm representative of a point of projective space, gauge-fixed so
/// that the coefficient at `gauge` is real and positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectivePoint {
    rep: SpectralField,
    gauge: i64,
}

/// Modes in the order `0, 1, -1, 2, -2, …`.
fn gauge_order(k: usize) -> impl Iterator<Item = i64> {
    std::iter::once(0).chain((1..=k as i64).flat_map(|n| [n, -n]))
}

impl ProjectivePoint {
    /// Gauge at the largest-magnitude coefficient; ties go to the lowest
    /// `|n|`, then to the nonnegative mode.
    pub fn new(u: &SpectralField) -> Result<Self> {
        let mut best = 0i64;
        let mut best_abs = -1.0;
        for n in gauge_order(u.bandwidth()) {
            let a = u.coeff(n).norm();
            if a > best_abs {
                best = n;
                best_abs = a;
            }
        }
        Self::with_gauge(u, best)
    }

    /// Gauge at a prescribed mode, which must carry a nonzero coefficient.
    pub fn with_gauge(u: &SpectralField, gauge: i64) -> Result<Self> {
        let unit = u
            .normalized()
            .ok_or_else(|| invalid("cannot projectivize the zero field"))?;
        let c = unit.coeff(gauge);
        if c.norm() == 0.0 {
            return Err(invalid(format!("gauge mode {gauge} has zero coefficient")));
        }
        let phase = c.conj() / c.norm();
        let mut rep = unit.scale(phase);
        let k = rep.bandwidth();
        if gauge.unsigned_abs() as usize <= k {
            let idx = rep.index(gauge);
            rep.coeffs_mut()[idx].im = 0.0;
        }
        Ok(Self { rep, gauge })
    }

    pub fn single_mode(k: usize, n: i64) -> Result<Self> {
        Self::new(&SpectralField::single_mode(k, n)?)
    }

    pub fn rep(&self) -> &SpectralField {
        &self.rep
    }

    pub fn gauge(&self) -> i64 {
        self.gauge
    }

    pub fn into_rep(self) -> SpectralField {
        self.rep
    }
}

/// Fubini–Study distance `arccos|⟨p̂, q̂⟩|` of the normalized representatives,
/// evaluated as `atan2(|q̂ - ⟨q̂,p̂⟩p̂|, |⟨q̂,p̂⟩|)`, which keeps full relative
/// precision for nearby points.
pub fn fs_distance_fields(p: &SpectralField, q: &SpectralField) -> f64 {
    if p == q && p.l2_norm() > 0.0 {
        return 0.0;
    }
    let (Some(p), Some(q)) = (p.normalized(), q.normalized()) else {
        return PI / 2.0;
    };
    let k = p.bandwidth().max(q.bandwidth());
    let (p, q) = (p.with_bandwidth(k), q.with_bandwidth(k));
    let c = q.inner(&p);
    let perp = q.axpy(-c, &p).expect("same bandwidth").l2_norm();
    perp.atan2(c.norm()).clamp(0.0, PI / 2.0)
}

pub fn fs_distance(p: &ProjectivePoint, q: &ProjectivePoint) -> f64 {
    fs_distance_fields(&p.rep, &q.rep)
}

/// Distance between `p` and its image under the time-one map.
pub fn fixed_point_residual(model: &ModelSpec, p: &ProjectivePoint, steps: usize) -> Result<f64> {
    let image = evolve(model, &p.rep, 0.0, 1.0, steps)?.state;
    Ok(fs_distance_fields(&image, &p.rep))
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_phase(a: f64) -> f64 {
    let r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r <= -PI {
        r + 2.0 * PI
    } else {
        r
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NewtonConfig {
    /// Target Fubini–Study residual.
    pub tol: f64,
    pub max_iter: usize,
    /// Propagation steps for the time-one map.
    pub steps: usize,
    /// Forward-difference step for the Jacobian.
    pub fd_step: f64,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 20,
            steps: 400,
            fd_step: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NewtonOutcome {
    pub point: ProjectivePoint,
    /// Eigenphase `a` in `(-π, π]` with `φ₁(u) ≈ e^{ia}u`.
    pub phase: f64,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn pack(u: &SpectralField) -> Vec<f64> {
    u.coeffs().iter().flat_map(|c| [c.re, c.im]).collect()
}

fn unpack(x: &[f64], k: usize) -> SpectralField {
    SpectralField::from_coeffs(x.chunks(2).map(|c| Complex64::new(c[0], c[1])).collect())
        .unwrap_or_else(|_| SpectralField::zeros(k))
}

struct FixedPointSystem<'a> {
    model: &'a ModelSpec,
    steps: usize,
    gauge_idx: usize,
}

impl FixedPointSystem<'_> {
    fn image(&self, u: &SpectralField) -> Result<SpectralField> {
        Ok(evolve(self.model, u, 0.0, 1.0, self.steps)?.state)
    }

    /// Residual vector for `(u, a)` given the precomputed image `φ₁(u)`.
    fn residual(&self, u: &SpectralField, img: &SpectralField, a: f64) -> Vec<f64> {
        let ea = Complex64::from_polar(1.0, a);
        let mut r: Vec<f64> = img
            .coeffs()
            .iter()
            .zip(u.coeffs())
            .flat_map(|(f, x)| {
                let d = f - ea * x;
                [d.re, d.im]
            })
            .collect();
        r.push(u.norm_sqr() - 1.0);
        r.push(u.coeffs()[self.gauge_idx].im);
        r
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Solves `φ₁(u) = e^{ia}u` with `L2(u) = 1` and the gauge coefficient of the
/// guess held real, by Gauss–Newton with a forward-difference Jacobian and an
/// SVD least-squares step.
pub fn newton_fixed_point(model: &ModelSpec, guess: &ProjectivePoint, cfg: &NewtonConfig) -> Result<NewtonOutcome> {
    if guess.rep.bandwidth() > model.bandwidth() {
        return Err(Error::ShapeMismatch("guess bandwidth exceeds model bandwidth".into()));
    }
    let k = model.bandwidth();
    let start = ProjectivePoint::with_gauge(&guess.rep.with_bandwidth(k), guess.gauge)?;
    let gauge = start.gauge;
    let sys = FixedPointSystem {
        model,
        steps: cfg.steps,
        gauge_idx: start.rep.index(gauge),
    };
    let mut u = start.into_rep();
    let mut img = sys.image(&u)?;
    let mut a = img.inner(&u).arg();
    let mut fs = fs_distance_fields(&img, &u);
    let dim = u.coeffs().len() * 2;
    for iter in 0..cfg.max_iter {
        if fs < cfg.tol {
            return Ok(NewtonOutcome {
                point: ProjectivePoint::with_gauge(&u, gauge)?,
                phase: wrap_phase(a),
                residual: fs,
                iterations: iter,
                converged: true,
            });
        }
        let r = sys.residual(&u, &img, a);
        let ea = Complex64::from_polar(1.0, a);
        let mut jac = DMatrix::<f64>::zeros(dim + 2, dim + 1);
        let x = pack(&u);
        for j in 0..dim {
            let mut xp = x.clone();
            xp[j] += cfg.fd_step;
            let up = unpack(&xp, k);
            let ip = sys.image(&up)?;
            for (i, (f1, f0)) in ip.coeffs().iter().zip(img.coeffs()).enumerate() {
                let d = (f1 - f0) / cfg.fd_step;
                jac[(2 * i, j)] = d.re;
                jac[(2 * i + 1, j)] = d.im;
            }
            let e = if j % 2 == 0 { ea } else { ea * Complex64::i() };
            jac[(j - j % 2, j)] -= e.re;
            jac[(j - j % 2 + 1, j)] -= e.im;
            jac[(dim, j)] = 2.0 * x[j];
        }
        jac[(dim + 1, 2 * sys.gauge_idx + 1)] = 1.0;
        for (i, c) in u.coeffs().iter().enumerate() {
            let d = -Complex64::i() * ea * c;
            jac[(2 * i, dim)] = d.re;
            jac[(2 * i + 1, dim)] = d.im;
        }
        let rhs = DVector::from_iterator(r.len(), r.iter().map(|v| -v));
        let svd = jac.svd(true, true);
        let smax = svd.singular_values.max();
        if !(smax > 0.0) {
            return Err(Error::Singular("fixed-point Jacobian vanishes".into()));
        }
        let delta = svd
            .solve(&rhs, smax * 1e-12)
            .map_err(|e| Error::Singular(e.to_string()))?;
        let r0 = norm(&r);
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..12 {
            let xn: Vec<f64> = x.iter().zip(delta.iter()).map(|(x, d)| x + step * d).collect();
            let an = a + step * delta[dim];
            let cand = unpack(&xn, k);
            let Ok(cand) = ProjectivePoint::with_gauge(&cand, gauge) else {
                step *= 0.5;
                continue;
            };
            let cand = cand.into_rep();
            let ci = sys.image(&cand)?;
            let rn = norm(&sys.residual(&cand, &ci, an));
            if rn < r0 || step < 1e-3 {
                u = cand;
                img = ci;
                a = an;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        a = img.inner(&u).arg();
        fs = fs_distance_fields(&img, &u);
    }
    let converged = fs < cfg.tol;
    Ok(NewtonOutcome {
        point: ProjectivePoint::with_gauge(&u, gauge)?,
        phase: wrap_phase(a),
        residual: fs,
        iterations: cfg.max_iter,
        converged,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathPoint {
    pub eps: f64,
    pub point: ProjectivePoint,
    pub phase: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContinuationResult {
    pub n: i64,
    pub path: Vec<PathPoint>,
    pub converged: bool,
}

impl ContinuationResult {
    pub fn endpoint(&self) -> &PathPoint {
        self.path.last().expect("path is never empty")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContinuationConfig {
    /// Uniform steps from 0 to the model strength.
    pub eps_steps: usize,
    pub max_bisections: usize,
    pub newton: NewtonConfig,
}

impl Default for ContinuationConfig {
    fn default() -> Self {
        Self {
            eps_steps: 10,
            max_bisections: 8,
            newton: NewtonConfig::default(),
        }
    }
}

/// `0, ε/m, 2ε/m, …, ε`
pub fn uniform_schedule(target: f64, steps: usize) -> Vec<f64> {
    let steps = steps.max(1);
    (0..=steps).map(|i| target * i as f64 / steps as f64).collect()
}

/// Follows the fixed point `u⁰ₙ` of the free map through the strengths in
/// `schedule`, using the previous solution as predictor and Newton as
/// corrector; failed steps are bisected up to `cfg.max_bisections` times.
pub fn continue_fixed_point(model: &ModelSpec, n: i64, schedule: &[f64], cfg: &ContinuationConfig) -> Result<ContinuationResult> {
    if n.unsigned_abs() as usize > model.bandwidth() {
        return Err(invalid(format!("mode {n} outside bandwidth {}", model.bandwidth())));
    }
    match schedule.first() {
        Some(&0.0) => {}
        _ => return Err(invalid("schedule must start at 0")),
    }
    if schedule.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(invalid("schedule must be strictly increasing"));
    }
    let start = ProjectivePoint::single_mode(model.bandwidth(), n)?;
    let mut path = vec![PathPoint {
        eps: 0.0,
        point: start,
        phase: wrap_phase(-((n * n) as f64)),
        residual: 0.0,
    }];
    for &target in &schedule[1..] {
        let mut depth = 0;
        let mut next = target;
        loop {
            let prev = path.last().expect("non-empty");
            let out = newton_fixed_point(&model.with_strength(next), &prev.point, &cfg.newton)?;
            if out.converged {
                path.push(PathPoint {
                    eps: next,
                    point: out.point,
                    phase: out.phase,
                    residual: out.residual,
                });
                if next == target {
                    break;
                }
                next = target;
                continue;
            }
            depth += 1;
            if depth > cfg.max_bisections {
                return Ok(ContinuationResult { n, path, converged: false });
            }
            let eps_prev = path.last().expect("non-empty").eps;
            next = 0.5 * (eps_prev + next);
        }
    }
    Ok(ContinuationResult { n, path, converged: true })
}
