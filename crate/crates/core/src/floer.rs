//! Floer cylinders `ℝ × S¹ → ℂP^{2k}` for the cutoff Hamiltonians
//! `H_{s,t} = H⁰ + φ(s)·F_t`.
//!
//! States are stored in the transformed frame `w(s,t) = φ⁰_t(u(s,t))`, which
//! is genuinely 1-periodic in `t`. The solver works in the affine chart
//! `u_g = 1` around the gauge mode `g`, where the equation
//! `∂_s w + i∂_t w + ∇H⁰(w) + φ(s)∇F_t(w) = 0` on projective space becomes
//!
//! ```text
//! R_m = ∂_s z_m + i∂_t z_m + (g² - m²) z_m + φ(s)(Γ_m - Γ_g z_m),   m ≠ g,
//! ```
//!
//! with `Γ(u) = |u|·∇F_t(u/|u|)`. `∂_s` is a central difference and `∂_t`
//! spectral.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::dynamics::{evolve, fs_distance_fields, ProjectivePoint};
use crate::error::{invalid, Error, Result};
use crate::model::{free_gradient, ModelSpec};
use crate::spectral::SpectralField;

/// `e(x) = exp(-1/x)` for `x > 0`, else 0.
fn edge(x: f64) -> f64 {
    if x > 0.0 {
        (-1.0 / x).exp()
    } else {
        0.0
    }
}

/// Smoothstep `S(x) = e(x)/(e(x) + e(1-x))`, flat at both ends with `S'(½) = 2`.
pub fn smoothstep(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x >= 1.0 {
        1.0
    } else {
        let (a, b) = (edge(x), edge(1.0 - x));
        a / (a + b)
    }
}

pub fn smoothstep_slope(x: f64) -> f64 {
    if x <= 0.0 || x >= 1.0 {
        return 0.0;
    }
    let (a, b) = (edge(x), edge(1.0 - x));
    let d = a + b;
    a * b * (1.0 / (x * x) + 1.0 / ((1.0 - x) * (1.0 - x))) / (d * d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CutoffKind {
    /// Up on `[-1, 0]`, plateau on `[0, 2T]`, down on `[2T, 2T+1]`.
    Bump,
    /// Up on `[-1, 0]`, then held at 1.
    Switch,
}

/// The cutoff `φ_T`; the plateau height is `min(T, 1)` so that `φ_0 ≡ 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutoffProfile {
    pub t: f64,
    pub kind: CutoffKind,
}

/// The bump cutoff `φ_T`.
pub fn build_cutoff(t: f64) -> Result<CutoffProfile> {
    CutoffProfile::bump(t)
}

impl CutoffProfile {
    pub fn bump(t: f64) -> Result<Self> {
        if !(t >= 0.0 && t.is_finite()) {
            return Err(invalid(format!("cutoff parameter T = {t} must be finite and ≥ 0")));
        }
        Ok(Self { t, kind: CutoffKind::Bump })
    }

    /// Switch-on profile connecting the free end to the full Hamiltonian.
    pub fn switch(t: f64) -> Result<Self> {
        if !(t >= 1.0 && t.is_finite()) {
            return Err(invalid(format!("switch cutoff needs T ≥ 1, got {t}")));
        }
        Ok(Self { t, kind: CutoffKind::Switch })
    }

    pub fn amplitude(&self) -> f64 {
        self.t.min(1.0)
    }

    pub fn value(&self, s: f64) -> f64 {
        let up = smoothstep(s + 1.0);
        let a = self.amplitude();
        match self.kind {
            CutoffKind::Switch => a * up,
            CutoffKind::Bump => a * up * smoothstep(2.0 * self.t + 1.0 - s),
        }
    }

    pub fn slope(&self, s: f64) -> f64 {
        let a = self.amplitude();
        match self.kind {
            CutoffKind::Switch => a * smoothstep_slope(s + 1.0),
            CutoffKind::Bump => {
                let (up, down) = (smoothstep(s + 1.0), smoothstep(2.0 * self.t + 1.0 - s));
                a * (smoothstep_slope(s + 1.0) * down - up * smoothstep_slope(2.0 * self.t + 1.0 - s))
            }
        }
    }

    /// Interval outside of which `φ` is constant.
    pub fn ramp_support(&self) -> (f64, f64) {
        match self.kind {
            CutoffKind::Switch => (-1.0, 0.0),
            CutoffKind::Bump => (-1.0, 2.0 * self.t + 1.0),
        }
    }
}

/// Uniform grid on `[-S, S] × [0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CylinderGrid {
    pub s_half: f64,
    pub n_s: usize,
    pub n_t: usize,
    pub k: usize,
}

impl CylinderGrid {
    pub fn new(s_half: f64, n_s: usize, n_t: usize, k: usize) -> Result<Self> {
        if n_s < 16 || n_t < 8 {
            return Err(invalid(format!("grid needs n_s ≥ 16 and n_t ≥ 8, got {n_s} × {n_t}")));
        }
        if !(s_half > 0.0 && s_half.is_finite()) {
            return Err(invalid("s window must be positive"));
        }
        Ok(Self { s_half, n_s, n_t, k })
    }

    pub fn h(&self) -> f64 {
        2.0 * self.s_half / (self.n_s - 1) as f64
    }

    pub fn s(&self, i: usize) -> f64 {
        -self.s_half + i as f64 * self.h()
    }

    pub fn t(&self, j: usize) -> f64 {
        j as f64 / self.n_t as f64
    }

    pub fn refine_s(&self) -> Self {
        Self {
            n_s: 2 * self.n_s,
            ..*self
        }
    }

    /// The ramp of `cutoff` must lie inside the window.
    pub fn check_cutoff(&self, cutoff: &CutoffProfile) -> Result<()> {
        let (a, b) = cutoff.ramp_support();
        if cutoff.amplitude() > 0.0 && (a < -self.s_half || b > self.s_half) {
            return Err(invalid(format!(
                "cutoff ramp [{a}, {b}] does not fit in [-{0}, {0}]",
                self.s_half
            )));
        }
        Ok(())
    }
}

/// Unit-norm node fields on the cylinder, gauge-fixed at mode `gauge`, in the
/// transformed frame. Rows `i = 0` and `i = n_s - 1` hold the boundary data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloerState {
    pub grid: CylinderGrid,
    pub cutoff: CutoffProfile,
    pub gauge: i64,
    /// Seed mode of the free fixed point at the left end.
    pub mode: i64,
    nodes: Vec<SpectralField>,
}

impl FloerState {
    pub fn from_nodes(grid: CylinderGrid, cutoff: CutoffProfile, gauge: i64, mode: i64, nodes: Vec<SpectralField>) -> Result<Self> {
        if nodes.len() != grid.n_s * grid.n_t {
            return Err(Error::ShapeMismatch(format!(
                "{} node fields for a {} × {} grid",
                nodes.len(),
                grid.n_s,
                grid.n_t
            )));
        }
        if gauge.unsigned_abs() as usize > grid.k {
            return Err(invalid("gauge mode outside the band"));
        }
        let nodes = nodes
            .iter()
            .map(|u| {
                if u.bandwidth() != grid.k {
                    return Err(Error::ShapeMismatch("node bandwidth differs from grid".into()));
                }
                Ok(ProjectivePoint::with_gauge(u, gauge)?.into_rep())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            grid,
            cutoff,
            gauge,
            mode,
            nodes,
        })
    }

    /// Interpolates linearly in chart coordinates between two boundary orbits.
    pub fn interpolate(grid: CylinderGrid, cutoff: CutoffProfile, boundary: &FloerBoundary) -> Result<Self> {
        boundary.check(&grid)?;
        let g = boundary.gauge;
        let zl = boundary.left.iter().map(|u| chart_lift(u, g)).collect::<Result<Vec<_>>>()?;
        let zr = boundary.right.iter().map(|u| chart_lift(u, g)).collect::<Result<Vec<_>>>()?;
        let mut nodes = Vec::with_capacity(grid.n_s * grid.n_t);
        for i in 0..grid.n_s {
            let theta = i as f64 / (grid.n_s - 1) as f64;
            for j in 0..grid.n_t {
                let z = zl[j]
                    .scale_re(1.0 - theta)
                    .axpy(Complex64::new(theta, 0.0), &zr[j])?;
                nodes.push(z);
            }
        }
        Self::from_nodes(grid, cutoff, g, boundary.mode, nodes)
    }

    pub fn node(&self, i: usize, j: usize) -> &SpectralField {
        &self.nodes[i * self.grid.n_t + j]
    }

    pub fn nodes(&self) -> &[SpectralField] {
        &self.nodes
    }

    /// The state at `s_i` in the untransformed frame `u = φ⁰_{-t} w`.
    pub fn untransformed(&self, i: usize, j: usize) -> SpectralField {
        crate::dynamics::free_flow(self.node(i, j), -self.grid.t(j))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let raw: FloerState = serde_json::from_str(s)?;
        Self::from_nodes(raw.grid, raw.cutoff, raw.gauge, raw.mode, raw.nodes)
    }
}

/// Dirichlet data at `s = ±S`: one field per `t` node, transformed frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FloerBoundary {
    pub left: Vec<SpectralField>,
    pub right: Vec<SpectralField>,
    pub gauge: i64,
    pub mode: i64,
}

impl FloerBoundary {
    fn check(&self, grid: &CylinderGrid) -> Result<()> {
        if self.left.len() != grid.n_t || self.right.len() != grid.n_t {
            return Err(Error::ShapeMismatch("boundary orbits must have one field per t node".into()));
        }
        if self.left.iter().chain(&self.right).any(|u| u.bandwidth() != grid.k) {
            return Err(Error::ShapeMismatch("boundary bandwidth differs from grid".into()));
        }
        Ok(())
    }
}

/// `t ↦ φ⁰_t(e_n)` on the `t` nodes: the free fixed point `u⁰ₙ` in the
/// transformed frame.
pub fn free_orbit(k: usize, n: i64, n_t: usize) -> Result<Vec<SpectralField>> {
    let e = SpectralField::single_mode(k, n)?;
    Ok((0..n_t)
        .map(|j| crate::dynamics::free_flow(&e, j as f64 / n_t as f64))
        .collect())
}

/// `t ↦ φ_t(p)` under the full flow, on the `t` nodes.
pub fn fixed_point_orbit(model: &ModelSpec, p: &ProjectivePoint, n_t: usize, steps_per_unit: usize) -> Result<Vec<SpectralField>> {
    let per = (steps_per_unit / n_t).max(1);
    let mut out = Vec::with_capacity(n_t);
    let mut u = p.rep().with_bandwidth(model.bandwidth());
    for j in 0..n_t {
        out.push(u.clone());
        let t = j as f64 / n_t as f64;
        u = evolve(model, &u, t, t + 1.0 / n_t as f64, per)?.state;
    }
    Ok(out)
}

/// `u / u_g`
fn chart_lift(u: &SpectralField, g: i64) -> Result<SpectralField> {
    let c = u.coeff(g);
    if c.norm() < 1e-12 * u.l2_norm().max(1e-300) {
        return Err(Error::Singular(format!("state leaves the chart around mode {g}")));
    }
    Ok(u.scale(c.inv()))
}

/// `Γ(u) = |u|·∇F_t(u/|u|)`
fn gamma(model: &ModelSpec, u: &SpectralField, t: f64) -> Result<SpectralField> {
    let r = u.l2_norm();
    Ok(model.grad_f(&u.scale_re(1.0 / r), t)?.scale_re(r))
}

/// `P^⊥_u ξ = ξ - ⟨ξ, u⟩u/|u|²`
fn horizontal(xi: &SpectralField, u: &SpectralField) -> SpectralField {
    let c = xi.inner(u) / u.norm_sqr();
    xi.axpy(-c, u).expect("same bandwidth")
}

/// Unitary discrete Fourier transform in `t` on `n_t` nodes.
struct TimeSpectral {
    n: usize,
    scale: f64,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl TimeSpectral {
    fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n,
            scale: 1.0 / (n as f64).sqrt(),
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
        }
    }

    fn freq(&self, q: usize) -> f64 {
        let p = if q < self.n / 2 { q as i64 } else { q as i64 - self.n as i64 };
        2.0 * PI * p as f64
    }

    fn forward(&self, buf: &mut [Complex64]) {
        self.fwd.process(buf);
        buf.iter_mut().for_each(|x| *x *= self.scale);
    }

    fn inverse(&self, buf: &mut [Complex64]) {
        self.inv.process(buf);
        buf.iter_mut().for_each(|x| *x *= self.scale);
    }

    fn derivative(&self, buf: &mut [Complex64]) {
        self.forward(buf);
        for (q, x) in buf.iter_mut().enumerate() {
            *x *= Complex64::new(0.0, self.freq(q));
        }
        self.inverse(buf);
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FloerConfig {
    /// Target discrete L² residual norm.
    pub tol: f64,
    pub max_iter: usize,
    pub initial_damping: f64,
    pub max_damping: f64,
    /// Forward-difference step for the nonlinear Jacobian blocks.
    pub fd_step: f64,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
}

impl Default for FloerConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 60,
            initial_damping: 1e-4,
            max_damping: 1e10,
            fd_step: 1e-7,
            cg_tol: 1e-12,
            cg_max_iter: 400,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iteration: usize,
    pub residual_norm: f64,
    pub energy: f64,
    pub damping: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FloerSolution {
    pub state: FloerState,
    pub converged: bool,
    pub iterations: usize,
    pub residual_norm: f64,
    pub energy: f64,
    pub history: Vec<HistoryRow>,
    /// Why the solver stopped.
    pub status: String,
}

/// Chart-coordinate discretization of the Floer operator.
///
/// After a unitary DFT in `t`, the free part acts on each `(m, p)` mode as
/// `∂_s - λ` with `λ = 2πp + m² - g²`. A mode is pinned at the end it decays
/// away from (`λ ≤ 0`: left, `λ > 0`: right) and `∂_s` is the second-order
/// backward difference marching away from that end. Arrays use the layout
/// `[(i·n_t + j)·m + mi]`, with `j` read as `q` in mode space.
struct ChartSystem<'a> {
    model: &'a ModelSpec,
    grid: CylinderGrid,
    cutoff: CutoffProfile,
    g: i64,
    m: usize,
    spectral: TimeSpectral,
}

impl<'a> ChartSystem<'a> {
    fn new(model: &'a ModelSpec, grid: CylinderGrid, cutoff: CutoffProfile, g: i64) -> Result<Self> {
        if model.bandwidth() != grid.k {
            return Err(Error::ShapeMismatch(format!(
                "model bandwidth {} differs from grid bandwidth {}",
                model.bandwidth(),
                grid.k
            )));
        }
        Ok(Self {
            model,
            grid,
            cutoff,
            g,
            m: 2 * grid.k + 1,
            spectral: TimeSpectral::new(grid.n_t),
        })
    }

    fn at(&self, i: usize, j: usize, mi: usize) -> usize {
        (i * self.grid.n_t + j) * self.m + mi
    }

    fn gi(&self) -> usize {
        (self.g + self.grid.k as i64) as usize
    }

    fn mode(&self, mi: usize) -> i64 {
        mi as i64 - self.grid.k as i64
    }

    fn lambda(&self, mi: usize, q: usize) -> f64 {
        let mm = self.mode(mi);
        self.spectral.freq(q) + (mm * mm - self.g * self.g) as f64
    }

    /// Row of position `k` counted from the pinned end, and the sign of `∂_s`
    /// in that direction.
    fn row(&self, mi: usize, q: usize, k: usize) -> (usize, f64) {
        if self.lambda(mi, q) <= 0.0 {
            (k, 1.0)
        } else {
            (self.grid.n_s - 1 - k, -1.0)
        }
    }

    fn transform(&self, v: &[Complex64], inverse: bool) -> Vec<Complex64> {
        let nt = self.grid.n_t;
        let mut out = vec![Complex64::new(0.0, 0.0); v.len()];
        let mut col = vec![Complex64::new(0.0, 0.0); nt];
        for i in 0..self.grid.n_s {
            for mi in 0..self.m {
                for j in 0..nt {
                    col[j] = v[self.at(i, j, mi)];
                }
                if inverse {
                    self.spectral.inverse(&mut col);
                } else {
                    self.spectral.forward(&mut col);
                }
                for j in 0..nt {
                    out[self.at(i, j, mi)] = col[j];
                }
            }
        }
        out
    }

    /// Zeroes the gauge slots and the pinned slots.
    fn project(&self, v: &mut [Complex64]) {
        for q in 0..self.grid.n_t {
            for mi in 0..self.m {
                if mi == self.gi() {
                    for i in 0..self.grid.n_s {
                        v[self.at(i, q, mi)] = Complex64::new(0.0, 0.0);
                    }
                } else {
                    let (i, _) = self.row(mi, q, 0);
                    v[self.at(i, q, mi)] = Complex64::new(0.0, 0.0);
                }
            }
        }
    }

    /// Difference weights at position `k ≥ 1`: `(diag, on k-1, on k-2)`.
    fn weights(&self, k: usize) -> (f64, f64, f64) {
        let h = self.grid.h();
        if k == 1 {
            (1.0 / h, -1.0 / h, 0.0)
        } else {
            (1.5 / h, -2.0 / h, 0.5 / h)
        }
    }

    /// `(∂_s - λ) ẑ` at every unpinned slot, pinned values included.
    fn linear(&self, zhat: &[Complex64]) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); zhat.len()];
        for q in 0..self.grid.n_t {
            for mi in 0..self.m {
                if mi == self.gi() {
                    continue;
                }
                let lam = self.lambda(mi, q);
                let z = |k: usize| zhat[self.at(self.row(mi, q, k).0, q, mi)];
                for k in 1..self.grid.n_s {
                    let (row, sigma) = self.row(mi, q, k);
                    let (a, b, c) = self.weights(k);
                    let mut d = a * z(k) + b * z(k - 1);
                    if k >= 2 {
                        d += c * z(k - 2);
                    }
                    out[self.at(row, q, mi)] = sigma * d - lam * z(k);
                }
            }
        }
        out
    }

    /// Solves the free part on unpinned slots; real coefficients make the
    /// transpose also the adjoint.
    fn solve_linear(&self, b: &[Complex64], transpose: bool) -> Vec<Complex64> {
        let ns = self.grid.n_s;
        let mut out = vec![Complex64::new(0.0, 0.0); b.len()];
        let mut x = vec![Complex64::new(0.0, 0.0); ns];
        for q in 0..self.grid.n_t {
            for mi in 0..self.m {
                if mi == self.gi() {
                    continue;
                }
                let lam = self.lambda(mi, q);
                let sigma = self.row(mi, q, 0).1;
                let rhs = |k: usize| b[self.at(self.row(mi, q, k).0, q, mi)];
                let diag = |k: usize| sigma * self.weights(k).0 - lam;
                x[0] = Complex64::new(0.0, 0.0);
                if !transpose {
                    for k in 1..ns {
                        let (_, w1, w2) = self.weights(k);
                        let mut acc = rhs(k);
                        if k >= 2 {
                            acc -= sigma * w1 * x[k - 1];
                        }
                        if k >= 3 {
                            acc -= sigma * w2 * x[k - 2];
                        }
                        x[k] = acc / diag(k);
                    }
                } else {
                    for k in (1..ns).rev() {
                        let mut acc = rhs(k);
                        if k + 1 < ns {
                            acc -= sigma * self.weights(k + 1).1 * x[k + 1];
                        }
                        if k + 2 < ns {
                            acc -= sigma * self.weights(k + 2).2 * x[k + 2];
                        }
                        x[k] = acc / diag(k);
                    }
                }
                for k in 1..ns {
                    out[self.at(self.row(mi, q, k).0, q, mi)] = x[k];
                }
            }
        }
        out
    }

    /// `φ(s)(Γ_m - Γ_g z_m)` at one node, zero in the gauge slot.
    fn nonlinear(&self, u: &SpectralField, phi: f64, t: f64) -> Result<Vec<Complex64>> {
        if phi == 0.0 {
            return Ok(vec![Complex64::new(0.0, 0.0); self.m]);
        }
        let gam = gamma(self.model, u, t)?;
        let gg = gam.coeffs()[self.gi()];
        let mut out: Vec<Complex64> = gam
            .coeffs()
            .iter()
            .zip(u.coeffs())
            .map(|(a, z)| phi * (a - gg * z))
            .collect();
        out[self.gi()] = Complex64::new(0.0, 0.0);
        Ok(out)
    }

    fn lift_at(&self, z: &[Complex64], i: usize, j: usize) -> SpectralField {
        let o = self.at(i, j, 0);
        SpectralField::from_coeffs(z[o..o + self.m].to_vec()).expect("odd length")
    }

    fn nonlinear_all(&self, z: &[Complex64]) -> Result<Vec<Complex64>> {
        let mut out = vec![Complex64::new(0.0, 0.0); z.len()];
        for i in 0..self.grid.n_s {
            let phi = self.cutoff.value(self.grid.s(i));
            if phi == 0.0 {
                continue;
            }
            for j in 0..self.grid.n_t {
                let nl = self.nonlinear(&self.lift_at(z, i, j), phi, self.grid.t(j))?;
                let o = self.at(i, j, 0);
                out[o..o + self.m].copy_from_slice(&nl);
            }
        }
        Ok(out)
    }

    /// Residual in mode space from the mode-space chart `zhat`.
    fn residual(&self, zhat: &[Complex64]) -> Result<Vec<Complex64>> {
        let z = self.transform(zhat, true);
        let nl = self.transform(&self.nonlinear_all(&z)?, false);
        let mut r = self.linear(zhat);
        for (x, y) in r.iter_mut().zip(nl) {
            *x += y;
        }
        self.project(&mut r);
        Ok(r)
    }

    fn norm(&self, r: &[Complex64]) -> f64 {
        (nsq(r) * self.grid.h() / self.grid.n_t as f64).sqrt()
    }

    /// Real Jacobian blocks of the nonlinear term, one `2m × 2m` block per
    /// node, entries `[(2·row + re/im)·2m + 2·col + re/im]`.
    fn jacobian_blocks(&self, z: &[Complex64], step: f64) -> Result<Vec<Option<Vec<f64>>>> {
        let dim = 2 * self.m;
        let mut blocks = Vec::with_capacity(self.grid.n_s * self.grid.n_t);
        for i in 0..self.grid.n_s {
            let phi = self.cutoff.value(self.grid.s(i));
            for j in 0..self.grid.n_t {
                if phi == 0.0 {
                    blocks.push(None);
                    continue;
                }
                let t = self.grid.t(j);
                let u = self.lift_at(z, i, j);
                let base = self.nonlinear(&u, phi, t)?;
                let mut block = vec![0.0; dim * dim];
                for col in 0..self.m {
                    if col == self.gi() {
                        continue;
                    }
                    for part in 0..2 {
                        let mut up = u.clone();
                        up.coeffs_mut()[col] += if part == 0 {
                            Complex64::new(step, 0.0)
                        } else {
                            Complex64::new(0.0, step)
                        };
                        let val = self.nonlinear(&up, phi, t)?;
                        for row in 0..self.m {
                            let d = (val[row] - base[row]) / step;
                            block[(2 * row) * dim + 2 * col + part] = d.re;
                            block[(2 * row + 1) * dim + 2 * col + part] = d.im;
                        }
                    }
                }
                blocks.push(Some(block));
            }
        }
        Ok(blocks)
    }

    fn apply_blocks(&self, blocks: &[Option<Vec<f64>>], v: &[Complex64], transpose: bool) -> Vec<Complex64> {
        let dim = 2 * self.m;
        let mut out = vec![Complex64::new(0.0, 0.0); v.len()];
        let mut x = vec![0.0; dim];
        for (node, block) in blocks.iter().enumerate() {
            let Some(b) = block else { continue };
            let o = node * self.m;
            for (mi, c) in v[o..o + self.m].iter().enumerate() {
                x[2 * mi] = c.re;
                x[2 * mi + 1] = c.im;
            }
            for row in 0..dim {
                let mut acc = 0.0;
                for col in 0..dim {
                    let e = if transpose { b[col * dim + row] } else { b[row * dim + col] };
                    acc += e * x[col];
                }
                let c = &mut out[o + row / 2];
                if row % 2 == 0 {
                    c.re = acc;
                } else {
                    c.im = acc;
                }
            }
        }
        out
    }

    fn chart(&self, state: &FloerState) -> Result<Vec<Complex64>> {
        let mut out = Vec::with_capacity(self.grid.n_s * self.grid.n_t * self.m);
        for u in state.nodes() {
            out.extend_from_slice(chart_lift(u, self.g)?.coeffs());
        }
        Ok(out)
    }

    fn to_fields(&self, v: &[Complex64]) -> Vec<SpectralField> {
        v.chunks(self.m)
            .map(|c| SpectralField::from_coeffs(c.to_vec()).expect("odd length"))
            .collect()
    }
}

fn nsq(a: &[Complex64]) -> f64 {
    a.iter().map(|x| x.norm_sqr()).sum()
}

/// Chart residual of a state.
#[derive(Debug, Clone)]
pub struct ResidualReport {
    /// One field per node `(i, j)`, row-major, gauge coefficient zero. A
    /// `t`-mode contributes at every row except the end where it is pinned.
    pub field: Vec<SpectralField>,
    /// `sqrt(h/n_t · Σ|R|²)`
    pub norm: f64,
}

fn report(sys: &ChartSystem, rhat: &[Complex64]) -> ResidualReport {
    ResidualReport {
        norm: sys.norm(rhat),
        field: sys.to_fields(&sys.transform(rhat, true)),
    }
}

/// The pinned values are read from the state's own boundary rows.
pub fn floer_residual(model: &ModelSpec, state: &FloerState, cutoff: &CutoffProfile) -> Result<ResidualReport> {
    let sys = ChartSystem::new(model, state.grid, *cutoff, state.gauge)?;
    let zhat = sys.transform(&sys.chart(state)?, false);
    Ok(report(&sys, &sys.residual(&zhat)?))
}

/// Same residual with the `t`-derivative and nonlinear term evaluated in the
/// untransformed frame `u = φ⁰_{-t}w` through `∇G_t` and the chart
/// `z̃_m = e^{i(m²-g²)t} z_m`, then mapped back.
pub fn floer_residual_untransformed(model: &ModelSpec, state: &FloerState, cutoff: &CutoffProfile) -> Result<ResidualReport> {
    let grid = state.grid;
    let g = state.gauge;
    let sys = ChartSystem::new(model, grid, *cutoff, g)?;
    let w = sys.chart(state)?;
    let (nt, m) = (grid.n_t, sys.m);
    let mut dt = vec![Complex64::new(0.0, 0.0); w.len()];
    let mut col = vec![Complex64::new(0.0, 0.0); nt];
    for i in 0..grid.n_s {
        for mi in 0..m {
            for j in 0..nt {
                col[j] = w[sys.at(i, j, mi)];
            }
            sys.spectral.derivative(&mut col);
            for j in 0..nt {
                dt[sys.at(i, j, mi)] = col[j];
            }
        }
    }
    let mut part = vec![Complex64::new(0.0, 0.0); w.len()];
    for i in 0..grid.n_s {
        let phi = cutoff.value(grid.s(i));
        for j in 0..nt {
            let t = grid.t(j);
            let twist: Vec<Complex64> = (0..m)
                .map(|mi| {
                    let mm = sys.mode(mi);
                    Complex64::from_polar(1.0, ((mm * mm - g * g) as f64) * t)
                })
                .collect();
            let lift = SpectralField::from_coeffs((0..m).map(|mi| twist[mi] * w[sys.at(i, j, mi)]).collect())?;
            let gam = if phi != 0.0 {
                let r = lift.l2_norm();
                model.grad_g(&lift.scale_re(1.0 / r), t)?.scale_re(r)
            } else {
                SpectralField::zeros(grid.k)
            };
            let gg = gam.coeffs()[sys.gi()];
            for mi in 0..m {
                if mi == sys.gi() {
                    continue;
                }
                let mm = sys.mode(mi);
                let o = sys.at(i, j, mi);
                let dtt = twist[mi] * (dt[o] + Complex64::new(0.0, (mm * mm - g * g) as f64) * w[o]);
                let v = Complex64::i() * dtt + phi * (gam.coeffs()[mi] - gg * lift.coeffs()[mi]);
                part[o] = v / twist[mi];
            }
        }
    }
    // Add ∂_s alone: the free part minus its t-derivative and diagonal terms.
    let what = sys.transform(&w, false);
    let mut r = sys.linear(&what);
    for q in 0..nt {
        for mi in 0..m {
            let lam = sys.lambda(mi, q);
            for i in 0..grid.n_s {
                let o = sys.at(i, q, mi);
                r[o] += lam * what[o];
            }
        }
    }
    let part_hat = sys.transform(&part, false);
    for (x, y) in r.iter_mut().zip(part_hat) {
        *x += y;
    }
    sys.project(&mut r);
    Ok(report(&sys, &r))
}

/// `s`-derivative of row data by central differences, one-sided second
/// order at the ends.
fn s_derivative(rows: &[SpectralField], i: usize, n_s: usize, h: f64) -> SpectralField {
    let c = |a: f64| Complex64::new(a, 0.0);
    if i == 0 {
        rows[0]
            .scale_re(-3.0)
            .axpy(c(4.0), &rows[1])
            .and_then(|v| v.axpy(c(-1.0), &rows[2]))
            .expect("same bandwidth")
            .scale_re(0.5 / h)
    } else if i == n_s - 1 {
        rows[n_s - 1]
            .scale_re(3.0)
            .axpy(c(-4.0), &rows[n_s - 2])
            .and_then(|v| v.axpy(c(1.0), &rows[n_s - 3]))
            .expect("same bandwidth")
            .scale_re(0.5 / h)
    } else {
        rows[i + 1].sub(&rows[i - 1]).expect("same bandwidth").scale_re(0.5 / h)
    }
}

/// Per-node energy split: `|∂_s u|²` and `|∂_t u - φX^G(u)|²`, both measured
/// in the Fubini–Study metric at unit representatives of the untransformed
/// frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnergyDensity {
    pub n_s: usize,
    pub n_t: usize,
    pub ds_sq: Vec<f64>,
    pub dt_sq: Vec<f64>,
    /// `|∂_t u|²` without the Hamiltonian term.
    pub dt_raw_sq: Vec<f64>,
}

impl EnergyDensity {
    pub fn density(&self, i: usize, j: usize) -> f64 {
        let o = i * self.n_t + j;
        0.5 * (self.ds_sq[o] + self.dt_sq[o])
    }

    /// `∫ dt` of the density at row `i`.
    pub fn row_mean(&self, i: usize) -> f64 {
        (0..self.n_t).map(|j| self.density(i, j)).sum::<f64>() / self.n_t as f64
    }

    /// `∫₀¹ |∂_t u - φX^G(u)|² dt` at row `i`.
    pub fn slice_value(&self, i: usize) -> f64 {
        (0..self.n_t).map(|j| self.dt_sq[i * self.n_t + j]).sum::<f64>() / self.n_t as f64
    }

    /// Trapezoid rule in `s`, mean in `t`.
    pub fn integrate(&self, h: f64) -> f64 {
        (0..self.n_s)
            .map(|i| {
                let w = if i == 0 || i == self.n_s - 1 { 0.5 } else { 1.0 };
                w * self.row_mean(i)
            })
            .sum::<f64>()
            * h
    }
}

pub fn energy_density(model: &ModelSpec, state: &FloerState, cutoff: &CutoffProfile) -> Result<EnergyDensity> {
    let grid = state.grid;
    if model.bandwidth() != grid.k {
        return Err(Error::ShapeMismatch("model and grid bandwidths differ".into()));
    }
    let (ns, nt) = (grid.n_s, grid.n_t);
    let spectral = TimeSpectral::new(nt);
    let m = 2 * grid.k + 1;
    let mut ds_sq = vec![0.0; ns * nt];
    let mut dt_sq = vec![0.0; ns * nt];
    let mut dt_raw_sq = vec![0.0; ns * nt];
    let h = grid.h();
    let mut col = vec![Complex64::new(0.0, 0.0); nt];
    for j in 0..nt {
        let rows: Vec<SpectralField> = (0..ns).map(|i| state.untransformed(i, j)).collect();
        for i in 0..ns {
            let d = s_derivative(&rows, i, ns, h);
            ds_sq[i * nt + j] = horizontal(&d, &rows[i]).norm_sqr();
        }
    }
    for i in 0..ns {
        let phi = cutoff.value(grid.s(i));
        let mut dw = vec![SpectralField::zeros(grid.k); nt];
        for mi in 0..m {
            for j in 0..nt {
                col[j] = state.node(i, j).coeffs()[mi];
            }
            spectral.derivative(&mut col);
            for j in 0..nt {
                dw[j].coeffs_mut()[mi] = col[j];
            }
        }
        for j in 0..nt {
            let t = grid.t(j);
            let w = state.node(i, j);
            // ∂_t u = φ⁰_{-t}(∂_t w - i∇H⁰(w)), with ∇H⁰(w) = -n²w.
            let rot = dw[j].axpy(-Complex64::i(), &free_gradient(w))?;
            let du = crate::dynamics::free_flow(&rot, -t);
            let u = state.untransformed(i, j);
            dt_raw_sq[i * nt + j] = horizontal(&du, &u).norm_sqr();
            let mut v = du;
            if phi != 0.0 {
                let xg = model.grad_g(&u, t)?.scale(Complex64::i());
                v = v.axpy(Complex64::new(-phi, 0.0), &xg)?;
            }
            dt_sq[i * nt + j] = horizontal(&v, &u).norm_sqr();
        }
    }
    Ok(EnergyDensity {
        n_s: ns,
        n_t: nt,
        ds_sq,
        dt_sq,
        dt_raw_sq,
    })
}

/// Node fields with `order` spectral `t`-derivatives applied, transformed
/// frame.
pub fn t_derivatives(state: &FloerState, order: u32) -> Vec<SpectralField> {
    let grid = state.grid;
    let nt = grid.n_t;
    let spectral = TimeSpectral::new(nt);
    let mut out = state.nodes().to_vec();
    let mut col = vec![Complex64::new(0.0, 0.0); nt];
    for i in 0..grid.n_s {
        for mi in 0..2 * grid.k + 1 {
            for j in 0..nt {
                col[j] = out[i * nt + j].coeffs()[mi];
            }
            for _ in 0..order {
                spectral.derivative(&mut col);
            }
            for j in 0..nt {
                out[i * nt + j].coeffs_mut()[mi] = col[j];
            }
        }
    }
    out
}

/// `E = ∫∫ ½(|∂_s u|² + |∂_t u - φX^G(u)|²) dt ds` over the window.
pub fn floer_energy(model: &ModelSpec, state: &FloerState, cutoff: &CutoffProfile) -> Result<f64> {
    Ok(energy_density(model, state, cutoff)?.integrate(state.grid.h()))
}

fn state_from_modes(sys: &ChartSystem, zhat: &[Complex64], mode: i64) -> Result<FloerState> {
    FloerState::from_nodes(sys.grid, sys.cutoff, sys.g, mode, sys.to_fields(&sys.transform(zhat, true)))
}

/// Damped Gauss–Newton (Levenberg–Marquardt) solve of the chart equations.
/// Each `t`-mode takes its boundary value from `boundary` at the end it is
/// pinned to. The step is computed by CGLS on the system right-preconditioned
/// by the exact inverse of the free part.
pub fn solve_floer(
    model: &ModelSpec,
    grid: CylinderGrid,
    cutoff: CutoffProfile,
    boundary: &FloerBoundary,
    guess: Option<&FloerState>,
    cfg: &FloerConfig,
) -> Result<FloerSolution> {
    grid.check_cutoff(&cutoff)?;
    boundary.check(&grid)?;
    let sys = ChartSystem::new(model, grid, cutoff, boundary.gauge)?;
    let start = match guess {
        Some(s) => {
            if s.grid != grid || s.gauge != boundary.gauge {
                return Err(Error::ShapeMismatch("guess does not match grid or gauge".into()));
            }
            s.clone()
        }
        None => FloerState::interpolate(grid, cutoff, boundary)?,
    };
    let mut z = sys.chart(&start)?;
    let ends = [(0, &boundary.left), (grid.n_s - 1, &boundary.right)];
    for (i, orbit) in ends {
        for (j, u) in orbit.iter().enumerate() {
            let o = sys.at(i, j, 0);
            z[o..o + sys.m].copy_from_slice(chart_lift(u, boundary.gauge)?.coeffs());
        }
    }
    let mut zhat = sys.transform(&z, false);
    let mut r = sys.residual(&zhat)?;
    let mut rnorm = sys.norm(&r);
    let mut mu = cfg.initial_damping;
    let energy_of = |zhat: &[Complex64]| -> Result<f64> {
        floer_energy(model, &state_from_modes(&sys, zhat, boundary.mode)?, &cutoff)
    };
    let mut history = vec![HistoryRow {
        iteration: 0,
        residual_norm: rnorm,
        energy: energy_of(&zhat)?,
        damping: mu,
    }];
    let mut iterations = 0;
    let mut status = String::from("converged");
    while rnorm >= cfg.tol {
        if iterations >= cfg.max_iter {
            status = format!("iteration limit {} reached", cfg.max_iter);
            break;
        }
        iterations += 1;
        let blocks = sys.jacobian_blocks(&sys.transform(&zhat, true), cfg.fd_step)?;
        let mut accepted = false;
        while mu <= cfg.max_damping {
            let y = cgls(&sys, &blocks, &r, mu, cfg);
            let delta = sys.solve_linear(&y, false);
            let trial: Vec<Complex64> = zhat.iter().zip(&delta).map(|(a, b)| a + b).collect();
            let rt = sys.residual(&trial)?;
            let nt = sys.norm(&rt);
            if nt.is_finite() && nt < rnorm {
                zhat = trial;
                r = rt;
                rnorm = nt;
                mu = (mu / 3.0).max(1e-12);
                accepted = true;
                break;
            }
            mu *= 4.0;
        }
        history.push(HistoryRow {
            iteration: iterations,
            residual_norm: rnorm,
            energy: energy_of(&zhat)?,
            damping: mu,
        });
        if !accepted {
            status = "damping exhausted".into();
            break;
        }
    }
    let converged = rnorm < cfg.tol;
    let state = state_from_modes(&sys, &zhat, boundary.mode)?;
    let energy = history.last().map(|h| h.energy).unwrap_or(0.0);
    Ok(FloerSolution {
        state,
        converged,
        iterations,
        residual_norm: rnorm,
        energy,
        history,
        status,
    })
}

/// CGLS for `min ‖r + A y‖² + μ‖y‖²` with `A = (M + E)M⁻¹`, where `E` acts
/// node-wise in physical space.
fn cgls(sys: &ChartSystem, blocks: &[Option<Vec<f64>>], r: &[Complex64], mu: f64, cfg: &FloerConfig) -> Vec<Complex64> {
    let apply = |y: &[Complex64]| -> Vec<Complex64> {
        let x = sys.transform(&sys.solve_linear(y, false), true);
        let mut e = sys.transform(&sys.apply_blocks(blocks, &x, false), false);
        sys.project(&mut e);
        y.iter().zip(e).map(|(a, b)| a + b).collect()
    };
    let apply_t = |w: &[Complex64]| -> Vec<Complex64> {
        let x = sys.transform(w, true);
        let mut e = sys.transform(&sys.apply_blocks(blocks, &x, true), false);
        sys.project(&mut e);
        let s = sys.solve_linear(&e, true);
        w.iter().zip(s).map(|(a, b)| a + b).collect()
    };
    let sq = mu.sqrt();
    let n = r.len();
    let mut y = vec![Complex64::new(0.0, 0.0); n];
    let mut r1: Vec<Complex64> = r.iter().map(|x| -x).collect();
    let mut r2 = vec![Complex64::new(0.0, 0.0); n];
    let mut s = apply_t(&r1);
    let mut p = s.clone();
    let mut gamma = nsq(&s);
    let gamma0 = gamma;
    if gamma0 == 0.0 {
        return y;
    }
    for _ in 0..cfg.cg_max_iter {
        let q1 = apply(&p);
        let denom = nsq(&q1) + mu * nsq(&p);
        if denom == 0.0 {
            break;
        }
        let alpha = gamma / denom;
        for i in 0..n {
            y[i] += alpha * p[i];
            r1[i] -= alpha * q1[i];
            r2[i] -= alpha * sq * p[i];
        }
        let mut s_new = apply_t(&r1);
        for i in 0..n {
            s_new[i] += sq * r2[i];
        }
        let gamma_new = nsq(&s_new);
        if gamma_new.sqrt() <= cfg.cg_tol * gamma0.sqrt() {
            break;
        }
        let beta = gamma_new / gamma;
        gamma = gamma_new;
        s = s_new;
        for i in 0..n {
            p[i] = s[i] + beta * p[i];
        }
    }
    y
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Slice {
    pub gamma: usize,
    /// `-1` for the left end, `+1` for the right end.
    pub side: i8,
    /// Best node in the window, if the window meets the grid.
    pub s: Option<f64>,
    pub value: Option<f64>,
    pub threshold: f64,
    pub qualifies: bool,
    /// Fubini–Study distance at `t = 0` to the boundary orbit on this side.
    pub boundary_distance: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SliceReport {
    /// `(s_i, ∫₀¹|∂_t u - φX^G(u)|² dt)` for every row.
    pub profile: Vec<(f64, f64)>,
    pub slices: Vec<Slice>,
}

/// For `γ = 1..=gamma_max`, looks for `s` with `γ ≤ |s| ≤ 2γ` on each side
/// where `∫₀¹|∂_t u - φX^G(u)|² dt < π/γ`.
pub fn extract_slices(model: &ModelSpec, state: &FloerState, cutoff: &CutoffProfile, gamma_max: usize) -> Result<SliceReport> {
    let grid = state.grid;
    let dens = energy_density(model, state, cutoff)?;
    let profile: Vec<(f64, f64)> = (0..grid.n_s).map(|i| (grid.s(i), dens.slice_value(i))).collect();
    let mut slices = Vec::new();
    for gamma in 1..=gamma_max {
        let threshold = PI / gamma as f64;
        for side in [-1i8, 1] {
            let lo = gamma as f64;
            let hi = 2.0 * gamma as f64;
            let tol = 1e-9 * grid.s_half;
            let best = profile
                .iter()
                .enumerate()
                .filter(|(_, (s, _))| {
                    let a = side as f64 * s;
                    a >= lo - tol && a <= hi + tol
                })
                .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1));
            let (s, value, dist) = match best {
                Some((i, (s, v))) => {
                    let end = if side < 0 { 0 } else { grid.n_s - 1 };
                    let d = fs_distance_fields(state.node(i, 0), state.node(end, 0));
                    (Some(*s), Some(*v), Some(d))
                }
                None => (None, None, None),
            };
            slices.push(Slice {
                gamma,
                side,
                s,
                value,
                threshold,
                qualifies: value.is_some_and(|v| v < threshold),
                boundary_distance: dist,
            });
        }
    }
    Ok(SliceReport { profile, slices })
}

/// Writes the solver history as CSV: `iteration,residual_norm,energy,damping`.
pub fn write_history_csv<W: Write>(history: &[HistoryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in history {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_state(state: &FloerState, path: &Path) -> Result<()> {
    std::fs::write(path, state.to_json()?)?;
    Ok(())
}

pub fn load_state(path: &Path) -> Result<FloerState> {
    FloerState::from_json(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{continue_fixed_point, uniform_schedule, ContinuationConfig};
    use crate::model::{KernelSpec, Nonlinearity, Potential};

    fn potential_model(k: usize, eps: f64) -> ModelSpec {
        let nl = Nonlinearity::Potential {
            potential: Potential::cosine(vec![0.0, 1.0]),
        };
        ModelSpec::new(KernelSpec::exponential(1.0, k).unwrap(), nl, eps, k).unwrap()
    }

    fn free_boundary(k: usize, n: i64, n_t: usize) -> FloerBoundary {
        let orbit = free_orbit(k, n, n_t).unwrap();
        FloerBoundary {
            left: orbit.clone(),
            right: orbit,
            gauge: n,
            mode: n,
        }
    }

    fn switch_problem(k: usize, n_s: usize, n_t: usize) -> (ModelSpec, CylinderGrid, CutoffProfile, FloerBoundary) {
        let model = potential_model(k, 0.05);
        let cont = continue_fixed_point(&model, 0, &uniform_schedule(0.05, 4), &ContinuationConfig::default()).unwrap();
        assert!(cont.converged);
        let right = fixed_point_orbit(&model, &cont.endpoint().point, n_t, 2048).unwrap();
        let boundary = FloerBoundary {
            left: free_orbit(k, 0, n_t).unwrap(),
            right,
            gauge: 0,
            mode: 0,
        };
        let grid = CylinderGrid::new(4.0, n_s, n_t, k).unwrap();
        (model, grid, CutoffProfile::switch(1.0).unwrap(), boundary)
    }

    #[test]
    fn smoothstep_shape() {
        assert_eq!(smoothstep(-0.5), 0.0);
        assert_eq!(smoothstep(1.5), 1.0);
        assert!((smoothstep(0.5) - 0.5).abs() < 1e-15);
        assert!((smoothstep_slope(0.5) - 2.0).abs() < 1e-12);
        for i in 1..200 {
            let x = i as f64 / 200.0;
            let fd = (smoothstep(x + 1e-6) - smoothstep(x - 1e-6)) / 2e-6;
            assert!((fd - smoothstep_slope(x)).abs() < 1e-6);
            assert!(smoothstep_slope(x) <= 2.0 + 1e-12);
        }
    }

    #[test]
    fn cutoff_examples() {
        let c = build_cutoff(1.0).unwrap();
        assert_eq!(c.value(-2.0), 0.0);
        assert_eq!(c.value(0.5), 1.0);
        assert_eq!(c.value(2.0), 1.0);
        assert_eq!(c.value(3.5), 0.0);
        let zero = build_cutoff(0.0).unwrap();
        assert!((-40..40).all(|i| zero.value(i as f64 * 0.1) == 0.0));
        assert!(build_cutoff(-0.1).is_err());
        assert!(CutoffProfile::switch(0.5).is_err());
        let sw = CutoffProfile::switch(1.0).unwrap();
        assert_eq!(sw.value(100.0), 1.0);
        for c in [build_cutoff(0.3).unwrap(), c, sw] {
            for i in -300..600 {
                let s = i as f64 * 0.01;
                assert!((0.0..=1.0).contains(&c.value(s)));
                assert!(c.slope(s).abs() <= 2.0 + 1e-12);
            }
        }
    }

    #[test]
    fn grid_validation() {
        assert!(CylinderGrid::new(4.0, 15, 16, 2).is_err());
        assert!(CylinderGrid::new(4.0, 32, 4, 2).is_err());
        assert!(CylinderGrid::new(0.0, 32, 16, 2).is_err());
        let g = CylinderGrid::new(2.0, 32, 16, 2).unwrap();
        assert!(g.check_cutoff(&build_cutoff(1.0).unwrap()).is_err());
        assert!(g.check_cutoff(&build_cutoff(0.0).unwrap()).is_ok());
        assert!((g.s(g.n_s - 1) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn free_orbit_is_exact_solution() {
        let k = 3;
        let model = potential_model(k, 0.0);
        let grid = CylinderGrid::new(4.0, 32, 16, k).unwrap();
        let cutoff = build_cutoff(1.0).unwrap();
        let boundary = free_boundary(k, 1, 16);
        let sol = solve_floer(&model, grid, cutoff, &boundary, None, &FloerConfig::default()).unwrap();
        assert!(sol.converged);
        assert_eq!(sol.iterations, 0);
        assert!(sol.residual_norm < 1e-12);
        assert!(sol.energy.abs() < 1e-20);
    }

    #[test]
    fn hartree_constant_state_has_zero_residual() {
        let k = 3;
        let model = ModelSpec::new(KernelSpec::exponential(1.0, k).unwrap(), Nonlinearity::Hartree, 0.3, k).unwrap();
        let grid = CylinderGrid::new(4.0, 32, 16, k).unwrap();
        let cutoff = build_cutoff(1.0).unwrap();
        let state = FloerState::interpolate(grid, cutoff, &free_boundary(k, 2, 16)).unwrap();
        let r = floer_residual(&model, &state, &cutoff).unwrap();
        assert!(r.norm < 1e-13, "{}", r.norm);
        assert!(floer_energy(&model, &state, &cutoff).unwrap() < 1e-24);
    }

    #[test]
    fn linear_preconditioner_inverts_free_part() {
        let k = 2;
        let model = potential_model(k, 0.0);
        let grid = CylinderGrid::new(3.0, 18, 8, k).unwrap();
        let sys = ChartSystem::new(&model, grid, build_cutoff(1.0).unwrap(), 1).unwrap();
        let n = grid.n_s * grid.n_t * sys.m;
        let mut b: Vec<Complex64> = (0..n).map(|i| Complex64::new((i as f64 * 0.37).sin(), (i as f64 * 0.11).cos())).collect();
        sys.project(&mut b);
        let x = sys.solve_linear(&b, false);
        let back = sys.linear(&x);
        assert!(back.iter().zip(&b).all(|(a, e)| (a - e).norm() < 1e-10));
        let y: Vec<Complex64> = b.iter().rev().cloned().collect();
        let mut y = y;
        sys.project(&mut y);
        let lhs: Complex64 = sys.solve_linear(&b, false).iter().zip(&y).map(|(a, c)| a * c.conj()).sum();
        let rhs: Complex64 = b.iter().zip(sys.solve_linear(&y, true)).map(|(a, c)| a * c.conj()).sum();
        assert!((lhs - rhs).norm() < 1e-10 * lhs.norm().max(1.0));
    }

    #[test]
    fn switch_problem_converges() {
        let (model, grid, cutoff, boundary) = switch_problem(2, 48, 8);
        let sol = solve_floer(&model, grid, cutoff, &boundary, None, &FloerConfig::default()).unwrap();
        assert!(sol.converged, "{} {}", sol.status, sol.residual_norm);
        assert!(sol.history.windows(2).all(|w| w[1].residual_norm <= w[0].residual_norm));
        let un = floer_residual_untransformed(&model, &sol.state, &cutoff).unwrap();
        let tr = floer_residual(&model, &sol.state, &cutoff).unwrap();
        assert!((un.norm - tr.norm).abs() < 1e-12);

        // Perturbed state: both frames still agree.
        let mut nodes = sol.state.nodes().to_vec();
        for (idx, u) in nodes.iter_mut().enumerate() {
            u.coeffs_mut()[1] += Complex64::new(1e-3 * (idx as f64).sin(), 0.0);
        }
        let bent = FloerState::from_nodes(grid, cutoff, 0, 0, nodes).unwrap();
        let un = floer_residual_untransformed(&model, &bent, &cutoff).unwrap();
        let tr = floer_residual(&model, &bent, &cutoff).unwrap();
        assert!(tr.norm > 1e-4);
        assert!((un.norm - tr.norm).abs() < 1e-12 * tr.norm.max(1.0));

        // Energy against a chart-coordinate route in the transformed frame.
        let e = floer_energy(&model, &sol.state, &cutoff).unwrap();
        let chart = chart_energy(&model, &sol.state, &cutoff);
        assert!(e > 0.0);
        assert!((e - chart).abs() < 1e-2 * e, "{e} {chart}");
        let dens = energy_density(&model, &sol.state, &cutoff).unwrap();
        assert!((dens.integrate(grid.h()) - e).abs() < 1e-12);
    }

    fn chart_energy(model: &ModelSpec, state: &FloerState, cutoff: &CutoffProfile) -> f64 {
        let grid = state.grid;
        let g = state.gauge;
        let h = grid.h();
        let spectral = TimeSpectral::new(grid.n_t);
        let lift = |i: usize, j: usize| chart_lift(state.node(i, j), g).unwrap();
        let mut total = 0.0;
        for i in 0..grid.n_s {
            let mut dt = vec![SpectralField::zeros(grid.k); grid.n_t];
            for mi in 0..2 * grid.k + 1 {
                let mut col: Vec<Complex64> = (0..grid.n_t).map(|j| lift(i, j).coeffs()[mi]).collect();
                spectral.derivative(&mut col);
                for j in 0..grid.n_t {
                    dt[j].coeffs_mut()[mi] = col[j];
                }
            }
            let mut row = 0.0;
            for j in 0..grid.n_t {
                let u = lift(i, j);
                let col: Vec<SpectralField> = (0..grid.n_s).map(|ii| lift(ii, j)).collect();
                let a = s_derivative(&col, i, grid.n_s, h);
                let mut b = dt[j].scale(Complex64::i()).axpy(Complex64::new(1.0, 0.0), &free_gradient(&u)).unwrap();
                let phi = cutoff.value(grid.s(i));
                if phi != 0.0 {
                    b = b.axpy(Complex64::new(phi, 0.0), &gamma(model, &u, grid.t(j)).unwrap()).unwrap();
                }
                let r2 = u.norm_sqr();
                row += 0.5 * (horizontal(&a, &u).norm_sqr() + horizontal(&b, &u).norm_sqr()) / r2;
            }
            let w = if i == 0 || i == grid.n_s - 1 { 0.5 } else { 1.0 };
            total += w * row / grid.n_t as f64;
        }
        total * h
    }

    #[test]
    fn state_json_round_trip() {
        let k = 2;
        let grid = CylinderGrid::new(4.0, 16, 8, k).unwrap();
        let cutoff = build_cutoff(1.0).unwrap();
        let state = FloerState::interpolate(grid, cutoff, &free_boundary(k, 1, 8)).unwrap();
        let back = FloerState::from_json(&state.to_json().unwrap()).unwrap();
        assert_eq!(back, state);
    }

    #[test]
    fn history_csv_header() {
        let rows = [HistoryRow {
            iteration: 0,
            residual_norm: 1.0,
            energy: 0.5,
            damping: 1e-4,
        }];
        let mut buf = Vec::new();
        write_history_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("iteration,residual_norm,energy,damping\n"));
    }

    #[test]
    fn slices_of_constant_state() {
        let k = 2;
        let model = potential_model(k, 0.0);
        let grid = CylinderGrid::new(4.0, 33, 8, k).unwrap();
        let cutoff = build_cutoff(1.0).unwrap();
        let state = FloerState::interpolate(grid, cutoff, &free_boundary(k, 0, 8)).unwrap();
        let rep = extract_slices(&model, &state, &cutoff, 5).unwrap();
        assert_eq!(rep.slices.len(), 10);
        for s in &rep.slices {
            if s.gamma <= 4 {
                assert!(s.qualifies);
                assert!(s.boundary_distance.unwrap() < 1e-12);
            } else {
                assert!(s.s.is_none() && !s.qualifies);
            }
        }
    }
}
