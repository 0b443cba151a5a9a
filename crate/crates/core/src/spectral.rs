//! Fourier-side representation of fields on the circle `S¹ = ℝ/2πℤ`.
//!
//! Fields are stored by their coefficients `û(n)`, `|n| ≤ k`, under the
//! normalization `u(x) = (2π)^{-1/2} Σ û(n) e^{inx}`. With this convention the
//! L² norm of `u` equals the ℓ² norm of its coefficients, and convolution is the
//! coefficient-wise product.

use std::cell::RefCell;
use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// `(2π)^{-1/2}`
pub fn inv_sqrt_2pi() -> f64 {
    1.0 / (2.0 * PI).sqrt()
}

/// Complex Fourier coefficients `û(n)` for `n = -k..=k`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralField {
    k: usize,
    coeffs: Vec<Complex64>,
}

impl SpectralField {
    pub fn zeros(k: usize) -> Self {
        Self {
            k,
            coeffs: vec![ZERO; 2 * k + 1],
        }
    }

    /// The normalized single mode `(2π)^{-1/2} e^{inx}`, i.e. `û = δ_{·,n}`.
    pub fn single_mode(k: usize, n: i64) -> Result<Self> {
        let mut u = Self::zeros(k);
        if n.unsigned_abs() as usize > k {
            return Err(invalid(format!("mode {n} outside bandwidth {k}")));
        }
        u.set(n, Complex64::new(1.0, 0.0));
        Ok(u)
    }

    /// Builds a field from coefficients ordered `n = -k..=k`.
    pub fn from_coeffs(coeffs: Vec<Complex64>) -> Result<Self> {
        if coeffs.len() % 2 == 0 {
            return Err(Error::ShapeMismatch(format!(
                "expected an odd number of coefficients, got {}",
                coeffs.len()
            )));
        }
        if let Some(c) = coeffs.iter().find(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::NonFinite(format!("coefficient {c}")));
        }
        let k = coeffs.len() / 2;
        Ok(Self { k, coeffs })
    }

    /// Builds a field from a function of the mode index.
    pub fn from_fn(k: usize, mut f: impl FnMut(i64) -> Complex64) -> Self {
        let coeffs = modes(k).map(&mut f).collect();
        Self { k, coeffs }
    }

    pub fn bandwidth(&self) -> usize {
        self.k
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [Complex64] {
        &mut self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<Complex64> {
        self.coeffs
    }

    #[inline]
    pub fn index(&self, n: i64) -> usize {
        (n + self.k as i64) as usize
    }

    /// Coefficient `û(n)`; zero outside the stored band.
    #[inline]
    pub fn coeff(&self, n: i64) -> Complex64 {
        if n.unsigned_abs() as usize > self.k {
            ZERO
        } else {
            self.coeffs[self.index(n)]
        }
    }

    #[inline]
    pub fn set(&mut self, n: i64, value: Complex64) {
        let i = self.index(n);
        self.coeffs[i] = value;
    }

    /// `(n, û(n))` pairs in ascending `n`.
    pub fn iter_modes(&self) -> impl Iterator<Item = (i64, Complex64)> + '_ {
        modes(self.k).zip(self.coeffs.iter().copied())
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    pub fn norm_sqr(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm_sqr()).sum()
    }

    pub fn norm(&self, kind: NormKind) -> f64 {
        match kind {
            NormKind::L2 => self.l2_norm(),
            NormKind::Sobolev(delta) => self
                .iter_modes()
                .map(|(n, c)| c.norm_sqr() * (1.0 + (n * n) as f64).powf(delta))
                .sum::<f64>()
                .sqrt(),
            NormKind::Sup => {
                let n = 4 * (2 * self.k + 1);
                synthesize(self, n)
                    .expect("oversampled grid always resolves the band")
                    .values()
                    .iter()
                    .map(|v| v.norm())
                    .fold(0.0, f64::max)
            }
        }
    }

    /// Complex inner product `⟨u, v⟩ = Σ û(n) conj(v̂(n))` over the common band.
    pub fn inner(&self, other: &Self) -> Complex64 {
        let k = self.k.min(other.k) as i64;
        (-k..=k).map(|n| self.coeff(n) * other.coeff(n).conj()).sum()
    }

    /// Real inner product `Re⟨u, v⟩`.
    pub fn inner_re(&self, other: &Self) -> f64 {
        self.inner(other).re
    }

    pub fn scale(&self, a: Complex64) -> Self {
        Self {
            k: self.k,
            coeffs: self.coeffs.iter().map(|c| c * a).collect(),
        }
    }

    pub fn scale_re(&self, a: f64) -> Self {
        self.scale(Complex64::new(a, 0.0))
    }

    /// `self + a·other` over a common bandwidth.
    pub fn axpy(&self, a: Complex64, other: &Self) -> Result<Self> {
        if self.k != other.k {
            return Err(Error::ShapeMismatch(format!(
                "bandwidths {} and {}",
                self.k, other.k
            )));
        }
        Ok(Self {
            k: self.k,
            coeffs: self
                .coeffs
                .iter()
                .zip(&other.coeffs)
                .map(|(x, y)| x + a * y)
                .collect(),
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.axpy(Complex64::new(-1.0, 0.0), other)
    }

    /// Zero-pads (or truncates) to bandwidth `k`.
    pub fn with_bandwidth(&self, k: usize) -> Self {
        Self::from_fn(k, |n| self.coeff(n))
    }

    /// Unit-norm copy; `None` for the zero field.
    pub fn normalized(&self) -> Option<Self> {
        let norm = self.l2_norm();
        (norm > 0.0 && norm.is_finite()).then(|| self.scale_re(1.0 / norm))
    }
}

/// Mode indices `-k..=k`.
pub fn modes(k: usize) -> impl Iterator<Item = i64> + Clone {
    let k = k as i64;
    -k..=k
}

/// Norms available on spectral fields.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormKind {
    L2,
    /// `(Σ |û(n)|² (1+n²)^δ)^{1/2}`
    Sobolev(f64),
    /// Maximum modulus on a 4× oversampled grid.
    Sup,
}

/// Samples `u(x_j)`, `x_j = 2πj/N`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    values: Vec<Complex64>,
}

impl GridField {
    pub fn new(values: Vec<Complex64>) -> Self {
        Self { values }
    }

    pub fn from_real(values: &[f64]) -> Self {
        Self {
            values: values.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
        }
    }

    /// Samples `f(x_j)` on `n` equispaced nodes.
    pub fn from_fn(n: usize, mut f: impl FnMut(f64) -> Complex64) -> Self {
        Self {
            values: (0..n).map(|j| f(grid_point(j, n))).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Complex64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<Complex64> {
        self.values
    }

    /// `(2π/N) Σ |u(x_j)|²`
    pub fn quadrature_norm_sqr(&self) -> f64 {
        let n = self.values.len() as f64;
        2.0 * PI / n * self.values.iter().map(|v| v.norm_sqr()).sum::<f64>()
    }
}

#[inline]
pub fn grid_point(j: usize, n: usize) -> f64 {
    2.0 * PI * j as f64 / n as f64
}

fn check_capacity(k: usize, samples: usize) -> Result<()> {
    let needed = 2 * k + 1;
    if samples < needed {
        Err(Error::Aliasing { k, samples, needed })
    } else {
        Ok(())
    }
}

/// Coefficients `û(n) = √(2π)/N Σ_j u(x_j) e^{-inx_j}` for `|n| ≤ k`.
pub fn analyze(g: &GridField, k: usize) -> Result<SpectralField> {
    let n = g.len();
    check_capacity(k, n)?;
    let mut buf = g.values.clone();
    PLANNER.with(|p| p.borrow_mut().plan_fft_forward(n).process(&mut buf));
    let scale = (2.0 * PI).sqrt() / n as f64;
    Ok(SpectralField::from_fn(k, |m| {
        buf[m.rem_euclid(n as i64) as usize] * scale
    }))
}

/// Samples `u(x_j) = (2π)^{-1/2} Σ_n û(n) e^{inx_j}` on `samples` nodes.
pub fn synthesize(u: &SpectralField, samples: usize) -> Result<GridField> {
    check_capacity(u.k, samples)?;
    let mut buf = vec![ZERO; samples];
    for (m, c) in u.iter_modes() {
        buf[m.rem_euclid(samples as i64) as usize] = c;
    }
    PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(samples).process(&mut buf));
    let scale = inv_sqrt_2pi();
    buf.iter_mut().for_each(|v| *v *= scale);
    Ok(GridField { values: buf })
}

/// Coefficient-wise product `(u*ψ)^(n) = û(n) ψ̂(n)` on the smaller band.
pub fn convolve(u: &SpectralField, psi: &SpectralField) -> SpectralField {
    let k = u.k.min(psi.k);
    SpectralField::from_fn(k, |n| u.coeff(n) * psi.coeff(n))
}

/// Convolution with a real even kernel given by `ψ̂(|n|)`.
pub fn convolve_real(u: &SpectralField, psi_hat: &[f64]) -> SpectralField {
    SpectralField::from_fn(u.k, |n| {
        let w = psi_hat.get(n.unsigned_abs() as usize).copied().unwrap_or(0.0);
        u.coeff(n) * w
    })
}

/// Zeroes every coefficient with `|n| > ell`; the bandwidth is kept.
pub fn project(u: &SpectralField, ell: usize) -> SpectralField {
    SpectralField::from_fn(u.k, |n| {
        if n.unsigned_abs() as usize <= ell {
            u.coeff(n)
        } else {
            ZERO
        }
    })
}

#[derive(Serialize, Deserialize)]
struct FieldRepr {
    k: usize,
    coeffs: Vec<[f64; 2]>,
}

impl Serialize for SpectralField {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        FieldRepr {
            k: self.k,
            coeffs: self.coeffs.iter().map(|c| [c.re, c.im]).collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for SpectralField {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = FieldRepr::deserialize(d)?;
        if repr.coeffs.len() != 2 * repr.k + 1 {
            return Err(serde::de::Error::custom(format!(
                "k = {} requires {} coefficients, found {}",
                repr.k,
                2 * repr.k + 1,
                repr.coeffs.len()
            )));
        }
        SpectralField::from_coeffs(
            repr.coeffs
                .into_iter()
                .map(|[re, im]| Complex64::new(re, im))
                .collect(),
        )
        .map_err(serde::de::Error::custom)
    }
}
