//! Measurements on computed fields and Floer states: Sobolev-weighted tail
//! norms, derivative suprema and pairwise distances.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dynamics::{fs_distance, ProjectivePoint};
use crate::error::{invalid, Result};
use crate::floer::{energy_density, t_derivatives, EnergyDensity, FloerState};
use crate::model::ModelSpec;
use crate::spectral::SpectralField;

/// Weights `ℓ^δ` reported alongside each tail norm.
pub const DELTAS: [f64; 3] = [1.0, 2.0, 3.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayProfile {
    pub alpha: u32,
    pub ell_values: Vec<usize>,
    pub norms: Vec<f64>,
    /// `weighted[i][d] = norms[i]·ℓ_i^{DELTAS[d]}`
    pub weighted: Vec<Vec<f64>>,
}

impl DecayProfile {
    fn new(alpha: u32, ell_values: Vec<usize>, norms: Vec<f64>) -> Self {
        let weighted = ell_values
            .iter()
            .zip(&norms)
            .map(|(&l, &n)| DELTAS.iter().map(|d| n * (l as f64).powf(*d)).collect())
            .collect();
        Self {
            alpha,
            ell_values,
            norms,
            weighted,
        }
    }

    /// Whether `norm·ℓ^δ` strictly decreases along the tested `ℓ` for
    /// `DELTAS[d]`; entries that are exactly zero end the comparison.
    pub fn weighted_decreasing(&self, d: usize) -> bool {
        self.weighted
            .windows(2)
            .all(|w| w[0][d] == 0.0 && w[1][d] == 0.0 || w[1][d] < w[0][d])
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["ell".to_string(), "alpha".into(), "norm".into()];
        header.extend(DELTAS.iter().map(|d| format!("norm_times_ell_delta{d}")));
        w.write_record(&header)?;
        for (i, l) in self.ell_values.iter().enumerate() {
            let mut row = vec![l.to_string(), self.alpha.to_string(), format!("{:e}", self.norms[i])];
            row.extend(self.weighted[i].iter().map(|v| format!("{v:e}")));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `(Σ_{|n|>ℓ} |û(n)|² (1+n²)^α)^{1/2}`
pub fn tail_norm(u: &SpectralField, ell: usize, alpha: u32) -> f64 {
    u.iter_modes()
        .filter(|(n, _)| n.unsigned_abs() as usize > ell)
        .map(|(n, c)| c.norm_sqr() * (1.0 + (n * n) as f64).powi(alpha as i32))
        .sum::<f64>()
        .sqrt()
}

fn check_ells(ells: &[usize], k: usize, alpha: u32) -> Result<()> {
    if alpha > 2 {
        return Err(invalid(format!("derivative order {alpha} not in 0..=2")));
    }
    if ells.iter().any(|&l| l > k) {
        return Err(invalid(format!("ℓ range exceeds bandwidth {k}")));
    }
    if ells.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("ℓ values must be increasing"));
    }
    Ok(())
}

pub fn normal_profile(u: &SpectralField, ells: &[usize], alpha: u32) -> Result<DecayProfile> {
    check_ells(ells, u.bandwidth(), alpha)?;
    let norms = ells.iter().map(|&l| tail_norm(u, l, alpha)).collect();
    Ok(DecayProfile::new(alpha, ells.to_vec(), norms))
}

/// Supremum over nodes of the tail norms of `∂_t^α w`.
pub fn normal_profile_state(state: &FloerState, ells: &[usize], alpha: u32) -> Result<DecayProfile> {
    check_ells(ells, state.grid.k, alpha)?;
    let fields = t_derivatives(state, alpha);
    let norms = ells
        .iter()
        .map(|&l| fields.iter().map(|u| tail_norm(u, l, alpha)).fold(0.0, f64::max))
        .collect();
    Ok(DecayProfile::new(alpha, ells.to_vec(), norms))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradientMonitor {
    /// `max |∂_s u|` in the Fubini–Study metric.
    pub sup_ds: f64,
    /// `max |∂_t u|` in the Fubini–Study metric, untransformed frame.
    pub sup_dt: f64,
    pub energy: f64,
    pub density: EnergyDensity,
}

pub fn gradient_monitor(model: &ModelSpec, state: &FloerState) -> Result<GradientMonitor> {
    let density = energy_density(model, state, &state.cutoff)?;
    let sup = |v: &[f64]| v.iter().cloned().fold(0.0, f64::max).sqrt();
    Ok(GradientMonitor {
        sup_ds: sup(&density.ds_sq),
        sup_dt: sup(&density.dt_raw_sq),
        energy: density.integrate(state.grid.h()),
        density,
    })
}

impl GradientMonitor {
    /// Per-node energy density as CSV: `s_index,t_index,density`.
    pub fn write_density_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["s_index", "t_index", "density"])?;
        for i in 0..self.density.n_s {
            for j in 0..self.density.n_t {
                w.write_record([i.to_string(), j.to_string(), format!("{:e}", self.density.density(i, j))])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub const DEFAULT_DISTINCT_THRESHOLD: f64 = 1e-3;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistanceTable {
    pub matrix: Vec<Vec<f64>>,
    pub threshold: f64,
    /// Pairs `(i, j, d)` with `i < j` and `d < threshold`.
    pub flagged: Vec<(usize, usize, f64)>,
}

pub fn distinctness_report(points: &[ProjectivePoint], threshold: f64) -> Result<DistanceTable> {
    if points.len() < 2 {
        return Err(invalid("distinctness needs at least two points"));
    }
    let n = points.len();
    let mut matrix = vec![vec![0.0; n]; n];
    let mut flagged = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let d = fs_distance(&points[i], &points[j]);
            matrix[i][j] = d;
            matrix[j][i] = d;
            if d < threshold {
                flagged.push((i, j, d));
            }
        }
    }
    Ok(DistanceTable {
        matrix,
        threshold,
        flagged,
    })
}

impl DistanceTable {
    /// Square matrix with a leading index column.
    pub fn write_csv<W: Write>(&self, labels: &[String], out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec![String::from("point")];
        header.extend(labels.iter().cloned());
        w.write_record(&header)?;
        for (label, row) in labels.iter().zip(&self.matrix) {
            let mut rec = vec![label.clone()];
            rec.extend(row.iter().map(|d| format!("{d:e}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::floer::{free_orbit, CutoffProfile, CylinderGrid, FloerBoundary};
    use crate::model::{KernelSpec, Nonlinearity, Potential};
    use num_complex::Complex64;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn single_mode_tail() {
        let u = SpectralField::single_mode(6, 3).unwrap();
        let p = normal_profile(&u, &[0, 1, 2, 3, 4], 1).unwrap();
        assert!((p.norms[0] - 10f64.sqrt()).abs() < 1e-12);
        assert_eq!(&p.norms[3..], &[0.0, 0.0]);
        assert!(normal_profile(&u, &[7], 0).is_err());
        assert!(normal_profile(&u, &[2, 1], 0).is_err());
        assert!(normal_profile(&u, &[1], 3).is_err());
    }

    #[test]
    fn decreasing_weighted_profile() {
        let u = SpectralField::from_fn(12, |n| Complex64::new((-3.0 * n.abs() as f64).exp(), 0.0));
        let p = normal_profile(&u, &[1, 2, 3, 4, 5, 6, 7, 8], 0).unwrap();
        assert!((0..DELTAS.len()).all(|d| p.weighted_decreasing(d)));
        // ℓ³e^{-ℓ} still grows below ℓ = 3.
        let slow = SpectralField::from_fn(12, |n| Complex64::new((-(n.abs() as f64)).exp(), 0.0));
        assert!(!normal_profile(&slow, &[1, 2, 3], 0).unwrap().weighted_decreasing(2));
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("ell,alpha,norm,norm_times_ell_delta1,"));
        assert_eq!(text.lines().count(), 9);
    }

    #[test]
    fn orthogonal_modes_are_quarter_turn_apart() {
        let pts: Vec<_> = (0..3).map(|n| ProjectivePoint::single_mode(4, n).unwrap()).collect();
        let t = distinctness_report(&pts, DEFAULT_DISTINCT_THRESHOLD).unwrap();
        for i in 0..3 {
            assert_eq!(t.matrix[i][i], 0.0);
            for j in 0..3 {
                if i != j {
                    assert!((t.matrix[i][j] - FRAC_PI_2).abs() < 1e-12);
                }
            }
        }
        assert!(t.flagged.is_empty());
        assert!(distinctness_report(&pts[..1], 1e-3).is_err());
    }

    #[test]
    fn duplicate_is_flagged() {
        let p = ProjectivePoint::single_mode(3, 1).unwrap();
        let t = distinctness_report(&[p.clone(), p], 1e-3).unwrap();
        assert_eq!(t.flagged, vec![(0, 1, 0.0)]);
    }

    #[test]
    fn constant_state_monitor() {
        let k = 2;
        let model = ModelSpec::new(
            KernelSpec::exponential(1.0, k).unwrap(),
            Nonlinearity::Potential {
                potential: Potential::cosine(vec![0.0, 1.0]),
            },
            0.0,
            k,
        )
        .unwrap();
        let grid = CylinderGrid::new(4.0, 16, 8, k).unwrap();
        let orbit = free_orbit(k, 1, 8).unwrap();
        let b = FloerBoundary {
            left: orbit.clone(),
            right: orbit,
            gauge: 1,
            mode: 1,
        };
        let state = FloerState::interpolate(grid, CutoffProfile::bump(1.0).unwrap(), &b).unwrap();
        let mon = gradient_monitor(&model, &state).unwrap();
        assert!(mon.sup_ds < 1e-14);
        assert!(mon.sup_dt < 1e-12);
        let p = normal_profile_state(&state, &[1, 2], 0).unwrap();
        assert_eq!(p.norms, vec![0.0, 0.0]);
        let p = normal_profile_state(&state, &[0], 2).unwrap();
        assert!(p.norms[0] < 1e-10);
    }

    fn field(coeffs: Vec<(f64, f64)>) -> SpectralField {
        SpectralField::from_coeffs(coeffs.into_iter().map(|(a, b)| Complex64::new(a, b)).collect()).unwrap()
    }

    proptest! {
        #[test]
        fn tail_norm_non_increasing(c in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 9), alpha in 0u32..3) {
            let u = field(c);
            let p = normal_profile(&u, &[0, 1, 2, 3, 4], alpha).unwrap();
            prop_assert!(p.norms.windows(2).all(|w| w[1] <= w[0]));
        }

        #[test]
        fn table_symmetric_and_phase_invariant(
            a in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 7),
            b in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 7),
            theta in 0.0f64..std::f64::consts::TAU,
        ) {
            let (u, v) = (field(a), field(b));
            prop_assume!(u.l2_norm() > 1e-3 && v.l2_norm() > 1e-3);
            let pts = [ProjectivePoint::new(&u).unwrap(), ProjectivePoint::new(&v).unwrap()];
            let rot = [
                ProjectivePoint::new(&u.scale(Complex64::from_polar(1.0, theta))).unwrap(),
                ProjectivePoint::new(&v).unwrap(),
            ];
            let t = distinctness_report(&pts, 1e-3).unwrap();
            let r = distinctness_report(&rot, 1e-3).unwrap();
            prop_assert_eq!(t.matrix[0][1], t.matrix[1][0]);
            prop_assert!((t.matrix[0][1] - r.matrix[0][1]).abs() < 1e-12);
        }
    }
}
