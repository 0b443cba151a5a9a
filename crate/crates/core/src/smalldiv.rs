//! Small divisors `inf_p |2πp - (m² - n²)|`, record-minimum scans, continued
//! fractions and the decaying-solution bound for `w' = λw + f`.

use num_bigint::BigInt;
use num_integer::Integer;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

type Rational = num_rational::BigRational;

/// `2π = TWO_PI_HI + TWO_PI_LO` to about 32 significant digits.
const TWO_PI_HI: f64 = std::f64::consts::TAU;
const TWO_PI_LO: f64 = 2.4492935982947064e-16;

/// `1/(2π)` to 110 digits.
pub const INV_TWO_PI: &str = "0.15915494309189533576888376337251436203445964574045644874766734405889679763422653509011380276625308595607284273";

/// Golden ratio to 110 digits.
pub const GOLDEN_RATIO: &str = "1.6180339887498948482045868343656381177203091798057628621354486227052604628189024497072072041893911374847540881";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivisorRecord {
    pub m: i64,
    pub n: i64,
    pub p_star: i64,
    pub value: f64,
}

impl DivisorRecord {
    pub fn q(&self) -> i128 {
        let (m, n) = (self.m as i128, self.n as i128);
        m * m - n * n
    }
}

/// `|q - 2πp|` in double-double arithmetic.
fn distance_to_multiple(q: i128, p: i64) -> f64 {
    let pf = p as f64;
    let prod = pf * TWO_PI_HI;
    let err = pf.mul_add(TWO_PI_HI, -prod);
    // q is exact in f64 up to 2^53; beyond that split it.
    let q_hi = q as f64;
    let q_lo = (q - q_hi as i128) as f64;
    (((q_hi - prod) + q_lo) - err - pf * TWO_PI_LO).abs()
}

/// Nearest multiple of `2π` to `q = m² - n²` and its distance.
pub fn divisor(m: i64, n: i64) -> DivisorRecord {
    let (mi, ni) = (m as i128, n as i128);
    let q = mi * mi - ni * ni;
    let guess = (q as f64 / TWO_PI_HI).round() as i64;
    // The rounded quotient can be off by one when q/2π sits near a half-integer.
    let (p_star, value) = [guess - 1, guess, guess + 1]
        .into_iter()
        .map(|p| (p, distance_to_multiple(q, p)))
        .fold((guess, f64::INFINITY), |best, c| if c.1 < best.1 { c } else { best });
    DivisorRecord { m, n, p_star, value }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScanEntry {
    pub record: DivisorRecord,
    pub is_record: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScanReport {
    pub n: i64,
    pub m_max: i64,
    pub entries: Vec<ScanEntry>,
    /// Running minima in scan order.
    pub records: Vec<DivisorRecord>,
    /// `min_m value(m)·m¹⁴` over the scan.
    pub fitted_c: f64,
    /// Most negative log-log slope between consecutive record minima; `None`
    /// with a single record.
    pub worst_exponent: Option<f64>,
    /// `min log(value)/log(m)` over the records with `m ≥ 2`.
    pub worst_pointwise_exponent: f64,
}

/// Scans `m = |n|+1 ..= m_max`.
pub fn divisor_scan(m_max: i64, n: i64) -> Result<ScanReport> {
    let start = n.abs() + 1;
    if m_max < start {
        return Err(invalid(format!("m_max = {m_max} must exceed |n| = {}", n.abs())));
    }
    let mut entries = Vec::with_capacity((m_max - start + 1) as usize);
    let mut records = Vec::new();
    let mut best = f64::INFINITY;
    let mut fitted_c = f64::INFINITY;
    for m in start..=m_max {
        let rec = divisor(m, n);
        let is_record = rec.value < best;
        if is_record {
            best = rec.value;
            records.push(rec);
        }
        fitted_c = fitted_c.min(rec.value * (m as f64).powi(14));
        entries.push(ScanEntry { record: rec, is_record });
    }
    let worst_exponent = records
        .windows(2)
        .map(|w| (w[1].value.ln() - w[0].value.ln()) / ((w[1].m as f64).ln() - (w[0].m as f64).ln()))
        .reduce(f64::min);
    let worst_pointwise_exponent = records
        .iter()
        .filter(|r| r.m >= 2)
        .map(|r| r.value.ln() / (r.m as f64).ln())
        .fold(0.0, f64::min);
    Ok(ScanReport {
        n,
        m_max,
        entries,
        records,
        fitted_c,
        worst_exponent,
        worst_pointwise_exponent,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Convergent {
    #[serde(with = "decimal")]
    pub p: BigInt,
    #[serde(with = "decimal")]
    pub q: BigInt,
    /// `|x - p/q|`, with `x` the midpoint of the input interval.
    pub error: f64,
    /// `|x - p/q| < 1/q²` holds on the whole input interval.
    pub certified: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergentReport {
    #[serde(with = "decimal_vec")]
    pub partial_quotients: Vec<BigInt>,
    pub convergents: Vec<Convergent>,
    /// Fewer than the requested terms were emitted because the input
    /// precision could not decide the next partial quotient.
    pub truncated: bool,
}

mod decimal {
    use num_bigint::BigInt;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &BigInt, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(v)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BigInt, D::Error> {
        String::deserialize(d)?.parse().map_err(D::Error::custom)
    }
}

mod decimal_vec {
    use num_bigint::BigInt;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[BigInt], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|x| x.to_string()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<BigInt>, D::Error> {
        Vec::<String>::deserialize(d)?
            .iter()
            .map(|x| x.parse().map_err(D::Error::custom))
            .collect()
    }
}

/// Parses `"a/b"` exactly, or a decimal string as the interval of numbers that
/// round to it at the given number of digits.
fn parse_interval(x: &str) -> Result<(Rational, Rational)> {
    let x = x.trim();
    if let Some((a, b)) = x.split_once('/') {
        let a: BigInt = a.trim().parse().map_err(|_| invalid(format!("bad numerator in {x:?}")))?;
        let b: BigInt = b.trim().parse().map_err(|_| invalid(format!("bad denominator in {x:?}")))?;
        if b.is_zero() {
            return Err(invalid("zero denominator"));
        }
        let r = Rational::new(a, b);
        return Ok((r.clone(), r));
    }
    let (int, frac) = x.split_once('.').unwrap_or((x, ""));
    if int.is_empty() && frac.is_empty() {
        return Err(invalid("empty number"));
    }
    let digits = format!("{int}{frac}");
    if !digits.chars().all(|c| c.is_ascii_digit()) {
        return Err(invalid(format!("not a plain positive decimal: {x:?}")));
    }
    let num: BigInt = digits.parse().map_err(|_| invalid(format!("bad decimal {x:?}")))?;
    let den = num_traits::pow(BigInt::from(10), frac.len());
    let mid = Rational::new(num, den.clone());
    if frac.is_empty() {
        return Ok((mid.clone(), mid));
    }
    let half_ulp = Rational::new(BigInt::one(), den * 2);
    Ok((&mid - &half_ulp, &mid + &half_ulp))
}

fn rational_to_f64(r: &Rational) -> f64 {
    // Scale to keep precision for tiny differences.
    if r.is_zero() {
        return 0.0;
    }
    let shift = r.denom().bits() as i64 - r.numer().abs().bits() as i64;
    let scaled = if shift > 0 {
        r * Rational::from_integer(BigInt::one() << (shift as usize))
    } else {
        r.clone()
    };
    let v = scaled.numer().to_f64().unwrap_or(f64::NAN) / scaled.denom().to_f64().unwrap_or(f64::NAN);
    if shift > 0 {
        v * 2f64.powi(-(shift as i32))
    } else {
        v
    }
}

/// Continued-fraction convergents of `x > 0`, given as an exact fraction
/// `"a/b"` or a decimal string whose last digit bounds its precision.
pub fn convergents(x: &str, count: usize) -> Result<ConvergentReport> {
    if count == 0 {
        return Err(invalid("count must be at least 1"));
    }
    let (mut lo, mut hi) = parse_interval(x)?;
    if !lo.is_positive() {
        return Err(invalid("x must be positive"));
    }
    let (x_lo, x_hi) = (lo.clone(), hi.clone());
    let mid = (&x_lo + &x_hi) / Rational::from_integer(BigInt::from(2));
    let (mut p_prev, mut p) = (BigInt::zero(), BigInt::one());
    let (mut q_prev, mut q) = (BigInt::one(), BigInt::zero());
    let mut quotients = Vec::new();
    let mut out = Vec::new();
    let mut truncated = false;
    while out.len() < count {
        let a_lo = lo.floor().to_integer();
        let a_hi = hi.floor().to_integer();
        if a_lo != a_hi {
            truncated = true;
            break;
        }
        let a = a_lo;
        let p_next = &a * &p + &p_prev;
        let q_next = &a * &q + &q_prev;
        p_prev = std::mem::replace(&mut p, p_next);
        q_prev = std::mem::replace(&mut q, q_next);
        quotients.push(a.clone());
        let approx = Rational::new(p.clone(), q.clone());
        let bound = Rational::new(BigInt::one(), &q * &q);
        let certified = (&x_lo - &approx).abs() < bound && (&x_hi - &approx).abs() < bound;
        out.push(Convergent {
            p: p.clone(),
            q: q.clone(),
            error: rational_to_f64(&(&mid - &approx).abs()),
            certified,
        });
        let f_lo = &lo - Rational::from_integer(a.clone());
        let f_hi = &hi - Rational::from_integer(a);
        if f_lo.is_zero() || f_hi.is_zero() {
            if f_lo.is_zero() && f_hi.is_zero() {
                // Exact rational: the expansion terminates here.
                break;
            }
            if out.len() < count {
                truncated = true;
            }
            break;
        }
        lo = f_hi.recip();
        hi = f_lo.recip();
    }
    Ok(ConvergentReport {
        partial_quotients: quotients,
        convergents: out,
        truncated,
    })
}

/// Greatest common divisor of the convergent pair, always 1 for genuine
/// convergents.
pub fn convergent_gcd(c: &Convergent) -> BigInt {
    c.p.gcd(&c.q)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OdeBoundReport {
    pub lambda: f64,
    pub c: f64,
    pub sup_w: f64,
    /// `√2·c/|λ|`
    pub bound: f64,
    /// `c/|λ|`, the sharper bound for the decaying solution.
    pub tight_bound: f64,
    pub pass: bool,
    /// `(s, w(s))` on the integration grid.
    pub samples: Vec<(f64, f64)>,
}

/// Decaying solution of `w' = λw + f` for a forcing supported in `window`,
/// integrated by RK4 from the side where `w` vanishes: backward from the right
/// end when `λ > 0`, forward from the left end when `λ < 0`.
pub fn ode_bound_check(lambda: f64, c: f64, window: (f64, f64), forcing: impl Fn(f64) -> f64, nodes: usize) -> Result<OdeBoundReport> {
    if !(lambda.abs() >= 1e-12) || !lambda.is_finite() {
        return Err(invalid(format!("|λ| = {} is too small for a decaying solution", lambda.abs())));
    }
    if !(c > 0.0) {
        return Err(invalid("c must be positive"));
    }
    let (a, b) = window;
    if !(b > a) || nodes < 2 {
        return Err(invalid("window must be non-empty with at least two nodes"));
    }
    let h = (b - a) / (nodes - 1) as f64;
    let s = |i: usize| a + i as f64 * h;
    if (0..nodes).any(|i| forcing(s(i)).abs() > c) {
        return Err(invalid("forcing exceeds the bound c"));
    }
    let rhs = |t: f64, w: f64| lambda * w + forcing(t);
    let mut w = vec![0.0; nodes];
    let step = |t: f64, w: f64, h: f64| {
        let k1 = rhs(t, w);
        let k2 = rhs(t + h / 2.0, w + h / 2.0 * k1);
        let k3 = rhs(t + h / 2.0, w + h / 2.0 * k2);
        let k4 = rhs(t + h, w + h * k3);
        w + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    };
    if lambda > 0.0 {
        for i in (0..nodes - 1).rev() {
            w[i] = step(s(i + 1), w[i + 1], -h);
        }
    } else {
        for i in 1..nodes {
            w[i] = step(s(i - 1), w[i - 1], h);
        }
    }
    let sup_w = w.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let bound = std::f64::consts::SQRT_2 * c / lambda.abs();
    Ok(OdeBoundReport {
        lambda,
        c,
        sup_w,
        bound,
        tight_bound: c / lambda.abs(),
        pass: sup_w <= bound + 1e-10,
        samples: (0..nodes).map(|i| (s(i), w[i])).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn brute(m: i64, n: i64) -> f64 {
        let q = (m * m - n * n) as f64;
        let top = (q.abs() / (2.0 * PI)).ceil() as i64 + 1;
        (-top..=top).map(|p| (q - 2.0 * PI * p as f64).abs()).fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn divisor_examples() {
        let d = divisor(1, 1);
        assert_eq!((d.value, d.p_star), (0.0, 0));
        let d = divisor(5, 0);
        assert_eq!(d.p_star, 4);
        assert!((d.value - (25.0 - 8.0 * PI).abs()).abs() < 1e-15);
        assert!((d.value - 0.132741).abs() < 1e-6);
        let d = divisor(3, 1);
        assert_eq!(d.p_star, 1);
        assert!((d.value - 1.716815).abs() < 1e-6);
    }

    #[test]
    fn large_m_keeps_precision() {
        // Oracle: q - 2πp with 2π to 40 digits, evaluated in f64 after exact
        // integer subtraction of the leading part.
        let m = 123_456_789i64;
        let d = divisor(m, 0);
        let q = BigInt::from(m) * BigInt::from(m);
        let p = BigInt::from(d.p_star);
        // 2π·10^30 rounded to an integer.
        let two_pi_e30: BigInt = "6283185307179586476925286766559".parse().unwrap();
        let scaled = q * num_traits::pow(BigInt::from(10), 30) - p * two_pi_e30;
        let exact = (scaled.to_f64().unwrap() / 1e30).abs();
        assert!((d.value - exact).abs() < 1e-12, "{} vs {exact}", d.value);
    }

    #[test]
    fn scan_examples() {
        let r = divisor_scan(1, 0).unwrap();
        assert_eq!(r.records.len(), 1);
        assert!(r.worst_exponent.is_none());
        let r = divisor_scan(100, 0).unwrap();
        assert!(r.records.iter().any(|d| d.m == 5 && (d.value - 0.132741).abs() < 1e-6));
        assert!(divisor_scan(3, 3).is_err());
        let r = divisor_scan(2000, 0).unwrap();
        assert!(r.fitted_c > 0.0);
        // Records at m = 443 and m = 484 are close in m, giving a local slope near -17.
        let slope = r.worst_exponent.unwrap();
        assert!((slope + 17.01).abs() < 0.01, "{slope}");
        assert!(r.worst_pointwise_exponent >= -14.0);
        for e in &r.entries {
            let m = e.record.m as f64;
            assert!(e.record.value >= r.fitted_c * m.powi(-14));
        }
    }

    #[test]
    fn convergent_examples() {
        let r = convergents("3/7", 3).unwrap();
        let pq: Vec<(i64, i64)> = r.convergents.iter().map(|c| (c.p.to_i64().unwrap(), c.q.to_i64().unwrap())).collect();
        assert_eq!(pq, vec![(0, 1), (1, 2), (3, 7)]);
        assert!(!r.truncated);
        let r = convergents("3/7", 10).unwrap();
        assert_eq!(r.convergents.len(), 3);
        assert!(!r.truncated);

        let r = convergents(GOLDEN_RATIO, 40).unwrap();
        assert!(!r.truncated);
        assert!(r.partial_quotients.iter().all(|a| a.is_one()));
        let (mut f0, mut f1) = (BigInt::one(), BigInt::one());
        for c in &r.convergents {
            assert_eq!((&c.p, &c.q), (&f1, &f0));
            let f2 = &f0 + &f1;
            f0 = std::mem::replace(&mut f1, f2);
        }

        let r = convergents(INV_TWO_PI, 30).unwrap();
        assert_eq!((r.convergents[1].p.to_i64(), r.convergents[1].q.to_i64()), (Some(1), Some(6)));
        assert!(r.convergents.iter().all(|c| c.certified));
        for c in &r.convergents {
            assert!(convergent_gcd(c).is_one());
        }

        let r = convergents("0.1591", 20).unwrap();
        assert!(r.truncated);
        assert!(r.convergents.len() < 20);
        assert!(convergents("-1.5", 3).is_err());
    }

    #[test]
    fn ode_examples() {
        let r = ode_bound_check(2.0, 1.0, (0.0, 10.0), |_| 0.0, 1000).unwrap();
        assert!(r.pass && r.sup_w == 0.0);

        let r = ode_bound_check(2.0, 1.0, (0.0, 40.0 * PI), f64::cos, 20_000).unwrap();
        let interior = r
            .samples
            .iter()
            .filter(|(s, _)| *s > 10.0 * PI && *s < 30.0 * PI)
            .map(|(_, w)| w.abs())
            .fold(0.0, f64::max);
        assert!((interior - 5f64.sqrt() / 5.0).abs() < 1e-6, "{interior}");
        assert!(r.pass);

        let bump = |s: f64| if s.abs() < 1.0 { 0.9 * (1.0 - 1.0 / (1.0 - s * s)).exp() } else { 0.0 };
        let r = ode_bound_check(-1.0, 1.0, (-1.0, 1.0), bump, 10_000).unwrap();
        assert!(r.pass && r.sup_w <= 0.9);
        assert!(ode_bound_check(0.0, 1.0, (0.0, 1.0), |_| 0.0, 10).is_err());
        assert!(ode_bound_check(1.0, 0.5, (0.0, 1.0), |_| 0.9, 10).is_err());
    }

    proptest! {
        #[test]
        fn divisor_symmetries(m in -3000i64..3000, n in -3000i64..3000) {
            let d = divisor(m, n);
            prop_assert_eq!(d.value, divisor(-m, n).value);
            prop_assert_eq!(d.value, divisor(m, -n).value);
            prop_assert_eq!(d.value, divisor(n, m).value);
            prop_assert!(d.value <= PI);
            prop_assert_eq!(d.value == 0.0, m.abs() == n.abs());
            // The f64 brute force loses about one ulp of 2πp.
            let q = (m * m - n * n).abs() as f64;
            prop_assert!((d.value - brute(m, n)).abs() < 1e-12 + 4.0 * f64::EPSILON * q);
        }
    }
}
