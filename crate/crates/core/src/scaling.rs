//! Model sums `q₁…q₄`, the benchmark scale `I_{L,a}`, its regimes, schedules
//! along which it diverges or stays bounded, and log-log slope fits.
//!
//! All four sums are written over `m = u + t` (or `m = t − u` for `q₃`) with a
//! combinatorial weight times the slab sum `S(m) = Σ_z (m² + |z|²)^{-s/2}`.

use std::f64::consts::PI;
use std::fmt;

use statrs::function::gamma::gamma;

use crate::error::{invalid, Result};
use crate::model::TailCertificate;
use crate::par;
use crate::special::{for_each_norm_class, hurwitz_zeta, slab_asymptotic_coefficient, slab_sum};

/// Explicit m-range used before switching to the asymptotic slab form.
const ASYMPTOTIC_START: u64 = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Regime {
    /// `d < s < d+1`
    Sub,
    /// `s = d+1`
    Crit1,
    /// `d+1 < s < d+2`
    Mid,
    /// `s = d+2`
    Top,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Sub => "SUB",
            Regime::Crit1 => "CRIT1",
            Regime::Mid => "MID",
            Regime::Top => "TOP",
        })
    }
}

fn same(x: f64, y: f64) -> bool {
    (x - y).abs() <= 1e-12 * y.abs().max(1.0)
}

pub fn classify_regime(d: usize, s: f64) -> Result<Regime> {
    let d = d as f64;
    if d < 1.0 || !(s > d) || (s > d + 2.0 && !same(s, d + 2.0)) {
        return Err(invalid(format!("s = {s} outside (d, d+2] for d = {d}")));
    }
    Ok(if same(s, d + 1.0) {
        Regime::Crit1
    } else if same(s, d + 2.0) {
        Regime::Top
    } else if s < d + 1.0 {
        Regime::Sub
    } else {
        Regime::Mid
    })
}

/// `I_{L,a} = L^{d−1} × {L^{d+1−s}, ln(L/a), a^{d+1−s}, a^{−1} ln a}`.
pub fn benchmark_scale(d: usize, s: f64, l: u64, a: u64) -> Result<f64> {
    let regime = classify_regime(d, s)?;
    if !(a >= 2 && l > a) {
        return Err(invalid(format!("benchmark scale needs L > a ≥ 2, got L = {l}, a = {a}")));
    }
    let (lf, af, df) = (l as f64, a as f64, d as f64);
    let branch = match regime {
        Regime::Sub => lf.powf(df + 1.0 - s),
        Regime::Crit1 => (lf / af).ln(),
        Regime::Mid => af.powf(df + 1.0 - s),
        Regime::Top => af.ln() / af,
    };
    Ok(lf.powi(d as i32 - 1) * branch)
}

/// Transverse extent of the slab: `R_N` for finite `N`, `Z^{d−1}∖{0}` otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlabExtent {
    Finite(u64),
    Infinite,
}

/// Slab sums for one `(d, s)`. In `d = 1` every variant is the single
/// z-free term `m^{-s}`.
struct Slab {
    d: usize,
    s: f64,
    /// `(|z|², multiplicity)` over `R_N`, for finite extents.
    classes: Option<Vec<(f64, f64)>>,
    count: f64,
}

impl Slab {
    fn new(d: usize, s: f64, extent: SlabExtent) -> Self {
        let classes = match extent {
            SlabExtent::Finite(n) if d >= 2 => {
                let mut v = Vec::new();
                let radius = (n / 2) as i64;
                if radius > 0 {
                    for_each_norm_class(d - 1, radius, |r2, mult| v.push((r2 as f64, mult)));
                }
                Some(v)
            }
            _ => None,
        };
        let count = classes.as_ref().map_or(0.0, |c| c.iter().map(|&(_, m)| m).sum());
        Slab { d, s, classes, count }
    }

    /// `Σ_{z ∈ Z^{d−1}}` including `z = 0`.
    fn full(&self, m: u64) -> f64 {
        if self.d == 1 {
            (m as f64).powf(-self.s)
        } else {
            slab_sum(self.d - 1, self.s, m as f64)
        }
    }

    /// `Σ_{z ∈ R_N}`.
    fn restricted(&self, m: u64) -> f64 {
        let mf = m as f64;
        if self.d == 1 {
            return mf.powf(-self.s);
        }
        match &self.classes {
            Some(classes) => {
                let m2 = mf * mf;
                classes.iter().map(|&(r2, mult)| mult * (m2 + r2).powf(-0.5 * self.s)).sum()
            }
            None => slab_sum(self.d - 1, self.s, mf) - mf.powf(-self.s),
        }
    }

    /// `Σ_{m > m0}` of [`Slab::full`] (or of the `z ≠ 0` part) for the
    /// infinite slab, with a bound on what the asymptotic form misses.
    fn infinite_tail(&self, m0: u64, exclude_origin: bool) -> (f64, f64) {
        let q = m0 as f64 + 1.0;
        if self.d == 1 {
            return if exclude_origin { (0.0, 0.0) } else { (hurwitz_zeta(self.s, q), 0.0) };
        }
        let k = (self.d - 1) as f64;
        let c = slab_asymptotic_coefficient(self.d - 1, self.s);
        let mut value = c * hurwitz_zeta(self.s - k, q);
        if exclude_origin {
            value -= hurwitz_zeta(self.s, q);
        }
        // Poisson dual modes: each below π^{s/2}/Γ(s/2) e^{−2πm|ξ|}/ν
        let nu = 0.5 * (self.s - k);
        let per_mode = PI.powf(0.5 * self.s) / gamma(0.5 * self.s) / nu;
        let modes = 4.0 * k * 3f64.powf(k);
        let remainder = per_mode * modes * (-2.0 * PI * q).exp() / (1.0 - (-2.0 * PI).exp());
        (value, remainder)
    }
}

/// `q₁, q₂,N, q₃,N, q₄` with certificates for the two infinite m-sums.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelSums {
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
    pub q4: f64,
    pub q2_tail: TailCertificate,
    pub q4_tail: TailCertificate,
}

fn check_sum_args(d: usize, s: f64, l: u64, a: u64) -> Result<()> {
    if d == 0 || !(s > d as f64) {
        return Err(invalid(format!("model sums need s > d, got d = {d}, s = {s}")));
    }
    if !(a >= 1 && l > a) {
        return Err(invalid(format!("model sums need L > a ≥ 1, got L = {l}, a = {a}")));
    }
    Ok(())
}

/// `q₁ = Σ_{m=1}^{L+a} w₁(m) S(m)`, `w₁(m) = Σ_{t ≤ min(a,m), m−t ≤ L} (t/a)²`.
fn q1(slab: &Slab, l: u64, a: u64) -> f64 {
    let af = a as f64;
    let terms: Vec<f64> = (1..=l + a)
        .map(|m| {
            let lo = m.saturating_sub(l).max(1);
            let hi = a.min(m);
            let w: f64 = (lo..=hi).map(|t| (t as f64 / af).powi(2)).sum();
            w * slab.full(m)
        })
        .collect();
    crate::summation::pairwise_sum(&terms)
}

/// `q₃,N = Σ_{m=1}^{a} (a+1−m)(m/a)² S_N(m)`.
fn q3(slab: &Slab, a: u64) -> f64 {
    let af = a as f64;
    let terms: Vec<f64> = (1..=a).map(|m| (a + 1 - m) as f64 * (m as f64 / af).powi(2) * slab.restricted(m)).collect();
    crate::summation::pairwise_sum(&terms)
}

/// `q₄ = Σ_{m ≥ 1} w₄(m) S(m)`, `w₄(m) = Σ_{u=1}^{min(a,m)} (u/a)²`.
fn q4(slab: &Slab, a: u64) -> (f64, TailCertificate) {
    let af = a as f64;
    let m0 = a.max(ASYMPTOTIC_START);
    let mut w = 0.0;
    let mut terms = Vec::with_capacity(m0 as usize);
    for m in 1..=m0 {
        if m <= a {
            w += (m as f64 / af).powi(2);
        }
        terms.push(w * slab.full(m));
    }
    let (tail, remainder) = slab.infinite_tail(m0, false);
    let value = crate::summation::pairwise_sum(&terms) + w * tail;
    (value, TailCertificate { r_cut: Some(m0), partial_sum: value, tail_bound: w * remainder })
}

/// `q₂,N = Σ_{m > a} min(L+1, m−a) S_N(m)`.
fn q2(slab: &Slab, l: u64, a: u64, extent: SlabExtent) -> (f64, TailCertificate) {
    let weight = |m: u64| (l + 1).min(m - a) as f64;
    let lf = (l + 1) as f64;
    match extent {
        SlabExtent::Infinite => {
            let m0 = (l + a).max(ASYMPTOTIC_START);
            let terms: Vec<f64> = (a + 1..=m0).map(|m| weight(m) * slab.restricted(m)).collect();
            let (tail, remainder) = if slab.d == 1 { (hurwitz_zeta(slab.s, m0 as f64 + 1.0), 0.0) } else { slab.infinite_tail(m0, true) };
            let value = crate::summation::pairwise_sum(&terms) + lf * tail;
            (value, TailCertificate { r_cut: Some(m0), partial_sum: value, tail_bound: lf * remainder })
        }
        SlabExtent::Finite(_) => {
            if slab.d == 1 {
                let m0 = (l + a).max(ASYMPTOTIC_START);
                let terms: Vec<f64> = (a + 1..=m0).map(|m| weight(m) * slab.restricted(m)).collect();
                let value = crate::summation::pairwise_sum(&terms) + lf * hurwitz_zeta(slab.s, m0 as f64 + 1.0);
                return (value, TailCertificate { r_cut: Some(m0), partial_sum: value, tail_bound: 0.0 });
            }
            let m0 = (l + a).max(64 * l);
            let terms: Vec<f64> = (a + 1..=m0).map(|m| weight(m) * slab.restricted(m)).collect();
            let value = crate::summation::pairwise_sum(&terms);
            // each z ∈ R_N contributes at most m^{-s}; R_N ⊂ Z^{d−1}∖{0}
            let q = m0 as f64 + 1.0;
            let by_count = slab.count * hurwitz_zeta(slab.s, q);
            let (inf_tail, remainder) = slab.infinite_tail(m0, true);
            let bound = lf * by_count.min(inf_tail + remainder);
            (value, TailCertificate { r_cut: Some(m0), partial_sum: value, tail_bound: bound })
        }
    }
}

pub fn model_sums(d: usize, s: f64, l: u64, a: u64, extent: SlabExtent) -> Result<ModelSums> {
    check_sum_args(d, s, l, a)?;
    let restricted = Slab::new(d, s, extent);
    let full = Slab::new(d, s, SlabExtent::Infinite);
    let (q2, q2_tail) = q2(&restricted, l, a, extent);
    let (q4, q4_tail) = q4(&full, a);
    Ok(ModelSums { q1: q1(&full, l, a), q2, q3: q3(&restricted, a), q4, q2_tail, q4_tail })
}

/// `S_N(m) / m^{d−1−s}`; in `d = 1` the ratio of the z-free term, i.e. 1.
pub fn lattice_sum_ratio(m: u64, d: usize, s: f64, extent: SlabExtent) -> Result<f64> {
    if d == 0 || !(s > d as f64) || m == 0 {
        return Err(invalid(format!("lattice sum ratio needs m ≥ 1 and s > d, got m = {m}, d = {d}, s = {s}")));
    }
    if let SlabExtent::Finite(n) = extent {
        if m > 2 * n {
            return Err(invalid(format!("m = {m} exceeds 2N = {}", 2 * n)));
        }
    }
    let slab = Slab::new(d, s, extent);
    let mf = m as f64;
    Ok(slab.restricted(m) / mf.powf(d as f64 - 1.0 - s))
}

/// One grid point of the scaling study.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalingPoint {
    pub d: usize,
    pub s: f64,
    pub l: u64,
    pub a: u64,
    pub finite: ModelSums,
    pub infinite: ModelSums,
    pub i_value: f64,
    pub regime: Regime,
}

impl ScalingPoint {
    pub fn compute(d: usize, s: f64, l: u64, a: u64) -> Result<Self> {
        let regime = classify_regime(d, s)?;
        let i_value = benchmark_scale(d, s, l, a)?;
        Ok(ScalingPoint {
            d,
            s,
            l,
            a,
            finite: model_sums(d, s, l, a, SlabExtent::Finite(l))?,
            infinite: model_sums(d, s, l, a, SlabExtent::Infinite)?,
            i_value,
            regime,
        })
    }

    pub fn csv_header() -> Vec<&'static str> {
        vec![
            "d", "s", "L", "a", "regime", "I", "q1", "q2_L", "q2_inf", "q3_L", "q3_inf", "q4", "q2_L_tail", "q2_inf_tail", "q4_tail",
        ]
    }

    pub fn csv_row(&self) -> Vec<String> {
        let mut row = vec![self.d.to_string(), self.s.to_string(), self.l.to_string(), self.a.to_string(), self.regime.to_string()];
        row.extend(
            [
                self.i_value,
                self.infinite.q1,
                self.finite.q2,
                self.infinite.q2,
                self.finite.q3,
                self.infinite.q3,
                self.infinite.q4,
                self.finite.q2_tail.tail_bound,
                self.infinite.q2_tail.tail_bound,
                self.infinite.q4_tail.tail_bound,
            ]
            .iter()
            .map(f64::to_string),
        );
        row
    }
}

/// Evaluates every `(L, a)` of a grid, in order.
pub fn scaling_grid(d: usize, s: f64, points: &[(u64, u64)]) -> Result<Vec<ScalingPoint>> {
    par::map(points, |&(l, a)| ScalingPoint::compute(d, s, l, a)).into_iter().collect()
}

/// A sequence of `(L_k, a_k)` with the benchmark scale along it.
#[derive(Clone, Debug, PartialEq)]
pub struct DivergenceSchedule {
    pub d: usize,
    pub s: f64,
    pub points: Vec<(u64, u64)>,
    pub i_values: Vec<f64>,
}

impl DivergenceSchedule {
    fn build(d: usize, s: f64, points: Vec<(u64, u64)>) -> Result<Self> {
        let i_values = points.iter().map(|&(l, a)| benchmark_scale(d, s, l, a)).collect::<Result<_>>()?;
        Ok(DivergenceSchedule { d, s, points, i_values })
    }

    pub fn is_increasing(&self) -> bool {
        self.i_values.windows(2).all(|w| w[1] > w[0])
    }
}

/// Dyadic schedule with `L/a → ∞` and `I → ∞`, for `d ≥ 2, s ∈ (d, d+2]`
/// and `d = 1, s ∈ (1, 2]`.
pub fn divergence_schedule(d: usize, s: f64, count: usize) -> Result<DivergenceSchedule> {
    let regime = classify_regime(d, s)?;
    let l_exponent = match (d, regime) {
        (_, Regime::Sub | Regime::Crit1) => 2,
        (1, _) => return Err(invalid(format!("no divergent schedule for d = 1, s = {s}: I = a^{{2−s}} or a^{{−1}} ln a stays bounded"))),
        _ => 3,
    };
    if count == 0 || l_exponent * count > 62 {
        return Err(invalid(format!("schedule length {count} out of range")));
    }
    let points = (1..=count as u32).map(|k| (1u64 << (l_exponent as u32 * k), 1u64 << k)).collect();
    let schedule = DivergenceSchedule::build(d, s, points)?;
    if !schedule.is_increasing() {
        return Err(invalid("benchmark scale is not increasing along the schedule"));
    }
    Ok(schedule)
}

/// Schedule with `1 ≪ a_L ≪ L` along which `I` stays bounded, if one exists.
///
/// `d = 1, s = 2` uses `a = L/16` (`I = ln 16`), `d = 1, s ∈ (2, 3]` uses
/// `a = ⌊√L⌋`. At `d = 2, s = 4`, `I = L a^{−1} ln a ≥ ln a` whenever
/// `a < L`, so no bounded schedule exists and `None` is returned.
pub fn bounded_scale_schedule(d: usize, s: f64) -> Option<DivergenceSchedule> {
    let regime = classify_regime(d, s).ok()?;
    if d != 1 || regime == Regime::Sub {
        return None;
    }
    let points = (8..=20u32)
        .map(|k| {
            let l = 1u64 << k;
            let a = if regime == Regime::Crit1 { l / 16 } else { (l as f64).sqrt().floor() as u64 };
            (l, a)
        })
        .collect();
    DivergenceSchedule::build(d, s, points).ok()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root mean square of the residuals in log space.
    pub residual: f64,
}

/// Ordinary least squares of `ln value` on `ln scale`.
pub fn fit_loglog_slope(points: &[(f64, f64)]) -> Result<LogLogFit> {
    if points.len() < 3 {
        return Err(invalid("slope fit needs at least three points"));
    }
    if points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return Err(invalid("slope fit needs positive scales and values"));
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(invalid("slope fit needs at least two distinct scales"));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    Ok(LogLogFit { slope, intercept, residual: (ss / n).sqrt() })
}
