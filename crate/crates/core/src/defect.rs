//! The energy defect `Δ_{L,a}`, its uniform bound `U_{L,a}`, the `Q⁺`/`Q⁻`
//! decomposition into pair classes, the effective kernel `K̃` and the block
//! smoothing comparison.
//!
//! Lattice sums over pairs are written as
//! `Σ_{x≠y} K_{xy} [A_x + A_y − 2 Σ_j B_{j,x} B_{j,y}]` with `A`, `B`
//! supported in `Λ_L`. On all of `Z^d` the `A` part is `2 Z_d(s) Σ A`, and
//! the `B` part is a finite correlation evaluated by FFT.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;

use crate::error::{invalid, Error, Result};
use crate::fft::{Correlator, GridFft, KernelSpectrum};
use crate::lattice::{linf, LatticeBox, Region};
use crate::model::{dot, hamiltonian, power_tail_bound, DisplacementTable, LongRangeKernel, ModelSpec, Support, TailCertificate};
use crate::spin::{apply_inhomogeneous_rotation, Branch, DeformationProfile, SpinConfig};
use crate::summation::PairwiseSum;

/// `Δ_xy = 4 sin²((θ_x − θ_y)/2) (σ_x · P₁₂ σ_y)`.
pub fn pair_defect(sigma_x: &[f64], sigma_y: &[f64], theta_x: f64, theta_y: f64) -> f64 {
    let half = 0.5 * (theta_x - theta_y);
    4.0 * half.sin().powi(2) * (sigma_x[0] * sigma_y[0] + sigma_x[1] * sigma_y[1])
}

/// `2σ_x·σ_y − (R⁺σ)_x·(R⁺σ)_y − (R⁻σ)_x·(R⁻σ)_y`.
pub fn pair_defect_three_term(sigma_x: &[f64], sigma_y: &[f64], theta_x: f64, theta_y: f64) -> f64 {
    use crate::spin::RotationFamily;
    let n = sigma_x.len();
    let rot = |v: &[f64], t: f64| RotationFamily::new(n, t).apply(v);
    2.0 * dot(sigma_x, sigma_y)
        - dot(&rot(sigma_x, theta_x), &rot(sigma_y, theta_y))
        - dot(&rot(sigma_x, -theta_x), &rot(sigma_y, -theta_y))
}

/// `K̃_{xy} = 4 sin²((θ_x − θ_y)/2) K₀(y − x)`.
pub fn ktilde(kernel: &LongRangeKernel, theta_x: f64, theta_y: f64, displacement: &[i64]) -> Result<f64> {
    if displacement.iter().all(|&c| c == 0) {
        return Err(invalid("ktilde needs a nonzero displacement"));
    }
    Ok(4.0 * (0.5 * (theta_x - theta_y)).sin().powi(2) * kernel.k0(displacement))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PairClass {
    P1,
    P2,
    P3,
    P4,
    Null,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Zone {
    Interior,
    Annulus,
    Exterior,
}

fn zone(profile: &DeformationProfile, k: u64) -> Zone {
    if k + profile.a <= profile.l {
        Zone::Interior
    } else if k <= profile.l {
        Zone::Annulus
    } else {
        Zone::Exterior
    }
}

/// Class of the unordered pair `{x, y}`, oriented so that it matches one of
/// `P₁…P₄` when possible. `Q_i⁻` counts each such pair once with
/// `K_{xy} + K_{yx}`.
pub fn classify_pair(profile: &DeformationProfile, x: &[i64], y: &[i64]) -> PairClass {
    let (kx, ky) = (linf(x), linf(y));
    let (zx, zy) = (zone(profile, kx), zone(profile, ky));
    use Zone::*;
    match (zx, zy) {
        (Interior, Annulus) | (Annulus, Interior) => PairClass::P1,
        (Interior, Exterior) | (Exterior, Interior) => PairClass::P2,
        (Annulus, Annulus) if kx != ky => PairClass::P3,
        (Annulus, Exterior) | (Exterior, Annulus) => PairClass::P4,
        _ => PairClass::Null,
    }
}

/// `Q⁺ = Σ_x Σ_{y∈Λ_r} (θ_{x+y} − θ_x)²`, exact.
pub fn q_plus(profile: &DeformationProfile, r: u64) -> f64 {
    let d = profile.d;
    let outer = LatticeBox::new(d, profile.l + r).region();
    let stencil = LatticeBox::new(d, r).region().coordinate_table();
    let table = outer.coordinate_table();
    let mut acc = PairwiseSum::new();
    let mut z = vec![0i64; d];
    for x in table.chunks_exact(d) {
        let tx = profile.theta_coords(x);
        let mut local = 0.0;
        for off in stencil.chunks_exact(d) {
            for k in 0..d {
                z[k] = x[k] + off[k];
            }
            local += (profile.theta_coords(&z) - tx).powi(2);
        }
        acc.add(local);
    }
    acc.total()
}

/// Summation window for the infinite pair sums.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Window {
    /// All of `Z^d`.
    Infinite,
    /// Pairs with both ends in `Λ_M`, `M ≥ L`.
    Box(u64),
}

/// Kernel correlations over the window for one profile.
pub struct PairSums {
    profile: DeformationProfile,
    kernel: LongRangeKernel,
    window: Window,
    region: Region,
    correlator: Correlator,
    thetas: Vec<f64>,
    zones: Vec<Zone>,
    lattice_zeta: f64,
}

impl PairSums {
    pub fn new(profile: &DeformationProfile, kernel: &LongRangeKernel, window: Window) -> Result<Self> {
        if profile.d != kernel.dim() {
            return Err(invalid("profile and kernel dimensions differ"));
        }
        let half = match window {
            Window::Infinite => profile.l,
            Window::Box(m) if m >= profile.l => m,
            Window::Box(m) => return Err(invalid(format!("window Λ_{m} must contain Λ_L with L = {}", profile.l))),
        };
        let region = LatticeBox::new(profile.d, half).region();
        let kern = *kernel;
        let spectrum = KernelSpectrum::new(&region.extents(), |dx| kern.k0(dx));
        let table = region.coordinate_table();
        let thetas = table.chunks_exact(profile.d).map(|x| profile.theta_coords(x)).collect();
        let zones = table.chunks_exact(profile.d).map(|x| zone(profile, linf(x))).collect();
        Ok(PairSums {
            profile: *profile,
            kernel: *kernel,
            window,
            region,
            correlator: Correlator::new(spectrum),
            thetas,
            zones,
            lattice_zeta: kernel.total_sum(),
        })
    }

    fn field(&self, f: impl Fn(f64, Zone) -> f64) -> Vec<f64> {
        self.thetas.iter().zip(&self.zones).map(|(&t, &z)| f(t, z)).collect()
    }

    /// `Σ_{x≠y ∈ window} K [A_x + A_y − 2 Σ_j B_j,x B_j,y]` and its gap to the
    /// infinite-volume value (zero for the infinite window).
    fn pair_functional(&mut self, a: &[f64], bs: &[Vec<f64>]) -> (f64, TailCertificate) {
        let sum_a: f64 = a.iter().sum();
        let b_part: f64 = bs.iter().map(|b| self.correlator.autocorrelate(b)).sum();
        match self.window {
            Window::Infinite => {
                let v = 2.0 * self.lattice_zeta * sum_a - 2.0 * b_part;
                (v, TailCertificate::exact(v))
            }
            Window::Box(m) => {
                let ones = vec![1.0; self.region.len()];
                let v = 2.0 * self.correlator.correlate(a, &ones) - 2.0 * b_part;
                let tail = 2.0 * sum_a * power_tail_bound(self.profile.d, self.kernel.exponent(), Support::Full, m - self.profile.l);
                (v, TailCertificate { r_cut: Some(m), partial_sum: v, tail_bound: tail })
            }
        }
    }

    /// `Q⁻ = Σ_{x≠y} K_{xy} (θ_x − θ_y)²` over the window.
    pub fn q_minus(&mut self) -> (f64, TailCertificate) {
        let a = self.field(|t, _| t * t);
        let b = self.field(|t, _| t);
        self.pair_functional(&a, &[b])
    }

    /// `Σ_{x≠y} K̃_{xy}` over the window.
    pub fn ktilde_sum(&mut self) -> (f64, TailCertificate) {
        let a = self.field(|t, _| 2.0 * (1.0 - t.cos()));
        let b1 = self.field(|t, _| 1.0 - t.cos());
        let b2 = self.field(|t, _| t.sin());
        self.pair_functional(&a, &[b1, b2])
    }

    /// `Q₁⁻ … Q₄⁻` over the window, each from its own pair set.
    pub fn q_minus_parts(&mut self) -> QMinusParts {
        let interior = self.field(|_, z| if z == Zone::Interior { 1.0 } else { 0.0 });
        let in_l = self.field(|_, z| if z == Zone::Exterior { 0.0 } else { 1.0 });
        let ann_sq_gap = self.field(|t, z| if z == Zone::Annulus { (PI - t).powi(2) } else { 0.0 });
        let ann_theta = self.field(|t, z| if z == Zone::Annulus { t } else { 0.0 });
        let ann_theta_sq = self.field(|t, z| if z == Zone::Annulus { t * t } else { 0.0 });
        let ann = self.field(|_, z| if z == Zone::Annulus { 1.0 } else { 0.0 });

        let q1 = 2.0 * self.correlator.correlate(&interior, &ann_sq_gap);
        let q3 = 2.0 * self.correlator.correlate(&ann_theta_sq, &ann) - 2.0 * self.correlator.autocorrelate(&ann_theta);
        let n_interior: f64 = interior.iter().sum();
        let ann_mass: f64 = ann_theta_sq.iter().sum();
        let (q2, q4, tail2, tail4) = match self.window {
            Window::Infinite => {
                let z = self.lattice_zeta;
                let q2 = 2.0 * PI * PI * (n_interior * z - self.correlator.correlate(&interior, &in_l));
                let q4 = 2.0 * (z * ann_mass - self.correlator.correlate(&ann_theta_sq, &in_l));
                (q2, q4, TailCertificate::exact(q2), TailCertificate::exact(q4))
            }
            Window::Box(m) => {
                let outside = self.field(|_, z| if z == Zone::Exterior { 1.0 } else { 0.0 });
                let q2 = 2.0 * PI * PI * self.correlator.correlate(&interior, &outside);
                let q4 = 2.0 * self.correlator.correlate(&ann_theta_sq, &outside);
                let t = power_tail_bound(self.profile.d, self.kernel.exponent(), Support::Full, m - self.profile.l);
                (
                    q2,
                    q4,
                    TailCertificate { r_cut: Some(m), partial_sum: q2, tail_bound: 2.0 * PI * PI * n_interior * t },
                    TailCertificate { r_cut: Some(m), partial_sum: q4, tail_bound: 2.0 * ann_mass * t },
                )
            }
        };
        QMinusParts { parts: [q1, q2, q3, q4], q2_tail: tail2, q4_tail: tail4 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QMinusParts {
    pub parts: [f64; 4],
    pub q2_tail: TailCertificate,
    pub q4_tail: TailCertificate,
}

impl QMinusParts {
    pub fn total(&self) -> f64 {
        self.parts.iter().sum()
    }
}

pub fn q_minus(profile: &DeformationProfile, kernel: &LongRangeKernel, window: Window) -> Result<(f64, TailCertificate)> {
    Ok(PairSums::new(profile, kernel, window)?.q_minus())
}

pub fn q_minus_parts(profile: &DeformationProfile, kernel: &LongRangeKernel, window: Window) -> Result<QMinusParts> {
    Ok(PairSums::new(profile, kernel, window)?.q_minus_parts())
}

pub fn ktilde_sum(profile: &DeformationProfile, kernel: &LongRangeKernel, window: Window) -> Result<(f64, TailCertificate)> {
    Ok(PairSums::new(profile, kernel, window)?.ktilde_sum())
}

/// `U_{L,a} = ‖Φ''‖ Q⁺ + |λ| Q⁻` over the window.
pub fn uniform_bound(profile: &DeformationProfile, spec: &ModelSpec, window: Window) -> Result<(f64, TailCertificate)> {
    let phi2 = spec.potential.phi2_norm_bound();
    let qp = if phi2 != 0.0 { q_plus(profile, spec.potential.range()) } else { 0.0 };
    let (qm, cert) = if spec.lambda != 0.0 { q_minus(profile, &spec.kernel, window)? } else { (0.0, TailCertificate::exact(0.0)) };
    let value = phi2 * qp + spec.lambda.abs() * qm;
    Ok((value, TailCertificate { r_cut: cert.r_cut, partial_sum: value, tail_bound: spec.lambda.abs() * cert.tail_bound }))
}

fn require_box(config: &SpinConfig, profile: &DeformationProfile, spec: &ModelSpec) -> Result<u64> {
    if config.dim() != spec.d || profile.d != spec.d || config.n() != spec.n {
        return Err(invalid("configuration, profile and model dimensions differ"));
    }
    let need = profile.l + spec.potential.range();
    if !config.region().contains_box(&LatticeBox::new(spec.d, need)) {
        return Err(Error::BoxTooSmall { required: need, context: "energy defect".into() });
    }
    Ok(need)
}

/// `Δ_{L,a} = 2H_N(σ) − H_N(R⁺σ) − H_N(R⁻σ)` with `N = L + r + 1`.
pub fn energy_defect(config: &SpinConfig, profile: &DeformationProfile, spec: &ModelSpec) -> Result<f64> {
    let need = require_box(config, profile, spec)?;
    energy_defect_at(config, profile, spec, need + 1)
}

/// [`energy_defect`] at an explicit nominal `N > L + r`.
pub fn energy_defect_at(config: &SpinConfig, profile: &DeformationProfile, spec: &ModelSpec, n_half: u64) -> Result<f64> {
    let need = require_box(config, profile, spec)?;
    if n_half <= need {
        return Err(invalid(format!("nominal N = {n_half} must exceed L + r = {need}")));
    }
    let plus = apply_inhomogeneous_rotation(config, profile, Branch::Plus)?;
    let minus = apply_inhomogeneous_rotation(config, profile, Branch::Minus)?;
    Ok(2.0 * hamiltonian(config, n_half, spec)? - hamiltonian(&plus, n_half, spec)? - hamiltonian(&minus, n_half, spec)?)
}

fn short_range_defect(config: &SpinConfig, profile: &DeformationProfile, spec: &ModelSpec, plus: &SpinConfig, minus: &SpinConfig) -> f64 {
    let potential = spec.potential.as_ref();
    if potential.nearest_neighbour_coupling() == Some(0.0) {
        return 0.0;
    }
    let outer = LatticeBox::new(spec.d, profile.l + potential.range()).region();
    let table = outer.coordinate_table();
    let mut acc = PairwiseSum::new();
    for x in table.chunks_exact(spec.d) {
        acc.add(2.0 * potential.evaluate_at(config, x) - potential.evaluate_at(plus, x) - potential.evaluate_at(minus, x));
    }
    acc.total()
}

/// Δ through the pair identity: `λ Σ K_{xy} Δ_xy` over ordered region pairs
/// plus the short-range part on the rotated configurations.
pub fn energy_defect_pairwise(config: &SpinConfig, profile: &DeformationProfile, spec: &ModelSpec) -> Result<f64> {
    require_box(config, profile, spec)?;
    let region = config.region();
    let d = spec.d;
    let table = region.coordinate_table();
    let thetas: Vec<f64> = table.chunks_exact(d).map(|x| profile.theta_coords(x)).collect();
    let kt = DisplacementTable::new(&spec.kernel, region);
    let mut long = PairwiseSum::new();
    if spec.lambda != 0.0 {
        for i in 0..region.len() {
            let xi = &table[i * d..(i + 1) * d];
            if linf(xi) > profile.l {
                continue;
            }
            for j in 0..region.len() {
                if j == i {
                    continue;
                }
                let yj = &table[j * d..(j + 1) * d];
                let weight = if linf(yj) > profile.l { 2.0 } else { 1.0 };
                long.add(weight * kt.get(xi, yj) * pair_defect(config.get(i), config.get(j), thetas[i], thetas[j]));
            }
        }
    }
    let plus = apply_inhomogeneous_rotation(config, profile, Branch::Plus)?;
    let minus = apply_inhomogeneous_rotation(config, profile, Branch::Minus)?;
    Ok(spec.lambda * long.total() + short_range_defect(config, profile, spec, &plus, &minus))
}

/// Batch evaluator of `Δ_{L,a}` for configurations on one storage region.
///
/// The long-range part uses
/// `Δ_long = P⁻¹ Σ_k K̂ [4 Re(Ê conj(Ŵ)) − 2|Ê|² − 2|Ŝ|²]` with
/// `W = w`, `E = (1 − cos θ) w`, `S = sin θ · w` and `w = σ¹ + iσ²`.
/// `E` and `S` vanish outside `Λ_L`, so nothing large cancels.
pub struct DefectEvaluator {
    profile: DeformationProfile,
    spec: ModelSpec,
    region: Region,
    spectrum: KernelSpectrum,
    fft: GridFft,
    one_minus_cos: Vec<f64>,
    sin: Vec<f64>,
    w: Vec<Complex64>,
    e: Vec<Complex64>,
    s: Vec<Complex64>,
}

impl DefectEvaluator {
    pub fn new(region: &Region, profile: &DeformationProfile, spec: &ModelSpec) -> Result<Self> {
        let probe = SpinConfig::aligned(region.clone(), spec.n, 0)?;
        require_box(&probe, profile, spec)?;
        let kern = spec.kernel;
        let spectrum = KernelSpectrum::new(&region.extents(), |dx| kern.k0(dx));
        let fft = GridFft::new(spectrum.shape());
        let thetas = profile.theta_field(region);
        let len = spectrum.grid_len();
        Ok(DefectEvaluator {
            profile: *profile,
            spec: spec.clone(),
            region: region.clone(),
            one_minus_cos: thetas.iter().map(|t| 1.0 - t.cos()).collect(),
            sin: thetas.iter().map(|t| t.sin()).collect(),
            spectrum,
            fft,
            w: vec![Complex64::new(0.0, 0.0); len],
            e: vec![Complex64::new(0.0, 0.0); len],
            s: vec![Complex64::new(0.0, 0.0); len],
        })
    }

    pub fn region(&self) -> &Region {
        &self.region
    }

    pub fn profile(&self) -> &DeformationProfile {
        &self.profile
    }

    /// Long-range part `Σ_{x≠y} K_{xy} Δ_xy` (without λ).
    pub fn long_range(&mut self, config: &SpinConfig) -> f64 {
        let n = config.n();
        let vals = config.values();
        let count = self.region.len();
        let w_at = |i: usize| Complex64::new(vals[i * n], vals[i * n + 1]);
        self.spectrum.embed(count, &mut self.w, w_at);
        let omc = &self.one_minus_cos;
        self.spectrum.embed(count, &mut self.e, |i| w_at(i) * omc[i]);
        let sn = &self.sin;
        self.spectrum.embed(count, &mut self.s, |i| w_at(i) * sn[i]);
        self.fft.forward(&mut self.w);
        self.fft.forward(&mut self.e);
        self.fft.forward(&mut self.s);
        let mut acc = 0.0;
        for (k, khat) in self.spectrum.values().iter().enumerate() {
            let (w, e, s) = (self.w[k], self.e[k], self.s[k]);
            acc += khat * (4.0 * (e.re * w.re + e.im * w.im) - 2.0 * e.norm_sqr() - 2.0 * s.norm_sqr());
        }
        acc / self.spectrum.grid_len() as f64
    }

    pub fn evaluate(&mut self, config: &SpinConfig) -> Result<f64> {
        if config.region() != &self.region || config.n() != self.spec.n {
            return Err(invalid("configuration does not match the evaluator region"));
        }
        let long = if self.spec.lambda != 0.0 { self.spec.lambda * self.long_range(config) } else { 0.0 };
        let short = if self.spec.potential.nearest_neighbour_coupling() == Some(0.0) {
            0.0
        } else {
            let plus = apply_inhomogeneous_rotation(config, &self.profile, Branch::Plus)?;
            let minus = apply_inhomogeneous_rotation(config, &self.profile, Branch::Minus)?;
            short_range_defect(config, &self.profile, &self.spec, &plus, &minus)
        };
        Ok(long + short)
    }
}

/// Defect of one configuration together with its bound and decomposition.
#[derive(Clone, Debug)]
pub struct DefectReport {
    pub d: usize,
    pub n: usize,
    pub s: f64,
    pub lambda: f64,
    pub l: u64,
    pub a: u64,
    pub delta: f64,
    pub u_bound: f64,
    pub q_plus: f64,
    pub q_minus_parts: [f64; 4],
    pub q_minus: f64,
    pub q_minus_tail: TailCertificate,
    pub q2_tail: TailCertificate,
    pub q4_tail: TailCertificate,
}

impl DefectReport {
    pub fn compute(config: &SpinConfig, profile: &DeformationProfile, spec: &ModelSpec, window: Window) -> Result<Self> {
        let mut evaluator = DefectEvaluator::new(config.region(), profile, spec)?;
        let delta = evaluator.evaluate(config)?;
        let mut sums = PairSums::new(profile, &spec.kernel, window)?;
        let (q_minus, q_minus_tail) = sums.q_minus();
        let parts = sums.q_minus_parts();
        let q_plus = q_plus(profile, spec.potential.range());
        let u_bound = spec.potential.phi2_norm_bound() * q_plus + spec.lambda.abs() * q_minus;
        Ok(DefectReport {
            d: spec.d,
            n: spec.n,
            s: spec.s,
            lambda: spec.lambda,
            l: profile.l,
            a: profile.a,
            delta,
            u_bound,
            q_plus,
            q_minus_parts: parts.parts,
            q_minus,
            q_minus_tail,
            q2_tail: parts.q2_tail,
            q4_tail: parts.q4_tail,
        })
    }

    pub fn csv_header() -> Vec<&'static str> {
        vec![
            "d", "n", "s", "lambda", "L", "a", "delta", "u_bound", "q_plus", "q1", "q2", "q3", "q4", "q_minus", "q_minus_tail", "q2_tail",
            "q4_tail",
        ]
    }

    pub fn csv_row(&self) -> Vec<String> {
        let mut row = vec![self.d.to_string(), self.n.to_string(), self.s.to_string(), self.lambda.to_string(), self.l.to_string(), self.a.to_string()];
        row.extend([self.delta, self.u_bound, self.q_plus].iter().map(f64::to_string));
        row.extend(self.q_minus_parts.iter().map(f64::to_string));
        row.extend([self.q_minus, self.q_minus_tail.tail_bound, self.q2_tail.tail_bound, self.q4_tail.tail_bound].iter().map(f64::to_string));
        row
    }
}

/// `|Λ_ℓ|⁻¹ Σ_{x∈V} P₁₂ σ_x`.
pub fn block_magnetization(config: &SpinConfig, block: &Region) -> Result<[f64; 2]> {
    let mut m = [0.0; 2];
    for x in block.sites() {
        let s = config.spin_at(x.coords()).ok_or_else(|| invalid("block outside the configuration region"))?;
        m[0] += s[0];
        m[1] += s[1];
    }
    let count = block.len() as f64;
    Ok([m[0] / count, m[1] / count])
}

fn regions_overlap(a: &Region, b: &Region) -> bool {
    a.lo().iter().zip(a.hi()).zip(b.lo().iter().zip(b.hi())).all(|((alo, ahi), (blo, bhi))| alo <= bhi && blo <= ahi)
}

/// `(|Σ_{V₁×V₂} K Δ − m₁·m₂ Σ K̃|, Σ_{V₁×V₂} K̃)`.
pub fn smoothing_check(config: &SpinConfig, v1: &Region, v2: &Region, profile: &DeformationProfile, kernel: &LongRangeKernel) -> Result<(f64, f64)> {
    if regions_overlap(v1, v2) {
        return Err(invalid("blocks overlap"));
    }
    let m1 = block_magnetization(config, v1)?;
    let m2 = block_magnetization(config, v2)?;
    let mut k_delta = PairwiseSum::new();
    let mut k_tilde = PairwiseSum::new();
    let t2 = v2.coordinate_table();
    let d = v2.dim();
    let y_data: Vec<(&[i64], &[f64], f64)> = t2
        .chunks_exact(d)
        .map(|y| (y, config.spin_at(y).expect("checked above"), profile.theta_coords(y)))
        .collect();
    let mut diff = vec![0i64; d];
    for x in v1.sites() {
        let sx = config.spin_at(x.coords()).expect("checked above");
        let tx = profile.theta(&x);
        for &(y, sy, ty) in &y_data {
            for k in 0..d {
                diff[k] = y[k] - x.coords()[k];
            }
            let kt = ktilde(kernel, tx, ty, &diff)?;
            k_tilde.add(kt);
            k_delta.add(kernel.k0(&diff) * pair_defect(sx, sy, tx, ty));
        }
    }
    let rhs = k_tilde.total();
    let lhs = (k_delta.total() - (m1[0] * m2[0] + m1[1] * m2[1]) * rhs).abs();
    Ok((lhs, rhs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin_nn_potential, kernel_power_law};
    use approx::assert_relative_eq;
    use proptest::{prop_assert, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(d: usize, n: usize, s: f64, lambda: f64, j: f64) -> ModelSpec {
        ModelSpec::new(d, n, s, lambda, 1.0, builtin_nn_potential(j, d)).unwrap()
    }

    /// Brute-force `Σ_{x≠y ∈ Λ_M} K (θ_x − θ_y)²`.
    fn brute_q_minus(profile: &DeformationProfile, kernel: &LongRangeKernel, m: u64) -> f64 {
        let sites: Vec<_> = LatticeBox::new(profile.d, m).sites().collect();
        let mut acc = 0.0;
        for x in &sites {
            for y in &sites {
                if x != y {
                    let dx: Vec<i64> = x.coords().iter().zip(y.coords()).map(|(a, b)| a - b).collect();
                    acc += kernel.k0(&dx) * (profile.theta(x) - profile.theta(y)).powi(2);
                }
            }
        }
        acc
    }

    #[test]
    fn pair_defect_examples() {
        let e1 = [1.0, 0.0, 0.0];
        let e3 = [0.0, 0.0, 1.0];
        assert_relative_eq!(pair_defect(&e1, &e1, PI, 0.0), 4.0, max_relative = 1e-15);
        assert_relative_eq!(pair_defect_three_term(&e1, &e1, PI, 0.0), 4.0, max_relative = 1e-15);
        assert_eq!(pair_defect(&e1, &e1, 1.3, 1.3), 0.0);
        assert_eq!(pair_defect(&e1, &e3, 0.2, 2.9), 0.0);
    }

    proptest! {
        #[test]
        fn pair_identity_matches_definition(
            a in proptest::collection::vec(-1.0f64..1.0, 4),
            b in proptest::collection::vec(-1.0f64..1.0, 4),
            tx in 0.0f64..PI, ty in 0.0f64..PI,
        ) {
            let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(na > 0.0 && nb > 0.0);
            let a: Vec<f64> = a.iter().map(|v| v / na).collect();
            let b: Vec<f64> = b.iter().map(|v| v / nb).collect();
            prop_assert!((pair_defect(&a, &b, tx, ty) - pair_defect_three_term(&a, &b, tx, ty)).abs() <= 1e-12);
        }

        #[test]
        fn trigonometric_core_bound(phi in -7.0f64..7.0, delta in -4.0f64..4.0) {
            let lhs = (2.0 * phi.cos() - (phi + delta).cos() - (phi - delta).cos()).abs();
            prop_assert!((lhs - 2.0 * phi.cos().abs() * (1.0 - delta.cos())).abs() <= 1e-12);
            prop_assert!(lhs <= delta * delta + 1e-12);
        }

        #[test]
        fn ktilde_sandwich(tx in 0.0f64..PI, ty in 0.0f64..PI, x in 1i64..40) {
            let kernel = kernel_power_law(1.5, 1).unwrap();
            let k = kernel.k0(&[x]);
            let kt = ktilde(&kernel, tx, ty, &[x]).unwrap();
            let gap = (tx - ty).powi(2);
            prop_assert!(kt >= 0.0);
            prop_assert!(4.0 / (PI * PI) * gap * k <= kt * (1.0 + 1e-12) + 1e-300);
            prop_assert!(kt <= gap * k * (1.0 + 1e-12));
        }
    }

    #[test]
    fn pair_identity_on_many_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut worst = 0.0f64;
        for i in 0..100_000 {
            let n = 2 + i % 4;
            let a = crate::spin::random_unit_spin(&mut rng, n);
            let b = crate::spin::random_unit_spin(&mut rng, n);
            let tx = rng.random_range(0.0..=PI);
            let ty = rng.random_range(0.0..=PI);
            worst = worst.max((pair_defect(&a, &b, tx, ty) - pair_defect_three_term(&a, &b, tx, ty)).abs());
        }
        assert!(worst <= 1e-12, "{worst}");
    }

    #[test]
    fn trigonometric_core_grid() {
        for i in 0..=400 {
            let phi = -2.0 * PI + 4.0 * PI * i as f64 / 400.0;
            for j in 0..=400 {
                let delta = -PI + 2.0 * PI * j as f64 / 400.0;
                let lhs = (2.0 * phi.cos() - (phi + delta).cos() - (phi - delta).cos()).abs();
                assert!((lhs - 2.0 * phi.cos().abs() * (1.0 - delta.cos())).abs() <= 1e-12);
                assert!(lhs <= delta * delta + 1e-12);
            }
        }
    }

    #[test]
    fn ktilde_examples() {
        let kernel = kernel_power_law(2.0, 1).unwrap();
        assert_eq!(ktilde(&kernel, 0.7, 0.7, &[3]).unwrap(), 0.0);
        assert_relative_eq!(ktilde(&kernel, PI, 0.0, &[2]).unwrap(), 1.0, max_relative = 1e-15);
        assert!(ktilde(&kernel, 0.0, 1.0, &[0]).is_err());
    }

    #[test]
    fn q_plus_small_case_and_one_dimensional_closed_form() {
        // L = 2, a = 1: θ = (π at 0, 1; 0 beyond) with the ramp shell k = 2 at π
        let p = DeformationProfile::new(1, 2, 1).unwrap();
        let mut brute = 0.0;
        for x in -10i64..=10 {
            for y in -1i64..=1 {
                brute += (p.theta_coords(&[x + y]) - p.theta_coords(&[x])).powi(2);
            }
        }
        assert_relative_eq!(q_plus(&p, 1), brute, max_relative = 1e-15);
        for (l, a) in [(64u64, 4u64), (128, 8), (40, 39)] {
            let p = DeformationProfile::new(1, l, a).unwrap();
            assert_relative_eq!(q_plus(&p, 1), 4.0 * PI * PI / a as f64, max_relative = 1e-13);
        }
    }

    #[test]
    fn classification_covers_box_and_matches_parts() {
        let kernel = kernel_power_law(2.5, 2).unwrap();
        let p = DeformationProfile::new(2, 4, 3).unwrap();
        let m = p.l + 5;
        let sites: Vec<_> = LatticeBox::new(2, m).sites().collect();
        let mut by_class = [0.0f64; 4];
        for (i, x) in sites.iter().enumerate() {
            for y in &sites[i + 1..] {
                let dx: Vec<i64> = x.coords().iter().zip(y.coords()).map(|(a, b)| a - b).collect();
                let w = 2.0 * kernel.k0(&dx) * (p.theta(x) - p.theta(y)).powi(2);
                match classify_pair(&p, x.coords(), y.coords()) {
                    PairClass::P1 => by_class[0] += w,
                    PairClass::P2 => by_class[1] += w,
                    PairClass::P3 => by_class[2] += w,
                    PairClass::P4 => by_class[3] += w,
                    PairClass::Null => assert_eq!(w, 0.0),
                }
            }
        }
        let parts = q_minus_parts(&p, &kernel, Window::Box(m)).unwrap();
        for k in 0..4 {
            assert_relative_eq!(parts.parts[k], by_class[k], max_relative = 1e-11);
        }
        assert_relative_eq!(parts.total(), brute_q_minus(&p, &kernel, m), max_relative = 1e-11);
    }

    #[test]
    fn decomposition_matches_direct_q_minus() {
        for (d, s, l, a) in [(1usize, 2.5f64, 8u64, 2u64), (1, 1.5, 32, 8), (2, 3.0, 8, 2)] {
            let kernel = kernel_power_law(s, d).unwrap();
            let p = DeformationProfile::new(d, l, a).unwrap();
            for window in [Window::Infinite, Window::Box(l + 3)] {
                let (direct, _) = q_minus(&p, &kernel, window).unwrap();
                let parts = q_minus_parts(&p, &kernel, window).unwrap();
                assert_relative_eq!(parts.total(), direct, max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn infinite_window_matches_truncated_brute_force_with_tail() {
        // d = 1, s = 2.5, L = 8, a = 2, R_cut = 1000
        let kernel = kernel_power_law(2.5, 1).unwrap();
        let p = DeformationProfile::new(1, 8, 2).unwrap();
        let (inf, _) = q_minus(&p, &kernel, Window::Infinite).unwrap();
        let (boxed, cert) = q_minus(&p, &kernel, Window::Box(1000)).unwrap();
        assert!(boxed <= inf && inf <= cert.upper());
        let mut brute = 0.0;
        for x in -8i64..=8 {
            let tx = p.theta_coords(&[x]);
            for y in -1000i64..=1000 {
                if y != x {
                    let w = kernel.k0(&[x - y]) * (tx - p.theta_coords(&[y])).powi(2);
                    brute += if y.abs() > 8 { 2.0 * w } else { w };
                }
            }
        }
        assert_relative_eq!(boxed, brute, max_relative = 1e-9);
        let parts = q_minus_parts(&p, &kernel, Window::Box(1000)).unwrap();
        assert_relative_eq!(parts.total(), brute, max_relative = 1e-9);
    }

    #[test]
    fn uniform_bound_examples() {
        let p = DeformationProfile::new(1, 4, 2).unwrap();
        let (u, _) = uniform_bound(&p, &spec(1, 2, 1.5, 0.0, 0.0), Window::Infinite).unwrap();
        assert_eq!(u, 0.0);
        let sp = spec(1, 2, 1.5, 1.0, 0.0);
        let (u, _) = uniform_bound(&p, &sp, Window::Infinite).unwrap();
        assert_eq!(u, q_minus(&p, &sp.kernel, Window::Infinite).unwrap().0);
        let r_cut = 300;
        let (ub, _) = uniform_bound(&p, &sp, Window::Box(r_cut)).unwrap();
        assert_relative_eq!(ub, brute_q_minus(&p, &sp.kernel, r_cut), max_relative = 1e-10);
    }

    #[test]
    fn ktilde_sum_matches_brute_force() {
        let kernel = kernel_power_law(3.0, 2).unwrap();
        let p = DeformationProfile::new(2, 5, 2).unwrap();
        let m = 8;
        let sites: Vec<_> = LatticeBox::new(2, m).sites().collect();
        let mut brute = 0.0;
        for x in &sites {
            for y in &sites {
                if x != y {
                    let dx: Vec<i64> = y.coords().iter().zip(x.coords()).map(|(a, b)| a - b).collect();
                    brute += ktilde(&kernel, p.theta(x), p.theta(y), &dx).unwrap();
                }
            }
        }
        let (v, cert) = ktilde_sum(&p, &kernel, Window::Box(m)).unwrap();
        assert_relative_eq!(v, brute, max_relative = 1e-11);
        let (inf, _) = ktilde_sum(&p, &kernel, Window::Infinite).unwrap();
        assert!(v <= inf && inf <= cert.upper());
    }

    #[test]
    fn energy_defect_examples() {
        let p = DeformationProfile::new(2, 3, 1).unwrap();
        let region = LatticeBox::new(2, 6).region();
        let sp = spec(2, 3, 3.0, 1.0, 1.0);
        let e3 = SpinConfig::aligned(region.clone(), 3, 2).unwrap();
        assert!(energy_defect(&e3, &p, &sp).unwrap().abs() < 1e-10);

        // all spins ê₁, zero potential: the identity route reduces to Σ K̃
        let d1 = DeformationProfile::new(1, 3, 1).unwrap();
        let sp1 = spec(1, 2, 2.0, 1.0, 0.0);
        let line = Region::new(vec![-4], vec![5]);
        let cfg = SpinConfig::aligned(line, 2, 0).unwrap();
        let pairwise = energy_defect_pairwise(&cfg, &d1, &sp1).unwrap();
        let mut expected = 0.0;
        for x in -4i64..=5 {
            for y in -4i64..=5 {
                if x != y {
                    expected += ktilde(&sp1.kernel, d1.theta_coords(&[x]), d1.theta_coords(&[y]), &[y - x]).unwrap();
                }
            }
        }
        assert_relative_eq!(pairwise, expected, max_relative = 1e-12);
        assert_relative_eq!(energy_defect(&cfg, &d1, &sp1).unwrap(), expected, max_relative = 1e-12);
        // the (0, 5) pair alone contributes 2 · 4 K₀(5)
        assert_relative_eq!(
            pair_defect(&[1.0, 0.0], &[1.0, 0.0], d1.theta_coords(&[0]), d1.theta_coords(&[5])) * 2.0 * sp1.kernel.k0(&[5]),
            8.0 / 25.0,
            max_relative = 1e-14
        );
    }

    #[test]
    fn three_routes_agree_on_random_configs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (d, n, l, a, half) in [(1usize, 2usize, 6u64, 2u64, 10u64), (2, 3, 3, 1, 5), (1, 3, 5, 4, 7)] {
            for j in [0.0, 1.3] {
                let sp = spec(d, n, d as f64 + 0.5, 0.9, j);
                let p = DeformationProfile::new(d, l, a).unwrap();
                let region = LatticeBox::new(d, half).region();
                let mut ev = DefectEvaluator::new(&region, &p, &sp).unwrap();
                for _ in 0..5 {
                    let cfg = SpinConfig::random(region.clone(), n, &mut rng).unwrap();
                    let by_def = energy_defect(&cfg, &p, &sp).unwrap();
                    let by_pairs = energy_defect_pairwise(&cfg, &p, &sp).unwrap();
                    let by_fft = ev.evaluate(&cfg).unwrap();
                    let scale = by_pairs.abs().max(1.0);
                    assert!((by_def - by_pairs).abs() <= 1e-9 * scale, "{by_def} vs {by_pairs}");
                    assert!((by_fft - by_pairs).abs() <= 1e-10 * scale, "{by_fft} vs {by_pairs}");
                }
            }
        }
    }

    #[test]
    fn defect_is_independent_of_nominal_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let sp = spec(1, 2, 1.5, 1.0, 1.0);
        let p = DeformationProfile::new(1, 8, 3).unwrap();
        let cfg = SpinConfig::random(LatticeBox::new(1, 20).region(), 2, &mut rng).unwrap();
        let a = energy_defect_at(&cfg, &p, &sp, 10).unwrap();
        let b = energy_defect_at(&cfg, &p, &sp, 14).unwrap();
        assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
        assert!(energy_defect_at(&cfg, &p, &sp, 9).is_err());
    }

    #[test]
    fn defect_invariant_under_rotations_fixing_the_plane() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let sp = spec(2, 4, 2.5, 1.0, 0.5);
        let p = DeformationProfile::new(2, 4, 2).unwrap();
        let region = LatticeBox::new(2, 7).region();
        let mut ev = DefectEvaluator::new(&region, &p, &sp).unwrap();
        let mut cfg = SpinConfig::random(region, 4, &mut rng).unwrap();
        let before = ev.evaluate(&cfg).unwrap();
        cfg.rotate_globally(2, 3, 1.1);
        let after = ev.evaluate(&cfg).unwrap();
        assert!((before - after).abs() <= 1e-10 * before.abs().max(1.0));
    }

    #[test]
    fn uniform_bound_holds_on_random_and_aligned_configs() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let sp = spec(1, 2, 1.5, 1.0, 1.0);
        let p = DeformationProfile::new(1, 16, 4).unwrap();
        let m = 19;
        let region = LatticeBox::new(1, m).region();
        let (u, _) = uniform_bound(&p, &sp, Window::Box(m)).unwrap();
        let mut ev = DefectEvaluator::new(&region, &p, &sp).unwrap();
        let aligned = SpinConfig::aligned(region.clone(), 2, 0).unwrap();
        assert!(ev.evaluate(&aligned).unwrap().abs() <= u);
        for _ in 0..200 {
            let cfg = SpinConfig::random(region.clone(), 2, &mut rng).unwrap();
            assert!(ev.evaluate(&cfg).unwrap().abs() <= u);
        }
    }

    #[test]
    fn box_too_small_is_reported() {
        let sp = spec(1, 2, 1.5, 1.0, 1.0);
        let p = DeformationProfile::new(1, 8, 2).unwrap();
        let cfg = SpinConfig::aligned(LatticeBox::new(1, 8).region(), 2, 0).unwrap();
        assert!(matches!(energy_defect(&cfg, &p, &sp), Err(Error::BoxTooSmall { .. })));
        assert!(matches!(DefectEvaluator::new(cfg.region(), &p, &sp), Err(Error::BoxTooSmall { .. })));
    }

    #[test]
    fn block_magnetization_examples() {
        let region = LatticeBox::new(2, 10).region();
        let block = Region::new(vec![0, 0], vec![7, 7]);
        let e1 = SpinConfig::aligned(region.clone(), 3, 0).unwrap();
        assert_eq!(block_magnetization(&e1, &block).unwrap(), [1.0, 0.0]);
        let e3 = SpinConfig::aligned(region.clone(), 3, 2).unwrap();
        assert_eq!(block_magnetization(&e3, &block).unwrap(), [0.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let bound = 4.0 / (block.len() as f64).sqrt();
        let mut within = 0;
        for _ in 0..1000 {
            let cfg = SpinConfig::random(region.clone(), 2, &mut rng).unwrap();
            let m = block_magnetization(&cfg, &block).unwrap();
            assert!(m[0].hypot(m[1]) <= 1.0);
            if m[0].hypot(m[1]) <= bound {
                within += 1;
            }
        }
        assert!(within >= 950);
    }

    #[test]
    fn smoothing_check_examples() {
        let kernel = kernel_power_law(1.5, 1).unwrap();
        let p = DeformationProfile::new(1, 200, 64).unwrap();
        let region = LatticeBox::new(1, 260).region();
        let v1 = Region::new(vec![-3], vec![3]);
        let v2 = Region::new(vec![20], vec![26]);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let cfg = SpinConfig::random(region.clone(), 2, &mut rng).unwrap();
        assert_eq!(smoothing_check(&cfg, &v1, &v2, &p, &kernel).unwrap(), (0.0, 0.0));
        let e1 = SpinConfig::aligned(region.clone(), 2, 0).unwrap();
        let w1 = Region::new(vec![100], vec![107]);
        let w2 = Region::new(vec![180], vec![187]);
        let (lhs, rhs) = smoothing_check(&e1, &w1, &w2, &p, &kernel).unwrap();
        assert!(rhs > 0.0 && lhs <= 1e-12 * rhs);
        assert!(smoothing_check(&e1, &w1, &Region::new(vec![105], vec![110]), &p, &kernel).is_err());
    }

    #[test]
    fn smoothing_ratio_decreases_with_separation_on_average() {
        // ℓ = 4, a = 64, d = 1: V₁ in the interior (θ = π), V₂ outside Λ_L
        // (θ = 0), so the mean ratio only tracks how flat K is across the blocks
        let kernel = kernel_power_law(1.5, 1).unwrap();
        let ell = 4i64;
        let p = DeformationProfile::new(1, 200, 64).unwrap();
        let c1 = 200 - 64 - ell;
        let v1 = Region::new(vec![c1 - ell], vec![c1 + ell]);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut previous = f64::INFINITY;
        for sep in [32 * ell, 64 * ell, 128 * ell] {
            let c2 = c1 + sep;
            let v2 = Region::new(vec![c2 - ell], vec![c2 + ell]);
            let region = Region::new(vec![c1 - ell], vec![c2 + ell]);
            let mut total = 0.0;
            for _ in 0..400 {
                let cfg = SpinConfig::random(region.clone(), 2, &mut rng).unwrap();
                let (lhs, rhs) = smoothing_check(&cfg, &v1, &v2, &p, &kernel).unwrap();
                total += lhs / rhs;
            }
            let mean = total / 400.0;
            assert!(mean < previous, "sep {sep}: {mean} ≥ {previous}");
            previous = mean;
        }
    }
}
