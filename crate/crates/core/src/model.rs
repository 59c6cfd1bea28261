//! Short-range potentials, the power-law kernel, the Hamiltonian with free
//! boundary, single-site energy differences and certified truncated sums.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};
use crate::lattice::{linf, norm_sq, LatticeBox, Region};
use crate::par;
use crate::special::{hurwitz_zeta, lattice_zeta};
use crate::spin::SpinConfig;
use crate::summation::PairwiseSum;

/// Read access to spins by coordinate; absent sites return `None`.
pub trait SpinAccess {
    fn spin(&self, x: &[i64]) -> Option<&[f64]>;
}

impl SpinAccess for SpinConfig {
    fn spin(&self, x: &[i64]) -> Option<&[f64]> {
        self.spin_at(x)
    }
}

/// A configuration with one site replaced.
pub struct Overridden<'a> {
    pub base: &'a SpinConfig,
    pub index: usize,
    pub value: &'a [f64],
}

impl SpinAccess for Overridden<'_> {
    fn spin(&self, x: &[i64]) -> Option<&[f64]> {
        let idx = self.base.region().index_of(x)?;
        Some(if idx == self.index { self.value } else { self.base.get(idx) })
    }
}

/// A finite-range, rotation-invariant per-site interaction `Φ`.
pub trait ShortRangePotential: Debug + Send + Sync {
    fn name(&self) -> &'static str;
    fn dim(&self) -> usize;
    fn range(&self) -> u64;
    /// `Φ ∘ τ_x`: the potential centred at `x`. Absent spins do not interact.
    fn evaluate_at(&self, spins: &dyn SpinAccess, x: &[i64]) -> f64;
    /// Certified upper bound on `‖Φ''‖`.
    fn phi2_norm_bound(&self) -> f64;
    /// `Some(J)` when `Φ = −J Σ_i σ_0·σ_{ê_i}` (the zero potential gives `Some(0)`).
    fn nearest_neighbour_coupling(&self) -> Option<f64> {
        None
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ZeroPotential {
    pub d: usize,
}

impl ShortRangePotential for ZeroPotential {
    fn name(&self) -> &'static str {
        "zero"
    }
    fn dim(&self) -> usize {
        self.d
    }
    fn range(&self) -> u64 {
        1
    }
    fn evaluate_at(&self, _: &dyn SpinAccess, _: &[i64]) -> f64 {
        0.0
    }
    fn phi2_norm_bound(&self) -> f64 {
        0.0
    }
    fn nearest_neighbour_coupling(&self) -> Option<f64> {
        Some(0.0)
    }
}

/// `Φ(σ) = −J Σ_{i=1}^d σ_0·σ_{ê_i}`: each bond of `Z^d` counted once.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NearestNeighbour {
    pub j: f64,
    pub d: usize,
}

impl ShortRangePotential for NearestNeighbour {
    fn name(&self) -> &'static str {
        "nn"
    }
    fn dim(&self) -> usize {
        self.d
    }
    fn range(&self) -> u64 {
        1
    }
    fn evaluate_at(&self, spins: &dyn SpinAccess, x: &[i64]) -> f64 {
        let Some(center) = spins.spin(x) else { return 0.0 };
        let mut nb = x.to_vec();
        let mut acc = 0.0;
        for i in 0..self.d {
            nb[i] += 1;
            if let Some(other) = spins.spin(&nb) {
                acc += dot(center, other);
            }
            nb[i] -= 1;
        }
        -self.j * acc
    }
    fn phi2_norm_bound(&self) -> f64 {
        4.0 * self.d as f64 * self.j.abs()
    }
    fn nearest_neighbour_coupling(&self) -> Option<f64> {
        Some(self.j)
    }
}

/// Nearest-neighbour potential with bound `4d|J|`; `J = 0` gives the zero potential.
pub fn builtin_nn_potential(j: f64, d: usize) -> Arc<dyn ShortRangePotential> {
    if j == 0.0 {
        Arc::new(ZeroPotential { d })
    } else {
        Arc::new(NearestNeighbour { j, d })
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Monte Carlo lower estimate of `‖Φ''‖`.
///
/// Each trial draws σ on `Λ_{r+1}` and unit weights `w` on `Λ_r`, then takes a
/// central second difference of `φ ↦ Φ(Π_z R_z^{φ w_z} σ)` at 0.
pub fn phi2_norm_probe<R: Rng + ?Sized>(potential: &dyn ShortRangePotential, n: usize, trials: usize, rng: &mut R) -> Result<f64> {
    if trials == 0 {
        return Err(invalid("phi2_norm_probe needs at least one trial"));
    }
    let d = potential.dim();
    let r = potential.range();
    let region = LatticeBox::new(d, r + 1).region();
    let inner = LatticeBox::new(d, r);
    let origin = vec![0i64; d];
    let h = 1e-3;
    let mut best: f64 = 0.0;
    for _ in 0..trials {
        let sigma = SpinConfig::random(region.clone(), n, rng)?;
        let weights: Vec<f64> = region
            .sites()
            .map(|x| if inner.contains(x.coords()) { rng.sample::<f64, _>(StandardNormal) } else { 0.0 })
            .collect();
        let norm = weights.iter().map(|w| w * w).sum::<f64>().sqrt();
        let g = |phi: f64| {
            let mut rotated = sigma.clone();
            for (idx, w) in weights.iter().enumerate() {
                if *w != 0.0 {
                    rotated.rotate_site(idx, phi * w / norm);
                }
            }
            potential.evaluate_at(&rotated, &origin)
        };
        let second = (g(h) - 2.0 * g(0.0) + g(-h)) / (h * h);
        if !second.is_finite() {
            return Err(Error::EstimationFailure("non-finite second difference".into()));
        }
        best = best.max(second.abs());
    }
    Ok(best)
}

/// `K₀(x) = |x|^{-s}` on `Z^d`, Euclidean norm.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LongRangeKernel {
    d: usize,
    s: f64,
}

impl LongRangeKernel {
    pub fn exponent(&self) -> f64 {
        self.s
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn k0(&self, x: &[i64]) -> f64 {
        power_law(x, self.s)
    }

    pub fn k0_norm_sq(&self, r2: i64) -> f64 {
        debug_assert!(r2 > 0);
        (r2 as f64).powf(-0.5 * self.s)
    }

    /// `K_{xy} = K₀(y − x)`.
    pub fn coupling(&self, x: &[i64], y: &[i64]) -> f64 {
        self.k0_norm_sq(crate::lattice::dist_sq(x, y))
    }

    /// `Σ_{x≠0} K₀(x)`.
    pub fn total_sum(&self) -> f64 {
        lattice_zeta(self.d, self.s)
    }

    /// `(liminf, limsup)` of `|x|^s K₀(x)`.
    pub fn asymptotic_bracket(&self) -> (f64, f64) {
        (1.0, 1.0)
    }
}

/// `|x|^{-s}` with the Euclidean norm.
pub fn power_law(x: &[i64], s: f64) -> f64 {
    (norm_sq(x) as f64).powf(-0.5 * s)
}

pub fn kernel_power_law(s: f64, d: usize) -> Result<LongRangeKernel> {
    if d == 0 {
        return Err(invalid("dimension must be positive"));
    }
    if !(s > d as f64) || !s.is_finite() {
        return Err(invalid(format!("kernel exponent must exceed d = {d} (non-summable otherwise), got s = {s}")));
    }
    Ok(LongRangeKernel { d, s })
}

/// `K₀` tabulated for every displacement inside a region.
#[derive(Clone, Debug)]
pub struct DisplacementTable {
    extents: Vec<usize>,
    strides: Vec<usize>,
    values: Vec<f64>,
}

impl DisplacementTable {
    pub fn new(kernel: &LongRangeKernel, region: &Region) -> Self {
        let extents = region.extents();
        let spans: Vec<usize> = extents.iter().map(|&e| 2 * e - 1).collect();
        let mut strides = Vec::with_capacity(spans.len());
        let mut s = 1;
        for &sp in &spans {
            strides.push(s);
            s *= sp;
        }
        let lo: Vec<i64> = extents.iter().map(|&e| -(e as i64 - 1)).collect();
        let hi: Vec<i64> = lo.iter().map(|l| -l).collect();
        let offsets = Region::new(lo, hi);
        let table = offsets.coordinate_table();
        let values = table
            .chunks_exact(extents.len())
            .map(|dx| if dx.iter().all(|&c| c == 0) { 0.0 } else { kernel.k0(dx) })
            .collect();
        DisplacementTable { extents, strides, values }
    }

    /// `K₀(x − y)` for two in-region coordinate vectors (0 when equal).
    #[inline]
    pub fn get(&self, x: &[i64], y: &[i64]) -> f64 {
        let mut idx = 0;
        for k in 0..x.len() {
            idx += (x[k] - y[k] + self.extents[k] as i64 - 1) as usize * self.strides[k];
        }
        self.values[idx]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Boundary {
    Free,
}

/// Model parameters.
#[derive(Clone, Debug)]
pub struct ModelSpec {
    pub d: usize,
    pub n: usize,
    pub s: f64,
    pub lambda: f64,
    pub beta: f64,
    pub potential: Arc<dyn ShortRangePotential>,
    pub kernel: LongRangeKernel,
    pub boundary: Boundary,
}

impl ModelSpec {
    pub fn new(d: usize, n: usize, s: f64, lambda: f64, beta: f64, potential: Arc<dyn ShortRangePotential>) -> Result<Self> {
        if n < 2 {
            return Err(invalid("spin dimension n must be at least 2"));
        }
        if lambda < 0.0 || beta < 0.0 || !lambda.is_finite() || !beta.is_finite() {
            return Err(invalid("lambda and beta must be finite and non-negative"));
        }
        if potential.dim() != d {
            return Err(invalid("potential dimension differs from d"));
        }
        let kernel = kernel_power_law(s, d)?;
        Ok(ModelSpec { d, n, s, lambda, beta, potential, kernel, boundary: Boundary::Free })
    }

    /// Zero or nearest-neighbour potential by name.
    pub fn with_named_potential(d: usize, n: usize, s: f64, lambda: f64, beta: f64, potential: &str, j: f64) -> Result<Self> {
        let pot: Arc<dyn ShortRangePotential> = match potential {
            "zero" => Arc::new(ZeroPotential { d }),
            "nn" => builtin_nn_potential(j, d),
            other => return Err(Error::Config(format!("unknown potential '{other}' (expected zero or nn)"))),
        };
        ModelSpec::new(d, n, s, lambda, beta, pot)
    }

    /// Reads `d, n, s, lambda, beta, J, potential` from a key/value map.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        fn get<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str, default: Option<T>) -> Result<T> {
            match map.get(key) {
                Some(v) => v.parse().map_err(|_| Error::Config(format!("cannot parse {key} = {v}"))),
                None => default.ok_or_else(|| Error::Config(format!("missing key {key}"))),
            }
        }
        let d: usize = get(map, "d", None)?;
        let n: usize = get(map, "n", Some(2))?;
        let s: f64 = get(map, "s", None)?;
        let lambda: f64 = get(map, "lambda", Some(1.0))?;
        let beta: f64 = get(map, "beta", Some(1.0))?;
        let j: f64 = get(map, "J", Some(0.0))?;
        let potential = map.get("potential").map(String::as_str).unwrap_or("zero");
        ModelSpec::with_named_potential(d, n, s, lambda, beta, potential, j).map_err(|e| match e {
            Error::InvalidParameter(m) => Error::Config(m),
            other => other,
        })
    }

    /// The model keys as `key = value` lines.
    pub fn to_config_string(&self) -> String {
        let j = self.potential.nearest_neighbour_coupling().unwrap_or(f64::NAN);
        format!(
            "d = {}\nn = {}\ns = {}\nlambda = {}\nbeta = {}\nJ = {}\npotential = {}\n",
            self.d,
            self.n,
            self.s,
            self.lambda,
            self.beta,
            j,
            self.potential.name()
        )
    }

    /// Non-fatal notes, e.g. `s` outside the regime `(d, d+2]`.
    pub fn warnings(&self) -> Vec<String> {
        let d = self.d as f64;
        let mut out = Vec::new();
        if self.s > d + 2.0 {
            out.push(format!("s = {} lies outside (d, d+2] = ({d}, {}]; exploratory run", self.s, d + 2.0));
        }
        out
    }
}

/// `H_N(σ)` with free boundary: spins outside the storage region are absent.
///
/// The long-range part runs over ordered pairs `x ≠ y` inside the region with
/// `{x, y} ∩ Λ_N ≠ ∅`, i.e. each unordered pair carries `K_{xy} + K_{yx}`.
pub fn hamiltonian(config: &SpinConfig, n_half: u64, spec: &ModelSpec) -> Result<f64> {
    check_dims(config, spec)?;
    Ok(short_range_energy(config, n_half, spec.potential.as_ref()) + spec.lambda * long_range_energy(config, n_half, &spec.kernel))
}

fn check_dims(config: &SpinConfig, spec: &ModelSpec) -> Result<()> {
    if config.dim() != spec.d || config.n() != spec.n {
        return Err(invalid("configuration does not match model dimensions"));
    }
    Ok(())
}

/// `Σ_{x ∈ Λ_{N+r}} Φ(τ_x σ)`, visiting only translates that touch the region.
pub fn short_range_energy(config: &SpinConfig, n_half: u64, potential: &dyn ShortRangePotential) -> f64 {
    let r = potential.range() as i64;
    let outer = (n_half as i64) + r;
    let region = config.region();
    let lo: Vec<i64> = region.lo().iter().map(|&l| (l - r).max(-outer)).collect();
    let hi: Vec<i64> = region.hi().iter().map(|&h| (h + r).min(outer)).collect();
    if lo.iter().zip(&hi).any(|(l, h)| l > h) {
        return 0.0;
    }
    let window = Region::new(lo, hi);
    let table = window.coordinate_table();
    let mut acc = PairwiseSum::new();
    for x in table.chunks_exact(window.dim()) {
        acc.add(potential.evaluate_at(config, x));
    }
    acc.total()
}

/// `Σ_{x≠y, {x,y}∩Λ_N≠∅} K_{xy} σ_x·σ_y` over region pairs.
pub fn long_range_energy(config: &SpinConfig, n_half: u64, kernel: &LongRangeKernel) -> f64 {
    let region = config.region();
    let d = region.dim();
    let table = region.coordinate_table();
    let kt = DisplacementTable::new(kernel, region);
    let inside: Vec<bool> = table.chunks_exact(d).map(|x| linf(x) <= n_half).collect();
    let count = region.len();
    par::sum_indexed(count, |i| {
        let xi = &table[i * d..(i + 1) * d];
        let si = config.get(i);
        let mut acc = PairwiseSum::new();
        for j in 0..count {
            if j == i || !(inside[i] || inside[j]) {
                continue;
            }
            acc.add(kt.get(xi, &table[j * d..(j + 1) * d]) * dot(si, config.get(j)));
        }
        acc.total()
    })
}

/// `H(σ with σ_x := new_spin) − H(σ)` for `H = H_N` with `N` the smallest
/// half-side whose box covers the region (every in-region pair interacts).
pub fn local_energy_delta(config: &SpinConfig, index: usize, new_spin: &[f64], spec: &ModelSpec) -> f64 {
    let kt = DisplacementTable::new(&spec.kernel, config.region());
    local_energy_delta_with(config, index, new_spin, spec, &kt)
}

/// [`local_energy_delta`] with a precomputed displacement table.
pub fn local_energy_delta_with(config: &SpinConfig, index: usize, new_spin: &[f64], spec: &ModelSpec, kt: &DisplacementTable) -> f64 {
    let region = config.region();
    let d = region.dim();
    let n = config.n();
    let old = config.get(index);
    let diff: Vec<f64> = new_spin.iter().zip(old).map(|(a, b)| a - b).collect();
    if diff.iter().all(|&v| v == 0.0) {
        return 0.0;
    }
    let mut x = vec![0i64; d];
    region.coords_into(index, &mut x);

    let mut long = 0.0;
    if spec.lambda != 0.0 {
        let mut y = vec![0i64; d];
        let values = config.values();
        for j in 0..region.len() {
            if j == index {
                continue;
            }
            region.coords_into(j, &mut y);
            let sy = &values[j * n..(j + 1) * n];
            long += kt.get(&x, &y) * dot(sy, &diff);
        }
        long *= 2.0 * spec.lambda;
    }

    let potential = spec.potential.as_ref();
    let mut short = 0.0;
    if potential.nearest_neighbour_coupling() != Some(0.0) {
        let r = potential.range() as i64;
        let after = Overridden { base: config, index, value: new_spin };
        let stencil = LatticeBox::new(d, r as u64);
        let mut z = vec![0i64; d];
        for offset in stencil.sites() {
            for k in 0..d {
                z[k] = x[k] + offset.coords()[k];
            }
            short += potential.evaluate_at(&after, &z) - potential.evaluate_at(config, &z);
        }
    }
    short + long
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Support {
    /// All of `Z^d` minus the origin.
    Full,
    /// `{x : x_k ≥ 0 for all k}` minus the origin.
    NonNegativeOrthant,
}

/// `|summand(x)| ≤ constant · |x|^{-exponent}` on the support.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Envelope {
    pub constant: f64,
    pub exponent: f64,
    pub support: Support,
}

/// Enclosure of an infinite lattice sum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TailCertificate {
    /// ℓ∞ cutoff of the explicit part; `None` when no truncation was made.
    pub r_cut: Option<u64>,
    pub partial_sum: f64,
    /// Rigorous bound on the absolute value of the discarded part.
    pub tail_bound: f64,
}

impl TailCertificate {
    pub fn exact(value: f64) -> Self {
        TailCertificate { r_cut: None, partial_sum: value, tail_bound: 0.0 }
    }

    pub fn upper(&self) -> f64 {
        self.partial_sum + self.tail_bound
    }
}

/// `Σ_{|x|_∞ > R} |x|^{-p}` over the support, bounded by counting ℓ∞ shells:
/// shell `k` holds at most `2d(2k+1)^{d−1}` points (full) or `d(k+1)^{d−1}`
/// (orthant), each with `|x| ≥ k`.
pub fn power_tail_bound(d: usize, exponent: f64, support: Support, r_cut: u64) -> f64 {
    assert!(exponent > d as f64);
    let k0 = r_cut as f64 + 1.0;
    let dm1 = (d - 1) as i32;
    let shell_factor = match support {
        Support::Full => 2.0 * d as f64 * 2f64.powi(dm1) * (1.0 + 0.5 / k0).powi(dm1),
        Support::NonNegativeOrthant => d as f64 * (1.0 + 1.0 / k0).powi(dm1),
    };
    shell_factor * hurwitz_zeta(exponent - (d - 1) as f64, k0)
}

/// Partial sum over `|x|_∞ ≤ R_cut` (origin excluded) plus a tail certificate.
pub fn truncated_lattice_sum(d: usize, summand: impl Fn(&[i64]) -> f64, envelope: Envelope, r_cut: u64) -> Result<(f64, TailCertificate)> {
    if !(envelope.exponent > d as f64) {
        return Err(invalid(format!("envelope exponent {} must exceed d = {d}", envelope.exponent)));
    }
    let r = r_cut as i64;
    let lo = match envelope.support {
        Support::Full => vec![-r; d],
        Support::NonNegativeOrthant => vec![0; d],
    };
    let region = Region::new(lo, vec![r; d]);
    let mut acc = PairwiseSum::new();
    let table = region.coordinate_table();
    for x in table.chunks_exact(d) {
        if x.iter().any(|&c| c != 0) {
            acc.add(summand(x));
        }
    }
    let partial = acc.total();
    let tail = envelope.constant.abs() * power_tail_bound(d, envelope.exponent, envelope.support, r_cut);
    Ok((partial, TailCertificate { r_cut: Some(r_cut), partial_sum: partial, tail_bound: tail }))
}
