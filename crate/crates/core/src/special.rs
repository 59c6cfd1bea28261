//! Special functions behind the lattice sums: Hurwitz zeta, incomplete
//! gamma, the lattice constant `Z_d(s) = Σ_{h≠0} |h|^{-s}` and slab sums
//! `Σ_{z∈Z^k} (m² + |z|²)^{-s/2}`.
//!
//! The lattice sums use the theta-function split of the Mellin integral at
//! `t = 1`. Both halves converge like `exp(-π|h|²)`, so a handful of shells
//! reach machine precision.

use std::f64::consts::PI;

use statrs::function::gamma::{gamma, gamma_li, gamma_ui};

/// `B_{2j} / (2j)!` for j = 1..=9.
const BERNOULLI_OVER_FACTORIAL: [f64; 9] = [
    1.0 / 12.0,
    -1.0 / 720.0,
    1.0 / 30240.0,
    -1.0 / 1209600.0,
    1.0 / 47900160.0,
    -691.0 / 1307674368000.0,
    1.0 / 74724249600.0,
    -3617.0 / 10670622842880000.0,
    43867.0 / 5109094217170944000.0,
];

/// Hurwitz zeta `ζ(s, q) = Σ_{k≥0} (q+k)^{-s}` for `s > 1`, `q > 0`,
/// by Euler–Maclaurin after shifting `q` past 16.
pub fn hurwitz_zeta(s: f64, q: f64) -> f64 {
    assert!(s > 1.0, "hurwitz_zeta needs s > 1, got {s}");
    assert!(q > 0.0, "hurwitz_zeta needs q > 0, got {q}");
    let shift = if q < 16.0 { (16.0 - q).ceil() as usize } else { 0 };
    let mut head = 0.0;
    for k in 0..shift {
        head += (q + k as f64).powf(-s);
    }
    let w = q + shift as f64;
    let mut tail = w.powf(1.0 - s) / (s - 1.0) + 0.5 * w.powf(-s);
    // rising product s(s+1)...(s+2j-2) * w^{-s-2j+1}
    let mut factor = s * w.powf(-s - 1.0);
    let w2 = w * w;
    for (j, coeff) in BERNOULLI_OVER_FACTORIAL.iter().enumerate() {
        if j > 0 {
            let jj = (j + 1) as f64;
            factor *= (s + 2.0 * jj - 3.0) * (s + 2.0 * jj - 2.0) / w2;
        }
        let term = coeff * factor;
        tail += term;
        if term.abs() < 1e-18 * tail.abs() {
            break;
        }
    }
    head + tail
}

/// Riemann zeta for real `s > 1`.
pub fn riemann_zeta(s: f64) -> f64 {
    hurwitz_zeta(s, 1.0)
}

/// Exponential integral `E_1(x)` for `x > 0`.
pub fn exp_integral_e1(x: f64) -> f64 {
    assert!(x > 0.0);
    if x < 1.0 {
        // power series: -γ - ln x + Σ (-1)^{k+1} x^k / (k k!)
        const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
        let mut sum = 0.0;
        let mut term = 1.0;
        for k in 1..200 {
            term *= -x / k as f64;
            let add = -term / k as f64;
            sum += add;
            if add.abs() < 1e-17 * sum.abs() {
                break;
            }
        }
        return -EULER_GAMMA - x.ln() + sum;
    }
    // modified Lentz on the continued fraction for E_1
    let tiny = 1e-300;
    let mut b = x + 1.0;
    let mut c = 1.0 / tiny;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..1000 {
        let an = -((i * i) as f64);
        b += 2.0;
        d = 1.0 / (an * d + b);
        c = b + an / c;
        let del = c * d;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h * (-x).exp()
}

/// Upper incomplete gamma `Γ(a, x)` for real `a` (any sign) and `x > 0`.
pub fn upper_incomplete_gamma(a: f64, x: f64) -> f64 {
    assert!(x > 0.0);
    if a > 0.0 {
        return gamma_ui(a, x);
    }
    // step up to a positive order (or to exactly zero), then recur down with
    // Γ(b-1, x) = (Γ(b, x) - x^{b-1} e^{-x}) / (b-1)
    let steps = (-a).floor() as i64 + 1;
    let top = a + steps as f64;
    let (mut b, mut value) = if (top - 1.0).abs() < 1e-14 && (a - a.round()).abs() < 1e-14 {
        // a is a non-positive integer: anchor at Γ(0, x) = E_1(x)
        (0.0, exp_integral_e1(x))
    } else {
        (top, gamma_ui(top, x))
    };
    while b > a + 0.5 {
        let lower = b - 1.0;
        value = (value - x.powf(lower) * (-x).exp()) / lower;
        b = lower;
    }
    value
}

/// Visits every nonzero integer vector with `|h|_∞ ≤ radius` in `dim`
/// dimensions, grouped by squared norm: calls `f(|h|², multiplicity)`.
pub(crate) fn for_each_norm_class(dim: usize, radius: i64, mut f: impl FnMut(i64, f64)) {
    let max_r2 = dim as i64 * radius * radius;
    let mut counts = vec![0u64; (max_r2 + 1) as usize];
    let side = (2 * radius + 1) as usize;
    let total = side.pow(dim as u32);
    let mut coords = vec![-radius; dim];
    for _ in 0..total {
        let r2: i64 = coords.iter().map(|c| c * c).sum();
        counts[r2 as usize] += 1;
        for c in coords.iter_mut() {
            *c += 1;
            if *c > radius {
                *c = -radius;
            } else {
                break;
            }
        }
    }
    for (r2, &count) in counts.iter().enumerate().skip(1) {
        if count > 0 {
            f(r2 as i64, count as f64);
        }
    }
}

/// `Z_d(s) = Σ_{h ∈ Z^d, h ≠ 0} |h|^{-s}` for `s > d`.
///
/// `Z_1(s) = 2ζ(s)`, `Z_2(s) = 4ζ(s/2)β(s/2)`; higher dimensions have no
/// elementary closed form, so every dimension goes through the same split.
pub fn lattice_zeta(dim: usize, s: f64) -> f64 {
    assert!(dim >= 1);
    assert!(s > dim as f64, "lattice_zeta needs s > d");
    let d = dim as f64;
    let half_s = 0.5 * s;
    let dual = 0.5 * (d - s);
    let mut direct = 0.0;
    let mut reciprocal = 0.0;
    // exp(-π·r²) < 1e-30 beyond r² = 22
    let radius = 5;
    for_each_norm_class(dim, radius, |r2, mult| {
        let x = PI * r2 as f64;
        if x > 80.0 {
            return;
        }
        direct += mult * upper_incomplete_gamma(half_s, x) * x.powf(-half_s);
        reciprocal += mult * upper_incomplete_gamma(dual, x) * x.powf(-dual);
    });
    let bracket = direct + reciprocal + 2.0 / (s - d) - 2.0 / s;
    PI.powf(half_s) / gamma(half_s) * bracket
}

/// Nodes and weights of the n-point Gauss–Legendre rule on [-1, 1].
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let mut p1 = 1.0;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                p1 = ((2 * j + 1) as f64 * z * p2 - j as f64 * p3) / (j + 1) as f64;
            }
            dp = n as f64 * (z * p1 - p2) / (z * z - 1.0);
            let z1 = z;
            z = z1 - p1 / dp;
            if (z - z1).abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = -z;
        nodes[n - 1 - i] = z;
        let w = 2.0 / ((1.0 - z * z) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// `∫_0^1 t^{ν-1} exp(-α t - β/t) dt` with `β > 0` (integrand flat at 0).
fn mellin_bessel_piece(nu: f64, alpha: f64, beta: f64) -> f64 {
    let (nodes, weights) = gauss_legendre(20);
    let panels = 64;
    let width = 1.0 / panels as f64;
    let mut acc = 0.0;
    for p in 0..panels {
        let lo = p as f64 * width;
        for (x, w) in nodes.iter().zip(&weights) {
            let t = lo + 0.5 * width * (x + 1.0);
            acc += w * t.powf(nu - 1.0) * (-alpha * t - beta / t).exp();
        }
    }
    acc * 0.5 * width
}

/// Slab sum `Σ_{z ∈ Z^k} (m² + |z|²)^{-s/2}` for `k ≥ 1`, `m > 0`, `s > k`.
///
/// For large `m` this approaches `π^{k/2} Γ((s-k)/2)/Γ(s/2) · m^{k-s}` with
/// an `exp(-2πm)` correction.
pub fn slab_sum(k: usize, s: f64, m: f64) -> f64 {
    assert!(k >= 1 && s > k as f64 && m > 0.0);
    let half_s = 0.5 * s;
    let nu = 0.5 * (s - k as f64);
    let m2 = m * m;
    let xm = PI * m2;

    // direct part: Σ_z Γ(s/2, π(m²+|z|²)) (π(m²+|z|²))^{-s/2}
    let mut direct = 0.0;
    if xm < 80.0 {
        let radius = (((80.0 / PI) - m2).max(0.0)).sqrt().ceil() as i64;
        let x0 = xm;
        direct += upper_incomplete_gamma(half_s, x0) * x0.powf(-half_s);
        if radius > 0 {
            for_each_norm_class(k, radius, |r2, mult| {
                let x = PI * (m2 + r2 as f64);
                if x <= 80.0 {
                    direct += mult * upper_incomplete_gamma(half_s, x) * x.powf(-half_s);
                }
            });
        }
    }

    // dual zero mode: (πm²)^{-ν} γ(ν, πm²)
    let zero_mode = xm.powf(-nu) * gamma_li(nu, xm);

    // dual nonzero modes, each bounded by exp(-2π m |q|)/ν
    let mut dual = 0.0;
    let scale = zero_mode.abs().max(1e-300);
    let q_radius = ((45.0 / (2.0 * PI * m)).ceil() as i64).max(1);
    for_each_norm_class(k, q_radius, |q2, mult| {
        let bound = (-2.0 * PI * m * (q2 as f64).sqrt()).exp() / nu;
        if bound * mult < 1e-19 * scale {
            return;
        }
        dual += mult * mellin_bessel_piece(nu, xm, PI * q2 as f64);
    });

    PI.powf(half_s) / gamma(half_s) * (direct + zero_mode + dual)
}

/// Leading coefficient `c` in `slab_sum(k, s, m) ≈ c m^{k-s}`.
pub fn slab_asymptotic_coefficient(k: usize, s: f64) -> f64 {
    let k = k as f64;
    PI.powf(0.5 * k) * gamma(0.5 * (s - k)) / gamma(0.5 * s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn zeta_known_values() {
        assert_relative_eq!(riemann_zeta(2.0), PI * PI / 6.0, max_relative = 1e-14);
        assert_relative_eq!(riemann_zeta(4.0), PI.powi(4) / 90.0, max_relative = 1e-14);
        assert_relative_eq!(riemann_zeta(1.5), 2.612_375_348_685_488, max_relative = 1e-13);
        // ζ(s, q+1) = ζ(s, q) - q^{-s}
        let a = hurwitz_zeta(2.5, 3.3);
        let b = hurwitz_zeta(2.5, 4.3);
        assert_relative_eq!(a - 3.3f64.powf(-2.5), b, max_relative = 1e-14);
    }

    #[test]
    fn e1_matches_series_and_fraction_at_seam() {
        // E1(1) = 0.219383934395520...
        assert_relative_eq!(exp_integral_e1(1.0), 0.219_383_934_395_520_3, max_relative = 1e-13);
        assert_relative_eq!(exp_integral_e1(0.5), 0.559_773_594_776_160_8, max_relative = 1e-13);
        assert_relative_eq!(exp_integral_e1(5.0), 0.001_148_295_591_275_325_9, max_relative = 1e-12);
    }

    #[test]
    fn incomplete_gamma_negative_orders_satisfy_recurrence() {
        for &x in &[PI, 5.0, 12.0] {
            for &a in &[-0.25, -0.5, -1.0, -1.5, 0.0] {
                let lhs = upper_incomplete_gamma(a + 1.0, x);
                let rhs = a * upper_incomplete_gamma(a, x) + x.powf(a) * (-x).exp();
                assert_relative_eq!(lhs, rhs, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn lattice_zeta_one_dimension() {
        for &s in &[1.25, 1.5, 2.0, 2.5, 3.0, 4.0] {
            assert_relative_eq!(lattice_zeta(1, s), 2.0 * riemann_zeta(s), max_relative = 1e-12);
        }
    }

    #[test]
    fn lattice_zeta_two_dimensions_matches_dirichlet_product() {
        let beta = |x: f64| 4f64.powf(-x) * (hurwitz_zeta(x, 0.25) - hurwitz_zeta(x, 0.75));
        for &s in &[2.5, 3.0, 3.5, 4.0, 6.0] {
            let closed = 4.0 * riemann_zeta(0.5 * s) * beta(0.5 * s);
            assert_relative_eq!(lattice_zeta(2, s), closed, max_relative = 1e-11);
        }
        // Catalan's constant check at s = 4
        let catalan = 0.915_965_594_177_219_0;
        assert_relative_eq!(lattice_zeta(2, 4.0), 4.0 * PI * PI / 6.0 * catalan, max_relative = 1e-12);
    }

    #[test]
    fn slab_sum_one_dimensional_bracket() {
        // brute force with a Hurwitz bracket on the discarded tail
        for &s in &[2.5, 3.0, 3.5, 4.0] {
            for &m in &[1.0, 2.0, 3.0, 7.0, 20.0] {
                let cut = 20_000i64;
                let mut partial = 0.0;
                for z in -cut..=cut {
                    partial += (m * m + (z * z) as f64).powf(-0.5 * s);
                }
                let lo = partial + 2.0 * hurwitz_zeta(s, cut as f64 + 1.0 + m);
                let hi = partial + 2.0 * hurwitz_zeta(s, cut as f64 + 1.0);
                let v = slab_sum(1, s, m);
                assert!(v >= lo * (1.0 - 1e-12) && v <= hi * (1.0 + 1e-12), "s={s} m={m}: {v} not in [{lo}, {hi}]");
            }
        }
    }

    #[test]
    fn slab_sum_two_dimensional_against_truncation() {
        let s = 4.0;
        for &m in &[1.0, 2.0, 5.0] {
            let cut = 600i64;
            let mut partial = 0.0;
            for a in -cut..=cut {
                for b in -cut..=cut {
                    partial += (m * m + (a * a + b * b) as f64).powf(-0.5 * s);
                }
            }
            // tail outside the square is ≤ Σ_{|z|_∞>cut} |z|^{-4} ≤ 8 ζ(3, cut+1) (1 + 1/(2cut))
            let tail = 8.0 * hurwitz_zeta(s - 1.0, cut as f64 + 1.0) * (1.0 + 0.5 / cut as f64);
            let v = slab_sum(2, s, m);
            assert!(v >= partial * (1.0 - 1e-12) && v <= partial + tail, "m={m}: {v} vs {partial}+{tail}");
        }
    }

    #[test]
    fn slab_sum_approaches_asymptote() {
        for &(k, s) in &[(1usize, 2.5f64), (1, 3.0), (2, 3.5)] {
            let c = slab_asymptotic_coefficient(k, s);
            let m = 12.0;
            assert_relative_eq!(slab_sum(k, s, m), c * m.powf(k as f64 - s), max_relative = 1e-12);
        }
    }
}
