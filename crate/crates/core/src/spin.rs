//! Spin configurations, the rotation family `R^θ`, deformation profiles and
//! the inhomogeneous rotations `R±`.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};
use crate::lattice::{linf, LatticeBox, Region, Site};

const RENORMALIZE_EVERY: usize = 1000;
const NORM_TOLERANCE: f64 = 1e-12;

/// Unit vectors in `R^n` on a storage region, stored densely in region order.
#[derive(Clone, Debug)]
pub struct SpinConfig {
    region: Region,
    n: usize,
    data: Vec<f64>,
    rotations: usize,
}

impl SpinConfig {
    /// Every spin set to the basis vector `ê_{axis+1}`.
    pub fn aligned(region: Region, n: usize, axis: usize) -> Result<Self> {
        check_n(n)?;
        if axis >= n {
            return Err(invalid(format!("axis {axis} out of range for n = {n}")));
        }
        let mut data = vec![0.0; region.len() * n];
        for chunk in data.chunks_exact_mut(n) {
            chunk[axis] = 1.0;
        }
        Ok(SpinConfig { region, n, data, rotations: 0 })
    }

    /// Independent uniform spins.
    pub fn random<R: Rng + ?Sized>(region: Region, n: usize, rng: &mut R) -> Result<Self> {
        check_n(n)?;
        let mut data = vec![0.0; region.len() * n];
        for chunk in data.chunks_exact_mut(n) {
            fill_unit_spin(rng, chunk);
        }
        Ok(SpinConfig { region, n, data, rotations: 0 })
    }

    /// Builds from raw components; each vector must be a unit vector.
    pub fn from_values(region: Region, n: usize, data: Vec<f64>) -> Result<Self> {
        check_n(n)?;
        if data.len() != region.len() * n {
            return Err(invalid("component count does not match region size"));
        }
        let cfg = SpinConfig { region, n, data, rotations: 0 };
        if !cfg.is_normalized(1e-9) {
            return Err(invalid("spins must be unit vectors"));
        }
        Ok(cfg)
    }

    pub fn region(&self) -> &Region {
        &self.region
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.region.dim()
    }

    pub fn len(&self) -> usize {
        self.region.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, index: usize) -> &[f64] {
        &self.data[index * self.n..(index + 1) * self.n]
    }

    pub fn spin_at(&self, x: &[i64]) -> Option<&[f64]> {
        self.region.index_of(x).map(|i| self.get(i))
    }

    /// Overwrites one spin; the new value is normalised.
    pub fn set(&mut self, index: usize, spin: &[f64]) {
        assert_eq!(spin.len(), self.n);
        let norm = spin.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (dst, src) in self.data[index * self.n..(index + 1) * self.n].iter_mut().zip(spin) {
            *dst = src / norm;
        }
    }

    /// Rotates one spin by `R^angle` in place.
    pub fn rotate_site(&mut self, index: usize, angle: f64) {
        let (s, c) = angle.sin_cos();
        let base = index * self.n;
        let (v1, v2) = (self.data[base], self.data[base + 1]);
        self.data[base] = c * v1 + s * v2;
        self.data[base + 1] = -s * v1 + c * v2;
        self.rotations += 1;
        if self.rotations >= RENORMALIZE_EVERY {
            self.rotations = 0;
            self.renormalize();
        }
    }

    /// Rescales any spin whose norm drifted by more than 1e-12.
    pub fn renormalize(&mut self) {
        for chunk in self.data.chunks_exact_mut(self.n) {
            let norm = chunk.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > NORM_TOLERANCE {
                chunk.iter_mut().for_each(|v| *v /= norm);
            }
        }
    }

    pub fn is_normalized(&self, tol: f64) -> bool {
        self.data.chunks_exact(self.n).all(|c| (c.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() <= tol)
    }

    /// Applies the same rotation in the `(i, j)` coordinate plane to every spin.
    pub fn rotate_globally(&mut self, i: usize, j: usize, angle: f64) {
        let (s, c) = angle.sin_cos();
        for chunk in self.data.chunks_exact_mut(self.n) {
            let (a, b) = (chunk[i], chunk[j]);
            chunk[i] = c * a + s * b;
            chunk[j] = -s * a + c * b;
        }
    }

    /// Writes the configuration as CSV with a `#`-prefixed header.
    pub fn write_csv<W: Write>(&self, mut out: W, seed: Option<u64>) -> Result<()> {
        let join = |v: &[i64]| v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
        writeln!(out, "# spinlab spin configuration v1")?;
        writeln!(out, "# d = {}", self.dim())?;
        writeln!(out, "# n = {}", self.n)?;
        writeln!(out, "# M = {}", self.region.circumscribed_half_side())?;
        writeln!(out, "# lo = {}", join(self.region.lo()))?;
        writeln!(out, "# hi = {}", join(self.region.hi()))?;
        match seed {
            Some(s) => writeln!(out, "# seed = {s}")?,
            None => writeln!(out, "# seed = none")?,
        }
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (0..self.dim()).map(|k| format!("x{k}")).collect();
        header.extend((0..self.n).map(|k| format!("s{k}")));
        w.write_record(&header)?;
        let mut coords = vec![0; self.dim()];
        for idx in 0..self.len() {
            self.region.coords_into(idx, &mut coords);
            let mut rec: Vec<String> = coords.iter().map(|c| c.to_string()).collect();
            rec.extend(self.get(idx).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the format written by [`SpinConfig::write_csv`].
    pub fn read_csv<R: BufRead>(input: R) -> Result<(Self, Option<u64>)> {
        let mut header = std::collections::BTreeMap::new();
        let mut body = String::new();
        for line in input.lines() {
            let line = line?;
            if let Some(rest) = line.strip_prefix('#') {
                if let Some((k, v)) = rest.split_once('=') {
                    header.insert(k.trim().to_string(), v.trim().to_string());
                }
            } else {
                body.push_str(&line);
                body.push('\n');
            }
        }
        let get = |k: &str| header.get(k).ok_or_else(|| Error::Snapshot(format!("missing header key {k}")));
        let parse_list = |v: &str| -> Result<Vec<i64>> {
            v.split(',').map(|c| c.trim().parse().map_err(|_| Error::Snapshot(format!("bad coordinate {c}")))).collect()
        };
        let d: usize = get("d")?.parse().map_err(|_| Error::Snapshot("bad d".into()))?;
        let n: usize = get("n")?.parse().map_err(|_| Error::Snapshot("bad n".into()))?;
        let lo = parse_list(get("lo")?)?;
        let hi = parse_list(get("hi")?)?;
        if lo.len() != d || hi.len() != d {
            return Err(Error::Snapshot("region does not match d".into()));
        }
        let seed = match get("seed")?.as_str() {
            "none" => None,
            s => Some(s.parse().map_err(|_| Error::Snapshot("bad seed".into()))?),
        };
        let region = Region::new(lo, hi);
        let mut data = vec![f64::NAN; region.len() * n];
        let mut reader = csv::Reader::from_reader(body.as_bytes());
        let mut seen = 0;
        for rec in reader.records() {
            let rec = rec?;
            if rec.len() != d + n {
                return Err(Error::Snapshot("wrong column count".into()));
            }
            let coords: Vec<i64> = (0..d)
                .map(|k| rec[k].parse().map_err(|_| Error::Snapshot("bad coordinate".into())))
                .collect::<Result<_>>()?;
            let idx = region.index_of(&coords).ok_or_else(|| Error::Snapshot("site outside region".into()))?;
            for k in 0..n {
                data[idx * n + k] = rec[d + k].parse().map_err(|_| Error::Snapshot("bad component".into()))?;
            }
            seen += 1;
        }
        if seen != region.len() {
            return Err(Error::Snapshot(format!("expected {} sites, found {seen}", region.len())));
        }
        Ok((SpinConfig::from_values(region, n, data)?, seed))
    }
}

impl PartialEq for SpinConfig {
    fn eq(&self, other: &Self) -> bool {
        self.region == other.region && self.n == other.n && self.data == other.data
    }
}

fn check_n(n: usize) -> Result<()> {
    if n < 2 {
        return Err(invalid(format!("spin dimension must be at least 2, got {n}")));
    }
    Ok(())
}

fn fill_unit_spin<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    loop {
        let mut norm_sq = 0.0;
        for v in out.iter_mut() {
            *v = rng.sample(StandardNormal);
            norm_sq += *v * *v;
        }
        if norm_sq > 1e-300 {
            let norm = norm_sq.sqrt();
            out.iter_mut().for_each(|v| *v /= norm);
            return;
        }
    }
}

/// A sphere-uniform unit vector from normalised Gaussians.
pub fn random_unit_spin<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    assert!(n >= 2, "spin dimension must be at least 2");
    let mut v = vec![0.0; n];
    fill_unit_spin(rng, &mut v);
    v
}

/// Projection onto the span of `ê₁, ê₂`.
pub fn p12_project(v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    out[..2].copy_from_slice(&v[..2]);
    out
}

/// The rotation `R^θ`: a 2×2 block on components 1 and 2, identity elsewhere.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotationFamily {
    pub n: usize,
    pub angle: f64,
}

impl RotationFamily {
    pub fn new(n: usize, angle: f64) -> Self {
        RotationFamily { n, angle }
    }

    /// Dense `n × n` matrix, row major.
    pub fn matrix(&self) -> Vec<Vec<f64>> {
        let (s, c) = self.angle.sin_cos();
        let mut m = vec![vec![0.0; self.n]; self.n];
        for (k, row) in m.iter_mut().enumerate() {
            row[k] = 1.0;
        }
        m[0][0] = c;
        m[0][1] = s;
        m[1][0] = -s;
        m[1][1] = c;
        m
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let (s, c) = self.angle.sin_cos();
        let mut out = v.to_vec();
        out[0] = c * v[0] + s * v[1];
        out[1] = -s * v[0] + c * v[1];
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Plus,
    Minus,
}

impl Branch {
    pub fn sign(self) -> f64 {
        match self {
            Branch::Plus => 1.0,
            Branch::Minus => -1.0,
        }
    }
}

/// Angle field `θ_x`: π on `Λ_{L−a}`, linear in the ℓ∞ shell across the
/// annulus, 0 outside `Λ_L`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeformationProfile {
    pub d: usize,
    pub l: u64,
    pub a: u64,
}

impl DeformationProfile {
    pub fn new(d: usize, l: u64, a: u64) -> Result<Self> {
        if d == 0 {
            return Err(invalid("dimension must be positive"));
        }
        if !(a >= 1 && l > a) {
            return Err(invalid(format!("profile needs L > a ≥ 1, got L = {l}, a = {a}")));
        }
        Ok(DeformationProfile { d, l, a })
    }

    /// θ as a function of the shell index `k = |x|_∞`.
    pub fn theta_shell(&self, k: u64) -> f64 {
        if k + self.a <= self.l {
            PI
        } else if k > self.l {
            0.0
        } else {
            PI * (self.l + 1 - k) as f64 / self.a as f64
        }
    }

    pub fn theta(&self, x: &Site) -> f64 {
        self.theta_shell(x.linf())
    }

    pub fn theta_coords(&self, x: &[i64]) -> f64 {
        self.theta_shell(linf(x))
    }

    /// θ at every site of a region, in index order.
    pub fn theta_field(&self, region: &Region) -> Vec<f64> {
        let table = region.coordinate_table();
        table.chunks_exact(region.dim()).map(|x| self.theta_coords(x)).collect()
    }

    pub fn outer_box(&self) -> LatticeBox {
        LatticeBox::new(self.d, self.l)
    }

    pub fn inner_box(&self) -> LatticeBox {
        LatticeBox::new(self.d, self.l - self.a)
    }
}

/// `(R±σ)_x = R^{±θ_x} σ_x`.
pub fn apply_inhomogeneous_rotation(config: &SpinConfig, profile: &DeformationProfile, branch: Branch) -> Result<SpinConfig> {
    if config.dim() != profile.d {
        return Err(invalid("profile and configuration dimensions differ"));
    }
    if !config.region().contains_box(&profile.outer_box()) {
        return Err(Error::BoxTooSmall { required: profile.l, context: "inhomogeneous rotation".into() });
    }
    let mut out = config.clone();
    let thetas = profile.theta_field(config.region());
    let sign = branch.sign();
    for (idx, theta) in thetas.into_iter().enumerate() {
        if theta != 0.0 {
            out.rotate_site(idx, sign * theta);
        }
    }
    Ok(out)
}
