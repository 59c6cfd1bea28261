//! Geometry of `Z^d`: boxes `Λ_N`, cuboid storage regions, the ℓ∞ shell
//! structure and the wedge map `T_x`.

use crate::error::{invalid, Result};

/// A point of `Z^d`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Site(pub Vec<i64>);

impl Site {
    pub fn new(coords: impl Into<Vec<i64>>) -> Self {
        Site(coords.into())
    }

    pub fn origin(d: usize) -> Self {
        Site(vec![0; d])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn coords(&self) -> &[i64] {
        &self.0
    }

    pub fn linf(&self) -> u64 {
        linf(&self.0)
    }

    pub fn norm_sq(&self) -> i64 {
        norm_sq(&self.0)
    }

    pub fn norm(&self) -> f64 {
        (self.norm_sq() as f64).sqrt()
    }

    pub fn is_origin(&self) -> bool {
        self.0.iter().all(|&c| c == 0)
    }
}

pub fn linf(x: &[i64]) -> u64 {
    x.iter().map(|c| c.unsigned_abs()).max().unwrap_or(0)
}

pub fn norm_sq(x: &[i64]) -> i64 {
    x.iter().map(|c| c * c).sum()
}

pub fn dist_sq(x: &[i64], y: &[i64]) -> i64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// The box `Λ_N = [−N, N]^d ∩ Z^d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LatticeBox {
    pub d: usize,
    pub n: u64,
}

impl LatticeBox {
    pub fn new(d: usize, n: u64) -> Self {
        assert!(d >= 1, "dimension must be positive");
        LatticeBox { d, n }
    }

    pub fn side(&self) -> usize {
        2 * self.n as usize + 1
    }

    pub fn site_count(&self) -> usize {
        self.side().pow(self.d as u32)
    }

    pub fn contains(&self, x: &[i64]) -> bool {
        x.len() == self.d && linf(x) <= self.n
    }

    pub fn region(&self) -> Region {
        let n = self.n as i64;
        Region::new(vec![-n; self.d], vec![n; self.d])
    }

    pub fn sites(&self) -> SiteIter {
        self.region().sites()
    }
}

/// Cuboid `[lo_1, hi_1] × … × [lo_d, hi_d]` used as spin storage.
/// Linear indices run row-major with coordinate 0 fastest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Region {
    lo: Vec<i64>,
    hi: Vec<i64>,
    strides: Vec<usize>,
}

impl Region {
    pub fn new(lo: Vec<i64>, hi: Vec<i64>) -> Self {
        assert_eq!(lo.len(), hi.len());
        assert!(!lo.is_empty(), "dimension must be positive");
        assert!(lo.iter().zip(&hi).all(|(l, h)| l <= h), "empty region");
        let mut strides = Vec::with_capacity(lo.len());
        let mut s = 1usize;
        for (l, h) in lo.iter().zip(&hi) {
            strides.push(s);
            s *= (h - l + 1) as usize;
        }
        Region { lo, hi, strides }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[i64] {
        &self.lo
    }

    pub fn hi(&self) -> &[i64] {
        &self.hi
    }

    pub fn extents(&self) -> Vec<usize> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| (h - l + 1) as usize).collect()
    }

    pub fn len(&self) -> usize {
        self.extents().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, x: &[i64]) -> bool {
        x.len() == self.dim() && x.iter().zip(&self.lo).zip(&self.hi).all(|((c, l), h)| l <= c && c <= h)
    }

    pub fn contains_box(&self, b: &LatticeBox) -> bool {
        let n = b.n as i64;
        b.d == self.dim() && self.lo.iter().all(|&l| l <= -n) && self.hi.iter().all(|&h| h >= n)
    }

    /// Largest `N` with `Λ_N` inside the region, if the origin is inside.
    pub fn inscribed_half_side(&self) -> Option<u64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(&l, &h)| if l <= 0 && h >= 0 { Some((-l).min(h) as u64) } else { None })
            .try_fold(u64::MAX, |acc, v| v.map(|v| acc.min(v)))
    }

    /// `max_k max(|lo_k|, |hi_k|)`: the smallest `N` with the region inside `Λ_N`.
    pub fn circumscribed_half_side(&self) -> u64 {
        self.lo.iter().chain(&self.hi).map(|c| c.unsigned_abs()).max().unwrap_or(0)
    }

    pub fn index_of(&self, x: &[i64]) -> Option<usize> {
        if !self.contains(x) {
            return None;
        }
        Some(x.iter().zip(&self.lo).zip(&self.strides).map(|((c, l), s)| (c - l) as usize * s).sum())
    }

    pub fn coords_into(&self, mut index: usize, out: &mut [i64]) {
        let ext = self.extents();
        for (k, e) in ext.iter().enumerate() {
            out[k] = self.lo[k] + (index % e) as i64;
            index /= e;
        }
    }

    pub fn site_at(&self, index: usize) -> Site {
        let mut c = vec![0; self.dim()];
        self.coords_into(index, &mut c);
        Site(c)
    }

    /// All coordinates in index order, flattened (`d` entries per site).
    pub fn coordinate_table(&self) -> Vec<i64> {
        let d = self.dim();
        let mut table = Vec::with_capacity(self.len() * d);
        let mut cur = self.lo.clone();
        for _ in 0..self.len() {
            table.extend_from_slice(&cur);
            advance(&mut cur, &self.lo, &self.hi);
        }
        table
    }

    pub fn sites(&self) -> SiteIter {
        SiteIter { lo: self.lo.clone(), hi: self.hi.clone(), cur: Some(self.lo.clone()) }
    }
}

fn advance(cur: &mut [i64], lo: &[i64], hi: &[i64]) -> bool {
    for k in 0..cur.len() {
        if cur[k] < hi[k] {
            cur[k] += 1;
            return true;
        }
        cur[k] = lo[k];
    }
    false
}

pub struct SiteIter {
    lo: Vec<i64>,
    hi: Vec<i64>,
    cur: Option<Vec<i64>>,
}

impl Iterator for SiteIter {
    type Item = Site;

    fn next(&mut self) -> Option<Site> {
        let cur = self.cur.as_mut()?;
        let out = Site(cur.clone());
        if !advance(cur, &self.lo, &self.hi) {
            self.cur = None;
        }
        Some(out)
    }
}

/// `dist(x, Λ_L^c)` in the ℓ∞ metric: `(L+1) − |x|_∞` inside the box, 0 outside.
pub fn linf_dist_to_complement(x: &Site, l: u64) -> u64 {
    let k = x.linf();
    if k > l {
        0
    } else {
        l + 1 - k
    }
}

fn sign(v: i64) -> i64 {
    if v < 0 {
        -1
    } else {
        1
    }
}

fn argmax_abs(v: &[i64]) -> usize {
    let mut best = 0;
    for (k, c) in v.iter().enumerate() {
        if c.abs() > v[best].abs() {
            best = k;
        }
    }
    best
}

/// The wedge map `T_x(y)`, with `sign(0) = +1`.
///
/// In the `i ≠ j` branch the second coordinate is `sign(y_j)|y_i|`. This is
/// the form that commutes with the reflection `x_i ↦ −x_i`; writing it as
/// `sign(x_i y_j)|y_i|` agrees only when `x_i > 0` and is not contracting
/// otherwise (e.g. `x = (−5, 1)`, `y = (−8, 9)`).
pub fn wedge_map(x: &Site, y: &Site) -> Result<Site> {
    if x.dim() != y.dim() {
        return Err(invalid("wedge_map: dimension mismatch"));
    }
    if x.is_origin() {
        return Err(invalid("wedge_map is undefined for x = 0"));
    }
    Ok(Site(wedge_map_raw(&x.0, &y.0)))
}

/// Unchecked form of [`wedge_map`] on raw coordinates.
pub fn wedge_map_raw(x: &[i64], y: &[i64]) -> Vec<i64> {
    let mut out = vec![0; y.len()];
    wedge_map_into(x, y, &mut out);
    out
}

/// [`wedge_map_raw`] writing into `out`.
pub fn wedge_map_into(x: &[i64], y: &[i64], out: &mut [i64]) {
    let i = argmax_abs(x);
    let j = argmax_abs(y);
    let sx = sign(x[i]);
    out.copy_from_slice(y);
    if i == j {
        out[i] = sx * y[i].abs();
    } else {
        out[i] = sx * y[j].abs();
        out[j] = sign(y[j]) * y[i].abs();
    }
}

/// Whether `z` lies in the wedge `{|z_i| = max_k |z_k|, sign(z_i) = sign(x_i)}`.
pub fn in_wedge(x: &[i64], z: &[i64]) -> bool {
    let i = argmax_abs(x);
    z[i].unsigned_abs() == linf(z) && (z[i] == 0 || sign(z[i]) == sign(x[i]))
}

/// Each wedge point has at most `2d` preimages under `T_x`.
pub fn preimage_multiplicity_bound(d: usize) -> usize {
    2 * d
}
