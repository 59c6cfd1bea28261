//! Multidimensional complex FFTs on zero-padded grids and the kernel
//! correlations built on them.
//!
//! Arrays are row-major with axis 0 fastest, matching [`crate::lattice::Region`].

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Smallest `2^a 3^b 5^c` that is at least `min`.
pub fn smooth_size(min: usize) -> usize {
    let mut n = min.max(1);
    loop {
        let mut m = n;
        for p in [2, 3, 5] {
            while m % p == 0 {
                m /= p;
            }
        }
        if m == 1 {
            return n;
        }
        n += 1;
    }
}

/// Forward FFT plan over an n-dimensional grid.
pub struct GridFft {
    shape: Vec<usize>,
    plans: Vec<Arc<dyn Fft<f64>>>,
    scratch: Vec<Complex64>,
    lines: Vec<Complex64>,
}

impl GridFft {
    pub fn new(shape: &[usize]) -> Self {
        let mut planner = FftPlanner::new();
        let plans: Vec<_> = shape.iter().map(|&n| planner.plan_fft_forward(n)).collect();
        let scratch_len = plans.iter().map(|p| p.get_inplace_scratch_len()).max().unwrap_or(0);
        Self {
            shape: shape.to_vec(),
            plans,
            scratch: vec![Complex64::new(0.0, 0.0); scratch_len],
            lines: Vec::new(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// In-place unnormalised forward transform.
    pub fn forward(&mut self, data: &mut [Complex64]) {
        assert_eq!(data.len(), self.len());
        let mut stride = 1;
        for axis in 0..self.shape.len() {
            let n = self.shape[axis];
            let plan = self.plans[axis].clone();
            if axis == 0 {
                plan.process_with_scratch(data, &mut self.scratch);
            } else {
                let block = stride * n;
                self.lines.resize(block, Complex64::new(0.0, 0.0));
                for outer in data.chunks_exact_mut(block) {
                    for inner in 0..stride {
                        for j in 0..n {
                            self.lines[inner * n + j] = outer[inner + j * stride];
                        }
                    }
                    plan.process_with_scratch(&mut self.lines, &mut self.scratch);
                    for inner in 0..stride {
                        for j in 0..n {
                            outer[inner + j * stride] = self.lines[inner * n + j];
                        }
                    }
                }
            }
            stride *= n;
        }
    }
}

/// Spectrum of a real even pair kernel on a padded grid.
///
/// For fields supported on a region with extents `e_i` and a grid with
/// `P_i ≥ 2e_i − 1`, circular correlation equals linear correlation, so
/// `Σ_{x≠y} K(x−y) f(x) g(y) = P⁻¹ Σ_k K̂(k) F(k) conj(G(k))`.
pub struct KernelSpectrum {
    extents: Vec<usize>,
    shape: Vec<usize>,
    khat: Vec<f64>,
}

impl KernelSpectrum {
    /// `kernel` receives a nonzero displacement and returns `K(δ)`.
    pub fn new(extents: &[usize], kernel: impl Fn(&[i64]) -> f64) -> Self {
        let shape: Vec<usize> = extents.iter().map(|&e| smooth_size(2 * e.max(1) - 1)).collect();
        let len: usize = shape.iter().product();
        let mut grid = vec![Complex64::new(0.0, 0.0); len];
        let d = extents.len();
        let mut offset = vec![0i64; d];
        let bounds: Vec<i64> = extents.iter().map(|&e| e as i64 - 1).collect();
        for (i, o) in offset.iter_mut().enumerate() {
            *o = -bounds[i];
        }
        loop {
            if offset.iter().any(|&c| c != 0) {
                let mut idx = 0usize;
                let mut stride = 1usize;
                for i in 0..d {
                    let p = shape[i] as i64;
                    idx += (offset[i].rem_euclid(p) as usize) * stride;
                    stride *= shape[i];
                }
                grid[idx].re = kernel(&offset);
            }
            let mut axis = 0;
            loop {
                if axis == d {
                    let mut fft = GridFft::new(&shape);
                    fft.forward(&mut grid);
                    let khat = grid.iter().map(|c| c.re).collect();
                    return Self { extents: extents.to_vec(), shape, khat };
                }
                offset[axis] += 1;
                if offset[axis] > bounds[axis] {
                    offset[axis] = -bounds[axis];
                    axis += 1;
                } else {
                    break;
                }
            }
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn extents(&self) -> &[usize] {
        &self.extents
    }

    pub fn values(&self) -> &[f64] {
        &self.khat
    }

    pub fn grid_len(&self) -> usize {
        self.khat.len()
    }

    /// Copies a real field on the region (axis 0 fastest) into a zeroed grid.
    pub fn embed_real(&self, field: &[f64], grid: &mut [Complex64]) {
        self.embed(field.len(), grid, |i| Complex64::new(field[i], 0.0));
    }

    /// Embeds a field given by `value(region_index)`.
    pub fn embed(&self, count: usize, grid: &mut [Complex64], value: impl Fn(usize) -> Complex64) {
        let region_len: usize = self.extents.iter().product();
        assert_eq!(count, region_len);
        grid.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        let e0 = self.extents[0];
        let p0 = self.shape[0];
        let rows = region_len / e0.max(1);
        let mut coords = vec![0usize; self.extents.len()];
        for row in 0..rows {
            let mut g = 0;
            let mut stride = p0;
            for i in 1..self.extents.len() {
                g += coords[i] * stride;
                stride *= self.shape[i];
            }
            for j in 0..e0 {
                grid[g + j] = value(row * e0 + j);
            }
            for i in 1..self.extents.len() {
                coords[i] += 1;
                if coords[i] < self.extents[i] {
                    break;
                }
                coords[i] = 0;
            }
        }
    }

    /// `Σ_{x≠y} K(x−y) Re(f(x) conj(g(y)))` from transformed fields.
    pub fn correlate_transformed(&self, f: &[Complex64], g: &[Complex64]) -> f64 {
        let acc: f64 = self
            .khat
            .iter()
            .zip(f.iter().zip(g))
            .map(|(k, (a, b))| k * (a.re * b.re + a.im * b.im))
            .sum();
        acc / self.khat.len() as f64
    }

    /// `Σ_{x≠y} K(x−y) Re(f(x) conj(f(y)))` from a transformed field.
    pub fn autocorrelate_transformed(&self, f: &[Complex64]) -> f64 {
        let acc: f64 = self.khat.iter().zip(f).map(|(k, a)| k * a.norm_sqr()).sum();
        acc / self.khat.len() as f64
    }
}

/// Convenience wrapper: transforms two real region fields and correlates them.
pub struct Correlator {
    spectrum: KernelSpectrum,
    fft: GridFft,
    a: Vec<Complex64>,
    b: Vec<Complex64>,
}

impl Correlator {
    pub fn new(spectrum: KernelSpectrum) -> Self {
        let fft = GridFft::new(spectrum.shape());
        let len = spectrum.grid_len();
        Self { spectrum, fft, a: vec![Complex64::new(0.0, 0.0); len], b: vec![Complex64::new(0.0, 0.0); len] }
    }

    pub fn spectrum(&self) -> &KernelSpectrum {
        &self.spectrum
    }

    /// `Σ_{x≠y} K(x−y) f(x) g(y)` for real fields on the region.
    pub fn correlate(&mut self, f: &[f64], g: &[f64]) -> f64 {
        self.spectrum.embed_real(f, &mut self.a);
        self.fft.forward(&mut self.a);
        self.spectrum.embed_real(g, &mut self.b);
        self.fft.forward(&mut self.b);
        self.spectrum.correlate_transformed(&self.a, &self.b)
    }

    /// `Σ_{x≠y} K(x−y) f(x) f(y)`.
    pub fn autocorrelate(&mut self, f: &[f64]) -> f64 {
        self.spectrum.embed_real(f, &mut self.a);
        self.fft.forward(&mut self.a);
        self.spectrum.autocorrelate_transformed(&self.a)
    }

    /// `Σ_{x≠y} K(x−y) Re(w_x conj(w_y))` for a complex field.
    pub fn autocorrelate_complex(&mut self, count: usize, w: impl Fn(usize) -> Complex64) -> f64 {
        self.spectrum.embed(count, &mut self.a, w);
        self.fft.forward(&mut self.a);
        self.spectrum.autocorrelate_transformed(&self.a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smooth_sizes() {
        assert_eq!(smooth_size(1), 1);
        assert_eq!(smooth_size(7), 8);
        assert_eq!(smooth_size(1025), 1080);
        assert_eq!(smooth_size(97), 100);
    }

    #[test]
    fn grid_fft_matches_naive_dft_in_two_dimensions() {
        let shape = [6usize, 5usize];
        let n = 30;
        let data: Vec<Complex64> = (0..n).map(|i| Complex64::new((i as f64).sin(), (i as f64 * 0.3).cos())).collect();
        let mut fast = data.clone();
        GridFft::new(&shape).forward(&mut fast);
        for k1 in 0..5 {
            for k0 in 0..6 {
                let mut acc = Complex64::new(0.0, 0.0);
                for x1 in 0..5 {
                    for x0 in 0..6 {
                        let phase = -2.0 * std::f64::consts::PI * ((k0 * x0) as f64 / 6.0 + (k1 * x1) as f64 / 5.0);
                        acc += data[x0 + 6 * x1] * Complex64::from_polar(1.0, phase);
                    }
                }
                assert!((acc - fast[k0 + 6 * k1]).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn correlation_matches_double_loop() {
        let extents = [7usize, 4usize];
        let kernel = |d: &[i64]| ((d[0] * d[0] + d[1] * d[1]) as f64).powf(-1.25);
        let len = 28;
        let f: Vec<f64> = (0..len).map(|i| (i as f64 * 0.7).cos()).collect();
        let g: Vec<f64> = (0..len).map(|i| (i as f64 * 1.3).sin() + 0.2).collect();
        let mut naive = 0.0;
        for i in 0..len {
            for j in 0..len {
                if i != j {
                    let d = [(i % 7) as i64 - (j % 7) as i64, (i / 7) as i64 - (j / 7) as i64];
                    naive += kernel(&d) * f[i] * g[j];
                }
            }
        }
        let mut c = Correlator::new(KernelSpectrum::new(&extents, kernel));
        assert!((c.correlate(&f, &g) - naive).abs() < 1e-12 * naive.abs().max(1.0));
    }
}
