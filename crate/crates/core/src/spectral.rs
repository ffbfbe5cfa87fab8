//! Periodic-grid fields and exact spectral calculus.
//!
//! Fields are stored row-major with axis 0 varying slowest. Coefficients use
//! the normalization `coeff(k) = n^-dim * sum_x f(x) exp(-i k.x)`, so that
//! `||f||_{L2}^2 = L^dim * sum_k |coeff(k)|^2`.

use std::f64::consts::PI;
use std::fmt;
use std::ops::{Add, Mul, Sub};
use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

struct GridInner {
    dim: usize,
    n: usize,
    length: f64,
    /// Physical wavenumbers in FFT order: 2*pi*k/L with k in [-n/2, n/2).
    wavenumbers: Vec<f64>,
    /// Signed integer mode index in FFT order.
    modes: Vec<i64>,
    /// Per-point |k|^2.
    ksq: Vec<f64>,
    /// Per-axis, per-point derivative wavenumber (Nyquist entries zeroed).
    dk: Vec<Vec<f64>>,
    /// Per-point 2/3-rule retention flag.
    keep: Vec<bool>,
    /// Flat index of the mode `-k` for every flat index `k`.
    negated: Vec<usize>,
    forward: Arc<dyn Fft<f64>>,
    backward: Arc<dyn Fft<f64>>,
}

/// Uniform periodic mesh on `[0, L)^dim` with `n` points per axis.
///
/// Cloning is cheap; FFT plans and wavenumber tables are shared.
#[derive(Clone)]
pub struct Grid {
    inner: Arc<GridInner>,
}

impl fmt::Debug for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Grid")
            .field("dim", &self.inner.dim)
            .field("n", &self.inner.n)
            .field("length", &self.inner.length)
            .finish()
    }
}

impl PartialEq for Grid {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
            || (self.dim() == other.dim()
                && self.n() == other.n()
                && self.length().to_bits() == other.length().to_bits())
    }
}

impl Grid {
    pub fn new(dim: usize, n: usize, length: f64) -> Result<Self> {
        if !(2..=3).contains(&dim) {
            return Err(Error::InvalidGrid(format!("dim must be 2 or 3, got {dim}")));
        }
        if n < 8 || !n.is_multiple_of(2) {
            return Err(Error::InvalidGrid(format!(
                "points per axis must be even and >= 8, got {n}"
            )));
        }
        if !(length.is_finite() && length > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "domain length must be positive and finite, got {length}"
            )));
        }
        let modes: Vec<i64> = (0..n)
            .map(|j| {
                if j < n / 2 {
                    j as i64
                } else {
                    j as i64 - n as i64
                }
            })
            .collect();
        let wavenumbers: Vec<f64> = modes
            .iter()
            .map(|&k| 2.0 * PI * k as f64 / length)
            .collect();
        let total = n.pow(dim as u32);
        let mut ksq = vec![0.0; total];
        for (flat, v) in ksq.iter_mut().enumerate() {
            let mut rem = flat;
            let mut s = 0.0;
            for _ in 0..dim {
                let kk = wavenumbers[rem % n];
                s += kk * kk;
                rem /= n;
            }
            *v = s;
        }
        let mut dk = vec![vec![0.0; total]; dim];
        let mut keep = vec![true; total];
        for flat in 0..total {
            let mut rem = flat;
            for axis in (0..dim).rev() {
                let j = rem % n;
                rem /= n;
                let k = modes[j];
                dk[axis][flat] = if k == -(n as i64 / 2) {
                    0.0
                } else {
                    wavenumbers[j]
                };
                if 3 * k.abs() > n as i64 {
                    keep[flat] = false;
                }
            }
        }
        let negated = (0..total)
            .map(|flat| {
                let mut rem = flat;
                let mut out = 0;
                let mut scale = 1;
                for _ in 0..dim {
                    let j = rem % n;
                    rem /= n;
                    out += ((n - j) % n) * scale;
                    scale *= n;
                }
                out
            })
            .collect();
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(n);
        let backward = planner.plan_fft_inverse(n);
        Ok(Grid {
            inner: Arc::new(GridInner {
                dim,
                n,
                length,
                wavenumbers,
                modes,
                ksq,
                dk,
                keep,
                negated,
                forward,
                backward,
            }),
        })
    }

    pub fn dim(&self) -> usize {
        self.inner.dim
    }

    pub fn n(&self) -> usize {
        self.inner.n
    }

    pub fn length(&self) -> f64 {
        self.inner.length
    }

    /// Number of grid points, `n^dim`.
    pub fn len(&self) -> usize {
        self.inner.ksq.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self) -> f64 {
        self.inner.length / self.inner.n as f64
    }

    /// Volume of one grid cell, `(L/n)^dim`.
    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(self.dim() as i32)
    }

    /// `L^dim`.
    pub fn volume(&self) -> f64 {
        self.length().powi(self.dim() as i32)
    }

    /// Per-axis physical wavenumbers in FFT storage order.
    pub fn wavenumbers(&self) -> &[f64] {
        &self.inner.wavenumbers
    }

    /// Per-axis signed integer mode numbers in FFT storage order.
    pub fn modes(&self) -> &[i64] {
        &self.inner.modes
    }

    /// `|k|^2` at every flat index.
    pub fn k_squared(&self) -> &[f64] {
        &self.inner.ksq
    }

    /// Derivative wavenumbers along `axis` at every flat index, with the
    /// Nyquist mode mapped to 0.
    pub fn derivative_wavenumbers(&self, axis: usize) -> &[f64] {
        &self.inner.dk[axis]
    }

    fn stride(&self, axis: usize) -> usize {
        self.n().pow((self.dim() - 1 - axis) as u32)
    }

    /// Position along `axis` of the flat index.
    pub fn axis_index(&self, flat: usize, axis: usize) -> usize {
        (flat / self.stride(axis)) % self.n()
    }

    /// Wavenumber component along `axis` of the mode stored at `flat`.
    #[inline]
    pub fn wavenumber_at(&self, flat: usize, axis: usize) -> f64 {
        self.inner.wavenumbers[self.axis_index(flat, axis)]
    }

    /// Flat storage index of the integer mode vector `k` (entries in `[-n/2, n/2)`).
    pub fn mode_index(&self, k: &[i64]) -> usize {
        assert_eq!(k.len(), self.dim());
        let n = self.n() as i64;
        k.iter().fold(0usize, |acc, &kk| {
            acc * self.n() + kk.rem_euclid(n) as usize
        })
    }

    /// Physical coordinates of the grid point at `flat`.
    pub fn point(&self, flat: usize) -> [f64; 3] {
        let mut x = [0.0; 3];
        let h = self.spacing();
        for (axis, xa) in x.iter_mut().enumerate().take(self.dim()) {
            *xa = self.axis_index(flat, axis) as f64 * h;
        }
        x
    }

    fn check_axis(&self, axis: usize) -> Result<()> {
        if axis >= self.dim() {
            Err(Error::AxisOutOfRange {
                axis,
                dim: self.dim(),
            })
        } else {
            Ok(())
        }
    }

    /// Unnormalized in-place multidimensional DFT.
    fn fft_in_place(&self, data: &mut [Complex64], inverse: bool) {
        let n = self.n();
        let plan = if inverse {
            &self.inner.backward
        } else {
            &self.inner.forward
        };
        let mut scratch = vec![Complex64::default(); plan.get_inplace_scratch_len()];
        // Last axis is contiguous.
        plan.process_with_scratch(data, &mut scratch);
        let mut lines = Vec::new();
        for axis in 0..self.dim() - 1 {
            let stride = self.stride(axis);
            let block = n * stride;
            lines.resize(block, Complex64::default());
            for chunk in data.chunks_exact_mut(block) {
                // [n][stride] -> [stride][n]
                transpose(chunk, &mut lines, n, stride);
                plan.process_with_scratch(&mut lines, &mut scratch);
                transpose(&lines, chunk, stride, n);
            }
        }
    }
}

/// Writes the `rows x cols` row-major matrix `src` transposed into `dst`.
fn transpose(src: &[Complex64], dst: &mut [Complex64], rows: usize, cols: usize) {
    const TILE: usize = 16;
    for r0 in (0..rows).step_by(TILE) {
        for c0 in (0..cols).step_by(TILE) {
            for r in r0..(r0 + TILE).min(rows) {
                for c in c0..(c0 + TILE).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

/// Real samples of a scalar field on a [`Grid`].
#[derive(Clone, Debug, PartialEq)]
pub struct RealField {
    grid: Grid,
    values: Vec<f64>,
}

/// Fourier coefficients of a scalar field on a [`Grid`].
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralField {
    grid: Grid,
    coeffs: Vec<Complex64>,
}

impl RealField {
    pub fn new(grid: &Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::InvalidGrid(format!(
                "expected {} samples, got {}",
                grid.len(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidGrid(format!(
                "non-finite sample {} at index {i}",
                values[i]
            )));
        }
        Ok(RealField {
            grid: grid.clone(),
            values,
        })
    }

    /// Builds a field without the finiteness scan. Used on hot paths where the
    /// samples come from arithmetic on already validated fields.
    pub(crate) fn from_vec_unchecked(grid: &Grid, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        RealField {
            grid: grid.clone(),
            values,
        }
    }

    pub fn zeros(grid: &Grid) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn constant(grid: &Grid, value: f64) -> Self {
        RealField {
            grid: grid.clone(),
            values: vec![value; grid.len()],
        }
    }

    /// Samples `f` at every grid point; `f` receives `[x, y, z]` (unused axes are 0).
    pub fn from_fn(grid: &Grid, f: impl Fn([f64; 3]) -> f64) -> Self {
        let values = (0..grid.len()).map(|i| f(grid.point(i))).collect();
        RealField {
            grid: grid.clone(),
            values,
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn forward(&self) -> SpectralField {
        let mut coeffs: Vec<Complex64> = self
            .values
            .iter()
            .map(|&v| Complex64::new(v, 0.0))
            .collect();
        self.grid.fft_in_place(&mut coeffs, false);
        let scale = 1.0 / self.grid.len() as f64;
        for c in &mut coeffs {
            *c *= scale;
        }
        SpectralField {
            grid: self.grid.clone(),
            coeffs,
        }
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// `integral f dx` by the rectangle rule (exact for band-limited integrands).
    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_volume()
    }

    /// L2 norm by physical-space quadrature.
    pub fn norm_l2(&self) -> f64 {
        (self.values.iter().map(|v| v * v).sum::<f64>() * self.grid.cell_volume()).sqrt()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> RealField {
        RealField {
            grid: self.grid.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Pointwise product (not dealiased).
    pub fn pointwise_mul(&self, other: &RealField) -> RealField {
        debug_assert!(self.grid == other.grid);
        RealField {
            grid: self.grid.clone(),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a * b)
                .collect(),
        }
    }

    /// `self += a * x`
    pub fn axpy(&mut self, a: f64, x: &RealField) {
        debug_assert!(self.grid == x.grid);
        for (s, v) in self.values.iter_mut().zip(&x.values) {
            *s += a * v;
        }
    }

    pub fn scaled(&self, a: f64) -> RealField {
        self.map(|v| a * v)
    }
}

impl<'a> Add<&'a RealField> for &'a RealField {
    type Output = RealField;
    fn add(self, rhs: &'a RealField) -> RealField {
        let mut out = self.clone();
        out.axpy(1.0, rhs);
        out
    }
}

impl<'a> Sub<&'a RealField> for &'a RealField {
    type Output = RealField;
    fn sub(self, rhs: &'a RealField) -> RealField {
        let mut out = self.clone();
        out.axpy(-1.0, rhs);
        out
    }
}

impl Mul<f64> for &RealField {
    type Output = RealField;
    fn mul(self, rhs: f64) -> RealField {
        self.scaled(rhs)
    }
}

impl SpectralField {
    pub fn new(grid: &Grid, coeffs: Vec<Complex64>) -> Result<Self> {
        if coeffs.len() != grid.len() {
            return Err(Error::InvalidGrid(format!(
                "expected {} coefficients, got {}",
                grid.len(),
                coeffs.len()
            )));
        }
        Ok(SpectralField {
            grid: grid.clone(),
            coeffs,
        })
    }

    pub fn zeros(grid: &Grid) -> Self {
        SpectralField {
            grid: grid.clone(),
            coeffs: vec![Complex64::default(); grid.len()],
        }
    }

    /// Real random field with every mode satisfying `|k_axis| <= kmax` populated.
    pub fn random_band_limited<R: Rng + ?Sized>(grid: &Grid, kmax: usize, rng: &mut R) -> Self {
        let values = (0..grid.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut f = RealField::from_vec_unchecked(grid, values).forward();
        let kmax = kmax as i64;
        f.apply_mask(|modes| modes.iter().all(|k| k.abs() <= kmax));
        f
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [Complex64] {
        &mut self.coeffs
    }

    /// Coefficient of the integer mode `k`.
    pub fn coeff(&self, k: &[i64]) -> Complex64 {
        self.coeffs[self.grid.mode_index(k)]
    }

    pub fn inverse(&self) -> RealField {
        let mut data = self.coeffs.clone();
        self.grid.fft_in_place(&mut data, true);
        RealField {
            grid: self.grid.clone(),
            values: data.into_iter().map(|c| c.re).collect(),
        }
    }

    /// Multiplies every coefficient by the real symbol `m(|k|^2)`.
    pub fn apply_radial_symbol(&self, m: impl Fn(f64) -> f64) -> SpectralField {
        let coeffs = self
            .coeffs
            .iter()
            .zip(self.grid.k_squared())
            .map(|(c, &ksq)| c * m(ksq))
            .collect();
        SpectralField {
            grid: self.grid.clone(),
            coeffs,
        }
    }

    fn apply_mask(&mut self, keep: impl Fn(&[i64]) -> bool) {
        let grid = self.grid.clone();
        let dim = grid.dim();
        let mut k = [0i64; 3];
        for (flat, c) in self.coeffs.iter_mut().enumerate() {
            for (axis, ka) in k.iter_mut().enumerate().take(dim) {
                *ka = grid.modes()[grid.axis_index(flat, axis)];
            }
            if !keep(&k[..dim]) {
                *c = Complex64::default();
            }
        }
    }

    /// Multiplies by `i k_axis`; the Nyquist mode along `axis` is zeroed.
    pub fn partial_derivative(&self, axis: usize) -> Result<SpectralField> {
        self.grid.check_axis(axis)?;
        let coeffs = self
            .coeffs
            .iter()
            .zip(self.grid.derivative_wavenumbers(axis))
            .map(|(c, &k)| Complex64::new(-k * c.im, k * c.re))
            .collect();
        Ok(SpectralField {
            grid: self.grid.clone(),
            coeffs,
        })
    }

    /// Physical-space gradient.
    pub fn physical_gradient(&self) -> Vec<RealField> {
        let g = self.gradient();
        inverse_many(&g.iter().collect::<Vec<_>>())
    }

    /// Spectral gradient, one component per axis.
    pub fn gradient(&self) -> Vec<SpectralField> {
        (0..self.grid.dim())
            .map(|axis| self.partial_derivative(axis).expect("axis < dim"))
            .collect()
    }

    pub fn laplacian(&self) -> SpectralField {
        self.apply_radial_symbol(|ksq| -ksq)
    }

    /// Solves `Lap p = self` for the mean-zero `p`; the zero mode of the result is 0.
    pub fn inverse_laplacian(&self) -> SpectralField {
        self.apply_radial_symbol(|ksq| if ksq == 0.0 { 0.0 } else { -1.0 / ksq })
    }

    /// 2/3 rule: zeroes every mode with some `|k_axis| > n/3`.
    pub fn dealias(&self) -> SpectralField {
        let mut out = self.clone();
        out.dealias_in_place();
        out
    }

    pub fn dealias_in_place(&mut self) {
        for (c, &keep) in self.coeffs.iter_mut().zip(&self.grid.inner.keep) {
            if !keep {
                *c = Complex64::default();
            }
        }
    }

    /// `sqrt(L^dim * sum_k (1 + |k|^2)^s |coeff(k)|^2)`
    pub fn sobolev_norm(&self, s: f64) -> f64 {
        let sum: f64 = self
            .coeffs
            .iter()
            .zip(self.grid.k_squared())
            .map(|(c, &ksq)| {
                let w = if s == 0.0 { 1.0 } else { (1.0 + ksq).powf(s) };
                w * c.norm_sqr()
            })
            .sum();
        (self.grid.volume() * sum).sqrt()
    }

    pub fn norm_l2(&self) -> f64 {
        self.sobolev_norm(0.0)
    }

    /// Real part of `L^dim * sum_k F(k) conj(G(k))`.
    pub fn l2_inner(&self, other: &SpectralField) -> Result<f64> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch);
        }
        let sum: f64 = self
            .coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(a, b)| (a * b.conj()).re)
            .sum();
        Ok(self.grid.volume() * sum)
    }

    /// Largest `|coeff(-k) - conj(coeff(k))|` over all modes.
    pub fn hermitian_defect(&self) -> f64 {
        let grid = &self.grid;
        let dim = grid.dim();
        let mut worst: f64 = 0.0;
        let mut k = [0i64; 3];
        for (flat, c) in self.coeffs.iter().enumerate() {
            for (axis, ka) in k.iter_mut().enumerate().take(dim) {
                *ka = -grid.modes()[grid.axis_index(flat, axis)];
            }
            let partner = self.coeffs[grid.mode_index(&k[..dim])];
            worst = worst.max((partner - c.conj()).norm());
        }
        worst
    }

    pub fn scaled(&self, a: f64) -> SpectralField {
        SpectralField {
            grid: self.grid.clone(),
            coeffs: self.coeffs.iter().map(|c| c * a).collect(),
        }
    }

    /// `self += a * x`
    pub fn axpy(&mut self, a: f64, x: &SpectralField) {
        debug_assert!(self.grid == x.grid);
        for (s, v) in self.coeffs.iter_mut().zip(&x.coeffs) {
            *s += v * a;
        }
    }

    /// Largest coefficient magnitude.
    pub fn max_abs(&self) -> f64 {
        self.coeffs.iter().fold(0.0, |m, c| m.max(c.norm()))
    }

    /// The same trigonometric polynomial on another resolution of the same
    /// torus: zero-padded when refining, truncated when coarsening. Nyquist
    /// modes of the source are dropped so the result stays real.
    pub fn resample(&self, target: &Grid) -> Result<SpectralField> {
        let src = &self.grid;
        if target.dim() != src.dim() || target.length() != src.length() {
            return Err(Error::GridMismatch);
        }
        let dim = src.dim();
        let half_src = (src.n() / 2) as i64;
        let half_dst = (target.n() / 2) as i64;
        let mut out = SpectralField::zeros(target);
        let mut k = [0i64; 3];
        'modes: for (flat, c) in self.coeffs.iter().enumerate() {
            for (axis, ka) in k.iter_mut().enumerate().take(dim) {
                *ka = src.modes()[src.axis_index(flat, axis)];
                if ka.abs() >= half_src || ka.abs() >= half_dst {
                    continue 'modes;
                }
            }
            out.coeffs[target.mode_index(&k[..dim])] = *c;
        }
        Ok(out)
    }
}

impl<'a> Add<&'a SpectralField> for &'a SpectralField {
    type Output = SpectralField;
    fn add(self, rhs: &'a SpectralField) -> SpectralField {
        let mut out = self.clone();
        out.axpy(1.0, rhs);
        out
    }
}

impl<'a> Sub<&'a SpectralField> for &'a SpectralField {
    type Output = SpectralField;
    fn sub(self, rhs: &'a SpectralField) -> SpectralField {
        let mut out = self.clone();
        out.axpy(-1.0, rhs);
        out
    }
}

/// Forward transforms of several fields, two per complex FFT.
pub fn forward_many(fields: &[&RealField]) -> Vec<SpectralField> {
    let mut out = Vec::with_capacity(fields.len());
    for pair in fields.chunks(2) {
        match pair {
            [a] => out.push(a.forward()),
            [a, b] => {
                let grid = a.grid();
                debug_assert!(grid == b.grid());
                let mut z: Vec<Complex64> = a
                    .values()
                    .iter()
                    .zip(b.values())
                    .map(|(&x, &y)| Complex64::new(x, y))
                    .collect();
                grid.fft_in_place(&mut z, false);
                let half = 0.5 / grid.len() as f64;
                let neg = &grid.inner.negated;
                let mut ca = Vec::with_capacity(z.len());
                let mut cb = Vec::with_capacity(z.len());
                for (k, zk) in z.iter().enumerate() {
                    let zm = z[neg[k]].conj();
                    let s = zk + zm;
                    let d = zk - zm;
                    ca.push(s * half);
                    // (zk - zm) / (2i)
                    cb.push(Complex64::new(d.im, -d.re) * half);
                }
                out.push(SpectralField {
                    grid: grid.clone(),
                    coeffs: ca,
                });
                out.push(SpectralField {
                    grid: grid.clone(),
                    coeffs: cb,
                });
            }
            _ => unreachable!(),
        }
    }
    out
}

/// Inverse transforms of several Hermitian fields, two per complex FFT.
pub fn inverse_many(fields: &[&SpectralField]) -> Vec<RealField> {
    let mut out = Vec::with_capacity(fields.len());
    for pair in fields.chunks(2) {
        match pair {
            [a] => out.push(a.inverse()),
            [a, b] => {
                let grid = a.grid();
                debug_assert!(grid == b.grid());
                let mut z: Vec<Complex64> = a
                    .coeffs()
                    .iter()
                    .zip(b.coeffs())
                    .map(|(x, y)| Complex64::new(x.re - y.im, x.im + y.re))
                    .collect();
                grid.fft_in_place(&mut z, true);
                out.push(RealField {
                    grid: grid.clone(),
                    values: z.iter().map(|c| c.re).collect(),
                });
                out.push(RealField {
                    grid: grid.clone(),
                    values: z.iter().map(|c| c.im).collect(),
                });
            }
            _ => unreachable!(),
        }
    }
    out
}

/// [`forward_many`] over a slice of owned fields.
pub fn forward_vec(fields: &[RealField]) -> Vec<SpectralField> {
    forward_many(&fields.iter().collect::<Vec<_>>())
}

/// [`inverse_many`] over a slice of owned fields.
pub fn inverse_vec(fields: &[SpectralField]) -> Vec<RealField> {
    inverse_many(&fields.iter().collect::<Vec<_>>())
}

/// Divergence of a spectral vector field.
pub fn divergence(v: &[SpectralField]) -> SpectralField {
    let mut out = SpectralField::zeros(v[0].grid());
    for (axis, comp) in v.iter().enumerate() {
        out.axpy(
            1.0,
            &comp
                .partial_derivative(axis)
                .expect("one component per axis"),
        );
    }
    out
}

/// Dealiased product `P(a * b)` returned in coefficient space.
pub fn dealiased_product(a: &RealField, b: &RealField) -> SpectralField {
    let mut out = a.pointwise_mul(b).forward();
    out.dealias_in_place();
    out
}

/// `P(a * b_i)` for every `b_i`, in coefficient space.
pub fn dealiased_products(a: &RealField, b: &[RealField]) -> Vec<SpectralField> {
    let prods: Vec<RealField> = b.iter().map(|bi| a.pointwise_mul(bi)).collect();
    let mut out = forward_vec(&prods);
    for f in &mut out {
        f.dealias_in_place();
    }
    out
}

/// `sum_j ||d_j v||^2` summed over all components of `v`, i.e. `||grad v||_{L2}^2`.
pub fn gradient_norm_sq(v: &[SpectralField]) -> f64 {
    v.iter()
        .map(|c| {
            let sum: f64 = c
                .coeffs()
                .iter()
                .zip(c.grid().k_squared())
                .map(|(z, &ksq)| ksq * z.norm_sqr())
                .sum();
            sum * c.grid().volume()
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid2(n: usize) -> Grid {
        Grid::new(2, n, 2.0 * PI).unwrap()
    }

    #[test]
    fn make_grid_wavenumbers() {
        let g = grid2(8);
        assert_eq!(g.modes(), &[0, 1, 2, 3, -4, -3, -2, -1]);
        for (k, w) in g.modes().iter().zip(g.wavenumbers()) {
            assert!((*k as f64 - w).abs() < 1e-15);
        }
        let g = Grid::new(2, 8, PI).unwrap();
        for (k, w) in g.modes().iter().zip(g.wavenumbers()) {
            assert!((2.0 * *k as f64 - w).abs() < 1e-14);
        }
    }

    #[test]
    fn make_grid_rejects_bad_input() {
        assert!(Grid::new(2, 7, 2.0 * PI).is_err());
        assert!(Grid::new(2, 6, 2.0 * PI).is_err());
        assert!(Grid::new(1, 8, 2.0 * PI).is_err());
        assert!(Grid::new(4, 8, 2.0 * PI).is_err());
        assert!(Grid::new(2, 8, 0.0).is_err());
        assert!(Grid::new(2, 8, -1.0).is_err());
    }

    #[test]
    fn wavenumbers_antisymmetric_below_nyquist() {
        let g = grid2(16);
        for j in 1..16 / 2 {
            let k = g.wavenumbers()[j];
            let partner = g.wavenumbers()[16 - j];
            assert_eq!(k, -partner);
        }
    }

    #[test]
    fn transform_of_constant_and_cosine() {
        let g = grid2(16);
        let one = RealField::constant(&g, 1.0).forward();
        assert!((one.coeff(&[0, 0]) - Complex64::new(1.0, 0.0)).norm() < 1e-15);
        let rest: f64 = one.coeffs().iter().skip(1).map(|c| c.norm()).sum();
        assert!(rest < 1e-14);

        let c = RealField::from_fn(&g, |x| x[0].cos()).forward();
        for flat in 0..g.len() {
            let k = [
                g.modes()[g.axis_index(flat, 0)],
                g.modes()[g.axis_index(flat, 1)],
            ];
            let expected = if k == [1, 0] || k == [-1, 0] {
                0.5
            } else {
                0.0
            };
            assert!((c.coeffs()[flat] - Complex64::new(expected, 0.0)).norm() < 1e-14);
        }
    }

    #[test]
    fn round_trip_2d_and_3d() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for g in [grid2(32), Grid::new(3, 8, 2.0 * PI).unwrap()] {
            let values: Vec<f64> = (0..g.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let f = RealField::new(&g, values).unwrap();
            let back = f.forward().inverse();
            let err = (&back - &f).norm_l2() / f.norm_l2();
            assert!(err < 1e-12, "round trip error {err}");
        }
    }

    #[test]
    fn derivative_of_sine_is_cosine() {
        let g = grid2(16);
        let d = RealField::from_fn(&g, |x| x[0].sin())
            .forward()
            .partial_derivative(0)
            .unwrap()
            .inverse();
        let expected = RealField::from_fn(&g, |x| x[0].cos());
        assert!((&d - &expected).max_abs() < 1e-12);

        let dy = RealField::from_fn(&g, |x| x[0].sin())
            .forward()
            .partial_derivative(1)
            .unwrap();
        assert!(dy.max_abs() < 1e-15);
        let dc = RealField::constant(&g, 3.0)
            .forward()
            .partial_derivative(0)
            .unwrap();
        assert!(dc.max_abs() < 1e-15);
        assert!(matches!(
            RealField::zeros(&g).forward().partial_derivative(2),
            Err(Error::AxisOutOfRange { axis: 2, dim: 2 })
        ));
    }

    #[test]
    fn derivative_zeroes_nyquist() {
        let g = grid2(8);
        // cos(4x) lives entirely on the Nyquist mode
        let f = RealField::from_fn(&g, |x| (4.0 * x[0]).cos()).forward();
        assert!(f.coeff(&[-4, 0]).norm() > 0.9);
        assert!(f.partial_derivative(0).unwrap().max_abs() == 0.0);
    }

    #[test]
    fn laplacian_per_mode() {
        let g = grid2(16);
        let lap = RealField::from_fn(&g, |x| x[0].sin() + (2.0 * x[1]).sin())
            .forward()
            .laplacian()
            .inverse();
        let expected = RealField::from_fn(&g, |x| -x[0].sin() - 4.0 * (2.0 * x[1]).sin());
        assert!((&lap - &expected).max_abs() < 1e-12);
        assert!(RealField::constant(&g, 2.0).forward().laplacian().max_abs() == 0.0);
    }

    #[test]
    fn dealias_masks() {
        let g = grid2(16);
        let band = RealField::from_fn(&g, |x| (4.0 * x[0]).cos() * (2.0 * x[1]).sin()).forward();
        assert!((&band.dealias() - &band).max_abs() < 1e-15);
        let high = RealField::from_fn(&g, |x| (7.0 * x[0]).cos()).forward();
        assert!(high.dealias().max_abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = SpectralField::random_band_limited(&g, 8, &mut rng);
        let d = noise.dealias();
        for flat in 0..g.len() {
            let inside = (0..2).all(|a| 3 * g.modes()[g.axis_index(flat, a)].abs() <= 16);
            if inside {
                assert_eq!(d.coeffs()[flat], noise.coeffs()[flat]);
            } else {
                assert_eq!(d.coeffs()[flat], Complex64::default());
            }
        }
    }

    #[test]
    fn sobolev_norms_closed_form() {
        let g = grid2(16);
        let s = RealField::from_fn(&g, |x| x[0].sin()).forward();
        assert!((s.sobolev_norm(0.0) - PI * 2f64.sqrt()).abs() < 1e-12);
        assert!((s.sobolev_norm(1.0) - 2.0 * PI).abs() < 1e-12);
        assert_eq!(SpectralField::zeros(&g).sobolev_norm(3.0), 0.0);
    }

    #[test]
    fn inner_products_closed_form() {
        let g = grid2(16);
        let s = RealField::from_fn(&g, |x| x[0].sin()).forward();
        let c = RealField::from_fn(&g, |x| x[0].cos()).forward();
        let m = RealField::from_fn(&g, |x| x[0].sin() + x[1].cos()).forward();
        assert!(s.l2_inner(&c).unwrap().abs() < 1e-12);
        assert!((s.l2_inner(&m).unwrap() - 2.0 * PI * PI).abs() < 1e-11);
        assert!((s.l2_inner(&s).unwrap() - s.norm_l2().powi(2)).abs() < 1e-12);
        let other = SpectralField::zeros(&grid2(8));
        assert!(matches!(s.l2_inner(&other), Err(Error::GridMismatch)));
    }

    #[test]
    fn paired_transforms_match_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for g in [grid2(16), Grid::new(3, 8, 1.0).unwrap()] {
            let fields: Vec<RealField> = (0..3)
                .map(|_| {
                    let v = (0..g.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    RealField::new(&g, v).unwrap()
                })
                .collect();
            let refs: Vec<&RealField> = fields.iter().collect();
            let many = forward_many(&refs);
            for (f, m) in fields.iter().zip(&many) {
                assert!((&f.forward() - m).max_abs() < 1e-15);
                assert!(m.hermitian_defect() < 1e-16);
            }
            let refs: Vec<&SpectralField> = many.iter().collect();
            for (f, back) in fields.iter().zip(inverse_many(&refs)) {
                assert!((&back - f).max_abs() < 1e-14);
            }
        }
    }

    #[test]
    fn mode_index_round_trips() {
        let g = Grid::new(3, 8, 1.0).unwrap();
        for flat in 0..g.len() {
            let k: Vec<i64> = (0..3).map(|a| g.modes()[g.axis_index(flat, a)]).collect();
            assert_eq!(g.mode_index(&k), flat);
        }
    }
}
