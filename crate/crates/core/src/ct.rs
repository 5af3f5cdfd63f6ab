//! Parallel-beam projector, its exact transpose, and filtered back projection.
//!
//! Each axial (z) slice is projected independently with the same 2D
//! geometry. Pixel `(i, j)` covers `[i - nx/2, i + 1 - nx/2] × [j - ny/2,
//! j + 1 - ny/2]` in voxel units. The ray for view angle θ and detector
//! offset `u` is `u·(cos θ, sin θ) + s·(-sin θ, cos θ)`. Intersection
//! lengths are computed exactly by walking the grid planes, so the system
//! matrix is stored once and shared by the forward and adjoint operators.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::grid::Volume;
use crate::par;
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct CtGeometry {
    pub angles: Vec<f64>,
    pub n_det: usize,
    pub det_spacing: f64,
}

impl CtGeometry {
    /// `n_views` angles uniformly spaced over [0, π), rounded to f32 so a
    /// geometry read back from a sinogram file is identical.
    pub fn uniform(n_views: usize, n_det: usize, det_spacing: f64) -> Result<Self> {
        if n_views == 0 {
            return Err(Error::invalid("at least one view is required"));
        }
        let angles = (0..n_views).map(|i| (PI * i as f64 / n_views as f64) as f32 as f64).collect();
        Self::with_angles(angles, n_det, det_spacing)
    }

    /// Uniform views with the default detector for an `nx × ny` slice.
    pub fn for_image(n_views: usize, nx: usize, ny: usize) -> Result<Self> {
        Self::uniform(n_views, default_detector_count(nx, ny, 1.0), 1.0)
    }

    pub fn with_angles(angles: Vec<f64>, n_det: usize, det_spacing: f64) -> Result<Self> {
        if angles.is_empty() || n_det == 0 {
            return Err(Error::invalid("geometry needs at least one view and one detector bin"));
        }
        if !(det_spacing > 0.0 && det_spacing.is_finite()) {
            return Err(Error::invalid("detector spacing must be positive"));
        }
        if angles.iter().any(|a| !a.is_finite()) || angles.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("view angles must be finite and strictly increasing"));
        }
        Ok(CtGeometry { angles, n_det, det_spacing })
    }

    pub fn n_views(&self) -> usize {
        self.angles.len()
    }

    fn check_image(&self, nx: usize, ny: usize) -> Result<()> {
        let diag = ((nx * nx + ny * ny) as f64).sqrt();
        if (self.n_det as f64) * self.det_spacing < diag {
            return Err(Error::invalid(format!(
                "{} detector bins of spacing {} do not cover the {nx}x{ny} slice diagonal",
                self.n_det, self.det_spacing
            )));
        }
        Ok(())
    }
}

/// `⌈diag / spacing⌉ + 1` bins.
pub fn default_detector_count(nx: usize, ny: usize, det_spacing: f64) -> usize {
    (((nx * nx + ny * ny) as f64).sqrt() / det_spacing).ceil() as usize + 1
}

/// Line integrals, bin fastest, then view, then z.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    angles: Vec<f64>,
    n_det: usize,
    nz: usize,
    data: Vec<f64>,
}

impl Sinogram {
    pub fn zeros(angles: Vec<f64>, n_det: usize, nz: usize) -> Self {
        let n = angles.len() * n_det * nz;
        Sinogram { angles, n_det, nz, data: vec![0.0; n] }
    }

    pub fn from_vec(angles: Vec<f64>, n_det: usize, nz: usize, data: Vec<f64>) -> Result<Self> {
        let n = angles.len() * n_det * nz;
        if n == 0 || data.len() != n {
            return Err(Error::shape(format!(
                "sinogram ({} views, {n_det} bins, {nz} slices) needs {n} values, got {}",
                angles.len(),
                data.len()
            )));
        }
        Ok(Sinogram { angles, n_det, nz, data })
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn n_views(&self) -> usize {
        self.angles.len()
    }

    pub fn n_det(&self) -> usize {
        self.n_det
    }

    pub fn nz(&self) -> usize {
        self.nz
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, view: usize, bin: usize, z: usize) -> f64 {
        self.data[bin + self.n_det * (view + self.n_views() * z)]
    }

    pub fn dot(&self, other: &Sinogram) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Adds iid `N(0, sigma²)` noise drawn from `seed`.
    pub fn add_noise(&mut self, sigma: f64, seed: u64) {
        if sigma == 0.0 {
            return;
        }
        let mut r = rng::stream(seed, &[0x5140]);
        for v in &mut self.data {
            *v += sigma * r.sample::<f64, _>(StandardNormal);
        }
    }
}

/// Precomputed per-slice system matrix in compressed row form (one row per ray).
#[derive(Debug, Clone)]
pub struct Projector {
    geom: CtGeometry,
    dims: [usize; 3],
    row_start: Vec<usize>,
    pixels: Vec<u32>,
    weights: Vec<f64>,
}

impl Projector {
    pub fn new(geom: &CtGeometry, dims: [usize; 3]) -> Result<Self> {
        let [nx, ny, nz] = dims;
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::shape("image dims must be positive"));
        }
        geom.check_image(nx, ny)?;
        let mut row_start = vec![0];
        let mut pixels = Vec::new();
        let mut weights = Vec::new();
        for &theta in &geom.angles {
            for b in 0..geom.n_det {
                let u = (b as f64 - (geom.n_det as f64 - 1.0) / 2.0) * geom.det_spacing;
                trace_ray(theta, u, nx, ny, |pix, len| {
                    pixels.push(pix as u32);
                    weights.push(len);
                });
                row_start.push(pixels.len());
            }
        }
        Ok(Projector { geom: geom.clone(), dims, row_start, pixels, weights })
    }

    pub fn geometry(&self) -> &CtGeometry {
        &self.geom
    }

    pub fn image_dims(&self) -> [usize; 3] {
        self.dims
    }

    /// (pixel index within slice, intersection length) for ray `(view, bin)`.
    pub fn ray(&self, view: usize, bin: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = view * self.geom.n_det + bin;
        let range = self.row_start[r]..self.row_start[r + 1];
        self.pixels[range.clone()].iter().map(|&p| p as usize).zip(self.weights[range].iter().copied())
    }

    pub fn project(&self, v: &Volume) -> Result<Sinogram> {
        if v.dims() != self.dims {
            return Err(Error::shape(format!("projector built for {:?}, got {:?}", self.dims, v.dims())));
        }
        let nxy = self.dims[0] * self.dims[1];
        let rays = self.geom.n_views() * self.geom.n_det;
        let mut out = Sinogram::zeros(self.geom.angles.clone(), self.geom.n_det, self.dims[2]);
        let img = v.data();
        par::for_each_chunk_mut(&mut out.data, rays, |z, chunk| {
            let slice = &img[z * nxy..(z + 1) * nxy];
            for (r, o) in chunk.iter_mut().enumerate() {
                let range = self.row_start[r]..self.row_start[r + 1];
                *o = self.pixels[range.clone()]
                    .iter()
                    .zip(&self.weights[range])
                    .map(|(&p, &w)| w * slice[p as usize])
                    .sum();
            }
        });
        Ok(out)
    }

    pub fn backproject(&self, s: &Sinogram) -> Result<Volume> {
        self.check_sinogram(s)?;
        let nxy = self.dims[0] * self.dims[1];
        let rays = self.geom.n_views() * self.geom.n_det;
        let mut out = Volume::zeros(self.dims);
        let sino = &s.data;
        par::for_each_chunk_mut(out.data_mut(), nxy, |z, slice| {
            let rows = &sino[z * rays..(z + 1) * rays];
            for (r, &val) in rows.iter().enumerate() {
                if val == 0.0 {
                    continue;
                }
                let range = self.row_start[r]..self.row_start[r + 1];
                for (&p, &w) in self.pixels[range.clone()].iter().zip(&self.weights[range]) {
                    slice[p as usize] += w * val;
                }
            }
        });
        Ok(out)
    }

    /// Ramp-filtered back projection.
    pub fn fbp(&self, s: &Sinogram) -> Result<Volume> {
        self.check_sinogram(s)?;
        if !s.is_finite() {
            return Err(Error::NonFinite("sinogram".into()));
        }
        let filtered = ramp_filter(s, self.geom.det_spacing);
        let mut out = self.backproject(&filtered)?;
        out.scale(self.geom.det_spacing * PI / self.geom.n_views() as f64);
        Ok(out)
    }

    pub fn check_sinogram(&self, s: &Sinogram) -> Result<()> {
        if s.n_det != self.geom.n_det || s.nz != self.dims[2] || s.angles != self.geom.angles {
            return Err(Error::shape(format!(
                "sinogram ({} views, {} bins, {} slices) does not match the geometry ({} views, {} bins, {} slices)",
                s.n_views(),
                s.n_det,
                s.nz,
                self.geom.n_views(),
                self.geom.n_det,
                self.dims[2]
            )));
        }
        Ok(())
    }
}

pub fn project(v: &Volume, geom: &CtGeometry) -> Result<Sinogram> {
    Projector::new(geom, v.dims())?.project(v)
}

pub fn backproject(s: &Sinogram, geom: &CtGeometry, dims: [usize; 3]) -> Result<Volume> {
    Projector::new(geom, dims)?.backproject(s)
}

pub fn fbp(s: &Sinogram, geom: &CtGeometry, dims: [usize; 3]) -> Result<Volume> {
    Projector::new(geom, dims)?.fbp(s)
}

/// Siddon-style walk: calls `emit(pixel, length)` for every pixel the ray
/// crosses with positive length, in order along the ray.
fn trace_ray(theta: f64, u: f64, nx: usize, ny: usize, mut emit: impl FnMut(usize, f64)) {
    let (sin, cos) = theta.sin_cos();
    let origin = [u * cos, u * sin];
    let dir = [-sin, cos];
    let half = [nx as f64 / 2.0, ny as f64 / 2.0];
    let n = [nx, ny];
    const EPS: f64 = 1e-12;

    let (mut s_lo, mut s_hi) = (f64::NEG_INFINITY, f64::INFINITY);
    for a in 0..2 {
        if dir[a].abs() < EPS {
            if origin[a] < -half[a] || origin[a] > half[a] {
                return;
            }
        } else {
            let s0 = (-half[a] - origin[a]) / dir[a];
            let s1 = (half[a] - origin[a]) / dir[a];
            s_lo = s_lo.max(s0.min(s1));
            s_hi = s_hi.min(s0.max(s1));
        }
    }
    if s_hi - s_lo <= EPS {
        return;
    }

    let mut cuts = vec![s_lo, s_hi];
    for a in 0..2 {
        if dir[a].abs() < EPS {
            continue;
        }
        for k in 1..n[a] {
            let s = (k as f64 - half[a] - origin[a]) / dir[a];
            if s > s_lo && s < s_hi {
                cuts.push(s);
            }
        }
    }
    cuts.sort_by(|a, b| a.partial_cmp(b).expect("finite"));

    for w in cuts.windows(2) {
        let len = w[1] - w[0];
        if len <= EPS {
            continue;
        }
        let mid = 0.5 * (w[0] + w[1]);
        let px = origin[0] + mid * dir[0] + half[0];
        let py = origin[1] + mid * dir[1] + half[1];
        let i = (px.floor().max(0.0) as usize).min(nx - 1);
        let j = (py.floor().max(0.0) as usize).min(ny - 1);
        emit(i + nx * j, len);
    }
}

/// Ram-Lak filtering of every detector row, zero padded to the next power of
/// two at least twice the row length. The band-limited kernel is sampled in
/// space and transformed, which keeps the DC response exact.
fn ramp_filter(s: &Sinogram, tau: f64) -> Sinogram {
    let n_det = s.n_det;
    let len = (2 * n_det).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(len);
    let inv = planner.plan_fft_inverse(len);

    let mut kernel = vec![Complex::new(0.0, 0.0); len];
    for (i, k) in kernel.iter_mut().enumerate() {
        let n = if i <= len / 2 { i as i64 } else { i as i64 - len as i64 };
        let v = if n == 0 {
            1.0 / (4.0 * tau * tau)
        } else if n % 2 != 0 {
            -1.0 / (PI * PI * (n * n) as f64 * tau * tau)
        } else {
            0.0
        };
        *k = Complex::new(v, 0.0);
    }
    fwd.process(&mut kernel);

    let mut out = s.clone();
    let scale = tau / len as f64;
    let rows = s.n_views() * s.nz;
    let filtered: Vec<Vec<f64>> = par::map_range(rows, |r| {
        let mut buf = vec![Complex::new(0.0, 0.0); len];
        for (b, v) in buf.iter_mut().zip(&s.data[r * n_det..(r + 1) * n_det]) {
            b.re = *v;
        }
        fwd.process(&mut buf);
        for (b, k) in buf.iter_mut().zip(&kernel) {
            *b *= k;
        }
        inv.process(&mut buf);
        buf[..n_det].iter().map(|c| c.re * scale).collect()
    });
    for (r, row) in filtered.into_iter().enumerate() {
        out.data[r * n_det..(r + 1) * n_det].copy_from_slice(&row);
    }
    out
}
