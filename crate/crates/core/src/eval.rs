//! Metrics and synthetic phantoms.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::{PatchGrid, Volume};
use crate::{par, rng};

fn same_dims(a: &Volume, b: &Volume) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("dims {:?} and {:?} differ", a.dims(), b.dims())));
    }
    Ok(())
}

pub fn mse(a: &Volume, b: &Volume) -> Result<f64> {
    same_dims(a, b)?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// `10·log10(peak² / MSE)` in dB; identical inputs give `+inf`.
pub fn psnr(a: &Volume, b: &Volume, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::invalid(format!("peak must be positive, got {peak}")));
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

/// Index and Euclidean distance of the closest dataset volume; ties go to
/// the lowest index.
pub fn nearest_neighbor(query: &Volume, dataset: &[Volume]) -> Result<(usize, f64)> {
    if dataset.is_empty() {
        return Err(Error::invalid("nearest-neighbor dataset is empty"));
    }
    for v in dataset {
        same_dims(query, v)?;
    }
    let d2 = par::map_slice(dataset, |v| {
        query.data().iter().zip(v.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
    });
    let mut best = 0;
    for (i, &d) in d2.iter().enumerate() {
        if d < d2[best] {
            best = i;
        }
    }
    Ok((best, d2[best].sqrt()))
}

/// Random ellipsoid phantom. The volume is split into `bands` slabs along z
/// and slab `b` holds `n_ellipsoids + b` ellipsoids, so structure depends on
/// the axial position.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub n_ellipsoids: usize,
    pub bands: usize,
    /// Ellipsoid intensities are drawn uniformly from this range (may be negative).
    pub intensity: (f64, f64),
    /// Semi-axis range as a fraction of the half extent.
    pub axis: (f64, f64),
    /// Ellipsoid centers are drawn within this fraction of the half extent in x and y.
    pub center_spread: f64,
    /// Maximum tilt out of the axial plane, radians. In-plane rotation is uniform.
    pub max_tilt: f64,
    pub background: f64,
    /// Value of an enclosing body ellipsoid; 0 disables it.
    pub body: f64,
    /// Width in voxels of a tanh edge; 0 gives hard indicators.
    pub edge_softness: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            n_ellipsoids: 3,
            bands: 3,
            intensity: (0.1, 0.6),
            axis: (0.1, 0.35),
            center_spread: 0.5,
            max_tilt: 0.3,
            background: 0.0,
            body: 0.2,
            edge_softness: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    axes: [f64; 3],
    // rows of the world-to-local rotation
    rot: [[f64; 3]; 3],
    value: f64,
}

impl Ellipsoid {
    fn radius(&self, p: [f64; 3]) -> f64 {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let mut r2 = 0.0;
        for (row, a) in self.rot.iter().zip(self.axes) {
            let l = row[0] * d[0] + row[1] * d[1] + row[2] * d[2];
            r2 += (l / a) * (l / a);
        }
        r2.sqrt()
    }
}

fn rotation(phi: f64, tilt: f64) -> [[f64; 3]; 3] {
    let (sp, cp) = phi.sin_cos();
    let (st, ct) = tilt.sin_cos();
    // Rz(phi) then Rx(tilt), transposed
    [[cp, sp, 0.0], [-sp * ct, cp * ct, st], [sp * st, -cp * st, ct]]
}

/// Deterministic phantom for `spec.seed`, clipped to [0, 1]. Coordinates
/// are voxel centers mapped to [-1, 1] per axis.
pub fn generate_phantom(spec: &PhantomSpec, dims: [usize; 3]) -> Result<Volume> {
    if dims.contains(&0) {
        return Err(Error::invalid(format!("phantom dims {dims:?} must be positive")));
    }
    if spec.bands == 0 || spec.axis.0 <= 0.0 || spec.axis.1 < spec.axis.0 || spec.intensity.1 < spec.intensity.0 {
        return Err(Error::invalid("phantom spec ranges are inconsistent"));
    }
    let mut r = rng::stream(spec.seed, &[0x9A47]);
    let mut shapes = Vec::new();
    if spec.body != 0.0 {
        shapes.push(Ellipsoid { center: [0.0; 3], axes: [0.85, 0.7, 1.2], rot: rotation(0.0, 0.0), value: spec.body });
    }
    let band_h = 2.0 / spec.bands as f64;
    for b in 0..spec.bands {
        for _ in 0..spec.n_ellipsoids + b {
            let z0 = -1.0 + band_h * b as f64;
            let center = [
                r.random_range(-spec.center_spread..=spec.center_spread),
                r.random_range(-spec.center_spread..=spec.center_spread),
                r.random_range(z0..z0 + band_h),
            ];
            let axes = [0, 1, 2].map(|_| r.random_range(spec.axis.0..=spec.axis.1));
            let phi = r.random_range(0.0..PI);
            let tilt = if spec.max_tilt > 0.0 { r.random_range(-spec.max_tilt..=spec.max_tilt) } else { 0.0 };
            let value = r.random_range(spec.intensity.0..=spec.intensity.1);
            shapes.push(Ellipsoid { center, axes, rot: rotation(phi, tilt), value });
        }
    }
    let coord = |i: usize, n: usize| (i as f64 + 0.5) / n as f64 * 2.0 - 1.0;
    let voxel = 2.0 / dims.iter().copied().max().unwrap_or(1) as f64;
    let soft = spec.edge_softness * voxel;
    Ok(Volume::from_fn(dims, |x, y, z| {
        let p = [coord(x, dims[0]), coord(y, dims[1]), coord(z, dims[2])];
        let mut v = spec.background;
        for e in &shapes {
            let d = e.radius(p);
            let w = if soft > 0.0 {
                let scale = e.axes.iter().copied().fold(f64::INFINITY, f64::min);
                0.5 * (1.0 - ((d - 1.0) * scale / soft).tanh())
            } else if d <= 1.0 {
                1.0
            } else {
                0.0
            };
            v += e.value * w;
        }
        v.clamp(0.0, 1.0)
    }))
}

/// Mean |difference| across voxel pairs that straddle a face of the
/// offset-0 patch grid, divided by the mean over all other adjacent pairs.
/// Returns 1.0 when both are zero and `+inf` when only the face term is.
pub fn boundary_artifact_metric(v: &Volume, grid: &PatchGrid) -> Result<f64> {
    if v.dims() != grid.image_dims() {
        return Err(Error::shape(format!("expected image dims {:?}, got {:?}", grid.image_dims(), v.dims())));
    }
    let p = grid.patch_size();
    let d = v.dims();
    let (mut face, mut nface, mut inner, mut ninner) = (0.0, 0usize, 0.0, 0usize);
    for z in 0..d[2] {
        for y in 0..d[1] {
            for x in 0..d[0] {
                let c = [x, y, z];
                for axis in 0..3 {
                    if c[axis] == 0 {
                        continue;
                    }
                    let mut q = c;
                    q[axis] -= 1;
                    let diff = (v.get(x, y, z) - v.get(q[0], q[1], q[2])).abs();
                    if c[axis] % p == 0 {
                        face += diff;
                        nface += 1;
                    } else {
                        inner += diff;
                        ninner += 1;
                    }
                }
            }
        }
    }
    let face = if nface > 0 { face / nface as f64 } else { 0.0 };
    let inner = if ninner > 0 { inner / ninner as f64 } else { 0.0 };
    Ok(match (face == 0.0, inner == 0.0) {
        (true, true) => 1.0,
        (false, true) => f64::INFINITY,
        _ => face / inner,
    })
}
