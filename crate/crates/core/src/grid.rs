//! Dense volumes and the offset patch partition.
//!
//! A padded volume of size `N + 2P` per axis is cut, for each of the `P³`
//! offsets `(o1, o2, o3)`, into `(k+1)` cubic patches per axis starting at
//! `o + a·P`. The patches cover `[o, o + N + P)` along each axis; the
//! uncovered border (width `o` on the low side, `P - o` on the high side)
//! always lies inside the zero padding.

use crate::error::{Error, Result};

/// Dense 3D scalar field, x fastest, then y, then z.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl Volume {
    pub fn zeros(dims: [usize; 3]) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: [usize; 3], value: f64) -> Self {
        Volume { dims, data: vec![value; dims[0] * dims[1] * dims[2]] }
    }

    pub fn from_vec(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::shape(format!("volume dims must be positive, got {dims:?}")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::shape(format!(
                "volume {dims:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Volume { dims, data })
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Volume { dims, data }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f64) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    pub fn dot(&self, other: &Volume) -> f64 {
        debug_assert_eq!(self.dims, other.dims);
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Volume) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Volume {
        Volume { dims: self.dims, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Copies the block `[start, start + size)`; out-of-range voxels read 0.
    pub fn crop(&self, start: [usize; 3], size: [usize; 3]) -> Volume {
        let mut out = Volume::zeros(size);
        for z in 0..size[2] {
            let sz = start[2] + z;
            if sz >= self.dims[2] {
                break;
            }
            for y in 0..size[1] {
                let sy = start[1] + y;
                if sy >= self.dims[1] {
                    break;
                }
                let nx = size[0].min(self.dims[0].saturating_sub(start[0]));
                let src = self.index(start[0], sy, sz);
                let dst = out.index(0, y, z);
                out.data[dst..dst + nx].copy_from_slice(&self.data[src..src + nx]);
            }
        }
        out
    }

    /// Writes `block` at `start`; `block` must fit.
    pub fn paste(&mut self, start: [usize; 3], block: &Volume) {
        let size = block.dims;
        for z in 0..size[2] {
            for y in 0..size[1] {
                let dst = self.index(start[0], start[1] + y, start[2] + z);
                let src = block.index(0, y, z);
                self.data[dst..dst + size[0]].copy_from_slice(&block.data[src..src + size[0]]);
            }
        }
    }
}

/// Zero pads `p` voxels on every side.
pub fn pad_volume(v: &Volume, p: usize) -> Result<Volume> {
    if p == 0 {
        return Err(Error::invalid("padding must be positive"));
    }
    let d = v.dims();
    let mut out = Volume::zeros([d[0] + 2 * p, d[1] + 2 * p, d[2] + 2 * p]);
    out.paste([p, p, p], v);
    Ok(out)
}

/// Inverse of [`pad_volume`] on the interior.
pub fn unpad_volume(v: &Volume, p: usize) -> Result<Volume> {
    let d = v.dims();
    if d.iter().any(|&n| n <= 2 * p) {
        return Err(Error::shape(format!("cannot remove padding {p} from {d:?}")));
    }
    Ok(v.crop([p, p, p], [d[0] - 2 * p, d[1] - 2 * p, d[2] - 2 * p]))
}

/// Bookkeeping for the offset partition of a padded volume into `P³` patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    patch: usize,
    image_dims: [usize; 3],
}

impl PatchGrid {
    pub fn new(image_dims: [usize; 3], patch: usize) -> Result<Self> {
        if patch == 0 {
            return Err(Error::invalid("patch size must be positive"));
        }
        if image_dims.iter().any(|&n| n == 0 || n % patch != 0) {
            return Err(Error::invalid(format!(
                "image dims {image_dims:?} must be positive multiples of patch size {patch}"
            )));
        }
        Ok(PatchGrid { patch, image_dims })
    }

    pub fn patch_size(&self) -> usize {
        self.patch
    }

    pub fn patch_dims(&self) -> [usize; 3] {
        [self.patch; 3]
    }

    pub fn patch_voxels(&self) -> usize {
        self.patch.pow(3)
    }

    pub fn image_dims(&self) -> [usize; 3] {
        self.image_dims
    }

    pub fn padded_dims(&self) -> [usize; 3] {
        self.image_dims.map(|n| n + 2 * self.patch)
    }

    /// Patches per axis needed to tile the image, `N / P`.
    pub fn tiles(&self) -> [usize; 3] {
        self.image_dims.map(|n| n / self.patch)
    }

    /// Patches per offset, `(k1+1)(k2+1)(k3+1)`.
    pub fn patches_per_offset(&self) -> usize {
        self.tiles().iter().map(|k| k + 1).product()
    }

    pub fn num_offsets(&self) -> usize {
        self.patch.pow(3)
    }

    /// Offset tuple for the 1-based `offset_index`, o1 fastest.
    pub fn offset(&self, offset_index: usize) -> Result<[usize; 3]> {
        if offset_index == 0 || offset_index > self.num_offsets() {
            return Err(Error::invalid(format!(
                "offset index {offset_index} outside [1, {}]",
                self.num_offsets()
            )));
        }
        let i = offset_index - 1;
        let p = self.patch;
        Ok([i % p, (i / p) % p, i / (p * p)])
    }

    /// Start corners of all patches for the offset, grid coordinate `a` fastest.
    pub fn patch_starts(&self, offset_index: usize) -> Result<Vec<[usize; 3]>> {
        let o = self.offset(offset_index)?;
        let k = self.tiles();
        let p = self.patch;
        let mut starts = Vec::with_capacity(self.patches_per_offset());
        for c in 0..=k[2] {
            for b in 0..=k[1] {
                for a in 0..=k[0] {
                    starts.push([o[0] + a * p, o[1] + b * p, o[2] + c * p]);
                }
            }
        }
        Ok(starts)
    }

    /// Mask of padded voxels covered by the offset's patches (1) vs border (0).
    pub fn coverage_mask(&self, offset_index: usize) -> Result<Volume> {
        let o = self.offset(offset_index)?;
        let n = self.image_dims;
        let p = self.patch;
        let inside = |c: usize, axis: usize| c >= o[axis] && c < o[axis] + n[axis] + p;
        Ok(Volume::from_fn(self.padded_dims(), |x, y, z| {
            if inside(x, 0) && inside(y, 1) && inside(z, 2) {
                1.0
            } else {
                0.0
            }
        }))
    }

    /// Mask of the unpadded image inside the padded volume.
    pub fn interior_mask(&self) -> Volume {
        let p = self.patch;
        let n = self.image_dims;
        let inside = |c: usize, axis: usize| c >= p && c < p + n[axis];
        Volume::from_fn(self.padded_dims(), |x, y, z| {
            if inside(x, 0) && inside(y, 1) && inside(z, 2) {
                1.0
            } else {
                0.0
            }
        })
    }

    fn check_padded(&self, v: &Volume) -> Result<()> {
        if v.dims() != self.padded_dims() {
            return Err(Error::shape(format!(
                "expected padded dims {:?}, got {:?}",
                self.padded_dims(),
                v.dims()
            )));
        }
        Ok(())
    }

    fn check_image(&self, v: &Volume) -> Result<()> {
        if v.dims() != self.image_dims {
            return Err(Error::shape(format!(
                "expected image dims {:?}, got {:?}",
                self.image_dims,
                v.dims()
            )));
        }
        Ok(())
    }
}

/// The patch-grabbing operator `G_c` for every patch of one offset.
pub fn extract_patches(v_padded: &Volume, grid: &PatchGrid, offset_index: usize) -> Result<Vec<Volume>> {
    grid.check_padded(v_padded)?;
    let size = grid.patch_dims();
    Ok(grid
        .patch_starts(offset_index)?
        .into_iter()
        .map(|s| v_padded.crop(s, size))
        .collect())
}

/// Adjoint of [`extract_patches`]: scatters patches back, border left at zero.
pub fn insert_patches(patches: &[Volume], grid: &PatchGrid, offset_index: usize) -> Result<Volume> {
    let starts = grid.patch_starts(offset_index)?;
    if patches.len() != starts.len() {
        return Err(Error::shape(format!(
            "expected {} patches, got {}",
            starts.len(),
            patches.len()
        )));
    }
    if let Some(bad) = patches.iter().find(|p| p.dims() != grid.patch_dims()) {
        return Err(Error::shape(format!(
            "patch dims {:?} differ from {:?}",
            bad.dims(),
            grid.patch_dims()
        )));
    }
    let mut out = Volume::zeros(grid.padded_dims());
    for (patch, s) in patches.iter().zip(starts) {
        out.paste(s, patch);
    }
    Ok(out)
}

/// Block-mean pooling of the unpadded image down to `P³`.
pub fn downsample(v: &Volume, grid: &PatchGrid) -> Result<Volume> {
    grid.check_image(v)?;
    let f = grid.tiles();
    let inv = 1.0 / (f[0] * f[1] * f[2]) as f64;
    let mut out = Volume::zeros(grid.patch_dims());
    let d = v.dims();
    for z in 0..d[2] {
        for y in 0..d[1] {
            let row = v.index(0, y, z);
            for x in 0..d[0] {
                let o = out.index(x / f[0], y / f[1], z / f[2]);
                out.data[o] += v.data[row + x];
            }
        }
    }
    out.scale(inv);
    Ok(out)
}

/// Exact transpose of [`downsample`].
pub fn downsample_adjoint(g: &Volume, grid: &PatchGrid) -> Result<Volume> {
    if g.dims() != grid.patch_dims() {
        return Err(Error::shape(format!(
            "expected coarse dims {:?}, got {:?}",
            grid.patch_dims(),
            g.dims()
        )));
    }
    let f = grid.tiles();
    let inv = 1.0 / (f[0] * f[1] * f[2]) as f64;
    Ok(Volume::from_fn(grid.image_dims(), |x, y, z| g.get(x / f[0], y / f[1], z / f[2]) * inv))
}

/// Voxel coordinate arrays on the padded volume, each axis mapped onto [-1, 1].
#[derive(Debug, Clone)]
pub struct PositionalField {
    pub px: Volume,
    pub py: Volume,
    pub pz: Volume,
}

impl PositionalField {
    pub fn new(grid: &PatchGrid) -> Self {
        let d = grid.padded_dims();
        let coord = |i: usize, n: usize| {
            if n <= 1 {
                0.0
            } else if i == n - 1 {
                1.0
            } else {
                -1.0 + 2.0 * i as f64 / (n - 1) as f64
            }
        };
        PositionalField {
            px: Volume::from_fn(d, |x, _, _| coord(x, d[0])),
            py: Volume::from_fn(d, |_, y, _| coord(y, d[1])),
            pz: Volume::from_fn(d, |_, _, z| coord(z, d[2])),
        }
    }

    /// Coordinate patches at an arbitrary start corner.
    pub fn patch_at(&self, start: [usize; 3], size: usize) -> [Volume; 3] {
        let s = [size; 3];
        [self.px.crop(start, s), self.py.crop(start, s), self.pz.crop(start, s)]
    }
}

/// Same partition as [`extract_patches`] applied to the three coordinate arrays.
pub fn positional_patches(
    field: &PositionalField,
    grid: &PatchGrid,
    offset_index: usize,
) -> Result<Vec<[Volume; 3]>> {
    grid.check_padded(&field.px)?;
    Ok(grid
        .patch_starts(offset_index)?
        .into_iter()
        .map(|s| field.patch_at(s, grid.patch_size()))
        .collect())
}
