//! Dense-matrix oracles shared by the integration tests.
#![allow(dead_code)]

use patchdiff::ct::{CtGeometry, Projector, Sinogram};
use patchdiff::grid::{downsample, downsample_adjoint, extract_patches, insert_patches, PatchGrid, Volume};
use patchdiff::rng;

pub fn random_vec(seed: u64, n: usize) -> Vec<f64> {
    rng::normal_vec(&mut rng::stream(seed, &[0xD15]), n)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-major `m × n` matrix of a linear map, built column by column.
pub fn dense(n_in: usize, f: impl Fn(&[f64]) -> Vec<f64>) -> Vec<Vec<f64>> {
    let mut cols = Vec::with_capacity(n_in);
    for j in 0..n_in {
        let mut e = vec![0.0; n_in];
        e[j] = 1.0;
        cols.push(f(&e));
    }
    let m = cols.first().map_or(0, |c| c.len());
    (0..m).map(|i| cols.iter().map(|c| c[i]).collect()).collect()
}

pub fn matvec(a: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    a.iter().map(|row| dot(row, x)).collect()
}

pub fn transpose(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.first().map_or(0, |r| r.len());
    (0..n).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

/// Largest |a_ij - b_ij| relative to max |a_ij|.
pub fn max_rel_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.iter().flatten().zip(b.iter().flatten()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

/// Gaussian elimination with partial pivoting on a square system.
pub fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// Least-squares solution `(AᵀA)⁻¹Aᵀy` of a full-column-rank system.
pub fn pinv_solve(a: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let at = transpose(a);
    let ata: Vec<Vec<f64>> = at.iter().map(|ri| at.iter().map(|rj| dot(ri, rj)).collect()).collect();
    solve(ata, matvec(&at, y))
}

/// `|<A x, y> - <x, A* y>| / max(|<A x, y>|, tiny)` on random vectors.
pub fn dot_test(n_in: usize, n_out: usize, fwd: impl Fn(&[f64]) -> Vec<f64>, adj: impl Fn(&[f64]) -> Vec<f64>, seed: u64) -> f64 {
    let x = random_vec(seed, n_in);
    let y = random_vec(seed + 1, n_out);
    let lhs = dot(&fwd(&x), &y);
    let rhs = dot(&x, &adj(&y));
    (lhs - rhs).abs() / lhs.abs().max(1e-300)
}

pub struct LinearCase {
    pub name: &'static str,
    pub n_in: usize,
    pub n_out: usize,
    pub fwd: Box<dyn Fn(&[f64]) -> Vec<f64>>,
    pub adj: Box<dyn Fn(&[f64]) -> Vec<f64>>,
}

impl LinearCase {
    /// Max relative entry difference between the dense forward matrix
    /// transposed and the dense adjoint, plus the random dot-product error.
    pub fn check(&self, seed: u64) -> (f64, f64) {
        let f = dense(self.n_in, &self.fwd);
        let a = dense(self.n_out, &self.adj);
        (max_rel_diff(&transpose(&f), &a), dot_test(self.n_in, self.n_out, &self.fwd, &self.adj, seed))
    }
}

fn flat(patches: Vec<Volume>) -> Vec<f64> {
    patches.into_iter().flat_map(|p| p.into_vec()).collect()
}

pub fn patch_case(image: [usize; 3], p: usize, offset: usize) -> LinearCase {
    let grid = PatchGrid::new(image, p).unwrap();
    let n_in: usize = grid.padded_dims().iter().product();
    let n_out = grid.patches_per_offset() * grid.patch_voxels();
    let g1 = grid;
    let g2 = grid;
    LinearCase {
        name: "patch extraction",
        n_in,
        n_out,
        fwd: Box::new(move |x| {
            flat(extract_patches(&Volume::from_vec(g1.padded_dims(), x.to_vec()).unwrap(), &g1, offset).unwrap())
        }),
        adj: Box::new(move |y| {
            let patches: Vec<Volume> =
                y.chunks(g2.patch_voxels()).map(|c| Volume::from_vec(g2.patch_dims(), c.to_vec()).unwrap()).collect();
            insert_patches(&patches, &g2, offset).unwrap().into_vec()
        }),
    }
}

pub fn downsample_case(image: [usize; 3], p: usize) -> LinearCase {
    let grid = PatchGrid::new(image, p).unwrap();
    let g1 = grid;
    let g2 = grid;
    LinearCase {
        name: "downsampling",
        n_in: image.iter().product(),
        n_out: grid.patch_voxels(),
        fwd: Box::new(move |x| downsample(&Volume::from_vec(g1.image_dims(), x.to_vec()).unwrap(), &g1).unwrap().into_vec()),
        adj: Box::new(move |y| {
            downsample_adjoint(&Volume::from_vec(g2.patch_dims(), y.to_vec()).unwrap(), &g2).unwrap().into_vec()
        }),
    }
}

pub fn projector_case(dims: [usize; 3], views: usize) -> LinearCase {
    let geom = CtGeometry::for_image(views, dims[0], dims[1]).unwrap();
    let proj = std::rc::Rc::new(Projector::new(&geom, dims).unwrap());
    let n_out = views * geom.n_det * dims[2];
    let (p1, p2) = (proj.clone(), proj);
    let angles = geom.angles.clone();
    let n_det = geom.n_det;
    LinearCase {
        name: "projection",
        n_in: dims.iter().product(),
        n_out,
        fwd: Box::new(move |x| p1.project(&Volume::from_vec(dims, x.to_vec()).unwrap()).unwrap().data().to_vec()),
        adj: Box::new(move |y| {
            let s = Sinogram::from_vec(angles.clone(), n_det, dims[2], y.to_vec()).unwrap();
            p2.backproject(&s).unwrap().into_vec()
        }),
    }
}
