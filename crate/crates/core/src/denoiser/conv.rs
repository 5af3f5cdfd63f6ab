//! Small 3D convolutional noise predictor with hand-written gradients.
//!
//! Architecture: `depth` same-padded convolutions. The first `depth - 1`
//! are followed by SiLU; a linear projection of a sinusoidal timestep
//! embedding is added per channel after the first activation. The last
//! convolution maps to one output channel (predicted noise).
//!
//! Convolutions are lowered to im2col + GEMM. Parameter values live on the
//! f32 grid so that checkpoints round-trip exactly.

use rand::Rng;

use super::{Denoiser, DenoiserOutput, PatchInput, INPUT_CHANNELS};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::grid::Volume;
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvDenoiserConfig {
    pub width: usize,
    pub depth: usize,
    pub kernel: usize,
    pub embed_dim: usize,
    pub seed: u64,
    /// When false the downsampled-volume channel is zeroed on input.
    pub global_context: bool,
}

impl Default for ConvDenoiserConfig {
    fn default() -> Self {
        ConvDenoiserConfig { width: 32, depth: 4, kernel: 3, embed_dim: 16, seed: 0, global_context: true }
    }
}

impl ConvDenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.kernel == 0 || self.embed_dim == 0 {
            return Err(Error::invalid("network width, kernel and embedding size must be positive"));
        }
        if self.depth < 2 {
            return Err(Error::invalid("network depth must be at least 2"));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::invalid("kernel size must be odd"));
        }
        if !self.embed_dim.is_multiple_of(2) {
            return Err(Error::invalid("embedding size must be even"));
        }
        Ok(())
    }

    fn layer_channels(&self, l: usize) -> (usize, usize) {
        let cin = if l == 0 { INPUT_CHANNELS } else { self.width };
        let cout = if l + 1 == self.depth { 1 } else { self.width };
        (cin, cout)
    }

    /// Expected `(name, shape)` of every parameter tensor, in storage order.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let k = self.kernel;
        let mut out = Vec::new();
        for l in 0..self.depth {
            let (cin, cout) = self.layer_channels(l);
            out.push((format!("conv{l}.weight"), vec![cout, cin, k, k, k]));
            out.push((format!("conv{l}.bias"), vec![cout]));
        }
        out.push(("temb.weight".into(), vec![self.width, self.embed_dim]));
        out.push(("temb.bias".into(), vec![self.width]));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { name: name.into(), shape, data: vec![0.0; n] }
    }
}

/// Named parameter tensors of a [`ConvDenoiser`] (also used for gradients
/// and optimizer moments, which share the layout).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub tensors: Vec<Tensor>,
}

impl ConvParams {
    /// Uniform in ±1/√fan_in, rounded to f32.
    pub fn init(config: &ConvDenoiserConfig) -> Result<Self> {
        config.validate()?;
        let tensors = config
            .tensor_shapes()
            .into_iter()
            .enumerate()
            .map(|(i, (name, shape))| {
                let fan_in: usize = if shape.len() == 5 {
                    shape[1..].iter().product()
                } else if name == "temb.weight" {
                    shape[1]
                } else if name == "temb.bias" {
                    config.embed_dim
                } else {
                    // conv bias: same fan-in as its weight
                    let (cin, _) = config.layer_channels(i / 2);
                    cin * config.kernel.pow(3)
                };
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut r = rng::stream(config.seed, &[0x1417, i as u64]);
                let n = shape.iter().product();
                let data = (0..n).map(|_| round_f32(r.random_range(-bound..bound))).collect();
                Tensor { name, shape, data }
            })
            .collect();
        Ok(ConvParams { tensors })
    }

    pub fn zeros(config: &ConvDenoiserConfig) -> Self {
        ConvParams {
            tensors: config.tensor_shapes().into_iter().map(|(n, s)| Tensor::zeros(n, s)).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ConvParams {
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.name.clone(), t.shape.clone())).collect(),
        }
    }

    pub fn check(&self, config: &ConvDenoiserConfig) -> Result<()> {
        let shapes = config.tensor_shapes();
        if shapes.len() != self.tensors.len() {
            return Err(Error::shape(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape), t) in shapes.iter().zip(&self.tensors) {
            if &t.name != name || &t.shape != shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::shape(format!(
                    "parameter '{}' {:?} does not match expected '{name}' {shape:?}",
                    t.name, t.shape
                )));
            }
        }
        Ok(())
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.tensors.iter().flat_map(|t| t.data.iter())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.tensors.iter_mut().flat_map(|t| t.data.iter_mut())
    }

    /// `self += alpha * other`, same layout.
    pub fn axpy(&mut self, alpha: f64, other: &ConvParams) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.values_mut().for_each(|v| *v *= alpha);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }
}

pub(crate) fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

#[derive(Debug, Clone)]
pub struct ConvDenoiser {
    config: ConvDenoiserConfig,
    params: ConvParams,
}

/// Activations kept from the forward pass for the backward pass.
struct Cache {
    cols: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    emb: Vec<f64>,
}

impl ConvDenoiser {
    pub fn new(config: ConvDenoiserConfig, params: ConvParams) -> Result<Self> {
        config.validate()?;
        params.check(&config)?;
        Ok(ConvDenoiser { config, params })
    }

    pub fn init(config: ConvDenoiserConfig) -> Result<Self> {
        let params = ConvParams::init(&config)?;
        Ok(ConvDenoiser { config, params })
    }

    pub fn config(&self) -> &ConvDenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ConvParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ConvParams {
        &mut self.params
    }

    pub fn into_params(self) -> ConvParams {
        self.params
    }

    /// Predicted noise for one patch.
    pub fn forward(&self, input: &PatchInput) -> Result<Volume> {
        let (out, _) = self.forward_cached(input)?;
        Volume::from_vec(input.dims(), out)
    }

    /// Gradient of `⟨output_grad, forward(input)⟩` with respect to every
    /// parameter, plus the forward output.
    pub fn backward(&self, input: &PatchInput, output_grad: &Volume) -> Result<(Volume, ConvParams)> {
        if output_grad.dims() != input.dims() {
            return Err(Error::shape("output gradient must match the patch dims"));
        }
        let (out, cache) = self.forward_cached(input)?;
        let grads = self.backward_from_cache(input.dims(), &cache, output_grad.data());
        Ok((Volume::from_vec(input.dims(), out)?, grads))
    }

    fn weight(&self, l: usize) -> &[f64] {
        &self.params.tensors[2 * l].data
    }

    fn bias(&self, l: usize) -> &[f64] {
        &self.params.tensors[2 * l + 1].data
    }

    fn temb(&self) -> (&[f64], &[f64]) {
        let n = self.params.tensors.len();
        (&self.params.tensors[n - 2].data, &self.params.tensors[n - 1].data)
    }

    fn forward_cached(&self, input: &PatchInput) -> Result<(Vec<f64>, Cache)> {
        let dims = input.dims();
        let n = dims.iter().product::<usize>();
        let k = self.config.kernel;
        let kk = k.pow(3);

        let mut h = input.to_flat();
        if !self.config.global_context {
            h[n..2 * n].iter_mut().for_each(|v| *v = 0.0);
        }
        let emb = timestep_embedding(input.t, self.config.embed_dim);
        let (tw, tb) = self.temb();
        let proj: Vec<f64> = (0..self.config.width)
            .map(|c| tb[c] + tw[c * emb.len()..(c + 1) * emb.len()].iter().zip(&emb).map(|(w, e)| w * e).sum::<f64>())
            .collect();

        let mut cols = Vec::with_capacity(self.config.depth);
        let mut pre = Vec::with_capacity(self.config.depth);
        for l in 0..self.config.depth {
            let (cin, cout) = self.config.layer_channels(l);
            let col = im2col(&h, cin, dims, k);
            let mut z = vec![0.0; cout * n];
            gemm(cout, cin * kk, n, self.weight(l), (cin * kk, 1), &col, (n, 1), &mut z, 0.0);
            for (c, b) in self.bias(l).iter().enumerate() {
                z[c * n..(c + 1) * n].iter_mut().for_each(|v| *v += b);
            }
            if l + 1 == self.config.depth {
                cols.push(col);
                if z.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("denoiser output".into()));
                }
                return Ok((z, Cache { cols, pre, emb }));
            }
            let mut a: Vec<f64> = z.iter().map(|&v| silu(v)).collect();
            if l == 0 {
                for (c, p) in proj.iter().enumerate() {
                    a[c * n..(c + 1) * n].iter_mut().for_each(|v| *v += p);
                }
            }
            cols.push(col);
            pre.push(z);
            h = a;
        }
        unreachable!("depth >= 2 is validated")
    }

    fn backward_from_cache(&self, dims: [usize; 3], cache: &Cache, output_grad: &[f64]) -> ConvParams {
        let n = dims.iter().product::<usize>();
        let k = self.config.kernel;
        let kk = k.pow(3);
        let depth = self.config.depth;
        let mut grads = self.params.zeros_like();
        let mut dz = output_grad.to_vec();
        let mut dproj = vec![0.0; self.config.width];

        for l in (0..depth).rev() {
            let (cin, cout) = self.config.layer_channels(l);
            let col = &cache.cols[l];
            {
                let dw = &mut grads.tensors[2 * l].data;
                // dW = dz · colᵀ
                gemm(cout, n, cin * kk, &dz, (n, 1), col, (1, n), dw, 0.0);
            }
            {
                let db = &mut grads.tensors[2 * l + 1].data;
                for c in 0..cout {
                    db[c] = dz[c * n..(c + 1) * n].iter().sum();
                }
            }
            if l == 0 {
                break;
            }
            // dcol = Wᵀ · dz
            let mut dcol = vec![0.0; cin * kk * n];
            gemm(cin * kk, cout, n, self.weight(l), (1, cin * kk), &dz, (n, 1), &mut dcol, 0.0);
            let dh = col2im(&dcol, cin, dims, k);
            if l == 1 {
                for (c, d) in dproj.iter_mut().enumerate() {
                    *d = dh[c * n..(c + 1) * n].iter().sum();
                }
            }
            let z = &cache.pre[l - 1];
            dz = dh.iter().zip(z).map(|(g, &zv)| g * silu_grad(zv)).collect();
        }

        let e = cache.emb.len();
        let nt = grads.tensors.len();
        {
            let tw = &mut grads.tensors[nt - 2].data;
            for c in 0..self.config.width {
                for j in 0..e {
                    tw[c * e + j] = dproj[c] * cache.emb[j];
                }
            }
        }
        grads.tensors[nt - 1].data.copy_from_slice(&dproj);
        grads
    }
}

impl Denoiser for ConvDenoiser {
    fn denoise(&self, input: &PatchInput, schedule: &NoiseSchedule) -> Result<DenoiserOutput> {
        let eps = self.forward(input)?;
        DenoiserOutput::from_eps(input, eps, schedule)
    }
}

pub(crate) fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for j in 0..half {
        let freq = (-(10_000f64.ln()) * j as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[j] = arg.sin();
        out[j + half] = arg.cos();
    }
    out
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[inline]
fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

#[inline]
fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

/// `c = a·b + beta·c`; strides are `(row, col)`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() >= m * n);
    // SAFETY: bounds asserted above; `c` is a distinct mutable slice with row stride n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Visits every (channel, kernel tap, output row) with the source row and
/// the valid x range, for same-padded convolution.
#[inline]
fn for_each_tap(cin: usize, dims: [usize; 3], k: usize, mut f: impl FnMut(usize, usize, std::ops::Range<usize>, isize)) {
    let n = dims[0] * dims[1] * dims[2];
    let half = (k / 2) as isize;
    let kk = k * k * k;
    for c in 0..cin {
        for kz in 0..k {
            let dz = kz as isize - half;
            for ky in 0..k {
                let dy = ky as isize - half;
                for kx in 0..k {
                    let dx = kx as isize - half;
                    let row = c * kk + (kz * k + ky) * k + kx;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (dims[0] as isize - dx.max(0)).max(0) as usize;
                    if x0 >= x1 {
                        continue;
                    }
                    for z in 0..dims[2] {
                        let sz = z as isize + dz;
                        if sz < 0 || sz >= dims[2] as isize {
                            continue;
                        }
                        for y in 0..dims[1] {
                            let sy = y as isize + dy;
                            if sy < 0 || sy >= dims[1] as isize {
                                continue;
                            }
                            let dst = row * n + (z * dims[1] + y) * dims[0];
                            let src = c * n + (sz as usize * dims[1] + sy as usize) * dims[0];
                            f(dst, src, x0..x1, dx);
                        }
                    }
                }
            }
        }
    }
}

fn im2col(h: &[f64], cin: usize, dims: [usize; 3], k: usize) -> Vec<f64> {
    let n = dims[0] * dims[1] * dims[2];
    let mut col = vec![0.0; cin * k.pow(3) * n];
    for_each_tap(cin, dims, k, |dst, src, xr, dx| {
        let s0 = (src as isize + xr.start as isize + dx) as usize;
        let len = xr.end - xr.start;
        col[dst + xr.start..dst + xr.end].copy_from_slice(&h[s0..s0 + len]);
    });
    col
}

fn col2im(col: &[f64], cin: usize, dims: [usize; 3], k: usize) -> Vec<f64> {
    let n = dims[0] * dims[1] * dims[2];
    let mut h = vec![0.0; cin * n];
    for_each_tap(cin, dims, k, |dst, src, xr, dx| {
        let s0 = (src as isize + xr.start as isize + dx) as usize;
        let len = xr.end - xr.start;
        for (o, v) in h[s0..s0 + len].iter_mut().zip(&col[dst + xr.start..dst + xr.end]) {
            *o += v;
        }
    });
    h
}
