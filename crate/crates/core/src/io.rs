//! Binary file formats. All integers and floats are little-endian; floats
//! are 32-bit. Writes go to a temporary file in the target directory and
//! are renamed into place.
//!
//! Volume (`PDV1`): magic, nx, ny, nz (u32), dtype (u32, 0 = f32), then
//! nx·ny·nz values, x fastest.
//!
//! Sinogram (`PDS1`): magic, n_views, n_det, nz (u32), n_views angles in
//! radians (f32), then values ordered bin fastest, then view, then z.
//!
//! Checkpoint (`PDCK`): magic, version (u32), config length (u32) and UTF-8
//! config text, then two tensor groups (raw, EMA), each a tensor count (u32)
//! followed by tensors: name length (u16), name, ndim (u8), dims (u32 each),
//! values (f32).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::ct::Sinogram;
use crate::denoiser::{ConvDenoiser, ConvDenoiserConfig, ConvParams, Tensor};
use crate::error::{Error, Result};
use crate::grid::Volume;
use crate::training::TrainState;

pub const VOLUME_MAGIC: &[u8; 4] = b"PDV1";
pub const SINOGRAM_MAGIC: &[u8; 4] = b"PDS1";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PDCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F32: u32 = 0;

/// Writes through a temporary sibling file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

struct Cursor<R> {
    inner: R,
}

impl<R: Read> Cursor<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner.read_exact(&mut b).map_err(truncated)?;
        Ok(b)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut buf = vec![0u8; n * 4];
        self.inner.read_exact(&mut buf).map_err(truncated)?;
        Ok(buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect())
    }

    fn string(&mut self, n: usize) -> Result<String> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(truncated)?;
        String::from_utf8(buf).map_err(|_| Error::format("text field is not valid UTF-8"))
    }

    fn expect_end(&mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b)? {
            0 => Ok(()),
            _ => Err(Error::format("trailing bytes after payload")),
        }
    }
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::format("file is truncated")
    } else {
        Error::Io(e)
    }
}

fn put_f32s(out: &mut Vec<u8>, values: &[f64]) {
    out.reserve(values.len() * 4);
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn dim_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::invalid(format!("{what} {n} exceeds the format limit")))
}

fn check_magic(got: [u8; 4], want: &[u8; 4]) -> Result<()> {
    if &got != want {
        return Err(Error::format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&got),
            String::from_utf8_lossy(want)
        )));
    }
    Ok(())
}

fn check_payload(available: Option<u64>, header: u64, count: usize) -> Result<()> {
    if let Some(len) = available {
        let need = header + 4 * count as u64;
        if len != need {
            return Err(Error::format(format!("header promises {need} bytes, file has {len}")));
        }
    }
    Ok(())
}

// ---- volumes ----

pub fn encode_volume(v: &Volume) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(20 + 4 * v.len());
    out.extend_from_slice(VOLUME_MAGIC);
    for d in v.dims() {
        out.extend_from_slice(&dim_u32(d, "volume dimension")?.to_le_bytes());
    }
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    put_f32s(&mut out, v.data());
    Ok(out)
}

fn read_volume<R: Read>(r: R, available: Option<u64>) -> Result<Volume> {
    let mut c = Cursor { inner: r };
    check_magic(c.bytes()?, VOLUME_MAGIC)?;
    let dims = [c.u32()? as usize, c.u32()? as usize, c.u32()? as usize];
    let dtype = c.u32()?;
    if dtype != DTYPE_F32 {
        return Err(Error::format(format!("unsupported volume dtype {dtype}")));
    }
    if dims.contains(&0) {
        return Err(Error::format(format!("volume dims {dims:?} must be positive")));
    }
    let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::format("volume too large"))?;
    check_payload(available, 20, n)?;
    let data = c.f32s(n)?;
    c.expect_end()?;
    Volume::from_vec(dims, data)
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    read_volume(bytes, Some(bytes.len() as u64))
}

pub fn save_volume(path: &Path, v: &Volume) -> Result<()> {
    write_atomic(path, &encode_volume(v)?)
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let f = File::open(path)?;
    let len = f.metadata()?.len();
    read_volume(BufReader::new(f), Some(len))
}

/// Headerless little-endian f32 volume, x fastest.
pub fn import_raw(path: &Path, dims: [usize; 3]) -> Result<Volume> {
    let bytes = std::fs::read(path)?;
    let n = dims[0] * dims[1] * dims[2];
    if bytes.len() != 4 * n {
        return Err(Error::format(format!(
            "raw file has {} bytes, {dims:?} needs {}",
            bytes.len(),
            4 * n
        )));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    Volume::from_vec(dims, data)
}

// ---- sinograms ----

pub fn encode_sinogram(s: &Sinogram) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + 4 * (s.n_views() + s.data().len()));
    out.extend_from_slice(SINOGRAM_MAGIC);
    out.extend_from_slice(&dim_u32(s.n_views(), "view count")?.to_le_bytes());
    out.extend_from_slice(&dim_u32(s.n_det(), "detector count")?.to_le_bytes());
    out.extend_from_slice(&dim_u32(s.nz(), "slice count")?.to_le_bytes());
    put_f32s(&mut out, s.angles());
    put_f32s(&mut out, s.data());
    Ok(out)
}

fn read_sinogram<R: Read>(r: R, available: Option<u64>) -> Result<Sinogram> {
    let mut c = Cursor { inner: r };
    check_magic(c.bytes()?, SINOGRAM_MAGIC)?;
    let (nv, nd, nz) = (c.u32()? as usize, c.u32()? as usize, c.u32()? as usize);
    if nv == 0 || nd == 0 || nz == 0 {
        return Err(Error::format(format!("sinogram dims ({nv}, {nd}, {nz}) must be positive")));
    }
    let n = nv
        .checked_mul(nd)
        .and_then(|a| a.checked_mul(nz))
        .ok_or_else(|| Error::format("sinogram too large"))?;
    check_payload(available, 16, nv + n)?;
    let angles = c.f32s(nv)?;
    let data = c.f32s(n)?;
    c.expect_end()?;
    Sinogram::from_vec(angles, nd, nz, data)
}

pub fn decode_sinogram(bytes: &[u8]) -> Result<Sinogram> {
    read_sinogram(bytes, Some(bytes.len() as u64))
}

pub fn save_sinogram(path: &Path, s: &Sinogram) -> Result<()> {
    write_atomic(path, &encode_sinogram(s)?)
}

pub fn load_sinogram(path: &Path) -> Result<Sinogram> {
    let f = File::open(path)?;
    let len = f.metadata()?.len();
    read_sinogram(BufReader::new(f), Some(len))
}

// ---- checkpoints ----

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub raw: Vec<Tensor>,
    pub ema: Vec<Tensor>,
}

const STEP_TENSOR: &str = "train.step";
const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

impl Checkpoint {
    /// Raw group: parameters, Adam moments, step counter. EMA group: shadow parameters.
    pub fn from_state(state: &TrainState, config: &str) -> Self {
        let mut raw = state.net.params().tensors.clone();
        raw.extend(state.adam_m.tensors.iter().map(|t| Tensor { name: format!("{ADAM_M}{}", t.name), ..t.clone() }));
        raw.extend(state.adam_v.tensors.iter().map(|t| Tensor { name: format!("{ADAM_V}{}", t.name), ..t.clone() }));
        // split the counter so it stays exact in f32
        let step = state.step;
        raw.push(Tensor {
            name: STEP_TENSOR.into(),
            shape: vec![2],
            data: vec![(step >> 20) as f64, (step & 0xF_FFFF) as f64],
        });
        Checkpoint { config: config.to_string(), raw, ema: state.ema.tensors.clone() }
    }

    fn group(tensors: &[Tensor], prefix: &str, config: &ConvDenoiserConfig) -> Result<ConvParams> {
        let shapes = config.tensor_shapes();
        let picked = shapes
            .iter()
            .map(|(name, _)| {
                let full = format!("{prefix}{name}");
                tensors
                    .iter()
                    .find(|t| t.name == full)
                    .map(|t| Tensor { name: name.clone(), ..t.clone() })
                    .ok_or_else(|| Error::format(format!("checkpoint lacks tensor '{full}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        let p = ConvParams { tensors: picked };
        p.check(config)?;
        Ok(p)
    }

    pub fn raw_params(&self, config: &ConvDenoiserConfig) -> Result<ConvParams> {
        Self::group(&self.raw, "", config)
    }

    pub fn ema_params(&self, config: &ConvDenoiserConfig) -> Result<ConvParams> {
        Self::group(&self.ema, "", config)
    }

    /// Inference network with the EMA weights.
    pub fn ema_denoiser(&self, config: &ConvDenoiserConfig) -> Result<ConvDenoiser> {
        ConvDenoiser::new(config.clone(), self.ema_params(config)?)
    }

    pub fn to_state(&self, config: &ConvDenoiserConfig) -> Result<TrainState> {
        let net = ConvDenoiser::new(config.clone(), self.raw_params(config)?)?;
        let zeros = net.params().zeros_like();
        let adam_m = Self::group(&self.raw, ADAM_M, config).unwrap_or_else(|_| zeros.clone());
        let adam_v = Self::group(&self.raw, ADAM_V, config).unwrap_or(zeros);
        let step = self
            .raw
            .iter()
            .find(|t| t.name == STEP_TENSOR && t.data.len() == 2)
            .map(|t| ((t.data[0] as u64) << 20) | t.data[1] as u64)
            .unwrap_or(0);
        Ok(TrainState { net, ema: self.ema_params(config)?, adam_m, adam_v, step })
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&dim_u32(ck.config.len(), "config length")?.to_le_bytes());
    out.extend_from_slice(ck.config.as_bytes());
    for group in [&ck.raw, &ck.ema] {
        out.extend_from_slice(&dim_u32(group.len(), "tensor count")?.to_le_bytes());
        for t in group.iter() {
            let name_len =
                u16::try_from(t.name.len()).map_err(|_| Error::invalid(format!("tensor name '{}' too long", t.name)))?;
            let ndim = u8::try_from(t.shape.len()).map_err(|_| Error::invalid("too many tensor dims"))?;
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::shape(format!("tensor '{}' shape/data mismatch", t.name)));
            }
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(ndim);
            for &d in &t.shape {
                out.extend_from_slice(&dim_u32(d, "tensor dimension")?.to_le_bytes());
            }
            put_f32s(&mut out, &t.data);
        }
    }
    Ok(out)
}

fn read_checkpoint<R: Read>(r: R) -> Result<Checkpoint> {
    let mut c = Cursor { inner: r };
    check_magic(c.bytes()?, CHECKPOINT_MAGIC)?;
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let clen = c.u32()? as usize;
    if clen > 1 << 20 {
        return Err(Error::format("config echo is implausibly large"));
    }
    let config = c.string(clen)?;
    let mut groups = Vec::with_capacity(2);
    for _ in 0..2 {
        let count = c.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let nlen = c.u16()? as usize;
            let name = c.string(nlen)?;
            let ndim = c.u8()? as usize;
            let shape = (0..ndim).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n <= 1 << 28)
                .ok_or_else(|| Error::format(format!("tensor '{name}' is implausibly large")))?;
            let data = c.f32s(n)?;
            tensors.push(Tensor { name, shape, data });
        }
        groups.push(tensors);
    }
    c.expect_end()?;
    let ema = groups.pop().expect("two groups");
    let raw = groups.pop().expect("two groups");
    Ok(Checkpoint { config, raw, ema })
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    read_checkpoint(bytes)
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ck)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

/// Writes `name=value` lines.
pub fn write_metrics<W: Write>(mut w: W, metrics: &[(&str, String)]) -> Result<()> {
    for (k, v) in metrics {
        writeln!(w, "{k}={v}")?;
    }
    Ok(())
}

/// Metrics as a two-row CSV (header, values).
pub fn save_metrics_csv(path: &Path, metrics: &[(&str, String)]) -> Result<()> {
    let mut w = BufWriter::new(Vec::new());
    let header: Vec<&str> = metrics.iter().map(|(k, _)| *k).collect();
    let values: Vec<&str> = metrics.iter().map(|(_, v)| v.as_str()).collect();
    writeln!(w, "{}", header.join(","))?;
    writeln!(w, "{}", values.join(","))?;
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(path, &bytes)
}
