//! Model file layout, all integers and floats little-endian:
//!
//! ```text
//! magic        8 bytes  "TFADVDET"
//! version      u32      1
//! input_h      u32
//! input_w      u32
//! grid_s       u32
//! n_classes    u32
//! n_layers     u32      hidden 3x3 blocks
//! channels     u32 x n_layers
//! conf_thresh  f64
//! nms_iou      f64
//! n_params     u64
//! params       f32 x n_params
//! ```
//!
//! Parameters run layer by layer from the input, the 1x1 head last; within a
//! layer weights are `[c_out][c_in][ky][kx]` followed by `c_out` biases.

use std::path::Path;

use super::{DetectorConfig, DetectorModel};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 8] = b"TFADVDET";
pub const MODEL_VERSION: u32 = 1;

pub fn model_to_bytes(model: &DetectorModel) -> Vec<u8> {
    let c = model.config();
    let mut out = Vec::with_capacity(64 + 4 * model.params().len());
    out.extend_from_slice(MODEL_MAGIC);
    let u32le = |v: usize, out: &mut Vec<u8>| out.extend_from_slice(&(v as u32).to_le_bytes());
    u32le(MODEL_VERSION as usize, &mut out);
    for v in [c.input_h, c.input_w, c.grid_s, c.n_classes, c.channels.len()] {
        u32le(v, &mut out);
    }
    for &ch in &c.channels {
        u32le(ch, &mut out);
    }
    out.extend_from_slice(&c.conf_thresh.to_le_bytes());
    out.extend_from_slice(&c.nms_iou.to_le_bytes());
    out.extend_from_slice(&(model.params().len() as u64).to_le_bytes());
    for &p in model.params() {
        out.extend_from_slice(&(p as f32).to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() < n {
            return Err(Error::ModelFormat("truncated model file".into()));
        }
        let (a, b) = self.buf.split_at(n);
        self.buf = b;
        Ok(a)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()) as f64)
    }
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<DetectorModel> {
    let mut r = Reader { buf: bytes };
    if r.take(8)? != MODEL_MAGIC {
        return Err(Error::ModelFormat("bad magic".into()));
    }
    let version = r.u32()?;
    if version != MODEL_VERSION as usize {
        return Err(Error::ModelFormat(format!("unsupported version {version}")));
    }
    let (input_h, input_w, grid_s, n_classes, n_layers) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?);
    if n_layers > 64 {
        return Err(Error::ModelFormat(format!("implausible layer count {n_layers}")));
    }
    let channels = (0..n_layers).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let conf_thresh = r.f64()?;
    let nms_iou = r.f64()?;
    let n_params = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
    let config = DetectorConfig {
        input_h,
        input_w,
        grid_s,
        n_classes,
        channels,
        conf_thresh,
        nms_iou,
    };
    config.validate().map_err(|e| Error::ModelFormat(e.to_string()))?;
    if n_params != config.param_count() {
        return Err(Error::ModelFormat(format!(
            "{n_params} parameters stored, architecture has {}",
            config.param_count()
        )));
    }
    let params = (0..n_params).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
    if !r.buf.is_empty() {
        return Err(Error::ModelFormat("trailing bytes after parameters".into()));
    }
    DetectorModel::from_params(config, params)
}

pub fn save_model(model: &DetectorModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, model_to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<DetectorModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes)
}
