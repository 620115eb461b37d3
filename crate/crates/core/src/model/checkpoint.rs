//! Checkpoint file format, all values little-endian:
//!
//! ```text
//! magic          8 bytes "NSMODEL\0"
//! version        u32 = 1
//! config         u32 in_channels, in_height, in_width
//!                3 x u32 conv_channels
//!                u32 kernel_h, kernel_w
//!                f64 dropout_p
//!                u32 se_reduction, dense_units
//!                u8 attention
//!                f64 bn_momentum, bn_eps
//! step           u64
//! n_params       u32, then per parameter:
//!                  name (u32 length + UTF-8), u32 ndim, ndim x u32 dims, f64 values
//! n_bn           u32, then per layer: u32 len, len x f64 mean, len x f64 var
//! ```
//!
//! The parameter table must equal the one implied by the stored config;
//! a mismatch is a version error.

use std::path::Path;

use super::{ModelConfig, Param, RunningStats, SeizurePredictor};
use crate::binio::{Reader, Writer};
use crate::error::{bail, Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"NSMODEL\0";
pub const CHECKPOINT_VERSION: u32 = 1;

impl SeizurePredictor {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(CHECKPOINT_VERSION);
        let c = &self.cfg;
        for v in [c.in_channels, c.in_height, c.in_width] {
            w.u32(v as u32);
        }
        for v in c.conv_channels {
            w.u32(v as u32);
        }
        w.u32(c.kernel.0 as u32);
        w.u32(c.kernel.1 as u32);
        w.f64(c.dropout_p);
        w.u32(c.se_reduction as u32);
        w.u32(c.dense_units as u32);
        w.u8(u8::from(c.attention));
        w.f64(c.bn_momentum);
        w.f64(c.bn_eps);
        w.u64(self.step);
        w.u32(self.params.len() as u32);
        for p in &self.params {
            w.str(&p.name);
            w.u32(p.value.shape.len() as u32);
            for &d in &p.value.shape {
                w.u32(d as u32);
            }
            for &v in &p.value.data {
                w.f64(v);
            }
        }
        w.u32(self.running.len() as u32);
        for r in &self.running {
            w.u32(r.mean.len() as u32);
            r.mean.iter().chain(&r.var).for_each(|&v| w.f64(v));
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(8)? != MAGIC {
            bail!(Format, "not a model checkpoint");
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            bail!(Version, "checkpoint version {version}, this build reads {CHECKPOINT_VERSION}");
        }
        let mut u = || r.u32().map(|v| v as usize);
        let (in_channels, in_height, in_width) = (u()?, u()?, u()?);
        let conv_channels = [u()?, u()?, u()?];
        let kernel = (u()?, u()?);
        let dropout_p = r.f64()?;
        let se_reduction = r.u32()? as usize;
        let dense_units = r.u32()? as usize;
        let attention = r.u8()? != 0;
        let cfg = ModelConfig {
            in_channels,
            in_height,
            in_width,
            conv_channels,
            kernel,
            dropout_p,
            se_reduction,
            dense_units,
            attention,
            bn_momentum: r.f64()?,
            bn_eps: r.f64()?,
        };
        cfg.validate().map_err(|e| Error::Format(format!("stored config invalid: {e}")))?;
        let step = r.u64()?;
        let n_params = r.u32()? as usize;
        let layout = cfg.layout();
        if n_params != layout.len() {
            bail!(Version, "checkpoint has {n_params} parameter tensors, config implies {}", layout.len());
        }
        let mut params = Vec::with_capacity(n_params);
        for spec in &layout {
            let name = r.str()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if name != spec.name || shape != spec.shape {
                bail!(
                    Version,
                    "parameter table mismatch: found {name} {shape:?}, expected {} {:?}",
                    spec.name,
                    spec.shape
                );
            }
            let data = r.f64s(shape.iter().product())?;
            params.push(Param { name, value: Tensor { shape, data } });
        }
        let n_bn = r.u32()? as usize;
        if n_bn != 3 {
            bail!(Version, "checkpoint has {n_bn} batch-norm layers, expected 3");
        }
        let mut running = Vec::with_capacity(n_bn);
        for &c in &cfg.conv_channels {
            let len = r.u32()? as usize;
            if len != c {
                bail!(Version, "batch-norm statistics of length {len}, expected {c}");
            }
            running.push(RunningStats { mean: r.f64s(len)?, var: r.f64s(len)? });
        }
        if !r.is_done() {
            bail!(Format, "trailing bytes after checkpoint");
        }
        Ok(SeizurePredictor { cfg, params, running, step })
    }

    /// Like [`Self::from_bytes`] but also requires the architecture to match `expected`.
    pub fn from_bytes_expecting(bytes: &[u8], expected: &ModelConfig) -> Result<Self> {
        let m = Self::from_bytes(bytes)?;
        if m.cfg.layout() != expected.layout() {
            bail!(Version, "checkpoint architecture differs from the requested configuration");
        }
        Ok(m)
    }
}

pub fn save_checkpoint(m: &SeizurePredictor, path: &Path) -> Result<()> {
    std::fs::write(path, m.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<SeizurePredictor> {
    SeizurePredictor::from_bytes(&std::fs::read(path)?)
}
