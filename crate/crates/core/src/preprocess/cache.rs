//! Per-subject segment cache.
//!
//! Byte layout (all little-endian):
//!
//! ```text
//! magic        8 bytes  "NSSEGv1\0"
//! version      u32      = 1
//! subject_id   u32 length + UTF-8 bytes
//! fs           u32      Hz
//! window_s     f64      seconds
//! n_channels   u32
//! n_samples    u32      samples per channel per segment
//! n_segments   u32
//! per segment: label u8 (0 interictal, 1 preictal), t_start f64
//! blocks:      n_segments x n_channels x n_samples f32, channel-major
//! ```

use super::windows::{Class, LabeledSegment};
use crate::binio::{Reader, Writer};
use crate::error::{bail, Error, Result};

const MAGIC: &[u8; 8] = b"NSSEGv1\0";
pub const SEGMENT_CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentCache {
    pub subject_id: String,
    pub fs: u32,
    pub window_s: f64,
    pub segments: Vec<LabeledSegment>,
}

impl SegmentCache {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let n_channels = self.segments.first().map_or(0, |s| s.n_channels);
        let n_samples = self.segments.first().map_or(0, |s| s.samples_per_channel());
        if self
            .segments
            .iter()
            .any(|s| s.n_channels != n_channels || s.data.len() != n_channels * n_samples)
        {
            bail!(Shape, "segments in one cache must share a shape");
        }
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(SEGMENT_CACHE_VERSION);
        w.str(&self.subject_id);
        w.u32(self.fs);
        w.f64(self.window_s);
        w.u32(n_channels as u32);
        w.u32(n_samples as u32);
        w.u32(self.segments.len() as u32);
        for s in &self.segments {
            w.u8(s.label.as_u8());
            w.f64(s.t_start);
        }
        for s in &self.segments {
            for &v in &s.data {
                w.f32(v);
            }
        }
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(8)? != MAGIC {
            bail!(Format, "not a segment cache");
        }
        let version = r.u32()?;
        if version != SEGMENT_CACHE_VERSION {
            return Err(Error::Version(format!(
                "segment cache version {version}, expected {SEGMENT_CACHE_VERSION}"
            )));
        }
        let subject_id = r.str()?;
        let fs = r.u32()?;
        let window_s = r.f64()?;
        let n_channels = r.u32()? as usize;
        let n_samples = r.u32()? as usize;
        let n_segments = r.u32()? as usize;
        let mut meta = Vec::with_capacity(n_segments.min(1 << 20));
        for _ in 0..n_segments {
            let label = r.u8()?;
            let label = Class::from_u8(label).ok_or_else(|| Error::Format(format!("bad label {label}")))?;
            meta.push((label, r.f64()?));
        }
        let mut segments = Vec::with_capacity(meta.len());
        for (label, t_start) in meta {
            segments.push(LabeledSegment {
                subject_id: subject_id.clone(),
                label,
                t_start,
                n_channels,
                data: r.f32s(n_channels * n_samples)?,
            });
        }
        if !r.is_done() {
            bail!(Format, "trailing bytes after segment data");
        }
        Ok(SegmentCache {
            subject_id,
            fs,
            window_s,
            segments,
        })
    }
}
