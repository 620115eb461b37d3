//! Per-subject feature cache.
//!
//! ```text
//! magic        8 bytes  "NSMFCv1\0"
//! version      u32      = 1
//! subject_id   u32 length + UTF-8 bytes
//! shape        3 x u32  (channels, coefficients, frames)
//! count        u32
//! labels       count x u8
//! t_starts     count x f64
//! values       count x channels x coefficients x frames f32, channel-major
//! ```
//!
//! All integers and floats little-endian.

use super::MfccTensor;
use crate::binio::{Reader, Writer};
use crate::error::{bail, Error, Result};
use crate::preprocess::Class;

const MAGIC: &[u8; 8] = b"NSMFCv1\0";
pub const FEATURE_CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCache {
    pub subject_id: String,
    pub shape: [usize; 3],
    pub tensors: Vec<MfccTensor<f32>>,
}

impl FeatureCache {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let len: usize = self.shape.iter().product();
        if self.tensors.iter().any(|t| t.shape != self.shape || t.values.len() != len) {
            bail!(Shape, "feature tensors must all have shape {:?}", self.shape);
        }
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(FEATURE_CACHE_VERSION);
        w.str(&self.subject_id);
        for d in self.shape {
            w.u32(d as u32);
        }
        w.u32(self.tensors.len() as u32);
        for t in &self.tensors {
            w.u8(t.label.as_u8());
        }
        for t in &self.tensors {
            w.f64(t.t_start);
        }
        for t in &self.tensors {
            for &v in &t.values {
                w.f32(v);
            }
        }
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(8)? != MAGIC {
            bail!(Format, "not a feature cache");
        }
        let version = r.u32()?;
        if version != FEATURE_CACHE_VERSION {
            return Err(Error::Version(format!(
                "feature cache version {version}, expected {FEATURE_CACHE_VERSION}"
            )));
        }
        let subject_id = r.str()?;
        let shape = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        let count = r.u32()? as usize;
        let labels = r
            .take(count)?
            .iter()
            .map(|&l| Class::from_u8(l).ok_or_else(|| Error::Format(format!("bad label {l}"))))
            .collect::<Result<Vec<_>>>()?;
        let t_starts = r.f64s(count)?;
        let len: usize = shape.iter().product();
        let mut tensors = Vec::with_capacity(count);
        for (label, t_start) in labels.into_iter().zip(t_starts) {
            tensors.push(MfccTensor {
                subject_id: subject_id.clone(),
                label,
                t_start,
                shape,
                values: r.f32s(len)?,
            });
        }
        if !r.is_done() {
            bail!(Format, "trailing bytes after feature data");
        }
        Ok(FeatureCache {
            subject_id,
            shape,
            tensors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_truncation() {
        let tensors = (0..3)
            .map(|i| MfccTensor {
                subject_id: "s9".into(),
                label: if i % 2 == 0 { Class::Interictal } else { Class::Preictal },
                t_start: 5.0 * i as f64,
                shape: [2, 3, 4],
                values: (0..24).map(|k| (k * i) as f32 - 0.5).collect(),
            })
            .collect();
        let cache = FeatureCache {
            subject_id: "s9".into(),
            shape: [2, 3, 4],
            tensors,
        };
        let bytes = cache.to_bytes().unwrap();
        assert_eq!(FeatureCache::from_bytes(&bytes).unwrap(), cache);
        assert!(FeatureCache::from_bytes(&bytes[..bytes.len() - 2]).is_err());
        assert!(FeatureCache::from_bytes(&bytes[1..]).is_err());
    }
}
