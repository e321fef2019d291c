//! Checkpoint container shared by the completion model and the upsampler.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "RCKPT1" | header_len | header (UTF-8 JSON) | array_count |
//!     { name_len | name (UTF-8) | value_count | value_count × f32 }*
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

const MAGIC: &[u8; 6] = b"RCKPT1";

/// JSON header of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    /// `"biretnet"` or `"upsampler"`.
    pub kind: String,
    /// Architecture of the stored arrays.
    pub config: serde_json::Value,
    /// SHA-256 of the palette the model was trained with.
    pub palette_hash: Option<String>,
    /// Optimizer steps taken.
    pub step: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub arrays: Vec<(String, Vec<f32>)>,
}

impl Checkpoint {
    pub fn new(header: Header) -> Self {
        Self {
            header,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, values: Vec<f32>) {
        self.arrays.push((name.into(), values));
    }

    /// Appends every parameter under `prefix + name`.
    pub fn push_params(&mut self, prefix: &str, set: &ParamSet) {
        for id in set.ids() {
            let vals = set.get(id).data().iter().map(|&v| v as f32).collect();
            self.push(format!("{prefix}{}", set.name(id)), vals);
        }
    }

    pub fn array(&self, name: &str) -> Option<&[f32]> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    /// Overwrites every parameter of `set` from the array `prefix + name`.
    pub fn fill_params(&self, prefix: &str, set: &mut ParamSet) -> Result<()> {
        for id in set.ids().collect::<Vec<_>>() {
            let name = format!("{prefix}{}", set.name(id));
            let vals = self
                .array(&name)
                .ok_or_else(|| Error::format(0, format!("checkpoint lacks array {name}")))?;
            let dst = set.get_mut(id);
            if vals.len() != dst.numel() {
                return Err(Error::format(
                    0,
                    format!("array {name} has {} values, expected {}", vals.len(), dst.numel()),
                ));
            }
            for (d, &v) in dst.data_mut().iter_mut().zip(vals) {
                *d = v as f64;
            }
        }
        Ok(())
    }

    /// Tensors shaped like `set`, read from `prefix + name`.
    pub fn tensors_like(&self, prefix: &str, set: &ParamSet) -> Result<Vec<Tensor>> {
        let mut scratch = set.clone();
        self.fill_params(prefix, &mut scratch)?;
        Ok(scratch.ids().map(|id| scratch.get(id).clone()).collect())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)
            .map_err(|e| Error::format(0, format!("header serialization: {e}")))?;
        let mut out = MAGIC.to_vec();
        out.extend((header.len() as u32).to_le_bytes());
        out.extend(header);
        out.extend((self.arrays.len() as u32).to_le_bytes());
        for (name, vals) in &self.arrays {
            out.extend((name.len() as u32).to_le_bytes());
            out.extend(name.as_bytes());
            out.extend((vals.len() as u32).to_le_bytes());
            for v in vals {
                out.extend(v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(6)? != MAGIC {
            return Err(Error::format(0, "missing RCKPT1 magic"));
        }
        let len = r.u32()? as usize;
        let at = r.pos;
        let header: Header = serde_json::from_slice(r.take(len)?)
            .map_err(|e| Error::format(at, format!("bad header JSON: {e}")))?;
        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.u32()? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::format(at, "array name is not UTF-8"))?
                .to_owned();
            let m = r.u32()? as usize;
            let raw = r.take(m.checked_mul(4).ok_or_else(|| Error::format(r.pos, "array too large"))?)?;
            let vals = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            arrays.push((name, vals));
        }
        if r.pos != bytes.len() {
            return Err(Error::format(r.pos, "trailing bytes after last array"));
        }
        Ok(Self { header, arrays })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.pos, format!("truncated: wanted {n} more bytes")))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert_eq, proptest};
    use proptest::strategy::Strategy;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(Header {
            kind: "biretnet".into(),
            config: serde_json::json!({"d": 4}),
            palette_hash: Some("ab".into()),
            step: 3,
            seed: 9,
        });
        c.push("a.w", vec![1.0, -2.5, f32::MIN_POSITIVE]);
        c.push("b", vec![]);
        c
    }

    #[test]
    fn byte_round_trip() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..6], b"RCKPT1");
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), c);
    }

    #[test]
    fn truncation_and_garbage_are_format_errors() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 5, 9, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Format { .. })), "cut {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra), Err(Error::Format { .. })));
        let mut bad = bytes;
        bad[10] = b'!';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format { offset: 10, .. })));
    }

    #[test]
    fn params_fill_by_name() {
        let mut set = ParamSet::new();
        set.add("x", Tensor::new(vec![2], vec![0.25, 0.5]).unwrap());
        let mut c = sample();
        c.push_params("p/", &set);
        let mut other = ParamSet::new();
        let id = other.add("x", Tensor::zeros(&[2]));
        c.fill_params("p/", &mut other).unwrap();
        assert_eq!(other.get(id).data(), &[0.25, 0.5]);
        let mut wrong = ParamSet::new();
        wrong.add("x", Tensor::zeros(&[3]));
        assert!(c.fill_params("p/", &mut wrong).is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_f32_values_round_trip(vals in proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 0..40)) {
            let mut c = sample();
            c.push("v", vals.clone());
            let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(back.array("v").unwrap(), vals.as_slice());
        }
    }
}
