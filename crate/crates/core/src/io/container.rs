//! Single-file array container.
//!
//! Layout: the line `FMGPB1`, one line of canonical JSON manifest, zero
//! padding up to an 8-byte file offset, then the payload. Every array is
//! stored little-endian at an 8-byte aligned offset relative to the start
//! of the payload.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::json::canonical;
use crate::numkit::Mat;

pub const MAGIC: &[u8] = b"FMGPB1\n";
pub const FORMAT_VERSION: u64 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F64(Vec<f64>),
    I64(Vec<i64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub rows: usize,
    pub cols: usize,
    pub data: ArrayData,
}

impl Array {
    pub fn f64(m: &Mat) -> Self {
        Array {
            rows: m.rows(),
            cols: m.cols(),
            data: ArrayData::F64(m.as_slice().to_vec()),
        }
    }

    pub fn f64_col(v: &[f64]) -> Self {
        Self::f64(&Mat::col(v))
    }

    pub fn i64_col(v: &[i64]) -> Self {
        Array {
            rows: v.len(),
            cols: 1,
            data: ArrayData::I64(v.to_vec()),
        }
    }

    fn len(&self) -> usize {
        match &self.data {
            ArrayData::F64(v) => v.len(),
            ArrayData::I64(v) => v.len(),
        }
    }

    fn dtype(&self) -> &'static str {
        match self.data {
            ArrayData::F64(_) => "f64",
            ArrayData::I64(_) => "i64",
        }
    }
}

/// Metadata plus named arrays, in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub meta: BTreeMap<String, Value>,
    pub arrays: Vec<(String, Array)>,
}

impl Container {
    pub fn new(kind: &str) -> Self {
        let mut c = Container::default();
        c.meta.insert("kind".into(), json!(kind));
        c
    }

    pub fn push(&mut self, name: &str, a: Array) {
        self.arrays.push((name.to_string(), a));
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn kind(&self) -> Option<&str> {
        self.meta.get("kind").and_then(Value::as_str)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        match self.kind() {
            Some(k) if k == kind => Ok(()),
            other => Err(Error::Format(format!("expected a {kind} file, found {other:?}"))),
        }
    }

    pub fn mat(&self, name: &str) -> Result<Mat> {
        let a = self
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing array `{name}`")))?;
        match &a.data {
            ArrayData::F64(v) => Mat::from_vec(a.rows, a.cols, v.clone()),
            ArrayData::I64(_) => Err(Error::Format(format!("array `{name}` is not f64"))),
        }
    }

    pub fn opt_mat(&self, name: &str) -> Result<Option<Mat>> {
        match self.get(name) {
            Some(_) => self.mat(name).map(Some),
            None => Ok(None),
        }
    }

    pub fn ints(&self, name: &str) -> Result<Vec<i64>> {
        let a = self
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing array `{name}`")))?;
        match &a.data {
            ArrayData::I64(v) => Ok(v.clone()),
            ArrayData::F64(_) => Err(Error::Format(format!("array `{name}` is not i64"))),
        }
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Format(format!("manifest lacks string `{key}`")))
    }

    pub fn meta_u64(&self, key: &str) -> Option<u64> {
        self.meta.get(key).and_then(Value::as_u64)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::new();
        let mut offset = 0usize;
        for (name, a) in &self.arrays {
            entries.push(json!({
                "name": name,
                "shape": [a.rows, a.cols],
                "dtype": a.dtype(),
                "offset": offset,
            }));
            offset += 8 * a.len();
        }
        let manifest = json!({
            "version": FORMAT_VERSION,
            "meta": Value::Object(self.meta.clone().into_iter().collect()),
            "arrays": entries,
            "payload_bytes": offset,
        });
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(canonical(&manifest).as_bytes());
        out.push(b'\n');
        while !out.len().is_multiple_of(8) {
            out.push(0);
        }
        for (_, a) in &self.arrays {
            match &a.data {
                ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: &str| Error::Format(m.to_string());
        if !bytes.starts_with(MAGIC) {
            return Err(fmt("bad magic"));
        }
        let rest = &bytes[MAGIC.len()..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| fmt("unterminated manifest"))?;
        let text = std::str::from_utf8(&rest[..nl]).map_err(|_| fmt("manifest is not UTF-8"))?;
        let manifest: Value =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("manifest: {e}")))?;
        if manifest["version"].as_u64() != Some(FORMAT_VERSION) {
            return Err(Error::Format(format!(
                "unsupported format version {}",
                manifest["version"]
            )));
        }
        let mut start = MAGIC.len() + nl + 1;
        while !start.is_multiple_of(8) {
            if bytes.get(start) != Some(&0) {
                return Err(fmt("bad padding"));
            }
            start += 1;
        }
        let payload = bytes.get(start..).ok_or_else(|| fmt("truncated payload"))?;
        let declared = manifest["payload_bytes"]
            .as_u64()
            .ok_or_else(|| fmt("manifest lacks payload_bytes"))? as usize;
        if payload.len() < declared {
            return Err(fmt("truncated payload"));
        }
        if payload.len() > declared {
            return Err(fmt("trailing bytes after payload"));
        }
        let meta = match &manifest["meta"] {
            Value::Object(m) => m.clone().into_iter().collect(),
            _ => return Err(fmt("manifest meta must be an object")),
        };
        let mut arrays = Vec::new();
        let mut expected_offset = 0usize;
        for e in manifest["arrays"].as_array().ok_or_else(|| fmt("manifest lacks arrays"))? {
            let name = e["name"].as_str().ok_or_else(|| fmt("array without name"))?;
            let shape = e["shape"].as_array().ok_or_else(|| fmt("array without shape"))?;
            let dims: Vec<usize> = shape.iter().filter_map(|d| d.as_u64()).map(|d| d as usize).collect();
            if dims.len() != 2 || shape.len() != 2 {
                return Err(Error::Format(format!("array `{name}` needs a 2-d shape")));
            }
            let offset = e["offset"].as_u64().ok_or_else(|| fmt("array without offset"))? as usize;
            if offset != expected_offset || !offset.is_multiple_of(8) {
                return Err(Error::Format(format!("array `{name}` has a bad offset")));
            }
            let len = dims[0]
                .checked_mul(dims[1])
                .ok_or_else(|| fmt("array shape overflows"))?;
            let end = offset + 8 * len;
            let raw = payload
                .get(offset..end)
                .ok_or_else(|| Error::Format(format!("array `{name}` exceeds payload")))?;
            let words = raw.chunks_exact(8).map(|c| <[u8; 8]>::try_from(c).expect("8 bytes"));
            let data = match e["dtype"].as_str() {
                Some("f64") => ArrayData::F64(words.map(f64::from_le_bytes).collect()),
                Some("i64") => ArrayData::I64(words.map(i64::from_le_bytes).collect()),
                other => return Err(Error::Format(format!("unknown dtype {other:?}"))),
            };
            arrays.push((
                name.to_string(),
                Array {
                    rows: dims[0],
                    cols: dims[1],
                    data,
                },
            ));
            expected_offset = end;
        }
        if expected_offset != declared {
            return Err(fmt("payload size disagrees with arrays"));
        }
        Ok(Container { meta, arrays })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new("test");
        c.meta.insert("seed".into(), json!(7));
        c.push("a", Array::f64(&Mat::from_fn(3, 2, |i, j| i as f64 - 0.1 * j as f64)));
        c.push("b", Array::i64_col(&[4, -1, 0]));
        c
    }

    #[test]
    fn round_trip_and_alignment() {
        let c = sample();
        let bytes = c.to_bytes();
        assert!(bytes.starts_with(MAGIC));
        assert_eq!(bytes.len() % 8, 0);
        assert_eq!(Container::from_bytes(&bytes).unwrap(), c);
    }

    #[test]
    fn rejects_damage() {
        let bytes = sample().to_bytes();
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(matches!(Container::from_bytes(&trailing), Err(Error::Format(_))));
        assert!(matches!(
            Container::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Format(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Container::from_bytes(&bad), Err(Error::Format(_))));
        assert!(Container::from_bytes(b"FMGPB1\n{\"version\":1").is_err());
    }
}
