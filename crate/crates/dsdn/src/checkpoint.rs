//! Checkpoint container: a flat file of named binary entries.
//!
//! Layout: 4-byte magic `DSDN`, u32 format version, then entries back to
//! back until end of file. Each entry is `name_len: u32`, the UTF-8 name,
//! a dtype code byte, `rank: u32`, `rank` u32 dims, and the little-endian
//! payload. Tensor entries use the element dtype codes; code 2 is a raw
//! byte blob (config text, vocabulary), code 3 a u64 counter.
//!
//! Writes are deterministic: entries are sorted by name, so identical
//! state produces identical files.

use crate::error::{format_err, Result};
use dsdn_core::{Array, Scalar};
use std::collections::BTreeMap;
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"DSDN";
pub const VERSION: u32 = 1;

const DTYPE_BYTES: u8 = 2;
const DTYPE_U64: u8 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub dtype: u8,
    pub dims: Vec<usize>,
    pub payload: Vec<u8>,
}

/// In-memory image of a checkpoint file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    entries: BTreeMap<String, Entry>,
}

fn elem_size(dtype: u8) -> Option<usize> {
    match dtype {
        0 => Some(4),
        1 => Some(8),
        DTYPE_BYTES => Some(1),
        DTYPE_U64 => Some(8),
        _ => None,
    }
}

impl Container {
    pub fn new() -> Container {
        Container::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    fn insert(&mut self, name: &str, entry: Entry) -> Result<()> {
        if self.entries.contains_key(name) {
            return format_err(format!("duplicate entry `{name}`"));
        }
        self.entries.insert(name.to_string(), entry);
        Ok(())
    }

    fn entry(&self, name: &str) -> Result<&Entry> {
        match self.entries.get(name) {
            Some(e) => Ok(e),
            None => format_err(format!("missing entry `{name}`")),
        }
    }

    pub fn put_tensor<T: Scalar>(&mut self, name: &str, value: &Array<T>) -> Result<()> {
        let mut payload = Vec::with_capacity(value.numel() * T::DTYPE.size());
        T::write_le(&mut payload, value.data());
        self.insert(
            name,
            Entry {
                dtype: T::DTYPE.code(),
                dims: value.shape().to_vec(),
                payload,
            },
        )
    }

    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Array<T>> {
        let e = self.entry(name)?;
        if e.dtype != T::DTYPE.code() {
            return format_err(format!(
                "entry `{name}` has dtype code {}, expected {} ({})",
                e.dtype,
                T::DTYPE.code(),
                T::DTYPE.name()
            ));
        }
        let n: usize = e.dims.iter().product();
        let Some(vals) = T::read_le(&e.payload) else {
            return format_err(format!("entry `{name}` payload is not whole elements"));
        };
        if vals.len() != n {
            return format_err(format!(
                "entry `{name}` holds {} elements for dims {:?}",
                vals.len(),
                e.dims
            ));
        }
        Ok(Array::new(e.dims.clone(), vals)?)
    }

    pub fn put_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        self.insert(
            name,
            Entry {
                dtype: DTYPE_BYTES,
                dims: vec![bytes.len()],
                payload: bytes.to_vec(),
            },
        )
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        let e = self.entry(name)?;
        if e.dtype != DTYPE_BYTES {
            return format_err(format!("entry `{name}` is not a byte blob"));
        }
        Ok(&e.payload)
    }

    pub fn put_text(&mut self, name: &str, text: &str) -> Result<()> {
        self.put_bytes(name, text.as_bytes())
    }

    pub fn text(&self, name: &str) -> Result<String> {
        match String::from_utf8(self.bytes(name)?.to_vec()) {
            Ok(s) => Ok(s),
            Err(_) => format_err(format!("entry `{name}` is not UTF-8 text")),
        }
    }

    pub fn put_u64(&mut self, name: &str, value: u64) -> Result<()> {
        self.insert(
            name,
            Entry {
                dtype: DTYPE_U64,
                dims: vec![1],
                payload: value.to_le_bytes().to_vec(),
            },
        )
    }

    pub fn u64(&self, name: &str) -> Result<u64> {
        let e = self.entry(name)?;
        if e.dtype != DTYPE_U64 || e.payload.len() != 8 {
            return format_err(format!("entry `{name}` is not a u64 counter"));
        }
        Ok(u64::from_le_bytes(e.payload[..8].try_into().unwrap()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for (name, e) in &self.entries {
            if name.len() > u32::MAX as usize {
                return format_err(format!("entry name too long ({} bytes)", name.len()));
            }
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(e.dtype);
            out.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
            for &d in &e.dims {
                if d > u32::MAX as usize {
                    return format_err(format!("entry `{name}` dim {d} exceeds u32"));
                }
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            let expect = e.dims.iter().product::<usize>()
                * elem_size(e.dtype).expect("entries are built with known dtypes");
            if e.payload.len() != expect {
                return format_err(format!(
                    "entry `{name}` payload length {} does not match dims {:?}",
                    e.payload.len(),
                    e.dims
                ));
            }
            out.extend_from_slice(&e.payload);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Container> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return format_err(format!("bad magic {magic:?}, not a checkpoint file"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return format_err(format!("unsupported version {version}, expected {VERSION}"));
        }
        let mut c = Container::new();
        let mut n = 0usize;
        while !r.done() {
            n += 1;
            let anon = format!("entry #{n}");
            let name_len = r.u32(&anon)? as usize;
            let name_bytes = r.take(name_len, &anon)?.to_vec();
            let Ok(name) = String::from_utf8(name_bytes) else {
                return format_err(format!("{anon} has a non-UTF-8 name"));
            };
            let dtype = r.take(1, &name)?[0];
            let Some(size) = elem_size(dtype) else {
                return format_err(format!("entry `{name}` has unknown dtype code {dtype}"));
            };
            let rank = r.u32(&name)? as usize;
            let mut dims = Vec::with_capacity(rank);
            let mut numel = 1usize;
            for _ in 0..rank {
                let d = r.u32(&name)? as usize;
                numel = numel.saturating_mul(d);
                dims.push(d);
            }
            let payload = r.take(numel.saturating_mul(size), &name)?.to_vec();
            c.insert(&name, Entry { dtype, dims, payload })?;
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes()?)?)
    }

    pub fn load(path: &Path) -> Result<Container> {
        Container::from_bytes(&std::fs::read(path)?)
    }
}

/// Overwrites every parameter of `store` from the entry named
/// `{prefix}{param name}`, insisting on exact shape agreement. The store
/// defines the expected parameter set; extra container entries are left
/// for the caller to interpret.
pub(crate) fn fill_store(
    c: &Container,
    store: &mut crate::params::ParamStore<f32>,
    prefix: &str,
) -> Result<()> {
    let names: Vec<String> = store.names().cloned().collect();
    for name in names {
        let full = format!("{prefix}{name}");
        let value: Array<f32> = c.tensor(&full)?;
        let param = store.get_mut(&name).expect("iterating existing names");
        if value.shape() != param.value.shape() {
            return format_err(format!(
                "entry `{full}` has shape {:?}, model wants {:?}",
                value.shape(),
                param.value.shape()
            ));
        }
        param.value = value;
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn done(&self) -> bool {
        self.pos >= self.bytes.len()
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return format_err(format!(
                "truncated while reading {what}: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::AppError;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Container {
        let mut c = Container::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        c.put_tensor("w.alpha", &Array::<f32>::randn(&mut rng, &[3, 4])).unwrap();
        c.put_tensor("w.beta", &Array::<f64>::randn(&mut rng, &[2, 2, 2])).unwrap();
        c.put_text("__config", "t_steps = 50\n").unwrap();
        c.put_u64("__step", 217).unwrap();
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        // Include the awkward values: negative zero, a subnormal, huge
        // and tiny magnitudes.
        let raw = vec![-0.0f32, f32::MIN_POSITIVE / 2.0, 3.4e38, -1.2e-38, 1.0, -7.25];
        let arr = Array::new(vec![2, 3], raw).unwrap();
        let mut c = Container::new();
        c.put_tensor("x", &arr).unwrap();
        let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
        let got: Array<f32> = back.tensor("x").unwrap();
        assert_eq!(got.shape(), arr.shape());
        for (a, b) in got.data().iter().zip(arr.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.dsdn");
        let p2 = dir.path().join("b.dsdn");
        let c = sample();
        c.save(&p1).unwrap();
        let loaded = Container::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(loaded.u64("__step").unwrap(), 217);
        assert_eq!(loaded.text("__config").unwrap(), "t_steps = 50\n");
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[0] = b'X';
        let err = Container::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, AppError::Format(_)), "{err}");
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn wrong_version_is_rejected() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4] = 9;
        let err = Container::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn truncation_names_the_entry() {
        let bytes = sample().to_bytes().unwrap();
        // Chop into the final entry's payload.
        let cut = &bytes[..bytes.len() - 3];
        let err = Container::from_bytes(cut).unwrap_err();
        assert!(matches!(err, AppError::Format(_)), "{err}");
        let msg = err.to_string();
        assert!(msg.contains("truncated") && msg.contains("w.beta"), "{msg}");
    }

    #[test]
    fn dtype_mismatch_and_missing_entries_are_named() {
        let c = sample();
        let err = c.tensor::<f64>("w.alpha").unwrap_err();
        assert!(err.to_string().contains("w.alpha"), "{err}");
        let err = c.tensor::<f32>("w.gamma").unwrap_err();
        assert!(err.to_string().contains("missing entry `w.gamma`"), "{err}");
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut c = Container::new();
        c.put_u64("x", 1).unwrap();
        assert!(c.put_u64("x", 2).is_err());
        assert!(c.put_tensor("x", &Array::<f32>::zeros(&[1])).is_err());
    }
}
