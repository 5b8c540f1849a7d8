//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   8 bytes  "BLORACKP"
//! version u32
//! schema  u32 length + UTF-8
//! meta    u32 length + UTF-8 (JSON)
//! count   u32
//! count × { name: u32 length + UTF-8, rows: u64, cols: u64, rows·cols × f64 }
//! ```

use bayeslora::params::Parameterized;
use bayeslora::Matrix;

use crate::CliError;

pub const MAGIC: &[u8; 8] = b"BLORACKP";
pub const VERSION: u32 = 1;
pub const SCHEMA: &str = "bayeslora.toy-run";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub schema: String,
    /// Free-form JSON, the resolved run configuration for toy runs.
    pub meta: String,
    pub tensors: Vec<(String, Matrix)>,
}

impl Checkpoint {
    pub fn new(meta: String) -> Self {
        Self { schema: SCHEMA.to_string(), meta, tensors: Vec::new() }
    }

    /// Appends every parameter of `model` under `prefix`.
    pub fn add_params<P: Parameterized + ?Sized>(&mut self, prefix: &str, model: &P) {
        model.visit_params(prefix, &mut |name, m| self.tensors.push((name.to_string(), m.clone())));
    }

    /// Overwrites every parameter of `model` under `prefix`; each must be
    /// present with a matching shape.
    pub fn restore_params<P: Parameterized + ?Sized>(&self, prefix: &str, model: &mut P) -> Result<(), CliError> {
        let mut missing = Vec::new();
        model.visit_params_mut(prefix, &mut |name, m| match self.get(name) {
            Some(saved) if saved.shape() == m.shape() => *m = saved.clone(),
            Some(saved) => missing.push(format!("{name}: shape {:?} in checkpoint, {:?} expected", saved.shape(), m.shape())),
            None => missing.push(format!("{name}: missing from checkpoint")),
        });
        if missing.is_empty() {
            Ok(())
        } else {
            Err(CliError::Checkpoint(missing.join("; ")))
        }
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.schema);
        put_str(&mut out, &self.meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, m) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CliError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(CliError::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CliError::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let schema = r.string()?;
        if schema != SCHEMA {
            return Err(CliError::Checkpoint(format!("unexpected schema `{schema}`")));
        }
        let meta = r.string()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let n = rows.checked_mul(cols).ok_or_else(|| CliError::Checkpoint(format!("{name}: shape overflows")))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| CliError::Checkpoint(format!("{name}: shape overflows")))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
            let m = Matrix::new(rows, cols, data).map_err(|e| CliError::Checkpoint(format!("{name}: {e}")))?;
            tensors.push((name, m));
        }
        if r.pos != bytes.len() {
            return Err(CliError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { schema, meta, tensors })
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CliError> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| CliError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CliError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CliError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String, CliError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CliError::Checkpoint("string is not UTF-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new("{\"k\":1}".into());
        c.tensors.push(("a.b".into(), Matrix::from_fn(2, 3, |i, j| i as f64 - 0.1 * j as f64)));
        c.tensors.push(("scalar".into(), Matrix::scalar(f64::MIN_POSITIVE)));
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn header_is_little_endian() {
        let b = sample().to_bytes();
        assert_eq!(&b[..8], MAGIC);
        assert_eq!(&b[8..12], &[1, 0, 0, 0]);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let b = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut bad = b.clone();
        bad[8] = 9;
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("version"));
        let mut long = b;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }
}
