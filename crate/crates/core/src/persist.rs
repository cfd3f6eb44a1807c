//! Versioned little-endian binary envelope shared by every model file, plus
//! atomic file writes.
//!
//! Layout:
//!
//! ```text
//! magic [4]u8 | version u32 | header_len u32 | header [header_len]u64
//! tensor_count u32 | { name_len u32 | name | rows u64 | cols u64 | rows·cols f64 }*
//! string_count u32 | { len u32 | utf-8 bytes }*
//! ```
//!
//! Decoding requires the buffer to be consumed exactly, so truncated files
//! never load.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::{Matrix, ParamStore};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Envelope {
    pub magic: [u8; 4],
    pub header: Vec<u64>,
    pub tensors: Vec<(String, Matrix)>,
    pub strings: Vec<String>,
}

impl Envelope {
    pub fn new(magic: [u8; 4], header: Vec<u64>) -> Self {
        Self { magic, header, tensors: Vec::new(), strings: Vec::new() }
    }

    pub fn with_store(mut self, store: &ParamStore) -> Self {
        self.tensors.extend(store.params().iter().map(|p| (p.name.clone(), p.value.clone())));
        self
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.header.len() as u32).to_le_bytes());
        for h in &self.header {
            out.extend_from_slice(&h.to_le_bytes());
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, m) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.strings.len() as u32).to_le_bytes());
        for s in &self.strings {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], magic: [u8; 4]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let got: [u8; 4] = r.take(4)?.try_into().expect("four bytes");
        if got != magic {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&got),
                String::from_utf8_lossy(&magic)
            )));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let hl = r.u32()? as usize;
        let header = (0..hl).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let tc = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(tc.min(1024));
        for _ in 0..tc {
            let name = r.string()?;
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let count = rows
                .checked_mul(cols)
                .filter(|c| c.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::Format(format!("tensor {name} larger than file")))?;
            let raw = r.take(count * 8)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format(format!("tensor {name} holds non-finite values")));
            }
            tensors.push((name, Matrix::from_vec(rows, cols, data)?));
        }
        let sc = r.u32()? as usize;
        let strings = (0..sc).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
        if r.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self { magic, header, tensors, strings })
    }

    pub fn header_at(&self, i: usize) -> Result<u64> {
        self.header
            .get(i)
            .copied()
            .ok_or_else(|| Error::Format(format!("header field {i} missing")))
    }

    /// Rebuilds a store in tensor order; names and shapes come from the file.
    pub fn to_store(&self) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, m) in &self.tensors {
            store.add(name.clone(), m.clone());
        }
        store
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Format("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid utf-8".into()))
    }
}

/// Writes `bytes` to a sibling temp file, syncs it and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Input(format!("{} is not a file path", path.display())))?
        .to_string_lossy();
    let tmp = dir.join(format!(".{file_name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

/// Formats rows of TSV cells.
pub fn tsv<I, R, S>(rows: I) -> String
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = S>,
    S: std::fmt::Display,
{
    let mut out = String::new();
    for row in rows {
        let mut first = true;
        for cell in row {
            if !first {
                out.push('\t');
            }
            first = false;
            out.push_str(&cell.to_string());
        }
        out.push('\n');
    }
    out
}
