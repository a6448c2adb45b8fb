//! `IGPK` tensor container.
//!
//! ```text
//! magic      4 bytes   "IGPK"
//! version    u32 LE    1
//! header_len u64 LE
//! header     header_len bytes of UTF-8, one `key=value` line per entry,
//!            sorted by key, `\`, `=` and newlines escaped with `\`
//! payload    rest of file, little-endian tensor data
//! ```
//!
//! Header keys are `attr.<key>` for free-form attributes and
//! `tensor.<name>.{dtype,shape,offset,length}` per tensor, where `dtype` is
//! `f32` or `f64`, `shape` is comma-separated and `offset` is relative to the
//! payload start. Tensors are laid out contiguously in name order.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::error::{ContainerError, Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: [u8; 4] = *b"IGPK";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DType {
    F32,
    #[default]
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

impl FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(Error::Config(format!("unknown dtype `{other}` (f32, f64)"))),
        }
    }
}

/// Decoded container contents.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub tensors: BTreeMap<String, Tensor>,
    pub dtypes: BTreeMap<String, DType>,
    pub attrs: BTreeMap<String, String>,
}

impl Container {
    pub fn attr(&self, key: &str) -> Result<&str> {
        self.attrs
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| ContainerError::Header(format!("missing attribute `{key}`")).into())
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '=' => out.push_str("\\="),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out
}

/// Splits one header line at its first unescaped `=`, unescaping both sides.
fn parse_line(line: &str) -> Result<(String, String), ContainerError> {
    let bad = || ContainerError::Header(format!("malformed line `{line}`"));
    let (mut key, mut value) = (String::new(), String::new());
    let mut in_value = false;
    let mut chars = line.chars();
    while let Some(c) = chars.next() {
        let target = if in_value { &mut value } else { &mut key };
        match c {
            '\\' => match chars.next() {
                Some('\\') => target.push('\\'),
                Some('=') => target.push('='),
                Some('n') => target.push('\n'),
                _ => return Err(bad()),
            },
            '=' if !in_value => in_value = true,
            c => target.push(c),
        }
    }
    if !in_value {
        return Err(bad());
    }
    Ok((key, value))
}

/// Serializes tensors (in name order) and attributes.
pub fn encode_container(tensors: &[(String, Tensor)], attrs: &BTreeMap<String, String>, dtype: DType) -> Result<Vec<u8>> {
    let mut sorted: BTreeMap<&str, &Tensor> = BTreeMap::new();
    for (name, t) in tensors {
        if sorted.insert(name.as_str(), t).is_some() {
            return Err(ContainerError::DuplicateName(name.clone()).into());
        }
    }
    let mut header: BTreeMap<String, String> = attrs.iter().map(|(k, v)| (format!("attr.{k}"), v.clone())).collect();
    let mut payload = Vec::new();
    for (name, t) in &sorted {
        let offset = payload.len();
        for &v in t.data() {
            match dtype {
                DType::F32 => payload.extend_from_slice(&(v as f32).to_le_bytes()),
                DType::F64 => payload.extend_from_slice(&v.to_le_bytes()),
            }
        }
        let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        header.insert(format!("tensor.{name}.dtype"), dtype.as_str().into());
        header.insert(format!("tensor.{name}.shape"), shape.join(","));
        header.insert(format!("tensor.{name}.offset"), offset.to_string());
        header.insert(format!("tensor.{name}.length"), (payload.len() - offset).to_string());
    }
    let mut text = String::new();
    for (k, v) in &header {
        text.push_str(&escape(k));
        text.push('=');
        text.push_str(&escape(v));
        text.push('\n');
    }
    let mut out = Vec::with_capacity(PREAMBLE + text.len() + payload.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

#[derive(Default)]
struct Entry {
    dtype: Option<String>,
    shape: Option<String>,
    offset: Option<String>,
    length: Option<String>,
}

/// Parses and fully validates a container before returning any tensor.
pub fn decode_container(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < 4 {
        return Err(ContainerError::Truncated(format!("{} bytes, no magic", bytes.len())).into());
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("length checked");
    if magic != MAGIC {
        return Err(ContainerError::BadMagic(magic).into());
    }
    if bytes.len() < PREAMBLE {
        return Err(ContainerError::Truncated(format!("{} bytes, preamble needs {PREAMBLE}", bytes.len())).into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("length checked"));
    if version != VERSION {
        return Err(ContainerError::UnsupportedVersion(version).into());
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("length checked"));
    let available = (bytes.len() - PREAMBLE) as u64;
    if header_len > available {
        return Err(ContainerError::Truncated(format!("header needs {header_len} bytes, {available} present")).into());
    }
    let header_end = PREAMBLE + header_len as usize;
    let text = std::str::from_utf8(&bytes[PREAMBLE..header_end])
        .map_err(|_| ContainerError::Header("header is not UTF-8".into()))?;
    let payload = &bytes[header_end..];

    let mut attrs = BTreeMap::new();
    let mut entries: BTreeMap<String, Entry> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for line in text.lines() {
        let (key, value) = parse_line(line)?;
        if !seen.insert(key.clone()) {
            return Err(ContainerError::Header(format!("duplicate key `{key}`")).into());
        }
        if let Some(k) = key.strip_prefix("attr.") {
            attrs.insert(k.to_string(), value);
            continue;
        }
        let rest = key
            .strip_prefix("tensor.")
            .ok_or_else(|| ContainerError::Header(format!("unknown key `{key}`")))?;
        let (name, field) = rest
            .rsplit_once('.')
            .ok_or_else(|| ContainerError::Header(format!("unknown key `{key}`")))?;
        let e = entries.entry(name.to_string()).or_default();
        let slot = match field {
            "dtype" => &mut e.dtype,
            "shape" => &mut e.shape,
            "offset" => &mut e.offset,
            "length" => &mut e.length,
            _ => return Err(ContainerError::Header(format!("unknown key `{key}`")).into()),
        };
        *slot = Some(value);
    }

    let mut spans = Vec::with_capacity(entries.len());
    let mut layout = Vec::with_capacity(entries.len());
    for (name, e) in &entries {
        let field = |v: &Option<String>, what: &str| {
            v.clone()
                .ok_or_else(|| ContainerError::Header(format!("tensor `{name}` lacks {what}")))
        };
        let int = |s: String, what: &str| {
            s.parse::<u64>()
                .map_err(|_| ContainerError::Header(format!("tensor `{name}` has bad {what} `{s}`")))
        };
        let dtype: DType = field(&e.dtype, "dtype")?
            .parse()
            .map_err(|_| ContainerError::Header(format!("tensor `{name}` has unknown dtype")))?;
        let shape = field(&e.shape, "shape")?
            .split(',')
            .map(|d| int(d.to_string(), "shape").map(|x| x as usize))
            .collect::<Result<Vec<usize>, _>>()?;
        let offset = int(field(&e.offset, "offset")?, "offset")?;
        let length = int(field(&e.length, "length")?, "length")?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        if numel.and_then(|n| n.checked_mul(dtype.size())) != Some(length as usize) {
            return Err(ContainerError::Header(format!("tensor `{name}` length {length} disagrees with its shape")).into());
        }
        let end = offset
            .checked_add(length)
            .ok_or_else(|| ContainerError::Header(format!("tensor `{name}` span overflows")))?;
        if end > payload.len() as u64 {
            return Err(ContainerError::OutOfBounds {
                name: name.clone(),
                offset,
                end,
                payload: payload.len() as u64,
            }
            .into());
        }
        spans.push((offset, end, name.clone()));
        layout.push((name.clone(), dtype, shape, offset as usize, end as usize));
    }
    spans.sort();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(ContainerError::Overlap(w[0].2.clone(), w[1].2.clone()).into());
        }
    }

    let mut out = Container {
        attrs,
        ..Container::default()
    };
    for (name, dtype, shape, start, end) in layout {
        let raw = &payload[start..end];
        let data: Vec<f64> = match dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect(),
        };
        let tensor = Tensor::new(shape, data).map_err(|e| ContainerError::Header(format!("tensor `{name}`: {e}")))?;
        out.dtypes.insert(name.clone(), dtype);
        out.tensors.insert(name, tensor);
    }
    Ok(out)
}

/// Writes the container and syncs it to disk before returning.
pub fn save_container(
    path: &Path,
    tensors: &[(String, Tensor)],
    attrs: &BTreeMap<String, String>,
    dtype: DType,
) -> Result<()> {
    let bytes = encode_container(tensors, attrs, dtype)?;
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    file.sync_all().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_container(path: &Path) -> Result<Container> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_container(&bytes)
}
