//! NTC1 container format (little-endian).
//!
//! ```text
//! 0..4        magic "NTC1"
//! 4..12       u64 header length H
//! 12..12+H    UTF-8 JSON index, keys sorted, padded with spaces so the
//!             payload section starts on an 8-byte boundary
//! 12+H..      payloads, each at an 8-byte aligned offset relative to the
//!             end of the header, in tensor insertion order
//! ```
//!
//! Each index entry is `{"dtype":"f32","shape":[..],"offset":O,"nbytes":N}`;
//! the reserved key `__meta__` holds the string metadata map. Tensor order is
//! recovered on load from payload offsets, so `save ∘ load ∘ save` is
//! byte-stable.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::Write;
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use super::{element_count, validate_name, Checkpoint, Tensor, META_KEY};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NTC1";
const PREFIX_LEN: usize = 12;
const ALIGN: usize = 8;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

#[derive(Serialize)]
#[serde(untagged)]
enum HeaderValue<'a> {
    Tensor(TensorEntry),
    Meta(&'a BTreeMap<String, String>),
}

/// Header keys in file order, duplicates preserved so they can be rejected.
struct RawHeader(Vec<(String, serde_json::Value)>);

impl<'de> Deserialize<'de> for RawHeader {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = RawHeader;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<RawHeader, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, serde_json::Value>()? {
                    out.push((k, v));
                }
                Ok(RawHeader(out))
            }
        }
        d.deserialize_map(V)
    }
}

fn align_up(x: usize) -> usize {
    x.div_ceil(ALIGN) * ALIGN
}

/// Serialize to NTC1 bytes.
pub fn write_checkpoint(c: &Checkpoint) -> Vec<u8> {
    let mut index: BTreeMap<&str, HeaderValue> = BTreeMap::new();
    let mut offset = 0usize;
    let mut layout = Vec::with_capacity(c.len());
    for (name, t) in c.tensors() {
        offset = align_up(offset);
        let nbytes = t.len() * 4;
        index.insert(
            name,
            HeaderValue::Tensor(TensorEntry {
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                offset: offset as u64,
                nbytes: nbytes as u64,
            }),
        );
        layout.push((offset, t));
        offset += nbytes;
    }
    index.insert(META_KEY, HeaderValue::Meta(c.meta()));

    let mut header = serde_json::to_vec(&index).expect("index serializes");
    while !(PREFIX_LEN + header.len()).is_multiple_of(ALIGN) {
        header.push(b' ');
    }

    let payload_len = offset;
    let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + payload_len);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    let base = out.len();
    out.resize(base + payload_len, 0);
    for (off, t) in layout {
        let dst = &mut out[base + off..base + off + t.len() * 4];
        for (chunk, v) in dst.chunks_exact_mut(4).zip(t.data()) {
            chunk.copy_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parse NTC1 bytes.
pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 {
        return Err(Error::CorruptFile(format!(
            "file is {} bytes, shorter than the magic",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"NTC1\"",
            String::from_utf8_lossy(&bytes[..4])
        )));
    }
    if bytes.len() < PREFIX_LEN {
        return Err(Error::CorruptFile("truncated header length".into()));
    }
    let header_len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes"));
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|h| h.checked_add(PREFIX_LEN))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::CorruptFile(format!("header length {header_len} exceeds file size {}", bytes.len())))?;
    let header = std::str::from_utf8(&bytes[PREFIX_LEN..header_end])
        .map_err(|e| Error::Format(format!("header is not UTF-8: {e}")))?;
    let RawHeader(entries) = serde_json::from_str(header).map_err(|e| Error::Format(format!("header JSON: {e}")))?;

    let payload = &bytes[header_end..];
    let mut seen = std::collections::HashSet::new();
    let mut meta = BTreeMap::new();
    let mut tensors: Vec<(u64, String, Tensor)> = Vec::new();

    for (name, value) in entries {
        if !seen.insert(name.clone()) {
            return Err(Error::Format(format!("duplicate index key {name:?}")));
        }
        if name == META_KEY {
            meta = serde_json::from_value(value).map_err(|e| Error::Format(format!("{META_KEY}: {e}")))?;
            continue;
        }
        validate_name(&name)?;
        let entry: TensorEntry =
            serde_json::from_value(value).map_err(|e| Error::Format(format!("entry {name:?}: {e}")))?;
        if entry.dtype != "f32" {
            return Err(Error::Format(format!(
                "tensor {name:?}: unsupported dtype {:?}",
                entry.dtype
            )));
        }
        let count = element_count(&entry.shape)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format(format!("tensor {name:?}: shape overflows")))?;
        if entry.nbytes != count as u64 {
            return Err(Error::Format(format!(
                "tensor {name:?}: nbytes {} does not match shape {:?}",
                entry.nbytes, entry.shape
            )));
        }
        if !entry.offset.is_multiple_of(ALIGN as u64) {
            return Err(Error::Format(format!(
                "tensor {name:?}: offset {} is not 8-byte aligned",
                entry.offset
            )));
        }
        let start = usize::try_from(entry.offset).ok();
        let range = start
            .and_then(|s| s.checked_add(count).map(|e| s..e))
            .filter(|r| r.end <= payload.len())
            .ok_or_else(|| {
                Error::CorruptFile(format!(
                    "tensor {name:?}: payload [{}, +{}) runs past end of file",
                    entry.offset, entry.nbytes
                ))
            })?;
        let data = payload[range]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push((entry.offset, name, Tensor::new(entry.shape, data)?));
    }

    // insertion order = payload order; zero-size tensors tie on offset, name breaks the tie
    tensors.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
    let mut c = Checkpoint::new();
    for (_, name, t) in tensors {
        c.insert(name, t)?;
    }
    *c.meta_mut() = meta;
    Ok(c)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::CorruptFile(m) => Error::CorruptFile(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Write, fsync and atomically move into place.
pub fn save_checkpoint(c: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &write_checkpoint(c))
}

/// Write `bytes` to a temporary sibling, fsync, then rename over `path`.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        if let Ok(d) = File::open(dir) {
            let _ = d.sync_all();
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint::new()
            .with_tensor("z/last", Tensor::new(vec![2, 2], vec![0.0; 4]).unwrap())
            .unwrap()
            .with_tensor("a.bias", Tensor::new(vec![3], vec![1.0, -2.5, 3.25]).unwrap())
            .unwrap()
            .with_meta("model_id", "m0")
    }

    #[test]
    fn round_trip_preserves_order_and_bits() {
        let c = sample();
        let bytes = write_checkpoint(&c);
        let back = read_checkpoint(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.names().collect::<Vec<_>>(), vec!["z/last", "a.bias"]);
        assert_eq!(write_checkpoint(&back), bytes);
    }

    #[test]
    fn layout_is_aligned() {
        let bytes = write_checkpoint(&sample());
        let h = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        assert_eq!((12 + h) % 8, 0);
        let header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + h]).unwrap();
        assert_eq!(header["z/last"]["offset"], 0);
        assert_eq!(header["a.bias"]["offset"], 16);
        assert_eq!(header["a.bias"]["nbytes"], 12);
        assert_eq!(header["__meta__"]["model_id"], "m0");
    }

    #[test]
    fn empty_checkpoint_has_empty_index() {
        let bytes = write_checkpoint(&Checkpoint::new());
        let back = read_checkpoint(&bytes).unwrap();
        assert!(back.is_empty());
        let h = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        assert_eq!(
            std::str::from_utf8(&bytes[12..12 + h]).unwrap().trim(),
            r#"{"__meta__":{}}"#
        );
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = write_checkpoint(&sample());
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(read_checkpoint(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_truncation() {
        let bytes = write_checkpoint(&sample());
        for cut in [2, 8, 20, bytes.len() - 1] {
            assert!(
                matches!(read_checkpoint(&bytes[..cut]), Err(Error::CorruptFile(_))),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn rejects_duplicate_names() {
        let header = br#"{"a":{"dtype":"f32","shape":[1],"offset":0,"nbytes":4},"a":{"dtype":"f32","shape":[1],"offset":8,"nbytes":4},"__meta__":{}}"#;
        let mut header = header.to_vec();
        while !(12 + header.len()).is_multiple_of(8) {
            header.push(b' ');
        }
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&header);
        bytes.extend_from_slice(&[0u8; 12]);
        assert!(matches!(read_checkpoint(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn large_tensor_offsets() {
        let big = Tensor::new(vec![1000, 1000], vec![0.5; 1_000_000]).unwrap();
        let c = Checkpoint::new()
            .with_tensor("small", Tensor::new(vec![3], vec![1.0; 3]).unwrap())
            .unwrap()
            .with_tensor("big", big)
            .unwrap();
        let bytes = write_checkpoint(&c);
        let h = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + h]).unwrap();
        // 3 floats = 12 bytes, next offset rounds up to 16
        assert_eq!(header["big"]["offset"], 16);
        assert_eq!(header["big"]["nbytes"], 4_000_000);
        assert_eq!(bytes.len(), 12 + h + 16 + 4_000_000);
    }
}
