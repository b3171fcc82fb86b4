//! Byte layout of shard records and index entries. All integers little-endian.
//!
//! Shard record:
//!
//! ```text
//! u32  body_len            bytes after this field, checksum included
//! u16  id_len, [u8] id
//! u16  version_len, [u8] version
//! u8   branch index (canonical order)
//! u32  dim
//! u8   present (0 or 1)
//! f32  payload[dim]
//! u32  crc32 of every preceding byte of the record, body_len included
//! ```
//!
//! Index entry:
//!
//! ```text
//! u16 id_len, [u8] id, u16 version_len, [u8] version, u64 offset, u32 crc32
//! ```

use super::{CacheKey, StoreError};
use crate::encoders::{BranchId, FeatureRecord, PAD_WIDTH};

/// Upper bound on a record body; anything larger is corruption.
pub const MAX_BODY_LEN: usize = 2 + u16::MAX as usize * 2 + 2 + 1 + 4 + 1 + PAD_WIDTH * 4 + 4;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }
    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }
    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes(b.try_into().unwrap()))
    }
    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
    fn string(&mut self) -> Option<Result<&'a str, std::str::Utf8Error>> {
        let n = self.u16()? as usize;
        self.take(n).map(std::str::from_utf8)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub fn encode_record(key: &CacheKey, record: &FeatureRecord) -> Vec<u8> {
    let mut out = vec![0u8; 4];
    put_str(&mut out, &key.sample_id);
    put_str(&mut out, &key.backend_version);
    out.push(key.branch.index() as u8);
    out.extend_from_slice(&(record.vector.len() as u32).to_le_bytes());
    out.push(record.present as u8);
    for v in &record.vector {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let body_len = (out.len() - 4 + 4) as u32;
    out[..4].copy_from_slice(&body_len.to_le_bytes());
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Total record length (length prefix included) announced by a record header.
pub fn record_len(header: [u8; 4]) -> Option<usize> {
    let body = u32::from_le_bytes(header) as usize;
    (body <= MAX_BODY_LEN).then_some(body + 4)
}

/// Decodes one complete record. `label` names the entry in error messages.
pub fn decode_record(bytes: &[u8], label: &str) -> Result<(CacheKey, FeatureRecord), StoreError> {
    let corrupt = |reason: &str| StoreError::Corrupt {
        key: label.to_string(),
        reason: reason.to_string(),
    };
    if bytes.len() < 8 {
        return Err(corrupt("truncated record"));
    }
    let (content, crc_bytes) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(content) != u32::from_le_bytes(crc_bytes.try_into().unwrap()) {
        return Err(corrupt("checksum mismatch"));
    }
    let mut r = Reader { bytes: content, pos: 0 };
    let body_len = r.u32().ok_or_else(|| corrupt("truncated record"))? as usize;
    if body_len + 4 != bytes.len() {
        return Err(corrupt("length prefix disagrees with record size"));
    }
    let truncated = || corrupt("truncated record");
    let sample_id = r.string().ok_or_else(truncated)?.map_err(|_| corrupt("id is not UTF-8"))?;
    let version = r.string().ok_or_else(truncated)?.map_err(|_| corrupt("version is not UTF-8"))?;
    let branch = r
        .u8()
        .and_then(|b| BranchId::ALL.get(b as usize).copied())
        .ok_or_else(|| corrupt("bad branch index"))?;
    let dim = r.u32().ok_or_else(truncated)? as usize;
    if dim == 0 || dim > PAD_WIDTH {
        return Err(corrupt("dimension out of range"));
    }
    let present = match r.u8().ok_or_else(truncated)? {
        0 => false,
        1 => true,
        _ => return Err(corrupt("bad presence byte")),
    };
    let payload = r.take(dim * 4).ok_or_else(truncated)?;
    if r.pos != content.len() {
        return Err(corrupt("trailing bytes in record"));
    }
    let vector = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let key = CacheKey::new(sample_id, branch, version).map_err(|_| corrupt("empty key component"))?;
    let record = FeatureRecord {
        branch,
        vector,
        present,
        backend_version: version.to_string(),
    };
    record.validate().map_err(|e| corrupt(&e.to_string()))?;
    Ok((key, record))
}

pub fn encode_index_entry(sample_id: &str, version: &str, offset: u64) -> Vec<u8> {
    let mut out = Vec::new();
    put_str(&mut out, sample_id);
    put_str(&mut out, version);
    out.extend_from_slice(&offset.to_le_bytes());
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub struct IndexEntry {
    pub sample_id: String,
    pub version: String,
    pub offset: u64,
}

/// Parses index entries. A trailing partial entry (an interrupted publish)
/// is not an error; its byte offset is returned as the valid length.
pub fn decode_index(bytes: &[u8]) -> Result<(Vec<IndexEntry>, usize), StoreError> {
    let mut entries = Vec::new();
    let mut r = Reader { bytes, pos: 0 };
    loop {
        let start = r.pos;
        if start == bytes.len() {
            return Ok((entries, start));
        }
        let parsed = (|| {
            let id = r.string()?;
            let version = r.string()?;
            let offset = r.u64()?;
            let crc = r.u32()?;
            Some((id, version, offset, crc))
        })();
        let Some((id, version, offset, crc)) = parsed else {
            return Ok((entries, start));
        };
        let content = &bytes[start..r.pos - 4];
        let corrupt = |reason: &str| StoreError::Corrupt {
            key: format!("index entry at byte {start}"),
            reason: reason.to_string(),
        };
        if crc32fast::hash(content) != crc {
            return Err(corrupt("checksum mismatch"));
        }
        let (Ok(id), Ok(version)) = (id, version) else {
            return Err(corrupt("key is not UTF-8"));
        };
        entries.push(IndexEntry {
            sample_id: id.to_string(),
            version: version.to_string(),
            offset,
        });
    }
}
