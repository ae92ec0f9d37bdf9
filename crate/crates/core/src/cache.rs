//! Offline embedding cache.
//!
//! Hidden states and image-token embeddings are dumped once from the frozen
//! model and training runs from the file alone. The byte layout (all
//! integers little-endian) is:
//!
//! ```text
//! header (24 bytes)
//!   [u8; 4]  magic "RECO"
//!   u32      version (= 1)
//!   u32      d
//!   u64      record count
//!   u32      float width in bytes (= 4, IEEE-754 binary32)
//! record (repeated `count` times)
//!   u64      body length L
//!   body (L bytes)
//!     str    example_id
//!     str    source.model
//!     str    source.tap_point
//!     str    source.config_fingerprint
//!     u32    M
//!     f32    image embeddings, M × d, row-major
//!     segment × 3 (prompt, chosen, rejected)
//!       u32  N
//!       u32  token ids × N
//!       f32  hidden states, N × d, row-major
//! trailer
//!   u64      FNV-1a 64 over every preceding byte (header and records)
//! ```
//!
//! `str` is a `u32` byte length followed by UTF-8. Within a segment, hidden
//! state row `i` is the state that predicts token `i`.

use std::fs;
use std::io::{self, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Fnv1a;

pub const MAGIC: [u8; 4] = *b"RECO";
pub const VERSION: u32 = 1;
pub const FLOAT_WIDTH: u32 = 4;
pub const HEADER_LEN: usize = 24;
pub const TRAILER_LEN: usize = 8;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("bad magic {0:?}, expected \"RECO\"")]
    BadMagic([u8; 4]),
    #[error("unsupported cache version {0}")]
    UnsupportedVersion(u32),
    #[error("unsupported float width {0} bytes")]
    UnsupportedFloatWidth(u32),
    #[error("checksum mismatch: stored {stored:016x}, computed {computed:016x}")]
    Checksum { stored: u64, computed: u64 },
    #[error("truncated cache: {0}")]
    Truncated(String),
    #[error("malformed record {index}: {reason}")]
    Malformed { index: u64, reason: String },
    #[error("record count mismatch: header says {expected}, found {found}")]
    CountMismatch { expected: u64, found: u64 },
    #[error("inconsistent dimensions: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, CacheError>;

/// Where the embeddings came from.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceMeta {
    pub model: String,
    pub tap_point: String,
    pub config_fingerprint: String,
}

/// Token ids with the hidden state that predicts each of them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Segment {
    pub token_ids: Vec<u32>,
    pub hidden_states: Vec<Vec<f32>>,
}

impl Segment {
    pub fn new(token_ids: Vec<u32>, hidden_states: Vec<Vec<f32>>) -> Self {
        Self { token_ids, hidden_states }
    }

    /// Round `f64` states to binary32.
    pub fn from_f64(token_ids: Vec<u32>, hidden_states: &[Vec<f64>]) -> Self {
        Self { token_ids, hidden_states: hidden_states.iter().map(|r| to_f32(r)).collect() }
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// One cached preference example.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub example_id: String,
    pub d: usize,
    pub image_embeddings: Vec<Vec<f32>>,
    pub prompt: Segment,
    pub chosen: Segment,
    pub rejected: Segment,
    pub source: SourceMeta,
}

pub fn to_f32(row: &[f64]) -> Vec<f32> {
    row.iter().map(|&x| x as f32).collect()
}

pub fn to_f64(row: &[f32]) -> Vec<f64> {
    row.iter().map(|&x| f64::from(x)).collect()
}

impl TraceRecord {
    pub fn segments(&self) -> [&Segment; 3] {
        [&self.prompt, &self.chosen, &self.rejected]
    }

    pub fn image_token_count(&self) -> usize {
        self.image_embeddings.len()
    }

    /// Check every row against `d` and every segment's length pairing.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.d == 0 {
            return Err("d = 0".into());
        }
        if let Some(r) = self.image_embeddings.iter().find(|r| r.len() != self.d) {
            return Err(format!("image embedding of width {} in a d = {} record", r.len(), self.d));
        }
        for (name, seg) in ["prompt", "chosen", "rejected"].iter().zip(self.segments()) {
            if seg.token_ids.len() != seg.hidden_states.len() {
                return Err(format!(
                    "{name} segment has {} tokens but {} hidden states",
                    seg.token_ids.len(),
                    seg.hidden_states.len()
                ));
            }
            if let Some(r) = seg.hidden_states.iter().find(|r| r.len() != self.d) {
                return Err(format!("{name} hidden state of width {} in a d = {} record", r.len(), self.d));
            }
        }
        Ok(())
    }

    /// Body bytes (without the length prefix).
    fn encode_body(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for s in [&self.example_id, &self.source.model, &self.source.tap_point, &self.source.config_fingerprint] {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        }
        out.extend_from_slice(&(self.image_embeddings.len() as u32).to_le_bytes());
        for row in &self.image_embeddings {
            row.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        }
        for seg in self.segments() {
            out.extend_from_slice(&(seg.token_ids.len() as u32).to_le_bytes());
            seg.token_ids.iter().for_each(|t| out.extend_from_slice(&t.to_le_bytes()));
            for row in &seg.hidden_states {
                row.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
            }
        }
        out
    }

    fn decode_body(body: &[u8], d: usize, index: u64) -> Result<Self> {
        let mut c = BodyCursor { buf: body, pos: 0, index };
        let example_id = c.string()?;
        let source = SourceMeta { model: c.string()?, tap_point: c.string()?, config_fingerprint: c.string()? };
        let m = c.u32()? as usize;
        let image_embeddings = c.rows(m, d)?;
        let mut segs = Vec::with_capacity(3);
        for _ in 0..3 {
            let n = c.u32()? as usize;
            let token_ids = c.u32s(n)?;
            let hidden_states = c.rows(n, d)?;
            segs.push(Segment { token_ids, hidden_states });
        }
        if c.pos != body.len() {
            return Err(c.malformed(format!("{} trailing bytes in record body", body.len() - c.pos)));
        }
        let rejected = segs.pop().unwrap();
        let chosen = segs.pop().unwrap();
        let prompt = segs.pop().unwrap();
        Ok(Self { example_id, d, image_embeddings, prompt, chosen, rejected, source })
    }
}

struct BodyCursor<'a> {
    buf: &'a [u8],
    pos: usize,
    index: u64,
}

impl BodyCursor<'_> {
    fn malformed(&self, reason: String) -> CacheError {
        CacheError::Malformed { index: self.index, reason }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.malformed(format!("field of {n} bytes overruns body at offset {}", self.pos))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?.to_vec();
        String::from_utf8(bytes).map_err(|e| self.malformed(format!("invalid UTF-8: {e}")))
    }

    fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.malformed("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn rows(&mut self, n: usize, d: usize) -> Result<Vec<Vec<f32>>> {
        let len = n.checked_mul(d).and_then(|x| x.checked_mul(4)).ok_or_else(|| self.malformed("length overflow".into()))?;
        let bytes = self.take(len)?;
        Ok(bytes
            .chunks_exact(4 * d.max(1))
            .map(|row| row.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheHeader {
    pub version: u32,
    pub d: u32,
    pub record_count: u64,
    pub float_width: u32,
}

impl CacheHeader {
    fn encode(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[..4].copy_from_slice(&MAGIC);
        out[4..8].copy_from_slice(&self.version.to_le_bytes());
        out[8..12].copy_from_slice(&self.d.to_le_bytes());
        out[12..20].copy_from_slice(&self.record_count.to_le_bytes());
        out[20..24].copy_from_slice(&self.float_width.to_le_bytes());
        out
    }

    fn decode(bytes: &[u8; HEADER_LEN]) -> Result<Self> {
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(CacheError::BadMagic(magic));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let header = Self {
            version: u32_at(4),
            d: u32_at(8),
            record_count: u64::from_le_bytes(bytes[12..20].try_into().unwrap()),
            float_width: u32_at(20),
        };
        if header.version != VERSION {
            return Err(CacheError::UnsupportedVersion(header.version));
        }
        if header.float_width != FLOAT_WIDTH {
            return Err(CacheError::UnsupportedFloatWidth(header.float_width));
        }
        if header.d == 0 {
            return Err(CacheError::Inconsistent("header d = 0".into()));
        }
        Ok(header)
    }
}

/// Streaming writer. The record count is fixed up front so nothing has to be
/// patched after the fact.
pub struct CacheWriter<W: Write> {
    inner: W,
    hasher: Fnv1a,
    d: usize,
    expected: u64,
    written: u64,
}

impl<W: Write> CacheWriter<W> {
    pub fn new(mut inner: W, d: usize, record_count: u64) -> Result<Self> {
        let d32 = u32::try_from(d).ok().filter(|&x| x > 0).ok_or_else(|| CacheError::Inconsistent(format!("d = {d}")))?;
        let header = CacheHeader { version: VERSION, d: d32, record_count, float_width: FLOAT_WIDTH }.encode();
        let mut hasher = Fnv1a::new();
        hasher.update(&header);
        inner.write_all(&header)?;
        Ok(Self { inner, hasher, d, expected: record_count, written: 0 })
    }

    pub fn push(&mut self, record: &TraceRecord) -> Result<()> {
        if record.d != self.d {
            return Err(CacheError::Inconsistent(format!("record d = {} in a d = {} cache", record.d, self.d)));
        }
        record.validate().map_err(CacheError::Inconsistent)?;
        if self.written == self.expected {
            return Err(CacheError::CountMismatch { expected: self.expected, found: self.written + 1 });
        }
        let body = record.encode_body();
        let len = (body.len() as u64).to_le_bytes();
        self.hasher.update(&len);
        self.hasher.update(&body);
        self.inner.write_all(&len)?;
        self.inner.write_all(&body)?;
        self.written += 1;
        Ok(())
    }

    /// Write the trailer and return `(checksum, inner writer)`.
    pub fn finish(mut self) -> Result<(u64, W)> {
        if self.written != self.expected {
            return Err(CacheError::CountMismatch { expected: self.expected, found: self.written });
        }
        let sum = self.hasher.finish();
        self.inner.write_all(&sum.to_le_bytes())?;
        self.inner.flush()?;
        Ok((sum, self.inner))
    }
}

/// Encode a full cache in memory. An empty record list needs `d` from the
/// caller, so use [`encode_cache_with_dim`] for that case.
pub fn encode_cache(records: &[TraceRecord]) -> Result<(Vec<u8>, u64)> {
    let d = records.first().map_or(1, |r| r.d);
    encode_cache_with_dim(records, d)
}

pub fn encode_cache_with_dim(records: &[TraceRecord], d: usize) -> Result<(Vec<u8>, u64)> {
    let mut w = CacheWriter::new(Vec::new(), d, records.len() as u64)?;
    for r in records {
        w.push(r)?;
    }
    let (sum, bytes) = w.finish()?;
    Ok((bytes, sum))
}

/// Write `records` to `path`, returning the checksum.
pub fn write_cache(records: &[TraceRecord], path: impl AsRef<Path>) -> Result<u64> {
    let d = records.first().map_or(1, |r| r.d);
    write_cache_with_dim(records, d, path)
}

pub fn write_cache_with_dim(records: &[TraceRecord], d: usize, path: impl AsRef<Path>) -> Result<u64> {
    let file = fs::File::create(path)?;
    let mut w = CacheWriter::new(BufWriter::new(file), d, records.len() as u64)?;
    for r in records {
        w.push(r)?;
    }
    let (sum, buf) = w.finish()?;
    buf.into_inner().map_err(|e| CacheError::Io(e.into_error()))?.sync_all()?;
    Ok(sum)
}

/// Streaming reader. `open` validates magic, version and the checksum (one
/// constant-memory pass) before any record is handed out; records are then
/// decoded one at a time.
pub struct CacheReader<R: Read + Seek> {
    inner: R,
    header: CacheHeader,
    checksum: u64,
    data_end: u64,
    pos: u64,
    yielded: u64,
    failed: bool,
}

impl CacheReader<BufReader<fs::File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(BufReader::new(fs::File::open(path)?))
    }
}

impl<R: Read + Seek> CacheReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let len = inner.seek(SeekFrom::End(0))?;
        inner.seek(SeekFrom::Start(0))?;
        let mut hbuf = [0u8; HEADER_LEN];
        if len < HEADER_LEN as u64 {
            let mut magic = [0u8; 4];
            let got = inner.read(&mut magic)?;
            if got == 4 && magic != MAGIC {
                return Err(CacheError::BadMagic(magic));
            }
            return Err(CacheError::Truncated(format!("{len} bytes is shorter than the header")));
        }
        inner.read_exact(&mut hbuf)?;
        let header = CacheHeader::decode(&hbuf)?;
        if len < (HEADER_LEN + TRAILER_LEN) as u64 {
            return Err(CacheError::Truncated("missing checksum trailer".into()));
        }
        let data_end = len - TRAILER_LEN as u64;

        let mut hasher = Fnv1a::new();
        hasher.update(&hbuf);
        let mut remaining = data_end - HEADER_LEN as u64;
        let mut chunk = vec![0u8; 64 * 1024];
        while remaining > 0 {
            let n = remaining.min(chunk.len() as u64) as usize;
            inner.read_exact(&mut chunk[..n])?;
            hasher.update(&chunk[..n]);
            remaining -= n as u64;
        }
        let mut tbuf = [0u8; 8];
        inner.read_exact(&mut tbuf)?;
        let stored = u64::from_le_bytes(tbuf);
        let computed = hasher.finish();
        if stored != computed {
            return Err(CacheError::Checksum { stored, computed });
        }
        inner.seek(SeekFrom::Start(HEADER_LEN as u64))?;
        Ok(Self { inner, header, checksum: stored, data_end, pos: HEADER_LEN as u64, yielded: 0, failed: false })
    }

    pub fn header(&self) -> CacheHeader {
        self.header
    }

    pub fn checksum(&self) -> u64 {
        self.checksum
    }

    fn read_record(&mut self) -> Result<Option<TraceRecord>> {
        if self.yielded == self.header.record_count {
            if self.pos != self.data_end {
                return Err(CacheError::Malformed {
                    index: self.yielded,
                    reason: format!("{} bytes after the last record", self.data_end - self.pos),
                });
            }
            return Ok(None);
        }
        let left = self.data_end - self.pos;
        if left < 8 {
            return Err(CacheError::CountMismatch { expected: self.header.record_count, found: self.yielded });
        }
        let mut lbuf = [0u8; 8];
        self.inner.read_exact(&mut lbuf)?;
        let body_len = u64::from_le_bytes(lbuf);
        if body_len > left - 8 {
            return Err(CacheError::Truncated(format!(
                "record {} claims {body_len} bytes but only {} remain",
                self.yielded,
                left - 8
            )));
        }
        let mut body = vec![0u8; body_len as usize];
        self.inner.read_exact(&mut body)?;
        self.pos += 8 + body_len;
        let rec = TraceRecord::decode_body(&body, self.header.d as usize, self.yielded)?;
        self.yielded += 1;
        Ok(Some(rec))
    }
}

impl<R: Read + Seek> Iterator for CacheReader<R> {
    type Item = Result<TraceRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        match self.read_record() {
            Ok(Some(r)) => Some(Ok(r)),
            Ok(None) => None,
            Err(e) => {
                self.failed = true;
                Some(Err(e))
            }
        }
    }
}

/// A fully decoded cache.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheContents {
    pub header: CacheHeader,
    pub checksum: u64,
    pub records: Vec<TraceRecord>,
}

pub fn read_cache(path: impl AsRef<Path>) -> Result<CacheContents> {
    collect(CacheReader::open(path)?)
}

pub fn decode_cache(bytes: &[u8]) -> Result<CacheContents> {
    collect(CacheReader::new(io::Cursor::new(bytes))?)
}

fn collect<R: Read + Seek>(reader: CacheReader<R>) -> Result<CacheContents> {
    let (header, checksum) = (reader.header(), reader.checksum());
    let records = reader.collect::<Result<Vec<_>>>()?;
    Ok(CacheContents { header, checksum, records })
}
