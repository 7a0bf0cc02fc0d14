//! Persistent embedding store.
//!
//! The file is an append log: every `put_coarse` and `upgrade_to_fine`
//! appends self-checking blocks, and `save` rewrites the live state as a
//! compact file with a trailing index. Opening scans the blocks in order and
//! stops at the first one that is short or fails its CRC, so a torn write
//! loses at most the block being written.
//!
//! ```text
//! "EMST" | u32 version | u8 embedding encoding | u8 cache encoding | u32 num_layers
//!        | u32 len | meta (utf-8, free-form run description)
//! record: u8 1 | u64 id | u8 modality | u8 exit | u8 state | u32 dim | payload | u32 crc
//! cache:  u8 2 | u64 id | u8 layer | payload | u32 crc
//! drop:   u8 3 | u64 id | u32 crc                     (cache entry released)
//! index:  u8 4 | u32 n | n x (u64 id, u64 record_off, u64 cache_off) | u32 crc
//! footer: u64 index_offset | "EMSX"
//! ```
//!
//! Payloads are either `dim` raw f32 values or one INT4 block
//! (`u32 count | f32 scale | nibbles`). The CRC covers the block from its
//! kind byte through the payload.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::codec::{ByteReader, ByteWriter};
use crate::encoder::{ActivationSnapshot, Modality};
use crate::error::{Error, Result};
use crate::numerics::{dequantize_int4, norm, quantize_int4, QuantBlock};

pub const STORE_MAGIC: &[u8; 4] = b"EMST";
pub const STORE_FOOTER_MAGIC: &[u8; 4] = b"EMSX";
pub const STORE_VERSION: u32 = 1;
const FIXED_HEADER_LEN: usize = 4 + 4 + 1 + 1 + 4 + 4;
const FOOTER_LEN: usize = 12;

const KIND_RECORD: u8 = 1;
const KIND_CACHE: u8 = 2;
const KIND_DROP: u8 = 3;
const KIND_INDEX: u8 = 4;
const NO_OFFSET: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordState {
    Coarse,
    Fine,
}

impl RecordState {
    fn tag(self) -> u8 {
        match self {
            Self::Coarse => 0,
            Self::Fine => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Self::Coarse),
            1 => Ok(Self::Fine),
            t => Err(Error::malformed(format!("record state {t}"))),
        }
    }
}

/// How a vector payload is written to disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoding {
    F32,
    Int4,
}

impl std::fmt::Display for Encoding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::F32 => "f32",
            Self::Int4 => "int4",
        })
    }
}

impl std::str::FromStr for Encoding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Self::F32),
            "int4" => Ok(Self::Int4),
            _ => Err(Error::invalid(format!("unknown encoding {s:?} (expected f32 or int4)"))),
        }
    }
}

impl Encoding {
    fn tag(self) -> u8 {
        match self {
            Self::F32 => 0,
            Self::Int4 => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Self::F32),
            1 => Ok(Self::Int4),
            t => Err(Error::malformed(format!("encoding {t}"))),
        }
    }

    /// Bytes taken by one payload of `dim` values.
    pub fn payload_len(self, dim: usize) -> usize {
        match self {
            Self::F32 => 4 * dim,
            Self::Int4 => QuantBlock::encoded_len_for(dim),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreOptions {
    pub embedding: Encoding,
    pub cache: Encoding,
    pub num_layers: usize,
}

impl StoreOptions {
    pub fn new(num_layers: usize) -> Self {
        Self { embedding: Encoding::F32, cache: Encoding::Int4, num_layers }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub item_id: u64,
    pub modality: Modality,
    pub exit: usize,
    pub embedding: Vec<f32>,
    pub state: RecordState,
}

#[derive(Debug, Clone, PartialEq)]
enum Payload {
    F32(Vec<f32>),
    Int4(QuantBlock),
}

impl Payload {
    fn encode(values: &[f32], enc: Encoding) -> Self {
        match enc {
            Encoding::F32 => Self::F32(values.to_vec()),
            Encoding::Int4 => Self::Int4(quantize_int4(values)),
        }
    }

    fn values(&self) -> Vec<f32> {
        match self {
            Self::F32(v) => v.clone(),
            Self::Int4(q) => dequantize_int4(q),
        }
    }

    fn dim(&self) -> usize {
        match self {
            Self::F32(v) => v.len(),
            Self::Int4(q) => q.count(),
        }
    }

    fn write(&self, w: &mut ByteWriter) {
        match self {
            Self::F32(v) => w.f32s(v),
            Self::Int4(q) => w.bytes(&q.to_bytes()),
        }
    }

    fn read(r: &mut ByteReader<'_>, enc: Encoding, dim: usize) -> Result<Self> {
        match enc {
            Encoding::F32 => Ok(Self::F32(r.f32s(dim)?)),
            Encoding::Int4 => {
                let bytes = r.take(QuantBlock::encoded_len_for(dim).min(r.remaining()))?;
                let q = QuantBlock::from_bytes(bytes)?;
                if q.count() != dim {
                    return Err(Error::malformed(format!("quant block of {} values, expected {dim}", q.count())));
                }
                Ok(Self::Int4(q))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct StoredRecord {
    modality: Modality,
    exit: usize,
    state: RecordState,
    embedding: Payload,
}

/// INT4 (or lossless) hidden state at an item's exit layer, kept so the
/// fine embedding can be resumed instead of recomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationCacheEntry {
    pub item_id: u64,
    pub layer: usize,
    payload: Payload,
}

impl ActivationCacheEntry {
    /// Dequantized hidden state, decoded on every call.
    pub fn hidden(&self) -> Vec<f32> {
        self.payload.values()
    }

    pub fn quant(&self) -> Option<&QuantBlock> {
        match &self.payload {
            Payload::Int4(q) => Some(q),
            Payload::F32(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StoreStats {
    pub records: usize,
    pub cache_entries: usize,
    /// Record blocks including headers and CRCs.
    pub record_bytes: usize,
    pub cache_bytes: usize,
    /// Embedding value bytes alone (f32 values or packed INT4 codes).
    pub embedding_payload_bytes: usize,
    /// File header, index and footer.
    pub overhead_bytes: usize,
    pub total_bytes: usize,
}

impl StoreStats {
    pub fn bytes_per_record(&self) -> f64 {
        if self.records == 0 {
            0.0
        } else {
            (self.record_bytes + self.cache_bytes) as f64 / self.records as f64
        }
    }
}

/// Outcome of [`EmbeddingStore::upgrade_to_fine`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Upgrade {
    Upgraded,
    AlreadyFine,
}

#[derive(Debug)]
pub struct EmbeddingStore {
    options: StoreOptions,
    records: BTreeMap<u64, StoredRecord>,
    cache: BTreeMap<u64, ActivationCacheEntry>,
    meta: String,
    path: Option<PathBuf>,
    /// End of the last valid data block; appends start here.
    append_at: u64,
    dropped_tail_bytes: u64,
}

impl PartialEq for EmbeddingStore {
    fn eq(&self, other: &Self) -> bool {
        self.options == other.options && self.meta == other.meta && self.records == other.records && self.cache == other.cache
    }
}

fn record_block_len(enc: Encoding, dim: usize) -> usize {
    1 + 8 + 1 + 1 + 1 + 4 + enc.payload_len(dim) + 4
}

fn cache_block_len(enc: Encoding, dim: usize) -> usize {
    1 + 8 + 1 + enc.payload_len(dim) + 4
}

fn index_block_len(n: usize) -> usize {
    1 + 4 + 24 * n + 4
}

fn seal(w: ByteWriter) -> Vec<u8> {
    let mut bytes = w.into_inner();
    let crc = crc32fast::hash(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());
    bytes
}

fn record_block(id: u64, rec: &StoredRecord) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.u8(KIND_RECORD);
    w.u64(id);
    w.u8(rec.modality.tag());
    w.u8(rec.exit as u8);
    w.u8(rec.state.tag());
    w.u32(rec.embedding.dim() as u32);
    rec.embedding.write(&mut w);
    seal(w)
}

fn cache_block(entry: &ActivationCacheEntry) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.u8(KIND_CACHE);
    w.u64(entry.item_id);
    w.u8(entry.layer as u8);
    match &entry.payload {
        // lossless payloads carry their own length so both encodings parse
        // the same way
        Payload::F32(v) => {
            w.u32(v.len() as u32);
            w.f32s(v);
        }
        Payload::Int4(q) => w.bytes(&q.to_bytes()),
    }
    seal(w)
}

fn drop_block(id: u64) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.u8(KIND_DROP);
    w.u64(id);
    seal(w)
}

fn header(options: &StoreOptions, meta: &str) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(STORE_MAGIC);
    w.u32(STORE_VERSION);
    w.u8(options.embedding.tag());
    w.u8(options.cache.tag());
    w.u32(options.num_layers as u32);
    w.str(meta);
    w.into_inner()
}

/// Splits off one CRC-checked block starting at `pos`, returning the body
/// (without CRC) or `None` when the block is short or corrupt.
fn checked_block(bytes: &[u8], pos: usize, len: usize) -> Option<&[u8]> {
    let end = pos.checked_add(len)?;
    if end > bytes.len() || len < 5 {
        return None;
    }
    let body = &bytes[pos..end - 4];
    let crc = u32::from_le_bytes(bytes[end - 4..end].try_into().ok()?);
    (crc32fast::hash(body) == crc).then_some(body)
}

impl EmbeddingStore {
    pub fn in_memory(options: StoreOptions) -> Result<Self> {
        if options.num_layers == 0 || options.num_layers > u8::MAX as usize {
            return Err(Error::invalid(format!("num_layers {}", options.num_layers)));
        }
        Ok(Self {
            options,
            records: BTreeMap::new(),
            cache: BTreeMap::new(),
            meta: String::new(),
            path: None,
            append_at: 0,
            dropped_tail_bytes: 0,
        })
    }

    /// An unattached store whose saved header carries `meta`.
    pub fn in_memory_with_meta(options: StoreOptions, meta: &str) -> Result<Self> {
        let mut store = Self::in_memory(options)?;
        store.meta = meta.to_string();
        Ok(store)
    }

    /// Creates (or truncates) a store file and attaches to it.
    pub fn create(path: &Path, options: StoreOptions) -> Result<Self> {
        Self::create_with_meta(path, options, "")
    }

    /// Like `create`, recording `meta` in the file header.
    pub fn create_with_meta(path: &Path, options: StoreOptions, meta: &str) -> Result<Self> {
        let mut store = Self::in_memory_with_meta(options, meta)?;
        let head = header(&options, meta);
        fs::write(path, &head)?;
        store.path = Some(path.to_path_buf());
        store.append_at = head.len() as u64;
        Ok(store)
    }

    pub fn open(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let mut store = Self::decode(&bytes)?;
        store.path = Some(path.to_path_buf());
        Ok(store)
    }

    /// Parses a store image. Scanning stops at the first short or corrupt
    /// block; everything after it is reported as a dropped tail.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(STORE_MAGIC)?;
        let version = r.u32()?;
        if version != STORE_VERSION {
            return Err(Error::malformed(format!("store version {version}")));
        }
        let embedding = Encoding::from_tag(r.u8()?)?;
        let cache = Encoding::from_tag(r.u8()?)?;
        let num_layers = r.u32()? as usize;
        let meta = r.str()?;
        let mut store = Self::in_memory(StoreOptions { embedding, cache, num_layers })
            .map_err(|e| Error::malformed(e.to_string()))?;
        store.meta = meta;
        let mut pos = r.pos();
        let mut last_start = pos;
        let mut index_seen = false;
        while pos < bytes.len() {
            match store.scan_block(bytes, pos)? {
                Scan::Data(len) => {
                    last_start = pos;
                    pos += len;
                }
                Scan::Index(len) => {
                    let footer = pos + len;
                    if bytes.len() == footer + FOOTER_LEN
                        && bytes[footer..footer + 8] == (pos as u64).to_le_bytes()
                        && &bytes[footer + 8..] == STORE_FOOTER_MAGIC
                    {
                        index_seen = true;
                    }
                    break;
                }
                Scan::Corrupt => break,
            }
        }
        // a put whose cache block was torn off leaves a coarse record with
        // no cache entry as the very last block; drop it with the tail
        let torn: Vec<u64> = store
            .records
            .iter()
            .filter(|(id, s)| s.state == RecordState::Coarse && !store.cache.contains_key(id))
            .map(|(id, _)| *id)
            .collect();
        if let Some(&id) = torn.first() {
            let last_is_record = bytes[last_start] == KIND_RECORD
                && bytes[last_start + 1..last_start + 9] == id.to_le_bytes();
            if torn.len() > 1 || !last_is_record || index_seen {
                return Err(Error::Integrity(format!("coarse record {id} has no cache entry")));
            }
            store.records.remove(&id);
            pos = last_start;
        }
        store.append_at = pos as u64;
        store.dropped_tail_bytes = if index_seen { 0 } else { (bytes.len() - pos) as u64 };
        Ok(store)
    }

    fn scan_block(&mut self, bytes: &[u8], pos: usize) -> Result<Scan> {
        let Some(&kind) = bytes.get(pos) else { return Ok(Scan::Corrupt) };
        let mut peek = match ByteReader::at(bytes, pos + 1) {
            Ok(r) => r,
            Err(_) => return Ok(Scan::Corrupt),
        };
        let len = match kind {
            KIND_RECORD => {
                let Ok(hdr) = peek.take(8 + 3 + 4) else { return Ok(Scan::Corrupt) };
                let dim = u32::from_le_bytes(hdr[11..15].try_into().unwrap()) as usize;
                if dim > bytes.len() {
                    return Ok(Scan::Corrupt);
                }
                record_block_len(self.options.embedding, dim)
            }
            KIND_CACHE => {
                let Ok(hdr) = peek.take(8 + 1 + 4) else { return Ok(Scan::Corrupt) };
                let dim = u32::from_le_bytes(hdr[9..13].try_into().unwrap()) as usize;
                if dim > bytes.len() {
                    return Ok(Scan::Corrupt);
                }
                match self.options.cache {
                    Encoding::F32 => 1 + 8 + 1 + 4 + 4 * dim + 4,
                    Encoding::Int4 => cache_block_len(Encoding::Int4, dim),
                }
            }
            KIND_DROP => 1 + 8 + 4,
            KIND_INDEX => {
                let Ok(n) = peek.u32() else { return Ok(Scan::Corrupt) };
                let n = n as usize;
                if n > bytes.len() / 24 {
                    return Ok(Scan::Corrupt);
                }
                index_block_len(n)
            }
            _ => return Ok(Scan::Corrupt),
        };
        let Some(body) = checked_block(bytes, pos, len) else { return Ok(Scan::Corrupt) };
        // the CRC matched, so structural problems from here on are real
        // corruption rather than a torn write
        let mut r = ByteReader::new(&body[1..]);
        match kind {
            KIND_RECORD => {
                let id = r.u64()?;
                let modality = Modality::from_tag(r.u8()?).map_err(|e| Error::malformed(e.to_string()))?;
                let exit = r.u8()? as usize;
                let state = RecordState::from_tag(r.u8()?)?;
                let dim = r.u32()? as usize;
                if exit == 0 || exit > self.options.num_layers {
                    return Err(Error::malformed(format!("record {id} exit {exit}")));
                }
                let embedding = Payload::read(&mut r, self.options.embedding, dim)?;
                if state == RecordState::Fine {
                    self.cache.remove(&id);
                }
                self.records.insert(id, StoredRecord { modality, exit, state, embedding });
            }
            KIND_CACHE => {
                let id = r.u64()?;
                let layer = r.u8()? as usize;
                let payload = match self.options.cache {
                    Encoding::F32 => {
                        let n = r.u32()? as usize;
                        Payload::F32(r.f32s(n)?)
                    }
                    Encoding::Int4 => {
                        let n = u32::from_le_bytes(body[10..14].try_into().unwrap()) as usize;
                        Payload::read(&mut r, Encoding::Int4, n)?
                    }
                };
                if layer == 0 || layer > self.options.num_layers {
                    return Err(Error::malformed(format!("cache entry {id} layer {layer}")));
                }
                self.cache.insert(id, ActivationCacheEntry { item_id: id, layer, payload });
            }
            KIND_DROP => {
                let id = r.u64()?;
                self.cache.remove(&id);
            }
            _ => {
                let n = r.u32()? as usize;
                if n != self.records.len() {
                    return Err(Error::malformed(format!("index lists {n} records, found {}", self.records.len())));
                }
                for _ in 0..n {
                    let id = r.u64()?;
                    r.u64()?;
                    let cache_off = r.u64()?;
                    if !self.records.contains_key(&id) || (cache_off != NO_OFFSET) != self.cache.contains_key(&id) {
                        return Err(Error::malformed(format!("index entry {id} disagrees with blocks")));
                    }
                }
                return Ok(Scan::Index(len));
            }
        }
        Ok(Scan::Data(len))
    }

    pub fn options(&self) -> &StoreOptions {
        &self.options
    }

    pub fn meta(&self) -> &str {
        &self.meta
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// Bytes discarded as a torn or corrupt tail when the store was opened.
    pub fn dropped_tail_bytes(&self) -> u64 {
        self.dropped_tail_bytes
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.records.keys().copied().collect()
    }

    fn append(&mut self, blocks: &[Vec<u8>]) -> Result<()> {
        let Some(path) = &self.path else { return Ok(()) };
        let mut file = OpenOptions::new().write(true).open(path)?;
        // drops a stale index/footer or torn tail before appending
        file.set_len(self.append_at)?;
        file.seek(SeekFrom::Start(self.append_at))?;
        for b in blocks {
            file.write_all(b)?;
            self.append_at += b.len() as u64;
        }
        file.sync_data()?;
        Ok(())
    }

    /// Stores a coarse record and its activation snapshot.
    pub fn put_coarse(&mut self, record: &EmbeddingRecord, snapshot: &ActivationSnapshot) -> Result<()> {
        if self.records.contains_key(&record.item_id) {
            return Err(Error::DuplicateId(record.item_id));
        }
        if snapshot.item_id != record.item_id {
            return Err(Error::invalid(format!(
                "snapshot for item {} attached to record {}",
                snapshot.item_id, record.item_id
            )));
        }
        let l = self.options.num_layers;
        if record.exit == 0 || record.exit > l || snapshot.layer != record.exit {
            return Err(Error::OutOfRange(format!(
                "record exit {} / snapshot layer {} with {l} layers",
                record.exit, snapshot.layer
            )));
        }
        let stored = StoredRecord {
            modality: record.modality,
            exit: record.exit,
            state: RecordState::Coarse,
            embedding: Payload::encode(&record.embedding, self.options.embedding),
        };
        let entry = ActivationCacheEntry {
            item_id: record.item_id,
            layer: snapshot.layer,
            payload: Payload::encode(&snapshot.hidden, self.options.cache),
        };
        self.append(&[record_block(record.item_id, &stored), cache_block(&entry)])?;
        self.records.insert(record.item_id, stored);
        self.cache.insert(record.item_id, entry);
        Ok(())
    }

    fn record(&self, id: u64, stored: &StoredRecord) -> EmbeddingRecord {
        EmbeddingRecord {
            item_id: id,
            modality: stored.modality,
            exit: stored.exit,
            embedding: stored.embedding.values(),
            state: stored.state,
        }
    }

    pub fn get(&self, item_id: u64) -> Result<(EmbeddingRecord, Option<&ActivationCacheEntry>)> {
        let stored = self.records.get(&item_id).ok_or(Error::MissingId(item_id))?;
        Ok((self.record(item_id, stored), self.cache.get(&item_id)))
    }

    pub fn get_many(&self, ids: &[u64]) -> Result<Vec<EmbeddingRecord>> {
        ids.iter().map(|id| self.get(*id).map(|(r, _)| r)).collect()
    }

    /// Every record in id order.
    pub fn records(&self) -> Vec<EmbeddingRecord> {
        self.records.iter().map(|(id, s)| self.record(*id, s)).collect()
    }

    /// The granularity a record is matched at: its exit, or `L` once fine.
    pub fn granularity_of(&self, record: &EmbeddingRecord) -> usize {
        match record.state {
            RecordState::Coarse => record.exit,
            RecordState::Fine => self.options.num_layers,
        }
    }

    pub fn list_exits(&self) -> Vec<usize> {
        let mut exits: Vec<usize> = self
            .records
            .values()
            .map(|s| match s.state {
                RecordState::Coarse => s.exit,
                RecordState::Fine => self.options.num_layers,
            })
            .collect();
        exits.sort_unstable();
        exits.dedup();
        exits
    }

    /// Replaces a coarse embedding with its fine one and releases the cache
    /// entry.
    pub fn upgrade_to_fine(&mut self, item_id: u64, fine: &[f32]) -> Result<Upgrade> {
        let stored = self.records.get(&item_id).ok_or(Error::MissingId(item_id))?;
        if stored.state == RecordState::Fine {
            return Ok(Upgrade::AlreadyFine);
        }
        if fine.len() != stored.embedding.dim() {
            return Err(Error::DimensionMismatch { expected: stored.embedding.dim(), got: fine.len() });
        }
        let upgraded = StoredRecord {
            modality: stored.modality,
            exit: stored.exit,
            state: RecordState::Fine,
            embedding: Payload::encode(fine, self.options.embedding),
        };
        self.append(&[record_block(item_id, &upgraded), drop_block(item_id)])?;
        self.records.insert(item_id, upgraded);
        self.cache.remove(&item_id);
        Ok(Upgrade::Upgraded)
    }

    /// Compact image of the live state: header, one record block per item
    /// followed by its cache block, index, footer.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = header(&self.options, &self.meta);
        let mut index = Vec::with_capacity(self.records.len());
        for (id, stored) in &self.records {
            let rec_off = out.len() as u64;
            out.extend_from_slice(&record_block(*id, stored));
            let cache_off = match self.cache.get(id) {
                Some(entry) => {
                    let off = out.len() as u64;
                    out.extend_from_slice(&cache_block(entry));
                    off
                }
                None => NO_OFFSET,
            };
            index.push((*id, rec_off, cache_off));
        }
        let index_offset = out.len() as u64;
        let mut w = ByteWriter::new();
        w.u8(KIND_INDEX);
        w.u32(index.len() as u32);
        for (id, r, c) in index {
            w.u64(id);
            w.u64(r);
            w.u64(c);
        }
        out.extend_from_slice(&seal(w));
        out.extend_from_slice(&index_offset.to_le_bytes());
        out.extend_from_slice(STORE_FOOTER_MAGIC);
        out
    }

    /// Writes the compact image next to the target and renames it into
    /// place.
    pub fn save_as(&mut self, path: &Path) -> Result<()> {
        let bytes = self.encode();
        let tmp = path.with_extension("tmp");
        {
            let mut f = File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        self.path = Some(path.to_path_buf());
        self.append_at = (bytes.len() - FOOTER_LEN - index_block_len(self.records.len())) as u64;
        self.dropped_tail_bytes = 0;
        Ok(())
    }

    pub fn save(&mut self) -> Result<()> {
        let path = self.path.clone().ok_or_else(|| Error::invalid("store has no backing file"))?;
        self.save_as(&path)
    }

    /// Exact byte accounting of the compact layout written by `save`.
    pub fn storage_report(&self) -> StoreStats {
        let mut s = StoreStats { overhead_bytes: FIXED_HEADER_LEN + self.meta.len() + index_block_len(self.records.len()) + FOOTER_LEN, ..Default::default() };
        for stored in self.records.values() {
            let dim = stored.embedding.dim();
            s.records += 1;
            s.record_bytes += record_block_len(self.options.embedding, dim);
            s.embedding_payload_bytes += match self.options.embedding {
                Encoding::F32 => 4 * dim,
                Encoding::Int4 => dim.div_ceil(2),
            };
        }
        for entry in self.cache.values() {
            let dim = entry.payload.dim();
            s.cache_entries += 1;
            s.cache_bytes += match self.options.cache {
                Encoding::F32 => 1 + 8 + 1 + 4 + 4 * dim + 4,
                Encoding::Int4 => cache_block_len(Encoding::Int4, dim),
            };
        }
        s.total_bytes = s.overhead_bytes + s.record_bytes + s.cache_bytes;
        s
    }

    /// Checks the coarse ⇔ cached pairing and embedding norms.
    pub fn integrity_check(&self) -> Result<()> {
        for (id, stored) in &self.records {
            let cached = self.cache.get(id);
            match (stored.state, cached) {
                (RecordState::Coarse, None) => return Err(Error::Integrity(format!("coarse record {id} has no cache entry"))),
                (RecordState::Fine, Some(_)) => return Err(Error::Integrity(format!("fine record {id} still has a cache entry"))),
                (RecordState::Coarse, Some(e)) if e.layer != stored.exit => {
                    return Err(Error::Integrity(format!("cache entry {id} at layer {} but exit {}", e.layer, stored.exit)))
                }
                _ => {}
            }
            if let Payload::F32(v) = &stored.embedding {
                let n = norm(v);
                if n != 0.0 && (n - 1.0).abs() > 1e-5 {
                    return Err(Error::Integrity(format!("record {id} embedding norm {n}")));
                }
            }
        }
        if let Some(id) = self.cache.keys().find(|id| !self.records.contains_key(id)) {
            return Err(Error::Integrity(format!("cache entry {id} without a record")));
        }
        Ok(())
    }
}

enum Scan {
    Data(usize),
    Index(usize),
    Corrupt,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(dim: usize, seed: u64) -> Vec<f32> {
        let mut rng = crate::numerics::Rng::new(seed);
        let v: Vec<f32> = (0..dim).map(|_| rng.normal() as f32).collect();
        crate::numerics::l2_normalize(&v)
    }

    fn item(id: u64, exit: usize) -> (EmbeddingRecord, ActivationSnapshot) {
        let rec = EmbeddingRecord { item_id: id, modality: Modality::A, exit, embedding: unit(8, id), state: RecordState::Coarse };
        let snap = ActivationSnapshot { item_id: id, layer: exit, hidden: unit(16, id + 1000).iter().map(|v| v * 5.0).collect() };
        (rec, snap)
    }

    fn filled(n: u64) -> EmbeddingStore {
        let mut s = EmbeddingStore::in_memory(StoreOptions::new(12)).unwrap();
        for id in 0..n {
            let (r, snap) = item(id, 1 + (id as usize * 7) % 12);
            s.put_coarse(&r, &snap).unwrap();
        }
        s
    }

    #[test]
    fn put_get_round_trip() {
        let mut s = filled(0);
        let (r, snap) = item(5, 3);
        s.put_coarse(&r, &snap).unwrap();
        let (got, cache) = s.get(5).unwrap();
        assert_eq!(got, r);
        let cache = cache.unwrap();
        assert_eq!(cache.layer, 3);
        let q = cache.quant().unwrap();
        for (a, b) in cache.hidden().iter().zip(&snap.hidden) {
            assert!((a - b).abs() <= q.scale() / 2.0 * (1.0 + 1e-5));
        }
        assert!(matches!(s.put_coarse(&r, &snap), Err(Error::DuplicateId(5))));
        assert!(matches!(s.get(6), Err(Error::MissingId(6))));
    }

    #[test]
    fn list_exits_counts_fine_as_last_layer() {
        let mut s = filled(0);
        assert!(s.list_exits().is_empty());
        let (r, snap) = item(1, 4);
        s.put_coarse(&r, &snap).unwrap();
        assert_eq!(s.list_exits(), vec![4]);
        s.upgrade_to_fine(1, &unit(8, 9)).unwrap();
        assert_eq!(s.list_exits(), vec![12]);
        let s = filled(30);
        let mut brute: Vec<usize> = (0..30).map(|id| 1 + (id * 7) % 12).collect();
        brute.sort();
        brute.dedup();
        assert_eq!(s.list_exits(), brute);
    }

    #[test]
    fn upgrade_releases_cache_and_shrinks() {
        let mut s = filled(10);
        let before = s.storage_report().total_bytes;
        assert_eq!(s.upgrade_to_fine(3, &unit(8, 77)).unwrap(), Upgrade::Upgraded);
        let (r, cache) = s.get(3).unwrap();
        assert_eq!(r.state, RecordState::Fine);
        assert!(cache.is_none());
        assert!(s.storage_report().total_bytes < before);
        assert_eq!(s.upgrade_to_fine(3, &unit(8, 78)).unwrap(), Upgrade::AlreadyFine);
        assert_eq!(s.get(3).unwrap().0.embedding, unit(8, 77));
        s.integrity_check().unwrap();
    }

    #[test]
    fn empty_store_report() {
        let s = filled(0);
        let r = s.storage_report();
        assert_eq!(r.embedding_payload_bytes, 0);
        assert_eq!(r.total_bytes, s.encode().len());
    }

    #[test]
    fn full_scale_int4_accounting() {
        let opts = StoreOptions { embedding: Encoding::Int4, cache: Encoding::Int4, num_layers: 32 };
        let mut s = EmbeddingStore::in_memory(opts).unwrap();
        let rec = EmbeddingRecord { item_id: 1, modality: Modality::B, exit: 10, embedding: unit(1024, 1), state: RecordState::Coarse };
        let snap = ActivationSnapshot { item_id: 1, layer: 10, hidden: unit(1024, 2) };
        s.put_coarse(&rec, &snap).unwrap();
        let r = s.storage_report();
        assert_eq!(r.embedding_payload_bytes, 512);
        // 16-byte block header, 8-byte quant header, 512 codes, crc
        assert_eq!(r.record_bytes, 16 + 8 + 512 + 4);
        assert_eq!(r.cache_bytes, 10 + 8 + 512 + 4);
        assert_eq!(r.total_bytes, s.encode().len());
    }

    #[test]
    fn bulk_get_preserves_order() {
        let s = filled(1000);
        let mut ids: Vec<u64> = (0..1000).collect();
        crate::numerics::Rng::new(4).shuffle(&mut ids);
        let got = s.get_many(&ids).unwrap();
        assert!(got.iter().zip(&ids).all(|(r, id)| r.item_id == *id));
    }

    #[test]
    fn encode_decode_is_identity() {
        let mut s = filled(25);
        s.upgrade_to_fine(4, &unit(8, 1)).unwrap();
        let bytes = s.encode();
        let back = EmbeddingStore::decode(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.dropped_tail_bytes(), 0);
        assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn integrity_check_catches_orphans() {
        let mut s = filled(3);
        s.cache.remove(&1);
        assert!(matches!(s.integrity_check(), Err(Error::Integrity(_))));
    }

    #[test]
    fn lossless_cache_is_exact() {
        let opts = StoreOptions { cache: Encoding::F32, ..StoreOptions::new(12) };
        let mut s = EmbeddingStore::in_memory(opts).unwrap();
        let (r, snap) = item(2, 6);
        s.put_coarse(&r, &snap).unwrap();
        assert_eq!(s.get(2).unwrap().1.unwrap().hidden(), snap.hidden);
        let back = EmbeddingStore::decode(&s.encode()).unwrap();
        assert_eq!(back, s);
    }
}
