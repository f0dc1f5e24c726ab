//! Sharded trace datasets: pruned binary records with shorthand address IDs,
//! random access through a per-shard offset index, sorting by trace type and
//! minibatch planning.
//!
//! A dataset is a directory of `shard-NNNNN.etlm` files. Each file is
//!
//! ```text
//! header  "ETLM" | version u16 | flags u16 | trace_count u64 | dict_offset u64 | index_offset u64
//! records trace_count packed records
//! dict    count u32, then per new address: id u32 | len u16 | UTF-8 bytes
//! index   per trace: offset u64 | type_id u64 | latent_len u32
//! ```
//!
//! Dictionaries are deltas: a shard lists only the addresses first seen in
//! it, so shard k is decoded with the union of shards 0..=k. Record layout is
//! in [`encode_record`].

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::fs::{self, File};
use std::io::{self, BufWriter, Read, Seek, SeekFrom, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;

use crate::rng::seeded;
use crate::trace::{Address, AddressDictionary, EntryKind, Trace, TraceEntry};
use crate::value::Value;
use crate::wire::{DecodeError, EncodeError, Reader, Writer};

pub const SHARD_MAGIC: &[u8; 4] = b"ETLM";
pub const SHARD_VERSION: u16 = 1;
pub const HEADER_LEN: u64 = 32;
pub const INDEX_ENTRY_LEN: usize = 20;
/// Header flag: traces are in (type_id, original index) order.
pub const FLAG_SORTED: u16 = 1;
pub const DEFAULT_SHARD_SIZE: usize = 10_000;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("cannot encode trace: {0}")]
    Encode(#[from] EncodeError),
    #[error("corrupt record: {0}")]
    Decode(#[from] DecodeError),
    #[error("trace index {0} out of range")]
    OutOfRange(usize),
    #[error("{0}")]
    InvalidArgument(String),
}

// Record flags.
const REC_LOG_WEIGHT: u8 = 1;
const REC_OBS_FROM_ENTRY: u8 = 2;

/// Appends one pruned record:
///
/// ```text
/// flags u8 | [log_weight f64] | entry_count u32
/// per entry: address_id u32 | instance u32 | kind u8 | control/replace bits u8 | distribution | value
/// [observation value] | result value
/// ```
///
/// Entry log densities, trace scores and the type hash are recomputed on
/// read. The observation is omitted when it equals the value of the only
/// observe entry.
pub fn encode_record(
    trace: &Trace,
    dict: &mut AddressDictionary,
    out: &mut Vec<u8>,
) -> Result<(), EncodeError> {
    let mut w = Writer::default();
    let obs_entry = single_observed_value(trace);
    let mut flags = 0;
    if trace.log_weight.is_some() {
        flags |= REC_LOG_WEIGHT;
    }
    if obs_entry.is_some_and(|v| v.bit_eq(&trace.observation)) {
        flags |= REC_OBS_FROM_ENTRY;
    }
    w.u8(flags);
    if let Some(lw) = trace.log_weight {
        w.f64(lw);
    }
    w.u32(trace.entries.len() as u32);
    for e in &trace.entries {
        w.u32(dict.get_or_insert(&e.address.full));
        w.u32(e.address.instance);
        w.u8(e.kind as u8);
        w.u8(u8::from(e.control) | u8::from(e.replace) << 1);
        w.distribution(&e.distribution)?;
        w.value(&e.value)?;
    }
    if flags & REC_OBS_FROM_ENTRY == 0 {
        w.value(&trace.observation)?;
    }
    w.value(&trace.result)?;
    out.extend_from_slice(&w.buf);
    Ok(())
}

fn single_observed_value(trace: &Trace) -> Option<&Value> {
    let mut obs = trace.observed();
    match (obs.next(), obs.next()) {
        (Some(e), None) => Some(&e.value),
        _ => None,
    }
}

/// Record with every field kept and full address strings, for size comparison.
pub fn encode_unpruned(trace: &Trace, out: &mut Vec<u8>) -> Result<(), EncodeError> {
    let mut w = Writer::default();
    w.bool(trace.log_weight.is_some());
    w.f64(trace.log_weight.unwrap_or(0.0));
    w.f64(trace.log_prior);
    w.f64(trace.log_likelihood);
    w.u64(trace.type_id);
    w.u32(trace.entries.len() as u32);
    for e in &trace.entries {
        w.str(&e.address.full)?;
        w.u32(e.address.instance);
        w.u8(e.kind as u8);
        w.u8(u8::from(e.control) | u8::from(e.replace) << 1);
        w.distribution(&e.distribution)?;
        w.value(&e.value)?;
        w.f64(e.log_prob);
    }
    w.value(&trace.observation)?;
    w.value(&trace.result)?;
    out.extend_from_slice(&w.buf);
    Ok(())
}

pub fn decode_record(bytes: &[u8], dict: &AddressDictionary) -> Result<Trace, DecodeError> {
    let mut r = Reader::new(bytes);
    let flags = r.u8()?;
    let log_weight = if flags & REC_LOG_WEIGHT != 0 {
        Some(r.f64()?)
    } else {
        None
    };
    let n = r.u32()? as usize;
    let mut entries = Vec::with_capacity(n.min(r.remaining()));
    for _ in 0..n {
        let id = r.u32()?;
        let full = dict
            .name(id)
            .ok_or_else(|| bad_record("address id"))?
            .clone();
        let instance = r.u32()?;
        let kind = EntryKind::from_byte(r.u8()?).ok_or_else(|| bad_record("entry kind"))?;
        let bits = r.u8()?;
        let distribution = r.distribution()?;
        let value = r.value()?;
        entries.push(TraceEntry::new(
            Address { full, instance },
            distribution,
            value,
            kind,
            bits & 1 != 0,
            bits & 2 != 0,
        ));
    }
    let observation = if flags & REC_OBS_FROM_ENTRY != 0 {
        None
    } else {
        Some(r.value()?)
    };
    let result = r.value()?;
    if r.remaining() != 0 {
        return Err(bad_record("trailing bytes in record"));
    }
    let mut trace = Trace::new(entries, Value::empty(), result);
    trace.observation = match observation {
        Some(o) => o,
        None => single_observed_value(&trace)
            .ok_or_else(|| bad_record("observation flag without one observe entry"))?
            .clone(),
    };
    trace.log_weight = log_weight;
    Ok(trace)
}

fn bad_record(msg: &str) -> DecodeError {
    DecodeError::Protocol(msg.to_string())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IndexEntry {
    pub offset: u64,
    pub type_id: u64,
    pub latent_len: u32,
}

fn shard_path(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("shard-{k:05}.etlm"))
}

fn format_err(path: &Path, msg: impl Into<String>) -> StoreError {
    StoreError::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Streams traces into shards. Files written by a writer that is dropped
/// without [`DatasetWriter::finish`] are removed.
pub struct DatasetWriter {
    dir: PathBuf,
    shard_size: usize,
    flags: u16,
    dict: AddressDictionary,
    dict_written: usize,
    written: Vec<PathBuf>,
    current: Option<OpenShard>,
    record: Vec<u8>,
    finished: bool,
}

struct OpenShard {
    file: BufWriter<File>,
    pos: u64,
    index: Vec<IndexEntry>,
}

impl DatasetWriter {
    /// Creates `dir` if needed; refuses to overwrite existing shards.
    pub fn create(dir: &Path, shard_size: usize) -> Result<Self, StoreError> {
        if shard_size == 0 {
            return Err(StoreError::InvalidArgument(
                "shard size must be at least 1".into(),
            ));
        }
        fs::create_dir_all(dir)?;
        if shard_path(dir, 0).exists() {
            return Err(format_err(dir, "already holds a dataset"));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            shard_size,
            flags: 0,
            dict: AddressDictionary::new(),
            dict_written: 0,
            written: Vec::new(),
            current: None,
            record: Vec::new(),
            finished: false,
        })
    }

    fn with_dictionary(mut self, dict: AddressDictionary, flags: u16) -> Self {
        self.dict = dict;
        self.flags = flags;
        self
    }

    pub fn push(&mut self, trace: &Trace) -> Result<(), StoreError> {
        self.record.clear();
        encode_record(trace, &mut self.dict, &mut self.record)?;
        let record = std::mem::take(&mut self.record);
        let res = self.push_raw(&record, trace.type_id, trace.latent_len() as u32);
        self.record = record;
        res
    }

    fn push_raw(&mut self, record: &[u8], type_id: u64, latent_len: u32) -> Result<(), StoreError> {
        if self.current.is_none() {
            let path = shard_path(&self.dir, self.written.len());
            let mut file = BufWriter::new(File::create(&path)?);
            self.written.push(path);
            file.write_all(&[0u8; HEADER_LEN as usize])?;
            self.current = Some(OpenShard {
                file,
                pos: HEADER_LEN,
                index: Vec::new(),
            });
        }
        let shard = self.current.as_mut().expect("opened above");
        shard.index.push(IndexEntry {
            offset: shard.pos,
            type_id,
            latent_len,
        });
        shard.file.write_all(record)?;
        shard.pos += record.len() as u64;
        if shard.index.len() == self.shard_size {
            self.close_shard()?;
        }
        Ok(())
    }

    fn close_shard(&mut self) -> Result<(), StoreError> {
        let Some(mut s) = self.current.take() else {
            return Ok(());
        };
        let dict_offset = s.pos;
        let new = &self.dict.names()[self.dict_written..];
        s.file.write_all(&(new.len() as u32).to_le_bytes())?;
        for (i, name) in new.iter().enumerate() {
            s.file
                .write_all(&((self.dict_written + i) as u32).to_le_bytes())?;
            let len = u16::try_from(name.len())
                .map_err(|_| StoreError::InvalidArgument(format!("address too long: {name}")))?;
            s.file.write_all(&len.to_le_bytes())?;
            s.file.write_all(name.as_bytes())?;
        }
        let index_offset = dict_offset + 4 + new.iter().map(|n| 6 + n.len() as u64).sum::<u64>();
        self.dict_written = self.dict.len();
        for e in &s.index {
            s.file.write_all(&e.offset.to_le_bytes())?;
            s.file.write_all(&e.type_id.to_le_bytes())?;
            s.file.write_all(&e.latent_len.to_le_bytes())?;
        }
        let mut header = Vec::with_capacity(HEADER_LEN as usize);
        header.extend_from_slice(SHARD_MAGIC);
        header.extend(SHARD_VERSION.to_le_bytes());
        header.extend(self.flags.to_le_bytes());
        header.extend((s.index.len() as u64).to_le_bytes());
        header.extend(dict_offset.to_le_bytes());
        header.extend(index_offset.to_le_bytes());
        s.file.seek(SeekFrom::Start(0))?;
        s.file.write_all(&header)?;
        let file = s.file.into_inner().map_err(|e| e.into_error())?;
        file.sync_all()?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<TraceDataset, StoreError> {
        self.close_shard()?;
        self.finished = true;
        TraceDataset::open(&self.dir)
    }
}

impl Drop for DatasetWriter {
    fn drop(&mut self) {
        if !self.finished {
            self.current = None;
            for p in &self.written {
                let _ = fs::remove_file(p);
            }
        }
    }
}

/// Writes `traces` into shards of `shard_size` under `dir`.
pub fn write_shards<'t>(
    traces: impl IntoIterator<Item = &'t Trace>,
    shard_size: usize,
    dir: &Path,
) -> Result<TraceDataset, StoreError> {
    let mut w = DatasetWriter::create(dir, shard_size)?;
    for t in traces {
        w.push(t)?;
    }
    w.finish()
}

#[derive(Debug)]
pub struct ShardInfo {
    pub path: PathBuf,
    pub version: u16,
    pub flags: u16,
    pub trace_count: u64,
    pub dict_offset: u64,
    pub index_offset: u64,
    /// Addresses introduced by this shard.
    pub new_addresses: usize,
    index: Vec<IndexEntry>,
    file: Mutex<File>,
}

impl ShardInfo {
    fn read_record(&self, local: usize) -> Result<Vec<u8>, StoreError> {
        let start = self.index[local].offset;
        let end = self
            .index
            .get(local + 1)
            .map_or(self.dict_offset, |e| e.offset);
        let mut buf = vec![0u8; (end - start) as usize];
        let mut f = self.file.lock().unwrap_or_else(|e| e.into_inner());
        f.seek(SeekFrom::Start(start))?;
        f.read_exact(&mut buf)?;
        Ok(buf)
    }
}

/// Read-only view of a sharded dataset with O(1) random access.
#[derive(Debug)]
pub struct TraceDataset {
    pub dir: PathBuf,
    pub shards: Vec<ShardInfo>,
    dict: Arc<AddressDictionary>,
    /// Prefix sums of shard sizes.
    starts: Vec<usize>,
}

fn le_u16(b: &[u8]) -> u16 {
    u16::from_le_bytes(b.try_into().expect("2 bytes"))
}
fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes(b.try_into().expect("4 bytes"))
}
fn le_u64(b: &[u8]) -> u64 {
    u64::from_le_bytes(b.try_into().expect("8 bytes"))
}

impl TraceDataset {
    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        let mut shards = Vec::new();
        let mut dict = AddressDictionary::new();
        let mut starts = vec![0];
        for k in 0.. {
            let path = shard_path(dir, k);
            if !path.exists() {
                break;
            }
            let mut file = File::open(&path)?;
            let len = file.metadata()?.len();
            let mut h = [0u8; HEADER_LEN as usize];
            file.read_exact(&mut h)
                .map_err(|_| format_err(&path, "truncated header"))?;
            if &h[..4] != SHARD_MAGIC {
                return Err(format_err(&path, "bad magic"));
            }
            let version = le_u16(&h[4..6]);
            if version != SHARD_VERSION {
                return Err(format_err(&path, format!("unsupported version {version}")));
            }
            let flags = le_u16(&h[6..8]);
            let trace_count = le_u64(&h[8..16]);
            let dict_offset = le_u64(&h[16..24]);
            let index_offset = le_u64(&h[24..32]);
            if dict_offset < HEADER_LEN
                || index_offset < dict_offset
                || index_offset + trace_count * INDEX_ENTRY_LEN as u64 != len
            {
                return Err(format_err(&path, "inconsistent header offsets"));
            }
            let mut tail = vec![0u8; (len - dict_offset) as usize];
            file.seek(SeekFrom::Start(dict_offset))?;
            file.read_exact(&mut tail)?;
            let (dict_bytes, index_bytes) = tail.split_at((index_offset - dict_offset) as usize);
            let new_addresses =
                read_dictionary(dict_bytes, &mut dict).map_err(|m| format_err(&path, m))?;
            let index: Vec<IndexEntry> = index_bytes
                .chunks_exact(INDEX_ENTRY_LEN)
                .map(|c| IndexEntry {
                    offset: le_u64(&c[..8]),
                    type_id: le_u64(&c[8..16]),
                    latent_len: le_u32(&c[16..20]),
                })
                .collect();
            if index.windows(2).any(|w| w[0].offset >= w[1].offset)
                || index.first().is_some_and(|e| e.offset != HEADER_LEN)
                || index.last().is_some_and(|e| e.offset >= dict_offset)
            {
                return Err(format_err(&path, "offset index out of order"));
            }
            starts.push(starts[k] + index.len());
            shards.push(ShardInfo {
                path,
                version,
                flags,
                trace_count,
                dict_offset,
                index_offset,
                new_addresses,
                index,
                file: Mutex::new(file),
            });
        }
        if shards.is_empty() {
            return Err(format_err(dir, "no shards"));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            shards,
            dict: Arc::new(dict),
            starts,
        })
    }

    pub fn len(&self) -> usize {
        *self.starts.last().expect("starts has a leading zero")
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_sorted(&self) -> bool {
        self.shards.iter().all(|s| s.flags & FLAG_SORTED != 0)
    }

    pub fn dictionary(&self) -> &AddressDictionary {
        &self.dict
    }

    fn locate(&self, i: usize) -> Result<(usize, usize), StoreError> {
        if i >= self.len() {
            return Err(StoreError::OutOfRange(i));
        }
        let k = self.starts.partition_point(|s| *s <= i) - 1;
        Ok((k, i - self.starts[k]))
    }

    pub fn index_entry(&self, i: usize) -> Result<IndexEntry, StoreError> {
        let (k, l) = self.locate(i)?;
        Ok(self.shards[k].index[l])
    }

    pub fn type_ids(&self) -> Vec<u64> {
        self.shards
            .iter()
            .flat_map(|s| s.index.iter().map(|e| e.type_id))
            .collect()
    }

    pub fn latent_lens(&self) -> Vec<u32> {
        self.shards
            .iter()
            .flat_map(|s| s.index.iter().map(|e| e.latent_len))
            .collect()
    }

    pub fn get(&self, i: usize) -> Result<Trace, StoreError> {
        let (k, l) = self.locate(i)?;
        let bytes = self.shards[k].read_record(l)?;
        Ok(decode_record(&bytes, &self.dict)?)
    }

    pub fn get_many(&self, indices: &[usize]) -> Result<Vec<Trace>, StoreError> {
        indices.iter().map(|&i| self.get(i)).collect()
    }

    /// Every trace in file order.
    pub fn iter(&self) -> impl Iterator<Item = Result<Trace, StoreError>> + '_ {
        (0..self.len()).map(|i| self.get(i))
    }

    /// Trace count per type, most frequent first.
    pub fn type_histogram(&self) -> Vec<(u64, usize)> {
        let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
        for t in self.type_ids() {
            *counts.entry(t).or_default() += 1;
        }
        let mut v: Vec<_> = counts.into_iter().collect();
        v.sort_by_key(|&(t, c)| (Reverse(c), t));
        v
    }
}

fn read_dictionary(bytes: &[u8], dict: &mut AddressDictionary) -> Result<usize, String> {
    if bytes.len() < 4 {
        return Err("truncated dictionary".into());
    }
    let n = le_u32(&bytes[..4]) as usize;
    let mut pos = 4;
    for _ in 0..n {
        let hdr = bytes.get(pos..pos + 6).ok_or("truncated dictionary")?;
        let id = le_u32(&hdr[..4]);
        let len = le_u16(&hdr[4..6]) as usize;
        let name = bytes
            .get(pos + 6..pos + 6 + len)
            .ok_or("truncated dictionary")?;
        let name = std::str::from_utf8(name).map_err(|_| "address is not UTF-8")?;
        if !dict.push_with_id(id, name.into()) {
            return Err(format!("dictionary id {id} out of sequence"));
        }
        pos += 6 + len;
    }
    if pos != bytes.len() {
        return Err("trailing bytes after dictionary".into());
    }
    Ok(n)
}

/// Stable sort of `keys` by value using `workers` sorted runs and a k-way
/// merge. Returns original positions in sorted order.
pub fn merge_sort_indices(keys: &[u64], workers: usize) -> Vec<usize> {
    use rayon::prelude::*;
    let workers = workers.max(1);
    let run = keys.len().div_ceil(workers).max(1);
    let runs: Vec<Vec<(u64, usize)>> = (0..keys.len())
        .step_by(run)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|start| {
            let mut r: Vec<(u64, usize)> = (start..(start + run).min(keys.len()))
                .map(|i| (keys[i], i))
                .collect();
            r.sort_unstable();
            r
        })
        .collect();
    let mut heap: BinaryHeap<Reverse<((u64, usize), usize, usize)>> = runs
        .iter()
        .enumerate()
        .filter(|(_, r)| !r.is_empty())
        .map(|(k, r)| Reverse((r[0], k, 0)))
        .collect();
    let mut out = Vec::with_capacity(keys.len());
    while let Some(Reverse(((_, i), k, pos))) = heap.pop() {
        out.push(i);
        if let Some(&next) = runs[k].get(pos + 1) {
            heap.push(Reverse((next, k, pos + 1)));
        }
    }
    out
}

/// Rewrites `dataset` into `out` ordered by (type_id, original index).
pub fn sort_by_type(
    dataset: &TraceDataset,
    out: &Path,
    workers: usize,
    shard_size: usize,
) -> Result<TraceDataset, StoreError> {
    let all: Vec<usize> = (0..dataset.len()).collect();
    sort_selection(dataset, &all, out, workers, shard_size)
}

/// Sorts the traces at ascending `indices` into `out`.
pub fn sort_selection(
    dataset: &TraceDataset,
    indices: &[usize],
    out: &Path,
    workers: usize,
    shard_size: usize,
) -> Result<TraceDataset, StoreError> {
    let types = dataset.type_ids();
    let keys = indices
        .iter()
        .map(|&i| types.get(i).copied().ok_or(StoreError::OutOfRange(i)))
        .collect::<Result<Vec<_>, _>>()?;
    let order: Vec<usize> = merge_sort_indices(&keys, workers)
        .into_iter()
        .map(|j| indices[j])
        .collect();
    copy_records(dataset, &order, out, shard_size, FLAG_SORTED)
}

/// Copies the traces at `indices`, in that order, into `out` unsorted.
pub fn copy_selection(
    dataset: &TraceDataset,
    indices: &[usize],
    out: &Path,
    shard_size: usize,
) -> Result<TraceDataset, StoreError> {
    copy_records(dataset, indices, out, shard_size, 0)
}

fn copy_records(
    dataset: &TraceDataset,
    order: &[usize],
    out: &Path,
    shard_size: usize,
    flags: u16,
) -> Result<TraceDataset, StoreError> {
    let mut w =
        DatasetWriter::create(out, shard_size)?.with_dictionary((*dataset.dict).clone(), flags);
    for &i in order {
        let (k, l) = dataset.locate(i)?;
        let e = dataset.shards[k].index[l];
        w.push_raw(&dataset.shards[k].read_record(l)?, e.type_id, e.latent_len)?;
    }
    w.finish()
}

/// Number of distinct types in each consecutive block of `b` traces.
pub fn sub_minibatch_counts(type_ids: &[u64], b: usize) -> Vec<usize> {
    type_ids
        .chunks(b.max(1))
        .map(|c| {
            let mut v = c.to_vec();
            v.sort_unstable();
            v.dedup();
            v.len()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MinibatchPlan {
    /// Contiguous index ranges of at most B traces, in global draw order.
    pub chunks: Vec<Range<usize>>,
    /// Bucket of each chunk; all zero when bucketing is off.
    pub bucket_of: Vec<usize>,
    /// Chunk indices per worker, in the order the worker consumes them.
    pub assignment: Vec<Vec<usize>>,
}

impl MinibatchPlan {
    /// Trace indices worker `rank` processes at its `step`-th iteration.
    pub fn minibatch(&self, rank: usize, step: usize) -> Option<Range<usize>> {
        let c = *self.assignment.get(rank)?.get(step)?;
        Some(self.chunks[c].clone())
    }

    /// Iterations every worker can run this epoch.
    pub fn steps(&self) -> usize {
        self.assignment.iter().map(Vec::len).min().unwrap_or(0)
    }
}

/// Splits `0..n` into chunks of `b`, shuffles them with `epoch_seed` and
/// deals them round-robin to `workers`. With `buckets > 1` the shuffled
/// chunks are grouped by mean latent length first and dealt bucket by bucket.
pub fn plan_minibatches(
    latent_lens: &[u32],
    b: usize,
    workers: usize,
    epoch_seed: u64,
    buckets: usize,
) -> Result<MinibatchPlan, StoreError> {
    if b == 0 || workers == 0 || buckets == 0 {
        return Err(StoreError::InvalidArgument(
            "minibatch size, worker count and bucket count must be at least 1".into(),
        ));
    }
    let n = latent_lens.len();
    let mut chunks: Vec<Range<usize>> = (0..n).step_by(b).map(|s| s..(s + b).min(n)).collect();
    let mut rng = seeded(epoch_seed);
    chunks.shuffle(&mut rng);
    let mut order: Vec<usize> = (0..chunks.len()).collect();
    let mut bucket_of = vec![0; chunks.len()];
    if buckets > 1 && !chunks.is_empty() {
        let mean = |r: &Range<usize>| {
            latent_lens[r.clone()]
                .iter()
                .map(|&l| f64::from(l))
                .sum::<f64>()
                / r.len() as f64
        };
        order.sort_by(|&a, &b| mean(&chunks[a]).total_cmp(&mean(&chunks[b])));
        let per = chunks.len().div_ceil(buckets);
        for (pos, &c) in order.iter().enumerate() {
            bucket_of[c] = pos / per;
        }
        let mut groups: Vec<Vec<usize>> = order.chunks(per).map(<[usize]>::to_vec).collect();
        groups.shuffle(&mut rng);
        for g in &mut groups {
            g.shuffle(&mut rng);
        }
        order = groups.concat();
    }
    let mut assignment = vec![Vec::new(); workers];
    for (k, c) in order.into_iter().enumerate() {
        assignment[k % workers].push(c);
    }
    Ok(MinibatchPlan {
        chunks,
        bucket_of,
        assignment,
    })
}
