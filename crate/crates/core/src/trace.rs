//! Execution traces: addresses, entries, scoring and trace types.

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use crate::distribution::{DistTag, Distribution};
use crate::value::Value;

/// Identifies one random draw site within a trace.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Address {
    pub full: Arc<str>,
    /// Occurrence counter of `full` within the trace, starting at 1.
    pub instance: u32,
}

impl Address {
    pub fn new(full: impl Into<Arc<str>>, instance: u32) -> Self {
        Self {
            full: full.into(),
            instance,
        }
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.full, self.instance)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum EntryKind {
    Latent = 0,
    Observed = 1,
    /// Superseded draw from a rejection loop.
    Replaced = 2,
}

impl EntryKind {
    pub fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            0 => EntryKind::Latent,
            1 => EntryKind::Observed,
            2 => EntryKind::Replaced,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceEntry {
    pub address: Address,
    pub distribution: Distribution,
    pub value: Value,
    pub log_prob: f64,
    pub kind: EntryKind,
    pub control: bool,
    pub replace: bool,
}

impl TraceEntry {
    pub fn new(
        address: Address,
        distribution: Distribution,
        value: Value,
        kind: EntryKind,
        control: bool,
        replace: bool,
    ) -> Self {
        let log_prob = distribution.log_density(&value);
        Self {
            address,
            distribution,
            value,
            log_prob,
            kind,
            control,
            replace,
        }
    }

    pub fn is_latent(&self) -> bool {
        self.kind == EntryKind::Latent
    }

    /// Latent draw that inference engines are allowed to steer.
    pub fn is_controlled(&self) -> bool {
        self.kind == EntryKind::Latent && self.control
    }
}

/// One complete simulator execution.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub entries: Vec<TraceEntry>,
    pub observation: Value,
    pub result: Value,
    pub log_prior: f64,
    pub log_likelihood: f64,
    pub type_id: u64,
    /// Importance log-weight when the trace was drawn from a proposal.
    pub log_weight: Option<f64>,
}

impl Trace {
    /// Assembles a trace and derives its scores and type.
    pub fn new(entries: Vec<TraceEntry>, observation: Value, result: Value) -> Self {
        let mut log_prior = 0.0;
        let mut log_likelihood = 0.0;
        for e in &entries {
            match e.kind {
                EntryKind::Latent => log_prior += e.log_prob,
                EntryKind::Observed => log_likelihood += e.log_prob,
                EntryKind::Replaced => {}
            }
        }
        let type_id = type_hash(entries.iter().filter(|e| e.is_latent()).map(|e| &e.address));
        Self {
            entries,
            observation,
            result,
            log_prior,
            log_likelihood,
            type_id,
            log_weight: None,
        }
    }

    pub fn empty() -> Self {
        Self::new(Vec::new(), Value::empty(), Value::empty())
    }

    pub fn log_joint(&self) -> f64 {
        self.log_prior + self.log_likelihood
    }

    pub fn latents(&self) -> impl Iterator<Item = &TraceEntry> {
        self.entries.iter().filter(|e| e.is_latent())
    }

    pub fn controlled(&self) -> impl Iterator<Item = &TraceEntry> {
        self.entries.iter().filter(|e| e.is_controlled())
    }

    pub fn observed(&self) -> impl Iterator<Item = &TraceEntry> {
        self.entries
            .iter()
            .filter(|e| e.kind == EntryKind::Observed)
    }

    pub fn latent_len(&self) -> usize {
        self.latents().count()
    }

    /// Sum of log densities of controlled latents.
    pub fn log_prior_controlled(&self) -> f64 {
        self.controlled().map(|e| e.log_prob).sum()
    }

    pub fn latent(&self, address: &Address) -> Option<&TraceEntry> {
        self.latents().find(|e| &e.address == address)
    }

    /// Copy without observe entries or observation payload; scores are kept.
    pub fn latent_view(&self) -> Trace {
        Trace {
            entries: self.latents().cloned().collect(),
            observation: Value::empty(),
            result: self.result.clone(),
            log_prior: self.log_prior,
            log_likelihood: self.log_likelihood,
            type_id: self.type_id,
            log_weight: self.log_weight,
        }
    }
}

pub fn log_joint(t: &Trace) -> f64 {
    t.log_joint()
}

pub fn trace_type(t: &Trace) -> u64 {
    t.type_id
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
#[derive(Clone, Copy, Debug)]
pub struct Fnv1a(u64);

impl Default for Fnv1a {
    fn default() -> Self {
        Self(FNV_OFFSET)
    }
}

impl Fnv1a {
    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(FNV_PRIME);
        }
    }

    pub fn finish(self) -> u64 {
        self.0
    }
}

/// Type hash over an ordered address sequence: per address the UTF-8 bytes of
/// `full`, a 0xFF separator, then `instance` as u32 LE.
pub fn type_hash<'a>(addresses: impl IntoIterator<Item = &'a Address>) -> u64 {
    let mut h = Fnv1a::default();
    for a in addresses {
        h.write(a.full.as_bytes());
        h.write(&[0xFF]);
        h.write(&a.instance.to_le_bytes());
    }
    h.finish()
}

/// Bidirectional map between full address strings and dense shorthand IDs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AddressDictionary {
    names: Vec<Arc<str>>,
    ids: HashMap<Arc<str>, u32>,
}

impl AddressDictionary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get_or_insert(&mut self, full: &Arc<str>) -> u32 {
        if let Some(&id) = self.ids.get(full) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(full.clone());
        self.ids.insert(full.clone(), id);
        id
    }

    pub fn id(&self, full: &str) -> Option<u32> {
        self.ids.get(full).copied()
    }

    pub fn name(&self, id: u32) -> Option<&Arc<str>> {
        self.names.get(id as usize)
    }

    pub fn names(&self) -> &[Arc<str>] {
        &self.names
    }

    /// Appends `name` under the next dense ID; fails if the ID would not match.
    pub fn push_with_id(&mut self, id: u32, name: Arc<str>) -> bool {
        if id as usize != self.names.len() || self.ids.contains_key(&name) {
            return false;
        }
        self.ids.insert(name.clone(), id);
        self.names.push(name);
        true
    }
}

/// Memoizes address strings per (frames, distribution tag).
#[derive(Debug, Default)]
pub struct AddressCache {
    map: RwLock<HashMap<(Vec<String>, DistTag), Arc<str>>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl AddressCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }
}

/// Builds `"<frame1>/<frame2>/.../<dist_tag>"`, caching the result.
pub fn resolve_address(raw_frames: &[&str], dist_tag: DistTag, cache: &AddressCache) -> Arc<str> {
    debug_assert!(!raw_frames.is_empty(), "address needs at least one frame");
    let key = (
        raw_frames.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
        dist_tag,
    );
    if let Some(s) = cache.map.read().unwrap().get(&key) {
        cache.hits.fetch_add(1, Ordering::Relaxed);
        return s.clone();
    }
    let mut map = cache.map.write().unwrap();
    if let Some(s) = map.get(&key) {
        cache.hits.fetch_add(1, Ordering::Relaxed);
        return s.clone();
    }
    cache.misses.fetch_add(1, Ordering::Relaxed);
    let mut full = raw_frames.join("/");
    full.push('/');
    full.push_str(dist_tag.name());
    let full: Arc<str> = full.into();
    map.insert(key, full.clone());
    full
}

#[cfg(test)]
mod tests {
    use super::*;

    fn normal01() -> Distribution {
        Distribution::Normal {
            mean: 0.0,
            std: 1.0,
        }
    }

    #[test]
    fn resolve_concatenates_and_caches() {
        let cache = AddressCache::new();
        let a = resolve_address(&["f", "g"], DistTag::Normal, &cache);
        assert_eq!(&*a, "f/g/Normal");
        assert_eq!(cache.hits(), 0);
        let b = resolve_address(&["f", "g"], DistTag::Normal, &cache);
        assert_eq!(a, b);
        assert_eq!(cache.hits(), 1);
        let c = resolve_address(&["f", "h"], DistTag::Normal, &cache);
        assert_ne!(a, c);
    }

    #[test]
    fn cache_misses_equal_unique_addresses() {
        let cache = AddressCache::new();
        let frames: Vec<String> = (0..10).map(|i| format!("site{i}")).collect();
        for k in 0..100_000 {
            let f = frames[k % 10].as_str();
            resolve_address(&["model", f], DistTag::Uniform, &cache);
        }
        assert_eq!(cache.misses(), 10);
        assert_eq!(cache.hits(), 100_000 - 10);
    }

    #[test]
    fn log_joint_of_standard_normals() {
        let t = Trace::new(
            vec![
                TraceEntry::new(
                    Address::new("x/Normal", 1),
                    normal01(),
                    Value::F64(0.0),
                    EntryKind::Latent,
                    true,
                    false,
                ),
                TraceEntry::new(
                    Address::new("y/Normal", 1),
                    normal01(),
                    Value::F64(0.0),
                    EntryKind::Observed,
                    false,
                    false,
                ),
            ],
            Value::F64(0.0),
            Value::F64(0.0),
        );
        assert!((log_joint(&t) - 2.0 * -0.918_938_533_204_672_7).abs() < 1e-12);
        assert_eq!(log_joint(&Trace::empty()), 0.0);
    }

    #[test]
    fn replaced_entries_do_not_score() {
        let mk = |kind, v: f64| {
            TraceEntry::new(
                Address::new("r/Normal", 1),
                normal01(),
                Value::F64(v),
                kind,
                false,
                true,
            )
        };
        let t = Trace::new(
            vec![mk(EntryKind::Replaced, 3.0), mk(EntryKind::Latent, 0.0)],
            Value::empty(),
            Value::empty(),
        );
        assert_eq!(t.log_prior, normal01().log_density(&Value::F64(0.0)));
        let only_latent = Trace::new(
            vec![mk(EntryKind::Latent, 0.0)],
            Value::empty(),
            Value::empty(),
        );
        assert_eq!(t.type_id, only_latent.type_id);
    }

    #[test]
    fn type_depends_on_addresses_only() {
        let mk = |vals: &[f64]| {
            Trace::new(
                vals.iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        TraceEntry::new(
                            Address::new("loop/Normal", i as u32 + 1),
                            normal01(),
                            Value::F64(v),
                            EntryKind::Latent,
                            true,
                            false,
                        )
                    })
                    .collect(),
                Value::empty(),
                Value::empty(),
            )
        };
        assert_eq!(trace_type(&mk(&[0.1, 0.2])), trace_type(&mk(&[1.1, -0.2])));
        assert_ne!(
            trace_type(&mk(&[0.1, 0.2])),
            trace_type(&mk(&[0.1, 0.2, 0.3]))
        );
    }

    #[test]
    fn fnv_reference_value() {
        // Published FNV-1a 64 test vector.
        let mut h = Fnv1a::default();
        h.write(b"a");
        assert_eq!(h.finish(), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn dictionary_dense_first_encounter() {
        let mut d = AddressDictionary::new();
        let a: Arc<str> = "a".into();
        let b: Arc<str> = "b".into();
        assert_eq!(d.get_or_insert(&b), 0);
        assert_eq!(d.get_or_insert(&a), 1);
        assert_eq!(d.get_or_insert(&b), 0);
        assert_eq!(d.name(1).map(|s| &**s), Some("a"));
        assert_eq!(d.id("b"), Some(0));
    }
}
