//! Generic match-action tables.
//!
//! A table is declared with a column schema (each column has a bit width and
//! a match kind) and a set of action variants it accepts. Entries are
//! inserted, modified and deleted by the control plane at runtime; lookups
//! happen per packet.
//!
//! Winner selection:
//! * tables with a ternary column pick the highest-priority matching entry
//!   (priorities are unique within such a table, enforced at insert),
//! * tables with an LPM column pick the longest matching prefix,
//! * exact tables have at most one matching entry.
//!
//! Lookups go through per-shape indexes (hash-free, ordered maps keep
//! iteration deterministic); a brute-force reference matcher lives in the
//! `oracles` module for differential testing.

use alloc::vec::Vec;
use alloc::collections::BTreeMap;

use thiserror::Error;

use crate::crypto::SecurityAssociation;
use crate::types::{MacAddr, PortId, SpdPolicy};

#[derive(Error, Debug, Clone, PartialEq, Eq)]
pub enum TableError {
    #[error("an entry with this key already exists")]
    DuplicateKey,
    #[error("an entry with this priority already exists")]
    DuplicatePriority,
    #[error("entry does not fit the table schema: {0}")]
    SchemaMismatch(&'static str),
    #[error("no entry with this key")]
    NoSuchEntry,
    #[error("action not known to this table")]
    UnknownAction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchKind {
    Exact,
    Lpm,
    Ternary,
}

/// One column of a table schema.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ColumnSpec {
    pub name: &'static str,
    pub bits: u8,
    pub kind: MatchKind,
}

impl ColumnSpec {
    pub const fn new(name: &'static str, bits: u8, kind: MatchKind) -> Self {
        ColumnSpec { name, bits, kind }
    }

    fn value_mask(&self) -> u64 {
        if self.bits >= 64 {
            u64::MAX
        } else {
            (1u64 << self.bits) - 1
        }
    }
}

/// A key cell of one entry, shaped by its column's match kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum MatchValue {
    Exact(u64),
    Lpm { value: u64, prefix_len: u8 },
    Ternary { value: u64, mask: u64 },
}

impl MatchValue {
    fn matches(&self, key: u64, bits: u8) -> bool {
        match *self {
            MatchValue::Exact(v) => v == key,
            MatchValue::Lpm { value, prefix_len } => {
                let mask = lpm_mask(prefix_len, bits);
                key & mask == value & mask
            }
            MatchValue::Ternary { value, mask } => key & mask == value & mask,
        }
    }
}

fn lpm_mask(prefix_len: u8, bits: u8) -> u64 {
    if prefix_len == 0 {
        0
    } else if bits >= 64 && prefix_len >= 64 {
        u64::MAX
    } else {
        let width = if bits >= 64 { u64::MAX } else { (1u64 << bits) - 1 };
        (width >> (bits - prefix_len)) << (bits - prefix_len)
    }
}

/// The actions the fixed-function pipeline understands. Which variants a
/// given table accepts is declared at table construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TableAction {
    Drop,
    /// L3 forwarding: rewrite the destination MAC and emit on `port`.
    Forward {
        next_hop_mac: MacAddr,
        port: PortId,
    },
    /// SPD verdict added to user metadata.
    SpdMark { policy: SpdPolicy },
    /// Encrypt using this SA (SAD-ENC entries).
    EspEncrypt { sa: SecurityAssociation },
    /// Decrypt using this SA (SAD-DEC entries).
    EspDecrypt { sa: SecurityAssociation },
}

impl TableAction {
    pub fn id(&self) -> &'static str {
        match self {
            TableAction::Drop => "drop",
            TableAction::Forward { .. } => "forward_packet",
            TableAction::SpdMark { .. } => "add_spd_mark",
            TableAction::EspEncrypt { .. } => "esp_encrypt",
            TableAction::EspDecrypt { .. } => "esp_decrypt",
        }
    }
}

/// One table entry: a key cell per column, a priority (meaningful only in
/// ternary tables) and the action to run on a hit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableEntry {
    pub key: Vec<MatchValue>,
    pub priority: u32,
    pub action: TableAction,
}

#[derive(Debug, Clone)]
enum Index {
    /// Normalized exact key -> entry id.
    Exact(BTreeMap<Vec<u64>, u64>),
    /// prefix_len -> masked prefix -> entry id (single LPM column).
    Lpm(BTreeMap<u8, BTreeMap<u64, u64>>),
    /// Entry ids sorted by descending priority.
    Ternary(Vec<u64>),
    /// Fallback for mixed schemas.
    Scan,
}

#[derive(Debug, Clone)]
pub struct MatchActionTable {
    name: &'static str,
    schema: Vec<ColumnSpec>,
    allowed_actions: &'static [&'static str],
    default_action: TableAction,
    entries: BTreeMap<u64, TableEntry>,
    next_id: u64,
    index: Index,
}

impl MatchActionTable {
    /// `allowed_actions` is the closed set of action ids this table accepts
    /// besides the default.
    pub fn new(
        name: &'static str,
        schema: Vec<ColumnSpec>,
        allowed_actions: &'static [&'static str],
    ) -> Self {
        let index = if schema.iter().any(|c| c.kind == MatchKind::Ternary) {
            Index::Ternary(Vec::new())
        } else if schema.len() == 1 && schema[0].kind == MatchKind::Lpm {
            Index::Lpm(BTreeMap::new())
        } else if schema.iter().all(|c| c.kind == MatchKind::Exact) {
            Index::Exact(BTreeMap::new())
        } else {
            Index::Scan
        };
        MatchActionTable {
            name,
            schema,
            allowed_actions,
            default_action: TableAction::Drop,
            entries: BTreeMap::new(),
            next_id: 0,
            index,
        }
    }

    pub fn name(&self) -> &'static str {
        self.name
    }

    pub fn schema(&self) -> &[ColumnSpec] {
        &self.schema
    }

    pub fn default_action(&self) -> &TableAction {
        &self.default_action
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in insertion order.
    pub fn entries(&self) -> impl Iterator<Item = &TableEntry> {
        self.entries.values()
    }

    fn check_action(&self, action: &TableAction) -> Result<(), TableError> {
        if self.allowed_actions.contains(&action.id()) {
            Ok(())
        } else {
            Err(TableError::UnknownAction)
        }
    }

    /// Normalize an entry key against the schema: masked bits are zeroed so
    /// key equality is canonical.
    fn normalize_key(&self, key: &[MatchValue]) -> Result<Vec<MatchValue>, TableError> {
        if key.len() != self.schema.len() {
            return Err(TableError::SchemaMismatch("key arity"));
        }
        let mut out = Vec::with_capacity(key.len());
        for (cell, col) in key.iter().zip(&self.schema) {
            let norm = match (*cell, col.kind) {
                (MatchValue::Exact(v), MatchKind::Exact) => {
                    if v > col.value_mask() {
                        return Err(TableError::SchemaMismatch("value wider than column"));
                    }
                    MatchValue::Exact(v)
                }
                (MatchValue::Lpm { value, prefix_len }, MatchKind::Lpm) => {
                    if prefix_len > col.bits {
                        return Err(TableError::SchemaMismatch("prefix longer than column"));
                    }
                    if value > col.value_mask() {
                        return Err(TableError::SchemaMismatch("value wider than column"));
                    }
                    MatchValue::Lpm {
                        value: value & lpm_mask(prefix_len, col.bits),
                        prefix_len,
                    }
                }
                (MatchValue::Ternary { value, mask }, MatchKind::Ternary) => {
                    if value > col.value_mask() || mask > col.value_mask() {
                        return Err(TableError::SchemaMismatch("value wider than column"));
                    }
                    MatchValue::Ternary {
                        value: value & mask,
                        mask,
                    }
                }
                _ => return Err(TableError::SchemaMismatch("match kind")),
            };
            out.push(norm);
        }
        Ok(out)
    }

    fn find_id(&self, key: &[MatchValue]) -> Option<u64> {
        let key = self.normalize_key(key).ok()?;
        self.entries
            .iter()
            .find(|(_, e)| e.key == key)
            .map(|(id, _)| *id)
    }

    /// Fetch the entry with exactly this key (not a packet lookup).
    pub fn get(&self, key: &[MatchValue]) -> Option<&TableEntry> {
        self.find_id(key).map(|id| &self.entries[&id])
    }

    pub fn insert(&mut self, mut entry: TableEntry) -> Result<(), TableError> {
        self.check_action(&entry.action)?;
        entry.key = self.normalize_key(&entry.key)?;
        if self.entries.values().any(|e| e.key == entry.key) {
            return Err(TableError::DuplicateKey);
        }
        if matches!(self.index, Index::Ternary(_))
            && self.entries.values().any(|e| e.priority == entry.priority)
        {
            return Err(TableError::DuplicatePriority);
        }
        let id = self.next_id;
        self.next_id += 1;
        match &mut self.index {
            Index::Exact(map) => {
                let flat = entry
                    .key
                    .iter()
                    .map(|c| match c {
                        MatchValue::Exact(v) => *v,
                        _ => unreachable!("exact index on non-exact schema"),
                    })
                    .collect::<Vec<_>>();
                map.insert(flat, id);
            }
            Index::Lpm(by_len) => {
                if let MatchValue::Lpm { value, prefix_len } = entry.key[0] {
                    by_len.entry(prefix_len).or_default().insert(value, id);
                }
            }
            Index::Ternary(order) => {
                let pos = order
                    .iter()
                    .position(|other| self.entries[other].priority < entry.priority)
                    .unwrap_or(order.len());
                order.insert(pos, id);
            }
            Index::Scan => {}
        }
        self.entries.insert(id, entry);
        Ok(())
    }

    /// Replace the action of the entry with this key. The swap is atomic
    /// with respect to packet processing: the switch executor serializes
    /// control operations and lookups.
    pub fn modify(&mut self, key: &[MatchValue], action: TableAction) -> Result<(), TableError> {
        self.check_action(&action)?;
        let id = self.find_id(key).ok_or(TableError::NoSuchEntry)?;
        self.entries.get_mut(&id).expect("id from find_id").action = action;
        Ok(())
    }

    pub fn delete(&mut self, key: &[MatchValue]) -> Result<TableEntry, TableError> {
        let id = self.find_id(key).ok_or(TableError::NoSuchEntry)?;
        let entry = self.entries.remove(&id).expect("id from find_id");
        match &mut self.index {
            Index::Exact(map) => {
                map.retain(|_, v| *v != id);
            }
            Index::Lpm(by_len) => {
                for m in by_len.values_mut() {
                    m.retain(|_, v| *v != id);
                }
                by_len.retain(|_, m| !m.is_empty());
            }
            Index::Ternary(order) => order.retain(|v| *v != id),
            Index::Scan => {}
        }
        Ok(entry)
    }

    /// Look up the winning entry for a packet key (one value per column).
    pub fn lookup(&self, key: &[u64]) -> Option<&TableEntry> {
        debug_assert_eq!(key.len(), self.schema.len());
        if key.len() != self.schema.len() {
            return None;
        }
        match &self.index {
            Index::Exact(map) => map.get(key).map(|id| &self.entries[id]),
            Index::Lpm(by_len) => {
                let bits = self.schema[0].bits;
                for (len, m) in by_len.iter().rev() {
                    let masked = key[0] & lpm_mask(*len, bits);
                    if let Some(id) = m.get(&masked) {
                        return Some(&self.entries[id]);
                    }
                }
                None
            }
            Index::Ternary(order) => order
                .iter()
                .map(|id| &self.entries[id])
                .find(|e| self.entry_matches(e, key)),
            Index::Scan => {
                let mut best: Option<(&TableEntry, u32)> = None;
                for e in self.entries.values() {
                    if !self.entry_matches(e, key) {
                        continue;
                    }
                    let score = self.lpm_score(e);
                    match best {
                        Some((_, s)) if s >= score => {}
                        _ => best = Some((e, score)),
                    }
                }
                best.map(|(e, _)| e)
            }
        }
    }

    fn entry_matches(&self, entry: &TableEntry, key: &[u64]) -> bool {
        entry
            .key
            .iter()
            .zip(&self.schema)
            .zip(key)
            .all(|((cell, col), k)| cell.matches(*k, col.bits))
    }

    fn lpm_score(&self, entry: &TableEntry) -> u32 {
        entry
            .key
            .iter()
            .map(|c| match c {
                MatchValue::Lpm { prefix_len, .. } => u32::from(*prefix_len),
                _ => 0,
            })
            .sum()
    }
}
