//! The fixed-function switch pipeline and its control surface.
//!
//! Packet path (one frame in, at most one frame out):
//!
//! ```text
//!             +-------+    non-ESP   +-----+  PROTECT  +-------------+
//! ingress --> | parse | -----------> | SPD | --------> | ESP encrypt | --+
//!             +-------+              +-----+           +-------------+   |
//!                 | ESP                 | BYPASS                         |
//!                 v                     +-------------------+           |
//!          +-------------+                                  v           v
//!          | ESP decrypt | ----------------------------> +--------------+
//!          +-------------+                                | L3 forward  | --> deparse --> egress
//!                                                         +--------------+
//! ```
//!
//! Every failure is a categorized drop; drop counters plus the forwarded
//! count always equal the ingress count. The four tables (LPM-FWD, SPD,
//! SAD-ENC, SAD-DEC) and the per-SA packet-counter registers are managed by
//! the controller through [`SwitchState::apply_control`]. A control
//! operation and a packet never interleave: one switch is driven by a
//! single logical executor, which is what makes table modify atomic.

use alloc::collections::{BTreeSet, VecDeque};
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::crypto;
use crate::packet::{self, Packet};
use crate::table::{
    ColumnSpec, MatchActionTable, MatchKind, MatchValue, TableAction, TableEntry, TableError,
};
use crate::types::{MacAddr, PortId, SaDirection, SpdPolicy, SwitchId};

#[derive(Error, Debug, Clone, PartialEq, Eq)]
pub enum ControlError {
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("unknown table {0}")]
    UnknownTable(String),
    #[error("register index {index} out of range ({len} registers)")]
    IndexOutOfRange { index: u32, len: u32 },
    #[error("unknown egress port {0}")]
    UnknownPort(PortId),
    #[error("invalid SA in action: {0}")]
    InvalidSa(&'static str),
}

/// The four pipeline tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TableId {
    LpmFwd,
    Spd,
    SadEnc,
    SadDec,
}

impl TableId {
    pub const ALL: [TableId; 4] = [TableId::LpmFwd, TableId::Spd, TableId::SadEnc, TableId::SadDec];

    pub fn name(self) -> &'static str {
        match self {
            TableId::LpmFwd => "LPM-FWD",
            TableId::Spd => "SPD",
            TableId::SadEnc => "SAD-ENC",
            TableId::SadDec => "SAD-DEC",
        }
    }

    pub fn from_name(name: &str) -> Option<TableId> {
        Self::ALL.into_iter().find(|t| t.name() == name)
    }
}

/// Why a packet was dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum DropCategory {
    Parse,
    NoSpdMatch,
    NoSa,
    IcvFail,
    HardLimit,
    TtlExpired,
    NoRoute,
}

impl DropCategory {
    pub const ALL: [DropCategory; 7] = [
        DropCategory::Parse,
        DropCategory::NoSpdMatch,
        DropCategory::NoSa,
        DropCategory::IcvFail,
        DropCategory::HardLimit,
        DropCategory::TtlExpired,
        DropCategory::NoRoute,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DropCategory::Parse => "parse",
            DropCategory::NoSpdMatch => "no-spd-match",
            DropCategory::NoSa => "no-sa",
            DropCategory::IcvFail => "icv-fail",
            DropCategory::HardLimit => "hard-limit",
            DropCategory::TtlExpired => "ttl-expired",
            DropCategory::NoRoute => "no-route",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NotificationKind {
    SoftLimit,
}

/// Switch-to-controller notification. Emitted at most once per
/// (SPI, direction) per SA incarnation, exactly when the packet counter
/// reaches the soft limit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Notification {
    pub switch_id: SwitchId,
    pub kind: NotificationKind,
    pub spi: u32,
    pub direction: SaDirection,
}

/// Per-SA packet counters. Indices are assigned by the controller and reset
/// to zero via a register write whenever an index is (re)assigned.
#[derive(Debug, Clone)]
pub struct RegisterArray {
    counters: Vec<u64>,
}

impl RegisterArray {
    pub fn new(len: usize) -> Self {
        RegisterArray {
            counters: vec![0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.counters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counters.is_empty()
    }

    fn slot(&self, index: u32) -> Result<usize, ControlError> {
        let i = index as usize;
        if i < self.counters.len() {
            Ok(i)
        } else {
            Err(ControlError::IndexOutOfRange {
                index,
                len: self.counters.len() as u32,
            })
        }
    }

    pub fn read(&self, index: u32) -> Result<u64, ControlError> {
        Ok(self.counters[self.slot(index)?])
    }

    pub fn write(&mut self, index: u32, value: u64) -> Result<(), ControlError> {
        let i = self.slot(index)?;
        self.counters[i] = value;
        Ok(())
    }

    fn increment(&mut self, index: u32) -> Result<u64, ControlError> {
        let i = self.slot(index)?;
        self.counters[i] += 1;
        Ok(self.counters[i])
    }
}

/// Control-plane request against one switch. Applied atomically with
/// respect to packet processing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ControlRequest {
    TableInsert {
        table: TableId,
        entry: TableEntry,
    },
    TableModify {
        table: TableId,
        key: Vec<MatchValue>,
        action: TableAction,
    },
    TableDelete {
        table: TableId,
        key: Vec<MatchValue>,
    },
    RegisterWrite {
        index: u32,
        value: u64,
    },
    RegisterRead {
        index: u32,
    },
}

impl ControlRequest {
    pub fn kind(&self) -> &'static str {
        match self {
            ControlRequest::TableInsert { .. } => "table_insert",
            ControlRequest::TableModify { .. } => "table_modify",
            ControlRequest::TableDelete { .. } => "table_delete",
            ControlRequest::RegisterWrite { .. } => "register_write",
            ControlRequest::RegisterRead { .. } => "register_read",
        }
    }

    pub fn table(&self) -> Option<TableId> {
        match self {
            ControlRequest::TableInsert { table, .. }
            | ControlRequest::TableModify { table, .. }
            | ControlRequest::TableDelete { table, .. } => Some(*table),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ControlResponse {
    Ack,
    Value(u64),
}

/// Result of processing one frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PacketOutcome {
    Forwarded { port: PortId, frame: Vec<u8> },
    Dropped(DropCategory),
}

#[derive(Debug, Clone)]
pub struct SwitchConfig {
    pub switch_id: SwitchId,
    /// Port id -> MAC of that port (used as source MAC on egress).
    pub ports: alloc::collections::BTreeMap<PortId, MacAddr>,
    pub register_count: usize,
}

pub const DEFAULT_REGISTER_COUNT: usize = 1024;

#[derive(Debug, Clone)]
pub struct SwitchState {
    config: SwitchConfig,
    lpm_fwd: MatchActionTable,
    spd: MatchActionTable,
    sad_enc: MatchActionTable,
    sad_dec: MatchActionTable,
    registers: RegisterArray,
    pending: VecDeque<Notification>,
    soft_notified: BTreeSet<(u32, SaDirection)>,
    drops: [u64; DropCategory::ALL.len()],
    ingress: u64,
    forwarded: u64,
    control_messages: u64,
}

impl SwitchState {
    pub fn new(config: SwitchConfig) -> Self {
        let registers = RegisterArray::new(config.register_count);
        SwitchState {
            config,
            lpm_fwd: MatchActionTable::new(
                TableId::LpmFwd.name(),
                vec![ColumnSpec::new("dst", 32, MatchKind::Lpm)],
                &["forward_packet", "drop"],
            ),
            spd: MatchActionTable::new(
                TableId::Spd.name(),
                vec![
                    ColumnSpec::new("src", 32, MatchKind::Ternary),
                    ColumnSpec::new("dst", 32, MatchKind::Ternary),
                    ColumnSpec::new("protocol", 8, MatchKind::Ternary),
                ],
                &["add_spd_mark", "drop"],
            ),
            sad_enc: MatchActionTable::new(
                TableId::SadEnc.name(),
                vec![ColumnSpec::new("dst", 32, MatchKind::Exact)],
                &["esp_encrypt", "drop"],
            ),
            sad_dec: MatchActionTable::new(
                TableId::SadDec.name(),
                vec![
                    ColumnSpec::new("outer_src", 32, MatchKind::Exact),
                    ColumnSpec::new("outer_dst", 32, MatchKind::Exact),
                    ColumnSpec::new("spi", 32, MatchKind::Exact),
                ],
                &["esp_decrypt", "drop"],
            ),
            registers,
            pending: VecDeque::new(),
            soft_notified: BTreeSet::new(),
            drops: [0; DropCategory::ALL.len()],
            ingress: 0,
            forwarded: 0,
            control_messages: 0,
        }
    }

    pub fn switch_id(&self) -> &SwitchId {
        &self.config.switch_id
    }

    pub fn table(&self, id: TableId) -> &MatchActionTable {
        match id {
            TableId::LpmFwd => &self.lpm_fwd,
            TableId::Spd => &self.spd,
            TableId::SadEnc => &self.sad_enc,
            TableId::SadDec => &self.sad_dec,
        }
    }

    fn table_mut(&mut self, id: TableId) -> &mut MatchActionTable {
        match id {
            TableId::LpmFwd => &mut self.lpm_fwd,
            TableId::Spd => &mut self.spd,
            TableId::SadEnc => &mut self.sad_enc,
            TableId::SadDec => &mut self.sad_dec,
        }
    }

    pub fn register_read(&self, index: u32) -> Result<u64, ControlError> {
        self.registers.read(index)
    }

    pub fn register_write(&mut self, index: u32, value: u64) -> Result<(), ControlError> {
        self.registers.write(index, value)
    }

    pub fn register_count(&self) -> usize {
        self.registers.len()
    }

    pub fn ingress_count(&self) -> u64 {
        self.ingress
    }

    pub fn forwarded_count(&self) -> u64 {
        self.forwarded
    }

    pub fn control_message_count(&self) -> u64 {
        self.control_messages
    }

    pub fn drop_count(&self, cat: DropCategory) -> u64 {
        self.drops[cat as usize]
    }

    /// All drop categories with their counts, in a fixed order.
    pub fn drop_counts(&self) -> impl Iterator<Item = (DropCategory, u64)> + '_ {
        DropCategory::ALL.into_iter().map(|c| (c, self.drops[c as usize]))
    }

    /// Drain queued notifications in emission order.
    pub fn poll_notifications(&mut self) -> Vec<Notification> {
        self.pending.drain(..).collect()
    }

    /// Apply one control operation. Entries are validated against the
    /// switch: forward ports must exist, SA register indices must be in
    /// range and the SA itself well-formed.
    pub fn apply_control(&mut self, req: ControlRequest) -> Result<ControlResponse, ControlError> {
        let resp = match req {
            ControlRequest::TableInsert { table, entry } => {
                self.validate_action(&entry.action)?;
                self.table_mut(table).insert(entry)?;
                ControlResponse::Ack
            }
            ControlRequest::TableModify { table, key, action } => {
                self.validate_action(&action)?;
                let old = self.table(table).get(&key).cloned();
                self.table_mut(table).modify(&key, action)?;
                if let Some(old) = old {
                    self.forget_incarnation(&old.action);
                }
                ControlResponse::Ack
            }
            ControlRequest::TableDelete { table, key } => {
                let old = self.table_mut(table).delete(&key)?;
                self.forget_incarnation(&old.action);
                ControlResponse::Ack
            }
            ControlRequest::RegisterWrite { index, value } => {
                self.registers.write(index, value)?;
                ControlResponse::Ack
            }
            ControlRequest::RegisterRead { index } => {
                ControlResponse::Value(self.registers.read(index)?)
            }
        };
        self.control_messages += 1;
        Ok(resp)
    }

    fn validate_action(&self, action: &TableAction) -> Result<(), ControlError> {
        match action {
            TableAction::Forward { port, .. } => {
                if !self.config.ports.contains_key(port) {
                    return Err(ControlError::UnknownPort(*port));
                }
            }
            TableAction::EspEncrypt { sa } | TableAction::EspDecrypt { sa } => {
                sa.validate().map_err(|_| {
                    ControlError::InvalidSa("SA rejected by validation")
                })?;
                if sa.register_index as usize >= self.registers.len() {
                    return Err(ControlError::IndexOutOfRange {
                        index: sa.register_index,
                        len: self.registers.len() as u32,
                    });
                }
            }
            TableAction::Drop | TableAction::SpdMark { .. } => {}
        }
        Ok(())
    }

    /// An SAD entry was replaced or removed: its SPI's incarnation is over,
    /// so clear the at-most-once notification marks for it.
    fn forget_incarnation(&mut self, old_action: &TableAction) {
        if let TableAction::EspEncrypt { sa } | TableAction::EspDecrypt { sa } = old_action {
            self.soft_notified.remove(&(sa.spi, SaDirection::Enc));
            self.soft_notified.remove(&(sa.spi, SaDirection::Dec));
        }
    }

    fn notify_soft(&mut self, spi: u32, direction: SaDirection) {
        if self.soft_notified.insert((spi, direction)) {
            self.pending.push_back(Notification {
                switch_id: self.config.switch_id.clone(),
                kind: NotificationKind::SoftLimit,
                spi,
                direction,
            });
        }
    }

    fn drop_packet(&mut self, cat: DropCategory) -> PacketOutcome {
        self.drops[cat as usize] += 1;
        PacketOutcome::Dropped(cat)
    }

    /// Run one frame through the pipeline. Exactly one of: a forwarded
    /// frame on an egress port, or a categorized drop. Soft-limit
    /// notifications are queued for [`Self::poll_notifications`].
    pub fn process_packet(&mut self, _ingress_port: PortId, frame: &[u8]) -> PacketOutcome {
        self.ingress += 1;
        let mut pkt = match packet::parse_packet(frame) {
            Ok(p) => p,
            Err(_) => return self.drop_packet(DropCategory::Parse),
        };

        let stage = if pkt.esp.is_some() {
            self.block_esp_decrypt(&mut pkt)
        } else {
            self.block_spd_match(&mut pkt).and_then(|()| {
                match pkt.meta.spd_mark {
                    Some(SpdPolicy::Protect) => self.block_esp_encrypt(&mut pkt),
                    Some(SpdPolicy::Bypass) => Ok(()),
                    None => unreachable!("spd block sets a mark or drops"),
                }
            })
        };
        if let Err(cat) = stage {
            return self.drop_packet(cat);
        }

        if let Err(cat) = self.block_l3_forward(&mut pkt) {
            return self.drop_packet(cat);
        }
        let port = pkt.meta.egress_port.expect("l3 forward sets egress port");
        match packet::serialize_packet(&pkt) {
            Ok(frame) => {
                self.forwarded += 1;
                PacketOutcome::Forwarded { port, frame }
            }
            // Cannot happen for a packet the pipeline built itself; counted
            // rather than panicking to keep the pipeline total.
            Err(_) => self.drop_packet(DropCategory::Parse),
        }
    }

    /// SPD matching: highest-priority ternary rule over (src, dst,
    /// protocol) adds the BYPASS/PROTECT mark; a miss or an explicit
    /// DISCARD rule drops.
    fn block_spd_match(&mut self, pkt: &mut Packet) -> Result<(), DropCategory> {
        let key = [
            u64::from(u32::from(pkt.ipv4.src)),
            u64::from(u32::from(pkt.ipv4.dst)),
            u64::from(pkt.ipv4.protocol),
        ];
        match self.spd.lookup(&key).map(|e| &e.action) {
            Some(TableAction::SpdMark { policy }) => {
                pkt.meta.spd_mark = Some(*policy);
                Ok(())
            }
            Some(TableAction::Drop) | None => Err(DropCategory::NoSpdMatch),
            Some(_) => unreachable!("SPD accepts only add_spd_mark and drop"),
        }
    }

    /// ESP encryption: SAD-ENC hit on the inner destination, counter
    /// increment, suite encapsulation, then the outer header replaces the
    /// inner one. Limit flags are set on the way.
    fn block_esp_encrypt(&mut self, pkt: &mut Packet) -> Result<(), DropCategory> {
        let key = [u64::from(u32::from(pkt.ipv4.dst))];
        let sa = match self.sad_enc.lookup(&key).map(|e| &e.action) {
            Some(TableAction::EspEncrypt { sa }) => sa.clone(),
            Some(TableAction::Drop) | None => return Err(DropCategory::NoSa),
            Some(_) => unreachable!("SAD-ENC accepts only esp_encrypt and drop"),
        };
        let count = self
            .registers
            .increment(sa.register_index)
            .expect("register index validated at insert");
        if count > sa.hard_limit {
            pkt.meta.hard_limit_reached = true;
            return Err(DropCategory::HardLimit);
        }
        if count == sa.soft_limit {
            pkt.meta.soft_limit_reached = true;
            self.notify_soft(sa.spi, SaDirection::Enc);
        }
        let inner = packet::serialize_ipv4_packet(&pkt.ipv4, &pkt.body)
            .expect("parsed packet serializes");
        // Sequence overflow can only happen past the hard limit; bucket it
        // with the limit drops.
        let (esp, ct) =
            crypto::suite_encapsulate(&sa, count, &inner).map_err(|_| DropCategory::HardLimit)?;
        pkt.ipv4 = crypto::outer_ipv4_header(&sa);
        pkt.esp = Some(esp);
        pkt.body = ct.to_wire();
        Ok(())
    }

    /// ESP decryption: SAD-DEC hit on (outer src, outer dst, SPI), counter
    /// increment, authenticate + decrypt, and the recovered inner packet
    /// replaces the outer one.
    fn block_esp_decrypt(&mut self, pkt: &mut Packet) -> Result<(), DropCategory> {
        let esp = pkt.esp.expect("decrypt block requires an ESP header");
        let key = [
            u64::from(u32::from(pkt.ipv4.src)),
            u64::from(u32::from(pkt.ipv4.dst)),
            u64::from(esp.spi),
        ];
        let sa = match self.sad_dec.lookup(&key).map(|e| &e.action) {
            Some(TableAction::EspDecrypt { sa }) => sa.clone(),
            Some(TableAction::Drop) | None => return Err(DropCategory::NoSa),
            Some(_) => unreachable!("SAD-DEC accepts only esp_decrypt and drop"),
        };
        let count = self
            .registers
            .increment(sa.register_index)
            .expect("register index validated at insert");
        if count > sa.hard_limit {
            pkt.meta.hard_limit_reached = true;
            return Err(DropCategory::HardLimit);
        }
        if count == sa.soft_limit {
            pkt.meta.soft_limit_reached = true;
            self.notify_soft(sa.spi, SaDirection::Dec);
        }
        let inner = crypto::esp_open(&sa, &esp, &pkt.body).map_err(|_| DropCategory::IcvFail)?;
        let (inner_header, inner_body) =
            packet::parse_ipv4_packet(&inner).map_err(|_| DropCategory::Parse)?;
        pkt.ipv4 = inner_header;
        pkt.esp = None;
        pkt.body = inner_body.to_vec();
        Ok(())
    }

    /// L3 forwarding: LPM on the destination, MAC rewrite, TTL decrement.
    fn block_l3_forward(&mut self, pkt: &mut Packet) -> Result<(), DropCategory> {
        if pkt.ipv4.ttl <= 1 {
            return Err(DropCategory::TtlExpired);
        }
        let key = [u64::from(u32::from(pkt.ipv4.dst))];
        match self.lpm_fwd.lookup(&key).map(|e| &e.action) {
            Some(TableAction::Forward { next_hop_mac, port }) => {
                let src_mac = *self
                    .config
                    .ports
                    .get(port)
                    .expect("forward port validated at insert");
                pkt.eth.dst_mac = *next_hop_mac;
                pkt.eth.src_mac = src_mac;
                pkt.ipv4.ttl -= 1;
                pkt.meta.egress_port = Some(*port);
                Ok(())
            }
            Some(TableAction::Drop) | None => Err(DropCategory::NoRoute),
            Some(_) => unreachable!("LPM-FWD accepts only forward_packet and drop"),
        }
    }
}
