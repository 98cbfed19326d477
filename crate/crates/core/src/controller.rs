//! The IKE-less controller.
//!
//! Tunnels are described by profiles; the controller turns a profile into
//! two unidirectional SAs and drives the switch control APIs (and the
//! roadwarrior agent, for host-to-site tunnels) through the lifecycle
//! sequences:
//!
//! * setup: SAD-DEC inserts on both peers, then SAD-ENC, then SPD and
//!   forwarding rules. Decryption first means no ESP packet can arrive at a
//!   peer that cannot handle it.
//! * renewal: a fresh SA (new SPI, new keys) is inserted on the decrypting
//!   peer, the encrypting peer's SAD-ENC entry is swapped over with a
//!   modify, and only then is the old decryption entry removed.
//! * deletion: all SPD, SAD and route entries owned by the tunnel are
//!   removed from both peers.
//!
//! The controller is transport-agnostic: it issues [`ControlRequest`]s
//! through a [`ControlPlane`] implementation and awaits each ack before
//! moving on, so every recorded operation trace observes the orderings
//! above.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::net::Ipv4Addr;

use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};
use thiserror::Error;

use crate::agent::{AgentError, AgentMessage, ProfileSummary};
use crate::crypto::{generate_key_material, CipherSuiteId, SecurityAssociation};
use crate::switch::{ControlError, ControlRequest, ControlResponse, Notification, TableId};
use crate::table::{MatchValue, TableAction, TableEntry};
use crate::types::{
    Ipv4Prefix, MacAddr, PortId, ProfileId, RoadwarriorId, SaDirection, SpdPolicy, SwitchId,
};

/// SAD-ENC matches exact inner destinations, so a PROTECT selector must be
/// enumerable into a handful of addresses.
pub const MAX_SELECTOR_HOSTS: u64 = 8;

const SPI_ALLOC_TRIES: u32 = 64;
const DELETE_RETRIES: u32 = 2;

#[derive(Error, Debug, Clone, PartialEq, Eq)]
pub enum ControllerError {
    #[error("peer unreachable")]
    PeerUnreachable,
    #[error("table operation rejected: {0}")]
    InsertRejected(ControlError),
    #[error("agent rejected configuration: {0}")]
    AgentRejected(AgentError),
    #[error("unknown SPI {0}")]
    UnknownSpi(u32),
    #[error("unknown profile {0}")]
    UnknownProfile(ProfileId),
    #[error("unknown roadwarrior {0}")]
    UnknownRoadwarrior(RoadwarriorId),
    #[error("switch {0} is not registered")]
    UnknownSwitch(SwitchId),
    #[error("no adjacency from {0} to {1}")]
    NoAdjacency(SwitchId, Ipv4Addr),
    #[error("SPI space exhausted")]
    SpiExhaustion,
    #[error("register index space exhausted on {0}")]
    RegisterExhaustion(SwitchId),
    #[error("invalid profile: {0}")]
    InvalidProfile(&'static str),
}

/// Errors surfaced by the control transport.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PlaneError {
    PeerUnreachable,
    Rejected(ControlError),
    AgentRejected(AgentError),
}

impl From<PlaneError> for ControllerError {
    fn from(e: PlaneError) -> Self {
        match e {
            PlaneError::PeerUnreachable => ControllerError::PeerUnreachable,
            PlaneError::Rejected(c) => ControllerError::InsertRejected(c),
            PlaneError::AgentRejected(a) => ControllerError::AgentRejected(a),
        }
    }
}

/// Transport between the controller and its peers. Calls are synchronous:
/// returning `Ok` is the ack the lifecycle sequences wait for.
pub trait ControlPlane {
    fn control(
        &mut self,
        switch: &SwitchId,
        req: ControlRequest,
    ) -> Result<ControlResponse, PlaneError>;

    /// Send one message to a roadwarrior agent and take its reply.
    fn agent_send(
        &mut self,
        roadwarrior: &RoadwarriorId,
        msg: AgentMessage,
    ) -> Result<AgentMessage, PlaneError>;
}

/// Traffic selected into a tunnel, oriented left -> right. `protocol =
/// None` is a wildcard.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrafficSelector {
    pub src: Ipv4Prefix,
    pub dst: Ipv4Prefix,
    #[cfg_attr(feature = "serde", serde(default))]
    pub protocol: Option<u8>,
}

impl TrafficSelector {
    pub fn matches(&self, src: Ipv4Addr, dst: Ipv4Addr, protocol: u8) -> bool {
        self.src.contains(src)
            && self.dst.contains(dst)
            && self.protocol.is_none_or(|p| p == protocol)
    }

    /// The same selector seen from the right peer.
    pub fn reversed(&self) -> TrafficSelector {
        TrafficSelector {
            src: self.dst,
            dst: self.src,
            protocol: self.protocol,
        }
    }

    pub fn overlaps(&self, other: &TrafficSelector) -> bool {
        self.src.overlaps(&other.src)
            && self.dst.overlaps(&other.dst)
            && match (self.protocol, other.protocol) {
                (Some(a), Some(b)) => a == b,
                _ => true,
            }
    }
}

/// A switch acting as tunnel peer.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SwitchPeer {
    pub switch_id: SwitchId,
    /// Public address terminating the tunnel.
    pub endpoint_ip: Ipv4Addr,
    /// Internal network behind this peer.
    pub network_resource: Ipv4Prefix,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(untagged))]
pub enum LeftPeer {
    Switch(SwitchPeer),
    Roadwarrior { roadwarrior_id: RoadwarriorId },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum TunnelMode {
    HostToSite,
    SiteToSite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SaParams {
    pub suite: CipherSuiteId,
    pub soft_limit: u64,
    pub hard_limit: u64,
}

/// Controller-side description of one tunnel. The right peer is always a
/// switch.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TunnelProfile {
    pub profile_id: ProfileId,
    pub mode: TunnelMode,
    pub traffic_selector: TrafficSelector,
    pub left_peer: LeftPeer,
    pub right_peer: SwitchPeer,
    pub sa_params: SaParams,
}

impl TunnelProfile {
    pub fn validate(&self) -> Result<(), ControllerError> {
        if self.sa_params.soft_limit >= self.sa_params.hard_limit {
            return Err(ControllerError::InvalidProfile(
                "soft limit must be below hard limit",
            ));
        }
        match (&self.mode, &self.left_peer) {
            (TunnelMode::SiteToSite, LeftPeer::Switch(_)) => {}
            (TunnelMode::HostToSite, LeftPeer::Roadwarrior { .. }) => {}
            _ => {
                return Err(ControllerError::InvalidProfile(
                    "mode does not match left peer kind",
                ))
            }
        }
        if self.traffic_selector.src.size() > MAX_SELECTOR_HOSTS
            || self.traffic_selector.dst.size() > MAX_SELECTOR_HOSTS
        {
            return Err(ControllerError::InvalidProfile(
                "selector prefix too wide to enumerate SAD-ENC keys",
            ));
        }
        Ok(())
    }

    fn roadwarrior(&self) -> Option<&RoadwarriorId> {
        match &self.left_peer {
            LeftPeer::Roadwarrior { roadwarrior_id } => Some(roadwarrior_id),
            LeftPeer::Switch(_) => None,
        }
    }

    pub fn summary(&self) -> ProfileSummary {
        ProfileSummary {
            profile_id: self.profile_id.clone(),
            mode: self.mode,
            suite: self.sa_params.suite,
            right_endpoint: self.right_peer.endpoint_ip,
        }
    }
}

/// Which of the tunnel's two SAs: `I` runs left -> right, `J` right -> left.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum SaSlot {
    I,
    J,
}

impl SaSlot {
    fn other(self) -> SaSlot {
        match self {
            SaSlot::I => SaSlot::J,
            SaSlot::J => SaSlot::I,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum TunnelStatus {
    SettingUp,
    Established,
    Renewing(SaSlot),
    Deleting,
    Down,
}

impl TunnelStatus {
    pub fn name(&self) -> &'static str {
        match self {
            TunnelStatus::SettingUp => "setting_up",
            TunnelStatus::Established => "established",
            TunnelStatus::Renewing(_) => "renewing",
            TunnelStatus::Deleting => "deleting",
            TunnelStatus::Down => "down",
        }
    }
}

/// Lifecycle state of one tunnel.
#[derive(Debug, Clone)]
pub struct TunnelState {
    pub profile_id: ProfileId,
    pub sa_i: SecurityAssociation,
    pub sa_j: SecurityAssociation,
    pub status: TunnelStatus,
}

impl TunnelState {
    pub fn sa(&self, slot: SaSlot) -> &SecurityAssociation {
        match slot {
            SaSlot::I => &self.sa_i,
            SaSlot::J => &self.sa_j,
        }
    }

    fn sa_mut(&mut self, slot: SaSlot) -> &mut SecurityAssociation {
        match slot {
            SaSlot::I => &mut self.sa_i,
            SaSlot::J => &mut self.sa_j,
        }
    }
}

/// Key-free view of a tunnel for status exports.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct TunnelSummary {
    pub profile_id: ProfileId,
    pub status: &'static str,
    pub spi_i: u32,
    pub spi_j: u32,
    pub suite: CipherSuiteId,
    pub rekey_count: u64,
}

/// Controller-wide SPI allocation: uniform random 32-bit values >= 256,
/// retried on collision, never reused.
#[derive(Debug, Default)]
pub struct SpiAllocator {
    allocated: BTreeSet<u32>,
}

impl SpiAllocator {
    pub fn allocate<R: RngCore>(&mut self, rng: &mut R) -> Result<u32, ControllerError> {
        for _ in 0..SPI_ALLOC_TRIES {
            let spi = rng.next_u32();
            if spi >= 256 && self.allocated.insert(spi) {
                return Ok(spi);
            }
        }
        Err(ControllerError::SpiExhaustion)
    }

    pub fn len(&self) -> usize {
        self.allocated.len()
    }

    pub fn is_empty(&self) -> bool {
        self.allocated.is_empty()
    }
}

/// Per-switch register index allocation. Smallest released index is reused
/// first, which keeps runs reproducible.
#[derive(Debug)]
struct IndexAllocator {
    capacity: u32,
    next: u32,
    free: BTreeSet<u32>,
}

impl IndexAllocator {
    fn new(capacity: u32) -> Self {
        IndexAllocator {
            capacity,
            next: 0,
            free: BTreeSet::new(),
        }
    }

    fn allocate(&mut self) -> Option<u32> {
        if let Some(i) = self.free.pop_first() {
            return Some(i);
        }
        if self.next < self.capacity {
            let i = self.next;
            self.next += 1;
            Some(i)
        } else {
            None
        }
    }

    fn release(&mut self, index: u32) {
        self.free.insert(index);
    }
}

/// How a switch reaches a directly connected address: local egress port and
/// the next hop's MAC.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NextHop {
    pub port: PortId,
    pub mac: MacAddr,
}

/// What the controller knows about a switch it manages.
#[derive(Debug, Clone)]
pub struct SwitchInfo {
    pub switch_id: SwitchId,
    pub register_capacity: u32,
    /// Directly reachable addresses (neighbor switch endpoints, attached
    /// hosts) and how to get there.
    pub adjacency: BTreeMap<Ipv4Addr, NextHop>,
}

#[derive(Debug, Default, Clone)]
pub struct ControllerMetrics {
    /// Unidirectional SAs generated (a pair counts as two).
    pub sa_generated: u64,
    pub setups_completed: u64,
    pub renewals_completed: u64,
    pub deletions_completed: u64,
    pub stale_notifications: u64,
    pub warnings: Vec<String>,
}

/// One register index a tunnel holds on a switch, tagged with the SA
/// incarnation it counts for.
#[derive(Debug, Clone, PartialEq, Eq)]
struct RegAssign {
    switch: SwitchId,
    index: u32,
    spi: u32,
    direction: SaDirection,
}

/// Everything a tunnel installed, for deletion and rollback.
#[derive(Debug, Default, Clone)]
struct TunnelFootprint {
    /// Chronological list of installed entries.
    entries: Vec<(SwitchId, TableId, Vec<MatchValue>)>,
    registers: Vec<RegAssign>,
    agent: Option<RoadwarriorId>,
}

pub struct Controller {
    rng: ChaCha20Rng,
    switches: BTreeMap<SwitchId, SwitchInfo>,
    reg_alloc: BTreeMap<SwitchId, IndexAllocator>,
    roadwarriors: BTreeMap<RoadwarriorId, Ipv4Addr>,
    profiles: BTreeMap<ProfileId, TunnelProfile>,
    tunnels: BTreeMap<ProfileId, TunnelState>,
    footprints: BTreeMap<ProfileId, TunnelFootprint>,
    rekeys: BTreeMap<ProfileId, u64>,
    spi_map: BTreeMap<u32, (ProfileId, SaSlot)>,
    spis: SpiAllocator,
    renewing: BTreeSet<u32>,
    spd_priority: BTreeMap<SwitchId, u32>,
    pub metrics: ControllerMetrics,
}

impl Controller {
    pub fn new(seed: u64) -> Self {
        Controller {
            rng: ChaCha20Rng::seed_from_u64(seed),
            switches: BTreeMap::new(),
            reg_alloc: BTreeMap::new(),
            roadwarriors: BTreeMap::new(),
            profiles: BTreeMap::new(),
            tunnels: BTreeMap::new(),
            footprints: BTreeMap::new(),
            rekeys: BTreeMap::new(),
            spi_map: BTreeMap::new(),
            spis: SpiAllocator::default(),
            renewing: BTreeSet::new(),
            spd_priority: BTreeMap::new(),
            metrics: ControllerMetrics::default(),
        }
    }

    pub fn register_switch(&mut self, info: SwitchInfo) {
        self.reg_alloc.insert(
            info.switch_id.clone(),
            IndexAllocator::new(info.register_capacity),
        );
        self.switches.insert(info.switch_id.clone(), info);
    }

    /// Learn a roadwarrior's address; in a real deployment this comes with
    /// its authenticated control connection.
    pub fn register_roadwarrior(&mut self, id: RoadwarriorId, ip: Ipv4Addr) {
        self.roadwarriors.insert(id, ip);
    }

    pub fn add_profile(&mut self, profile: TunnelProfile) -> Result<(), ControllerError> {
        profile.validate()?;
        if !self.switches.contains_key(&profile.right_peer.switch_id) {
            return Err(ControllerError::UnknownSwitch(
                profile.right_peer.switch_id.clone(),
            ));
        }
        if let LeftPeer::Switch(sp) = &profile.left_peer {
            if !self.switches.contains_key(&sp.switch_id) {
                return Err(ControllerError::UnknownSwitch(sp.switch_id.clone()));
            }
        }
        self.profiles.insert(profile.profile_id.clone(), profile);
        Ok(())
    }

    pub fn profiles(&self) -> impl Iterator<Item = &TunnelProfile> {
        self.profiles.values()
    }

    pub fn tunnel(&self, id: &ProfileId) -> Option<&TunnelState> {
        self.tunnels.get(id)
    }

    pub fn rekey_total(&self) -> u64 {
        self.rekeys.values().sum()
    }

    pub fn status_snapshot(&self) -> Vec<TunnelSummary> {
        self.tunnels
            .values()
            .map(|t| TunnelSummary {
                profile_id: t.profile_id.clone(),
                status: t.status.name(),
                spi_i: t.sa_i.spi,
                spi_j: t.sa_j.spi,
                suite: t.sa_i.suite,
                rekey_count: self.rekeys.get(&t.profile_id).copied().unwrap_or(0),
            })
            .collect()
    }

    /// Tunnel endpoint addresses of a profile, left then right.
    fn endpoints(&self, profile: &TunnelProfile) -> Result<(Ipv4Addr, Ipv4Addr), ControllerError> {
        let left = match &profile.left_peer {
            LeftPeer::Switch(sp) => sp.endpoint_ip,
            LeftPeer::Roadwarrior { roadwarrior_id } => *self
                .roadwarriors
                .get(roadwarrior_id)
                .ok_or_else(|| ControllerError::UnknownRoadwarrior(roadwarrior_id.clone()))?,
        };
        Ok((left, profile.right_peer.endpoint_ip))
    }

    fn generate_sa(
        &mut self,
        profile: &TunnelProfile,
        tunnel_src: Ipv4Addr,
        tunnel_dst: Ipv4Addr,
    ) -> Result<SecurityAssociation, ControllerError> {
        let spi = self.spis.allocate(&mut self.rng)?;
        let keys = generate_key_material(profile.sa_params.suite, &mut self.rng);
        self.metrics.sa_generated += 1;
        Ok(SecurityAssociation {
            spi,
            tunnel_src,
            tunnel_dst,
            suite: profile.sa_params.suite,
            keys,
            // Placeholder; each installed copy gets its own register index
            // on the switch that holds it.
            register_index: 0,
            soft_limit: profile.sa_params.soft_limit,
            hard_limit: profile.sa_params.hard_limit,
        })
    }

    /// Generate the tunnel's SA pair: fresh unique SPIs and fresh key
    /// material for each direction.
    pub fn generate_sa_pair(
        &mut self,
        profile: &TunnelProfile,
    ) -> Result<(SecurityAssociation, SecurityAssociation), ControllerError> {
        let (left, right) = self.endpoints(profile)?;
        let sa_i = self.generate_sa(profile, left, right)?;
        let sa_j = self.generate_sa(profile, right, left)?;
        Ok((sa_i, sa_j))
    }

    fn next_spd_priority(&mut self, switch: &SwitchId) -> u32 {
        let p = self.spd_priority.entry(switch.clone()).or_insert(100);
        *p += 1;
        *p
    }

    fn allocate_register(&mut self, switch: &SwitchId) -> Result<u32, ControllerError> {
        self.reg_alloc
            .get_mut(switch)
            .ok_or_else(|| ControllerError::UnknownSwitch(switch.clone()))?
            .allocate()
            .ok_or_else(|| ControllerError::RegisterExhaustion(switch.clone()))
    }

    fn release_register(&mut self, switch: &SwitchId, index: u32) {
        if let Some(alloc) = self.reg_alloc.get_mut(switch) {
            alloc.release(index);
        }
    }

    fn op(
        &mut self,
        plane: &mut dyn ControlPlane,
        switch: &SwitchId,
        req: ControlRequest,
    ) -> Result<(), ControllerError> {
        plane.control(switch, req)?;
        Ok(())
    }

    /// Register reset + SAD-DEC insert for one inbound SA on `switch`.
    fn install_dec(
        &mut self,
        plane: &mut dyn ControlPlane,
        switch: &SwitchId,
        sa: &SecurityAssociation,
        fp: &mut TunnelFootprint,
    ) -> Result<(), ControllerError> {
        let index = self.allocate_register(switch)?;
        let mut sa = sa.clone();
        sa.register_index = index;
        self.op(plane, switch, ControlRequest::RegisterWrite { index, value: 0 })?;
        fp.registers.push(RegAssign {
            switch: switch.clone(),
            index,
            spi: sa.spi,
            direction: SaDirection::Dec,
        });
        let key = dec_key(&sa);
        self.op(
            plane,
            switch,
            ControlRequest::TableInsert {
                table: TableId::SadDec,
                entry: TableEntry {
                    key: key.clone(),
                    priority: 0,
                    action: TableAction::EspDecrypt { sa },
                },
            },
        )?;
        fp.entries.push((switch.clone(), TableId::SadDec, key));
        Ok(())
    }

    /// Register reset + SAD-ENC inserts (one per inner destination) for one
    /// outbound SA on `switch`. All entries share the SA's counter.
    fn install_enc(
        &mut self,
        plane: &mut dyn ControlPlane,
        switch: &SwitchId,
        sa: &SecurityAssociation,
        inner_dsts: &[Ipv4Addr],
        fp: &mut TunnelFootprint,
    ) -> Result<(), ControllerError> {
        let index = self.allocate_register(switch)?;
        let mut sa = sa.clone();
        sa.register_index = index;
        self.op(plane, switch, ControlRequest::RegisterWrite { index, value: 0 })?;
        fp.registers.push(RegAssign {
            switch: switch.clone(),
            index,
            spi: sa.spi,
            direction: SaDirection::Enc,
        });
        for dst in inner_dsts {
            let key = enc_key(*dst);
            self.op(
                plane,
                switch,
                ControlRequest::TableInsert {
                    table: TableId::SadEnc,
                    entry: TableEntry {
                        key: key.clone(),
                        priority: 0,
                        action: TableAction::EspEncrypt { sa: sa.clone() },
                    },
                },
            )?;
            fp.entries.push((switch.clone(), TableId::SadEnc, key));
        }
        Ok(())
    }

    fn install_spd(
        &mut self,
        plane: &mut dyn ControlPlane,
        switch: &SwitchId,
        selector: &TrafficSelector,
        fp: &mut TunnelFootprint,
    ) -> Result<(), ControllerError> {
        let priority = self.next_spd_priority(switch);
        let key = spd_key(selector);
        self.op(
            plane,
            switch,
            ControlRequest::TableInsert {
                table: TableId::Spd,
                entry: TableEntry {
                    key: key.clone(),
                    priority,
                    action: TableAction::SpdMark {
                        policy: SpdPolicy::Protect,
                    },
                },
            },
        )?;
        fp.entries.push((switch.clone(), TableId::Spd, key));
        Ok(())
    }

    fn install_route(
        &mut self,
        plane: &mut dyn ControlPlane,
        switch: &SwitchId,
        prefix: Ipv4Prefix,
        via: Ipv4Addr,
        fp: &mut TunnelFootprint,
    ) -> Result<(), ControllerError> {
        let info = self
            .switches
            .get(switch)
            .ok_or_else(|| ControllerError::UnknownSwitch(switch.clone()))?;
        let hop = *info
            .adjacency
            .get(&via)
            .ok_or_else(|| ControllerError::NoAdjacency(switch.clone(), via))?;
        let key = vec![MatchValue::Lpm {
            value: u64::from(u32::from(prefix.addr())),
            prefix_len: prefix.len(),
        }];
        self.op(
            plane,
            switch,
            ControlRequest::TableInsert {
                table: TableId::LpmFwd,
                entry: TableEntry {
                    key: key.clone(),
                    priority: 0,
                    action: TableAction::Forward {
                        next_hop_mac: hop.mac,
                        port: hop.port,
                    },
                },
            },
        )?;
        fp.entries.push((switch.clone(), TableId::LpmFwd, key));
        Ok(())
    }

    /// Best-effort removal of everything in a footprint, newest first.
    /// Used for rollback; failures are recorded, not raised.
    fn rollback(
        &mut self,
        plane: &mut dyn ControlPlane,
        profile_id: &ProfileId,
        fp: TunnelFootprint,
    ) {
        for (switch, table, key) in fp.entries.into_iter().rev() {
            let req = ControlRequest::TableDelete { table, key };
            if plane.control(&switch, req).is_err() {
                self.metrics
                    .warnings
                    .push(format!("rollback: failed to delete entry on {switch}"));
            }
        }
        for r in fp.registers {
            self.release_register(&r.switch, r.index);
        }
        if let Some(rw) = fp.agent {
            let _ = plane.agent_send(
                &rw,
                AgentMessage::Teardown {
                    profile_id: profile_id.clone(),
                },
            );
        }
    }

    /// Bring a tunnel up. Strict order per peer: SAD-DEC, then SAD-ENC,
    /// then SPD and forwarding rules. All-or-nothing: on any failure every
    /// installed entry is removed again and the tunnel is down.
    pub fn setup_tunnel(
        &mut self,
        profile_id: &ProfileId,
        plane: &mut dyn ControlPlane,
    ) -> Result<(), ControllerError> {
        let profile = self
            .profiles
            .get(profile_id)
            .ok_or_else(|| ControllerError::UnknownProfile(profile_id.clone()))?
            .clone();
        if let Some(t) = self.tunnels.get(profile_id) {
            if !matches!(t.status, TunnelStatus::Down) {
                return Ok(()); // already up or in progress
            }
        }

        let (sa_i, sa_j) = self.generate_sa_pair(&profile)?;
        let mut fp = TunnelFootprint::default();
        match self.setup_inner(&profile, &sa_i, &sa_j, plane, &mut fp) {
            Ok(()) => {
                self.spi_map
                    .insert(sa_i.spi, (profile_id.clone(), SaSlot::I));
                self.spi_map
                    .insert(sa_j.spi, (profile_id.clone(), SaSlot::J));
                self.footprints.insert(profile_id.clone(), fp);
                self.rekeys.entry(profile_id.clone()).or_insert(0);
                self.tunnels.insert(
                    profile_id.clone(),
                    TunnelState {
                        profile_id: profile_id.clone(),
                        sa_i,
                        sa_j,
                        status: TunnelStatus::Established,
                    },
                );
                self.metrics.setups_completed += 1;
                Ok(())
            }
            Err(e) => {
                self.rollback(plane, profile_id, fp);
                self.tunnels.insert(
                    profile_id.clone(),
                    TunnelState {
                        profile_id: profile_id.clone(),
                        sa_i,
                        sa_j,
                        status: TunnelStatus::Down,
                    },
                );
                Err(e)
            }
        }
    }

    fn setup_inner(
        &mut self,
        profile: &TunnelProfile,
        sa_i: &SecurityAssociation,
        sa_j: &SecurityAssociation,
        plane: &mut dyn ControlPlane,
        fp: &mut TunnelFootprint,
    ) -> Result<(), ControllerError> {
        let right = profile.right_peer.clone();
        let selector = &profile.traffic_selector;
        let left_dsts: Vec<Ipv4Addr> = selector.src.addrs().collect();
        let right_dsts: Vec<Ipv4Addr> = selector.dst.addrs().collect();

        match profile.left_peer.clone() {
            LeftPeer::Switch(left) => {
                // Phase 1: decryption on both peers.
                self.install_dec(plane, &left.switch_id, sa_j, fp)?;
                self.install_dec(plane, &right.switch_id, sa_i, fp)?;
                // Phase 2: encryption on both peers.
                self.install_enc(plane, &left.switch_id, sa_i, &right_dsts, fp)?;
                self.install_enc(plane, &right.switch_id, sa_j, &left_dsts, fp)?;
                // Phase 3: SPD and forwarding.
                self.install_spd(plane, &left.switch_id, selector, fp)?;
                self.install_spd(plane, &right.switch_id, &selector.reversed(), fp)?;
                self.install_route(
                    plane,
                    &left.switch_id,
                    right.network_resource,
                    right.endpoint_ip,
                    fp,
                )?;
                self.install_route(
                    plane,
                    &right.switch_id,
                    left.network_resource,
                    left.endpoint_ip,
                    fp,
                )?;
            }
            LeftPeer::Roadwarrior { roadwarrior_id } => {
                // The switch must be able to decrypt before the host can
                // send, and the host must be configured before the switch
                // encrypts toward it.
                self.install_dec(plane, &right.switch_id, sa_i, fp)?;
                let apply = AgentMessage::ConfigApply {
                    profile_id: profile.profile_id.clone(),
                    sa_in: sa_j.clone(),
                    sa_out: sa_i.clone(),
                    traffic_selector: selector.clone(),
                    routes: vec![right.network_resource],
                };
                plane.agent_send(&roadwarrior_id, apply)?;
                fp.agent = Some(roadwarrior_id);
                self.install_enc(plane, &right.switch_id, sa_j, &left_dsts, fp)?;
                self.install_spd(plane, &right.switch_id, &selector.reversed(), fp)?;
            }
        }
        Ok(())
    }

    /// Where the ENC and DEC halves of one SA slot live; a `None` switch
    /// means that half lives on the roadwarrior host.
    fn slot_peers(
        &self,
        profile: &TunnelProfile,
        slot: SaSlot,
    ) -> (Option<SwitchId>, Option<SwitchId>, Option<RoadwarriorId>) {
        let right = profile.right_peer.switch_id.clone();
        match (&profile.left_peer, slot) {
            (LeftPeer::Switch(l), SaSlot::I) => (Some(l.switch_id.clone()), Some(right), None),
            (LeftPeer::Switch(l), SaSlot::J) => (Some(right), Some(l.switch_id.clone()), None),
            (LeftPeer::Roadwarrior { roadwarrior_id }, SaSlot::I) => {
                (None, Some(right), Some(roadwarrior_id.clone()))
            }
            (LeftPeer::Roadwarrior { roadwarrior_id }, SaSlot::J) => {
                (Some(right), None, Some(roadwarrior_id.clone()))
            }
        }
    }

    /// Handle a soft-limit notification from a switch. Duplicate or stale
    /// notifications (an SPI already renewed or being renewed) are ignored.
    pub fn handle_notification(
        &mut self,
        n: &Notification,
        plane: &mut dyn ControlPlane,
    ) -> Result<(), ControllerError> {
        self.handle_expiry(n.spi, plane)
    }

    fn handle_expiry(
        &mut self,
        spi: u32,
        plane: &mut dyn ControlPlane,
    ) -> Result<(), ControllerError> {
        if self.renewing.contains(&spi) {
            return Ok(());
        }
        let Some((profile_id, slot)) = self.spi_map.get(&spi).cloned() else {
            self.metrics.stale_notifications += 1;
            return Ok(());
        };
        self.renew_sa(&profile_id, slot, plane)
    }

    /// Replace one direction's SA: DEC-insert(new), ENC-modify,
    /// DEC-delete(old). Fresh register indices reset the renewed
    /// direction's counters.
    pub fn renew_sa(
        &mut self,
        profile_id: &ProfileId,
        slot: SaSlot,
        plane: &mut dyn ControlPlane,
    ) -> Result<(), ControllerError> {
        let profile = self
            .profiles
            .get(profile_id)
            .ok_or_else(|| ControllerError::UnknownProfile(profile_id.clone()))?
            .clone();
        let Some(tunnel) = self.tunnels.get(profile_id) else {
            return Err(ControllerError::UnknownProfile(profile_id.clone()));
        };
        if !matches!(tunnel.status, TunnelStatus::Established) {
            return Ok(()); // a renewal is in flight or the tunnel is going down
        }
        let old_sa = tunnel.sa(slot).clone();
        let other_sa = tunnel.sa(slot.other()).clone();
        self.renewing.insert(old_sa.spi);
        if let Some(t) = self.tunnels.get_mut(profile_id) {
            t.status = TunnelStatus::Renewing(slot);
        }

        let new_sa = match self.generate_sa(&profile, old_sa.tunnel_src, old_sa.tunnel_dst) {
            Ok(sa) => sa,
            Err(e) => {
                self.renewing.remove(&old_sa.spi);
                if let Some(t) = self.tunnels.get_mut(profile_id) {
                    t.status = TunnelStatus::Established;
                }
                return Err(e);
            }
        };

        let mut fp_delta = TunnelFootprint::default();
        match self.renew_steps(&profile, slot, &old_sa, &other_sa, &new_sa, plane, &mut fp_delta)
        {
            Ok(removed) => {
                let fp = self.footprints.entry(profile_id.clone()).or_default();
                fp.entries.extend(fp_delta.entries);
                fp.registers.extend(fp_delta.registers);
                for gone in &removed {
                    if let Some(pos) = fp.entries.iter().position(|e| e == gone) {
                        fp.entries.remove(pos);
                    }
                }
                // Registers of the old incarnation are free again.
                let released: Vec<RegAssign> = fp
                    .registers
                    .iter()
                    .filter(|r| r.spi == old_sa.spi)
                    .cloned()
                    .collect();
                fp.registers.retain(|r| r.spi != old_sa.spi);
                for r in released {
                    self.release_register(&r.switch, r.index);
                }

                self.spi_map.remove(&old_sa.spi);
                self.spi_map.insert(new_sa.spi, (profile_id.clone(), slot));
                self.renewing.remove(&old_sa.spi);
                if let Some(t) = self.tunnels.get_mut(profile_id) {
                    *t.sa_mut(slot) = new_sa;
                    t.status = TunnelStatus::Established;
                }
                *self.rekeys.entry(profile_id.clone()).or_insert(0) += 1;
                self.metrics.renewals_completed += 1;
                Ok(())
            }
            Err(e) => {
                // Keep the old SA working; withdraw whatever the renewal
                // managed to install.
                self.rollback(plane, profile_id, fp_delta);
                self.renewing.remove(&old_sa.spi);
                if let Some(t) = self.tunnels.get_mut(profile_id) {
                    t.status = TunnelStatus::Established;
                }
                self.metrics
                    .warnings
                    .push(format!("renewal of {profile_id} failed: {e}"));
                Err(e)
            }
        }
    }

    /// The three renewal steps. Returns the entries removed in step 3 so
    /// the footprint can be reconciled.
    #[allow(clippy::too_many_arguments)]
    fn renew_steps(
        &mut self,
        profile: &TunnelProfile,
        slot: SaSlot,
        old_sa: &SecurityAssociation,
        other_sa: &SecurityAssociation,
        new_sa: &SecurityAssociation,
        plane: &mut dyn ControlPlane,
        fp_delta: &mut TunnelFootprint,
    ) -> Result<Vec<(SwitchId, TableId, Vec<MatchValue>)>, ControllerError> {
        let (enc_peer, dec_peer, roadwarrior) = self.slot_peers(profile, slot);
        let mut removed = Vec::new();

        // Step 1: install the new decryption SA on the receiving peer.
        if let Some(dec_switch) = &dec_peer {
            self.install_dec(plane, dec_switch, new_sa, fp_delta)?;
        } else if let Some(rw) = &roadwarrior {
            // The host decrypts this slot: push the new inbound SA. The
            // host keeps the previous inbound SA alive for in-flight
            // packets until the next apply.
            plane.agent_send(
                rw,
                AgentMessage::ConfigApply {
                    profile_id: profile.profile_id.clone(),
                    sa_in: new_sa.clone(),
                    sa_out: other_sa.clone(),
                    traffic_selector: profile.traffic_selector.clone(),
                    routes: vec![profile.right_peer.network_resource],
                },
            )?;
        }

        // Step 2: swap the encrypting peer over to the new SA.
        if let Some(enc_switch) = &enc_peer {
            let index = self.allocate_register(enc_switch)?;
            let mut sa = new_sa.clone();
            sa.register_index = index;
            self.op(
                plane,
                enc_switch,
                ControlRequest::RegisterWrite { index, value: 0 },
            )?;
            fp_delta.registers.push(RegAssign {
                switch: enc_switch.clone(),
                index,
                spi: sa.spi,
                direction: SaDirection::Enc,
            });
            let inner_dsts: Vec<Ipv4Addr> = match slot {
                SaSlot::I => profile.traffic_selector.dst.addrs().collect(),
                SaSlot::J => profile.traffic_selector.src.addrs().collect(),
            };
            for dst in inner_dsts {
                self.op(
                    plane,
                    enc_switch,
                    ControlRequest::TableModify {
                        table: TableId::SadEnc,
                        key: enc_key(dst),
                        action: TableAction::EspEncrypt { sa: sa.clone() },
                    },
                )?;
            }
        } else if let Some(rw) = &roadwarrior {
            plane.agent_send(
                rw,
                AgentMessage::ConfigApply {
                    profile_id: profile.profile_id.clone(),
                    sa_in: other_sa.clone(),
                    sa_out: new_sa.clone(),
                    traffic_selector: profile.traffic_selector.clone(),
                    routes: vec![profile.right_peer.network_resource],
                },
            )?;
        }

        // Step 3: nothing encrypts under the old SPI anymore; remove its
        // decryption entry.
        if let Some(dec_switch) = &dec_peer {
            let key = dec_key(old_sa);
            self.op(
                plane,
                dec_switch,
                ControlRequest::TableDelete {
                    table: TableId::SadDec,
                    key: key.clone(),
                },
            )?;
            removed.push((dec_switch.clone(), TableId::SadDec, key));
        }
        Ok(removed)
    }

    /// Tear a tunnel down: every SPD, SAD-ENC, SAD-DEC and route entry it
    /// owns is removed from both peers; a roadwarrior gets a Teardown.
    /// Deleting an already-down tunnel is a no-op.
    pub fn delete_tunnel(
        &mut self,
        profile_id: &ProfileId,
        plane: &mut dyn ControlPlane,
    ) -> Result<(), ControllerError> {
        let Some(tunnel) = self.tunnels.get_mut(profile_id) else {
            return Ok(());
        };
        if matches!(tunnel.status, TunnelStatus::Down) {
            return Ok(());
        }
        tunnel.status = TunnelStatus::Deleting;
        let old_i = tunnel.sa_i.spi;
        let old_j = tunnel.sa_j.spi;
        let fp = self.footprints.remove(profile_id).unwrap_or_default();

        // SPD first: matching traffic falls to default deny immediately.
        for table in [TableId::Spd, TableId::SadEnc, TableId::SadDec, TableId::LpmFwd] {
            for (switch, t, key) in fp.entries.iter().filter(|(_, t, _)| *t == table) {
                let req = ControlRequest::TableDelete {
                    table: *t,
                    key: key.clone(),
                };
                let mut ok = false;
                for _ in 0..=DELETE_RETRIES {
                    match plane.control(switch, req.clone()) {
                        Ok(_) => {
                            ok = true;
                            break;
                        }
                        Err(PlaneError::PeerUnreachable) => continue,
                        Err(_) => break,
                    }
                }
                if !ok {
                    self.metrics.warnings.push(format!(
                        "delete: entry in {} on {switch} could not be removed",
                        table.name()
                    ));
                }
            }
        }
        for r in fp.registers {
            self.release_register(&r.switch, r.index);
        }
        if let Some(rw) = fp.agent {
            let msg = AgentMessage::Teardown {
                profile_id: profile_id.clone(),
            };
            if plane.agent_send(&rw, msg).is_err() {
                self.metrics
                    .warnings
                    .push(format!("delete: teardown to {rw} failed"));
            }
        }
        self.spi_map.remove(&old_i);
        self.spi_map.remove(&old_j);
        self.renewing.remove(&old_i);
        self.renewing.remove(&old_j);
        if let Some(t) = self.tunnels.get_mut(profile_id) {
            t.status = TunnelStatus::Down;
        }
        self.metrics.deletions_completed += 1;
        Ok(())
    }

    /// Profiles offered to a connecting roadwarrior.
    pub fn agent_offer(&self, rw: &RoadwarriorId) -> Result<AgentMessage, ControllerError> {
        if !self.roadwarriors.contains_key(rw) {
            return Err(ControllerError::UnknownRoadwarrior(rw.clone()));
        }
        let profiles: Vec<ProfileSummary> = self
            .profiles
            .values()
            .filter(|p| p.roadwarrior() == Some(rw))
            .map(|p| p.summary())
            .collect();
        Ok(AgentMessage::TunnelOffer { profiles })
    }

    /// One inbound agent message; the reply is what goes back down the
    /// channel.
    pub fn handle_agent_message(
        &mut self,
        rw: &RoadwarriorId,
        msg: AgentMessage,
        plane: &mut dyn ControlPlane,
    ) -> Result<AgentMessage, ControllerError> {
        if !self.roadwarriors.contains_key(rw) {
            return Err(ControllerError::UnknownRoadwarrior(rw.clone()));
        }
        match msg {
            AgentMessage::TunnelRequest { profile_id } => {
                let known = self
                    .profiles
                    .get(&profile_id)
                    .is_some_and(|p| p.roadwarrior() == Some(rw));
                if !known {
                    return Err(ControllerError::UnknownProfile(profile_id));
                }
                self.setup_tunnel(&profile_id, plane)?;
                Ok(AgentMessage::Ack)
            }
            AgentMessage::ExpireNotice { spi, level: _ } => {
                self.handle_expiry(spi, plane)?;
                Ok(AgentMessage::Ack)
            }
            other => {
                self.metrics
                    .warnings
                    .push(format!("unexpected agent message from {rw}: {other:?}"));
                Ok(AgentMessage::Ack)
            }
        }
    }
}

/// SAD-DEC key for an SA as seen by its receiving switch.
pub fn dec_key(sa: &SecurityAssociation) -> Vec<MatchValue> {
    vec![
        MatchValue::Exact(u64::from(u32::from(sa.tunnel_src))),
        MatchValue::Exact(u64::from(u32::from(sa.tunnel_dst))),
        MatchValue::Exact(u64::from(sa.spi)),
    ]
}

/// SAD-ENC key for one inner destination.
pub fn enc_key(inner_dst: Ipv4Addr) -> Vec<MatchValue> {
    vec![MatchValue::Exact(u64::from(u32::from(inner_dst)))]
}

/// SPD ternary key from a selector.
pub fn spd_key(selector: &TrafficSelector) -> Vec<MatchValue> {
    vec![
        MatchValue::Ternary {
            value: u64::from(u32::from(selector.src.addr())),
            mask: u64::from(selector.src.mask()),
        },
        MatchValue::Ternary {
            value: u64::from(u32::from(selector.dst.addr())),
            mask: u64::from(selector.dst.mask()),
        },
        match selector.protocol {
            Some(p) => MatchValue::Ternary {
                value: u64::from(p),
                mask: 0xFF,
            },
            None => MatchValue::Ternary { value: 0, mask: 0 },
        },
    ]
}
