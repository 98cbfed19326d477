//! Scenario files: declarative topology, tunnel profiles, traffic and
//! agent scripts, loaded from JSON.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::net::Ipv4Addr;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use espnet_core::controller::{LeftPeer, TunnelMode, TunnelProfile};
use espnet_core::types::{MacAddr, PortId, ProfileId};

/// IP protocol number carried by generated test traffic (RFC 3692
/// experimental range).
pub const TEST_PROTOCOL: u8 = 253;

/// Payloads start with an 8-byte flow/sequence tag.
pub const PAYLOAD_TAG_LEN: usize = 8;

pub const MAX_PAYLOAD: usize = 1400;

#[derive(Error, Debug, Clone, PartialEq, Eq)]
#[error("{path}: {message}")]
pub struct ValidationError {
    /// JSON-ish path to the offending field.
    pub path: String,
    pub message: String,
}

fn err(path: impl Into<String>, message: impl Into<String>) -> ValidationError {
    ValidationError {
        path: path.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_runs")]
    pub runs: u32,
    pub topology: Topology,
    #[serde(default)]
    pub profiles: Vec<TunnelProfile>,
    #[serde(default)]
    pub traffic: Vec<TrafficFlow>,
    /// Roadwarrior id -> profiles it requests at start, in order.
    #[serde(default)]
    pub agent_script: BTreeMap<String, Vec<ProfileId>>,
    /// Opt into wall-clock work measurement; the goodput section of the
    /// report is not deterministic, so it is off by default.
    #[serde(default)]
    pub measure_goodput: bool,
}

fn default_runs() -> u32 {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    pub switches: Vec<SwitchDef>,
    pub hosts: Vec<HostDef>,
    /// Bidirectional attachments; each becomes two unidirectional FIFO
    /// links.
    pub links: Vec<LinkDef>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwitchDef {
    pub id: String,
    /// Tunnel endpoint address of this switch.
    pub endpoint_ip: Ipv4Addr,
    pub ports: BTreeMap<PortId, MacAddr>,
    #[serde(default = "default_registers")]
    pub registers: usize,
}

fn default_registers() -> usize {
    espnet_core::switch::DEFAULT_REGISTER_COUNT
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HostDef {
    pub id: String,
    pub ip: Ipv4Addr,
    pub mac: MacAddr,
    /// Roadwarrior hosts run the agent and a host ESP stack.
    #[serde(default)]
    pub roadwarrior: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkDef {
    pub a: (String, PortId),
    pub b: (String, PortId),
    #[serde(default = "default_delay")]
    pub delay: u64,
}

fn default_delay() -> u64 {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowMode {
    Bypass,
    Protect,
}

impl FlowMode {
    pub fn name(self) -> &'static str {
        match self {
            FlowMode::Bypass => "bypass",
            FlowMode::Protect => "protect",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficFlow {
    pub src_host: String,
    pub dst: Ipv4Addr,
    pub count: u32,
    pub payload_size: usize,
    pub mode: FlowMode,
    /// Virtual-time offset added after setup completes.
    #[serde(default)]
    pub start_offset: u64,
    #[serde(default = "default_gap")]
    pub gap: u64,
}

fn default_gap() -> u64 {
    1
}

impl Scenario {
    pub fn from_json(s: &str) -> Result<Scenario, ValidationError> {
        let scenario: Scenario =
            serde_json::from_str(s).map_err(|e| err("$", e.to_string()))?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: &Path) -> Result<Scenario, ValidationError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| err(path.display().to_string(), e.to_string()))?;
        Scenario::from_json(&text)
    }

    pub fn switch(&self, id: &str) -> Option<&SwitchDef> {
        self.topology.switches.iter().find(|s| s.id == id)
    }

    pub fn host(&self, id: &str) -> Option<&HostDef> {
        self.topology.hosts.iter().find(|h| h.id == id)
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        let t = &self.topology;
        let mut node_ids = BTreeSet::new();
        let mut addrs = BTreeSet::new();
        for (i, s) in t.switches.iter().enumerate() {
            if !node_ids.insert(s.id.clone()) {
                return Err(err(format!("topology.switches[{i}].id"), "duplicate id"));
            }
            if s.ports.is_empty() {
                return Err(err(format!("topology.switches[{i}].ports"), "no ports"));
            }
            if s.registers == 0 {
                return Err(err(
                    format!("topology.switches[{i}].registers"),
                    "must be positive",
                ));
            }
            if !addrs.insert(s.endpoint_ip) {
                return Err(err(
                    format!("topology.switches[{i}].endpoint_ip"),
                    "address already in use",
                ));
            }
        }
        for (i, h) in t.hosts.iter().enumerate() {
            if !node_ids.insert(h.id.clone()) {
                return Err(err(format!("topology.hosts[{i}].id"), "duplicate id"));
            }
            if !addrs.insert(h.ip) {
                return Err(err(
                    format!("topology.hosts[{i}].ip"),
                    "address already in use",
                ));
            }
        }

        let mut used_ports = BTreeSet::new();
        let mut host_links: BTreeMap<&str, u32> = BTreeMap::new();
        for (i, l) in t.links.iter().enumerate() {
            if l.a.0 == l.b.0 {
                return Err(err(format!("topology.links[{i}]"), "link to itself"));
            }
            if l.delay == 0 {
                return Err(err(
                    format!("topology.links[{i}].delay"),
                    "delay must be at least 1",
                ));
            }
            for (end, (node, port)) in [("a", &l.a), ("b", &l.b)] {
                let path = format!("topology.links[{i}].{end}");
                if let Some(s) = self.switch(node) {
                    if !s.ports.contains_key(port) {
                        return Err(err(path, format!("switch {node} has no port {port}")));
                    }
                } else if self.host(node).is_some() {
                    if *port != 0 {
                        return Err(err(path, "host ports are always 0"));
                    }
                    *host_links.entry(&l.a.0).or_insert(0) += 0; // placeholder, counted below
                } else {
                    return Err(err(path, format!("unknown node {node}")));
                }
                if !used_ports.insert((node.clone(), *port)) {
                    return Err(err(
                        format!("topology.links[{i}].{end}"),
                        format!("port {port} of {node} already linked"),
                    ));
                }
            }
        }
        for h in &t.hosts {
            let n = t
                .links
                .iter()
                .filter(|l| l.a.0 == h.id || l.b.0 == h.id)
                .count();
            if n != 1 {
                return Err(err(
                    format!("topology.hosts[{}]", h.id),
                    format!("host must have exactly one link, has {n}"),
                ));
            }
        }

        let mut profile_ids = BTreeSet::new();
        for (i, p) in self.profiles.iter().enumerate() {
            let path = format!("profiles[{i}]");
            if !profile_ids.insert(p.profile_id.clone()) {
                return Err(err(format!("{path}.profile_id"), "duplicate id"));
            }
            let right = self
                .switch(p.right_peer.switch_id.as_str())
                .ok_or_else(|| err(format!("{path}.right_peer.switch_id"), "unknown switch"))?;
            if right.endpoint_ip != p.right_peer.endpoint_ip {
                return Err(err(
                    format!("{path}.right_peer.endpoint_ip"),
                    "does not match the switch's endpoint_ip in the topology",
                ));
            }
            match (&p.mode, &p.left_peer) {
                (TunnelMode::SiteToSite, LeftPeer::Switch(sp)) => {
                    let left = self.switch(sp.switch_id.as_str()).ok_or_else(|| {
                        err(format!("{path}.left_peer.switch_id"), "unknown switch")
                    })?;
                    if left.endpoint_ip != sp.endpoint_ip {
                        return Err(err(
                            format!("{path}.left_peer.endpoint_ip"),
                            "does not match the switch's endpoint_ip in the topology",
                        ));
                    }
                }
                (TunnelMode::HostToSite, LeftPeer::Roadwarrior { roadwarrior_id }) => {
                    let host = self.host(roadwarrior_id.as_str()).ok_or_else(|| {
                        err(format!("{path}.left_peer.roadwarrior_id"), "unknown host")
                    })?;
                    if !host.roadwarrior {
                        return Err(err(
                            format!("{path}.left_peer.roadwarrior_id"),
                            "host is not marked as roadwarrior",
                        ));
                    }
                }
                _ => {
                    return Err(err(
                        format!("{path}.mode"),
                        "mode does not match left peer kind",
                    ))
                }
            }
            if p.sa_params.soft_limit >= p.sa_params.hard_limit {
                return Err(err(
                    format!("{path}.sa_params"),
                    "soft_limit must be below hard_limit",
                ));
            }
        }

        for (i, f) in self.traffic.iter().enumerate() {
            let path = format!("traffic[{i}]");
            let Some(src) = self.host(&f.src_host) else {
                return Err(err(
                    format!("{path}.src_host"),
                    format!("unknown host {}", f.src_host),
                ));
            };
            if f.count == 0 {
                return Err(err(format!("{path}.count"), "must be positive"));
            }
            if f.payload_size < PAYLOAD_TAG_LEN || f.payload_size > MAX_PAYLOAD {
                return Err(err(
                    format!("{path}.payload_size"),
                    format!("must be within {PAYLOAD_TAG_LEN}..={MAX_PAYLOAD}"),
                ));
            }
            if f.gap == 0 {
                return Err(err(format!("{path}.gap"), "must be at least 1"));
            }
            // Declaring the same traffic bypass and PROTECT is a policy
            // contradiction: the bootstrap BYPASS rule and the tunnel's
            // SPD entry would fight over one key.
            if f.mode == FlowMode::Bypass {
                if let Some(p) = self.profiles.iter().find(|p| {
                    p.traffic_selector.matches(src.ip, f.dst, TEST_PROTOCOL)
                        || p.traffic_selector.reversed().matches(src.ip, f.dst, TEST_PROTOCOL)
                }) {
                    return Err(err(
                        format!("{path}.mode"),
                        format!(
                            "bypass flow is covered by PROTECT profile {}",
                            p.profile_id
                        ),
                    ));
                }
            }
        }

        for (rw, requests) in &self.agent_script {
            let path = format!("agent_script.{rw}");
            let host = self
                .host(rw)
                .ok_or_else(|| err(path.clone(), "unknown host"))?;
            if !host.roadwarrior {
                return Err(err(path.clone(), "host is not a roadwarrior"));
            }
            for pid in requests {
                let found = self.profiles.iter().any(|p| {
                    p.profile_id == *pid
                        && matches!(
                            &p.left_peer,
                            LeftPeer::Roadwarrior { roadwarrior_id } if roadwarrior_id.as_str() == rw
                        )
                });
                if !found {
                    return Err(err(
                        format!("{path}[{pid}]"),
                        "profile does not exist or is not assigned to this roadwarrior",
                    ));
                }
            }
        }

        if self.runs == 0 {
            return Err(err("runs", "must be at least 1"));
        }
        Ok(())
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} ({} switches, {} hosts, {} flows)",
            self.name,
            self.topology.switches.len(),
            self.topology.hosts.len(),
            self.traffic.len()
        )
    }
}

/// Deterministic payload for packet `pkt` of flow `flow`: an 8-byte tag
/// (flow id, sequence) followed by filler derived from both.
pub fn flow_payload(flow: u32, pkt: u32, size: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(size);
    out.extend_from_slice(&flow.to_be_bytes());
    out.extend_from_slice(&pkt.to_be_bytes());
    for i in 0..size.saturating_sub(PAYLOAD_TAG_LEN) {
        out.push((flow as u8 ^ pkt as u8).wrapping_add(i as u8));
    }
    out
}

/// Extract the (flow, pkt) tag from a payload, if it is long enough.
pub fn payload_tag(payload: &[u8]) -> Option<(u32, u32)> {
    if payload.len() < PAYLOAD_TAG_LEN {
        return None;
    }
    let flow = u32::from_be_bytes(payload[..4].try_into().unwrap());
    let pkt = u32::from_be_bytes(payload[4..8].try_into().unwrap());
    Some((flow, pkt))
}
