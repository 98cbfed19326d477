//! The deterministic event fabric: switches, hosts and unidirectional FIFO
//! links driven by a virtual clock.
//!
//! Determinism comes from three things: the event queue is ordered by
//! (time, insertion sequence), all node state lives in ordered maps, and
//! the only randomness in the system is the controller's seeded generator.
//!
//! The fabric is also the [`ControlPlane`]: every controller operation
//! advances virtual time by [`CONTROL_OP_COST`] and delivers any data-plane
//! events that fall due first. That is what makes renewal loss-free here
//! for the same reason as on the testbed: by the time the controller's
//! third operation (the old decryption entry's delete) lands, packets that
//! were in flight under the old SPI have long since drained through the
//! FIFO links.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use std::net::Ipv4Addr;
use std::time::Instant;

use serde::Serialize;

use espnet_core::agent::{AgentMessage, HostIpsecState};
use espnet_core::controller::{ControlPlane, NextHop, PlaneError};
use espnet_core::crypto::CipherSuiteId;
use espnet_core::packet::{self, Ipv4Header};
use espnet_core::switch::{
    ControlRequest, ControlResponse, Notification, PacketOutcome, SwitchConfig, SwitchState,
    TableId,
};
use espnet_core::table::{MatchValue, TableAction, TableEntry};
use espnet_core::types::{MacAddr, PortId, RoadwarriorId, SaDirection, SpdPolicy, SwitchId};

use crate::scenario::{flow_payload, payload_tag, FlowMode, Scenario, TrafficFlow, TEST_PROTOCOL};

/// Minimum virtual time one control-plane operation takes. The fabric
/// raises it to the topology's largest link delay so control changes stay
/// slower than packet drain, as on a real testbed; that is what keeps the
/// renewal sequence loss-free for adjacent tunnel peers.
pub const MIN_CONTROL_OP_COST: u64 = 2;

/// One line of the event trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEvent {
    pub time: u64,
    pub seq: u64,
    pub node: String,
    #[serde(flatten)]
    pub kind: TraceKind,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceKind {
    Inject { flow: usize, pkt: u32 },
    Forward { port: PortId, size: usize, spi: Option<u32>, seq: Option<u32> },
    Drop { category: String, flow: Option<usize> },
    HostDeliver { flow: usize, pkt: u32, ok: bool },
    HostDrop { reason: String, flow: Option<usize> },
    ControlOp { op: String, table: Option<String> },
    AgentOp { op: String },
    Notification { spi: u32, direction: String },
    AgentNotice { spi: u32, level: String },
    Lifecycle { phase: String, detail: String },
}

/// Runtime accounting for one traffic flow.
#[derive(Debug)]
pub struct FlowState {
    pub def: TrafficFlow,
    pub src_ip: Ipv4Addr,
    /// Cipher suite of the tunnel carrying this flow, for protect flows
    /// covered by a profile.
    pub suite: Option<CipherSuiteId>,
    pub sent: u64,
    pub delivered: u64,
    pub payload_bad: u64,
    pub drops: BTreeMap<String, u64>,
    pub work_ns: u128,
    pub work_packets: u64,
}

#[derive(Debug)]
pub struct HostNode {
    pub id: String,
    pub ip: Ipv4Addr,
    pub mac: MacAddr,
    pub roadwarrior: bool,
    pub gateway_mac: MacAddr,
    pub uplink: usize,
    pub ipsec: HostIpsecState,
}

#[derive(Debug)]
struct Link {
    to: (String, PortId),
    delay: u64,
    enq: u64,
    deq: u64,
}

#[derive(Debug)]
enum Event {
    Deliver { link: usize, frame: Vec<u8> },
    Inject { flow: usize, pkt: u32 },
}

struct Queued {
    at: u64,
    seq: u64,
    ev: Event,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.at == other.at && self.seq == other.seq
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Queued {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

pub struct Fabric {
    pub clock: u64,
    seq: u64,
    queue: BinaryHeap<Reverse<Queued>>,
    pub switches: BTreeMap<SwitchId, SwitchState>,
    pub hosts: BTreeMap<String, HostNode>,
    links: Vec<Link>,
    out_link: BTreeMap<(String, PortId), usize>,
    pub flows: Vec<FlowState>,
    pub trace: Vec<TraceEvent>,
    pub pending_notifications: VecDeque<Notification>,
    pub pending_agent_msgs: VecDeque<(RoadwarriorId, AgentMessage)>,
    /// Switches currently unreachable from the controller (test hook).
    pub offline: BTreeSet<SwitchId>,
    pub ctrl_counts: BTreeMap<String, u64>,
    pub unattributed_drops: u64,
    /// Frames that ended up somewhere the topology says they never should:
    /// unlinked egress ports, wrong-host deliveries, untagged payloads.
    pub anomalies: u64,
    /// Outer (src, dst) endpoint pair -> flow, for attributing in-tunnel
    /// work and drops. `None` marks an ambiguous pair.
    esp_flow: BTreeMap<(Ipv4Addr, Ipv4Addr), Option<usize>>,
    pub measure_work: bool,
    /// Wall-clock nanoseconds per control op kind, when instrumentation is
    /// on.
    pub op_timings: Option<BTreeMap<&'static str, Vec<u64>>>,
    /// Every control request the controller issued, in order. Replaying it
    /// against freshly bootstrapped switches reproduces their tables.
    pub replay_log: Vec<(SwitchId, ControlRequest)>,
    /// Virtual ticks per control operation for this topology.
    pub control_op_cost: u64,
}

impl Fabric {
    fn next_seq(&mut self) -> u64 {
        self.seq += 1;
        self.seq
    }

    fn record(&mut self, node: &str, kind: TraceKind) {
        let ev = TraceEvent {
            time: self.clock,
            seq: self.next_seq(),
            node: node.to_string(),
            kind,
        };
        self.trace.push(ev);
    }

    /// Controller-level lifecycle marker in the trace.
    pub fn record_lifecycle(&mut self, phase: &str, detail: &str) {
        self.record("controller", TraceKind::Lifecycle {
            phase: phase.to_string(),
            detail: detail.to_string(),
        });
    }

    pub fn schedule_inject(&mut self, at: u64, flow: usize, pkt: u32) {
        let seq = self.next_seq();
        self.queue.push(Reverse(Queued {
            at,
            seq,
            ev: Event::Inject { flow, pkt },
        }));
    }

    fn send_on(&mut self, link: usize, frame: Vec<u8>) {
        self.links[link].enq += 1;
        let at = self.clock + self.links[link].delay;
        let seq = self.next_seq();
        self.queue.push(Reverse(Queued {
            at,
            seq,
            ev: Event::Deliver { link, frame },
        }));
    }

    /// Deliver every event due up to and including `target`, then move the
    /// clock there.
    pub fn advance(&mut self, target: u64) {
        while let Some(Reverse(q)) = self.queue.peek() {
            if q.at > target {
                break;
            }
            let Reverse(q) = self.queue.pop().expect("peeked");
            self.dispatch(q);
        }
        self.clock = self.clock.max(target);
    }

    /// Dispatch the next event, if any.
    pub fn step(&mut self) -> bool {
        match self.queue.pop() {
            Some(Reverse(q)) => {
                self.dispatch(q);
                true
            }
            None => false,
        }
    }

    pub fn idle(&self) -> bool {
        self.queue.is_empty()
            && self.pending_notifications.is_empty()
            && self.pending_agent_msgs.is_empty()
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    /// Number of unidirectional links.
    pub fn link_count(&self) -> usize {
        self.links.len()
    }

    pub fn link_conservation_ok(&self) -> bool {
        self.links.iter().all(|l| l.enq == l.deq)
    }

    fn dispatch(&mut self, q: Queued) {
        self.clock = q.at;
        match q.ev {
            Event::Inject { flow, pkt } => self.inject(flow, pkt),
            Event::Deliver { link, frame } => self.deliver(link, frame),
        }
    }

    fn inject(&mut self, flow: usize, pkt: u32) {
        let (host_id, dst, size) = {
            let f = &self.flows[flow];
            (f.def.src_host.clone(), f.def.dst, f.def.payload_size)
        };
        let src_ip = self.flows[flow].src_ip;
        self.flows[flow].sent += 1;
        self.record(&host_id, TraceKind::Inject { flow, pkt });

        let payload = flow_payload(flow as u32, pkt, size);
        let inner = packet::serialize_ipv4_packet(
            &Ipv4Header::simple(src_ip, dst, TEST_PROTOCOL, 64),
            &payload,
        )
        .expect("generated packet serializes");

        let host = self.hosts.get_mut(&host_id).expect("validated host");
        let protected = host.ipsec.has_selector_match(src_ip, dst, TEST_PROTOCOL);
        let ip_out = if protected {
            match host.ipsec.host_send(&inner) {
                Ok(outer) => outer,
                Err(e) => {
                    let reason = e.to_string();
                    *self
                        .flows[flow]
                        .drops
                        .entry("host-hard-limit".to_string())
                        .or_insert(0) += 1;
                    self.record(&host_id, TraceKind::HostDrop {
                        reason,
                        flow: Some(flow),
                    });
                    self.drain_host_notices(&host_id);
                    return;
                }
            }
        } else {
            inner
        };
        let gateway = host.gateway_mac;
        let mac = host.mac;
        let uplink = host.uplink;
        let mut frame = Vec::with_capacity(14 + ip_out.len());
        frame.extend_from_slice(&gateway.0);
        frame.extend_from_slice(&mac.0);
        frame.extend_from_slice(&0x0800u16.to_be_bytes());
        frame.extend_from_slice(&ip_out);
        self.send_on(uplink, frame);
        self.drain_host_notices(&host_id);
    }

    fn deliver(&mut self, link: usize, frame: Vec<u8>) {
        self.links[link].deq += 1;
        let (node, port) = self.links[link].to.clone();
        if self.switches.contains_key(&SwitchId::from(node.as_str())) {
            self.deliver_to_switch(&node, port, frame);
        } else {
            self.deliver_to_host(&node, frame);
        }
    }

    /// Best-effort mapping of a frame to the flow it belongs to: cleartext
    /// packets carry their tag, ESP packets are identified by their tunnel
    /// endpoints.
    fn peek_flow(&self, frame: &[u8]) -> Option<usize> {
        let p = packet::parse_packet(frame).ok()?;
        if p.esp.is_some() {
            return self.esp_flow.get(&(p.ipv4.src, p.ipv4.dst)).copied().flatten();
        }
        let (flow, _) = payload_tag(&p.body)?;
        let flow = flow as usize;
        (flow < self.flows.len()).then_some(flow)
    }

    fn deliver_to_switch(&mut self, node: &str, port: PortId, frame: Vec<u8>) {
        let flow_hint = self.peek_flow(&frame);
        let sid = SwitchId::from(node);
        let t0 = self.measure_work.then(Instant::now);
        let outcome = {
            let switch = self.switches.get_mut(&sid).expect("linked switch exists");
            switch.process_packet(port, &frame)
        };
        if let (Some(t0), Some(flow)) = (t0, flow_hint) {
            self.flows[flow].work_ns += t0.elapsed().as_nanos();
            self.flows[flow].work_packets += 1;
        }
        match outcome {
            PacketOutcome::Forwarded { port, frame } => {
                let esp = packet::parse_packet(&frame).ok().and_then(|p| p.esp);
                self.record(node, TraceKind::Forward {
                    port,
                    size: frame.len(),
                    spi: esp.map(|e| e.spi),
                    seq: esp.map(|e| e.seq),
                });
                match self.out_link.get(&(node.to_string(), port)).copied() {
                    Some(l) => self.send_on(l, frame),
                    None => {
                        self.anomalies += 1;
                        self.record(node, TraceKind::Drop {
                            category: "no-link".to_string(),
                            flow: flow_hint,
                        });
                    }
                }
            }
            PacketOutcome::Dropped(cat) => {
                match flow_hint {
                    Some(flow) => {
                        *self
                            .flows[flow]
                            .drops
                            .entry(cat.name().to_string())
                            .or_insert(0) += 1;
                    }
                    None => self.unattributed_drops += 1,
                }
                self.record(node, TraceKind::Drop {
                    category: cat.name().to_string(),
                    flow: flow_hint,
                });
            }
        }
        let notes = {
            let switch = self.switches.get_mut(&sid).expect("linked switch exists");
            switch.poll_notifications()
        };
        for n in notes {
            self.record(node, TraceKind::Notification {
                spi: n.spi,
                direction: match n.direction {
                    SaDirection::Enc => "enc".to_string(),
                    SaDirection::Dec => "dec".to_string(),
                },
            });
            self.pending_notifications.push_back(n);
        }
    }

    fn deliver_to_host(&mut self, node: &str, frame: Vec<u8>) {
        let Some(host) = self.hosts.get_mut(node) else {
            self.anomalies += 1;
            return;
        };
        let host_mac = host.mac;
        let host_ip = host.ip;
        let parsed = match packet::parse_packet(&frame) {
            Ok(p) => p,
            Err(_) => {
                self.anomalies += 1;
                return;
            }
        };
        if parsed.eth.dst_mac != host_mac || parsed.ipv4.dst != host_ip {
            self.anomalies += 1;
            return;
        }
        if parsed.esp.is_some() {
            let result = {
                let host = self.hosts.get_mut(node).expect("checked");
                host.ipsec.host_receive(&frame[14..])
            };
            match result {
                Ok(inner) => match packet::parse_ipv4_packet(&inner) {
                    Ok((header, body)) => {
                        let body = body.to_vec();
                        self.record_host_delivery(node, header.dst, &body);
                    }
                    Err(_) => self.anomalies += 1,
                },
                Err(e) => {
                    let flow = self
                        .esp_flow
                        .get(&(parsed.ipv4.src, parsed.ipv4.dst))
                        .copied()
                        .flatten();
                    match flow {
                        Some(f) => {
                            *self
                                .flows[f]
                                .drops
                                .entry(format!("host-{}", drop_reason(&e)))
                                .or_insert(0) += 1;
                        }
                        None => self.unattributed_drops += 1,
                    }
                    self.record(node, TraceKind::HostDrop {
                        reason: e.to_string(),
                        flow,
                    });
                }
            }
            self.drain_host_notices(node);
        } else {
            let dst = parsed.ipv4.dst;
            let body = parsed.body;
            self.record_host_delivery(node, dst, &body);
        }
    }

    fn record_host_delivery(&mut self, node: &str, dst: Ipv4Addr, payload: &[u8]) {
        let Some((flow, pkt)) = payload_tag(payload) else {
            self.anomalies += 1;
            return;
        };
        let flow = flow as usize;
        if flow >= self.flows.len() {
            self.anomalies += 1;
            return;
        }
        let expected = flow_payload(flow as u32, pkt, self.flows[flow].def.payload_size);
        let ok = payload == expected && dst == self.flows[flow].def.dst;
        self.flows[flow].delivered += 1;
        if !ok {
            self.flows[flow].payload_bad += 1;
        }
        self.record(node, TraceKind::HostDeliver { flow, pkt, ok });
    }

    fn drain_host_notices(&mut self, node: &str) {
        let Some(host) = self.hosts.get_mut(node) else {
            return;
        };
        if !host.roadwarrior {
            return;
        }
        let id = RoadwarriorId::from(node);
        let notices = host.ipsec.poll_notices();
        for msg in notices {
            if let AgentMessage::ExpireNotice { spi, level } = &msg {
                self.record(node, TraceKind::AgentNotice {
                    spi: *spi,
                    level: format!("{level:?}").to_lowercase(),
                });
            }
            self.pending_agent_msgs.push_back((id.clone(), msg));
        }
    }
}

impl ControlPlane for Fabric {
    fn control(
        &mut self,
        switch: &SwitchId,
        req: ControlRequest,
    ) -> Result<ControlResponse, PlaneError> {
        let target = self.clock + self.control_op_cost;
        self.advance(target);
        if self.offline.contains(switch) {
            return Err(PlaneError::PeerUnreachable);
        }
        let kind = req.kind();
        let table = req.table();
        self.replay_log.push((switch.clone(), req.clone()));
        let t0 = Instant::now();
        let resp = {
            let s = self
                .switches
                .get_mut(switch)
                .ok_or(PlaneError::PeerUnreachable)?;
            s.apply_control(req).map_err(PlaneError::Rejected)?
        };
        if let Some(t) = &mut self.op_timings {
            t.entry(kind).or_default().push(t0.elapsed().as_nanos() as u64);
        }
        *self.ctrl_counts.entry(kind.to_string()).or_insert(0) += 1;
        self.record(switch.as_str(), TraceKind::ControlOp {
            op: kind.to_string(),
            table: table.map(|t| t.name().to_string()),
        });
        Ok(resp)
    }

    fn agent_send(
        &mut self,
        rw: &RoadwarriorId,
        msg: AgentMessage,
    ) -> Result<AgentMessage, PlaneError> {
        let target = self.clock + self.control_op_cost;
        self.advance(target);
        let kind = match &msg {
            AgentMessage::ConfigApply { .. } => "agent_config_apply",
            AgentMessage::Teardown { .. } => "agent_teardown",
            AgentMessage::TunnelOffer { .. } => "agent_offer",
            _ => "agent_other",
        };
        let reply = {
            let host = self
                .hosts
                .get_mut(rw.as_str())
                .filter(|h| h.roadwarrior)
                .ok_or(PlaneError::PeerUnreachable)?;
            host.ipsec
                .handle_message(msg)
                .map_err(PlaneError::AgentRejected)?
        };
        *self.ctrl_counts.entry(kind.to_string()).or_insert(0) += 1;
        self.record(rw.as_str(), TraceKind::AgentOp {
            op: kind.to_string(),
        });
        Ok(reply)
    }
}

fn drop_reason(e: &espnet_core::agent::AgentError) -> &'static str {
    use espnet_core::agent::AgentError::*;
    match e {
        IcvMismatch => "icv-fail",
        UnknownSpi(_) => "no-sa",
        HardLimitExceeded => "hard-limit",
        _ => "error",
    }
}

/// MAC of `node`'s port `port` per the scenario topology.
fn port_mac(scenario: &Scenario, node: &str, port: PortId) -> MacAddr {
    if let Some(s) = scenario.switch(node) {
        s.ports[&port]
    } else {
        scenario.host(node).expect("validated node").mac
    }
}

/// Next-hop table of one switch, covering every host address and switch
/// endpoint reachable in the topology: BFS over the link graph with
/// deterministic tie-breaking (ports in ascending order). Hosts are
/// leaves, paths never run through them.
pub fn next_hops_of(scenario: &Scenario, switch_id: &str) -> BTreeMap<Ipv4Addr, NextHop> {
    let mut graph: BTreeMap<&str, Vec<(PortId, &str, PortId)>> = BTreeMap::new();
    for l in &scenario.topology.links {
        graph
            .entry(l.a.0.as_str())
            .or_default()
            .push((l.a.1, l.b.0.as_str(), l.b.1));
        graph
            .entry(l.b.0.as_str())
            .or_default()
            .push((l.b.1, l.a.0.as_str(), l.a.1));
    }
    for edges in graph.values_mut() {
        edges.sort();
    }

    let mut first_hop: BTreeMap<&str, NextHop> = BTreeMap::new();
    let mut visited: BTreeSet<&str> = BTreeSet::new();
    visited.insert(switch_id);
    let mut queue: VecDeque<(&str, Option<NextHop>)> = VecDeque::new();
    queue.push_back((switch_id, None));
    while let Some((node, hop)) = queue.pop_front() {
        for (port, peer, peer_port) in graph.get(node).into_iter().flatten() {
            if !visited.insert(peer) {
                continue;
            }
            let h = hop.unwrap_or(NextHop {
                port: *port,
                mac: port_mac(scenario, peer, *peer_port),
            });
            first_hop.insert(peer, h);
            if scenario.switch(peer).is_some() {
                queue.push_back((peer, Some(h)));
            }
        }
    }

    let mut table = BTreeMap::new();
    for (node, hop) in first_hop {
        if let Some(h) = scenario.host(node) {
            table.insert(h.ip, hop);
        } else if let Some(s) = scenario.switch(node) {
            table.insert(s.endpoint_ip, hop);
        }
    }
    table
}

/// Instantiate switches, hosts and links from a validated scenario, with
/// bootstrap state installed: connected routes on every switch and BYPASS
/// SPD entries for the scenario's bypass flows (testbed configuration, not
/// controller traffic).
pub fn build_fabric(scenario: &Scenario, measure_work: bool, collect_op_timings: bool) -> Fabric {
    let mut switches = BTreeMap::new();
    for s in &scenario.topology.switches {
        switches.insert(
            SwitchId::from(s.id.as_str()),
            SwitchState::new(SwitchConfig {
                switch_id: SwitchId::from(s.id.as_str()),
                ports: s.ports.clone(),
                register_count: s.registers,
            }),
        );
    }

    // Two directed links per declared attachment.
    let mut links = Vec::new();
    let mut out_link = BTreeMap::new();
    for l in &scenario.topology.links {
        for (from, to) in [(&l.a, &l.b), (&l.b, &l.a)] {
            let idx = links.len();
            links.push(Link {
                to: to.clone(),
                delay: l.delay,
                enq: 0,
                deq: 0,
            });
            out_link.insert((from.0.clone(), from.1), idx);
        }
    }

    let mut hosts = BTreeMap::new();
    for h in &scenario.topology.hosts {
        let uplink = out_link[&(h.id.clone(), 0)];
        let gateway = links[uplink].to.clone();
        hosts.insert(
            h.id.clone(),
            HostNode {
                id: h.id.clone(),
                ip: h.ip,
                mac: h.mac,
                roadwarrior: h.roadwarrior,
                gateway_mac: port_mac(scenario, &gateway.0, gateway.1),
                uplink,
                ipsec: HostIpsecState::new(),
            },
        );
    }

    // Bootstrap: static routes for every reachable host and endpoint
    // (testbed configuration, the analog of the topology's static ARP and
    // route setup).
    for s in &scenario.topology.switches {
        let adj = next_hops_of(scenario, &s.id);
        let switch = switches.get_mut(&SwitchId::from(s.id.as_str())).unwrap();
        for (ip, hop) in adj {
            switch
                .apply_control(ControlRequest::TableInsert {
                    table: TableId::LpmFwd,
                    entry: TableEntry {
                        key: vec![MatchValue::Lpm {
                            value: u64::from(u32::from(ip)),
                            prefix_len: 32,
                        }],
                        priority: 0,
                        action: TableAction::Forward {
                            next_hop_mac: hop.mac,
                            port: hop.port,
                        },
                    },
                })
                .expect("bootstrap route insert");
        }
    }

    // Bootstrap: BYPASS policy for declared bypass flows, on every switch.
    let mut bypass_keys = BTreeSet::new();
    for f in scenario.traffic.iter().filter(|f| f.mode == FlowMode::Bypass) {
        let src = scenario.host(&f.src_host).expect("validated").ip;
        if !bypass_keys.insert((src, f.dst)) {
            continue;
        }
        let priority = bypass_keys.len() as u32; // bootstrap range, below controller's 100+
        for switch in switches.values_mut() {
            switch
                .apply_control(ControlRequest::TableInsert {
                    table: TableId::Spd,
                    entry: TableEntry {
                        key: vec![
                            MatchValue::Ternary {
                                value: u64::from(u32::from(src)),
                                mask: u64::from(u32::MAX),
                            },
                            MatchValue::Ternary {
                                value: u64::from(u32::from(f.dst)),
                                mask: u64::from(u32::MAX),
                            },
                            MatchValue::Ternary { value: 0, mask: 0 },
                        ],
                        priority,
                        action: TableAction::SpdMark {
                            policy: SpdPolicy::Bypass,
                        },
                    },
                })
                .expect("bootstrap bypass insert");
        }
    }

    // Flow accounting and the ESP endpoint-pair attribution map.
    let mut flows = Vec::new();
    let mut esp_flow: BTreeMap<(Ipv4Addr, Ipv4Addr), Option<usize>> = BTreeMap::new();
    for (fi, f) in scenario.traffic.iter().enumerate() {
        let src_ip = scenario.host(&f.src_host).expect("validated").ip;
        let mut suite = None;
        if f.mode == FlowMode::Protect {
            for p in &scenario.profiles {
                let sel = &p.traffic_selector;
                let left_ep = match &p.left_peer {
                    espnet_core::controller::LeftPeer::Switch(sp) => sp.endpoint_ip,
                    espnet_core::controller::LeftPeer::Roadwarrior { roadwarrior_id } => {
                        match scenario.host(roadwarrior_id.as_str()) {
                            Some(h) => h.ip,
                            None => continue,
                        }
                    }
                };
                let right_ep = p.right_peer.endpoint_ip;
                let pair = if sel.matches(src_ip, f.dst, TEST_PROTOCOL) {
                    Some((left_ep, right_ep))
                } else if sel.reversed().matches(src_ip, f.dst, TEST_PROTOCOL) {
                    Some((right_ep, left_ep))
                } else {
                    None
                };
                if let Some(pair) = pair {
                    suite = Some(p.sa_params.suite);
                    esp_flow
                        .entry(pair)
                        .and_modify(|e| {
                            if *e != Some(fi) {
                                *e = None; // ambiguous
                            }
                        })
                        .or_insert(Some(fi));
                }
            }
        }
        flows.push(FlowState {
            def: f.clone(),
            src_ip,
            suite,
            sent: 0,
            delivered: 0,
            payload_bad: 0,
            drops: BTreeMap::new(),
            work_ns: 0,
            work_packets: 0,
        });
    }

    Fabric {
        clock: 0,
        seq: 0,
        queue: BinaryHeap::new(),
        switches,
        hosts,
        links,
        out_link,
        flows,
        trace: Vec::new(),
        pending_notifications: VecDeque::new(),
        pending_agent_msgs: VecDeque::new(),
        offline: BTreeSet::new(),
        ctrl_counts: BTreeMap::new(),
        unattributed_drops: 0,
        anomalies: 0,
        esp_flow,
        measure_work,
        op_timings: collect_op_timings.then(BTreeMap::new),
        replay_log: Vec::new(),
        control_op_cost: MIN_CONTROL_OP_COST.max(
            scenario
                .topology
                .links
                .iter()
                .map(|l| l.delay)
                .max()
                .unwrap_or(0),
        ),
    }
}
