//! Controller lifecycle sequences exercised against real switch state and
//! a real host agent over a recording control plane.

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;

use espnet_core::agent::{AgentMessage, ExpireLevel, HostIpsecState};
use espnet_core::controller::{
    ControlPlane, Controller, ControllerError, LeftPeer, NextHop, PlaneError, SaParams,
    SwitchInfo, SwitchPeer, TrafficSelector, TunnelMode, TunnelProfile, TunnelStatus,
};
use espnet_core::crypto::{CipherSuiteId, SaKeyMaterial};
use espnet_core::switch::{
    ControlRequest, ControlResponse, Notification, NotificationKind, PacketOutcome, SwitchConfig,
    SwitchState, TableId,
};
use espnet_core::types::{MacAddr, ProfileId, RoadwarriorId, SaDirection, SwitchId};

const H1: Ipv4Addr = Ipv4Addr::new(10, 0, 1, 10);
const H2: Ipv4Addr = Ipv4Addr::new(10, 0, 2, 10);
const EP1: Ipv4Addr = Ipv4Addr::new(192, 0, 2, 1);
const EP2: Ipv4Addr = Ipv4Addr::new(192, 0, 2, 2);
const RW_IP: Ipv4Addr = Ipv4Addr::new(198, 51, 100, 7);

#[derive(Debug, Clone, PartialEq, Eq)]
struct LogEntry {
    peer: String,
    kind: &'static str,
    table: Option<TableId>,
}

#[derive(Default)]
struct TestPlane {
    switches: BTreeMap<SwitchId, SwitchState>,
    agents: BTreeMap<RoadwarriorId, HostIpsecState>,
    offline: BTreeSet<SwitchId>,
    log: Vec<LogEntry>,
}

impl TestPlane {
    fn add_switch(&mut self, id: &str) {
        let mut ports = BTreeMap::new();
        ports.insert(1, mac(id, 1));
        ports.insert(2, mac(id, 2));
        self.switches.insert(
            SwitchId::from(id),
            SwitchState::new(SwitchConfig {
                switch_id: SwitchId::from(id),
                ports,
                register_count: 32,
            }),
        );
    }

    fn switch(&self, id: &str) -> &SwitchState {
        &self.switches[&SwitchId::from(id)]
    }

    fn table_ops(&self) -> Vec<&LogEntry> {
        self.log
            .iter()
            .filter(|e| e.kind.starts_with("table_"))
            .collect()
    }

    fn census(&self, id: &str) -> usize {
        TableId::ALL
            .into_iter()
            .map(|t| self.switch(id).table(t).len())
            .sum()
    }
}

impl ControlPlane for TestPlane {
    fn control(
        &mut self,
        switch: &SwitchId,
        req: ControlRequest,
    ) -> Result<ControlResponse, PlaneError> {
        if self.offline.contains(switch) {
            return Err(PlaneError::PeerUnreachable);
        }
        let s = self
            .switches
            .get_mut(switch)
            .ok_or(PlaneError::PeerUnreachable)?;
        let kind = req.kind();
        let table = req.table();
        let resp = s.apply_control(req).map_err(PlaneError::Rejected)?;
        self.log.push(LogEntry {
            peer: switch.to_string(),
            kind,
            table,
        });
        Ok(resp)
    }

    fn agent_send(
        &mut self,
        rw: &RoadwarriorId,
        msg: AgentMessage,
    ) -> Result<AgentMessage, PlaneError> {
        let a = self.agents.get_mut(rw).ok_or(PlaneError::PeerUnreachable)?;
        let kind = match &msg {
            AgentMessage::ConfigApply { .. } => "agent_config_apply",
            AgentMessage::Teardown { .. } => "agent_teardown",
            _ => "agent_other",
        };
        let reply = a.handle_message(msg).map_err(PlaneError::AgentRejected)?;
        self.log.push(LogEntry {
            peer: rw.to_string(),
            kind,
            table: None,
        });
        Ok(reply)
    }
}

fn mac(node: &str, port: u32) -> MacAddr {
    let tail = node.as_bytes().last().copied().unwrap_or(0);
    MacAddr([0x02, 0, 0, 0, tail, port as u8])
}

fn site_to_site_plane() -> TestPlane {
    let mut p = TestPlane::default();
    p.add_switch("s1");
    p.add_switch("s2");
    p
}

fn register_both(ctrl: &mut Controller) {
    let mut adj1 = BTreeMap::new();
    adj1.insert(EP2, NextHop { port: 2, mac: mac("s2", 2) });
    adj1.insert(H1, NextHop { port: 1, mac: mac("h1", 0) });
    ctrl.register_switch(SwitchInfo {
        switch_id: SwitchId::from("s1"),
        register_capacity: 32,
        adjacency: adj1,
    });
    let mut adj2 = BTreeMap::new();
    adj2.insert(EP1, NextHop { port: 2, mac: mac("s1", 2) });
    adj2.insert(H2, NextHop { port: 1, mac: mac("h2", 0) });
    adj2.insert(RW_IP, NextHop { port: 2, mac: mac("rw", 0) });
    ctrl.register_switch(SwitchInfo {
        switch_id: SwitchId::from("s2"),
        register_capacity: 32,
        adjacency: adj2,
    });
}

fn site_profile(suite: CipherSuiteId) -> TunnelProfile {
    TunnelProfile {
        profile_id: ProfileId::from("t1"),
        mode: TunnelMode::SiteToSite,
        traffic_selector: TrafficSelector {
            src: "10.0.1.10/32".parse().unwrap(),
            dst: "10.0.2.10/32".parse().unwrap(),
            protocol: None,
        },
        left_peer: LeftPeer::Switch(SwitchPeer {
            switch_id: SwitchId::from("s1"),
            endpoint_ip: EP1,
            network_resource: "10.0.1.0/24".parse().unwrap(),
        }),
        right_peer: SwitchPeer {
            switch_id: SwitchId::from("s2"),
            endpoint_ip: EP2,
            network_resource: "10.0.2.0/24".parse().unwrap(),
        },
        sa_params: SaParams {
            suite,
            soft_limit: 500,
            hard_limit: 510,
        },
    }
}

fn rw_profile() -> TunnelProfile {
    TunnelProfile {
        profile_id: ProfileId::from("rw-t1"),
        mode: TunnelMode::HostToSite,
        traffic_selector: TrafficSelector {
            src: "198.51.100.7/32".parse().unwrap(),
            dst: "10.0.2.10/32".parse().unwrap(),
            protocol: None,
        },
        left_peer: LeftPeer::Roadwarrior {
            roadwarrior_id: RoadwarriorId::from("rw1"),
        },
        right_peer: SwitchPeer {
            switch_id: SwitchId::from("s2"),
            endpoint_ip: EP2,
            network_resource: "10.0.2.0/24".parse().unwrap(),
        },
        sa_params: SaParams {
            suite: CipherSuiteId::AesCtrHmacMd5,
            soft_limit: 500,
            hard_limit: 510,
        },
    }
}

fn setup_site_tunnel(seed: u64) -> (Controller, TestPlane) {
    let mut plane = site_to_site_plane();
    let mut ctrl = Controller::new(seed);
    register_both(&mut ctrl);
    ctrl.add_profile(site_profile(CipherSuiteId::AesCtrHmacMd5))
        .unwrap();
    ctrl.setup_tunnel(&ProfileId::from("t1"), &mut plane).unwrap();
    (ctrl, plane)
}

#[test]
fn sa_pair_generation_properties() {
    let mut ctrl = Controller::new(7);
    register_both(&mut ctrl);

    // NULL profiles carry no key material.
    let null_profile = site_profile(CipherSuiteId::Null);
    let (sa_i, sa_j) = ctrl.generate_sa_pair(&null_profile).unwrap();
    assert_eq!(sa_i.keys, SaKeyMaterial::Empty);
    assert_eq!(sa_j.keys, SaKeyMaterial::Empty);
    assert_eq!(sa_i.tunnel_src, EP1);
    assert_eq!(sa_i.tunnel_dst, EP2);
    assert_eq!(sa_j.tunnel_src, EP2);
    assert_eq!(sa_j.tunnel_dst, EP1);

    // SPIs unique across 10^4 pairs, all above the reserved range.
    let mut seen = BTreeSet::new();
    let profile = site_profile(CipherSuiteId::AesCtrHmacMd5);
    for _ in 0..5_000 {
        let (a, b) = ctrl.generate_sa_pair(&profile).unwrap();
        assert!(a.spi >= 256 && b.spi >= 256);
        assert!(seen.insert(a.spi));
        assert!(seen.insert(b.spi));
    }

    // Same seed, same profile, same pair.
    let mut c1 = Controller::new(42);
    register_both(&mut c1);
    let mut c2 = Controller::new(42);
    register_both(&mut c2);
    let (x1, y1) = c1.generate_sa_pair(&profile).unwrap();
    let (x2, y2) = c2.generate_sa_pair(&profile).unwrap();
    assert_eq!((x1, y1), (x2, y2));
}

#[test]
fn setup_order_and_message_counts() {
    let (ctrl, plane) = setup_site_tunnel(1);

    assert_eq!(
        ctrl.tunnel(&ProfileId::from("t1")).unwrap().status,
        TunnelStatus::Established
    );

    // Exactly 6 SA/SPD table inserts plus 2 route inserts and 4 register
    // resets.
    let inserts: Vec<&LogEntry> = plane
        .log
        .iter()
        .filter(|e| e.kind == "table_insert")
        .collect();
    let sa_spd = inserts
        .iter()
        .filter(|e| e.table != Some(TableId::LpmFwd))
        .count();
    let routes = inserts
        .iter()
        .filter(|e| e.table == Some(TableId::LpmFwd))
        .count();
    let reg_writes = plane
        .log
        .iter()
        .filter(|e| e.kind == "register_write")
        .count();
    assert_eq!(sa_spd, 6);
    assert_eq!(routes, 2);
    assert_eq!(reg_writes, 4);
    assert!(plane.log.iter().all(|e| e.kind != "table_modify"));

    // Per peer: every SAD-DEC insert precedes every SAD-ENC insert, which
    // precedes the SPD insert.
    for peer in ["s1", "s2"] {
        let pos = |t: TableId| -> Vec<usize> {
            plane
                .log
                .iter()
                .enumerate()
                .filter(|(_, e)| {
                    e.peer == peer && e.kind == "table_insert" && e.table == Some(t)
                })
                .map(|(i, _)| i)
                .collect()
        };
        let dec = pos(TableId::SadDec);
        let enc = pos(TableId::SadEnc);
        let spd = pos(TableId::Spd);
        assert_eq!(dec.len(), 1);
        assert_eq!(enc.len(), 1);
        assert_eq!(spd.len(), 1);
        assert!(dec.iter().max() < enc.iter().min());
        assert!(enc.iter().max() < spd.iter().min());
    }

    // Each switch holds exactly its share.
    for id in ["s1", "s2"] {
        assert_eq!(plane.switch(id).table(TableId::SadDec).len(), 1);
        assert_eq!(plane.switch(id).table(TableId::SadEnc).len(), 1);
        assert_eq!(plane.switch(id).table(TableId::Spd).len(), 1);
        assert_eq!(plane.switch(id).table(TableId::LpmFwd).len(), 1);
    }

    // Repeated setup of an established tunnel is a no-op.
    let ops_before = plane.log.len();
    let mut plane = plane;
    let mut ctrl = ctrl;
    ctrl.setup_tunnel(&ProfileId::from("t1"), &mut plane).unwrap();
    assert_eq!(plane.log.len(), ops_before);
}

#[test]
fn setup_rolls_back_when_a_peer_is_offline() {
    let mut plane = site_to_site_plane();
    plane.offline.insert(SwitchId::from("s2"));
    let mut ctrl = Controller::new(3);
    register_both(&mut ctrl);
    ctrl.add_profile(site_profile(CipherSuiteId::Null)).unwrap();

    let err = ctrl.setup_tunnel(&ProfileId::from("t1"), &mut plane);
    assert_eq!(err, Err(ControllerError::PeerUnreachable));
    assert_eq!(
        ctrl.tunnel(&ProfileId::from("t1")).unwrap().status,
        TunnelStatus::Down
    );
    // No partial tunnel on the reachable peer either.
    assert_eq!(plane.census("s1"), 0);
    assert_eq!(plane.census("s2"), 0);
}

#[test]
fn renewal_order_counts_and_dedup() {
    let (mut ctrl, mut plane) = setup_site_tunnel(5);
    let pid = ProfileId::from("t1");
    let old_spi_i = ctrl.tunnel(&pid).unwrap().sa_i.spi;
    let sa_generated_before = ctrl.metrics.sa_generated;
    plane.log.clear();

    let note = Notification {
        switch_id: SwitchId::from("s1"),
        kind: NotificationKind::SoftLimit,
        spi: old_spi_i,
        direction: SaDirection::Enc,
    };
    ctrl.handle_notification(&note, &mut plane).unwrap();

    // Exactly three table operations in the mandated order, plus exactly
    // one key generation.
    let ops = plane.table_ops();
    assert_eq!(ops.len(), 3);
    assert_eq!(ops[0].kind, "table_insert");
    assert_eq!(ops[0].table, Some(TableId::SadDec));
    assert_eq!(ops[0].peer, "s2");
    assert_eq!(ops[1].kind, "table_modify");
    assert_eq!(ops[1].table, Some(TableId::SadEnc));
    assert_eq!(ops[1].peer, "s1");
    assert_eq!(ops[2].kind, "table_delete");
    assert_eq!(ops[2].table, Some(TableId::SadDec));
    assert_eq!(ops[2].peer, "s2");
    assert_eq!(ctrl.metrics.sa_generated, sa_generated_before + 1);

    let new_spi_i = ctrl.tunnel(&pid).unwrap().sa_i.spi;
    assert_ne!(new_spi_i, old_spi_i);
    assert_eq!(
        ctrl.tunnel(&pid).unwrap().status,
        TunnelStatus::Established
    );
    // Old decryption entry is gone, only the new one remains.
    assert_eq!(plane.switch("s2").table(TableId::SadDec).len(), 1);

    // A duplicate notification for the replaced SPI is stale and ignored.
    plane.log.clear();
    ctrl.handle_notification(&note, &mut plane).unwrap();
    assert!(plane.log.is_empty());
    assert_eq!(ctrl.metrics.stale_notifications, 1);
    assert_eq!(ctrl.metrics.renewals_completed, 1);
    assert_eq!(ctrl.rekey_total(), 1);
}

#[test]
fn delete_census_and_default_deny() {
    let (mut ctrl, mut plane) = setup_site_tunnel(9);
    let pid = ProfileId::from("t1");

    // Unrelated pre-existing state survives the tunnel's deletion.
    use espnet_core::table::{MatchValue, TableAction, TableEntry};
    plane
        .switches
        .get_mut(&SwitchId::from("s1"))
        .unwrap()
        .apply_control(ControlRequest::TableInsert {
            table: TableId::LpmFwd,
            entry: TableEntry {
                key: vec![MatchValue::Lpm { value: 0, prefix_len: 0 }],
                priority: 0,
                action: TableAction::Drop,
            },
        })
        .unwrap();
    let baseline_s1 = plane.census("s1");

    ctrl.delete_tunnel(&pid, &mut plane).unwrap();
    assert_eq!(
        ctrl.tunnel(&pid).unwrap().status,
        TunnelStatus::Down
    );
    assert_eq!(plane.census("s1"), baseline_s1 - 4);
    assert_eq!(plane.census("s2"), 0);

    // Matching traffic now falls to the SPD default action.
    let inner = espnet_core::packet::serialize_ipv4_packet(
        &espnet_core::packet::Ipv4Header::simple(H1, H2, 253, 64),
        b"after delete",
    )
    .unwrap();
    let mut frame = Vec::new();
    frame.extend_from_slice(&mac("s1", 1).0);
    frame.extend_from_slice(&[2, 0, 0, 0, 0, 0xAA]);
    frame.extend_from_slice(&0x0800u16.to_be_bytes());
    frame.extend_from_slice(&inner);
    let out = plane
        .switches
        .get_mut(&SwitchId::from("s1"))
        .unwrap()
        .process_packet(1, &frame);
    assert_eq!(
        out,
        PacketOutcome::Dropped(espnet_core::switch::DropCategory::NoSpdMatch)
    );

    // Deleting again is a no-op ack.
    let ops = plane.log.len();
    ctrl.delete_tunnel(&pid, &mut plane).unwrap();
    assert_eq!(plane.log.len(), ops);
}

#[test]
fn host_to_site_setup_offer_and_renewals() {
    let mut plane = TestPlane::default();
    plane.add_switch("s2");
    plane
        .agents
        .insert(RoadwarriorId::from("rw1"), HostIpsecState::new());

    let mut ctrl = Controller::new(11);
    register_both(&mut ctrl);
    ctrl.register_roadwarrior(RoadwarriorId::from("rw1"), RW_IP);
    ctrl.add_profile(rw_profile()).unwrap();

    // Offer lists the assigned profile.
    let offer = ctrl.agent_offer(&RoadwarriorId::from("rw1")).unwrap();
    match &offer {
        AgentMessage::TunnelOffer { profiles } => {
            assert_eq!(profiles.len(), 1);
            assert_eq!(profiles[0].profile_id, ProfileId::from("rw-t1"));
        }
        other => panic!("expected offer, got {other:?}"),
    }
    assert!(matches!(
        ctrl.agent_offer(&RoadwarriorId::from("ghost")),
        Err(ControllerError::UnknownRoadwarrior(_))
    ));

    // Request -> setup: switch inserts around one ConfigApply, in order
    // DEC < apply < ENC < SPD.
    let reply = ctrl
        .handle_agent_message(
            &RoadwarriorId::from("rw1"),
            AgentMessage::TunnelRequest {
                profile_id: ProfileId::from("rw-t1"),
            },
            &mut plane,
        )
        .unwrap();
    assert_eq!(reply, AgentMessage::Ack);

    let idx = |kind: &str, table: Option<TableId>| -> usize {
        plane
            .log
            .iter()
            .position(|e| e.kind == kind && e.table == table)
            .unwrap()
    };
    let dec = idx("table_insert", Some(TableId::SadDec));
    let apply = idx("agent_config_apply", None);
    let enc = idx("table_insert", Some(TableId::SadEnc));
    let spd = idx("table_insert", Some(TableId::Spd));
    assert!(dec < apply && apply < enc && enc < spd);
    let agent = &plane.agents[&RoadwarriorId::from("rw1")];
    assert_eq!(agent.applied_profiles().count(), 1);

    // Unassigned profile is refused.
    let err = ctrl.handle_agent_message(
        &RoadwarriorId::from("rw1"),
        AgentMessage::TunnelRequest {
            profile_id: ProfileId::from("not-mine"),
        },
        &mut plane,
    );
    assert!(matches!(err, Err(ControllerError::UnknownProfile(_))));

    // Agent-initiated renewal of its outbound SA (slot I): the switch
    // decrypts that slot, so the trace is DEC-insert, agent apply,
    // DEC-delete.
    let pid = ProfileId::from("rw-t1");
    let spi_i = ctrl.tunnel(&pid).unwrap().sa_i.spi;
    plane.log.clear();
    ctrl.handle_agent_message(
        &RoadwarriorId::from("rw1"),
        AgentMessage::ExpireNotice {
            spi: spi_i,
            level: ExpireLevel::Soft,
        },
        &mut plane,
    )
    .unwrap();
    let kinds: Vec<&str> = plane
        .log
        .iter()
        .filter(|e| e.kind.starts_with("table_") || e.kind.starts_with("agent_"))
        .map(|e| e.kind)
        .collect();
    assert_eq!(
        kinds,
        vec!["table_insert", "agent_config_apply", "table_delete"]
    );

    // Switch-initiated renewal of the other direction (slot J): the host
    // decrypts, so the new SA reaches it before the switch's ENC modify.
    let spi_j = ctrl.tunnel(&pid).unwrap().sa_j.spi;
    plane.log.clear();
    let note = Notification {
        switch_id: SwitchId::from("s2"),
        kind: NotificationKind::SoftLimit,
        spi: spi_j,
        direction: SaDirection::Enc,
    };
    ctrl.handle_notification(&note, &mut plane).unwrap();
    let kinds: Vec<&str> = plane
        .log
        .iter()
        .filter(|e| e.kind.starts_with("table_") || e.kind.starts_with("agent_"))
        .map(|e| e.kind)
        .collect();
    assert_eq!(kinds, vec!["agent_config_apply", "table_modify"]);
    assert_eq!(ctrl.metrics.renewals_completed, 2);
}
