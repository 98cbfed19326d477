//! The roadwarrior side: a host-internal ESP stack plus the agent message
//! protocol spoken with the controller.
//!
//! The host stack mirrors the switch pipeline's ESP behavior exactly — it
//! shares the encapsulation path in [`crate::crypto`] — but keeps its state
//! in per-SPI maps instead of match-action tables. Counters behave like
//! switch registers: monotone within an SA incarnation, fresh for a fresh
//! SPI, with expire notices queued at exactly the soft and hard limits,
//! once each.
//!
//! One wrinkle of renewal: when the controller pushes a config whose
//! inbound SA changed, the previous inbound SA stays accepted until the
//! next apply or teardown, so ESP packets already in flight under the old
//! SPI are not lost.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::vec::Vec;
use core::net::Ipv4Addr;

use thiserror::Error;

use crate::controller::{TrafficSelector, TunnelMode};
use crate::crypto::{self, CipherSuiteId, CryptoError, SecurityAssociation};
use crate::packet::{self, CodecError, PROTO_ESP};
use crate::types::{Ipv4Prefix, ProfileId};

#[derive(Error, Debug, Clone, PartialEq, Eq)]
pub enum AgentError {
    #[error("selector conflicts with an applied profile")]
    ConflictingSelector,
    #[error("no selector matches this packet")]
    NoSelectorMatch,
    #[error("no SA for SPI {0}")]
    UnknownSpi(u32),
    #[error("ICV mismatch")]
    IcvMismatch,
    #[error("hard packet limit exceeded")]
    HardLimitExceeded,
    #[error("frame is not ESP addressed to this host")]
    NotEsp,
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Crypto(CryptoError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ExpireLevel {
    Soft,
    Hard,
}

/// What a roadwarrior learns about an offered tunnel.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ProfileSummary {
    pub profile_id: ProfileId,
    pub mode: TunnelMode,
    pub suite: CipherSuiteId,
    pub right_endpoint: Ipv4Addr,
}

/// Messages on the controller <-> agent channel. When a byte channel is
/// used, these travel as length-prefixed JSON frames.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "type", rename_all = "snake_case"))]
pub enum AgentMessage {
    TunnelOffer {
        profiles: Vec<ProfileSummary>,
    },
    TunnelRequest {
        profile_id: ProfileId,
    },
    /// Full tunnel configuration for one profile: both SAs, the selector
    /// and the routes to steer through the tunnel.
    ConfigApply {
        profile_id: ProfileId,
        sa_in: SecurityAssociation,
        sa_out: SecurityAssociation,
        traffic_selector: TrafficSelector,
        routes: Vec<Ipv4Prefix>,
    },
    ExpireNotice {
        spi: u32,
        level: ExpireLevel,
    },
    Teardown {
        profile_id: ProfileId,
    },
    Ack,
}

#[derive(Debug, Clone)]
struct AppliedConfig {
    sa_out: SecurityAssociation,
    sa_in: SecurityAssociation,
    /// Previous inbound SA, kept for in-flight packets across a renewal.
    prev_sa_in: Option<SecurityAssociation>,
    selector: TrafficSelector,
    routes: Vec<Ipv4Prefix>,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct HostDropCounters {
    pub no_selector: u64,
    pub hard_limit: u64,
    pub unknown_spi: u64,
    pub icv_fail: u64,
}

/// Host-side SPD/SAD state: applied configs keyed by profile, per-SPI
/// packet counters, and the queue of expire notices for the controller.
#[derive(Debug, Default)]
pub struct HostIpsecState {
    configs: BTreeMap<ProfileId, AppliedConfig>,
    counters: BTreeMap<u32, u64>,
    notified: BTreeSet<(u32, ExpireLevel)>,
    pending: VecDeque<AgentMessage>,
    pub drops: HostDropCounters,
}

impl HostIpsecState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Apply or tear down configuration from the controller; the returned
    /// message is the reply on the channel.
    pub fn handle_message(&mut self, msg: AgentMessage) -> Result<AgentMessage, AgentError> {
        match msg {
            AgentMessage::ConfigApply {
                profile_id,
                sa_in,
                sa_out,
                traffic_selector,
                routes,
            } => {
                self.apply_config(profile_id, sa_in, sa_out, traffic_selector, routes)?;
                Ok(AgentMessage::Ack)
            }
            AgentMessage::Teardown { profile_id } => {
                self.teardown(&profile_id);
                Ok(AgentMessage::Ack)
            }
            // Offers and acks need no state change.
            _ => Ok(AgentMessage::Ack),
        }
    }

    pub fn apply_config(
        &mut self,
        profile_id: ProfileId,
        sa_in: SecurityAssociation,
        sa_out: SecurityAssociation,
        selector: TrafficSelector,
        routes: Vec<Ipv4Prefix>,
    ) -> Result<(), AgentError> {
        sa_in.validate().map_err(AgentError::Crypto)?;
        sa_out.validate().map_err(AgentError::Crypto)?;
        if self
            .configs
            .iter()
            .any(|(pid, c)| *pid != profile_id && c.selector.overlaps(&selector))
        {
            return Err(AgentError::ConflictingSelector);
        }

        let prev_sa_in = match self.configs.remove(&profile_id) {
            Some(old) => {
                if old.sa_out.spi != sa_out.spi {
                    self.forget_spi(old.sa_out.spi);
                }
                if old.sa_in.spi != sa_in.spi {
                    // Renewed inbound SA: keep the old one for in-flight
                    // packets, retire anything older.
                    if let Some(prev) = old.prev_sa_in {
                        self.forget_spi(prev.spi);
                    }
                    Some(old.sa_in)
                } else {
                    old.prev_sa_in
                }
            }
            None => None,
        };
        self.counters.entry(sa_in.spi).or_insert(0);
        self.counters.entry(sa_out.spi).or_insert(0);
        self.configs.insert(
            profile_id,
            AppliedConfig {
                sa_out,
                sa_in,
                prev_sa_in,
                selector,
                routes,
            },
        );
        Ok(())
    }

    /// Remove one profile's configuration. Unknown profiles are a no-op;
    /// the cache is keyed by profile id.
    pub fn teardown(&mut self, profile_id: &ProfileId) {
        if let Some(old) = self.configs.remove(profile_id) {
            self.forget_spi(old.sa_out.spi);
            self.forget_spi(old.sa_in.spi);
            if let Some(prev) = old.prev_sa_in {
                self.forget_spi(prev.spi);
            }
        }
    }

    fn forget_spi(&mut self, spi: u32) {
        self.counters.remove(&spi);
        self.notified.remove(&(spi, ExpireLevel::Soft));
        self.notified.remove(&(spi, ExpireLevel::Hard));
    }

    pub fn applied_profiles(&self) -> impl Iterator<Item = &ProfileId> {
        self.configs.keys()
    }

    pub fn routes(&self, profile_id: &ProfileId) -> Option<&[Ipv4Prefix]> {
        self.configs.get(profile_id).map(|c| c.routes.as_slice())
    }

    pub fn counter(&self, spi: u32) -> u64 {
        self.counters.get(&spi).copied().unwrap_or(0)
    }

    /// Does any applied selector claim this packet? Used by callers to
    /// decide between the tunnel path and the plain path.
    pub fn has_selector_match(&self, src: Ipv4Addr, dst: Ipv4Addr, protocol: u8) -> bool {
        self.configs
            .values()
            .any(|c| c.selector.matches(src, dst, protocol))
    }

    /// Drain queued expire notices in emission order.
    pub fn poll_notices(&mut self) -> Vec<AgentMessage> {
        self.pending.drain(..).collect()
    }

    fn bump_counter(&mut self, spi: u32, soft: u64, hard: u64) -> Result<u64, AgentError> {
        let c = self.counters.entry(spi).or_insert(0);
        *c += 1;
        let c = *c;
        if c == soft && self.notified.insert((spi, ExpireLevel::Soft)) {
            self.pending.push_back(AgentMessage::ExpireNotice {
                spi,
                level: ExpireLevel::Soft,
            });
        }
        if c == hard && self.notified.insert((spi, ExpireLevel::Hard)) {
            self.pending.push_back(AgentMessage::ExpireNotice {
                spi,
                level: ExpireLevel::Hard,
            });
        }
        if c > hard {
            self.drops.hard_limit += 1;
            return Err(AgentError::HardLimitExceeded);
        }
        Ok(c)
    }

    /// Encapsulate one inner IPv4 packet bound through a tunnel. Semantics
    /// match the switch's ESP encryption block; the byte-level work is the
    /// same shared code path.
    pub fn host_send(&mut self, inner_ip: &[u8]) -> Result<Vec<u8>, AgentError> {
        let (header, _) = packet::parse_ipv4_packet(inner_ip)?;
        let sa_out = match self
            .configs
            .values()
            .find(|c| c.selector.matches(header.src, header.dst, header.protocol))
        {
            Some(c) => c.sa_out.clone(),
            None => {
                self.drops.no_selector += 1;
                return Err(AgentError::NoSelectorMatch);
            }
        };
        let seq = self.bump_counter(sa_out.spi, sa_out.soft_limit, sa_out.hard_limit)?;
        crypto::esp_seal(&sa_out, seq, inner_ip).map_err(AgentError::Crypto)
    }

    /// Decapsulate one outer ESP/IPv4 packet addressed to this host.
    pub fn host_receive(&mut self, outer_ip: &[u8]) -> Result<Vec<u8>, AgentError> {
        let (header, payload) = packet::parse_ipv4_packet(outer_ip)?;
        if header.protocol != PROTO_ESP {
            return Err(AgentError::NotEsp);
        }
        let (esp, raw) = packet::parse_esp(payload)?;
        let sa = match self.find_inbound(esp.spi, header.src, header.dst) {
            Some(sa) => sa,
            None => {
                self.drops.unknown_spi += 1;
                return Err(AgentError::UnknownSpi(esp.spi));
            }
        };
        self.bump_counter(sa.spi, sa.soft_limit, sa.hard_limit)?;
        crypto::esp_open(&sa, &esp, raw).map_err(|e| match e {
            CryptoError::IcvMismatch => {
                self.drops.icv_fail += 1;
                AgentError::IcvMismatch
            }
            other => AgentError::Crypto(other),
        })
    }

    fn find_inbound(
        &self,
        spi: u32,
        outer_src: Ipv4Addr,
        outer_dst: Ipv4Addr,
    ) -> Option<SecurityAssociation> {
        for c in self.configs.values() {
            for sa in core::iter::once(&c.sa_in).chain(c.prev_sa_in.as_ref()) {
                if sa.spi == spi && sa.tunnel_src == outer_src && sa.tunnel_dst == outer_dst {
                    return Some(sa.clone());
                }
            }
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::generate_key_material;
    use crate::packet::{serialize_ipv4_packet, Ipv4Header};
    use crate::types::{MacAddr, SpdPolicy, SwitchId};
    use alloc::vec;
    use rand_core::SeedableRng;

    const RW: Ipv4Addr = Ipv4Addr::new(198, 51, 100, 7);
    const EP: Ipv4Addr = Ipv4Addr::new(192, 0, 2, 2);
    const RESOURCE_HOST: Ipv4Addr = Ipv4Addr::new(10, 0, 2, 10);

    fn sa(spi: u32, src: Ipv4Addr, dst: Ipv4Addr, limits: (u64, u64)) -> SecurityAssociation {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(u64::from(spi));
        SecurityAssociation {
            spi,
            tunnel_src: src,
            tunnel_dst: dst,
            suite: CipherSuiteId::AesCtrHmacMd5,
            keys: generate_key_material(CipherSuiteId::AesCtrHmacMd5, &mut rng),
            register_index: 0,
            soft_limit: limits.0,
            hard_limit: limits.1,
        }
    }

    fn selector() -> TrafficSelector {
        TrafficSelector {
            src: Ipv4Prefix::host(RW),
            dst: Ipv4Prefix::host(RESOURCE_HOST),
            protocol: None,
        }
    }

    fn applied_host(limits: (u64, u64)) -> (HostIpsecState, SecurityAssociation, SecurityAssociation) {
        let mut h = HostIpsecState::new();
        let sa_out = sa(0x1000, RW, EP, limits);
        let sa_in = sa(0x2000, EP, RW, limits);
        h.apply_config(
            ProfileId::from("p1"),
            sa_in.clone(),
            sa_out.clone(),
            selector(),
            vec!["10.0.2.0/24".parse().unwrap()],
        )
        .unwrap();
        (h, sa_out, sa_in)
    }

    fn inner(src: Ipv4Addr, dst: Ipv4Addr, payload: &[u8]) -> Vec<u8> {
        serialize_ipv4_packet(&Ipv4Header::simple(src, dst, 253, 64), payload).unwrap()
    }

    #[test]
    fn apply_then_send_produces_esp() {
        let (mut h, sa_out, _) = applied_host((500, 510));
        let outer = h.host_send(&inner(RW, RESOURCE_HOST, b"up")).unwrap();
        let (oh, payload) = packet::parse_ipv4_packet(&outer).unwrap();
        assert_eq!(oh.protocol, PROTO_ESP);
        assert_eq!(oh.src, RW);
        assert_eq!(oh.dst, EP);
        let (esp, _) = packet::parse_esp(payload).unwrap();
        assert_eq!(esp.spi, sa_out.spi);
        assert_eq!(esp.seq, 1);
    }

    #[test]
    fn unmatched_traffic_is_refused() {
        let (mut h, _, _) = applied_host((500, 510));
        let err = h.host_send(&inner(RW, Ipv4Addr::new(8, 8, 8, 8), b"x"));
        assert_eq!(err, Err(AgentError::NoSelectorMatch));
        assert_eq!(h.drops.no_selector, 1);
    }

    #[test]
    fn receive_roundtrip_and_failures() {
        let (mut h, _, sa_in) = applied_host((500, 510));
        let inner_pkt = inner(RESOURCE_HOST, RW, b"down");
        // The switch-side encryptor is the same shared path.
        let outer = crypto::esp_seal(&sa_in, 1, &inner_pkt).unwrap();
        assert_eq!(h.host_receive(&outer).unwrap(), inner_pkt);

        // Unknown SPI.
        let mut other = sa_in.clone();
        other.spi = 0x9999;
        let outer = crypto::esp_seal(&other, 1, &inner_pkt).unwrap();
        assert_eq!(h.host_receive(&outer), Err(AgentError::UnknownSpi(0x9999)));
        assert_eq!(h.drops.unknown_spi, 1);

        // Tampered ciphertext.
        let mut outer = crypto::esp_seal(&sa_in, 2, &inner_pkt).unwrap();
        let n = outer.len();
        outer[n - 14] ^= 0x08;
        // The outer checksum still has to be valid for the flip to reach
        // the ICV check.
        let (oh, payload) = packet::parse_ipv4_packet(&{
            let mut fixed = outer.clone();
            let c = packet::ipv4_checksum(&{
                let mut hdr = fixed[..20].to_vec();
                hdr[10] = 0;
                hdr[11] = 0;
                hdr
            })
            .unwrap();
            fixed[10..12].copy_from_slice(&c.to_be_bytes());
            fixed
        })
        .map(|(h, p)| (h, p.to_vec()))
        .unwrap();
        let rebuilt = serialize_ipv4_packet(&oh, &payload).unwrap();
        assert_eq!(h.host_receive(&rebuilt), Err(AgentError::IcvMismatch));
        assert_eq!(h.drops.icv_fail, 1);
    }

    #[test]
    fn expire_notices_fire_exactly_once_at_limits() {
        let (mut h, sa_out, _) = applied_host((2, 4));
        let pkt = inner(RW, RESOURCE_HOST, b"x");
        assert!(h.host_send(&pkt).is_ok()); // 1
        assert!(h.poll_notices().is_empty());
        assert!(h.host_send(&pkt).is_ok()); // 2 == soft
        let notices = h.poll_notices();
        assert_eq!(
            notices,
            vec![AgentMessage::ExpireNotice {
                spi: sa_out.spi,
                level: ExpireLevel::Soft
            }]
        );
        assert!(h.host_send(&pkt).is_ok()); // 3
        assert!(h.poll_notices().is_empty());
        assert!(h.host_send(&pkt).is_ok()); // 4 == hard, still processed
        assert_eq!(
            h.poll_notices(),
            vec![AgentMessage::ExpireNotice {
                spi: sa_out.spi,
                level: ExpireLevel::Hard
            }]
        );
        // 5 > hard: dropped.
        assert_eq!(h.host_send(&pkt), Err(AgentError::HardLimitExceeded));
        assert_eq!(h.drops.hard_limit, 1);
        assert!(h.poll_notices().is_empty());
    }

    #[test]
    fn conflicting_selector_rejected_and_reapply_is_replacement() {
        let (mut h, _, _) = applied_host((500, 510));
        // Different profile, overlapping selector.
        let err = h.apply_config(
            ProfileId::from("p2"),
            sa(0x3000, EP, RW, (500, 510)),
            sa(0x3001, RW, EP, (500, 510)),
            selector(),
            vec![],
        );
        assert_eq!(err, Err(AgentError::ConflictingSelector));

        // Same profile: idempotent replacement.
        let new_out = sa(0x4000, RW, EP, (500, 510));
        let new_in = sa(0x4001, EP, RW, (500, 510));
        h.apply_config(
            ProfileId::from("p1"),
            new_in.clone(),
            new_out.clone(),
            selector(),
            vec![],
        )
        .unwrap();
        let outer = h.host_send(&inner(RW, RESOURCE_HOST, b"x")).unwrap();
        let (_, payload) = packet::parse_ipv4_packet(&outer).unwrap();
        let (esp, _) = packet::parse_esp(payload).unwrap();
        assert_eq!(esp.spi, 0x4000);
        // Fresh SPI, fresh counter.
        assert_eq!(esp.seq, 1);
    }

    #[test]
    fn previous_inbound_sa_survives_one_renewal() {
        let (mut h, sa_out, sa_in_1) = applied_host((500, 510));
        let inner_pkt = inner(RESOURCE_HOST, RW, b"in flight");

        let sa_in_2 = sa(0x5000, EP, RW, (500, 510));
        h.apply_config(
            ProfileId::from("p1"),
            sa_in_2.clone(),
            sa_out.clone(),
            selector(),
            vec![],
        )
        .unwrap();
        // Old inbound SPI still accepted (in-flight grace).
        let old = crypto::esp_seal(&sa_in_1, 1, &inner_pkt).unwrap();
        assert_eq!(h.host_receive(&old).unwrap(), inner_pkt);
        let new = crypto::esp_seal(&sa_in_2, 1, &inner_pkt).unwrap();
        assert_eq!(h.host_receive(&new).unwrap(), inner_pkt);

        // A second renewal retires the oldest SA.
        let sa_in_3 = sa(0x6000, EP, RW, (500, 510));
        h.apply_config(
            ProfileId::from("p1"),
            sa_in_3,
            sa_out,
            selector(),
            vec![],
        )
        .unwrap();
        let stale = crypto::esp_seal(&sa_in_1, 2, &inner_pkt).unwrap();
        assert_eq!(
            h.host_receive(&stale),
            Err(AgentError::UnknownSpi(sa_in_1.spi))
        );
    }

    #[test]
    fn teardown_drops_selector_traffic() {
        let (mut h, _, _) = applied_host((500, 510));
        h.handle_message(AgentMessage::Teardown {
            profile_id: ProfileId::from("p1"),
        })
        .unwrap();
        assert_eq!(
            h.host_send(&inner(RW, RESOURCE_HOST, b"x")),
            Err(AgentError::NoSelectorMatch)
        );
        // Teardown of an unknown profile is a no-op ack.
        let reply = h.handle_message(AgentMessage::Teardown {
            profile_id: ProfileId::from("nope"),
        });
        assert_eq!(reply, Ok(AgentMessage::Ack));
    }

    /// The host path and the switch's encrypt block produce byte-identical
    /// ESP material for the same SA and inner packet.
    #[test]
    fn host_and_switch_esp_paths_agree() {
        use crate::switch::{
            ControlRequest, PacketOutcome, SwitchConfig, SwitchState, TableId,
        };
        use crate::table::{MatchValue, TableAction, TableEntry};

        let sa_out = sa(0x7000, RW, EP, (500, 510));

        // Host side.
        let mut h = HostIpsecState::new();
        h.apply_config(
            ProfileId::from("p1"),
            sa(0x7001, EP, RW, (500, 510)),
            sa_out.clone(),
            selector(),
            vec![],
        )
        .unwrap();
        let inner_pkt = inner(RW, RESOURCE_HOST, b"equivalence");
        let host_outer = h.host_send(&inner_pkt).unwrap();

        // Switch side, same SA.
        let mut ports = alloc::collections::BTreeMap::new();
        ports.insert(1u32, MacAddr([2, 0, 0, 0, 0, 1]));
        ports.insert(2u32, MacAddr([2, 0, 0, 0, 0, 2]));
        let mut s = SwitchState::new(SwitchConfig {
            switch_id: SwitchId::from("s1"),
            ports,
            register_count: 8,
        });
        s.apply_control(ControlRequest::TableInsert {
            table: TableId::Spd,
            entry: TableEntry {
                key: vec![
                    MatchValue::Ternary { value: 0, mask: 0 },
                    MatchValue::Ternary { value: 0, mask: 0 },
                    MatchValue::Ternary { value: 0, mask: 0 },
                ],
                priority: 1,
                action: TableAction::SpdMark {
                    policy: SpdPolicy::Protect,
                },
            },
        })
        .unwrap();
        s.apply_control(ControlRequest::TableInsert {
            table: TableId::SadEnc,
            entry: TableEntry {
                key: vec![MatchValue::Exact(u64::from(u32::from(RESOURCE_HOST)))],
                priority: 0,
                action: TableAction::EspEncrypt { sa: sa_out },
            },
        })
        .unwrap();
        s.apply_control(ControlRequest::TableInsert {
            table: TableId::LpmFwd,
            entry: TableEntry {
                key: vec![MatchValue::Lpm {
                    value: u64::from(u32::from(EP)),
                    prefix_len: 32,
                }],
                priority: 0,
                action: TableAction::Forward {
                    next_hop_mac: MacAddr([2, 0, 0, 0, 0, 9]),
                    port: 2,
                },
            },
        })
        .unwrap();

        let mut frame = Vec::new();
        frame.extend_from_slice(&[2, 0, 0, 0, 0, 1]);
        frame.extend_from_slice(&[2, 0, 0, 0, 0, 0xAA]);
        frame.extend_from_slice(&0x0800u16.to_be_bytes());
        frame.extend_from_slice(&inner_pkt);
        let PacketOutcome::Forwarded { frame: out, .. } = s.process_packet(1, &frame) else {
            panic!("switch dropped");
        };

        // Compare the ESP material: everything after the IPv4 header must
        // be byte-identical; the outer headers agree except TTL (the
        // switch's L3 block already took its hop) and therefore checksum.
        let host = packet::parse_ipv4_packet(&host_outer).unwrap();
        let sw = packet::parse_ipv4_packet(&out[14..]).unwrap();
        assert_eq!(host.1, sw.1);
        assert_eq!(host.0.src, sw.0.src);
        assert_eq!(host.0.dst, sw.0.dst);
        assert_eq!(host.0.protocol, sw.0.protocol);
        assert_eq!(host.0.ttl, sw.0.ttl + 1);
    }
}
