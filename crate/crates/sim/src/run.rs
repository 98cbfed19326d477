//! Scenario execution: proactive tunnel setup, agent sessions, traffic
//! injection, the event loop, and the run report.

use std::collections::BTreeMap;
use std::net::Ipv4Addr;
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use espnet_core::agent::AgentMessage;
use espnet_core::controller::{
    Controller, ControllerError, SwitchInfo, TunnelMode, TunnelSummary,
};
use espnet_core::switch::{ControlRequest, SwitchState, TableId};
use espnet_core::table::{MatchValue, TableAction};
use espnet_core::types::{ProfileId, RoadwarriorId, SwitchId};

use crate::netsim::{build_fabric, next_hops_of, Fabric, TraceEvent};
use crate::scenario::{Scenario, ValidationError};
use crate::timing::TimingTable;

#[derive(Error, Debug)]
pub enum RunError {
    #[error("invalid scenario: {0}")]
    Validation(#[from] ValidationError),
    #[error("controller error: {0}")]
    Controller(#[from] ControllerError),
    #[error("deadlock: {0}")]
    Deadlock(String),
    #[error("internal accounting violation: {0}")]
    Internal(String),
}

#[derive(Debug, Clone, Serialize)]
pub struct FlowReport {
    pub index: usize,
    pub src_host: String,
    pub dst: Ipv4Addr,
    pub mode: &'static str,
    pub suite: Option<&'static str>,
    pub sent: u64,
    pub delivered: u64,
    pub lost: u64,
    pub payload_ok: bool,
    /// Drops attributed to this flow, by category.
    pub drops: BTreeMap<String, u64>,
}

/// One table entry as it appears in a report snapshot: the key, the
/// priority and a key-material-free action summary.
#[derive(Debug, Clone, Serialize)]
pub struct EntrySummary {
    pub key: String,
    pub priority: u32,
    pub action: String,
}

fn summarize_key(key: &[MatchValue]) -> String {
    key.iter()
        .map(|cell| match cell {
            MatchValue::Exact(v) => format!("{v:#x}"),
            MatchValue::Lpm { value, prefix_len } => format!("{value:#x}/{prefix_len}"),
            MatchValue::Ternary { value, mask } => format!("{value:#x}&{mask:#x}"),
        })
        .collect::<Vec<_>>()
        .join(",")
}

fn summarize_action(action: &TableAction) -> String {
    match action {
        TableAction::Drop => "drop".to_string(),
        TableAction::Forward { next_hop_mac, port } => {
            format!("forward_packet(mac={next_hop_mac}, port={port})")
        }
        TableAction::SpdMark { policy } => format!("add_spd_mark({policy:?})").to_lowercase(),
        TableAction::EspEncrypt { sa } => format!(
            "esp_encrypt(spi={:#010x}, suite={}, register={})",
            sa.spi, sa.suite, sa.register_index
        ),
        TableAction::EspDecrypt { sa } => format!(
            "esp_decrypt(spi={:#010x}, suite={}, register={})",
            sa.spi, sa.suite, sa.register_index
        ),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ConservationReport {
    pub ingress: u64,
    pub forwarded: u64,
    pub dropped: u64,
    pub ok: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct FlowGoodput {
    pub index: usize,
    pub class: &'static str,
    pub packets: u64,
    pub work_ms: f64,
    pub packets_per_ms: f64,
}

/// Work-normalized relative throughput. Wall-clock derived, so present
/// only when the scenario opts in; BYPASS >= NULL >= AES is the property
/// of interest, the absolute numbers are machine artifacts.
#[derive(Debug, Clone, Serialize)]
pub struct GoodputReport {
    pub flows: Vec<FlowGoodput>,
    pub bypass_packets_per_ms: Option<f64>,
    pub null_packets_per_ms: Option<f64>,
    pub aes_packets_per_ms: Option<f64>,
    pub ordering_ok: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub final_time: u64,
    pub flows: Vec<FlowReport>,
    /// Per-switch drop counters by category.
    pub switch_drops: BTreeMap<String, BTreeMap<&'static str, u64>>,
    /// Per-switch table snapshots (SA keys redacted).
    pub switch_tables: BTreeMap<String, BTreeMap<&'static str, Vec<EntrySummary>>>,
    /// Sum over switches.
    pub drops: BTreeMap<&'static str, u64>,
    pub unattributed_drops: u64,
    pub anomalies: u64,
    pub rekey_count: u64,
    pub control_message_counts: BTreeMap<String, u64>,
    pub sa_generated: u64,
    pub stale_notifications: u64,
    pub tunnels: Vec<TunnelSummary>,
    pub warnings: Vec<String>,
    pub payload_integrity: &'static str,
    pub conservation: ConservationReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub goodput: Option<GoodputReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timings: Option<TimingTable>,
}

/// Wall-clock spans collected around whole lifecycle operations.
#[derive(Debug, Default, Clone)]
pub struct TimingSpans {
    pub setup_ns: Vec<u64>,
    pub renewal_ns: Vec<u64>,
}

pub struct RunOutput {
    pub report: RunReport,
    pub trace: Vec<TraceEvent>,
    pub spans: TimingSpans,
    /// Per-op wall-clock samples when instrumentation was on.
    pub op_timings: Option<BTreeMap<&'static str, Vec<u64>>>,
    /// The controller after the run, for follow-up micro measurements.
    pub controller: Controller,
    /// Final switch states, for snapshot inspection.
    pub switches: BTreeMap<SwitchId, SwitchState>,
    /// Every control request issued during the run, in order.
    pub replay_log: Vec<(SwitchId, ControlRequest)>,
}

pub struct SimNet {
    pub scenario: Scenario,
    pub seed: u64,
    pub fabric: Fabric,
    pub controller: Controller,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub collect_op_timings: bool,
}

/// Instantiate every node, connect control channels, install bootstrap
/// state and register everything with the controller. The event clock
/// starts at zero.
pub fn build_simnet(scenario: &Scenario, seed: u64, opts: RunOptions) -> Result<SimNet, RunError> {
    scenario.validate()?;
    let fabric = build_fabric(
        scenario,
        scenario.measure_goodput || opts.collect_op_timings,
        opts.collect_op_timings,
    );
    let mut controller = Controller::new(seed);
    for s in &scenario.topology.switches {
        controller.register_switch(SwitchInfo {
            switch_id: SwitchId::from(s.id.as_str()),
            register_capacity: s.registers as u32,
            adjacency: next_hops_of(scenario, &s.id),
        });
    }
    for h in scenario.topology.hosts.iter().filter(|h| h.roadwarrior) {
        controller.register_roadwarrior(RoadwarriorId::from(h.id.as_str()), h.ip);
    }
    for p in &scenario.profiles {
        controller.add_profile(p.clone())?;
    }
    Ok(SimNet {
        scenario: scenario.clone(),
        seed,
        fabric,
        controller,
    })
}

impl SimNet {
    /// Run to quiescence: proactive site-to-site setups, scripted agent
    /// sessions, then traffic until every queue drains.
    pub fn run(mut self) -> Result<RunOutput, RunError> {
        let mut spans = TimingSpans::default();

        // Proactive setup of all site-to-site tunnels, in profile order.
        let site_profiles: Vec<ProfileId> = self
            .controller
            .profiles()
            .filter(|p| p.mode == TunnelMode::SiteToSite)
            .map(|p| p.profile_id.clone())
            .collect();
        for pid in &site_profiles {
            log::info!("setting up tunnel {pid}");
            self.fabric.record_lifecycle("setup", pid.as_str());
            let t0 = Instant::now();
            self.controller.setup_tunnel(pid, &mut self.fabric)?;
            spans.setup_ns.push(t0.elapsed().as_nanos() as u64);
        }

        // Scripted roadwarrior sessions: offer, then the requested setups.
        let script: Vec<(String, Vec<ProfileId>)> = self
            .scenario
            .agent_script
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        for (rw, requests) in script {
            let rwid = RoadwarriorId::from(rw.as_str());
            let offer = self.controller.agent_offer(&rwid)?;
            let offered: Vec<ProfileId> = match offer {
                AgentMessage::TunnelOffer { profiles } => {
                    profiles.into_iter().map(|p| p.profile_id).collect()
                }
                _ => Vec::new(),
            };
            log::info!("agent {rw}: offered {} profiles", offered.len());
            for pid in requests {
                if !offered.contains(&pid) {
                    return Err(RunError::Controller(ControllerError::UnknownProfile(pid)));
                }
                let t0 = Instant::now();
                let reply = self.controller.handle_agent_message(
                    &rwid,
                    AgentMessage::TunnelRequest {
                        profile_id: pid.clone(),
                    },
                    &mut self.fabric,
                )?;
                spans.setup_ns.push(t0.elapsed().as_nanos() as u64);
                debug_assert_eq!(reply, AgentMessage::Ack);
            }
        }

        // Traffic starts after the control plane is quiet.
        let base = self.fabric.clock + 1;
        for fi in 0..self.fabric.flows.len() {
            let def = self.fabric.flows[fi].def.clone();
            for k in 0..def.count {
                let at = base + def.start_offset + u64::from(k) * def.gap;
                self.fabric.schedule_inject(at, fi, k);
            }
        }

        // Event loop: notifications and agent messages between events.
        loop {
            if let Some(n) = self.fabric.pending_notifications.pop_front() {
                let before = self.controller.metrics.renewals_completed;
                let t0 = Instant::now();
                self.controller.handle_notification(&n, &mut self.fabric)?;
                if self.controller.metrics.renewals_completed > before {
                    spans.renewal_ns.push(t0.elapsed().as_nanos() as u64);
                    self.fabric
                        .record_lifecycle("renewal", &format!("spi {}", n.spi));
                    log::debug!("renewed SA after notification for spi {}", n.spi);
                }
                continue;
            }
            if let Some((rw, msg)) = self.fabric.pending_agent_msgs.pop_front() {
                let before = self.controller.metrics.renewals_completed;
                let t0 = Instant::now();
                self.controller
                    .handle_agent_message(&rw, msg, &mut self.fabric)?;
                if self.controller.metrics.renewals_completed > before {
                    spans.renewal_ns.push(t0.elapsed().as_nanos() as u64);
                }
                continue;
            }
            if !self.fabric.step() {
                break;
            }
        }

        self.check_quiescence()?;
        let report = self.build_report()?;
        let fabric = self.fabric;
        Ok(RunOutput {
            report,
            trace: fabric.trace,
            spans,
            op_timings: fabric.op_timings,
            controller: self.controller,
            switches: fabric.switches,
            replay_log: fabric.replay_log,
        })
    }

    fn check_quiescence(&self) -> Result<(), RunError> {
        debug_assert!(self.fabric.idle());
        let incomplete: Vec<String> = self
            .fabric
            .flows
            .iter()
            .enumerate()
            .filter(|(_, f)| f.sent != u64::from(f.def.count))
            .map(|(i, f)| format!("flow {i}: sent {} of {}", f.sent, f.def.count))
            .collect();
        if !incomplete.is_empty() {
            return Err(RunError::Deadlock(format!(
                "no events left at t={} but traffic incomplete: {}; {} queued events",
                self.fabric.clock,
                incomplete.join(", "),
                self.fabric.queue_len(),
            )));
        }
        if !self.fabric.link_conservation_ok() {
            return Err(RunError::Deadlock(format!(
                "frames stuck on links at t={}",
                self.fabric.clock
            )));
        }
        Ok(())
    }

    fn build_report(&self) -> Result<RunReport, RunError> {
        let fabric = &self.fabric;

        let mut flows = Vec::new();
        for (i, f) in fabric.flows.iter().enumerate() {
            flows.push(FlowReport {
                index: i,
                src_host: f.def.src_host.clone(),
                dst: f.def.dst,
                mode: f.def.mode.name(),
                suite: f.suite.map(|s| s.name()),
                sent: f.sent,
                delivered: f.delivered,
                lost: f.sent - f.delivered,
                payload_ok: f.payload_bad == 0,
                drops: f.drops.clone(),
            });
        }

        let mut switch_drops = BTreeMap::new();
        let mut switch_tables = BTreeMap::new();
        let mut drops: BTreeMap<&'static str, u64> = BTreeMap::new();
        let mut ingress = 0;
        let mut forwarded = 0;
        let mut dropped = 0;
        for (id, s) in &fabric.switches {
            let mut per = BTreeMap::new();
            for (cat, n) in s.drop_counts() {
                per.insert(cat.name(), n);
                *drops.entry(cat.name()).or_insert(0) += n;
                dropped += n;
            }
            ingress += s.ingress_count();
            forwarded += s.forwarded_count();
            switch_drops.insert(id.to_string(), per);
            let mut tables = BTreeMap::new();
            for t in TableId::ALL {
                let entries: Vec<EntrySummary> = s
                    .table(t)
                    .entries()
                    .map(|e| EntrySummary {
                        key: summarize_key(&e.key),
                        priority: e.priority,
                        action: summarize_action(&e.action),
                    })
                    .collect();
                tables.insert(t.name(), entries);
            }
            switch_tables.insert(id.to_string(), tables);
        }
        let conservation = ConservationReport {
            ingress,
            forwarded,
            dropped,
            ok: ingress == forwarded + dropped,
        };
        if !conservation.ok {
            return Err(RunError::Internal(format!(
                "pipeline counters disagree: ingress {ingress} != forwarded {forwarded} + dropped {dropped}"
            )));
        }

        // Every lost packet must be accounted for somewhere.
        let lost_total: u64 = flows.iter().map(|f| f.lost).sum();
        let attributed: u64 = flows.iter().map(|f| f.drops.values().sum::<u64>()).sum();
        if lost_total != attributed + fabric.unattributed_drops + fabric.anomalies {
            return Err(RunError::Internal(format!(
                "loss accounting mismatch: lost {lost_total}, attributed {attributed}, \
                 unattributed {}, anomalies {}",
                fabric.unattributed_drops, fabric.anomalies
            )));
        }

        let payload_integrity = if fabric.flows.iter().all(|f| f.payload_bad == 0) {
            "ok"
        } else {
            "corrupt"
        };

        let goodput = self.scenario.measure_goodput.then(|| {
            let mut per_class: BTreeMap<&'static str, (u64, u128)> = BTreeMap::new();
            let mut per_flow = Vec::new();
            for (i, f) in fabric.flows.iter().enumerate() {
                let class = match (f.def.mode, f.suite) {
                    (crate::scenario::FlowMode::Bypass, _) => "bypass",
                    (_, Some(espnet_core::crypto::CipherSuiteId::Null)) => "null",
                    (_, Some(espnet_core::crypto::CipherSuiteId::AesCtrHmacMd5)) => "aes",
                    _ => "other",
                };
                let e = per_class.entry(class).or_insert((0, 0));
                e.0 += f.work_packets;
                e.1 += f.work_ns;
                let work_ms = f.work_ns as f64 / 1e6;
                per_flow.push(FlowGoodput {
                    index: i,
                    class,
                    packets: f.work_packets,
                    work_ms,
                    packets_per_ms: if work_ms > 0.0 {
                        f.work_packets as f64 / work_ms
                    } else {
                        0.0
                    },
                });
            }
            let rate = |class: &str| -> Option<f64> {
                per_class.get(class).and_then(|(pkts, ns)| {
                    (*ns > 0).then(|| *pkts as f64 / (*ns as f64 / 1e6))
                })
            };
            let bypass = rate("bypass");
            let null = rate("null");
            let aes = rate("aes");
            let ordering_ok = [(bypass, null), (null, aes), (bypass, aes)]
                .into_iter()
                .all(|(a, b)| match (a, b) {
                    (Some(a), Some(b)) => a >= b,
                    _ => true,
                });
            GoodputReport {
                flows: per_flow,
                bypass_packets_per_ms: bypass,
                null_packets_per_ms: null,
                aes_packets_per_ms: aes,
                ordering_ok,
            }
        });

        Ok(RunReport {
            scenario: self.scenario.name.clone(),
            seed: self.seed,
            final_time: fabric.clock,
            flows,
            switch_drops,
            switch_tables,
            drops,
            unattributed_drops: fabric.unattributed_drops,
            anomalies: fabric.anomalies,
            rekey_count: self.controller.rekey_total(),
            control_message_counts: fabric.ctrl_counts.clone(),
            sa_generated: self.controller.metrics.sa_generated,
            stale_notifications: self.controller.metrics.stale_notifications,
            tunnels: self.controller.status_snapshot(),
            warnings: self.controller.metrics.warnings.clone(),
            payload_integrity,
            conservation,
            goodput,
            timings: None,
        })
    }
}

/// Convenience wrapper: build and run one scenario instance.
pub fn run_scenario(
    scenario: &Scenario,
    seed: u64,
    opts: RunOptions,
) -> Result<RunOutput, RunError> {
    build_simnet(scenario, seed, opts)?.run()
}
