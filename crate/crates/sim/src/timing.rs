//! Wall-clock timing of control operations: mean and a 95% confidence
//! interval, following the usual Student-t construction.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::Serialize;

use crate::run::{build_simnet, RunError, RunOptions};
use crate::scenario::Scenario;

/// Two-sided 95% critical values of the t distribution for 1..=30 degrees
/// of freedom; beyond that the normal approximation is used.
const T_TABLE_95: [f64; 30] = [
    12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228, 2.201, 2.179, 2.160,
    2.145, 2.131, 2.120, 2.110, 2.101, 2.093, 2.086, 2.080, 2.074, 2.069, 2.064, 2.060, 2.056,
    2.052, 2.048, 2.045, 2.042,
];

fn t_critical_95(df: usize) -> f64 {
    if df == 0 {
        0.0
    } else if df <= 30 {
        T_TABLE_95[df - 1]
    } else {
        1.960
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stats {
    pub samples: usize,
    pub mean_ms: f64,
    /// Half-width of the 95% confidence interval around the mean.
    pub ci95_half_ms: f64,
}

pub fn stats(samples_ns: &[u64]) -> Stats {
    let n = samples_ns.len();
    if n == 0 {
        return Stats {
            samples: 0,
            mean_ms: 0.0,
            ci95_half_ms: 0.0,
        };
    }
    let to_ms = |ns: u64| ns as f64 / 1e6;
    let mean = samples_ns.iter().map(|&s| to_ms(s)).sum::<f64>() / n as f64;
    if n == 1 {
        return Stats {
            samples: 1,
            mean_ms: mean,
            ci95_half_ms: 0.0,
        };
    }
    let var = samples_ns
        .iter()
        .map(|&s| {
            let d = to_ms(s) - mean;
            d * d
        })
        .sum::<f64>()
        / (n - 1) as f64;
    let half = t_critical_95(n - 1) * var.sqrt() / (n as f64).sqrt();
    Stats {
        samples: n,
        mean_ms: mean,
        ci95_half_ms: half,
    }
}

/// Wall-clock distributions of the controller's elementary operations.
#[derive(Debug, Clone, Serialize)]
pub struct TimingTable {
    pub runs: u32,
    pub setup: Stats,
    pub renewal: Stats,
    pub sa_generation: Stats,
    pub table_insert: Stats,
    pub table_modify: Stats,
}

impl TimingTable {
    pub fn rows(&self) -> [(&'static str, &Stats); 5] {
        [
            ("tunnel setup", &self.setup),
            ("tunnel renewal", &self.renewal),
            ("SA generation", &self.sa_generation),
            ("table insert", &self.table_insert),
            ("table modify", &self.table_modify),
        ]
    }
}

/// Execute the scenario `runs` times (seeds `base_seed..`), collecting
/// wall-clock samples for tunnel setup, tunnel renewal, single-SA
/// generation, and single table inserts/modifies.
pub fn measure_control_timings(
    scenario: &Scenario,
    runs: u32,
    base_seed: u64,
) -> Result<TimingTable, RunError> {
    let mut setup = Vec::new();
    let mut renewal = Vec::new();
    let mut sa_generation = Vec::new();
    let mut per_op: BTreeMap<&'static str, Vec<u64>> = BTreeMap::new();

    for r in 0..runs {
        let net = build_simnet(
            scenario,
            base_seed.wrapping_add(u64::from(r)),
            RunOptions {
                collect_op_timings: true,
            },
        )?;
        let mut out = net.run()?;
        setup.extend(out.spans.setup_ns.iter().copied());
        renewal.extend(out.spans.renewal_ns.iter().copied());
        if let Some(ops) = out.op_timings.take() {
            for (k, mut v) in ops {
                per_op.entry(k).or_default().append(&mut v);
            }
        }
        // Single-SA generation, measured directly against the controller.
        if let Some(profile) = scenario.profiles.first() {
            let mut controller = out.controller;
            for _ in 0..10 {
                let t0 = Instant::now();
                let pair = controller.generate_sa_pair(profile);
                let per_sa = t0.elapsed().as_nanos() as u64 / 2;
                if pair.is_ok() {
                    sa_generation.push(per_sa);
                }
            }
        }
    }

    Ok(TimingTable {
        runs,
        setup: stats(&setup),
        renewal: stats(&renewal),
        sa_generation: stats(&sa_generation),
        table_insert: stats(per_op.get("table_insert").map_or(&[], |v| v.as_slice())),
        table_modify: stats(per_op.get("table_modify").map_or(&[], |v| v.as_slice())),
    })
}
