//! Parameter sweeps: one scenario, one varied parameter, independent runs.

use std::fmt::Write as _;

use crate::mem::HUGE_PAGE_BYTES;
use crate::par::{self, Exec};
use crate::scenario::{ConfigError, Scenario};
use crate::sim::{run_with, RunReport, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    /// Consolidation limit, applied to every guest.
    Cl,
    /// Scenario seed.
    Seed,
    /// Near share of the combined tier capacity, in percent; the total stays fixed.
    NearPercent,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            Self::Cl => "cl",
            Self::Seed => "seed",
            Self::NearPercent => "near_percent",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SweepSpec {
    pub param: SweepParam,
    pub values: Vec<u64>,
}

/// Parses `name=start:end:step` (inclusive) or `name=v1,v2,...`.
pub fn parse_sweep(text: &str) -> Result<SweepSpec, ConfigError> {
    let bad = |m: &str| ConfigError::Invalid(format!("sweep {text:?}: {m}"));
    let (name, range) = text.split_once('=').ok_or_else(|| bad("expected name=values"))?;
    let param = match name.trim() {
        "cl" => SweepParam::Cl,
        "seed" => SweepParam::Seed,
        "near_percent" => SweepParam::NearPercent,
        other => return Err(bad(&format!("unknown parameter {other:?}"))),
    };
    let num = |s: &str| s.trim().parse::<u64>().map_err(|_| bad(&format!("{s:?} is not a non-negative integer")));
    let values = if range.contains(':') {
        let parts: Vec<&str> = range.split(':').collect();
        let [a, b, step] = parts[..] else { return Err(bad("range needs start:end:step")) };
        let (a, b, step) = (num(a)?, num(b)?, num(step)?);
        if step == 0 || a > b {
            return Err(bad("range needs start <= end and step >= 1"));
        }
        (a..=b).step_by(step as usize).collect()
    } else {
        range.split(',').map(num).collect::<Result<Vec<_>, _>>()?
    };
    if values.is_empty() {
        return Err(bad("no values"));
    }
    Ok(SweepSpec { param, values })
}

/// The scenario with `param` set to `value`.
pub fn apply(base: &Scenario, param: SweepParam, value: u64) -> Result<Scenario, ConfigError> {
    let mut s = base.clone();
    match param {
        SweepParam::Cl => s.set_cl(u32::try_from(value).map_err(|_| ConfigError::Invalid("cl out of range".into()))?),
        SweepParam::Seed => s.rng_seed = value,
        SweepParam::NearPercent => {
            if value > 100 {
                return Err(ConfigError::Invalid("near_percent must be at most 100".into()));
            }
            let total = (s.tiers.near_bytes + s.tiers.far_bytes) / HUGE_PAGE_BYTES;
            let near = total * value / 100;
            s.tiers.near_bytes = near * HUGE_PAGE_BYTES;
            s.tiers.far_bytes = (total - near) * HUGE_PAGE_BYTES;
        }
    }
    s.validate()?;
    Ok(s)
}

/// Runs every point of the sweep; points are independent and run in parallel under `exec`.
pub fn run_sweep(base: &Scenario, spec: &SweepSpec, exec: Exec) -> Result<Vec<(u64, RunReport)>, SimError> {
    let scenarios: Vec<(u64, Scenario)> =
        spec.values.iter().map(|&v| apply(base, spec.param, v).map(|s| (v, s))).collect::<Result<_, _>>()?;
    par::map(exec, &scenarios, |_, (v, s)| run_with(s, Exec::Sequential).map(|r| (*v, r))).into_iter().collect()
}

pub const SWEEP_HEADER: &str =
    "param,value,mean_near_residency_pct,final_near_residency_pct,mean_throughput_proxy,total_promoted_bytes,total_demoted_bytes,total_consolidation_ms";

pub fn sweep_csv(param: SweepParam, results: &[(u64, RunReport)]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for (v, r) in results {
        let s = &r.summary;
        writeln!(
            out,
            "{},{v},{:.6},{:.6},{:.6},{},{},{:.6}",
            param.name(),
            s.mean_near_residency_pct,
            s.final_near_residency_pct,
            s.mean_throughput_proxy,
            s.total_promoted_bytes,
            s.total_demoted_bytes,
            s.total_consolidation_ms
        )
        .unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn range_is_inclusive() {
        let s = parse_sweep("cl=10:290:40").unwrap();
        assert_eq!(s.param, SweepParam::Cl);
        assert_eq!(s.values, vec![10, 50, 90, 130, 170, 210, 250, 290]);
        assert_eq!(parse_sweep("cl=50,150,250,290").unwrap().values, vec![50, 150, 250, 290]);
    }

    #[test]
    fn malformed_sweeps_rejected() {
        for t in ["cl", "cl=1:2", "cl=5:1:1", "cl=1:9:0", "xyz=1", "cl=a,b"] {
            assert!(parse_sweep(t).is_err(), "{t}");
        }
    }
}
