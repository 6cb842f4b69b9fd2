//! Capacity sweeps and the results CSV.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;

use super::engine::{predict_all, run_with_inputs, Policy, RunReport};
use super::scenario::Scenario;
use super::SimError;
use crate::config::ScenarioConfig;
use crate::topology::build_topology;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    RsuCap,
    MbsCap,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::RsuCap => "rsu_cap",
            SweepAxis::MbsCap => "mbs_cap",
        }
    }

    /// Sets every node on this axis to `value`.
    pub fn apply(self, config: &mut ScenarioConfig, value: f64) {
        let c = &mut config.capacities;
        match self {
            SweepAxis::RsuCap => {
                c.rsu_cap = value;
                if let Some(v) = c.rsu_caps.as_mut() {
                    v.iter_mut().for_each(|x| *x = value);
                }
            }
            SweepAxis::MbsCap => {
                c.mbs_cap = value;
                if let Some(v) = c.mbs_caps.as_mut() {
                    v.iter_mut().for_each(|x| *x = value);
                }
            }
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, SimError> {
        match s {
            "rsu_cap" => Ok(SweepAxis::RsuCap),
            "mbs_cap" => Ok(SweepAxis::MbsCap),
            _ => Err(SimError::Trace(format!("unknown sweep axis `{s}` (expected rsu_cap or mbs_cap)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub policy: Policy,
    pub axis_value: f64,
    /// `None` when no request was measured.
    pub hit_ratio: Option<f64>,
    pub avg_delay: Option<f64>,
    pub episodes: usize,
    pub requests: usize,
    pub solver_iters: usize,
    pub seed: u64,
}

impl SweepRow {
    pub fn from_report(report: &RunReport, axis_value: f64) -> Vec<SweepRow> {
        report
            .metrics
            .iter()
            .map(|m| SweepRow {
                policy: m.policy,
                axis_value,
                hit_ratio: m.hit_ratio(),
                avg_delay: m.avg_delay(),
                episodes: m.episodes,
                requests: m.requests,
                solver_iters: m.solver_iters,
                seed: report.seed,
            })
            .collect()
    }
}

/// Fixed-point text with six significant digits.
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x.is_finite() { "0.00000".into() } else { x.to_string() };
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (5 - magnitude).max(0) as usize;
    let s = format!("{x:.decimals$}");
    // Rounding can carry into a new leading digit (9.999995 -> 10.00000).
    let digits = s.chars().filter(|c| c.is_ascii_digit()).skip_while(|&c| c == '0').count();
    if digits > 6 && decimals > 0 {
        let decimals = decimals - 1;
        format!("{x:.decimals$}")
    } else {
        s
    }
}

pub const CSV_HEADER: &str = "policy,axis_value,hit_ratio,avg_delay_s,episodes,requests,solver_iters,seed";

/// Writes the results CSV; metrics without measured requests are written as `NA`.
pub fn write_rows_csv<W: Write>(rows: &[SweepRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    let opt = |x: Option<f64>| x.map_or_else(|| "NA".to_string(), format_sig6);
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.policy,
            format_sig6(r.axis_value),
            opt(r.hit_ratio),
            opt(r.avg_delay),
            r.episodes,
            r.requests,
            r.solver_iters,
            r.seed
        )?;
    }
    Ok(())
}

pub fn write_rows_csv_string(rows: &[SweepRow]) -> String {
    let mut buf = Vec::new();
    write_rows_csv(rows, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("ascii output")
}

/// Runs the scenario once per axis value. Traces and predictions do not
/// depend on capacities, so they are computed once and shared; the values
/// then run in parallel. Rows come out in value order, then policy order.
pub fn sweep(
    template: &ScenarioConfig,
    scenario: &Scenario,
    axis: SweepAxis,
    values: &[f64],
    policies: &[Policy],
) -> Result<Vec<SweepRow>, SimError> {
    if values.is_empty() {
        return Err(SimError::EmptySweep);
    }
    let inputs = predict_all(scenario, template)?;
    let per_value: Vec<Vec<SweepRow>> = values
        .par_iter()
        .map(|&value| {
            let mut config = template.clone();
            axis.apply(&mut config, value);
            config.validate()?;
            let mut sc = scenario.clone();
            sc.network = build_topology(&config)?;
            let report = run_with_inputs(&sc, &inputs, policies, &config)?;
            Ok(SweepRow::from_report(&report, value))
        })
        .collect::<Result<_, SimError>>()?;
    Ok(per_value.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(format_sig6(0.5234121), "0.523412");
        assert_eq!(format_sig6(12.345678), "12.3457");
        assert_eq!(format_sig6(200.0), "200.000");
        assert_eq!(format_sig6(0.0), "0.00000");
        assert_eq!(format_sig6(9.9999996), "10.0000");
        assert_eq!(format_sig6(1234567.0), "1234567");
    }
}
