//! Residence-time prediction from RSU attachment sequences with a
//! prediction-by-partial-matching (PPM) model.
//!
//! Symbols are `0` for "not attached to any RSU" and `r + 1` for RSU `r`.

use std::collections::HashMap;

use ndarray::Array2;
use thiserror::Error;

use crate::objective::{ObjectiveError, ResidenceMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MobilityError {
    #[error("no trace days to train on")]
    EmptyTraces,
    #[error("PPM order must be at least 1")]
    ZeroOrder,
    #[error("day {day} has {got} slots, expected {expected}")]
    DayLength { day: usize, expected: usize, got: usize },
    #[error("symbol {symbol} is not a valid RSU attachment (RSU count {rsu_count})")]
    BadSymbol { symbol: u32, rsu_count: usize },
    #[error("future trace covers {got} slots, horizon is {horizon}")]
    ShortFuture { horizon: usize, got: usize },
    #[error("residence vector {index} has length {got}, expected {expected}")]
    Dimension { index: usize, expected: usize, got: usize },
    #[error(transparent)]
    Residence(#[from] ObjectiveError),
}

/// One vehicle's attachment history: a list of days, each `slots_per_day` long.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MobilityTrace {
    days: Vec<Vec<u32>>,
    slots_per_day: usize,
}

impl MobilityTrace {
    pub fn new(days: Vec<Vec<u32>>, slots_per_day: usize, rsu_count: usize) -> Result<Self, MobilityError> {
        for (d, day) in days.iter().enumerate() {
            if day.len() != slots_per_day {
                return Err(MobilityError::DayLength { day: d, expected: slots_per_day, got: day.len() });
            }
            if let Some(&symbol) = day.iter().find(|&&s| s as usize > rsu_count) {
                return Err(MobilityError::BadSymbol { symbol, rsu_count });
            }
        }
        Ok(Self { days, slots_per_day })
    }

    /// Truncates or pads (with "absent") each day to `slots_per_day`.
    pub fn normalized(days: Vec<Vec<u32>>, slots_per_day: usize, rsu_count: usize) -> Result<Self, MobilityError> {
        let days = days
            .into_iter()
            .map(|mut d| {
                d.resize(slots_per_day, 0);
                d
            })
            .collect();
        Self::new(days, slots_per_day, rsu_count)
    }

    pub fn days(&self) -> &[Vec<u32>] {
        &self.days
    }

    pub fn slots_per_day(&self) -> usize {
        self.slots_per_day
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpmModel {
    order: usize,
    rsu_count: usize,
    /// Context (oldest first, length 1..=order) to next-symbol counts of length `rsu_count + 1`.
    counts: HashMap<Vec<u32>, Vec<u64>>,
}

/// Counts every (context, next) pair with context lengths `1..=order`
/// inside each day of every trace.
pub fn train_ppm(traces: &[MobilityTrace], order: usize, rsu_count: usize) -> Result<PpmModel, MobilityError> {
    if order == 0 {
        return Err(MobilityError::ZeroOrder);
    }
    if traces.iter().all(|t| t.days.is_empty()) {
        return Err(MobilityError::EmptyTraces);
    }
    let mut model = PpmModel { order, rsu_count, counts: HashMap::new() };
    for day in traces.iter().flat_map(|t| t.days.iter()) {
        if let Some(&symbol) = day.iter().find(|&&s| s as usize > rsu_count) {
            return Err(MobilityError::BadSymbol { symbol, rsu_count });
        }
        for i in 1..day.len() {
            for len in 1..=order.min(i) {
                let ctx = day[i - len..i].to_vec();
                model.counts.entry(ctx).or_insert_with(|| vec![0; rsu_count + 1])[day[i] as usize] += 1;
            }
        }
    }
    Ok(model)
}

impl PpmModel {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn rsu_count(&self) -> usize {
        self.rsu_count
    }

    pub fn context_count(&self) -> usize {
        self.counts.len()
    }

    /// Next-symbol distribution from the longest seen suffix of `context`;
    /// uniform over all `R + 1` symbols when no suffix was seen.
    pub fn distribution(&self, context: &[u32]) -> Vec<f64> {
        let longest = self.order.min(context.len());
        for len in (1..=longest).rev() {
            if let Some(counts) = self.counts.get(&context[context.len() - len..]) {
                let total: u64 = counts.iter().sum();
                if total > 0 {
                    return counts.iter().map(|&c| c as f64 / total as f64).collect();
                }
            }
        }
        vec![1.0 / (self.rsu_count + 1) as f64; self.rsu_count + 1]
    }
}

/// Expected slots per RSU over the next `horizon` slots, following the
/// most likely symbol at each step (ties to the lower id). Mass on the
/// "absent" symbol is dropped, so entries sum to at most `horizon`.
pub fn predict_residence(model: &PpmModel, intraday: &[u32], horizon: usize) -> Vec<f64> {
    let mut out = vec![0.0; model.rsu_count];
    let mut context: Vec<u32> = intraday[intraday.len().saturating_sub(model.order)..].to_vec();
    for _ in 0..horizon {
        let dist = model.distribution(&context);
        for (r, slot) in out.iter_mut().enumerate() {
            *slot += dist[r + 1];
        }
        let next = dist.iter().enumerate().fold(0, |best, (s, &p)| if p > dist[best] { s } else { best });
        context.push(next as u32);
        if context.len() > model.order {
            context.remove(0);
        }
    }
    out
}

/// Per-RSU slot counts of the actual next `horizon` slots.
pub fn oracle_residence(future: &[u32], horizon: usize, rsu_count: usize) -> Result<Vec<f64>, MobilityError> {
    if future.len() < horizon {
        return Err(MobilityError::ShortFuture { horizon, got: future.len() });
    }
    let mut out = vec![0.0; rsu_count];
    for &s in &future[..horizon] {
        match s as usize {
            0 => {}
            r if r <= rsu_count => out[r - 1] += 1.0,
            _ => return Err(MobilityError::BadSymbol { symbol: s, rsu_count }),
        }
    }
    Ok(out)
}

/// The no-information baseline: `horizon / (R + 1)` in every RSU.
pub fn uniform_residence(rsu_count: usize, horizon: usize) -> Vec<f64> {
    vec![horizon as f64 / (rsu_count + 1) as f64; rsu_count]
}

/// Stacks per-vehicle residence vectors into a V×R matrix.
pub fn build_residence_matrix(rows: &[Vec<f64>], rsu_count: usize, horizon: Option<f64>) -> Result<ResidenceMatrix<f64>, MobilityError> {
    for (i, row) in rows.iter().enumerate() {
        if row.len() != rsu_count {
            return Err(MobilityError::Dimension { index: i, expected: rsu_count, got: row.len() });
        }
    }
    let data = Array2::from_shape_fn((rows.len(), rsu_count), |(v, r)| rows[v][r]);
    Ok(ResidenceMatrix::new(data, horizon)?)
}

/// Mean absolute error between two residence vectors.
pub fn mean_abs_error(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}
