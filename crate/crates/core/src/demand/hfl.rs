//! Two-level federated averaging: vehicle → RSU every κ₁ steps, RSU → MBS
//! every κ₁κ₂ steps.
//!
//! Roles only exchange [`ParamMessage`]s. A [`VehicleNode`] keeps its request
//! history private; nothing in this module reads it from outside.

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::sasrec::{predict_demand, sample_negatives, sasrec_loss_grad, RequestHistory, SasrecParams, SasrecShape};
use super::DemandError;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HflSchedule {
    /// κ₁: local updates per RSU aggregation.
    pub local_steps: usize,
    /// κ₂: RSU aggregations per MBS aggregation.
    pub edge_rounds: usize,
    pub lr: f64,
    /// Global steps κ to run.
    pub rounds: usize,
}

impl HflSchedule {
    pub fn validate(&self) -> Result<(), DemandError> {
        if self.local_steps == 0 || self.edge_rounds == 0 {
            return Err(DemandError::Schedule("local_steps and edge_rounds must be at least 1"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(DemandError::Schedule("learning rate must be positive"));
        }
        Ok(())
    }

    pub fn phase(&self, kappa: usize) -> HflPhase {
        if kappa % self.local_steps != 0 {
            HflPhase::Local
        } else if kappa % (self.local_steps * self.edge_rounds) != 0 {
            HflPhase::Edge
        } else {
            HflPhase::Cloud
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HflPhase {
    Local,
    Edge,
    Cloud,
}

/// The only payload that crosses a role boundary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamMessage<T> {
    pub values: Vec<T>,
}

/// Local training state of one vehicle.
#[derive(Debug, Clone)]
pub struct VehicleNode<T> {
    history: RequestHistory,
    params: SasrecParams<T>,
    ahead: usize,
    negatives: usize,
    rng: ChaCha8Rng,
}

impl<T: Scalar> VehicleNode<T> {
    /// `ahead` is I', the number of upcoming requests each position is trained to score.
    pub fn new(history: RequestHistory, params: SasrecParams<T>, ahead: usize, negatives: usize, seed: u64) -> Self {
        Self { history, params, ahead, negatives, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn params(&self) -> &SasrecParams<T> {
        &self.params
    }

    pub fn shape(&self) -> SasrecShape {
        self.params.shape()
    }

    /// Replaces the vehicle's own history with fresher requests.
    pub fn observe(&mut self, history: RequestHistory) {
        self.history = history;
    }

    /// One gradient step on the local loss. Returns the pre-step loss, or
    /// `None` when the history has nothing to learn from yet.
    pub fn local_step(&mut self, lr: T) -> Result<Option<T>, DemandError> {
        let sh = self.params.shape();
        let targets = self.history.next_targets(sh.positions, self.ahead);
        if targets.iter().all(|t| t.is_empty()) {
            return Ok(None);
        }
        let negatives = sample_negatives(&targets, sh.files, self.negatives, &mut self.rng);
        let (loss, grad) = sasrec_loss_grad(&self.params, &self.history, &targets, &negatives)?;
        if !loss.is_finite() || !grad.is_finite() {
            return Err(DemandError::Diverged);
        }
        self.params.descend(&grad, lr)?;
        Ok(Some(loss))
    }

    pub fn upload(&self) -> ParamMessage<T> {
        ParamMessage { values: self.params.as_slice().to_vec() }
    }

    pub fn download(&mut self, msg: &ParamMessage<T>) -> Result<(), DemandError> {
        self.params = SasrecParams::from_flat(self.params.shape(), msg.values.clone())?;
        Ok(())
    }

    pub fn predict(&self) -> Result<Vec<T>, DemandError> {
        predict_demand(&self.params, &self.history)
    }
}

/// Unweighted element-wise mean.
pub fn aggregate<T: Scalar>(msgs: &[ParamMessage<T>]) -> Result<ParamMessage<T>, DemandError> {
    let first = msgs.first().ok_or(DemandError::NoParticipants)?;
    let n = first.values.len();
    let mut sum = vec![T::zero(); n];
    for m in msgs {
        if m.values.len() != n {
            return Err(DemandError::Shape { expected: n, got: m.values.len() });
        }
        sum.iter_mut().zip(&m.values).for_each(|(s, &x)| *s = *s + x);
    }
    let count = T::of_usize(msgs.len());
    Ok(ParamMessage { values: sum.into_iter().map(|s| s / count).collect() })
}

/// Advances every vehicle by global step `kappa` (1-based).
///
/// `attachment[v]` is the RSU vehicle `v` is attached to, or `None` if it is
/// out of coverage; absent vehicles neither train nor take part in
/// aggregation. `cluster_of[r]` is the MBS of RSU `r`.
pub fn hfl_round<T: Scalar>(
    vehicles: &mut [VehicleNode<T>],
    attachment: &[Option<usize>],
    cluster_of: &[usize],
    schedule: &HflSchedule,
    kappa: usize,
) -> Result<HflPhase, DemandError> {
    schedule.validate()?;
    if attachment.len() != vehicles.len() {
        return Err(DemandError::Shape { expected: vehicles.len(), got: attachment.len() });
    }
    if let Some(first) = vehicles.first() {
        let sh = first.shape();
        if let Some(v) = vehicles.iter().find(|v| v.shape() != sh) {
            return Err(DemandError::Shape { expected: first.params.as_slice().len(), got: v.params.as_slice().len() });
        }
    }
    if let Some(&r) = attachment.iter().flatten().find(|&&r| r >= cluster_of.len()) {
        return Err(DemandError::UnknownRsu(r));
    }
    let phase = schedule.phase(kappa);
    match phase {
        HflPhase::Local => {
            let lr = T::of(schedule.lr);
            vehicles
                .par_iter_mut()
                .zip(attachment.par_iter())
                .filter(|(_, a)| a.is_some())
                .map(|(v, _)| v.local_step(lr).map(|_| ()))
                .collect::<Result<(), _>>()?;
        }
        HflPhase::Edge => {
            for r in 0..cluster_of.len() {
                let members: Vec<usize> = (0..vehicles.len()).filter(|&v| attachment[v] == Some(r)).collect();
                average_into(vehicles, &members, || warn!("RSU {r} has no participating vehicles"))?;
            }
        }
        HflPhase::Cloud => {
            let mbs_count = cluster_of.iter().copied().max().map_or(0, |m| m + 1);
            for m in 0..mbs_count {
                let members: Vec<usize> =
                    (0..vehicles.len()).filter(|&v| attachment[v].is_some_and(|r| cluster_of[r] == m)).collect();
                average_into(vehicles, &members, || warn!("MBS {m} has no participating vehicles"))?;
            }
        }
    }
    Ok(phase)
}

fn average_into<T: Scalar>(vehicles: &mut [VehicleNode<T>], members: &[usize], on_empty: impl FnOnce()) -> Result<(), DemandError> {
    if members.is_empty() {
        on_empty();
        return Ok(());
    }
    let uploads: Vec<ParamMessage<T>> = members.iter().map(|&v| vehicles[v].upload()).collect();
    let mean = aggregate(&uploads)?;
    for &v in members {
        vehicles[v].download(&mean)?;
    }
    Ok(())
}
