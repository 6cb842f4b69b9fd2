//! Per-vehicle request probabilities: the federated sequential recommender,
//! plus frequency and oracle baselines.

pub mod hfl;
pub mod sasrec;

use ndarray::Array2;
use thiserror::Error;

use crate::objective::{DemandMatrix, ObjectiveError};

pub use hfl::{aggregate, hfl_round, HflPhase, HflSchedule, ParamMessage, VehicleNode};
pub use sasrec::{predict_demand, sample_negatives, sasrec_forward, sasrec_loss_grad, RequestHistory, SasrecParams, SasrecShape};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DemandError {
    #[error("file id {file} out of range (catalog has {file_count} files)")]
    FileOutOfRange { file: usize, file_count: usize },
    #[error("sequence length {got}, expected {expected}")]
    SequenceLength { expected: usize, got: usize },
    #[error("no position has a target")]
    EmptyTargets,
    #[error("parameter shape mismatch: expected {expected} values, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("nothing to aggregate")]
    NoParticipants,
    #[error("vehicle attached to unknown RSU {0}")]
    UnknownRsu(usize),
    #[error("invalid HFL schedule: {0}")]
    Schedule(&'static str),
    #[error("local training diverged (non-finite loss or gradient); try a smaller learning rate")]
    Diverged,
    #[error("checkpoint line {line}: {reason}")]
    Checkpoint { line: usize, reason: String },
    #[error(transparent)]
    Matrix(#[from] ObjectiveError),
}

/// Add-one smoothed empirical request frequency per vehicle.
pub fn frequency_demand(requests: &[Vec<usize>], file_count: usize) -> Result<DemandMatrix<f64>, DemandError> {
    let mut data = Array2::zeros((requests.len(), file_count));
    for (v, reqs) in requests.iter().enumerate() {
        let mut counts = vec![0usize; file_count];
        for &f in reqs {
            if f >= file_count {
                return Err(DemandError::FileOutOfRange { file: f, file_count });
            }
            counts[f] += 1;
        }
        let total = (reqs.len() + file_count) as f64;
        for (f, &c) in counts.iter().enumerate() {
            data[[v, f]] = ((c + 1) as f64 / total).min(1.0);
        }
    }
    Ok(DemandMatrix::new(data)?)
}

/// Indicator of each vehicle requesting each file within the horizon; the
/// caller passes only requests inside the horizon.
pub fn oracle_demand(future: &[Vec<usize>], file_count: usize) -> Result<DemandMatrix<f64>, DemandError> {
    let mut data = Array2::zeros((future.len(), file_count));
    for (v, reqs) in future.iter().enumerate() {
        for &f in reqs {
            if f >= file_count {
                return Err(DemandError::FileOutOfRange { file: f, file_count });
            }
            data[[v, f]] = 1.0;
        }
    }
    Ok(DemandMatrix::new(data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_is_add_one_smoothed() {
        let d = frequency_demand(&[vec![2; 10], vec![]], 3).unwrap();
        let v = d.view();
        assert!((v[[0, 2]] - 11.0 / 13.0).abs() < 1e-15);
        assert!((v[[0, 0]] - 1.0 / 13.0).abs() < 1e-15);
        assert!(v.row(1).iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn oracle_marks_requested_files() {
        let d = oracle_demand(&[vec![2, 5, 2], vec![]], 6).unwrap();
        assert_eq!(d.view().row(0).to_vec(), vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        assert!(d.view().row(1).iter().all(|&x| x == 0.0));
        assert!(oracle_demand(&[vec![6]], 6).is_err());
    }
}
