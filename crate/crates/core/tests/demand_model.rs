mod common;

use common::rng;
use hccn::demand::{
    hfl_round, predict_demand, sample_negatives, sasrec_forward, sasrec_loss_grad, HflPhase, HflSchedule, RequestHistory,
    SasrecParams, SasrecShape, VehicleNode,
};
use proptest::prelude::*;
use rand::Rng;

fn random_history(r: &mut impl Rng, len: usize, files: usize) -> RequestHistory {
    let n = r.random_range(2..=len);
    let reqs: Vec<usize> = (0..n).map(|_| r.random_range(0..files)).collect();
    RequestHistory::from_requests(&reqs, len, files).unwrap()
}

fn loss_at(p: &SasrecParams<f64>, h: &RequestHistory, t: &[Vec<usize>], n: &[Vec<usize>]) -> f64 {
    sasrec_loss_grad(p, h, t, n).unwrap().0
}

#[test]
fn loss_gradient_matches_central_differences() {
    let sh = SasrecShape { dim: 4, files: 6, positions: 3 };
    let mut r = rng(11);
    let mut checked = 0;
    while checked < 100 {
        let p = SasrecParams::<f64>::random(sh, 0.7, &mut r);
        let h = random_history(&mut r, 5, 6);
        let targets = h.next_targets(3, 2);
        if targets.iter().all(|t| t.is_empty()) {
            continue;
        }
        let negs = sample_negatives(&targets, 6, 3, &mut r);
        let (_, g) = sasrec_loss_grad(&p, &h, &targets, &negs).unwrap();
        let step = 1e-6;
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..p.as_slice().len() {
            let mut plus = p.clone();
            plus.as_mut_slice()[i] += step;
            let mut minus = p.clone();
            minus.as_mut_slice()[i] -= step;
            let fd = (loss_at(&plus, &h, &targets, &negs) - loss_at(&minus, &h, &targets, &negs)) / (2.0 * step);
            // The padding row is frozen, so its reported gradient is zero by design.
            let fd = if i < sh.dim { 0.0 } else { fd };
            num += (fd - g.as_slice()[i]).powi(2);
            den += fd.powi(2);
        }
        let rel = num.sqrt() / den.sqrt().max(1e-12);
        assert!(rel < 1e-6, "relative error {rel}");
        checked += 1;
    }
}

#[test]
fn future_positions_never_change_earlier_scores() {
    let sh = SasrecShape { dim: 8, files: 20, positions: 10 };
    let mut r = rng(5);
    for _ in 0..50 {
        let p = SasrecParams::<f64>::random(sh, 0.5, &mut r);
        let toks: Vec<u32> = (0..10).map(|_| r.random_range(0..=20)).collect();
        let base = p.scores(&toks).unwrap();
        let cut = r.random_range(0..9);
        let mut perturbed = toks.clone();
        for t in perturbed.iter_mut().skip(cut + 1) {
            *t = r.random_range(0..=20);
        }
        let after = p.scores(&perturbed).unwrap();
        for i in 0..=cut {
            assert_eq!(base[i], after[i]);
        }
    }
}

#[test]
fn permuting_files_permutes_scores() {
    let sh = SasrecShape { dim: 4, files: 6, positions: 4 };
    let mut r = rng(2);
    let p = SasrecParams::<f64>::random(sh, 0.6, &mut r);
    let h = RequestHistory::from_requests(&[1, 4, 1, 2, 0], 6, 6).unwrap();
    let (a, b) = (1usize, 4usize);
    let mut q = p.clone();
    let ea = p.embedding(a + 1).to_vec();
    let eb = p.embedding(b + 1).to_vec();
    q.embedding_mut(a + 1).copy_from_slice(&eb);
    q.embedding_mut(b + 1).copy_from_slice(&ea);
    let swapped: Vec<usize> = [1, 4, 1, 2, 0].iter().map(|&f| if f == a { b } else if f == b { a } else { f }).collect();
    let hs = RequestHistory::from_requests(&swapped, 6, 6).unwrap();
    let s1 = sasrec_forward(&p, &h).unwrap();
    let s2 = sasrec_forward(&q, &hs).unwrap();
    for (r1, r2) in s1.iter().zip(&s2) {
        for f in 0..6 {
            let g = if f == a { b } else if f == b { a } else { f };
            assert_eq!(r1[f], r2[g]);
        }
    }
}

fn toy_vehicles(count: usize, sh: SasrecShape, seed: u64) -> Vec<VehicleNode<f64>> {
    let mut r = rng(seed);
    let init = SasrecParams::<f64>::random(sh, 0.1, &mut r);
    (0..count)
        .map(|v| {
            // Each vehicle cycles through its own small set of files.
            let own: Vec<usize> = (0..3).map(|k| (v * 3 + k) % sh.files).collect();
            let reqs: Vec<usize> = (0..12).map(|i| own[i % 3]).collect();
            let h = RequestHistory::from_requests(&reqs, sh.positions + 2, sh.files).unwrap();
            VehicleNode::new(h, init.clone(), 2, 5, seed + v as u64)
        })
        .collect()
}

#[test]
fn padding_row_stays_zero_through_training() {
    let sh = SasrecShape { dim: 6, files: 12, positions: 6 };
    let mut vs = toy_vehicles(4, sh, 3);
    let s = HflSchedule { local_steps: 3, edge_rounds: 2, lr: 0.05, rounds: 60 };
    let attach = vec![Some(0), Some(0), Some(1), Some(1)];
    for k in 1..=s.rounds {
        hfl_round(&mut vs, &attach, &[0, 0], &s, k).unwrap();
    }
    for v in &vs {
        assert!(v.params().embedding(0).iter().all(|&x| x == 0.0));
    }
}

#[test]
fn cloud_boundary_matches_flat_mean() {
    let sh = SasrecShape { dim: 4, files: 8, positions: 4 };
    let mut vs = toy_vehicles(6, sh, 8);
    let s = HflSchedule { local_steps: 2, edge_rounds: 3, lr: 0.05, rounds: 30 };
    let attach = vec![Some(0), Some(0), Some(1), Some(1), Some(2), Some(2)];
    let cluster_of = [0, 0, 1];
    for k in 1..=s.rounds {
        let before: Vec<Vec<f64>> = vs.iter().map(|v| v.params().as_slice().to_vec()).collect();
        let phase = hfl_round(&mut vs, &attach, &cluster_of, &s, k).unwrap();
        if phase != HflPhase::Cloud {
            continue;
        }
        for members in [vec![0usize, 1, 2, 3], vec![4, 5]] {
            for i in 0..before[0].len() {
                let mean = members.iter().map(|&v| before[v][i]).sum::<f64>() / members.len() as f64;
                for &v in &members {
                    assert!((vs[v].params().as_slice()[i] - mean).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn two_level_mean_equals_flat_mean_for_equal_rsus() {
    let mut r = rng(4);
    let vals: Vec<f64> = (0..6).map(|_| r.random_range(-3.0..3.0)).collect();
    let rsu_means: Vec<f64> = vals.chunks(2).map(|c| (c[0] + c[1]) / 2.0).collect();
    let two_level = rsu_means.iter().sum::<f64>() / 3.0;
    let flat = vals.iter().sum::<f64>() / 6.0;
    assert!((two_level - flat).abs() < 1e-12);
}

#[test]
fn identical_models_aggregate_to_themselves() {
    let sh = SasrecShape { dim: 4, files: 5, positions: 3 };
    let mut vs = toy_vehicles(4, sh, 1);
    let s = HflSchedule { local_steps: 1, edge_rounds: 1, lr: 0.01, rounds: 1 };
    let before = vs[0].params().clone();
    hfl_round(&mut vs, &[Some(0), Some(1), Some(0), Some(1)], &[0, 0], &s, 1).unwrap();
    for v in &vs {
        for (a, b) in v.params().as_slice().iter().zip(before.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn uploads_carry_no_request_sequences() {
    let sh = SasrecShape { dim: 2, files: 9, positions: 4 };
    let vs = toy_vehicles(3, sh, 6);
    for (i, v) in vs.iter().enumerate() {
        let json = serde_json::to_string(&v.upload()).unwrap();
        let own: Vec<String> = (0..3).map(|k| ((i * 3 + k) % 9).to_string()).collect();
        assert!(!json.contains(&format!("[{}", own.join(","))));
        assert!(json.starts_with("{\"values\":["));
        let parsed: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed.as_object().unwrap().len(), 1);
        assert!(parsed["values"].as_array().unwrap().iter().all(|x| x.is_f64()));
    }
}

#[test]
fn local_training_halves_the_loss() {
    let sh = SasrecShape { dim: 8, files: 15, positions: 6 };
    let mut vs = toy_vehicles(5, sh, 21);
    let mut r = rng(99);
    let histories: Vec<RequestHistory> = (0..5)
        .map(|v| {
            let own: Vec<usize> = (0..3).map(|k| (v * 3 + k) % sh.files).collect();
            let reqs: Vec<usize> = (0..12).map(|i| own[i % 3]).collect();
            RequestHistory::from_requests(&reqs, sh.positions + 2, sh.files).unwrap()
        })
        .collect();
    let targets: Vec<Vec<Vec<usize>>> = histories.iter().map(|h| h.next_targets(sh.positions, 2)).collect();
    let negs: Vec<Vec<Vec<usize>>> = targets.iter().map(|t| sample_negatives(t, sh.files, 5, &mut r)).collect();
    let mean_loss = |ps: &[&SasrecParams<f64>]| -> f64 {
        ps.iter().enumerate().map(|(v, p)| loss_at(p, &histories[v], &targets[v], &negs[v])).sum::<f64>() / 5.0
    };
    let zero = SasrecParams::<f64>::zeros(sh);
    let baseline = mean_loss(&[&zero; 5]);
    for _ in 0..200 {
        for v in vs.iter_mut() {
            v.local_step(0.05).unwrap();
        }
    }
    let trained: Vec<&SasrecParams<f64>> = vs.iter().map(|v| v.params()).collect();
    let after = mean_loss(&trained);
    assert!(after <= 0.5 * baseline, "baseline {baseline}, after {after}");
}

#[test]
fn overfit_vehicle_predicts_its_file() {
    let sh = SasrecShape { dim: 8, files: 10, positions: 4 };
    let mut r = rng(17);
    let h = RequestHistory::from_requests(&[7; 6], 6, 10).unwrap();
    let mut v = VehicleNode::new(h.clone(), SasrecParams::<f64>::random(sh, 0.1, &mut r), 2, 9, 3);
    for _ in 0..300 {
        v.local_step(0.05).unwrap();
    }
    let pi = predict_demand(v.params(), &h).unwrap();
    let best = (0..10).max_by(|&a, &b| pi[a].total_cmp(&pi[b])).unwrap();
    assert_eq!(best, 7);
}

proptest! {
    #[test]
    fn predictions_are_probabilities(seed in 0u64..500, scale in 0.01f64..3.0) {
        let sh = SasrecShape { dim: 4, files: 7, positions: 5 };
        let mut r = rng(seed);
        let p = SasrecParams::<f64>::random(sh, scale, &mut r);
        let h = random_history(&mut r, 7, 7);
        let pi = predict_demand(&p, &h).unwrap();
        prop_assert_eq!(pi.len(), 7);
        prop_assert!(pi.iter().all(|x| (0.0..=1.0).contains(x)));
    }
}

#[test]
fn runaway_training_reports_divergence() {
    let sh = SasrecShape { dim: 6, files: 12, positions: 6 };
    let mut vs = toy_vehicles(1, sh, 17);
    let mut outcome = Ok(None);
    for _ in 0..200 {
        outcome = vs[0].local_step(1e6);
        if outcome.is_err() {
            break;
        }
    }
    assert!(matches!(outcome, Err(hccn::demand::DemandError::Diverged)), "{outcome:?}");
}
