//! Acceptance suite: one PASS/FAIL line per criterion, then a summary.
//!
//! Exits 0 so that a failing criterion is reported rather than hidden behind
//! a test-runner abort; set `HCCN_ACCEPTANCE_STRICT=1` to exit 1 on any FAIL.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::process::Command;
use std::time::{Duration, Instant};

use common::*;
use hccn::config::DemandPredictorName;
use hccn::delay::{case_delays, resolve_source, SourceTier};
use hccn::demand::{
    hfl_round, sample_negatives, sasrec_loss_grad, HflPhase, HflSchedule, RequestHistory, SasrecParams, SasrecShape,
    VehicleNode,
};
use hccn::objective::{constraints, CostModel, ProblemInstance, RelaxedPlacement};
use hccn::sim::{generate_scenario, predict_all, run_with_inputs, Policy, RunReport};
use hccn::solver::{extended_objective, round_placement, solve, Solver, SolverConfig, SolverMode};
use hccn::topology::{Capacities, Catalog, Network};
use hccn::{Placement, ScenarioConfig};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

struct Outcome {
    id: usize,
    pass: bool,
    detail: String,
    elapsed: Duration,
}

/// Feasibility tally for criterion 5, fed by every placement the suite produces.
#[derive(Default)]
struct Feasibility {
    checked: usize,
    violations: usize,
}

impl Feasibility {
    fn check(&mut self, p: &Placement, cat: &Catalog<f64>, caps: &Capacities<f64>) {
        self.checked += 1;
        self.violations += !p.is_feasible(cat, caps) as usize;
    }

    fn add_report(&mut self, report: &RunReport, episodes: usize, policies: usize) {
        self.checked += episodes * policies;
        self.violations += report.infeasible_placements;
    }
}

fn run(id: usize, limit: Option<Duration>, f: impl FnOnce() -> (bool, String)) -> Outcome {
    let start = Instant::now();
    let (ok, mut detail) = f();
    let elapsed = start.elapsed();
    let in_time = limit.is_none_or(|l| elapsed <= l);
    if !in_time {
        detail.push_str(&format!("; over the {:.0} s limit", limit.unwrap().as_secs_f64()));
    }
    let out = Outcome { id, pass: ok && in_time, detail, elapsed };
    println!(
        "criterion {:>2}: {} ({:.1} s) {}",
        out.id,
        if out.pass { "PASS" } else { "FAIL" },
        out.elapsed.as_secs_f64(),
        out.detail
    );
    out
}

fn secs(s: u64) -> Option<Duration> {
    Some(Duration::from_secs(s))
}

fn unflatten(v: &[f64], r: usize, m: usize, f: usize) -> RelaxedPlacement<f64> {
    RelaxedPlacement {
        x: Array2::from_shape_vec((r, f), v[..r * f].to_vec()).unwrap(),
        y: Array2::from_shape_vec((m, f), v[r * f..].to_vec()).unwrap(),
    }
}

fn exclusivity() -> (bool, String) {
    let mut rng = rng(101);
    let (mut cells, mut bad) = (0usize, 0usize);
    for mbs in 1..=2 {
        for rsus in 0..=4 {
            for files in 1..=4 {
                if (rsus + mbs) * files > 12 {
                    continue;
                }
                let topo = random_topology(&mut rng, rsus, mbs, table1_rates());
                let cat = Catalog::uniform(files, 1.0).unwrap();
                for p in all_placements(rsus, mbs, files) {
                    for r in 0..rsus {
                        for f in 0..files {
                            let d = case_delays(&p, r, f, &topo, &cat).unwrap();
                            let nonzero = (1..6).filter(|&i| d[i] != 0.0).count();
                            let local = resolve_source(&p, r, f, &topo) == SourceTier::LocalRsu;
                            cells += 1;
                            bad += !(if local { nonzero == 0 } else { nonzero == 1 }) as usize;
                        }
                    }
                }
            }
        }
    }
    (bad == 0, format!("{bad} violations over {cells} (placement, r, f) cells"))
}

/// Sum of the literal case-delay products; the oracle for the fast gradient.
fn literal_cost(inst: &ProblemInstance<f64>, rp: &RelaxedPlacement<f64>) -> f64 {
    let (x, y) = rp.probabilities();
    let rho = inst.residence.view().t().dot(inst.demand.view());
    let mut total = 0.0;
    for r in 0..inst.rsu_count() {
        for f in 0..inst.file_count() {
            let d = hccn::delay::relaxed_case_delays(x.view(), y.view(), r, f, &inst.network.topology, &inst.network.catalog);
            total += rho[(r, f)] * d.iter().sum::<f64>();
        }
    }
    total
}

fn gradients() -> (bool, String) {
    let mut rng = rng(102);
    let (mut worst_w, mut worst_pq, mut worst_rec) = (0.0f64, 0.0f64, 0.0f64);
    let instances = 100;
    let points = 10;
    for _ in 0..instances {
        let spec = InstanceSpec {
            rsus: rng.random_range(1..=4),
            mbs: rng.random_range(1..=3),
            files: rng.random_range(1..=4),
            vehicles: rng.random_range(1..=4),
            unit_sizes: false,
        };
        let rates = ordered_rates(&mut rng);
        let inst = random_instance(&mut rng, &spec, rates);
        let (r, m, f) = (inst.rsu_count(), inst.mbs_count(), inst.file_count());
        let (cat, caps) = (&inst.network.catalog, &inst.network.capacities);
        let model = CostModel::new(&inst);
        for _ in 0..points {
            let p: Vec<f64> = (0..inst.variable_count()).map(|_| rng.random_range(-3.0..3.0)).collect();
            let rp = unflatten(&p, r, m, f);
            let g = model.cost_gradient(&rp).unwrap();
            let analytic: Vec<f64> = g.x.iter().chain(g.y.iter()).copied().collect();
            let fd = fd_gradient(|q| literal_cost(&inst, &unflatten(q, r, m, f)), &p, 1e-5);
            worst_w = worst_w.max(rel_err(&analytic, &fd));
            let eval = constraints(&rp, cat, caps).unwrap();
            for node in 0..r + m {
                let value = |q: &[f64]| {
                    let c = constraints(&unflatten(q, r, m, f), cat, caps).unwrap();
                    if node < r {
                        c.rsu_values[node]
                    } else {
                        c.mbs_values[node - r]
                    }
                };
                let fd = fd_gradient(value, &p, 1e-5);
                let mut analytic = vec![0.0; p.len()];
                for j in 0..f {
                    if node < r {
                        analytic[node * f + j] = eval.rsu_grads[(node, j)];
                    } else {
                        analytic[r * f + (node - r) * f + j] = eval.mbs_grads[(node - r, j)];
                    }
                }
                worst_pq = worst_pq.max(rel_err(&analytic, &fd));
            }
        }
    }
    let sh = SasrecShape { dim: 4, files: 6, positions: 3 };
    let mut done = 0;
    while done < instances {
        let n = rng.random_range(2..=5);
        let reqs: Vec<usize> = (0..n).map(|_| rng.random_range(0..6)).collect();
        let h = RequestHistory::from_requests(&reqs, 5, 6).unwrap();
        let targets = h.next_targets(3, 2);
        if targets.iter().all(|t| t.is_empty()) {
            continue;
        }
        let negs = sample_negatives(&targets, 6, 3, &mut rng);
        for _ in 0..points {
            let params = SasrecParams::<f64>::random(sh, 0.7, &mut rng);
            let (_, g) = sasrec_loss_grad(&params, &h, &targets, &negs).unwrap();
            let loss = |q: &[f64]| {
                let p = SasrecParams::from_flat(sh, q.to_vec()).unwrap();
                sasrec_loss_grad(&p, &h, &targets, &negs).unwrap().0
            };
            let mut fd = fd_gradient(loss, params.as_slice(), 1e-6);
            // The padding embedding is frozen; its gradient is zero by construction.
            fd[..sh.dim].iter_mut().for_each(|x| *x = 0.0);
            worst_rec = worst_rec.max(rel_err(g.as_slice(), &fd));
        }
        done += 1;
    }
    let ok = worst_w < 1e-6 && worst_pq < 1e-6 && worst_rec < 1e-6;
    (
        ok,
        format!(
            "worst relative error W {worst_w:.1e}, P/Q {worst_pq:.1e}, SASRec {worst_rec:.1e} ({instances} instances x {points} points each)"
        ),
    )
}

/// At most 14 binary variables, unit sizes, tight integer capacities.
fn tiny_instance(rng: &mut ChaCha8Rng) -> ProblemInstance<f64> {
    let mbs = rng.random_range(1..=2);
    let rsus = rng.random_range(1..=3);
    let files = (14 / (rsus + mbs)).min(5);
    let spec = InstanceSpec { rsus, mbs, files, vehicles: rng.random_range(1..=4), unit_sizes: true };
    let inst = random_instance(rng, &spec, table1_rates());
    let caps = Capacities::new(
        (0..rsus).map(|_| rng.random_range(1..files) as f64).collect(),
        (0..mbs).map(|_| rng.random_range(1..files) as f64).collect(),
    )
    .unwrap();
    let net = Network::new(inst.network.topology.clone(), inst.network.catalog.clone(), caps).unwrap();
    ProblemInstance::new(net, inst.residence.clone(), inst.demand.clone()).unwrap()
}

fn optimality_gap(feas: &mut Feasibility) -> (bool, String) {
    let mut rng = rng(103);
    let (mut within, mut below) = (0, 0);
    let mut worst: f64 = 1.0;
    for i in 0..50 {
        let inst = tiny_instance(&mut rng);
        let report = solve(&inst, &SolverConfig { seed: i, ..SolverConfig::default() }).unwrap();
        feas.check(&report.placement, &inst.network.catalog, &inst.network.capacities);
        let opt = brute_optimum(&inst);
        let got = brute_cost(&inst, &report.placement);
        let ratio = if opt > 0.0 { got / opt } else if got == 0.0 { 1.0 } else { f64::INFINITY };
        worst = worst.max(ratio);
        within += (ratio <= 1.05) as usize;
        below += (got < opt * (1.0 - 1e-12)) as usize;
    }
    (within >= 45 && below == 0, format!("{within}/50 within 1.05x of the optimum (need 45), {below} below it, worst ratio {worst:.3}"))
}

fn strict_descent(feas: &mut Feasibility) -> (bool, String) {
    let mut rng = rng(104);
    let mut rises = 0;
    let mut worst: f64 = f64::NEG_INFINITY;
    for seed in 0..10 {
        let spec = InstanceSpec { rsus: 6, mbs: 2, files: 30, vehicles: 10, unit_sizes: false };
        let inst = random_instance(&mut rng, &spec, table1_rates());
        let cfg = SolverConfig { seed, mode: SolverMode::StrictDescent, ..SolverConfig::default() };
        let solver = Solver::new(&inst, cfg).unwrap();
        let mut state = solver.initial_state();
        for _ in 0..100 {
            let before = state.rp.clone();
            solver.step(&mut state).unwrap();
            let beta = state.history.last().unwrap().beta;
            let l_old = extended_objective(solver.model(), &before, beta).unwrap();
            let l_new = extended_objective(solver.model(), &state.rp, beta).unwrap();
            worst = worst.max(l_new - l_old);
            rises += (l_new > l_old + 1e-12) as usize;
        }
        let (cat, caps) = (&inst.network.catalog, &inst.network.capacities);
        feas.check(&round_placement(&state.rp, cat, caps), cat, caps);
    }
    (rises == 0, format!("{rises} increases over 1000 steps, largest change {worst:.2e}"))
}

fn toy_vehicles(count: usize, sh: SasrecShape, seed: u64) -> Vec<VehicleNode<f64>> {
    let mut r = rng(seed);
    let init = SasrecParams::<f64>::random(sh, 0.1, &mut r);
    (0..count)
        .map(|v| {
            let own: Vec<usize> = (0..3).map(|k| (v * 3 + k) % sh.files).collect();
            let reqs: Vec<usize> = (0..12).map(|i| own[i % 3]).collect();
            let h = RequestHistory::from_requests(&reqs, sh.positions + 2, sh.files).unwrap();
            VehicleNode::new(h, init.clone(), 2, 5, seed + v as u64)
        })
        .collect()
}

fn hfl_identity() -> (bool, String) {
    let sh = SasrecShape { dim: 4, files: 8, positions: 4 };
    let mut vs = toy_vehicles(7, sh, 105);
    let s = HflSchedule { local_steps: 2, edge_rounds: 3, lr: 0.05, rounds: 60 };
    // Vehicle 6 is out of coverage and must not enter any mean.
    let attach = vec![Some(0), Some(0), Some(1), Some(1), Some(2), Some(2), None];
    let cluster_of = [0, 0, 1];
    let (mut boundaries, mut worst) = (0, 0.0f64);
    for k in 1..=s.rounds {
        let before: Vec<Vec<f64>> = vs.iter().map(|v| v.params().as_slice().to_vec()).collect();
        if hfl_round(&mut vs, &attach, &cluster_of, &s, k).unwrap() != HflPhase::Cloud {
            continue;
        }
        boundaries += 1;
        for members in [vec![0usize, 1, 2, 3], vec![4, 5]] {
            for i in 0..before[0].len() {
                let mean = members.iter().map(|&v| before[v][i]).sum::<f64>() / members.len() as f64;
                for &v in &members {
                    worst = worst.max((vs[v].params().as_slice()[i] - mean).abs());
                }
            }
        }
    }
    let mut same = toy_vehicles(4, sh, 106);
    let before = same[0].params().clone();
    let one = HflSchedule { local_steps: 1, edge_rounds: 1, lr: 0.01, rounds: 1 };
    hfl_round(&mut same, &[Some(0), Some(1), Some(0), Some(1)], &[0, 0], &one, 1).unwrap();
    let identity = same
        .iter()
        .flat_map(|v| v.params().as_slice().iter().zip(before.as_slice()).map(|(a, b)| (a - b).abs()))
        .fold(0.0f64, f64::max);
    (
        boundaries > 0 && worst < 1e-12 && identity < 1e-12,
        format!("{boundaries} cloud boundaries, max deviation from flat mean {worst:.1e}, identity drift {identity:.1e}"),
    )
}

fn causal_mask() -> (bool, String) {
    let sh = SasrecShape { dim: 8, files: 20, positions: 10 };
    let mut r = rng(107);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let p = SasrecParams::<f64>::random(sh, 0.5, &mut r);
        let toks: Vec<u32> = (0..10).map(|_| r.random_range(0..=20)).collect();
        let base = p.scores(&toks).unwrap();
        let cut = r.random_range(0..9);
        let mut perturbed = toks.clone();
        perturbed.iter_mut().skip(cut + 1).for_each(|t| *t = r.random_range(0..=20));
        let after = p.scores(&perturbed).unwrap();
        for i in 0..=cut {
            for (a, b) in base[i].iter().zip(&after[i]) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    (worst == 0.0, format!("max abs change at earlier positions {worst:e} over 200 perturbations"))
}

struct SeedRun {
    seed: u64,
    report: RunReport,
}

fn demo_runs(seeds: std::ops::RangeInclusive<u64>) -> Vec<SeedRun> {
    let config = ScenarioConfig::example();
    let seeds: Vec<u64> = seeds.collect();
    seeds
        .par_iter()
        .map(|&seed| {
            let sc = generate_scenario(&config, seed).unwrap();
            let inputs = predict_all(&sc, &config).unwrap();
            SeedRun { seed, report: run_with_inputs(&sc, &inputs, &Policy::ALL, &config).unwrap() }
        })
        .collect()
}

fn policy_ordering(runs: &[SeedRun]) -> (bool, String) {
    use Policy::*;
    let get = |r: &RunReport, p: Policy| {
        let m = r.metric(p).unwrap();
        (m.hit_ratio().unwrap_or(0.0), m.avg_delay().unwrap_or(0.0))
    };
    let chain = [OracleCooperative, PredictedCooperative, Noncooperative, Random];
    let mut parts = Vec::new();
    let mut ok = true;
    for w in chain.windows(2) {
        let hit = runs.iter().filter(|s| get(&s.report, w[0]).0 >= get(&s.report, w[1]).0).count();
        let delay = runs.iter().filter(|s| get(&s.report, w[0]).1 <= get(&s.report, w[1]).1).count();
        ok &= hit >= 16 && delay >= 16;
        parts.push(format!("{}>={} hit {hit}/20 delay {delay}/20", w[0], w[1]));
    }
    let lru = runs.iter().filter(|s| get(&s.report, PredictedCooperative).0 - get(&s.report, Lru).0 >= 0.05).count();
    ok &= lru >= 16;
    parts.push(format!("predicted-cooperative >= lru + 5pp {lru}/20"));
    let mean = |p: Policy| {
        let (h, d) = runs.iter().fold((0.0, 0.0), |acc, s| {
            let (h, d) = get(&s.report, p);
            (acc.0 + h, acc.1 + d)
        });
        format!("{} {:.3}/{:.4}s", p, h / runs.len() as f64, d / runs.len() as f64)
    };
    parts.push(format!("mean hit/delay: {}", Policy::ALL.map(mean).join(", ")));
    (ok, parts.join("; "))
}

fn capacity_monotonicity(feas: &mut Feasibility) -> (bool, String) {
    let config = ScenarioConfig::example();
    let sc = generate_scenario(&config, 1).unwrap();
    let inputs = predict_all(&sc, &config).unwrap();
    let values = [4.0, 7.0, 10.0, 13.0, 16.0];
    let mut points = Vec::new();
    for &cap in &values {
        let mut c = config.clone();
        hccn::sim::SweepAxis::RsuCap.apply(&mut c, cap);
        let mut scv = sc.clone();
        scv.network = hccn::topology::build_topology(&c).unwrap();
        let report = run_with_inputs(&scv, &inputs, &[Policy::PredictedCooperative], &c).unwrap();
        feas.add_report(&report, scv.episodes, 1);
        let m = report.metric(Policy::PredictedCooperative).unwrap();
        points.push((m.hit_ratio().unwrap(), m.avg_delay().unwrap()));
    }
    let ok = points.windows(2).all(|w| w[1].0 >= w[0].0 && w[1].1 <= w[0].1);
    let text: Vec<String> = values.iter().zip(&points).map(|(c, (h, d))| format!("cap {c}: {h:.3}/{d:.4}s")).collect();
    (ok, format!("seed 1, hit/delay {}", text.join(", ")))
}

fn pipeline(runs: &[SeedRun]) -> (bool, String) {
    let bad: Vec<u64> = runs
        .iter()
        .filter(|s| s.report.phases.len() >= 2 && s.report.pipelined_makespan > s.report.serial_makespan)
        .map(|s| s.seed)
        .collect();
    let saved: f64 = runs.iter().map(|s| s.report.serial_makespan - s.report.pipelined_makespan).sum();
    (bad.is_empty(), format!("{} runs, violations at seeds {bad:?}, total overlap {saved:.3} s", runs.len()))
}

fn predictor_direction() -> (bool, String) {
    let mut config = ScenarioConfig::example();
    config.scenario.demand_predictor = DemandPredictorName::Frequency;
    let rows: Vec<(f64, f64)> = (1..=20u64)
        .into_par_iter()
        .map(|seed| {
            let sc = generate_scenario(&config, seed).unwrap();
            let inputs = predict_all(&sc, &config).unwrap();
            let n = inputs.len() as f64;
            (inputs.iter().map(|i| i.ppm_mae).sum::<f64>() / n, inputs.iter().map(|i| i.uniform_mae).sum::<f64>() / n)
        })
        .collect();
    let wins = rows.iter().filter(|(p, u)| p < u).count();
    let (p, u) = rows.iter().fold((0.0, 0.0), |a, r| (a.0 + r.0, a.1 + r.1));
    (wins >= 18, format!("PPM below uniform in {wins}/20 seeds, mean MAE {:.3} vs {:.3}", p / 20.0, u / 20.0))
}

fn complexity() -> (bool, String) {
    let mut rng = rng(112);
    let mut per_iter = |files: usize| {
        let spec = InstanceSpec { rsus: 4, mbs: 2, files, vehicles: 5, unit_sizes: true };
        let inst = random_instance(&mut rng, &spec, table1_rates());
        let solver = Solver::new(&inst, SolverConfig::default()).unwrap();
        let mut state = solver.initial_state();
        let start = solver.model().op_count();
        for _ in 0..50 {
            solver.step(&mut state).unwrap();
        }
        (solver.model().op_count() - start) as f64 / 50.0
    };
    let small = per_iter(25);
    let large = per_iter(100);
    let ratio = large / small;
    ((3.2..=4.8).contains(&ratio), format!("ops per iteration {small:.0} -> {large:.0} for 4x F(R+M), ratio {ratio:.3}"))
}

fn determinism() -> (bool, String) {
    let demo = |threads: &str| {
        let dir = tempfile::tempdir().unwrap();
        let out = Command::new(env!("CARGO_BIN_EXE_hccn"))
            .args(["demo", "--seed", "1", "--threads", threads, "--out-dir"])
            .arg(dir.path())
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::read(dir.path().join("demo.csv")).unwrap()
    };
    let a = demo("1");
    let b = demo("1");
    let c = demo("4");
    (a == b && a == c, format!("threads 1 twice identical: {}, threads 4 identical: {}", a == b, a == c))
}

fn main() {
    let started = Instant::now();
    let mut feas = Feasibility::default();
    let mut results = vec![
        run(1, secs(5), exclusivity),
        run(2, secs(60), gradients),
        run(3, secs(120), || optimality_gap(&mut feas)),
        run(4, secs(30), || strict_descent(&mut feas)),
        run(6, secs(5), hfl_identity),
        run(7, secs(5), causal_mask),
    ];
    let mut runs = Vec::new();
    results.push(run(8, secs(600), || {
        runs = demo_runs(1..=20);
        policy_ordering(&runs)
    }));
    for s in &runs {
        feas.add_report(&s.report, s.report.phases.len(), Policy::ALL.len());
    }
    results.push(run(9, secs(300), || capacity_monotonicity(&mut feas)));
    results.push(run(10, None, || pipeline(&runs)));
    results.push(run(11, secs(60), predictor_direction));
    results.push(run(12, None, complexity));
    results.push(run(13, None, determinism));
    results.push(run(5, None, || {
        (feas.violations == 0, format!("{} infeasible among {} rounded or cached placements", feas.violations, feas.checked))
    }));
    results.sort_by_key(|o| o.id);
    let passed = results.iter().filter(|o| o.pass).count();
    let failed: Vec<String> = results.iter().filter(|o| !o.pass).map(|o| o.id.to_string()).collect();
    println!(
        "acceptance: {passed}/{} PASS, failed: [{}], {:.0} s",
        results.len(),
        failed.join(", "),
        started.elapsed().as_secs_f64()
    );
    if !failed.is_empty() && std::env::var("HCCN_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
