//! Episode loop: predict (P), place (C), transmit (X).

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::scenario::Scenario;
use super::SimError;
use crate::baselines::{greedy_local_placement, oracle_cooperative_placement, random_placement, LruCache, LruOutcome};
use crate::config::{DemandPredictorName, ScenarioConfig};
use crate::delay::{served_delay, Placement, SourceTier};
use crate::demand::{frequency_demand, hfl_round, oracle_demand, HflSchedule, RequestHistory, SasrecParams, SasrecShape, VehicleNode};
use crate::mobility::{build_residence_matrix, mean_abs_error, oracle_residence, predict_residence, train_ppm, uniform_residence, MobilityTrace};
use crate::objective::{DemandMatrix, ProblemInstance, ResidenceMatrix};
use crate::solver::{solve, SolverConfig};
use crate::topology::Network;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Policy {
    OracleCooperative,
    PredictedCooperative,
    Noncooperative,
    Random,
    Lru,
}

impl Policy {
    pub const ALL: [Policy; 5] =
        [Policy::OracleCooperative, Policy::PredictedCooperative, Policy::Noncooperative, Policy::Random, Policy::Lru];

    pub fn name(self) -> &'static str {
        match self {
            Policy::OracleCooperative => "oracle-cooperative",
            Policy::PredictedCooperative => "predicted-cooperative",
            Policy::Noncooperative => "noncooperative",
            Policy::Random => "random",
            Policy::Lru => "lru",
        }
    }

    /// Comma-separated names; `all` selects every policy.
    pub fn parse_list(s: &str) -> Result<Vec<Policy>, SimError> {
        if s.trim() == "all" {
            return Ok(Self::ALL.to_vec());
        }
        let mut out: Vec<Policy> = s.split(',').map(|p| p.trim().parse()).collect::<Result<_, _>>()?;
        out.sort();
        out.dedup();
        Ok(out)
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, SimError> {
        Self::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| SimError::UnknownPolicy(s.to_string()))
    }
}

/// Everything the caching phase of one episode needs.
#[derive(Debug, Clone)]
pub struct EpisodeInputs {
    pub predicted_residence: ResidenceMatrix<f64>,
    pub predicted_demand: DemandMatrix<f64>,
    pub oracle_residence: ResidenceMatrix<f64>,
    pub oracle_demand: DemandMatrix<f64>,
    /// Mean absolute residence error per vehicle-RSU entry against the oracle.
    pub ppm_mae: f64,
    pub uniform_mae: f64,
    /// Wall-clock seconds spent predicting.
    pub predict_seconds: f64,
}

enum DemandState {
    Sasrec { nodes: Vec<VehicleNode<f64>>, schedule: HflSchedule, seq_len: usize, kappa: usize },
    Frequency,
}

/// Trajectory and demand predictors carried across episodes.
pub struct Predictor {
    ppm_order: usize,
    demand: DemandState,
    /// Per vehicle, (slot, file) in slot order.
    history: Vec<Vec<(usize, usize)>>,
}

impl Predictor {
    pub fn new(sc: &Scenario, config: &ScenarioConfig) -> Result<Self, SimError> {
        let p = &config.scenario;
        let files = sc.network.catalog.len();
        let mut history = vec![Vec::new(); sc.vehicles()];
        for q in &sc.requests {
            history[q.vehicle].push((q.slot, q.file));
        }
        let demand = match p.demand_predictor {
            DemandPredictorName::Frequency => DemandState::Frequency,
            DemandPredictorName::Sasrec => {
                let shape = SasrecShape { dim: p.rec_dim, files, positions: p.rec_seq_len - p.rec_targets };
                let mut rng = ChaCha8Rng::seed_from_u64(sc.seed ^ 0x5a5a_0f0f);
                let init = SasrecParams::<f64>::random(shape, 1.0 / (p.rec_dim as f64).sqrt(), &mut rng);
                let empty = RequestHistory::from_requests(&[], p.rec_seq_len, files)?;
                let nodes = (0..sc.vehicles())
                    .map(|v| {
                        let seed = sc.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(v as u64);
                        VehicleNode::new(empty.clone(), init.clone(), p.rec_targets, p.rec_negatives, seed)
                    })
                    .collect();
                let schedule =
                    HflSchedule { local_steps: p.hfl_local_steps, edge_rounds: p.hfl_edge_rounds, lr: p.hfl_lr, rounds: p.hfl_rounds };
                DemandState::Sasrec { nodes, schedule, seq_len: p.rec_seq_len, kappa: 0 }
            }
        };
        Ok(Self { ppm_order: p.ppm_order, demand, history })
    }

    fn past_files(&self, v: usize, before: usize) -> Vec<usize> {
        let h = &self.history[v];
        h[..h.partition_point(|&(s, _)| s < before)].iter().map(|&(_, f)| f).collect()
    }

    /// Residence rows from per-vehicle PPM models trained on complete days before `start`.
    fn predict_residence_rows(&self, sc: &Scenario, start: usize) -> Result<Vec<Vec<f64>>, SimError> {
        let (n, t, rsus) = (sc.day_slots, sc.slots_per_episode, sc.network.topology.rsu_count());
        let full_days = start / n;
        (0..sc.vehicles())
            .map(|v| {
                if full_days == 0 {
                    return Ok(uniform_residence(rsus, t));
                }
                let a = &sc.attachments[v];
                let days = (0..full_days).map(|d| a[d * n..(d + 1) * n].to_vec()).collect();
                let model = train_ppm(&[MobilityTrace::new(days, n, rsus)?], self.ppm_order, rsus)?;
                Ok(predict_residence(&model, &a[full_days * n..start], t))
            })
            .collect()
    }

    fn predict_demand_rows(&mut self, sc: &Scenario, start: usize) -> Result<DemandMatrix<f64>, SimError> {
        let files = sc.network.catalog.len();
        let past: Vec<Vec<usize>> = (0..sc.vehicles()).map(|v| self.past_files(v, start)).collect();
        match &mut self.demand {
            DemandState::Frequency => Ok(frequency_demand(&past, files)?),
            DemandState::Sasrec { nodes, schedule, seq_len, kappa } => {
                for (node, files_v) in nodes.iter_mut().zip(&past) {
                    node.observe(RequestHistory::from_requests(files_v, *seq_len, files)?);
                }
                // A vehicle takes part if it was in coverage during the previous episode window.
                let from = start.saturating_sub(sc.slots_per_episode);
                let attach: Vec<Option<usize>> = sc
                    .attachments
                    .iter()
                    .map(|a| a[from..start].iter().rev().find(|&&s| s != 0).map(|&s| s as usize - 1))
                    .collect();
                let cluster_of = sc.network.topology.cluster_map().to_vec();
                for _ in 0..schedule.rounds {
                    *kappa += 1;
                    hfl_round(nodes, &attach, &cluster_of, schedule, *kappa)?;
                }
                let rows: Vec<Vec<f64>> = nodes.iter().map(|n| n.predict()).collect::<Result<_, _>>()?;
                let data = ndarray::Array2::from_shape_fn((rows.len(), files), |(v, f)| rows[v][f]);
                Ok(DemandMatrix::new(data)?)
            }
        }
    }

    /// Phase P of episode `e`: predictions from data before the episode, plus
    /// the oracle matrices the oracle baseline is allowed to see.
    pub fn predict_episode(&mut self, sc: &Scenario, e: usize) -> Result<EpisodeInputs, SimError> {
        let clock = Instant::now();
        let (start, end) = sc.episode_slots(e);
        let (t, rsus, files) = (sc.slots_per_episode, sc.network.topology.rsu_count(), sc.network.catalog.len());
        let predicted_rows = self.predict_residence_rows(sc, start)?;
        let predicted_demand = self.predict_demand_rows(sc, start)?;
        let predict_seconds = clock.elapsed().as_secs_f64();

        let oracle_rows: Vec<Vec<f64>> =
            sc.attachments.iter().map(|a| oracle_residence(&a[start..end], t, rsus)).collect::<Result<_, _>>()?;
        let mut future = vec![Vec::new(); sc.vehicles()];
        for q in &sc.requests[sc.request_range(start, end)] {
            future[q.vehicle].push(q.file);
        }
        let uniform = uniform_residence(rsus, t);
        let v = sc.vehicles().max(1) as f64;
        let ppm_mae = predicted_rows.iter().zip(&oracle_rows).map(|(p, o)| mean_abs_error(p, o)).sum::<f64>() / v;
        let uniform_mae = oracle_rows.iter().map(|o| mean_abs_error(&uniform, o)).sum::<f64>() / v;
        Ok(EpisodeInputs {
            predicted_residence: build_residence_matrix(&predicted_rows, rsus, Some(t as f64))?,
            predicted_demand,
            oracle_residence: build_residence_matrix(&oracle_rows, rsus, Some(t as f64))?,
            oracle_demand: oracle_demand(&future, files)?,
            ppm_mae,
            uniform_mae,
            predict_seconds,
        })
    }
}

/// LRU caches at every RSU and MBS plus the placement they currently amount to.
#[derive(Debug, Clone)]
pub struct LruHierarchy {
    rsu: Vec<LruCache>,
    mbs: Vec<LruCache>,
    view: Placement,
}

impl LruHierarchy {
    pub fn new(network: &Network<f64>) -> Self {
        let files = network.catalog.len();
        let caps = &network.capacities;
        Self {
            rsu: caps.rsu.iter().map(|&c| LruCache::new(c)).collect(),
            mbs: caps.mbs.iter().map(|&c| LruCache::new(c)).collect(),
            view: Placement::empty(caps.rsu.len(), caps.mbs.len(), files),
        }
    }

    /// A request at RSU `r` brings the file into that RSU and its MBS.
    fn touch(&mut self, network: &Network<f64>, r: usize, file: usize) -> Result<(), SimError> {
        let size = network.catalog.size(file);
        let m = network.topology.cluster_of(r);
        if size <= self.rsu[r].capacity() {
            if let LruOutcome::Miss { evicted } = self.rsu[r].access(file, size)? {
                evicted.into_iter().for_each(|f| self.view.x[(r, f)] = false);
                self.view.x[(r, file)] = true;
            }
        }
        if size <= self.mbs[m].capacity() {
            if let LruOutcome::Miss { evicted } = self.mbs[m].access(file, size)? {
                evicted.into_iter().for_each(|f| self.view.y[(m, f)] = false);
                self.view.y[(m, file)] = true;
            }
        }
        Ok(())
    }
}

/// What serves requests during an episode.
#[derive(Debug, Clone)]
pub enum CacheState {
    Fixed(Placement),
    Lru(LruHierarchy),
}

impl CacheState {
    pub fn placement(&self) -> &Placement {
        match self {
            CacheState::Fixed(p) => p,
            CacheState::Lru(h) => &h.view,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RequestRecord {
    pub vehicle: usize,
    pub file: usize,
    pub slot: usize,
    pub tier: SourceTier,
    pub delay: f64,
    /// False during the warm-up prefix.
    pub measured: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub episode: usize,
    pub records: Vec<RequestRecord>,
    pub hits: usize,
    pub misses: usize,
    /// Sum of delays over measured requests, seconds.
    pub total_delay: f64,
}

impl EpisodeResult {
    pub fn requests(&self) -> usize {
        self.hits + self.misses
    }
}

/// Serves the requests of episode `e` in order. The first
/// `floor(warmup_fraction · n)` requests update LRU state but are not measured.
pub fn run_episode(sc: &Scenario, state: &mut CacheState, e: usize, warmup_fraction: f64) -> Result<EpisodeResult, SimError> {
    let (start, end) = sc.episode_slots(e);
    let reqs = &sc.requests[sc.request_range(start, end)];
    let skip = (warmup_fraction * reqs.len() as f64).floor() as usize;
    let net = &sc.network;
    let mut out = EpisodeResult { episode: e, records: Vec::with_capacity(reqs.len()), hits: 0, misses: 0, total_delay: 0.0 };
    for (i, q) in reqs.iter().enumerate() {
        if q.vehicle >= sc.vehicles() {
            return Err(SimError::UnknownVehicle(q.vehicle));
        }
        if q.file >= net.catalog.len() {
            return Err(SimError::UnknownFile(q.file));
        }
        let r = match sc.attachments[q.vehicle][q.slot] {
            0 => return Err(SimError::Trace(format!("vehicle {} requests at slot {} while out of coverage", q.vehicle, q.slot))),
            s => s as usize - 1,
        };
        let (tier, delay) = served_delay(state.placement(), r, q.file, &net.topology, &net.catalog);
        let measured = i >= skip;
        if measured {
            if tier.is_cluster_hit() {
                out.hits += 1;
            } else {
                out.misses += 1;
            }
            out.total_delay += delay;
        }
        out.records.push(RequestRecord { vehicle: q.vehicle, file: q.file, slot: q.slot, tier, delay, measured });
        if let CacheState::Lru(h) = state {
            h.touch(net, r, q.file)?;
        }
    }
    Ok(out)
}

/// Wall-clock seconds of the three phases of one episode.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PhaseDurations {
    pub predict: f64,
    pub cache: f64,
    pub transmit: f64,
}

pub fn serial_makespan(phases: &[PhaseDurations]) -> f64 {
    phases.iter().map(|p| p.predict + p.cache + p.transmit).sum()
}

/// One predictor, one placer and one transmitter working in sequence per
/// episode; prediction for the next episode may start as soon as the current
/// episode starts transmitting.
pub fn pipelined_makespan(phases: &[PhaseDurations]) -> f64 {
    let (mut p_end, mut c_end, mut x_end) = (0.0f64, 0.0f64, 0.0f64);
    let mut p_start = 0.0f64;
    for ph in phases {
        p_end = p_start.max(p_end) + ph.predict;
        c_end = p_end.max(c_end) + ph.cache;
        let x_start = c_end.max(x_end);
        x_end = x_start + ph.transmit;
        p_start = x_start;
    }
    x_end
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyMetrics {
    pub policy: Policy,
    pub hits: usize,
    pub requests: usize,
    pub total_delay: f64,
    pub solver_iters: usize,
    pub episodes: usize,
    /// Per episode: (hits, measured requests, total delay).
    pub per_episode: Vec<(usize, usize, f64)>,
}

impl PolicyMetrics {
    fn new(policy: Policy) -> Self {
        Self { policy, hits: 0, requests: 0, total_delay: 0.0, solver_iters: 0, episodes: 0, per_episode: Vec::new() }
    }

    fn add(&mut self, r: &EpisodeResult) {
        self.hits += r.hits;
        self.requests += r.requests();
        self.total_delay += r.total_delay;
        self.episodes += 1;
        self.per_episode.push((r.hits, r.requests(), r.total_delay));
    }

    /// `None` when no request was measured.
    pub fn hit_ratio(&self) -> Option<f64> {
        (self.requests > 0).then(|| self.hits as f64 / self.requests as f64)
    }

    pub fn avg_delay(&self) -> Option<f64> {
        (self.requests > 0).then(|| self.total_delay / self.requests as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub seed: u64,
    pub metrics: Vec<PolicyMetrics>,
    pub phases: Vec<PhaseDurations>,
    pub serial_makespan: f64,
    pub pipelined_makespan: f64,
    pub ppm_mae: f64,
    pub uniform_mae: f64,
    /// Placements (including LRU contents after each episode) that broke a capacity.
    pub infeasible_placements: usize,
}

impl RunReport {
    pub fn metric(&self, policy: Policy) -> Option<&PolicyMetrics> {
        self.metrics.iter().find(|m| m.policy == policy)
    }

    pub fn no_requests(&self) -> bool {
        self.metrics.iter().all(|m| m.requests == 0)
    }
}

fn episode_seed(seed: u64, e: usize) -> u64 {
    seed.wrapping_mul(0x2545_f491_4f6c_dd1d).wrapping_add(e as u64)
}

/// Phase C for one policy: the placement for episode `e` and solver iterations used.
fn place(policy: Policy, sc: &Scenario, inputs: &EpisodeInputs, cfg: &SolverConfig, e: usize) -> Result<(Option<Placement>, usize), SimError> {
    let net = &sc.network;
    let predicted = || ProblemInstance::new(net.clone(), inputs.predicted_residence.clone(), inputs.predicted_demand.clone());
    Ok(match policy {
        Policy::OracleCooperative => {
            let inst = ProblemInstance::new(net.clone(), inputs.oracle_residence.clone(), inputs.oracle_demand.clone())?;
            let o = oracle_cooperative_placement(&inst, cfg)?;
            (Some(o.placement), o.iterations)
        }
        Policy::PredictedCooperative => {
            let report = solve(&predicted()?, cfg)?;
            (Some(report.placement), report.iterations)
        }
        Policy::Noncooperative => (Some(greedy_local_placement(&predicted()?)), 0),
        Policy::Random => (Some(random_placement(&net.catalog, &net.capacities, episode_seed(sc.seed, e))), 0),
        Policy::Lru => (None, 0),
    })
}

/// Phases C and X for every episode, given already computed predictions.
pub fn run_with_inputs(
    sc: &Scenario,
    inputs: &[EpisodeInputs],
    policies: &[Policy],
    config: &ScenarioConfig,
) -> Result<RunReport, SimError> {
    let cfg = SolverConfig::from(&config.solver);
    let warmup = config.scenario.warmup_fraction;
    let mut metrics: Vec<PolicyMetrics> = policies.iter().map(|&p| PolicyMetrics::new(p)).collect();
    let mut lru = LruHierarchy::new(&sc.network);
    let mut phases = Vec::with_capacity(inputs.len());
    let mut infeasible = 0;
    let feasible = |p: &Placement| p.is_feasible(&sc.network.catalog, &sc.network.capacities);
    for (e, inp) in inputs.iter().enumerate() {
        let clock = Instant::now();
        let mut states = Vec::with_capacity(policies.len());
        for (&policy, m) in policies.iter().zip(metrics.iter_mut()) {
            let (placement, iters) = place(policy, sc, inp, &cfg, e)?;
            m.solver_iters += iters;
            infeasible += placement.as_ref().is_some_and(|p| !feasible(p)) as usize;
            states.push(placement);
        }
        let cache = clock.elapsed().as_secs_f64();
        let clock = Instant::now();
        for (placement, m) in states.into_iter().zip(metrics.iter_mut()) {
            let result = match placement {
                Some(p) => run_episode(sc, &mut CacheState::Fixed(p), e, warmup)?,
                None => {
                    let mut state = CacheState::Lru(lru.clone());
                    let r = run_episode(sc, &mut state, e, warmup)?;
                    if let CacheState::Lru(h) = state {
                        infeasible += !feasible(&h.view) as usize;
                        lru = h;
                    }
                    r
                }
            };
            m.add(&result);
        }
        phases.push(PhaseDurations { predict: inp.predict_seconds, cache, transmit: clock.elapsed().as_secs_f64() });
    }
    let n = inputs.len().max(1) as f64;
    Ok(RunReport {
        seed: sc.seed,
        metrics,
        serial_makespan: serial_makespan(&phases),
        pipelined_makespan: pipelined_makespan(&phases),
        phases,
        ppm_mae: inputs.iter().map(|i| i.ppm_mae).sum::<f64>() / n,
        uniform_mae: inputs.iter().map(|i| i.uniform_mae).sum::<f64>() / n,
        infeasible_placements: infeasible,
    })
}

/// Phase P for every episode.
pub fn predict_all(sc: &Scenario, config: &ScenarioConfig) -> Result<Vec<EpisodeInputs>, SimError> {
    let mut predictor = Predictor::new(sc, config)?;
    (0..sc.episodes).map(|e| predictor.predict_episode(sc, e)).collect()
}

/// Runs every episode through prediction, placement and transmission and
/// reports pooled metrics per policy along with serial and pipelined makespans.
pub fn run_pipeline(sc: &Scenario, policies: &[Policy], config: &ScenarioConfig) -> Result<RunReport, SimError> {
    let inputs = predict_all(sc, config)?;
    run_with_inputs(sc, &inputs, policies, config)
}
