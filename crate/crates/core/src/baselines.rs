//! Comparison policies: reactive LRU, random placement, independent
//! per-node greedy placement, and the cooperative placement computed from
//! exact future information.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::delay::Placement;
use crate::objective::{CostModel, ProblemInstance};
use crate::scalar::Scalar;
use crate::solver::{solve, SolverConfig, SolverError};
use crate::topology::{Capacities, Catalog};

/// Largest instance the oracle placement enumerates exhaustively.
pub const EXHAUSTIVE_MAX_VARS: usize = 14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaselineError {
    #[error("file {file} of size {size} cannot fit a cache of capacity {capacity}")]
    TooLarge { file: usize, size: f64, capacity: f64 },
    #[error(transparent)]
    Solver(#[from] SolverError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LruOutcome {
    Hit,
    Miss { evicted: Vec<usize> },
}

/// Size-aware least-recently-used cache.
#[derive(Debug, Clone)]
pub struct LruCache {
    capacity: f64,
    used: f64,
    clock: u64,
    entries: HashMap<usize, (f64, u64)>,
    by_age: BTreeMap<u64, usize>,
}

impl LruCache {
    pub fn new(capacity: f64) -> Self {
        Self { capacity, used: 0.0, clock: 0, entries: HashMap::new(), by_age: BTreeMap::new() }
    }

    pub fn capacity(&self) -> f64 {
        self.capacity
    }

    pub fn used(&self) -> f64 {
        self.used
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, file: usize) -> bool {
        self.entries.contains_key(&file)
    }

    /// Resident files, least recent first.
    pub fn files(&self) -> Vec<usize> {
        self.by_age.values().copied().collect()
    }

    /// Refreshes `file` on a hit; on a miss inserts it, evicting the least
    /// recently used entries until it fits.
    pub fn access(&mut self, file: usize, size: f64) -> Result<LruOutcome, BaselineError> {
        self.clock += 1;
        if let Some((_, stamp)) = self.entries.get_mut(&file) {
            self.by_age.remove(stamp);
            *stamp = self.clock;
            self.by_age.insert(self.clock, file);
            return Ok(LruOutcome::Hit);
        }
        if size > self.capacity {
            return Err(BaselineError::TooLarge { file, size, capacity: self.capacity });
        }
        let mut evicted = Vec::new();
        while self.used + size > self.capacity {
            let (_, old) = self.by_age.pop_first().expect("used > 0 implies an entry");
            let (s, _) = self.entries.remove(&old).expect("indexed entry");
            self.used -= s;
            evicted.push(old);
        }
        if self.entries.is_empty() {
            // Keeps the running total from drifting through repeated float subtraction.
            self.used = 0.0;
        }
        self.entries.insert(file, (size, self.clock));
        self.by_age.insert(self.clock, file);
        self.used += size;
        Ok(LruOutcome::Miss { evicted })
    }
}

/// Free-function form of [`LruCache::access`].
pub fn lru_access(cache: &mut LruCache, file: usize, size: f64) -> Result<LruOutcome, BaselineError> {
    cache.access(file, size)
}

/// Walks `order` and caches every file that still fits.
fn fill<T: Scalar>(order: &[usize], catalog: &Catalog<T>, cap: T, mut set: impl FnMut(usize)) {
    let mut used = T::zero();
    for &f in order {
        let next = used + catalog.size(f);
        if next <= cap {
            used = next;
            set(f);
        }
    }
}

fn ranked<T: Scalar>(scores: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    order
}

/// Each node shuffles the catalog independently and fills to capacity.
/// RSUs draw first, then MBSs, all from one stream seeded with `seed`.
pub fn random_placement<T: Scalar>(catalog: &Catalog<T>, caps: &Capacities<T>, seed: u64) -> Placement {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let files = catalog.len();
    let mut p = Placement::empty(caps.rsu.len(), caps.mbs.len(), files);
    for (r, &cap) in caps.rsu.iter().enumerate() {
        let mut order: Vec<usize> = (0..files).collect();
        order.shuffle(&mut rng);
        fill(&order, catalog, cap, |f| p.x[(r, f)] = true);
    }
    for (m, &cap) in caps.mbs.iter().enumerate() {
        let mut order: Vec<usize> = (0..files).collect();
        order.shuffle(&mut rng);
        fill(&order, catalog, cap, |f| p.y[(m, f)] = true);
    }
    p
}

/// RSUs rank files by their own expected demand `ρ[r, f]`; each MBS ranks by
/// the sum over its cluster. No node looks at what another caches.
pub fn greedy_local_placement<T: Scalar>(inst: &ProblemInstance<T>) -> Placement {
    let rho = inst.weights();
    let net = &inst.network;
    let (rsus, mbss, files) = (inst.rsu_count(), inst.mbs_count(), inst.file_count());
    let mut p = Placement::empty(rsus, mbss, files);
    for r in 0..rsus {
        let scores: Vec<T> = rho.row(r).to_vec();
        fill(&ranked(&scores), &net.catalog, net.capacities.rsu[r], |f| p.x[(r, f)] = true);
    }
    for m in 0..mbss {
        let mut scores = vec![T::zero(); files];
        for &r in net.topology.members(m) {
            scores.iter_mut().zip(rho.row(r)).for_each(|(s, &w)| *s += w);
        }
        fill(&ranked(&scores), &net.catalog, net.capacities.mbs[m], |f| p.y[(m, f)] = true);
    }
    p
}

/// Cheapest feasible placement by enumeration; ties keep the first mask found.
pub fn exhaustive_placement<T: Scalar>(inst: &ProblemInstance<T>) -> Placement {
    let (rsus, mbss, files) = (inst.rsu_count(), inst.mbs_count(), inst.file_count());
    let bits = (rsus + mbss) * files;
    assert!(bits <= 24, "exhaustive enumeration over {bits} variables");
    let model = CostModel::new(inst);
    let net = &inst.network;
    let mut best = (T::infinity(), Placement::empty(rsus, mbss, files));
    for mask in 0u32..(1u32 << bits) {
        let mut p = Placement::empty(rsus, mbss, files);
        for i in (0..bits).filter(|i| mask >> i & 1 == 1) {
            let (node, f) = (i / files, i % files);
            if node < rsus {
                p.x[(node, f)] = true;
            } else {
                p.y[(node - rsus, f)] = true;
            }
        }
        if !p.is_feasible(&net.catalog, &net.capacities) {
            continue;
        }
        let c = model.placement_cost(&p);
        if c < best.0 {
            best = (c, p);
        }
    }
    best.1
}

#[derive(Debug, Clone)]
pub struct OraclePlacement {
    pub placement: Placement,
    /// Solver iterations; zero when the instance was enumerated.
    pub iterations: usize,
}

/// Cooperative placement for an instance built from exact future residence
/// and demand: enumeration up to [`EXHAUSTIVE_MAX_VARS`] variables, the
/// relaxed solver above that.
pub fn oracle_cooperative_placement<T: Scalar>(inst: &ProblemInstance<T>, cfg: &SolverConfig) -> Result<OraclePlacement, BaselineError> {
    if inst.variable_count() <= EXHAUSTIVE_MAX_VARS {
        return Ok(OraclePlacement { placement: exhaustive_placement(inst), iterations: 0 });
    }
    let report = solve(inst, cfg)?;
    Ok(OraclePlacement { placement: report.placement, iterations: report.iterations })
}
