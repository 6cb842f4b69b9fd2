//! Synthetic commuter scenarios and trace CSV ingestion.
//!
//! Each vehicle owns a commute route of adjacent RSUs on a grid. Every day it
//! appears near a personal departure slot, drives the route outbound with
//! geometric dwell times, parks at the far end, drives back half a day later
//! and then leaves coverage. With probability `deviation_prob` a move goes to
//! a random grid neighbour and the next move returns to the route. Requests
//! are Zipf over a per-vehicle perturbation of one global popularity order.

use std::collections::BTreeMap;
use std::io::Read;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use super::SimError;
use crate::config::{ScenarioConfig, ScenarioSection};
use crate::topology::{build_topology, Network};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Request {
    pub slot: usize,
    pub vehicle: usize,
    pub file: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub network: Network<f64>,
    pub day_slots: usize,
    pub history_days: usize,
    pub slots_per_episode: usize,
    pub episodes: usize,
    pub seed: u64,
    /// Per vehicle, one attachment symbol per slot (0 absent, `r + 1` RSU `r`)
    /// covering history and all episodes.
    pub attachments: Vec<Vec<u32>>,
    /// Sorted by slot, then vehicle.
    pub requests: Vec<Request>,
}

impl Scenario {
    pub fn vehicles(&self) -> usize {
        self.attachments.len()
    }

    pub fn history_slots(&self) -> usize {
        self.history_days * self.day_slots
    }

    pub fn total_slots(&self) -> usize {
        self.history_slots() + self.episodes * self.slots_per_episode
    }

    /// Slot range `[start, end)` of episode `e`.
    pub fn episode_slots(&self, e: usize) -> (usize, usize) {
        let start = self.history_slots() + e * self.slots_per_episode;
        (start, start + self.slots_per_episode)
    }

    /// Index range into `requests` for slots `[start, end)`.
    pub fn request_range(&self, start: usize, end: usize) -> std::ops::Range<usize> {
        let lo = self.requests.partition_point(|q| q.slot < start);
        let hi = self.requests.partition_point(|q| q.slot < end);
        lo..hi
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let total = self.total_slots();
        let rsus = self.network.topology.rsu_count();
        for (v, a) in self.attachments.iter().enumerate() {
            if a.len() < total {
                return Err(SimError::Trace(format!("vehicle {v} mobility covers {} slots, need {total}", a.len())));
            }
            if let Some(&s) = a.iter().find(|&&s| s as usize > rsus) {
                return Err(SimError::Trace(format!("vehicle {v} attached to unknown RSU id {s}")));
            }
        }
        let files = self.network.catalog.len();
        for q in &self.requests {
            if q.vehicle >= self.vehicles() {
                return Err(SimError::UnknownVehicle(q.vehicle));
            }
            if q.file >= files {
                return Err(SimError::UnknownFile(q.file));
            }
        }
        if !self.requests.windows(2).all(|w| (w[0].slot, w[0].vehicle) <= (w[1].slot, w[1].vehicle)) {
            return Err(SimError::Trace("requests are not sorted by slot".into()));
        }
        Ok(())
    }
}

/// RSU grid adjacency, 4-neighbourhood, row-major ids.
pub fn grid_neighbours(rsus: usize, cols: usize) -> Vec<Vec<usize>> {
    let cols = cols.max(1);
    (0..rsus)
        .map(|r| {
            let (row, col) = (r / cols, r % cols);
            let mut n = Vec::new();
            if row > 0 {
                n.push(r - cols);
            }
            if col > 0 {
                n.push(r - 1);
            }
            if col + 1 < cols && r + 1 < rsus {
                n.push(r + 1);
            }
            if r + cols < rsus {
                n.push(r + cols);
            }
            n
        })
        .collect()
}

fn random_route(rng: &mut ChaCha8Rng, adj: &[Vec<usize>], len: usize) -> Vec<usize> {
    let mut route = vec![rng.random_range(0..adj.len())];
    while route.len() < len {
        let here = *route.last().expect("nonempty");
        let fresh: Vec<usize> = adj[here].iter().copied().filter(|n| !route.contains(n)).collect();
        match fresh.len() {
            0 => break,
            k => route.push(fresh[rng.random_range(0..k)]),
        }
    }
    route
}

/// Geometric dwell with the given mean, at least one slot.
fn dwell(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    let p = 1.0 / mean.max(1.0);
    let mut n = 1;
    while n < 64 && rng.random::<f64>() >= p {
        n += 1;
    }
    n
}

/// Fills `day[from..]` by walking `route`, returns the slot after arrival.
fn drive(rng: &mut ChaCha8Rng, day: &mut [u32], from: usize, route: &[usize], adj: &[Vec<usize>], p: &ScenarioSection) -> usize {
    let mut t = from;
    let mut i = 0;
    let mut here = route[0];
    loop {
        let stay = dwell(rng, p.mean_dwell);
        for _ in 0..stay {
            if t >= day.len() {
                return t;
            }
            day[t] = here as u32 + 1;
            t += 1;
        }
        if here == route[route.len() - 1] && i == route.len() - 1 {
            return t;
        }
        if rng.random::<f64>() < p.deviation_prob && !adj[here].is_empty() {
            here = adj[here][rng.random_range(0..adj[here].len())];
        } else {
            i += 1;
            here = route[i];
        }
    }
}

fn vehicle_day(rng: &mut ChaCha8Rng, route: &[usize], depart: usize, adj: &[Vec<usize>], p: &ScenarioSection) -> Vec<u32> {
    let n = p.day_slots;
    let mut day = vec![0u32; n];
    let jitter = |rng: &mut ChaCha8Rng| rng.random_range(0..=2) as isize - 1;
    let out = (depart as isize + jitter(rng)).clamp(0, n as isize - 1) as usize;
    let arrive = drive(rng, &mut day, out, route, adj, p);
    let back = ((depart + n / 2) as isize + jitter(rng)).clamp(0, n as isize - 1) as usize;
    let work = route[route.len() - 1] as u32 + 1;
    for slot in day.iter_mut().take(back).skip(arrive) {
        *slot = work;
    }
    let reversed: Vec<usize> = route.iter().rev().copied().collect();
    drive(rng, &mut day, back.max(arrive), &reversed, adj, p);
    day
}

/// Zipf weights `1 / (k + 1)^α` over popularity ranks.
pub fn zipf_weights(files: usize, alpha: f64) -> Vec<f64> {
    (0..files).map(|k| 1.0 / ((k + 1) as f64).powf(alpha)).collect()
}

/// The global popularity order reshuffled within consecutive windows of `width` ranks.
pub fn preference_order(rng: &mut ChaCha8Rng, global: &[usize], width: usize) -> Vec<usize> {
    let mut order = global.to_vec();
    if width > 1 {
        order.chunks_mut(width).for_each(|c| c.shuffle(rng));
    }
    order
}

/// Builds the synthetic scenario described in the module docs. Independent
/// streams are used for routes, daily mobility and requests, so the same
/// seed gives the same scenario byte for byte.
pub fn generate_scenario(config: &ScenarioConfig, seed: u64) -> Result<Scenario, SimError> {
    config.validate()?;
    let network = build_topology::<f64>(config)?;
    let p = &config.scenario;
    let rsus = network.topology.rsu_count();
    let files = network.catalog.len();
    let cols = if p.grid_cols == 0 { (rsus as f64).sqrt().ceil() as usize } else { p.grid_cols };
    let adj = grid_neighbours(rsus, cols);
    let episodes_days = (p.episodes * p.slots_per_episode).div_ceil(p.day_slots);
    let days = p.history_days + episodes_days;
    let total = p.history_days * p.day_slots + p.episodes * p.slots_per_episode;

    let mut route_rng = ChaCha8Rng::seed_from_u64(seed);
    route_rng.set_stream(1);
    let mut move_rng = ChaCha8Rng::seed_from_u64(seed);
    move_rng.set_stream(2);
    let mut req_rng = ChaCha8Rng::seed_from_u64(seed);
    req_rng.set_stream(3);

    let mut attachments = Vec::with_capacity(p.vehicles);
    for _ in 0..p.vehicles {
        let route = random_route(&mut route_rng, &adj, p.route_len.max(1));
        let depart = route_rng.random_range(0..(p.day_slots / 4).max(1)) + p.day_slots / 8;
        let mut slots = Vec::with_capacity(days * p.day_slots);
        for _ in 0..days {
            slots.extend(vehicle_day(&mut move_rng, &route, depart, &adj, p));
        }
        slots.truncate(total);
        attachments.push(slots);
    }

    let mut global: Vec<usize> = (0..files).collect();
    global.shuffle(&mut req_rng);
    let zipf = WeightedIndex::new(zipf_weights(files, p.zipf_alpha)).map_err(|e| SimError::Trace(e.to_string()))?;
    let prefs: Vec<Vec<usize>> = (0..p.vehicles).map(|_| preference_order(&mut req_rng, &global, p.preference_shuffle)).collect();
    let mut requests = Vec::new();
    for slot in 0..total {
        for (v, a) in attachments.iter().enumerate() {
            if a[slot] != 0 && req_rng.random::<f64>() < p.request_prob {
                requests.push(Request { slot, vehicle: v, file: prefs[v][zipf.sample(&mut req_rng)] });
            }
        }
    }
    let sc = Scenario {
        network,
        day_slots: p.day_slots,
        history_days: p.history_days,
        slots_per_episode: p.slots_per_episode,
        episodes: p.episodes,
        seed,
        attachments,
        requests,
    };
    sc.validate()?;
    Ok(sc)
}

#[derive(Debug, Deserialize)]
struct MobilityRow {
    vehicle_id: usize,
    day: usize,
    slot: usize,
    rsu_id: u32,
}

#[derive(Debug, Deserialize)]
struct RequestRow {
    vehicle_id: usize,
    slot: usize,
    file_id: usize,
}

/// Reads a mobility CSV with header `vehicle_id,day,slot,rsu_id`. `rsu_id` is
/// 1-based with 0 for "absent"; slots run `0..day_slots` within each day.
/// Returns per-vehicle attachment sequences over consecutive days.
pub fn read_mobility_csv<R: Read>(input: R, day_slots: usize, rsu_count: usize) -> Result<Vec<Vec<u32>>, SimError> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut cells: BTreeMap<usize, BTreeMap<(usize, usize), u32>> = BTreeMap::new();
    for (i, row) in rdr.deserialize::<MobilityRow>().enumerate() {
        let row = row.map_err(|e| SimError::Trace(format!("mobility row {}: {e}", i + 2)))?;
        if row.slot >= day_slots {
            return Err(SimError::Trace(format!("mobility row {}: slot {} outside 0..{day_slots}", i + 2, row.slot)));
        }
        if row.rsu_id as usize > rsu_count {
            return Err(SimError::Trace(format!("mobility row {}: unknown rsu_id {}", i + 2, row.rsu_id)));
        }
        cells.entry(row.vehicle_id).or_default().insert((row.day, row.slot), row.rsu_id);
    }
    let vehicles = cells.keys().next_back().map_or(0, |&v| v + 1);
    let mut out = vec![Vec::new(); vehicles];
    for (v, grid) in cells {
        let days = grid.keys().map(|&(d, _)| d).max().map_or(0, |d| d + 1);
        if grid.len() != days * day_slots {
            return Err(SimError::Trace(format!("vehicle {v}: slots are not contiguous over {days} days")));
        }
        out[v] = grid.into_values().collect();
    }
    Ok(out)
}

/// Reads a request CSV with header `vehicle_id,slot,file_id`; `slot` counts
/// from the first history slot and `file_id` is 0-based.
pub fn read_request_csv<R: Read>(input: R) -> Result<Vec<Request>, SimError> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<RequestRow>().enumerate() {
        let row = row.map_err(|e| SimError::Trace(format!("request row {}: {e}", i + 2)))?;
        out.push(Request { slot: row.slot, vehicle: row.vehicle_id, file: row.file_id });
    }
    out.sort();
    Ok(out)
}

/// Replaces the synthetic traces with the CSV files named in the config, if any.
pub fn load_scenario(config: &ScenarioConfig, seed: u64) -> Result<Scenario, SimError> {
    let mut sc = generate_scenario(config, seed)?;
    let p = &config.scenario;
    if let Some(path) = &p.mobility_trace {
        let f = std::fs::File::open(path).map_err(|e| SimError::Trace(format!("cannot open {path}: {e}")))?;
        sc.attachments = read_mobility_csv(f, p.day_slots, sc.network.topology.rsu_count())?;
    }
    if let Some(path) = &p.request_trace {
        let f = std::fs::File::open(path).map_err(|e| SimError::Trace(format!("cannot open {path}: {e}")))?;
        sc.requests = read_request_csv(f)?;
    }
    // Requests from vehicles out of coverage cannot be served by any RSU.
    let total = sc.total_slots();
    let att = &sc.attachments;
    for q in &sc.requests {
        if q.vehicle >= att.len() {
            return Err(SimError::UnknownVehicle(q.vehicle));
        }
    }
    sc.requests.retain(|q| q.slot < total && att[q.vehicle].get(q.slot).is_some_and(|&s| s != 0));
    sc.validate()?;
    Ok(sc)
}
