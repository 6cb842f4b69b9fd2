//! Shared helpers for the integration tests: random small instances and
//! oracles (finite differences, brute-force enumeration) that do not go
//! through the code paths they check.
#![allow(dead_code)]

use hccn::delay::{served_delay, Placement};
use hccn::objective::{DemandMatrix, ProblemInstance, ResidenceMatrix};
use hccn::topology::{Capacities, Catalog, LinkRates, Network, Topology};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn table1_rates() -> LinkRates<f64> {
    LinkRates::new(10.0, 100.0, 50.0).unwrap()
}

/// Rates with nondecreasing tier delays: MR >= MM and 1/CM >= 1/MM + 1/MR.
pub fn ordered_rates(rng: &mut ChaCha8Rng) -> LinkRates<f64> {
    let mr = rng.random_range(50.0..200.0);
    let mm = rng.random_range(20.0..mr);
    let cm_max = 1.0 / (1.0 / mm + 1.0 / mr);
    let cm = rng.random_range(1.0..cm_max);
    LinkRates::new(cm, mr, mm).unwrap()
}

/// Random topology with `rsus` RSUs spread over `mbs` clusters; every cluster
/// gets at least one RSU when possible.
pub fn random_topology(rng: &mut ChaCha8Rng, rsus: usize, mbs: usize, rates: LinkRates<f64>) -> Topology<f64> {
    let cluster_of = (0..rsus).map(|r| if r < mbs { r } else { rng.random_range(0..mbs) }).collect();
    Topology::new(mbs, cluster_of, rates).unwrap()
}

pub struct InstanceSpec {
    pub rsus: usize,
    pub mbs: usize,
    pub files: usize,
    pub vehicles: usize,
    pub unit_sizes: bool,
}

pub fn random_instance(rng: &mut ChaCha8Rng, spec: &InstanceSpec, rates: LinkRates<f64>) -> ProblemInstance<f64> {
    let topo = random_topology(rng, spec.rsus, spec.mbs, rates);
    let sizes: Vec<f64> =
        (0..spec.files).map(|_| if spec.unit_sizes { 1.0 } else { rng.random_range(0.5..2.0) }).collect();
    let total: f64 = sizes.iter().sum();
    let catalog = Catalog::new(sizes).unwrap();
    let rsu_caps = (0..spec.rsus).map(|_| rng.random_range(0.0..total * 0.6)).collect();
    let mbs_caps = (0..spec.mbs).map(|_| rng.random_range(0.0..total * 0.6)).collect();
    let caps = Capacities::new(rsu_caps, mbs_caps).unwrap();
    let net = Network::new(topo, catalog, caps).unwrap();
    let residence = Array2::from_shape_fn((spec.vehicles, spec.rsus), |_| rng.random_range(0.0..5.0));
    let demand = Array2::from_shape_fn((spec.vehicles, spec.files), |_| rng.random_range(0.0..1.0));
    ProblemInstance::new(net, ResidenceMatrix::new(residence, None).unwrap(), DemandMatrix::new(demand).unwrap()).unwrap()
}

/// Central finite-difference gradient.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, point: &[f64], h: f64) -> Vec<f64> {
    let mut p = point.to_vec();
    (0..point.len())
        .map(|i| {
            p[i] = point[i] + h;
            let up = f(&p);
            p[i] = point[i] - h;
            let down = f(&p);
            p[i] = point[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`; zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Every binary placement of the given shape, in a fixed order.
pub fn all_placements(rsus: usize, mbs: usize, files: usize) -> impl Iterator<Item = Placement> {
    let bits = (rsus + mbs) * files;
    assert!(bits <= 20, "enumeration too large");
    (0u64..(1u64 << bits)).map(move |mask| {
        let mut p = Placement::empty(rsus, mbs, files);
        for i in 0..bits {
            if mask >> i & 1 == 1 {
                let (node, f) = (i / files, i % files);
                if node < rsus {
                    p.x[(node, f)] = true;
                } else {
                    p.y[(node - rsus, f)] = true;
                }
            }
        }
        p
    })
}

/// Binary cost from the tier search (not the case-delay polynomial).
pub fn brute_cost(inst: &ProblemInstance<f64>, p: &Placement) -> f64 {
    let rho = inst.residence.view().t().dot(inst.demand.view());
    let topo = &inst.network.topology;
    let mut total = 0.0;
    for r in 0..inst.rsu_count() {
        for f in 0..inst.file_count() {
            total += rho[(r, f)] * served_delay(p, r, f, topo, &inst.network.catalog).1;
        }
    }
    total
}

/// Minimum binary cost over all feasible placements.
pub fn brute_optimum(inst: &ProblemInstance<f64>) -> f64 {
    all_placements(inst.rsu_count(), inst.mbs_count(), inst.file_count())
        .filter(|p| p.is_feasible(&inst.network.catalog, &inst.network.capacities))
        .map(|p| brute_cost(inst, &p))
        .fold(f64::INFINITY, f64::min)
}
