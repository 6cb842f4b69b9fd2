//! Relaxed expected caching cost, its gradient, and the capacity constraints.
//!
//! Decisions are relaxed through the logistic map `x = h(x̃)`, `y = h(ỹ)`.
//! The cost is
//!
//! ```text
//! W = Σ_r Σ_f ρ[r,f] · γ_{r,f}(x, y),   ρ[r,f] = Σ_v π[v,f] · τ[v,r]
//! ```
//!
//! where `γ_{r,f}` is the six-case delay polynomial of [`crate::delay`].
//! Writing `a = 1 - x`, `b = 1 - y` and `d_i` for the tier delays, the case
//! terms telescope to
//!
//! ```text
//! γ_r = c1·a_r + c2·a_r·b_m + c3·b_m·A_m + c4·A_m·B + c5·X·B
//! ```
//!
//! with `c_1 = d_1`, `c_i = d_i - d_{i-1}`, `A_m` the product of `a` over the
//! cluster of `m`, `B` the product of `b` over all MBSs and `X` the product of
//! `a` over all RSUs. Evaluating per file with prefix/suffix products makes
//! both the value and the gradient O(F·(R+M)).

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::delay::{retrieval_delay, tier_delays, Placement};
use crate::scalar::{sigmoid, sigmoid_grad, Scalar};
use crate::topology::{Capacities, Catalog, Network};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("{what}: expected {expected:?}, got {got:?}")]
    Dimension { what: &'static str, expected: (usize, usize), got: (usize, usize) },
    #[error("residence entry ({vehicle}, {rsu}) = {value} is negative or non-finite")]
    BadResidence { vehicle: usize, rsu: usize, value: f64 },
    #[error("residence row {vehicle} sums to {sum}, above the horizon {horizon}")]
    ResidenceOverHorizon { vehicle: usize, sum: f64, horizon: f64 },
    #[error("demand entry ({vehicle}, {file}) = {value} outside [0, 1]")]
    BadDemand { vehicle: usize, file: usize, value: f64 },
    #[error("lipschitz estimation needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
}

/// Expected residence slots, V×R.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidenceMatrix<T> {
    data: Array2<T>,
}

impl<T: Scalar> ResidenceMatrix<T> {
    /// `horizon`, when given, bounds every row sum.
    pub fn new(data: Array2<T>, horizon: Option<T>) -> Result<Self, ObjectiveError> {
        for ((v, r), &value) in data.indexed_iter() {
            if !(value >= T::zero()) || !value.is_finite() {
                return Err(ObjectiveError::BadResidence { vehicle: v, rsu: r, value: value.as_f64() });
            }
        }
        if let Some(h) = horizon {
            let slack = h * T::of(1e-9) + T::of(1e-12);
            for (v, row) in data.axis_iter(Axis(0)).enumerate() {
                let sum: T = row.iter().copied().sum();
                if sum > h + slack {
                    return Err(ObjectiveError::ResidenceOverHorizon { vehicle: v, sum: sum.as_f64(), horizon: h.as_f64() });
                }
            }
        }
        Ok(Self { data })
    }

    pub fn view(&self) -> &Array2<T> {
        &self.data
    }

    pub fn vehicles(&self) -> usize {
        self.data.nrows()
    }

    pub fn rsus(&self) -> usize {
        self.data.ncols()
    }
}

/// Request probabilities, V×F.
#[derive(Debug, Clone, PartialEq)]
pub struct DemandMatrix<T> {
    data: Array2<T>,
}

impl<T: Scalar> DemandMatrix<T> {
    pub fn new(data: Array2<T>) -> Result<Self, ObjectiveError> {
        for ((v, f), &value) in data.indexed_iter() {
            if !(value >= T::zero() && value <= T::one()) {
                return Err(ObjectiveError::BadDemand { vehicle: v, file: f, value: value.as_f64() });
            }
        }
        Ok(Self { data })
    }

    pub fn view(&self) -> &Array2<T> {
        &self.data
    }

    pub fn vehicles(&self) -> usize {
        self.data.nrows()
    }

    pub fn files(&self) -> usize {
        self.data.ncols()
    }
}

/// Everything the placement problem needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemInstance<T> {
    pub network: Network<T>,
    pub residence: ResidenceMatrix<T>,
    pub demand: DemandMatrix<T>,
}

impl<T: Scalar> ProblemInstance<T> {
    pub fn new(network: Network<T>, residence: ResidenceMatrix<T>, demand: DemandMatrix<T>) -> Result<Self, ObjectiveError> {
        let r = network.topology.rsu_count();
        let f = network.catalog.len();
        if residence.rsus() != r {
            return Err(ObjectiveError::Dimension {
                what: "residence matrix",
                expected: (residence.vehicles(), r),
                got: residence.view().dim(),
            });
        }
        if demand.files() != f || demand.vehicles() != residence.vehicles() {
            return Err(ObjectiveError::Dimension {
                what: "demand matrix",
                expected: (residence.vehicles(), f),
                got: demand.view().dim(),
            });
        }
        Ok(Self { network, residence, demand })
    }

    pub fn rsu_count(&self) -> usize {
        self.network.topology.rsu_count()
    }

    pub fn mbs_count(&self) -> usize {
        self.network.topology.mbs_count()
    }

    pub fn file_count(&self) -> usize {
        self.network.catalog.len()
    }

    /// Number of binary decision variables, `(R + M)·F`.
    pub fn variable_count(&self) -> usize {
        (self.rsu_count() + self.mbs_count()) * self.file_count()
    }

    /// Per-(RSU, file) weights `ρ = τᵀ π`, R×F.
    pub fn weights(&self) -> Array2<T> {
        self.residence.view().t().dot(self.demand.view())
    }
}

/// Unconstrained pre-logistic decisions: `x` is R×F, `y` is M×F.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedPlacement<T> {
    pub x: Array2<T>,
    pub y: Array2<T>,
}

impl<T: Scalar> RelaxedPlacement<T> {
    pub fn constant(rsu_count: usize, mbs_count: usize, file_count: usize, value: T) -> Self {
        Self { x: Array2::from_elem((rsu_count, file_count), value), y: Array2::from_elem((mbs_count, file_count), value) }
    }

    /// Values of `±magnitude` reproducing a binary placement.
    pub fn from_placement(p: &Placement, magnitude: T) -> Self {
        let map = |b: &bool| if *b { magnitude } else { -magnitude };
        Self { x: p.x.map(map), y: p.y.map(map) }
    }

    /// Decisions after the logistic map.
    pub fn probabilities(&self) -> (Array2<T>, Array2<T>) {
        (self.x.mapv(sigmoid), self.y.mapv(sigmoid))
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().chain(self.y.iter()).all(|v| v.is_finite())
    }
}

/// Gradient blocks with the shape of a [`RelaxedPlacement`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient<T> {
    pub x: Array2<T>,
    pub y: Array2<T>,
}

impl<T: Scalar> Gradient<T> {
    pub fn zeros(rsu_count: usize, mbs_count: usize, file_count: usize) -> Self {
        Self { x: Array2::zeros((rsu_count, file_count)), y: Array2::zeros((mbs_count, file_count)) }
    }

    pub fn norm_sq(&self) -> T {
        self.x.iter().chain(self.y.iter()).map(|&v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().chain(self.y.iter()).all(|v| v.is_finite())
    }
}

/// Capacity constraint values `P_r`, `Q_m` and their gradients (row `r` of
/// `rsu_grads` is `p_r`, nonzero only in block `r`).
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintEval<T> {
    pub rsu_values: Vec<T>,
    pub mbs_values: Vec<T>,
    pub rsu_grads: Array2<T>,
    pub mbs_grads: Array2<T>,
}

impl<T: Scalar> ConstraintEval<T> {
    pub fn max_violation(&self) -> T {
        self.rsu_values.iter().chain(self.mbs_values.iter()).fold(T::zero(), |acc, &v| acc.max(v))
    }

    pub fn any_violated(&self) -> bool {
        self.rsu_values.iter().chain(self.mbs_values.iter()).any(|&v| v > T::zero())
    }
}

/// Evaluates `P_r = Σ_f h(x̃_{r,f}) s_f − S_r` and `Q_m` with gradients.
pub fn constraints<T: Scalar>(rp: &RelaxedPlacement<T>, catalog: &Catalog<T>, caps: &Capacities<T>) -> Result<ConstraintEval<T>, ObjectiveError> {
    let f = catalog.len();
    if rp.x.dim() != (caps.rsu.len(), f) {
        return Err(ObjectiveError::Dimension { what: "relaxed x", expected: (caps.rsu.len(), f), got: rp.x.dim() });
    }
    if rp.y.dim() != (caps.mbs.len(), f) {
        return Err(ObjectiveError::Dimension { what: "relaxed y", expected: (caps.mbs.len(), f), got: rp.y.dim() });
    }
    let sizes = ArrayView1::from(catalog.sizes());
    let eval = |block: &Array2<T>, budget: &[T]| {
        let values: Vec<T> = block
            .axis_iter(Axis(0))
            .zip(budget)
            .map(|(row, &cap)| row.iter().zip(sizes.iter()).map(|(&z, &s)| sigmoid(z) * s).sum::<T>() - cap)
            .collect();
        let mut grads = block.mapv(sigmoid_grad);
        grads *= &sizes;
        (values, grads)
    };
    let (rsu_values, rsu_grads) = eval(&rp.x, &caps.rsu);
    let (mbs_values, mbs_grads) = eval(&rp.y, &caps.mbs);
    Ok(ConstraintEval { rsu_values, mbs_values, rsu_grads, mbs_grads })
}

/// Cost evaluator with the weights `ρ` precomputed once per instance.
#[derive(Debug)]
pub struct CostModel<'a, T> {
    inst: &'a ProblemInstance<T>,
    weights: Array2<T>,
    /// Per file: telescoped tier coefficients c1..c5.
    coeffs: Vec<[T; 5]>,
    ops: AtomicU64,
}

/// Exclusive products `out[i] = Π_{j≠i} v[j]` without division.
fn exclusive_products<T: Scalar>(v: &[T], out: &mut Vec<T>) {
    out.clear();
    out.resize(v.len(), T::one());
    let mut acc = T::one();
    for i in 0..v.len() {
        out[i] = acc;
        acc *= v[i];
    }
    acc = T::one();
    for i in (0..v.len()).rev() {
        out[i] *= acc;
        acc *= v[i];
    }
}

impl<'a, T: Scalar> CostModel<'a, T> {
    pub fn new(inst: &'a ProblemInstance<T>) -> Self {
        let weights = inst.weights();
        let rates = &inst.network.topology.rates;
        let coeffs = inst
            .network
            .catalog
            .sizes()
            .iter()
            .map(|&s| {
                let d = tier_delays(s, rates);
                [d[1], d[2] - d[1], d[3] - d[2], d[4] - d[3], d[5] - d[4]]
            })
            .collect();
        let ops = AtomicU64::new((inst.residence.vehicles() * inst.rsu_count() * inst.file_count()) as u64);
        Self { inst, weights, coeffs, ops }
    }

    pub fn instance(&self) -> &ProblemInstance<T> {
        self.inst
    }

    pub fn weights(&self) -> &Array2<T> {
        &self.weights
    }

    /// Arithmetic work performed so far (precomputation included), in inner-loop element visits.
    pub fn op_count(&self) -> u64 {
        self.ops.load(Ordering::Relaxed)
    }

    pub(crate) fn count(&self, n: usize) {
        self.ops.fetch_add(n as u64, Ordering::Relaxed);
    }

    fn check(&self, rp: &RelaxedPlacement<T>) -> Result<(), ObjectiveError> {
        let (r, m, f) = (self.inst.rsu_count(), self.inst.mbs_count(), self.inst.file_count());
        if rp.x.dim() != (r, f) {
            return Err(ObjectiveError::Dimension { what: "relaxed x", expected: (r, f), got: rp.x.dim() });
        }
        if rp.y.dim() != (m, f) {
            return Err(ObjectiveError::Dimension { what: "relaxed y", expected: (m, f), got: rp.y.dim() });
        }
        Ok(())
    }

    /// Expected cost `W`.
    pub fn expected_cost(&self, rp: &RelaxedPlacement<T>) -> Result<T, ObjectiveError> {
        self.check(rp)?;
        Ok(self.evaluate(rp, None))
    }

    /// `W` together with its gradient with respect to `x̃`, `ỹ`.
    pub fn cost_and_gradient(&self, rp: &RelaxedPlacement<T>) -> Result<(T, Gradient<T>), ObjectiveError> {
        self.check(rp)?;
        let mut g = Gradient::zeros(self.inst.rsu_count(), self.inst.mbs_count(), self.inst.file_count());
        let w = self.evaluate(rp, Some(&mut g));
        Ok((w, g))
    }

    pub fn cost_gradient(&self, rp: &RelaxedPlacement<T>) -> Result<Gradient<T>, ObjectiveError> {
        self.cost_and_gradient(rp).map(|(_, g)| g)
    }

    /// Binary cost `Σ ρ[r,f] · delay(r, f)` of a placement, from the delay model directly.
    pub fn placement_cost(&self, p: &Placement) -> T {
        let topo = &self.inst.network.topology;
        let catalog = &self.inst.network.catalog;
        let mut total = T::zero();
        for ((r, f), &rho) in self.weights.indexed_iter() {
            if rho != T::zero() {
                total += rho * retrieval_delay(p, r, f, topo, catalog).expect("placement shaped like the instance");
            }
        }
        total
    }

    fn evaluate(&self, rp: &RelaxedPlacement<T>, mut grad: Option<&mut Gradient<T>>) -> T {
        let topo = &self.inst.network.topology;
        let (rsus, mbss, files) = (self.inst.rsu_count(), self.inst.mbs_count(), self.inst.file_count());
        let mut a = vec![T::zero(); rsus];
        let mut b = vec![T::zero(); mbss];
        let mut cluster_a = vec![T::one(); mbss];
        let mut cluster_rho = vec![T::zero(); mbss];
        let mut b_excl = Vec::with_capacity(mbss);
        let mut ca_excl = Vec::with_capacity(mbss);
        let mut member_vals = Vec::new();
        let mut member_excl = Vec::new();
        let mut total = T::zero();

        for f in 0..files {
            let [c1, c2, c3, c4, c5] = self.coeffs[f];
            for r in 0..rsus {
                a[r] = sigmoid(-rp.x[(r, f)]);
            }
            for m in 0..mbss {
                b[m] = sigmoid(-rp.y[(m, f)]);
            }
            let mut all_b = T::one();
            for m in 0..mbss {
                all_b *= b[m];
                let mut prod = T::one();
                let mut rho = T::zero();
                for &r in topo.members(m) {
                    prod *= a[r];
                    rho += self.weights[(r, f)];
                }
                cluster_a[m] = prod;
                cluster_rho[m] = rho;
            }
            let all_a: T = cluster_a.iter().copied().product();
            let all_rho: T = cluster_rho.iter().copied().sum();

            let mut wf = T::zero();
            for r in 0..rsus {
                let m = topo.cluster_of(r);
                wf += self.weights[(r, f)] * a[r] * (c1 + c2 * b[m]);
            }
            let mut spread = T::zero();
            for m in 0..mbss {
                wf += cluster_a[m] * cluster_rho[m] * (c3 * b[m] + c4 * all_b);
                spread += cluster_a[m] * cluster_rho[m];
            }
            wf += c5 * all_a * all_b * all_rho;
            total += wf;
            self.count(3 * (rsus + mbss));

            let Some(g) = grad.as_deref_mut() else { continue };
            exclusive_products(&b, &mut b_excl);
            exclusive_products(&cluster_a, &mut ca_excl);
            for m in 0..mbss {
                let members = topo.members(m);
                member_vals.clear();
                member_vals.extend(members.iter().map(|&r| a[r]));
                exclusive_products(&member_vals, &mut member_excl);
                let shared = cluster_rho[m] * (c3 * b[m] + c4 * all_b) + c5 * all_b * all_rho * ca_excl[m];
                let mut local = T::zero();
                for (i, &r) in members.iter().enumerate() {
                    let rho = self.weights[(r, f)];
                    local += rho * a[r];
                    let d_a = rho * (c1 + c2 * b[m]) + member_excl[i] * shared;
                    g.x[(r, f)] = -d_a * sigmoid_grad(rp.x[(r, f)]);
                }
                let d_b = c2 * local + c3 * cluster_a[m] * cluster_rho[m] + b_excl[m] * (c4 * spread + c5 * all_a * all_rho);
                g.y[(m, f)] = -d_b * sigmoid_grad(rp.y[(m, f)]);
            }
            self.count(4 * (rsus + mbss));
        }
        total
    }
}

/// Empirical gradient Lipschitz constants, already multiplied by the safety factor 2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzEstimate<T> {
    pub objective: T,
    /// Max over RSU constraints.
    pub rsu: T,
    /// Max over MBS constraints.
    pub mbs: T,
}

/// Samples `samples` point pairs in `[-bound, bound]^dim` and returns the
/// largest observed gradient difference ratio for `W`, `P_r` and `Q_m`.
/// Even-numbered pairs are local perturbations so curvature peaks are seen.
pub fn lipschitz_estimate<T: Scalar>(
    model: &CostModel<'_, T>,
    samples: usize,
    seed: u64,
    bound: T,
) -> Result<LipschitzEstimate<T>, ObjectiveError> {
    if samples < 2 {
        return Err(ObjectiveError::TooFewSamples(samples));
    }
    let inst = model.instance();
    let (r, m, f) = (inst.rsu_count(), inst.mbs_count(), inst.file_count());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = bound.as_f64();
    let draw = |rng: &mut ChaCha8Rng, rows: usize| Array2::from_shape_fn((rows, f), |_| T::of(rng.random_range(-b..=b)));
    let mut est = LipschitzEstimate { objective: T::zero(), rsu: T::zero(), mbs: T::zero() };
    let diff_ratio = |ga: ArrayView1<'_, T>, gb: ArrayView1<'_, T>, pa: ArrayView1<'_, T>, pb: ArrayView1<'_, T>| {
        let num: T = ga.iter().zip(gb.iter()).map(|(&u, &v)| (u - v) * (u - v)).sum();
        let den: T = pa.iter().zip(pb.iter()).map(|(&u, &v)| (u - v) * (u - v)).sum();
        if den > T::zero() {
            (num / den).sqrt()
        } else {
            T::zero()
        }
    };
    let caps = &inst.network.capacities;
    let catalog = &inst.network.catalog;
    for i in 0..samples {
        let pa = RelaxedPlacement { x: draw(&mut rng, r), y: draw(&mut rng, m) };
        let pb = if i % 2 == 0 {
            let eps = 1e-3 * b.max(1e-3);
            RelaxedPlacement {
                x: pa.x.mapv(|v| v + T::of(rng.random_range(-eps..=eps))),
                y: pa.y.mapv(|v| v + T::of(rng.random_range(-eps..=eps))),
            }
        } else {
            RelaxedPlacement { x: draw(&mut rng, r), y: draw(&mut rng, m) }
        };
        let ga = model.cost_gradient(&pa)?;
        let gb = model.cost_gradient(&pb)?;
        let flat = |g: &Gradient<T>| Array1::from_iter(g.x.iter().chain(g.y.iter()).copied());
        let flat_p = |p: &RelaxedPlacement<T>| Array1::from_iter(p.x.iter().chain(p.y.iter()).copied());
        est.objective = est.objective.max(diff_ratio(flat(&ga).view(), flat(&gb).view(), flat_p(&pa).view(), flat_p(&pb).view()));
        let ca = constraints(&pa, catalog, caps)?;
        let cb = constraints(&pb, catalog, caps)?;
        for q in 0..r {
            est.rsu = est.rsu.max(diff_ratio(ca.rsu_grads.row(q), cb.rsu_grads.row(q), pa.x.row(q), pb.x.row(q)));
        }
        for q in 0..m {
            est.mbs = est.mbs.max(diff_ratio(ca.mbs_grads.row(q), cb.mbs_grads.row(q), pa.y.row(q), pb.y.row(q)));
        }
    }
    let two = T::of(2.0);
    Ok(LipschitzEstimate { objective: est.objective * two, rsu: est.rsu * two, mbs: est.mbs * two })
}
