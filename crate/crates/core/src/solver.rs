//! Adaptive-penalty gradient descent on the relaxed caching problem, and the
//! sort-and-fill rounding back to a feasible binary placement.
//!
//! Each iteration picks the penalty coefficient `β` from the current cost
//! gradient `w` and the capacity constraints, then takes one step on
//!
//! ```text
//! L = W + β/2 · Σ_r ReLU[P_r]² + β/2 · Σ_m ReLU[Q_m]²
//! ```
//!
//! In [`SolverMode::Practical`] the step size is the configured constant. In
//! [`SolverMode::StrictDescent`] it starts from the smallest analytic bound
//! (using sampled Lipschitz constants) and is halved until `L` does not rise,
//! violated constraints do not grow and satisfied ones stay satisfied.

use std::io::{self, Write};

use ndarray::{Array2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{SolverModeName, SolverSection};
use crate::delay::Placement;
use crate::objective::{
    constraints, lipschitz_estimate, ConstraintEval, CostModel, Gradient, LipschitzEstimate, ObjectiveError, ProblemInstance,
    RelaxedPlacement,
};
use crate::scalar::{relu, Scalar};
use crate::topology::{Capacities, Catalog};

const MAX_HALVINGS: usize = 40;
const DESCENT_SLACK: f64 = 1e-12;
/// Half-width of the box the strict-mode Lipschitz constants are sampled in.
const LIPSCHITZ_BOX: f64 = 8.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("penalty coefficient must be nonnegative, got {0}")]
    NegativePenalty(f64),
    #[error("degenerate instance: {kind} {node} is over capacity but its constraint gradient vanishes")]
    Degenerate { kind: &'static str, node: usize },
    #[error("non-finite gradient at iteration {0}")]
    NonFinite(usize),
    #[error("invalid solver setting: {0}")]
    Config(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SolverMode {
    #[default]
    Practical,
    StrictDescent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub eta: f64,
    pub max_iters: usize,
    pub window: usize,
    pub rel_tol: f64,
    pub mode: SolverMode,
    pub seed: u64,
    pub lipschitz_samples: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self::from(&SolverSection::default())
    }
}

impl From<&SolverSection> for SolverConfig {
    fn from(s: &SolverSection) -> Self {
        Self {
            eta: s.eta,
            max_iters: s.max_iters,
            window: s.window,
            rel_tol: s.rel_tol,
            mode: match s.mode {
                SolverModeName::Practical => SolverMode::Practical,
                SolverModeName::StrictDescent => SolverMode::StrictDescent,
            },
            seed: s.seed,
            lipschitz_samples: s.lipschitz_samples,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(SolverError::Config("eta must be positive"));
        }
        if self.max_iters == 0 {
            return Err(SolverError::Config("max_iters must be at least 1"));
        }
        if self.window == 0 {
            return Err(SolverError::Config("window must be at least 1"));
        }
        if !(self.rel_tol >= 0.0) {
            return Err(SolverError::Config("rel_tol must be nonnegative"));
        }
        if self.mode == SolverMode::StrictDescent && self.lipschitz_samples < 2 {
            return Err(SolverError::Config("lipschitz_samples must be at least 2"));
        }
        Ok(())
    }
}

/// One row of the iteration trace, describing the iterate after the step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterRecord<T> {
    pub w: T,
    /// `L` at the new iterate, with the `β` used for the step.
    pub l: T,
    /// `L` at the previous iterate, same `β`.
    pub l_before: T,
    pub beta: T,
    pub max_violation: T,
    /// Step size actually taken.
    pub eta: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverState<T> {
    pub rp: RelaxedPlacement<T>,
    pub beta: T,
    pub iteration: usize,
    pub history: Vec<IterRecord<T>>,
}

impl<T: Scalar> SolverState<T> {
    pub fn new(rp: RelaxedPlacement<T>) -> Self {
        Self { rp, beta: T::zero(), iteration: 0, history: Vec::new() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Converged,
    MaxIterations,
}

impl Termination {
    pub fn as_str(self) -> &'static str {
        match self {
            Termination::Converged => "converged",
            Termination::MaxIterations => "max-iterations",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport<T> {
    /// Relaxed iterate that was rounded.
    pub relaxed: RelaxedPlacement<T>,
    pub placement: Placement,
    pub trace: Vec<IterRecord<T>>,
    pub iterations: usize,
    pub termination: Termination,
    /// Binary cost of `placement`.
    pub cost: T,
}

/// `L = W + β/2 · (Σ ReLU[P_r]² + Σ ReLU[Q_m]²)`.
pub fn extended_objective<T: Scalar>(model: &CostModel<'_, T>, rp: &RelaxedPlacement<T>, beta: T) -> Result<T, SolverError> {
    if beta < T::zero() || beta.is_nan() {
        return Err(SolverError::NegativePenalty(beta.as_f64()));
    }
    let w = model.expected_cost(rp)?;
    let net = &model.instance().network;
    let cons = constraints(rp, &net.catalog, &net.capacities)?;
    Ok(w + penalty_term(&cons, beta))
}

fn penalty_term<T: Scalar>(cons: &ConstraintEval<T>, beta: T) -> T {
    if beta == T::zero() {
        return T::zero();
    }
    let sq: T = cons.rsu_values.iter().chain(cons.mbs_values.iter()).map(|&v| relu(v) * relu(v)).sum();
    beta * T::of(0.5) * sq
}

fn dot<'a, T: Scalar>(a: impl IntoIterator<Item = &'a T>, b: impl IntoIterator<Item = &'a T>) -> T {
    a.into_iter().zip(b).map(|(&u, &v)| u * v).sum()
}

/// Per-constraint quantities used by the penalty rule and the step-size bounds.
struct ConstraintTerms<T> {
    /// `w_r · p_r` for RSUs then `w_m · q_m` for MBSs.
    wp: Vec<T>,
    /// `‖p_r‖²`, then `‖q_m‖²`.
    pp: Vec<T>,
    /// Constraint values, same order.
    value: Vec<T>,
    rsu_count: usize,
}

impl<T: Scalar> ConstraintTerms<T> {
    fn new(w: &Gradient<T>, cons: &ConstraintEval<T>) -> Self {
        let mut wp = Vec::new();
        let mut pp = Vec::new();
        for (wr, pr) in w.x.rows().into_iter().zip(cons.rsu_grads.rows()) {
            wp.push(dot(wr, pr));
            pp.push(dot(pr, pr));
        }
        for (wm, qm) in w.y.rows().into_iter().zip(cons.mbs_grads.rows()) {
            wp.push(dot(wm, qm));
            pp.push(dot(qm, qm));
        }
        let value = cons.rsu_values.iter().chain(cons.mbs_values.iter()).copied().collect();
        Self { wp, pp, value, rsu_count: cons.rsu_values.len() }
    }

    fn node(&self, i: usize) -> (&'static str, usize) {
        if i < self.rsu_count {
            ("RSU", i)
        } else {
            ("MBS", i - self.rsu_count)
        }
    }

    /// `φ = Σ ReLU[P] · (w · p)`.
    fn phi(&self) -> T {
        self.value.iter().zip(&self.wp).map(|(&v, &wp)| relu(v) * wp).sum()
    }
}

/// Penalty coefficient for the next step.
///
/// No violation gives 0. Otherwise with `β_i = −(w_i·p_i)/(ReLU[P_i]‖p_i‖²)`
/// over violated constraints: if `φ ≥ 0`, `max(0, β_i)`; if `φ < 0` and
/// `−‖w‖²/φ` exceeds every `β_i`, the midpoint `−‖w‖²/(2φ) + max β_i / 2`;
/// else `max(β_i + 1/(η‖p_i‖²))`.
pub fn compute_penalty<T: Scalar>(w: &Gradient<T>, cons: &ConstraintEval<T>, eta: T) -> Result<T, SolverError> {
    let terms = ConstraintTerms::new(w, cons);
    penalty_from_terms(&terms, w.norm_sq(), eta)
}

fn penalty_from_terms<T: Scalar>(terms: &ConstraintTerms<T>, w_norm_sq: T, eta: T) -> Result<T, SolverError> {
    let mut bounds = Vec::new();
    for (i, &v) in terms.value.iter().enumerate() {
        if v > T::zero() {
            if terms.pp[i] <= T::zero() {
                let (kind, node) = terms.node(i);
                return Err(SolverError::Degenerate { kind, node });
            }
            bounds.push((i, -terms.wp[i] / (v * terms.pp[i])));
        }
    }
    if bounds.is_empty() {
        return Ok(T::zero());
    }
    let max_bound = bounds.iter().map(|&(_, b)| b).fold(T::neg_infinity(), T::max);
    let phi = terms.phi();
    if phi >= T::zero() {
        return Ok(max_bound.max(T::zero()));
    }
    let ceiling = -w_norm_sq / phi;
    if bounds.iter().all(|&(_, b)| ceiling > b) {
        return Ok(ceiling * T::of(0.5) + max_bound * T::of(0.5));
    }
    let fallback = bounds
        .iter()
        .map(|&(i, b)| b + T::one() / (eta * terms.pp[i]))
        .fold(T::neg_infinity(), T::max);
    Ok(fallback.max(T::zero()))
}

/// Gradient of `L`: `w + β · ReLU[P_r] · p_r` blockwise.
fn penalized_gradient<T: Scalar>(w: &Gradient<T>, cons: &ConstraintEval<T>, beta: T) -> Gradient<T> {
    let mut g = w.clone();
    if beta > T::zero() {
        for (r, &v) in cons.rsu_values.iter().enumerate() {
            if v > T::zero() {
                g.x.row_mut(r).scaled_add(beta * v, &cons.rsu_grads.row(r));
            }
        }
        for (m, &v) in cons.mbs_values.iter().enumerate() {
            if v > T::zero() {
                g.y.row_mut(m).scaled_add(beta * v, &cons.mbs_grads.row(m));
            }
        }
    }
    g
}

fn moved<T: Scalar>(rp: &RelaxedPlacement<T>, g: &Gradient<T>, eta: T) -> RelaxedPlacement<T> {
    let shift = |z: &Array2<T>, d: &Array2<T>| {
        let mut out = z.clone();
        Zip::from(&mut out).and(d).for_each(|o, &d| *o = *o - eta * d);
        out
    };
    RelaxedPlacement { x: shift(&rp.x, &g.x), y: shift(&rp.y, &g.y) }
}

/// Iterates the penalty method on one instance.
pub struct Solver<'a, T> {
    model: CostModel<'a, T>,
    cfg: SolverConfig,
    lipschitz: Option<LipschitzEstimate<T>>,
}

impl<'a, T: Scalar> Solver<'a, T> {
    pub fn new(inst: &'a ProblemInstance<T>, cfg: SolverConfig) -> Result<Self, SolverError> {
        cfg.validate()?;
        let model = CostModel::new(inst);
        let lipschitz = match cfg.mode {
            SolverMode::Practical => None,
            SolverMode::StrictDescent => {
                Some(lipschitz_estimate(&model, cfg.lipschitz_samples, cfg.seed ^ 0x9e37_79b9, T::of(LIPSCHITZ_BOX))?)
            }
        };
        Ok(Self { model, cfg, lipschitz })
    }

    pub fn model(&self) -> &CostModel<'a, T> {
        &self.model
    }

    pub fn config(&self) -> &SolverConfig {
        &self.cfg
    }

    /// Zero plus uniform noise in `[-0.01, 0.01]` drawn from the configured seed.
    pub fn initial_state(&self) -> SolverState<T> {
        let inst = self.model.instance();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let mut noise = |rows: usize| Array2::from_shape_fn((rows, inst.file_count()), |_| T::of(rng.random_range(-0.01..=0.01)));
        let x = noise(inst.rsu_count());
        let y = noise(inst.mbs_count());
        SolverState::new(RelaxedPlacement { x, y })
    }

    /// One penalty update and gradient step.
    pub fn step(&self, state: &mut SolverState<T>) -> Result<(), SolverError> {
        self.step_with_eta(state, T::of(self.cfg.eta))
    }

    /// [`Solver::step`] with an explicit base step size; `eta == 0` leaves the iterate unchanged.
    pub fn step_with_eta(&self, state: &mut SolverState<T>, eta: T) -> Result<(), SolverError> {
        let net = &self.model.instance().network;
        let (w_val, w) = self.model.cost_and_gradient(&state.rp)?;
        if !w.is_finite() || !w_val.is_finite() {
            return Err(SolverError::NonFinite(state.iteration));
        }
        let cons = constraints(&state.rp, &net.catalog, &net.capacities)?;
        let work = self.model.instance().variable_count();
        self.model.count(3 * work);
        let terms = ConstraintTerms::new(&w, &cons);
        let beta = if eta > T::zero() { penalty_from_terms(&terms, w.norm_sq(), eta)? } else { T::zero() };
        let grad = penalized_gradient(&w, &cons, beta);
        if !grad.is_finite() {
            return Err(SolverError::NonFinite(state.iteration));
        }
        let l_before = w_val + penalty_term(&cons, beta);

        let (next, taken) = match (self.cfg.mode, &self.lipschitz) {
            _ if eta == T::zero() => (state.rp.clone(), T::zero()),
            (SolverMode::StrictDescent, Some(lip)) => {
                let start = self.strict_initial_eta(eta, &w, &grad, &terms, beta, lip);
                self.backtrack(&state.rp, &grad, &cons, beta, l_before, start)?
            }
            _ => (moved(&state.rp, &grad, eta), eta),
        };

        let w_new = self.model.expected_cost(&next)?;
        let cons_new = constraints(&next, &net.catalog, &net.capacities)?;
        self.model.count(3 * work);
        let record = IterRecord {
            w: w_new,
            l: w_new + penalty_term(&cons_new, beta),
            l_before,
            beta,
            max_violation: cons_new.max_violation(),
            eta: taken,
        };
        state.rp = next;
        state.beta = beta;
        state.iteration += 1;
        state.history.push(record);
        Ok(())
    }

    /// Smallest positive analytic step bound, capped by `eta`.
    fn strict_initial_eta(
        &self,
        eta: T,
        w: &Gradient<T>,
        grad: &Gradient<T>,
        terms: &ConstraintTerms<T>,
        beta: T,
        lip: &LipschitzEstimate<T>,
    ) -> T {
        let two = T::of(2.0);
        let mut best = eta;
        let mut consider = |b: T| {
            if b.is_finite() && b > T::zero() && b < best {
                best = b;
            }
        };
        let grad_sq = grad.norm_sq();
        if grad_sq > T::zero() {
            consider(two * (w.norm_sq() + beta * terms.phi()) / (lip.objective * grad_sq));
        }
        let any_violated = terms.value.iter().any(|&v| v > T::zero());
        let rows = grad.x.rows().into_iter().chain(grad.y.rows()).zip(w.x.rows().into_iter().chain(w.y.rows()));
        for (i, (g_row, w_row)) in rows.enumerate() {
            let lam = if i < terms.rsu_count { lip.rsu } else { lip.mbs };
            let v = terms.value[i];
            if v > T::zero() {
                let g_sq = dot(g_row, g_row);
                if g_sq > T::zero() {
                    consider(two * (terms.wp[i] + beta * v * terms.pp[i]) / (lam * g_sq));
                }
            } else if !any_violated {
                let w_sq = dot(w_row, w_row);
                if w_sq > T::zero() {
                    let disc = terms.wp[i] * terms.wp[i] - two * lam * w_sq * v;
                    consider((terms.wp[i] + disc.max(T::zero()).sqrt()) / (lam * w_sq));
                }
            }
        }
        best
    }

    fn backtrack(
        &self,
        rp: &RelaxedPlacement<T>,
        grad: &Gradient<T>,
        cons: &ConstraintEval<T>,
        beta: T,
        l_before: T,
        start: T,
    ) -> Result<(RelaxedPlacement<T>, T), SolverError> {
        let net = &self.model.instance().network;
        let slack = T::of(DESCENT_SLACK);
        let mut eta = start;
        for _ in 0..=MAX_HALVINGS {
            let cand = moved(rp, grad, eta);
            let cons_new = constraints(&cand, &net.catalog, &net.capacities)?;
            let l_new = self.model.expected_cost(&cand)? + penalty_term(&cons_new, beta);
            let old = cons.rsu_values.iter().chain(cons.mbs_values.iter());
            let new = cons_new.rsu_values.iter().chain(cons_new.mbs_values.iter());
            let constraints_ok = old.zip(new).all(|(&o, &n)| if o > T::zero() { n <= o } else { n <= T::zero() });
            if l_new <= l_before + slack && constraints_ok {
                return Ok((cand, eta));
            }
            eta = eta * T::of(0.5);
        }
        Ok((rp.clone(), T::zero()))
    }

    fn converged(&self, history: &[IterRecord<T>]) -> bool {
        let k = self.cfg.window;
        if history.len() <= k {
            return false;
        }
        let now = history[history.len() - 1].l;
        let then = history[history.len() - 1 - k].l;
        let scale = then.abs().max(T::min_positive_value());
        (now - then).abs() / scale < T::of(self.cfg.rel_tol)
    }

    /// Runs to convergence or `max_iters`, then rounds. Without convergence the
    /// rounded iterate is the best one seen: feasible iterates ranked by `W`,
    /// ahead of infeasible ones ranked by violation.
    pub fn solve(&self) -> Result<SolveReport<T>, SolverError> {
        let mut state = self.initial_state();
        let mut best: Option<(bool, T, RelaxedPlacement<T>)> = None;
        let mut termination = Termination::MaxIterations;
        while state.iteration < self.cfg.max_iters {
            self.step(&mut state)?;
            let rec = state.history[state.history.len() - 1];
            let feasible = rec.max_violation <= T::zero();
            let key = if feasible { rec.w } else { rec.max_violation };
            let better = match &best {
                None => true,
                Some((bf, bk, _)) => (feasible && !bf) || (feasible == *bf && key < *bk),
            };
            if better {
                best = Some((feasible, key, state.rp.clone()));
            }
            if self.converged(&state.history) {
                termination = Termination::Converged;
                break;
            }
        }
        let relaxed = match (termination, best) {
            (Termination::MaxIterations, Some((_, _, rp))) => rp,
            _ => state.rp,
        };
        let net = &self.model.instance().network;
        let placement = round_placement(&relaxed, &net.catalog, &net.capacities);
        let cost = self.model.placement_cost(&placement);
        Ok(SolveReport { relaxed, placement, iterations: state.iteration, trace: state.history, termination, cost })
    }
}

/// Solves one instance with a fresh [`Solver`].
pub fn solve<T: Scalar>(inst: &ProblemInstance<T>, cfg: &SolverConfig) -> Result<SolveReport<T>, SolverError> {
    Solver::new(inst, cfg.clone())?.solve()
}

/// Per node, caches files in descending score order (ties to the lower file
/// id) while the cumulative size fits; stops at the first file that does not.
pub fn round_placement<T: Scalar>(rp: &RelaxedPlacement<T>, catalog: &Catalog<T>, caps: &Capacities<T>) -> Placement {
    let (r, f) = rp.x.dim();
    let m = rp.y.nrows();
    let mut p = Placement::empty(r, m, f);
    let fill = |scores: ndarray::ArrayView1<'_, T>, cap: T, mut row: ndarray::ArrayViewMut1<'_, bool>| {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
        let mut used = T::zero();
        for file in order {
            let next = used + catalog.size(file);
            if next > cap {
                break;
            }
            used = next;
            row[file] = true;
        }
    };
    for node in 0..r {
        fill(rp.x.row(node), caps.rsu[node], p.x.row_mut(node));
    }
    for node in 0..m {
        fill(rp.y.row(node), caps.mbs[node], p.y.row_mut(node));
    }
    p
}

/// Writes the iteration trace as CSV: `iteration,W,L,beta,max_violation`.
pub fn write_trace_csv<T: Scalar, W: Write>(trace: &[IterRecord<T>], mut out: W) -> io::Result<()> {
    writeln!(out, "iteration,W,L,beta,max_violation")?;
    for (i, rec) in trace.iter().enumerate() {
        writeln!(out, "{},{:e},{:e},{:e},{:e}", i + 1, rec.w.as_f64(), rec.l.as_f64(), rec.beta.as_f64(), rec.max_violation.as_f64())?;
    }
    Ok(())
}
