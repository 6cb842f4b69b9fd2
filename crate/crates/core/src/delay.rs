//! Per-(RSU, file) retrieval delay under the six-tier retrieval order:
//! local RSU, local MBS, RSUs of the same cluster, other MBSs, RSUs of other
//! clusters, cloud.

use ndarray::{Array2, ArrayView2};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::topology::{Capacities, Catalog, LinkRates, Topology};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DelayError {
    #[error("RSU id {rsu} out of range (R = {count})")]
    RsuOutOfRange { rsu: usize, count: usize },
    #[error("file id {file} out of range (F = {count})")]
    FileOutOfRange { file: usize, count: usize },
    #[error("placement shape {got:?} does not match {expected:?}")]
    Shape { expected: (usize, usize, usize), got: (usize, usize, usize) },
}

/// Where a request is served from; discriminants follow the retrieval order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SourceTier {
    LocalRsu = 0,
    LocalMbs = 1,
    ClusterRsu = 2,
    OtherMbs = 3,
    OtherRsu = 4,
    Cloud = 5,
}

impl SourceTier {
    pub const ALL: [SourceTier; 6] = [
        SourceTier::LocalRsu,
        SourceTier::LocalMbs,
        SourceTier::ClusterRsu,
        SourceTier::OtherMbs,
        SourceTier::OtherRsu,
        SourceTier::Cloud,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Served from inside the requesting RSU's cluster.
    pub fn is_cluster_hit(self) -> bool {
        self <= SourceTier::ClusterRsu
    }
}

/// Binary caching decisions: `x[(r, f)]` for RSUs, `y[(m, f)]` for MBSs.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Placement {
    pub x: Array2<bool>,
    pub y: Array2<bool>,
}

impl Placement {
    pub fn empty(rsu_count: usize, mbs_count: usize, file_count: usize) -> Self {
        Self { x: Array2::from_elem((rsu_count, file_count), false), y: Array2::from_elem((mbs_count, file_count), false) }
    }

    pub fn full(rsu_count: usize, mbs_count: usize, file_count: usize) -> Self {
        Self { x: Array2::from_elem((rsu_count, file_count), true), y: Array2::from_elem((mbs_count, file_count), true) }
    }

    pub fn rsu_count(&self) -> usize {
        self.x.nrows()
    }

    pub fn mbs_count(&self) -> usize {
        self.y.nrows()
    }

    pub fn file_count(&self) -> usize {
        self.x.ncols()
    }

    /// Stored megabits at RSU `r`.
    pub fn rsu_load<T: Scalar>(&self, r: usize, catalog: &Catalog<T>) -> T {
        self.x.row(r).iter().zip(catalog.sizes()).filter(|(c, _)| **c).map(|(_, s)| *s).sum()
    }

    pub fn mbs_load<T: Scalar>(&self, m: usize, catalog: &Catalog<T>) -> T {
        self.y.row(m).iter().zip(catalog.sizes()).filter(|(c, _)| **c).map(|(_, s)| *s).sum()
    }

    /// Every node within its storage budget, with no tolerance.
    pub fn is_feasible<T: Scalar>(&self, catalog: &Catalog<T>, caps: &Capacities<T>) -> bool {
        (0..self.rsu_count()).all(|r| self.rsu_load(r, catalog) <= caps.rsu[r])
            && (0..self.mbs_count()).all(|m| self.mbs_load(m, catalog) <= caps.mbs[m])
    }

    /// Files cached at RSU `r`, ascending.
    pub fn rsu_files(&self, r: usize) -> Vec<usize> {
        self.x.row(r).iter().enumerate().filter(|(_, c)| **c).map(|(f, _)| f).collect()
    }

    pub fn mbs_files(&self, m: usize) -> Vec<usize> {
        self.y.row(m).iter().enumerate().filter(|(_, c)| **c).map(|(f, _)| f).collect()
    }

    /// The placement as 0/1 reals.
    pub fn indicators<T: Scalar>(&self) -> (Array2<T>, Array2<T>) {
        let ind = |b: &bool| if *b { T::one() } else { T::zero() };
        (self.x.map(ind), self.y.map(ind))
    }

    pub(crate) fn check<T: Scalar>(&self, topo: &Topology<T>, catalog: &Catalog<T>) -> Result<(), DelayError> {
        let expected = (topo.rsu_count(), topo.mbs_count(), catalog.len());
        let got = (self.rsu_count(), self.mbs_count(), self.file_count());
        if expected != got || self.y.ncols() != self.x.ncols() {
            return Err(DelayError::Shape { expected, got });
        }
        Ok(())
    }
}

/// Delay of serving a file of `size` megabits from each tier.
pub fn tier_delays<T: Scalar>(size: T, rates: &LinkRates<T>) -> [T; 6] {
    let mr = size / rates.mbs_rsu;
    let mm = size / rates.mbs_mbs;
    let cm = size / rates.cloud_mbs;
    let two = T::of(2.0);
    [T::zero(), mr, two * mr, mm + mr, mm + two * mr, cm + mr]
}

fn check_ids<T: Scalar>(topo: &Topology<T>, catalog: &Catalog<T>, r: usize, f: usize) -> Result<(), DelayError> {
    if r >= topo.rsu_count() {
        return Err(DelayError::RsuOutOfRange { rsu: r, count: topo.rsu_count() });
    }
    if f >= catalog.len() {
        return Err(DelayError::FileOutOfRange { file: f, count: catalog.len() });
    }
    Ok(())
}

/// The six case delays of serving `f` at RSU `r`, evaluated on real-valued
/// decisions in `[0, 1]`. On 0/1 inputs at most one entry is nonzero.
///
/// `x` is R×F, `y` is M×F. Ids are not checked.
pub fn relaxed_case_delays<T: Scalar>(
    x: ArrayView2<'_, T>,
    y: ArrayView2<'_, T>,
    r: usize,
    f: usize,
    topo: &Topology<T>,
    catalog: &Catalog<T>,
) -> [T; 6] {
    let one = T::one();
    let m = topo.cluster_of(r);
    let d = tier_delays(catalog.size(f), &topo.rates);
    let miss_local = one - x[(r, f)];
    let miss_mbs = one - y[(m, f)];
    let members = topo.members(m);

    let cluster_others_empty: T = members.iter().filter(|&&q| q != r).map(|&q| one - x[(q, f)]).product();
    let cluster_empty: T = members.iter().map(|&q| one - x[(q, f)]).product();
    let other_mbs_empty: T = (0..topo.mbs_count()).filter(|&n| n != m).map(|n| one - y[(n, f)]).product();
    let all_mbs_empty: T = (0..topo.mbs_count()).map(|n| one - y[(n, f)]).product();
    let outside_empty: T = (0..topo.rsu_count()).filter(|&q| topo.cluster_of(q) != m).map(|q| one - x[(q, f)]).product();
    let all_rsu_empty: T = (0..topo.rsu_count()).map(|q| one - x[(q, f)]).product();

    [
        T::zero(),
        d[1] * miss_local * y[(m, f)],
        d[2] * miss_local * miss_mbs * (one - cluster_others_empty),
        d[3] * miss_mbs * cluster_empty * (one - other_mbs_empty),
        d[4] * cluster_empty * all_mbs_empty * (one - outside_empty),
        d[5] * all_rsu_empty * all_mbs_empty,
    ]
}

/// Case delays under a binary placement.
pub fn case_delays<T: Scalar>(
    placement: &Placement,
    r: usize,
    f: usize,
    topo: &Topology<T>,
    catalog: &Catalog<T>,
) -> Result<[T; 6], DelayError> {
    placement.check(topo, catalog)?;
    check_ids(topo, catalog, r, f)?;
    let (x, y) = placement.indicators::<T>();
    Ok(relaxed_case_delays(x.view(), y.view(), r, f, topo, catalog))
}

/// Total retrieval delay: the sum of the case delays.
pub fn retrieval_delay<T: Scalar>(
    placement: &Placement,
    r: usize,
    f: usize,
    topo: &Topology<T>,
    catalog: &Catalog<T>,
) -> Result<T, DelayError> {
    Ok(case_delays(placement, r, f, topo, catalog)?.iter().copied().sum())
}

/// First tier in retrieval order holding `f`; the cloud always resolves.
pub fn resolve_source<T: Scalar>(placement: &Placement, r: usize, f: usize, topo: &Topology<T>) -> SourceTier {
    let m = topo.cluster_of(r);
    if placement.x[(r, f)] {
        SourceTier::LocalRsu
    } else if placement.y[(m, f)] {
        SourceTier::LocalMbs
    } else if topo.members(m).iter().any(|&q| placement.x[(q, f)]) {
        SourceTier::ClusterRsu
    } else if (0..topo.mbs_count()).any(|n| placement.y[(n, f)]) {
        SourceTier::OtherMbs
    } else if (0..topo.rsu_count()).any(|q| placement.x[(q, f)]) {
        SourceTier::OtherRsu
    } else {
        SourceTier::Cloud
    }
}

/// Delay of the tier that serves `f` at `r`, from the tier search alone.
pub fn served_delay<T: Scalar>(placement: &Placement, r: usize, f: usize, topo: &Topology<T>, catalog: &Catalog<T>) -> (SourceTier, T) {
    let tier = resolve_source(placement, r, f, topo);
    (tier, tier_delays(catalog.size(f), &topo.rates)[tier.index()])
}
