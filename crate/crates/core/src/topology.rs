//! Static network model: clusters of one MBS and its RSUs, link rates,
//! catalog sizes and storage capacities.
//!
//! Units are fixed across the crate: sizes in megabits, rates in
//! megabits/second, delays in seconds.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::config::ScenarioConfig;
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("duplicate RSU id {0}")]
    DuplicateRsu(usize),
    #[error("RSU {rsu} assigned to nonexistent MBS {mbs} (mbs_count = {mbs_count})")]
    UnknownMbs { rsu: usize, mbs: usize, mbs_count: usize },
    #[error("RSU ids must be contiguous from 0; id {0} is missing")]
    MissingRsu(usize),
    #[error("nonpositive rate {name} = {value}")]
    NonPositiveRate { name: &'static str, value: f64 },
    #[error("nonpositive size {value} for file {file}")]
    NonPositiveSize { file: usize, value: f64 },
    #[error("negative capacity {value} at {node}")]
    NegativeCapacity { node: String, value: f64 },
    #[error("topology needs at least one MBS")]
    NoMbs,
    #[error("catalog needs at least one file")]
    EmptyCatalog,
    #[error("{what}: expected {expected} entries, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },
    #[error("cluster layout given twice: use either rsus_per_mbs or an explicit rsu list")]
    ConflictingLayout,
    #[error("cluster layout missing: set rsus_per_mbs or list rsu entries")]
    MissingLayout,
}

/// Rates of the three link classes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkRates<T> {
    /// Cloud to MBS backhaul.
    pub cloud_mbs: T,
    /// MBS to member RSU fronthaul.
    pub mbs_rsu: T,
    /// MBS to MBS.
    pub mbs_mbs: T,
}

impl<T: Scalar> LinkRates<T> {
    pub fn new(cloud_mbs: T, mbs_rsu: T, mbs_mbs: T) -> Result<Self, TopologyError> {
        for (name, v) in [("rate_cloud_mbs", cloud_mbs), ("rate_mbs_rsu", mbs_rsu), ("rate_mbs_mbs", mbs_mbs)] {
            if !(v > T::zero()) || !v.is_finite() {
                return Err(TopologyError::NonPositiveRate { name, value: v.as_f64() });
            }
        }
        Ok(Self { cloud_mbs, mbs_rsu, mbs_mbs })
    }

    /// Warnings for rate orderings that contradict the usual `MR, MM >> CM` regime.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.mbs_rsu <= self.cloud_mbs {
            out.push(format!(
                "rate_mbs_rsu ({}) <= rate_cloud_mbs ({}): fronthaul is expected to be much faster than backhaul",
                self.mbs_rsu, self.cloud_mbs
            ));
        }
        if self.mbs_mbs <= self.cloud_mbs {
            out.push(format!(
                "rate_mbs_mbs ({}) <= rate_cloud_mbs ({}): inter-MBS links are expected to be much faster than backhaul",
                self.mbs_mbs, self.cloud_mbs
            ));
        }
        out
    }
}

/// Cluster structure and link rates.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology<T> {
    mbs_count: usize,
    cluster_of: Vec<usize>,
    members: Vec<Vec<usize>>,
    pub rates: LinkRates<T>,
}

impl<T: Scalar> Topology<T> {
    /// `cluster_of[r]` is the MBS serving RSU `r`.
    pub fn new(mbs_count: usize, cluster_of: Vec<usize>, rates: LinkRates<T>) -> Result<Self, TopologyError> {
        if mbs_count == 0 {
            return Err(TopologyError::NoMbs);
        }
        let mut members = vec![Vec::new(); mbs_count];
        for (rsu, &mbs) in cluster_of.iter().enumerate() {
            if mbs >= mbs_count {
                return Err(TopologyError::UnknownMbs { rsu, mbs, mbs_count });
            }
            members[mbs].push(rsu);
        }
        Ok(Self { mbs_count, cluster_of, members, rates })
    }

    /// `mbs_count` clusters of `per_cluster` RSUs each, numbered cluster by cluster.
    pub fn uniform(mbs_count: usize, per_cluster: usize, rates: LinkRates<T>) -> Result<Self, TopologyError> {
        let cluster_of = (0..mbs_count).flat_map(|m| std::iter::repeat_n(m, per_cluster)).collect();
        Self::new(mbs_count, cluster_of, rates)
    }

    pub fn mbs_count(&self) -> usize {
        self.mbs_count
    }

    pub fn rsu_count(&self) -> usize {
        self.cluster_of.len()
    }

    pub fn cluster_of(&self, rsu: usize) -> usize {
        self.cluster_of[rsu]
    }

    pub fn cluster_map(&self) -> &[usize] {
        &self.cluster_of
    }

    /// RSUs attached to MBS `mbs`, ascending.
    pub fn members(&self, mbs: usize) -> &[usize] {
        &self.members[mbs]
    }
}

/// File sizes in megabits.
#[derive(Debug, Clone, PartialEq)]
pub struct Catalog<T> {
    sizes: Vec<T>,
}

impl<T: Scalar> Catalog<T> {
    pub fn new(sizes: Vec<T>) -> Result<Self, TopologyError> {
        if sizes.is_empty() {
            return Err(TopologyError::EmptyCatalog);
        }
        for (file, &s) in sizes.iter().enumerate() {
            if !(s > T::zero()) || !s.is_finite() {
                return Err(TopologyError::NonPositiveSize { file, value: s.as_f64() });
            }
        }
        Ok(Self { sizes })
    }

    pub fn uniform(file_count: usize, size: T) -> Result<Self, TopologyError> {
        Self::new(vec![size; file_count])
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    pub fn size(&self, file: usize) -> T {
        self.sizes[file]
    }

    pub fn sizes(&self) -> &[T] {
        &self.sizes
    }

    pub fn total(&self) -> T {
        self.sizes.iter().copied().sum()
    }

    pub fn min_size(&self) -> T {
        self.sizes.iter().copied().fold(T::infinity(), T::min)
    }
}

/// Storage budgets in megabits.
#[derive(Debug, Clone, PartialEq)]
pub struct Capacities<T> {
    pub rsu: Vec<T>,
    pub mbs: Vec<T>,
}

impl<T: Scalar> Capacities<T> {
    pub fn new(rsu: Vec<T>, mbs: Vec<T>) -> Result<Self, TopologyError> {
        for (i, &c) in rsu.iter().enumerate() {
            if c < T::zero() || !c.is_finite() {
                return Err(TopologyError::NegativeCapacity { node: format!("rsu {i}"), value: c.as_f64() });
            }
        }
        for (i, &c) in mbs.iter().enumerate() {
            if c < T::zero() || !c.is_finite() {
                return Err(TopologyError::NegativeCapacity { node: format!("mbs {i}"), value: c.as_f64() });
            }
        }
        Ok(Self { rsu, mbs })
    }

    pub fn uniform(topo: &Topology<T>, rsu_cap: T, mbs_cap: T) -> Result<Self, TopologyError> {
        Self::new(vec![rsu_cap; topo.rsu_count()], vec![mbs_cap; topo.mbs_count()])
    }

    /// RSUs whose budget cannot hold even the smallest file.
    pub fn cacheless_rsus(&self, catalog: &Catalog<T>) -> Vec<usize> {
        let min = catalog.min_size();
        self.rsu.iter().enumerate().filter(|(_, &c)| c < min).map(|(i, _)| i).collect()
    }

    pub fn cacheless_mbs(&self, catalog: &Catalog<T>) -> Vec<usize> {
        let min = catalog.min_size();
        self.mbs.iter().enumerate().filter(|(_, &c)| c < min).map(|(i, _)| i).collect()
    }
}

/// The validated static part of a scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub topology: Topology<T>,
    pub catalog: Catalog<T>,
    pub capacities: Capacities<T>,
}

impl<T: Scalar> Network<T> {
    pub fn new(topology: Topology<T>, catalog: Catalog<T>, capacities: Capacities<T>) -> Result<Self, TopologyError> {
        if capacities.rsu.len() != topology.rsu_count() {
            return Err(TopologyError::Dimension {
                what: "rsu capacities",
                expected: topology.rsu_count(),
                got: capacities.rsu.len(),
            });
        }
        if capacities.mbs.len() != topology.mbs_count() {
            return Err(TopologyError::Dimension {
                what: "mbs capacities",
                expected: topology.mbs_count(),
                got: capacities.mbs.len(),
            });
        }
        Ok(Self { topology, catalog, capacities })
    }
}

/// Builds and validates the network described by a scenario configuration.
pub fn build_topology<T: Scalar>(config: &ScenarioConfig) -> Result<Network<T>, TopologyError> {
    let t = &config.topology;
    let rates = LinkRates::new(T::of(t.rate_cloud_mbs), T::of(t.rate_mbs_rsu), T::of(t.rate_mbs_mbs))?;
    for w in rates.warnings() {
        log::warn!("{w}");
    }

    let cluster_of = match (&t.rsus_per_mbs, &t.rsu) {
        (Some(_), Some(_)) => return Err(TopologyError::ConflictingLayout),
        (None, None) => return Err(TopologyError::MissingLayout),
        (Some(per), None) => (0..t.mbs_count).flat_map(|m| std::iter::repeat_n(m, *per)).collect(),
        (None, Some(entries)) => {
            let mut seen = BTreeSet::new();
            for e in entries {
                if !seen.insert(e.id) {
                    return Err(TopologyError::DuplicateRsu(e.id));
                }
                if e.mbs >= t.mbs_count {
                    return Err(TopologyError::UnknownMbs { rsu: e.id, mbs: e.mbs, mbs_count: t.mbs_count });
                }
            }
            if let Some(missing) = (0..entries.len()).find(|i| !seen.contains(i)) {
                return Err(TopologyError::MissingRsu(missing));
            }
            let mut map = vec![0; entries.len()];
            for e in entries {
                map[e.id] = e.mbs;
            }
            map
        }
    };
    let topology = Topology::new(t.mbs_count, cluster_of, rates)?;

    let c = &config.catalog;
    let sizes: Vec<T> = match &c.sizes {
        Some(s) => {
            if s.len() != c.file_count {
                return Err(TopologyError::Dimension { what: "catalog.sizes", expected: c.file_count, got: s.len() });
            }
            s.iter().map(|&v| T::of(v)).collect()
        }
        None => vec![T::of(c.file_size); c.file_count],
    };
    let catalog = Catalog::new(sizes)?;

    let k = &config.capacities;
    let rsu_caps = match &k.rsu_caps {
        Some(v) => v.iter().map(|&x| T::of(x)).collect(),
        None => vec![T::of(k.rsu_cap); topology.rsu_count()],
    };
    let mbs_caps = match &k.mbs_caps {
        Some(v) => v.iter().map(|&x| T::of(x)).collect(),
        None => vec![T::of(k.mbs_cap); topology.mbs_count()],
    };
    let capacities = Capacities::new(rsu_caps, mbs_caps)?;
    for r in capacities.cacheless_rsus(&catalog) {
        log::warn!("rsu {r} cannot hold any file and is treated as cache-less");
    }
    for m in capacities.cacheless_mbs(&catalog) {
        log::warn!("mbs {m} cannot hold any file and is treated as cache-less");
    }
    Network::new(topology, catalog, capacities)
}
