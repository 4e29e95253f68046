//! Priority-aware max-min rate allocation.
//!
//! Each link runs two classes (HIGH and LOW) behind a weighted scheduler
//! that lends whatever one class cannot use to the other. Inside a class,
//! flows share max-min fairly. The class split on every link depends on how
//! much each class can actually push through it, which depends on the
//! splits elsewhere, so the allocation is found as a fixed point.

use std::collections::BTreeMap;

use crate::types::{FlowId, LinkId, LinkSpec, Priority, Scheme, Topology};

/// Stop once no class split moves by more than this fraction of capacity.
pub const SPLIT_TOLERANCE: f64 = 1e-6;
pub const MAX_ITERATIONS: u32 = 100;

/// A class is backlogged on a link when it fills its capacity to within this
/// fraction of the link capacity.
const BACKLOG_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct AllocationResult {
    /// Allocated rate of every active flow, bits per second.
    pub rates: BTreeMap<FlowId, f64>,
    /// Final (c_high, c_low) split of each link that carries traffic.
    pub class_split: BTreeMap<LinkId, (f64, f64)>,
    pub iterations_used: u32,
    pub converged: bool,
}

/// One active flow as seen by the allocator.
#[derive(Debug, Clone, Copy)]
pub struct ActiveFlow<'a> {
    pub id: FlowId,
    pub route: &'a [LinkId],
    pub priority: Priority,
}

/// Progressive filling over dense indices.
///
/// `members[l]` lists the flows crossing link `l` in ascending flow order and
/// `routes[f]` the links of flow `f`. Flows outside every member list keep
/// rate zero.
fn progressive_fill(
    caps: &[f64],
    members: &[Vec<usize>],
    routes: &[Vec<usize>],
    rates: &mut [f64],
    in_class: &[bool],
) {
    let mut residual = caps.to_vec();
    let mut unfrozen: Vec<usize> = members.iter().map(Vec::len).collect();
    let mut frozen = vec![false; routes.len()];
    let mut remaining = in_class.iter().filter(|&&c| c).count();

    while remaining > 0 {
        let mut best: Option<(f64, usize)> = None;
        for (l, &n) in unfrozen.iter().enumerate() {
            if n == 0 {
                continue;
            }
            let level = residual[l].max(0.0) / n as f64;
            if best.is_none_or(|(b, _)| level < b) {
                best = Some((level, l));
            }
        }
        let Some((level, link)) = best else {
            break;
        };
        for &f in &members[link] {
            if frozen[f] {
                continue;
            }
            frozen[f] = true;
            rates[f] = level;
            remaining -= 1;
            for &m in &routes[f] {
                residual[m] -= level;
                unfrozen[m] -= 1;
            }
        }
    }
}

/// Max-min fair rates of `flows` over links with the given capacities.
///
/// Ties between equally constrained links are broken by ascending link id,
/// and flows are frozen in ascending flow id.
pub fn maxmin_single_class(
    capacities: &BTreeMap<LinkId, f64>,
    flows: &[(FlowId, Vec<LinkId>)],
) -> BTreeMap<FlowId, f64> {
    let index: BTreeMap<LinkId, usize> = capacities
        .keys()
        .enumerate()
        .map(|(i, &l)| (l, i))
        .collect();
    let caps: Vec<f64> = capacities.values().copied().collect();

    let mut order: Vec<usize> = (0..flows.len()).collect();
    order.sort_by_key(|&i| flows[i].0);

    let mut members = vec![Vec::new(); caps.len()];
    let mut routes = Vec::with_capacity(flows.len());
    for (dense, &i) in order.iter().enumerate() {
        let route: Vec<usize> = flows[i].1.iter().map(|l| index[l]).collect();
        for &l in &route {
            members[l].push(dense);
        }
        routes.push(route);
    }
    let mut rates = vec![0.0; flows.len()];
    progressive_fill(
        &caps,
        &members,
        &routes,
        &mut rates,
        &vec![true; flows.len()],
    );
    order
        .iter()
        .enumerate()
        .map(|(dense, &i)| (flows[i].0, rates[dense]))
        .collect()
}

fn class_shares(capacity: f64, w_high: u32, w_low: u32) -> (f64, f64) {
    let total = f64::from(w_high + w_low);
    (
        capacity * f64::from(w_high) / total,
        capacity * f64::from(w_low) / total,
    )
}

fn split_capacity(
    capacity: f64,
    w_high: u32,
    w_low: u32,
    high_backlogged: bool,
    low_backlogged: bool,
    high_takeup: f64,
    low_takeup: f64,
) -> (f64, f64) {
    let (share_high, share_low) = class_shares(capacity, w_high, w_low);
    let spare_high = if high_backlogged {
        0.0
    } else {
        (share_high - high_takeup).max(0.0)
    };
    let spare_low = if low_backlogged {
        0.0
    } else {
        (share_low - low_takeup).max(0.0)
    };
    let high = share_high - spare_high + spare_low;
    let low = share_low - spare_low + spare_high;
    // the borrowing side takes exactly what the lender leaves
    if spare_low > 0.0 && spare_high == 0.0 {
        (capacity - low, low)
    } else if spare_high > 0.0 && spare_low == 0.0 {
        (high, capacity - high)
    } else {
        (high, low)
    }
}

/// Split a link's effective capacity between the two classes.
///
/// Both classes start from their weighted shares; a class that is not
/// backlogged and takes up less than its share lends the remainder to the
/// other. The two parts always sum to the effective capacity, so a class
/// with no traffic (not backlogged, zero takeup) leaves everything to the
/// other class.
pub fn split_link_capacity(
    link: &LinkSpec,
    high_backlogged: bool,
    low_backlogged: bool,
    high_takeup: f64,
    low_takeup: f64,
) -> (f64, f64) {
    split_capacity(
        link.effective_capacity(),
        link.weight_high,
        link.weight_low,
        high_backlogged,
        low_backlogged,
        high_takeup,
        low_takeup,
    )
}

/// Dense view of a topology's links, reused across allocations.
#[derive(Debug, Clone)]
pub struct LinkTable {
    ids: Vec<LinkId>,
    index: BTreeMap<LinkId, usize>,
    capacity: Vec<f64>,
    weights: Vec<(u32, u32)>,
}

impl LinkTable {
    pub fn new(topology: &Topology) -> Self {
        let mut links: Vec<&LinkSpec> = topology.links.iter().collect();
        links.sort_by_key(|l| l.id);
        LinkTable {
            ids: links.iter().map(|l| l.id).collect(),
            index: links.iter().enumerate().map(|(i, l)| (l.id, i)).collect(),
            capacity: links.iter().map(|l| l.effective_capacity()).collect(),
            weights: links
                .iter()
                .map(|l| (l.weight_high, l.weight_low))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dense(&self, id: LinkId) -> usize {
        self.index[&id]
    }

    pub fn id(&self, dense: usize) -> LinkId {
        self.ids[dense]
    }

    pub fn capacity(&self, dense: usize) -> f64 {
        self.capacity[dense]
    }

    /// Allocate rates to `flows`, which must already be sorted by id.
    pub fn allocate(&self, flows: &[ActiveFlow<'_>], scheme: &Scheme) -> AllocationResult {
        debug_assert!(flows.windows(2).all(|w| w[0].id < w[1].id));
        let n_links = self.len();
        let routes: Vec<Vec<usize>> = flows
            .iter()
            .map(|f| f.route.iter().map(|l| self.dense(*l)).collect())
            .collect();
        let priority: Vec<Priority> = flows
            .iter()
            .map(|f| match scheme {
                Scheme::Baseline => Priority::High,
                _ => f.priority,
            })
            .collect();

        let mut members_high = vec![Vec::new(); n_links];
        let mut members_low = vec![Vec::new(); n_links];
        for (f, route) in routes.iter().enumerate() {
            let members = match priority[f] {
                Priority::High => &mut members_high,
                Priority::Low => &mut members_low,
            };
            for &l in route {
                members[l].push(f);
            }
        }
        let is_high: Vec<bool> = priority.iter().map(|&p| p == Priority::High).collect();
        let is_low: Vec<bool> = is_high.iter().map(|h| !h).collect();
        let weights: Vec<(u32, u32)> = match scheme {
            Scheme::WeightedPriority { w_high, w_low } => vec![(*w_high, *w_low); n_links],
            _ => self.weights.clone(),
        };

        let mut rates = vec![0.0; flows.len()];
        let takeup = |rates: &[f64], members: &[Vec<usize>]| -> Vec<f64> {
            members
                .iter()
                .map(|m| m.iter().map(|&f| rates[f]).sum())
                .collect()
        };

        let (split, iterations, converged) = match scheme {
            Scheme::Baseline => {
                progressive_fill(&self.capacity, &members_high, &routes, &mut rates, &is_high);
                let split = self.capacity.iter().map(|&c| (c, 0.0)).collect();
                (split, 1, true)
            }
            Scheme::AbsolutePriority => {
                progressive_fill(&self.capacity, &members_high, &routes, &mut rates, &is_high);
                let used = takeup(&rates, &members_high);
                let left: Vec<f64> = self
                    .capacity
                    .iter()
                    .zip(&used)
                    .map(|(c, u)| (c - u).max(0.0))
                    .collect();
                progressive_fill(&left, &members_low, &routes, &mut rates, &is_low);
                let split = used.iter().zip(&left).map(|(&u, &l)| (u, l)).collect();
                (split, 1, true)
            }
            Scheme::WeightedPriority { .. } | Scheme::ReFlex(_) => {
                let shares: Vec<(f64, f64)> = (0..n_links)
                    .map(|l| class_shares(self.capacity[l], weights[l].0, weights[l].1))
                    .collect();
                let mut split: Vec<(f64, f64)> = (0..n_links)
                    .map(|l| {
                        let has_high = !members_high[l].is_empty();
                        let has_low = !members_low[l].is_empty();
                        let demand = |present: bool| if present { f64::INFINITY } else { 0.0 };
                        split_capacity(
                            self.capacity[l],
                            weights[l].0,
                            weights[l].1,
                            has_high,
                            has_low,
                            demand(has_high),
                            demand(has_low),
                        )
                    })
                    .collect();
                // A lending class keeps its weighted share as a cap so it can
                // grow back if its bottleneck elsewhere relaxes.
                let caps_of = |split: &[(f64, f64)]| -> (Vec<f64>, Vec<f64>) {
                    split
                        .iter()
                        .zip(&shares)
                        .map(|(&(h, l), &(sh, sl))| (h.max(sh), l.max(sl)))
                        .unzip()
                };

                let mut iterations = 0;
                let mut converged = false;
                while iterations < MAX_ITERATIONS {
                    iterations += 1;
                    let (caps_high, caps_low) = caps_of(&split);
                    rates.iter_mut().for_each(|r| *r = 0.0);
                    progressive_fill(&caps_high, &members_high, &routes, &mut rates, &is_high);
                    progressive_fill(&caps_low, &members_low, &routes, &mut rates, &is_low);
                    let used_high = takeup(&rates, &members_high);
                    let used_low = takeup(&rates, &members_low);

                    let mut delta: f64 = 0.0;
                    for l in 0..n_links {
                        let c = self.capacity[l];
                        let tol = BACKLOG_TOLERANCE * c;
                        let next = split_capacity(
                            c,
                            weights[l].0,
                            weights[l].1,
                            !members_high[l].is_empty() && used_high[l] >= caps_high[l] - tol,
                            !members_low[l].is_empty() && used_low[l] >= caps_low[l] - tol,
                            used_high[l],
                            used_low[l],
                        );
                        delta = delta
                            .max((next.0 - split[l].0).abs() / c)
                            .max((next.1 - split[l].1).abs() / c);
                        split[l] = next;
                    }
                    if delta < SPLIT_TOLERANCE {
                        converged = true;
                        break;
                    }
                }
                (split, iterations, converged)
            }
        };

        let class_split = (0..n_links)
            .filter(|&l| !members_high[l].is_empty() || !members_low[l].is_empty())
            .map(|l| (self.ids[l], split[l]))
            .collect();
        AllocationResult {
            rates: flows.iter().zip(rates).map(|(f, r)| (f.id, r)).collect(),
            class_split,
            iterations_used: iterations,
            converged,
        }
    }
}

/// Allocate rates for the active flows of one tick.
///
/// Convenience wrapper that builds a [`LinkTable`]; the engine keeps one
/// around instead.
pub fn allocate(
    topology: &Topology,
    active: &[ActiveFlow<'_>],
    scheme: &Scheme,
) -> AllocationResult {
    let mut sorted = active.to_vec();
    sorted.sort_by_key(|f| f.id);
    LinkTable::new(topology).allocate(&sorted, scheme)
}
