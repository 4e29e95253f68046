//! Seeded flow arrival generation.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use thiserror::Error;

use crate::types::{Alpha, Bound, FlowId, FlowKind, FlowSpec, NodeId};

/// Web search flow size distribution shipped with the crate.
pub const WEB_SEARCH_CDF: &str = include_str!("../data/web_search.cdf");

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WorkloadError {
    #[error("size distribution has no entries")]
    EmptyCdf,
    #[error("size distribution: {0}")]
    BadCdf(String),
    #[error("arrival rate {0} must be positive and finite")]
    BadRate(f64),
    #[error("duration {0} must be positive")]
    BadDuration(f64),
    #[error("utilization {0} outside (0, 1]")]
    BadUtilization(f64),
    #[error("endpoints: {0}")]
    BadEndpoints(String),
}

/// Piecewise-linear cumulative distribution of flow sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct SizeCdfTable {
    points: Vec<(f64, f64)>,
}

impl SizeCdfTable {
    /// `points` are `(size_bytes, cumulative_probability)`, strictly
    /// increasing in both, ending at probability 1.
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self, WorkloadError> {
        let Some(&(_, last)) = points.last() else {
            return Err(WorkloadError::EmptyCdf);
        };
        let (first_size, first_p) = points[0];
        if first_size.is_nan() || first_size <= 0.0 || !(0.0..=1.0).contains(&first_p) {
            return Err(WorkloadError::BadCdf(format!(
                "first entry ({first_size}, {first_p}) needs a positive size and a probability in [0, 1]"
            )));
        }
        if let Some(w) = points
            .windows(2)
            .find(|w| !(w[1].0 > w[0].0 && w[1].1 > w[0].1))
        {
            return Err(WorkloadError::BadCdf(format!(
                "entries ({}, {}) and ({}, {}) are not strictly increasing",
                w[0].0, w[0].1, w[1].0, w[1].1
            )));
        }
        if last != 1.0 {
            return Err(WorkloadError::BadCdf(format!(
                "last probability is {last}, not 1"
            )));
        }
        Ok(SizeCdfTable { points })
    }

    /// Parse two whitespace-separated columns per line; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, WorkloadError> {
        let mut points = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split_whitespace().collect();
            let parsed = match cols.as_slice() {
                [s, p] => s.parse::<f64>().ok().zip(p.parse::<f64>().ok()),
                _ => None,
            };
            let Some(point) = parsed else {
                return Err(WorkloadError::BadCdf(format!(
                    "line {}: expected `size probability`",
                    n + 1
                )));
            };
            points.push(point);
        }
        Self::new(points)
    }

    pub fn web_search() -> Self {
        Self::parse(WEB_SEARCH_CDF).expect("bundled table is valid")
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    /// Size at cumulative probability `u`; probability mass below the first
    /// entry sits on the first size.
    pub fn quantile(&self, u: f64) -> f64 {
        let (s0, p0) = self.points[0];
        if u <= p0 {
            return s0;
        }
        let i = self.points.partition_point(|&(_, p)| p < u);
        let (sa, pa) = self.points[i - 1];
        let (sb, pb) = self.points[i.min(self.points.len() - 1)];
        if pb == pa {
            sb
        } else {
            sa + (sb - sa) * (u - pa) / (pb - pa)
        }
    }

    /// Mean of the interpolated distribution.
    pub fn mean(&self) -> f64 {
        let (s0, p0) = self.points[0];
        s0 * p0
            + self
                .points
                .windows(2)
                .map(|w| (w[1].1 - w[0].1) * (w[0].0 + w[1].0) / 2.0)
                .sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArrivalKind {
    /// Flows per second.
    Poisson {
        rate: f64,
    },
    FixedTimes(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum SizeModel {
    Constant(u64),
    Empirical(SizeCdfTable),
}

impl SizeModel {
    pub fn mean(&self) -> f64 {
        match self {
            SizeModel::Constant(b) => *b as f64,
            SizeModel::Empirical(t) => t.mean(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowTemplate {
    pub alpha: Alpha,
    pub r: f64,
}

impl FlowTemplate {
    pub fn regular() -> Self {
        FlowTemplate {
            alpha: Bound::Unbounded,
            r: 1.0,
        }
    }

    pub fn kind(&self) -> FlowKind {
        FlowSpec::implied_kind(self.alpha, self.r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EndpointModel {
    /// Ordered pair of distinct hosts drawn uniformly from nodes `0..hosts`.
    AllPairsUniform {
        hosts: u32,
    },
    Fixed {
        src: NodeId,
        dst: NodeId,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArrivalProcess {
    pub kind: ArrivalKind,
    pub size: SizeModel,
    pub template: FlowTemplate,
    pub endpoints: EndpointModel,
}

impl ArrivalProcess {
    fn check(&self) -> Result<(), WorkloadError> {
        if let ArrivalKind::Poisson { rate } = self.kind {
            if !(rate > 0.0 && rate.is_finite()) {
                return Err(WorkloadError::BadRate(rate));
            }
        }
        if let EndpointModel::AllPairsUniform { hosts } = self.endpoints {
            if hosts < 2 {
                return Err(WorkloadError::BadEndpoints(format!(
                    "all-pairs-uniform needs at least 2 hosts, got {hosts}"
                )));
            }
        }
        Ok(())
    }
}

struct Draw {
    time: f64,
    process: usize,
    seq: usize,
    spec: FlowSpec,
}

fn draw_size(model: &SizeModel, rng: &mut ChaCha8Rng) -> u64 {
    match model {
        SizeModel::Constant(b) => *b,
        SizeModel::Empirical(t) => (t.quantile(rng.random::<f64>()).round() as u64).max(1),
    }
}

fn draw_endpoints(model: EndpointModel, rng: &mut ChaCha8Rng) -> (NodeId, NodeId) {
    match model {
        EndpointModel::Fixed { src, dst } => (src, dst),
        EndpointModel::AllPairsUniform { hosts } => {
            let src = rng.random_range(0..hosts);
            let mut dst = rng.random_range(0..hosts - 1);
            if dst >= src {
                dst += 1;
            }
            (NodeId(src), NodeId(dst))
        }
    }
}

fn draws(index: usize, process: &ArrivalProcess, duration: f64, seed: u64) -> Vec<Draw> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let times: Vec<f64> = match &process.kind {
        ArrivalKind::FixedTimes(t) => t.iter().copied().filter(|&t| t < duration).collect(),
        ArrivalKind::Poisson { rate } => {
            let gap = Exp::new(*rate).expect("rate checked");
            let mut out = Vec::new();
            let mut t = gap.sample(&mut rng);
            while t < duration {
                out.push(t);
                t += gap.sample(&mut rng);
            }
            out
        }
    };
    times
        .into_iter()
        .enumerate()
        .map(|(seq, time)| {
            let size = draw_size(&process.size, &mut rng);
            let (src, dst) = draw_endpoints(process.endpoints, &mut rng);
            let spec = FlowSpec {
                id: FlowId(0),
                src,
                dst,
                size: Bound::Finite(size),
                alpha: process.template.alpha,
                r: process.template.r,
                arrival_time: time,
                kind: process.template.kind(),
            };
            Draw {
                time,
                process: index,
                seq,
                spec,
            }
        })
        .collect()
}

/// Flows of several processes over `[0, duration)`, numbered from 0 in
/// order of (arrival time, process index, sequence within the process).
///
/// Process `i` draws from stream `i` of a generator seeded with `seed`, so
/// adding a process does not change the flows of the others.
pub fn generate_mix(
    processes: &[ArrivalProcess],
    duration: f64,
    seed: u64,
) -> Result<Vec<FlowSpec>, WorkloadError> {
    if duration.is_nan() || duration <= 0.0 {
        return Err(WorkloadError::BadDuration(duration));
    }
    processes.iter().try_for_each(ArrivalProcess::check)?;
    let mut all: Vec<Draw> = processes
        .iter()
        .enumerate()
        .flat_map(|(i, p)| draws(i, p, duration, seed))
        .collect();
    all.sort_by(|a, b| {
        a.time
            .partial_cmp(&b.time)
            .unwrap_or(Ordering::Equal)
            .then(a.process.cmp(&b.process))
            .then(a.seq.cmp(&b.seq))
    });
    Ok(all
        .into_iter()
        .enumerate()
        .map(|(id, d)| FlowSpec {
            id: FlowId(id as u64),
            ..d.spec
        })
        .collect())
}

pub fn generate(
    process: &ArrivalProcess,
    duration: f64,
    seed: u64,
) -> Result<Vec<FlowSpec>, WorkloadError> {
    generate_mix(std::slice::from_ref(process), duration, seed)
}

/// Poisson rate that offers `utilization` of the aggregate access capacity
/// (`link_count * capacity` bits per second) with flows of `mean_size` bytes.
pub fn target_rate_for_utilization(
    mean_size: f64,
    link_count: u32,
    capacity: f64,
    utilization: f64,
) -> Result<f64, WorkloadError> {
    if !(utilization > 0.0 && utilization <= 1.0) {
        return Err(WorkloadError::BadUtilization(utilization));
    }
    Ok(utilization * f64::from(link_count) * capacity / (8.0 * mean_size))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn constant(kind: ArrivalKind, size: u64) -> ArrivalProcess {
        ArrivalProcess {
            kind,
            size: SizeModel::Constant(size),
            template: FlowTemplate::regular(),
            endpoints: EndpointModel::Fixed {
                src: NodeId(0),
                dst: NodeId(1),
            },
        }
    }

    #[test]
    fn fixed_times_encode_two_flow_cases() {
        let flows = generate(
            &constant(ArrivalKind::FixedTimes(vec![0.0, 2.0]), 1000),
            10.0,
            1,
        )
        .unwrap();
        assert_eq!(flows.len(), 2);
        assert_eq!(flows[0].arrival_time, 0.0);
        assert_eq!(flows[1].arrival_time, 2.0);
        assert_eq!(flows[1].id, FlowId(1));
    }

    #[test]
    fn single_entry_cdf_is_constant() {
        let mut p = constant(ArrivalKind::Poisson { rate: 500.0 }, 0);
        p.size = SizeModel::Empirical(SizeCdfTable::new(vec![(100_000.0, 1.0)]).unwrap());
        let flows = generate(&p, 1.0, 3).unwrap();
        assert!(!flows.is_empty());
        assert!(flows.iter().all(|f| f.size == Bound::Finite(100_000)));
    }

    #[test]
    fn rejects_bad_inputs() {
        assert_eq!(SizeCdfTable::new(vec![]), Err(WorkloadError::EmptyCdf));
        assert!(SizeCdfTable::new(vec![(10.0, 0.5), (5.0, 1.0)]).is_err());
        assert!(SizeCdfTable::new(vec![(10.0, 0.5), (20.0, 0.9)]).is_err());
        let p = constant(ArrivalKind::Poisson { rate: 0.0 }, 1);
        assert_eq!(generate(&p, 1.0, 0), Err(WorkloadError::BadRate(0.0)));
        assert!(target_rate_for_utilization(1.0, 1, 1.0, 0.0).is_err());
    }

    #[test]
    fn parses_comments_and_blank_lines() {
        let t = SizeCdfTable::parse("# header\n\n100 0.5 # half\n200 1\n").unwrap();
        assert_eq!(t.points(), &[(100.0, 0.5), (200.0, 1.0)]);
        assert!(SizeCdfTable::parse("100\n").is_err());
    }

    #[test]
    fn web_search_table_matches_published_summary() {
        let t = SizeCdfTable::web_search();
        assert_eq!(t.points().last().unwrap().0, 29_200_000.0);
        // mean around 1.7 MB
        assert!((t.mean() - 1.7e6).abs() < 0.05e6, "mean {}", t.mean());
        // most flows are below 100 kB
        assert!(t.points().iter().any(|&(s, p)| s <= 100_000.0 && p >= 0.5));
    }

    #[test]
    fn quantile_interpolates_linearly() {
        let t = SizeCdfTable::new(vec![(100.0, 0.2), (300.0, 0.6), (1000.0, 1.0)]).unwrap();
        assert_eq!(t.quantile(0.1), 100.0);
        assert_eq!(t.quantile(0.4), 200.0);
        assert_eq!(t.quantile(1.0), 1000.0);
        // mean: 0.2*100 + 0.4*200 + 0.4*650
        assert_relative_eq!(t.mean(), 360.0);
    }

    #[test]
    fn utilization_targets() {
        let web = target_rate_for_utilization(1.7e6, 20, 10e9, 0.2).unwrap();
        assert!((web - 2941.0).abs() < 1.0);
        assert!((web - 2921.0).abs() / 2921.0 < 0.01);
        assert_relative_eq!(
            target_rate_for_utilization(250e6, 1, 10e9, 0.2).unwrap(),
            1.0
        );
    }

    #[test]
    fn uniform_endpoints_are_distinct() {
        let p = ArrivalProcess {
            endpoints: EndpointModel::AllPairsUniform { hosts: 3 },
            ..constant(ArrivalKind::Poisson { rate: 1000.0 }, 1)
        };
        let flows = generate(&p, 1.0, 9).unwrap();
        assert!(flows
            .iter()
            .all(|f| f.src != f.dst && f.src.0 < 3 && f.dst.0 < 3));
        let pairs: std::collections::BTreeSet<_> = flows.iter().map(|f| (f.src, f.dst)).collect();
        assert_eq!(pairs.len(), 6);
    }

    #[test]
    fn adding_a_process_keeps_other_streams() {
        let a = constant(ArrivalKind::Poisson { rate: 50.0 }, 10);
        let b = constant(ArrivalKind::Poisson { rate: 70.0 }, 20);
        let alone = generate_mix(std::slice::from_ref(&a), 5.0, 4).unwrap();
        let mixed = generate_mix(&[a, b], 5.0, 4).unwrap();
        let from_a: Vec<f64> = mixed
            .iter()
            .filter(|f| f.size == Bound::Finite(10))
            .map(|f| f.arrival_time)
            .collect();
        let times: Vec<f64> = alone.iter().map(|f| f.arrival_time).collect();
        assert_eq!(from_a, times);
    }

    proptest! {
        #[test]
        fn same_seed_same_flows(seed in any::<u64>(), rate in 1.0f64..200.0) {
            let p = ArrivalProcess {
                size: SizeModel::Empirical(SizeCdfTable::web_search()),
                endpoints: EndpointModel::AllPairsUniform { hosts: 20 },
                ..constant(ArrivalKind::Poisson { rate }, 1)
            };
            prop_assert_eq!(generate(&p, 2.0, seed).unwrap(), generate(&p, 2.0, seed).unwrap());
        }

        #[test]
        fn quantile_is_monotone(u in 0.0f64..=1.0, v in 0.0f64..=1.0) {
            let t = SizeCdfTable::web_search();
            let (lo, hi) = if u <= v { (u, v) } else { (v, u) };
            prop_assert!(t.quantile(lo) <= t.quantile(hi));
        }
    }
}
