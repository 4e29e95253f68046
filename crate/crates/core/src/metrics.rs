//! Per-flow records and the statistics derived from them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io;

use thiserror::Error;

use crate::types::{Alpha, Bound, FlowId, FlowKind, FlowSize};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("percentile of an empty list")]
    EmptyInput,
    #[error("percentile {0} outside (0, 100]")]
    InvalidPercentile(f64),
    #[error("runs do not contain the same flows: {0}")]
    IdMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowStatus {
    Finished,
    /// Still active when the simulation ended.
    Unfinished,
}

impl FlowStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            FlowStatus::Finished => "finished",
            FlowStatus::Unfinished => "unfinished",
        }
    }
}

/// Outcome of one flow.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowRecord {
    pub flow_id: FlowId,
    pub kind: FlowKind,
    pub size: FlowSize,
    pub alpha: Alpha,
    pub r: f64,
    pub arrival_time: f64,
    pub completion_time: Option<f64>,
    pub fct: Option<f64>,
    pub delivered: f64,
    pub discarded: f64,
    /// Delivered bits over the time the flow was in the system.
    pub mean_rate: f64,
    pub priority_switch_count: u32,
    pub status: FlowStatus,
}

impl FlowRecord {
    pub fn is_finished(&self) -> bool {
        self.status == FlowStatus::Finished
    }

    /// Delivered share of the payload; `None` for unbounded flows.
    pub fn fraction_delivered(&self) -> Option<f64> {
        self.size.finite().map(|f| {
            if f == 0 {
                1.0
            } else {
                self.delivered / f as f64
            }
        })
    }
}

pub const FLOW_CSV_HEADER: [&str; 11] = [
    "flow_id",
    "kind",
    "size_F",
    "arrival_time",
    "completion_time",
    "fct",
    "delivered",
    "discarded",
    "mean_rate",
    "priority_switch_count",
    "status",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Write records as CSV, header included, in the order given.
pub fn write_flows_csv<W: io::Write>(out: W, records: &[FlowRecord]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(FLOW_CSV_HEADER)?;
    for rec in records {
        let size = match rec.size {
            Bound::Finite(f) => f.to_string(),
            Bound::Unbounded => "inf".into(),
        };
        w.write_record([
            rec.flow_id.0.to_string(),
            rec.kind.to_string(),
            size,
            rec.arrival_time.to_string(),
            opt(rec.completion_time),
            opt(rec.fct),
            rec.delivered.to_string(),
            rec.discarded.to_string(),
            rec.mean_rate.to_string(),
            rec.priority_switch_count.to_string(),
            rec.status.as_str().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Nearest-rank percentile: the element at index `ceil(p/100 * n) - 1` of
/// the sorted values.
pub fn percentile(values: &[f64], p: f64) -> Result<f64, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(MetricsError::InvalidPercentile(p));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (p / 100.0 * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank.clamp(1, sorted.len()) - 1])
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SpeedupJoin {
    pub speedups: BTreeMap<FlowId, f64>,
    /// Flows left out because they did not finish in one of the runs.
    pub excluded: usize,
}

/// Per-flow FCT ratio `baseline / treated` of two runs over the same flows.
pub fn speedup_join(
    baseline: &[FlowRecord],
    treated: &[FlowRecord],
) -> Result<SpeedupJoin, MetricsError> {
    let base: BTreeMap<FlowId, &FlowRecord> = baseline.iter().map(|r| (r.flow_id, r)).collect();
    let other: BTreeMap<FlowId, &FlowRecord> = treated.iter().map(|r| (r.flow_id, r)).collect();
    if base.len() != baseline.len() || other.len() != treated.len() {
        return Err(MetricsError::IdMismatch("duplicate flow id".into()));
    }
    if let Some(id) = base.keys().find(|id| !other.contains_key(id)) {
        return Err(MetricsError::IdMismatch(format!(
            "flow {id} missing from treated run"
        )));
    }
    if let Some(id) = other.keys().find(|id| !base.contains_key(id)) {
        return Err(MetricsError::IdMismatch(format!(
            "flow {id} missing from baseline run"
        )));
    }
    let mut join = SpeedupJoin::default();
    for (id, b) in base {
        match (b.fct, other[&id].fct) {
            (Some(fb), Some(ft)) if fb > 0.0 && ft > 0.0 => {
                join.speedups.insert(id, fb / ft);
            }
            _ => join.excluded += 1,
        }
    }
    Ok(join)
}

/// Fraction of `speedups` strictly below `threshold`; zero for no flows.
pub fn violation_fraction(speedups: &[f64], threshold: f64) -> f64 {
    if speedups.is_empty() {
        return 0.0;
    }
    speedups.iter().filter(|&&s| s < threshold).count() as f64 / speedups.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SizeCategory {
    Tiny,
    Small,
    Medium,
    Large,
}

impl SizeCategory {
    pub const ALL: [SizeCategory; 4] = [
        SizeCategory::Tiny,
        SizeCategory::Small,
        SizeCategory::Medium,
        SizeCategory::Large,
    ];

    /// Categories by payload: up to 10 kB, 100 kB, 10 MB, and above.
    pub fn of(size: FlowSize) -> Self {
        match size {
            Bound::Finite(b) if b <= 10_000 => SizeCategory::Tiny,
            Bound::Finite(b) if b <= 100_000 => SizeCategory::Small,
            Bound::Finite(b) if b <= 10_000_000 => SizeCategory::Medium,
            _ => SizeCategory::Large,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SizeCategory::Tiny => "tiny",
            SizeCategory::Small => "small",
            SizeCategory::Medium => "medium",
            SizeCategory::Large => "large",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stats {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub p90: f64,
    pub p99: f64,
    pub min: f64,
    pub max: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Option<Stats> {
        if values.is_empty() {
            return None;
        }
        let pct = |p| percentile(values, p).expect("non-empty");
        Some(Stats {
            count: values.len(),
            mean: values.iter().sum::<f64>() / values.len() as f64,
            median: pct(50.0),
            p90: pct(90.0),
            p99: pct(99.0),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }

    fn write(&self, out: &mut String, prefix: &str) {
        let _ = writeln!(out, "{prefix}.count = {}", self.count);
        let _ = writeln!(out, "{prefix}.mean = {}", self.mean);
        let _ = writeln!(out, "{prefix}.median = {}", self.median);
        let _ = writeln!(out, "{prefix}.p90 = {}", self.p90);
        let _ = writeln!(out, "{prefix}.p99 = {}", self.p99);
        let _ = writeln!(out, "{prefix}.min = {}", self.min);
        let _ = writeln!(out, "{prefix}.max = {}", self.max);
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct KindSummary {
    pub flows: usize,
    pub unfinished: usize,
    pub fct: Option<Stats>,
    pub mean_rate: Option<Stats>,
    pub fct_by_category: BTreeMap<SizeCategory, Stats>,
    pub fraction_delivered: Option<Stats>,
    pub speedup: Option<Stats>,
    /// (threshold, fraction of flows with speed-up strictly below it).
    pub violation: Option<(f64, f64)>,
}

/// Statistics over the flows that arrived inside the measurement window.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub scheme: String,
    pub window: (f64, f64),
    pub records_total: usize,
    pub kinds: BTreeMap<FlowKind, KindSummary>,
}

impl RunSummary {
    /// Summarize records whose arrival lies in `[window.0, window.1)`.
    pub fn new(scheme: &str, records: &[FlowRecord], window: (f64, f64)) -> Self {
        let mut kinds = BTreeMap::new();
        for kind in [FlowKind::Regular, FlowKind::Flexible] {
            let measured: Vec<&FlowRecord> = records
                .iter()
                .filter(|r| r.kind == kind && in_window(r, window))
                .collect();
            let finished: Vec<&FlowRecord> = measured
                .iter()
                .copied()
                .filter(|r| r.is_finished())
                .collect();
            let fcts: Vec<f64> = finished.iter().filter_map(|r| r.fct).collect();
            let rates: Vec<f64> = finished.iter().map(|r| r.mean_rate).collect();
            let fractions: Vec<f64> = finished
                .iter()
                .filter_map(|r| r.fraction_delivered())
                .collect();
            let mut fct_by_category = BTreeMap::new();
            for cat in SizeCategory::ALL {
                let v: Vec<f64> = finished
                    .iter()
                    .filter(|r| SizeCategory::of(r.size) == cat)
                    .filter_map(|r| r.fct)
                    .collect();
                if let Some(s) = Stats::of(&v) {
                    fct_by_category.insert(cat, s);
                }
            }
            kinds.insert(
                kind,
                KindSummary {
                    flows: measured.len(),
                    unfinished: measured.len() - finished.len(),
                    fct: Stats::of(&fcts),
                    mean_rate: Stats::of(&rates),
                    fct_by_category,
                    fraction_delivered: Stats::of(&fractions),
                    speedup: None,
                    violation: None,
                },
            );
        }
        RunSummary {
            scheme: scheme.into(),
            window,
            records_total: records.len(),
            kinds,
        }
    }

    /// Attach speed-ups against a baseline run, restricted to the measured
    /// flows. Flexible flows are also checked against `threshold`.
    pub fn add_speedups(&mut self, records: &[FlowRecord], join: &SpeedupJoin, threshold: f64) {
        for (kind, summary) in self.kinds.iter_mut() {
            let values: Vec<f64> = records
                .iter()
                .filter(|r| r.kind == *kind && in_window(r, self.window))
                .filter_map(|r| join.speedups.get(&r.flow_id).copied())
                .collect();
            summary.speedup = Stats::of(&values);
            if *kind == FlowKind::Flexible {
                summary.violation = Some((threshold, violation_fraction(&values, threshold)));
            }
        }
    }

    /// Key-value text, one `key = value` per line with dotted nesting.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "scheme = {}", self.scheme);
        let _ = writeln!(out, "window.start_s = {}", self.window.0);
        let _ = writeln!(out, "window.end_s = {}", self.window.1);
        let _ = writeln!(out, "records = {}", self.records_total);
        for (kind, s) in &self.kinds {
            let _ = writeln!(out, "{kind}.flows = {}", s.flows);
            let _ = writeln!(out, "{kind}.unfinished = {}", s.unfinished);
            if let Some(st) = &s.fct {
                st.write(&mut out, &format!("{kind}.fct_s"));
            }
            if let Some(st) = &s.mean_rate {
                st.write(&mut out, &format!("{kind}.mean_rate_bps"));
            }
            for (cat, st) in &s.fct_by_category {
                st.write(&mut out, &format!("{kind}.{}.fct_s", cat.as_str()));
            }
            if let Some(st) = &s.fraction_delivered {
                st.write(&mut out, &format!("{kind}.fraction_delivered"));
            }
            if let Some(st) = &s.speedup {
                st.write(&mut out, &format!("{kind}.speedup"));
            }
            if let Some((t, v)) = s.violation {
                let _ = writeln!(out, "{kind}.violation_fraction.threshold = {t}");
                let _ = writeln!(out, "{kind}.violation_fraction.value = {v}");
            }
        }
        out
    }
}

fn in_window(r: &FlowRecord, window: (f64, f64)) -> bool {
    r.arrival_time >= window.0 && r.arrival_time < window.1
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn record(id: u64, fct: Option<f64>) -> FlowRecord {
        FlowRecord {
            flow_id: FlowId(id),
            kind: FlowKind::Regular,
            size: Bound::Finite(1000),
            alpha: Bound::Unbounded,
            r: 1.0,
            arrival_time: 0.0,
            completion_time: fct,
            fct,
            delivered: 1000.0,
            discarded: 0.0,
            mean_rate: fct.map_or(0.0, |t| 8000.0 / t),
            priority_switch_count: 0,
            status: if fct.is_some() {
                FlowStatus::Finished
            } else {
                FlowStatus::Unfinished
            },
        }
    }

    #[test]
    fn nearest_rank_examples() {
        let hundred: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&hundred, 99.0).unwrap(), 99.0);
        assert_eq!(percentile(&[5.0], 1.0).unwrap(), 5.0);
        assert_eq!(percentile(&[5.0], 100.0).unwrap(), 5.0);
        assert_eq!(percentile(&[3.0, 1.0, 2.0], 50.0).unwrap(), 2.0);
        assert_eq!(percentile(&[], 50.0), Err(MetricsError::EmptyInput));
        assert!(percentile(&[1.0], 0.0).is_err());
    }

    #[test]
    fn speedup_examples() {
        let base = [
            record(1, Some(0.460)),
            record(2, Some(1.0)),
            record(3, None),
        ];
        let treated = [
            record(1, Some(0.3407)),
            record(2, Some(2.0)),
            record(3, Some(1.0)),
        ];
        let j = speedup_join(&base, &treated).unwrap();
        assert_abs_diff_eq!(j.speedups[&FlowId(1)], 1.35, epsilon = 1e-3);
        assert_eq!(j.speedups[&FlowId(2)], 0.5);
        assert_eq!(j.excluded, 1);

        let same = speedup_join(&base, &base).unwrap();
        assert!(same.speedups.values().all(|&s| s == 1.0));
    }

    #[test]
    fn speedup_rejects_mismatched_ids() {
        let base = [record(1, Some(1.0))];
        let treated = [record(2, Some(1.0))];
        assert!(matches!(
            speedup_join(&base, &treated),
            Err(MetricsError::IdMismatch(_))
        ));
    }

    #[test]
    fn violation_examples() {
        assert_eq!(violation_fraction(&[0.79, 0.81, 1.0, 0.5], 0.8), 0.5);
        assert_eq!(violation_fraction(&[0.8, 0.9], 0.8), 0.0);
        assert_eq!(violation_fraction(&[], 0.8), 0.0);
    }

    #[test]
    fn category_boundaries() {
        let c = |b| SizeCategory::of(Bound::Finite(b));
        assert_eq!(c(1), SizeCategory::Tiny);
        assert_eq!(c(10_000), SizeCategory::Tiny);
        assert_eq!(c(10_001), SizeCategory::Small);
        assert_eq!(c(100_000), SizeCategory::Small);
        assert_eq!(c(100_001), SizeCategory::Medium);
        assert_eq!(c(10_000_000), SizeCategory::Medium);
        assert_eq!(c(10_000_001), SizeCategory::Large);
        assert_eq!(SizeCategory::of(Bound::Unbounded), SizeCategory::Large);
    }

    #[test]
    fn csv_has_header_for_empty_runs() {
        let mut buf = Vec::new();
        write_flows_csv(&mut buf, &[]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            FLOW_CSV_HEADER.join(",") + "\n"
        );
    }

    #[test]
    fn summary_respects_window() {
        let mut early = record(1, Some(1.0));
        early.arrival_time = 0.5;
        let mut inside = record(2, Some(2.0));
        inside.arrival_time = 1.0;
        let mut late = record(3, Some(3.0));
        late.arrival_time = 9.0;
        let s = RunSummary::new("baseline", &[early, inside, late], (1.0, 9.0));
        let reg = &s.kinds[&FlowKind::Regular];
        assert_eq!(reg.flows, 1);
        assert_eq!(reg.fct.unwrap().mean, 2.0);
        assert!(s.render().contains("regular.tiny.fct_s.count = 1"));
    }

    proptest! {
        #[test]
        fn swapping_runs_inverts_speedups(fcts in prop::collection::vec((1e-3f64..10.0, 1e-3f64..10.0), 1..30)) {
            let a: Vec<_> = fcts.iter().enumerate().map(|(i, (x, _))| record(i as u64, Some(*x))).collect();
            let b: Vec<_> = fcts.iter().enumerate().map(|(i, (_, y))| record(i as u64, Some(*y))).collect();
            let ab = speedup_join(&a, &b).unwrap();
            let ba = speedup_join(&b, &a).unwrap();
            for (id, s) in &ab.speedups {
                prop_assert!((s * ba.speedups[id] - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn violation_monotone_in_threshold(
            speedups in prop::collection::vec(0.0f64..3.0, 0..40),
            t1 in 0.01f64..1.0,
            t2 in 0.01f64..1.0,
        ) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            prop_assert!(violation_fraction(&speedups, lo) <= violation_fraction(&speedups, hi));
        }

        #[test]
        fn categories_partition(size in 0u64..100_000_000_000) {
            let c = SizeCategory::of(Bound::Finite(size));
            prop_assert_eq!(SizeCategory::ALL.iter().filter(|&&k| k == c).count(), 1);
        }

        #[test]
        fn percentile_is_an_element(values in prop::collection::vec(-1e6f64..1e6, 1..50), p in 0.1f64..=100.0) {
            let v = percentile(&values, p).unwrap();
            prop_assert!(values.contains(&v));
        }
    }
}
