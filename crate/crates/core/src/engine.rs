//! Fixed-tick fluid simulation.
//!
//! Every tick activates arrivals, re-runs the allocator when the active set
//! or a priority changed, moves each flow's rate toward its allocation,
//! delivers bytes, and at interval boundaries runs the probing controller of
//! every flexible flow. Rate decreases take effect at once; increases follow
//! a first-order lag with time constant `conv_tau`.

use std::collections::BTreeMap;
use std::fmt;
use std::io;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::allocator::{ActiveFlow, LinkTable};
use crate::metrics::{FlowRecord, FlowStatus};
use crate::reflex::{BudgetCheck, Controller, Decision, Phase};
use crate::types::{FlowId, FlowKind, FlowSpec, LinkId, Priority, Scenario, Scheme};

/// Relative slack allowed on link capacity before a tick counts as a violation.
const CAPACITY_SLACK: f64 = 1e-9;
/// Bytes below which a remaining payload counts as done.
const BYTE_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RuntimeStatus {
    Pending,
    Active,
    Finished,
}

/// Mutable state of one flow during a run.
#[derive(Debug, Clone)]
pub struct FlowRuntime {
    pub spec: FlowSpec,
    route: Vec<LinkId>,
    activation_tick: u64,
    pub delivered: f64,
    pub discarded: f64,
    pub current_rate: f64,
    pub target_rate: f64,
    pub priority: Priority,
    pub controller: Option<Controller>,
    pub status: RuntimeStatus,
    ack_since_update: f64,
    last_update_tick: u64,
    last_check_passed: bool,
    switches: u32,
    completion_time: Option<f64>,
    first_low: Option<f64>,
}

impl FlowRuntime {
    fn remaining(&self) -> f64 {
        self.spec.size_bytes() - self.delivered - self.discarded
    }

    fn finish(&mut self, at: f64) {
        self.status = RuntimeStatus::Finished;
        self.completion_time = Some(at);
        self.current_rate = 0.0;
        self.target_rate = 0.0;
    }

    fn record(&self, end: f64) -> FlowRecord {
        let arrival = self.spec.arrival_time;
        let (status, fct) = match self.completion_time {
            Some(t) => (FlowStatus::Finished, Some(t - arrival)),
            None => (FlowStatus::Unfinished, None),
        };
        let span = fct.unwrap_or(end - arrival);
        FlowRecord {
            flow_id: self.spec.id,
            kind: self.spec.kind,
            size: self.spec.size,
            alpha: self.spec.alpha,
            r: self.spec.r,
            arrival_time: arrival,
            completion_time: self.completion_time,
            fct,
            delivered: self.delivered,
            discarded: self.discarded,
            mean_rate: if span > 0.0 {
                self.delivered * 8.0 / span
            } else {
                0.0
            },
            priority_switch_count: self.switches,
            status,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EventKind {
    /// The allocator hit its iteration cap; its last iterate was used.
    NonConvergence { iterations: u32 },
    /// The flow was still active when the run ended.
    Unfinished { flow: FlowId },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub time: f64,
    pub kind: EventKind,
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            EventKind::NonConvergence { iterations } => write!(
                f,
                "t={}s warning: allocation did not converge within {iterations} iterations",
                self.time
            ),
            EventKind::Unfinished { flow } => {
                write!(f, "t={}s flow {flow} unfinished at end of run", self.time)
            }
        }
    }
}

/// Counters of guarantee and capacity checks made during a run.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Audit {
    pub ticks: u64,
    pub allocations: u64,
    pub capacity_violations: u64,
    /// Largest relative excess of carried rate over link capacity.
    pub max_capacity_excess: f64,
    pub discard_bound_violations: u64,
    pub low_decisions: u64,
    pub low_without_budget: u64,
    pub low_outside_exploit: u64,
    pub non_converged: u64,
}

impl Audit {
    pub fn is_clean(&self) -> bool {
        self.capacity_violations == 0
            && self.discard_bound_violations == 0
            && self.low_without_budget == 0
            && self.low_outside_exploit == 0
    }
}

/// Controller state of one flexible flow right after an interval boundary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntervalRecord {
    pub time: f64,
    pub flow_id: FlowId,
    pub interval: u64,
    pub upcoming: Phase,
    pub decision: Decision,
    pub ack_bytes: f64,
    pub elapsed: f64,
    pub alpha_budget: f64,
    pub reliability_budget: f64,
    pub fair_rate: Option<f64>,
    pub discarded: f64,
    pub check: Option<BudgetCheck>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesRow {
    pub time: f64,
    pub flow_id: FlowId,
    pub rate_bps: f64,
    pub priority: Priority,
    pub alpha_budget: Option<f64>,
    pub reliability_budget: Option<f64>,
    pub fair_rate: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkRow {
    pub time: f64,
    pub link_id: LinkId,
    pub high_bps: f64,
    pub low_bps: f64,
    pub capacity_bps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EngineOptions {
    /// Sample the time series every this many ticks; `None` disables it.
    pub sample_every: Option<u64>,
    /// Keep one [`IntervalRecord`] per flexible flow and boundary.
    pub trace_intervals: bool,
}

#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    /// One record per flow that arrived before the end, ordered by id.
    pub records: Vec<FlowRecord>,
    pub series: Vec<SeriesRow>,
    pub link_series: Vec<LinkRow>,
    pub trace: Vec<IntervalRecord>,
    pub audit: Audit,
    pub events: Vec<Event>,
    /// Time each flexible flow first went to low priority.
    pub first_low: BTreeMap<FlowId, f64>,
    pub end_time: f64,
}

/// One simulation over a validated scenario.
pub struct Simulation<'a> {
    scenario: &'a Scenario,
    links: LinkTable,
    flows: Vec<FlowRuntime>,
    /// Flow indices in activation order.
    arrivals: Vec<usize>,
    next_arrival: usize,
    /// Active flow indices, ascending (flows are stored in id order).
    active: Vec<usize>,
    tick: u64,
    max_ticks: u64,
    ticks_per_interval: Option<u64>,
    lag: f64,
    dirty: bool,
    rng: ChaCha8Rng,
    noise: Option<Normal<f64>>,
    options: EngineOptions,
    out: RunOutput,
}

fn activation_tick(arrival: f64, dt: f64) -> u64 {
    let x = arrival / dt;
    let nearest = x.round();
    if (x - nearest).abs() <= 1e-6 * nearest.max(1.0) {
        nearest as u64
    } else {
        x.ceil() as u64
    }
}

impl<'a> Simulation<'a> {
    pub fn new(scenario: &'a Scenario, options: EngineOptions) -> Self {
        let sim = &scenario.sim;
        let phases = scenario.scheme.phases();
        let flows: Vec<FlowRuntime> = scenario
            .flows
            .iter()
            .map(|spec| {
                let controller = match (phases, spec.kind) {
                    (Some(_), FlowKind::Flexible) => {
                        Some(Controller::new(spec.alpha, spec.r, spec.size))
                    }
                    _ => None,
                };
                let priority = match (scenario.scheme, spec.kind) {
                    (
                        Scheme::AbsolutePriority | Scheme::WeightedPriority { .. },
                        FlowKind::Flexible,
                    ) => Priority::Low,
                    _ => Priority::High,
                };
                FlowRuntime {
                    spec: spec.clone(),
                    route: scenario
                        .topology
                        .route(spec.src, spec.dst)
                        .expect("validated scenario has routes")
                        .to_vec(),
                    activation_tick: activation_tick(spec.arrival_time, sim.tick_dt),
                    delivered: 0.0,
                    discarded: 0.0,
                    current_rate: 0.0,
                    target_rate: 0.0,
                    priority,
                    controller,
                    status: RuntimeStatus::Pending,
                    ack_since_update: 0.0,
                    last_update_tick: 0,
                    last_check_passed: false,
                    switches: 0,
                    completion_time: None,
                    first_low: None,
                }
            })
            .collect();
        let mut arrivals: Vec<usize> = (0..flows.len()).collect();
        arrivals.sort_by_key(|&i| (flows[i].activation_tick, i));
        let lag = if sim.conv_tau > 0.0 {
            1.0 - (-sim.tick_dt / sim.conv_tau).exp()
        } else {
            1.0
        };
        Simulation {
            scenario,
            links: LinkTable::new(&scenario.topology),
            flows,
            arrivals,
            next_arrival: 0,
            active: Vec::new(),
            tick: 0,
            max_ticks: activation_tick(sim.duration, sim.tick_dt),
            ticks_per_interval: phases.and_then(|p| sim.ticks_in(p.t_int)),
            lag,
            dirty: true,
            rng: ChaCha8Rng::seed_from_u64(sim.seed),
            noise: (sim.estimate_noise > 0.0)
                .then(|| Normal::new(0.0, sim.estimate_noise).expect("validated noise")),
            options,
            out: RunOutput::default(),
        }
    }

    pub fn clock(&self) -> f64 {
        self.tick as f64 * self.scenario.sim.tick_dt
    }

    pub fn flows(&self) -> &[FlowRuntime] {
        &self.flows
    }

    pub fn audit(&self) -> &Audit {
        &self.out.audit
    }

    /// True once the duration has elapsed or no flow is left to run.
    pub fn is_done(&self) -> bool {
        self.tick >= self.max_ticks
            || (self.active.is_empty() && self.next_arrival == self.arrivals.len())
    }

    /// Advance by one tick.
    pub fn step(&mut self) {
        let dt = self.scenario.sim.tick_dt;
        let k = self.tick;
        let t0 = k as f64 * dt;
        let t1 = (k + 1) as f64 * dt;

        self.activate(k);
        if self.dirty {
            self.reallocate(t0);
        }

        for &i in &self.active {
            let f = &mut self.flows[i];
            if f.target_rate <= f.current_rate {
                f.current_rate = f.target_rate;
            } else {
                f.current_rate += (f.target_rate - f.current_rate) * self.lag;
            }
        }
        self.check_capacity();

        let mut finished = false;
        for &i in &self.active {
            let f = &mut self.flows[i];
            let bytes = f.current_rate * dt / 8.0;
            let remaining = f.remaining();
            if remaining <= BYTE_EPSILON {
                f.delivered = f.spec.size_bytes() - f.discarded;
                f.finish(t0);
                finished = true;
            } else if bytes >= remaining {
                f.delivered = f.spec.size_bytes() - f.discarded;
                f.ack_since_update += remaining;
                f.finish(t0 + remaining * 8.0 / f.current_rate);
                finished = true;
            } else {
                f.delivered += bytes;
                f.ack_since_update += bytes;
            }
        }

        if let Some(tpi) = self.ticks_per_interval {
            if (k + 1).is_multiple_of(tpi) {
                finished |= self.interval_boundary((k + 1) / tpi, k + 1, t1);
            }
        }

        if finished {
            let flows = &self.flows;
            self.active
                .retain(|&i| flows[i].status == RuntimeStatus::Active);
            self.dirty = true;
        }

        self.tick += 1;
        self.out.audit.ticks += 1;
        if let Some(every) = self.options.sample_every {
            if every > 0 && self.tick.is_multiple_of(every) {
                self.sample(t1);
            }
        }
    }

    fn activate(&mut self, k: u64) {
        while let Some(&i) = self.arrivals.get(self.next_arrival) {
            if self.flows[i].activation_tick > k {
                break;
            }
            self.next_arrival += 1;
            let f = &mut self.flows[i];
            f.status = RuntimeStatus::Active;
            f.last_update_tick = k;
            let pos = self.active.partition_point(|&j| j < i);
            self.active.insert(pos, i);
            self.dirty = true;
        }
    }

    fn reallocate(&mut self, now: f64) {
        self.dirty = false;
        if self.active.is_empty() {
            return;
        }
        let flows = &self.flows;
        let view: Vec<ActiveFlow<'_>> = self
            .active
            .iter()
            .map(|&i| ActiveFlow {
                id: flows[i].spec.id,
                route: &flows[i].route,
                priority: flows[i].priority,
            })
            .collect();
        let result = self.links.allocate(&view, &self.scenario.scheme);
        self.out.audit.allocations += 1;
        if !result.converged {
            self.out.audit.non_converged += 1;
            self.out.events.push(Event {
                time: now,
                kind: EventKind::NonConvergence {
                    iterations: result.iterations_used,
                },
            });
        }
        for &i in &self.active {
            let f = &mut self.flows[i];
            f.target_rate = result.rates[&f.spec.id];
        }
    }

    fn link_loads(&self) -> (Vec<f64>, Vec<f64>) {
        let mut high = vec![0.0; self.links.len()];
        let mut low = vec![0.0; self.links.len()];
        for &i in &self.active {
            let f = &self.flows[i];
            let load = match f.priority {
                Priority::High => &mut high,
                Priority::Low => &mut low,
            };
            for l in &f.route {
                load[self.links.dense(*l)] += f.current_rate;
            }
        }
        (high, low)
    }

    fn check_capacity(&mut self) {
        let (high, low) = self.link_loads();
        for (l, (h, lo)) in high.iter().zip(&low).enumerate() {
            let cap = self.links.capacity(l);
            let excess = (h + lo - cap) / cap;
            if excess > CAPACITY_SLACK {
                self.out.audit.capacity_violations += 1;
            }
            self.out.audit.max_capacity_excess = self.out.audit.max_capacity_excess.max(excess);
        }
    }

    /// Run the controllers at the boundary that starts interval `interval`.
    /// Returns whether a flow finished by discarding.
    fn interval_boundary(&mut self, interval: u64, boundary_tick: u64, now: f64) -> bool {
        let cfg = *self
            .scenario
            .scheme
            .phases()
            .expect("boundaries only under probing");
        let dt = self.scenario.sim.tick_dt;
        let mut finished = false;
        for &i in &self.active {
            let f = &mut self.flows[i];
            if f.status != RuntimeStatus::Active {
                continue;
            }
            let Some(ctrl) = f.controller.as_mut() else {
                continue;
            };
            let elapsed = (boundary_tick - f.last_update_tick) as f64 * dt;
            let ack = f.ack_since_update;
            let had_estimate = ctrl.fair_rate;
            let update = ctrl.update(interval, ack, elapsed, &cfg);
            f.ack_since_update = 0.0;
            f.last_update_tick = boundary_tick;

            if let (Some(noise), Some(rate)) = (self.noise.as_ref(), ctrl.fair_rate) {
                if had_estimate != ctrl.fair_rate {
                    let factor = 1.0 + noise.sample(&mut self.rng);
                    ctrl.fair_rate = Some((rate * factor).max(0.0));
                }
            }

            if update.drained > 0.0 {
                let left = f.spec.size_bytes() - f.delivered - f.discarded;
                let dropped = update.drained.min(left.max(0.0));
                f.discarded += dropped;
            }
            let bound = (1.0 - f.spec.r) * f.spec.size_bytes();
            if f.discarded > bound + BYTE_EPSILON {
                self.out.audit.discard_bound_violations += 1;
            }

            if let Some(check) = update.checked {
                f.last_check_passed = check.budget > check.potential_expense;
            }
            if update.decision == Decision::Low {
                self.out.audit.low_decisions += 1;
                if !f.last_check_passed {
                    self.out.audit.low_without_budget += 1;
                }
                if update.upcoming != Phase::Exploit {
                    self.out.audit.low_outside_exploit += 1;
                }
            }

            if self.options.trace_intervals {
                self.out.trace.push(IntervalRecord {
                    time: now,
                    flow_id: f.spec.id,
                    interval,
                    upcoming: update.upcoming,
                    decision: update.decision,
                    ack_bytes: ack,
                    elapsed,
                    alpha_budget: ctrl.budget.alpha_budget,
                    reliability_budget: ctrl.budget.reliability_budget,
                    fair_rate: ctrl.fair_rate,
                    discarded: f.discarded,
                    check: update.checked,
                });
            }

            if f.remaining() <= BYTE_EPSILON {
                f.discarded = f.spec.size_bytes() - f.delivered;
                f.finish(now);
                finished = true;
                continue;
            }
            // A finished decision cannot precede the payload running out, as
            // the controller counts no more than was delivered or dropped.
            if let Some(p) = update.decision.priority() {
                if p != f.priority {
                    f.priority = p;
                    f.switches += 1;
                    self.dirty = true;
                    if p == Priority::Low && f.first_low.is_none() {
                        f.first_low = Some(now);
                    }
                }
            }
        }
        finished
    }

    fn sample(&mut self, now: f64) {
        for &i in &self.active {
            let f = &self.flows[i];
            let ctrl = f.controller.as_ref();
            self.out.series.push(SeriesRow {
                time: now,
                flow_id: f.spec.id,
                rate_bps: f.current_rate,
                priority: f.priority,
                alpha_budget: ctrl.map(|c| c.budget.alpha_budget),
                reliability_budget: ctrl.map(|c| c.budget.reliability_budget),
                fair_rate: ctrl.and_then(|c| c.fair_rate),
            });
        }
        let (high, low) = self.link_loads();
        for l in 0..self.links.len() {
            if high[l] > 0.0 || low[l] > 0.0 {
                self.out.link_series.push(LinkRow {
                    time: now,
                    link_id: self.links.id(l),
                    high_bps: high[l],
                    low_bps: low[l],
                    capacity_bps: self.links.capacity(l),
                });
            }
        }
    }

    /// Step until done and collect the results.
    pub fn run(mut self) -> RunOutput {
        while !self.is_done() {
            self.step();
        }
        let end = self.clock();
        for &i in &self.active {
            self.out.events.push(Event {
                time: end,
                kind: EventKind::Unfinished {
                    flow: self.flows[i].spec.id,
                },
            });
        }
        self.out.records = self
            .flows
            .iter()
            .filter(|f| f.status != RuntimeStatus::Pending)
            .map(|f| f.record(end))
            .collect();
        self.out.first_low = self
            .flows
            .iter()
            .filter_map(|f| f.first_low.map(|t| (f.spec.id, t)))
            .collect();
        self.out.end_time = end;
        self.out
    }
}

/// Run a scenario to completion.
pub fn run(scenario: &Scenario, options: EngineOptions) -> RunOutput {
    Simulation::new(scenario, options).run()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const SERIES_CSV_HEADER: [&str; 7] = [
    "time_s",
    "flow_id",
    "rate_bps",
    "priority",
    "B_alpha_bytes",
    "B_r_bytes",
    "R_fair_bps",
];

pub fn write_series_csv<W: io::Write>(out: W, rows: &[SeriesRow]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SERIES_CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.time.to_string(),
            r.flow_id.0.to_string(),
            r.rate_bps.to_string(),
            r.priority.to_string(),
            opt(r.alpha_budget),
            opt(r.reliability_budget),
            opt(r.fair_rate),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub const LINK_CSV_HEADER: [&str; 5] = ["time_s", "link_id", "high_bps", "low_bps", "capacity_bps"];

pub fn write_links_csv<W: io::Write>(out: W, rows: &[LinkRow]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(LINK_CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.time.to_string(),
            r.link_id.0.to_string(),
            r.high_bps.to_string(),
            r.low_bps.to_string(),
            r.capacity_bps.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
