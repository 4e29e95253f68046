//! Domain types shared by the allocator, the controller and the engine.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FlowId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LinkId(pub u32);

impl fmt::Display for FlowId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for LinkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A quantity that is either finite or the unbounded sentinel.
///
/// Serialized as a plain number or the string `"inf"`; a float infinity is
/// never written out.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bound<T> {
    Finite(T),
    Unbounded,
}

impl<T: Copy> Bound<T> {
    pub fn finite(self) -> Option<T> {
        match self {
            Bound::Finite(v) => Some(v),
            Bound::Unbounded => None,
        }
    }

    pub fn is_unbounded(self) -> bool {
        matches!(self, Bound::Unbounded)
    }
}

impl<T: fmt::Display> fmt::Display for Bound<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Bound::Finite(v) => write!(f, "{v}"),
            Bound::Unbounded => f.write_str("inf"),
        }
    }
}

/// Aggressiveness factor: the guaranteed fraction of the max-min fair share.
/// `Unbounded` marks regular traffic.
pub type Alpha = Bound<f64>;

/// Flow size in bytes. `Unbounded` is only legal for fully reliable flows.
pub type FlowSize = Bound<u64>;

impl Alpha {
    /// Value used by the budget arithmetic.
    pub fn as_f64(self) -> f64 {
        match self {
            Bound::Finite(a) => a,
            Bound::Unbounded => f64::INFINITY,
        }
    }
}

impl FlowSize {
    pub fn bytes(self) -> f64 {
        match self {
            Bound::Finite(b) => b as f64,
            Bound::Unbounded => f64::INFINITY,
        }
    }
}

impl<T: Serialize> Serialize for Bound<T> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Bound::Finite(v) => v.serialize(s),
            Bound::Unbounded => s.serialize_str("inf"),
        }
    }
}

trait FromNumber: Sized {
    fn from_f64(v: f64) -> Option<Self>;
    fn from_i64(v: i64) -> Option<Self>;
}

impl FromNumber for f64 {
    fn from_f64(v: f64) -> Option<Self> {
        v.is_finite().then_some(v)
    }
    fn from_i64(v: i64) -> Option<Self> {
        Some(v as f64)
    }
}

impl FromNumber for u64 {
    fn from_f64(v: f64) -> Option<Self> {
        (v.is_finite() && v >= 0.0 && v.fract() == 0.0 && v <= u64::MAX as f64).then_some(v as u64)
    }
    fn from_i64(v: i64) -> Option<Self> {
        u64::try_from(v).ok()
    }
}

struct BoundVisitor<T>(std::marker::PhantomData<T>);

impl<T: FromNumber> Visitor<'_> for BoundVisitor<T> {
    type Value = Bound<T>;

    fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("a finite number or the string \"inf\"")
    }

    fn visit_str<E: de::Error>(self, v: &str) -> Result<Self::Value, E> {
        if v == "inf" {
            Ok(Bound::Unbounded)
        } else {
            Err(E::invalid_value(de::Unexpected::Str(v), &self))
        }
    }

    fn visit_f64<E: de::Error>(self, v: f64) -> Result<Self::Value, E> {
        T::from_f64(v)
            .map(Bound::Finite)
            .ok_or_else(|| E::invalid_value(de::Unexpected::Float(v), &self))
    }

    fn visit_i64<E: de::Error>(self, v: i64) -> Result<Self::Value, E> {
        T::from_i64(v)
            .map(Bound::Finite)
            .ok_or_else(|| E::invalid_value(de::Unexpected::Signed(v), &self))
    }

    fn visit_u64<E: de::Error>(self, v: u64) -> Result<Self::Value, E> {
        match i64::try_from(v) {
            Ok(i) => self.visit_i64(i),
            Err(_) => self.visit_f64(v as f64),
        }
    }
}

impl<'de> Deserialize<'de> for Bound<f64> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        d.deserialize_any(BoundVisitor::<f64>(std::marker::PhantomData))
    }
}

impl<'de> Deserialize<'de> for Bound<u64> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        d.deserialize_any(BoundVisitor::<u64>(std::marker::PhantomData))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowKind {
    Regular,
    Flexible,
}

impl fmt::Display for FlowKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FlowKind::Regular => "regular",
            FlowKind::Flexible => "flexible",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowSpec {
    pub id: FlowId,
    pub src: NodeId,
    pub dst: NodeId,
    pub size: FlowSize,
    pub alpha: Alpha,
    /// Reliability factor: minimum fraction of the payload that is delivered.
    pub r: f64,
    pub arrival_time: f64,
    pub kind: FlowKind,
}

impl FlowSpec {
    /// A regular flow: unbounded aggressiveness and full reliability.
    pub fn regular(id: u64, src: u32, dst: u32, size_bytes: u64, arrival_time: f64) -> Self {
        FlowSpec {
            id: FlowId(id),
            src: NodeId(src),
            dst: NodeId(dst),
            size: Bound::Finite(size_bytes),
            alpha: Bound::Unbounded,
            r: 1.0,
            arrival_time,
            kind: FlowKind::Regular,
        }
    }

    pub fn flexible(
        id: u64,
        src: u32,
        dst: u32,
        size_bytes: u64,
        alpha: f64,
        r: f64,
        arrival_time: f64,
    ) -> Self {
        FlowSpec {
            id: FlowId(id),
            src: NodeId(src),
            dst: NodeId(dst),
            size: Bound::Finite(size_bytes),
            alpha: Bound::Finite(alpha),
            r,
            arrival_time,
            kind: FlowKind::Flexible,
        }
    }

    /// Kind implied by the degradation parameters.
    pub fn implied_kind(alpha: Alpha, r: f64) -> FlowKind {
        if alpha.is_unbounded() && r == 1.0 {
            FlowKind::Regular
        } else {
            FlowKind::Flexible
        }
    }

    pub fn size_bytes(&self) -> f64 {
        self.size.bytes()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub id: LinkId,
    pub tail: NodeId,
    pub head: NodeId,
    /// Line rate in bits per second.
    pub capacity: f64,
    #[serde(default = "LinkSpec::default_efficiency")]
    pub efficiency: f64,
    #[serde(default = "LinkSpec::default_weight_high")]
    pub weight_high: u32,
    #[serde(default = "LinkSpec::default_weight_low")]
    pub weight_low: u32,
}

impl LinkSpec {
    pub const DEFAULT_EFFICIENCY: f64 = 0.96;
    pub const DEFAULT_WEIGHT_HIGH: u32 = 9;
    pub const DEFAULT_WEIGHT_LOW: u32 = 1;

    fn default_efficiency() -> f64 {
        Self::DEFAULT_EFFICIENCY
    }
    fn default_weight_high() -> u32 {
        Self::DEFAULT_WEIGHT_HIGH
    }
    fn default_weight_low() -> u32 {
        Self::DEFAULT_WEIGHT_LOW
    }

    pub fn new(id: u32, tail: u32, head: u32, capacity: f64) -> Self {
        LinkSpec {
            id: LinkId(id),
            tail: NodeId(tail),
            head: NodeId(head),
            capacity,
            efficiency: Self::DEFAULT_EFFICIENCY,
            weight_high: Self::DEFAULT_WEIGHT_HIGH,
            weight_low: Self::DEFAULT_WEIGHT_LOW,
        }
    }

    pub fn with_efficiency(mut self, efficiency: f64) -> Self {
        self.efficiency = efficiency;
        self
    }

    pub fn with_weights(mut self, high: u32, low: u32) -> Self {
        self.weight_high = high;
        self.weight_low = low;
        self
    }

    pub fn effective_capacity(&self) -> f64 {
        self.capacity * self.efficiency
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Topology {
    pub nodes: BTreeSet<NodeId>,
    pub links: Vec<LinkSpec>,
    pub routes: BTreeMap<(NodeId, NodeId), Vec<LinkId>>,
}

impl Topology {
    /// Two nodes joined by one directed link (node 0 -> node 1, link 0).
    pub fn single_link(capacity: f64, efficiency: f64) -> Self {
        let mut topo = Topology::default();
        topo.nodes.extend([NodeId(0), NodeId(1)]);
        topo.links
            .push(LinkSpec::new(0, 0, 1, capacity).with_efficiency(efficiency));
        topo.routes.insert((NodeId(0), NodeId(1)), vec![LinkId(0)]);
        topo
    }

    /// Hosts `0..hosts` hanging off one switch (node `hosts`), with an uplink
    /// and a downlink per host and a two-hop route between every host pair.
    ///
    /// Host `i` owns uplink `2i` (host -> switch) and downlink `2i + 1`.
    pub fn star(hosts: u32, capacity: f64, efficiency: f64) -> Self {
        let mut topo = Topology::default();
        let switch = hosts;
        topo.nodes.extend((0..=hosts).map(NodeId));
        for h in 0..hosts {
            topo.links
                .push(LinkSpec::new(2 * h, h, switch, capacity).with_efficiency(efficiency));
            topo.links
                .push(LinkSpec::new(2 * h + 1, switch, h, capacity).with_efficiency(efficiency));
        }
        for s in 0..hosts {
            for d in 0..hosts {
                if s != d {
                    topo.routes.insert(
                        (NodeId(s), NodeId(d)),
                        vec![LinkId(2 * s), LinkId(2 * d + 1)],
                    );
                }
            }
        }
        topo
    }

    pub fn link(&self, id: LinkId) -> Option<&LinkSpec> {
        self.links.iter().find(|l| l.id == id)
    }

    pub fn route(&self, src: NodeId, dst: NodeId) -> Option<&[LinkId]> {
        self.routes.get(&(src, dst)).map(Vec::as_slice)
    }

    /// Override the efficiency factor of every link.
    pub fn set_efficiency(&mut self, efficiency: f64) {
        for l in &mut self.links {
            l.efficiency = efficiency;
        }
    }
}

/// Probing timing shared network-wide.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    /// Interval duration in seconds.
    pub t_int: f64,
    pub d_warmup: u32,
    pub d_measure: u32,
    pub d_exploit: u32,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        PhaseConfig {
            t_int: 5e-3,
            d_warmup: 1,
            d_measure: 1,
            d_exploit: 3,
        }
    }
}

impl PhaseConfig {
    pub fn intervals_per_cycle(&self) -> u32 {
        self.d_warmup + self.d_measure + self.d_exploit
    }

    pub fn cycle_length(&self) -> f64 {
        f64::from(self.intervals_per_cycle()) * self.t_int
    }

    /// Fraction of each cycle spent in the exploit phase.
    pub fn exploit_fraction(&self) -> f64 {
        f64::from(self.d_exploit) / f64::from(self.intervals_per_cycle())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Priority {
    High,
    Low,
}

impl fmt::Display for Priority {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Priority::High => "high",
            Priority::Low => "low",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scheme {
    /// Everyone shares one class.
    Baseline,
    /// Flexible flows only get what regular flows leave unused.
    AbsolutePriority,
    /// Flexible flows permanently in the low class of a weighted two-queue link.
    WeightedPriority { w_high: u32, w_low: u32 },
    /// Budgeted deprioritization with synchronized probing.
    ReFlex(PhaseConfig),
}

impl Scheme {
    pub fn name(&self) -> String {
        match self {
            Scheme::Baseline => "baseline".into(),
            Scheme::AbsolutePriority => "absolute".into(),
            Scheme::WeightedPriority { w_high, w_low } => format!("weighted-{w_high}-{w_low}"),
            Scheme::ReFlex(_) => "reflex".into(),
        }
    }

    pub fn phases(&self) -> Option<&PhaseConfig> {
        match self {
            Scheme::ReFlex(cfg) => Some(cfg),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub tick_dt: f64,
    pub duration: f64,
    pub warmup_window: f64,
    pub cooldown_window: f64,
    /// Transport convergence time constant; zero means rates jump to their targets.
    pub conv_tau: f64,
    /// Standard deviation of multiplicative noise on fair-share estimates.
    pub estimate_noise: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            tick_dt: 1e-4,
            duration: 10.0,
            warmup_window: 0.0,
            cooldown_window: 0.0,
            conv_tau: 1e-3,
            estimate_noise: 0.0,
            seed: 0,
        }
    }
}

impl SimConfig {
    /// Number of ticks in `seconds`, if it is an integer multiple of the tick.
    pub fn ticks_in(&self, seconds: f64) -> Option<u64> {
        let n = seconds / self.tick_dt;
        let rounded = n.round();
        ((n - rounded).abs() <= 1e-6 * rounded.max(1.0) && rounded >= 1.0).then_some(rounded as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ValidationError {
    #[error("flow {flow}: no route from node {src} to node {dst}")]
    MissingRoute {
        flow: FlowId,
        src: NodeId,
        dst: NodeId,
    },
    #[error("flow {flow}: reliability factor {r} outside [0, 1]")]
    InvalidReliability { flow: FlowId, r: f64 },
    #[error("flow {flow}: aggressiveness factor {alpha} must be non-negative")]
    InvalidAlpha { flow: FlowId, alpha: f64 },
    #[error("flow {flow}: a finite size is required when r < 1")]
    SizeRequired { flow: FlowId },
    #[error("flow {flow}: kind {kind} does not match alpha/r")]
    KindMismatch { flow: FlowId, kind: FlowKind },
    #[error("flow {flow}: arrival time {time} is negative or not finite")]
    InvalidArrival { flow: FlowId, time: f64 },
    #[error("flow id {flow} appears more than once")]
    DuplicateFlow { flow: FlowId },
    #[error("link {link}: {reason}")]
    InvalidLink { link: LinkId, reason: String },
    #[error("route {src}->{dst}: {reason}")]
    InvalidRoute {
        src: NodeId,
        dst: NodeId,
        reason: String,
    },
    #[error("phase config: {0}")]
    InvalidPhases(String),
    #[error("tick {tick_dt} s does not divide interval {t_int} s into at least 10 ticks")]
    TickMisaligned { tick_dt: f64, t_int: f64 },
    #[error("sim config: {0}")]
    InvalidSim(String),
}

impl ValidationError {
    fn sort_key(&self) -> (u8, u64, String) {
        let (rank, id) = match self {
            ValidationError::InvalidLink { link, .. } => (0, u64::from(link.0)),
            ValidationError::InvalidRoute { src, dst, .. } => {
                (1, (u64::from(src.0) << 32) | u64::from(dst.0))
            }
            ValidationError::InvalidPhases(_) => (2, 0),
            ValidationError::TickMisaligned { .. } => (3, 0),
            ValidationError::InvalidSim(_) => (4, 0),
            ValidationError::DuplicateFlow { flow } => (5, flow.0),
            ValidationError::MissingRoute { flow, .. }
            | ValidationError::InvalidReliability { flow, .. }
            | ValidationError::InvalidAlpha { flow, .. }
            | ValidationError::SizeRequired { flow }
            | ValidationError::KindMismatch { flow, .. }
            | ValidationError::InvalidArrival { flow, .. } => (6, flow.0),
        };
        (rank, id, self.to_string())
    }
}

/// A scenario whose invariants have been checked. Flows are ordered by id.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub topology: Topology,
    pub flows: Vec<FlowSpec>,
    pub scheme: Scheme,
    pub sim: SimConfig,
}

/// Check every invariant of a scenario, returning all violations at once.
///
/// The result does not depend on the order of `flows`.
pub fn validate_scenario(
    topology: Topology,
    mut flows: Vec<FlowSpec>,
    scheme: Scheme,
    sim: SimConfig,
) -> Result<Scenario, Vec<ValidationError>> {
    let mut errors = Vec::new();

    let mut seen_links = BTreeSet::new();
    for link in &topology.links {
        let mut bad = |reason: &str| {
            errors.push(ValidationError::InvalidLink {
                link: link.id,
                reason: reason.into(),
            })
        };
        if !seen_links.insert(link.id) {
            bad("duplicate link id");
        }
        if !(link.capacity > 0.0 && link.capacity.is_finite()) {
            bad("capacity must be positive");
        }
        if !(link.efficiency > 0.0 && link.efficiency <= 1.0) {
            bad("efficiency must lie in (0, 1]");
        }
        if link.weight_high + link.weight_low == 0 {
            bad("class weights must not both be zero");
        }
        if !topology.nodes.contains(&link.tail) || !topology.nodes.contains(&link.head) {
            bad("endpoint is not a known node");
        }
    }

    for (&(src, dst), route) in &topology.routes {
        let mut bad =
            |reason: String| errors.push(ValidationError::InvalidRoute { src, dst, reason });
        if route.is_empty() {
            bad("empty route".into());
            continue;
        }
        let mut at = src;
        let mut visited = BTreeSet::from([src]);
        let walk = route.iter().try_for_each(|lid| match topology.link(*lid) {
            None => Err(format!("unknown link {lid}")),
            Some(l) if l.tail != at => Err(format!("link {lid} does not start at node {at}")),
            Some(l) => {
                at = l.head;
                if visited.insert(at) {
                    Ok(())
                } else {
                    Err("route revisits a node".into())
                }
            }
        });
        match walk {
            Err(reason) => bad(reason),
            Ok(()) if at != dst => bad(format!("route ends at node {at}")),
            Ok(()) => {}
        }
    }

    if let Scheme::ReFlex(cfg) = &scheme {
        if !(cfg.t_int > 0.0 && cfg.t_int.is_finite()) {
            errors.push(ValidationError::InvalidPhases(
                "interval duration must be positive".into(),
            ));
        }
        if cfg.d_warmup == 0 || cfg.d_measure == 0 || cfg.d_exploit == 0 {
            errors.push(ValidationError::InvalidPhases(
                "phase lengths must be positive".into(),
            ));
        }
        let aligned = sim.ticks_in(cfg.t_int).is_some_and(|n| n >= 10);
        if cfg.t_int > 0.0 && sim.tick_dt > 0.0 && !aligned {
            errors.push(ValidationError::TickMisaligned {
                tick_dt: sim.tick_dt,
                t_int: cfg.t_int,
            });
        }
    }
    if let Scheme::WeightedPriority { w_high, w_low } = scheme {
        if w_high + w_low == 0 {
            errors.push(ValidationError::InvalidSim(
                "weighted scheme needs a positive weight".into(),
            ));
        }
    }
    if !(sim.tick_dt > 0.0 && sim.tick_dt.is_finite()) {
        errors.push(ValidationError::InvalidSim("tick must be positive".into()));
    }
    if !(sim.duration > 0.0 && sim.duration.is_finite()) {
        errors.push(ValidationError::InvalidSim(
            "duration must be positive".into(),
        ));
    }
    if sim.conv_tau < 0.0 || !sim.conv_tau.is_finite() {
        errors.push(ValidationError::InvalidSim(
            "convergence time constant must be >= 0".into(),
        ));
    }
    if !(sim.estimate_noise >= 0.0 && sim.estimate_noise.is_finite()) {
        errors.push(ValidationError::InvalidSim(
            "estimate noise must be >= 0".into(),
        ));
    }
    if sim.warmup_window < 0.0 || sim.cooldown_window < 0.0 {
        errors.push(ValidationError::InvalidSim(
            "measurement windows must be >= 0".into(),
        ));
    }

    flows.sort_by_key(|f| f.id);
    for pair in flows.windows(2) {
        if pair[0].id == pair[1].id
            && errors
                .last()
                .is_none_or(|e| *e != ValidationError::DuplicateFlow { flow: pair[0].id })
        {
            errors.push(ValidationError::DuplicateFlow { flow: pair[0].id });
        }
    }
    for f in &flows {
        let flow = f.id;
        if !(0.0..=1.0).contains(&f.r) {
            errors.push(ValidationError::InvalidReliability { flow, r: f.r });
        }
        if let Bound::Finite(a) = f.alpha {
            if a.is_nan() || a < 0.0 {
                errors.push(ValidationError::InvalidAlpha { flow, alpha: a });
            }
        }
        if f.r < 1.0 && f.size.is_unbounded() {
            errors.push(ValidationError::SizeRequired { flow });
        }
        if FlowSpec::implied_kind(f.alpha, f.r) != f.kind {
            errors.push(ValidationError::KindMismatch { flow, kind: f.kind });
        }
        if !(f.arrival_time >= 0.0 && f.arrival_time.is_finite()) {
            errors.push(ValidationError::InvalidArrival {
                flow,
                time: f.arrival_time,
            });
        }
        if topology.route(f.src, f.dst).is_none() {
            errors.push(ValidationError::MissingRoute {
                flow,
                src: f.src,
                dst: f.dst,
            });
        }
    }

    if errors.is_empty() {
        Ok(Scenario {
            topology,
            flows,
            scheme,
            sim,
        })
    } else {
        errors.sort_by_key(ValidationError::sort_key);
        errors.dedup();
        Err(errors)
    }
}
