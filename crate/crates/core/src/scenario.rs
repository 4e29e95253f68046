//! TOML scenario files.
//!
//! ```toml
//! [topology]
//! kind = "single_link"        # single_link | star | explicit
//! capacity_bps = 10e9
//! efficiency = 1.0
//!
//! [[workloads]]
//! class = "flexible"
//! times = [0.0]
//! size_bytes = 5_000_000_000
//!
//! [[workloads]]
//! class = "regular"
//! times = [2.0]
//! size_bytes = 250_000_000
//!
//! [scheme]
//! kind = "reflex"             # baseline | absolute | weighted | reflex
//!
//! [reflex]
//! alpha = 0.9
//!
//! [sim]
//! duration = 20.0
//! conv_tau = 0.0
//! ```
//!
//! Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::types::{
    validate_scenario, Alpha, Bound, FlowKind, LinkId, LinkSpec, NodeId, PhaseConfig, Scenario,
    Scheme, SimConfig, Topology, ValidationError,
};
use crate::workload::{
    generate_mix, target_rate_for_utilization, ArrivalKind, ArrivalProcess, EndpointModel,
    FlowTemplate, SizeCdfTable, SizeModel, WorkloadError,
};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(#[from] toml::de::Error),
    #[error("{key}: {message}")]
    Key { key: String, message: String },
    #[error("{key}: {source}")]
    Workload { key: String, source: WorkloadError },
    #[error("invalid scenario:\n{}", .0.iter().map(|e| format!("  {e}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<ValidationError>),
}

fn key_error(key: impl Into<String>, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Key {
        key: key.into(),
        message: message.into(),
    }
}

fn default_efficiency() -> f64 {
    0.96
}

fn default_weights() -> [u32; 2] {
    [9, 1]
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TopologySection {
    SingleLink {
        capacity_bps: f64,
        #[serde(default = "default_efficiency")]
        efficiency: f64,
        #[serde(default = "default_weights")]
        weights: [u32; 2],
    },
    Star {
        hosts: u32,
        capacity_bps: f64,
        #[serde(default = "default_efficiency")]
        efficiency: f64,
        #[serde(default = "default_weights")]
        weights: [u32; 2],
    },
    Explicit {
        nodes: Vec<u32>,
        links: Vec<LinkSection>,
        routes: Vec<RouteSection>,
    },
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSection {
    pub id: u32,
    pub tail: u32,
    pub head: u32,
    pub capacity_bps: f64,
    #[serde(default = "default_efficiency")]
    pub efficiency: f64,
    #[serde(default = "default_weights")]
    pub weights: [u32; 2],
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteSection {
    pub src: u32,
    pub dst: u32,
    pub links: Vec<u32>,
}

impl TopologySection {
    fn build(&self) -> Topology {
        match self {
            TopologySection::SingleLink {
                capacity_bps,
                efficiency,
                weights,
            } => {
                let mut t = Topology::single_link(*capacity_bps, *efficiency);
                t.links
                    .iter_mut()
                    .for_each(|l| *l = l.clone().with_weights(weights[0], weights[1]));
                t
            }
            TopologySection::Star {
                hosts,
                capacity_bps,
                efficiency,
                weights,
            } => {
                let mut t = Topology::star(*hosts, *capacity_bps, *efficiency);
                t.links
                    .iter_mut()
                    .for_each(|l| *l = l.clone().with_weights(weights[0], weights[1]));
                t
            }
            TopologySection::Explicit {
                nodes,
                links,
                routes,
            } => Topology {
                nodes: nodes.iter().copied().map(NodeId).collect(),
                links: links
                    .iter()
                    .map(|l| {
                        LinkSpec::new(l.id, l.tail, l.head, l.capacity_bps)
                            .with_efficiency(l.efficiency)
                            .with_weights(l.weights[0], l.weights[1])
                    })
                    .collect(),
                routes: routes
                    .iter()
                    .map(|r| {
                        (
                            (NodeId(r.src), NodeId(r.dst)),
                            r.links.iter().copied().map(LinkId).collect(),
                        )
                    })
                    .collect(),
            },
        }
    }

    /// Host count and nominal per-host access capacity, where the shape
    /// defines them.
    fn access(&self) -> Option<(u32, f64)> {
        match self {
            TopologySection::SingleLink { capacity_bps, .. } => Some((1, *capacity_bps)),
            TopologySection::Star {
                hosts,
                capacity_bps,
                ..
            } => Some((*hosts, *capacity_bps)),
            TopologySection::Explicit { .. } => None,
        }
    }

    pub fn set_efficiency(&mut self, value: f64) {
        match self {
            TopologySection::SingleLink { efficiency, .. }
            | TopologySection::Star { efficiency, .. } => *efficiency = value,
            TopologySection::Explicit { links, .. } => {
                links.iter_mut().for_each(|l| l.efficiency = value)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSection {
    /// `regular` or `flexible`; flexible workloads default to the `[reflex]`
    /// alpha and r.
    pub class: FlowKind,
    /// Poisson arrivals per second.
    pub rate: Option<f64>,
    /// Poisson arrivals offering this share of the access capacity.
    pub utilization: Option<f64>,
    /// Fixed arrival times in seconds.
    pub times: Option<Vec<f64>>,
    pub size_bytes: Option<u64>,
    /// `web_search`, or a path to a size CDF relative to the scenario file.
    pub size_cdf: Option<String>,
    pub alpha: Option<Alpha>,
    pub r: Option<f64>,
    pub src: Option<u32>,
    pub dst: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SchemeSection {
    Baseline,
    Absolute,
    Weighted {
        #[serde(default = "nine")]
        w_high: u32,
        #[serde(default = "one")]
        w_low: u32,
    },
    #[default]
    Reflex,
}

fn nine() -> u32 {
    9
}

fn one() -> u32 {
    1
}

impl SchemeSection {
    pub fn parse_name(name: &str) -> Option<Self> {
        match name {
            "baseline" => Some(SchemeSection::Baseline),
            "absolute" => Some(SchemeSection::Absolute),
            "weighted" => Some(SchemeSection::Weighted {
                w_high: 9,
                w_low: 1,
            }),
            "reflex" => Some(SchemeSection::Reflex),
            _ => {
                let rest = name.strip_prefix("weighted-")?;
                let (h, l) = rest.split_once('-')?;
                Some(SchemeSection::Weighted {
                    w_high: h.parse().ok()?,
                    w_low: l.parse().ok()?,
                })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReflexSection {
    pub t_int: f64,
    pub d_warmup: u32,
    pub d_measure: u32,
    pub d_exploit: u32,
    /// Default aggressiveness factor of flexible workloads.
    pub alpha: Alpha,
    /// Default reliability factor of flexible workloads.
    pub r: f64,
}

impl Default for ReflexSection {
    fn default() -> Self {
        let p = PhaseConfig::default();
        ReflexSection {
            t_int: p.t_int,
            d_warmup: p.d_warmup,
            d_measure: p.d_measure,
            d_exploit: p.d_exploit,
            alpha: Bound::Finite(1.0),
            r: 1.0,
        }
    }
}

impl ReflexSection {
    pub fn phases(&self) -> PhaseConfig {
        PhaseConfig {
            t_int: self.t_int,
            d_warmup: self.d_warmup,
            d_measure: self.d_measure,
            d_exploit: self.d_exploit,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    pub tick: f64,
    pub duration: f64,
    pub warmup: f64,
    pub cooldown: f64,
    pub conv_tau: f64,
    pub estimate_noise: f64,
    pub seed: u64,
}

impl Default for SimSection {
    fn default() -> Self {
        let s = SimConfig::default();
        SimSection {
            tick: s.tick_dt,
            duration: s.duration,
            warmup: s.warmup_window,
            cooldown: s.cooldown_window,
            conv_tau: s.conv_tau,
            estimate_noise: s.estimate_noise,
            seed: s.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputsSection {
    pub flows: String,
    pub timeseries: String,
    pub links: String,
    pub summary: String,
    /// Time-series decimation in ticks; 0 disables the time series.
    pub sample_every: u64,
}

impl Default for OutputsSection {
    fn default() -> Self {
        OutputsSection {
            flows: "flows.csv".into(),
            timeseries: "timeseries.csv".into(),
            links: "links.csv".into(),
            summary: "summary.txt".into(),
            sample_every: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default)]
    pub name: Option<String>,
    pub topology: TopologySection,
    #[serde(default)]
    pub workloads: Vec<WorkloadSection>,
    #[serde(default)]
    pub scheme: SchemeSection,
    #[serde(default)]
    pub reflex: ReflexSection,
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default)]
    pub outputs: OutputsSection,
    /// Directory that relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ScenarioFile {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ScenarioError> {
        let mut file: ScenarioFile = toml::from_str(text)?;
        file.base_dir = base_dir.to_path_buf();
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn scheme(&self) -> Scheme {
        match self.scheme {
            SchemeSection::Baseline => Scheme::Baseline,
            SchemeSection::Absolute => Scheme::AbsolutePriority,
            SchemeSection::Weighted { w_high, w_low } => Scheme::WeightedPriority { w_high, w_low },
            SchemeSection::Reflex => Scheme::ReFlex(self.reflex.phases()),
        }
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            tick_dt: self.sim.tick,
            duration: self.sim.duration,
            warmup_window: self.sim.warmup,
            cooldown_window: self.sim.cooldown,
            conv_tau: self.sim.conv_tau,
            estimate_noise: self.sim.estimate_noise,
            seed: self.sim.seed,
        }
    }

    fn size_model(&self, key: &str, w: &WorkloadSection) -> Result<SizeModel, ScenarioError> {
        match (w.size_bytes, &w.size_cdf) {
            (Some(b), None) => Ok(SizeModel::Constant(b)),
            (None, Some(name)) if name == "web_search" => {
                Ok(SizeModel::Empirical(SizeCdfTable::web_search()))
            }
            (None, Some(file)) => {
                let path = self.base_dir.join(file);
                let text = std::fs::read_to_string(&path).map_err(|source| ScenarioError::Io {
                    path: path.clone(),
                    source,
                })?;
                SizeCdfTable::parse(&text)
                    .map(SizeModel::Empirical)
                    .map_err(|source| ScenarioError::Workload {
                        key: format!("{key}.size_cdf"),
                        source,
                    })
            }
            _ => Err(key_error(
                key,
                "exactly one of `size_bytes` or `size_cdf` is required",
            )),
        }
    }

    fn process(&self, index: usize, w: &WorkloadSection) -> Result<ArrivalProcess, ScenarioError> {
        let key = format!("workloads[{index}]");
        let size = self.size_model(&key, w)?;
        let kind = match (w.rate, w.utilization, &w.times) {
            (Some(rate), None, None) => ArrivalKind::Poisson { rate },
            (None, Some(u), None) => {
                let (hosts, capacity) = self.topology.access().ok_or_else(|| {
                    key_error(
                        format!("{key}.utilization"),
                        "needs a single_link or star topology",
                    )
                })?;
                let rate = target_rate_for_utilization(size.mean(), hosts, capacity, u).map_err(
                    |source| ScenarioError::Workload {
                        key: format!("{key}.utilization"),
                        source,
                    },
                )?;
                ArrivalKind::Poisson { rate }
            }
            (None, None, Some(times)) => ArrivalKind::FixedTimes(times.clone()),
            _ => {
                return Err(key_error(
                    &key,
                    "exactly one of `rate`, `utilization` or `times` is required",
                ))
            }
        };
        let template = match w.class {
            FlowKind::Regular => {
                if w.alpha.is_some() || w.r.is_some() {
                    return Err(key_error(&key, "regular workloads take no `alpha` or `r`"));
                }
                FlowTemplate::regular()
            }
            FlowKind::Flexible => FlowTemplate {
                alpha: w.alpha.unwrap_or(self.reflex.alpha),
                r: w.r.unwrap_or(self.reflex.r),
            },
        };
        if template.kind() != w.class {
            return Err(key_error(
                &key,
                "flexible workload with alpha = inf and r = 1 is regular",
            ));
        }
        let endpoints = match (w.src, w.dst, &self.topology) {
            (Some(src), Some(dst), _) => EndpointModel::Fixed {
                src: NodeId(src),
                dst: NodeId(dst),
            },
            (None, None, TopologySection::SingleLink { .. }) => EndpointModel::Fixed {
                src: NodeId(0),
                dst: NodeId(1),
            },
            (None, None, TopologySection::Star { hosts, .. }) => {
                EndpointModel::AllPairsUniform { hosts: *hosts }
            }
            _ => return Err(key_error(&key, "`src` and `dst` are required together")),
        };
        Ok(ArrivalProcess {
            kind,
            size,
            template,
            endpoints,
        })
    }

    pub fn processes(&self) -> Result<Vec<ArrivalProcess>, ScenarioError> {
        self.workloads
            .iter()
            .enumerate()
            .map(|(i, w)| self.process(i, w))
            .collect()
    }

    /// Generate the workload and validate the resulting scenario.
    pub fn build(&self) -> Result<Scenario, ScenarioError> {
        let processes = self.processes()?;
        let sim = self.sim_config();
        let flows = if processes.is_empty() {
            Vec::new()
        } else {
            generate_mix(&processes, sim.duration, sim.seed).map_err(|source| {
                ScenarioError::Workload {
                    key: "workloads".into(),
                    source,
                }
            })?
        };
        validate_scenario(self.topology.build(), flows, self.scheme(), sim)
            .map_err(ScenarioError::Invalid)
    }

    /// Measurement window over arrival times.
    pub fn window(&self) -> (f64, f64) {
        (self.sim.warmup, self.sim.duration - self.sim.cooldown)
    }
}
