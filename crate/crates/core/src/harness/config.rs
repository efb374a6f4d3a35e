//! JSON experiment configuration, schema version 1.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::generators::{Observable, Polynomial, TestFunction};
use crate::model::{ArrivalTable, InitialLaw, Model, QueueLaw};
use crate::network::DescriptorSpace;
use crate::queue::{
    ClassId, ClassTransitionTable, Customer, Discipline, Letter, QueueState, ServiceLaw,
};
use crate::topology::{Graph, GraphBounds, GraphSpec, NodeId};

pub const SCHEMA_VERSION: u32 = 1;

/// One rejected field, tagged with the bound or rule it breaks.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub rule: &'static str,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}", self.rule, self.message)
    }
}

fn join(v: &[Violation]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported schema version {0}, expected {SCHEMA_VERSION}")]
    Schema(u32),
    #[error("{} violation(s): {}", .0.len(), join(.0))]
    Invalid(Vec<Violation>),
}

impl ConfigError {
    pub fn violations(&self) -> &[Violation] {
        match self {
            ConfigError::Invalid(v) => v,
            _ => &[],
        }
    }
}

pub const SWAP_BOUND: &str = "swap-rate bound";
pub const DEGREE_BOUND: &str = "degree bound";
pub const ARRIVAL_BOUND: &str = "arrival-rate bound";
pub const HAZARD_BOUND: &str = "hazard bound";
pub const REFERENCE: &str = "referential integrity";
pub const RANGE: &str = "parameter range";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrivalSpec {
    pub class: String,
    pub node: String,
    pub dest: String,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LawOverride {
    pub class: String,
    pub node: String,
    pub law: ServiceLaw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceSpec {
    pub default: ServiceLaw,
    #[serde(default)]
    pub overrides: Vec<LawOverride>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisciplineSpec {
    pub default: Discipline,
    #[serde(default)]
    pub overrides: BTreeMap<String, Discipline>,
}

impl Default for DisciplineSpec {
    fn default() -> Self {
        DisciplineSpec {
            default: Discipline::Fifo,
            overrides: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionSpec {
    pub class: String,
    pub from: String,
    pub to: String,
    pub becomes: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LetterSpec {
    pub class: String,
    pub dest: String,
    #[serde(default)]
    pub age: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixturePart {
    pub queue: Vec<LetterSpec>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum QueueLawSpec {
    Empty,
    Mixture {
        parts: Vec<MixturePart>,
    },
    /// `letters` empty means every reachable letter.
    Geometric {
        p: f64,
        max_len: usize,
        #[serde(default)]
        letters: Vec<LetterSpec>,
        #[serde(default)]
        age_mean: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSpec {
    pub default: QueueLawSpec,
    #[serde(default)]
    pub overrides: BTreeMap<String, QueueLawSpec>,
}

impl Default for InitialSpec {
    fn default() -> Self {
        InitialSpec {
            default: QueueLawSpec::Empty,
            overrides: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    /// Strict upper bound on every swap rate.
    pub swap_rate: f64,
    /// Strict upper bound on the total external arrival rate at any node.
    pub arrival_rate: f64,
    /// Upper bound on every service hazard.
    pub hazard: f64,
    #[serde(default)]
    pub max_degree: Option<usize>,
}

impl Default for Bounds {
    fn default() -> Self {
        Bounds {
            swap_rate: 10.0,
            arrival_rate: 100.0,
            hazard: 1000.0,
            max_degree: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OdeSettings {
    /// Maximum queue length kept.
    pub truncation: usize,
    pub max_dim: usize,
    pub dt: f64,
    pub leak_tol: f64,
}

impl Default for OdeSettings {
    fn default() -> Self {
        OdeSettings {
            truncation: 20,
            max_dim: 2_000_000,
            dt: 0.01,
            leak_tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PicardSettings {
    pub replicas: usize,
    pub step: f64,
    pub window: f64,
    pub tol: f64,
    pub batches: usize,
    pub max_iter: usize,
    pub lipschitz: Option<f64>,
}

impl Default for PicardSettings {
    fn default() -> Self {
        PicardSettings {
            replicas: 2000,
            step: 0.05,
            window: 0.25,
            tol: 1e-3,
            batches: 10,
            max_iter: 30,
            lipschitz: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObservableSpec {
    EmptyIndicator,
    LengthIs { len: usize },
    LengthCapped { cap: usize },
    HeadClass { class: String },
    HeadLetter { class: String, dest: String },
    AgeRamp { scale: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermSpec {
    pub node: String,
    pub observable: ObservableSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionSpec {
    pub name: String,
    pub terms: Vec<TermSpec>,
    pub outer: Polynomial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSettings {
    pub functions: Vec<FunctionSpec>,
    pub copies: Vec<usize>,
    pub samples: usize,
    /// Law the atoms are drawn from; defaults to the initial law.
    #[serde(default)]
    pub sampler: Option<InitialSpec>,
}

/// Experiment description as read from disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: u32,
    #[serde(default)]
    pub name: String,
    pub graph: GraphSpec,
    pub classes: Vec<String>,
    #[serde(default)]
    pub arrivals: Vec<ArrivalSpec>,
    pub service: ServiceSpec,
    #[serde(default)]
    pub disciplines: DisciplineSpec,
    #[serde(default)]
    pub transitions: Vec<TransitionSpec>,
    #[serde(default)]
    pub initial: InitialSpec,
    #[serde(default)]
    pub bounds: Bounds,
    #[serde(default)]
    pub observation: DescriptorSpace,
    #[serde(default)]
    pub ode: OdeSettings,
    #[serde(default)]
    pub picard: PicardSettings,
    pub horizon: f64,
    #[serde(default)]
    pub snapshot_times: Vec<f64>,
    /// Copy counts `N` for simulation and convergence studies.
    #[serde(default)]
    pub copies: Vec<usize>,
    /// Independent simulation runs per `N`.
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_budget")]
    pub event_budget: u64,
    #[serde(default)]
    pub generator: Option<GeneratorSettings>,
}

fn default_seeds() -> usize {
    10
}

fn default_budget() -> u64 {
    50_000_000
}

/// Validated configuration with the model built.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub model: Model,
    pub initial: InitialLaw,
    pub functions: Vec<TestFunction>,
    pub sampler: InitialLaw,
}

impl Experiment {
    /// Snapshot times, falling back to the horizon alone.
    pub fn times(&self) -> Vec<f64> {
        if self.config.snapshot_times.is_empty() {
            vec![self.config.horizon]
        } else {
            self.config.snapshot_times.clone()
        }
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<Experiment, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<Experiment, ConfigError> {
    let cfg: ExperimentConfig = serde_json::from_str(text)?;
    validate(cfg)
}

struct Names<'a> {
    graph: &'a Graph,
    classes: &'a [String],
    out: Vec<Violation>,
}

impl Names<'_> {
    fn node(&mut self, name: &str, ctx: &str) -> Option<NodeId> {
        let v = self.graph.node(name);
        if v.is_none() {
            self.out.push(Violation {
                rule: REFERENCE,
                message: format!("{ctx}: unknown node `{name}`"),
            });
        }
        v
    }

    fn class(&mut self, name: &str, ctx: &str) -> Option<ClassId> {
        let c = self.classes.iter().position(|c| c == name).map(ClassId);
        if c.is_none() {
            self.out.push(Violation {
                rule: REFERENCE,
                message: format!("{ctx}: unknown class `{name}`"),
            });
        }
        c
    }

    fn letter(&mut self, l: &LetterSpec, ctx: &str) -> Option<Customer> {
        let class = self.class(&l.class, ctx);
        let dest = self.node(&l.dest, ctx);
        if !(l.age >= 0.0 && l.age.is_finite()) {
            self.out.push(Violation {
                rule: RANGE,
                message: format!("{ctx}: age {} must be finite and >= 0", l.age),
            });
        }
        Some(Customer {
            age: l.age.max(0.0),
            ..Customer::new(class?, dest?)
        })
    }

    fn queue_law(&mut self, spec: &QueueLawSpec, ctx: &str) -> Option<QueueLaw> {
        match spec {
            QueueLawSpec::Empty => Some(QueueLaw::Empty),
            QueueLawSpec::Mixture { parts } => {
                let mut out = Vec::new();
                for p in parts {
                    let customers: Option<Vec<Customer>> =
                        p.queue.iter().map(|l| self.letter(l, ctx)).collect();
                    out.push((
                        QueueState {
                            customers: customers?,
                        },
                        p.weight,
                    ));
                }
                Some(QueueLaw::Mixture(out))
            }
            QueueLawSpec::Geometric {
                p,
                max_len,
                letters,
                age_mean,
            } => {
                let letters: Option<Vec<Letter>> = letters
                    .iter()
                    .map(|l| self.letter(l, ctx).map(|c| c.letter()))
                    .collect();
                Some(QueueLaw::Geometric {
                    p: *p,
                    max_len: *max_len,
                    letters: letters?,
                    age_mean: *age_mean,
                })
            }
        }
    }

    fn initial(&mut self, spec: &InitialSpec, ctx: &str) -> Option<Vec<QueueLaw>> {
        for name in spec.overrides.keys() {
            self.node(name, ctx);
        }
        let mut per_node = Vec::new();
        for v in self.graph.nodes() {
            let s = spec
                .overrides
                .get(self.graph.name(v))
                .unwrap_or(&spec.default);
            per_node.push(self.queue_law(s, ctx)?);
        }
        Some(per_node)
    }

    fn observable(&mut self, o: &ObservableSpec, ctx: &str) -> Option<Observable> {
        Some(match o {
            ObservableSpec::EmptyIndicator => Observable::EmptyIndicator,
            ObservableSpec::LengthIs { len } => Observable::LengthIs { len: *len },
            ObservableSpec::LengthCapped { cap } => Observable::LengthCapped { cap: *cap },
            ObservableSpec::HeadClass { class } => Observable::HeadClass {
                class: self.class(class, ctx)?,
            },
            ObservableSpec::HeadLetter { class, dest } => {
                let class = self.class(class, ctx);
                let dest = self.node(dest, ctx);
                Observable::HeadLetter {
                    letter: Letter {
                        class: class?,
                        dest: dest?,
                    },
                }
            }
            ObservableSpec::AgeRamp { scale } => Observable::AgeRamp { scale: *scale },
        })
    }
}

/// Empty geometric letter lists mean "every reachable letter".
fn fill_letters(laws: &mut [QueueLaw], model: &Model) {
    let all = model.reachable_letters([]);
    for law in laws {
        if let QueueLaw::Geometric { letters, .. } = law {
            if letters.is_empty() {
                *letters = all.clone();
            }
        }
    }
}

/// Checks every field and every bound, reporting all violations together.
pub fn validate(cfg: ExperimentConfig) -> Result<Experiment, ConfigError> {
    if cfg.schema != SCHEMA_VERSION {
        return Err(ConfigError::Schema(cfg.schema));
    }
    let mut out = Vec::new();
    let b = cfg.bounds;
    for e in &cfg.graph.edges {
        if !(e.beta >= 0.0 && e.beta < b.swap_rate) {
            out.push(Violation {
                rule: SWAP_BOUND,
                message: format!(
                    "swap rate {} on edge {}-{} must lie in [0, {})",
                    e.beta, e.a, e.b, b.swap_rate
                ),
            });
        }
    }
    let bounds = GraphBounds {
        swap_rate: None,
        max_degree: b.max_degree,
    };
    let graph = match Graph::build_with_bounds(&cfg.graph, bounds) {
        Ok(g) => g,
        Err(e) => {
            let rule = match e {
                crate::topology::TopologyError::DegreeBoundExceeded { .. } => DEGREE_BOUND,
                crate::topology::TopologyError::NegativeRate { .. } => SWAP_BOUND,
                _ => REFERENCE,
            };
            if rule != SWAP_BOUND {
                out.push(Violation {
                    rule,
                    message: e.to_string(),
                });
            }
            return Err(ConfigError::Invalid(out));
        }
    };
    if cfg.classes.is_empty() {
        out.push(Violation {
            rule: RANGE,
            message: "at least one class is required".into(),
        });
    }
    let n = graph.node_count();
    let k = cfg.classes.len();
    let mut names = Names {
        graph: &graph,
        classes: &cfg.classes,
        out,
    };

    let mut arrivals = ArrivalTable::new(n);
    let mut totals = vec![0.0; n];
    for (i, a) in cfg.arrivals.iter().enumerate() {
        let ctx = format!("arrival {i}");
        let (c, v, d) = (
            names.class(&a.class, &ctx),
            names.node(&a.node, &ctx),
            names.node(&a.dest, &ctx),
        );
        if !(a.rate >= 0.0 && a.rate.is_finite()) {
            names.out.push(Violation {
                rule: RANGE,
                message: format!("{ctx}: rate {} must be finite and >= 0", a.rate),
            });
            continue;
        }
        if let (Some(c), Some(v), Some(d)) = (c, v, d) {
            arrivals.add(c, v, d, a.rate);
            totals[v.0] += a.rate;
        }
    }
    for v in graph.nodes() {
        if totals[v.0] >= b.arrival_rate {
            names.out.push(Violation {
                rule: ARRIVAL_BOUND,
                message: format!(
                    "total arrival rate {} at node {} is not below {}",
                    totals[v.0],
                    graph.name(v),
                    b.arrival_rate
                ),
            });
        }
    }

    let mut laws = vec![cfg.service.default.clone(); n * k];
    for (i, o) in cfg.service.overrides.iter().enumerate() {
        let ctx = format!("service override {i}");
        if let (Some(c), Some(v)) = (names.class(&o.class, &ctx), names.node(&o.node, &ctx)) {
            laws[c.0 * n + v.0] = o.law.clone();
        }
    }
    for (i, law) in laws.iter().enumerate() {
        let (c, v) = (i / n, NodeId(i % n));
        let label = format!("class {} at node {}", cfg.classes[c], graph.name(v));
        if let Err(e) = law.validate() {
            names.out.push(Violation {
                rule: RANGE,
                message: format!("service law of {label}: {e}"),
            });
            continue;
        }
        let h = law.hazard_bound();
        if !(h.is_finite() && h <= b.hazard) {
            names.out.push(Violation {
                rule: HAZARD_BOUND,
                message: format!("service hazard of {label} reaches {h}, above {}", b.hazard),
            });
        }
    }

    let mut disciplines = vec![cfg.disciplines.default.clone(); n];
    for (name, d) in &cfg.disciplines.overrides {
        if let Some(v) = names.node(name, "discipline override") {
            disciplines[v.0] = d.clone();
        }
    }
    for (v, d) in disciplines.iter().enumerate() {
        if let Discipline::StaticPriority { ranks, .. } = d {
            if ranks.len() != k {
                names.out.push(Violation {
                    rule: RANGE,
                    message: format!(
                        "priority ranks at node {} list {} classes, expected {k}",
                        graph.name(NodeId(v)),
                        ranks.len()
                    ),
                });
            }
        }
    }

    let mut transitions = ClassTransitionTable::identity(k, &graph);
    for (i, t) in cfg.transitions.iter().enumerate() {
        let ctx = format!("transition {i}");
        let (c, f, to, nc) = (
            names.class(&t.class, &ctx),
            names.node(&t.from, &ctx),
            names.node(&t.to, &ctx),
            names.class(&t.becomes, &ctx),
        );
        if let (Some(c), Some(f), Some(to), Some(nc)) = (c, f, to, nc) {
            if let Err(e) = transitions.set(&graph, c, f, to, nc) {
                names.out.push(Violation {
                    rule: REFERENCE,
                    message: format!("{ctx}: {e}"),
                });
            }
        }
    }

    let initial = names.initial(&cfg.initial, "initial law");
    let sampler = match cfg.generator.as_ref().and_then(|g| g.sampler.as_ref()) {
        Some(s) => names.initial(s, "generator sampler"),
        None => initial.clone(),
    };
    let mut functions = Vec::new();
    if let Some(g) = &cfg.generator {
        if g.copies.contains(&0) || g.samples == 0 {
            names.out.push(Violation {
                rule: RANGE,
                message: "generator copies and samples must be positive".into(),
            });
        }
        for f in &g.functions {
            let ctx = format!("function `{}`", f.name);
            let terms: Option<Vec<(NodeId, Observable)>> = f
                .terms
                .iter()
                .map(|t| {
                    Some((
                        names.node(&t.node, &ctx)?,
                        names.observable(&t.observable, &ctx)?,
                    ))
                })
                .collect();
            if let Some(terms) = terms {
                match TestFunction::new(f.name.clone(), terms, f.outer.clone()) {
                    Ok(tf) => functions.push(tf),
                    Err(e) => names.out.push(Violation {
                        rule: RANGE,
                        message: format!("{ctx}: {e}"),
                    }),
                }
            }
        }
    }

    let mut out = names.out;
    if !(cfg.horizon >= 0.0 && cfg.horizon.is_finite()) {
        out.push(Violation {
            rule: RANGE,
            message: format!("horizon {} must be finite and >= 0", cfg.horizon),
        });
    }
    if let Some(t) = cfg
        .snapshot_times
        .iter()
        .find(|t| !(**t >= 0.0 && **t <= cfg.horizon))
    {
        out.push(Violation {
            rule: RANGE,
            message: format!("snapshot time {t} outside [0, horizon]"),
        });
    }
    if cfg.copies.contains(&0) {
        out.push(Violation {
            rule: RANGE,
            message: "copy counts must be at least 1".into(),
        });
    }
    if cfg.seeds == 0 {
        out.push(Violation {
            rule: RANGE,
            message: "seeds must be at least 1".into(),
        });
    }
    if cfg.observation.depth > cfg.observation.cap {
        out.push(Violation {
            rule: RANGE,
            message: "observation depth exceeds the length cap".into(),
        });
    }
    if !(cfg.ode.dt > 0.0) || !(cfg.picard.step > 0.0) || !(cfg.picard.window > 0.0) {
        out.push(Violation {
            rule: RANGE,
            message: "time steps and windows must be positive".into(),
        });
    }
    if !out.is_empty() {
        return Err(ConfigError::Invalid(out));
    }

    let model = Model::new(
        graph,
        cfg.classes.clone(),
        arrivals,
        laws,
        disciplines,
        transitions,
    )
    .map_err(|e| {
        ConfigError::Invalid(vec![Violation {
            rule: RANGE,
            message: e.to_string(),
        }])
    })?;
    let (mut initial, mut sampler) = (initial.unwrap_or_default(), sampler.unwrap_or_default());
    fill_letters(&mut initial, &model);
    fill_letters(&mut sampler, &model);
    let initial = InitialLaw { per_node: initial };
    let sampler = InitialLaw { per_node: sampler };
    for (what, law) in [("initial law", &initial), ("generator sampler", &sampler)] {
        law.validate(n).map_err(|e| {
            ConfigError::Invalid(vec![Violation {
                rule: RANGE,
                message: format!("{what}: {e}"),
            }])
        })?;
    }
    Ok(Experiment {
        config: cfg,
        model,
        initial,
        functions,
        sampler,
    })
}
