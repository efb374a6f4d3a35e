//! Finite and limit generators applied to polynomial functions of node means.
//!
//! A test function is `F(Δ) = Φ(x)` where `x_j = ⟨φ_j, Δ_{v_j}⟩` is the mean of
//! observable `φ_j` under the measure at node `v_j` and `Φ` is a polynomial of
//! degree at most three.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{map_indexed, stream_rng, Execution};
use crate::model::{InitialLaw, Model};
use crate::ode::{StateIndex, TruncatedMeasure};
use crate::queue::{ClassId, Customer, Discipline, Letter, QueueState};
use crate::topology::NodeId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeneratorError {
    #[error("node {node}: atom weights {detail}")]
    WeightMismatch { node: usize, detail: String },
    #[error("invalid test function: {0}")]
    BadTestFunction(String),
    #[error("expected measures for {expected} nodes, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("literal evaluation is limited to N <= {max}, got {n}")]
    TooLarge { n: usize, max: usize },
}

/// Observable of a single queue.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Observable {
    EmptyIndicator,
    LengthIs {
        len: usize,
    },
    /// `min(len, cap)`.
    LengthCapped {
        cap: usize,
    },
    HeadClass {
        class: ClassId,
    },
    HeadLetter {
        letter: Letter,
    },
    /// `1 − exp(−τ/scale)` for the attained service `τ` of the customer in
    /// service, zero for an empty queue.
    AgeRamp {
        scale: f64,
    },
}

impl Observable {
    pub fn eval(&self, q: &QueueState, disc: &Discipline) -> f64 {
        let ind = |b: bool| if b { 1.0 } else { 0.0 };
        match *self {
            Observable::EmptyIndicator => ind(q.is_empty()),
            Observable::LengthIs { len } => ind(q.len() == len),
            Observable::LengthCapped { cap } => q.len().min(cap) as f64,
            Observable::HeadClass { class } => {
                ind(q.customers.first().is_some_and(|c| c.class == class))
            }
            Observable::HeadLetter { letter } => {
                ind(q.customers.first().is_some_and(|c| c.letter() == letter))
            }
            Observable::AgeRamp { scale } => match q.select_in_service(disc) {
                Ok(i) => 1.0 - (-q.customers[i].age / scale).exp(),
                Err(_) => 0.0,
            },
        }
    }

    /// Rate of change while the queue is served without jumps.
    pub fn transport(&self, q: &QueueState, disc: &Discipline) -> f64 {
        match *self {
            Observable::AgeRamp { scale } => match q.select_in_service(disc) {
                Ok(i) => (-q.customers[i].age / scale).exp() / scale,
                Err(_) => 0.0,
            },
            _ => 0.0,
        }
    }

    pub fn depends_on_age(&self) -> bool {
        matches!(self, Observable::AgeRamp { .. })
    }
}

/// Polynomial `Σ c · Π x_i` with monomials of degree at most three.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polynomial {
    pub terms: Vec<(f64, Vec<usize>)>,
}

impl Polynomial {
    pub fn linear(coeffs: &[f64]) -> Self {
        Polynomial {
            terms: coeffs
                .iter()
                .enumerate()
                .map(|(i, &c)| (c, vec![i]))
                .collect(),
        }
    }

    pub fn degree(&self) -> usize {
        self.terms.iter().map(|(_, v)| v.len()).max().unwrap_or(0)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|(c, idx)| c * idx.iter().map(|&i| x[i]).product::<f64>())
            .sum()
    }

    /// Gradient, Hessian (row-major) and third-derivative tensor at `x`.
    fn derivatives(&self, x: &[f64], m: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut g = vec![0.0; m];
        let mut h = vec![0.0; m * m];
        let mut t = vec![0.0; m * m * m];
        for (c, idx) in &self.terms {
            let d = idx.len();
            // differentiate by choosing ordered distinct positions
            for a in 0..d {
                let rest: f64 = (0..d).filter(|&p| p != a).map(|p| x[idx[p]]).product();
                g[idx[a]] += c * rest;
                for b in 0..d {
                    if b == a {
                        continue;
                    }
                    let rest: f64 = (0..d)
                        .filter(|&p| p != a && p != b)
                        .map(|p| x[idx[p]])
                        .product();
                    h[idx[a] * m + idx[b]] += c * rest;
                    for e in 0..d {
                        if e == a || e == b {
                            continue;
                        }
                        t[(idx[a] * m + idx[b]) * m + idx[e]] += c;
                    }
                }
            }
        }
        (g, h, t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestFunction {
    pub name: String,
    pub terms: Vec<(NodeId, Observable)>,
    pub outer: Polynomial,
}

impl TestFunction {
    pub fn new(
        name: impl Into<String>,
        terms: Vec<(NodeId, Observable)>,
        outer: Polynomial,
    ) -> Result<Self, GeneratorError> {
        let f = TestFunction {
            name: name.into(),
            terms,
            outer,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<(), GeneratorError> {
        if self.outer.degree() > 3 {
            return Err(GeneratorError::BadTestFunction(format!(
                "degree {} > 3",
                self.outer.degree()
            )));
        }
        let m = self.terms.len();
        if let Some((_, idx)) = self
            .outer
            .terms
            .iter()
            .find(|(_, idx)| idx.iter().any(|&i| i >= m))
        {
            return Err(GeneratorError::BadTestFunction(format!(
                "monomial {idx:?} uses a variable beyond {m}"
            )));
        }
        for (_, o) in &self.terms {
            if let Observable::AgeRamp { scale } = o {
                if !(*scale > 0.0) {
                    return Err(GeneratorError::BadTestFunction(format!(
                        "ramp scale {scale}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn is_linear(&self) -> bool {
        self.outer.degree() <= 1
    }
}

/// Finite signed combination of queue states.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SignedMeasure {
    pub atoms: Vec<(QueueState, f64)>,
}

impl SignedMeasure {
    /// Atoms of weight `1/N`.
    pub fn uniform(queues: Vec<QueueState>) -> Self {
        let w = 1.0 / queues.len().max(1) as f64;
        SignedMeasure {
            atoms: queues.into_iter().map(|q| (q, w)).collect(),
        }
    }

    pub fn total(&self) -> f64 {
        self.atoms.iter().map(|(_, w)| w).sum()
    }

    pub fn pair(&self, obs: &Observable, disc: &Discipline) -> f64 {
        self.atoms.iter().map(|(q, w)| w * obs.eval(q, disc)).sum()
    }
}

fn check_shape(model: &Model, delta: &[SignedMeasure]) -> Result<(), GeneratorError> {
    if delta.len() != model.node_count() {
        return Err(GeneratorError::Shape {
            expected: model.node_count(),
            got: delta.len(),
        });
    }
    Ok(())
}

fn check_probability(model: &Model, delta: &[SignedMeasure]) -> Result<(), GeneratorError> {
    check_shape(model, delta)?;
    for (v, d) in delta.iter().enumerate() {
        if d.atoms.iter().any(|(_, w)| *w < 0.0) || (d.total() - 1.0).abs() > 1e-9 {
            return Err(GeneratorError::WeightMismatch {
                node: v,
                detail: format!("sum to {}", d.total()),
            });
        }
    }
    Ok(())
}

/// Atom count per node when every node holds `N` atoms of weight `1/N`.
fn check_atomic(model: &Model, delta: &[SignedMeasure]) -> Result<usize, GeneratorError> {
    check_shape(model, delta)?;
    let n = delta.first().map_or(0, |d| d.atoms.len());
    for (v, d) in delta.iter().enumerate() {
        let w = 1.0 / d.atoms.len() as f64;
        if d.atoms.len() != n || n == 0 || d.atoms.iter().any(|(_, x)| (x - w).abs() > 1e-12 * w) {
            return Err(GeneratorError::WeightMismatch {
                node: v,
                detail: format!("expected {n} atoms of weight 1/{n}, got {}", d.atoms.len()),
            });
        }
    }
    Ok(n)
}

fn means(model: &Model, f: &TestFunction, delta: &[SignedMeasure]) -> Vec<f64> {
    f.terms
        .iter()
        .map(|(v, o)| delta[v.0].pair(o, model.discipline(*v)))
        .collect()
}

pub fn eval(
    model: &Model,
    f: &TestFunction,
    delta: &[SignedMeasure],
) -> Result<f64, GeneratorError> {
    check_shape(model, delta)?;
    Ok(f.outer.eval(&means(model, f, delta)))
}

/// `Σ_j ∂Φ/∂x_j · ⟨φ_j, h_{v_j}⟩`.
pub fn frechet(
    model: &Model,
    f: &TestFunction,
    delta: &[SignedMeasure],
    h: &[SignedMeasure],
) -> Result<f64, GeneratorError> {
    check_shape(model, delta)?;
    check_shape(model, h)?;
    let x = means(model, f, delta);
    let (g, _, _) = f.outer.derivatives(&x, x.len());
    Ok(f.terms
        .iter()
        .zip(&g)
        .map(|((v, o), gj)| gj * h[v.0].pair(o, model.discipline(*v)))
        .sum())
}

/// First three moments of a weighted set of increment vectors.
struct Moments {
    m1: Vec<f64>,
    m2: Vec<f64>,
    m3: Vec<f64>,
}

impl Moments {
    fn point(a: &[f64]) -> Self {
        Moments::of(std::iter::once((a.to_vec(), 1.0)), a.len())
    }

    fn of(items: impl IntoIterator<Item = (Vec<f64>, f64)>, m: usize) -> Self {
        let mut out = Moments {
            m1: vec![0.0; m],
            m2: vec![0.0; m * m],
            m3: vec![0.0; m * m * m],
        };
        for (d, w) in items {
            for i in 0..m {
                if d[i] == 0.0 {
                    continue;
                }
                out.m1[i] += w * d[i];
                for j in 0..m {
                    let dij = d[i] * d[j];
                    out.m2[i * m + j] += w * dij;
                    for k in 0..m {
                        out.m3[(i * m + j) * m + k] += w * dij * d[k];
                    }
                }
            }
        }
        out
    }
}

/// `E Φ(x + a + b) − Φ(x)` for independent increments `a ~ A`, `b ~ B`,
/// exact for cubic `Φ`.
struct Taylor {
    m: usize,
    g: Vec<f64>,
    h: Vec<f64>,
    t: Vec<f64>,
}

impl Taylor {
    fn new(f: &TestFunction, x: &[f64]) -> Self {
        let m = x.len();
        let (g, h, t) = f.outer.derivatives(x, m);
        Taylor { m, g, h, t }
    }

    fn expected_increment(&self, a: &Moments, b: &Moments) -> f64 {
        let m = self.m;
        let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| x * y).sum::<f64>();
        let first = dot(&self.g, &a.m1) + dot(&self.g, &b.m1);
        let mut cross2 = 0.0;
        for i in 0..m {
            for j in 0..m {
                cross2 += self.h[i * m + j] * a.m1[i] * b.m1[j];
            }
        }
        let second = 0.5 * (dot(&self.h, &a.m2) + 2.0 * cross2 + dot(&self.h, &b.m2));
        let mut t21 = 0.0;
        let mut t12 = 0.0;
        for i in 0..m {
            for j in 0..m {
                for k in 0..m {
                    let tijk = self.t[(i * m + j) * m + k];
                    if tijk != 0.0 {
                        t21 += tijk * a.m2[i * m + j] * b.m1[k];
                        t12 += tijk * a.m1[i] * b.m2[j * m + k];
                    }
                }
            }
        }
        let third = (dot(&self.t, &a.m3) + 3.0 * t21 + 3.0 * t12 + dot(&self.t, &b.m3)) / 6.0;
        first + second + third
    }
}

/// Observable values of `q` for every term located at node `v`, zero elsewhere.
fn profile(model: &Model, f: &TestFunction, v: NodeId, q: &QueueState) -> Vec<f64> {
    let disc = model.discipline(v);
    f.terms
        .iter()
        .map(|(w, o)| if *w == v { o.eval(q, disc) } else { 0.0 })
        .collect()
}

fn diff(a: &[f64], b: &[f64], scale: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| (x - y) * scale).collect()
}

/// Transport part of both generators: the change of `F` as attained service
/// grows.
pub fn transport(
    model: &Model,
    f: &TestFunction,
    delta: &[SignedMeasure],
) -> Result<f64, GeneratorError> {
    check_shape(model, delta)?;
    let x = means(model, f, delta);
    let (g, _, _) = f.outer.derivatives(&x, x.len());
    Ok(transport_block(model, f, delta, &g))
}

/// Signed measures with the words of a truncated vector as atoms (ages zero);
/// the leak entries are dropped.
pub fn from_truncated(m: &TruncatedMeasure, index: &StateIndex) -> Vec<SignedMeasure> {
    (0..m.node_count())
        .map(|v| SignedMeasure {
            atoms: m
                .probs(NodeId(v))
                .iter()
                .enumerate()
                .filter(|(_, w)| **w != 0.0)
                .map(|(i, w)| (QueueState::from_letters(&index.word(i)), *w))
                .collect(),
        })
        .collect()
}

fn transport_block(model: &Model, f: &TestFunction, delta: &[SignedMeasure], g: &[f64]) -> f64 {
    f.terms
        .iter()
        .zip(g)
        .filter(|((_, o), _)| o.depends_on_age())
        .map(|((v, o), gj)| {
            let disc = model.discipline(*v);
            gj * delta[v.0]
                .atoms
                .iter()
                .map(|(q, w)| w * o.transport(q, disc))
                .sum::<f64>()
        })
        .sum()
}

fn arriving(class: ClassId, dest: NodeId) -> Customer {
    Customer::new(class, dest)
}

/// `Ω_N F` at an atomic configuration with `N` atoms of weight `1/N` per node.
pub fn omega_n(
    model: &Model,
    f: &TestFunction,
    delta: &[SignedMeasure],
) -> Result<f64, GeneratorError> {
    f.validate()?;
    let n = check_atomic(model, delta)?;
    let inv = 1.0 / n as f64;
    let x = means(model, f, delta);
    let taylor = Taylor::new(f, &x);
    let zero = Moments::point(&vec![0.0; x.len()]);
    let mut total = transport_block(model, f, delta, &taylor.g);
    let graph = &model.graph;
    for v in graph.nodes() {
        let disc = model.discipline(v);
        for (q, _) in &delta[v.0].atoms {
            let base = profile(model, f, v, q);
            for s in model.arrivals.at(v) {
                let grown = q
                    .with_arrival(arriving(s.class, s.dest))
                    .expect("fresh customer");
                let a = diff(&profile(model, f, v, &grown), &base, inv);
                total += s.rate * taylor.expected_increment(&Moments::point(&a), &zero);
            }
            let Ok(i) = q.select_in_service(disc) else {
                continue;
            };
            let served = &q.customers[i];
            let rate = model.law(served.class, v).hazard(served.age);
            if rate == 0.0 {
                continue;
            }
            let a = diff(
                &profile(model, f, v, &q.without_in_service(disc)),
                &base,
                inv,
            );
            let a = Moments::point(&a);
            if graph.dist(v, served.dest) <= 1 {
                total += rate * taylor.expected_increment(&a, &zero);
                continue;
            }
            for (u, p) in graph.routing_kernel(v, served.dest).expect("two hops away") {
                let class = model
                    .transitions
                    .get(served.class, v, u)
                    .expect("complete transition table");
                let c = arriving(class, served.dest);
                let b = Moments::of(
                    delta[u.0].atoms.iter().map(|(q2, _)| {
                        let grown = q2.with_arrival(c.clone()).expect("fresh customer");
                        (
                            diff(
                                &profile(model, f, u, &grown),
                                &profile(model, f, u, q2),
                                inv,
                            ),
                            inv,
                        )
                    }),
                    x.len(),
                );
                total += rate * p * taylor.expected_increment(&a, &b);
            }
        }
    }
    for e in graph.edges() {
        if e.beta == 0.0 {
            continue;
        }
        // swapping queues q (at a) and q' (at b) moves the means by w(q') − w(q)
        let w = |q: &QueueState| -> Vec<f64> {
            let pa = profile(model, f, e.a, q);
            let pb = profile(model, f, e.b, q);
            pa.iter().zip(&pb).map(|(x, y)| (x - y) * inv).collect()
        };
        let a = Moments::of(
            delta[e.a.0]
                .atoms
                .iter()
                .map(|(q, _)| (w(q).iter().map(|x| -x).collect(), inv)),
            x.len(),
        );
        let b = Moments::of(delta[e.b.0].atoms.iter().map(|(q, _)| (w(q), inv)), x.len());
        total += e.beta * n as f64 * taylor.expected_increment(&a, &b);
    }
    Ok(total)
}

pub const LITERAL_MAX_N: usize = 20;

/// `Ω_N F` by summing `F` over every single transition of the configuration.
pub fn omega_n_literal(
    model: &Model,
    f: &TestFunction,
    delta: &[SignedMeasure],
) -> Result<f64, GeneratorError> {
    f.validate()?;
    let n = check_atomic(model, delta)?;
    if n > LITERAL_MAX_N {
        return Err(GeneratorError::TooLarge {
            n,
            max: LITERAL_MAX_N,
        });
    }
    let f0 = eval(model, f, delta)?;
    let x = means(model, f, delta);
    let (g, _, _) = f.outer.derivatives(&x, x.len());
    let mut total = transport_block(model, f, delta, &g);
    let graph = &model.graph;
    let nf = n as f64;
    let with = |changes: &[(NodeId, usize, QueueState)]| -> f64 {
        let mut d = delta.to_vec();
        for (v, k, q) in changes {
            d[v.0].atoms[*k].0 = q.clone();
        }
        eval(model, f, &d).expect("same shape") - f0
    };
    for v in graph.nodes() {
        let disc = model.discipline(v);
        for k in 0..n {
            let q = &delta[v.0].atoms[k].0;
            for s in model.arrivals.at(v) {
                let grown = q.with_arrival(arriving(s.class, s.dest)).unwrap();
                total += s.rate * with(&[(v, k, grown)]);
            }
            let Ok(i) = q.select_in_service(disc) else {
                continue;
            };
            let served = q.customers[i].clone();
            let rate = model.law(served.class, v).hazard(served.age);
            let rest = q.without_in_service(disc);
            if graph.dist(v, served.dest) <= 1 {
                total += rate * with(&[(v, k, rest)]);
                continue;
            }
            for (u, p) in graph.routing_kernel(v, served.dest).unwrap() {
                let class = model.transitions.get(served.class, v, u).unwrap();
                for k2 in 0..n {
                    let grown = delta[u.0].atoms[k2]
                        .0
                        .with_arrival(arriving(class, served.dest))
                        .unwrap();
                    total += rate * p / nf * with(&[(v, k, rest.clone()), (u, k2, grown)]);
                }
            }
        }
    }
    for e in graph.edges() {
        for k in 0..n {
            for k2 in 0..n {
                let (qa, qb) = (&delta[e.a.0].atoms[k].0, &delta[e.b.0].atoms[k2].0);
                total += e.beta / nf * with(&[(e.a, k, qb.clone()), (e.b, k2, qa.clone())]);
            }
        }
    }
    Ok(total)
}

/// Drift of the limit dynamics at `delta`, paired with every observable.
fn limit_pairings(model: &Model, f: &TestFunction, delta: &[SignedMeasure]) -> Vec<f64> {
    let graph = &model.graph;
    // transit intensities into each node, by arriving letter
    let mut transit: Vec<Vec<(Letter, f64)>> = vec![Vec::new(); model.node_count()];
    for v in graph.nodes() {
        let disc = model.discipline(v);
        for (q, w) in &delta[v.0].atoms {
            let Ok(i) = q.select_in_service(disc) else {
                continue;
            };
            let c = &q.customers[i];
            if graph.dist(v, c.dest) <= 1 {
                continue;
            }
            let rate = model.law(c.class, v).hazard(c.age);
            for (u, p) in graph.routing_kernel(v, c.dest).unwrap() {
                let letter = Letter {
                    class: model.transitions.get(c.class, v, u).unwrap(),
                    dest: c.dest,
                };
                match transit[u.0].iter_mut().find(|(l, _)| *l == letter) {
                    Some(entry) => entry.1 += w * rate * p,
                    None => transit[u.0].push((letter, w * rate * p)),
                }
            }
        }
    }
    f.terms
        .iter()
        .map(|&(v, o)| {
            let disc = model.discipline(v);
            let mut g = 0.0;
            for (q, w) in &delta[v.0].atoms {
                let here = o.eval(q, disc);
                for s in model.arrivals.at(v) {
                    g += w
                        * s.rate
                        * (o.eval(&q.with_arrival(arriving(s.class, s.dest)).unwrap(), disc)
                            - here);
                }
                for (l, r) in &transit[v.0] {
                    g += w
                        * r
                        * (o.eval(&q.with_arrival(arriving(l.class, l.dest)).unwrap(), disc)
                            - here);
                }
                if let Ok(i) = q.select_in_service(disc) {
                    let c = &q.customers[i];
                    let rate = model.law(c.class, v).hazard(c.age);
                    g += w * rate * (o.eval(&q.without_in_service(disc), disc) - here);
                }
            }
            for &(u, e) in graph.neighbors(v) {
                let beta = graph.edges()[e].beta;
                g += beta * (delta[u.0].pair(&o, disc) - delta[v.0].pair(&o, disc));
            }
            g
        })
        .collect()
}

/// `Ω F` at a probability configuration with finitely many atoms per node.
pub fn omega_limit(
    model: &Model,
    f: &TestFunction,
    delta: &[SignedMeasure],
) -> Result<f64, GeneratorError> {
    f.validate()?;
    check_probability(model, delta)?;
    let x = means(model, f, delta);
    let (g, _, _) = f.outer.derivatives(&x, x.len());
    let pairings = limit_pairings(model, f, delta);
    Ok(transport_block(model, f, delta, &g)
        + g.iter().zip(&pairings).map(|(a, b)| a * b).sum::<f64>())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapStats {
    pub n: usize,
    pub function: String,
    pub mean_gap: f64,
    pub max_gap: f64,
    pub samples: usize,
}

/// Samples `N` i.i.d. queues per node from `sampler`.
pub fn sample_atomic(
    model: &Model,
    sampler: &InitialLaw,
    n: usize,
    seed: u64,
    stream: u64,
) -> Vec<SignedMeasure> {
    let mut rng = stream_rng(seed, stream);
    model
        .graph
        .nodes()
        .map(|v| SignedMeasure::uniform((0..n).map(|_| sampler.at(v).sample(&mut rng)).collect()))
        .collect()
}

/// `|Ω_N F − Ω F|` over `samples` i.i.d. atomic configurations for each `N`.
pub fn generator_gap(
    model: &Model,
    f: &TestFunction,
    n_list: &[usize],
    sampler: &InitialLaw,
    samples: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<GapStats>, GeneratorError> {
    f.validate()?;
    n_list
        .iter()
        .enumerate()
        .map(|(ni, &n)| {
            let gaps = map_indexed(exec, samples, |s| -> Result<f64, GeneratorError> {
                let delta = sample_atomic(model, sampler, n, seed, (ni * samples + s) as u64);
                Ok((omega_n(model, f, &delta)? - omega_limit(model, f, &delta)?).abs())
            })
            .into_iter()
            .collect::<Result<Vec<f64>, _>>()?;
            Ok(GapStats {
                n,
                function: f.name.clone(),
                mean_gap: gaps.iter().sum::<f64>() / samples.max(1) as f64,
                max_gap: gaps.iter().copied().fold(0.0, f64::max),
                samples,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArrivalTable;
    use crate::queue::ServiceLaw;
    use crate::topology::{Graph, GraphSpec};

    fn path3() -> Model {
        let g = Graph::build(&GraphSpec::path(3, 0.5)).unwrap();
        let mut arr = ArrivalTable::new(3);
        arr.add(ClassId(0), NodeId(0), NodeId(2), 1.0);
        Model::uniform(g, arr, ServiceLaw::exponential(2.0), Discipline::Fifo).unwrap()
    }

    fn empty_at_v0(outer: Polynomial) -> TestFunction {
        TestFunction::new(
            "empty_v0",
            vec![(NodeId(0), Observable::EmptyIndicator)],
            outer,
        )
        .unwrap()
    }

    fn all_empty(n: usize) -> Vec<SignedMeasure> {
        (0..3)
            .map(|_| SignedMeasure::uniform(vec![QueueState::empty(); n]))
            .collect()
    }

    #[test]
    fn eval_examples() {
        let m = path3();
        let f = empty_at_v0(Polynomial::linear(&[1.0]));
        assert_eq!(eval(&m, &f, &all_empty(4)).unwrap(), 1.0);
        let sq = empty_at_v0(Polynomial {
            terms: vec![(1.0, vec![0, 0])],
        });
        let mut d = all_empty(2);
        d[0].atoms[0].0 = QueueState::from_letters(&[Letter {
            class: ClassId(0),
            dest: NodeId(2),
        }]);
        assert_eq!(eval(&m, &sq, &d).unwrap(), 0.25);
        let c = empty_at_v0(Polynomial {
            terms: vec![(3.5, vec![])],
        });
        assert_eq!(eval(&m, &c, &d).unwrap(), 3.5);
        assert_eq!(eval(&m, &c, &all_empty(3)).unwrap(), 3.5);
    }

    #[test]
    fn arrivals_into_empty_node() {
        let m = path3();
        let f = empty_at_v0(Polynomial::linear(&[1.0]));
        for n in [1, 2, 7, 50] {
            assert!((omega_n(&m, &f, &all_empty(n)).unwrap() + 1.0).abs() < 1e-12);
        }
        assert!((omega_limit(&m, &f, &all_empty(3)).unwrap() + 1.0).abs() < 1e-12);
        assert!((omega_n_literal(&m, &f, &all_empty(3)).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn null_rates_give_zero() {
        let g = Graph::build(&GraphSpec::path(3, 0.0)).unwrap();
        let m = Model::uniform(
            g,
            ArrivalTable::new(3),
            ServiceLaw::exponential(1.0),
            Discipline::Fifo,
        )
        .unwrap();
        let f = empty_at_v0(Polynomial {
            terms: vec![(1.0, vec![0, 0, 0])],
        });
        assert_eq!(omega_n(&m, &f, &all_empty(5)).unwrap(), 0.0);
        assert_eq!(omega_limit(&m, &f, &all_empty(5)).unwrap(), 0.0);
    }

    #[test]
    fn weights_are_checked() {
        let m = path3();
        let f = empty_at_v0(Polynomial::linear(&[1.0]));
        let mut d = all_empty(3);
        d[1].atoms.pop();
        assert!(matches!(
            omega_n(&m, &f, &d),
            Err(GeneratorError::WeightMismatch { node: 1, .. })
        ));
        assert!(matches!(
            omega_limit(&m, &f, &d),
            Err(GeneratorError::WeightMismatch { node: 1, .. })
        ));
        assert!(matches!(
            omega_n_literal(&m, &f, &all_empty(21)),
            Err(GeneratorError::TooLarge { .. })
        ));
        let bad = TestFunction {
            name: "x".into(),
            terms: vec![],
            outer: Polynomial::linear(&[1.0]),
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn polynomial_derivatives() {
        // Φ = 2 x0² x1 + x1
        let p = Polynomial {
            terms: vec![(2.0, vec![0, 0, 1]), (1.0, vec![1])],
        };
        let (g, h, t) = p.derivatives(&[3.0, 5.0], 2);
        assert_eq!(g, vec![60.0, 19.0]);
        assert_eq!(h, vec![20.0, 12.0, 12.0, 0.0]);
        assert_eq!(t[1], 4.0); // ∂³/∂x0∂x0∂x1
        assert_eq!(t[2], 4.0);
        assert_eq!(t[4], 4.0);
        assert_eq!(t[0], 0.0);
    }
}
