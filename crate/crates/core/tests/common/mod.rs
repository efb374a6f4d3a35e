#![allow(clippy::needless_range_loop)]
#![allow(dead_code)]

pub mod frozen;

use swapnet::model::ArrivalTable;
use swapnet::queue::ClassTransitionTable;
use swapnet::{ClassId, Discipline, Graph, GraphSpec, Model, NodeId, ServiceLaw};

/// Path v0 - v1 - v2, one class, arrivals at v0 bound for v2.
pub fn path3(law: ServiceLaw) -> Model {
    let g = Graph::build(&GraphSpec::path(3, 0.5)).unwrap();
    let mut arr = ArrivalTable::new(3);
    arr.add(ClassId(0), NodeId(0), NodeId(2), 1.0);
    Model::uniform(g, arr, law, Discipline::Fifo).unwrap()
}

pub fn path3_exp() -> Model {
    path3(ServiceLaw::exponential(2.0))
}

/// Two-class model on a 4-cycle with class changes, mixed disciplines and
/// arrivals at every node.
pub fn cycle4_two_class() -> Model {
    let g = Graph::build(&GraphSpec::cycle(4, 0.3)).unwrap();
    let mut arr = ArrivalTable::new(4);
    arr.add(ClassId(0), NodeId(0), NodeId(2), 0.4);
    arr.add(ClassId(1), NodeId(1), NodeId(3), 0.3);
    arr.add(ClassId(0), NodeId(2), NodeId(0), 0.2);
    arr.add(ClassId(1), NodeId(3), NodeId(1), 0.25);
    let mut tt = ClassTransitionTable::identity(2, &g);
    tt.set(&g, ClassId(0), NodeId(1), NodeId(2), ClassId(1))
        .unwrap();
    tt.set(&g, ClassId(1), NodeId(0), NodeId(3), ClassId(0))
        .unwrap();
    let mut laws = Vec::new();
    for k in 0..2 {
        for v in 0..4 {
            laws.push(ServiceLaw::exponential(
                1.5 + 0.5 * k as f64 + 0.25 * v as f64,
            ));
        }
    }
    let disciplines = vec![
        Discipline::Fifo,
        Discipline::LifoPreemptResume,
        Discipline::StaticPriority {
            ranks: vec![1, 0],
            preemptive: true,
        },
        Discipline::Fifo,
    ];
    Model::new(g, vec!["a".into(), "b".into()], arr, laws, disciplines, tt).unwrap()
}

/// Random connected graph: a random spanning tree plus `extra` chords.
pub fn random_connected(n: usize, extra: usize, seed: u64) -> swapnet::GraphSpec {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let nodes: Vec<String> = (0..n).map(|i| format!("n{i}")).collect();
    let mut pairs = std::collections::BTreeSet::new();
    for i in 1..n {
        let j = rng.random_range(0..i);
        pairs.insert((j, i));
    }
    while pairs.len() < n - 1 + extra {
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        if a != b {
            pairs.insert((a.min(b), a.max(b)));
        }
    }
    let edges = pairs
        .into_iter()
        .map(|(a, b)| swapnet::topology::EdgeSpec {
            a: nodes[a].clone(),
            b: nodes[b].clone(),
            beta: 0.1,
        })
        .collect();
    swapnet::GraphSpec { nodes, edges }
}
