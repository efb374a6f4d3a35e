mod common;

use swapnet::model::{ArrivalTable, InitialLaw, QueueLaw};
use swapnet::network::{Descriptor, Event, NetworkState, SimOptions};
use swapnet::{ClassId, Discipline, Graph, GraphSpec, Letter, Model, NodeId, ServiceLaw};

fn mm1() -> Model {
    let g = Graph::build(&GraphSpec::path(2, 0.0)).unwrap();
    let mut arr = ArrivalTable::new(2);
    arr.add(ClassId(0), NodeId(0), NodeId(1), 1.0);
    Model::uniform(g, arr, ServiceLaw::exponential(2.0), Discipline::Fifo).unwrap()
}

#[test]
fn mm1_time_average_is_geometric() {
    let m = mm1();
    let mut s =
        NetworkState::init(&m, 1, &InitialLaw::empty(2), 2024, SimOptions::default()).unwrap();
    s.run(2000.0, &[]).unwrap();
    let p = s.time_average_lengths(NodeId(0));
    for (k, pk) in p.iter().enumerate().take(6) {
        let want = 0.5f64.powi(k as i32 + 1);
        assert!((pk - want).abs() < 0.02, "P(l={k}) = {pk}, want {want}");
    }
}

#[test]
fn interarrival_times_are_exponential() {
    let m = mm1();
    let mut s = NetworkState::init(&m, 1, &InitialLaw::empty(2), 7, SimOptions::default()).unwrap();
    let mut gaps = Vec::new();
    let mut acc = 0.0;
    while gaps.len() < 3000 {
        let (dt, ev) = s.next_event().unwrap();
        acc += dt;
        if matches!(ev, Event::Arrival { .. }) {
            gaps.push(acc);
            acc = 0.0;
        }
        s.apply_event(dt, ev).unwrap();
    }
    gaps.sort_by(f64::total_cmp);
    let n = gaps.len() as f64;
    let ks = gaps
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let f = 1.0 - (-x).exp();
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max);
    assert!(ks < 1.36 / n.sqrt(), "KS statistic {ks}");
}

#[test]
fn customer_count_is_conserved_at_every_event() {
    let m = common::cycle4_two_class();
    let letters = m.reachable_letters([]);
    let init = InitialLaw {
        per_node: vec![
            QueueLaw::Geometric {
                p: 0.5,
                max_len: 5,
                letters,
                age_mean: 0.2
            };
            4
        ],
    };
    let mut s = NetworkState::init(&m, 12, &init, 3, SimOptions::default()).unwrap();
    let start = s.customers_in_system() as i64;
    for _ in 0..20_000 {
        let Some((dt, ev)) = s.next_event() else {
            break;
        };
        let before = s.customers_in_system() as i64;
        let c0 = s.counters();
        s.apply_event(dt, ev).unwrap();
        let c1 = s.counters();
        let delta = s.customers_in_system() as i64 - before;
        let want = (c1.arrivals - c0.arrivals) as i64 - (c1.exits - c0.exits) as i64;
        assert_eq!(delta, want);
        assert_eq!(
            s.customers_in_system() as i64,
            start + c1.arrivals as i64 - c1.exits as i64
        );
    }
}

#[test]
fn identical_seeds_give_identical_traces() {
    let m = common::cycle4_two_class();
    let trace = |seed| {
        let mut s =
            NetworkState::init(&m, 5, &InitialLaw::empty(4), seed, SimOptions::default()).unwrap();
        (0..2000)
            .map(|_| {
                let (dt, e) = s.next_event().unwrap();
                s.apply_event(dt, e).unwrap();
                (dt.to_bits(), e)
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(trace(11), trace(11));
    assert_ne!(trace(11), trace(12));
}

fn swap_only() -> Model {
    let g = Graph::build(&GraphSpec::path(3, 0.5)).unwrap();
    Model::uniform(
        g,
        ArrivalTable::new(3),
        ServiceLaw::exponential(1.0),
        Discipline::Fifo,
    )
    .unwrap()
}

#[test]
fn per_server_swap_rate_does_not_depend_on_copies() {
    let m = swap_only();
    let horizon = 200.0;
    // expected swaps per server per unit time, averaged over nodes
    let want: f64 = m
        .graph
        .nodes()
        .map(|v| m.graph.swap_rate_at(v))
        .sum::<f64>()
        / 3.0;
    for n in [10, 100] {
        let mut s = NetworkState::init(
            &m,
            n,
            &InitialLaw::empty(3),
            5 + n as u64,
            SimOptions::default(),
        )
        .unwrap();
        s.run(horizon, &[]).unwrap();
        let swaps = s.counters().swaps as f64;
        let exposure = (3 * n) as f64 * horizon;
        let rate = 2.0 * swaps / exposure;
        let se = 2.0 * swaps.sqrt() / exposure;
        assert!(
            (rate - want).abs() <= 3.0 * se,
            "N {n}: {rate} vs {want} (se {se})"
        );
    }
}

#[test]
fn symmetric_nodes_have_matching_marginals() {
    let g = Graph::build(&GraphSpec::cycle(4, 0.4)).unwrap();
    let mut arr = ArrivalTable::new(4);
    for v in 0..4 {
        arr.add(ClassId(0), NodeId(v), NodeId((v + 2) % 4), 0.6);
    }
    let m = Model::uniform(g, arr, ServiceLaw::erlang(2, 4.0), Discipline::Fifo).unwrap();
    let seeds = 20;
    let copies = 50;
    // per seed, fraction of empty queues at each node at t = 3
    let mut empty = vec![Vec::new(); 4];
    for seed in 0..seeds {
        let mut s = NetworkState::init(
            &m,
            copies,
            &InitialLaw::empty(4),
            900 + seed,
            SimOptions::default(),
        )
        .unwrap();
        let traj = s.run(3.0, &[3.0]).unwrap();
        let snap = traj.snapshots.last().unwrap();
        for (v, node) in snap.nodes.iter().enumerate() {
            let p0 = node
                .descriptors
                .probs
                .get(&Descriptor::Queue {
                    len: 0,
                    prefix: vec![],
                })
                .copied()
                .unwrap_or(0.0);
            empty[v].push(p0);
        }
    }
    let stat = |x: &[f64]| {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        (
            m,
            (x.iter().map(|y| (y - m).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt(),
        )
    };
    let (m0, s0) = stat(&empty[0]);
    for e in &empty[1..] {
        let (mv, sv) = stat(e);
        assert!(
            (mv - m0).abs() <= 3.0 * (s0 * s0 + sv * sv).sqrt(),
            "{mv} vs {m0}"
        );
    }
}

#[test]
fn transit_lands_on_a_copy_of_the_next_node() {
    let g = Graph::build(&GraphSpec::path(3, 0.0)).unwrap();
    let m = Model::uniform(
        g,
        ArrivalTable::new(3),
        ServiceLaw::exponential(1.0),
        Discipline::Fifo,
    )
    .unwrap();
    let c = Letter {
        class: ClassId(0),
        dest: NodeId(2),
    };
    let one = QueueLaw::Mixture(vec![(swapnet::QueueState::from_letters(&[c]), 1.0)]);
    let init = InitialLaw {
        per_node: vec![one, QueueLaw::Empty, QueueLaw::Empty],
    };
    let copies = 4;
    let mut hits = [0usize; 4];
    for seed in 0..400 {
        let mut s = NetworkState::init(&m, copies, &init, seed, SimOptions::default()).unwrap();
        // copy 0 of v0 is the first to complete only sometimes; run until the first transit
        loop {
            let (dt, ev) = s.next_event().unwrap();
            s.apply_event(dt, ev).unwrap();
            if s.counters().transits > 0 {
                break;
            }
        }
        let landed: Vec<usize> = (0..copies)
            .filter(|&k| s.queue(NodeId(1), k).len() == 1)
            .collect();
        assert_eq!(landed.len(), 1);
        let q = s.queue(NodeId(1), landed[0]);
        assert_eq!(q.customers[0].age, 0.0);
        hits[landed[0]] += 1;
    }
    // uniform copy choice: each copy receives about 100 of 400
    for h in hits {
        assert!((60..140).contains(&h), "{hits:?}");
    }
}
