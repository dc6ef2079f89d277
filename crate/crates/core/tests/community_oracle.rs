mod common;

use comloc::communities::{detect_communities, map_equation_length, nmi, partition_labels, EgoNetwork};
use comloc::corpus::UserId;
use comloc::synth::planted_partition;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn network(n: usize, edges: &[(usize, usize)]) -> EgoNetwork {
    EgoNetwork::from_edges(UserId(0), (1..=n as u64).map(UserId).collect(), edges.iter().copied())
}

#[test]
fn reference_length_matches_library() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..300 {
        let n = rng.gen_range(2..=9);
        let edges = common::random_connected_graph(n, rng.gen_range(0.1..0.7), &mut rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
        let ours = map_equation_length(&network(n, &edges), &labels).unwrap();
        let reference = common::map_length(n, &edges, &labels);
        assert!((ours - reference).abs() < 1e-12, "{ours} vs {reference} on {edges:?} / {labels:?}");
    }
}

#[test]
fn detection_reaches_exhaustive_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let partitions: Vec<Vec<Vec<usize>>> = (0..=8).map(common::set_partitions).collect();
    assert_eq!(partitions[8].len(), 4140);
    let trials = 200;
    let mut agree = 0;
    for _ in 0..trials {
        let n = rng.gen_range(2..=8);
        let edges = common::random_connected_graph(n, rng.gen_range(0.1..0.7), &mut rng);
        let net = network(n, &edges);
        let found = partition_labels(&net, &detect_communities(&net, 1)).unwrap();
        let best = common::exhaustive_min(n, &edges, &partitions[n]);
        if common::map_length(n, &edges, &found) <= best + 1e-9 {
            agree += 1;
        }
    }
    assert!(agree * 100 >= trials * 95, "optimum reached on {agree}/{trials} graphs");
}

#[test]
fn planted_blocks_are_recovered() {
    for seed in 0..10 {
        let (net, truth) = planted_partition(4, 16, 0.5, 0.02, seed);
        let found = partition_labels(&net, &detect_communities(&net, 1)).unwrap();
        let score = nmi(&found, &truth);
        assert!(score >= 0.95, "seed {seed}: nmi {score}");
    }
}
