//! Shared oracles and fixtures for integration tests.
//!
//! Everything here recomputes quantities from first principles (adjacency
//! matrices, exhaustive enumeration) so it stays independent of the
//! incremental implementations it checks.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tkgr_core::community::{
    build_layered_graph, delta_modularity, detect_communities, modularity, CommunityAssignment,
};
use tkgr_core::graph::{IdMaps, Quadruple, TemporalGraph};

pub fn quad(s: usize, r: usize, o: usize, t: usize) -> Quadruple {
    Quadruple {
        subject: s,
        relation: r,
        object: o,
        time: t,
    }
}

pub fn graph_from_facts(
    facts: &[(usize, usize, usize, usize)],
    num_entities: usize,
    num_relations: usize,
) -> TemporalGraph {
    let quads = facts
        .iter()
        .map(|&(s, r, o, t)| quad(s, r, o, t))
        .collect();
    let max_t = facts.iter().map(|f| f.3).max().unwrap_or(0);
    let maps = IdMaps {
        entity_names: (0..num_entities).map(|i| i.to_string()).collect(),
        relation_names: (0..num_relations).map(|i| i.to_string()).collect(),
    };
    TemporalGraph::new(
        quads,
        num_entities,
        num_relations,
        max_t + 1,
        Arc::new(maps),
        0,
        1,
    )
    .unwrap()
}

/// All set partitions of `0..n` as label vectors (restricted growth strings).
pub fn enumerate_partitions(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut labels = vec![0usize; n];
    fn rec(labels: &mut Vec<usize>, i: usize, max_used: usize, out: &mut Vec<Vec<usize>>) {
        if i == labels.len() {
            out.push(labels.clone());
            return;
        }
        for l in 0..=max_used + 1 {
            labels[i] = l;
            rec(labels, i + 1, max_used.max(l), out);
        }
    }
    if n == 0 {
        return vec![Vec::new()];
    }
    labels[0] = 0;
    rec(&mut labels, 1, 0, &mut out);
    out
}

/// Literal modularity from the full adjacency double-sum:
/// `Q = sum_r (1/2m) sum_{ij in same community} [A^r_ij - k^r_i k^r_j / (2m)]`
/// with symmetric `A` (self-loop counted twice) and `m` the global weight.
pub fn literal_modularity(
    facts: &[(usize, usize, usize, usize)],
    num_nodes: usize,
    num_relations: usize,
    labels: &[usize],
) -> f64 {
    let mut adj = vec![vec![vec![0.0f64; num_nodes]; num_nodes]; num_relations];
    for &(s, r, o, _) in facts {
        if s == o {
            adj[r][s][s] += 2.0;
        } else {
            adj[r][s][o] += 1.0;
            adj[r][o][s] += 1.0;
        }
    }
    let two_m: f64 = adj
        .iter()
        .map(|a| {
            a.iter()
                .map(|row| row.iter().sum::<f64>())
                .sum::<f64>()
        })
        .sum();
    if two_m == 0.0 {
        return 0.0;
    }
    let mut q = 0.0;
    for a in &adj {
        let degrees: Vec<f64> = a.iter().map(|row| row.iter().sum::<f64>()).collect();
        for i in 0..num_nodes {
            for j in 0..num_nodes {
                if labels[i] == labels[j] {
                    q += a[i][j] - degrees[i] * degrees[j] / two_m;
                }
            }
        }
    }
    q / two_m
}

/// Best partition by exhaustive enumeration.
pub fn brute_force_best(
    facts: &[(usize, usize, usize, usize)],
    num_nodes: usize,
    num_relations: usize,
) -> (f64, Vec<usize>) {
    let mut best = (f64::NEG_INFINITY, Vec::new());
    for labels in enumerate_partitions(num_nodes) {
        let q = literal_modularity(facts, num_nodes, num_relations, &labels);
        if q > best.0 {
            best = (q, labels);
        }
    }
    best
}

/// Random small multi-relational fact list (weights arise from duplicates).
pub fn random_small_facts(
    rng: &mut ChaCha8Rng,
    num_nodes: usize,
    num_relations: usize,
) -> Vec<(usize, usize, usize, usize)> {
    let mut facts = Vec::new();
    let mut t = 0;
    for i in 0..num_nodes {
        for j in i..num_nodes {
            for r in 0..num_relations {
                let p: f64 = rng.gen();
                if i == j {
                    if p < 0.08 {
                        facts.push((i, r, j, t));
                        t += 1;
                    }
                } else if p < 0.45 {
                    let copies = if rng.gen::<f64>() < 0.3 { 2 } else { 1 };
                    for _ in 0..copies {
                        facts.push((i, r, j, t));
                        t += 1;
                    }
                }
            }
        }
    }
    facts
}

pub struct ModularitySuiteOutcome {
    pub graphs_checked: usize,
    pub max_delta_error: f64,
    pub min_quality_ratio: f64,
    pub bridge_partition_found: bool,
}

/// Randomized oracle suite over small graphs: checks `delta_modularity`
/// against before/after recomputation by the literal formula and
/// `detect_communities` against the exhaustive maximum, plus the
/// two-triangle bridge case.
pub fn run_modularity_suite(num_graphs: usize, seed: u64) -> ModularitySuiteOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_delta_error: f64 = 0.0;
    let mut min_quality_ratio: f64 = f64::INFINITY;
    let mut checked = 0;

    while checked < num_graphs {
        let num_nodes = rng.gen_range(3..=7);
        let num_relations = rng.gen_range(1..=2);
        let facts = random_small_facts(&mut rng, num_nodes, num_relations);
        if facts.is_empty() {
            continue;
        }
        checked += 1;
        let g = graph_from_facts(&facts, num_nodes, num_relations);
        let lg = build_layered_graph(&g);

        // delta against before/after recomputation on random assignments
        for _ in 0..8 {
            let labels: Vec<usize> = (0..num_nodes).map(|_| rng.gen_range(0..3)).collect();
            let asg = CommunityAssignment::from_labels(&labels);
            let node = rng.gen_range(0..num_nodes);
            let target = rng.gen_range(0..asg.num_communities());
            let gain = delta_modularity(&lg, &asg, node, target).unwrap();
            let before = literal_modularity(&facts, num_nodes, num_relations, asg.labels());
            let mut moved = asg.labels().to_vec();
            moved[node] = target;
            let after_asg = CommunityAssignment::from_labels(&moved);
            let after = literal_modularity(&facts, num_nodes, num_relations, after_asg.labels());
            max_delta_error = max_delta_error.max((gain - (after - before)).abs());
        }

        // detection against the exhaustive maximum
        let (best_q, _) = brute_force_best(&facts, num_nodes, num_relations);
        let detected = detect_communities(&lg, seed ^ checked as u64);
        let got_q = modularity(&lg, &detected);
        let singleton_q = modularity(&lg, &CommunityAssignment::singletons(num_nodes));
        assert!(
            got_q + 1e-12 >= singleton_q,
            "detection must not end below its singleton start"
        );
        let ratio = if best_q.abs() < 1e-12 {
            if got_q.abs() < 1e-9 {
                1.0
            } else {
                0.0
            }
        } else {
            got_q / best_q
        };
        min_quality_ratio = min_quality_ratio.min(ratio);
    }

    // two triangles joined by one bridge edge
    let bridge: Vec<(usize, usize, usize, usize)> = vec![
        (0, 0, 1, 0),
        (1, 0, 2, 0),
        (2, 0, 0, 0),
        (3, 0, 4, 0),
        (4, 0, 5, 0),
        (5, 0, 3, 0),
        (2, 0, 3, 0),
    ];
    let lg = build_layered_graph(&graph_from_facts(&bridge, 6, 1));
    let asg = detect_communities(&lg, seed);
    let triangles = asg.num_communities() == 2
        && (0..3).all(|i| asg.community_of(i) == asg.community_of(0))
        && (3..6).all(|i| asg.community_of(i) == asg.community_of(3));
    let (best_q, best_labels) = brute_force_best(&bridge, 6, 1);
    let best_asg = CommunityAssignment::from_labels(&best_labels);
    let bridge_partition_found = triangles
        && best_asg.num_communities() == 2
        && (modularity(&lg, &asg) - best_q).abs() < 1e-9;

    ModularitySuiteOutcome {
        graphs_checked: checked,
        max_delta_error,
        min_quality_ratio,
        bridge_partition_found,
    }
}
