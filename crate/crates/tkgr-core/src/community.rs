//! Community detection on the multi-relational graph: a Louvain variant that
//! greedily maximizes modularity summed over per-relation layers.
//!
//! Conventions, fixed once here and used by every quantity below:
//! - layers are undirected; each edge {i,j} appears in both adjacency lists,
//!   a self-loop appears once with doubled weight, so a node's degree is the
//!   plain sum of its list and `sum(degrees) = 2 * m_r` per layer;
//! - `m` is the total edge weight of the *whole* graph (all layers), while
//!   internal and incident sums stay per-layer. A single-layer graph reduces
//!   to classical modularity.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::TemporalGraph;

/// One relation's undirected weighted adjacency.
#[derive(Debug, Clone, Default)]
pub struct Layer {
    /// symmetric entries; self-loops stored once with doubled weight
    pub adj: Vec<Vec<(usize, f64)>>,
    pub degree: Vec<f64>,
    /// m_r: single-count total edge weight of this layer
    pub total_weight: f64,
}

/// Per-relation layers over one node set.
#[derive(Debug, Clone)]
pub struct LayeredGraph {
    pub num_nodes: usize,
    pub layers: Vec<Layer>,
}

impl LayeredGraph {
    /// Single-count total edge weight over all layers (the global `m`).
    pub fn total_weight(&self) -> f64 {
        self.layers.iter().map(|l| l.total_weight).sum()
    }

    fn empty(num_nodes: usize, num_layers: usize) -> Self {
        let layers = (0..num_layers)
            .map(|_| Layer {
                adj: vec![Vec::new(); num_nodes],
                degree: vec![0.0; num_nodes],
                total_weight: 0.0,
            })
            .collect();
        LayeredGraph { num_nodes, layers }
    }

    fn add_entry(&mut self, layer: usize, i: usize, j: usize, w: f64) {
        let l = &mut self.layers[layer];
        if i == j {
            // stored once, doubled, so degree and adjacency sums stay consistent
            l.adj[i].push((i, 2.0 * w));
            l.degree[i] += 2.0 * w;
            l.total_weight += w;
        } else {
            l.adj[i].push((j, w));
            l.adj[j].push((i, w));
            l.degree[i] += w;
            l.degree[j] += w;
            l.total_weight += w;
        }
    }
}

/// Node -> community map with contiguous community ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommunityAssignment {
    community_of: Vec<usize>,
    num_communities: usize,
}

impl CommunityAssignment {
    /// Renumbers the given labels to contiguous ids ordered by first
    /// appearance.
    pub fn from_labels(labels: &[usize]) -> Self {
        let mut remap: BTreeMap<usize, usize> = BTreeMap::new();
        let mut community_of = Vec::with_capacity(labels.len());
        for &l in labels {
            let next = remap.len();
            let id = *remap.entry(l).or_insert(next);
            community_of.push(id);
        }
        CommunityAssignment {
            community_of,
            num_communities: remap.len(),
        }
    }

    pub fn singletons(n: usize) -> Self {
        CommunityAssignment {
            community_of: (0..n).collect(),
            num_communities: n,
        }
    }

    pub fn community_of(&self, node: usize) -> usize {
        self.community_of[node]
    }

    pub fn labels(&self) -> &[usize] {
        &self.community_of
    }

    pub fn num_communities(&self) -> usize {
        self.num_communities
    }

    pub fn len(&self) -> usize {
        self.community_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.community_of.is_empty()
    }

    /// 1 iff both nodes share a community.
    pub fn indicator(&self, i: usize, j: usize) -> Result<f64> {
        if i >= self.community_of.len() || j >= self.community_of.len() {
            return Err(Error::IndexRange {
                op: "community_indicator",
                details: format!("node {} or {} of {}", i, j, self.community_of.len()),
            });
        }
        Ok(if self.community_of[i] == self.community_of[j] {
            1.0
        } else {
            0.0
        })
    }

    /// Community sizes indexed by community id.
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.num_communities];
        for &c in &self.community_of {
            sizes[c] += 1;
        }
        sizes
    }

    /// Cache format: a `#K=<n> seed=<seed>` header then `node<TAB>community`
    /// lines.
    pub fn write_cache(&self, path: &Path, seed: u64) -> Result<()> {
        let mut text = String::new();
        writeln!(text, "#K={} seed={}", self.num_communities, seed).expect("string write");
        for (node, &c) in self.community_of.iter().enumerate() {
            writeln!(text, "{}\t{}", node, c).expect("string write");
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_cache(path: &Path) -> Result<(Self, u64)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Parse {
            file: path.to_path_buf(),
            line: 1,
            msg: "empty partition cache".into(),
        })?;
        let seed = header
            .split("seed=")
            .nth(1)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::Parse {
                file: path.to_path_buf(),
                line: 1,
                msg: "missing seed in header".into(),
            })?;
        let mut pairs = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (node, comm) = line.split_once('\t').ok_or_else(|| Error::Parse {
                file: path.to_path_buf(),
                line: lineno + 2,
                msg: "expected `node<TAB>community`".into(),
            })?;
            let parse = |s: &str| -> Result<usize> {
                s.trim().parse().map_err(|_| Error::Parse {
                    file: path.to_path_buf(),
                    line: lineno + 2,
                    msg: format!("non-integer `{}`", s),
                })
            };
            pairs.push((parse(node)?, parse(comm)?));
        }
        pairs.sort_by_key(|(n, _)| *n);
        let labels: Vec<usize> = pairs.into_iter().map(|(_, c)| c).collect();
        Ok((CommunityAssignment::from_labels(&labels), seed))
    }
}

/// Collapse the temporal graph into per-relation undirected layers: direction
/// and timestamps are dropped, unit edge weights accumulate over duplicates.
/// Inverse-augmented relation ids are skipped (they duplicate raw layers).
pub fn build_layered_graph(g: &TemporalGraph) -> LayeredGraph {
    let mut weights: Vec<BTreeMap<(usize, usize), f64>> =
        vec![BTreeMap::new(); g.num_relations_raw];
    for q in g.quadruples() {
        if q.relation >= g.num_relations_raw {
            continue;
        }
        let key = (q.subject.min(q.object), q.subject.max(q.object));
        *weights[q.relation].entry(key).or_insert(0.0) += 1.0;
    }
    let mut lg = LayeredGraph::empty(g.num_entities, g.num_relations_raw);
    for (r, layer_weights) in weights.into_iter().enumerate() {
        for ((i, j), w) in layer_weights {
            lg.add_entry(r, i, j, w);
        }
    }
    lg
}

/// Modularity summed over layers:
/// `Q = sum_r sum_c [ adj_sum(c, r)/(2m) - (degree_sum(c, r)/(2m))^2 ]`
/// with `m` the whole-graph total weight.
pub fn modularity(lg: &LayeredGraph, asg: &CommunityAssignment) -> f64 {
    let m = lg.total_weight();
    if m == 0.0 {
        return 0.0;
    }
    let two_m = 2.0 * m;
    let k = asg.num_communities();
    let mut q = 0.0;
    let mut internal = vec![0.0; k];
    let mut incident = vec![0.0; k];
    for layer in &lg.layers {
        if layer.total_weight == 0.0 {
            continue;
        }
        internal.iter_mut().for_each(|x| *x = 0.0);
        incident.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..lg.num_nodes {
            let ci = asg.community_of(i);
            incident[ci] += layer.degree[i];
            for &(j, w) in &layer.adj[i] {
                if asg.community_of(j) == ci {
                    internal[ci] += w;
                }
            }
        }
        for c in 0..k {
            q += internal[c] / two_m - (incident[c] / two_m).powi(2);
        }
    }
    q
}

/// Modularity gain of moving `node` from its current community into
/// `target_community`, exactly `modularity(after) - modularity(before)`.
pub fn delta_modularity(
    lg: &LayeredGraph,
    asg: &CommunityAssignment,
    node: usize,
    target_community: usize,
) -> Result<f64> {
    if node >= lg.num_nodes {
        return Err(Error::IndexRange {
            op: "delta_modularity",
            details: format!("node {} of {}", node, lg.num_nodes),
        });
    }
    if target_community >= asg.num_communities() {
        return Err(Error::IndexRange {
            op: "delta_modularity",
            details: format!(
                "community {} of {}",
                target_community,
                asg.num_communities()
            ),
        });
    }
    let current = asg.community_of(node);
    if current == target_community {
        return Ok(0.0);
    }
    let m = lg.total_weight();
    if m == 0.0 {
        return Ok(0.0);
    }
    let two_m = 2.0 * m;

    let mut gain = 0.0;
    for layer in &lg.layers {
        if layer.total_weight == 0.0 {
            continue;
        }
        let k_i = layer.degree[node];
        // adjacency-sum weight from `node` to each community (self-loops move
        // with the node, so they cancel in the difference and are skipped)
        let mut w_cur = 0.0;
        let mut w_tgt = 0.0;
        for &(j, w) in &layer.adj[node] {
            if j == node {
                continue;
            }
            let cj = asg.community_of(j);
            if cj == current {
                w_cur += w;
            } else if cj == target_community {
                w_tgt += w;
            }
        }
        let mut tot_cur = 0.0;
        let mut tot_tgt = 0.0;
        for i in 0..lg.num_nodes {
            let ci = asg.community_of(i);
            if ci == current {
                tot_cur += layer.degree[i];
            } else if ci == target_community {
                tot_tgt += layer.degree[i];
            }
        }
        let tot_cur_less = tot_cur - k_i;
        // internal sums change by the doubled node-community weight
        gain += 2.0 * (w_tgt - w_cur) / two_m;
        gain -= ((tot_tgt + k_i).powi(2) - tot_tgt.powi(2) + tot_cur_less.powi(2)
            - tot_cur.powi(2))
            / (two_m * two_m);
    }
    Ok(gain)
}

const GAIN_TOLERANCE: f64 = 1e-12;

/// Two-phase Louvain with restarts: greedy local moves to the best
/// neighboring community (or back out to isolation), then aggregation of
/// communities into super-nodes, repeated until a full level yields no move,
/// followed by one refinement sweep at original-node resolution. Node
/// visiting order is shuffled from `seed`; ties on gain break toward the
/// lowest community id. The best-Q result over the restarts wins, so the
/// output is a deterministic function of `seed`.
pub fn detect_communities(lg: &LayeredGraph, seed: u64) -> CommunityAssignment {
    // restarts are cheap exactly where greedy search is noisiest
    let restarts = match lg.num_nodes {
        0..=64 => 32,
        65..=4096 => 8,
        _ => 4,
    };
    detect_communities_with_restarts(lg, seed, restarts)
}

pub fn detect_communities_with_restarts(
    lg: &LayeredGraph,
    seed: u64,
    restarts: u64,
) -> CommunityAssignment {
    let mut best: Option<(f64, CommunityAssignment)> = None;
    for attempt in 0..restarts.max(1) {
        let asg = louvain_once(lg, seed.wrapping_add(attempt.wrapping_mul(0x9e37_79b9)));
        let q = modularity(lg, &asg);
        if best.as_ref().is_none_or(|(bq, _)| q > *bq + GAIN_TOLERANCE) {
            best = Some((q, asg));
        }
    }
    best.expect("at least one attempt").1
}

fn louvain_once(lg: &LayeredGraph, seed: u64) -> CommunityAssignment {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // node_map[v] = community of original node v in the current level's graph
    let mut node_map: Vec<usize> = (0..lg.num_nodes).collect();
    let mut level = lg.clone();

    loop {
        let moved = local_moving(&level, &mut rng);
        let assignment = CommunityAssignment::from_labels(&moved);
        for slot in node_map.iter_mut() {
            *slot = assignment.community_of(*slot);
        }
        if assignment.num_communities() == level.num_nodes {
            break;
        }
        level = aggregate(&level, &assignment);
        if level.num_nodes <= 1 {
            break;
        }
    }
    CommunityAssignment::from_labels(&node_map)
}

/// Phase 1: repeated passes of single-node moves; returns community labels.
fn local_moving(lg: &LayeredGraph, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = lg.num_nodes;
    let num_layers = lg.layers.len();
    let m = lg.total_weight();
    let mut comm: Vec<usize> = (0..n).collect();
    if m == 0.0 {
        return comm;
    }
    let two_m = 2.0 * m;

    // tot[r][c]: incident degree sum of community c in layer r
    let mut tot: Vec<Vec<f64>> = lg.layers.iter().map(|l| l.degree.clone()).collect();
    let mut sizes: Vec<usize> = vec![1; n];
    let mut free_labels: Vec<usize> = Vec::new();
    // layers in which a node has any edges, to keep the gain loop sparse
    let node_layers: Vec<Vec<usize>> = (0..n)
        .map(|v| {
            (0..num_layers)
                .filter(|&r| lg.layers[r].degree[v] > 0.0)
                .collect()
        })
        .collect();

    let mut order: Vec<usize> = (0..n).collect();
    let mut w_to: BTreeMap<usize, f64> = BTreeMap::new();
    loop {
        let mut any_move = false;
        order.shuffle(rng);
        for &v in &order {
            let cur = comm[v];
            // adjacency-sum weight from v to each neighboring community,
            // summed over layers (the first gain term collapses over layers)
            w_to.clear();
            for &r in &node_layers[v] {
                for &(j, w) in &lg.layers[r].adj[v] {
                    if j != v {
                        *w_to.entry(comm[j]).or_insert(0.0) += w;
                    }
                }
            }
            let w_cur = w_to.get(&cur).copied().unwrap_or(0.0);

            // gain of a move cur -> cand with node-community weight w_cand;
            // cand = None is the split back out into an empty community
            let gain_of = |cand: Option<usize>, w_cand: f64| -> f64 {
                let mut gain = 2.0 * (w_cand - w_cur) / two_m;
                for &r in &node_layers[v] {
                    let k_i = lg.layers[r].degree[v];
                    let tot_tgt = cand.map_or(0.0, |c| tot[r][c]);
                    let tot_cur_less = tot[r][cur] - k_i;
                    gain -= 2.0 * k_i * (tot_tgt - tot_cur_less) / (two_m * two_m);
                }
                gain
            };

            let mut best_comm = None;
            let mut best_gain = GAIN_TOLERANCE;
            for (&cand, &w_cand) in &w_to {
                if cand == cur {
                    continue;
                }
                let gain = gain_of(Some(cand), w_cand);
                // candidates arrive in ascending community id, so strict
                // improvement breaks gain ties toward the lowest id
                if gain > best_gain {
                    best_gain = gain;
                    best_comm = Some(cand);
                }
            }
            if sizes[cur] > 1 && !free_labels.is_empty() {
                let gain = gain_of(None, 0.0);
                if gain > best_gain {
                    best_gain = gain;
                    best_comm = Some(free_labels[free_labels.len() - 1]);
                }
            }

            if let Some(target) = best_comm {
                if free_labels.last() == Some(&target) {
                    free_labels.pop();
                }
                for &r in &node_layers[v] {
                    let k_i = lg.layers[r].degree[v];
                    tot[r][cur] -= k_i;
                    tot[r][target] += k_i;
                }
                sizes[cur] -= 1;
                sizes[target] += 1;
                if sizes[cur] == 0 {
                    free_labels.push(cur);
                }
                comm[v] = target;
                any_move = true;
            }
        }
        if !any_move {
            break;
        }
    }
    comm
}

/// Phase 2: collapse communities into super-nodes, preserving per-layer
/// adjacency sums (internal weight becomes a self-loop).
pub(crate) fn aggregate(lg: &LayeredGraph, asg: &CommunityAssignment) -> LayeredGraph {
    let k = asg.num_communities();
    let mut out = LayeredGraph::empty(k, lg.layers.len());
    for (r, layer) in lg.layers.iter().enumerate() {
        // acc[(ci, cj)] accumulates directed adjacency sums; symmetric keys
        // end up equal, so each unordered pair is inserted once below
        let mut acc: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for i in 0..lg.num_nodes {
            let ci = asg.community_of(i);
            for &(j, w) in &layer.adj[i] {
                let cj = asg.community_of(j);
                *acc.entry((ci, cj)).or_insert(0.0) += w;
            }
        }
        for ((ci, cj), w) in acc {
            if ci < cj {
                out.add_entry(r, ci, cj, w);
            } else if ci == cj {
                // w already holds the doubled internal sum
                out.add_entry(r, ci, cj, w / 2.0);
            }
        }
    }
    out
}
