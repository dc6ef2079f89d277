//! Ego networks and their partition into non-overlapping communities by
//! minimizing the two-level map equation.
//!
//! Flow is the stationary distribution of an unbiased random walk on an
//! undirected, unweighted graph (visit rate proportional to degree, no
//! teleportation), so the description length of a partition `M` is
//!
//! ```text
//! L(M) = q·H(Q) + Σ_i p_i·H(P_i)
//!      = plogp(q) - 2·Σ_i plogp(q_i) - Σ_a plogp(p_a) + Σ_i plogp(q_i + p_i)
//! ```
//!
//! where `q_i` is the exit flow of module `i` (its cut edges over `2m`),
//! `q = Σ q_i`, and `p_i` the summed visit rate of its nodes. All logs are
//! natural, so lengths are in nats.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, SocialGraph, UserId};
use crate::error::{Error, Result};

/// Improvements at or below this many nats are treated as no improvement.
const MIN_GAIN: f64 = 1e-12;
const MAX_REFINE_PASSES: usize = 200;

/// The subgraph induced on a user's friends, with the user removed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EgoNetwork {
    pub owner: UserId,
    /// Friend ids in ascending order.
    pub nodes: Vec<UserId>,
    /// Edges as local index pairs `(a, b)` with `a < b`, ascending.
    pub edges: Vec<(usize, usize)>,
}

impl EgoNetwork {
    /// Builds a network from local edges, normalizing edge orientation and
    /// dropping self-loops and duplicates.
    pub fn from_edges(owner: UserId, nodes: Vec<UserId>, edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let set: BTreeSet<(usize, usize)> = edges
            .into_iter()
            .filter(|(a, b)| a != b)
            .map(|(a, b)| (a.min(b), a.max(b)))
            .collect();
        EgoNetwork {
            owner,
            nodes,
            edges: set.into_iter().collect(),
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj
    }

    /// Connected components as sorted local index lists, ordered by their
    /// smallest node.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let adj = self.adjacency();
        let mut seen = vec![false; self.nodes.len()];
        let mut out = Vec::new();
        for start in 0..self.nodes.len() {
            if seen[start] {
                continue;
            }
            seen[start] = true;
            let mut comp = vec![start];
            let mut queue = VecDeque::from([start]);
            while let Some(v) = queue.pop_front() {
                for &w in &adj[v] {
                    if !seen[w] {
                        seen[w] = true;
                        comp.push(w);
                        queue.push_back(w);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }

    /// Induced subnetwork on the given local indices (ascending).
    fn subnetwork(&self, keep: &[usize]) -> EgoNetwork {
        let index: HashMap<usize, usize> = keep.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        let edges = self
            .edges
            .iter()
            .filter_map(|(a, b)| Some((*index.get(a)?, *index.get(b)?)));
        EgoNetwork::from_edges(self.owner, keep.iter().map(|&v| self.nodes[v]).collect(), edges)
    }
}

pub fn ego_network(graph: &SocialGraph, u: UserId) -> Result<EgoNetwork> {
    let friends: Vec<UserId> = graph.friends(u)?.iter().copied().collect();
    let index: HashMap<UserId, usize> = friends.iter().enumerate().map(|(i, &f)| (f, i)).collect();
    let mut edges = Vec::new();
    for (i, &f) in friends.iter().enumerate() {
        for g in graph.friends(f)? {
            if let Some(&j) = index.get(g) {
                if i < j {
                    edges.push((i, j));
                }
            }
        }
    }
    Ok(EgoNetwork::from_edges(u, friends, edges))
}

#[inline]
fn plogp(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

/// Integer module statistics: `cut` edges leaving, `deg` degree sum.
#[derive(Debug, Clone, Copy, Default)]
struct Module {
    cut: usize,
    deg: usize,
    size: usize,
}

/// Map-equation bookkeeping over integer edge counts.
struct Flow {
    two_m: f64,
    node_term: f64,
}

impl Flow {
    fn new(degrees: &[usize]) -> Self {
        let two_m = degrees.iter().sum::<usize>() as f64;
        let node_term = degrees.iter().map(|&d| plogp(d as f64 / two_m)).sum();
        Flow { two_m, node_term }
    }

    fn module_term(&self, m: Module) -> f64 {
        let q = m.cut as f64 / self.two_m;
        let p = m.deg as f64 / self.two_m;
        -2.0 * plogp(q) + plogp(q + p)
    }

    fn total(&self, modules: &[Module]) -> f64 {
        let cut: usize = modules.iter().map(|m| m.cut).sum();
        plogp(cut as f64 / self.two_m) - self.node_term
            + modules.iter().map(|&m| self.module_term(m)).sum::<f64>()
    }

    /// Change in `L` when the modules `before` are replaced by `after`,
    /// with total cut moving from `cut_before` to `cut_after`.
    fn delta(&self, cut_before: usize, cut_after: usize, before: &[Module], after: &[Module]) -> f64 {
        plogp(cut_after as f64 / self.two_m) - plogp(cut_before as f64 / self.two_m)
            + after.iter().map(|&m| self.module_term(m)).sum::<f64>()
            - before.iter().map(|&m| self.module_term(m)).sum::<f64>()
    }
}

fn module_stats(adj: &[Vec<usize>], labels: &[usize], n_modules: usize) -> Vec<Module> {
    let mut mods = vec![Module::default(); n_modules];
    for (v, ns) in adj.iter().enumerate() {
        let m = &mut mods[labels[v]];
        m.size += 1;
        m.deg += ns.len();
        m.cut += ns.iter().filter(|&&w| labels[w] != labels[v]).count();
    }
    mods
}

/// Two-level map equation description length, in nats, of `modules`
/// (one module label per node; labels are arbitrary).
pub fn map_equation_length(net: &EgoNetwork, modules: &[usize]) -> Result<f64> {
    if modules.len() != net.n_nodes() {
        return Err(Error::contract(format!(
            "partition labels {} nodes but the network has {}",
            modules.len(),
            net.n_nodes()
        )));
    }
    if net.edges.is_empty() {
        return Err(Error::contract("map equation needs at least one edge"));
    }
    let dense: BTreeMap<usize, usize> = modules
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, m)| (m, i))
        .collect();
    let labels: Vec<usize> = modules.iter().map(|m| dense[m]).collect();
    let adj = net.adjacency();
    let degrees: Vec<usize> = adj.iter().map(Vec::len).collect();
    let flow = Flow::new(&degrees);
    Ok(flow.total(&module_stats(&adj, &labels, dense.len())))
}

/// Greedy minimizer for one connected network with at least one edge.
struct Greedy {
    adj: Vec<Vec<usize>>,
    flow: Flow,
    labels: Vec<usize>,
    mods: Vec<Module>,
}

impl Greedy {
    fn new(net: &EgoNetwork) -> Self {
        let adj = net.adjacency();
        let degrees: Vec<usize> = adj.iter().map(Vec::len).collect();
        let flow = Flow::new(&degrees);
        let labels: Vec<usize> = (0..adj.len()).collect();
        let mods = module_stats(&adj, &labels, adj.len());
        Greedy { adj, flow, labels, mods }
    }

    fn total_cut(&self) -> usize {
        self.mods.iter().map(|m| m.cut).sum()
    }

    /// Edge counts between distinct adjacent modules, keyed `(lo, hi)`.
    fn module_links(&self) -> BTreeMap<(usize, usize), usize> {
        let mut links = BTreeMap::new();
        for (v, ns) in self.adj.iter().enumerate() {
            for &w in ns {
                let (a, b) = (self.labels[v], self.labels[w]);
                if v < w && a != b {
                    *links.entry((a.min(b), a.max(b))).or_insert(0) += 1;
                }
            }
        }
        links
    }

    /// Merges the adjacent module pair with the largest decrease in `L`
    /// until no merge decreases it. Ties go to the lowest pair.
    fn merge_phase(&mut self) {
        loop {
            let cut = self.total_cut();
            let mut best: Option<(f64, usize, usize, Module)> = None;
            for (&(a, b), &e) in &self.module_links() {
                let (ma, mb) = (self.mods[a], self.mods[b]);
                let merged = Module {
                    cut: ma.cut + mb.cut - 2 * e,
                    deg: ma.deg + mb.deg,
                    size: ma.size + mb.size,
                };
                let d = self.flow.delta(cut, cut - 2 * e, &[ma, mb], &[merged]);
                if best.map_or(true, |(bd, ..)| d < bd) {
                    best = Some((d, a, b, merged));
                }
            }
            match best {
                Some((d, a, b, merged)) if d < -MIN_GAIN => {
                    for l in self.labels.iter_mut().filter(|l| **l == b) {
                        *l = a;
                    }
                    self.mods[a] = merged;
                    self.mods[b] = Module::default();
                }
                _ => break,
            }
        }
    }

    /// Moves single nodes to the neighboring (or a fresh) module with the
    /// largest decrease in `L`, pass after pass, until no move helps.
    fn refine_phase(&mut self, rng: &mut ChaCha8Rng) {
        let mut order: Vec<usize> = (0..self.adj.len()).collect();
        order.shuffle(rng);
        for _ in 0..MAX_REFINE_PASSES {
            let mut moved = false;
            for &v in &order {
                if let Some((d, target)) = self.best_move(v) {
                    if d < -MIN_GAIN {
                        self.apply_move(v, target);
                        moved = true;
                    }
                }
            }
            if !moved {
                break;
            }
        }
    }

    fn links_of(&self, v: usize) -> BTreeMap<usize, usize> {
        let mut k = BTreeMap::new();
        for &w in &self.adj[v] {
            *k.entry(self.labels[w]).or_insert(0) += 1;
        }
        k
    }

    fn moved_stats(&self, v: usize, target: usize, links: &BTreeMap<usize, usize>) -> (Module, Module, usize) {
        let from = self.labels[v];
        let d_v = self.adj[v].len();
        let k_from = links.get(&from).copied().unwrap_or(0);
        let k_to = links.get(&target).copied().unwrap_or(0);
        let (mf, mt) = (self.mods[from], self.mods[target]);
        let new_from = Module {
            cut: mf.cut + 2 * k_from - d_v,
            deg: mf.deg - d_v,
            size: mf.size - 1,
        };
        let new_to = Module {
            cut: mt.cut + d_v - 2 * k_to,
            deg: mt.deg + d_v,
            size: mt.size + 1,
        };
        let cut = self.total_cut() - mf.cut - mt.cut + new_from.cut + new_to.cut;
        (new_from, new_to, cut)
    }

    fn best_move(&self, v: usize) -> Option<(f64, usize)> {
        let from = self.labels[v];
        let links = self.links_of(v);
        let mut targets: BTreeSet<usize> = links.keys().copied().filter(|&m| m != from).collect();
        if self.mods[from].size > 1 {
            if let Some(empty) = self.mods.iter().position(|m| m.size == 0) {
                targets.insert(empty);
            }
        }
        let cut = self.total_cut();
        let mut best: Option<(f64, usize)> = None;
        for t in targets {
            let (nf, nt, new_cut) = self.moved_stats(v, t, &links);
            let d = self.flow.delta(cut, new_cut, &[self.mods[from], self.mods[t]], &[nf, nt]);
            if best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, t));
            }
        }
        best
    }

    fn apply_move(&mut self, v: usize, target: usize) {
        let links = self.links_of(v);
        let (nf, nt, _) = self.moved_stats(v, target, &links);
        let from = self.labels[v];
        self.mods[from] = nf;
        self.mods[target] = nt;
        self.labels[v] = target;
    }

    fn length(&self) -> f64 {
        self.flow.total(&self.mods)
    }
}

/// Partitions a connected network with at least one edge; returns one
/// label per node.
fn partition_component(net: &EgoNetwork, seed: u64) -> Vec<usize> {
    let mut g = Greedy::new(net);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    g.merge_phase();
    g.refine_phase(&mut rng);
    debug_assert!(g.length().is_finite());
    g.labels
}

/// Disjoint communities of one user's friends, indexed by size descending
/// then smallest member id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommunityPartition {
    pub owner: UserId,
    pub communities: Vec<Vec<UserId>>,
}

impl CommunityPartition {
    /// Sorts members and communities into canonical order, dropping empty
    /// groups.
    pub fn new(owner: UserId, groups: impl IntoIterator<Item = Vec<UserId>>) -> Self {
        let mut communities: Vec<Vec<UserId>> = groups
            .into_iter()
            .filter(|g| !g.is_empty())
            .map(|mut g| {
                g.sort_unstable();
                g.dedup();
                g
            })
            .collect();
        communities.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a[0].cmp(&b[0])));
        CommunityPartition { owner, communities }
    }

    pub fn len(&self) -> usize {
        self.communities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.communities.is_empty()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.communities.iter().map(Vec::len).collect()
    }

    pub fn community_of(&self, friend: UserId) -> Option<usize> {
        self.communities.iter().position(|c| c.binary_search(&friend).is_ok())
    }

    pub fn members(&self) -> impl Iterator<Item = UserId> + '_ {
        self.communities.iter().flatten().copied()
    }

    /// Checks disjointness and that the union is exactly `friends`.
    pub fn validate(&self, friends: &BTreeSet<UserId>) -> Result<()> {
        let mut seen = BTreeSet::new();
        for m in self.members() {
            if !seen.insert(m) {
                return Err(Error::contract(format!(
                    "user {} appears in two communities of {}",
                    m, self.owner
                )));
            }
        }
        if &seen != friends {
            return Err(Error::contract(format!(
                "communities of {} do not cover exactly its friends",
                self.owner
            )));
        }
        Ok(())
    }
}

/// Communities of an ego network. Isolated friends become singletons;
/// each connected component with an edge is partitioned by greedy module
/// merging followed by single-node refinement. The seed fixes the order in
/// which refinement visits nodes.
pub fn detect_communities(net: &EgoNetwork, seed: u64) -> CommunityPartition {
    let mut groups = Vec::new();
    for comp in net.components() {
        if comp.len() == 1 {
            groups.push(vec![net.nodes[comp[0]]]);
            continue;
        }
        let sub = net.subnetwork(&comp);
        let labels = partition_component(&sub, seed);
        let mut by_label: BTreeMap<usize, Vec<UserId>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            by_label.entry(l).or_default().push(sub.nodes[i]);
        }
        groups.extend(by_label.into_values());
    }
    CommunityPartition::new(net.owner, groups)
}

/// Local module labels of `partition` over `net.nodes`.
pub fn partition_labels(net: &EgoNetwork, partition: &CommunityPartition) -> Result<Vec<usize>> {
    net.nodes
        .iter()
        .map(|&f| {
            partition
                .community_of(f)
                .ok_or_else(|| Error::contract(format!("friend {f} is not in any community")))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommunityStats {
    pub size: usize,
    pub internal_edges: usize,
    pub connectivity: f64,
    pub total_checkins: usize,
    pub n_fma: usize,
}

/// Edge density of a member set; zero for singletons.
pub fn connectivity(size: usize, internal_edges: usize) -> f64 {
    if size < 2 {
        0.0
    } else {
        internal_edges as f64 / (size * (size - 1) / 2) as f64
    }
}

pub fn internal_edges(members: &[UserId], graph: &SocialGraph) -> usize {
    let mut n = 0;
    for (i, &a) in members.iter().enumerate() {
        for &b in &members[i + 1..] {
            if graph.has_edge(a, b) {
                n += 1;
            }
        }
    }
    n
}

pub fn community_stats(members: &[UserId], graph: &SocialGraph, corpus: &Corpus, n_fma: usize) -> Result<CommunityStats> {
    if members.is_empty() {
        return Err(Error::contract("community_stats needs a non-empty community"));
    }
    let internal = internal_edges(members, graph);
    Ok(CommunityStats {
        size: members.len(),
        internal_edges: internal,
        connectivity: connectivity(members.len(), internal),
        total_checkins: members.iter().map(|&m| corpus.count_of(m)).sum(),
        n_fma,
    })
}

/// Normalized mutual information `2·I(A;B) / (H(A) + H(B))` between two
/// labelings of the same items. Two single-cluster labelings score 1.
pub fn nmi(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must cover the same items");
    let n = a.len() as f64;
    let mut joint: HashMap<(usize, usize), f64> = HashMap::new();
    let mut ca: HashMap<usize, f64> = HashMap::new();
    let mut cb: HashMap<usize, f64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1.0;
        *ca.entry(x).or_default() += 1.0;
        *cb.entry(y).or_default() += 1.0;
    }
    let h = |c: &HashMap<usize, f64>| -c.values().map(|&k| plogp(k / n)).sum::<f64>();
    let (ha, hb) = (h(&ca), h(&cb));
    if ha + hb == 0.0 {
        return 1.0;
    }
    let mi: f64 = joint
        .iter()
        .map(|(&(x, y), &k)| (k / n) * ((k * n) / (ca[&x] * cb[&y])).ln())
        .sum();
    2.0 * mi / (ha + hb)
}

/// Writes `owner<TAB>friend<TAB>community_index` lines.
pub fn write_partitions<'a, W: Write>(mut w: W, parts: impl IntoIterator<Item = &'a CommunityPartition>) -> Result<()> {
    for p in parts {
        for (idx, c) in p.communities.iter().enumerate() {
            for f in c {
                writeln!(w, "{}\t{}\t{}", p.owner, f, idx)?;
            }
        }
    }
    Ok(())
}

/// Reads a partition dump. Indices are taken as grouping labels; the
/// result is re-normalized to canonical order.
pub fn read_partitions<R: BufRead>(r: R) -> Result<BTreeMap<UserId, CommunityPartition>> {
    let mut raw: BTreeMap<UserId, BTreeMap<usize, Vec<UserId>>> = BTreeMap::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let parsed = (f.len() == 3)
            .then(|| Some((f[0].parse().ok()?, f[1].parse().ok()?, f[2].trim().parse().ok()?)))
            .flatten();
        let (owner, friend, idx): (UserId, UserId, usize) =
            parsed.ok_or_else(|| Error::Format(format!("partition line {}: `{line}`", lineno + 1)))?;
        raw.entry(owner).or_default().entry(idx).or_default().push(friend);
    }
    Ok(raw
        .into_iter()
        .map(|(owner, groups)| (owner, CommunityPartition::new(owner, groups.into_values())))
        .collect())
}
