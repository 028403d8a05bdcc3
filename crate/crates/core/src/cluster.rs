//! Local graph clustering: push-based personalized PageRank, conductance
//! sweep cuts and the iterative discovery loop that peels clusters off a
//! susceptibility graph.
//!
//! Node removal is realized by masking. A [`MaskedGraph`] hides removed
//! nodes; degrees, volumes and cuts are always computed over the surviving
//! subgraph.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::WeightedGraph;
use crate::numeric::ExactSum;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("conductance is undefined for an empty or full vertex set (|S| = {size}, |V| = {total})")]
    Domain { size: usize, total: usize },
    #[error("node {node} is out of range for a graph with {n} nodes")]
    Alignment { node: usize, n: usize },
    #[error("node {0} is masked out")]
    Masked(usize),
    #[error("invalid parameter: {0}")]
    Parameter(String),
}

/// How the sweep orders nodes before scanning prefixes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepOrder {
    /// Raw rank `p(u)`, descending.
    #[default]
    RawRank,
    /// Degree-normalized rank `p(u) / d(u)`, descending.
    DegreeNormalized,
}

/// Parameters of the iterative discovery loop. Defaults are the published
/// clustering settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterRunParams {
    /// Neighbors per point used when the graph was built (recorded only).
    pub k: usize,
    /// Teleport probability.
    pub alpha: f64,
    /// Push tolerance.
    pub eps: f64,
    /// Reject a candidate that covers more than this fraction of ranked nodes.
    pub main_body_threshold: f64,
    pub min_cluster_size: usize,
    /// Stop once no more than this fraction of nodes remains unvisited.
    pub termination_fraction: f64,
    pub rng_seed: u64,
    pub sweep_order: SweepOrder,
}

impl Default for ClusterRunParams {
    fn default() -> Self {
        Self {
            k: 45,
            alpha: 0.001,
            eps: 1e-7,
            main_body_threshold: 0.99,
            min_cluster_size: 20,
            termination_fraction: 0.001,
            rng_seed: 0,
            sweep_order: SweepOrder::RawRank,
        }
    }
}

impl ClusterRunParams {
    pub fn validate(&self) -> Result<(), ClusterError> {
        let bad = |m: &str| Err(ClusterError::Parameter(m.to_string()));
        if self.k == 0 {
            return bad("k must be positive");
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must lie in (0, 1)");
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return bad("eps must be positive");
        }
        if !(self.main_body_threshold > 0.0 && self.main_body_threshold <= 1.0) {
            return bad("main_body_threshold must lie in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.termination_fraction) {
            return bad("termination_fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

/// A graph view with some nodes removed.
#[derive(Clone, Debug)]
pub struct MaskedGraph<'g> {
    graph: &'g WeightedGraph,
    alive: Vec<bool>,
    degree: Vec<f64>,
    alive_count: usize,
}

impl<'g> MaskedGraph<'g> {
    pub fn new(graph: &'g WeightedGraph) -> Self {
        let n = graph.node_count();
        Self {
            graph,
            alive: vec![true; n],
            degree: graph.degrees().to_vec(),
            alive_count: n,
        }
    }

    pub fn graph(&self) -> &'g WeightedGraph {
        self.graph
    }

    pub fn node_count(&self) -> usize {
        self.alive.len()
    }

    pub fn alive_count(&self) -> usize {
        self.alive_count
    }

    pub fn is_alive(&self, u: usize) -> bool {
        self.alive[u]
    }

    /// Degree within the surviving subgraph (0 for removed nodes).
    pub fn degree(&self, u: usize) -> f64 {
        self.degree[u]
    }

    pub fn alive_nodes(&self) -> Vec<usize> {
        (0..self.alive.len()).filter(|&u| self.alive[u]).collect()
    }

    pub fn neighbors(&self, u: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.graph.neighbors(u).filter(|&(v, _)| self.alive[v])
    }

    /// Exact total volume of the surviving subgraph.
    pub fn volume(&self) -> ExactSum {
        (0..self.alive.len())
            .filter(|&u| self.alive[u])
            .map(|u| self.degree[u])
            .collect()
    }

    /// Remove nodes; neighbor degrees are recomputed from scratch so they
    /// always equal a fresh sum over surviving edges.
    pub fn remove(&mut self, nodes: &[usize]) {
        let mut dirty = Vec::new();
        for &u in nodes {
            if self.alive[u] {
                self.alive[u] = false;
                self.alive_count -= 1;
                self.degree[u] = 0.0;
                dirty.extend(self.graph.neighbors(u).map(|(v, _)| v));
            }
        }
        dirty.sort_unstable();
        dirty.dedup();
        for v in dirty {
            if self.alive[v] {
                self.degree[v] = self
                    .graph
                    .neighbors(v)
                    .filter(|&(x, _)| self.alive[x])
                    .map(|(_, w)| w)
                    .sum();
            }
        }
    }

    /// Conductance `w(S, S̄) / min(vol S, vol S̄)` within the surviving subgraph.
    ///
    /// A set whose smaller side has zero volume gets conductance 1.
    pub fn conductance(&self, set: &[usize]) -> Result<f64, ClusterError> {
        let n = self.alive.len();
        let mut in_set = vec![false; n];
        let mut size = 0;
        for &u in set {
            if u >= n {
                return Err(ClusterError::Alignment { node: u, n });
            }
            if !self.alive[u] {
                return Err(ClusterError::Masked(u));
            }
            if !in_set[u] {
                in_set[u] = true;
                size += 1;
            }
        }
        if size == 0 || size == self.alive_count {
            return Err(ClusterError::Domain {
                size,
                total: self.alive_count,
            });
        }
        let mut cut = ExactSum::new();
        let mut vol_s = ExactSum::new();
        let mut vol_c = ExactSum::new();
        for u in 0..n {
            if !self.alive[u] {
                continue;
            }
            if in_set[u] {
                vol_s.add(self.degree[u]);
                for (v, w) in self.neighbors(u) {
                    if !in_set[v] {
                        cut.add(w);
                    }
                }
            } else {
                vol_c.add(self.degree[u]);
            }
        }
        Ok(ratio(cut.value(), vol_s.value(), vol_c.value()))
    }
}

fn ratio(cut: f64, vol_s: f64, vol_c: f64) -> f64 {
    let den = vol_s.min(vol_c);
    if den > 0.0 {
        cut / den
    } else {
        1.0
    }
}

/// Conductance of `set` in the full (unmasked) graph.
pub fn conductance(g: &WeightedGraph, set: &[usize]) -> Result<f64, ClusterError> {
    MaskedGraph::new(g).conductance(set)
}

/// Approximate personalized PageRank from the push procedure.
#[derive(Clone, Debug, PartialEq)]
pub struct PprVector {
    pub seed: usize,
    pub alpha: f64,
    pub eps: f64,
    /// Nonzero rank mass, sorted by node id.
    pub rank: Vec<(usize, f64)>,
    /// Nonzero leftover residual, sorted by node id.
    pub residual: Vec<(usize, f64)>,
    pub pushes: usize,
}

impl PprVector {
    pub fn rank_of(&self, u: usize) -> f64 {
        self.rank
            .binary_search_by_key(&u, |e| e.0)
            .map(|i| self.rank[i].1)
            .unwrap_or(0.0)
    }

    pub fn residual_of(&self, u: usize) -> f64 {
        self.residual
            .binary_search_by_key(&u, |e| e.0)
            .map(|i| self.residual[i].1)
            .unwrap_or(0.0)
    }

    pub fn total_mass(&self) -> f64 {
        self.rank.iter().chain(&self.residual).map(|e| e.1).sum()
    }
}

/// Reusable scratch space for repeated push computations on one graph.
///
/// Buffers are sized once; each run only touches and resets the nodes it
/// visits.
#[derive(Debug)]
pub struct PushWorkspace {
    p: Vec<f64>,
    r: Vec<f64>,
    queued: Vec<bool>,
    seen: Vec<bool>,
    touched: Vec<usize>,
    queue: std::collections::VecDeque<usize>,
}

impl PushWorkspace {
    pub fn new(n: usize) -> Self {
        Self {
            p: vec![0.0; n],
            r: vec![0.0; n],
            queued: vec![false; n],
            seen: vec![false; n],
            touched: Vec::new(),
            queue: Default::default(),
        }
    }

    fn touch(&mut self, u: usize) {
        if !self.seen[u] {
            self.seen[u] = true;
            self.touched.push(u);
        }
    }

    /// Non-lazy ACL push: while some node has `r(u) >= eps * d(u)`, move
    /// `alpha * r(u)` into `p(u)` and spread the remaining `(1 - alpha) * r(u)`
    /// over its surviving neighbors in proportion to edge weight.
    pub fn run(&mut self, g: &MaskedGraph<'_>, seed: usize, alpha: f64, eps: f64) -> Result<PprVector, ClusterError> {
        let n = g.node_count();
        if seed >= n {
            return Err(ClusterError::Alignment { node: seed, n });
        }
        if !g.is_alive(seed) {
            return Err(ClusterError::Masked(seed));
        }
        if !(alpha > 0.0 && alpha < 1.0) || !(eps > 0.0) {
            return Err(ClusterError::Parameter(format!(
                "push requires 0 < alpha < 1 and eps > 0 (alpha = {alpha}, eps = {eps})"
            )));
        }
        if g.degree(seed) <= 0.0 {
            return Ok(PprVector {
                seed,
                alpha,
                eps,
                rank: vec![(seed, 1.0)],
                residual: Vec::new(),
                pushes: 0,
            });
        }
        self.touch(seed);
        self.r[seed] = 1.0;
        self.queue.push_back(seed);
        self.queued[seed] = true;
        let mut pushes = 0usize;
        while let Some(u) = self.queue.pop_front() {
            self.queued[u] = false;
            let du = g.degree(u);
            let ru = self.r[u];
            if ru < eps * du {
                continue;
            }
            pushes += 1;
            self.p[u] += alpha * ru;
            self.r[u] = 0.0;
            let spread = (1.0 - alpha) * ru / du;
            for (v, w) in g.neighbors(u) {
                self.touch(v);
                self.r[v] += spread * w;
                if !self.queued[v] && self.r[v] >= eps * g.degree(v) {
                    self.queued[v] = true;
                    self.queue.push_back(v);
                }
            }
        }
        self.touched.sort_unstable();
        let mut rank = Vec::new();
        let mut residual = Vec::new();
        for &u in &self.touched {
            if self.p[u] > 0.0 {
                rank.push((u, self.p[u]));
            }
            if self.r[u] > 0.0 {
                residual.push((u, self.r[u]));
            }
            self.p[u] = 0.0;
            self.r[u] = 0.0;
            self.seen[u] = false;
        }
        self.touched.clear();
        Ok(PprVector {
            seed,
            alpha,
            eps,
            rank,
            residual,
            pushes,
        })
    }
}

/// Push approximation of personalized PageRank from `seed`.
pub fn push_ppr(g: &MaskedGraph<'_>, seed: usize, alpha: f64, eps: f64) -> Result<PprVector, ClusterError> {
    PushWorkspace::new(g.node_count()).run(g, seed, alpha, eps)
}

/// Minimum-conductance prefix found by a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub prefix: Vec<usize>,
    pub conductance: f64,
    /// Number of eligible nodes with positive rank.
    pub ranked: usize,
}

/// Eligible positive-rank nodes in sweep order (descending key, ties by id).
pub fn sweep_ordering(g: &MaskedGraph<'_>, ranks: &PprVector, eligible: &[bool], order: SweepOrder) -> Vec<usize> {
    let mut nodes: Vec<(f64, usize)> = ranks
        .rank
        .iter()
        .filter(|&&(u, p)| p > 0.0 && eligible[u] && g.is_alive(u))
        .map(|&(u, p)| {
            let key = match order {
                SweepOrder::RawRank => p,
                SweepOrder::DegreeNormalized => {
                    let d = g.degree(u);
                    if d > 0.0 {
                        p / d
                    } else {
                        f64::INFINITY
                    }
                }
            };
            (key, u)
        })
        .collect();
    nodes.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    nodes.into_iter().map(|e| e.1).collect()
}

/// Scan prefixes of the sweep ordering and return the one of minimum
/// conductance (earliest prefix on ties). A prefix equal to the whole
/// surviving node set is skipped because its conductance is undefined.
/// Returns `None` when no eligible prefix exists.
pub fn sweep_cut(g: &MaskedGraph<'_>, ranks: &PprVector, eligible: &[bool], order: SweepOrder) -> Option<SweepResult> {
    let ordering = sweep_ordering(g, ranks, eligible, order);
    let ranked = ordering.len();
    let mut in_set = vec![false; g.node_count()];
    let mut cut = ExactSum::new();
    let mut vol_s = ExactSum::new();
    let mut vol_c = g.volume();
    let mut best: Option<(f64, usize)> = None;
    for (i, &u) in ordering.iter().enumerate() {
        for (v, w) in g.neighbors(u) {
            if in_set[v] {
                cut.sub(w);
            } else {
                cut.add(w);
            }
        }
        in_set[u] = true;
        let du = g.degree(u);
        vol_s.add(du);
        vol_c.sub(du);
        if i + 1 == g.alive_count() {
            break;
        }
        let c = ratio(cut.value(), vol_s.value(), vol_c.value());
        if best.is_none_or(|(b, _)| c < b) {
            best = Some((c, i + 1));
        }
    }
    best.map(|(c, len)| SweepResult {
        prefix: ordering[..len].to_vec(),
        conductance: c,
        ranked,
    })
}

/// A discovered cluster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub id: usize,
    /// Member node ids, ascending.
    pub members: Vec<usize>,
    /// Conductance in the masked graph at the time of discovery.
    pub conductance: f64,
    pub seed: usize,
    /// Discovery round (1-based loop iteration).
    pub iteration: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    MainBody,
    Isolated,
    Cluster,
}

/// One round of the discovery loop.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscoveryEvent {
    pub iteration: usize,
    pub seed: usize,
    pub outcome: Outcome,
    /// Positive-rank node count.
    pub ranked: usize,
    pub prefix_len: usize,
    pub prefix_conductance: f64,
    /// Nodes removed from consideration this round, ascending.
    pub removed: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscoveryRun {
    pub clusters: Vec<Cluster>,
    pub events: Vec<DiscoveryEvent>,
}

/// Iterative conductance-based cluster discovery.
///
/// While more than `termination_fraction * n` nodes are unvisited: draw a
/// uniform unvisited seed, run push PageRank on the unvisited subgraph and
/// sweep. If the best prefix covers more than `main_body_threshold` of the
/// positively ranked nodes, all of those are marked visited; if it has fewer
/// than `min_cluster_size` nodes only the seed is; otherwise the prefix is
/// emitted as a cluster and its members are marked visited.
pub fn iterative_discover(g: &WeightedGraph, params: &ClusterRunParams) -> Result<DiscoveryRun, ClusterError> {
    params.validate()?;
    let n = g.node_count();
    let mut mg = MaskedGraph::new(g);
    let mut ws = PushWorkspace::new(n);
    let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed);
    let mut clusters = Vec::new();
    let mut events = Vec::new();
    let all = vec![true; n];
    let stop = params.termination_fraction * n as f64;
    let mut iteration = 0;
    while n > 0 && mg.alive_count() as f64 > stop {
        iteration += 1;
        let alive = mg.alive_nodes();
        let seed = alive[rng.random_range(0..alive.len())];
        let ppr = ws.run(&mg, seed, params.alpha, params.eps)?;
        let ranked: Vec<usize> = ppr.rank.iter().filter(|e| e.1 > 0.0).map(|e| e.0).collect();
        let sweep = sweep_cut(&mg, &ppr, &all, params.sweep_order);
        let (prefix, cond) = match sweep {
            Some(s) => (s.prefix, s.conductance),
            // only possible when the ranked set is the entire surviving graph
            None => (ranked.clone(), 1.0),
        };
        let (outcome, mut removed) = if prefix.len() as f64 > params.main_body_threshold * ranked.len() as f64 {
            (Outcome::MainBody, ranked.clone())
        } else if prefix.len() < params.min_cluster_size {
            (Outcome::Isolated, vec![seed])
        } else {
            (Outcome::Cluster, prefix.clone())
        };
        removed.sort_unstable();
        log::debug!(
            "round {iteration}: seed {seed} ranked {} prefix {} cond {cond:.4} -> {outcome:?}",
            ranked.len(),
            prefix.len()
        );
        if outcome == Outcome::Cluster {
            clusters.push(Cluster {
                id: clusters.len(),
                members: removed.clone(),
                conductance: cond,
                seed,
                iteration,
            });
        }
        mg.remove(&removed);
        events.push(DiscoveryEvent {
            iteration,
            seed,
            outcome,
            ranked: ranked.len(),
            prefix_len: prefix.len(),
            prefix_conductance: cond,
            removed,
        });
    }
    Ok(DiscoveryRun { clusters, events })
}

/// Conductance of each cluster's member set in another graph over the same
/// node ordering.
pub fn cross_conductance(g_other: &WeightedGraph, clusters: &[Cluster]) -> Result<Vec<f64>, ClusterError> {
    let full = MaskedGraph::new(g_other);
    clusters.iter().map(|c| full.conductance(&c.members)).collect()
}
