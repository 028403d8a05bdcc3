//! Symmetrized k-nearest-neighbor graphs with self-tuning RBF weights.
//!
//! Each point `x` gets a local scale `sigma_x`, the distance to its k-th
//! nearest neighbor. An edge `{x, y}` exists when either endpoint lists the
//! other among its k nearest neighbors (union symmetrization) and carries the
//! weight `exp(-|x - y|^2 / (sigma_x * sigma_y))`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

/// Smallest admissible local scale; duplicate points would otherwise give 0.
pub const SIGMA_FLOOR: f64 = 1e-12;

const GRAPH_MAGIC: &[u8; 4] = b"SGPH";
const GRAPH_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("k must satisfy 1 <= k < n (k = {k}, n = {n})")]
    InvalidK { k: usize, n: usize },
    #[error("point matrix has {len} values, not a multiple of dimension {dim}")]
    Shape { len: usize, dim: usize },
    #[error("non-finite coordinate at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("graph file format error: {0}")]
    Format(String),
    #[error("graph file truncated: {0}")]
    Truncated(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dense row-major point cloud view.
#[derive(Clone, Copy, Debug)]
pub struct Points<'a> {
    data: &'a [f64],
    dim: usize,
}

impl<'a> Points<'a> {
    pub fn new(data: &'a [f64], dim: usize) -> Result<Self, GraphError> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(GraphError::Shape { len: data.len(), dim });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(GraphError::NonFinite {
                row: i / dim,
                col: i % dim,
            });
        }
        Ok(Self { data, dim })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn sq_dist(&self, i: usize, j: usize) -> f64 {
        self.row(i)
            .iter()
            .zip(self.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

/// Per-point k-nearest-neighbor lists (ascending distance, ties by index).
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborLists {
    pub k: usize,
    /// `neighbors[i]` holds the k nearest other points of `i`.
    pub neighbors: Vec<Vec<u32>>,
    /// Euclidean distances matching `neighbors`.
    pub distances: Vec<Vec<f64>>,
}

/// Local scales `sigma_x` (distance to the k-th neighbor, floored).
#[derive(Clone, Debug, PartialEq)]
pub struct SigmaVector {
    pub sigma: Vec<f64>,
    /// Number of points whose scale hit [`SIGMA_FLOOR`].
    pub floored: usize,
}

/// Exact brute-force k-nearest neighbors.
pub fn knn(points: Points<'_>, k: usize) -> Result<(NeighborLists, SigmaVector), GraphError> {
    let n = points.len();
    if k == 0 || k >= n {
        return Err(GraphError::InvalidK { k, n });
    }
    let rows: Vec<(Vec<u32>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut cand: Vec<(f64, u32)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (points.sq_dist(i, j), j as u32))
                .collect();
            let by_dist = |a: &(f64, u32), b: &(f64, u32)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if cand.len() > k {
                cand.select_nth_unstable_by(k - 1, by_dist);
                cand.truncate(k);
            }
            cand.sort_unstable_by(by_dist);
            let idx = cand.iter().map(|c| c.1).collect();
            let dist = cand.iter().map(|c| c.0.sqrt()).collect();
            (idx, dist)
        })
        .collect();

    let mut neighbors = Vec::with_capacity(n);
    let mut distances = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    let mut floored = 0;
    for (idx, dist) in rows {
        let s = dist[k - 1];
        if s < SIGMA_FLOOR {
            floored += 1;
            sigma.push(SIGMA_FLOOR);
        } else {
            sigma.push(s);
        }
        neighbors.push(idx);
        distances.push(dist);
    }
    if floored > 0 {
        log::warn!("{floored} points had a zero k-th neighbor distance; sigma floored at {SIGMA_FLOOR:e}");
    }
    Ok((
        NeighborLists {
            k,
            neighbors,
            distances,
        },
        SigmaVector { sigma, floored },
    ))
}

/// Undirected weighted graph in compressed sparse row form.
///
/// Each undirected edge is stored once per endpoint with the identical weight
/// value, so `w(u, v) == w(v, u)` holds bit-for-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedGraph {
    offsets: Vec<usize>,
    targets: Vec<u32>,
    weights: Vec<f64>,
    degrees: Vec<f64>,
}

impl WeightedGraph {
    /// Build from an undirected edge list. Duplicate edges keep the first
    /// weight seen; self-loops are dropped.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (u32, u32, f64)>) -> Self {
        let mut adj: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];
        for (u, v, w) in edges {
            if u == v {
                continue;
            }
            adj[u as usize].push((v, w));
            adj[v as usize].push((u, w));
        }
        Self::from_adjacency(adj)
    }

    fn from_adjacency(mut adj: Vec<Vec<(u32, f64)>>) -> Self {
        let n = adj.len();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut targets = Vec::new();
        let mut weights = Vec::new();
        offsets.push(0);
        for list in adj.iter_mut() {
            // stable sort keeps the first occurrence of a duplicate in front
            list.sort_by_key(|e| e.0);
            list.dedup_by_key(|e| e.0);
            for &(v, w) in list.iter() {
                targets.push(v);
                weights.push(w);
            }
            offsets.push(targets.len());
        }
        let mut g = Self {
            offsets,
            targets,
            weights,
            degrees: Vec::new(),
        };
        g.degrees = (0..n).map(|u| g.neighbors(u).map(|(_, w)| w).sum()).collect();
        g
    }

    pub fn node_count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn edge_count(&self) -> usize {
        self.targets.len() / 2
    }

    /// Weighted degree `d(u) = sum_v w(u, v)`.
    pub fn degree(&self, u: usize) -> f64 {
        self.degrees[u]
    }

    pub fn degrees(&self) -> &[f64] {
        &self.degrees
    }

    pub fn neighbor_count(&self, u: usize) -> usize {
        self.offsets[u + 1] - self.offsets[u]
    }

    pub fn neighbors(&self, u: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.offsets[u]..self.offsets[u + 1];
        self.targets[r.clone()]
            .iter()
            .zip(&self.weights[r])
            .map(|(&v, &w)| (v as usize, w))
    }

    /// Weight of edge `{u, v}`, if present.
    pub fn weight(&self, u: usize, v: usize) -> Option<f64> {
        let r = self.offsets[u]..self.offsets[u + 1];
        let slice = &self.targets[r.clone()];
        slice.binary_search(&(v as u32)).ok().map(|i| self.weights[r.start + i])
    }

    /// Total volume `sum_u d(u)`.
    pub fn volume(&self) -> f64 {
        self.degrees.iter().sum()
    }

    /// Write the binary graph cache: `"SGPH"`, u32 version, u64 n, then per
    /// node a u32 neighbor count followed by `(u32 neighbor, f32 weight)` pairs.
    /// All integers little-endian.
    pub fn save(&self, path: &Path) -> Result<(), GraphError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(GRAPH_MAGIC)?;
        w.write_all(&GRAPH_VERSION.to_le_bytes())?;
        w.write_all(&(self.node_count() as u64).to_le_bytes())?;
        for u in 0..self.node_count() {
            w.write_all(&(self.neighbor_count(u) as u32).to_le_bytes())?;
            for (v, wt) in self.neighbors(u) {
                w.write_all(&(v as u32).to_le_bytes())?;
                w.write_all(&(wt as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Read a graph cache written by [`WeightedGraph::save`]. Weights come back
    /// at f32 precision and degrees are recomputed.
    pub fn load(path: &Path) -> Result<Self, GraphError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != GRAPH_MAGIC {
            return Err(GraphError::Format(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r, "version")?;
        if version != GRAPH_VERSION {
            return Err(GraphError::Format(format!("unsupported version {version}")));
        }
        let n = read_u64(&mut r, "node count")? as usize;
        let mut adj: Vec<Vec<(u32, f64)>> = Vec::with_capacity(n.min(1 << 24));
        for u in 0..n {
            let cnt = read_u32(&mut r, "neighbor count")? as usize;
            let mut list = Vec::with_capacity(cnt.min(1 << 16));
            for _ in 0..cnt {
                let v = read_u32(&mut r, "neighbor id")?;
                let mut b = [0u8; 4];
                read_exact(&mut r, &mut b, "weight")?;
                let wt = f32::from_le_bytes(b) as f64;
                if v as usize >= n {
                    return Err(GraphError::Format(format!(
                        "node {u} lists neighbor {v} outside 0..{n}"
                    )));
                }
                list.push((v, wt));
            }
            adj.push(list);
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(GraphError::Format(format!(
                "{} trailing bytes after node records",
                rest.len()
            )));
        }
        Ok(Self::from_adjacency(adj))
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<(), GraphError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => GraphError::Truncated(format!("while reading {what}")),
        _ => GraphError::Io(e),
    })
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32, GraphError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, what: &str) -> Result<u64, GraphError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

/// Union-symmetrized k-NN graph with self-tuning weights.
pub fn build_graph(lists: &NeighborLists, sigmas: &SigmaVector, points: Points<'_>) -> WeightedGraph {
    let n = lists.neighbors.len();
    let mut edges = Vec::with_capacity(n * lists.k);
    for (u, nbrs) in lists.neighbors.iter().enumerate() {
        for &v in nbrs {
            let v = v as usize;
            let (a, b) = if u < v { (u, v) } else { (v, u) };
            edges.push((a as u32, b as u32));
        }
    }
    edges.sort_unstable();
    edges.dedup();
    let weighted = edges.into_par_iter().map(|(a, b)| {
        let d2 = points.sq_dist(a as usize, b as usize);
        let w = (-d2 / (sigmas.sigma[a as usize] * sigmas.sigma[b as usize])).exp();
        (a, b, w)
    });
    WeightedGraph::from_edges(n, weighted.collect::<Vec<_>>())
}

/// Convenience: k-NN search followed by graph construction.
pub fn knn_graph(points: Points<'_>, k: usize) -> Result<WeightedGraph, GraphError> {
    let (lists, sigmas) = knn(points, k)?;
    Ok(build_graph(&lists, &sigmas, points))
}
