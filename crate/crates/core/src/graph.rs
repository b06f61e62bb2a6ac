//! Network topology and the adjacency matrices fed to diffusion convolution.

use std::collections::{HashMap, VecDeque};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Directed graph of sites or site directions.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    node_ids: Vec<String>,
    edges: Vec<(usize, usize)>,
}

impl Topology {
    pub fn new(node_ids: Vec<String>, edges: Vec<(usize, usize)>) -> Result<Self> {
        let n = node_ids.len();
        let mut seen = std::collections::HashSet::new();
        let mut dedup = Vec::with_capacity(edges.len());
        for (s, d) in edges {
            if s >= n || d >= n {
                return Err(Error::validation(format!(
                    "edge ({s}, {d}) references a node outside 0..{n}"
                )));
            }
            if seen.insert((s, d)) {
                dedup.push((s, d));
            }
        }
        Ok(Topology {
            node_ids,
            edges: dedup,
        })
    }

    /// Builds a topology from labelled edges; node order is first appearance.
    pub fn from_labelled_edges(edges: &[(String, String)]) -> Result<Self> {
        let mut ids: Vec<String> = Vec::new();
        let mut index = HashMap::new();
        let mut idx = |s: &String, ids: &mut Vec<String>| -> usize {
            *index.entry(s.clone()).or_insert_with(|| {
                ids.push(s.clone());
                ids.len() - 1
            })
        };
        let mut pairs = Vec::with_capacity(edges.len());
        for (s, d) in edges {
            let a = idx(s, &mut ids);
            let b = idx(d, &mut ids);
            pairs.push((a, b));
        }
        Topology::new(ids, pairs)
    }

    /// Parses an edge list: one `src dst` pair per line, `#` starts a comment.
    pub fn parse<R: BufRead>(input: R) -> Result<Self> {
        let mut edges = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line.map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            let content = line.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let parts: Vec<&str> = content.split_whitespace().collect();
            if parts.len() != 2 {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("expected `src dst`, found {content:?}"),
                });
            }
            edges.push((parts[0].to_string(), parts[1].to_string()));
        }
        Topology::from_labelled_edges(&edges)
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Topology::parse(std::io::BufReader::new(file))
    }

    pub fn to_edge_list(&self) -> String {
        let mut out = String::new();
        for &(s, d) in &self.edges {
            out.push_str(&self.node_ids[s]);
            out.push(' ');
            out.push_str(&self.node_ids[d]);
            out.push('\n');
        }
        out
    }

    /// Re-expresses the topology over a panel's node order.
    ///
    /// An endpoint label that names a panel node maps to it directly. A site
    /// label `S` without its own column maps to both `S_in` and `S_out`, which
    /// is how each physical site contributes two nodes.
    pub fn align_to(&self, panel_ids: &[String]) -> Result<Topology> {
        let index: HashMap<&str, usize> = panel_ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let resolve = |label: &str| -> Result<Vec<usize>> {
            if let Some(&i) = index.get(label) {
                return Ok(vec![i]);
            }
            let pair: Vec<usize> = ["_in", "_out"]
                .iter()
                .filter_map(|suffix| index.get(format!("{label}{suffix}").as_str()).copied())
                .collect();
            if pair.is_empty() {
                Err(Error::validation(format!(
                    "topology node {label:?} has no matching panel column"
                )))
            } else {
                Ok(pair)
            }
        };
        let mut edges = Vec::new();
        for &(s, d) in &self.edges {
            for a in resolve(&self.node_ids[s])? {
                for b in resolve(&self.node_ids[d])? {
                    if a != b {
                        edges.push((a, b));
                    }
                }
            }
        }
        Topology::new(panel_ids.to_vec(), edges)
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn num_nodes(&self) -> usize {
        self.node_ids.len()
    }

    /// Symmetric 0/1 connectivity with ones on the diagonal.
    pub fn connectivity(&self) -> Matrix {
        let n = self.num_nodes();
        let mut m = Matrix::identity(n);
        for &(s, d) in &self.edges {
            m.set(s, d, 1.0);
            m.set(d, s, 1.0);
        }
        m
    }

    /// Directed shortest-path edge counts; `None` when unreachable.
    pub fn hop_distances(&self) -> Vec<Vec<Option<usize>>> {
        let n = self.num_nodes();
        let mut adj = vec![Vec::new(); n];
        for &(s, d) in &self.edges {
            adj[s].push(d);
        }
        (0..n)
            .map(|src| {
                let mut dist = vec![None; n];
                dist[src] = Some(0);
                let mut queue = VecDeque::from([src]);
                while let Some(u) = queue.pop_front() {
                    let du = dist[u].unwrap_or(0);
                    for &v in &adj[u] {
                        if dist[v].is_none() {
                            dist[v] = Some(du + 1);
                            queue.push_back(v);
                        }
                    }
                }
                dist
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdjacencyKind {
    DynamicCorrelation,
    StaticHop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyMatrix {
    pub weights: Matrix,
    pub kind: AdjacencyKind,
}

/// Pearson correlation between every pair of columns of a `T′ × N` window.
///
/// Zero-variance columns get zero off-diagonal correlation. When `mask` is
/// given, pairs whose mask entry is zero are cleared (the diagonal stays 1).
pub fn pearson_adjacency(window: &Matrix, mask: Option<&Matrix>) -> Result<AdjacencyMatrix> {
    let (t, n) = window.shape();
    if t < 2 {
        return Err(Error::validation(format!(
            "correlation window needs at least 2 steps, got {t}"
        )));
    }
    if let Some(m) = mask {
        if m.shape() != (n, n) {
            return Err(Error::Shape {
                op: "pearson_adjacency mask",
                left: (n, n),
                right: m.shape(),
            });
        }
    }
    let mut means = vec![0.0; n];
    for r in 0..t {
        for (m, &x) in means.iter_mut().zip(window.row(r)) {
            *m += x;
        }
    }
    means.iter_mut().for_each(|m| *m /= t as f64);
    // centred columns, stored column-major for contiguous dot products
    let centred: Vec<Vec<f64>> = (0..n)
        .map(|c| (0..t).map(|r| window.get(r, c) - means[c]).collect())
        .collect();
    let norms: Vec<f64> = centred
        .iter()
        .map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let scale: Vec<f64> = centred
        .iter()
        .zip(&means)
        .map(|(col, m)| col.iter().map(|x| x.abs()).fold(m.abs(), f64::max))
        .collect();

    let mut w = Matrix::identity(n);
    for i in 0..n {
        for j in (i + 1)..n {
            let keep = mask.is_none_or(|m| m.get(i, j) != 0.0 || m.get(j, i) != 0.0);
            // a column whose spread is at rounding level is treated as constant
            let flat = |k: usize| norms[k] <= 1e-12 * scale[k].max(f64::MIN_POSITIVE);
            let rho = if !keep || flat(i) || flat(j) {
                0.0
            } else {
                let dot: f64 = centred[i].iter().zip(&centred[j]).map(|(a, b)| a * b).sum();
                (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0)
            };
            w.set(i, j, rho);
            w.set(j, i, rho);
        }
    }
    Ok(AdjacencyMatrix {
        weights: w,
        kind: AdjacencyKind::DynamicCorrelation,
    })
}

/// Gaussian kernel on directed hop distance: `exp(-hop²/σ²)` within
/// `threshold` hops, zero beyond it or when unreachable.
pub fn static_adjacency(topology: &Topology, sigma: f64, threshold: f64) -> Result<AdjacencyMatrix> {
    if !(sigma > 0.0) {
        return Err(Error::validation(format!("sigma must be positive, got {sigma}")));
    }
    let hops = topology.hop_distances();
    let n = topology.num_nodes();
    let w = Matrix::from_fn(n, n, |i, j| match hops[i][j] {
        Some(h) if (h as f64) <= threshold => (-(h as f64).powi(2) / (sigma * sigma)).exp(),
        _ => 0.0,
    });
    Ok(AdjacencyMatrix {
        weights: w,
        kind: AdjacencyKind::StaticHop,
    })
}

/// Forward and reverse random-walk transition matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionPair {
    pub forward: Matrix,
    pub reverse: Matrix,
}

/// Builds `D_O⁻¹A′` and `D_I⁻¹A′ᵀ` from `A′ = |A|`.
///
/// With `signed = true` negative weights are kept and rows are normalised by
/// their absolute sum instead. Zero-degree rows become identity rows.
pub fn transition_pair(adj: &AdjacencyMatrix, signed: bool) -> Result<TransitionPair> {
    let a = &adj.weights;
    if a.rows() != a.cols() {
        return Err(Error::Shape {
            op: "transition_pair",
            left: a.shape(),
            right: (a.cols(), a.rows()),
        });
    }
    let effective = if signed { a.clone() } else { a.map(f64::abs) };
    Ok(TransitionPair {
        forward: row_normalise(&effective),
        reverse: row_normalise(&effective.transpose()),
    })
}

fn row_normalise(a: &Matrix) -> Matrix {
    let n = a.rows();
    let mut out = a.clone();
    for i in 0..n {
        let degree: f64 = a.row(i).iter().map(|x| x.abs()).sum();
        let row = out.row_mut(i);
        if degree > 0.0 {
            row.iter_mut().for_each(|x| *x /= degree);
        } else {
            row.iter_mut().for_each(|x| *x = 0.0);
            row[i] = 1.0;
        }
    }
    out
}

/// `[F⁰ … F^{K−1}, R⁰ … R^{K−1}]` for forward `F` and reverse `R`.
pub fn diffusion_powers(pair: &TransitionPair, k: usize) -> Result<Vec<Matrix>> {
    if k < 1 {
        return Err(Error::validation("maximum diffusion step K must be at least 1"));
    }
    let mut out = Vec::with_capacity(2 * k);
    for base in [&pair.forward, &pair.reverse] {
        let mut p = Matrix::identity(base.rows());
        for d in 0..k {
            if d > 0 {
                p = p.matmul(base)?;
            }
            out.push(p.clone());
        }
    }
    Ok(out)
}
