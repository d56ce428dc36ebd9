//! Undirected graphs, file IO, neighborhood oracles, node orderings and
//! 1-WL color refinement.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{GmnError, Result};
use crate::tensor::Matrix;

/// Supervision attached to a graph.
#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    /// One integer class per node.
    Nodes(Vec<i64>),
    /// A single graph-level target (class id or regression value).
    Graph(f64),
}

#[derive(Clone, Debug)]
pub struct Graph {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    adj: Vec<Vec<usize>>,
    adj_edge: Vec<Vec<usize>>,
    node_features: Matrix,
    edge_features: Option<Matrix>,
    labels: Option<Labels>,
    self_loops: bool,
}

impl PartialEq for Graph {
    fn eq(&self, other: &Self) -> bool {
        self.num_nodes == other.num_nodes
            && self.adj == other.adj
            && self.node_features == other.node_features
            && self.labels == other.labels
    }
}

impl Graph {
    /// Builds a simple undirected graph with constant 1.0 node features.
    pub fn new(num_nodes: usize, edges: &[(usize, usize)]) -> Result<Graph> {
        Graph::build(num_nodes, edges, false)
    }

    /// Like [`Graph::new`] but self-loops are accepted.
    pub fn with_self_loops(num_nodes: usize, edges: &[(usize, usize)]) -> Result<Graph> {
        Graph::build(num_nodes, edges, true)
    }

    fn build(num_nodes: usize, edges: &[(usize, usize)], self_loops: bool) -> Result<Graph> {
        let mut canonical = Vec::with_capacity(edges.len());
        let mut seen = HashMap::with_capacity(edges.len());
        for &(u, v) in edges {
            if u >= num_nodes || v >= num_nodes {
                return Err(GmnError::InvalidGraph(format!(
                    "edge ({u}, {v}) out of range for {num_nodes} nodes"
                )));
            }
            if u == v && !self_loops {
                return Err(GmnError::InvalidGraph(format!(
                    "self-loop at node {u} (set \"self_loops\": true to allow)"
                )));
            }
            let key = (u.min(v), u.max(v));
            if seen.insert(key, canonical.len()).is_some() {
                return Err(GmnError::InvalidGraph(format!("duplicate edge ({u}, {v})")));
            }
            canonical.push(key);
        }
        let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); num_nodes];
        for (id, &(u, v)) in canonical.iter().enumerate() {
            adj[u].push((v, id));
            if u != v {
                adj[v].push((u, id));
            }
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        let (adj, adj_edge) = adj
            .into_iter()
            .map(|list| list.into_iter().unzip())
            .unzip();
        Ok(Graph {
            num_nodes,
            edges: canonical,
            adj,
            adj_edge,
            node_features: Matrix::filled(num_nodes, 1, 1.0),
            edge_features: None,
            labels: None,
            self_loops,
        })
    }

    pub fn with_node_features(mut self, features: Matrix) -> Result<Graph> {
        if features.rows != self.num_nodes {
            return Err(GmnError::InvalidGraph(format!(
                "node_features has {} rows for {} nodes",
                features.rows, self.num_nodes
            )));
        }
        if !features.is_finite() {
            return Err(GmnError::InvalidGraph("non-finite node feature".into()));
        }
        self.node_features = features;
        Ok(self)
    }

    pub fn with_edge_features(mut self, features: Matrix) -> Result<Graph> {
        if features.rows != self.edges.len() {
            return Err(GmnError::InvalidGraph(format!(
                "edge_features has {} rows for {} edges",
                features.rows,
                self.edges.len()
            )));
        }
        self.edge_features = Some(features);
        Ok(self)
    }

    pub fn with_labels(mut self, labels: Labels) -> Result<Graph> {
        if let Labels::Nodes(l) = &labels {
            if l.len() != self.num_nodes {
                return Err(GmnError::InvalidGraph(format!(
                    "{} node labels for {} nodes",
                    l.len(),
                    self.num_nodes
                )));
            }
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Canonical `(min, max)` endpoint pairs, in insertion order.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Sorted neighbor list of `v`.
    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.adj[v]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.adj[v].len()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.adj[u].binary_search(&v).is_ok()
    }

    /// Edge id of `{u, v}` if the edge exists.
    pub fn edge_id(&self, u: usize, v: usize) -> Option<usize> {
        self.adj[u]
            .binary_search(&v)
            .ok()
            .map(|pos| self.adj_edge[u][pos])
    }

    pub fn node_features(&self) -> &Matrix {
        &self.node_features
    }

    pub fn feature_dim(&self) -> usize {
        self.node_features.cols
    }

    pub fn edge_features(&self) -> Option<&Matrix> {
        self.edge_features.as_ref()
    }

    pub fn labels(&self) -> Option<&Labels> {
        self.labels.as_ref()
    }

    pub fn allows_self_loops(&self) -> bool {
        self.self_loops
    }

    /// Relabels node `v` as `perm[v]`, carrying features, edge features and labels.
    pub fn permute(&self, perm: &[usize]) -> Result<Graph> {
        let n = self.num_nodes;
        if perm.len() != n || !is_permutation(perm) {
            return Err(GmnError::InvalidGraph("relabeling is not a permutation".into()));
        }
        let edges: Vec<_> = self.edges.iter().map(|&(u, v)| (perm[u], perm[v])).collect();
        let mut g = Graph::build(n, &edges, self.self_loops)?;
        let mut x = Matrix::zeros(n, self.node_features.cols);
        for v in 0..n {
            x.row_mut(perm[v]).copy_from_slice(self.node_features.row(v));
        }
        g.node_features = x;
        g.edge_features = self.edge_features.clone();
        g.labels = match &self.labels {
            Some(Labels::Nodes(l)) => {
                let mut out = vec![0; n];
                for v in 0..n {
                    out[perm[v]] = l[v];
                }
                Some(Labels::Nodes(out))
            }
            other => other.clone(),
        };
        Ok(g)
    }

    /// Disjoint union; nodes of `other` are shifted by `self.num_nodes()`.
    pub fn disjoint_union(&self, other: &Graph) -> Result<Graph> {
        let shift = self.num_nodes;
        let mut edges = self.edges.clone();
        edges.extend(other.edges.iter().map(|&(u, v)| (u + shift, v + shift)));
        let g = Graph::build(shift + other.num_nodes, &edges, self.self_loops || other.self_loops)?;
        if self.feature_dim() == other.feature_dim() {
            let mut x = self.node_features.clone();
            x.rows += other.num_nodes;
            x.data.extend_from_slice(&other.node_features.data);
            return g.with_node_features(x);
        }
        Ok(g)
    }

    /// Stable content hash (hex SHA-256 of the canonical JSON form).
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_vec(&self.to_json()).expect("graph json serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn to_json(&self) -> GraphJson {
        let (labels, graph_label) = match &self.labels {
            Some(Labels::Nodes(l)) => (Some(LabelsJson::Nodes(l.clone())), None),
            Some(Labels::Graph(y)) => (None, Some(*y)),
            None => (None, None),
        };
        GraphJson {
            num_nodes: self.num_nodes,
            edges: self.edges.iter().map(|&(u, v)| [u as i64, v as i64]).collect(),
            node_features: Some(self.node_features.to_rows()),
            edge_features: self.edge_features.as_ref().map(Matrix::to_rows),
            labels,
            graph_label,
            self_loops: self.self_loops.then_some(true),
        }
    }
}

/// On-disk JSON graph schema.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GraphJson {
    pub num_nodes: usize,
    pub edges: Vec<[i64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_features: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge_features: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<LabelsJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph_label: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub self_loops: Option<bool>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelsJson {
    Nodes(Vec<i64>),
    Graph(f64),
}

impl TryFrom<GraphJson> for Graph {
    type Error = GmnError;

    fn try_from(raw: GraphJson) -> Result<Graph> {
        let n = raw.num_nodes;
        let mut pairs = Vec::with_capacity(raw.edges.len());
        for &[u, v] in &raw.edges {
            if u < 0 || v < 0 || u as usize >= n || v as usize >= n {
                return Err(GmnError::InvalidGraph(format!(
                    "edge [{u}, {v}] out of range for {n} nodes"
                )));
            }
            pairs.push((u as usize, v as usize));
        }
        let keep = undirected_listing(&pairs)?;
        let edges: Vec<_> = keep.iter().map(|&i| pairs[i]).collect();
        let mut g = Graph::build(n, &edges, raw.self_loops.unwrap_or(false))?;
        if let Some(x) = raw.node_features {
            if x.len() != n {
                return Err(GmnError::InvalidGraph(format!(
                    "node_features has {} rows for {n} nodes",
                    x.len()
                )));
            }
            g = g.with_node_features(Matrix::from_rows(&x)?)?;
        }
        if let Some(ef) = raw.edge_features {
            if ef.len() != pairs.len() {
                return Err(GmnError::InvalidGraph(format!(
                    "edge_features has {} rows for {} listed edges",
                    ef.len(),
                    pairs.len()
                )));
            }
            let rows: Vec<_> = keep.iter().map(|&i| ef[i].clone()).collect();
            g = g.with_edge_features(Matrix::from_rows(&rows)?)?;
        }
        match (raw.labels, raw.graph_label) {
            (Some(_), Some(_)) => {
                return Err(GmnError::InvalidGraph(
                    "both \"labels\" and \"graph_label\" given".into(),
                ))
            }
            (Some(LabelsJson::Nodes(l)), None) => g = g.with_labels(Labels::Nodes(l))?,
            (Some(LabelsJson::Graph(y)), None) | (None, Some(y)) => {
                g = g.with_labels(Labels::Graph(y))?
            }
            (None, None) => {}
        }
        Ok(g)
    }
}

/// Indices of the listed pairs that form the undirected edge set.
///
/// Either every edge is listed once, or every edge is listed in both
/// directions; a mixture is rejected as asymmetric.
fn undirected_listing(pairs: &[(usize, usize)]) -> Result<Vec<usize>> {
    let mut first: HashMap<(usize, usize), usize> = HashMap::with_capacity(pairs.len());
    for (i, &p) in pairs.iter().enumerate() {
        if first.insert(p, i).is_some() {
            return Err(GmnError::InvalidGraph(format!(
                "duplicate edge [{}, {}]",
                p.0, p.1
            )));
        }
    }
    let mut mirrored = 0usize;
    let mut single = 0usize;
    for &(u, v) in pairs {
        if u == v {
            continue;
        }
        if first.contains_key(&(v, u)) {
            mirrored += 1;
        } else {
            single += 1;
        }
    }
    if mirrored > 0 && single > 0 {
        return Err(GmnError::InvalidGraph(format!(
            "asymmetric edge list: {mirrored} edges listed in both directions, {single} in one"
        )));
    }
    Ok(pairs
        .iter()
        .enumerate()
        .filter(|(_, &(u, v))| mirrored == 0 || u <= v)
        .map(|(i, _)| i)
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphFormat {
    Json,
    Edgelist,
}

impl GraphFormat {
    /// `.json` → JSON, anything else → edge list.
    pub fn from_path(path: &Path) -> GraphFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("json") => GraphFormat::Json,
            _ => GraphFormat::Edgelist,
        }
    }
}

pub fn load_graph(path: &Path, format: GraphFormat) -> Result<Graph> {
    let text = std::fs::read_to_string(path).map_err(|source| GmnError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    match format {
        GraphFormat::Json => parse_graph_json(&text),
        GraphFormat::Edgelist => parse_edgelist(&text),
    }
}

pub fn parse_graph_json(text: &str) -> Result<Graph> {
    let raw: GraphJson =
        serde_json::from_str(text).map_err(|e| GmnError::Parse(format!("graph json: {e}")))?;
    Graph::try_from(raw)
}

/// One `u v` pair per line; `#` starts a comment. Node count is `max id + 1`.
pub fn parse_edgelist(text: &str) -> Result<Graph> {
    let mut pairs = Vec::new();
    let mut max_id: Option<usize> = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let mut field = || -> Result<usize> {
            let tok = it.next().ok_or_else(|| {
                GmnError::Parse(format!("edgelist line {}: expected two node ids", lineno + 1))
            })?;
            tok.parse::<usize>().map_err(|e| {
                GmnError::Parse(format!("edgelist line {}: `{tok}`: {e}", lineno + 1))
            })
        };
        let (u, v) = (field()?, field()?);
        if it.next().is_some() {
            return Err(GmnError::Parse(format!(
                "edgelist line {}: trailing tokens",
                lineno + 1
            )));
        }
        max_id = Some(max_id.map_or(u.max(v), |m| m.max(u).max(v)));
        pairs.push((u, v));
    }
    let n = max_id.map_or(0, |m| m + 1);
    let keep = undirected_listing(&pairs)?;
    let edges: Vec<_> = keep.iter().map(|&i| pairs[i]).collect();
    Graph::new(n, &edges)
}

pub fn save_graph_json(g: &Graph, path: &Path) -> Result<()> {
    let text = serde_json::to_string(&g.to_json()).expect("graph json serializes");
    std::fs::write(path, text).map_err(|source| GmnError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// BFS hop distances from `v`; `None` for unreachable nodes.
pub fn bfs_distances(g: &Graph, v: usize) -> Vec<Option<usize>> {
    let mut dist = vec![None; g.num_nodes()];
    let mut queue = VecDeque::new();
    dist[v] = Some(0);
    queue.push_back(v);
    while let Some(u) = queue.pop_front() {
        let d = dist[u].unwrap();
        for &w in g.neighbors(u) {
            if dist[w].is_none() {
                dist[w] = Some(d + 1);
                queue.push_back(w);
            }
        }
    }
    dist
}

/// Sorted ids of `{u : dist(u, v) ≤ k}`.
pub fn k_hop_neighborhood(g: &Graph, v: usize, k: usize) -> Vec<usize> {
    assert!(v < g.num_nodes(), "node {v} out of range");
    let mut dist = vec![usize::MAX; g.num_nodes()];
    let mut queue = VecDeque::new();
    dist[v] = 0;
    queue.push_back(v);
    while let Some(u) = queue.pop_front() {
        if dist[u] == k {
            continue;
        }
        for &w in g.neighbors(u) {
            if dist[w] == usize::MAX {
                dist[w] = dist[u] + 1;
                queue.push_back(w);
            }
        }
    }
    (0..g.num_nodes()).filter(|&u| dist[u] != usize::MAX).collect()
}

/// An induced subgraph together with its local → global id map.
#[derive(Clone, Debug)]
pub struct Subgraph {
    pub graph: Graph,
    pub global_ids: Vec<usize>,
}

/// `G[S]`: nodes of `nodes` (in the given order) and every edge of `g`
/// with both endpoints in the set. Node and edge features are sliced.
pub fn induce_subgraph(g: &Graph, nodes: &[usize]) -> Result<Subgraph> {
    let mut local = HashMap::with_capacity(nodes.len());
    for (i, &u) in nodes.iter().enumerate() {
        if u >= g.num_nodes() {
            return Err(GmnError::InvalidGraph(format!("node {u} not in graph")));
        }
        if local.insert(u, i).is_some() {
            return Err(GmnError::InvalidGraph(format!("node {u} repeated in subset")));
        }
    }
    let mut edges = Vec::new();
    let mut edge_rows = Vec::new();
    for (i, &u) in nodes.iter().enumerate() {
        for (pos, &w) in g.neighbors(u).iter().enumerate() {
            if let Some(&j) = local.get(&w) {
                if u <= w {
                    edges.push((i, j));
                    edge_rows.push(g.adj_edge[u][pos]);
                }
            }
        }
    }
    let mut x = Matrix::zeros(nodes.len(), g.feature_dim());
    for (i, &u) in nodes.iter().enumerate() {
        x.row_mut(i).copy_from_slice(g.node_features().row(u));
    }
    let mut sub = Graph::build(nodes.len(), &edges, g.self_loops)?.with_node_features(x)?;
    if let Some(ef) = g.edge_features() {
        let rows: Vec<_> = edge_rows.iter().map(|&e| ef.row(e).to_vec()).collect();
        let m = if rows.is_empty() {
            Matrix::zeros(0, ef.cols)
        } else {
            Matrix::from_rows(&rows)?
        };
        sub = sub.with_edge_features(m)?;
    }
    Ok(Subgraph {
        graph: sub,
        global_ids: nodes.to_vec(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrderingMode {
    Degree,
    Ppr,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeOrdering {
    pub permutation: Vec<usize>,
    pub mode: OrderingMode,
}

impl NodeOrdering {
    pub fn identity(n: usize) -> NodeOrdering {
        NodeOrdering {
            permutation: (0..n).collect(),
            mode: OrderingMode::Identity,
        }
    }

    pub fn is_valid(&self, n: usize) -> bool {
        self.permutation.len() == n && is_permutation(&self.permutation)
    }
}

pub fn is_permutation(perm: &[usize]) -> bool {
    let mut seen = vec![false; perm.len()];
    perm.iter().all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true))
}

/// Descending degree, ascending id among ties.
pub fn degree_ordering(g: &Graph) -> NodeOrdering {
    let mut perm: Vec<usize> = (0..g.num_nodes()).collect();
    perm.sort_by(|&a, &b| g.degree(b).cmp(&g.degree(a)).then(a.cmp(&b)));
    NodeOrdering {
        permutation: perm,
        mode: OrderingMode::Degree,
    }
}

pub const PPR_DAMPING: f64 = 0.85;
pub const PPR_TOL: f64 = 1e-10;
pub const PPR_MAX_ITERS: usize = 1000;

/// Global PageRank by power iteration with uniform teleport. Mass on
/// degree-0 nodes is redistributed uniformly.
pub fn pagerank(g: &Graph, damping: f64, tol: f64, max_iters: usize) -> Result<Vec<f64>> {
    if !(damping > 0.0 && damping < 1.0) {
        return Err(GmnError::Config(format!("damping {damping} outside (0, 1)")));
    }
    let n = g.num_nodes();
    if n == 0 {
        return Ok(Vec::new());
    }
    let uniform = 1.0 / n as f64;
    let mut scores = vec![uniform; n];
    let mut next = vec![0.0; n];
    let mut residual = f64::INFINITY;
    for _ in 0..max_iters {
        let dangling: f64 = (0..n).filter(|&u| g.degree(u) == 0).map(|u| scores[u]).sum();
        let base = (1.0 - damping) * uniform + damping * dangling * uniform;
        for (u, out) in next.iter_mut().enumerate() {
            let inflow: f64 = g
                .neighbors(u)
                .iter()
                .map(|&w| scores[w] / g.degree(w) as f64)
                .sum();
            *out = base + damping * inflow;
        }
        residual = scores
            .iter()
            .zip(&next)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()));
        std::mem::swap(&mut scores, &mut next);
        if residual < tol {
            return Ok(scores);
        }
    }
    Err(GmnError::NotConverged {
        iterations: max_iters,
        residual,
    })
}

/// Descending PageRank score, ascending id among exact ties.
pub fn ppr_ordering(g: &Graph, damping: f64, tol: f64) -> Result<NodeOrdering> {
    let scores = pagerank(g, damping, tol, PPR_MAX_ITERS)?;
    let mut perm: Vec<usize> = (0..g.num_nodes()).collect();
    perm.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(NodeOrdering {
        permutation: perm,
        mode: OrderingMode::Ppr,
    })
}

pub fn node_ordering(g: &Graph, mode: OrderingMode) -> Result<NodeOrdering> {
    match mode {
        OrderingMode::Degree => Ok(degree_ordering(g)),
        OrderingMode::Ppr => ppr_ordering(g, PPR_DAMPING, PPR_TOL),
        OrderingMode::Identity => Ok(NodeOrdering::identity(g.num_nodes())),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WLColoring {
    pub colors: Vec<u32>,
    pub rounds: usize,
}

impl WLColoring {
    /// Sorted `(color, count)` pairs.
    pub fn histogram(&self) -> Vec<(u32, usize)> {
        color_histogram(&self.colors)
    }

    pub fn num_classes(&self) -> usize {
        self.histogram().len()
    }
}

fn color_histogram(colors: &[u32]) -> Vec<(u32, usize)> {
    let mut h: BTreeMap<u32, usize> = BTreeMap::new();
    for &c in colors {
        *h.entry(c).or_default() += 1;
    }
    h.into_iter().collect()
}

/// 1-WL color refinement from a uniform start.
///
/// Each round maps a node to the signature `(color, sorted neighbor colors)`;
/// distinct signatures are sorted and numbered in that order, so color ids
/// depend only on structure, never on node labels.
pub fn wl_refine(g: &Graph, max_rounds: usize) -> WLColoring {
    let n = g.num_nodes();
    let mut colors = vec![0u32; n];
    let mut classes = usize::from(n > 0);
    let mut rounds = 0;
    while rounds < max_rounds {
        let signatures: Vec<(u32, Vec<u32>)> = (0..n)
            .map(|v| {
                let mut nb: Vec<u32> = g.neighbors(v).iter().map(|&u| colors[u]).collect();
                nb.sort_unstable();
                (colors[v], nb)
            })
            .collect();
        let mut ids: BTreeMap<&(u32, Vec<u32>), u32> = BTreeMap::new();
        for sig in &signatures {
            ids.entry(sig).or_insert(0);
        }
        for (i, id) in ids.values_mut().enumerate() {
            *id = i as u32;
        }
        let next: Vec<u32> = signatures.iter().map(|s| ids[s]).collect();
        rounds += 1;
        let next_classes = ids.len();
        colors = next;
        if next_classes == classes {
            break;
        }
        classes = next_classes;
    }
    WLColoring { colors, rounds }
}

/// Whether 1-WL fails to tell `a` and `b` apart: refinement runs on the
/// disjoint union so both graphs share one color vocabulary.
pub fn wl_indistinguishable(a: &Graph, b: &Graph, max_rounds: usize) -> Result<bool> {
    let union = a.disjoint_union(b)?;
    let coloring = wl_refine(&union, max_rounds);
    let (ca, cb) = coloring.colors.split_at(a.num_nodes());
    Ok(color_histogram(ca) == color_histogram(cb))
}

/// Exact isomorphism test by backtracking. Intended for small fixtures.
pub fn are_isomorphic(a: &Graph, b: &Graph) -> bool {
    let n = a.num_nodes();
    if n != b.num_nodes() || a.num_edges() != b.num_edges() {
        return false;
    }
    let mut da: Vec<usize> = (0..n).map(|v| a.degree(v)).collect();
    let mut db: Vec<usize> = (0..n).map(|v| b.degree(v)).collect();
    da.sort_unstable();
    db.sort_unstable();
    if da != db {
        return false;
    }
    let mut map = vec![usize::MAX; n];
    let mut used = vec![false; n];
    extend_mapping(a, b, 0, &mut map, &mut used)
}

fn extend_mapping(a: &Graph, b: &Graph, v: usize, map: &mut [usize], used: &mut [bool]) -> bool {
    if v == a.num_nodes() {
        return true;
    }
    for w in 0..b.num_nodes() {
        if used[w] || a.degree(v) != b.degree(w) {
            continue;
        }
        let consistent = (0..v).all(|u| a.has_edge(u, v) == b.has_edge(map[u], w));
        if !consistent {
            continue;
        }
        map[v] = w;
        used[w] = true;
        if extend_mapping(a, b, v + 1, map, used) {
            return true;
        }
        used[w] = false;
    }
    map[v] = usize::MAX;
    false
}
