//! Multi-graph datasets: file IO and the synthetic tasks used for
//! desk-scale training runs.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GmnError, Result};
use crate::generators;
use crate::graph::{parse_edgelist, Graph, GraphJson, Labels};
use crate::tensor::Matrix;

#[derive(Serialize, Deserialize)]
struct DatasetJson {
    graphs: Vec<GraphJson>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum AnyJson {
    Wrapped(DatasetJson),
    List(Vec<GraphJson>),
    Single(GraphJson),
}

/// Parses `{"graphs": [...]}`, a bare list of graphs, or one graph.
pub fn parse_dataset_json(text: &str) -> Result<Vec<Graph>> {
    let raw: AnyJson =
        serde_json::from_str(text).map_err(|e| GmnError::Parse(format!("dataset json: {e}")))?;
    let list = match raw {
        AnyJson::Wrapped(d) => d.graphs,
        AnyJson::List(l) => l,
        AnyJson::Single(g) => vec![g],
    };
    list.into_iter().map(Graph::try_from).collect()
}

/// JSON datasets by default; `.edgelist`/`.txt` files hold a single graph.
pub fn load_dataset(path: &Path) -> Result<Vec<Graph>> {
    let text = std::fs::read_to_string(path).map_err(|source| GmnError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("edgelist") | Some("txt") => Ok(vec![parse_edgelist(&text)?]),
        _ => parse_dataset_json(&text),
    }
}

pub fn dataset_to_json(graphs: &[Graph]) -> String {
    let doc = DatasetJson {
        graphs: graphs.iter().map(Graph::to_json).collect(),
    };
    serde_json::to_string(&doc).expect("dataset serializes")
}

pub fn save_dataset(graphs: &[Graph], path: &Path) -> Result<()> {
    std::fs::write(path, dataset_to_json(graphs)).map_err(|source| GmnError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Cycles (label 1) and paths (label 0) on `k ∈ [k_min, k_max]` nodes with
/// constant features, alternating labels, in seeded order.
pub fn cycles_vs_paths(count: usize, k_min: usize, k_max: usize, seed: u64) -> Vec<Graph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut graphs: Vec<Graph> = (0..count)
        .map(|i| {
            let k = rng.gen_range(k_min..=k_max);
            let (g, label) = if i % 2 == 0 {
                (generators::cycle(k), 1.0)
            } else {
                (generators::path(k), 0.0)
            };
            g.with_labels(Labels::Graph(label)).expect("graph label")
        })
        .collect();
    graphs.shuffle(&mut rng);
    graphs
}

/// Random graphs whose node labels are `degree mod 2`, with one-hot degree
/// features up to `max_degree`.
pub fn degree_parity(count: usize, n: usize, max_degree: usize, seed: u64) -> Vec<Graph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let g = generators::random_bounded_degree(n, max_degree, 0.15, &mut rng);
            let mut x = Matrix::zeros(n, max_degree + 1);
            for v in 0..n {
                x.set(v, g.degree(v), 1.0);
            }
            let labels = (0..n).map(|v| (g.degree(v) % 2) as i64).collect();
            g.with_node_features(x)
                .and_then(|g| g.with_labels(Labels::Nodes(labels)))
                .expect("features and labels fit")
        })
        .collect()
}
