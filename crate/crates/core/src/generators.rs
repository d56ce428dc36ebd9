//! Small deterministic and seeded random graph families.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{GmnError, Result};
use crate::graph::Graph;

pub fn path(n: usize) -> Graph {
    let edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
    Graph::new(n, &edges).expect("path is simple")
}

pub fn cycle(n: usize) -> Graph {
    assert!(n >= 3, "cycle needs at least 3 nodes");
    let edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
    Graph::new(n, &edges).expect("cycle is simple")
}

pub fn complete(n: usize) -> Graph {
    let edges: Vec<_> = (0..n)
        .flat_map(|u| (u + 1..n).map(move |v| (u, v)))
        .collect();
    Graph::new(n, &edges).expect("complete graph is simple")
}

/// Star with center 0 and `leaves` leaves.
pub fn star(leaves: usize) -> Graph {
    let edges: Vec<_> = (1..=leaves).map(|v| (0, v)).collect();
    Graph::new(leaves + 1, &edges).expect("star is simple")
}

/// `K_{a,b}` with parts `0..a` and `a..a+b`.
pub fn complete_bipartite(a: usize, b: usize) -> Graph {
    let edges: Vec<_> = (0..a)
        .flat_map(|u| (a..a + b).map(move |v| (u, v)))
        .collect();
    Graph::new(a + b, &edges).expect("complete bipartite graph is simple")
}

/// Two triangles `{0,1,2}`, `{3,4,5}` joined by the matching `i — i+3`.
pub fn triangular_prism() -> Graph {
    Graph::new(
        6,
        &[(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5), (0, 3), (1, 4), (2, 5)],
    )
    .expect("prism is simple")
}

/// Random simple `d`-regular graph by stub pairing with restarts.
pub fn random_regular<R: Rng>(n: usize, d: usize, rng: &mut R) -> Result<Graph> {
    if !(n * d).is_multiple_of(2) || d >= n {
        return Err(GmnError::Config(format!("no simple {d}-regular graph on {n} nodes")));
    }
    for _ in 0..100 {
        if let Some(edges) = try_pair_stubs(n, d, rng) {
            return Graph::new(n, &edges);
        }
    }
    Err(GmnError::Config(format!(
        "failed to sample a {d}-regular graph on {n} nodes"
    )))
}

fn try_pair_stubs<R: Rng>(n: usize, d: usize, rng: &mut R) -> Option<Vec<(usize, usize)>> {
    let mut stubs: Vec<usize> = (0..n).flat_map(|v| std::iter::repeat_n(v, d)).collect();
    let mut adj: Vec<Vec<usize>> = vec![Vec::with_capacity(d); n];
    let mut edges = Vec::with_capacity(n * d / 2);
    while !stubs.is_empty() {
        let mut paired = false;
        for _ in 0..64 {
            let i = rng.gen_range(0..stubs.len());
            let j = rng.gen_range(0..stubs.len());
            let (u, v) = (stubs[i], stubs[j]);
            if i == j || u == v || adj[u].contains(&v) {
                continue;
            }
            adj[u].push(v);
            adj[v].push(u);
            edges.push((u, v));
            let (hi, lo) = (i.max(j), i.min(j));
            stubs.swap_remove(hi);
            stubs.swap_remove(lo);
            paired = true;
            break;
        }
        if !paired {
            return None;
        }
    }
    Some(edges)
}

/// Random simple graph on `n` nodes with every degree at most `max_degree`:
/// candidate edges are visited in random order and kept with probability
/// `p` when both endpoints still have capacity.
pub fn random_bounded_degree<R: Rng>(n: usize, max_degree: usize, p: f64, rng: &mut R) -> Graph {
    let mut candidates: Vec<(usize, usize)> = (0..n)
        .flat_map(|u| (u + 1..n).map(move |v| (u, v)))
        .collect();
    candidates.shuffle(rng);
    let mut deg = vec![0usize; n];
    let mut edges = Vec::new();
    for (u, v) in candidates {
        if deg[u] < max_degree && deg[v] < max_degree && rng.gen_bool(p) {
            deg[u] += 1;
            deg[v] += 1;
            edges.push((u, v));
        }
    }
    Graph::new(n, &edges).expect("generated graph is simple")
}

/// Erdős–Rényi `G(n, p)`.
pub fn gnp<R: Rng>(n: usize, p: f64, rng: &mut R) -> Graph {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.gen_bool(p) {
                edges.push((u, v));
            }
        }
    }
    Graph::new(n, &edges).expect("generated graph is simple")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn random_regular_is_regular() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in [10, 50, 1000] {
            let g = random_regular(n, 4, &mut rng).unwrap();
            assert_eq!(g.num_edges(), 2 * n);
            assert!((0..n).all(|v| g.degree(v) == 4));
        }
        assert!(random_regular(5, 3, &mut rng).is_err());
    }

    #[test]
    fn bounded_degree_respects_cap() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_bounded_degree(20, 4, 0.5, &mut rng);
        assert!((0..20).all(|v| g.degree(v) <= 4));
    }

    #[test]
    fn fixtures_have_expected_shape() {
        assert_eq!(star(4).degree(0), 4);
        assert_eq!(complete_bipartite(3, 3).num_edges(), 9);
        let prism = triangular_prism();
        assert!((0..6).all(|v| prism.degree(v) == 3));
    }
}
