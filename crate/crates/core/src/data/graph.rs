use std::collections::{BTreeSet, VecDeque};
use std::path::Path;
use std::sync::Arc;

use serde::Deserialize;

use crate::autodiff::Mask;
use crate::data::{check_header, csv_error, open_csv};
use crate::error::{PagError, Result};

/// Undirected zone adjacency. Edges never contain self-loops; the attention
/// neighbourhood of a zone (see [`ZoneGraph::neighborhood`]) includes the zone itself.
#[derive(Clone, Debug, PartialEq)]
pub struct ZoneGraph {
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
}

impl ZoneGraph {
    /// Builds a graph over zones `0..n`. Duplicate and reversed edges collapse.
    pub fn new(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if n == 0 {
            return Err(PagError::Graph("graph has no zones".into()));
        }
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a >= n || b >= n {
                return Err(PagError::Graph(format!(
                    "edge ({a},{b}) references unknown zone (n = {n})"
                )));
            }
            if a == b {
                return Err(PagError::Graph(format!("self-loop on zone {a}")));
            }
            set.insert((a.min(b), a.max(b)));
        }
        let mut neighbors = vec![Vec::new(); n];
        for &(a, b) in &set {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        neighbors.iter_mut().for_each(|v| v.sort_unstable());
        Ok(ZoneGraph {
            edges: set.into_iter().collect(),
            neighbors,
        })
    }

    pub fn num_zones(&self) -> usize {
        self.neighbors.len()
    }

    /// Undirected edges as `(low, high)` pairs.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Adjacent zones, excluding `i`.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    /// Attention neighbourhood: `i` and its adjacent zones, ascending.
    pub fn neighborhood(&self, i: usize) -> Vec<usize> {
        let mut v = self.neighbors[i].clone();
        let pos = v.partition_point(|&j| j < i);
        v.insert(pos, i);
        v
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].binary_search(&j).is_ok()
    }

    /// Breadth-first hop distances from `src`; `None` when unreachable.
    pub fn hop_distances(&self, src: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.num_zones()];
        dist[src] = Some(0);
        let mut queue = VecDeque::from([src]);
        while let Some(u) = queue.pop_front() {
            let d = dist[u].unwrap();
            for &v in &self.neighbors[u] {
                if dist[v].is_none() {
                    dist[v] = Some(d + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    pub fn hop_distance(&self, i: usize, j: usize) -> Option<usize> {
        self.hop_distances(i)[j]
    }

    /// Softmax mask allowing exactly the attention neighbourhoods.
    pub fn attention_mask(&self) -> Arc<Mask> {
        let n = self.num_zones();
        let mut allowed = vec![false; n * n];
        for i in 0..n {
            allowed[i * n + i] = true;
            for &j in &self.neighbors[i] {
                allowed[i * n + j] = true;
            }
        }
        Arc::new(Mask::new(n, n, allowed).expect("square mask"))
    }

    /// Relabels zones so that old zone `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        ZoneGraph::new(
            self.num_zones(),
            self.edges.iter().map(|&(a, b)| (perm[a], perm[b])),
        )
    }

    pub fn write_csv(&self, nodes_path: &Path, edges_path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(nodes_path).map_err(|e| csv_error(nodes_path, e))?;
        w.write_record(["zone_id"]).map_err(|e| csv_error(nodes_path, e))?;
        for i in 0..self.num_zones() {
            w.write_record([i.to_string()]).map_err(|e| csv_error(nodes_path, e))?;
        }
        w.flush().map_err(|e| PagError::io(nodes_path, e))?;

        let mut w = csv::Writer::from_path(edges_path).map_err(|e| csv_error(edges_path, e))?;
        w.write_record(["src", "dst"]).map_err(|e| csv_error(edges_path, e))?;
        for &(a, b) in &self.edges {
            w.write_record([a.to_string(), b.to_string()])
                .map_err(|e| csv_error(edges_path, e))?;
        }
        w.flush().map_err(|e| PagError::io(edges_path, e))?;
        Ok(())
    }
}

#[derive(Deserialize)]
struct NodeRow {
    zone_id: usize,
}

#[derive(Deserialize)]
struct EdgeRow {
    src: usize,
    dst: usize,
}

/// Reads the `zone_id` nodes file and `src,dst` edges file.
pub fn load_graph(nodes_path: &Path, edges_path: &Path) -> Result<ZoneGraph> {
    let mut reader = open_csv(nodes_path)?;
    check_header(nodes_path, &mut reader, &["zone_id"])?;
    let mut ids = Vec::new();
    for row in reader.deserialize::<NodeRow>() {
        ids.push(row.map_err(|e| csv_error(nodes_path, e))?.zone_id);
    }
    if ids.is_empty() {
        return Err(PagError::Graph(format!("{}: no zones", nodes_path.display())));
    }
    ids.sort_unstable();
    if ids.iter().enumerate().any(|(k, &id)| k != id) {
        return Err(csv_error(
            nodes_path,
            "zone ids must be the contiguous integers 0..N-1",
        ));
    }
    let n = ids.len();

    let mut reader = open_csv(edges_path)?;
    check_header(edges_path, &mut reader, &["src", "dst"])?;
    let mut edges = Vec::new();
    for row in reader.deserialize::<EdgeRow>() {
        let row = row.map_err(|e| csv_error(edges_path, e))?;
        edges.push((row.src, row.dst));
    }
    ZoneGraph::new(n, edges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn path_graph_neighborhoods_include_self() {
        let g = ZoneGraph::new(3, [(0, 1), (1, 2)]).unwrap();
        assert_eq!(g.neighborhood(0), vec![0, 1]);
        assert_eq!(g.neighborhood(1), vec![0, 1, 2]);
        assert_eq!(g.neighborhood(2), vec![1, 2]);
        assert_eq!(g.hop_distance(0, 2), Some(2));
    }

    #[test]
    fn duplicates_and_reversed_edges_collapse() {
        let g = ZoneGraph::new(3, [(0, 1), (1, 0), (0, 1), (2, 1)]).unwrap();
        assert_eq!(g.edges(), &[(0, 1), (1, 2)]);
    }

    #[test]
    fn rejects_unknown_zone_and_self_loop() {
        assert!(ZoneGraph::new(3, [(0, 99)]).is_err());
        assert!(ZoneGraph::new(3, [(1, 1)]).is_err());
        assert!(ZoneGraph::new(0, []).is_err());
    }

    #[test]
    fn loads_csv_pair() {
        let dir = tempfile::tempdir().unwrap();
        let nodes = dir.path().join("nodes.csv");
        let edges = dir.path().join("edges.csv");
        std::fs::write(&nodes, "zone_id\n0\n1\n2\n").unwrap();
        let mut f = std::fs::File::create(&edges).unwrap();
        writeln!(f, "src,dst\n0,1\n1,2\n2,1").unwrap();
        let g = load_graph(&nodes, &edges).unwrap();
        assert_eq!(g.num_zones(), 3);
        assert_eq!(g.edges().len(), 2);

        std::fs::write(&edges, "src,dst\n0,99\n").unwrap();
        assert!(load_graph(&nodes, &edges).is_err());
    }

    #[test]
    fn missing_file_names_path() {
        let err = load_graph(Path::new("/nonexistent/nodes.csv"), Path::new("e.csv")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/nodes.csv"));
    }
}
