//! Undirected attributed graphs, the on-disk dataset format, open-set splits
//! and a stochastic-block-model generator.

mod io;
mod split;
mod synth;

pub use io::{load_graph, write_graph, Manifest};
pub use split::{make_openset_split, make_openset_split_with, default_id_classes, OpenSetSplit, SplitRatios};
pub use synth::{synth_sbm, SbmParams};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// An immutable undirected graph with node features and optional labels.
///
/// Edges are stored once as `(i, j)` with `i < j`; self-loops are rejected
/// and duplicates collapse. The neighbor index is a CSR layout with sorted
/// neighbor lists.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    features: Matrix,
    edges: Vec<(usize, usize)>,
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
    labels: Option<Vec<usize>>,
    num_classes: usize,
}

impl Graph {
    /// Build a graph. `num_classes` is the total class count of the label
    /// space, or 0 when unlabeled.
    pub fn new(
        features: Matrix,
        edges: impl IntoIterator<Item = (usize, usize)>,
        labels: Option<Vec<usize>>,
        num_classes: usize,
    ) -> Result<Self> {
        let n = features.rows();
        let mut canon = Vec::new();
        for (a, b) in edges {
            for id in [a, b] {
                if id >= n {
                    return Err(Error::NodeOutOfRange { id, num_nodes: n });
                }
            }
            if a == b {
                return Err(Error::SelfLoop(a));
            }
            canon.push((a.min(b), a.max(b)));
        }
        canon.sort_unstable();
        canon.dedup();

        if let Some(l) = &labels {
            if l.len() != n {
                return Err(crate::error::invalid(format!("{} labels for {} nodes", l.len(), n)));
            }
            if let Some(&bad) = l.iter().find(|&&y| y >= num_classes) {
                return Err(crate::error::invalid(format!(
                    "label {bad} outside [0, {num_classes})"
                )));
            }
        }

        let mut degree = vec![0usize; n];
        for &(a, b) in &canon {
            degree[a] += 1;
            degree[b] += 1;
        }
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        for d in &degree {
            offsets.push(offsets.last().unwrap() + d);
        }
        let mut fill = offsets[..n].to_vec();
        let mut neighbors = vec![0; offsets[n]];
        for &(a, b) in &canon {
            neighbors[fill[a]] = b;
            fill[a] += 1;
            neighbors[fill[b]] = a;
            fill[b] += 1;
        }
        for i in 0..n {
            neighbors[offsets[i]..offsets[i + 1]].sort_unstable();
        }

        Ok(Self { features, edges: canon, offsets, neighbors, labels, num_classes })
    }

    pub fn num_nodes(&self) -> usize {
        self.features.rows()
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    /// Undirected edges, each once, as `(low, high)` in sorted order.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Sorted first-order neighbors of `i`.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Neighbor index as parallel `(center, neighbor)` arrays sorted by center.
    pub fn neighbor_pairs(&self) -> (Vec<usize>, Vec<usize>) {
        let mut centers = Vec::with_capacity(self.neighbors.len());
        for i in 0..self.num_nodes() {
            centers.extend(std::iter::repeat_n(i, self.degree(i)));
        }
        (centers, self.neighbors.clone())
    }

    /// Relabel nodes: node `i` of `self` becomes node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Graph> {
        let n = self.num_nodes();
        if perm.len() != n {
            return Err(crate::error::invalid("permutation length mismatch"));
        }
        let mut feats = Matrix::zeros(n, self.num_features());
        for (i, &p) in perm.iter().enumerate() {
            feats.row_mut(p).copy_from_slice(self.features.row(i));
        }
        let labels = self.labels.as_ref().map(|l| {
            let mut out = vec![0; n];
            for (i, &p) in perm.iter().enumerate() {
                out[p] = l[i];
            }
            out
        });
        let edges = self.edges.iter().map(|&(a, b)| (perm[a], perm[b]));
        Graph::new(feats, edges, labels, self.num_classes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path3() -> Graph {
        Graph::new(Matrix::zeros(3, 1), [(0, 1), (1, 2)], None, 0).unwrap()
    }

    #[test]
    fn neighbor_index_of_path() {
        let g = path3();
        assert_eq!(g.neighbors(0), &[1]);
        assert_eq!(g.neighbors(1), &[0, 2]);
        assert_eq!(g.neighbors(2), &[1]);
    }

    #[test]
    fn duplicates_and_reversed_duplicates_collapse() {
        let g = Graph::new(Matrix::zeros(3, 1), [(0, 1), (0, 1), (1, 0)], None, 0).unwrap();
        assert_eq!(g.edges(), &[(0, 1)]);
        assert_eq!(g.neighbors(1), &[0]);
    }

    #[test]
    fn rejects_bad_edges() {
        assert!(matches!(
            Graph::new(Matrix::zeros(3, 1), [(5, 0)], None, 0),
            Err(Error::NodeOutOfRange { id: 5, num_nodes: 3 })
        ));
        assert!(matches!(Graph::new(Matrix::zeros(3, 1), [(2, 2)], None, 0), Err(Error::SelfLoop(2))));
    }

    #[test]
    fn rejects_labels_out_of_range() {
        assert!(Graph::new(Matrix::zeros(2, 1), [], Some(vec![0, 3]), 3).is_err());
    }

    #[test]
    fn neighbor_index_is_symmetric() {
        let g = Graph::new(Matrix::zeros(5, 1), [(0, 4), (3, 1), (2, 4), (1, 4)], None, 0).unwrap();
        for i in 0..5 {
            for &j in g.neighbors(i) {
                assert!(g.neighbors(j).contains(&i));
            }
        }
    }
}
