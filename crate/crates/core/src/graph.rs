//! Token graphs built from dependency arcs, and block-diagonal batching.

use std::collections::BTreeSet;

use crate::data::{EmbeddingBundle, EssayRecord, ROOT_HEAD};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Undirected token graph in COO form.
///
/// `edges` holds `(src, dst)` pairs, sorted and free of duplicates; every
/// arc appears in both directions and every node carries a self-loop.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGraph {
    pub num_nodes: usize,
    pub edges: Vec<(usize, usize)>,
    /// `num_nodes x d`.
    pub node_features: Tensor,
}

impl TokenGraph {
    /// Builds a graph from arbitrary arcs, symmetrizing, adding self-loops
    /// and deduplicating.
    pub fn from_arcs(
        num_nodes: usize,
        arcs: impl IntoIterator<Item = (usize, usize)>,
        node_features: Tensor,
    ) -> Result<Self> {
        if node_features.rows() != num_nodes || node_features.shape().len() != 2 {
            return Err(Error::shape(format!(
                "feature matrix {:?} does not match {num_nodes} nodes",
                node_features.shape()
            )));
        }
        let mut set = BTreeSet::new();
        for (a, b) in arcs {
            if a >= num_nodes || b >= num_nodes {
                return Err(Error::invalid(format!(
                    "arc ({a}, {b}) out of range for {num_nodes} nodes"
                )));
            }
            set.insert((a, b));
            set.insert((b, a));
        }
        set.extend((0..num_nodes).map(|i| (i, i)));
        Ok(TokenGraph {
            num_nodes,
            edges: set.into_iter().collect(),
            node_features,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.node_features.cols()
    }

    pub fn is_symmetric(&self) -> bool {
        let set: BTreeSet<_> = self.edges.iter().copied().collect();
        self.edges.iter().all(|&(a, b)| set.contains(&(b, a)))
    }

    pub fn has_self_loops(&self) -> bool {
        let set: BTreeSet<_> = self.edges.iter().copied().collect();
        (0..self.num_nodes).all(|i| set.contains(&(i, i)))
    }
}

/// Builds the undirected, self-looped dependency graph of one essay.
///
/// Root arcs (head `-1`) contribute no edge. Dependency labels are not part
/// of the record, so only connectivity survives.
pub fn build_graph(record: &EssayRecord, bundle: &EmbeddingBundle) -> Result<TokenGraph> {
    let n = record.tokens.len();
    if bundle.token_count() != n {
        return Err(Error::invalid(format!(
            "essay {:?}: row count {} ≠ token count {n}",
            record.id,
            bundle.token_count()
        )));
    }
    let mut arcs = Vec::with_capacity(record.deps.len());
    for &(head, dep) in &record.deps {
        if head == ROOT_HEAD {
            continue;
        }
        if head < 0 || dep < 0 || head as usize >= n || dep as usize >= n {
            return Err(Error::invalid(format!(
                "essay {:?}: arc ({head}, {dep}) out of range",
                record.id
            )));
        }
        arcs.push((head as usize, dep as usize));
    }
    TokenGraph::from_arcs(n, arcs, bundle.token_matrix.clone())
}

/// Several graphs merged into one block-diagonal graph.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphBatch {
    pub graph: TokenGraph,
    /// Source graph of every merged node; non-decreasing.
    pub segment_ids: Vec<usize>,
    /// First merged node index of each graph.
    pub offsets: Vec<usize>,
}

impl GraphBatch {
    pub fn num_graphs(&self) -> usize {
        self.offsets.len()
    }

    /// Node count of graph `g`.
    pub fn graph_size(&self, g: usize) -> usize {
        let end = self
            .offsets
            .get(g + 1)
            .copied()
            .unwrap_or(self.graph.num_nodes);
        end - self.offsets[g]
    }

    /// Splits the batch back into its source graphs.
    pub fn unbatch(&self) -> Vec<TokenGraph> {
        let d = self.graph.feature_dim();
        let mut per_graph: Vec<Vec<(usize, usize)>> = vec![Vec::new(); self.num_graphs()];
        for &(a, b) in &self.graph.edges {
            let g = self.segment_ids[a];
            let off = self.offsets[g];
            per_graph[g].push((a - off, b - off));
        }
        per_graph
            .into_iter()
            .enumerate()
            .map(|(g, edges)| {
                let off = self.offsets[g];
                let n = self.graph_size(g);
                let feats = self.graph.node_features.data()[off * d..(off + n) * d].to_vec();
                TokenGraph {
                    num_nodes: n,
                    edges,
                    node_features: Tensor::matrix(n, d, feats).expect("slice sized n*d"),
                }
            })
            .collect()
    }
}

/// Merges graphs into one block-diagonal batch, shifting node indices of
/// graph `g` by the total size of the graphs before it.
pub fn batch_graphs(graphs: &[&TokenGraph]) -> Result<GraphBatch> {
    let first = graphs
        .first()
        .ok_or_else(|| Error::arg("cannot batch an empty list of graphs"))?;
    let d = first.feature_dim();
    let total: usize = graphs.iter().map(|g| g.num_nodes).sum();
    let mut edges = Vec::with_capacity(graphs.iter().map(|g| g.edges.len()).sum());
    let mut features = Vec::with_capacity(total * d);
    let mut segment_ids = Vec::with_capacity(total);
    let mut offsets = Vec::with_capacity(graphs.len());
    let mut offset = 0;
    for (gi, g) in graphs.iter().enumerate() {
        if g.feature_dim() != d {
            return Err(Error::shape(format!(
                "graph {gi} has feature width {}, expected {d}",
                g.feature_dim()
            )));
        }
        offsets.push(offset);
        edges.extend(g.edges.iter().map(|&(a, b)| (a + offset, b + offset)));
        features.extend_from_slice(g.node_features.data());
        segment_ids.extend(std::iter::repeat_n(gi, g.num_nodes));
        offset += g.num_nodes;
    }
    Ok(GraphBatch {
        graph: TokenGraph {
            num_nodes: total,
            edges,
            node_features: Tensor::matrix(total, d, features)?,
        },
        segment_ids,
        offsets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TraitScores;
    use proptest::prelude::*;

    fn record(tokens: usize, deps: Vec<(i64, i64)>) -> (EssayRecord, EmbeddingBundle) {
        let rec = EssayRecord {
            id: "r".into(),
            tokens: (0..tokens).map(|i| format!("w{i}")).collect(),
            sentence_spans: vec![(0, tokens)],
            deps,
            gold: Some(TraitScores([3.0; 6])),
        };
        let bundle = EmbeddingBundle {
            essay_id: "r".into(),
            essay_vec: vec![0.0; 2],
            token_matrix: Tensor::zeros(vec![tokens, 2]),
        };
        (rec, bundle)
    }

    #[test]
    fn three_token_chain() {
        let (rec, b) = record(3, vec![(1, 0), (2, 1), (-1, 2)]);
        let g = build_graph(&rec, &b).unwrap();
        assert_eq!(
            g.edges,
            vec![(0, 0), (0, 1), (1, 0), (1, 1), (1, 2), (2, 1), (2, 2)]
        );
    }

    #[test]
    fn single_token_has_only_self_loop() {
        let (rec, b) = record(1, vec![(-1, 0)]);
        assert_eq!(build_graph(&rec, &b).unwrap().edges, vec![(0, 0)]);
    }

    #[test]
    fn duplicate_arcs_collapse() {
        let (rec, b) = record(3, vec![(1, 0), (2, 1), (-1, 2)]);
        let (dup, _) = record(3, vec![(1, 0), (1, 0), (2, 1), (-1, 2)]);
        assert_eq!(
            build_graph(&rec, &b).unwrap().edges,
            build_graph(&dup, &b).unwrap().edges
        );
    }

    #[test]
    fn inconsistent_inputs_fail() {
        let (rec, b) = record(3, vec![(7, 0)]);
        assert!(build_graph(&rec, &b).is_err());
        let (rec, _) = record(3, vec![(1, 0)]);
        let (_, short) = record(2, vec![]);
        assert!(build_graph(&rec, &short).is_err());
    }

    fn self_loop_graph(n: usize, d: usize) -> TokenGraph {
        TokenGraph::from_arcs(n, [], Tensor::zeros(vec![n, d])).unwrap()
    }

    #[test]
    fn batching_offsets_and_segments() {
        let a = self_loop_graph(2, 3);
        let b = self_loop_graph(3, 3);
        let batch = batch_graphs(&[&a, &b]).unwrap();
        assert_eq!(batch.offsets, vec![0, 2]);
        assert_eq!(batch.segment_ids, vec![0, 0, 1, 1, 1]);

        let single = batch_graphs(&[&a]).unwrap();
        assert_eq!(single.offsets, vec![0]);
        assert_eq!(single.graph, a);

        let one = self_loop_graph(1, 3);
        let pair = batch_graphs(&[&one, &one]).unwrap();
        assert_eq!(pair.graph.edges, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn batching_rejects_mixed_width_and_empty() {
        let a = self_loop_graph(2, 3);
        let b = self_loop_graph(2, 4);
        assert!(batch_graphs(&[&a, &b]).is_err());
        assert!(batch_graphs(&[]).is_err());
    }

    /// Random recursive tree over `n` nodes: node k > 0 attaches to a
    /// uniformly chosen earlier node.
    fn tree_strategy() -> impl Strategy<Value = (usize, Vec<(i64, i64)>)> {
        (1usize..25).prop_flat_map(|n| {
            proptest::collection::vec(any::<prop::sample::Index>(), n - 1).prop_map(move |picks| {
                let mut deps = vec![(-1i64, 0i64)];
                for (k, p) in picks.iter().enumerate() {
                    let child = k + 1;
                    deps.push((p.index(child) as i64, child as i64));
                }
                (n, deps)
            })
        })
    }

    proptest! {
        #[test]
        fn tree_graph_invariants((n, deps) in tree_strategy()) {
            let (rec, b) = record(n, deps);
            let g = build_graph(&rec, &b).unwrap();
            prop_assert_eq!(g.num_nodes, n);
            prop_assert!(g.is_symmetric());
            prop_assert!(g.has_self_loops());
            prop_assert!(g.edges.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(g.edges.iter().all(|&(a, b)| a < n && b < n));
            prop_assert_eq!(g.edges.len(), 2 * (n - 1) + n);
        }

        #[test]
        fn unbatch_recovers_graphs(trees in proptest::collection::vec(tree_strategy(), 1..5)) {
            let graphs: Vec<TokenGraph> = trees
                .into_iter()
                .map(|(n, deps)| {
                    let (rec, mut b) = record(n, deps);
                    b.token_matrix = Tensor::matrix(n, 2, (0..2 * n).map(|x| x as f64).collect()).unwrap();
                    build_graph(&rec, &b).unwrap()
                })
                .collect();
            let refs: Vec<&TokenGraph> = graphs.iter().collect();
            let batch = batch_graphs(&refs).unwrap();
            prop_assert!(batch.segment_ids.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(batch
                .graph
                .edges
                .iter()
                .all(|&(a, b)| batch.segment_ids[a] == batch.segment_ids[b]));
            prop_assert_eq!(batch.unbatch(), graphs);
        }
    }
}
