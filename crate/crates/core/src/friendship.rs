//! Per-step graph encoder: a two-layer tensor-based GCN, attention over
//! friends, and the per-category graph embedding.
//!
//! Node embeddings are `nodes × (K·d′)` matrices whose column block `k` holds
//! the category-`k` embedding of every node.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::BlockLinear;
use crate::domain::UserGraph;
use crate::error::{FateError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Elu,
    Identity,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Elu => tape.elu(x),
            Activation::Identity => x,
        }
    }
}

/// Weights of one graph-convolution layer. Block-diagonal weights give the
/// tensor-based layer; dense weights give a vanilla GCN layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TgcnLayerParams {
    pub weights: BlockLinear,
}

impl TgcnLayerParams {
    pub fn tensor<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        in_dims: &[usize],
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            weights: BlockLinear::blocks(store, prefix, in_dims, out_dim, rng),
        }
    }

    pub fn vanilla<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        in_dims: &[usize],
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            weights: BlockLinear::dense(store, prefix, in_dims, out_dim, rng),
        }
    }
}

/// `activation(Â · X · W)` with `W` block-diagonal for the tensor layer.
pub fn tgcn_layer(
    tape: &mut Tape,
    x: Var,
    adjacency: Var,
    params: &TgcnLayerParams,
    activation: Activation,
) -> Result<Var> {
    let (nr, nc) = tape.shape(adjacency);
    let rows = tape.shape(x).0;
    if nr != nc || nr != rows {
        return Err(FateError::Shape(format!(
            "adjacency {nr}×{nc} does not match {rows} node rows"
        )));
    }
    let propagated = tape.matmul(adjacency, x);
    let linear = params.weights.apply(tape, propagated)?;
    Ok(activation.apply(tape, linear))
}

/// Two stacked layers with ELU on the graph's normalized adjacency.
pub fn tgcn_forward(
    tape: &mut Tape,
    graph: &UserGraph,
    layers: &[TgcnLayerParams; 2],
) -> Result<Var> {
    let adjacency = tape.constant(graph.adjacency.clone());
    let x = tape.constant(graph.node_features.clone());
    let hidden = tgcn_layer(tape, x, adjacency, &layers[0], Activation::Elu)?;
    tgcn_layer(tape, hidden, adjacency, &layers[1], Activation::Elu)
}

/// One-hidden-layer perceptron scoring each friend from its flattened
/// embedding and, optionally, its edge features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FriendScorer {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub embed_width: usize,
    pub edge_dim: usize,
    pub use_edges: bool,
}

impl FriendScorer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        embed_width: usize,
        edge_dim: usize,
        use_edges: bool,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let input = embed_width + if use_edges { edge_dim } else { 0 };
        Self {
            w1: store.insert_glorot(format!("{prefix}.w1"), input, hidden, rng),
            b1: store.insert_zeros(format!("{prefix}.b1"), 1, hidden),
            w2: store.insert_glorot(format!("{prefix}.w2"), hidden, 1, rng),
            b2: store.insert_zeros(format!("{prefix}.b2"), 1, 1),
            embed_width,
            edge_dim,
            use_edges,
        }
    }

    /// Raw scores `φ(x̃^v ⊕ e^v)` as a `friends × 1` column.
    pub fn scores(&self, tape: &mut Tape, friend_embeddings: Var, edges: Var) -> Result<Var> {
        let (n, w) = tape.shape(friend_embeddings);
        if w != self.embed_width {
            return Err(FateError::Shape(format!(
                "friend embeddings have width {w}, scorer expects {}",
                self.embed_width
            )));
        }
        let input = if self.use_edges {
            let (en, ew) = tape.shape(edges);
            if en != n || ew != self.edge_dim {
                return Err(FateError::Shape(format!(
                    "edge features {en}×{ew}, expected {n}×{}",
                    self.edge_dim
                )));
            }
            tape.concat_cols(&[friend_embeddings, edges])
        } else {
            friend_embeddings
        };
        let w1 = tape.param(self.w1);
        let b1 = tape.param(self.b1);
        let w2 = tape.param(self.w2);
        let b2 = tape.param(self.b2);
        let h = tape.matmul(input, w1);
        let h = tape.add_row_bias(h, b1);
        let h = tape.elu(h);
        let s = tape.matmul(h, w2);
        Ok(tape.add_row_bias(s, b2))
    }
}

/// Softmax over the ego's friends (rows `1..` of `x_tilde`). Returns `None`
/// for an ego without friends.
pub fn friendship_attention(
    tape: &mut Tape,
    x_tilde: Var,
    edge_features: Var,
    scorer: &FriendScorer,
) -> Result<Option<Var>> {
    let nodes = tape.shape(x_tilde).0;
    if nodes <= 1 {
        return Ok(None);
    }
    let width = tape.shape(x_tilde).1;
    let friends = tape.slice_rows(x_tilde, 1, nodes - 1);
    debug_assert_eq!(width, scorer.embed_width);
    let scores = scorer.scores(tape, friends, edge_features)?;
    Ok(Some(tape.softmax_cols(scores)))
}

/// `g = [x̃_1^u ⊕ x̂_1, …, x̃_K^u ⊕ x̂_K]` as a `1 × (K·2d′)` row, where
/// `x̂ = Σ_v α_v x̃^v` and `x̂ = 0` without friends.
pub fn graph_embedding(
    tape: &mut Tape,
    x_tilde: Var,
    alpha: Option<Var>,
    ego_index: usize,
    k: usize,
) -> Result<Var> {
    let (nodes, width) = tape.shape(x_tilde);
    if ego_index != 0 {
        return Err(FateError::Shape("ego must be node 0".into()));
    }
    if width % k != 0 {
        return Err(FateError::Shape(format!(
            "embedding width {width} is not a multiple of K={k}"
        )));
    }
    let ego = tape.slice_rows(x_tilde, 0, 1);
    let aggregate = match alpha {
        Some(a) => {
            let n = tape.shape(a).0;
            if n != nodes - 1 {
                return Err(FateError::Shape(format!(
                    "{n} attention weights for {} friends",
                    nodes - 1
                )));
            }
            let friends = tape.slice_rows(x_tilde, 1, n);
            tape.block_weighted_sum(a, friends)
        }
        None => tape.constant(Array2::zeros((1, width))),
    };
    Ok(tape.concat_blocks(&[ego, aggregate], k))
}

/// Graph encoder of one time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FriendshipModule {
    pub layers: [TgcnLayerParams; 2],
    pub scorer: FriendScorer,
    pub k: usize,
}

pub struct StepEncoding {
    pub embedding: Var,
    pub alpha: Option<Var>,
}

impl FriendshipModule {
    pub fn encode(&self, tape: &mut Tape, graph: &UserGraph) -> Result<StepEncoding> {
        let x_tilde = tgcn_forward(tape, graph, &self.layers)?;
        let edges = tape.constant(graph.edge_features.clone());
        let alpha = friendship_attention(tape, x_tilde, edges, &self.scorer)?;
        let embedding = graph_embedding(tape, x_tilde, alpha, graph.ego, self.k)?;
        Ok(StepEncoding { embedding, alpha })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::normalize_adjacency;
    use crate::gradcheck::check_gradients;
    use ndarray::{array, s};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    fn elu(x: f64) -> f64 {
        if x > 0.0 {
            x
        } else {
            x.exp_m1()
        }
    }

    /// Plain-loop vanilla GCN layer: `elu(Σ_w Â[v,w] X[w,:] W)`.
    fn vanilla_gcn(adj: &Array2<f64>, x: &Array2<f64>, w: &Array2<f64>) -> Array2<f64> {
        let n = adj.nrows();
        let mut out = Array2::zeros((n, w.ncols()));
        for v in 0..n {
            for o in 0..w.ncols() {
                let mut acc = 0.0;
                for u in 0..n {
                    for i in 0..x.ncols() {
                        acc += adj[[v, u]] * x[[u, i]] * w[[i, o]];
                    }
                }
                out[[v, o]] = elu(acc);
            }
        }
        out
    }

    fn random_graph(rng: &mut ChaCha8Rng, n: usize) -> Array2<f64> {
        let mut raw = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..i {
                if i == j + 1 || rng.random_bool(0.4) {
                    raw[[i, j]] = 1.0;
                    raw[[j, i]] = 1.0;
                }
            }
        }
        normalize_adjacency(&raw).unwrap()
    }

    fn run_layer(
        store: &ParamStore,
        layer: &TgcnLayerParams,
        x: &Array2<f64>,
        adj: &Array2<f64>,
    ) -> Array2<f64> {
        let mut t = Tape::new(store);
        let xv = t.constant(x.clone());
        let av = t.constant(adj.clone());
        let out = tgcn_layer(&mut t, xv, av, layer, Activation::Elu).unwrap();
        t.value(out).to_owned()
    }

    #[test]
    fn zero_features_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let layer = TgcnLayerParams::tensor(&mut store, "l", &[2, 1], 3, &mut rng);
        let adj = random_graph(&mut rng, 4);
        let out = run_layer(&store, &layer, &Array2::zeros((4, 3)), &adj);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_category_is_vanilla_gcn() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let layer = TgcnLayerParams::tensor(&mut store, "l", &[3], 4, &mut rng);
        let adj = random_graph(&mut rng, 5);
        let x = rand_mat(&mut rng, 5, 3);
        let out = run_layer(&store, &layer, &x, &adj);
        let w = store.value(store.get("l.0").unwrap());
        let oracle = vanilla_gcn(&adj, &x, w);
        for (a, b) in out.iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tensor_layer_equals_parallel_vanilla_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let layer = TgcnLayerParams::tensor(&mut store, "l", &[2, 2], 3, &mut rng);
        let adj = random_graph(&mut rng, 3);
        let x = rand_mat(&mut rng, 3, 4);
        let out = run_layer(&store, &layer, &x, &adj);
        for k in 0..2 {
            let xk = x.slice(s![.., 2 * k..2 * k + 2]).to_owned();
            let wk = store.value(store.get(&format!("l.{k}")).unwrap());
            let oracle = vanilla_gcn(&adj, &xk, wk);
            let got = out.slice(s![.., 3 * k..3 * k + 3]);
            for (a, b) in got.iter().zip(oracle.iter()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn layer_rejects_mismatched_adjacency() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let layer = TgcnLayerParams::tensor(&mut store, "l", &[1, 1], 2, &mut rng);
        let mut t = Tape::new(&store);
        let x = t.constant(Array2::zeros((3, 2)));
        let a = t.constant(Array2::eye(2));
        assert!(tgcn_layer(&mut t, x, a, &layer, Activation::Elu).is_err());
        let bad_width = t.constant(Array2::zeros((2, 3)));
        assert!(tgcn_layer(&mut t, bad_width, a, &layer, Activation::Elu).is_err());
    }

    fn graph(rng: &mut ChaCha8Rng, n: usize, d: usize, e: usize) -> UserGraph {
        UserGraph {
            ego: 0,
            friends: (1..n as u64).collect(),
            adjacency: random_graph(rng, n),
            node_features: rand_mat(rng, n, d),
            edge_features: rand_mat(rng, n - 1, e),
        }
    }

    fn two_layers(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> [TgcnLayerParams; 2] {
        [
            TgcnLayerParams::tensor(store, "g0", &[1, 2], 3, rng),
            TgcnLayerParams::tensor(store, "g1", &[3, 3], 3, rng),
        ]
    }

    #[test]
    fn forward_on_single_node_is_dense_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let layers = two_layers(&mut store, &mut rng);
        let g = graph(&mut rng, 1, 3, 2);
        assert_eq!(g.adjacency, array![[1.0]]);
        let mut t = Tape::new(&store);
        let out = tgcn_forward(&mut t, &g, &layers).unwrap();
        let got = t.value(out).to_owned();
        let x = &g.node_features;
        let one = array![[1.0]];
        let h0 = vanilla_gcn(&one, &x.slice(s![.., 0..1]).to_owned(), store.value(store.get("g0.0").unwrap()));
        let h1 = vanilla_gcn(&one, &x.slice(s![.., 1..3]).to_owned(), store.value(store.get("g0.1").unwrap()));
        let o0 = vanilla_gcn(&one, &h0, store.value(store.get("g1.0").unwrap()));
        let o1 = vanilla_gcn(&one, &h1, store.value(store.get("g1.1").unwrap()));
        for j in 0..3 {
            assert!((got[[0, j]] - o0[[0, j]]).abs() < 1e-12);
            assert!((got[[0, 3 + j]] - o1[[0, j]]).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_matches_composed_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let layers = two_layers(&mut store, &mut rng);
        let g = graph(&mut rng, 4, 3, 2);
        let mut t = Tape::new(&store);
        let out = tgcn_forward(&mut t, &g, &layers).unwrap();
        let got = t.value(out).to_owned();
        let cols = [(0, 1), (1, 3)];
        for (k, (a, b)) in cols.iter().enumerate() {
            let xk = g.node_features.slice(s![.., *a..*b]).to_owned();
            let w0 = store.value(store.get(&format!("g0.{k}")).unwrap());
            let w1 = store.value(store.get(&format!("g1.{k}")).unwrap());
            let oracle = vanilla_gcn(&g.adjacency, &vanilla_gcn(&g.adjacency, &xk, w0), w1);
            let block = got.slice(s![.., 3 * k..3 * k + 3]);
            for (x, y) in block.iter().zip(oracle.iter()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn friend_permutation_permutes_embeddings() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let layers = two_layers(&mut store, &mut rng);
        let g = graph(&mut rng, 5, 3, 2);
        let perm = [0usize, 3, 1, 4, 2];
        let mut pg = g.clone();
        for (i, &pi) in perm.iter().enumerate() {
            for (j, &pj) in perm.iter().enumerate() {
                pg.adjacency[[i, j]] = g.adjacency[[pi, pj]];
            }
            pg.node_features.row_mut(i).assign(&g.node_features.row(pi));
        }
        let run = |gr: &UserGraph| {
            let mut t = Tape::new(&store);
            let o = tgcn_forward(&mut t, gr, &layers).unwrap();
            t.value(o).to_owned()
        };
        let (a, b) = (run(&g), run(&pg));
        for (i, &pi) in perm.iter().enumerate() {
            for j in 0..a.ncols() {
                assert!((b[[i, j]] - a[[pi, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tensor_output_blocks_are_exclusive() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let layers = two_layers(&mut store, &mut rng);
        let g = graph(&mut rng, 4, 3, 2);
        let mut perturbed = g.clone();
        for v in 0..4 {
            perturbed.node_features[[v, 1]] += 0.7;
            perturbed.node_features[[v, 2]] -= 0.3;
        }
        let run = |gr: &UserGraph| {
            let mut t = Tape::new(&store);
            let o = tgcn_forward(&mut t, gr, &layers).unwrap();
            t.value(o).to_owned()
        };
        let (a, b) = (run(&g), run(&perturbed));
        assert_eq!(a.slice(s![.., 0..3]), b.slice(s![.., 0..3]));
        assert_ne!(a.slice(s![.., 3..6]), b.slice(s![.., 3..6]));
    }

    /// Scorer that passes edge channel 0 through unchanged.
    fn passthrough_scorer(store: &mut ParamStore, embed: usize) -> FriendScorer {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = FriendScorer::new(store, "phi", embed, 1, true, 1, &mut rng);
        store.value_mut(s.w1).fill(0.0);
        store.value_mut(s.w1)[[embed, 0]] = 1.0;
        store.value_mut(s.w2).fill(1.0);
        s
    }

    fn attention_values(store: &ParamStore, s: &FriendScorer, x: Array2<f64>, e: Array2<f64>) -> Option<Vec<f64>> {
        let mut t = Tape::new(store);
        let xv = t.constant(x);
        let ev = t.constant(e);
        friendship_attention(&mut t, xv, ev, s)
            .unwrap()
            .map(|a| t.value(a).iter().copied().collect())
    }

    #[test]
    fn attention_examples() {
        let mut store = ParamStore::new();
        let s = passthrough_scorer(&mut store, 2);
        let one = attention_values(&store, &s, Array2::ones((2, 2)), array![[0.3]]).unwrap();
        assert_eq!(one, vec![1.0]);
        let same = attention_values(&store, &s, Array2::ones((3, 2)), array![[0.2], [0.2]]).unwrap();
        assert!((same[0] - 0.5).abs() < 1e-12 && (same[1] - 0.5).abs() < 1e-12);
        let skew = attention_values(&store, &s, Array2::ones((3, 2)), array![[2f64.ln()], [0.0]]).unwrap();
        assert!((skew[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((skew[1] - 1.0 / 3.0).abs() < 1e-12);
        assert!(attention_values(&store, &s, Array2::ones((1, 2)), Array2::zeros((0, 1))).is_none());
    }

    fn embedding_values(x: Array2<f64>, alpha: Option<Array2<f64>>, k: usize) -> Array2<f64> {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let xv = t.constant(x);
        let av = alpha.map(|a| t.constant(a));
        let g = graph_embedding(&mut t, xv, av, 0, k).unwrap();
        t.value(g).to_owned()
    }

    #[test]
    fn embedding_examples() {
        let x = array![[1.0, 2.0, 3.0, 4.0], [5.0, 6.0, 7.0, 8.0]];
        let g = embedding_values(x.clone(), Some(array![[1.0]]), 2);
        assert_eq!(g, array![[1.0, 2.0, 5.0, 6.0, 3.0, 4.0, 7.0, 8.0]]);

        let g = embedding_values(x.slice(s![0..1, ..]).to_owned(), None, 2);
        assert_eq!(g, array![[1.0, 2.0, 0.0, 0.0, 3.0, 4.0, 0.0, 0.0]]);

        let x3 = array![[0.0, 0.0], [1.0, -2.0], [3.0, 4.0]];
        let g = embedding_values(x3, Some(array![[0.25], [0.75]]), 1);
        let expected = [0.0, 0.0, 0.25 * 1.0 + 0.75 * 3.0, 0.25 * -2.0 + 0.75 * 4.0];
        for (a, b) in g.iter().zip(expected) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn embedding_rows_depend_on_own_category_given_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_mat(&mut rng, 3, 6);
        let alpha = array![[0.4], [0.6]];
        let a = embedding_values(x.clone(), Some(alpha.clone()), 3);
        let mut px = x;
        px.column_mut(3).mapv_inplace(|v| v + 1.0);
        let b = embedding_values(px, Some(alpha), 3);
        assert_eq!(a.slice(s![.., 0..4]), b.slice(s![.., 0..4]));
        assert_ne!(a.slice(s![.., 4..8]), b.slice(s![.., 4..8]));
        assert_eq!(a.slice(s![.., 8..12]), b.slice(s![.., 8..12]));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let layers = two_layers(&mut store, &mut rng);
        let scorer = FriendScorer::new(&mut store, "phi", 6, 2, true, 4, &mut rng);
        let g = graph(&mut rng, 4, 3, 2);
        let module = FriendshipModule {
            layers,
            scorer,
            k: 2,
        };
        let weights = rand_mat(&mut rng, 12, 1);
        let report = check_gradients(&mut store, 1e-3, |t| {
            let enc = module.encode(t, &g)?;
            let w = t.constant(weights.clone());
            let y = t.tanh(enc.embedding);
            Ok(t.matmul(y, w))
        })
        .unwrap();
        for r in &report {
            assert!(r.relative_error < 1e-4, "{} rel err {}", r.name, r.relative_error);
            assert!(r.analytic_norm > 0.0, "{} has no gradient", r.name);
        }
    }
}
