//! Layer builders shared by the toy encoders and the fusion block.
//!
//! Each builder comes in two halves: an `init_*` that registers parameters
//! under a dotted prefix, and a forward that replays them on a [`Graph`].

use rand_chacha::ChaCha8Rng;

use super::params::{Graph, ParamStore};
use super::tape::Var;

pub fn init_linear(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    in_dim: usize,
    out_dim: usize,
) {
    let std = 1.0 / (in_dim as f64).sqrt();
    store.init_gaussian(&format!("{prefix}.w"), (in_dim, out_dim), std, rng, true);
    store.init_zeros(&format!("{prefix}.b"), (1, out_dim), true);
}

pub fn linear(g: &mut Graph, x: Var, prefix: &str) -> Var {
    let w = g.param(&format!("{prefix}.w"));
    let b = g.param(&format!("{prefix}.b"));
    let y = g.tape.matmul(x, w);
    g.tape.add_row(y, b)
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize) {
    store.init_ones(&format!("{prefix}.g"), (1, dim), true);
    store.init_zeros(&format!("{prefix}.b"), (1, dim), true);
}

pub fn layer_norm(g: &mut Graph, x: Var, prefix: &str) -> Var {
    let gamma = g.param(&format!("{prefix}.g"));
    let beta = g.param(&format!("{prefix}.b"));
    g.tape.layer_norm(x, gamma, beta)
}

pub fn init_mha(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, dim: usize) {
    for part in ["wq", "wk", "wv", "wo"] {
        init_linear(store, rng, &format!("{prefix}.{part}"), dim, dim);
    }
}

/// Multi-head attention; `q_in` supplies queries, `kv_in` keys and values.
/// No masking and no positional bias — token order carries no meaning for
/// the expert-set fusion, and the encoders add positions at embedding time.
pub fn mha(g: &mut Graph, q_in: Var, kv_in: Var, prefix: &str, heads: usize) -> Var {
    let dim = g.tape.value(q_in).ncols();
    assert!(dim % heads == 0, "dim {dim} not divisible by heads {heads}");
    let dh = dim / heads;
    let q = linear(g, q_in, &format!("{prefix}.wq"));
    let k = linear(g, kv_in, &format!("{prefix}.wk"));
    let v = linear(g, kv_in, &format!("{prefix}.wv"));
    let scale = 1.0 / (dh as f64).sqrt();
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.tape.slice_cols(q, h * dh, dh);
        let kh = g.tape.slice_cols(k, h * dh, dh);
        let vh = g.tape.slice_cols(v, h * dh, dh);
        let kt = g.tape.transpose(kh);
        let scores = g.tape.matmul(qh, kt);
        let scores = g.tape.scale(scores, scale);
        let attn = g.tape.softmax(scores);
        head_outs.push(g.tape.matmul(attn, vh));
    }
    let cat = g.tape.concat_cols(&head_outs);
    linear(g, cat, &format!("{prefix}.wo"))
}

pub fn init_mlp(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, dim: usize) {
    init_linear(store, rng, &format!("{prefix}.fc1"), dim, 4 * dim);
    init_linear(store, rng, &format!("{prefix}.fc2"), 4 * dim, dim);
}

pub fn mlp(g: &mut Graph, x: Var, prefix: &str) -> Var {
    let h = linear(g, x, &format!("{prefix}.fc1"));
    let h = g.tape.gelu(h);
    linear(g, h, &format!("{prefix}.fc2"))
}

pub fn init_encoder_block(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    dim: usize,
) {
    init_layer_norm(store, &format!("{prefix}.ln1"), dim);
    init_mha(store, rng, &format!("{prefix}.attn"), dim);
    init_layer_norm(store, &format!("{prefix}.ln2"), dim);
    init_mlp(store, rng, &format!("{prefix}.mlp"), dim);
}

/// Pre-LN transformer encoder block over one token sequence (tokens x dim).
pub fn encoder_block(g: &mut Graph, x: Var, prefix: &str, heads: usize) -> Var {
    let n = layer_norm(g, x, &format!("{prefix}.ln1"));
    let a = mha(g, n, n, &format!("{prefix}.attn"), heads);
    let x = g.tape.add(x, a);
    let n = layer_norm(g, x, &format!("{prefix}.ln2"));
    let m = mlp(g, n, &format!("{prefix}.mlp"));
    g.tape.add(x, m)
}

pub fn init_cross_block(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    dim: usize,
) {
    init_layer_norm(store, &format!("{prefix}.lnq"), dim);
    init_layer_norm(store, &format!("{prefix}.lnkv"), dim);
    init_mha(store, rng, &format!("{prefix}.attn"), dim);
    init_layer_norm(store, &format!("{prefix}.ln2"), dim);
    init_mlp(store, rng, &format!("{prefix}.mlp"), dim);
}

/// Pre-LN cross-attention block: queries from `x`, keys/values from `ctx`.
pub fn cross_block(g: &mut Graph, x: Var, ctx: Var, prefix: &str, heads: usize) -> Var {
    let q = layer_norm(g, x, &format!("{prefix}.lnq"));
    let kv = layer_norm(g, ctx, &format!("{prefix}.lnkv"));
    let a = mha(g, q, kv, &format!("{prefix}.attn"), heads);
    let x = g.tape.add(x, a);
    let n = layer_norm(g, x, &format!("{prefix}.ln2"));
    let m = mlp(g, n, &format!("{prefix}.mlp"));
    g.tape.add(x, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn block_preserves_shape_and_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        init_encoder_block(&mut store, &mut rng, "blk", 8);
        let x = Array2::from_shape_fn((5, 8), |(i, j)| ((i * 8 + j) as f64).sin());
        let run = |store: &ParamStore| {
            let mut g = Graph::new(store);
            let xv = g.tape.leaf(x.clone());
            let y = encoder_block(&mut g, xv, "blk", 2);
            g.tape.value(y).clone()
        };
        let a = run(&store);
        assert_eq!(a.dim(), (5, 8));
        assert_eq!(a, run(&store));
    }

    #[test]
    fn attention_is_permutation_equivariant_without_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut store = ParamStore::new();
        init_encoder_block(&mut store, &mut rng, "blk", 8);
        let x = Array2::from_shape_fn((4, 8), |(i, j)| ((i * 3 + j) as f64 * 0.3).cos());
        let perm = [2usize, 0, 3, 1];
        let mut xp = x.clone();
        for (r, &p) in perm.iter().enumerate() {
            xp.row_mut(r).assign(&x.row(p));
        }
        let run = |input: &Array2<f64>| {
            let mut g = Graph::new(&store);
            let xv = g.tape.leaf(input.clone());
            let y = encoder_block(&mut g, xv, "blk", 2);
            g.tape.value(y).clone()
        };
        let y = run(&x);
        let yp = run(&xp);
        for (r, &p) in perm.iter().enumerate() {
            for c in 0..8 {
                assert!((yp[(r, c)] - y[(p, c)]).abs() < 1e-10);
            }
        }
    }
}
