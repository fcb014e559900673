//! Small shared building blocks: parameter initialization and multi-head
//! attention, used by the env encoder, the fusion layer, and the policy
//! trunk.

use crate::autodiff::{Tape, TapeError, Tensor, Var};
use crate::params::{ParamTree, VarMap};
use rand::Rng;

/// Uniform `±sqrt(1/fan_in)` init.
pub fn init_linear(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let s = (1.0 / fan_in as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-s..s)).collect();
    Tensor::new(&[rows, cols], data)
}

/// Like [`init_linear`] scaled down, for output heads that should start
/// near zero.
pub fn init_linear_scaled(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize, gain: f64) -> Tensor {
    let mut t = init_linear(rng, rows, cols, fan_in);
    for v in t.data_mut() {
        *v *= gain;
    }
    t
}

/// Register an affine layer `{prefix}.w`, `{prefix}.b`.
pub fn insert_affine(tree: &mut ParamTree, prefix: &str, rng: &mut impl Rng, d_in: usize, d_out: usize) {
    tree.insert(&format!("{prefix}.w"), init_linear(rng, d_in, d_out, d_in));
    tree.insert(&format!("{prefix}.b"), Tensor::zeros(&[1, d_out]));
}

/// `x @ {prefix}.w + {prefix}.b`.
pub fn affine(tape: &mut Tape, vars: &VarMap, prefix: &str, x: Var) -> Result<Var, TapeError> {
    let xw = tape.matmul(x, vars.v(&format!("{prefix}.w")))?;
    tape.add_row(xw, vars.v(&format!("{prefix}.b")))
}

/// Register the four projection matrices of a multi-head attention block
/// (`wq`, `wk`, `wv`, `wo`, all `[width, width]`, no biases).
pub fn insert_attention(tree: &mut ParamTree, prefix: &str, rng: &mut impl Rng, width: usize) {
    for name in ["wq", "wk", "wv", "wo"] {
        tree.insert(&format!("{prefix}.{name}"), init_linear(rng, width, width, width));
    }
}

/// Multi-head scaled-dot-product attention. Queries come from `q_in`
/// `[tq, width]`, keys/values from `kv_in` `[tk, width]`; heads split the
/// width evenly, attend independently, and their outputs are concatenated
/// and mixed by `wo`. Returns `(output [tq, width], row-stochastic
/// attention weights [heads * tq, tk])`.
pub fn multi_head_attention(
    tape: &mut Tape,
    vars: &VarMap,
    prefix: &str,
    q_in: Var,
    kv_in: Var,
    heads: usize,
) -> Result<(Var, Var), TapeError> {
    let width = tape.value(q_in).cols();
    assert!(width % heads == 0, "attention width {width} not divisible by {heads} heads");
    let dh = width / heads;
    let q = tape.matmul(q_in, vars.v(&format!("{prefix}.wq")))?;
    let k = tape.matmul(kv_in, vars.v(&format!("{prefix}.wk")))?;
    let v = tape.matmul(kv_in, vars.v(&format!("{prefix}.wv")))?;
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = tape.slice(q, 1, lo, hi)?;
        let kh = tape.slice(k, 1, lo, hi)?;
        let vh = tape.slice(v, 1, lo, hi)?;
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = tape.softmax(scaled);
        weights.push(attn);
        outs.push(tape.matmul(attn, vh)?);
    }
    let merged = tape.concat(&outs, 1)?;
    let out = tape.matmul(merged, vars.v(&format!("{prefix}.wo")))?;
    let weights = tape.concat(&weights, 0)?;
    Ok((out, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_tree(width: usize) -> ParamTree {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut tree = ParamTree::new();
        insert_attention(&mut tree, "attn", &mut rng, width);
        tree
    }

    #[test]
    fn attention_weights_rows_are_stochastic() {
        let tree = toy_tree(6);
        let mut tape = Tape::new();
        let vars = tree.bind(&mut tape);
        let x = tape.constant(Tensor::new(&[4, 6], (0..24).map(|i| (i as f64 * 0.37).sin()).collect()));
        let (out, w) = multi_head_attention(&mut tape, &vars, "attn", x, x, 2).unwrap();
        assert_eq!(tape.value(out).shape(), &[4, 6]);
        let wt = tape.value(w);
        assert_eq!(wt.shape(), &[2 * 4, 4]);
        for r in 0..wt.rows() {
            let sum: f64 = (0..wt.cols()).map(|c| wt.at(r, c)).sum();
            assert!((sum - 1.0).abs() < 1e-9, "row {r} sums to {sum}");
            for c in 0..wt.cols() {
                assert!(wt.at(r, c) >= 0.0);
            }
        }
    }

    #[test]
    fn attention_gradients_check_out() {
        let tree = toy_tree(4);
        let x0 = Tensor::new(&[3, 4], (0..12).map(|i| (i as f64) * 0.1 - 0.5).collect());
        for name in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
            let probe_point = tree.get(name).clone();
            let bound = tree.clone();
            let x0 = x0.clone();
            let report = grad_check(
                move |tape, probe| {
                    let vars = bound.bind_override(tape, name, Some(probe));
                    let x = tape.constant(x0.clone());
                    let (out, _) = multi_head_attention(tape, &vars, "attn", x, x, 2)?;
                    let sq = tape.square(out);
                    Ok(tape.mean(sq))
                },
                &probe_point,
                1e-5,
            )
            .unwrap();
            assert!(report.passes(1e-4), "{name}: {}", report.max_rel_error);
        }
    }
}
