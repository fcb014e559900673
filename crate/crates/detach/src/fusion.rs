//! Multi-strategy feature fusion.
//!
//! Three parallel fusion paths combine the projected stream features
//! `f_env` and `f_self` (both `d_model` wide):
//!
//! * **cross-attention** — `f_self` queries `f_env` (single token by
//!   default; a full env sequence may serve as keys/values),
//! * **gated blend** — `g ⊙ f_env + (1-g) ⊙ f_self` with
//!   `g = σ(W_g [f_env | f_self] + b_g)`,
//! * **mixture of experts** — four two-layer MLP experts over the
//!   concatenated streams, combined by a softmax router.
//!
//! The three outputs plus learned token-type embeddings form the 3-token
//! sequence the policy trunk consumes. Routing weights, the gate, and the
//! attention rows are returned alongside so callers can log or test them.

use crate::autodiff::{Tape, TapeError, Tensor, Var};
use crate::nn::{init_linear, insert_attention, multi_head_attention};
use crate::params::{ParamTree, VarMap};
use rand::Rng;

/// Expert count of the mixture-of-experts path.
pub const NUM_EXPERTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FusionDims {
    /// Shared feature width of both inputs and all three outputs.
    pub d_model: usize,
    /// Cross-attention heads (must divide `d_model`).
    pub heads: usize,
}

pub fn init_fusion(tree: &mut ParamTree, prefix: &str, dims: &FusionDims, rng: &mut impl Rng) {
    let d = dims.d_model;
    insert_attention(tree, &format!("{prefix}.cross"), rng, d);
    tree.insert(&format!("{prefix}.gate.w"), init_linear(rng, 2 * d, d, 2 * d));
    tree.insert(&format!("{prefix}.gate.b"), Tensor::zeros(&[1, d]));
    for i in 0..NUM_EXPERTS {
        tree.insert(&format!("{prefix}.moe.expert{i}.w1"), init_linear(rng, 2 * d, 2 * d, 2 * d));
        tree.insert(&format!("{prefix}.moe.expert{i}.b1"), Tensor::zeros(&[1, 2 * d]));
        tree.insert(&format!("{prefix}.moe.expert{i}.w2"), init_linear(rng, 2 * d, d, 2 * d));
        tree.insert(&format!("{prefix}.moe.expert{i}.b2"), Tensor::zeros(&[1, d]));
    }
    tree.insert(&format!("{prefix}.moe.router.w"), init_linear(rng, 2 * d, NUM_EXPERTS, 2 * d));
    tree.insert(&format!("{prefix}.moe.router.b"), Tensor::zeros(&[1, NUM_EXPERTS]));
    tree.insert(&format!("{prefix}.tokens.type"), init_linear(rng, 3, d, d));
}

/// `f_self` (query, `[1, d_model]`) attends over `f_env_kv` (`[m, d_model]`,
/// `m = 1` in the single-token default). Returns the fused vector and the
/// row-stochastic attention weights (`[heads, m]`).
pub fn cross_attention_fuse(
    tape: &mut Tape,
    vars: &VarMap,
    prefix: &str,
    dims: &FusionDims,
    f_self: Var,
    f_env_kv: Var,
) -> Result<(Var, Var), TapeError> {
    multi_head_attention(tape, vars, &format!("{prefix}.cross"), f_self, f_env_kv, dims.heads)
}

/// Convex per-coordinate blend of the two streams. Returns `(fused, gate)`.
pub fn gated_fuse(
    tape: &mut Tape,
    vars: &VarMap,
    prefix: &str,
    f_env: Var,
    f_self: Var,
) -> Result<(Var, Var), TapeError> {
    let joint = tape.concat(&[f_env, f_self], 1)?;
    let pre = tape.matmul(joint, vars.v(&format!("{prefix}.gate.w")))?;
    let pre = tape.add_row(pre, vars.v(&format!("{prefix}.gate.b")))?;
    let gate = tape.sigmoid(pre);
    // g*env + (1-g)*self, written as self + g*(env - self)
    let diff = tape.sub(f_env, f_self)?;
    let scaled = tape.mul(gate, diff)?;
    let fused = tape.add(f_self, scaled)?;
    Ok((fused, gate))
}

/// Output of the mixture-of-experts path.
pub struct MoeFusion {
    pub fused: Var,
    /// `[1, NUM_EXPERTS]` softmax routing weights.
    pub routing: Var,
    /// Individual expert outputs, each `[1, d_model]`.
    pub experts: Vec<Var>,
}

pub fn moe_fuse(
    tape: &mut Tape,
    vars: &VarMap,
    prefix: &str,
    dims: &FusionDims,
    f_env: Var,
    f_self: Var,
) -> Result<MoeFusion, TapeError> {
    let joint = tape.concat(&[f_env, f_self], 1)?;
    let logits = tape.matmul(joint, vars.v(&format!("{prefix}.moe.router.w")))?;
    let logits = tape.add_row(logits, vars.v(&format!("{prefix}.moe.router.b")))?;
    let routing = tape.softmax(logits);
    let mut experts = Vec::with_capacity(NUM_EXPERTS);
    let mut fused = tape.constant(Tensor::zeros(&[1, dims.d_model]));
    for i in 0..NUM_EXPERTS {
        let h = tape.matmul(joint, vars.v(&format!("{prefix}.moe.expert{i}.w1")))?;
        let h = tape.add_row(h, vars.v(&format!("{prefix}.moe.expert{i}.b1")))?;
        let h = tape.relu(h);
        let e = tape.matmul(h, vars.v(&format!("{prefix}.moe.expert{i}.w2")))?;
        let e = tape.add_row(e, vars.v(&format!("{prefix}.moe.expert{i}.b2")))?;
        experts.push(e);
        let wi = tape.slice(routing, 1, i, i + 1)?;
        let weighted = tape.scale_by(e, wi)?;
        fused = tape.add(fused, weighted)?;
    }
    Ok(MoeFusion { fused, routing, experts })
}

/// The complete fused triple plus everything worth logging.
pub struct FusedTokens {
    /// `[3, d_model]` token sequence: `[f_moe, f_gate, f_cross]` plus
    /// learned type embeddings.
    pub tokens: Var,
    pub routing: Var,
    pub gate: Var,
    pub cross_weights: Var,
}

/// Run all three fusion paths and assemble the trunk's token sequence.
/// `f_env_kv` supplies cross-attention keys/values (pass `f_env` for the
/// single-token default).
pub fn fuse(
    tape: &mut Tape,
    vars: &VarMap,
    prefix: &str,
    dims: &FusionDims,
    f_env: Var,
    f_self: Var,
    f_env_kv: Var,
) -> Result<FusedTokens, TapeError> {
    let moe = moe_fuse(tape, vars, prefix, dims, f_env, f_self)?;
    let (f_gate, gate) = gated_fuse(tape, vars, prefix, f_env, f_self)?;
    let (f_cross, cross_weights) = cross_attention_fuse(tape, vars, prefix, dims, f_self, f_env_kv)?;
    let stacked = tape.concat(&[moe.fused, f_gate, f_cross], 0)?;
    let tokens = tape.add(stacked, vars.v(&format!("{prefix}.tokens.type")))?;
    Ok(FusedTokens { tokens, routing: moe.routing, gate, cross_weights })
}
