//! Full dual-stream policy network: stream encoders, projections, fusion,
//! transformer trunk, and Gaussian policy / value heads.
//!
//! Parameter groups (prefixes inside the shared [`ParamTree`]):
//!
//! * `env.*`    — environment-stream encoder (frozen during the fusion stage)
//! * `self.*`   — self-stream encoder (frozen during the fusion stage)
//! * `fusion.*` — stream projections plus the three fusion paths
//! * `trunk.*`  — pre-norm transformer blocks
//! * `heads.*`  — Gaussian policy head and value head
//! * `aux.*`    — pretraining decoders and the next-step predictor (never
//!   part of the control path)

use crate::autodiff::{Tape, TapeError, Tensor, Var};
use crate::encoders::{
    self, env_encode, env_encode_linear, self_encode, self_encode_linear, EncoderError,
    EnvEncoderDims, SelfEncoderDims,
};
use crate::fusion::{fuse, init_fusion, FusionDims};
use crate::nn::{affine, init_linear, insert_affine, insert_attention, multi_head_attention};
use crate::params::{ParamTree, VarMap};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("non-finite activation at stage {stage}")]
    NonFinite { stage: &'static str },
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

/// Which encoder implementation a stream uses. `Linear` is the ablation
/// substitute: a per-timestep affine map of matching output width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum EncoderKind {
    Full,
    Linear,
}

/// Every width/depth the network needs.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NetDims {
    /// Raw env-stream width per timestep.
    pub d_env_raw: usize,
    /// Raw self-stream width per timestep.
    pub d_self_raw: usize,
    /// Observation history length T.
    pub window: usize,
    pub env: EnvEncoderDims,
    pub self_enc: SelfEncoderDims,
    pub d_model: usize,
    pub fusion_heads: usize,
    pub trunk_layers: usize,
    pub trunk_heads: usize,
    pub action_dim: usize,
    pub env_kind: EncoderKind,
    pub self_kind: EncoderKind,
}

impl NetDims {
    /// Small configuration for fast CPU experiments.
    pub fn desk(d_env_raw: usize, d_self_raw: usize, action_dim: usize) -> Self {
        NetDims {
            d_env_raw,
            d_self_raw,
            window: 10,
            env: EnvEncoderDims { d_env: d_env_raw, branch_channels: 8, heads: 4 },
            self_enc: SelfEncoderDims { d_self: d_self_raw, d_h: 12 },
            d_model: 32,
            fusion_heads: 4,
            trunk_layers: 2,
            trunk_heads: 4,
            action_dim,
            env_kind: EncoderKind::Full,
            self_kind: EncoderKind::Full,
        }
    }

    /// Reference configuration: 64-wide features, 4 trunk blocks with
    /// 8-head attention.
    pub fn reference(d_env_raw: usize, d_self_raw: usize, action_dim: usize) -> Self {
        NetDims {
            d_env_raw,
            d_self_raw,
            window: 10,
            env: EnvEncoderDims { d_env: d_env_raw, branch_channels: 24, heads: 8 },
            self_enc: SelfEncoderDims { d_self: d_self_raw, d_h: 32 },
            d_model: 64,
            fusion_heads: 8,
            trunk_layers: 4,
            trunk_heads: 8,
            action_dim,
            env_kind: EncoderKind::Full,
            self_kind: EncoderKind::Full,
        }
    }

    pub fn fusion_dims(&self) -> FusionDims {
        FusionDims { d_model: self.d_model, heads: self.fusion_heads }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.d_model % self.trunk_heads != 0 {
            return Err(format!(
                "trunk_heads {} must divide d_model {}",
                self.trunk_heads, self.d_model
            ));
        }
        if self.d_model % self.fusion_heads != 0 {
            return Err(format!(
                "fusion_heads {} must divide d_model {}",
                self.fusion_heads, self.d_model
            ));
        }
        if self.env.d_e() % self.env.heads != 0 {
            return Err(format!(
                "env encoder heads {} must divide its width {}",
                self.env.heads,
                self.env.d_e()
            ));
        }
        if self.window == 0 || self.action_dim == 0 {
            return Err("window and action_dim must be positive".into());
        }
        Ok(())
    }
}

/// Initialise every parameter group for the given dims.
pub fn init_policy(tree: &mut ParamTree, dims: &NetDims, rng: &mut impl Rng) {
    match dims.env_kind {
        EncoderKind::Full => encoders::init_env_encoder(tree, "env", &dims.env, rng),
        EncoderKind::Linear => encoders::init_env_linear(tree, "env", &dims.env, rng),
    }
    match dims.self_kind {
        EncoderKind::Full => encoders::init_self_encoder(tree, "self", &dims.self_enc, rng),
        EncoderKind::Linear => encoders::init_self_linear(tree, "self", &dims.self_enc, rng),
    }
    encoders::init_projection(tree, "fusion.proj_env", dims.env.d_e(), dims.d_model, rng);
    encoders::init_projection(tree, "fusion.proj_self", dims.self_enc.d_out(), dims.d_model, rng);
    init_fusion(tree, "fusion", &dims.fusion_dims(), rng);
    let d = dims.d_model;
    for l in 0..dims.trunk_layers {
        let p = format!("trunk.block{l}");
        tree.insert(&format!("{p}.ln1.g"), Tensor::filled(&[1, d], 1.0));
        tree.insert(&format!("{p}.ln1.b"), Tensor::zeros(&[1, d]));
        insert_attention(tree, &format!("{p}.attn"), rng, d);
        tree.insert(&format!("{p}.ln2.g"), Tensor::filled(&[1, d], 1.0));
        tree.insert(&format!("{p}.ln2.b"), Tensor::zeros(&[1, d]));
        insert_affine(tree, &format!("{p}.ff.l1"), rng, d, 4 * d);
        insert_affine(tree, &format!("{p}.ff.l2"), rng, 4 * d, d);
    }
    insert_affine(tree, "heads.pi", rng, d, dims.action_dim);
    tree.insert("heads.log_std", Tensor::zeros(&[1, dims.action_dim]));
    insert_affine(tree, "heads.v", rng, d, 1);
    // Auxiliary nets: reconstruction decoders for both streams, and the
    // next-step feature predictor for self-stream pretraining.
    let de = dims.env.d_e();
    insert_affine(tree, "aux.dec_env.l1", rng, de, de);
    insert_affine(tree, "aux.dec_env.l2", rng, de, dims.d_env_raw);
    let ds = dims.self_enc.d_out();
    insert_affine(tree, "aux.dec_self.l1", rng, ds, ds);
    insert_affine(tree, "aux.dec_self.l2", rng, ds, dims.d_self_raw);
    tree.insert("aux.f_pred.w", init_linear(rng, ds, ds, ds));
    tree.insert("aux.f_pred.b", Tensor::zeros(&[1, ds]));
}

/// Two-layer relu decoder used by pretraining and the semantic regulariser.
pub fn decode(tape: &mut Tape, vars: &VarMap, prefix: &str, z: Var) -> Result<Var, TapeError> {
    let h = affine(tape, vars, &format!("{prefix}.l1"), z)?;
    let h = tape.relu(h);
    affine(tape, vars, &format!("{prefix}.l2"), h)
}

/// Next-step predictor for the self stream (affine).
pub fn predict_next(tape: &mut Tape, vars: &VarMap, z: Var) -> Result<Var, TapeError> {
    let h = tape.matmul(z, vars.v("aux.f_pred.w"))?;
    tape.add_row(h, vars.v("aux.f_pred.b"))
}

/// Encode the env stream (`x` is `[T, d_env_raw]` on the tape).
pub fn encode_env(
    tape: &mut Tape,
    vars: &VarMap,
    dims: &NetDims,
    x: Var,
) -> Result<Var, PolicyError> {
    let z = match dims.env_kind {
        EncoderKind::Full => env_encode(tape, vars, "env", &dims.env, x)?,
        EncoderKind::Linear => env_encode_linear(tape, vars, "env", x)?,
    };
    Ok(z)
}

/// Encode the self stream (`x` is `[T, d_self_raw]` on the tape).
pub fn encode_self(
    tape: &mut Tape,
    vars: &VarMap,
    dims: &NetDims,
    x: Var,
) -> Result<Var, PolicyError> {
    let z = match dims.self_kind {
        EncoderKind::Full => self_encode(tape, vars, "self", &dims.self_enc, x)?,
        EncoderKind::Linear => self_encode_linear(tape, vars, "self", x)?,
    };
    Ok(z)
}

fn check(tape: &Tape, v: Var, stage: &'static str) -> Result<(), PolicyError> {
    if tape.value(v).is_finite() {
        Ok(())
    } else {
        Err(PolicyError::NonFinite { stage })
    }
}

/// One pre-norm transformer block: `x += MHA(LN(x)); x += FF(LN(x))`.
fn trunk_block(
    tape: &mut Tape,
    vars: &VarMap,
    prefix: &str,
    heads: usize,
    x: Var,
) -> Result<Var, TapeError> {
    let n1 = tape.layer_norm(
        x,
        vars.v(&format!("{prefix}.ln1.g")),
        vars.v(&format!("{prefix}.ln1.b")),
        LN_EPS,
    )?;
    let (attn, _) = multi_head_attention(tape, vars, &format!("{prefix}.attn"), n1, n1, heads)?;
    let x = tape.add(x, attn)?;
    let n2 = tape.layer_norm(
        x,
        vars.v(&format!("{prefix}.ln2.g")),
        vars.v(&format!("{prefix}.ln2.b")),
        LN_EPS,
    )?;
    let h = affine(tape, vars, &format!("{prefix}.ff.l1"), n2)?;
    let h = tape.relu(h);
    let h = affine(tape, vars, &format!("{prefix}.ff.l2"), h)?;
    tape.add(x, h)
}

/// Every intermediate the training losses need, all live on the tape.
pub struct ForwardVars {
    /// Encoded env stream, `[T, d_e]`.
    pub z_env: Var,
    /// Encoded self stream, `[T, d_self_out]`.
    pub z_self: Var,
    /// Projected pooled features, `[1, d_model]` each.
    pub f_env: Var,
    pub f_self: Var,
    /// Fused token sequence `[3, d_model]` after the trunk.
    pub trunk_out: Var,
    pub routing: Var,
    pub gate: Var,
    pub cross_weights: Var,
    /// Gaussian head outputs.
    pub mean: Var,
    pub log_std: Var,
    pub value: Var,
}

/// Run the complete pipeline on an already-bound tape.
///
/// `obs_env` is `[T, d_env_raw]`, `obs_self` is `[T, d_self_raw]` (replicate
/// the first frame when an episode is younger than T). Non-finite values at
/// any stage boundary abort with the stage's name.
pub fn forward_vars(
    tape: &mut Tape,
    vars: &VarMap,
    dims: &NetDims,
    obs_env: &Tensor,
    obs_self: &Tensor,
) -> Result<ForwardVars, PolicyError> {
    if !obs_env.is_finite() || !obs_self.is_finite() {
        return Err(PolicyError::NonFinite { stage: "input" });
    }
    let oe = tape.constant(obs_env.clone());
    let os = tape.constant(obs_self.clone());
    let z_env = encode_env(tape, vars, dims, oe)?;
    check(tape, z_env, "env_encoder")?;
    let z_self = encode_self(tape, vars, dims, os)?;
    check(tape, z_self, "self_encoder")?;

    let pooled_env = tape.mean_rows(z_env);
    let pooled_self = tape.mean_rows(z_self);
    let f_env = encoders::project(tape, vars, "fusion.proj_env", pooled_env)?;
    let f_self = encoders::project(tape, vars, "fusion.proj_self", pooled_self)?;
    check(tape, f_env, "projection")?;
    check(tape, f_self, "projection")?;

    let fused = fuse(tape, vars, "fusion", &dims.fusion_dims(), f_env, f_self, f_env)?;
    check(tape, fused.tokens, "fusion")?;

    let mut x = fused.tokens;
    for l in 0..dims.trunk_layers {
        x = trunk_block(tape, vars, &format!("trunk.block{l}"), dims.trunk_heads, x)?;
    }
    check(tape, x, "trunk")?;

    let pooled = tape.mean_rows(x);
    let mean = affine(tape, vars, "heads.pi", pooled)?;
    let log_std = tape.clamp(vars.v("heads.log_std"), LOG_STD_MIN, LOG_STD_MAX);
    let value = affine(tape, vars, "heads.v", pooled)?;
    check(tape, mean, "heads")?;
    check(tape, value, "heads")?;

    Ok(ForwardVars {
        z_env,
        z_self,
        f_env,
        f_self,
        trunk_out: x,
        routing: fused.routing,
        gate: fused.gate,
        cross_weights: fused.cross_weights,
        mean,
        log_std,
        value,
    })
}

/// Concrete (tape-free) outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct PolicyEval {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
    pub value: f64,
    /// MoE routing weights, for logging.
    pub routing: Vec<f64>,
    /// Mean gate activation, for logging.
    pub gate_mean: f64,
}

/// Evaluate the policy on its own scratch tape.
pub fn forward(
    params: &ParamTree,
    dims: &NetDims,
    obs_env: &Tensor,
    obs_self: &Tensor,
) -> Result<PolicyEval, PolicyError> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let fv = forward_vars(&mut tape, &vars, dims, obs_env, obs_self)?;
    let gate = tape.value(fv.gate);
    let gate_mean = gate.data().iter().sum::<f64>() / gate.data().len() as f64;
    Ok(PolicyEval {
        mean: tape.value(fv.mean).data().to_vec(),
        log_std: tape.value(fv.log_std).data().to_vec(),
        value: tape.value(fv.value).item(),
        routing: tape.value(fv.routing).data().to_vec(),
        gate_mean,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    Sample,
    Mean,
}

/// Draw an action. `Mean` is deterministic; `Sample` uses the caller's rng,
/// so fixed seeds reproduce bitwise.
pub fn act(
    eval: &PolicyEval,
    mode: ActMode,
    rng: &mut impl Rng,
) -> Vec<f64> {
    match mode {
        ActMode::Mean => eval.mean.clone(),
        ActMode::Sample => eval
            .mean
            .iter()
            .zip(&eval.log_std)
            .map(|(m, ls)| {
                let z: f64 = StandardNormal.sample(rng);
                m + ls.exp() * z
            })
            .collect(),
    }
}

/// Log-probability of `action` under the diagonal Gaussian, as a tape node
/// (for the PPO surrogate).
pub fn log_prob(
    tape: &mut Tape,
    mean: Var,
    log_std: Var,
    action: &Tensor,
) -> Result<Var, TapeError> {
    let a = tape.constant(action.clone());
    let diff = tape.sub(a, mean)?;
    let std = tape.exp(log_std);
    let inv_std = tape.recip(std);
    let zscore = tape.mul(diff, inv_std)?;
    let sq = tape.square(zscore);
    let sum_sq = tape.sum(sq);
    let sum_ls = tape.sum(log_std);
    let n = action.data().len() as f64;
    let half = tape.scale(sum_sq, -0.5);
    let neg_ls = tape.scale(sum_ls, -1.0);
    let base = tape.add(half, neg_ls)?;
    Ok(tape.add_const(base, -0.5 * n * (2.0 * std::f64::consts::PI).ln()))
}

/// Entropy of the diagonal Gaussian: `Σ (log_std + ½ ln 2πe)`.
pub fn entropy(tape: &mut Tape, log_std: Var, n_actions: usize) -> Var {
    let s = tape.sum(log_std);
    tape.add_const(s, 0.5 * n_actions as f64 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln())
}
