//! The two stream encoders.
//!
//! Environment stream: three parallel same-padded 1-D convolutions over the
//! time axis (kernels 3/5/7), channel-concatenated, passed through
//! multi-head self-attention across timesteps with a residual connection
//! and layer norm:
//!
//! ```text
//!   S_env = [conv3(x) | conv5(x) | conv7(x)]          (t, d_e)
//!   z_env = LayerNorm(MHA(S_env) + S_env)             (t, d_e)
//! ```
//!
//! Self stream: a bidirectional LSTM whose per-step forward/backward states
//! are concatenated and passed through a multiplicative kinematic gate:
//!
//! ```text
//!   h_bi[t] = [h_fwd[t] | h_bwd[t]]                   (t, 2*d_h)
//!   z_self  = h_bi ⊙ σ(h_bi @ W_k + b_k)
//! ```
//!
//! The ablation variants replace an encoder with a single per-timestep
//! linear layer of matching output width, leaving the rest of the pipeline
//! untouched.

use crate::autodiff::{Tape, TapeError, Var};
use crate::autodiff::Tensor;
use crate::nn::{init_linear, insert_attention, multi_head_attention};
use crate::params::{ParamTree, VarMap};
use rand::Rng;
use thiserror::Error;

/// Convolution kernel widths of the environment encoder branches.
pub const ENV_KERNELS: [usize; 3] = [3, 5, 7];

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("non-finite recurrent state at step {step}")]
    NonFinite { step: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EnvEncoderDims {
    /// Width of one env-stream frame.
    pub d_env: usize,
    /// Output channels per convolution branch; `d_e = 3 * branch_channels`.
    pub branch_channels: usize,
    /// Attention heads over the timestep axis (must divide `d_e`).
    pub heads: usize,
}

impl EnvEncoderDims {
    pub fn d_e(&self) -> usize {
        ENV_KERNELS.len() * self.branch_channels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SelfEncoderDims {
    /// Width of one self-stream frame.
    pub d_self: usize,
    /// Hidden width of each direction; output width is `2 * d_h`.
    pub d_h: usize,
}

impl SelfEncoderDims {
    pub fn d_out(&self) -> usize {
        2 * self.d_h
    }
}

// ── environment encoder ─────────────────────────────────────────────────

pub fn init_env_encoder(tree: &mut ParamTree, prefix: &str, dims: &EnvEncoderDims, rng: &mut impl Rng) {
    let c = dims.branch_channels;
    for k in ENV_KERNELS {
        tree.insert(&format!("{prefix}.conv{k}.w"), init_linear(rng, k * dims.d_env, c, k * dims.d_env));
        tree.insert(&format!("{prefix}.conv{k}.b"), Tensor::zeros(&[1, c]));
    }
    let d_e = dims.d_e();
    insert_attention(tree, &format!("{prefix}.attn"), rng, d_e);
    tree.insert(&format!("{prefix}.ln.g"), Tensor::filled(&[1, d_e], 1.0));
    tree.insert(&format!("{prefix}.ln.b"), Tensor::zeros(&[1, d_e]));
}

/// Encode an env-stream window `[t, d_env]` into `[t, d_e]`.
pub fn env_encode(
    tape: &mut Tape,
    vars: &VarMap,
    prefix: &str,
    dims: &EnvEncoderDims,
    x: Var,
) -> Result<Var, EncoderError> {
    let mut branches = Vec::with_capacity(ENV_KERNELS.len());
    for k in ENV_KERNELS {
        let w = vars.v(&format!("{prefix}.conv{k}.w"));
        let b = vars.v(&format!("{prefix}.conv{k}.b"));
        branches.push(tape.conv1d(x, w, b, k)?);
    }
    let s_env = tape.concat(&branches, 1)?;
    let (attn, _) = multi_head_attention(tape, vars, &format!("{prefix}.attn"), s_env, s_env, dims.heads)?;
    let res = tape.add(attn, s_env)?;
    let z = tape.layer_norm(res, vars.v(&format!("{prefix}.ln.g")), vars.v(&format!("{prefix}.ln.b")), 1e-5)?;
    Ok(z)
}

/// Ablation variant: one linear layer per timestep, same output width.
pub fn init_env_linear(tree: &mut ParamTree, prefix: &str, dims: &EnvEncoderDims, rng: &mut impl Rng) {
    tree.insert(&format!("{prefix}.lin.w"), init_linear(rng, dims.d_env, dims.d_e(), dims.d_env));
    tree.insert(&format!("{prefix}.lin.b"), Tensor::zeros(&[1, dims.d_e()]));
}

pub fn env_encode_linear(
    tape: &mut Tape,
    vars: &VarMap,
    prefix: &str,
    x: Var,
) -> Result<Var, EncoderError> {
    let xw = tape.matmul(x, vars.v(&format!("{prefix}.lin.w")))?;
    Ok(tape.add_row(xw, vars.v(&format!("{prefix}.lin.b")))?)
}

// ── self encoder ────────────────────────────────────────────────────────

pub fn init_self_encoder(tree: &mut ParamTree, prefix: &str, dims: &SelfEncoderDims, rng: &mut impl Rng) {
    for dir in ["fwd", "bwd"] {
        tree.insert(
            &format!("{prefix}.{dir}.wx"),
            init_linear(rng, dims.d_self, 4 * dims.d_h, dims.d_self),
        );
        tree.insert(&format!("{prefix}.{dir}.wh"), init_linear(rng, dims.d_h, 4 * dims.d_h, dims.d_h));
        tree.insert(&format!("{prefix}.{dir}.b"), Tensor::zeros(&[1, 4 * dims.d_h]));
    }
    let w = dims.d_out();
    tree.insert(&format!("{prefix}.gate.w"), init_linear(rng, w, w, w));
    tree.insert(&format!("{prefix}.gate.b"), Tensor::zeros(&[1, w]));
}

/// One LSTM direction over the given timestep order; returns per-step
/// hidden states indexed by original time.
fn lstm_pass(
    tape: &mut Tape,
    vars: &VarMap,
    prefix: &str,
    dims: &SelfEncoderDims,
    x: Var,
    steps: &[usize],
) -> Result<Vec<Var>, EncoderError> {
    let d_h = dims.d_h;
    let wx = vars.v(&format!("{prefix}.wx"));
    let wh = vars.v(&format!("{prefix}.wh"));
    let b = vars.v(&format!("{prefix}.b"));
    let mut h = tape.constant(Tensor::zeros(&[1, d_h]));
    let mut c = tape.constant(Tensor::zeros(&[1, d_h]));
    let mut out: Vec<Option<Var>> = vec![None; steps.len()];
    for &t in steps {
        let xt = tape.slice(x, 0, t, t + 1)?;
        let xw = tape.matmul(xt, wx)?;
        let hw = tape.matmul(h, wh)?;
        let pre = tape.add(xw, hw)?;
        let pre = tape.add_row(pre, b)?;
        let i_gate = tape.slice(pre, 1, 0, d_h)?;
        let i_gate = tape.sigmoid(i_gate);
        let f_gate = tape.slice(pre, 1, d_h, 2 * d_h)?;
        let f_gate = tape.sigmoid(f_gate);
        let g_gate = tape.slice(pre, 1, 2 * d_h, 3 * d_h)?;
        let g_gate = tape.tanh(g_gate);
        let o_gate = tape.slice(pre, 1, 3 * d_h, 4 * d_h)?;
        let o_gate = tape.sigmoid(o_gate);
        let fc = tape.mul(f_gate, c)?;
        let ig = tape.mul(i_gate, g_gate)?;
        c = tape.add(fc, ig)?;
        let ct = tape.tanh(c);
        h = tape.mul(o_gate, ct)?;
        if !tape.value(h).is_finite() || !tape.value(c).is_finite() {
            return Err(EncoderError::NonFinite { step: t });
        }
        out[t] = Some(h);
    }
    Ok(out.into_iter().map(|v| v.unwrap()).collect())
}

/// Encode a self-stream window `[t, d_self]` into `[t, 2*d_h]`.
pub fn self_encode(
    tape: &mut Tape,
    vars: &VarMap,
    prefix: &str,
    dims: &SelfEncoderDims,
    x: Var,
) -> Result<Var, EncoderError> {
    let t_len = tape.value(x).rows();
    let fwd_order: Vec<usize> = (0..t_len).collect();
    let bwd_order: Vec<usize> = (0..t_len).rev().collect();
    let h_fwd = lstm_pass(tape, vars, &format!("{prefix}.fwd"), dims, x, &fwd_order)?;
    let h_bwd = lstm_pass(tape, vars, &format!("{prefix}.bwd"), dims, x, &bwd_order)?;
    let mut rows = Vec::with_capacity(t_len);
    for t in 0..t_len {
        rows.push(tape.concat(&[h_fwd[t], h_bwd[t]], 1)?);
    }
    let h_bi = tape.concat(&rows, 0)?;
    let gw = tape.matmul(h_bi, vars.v(&format!("{prefix}.gate.w")))?;
    let gpre = tape.add_row(gw, vars.v(&format!("{prefix}.gate.b")))?;
    let gate = tape.sigmoid(gpre);
    Ok(tape.mul(h_bi, gate)?)
}

/// Ablation variant: one linear layer per timestep, same output width.
pub fn init_self_linear(tree: &mut ParamTree, prefix: &str, dims: &SelfEncoderDims, rng: &mut impl Rng) {
    tree.insert(&format!("{prefix}.lin.w"), init_linear(rng, dims.d_self, dims.d_out(), dims.d_self));
    tree.insert(&format!("{prefix}.lin.b"), Tensor::zeros(&[1, dims.d_out()]));
}

pub fn self_encode_linear(
    tape: &mut Tape,
    vars: &VarMap,
    prefix: &str,
    x: Var,
) -> Result<Var, EncoderError> {
    let xw = tape.matmul(x, vars.v(&format!("{prefix}.lin.w")))?;
    Ok(tape.add_row(xw, vars.v(&format!("{prefix}.lin.b")))?)
}

// ── projections into the shared fusion width ────────────────────────────

pub fn init_projection(tree: &mut ParamTree, prefix: &str, d_in: usize, d_model: usize, rng: &mut impl Rng) {
    tree.insert(&format!("{prefix}.w"), init_linear(rng, d_in, d_model, d_in));
    tree.insert(&format!("{prefix}.b"), Tensor::zeros(&[1, d_model]));
}

/// Affine map into the shared `d_model` space; no nonlinearity.
pub fn project(tape: &mut Tape, vars: &VarMap, prefix: &str, z: Var) -> Result<Var, TapeError> {
    let zw = tape.matmul(z, vars.v(&format!("{prefix}.w")))?;
    tape.add_row(zw, vars.v(&format!("{prefix}.b")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn env_dims() -> EnvEncoderDims {
        EnvEncoderDims { d_env: 5, branch_channels: 2, heads: 2 }
    }

    fn self_dims() -> SelfEncoderDims {
        SelfEncoderDims { d_self: 4, d_h: 3 }
    }

    fn window(rows: usize, cols: usize, seed: f64) -> Tensor {
        Tensor::new(
            &[rows, cols],
            (0..rows * cols).map(|i| ((i as f64) * 0.713 + seed).sin()).collect(),
        )
    }

    #[test]
    fn env_encoder_output_shape_is_t_by_de() {
        let dims = env_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tree = ParamTree::new();
        init_env_encoder(&mut tree, "env", &dims, &mut rng);
        let mut tape = Tape::new();
        let vars = tree.bind(&mut tape);
        let x = tape.constant(window(7, dims.d_env, 0.0));
        let z = env_encode(&mut tape, &vars, "env", &dims, x).unwrap();
        assert_eq!(tape.value(z).shape(), &[7, dims.d_e()]);
        assert!(tape.value(z).is_finite());
    }

    #[test]
    fn env_encoder_rows_are_layer_normalized() {
        let dims = env_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tree = ParamTree::new();
        init_env_encoder(&mut tree, "env", &dims, &mut rng);
        let mut tape = Tape::new();
        let vars = tree.bind(&mut tape);
        let x = tape.constant(window(5, dims.d_env, 1.0));
        let z = env_encode(&mut tape, &vars, "env", &dims, x).unwrap();
        let v = tape.value(z);
        for r in 0..v.rows() {
            let n = v.cols() as f64;
            let mean: f64 = (0..v.cols()).map(|c| v.at(r, c)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-9, "row {r} mean {mean}");
        }
    }

    #[test]
    fn self_encoder_concatenates_directions_and_gates() {
        let dims = self_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tree = ParamTree::new();
        init_self_encoder(&mut tree, "self", &dims, &mut rng);
        let mut tape = Tape::new();
        let vars = tree.bind(&mut tape);
        let x = tape.constant(window(6, dims.d_self, 2.0));
        let z = self_encode(&mut tape, &vars, "self", &dims, x).unwrap();
        assert_eq!(tape.value(z).shape(), &[6, dims.d_out()]);
    }

    /// With forward and backward cells sharing weights, reversing the input
    /// must reverse the rows and swap the two output halves.
    #[test]
    fn tied_weights_make_reversal_a_symmetry() {
        let dims = self_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tree = ParamTree::new();
        init_self_encoder(&mut tree, "self", &dims, &mut rng);
        for name in ["wx", "wh", "b"] {
            let fwd = tree.get(&format!("self.fwd.{name}")).clone();
            *tree.get_mut(&format!("self.bwd.{name}")) = fwd;
        }
        // The gate must not break the symmetry: make it act identically on
        // both halves by zeroing it (gate = sigmoid(0) = 0.5 everywhere).
        *tree.get_mut("self.gate.w") = Tensor::zeros(&[dims.d_out(), dims.d_out()]);

        let x = window(5, dims.d_self, 3.0);
        let mut rev_data = Vec::new();
        for r in (0..5).rev() {
            rev_data.extend_from_slice(&x.data()[r * dims.d_self..(r + 1) * dims.d_self]);
        }
        let x_rev = Tensor::new(&[5, dims.d_self], rev_data);

        let run = |input: Tensor| {
            let mut tape = Tape::new();
            let vars = tree.bind(&mut tape);
            let xv = tape.constant(input);
            let z = self_encode(&mut tape, &vars, "self", &dims, xv).unwrap();
            tape.value(z).clone()
        };
        let z = run(x);
        let z_rev = run(x_rev);
        let d_h = dims.d_h;
        for t in 0..5 {
            for j in 0..d_h {
                let a = z.at(t, j);
                let b = z_rev.at(4 - t, d_h + j);
                assert!((a - b).abs() < 1e-12, "fwd[{t},{j}]={a} vs rev bwd={b}");
            }
        }
    }

    #[test]
    fn gate_attenuates_but_never_flips_sign() {
        let dims = self_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tree = ParamTree::new();
        init_self_encoder(&mut tree, "self", &dims, &mut rng);
        let mut tape = Tape::new();
        let vars = tree.bind(&mut tape);
        let x = tape.constant(window(4, dims.d_self, 4.0));

        // reconstruct h_bi by disabling the gate weights -> gate = 0.5
        let mut ungated = tree.clone();
        *ungated.get_mut("self.gate.w") = Tensor::zeros(&[dims.d_out(), dims.d_out()]);
        let z = self_encode(&mut tape, &vars, "self", &dims, x).unwrap();
        let mut tape2 = Tape::new();
        let vars2 = ungated.bind(&mut tape2);
        let x2 = tape2.constant(window(4, dims.d_self, 4.0));
        let half = self_encode(&mut tape2, &vars2, "self", &dims, x2).unwrap();
        let zv = tape.value(z);
        let hv = tape2.value(half); // h_bi * 0.5
        for i in 0..zv.len() {
            let h_bi = hv.data()[i] * 2.0;
            let zg = zv.data()[i];
            assert!(zg.abs() <= h_bi.abs() + 1e-12, "gate amplified {i}: {zg} vs {h_bi}");
            assert!(zg * h_bi >= 0.0, "gate flipped sign at {i}");
        }
    }

    #[test]
    fn nan_input_is_rejected_with_step_index() {
        let dims = self_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut tree = ParamTree::new();
        init_self_encoder(&mut tree, "self", &dims, &mut rng);
        let mut tape = Tape::new();
        let vars = tree.bind(&mut tape);
        let mut bad = window(4, dims.d_self, 0.0);
        bad.data_mut()[2 * dims.d_self] = f64::NAN; // frame 2
        let x = tape.constant(bad);
        match self_encode(&mut tape, &vars, "self", &dims, x) {
            Err(EncoderError::NonFinite { step }) => assert_eq!(step, 2),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn projection_of_zero_input_is_the_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut tree = ParamTree::new();
        init_projection(&mut tree, "fusion.p_env", 6, 4, &mut rng);
        *tree.get_mut("fusion.p_env.b") = Tensor::row(&[0.1, -0.2, 0.3, -0.4]);
        let mut tape = Tape::new();
        let vars = tree.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[3, 6]));
        let y = project(&mut tape, &vars, "fusion.p_env", x).unwrap();
        for r in 0..3 {
            assert_eq!(tape.value(y).at(r, 0), 0.1);
            assert_eq!(tape.value(y).at(r, 3), -0.4);
        }
    }

    #[test]
    fn encoder_gradients_check_out_at_tiny_dims() {
        let env = EnvEncoderDims { d_env: 3, branch_channels: 1, heads: 1 };
        let slf = SelfEncoderDims { d_self: 3, d_h: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut tree = ParamTree::new();
        init_env_encoder(&mut tree, "env", &env, &mut rng);
        init_self_encoder(&mut tree, "self", &slf, &mut rng);
        let x_env = window(4, env.d_env, 0.3);
        let x_self = window(4, slf.d_self, 0.6);
        for name in ["env.conv5.w", "env.attn.wq", "env.ln.g", "self.fwd.wx", "self.bwd.wh", "self.gate.w"] {
            let probe_point = tree.get(name).clone();
            let bound = tree.clone();
            let (x_env, x_self) = (x_env.clone(), x_self.clone());
            let (env_d, slf_d) = (env, slf);
            let report = grad_check(
                move |tape, probe| {
                    let vars = bound.bind_override(tape, name, Some(probe));
                    let out = if name.starts_with("env.") {
                        let x = tape.constant(x_env.clone());
                        env_encode(tape, &vars, "env", &env_d, x)
                    } else {
                        let x = tape.constant(x_self.clone());
                        self_encode(tape, &vars, "self", &slf_d, x)
                    }
                    .map_err(|e| match e {
                        EncoderError::Tape(t) => t,
                        EncoderError::NonFinite { .. } => unreachable!(),
                    })?;
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
