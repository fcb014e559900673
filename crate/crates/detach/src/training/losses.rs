//! Stage losses and specialization regularizers.
//!
//! * [`loss_env_pretrain`] — reconstruct raw env observations from the env
//!   encoding through the auxiliary decoder.
//! * [`loss_self_pretrain`] — predict the next self encoding from the
//!   current one with the auxiliary next-step network.
//! * [`loss_fusion_stage`] — task loss plus an optional fusion-quality term
//!   (disabled by default; the quality target is caller-supplied).
//! * [`specialization_regularizers`] — cross-stream decorrelation, temporal
//!   smoothness of the self stream, and decoder-based semantic preservation.
//! * [`loss_joint`] — task loss plus the weighted regularizers.
//!
//! Every loss is built on the tape, so one `backward` call differentiates
//! the full objective.

use crate::autodiff::{Tape, TapeError, Tensor, Var};
use crate::params::{ParamTree, VarMap};
use crate::policy::{self, NetDims, PolicyError};

/// Variance below this is treated as zero when standardizing feature
/// columns; such columns standardize to (numerically) zero and are reported.
const VAR_EPS: f64 = 1e-12;

/// Minimum row count for cross-correlation estimation.
pub const MIN_CORR_BATCH: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("loss weight {name} must be non-negative, got {value}")]
    NegativeWeight { name: &'static str, value: f64 },
    #[error("self-stream series needs at least 2 steps, got {got}")]
    SeriesTooShort { got: usize },
    #[error("correlation needs at least {MIN_CORR_BATCH} rows, got {got}")]
    BatchTooSmall { got: usize },
    #[error("stream batches disagree on row count: {rows_env} vs {rows_self}")]
    RowMismatch { rows_env: usize, rows_self: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("fusion stage requires frozen encoder group `{group}`")]
    EncoderNotFrozen { group: &'static str },
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Weights of the composite objectives. `alpha`/`beta` weight the two halves
/// of the semantic term; the `lambda_*` factors scale whole terms.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub lambda_quality: f64,
    pub lambda_decouple: f64,
    pub lambda_temporal: f64,
    pub lambda_semantic: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    /// The quality term defaults to off (no principled target exists; see
    /// [`FusionQuality`]); the regularizer weights are small enough that the
    /// regularizers stay below ~10% of the task loss at initialization,
    /// which [`super::protocol`] asserts at the start of the joint stage.
    fn default() -> Self {
        LossWeights {
            lambda_quality: 0.0,
            lambda_decouple: 1e-2,
            lambda_temporal: 1e-3,
            lambda_semantic: 1e-2,
            alpha: 1.0,
            beta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        for (name, value) in [
            ("lambda_quality", self.lambda_quality),
            ("lambda_decouple", self.lambda_decouple),
            ("lambda_temporal", self.lambda_temporal),
            ("lambda_semantic", self.lambda_semantic),
            ("alpha", self.alpha),
            ("beta", self.beta),
        ] {
            if !(value >= 0.0) {
                return Err(LossError::NegativeWeight { name, value });
            }
        }
        Ok(())
    }
}

/// Squared error summed over features and averaged over rows:
/// `(1/R) Σ_r ‖pred_r − target_r‖²`. Rows are batch·time, so the value is
/// comparable across batch sizes and window lengths.
pub fn recon_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var, TapeError> {
    let rows = tape.value(pred).shape()[0];
    let diff = tape.sub(pred, target)?;
    let sq = tape.square(diff);
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / rows as f64))
}

/// Env-stream pretraining loss: encode each window, decode it with
/// `aux.dec_env`, and average the reconstruction error over windows.
///
/// Each window is `[T, d_env_raw]`.
pub fn loss_env_pretrain(
    tape: &mut Tape,
    vars: &VarMap,
    dims: &NetDims,
    windows: &[Tensor],
) -> Result<Var, LossError> {
    if windows.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let mut acc: Option<Var> = None;
    for w in windows {
        let x = tape.constant(w.clone());
        let z = policy::encode_env(tape, vars, dims, x)?;
        let recon = policy::decode(tape, vars, "aux.dec_env", z)?;
        let l = recon_loss(tape, recon, x)?;
        acc = Some(match acc {
            None => l,
            Some(a) => tape.add(a, l)?,
        });
    }
    Ok(tape.scale(acc.unwrap(), 1.0 / windows.len() as f64))
}

/// Self-stream pretraining loss: encode each series, predict step `t+1`'s
/// encoding from step `t`'s with `aux.f_pred`, and sum the squared error
/// over the series (averaged over the batch).
///
/// Each series is `[T, d_self_raw]` with `T ≥ 2`.
pub fn loss_self_pretrain(
    tape: &mut Tape,
    vars: &VarMap,
    dims: &NetDims,
    series: &[Tensor],
) -> Result<Var, LossError> {
    if series.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let mut acc: Option<Var> = None;
    for s in series {
        let t = s.shape()[0];
        if t < 2 {
            return Err(LossError::SeriesTooShort { got: t });
        }
        let x = tape.constant(s.clone());
        let z = policy::encode_self(tape, vars, dims, x)?;
        let present = tape.slice(z, 0, 0, t - 1)?;
        let future = tape.slice(z, 0, 1, t)?;
        let pred = policy::predict_next(tape, vars, present)?;
        let diff = tape.sub(future, pred)?;
        let sq = tape.square(diff);
        let l = tape.sum(sq);
        acc = Some(match acc {
            None => l,
            Some(a) => tape.add(a, l)?,
        });
    }
    Ok(tape.scale(acc.unwrap(), 1.0 / series.len() as f64))
}

/// Optional fusion-quality term: compares an attention readout against a
/// caller-supplied target. There is no principled built-in target, so the
/// term only activates when a provider constructs this struct (and
/// `lambda_quality > 0`).
pub struct FusionQuality {
    /// Attention output to pull toward the target.
    pub attended: Var,
    /// Target features, same shape as `attended`.
    pub target: Tensor,
}

/// Fusion-stage objective: the task loss, plus `λ_quality ‖attended −
/// target‖²` when a quality target is configured. Requires the encoder
/// groups to be frozen — this stage trains fusion and trunk only.
pub fn loss_fusion_stage(
    tape: &mut Tape,
    tree: &ParamTree,
    task_loss: Var,
    quality: Option<FusionQuality>,
    w: &LossWeights,
) -> Result<Var, LossError> {
    w.validate()?;
    for group in ["env", "self"] {
        if !tree.frozen_groups().any(|g| g == group) {
            return Err(LossError::EncoderNotFrozen { group });
        }
    }
    let Some(q) = quality else {
        return Ok(task_loss);
    };
    if w.lambda_quality == 0.0 {
        return Ok(task_loss);
    }
    let target = tape.constant(q.target);
    let diff = tape.sub(q.attended, target)?;
    let sq = tape.square(diff);
    let qloss = tape.sum(sq);
    let scaled = tape.scale(qloss, w.lambda_quality);
    Ok(tape.add(task_loss, scaled)?)
}

/// Inputs to [`specialization_regularizers`]. All `Var`s already live on the
/// caller's tape, so gradients flow back into the encoders that produced
/// them.
pub struct RegInputs<'a> {
    /// Row-stacked env features across the batch, `[N, d_env_feat]`.
    pub z_env_batch: Var,
    /// Row-stacked self features from the same rows, `[N, d_self_feat]`.
    pub z_self_batch: Var,
    /// Per-window self-feature series (each `[T, d_self_feat]`) for the
    /// temporal term.
    pub z_self_series: &'a [Var],
    /// Decoded env reconstruction and its raw target (same shapes).
    pub recon_env: Var,
    pub obs_env: &'a Tensor,
    /// Decoded self reconstruction and its raw target (same shapes).
    pub recon_self: Var,
    pub obs_self: &'a Tensor,
}

/// The three regularizer values (tape nodes) plus the zero-variance columns
/// that were neutralized during standardization.
pub struct RegValues {
    pub r_decouple: Var,
    pub r_temporal: Var,
    pub r_semantic: Var,
    pub zero_var_env_cols: Vec<usize>,
    pub zero_var_self_cols: Vec<usize>,
}

/// Standardize each column of `x` on-tape: `(x − mean) / √(var + ε)`.
/// Columns with (numerically) zero variance come out as zeros; their
/// indices are returned for reporting.
fn standardize(tape: &mut Tape, x: Var) -> Result<(Var, Vec<usize>), TapeError> {
    let mean = tape.mean_rows(x);
    let centered = tape.sub_row(x, mean)?;
    let sq = tape.square(centered);
    let var = tape.mean_rows(sq);
    let zero_cols: Vec<usize> = tape
        .value(var)
        .data()
        .iter()
        .enumerate()
        .filter(|(_, v)| **v <= VAR_EPS)
        .map(|(i, _)| i)
        .collect();
    let var_eps = tape.add_const(var, VAR_EPS);
    let std = tape.sqrt(var_eps);
    let inv = tape.recip(std);
    let standardized = tape.mul_row(centered, inv)?;
    Ok((standardized, zero_cols))
}

/// Squared Frobenius norm of the cross-correlation matrix between the two
/// feature batches (columns standardized first). Returns the regularizer
/// and the zero-variance column reports for both streams.
pub fn r_decouple(
    tape: &mut Tape,
    z_env: Var,
    z_self: Var,
) -> Result<(Var, Vec<usize>, Vec<usize>), LossError> {
    let n = tape.value(z_env).shape()[0];
    let n_self = tape.value(z_self).shape()[0];
    if n != n_self {
        return Err(LossError::RowMismatch { rows_env: n, rows_self: n_self });
    }
    if n < MIN_CORR_BATCH {
        return Err(LossError::BatchTooSmall { got: n });
    }
    let (ze, zero_env) = standardize(tape, z_env)?;
    let (zs, zero_self) = standardize(tape, z_self)?;
    let zet = tape.transpose(ze);
    let cross = tape.matmul(zet, zs)?;
    let corr = tape.scale(cross, 1.0 / n as f64);
    let sq = tape.square(corr);
    let r = tape.sum(sq);
    Ok((r, zero_env, zero_self))
}

/// Temporal smoothness of one self-feature series `[T, d]`:
/// `Σ_t ‖z^{t+1} − z^t‖²`. A single-step series contributes zero.
pub fn r_temporal(tape: &mut Tape, series: Var) -> Result<Var, TapeError> {
    let t = tape.value(series).shape()[0];
    if t < 2 {
        return Ok(tape.constant(Tensor::zeros(&[1, 1])));
    }
    let present = tape.slice(series, 0, 0, t - 1)?;
    let future = tape.slice(series, 0, 1, t)?;
    let diff = tape.sub(future, present)?;
    let sq = tape.square(diff);
    Ok(tape.sum(sq))
}

/// Semantic preservation: `α·recon(env) + β·recon(self)`, each half the
/// row-averaged squared reconstruction error of [`recon_loss`].
pub fn r_semantic(
    tape: &mut Tape,
    recon_env: Var,
    obs_env: &Tensor,
    recon_self: Var,
    obs_self: &Tensor,
    alpha: f64,
    beta: f64,
) -> Result<Var, TapeError> {
    let te = tape.constant(obs_env.clone());
    let ts = tape.constant(obs_self.clone());
    let le = recon_loss(tape, recon_env, te)?;
    let ls = recon_loss(tape, recon_self, ts)?;
    let le = tape.scale(le, alpha);
    let ls = tape.scale(ls, beta);
    tape.add(le, ls)
}

/// Compute all three specialization regularizers. The temporal term is
/// averaged over the supplied series so its scale does not grow with batch
/// size.
pub fn specialization_regularizers(
    tape: &mut Tape,
    inputs: &RegInputs,
    w: &LossWeights,
) -> Result<RegValues, LossError> {
    w.validate()?;
    let (dec, zero_env, zero_self) = r_decouple(tape, inputs.z_env_batch, inputs.z_self_batch)?;
    let mut temporal: Option<Var> = None;
    for &s in inputs.z_self_series {
        let r = r_temporal(tape, s)?;
        temporal = Some(match temporal {
            None => r,
            Some(a) => tape.add(a, r)?,
        });
    }
    let temporal = match temporal {
        None => tape.constant(Tensor::zeros(&[1, 1])),
        Some(t) => tape.scale(t, 1.0 / inputs.z_self_series.len() as f64),
    };
    let semantic = r_semantic(
        tape,
        inputs.recon_env,
        inputs.obs_env,
        inputs.recon_self,
        inputs.obs_self,
        w.alpha,
        w.beta,
    )?;
    Ok(RegValues {
        r_decouple: dec,
        r_temporal: temporal,
        r_semantic: semantic,
        zero_var_env_cols: zero_env,
        zero_var_self_cols: zero_self,
    })
}

/// Joint-stage objective: `L_task + λ_d·R_decouple + λ_t·R_temporal +
/// λ_s·R_semantic`.
pub fn loss_joint(
    tape: &mut Tape,
    task_loss: Var,
    regs: &RegValues,
    w: &LossWeights,
) -> Result<Var, LossError> {
    w.validate()?;
    let d = tape.scale(regs.r_decouple, w.lambda_decouple);
    let t = tape.scale(regs.r_temporal, w.lambda_temporal);
    let s = tape.scale(regs.r_semantic, w.lambda_semantic);
    let dt = tape.add(d, t)?;
    let dts = tape.add(dt, s)?;
    Ok(tape.add(task_loss, dts)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{EnvEncoderDims, SelfEncoderDims};
    use crate::policy::{init_policy, EncoderKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Dims whose Linear encoders can be made exact identities: env raw
    /// width equals the env feature width (3·branch_channels) and self raw
    /// width equals the self output width (2·d_h).
    fn identity_capable_dims() -> NetDims {
        NetDims {
            d_env_raw: 6,
            d_self_raw: 4,
            window: 5,
            env: EnvEncoderDims { d_env: 6, branch_channels: 2, heads: 2 },
            self_enc: SelfEncoderDims { d_self: 4, d_h: 2 },
            d_model: 8,
            fusion_heads: 2,
            trunk_layers: 1,
            trunk_heads: 2,
            action_dim: 3,
            env_kind: EncoderKind::Linear,
            self_kind: EncoderKind::Linear,
        }
    }

    fn eye(n: usize) -> Tensor {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.set(i, i, 1.0);
        }
        t
    }

    fn ready_tree(dims: &NetDims, seed: u64) -> ParamTree {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tree = ParamTree::new();
        init_policy(&mut tree, dims, &mut rng);
        tree
    }

    /// Positive-valued window so identity ReLU decoders stay exact.
    fn positive_window(rows: usize, cols: usize, offset: f64) -> Tensor {
        Tensor::new(
            &[rows, cols],
            (0..rows * cols)
                .map(|i| 0.05 + 0.9 * ((i as f64 * 0.613 + offset).sin() * 0.5 + 0.5))
                .collect(),
        )
    }

    #[test]
    fn weights_default_to_documented_values_and_reject_negatives() {
        let w = LossWeights::default();
        assert_eq!(w.lambda_quality, 0.0);
        assert_eq!(w.lambda_decouple, 1e-2);
        assert_eq!(w.lambda_temporal, 1e-3);
        assert_eq!(w.lambda_semantic, 1e-2);
        assert_eq!(w.alpha, 1.0);
        assert_eq!(w.beta, 1.0);
        w.validate().unwrap();
        let bad = LossWeights { lambda_temporal: -0.1, ..LossWeights::default() };
        match bad.validate() {
            Err(LossError::NegativeWeight { name, value }) => {
                assert_eq!(name, "lambda_temporal");
                assert_eq!(value, -0.1);
            }
            other => panic!("expected rejection, got {other:?}"),
        }
    }

    #[test]
    fn env_pretrain_identity_pipeline_has_zero_loss() {
        let dims = identity_capable_dims();
        let mut tree = ready_tree(&dims, 1);
        *tree.get_mut("env.lin.w") = eye(6);
        *tree.get_mut("env.lin.b") = Tensor::zeros(&[1, 6]);
        *tree.get_mut("aux.dec_env.l1.w") = eye(6);
        *tree.get_mut("aux.dec_env.l1.b") = Tensor::zeros(&[1, 6]);
        *tree.get_mut("aux.dec_env.l2.w") = eye(6);
        *tree.get_mut("aux.dec_env.l2.b") = Tensor::zeros(&[1, 6]);
        let windows = vec![positive_window(5, 6, 0.0), positive_window(5, 6, 2.0)];
        let mut tape = Tape::new();
        let vars = tree.bind(&mut tape);
        let loss = loss_env_pretrain(&mut tape, &vars, &dims, &windows).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
    }

    #[test]
    fn env_pretrain_zero_decoder_reduces_to_mean_input_power() {
        let dims = identity_capable_dims();
        let mut tree = ready_tree(&dims, 2);
        *tree.get_mut("aux.dec_env.l2.w") = Tensor::zeros(&[6, 6]);
        *tree.get_mut("aux.dec_env.l2.b") = Tensor::zeros(&[1, 6]);
        let w1 = positive_window(5, 6, 0.3);
        let w2 = positive_window(5, 6, 1.7);
        let expected: f64 = [&w1, &w2]
            .iter()
            .map(|w| w.data().iter().map(|x| x * x).sum::<f64>() / 5.0)
            .sum::<f64>()
            / 2.0;
        let mut tape = Tape::new();
        let vars = tree.bind(&mut tape);
        let loss = loss_env_pretrain(&mut tape, &vars, &dims, &[w1, w2]).unwrap();
        assert!((tape.value(loss).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn env_pretrain_matches_direct_formula_on_random_case() {
        let dims = identity_capable_dims();
        let tree = ready_tree(&dims, 3);
        let windows = vec![positive_window(5, 6, 0.9), positive_window(5, 6, 4.2)];

        let mut tape = Tape::new();
        let vars = tree.bind(&mut tape);
        let loss = loss_env_pretrain(&mut tape, &vars, &dims, &windows).unwrap();

        // Oracle: recompute z and the decode in plain f64 loops, then apply
        // the documented reduction (sum of squares / rows, batch-averaged).
        let mut expected = 0.0;
        for w in &windows {
            let z = matmul_plus_row(w, tree.get("env.lin.w"), tree.get("env.lin.b"));
            let h = matmul_plus_row(&z, tree.get("aux.dec_env.l1.w"), tree.get("aux.dec_env.l1.b"));
            let h = relu_t(&h);
            let recon =
                matmul_plus_row(&h, tree.get("aux.dec_env.l2.w"), tree.get("aux.dec_env.l2.b"));
            let sse: f64 = recon
                .data()
                .iter()
                .zip(w.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            expected += sse / w.shape()[0] as f64;
        }
        expected /= windows.len() as f64;
        assert!((tape.value(loss).item() - expected).abs() < 1e-10);
    }

    fn matmul_plus_row(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
        let (n, k) = (x.shape()[0], x.shape()[1]);
        let m = w.shape()[1];
        assert_eq!(w.shape()[0], k);
        let mut out = Tensor::zeros(&[n, m]);
        for i in 0..n {
            for j in 0..m {
                let mut acc = 0.0;
                for l in 0..k {
                    acc += x.at(i, l) * w.at(l, j);
                }
                out.set(i, j, acc + b.at(0, j));
            }
        }
        out
    }

    fn relu_t(x: &Tensor) -> Tensor {
        Tensor::new(&x.shape().to_vec(), x.data().iter().map(|v| v.max(0.0)).collect())
    }

    #[test]
    fn self_pretrain_rejects_single_step_series() {
        let dims = identity_capable_dims();
        let tree = ready_tree(&dims, 4);
        let mut tape = Tape::new();
        let vars = tree.bind(&mut tape);
        match loss_self_pretrain(&mut tape, &vars, &dims, &[positive_window(1, 4, 0.0)]) {
            Err(LossError::SeriesTooShort { got: 1 }) => {}
            other => panic!("expected rejection, got {other:?}"),
        }
    }

    #[test]
    fn self_pretrain_constant_series_with_identity_predictor_is_zero() {
        let dims = identity_capable_dims();
        let mut tree = ready_tree(&dims, 5);
        *tree.get_mut("aux.f_pred.w") = eye(4);
        *tree.get_mut("aux.f_pred.b") = Tensor::zeros(&[1, 4]);
        let constant = Tensor::new(&[6, 4], vec![0.3; 24]);
        let mut tape = Tape::new();
        let vars = tree.bind(&mut tape);
        let loss = loss_self_pretrain(&mut tape, &vars, &dims, &[constant]).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
    }

    #[test]
    fn self_pretrain_zero_predictor_reduces_to_future_feature_power() {
        let dims = identity_capable_dims();
        let mut tree = ready_tree(&dims, 6);
        *tree.get_mut("aux.f_pred.w") = Tensor::zeros(&[4, 4]);
        *tree.get_mut("aux.f_pred.b") = Tensor::zeros(&[1, 4]);
        let series = positive_window(5, 4, 0.8);
        let z = matmul_plus_row(&series, tree.get("self.lin.w"), tree.get("self.lin.b"));
        let expected: f64 = (1..5)
            .map(|t| (0..4).map(|j| z.at(t, j) * z.at(t, j)).sum::<f64>())
            .sum();
        let mut tape = Tape::new();
        let vars = tree.bind(&mut tape);
        let loss = loss_self_pretrain(&mut tape, &vars, &dims, &[series]).unwrap();
        assert!((tape.value(loss).item() - expected).abs() < 1e-10);
    }

    #[test]
    fn self_pretrain_matches_direct_formula_on_random_case() {
        let dims = identity_capable_dims();
        let tree = ready_tree(&dims, 7);
        let series = vec![positive_window(4, 4, 0.1), positive_window(6, 4, 2.9)];
        let mut expected = 0.0;
        for s in &series {
            let z = matmul_plus_row(s, tree.get("self.lin.w"), tree.get("self.lin.b"));
            let t = s.shape()[0];
            let zpast = Tensor::new(
                &[t - 1, 4],
                (0..t - 1).flat_map(|r| (0..4).map(move |c| (r, c))).map(|(r, c)| z.at(r, c)).collect(),
            );
            let pred = matmul_plus_row(&zpast, tree.get("aux.f_pred.w"), tree.get("aux.f_pred.b"));
            for r in 0..t - 1 {
                for c in 0..4 {
                    let d = z.at(r + 1, c) - pred.at(r, c);
                    expected += d * d;
                }
            }
        }
        expected /= series.len() as f64;
        let mut tape = Tape::new();
        let vars = tree.bind(&mut tape);
        let loss = loss_self_pretrain(&mut tape, &vars, &dims, &series).unwrap();
        assert!((tape.value(loss).item() - expected).abs() < 1e-10);
    }

    fn frozen_tree(dims: &NetDims, seed: u64) -> ParamTree {
        let mut tree = ready_tree(dims, seed);
        tree.freeze_group("env");
        tree.freeze_group("self");
        tree
    }

    #[test]
    fn fusion_stage_without_quality_term_is_the_task_loss() {
        let dims = identity_capable_dims();
        let tree = frozen_tree(&dims, 8);
        let mut tape = Tape::new();
        let task = tape.constant(Tensor::row(&[1.25]));
        let w = LossWeights::default();
        let loss = loss_fusion_stage(&mut tape, &tree, task, None, &w).unwrap();
        assert_eq!(loss, task);
        // A configured provider is still inert while lambda_quality == 0.
        let attended = tape.constant(Tensor::row(&[3.0, -1.0]));
        let q = FusionQuality { attended, target: Tensor::row(&[0.0, 0.0]) };
        let loss = loss_fusion_stage(&mut tape, &tree, task, Some(q), &w).unwrap();
        assert_eq!(loss, task);
    }

    #[test]
    fn fusion_stage_quality_term_vanishes_when_target_matches() {
        let dims = identity_capable_dims();
        let tree = frozen_tree(&dims, 9);
        let mut tape = Tape::new();
        let task = tape.constant(Tensor::row(&[0.75]));
        let attended = tape.constant(Tensor::row(&[0.4, -0.2, 1.1]));
        let q = FusionQuality { attended, target: Tensor::row(&[0.4, -0.2, 1.1]) };
        let w = LossWeights { lambda_quality: 0.5, ..LossWeights::default() };
        let loss = loss_fusion_stage(&mut tape, &tree, task, Some(q), &w).unwrap();
        assert_eq!(tape.value(loss).item(), 0.75);
    }

    #[test]
    fn fusion_stage_matches_direct_formula() {
        let dims = identity_capable_dims();
        let tree = frozen_tree(&dims, 10);
        let mut tape = Tape::new();
        let task = tape.constant(Tensor::row(&[2.0]));
        let attended = tape.constant(Tensor::row(&[1.0, 2.0, 3.0]));
        let q = FusionQuality { attended, target: Tensor::row(&[0.5, 2.5, 2.0]) };
        let w = LossWeights { lambda_quality: 0.1, ..LossWeights::default() };
        let loss = loss_fusion_stage(&mut tape, &tree, task, Some(q), &w).unwrap();
        let expected = 2.0 + 0.1 * (0.25 + 0.25 + 1.0);
        assert!((tape.value(loss).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn fusion_stage_rejects_unfrozen_encoders() {
        let dims = identity_capable_dims();
        let mut tree = ready_tree(&dims, 11);
        tree.freeze_group("env"); // self left trainable
        let mut tape = Tape::new();
        let task = tape.constant(Tensor::row(&[1.0]));
        match loss_fusion_stage(&mut tape, &tree, task, None, &LossWeights::default()) {
            Err(LossError::EncoderNotFrozen { group: "self" }) => {}
            other => panic!("expected freeze rejection, got {other:?}"),
        }
    }

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> Tensor {
        Tensor::new(&[n, d], (0..n * d).map(|_| rng.gen_range(-1.0..1.0) * scale).collect())
    }

    /// Plain-f64 cross-correlation oracle mirroring the documented formula
    /// (population moments, ε-guarded standardization).
    fn corr_frob_sq_oracle(a: &Tensor, b: &Tensor) -> f64 {
        let n = a.shape()[0];
        let std_cols = |x: &Tensor| -> Vec<Vec<f64>> {
            let d = x.shape()[1];
            (0..d)
                .map(|j| {
                    let col: Vec<f64> = (0..n).map(|i| x.at(i, j)).collect();
                    let m = col.iter().sum::<f64>() / n as f64;
                    let v = col.iter().map(|c| (c - m) * (c - m)).sum::<f64>() / n as f64;
                    let s = (v + VAR_EPS).sqrt();
                    col.iter().map(|c| (c - m) / s).collect()
                })
                .collect()
        };
        let ca = std_cols(a);
        let cb = std_cols(b);
        let mut frob = 0.0;
        for col_a in &ca {
            for col_b in &cb {
                let corr =
                    col_a.iter().zip(col_b).map(|(x, y)| x * y).sum::<f64>() / n as f64;
                frob += corr * corr;
            }
        }
        frob
    }

    #[test]
    fn decouple_matches_oracle_and_identical_streams_score_at_least_d() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let z = random_matrix(&mut rng, 32, 5, 1.0);
        let mut tape = Tape::new();
        let ze = tape.constant(z.clone());
        let zs = tape.constant(z.clone());
        let (r, zero_e, zero_s) = r_decouple(&mut tape, ze, zs).unwrap();
        let got = tape.value(r).item();
        assert!(zero_e.is_empty() && zero_s.is_empty());
        // Identical streams: diagonal of the correlation matrix is 1.
        assert!(got >= 5.0 - 1e-9, "got {got}");
        let expected = corr_frob_sq_oracle(&z, &z);
        assert!((got - expected).abs() < 1e-10, "{got} vs {expected}");
    }

    #[test]
    fn decouple_on_independent_gaussians_is_small() {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let n = 4096;
        let d = 8;
        let draw = |rng: &mut ChaCha8Rng| -> Tensor {
            Tensor::new(&[n, d], (0..n * d).map(|_| StandardNormal.sample(rng)).collect())
        };
        let a = draw(&mut rng);
        let b = draw(&mut rng);
        let mut tape = Tape::new();
        let ze = tape.constant(a);
        let zs = tape.constant(b);
        let (r, _, _) = r_decouple(&mut tape, ze, zs).unwrap();
        let got = tape.value(r).item();
        // Each squared correlation is ~1/n in expectation; 64 of them stay
        // far below the 0.05·d² sanity line.
        assert!(got < 0.05 * (d * d) as f64, "got {got}");
    }

    #[test]
    fn decouple_is_invariant_to_per_feature_affine_rescaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let a = random_matrix(&mut rng, 64, 4, 1.0);
        let b = random_matrix(&mut rng, 64, 3, 1.0);
        let mut scaled = a.clone();
        let scales = [3.0, -0.5, 40.0, 0.125];
        let shifts = [1.0, -7.0, 0.3, 100.0];
        for i in 0..64 {
            for j in 0..4 {
                scaled.set(i, j, scaled.at(i, j) * scales[j] + shifts[j]);
            }
        }
        let run = |x: &Tensor, y: &Tensor| -> f64 {
            let mut tape = Tape::new();
            let ze = tape.constant(x.clone());
            let zs = tape.constant(y.clone());
            let (r, _, _) = r_decouple(&mut tape, ze, zs).unwrap();
            tape.value(r).item()
        };
        let base = run(&a, &b);
        let after = run(&scaled, &b);
        assert!((base - after).abs() < 1e-6, "{base} vs {after}");
    }

    #[test]
    fn decouple_reports_zero_variance_columns_without_crashing() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let mut a = random_matrix(&mut rng, 16, 4, 1.0);
        for i in 0..16 {
            a.set(i, 2, 0.77); // constant column
        }
        let b = random_matrix(&mut rng, 16, 3, 1.0);
        let mut tape = Tape::new();
        let ze = tape.constant(a.clone());
        let zs = tape.constant(b.clone());
        let (r, zero_e, zero_s) = r_decouple(&mut tape, ze, zs).unwrap();
        assert_eq!(zero_e, vec![2]);
        assert!(zero_s.is_empty());
        let got = tape.value(r).item();
        assert!(got.is_finite());
        // The oracle uses the same ε guard, so the dead column contributes
        // (numerically) nothing in both.
        let expected = corr_frob_sq_oracle(&a, &b);
        assert!((got - expected).abs() < 1e-10);
    }

    #[test]
    fn decouple_rejects_small_and_mismatched_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let a = random_matrix(&mut rng, 4, 3, 1.0);
        let b = random_matrix(&mut rng, 4, 3, 1.0);
        let mut tape = Tape::new();
        let ze = tape.constant(a);
        let zs = tape.constant(b);
        match r_decouple(&mut tape, ze, zs) {
            Err(LossError::BatchTooSmall { got: 4 }) => {}
            other => panic!("expected batch rejection, got {other:?}"),
        }
        let c = random_matrix(&mut rng, 12, 3, 1.0);
        let d = random_matrix(&mut rng, 10, 3, 1.0);
        let zc = tape.constant(c);
        let zd = tape.constant(d);
        match r_decouple(&mut tape, zc, zd) {
            Err(LossError::RowMismatch { rows_env: 12, rows_self: 10 }) => {}
            other => panic!("expected row mismatch, got {other:?}"),
        }
    }

    #[test]
    fn temporal_term_is_zero_for_constant_series_and_matches_formula() {
        let mut tape = Tape::new();
        let constant = tape.constant(Tensor::new(&[5, 3], vec![0.4; 15]));
        let r = r_temporal(&mut tape, constant).unwrap();
        assert_eq!(tape.value(r).item(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let series = random_matrix(&mut rng, 6, 3, 2.0);
        let mut expected = 0.0;
        for t in 0..5 {
            for j in 0..3 {
                let d = series.at(t + 1, j) - series.at(t, j);
                expected += d * d;
            }
        }
        let sv = tape.constant(series);
        let r = r_temporal(&mut tape, sv).unwrap();
        assert!((tape.value(r).item() - expected).abs() < 1e-10);
    }

    #[test]
    fn semantic_term_matches_weighted_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let re = random_matrix(&mut rng, 4, 5, 1.0);
        let oe = random_matrix(&mut rng, 4, 5, 1.0);
        let rs = random_matrix(&mut rng, 4, 3, 1.0);
        let os = random_matrix(&mut rng, 4, 3, 1.0);
        let sse = |a: &Tensor, b: &Tensor| {
            a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
        };
        let expected = 0.7 * sse(&re, &oe) / 4.0 + 1.3 * sse(&rs, &os) / 4.0;
        let mut tape = Tape::new();
        let rev = tape.constant(re);
        let rsv = tape.constant(rs);
        let r = r_semantic(&mut tape, rev, &oe, rsv, &os, 0.7, 1.3).unwrap();
        assert!((tape.value(r).item() - expected).abs() < 1e-10);
    }

    #[test]
    fn joint_loss_composes_the_weighted_sum() {
        let mut tape = Tape::new();
        let task = tape.constant(Tensor::row(&[4.0]));
        let regs = RegValues {
            r_decouple: tape.constant(Tensor::row(&[0.2])),
            r_temporal: tape.constant(Tensor::row(&[0.3])),
            r_semantic: tape.constant(Tensor::row(&[0.5])),
            zero_var_env_cols: vec![],
            zero_var_self_cols: vec![],
        };
        // All-zero weights: the task loss passes through untouched.
        let zero = LossWeights {
            lambda_decouple: 0.0,
            lambda_temporal: 0.0,
            lambda_semantic: 0.0,
            ..LossWeights::default()
        };
        let l = loss_joint(&mut tape, task, &regs, &zero).unwrap();
        assert_eq!(tape.value(l).item(), 4.0);
        // Unit weights: task + (0.2 + 0.3 + 0.5) = task + 1.
        let unit = LossWeights {
            lambda_decouple: 1.0,
            lambda_temporal: 1.0,
            lambda_semantic: 1.0,
            ..LossWeights::default()
        };
        let l = loss_joint(&mut tape, task, &regs, &unit).unwrap();
        assert!((tape.value(l).item() - 5.0).abs() < 1e-12);
        // Zero regularizer values: unchanged again.
        let zero_regs = RegValues {
            r_decouple: tape.constant(Tensor::row(&[0.0])),
            r_temporal: tape.constant(Tensor::row(&[0.0])),
            r_semantic: tape.constant(Tensor::row(&[0.0])),
            zero_var_env_cols: vec![],
            zero_var_self_cols: vec![],
        };
        let l = loss_joint(&mut tape, task, &zero_regs, &unit).unwrap();
        assert_eq!(tape.value(l).item(), 4.0);
    }

    #[test]
    fn regularizer_bundle_flows_gradients_into_both_encoders() {
        // End-to-end smoke: build features with the real (full) encoders,
        // run all three regularizers, and check gradients reach encoder
        // parameters of both streams.
        let dims = NetDims {
            env_kind: EncoderKind::Full,
            self_kind: EncoderKind::Full,
            ..identity_capable_dims()
        };
        let tree = ready_tree(&dims, 30);
        let mut tape = Tape::new();
        let vars = tree.bind(&mut tape);
        let obs_env = positive_window(10, 6, 0.0);
        let obs_self = positive_window(10, 4, 1.0);
        let xe = tape.constant(obs_env.clone());
        let xs = tape.constant(obs_self.clone());
        let z_env = policy::encode_env(&mut tape, &vars, &dims, xe).unwrap();
        let z_self = policy::encode_self(&mut tape, &vars, &dims, xs).unwrap();
        let recon_env = policy::decode(&mut tape, &vars, "aux.dec_env", z_env).unwrap();
        let recon_self = policy::decode(&mut tape, &vars, "aux.dec_self", z_self).unwrap();
        let w = LossWeights::default();
        let series = [z_self];
        let inputs = RegInputs {
            z_env_batch: z_env,
            z_self_batch: z_self,
            z_self_series: &series,
            recon_env,
            obs_env: &obs_env,
            recon_self,
            obs_self: &obs_self,
        };
        let regs = specialization_regularizers(&mut tape, &inputs, &w).unwrap();
        let task = tape.constant(Tensor::row(&[0.0]));
        let total = loss_joint(&mut tape, task, &regs, &w).unwrap();
        let grads = tape.backward(total).unwrap();
        let by_name = tree.grads_by_name(&vars, &grads);
        let env_norm: f64 =
            by_name["env.conv3.w"].data().iter().map(|g| g * g).sum::<f64>().sqrt();
        let self_norm: f64 =
            by_name["self.fwd.wx"].data().iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!(env_norm > 0.0, "decouple/semantic should reach the env encoder");
        assert!(self_norm > 0.0, "temporal/semantic should reach the self encoder");
    }
}
