//! The staged training driver: scripted-corpus stream pretraining, policy
//! training over frozen encoders, then joint fine-tuning with the
//! specialization regularizers — with per-iteration CSV logging and
//! stage-boundary checkpoints.

use crate::autodiff::{Tape, TapeError, Tensor, Var};
use crate::optim::Adam;
use crate::params::{ParamError, ParamTree, VarMap};
use crate::policy::{self, NetDims, PolicyError};
use crate::sim::{EpisodeDriver, EpisodeMode, EpisodeResult, SimConfig, ACTION_DIM};
use crate::training::losses::{
    loss_env_pretrain, loss_joint, loss_self_pretrain, specialization_regularizers, LossError,
    LossWeights, RegInputs, MIN_CORR_BATCH,
};
use crate::training::ppo::{
    gaussian_log_prob, normalize_advantages, ppo_update, ppo_update_with, PpoConfig, PpoError,
};
use crate::training::rollout::{
    EpisodeSampler, RolloutBatch, RolloutConfig, RolloutError, WindowBuffer, Workers,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum ProtocolError {
    #[error("stage {found} cannot come after {prev}; the order is pretrain-env, pretrain-self, fusion, joint")]
    StageOrder { prev: &'static str, found: &'static str },
    #[error("the scripted pretraining corpus came out empty (episodes end too early)")]
    CorpusEmpty,
    #[error("freeze contract violated: group `{group}` changed during the fusion stage")]
    FrozenDrift { group: &'static str },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Ppo(#[from] PpoError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The four training stages, in their mandatory order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Stage {
    PretrainEnv,
    PretrainSelf,
    Fusion,
    Joint,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::PretrainEnv, Stage::PretrainSelf, Stage::Fusion, Stage::Joint];

    pub fn name(self) -> &'static str {
        match self {
            Stage::PretrainEnv => "pretrain-env",
            Stage::PretrainSelf => "pretrain-self",
            Stage::Fusion => "fusion",
            Stage::Joint => "joint",
        }
    }

    fn rank(self) -> usize {
        match self {
            Stage::PretrainEnv => 0,
            Stage::PretrainSelf => 1,
            Stage::Fusion => 2,
            Stage::Joint => 3,
        }
    }

    /// Parameter groups held fixed during this stage: the fusion stage
    /// trains fusion and trunk over frozen encoders; every other stage
    /// freezes nothing.
    pub fn frozen_groups(self) -> &'static [&'static str] {
        match self {
            Stage::Fusion => &["env", "self"],
            _ => &[],
        }
    }
}

/// One stage's length, step size, loss weights, and update settings.
#[derive(Debug, Clone)]
pub struct StageConfig {
    pub stage: Stage,
    /// Optimization iterations (supervised steps or rollout+update rounds).
    pub steps: usize,
    /// Adam step size.
    pub lr: f64,
    pub weights: LossWeights,
    pub ppo: PpoConfig,
    /// Windows (or series) per supervised pretraining minibatch.
    pub batch: usize,
}

impl StageConfig {
    pub fn new(stage: Stage, steps: usize) -> StageConfig {
        StageConfig {
            stage,
            steps,
            lr: 3e-4,
            weights: LossWeights::default(),
            ppo: PpoConfig::default(),
            batch: 16,
        }
    }
}

/// A full training run: which stages to run (a subsequence of the canonical
/// order), how rollouts are collected, and where checkpoints go.
#[derive(Debug, Clone)]
pub struct TrainSchedule {
    pub stages: Vec<StageConfig>,
    pub rollout: RolloutConfig,
    /// Scripted random-walk windows to generate for the pretraining stages.
    pub corpus_windows: usize,
    /// Stage-boundary checkpoint directory (`None` keeps hashes only).
    pub checkpoint_dir: Option<PathBuf>,
}

impl TrainSchedule {
    /// All four stages with `steps` iterations each, desk-sized rollouts.
    pub fn desk(steps: usize) -> TrainSchedule {
        TrainSchedule {
            stages: Stage::ALL.iter().map(|s| StageConfig::new(*s, steps)).collect(),
            rollout: RolloutConfig::default(),
            corpus_windows: 64,
            checkpoint_dir: None,
        }
    }

    /// Stages must follow the canonical order (omissions allowed, repeats
    /// and inversions rejected).
    pub fn validate(&self) -> Result<(), ProtocolError> {
        let mut prev: Option<Stage> = None;
        for sc in &self.stages {
            if let Some(p) = prev {
                if sc.stage.rank() <= p.rank() {
                    return Err(ProtocolError::StageOrder {
                        prev: p.name(),
                        found: sc.stage.name(),
                    });
                }
            }
            prev = Some(sc.stage);
        }
        Ok(())
    }
}

/// One row of the per-iteration training log.
#[derive(Debug, Clone)]
pub struct IterRow {
    pub iteration: usize,
    pub stage: &'static str,
    /// The stage objective's value (pretrain loss, or surrogate + value +
    /// entropy + weighted regularizers).
    pub loss: f64,
    pub value_loss: f64,
    pub r_decouple: f64,
    pub r_temporal: f64,
    pub r_semantic: f64,
    pub kl: f64,
    pub clip_fraction: f64,
    pub mean_reward: f64,
    pub episodes_finished: usize,
    /// Mean subtask outcome over the episodes finished this iteration
    /// (0 when none finished — check `episodes_finished`).
    pub success_rate: f64,
}

/// Everything `run_protocol` observed: per-iteration rows, per-stage
/// checkpoint hashes, and free-form notes (budget check, zero-variance
/// column reports).
#[derive(Debug, Default)]
pub struct StageLog {
    pub rows: Vec<IterRow>,
    /// Parameter content hash at the end of each stage.
    pub checkpoints: Vec<(Stage, u64)>,
    pub notes: Vec<String>,
}

impl StageLog {
    pub const CSV_HEADER: &'static str = "iteration,stage,loss,value_loss,r_decouple,r_temporal,r_semantic,kl,clip_fraction,mean_reward,episodes_finished,success_rate";

    pub fn csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.rows.len() + 1));
        out.push_str(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.iteration,
                r.stage,
                r.loss,
                r.value_loss,
                r.r_decouple,
                r.r_temporal,
                r.r_semantic,
                r.kl,
                r.clip_fraction,
                r.mean_reward,
                r.episodes_finished,
                r.success_rate
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.csv())
    }
}

/// Mean subtask outcome across the finished episodes (each outcome is in
/// {0, 0.5, 1} with sequential semantics).
fn subtask_success(finished: &[EpisodeResult]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for e in finished {
        for o in &e.outcomes {
            sum += *o;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Random-walk observation corpus for the pretraining stages: episodes are
/// driven by uniform random actions and their observation windows harvested
/// every half-window of steps.
fn scripted_corpus<S: EpisodeSampler>(
    sampler: &mut S,
    sim_cfg: &SimConfig,
    dims: &NetDims,
    n_windows: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Tensor>, Vec<Tensor>), ProtocolError> {
    let stride = (dims.window / 2).max(1);
    let mut env_windows = Vec::with_capacity(n_windows);
    let mut self_series = Vec::with_capacity(n_windows);
    let mut episodes = 0usize;
    while env_windows.len() < n_windows && episodes < 64 + 4 * n_windows {
        episodes += 1;
        let (scene, plan) = sampler.sample(rng);
        let mut driver = EpisodeDriver::new(&scene, &plan, sim_cfg, EpisodeMode::Train, None);
        let (oe, os) = driver.initial_obs();
        let mut buf_env = WindowBuffer::new(dims.window, oe.len());
        let mut buf_self = WindowBuffer::new(dims.window, os.len());
        buf_env.reset(&oe);
        buf_self.reset(&os);
        let mut steps = 0usize;
        while env_windows.len() < n_windows && steps < 8 * dims.window {
            let action: Vec<f64> = (0..ACTION_DIM).map(|_| rng.gen_range(-1.0..=1.0)).collect();
            let r = driver.step(&action);
            steps += 1;
            if r.done.is_some() {
                if steps > 1 {
                    env_windows.push(buf_env.tensor());
                    self_series.push(buf_self.tensor());
                }
                break;
            }
            buf_env.push(&r.obs_env);
            buf_self.push(&r.obs_self);
            if steps % stride == 0 {
                env_windows.push(buf_env.tensor());
                self_series.push(buf_self.tensor());
            }
        }
    }
    if env_windows.is_empty() {
        return Err(ProtocolError::CorpusEmpty);
    }
    Ok((env_windows, self_series))
}

/// Samples (per minibatch) used for the regularizer terms; kept small since
/// each one costs an extra encoder/decoder pass.
const REG_SAMPLES: usize = 16;

/// Concrete regularizer values captured for logging.
struct RegSnapshot {
    decouple: f64,
    temporal: f64,
    semantic: f64,
    zero_env: Vec<usize>,
    zero_self: Vec<usize>,
}

/// Build the weighted regularizer sum `Σ λ_i R_i` over (a prefix of) the
/// given batch indices. Returns `None` when too few samples are available
/// for the correlation term.
fn reg_term(
    tape: &mut Tape,
    vars: &VarMap,
    dims: &NetDims,
    batch: &RolloutBatch,
    idx: &[usize],
    w: &LossWeights,
) -> Result<Option<(Var, RegSnapshot)>, PpoError> {
    let take = idx.len().min(REG_SAMPLES);
    if take < MIN_CORR_BATCH {
        return Ok(None);
    }
    let mut env_rows = Vec::with_capacity(take);
    let mut self_rows = Vec::with_capacity(take);
    let mut self_series = Vec::with_capacity(take);
    let mut recon_env_parts = Vec::with_capacity(take);
    let mut recon_self_parts = Vec::with_capacity(take);
    let mut obs_env_rows: Vec<f64> = Vec::new();
    let mut obs_self_rows: Vec<f64> = Vec::new();
    for &i in &idx[..take] {
        let t = &batch.transitions[i];
        let oe = tape.constant(t.obs_env.clone());
        let os = tape.constant(t.obs_self.clone());
        let ze = policy::encode_env(tape, vars, dims, oe)?;
        let zs = policy::encode_self(tape, vars, dims, os)?;
        let te = tape.value(ze).shape()[0];
        env_rows.push(tape.slice(ze, 0, te - 1, te)?);
        let ts = tape.value(zs).shape()[0];
        self_rows.push(tape.slice(zs, 0, ts - 1, ts)?);
        self_series.push(zs);
        recon_env_parts.push(policy::decode(tape, vars, "aux.dec_env", ze)?);
        recon_self_parts.push(policy::decode(tape, vars, "aux.dec_self", zs)?);
        obs_env_rows.extend_from_slice(t.obs_env.data());
        obs_self_rows.extend_from_slice(t.obs_self.data());
    }
    let z_env_batch = tape.concat(&env_rows, 0)?;
    let z_self_batch = tape.concat(&self_rows, 0)?;
    let recon_env = tape.concat(&recon_env_parts, 0)?;
    let recon_self = tape.concat(&recon_self_parts, 0)?;
    let obs_env = Tensor::new(
        &[take * dims.window, dims.d_env_raw],
        obs_env_rows,
    );
    let obs_self = Tensor::new(
        &[take * dims.window, dims.d_self_raw],
        obs_self_rows,
    );
    let inputs = RegInputs {
        z_env_batch,
        z_self_batch,
        z_self_series: &self_series,
        recon_env,
        obs_env: &obs_env,
        recon_self,
        obs_self: &obs_self,
    };
    let regs = specialization_regularizers(tape, &inputs, w)?;
    let snapshot = RegSnapshot {
        decouple: tape.value(regs.r_decouple).item(),
        temporal: tape.value(regs.r_temporal).item(),
        semantic: tape.value(regs.r_semantic).item(),
        zero_env: regs.zero_var_env_cols.clone(),
        zero_self: regs.zero_var_self_cols.clone(),
    };
    let zero = tape.constant(Tensor::zeros(&[1, 1]));
    let term = loss_joint(tape, zero, &regs, w)?;
    Ok(Some((term, snapshot)))
}

/// Magnitude of the task objective (|surrogate| + weighted value error) on
/// the first minibatch, in plain f64 — the yardstick for the joint stage's
/// regularizer budget check.
fn task_magnitude(
    tree: &ParamTree,
    dims: &NetDims,
    batch: &RolloutBatch,
    ppo: &PpoConfig,
) -> Result<f64, ProtocolError> {
    let m = batch.len().min(ppo.minibatch.max(1));
    let mut adv = batch.advantages.clone();
    if ppo.normalize_adv {
        normalize_advantages(&mut adv);
    }
    let mut pol = 0.0;
    let mut val = 0.0;
    for i in 0..m {
        let t = &batch.transitions[i];
        let eval = policy::forward(tree, dims, &t.obs_env, &t.obs_self)?;
        let lp = gaussian_log_prob(&eval.mean, &eval.log_std, t.action.data());
        let ratio = (lp - t.log_prob).exp();
        let clipped = ratio.clamp(1.0 - ppo.clip_eps, 1.0 + ppo.clip_eps);
        pol += (ratio * adv[i]).min(clipped * adv[i]);
        val += (eval.value - batch.returns[i]).powi(2);
    }
    let m = m as f64;
    Ok((pol / m).abs() + ppo.value_coef * val / m)
}

fn ensure_workers<'w, S: EpisodeSampler>(
    workers: &'w mut Option<Workers<S>>,
    sampler: &mut Option<S>,
    schedule: &TrainSchedule,
    sim_cfg: &SimConfig,
    dims: &NetDims,
    rng: &mut ChaCha8Rng,
) -> Result<&'w mut Workers<S>, ProtocolError> {
    if workers.is_none() {
        let s = sampler.take().expect("pretraining precedes rollout stages");
        *workers = Some(Workers::new(s, sim_cfg.clone(), dims, schedule.rollout, rng.gen())?);
    }
    Ok(workers.as_mut().expect("just filled"))
}

/// Run the staged schedule from a fresh initialization and return the
/// trained parameters plus the full log. Stage boundaries record content
/// hashes (and serialize checkpoints when a directory is configured); the
/// fusion stage's encoder freeze is verified bitwise.
pub fn run_protocol<S: EpisodeSampler>(
    schedule: &TrainSchedule,
    sampler: S,
    sim_cfg: &SimConfig,
    dims: &NetDims,
    seed: u64,
) -> Result<(ParamTree, StageLog), ProtocolError> {
    schedule.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tree = ParamTree::new();
    policy::init_policy(&mut tree, dims, &mut rng);
    let mut log = StageLog::default();
    let mut sampler = Some(sampler);
    let mut workers: Option<Workers<S>> = None;
    let mut corpus: Option<(Vec<Tensor>, Vec<Tensor>)> = None;
    let mut iteration = 0usize;

    for sc in &schedule.stages {
        tree.unfreeze_all();
        for g in sc.stage.frozen_groups() {
            tree.freeze_group(g);
        }

        match sc.stage {
            Stage::PretrainEnv | Stage::PretrainSelf => {
                if sc.steps > 0 && corpus.is_none() {
                    let s = sampler.as_mut().expect("pretraining precedes rollout stages");
                    corpus = Some(scripted_corpus(
                        s,
                        sim_cfg,
                        dims,
                        schedule.corpus_windows,
                        &mut rng,
                    )?);
                }
                let mut opt = Adam::new(sc.lr);
                for _ in 0..sc.steps {
                    let (env_windows, self_series) = corpus.as_ref().expect("generated above");
                    let data: &[Tensor] = match sc.stage {
                        Stage::PretrainEnv => env_windows,
                        _ => self_series,
                    };
                    let picks: Vec<Tensor> = (0..sc.batch.max(1))
                        .map(|_| data[rng.gen_range(0..data.len())].clone())
                        .collect();
                    let mut tape = Tape::new();
                    let vars = tree.bind(&mut tape);
                    let loss = match sc.stage {
                        Stage::PretrainEnv => loss_env_pretrain(&mut tape, &vars, dims, &picks)?,
                        _ => loss_self_pretrain(&mut tape, &vars, dims, &picks)?,
                    };
                    let loss_value = tape.value(loss).item();
                    let grads = tape.backward(loss)?;
                    let by_name = tree.grads_by_name(&vars, &grads);
                    opt.apply(&mut tree, &by_name);
                    log.rows.push(IterRow {
                        iteration,
                        stage: sc.stage.name(),
                        loss: loss_value,
                        value_loss: 0.0,
                        r_decouple: 0.0,
                        r_temporal: 0.0,
                        r_semantic: 0.0,
                        kl: 0.0,
                        clip_fraction: 0.0,
                        mean_reward: 0.0,
                        episodes_finished: 0,
                        success_rate: 0.0,
                    });
                    iteration += 1;
                }
            }

            Stage::Fusion => {
                // The quality term stays off here (no principled target
                // exists; `losses::loss_fusion_stage` keeps it pluggable),
                // so the stage objective is the plain surrogate — over
                // encoders that are frozen and verified bitwise below.
                if sc.steps > 0 {
                    let env_bytes = tree.group_bytes("env");
                    let self_bytes = tree.group_bytes("self");
                    let w = ensure_workers(
                        &mut workers,
                        &mut sampler,
                        schedule,
                        sim_cfg,
                        dims,
                        &mut rng,
                    )?;
                    let mut opt = Adam::new(sc.lr);
                    for _ in 0..sc.steps {
                        let batch = w.collect(&tree, dims)?;
                        let stats =
                            ppo_update(&mut tree, &mut opt, dims, &batch, &sc.ppo, &mut rng)?;
                        log.rows.push(IterRow {
                            iteration,
                            stage: sc.stage.name(),
                            loss: stats.policy_loss + sc.ppo.value_coef * stats.value_loss
                                - sc.ppo.entropy_coef * stats.entropy,
                            value_loss: stats.value_loss,
                            r_decouple: 0.0,
                            r_temporal: 0.0,
                            r_semantic: 0.0,
                            kl: stats.kl,
                            clip_fraction: stats.clip_fraction,
                            mean_reward: batch.mean_step_reward,
                            episodes_finished: batch.finished.len(),
                            success_rate: subtask_success(&batch.finished),
                        });
                        iteration += 1;
                    }
                    if tree.group_bytes("env") != env_bytes {
                        return Err(ProtocolError::FrozenDrift { group: "env" });
                    }
                    if tree.group_bytes("self") != self_bytes {
                        return Err(ProtocolError::FrozenDrift { group: "self" });
                    }
                }
            }

            Stage::Joint => {
                if sc.steps > 0 {
                    let w = ensure_workers(
                        &mut workers,
                        &mut sampler,
                        schedule,
                        sim_cfg,
                        dims,
                        &mut rng,
                    )?;
                    let mut opt = Adam::new(sc.lr);
                    let mut weights = sc.weights;
                    for it in 0..sc.steps {
                        let batch = w.collect(&tree, dims)?;
                        if it == 0 {
                            // Budget check: the regularizers should start
                            // at no more than 10% of the task objective;
                            // if they overshoot, scale the lambdas down
                            // proportionally and say so.
                            let task = task_magnitude(&tree, dims, &batch, &sc.ppo)?;
                            let mut tape = Tape::new();
                            let vars = tree.bind(&mut tape);
                            let idx: Vec<usize> = (0..batch.len()).collect();
                            if let Some((term, _)) =
                                reg_term(&mut tape, &vars, dims, &batch, &idx, &weights)?
                            {
                                let reg = tape.value(term).item();
                                let budget = 0.1 * task.max(1.0);
                                if reg > budget && reg > 0.0 {
                                    let s = budget / reg;
                                    weights.lambda_decouple *= s;
                                    weights.lambda_temporal *= s;
                                    weights.lambda_semantic *= s;
                                    log.notes.push(format!(
                                        "joint startup: regularizer sum {reg:.6} exceeded 10% of task magnitude {task:.6}; lambdas scaled by {s:.6}"
                                    ));
                                } else {
                                    log.notes.push(format!(
                                        "joint startup: regularizer sum {reg:.6} within 10% of task magnitude {task:.6}"
                                    ));
                                }
                            }
                        }
                        let mut reg_sums = [0.0f64; 3];
                        let mut reg_count = 0usize;
                        let mut zero_reports: Vec<String> = Vec::new();
                        let stats = ppo_update_with(
                            &mut tree,
                            &mut opt,
                            dims,
                            &batch,
                            &sc.ppo,
                            &mut rng,
                            |tape, vars, idx| match reg_term(tape, vars, dims, &batch, idx, &weights)? {
                                None => Ok(None),
                                Some((term, snap)) => {
                                    reg_sums[0] += snap.decouple;
                                    reg_sums[1] += snap.temporal;
                                    reg_sums[2] += snap.semantic;
                                    reg_count += 1;
                                    if !snap.zero_env.is_empty() || !snap.zero_self.is_empty() {
                                        zero_reports.push(format!(
                                            "env cols {:?}, self cols {:?}",
                                            snap.zero_env, snap.zero_self
                                        ));
                                    }
                                    Ok(Some(term))
                                }
                            },
                        )?;
                        let k = reg_count.max(1) as f64;
                        let (rd, rt, rs) =
                            (reg_sums[0] / k, reg_sums[1] / k, reg_sums[2] / k);
                        for z in zero_reports {
                            log.notes
                                .push(format!("joint iteration {iteration}: zero-variance {z}"));
                        }
                        log.rows.push(IterRow {
                            iteration,
                            stage: sc.stage.name(),
                            loss: stats.policy_loss + sc.ppo.value_coef * stats.value_loss
                                - sc.ppo.entropy_coef * stats.entropy
                                + weights.lambda_decouple * rd
                                + weights.lambda_temporal * rt
                                + weights.lambda_semantic * rs,
                            value_loss: stats.value_loss,
                            r_decouple: rd,
                            r_temporal: rt,
                            r_semantic: rs,
                            kl: stats.kl,
                            clip_fraction: stats.clip_fraction,
                            mean_reward: batch.mean_step_reward,
                            episodes_finished: batch.finished.len(),
                            success_rate: subtask_success(&batch.finished),
                        });
                        iteration += 1;
                    }
                }
            }
        }

        log.checkpoints.push((sc.stage, tree.content_hash()));
        if let Some(dir) = &schedule.checkpoint_dir {
            std::fs::create_dir_all(dir)?;
            tree.save(&dir.join(format!("after-{}.params", sc.stage.name())))?;
        }
    }

    tree.unfreeze_all();
    Ok((tree, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{EnvEncoderDims, SelfEncoderDims};
    use crate::policy::{init_policy, EncoderKind};
    use crate::sim::{resolve_task, task_by_name, TrajParams, D_SELF};
    use crate::training::rollout::FixedTask;

    fn sim_cfg() -> SimConfig {
        SimConfig::default()
    }

    fn tiny_dims(cfg: &SimConfig) -> NetDims {
        NetDims {
            d_env_raw: cfg.d_env(),
            d_self_raw: D_SELF,
            window: 4,
            env: EnvEncoderDims { d_env: cfg.d_env(), branch_channels: 4, heads: 2 },
            self_enc: SelfEncoderDims { d_self: D_SELF, d_h: 6 },
            d_model: 16,
            fusion_heads: 2,
            trunk_layers: 1,
            trunk_heads: 2,
            action_dim: ACTION_DIM,
            env_kind: EncoderKind::Full,
            self_kind: EncoderKind::Full,
        }
    }

    fn follow_fixed() -> FixedTask {
        let cfg = task_by_name("follow").unwrap();
        let (scene, plan) = resolve_task(&cfg, &TrajParams::default()).unwrap();
        FixedTask { scene, plan }
    }

    fn small_schedule(steps: [usize; 4]) -> TrainSchedule {
        let stages = Stage::ALL
            .iter()
            .zip(steps)
            .map(|(stage, n)| {
                let mut sc = StageConfig::new(*stage, n);
                sc.batch = 4;
                sc.ppo.epochs = 2;
                sc.ppo.minibatch = 8;
                sc
            })
            .collect();
        TrainSchedule {
            stages,
            rollout: RolloutConfig { n_envs: 2, horizon: 8, ..RolloutConfig::default() },
            corpus_windows: 12,
            checkpoint_dir: None,
        }
    }

    #[test]
    fn out_of_order_or_repeated_stages_are_rejected() {
        let mut s = small_schedule([1, 1, 1, 1]);
        s.stages.swap(0, 2); // fusion before pretraining
        assert!(matches!(s.validate(), Err(ProtocolError::StageOrder { .. })));

        let mut s = small_schedule([1, 1, 1, 1]);
        s.stages[1].stage = Stage::PretrainEnv; // repeat
        assert!(matches!(s.validate(), Err(ProtocolError::StageOrder { .. })));

        // omissions keep the order valid
        let mut s = small_schedule([1, 1, 1, 1]);
        s.stages.remove(1);
        s.stages.remove(1);
        assert!(s.validate().is_ok());
    }

    #[test]
    fn zero_step_schedule_returns_the_initialization_bitwise() {
        let cfg = sim_cfg();
        let dims = tiny_dims(&cfg);
        let (tree, log) =
            run_protocol(&small_schedule([0, 0, 0, 0]), follow_fixed(), &cfg, &dims, 99).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut reference = ParamTree::new();
        init_policy(&mut reference, &dims, &mut rng);
        assert_eq!(tree.content_hash(), reference.content_hash());
        assert!(log.rows.is_empty());
        assert_eq!(log.checkpoints.len(), 4);
        assert!(log.checkpoints.iter().all(|(_, h)| *h == reference.content_hash()));
        assert_eq!(tree.frozen_groups().count(), 0);
    }

    #[test]
    fn fusion_stage_preserves_the_pretrained_encoders_bitwise() {
        let cfg = sim_cfg();
        let dims = tiny_dims(&cfg);
        let mut schedule = small_schedule([0, 0, 2, 0]);
        schedule.stages.retain(|sc| sc.stage == Stage::Fusion);
        let seed = 4242;
        let (tree, log) = run_protocol(&schedule, follow_fixed(), &cfg, &dims, seed).unwrap();

        // with no pretraining in the schedule, the "pretrained" encoder
        // values are the initialization — reproduce it
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut reference = ParamTree::new();
        init_policy(&mut reference, &dims, &mut rng);
        assert_eq!(tree.group_bytes("env"), reference.group_bytes("env"));
        assert_eq!(tree.group_bytes("self"), reference.group_bytes("self"));
        assert_ne!(
            tree.content_hash(),
            reference.content_hash(),
            "fusion/trunk/heads must have moved"
        );
        assert_eq!(log.rows.len(), 2);
        assert!(log.rows.iter().all(|r| r.stage == "fusion"));
    }

    #[test]
    fn full_protocol_logs_every_stage_and_reruns_bitwise() {
        let cfg = sim_cfg();
        let dims = tiny_dims(&cfg);
        let schedule = small_schedule([2, 2, 1, 1]);
        let (tree_a, log_a) = run_protocol(&schedule, follow_fixed(), &cfg, &dims, 7).unwrap();
        let (tree_b, log_b) = run_protocol(&schedule, follow_fixed(), &cfg, &dims, 7).unwrap();

        assert_eq!(tree_a.content_hash(), tree_b.content_hash(), "determinism");
        assert_eq!(log_a.csv(), log_b.csv(), "log determinism");

        assert_eq!(log_a.rows.len(), 6);
        let stages: Vec<&str> = log_a.rows.iter().map(|r| r.stage).collect();
        assert_eq!(
            stages,
            ["pretrain-env", "pretrain-env", "pretrain-self", "pretrain-self", "fusion", "joint"]
        );
        assert_eq!(log_a.checkpoints.len(), 4);
        assert!(log_a.notes.iter().any(|n| n.starts_with("joint startup:")));

        let csv = log_a.csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(StageLog::CSV_HEADER));
        assert_eq!(lines.count(), 6);

        // the joint row carries live regularizer values
        let joint = log_a.rows.last().unwrap();
        assert!(joint.r_decouple > 0.0);
        assert!(joint.r_semantic > 0.0);

        // pretraining should not have left anything frozen
        assert_eq!(tree_a.frozen_groups().count(), 0);
    }

    #[test]
    fn checkpoints_are_written_and_load_back() {
        let cfg = sim_cfg();
        let dims = tiny_dims(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let mut schedule = small_schedule([1, 0, 0, 0]);
        schedule.stages.truncate(1);
        schedule.checkpoint_dir = Some(dir.path().to_path_buf());
        let (tree, _) = run_protocol(&schedule, follow_fixed(), &cfg, &dims, 13).unwrap();

        let path = dir.path().join("after-pretrain-env.params");
        assert!(path.exists());
        let loaded = ParamTree::load(&path).unwrap();
        assert_eq!(loaded.content_hash(), tree.content_hash());
    }
}
