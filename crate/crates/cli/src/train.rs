//! SFT and RL training loops over the synthetic task.

use rimeforge::grpo::{collect_groups, rl_step, RlQuery, StepReport};
use rayon::prelude::*;
use rimeforge::objectives::{accumulated_gradients, rewrite_gradients, LossValues, Side};
use rimeforge::seqmodel::ModelParams;
use rimeforge::synthtask::{make_batches, Dataset};
use rimeforge::tensorcore::{mix_stream, Array, Optimizer, OptimizerConfig, OptimizerState, RngStream};
use rimeforge::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

const SFT_SHUFFLE: u64 = 0x5346_54;
const PRETRAIN_SHUFFLE: u64 = 0x5052_45;
const RL_POOL: u64 = 0x504F_4F4C;
const RL_PICK: u64 = 0x5049_434B;
const RL_JOINT: u64 = 0x4A4F_494E;

/// One optimizer step of SFT.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub disc: f64,
    pub gen: f64,
    pub intra: f64,
    pub cm_total: f64,
    pub rewrite: f64,
    pub joint: f64,
    pub grad_norm: f64,
}

/// `Rewrite`: generator warm-up (only `rewrite` is meaningful);
/// `Joint`: the full objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Rewrite,
    Joint,
}

impl SftRecord {
    fn new(phase: Phase, epoch: usize, step: usize, lr: f64, v: &LossValues, grad_norm: f64) -> Self {
        Self {
            phase,
            epoch,
            step,
            lr,
            disc: v.disc,
            gen: v.gen,
            intra: v.intra,
            cm_total: v.cm_total,
            rewrite: v.rewrite,
            joint: v.joint,
            grad_norm,
        }
    }
}

pub fn sft_optimizer(cfg: &RunConfig) -> OptimizerConfig {
    OptimizerConfig { lr: cfg.sft.lr, grad_clip: cfg.sft.grad_clip, ..OptimizerConfig::default() }
}

pub fn rl_optimizer(cfg: &RunConfig) -> OptimizerConfig {
    OptimizerConfig { lr: cfg.rl.lr, grad_clip: cfg.sft.grad_clip, ..OptimizerConfig::default() }
}

pub fn init_model(cfg: &RunConfig, data: &Dataset) -> Result<ModelParams<f32>> {
    ModelParams::init(&cfg.model.with_vocab(data.vocab.len()), &data.vocab, cfg.seed)
}

/// Model and optimizer between SFT phases.
#[derive(Clone)]
pub struct SftState {
    pub model: ModelParams<f32>,
    pub optimizer: Optimizer<f32>,
    /// Optimizer steps taken so far.
    pub step: usize,
}

impl SftState {
    pub fn fresh(cfg: &RunConfig, data: &Dataset) -> Result<Self> {
        let model = init_model(cfg, data)?;
        let optimizer = Optimizer::new(sft_optimizer(cfg), &model.store);
        Ok(Self { model, optimizer, step: 0 })
    }
}

fn all_sides(data: &Dataset) -> Vec<Side> {
    data.train
        .iter()
        .flat_map(|p| [&p.query, &p.target])
        .map(|i| Side { input: i.input.clone(), gold: i.gold.clone() })
        .collect()
}

/// Rewrite-only warm-up: `cfg.sft.pretrain_epochs` epochs of the teacher-forced
/// rewrite loss over every training item. It does not depend on the
/// contrastive settings, so ablations can share it.
pub fn pretrain(cfg: &RunConfig, data: &Dataset, mut on_record: impl FnMut(&SftRecord) -> Result<()>) -> Result<SftState> {
    cfg.validate()?;
    let mut st = SftState::fresh(cfg, data)?;
    let sides = all_sides(data);
    let chunk = 2 * cfg.sft.micro_batch;
    for epoch in 0..cfg.sft.pretrain_epochs {
        let mut order: Vec<usize> = (0..sides.len()).collect();
        RngStream::new(cfg.seed, mix_stream(PRETRAIN_SHUFFLE, &[epoch as u64])).shuffle(&mut order);
        let parts: Vec<Vec<Side>> = order.chunks(chunk).map(|c| c.iter().map(|&i| sides[i].clone()).collect()).collect();
        for group in parts.chunks(cfg.sft.accumulation) {
            st.optimizer.set_lr(cfg.sft.pretrain_lr);
            let results: Vec<(f64, Vec<Array<f32>>)> =
                group.par_iter().map(|p| rewrite_gradients(&st.model, p)).collect::<Result<_>>()?;
            let (loss, grads) = average(results, &st.model);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step: st.step as u64, detail: format!("rewrite loss {loss}") });
            }
            let grad_norm = st.optimizer.step(&mut st.model.store, &grads)?;
            let values = LossValues { rewrite: loss, ..LossValues::default() };
            on_record(&SftRecord::new(Phase::Rewrite, epoch, st.step, cfg.sft.pretrain_lr, &values, grad_norm))?;
            st.step += 1;
        }
    }
    Ok(st)
}

fn steps_per_epoch(cfg: &RunConfig, data: &Dataset) -> Result<usize> {
    let probe = make_batches(data, cfg.sft.micro_batch, &mut RngStream::new(cfg.seed, SFT_SHUFFLE))?;
    Ok(probe.len().div_ceil(cfg.sft.accumulation))
}

/// Joint phase: `cfg.sft.epochs` epochs of the full objective with
/// homogeneous batches. `on_epoch` sees the state after each epoch.
pub fn joint(
    cfg: &RunConfig,
    data: &Dataset,
    mut st: SftState,
    mut on_record: impl FnMut(&SftRecord) -> Result<()>,
    mut on_epoch: impl FnMut(usize, &SftState) -> Result<()>,
) -> Result<SftState> {
    cfg.validate()?;
    let offset = st.step;
    let total = steps_per_epoch(cfg, data)? * cfg.sft.epochs;
    for epoch in 0..cfg.sft.epochs {
        let mut rng = RngStream::new(cfg.seed, mix_stream(SFT_SHUFFLE, &[epoch as u64]));
        let batches = make_batches(data, cfg.sft.micro_batch, &mut rng)?;
        for chunk in batches.chunks(cfg.sft.accumulation) {
            let lr = cfg.sft.lr_at(st.step - offset, total);
            st.optimizer.set_lr(lr);
            let (values, grads) = accumulated_gradients(&st.model, chunk, &cfg.sft.loss)?;
            if !values.is_finite() {
                return Err(Error::NonFiniteLoss { step: st.step as u64, detail: format!("{values:?}") });
            }
            let grad_norm = st.optimizer.step(&mut st.model.store, &grads)?;
            on_record(&SftRecord::new(Phase::Joint, epoch, st.step, lr, &values, grad_norm))?;
            st.step += 1;
        }
        on_epoch(epoch + 1, &st)?;
    }
    Ok(st)
}

/// Full SFT: warm-up followed by the joint phase.
pub fn train_sft(
    cfg: &RunConfig,
    data: &Dataset,
    mut on_record: impl FnMut(&SftRecord) -> Result<()>,
    on_epoch: impl FnMut(usize, &SftState) -> Result<()>,
) -> Result<SftState> {
    let st = pretrain(cfg, data, &mut on_record)?;
    joint(cfg, data, st, on_record, on_epoch)
}

fn average(parts: Vec<(f64, Vec<Array<f32>>)>, model: &ModelParams<f32>) -> (f64, Vec<Array<f32>>) {
    let w = 1.0 / parts.len() as f64;
    let mut total = model.store.zeros_like();
    let mut loss = 0.0;
    for (l, grads) in &parts {
        loss += w * l;
        for (acc, g) in total.iter_mut().zip(grads) {
            acc.add_assign(g);
        }
    }
    for acc in &mut total {
        acc.scale_assign(w as f32);
    }
    (loss, total)
}

/// Fixed pool of RL queries derived from the training pairs.
pub fn rl_pool(cfg: &RunConfig, data: &Dataset) -> Vec<RlQuery> {
    data.rl_queries(cfg.rl.reward.negatives, &mut RngStream::new(cfg.seed, RL_POOL))
}

/// Queries for one step; a pure function of `(seed, step)` so a resumed run
/// picks the same ones.
pub fn pick_queries(cfg: &RunConfig, pool: &[RlQuery], step: u64) -> Vec<RlQuery> {
    let mut rng = RngStream::new(cfg.seed, mix_stream(RL_PICK, &[step]));
    (0..cfg.rl.queries_per_step).map(|_| pool[rng.below(pool.len())].clone()).collect()
}

/// State carried across RL steps.
pub struct RlState {
    pub policy: ModelParams<f32>,
    pub optimizer: Optimizer<f32>,
    /// Next step to run.
    pub step: u64,
}

impl RlState {
    pub fn fresh(cfg: &RunConfig, sft: &ModelParams<f32>) -> Self {
        Self { policy: sft.clone(), optimizer: Optimizer::new(rl_optimizer(cfg), &sft.store), step: 0 }
    }

    pub fn resume(cfg: &RunConfig, policy: ModelParams<f32>, state: OptimizerState<f32>, step: u64) -> Self {
        Self { policy, optimizer: Optimizer::with_state(rl_optimizer(cfg), state), step }
    }
}

/// One joint-loss update on `accumulation` homogeneous micro-batches picked
/// by `(seed, step)`, applied with the RL optimizer.
fn interleaved_joint_step(cfg: &RunConfig, data: &Dataset, state: &mut RlState, step: u64) -> Result<()> {
    let mut rng = RngStream::new(cfg.seed, mix_stream(RL_JOINT, &[step]));
    let batches = make_batches(data, cfg.sft.micro_batch, &mut rng)?;
    let take = cfg.sft.accumulation.min(batches.len());
    let (values, grads) = accumulated_gradients(&state.policy, &batches[..take], &cfg.sft.loss)?;
    if !values.is_finite() {
        return Err(Error::NonFiniteLoss { step, detail: format!("interleaved joint loss {values:?}") });
    }
    state.optimizer.step(&mut state.policy.store, &grads)?;
    Ok(())
}

/// Runs GRPO from `state.step` up to `cfg.rl.steps` against the frozen
/// `reference`.
pub fn train_rl(
    cfg: &RunConfig,
    data: &Dataset,
    reference: &ModelParams<f32>,
    mut state: RlState,
    mut on_step: impl FnMut(&StepReport, &RlState) -> Result<()>,
) -> Result<RlState> {
    cfg.validate()?;
    let pool = rl_pool(cfg, data);
    if pool.is_empty() {
        return Err(Error::BadConfig("no RL queries".into()));
    }
    while state.step < cfg.rl.steps {
        let queries = pick_queries(cfg, &pool, state.step);
        let groups = collect_groups(&state.policy, reference, &queries, &cfg.rl, cfg.seed, state.step)?;
        let report = rl_step(&mut state.policy, &mut state.optimizer, &groups, &cfg.rl, state.step)?;
        if cfg.rl.interleave_joint > 0 && (state.step + 1) % cfg.rl.interleave_joint == 0 {
            let step = state.step;
            interleaved_joint_step(cfg, data, &mut state, step)?;
        }
        state.step += 1;
        on_step(&report, &state)?;
    }
    Ok(state)
}
