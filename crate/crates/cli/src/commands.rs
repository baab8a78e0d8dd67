//! Subcommand implementations. Each takes a resolved [`RunConfig`] and
//! writes exactly one run directory.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use log::info;
use rimeforge::retrieval::{evaluate_modes, ModeReport, Pathway};
use rimeforge::seqmodel::checkpoint::{load_model, load_optimizer, model_to_bytes, optimizer_to_bytes};
use rimeforge::seqmodel::ModelParams;
use rimeforge::synthtask::{gen_corpus, read_dataset, write_dataset, Dataset, EVAL_FILE, TRAIN_FILE};
use rimeforge::tensorcore::Optimizer;
use rimeforge::Error;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::run::{read_json_lines, JsonLines, RunDir};
use crate::train::{self, Phase, RlState, SftRecord, SftState};

pub const SFT_LOG: &str = "sft_log.jsonl";
pub const RL_LOG: &str = "rl_log.jsonl";
pub const MODEL_FILE: &str = "model.bin";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";
pub const RL_STATE_FILE: &str = "rl_state.json";
pub const EVAL_REPORT: &str = "eval_report.json";
pub const SWEEP_JSON: &str = "sweep.json";
pub const SWEEP_TABLE: &str = "sweep.md";

/// Writes the dataset files and a manifest into `out`.
pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<Dataset> {
    let mut rd = RunDir::create(out, "gen-data")?;
    for f in [TRAIN_FILE, EVAL_FILE] {
        if rd.path(f).exists() {
            anyhow::bail!("{} already exists; outputs are write-once", rd.path(f).display());
        }
    }
    let data = gen_corpus(&cfg.task)?;
    write_dataset(&data, rd.root())?;
    rd.adopt(TRAIN_FILE);
    rd.adopt(EVAL_FILE);
    rd.argument("schema", rimeforge::synthtask::SCHEMA_VERSION)?;
    rd.argument("vocab_size", data.vocab.len())?;
    rd.finish(cfg)?;
    info!("wrote {} train pairs, {} eval queries, {} corpus items", data.train.len(), data.eval_queries.len(), data.eval_corpus.len());
    Ok(data)
}

/// Loads a dataset and checks it was generated from `cfg.task`.
pub fn load_data(cfg: &RunConfig, dir: &Path, rd: &mut RunDir) -> Result<Dataset> {
    let data = read_dataset(dir).with_context(|| format!("loading dataset from {}", dir.display()))?;
    if data.config != cfg.task {
        return Err(Error::Format(format!("dataset in {} was generated from a different [task] config", dir.display())).into());
    }
    rd.input("data/train.jsonl", &dir.join(TRAIN_FILE))?;
    rd.input("data/eval.jsonl", &dir.join(EVAL_FILE))?;
    Ok(data)
}

fn write_model(rd: &mut RunDir, rel: &str, model: &ModelParams<f32>) -> Result<()> {
    rd.write(rel, &model_to_bytes(model)?)
}

fn write_optimizer(rd: &mut RunDir, rel: &str, opt: &Optimizer<f32>) -> Result<()> {
    rd.write(rel, &optimizer_to_bytes(opt.state())?)
}

fn load_checked(cfg: &RunConfig, data: &Dataset, path: &Path) -> Result<ModelParams<f32>> {
    let model: ModelParams<f32> = load_model(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let expected = cfg.model.with_vocab(data.vocab.len());
    if model.config != expected || model.vocab != data.vocab {
        return Err(Error::CheckpointMismatch(format!(
            "{} has {:?}, the config and dataset require {:?}",
            path.display(),
            model.config,
            expected
        ))
        .into());
    }
    Ok(model)
}

/// Joint SFT: log, per-epoch checkpoints, final model and optimizer.
pub fn train_sft(cfg: &RunConfig, data_dir: &Path, out: &Path) -> Result<SftState> {
    let mut rd = RunDir::create(out, "train-sft")?;
    let data = load_data(cfg, data_dir, &mut rd)?;
    let mut log = JsonLines::new(rd.create_file(SFT_LOG)?);
    let every = cfg.checkpoints.sft_every_epochs;
    let mut saves: Vec<(usize, Vec<u8>, Vec<u8>)> = Vec::new();
    let st = train::train_sft(
        cfg,
        &data,
        |r| {
            if r.step % 10 == 0 {
                info!("sft {:?} epoch {} step {} joint {:.4} rewrite {:.4}", r.phase, r.epoch, r.step, r.joint, r.rewrite);
            }
            log.push(r).map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
        },
        |epoch, st| {
            if every > 0 && epoch % every == 0 && epoch < cfg.sft.epochs {
                saves.push((epoch, model_to_bytes(&st.model)?, optimizer_to_bytes(st.optimizer.state())?));
            }
            Ok(())
        },
    )?;
    drop(log);
    for (epoch, m, o) in saves {
        rd.write(&format!("checkpoints/epoch-{epoch:03}/{MODEL_FILE}"), &m)?;
        rd.write(&format!("checkpoints/epoch-{epoch:03}/{OPTIMIZER_FILE}"), &o)?;
    }
    write_model(&mut rd, MODEL_FILE, &st.model)?;
    write_optimizer(&mut rd, OPTIMIZER_FILE, &st.optimizer)?;
    rd.finish(cfg)?;
    Ok(st)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RlProgress {
    /// Number of completed RL steps.
    pub step: u64,
}

/// GRPO refinement from an SFT checkpoint (which also serves as the frozen
/// reference). With `resume`, continues from an RL checkpoint directory
/// holding model, optimizer state and progress.
pub fn train_rl(cfg: &RunConfig, data_dir: &Path, sft: &Path, resume: Option<&Path>, out: &Path) -> Result<RlState> {
    let mut rd = RunDir::create(out, "train-rl")?;
    let data = load_data(cfg, data_dir, &mut rd)?;
    let reference = load_checked(cfg, &data, sft)?;
    rd.input("sft/model.bin", sft)?;
    let state = match resume {
        None => RlState::fresh(cfg, &reference),
        Some(dir) => {
            let policy = load_checked(cfg, &data, &dir.join(MODEL_FILE))?;
            let opt = load_optimizer(&dir.join(OPTIMIZER_FILE))?;
            let progress: RlProgress = serde_json::from_str(&std::fs::read_to_string(dir.join(RL_STATE_FILE))?)?;
            rd.input("resume/model.bin", &dir.join(MODEL_FILE))?;
            rd.input("resume/optimizer.bin", &dir.join(OPTIMIZER_FILE))?;
            rd.argument("resume_step", progress.step)?;
            RlState::resume(cfg, policy, opt, progress.step)
        }
    };
    let mut log = JsonLines::new(rd.create_file(RL_LOG)?);
    let every = cfg.checkpoints.rl_every_steps;
    let mut saves: Vec<(u64, Vec<u8>, Vec<u8>)> = Vec::new();
    let state = train::train_rl(cfg, &data, &reference, state, |report, st| {
        if report.step % 10 == 0 {
            info!("rl step {} reward {:.4} kl {:.5} len {:.1}", report.step, report.mean_reward, report.kl, report.mean_len);
        }
        log.push(report).map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        if every > 0 && st.step % every == 0 && st.step < cfg.rl.steps {
            saves.push((st.step, model_to_bytes(&st.policy)?, optimizer_to_bytes(st.optimizer.state())?));
        }
        Ok(())
    })?;
    drop(log);
    for (step, m, o) in saves {
        let dir = format!("checkpoints/step-{step:04}");
        rd.write(&format!("{dir}/{MODEL_FILE}"), &m)?;
        rd.write(&format!("{dir}/{OPTIMIZER_FILE}"), &o)?;
        rd.write(&format!("{dir}/{RL_STATE_FILE}"), &serde_json::to_vec(&RlProgress { step })?)?;
    }
    write_model(&mut rd, MODEL_FILE, &state.policy)?;
    write_optimizer(&mut rd, OPTIMIZER_FILE, &state.optimizer)?;
    rd.write(RL_STATE_FILE, &serde_json::to_vec(&RlProgress { step: state.step })?)?;
    rd.finish(cfg)?;
    Ok(state)
}

/// Evaluates `modes` on the held-out set and writes the report.
pub fn eval(cfg: &RunConfig, data_dir: &Path, checkpoint: &Path, modes: &[Pathway], out: &Path) -> Result<ModeReport> {
    let mut rd = RunDir::create(out, "eval")?;
    let data = load_data(cfg, data_dir, &mut rd)?;
    let model = load_checked(cfg, &data, checkpoint)?;
    rd.input("checkpoint", checkpoint)?;
    rd.argument("modes", modes.iter().map(|p| p.name()).collect::<Vec<_>>())?;
    let report = evaluate_modes(&model, &data.eval_set(), modes, &cfg.eval)?;
    for p in &report.pathways {
        info!("{}: Hit@1 {:.4} NDCG@10 {:.4}", p.pathway, p.metrics.hit_at_1, p.metrics.ndcg_at_10);
    }
    rd.write(EVAL_REPORT, (serde_json::to_string_pretty(&report)? + "\n").as_bytes())?;
    rd.finish(cfg)?;
    Ok(report)
}

/// One row of the λ sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub first_epoch_joint: f64,
    pub last_epoch_joint: f64,
    pub last_epoch_rewrite: f64,
    /// Pathway name → Hit@1.
    pub hit_at_1: BTreeMap<String, f64>,
    /// Pathway name → NDCG@10.
    pub ndcg_at_10: BTreeMap<String, f64>,
}

/// Mean joint loss of the first and last joint-phase epochs.
pub fn epoch_means(log: &[SftRecord], field: fn(&SftRecord) -> f64) -> Option<(f64, f64)> {
    let joint: Vec<&SftRecord> = log.iter().filter(|r| r.phase == Phase::Joint).collect();
    let first = joint.first()?.epoch;
    let last = joint.last()?.epoch;
    let mean = |e: usize| {
        let v: Vec<f64> = joint.iter().filter(|r| r.epoch == e).map(|r| field(r)).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    Some((mean(first), mean(last)))
}

pub fn lambda_dir(lambda: f64) -> String {
    format!("lambda-{lambda}")
}

/// One SFT run plus a four-pathway evaluation per λ, and a consolidated
/// table. Each sub-run is an ordinary `train-sft` / `eval` directory.
pub fn sweep_lambda(cfg: &RunConfig, data_dir: &Path, values: &[f64], out: &Path) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::BadConfig("the λ sweep needs at least one value".into()).into());
    }
    let mut rd = RunDir::create(out, "sweep-lambda")?;
    rd.argument("lambda_values", values)?;
    let mut rows = Vec::new();
    for &lambda in values {
        let mut sub = cfg.clone();
        sub.sft.loss.lambda = lambda;
        sub.validate()?;
        let dir = out.join(lambda_dir(lambda));
        info!("sweep: λ = {lambda}");
        let st = train_sft(&sub, data_dir, &dir.join("sft"))?;
        drop(st);
        let report = eval(&sub, data_dir, &dir.join("sft").join(MODEL_FILE), &Pathway::ALL, &dir.join("eval"))?;
        let log: Vec<SftRecord> = read_json_lines(&dir.join("sft").join(SFT_LOG))?;
        let (first, last) = epoch_means(&log, |r| r.joint).unwrap_or((f64::NAN, f64::NAN));
        let (_, rewrite) = epoch_means(&log, |r| r.rewrite).unwrap_or((f64::NAN, f64::NAN));
        rows.push(SweepRow {
            lambda,
            first_epoch_joint: first,
            last_epoch_joint: last,
            last_epoch_rewrite: rewrite,
            hit_at_1: report.pathways.iter().map(|p| (p.pathway.clone(), p.metrics.hit_at_1)).collect(),
            ndcg_at_10: report.pathways.iter().map(|p| (p.pathway.clone(), p.metrics.ndcg_at_10)).collect(),
        });
    }
    rd.input("data/train.jsonl", &data_dir.join(TRAIN_FILE))?;
    rd.input("data/eval.jsonl", &data_dir.join(EVAL_FILE))?;
    rd.write(SWEEP_JSON, (serde_json::to_string_pretty(&rows)? + "\n").as_bytes())?;
    rd.write(SWEEP_TABLE, crate::report::sweep_table(&rows).as_bytes())?;
    rd.finish(cfg)?;
    Ok(rows)
}
