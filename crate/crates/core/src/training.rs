//! Loss, optimization loop, evaluation harness and the copy-last baseline.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::PointCloudSequence;
use crate::diffcore::{adam_step, AdamConfig, AdamState, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::metrics::{chamfer_distance, chamfer_on_tape, emd, emd_on_tape_capped, MetricReport};
use crate::network::{init_params, rollout, rollout_clouds, ArchitectureConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lambda_emd: f64,
    /// Frames consumed before the first prediction; at least 1.
    pub warmup_frames: usize,
    /// Interval of progress log lines.
    pub eval_every: usize,
    /// Shuffles the round-robin order of the training sequences.
    pub seed: u64,
    pub emd_subsample_cap: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            steps: 2000,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            lambda_emd: 1.0,
            warmup_frames: 1,
            eval_every: 100,
            seed: 0,
            emd_subsample_cap: 512,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if !(self.lambda_emd >= 0.0) {
            return Err(Error::Config("lambda_emd must be non-negative".into()));
        }
        if self.warmup_frames == 0 {
            return Err(Error::Config("warmup_frames must be at least 1".into()));
        }
        if self.emd_subsample_cap == 0 {
            return Err(Error::Config("emd_subsample_cap must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.eps > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("invalid Adam hyperparameters".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// `CD + λ·EMD` on plain values.
pub fn loss(pred: &PointCloud, target: &PointCloud, lambda_emd: f64) -> Result<f64> {
    let cd = chamfer_distance(pred, target);
    if lambda_emd == 0.0 {
        return Ok(cd);
    }
    Ok(cd + lambda_emd * emd(pred, target)?)
}

/// Loss nodes for one predicted frame.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub loss: Var,
    pub cd: Var,
    pub emd: Option<Var>,
}

pub fn loss_on_tape(tape: &mut Tape, pred: Var, target: &PointCloud, lambda_emd: f64, emd_cap: usize) -> Result<LossTerms> {
    let cd = chamfer_on_tape(tape, pred, target)?;
    if lambda_emd == 0.0 {
        return Ok(LossTerms { loss: cd, cd, emd: None });
    }
    let e = emd_on_tape_capped(tape, pred, target, emd_cap)?;
    let weighted = tape.scale(e, lambda_emd);
    let loss = tape.add(cd, weighted)?;
    Ok(LossTerms { loss, cd, emd: Some(e) })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub loss: f64,
    pub cd: f64,
    pub emd: f64,
}

pub const LOSS_CSV_HEADER: &str = "step,loss,cd,emd";

pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut s = String::from(LOSS_CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.step, r.loss, r.cd, r.emd);
    }
    s
}

/// Mean loss over all one-step predictions of `seq`, recorded on `tape`.
pub fn sequence_loss(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ArchitectureConfig,
    seq: &PointCloudSequence,
    tcfg: &TrainConfig,
) -> Result<(Var, f64, f64)> {
    let warmup = tcfg.warmup_frames;
    if seq.len() < warmup + 1 {
        return Err(Error::Config(format!("sequence of {} frames is too short for warmup {warmup}", seq.len())));
    }
    let horizon = seq.len() - warmup;
    let steps = rollout(tape, store, cfg, seq, warmup, horizon)?;
    let mut total: Option<Var> = None;
    let (mut cd_sum, mut emd_sum) = (0.0, 0.0);
    for (i, step) in steps.iter().enumerate() {
        let target = &seq.frames()[warmup + i];
        let terms = loss_on_tape(tape, step.pred, target, tcfg.lambda_emd, tcfg.emd_subsample_cap)?;
        cd_sum += tape.scalar(terms.cd);
        emd_sum += terms.emd.map_or(0.0, |e| tape.scalar(e));
        total = Some(match total {
            None => terms.loss,
            Some(t) => tape.add(t, terms.loss)?,
        });
    }
    let h = horizon as f64;
    let total = total.expect("horizon is at least one");
    Ok((tape.scale(total, 1.0 / h), cd_sum / h, emd_sum / h))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub curve: Vec<LossRow>,
}

/// Round-robin order over `n` sequences, shuffled once by `seed`.
pub fn schedule(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

pub fn train(cfg: &ArchitectureConfig, seqs: &[PointCloudSequence], tcfg: &TrainConfig) -> Result<TrainOutcome> {
    train_from(init_params(cfg)?, cfg, seqs, tcfg)
}

/// Train starting from `params`. The loss row of step `s` is measured
/// before that step's update.
pub fn train_from(
    mut params: ParamStore,
    cfg: &ArchitectureConfig,
    seqs: &[PointCloudSequence],
    tcfg: &TrainConfig,
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    cfg.validate()?;
    if seqs.is_empty() {
        return Err(Error::Config("no training sequences".into()));
    }
    let order = schedule(seqs.len(), tcfg.seed);
    let adam = tcfg.adam();
    let mut state = AdamState::new();
    let mut curve = Vec::with_capacity(tcfg.steps);
    for step in 0..tcfg.steps {
        let seq = &seqs[order[step % order.len()]];
        let mut tape = Tape::new();
        let (loss, cd, emd) = sequence_loss(&mut tape, &params, cfg, seq, tcfg)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Config(format!("loss diverged at step {step}")));
        }
        params.zero_grad();
        tape.backward(loss, &mut params)?;
        adam_step(&mut params, &mut state, &adam);
        curve.push(LossRow {
            step,
            loss: value,
            cd,
            emd,
        });
        if tcfg.eval_every > 0 && (step % tcfg.eval_every == 0 || step + 1 == tcfg.steps) {
            tracing::info!(step, loss = value, cd, emd, "train");
        }
    }
    params.zero_grad();
    Ok(TrainOutcome { params, curve })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRow {
    pub sequence_id: String,
    /// Index of the predicted (target) frame.
    pub frame: usize,
    pub report: MetricReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub cd: f64,
    pub emd: f64,
    pub cd_top5: f64,
}

impl MetricMeans {
    pub fn of<'a>(reports: impl IntoIterator<Item = &'a MetricReport>) -> Self {
        let (mut n, mut cd, mut emd, mut top) = (0usize, 0.0, 0.0, 0.0);
        for r in reports {
            n += 1;
            cd += r.cd;
            emd += r.emd;
            top += r.cd_top5;
        }
        let n = n.max(1) as f64;
        Self {
            cd: cd / n,
            emd: emd / n,
            cd_top5: top / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    /// Sorted by sequence id, then frame.
    pub rows: Vec<FrameRow>,
    pub aggregate: MetricMeans,
}

impl EvalResult {
    fn from_rows(mut rows: Vec<FrameRow>) -> Self {
        rows.sort_by(|a, b| a.sequence_id.cmp(&b.sequence_id).then(a.frame.cmp(&b.frame)));
        let aggregate = MetricMeans::of(rows.iter().map(|r| &r.report));
        Self { rows, aggregate }
    }

    /// Means per sequence, in row order.
    pub fn per_sequence(&self) -> Vec<(String, MetricMeans)> {
        let mut out: Vec<(String, MetricMeans)> = Vec::new();
        let mut start = 0;
        while start < self.rows.len() {
            let id = &self.rows[start].sequence_id;
            let end = start + self.rows[start..].iter().take_while(|r| &r.sequence_id == id).count();
            out.push((id.clone(), MetricMeans::of(self.rows[start..end].iter().map(|r| &r.report))));
            start = end;
        }
        out
    }
}

fn map_sequences<F>(seqs: &[(String, PointCloudSequence)], threads: usize, f: F) -> Result<Vec<FrameRow>>
where
    F: Fn(&str, &PointCloudSequence) -> Result<Vec<FrameRow>> + Sync,
{
    let threads = threads.clamp(1, seqs.len().max(1));
    if threads == 1 {
        let mut rows = Vec::new();
        for (id, s) in seqs {
            rows.extend(f(id, s)?);
        }
        return Ok(rows);
    }
    let chunk = seqs.len().div_ceil(threads);
    let results: Vec<Result<Vec<FrameRow>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = seqs
            .chunks(chunk)
            .map(|part| {
                let f = &f;
                scope.spawn(move || {
                    let mut rows = Vec::new();
                    for (id, s) in part {
                        rows.extend(f(id, s)?);
                    }
                    Ok(rows)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    Ok(rows)
}

/// Teacher-forced one-step evaluation over every frame after the warmup.
pub fn evaluate(
    params: &ParamStore,
    cfg: &ArchitectureConfig,
    seqs: &[(String, PointCloudSequence)],
    warmup: usize,
    emd_cap: usize,
    threads: usize,
) -> Result<EvalResult> {
    let rows = map_sequences(seqs, threads, |id, seq| {
        if seq.len() < warmup + 1 {
            return Err(Error::Config(format!("sequence `{id}` is too short for warmup {warmup}")));
        }
        let preds = rollout_clouds(params, cfg, seq, warmup, seq.len() - warmup)?;
        preds
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let frame = warmup + i;
                Ok(FrameRow {
                    sequence_id: id.to_string(),
                    frame,
                    report: MetricReport::compute(p, &seq.frames()[frame], emd_cap)?,
                })
            })
            .collect()
    })?;
    Ok(EvalResult::from_rows(rows))
}

/// Predict every frame by the one before it.
pub fn copy_last_baseline(seq: &PointCloudSequence, warmup: usize, emd_cap: usize) -> Result<Vec<MetricReport>> {
    if warmup == 0 || seq.len() < warmup + 1 {
        return Err(Error::Config(format!("need at least {} frames", warmup.max(1) + 1)));
    }
    (warmup..seq.len())
        .map(|t| MetricReport::compute(&seq.frames()[t - 1], &seq.frames()[t], emd_cap))
        .collect()
}

pub fn evaluate_copy_last(seqs: &[(String, PointCloudSequence)], warmup: usize, emd_cap: usize) -> Result<EvalResult> {
    let rows = map_sequences(seqs, 1, |id, seq| {
        Ok(copy_last_baseline(seq, warmup, emd_cap)?
            .into_iter()
            .enumerate()
            .map(|(i, report)| FrameRow {
                sequence_id: id.to_string(),
                frame: warmup + i,
                report,
            })
            .collect())
    })?;
    Ok(EvalResult::from_rows(rows))
}
