//! Mini-batch training with early stopping on the validation metric, plus
//! sample extraction and evaluation over a split.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::TaskMode;
use crate::data::types::{CheckinSequence, DatasetSplit};
use crate::error::{Error, Result};
use crate::heads::{mixture_expectation, LogTimeNormalizer, MixtureParams};
use crate::metrics::{ranking_from_scores, MetricReport};
use crate::model::MobilityModel;
use crate::optim::Adam;
use crate::tape::{GradAccum, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TpLossMode {
    Mae,
    Nll,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: TaskMode,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub tp_loss: TpLossMode,
}

impl TrainConfig {
    pub fn new(task: TaskMode) -> Self {
        Self {
            task,
            learning_rate: 0.001,
            max_epochs: 100,
            patience: 10,
            batch_size: 64,
            seed: 0,
            tp_loss: TpLossMode::Mae,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("learning rate, epochs, and batch size must be positive".into()));
        }
        Ok(())
    }
}

/// One supervised example: an input run of records plus the task target.
#[derive(Clone, Debug)]
pub struct Sample {
    pub sequence_index: usize,
    pub user_id: usize,
    /// Records fed to the model (the full sequence for user linking, the
    /// prefix for next-location and arrival-time prediction).
    pub input_len: usize,
    pub target: Target,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Target {
    Poi(usize),
    User(usize),
    DeltaSecs(f64),
}

/// Builds samples for a task: sequences of length `n` contribute the prefix
/// of `n - 1` records with record `n` as target for next-location and
/// arrival-time runs, and the whole sequence for user linking. Arrival
/// targets must be positive, so zero-gap tails are skipped.
pub fn make_samples(sequences: &[CheckinSequence], indices: &[usize], task: TaskMode) -> Vec<Sample> {
    let mut out = Vec::with_capacity(indices.len());
    for &si in indices {
        let seq = &sequences[si];
        let n = seq.records.len();
        if n < 2 {
            continue;
        }
        match task {
            TaskMode::Lp => out.push(Sample {
                sequence_index: si,
                user_id: seq.user_id,
                input_len: n - 1,
                target: Target::Poi(seq.records[n - 1].poi_id),
            }),
            TaskMode::Tp => {
                let dt = seq.records[n - 1].delta_t;
                if dt > 0 {
                    out.push(Sample {
                        sequence_index: si,
                        user_id: seq.user_id,
                        input_len: n - 1,
                        target: Target::DeltaSecs(dt as f64),
                    });
                }
            }
            TaskMode::Tul => out.push(Sample {
                sequence_index: si,
                user_id: seq.user_id,
                input_len: n,
                target: Target::User(seq.user_id),
            }),
        }
    }
    out
}

/// Fits the log-time normalizer on every positive inter-event gap in the
/// training split.
pub fn fit_normalizer(sequences: &[CheckinSequence], split: &DatasetSplit) -> LogTimeNormalizer {
    let deltas = split
        .train
        .iter()
        .flat_map(|&si| sequences[si].records.iter().skip(1))
        .map(|r| r.delta_t as f64);
    LogTimeNormalizer::fit(deltas)
}

fn sample_loss(
    model: &MobilityModel,
    tape: &mut Tape,
    sequences: &[CheckinSequence],
    sample: &Sample,
    norm: &LogTimeNormalizer,
    tp_loss: TpLossMode,
    task: TaskMode,
) -> Result<crate::tape::NodeId> {
    let seq = &sequences[sample.sequence_index];
    let records = &seq.records[..sample.input_len];
    let user = match task {
        TaskMode::Tul => None,
        _ => Some(sample.user_id),
    };
    let fp = model.forward(tape, records, user, task)?;
    let mut loss = match (task, sample.target) {
        (TaskMode::Lp, Target::Poi(poi)) => {
            let beta = fp.beta.ok_or_else(|| Error::Config("no beta block for the location head".into()))?;
            model.heads.lp_loss_node(tape, beta, poi)
        }
        (TaskMode::Tul, Target::User(user)) => {
            model.heads.tul_loss_node(tape, fp.alpha, fp.beta, user)
        }
        (TaskMode::Tp, Target::DeltaSecs(dt)) => {
            let beta = fp.beta.ok_or_else(|| Error::Config("no beta block for the time head".into()))?;
            let tp = model.heads.tp_nodes(tape, beta);
            match tp_loss {
                TpLossMode::Mae => model.heads.tp_mae_loss_node(tape, tp, norm, dt)?,
                TpLossMode::Nll => model.heads.tp_nll_loss_node(tape, tp, norm, dt)?,
            }
        }
        _ => return Err(Error::Config("sample target does not match the task".into())),
    };
    if let Some(sel) = &fp.selection {
        if let Some(pull) = model.htpp.key_pull_loss_node(tape, fp.h_mat, sel) {
            loss = tape.add(loss, pull);
        }
    }
    Ok(loss)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    pub improved: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_metric: f64,
    pub history: Vec<EpochRecord>,
}

/// Trains in place, evaluating on the validation split after every epoch and
/// stopping once the task metric has failed to improve for more than
/// `patience` epochs. The best-validation parameters are restored on return.
pub fn train(
    model: &mut MobilityModel,
    sequences: &[CheckinSequence],
    split: &DatasetSplit,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let norm = fit_normalizer(sequences, split);
    let samples = make_samples(sequences, &split.train, cfg.task);
    if samples.is_empty() {
        return Err(Error::Data("no usable training samples".into()));
    }
    let mut adam = Adam::new(cfg.learning_rate, &model.store);
    let mut accum = GradAccum::new(&model.store);
    let mut order: Vec<usize> = (0..samples.len()).collect();

    let mut best_snapshot = model.store.export_values();
    let mut best_metric = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut stale = 0usize;
    let mut history = Vec::new();
    let mut epochs_run = 0;

    for epoch in 0..cfg.max_epochs {
        epochs_run = epoch + 1;
        let mut rng =
            ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add((epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            accum.zero();
            for &i in batch {
                let mut tape = Tape::new(&model.store);
                let loss = sample_loss(model, &mut tape, sequences, &samples[i], &norm, cfg.tp_loss, cfg.task)?;
                let value = tape.scalar_value(loss);
                if !value.is_finite() {
                    return Err(Error::Diverged(format!(
                        "non-finite loss {value} at epoch {epoch}"
                    )));
                }
                epoch_loss += value;
                let grads = tape.backward(loss);
                accum.absorb(grads);
            }
            accum.scale(1.0 / batch.len() as f64);
            adam.step(&mut model.store, &accum);
        }
        let train_loss = epoch_loss / samples.len() as f64;

        let val_report = evaluate(model, sequences, &split.valid, cfg.task, &norm)?;
        let val_metric = val_report.early_stop_score();
        let improved = val_metric > best_metric;
        if improved {
            best_metric = val_metric;
            best_epoch = epoch;
            best_snapshot = model.store.export_values();
            stale = 0;
        } else {
            stale += 1;
        }
        history.push(EpochRecord { epoch, train_loss, val_metric, improved });
        if !improved && stale > cfg.patience {
            break;
        }
    }

    model.store.import_values(&best_snapshot);
    Ok(TrainOutcome { epochs_run, best_epoch, best_val_metric: best_metric, history })
}

/// Forward-only evaluation over a list of sequence indices.
pub fn evaluate(
    model: &MobilityModel,
    sequences: &[CheckinSequence],
    indices: &[usize],
    task: TaskMode,
    norm: &LogTimeNormalizer,
) -> Result<MetricReport> {
    let samples = make_samples(sequences, indices, task);
    if samples.is_empty() {
        return Err(Error::Data("no usable evaluation samples".into()));
    }
    match task {
        TaskMode::Lp | TaskMode::Tul => {
            let mut rankings = Vec::with_capacity(samples.len());
            let mut targets = Vec::with_capacity(samples.len());
            for s in &samples {
                let seq = &sequences[s.sequence_index];
                let records = &seq.records[..s.input_len];
                let mut tape = Tape::new(&model.store);
                let user = if task == TaskMode::Tul { None } else { Some(s.user_id) };
                let fp = model.forward(&mut tape, records, user, task)?;
                let probs = match task {
                    TaskMode::Lp => {
                        let beta = fp.beta.ok_or_else(|| Error::Config("no beta block".into()))?;
                        model.heads.lp_probs_node(&mut tape, beta)
                    }
                    _ => model.heads.tul_probs_node(&mut tape, fp.alpha, fp.beta),
                };
                rankings.push(ranking_from_scores(tape.value(probs)));
                targets.push(match s.target {
                    Target::Poi(p) => p,
                    Target::User(u) => u,
                    Target::DeltaSecs(_) => unreachable!("ranking task"),
                });
            }
            MetricReport::from_rankings(task, &rankings, &targets)
        }
        TaskMode::Tp => {
            let mut preds = Vec::with_capacity(samples.len());
            let mut truths = Vec::with_capacity(samples.len());
            for s in &samples {
                let seq = &sequences[s.sequence_index];
                let records = &seq.records[..s.input_len];
                let mut tape = Tape::new(&model.store);
                let fp = model.forward(&mut tape, records, Some(s.user_id), task)?;
                let beta = fp.beta.ok_or_else(|| Error::Config("no beta block".into()))?;
                let tp = model.heads.tp_nodes(&mut tape, beta);
                let e = model.heads.tp_expectation_node(&mut tape, tp, norm);
                preds.push(tape.scalar_value(e));
                let Target::DeltaSecs(dt) = s.target else { unreachable!("time task") };
                truths.push(dt);
            }
            MetricReport::from_times(&preds, &truths)
        }
    }
}

/// Mixture parameters the model predicts for one input run, for diagnostics
/// and sampling-based decoding.
pub fn predict_mixture(
    model: &MobilityModel,
    records: &[crate::data::types::CheckinRecord],
    user_id: usize,
) -> Result<MixtureParams> {
    let mut tape = Tape::new(&model.store);
    let fp = model.forward(&mut tape, records, Some(user_id), TaskMode::Tp)?;
    let beta = fp.beta.ok_or_else(|| Error::Config("no beta block".into()))?;
    let tp = model.heads.tp_nodes(&mut tape, beta);
    let (w, mu, s) = model.heads.tp_constrained(&mut tape, tp);
    Ok(MixtureParams {
        weights: tape.value(w).to_vec(),
        means: tape.value(mu).to_vec(),
        scales: tape.value(s).to_vec(),
    })
}

/// Baseline MAE (minutes) of always predicting the training-split mean gap.
pub fn global_mean_baseline_mae(
    sequences: &[CheckinSequence],
    split: &DatasetSplit,
    eval_indices: &[usize],
) -> Result<f64> {
    let train_samples = make_samples(sequences, &split.train, TaskMode::Tp);
    if train_samples.is_empty() {
        return Err(Error::Data("no arrival-time training samples".into()));
    }
    let mean: f64 = train_samples
        .iter()
        .map(|s| match s.target {
            Target::DeltaSecs(d) => d,
            _ => 0.0,
        })
        .sum::<f64>()
        / train_samples.len() as f64;
    let eval_samples = make_samples(sequences, eval_indices, TaskMode::Tp);
    let truths: Vec<f64> = eval_samples
        .iter()
        .map(|s| match s.target {
            Target::DeltaSecs(d) => d,
            _ => 0.0,
        })
        .collect();
    let preds = vec![mean; truths.len()];
    Ok(crate::metrics::mae_rmse(&preds, &truths)?.0)
}

pub use crate::heads::mixture_sample;

/// Expected arrival gap in seconds for one input run.
pub fn predict_expected_gap(
    model: &MobilityModel,
    records: &[crate::data::types::CheckinRecord],
    user_id: usize,
    norm: &LogTimeNormalizer,
) -> Result<f64> {
    let p = predict_mixture(model, records, user_id)?;
    Ok(mixture_expectation(&p, norm))
}
