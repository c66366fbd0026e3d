//! Leave-one-subject-out protocol: train on the sources, then adapt to the
//! held-out target from `K` shots per class, repeatedly.

use std::collections::HashSet;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{QueryStats, RunConfig};
use super::report::{Audit, RunReport, SplitLog, TrialResult};
use crate::data::{loso_splits, sample_episode, Dataset, Episode, FeatureSet, QuerySize};
use crate::error::{FaceError, Result};
use crate::meta::{adapt_views, meta_train, pretrain, MetaState};
use crate::model::{argmax_rows, EncodedViews, Model};
use crate::norm::BnMode;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of trial `trial` on target subject `subject`.
pub fn trial_seed(base: u64, subject: usize, trial: usize) -> u64 {
    splitmix(splitmix(splitmix(base) ^ subject as u64) ^ trial as u64)
}

/// Seed of a training stage (`stage` distinguishes init, pretraining and
/// meta-training) for the split holding out `subject`.
fn stage_seed(base: u64, subject: usize, stage: u64) -> u64 {
    splitmix(trial_seed(base, subject, usize::MAX) ^ stage)
}

/// Models produced by training on one split's sources.
#[derive(Clone, Debug)]
pub struct TrainedSplit {
    pub target: usize,
    /// After pretraining only.
    pub pretrained: Model,
    /// After pretraining and meta-training.
    pub meta_trained: Model,
    pub log: SplitLog,
    pub audit: Audit,
}

fn sample_key(values: &[f32]) -> Vec<u32> {
    values.iter().map(|v| v.to_bits()).collect()
}

/// Counts source samples bitwise identical to a target sample, and
/// sources named like the target.
fn leakage(target: &FeatureSet, sources: &[&FeatureSet]) -> Audit {
    let keys: HashSet<Vec<u32>> = (0..target.len()).map(|i| sample_key(target.sample(i))).collect();
    let mut audit = Audit {
        splits_checked: 1,
        ..Audit::default()
    };
    for s in sources {
        if s.subject == target.subject {
            audit.target_subjects_in_training += 1;
        }
        audit.target_samples_in_training += (0..s.len()).filter(|&i| keys.contains(&sample_key(s.sample(i)))).count();
    }
    audit
}

/// Pretrains and meta-trains a fresh model on every subject except `target`.
pub fn train_split(dataset: &Dataset, target: usize, cfg: &RunConfig) -> Result<TrainedSplit> {
    let ids: Vec<String> = dataset.subjects.iter().map(|s| s.subject.clone()).collect();
    let split = loso_splits(&ids)?
        .into_iter()
        .nth(target)
        .ok_or_else(|| FaceError::Precondition(format!("no subject at index {target}")))?;
    let sources: Vec<FeatureSet> = dataset
        .subjects
        .iter()
        .filter(|s| split.sources.contains(&s.subject))
        .cloned()
        .collect();
    let refs: Vec<&FeatureSet> = sources.iter().collect();
    let audit = leakage(&dataset.subjects[target], &refs);

    let mut model = Model::new(cfg.model.clone(), &dataset.electrodes, stage_seed(cfg.pretrain.seed, target, 1))?;
    let mut pcfg = cfg.pretrain.clone();
    pcfg.seed = stage_seed(cfg.pretrain.seed, target, 2);
    let plog = pretrain(&mut model, &sources, &pcfg, cfg.meta.smoothing, cfg.meta.bn_momentum)?;
    let pretrained = model.clone();
    let mut mcfg = cfg.meta.clone();
    mcfg.seed = stage_seed(cfg.meta.seed, target, 3);
    let mut state = MetaState::new(model, &mcfg);
    let mlog = meta_train(&mut state, &sources, &mcfg)?;
    info!(
        "split {}: pretrain loss {:?}, accuracy {:?}; meta loss {:?}",
        split.target,
        plog.losses.last(),
        plog.accuracies.last(),
        mlog.losses.last()
    );
    Ok(TrainedSplit {
        target,
        pretrained,
        meta_trained: state.model,
        log: SplitLog {
            target: split.target,
            sources: split.sources,
            pretrain_final_loss: plog.losses.last().copied(),
            pretrain_final_accuracy: plog.accuracies.last().copied(),
            meta_final_loss: mlog.losses.last().copied(),
        },
        audit,
    })
}

fn hits(probs: &face_diffcore::Tensor<f32>, labels: &[usize]) -> usize {
    argmax_rows(probs).iter().zip(labels).filter(|(a, b)| a == b).count()
}

/// Correct query predictions of one trial: adapted, unadapted.
fn score_trial(
    model: &Model,
    target: &FeatureSet,
    ep: &Episode,
    cached: Option<&EncodedViews>,
    cfg: &RunConfig,
) -> Result<(usize, usize)> {
    let inner = cfg.meta.inner();
    match (cfg.eval.query_stats, cached) {
        (QueryStats::Running, Some(cached)) => {
            let support = cached.select(&ep.support);
            let adapted = adapt_views(model, &support, &inner)?;
            let query = cached.select(&ep.query);
            let a = hits(&model.probs_from_views(&adapted, &query, BnMode::Running)?, &query.labels);
            let u = hits(&model.probs_from_views(&model.params, &query, BnMode::Running)?, &query.labels);
            Ok((a, u))
        }
        _ => {
            let (support, encoder_moments) = model.encode_observed(&model.batch(target, &ep.support)?)?;
            let adapted = adapt_views(model, &support, &inner)?;
            let stats = model.bn.with_observed(&encoder_moments)?;
            let query = model.encode_with(&model.batch(target, &ep.query)?, &stats)?;
            let score = |params: &face_diffcore::ParamSet<f32>| -> Result<usize> {
                let s = stats.with_observed(&model.meta_moments(params, &support)?)?;
                Ok(hits(&model.probs_with(params, &query, &s)?, &query.labels))
            };
            Ok((score(&adapted)?, score(&model.params)?))
        }
    }
}

/// `R` adaptation trials per shot count on the split's target subject.
pub fn evaluate_split(dataset: &Dataset, split: &TrainedSplit, cfg: &RunConfig) -> Result<(Vec<TrialResult>, Audit)> {
    let target = &dataset.subjects[split.target];
    let all: Vec<usize> = (0..target.len()).collect();
    let model = &split.meta_trained;
    // running statistics do not depend on the trial, so encode the target once
    let cached = match cfg.eval.query_stats {
        QueryStats::Running => Some(model.encode(&model.batch(target, &all)?, BnMode::Running)?),
        QueryStats::Support => None,
    };
    let pre = &split.pretrained;
    let pre_views = pre.encode(&pre.batch(target, &all)?, BnMode::Running)?;
    let jobs: Vec<(usize, usize)> = cfg
        .eval
        .shots
        .iter()
        .flat_map(|&k| (0..cfg.eval.repeats).map(move |r| (k, r)))
        .collect();
    let results: Vec<Result<(TrialResult, usize)>> = jobs
        .par_iter()
        .map(|&(k, r)| {
            let seed = trial_seed(cfg.eval.seed, split.target, r);
            let ep = sample_episode(target, k, QuerySize::Remaining, seed)?;
            let support: HashSet<usize> = ep.support.iter().copied().collect();
            let overlaps = ep.query.iter().filter(|q| support.contains(q)).count();
            let (adapted, unadapted) = score_trial(model, target, &ep, cached.as_ref(), cfg)?;
            let pq = pre_views.select(&ep.query);
            let baseline = hits(&pre.probs_from_views(&pre.params, &pq, BnMode::Running)?, &pq.labels);
            let q = ep.query.len() as f64;
            Ok((
                TrialResult {
                    subject: target.subject.clone(),
                    trial: r,
                    seed,
                    shots: k,
                    query_size: ep.query.len(),
                    correct: adapted,
                    accuracy: adapted as f64 / q,
                    unadapted_accuracy: unadapted as f64 / q,
                    pretrain_accuracy: baseline as f64 / q,
                },
                overlaps,
            ))
        })
        .collect();
    let mut trials = Vec::with_capacity(results.len());
    let mut audit = Audit::default();
    for r in results {
        let (t, overlaps) = r?;
        audit.trials_checked += 1;
        audit.support_query_overlaps += overlaps;
        trials.push(t);
    }
    Ok((trials, audit))
}

/// Runs every split, keeping whatever finished if a split fails.
pub fn run_loso_partial(dataset: &Dataset, cfg: &RunConfig, label: &str) -> RunReport {
    let mut report = RunReport::new(label, cfg.clone());
    let outcome = (|| -> Result<()> {
        cfg.validate()?;
        let ids: Vec<String> = dataset.subjects.iter().map(|s| s.subject.clone()).collect();
        loso_splits(&ids)?;
        for t in 0..dataset.subjects.len() {
            let split = train_split(dataset, t, cfg)?;
            let (trials, audit) = evaluate_split(dataset, &split, cfg)?;
            report.audit.merge(&split.audit);
            report.audit.merge(&audit);
            report.splits.push(split.log);
            report.trials.extend(trials);
            report.summarize();
        }
        Ok(())
    })();
    if let Err(e) = outcome {
        report.aborted = Some(e.to_string());
    }
    report.summarize();
    report
}

pub fn run_loso(dataset: &Dataset, cfg: &RunConfig) -> Result<RunReport> {
    let report = run_loso_partial(dataset, cfg, "face");
    match &report.aborted {
        Some(e) => Err(FaceError::Precondition(format!("LOSO run aborted: {e}"))),
        None => Ok(report),
    }
}

/// Which of the two modules are switched on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Switches {
    pub cvf: bool,
    pub fsa: bool,
}

impl Switches {
    pub const ALL: [Switches; 4] = [
        Switches { cvf: true, fsa: true },
        Switches { cvf: true, fsa: false },
        Switches { cvf: false, fsa: true },
        Switches { cvf: false, fsa: false },
    ];

    pub fn label(self) -> String {
        let on = |b: bool| if b { "on" } else { "off" };
        format!("cvf-{}_fsa-{}", on(self.cvf), on(self.fsa))
    }
}

/// One LOSO run per switch combination.
pub fn ablation_run(dataset: &Dataset, cfg: &RunConfig, switches: &[Switches]) -> Result<Vec<RunReport>> {
    switches
        .iter()
        .map(|sw| {
            let mut c = cfg.clone();
            c.model.cvf = sw.cvf;
            c.model.fsa = sw.fsa;
            let report = run_loso_partial(dataset, &c, &sw.label());
            match &report.aborted {
                Some(e) => Err(FaceError::Precondition(format!("{} aborted: {e}", sw.label()))),
                None => Ok(report),
            }
        })
        .collect()
}

/// One LOSO run per attention head count.
pub fn sweep_heads(dataset: &Dataset, cfg: &RunConfig, heads: &[usize]) -> Result<Vec<RunReport>> {
    heads
        .iter()
        .map(|&l| {
            let mut c = cfg.clone();
            c.model.heads = l;
            let report = run_loso_partial(dataset, &c, &format!("heads-{l}"));
            match &report.aborted {
                Some(e) => Err(FaceError::Precondition(format!("heads={l} aborted: {e}"))),
                None => Ok(report),
            }
        })
        .collect()
}
