//! Supervised pretraining, the bi-level episode loop and target adaptation.

use face_diffcore::maml::{grad_through_update, sgd_step, InnerUpdate};
use face_diffcore::nn::{smooth_cross_entropy, BatchMoments};
use face_diffcore::{Graph, NodeId, ParamNodes, ParamSet, Partition, Real, Tensor};
use log::{debug, info};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::config::{InnerConfig, MetaConfig, PretrainConfig};
use crate::data::{sample_episode, FeatureSet, QuerySize};
use crate::error::{FaceError, Result};
use crate::model::{accuracy, Batch, EncodedViews, Model, ModelConfig, Views};
use crate::norm::{BnContext, BnMode, BnRegistry};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    /// Mean training loss per epoch.
    pub losses: Vec<f64>,
    /// Training accuracy per epoch, measured on the minibatches as seen.
    pub accuracies: Vec<f64>,
}

fn finite_or(stage: &'static str, value: f64, what: impl FnOnce() -> String) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(FaceError::Diverged {
            stage,
            detail: what(),
        })
    }
}

fn gather(sources: &[FeatureSet], picks: &[(usize, usize)]) -> (Tensor<f32>, Vec<usize>) {
    let (c, b) = (sources[0].channels(), sources[0].bands());
    let mut data = Vec::with_capacity(picks.len() * c * b);
    let mut labels = Vec::with_capacity(picks.len());
    for &(s, i) in picks {
        data.extend_from_slice(sources[s].sample(i));
        labels.push(sources[s].labels()[i]);
    }
    (
        Tensor::new(vec![picks.len(), c, b], data).expect("gathered batch is consistent"),
        labels,
    )
}

/// One epoch of minibatches as `(subject, sample)` pairs, either pooled
/// across subjects or each drawn from one subject.
fn batch_plan(sources: &[FeatureSet], cfg: &PretrainConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<(usize, usize)>> {
    let mut plan: Vec<Vec<(usize, usize)>> = if cfg.subject_batches {
        sources
            .iter()
            .enumerate()
            .flat_map(|(s, fs)| {
                let mut idx: Vec<usize> = (0..fs.len()).collect();
                idx.shuffle(rng);
                idx.chunks(cfg.batch_size)
                    .map(|c| c.iter().map(|&i| (s, i)).collect())
                    .collect::<Vec<_>>()
            })
            .collect()
    } else {
        let mut pool: Vec<(usize, usize)> = sources
            .iter()
            .enumerate()
            .flat_map(|(s, fs)| (0..fs.len()).map(move |i| (s, i)))
            .collect();
        pool.shuffle(rng);
        pool.chunks(cfg.batch_size).map(|c| c.to_vec()).collect()
    };
    plan.shuffle(rng);
    plan
}

/// Minimizes the smoothed cross-entropy over the pooled source samples with
/// Adam; every batch-norm layer runs on batch statistics and updates its
/// running estimates.
pub fn pretrain(
    model: &mut Model,
    sources: &[FeatureSet],
    cfg: &PretrainConfig,
    smoothing: f64,
    bn_momentum: f64,
) -> Result<PretrainLog> {
    cfg.validate()?;
    if sources.is_empty() {
        return Err(FaceError::Precondition("pretraining needs at least one source subject".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.rate);
    let mut log = PretrainLog::default();
    let names = model.params.names();
    for epoch in 0..cfg.epochs {
        let plan = batch_plan(sources, cfg, &mut rng);
        let (mut loss_sum, mut hits, mut seen, mut batches) = (0.0, 0.0, 0usize, 0usize);
        for chunk in &plan {
            if chunk.len() < 2 {
                continue;
            }
            let (x, labels) = gather(sources, chunk);
            let batch = model.inputs(x, labels)?;
            let mut g = Graph::<f32>::new();
            let p = model.params.bind(&mut g)?;
            let (xn, sn) = batch.nodes(&mut g);
            let mut bn = BnContext::new(BnMode::Batch, &model.bn);
            let views = model.config.encode_views(&mut g, &p, &mut bn, xn, sn)?;
            let probs = model.config.meta_forward(&mut g, &p, &mut bn, &views)?;
            let out = smooth_cross_entropy(&mut g, probs, &batch.labels, smoothing)?;
            let loss = g.value(out.loss).item() as f64;
            finite_or("pretraining", loss, || format!("loss is {loss} in epoch {epoch}"))?;
            let observed = std::mem::take(&mut bn.observed);
            let ids = p.ids(&names)?;
            let grads = g.grad(out.loss, &ids)?;
            let grads: Vec<(String, Tensor<f32>)> = names
                .iter()
                .cloned()
                .zip(grads.iter().map(|&d| g.value(d).clone()))
                .collect();
            hits += accuracy(g.value(probs), &batch.labels) * batch.len() as f64;
            seen += batch.len();
            loss_sum += loss;
            batches += 1;
            adam.step(&mut model.params, &grads)?;
            model.bn.update(&observed, bn_momentum)?;
        }
        let mean = if batches == 0 { 0.0 } else { loss_sum / batches as f64 };
        let acc = if seen == 0 { 0.0 } else { hits / seen as f64 };
        debug!("pretrain epoch {epoch}: loss {mean:.4}, accuracy {acc:.3}");
        log.losses.push(mean);
        log.accuracies.push(acc);
    }
    Ok(log)
}

/// Adapted meta-parameter nodes after an on-graph inner loop.
#[derive(Clone, Debug)]
pub struct InnerResult {
    /// Parameter nodes with every meta entry replaced by its adapted node.
    pub adapted: ParamNodes,
    pub updates: Vec<InnerUpdate>,
    /// Support loss before each step.
    pub losses: Vec<f64>,
}

/// `m` plain gradient steps on the meta parameters, recorded on the graph
/// so the result stays differentiable. Base parameter nodes are never
/// replaced.
pub fn inner_update<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    p: &ParamNodes,
    meta_names: &[String],
    running: &BnRegistry,
    support: &Views,
    labels: &[usize],
    inner: &InnerConfig,
) -> Result<InnerResult> {
    if labels.is_empty() {
        return Err(FaceError::Precondition("support set is empty".into()));
    }
    let originals = p.ids(meta_names)?;
    let mut current = p.clone();
    let mut losses = Vec::with_capacity(inner.steps);
    for _ in 0..inner.steps {
        let mut bn = BnContext::new(BnMode::Batch, running);
        let probs = cfg.meta_forward(g, &current, &mut bn, support)?;
        let out = smooth_cross_entropy(g, probs, labels, inner.smoothing)?;
        losses.push(g.value(out.loss).item().to_f64().unwrap_or(f64::NAN));
        let ids = current.ids(meta_names)?;
        let next = sgd_step(g, out.loss, &ids, inner.alpha, inner.first_order)?;
        for (name, id) in meta_names.iter().zip(next) {
            current.set(name, id)?;
        }
    }
    let updates = originals
        .iter()
        .zip(current.ids(meta_names)?)
        .map(|(&param, updated)| InnerUpdate { param, updated })
        .collect();
    Ok(InnerResult {
        adapted: current,
        updates,
        losses,
    })
}

/// Support and query inputs of one subject.
#[derive(Clone, Debug)]
pub struct EpisodeBatch {
    pub subject: String,
    pub support: Batch,
    pub query: Batch,
}

/// Summed post-adaptation query loss and its gradient with respect to
/// every parameter.
#[derive(Clone, Debug)]
pub struct OuterGradient<T: Real> {
    pub grads: Vec<(String, Tensor<T>)>,
    pub loss: f64,
    pub query_losses: Vec<f64>,
    /// Batch moments observed on the query passes.
    pub observed: Vec<(String, BatchMoments)>,
}

/// Differentiates `Σ_i L_i(query_i; Θ'_i)` with respect to all of `params`,
/// through every inner loop.
pub fn outer_gradient<T: Real>(
    cfg: &ModelConfig,
    params: &ParamSet<T>,
    running: &BnRegistry,
    episodes: &[EpisodeBatch],
    inner: &InnerConfig,
    encoder_bn: BnMode,
) -> Result<OuterGradient<T>> {
    if episodes.is_empty() {
        return Err(FaceError::Precondition("outer update needs at least one episode".into()));
    }
    let mut g = Graph::<T>::new();
    let p = params.bind(&mut g)?;
    let meta_names = params.names_in(Partition::Meta);
    let mut updates = Vec::new();
    let mut total: Option<NodeId> = None;
    let mut query_losses = Vec::new();
    let mut observed = Vec::new();
    for ep in episodes {
        let (sx, ss) = ep.support.nodes(&mut g);
        let mut enc = BnContext::new(encoder_bn, running);
        let sv = cfg.encode_views(&mut g, &p, &mut enc, sx, ss)?;
        let res = inner_update(&mut g, cfg, &p, &meta_names, running, &sv, &ep.support.labels, inner)?;
        updates.extend(res.updates);

        let (qx, qs) = ep.query.nodes(&mut g);
        let mut bn = BnContext::new(encoder_bn, running);
        let qv = cfg.encode_views(&mut g, &p, &mut bn, qx, qs)?;
        bn.mode = BnMode::Batch;
        let probs = cfg.meta_forward(&mut g, &res.adapted, &mut bn, &qv)?;
        observed.extend(bn.observed);
        let out = smooth_cross_entropy(&mut g, probs, &ep.query.labels, inner.smoothing)?;
        query_losses.push(g.value(out.loss).item().to_f64().unwrap_or(f64::NAN));
        total = Some(match total {
            None => out.loss,
            Some(t) => g.add(t, out.loss)?,
        });
    }
    let total = total.expect("at least one episode");
    let loss = g.value(total).item().to_f64().unwrap_or(f64::NAN);
    finite_or("meta-training", loss, || {
        format!("query loss is {loss} (per episode {query_losses:?})")
    })?;
    let names = params.names();
    let ids = p.ids(&names)?;
    let grads = grad_through_update(&mut g, total, &updates, &ids)?;
    Ok(OuterGradient {
        grads: names
            .into_iter()
            .zip(grads.iter().map(|&d| g.value(d).clone()))
            .collect(),
        loss,
        query_losses,
        observed,
    })
}

/// Mutable state of a meta-training run.
#[derive(Clone, Debug)]
pub struct MetaState {
    pub model: Model,
    pub optimizer: Adam,
    pub episodes_done: usize,
    rng: ChaCha8Rng,
}

impl MetaState {
    pub fn new(model: Model, cfg: &MetaConfig) -> Self {
        Self {
            model,
            optimizer: Adam::new(cfg.outer_rate),
            episodes_done: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        }
    }
}

/// One outer step: gradient through the inner loops, Adam at rate `β`,
/// then running statistics from the query passes.
pub fn outer_update(state: &mut MetaState, episodes: &[EpisodeBatch], cfg: &MetaConfig) -> Result<f64> {
    let og = outer_gradient(
        &state.model.config,
        &state.model.params,
        &state.model.bn,
        episodes,
        &cfg.inner(),
        cfg.encoder_bn,
    )?;
    state.optimizer.step(&mut state.model.params, &og.grads)?;
    state.model.bn.update(&og.observed, cfg.bn_momentum)?;
    Ok(og.loss)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetaLog {
    /// Summed query loss per episode.
    pub losses: Vec<f64>,
}

/// Runs `N_e` episodes. Each samples `n` distinct source subjects, draws a
/// support/query split from each and performs one outer update.
pub fn meta_train(state: &mut MetaState, sources: &[FeatureSet], cfg: &MetaConfig) -> Result<MetaLog> {
    cfg.validate()?;
    if cfg.episodes > 0 && sources.len() < cfg.subjects_per_episode {
        return Err(FaceError::Config(format!(
            "{} subjects per episode but only {} sources",
            cfg.subjects_per_episode,
            sources.len()
        )));
    }
    info!(
        "meta-training: α={} β={} m={} n={} N_e={} K={} Q={}{}",
        cfg.inner_rate,
        cfg.outer_rate,
        cfg.inner_steps,
        cfg.subjects_per_episode,
        cfg.episodes,
        cfg.shots,
        cfg.query,
        if cfg.first_order { " (first order)" } else { "" }
    );
    state.optimizer.rate = cfg.outer_rate;
    let mut log = MetaLog::default();
    for _ in 0..cfg.episodes {
        let picks = index::sample(&mut state.rng, sources.len(), cfg.subjects_per_episode).into_vec();
        let mut batches = Vec::with_capacity(picks.len());
        for s in picks {
            let fs = &sources[s];
            let ep = sample_episode(fs, cfg.shots, QuerySize::Count(cfg.query), state.rng.gen())?;
            batches.push(EpisodeBatch {
                subject: fs.subject.clone(),
                support: state.model.batch(fs, &ep.support)?,
                query: state.model.batch(fs, &ep.query)?,
            });
        }
        let loss = outer_update(state, &batches, cfg)?;
        debug!("episode {}: query loss {loss:.4}", state.episodes_done);
        state.episodes_done += 1;
        log.losses.push(loss);
    }
    Ok(log)
}

/// Inner loop on already-encoded support views; returns the full parameter
/// set with the meta entries adapted.
pub fn adapt_views(model: &Model, support: &EncodedViews, inner: &InnerConfig) -> Result<ParamSet<f32>> {
    if support.is_empty() {
        return Err(FaceError::Precondition("support set is empty".into()));
    }
    let mut g = Graph::<f32>::new();
    let p = model.params.bind(&mut g)?;
    let v = support.nodes(&mut g);
    let names = model.meta_names();
    let res = inner_update(&mut g, &model.config, &p, &names, &model.bn, &v, &support.labels, inner)?;
    let mut out = model.params.clone();
    for name in &names {
        let t = g.value(res.adapted.get(name)?).clone();
        if !t.is_finite() {
            return Err(FaceError::Diverged {
                stage: "adaptation",
                detail: format!("parameter `{name}` became non-finite"),
            });
        }
        out.set(name, t)?;
    }
    Ok(out)
}

/// Target adaptation: the inner loop on a `K`-shot support batch, with no
/// outer step. Base parameters are returned untouched.
pub fn test_adapt(model: &Model, support: &Batch, inner: &InnerConfig, encoder_bn: BnMode) -> Result<ParamSet<f32>> {
    if support.is_empty() {
        return Err(FaceError::Precondition("support set is empty".into()));
    }
    let views = model.encode(support, encoder_bn)?;
    adapt_views(model, &views, inner)
}
