//! The full network: configuration, parameter initialization and the
//! split between the frozen encoders and the meta-adapted layers.

use face_diffcore::nn::BatchMoments;
use face_diffcore::{Graph, NodeId, ParamNodes, ParamSet, Partition, Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{classify, conv3_encode, conv3_width, dgcn_encode, Activation, DgcnConfig, GcnNorm};
use crate::cvf::{align_view, attention_nodes, fuse};
use crate::data::{ElectrodeMap, FeatureSet, Spatializer};
use crate::error::{FaceError, Result};
use crate::fsa::{adapt, predict};
use crate::norm::{BnContext, BnMode, BnRegistry};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub channels: usize,
    pub bands: usize,
    pub num_classes: usize,
    /// Band-axis kernel width of the graph branch.
    pub kernel: usize,
    pub reduction: usize,
    pub sigma1: Activation,
    pub sigma2: Activation,
    pub gcn_norm: GcnNorm,
    /// Filters per block of the spatial encoder.
    pub filters: usize,
    pub heads: usize,
    /// Key/value width per attention head.
    pub head_dim: usize,
    /// Adapter bottleneck width.
    pub bottleneck: usize,
    /// Cross-view fusion on; off feeds `Z_g` straight on.
    pub cvf: bool,
    /// Few-shot adapter on; off feeds the fused features to the head.
    pub fsa: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 62,
            bands: 5,
            num_classes: 3,
            kernel: 5,
            reduction: 2,
            sigma1: Activation::Sigmoid,
            sigma2: Activation::Relu,
            gcn_norm: GcnNorm::PerFeature,
            filters: 32,
            heads: 2,
            head_dim: 32,
            bottleneck: 64,
            cvf: true,
            fsa: true,
        }
    }
}

impl ModelConfig {
    pub fn dgcn(&self) -> DgcnConfig {
        DgcnConfig {
            channels: self.channels,
            bands: self.bands,
            kernel: self.kernel,
            reduction: self.reduction,
            sigma1: self.sigma1,
            sigma2: self.sigma2,
            norm: self.gcn_norm,
        }
    }

    /// `F_g = C·B`.
    pub fn graph_width(&self) -> usize {
        self.channels * self.bands
    }

    /// `D`, the flattened spatial feature width.
    pub fn spatial_width(&self) -> usize {
        conv3_width(self.filters)
    }

    /// `F_u`, the width entering the adapter and head.
    pub fn fused_width(&self) -> usize {
        if self.cvf {
            2 * self.graph_width()
        } else {
            self.graph_width()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dgcn().validate()?;
        if self.num_classes < 2 {
            return Err(FaceError::Config("need at least 2 classes".into()));
        }
        if self.cvf && (self.filters == 0 || self.heads == 0 || self.head_dim == 0) {
            return Err(FaceError::Config(
                "fusion needs filters, heads and head width".into(),
            ));
        }
        if self.fsa && (self.bottleneck == 0 || self.bottleneck >= self.fused_width()) {
            return Err(FaceError::Config(format!(
                "adapter bottleneck {} must be in 1..{}",
                self.bottleneck,
                self.fused_width()
            )));
        }
        Ok(())
    }

    /// Every parameter with its shape, partition and initializer.
    fn layout(&self) -> Vec<(String, Vec<usize>, Partition, Init)> {
        use Init::*;
        use Partition::*;
        let (c, b) = (self.channels, self.bands);
        let fg = self.graph_width();
        let gw = self.dgcn().norm_width();
        let mut out = vec![
            ("gcn.a0".to_string(), vec![c, c], Base, Adjacency),
            ("gcn.w1".into(), vec![c / self.reduction, c], Base, Uniform(c)),
            ("gcn.w2".into(), vec![c, c / self.reduction], Base, Uniform(c / self.reduction)),
            ("gcn.theta1".into(), vec![self.kernel], Base, Uniform(self.kernel)),
            ("gcn.theta2".into(), vec![self.kernel], Base, Uniform(self.kernel)),
        ];
        for l in 1..=3 {
            bn_pair(&mut out, &format!("gcn.bn{l}"), gw, Base);
        }
        if self.cvf {
            let mut cin = b;
            for l in 1..=3 {
                out.push((format!("cnn.conv{l}.w"), vec![self.filters, cin, 3, 3], Base, Uniform(cin * 9)));
                out.push((format!("cnn.conv{l}.b"), vec![self.filters], Base, Zeros));
                bn_pair(&mut out, &format!("cnn.bn{l}"), self.filters, Base);
                cin = self.filters;
            }
            let d = self.spatial_width();
            out.push(("cnn.align.w".into(), vec![d, fg], Base, Uniform(d)));
            out.push(("cnn.align.b".into(), vec![fg], Base, Zeros));
            for l in 0..self.heads {
                for m in ["q", "k", "v"] {
                    out.push((format!("attn.{m}{l}"), vec![fg, self.head_dim], Meta, Uniform(fg)));
                }
            }
            let cat = self.heads * self.head_dim;
            out.push(("attn.o".into(), vec![cat, fg], Meta, Uniform(cat)));
        }
        let fu = self.fused_width();
        if self.fsa {
            let fb = self.bottleneck;
            out.push(("adapter.down.w".into(), vec![fu, fb], Meta, Uniform(fu)));
            out.push(("adapter.down.b".into(), vec![fb], Meta, Zeros));
            bn_pair(&mut out, "adapter.bn1", fb, Meta);
            out.push(("adapter.up.w".into(), vec![fb, fu], Meta, Zeros));
            out.push(("adapter.up.b".into(), vec![fu], Meta, Zeros));
            bn_pair(&mut out, "adapter.bn2", fu, Meta);
        }
        out.push(("head.w".into(), vec![fu, self.num_classes], Meta, Uniform(fu)));
        out.push(("head.b".into(), vec![self.num_classes], Meta, Zeros));
        out
    }

    /// Batch-norm layer names and widths.
    pub fn bn_layers(&self) -> Vec<(String, usize)> {
        self.layout()
            .into_iter()
            .filter_map(|(name, shape, _, _)| {
                name.strip_suffix(".gamma").map(|l| (l.to_string(), shape[0]))
            })
            .collect()
    }

    /// Freshly initialized parameters and unit running statistics.
    pub fn init(&self, seed: u64) -> Result<(ParamSet<f32>, BnRegistry)> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, shape, part, init) in self.layout() {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Adjacency => (0..n).map(|_| rng.gen::<f32>() * 0.01 + 0.01).collect(),
                Init::Uniform(fan_in) => {
                    let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
                    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
                }
            };
            params.insert(&name, Tensor::new(shape, data)?, part)?;
        }
        let mut bn = BnRegistry::default();
        for (name, width) in self.bn_layers() {
            bn.register(&name, width);
        }
        Ok((params, bn))
    }

    /// Encoder outputs for one batch; only base parameters are involved.
    pub fn encode_views<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &ParamNodes,
        bn: &mut BnContext<'_>,
        x: NodeId,
        s: Option<NodeId>,
    ) -> Result<Views> {
        let zg = dgcn_encode(g, p, bn, x, &self.dgcn())?;
        let zs = if self.cvf {
            let s = s.ok_or_else(|| {
                FaceError::Precondition("fusion is on but no spatial input was given".into())
            })?;
            let zs = conv3_encode(g, p, bn, s)?;
            Some(align_view(g, zs, p.get("cnn.align.w")?, p.get("cnn.align.b")?)?)
        } else {
            None
        };
        Ok(Views { zs, zg })
    }

    /// Fused representation `Z_u`, or `Z_g` when fusion is off.
    pub fn unify<T: Real>(&self, g: &mut Graph<T>, p: &ParamNodes, v: &Views) -> Result<NodeId> {
        match v.zs {
            Some(zs) => {
                let (heads, wo) = attention_nodes(p, self.heads)?;
                fuse(g, zs, v.zg, &heads, wo)
            }
            None => Ok(v.zg),
        }
    }

    /// Adapter (when on) followed by the prediction head.
    pub fn head<T: Real>(&self, g: &mut Graph<T>, p: &ParamNodes, bn: &mut BnContext<'_>, z: NodeId) -> Result<NodeId> {
        if self.fsa {
            let a = adapt(g, p, bn, z)?;
            predict(g, p, a)
        } else {
            classify(g, z, p.get("head.w")?, p.get("head.b")?)
        }
    }

    /// Meta-adapted layers given already-encoded views.
    pub fn meta_forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &ParamNodes,
        bn: &mut BnContext<'_>,
        v: &Views,
    ) -> Result<NodeId> {
        let z = self.unify(g, p, v)?;
        self.head(g, p, bn, z)
    }
}

fn bn_pair(out: &mut Vec<(String, Vec<usize>, Partition, Init)>, name: &str, width: usize, part: Partition) {
    out.push((format!("{name}.gamma"), vec![width], part, Init::Ones));
    out.push((format!("{name}.beta"), vec![width], part, Init::Zeros));
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Zeros,
    Ones,
    /// `U(0,1)·0.01 + 0.01`, strictly positive.
    Adjacency,
    /// `U(-1/√fan_in, 1/√fan_in)`.
    Uniform(usize),
}

/// Encoded views of one batch.
#[derive(Clone, Copy, Debug)]
pub struct Views {
    /// Aligned spatial features `Z̃_s`, absent when fusion is off.
    pub zs: Option<NodeId>,
    pub zg: NodeId,
}

/// Model inputs for a set of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `n×C×B` features.
    pub x: Tensor<f32>,
    /// `n×B×32×32` spatial view, when the model uses it.
    pub s: Option<Tensor<f32>>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Graph constants for the inputs.
    pub fn nodes<T: Real>(&self, g: &mut Graph<T>) -> (NodeId, Option<NodeId>) {
        let x = g.constant(self.x.cast());
        let s = self.s.as_ref().map(|s| g.constant(s.cast()));
        (x, s)
    }
}

/// Parameters, running statistics and input preparation for one network.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet<f32>,
    pub bn: BnRegistry,
    electrodes: ElectrodeMap,
    spatializer: Option<Spatializer>,
}

impl Model {
    pub fn new(config: ModelConfig, electrodes: &ElectrodeMap, seed: u64) -> Result<Self> {
        let (params, bn) = config.init(seed)?;
        Self::from_parts(config, electrodes.clone(), params, bn)
    }

    /// Reassembles a model, checking that parameters and statistics match
    /// the configuration.
    pub fn from_parts(config: ModelConfig, electrodes: ElectrodeMap, params: ParamSet<f32>, bn: BnRegistry) -> Result<Self> {
        config.validate()?;
        if electrodes.len() != config.channels {
            return Err(FaceError::Config(format!(
                "electrode map has {} channels, model expects {}",
                electrodes.len(),
                config.channels
            )));
        }
        let layout = config.layout();
        if layout.len() != params.len() {
            return Err(FaceError::Config(format!(
                "configuration defines {} parameters, {} supplied",
                layout.len(),
                params.len()
            )));
        }
        for (name, shape, part, _) in &layout {
            let t = params.get(name)?;
            if t.shape() != shape.as_slice() || params.partition_of(name)? != *part {
                return Err(FaceError::Config(format!(
                    "parameter `{name}` is {:?}/{:?}, expected {shape:?}/{part:?}",
                    t.shape(),
                    params.partition_of(name)?
                )));
            }
        }
        for (name, width) in config.bn_layers() {
            match bn.get(&name) {
                Some(r) if r.mean.len() == width && r.var.len() == width => {}
                _ => {
                    return Err(FaceError::Config(format!(
                        "missing or mis-sized running statistics for `{name}`"
                    )))
                }
            }
        }
        let spatializer = if config.cvf {
            Some(Spatializer::new(&electrodes, config.bands)?)
        } else {
            None
        };
        Ok(Self {
            config,
            params,
            bn,
            electrodes,
            spatializer,
        })
    }

    pub fn electrodes(&self) -> &ElectrodeMap {
        &self.electrodes
    }

    /// Inputs for the given samples of one subject.
    pub fn batch(&self, fs: &FeatureSet, indices: &[usize]) -> Result<Batch> {
        if fs.channels() != self.config.channels || fs.bands() != self.config.bands {
            return Err(FaceError::Precondition(format!(
                "subject `{}` has {}×{} features, model expects {}×{}",
                fs.subject,
                fs.channels(),
                fs.bands(),
                self.config.channels,
                self.config.bands
            )));
        }
        let (x, labels) = fs.batch(indices)?;
        self.inputs(x, labels)
    }

    /// Inputs from an `n×C×B` tensor, adding the spatial view if needed.
    pub fn inputs(&self, x: Tensor<f32>, labels: Vec<usize>) -> Result<Batch> {
        let s = match &self.spatializer {
            Some(sp) => Some(sp.transform(&x)?),
            None => None,
        };
        Ok(Batch { x, s, labels })
    }

    pub fn meta_names(&self) -> Vec<String> {
        self.params.names_in(Partition::Meta)
    }

    /// Fraction of parameters (by element count) in the meta partition.
    pub fn meta_fraction(&self) -> f64 {
        self.params.count(Some(Partition::Meta)) as f64 / self.params.count(None) as f64
    }

    fn encode_in(&self, batch: &Batch, mode: BnMode, stats: &BnRegistry) -> Result<(EncodedViews, Vec<(String, BatchMoments)>)> {
        let mut g = Graph::<f32>::new();
        let p = self.params.bind(&mut g)?;
        let (x, s) = batch.nodes(&mut g);
        let mut bn = BnContext::new(mode, stats);
        let v = self.config.encode_views(&mut g, &p, &mut bn, x, s)?;
        let views = EncodedViews {
            zs: v.zs.map(|id| g.value(id).clone()),
            zg: g.value(v.zg).clone(),
            labels: batch.labels.clone(),
        };
        Ok((views, bn.observed))
    }

    /// Encoded views as plain tensors, for caching in inference mode.
    pub fn encode(&self, batch: &Batch, mode: BnMode) -> Result<EncodedViews> {
        Ok(self.encode_in(batch, mode, &self.bn)?.0)
    }

    /// Encodes on batch statistics and returns the moments each encoder
    /// batch-norm layer observed.
    pub fn encode_observed(&self, batch: &Batch) -> Result<(EncodedViews, Vec<(String, BatchMoments)>)> {
        self.encode_in(batch, BnMode::Batch, &self.bn)
    }

    /// Encodes with every batch-norm layer fixed to the statistics in `stats`.
    pub fn encode_with(&self, batch: &Batch, stats: &BnRegistry) -> Result<EncodedViews> {
        Ok(self.encode_in(batch, BnMode::Running, stats)?.0)
    }

    fn meta_in(&self, params: &ParamSet<f32>, views: &EncodedViews, mode: BnMode, stats: &BnRegistry) -> Result<(Tensor<f32>, Vec<(String, BatchMoments)>)> {
        let mut g = Graph::<f32>::new();
        let p = params.bind(&mut g)?;
        let v = views.nodes(&mut g);
        let mut bn = BnContext::new(mode, stats);
        let probs = self.config.meta_forward(&mut g, &p, &mut bn, &v)?;
        Ok((g.value(probs).clone(), bn.observed))
    }

    /// Class probabilities from cached views using `params` for the
    /// meta-adapted layers.
    pub fn probs_from_views(&self, params: &ParamSet<f32>, views: &EncodedViews, mode: BnMode) -> Result<Tensor<f32>> {
        Ok(self.meta_in(params, views, mode, &self.bn)?.0)
    }

    /// Like [`Model::probs_from_views`] with the meta layers' batch norms
    /// fixed to the statistics in `stats`.
    pub fn probs_with(&self, params: &ParamSet<f32>, views: &EncodedViews, stats: &BnRegistry) -> Result<Tensor<f32>> {
        Ok(self.meta_in(params, views, BnMode::Running, stats)?.0)
    }

    /// Moments the meta layers' batch norms observe on `views` under `params`.
    pub fn meta_moments(&self, params: &ParamSet<f32>, views: &EncodedViews) -> Result<Vec<(String, BatchMoments)>> {
        Ok(self.meta_in(params, views, BnMode::Batch, &self.bn)?.1)
    }

    /// Class probabilities for a batch, every layer in the same mode.
    pub fn probs(&self, batch: &Batch, mode: BnMode) -> Result<Tensor<f32>> {
        let views = self.encode(batch, mode)?;
        self.probs_from_views(&self.params, &views, mode)
    }
}

/// Encoder outputs held outside any graph.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedViews {
    pub zs: Option<Tensor<f32>>,
    pub zg: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl EncodedViews {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn nodes<T: Real>(&self, g: &mut Graph<T>) -> Views {
        Views {
            zs: self.zs.as_ref().map(|t| g.constant(t.cast())),
            zg: g.constant(self.zg.cast()),
        }
    }

    /// Rows `indices` of every view.
    pub fn select(&self, indices: &[usize]) -> EncodedViews {
        let rows = |t: &Tensor<f32>| {
            let w = t.shape()[1];
            let mut data = Vec::with_capacity(indices.len() * w);
            for &i in indices {
                data.extend_from_slice(&t.data()[i * w..(i + 1) * w]);
            }
            Tensor::new(vec![indices.len(), w], data).expect("selected rows are consistent")
        };
        EncodedViews {
            zs: self.zs.as_ref().map(rows),
            zg: rows(&self.zg),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Index of the largest entry in each row.
pub fn argmax_rows(probs: &Tensor<f32>) -> Vec<usize> {
    let c = probs.shape()[1];
    probs
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(probs: &Tensor<f32>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = argmax_rows(probs)
        .iter()
        .zip(labels)
        .filter(|(a, b)| a == b)
        .count();
    hits as f64 / labels.len() as f64
}
