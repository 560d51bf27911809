//! Discriminative TDNN back-ends: x-vector, ResNet-TDNN, and ECAPA-style
//! classifiers with AAM-softmax training, AdamW, and plateau lr scheduling.

mod layers;
mod loss;
mod optim;

use std::io::Read;
use std::path::Path;

use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::features::FeatureMatrix;
use crate::mat::Mat;

pub use layers::{stats_pool_vec, AttentiveStatsPool, Param, StatsPool};
pub use loss::{aam_loss, cosine_logits, log_softmax};
pub use optim::{AdamW, PlateauScheduler};

pub use layers::Conv1d;
use layers::{BatchNorm1d, BatchNormVec, Linear, Relu, Res2Conv, SeBlock};

#[derive(Debug, Error)]
pub enum NnetError {
    #[error("invalid model dimensions: {0}")]
    InvalidDims(String),
    #[error("training diverged (non-finite loss) in epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("no chunks to score")]
    EmptyChunks,
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: corrupt checkpoint: {detail}")]
    Corrupt { path: String, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Xvector,
    ResnetTdnn,
    Ecapa,
}

impl Arch {
    pub fn as_str(self) -> &'static str {
        match self {
            Arch::Xvector => "xvector",
            Arch::ResnetTdnn => "resnet_tdnn",
            Arch::Ecapa => "ecapa",
        }
    }

    fn tag(self) -> u8 {
        match self {
            Arch::Xvector => 0,
            Arch::ResnetTdnn => 1,
            Arch::Ecapa => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Arch::Xvector),
            1 => Some(Arch::ResnetTdnn),
            2 => Some(Arch::Ecapa),
            _ => None,
        }
    }
}

/// Architecture hyper-parameters. `channels` scales the whole network; the
/// full-size profile uses 512 channels, 192-dim embeddings, scale-8 Res2.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub arch: Arch,
    pub feat_dim: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub n_classes: usize,
    /// width of the last x-vector conv layer feeding the pooling
    pub pre_pool_channels: usize,
    pub res2_scale: usize,
    pub se_bottleneck: usize,
    pub attn_bottleneck: usize,
    /// cosine-logit scale (the AAM `s`), also used at inference
    pub logit_scale: f64,
}

impl ModelSpec {
    pub fn new(arch: Arch, feat_dim: usize, channels: usize, embed_dim: usize, n_classes: usize) -> Self {
        ModelSpec {
            arch,
            feat_dim,
            channels,
            embed_dim,
            n_classes,
            pre_pool_channels: channels * 3,
            res2_scale: 8,
            se_bottleneck: (channels / 4).max(4),
            attn_bottleneck: (channels / 4).max(4),
            logit_scale: 30.0,
        }
    }

    fn validate(&self) -> Result<(), NnetError> {
        if self.feat_dim == 0 || self.channels == 0 || self.embed_dim == 0 || self.n_classes < 2 {
            return Err(NnetError::InvalidDims("zero-sized dimension".into()));
        }
        if self.arch == Arch::Ecapa && self.channels % self.res2_scale != 0 {
            return Err(NnetError::InvalidDims(format!(
                "channels {} not divisible by res2 scale {}",
                self.channels, self.res2_scale
            )));
        }
        Ok(())
    }
}

/// conv -> relu -> batchnorm, with an optional identity skip.
struct TdnnStage {
    conv: Conv1d,
    relu: Relu,
    bn: BatchNorm1d,
    residual: bool,
}

impl TdnnStage {
    fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        dilation: usize,
        residual: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(!residual || c_in == c_out);
        TdnnStage {
            conv: Conv1d::new(c_in, c_out, kernel, dilation, rng),
            relu: Relu::new(),
            bn: BatchNorm1d::new(c_out),
            residual,
        }
    }

    fn forward(&mut self, xs: &[Mat], train: bool) -> Vec<Mat> {
        let y = self.conv.forward(xs, train);
        let y = self.relu.forward(&y, train);
        let mut y = self.bn.forward(&y, train);
        if self.residual {
            for (out, x) in y.iter_mut().zip(xs) {
                for (a, &b) in out.data.iter_mut().zip(&x.data) {
                    *a += b;
                }
            }
        }
        y
    }

    fn backward(&mut self, gys: &[Mat]) -> Vec<Mat> {
        let g = self.bn.backward(gys);
        let g = self.relu.backward(&g);
        let mut dx = self.conv.backward(&g);
        if self.residual {
            for (d, gy) in dx.iter_mut().zip(gys) {
                for (a, &b) in d.data.iter_mut().zip(&gy.data) {
                    *a += b;
                }
            }
        }
        dx
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.conv.weight,
            &mut self.conv.bias,
            &mut self.bn.gamma,
            &mut self.bn.beta,
        ]
    }

    fn buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        vec![&mut self.bn.running_mean, &mut self.bn.running_var]
    }
}

/// ECAPA building block: 1x1 conv, dilated Res2 conv, 1x1 conv, SE gate,
/// all inside an identity residual.
struct SeRes2Block {
    conv_in: Conv1d,
    relu_in: Relu,
    bn_in: BatchNorm1d,
    res2: Res2Conv,
    relu_mid: Relu,
    bn_mid: BatchNorm1d,
    conv_out: Conv1d,
    relu_out: Relu,
    bn_out: BatchNorm1d,
    se: SeBlock,
}

impl SeRes2Block {
    fn new(channels: usize, scale: usize, dilation: usize, se_bottleneck: usize, rng: &mut ChaCha8Rng) -> Self {
        SeRes2Block {
            conv_in: Conv1d::new(channels, channels, 1, 1, rng),
            relu_in: Relu::new(),
            bn_in: BatchNorm1d::new(channels),
            res2: Res2Conv::new(channels, scale, 3, dilation, rng),
            relu_mid: Relu::new(),
            bn_mid: BatchNorm1d::new(channels),
            conv_out: Conv1d::new(channels, channels, 1, 1, rng),
            relu_out: Relu::new(),
            bn_out: BatchNorm1d::new(channels),
            se: SeBlock::new(channels, se_bottleneck, rng),
        }
    }

    fn forward(&mut self, xs: &[Mat], train: bool) -> Vec<Mat> {
        let t = self.conv_in.forward(xs, train);
        let t = self.relu_in.forward(&t, train);
        let t = self.bn_in.forward(&t, train);
        let t = self.res2.forward(&t, train);
        let t = self.relu_mid.forward(&t, train);
        let t = self.bn_mid.forward(&t, train);
        let t = self.conv_out.forward(&t, train);
        let t = self.relu_out.forward(&t, train);
        let t = self.bn_out.forward(&t, train);
        let mut y = self.se.forward(&t, train);
        for (out, x) in y.iter_mut().zip(xs) {
            for (a, &b) in out.data.iter_mut().zip(&x.data) {
                *a += b;
            }
        }
        y
    }

    fn backward(&mut self, gys: &[Mat]) -> Vec<Mat> {
        let g = self.se.backward(gys);
        let g = self.bn_out.backward(&g);
        let g = self.relu_out.backward(&g);
        let g = self.conv_out.backward(&g);
        let g = self.bn_mid.backward(&g);
        let g = self.relu_mid.backward(&g);
        let g = self.res2.backward(&g);
        let g = self.bn_in.backward(&g);
        let g = self.relu_in.backward(&g);
        let mut dx = self.conv_in.backward(&g);
        for (d, gy) in dx.iter_mut().zip(gys) {
            for (a, &b) in d.data.iter_mut().zip(&gy.data) {
                *a += b;
            }
        }
        dx
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![
            &mut self.conv_in.weight,
            &mut self.conv_in.bias,
            &mut self.bn_in.gamma,
            &mut self.bn_in.beta,
        ];
        for conv in &mut self.res2.convs {
            v.push(&mut conv.weight);
            v.push(&mut conv.bias);
        }
        v.push(&mut self.bn_mid.gamma);
        v.push(&mut self.bn_mid.beta);
        v.push(&mut self.conv_out.weight);
        v.push(&mut self.conv_out.bias);
        v.push(&mut self.bn_out.gamma);
        v.push(&mut self.bn_out.beta);
        v.push(&mut self.se.w1);
        v.push(&mut self.se.b1);
        v.push(&mut self.se.w2);
        v.push(&mut self.se.b2);
        v
    }

    fn buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        vec![
            &mut self.bn_in.running_mean,
            &mut self.bn_in.running_var,
            &mut self.bn_mid.running_mean,
            &mut self.bn_mid.running_var,
            &mut self.bn_out.running_mean,
            &mut self.bn_out.running_var,
        ]
    }
}

enum Encoder {
    /// x-vector / ResNet-TDNN: five dilated conv stages.
    Tdnn { stages: Vec<TdnnStage> },
    /// ECAPA: stem + three SE-Res2 blocks with multi-layer aggregation.
    Ecapa {
        stem: TdnnStage,
        blocks: Vec<SeRes2Block>,
    },
}

impl Encoder {
    fn forward(&mut self, xs: &[Mat], train: bool) -> Vec<Mat> {
        match self {
            Encoder::Tdnn { stages } => {
                let mut cur = xs.to_vec();
                for stage in stages {
                    cur = stage.forward(&cur, train);
                }
                cur
            }
            Encoder::Ecapa { stem, blocks } => {
                let x = stem.forward(xs, train);
                let b1 = blocks[0].forward(&x, train);
                let b2 = blocks[1].forward(&b1, train);
                let b3 = blocks[2].forward(&b2, train);
                // MFA: concatenate the three block outputs along channels
                b1.iter()
                    .zip(&b2)
                    .zip(&b3)
                    .map(|((a, b), c)| {
                        let rows = a.rows * 3;
                        let mut m = Mat::zeros(rows, a.cols);
                        m.data[..a.data.len()].copy_from_slice(&a.data);
                        m.data[a.data.len()..2 * a.data.len()].copy_from_slice(&b.data);
                        m.data[2 * a.data.len()..].copy_from_slice(&c.data);
                        m
                    })
                    .collect()
            }
        }
    }

    fn backward(&mut self, gys: &[Mat]) -> Vec<Mat> {
        match self {
            Encoder::Tdnn { stages } => {
                let mut g = gys.to_vec();
                for stage in stages.iter_mut().rev() {
                    g = stage.backward(&g);
                }
                g
            }
            Encoder::Ecapa { stem, blocks } => {
                let c = gys[0].rows / 3;
                let split = |gy: &Mat, part: usize| {
                    let len = c * gy.cols;
                    Mat {
                        rows: c,
                        cols: gy.cols,
                        data: gy.data[part * len..(part + 1) * len].to_vec(),
                    }
                };
                let g1: Vec<Mat> = gys.iter().map(|g| split(g, 0)).collect();
                let g2: Vec<Mat> = gys.iter().map(|g| split(g, 1)).collect();
                let g3: Vec<Mat> = gys.iter().map(|g| split(g, 2)).collect();
                let mut d2 = blocks[2].backward(&g3);
                for (d, g) in d2.iter_mut().zip(&g2) {
                    for (a, &b) in d.data.iter_mut().zip(&g.data) {
                        *a += b;
                    }
                }
                let mut d1 = blocks[1].backward(&d2);
                for (d, g) in d1.iter_mut().zip(&g1) {
                    for (a, &b) in d.data.iter_mut().zip(&g.data) {
                        *a += b;
                    }
                }
                let dstem = blocks[0].backward(&d1);
                stem.backward(&dstem)
            }
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Encoder::Tdnn { stages } => stages.iter_mut().flat_map(TdnnStage::params_mut).collect(),
            Encoder::Ecapa { stem, blocks } => {
                let mut v = stem.params_mut();
                for b in blocks {
                    v.extend(b.params_mut());
                }
                v
            }
        }
    }

    fn buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        match self {
            Encoder::Tdnn { stages } => stages.iter_mut().flat_map(TdnnStage::buffers_mut).collect(),
            Encoder::Ecapa { stem, blocks } => {
                let mut v = stem.buffers_mut();
                for b in blocks {
                    v.extend(b.buffers_mut());
                }
                v
            }
        }
    }
}

enum Pooling {
    Stats(StatsPool),
    Attentive(AttentiveStatsPool),
}

impl Pooling {
    fn forward(&mut self, xs: &[Mat], train: bool) -> Mat {
        match self {
            Pooling::Stats(p) => p.forward(xs, train),
            Pooling::Attentive(p) => p.forward(xs, train),
        }
    }

    fn backward(&mut self, gy: &Mat) -> Vec<Mat> {
        match self {
            Pooling::Stats(p) => p.backward(gy),
            Pooling::Attentive(p) => p.backward(gy),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Pooling::Stats(_) => Vec::new(),
            Pooling::Attentive(p) => vec![&mut p.w1, &mut p.b1, &mut p.w2, &mut p.b2],
        }
    }
}

/// linear -> optional relu -> batchnorm over pooled vectors.
struct DenseStage {
    linear: Linear,
    use_relu: bool,
    relu_mask: Vec<bool>,
    bn: BatchNormVec,
}

impl DenseStage {
    fn new(d_in: usize, d_out: usize, use_relu: bool, rng: &mut ChaCha8Rng) -> Self {
        DenseStage {
            linear: Linear::new(d_in, d_out, rng),
            use_relu,
            relu_mask: Vec::new(),
            bn: BatchNormVec::new(d_out),
        }
    }

    fn forward(&mut self, x: &Mat, train: bool) -> Mat {
        let mut y = self.linear.forward(x, train);
        if self.use_relu {
            if train {
                self.relu_mask = y.data.iter().map(|&v| v > 0.0).collect();
            }
            for v in &mut y.data {
                *v = v.max(0.0);
            }
        }
        self.bn.forward(&y, train)
    }

    fn backward(&mut self, gy: &Mat) -> Mat {
        let mut g = self.bn.backward(gy);
        if self.use_relu {
            for (v, &m) in g.data.iter_mut().zip(&self.relu_mask) {
                if !m {
                    *v = 0.0;
                }
            }
        }
        self.linear.backward(&g)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.linear.weight,
            &mut self.linear.bias,
            &mut self.bn.gamma,
            &mut self.bn.beta,
        ]
    }

    fn buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        vec![&mut self.bn.running_mean, &mut self.bn.running_var]
    }
}

/// A TDNN classifier: encoder, pooling, embedding stages, AAM head.
pub struct TdnnModel {
    pub spec: ModelSpec,
    encoder: Encoder,
    pooling: Pooling,
    dense: Vec<DenseStage>,
    /// n_classes x embed_dim AAM class weights
    pub head: Param,
}

/// Build a model with deterministic seed-driven initialization.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<TdnnModel, NnetError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = spec.channels;
    let (encoder, pooled_dim) = match spec.arch {
        Arch::Xvector | Arch::ResnetTdnn => {
            let residual = spec.arch == Arch::ResnetTdnn;
            let stages = vec![
                TdnnStage::new(spec.feat_dim, c, 5, 1, false, &mut rng),
                TdnnStage::new(c, c, 3, 2, residual, &mut rng),
                TdnnStage::new(c, c, 3, 3, residual, &mut rng),
                TdnnStage::new(c, c, 1, 1, residual, &mut rng),
                TdnnStage::new(c, spec.pre_pool_channels, 1, 1, false, &mut rng),
            ];
            (Encoder::Tdnn { stages }, 2 * spec.pre_pool_channels)
        }
        Arch::Ecapa => {
            let stem = TdnnStage::new(spec.feat_dim, c, 5, 1, false, &mut rng);
            let blocks = vec![
                SeRes2Block::new(c, spec.res2_scale, 2, spec.se_bottleneck, &mut rng),
                SeRes2Block::new(c, spec.res2_scale, 3, spec.se_bottleneck, &mut rng),
                SeRes2Block::new(c, spec.res2_scale, 4, spec.se_bottleneck, &mut rng),
            ];
            (Encoder::Ecapa { stem, blocks }, 2 * 3 * c)
        }
    };
    let pooling = match spec.arch {
        Arch::Ecapa => Pooling::Attentive(AttentiveStatsPool::new(
            pooled_dim / 2,
            spec.attn_bottleneck,
            &mut rng,
        )),
        _ => Pooling::Stats(StatsPool::new()),
    };
    let dense = match spec.arch {
        Arch::Ecapa => vec![DenseStage::new(pooled_dim, spec.embed_dim, false, &mut rng)],
        _ => vec![
            DenseStage::new(pooled_dim, spec.embed_dim, true, &mut rng),
            DenseStage::new(spec.embed_dim, spec.embed_dim, true, &mut rng),
        ],
    };
    let limit = (6.0 / spec.embed_dim as f64).sqrt();
    let head = Param::uniform(spec.n_classes * spec.embed_dim, limit, &mut rng);
    Ok(TdnnModel {
        spec: spec.clone(),
        encoder,
        pooling,
        dense,
        head,
    })
}

impl TdnnModel {
    /// Encoder output before pooling (probe surface for receptive-field
    /// checks and MFA shape audits).
    pub fn frame_features(&mut self, x: &Mat) -> Mat {
        let mut out = self.encoder.forward(std::slice::from_ref(x), false);
        out.remove(0)
    }

    fn embed_batch(&mut self, xs: &[Mat], train: bool) -> Mat {
        let frames = self.encoder.forward(xs, train);
        let pooled = self.pooling.forward(&frames, train);
        let mut cur = pooled;
        for stage in &mut self.dense {
            cur = stage.forward(&cur, train);
        }
        cur
    }

    fn head_mat(&self) -> Mat {
        Mat {
            rows: self.spec.n_classes,
            cols: self.spec.embed_dim,
            data: self.head.w.clone(),
        }
    }

    /// Inference logits (`s * cos`) for one chunk.
    pub fn forward_logits(&mut self, x: &Mat) -> Vec<f64> {
        let emb = self.embed_batch(std::slice::from_ref(x), false);
        cosine_logits(emb.row(0), &self.head_mat(), self.spec.logit_scale)
    }

    /// Mean AAM loss of a batch; `train` selects batch-vs-running BN stats.
    pub fn batch_loss(&mut self, batch: &[(Mat, usize)], margin: f64, train: bool) -> f64 {
        let xs: Vec<Mat> = batch.iter().map(|(m, _)| m.clone()).collect();
        let labels: Vec<usize> = batch.iter().map(|(_, y)| *y).collect();
        let emb = self.embed_batch(&xs, train);
        let (loss, _, _) = aam_loss(&emb, &self.head_mat(), &labels, self.spec.logit_scale, margin);
        loss
    }

    /// Forward + backward over one batch; gradients accumulate into params.
    pub fn batch_loss_and_grad(&mut self, batch: &[(Mat, usize)], margin: f64) -> f64 {
        let xs: Vec<Mat> = batch.iter().map(|(m, _)| m.clone()).collect();
        let labels: Vec<usize> = batch.iter().map(|(_, y)| *y).collect();
        let emb = self.embed_batch(&xs, true);
        let (loss, d_emb, d_w) =
            aam_loss(&emb, &self.head_mat(), &labels, self.spec.logit_scale, margin);
        for (g, d) in self.head.g.iter_mut().zip(&d_w.data) {
            *g += d;
        }
        let mut g = d_emb;
        for stage in self.dense.iter_mut().rev() {
            g = stage.backward(&g);
        }
        let gframes = self.pooling.backward(&g);
        self.encoder.backward(&gframes);
        loss
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.encoder.params_mut();
        v.extend(self.pooling.params_mut());
        for d in &mut self.dense {
            v.extend(d.params_mut());
        }
        v.push(&mut self.head);
        v
    }

    fn buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut v = self.encoder.buffers_mut();
        for d in &mut self.dense {
            v.extend(d.buffers_mut());
        }
        v
    }

    pub fn clear_grads(&mut self) {
        for p in self.params_mut() {
            p.clear_grad();
        }
    }

    pub fn param_count(&mut self) -> usize {
        self.params_mut().iter().map(|p| p.w.len()).sum()
    }
}

/// Weights detached from layer state; cheap to share across scoring
/// workers, each of which instantiates its own model.
#[derive(Debug, Clone)]
pub struct ModelSnapshot {
    pub spec: ModelSpec,
    params: Vec<Vec<f64>>,
    buffers: Vec<Vec<f64>>,
}

impl ModelSnapshot {
    pub fn instantiate(&self) -> TdnnModel {
        let mut model = build_model(&self.spec, 0).expect("spec already validated");
        for (dst, src) in model.params_mut().into_iter().zip(&self.params) {
            dst.w.clone_from(src);
        }
        for (dst, src) in model.buffers_mut().into_iter().zip(&self.buffers) {
            dst.clone_from(src);
        }
        model
    }
}

impl TdnnModel {
    /// Detach the current weights. Visiting parameters needs `&mut`,
    /// hence the receiver.
    pub fn snapshot(&mut self) -> ModelSnapshot {
        let spec = self.spec.clone();
        let params: Vec<Vec<f64>> = self.params_mut().iter().map(|p| p.w.clone()).collect();
        let buffers: Vec<Vec<f64>> = self.buffers_mut().iter().map(|b| (**b).clone()).collect();
        ModelSnapshot {
            spec,
            params,
            buffers,
        }
    }

    /// Copy of the model without layer caches.
    pub fn clone_model(&mut self) -> TdnnModel {
        self.snapshot().instantiate()
    }
}

/// Transpose a frames x dims feature matrix into the channels x time
/// layout the network consumes.
pub fn chunk_to_input(features: &FeatureMatrix) -> Mat {
    let mut m = Mat::zeros(features.dims, features.frames);
    for (t, row) in features.rows().enumerate() {
        for (d, &v) in row.iter().enumerate() {
            *m.at_mut(d, t) = v;
        }
    }
    m
}

/// Training hyper-parameters (full-profile defaults).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub aam_margin: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 2e-5,
            aam_margin: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

/// Epoch log as TSV (epoch, train_loss, val_loss, lr).
pub fn epoch_log_tsv(log: &[EpochStats]) -> String {
    let mut out = String::from("epoch\ttrain_loss\tval_loss\tlr\n");
    for e in log {
        out.push_str(&format!("{}\t{}\t{}\t{}\n", e.epoch, e.train_loss, e.val_loss, e.lr));
    }
    out
}

/// Mini-batch AAM training with AdamW and the plateau schedule.
///
/// Deterministic for a fixed seed: batch order comes from a seeded
/// shuffle and every parallel reduction is fixed-order.
pub fn train(
    model: &mut TdnnModel,
    train_set: &[(Mat, usize)],
    val_set: &[(Mat, usize)],
    cfg: &TrainConfig,
) -> Result<Vec<EpochStats>, NnetError> {
    if cfg.epochs == 0 {
        return Ok(Vec::new());
    }
    if val_set.is_empty() {
        return Err(NnetError::EmptyValidation);
    }
    assert!(!train_set.is_empty(), "empty training set");
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut sched = PlateauScheduler::default();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut lr = cfg.lr;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        opt.lr = lr;
        let mut total_loss = 0.0;
        let mut total_n = 0usize;
        for batch_idx in order.chunks(cfg.batch_size) {
            let batch: Vec<(Mat, usize)> =
                batch_idx.iter().map(|&i| train_set[i].clone()).collect();
            model.clear_grads();
            let loss = model.batch_loss_and_grad(&batch, cfg.aam_margin);
            if !loss.is_finite() {
                return Err(NnetError::Diverged { epoch });
            }
            opt.step(&mut model.params_mut());
            total_loss += loss * batch.len() as f64;
            total_n += batch.len();
        }
        let train_loss = total_loss / total_n as f64;
        let mut val_loss = 0.0;
        for batch in val_set.chunks(cfg.batch_size) {
            val_loss += model.batch_loss(batch, cfg.aam_margin, false) * batch.len() as f64;
        }
        val_loss /= val_set.len() as f64;
        if !val_loss.is_finite() {
            return Err(NnetError::Diverged { epoch });
        }
        log.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            lr,
        });
        lr = cfg.lr * sched.observe(val_loss);
    }
    Ok(log)
}

/// Per-chunk log-softmax over classes, averaged across chunks.
pub fn score_utterance(model: &mut TdnnModel, chunks: &[Mat]) -> Result<Vec<f64>, NnetError> {
    if chunks.is_empty() {
        return Err(NnetError::EmptyChunks);
    }
    let n = model.spec.n_classes;
    let mut acc = vec![0.0f64; n];
    for chunk in chunks {
        let logits = model.forward_logits(chunk);
        for (a, v) in acc.iter_mut().zip(log_softmax(&logits)) {
            *a += v;
        }
    }
    for a in &mut acc {
        *a /= chunks.len() as f64;
    }
    Ok(acc)
}

const CKPT_MAGIC: &[u8; 4] = b"LIDN";
const CKPT_VERSION: u32 = 1;

/// Versioned binary checkpoint: architecture spec + flat parameter and
/// buffer vectors in canonical visit order.
pub fn save_checkpoint(path: &Path, model: &mut TdnnModel) -> Result<(), NnetError> {
    let m = model;
    let spec = m.spec.clone();
    let spec = &spec;
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.push(spec.arch.tag());
    for v in [
        spec.feat_dim,
        spec.channels,
        spec.embed_dim,
        spec.n_classes,
        spec.pre_pool_channels,
        spec.res2_scale,
        spec.se_bottleneck,
        spec.attn_bottleneck,
    ] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&spec.logit_scale.to_le_bytes());
    let params: Vec<f64> = m.params_mut().iter().flat_map(|p| p.w.clone()).collect();
    let buffers: Vec<f64> = m.buffers_mut().iter().flat_map(|b| b.to_vec()).collect();
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in &params {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&(buffers.len() as u64).to_le_bytes());
    for v in &buffers {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| NnetError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<TdnnModel, NnetError> {
    let mut file = std::fs::File::open(path).map_err(|e| NnetError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| NnetError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let corrupt = |detail: &str| NnetError::Corrupt {
        path: path.display().to_string(),
        detail: detail.to_string(),
    };
    if bytes.len() < 57 || &bytes[..4] != CKPT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let arch = Arch::from_tag(bytes[8]).ok_or_else(|| corrupt("unknown architecture"))?;
    let mut u32s = [0usize; 8];
    for (i, v) in u32s.iter_mut().enumerate() {
        let off = 9 + i * 4;
        *v = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    }
    let logit_scale = f64::from_le_bytes(bytes[41..49].try_into().unwrap());
    let spec = ModelSpec {
        arch,
        feat_dim: u32s[0],
        channels: u32s[1],
        embed_dim: u32s[2],
        n_classes: u32s[3],
        pre_pool_channels: u32s[4],
        res2_scale: u32s[5],
        se_bottleneck: u32s[6],
        attn_bottleneck: u32s[7],
        logit_scale,
    };
    let mut model = build_model(&spec, 0)?;
    let n_params = u64::from_le_bytes(bytes[49..57].try_into().unwrap()) as usize;
    let mut off = 57;
    if bytes.len() < off + 8 * n_params + 8 {
        return Err(corrupt("truncated parameters"));
    }
    let mut values = bytes[off..off + 8 * n_params]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    for p in model.params_mut() {
        for w in &mut p.w {
            *w = values.next().ok_or_else(|| corrupt("parameter count mismatch"))?;
        }
    }
    if values.next().is_some() {
        return Err(corrupt("parameter count mismatch"));
    }
    off += 8 * n_params;
    let n_buffers = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()) as usize;
    off += 8;
    if bytes.len() != off + 8 * n_buffers {
        return Err(corrupt("truncated buffers"));
    }
    let mut values = bytes[off..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    for b in model.buffers_mut() {
        for v in b.iter_mut() {
            *v = values.next().ok_or_else(|| corrupt("buffer count mismatch"))?;
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_spec(arch: Arch) -> ModelSpec {
        ModelSpec {
            arch,
            feat_dim: 6,
            channels: 8,
            embed_dim: 10,
            n_classes: 3,
            pre_pool_channels: 12,
            res2_scale: 4,
            se_bottleneck: 4,
            attn_bottleneck: 4,
            logit_scale: 30.0,
        }
    }

    fn rand_batch(
        n: usize,
        feat: usize,
        t: usize,
        classes: usize,
        seed: u64,
    ) -> Vec<(Mat, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let m = Mat {
                    rows: feat,
                    cols: t,
                    data: (0..feat * t).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                };
                (m, i % classes)
            })
            .collect()
    }

    #[test]
    fn same_seed_gives_identical_models() {
        for arch in [Arch::Xvector, Arch::ResnetTdnn, Arch::Ecapa] {
            let mut a = build_model(&tiny_spec(arch), 7).unwrap();
            let mut b = build_model(&tiny_spec(arch), 7).unwrap();
            let pa: Vec<f64> = a.params_mut().iter().flat_map(|p| p.w.clone()).collect();
            let pb: Vec<f64> = b.params_mut().iter().flat_map(|p| p.w.clone()).collect();
            assert_eq!(pa, pb);
        }
    }

    #[test]
    fn xvector_forward_yields_n_logits() {
        let spec = ModelSpec::new(Arch::Xvector, 40, 16, 24, 14);
        let mut model = build_model(&spec, 1).unwrap();
        let x = Mat::zeros(40, 300);
        let logits = model.forward_logits(&x);
        assert_eq!(logits.len(), 14);
    }

    #[test]
    fn forward_is_deterministic() {
        let spec = tiny_spec(Arch::Ecapa);
        let mut model = build_model(&spec, 3).unwrap();
        let batch = rand_batch(1, 6, 30, 3, 11);
        let a = model.forward_logits(&batch[0].0);
        let b = model.forward_logits(&batch[0].0);
        assert_eq!(a, b);
    }

    #[test]
    fn ecapa_mfa_output_is_three_times_block_channels() {
        let spec = tiny_spec(Arch::Ecapa);
        let mut model = build_model(&spec, 2).unwrap();
        let x = Mat::zeros(6, 40);
        let frames = model.frame_features(&x);
        assert_eq!(frames.rows, 3 * spec.channels);
        assert_eq!(frames.cols, 40);
    }

    #[test]
    fn xvector_encoder_receptive_field() {
        // stacked dilated convs: sum (k-1)*d + 1 = 4 + 4 + 6 + 0 + 0 + 1 = 15
        let spec = tiny_spec(Arch::Xvector);
        let mut model = build_model(&spec, 5).unwrap();
        let t_len = 60;
        let base = Mat::zeros(6, t_len);
        let mut probe = base.clone();
        for ch in 0..6 {
            *probe.at_mut(ch, 30) = 1.0;
        }
        let y0 = model.frame_features(&base);
        let y1 = model.frame_features(&probe);
        let mut touched = Vec::new();
        for t in 0..t_len {
            let differs =
                (0..y0.rows).any(|ch| (y0.at(ch, t) - y1.at(ch, t)).abs() > 1e-12);
            if differs {
                touched.push(t);
            }
        }
        let lo = *touched.first().unwrap();
        let hi = *touched.last().unwrap();
        assert_eq!(hi - lo + 1, 15, "receptive field [{lo}, {hi}]");
        assert_eq!(lo, 30 - 7);
        assert_eq!(hi, 30 + 7);
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        for arch in [Arch::Xvector, Arch::ResnetTdnn, Arch::Ecapa] {
            let spec = tiny_spec(arch);
            let mut model = build_model(&spec, 9).unwrap();
            let batch = rand_batch(2, 6, 20, 3, 13);
            model.clear_grads();
            let _ = model.batch_loss_and_grad(&batch, 0.2);
            let grads: Vec<f64> = model.params_mut().iter().flat_map(|p| p.g.clone()).collect();
            let h = 1e-5;
            let mut max_rel: f64 = 0.0;
            let n_params = grads.len();
            let mut flat_idx = 0usize;
            let stride = 3; // probe every third parameter
            for p_idx in 0..model.params_mut().len() {
                let len = model.params_mut()[p_idx].w.len();
                for k in 0..len {
                    if flat_idx % stride == 0 {
                        let orig = model.params_mut()[p_idx].w[k];
                        model.params_mut()[p_idx].w[k] = orig + h;
                        let lp = model.batch_loss(&batch, 0.2, true);
                        model.params_mut()[p_idx].w[k] = orig - h;
                        let lm = model.batch_loss(&batch, 0.2, true);
                        model.params_mut()[p_idx].w[k] = orig;
                        let num = (lp - lm) / (2.0 * h);
                        let ana = grads[flat_idx];
                        // the 1e-3 floor absorbs central-difference noise
                        // on near-zero gradients
                        let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-3);
                        assert!(
                            rel <= 1e-3,
                            "{}: param {flat_idx}/{n_params}: numeric {num} vs analytic {ana} (rel {rel})",
                            arch.as_str()
                        );
                        max_rel = max_rel.max(rel);
                    }
                    flat_idx += 1;
                }
            }
            assert!(max_rel <= 1e-3, "{}: max rel err {max_rel}", arch.as_str());
        }
    }

    #[test]
    fn zero_epochs_leaves_model_unchanged() {
        let spec = tiny_spec(Arch::Xvector);
        let mut model = build_model(&spec, 4).unwrap();
        let before: Vec<f64> = model.params_mut().iter().flat_map(|p| p.w.clone()).collect();
        let log = train(&mut model, &rand_batch(4, 6, 20, 3, 15), &[], &TrainConfig {
            epochs: 0,
            ..Default::default()
        })
        .unwrap();
        assert!(log.is_empty());
        let after: Vec<f64> = model.params_mut().iter().flat_map(|p| p.w.clone()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn separable_toy_overfits_to_full_accuracy() {
        // two classes with opposite channel patterns
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let spec = ModelSpec {
            n_classes: 2,
            ..tiny_spec(Arch::Xvector)
        };
        let mut model = build_model(&spec, 6).unwrap();
        let mut chunks = Vec::new();
        for i in 0..24 {
            let class = i % 2;
            let sign = if class == 0 { 1.0 } else { -1.0 };
            let m = Mat {
                rows: 6,
                cols: 25,
                data: (0..6 * 25)
                    .map(|j| sign * ((j % 6) as f64 * 0.2 - 0.5) + rng.gen_range(-0.05..0.05))
                    .collect(),
            };
            chunks.push((m, class));
        }
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 8,
            seed: 1,
            ..Default::default()
        };
        let log = train(&mut model, &chunks, &chunks, &cfg).unwrap();
        assert_eq!(log.len(), 30);
        let correct = chunks
            .iter()
            .filter(|(m, y)| {
                let logits = model.forward_logits(m);
                let pred = logits
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                pred == *y
            })
            .count();
        assert_eq!(correct, chunks.len(), "train accuracy below 100%");
    }

    #[test]
    fn training_is_deterministic_for_a_seed() {
        let spec = tiny_spec(Arch::Xvector);
        let data = rand_batch(12, 6, 20, 3, 19);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            seed: 5,
            ..Default::default()
        };
        let run = || {
            let mut model = build_model(&spec, 8).unwrap();
            let log = train(&mut model, &data, &data, &cfg).unwrap();
            (log, model.forward_logits(&data[0].0))
        };
        let (log_a, out_a) = run();
        let (log_b, out_b) = run();
        assert_eq!(log_a, log_b);
        assert_eq!(out_a, out_b);
    }

    #[test]
    fn non_finite_loss_aborts_with_the_epoch() {
        // batch norm plus cosine logits keep the loss bounded for any
        // finite weights, so poison the head to force the abort path
        let spec = tiny_spec(Arch::Xvector);
        let mut model = build_model(&spec, 10).unwrap();
        model.head.w[0] = f64::NAN;
        let data = rand_batch(8, 6, 20, 3, 21);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            seed: 2,
            ..Default::default()
        };
        match train(&mut model, &data, &data, &cfg) {
            Err(NnetError::Diverged { epoch }) => assert_eq!(epoch, 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn single_chunk_score_is_its_log_softmax() {
        let spec = tiny_spec(Arch::Ecapa);
        let mut model = build_model(&spec, 11).unwrap();
        let batch = rand_batch(1, 6, 30, 3, 23);
        let want = log_softmax(&model.forward_logits(&batch[0].0));
        let got = score_utterance(&mut model, &[batch[0].0.clone()]).unwrap();
        assert_eq!(got, want);
        // probabilities sum to one
        let total: f64 = got.iter().map(|&v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn chunk_order_does_not_change_the_score() {
        let spec = tiny_spec(Arch::Xvector);
        let mut model = build_model(&spec, 12).unwrap();
        let chunks: Vec<Mat> = rand_batch(3, 6, 25, 3, 25).into_iter().map(|(m, _)| m).collect();
        let mut rev = chunks.clone();
        rev.reverse();
        let a = score_utterance(&mut model, &chunks).unwrap();
        let b = score_utterance(&mut model, &rev).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn two_chunk_score_is_the_mean_of_log_softmax() {
        let spec = tiny_spec(Arch::Xvector);
        let mut model = build_model(&spec, 13).unwrap();
        let chunks: Vec<Mat> = rand_batch(2, 6, 25, 3, 27).into_iter().map(|(m, _)| m).collect();
        let a = log_softmax(&model.forward_logits(&chunks[0]));
        let b = log_softmax(&model.forward_logits(&chunks[1]));
        let got = score_utterance(&mut model, &chunks).unwrap();
        for i in 0..3 {
            assert!(((a[i] + b[i]) / 2.0 - got[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_roundtrip_preserves_logits() {
        let dir = tempfile::tempdir().unwrap();
        for arch in [Arch::Xvector, Arch::ResnetTdnn, Arch::Ecapa] {
            let spec = tiny_spec(arch);
            let mut model = build_model(&spec, 14).unwrap();
            // perturb running stats so buffers are exercised too
            let data = rand_batch(6, 6, 20, 3, 29);
            let _ = model.batch_loss(&data, 0.2, true);
            let path = dir.path().join(format!("{}.ckpt", arch.as_str()));
            save_checkpoint(&path, &mut model).unwrap();
            let mut back = load_checkpoint(&path).unwrap();
            assert_eq!(back.spec, model.spec);
            let x = &data[0].0;
            assert_eq!(model.forward_logits(x), back.forward_logits(x));
        }
    }

    #[test]
    fn invalid_dims_are_rejected() {
        let mut spec = tiny_spec(Arch::Ecapa);
        spec.channels = 10; // not divisible by res2 scale 4
        assert!(matches!(
            build_model(&spec, 0),
            Err(NnetError::InvalidDims(_))
        ));
    }
}
