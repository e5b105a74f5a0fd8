//! Stage 2 and the assembled two-stage network: a refinement encoder-decoder
//! that takes the image and the stage-1 coarse mask, propagates features
//! along uncertainty-guided graphs in the encoder, and re-weights decoder
//! features with uncertainty-enhanced attention.

use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::data::ImageSample;
use crate::error::{Error, Result};
use crate::nn::{apply_stat_updates, Adam, Conv2d, Ctx, ParamId, ParamStore};
use crate::stage1::{check_input, Decoder, Encoder, NetworkConfig, Stage1};
use crate::tensor::{resize_bilinear, Tensor};
use crate::uema::{AttentionMode, UemaBlock};
use crate::uggc::{fuse, Adjacency, EdgeStrategy, NodeAttention, Uggc};

/// Neighbour count of the feature-space kNN ablation.
pub const KNN_K: usize = 8;

/// Full model and its ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// Stage 1 only; the coarse mask is the output.
    NoRefine,
    /// Feature-space kNN graph in place of the uncertainty-guided one.
    UggcKnn,
    /// Uncertainty-guided edges between every pair of nodes.
    UggcGlobal,
    /// Self-attention over patch nodes in place of graph propagation.
    SelfAttnEncoder,
    /// No decoder attention.
    NoUema,
    SelfAttnDecoder,
    /// Cross-attention with the lifted uncertainty as query.
    CrossAttnDecoder,
    /// Depthwise convolutions only.
    DwconvDecoder,
    /// UEMA in encoder and decoder.
    UemaBoth,
    UemaEncoderOnly,
}

/// Operator that turns level-`k` features into nodes added to level `k+1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderOp {
    Graph,
    SelfAttention,
}

impl Variant {
    pub const ALL: [Variant; 11] = [
        Variant::Full,
        Variant::NoRefine,
        Variant::UggcKnn,
        Variant::UggcGlobal,
        Variant::SelfAttnEncoder,
        Variant::NoUema,
        Variant::SelfAttnDecoder,
        Variant::CrossAttnDecoder,
        Variant::DwconvDecoder,
        Variant::UemaBoth,
        Variant::UemaEncoderOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoRefine => "no_refine",
            Variant::UggcKnn => "uggc_knn",
            Variant::UggcGlobal => "uggc_global",
            Variant::SelfAttnEncoder => "self_attn_encoder",
            Variant::NoUema => "no_uema",
            Variant::SelfAttnDecoder => "self_attn_decoder",
            Variant::CrossAttnDecoder => "cross_attn_decoder",
            Variant::DwconvDecoder => "dwconv_decoder",
            Variant::UemaBoth => "uema_both",
            Variant::UemaEncoderOnly => "uema_encoder_only",
        }
    }

    pub fn edge_strategy(self) -> EdgeStrategy {
        match self {
            Variant::UggcKnn => EdgeStrategy::Knn { k: KNN_K },
            Variant::UggcGlobal => EdgeStrategy::GlobalUgc,
            _ => EdgeStrategy::LocalUgc,
        }
    }

    pub fn encoder_op(self) -> EncoderOp {
        if self == Variant::SelfAttnEncoder {
            EncoderOp::SelfAttention
        } else {
            EncoderOp::Graph
        }
    }

    pub fn decoder_mode(self) -> AttentionMode {
        match self {
            Variant::NoUema | Variant::UemaEncoderOnly => AttentionMode::Identity,
            Variant::SelfAttnDecoder => AttentionMode::SelfAttention,
            Variant::CrossAttnDecoder => AttentionMode::CrossAttention,
            Variant::DwconvDecoder => AttentionMode::DepthwiseConv,
            _ => AttentionMode::Uema,
        }
    }

    pub fn encoder_uema(self) -> bool {
        matches!(self, Variant::UemaBoth | Variant::UemaEncoderOnly)
    }

    pub fn refines(self) -> bool {
        self != Variant::NoRefine
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant `{s}`")))
    }
}

enum GraphOp {
    Uggc(Uggc),
    Attention(NodeAttention),
}

/// Stage-2 encoder: four stages on `concat(x, y_m)`, with graph features of
/// level `k` added to level `k+1`.
pub struct Stage2Encoder {
    pub encoder: Encoder,
    ops: Vec<GraphOp>,
    /// Present only for variants with encoder attention.
    pub uema: Vec<UemaBlock>,
}

impl Stage2Encoder {
    pub fn new(store: &mut ParamStore, cfg: &NetworkConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.channels;
        let encoder = Encoder::new(store, 4, c, rng);
        let variant = cfg.variant;
        let strategy = cfg.edge_strategy();
        let ops = (0..3)
            .map(|k| {
                let name = format!("uggc{}", k + 1);
                match variant.encoder_op() {
                    EncoderOp::Graph => GraphOp::Uggc(Uggc::new(store, &name, c[k], c[k + 1], cfg.n_p, strategy, rng)),
                    EncoderOp::SelfAttention => {
                        GraphOp::Attention(NodeAttention::new(store, &name, c[k], c[k + 1], cfg.n_p, rng))
                    }
                }
            })
            .collect();
        let uema = if variant.encoder_uema() {
            (1..=4)
                .map(|k| {
                    let (ch, h, w) = cfg.level_shape(k);
                    UemaBlock::new(store, &format!("enc_uema{k}"), ch, h, w, k == 1, AttentionMode::Uema, rng)
                })
                .collect()
        } else {
            Vec::new()
        };
        Self { encoder, ops, uema }
    }

    /// Pyramid `f_1..f_4` and, for graph variants, the adjacency of each
    /// graph level. `yu` is the `[B, 1, H, W]` uncertainty; `y_u` the same
    /// maps per item.
    pub fn forward(&self, ctx: &Ctx, x: Var, yu: Var, y_u: &[Tensor]) -> Result<(Vec<Var>, Vec<Adjacency>)> {
        let g = ctx.g;
        let mut feats: Vec<Var> = Vec::with_capacity(4);
        let mut adjacency = Vec::new();
        let mut pending = None;
        let mut h = x;
        for (k, stage) in self.encoder.stages.iter().enumerate() {
            let mut f = stage.forward(ctx, h);
            if let Some((nodes, grid)) = pending.take() {
                f = fuse(g, nodes, grid, f)?;
            }
            if let Some(block) = self.uema.get(k) {
                f = block.forward(ctx, f, yu)?;
            }
            if let Some(op) = self.ops.get(k) {
                pending = Some(match op {
                    GraphOp::Uggc(u) => {
                        let (nodes, grid, adj) = u.forward(ctx, f, y_u)?;
                        adjacency.push(adj);
                        (nodes, grid)
                    }
                    GraphOp::Attention(a) => a.forward(ctx, f)?,
                });
            }
            feats.push(f);
            h = f;
        }
        Ok((feats, adjacency))
    }
}

/// Graph outputs of one stage-2 forward.
pub struct Stage2Out {
    /// `[B, 1, H, W]` refined mask.
    pub y_v: Var,
    /// `[B, 1, H, W]` auxiliary prediction from the second-to-last decoder
    /// level.
    pub y_side: Var,
    pub pyramid: Vec<Var>,
    /// Per graph level, per batch item.
    pub adjacency: Vec<Adjacency>,
}

/// The stage-2 network and its parameters.
pub struct Stage2 {
    pub cfg: NetworkConfig,
    pub store: ParamStore,
    pub encoder: Stage2Encoder,
    pub decoder: Decoder,
    /// After `dec3`, `dec2`, `dec1`.
    pub uema: Vec<UemaBlock>,
    pub head: Conv2d,
    pub side: Conv2d,
}

impl Stage2 {
    pub fn new(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Stage2Encoder::new(&mut store, cfg, &mut rng);
        let decoder = Decoder::new(&mut store, 4, cfg, &mut rng);
        let mode = cfg.variant.decoder_mode();
        let uema = (1..=3)
            .rev()
            .map(|k| {
                let (c, h, w) = cfg.level_shape(k);
                UemaBlock::new(&mut store, &format!("dec_uema{k}"), c, h, w, k == 1, mode, &mut rng)
            })
            .collect();
        let head = Conv2d::new(&mut store, "head", cfg.top_channels(), 1, 1, 1, true, &mut rng);
        let side = Conv2d::new(&mut store, "side", cfg.channels[0], 1, 1, 1, true, &mut rng);
        Ok(Self {
            cfg: cfg.clone(),
            store,
            encoder,
            decoder,
            uema,
            head,
            side,
        })
    }

    /// Forward on `x` = `[B, 4, H, W]` (image and coarse mask) with the
    /// per-item uncertainty maps `y_u`.
    pub fn forward(&self, ctx: &Ctx, x: Var, y_u: &[Tensor]) -> Result<Stage2Out> {
        let g = ctx.g;
        let (bs, _, h, w) = g.value(x).dims4();
        let yu = g.constant(stack_maps(y_u)?);
        if g.shape(yu) != [bs, 1, h, w] {
            return Err(Error::Shape(format!(
                "uncertainty {:?} does not match input {:?}",
                g.shape(yu),
                g.shape(x)
            )));
        }
        let (f, adjacency) = self.encoder.forward(ctx, x, yu, y_u)?;
        let skips = [f[2], f[1], f[0], x];
        let mut d = f[3];
        let mut side_feat = d;
        for (i, (unit, &skip)) in self.decoder.units.iter().zip(&skips).enumerate() {
            d = unit.forward(ctx, d, skip);
            if let Some(block) = self.uema.get(i) {
                d = block.forward(ctx, d, yu)?;
                side_feat = d;
            }
        }
        let y_v = g.sigmoid(self.head.forward(ctx, d));
        let y_side = g.sigmoid(g.resize_bilinear(self.side.forward(ctx, side_feat), h, w));
        Ok(Stage2Out {
            y_v,
            y_side,
            pyramid: f,
            adjacency,
        })
    }

    /// Copies stage-1 weights by name. A convolution whose stage-2 copy has
    /// extra input channels receives the stage-1 kernel in its leading
    /// channels and zeros in the rest. Returns the names initialized.
    pub fn init_from(&mut self, stage1: &ParamStore) -> Vec<String> {
        let targets: Vec<(ParamId, String)> = self.store.iter().map(|(id, p)| (id, p.name.clone())).collect();
        let mut copied = Vec::new();
        for (id, name) in targets {
            let Some(sid) = stage1.id(&name) else { continue };
            let src = stage1.value(sid);
            let dst = self.store.value(id);
            if src.shape() == dst.shape() {
                self.store.set(id, src.clone());
            } else if let (&[o, ci, kh, kw], &[o2, cd, kh2, kw2]) = (src.shape(), dst.shape()) {
                if (o, kh, kw) != (o2, kh2, kw2) || cd < ci {
                    continue;
                }
                let mut t = Tensor::zeros([o, cd, kh, kw]);
                let k = kh * kw;
                for oc in 0..o {
                    let from = &src.data()[oc * ci * k..(oc + 1) * ci * k];
                    t.data_mut()[oc * cd * k..oc * cd * k + ci * k].copy_from_slice(from);
                }
                self.store.set(id, t);
            } else {
                continue;
            }
            copied.push(name);
        }
        copied
    }
}

/// `[B, 1, H, W]` from `B` maps of `[H, W]`.
fn stack_maps(maps: &[Tensor]) -> Result<Tensor> {
    let first = maps.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
    let &[h, w] = first.shape() else {
        return Err(Error::Shape(format!("map must be [H, W], got {:?}", first.shape())));
    };
    if let Some(m) = maps.iter().find(|m| m.shape() != [h, w]) {
        return Err(Error::Shape(format!("map shapes differ: {:?} vs {:?}", first.shape(), m.shape())));
    }
    let data = maps.iter().flat_map(|m| m.data().iter().copied()).collect();
    Ok(Tensor::new([maps.len(), 1, h, w], data))
}

/// `[B, 4, H, W]` from images `[3, H, W]` and coarse masks `[H, W]`.
fn stack_inputs(xs: &[&Tensor], y_m: &[&Tensor]) -> Tensor {
    let (h, w) = (xs[0].shape()[1], xs[0].shape()[2]);
    let mut data = Vec::with_capacity(xs.len() * 4 * h * w);
    for (x, m) in xs.iter().zip(y_m) {
        data.extend_from_slice(x.data());
        data.extend_from_slice(m.data());
    }
    Tensor::new([xs.len(), 4, h, w], data)
}

/// Loss coefficients: `L = bce·BCE + dice·Dice`, and for stage 2
/// `main·L(y_v) + side·L(y_side)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub bce: f64,
    pub dice: f64,
    pub main: f64,
    pub side: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            bce: 0.7,
            dice: 0.3,
            main: 1.0,
            side: 0.35,
        }
    }
}

/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` inside the log.
pub const BCE_CLAMP: f64 = 1e-7;
/// Smoothing term of the Dice ratio.
pub const DICE_EPS: f64 = 1e-6;

/// Weighted BCE + Dice between `p` and `gt` of equal shape; Dice is taken
/// over the whole batch.
pub fn mask_loss(g: &Graph, p: Var, gt: Rc<Tensor>, w: &LossWeights) -> Var {
    let bce = g.bce_mean(p, Rc::clone(&gt), BCE_CLAMP);
    let inter = g.sum(g.mul_const(p, Rc::clone(&gt)));
    let num = g.add_scalar(g.scale(inter, 2.0), DICE_EPS);
    let den = g.add_scalar(g.sum(p), gt.sum() + DICE_EPS);
    let dice = g.add_scalar(g.scale(g.div(num, den), -1.0), 1.0);
    g.add(g.scale(bce, w.bce), g.scale(dice, w.dice))
}

/// Stage-2 objective over both heads.
pub fn stage2_loss(g: &Graph, y_v: Var, y_side: Var, gt: Rc<Tensor>, w: &LossWeights) -> Var {
    let main = mask_loss(g, y_v, Rc::clone(&gt), w);
    let side = mask_loss(g, y_side, gt, w);
    g.add(g.scale(main, w.main), g.scale(side, w.side))
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Stage-1 loss of a coarse mask against the ground truth.
pub fn loss_stage1(y_m: &Tensor, gt: &Tensor, w: &LossWeights) -> Result<f64> {
    check_same(y_m, gt, "prediction vs mask")?;
    let g = Graph::inference();
    let p = g.constant(y_m.clone());
    Ok(g.value(mask_loss(&g, p, Rc::new(gt.clone()), w)).item())
}

/// Stage-2 loss of the refined and side predictions.
pub fn loss_stage2(y_v: &Tensor, y_side: &Tensor, gt: &Tensor, w: &LossWeights) -> Result<f64> {
    check_same(y_v, gt, "prediction vs mask")?;
    check_same(y_side, gt, "side prediction vs mask")?;
    let g = Graph::inference();
    let (v, s) = (g.constant(y_v.clone()), g.constant(y_side.clone()));
    Ok(g.value(stage2_loss(&g, v, s, Rc::new(gt.clone()), w)).item())
}

/// Outputs for one image, each `[H, W]`.
#[derive(Clone, Debug)]
pub struct Inference {
    pub y_m: Tensor,
    pub y_u: Tensor,
    pub y_v: Tensor,
    /// One matrix per graph level; empty when no graph is built.
    pub adjacency: Vec<crate::sparse::SparseMatrix>,
}

/// Both stages and the configuration they share.
pub struct UrnModel {
    pub cfg: NetworkConfig,
    pub stage1: Stage1,
    pub stage2: Stage2,
}

impl UrnModel {
    pub fn new(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            cfg: cfg.clone(),
            stage1: Stage1::new(cfg, seed)?,
            stage2: Stage2::new(cfg, seed.wrapping_add(1))?,
        })
    }

    /// Coarse mask and uncertainty for a `[3, H, W]` image.
    pub fn estimate(&self, x: &Tensor, seed: u64) -> Result<(Tensor, Tensor)> {
        self.stage1.estimate(x, seed)
    }

    /// Refined mask `[H, W]` with the adjacency of each graph level.
    pub fn refine(&self, x: &Tensor, y_m: &Tensor, y_u: &Tensor) -> Result<(Tensor, Vec<crate::sparse::SparseMatrix>)> {
        check_input(&self.cfg, x, 3)?;
        let (h, w) = self.cfg.input_size;
        check_same(y_m, &Tensor::zeros([h, w]), "coarse mask vs input")?;
        check_same(y_u, &Tensor::zeros([h, w]), "uncertainty vs input")?;
        let g = Graph::inference();
        let ctx = Ctx::new(&g, &self.stage2.store, false);
        let xin = g.constant(stack_inputs(&[x], &[y_m]));
        let out = self.stage2.forward(&ctx, xin, std::slice::from_ref(y_u))?;
        let y_v = (*g.value(out.y_v)).clone().reshape([h, w]);
        let adjacency = out.adjacency.into_iter().filter_map(|mut a| a.pop()).collect();
        Ok((y_v, adjacency))
    }

    /// Full inference on an image of the configured size.
    pub fn infer(&self, x: &Tensor, seed: u64) -> Result<Inference> {
        let (y_m, y_u) = self.estimate(x, seed)?;
        let (y_v, adjacency) = if self.cfg.variant.refines() {
            self.refine(x, &y_m, &y_u)?
        } else {
            (y_m.clone(), Vec::new())
        };
        Ok(Inference { y_m, y_u, y_v, adjacency })
    }

    /// Inference on a sample of any size: the image is resampled to the
    /// configured size and the maps back to the sample's. Dropout is seeded
    /// from `seed` and the sample id.
    pub fn infer_sample(&self, sample: &ImageSample, seed: u64) -> Result<Inference> {
        let (x, _) = prepare(sample, &self.cfg);
        let out = self.infer(&x, crate::derive_seed(seed, &sample.id))?;
        let (h, w) = (sample.height(), sample.width());
        let back = |t: Tensor| resize_map(&t, h, w);
        Ok(Inference {
            y_m: back(out.y_m),
            y_u: back(out.y_u),
            y_v: back(out.y_v),
            adjacency: out.adjacency,
        })
    }

    /// Writes `network.json`, `stage1.safetensors` and (for refining
    /// variants) `stage2.safetensors` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_network(dir, &self.cfg)?;
        self.stage1.store.save(&dir.join("stage1.safetensors"))?;
        if self.cfg.variant.refines() {
            self.stage2.store.save(&dir.join("stage2.safetensors"))?;
        }
        Ok(())
    }

    /// Loads a model from `dir`: `network.json` plus, per stage, the first
    /// of `stage{n}.safetensors`, `stage{n}_best.safetensors`,
    /// `stage{n}_last.safetensors` that exists.
    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join("network.json");
        if !cfg_path.exists() {
            return Err(Error::MissingFile(cfg_path));
        }
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let cfg: NetworkConfig = serde_json::from_str(&text)?;
        let mut model = Self::new(&cfg, 0)?;
        model.stage1.store.load(&weights_path(dir, 1)?)?;
        if cfg.variant.refines() {
            model.stage2.store.load(&weights_path(dir, 2)?)?;
        }
        Ok(model)
    }
}

/// First existing weights file of `stage` in `dir`: plain, then best, then last.
pub fn weights_path(dir: &Path, stage: u8) -> Result<PathBuf> {
    let candidates = ["", "_best", "_last"].map(|s| dir.join(format!("stage{stage}{s}.safetensors")));
    candidates
        .iter()
        .find(|p| p.exists())
        .cloned()
        .ok_or_else(|| Error::MissingFile(candidates[0].clone()))
}

fn save_network(dir: &Path, cfg: &NetworkConfig) -> Result<()> {
    let path = dir.join("network.json");
    std::fs::write(&path, serde_json::to_string_pretty(cfg)?).map_err(|e| Error::io(&path, e))
}

/// SHA-256 of the serialized configuration.
pub fn config_hash(cfg: &NetworkConfig) -> String {
    let bytes = serde_json::to_vec(cfg).expect("config serializes");
    crate::nn::hex(&Sha256::digest(bytes))
}

/// Bilinear resample of an `[H, W]` map.
fn resize_map(t: &Tensor, h: usize, w: usize) -> Tensor {
    let (th, tw) = (t.shape()[0], t.shape()[1]);
    if (th, tw) == (h, w) {
        return t.clone();
    }
    Tensor::new([h, w], resize_bilinear(t.data(), 1, th, tw, h, w))
}

/// Image `[3, H, W]` and binary mask `[H, W]` at the configured size.
pub fn prepare(sample: &ImageSample, cfg: &NetworkConfig) -> (Tensor, Tensor) {
    let (h, w) = cfg.input_size;
    let (sh, sw) = (sample.height(), sample.width());
    if (sh, sw) == (h, w) {
        return (sample.image.clone(), sample.mask.clone());
    }
    let x = Tensor::new([3, h, w], resize_bilinear(sample.image.data(), 3, sh, sw, h, w));
    let m = resize_map(&sample.mask, h, w).map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
    (x, m)
}

/// Optimization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 8,
            epochs_stage1: 200,
            epochs_stage2: 200,
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.batch_size == 0 {
            return Err(Error::InvalidArgument(format!(
                "learning rate {} and batch size {} must be positive",
                self.lr, self.batch_size
            )));
        }
        Ok(())
    }
}

/// Loss summary of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: u8,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

/// Sidecar written next to every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: u8,
    pub epoch: usize,
    pub seed: u64,
    pub config_hash: String,
    pub loss: f64,
}

/// Where and how checkpoints are written.
struct Checkpointer<'a> {
    dir: Option<&'a Path>,
    stage: u8,
    seed: u64,
    hash: String,
    best: f64,
}

impl Checkpointer<'_> {
    fn write(&self, store: &ParamStore, tag: &str, epoch: usize, loss: f64) -> Result<()> {
        let Some(dir) = self.dir else { return Ok(()) };
        let base = dir.join(format!("stage{}_{tag}", self.stage));
        store.save(&base.with_extension("safetensors"))?;
        let meta = CheckpointMeta {
            stage: self.stage,
            epoch,
            seed: self.seed,
            config_hash: self.hash.clone(),
            loss,
        };
        let path = base.with_extension("json");
        std::fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))
    }

    fn epoch_end(&mut self, store: &ParamStore, log: &EpochLog) -> Result<()> {
        let score = log.val_loss.unwrap_or(log.train_loss);
        self.write(store, "last", log.epoch, score)?;
        if score < self.best {
            self.best = score;
            self.write(store, "best", log.epoch, score)?;
        }
        Ok(())
    }
}

/// Shuffled mini-batches of `0..n` for one epoch.
fn batches(n: usize, bs: usize, seed: u64, tag: &str) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(crate::derive_seed(seed, tag)));
    idx.chunks(bs).map(<[usize]>::to_vec).collect()
}

struct Prepared {
    x: Vec<Tensor>,
    gt: Vec<Tensor>,
}

impl Prepared {
    fn new(samples: &[ImageSample], cfg: &NetworkConfig) -> Self {
        let (x, gt) = samples.iter().map(|s| prepare(s, cfg)).unzip();
        Self { x, gt }
    }

    fn images(&self, idx: &[usize]) -> Tensor {
        Tensor::stack(&idx.iter().map(|&i| self.x[i].clone()).collect::<Vec<_>>())
    }

    fn masks(&self, idx: &[usize]) -> Rc<Tensor> {
        let m = Tensor::stack(&idx.iter().map(|&i| self.gt[i].clone()).collect::<Vec<_>>());
        let (b, h, w) = (m.shape()[0], m.shape()[1], m.shape()[2]);
        Rc::new(m.reshape([b, 1, h, w]))
    }
}

/// Runs forward, backward and an optimizer step. `forward` returns the loss.
fn step(
    store: &mut ParamStore,
    adam: &mut Adam,
    rng: Option<ChaCha8Rng>,
    epoch: usize,
    batch: usize,
    forward: impl FnOnce(&Ctx) -> Result<Var>,
) -> Result<f64> {
    let g = Graph::new();
    let (loss, grads, stats) = {
        let mut ctx = Ctx::new(&g, store, true);
        if let Some(rng) = rng {
            ctx = ctx.with_dropout(rng);
        }
        let loss = forward(&ctx)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite { epoch, batch });
        }
        let mut grads = g.backward(loss);
        (value, ctx.param_grads(&mut grads), ctx.take_stat_updates())
    };
    if grads.iter().any(|(_, t)| t.data().iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite { epoch, batch });
    }
    adam.step(store, &grads);
    apply_stat_updates(store, stats);
    Ok(loss)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Trains stage 1 with a single stochastic pass per step.
pub fn train_stage1(
    model: &mut UrnModel,
    train: &[ImageSample],
    val: &[ImageSample],
    tc: &TrainConfig,
    seed: u64,
    checkpoint_dir: Option<&Path>,
) -> Result<Vec<EpochLog>> {
    tc.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let cfg = model.cfg.clone();
    let data = Prepared::new(train, &cfg);
    let vdata = Prepared::new(val, &cfg);
    let mut adam = Adam::new(tc.lr);
    let mut ckpt = Checkpointer {
        dir: checkpoint_dir,
        stage: 1,
        seed,
        hash: config_hash(&cfg),
        best: f64::INFINITY,
    };
    let s1 = &mut model.stage1;
    let mut logs = Vec::with_capacity(tc.epochs_stage1);
    for epoch in 0..tc.epochs_stage1 {
        let mut losses = Vec::new();
        for (b, idx) in batches(data.x.len(), tc.batch_size, seed, &format!("s1-{epoch}")).iter().enumerate() {
            let (xs, gts) = (data.images(idx), data.masks(idx));
            let rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(seed, &format!("s1-drop-{epoch}-{b}")));
            // The layers hold parameter ids only, so the store can be
            // borrowed mutably while the network is borrowed shared.
            let mut store = std::mem::take(&mut s1.store);
            let net = &*s1;
            let r = step(&mut store, &mut adam, Some(rng), epoch, b, |ctx| {
                let p = net.forward(ctx, ctx.g.constant(xs));
                Ok(mask_loss(ctx.g, p, gts, &tc.loss))
            });
            s1.store = store;
            losses.push(r?);
        }
        let val_loss = (!val.is_empty()).then(|| {
            let g = Graph::inference();
            let ctx = Ctx::new(&g, &s1.store, false);
            let idx: Vec<usize> = (0..vdata.x.len()).collect();
            let p = s1.forward(&ctx, g.constant(vdata.images(&idx)));
            g.value(mask_loss(&g, p, vdata.masks(&idx), &tc.loss)).item()
        });
        let log = EpochLog {
            stage: 1,
            epoch,
            train_loss: mean(&losses),
            val_loss,
        };
        log::info!("stage 1 epoch {epoch}: loss {:.5} val {:?}", log.train_loss, log.val_loss);
        ckpt.epoch_end(&s1.store, &log)?;
        logs.push(log);
    }
    Ok(logs)
}

/// Trains stage 2 with stage 1 frozen. Stage-1 estimates are computed once
/// per image before the first epoch. A no-op for `no_refine`.
pub fn train_stage2(
    model: &mut UrnModel,
    train: &[ImageSample],
    val: &[ImageSample],
    tc: &TrainConfig,
    seed: u64,
    checkpoint_dir: Option<&Path>,
) -> Result<Vec<EpochLog>> {
    tc.validate()?;
    if !model.cfg.variant.refines() {
        return Ok(Vec::new());
    }
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let cfg = model.cfg.clone();
    let data = Prepared::new(train, &cfg);
    let vdata = Prepared::new(val, &cfg);
    let estimates = |d: &Prepared, samples: &[ImageSample]| -> Result<Vec<(Tensor, Tensor)>> {
        d.x.iter()
            .zip(samples)
            .map(|(x, s)| model.stage1.estimate(x, crate::derive_seed(seed, &s.id)))
            .collect()
    };
    let est = estimates(&data, train)?;
    let vest = estimates(&vdata, val)?;
    let inputs = |d: &Prepared, e: &[(Tensor, Tensor)], idx: &[usize]| {
        let xs: Vec<&Tensor> = idx.iter().map(|&i| &d.x[i]).collect();
        let ms: Vec<&Tensor> = idx.iter().map(|&i| &e[i].0).collect();
        let us: Vec<Tensor> = idx.iter().map(|&i| e[i].1.clone()).collect();
        (stack_inputs(&xs, &ms), us)
    };
    let mut adam = Adam::new(tc.lr);
    let mut ckpt = Checkpointer {
        dir: checkpoint_dir,
        stage: 2,
        seed,
        hash: config_hash(&cfg),
        best: f64::INFINITY,
    };
    let s2 = &mut model.stage2;
    let mut logs = Vec::with_capacity(tc.epochs_stage2);
    for epoch in 0..tc.epochs_stage2 {
        let mut losses = Vec::new();
        for (b, idx) in batches(data.x.len(), tc.batch_size, seed, &format!("s2-{epoch}")).iter().enumerate() {
            let (xs, us) = inputs(&data, &est, idx);
            let gts = data.masks(idx);
            let mut store = std::mem::take(&mut s2.store);
            let net = &*s2;
            let r = step(&mut store, &mut adam, None, epoch, b, |ctx| {
                let out = net.forward(ctx, ctx.g.constant(xs), &us)?;
                Ok(stage2_loss(ctx.g, out.y_v, out.y_side, gts, &tc.loss))
            });
            s2.store = store;
            losses.push(r?);
        }
        let val_loss = if val.is_empty() {
            None
        } else {
            let idx: Vec<usize> = (0..vdata.x.len()).collect();
            let (xs, us) = inputs(&vdata, &vest, &idx);
            let g = Graph::inference();
            let ctx = Ctx::new(&g, &s2.store, false);
            let out = s2.forward(&ctx, g.constant(xs), &us)?;
            Some(g.value(stage2_loss(&g, out.y_v, out.y_side, vdata.masks(&idx), &tc.loss)).item())
        };
        let log = EpochLog {
            stage: 2,
            epoch,
            train_loss: mean(&losses),
            val_loss,
        };
        log::info!("stage 2 epoch {epoch}: loss {:.5} val {:?}", log.train_loss, log.val_loss);
        ckpt.epoch_end(&s2.store, &log)?;
        logs.push(log);
    }
    Ok(logs)
}

/// Losses of a full training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage1: Vec<EpochLog>,
    pub stage2: Vec<EpochLog>,
    /// Stage-1 parameter fingerprint before and after stage-2 training.
    pub stage1_fingerprint: (String, String),
}

/// Trains stage 1, initializes stage 2 from it, then trains stage 2. With
/// a checkpoint directory, `network.json` and per-epoch checkpoints are
/// written there.
pub fn train(
    model: &mut UrnModel,
    train_set: &[ImageSample],
    val: &[ImageSample],
    tc: &TrainConfig,
    seed: u64,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainReport> {
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_network(dir, &model.cfg)?;
    }
    let stage1 = train_stage1(model, train_set, val, tc, seed, checkpoint_dir)?;
    if model.cfg.variant.refines() {
        let copied = model.stage2.init_from(&model.stage1.store);
        log::info!("stage 2 initialized from {} stage-1 tensors", copied.len());
    }
    let before = model.stage1.store.fingerprint();
    let stage2 = train_stage2(model, train_set, val, tc, seed, checkpoint_dir)?;
    let after = model.stage1.store.fingerprint();
    if before != after {
        return Err(Error::Checkpoint("stage-1 weights changed during stage-2 training".into()));
    }
    Ok(TrainReport {
        stage1,
        stage2,
        stage1_fingerprint: (before, after),
    })
}
