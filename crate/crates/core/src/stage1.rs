//! Stage 1: a Bayesian encoder-decoder whose dropout layers stay active at
//! test time. Repeated stochastic passes give a coarse mask (their mean)
//! and an uncertainty map (sigmoid of their standard deviation).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, ConvBnRelu, Ctx, ParamStore};
use crate::tensor::Tensor;
use crate::uggc::EdgeStrategy;
use crate::urn::Variant;

/// Architecture and sampling settings shared by both stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    /// `(H, W)`, both divisible by 16.
    pub input_size: (usize, usize),
    /// Channel width of each of the four pyramid levels.
    pub channels: [usize; 4],
    /// Number of stochastic stage-1 passes.
    pub n_s: usize,
    /// UGGC patch size.
    pub n_p: usize,
    pub dropout_rate: f64,
    pub variant: Variant,
    /// Overrides the edge strategy implied by `variant`.
    pub edges: Option<EdgeStrategy>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl NetworkConfig {
    /// Full-size configuration: 256×256 input, channels (64, 256, 512, 1024).
    pub fn full_scale() -> Self {
        Self {
            input_size: (256, 256),
            channels: [64, 256, 512, 1024],
            n_s: 5,
            n_p: 2,
            dropout_rate: 0.5,
            variant: Variant::Full,
            edges: None,
        }
    }

    /// Desk-scale configuration: 64×64 input, channels (16, 32, 64, 128).
    pub fn toy() -> Self {
        Self {
            input_size: (64, 64),
            channels: [16, 32, 64, 128],
            ..Self::full_scale()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return Err(Error::InvalidArgument(format!("input size {h}×{w} must be a positive multiple of 16")));
        }
        if self.channels[0] == 0 || self.channels.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::InvalidArgument(format!(
                "channels {:?} must be strictly increasing",
                self.channels
            )));
        }
        if self.n_s < 2 {
            return Err(Error::InvalidArgument(format!("n_s must be at least 2, got {}", self.n_s)));
        }
        if self.n_p == 0 || (h / 8) % self.n_p != 0 || (w / 8) % self.n_p != 0 {
            return Err(Error::InvalidArgument(format!(
                "patch size {} must divide the level-3 map {}×{}",
                self.n_p,
                h / 8,
                w / 8
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }

    /// Width of the full-resolution decoder unit.
    pub fn top_channels(&self) -> usize {
        (self.channels[0] / 2).max(8)
    }

    /// `(C, H, W)` of pyramid level `k` in `1..=4`.
    pub fn level_shape(&self, k: usize) -> (usize, usize, usize) {
        let s = 1 << k;
        (self.channels[k - 1], self.input_size.0 / s, self.input_size.1 / s)
    }

    pub fn edge_strategy(&self) -> EdgeStrategy {
        self.edges.unwrap_or_else(|| self.variant.edge_strategy())
    }
}

/// One encoder stage: a strided 3×3 block that halves the resolution, then a
/// residual 3×3 block.
pub struct EncoderStage {
    pub down: ConvBnRelu,
    pub res: Conv2d,
    pub res_bn: BatchNorm,
}

impl EncoderStage {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            down: ConvBnRelu::new(store, &format!("{name}.down"), cin, cout, 2, rng),
            res: Conv2d::new(store, &format!("{name}.res.conv"), cout, cout, 3, 1, false, rng),
            res_bn: BatchNorm::new(store, &format!("{name}.res.bn"), cout),
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: Var) -> Var {
        let y = self.down.forward(ctx, x);
        let r = self.res_bn.forward(ctx, self.res.forward(ctx, y));
        ctx.g.relu(ctx.g.add(y, r))
    }
}

/// Four encoder stages with channel widths `channels`.
pub struct Encoder {
    pub stages: Vec<EncoderStage>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, cin: usize, channels: [usize; 4], rng: &mut ChaCha8Rng) -> Self {
        let mut prev = cin;
        let stages = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let s = EncoderStage::new(store, &format!("enc{}", i + 1), prev, c, rng);
                prev = c;
                s
            })
            .collect();
        Self { stages }
    }
}

/// Bilinear 2× upsample, concatenate the skip, two 3×3 blocks.
pub struct DecoderUnit {
    pub a: ConvBnRelu,
    pub b: ConvBnRelu,
}

impl DecoderUnit {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cskip: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            a: ConvBnRelu::new(store, &format!("{name}.a"), cin + cskip, cout, 1, rng),
            b: ConvBnRelu::new(store, &format!("{name}.b"), cout, cout, 1, rng),
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: Var, skip: Var) -> Var {
        let (_, _, h, w) = ctx.g.value(skip).dims4();
        let up = ctx.g.resize_bilinear(x, h, w);
        let cat = ctx.g.concat_channels(&[up, skip]);
        self.b.forward(ctx, self.a.forward(ctx, cat))
    }
}

/// Decoder units from the coarsest level up: `dec3`, `dec2`, `dec1` at the
/// pyramid resolutions and `dec0` at input resolution with the input as skip.
pub struct Decoder {
    pub units: Vec<DecoderUnit>,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, cin: usize, cfg: &NetworkConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.channels;
        let units = vec![
            DecoderUnit::new(store, "dec3", c[3], c[2], c[2], rng),
            DecoderUnit::new(store, "dec2", c[2], c[1], c[1], rng),
            DecoderUnit::new(store, "dec1", c[1], c[0], c[0], rng),
            DecoderUnit::new(store, "dec0", c[0], cin, cfg.top_channels(), rng),
        ];
        Self { units }
    }
}

/// Checks that `x` is `[C, H, W]` with the configured spatial size.
pub(crate) fn check_input(cfg: &NetworkConfig, x: &Tensor, channels: usize) -> Result<()> {
    let (h, w) = cfg.input_size;
    if x.shape() != [channels, h, w] {
        return Err(Error::Shape(format!(
            "expected input [{channels}, {h}, {w}], got {:?}",
            x.shape()
        )));
    }
    Ok(())
}

/// The stage-1 network and its parameters.
pub struct Stage1 {
    pub cfg: NetworkConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub head: Conv2d,
}

impl Stage1 {
    pub fn new(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, 3, cfg.channels, &mut rng);
        let decoder = Decoder::new(&mut store, 3, cfg, &mut rng);
        let head = Conv2d::new(&mut store, "head", cfg.top_channels(), 1, 1, 1, true, &mut rng);
        Ok(Self {
            cfg: cfg.clone(),
            store,
            encoder,
            decoder,
            head,
        })
    }

    /// Encoder features `f_1..f_4`, each followed by its dropout layer.
    pub fn pyramid(&self, ctx: &Ctx, x: Var) -> Vec<Var> {
        let mut feats = Vec::with_capacity(4);
        let mut h = x;
        for stage in &self.encoder.stages {
            h = ctx.dropout(stage.forward(ctx, h), self.cfg.dropout_rate);
            feats.push(h);
        }
        feats
    }

    /// Probability map `[B, 1, H, W]` for a batch `[B, 3, H, W]`.
    pub fn forward(&self, ctx: &Ctx, x: Var) -> Var {
        let f = self.pyramid(ctx, x);
        let skips = [f[2], f[1], f[0], x];
        let mut h = f[3];
        for (unit, &skip) in self.decoder.units.iter().zip(&skips) {
            h = ctx.dropout(unit.forward(ctx, h, skip), self.cfg.dropout_rate);
        }
        ctx.g.sigmoid(self.head.forward(ctx, h))
    }

    /// One pass over a single `[3, H, W]` image. Dropout is active only when
    /// `rng` is given.
    pub fn forward_once(&self, x: &Tensor, rng: Option<ChaCha8Rng>) -> Result<Tensor> {
        check_input(&self.cfg, x, 3)?;
        let g = Graph::inference();
        let mut ctx = Ctx::new(&g, &self.store, false);
        if let Some(rng) = rng {
            ctx = ctx.with_dropout(rng);
        }
        let (h, w) = self.cfg.input_size;
        let xv = g.constant(x.clone().reshape([1, 3, h, w]));
        let p = self.forward(&ctx, xv);
        Ok((*g.value(p)).clone().reshape([h, w]))
    }

    /// `n_s` stochastic passes, pass `i` driven by stream `i` of `seed`.
    pub fn sample_predictions(&self, x: &Tensor, n_s: usize, seed: u64) -> Result<Vec<Tensor>> {
        if n_s < 2 {
            return Err(Error::InvalidArgument(format!("n_s must be at least 2, got {n_s}")));
        }
        (0..n_s).map(|i| self.forward_once(x, Some(sample_rng(seed, i as u64)))).collect()
    }

    /// Coarse mask and uncertainty map for one image.
    pub fn estimate(&self, x: &Tensor, seed: u64) -> Result<(Tensor, Tensor)> {
        summarize(&self.sample_predictions(x, self.cfg.n_s, seed)?)
    }
}

/// Independent dropout stream for sample `i`.
pub fn sample_rng(seed: u64, i: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i);
    rng
}

/// Pixelwise mean and sigmoid of the Bessel-corrected standard deviation.
pub fn summarize(samples: &[Tensor]) -> Result<(Tensor, Tensor)> {
    if samples.len() < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 samples, got {}", samples.len())));
    }
    let shape = samples[0].shape();
    if let Some(s) = samples.iter().find(|s| s.shape() != shape) {
        return Err(Error::Shape(format!("sample shapes differ: {:?} vs {:?}", shape, s.shape())));
    }
    let n = samples.len() as f64;
    let len = samples[0].numel();
    let mut mean = vec![0.0; len];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s.data()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; len];
    for s in samples {
        for ((acc, v), m) in var.iter_mut().zip(s.data()).zip(&mean) {
            *acc += (v - m) * (v - m);
        }
    }
    let unc: Vec<f64> = var.iter().map(|v| crate::autograd::sigmoid((v / (n - 1.0)).sqrt())).collect();
    Ok((Tensor::new(shape.to_vec(), mean), Tensor::new(shape.to_vec(), unc)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::max_rel_error;
    use rand::Rng;

    fn tiny() -> NetworkConfig {
        NetworkConfig {
            input_size: (16, 16),
            channels: [2, 3, 4, 5],
            n_p: 1,
            ..NetworkConfig::toy()
        }
    }

    fn random_image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([3, h, w], |_| rng.gen())
    }

    #[test]
    fn config_validation() {
        assert!(NetworkConfig::full_scale().validate().is_ok());
        assert!(NetworkConfig::toy().validate().is_ok());
        let bad = [
            NetworkConfig {
                input_size: (60, 64),
                ..NetworkConfig::toy()
            },
            NetworkConfig {
                channels: [16, 16, 64, 128],
                ..NetworkConfig::toy()
            },
            NetworkConfig {
                n_s: 1,
                ..NetworkConfig::toy()
            },
            NetworkConfig {
                dropout_rate: 1.0,
                ..NetworkConfig::toy()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn deterministic_pass_is_repeatable_and_bounded() {
        let net = Stage1::new(&tiny(), 1).unwrap();
        let x = random_image(16, 16, 2);
        let a = net.forward_once(&x, None).unwrap();
        assert_eq!(a, net.forward_once(&x, None).unwrap());
        assert_eq!(a.shape(), &[16, 16]);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(matches!(net.forward_once(&random_image(8, 16, 0), None), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_dropout_makes_sampling_deterministic() {
        let cfg = NetworkConfig {
            dropout_rate: 0.0,
            ..tiny()
        };
        let net = Stage1::new(&cfg, 3).unwrap();
        let x = random_image(16, 16, 4);
        let det = net.forward_once(&x, None).unwrap();
        let samples = net.sample_predictions(&x, 5, 9).unwrap();
        assert!(samples.iter().all(|s| *s == det));
    }

    #[test]
    fn sampling_is_seeded() {
        let net = Stage1::new(&tiny(), 5).unwrap();
        let x = random_image(16, 16, 6);
        let a = net.sample_predictions(&x, 5, 11).unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(a, net.sample_predictions(&x, 5, 11).unwrap());
        assert_ne!(a[0], a[1]);
        assert!(net.sample_predictions(&x, 1, 11).is_err());
    }

    #[test]
    fn summarize_hand_values() {
        let (m, u) = summarize(&[Tensor::new([1], vec![0.0]), Tensor::new([1], vec![1.0])]).unwrap();
        assert_eq!(m.data(), &[0.5]);
        assert!((u.data()[0] - 0.669_761).abs() < 1e-5);
        let same = vec![Tensor::full([2, 2], 0.3); 5];
        let (m, u) = summarize(&same).unwrap();
        assert!(m.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
        assert!(u.data().iter().all(|&v| v == 0.5));
        assert!(summarize(&[Tensor::zeros([2]), Tensor::zeros([3])]).is_err());
        assert!(summarize(&[Tensor::zeros([2])]).is_err());
    }

    #[test]
    fn forward_gradient_matches_finite_differences() {
        let net = Stage1::new(&tiny(), 7).unwrap();
        let x = random_image(16, 16, 8).reshape([1, 3, 16, 16]);
        let err = max_rel_error(&[x], &|g, v| {
            let ctx = Ctx::new(g, &net.store, false);
            let p = net.forward(&ctx, v[0]);
            g.sum(g.mul(p, p))
        });
        assert!(err < 1e-3, "{err}");
    }
}
