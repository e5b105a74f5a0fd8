//! Uncertainty-enhanced manipulation attention.
//!
//! A block maps `y_r: [B, C, h, w]` to a map of the same shape in three
//! steps: enhance (add the lifted uncertainty map, then normalize), attend
//! (channel-by-channel attention with projections over the `d = h·w` pixel
//! axis) and refine (residual cascade of depth-wise convolutions).

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{normal, BatchNorm, Conv2d, Ctx, ParamId, ParamStore};
use crate::tensor::Tensor;

/// What a decoder (or encoder) attention slot computes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Enhance, attend, refine.
    Uema,
    /// Attention with queries, keys and values all from `y_r`.
    SelfAttention,
    /// Queries from the lifted uncertainty map, keys and values from `y_r`.
    CrossAttention,
    /// `y_r + DC(BN(ReLU(y_r)))` only.
    DepthwiseConv,
    /// Pass-through.
    Identity,
}

pub struct UemaBlock {
    pub mode: AttentionMode,
    /// Run at half resolution and upsample the result.
    pub halve: bool,
    pub lift: Conv2d,
    pub enhance_bn: BatchNorm,
    /// Projections, present only for the attention modes.
    pub wq: Option<ParamId>,
    pub wk: Option<ParamId>,
    pub wv: Option<ParamId>,
    pub refine_bn: BatchNorm,
    pub dc: [Conv2d; 3],
    /// Pixel count the projections were built for.
    pub d: usize,
}

/// `I + N(0, 1e-2²)`.
fn near_identity(d: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = normal(&[d, d], 1e-2, rng);
    for i in 0..d {
        t.data_mut()[i * d + i] += 1.0;
    }
    t
}

impl UemaBlock {
    /// Block for `c` channels on an `h × w` map. With `halve`, attention
    /// runs on the 2× downsampled map.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c: usize,
        h: usize,
        w: usize,
        halve: bool,
        mode: AttentionMode,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let d = if halve { (h / 2) * (w / 2) } else { h * w };
        let attends = matches!(mode, AttentionMode::Uema | AttentionMode::SelfAttention | AttentionMode::CrossAttention);
        let mut proj = |n: &str| attends.then(|| store.add(format!("{name}.{n}"), near_identity(d, rng), true));
        let (wq, wk, wv) = (proj("wq"), proj("wk"), proj("wv"));
        Self {
            mode,
            halve,
            lift: Conv2d::new(store, &format!("{name}.lift"), 1, c, 1, 1, true, rng),
            enhance_bn: BatchNorm::new(store, &format!("{name}.enhance_bn"), c),
            wq,
            wk,
            wv,
            refine_bn: BatchNorm::new(store, &format!("{name}.refine_bn"), c),
            dc: std::array::from_fn(|i| Conv2d::depthwise(store, &format!("{name}.dc{}", i + 1), c, 3, rng)),
            d,
        }
    }

    /// Lifts `y_u` (`[B, 1, H, W]`) to `[B, C, h, w]`.
    pub fn lifted_uncertainty(&self, ctx: &Ctx, y_r: Var, y_u: Var) -> Result<Var> {
        let (_, _, h, w) = ctx.g.value(y_r).dims4();
        let pooled = pool_to(ctx.g, y_u, h, w)?;
        Ok(self.lift.forward(ctx, pooled))
    }

    /// `BN(y_r + conv1x1(avgpool(y_u)))`.
    pub fn enhance(&self, ctx: &Ctx, y_r: Var, y_u: Var) -> Result<Var> {
        let lifted = self.lifted_uncertainty(ctx, y_r, y_u)?;
        Ok(self.enhance_bn.forward(ctx, ctx.g.add(y_r, lifted)))
    }

    /// `softmax(Q Kᵀ / √d) V` with `Q = q_src · W_Q`, `K = y_r · W_K`,
    /// `V = y_r · W_V` over flattened `[B, C, d]` maps.
    pub fn attend(&self, ctx: &Ctx, q_src: Var, y_r: Var) -> Result<Var> {
        let g = ctx.g;
        let shape = g.shape(y_r);
        let (bs, c, h, w) = g.value(y_r).dims4();
        let d = h * w;
        if g.shape(q_src) != shape {
            return Err(Error::Shape(format!("query source {:?} vs {:?}", g.shape(q_src), shape)));
        }
        if d != self.d {
            return Err(Error::Shape(format!("block built for d = {}, got {h}×{w}", self.d)));
        }
        let (Some(wq), Some(wk), Some(wv)) = (self.wq, self.wk, self.wv) else {
            return Err(Error::InvalidArgument(format!("{:?} block has no projections", self.mode)));
        };
        let flat = |v: Var| g.reshape(v, &[bs, c, d]);
        let q = g.linear(flat(q_src), ctx.param(wq));
        let k = g.linear(flat(y_r), ctx.param(wk));
        let v = g.linear(flat(y_r), ctx.param(wv));
        let s = attention_weights(g, q, k, d);
        Ok(g.reshape(g.bmm(s, v, false), &shape))
    }

    /// `y + DC(BN(ReLU(y)))`.
    pub fn refine(&self, ctx: &Ctx, y: Var) -> Var {
        let mut h = self.refine_bn.forward(ctx, ctx.g.relu(y));
        for conv in &self.dc {
            h = conv.forward(ctx, h);
        }
        ctx.g.add(y, h)
    }

    fn core(&self, ctx: &Ctx, y_r: Var, y_u: Var) -> Result<Var> {
        Ok(match self.mode {
            AttentionMode::Uema => {
                let y_e = self.enhance(ctx, y_r, y_u)?;
                let y_z = self.attend(ctx, y_e, y_r)?;
                self.refine(ctx, y_z)
            }
            AttentionMode::SelfAttention => self.attend(ctx, y_r, y_r)?,
            AttentionMode::CrossAttention => {
                let q = self.lifted_uncertainty(ctx, y_r, y_u)?;
                self.attend(ctx, q, y_r)?
            }
            AttentionMode::DepthwiseConv => self.refine(ctx, y_r),
            AttentionMode::Identity => y_r,
        })
    }

    /// Applies the block; `y_u` is the full-resolution uncertainty
    /// `[B, 1, H, W]`.
    pub fn forward(&self, ctx: &Ctx, y_r: Var, y_u: Var) -> Result<Var> {
        if self.mode == AttentionMode::Identity {
            return Ok(y_r);
        }
        if !self.halve {
            return self.core(ctx, y_r, y_u);
        }
        let (_, _, h, w) = ctx.g.value(y_r).dims4();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!("cannot halve a {h}×{w} map")));
        }
        let small = ctx.g.avg_pool(y_r, 2);
        let out = self.core(ctx, small, y_u)?;
        Ok(ctx.g.resize_bilinear(out, h, w))
    }
}

/// Row-softmax of `Q Kᵀ / √d`, shape `[B, C, C]`.
pub fn attention_weights(g: &Graph, q: Var, k: Var, d: usize) -> Var {
    g.softmax_last(g.scale(g.bmm(q, k, true), 1.0 / (d as f64).sqrt()))
}

/// Average-pools `[B, 1, H, W]` down to `h × w` by an integer factor.
pub fn pool_to(g: &Graph, y_u: Var, h: usize, w: usize) -> Result<Var> {
    let (_, _, hu, wu) = g.value(y_u).dims4();
    if h == 0 || w == 0 || hu % h != 0 || wu % w != 0 || hu / h != wu / w {
        return Err(Error::Shape(format!("cannot pool {hu}×{wu} uncertainty to {h}×{w}")));
    }
    let k = hu / h;
    Ok(if k == 1 { y_u } else { g.avg_pool(y_u, k) })
}
