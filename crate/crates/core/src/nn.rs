//! Parameters, layers, optimizer and checkpoints.

use std::cell::RefCell;
use std::collections::HashMap;
use std::path::Path;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autograd::{Gradients, Graph, NormStats, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone)]
pub struct Param {
    pub name: String,
    pub value: Rc<Tensor>,
    /// Buffers (running statistics) are stored alongside weights but never
    /// receive gradients.
    pub trainable: bool,
}

#[derive(Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            value: Rc::new(value),
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(self.params[id.0].value.shape(), value.shape());
        self.params[id.0].value = Rc::new(value);
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Rc::make_mut(&mut self.params[id.0].value)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// SHA-256 over names, shapes and values of every parameter.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// Copies every parameter of `src` whose name and shape match. Returns
    /// the names that were copied.
    pub fn copy_matching(&mut self, src: &ParamStore) -> Vec<String> {
        let mut copied = Vec::new();
        for p in &mut self.params {
            if let Some(&i) = src.by_name.get(&p.name) {
                if src.params[i].value.shape() == p.value.shape() {
                    p.value = Rc::clone(&src.params[i].value);
                    copied.push(p.name.clone());
                }
            }
        }
        copied
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = self
            .params
            .iter()
            .map(|p| {
                let raw = p.value.data().iter().flat_map(|v| v.to_le_bytes()).collect();
                (p.name.clone(), raw, p.value.shape().to_vec())
            })
            .collect();
        let views = bytes
            .iter()
            .map(|(name, raw, shape)| {
                safetensors::tensor::TensorView::new(safetensors::Dtype::F64, shape.clone(), raw)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let data = safetensors::tensor::serialize(views, &None)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(path, data).map_err(|e| Error::io(path, e))
    }

    /// Loads every parameter by name; all must be present with equal shapes.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let st = safetensors::SafeTensors::deserialize(&data)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        for p in &mut self.params {
            let view = st
                .tensor(&p.name)
                .map_err(|_| Error::Checkpoint(format!("{} lacks `{}`", path.display(), p.name)))?;
            if view.dtype() != safetensors::Dtype::F64 || view.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{}` has shape {:?}, expected {:?}",
                    p.name,
                    view.shape(),
                    p.value.shape()
                )));
            }
            let vals = view
                .data()
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            p.value = Rc::new(Tensor::new(p.value.shape().to_vec(), vals));
        }
        Ok(())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-forward state: the graph, parameter lookup, and layer modes.
pub struct Ctx<'a> {
    pub g: &'a Graph,
    store: &'a ParamStore,
    leaves: RefCell<HashMap<ParamId, Var>>,
    /// Normalize with batch statistics and record running-stat updates.
    pub train: bool,
    dropout_rng: Option<RefCell<ChaCha8Rng>>,
    stat_updates: RefCell<Vec<(ParamId, Tensor)>>,
}

impl<'a> Ctx<'a> {
    pub fn new(g: &'a Graph, store: &'a ParamStore, train: bool) -> Self {
        Self {
            g,
            store,
            leaves: RefCell::new(HashMap::new()),
            train,
            dropout_rng: None,
            stat_updates: RefCell::new(Vec::new()),
        }
    }

    /// Enables stochastic dropout driven by `rng`.
    pub fn with_dropout(mut self, rng: ChaCha8Rng) -> Self {
        self.dropout_rng = Some(RefCell::new(rng));
        self
    }

    pub fn stochastic(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Var {
        if let Some(&v) = self.leaves.borrow().get(&id) {
            return v;
        }
        let p = self.store.get(id);
        let v = if p.trainable {
            self.g.leaf_rc(Rc::clone(&p.value))
        } else {
            self.g.constant_rc(Rc::clone(&p.value))
        };
        self.leaves.borrow_mut().insert(id, v);
        v
    }

    /// Gradients of every trainable parameter touched by this forward.
    pub fn param_grads(&self, grads: &mut Gradients) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self
            .leaves
            .borrow()
            .iter()
            .filter(|(id, _)| self.store.get(**id).trainable)
            .filter_map(|(&id, &v)| grads.take(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| id.0);
        out
    }

    pub fn take_stat_updates(&self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.stat_updates.borrow_mut())
    }

    /// Inverted dropout: identity unless stochastic.
    pub fn dropout(&self, x: Var, rate: f64) -> Var {
        let Some(rng) = &self.dropout_rng else {
            return x;
        };
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let mut rng = rng.borrow_mut();
        let mask = Tensor::from_fn(self.g.shape(x), |_| {
            if rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        self.g.mul_const(x, Rc::new(mask))
    }
}

/// Applies running-statistic updates collected during a training forward.
pub fn apply_stat_updates(store: &mut ParamStore, updates: Vec<(ParamId, Tensor)>) {
    for (id, t) in updates {
        store.set(id, t);
    }
}

pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    normal(shape, std, rng)
}

pub fn normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("valid std");
    Tensor::from_fn(shape.to_vec(), |_| dist.sample(rng))
}

pub fn xavier_uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn([rows, cols], |_| rng.gen_range(-a..a))
}

pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    depthwise: bool,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            he_normal(&[cout, cin, k, k], cin * k * k, rng),
            true,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([cout]), true));
        Self {
            weight,
            bias,
            stride,
            pad: k / 2,
            depthwise: false,
        }
    }

    pub fn depthwise(store: &mut ParamStore, name: &str, c: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), he_normal(&[c, 1, k, k], k * k, rng), true);
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros([c]), true));
        Self {
            weight,
            bias,
            stride: 1,
            pad: k / 2,
            depthwise: true,
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: Var) -> Var {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        if self.depthwise {
            ctx.g.depthwise_conv2d(x, w, b)
        } else {
            ctx.g.conv2d(x, w, b, self.stride, self.pad)
        }
    }
}

pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
    eps: f64,
    momentum: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full([c], 1.0), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([c]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros([c]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::full([c], 1.0), false),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: Var) -> Var {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        if ctx.train {
            let (y, stats) = ctx.g.batch_norm(x, gamma, beta, NormStats::Batch, self.eps);
            let (mean, var) = stats.expect("batch statistics");
            let (n, _, h, w) = ctx.g.value(x).dims4();
            let m = (n * h * w) as f64;
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            let mo = self.momentum;
            let rm = ctx.store.value(self.running_mean);
            let rv = ctx.store.value(self.running_var);
            let new_mean = Tensor::from_fn(rm.shape().to_vec(), |i| (1.0 - mo) * rm.data()[i] + mo * mean[i]);
            let new_var = Tensor::from_fn(rv.shape().to_vec(), |i| {
                (1.0 - mo) * rv.data()[i] + mo * var[i] * unbias
            });
            let mut up = ctx.stat_updates.borrow_mut();
            up.push((self.running_mean, new_mean));
            up.push((self.running_var, new_var));
            y
        } else {
            let rm = ctx.store.value(self.running_mean);
            let rv = ctx.store.value(self.running_var);
            let stats = NormStats::Fixed {
                mean: rm.data(),
                var: rv.data(),
            };
            ctx.g.batch_norm(x, gamma, beta, stats, self.eps).0
        }
    }
}

/// 3×3 convolution → normalization → rectifier.
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, 3, stride, false, rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), cout),
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: Var) -> Var {
        let y = self.conv.forward(ctx, x);
        let y = self.bn.forward(ctx, y);
        ctx.g.relu(y)
    }
}

/// Adam with bias correction.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: HashMap<ParamId, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads {
            assert!(store.get(*id).trainable, "optimizer step on a buffer");
            let (m, v) = self
                .moments
                .entry(*id)
                .or_insert_with(|| (Tensor::zeros(g.shape().to_vec()), Tensor::zeros(g.shape().to_vec())));
            let p = store.value_mut(*id);
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
