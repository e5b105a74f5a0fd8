//! Acceptance suite. Runs every criterion in sequence (timings are part of
//! several criteria, so nothing runs concurrently), prints one PASS/FAIL
//! line per criterion and exits non-zero if any failed.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::rc::Rc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use urn_core::attack::{self, inpaint, DegradationSpec, InpaintMethod, InpaintSpec};
use urn_core::autograd::{Graph, Var};
use urn_core::data::{synth_corpus, Approach};
use urn_core::metrics::{self, ConfusionCounts};
use urn_core::nn::{Ctx, ParamStore};
use urn_core::sparse::SparseMatrix;
use urn_core::stage1::{summarize, NetworkConfig, Stage1};
use urn_core::tensor::Tensor;
use urn_core::uema::{AttentionMode, UemaBlock};
use urn_core::uggc::{build_edges, normalize, propagate, EdgeStrategy, Grid};
use urn_core::urn::{self, loss_stage1, loss_stage2, mask_loss, stage2_loss, LossWeights, Stage2, Stage2Encoder, TrainConfig, UrnModel, Variant};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rand_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

// ---------------------------------------------------------------------------
// Graph oracles
// ---------------------------------------------------------------------------

fn dense_adjacency(u: &[f64], grid: Grid, strategy: EdgeStrategy) -> Vec<f64> {
    let n = u.len();
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let (ri, ci) = ((i / grid.cols) as i64, (i % grid.cols) as i64);
            let (rj, cj) = ((j / grid.cols) as i64, (j % grid.cols) as i64);
            let near = (ri - rj).abs() <= 1 && (ci - cj).abs() <= 1;
            a[i * n + j] = match strategy {
                EdgeStrategy::LocalUgc if near && u[i] > u[j] => u[i] - u[j],
                EdgeStrategy::GlobalUgc if u[i] > u[j] => u[i] - u[j],
                EdgeStrategy::LocalDirectedUnweighted if near && u[j] < u[i] => 1.0,
                EdgeStrategy::LocalUndirectedUnweighted if near => 1.0,
                EdgeStrategy::GlobalDirectedUnweighted if u[j] < u[i] => 1.0,
                _ => 0.0,
            };
        }
    }
    a
}

fn dense_operator(a: &[f64], n: usize) -> Vec<f64> {
    let mut at = a.to_vec();
    for i in 0..n {
        at[i * n + i] += 1.0;
    }
    let deg: Vec<f64> = (0..n).map(|i| at[i * n..(i + 1) * n].iter().sum()).collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = at[i * n + j] / (deg[i].sqrt() * deg[j].sqrt());
        }
    }
    out
}

fn dense_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            for j in 0..n {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

fn graph_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let strategies = [
        EdgeStrategy::LocalUgc,
        EdgeStrategy::GlobalUgc,
        EdgeStrategy::LocalDirectedUnweighted,
        EdgeStrategy::LocalUndirectedUnweighted,
        EdgeStrategy::GlobalDirectedUnweighted,
    ];
    let (mut worst_op, mut worst_prop) = (0.0f64, 0.0f64);
    for case in 0..1000 {
        let grid = Grid {
            rows: rng.gen_range(1..=6),
            cols: rng.gen_range(1..=6),
        };
        let n = grid.len();
        // A coarse lattice of levels makes ties between neighbours common.
        let coarse = rng.gen_bool(0.3);
        let u: Vec<f64> = (0..n)
            .map(|_| if coarse { 0.5 + rng.gen_range(0..5) as f64 * 0.1 } else { rng.gen_range(0.5..1.0) })
            .collect();
        let strategy = strategies[case % strategies.len()];
        let a = build_edges(&u, grid, strategy, None);
        let want = dense_adjacency(&u, grid, strategy);
        ensure(a.to_dense() == want, || format!("case {case}: adjacency differs for {strategy:?} on {grid:?}"))?;

        let op = normalize(&a).to_dense();
        let op_want = dense_operator(&want, n);
        for (x, y) in op.iter().zip(&op_want) {
            worst_op = worst_op.max((x - y).abs());
        }

        // Two batch items share the case's grid but not its uncertainties.
        let u2: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.0)).collect();
        let a2 = build_edges(&u2, grid, strategy, None);
        let ops_dense = [op_want.clone(), dense_operator(&dense_adjacency(&u2, grid, strategy), n)];
        let (c0, c1, c2) = (rng.gen_range(1..=4), rng.gen_range(1..=4), rng.gen_range(1..=4));
        let b0 = rand_tensor(&[2, n, c0], -1.0, 1.0, &mut rng);
        let t = [
            rand_tensor(&[c0, c0], -1.0, 1.0, &mut rng),
            rand_tensor(&[c0, c1], -1.0, 1.0, &mut rng),
            rand_tensor(&[c1, c2], -1.0, 1.0, &mut rng),
        ];
        let g = Graph::inference();
        let ops: Rc<Vec<SparseMatrix>> = Rc::new(vec![normalize(&a), normalize(&a2)]);
        let tv = [g.constant(t[0].clone()), g.constant(t[1].clone()), g.constant(t[2].clone())];
        let out = g.value(propagate(&g, &ops, g.constant(b0.clone()), tv));
        for (b, p) in ops_dense.iter().enumerate() {
            let mut h = b0.data()[b * n * c0..(b + 1) * n * c0].to_vec();
            let mut width = c0;
            for (l, tl) in t.iter().enumerate() {
                let cout = tl.shape()[1];
                let msg = dense_matmul(p, &h, n, n, width);
                h = dense_matmul(&msg, tl.data(), n, width, cout);
                if l < 2 {
                    h.iter_mut().for_each(|v| *v = v.max(0.0));
                }
                width = cout;
            }
            for (x, y) in out.data()[b * n * c2..(b + 1) * n * c2].iter().zip(&h) {
                worst_prop = worst_prop.max((x - y).abs());
            }
        }
    }
    let elapsed = start.elapsed();
    ensure(worst_op <= 1e-9, || format!("operator error {worst_op:.2e} > 1e-9"))?;
    ensure(worst_prop <= 1e-6, || format!("propagation error {worst_prop:.2e} > 1e-6"))?;
    ensure(elapsed < Duration::from_secs(30), || format!("took {elapsed:.1?}"))?;
    Ok(format!(
        "1000 grids, adjacency exact, operator err {worst_op:.1e}, propagation err {worst_prop:.1e}, {elapsed:.1?}"
    ))
}

// ---------------------------------------------------------------------------
// Uncertainty bounds
// ---------------------------------------------------------------------------

fn uncertainty_bounds() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..100 {
        let n = rng.gen_range(2..=8);
        let len = rng.gen_range(1..=64);
        let samples: Vec<Tensor> = (0..n).map(|_| rand_tensor(&[len], 0.0, 1.0, &mut rng)).collect();
        let (_, u) = summarize(&samples).map_err(|e| e.to_string())?;
        for &v in u.data() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    ensure(lo >= 0.5 && hi < 1.0, || format!("range [{lo}, {hi}] leaves [0.5, 1)"))?;
    let same = Tensor::new([3], vec![0.2, 0.7, 1.0]);
    let (_, u) = summarize(&[same.clone(), same.clone(), same]).map_err(|e| e.to_string())?;
    ensure(u.data().iter().all(|&v| v == 0.5), || format!("identical samples gave {:?}", u.data()))?;
    let (_, u) = summarize(&[Tensor::new([1], vec![0.0]), Tensor::new([1], vec![1.0])]).map_err(|e| e.to_string())?;
    let two = u.data()[0];
    ensure((two - 0.66976).abs() <= 1e-4, || format!("(0, 1) pixel gave {two}"))?;
    Ok(format!("100 sets within [{lo:.4}, {hi:.4}], identical = 0.5, (0,1) = {two:.5}"))
}

// ---------------------------------------------------------------------------
// Finite-difference gradients
// ---------------------------------------------------------------------------

const FD_STEP: f64 = 1e-6;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Largest relative error between analytic gradients of the scalar `f` and
/// central differences, over every input entry and every entry of every
/// trainable parameter the forward touches. With `sample`, that many
/// parameter entries are drawn at random instead.
fn fd_check(store: &ParamStore, inputs: &[Tensor], sample: Option<usize>, f: &dyn Fn(&Ctx, &[Var]) -> Var) -> f64 {
    let g = Graph::new();
    let ctx = Ctx::new(&g, store, true);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&ctx, &vars);
    let mut grads = g.backward(out);
    let input_grads: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();
    let param_grads = ctx.param_grads(&mut grads);

    let eval = |s: &ParamStore, xs: &[Tensor]| -> f64 {
        let g = Graph::inference();
        let ctx = Ctx::new(&g, s, true);
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        g.value(f(&ctx, &vars)).item()
    };
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        for i in 0..t.numel() {
            let (mut plus, mut minus) = (inputs.to_vec(), inputs.to_vec());
            plus[k].data_mut()[i] += FD_STEP;
            minus[k].data_mut()[i] -= FD_STEP;
            let num = (eval(store, &plus) - eval(store, &minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(input_grads[k].data()[i], num));
        }
    }
    let mut coords: Vec<(usize, usize)> = param_grads
        .iter()
        .enumerate()
        .flat_map(|(p, (_, t))| (0..t.numel()).map(move |i| (p, i)))
        .collect();
    if let Some(n) = sample {
        let mut rng = ChaCha8Rng::seed_from_u64(coords.len() as u64);
        coords = (0..n.min(coords.len())).map(|_| coords[rng.gen_range(0..coords.len())]).collect();
    }
    for (p, i) in coords {
        let (id, ref grad) = param_grads[p];
        let mut plus = store.clone();
        plus.value_mut(id).data_mut()[i] += FD_STEP;
        let mut minus = store.clone();
        minus.value_mut(id).data_mut()[i] -= FD_STEP;
        let num = (eval(&plus, inputs) - eval(&minus, inputs)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(grad.data()[i], num));
    }
    worst
}

/// Reduces `v` to a scalar with fixed random weights.
fn weighted_sum(g: &Graph, v: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(rand_tensor(&g.shape(v), -1.0, 1.0, &mut rng));
    g.sum(g.mul(v, w))
}

fn tiny_config() -> NetworkConfig {
    NetworkConfig {
        input_size: (16, 16),
        channels: [4, 6, 8, 10],
        n_s: 2,
        ..NetworkConfig::toy()
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    let mut lines = Vec::new();
    let mut record = |name: &str, err: f64| -> Result<(), String> {
        lines.push(format!("{name} {err:.1e}"));
        ensure(err < 1e-3, || format!("{name}: relative error {err:.2e}"))
    };

    // UGGC propagation, inputs and weights.
    let grid = Grid { rows: 3, cols: 4 };
    let ops: Rc<Vec<SparseMatrix>> = Rc::new(
        (0..2)
            .map(|_| {
                let u: Vec<f64> = (0..12).map(|_| rng.gen_range(0.5..1.0)).collect();
                normalize(&build_edges(&u, grid, EdgeStrategy::LocalUgc, None))
            })
            .collect(),
    );
    let inputs = [
        rand_tensor(&[2, 12, 3], -1.0, 1.0, &mut rng),
        rand_tensor(&[3, 3], -1.0, 1.0, &mut rng),
        rand_tensor(&[3, 4], -1.0, 1.0, &mut rng),
        rand_tensor(&[4, 4], -1.0, 1.0, &mut rng),
    ];
    let empty = ParamStore::new();
    record(
        "propagate",
        fd_check(&empty, &inputs, None, &|ctx, v| {
            weighted_sum(ctx.g, propagate(ctx.g, &ops, v[0], [v[1], v[2], v[3]]), 1)
        }),
    )?;

    // UEMA steps, inputs and all block parameters.
    let mut store = ParamStore::new();
    let block = UemaBlock::new(&mut store, "u", 3, 4, 4, false, AttentionMode::Uema, &mut rng);
    let y_r = rand_tensor(&[2, 3, 4, 4], -1.0, 1.0, &mut rng);
    let y_u = rand_tensor(&[2, 1, 8, 8], 0.5, 1.0, &mut rng);
    let q = rand_tensor(&[2, 3, 4, 4], -1.0, 1.0, &mut rng);
    record(
        "uema.enhance",
        fd_check(&store, &[y_r.clone(), y_u], None, &|ctx, v| {
            weighted_sum(ctx.g, block.enhance(ctx, v[0], v[1]).unwrap(), 2)
        }),
    )?;
    record(
        "uema.attend",
        fd_check(&store, &[q, y_r.clone()], None, &|ctx, v| {
            weighted_sum(ctx.g, block.attend(ctx, v[0], v[1]).unwrap(), 3)
        }),
    )?;
    record(
        "uema.refine",
        fd_check(&store, &[y_r], None, &|ctx, v| weighted_sum(ctx.g, block.refine(ctx, v[0]), 4)),
    )?;

    // Losses against the scalar functions, then through tiny networks.
    let w = LossWeights::default();
    let gt = Tensor::from_fn([1, 1, 6, 6], |i| if i % 6 < 3 { 1.0 } else { 0.0 });
    let p = rand_tensor(&[1, 1, 6, 6], 0.05, 0.95, &mut rng);
    let side = rand_tensor(&[1, 1, 6, 6], 0.05, 0.95, &mut rng);
    let gt_rc = Rc::new(gt.clone());
    let analytic = |stage2: bool| {
        let g = Graph::new();
        let (pv, sv) = (g.leaf(p.clone()), g.leaf(side.clone()));
        let l = if stage2 {
            stage2_loss(&g, pv, sv, Rc::clone(&gt_rc), &w)
        } else {
            mask_loss(&g, pv, Rc::clone(&gt_rc), &w)
        };
        let grads = g.backward(l);
        (g.value(l).item(), grads.get(pv).cloned(), grads.get(sv).cloned())
    };
    let (l1, gp1, _) = analytic(false);
    let direct1 = loss_stage1(&p, &gt, &w).map_err(|e| e.to_string())?;
    ensure((l1 - direct1).abs() < 1e-12, || format!("loss_stage1 {direct1} vs graph {l1}"))?;
    let mut err1: f64 = 0.0;
    for i in 0..p.numel() {
        let (mut a, mut b) = (p.clone(), p.clone());
        a.data_mut()[i] += FD_STEP;
        b.data_mut()[i] -= FD_STEP;
        let num = (loss_stage1(&a, &gt, &w).unwrap() - loss_stage1(&b, &gt, &w).unwrap()) / (2.0 * FD_STEP);
        err1 = err1.max(rel_err(gp1.as_ref().unwrap().data()[i], num));
    }
    record("loss_stage1", err1)?;
    let (l2, gp2, gs2) = analytic(true);
    let direct2 = loss_stage2(&p, &side, &gt, &w).map_err(|e| e.to_string())?;
    ensure((l2 - direct2).abs() < 1e-12, || format!("loss_stage2 {direct2} vs graph {l2}"))?;
    let mut err2: f64 = 0.0;
    for i in 0..p.numel() {
        for (which, grad) in [(0, &gp2), (1, &gs2)] {
            let (mut a, mut b) = ([p.clone(), side.clone()], [p.clone(), side.clone()]);
            a[which].data_mut()[i] += FD_STEP;
            b[which].data_mut()[i] -= FD_STEP;
            let num = (loss_stage2(&a[0], &a[1], &gt, &w).unwrap() - loss_stage2(&b[0], &b[1], &gt, &w).unwrap())
                / (2.0 * FD_STEP);
            err2 = err2.max(rel_err(grad.as_ref().unwrap().data()[i], num));
        }
    }
    record("loss_stage2", err2)?;

    let cfg = tiny_config();
    let x = rand_tensor(&[2, 3, 16, 16], 0.0, 1.0, &mut rng);
    let mask = Rc::new(Tensor::from_fn([2, 1, 16, 16], |i| if (i % 16) < 7 { 1.0 } else { 0.0 }));
    let s1 = Stage1::new(&cfg, 5).map_err(|e| e.to_string())?;
    record(
        "loss_stage1(params)",
        fd_check(&s1.store, std::slice::from_ref(&x), Some(40), &|ctx, v| {
            mask_loss(ctx.g, s1.forward(ctx, v[0]), Rc::clone(&mask), &w)
        }),
    )?;
    let s2 = Stage2::new(&cfg, 6).map_err(|e| e.to_string())?;
    let y_m = rand_tensor(&[2, 1, 16, 16], 0.0, 1.0, &mut rng);
    let y_u: Vec<Tensor> = (0..2).map(|_| rand_tensor(&[16, 16], 0.5, 1.0, &mut rng)).collect();
    let x2 = Tensor::from_fn([2, 4, 16, 16], |i| {
        let (b, c, p) = (i / 1024, (i / 256) % 4, i % 256);
        if c < 3 {
            x.data()[(b * 3 + c) * 256 + p]
        } else {
            y_m.data()[b * 256 + p]
        }
    });
    record(
        "loss_stage2(params)",
        fd_check(&s2.store, &[x2], Some(40), &|ctx, v| {
            let out = s2.forward(ctx, v[0], &y_u).unwrap();
            stage2_loss(ctx.g, out.y_v, out.y_side, Rc::clone(&mask), &w)
        }),
    )?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(120), || format!("took {elapsed:.1?}"))?;
    Ok(format!("{}, {elapsed:.1?}", lines.join(", ")))
}

// ---------------------------------------------------------------------------
// Metric oracles
// ---------------------------------------------------------------------------

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(400);
    let mut worst_auc: f64 = 0.0;
    for case in 0..500 {
        let len = rng.gen_range(1..=200);
        let quantized = rng.gen_bool(0.3);
        let score = |rng: &mut ChaCha8Rng| {
            if quantized {
                rng.gen_range(0..=10) as f64 / 10.0
            } else {
                rng.gen_range(0.0..1.0)
            }
        };
        let pred: Vec<f64> = (0..len).map(|_| score(&mut rng)).collect();
        let gt: Vec<f64> = (0..len).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
        let (mut tp, mut tn, mut fp, mut fn_) = (0u64, 0u64, 0u64, 0u64);
        for i in 0..len {
            match (pred[i] >= 0.5, gt[i] == 1.0) {
                (true, true) => tp += 1,
                (false, false) => tn += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
            }
        }
        let c = metrics::confusion(&Tensor::new([len], pred.clone()), &Tensor::new([len], gt.clone()), 0.5)
            .map_err(|e| e.to_string())?;
        ensure(c == ConfusionCounts::new(tp, tn, fp, fn_), || format!("case {case}: confusion {c:?}"))?;
        let f1_want = if 2 * tp + fp + fn_ == 0 { 0.0 } else { (2 * tp) as f64 / (2 * tp + fp + fn_) as f64 };
        ensure(metrics::f1(&c) == f1_want, || format!("case {case}: F1 {} vs {f1_want}", metrics::f1(&c)))?;
        let marg = [tp + fp, tp + fn_, tn + fp, tn + fn_];
        let mcc_want = if marg.contains(&0) {
            0.0
        } else {
            let prod = marg.iter().map(|&m| m as u128).product::<u128>();
            ((tp * tn) as i128 - (fp * fn_) as i128) as f64 / (prod as f64).sqrt()
        };
        let mcc = metrics::mcc(&c);
        ensure(mcc == mcc_want, || format!("case {case}: MCC {mcc} vs {mcc_want}"))?;

        let labels: Vec<bool> = gt.iter().map(|&g| g == 1.0).collect();
        let correct = (0..len).filter(|&i| (pred[i] >= 0.5) == labels[i]).count();
        let acc = metrics::accuracy(&pred, &labels, 0.5).map_err(|e| e.to_string())?;
        ensure(acc == correct as f64 / len as f64, || format!("case {case}: accuracy {acc}"))?;

        let (mut pairs, mut wins) = (0usize, 0.0);
        for i in (0..len).filter(|&i| labels[i]) {
            for j in (0..len).filter(|&j| !labels[j]) {
                pairs += 1;
                wins += if pred[i] > pred[j] {
                    1.0
                } else if pred[i] == pred[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
        match metrics::auc(&pred, &labels) {
            Ok(a) => worst_auc = worst_auc.max((a - wins / pairs as f64).abs()),
            Err(urn_core::Error::SingleClass) => ensure(pairs == 0, || format!("case {case}: spurious single-class error"))?,
            Err(e) => return Err(e.to_string()),
        }
    }
    ensure(worst_auc <= 1e-9, || format!("AUC error {worst_auc:.2e}"))?;
    let m = metrics::mcc(&ConfusionCounts::new(1, 1, 1, 1));
    ensure(m == 0.0, || format!("MCC(1,1,1,1) = {m}"))?;
    let f = metrics::f1(&ConfusionCounts::new(2, 7, 1, 1));
    ensure((f - 0.6667).abs() <= 1e-4, || format!("F1(2,·,1,1) = {f}"))?;
    Ok(format!("500 cases exact, AUC err {worst_auc:.1e}, MCC(1,1,1,1) = {m}, F1(2,·,1,1) = {f:.4}"))
}

// ---------------------------------------------------------------------------
// Shapes
// ---------------------------------------------------------------------------

fn full_scale_shapes() -> Outcome {
    let cfg = NetworkConfig::full_scale();
    let want = [(128, 128, 64), (64, 64, 256), (32, 32, 512), (16, 16, 1024)];
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let x = rand_tensor(&[1, 3, 256, 256], 0.0, 1.0, &mut rng);
    let stage1 = Stage1::new(&cfg, 1).map_err(|e| e.to_string())?;
    let g = Graph::inference();
    let ctx = Ctx::new(&g, &stage1.store, false);
    let got: Vec<Vec<usize>> = stage1.pyramid(&ctx, g.constant(x.clone())).iter().map(|&v| g.shape(v)).collect();
    let as_hwc = |s: &Vec<usize>| (s[2], s[3], s[1]);
    ensure(got.iter().map(as_hwc).eq(want), || format!("stage-1 pyramid {got:?}"))?;
    drop(stage1);

    // The refinement encoder sees the image plus the coarse mask and adds
    // graph-propagated nodes at every level; its pyramid must agree.
    let mut store = ParamStore::new();
    let enc = Stage2Encoder::new(&mut store, &cfg, &mut rng);
    let g = Graph::inference();
    let ctx = Ctx::new(&g, &store, false);
    let y_u = rand_tensor(&[256, 256], 0.5, 1.0, &mut rng);
    let xin = Tensor::from_fn([1, 4, 256, 256], |i| if i < 3 * 65536 { x.data()[i] } else { 0.5 });
    let yu = g.constant(y_u.clone().reshape([1, 1, 256, 256]));
    let (feats, _) = enc.forward(&ctx, g.constant(xin), yu, &[y_u]).map_err(|e| e.to_string())?;
    let got2: Vec<Vec<usize>> = feats.iter().map(|&v| g.shape(v)).collect();
    ensure(got2.iter().map(as_hwc).eq(want), || format!("stage-2 pyramid {got2:?}"))?;
    Ok("(128,128,64) (64,64,256) (32,32,512) (16,16,1024) in both encoders".into())
}

// ---------------------------------------------------------------------------
// Overfit
// ---------------------------------------------------------------------------

const OVERFIT_EPOCHS: usize = 150;

fn overfit() -> Outcome {
    let start = Instant::now();
    let approaches = [Approach::Vertical, Approach::Horizontal, Approach::Free, Approach::Free];
    let data = synth_corpus(&approaches, 4, 0, (64, 64), 3, 11).map_err(|e| e.to_string())?;
    ensure(data.len() == 16, || format!("{} splices", data.len()))?;
    let cfg = NetworkConfig::toy();
    let tc = TrainConfig {
        lr: 1e-3,
        batch_size: 4,
        epochs_stage1: OVERFIT_EPOCHS,
        epochs_stage2: OVERFIT_EPOCHS,
        ..TrainConfig::default()
    };
    let seed = 5;
    let mut full = UrnModel::new(&cfg, 1).map_err(|e| e.to_string())?;
    let report = urn::train(&mut full, &data, &[], &tc, seed, None).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();

    // Stage-1 training does not depend on the variant, so the no_refine
    // model under the same budget has exactly these stage-1 weights.
    let mut plain = UrnModel::new(&NetworkConfig { variant: Variant::NoRefine, ..cfg }, 1).map_err(|e| e.to_string())?;
    plain.stage1.store = full.stage1.store.clone();
    let f_full = metrics::evaluate(&full, &data, seed, "none").map_err(|e| e.to_string())?.f1;
    let f_plain = metrics::evaluate(&plain, &data, seed, "none").map_err(|e| e.to_string())?.f1;
    let epochs = report.stage1.len() + report.stage2.len();
    let summary = format!("F1 full {f_full:.4}, no_refine {f_plain:.4}, {epochs} epochs, {elapsed:.0?}");
    ensure(f_full >= 0.9, || format!("full F1 below 0.9: {summary}"))?;
    ensure(f_plain < f_full, || format!("no_refine not below full: {summary}"))?;
    ensure(epochs <= 300, || summary.clone())?;
    ensure(elapsed < Duration::from_secs(600), || format!("over 10 min: {summary}"))?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// Attacks
// ---------------------------------------------------------------------------

/// Domain pixels of `out` must lie within the range of `src` on the domain's
/// 4-connected boundary.
fn within_boundary(src: &[f64], out: &[f64], domain: &[bool], h: usize, w: usize) -> Result<(), String> {
    let ring = inpaint::boundary(domain, h, w);
    if ring.is_empty() {
        return Ok(());
    }
    let lo = ring.iter().map(|&p| src[p]).fold(f64::INFINITY, f64::min);
    let hi = ring.iter().map(|&p| src[p]).fold(f64::NEG_INFINITY, f64::max);
    for p in (0..h * w).filter(|&p| domain[p]) {
        ensure(out[p] >= lo - 1e-12 && out[p] <= hi + 1e-12, || {
            format!("pixel {p} = {} outside boundary range [{lo}, {hi}]", out[p])
        })?;
    }
    Ok(())
}

fn attack_invariants() -> Outcome {
    let mut worst_kernel: f64 = 0.0;
    for k in (3..=31).step_by(2) {
        worst_kernel = worst_kernel.max((attack::gaussian_kernel_2d(k).iter().sum::<f64>() - 1.0).abs());
    }
    ensure(worst_kernel <= 1e-9, || format!("kernel sum off by {worst_kernel:.2e}"))?;

    let corpus = synth_corpus(&Approach::ALL, 3, 5, (64, 64), 3, 21).map_err(|e| e.to_string())?;
    for s in &corpus {
        let a = attack::degrade(s, &DegradationSpec::noise(10.0, 42)).map_err(|e| e.to_string())?;
        let b = attack::degrade(s, &DegradationSpec::noise(10.0, 42)).map_err(|e| e.to_string())?;
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        ensure(bits(&a.image) == bits(&b.image), || format!("{}: noise not reproducible", s.id))?;
        let c = attack::degrade(s, &DegradationSpec::noise(10.0, 43)).map_err(|e| e.to_string())?;
        ensure(c.image != a.image, || format!("{}: seed has no effect", s.id))?;
    }

    // Navier-Stokes fills: the seam case, random planes and domains, and
    // every splice of the corpus through the attack pipeline.
    let (h, w) = (32, 32);
    let seam: Vec<bool> = (0..h * w).map(|p| (14..18).contains(&(p % w))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(700);
    let mut cases = 0;
    let mut telea_cases = 0;
    for case in 0..200 {
        let (h, w, domain) = if case == 0 {
            (h, w, seam.clone())
        } else {
            let (h, w) = (rng.gen_range(8..=40), rng.gen_range(8..=40));
            let mut d = vec![false; h * w];
            for _ in 0..rng.gen_range(1..=3) {
                let (y0, x0) = (rng.gen_range(0..h), rng.gen_range(0..w));
                let (y1, x1) = ((y0 + rng.gen_range(1..=h / 2)).min(h), (x0 + rng.gen_range(1..=w / 2)).min(w));
                for y in y0..y1 {
                    for x in x0..x1 {
                        d[y * w + x] = true;
                    }
                }
            }
            (h, w, d)
        };
        if domain.iter().all(|&d| d) {
            continue;
        }
        let src: Vec<f64> = (0..h * w)
            .map(|p| {
                let (y, x) = ((p / w) as f64, (p % w) as f64);
                (0.5 + 0.3 * (0.3 * x).sin() * (0.2 * y).cos() + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0)
            })
            .collect();
        let mut out = src.clone();
        inpaint::navier_stokes(&mut out, &domain, h, w, 30);
        within_boundary(&src, &out, &domain, h, w).map_err(|e| format!("navier-stokes case {case}: {e}"))?;
        cases += 1;
        // Fast marching is bounded by the range of all known pixels.
        let mut out = src.clone();
        inpaint::telea(&mut out, &domain, h, w, 3);
        let known = (0..h * w).filter(|&p| !domain[p]).map(|p| src[p]);
        let (lo, hi) = known.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), v| (l.min(v), u.max(v)));
        ensure(out.iter().all(|&v| v >= lo && v <= hi), || format!("telea case {case} leaves the known range"))?;
        telea_cases += 1;
    }
    let spec = InpaintSpec {
        method: InpaintMethod::NavierStokes,
        radius: 3,
        external_dir: None,
    };
    for s in corpus.iter().filter(|s| s.label.is_spliced()) {
        let out = attack::inpaint_spliced(s, &spec).map_err(|e| e.to_string())?;
        let (h, w) = (s.height(), s.width());
        let domain = attack::dilate(&s.mask, attack::INPAINT_DILATION);
        for c in 0..3 {
            let plane = |t: &Tensor| t.data()[c * h * w..(c + 1) * h * w].to_vec();
            within_boundary(&plane(&s.image), &plane(&out.image), &domain, h, w).map_err(|e| format!("{}: {e}", s.id))?;
        }
        cases += 1;
    }

    let mut worst_psnr = f64::INFINITY;
    for s in &corpus {
        let j = attack::jpeg_roundtrip(&s.image, 100).map_err(|e| e.to_string())?;
        worst_psnr = worst_psnr.min(attack::psnr(&s.image, &j));
    }
    ensure(worst_psnr > 35.0, || format!("JPEG q=100 PSNR {worst_psnr:.2} dB"))?;
    Ok(format!(
        "kernel err {worst_kernel:.1e}, noise bitwise on {} images, {cases} inpaint cases bounded (+{telea_cases} telea), min q100 PSNR {worst_psnr:.1} dB",
        corpus.len()
    ))
}

// ---------------------------------------------------------------------------
// Determinism
// ---------------------------------------------------------------------------

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_urn")).args(args).output().map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("urn {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr))
    })
}

/// Generates data, trains both stages briefly and evaluates, all through
/// the command line, inside `dir`.
fn end_to_end(dir: &Path) -> Result<(), String> {
    let cfg = serde_json::json!({
        "dataset_roots": [dir.join("data")],
        "out_dir": dir.join("run"),
        "seed": 17,
        "data": {"per_approach": 1},
        "train": {"lr": 1e-3, "batch_size": 4, "epochs_stage1": 3, "epochs_stage2": 3},
    });
    let cfg_path = dir.join("config.json");
    std::fs::write(&cfg_path, cfg.to_string()).map_err(|e| e.to_string())?;
    let c = cfg_path.to_str().unwrap();
    run_cli(&["--config", c, "gen-data"])?;
    run_cli(&["--config", c, "train"])?;
    run_cli(&["--config", c, "eval"])?;
    run_cli(&["--config", c, "eval", "--attack", "jpeg-q50"])
}

fn read_json(p: &Path) -> Result<serde_json::Value, String> {
    let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

/// Equal structure, equal strings, numbers within `tol`.
fn json_close(a: &serde_json::Value, b: &serde_json::Value, tol: f64) -> bool {
    use serde_json::Value;
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => (x.as_f64().unwrap() - y.as_f64().unwrap()).abs() <= tol,
        (Value::Array(x), Value::Array(y)) => x.len() == y.len() && x.iter().zip(y).all(|(p, q)| json_close(p, q, tol)),
        (Value::Object(x), Value::Object(y)) => {
            x.len() == y.len() && x.iter().all(|(k, v)| y.get(k).is_some_and(|w| json_close(v, w, tol)))
        }
        _ => a == b,
    }
}

fn determinism() -> Outcome {
    let start = Instant::now();
    let runs = [tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?];
    for r in &runs {
        end_to_end(r.path())?;
    }
    let (a, b) = (runs[0].path(), runs[1].path());
    for m in ["data/manifest.json", "data/attacks/jpeg-q50/manifest.json"] {
        let (x, y) = (std::fs::read(a.join(m)), std::fs::read(b.join(m)));
        ensure(matches!((&x, &y), (Ok(x), Ok(y)) if x == y), || format!("{m} differs"))?;
    }
    let files = ["run/train_log.json", "run/eval/test-none/report.json", "run/eval/test-jpeg-q50/report.json"];
    for f in files {
        ensure(json_close(&read_json(&a.join(f))?, &read_json(&b.join(f))?, 1e-6), || format!("{f} differs"))?;
    }
    let reports = metrics::read_reports(&a.join(files[1])).map_err(|e| e.to_string())?;
    let report = &reports[0];
    Ok(format!(
        "manifests identical, logs and reports within 1e-6 (F1 {:.4}, {} test images), {:.1?}",
        report.f1,
        report.images.len(),
        start.elapsed()
    ))
}

// ---------------------------------------------------------------------------
// Ablations
// ---------------------------------------------------------------------------

fn ablations() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(900);
    let x = rand_tensor(&[3, 64, 64], 0.0, 1.0, &mut rng);
    let mut names = Vec::new();
    for v in Variant::ALL {
        let cfg = NetworkConfig {
            variant: v,
            ..NetworkConfig::toy()
        };
        let model = UrnModel::new(&cfg, 3).map_err(|e| format!("{v}: {e}"))?;
        let out = model.infer(&x, 4).map_err(|e| format!("{v}: {e}"))?;
        ensure(out.y_v.shape() == [64, 64], || format!("{v}: output {:?}", out.y_v.shape()))?;
        ensure(out.y_v.data().iter().all(|p| (0.0..=1.0).contains(p)), || format!("{v}: output leaves [0, 1]"))?;
        names.push(v.name());
    }
    ensure(names.len() == 11, || format!("{} variants", names.len()))?;
    Ok(format!("11 variants: {}", names.join(", ")))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("graph oracle suite", graph_oracles),
        ("uncertainty bounds", uncertainty_bounds),
        ("gradient suite", gradient_suite),
        ("metric oracle suite", metric_oracles),
        ("full-scale shapes", full_scale_shapes),
        ("overfit", overfit),
        ("attack invariants", attack_invariants),
        ("determinism", determinism),
        ("ablation plumbing", ablations),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
