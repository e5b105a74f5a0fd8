//! Uncertainty-guided graph convolution over patch grids.
//!
//! Each pyramid level is cut into `n_p × n_p` patches. Patches become graph
//! nodes whose features are patch means and whose uncertainty is the patch
//! mean of the uncertainty map. Edges point from confident to uncertain
//! neighbors and carry the uncertainty difference, so propagation pulls
//! information into uncertain regions.
//!
//! Adjacency convention: `A[i][j] > 0` means node `i` aggregates from node
//! `j`, i.e. row `i` holds the incoming edges of `i`.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{xavier_uniform, Ctx, ParamId, ParamStore};
use crate::sparse::SparseMatrix;
use crate::tensor::{block_mean, Tensor};

/// How graph edges are formed from node uncertainties (and, for `Knn`,
/// node features).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeStrategy {
    /// 8-neighborhood, directed toward the more uncertain node, weighted by
    /// the uncertainty difference.
    LocalUgc,
    /// As `LocalUgc` between every pair of nodes.
    GlobalUgc,
    /// 8-neighborhood, directed by uncertainty, unit weights.
    LocalDirectedUnweighted,
    /// 8-neighborhood in both directions, unit weights.
    LocalUndirectedUnweighted,
    /// Every pair, directed by uncertainty, unit weights.
    GlobalDirectedUnweighted,
    /// The `k` nearest nodes in feature space, directed by uncertainty,
    /// unit weights.
    Knn { k: usize },
}

impl EdgeStrategy {
    pub fn needs_features(self) -> bool {
        matches!(self, EdgeStrategy::Knn { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
}

impl Grid {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// 8-neighborhood test on row-major node indices.
    pub fn adjacent(&self, i: usize, j: usize) -> bool {
        let (ri, ci) = (i / self.cols, i % self.cols);
        let (rj, cj) = (j / self.cols, j % self.cols);
        i != j && ri.abs_diff(rj) <= 1 && ci.abs_diff(cj) <= 1
    }
}

/// Nodes of one patch graph, before edges are added.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGraph {
    pub grid: Grid,
    /// `[N, C]`, row-major node order.
    pub features: Tensor,
    /// `[N]`.
    pub uncertainty: Vec<f64>,
}

/// Average-pools `f` (`[C, H, W]`) and `y_u` (`[H, W]`, already at the map's
/// resolution) into `n_p × n_p` patches.
pub fn patchify(f: &Tensor, y_u: &Tensor, n_p: usize) -> Result<PatchGraph> {
    let &[c, h, w] = f.shape() else {
        return Err(Error::Shape(format!("feature map must be [C, H, W], got {:?}", f.shape())));
    };
    if y_u.shape() != [h, w] {
        return Err(Error::Shape(format!("uncertainty {:?} does not match {h}×{w}", y_u.shape())));
    }
    if n_p == 0 || h % n_p != 0 || w % n_p != 0 {
        return Err(Error::Shape(format!("{h}×{w} map is not divisible into {n_p}×{n_p} patches")));
    }
    let grid = Grid {
        rows: h / n_p,
        cols: w / n_p,
    };
    let pooled = block_mean(f.data(), c, h, w, n_p);
    let n = grid.len();
    let features = Tensor::from_fn([n, c], |i| pooled[(i % c) * n + i / c]);
    let uncertainty = block_mean(y_u.data(), 1, h, w, n_p);
    Ok(PatchGraph {
        grid,
        features,
        uncertainty,
    })
}

/// Builds the adjacency for node uncertainties `u` on `grid`. `features`
/// (`[N, C]`) is required by `Knn` and ignored otherwise.
pub fn build_edges(u: &[f64], grid: Grid, strategy: EdgeStrategy, features: Option<&Tensor>) -> SparseMatrix {
    let n = grid.len();
    assert_eq!(u.len(), n, "one uncertainty per node");
    let mut trip = Vec::new();
    let consider = |i: usize, j: usize, trip: &mut Vec<(usize, usize, f64)>| {
        let w = match strategy {
            EdgeStrategy::LocalUgc | EdgeStrategy::GlobalUgc => u[i] - u[j],
            EdgeStrategy::LocalUndirectedUnweighted => 1.0,
            _ if u[j] < u[i] => 1.0,
            _ => 0.0,
        };
        if w > 0.0 {
            trip.push((i, j, w));
        }
    };
    match strategy {
        EdgeStrategy::LocalUgc | EdgeStrategy::LocalDirectedUnweighted | EdgeStrategy::LocalUndirectedUnweighted => {
            for i in 0..n {
                let (r, c) = (i / grid.cols, i % grid.cols);
                for rr in r.saturating_sub(1)..=(r + 1).min(grid.rows - 1) {
                    for cc in c.saturating_sub(1)..=(c + 1).min(grid.cols - 1) {
                        let j = rr * grid.cols + cc;
                        if j != i {
                            consider(i, j, &mut trip);
                        }
                    }
                }
            }
        }
        EdgeStrategy::GlobalUgc | EdgeStrategy::GlobalDirectedUnweighted => {
            for i in 0..n {
                for j in 0..n {
                    if j != i {
                        consider(i, j, &mut trip);
                    }
                }
            }
        }
        EdgeStrategy::Knn { k } => {
            let f = features.expect("kNN edges need node features");
            let c = f.shape()[1];
            let d = f.data();
            for i in 0..n {
                let fi = &d[i * c..(i + 1) * c];
                let mut dist: Vec<(f64, usize)> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| {
                        let s = fi.iter().zip(&d[j * c..(j + 1) * c]).map(|(a, b)| (a - b) * (a - b)).sum();
                        (s, j)
                    })
                    .collect();
                dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                for &(_, j) in dist.iter().take(k) {
                    consider(i, j, &mut trip);
                }
            }
        }
    }
    SparseMatrix::from_triplets(n, &trip)
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}` with `D̃` the row sums of `A + I`.
pub fn normalize(a: &SparseMatrix) -> SparseMatrix {
    let at = a.add_identity();
    let d: Vec<f64> = at.row_sums().iter().map(|s| 1.0 / s.sqrt()).collect();
    at.scale_rows_cols(&d, &d)
}

/// Three chained graph convolutions over a batch of node features
/// `b0: [B, N, C]` with one operator per batch item: rectifiers after the
/// first two, none after the third.
pub fn propagate(g: &Graph, ops: &Rc<Vec<SparseMatrix>>, b0: Var, t: [Var; 3]) -> Var {
    let mut b = b0;
    for (l, &tl) in t.iter().enumerate() {
        let msg = g.spmm(Rc::clone(ops), b);
        b = g.linear(msg, tl);
        if l < 2 {
            b = g.relu(b);
        }
    }
    b
}

/// Reshapes node features `[B, N, C]` to `[B, C, rows, cols]`, resamples
/// to the target's resolution when the grids differ, and adds to `target`.
pub fn fuse(g: &Graph, nodes: Var, grid: Grid, target: Var) -> Result<Var> {
    let (bs, n, c) = match g.shape(nodes)[..] {
        [b, n, c] => (b, n, c),
        ref s => return Err(Error::Shape(format!("node features must be [B, N, C], got {s:?}"))),
    };
    if n != grid.len() {
        return Err(Error::Shape(format!("{n} nodes do not fill a {}×{} grid", grid.rows, grid.cols)));
    }
    let (tb, tc, th, tw) = g.value(target).dims4();
    if (tb, tc) != (bs, c) {
        return Err(Error::Shape(format!("cannot add [{bs}, {c}, ..] nodes to [{tb}, {tc}, ..] map")));
    }
    let map = g.reshape(g.transpose12(nodes), &[bs, c, grid.rows, grid.cols]);
    let map = if (grid.rows, grid.cols) == (th, tw) {
        map
    } else {
        g.resize_bilinear(map, th, tw)
    };
    Ok(g.add(target, map))
}

/// Uncertainty at a level's resolution, pooled from the full-resolution map.
pub fn level_uncertainty(y_u: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let &[hu, wu] = y_u.shape() else {
        return Err(Error::Shape(format!("uncertainty must be [H, W], got {:?}", y_u.shape())));
    };
    if h == 0 || hu % h != 0 || wu % w != 0 || hu / h != wu / w {
        return Err(Error::Shape(format!("cannot pool {hu}×{wu} to {h}×{w}")));
    }
    Ok(Tensor::new([h, w], block_mean(y_u.data(), 1, hu, wu, hu / h)))
}

/// Node features `[B, N, C]` from `[B, C, H, W]`.
fn nodes_of(g: &Graph, f: Var, n_p: usize) -> Var {
    let pooled = g.avg_pool(f, n_p);
    let (bs, c, r, cc) = g.value(pooled).dims4();
    g.transpose12(g.reshape(pooled, &[bs, c, r * cc]))
}

/// Learnable UGGC block for one pyramid level.
pub struct Uggc {
    pub t: [ParamId; 3],
    pub n_p: usize,
    pub strategy: EdgeStrategy,
}

/// Per-item adjacency matrices produced by one forward.
pub type Adjacency = Vec<SparseMatrix>;

impl Uggc {
    /// Weight chain `cin → cin → cout → cout`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        n_p: usize,
        strategy: EdgeStrategy,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let dims = [(cin, cin), (cin, cout), (cout, cout)];
        let t = std::array::from_fn(|l| {
            let (r, c) = dims[l];
            store.add(format!("{name}.t{}", l + 1), xavier_uniform(r, c, rng), true)
        });
        Self { t, n_p, strategy }
    }

    /// Propagated node features `[B, N, cout]`, the grid and the adjacency
    /// of every batch item. `y_u` holds one full-resolution map per item.
    pub fn forward(&self, ctx: &Ctx, f: Var, y_u: &[Tensor]) -> Result<(Var, Grid, Adjacency)> {
        let g = ctx.g;
        let (bs, _, h, w) = g.value(f).dims4();
        if y_u.len() != bs {
            return Err(Error::Shape(format!("{} uncertainty maps for a batch of {bs}", y_u.len())));
        }
        if h % self.n_p != 0 || w % self.n_p != 0 {
            return Err(Error::Shape(format!("{h}×{w} map is not divisible into {0}×{0} patches", self.n_p)));
        }
        let grid = Grid {
            rows: h / self.n_p,
            cols: w / self.n_p,
        };
        let b0 = nodes_of(g, f, self.n_p);
        let feats = g.value(b0);
        let (_, n, c) = (bs, grid.len(), feats.shape()[2]);
        let mut adj = Vec::with_capacity(bs);
        for (b, yu) in y_u.iter().enumerate() {
            let lvl = level_uncertainty(yu, h, w)?;
            let u = block_mean(lvl.data(), 1, h, w, self.n_p);
            let fb = self
                .strategy
                .needs_features()
                .then(|| Tensor::new([n, c], feats.data()[b * n * c..(b + 1) * n * c].to_vec()));
            adj.push(build_edges(&u, grid, self.strategy, fb.as_ref()));
        }
        let ops = Rc::new(adj.iter().map(normalize).collect::<Vec<_>>());
        let t = self.t.map(|id| ctx.param(id));
        Ok((propagate(g, &ops, b0, t), grid, adj))
    }
}

/// Scaled dot-product self-attention over patch nodes, used in place of
/// graph propagation by one ablation.
pub struct NodeAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub n_p: usize,
}

impl NodeAttention {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, n_p: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            wq: store.add(format!("{name}.wq"), xavier_uniform(cin, cin, rng), true),
            wk: store.add(format!("{name}.wk"), xavier_uniform(cin, cin, rng), true),
            wv: store.add(format!("{name}.wv"), xavier_uniform(cin, cout, rng), true),
            n_p,
        }
    }

    pub fn forward(&self, ctx: &Ctx, f: Var) -> Result<(Var, Grid)> {
        let g = ctx.g;
        let (_, c, h, w) = g.value(f).dims4();
        if h % self.n_p != 0 || w % self.n_p != 0 {
            return Err(Error::Shape(format!("{h}×{w} map is not divisible into {0}×{0} patches", self.n_p)));
        }
        let grid = Grid {
            rows: h / self.n_p,
            cols: w / self.n_p,
        };
        let b0 = nodes_of(g, f, self.n_p);
        let q = g.linear(b0, ctx.param(self.wq));
        let k = g.linear(b0, ctx.param(self.wk));
        let v = g.linear(b0, ctx.param(self.wv));
        let s = g.softmax_last(g.scale(g.bmm(q, k, true), 1.0 / (c as f64).sqrt()));
        Ok((g.bmm(s, v, false), grid))
    }
}

/// Writes adjacency triplets `(i, j, w)` as CSV.
pub fn write_adjacency_csv(path: &std::path::Path, a: &SparseMatrix) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(["i", "j", "w"])?;
    for (i, j, w) in a.triplets() {
        wtr.write_record([i.to_string(), j.to_string(), w.to_string()])?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
