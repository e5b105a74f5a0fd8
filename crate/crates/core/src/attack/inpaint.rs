//! Classical single-channel inpainting on `[H, W]` planes.
//!
//! `domain[p]` marks the pixels to fill. Every pixel outside the domain is
//! left untouched.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

const NEIGHBORS4: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

/// Known pixels 4-adjacent to the domain.
pub fn boundary(domain: &[bool], h: usize, w: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if domain[p] {
                continue;
            }
            let touches = NEIGHBORS4.iter().any(|&(dy, dx)| {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w && domain[ny as usize * w + nx as usize]
            });
            if touches {
                out.push(p);
            }
        }
    }
    out
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Flag {
    Known,
    Band,
    Inside,
}

#[derive(PartialEq)]
struct Entry(f64, usize);

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    // Min-heap on arrival time, ties broken by pixel index.
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

/// Fast-marching inpainting. Pixels are filled in order of their distance
/// to the domain boundary; each takes a weighted first-order extrapolation
/// from known pixels within `radius`, with weights combining direction,
/// geometric distance and level-set distance.
///
/// Estimates are clamped to the range of the known pixels.
pub fn telea(img: &mut [f64], domain: &[bool], h: usize, w: usize, radius: usize) {
    let n = h * w;
    let known = (0..n).filter(|&p| !domain[p]).map(|p| img[p]);
    let (lo, hi) = known.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), v| (l.min(v), u.max(v)));
    let mut flag: Vec<Flag> = domain.iter().map(|&d| if d { Flag::Inside } else { Flag::Known }).collect();
    let mut t = vec![f64::INFINITY; n];
    let mut heap = BinaryHeap::new();
    for p in boundary(domain, h, w) {
        flag[p] = Flag::Band;
        t[p] = 0.0;
        heap.push(Entry(0.0, p));
    }
    for p in 0..n {
        if flag[p] == Flag::Known {
            t[p] = 0.0;
        }
    }
    let at = |y: isize, x: isize| -> Option<usize> {
        (y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w).then(|| y as usize * w + x as usize)
    };

    // Each pixel enters the heap once: boundary pixels at start, domain
    // pixels when first reached.
    while let Some(Entry(_, p)) = heap.pop() {
        flag[p] = Flag::Known;
        let (py, px) = ((p / w) as isize, (p % w) as isize);
        for (dy, dx) in NEIGHBORS4 {
            let Some(q) = at(py + dy, px + dx) else { continue };
            if flag[q] != Flag::Inside {
                continue;
            }
            let (qy, qx) = (py + dy, px + dx);
            let tq = solve_eikonal(&t, &flag, qy, qx, &at);
            t[q] = tq;
            img[q] = telea_pixel(img, &t, &flag, qy, qx, radius as isize, &at).clamp(lo, hi);
            flag[q] = Flag::Band;
            heap.push(Entry(tq, q));
        }
    }
}

fn known_t(t: &[f64], flag: &[Flag], q: Option<usize>) -> f64 {
    match q {
        Some(q) if flag[q] != Flag::Inside => t[q],
        _ => f64::INFINITY,
    }
}

fn solve_eikonal(t: &[f64], flag: &[Flag], y: isize, x: isize, at: &dyn Fn(isize, isize) -> Option<usize>) -> f64 {
    let a = known_t(t, flag, at(y, x - 1)).min(known_t(t, flag, at(y, x + 1)));
    let b = known_t(t, flag, at(y - 1, x)).min(known_t(t, flag, at(y + 1, x)));
    match (a.is_finite(), b.is_finite()) {
        (true, true) if (a - b).abs() < 1.0 => (a + b + (2.0 - (a - b).powi(2)).sqrt()) / 2.0,
        (false, false) => f64::INFINITY,
        _ => a.min(b) + 1.0,
    }
}

/// Central difference along one axis over known pixels, one-sided at gaps.
fn known_diff(v: &[f64], flag: &[Flag], lo: Option<usize>, mid: usize, hi: Option<usize>) -> f64 {
    let ok = |q: Option<usize>| q.filter(|&q| flag[q] != Flag::Inside && v[q].is_finite());
    match (ok(lo), ok(hi)) {
        (Some(l), Some(r)) => (v[r] - v[l]) / 2.0,
        (Some(l), None) if flag[mid] != Flag::Inside => v[mid] - v[l],
        (None, Some(r)) if flag[mid] != Flag::Inside => v[r] - v[mid],
        _ => 0.0,
    }
}

fn telea_pixel(
    img: &[f64],
    t: &[f64],
    flag: &[Flag],
    y: isize,
    x: isize,
    radius: isize,
    at: &dyn Fn(isize, isize) -> Option<usize>,
) -> f64 {
    let p = at(y, x).expect("in bounds");
    // Level-set normal at p from the neighbors' arrival times.
    let gx = {
        let (l, r) = (known_t(t, flag, at(y, x - 1)), known_t(t, flag, at(y, x + 1)));
        match (l.is_finite(), r.is_finite()) {
            (true, true) => (r - l) / 2.0,
            (true, false) => t[p] - l,
            (false, true) => r - t[p],
            _ => 0.0,
        }
    };
    let gy = {
        let (u, d) = (known_t(t, flag, at(y - 1, x)), known_t(t, flag, at(y + 1, x)));
        match (u.is_finite(), d.is_finite()) {
            (true, true) => (d - u) / 2.0,
            (true, false) => t[p] - u,
            (false, true) => d - t[p],
            _ => 0.0,
        }
    };
    let gnorm = (gx * gx + gy * gy).sqrt();
    let (nx, ny) = if gnorm > 0.0 { (gx / gnorm, gy / gnorm) } else { (0.0, 0.0) };

    let (mut num, mut den) = (0.0, 0.0);
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            if dx == 0 && dy == 0 || dx * dx + dy * dy > radius * radius {
                continue;
            }
            let (qy, qx) = (y + dy, x + dx);
            let Some(q) = at(qy, qx) else { continue };
            if flag[q] == Flag::Inside {
                continue;
            }
            // r = p - q
            let (rx, ry) = (-dx as f64, -dy as f64);
            let r2 = rx * rx + ry * ry;
            let r = r2.sqrt();
            let dir = ((rx * nx + ry * ny) / r).abs().max(1e-6);
            let dst = 1.0 / r2;
            let lev = 1.0 / (1.0 + (t[q] - t[p]).abs());
            let wgt = dir * dst * lev;
            let ix = known_diff(img, flag, at(qy, qx - 1), q, at(qy, qx + 1));
            let iy = known_diff(img, flag, at(qy - 1, qx), q, at(qy + 1, qx));
            num += wgt * (img[q] + ix * rx + iy * ry);
            den += wgt;
        }
    }
    if den > 0.0 {
        num / den
    } else {
        img[p]
    }
}

/// Fluid-dynamics inpainting. The domain is first filled with the harmonic
/// interpolant of its boundary. Then image smoothness (the Laplacian,
/// playing the role of vorticity) is transported along isophotes, which
/// are the streamlines of the velocity field `∇⊥I`, with a small viscous
/// diffusion. After each transport sweep the image is recovered from the
/// smoothness field by a Poisson solve with the boundary as Dirichlet data.
///
/// The output is clamped to the boundary's value range.
pub fn navier_stokes(img: &mut [f64], domain: &[bool], h: usize, w: usize, iterations: usize) {
    let ring = boundary(domain, h, w);
    if ring.is_empty() {
        return;
    }
    let lo = ring.iter().map(|&p| img[p]).fold(f64::INFINITY, f64::min);
    let hi = ring.iter().map(|&p| img[p]).fold(f64::NEG_INFINITY, f64::max);
    let cells: Vec<usize> = (0..h * w).filter(|&p| domain[p]).collect();
    let mean = ring.iter().map(|&p| img[p]).sum::<f64>() / ring.len() as f64;
    for &p in &cells {
        img[p] = mean;
    }

    // Neighbor values with replicate padding at the image border.
    let nb = |v: &[f64], p: usize| -> [f64; 4] {
        let (y, x) = (p / w, p % w);
        [
            v[y.saturating_sub(1) * w + x],
            v[(y + 1).min(h - 1) * w + x],
            v[y * w + x.saturating_sub(1)],
            v[y * w + (x + 1).min(w - 1)],
        ]
    };
    let poisson = |img: &mut [f64], rhs: &[f64], sweeps: usize| {
        for _ in 0..sweeps {
            let mut delta = 0.0f64;
            for &p in &cells {
                let s: f64 = nb(img, p).iter().sum();
                let v = (s - rhs[p]) / 4.0;
                delta = delta.max((v - img[p]).abs());
                img[p] = v;
            }
            if delta < 1e-7 {
                break;
            }
        }
    };

    let zero = vec![0.0; h * w];
    poisson(img, &zero, 4 * (h + w) * 10);

    let (dt, nu) = (0.1, 0.05);
    let mut omega = vec![0.0; h * w];
    for _ in 0..iterations {
        for &p in &cells {
            let s: f64 = nb(img, p).iter().sum();
            omega[p] = s - 4.0 * img[p];
        }
        let mut next = omega.clone();
        for &p in &cells {
            let [iu, id, il, ir] = nb(img, p);
            let (vx, vy) = (-(id - iu) / 2.0, (ir - il) / 2.0);
            let [ou, od, ol, or] = nb(&omega, p);
            let o = omega[p];
            // First-order upwind advection.
            let wx = if vx > 0.0 { o - ol } else { or - o };
            let wy = if vy > 0.0 { o - ou } else { od - o };
            let lap = ou + od + ol + or - 4.0 * o;
            next[p] = o - dt * (vx * wx + vy * wy) + dt * nu * lap;
        }
        omega = next;
        poisson(img, &omega, 50);
    }
    for &p in &cells {
        img[p] = img[p].clamp(lo, hi);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stripe(h: usize, w: usize, x0: usize, x1: usize) -> Vec<bool> {
        (0..h * w).map(|p| (x0..x1).contains(&(p % w))).collect()
    }

    #[test]
    fn linear_ramp_is_reproduced_by_both_methods() {
        let (h, w) = (16, 16);
        let ramp: Vec<f64> = (0..h * w).map(|p| (p % w) as f64 / 15.0).collect();
        let dom = stripe(h, w, 6, 10);
        let mut a = ramp.clone();
        for p in 0..h * w {
            if dom[p] {
                a[p] = 0.5;
            }
        }
        let mut b = a.clone();
        telea(&mut a, &dom, h, w, 3);
        navier_stokes(&mut b, &dom, h, w, 20);
        for p in 0..h * w {
            assert!((a[p] - ramp[p]).abs() < 0.08, "telea {p}: {} vs {}", a[p], ramp[p]);
            assert!((b[p] - ramp[p]).abs() < 1e-3, "ns {p}: {} vs {}", b[p], ramp[p]);
        }
    }

    #[test]
    fn telea_reaches_every_domain_pixel() {
        let (h, w) = (12, 12);
        let dom: Vec<bool> = (0..h * w).map(|p| (2..10).contains(&(p / w)) && (2..10).contains(&(p % w))).collect();
        let mut img: Vec<f64> = (0..h * w).map(|p| if dom[p] { f64::NAN } else { 0.3 }).collect();
        telea(&mut img, &dom, h, w, 2);
        assert!(img.iter().all(|v| (v - 0.3).abs() < 1e-12));
    }
}
