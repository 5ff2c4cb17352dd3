//! Brute-force reference implementations.
//!
//! Each function re-derives a quantity straight from its definition, without
//! sharing code paths with the optimized builders it is compared against.
//! They back the `check` suites and the test oracles.

use crate::attention::{AttentionParams, Matrix, TokenMatrix};
use crate::error::Result;
use crate::geometry::{Point2, NEAR_EPS};
use crate::latent::IndicatorIndex;
use crate::masks::{AttentionMask, BackgroundPolicy, ConditionBlockMode};
use crate::scalar::Real;
use crate::scene::{corners_from_pose, Scene};

/// Center-in-polygon over every pixel; sub-pixel hulls mark vertex pixels.
pub fn raster(vertices: &[Point2], height: usize, width: usize) -> Vec<bool> {
    let mut out = vec![false; height * width];
    let n = vertices.len();
    if n == 0 {
        return out;
    }
    let mut twice_area = 0.0;
    for i in 0..n {
        let (a, b) = (vertices[i], vertices[(i + 1) % n]);
        twice_area += a.x * b.y - b.x * a.y;
    }
    if n < 3 || twice_area / 2.0 < 1.0 {
        for v in vertices {
            let (c, r) = (v.x.floor(), v.y.floor());
            if c >= 0.0 && r >= 0.0 && c < width as f64 && r < height as f64 {
                out[r as usize * width + c as usize] = true;
            }
        }
        return out;
    }
    for r in 0..height {
        for c in 0..width {
            let (px, py) = (c as f64 + 0.5, r as f64 + 0.5);
            out[r * width + c] = (0..n).all(|i| {
                let (a, b) = (vertices[i], vertices[(i + 1) % n]);
                (b.x - a.x) * (py - a.y) - (b.y - a.y) * (px - a.x) >= 0.0
            });
        }
    }
    out
}

/// `i ∈ I(v_k)`, by linear scan.
pub fn identity_open(idx: &IndicatorIndex, instance_order: &[u64], k: usize, i: usize) -> bool {
    idx.instances_at(k).iter().any(|&id| id == instance_order[i])
}

pub fn trajectory_open(idx: &IndicatorIndex, policy: BackgroundPolicy, k: usize, j: usize) -> bool {
    if k == j {
        return true;
    }
    let (a, b) = (idx.instances_at(k), idx.instances_at(j));
    if policy == BackgroundPolicy::ForegroundOnly && (a.is_empty() || b.is_empty()) {
        return true;
    }
    a.iter().any(|x| b.iter().any(|y| x == y))
}

pub fn mask_entry(
    idx: &IndicatorIndex,
    instance_order: &[u64],
    policy: BackgroundPolicy,
    mode: ConditionBlockMode,
    r: usize,
    c: usize,
) -> bool {
    let m = idx.token_count();
    match (r < m, c < m) {
        (true, true) => trajectory_open(idx, policy, r, c),
        (true, false) => identity_open(idx, instance_order, r, c - m),
        (false, true) => identity_open(idx, instance_order, c, r - m),
        (false, false) => mode == ConditionBlockMode::AllOpen || r == c,
    }
}

/// First entry where `mask` disagrees with the definition, if any.
pub fn first_mask_mismatch(
    mask: &AttentionMask,
    idx: &IndicatorIndex,
    instance_order: &[u64],
    policy: BackgroundPolicy,
    mode: ConditionBlockMode,
) -> Option<(usize, usize)> {
    if mask.m() != idx.token_count() || mask.n() != instance_order.len() {
        return Some((usize::MAX, usize::MAX));
    }
    let size = mask.size();
    for r in 0..size {
        for c in 0..size {
            if mask.is_open(r, c) != mask_entry(idx, instance_order, policy, mode, r, c) {
                return Some((r, c));
            }
        }
    }
    None
}

pub fn loss_weight(idx: &IndicatorIndex, k: usize) -> u8 {
    u8::from(!idx.instances_at(k).is_empty())
}

/// Indicator recomputed from the scene: per-pixel projection of every
/// corner/clip point, brute-force coverage, block counting and thresholding.
pub fn indicator(scene: &Scene, view_id: u32, theta: f64) -> Result<IndicatorIndex> {
    let d = scene.dims;
    let ld = d.latent();
    let mut forward = vec![Vec::new(); ld.token_count()];
    for id in scene.instance_order() {
        let inst = scene.instance(id).unwrap();
        let mut counts = vec![0u32; ld.token_count()];
        for t in 0..d.frames {
            let Some(pose) = inst.poses.get(&(t as u32)) else { continue };
            let cam = scene.camera(view_id, t as u32).unwrap();
            let b = corners_from_pose(inst.size, pose.center, pose.yaw)?;
            // Clip points: corners in front plus edge/near-plane crossings.
            let homog: Vec<_> = b
                .corners
                .iter()
                .map(|x| cam.intrinsics * (cam.rotation * x + cam.translation))
                .collect();
            let mut pts = Vec::new();
            for h in homog.iter().filter(|h| h.z >= NEAR_EPS) {
                pts.push(Point2::new(h.x / h.z, h.y / h.z));
            }
            for c0 in 0..8 {
                for bit in [1, 2, 4] {
                    let (ha, hb) = (homog[c0], homog[c0 ^ bit]);
                    if c0 & bit == 0 && (ha.z < NEAR_EPS) != (hb.z < NEAR_EPS) {
                        let h = ha + (hb - ha) * ((NEAR_EPS - ha.z) / (hb.z - ha.z));
                        pts.push(Point2::new(h.x / NEAR_EPS, h.y / NEAR_EPS));
                    }
                }
            }
            let hull = hull_by_gift_wrapping(&pts);
            let cover = raster(&hull, d.height, d.width);
            for r in 0..d.height {
                for c in 0..d.width {
                    if cover[r * d.width + c] {
                        counts[ld.token(t / d.f_t, r / d.f_h, c / d.f_w)] += 1;
                    }
                }
            }
        }
        let vol = (d.f_t * d.f_h * d.f_w) as f64;
        for (k, &n) in counts.iter().enumerate() {
            if f64::from(n) / vol > theta {
                forward[k].push(id);
            }
        }
    }
    Ok(IndicatorIndex::from_sets(forward))
}

/// Jarvis march, counter-clockwise, collinear points dropped.
pub fn hull_by_gift_wrapping(points: &[Point2]) -> Vec<Point2> {
    let mut pts: Vec<Point2> = Vec::new();
    for p in points {
        if !pts.contains(p) {
            pts.push(*p);
        }
    }
    if pts.len() <= 2 {
        pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
        return pts;
    }
    let cross = |o: Point2, a: Point2, b: Point2| (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
    let dist2 = |a: Point2, b: Point2| (a.x - b.x).powi(2) + (a.y - b.y).powi(2);
    let start = *pts
        .iter()
        .min_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)))
        .unwrap();
    let mut hull = vec![start];
    let mut cur = start;
    loop {
        let mut next = if pts[0] == cur { pts[1] } else { pts[0] };
        for &p in &pts {
            if p == cur {
                continue;
            }
            let c = cross(cur, next, p);
            // p is clockwise of next (next is not the most counter-clockwise
            // candidate), or collinear but farther.
            if c < 0.0 || (c == 0.0 && dist2(cur, p) > dist2(cur, next)) {
                next = p;
            }
        }
        if next == start {
            break;
        }
        hull.push(next);
        cur = next;
        if hull.len() > pts.len() {
            break;
        }
    }
    if hull.len() >= 3 {
        let mut area = 0.0;
        for i in 0..hull.len() {
            let (a, b) = (hull[i], hull[(i + 1) % hull.len()]);
            area += a.x * b.y - b.x * a.y;
        }
        if area == 0.0 {
            let a = hull[0];
            let b = *hull.iter().max_by(|p, q| dist2(a, **p).total_cmp(&dist2(a, **q))).unwrap();
            return vec![a, b];
        }
    }
    hull
}

/// Per-row attention written as nested loops with explicit index arithmetic.
/// Returns the output and the per-head weight rows.
pub fn naive_attention<T: Real>(
    v: &TokenMatrix<T>,
    g: &TokenMatrix<T>,
    mask: &AttentionMask,
    params: &AttentionParams<T>,
) -> (Matrix<T>, Vec<Matrix<T>>) {
    let d = params.d_model;
    let h = params.heads;
    let dh = d / h;
    let n_tok = v.rows() + g.rows();
    let token = |r: usize, c: usize| -> T {
        if r < v.rows() {
            v.values.get(r, c)
        } else {
            g.values.get(r - v.rows(), c)
        }
    };
    let project = |w: &Matrix<T>, r: usize, col: usize| -> T {
        let mut s = T::zero();
        for i in 0..d {
            s = s + token(r, i) * w.get(i, col);
        }
        s
    };
    let mut out = Matrix::zeros(n_tok, d);
    let mut all_w = vec![Matrix::zeros(n_tok, n_tok); h];
    for r in 0..n_tok {
        let mut concat = vec![T::zero(); d];
        for head in 0..h {
            let mut scores = vec![T::zero(); n_tok];
            for c in 0..n_tok {
                let mut s = T::zero();
                for e in head * dh..(head + 1) * dh {
                    s = s + project(&params.w_q, r, e) * project(&params.w_k, c, e);
                }
                scores[c] = s / T::from_usize(dh).unwrap().sqrt();
            }
            let open: Vec<usize> = (0..n_tok).filter(|&c| mask.is_open(r, c)).collect();
            let mx = open.iter().map(|&c| scores[c]).fold(T::neg_infinity(), T::max);
            let z: T = open.iter().map(|&c| (scores[c] - mx).exp()).fold(T::zero(), |a, b| a + b);
            for &c in &open {
                let w = (scores[c] - mx).exp() / z;
                all_w[head].set(r, c, w);
                for e in head * dh..(head + 1) * dh {
                    concat[e] = concat[e] + w * project(&params.w_v, c, e);
                }
            }
        }
        for col in 0..d {
            let mut s = T::zero();
            for e in 0..d {
                s = s + concat[e] * params.w_o.get(e, col);
            }
            out.set(r, col, s);
        }
    }
    (out, all_w)
}
