//! Box projection, near-plane clipping, convex hull and polygon rasterization.
//!
//! Pixel `(row r, col c)` is covered iff its center `(c + 0.5, r + 0.5)` lies
//! inside the hull polygon or on its boundary. Hulls with fewer than three
//! vertices or area below one square pixel instead cover exactly the pixels
//! containing their vertices.

use rayon::prelude::*;

use crate::bits::BitGrid;
use crate::error::{Error, Result};
use crate::scene::{BoxCorners3D, CameraFrame, Instance, Scene, Vec3};

/// Near plane depth (meters along the camera axis).
pub const NEAR_EPS: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// `(a - o) x (b - o)`; positive for a counter-clockwise turn.
#[inline]
pub fn cross(o: Point2, a: Point2, b: Point2) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerProjection {
    /// `None` when the point is at or behind the near plane.
    pub pixel: Option<Point2>,
    /// Third homogeneous coordinate of `K (R X + T)`.
    pub depth: f64,
}

pub fn project_corner(x: &Vec3, cam: &CameraFrame) -> CornerProjection {
    let h = cam.intrinsics * (cam.rotation * x + cam.translation);
    let pixel = (h.z > NEAR_EPS).then(|| Point2::new(h.x / h.z, h.y / h.z));
    CornerProjection { pixel, depth: h.z }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedPolygon {
    /// Convex, counter-clockwise (positive shoelace area in pixel coordinates).
    pub vertices: Vec<Point2>,
    pub frame_index: u32,
    pub instance_id: u64,
}

impl ProjectedPolygon {
    pub fn empty(frame_index: u32, instance_id: u64) -> Self {
        Self {
            vertices: Vec::new(),
            frame_index,
            instance_id,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// Fewer than three vertices (collinear or coincident input).
    pub fn is_degenerate(&self) -> bool {
        self.vertices.len() < 3
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.vertices)
    }
}

pub fn signed_area(v: &[Point2]) -> f64 {
    if v.len() < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..v.len() {
        let a = v[i];
        let b = v[(i + 1) % v.len()];
        s += a.x * b.y - b.x * a.y;
    }
    s / 2.0
}

/// Andrew's monotone chain. Returns the hull counter-clockwise starting at the
/// lowest-x (then lowest-y) point, with collinear points removed. Fewer than
/// three distinct or all-collinear inputs collapse to their extreme points.
pub fn convex_hull(points: &[Point2]) -> Vec<Point2> {
    let mut p: Vec<Point2> = points.to_vec();
    p.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    p.dedup();
    if p.len() <= 2 {
        return p;
    }
    let mut hull: Vec<Point2> = Vec::with_capacity(2 * p.len());
    for &pt in &p {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], pt) <= 0.0 {
            hull.pop();
        }
        hull.push(pt);
    }
    let lower_len = hull.len() + 1;
    for &pt in p.iter().rev().skip(1) {
        while hull.len() >= lower_len && cross(hull[hull.len() - 2], hull[hull.len() - 1], pt) <= 0.0 {
            hull.pop();
        }
        hull.push(pt);
    }
    hull.pop();
    if hull.len() == 2 && hull[0] == hull[1] {
        hull.pop();
    }
    hull
}

/// Projected points of the box after clipping against the near plane, paired
/// with their pre-division depth. Corners in front are kept; each edge that
/// crosses the plane contributes its intersection (at depth exactly
/// [`NEAR_EPS`]).
pub fn clipped_projection(corners: &BoxCorners3D, cam: &CameraFrame) -> Vec<(Point2, f64)> {
    let homog: Vec<Vec3> = corners
        .corners
        .iter()
        .map(|x| cam.intrinsics * (cam.rotation * x + cam.translation))
        .collect();
    let mut out = Vec::with_capacity(12);
    for h in &homog {
        if h.z >= NEAR_EPS {
            out.push((Point2::new(h.x / h.z, h.y / h.z), h.z));
        }
    }
    for (a, b) in BoxCorners3D::edges() {
        let (ha, hb) = (homog[a], homog[b]);
        if (ha.z < NEAR_EPS) != (hb.z < NEAR_EPS) {
            let s = (NEAR_EPS - ha.z) / (hb.z - ha.z);
            let h = ha + (hb - ha) * s;
            out.push((Point2::new(h.x / NEAR_EPS, h.y / NEAR_EPS), NEAR_EPS));
        }
    }
    out
}

pub fn hull_polygon(corners: &BoxCorners3D, cam: &CameraFrame, instance_id: u64) -> ProjectedPolygon {
    let pts: Vec<Point2> = clipped_projection(corners, cam).into_iter().map(|(p, _)| p).collect();
    ProjectedPolygon {
        vertices: convex_hull(&pts),
        frame_index: cam.frame_index,
        instance_id,
    }
}

/// The coverage predicate for a counter-clockwise convex polygon with at least
/// three vertices: inside or on the boundary.
#[inline]
pub fn center_inside(vertices: &[Point2], p: Point2) -> bool {
    let n = vertices.len();
    (0..n).all(|i| cross(vertices[i], vertices[(i + 1) % n], p) >= 0.0)
}

fn uses_vertex_rule(v: &[Point2]) -> bool {
    v.len() < 3 || signed_area(v) < 1.0
}

pub fn rasterize(poly: &ProjectedPolygon, height: usize, width: usize) -> BitGrid {
    let mut out = BitGrid::zeros(height * width);
    rasterize_into(&poly.vertices, height, width, &mut out, 0);
    out
}

/// Scanline fill of one frame into `out[offset .. offset + H*W]`.
pub fn rasterize_into(v: &[Point2], height: usize, width: usize, out: &mut BitGrid, offset: usize) {
    if v.is_empty() || height == 0 || width == 0 {
        return;
    }
    if uses_vertex_rule(v) {
        for p in v {
            let (c, r) = (p.x.floor(), p.y.floor());
            if c >= 0.0 && r >= 0.0 && c < width as f64 && r < height as f64 {
                out.set(offset + r as usize * width + c as usize, true);
            }
        }
        return;
    }

    let scale = v.iter().fold(1.0f64, |m, p| m.max(p.x.abs()).max(p.y.abs()));
    let tie_tol = 1e-9 * scale;
    let ymin = v.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
    let ymax = v.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
    let r_lo = (ymin - 0.5).ceil().max(0.0);
    let r_hi = (ymax - 0.5).floor().min(height as f64 - 1.0);
    if r_lo > r_hi {
        return;
    }
    let w = width as i64;
    let check = |c: i64, y: f64| center_inside(v, Point2::new(c as f64 + 0.5, y));

    for r in r_lo as usize..=r_hi as usize {
        let y = r as f64 + 0.5;
        let row = offset + r * width;
        // Rows grazing a vertex (incl. horizontal edges) use the predicate
        // across the whole row.
        if v.iter().any(|p| (p.y - y).abs() <= tie_tol) {
            for c in 0..w {
                if check(c, y) {
                    out.set(row + c as usize, true);
                }
            }
            continue;
        }
        let mut xl = f64::INFINITY;
        let mut xr = f64::NEG_INFINITY;
        for i in 0..v.len() {
            let (a, b) = (v[i], v[(i + 1) % v.len()]);
            if (a.y <= y && y <= b.y) || (b.y <= y && y <= a.y) {
                let x = a.x + (y - a.y) * (b.x - a.x) / (b.y - a.y);
                xl = xl.min(x);
                xr = xr.max(x);
            }
        }
        if xl > xr {
            continue;
        }
        let c_lo = ((xl - 0.5).ceil() as i64).clamp(-3, w + 3);
        let c_hi = ((xr - 0.5).floor() as i64).clamp(-3, w + 3);
        // Span ends are re-checked with the exact predicate; the interior is
        // at least two pixels from any edge crossing.
        let inner_lo = c_lo + 3;
        let inner_hi = c_hi - 3;
        for c in (c_lo - 2).max(0)..=(c_hi + 2).min(w - 1) {
            if c >= inner_lo && c <= inner_hi {
                continue;
            }
            if check(c, y) {
                out.set(row + c as usize, true);
            }
        }
        let s = inner_lo.max(0);
        let e = inner_hi.min(w - 1);
        if s <= e {
            out.set_range(row + s as usize, row + e as usize + 1);
        }
    }
}

/// Per-instance binary occupancy over `T x H x W`, frame-major then row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMaskStack {
    pub instance_id: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub bits: BitGrid,
}

pub const MASK_MAGIC: [u8; 4] = *b"IMSK";
pub const MASK_VERSION: u16 = 1;

impl PixelMaskStack {
    pub fn zeros(instance_id: u64, frames: usize, height: usize, width: usize) -> Self {
        Self {
            instance_id,
            frames,
            height,
            width,
            bits: BitGrid::zeros(frames * height * width),
        }
    }

    #[inline]
    pub fn get(&self, t: usize, r: usize, c: usize) -> bool {
        self.bits.get((t * self.height + r) * self.width + c)
    }

    pub fn frame_count(&self, t: usize) -> usize {
        let plane = self.height * self.width;
        self.bits.count_range(t * plane, (t + 1) * plane) as usize
    }

    /// 16-byte header (`IMSK`, version u16, T u16, H u32, W u32; little
    /// endian) followed by the LSB-first packed bits.
    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.bits.len().div_ceil(8));
        out.extend_from_slice(&MASK_MAGIC);
        out.extend_from_slice(&MASK_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.frames as u16).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&self.bits.to_bytes());
        out
    }

    pub fn from_binary(instance_id: u64, bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || bytes[..4] != MASK_MAGIC {
            return Err(Error::parse("mask stack", "missing IMSK header"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != MASK_VERSION {
            return Err(Error::parse("mask stack", format!("unsupported version {version}")));
        }
        let frames = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
        let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let width = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let bits = BitGrid::from_bytes(frames * height * width, &bytes[16..])
            .ok_or_else(|| Error::parse("mask stack", "payload length does not match header"))?;
        Ok(Self {
            instance_id,
            frames,
            height,
            width,
            bits,
        })
    }

    /// Binary PGM (P5) of one frame, 255 = covered.
    pub fn frame_pgm(&self, t: usize) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        for r in 0..self.height {
            for c in 0..self.width {
                out.push(if self.get(t, r, c) { 255 } else { 0 });
            }
        }
        out
    }
}

pub fn build_mask_stack(instance: &Instance, scene: &Scene, view_id: u32) -> Result<PixelMaskStack> {
    let d = scene.dims;
    let mut stack = PixelMaskStack::zeros(instance.tracking_id, d.frames, d.height, d.width);
    let plane = d.height * d.width;
    for t in 0..d.frames {
        let Some(corners) = instance.corners_at(t as u32) else {
            continue;
        };
        let corners = corners?;
        let cam = scene.camera(view_id, t as u32).ok_or_else(|| {
            Error::validation("cameras", format!("no camera for view {view_id}, frame {t}"))
        })?;
        let poly = hull_polygon(&corners, cam, instance.tracking_id);
        rasterize_into(&poly.vertices, d.height, d.width, &mut stack.bits, t * plane);
    }
    Ok(stack)
}

/// Mask stacks for every instance of the scene in ascending tracking-ID order.
/// Instances are rasterized in parallel; the result does not depend on
/// scheduling.
pub fn build_mask_stacks(scene: &Scene, view_id: u32) -> Result<Vec<PixelMaskStack>> {
    let order = scene.instance_order();
    order
        .par_iter()
        .map(|&id| build_mask_stack(scene.instance(id).expect("id from scene"), scene, view_id))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{corners_from_pose, Mat3};
    use proptest::prelude::*;

    fn identity_cam() -> CameraFrame {
        CameraFrame {
            intrinsics: Mat3::identity(),
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
            frame_index: 0,
            view_id: 0,
        }
    }

    fn poly(pts: &[(f64, f64)]) -> ProjectedPolygon {
        let v: Vec<Point2> = pts.iter().map(|&(x, y)| Point2::new(x, y)).collect();
        ProjectedPolygon {
            vertices: convex_hull(&v),
            frame_index: 0,
            instance_id: 1,
        }
    }

    /// Brute force over every pixel center.
    fn oracle(p: &ProjectedPolygon, h: usize, w: usize) -> Vec<bool> {
        let v = &p.vertices;
        let mut out = vec![false; h * w];
        if v.is_empty() {
            return out;
        }
        if v.len() < 3 || signed_area(v) < 1.0 {
            for q in v {
                let (c, r) = (q.x.floor(), q.y.floor());
                if c >= 0.0 && r >= 0.0 && (c as usize) < w && (r as usize) < h {
                    out[r as usize * w + c as usize] = true;
                }
            }
            return out;
        }
        for r in 0..h {
            for c in 0..w {
                let pc = Point2::new(c as f64 + 0.5, r as f64 + 0.5);
                let mut inside = true;
                for i in 0..v.len() {
                    let a = v[i];
                    let b = v[(i + 1) % v.len()];
                    if (b.x - a.x) * (pc.y - a.y) - (b.y - a.y) * (pc.x - a.x) < 0.0 {
                        inside = false;
                    }
                }
                out[r * w + c] = inside;
            }
        }
        out
    }

    fn as_vec(g: &BitGrid) -> Vec<bool> {
        (0..g.len()).map(|i| g.get(i)).collect()
    }

    #[test]
    fn identity_camera_projection() {
        let p = project_corner(&Vec3::new(0.5, -0.5, 2.0), &identity_cam());
        assert_eq!(p.pixel, Some(Point2::new(0.25, -0.25)));
        assert_eq!(p.depth, 2.0);
        let behind = project_corner(&Vec3::new(1.0, 1.0, 0.0), &identity_cam());
        assert!(behind.pixel.is_none());
    }

    #[test]
    fn intrinsic_projection_hand_computed() {
        let mut cam = identity_cam();
        cam.intrinsics = Mat3::new(100.0, 0.0, 64.0, 0.0, 100.0, 48.0, 0.0, 0.0, 1.0);
        let p = project_corner(&Vec3::new(1.0, 1.0, 10.0), &cam);
        // x = (100*1 + 64*10)/10, y = (100*1 + 48*10)/10
        assert_eq!(p.pixel, Some(Point2::new(74.0, 58.0)));
        assert_eq!(p.depth, 10.0);
    }

    #[test]
    fn hull_of_box_in_front() {
        let b = corners_from_pose(Vec3::new(1.0, 1.0, 1.0), Vec3::new(0.3, 0.2, 5.0), 0.0).unwrap();
        let p = hull_polygon(&b, &identity_cam(), 3);
        assert!((4..=6).contains(&p.vertices.len()), "{:?}", p.vertices);
        assert!(p.area() > 0.0);
        // Brute-force hull: a point is a hull vertex iff it is not inside the
        // hull of the others (corners are in general position here).
        let pts: Vec<Point2> = clipped_projection(&b, &identity_cam()).into_iter().map(|x| x.0).collect();
        let mut extreme = 0;
        for i in 0..pts.len() {
            let others: Vec<Point2> = pts.iter().enumerate().filter(|&(j, _)| j != i).map(|x| *x.1).collect();
            let h = convex_hull(&others);
            if !center_inside(&h, pts[i]) {
                extreme += 1;
            }
        }
        assert_eq!(extreme, p.vertices.len());
    }

    #[test]
    fn box_behind_camera_is_empty() {
        let b = corners_from_pose(Vec3::new(1.0, 1.0, 1.0), Vec3::new(0.0, 0.0, -5.0), 0.0).unwrap();
        assert!(hull_polygon(&b, &identity_cam(), 1).is_empty());
    }

    #[test]
    fn straddling_box_is_clipped() {
        let b = corners_from_pose(Vec3::new(1.0, 1.0, 4.0), Vec3::new(0.1, 0.1, 1.0), 0.3).unwrap();
        let pts = clipped_projection(&b, &identity_cam());
        assert!(pts.iter().all(|&(_, d)| d >= NEAR_EPS));
        assert!(pts.iter().any(|&(_, d)| d == NEAR_EPS));
        let poly = hull_polygon(&b, &identity_cam(), 1);
        for v in &poly.vertices {
            assert!(pts.iter().any(|(p, d)| p == v && *d >= NEAR_EPS));
        }
    }

    #[test]
    fn collinear_points_collapse() {
        let h = convex_hull(&[Point2::new(0.0, 0.0), Point2::new(1.0, 1.0), Point2::new(2.0, 2.0)]);
        assert_eq!(h, vec![Point2::new(0.0, 0.0), Point2::new(2.0, 2.0)]);
        let one = convex_hull(&[Point2::new(1.0, 1.0); 4]);
        assert_eq!(one.len(), 1);
    }

    #[test]
    fn square_on_four_by_four() {
        let p = poly(&[(1.0, 1.0), (3.0, 1.0), (3.0, 3.0), (1.0, 3.0)]);
        let g = rasterize(&p, 4, 4);
        let set: Vec<usize> = g.iter_ones().collect();
        assert_eq!(set, vec![5, 6, 9, 10]);
        assert_eq!(as_vec(&g), oracle(&p, 4, 4));
    }

    #[test]
    fn empty_and_saturated() {
        let e = ProjectedPolygon::empty(0, 1);
        assert_eq!(rasterize(&e, 5, 7).count_ones(), 0);
        let full = poly(&[(-1.0, -1.0), (8.0, -1.0), (8.0, 6.0), (-1.0, 6.0)]);
        assert_eq!(rasterize(&full, 5, 7).count_ones(), 35);
    }

    #[test]
    fn boundary_ties_are_inside() {
        // Edges pass exactly through pixel centers.
        let p = poly(&[(0.5, 0.5), (2.5, 0.5), (2.5, 2.5), (0.5, 2.5)]);
        let g = rasterize(&p, 4, 4);
        assert_eq!(g.count_ones(), 9);
        assert_eq!(as_vec(&g), oracle(&p, 4, 4));
    }

    #[test]
    fn tiny_polygon_marks_vertex_pixels() {
        let p = poly(&[(1.2, 1.2), (1.9, 1.3), (2.1, 1.8)]);
        let g = rasterize(&p, 4, 4);
        let set: Vec<usize> = g.iter_ones().collect();
        assert_eq!(set, vec![5, 6]);
        let seg = poly(&[(0.2, 0.2), (3.7, 0.2)]);
        assert_eq!(rasterize(&seg, 4, 4).iter_ones().collect::<Vec<_>>(), vec![0, 3]);
    }

    #[test]
    fn binary_round_trip_and_pgm() {
        let mut s = PixelMaskStack::zeros(4, 2, 3, 5);
        s.bits.set(7, true);
        s.bits.set(29, true);
        let back = PixelMaskStack::from_binary(4, &s.to_binary()).unwrap();
        assert_eq!(back, s);
        assert_eq!(&s.to_binary()[..4], b"IMSK");
        assert_eq!(s.to_binary().len(), 16 + 4);
        let pgm = s.frame_pgm(0);
        assert!(pgm.starts_with(b"P5\n5 3\n255\n"));
        assert_eq!(pgm.len(), 11 + 15);
        assert!(PixelMaskStack::from_binary(4, &s.to_binary()[..18]).is_err());
    }

    fn arb_points() -> impl Strategy<Value = Vec<(f64, f64)>> {
        proptest::collection::vec((-10.0f64..74.0, -10.0f64..74.0), 1..12)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn raster_matches_oracle(pts in arb_points(), h in 1usize..64, w in 1usize..64) {
            let p = poly(&pts);
            prop_assert_eq!(as_vec(&rasterize(&p, h, w)), oracle(&p, h, w));
        }

        #[test]
        fn raster_matches_oracle_on_half_grid(pts in proptest::collection::vec((0i32..40, 0i32..40), 1..8)) {
            // Half-integer vertices maximise exact ties with pixel centers.
            let p = poly(&pts.iter().map(|&(x, y)| (x as f64 / 2.0, y as f64 / 2.0)).collect::<Vec<_>>());
            prop_assert_eq!(as_vec(&rasterize(&p, 20, 20)), oracle(&p, 20, 20));
        }

        #[test]
        fn hull_is_convex_and_contains_input(pts in arb_points()) {
            let v: Vec<Point2> = pts.iter().map(|&(x, y)| Point2::new(x, y)).collect();
            let h = convex_hull(&v);
            if h.len() >= 3 {
                for i in 0..h.len() {
                    prop_assert!(cross(h[i], h[(i + 1) % h.len()], h[(i + 2) % h.len()]) > 0.0);
                }
                for q in &v {
                    prop_assert!(center_inside(&h, *q));
                }
            }
        }

        #[test]
        fn integer_translation_shifts_mask(pts in proptest::collection::vec((5.0f64..25.0, 5.0f64..25.0), 3..8),
                                           dx in -4i32..4, dy in -4i32..4) {
            let p = poly(&pts);
            let q = poly(&pts.iter().map(|&(x, y)| (x + dx as f64, y + dy as f64)).collect::<Vec<_>>());
            let a = rasterize(&p, 40, 40);
            let b = rasterize(&q, 40, 40);
            for r in 0..40i32 {
                for c in 0..40i32 {
                    let (r2, c2) = (r + dy, c + dx);
                    if (0..40).contains(&r2) && (0..40).contains(&c2) {
                        prop_assert_eq!(a.get((r * 40 + c) as usize), b.get((r2 * 40 + c2) as usize));
                    }
                }
            }
        }

        #[test]
        fn growing_box_never_clears_pixels(cx in -3.0f64..3.0, cy in -2.0f64..2.0, cz in 4.0f64..20.0,
                                           yaw in -3.1f64..3.1, grow in 1.0f64..2.0) {
            let mut cam = identity_cam();
            cam.intrinsics = Mat3::new(30.0, 0.0, 24.0, 0.0, 30.0, 16.0, 0.0, 0.0, 1.0);
            let size = Vec3::new(1.5, 1.0, 2.0);
            let small = corners_from_pose(size, Vec3::new(cx, cy, cz), yaw).unwrap();
            let big = corners_from_pose(size * grow, Vec3::new(cx, cy, cz), yaw).unwrap();
            let a = rasterize(&hull_polygon(&small, &cam, 1), 32, 48);
            let b = rasterize(&hull_polygon(&big, &cam, 1), 32, 48);
            let a_area = hull_polygon(&small, &cam, 1).area();
            // The vertex rule for sub-pixel hulls is not monotone in area.
            if a_area >= 1.0 {
                for i in a.iter_ones() {
                    prop_assert!(b.get(i));
                }
            }
        }
    }
}
