//! Scene description: cameras, tracked instances and grid dimensions.
//!
//! World frame convention used by the synthetic generator: x forward, y left,
//! z up. Camera frame: x right, y down, z along the optical axis. Instance yaw
//! rotates about the world z axis.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::CounterRng;

pub type Mat3 = Matrix3<f64>;
pub type Vec3 = Vector3<f64>;

pub const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct CameraFrame {
    pub intrinsics: Mat3,
    /// World-to-camera rotation.
    pub rotation: Mat3,
    /// World-to-camera translation (meters).
    pub translation: Vec3,
    pub frame_index: u32,
    pub view_id: u32,
}

impl CameraFrame {
    pub fn validate(&self) -> Result<()> {
        let ctx = |f: &str| format!("camera(view {}, frame {}).{f}", self.view_id, self.frame_index);
        let finite = self.intrinsics.iter().all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.translation.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::validation(ctx("*"), "non-finite entry"));
        }
        let k = &self.intrinsics;
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) {
            return Err(Error::validation(ctx("intrinsics"), "focal entries must be positive"));
        }
        if k[(2, 2)] != 1.0 {
            return Err(Error::validation(ctx("intrinsics"), "K[2][2] must equal 1"));
        }
        let err = (self.rotation.transpose() * self.rotation - Mat3::identity()).amax();
        if err > ORTHONORMAL_TOL {
            return Err(Error::validation(
                ctx("rotation"),
                format!("not orthonormal (max |R^T R - I| = {err:e})"),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub center: Vec3,
    /// Radians about the world vertical axis.
    pub yaw: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub tracking_id: u64,
    pub category: String,
    /// Full extents (dx, dy, dz) in meters.
    pub size: Vec3,
    /// Frame index -> pose. Missing frames mean absent or occluded.
    pub poses: BTreeMap<u32, Pose>,
}

impl Instance {
    pub fn corners_at(&self, frame: u32) -> Option<Result<BoxCorners3D>> {
        self.poses
            .get(&frame)
            .map(|p| corners_from_pose(self.size, p.center, p.yaw))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    #[serde(rename = "T")]
    pub frames: usize,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    pub f_t: usize,
    pub f_h: usize,
    pub f_w: usize,
}

impl Dims {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("dims.T", self.frames),
            ("dims.H", self.height),
            ("dims.W", self.width),
            ("dims.f_t", self.f_t),
            ("dims.f_h", self.f_h),
            ("dims.f_w", self.f_w),
        ] {
            if v == 0 {
                return Err(Error::validation(name, "must be >= 1"));
            }
        }
        for (a, b, n, f) in [
            ("dims.T", "dims.f_t", self.frames, self.f_t),
            ("dims.H", "dims.f_h", self.height, self.f_h),
            ("dims.W", "dims.f_w", self.width, self.f_w),
        ] {
            if n % f != 0 {
                return Err(Error::validation(
                    format!("{a}/{b}"),
                    format!("{a} = {n} is not divisible by {b} = {f}"),
                ));
            }
        }
        Ok(())
    }

    /// Latent grid `(T_c, H_c, W_c)`.
    pub fn latent(&self) -> LatentDims {
        LatentDims {
            frames: self.frames / self.f_t,
            height: self.height / self.f_h,
            width: self.width / self.f_w,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentDims {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl LatentDims {
    pub fn token_count(&self) -> usize {
        self.frames * self.height * self.width
    }

    /// Flattened token index `k = t*(H_c*W_c) + row*W_c + col`.
    pub fn token(&self, t: usize, row: usize, col: usize) -> usize {
        (t * self.height + row) * self.width + col
    }

    pub fn coords(&self, k: usize) -> (usize, usize, usize) {
        let plane = self.height * self.width;
        (k / plane, (k % plane) / self.width, k % self.width)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub dims: Dims,
    pub cameras: Vec<CameraFrame>,
    pub instances: Vec<Instance>,
}

impl Scene {
    pub fn new(dims: Dims, cameras: Vec<CameraFrame>, instances: Vec<Instance>) -> Result<Self> {
        let s = Self {
            dims,
            cameras,
            instances,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.cameras.is_empty() {
            return Err(Error::validation("cameras", "at least one camera is required"));
        }
        let mut seen = BTreeSet::new();
        for cam in &self.cameras {
            cam.validate()?;
            if cam.frame_index as usize >= self.dims.frames {
                return Err(Error::validation(
                    "cameras.frame_index",
                    format!("frame {} >= T = {}", cam.frame_index, self.dims.frames),
                ));
            }
            if !seen.insert((cam.view_id, cam.frame_index)) {
                return Err(Error::validation(
                    "cameras",
                    format!(
                        "duplicate camera for (view_id {}, frame_index {})",
                        cam.view_id, cam.frame_index
                    ),
                ));
            }
        }
        for view in self.view_ids() {
            for f in 0..self.dims.frames as u32 {
                if !seen.contains(&(view, f)) {
                    return Err(Error::validation(
                        "cameras",
                        format!("missing camera for (view_id {view}, frame_index {f})"),
                    ));
                }
            }
        }
        let mut ids = BTreeSet::new();
        for inst in &self.instances {
            let ctx = |f: &str| format!("instances[id {}].{f}", inst.tracking_id);
            if !ids.insert(inst.tracking_id) {
                return Err(Error::validation(
                    "instances.tracking_id",
                    format!("duplicate tracking_id {}", inst.tracking_id),
                ));
            }
            if inst.category.is_empty() {
                return Err(Error::validation(ctx("category"), "must be nonempty"));
            }
            if !inst.size.iter().all(|&v| v.is_finite() && v > 0.0) {
                return Err(Error::validation(ctx("size"), "components must be finite and > 0"));
            }
            for (&f, pose) in &inst.poses {
                if f as usize >= self.dims.frames {
                    return Err(Error::validation(
                        ctx("poses"),
                        format!("frame {f} >= T = {}", self.dims.frames),
                    ));
                }
                if !(pose.center.iter().all(|v| v.is_finite()) && pose.yaw.is_finite()) {
                    return Err(Error::validation(ctx("poses"), format!("non-finite pose at frame {f}")));
                }
            }
        }
        Ok(())
    }

    pub fn view_ids(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self.cameras.iter().map(|c| c.view_id).collect();
        set.into_iter().collect()
    }

    pub fn camera(&self, view_id: u32, frame: u32) -> Option<&CameraFrame> {
        self.cameras
            .iter()
            .find(|c| c.view_id == view_id && c.frame_index == frame)
    }

    /// Tracking IDs in ascending order; the layout of condition tokens.
    pub fn instance_order(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.instances.iter().map(|i| i.tracking_id).collect();
        ids.sort_unstable();
        ids
    }

    pub fn instance(&self, id: u64) -> Option<&Instance> {
        self.instances.iter().find(|i| i.tracking_id == id)
    }
}

/// Eight box corners. Corner `c` has x sign from bit 0, y sign from bit 1 and
/// z sign from bit 2 of `c` (bit clear = negative half-extent), in the box's
/// local frame before yaw and translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxCorners3D {
    pub corners: [Vec3; 8],
}

impl BoxCorners3D {
    /// The 12 edges as corner index pairs `(c, c | bit)`.
    pub fn edges() -> [(usize, usize); 12] {
        let mut out = [(0, 0); 12];
        let mut n = 0;
        for bit in [1, 2, 4] {
            for c in 0..8 {
                if c & bit == 0 {
                    out[n] = (c, c | bit);
                    n += 1;
                }
            }
        }
        out
    }

    /// Distance between the centroids of the two faces orthogonal to each
    /// local axis.
    pub fn extents(&self) -> Vec3 {
        let mut e = Vec3::zeros();
        for (axis, bit) in [1usize, 2, 4].into_iter().enumerate() {
            let mut lo = Vec3::zeros();
            let mut hi = Vec3::zeros();
            for c in 0..8 {
                if c & bit == 0 {
                    lo += self.corners[c];
                } else {
                    hi += self.corners[c];
                }
            }
            e[axis] = ((hi - lo) / 4.0).norm();
        }
        e
    }
}

pub fn corners_from_pose(size: Vec3, center: Vec3, yaw: f64) -> Result<BoxCorners3D> {
    if !size.iter().all(|&v| v.is_finite() && v > 0.0) {
        return Err(Error::validation("size", format!("components must be > 0, got {size:?}")));
    }
    let (s, c) = yaw.sin_cos();
    let half = size / 2.0;
    let mut corners = [Vec3::zeros(); 8];
    for (i, corner) in corners.iter_mut().enumerate() {
        let sign = |bit: usize| if i & bit == 0 { -1.0 } else { 1.0 };
        let lx = sign(1) * half.x;
        let ly = sign(2) * half.y;
        let lz = sign(4) * half.z;
        *corner = Vec3::new(c * lx - s * ly + center.x, s * lx + c * ly + center.y, lz + center.z);
    }
    Ok(BoxCorners3D { corners })
}

// --- synthetic generation -------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotionKind {
    Linear,
    Turning,
    /// Linear motion with the pose missing for a contiguous run of middle
    /// frames `[T/3, 2T/3)`, bracketed by frames where it is present.
    OccludedGap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSpec {
    pub dims: Dims,
    pub instances: usize,
    pub views: usize,
    /// Motion of instance `i` is `motions[i % len]`.
    pub motions: Vec<MotionKind>,
    /// Forces instance 0 to [`MotionKind::OccludedGap`].
    pub occlusion: bool,
    /// Ego forward speed in meters per frame.
    pub ego_speed: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            dims: Dims {
                frames: 8,
                height: 128,
                width: 224,
                f_t: 2,
                f_h: 16,
                f_w: 16,
            },
            instances: 4,
            views: 1,
            motions: vec![MotionKind::Linear, MotionKind::Turning],
            occlusion: false,
            ego_speed: 0.0,
        }
    }
}

const CAMERA_HEIGHT: f64 = 1.5;
const HFOV_DEG: f64 = 70.0;

/// The first `VEHICLES` entries of `CATEGORIES`.
const VEHICLES: usize = 3;
const CATEGORIES: [(&str, [f64; 3]); 5] = [
    ("car", [4.5, 1.9, 1.6]),
    ("truck", [7.5, 2.5, 3.0]),
    ("bus", [11.0, 2.9, 3.3]),
    ("pedestrian", [0.7, 0.7, 1.8]),
    ("bicycle", [1.8, 0.6, 1.4]),
];

/// Camera looking along world heading `heading` from `position`.
pub fn camera_looking(heading: f64, position: Vec3, intrinsics: Mat3, frame: u32, view: u32) -> CameraFrame {
    let axes = Mat3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
    let (s, c) = heading.sin_cos();
    let rz_inv = Mat3::new(c, s, 0.0, -s, c, 0.0, 0.0, 0.0, 1.0);
    let rotation = axes * rz_inv;
    CameraFrame {
        intrinsics,
        rotation,
        translation: -(rotation * position),
        frame_index: frame,
        view_id: view,
    }
}

pub fn generate_synthetic_scene(seed: u64, spec: &GeneratorSpec) -> Result<Scene> {
    spec.dims.validate()?;
    if spec.views == 0 {
        return Err(Error::validation("views", "must be >= 1"));
    }
    if spec.occlusion && spec.instances == 0 {
        return Err(Error::validation("instances", "occlusion requires at least one instance"));
    }
    let wants_gap = spec.occlusion || (spec.instances > 0 && spec.motions.contains(&MotionKind::OccludedGap));
    if wants_gap && spec.dims.frames < 3 {
        return Err(Error::validation("dims.T", "occluded-gap motion needs T >= 3"));
    }
    if !spec.ego_speed.is_finite() {
        return Err(Error::validation("ego_speed", "must be finite"));
    }

    let mut rng = CounterRng::new(seed);
    let d = spec.dims;
    let focal = 0.5 * d.width as f64 / (HFOV_DEG.to_radians() / 2.0).tan();
    let k = Mat3::new(focal, 0.0, d.width as f64 / 2.0, 0.0, focal, d.height as f64 / 2.0, 0.0, 0.0, 1.0);

    let mut cameras = Vec::with_capacity(spec.views * d.frames);
    for view in 0..spec.views {
        let heading = std::f64::consts::TAU * view as f64 / spec.views as f64;
        for t in 0..d.frames {
            let pos = Vec3::new(spec.ego_speed * t as f64, 0.0, CAMERA_HEIGHT);
            cameras.push(camera_looking(heading, pos, k, t as u32, view as u32));
        }
    }

    let motions = if spec.motions.is_empty() {
        vec![MotionKind::Linear]
    } else {
        spec.motions.clone()
    };
    let gap = (d.frames / 3) as u32..(2 * d.frames / 3) as u32;
    let mut next_id = 0u64;
    let mut instances = Vec::with_capacity(spec.instances);
    for i in 0..spec.instances {
        let motion = if spec.occlusion && i == 0 {
            MotionKind::OccludedGap
        } else {
            motions[i % motions.len()]
        };
        next_id += 1 + rng.below(4);
        let occluded = motion == MotionKind::OccludedGap;
        // Occluded instances are vehicles so they span latent cells on both
        // sides of the gap.
        let choices = if occluded { VEHICLES } else { CATEGORIES.len() };
        let (category, base) = CATEGORIES[rng.below(choices as u64) as usize];
        let size = Vec3::new(
            base[0] * rng.uniform_range(0.9, 1.1),
            base[1] * rng.uniform_range(0.9, 1.1),
            base[2] * rng.uniform_range(0.9, 1.1),
        );
        let x0 = if occluded { rng.uniform_range(7.0, 10.0) } else { rng.uniform_range(6.0, 30.0) };
        let y0 = if occluded { rng.uniform_range(-1.0, 1.0) } else { rng.uniform_range(-0.35, 0.35) * x0 };
        let mut yaw = rng.uniform_range(-std::f64::consts::PI, std::f64::consts::PI);
        let speed = if occluded { rng.uniform_range(0.0, 0.2) } else { rng.uniform_range(0.0, 0.8) };
        let yaw_rate = if motion == MotionKind::Turning { rng.uniform_range(-0.15, 0.15) } else { 0.0 };

        let mut center = Vec3::new(x0, y0, size.z / 2.0);
        let mut poses = BTreeMap::new();
        for t in 0..d.frames as u32 {
            if !(occluded && gap.contains(&t)) {
                poses.insert(t, Pose { center, yaw });
            }
            center += Vec3::new(speed * yaw.cos(), speed * yaw.sin(), 0.0);
            if occluded {
                // Lead vehicle: keeps pace with the ego camera.
                center.x += spec.ego_speed;
            }
            yaw += yaw_rate;
        }
        instances.push(Instance {
            tracking_id: next_id,
            category: category.to_string(),
            size,
            poses,
        });
    }
    Scene::new(d, cameras, instances)
}

// --- file format -------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    dims: Dims,
    cameras: Vec<CameraRecord>,
    instances: Vec<InstanceRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraRecord {
    view_id: u32,
    frame_index: u32,
    intrinsics: [[String; 3]; 3],
    rotation: [[String; 3]; 3],
    translation: [String; 3],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceRecord {
    tracking_id: u64,
    category: String,
    size: [String; 3],
    poses: Vec<PoseRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseRecord {
    frame: u32,
    center: [String; 3],
    yaw: String,
}

/// Shortest decimal text that parses back to the same `f64` bit pattern.
pub fn real_to_text(x: f64) -> String {
    format!("{x:?}")
}

pub fn real_from_text(s: &str, field: &str) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| Error::parse(field, format!("{s:?} is not a decimal real")))?;
    if !v.is_finite() {
        return Err(Error::parse(field, format!("{s:?} is not finite")));
    }
    Ok(v)
}

fn mat_text(m: &Mat3) -> [[String; 3]; 3] {
    std::array::from_fn(|r| std::array::from_fn(|c| real_to_text(m[(r, c)])))
}

fn vec_text(v: &Vec3) -> [String; 3] {
    std::array::from_fn(|i| real_to_text(v[i]))
}

fn mat_parse(m: &[[String; 3]; 3], field: &str) -> Result<Mat3> {
    let mut out = Mat3::zeros();
    for r in 0..3 {
        for c in 0..3 {
            out[(r, c)] = real_from_text(&m[r][c], &format!("{field}[{r}][{c}]"))?;
        }
    }
    Ok(out)
}

fn vec_parse(v: &[String; 3], field: &str) -> Result<Vec3> {
    let mut out = Vec3::zeros();
    for i in 0..3 {
        out[i] = real_from_text(&v[i], &format!("{field}[{i}]"))?;
    }
    Ok(out)
}

pub fn scene_to_string(scene: &Scene) -> String {
    let file = SceneFile {
        dims: scene.dims,
        cameras: scene
            .cameras
            .iter()
            .map(|c| CameraRecord {
                view_id: c.view_id,
                frame_index: c.frame_index,
                intrinsics: mat_text(&c.intrinsics),
                rotation: mat_text(&c.rotation),
                translation: vec_text(&c.translation),
            })
            .collect(),
        instances: scene
            .instances
            .iter()
            .map(|i| InstanceRecord {
                tracking_id: i.tracking_id,
                category: i.category.clone(),
                size: vec_text(&i.size),
                poses: i
                    .poses
                    .iter()
                    .map(|(&frame, p)| PoseRecord {
                        frame,
                        center: vec_text(&p.center),
                        yaw: real_to_text(p.yaw),
                    })
                    .collect(),
            })
            .collect(),
    };
    let mut s = serde_json::to_string_pretty(&file).expect("scene serialization is infallible");
    s.push('\n');
    s
}

pub fn scene_from_str(text: &str) -> Result<Scene> {
    let file: SceneFile =
        serde_json::from_str(text).map_err(|e| Error::parse("scene file", e.to_string()))?;
    let mut cameras = Vec::with_capacity(file.cameras.len());
    for (n, c) in file.cameras.iter().enumerate() {
        cameras.push(CameraFrame {
            intrinsics: mat_parse(&c.intrinsics, &format!("cameras[{n}].intrinsics"))?,
            rotation: mat_parse(&c.rotation, &format!("cameras[{n}].rotation"))?,
            translation: vec_parse(&c.translation, &format!("cameras[{n}].translation"))?,
            frame_index: c.frame_index,
            view_id: c.view_id,
        });
    }
    let mut instances = Vec::with_capacity(file.instances.len());
    for (n, i) in file.instances.iter().enumerate() {
        let mut poses = BTreeMap::new();
        for (p_n, p) in i.poses.iter().enumerate() {
            let field = format!("instances[{n}].poses[{p_n}]");
            let pose = Pose {
                center: vec_parse(&p.center, &format!("{field}.center"))?,
                yaw: real_from_text(&p.yaw, &format!("{field}.yaw"))?,
            };
            if poses.insert(p.frame, pose).is_some() {
                return Err(Error::parse(field, format!("duplicate pose for frame {}", p.frame)));
            }
        }
        instances.push(Instance {
            tracking_id: i.tracking_id,
            category: i.category.clone(),
            size: vec_parse(&i.size, &format!("instances[{n}].size"))?,
            poses,
        });
    }
    Scene::new(file.dims, cameras, instances)
}

pub fn save_scene(scene: &Scene, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, scene_to_string(scene)).map_err(|e| Error::io(path, e))
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    scene_from_str(&text).map_err(|e| match e {
        Error::Parse { context, message } => Error::parse(format!("{}: {context}", path.display()), message),
        other => other,
    })
}
