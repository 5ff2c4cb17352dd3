//! Scene to mask artifacts, plus the manifest that hashes them.
//!
//! Layout under the output directory, for every view `v`:
//!
//! ```text
//! view{v}/masks/inst{id}.bin        pixel mask stack (binary)
//! view{v}/pgm/inst{id}_f{t}.pgm     one PGM per frame
//! view{v}/latent/inst{id}.json      block counts and binarized cells
//! ```
//!
//! and per mask group (`view{v}/` in independent mode, `joint/` when views are
//! concatenated): `indicator.json`, `attention.sparse.json`,
//! `attention.dense.bin`, `loss_mask.json`. `manifest.json` lists every other
//! file, sorted by path, with its size and SHA-256.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{build_mask_stacks, PixelMaskStack};
use crate::latent::{build_indicator, downsample_trilinear, latent_mask_to_json, IndicatorIndex, LatentMask, DEFAULT_THETA};
use crate::masks::{build_loss_mask, build_sparse_mask, AttentionMask, BackgroundPolicy, ConditionBlockMode, LossMask};
use crate::scene::Scene;

pub const THREADS_ENV: &str = "CONSIS_MASK_THREADS";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViewMode {
    /// One token sequence and mask per view.
    #[default]
    Independent,
    /// Views concatenated into a single token sequence, view-major.
    Concatenated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MaskConfig {
    pub theta: f64,
    pub policy: BackgroundPolicy,
    pub condition_block: ConditionBlockMode,
    pub view_mode: ViewMode,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            theta: DEFAULT_THETA,
            policy: BackgroundPolicy::default(),
            condition_block: ConditionBlockMode::default(),
            view_mode: ViewMode::default(),
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.theta) {
            return Err(Error::validation("theta", format!("{} outside [0, 1)", self.theta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewMasks {
    pub view_id: u32,
    pub stacks: Vec<PixelMaskStack>,
    pub latents: Vec<LatentMask>,
    pub indicator: IndicatorIndex,
}

/// One attention sequence: a single view, or all views concatenated.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskGroup {
    pub name: String,
    pub view_ids: Vec<u32>,
    pub indicator: IndicatorIndex,
    pub instance_order: Vec<u64>,
    pub attention: AttentionMask,
    pub loss: LossMask,
}

pub fn build_view_masks(scene: &Scene, view_id: u32, theta: f64) -> Result<ViewMasks> {
    let d = scene.dims;
    let stacks = build_mask_stacks(scene, view_id)?;
    let latents = stacks
        .par_iter()
        .map(|s| downsample_trilinear(s, (d.f_t, d.f_h, d.f_w), theta))
        .collect::<Result<Vec<_>>>()?;
    let indicator = build_indicator(&latents, d.latent())?;
    Ok(ViewMasks {
        view_id,
        stacks,
        latents,
        indicator,
    })
}

pub fn build_groups(scene: &Scene, views: &[ViewMasks], cfg: &MaskConfig) -> Result<Vec<MaskGroup>> {
    let order = scene.instance_order();
    let group = |name: String, view_ids: Vec<u32>, indicator: IndicatorIndex| -> Result<MaskGroup> {
        let attention = build_sparse_mask(&indicator, &order, cfg.policy, cfg.condition_block)?;
        Ok(MaskGroup {
            name,
            view_ids,
            loss: build_loss_mask(&indicator),
            indicator,
            instance_order: order.clone(),
            attention,
        })
    };
    match cfg.view_mode {
        ViewMode::Independent => views
            .iter()
            .map(|v| group(format!("view{}", v.view_id), vec![v.view_id], v.indicator.clone()))
            .collect(),
        ViewMode::Concatenated => {
            let parts: Vec<IndicatorIndex> = views.iter().map(|v| v.indicator.clone()).collect();
            let ids = views.iter().map(|v| v.view_id).collect();
            Ok(vec![group("joint".into(), ids, IndicatorIndex::concat(&parts))?])
        }
    }
}

/// Views in ascending ID order and their mask groups.
pub fn build_scene_masks(scene: &Scene, cfg: &MaskConfig) -> Result<(Vec<ViewMasks>, Vec<MaskGroup>)> {
    cfg.validate()?;
    scene.validate()?;
    let views = scene
        .view_ids()
        .into_iter()
        .map(|v| build_view_masks(scene, v, cfg.theta))
        .collect::<Result<Vec<_>>>()?;
    let groups = build_groups(scene, &views, cfg)?;
    Ok((views, groups))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifact {
    /// Relative, `/`-separated.
    pub path: String,
    pub bytes: Vec<u8>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub theta: f64,
    pub policy: BackgroundPolicy,
    pub condition_block: ConditionBlockMode,
    pub view_mode: ViewMode,
    pub instance_order: Vec<u64>,
    pub artifacts: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse("manifest", e.to_string()))
    }
}

/// Every artifact for `scene`, sorted by path, manifest last.
pub fn render_artifacts(scene: &Scene, cfg: &MaskConfig) -> Result<Vec<Artifact>> {
    let (views, groups) = build_scene_masks(scene, cfg)?;
    let mut out = Vec::new();
    for v in &views {
        let dir = format!("view{}", v.view_id);
        for s in &v.stacks {
            out.push(Artifact {
                path: format!("{dir}/masks/inst{}.bin", s.instance_id),
                bytes: s.to_binary(),
            });
            for t in 0..s.frames {
                out.push(Artifact {
                    path: format!("{dir}/pgm/inst{}_f{t}.pgm", s.instance_id),
                    bytes: s.frame_pgm(t),
                });
            }
        }
        for l in &v.latents {
            out.push(Artifact {
                path: format!("{dir}/latent/inst{}.json", l.instance_id),
                bytes: latent_mask_to_json(l).into_bytes(),
            });
        }
    }
    for g in &groups {
        let dir = &g.name;
        out.push(Artifact {
            path: format!("{dir}/indicator.json"),
            bytes: g.indicator.to_json().into_bytes(),
        });
        out.push(Artifact {
            path: format!("{dir}/attention.sparse.json"),
            bytes: g.attention.to_sparse_json().into_bytes(),
        });
        out.push(Artifact {
            path: format!("{dir}/attention.dense.bin"),
            bytes: g.attention.to_dense_binary(),
        });
        out.push(Artifact {
            path: format!("{dir}/loss_mask.json"),
            bytes: g.loss.to_json().into_bytes(),
        });
    }
    out.sort_by(|a, b| a.path.cmp(&b.path));
    let manifest = Manifest {
        version: 1,
        theta: cfg.theta,
        policy: cfg.policy,
        condition_block: cfg.condition_block,
        view_mode: cfg.view_mode,
        instance_order: scene.instance_order(),
        artifacts: out
            .iter()
            .map(|a| ManifestEntry {
                path: a.path.clone(),
                bytes: a.bytes.len(),
                sha256: sha256_hex(&a.bytes),
            })
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("infallible");
    text.push('\n');
    out.push(Artifact {
        path: MANIFEST_FILE.into(),
        bytes: text.into_bytes(),
    });
    Ok(out)
}

pub fn write_artifacts(dir: impl AsRef<Path>, artifacts: &[Artifact]) -> Result<()> {
    let dir = dir.as_ref();
    for a in artifacts {
        let path = dir.join(&a.path);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, &a.bytes).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Re-hashes every manifest entry under `dir`; returns the mismatching paths.
pub fn verify_manifest(dir: impl AsRef<Path>) -> Result<Vec<String>> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest = Manifest::from_json(&text)?;
    let mut bad = Vec::new();
    for e in &manifest.artifacts {
        match fs::read(dir.join(&e.path)) {
            Ok(b) if b.len() == e.bytes && sha256_hex(&b) == e.sha256 => {}
            _ => bad.push(e.path.clone()),
        }
    }
    Ok(bad)
}

/// Parses a thread cap; `None` or empty means no cap.
pub fn parse_thread_cap(value: Option<&str>) -> Result<Option<usize>> {
    match value.map(str::trim) {
        None | Some("") => Ok(None),
        Some(s) => match s.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(Error::validation(THREADS_ENV, format!("{s:?} is not a positive integer"))),
        },
    }
}

pub fn thread_cap_from_env() -> Result<Option<usize>> {
    parse_thread_cap(std::env::var(THREADS_ENV).ok().as_deref())
}

/// Runs `f` on a dedicated pool of at most `cap` threads, or on the global
/// pool when `cap` is `None`.
pub fn with_thread_cap<R: Send>(cap: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    match cap {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::validation(THREADS_ENV, e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_synthetic_scene, GeneratorSpec};

    fn small_spec(views: usize) -> GeneratorSpec {
        let mut spec = GeneratorSpec::default();
        spec.dims.frames = 4;
        spec.dims.height = 64;
        spec.dims.width = 96;
        spec.views = views;
        spec
    }

    #[test]
    fn artifacts_are_thread_count_independent() {
        let s = generate_synthetic_scene(7, &small_spec(2)).unwrap();
        let cfg = MaskConfig::default();
        let a = with_thread_cap(Some(1), || render_artifacts(&s, &cfg)).unwrap().unwrap();
        let b = with_thread_cap(Some(4), || render_artifacts(&s, &cfg)).unwrap().unwrap();
        assert_eq!(a, b);
        let paths: Vec<&str> = a.iter().map(|x| x.path.as_str()).collect();
        assert!(paths.contains(&"view1/indicator.json"));
        assert_eq!(paths.last(), Some(&MANIFEST_FILE));
    }

    #[test]
    fn concatenated_mode_has_one_group() {
        let s = generate_synthetic_scene(3, &small_spec(2)).unwrap();
        let cfg = MaskConfig {
            view_mode: ViewMode::Concatenated,
            ..MaskConfig::default()
        };
        let (views, groups) = build_scene_masks(&s, &cfg).unwrap();
        assert_eq!(groups.len(), 1);
        let m: usize = views.iter().map(|v| v.indicator.token_count()).sum();
        assert_eq!(groups[0].attention.m(), m);
        assert_eq!(groups[0].view_ids, vec![0, 1]);
    }

    #[test]
    fn manifest_round_trip_and_verification() {
        let s = generate_synthetic_scene(5, &small_spec(1)).unwrap();
        let arts = render_artifacts(&s, &MaskConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_artifacts(dir.path(), &arts).unwrap();
        assert!(verify_manifest(dir.path()).unwrap().is_empty());
        fs::write(dir.path().join("view0/loss_mask.json"), b"{}").unwrap();
        assert_eq!(verify_manifest(dir.path()).unwrap(), vec!["view0/loss_mask.json".to_string()]);
    }

    #[test]
    fn thread_cap_parsing() {
        assert_eq!(parse_thread_cap(None).unwrap(), None);
        assert_eq!(parse_thread_cap(Some("3")).unwrap(), Some(3));
        assert!(parse_thread_cap(Some("0")).is_err());
        assert!(parse_thread_cap(Some("x")).is_err());
    }

    #[test]
    fn zero_instances_give_empty_blocks() {
        let mut s = generate_synthetic_scene(1, &small_spec(1)).unwrap();
        s.instances.clear();
        let (_, groups) = build_scene_masks(&s, &MaskConfig::default()).unwrap();
        let g = &groups[0];
        assert_eq!(g.attention.n(), 0);
        assert!(g.indicator.forward().iter().all(Vec::is_empty));
        assert_eq!(g.loss.selected(), 0);
    }

    #[test]
    fn theta_is_validated() {
        let s = generate_synthetic_scene(1, &small_spec(1)).unwrap();
        let cfg = MaskConfig {
            theta: 1.0,
            ..MaskConfig::default()
        };
        assert!(render_artifacts(&s, &cfg).unwrap_err().is_validation());
    }
}
