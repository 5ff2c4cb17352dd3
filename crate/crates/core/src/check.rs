//! Property suites run by `instmask check`.
//!
//! Each suite compares the optimized code paths against [`crate::oracle`] or
//! against closed-form values, and reports one [`CheckResult`] per property.
//! The `tamper` suite validates an externally supplied attention-mask file
//! against the structural invariants and against the seed-7 fixture.

use std::fmt;
use std::fs;
use std::path::PathBuf;
use std::str::FromStr;

use serde::Serialize;

use crate::attention::{gated_fuse, masked_softmax, masked_softmax_backward, sa_mask_detailed, AttentionParams, Matrix, TokenMatrix};
use crate::conditioning::{build_condition_set, condition_tokens, MlpParams, DEFAULT_FREQUENCIES, DEFAULT_HIDDEN, DEFAULT_TEXT_DIM};
use crate::diffusion::{
    dynamic_loss, forward_noise, global_loss, gradient_restriction_check, masked_loss, per_token_loss, Branch, LossMap,
    NoiseSchedule, Reduction, ToyDenoiser,
};
use crate::error::{Error, Result};
use crate::geometry::{center_inside, convex_hull, rasterize_into, signed_area, Point2};
use crate::latent::IndicatorIndex;
use crate::masks::{
    build_attention_mask, build_loss_mask, build_sparse_mask, AttentionMask, BackgroundPolicy, ConditionBlockMode,
    DENSE_MAGIC,
};
use crate::oracle;
use crate::pipeline::{build_scene_masks, build_view_masks, MaskConfig};
use crate::rng::CounterRng;
use crate::scene::{generate_synthetic_scene, GeneratorSpec, Scene};
use crate::bits::BitGrid;

pub const FIXTURE_SEED: u64 = 7;
pub const LEAKAGE_TOL: f64 = 1e-6;
pub const ORACLE_TOL: f64 = 1e-10;
pub const ROW_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Rasterization,
    Masks,
    Leakage,
    Softmax,
    Schedule,
    Loss,
    Tamper,
}

impl Suite {
    /// Suites run when no filter is given; `tamper` needs an input file.
    pub const DEFAULT: [Suite; 6] = [
        Suite::Rasterization,
        Suite::Masks,
        Suite::Leakage,
        Suite::Softmax,
        Suite::Schedule,
        Suite::Loss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Rasterization => "rasterization",
            Suite::Masks => "masks",
            Suite::Leakage => "leakage",
            Suite::Softmax => "softmax",
            Suite::Schedule => "schedule",
            Suite::Loss => "loss",
            Suite::Tamper => "tamper",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::DEFAULT
            .into_iter()
            .chain([Suite::Tamper])
            .find(|x| x.name() == s)
            .ok_or_else(|| {
                Error::validation(
                    "suite",
                    format!("{s:?} is not one of rasterization, masks, leakage, softmax, schedule, loss, tamper"),
                )
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub suite: Suite,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

impl CheckReport {
    pub fn new(checks: Vec<CheckResult>) -> Self {
        Self {
            passed: checks.iter().all(|c| c.passed),
            checks,
        }
    }

    pub fn failed(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("infallible");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, Default)]
pub struct CheckOptions {
    /// Empty means [`Suite::DEFAULT`], plus `tamper` when a file is given.
    pub suites: Vec<Suite>,
    pub tamper: Option<PathBuf>,
}

pub fn run_checks(opts: &CheckOptions) -> Result<CheckReport> {
    let mut suites = if opts.suites.is_empty() {
        let mut s = Suite::DEFAULT.to_vec();
        if opts.tamper.is_some() {
            s.push(Suite::Tamper);
        }
        s
    } else {
        opts.suites.clone()
    };
    suites.sort();
    suites.dedup();
    let mut checks = Vec::new();
    for suite in suites {
        checks.extend(match suite {
            Suite::Rasterization => rasterization_suite()?,
            Suite::Masks => masks_suite()?,
            Suite::Leakage => leakage_suite()?,
            Suite::Softmax => softmax_suite()?,
            Suite::Schedule => schedule_suite()?,
            Suite::Loss => loss_suite()?,
            Suite::Tamper => {
                let path = opts
                    .tamper
                    .as_ref()
                    .ok_or_else(|| Error::validation("tamper", "the tamper suite needs a mask file"))?;
                tamper_suite(path)?
            }
        });
    }
    Ok(CheckReport::new(checks))
}

fn result(suite: Suite, name: &str, passed: bool, detail: impl Into<String>) -> CheckResult {
    CheckResult {
        suite,
        name: name.into(),
        passed,
        detail: detail.into(),
    }
}

// Fixtures and random generators shared with the tests.

pub fn fixture_scene() -> Scene {
    generate_synthetic_scene(FIXTURE_SEED, &GeneratorSpec::default()).expect("default spec is valid")
}

/// Convex polygon: hull of 1..=12 random points around an `h x w` grid.
/// Roughly one in eight is shrunk below unit area.
pub fn random_convex_polygon(rng: &mut CounterRng, height: usize, width: usize) -> Vec<Point2> {
    let n = 1 + rng.below(12) as usize;
    let (cx, cy) = (rng.uniform_range(-2.0, width as f64 + 2.0), rng.uniform_range(-2.0, height as f64 + 2.0));
    let spread = if rng.below(8) == 0 { 0.8 } else { rng.uniform_range(1.0, (height.max(width) as f64) * 0.75) };
    let snap = rng.below(3) == 0;
    let pts: Vec<Point2> = (0..n)
        .map(|_| {
            let (mut x, mut y) = (cx + rng.uniform_range(-spread, spread), cy + rng.uniform_range(-spread, spread));
            if snap {
                // Half-integer coordinates put edges exactly through pixel centers.
                x = (x * 2.0).round() / 2.0;
                y = (y * 2.0).round() / 2.0;
            }
            Point2::new(x, y)
        })
        .collect();
    convex_hull(&pts)
}

/// Random indicator over `m` tokens: each token is background with
/// probability 0.4, otherwise covered by one to three of `ids`.
pub fn random_indicator(rng: &mut CounterRng, m: usize, ids: &[u64]) -> IndicatorIndex {
    let forward = (0..m)
        .map(|_| {
            if ids.is_empty() || rng.uniform() < 0.4 {
                return Vec::new();
            }
            let count = 1 + rng.below(3) as usize;
            (0..count).map(|_| ids[rng.below(ids.len() as u64) as usize]).collect()
        })
        .collect();
    IndicatorIndex::from_sets(forward)
}

/// `n` distinct sorted IDs drawn from `0..64`.
pub fn random_ids(rng: &mut CounterRng, n: usize) -> Vec<u64> {
    let mut ids = Vec::with_capacity(n);
    while ids.len() < n {
        let id = rng.below(64);
        if !ids.contains(&id) {
            ids.push(id);
        }
    }
    ids.sort_unstable();
    ids
}

pub fn random_tokens(rng: &mut CounterRng, rows: usize, cols: usize) -> Matrix<f64> {
    Matrix::random_normal(rows, cols, 1.0, rng)
}

// Rasterization.

/// Polygons whose rasterization disagreed with the center-in-polygon oracle.
pub fn rasterization_mismatches(count: usize, max_side: usize, seed: u64) -> Vec<usize> {
    let mut rng = CounterRng::new(seed);
    let mut bad = Vec::new();
    for case in 0..count {
        let h = 1 + rng.below(max_side as u64) as usize;
        let w = 1 + rng.below(max_side as u64) as usize;
        let poly = random_convex_polygon(&mut rng, h, w);
        let mut grid = BitGrid::zeros(h * w);
        rasterize_into(&poly, h, w, &mut grid, 0);
        let want = oracle::raster(&poly, h, w);
        if (0..h * w).any(|i| grid.get(i) != want[i]) {
            bad.push(case);
        }
    }
    bad
}

fn rasterization_suite() -> Result<Vec<CheckResult>> {
    let s = Suite::Rasterization;
    let mut out = Vec::new();
    let bad = rasterization_mismatches(500, 64, 0x5241);
    out.push(result(s, "center-in-polygon-oracle", bad.is_empty(), format!("500 polygons, mismatching cases {bad:?}")));

    let mut rng = CounterRng::new(0x48554c);
    let mut hull_bad = 0;
    for _ in 0..300 {
        let n = 1 + rng.below(16) as usize;
        let pts: Vec<Point2> = (0..n).map(|_| Point2::new(rng.uniform_range(-50.0, 50.0), rng.uniform_range(-50.0, 50.0))).collect();
        let hull = convex_hull(&pts);
        let ok = if hull.len() >= 3 {
            signed_area(&hull) > 0.0 && pts.iter().all(|&p| center_inside(&hull, p) || near_hull(&hull, p))
        } else {
            true
        };
        let same = hull == oracle::hull_by_gift_wrapping(&pts) || hull.len() < 3;
        if !(ok && same) {
            hull_bad += 1;
        }
    }
    out.push(result(s, "hull-convex-and-covering", hull_bad == 0, format!("300 point sets, {hull_bad} bad")));

    let scene = fixture_scene();
    let built = build_view_masks(&scene, 0, crate::latent::DEFAULT_THETA)?.indicator;
    let reference = oracle::indicator(&scene, 0, crate::latent::DEFAULT_THETA)?;
    out.push(result(
        s,
        "fixture-indicator-oracle",
        built == reference,
        format!("{} tokens, {} covered instances", built.token_count(), built.covered_instances().count()),
    ));
    Ok(out)
}

fn near_hull(hull: &[Point2], p: Point2) -> bool {
    let n = hull.len();
    (0..n).all(|i| crate::geometry::cross(hull[i], hull[(i + 1) % n], p) >= -1e-9)
}

// Masks.

/// Definitional re-derivation of the dense and blocked masks and the loss mask.
pub fn mask_definition_mismatch(
    idx: &IndicatorIndex,
    order: &[u64],
    policy: BackgroundPolicy,
    mode: ConditionBlockMode,
) -> Result<Option<String>> {
    let dense = build_attention_mask(idx, order, policy, mode)?;
    let blocked = build_sparse_mask(idx, order, policy, mode)?;
    for (name, mask) in [("dense", &dense), ("blocked", &blocked)] {
        if let Some((r, c)) = oracle::first_mask_mismatch(mask, idx, order, policy, mode) {
            return Ok(Some(format!("{name} mask differs at ({r},{c})")));
        }
    }
    let loss = build_loss_mask(idx);
    if let Some(k) = (0..idx.token_count()).find(|&k| loss.weights[k] != oracle::loss_weight(idx, k)) {
        return Ok(Some(format!("loss mask differs at {k}")));
    }
    Ok(None)
}

/// Cross-gap pair counts for every instance with a pose gap, or the first
/// masked pair.
pub fn occlusion_connectivity(scene: &Scene, cfg: &MaskConfig) -> Result<std::result::Result<usize, String>> {
    let (_, groups) = build_scene_masks(scene, &MaskConfig { view_mode: crate::pipeline::ViewMode::Independent, ..*cfg })?;
    let d = scene.dims;
    let ld = d.latent();
    let mut pairs = 0usize;
    for inst in &scene.instances {
        let present: Vec<u32> = inst.poses.keys().copied().collect();
        let Some(w) = present.windows(2).find(|w| w[1] > w[0] + 1) else { continue };
        let (gap_start, gap_end) = (w[0] as usize + 1, w[1] as usize);
        for g in &groups {
            let toks = g.indicator.tokens_of(inst.tracking_id);
            let frame = |k: usize| ld.coords(k % ld.token_count()).0;
            let before: Vec<usize> = toks.iter().copied().filter(|&k| (frame(k) + 1) * d.f_t <= gap_start).collect();
            let after: Vec<usize> = toks.iter().copied().filter(|&k| frame(k) * d.f_t >= gap_end).collect();
            for &a in &before {
                for &b in &after {
                    if !g.attention.is_open(a, b) || !g.attention.is_open(b, a) {
                        return Ok(Err(format!("instance {} tokens {a} and {b} are masked", inst.tracking_id)));
                    }
                    pairs += 1;
                }
            }
        }
    }
    Ok(Ok(pairs))
}

fn masks_suite() -> Result<Vec<CheckResult>> {
    let s = Suite::Masks;
    let mut out = Vec::new();
    let scene = fixture_scene();
    let order = scene.instance_order();
    let idx = build_view_masks(&scene, 0, crate::latent::DEFAULT_THETA)?.indicator;
    let mut rng = CounterRng::new(0x4d41534b);
    for policy in [BackgroundPolicy::ForegroundOnly, BackgroundPolicy::Strict] {
        let mut first = None;
        let mut cases = 1;
        if let Some(e) = mask_definition_mismatch(&idx, &order, policy, ConditionBlockMode::IdentityOnly)? {
            first = Some(format!("fixture: {e}"));
        }
        for case in 0..20 {
            let n = rng.below(9) as usize;
            let ids = random_ids(&mut rng, n);
            let m = 1 + rng.below(96) as usize;
            let ri = random_indicator(&mut rng, m, &ids);
            let mode = if case % 2 == 0 { ConditionBlockMode::IdentityOnly } else { ConditionBlockMode::AllOpen };
            cases += 1;
            if let Some(e) = mask_definition_mismatch(&ri, &ids, policy, mode)? {
                first.get_or_insert(format!("case {case}: {e}"));
            }
        }
        let name = match policy {
            BackgroundPolicy::ForegroundOnly => "definition-foreground-only",
            BackgroundPolicy::Strict => "definition-strict",
        };
        out.push(result(s, name, first.is_none(), first.unwrap_or(format!("{cases} indicators exact"))));
    }

    let blocked = build_sparse_mask(&idx, &order, BackgroundPolicy::default(), ConditionBlockMode::default())?;
    let v = blocked.violations();
    out.push(result(s, "structural-invariants", v.is_empty(), if v.is_empty() { "none violated".into() } else { v.join("; ") }));

    let reparsed = AttentionMask::from_sparse_json(&blocked.to_sparse_json())?;
    let rebin = AttentionMask::from_dense_binary(&blocked.to_dense_binary())?;
    let ok = reparsed.entrywise_eq(&blocked) && rebin.entrywise_eq(&blocked);
    out.push(result(s, "export-round-trip", ok, "sparse JSON and dense binary"));

    let mut detail = Vec::new();
    let mut ok = true;
    for seed in 0..5u64 {
        let spec = GeneratorSpec {
            occlusion: true,
            ..GeneratorSpec::default()
        };
        let sc = generate_synthetic_scene(seed, &spec)?;
        for policy in [BackgroundPolicy::ForegroundOnly, BackgroundPolicy::Strict] {
            match occlusion_connectivity(&sc, &MaskConfig { policy, ..MaskConfig::default() })? {
                Ok(0) => {
                    ok = false;
                    detail.push(format!("seed {seed}: no cross-gap pairs"));
                }
                Ok(p) => detail.push(format!("seed {seed} {policy:?}: {p} pairs")),
                Err(e) => {
                    ok = false;
                    detail.push(format!("seed {seed}: {e}"));
                }
            }
        }
    }
    out.push(result(s, "occlusion-connectivity", ok, detail.join("; ")));
    Ok(out)
}

// Leakage.

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LeakageStats {
    /// Max finite-difference sensitivity of visual rows to non-covering
    /// condition tokens.
    pub identity_max: f64,
    pub identity_pairs: usize,
    /// Same for disjoint-instance visual tokens.
    pub trajectory_max: f64,
    pub trajectory_pairs: usize,
    /// Max |weight| on a masked entry, over all heads.
    pub masked_weight_max: f64,
}

impl LeakageStats {
    pub fn passed(&self) -> bool {
        self.identity_max < LEAKAGE_TOL && self.trajectory_max < LEAKAGE_TOL && self.masked_weight_max == 0.0
    }

    pub fn merge(&mut self, o: &LeakageStats) {
        self.identity_max = self.identity_max.max(o.identity_max);
        self.identity_pairs += o.identity_pairs;
        self.trajectory_max = self.trajectory_max.max(o.trajectory_max);
        self.trajectory_pairs += o.trajectory_pairs;
        self.masked_weight_max = self.masked_weight_max.max(o.masked_weight_max);
    }
}

fn row_sensitivity(plus: &Matrix<f64>, minus: &Matrix<f64>, k: usize, h: f64) -> f64 {
    plus.row(k)
        .iter()
        .zip(minus.row(k))
        .map(|(a, b)| (a - b).abs() / (2.0 * h))
        .fold(0.0, f64::max)
}

/// Central-difference probe of a single attention layer.
///
/// Every condition token is perturbed along a random direction, and the
/// sensitivity of each visual row `k` with `id_i ∉ I(v_k)` is recorded. Up to
/// `visual_probes` foreground visual tokens `j` are perturbed likewise, and
/// rows `k` whose trajectory entry with `j` is masked by definition are
/// recorded.
#[allow(clippy::too_many_arguments)]
pub fn leakage_probe(
    v: &TokenMatrix<f64>,
    g: &TokenMatrix<f64>,
    params: &AttentionParams<f64>,
    idx: &IndicatorIndex,
    order: &[u64],
    policy: BackgroundPolicy,
    mode: ConditionBlockMode,
    visual_probes: usize,
    rng: &mut CounterRng,
) -> Result<LeakageStats> {
    let mask = build_sparse_mask(idx, order, policy, mode)?;
    let m = v.rows();
    let base = sa_mask_detailed(v, g, &mask, params)?;
    let mut stats = LeakageStats::default();
    for w in &base.weights {
        for r in 0..w.rows {
            for c in 0..w.cols {
                if !mask.is_open(r, c) {
                    stats.masked_weight_max = stats.masked_weight_max.max(w.get(r, c).abs());
                }
            }
        }
    }
    let h = 1e-4;
    let d = v.cols();
    let shifted = |t: &TokenMatrix<f64>, row: usize, dir: &[f64], s: f64| {
        let mut t = t.clone();
        for (x, e) in t.values.row_mut(row).iter_mut().zip(dir) {
            *x += s * e;
        }
        t
    };
    for i in 0..g.rows() {
        let dir: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let plus = sa_mask_detailed(v, &shifted(g, i, &dir, h), &mask, params)?.output.values;
        let minus = sa_mask_detailed(v, &shifted(g, i, &dir, -h), &mask, params)?.output.values;
        for k in (0..m).filter(|&k| !oracle::identity_open(idx, order, k, i)) {
            stats.identity_max = stats.identity_max.max(row_sensitivity(&plus, &minus, k, h));
            stats.identity_pairs += 1;
        }
    }
    let mut fg: Vec<usize> = (0..m).filter(|&k| idx.is_foreground(k)).collect();
    for _ in 0..visual_probes.min(fg.len()) {
        let j = fg.swap_remove(rng.below(fg.len() as u64) as usize);
        let dir: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let plus = sa_mask_detailed(&shifted(v, j, &dir, h), g, &mask, params)?.output.values;
        let minus = sa_mask_detailed(&shifted(v, j, &dir, -h), g, &mask, params)?.output.values;
        for k in (0..m).filter(|&k| !oracle::trajectory_open(idx, policy, k, j)) {
            stats.trajectory_max = stats.trajectory_max.max(row_sensitivity(&plus, &minus, k, h));
            stats.trajectory_pairs += 1;
        }
    }
    Ok(stats)
}

/// One random leakage configuration: `m <= 64`, `n <= 8`, random policy,
/// condition-block mode and head count.
pub fn random_leakage_case(seed: u64) -> Result<LeakageStats> {
    let mut rng = CounterRng::new(seed);
    let n = 1 + rng.below(8) as usize;
    let ids = random_ids(&mut rng, n);
    let m = 8 + rng.below(57) as usize;
    let idx = random_indicator(&mut rng, m, &ids);
    let heads = [1, 2, 4][rng.below(3) as usize];
    let d = 16;
    let params = AttentionParams::<f64>::seeded(d, heads, rng.next_u64())?;
    let v = TokenMatrix::visual(random_tokens(&mut rng, m, d));
    let g = TokenMatrix::condition(random_tokens(&mut rng, n, d));
    let policy = if rng.below(2) == 0 { BackgroundPolicy::ForegroundOnly } else { BackgroundPolicy::Strict };
    let mode = if rng.below(2) == 0 { ConditionBlockMode::IdentityOnly } else { ConditionBlockMode::AllOpen };
    leakage_probe(&v, &g, &params, &idx, &ids, policy, mode, 6, &mut rng)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DemoReport {
    pub tokens: usize,
    pub instances: usize,
    pub d_model: usize,
    pub heads: usize,
    pub policy: BackgroundPolicy,
    pub leakage: LeakageStats,
    pub zero_gate_identity: bool,
    pub passed: bool,
}

/// Attention on a scene's first view: identity tokens from the MLP, random
/// visual tokens, leakage probe and the zero-gate check.
pub fn demo_attention(
    scene: &Scene,
    cfg: &MaskConfig,
    mlp: &MlpParams<f64>,
    heads: usize,
    seed: u64,
) -> Result<DemoReport> {
    let view = *scene
        .view_ids()
        .first()
        .ok_or_else(|| Error::validation("cameras", "scene has no views"))?;
    let idx = build_view_masks(scene, view, cfg.theta)?.indicator;
    let order = scene.instance_order();
    let d = mlp.d_model;
    let params = AttentionParams::<f64>::seeded(d, heads, seed)?;
    let g = condition_tokens(&build_condition_set(scene, mlp)?, d)?;
    let mut rng = CounterRng::new(seed).split(0x44454d4f);
    let v = TokenMatrix::visual(random_tokens(&mut rng, idx.token_count(), d));
    let leakage = leakage_probe(&v, &g, &params, &idx, &order, cfg.policy, cfg.condition_block, 4, &mut rng)?;
    let mask = build_sparse_mask(&idx, &order, cfg.policy, cfg.condition_block)?;
    let out = sa_mask_detailed(&v, &g, &mask, &params)?.output;
    let fused = gated_fuse(&v, &out, params.omega)?;
    let zero_gate_identity = params.omega == 0.0 && bitwise_eq(&fused.values, &v.values);
    Ok(DemoReport {
        tokens: idx.token_count(),
        instances: order.len(),
        d_model: d,
        heads,
        policy: cfg.policy,
        passed: leakage.passed() && zero_gate_identity,
        leakage,
        zero_gate_identity,
    })
}

pub fn default_demo_mlp(seed: u64, d_model: usize, num_frequencies: usize) -> Result<MlpParams<f64>> {
    MlpParams::seeded(seed, num_frequencies, DEFAULT_TEXT_DIM, DEFAULT_HIDDEN, d_model)
}

pub fn bitwise_eq(a: &Matrix<f64>, b: &Matrix<f64>) -> bool {
    a.rows == b.rows && a.cols == b.cols && a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn leakage_suite() -> Result<Vec<CheckResult>> {
    let s = Suite::Leakage;
    let scene = fixture_scene();
    let mut out = Vec::new();
    for policy in [BackgroundPolicy::ForegroundOnly, BackgroundPolicy::Strict] {
        let cfg = MaskConfig { policy, ..MaskConfig::default() };
        let mlp = default_demo_mlp(FIXTURE_SEED, 32, DEFAULT_FREQUENCIES)?;
        let r = demo_attention(&scene, &cfg, &mlp, 4, FIXTURE_SEED)?;
        let name = match policy {
            BackgroundPolicy::ForegroundOnly => "fixture-foreground-only",
            BackgroundPolicy::Strict => "fixture-strict",
        };
        out.push(result(s, name, r.leakage.passed(), describe_leakage(&r.leakage)));
    }
    let mut total = LeakageStats::default();
    for case in 0..20 {
        total.merge(&random_leakage_case(0x4c45_0000 + case)?);
    }
    out.push(result(s, "random-configurations", total.passed(), format!("20 cases, {}", describe_leakage(&total))));
    Ok(out)
}

pub fn describe_leakage(l: &LeakageStats) -> String {
    format!(
        "identity fd max {:e} over {} pairs, trajectory fd max {:e} over {} pairs, masked weight max {:e}",
        l.identity_max, l.identity_pairs, l.trajectory_max, l.trajectory_pairs, l.masked_weight_max
    )
}

// Softmax and attention kernel.

/// Max |sa_mask - naive| and max |row sum - 1| over one random case.
pub fn attention_oracle_case(seed: u64, heads: usize) -> Result<(f64, f64)> {
    let mut rng = CounterRng::new(seed);
    let n = rng.below(9) as usize;
    let ids = random_ids(&mut rng, n);
    let m = 1 + rng.below(64) as usize;
    let idx = random_indicator(&mut rng, m, &ids);
    let d = 4 * heads * (1 + rng.below(3) as usize);
    let policy = if rng.below(2) == 0 { BackgroundPolicy::ForegroundOnly } else { BackgroundPolicy::Strict };
    let mask = build_sparse_mask(&idx, &ids, policy, ConditionBlockMode::IdentityOnly)?;
    let params = AttentionParams::<f64>::seeded(d, heads, rng.next_u64())?;
    let v = TokenMatrix::visual(random_tokens(&mut rng, m, d));
    let g = TokenMatrix::condition(random_tokens(&mut rng, n, d));
    let fast = sa_mask_detailed(&v, &g, &mask, &params)?;
    let (slow, slow_w) = oracle::naive_attention(&v, &g, &mask, &params);
    let mut diff = fast
        .output
        .values
        .data
        .iter()
        .zip(&slow.data)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let mut sum_err = 0.0f64;
    for (w, sw) in fast.weights.iter().zip(&slow_w) {
        for r in 0..w.rows {
            sum_err = sum_err.max((w.row(r).iter().sum::<f64>() - 1.0).abs());
        }
        diff = w.data.iter().zip(&sw.data).map(|(a, b)| (a - b).abs()).fold(diff, f64::max);
    }
    Ok((diff, sum_err))
}

/// Max relative error of the softmax backward pass against central
/// differences of `sum_i w_i g_i`; magnitudes are floored at `1e-4`.
pub fn softmax_gradient_error(seed: u64) -> Result<f64> {
    let mut rng = CounterRng::new(seed);
    let n = 2 + rng.below(14) as usize;
    let logits: Vec<f64> = (0..n).map(|_| rng.normal() * 3.0).collect();
    let mut mask: Vec<f64> = (0..n).map(|_| if rng.uniform() < 0.3 { f64::NEG_INFINITY } else { 0.0 }).collect();
    mask[rng.below(n as u64) as usize] = 0.0;
    let gw: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let w = masked_softmax(&logits, &mask)?;
    let analytic = masked_softmax_backward(&w, &gw);
    let objective = |l: &[f64]| -> Result<f64> { Ok(masked_softmax(l, &mask)?.iter().zip(&gw).map(|(a, b)| a * b).sum()) };
    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..n {
        let mut lp = logits.clone();
        let mut lm = logits.clone();
        lp[i] += h;
        lm[i] -= h;
        let fd = (objective(&lp)? - objective(&lm)?) / (2.0 * h);
        worst = worst.max((fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-4));
    }
    Ok(worst)
}

fn softmax_suite() -> Result<Vec<CheckResult>> {
    let s = Suite::Softmax;
    let mut out = Vec::new();
    let neg = f64::NEG_INFINITY;
    let ex = masked_softmax(&[1.0, 1.0], &[0.0, 0.0])? == vec![0.5, 0.5]
        && masked_softmax(&[5.0, 100.0], &[0.0, neg])? == vec![1.0, 0.0]
        && masked_softmax(&[1e308, 1e308], &[0.0, 0.0])? == vec![0.5, 0.5]
        && matches!(masked_softmax(&[1.0, 2.0], &[neg, neg]), Err(Error::DeadRow(_)));
    out.push(result(s, "examples", ex, "uniform, masked, overflow-safe, dead row"));

    let mut diff = 0.0f64;
    let mut sum_err = 0.0f64;
    let mut cases = 0;
    for heads in [1, 2, 4] {
        for c in 0..8 {
            let (d, e) = attention_oracle_case(0x5341_0000 + 16 * heads as u64 + c, heads)?;
            diff = diff.max(d);
            sum_err = sum_err.max(e);
            cases += 1;
        }
    }
    out.push(result(s, "attention-oracle", diff <= ORACLE_TOL, format!("{cases} cases, max abs diff {diff:e}")));
    out.push(result(s, "row-sums", sum_err <= ROW_SUM_TOL, format!("max |sum - 1| {sum_err:e}")));

    let worst = (0..50).map(|c| softmax_gradient_error(0x4744_0000 + c)).collect::<Result<Vec<_>>>()?;
    let worst = worst.into_iter().fold(0.0, f64::max);
    out.push(result(s, "analytic-gradient", worst <= 1e-5, format!("50 rows, max rel err {worst:e}")));

    let scene = fixture_scene();
    let idx = build_view_masks(&scene, 0, crate::latent::DEFAULT_THETA)?.indicator;
    let order = scene.instance_order();
    let mask = build_sparse_mask(&idx, &order, BackgroundPolicy::default(), ConditionBlockMode::default())?;
    let params = AttentionParams::<f64>::seeded(32, 4, FIXTURE_SEED)?;
    let mut rng = CounterRng::new(FIXTURE_SEED);
    let v = TokenMatrix::visual(random_tokens(&mut rng, idx.token_count(), 32));
    let g = TokenMatrix::condition(random_tokens(&mut rng, order.len(), 32));
    let sa = sa_mask_detailed(&v, &g, &mask, &params)?.output;
    let fused = gated_fuse(&v, &sa, 0.0)?;
    out.push(result(s, "zero-gate-identity", bitwise_eq(&fused.values, &v.values), "omega = 0 on the fixture"));
    Ok(out)
}

// Schedule.

/// `(|sample variance - expected|, 3 sigma)` of `z_t` for unit-variance data.
pub fn noising_variance(schedule: &NoiseSchedule<f64>, t: usize, samples: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = CounterRng::new(seed);
    let z0 = TokenMatrix::visual(random_tokens(&mut rng, samples, 1));
    let eps = TokenMatrix::visual(random_tokens(&mut rng, samples, 1));
    let zt = forward_noise(&z0, t, schedule, &eps)?;
    let n = samples as f64;
    let mean = zt.values.data.iter().sum::<f64>() / n;
    let var = zt.values.data.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let ab = schedule.alpha_bar(t)?;
    let expected = ab + (1.0 - ab);
    Ok(((var - expected).abs(), 3.0 * expected * (2.0 / (n - 1.0)).sqrt()))
}

fn schedule_suite() -> Result<Vec<CheckResult>> {
    let s = Suite::Schedule;
    let mut out = Vec::new();
    let mut ok = true;
    for sched in [
        NoiseSchedule::<f64>::default_linear(1000)?,
        NoiseSchedule::<f64>::linear(50, 1e-3, 0.3)?,
        NoiseSchedule::<f64>::constant(20, 0.1)?,
    ] {
        let mut acc = 1.0;
        let mut prev = f64::INFINITY;
        for t in 1..=sched.steps() {
            acc *= 1.0 - sched.beta(t)?;
            let ab = sched.alpha_bar(t)?;
            ok &= ab == acc && ab < prev;
            prev = ab;
        }
    }
    out.push(result(s, "alpha-bar-recurrence", ok, "exact products, strictly decreasing"));

    let c = NoiseSchedule::<f64>::constant(2, 0.1)?;
    let ab2 = c.alpha_bar(2)?;
    out.push(result(s, "constant-beta", (ab2 - 0.81).abs() <= 1e-15, format!("alpha_bar_2 = {ab2:?}")));

    let sched = NoiseSchedule::<f64>::default_linear(1000)?;
    let mut detail = Vec::new();
    let mut ok = true;
    for (i, t) in [1usize, 500, 1000].into_iter().enumerate() {
        let (dev, bound) = noising_variance(&sched, t, 100_000, 0x5641_5200 + i as u64)?;
        ok &= dev <= bound;
        detail.push(format!("t={t}: |dev| {dev:.2e} <= {bound:.2e}"));
    }
    out.push(result(s, "noising-variance", ok, detail.join("; ")));
    Ok(out)
}

// Loss.

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DynamicStats {
    pub alpha: f64,
    pub draws: usize,
    pub masked: usize,
    pub frequency_dev: f64,
    pub frequency_bound: f64,
    pub mean_dev: f64,
    pub mean_bound: f64,
    /// Every draw at `alpha = 0` (`1`) equals the global (masked) loss bitwise.
    pub extremes_exact: bool,
}

impl DynamicStats {
    pub fn passed(&self) -> bool {
        self.frequency_dev <= self.frequency_bound && self.mean_dev <= self.mean_bound && self.extremes_exact
    }
}

pub fn dynamic_masking_stats(alpha: f64, draws: usize, seed: u64) -> Result<DynamicStats> {
    let mut rng = CounterRng::new(seed);
    let m = 64;
    let idx = random_indicator(&mut rng, m, &[1, 2, 3]);
    let mask = build_loss_mask(&idx);
    let loss = LossMap {
        values: (0..m).map(|_| rng.uniform() * 2.0).collect::<Vec<f64>>(),
    };
    let lm = masked_loss(&loss, &mask, Reduction::Mean)?.value;
    let lg = global_loss(&loss, Reduction::Mean);
    let mut masked = 0usize;
    let mut sum = 0.0;
    let mut extremes_exact = true;
    let mut draw_rng = rng.split(1);
    for _ in 0..draws {
        let d = dynamic_loss(&loss, &mask, alpha, &mut draw_rng, Reduction::Mean)?;
        if d.branch == Branch::Masked {
            masked += 1;
        }
        sum += d.value;
        if alpha == 0.0 {
            extremes_exact &= d.branch == Branch::Global && d.value.to_bits() == lg.to_bits();
        }
        if alpha == 1.0 {
            extremes_exact &= d.branch == Branch::Masked && d.value.to_bits() == lm.to_bits();
        }
    }
    let n = draws as f64;
    let sigma = (alpha * (1.0 - alpha) / n).sqrt();
    Ok(DynamicStats {
        alpha,
        draws,
        masked,
        frequency_dev: (masked as f64 / n - alpha).abs(),
        frequency_bound: 3.0 * sigma,
        mean_dev: (sum / n - (alpha * lm + (1.0 - alpha) * lg)).abs(),
        // Rounding slack for summing 1e5 terms.
        mean_bound: 3.0 * sigma * (lm - lg).abs() + 1e-9,
        extremes_exact,
    })
}

fn loss_suite() -> Result<Vec<CheckResult>> {
    let s = Suite::Loss;
    let mut out = Vec::new();
    let mut ok = true;
    let mut detail = Vec::new();
    for (i, alpha) in [0.0, 0.25, 0.5, 1.0].into_iter().enumerate() {
        let st = dynamic_masking_stats(alpha, 100_000, 0x44594e00 + i as u64)?;
        ok &= st.passed();
        detail.push(format!(
            "alpha {alpha}: freq dev {:.2e} <= {:.2e}, mean dev {:.2e} <= {:.2e}",
            st.frequency_dev, st.frequency_bound, st.mean_dev, st.mean_bound
        ));
    }
    out.push(result(s, "dynamic-masking", ok, detail.join("; ")));

    let mut rng = CounterRng::new(0x4752);
    let mut worst_abs = 0.0f64;
    let mut worst_fd = 0.0f64;
    let mut edge_ok = true;
    for case in 0..10 {
        let m = 4 + rng.below(60) as usize;
        let d = 2 + rng.below(6) as usize;
        let toy = ToyDenoiser::<f64>::seeded(d, rng.next_u64());
        let z = TokenMatrix::visual(random_tokens(&mut rng, m, d));
        let eps = TokenMatrix::visual(random_tokens(&mut rng, m, d));
        let mask = match case {
            0 => build_loss_mask(&IndicatorIndex::from_sets(vec![vec![1]; m])),
            1 => build_loss_mask(&IndicatorIndex::empty(m)),
            _ => build_loss_mask(&random_indicator(&mut rng, m, &[1, 2])),
        };
        let r = gradient_restriction_check(&toy, &z, &eps, &mask)?;
        worst_abs = worst_abs.max(r.max_abs_diff);
        worst_fd = worst_fd.max(r.max_fd_rel_err);
        let loss = per_token_loss(&eps, &toy.predict(&z)?)?;
        edge_ok &= loss.values.iter().all(|&x| x >= 0.0);
        if case == 0 {
            edge_ok &= masked_loss(&loss, &mask, Reduction::Mean)?.value == global_loss(&loss, Reduction::Mean);
        }
        if case == 1 {
            let (gw, gb) = toy.masked_gradient(&z, &eps, &mask)?;
            edge_ok &= gw.data.iter().chain(&gb).all(|&x| x == 0.0);
        }
    }
    out.push(result(
        s,
        "gradient-restriction",
        worst_abs <= crate::diffusion::GRADIENT_TOL && worst_fd <= crate::diffusion::FD_REL_TOL,
        format!("10 cases, max abs diff {worst_abs:e}, max fd rel err {worst_fd:e}"),
    ));
    out.push(result(s, "loss-edge-cases", edge_ok, "nonnegative, all-one mask = global, all-zero mask = zero gradient"));
    Ok(out)
}

// Tamper.

/// Loads a sparse JSON or dense binary mask.
pub fn load_mask_file(bytes: &[u8]) -> Result<AttentionMask> {
    if bytes.starts_with(&DENSE_MAGIC) {
        AttentionMask::from_dense_binary(bytes)
    } else {
        let text = std::str::from_utf8(bytes).map_err(|e| Error::parse("mask file", e.to_string()))?;
        AttentionMask::from_sparse_json(text)
    }
}

/// Checks `mask` against the structural invariants and against the mask the
/// default configuration builds for view 0 of the fixture scene.
pub fn tamper_checks(mask: &AttentionMask) -> Result<Vec<CheckResult>> {
    let s = Suite::Tamper;
    let violations = mask.violations();
    let mut out = Vec::new();
    for name in ["diagonal", "identity-symmetry", "trajectory-symmetry", "dead-row"] {
        let hit: Vec<&String> = violations.iter().filter(|v| v.starts_with(&format!("{name}:"))).collect();
        let detail = hit.first().map_or_else(|| "holds".to_string(), |v| v.to_string());
        out.push(result(s, name, hit.is_empty(), detail));
    }
    let scene = fixture_scene();
    let idx = build_view_masks(&scene, 0, crate::latent::DEFAULT_THETA)?.indicator;
    let order = scene.instance_order();
    let cfg = MaskConfig::default();
    let mismatch = oracle::first_mask_mismatch(mask, &idx, &order, cfg.policy, cfg.condition_block);
    let detail = match mismatch {
        None => "matches the fixture".to_string(),
        Some((usize::MAX, _)) => format!(
            "shape {}+{} differs from fixture {}+{}",
            mask.m(),
            mask.n(),
            idx.token_count(),
            order.len()
        ),
        Some((r, c)) => format!("entry ({r},{c}) differs from its definition"),
    };
    out.push(result(s, "fixture-definition", mismatch.is_none(), detail));
    Ok(out)
}

fn tamper_suite(path: &PathBuf) -> Result<Vec<CheckResult>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match load_mask_file(&bytes) {
        Ok(mask) => tamper_checks(&mask),
        Err(e) => Ok(vec![result(Suite::Tamper, "parse", false, e.to_string())]),
    }
}
