use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

use instmask::check::{self, CheckOptions, Suite};
use instmask::conditioning::MlpParams;
use instmask::latent::IndicatorIndex;
use instmask::masks::{BackgroundPolicy, ConditionBlockMode};
use instmask::pipeline::{self, MaskConfig, ViewMode};
use instmask::scene::{self, Dims, GeneratorSpec};
use instmask::Error;

/// Instance masks, masked attention and masked loss from tracked 3D boxes.
#[derive(Parser)]
#[command(name = "instmask", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic scene.
    GenScene(GenScene),
    /// Build pixel, latent and attention masks plus a manifest.
    BuildMasks(BuildMasks),
    /// Run masked attention on a scene and print the leakage report.
    DemoAttention(DemoAttention),
    /// Run the property suites.
    Check(CheckCmd),
}

#[derive(Args)]
struct GenScene {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u32).range(1..))]
    frames: u32,
    #[arg(long, default_value_t = 128, value_parser = clap::value_parser!(u32).range(1..))]
    height: u32,
    #[arg(long, default_value_t = 224, value_parser = clap::value_parser!(u32).range(1..))]
    width: u32,
    /// Temporal factor [default: 2 for even T, else 1].
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    ft: Option<u32>,
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u32).range(1..))]
    fh: u32,
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u32).range(1..))]
    fw: u32,
    #[arg(long, default_value_t = 4)]
    instances: usize,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    views: u32,
    /// Give the first instance a pose gap over the middle third.
    #[arg(long)]
    occlusion: bool,
    /// Ego forward speed, meters per frame.
    #[arg(long, default_value_t = 0.0)]
    ego_speed: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    ForegroundOnly,
    Strict,
}

#[derive(Clone, Copy, ValueEnum)]
enum CondBlockArg {
    IdentityOnly,
    AllOpen,
}

#[derive(Clone, Copy, ValueEnum)]
enum ViewModeArg {
    Independent,
    Concatenated,
}

#[derive(Args)]
struct MaskArgs {
    /// Occupancy threshold; a latent cell is set iff occupancy > theta.
    #[arg(long, default_value_t = 0.5)]
    theta: f64,
    #[arg(long, value_enum, default_value_t = PolicyArg::ForegroundOnly)]
    policy: PolicyArg,
    #[arg(long, value_enum, default_value_t = CondBlockArg::IdentityOnly)]
    cond_block: CondBlockArg,
    #[arg(long, value_enum, default_value_t = ViewModeArg::Independent)]
    view_mode: ViewModeArg,
}

impl MaskArgs {
    fn config(&self) -> MaskConfig {
        MaskConfig {
            theta: self.theta,
            policy: match self.policy {
                PolicyArg::ForegroundOnly => BackgroundPolicy::ForegroundOnly,
                PolicyArg::Strict => BackgroundPolicy::Strict,
            },
            condition_block: match self.cond_block {
                CondBlockArg::IdentityOnly => ConditionBlockMode::IdentityOnly,
                CondBlockArg::AllOpen => ConditionBlockMode::AllOpen,
            },
            view_mode: match self.view_mode {
                ViewModeArg::Independent => ViewMode::Independent,
                ViewModeArg::Concatenated => ViewMode::Concatenated,
            },
        }
    }
}

#[derive(Args)]
struct BuildMasks {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    masks: MaskArgs,
    /// Output directory of another run; every indicator written here must be
    /// a subset of the one with the same path there.
    #[arg(long)]
    check_subset: Option<PathBuf>,
}

#[derive(Args)]
struct DemoAttention {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u32).range(1..))]
    d_model: u32,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u32).range(1..))]
    heads: u32,
    /// Fourier frequencies L.
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u32).range(1..))]
    fourier: u32,
    /// Identity-MLP parameter file; seeded from --seed when absent.
    #[arg(long)]
    params: Option<PathBuf>,
    #[command(flatten)]
    masks: MaskArgs,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct CheckCmd {
    /// Restrict to these suites (repeatable).
    #[arg(long)]
    suite: Vec<String>,
    /// Attention-mask file (sparse JSON or dense binary) to validate against
    /// the seed-7 fixture.
    #[arg(long)]
    tamper: Option<PathBuf>,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

enum Failure {
    Property(String),
    Usage(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Usage(e)
    }
}

type CmdResult = Result<(), Failure>;

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn gen_scene(a: &GenScene) -> CmdResult {
    let frames = a.frames as usize;
    let f_t = a.ft.map_or(if frames.is_multiple_of(2) { 2 } else { 1 }, |v| v as usize);
    let spec = GeneratorSpec {
        dims: Dims {
            frames,
            height: a.height as usize,
            width: a.width as usize,
            f_t,
            f_h: a.fh as usize,
            f_w: a.fw as usize,
        },
        instances: a.instances,
        views: a.views as usize,
        occlusion: a.occlusion,
        ego_speed: a.ego_speed,
        ..GeneratorSpec::default()
    };
    let s = scene::generate_synthetic_scene(a.seed, &spec)?;
    scene::save_scene(&s, &a.out)?;
    let d = s.dims;
    println!(
        "scene T={} H={} W={} factors={}x{}x{} instances={} views={} -> {}",
        d.frames,
        d.height,
        d.width,
        d.f_t,
        d.f_h,
        d.f_w,
        s.instances.len(),
        s.view_ids().len(),
        a.out.display()
    );
    for inst in &s.instances {
        let missing: Vec<u32> = (0..d.frames as u32).filter(|t| !inst.poses.contains_key(t)).collect();
        if !missing.is_empty() {
            println!("instance {} has no pose in frames {:?}", inst.tracking_id, missing);
        }
    }
    Ok(())
}

fn build_masks(a: &BuildMasks) -> CmdResult {
    let s = scene::load_scene(&a.scene)?;
    let cfg = a.masks.config();
    let artifacts = pipeline::render_artifacts(&s, &cfg)?;
    pipeline::write_artifacts(&a.out_dir, &artifacts)?;
    println!(
        "{} artifacts for {} instances -> {}",
        artifacts.len() - 1,
        s.instances.len(),
        a.out_dir.display()
    );
    let Some(other) = &a.check_subset else {
        return Ok(());
    };
    let mut failures = Vec::new();
    for art in artifacts.iter().filter(|x| x.path.ends_with("indicator.json")) {
        let mine = IndicatorIndex::from_json(std::str::from_utf8(&art.bytes).expect("utf-8 export"))?;
        let path = other.join(&art.path);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let theirs = IndicatorIndex::from_json(&text)?;
        let ok = mine.is_subset_of(&theirs);
        println!("subset {}: {}", art.path, if ok { "pass" } else { "FAIL" });
        if !ok {
            failures.push(art.path.clone());
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Property(format!("indicator not a subset: {}", failures.join(", "))))
    }
}

fn demo_attention(a: &DemoAttention) -> CmdResult {
    let s = scene::load_scene(&a.scene)?;
    let cfg = a.masks.config();
    cfg.validate()?;
    let mlp = match &a.params {
        Some(p) => MlpParams::<f64>::load(p)?,
        None => check::default_demo_mlp(a.seed, a.d_model as usize, a.fourier as usize)?,
    };
    let r = check::demo_attention(&s, &cfg, &mlp, a.heads as usize, a.seed)?;
    println!(
        "attention over {} visual + {} identity tokens, d_model={} heads={} policy={:?}",
        r.tokens, r.instances, r.d_model, r.heads, r.policy
    );
    println!("leakage: {}", check::describe_leakage(&r.leakage));
    println!("zero-gate identity: {}", r.zero_gate_identity);
    println!("{}", if r.passed { "PASS" } else { "FAIL" });
    if let Some(p) = &a.json {
        let mut text = serde_json::to_string_pretty(&r).expect("infallible");
        text.push('\n');
        write_file(p, text.as_bytes())?;
    }
    if r.passed {
        Ok(())
    } else {
        Err(Failure::Property("leakage check failed".into()))
    }
}

fn run_check(a: &CheckCmd) -> CmdResult {
    let suites = a.suite.iter().map(|s| s.parse::<Suite>()).collect::<Result<Vec<_>, _>>()?;
    let report = check::run_checks(&CheckOptions {
        suites,
        tamper: a.tamper.clone(),
    })?;
    for c in &report.checks {
        println!("{} {}/{}: {}", if c.passed { "PASS" } else { "FAIL" }, c.suite, c.name, c.detail);
    }
    if let Some(p) = &a.json {
        write_file(p, report.to_json().as_bytes())?;
    }
    if report.passed {
        Ok(())
    } else {
        let names: Vec<String> = report.failed().map(|c| format!("{}/{}", c.suite, c.name)).collect();
        Err(Failure::Property(format!("failed: {}", names.join(", "))))
    }
}

/// Usage line of the subcommand named on the command line, if any.
fn usage() -> String {
    let mut cmd = Cli::command();
    cmd.build();
    let name = std::env::args().nth(1);
    match name.as_deref().and_then(|n| cmd.find_subcommand_mut(n)) {
        Some(sub) => sub.render_usage().to_string(),
        None => cmd.render_usage().to_string(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            if !e.use_stderr() {
                return ExitCode::SUCCESS;
            }
            eprintln!("\n{}", usage());
            return ExitCode::from(2);
        }
    };
    let cap = match pipeline::thread_cap_from_env() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let outcome = pipeline::with_thread_cap(cap, || match &cli.command {
        Command::GenScene(a) => gen_scene(a),
        Command::BuildMasks(a) => build_masks(a),
        Command::DemoAttention(a) => demo_attention(a),
        Command::Check(a) => run_check(a),
    });
    match outcome {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(Failure::Property(msg))) => {
            eprintln!("{msg}");
            ExitCode::from(1)
        }
        Ok(Err(Failure::Usage(e))) | Err(e) => {
            eprintln!("error: {e}");
            eprintln!("\n{}", usage());
            ExitCode::from(2)
        }
    }
}
