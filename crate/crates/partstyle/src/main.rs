//! Command line for the part stylization pipeline.
//!
//! Five subcommands: `stylize` runs the optimization and writes a run
//! directory, `finetune` generates a box dataset and tunes per-phrase prompt
//! offsets on it, `study` measures cross-seed consistency, `metrics` compares
//! two PNG files, and `convert-parts` derives a parts sidecar from OBJ group
//! tags. `stylize`, `study`, and `finetune` optionally read a TOML run
//! configuration; individual flags override its fields.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use partstyle::config::{default_parts_path, load_run_config, RunConfig};
use partstyle::finetune::{
    evaluate_ap, generate_dataset, mesh_synonym_table, save_offsets, tune_offsets,
};
use partstyle::grounding::{make_backend, BackendKey};
use partstyle::mesh::{load_mesh, parts_from_obj_groups, write_parts_sidecar, PartitionedMesh};
use partstyle::metrics::{consistency_study, image_metrics};
use partstyle::render::{load_png, uniform_viewpoints};
use partstyle::trainer::{self, TrainConfig};

#[derive(Parser)]
#[command(
    name = "partstyle",
    version,
    about = "Stylize named parts of a 3D mesh from a text prompt"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize a style field for a mesh and prompt; writes a run directory.
    Stylize(StylizeArgs),
    /// Generate a box dataset and tune per-phrase prompt offsets on it.
    Finetune(FinetuneArgs),
    /// Run one stylization per seed and report pairwise image metrics.
    Study(StudyArgs),
    /// Compare two PNG images (mse, psnr, ssim).
    Metrics(MetricsArgs),
    /// Derive a parts sidecar from an OBJ's g/usemtl tags.
    ConvertParts(ConvertPartsArgs),
}

/// Flags shared by the subcommands that execute training runs. Every field
/// overrides the corresponding run-configuration entry; without `--config`,
/// `--mesh` and `--prompt` become mandatory.
#[derive(Args)]
struct RunFlags {
    /// TOML run configuration supplying defaults for the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Mesh geometry (ASCII OBJ triangles).
    #[arg(long)]
    mesh: Option<PathBuf>,
    /// Parts sidecar; defaults to the mesh path with a .parts.toml extension.
    #[arg(long)]
    parts: Option<PathBuf>,
    /// Comma-separated "<style words> <part>" pairs.
    #[arg(long)]
    prompt: Option<String>,
    /// Grounding backend: toy, oracle, or pretrained.
    #[arg(long)]
    backend: Option<String>,
    /// Optimization steps.
    #[arg(long)]
    iters: Option<usize>,
    /// Master seed (field init and per-iteration sampling).
    #[arg(long)]
    seed: Option<u64>,
    /// Render resolution in pixels (square).
    #[arg(long)]
    image_size: Option<u32>,
    /// Directory that run directories are created under.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StylizeArgs {
    #[command(flatten)]
    run: RunFlags,
    /// Continue from this checkpoint instead of starting fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct StudyArgs {
    #[command(flatten)]
    run: RunFlags,
    /// Comma-separated seed list, e.g. 1,2,3,4,5 (at least two).
    #[arg(long)]
    seeds: String,
}

#[derive(Args)]
struct FinetuneArgs {
    /// TOML run configuration; only mesh, parts, backend, adapter, and
    /// train.grid_stride are read from it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Mesh geometry (ASCII OBJ triangles).
    #[arg(long)]
    mesh: Option<PathBuf>,
    /// Parts sidecar; defaults to the mesh path with a .parts.toml extension.
    #[arg(long)]
    parts: Option<PathBuf>,
    /// Per-part phrase lists (TOML: part name = ["phrase", ...]). Parts not
    /// named keep their sidecar synonyms; listed parts are replaced exactly.
    #[arg(long)]
    synonyms: Option<PathBuf>,
    /// Grounding backend: toy, oracle, or pretrained.
    #[arg(long)]
    backend: Option<String>,
    /// Output directory (dataset/, offsets.bin, ap_report.json).
    #[arg(long)]
    out: PathBuf,
    /// Viewpoint grid: azimuth steps.
    #[arg(long, default_value_t = 8)]
    azimuths: usize,
    /// Viewpoint grid: comma-separated elevations in degrees.
    #[arg(long, default_value = "-30,0,30")]
    elevations: String,
    /// Camera distance from the mesh center.
    #[arg(long, default_value_t = 2.5)]
    distance: f64,
    /// Vertical field of view in degrees.
    #[arg(long, default_value_t = 60.0)]
    fov: f64,
    /// Render resolution in pixels (square).
    #[arg(long, default_value_t = 256)]
    image_size: u32,
    /// Boxes with both sides below this many pixels are omitted.
    #[arg(long, default_value_t = 8)]
    min_side: u32,
    /// Tuning epochs (0 evaluates without tuning).
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    /// Tuning step size.
    #[arg(long, default_value_t = 0.05)]
    learning_rate: f64,
    /// IoU threshold for a detection to count as correct.
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
}

#[derive(Args)]
struct MetricsArgs {
    /// First image (PNG).
    a: PathBuf,
    /// Second image (PNG), same dimensions.
    b: PathBuf,
}

#[derive(Args)]
struct ConvertPartsArgs {
    /// OBJ file with g or usemtl tags.
    #[arg(long)]
    mesh: PathBuf,
    /// Sidecar to write; defaults to the mesh path with .parts.toml.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Stylize(args) => cmd_stylize(args),
        Command::Finetune(args) => cmd_finetune(args),
        Command::Study(args) => cmd_study(args),
        Command::Metrics(args) => cmd_metrics(args),
        Command::ConvertParts(args) => cmd_convert_parts(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            print_error(&err);
            ExitCode::FAILURE
        }
    }
}

/// Print the error and its cause chain, skipping causes whose text the
/// previous message already embeds (library errors format their sources).
fn print_error(err: &anyhow::Error) {
    eprintln!("error: {err}");
    let mut prev = err.to_string();
    for cause in err.chain().skip(1) {
        let text = cause.to_string();
        if !prev.contains(&text) {
            eprintln!("  caused by: {text}");
        }
        prev = text;
    }
}

/// Config file (if any) plus flag overrides, in that order.
fn resolve_run_config(flags: &RunFlags) -> Result<RunConfig> {
    let mut rc = match &flags.config {
        Some(path) => load_run_config(path)?,
        None => RunConfig {
            mesh: flags
                .mesh
                .clone()
                .context("--mesh is required when no --config file is given")?,
            parts: None,
            prompt: flags
                .prompt
                .clone()
                .context("--prompt is required when no --config file is given")?,
            out_dir: PathBuf::from("runs"),
            train: TrainConfig::default(),
            adapter: None,
        },
    };
    if let Some(mesh) = &flags.mesh {
        rc.mesh = mesh.clone();
    }
    if let Some(parts) = &flags.parts {
        rc.parts = Some(parts.clone());
    }
    if let Some(prompt) = &flags.prompt {
        rc.prompt = prompt.clone();
    }
    if let Some(backend) = &flags.backend {
        rc.train.grounding = parse_backend(backend)?;
    }
    if let Some(iters) = flags.iters {
        rc.train.iterations = iters;
    }
    if let Some(seed) = flags.seed {
        rc.train.seed = seed;
    }
    if let Some(size) = flags.image_size {
        rc.train.image_size = size;
    }
    if let Some(out) = &flags.out {
        rc.out_dir = out.clone();
    }
    Ok(rc)
}

fn parse_backend(text: &str) -> Result<BackendKey> {
    BackendKey::from_str(text).map_err(|msg| anyhow!(msg))
}

fn load_mesh_arc(mesh_path: &Path, parts_path: &Path) -> Result<Arc<PartitionedMesh>> {
    Ok(Arc::new(load_mesh(mesh_path, parts_path)?))
}

/// Claim the first free `run_NNNN` directory under `root`. `create_dir` makes
/// the claim atomic against concurrent invocations.
fn fresh_run_dir(root: &Path) -> Result<PathBuf> {
    fs::create_dir_all(root)
        .with_context(|| format!("cannot create output root {}", root.display()))?;
    for i in 0..u32::MAX {
        let candidate = root.join(format!("run_{i:04}"));
        match fs::create_dir(&candidate) {
            Ok(()) => return Ok(candidate),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => {
                return Err(e).with_context(|| {
                    format!("cannot create run directory {}", candidate.display())
                })
            }
        }
    }
    bail!("output root {} is full", root.display());
}

fn cmd_stylize(args: StylizeArgs) -> Result<()> {
    let rc = resolve_run_config(&args.run)?;
    let mesh = load_mesh_arc(&rc.mesh, &rc.parts_path())?;
    let run_dir = fresh_run_dir(&rc.out_dir)?;
    let artifacts = match &args.resume {
        Some(checkpoint) => trainer::resume(
            &rc.train,
            &mesh,
            &rc.prompt,
            &run_dir,
            rc.adapter.as_ref(),
            checkpoint,
        )?,
        None => trainer::run(&rc.train, &mesh, &rc.prompt, &run_dir, rc.adapter.as_ref())?,
    };
    println!("run directory: {}", artifacts.run_dir.display());
    println!("final mesh: {}", artifacts.final_mesh_path.display());
    println!("config hash: {}", artifacts.config_hash);
    Ok(())
}

fn cmd_study(args: StudyArgs) -> Result<()> {
    let rc = resolve_run_config(&args.run)?;
    let seeds = parse_seed_list(&args.seeds)?;
    let mesh = load_mesh_arc(&rc.mesh, &rc.parts_path())?;
    let study_dir = fresh_run_dir(&rc.out_dir)?;
    let report = consistency_study(&rc.train, &mesh, &rc.prompt, &seeds, &study_dir, None)?;
    print!("{}", report.table());
    println!("study directory: {}", study_dir.display());
    Ok(())
}

fn cmd_finetune(args: FinetuneArgs) -> Result<()> {
    let rc = match &args.config {
        Some(path) => Some(load_run_config(path)?),
        None => None,
    };
    let mesh_path = args
        .mesh
        .clone()
        .or_else(|| rc.as_ref().map(|c| c.mesh.clone()))
        .context("--mesh is required when no --config file is given")?;
    let parts_path = args
        .parts
        .clone()
        .or_else(|| rc.as_ref().and_then(|c| c.parts.clone()))
        .unwrap_or_else(|| default_parts_path(&mesh_path));
    let backend_key = match &args.backend {
        Some(text) => parse_backend(text)?,
        None => rc.as_ref().map(|c| c.train.grounding).unwrap_or(BackendKey::Toy),
    };
    let grid_stride = rc.as_ref().map(|c| c.train.grid_stride).unwrap_or(8);
    let adapter = rc.as_ref().and_then(|c| c.adapter.clone());

    let mesh = load_mesh_arc(&mesh_path, &parts_path)?;
    let synonyms = match &args.synonyms {
        Some(path) => synonyms_from_file(&mesh, path)?,
        None => mesh_synonym_table(&mesh),
    };
    let elevations = parse_degree_list(&args.elevations)?;
    let views = uniform_viewpoints(
        args.azimuths,
        &elevations,
        args.distance,
        args.fov.to_radians(),
        args.image_size,
    )?;

    let dataset_dir = args.out.join("dataset");
    let dataset =
        generate_dataset(&mesh, &synonyms, &views, args.min_side, [1.0, 1.0, 1.0], &dataset_dir)?;
    println!("dataset: {} samples in {}", dataset.samples.len(), dataset_dir.display());

    let mut backend = make_backend(backend_key, &mesh, grid_stride, adapter.as_ref())?;
    let before = evaluate_ap(backend.as_ref(), &dataset, args.iou)?;
    let report = tune_offsets(backend.as_mut(), &dataset, args.epochs, args.learning_rate)?;
    let after = evaluate_ap(backend.as_ref(), &dataset, args.iou)?;

    let offsets_path = args.out.join("offsets.bin");
    save_offsets(&offsets_path, &mesh.content_hash(), &backend.id(), &report.offsets)?;

    let report_path = args.out.join("ap_report.json");
    let report_json = serde_json::json!({
        "backend": backend.id(),
        "iou_threshold": args.iou,
        "epochs": args.epochs,
        "learning_rate": args.learning_rate,
        "ap_before": before.ap,
        "ap_after": after.ap,
        "per_part_before": before.per_part,
        "per_part_after": after.per_part,
        "tuning_losses": report.losses,
        "offsets_file": offsets_path.display().to_string(),
    });
    fs::write(&report_path, serde_json::to_string_pretty(&report_json).expect("report serializes"))
        .with_context(|| format!("cannot write {}", report_path.display()))?;

    println!("AP before tuning: {:.4}", before.ap);
    println!("AP after tuning:  {:.4}", after.ap);
    println!("offsets: {}", offsets_path.display());
    println!("report: {}", report_path.display());
    Ok(())
}

fn cmd_metrics(args: MetricsArgs) -> Result<()> {
    let a = load_png(&args.a)?;
    let b = load_png(&args.b)?;
    let m = image_metrics(&a, &b, None)?;
    println!("mse:  {:.8}", m.mse);
    println!("psnr: {:.4}", m.psnr);
    println!("ssim: {:.6}", m.ssim);
    match m.perceptual {
        Some(v) => println!("perceptual: {v:.6}"),
        None => println!("perceptual: unavailable (no backend configured)"),
    }
    Ok(())
}

fn cmd_convert_parts(args: ConvertPartsArgs) -> Result<()> {
    let parts = parts_from_obj_groups(&args.mesh)?;
    let out = args.out.clone().unwrap_or_else(|| default_parts_path(&args.mesh));
    write_parts_sidecar(&out, &parts)?;
    println!("wrote {} parts to {}", parts.len(), out.display());
    for part in &parts {
        println!("  {} ({} faces)", part.name, part.faces.len());
    }
    Ok(())
}

fn parse_seed_list(text: &str) -> Result<Vec<u64>> {
    text.split(',')
        .map(|tok| {
            tok.trim()
                .parse::<u64>()
                .with_context(|| format!("bad seed '{}' in --seeds", tok.trim()))
        })
        .collect()
}

fn parse_degree_list(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|tok| {
            tok.trim()
                .parse::<f64>()
                .map(f64::to_radians)
                .with_context(|| format!("bad elevation '{}' in --elevations", tok.trim()))
        })
        .collect()
}

/// Per-part phrase lists from a TOML map keyed by part name. A listed part's
/// phrases replace its sidecar synonyms exactly; unlisted parts keep theirs.
fn synonyms_from_file(mesh: &PartitionedMesh, path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read synonyms file {}", path.display()))?;
    let map: BTreeMap<String, Vec<String>> = toml::from_str(&text)
        .with_context(|| format!("cannot parse synonyms file {}", path.display()))?;
    let mut table = mesh_synonym_table(mesh);
    for (name, phrases) in map {
        let part = mesh
            .resolve_part(&name)
            .ok_or_else(|| anyhow!("synonyms file names unknown part '{name}'"))?;
        table[part] = phrases;
    }
    Ok(table)
}
