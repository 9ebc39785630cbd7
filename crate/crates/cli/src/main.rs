use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use volreg::bench::{emit_report, emit_swap_report, reference_swap_test, rerender_report, run_experiment, ExperimentPlan};
use volreg::optimize::{register, Engine, RegistrationConfig, CONFIG_SCHEMA_VERSION};
use volreg::similarity::{local_cc, Objective, SimilarityReport, DEFAULT_BINS};
use volreg::syngen::{build_manifest, materialize, DEFAULT_PER_BRAIN};
use volreg::volume::{load_volume, make_phantom, save_volume};
use volreg::warp::{apply_displacement, save_field};

/// Deformable registration of 3D volumes.
#[derive(Parser, Debug)]
#[command(name = "volreg", version)]
struct Cli {
    /// Seed for phantoms, synthetic fields and registration runs.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "VOLREG_THREADS")]
    threads: Option<usize>,

    /// Print errors only.
    #[arg(long, short, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a seeded phantom volume.
    Phantom {
        /// Grid size as `N` or `NX,NY,NZ`.
        #[arg(long, default_value = "64")]
        dims: String,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Build a deformation manifest for source volumes and write the dataset.
    Gen {
        /// Deformed copies per flip variant of each source.
        #[arg(long, default_value_t = DEFAULT_PER_BRAIN)]
        per_brain: usize,
        /// Only write manifest.json.
        #[arg(long)]
        manifest_only: bool,
        #[arg(short, long)]
        output: PathBuf,
        /// Source NIfTI volumes; each file stem becomes the source id.
        #[arg(required = true)]
        sources: Vec<PathBuf>,
    },
    /// Register MOVING to FIXED with one engine.
    Register(RegisterArgs),
    /// Similarity scores of a volume pair.
    Evaluate {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
        /// Also report windowed CC with this window.
        #[arg(long)]
        window: Option<usize>,
        /// Print JSON instead of `key=value` lines.
        #[arg(long)]
        json: bool,
    },
    /// Run an experiment plan and write its report.
    Bench {
        #[arg(long)]
        plan: PathBuf,
        /// Report directory (default: the plan's output_dir, else `bench-report`).
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Run a plan against its reference and an alternate one.
    SwapTest {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        alternate: String,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Re-render the Markdown table and overlay images of a report directory.
    Report { dir: PathBuf },
}

#[derive(Args, Debug)]
struct RegisterArgs {
    #[arg(long)]
    engine: Option<Engine>,
    /// RegistrationConfig JSON; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    objective: Option<Objective>,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    fixed: PathBuf,
    moving: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
}

fn parse_dims(text: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = text
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("bad dims `{text}`"))?;
    match parts[..] {
        [n] => Ok([n; 3]),
        [x, y, z] => Ok([x, y, z]),
        _ => bail!("dims must be `N` or `NX,NY,NZ`, got `{text}`"),
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn source_id(path: &Path) -> Result<String> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .with_context(|| format!("no file name in {}", path.display()))?;
    Ok(name.strip_suffix(".nii").unwrap_or(name).to_string())
}

fn cmd_register(args: &RegisterArgs, seed: Option<u64>, quiet: bool) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => RegistrationConfig::load(path)?,
        None => RegistrationConfig::new(args.engine.unwrap_or(Engine::Ffd)),
    };
    if let Some(engine) = args.engine {
        cfg.engine = engine;
    }
    if let Some(o) = args.objective {
        cfg.objective = Some(o);
    }
    if let Some(l) = args.levels {
        cfg.levels = l;
    }
    if let Some(i) = args.iterations {
        cfg.iterations_per_level = i;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let fixed = load_volume(&args.fixed)?;
    let moving = load_volume(&args.moving)?;
    let result = register(&fixed, &moving, &cfg)?;
    fs::create_dir_all(&args.output).with_context(|| format!("creating {}", args.output.display()))?;
    save_field(&result.field, args.output.join("field.nii"))?;
    save_volume(&apply_displacement(&moving, &result.field)?, args.output.join("warped.nii"))?;
    let metrics = serde_json::json!({
        "schema_version": CONFIG_SCHEMA_VERSION,
        "engine": result.engine,
        "objective": result.objective,
        "before": result.before,
        "after": result.after,
        "seconds": result.seconds,
        "iterations": result.iterations,
        "converged": result.converged,
        "fell_back": result.fell_back,
        "config": cfg,
    });
    write_json(&args.output.join("metrics.json"), &metrics)?;
    if !quiet {
        println!(
            "{}: cc {:.6} -> {:.6} in {:.2}s",
            result.engine, result.before.cc, result.after.cc, result.seconds
        );
    }
    Ok(())
}

fn load_plan(path: &Path, seed: Option<u64>) -> Result<ExperimentPlan> {
    let mut plan = ExperimentPlan::load(path)?;
    if let Some(s) = seed {
        plan.seed = s;
    }
    Ok(plan)
}

fn output_dir(flag: &Option<PathBuf>, plan: &ExperimentPlan) -> PathBuf {
    flag.clone()
        .or_else(|| plan.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("bench-report"))
}

fn run(cli: Cli) -> Result<()> {
    let quiet = cli.quiet;
    let seed = cli.seed;
    match cli.command {
        Command::Phantom { dims, output } => {
            let v = make_phantom(parse_dims(&dims)?, seed.unwrap_or(0))?;
            save_volume(&v, &output)?;
            if !quiet {
                println!("wrote {}", output.display());
            }
        }
        Command::Gen {
            per_brain,
            manifest_only,
            output,
            sources,
        } => {
            let ids: Vec<String> = sources.iter().map(|p| source_id(p)).collect::<Result<_>>()?;
            let manifest = build_manifest(&ids, per_brain, seed.unwrap_or(0))?;
            fs::create_dir_all(&output).with_context(|| format!("creating {}", output.display()))?;
            manifest.save(output.join("manifest.json"))?;
            if !manifest_only {
                let mut volumes = BTreeMap::new();
                for (id, path) in ids.iter().zip(&sources) {
                    volumes.insert(id.clone(), load_volume(path)?);
                }
                let report = materialize(&manifest, &volumes, &output)?;
                if !quiet {
                    println!(
                        "{} entries: {} written, {} unchanged, {} regenerated",
                        manifest.entries.len(),
                        report.written,
                        report.skipped,
                        report.mismatched.len()
                    );
                }
            } else if !quiet {
                println!("{} entries in manifest", manifest.entries.len());
            }
        }
        Command::Register(args) => cmd_register(&args, seed, quiet)?,
        Command::Evaluate {
            a,
            b,
            bins,
            window,
            json,
        } => {
            let va = load_volume(&a)?;
            let vb = load_volume(&b)?;
            let r = SimilarityReport::compute(&va, &vb, bins)?;
            let lcc = window.map(|w| local_cc(&va, &vb, w)).transpose()?;
            if json {
                let mut value = serde_json::to_value(r)?;
                if let (Some(l), Some(w)) = (lcc, window) {
                    value["local_cc"] = serde_json::json!(l);
                    value["window"] = serde_json::json!(w);
                }
                println!("{}", serde_json::to_string(&value)?);
            } else if !quiet {
                println!("cc={}", r.cc);
                println!("mi={}", r.mi);
                println!("nmi={}", r.nmi);
                println!("msd={}", r.msd);
                if let Some(l) = lcc {
                    println!("local_cc={l}");
                }
            }
        }
        Command::Bench { plan, output } => {
            let plan = load_plan(&plan, seed)?;
            let dir = output_dir(&output, &plan);
            let report = run_experiment(&plan)?;
            emit_report(&report, &dir)?;
            if !quiet {
                println!(
                    "{} rows, {} failed; report in {}",
                    report.rows.len(),
                    report.failures.len(),
                    dir.display()
                );
            }
        }
        Command::SwapTest {
            plan,
            alternate,
            output,
        } => {
            let plan = load_plan(&plan, seed)?;
            let dir = output_dir(&output, &plan);
            let swap = reference_swap_test(&plan, &alternate)?;
            emit_swap_report(&swap, &dir)?;
            if !quiet {
                println!(
                    "max |delta cc| {:.6} over {} rows; report in {}",
                    swap.max_abs_delta_cc(),
                    swap.deltas.len(),
                    dir.display()
                );
            }
        }
        Command::Report { dir } => {
            let written = rerender_report(&dir)?;
            if !quiet {
                println!("rendered {} files in {}", written.len(), dir.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("error: {}", chain.join(": ").replace('\n', " "));
            ExitCode::from(2)
        }
    }
}
