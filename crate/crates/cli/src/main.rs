//! `bootseg` command-line entry point.
//!
//! Exit codes: 0 success, 1 invalid invocation or configuration, 2 runtime
//! failure (I/O, divergence, data without foreground, ...).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bootseg::assembly::PipelineConfig;
use bootseg::fcrn::{fov_table, load_checkpoint, HeadKind, Network};
use bootseg::synth::{generate_dataset, load_dataset, Manifest, SceneConfig, MANIFEST_FILE};
use bootseg::trainer::{train_to_dir, TrainConfig};
use bootseg::workflow::{
    assemble_dirs, evaluate_assembly, evaluate_semantic, infer_to_dir, read_json, run_end_to_end, write_report,
    SemanticSource,
};
use bootseg::{Error, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Deserialize;

#[derive(Parser)]
#[command(name = "bootseg", version, about = "Bootstrapped FCRN instance segmentation workflow")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its manifest.
    Synth {
        /// Scene config (TOML or JSON).
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// Overrides the scene seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the semantic segmentation network.
    TrainSemantic(TrainArgs),
    /// Train the localization network.
    TrainLoc(TrainArgs),
    /// Run a checkpoint over a dataset and store its output maps.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Assemble instances from semantic and localization inference runs.
    Assemble {
        /// Output of `infer` with a semantic checkpoint.
        #[arg(long)]
        probs: PathBuf,
        /// Output of `infer` with a localization checkpoint.
        #[arg(long)]
        transforms: PathBuf,
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Semantic segmentation metrics of a checkpoint.
    EvalSemantic {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Instance metrics (mAP^r) of an assembly directory.
    EvalInstance {
        /// Output directory of `assemble` or `end-to-end`.
        #[arg(long)]
        assembly: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the field-of-view table; fails if any computed value disagrees
    /// with the reported one.
    FovTable,
    /// Inference, assembly and evaluation in one run, optionally training first.
    EndToEnd {
        /// Root holding `semantic/` and `localization/` checkpoints.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluation dataset.
        #[arg(long)]
        manifest: PathBuf,
        /// Train both networks into the checkpoint root first (needs --config).
        #[arg(long)]
        train: bool,
        /// Run config with `[semantic]`, `[localization]` and `[pipeline]` tables.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the training seed of both networks.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the bootstrapping minimum of both networks.
        #[arg(long)]
        min_kept: Option<usize>,
        /// Score maps from the ground truth instead of the semantic network.
        #[arg(long)]
        oracle_semantic: bool,
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Training config (TOML or JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's dataset manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the bootstrapping minimum pixel count.
    #[arg(long)]
    min_kept: Option<usize>,
    /// Checkpoint directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    /// Assembly config (TOML or JSON); replaces a run config's `[pipeline]`.
    #[arg(long = "pipeline")]
    pipeline_config: Option<PathBuf>,
    /// Categories considered per pixel.
    #[arg(long)]
    top_n: Option<usize>,
    /// Box IoU above which votes join a mode.
    #[arg(long)]
    box_nms: Option<f64>,
    /// Mask IoU above which a hypothesis is suppressed.
    #[arg(long)]
    region_nms: Option<f64>,
}

impl PipelineArgs {
    /// `base` unless a `--pipeline` file is given, then the flag overrides.
    fn apply(&self, base: PipelineConfig) -> Result<PipelineConfig> {
        let mut cfg = match &self.pipeline_config {
            Some(p) => load_config(p)?,
            None => base,
        };
        if let Some(v) = self.top_n {
            cfg.top_n = v;
        }
        if let Some(v) = self.box_nms {
            cfg.box_nms_iou = v;
        }
        if let Some(v) = self.region_nms {
            cfg.region_nms_iou = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EndToEndConfig {
    semantic: Option<TrainConfig>,
    localization: Option<TrainConfig>,
    #[serde(default)]
    pipeline: PipelineConfig,
}

fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    if path.extension().and_then(|e| e.to_str()) == Some("toml") {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_owned(),
            source: e,
        })?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_owned(),
            message: e.to_string(),
        })
    } else {
        read_json(path)
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() && !p.as_os_str().is_empty() {
        *p = base.join(&*p);
    }
}

fn override_train(cfg: &mut TrainConfig, seed: Option<u64>, min_kept: Option<usize>) {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(m) = min_kept {
        cfg.bootstrap.min_kept = m;
    }
}

fn train(args: &TrainArgs, head: HeadKind) -> Result<()> {
    let mut cfg = TrainConfig::load(&args.config)?;
    if cfg.network.head != head {
        return Err(Error::Config(format!(
            "{}: network head is {:?}, this command trains {head:?}",
            args.config.display(),
            cfg.network.head
        )));
    }
    if let Some(m) = &args.manifest {
        cfg.manifest = m.clone();
    }
    override_train(&mut cfg, args.seed, args.min_kept);
    let out = train_to_dir(&cfg, &args.out)?;
    let last = out.log.last().map_or(f64::NAN, |r| r.loss);
    println!("trained {} steps, final loss {last:.6}, checkpoint {}", out.log.len(), args.out.display());
    Ok(())
}

fn num_categories(manifest: &Path) -> Result<usize> {
    Ok(Manifest::load(manifest)?.config.num_categories)
}

#[allow(clippy::too_many_arguments)]
fn end_to_end(
    root: &Path,
    manifest: &Path,
    train: bool,
    config: Option<&Path>,
    seed: Option<u64>,
    min_kept: Option<usize>,
    oracle: bool,
    pipeline: &PipelineArgs,
    out: &Path,
) -> Result<()> {
    let e2e: Option<EndToEndConfig> = match config {
        Some(path) => {
            let mut c: EndToEndConfig = load_config(path)?;
            let base = path.parent().unwrap_or(Path::new("."));
            for t in [&mut c.semantic, &mut c.localization].into_iter().flatten() {
                resolve(base, &mut t.manifest);
                override_train(t, seed, min_kept);
            }
            Some(c)
        }
        None => None,
    };
    let (sem_dir, loc_dir) = (root.join("semantic"), root.join("localization"));
    if train {
        let (sem, loc) = match &e2e {
            Some(EndToEndConfig {
                semantic: Some(s),
                localization: Some(l),
                ..
            }) => (s, l),
            _ => {
                return Err(Error::Config(
                    "--train needs --config with [semantic] and [localization] tables".into(),
                ))
            }
        };
        for (cfg, head) in [(sem, HeadKind::Semantic), (loc, HeadKind::Localization)] {
            if cfg.network.head != head {
                return Err(Error::Config(format!("{head:?} table configures a {:?} head", cfg.network.head)));
            }
        }
        train_to_dir(sem, &sem_dir)?;
        train_to_dir(loc, &loc_dir)?;
    }
    let cfg = pipeline.apply(e2e.map(|c| c.pipeline).unwrap_or_default())?;
    let loc = load_checkpoint(&loc_dir)?;
    let sem: Option<Network<f32>> = if oracle && !sem_dir.exists() {
        None
    } else {
        Some(load_checkpoint(&sem_dir)?)
    };
    let source = match (&sem, oracle) {
        (Some(n), false) => SemanticSource::Network(n),
        (n, _) => SemanticSource::Oracle(n.as_ref()),
    };
    let (_, samples) = load_dataset(manifest)?;
    let report = run_end_to_end(source, &loc, &samples, &cfg, Some(out))?;
    let table = report.table();
    write_report(out, &report, &table)?;
    print!("{table}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, count, seed, out } => {
            let mut scene: SceneConfig = load_config(&config)?;
            if let Some(s) = seed {
                scene.seed = s;
            }
            let m = generate_dataset(&scene, count, &out)?;
            println!("{} samples, manifest {}", m.samples.len(), out.join(MANIFEST_FILE).display());
        }
        Command::TrainSemantic(args) => train(&args, HeadKind::Semantic)?,
        Command::TrainLoc(args) => train(&args, HeadKind::Localization)?,
        Command::Infer {
            checkpoint,
            manifest,
            out,
        } => {
            let net = load_checkpoint(&checkpoint)?;
            let (_, samples) = load_dataset(&manifest)?;
            let index = infer_to_dir(&net, &samples, &out)?;
            println!("{} {:?} maps under {}", index.maps.len(), index.head, out.display());
        }
        Command::Assemble {
            probs,
            transforms,
            pipeline,
            out,
        } => {
            let cfg = pipeline.apply(PipelineConfig::default())?;
            let n = assemble_dirs(&probs, &transforms, &cfg, &out)?;
            println!("assembled {n} images under {}", out.display());
        }
        Command::EvalSemantic {
            checkpoint,
            manifest,
            out,
        } => {
            let net = load_checkpoint(&checkpoint)?;
            let (_, samples) = load_dataset(&manifest)?;
            let m = evaluate_semantic(&net, &samples)?;
            let table = m.table();
            write_report(&out, &m, &table)?;
            print!("{table}");
        }
        Command::EvalInstance { assembly, manifest, out } => {
            let k = num_categories(&manifest)?;
            let (_, samples) = load_dataset(&manifest)?;
            let report = evaluate_assembly(&assembly, &samples, k)?;
            let table = report.as_ref().map_or_else(|| "no ground-truth instances\n".to_string(), |r| r.table());
            write_report(&out, &report, &table)?;
            print!("{table}");
        }
        Command::FovTable => {
            let (table, mismatches) = fov_table();
            print!("{table}");
            if !mismatches.is_empty() {
                return Err(Error::Config(format!("{} FoV rows disagree: {mismatches:?}", mismatches.len())));
            }
        }
        Command::EndToEnd {
            checkpoint,
            manifest,
            train,
            config,
            seed,
            min_kept,
            oracle_semantic,
            pipeline,
            out,
        } => end_to_end(
            &checkpoint,
            &manifest,
            train,
            config.as_deref(),
            seed,
            min_kept,
            oracle_semantic,
            &pipeline,
            &out,
        )?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
