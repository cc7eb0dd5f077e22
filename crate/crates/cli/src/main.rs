mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{ArgAction, CommandFactory, FromArgMatches, Parser, Subcommand};
use image::{ImageBuffer, Luma};
use rdcfa_core::backbone::extract_patch_features;
use rdcfa_core::checkpoint::Checkpoint;
use rdcfa_core::config::Config;
use rdcfa_core::data::{generate_synthetic, load_dataset, SyntheticSpec};
use rdcfa_core::evaluator::{write_ablation_csv, ReportTable};
use rdcfa_core::pipeline::{
    backbone_info, evaluate_checkpoint, prepare, run_ablation, run_seeds, train_checkpoint, AblationGrid,
    PreparedDataset,
};
use rdcfa_core::scorer::score_features;
use rdcfa_core::Error;

use manifest::RunManifest;

#[derive(Parser, Debug)]
#[command(name = "rdcfa", version, about = "Multi-class anomaly detection and localization")]
struct Cli {
    /// TOML config file, or a manifest.json from an earlier run
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key; repeatable
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for --set train.seed=N (synth: generator seed)
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write model.ckpt plus train_report.json
    Train {
        /// Dataset root (default: data.root)
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory (default: <output.dir>/train-<timestamp>)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-class detection and localization AUROC of a checkpoint
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write score-map PNGs and image scores for individual images
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a procedural multi-class dataset in the standard layout
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 20)]
        train: usize,
        #[arg(long, default_value_t = 5)]
        test_good: usize,
        #[arg(long, default_value_t = 5)]
        test_defect: usize,
        #[arg(long, default_value_t = 12)]
        anomaly_min: usize,
        #[arg(long, default_value_t = 20)]
        anomaly_max: usize,
    },
    /// Train and evaluate every cell of an ablation grid
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
        /// flags (2x2 bank enhancements), dissimilarity (off/on) or hyper (rho x alpha_kl x alpha_dr)
        #[arg(long, default_value = "flags")]
        grid: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train { .. } => "train",
            Command::Evaluate { .. } => "evaluate",
            Command::Score { .. } => "score",
            Command::Synth { .. } => "synth",
            Command::Ablate { .. } => "ablate",
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) => 2,
                Error::Io { .. } | Error::Checkpoint(_) | Error::Weights(_) => 3,
                Error::Version { .. } | Error::Shape(_) | Error::Sizing { .. } => 4,
                Error::Data(_) | Error::EmptyClass(_) | Error::Image { .. } | Error::LabelOutOfRange { .. } => 5,
                Error::Divergence { .. } | Error::NonFinite(_) => 6,
                _ => 1,
            };
        }
    }
    1
}

fn resolve(cli: &Cli, mut cfg: Config) -> anyhow::Result<Config> {
    if let Some(path) = &cli.config {
        cfg.load_file(path)?;
    }
    cfg.apply_overrides(&cli.set)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(explicit: &Option<PathBuf>, cfg: &Config, command: &str) -> PathBuf {
    explicit.clone().unwrap_or_else(|| {
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S");
        cfg.output_dir.join(format!("{command}-{stamp}"))
    })
}

fn data_root(explicit: &Option<PathBuf>, cfg: &Config) -> anyhow::Result<PathBuf> {
    match explicit.clone().or_else(|| cfg.data_root.clone()) {
        Some(p) => Ok(p),
        None => Err(Error::Config("no dataset given (use --data or data.root)".into()).into()),
    }
}

fn prepare_data(cfg: &Config, root: &Path) -> anyhow::Result<PreparedDataset> {
    let dataset = load_dataset(root)?;
    log::info!(
        "dataset {}: {} classes, {} train / {} test images",
        root.display(),
        dataset.num_classes(),
        dataset.train.len(),
        dataset.num_test()
    );
    let backbone = cfg.build_backbone()?;
    Ok(prepare(&dataset, backbone.as_ref(), &cfg.preprocess)?)
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    if !path.is_file() {
        return Err(Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found"),
        }
        .into());
    }
    Ok(Checkpoint::load(path)?)
}

/// Run `work` with a manifest written first and finalized afterwards.
fn with_manifest(
    dir: &Path,
    command: &str,
    cfg: &Config,
    seeds: Vec<u64>,
    work: impl FnOnce(&mut Vec<PathBuf>) -> anyhow::Result<()>,
) -> anyhow::Result<()> {
    let mut manifest = RunManifest::begin(command, cfg.to_flat(), seeds);
    let path = manifest.write(dir)?;
    log::info!("manifest: {}", path.display());
    let result = work(&mut manifest.artifacts);
    let status = match &result {
        Ok(()) => "ok".to_string(),
        Err(e) => format!("failed: {e:#}"),
    };
    manifest.finish(dir, &status)?;
    result
}

fn cmd_train(cli: &Cli, data: &Option<PathBuf>, out: &Option<PathBuf>) -> anyhow::Result<()> {
    let cfg = resolve(cli, Config::default())?;
    let root = data_root(data, &cfg)?;
    let dir = out_dir(out, &cfg, "train");
    with_manifest(&dir, "train", &cfg, vec![cfg.seed], |artifacts| {
        let prepared = prepare_data(&cfg, &root)?;
        let (ck, report) = train_checkpoint(&cfg, &prepared)?;
        let ck_path = dir.join("model.ckpt");
        ck.save(&ck_path)?;
        let report_path = dir.join("train_report.json");
        std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)
            .with_context(|| format!("writing {}", report_path.display()))?;
        artifacts.extend([ck_path.clone(), report_path]);
        if let (Some(first), Some(last)) = (report.epochs.first(), report.epochs.last()) {
            println!(
                "trained {} epochs in {:.1}s: total loss {:.6} -> {:.6}",
                report.epochs.len(),
                report.wall_clock_secs,
                first.total,
                last.total
            );
        }
        println!("checkpoint {} (sha256 {})", ck_path.display(), ck.digest()?);
        Ok(())
    })
}

/// Checkpoint config with the file and `--set` overrides layered on top.
fn checkpoint_config(cli: &Cli, ck: &Checkpoint) -> anyhow::Result<Config> {
    let base = Config::from_flat(&ck.config)?;
    resolve(cli, base)
}

fn cmd_evaluate(cli: &Cli, checkpoint: &Path, data: &Option<PathBuf>, out: &Option<PathBuf>) -> anyhow::Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let cfg = checkpoint_config(cli, &ck)?;
    let root = data_root(data, &cfg)?;
    let dir = out_dir(out, &cfg, "evaluate");
    with_manifest(&dir, "evaluate", &cfg, vec![ck.train_config.seed], |artifacts| {
        let prepared = prepare_data(&cfg, &root)?;
        let results = evaluate_checkpoint(&ck, &prepared, cfg.sigma)?;
        let table = ReportTable::from_runs(&[results], &cfg.texture_classes)?;
        let csv_path = dir.join("report.csv");
        let file = std::fs::File::create(&csv_path).with_context(|| format!("creating {}", csv_path.display()))?;
        table.write_csv(file)?;
        let text_path = dir.join("report.txt");
        std::fs::write(&text_path, table.to_text())?;
        artifacts.extend([csv_path, text_path]);
        print!("{}", table.to_text());
        Ok(())
    })
}

fn write_score_png(scores: &ndarray::Array2<f64>, path: &Path) -> anyhow::Result<(f64, f64)> {
    let (lo, hi) = scores
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (h, w) = scores.dim();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let v = (scores[[y as usize, x as usize]] - lo) / span;
        Luma([(v * 65535.0).round() as u16])
    });
    img.save(path).with_context(|| format!("writing {}", path.display()))?;
    Ok((lo, hi))
}

fn cmd_score(cli: &Cli, checkpoint: &Path, images: &[PathBuf], out: &Option<PathBuf>) -> anyhow::Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let cfg = checkpoint_config(cli, &ck)?;
    let dir = out_dir(out, &cfg, "score");
    with_manifest(&dir, "score", &cfg, vec![ck.train_config.seed], |artifacts| {
        let backbone = cfg.build_backbone()?;
        let info = backbone_info(backbone.as_ref());
        if info.weights_digest != ck.backbone.weights_digest || info.feature_dim != ck.backbone.feature_dim {
            return Err(Error::Shape(format!("backbone `{}` differs from the checkpoint's", info.name)).into());
        }
        let size = cfg.preprocess.size;
        let mut records = String::from("image\timage_score\tmap_min\tmap_max\n");
        for (i, path) in images.iter().enumerate() {
            let image = cfg.preprocess.load(path)?;
            let features = extract_patch_features(backbone.as_ref(), image.view())?;
            let map = score_features(&features, &ck.model, &ck.bank, size, size, cfg.sigma)?;
            let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let base = format!("{i:04}_{stem}");
            let png = dir.join(format!("{base}_score.png"));
            let (lo, hi) = write_score_png(&map.pixel_scores, &png)?;
            artifacts.push(png);
            if let Some(t) = cfg.threshold {
                let mask_path = dir.join(format!("{base}_mask.png"));
                let mask: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_fn(size as u32, size as u32, |x, y| {
                    Luma([if map.pixel_scores[[y as usize, x as usize]] > t { 255 } else { 0 }])
                });
                mask.save(&mask_path)
                    .with_context(|| format!("writing {}", mask_path.display()))?;
                artifacts.push(mask_path);
            }
            records.push_str(&format!("{}\t{:.8e}\t{lo:.8e}\t{hi:.8e}\n", path.display(), map.image_score));
            println!("{}\t{:.6e}", path.display(), map.image_score);
        }
        let rec = dir.join("scores.tsv");
        std::fs::write(&rec, records)?;
        artifacts.push(rec);
        Ok(())
    })
}

fn cmd_synth(cli: &Cli, out: &Path, spec: SyntheticSpec) -> anyhow::Result<()> {
    let cfg = resolve(cli, Config::default())?;
    let spec = SyntheticSpec {
        seed: cli.seed.unwrap_or(0),
        ..spec
    };
    spec.validate()?;
    with_manifest(out, "synth", &cfg, vec![spec.seed], |artifacts| {
        let placements = generate_synthetic(&spec, out)?;
        let path = out.join("placements.json");
        std::fs::write(&path, serde_json::to_string_pretty(&placements)?)?;
        artifacts.push(path);
        println!(
            "wrote {} classes x ({} train, {} test) to {}",
            spec.n_classes,
            spec.train_per_class,
            spec.test_good_per_class + spec.test_defect_per_class,
            out.display()
        );
        Ok(())
    })
}

fn cmd_ablate(cli: &Cli, data: &Option<PathBuf>, grid: &str, out: &Option<PathBuf>) -> anyhow::Result<()> {
    let cfg = resolve(cli, Config::default())?;
    let grid: AblationGrid = grid.parse()?;
    let root = data_root(data, &cfg)?;
    let dir = out_dir(out, &cfg, "ablate");
    with_manifest(&dir, "ablate", &cfg, run_seeds(&cfg), |artifacts| {
        let prepared = prepare_data(&cfg, &root)?;
        let rows = run_ablation(grid, &cfg, &prepared)?;
        let name = match grid {
            AblationGrid::Flags => "ablation_flags.csv",
            AblationGrid::Dissimilarity => "ablation_dissimilarity.csv",
            AblationGrid::Hyper => "ablation_hyper.csv",
        };
        let path = dir.join(name);
        let file = std::fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        write_ablation_csv(&rows, file)?;
        artifacts.push(path.clone());
        println!("augment refresh dissim   rho  a_kl  a_dr  detection  localization");
        for r in &rows {
            println!(
                "{:>7} {:>7} {:>6} {:>5} {:>5} {:>5}  {:>9.4}  {:>12}",
                r.flags.augment_bank,
                r.flags.refresh_bank,
                r.flags.use_dissimilarity,
                r.rho,
                r.alpha_kl,
                r.alpha_dr,
                r.detection,
                r.localization.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
            );
        }
        println!("wrote {}", path.display());
        Ok(())
    })
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Train { data, out } => cmd_train(cli, data, out),
        Command::Evaluate { checkpoint, data, out } => cmd_evaluate(cli, checkpoint, data, out),
        Command::Score {
            checkpoint,
            images,
            out,
        } => cmd_score(cli, checkpoint, images, out),
        Command::Synth {
            out,
            classes,
            size,
            train,
            test_good,
            test_defect,
            anomaly_min,
            anomaly_max,
        } => cmd_synth(
            cli,
            out,
            SyntheticSpec {
                n_classes: *classes,
                image_size: *size,
                train_per_class: *train,
                test_good_per_class: *test_good,
                test_defect_per_class: *test_defect,
                anomaly_min: *anomaly_min,
                anomaly_max: *anomaly_max,
                seed: 0,
            },
        ),
        Command::Ablate { data, grid, out } => cmd_ablate(cli, data, grid, out),
    }
}

fn main() -> ExitCode {
    let keys = Config::help_text();
    let command = Cli::command()
        .after_help(keys.clone())
        .mut_subcommands(|c| c.after_help(keys.clone()));
    let cli = match Cli::from_arg_matches(&command.get_matches()) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e:#}", cli.command.name());
            ExitCode::from(exit_code(&e))
        }
    }
}
