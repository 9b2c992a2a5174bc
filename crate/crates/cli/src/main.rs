//! Command-line front end: dataset generation, training, evaluation,
//! ablation tables, and trajectory export. Every run-config key is exposed
//! both through a key=value file (--config) and as a flag of the same
//! name; flags win over the file.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hyperloc::config::RunConfig;
use hyperloc::harness;

#[derive(Parser)]
#[command(name = "hyperloc", version, about = "LiDAR pose regression on synthetic scans")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// One optional flag per run-config key. Values are passed through the
/// same parser as the config file, so accepted syntax is identical.
#[derive(Args, Default)]
struct ConfigArgs {
    /// key=value config file ("#" comments); flags below override it
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,

    #[arg(long = "seed", value_name = "U64")]
    seed: Option<String>,
    #[arg(long = "data_dir", value_name = "DIR")]
    data_dir: Option<String>,
    #[arg(long = "out_dir", value_name = "DIR")]
    out_dir: Option<String>,
    #[arg(long = "scene_radius", value_name = "METERS")]
    scene_radius: Option<String>,
    #[arg(long = "boxes", value_name = "N")]
    boxes: Option<String>,
    #[arg(long = "beams", value_name = "N")]
    beams: Option<String>,
    #[arg(long = "azimuth_samples", value_name = "N")]
    azimuth_samples: Option<String>,
    #[arg(long = "max_range", value_name = "METERS")]
    max_range: Option<String>,
    #[arg(long = "noise_sigma", value_name = "METERS")]
    noise_sigma: Option<String>,
    #[arg(long = "n_train", value_name = "N")]
    n_train: Option<String>,
    #[arg(long = "n_test", value_name = "N")]
    n_test: Option<String>,
    #[arg(long = "jitter", value_name = "METERS")]
    jitter: Option<String>,
    #[arg(long = "feat_dim", value_name = "N")]
    feat_dim: Option<String>,
    #[arg(long = "head_hidden", value_name = "N")]
    head_hidden: Option<String>,
    #[arg(long = "l3d", value_name = "N")]
    l3d: Option<String>,
    #[arg(long = "l_fusion", value_name = "N")]
    l_fusion: Option<String>,
    #[arg(long = "heads", value_name = "N")]
    heads: Option<String>,
    #[arg(long = "curvature", value_name = "C")]
    curvature: Option<String>,
    /// off|free|symmetric|posdef|riemannian
    #[arg(long = "metric", value_name = "MODE")]
    metric: Option<String>,
    #[arg(long = "branch_3d", value_name = "BOOL")]
    branch_3d: Option<String>,
    #[arg(long = "branch_sph", value_name = "BOOL")]
    branch_sph: Option<String>,
    #[arg(long = "branch_bev", value_name = "BOOL")]
    branch_bev: Option<String>,
    #[arg(long = "use_hyperbolic", value_name = "BOOL")]
    use_hyperbolic: Option<String>,
    #[arg(long = "use_euclidean", value_name = "BOOL")]
    use_euclidean: Option<String>,
    #[arg(long = "sph_h", value_name = "N")]
    sph_h: Option<String>,
    #[arg(long = "sph_w", value_name = "N")]
    sph_w: Option<String>,
    #[arg(long = "bev_h", value_name = "N")]
    bev_h: Option<String>,
    #[arg(long = "bev_w", value_name = "N")]
    bev_w: Option<String>,
    #[arg(long = "lr", value_name = "LR")]
    lr: Option<String>,
    #[arg(long = "weight_decay", value_name = "WD")]
    weight_decay: Option<String>,
    #[arg(long = "batch_size", value_name = "N")]
    batch_size: Option<String>,
    #[arg(long = "epochs", value_name = "N")]
    epochs: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> hyperloc::Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        let overrides: [(&str, &Option<String>); 32] = [
            ("seed", &self.seed),
            ("data_dir", &self.data_dir),
            ("out_dir", &self.out_dir),
            ("scene_radius", &self.scene_radius),
            ("boxes", &self.boxes),
            ("beams", &self.beams),
            ("azimuth_samples", &self.azimuth_samples),
            ("max_range", &self.max_range),
            ("noise_sigma", &self.noise_sigma),
            ("n_train", &self.n_train),
            ("n_test", &self.n_test),
            ("jitter", &self.jitter),
            ("feat_dim", &self.feat_dim),
            ("head_hidden", &self.head_hidden),
            ("l3d", &self.l3d),
            ("l_fusion", &self.l_fusion),
            ("heads", &self.heads),
            ("curvature", &self.curvature),
            ("metric", &self.metric),
            ("branch_3d", &self.branch_3d),
            ("branch_sph", &self.branch_sph),
            ("branch_bev", &self.branch_bev),
            ("use_hyperbolic", &self.use_hyperbolic),
            ("use_euclidean", &self.use_euclidean),
            ("sph_h", &self.sph_h),
            ("sph_w", &self.sph_w),
            ("bev_h", &self.bev_h),
            ("bev_w", &self.bev_w),
            ("lr", &self.lr),
            ("weight_decay", &self.weight_decay),
            ("batch_size", &self.batch_size),
            ("epochs", &self.epochs),
        ];
        for (key, value) in overrides {
            if let Some(v) = value {
                cfg.apply_kv(key, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic scene, route, and both scan splits
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train on the train split, writing a checkpoint and loss curve
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Report translation/rotation errors over a manifest
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Defaults to <out_dir>/checkpoint.bin
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        /// Defaults to <data_dir>/test_manifest.txt
        #[arg(long, value_name = "FILE")]
        manifest: Option<PathBuf>,
        /// Outlier filter: discard predictions farther than this from every
        /// training pose (meters); off when omitted or infinite
        #[arg(long, value_name = "METERS")]
        filter_threshold: Option<f64>,
    },
    /// Train and evaluate a list of presets with one shared dataset
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated preset names; defaults to every known preset
        #[arg(long, value_delimiter = ',', value_name = "NAMES")]
        presets: Option<Vec<String>>,
    },
    /// Write ground-truth vs predicted poses as plot-ready CSV
    ExportTraj {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Defaults to <out_dir>/checkpoint.bin
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        /// Defaults to <data_dir>/test_manifest.txt
        #[arg(long, value_name = "FILE")]
        manifest: Option<PathBuf>,
        /// Defaults to <out_dir>/trajectory.csv
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> hyperloc::Result<()> {
    match cli.command {
        Command::GenData { cfg } => {
            let cfg = cfg.resolve()?;
            let (train, test) = harness::gen_data(&cfg)?;
            println!("wrote {}", train.display());
            println!("wrote {}", test.display());
        }
        Command::Train { cfg } => {
            let cfg = cfg.resolve()?;
            let total = cfg.epochs;
            let outcome = harness::train_with(&cfg, |epoch, loss| {
                println!("epoch {}/{total} mean_loss {loss:.6}", epoch + 1);
            })?;
            println!("wrote {}", outcome.checkpoint_path.display());
            println!("wrote {}", outcome.curve_path.display());
        }
        Command::Eval { cfg, checkpoint, manifest, filter_threshold } => {
            let cfg = cfg.resolve()?;
            let checkpoint = checkpoint.unwrap_or_else(|| cfg.out_dir.join("checkpoint.bin"));
            let manifest = manifest.unwrap_or_else(|| cfg.test_manifest());
            let report = harness::evaluate(&cfg, &checkpoint, &manifest, filter_threshold)?;
            print!("{}", report.render());
        }
        Command::Ablate { cfg, presets } => {
            let cfg = cfg.resolve()?;
            let presets = presets.unwrap_or_else(|| {
                harness::PRESETS.iter().map(|s| s.to_string()).collect()
            });
            let (_, table) = harness::ablate_with(&cfg, &presets, |row| {
                println!("done {}: mean {:.3} m / {:.3} deg", row.preset, row.mean_t, row.mean_r);
            })?;
            print!("{table}");
        }
        Command::ExportTraj { cfg, checkpoint, manifest, out } => {
            let cfg = cfg.resolve()?;
            let checkpoint = checkpoint.unwrap_or_else(|| cfg.out_dir.join("checkpoint.bin"));
            let manifest = manifest.unwrap_or_else(|| cfg.test_manifest());
            let out = out.unwrap_or_else(|| cfg.out_dir.join("trajectory.csv"));
            harness::export_trajectory(&cfg, &checkpoint, &manifest, &out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
