//! End-to-end entry points: dataset generation, the training loop,
//! evaluation with outlier filtering, ablation presets, and trajectory
//! export. Everything is deterministic in (config, seed).

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_checkpoint, write_checkpoint};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{forward, scan_loss, ModelConfig, ModelIds, ScanFeatures};
use crate::optim::Adam;
use crate::params::{Graph, ParamStore};
use crate::pose::{logquat_to_quat, pose_metrics, LogQuat, PoseSE3};
use crate::scanio::{fmt_g17, read_manifest, read_scan};
use crate::synth::{make_dataset, make_route, Scene};
use crate::tensor::TensorBase;

/// Route resolution: 64 distinct poses around the loop (the 65th repeats
/// the first so trajectory continuity covers the wrap).
pub const ROUTE_POSES: usize = 65;

// ── Dataset generation ──────────────────────────────────────────────────

/// Builds the world and renders both splits into `data_dir`. The route is
/// laid out first so obstacle placement can keep a clearance margin around
/// every sensor pose (train poses plus the test jitter radius).
pub fn gen_data(cfg: &RunConfig) -> Result<(PathBuf, PathBuf)> {
    cfg.validate()?;
    let shell = Scene { boxes: Vec::new(), radius: cfg.scene_radius, seed: cfg.scene_seed() };
    let route = make_route(&shell, ROUTE_POSES, cfg.route_seed())?;
    let avoid: Vec<[f64; 3]> = route.poses.iter().map(|p| p.t).collect();
    let clearance = 1.0 + cfg.jitter;
    let scene = Scene::generate(cfg.scene_radius, cfg.boxes, cfg.scene_seed(), &avoid, clearance)?;
    let sensor = cfg.sensor();
    sensor.validate()?;
    make_dataset(&scene, &sensor, &route, &cfg.split(), &cfg.data_dir)
}

/// Generates the dataset unless both manifests already exist.
pub fn ensure_dataset(cfg: &RunConfig) -> Result<(PathBuf, PathBuf)> {
    let (train, test) = (cfg.train_manifest(), cfg.test_manifest());
    if train.is_file() && test.is_file() {
        return Ok((train, test));
    }
    gen_data(cfg)
}

// ── Model assembly ──────────────────────────────────────────────────────

/// Derives the network shape and initializes parameters from the config
/// seed. Rebuilding with the same config yields the same layout, which is
/// what checkpoint loading relies on.
pub fn build_model(cfg: &RunConfig) -> Result<(ModelConfig<f64>, ParamStore<f64>, ModelIds)> {
    let mc = cfg.model_config()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed());
    let ids = ModelIds::create(&mut store, &mut rng, &mc)?;
    Ok((mc, store, ids))
}

struct LoadedScan {
    scan_id: u64,
    pose: PoseSE3<f64>,
    features: ScanFeatures<f64>,
}

/// Reads every scan in a manifest and precomputes its parameter-independent
/// features (grouping plan, projection images) once.
fn load_split(manifest: &Path, mc: &ModelConfig<f64>) -> Result<Vec<LoadedScan>> {
    let entries = read_manifest::<f64>(manifest)?;
    let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut out = Vec::with_capacity(entries.len());
    for entry in entries {
        let scan = read_scan::<f64>(&base.join(&entry.path))?;
        let features = ScanFeatures::prepare(&scan, mc)?;
        out.push(LoadedScan { scan_id: scan.scan_id, pose: entry.pose, features });
    }
    Ok(out)
}

// ── Training ────────────────────────────────────────────────────────────

pub struct TrainOutcome {
    /// Mean loss per epoch, in epoch order.
    pub epoch_losses: Vec<f64>,
    pub checkpoint_path: PathBuf,
    pub curve_path: PathBuf,
}

/// Minibatch loop over seeded shuffles of the training split. Gradients
/// are averaged over each batch; a non-finite loss aborts with the global
/// step index. Zero epochs writes the initialization unchanged.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    train_with(cfg, |_, _| {})
}

/// [`train`] with a per-epoch observer `(epoch index, mean loss)`, called
/// as each epoch finishes.
pub fn train_with(cfg: &RunConfig, mut on_epoch: impl FnMut(usize, f64)) -> Result<TrainOutcome> {
    cfg.validate()?;
    ensure_dataset(cfg)?;
    let (mc, mut store, ids) = build_model(cfg)?;
    let scans = load_split(&cfg.train_manifest(), &mc)?;
    if scans.is_empty() {
        return Err(Error::EmptyInput("train: empty training manifest"));
    }

    let mut opt = Adam::new(&store, cfg.lr, cfg.weight_decay);
    let mut order: Vec<usize> = (0..scans.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed(epoch));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Vec<Option<TensorBase<f64>>> = vec![None; store.len()];
            for &si in batch {
                let scan = &scans[si];
                let mut g = Graph::new(&store);
                let (loss, _) = scan_loss(&mut g, &mc, &ids, &scan.features, &scan.pose)?;
                let value = g.tape.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::Diverged { step });
                }
                loss_sum += value;
                g.backward(loss)?;
                for (slot, grad) in acc.iter_mut().zip(g.grads()) {
                    match (slot.as_mut(), grad) {
                        (Some(a), Some(b)) => a.add_assign(&b),
                        (None, Some(b)) => *slot = Some(b),
                        _ => {}
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for slot in acc.iter_mut().flatten() {
                *slot = slot.map(|x| x * inv);
            }
            opt.step(&mut store, &acc)?;
            step += 1;
        }
        if !store.all_finite() {
            return Err(Error::Diverged { step });
        }
        let mean = loss_sum / scans.len() as f64;
        epoch_losses.push(mean);
        on_epoch(epoch, mean);
    }

    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| Error::io(cfg.out_dir.display().to_string(), e))?;
    let checkpoint_path = cfg.out_dir.join("checkpoint.bin");
    write_checkpoint(&checkpoint_path, &store)?;
    let curve_path = cfg.out_dir.join("loss_curve.csv");
    let mut curve = String::from("epoch,mean_loss\n");
    for (i, loss) in epoch_losses.iter().enumerate() {
        curve.push_str(&format!("{},{}\n", i + 1, fmt_g17(*loss)));
    }
    std::fs::write(&curve_path, curve)
        .map_err(|e| Error::io(curve_path.display().to_string(), e))?;
    Ok(TrainOutcome { epoch_losses, checkpoint_path, curve_path })
}

// ── Evaluation ──────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct PredictedPose {
    pub scan_id: u64,
    pub gt: PoseSE3<f64>,
    pub pred: PoseSE3<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanEval {
    pub scan_id: u64,
    pub t_err: f64,
    pub r_err: f64,
    /// False when the outlier filter discarded this prediction.
    pub retained: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub scans: Vec<ScanEval>,
    pub mean_t: f64,
    pub mean_r: f64,
    pub median_t: f64,
    pub median_r: f64,
    /// Percentage of predictions surviving the filter; 100.0 when off.
    pub retained_percent: f64,
}

impl EvalReport {
    pub fn render(&self) -> String {
        let kept = self.scans.iter().filter(|s| s.retained).count();
        format!(
            "scans {} retained {} ({:.1}%)\nmean   {:.3} m  {:.3} deg\nmedian {:.3} m  {:.3} deg\n",
            self.scans.len(),
            kept,
            self.retained_percent,
            self.mean_t,
            self.mean_r,
            self.median_t,
            self.median_r,
        )
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Aggregates per-scan errors. With a finite threshold, a prediction whose
/// translation is farther than the threshold from every training pose is
/// discarded from the aggregates and counted against retained-fraction.
/// `None` behaves exactly like an infinite threshold.
pub fn compute_report(
    preds: &[PredictedPose],
    train_poses: &[PoseSE3<f64>],
    threshold: Option<f64>,
) -> Result<EvalReport> {
    if preds.is_empty() {
        return Err(Error::EmptyInput("compute_report: no predictions"));
    }
    let thr = threshold.unwrap_or(f64::INFINITY);
    if thr.is_nan() || thr <= 0.0 {
        return Err(Error::domain("compute_report", format!("threshold must be > 0, got {thr}")));
    }
    if thr.is_finite() && train_poses.is_empty() {
        return Err(Error::EmptyInput("compute_report: filtering needs training poses"));
    }

    let mut scans = Vec::with_capacity(preds.len());
    for p in preds {
        let (t_err, r_err) = pose_metrics(&p.pred, &p.gt);
        let retained = if thr.is_finite() {
            let nearest = train_poses
                .iter()
                .map(|tp| {
                    let d = [
                        p.pred.t[0] - tp.t[0],
                        p.pred.t[1] - tp.t[1],
                        p.pred.t[2] - tp.t[2],
                    ];
                    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
                })
                .fold(f64::INFINITY, f64::min);
            nearest <= thr
        } else {
            true
        };
        scans.push(ScanEval { scan_id: p.scan_id, t_err, r_err, retained });
    }

    let mut kept_t: Vec<f64> = scans.iter().filter(|s| s.retained).map(|s| s.t_err).collect();
    let mut kept_r: Vec<f64> = scans.iter().filter(|s| s.retained).map(|s| s.r_err).collect();
    if kept_t.is_empty() {
        return Err(Error::domain("compute_report", "every prediction was filtered out"));
    }
    let n = kept_t.len() as f64;
    let mean_t = kept_t.iter().sum::<f64>() / n;
    let mean_r = kept_r.iter().sum::<f64>() / n;
    kept_t.sort_by(|a, b| a.partial_cmp(b).expect("finite errors"));
    kept_r.sort_by(|a, b| a.partial_cmp(b).expect("finite errors"));
    let report = EvalReport {
        retained_percent: 100.0 * n / scans.len() as f64,
        median_t: median(&kept_t),
        median_r: median(&kept_r),
        mean_t,
        mean_r,
        scans,
    };
    Ok(report)
}

/// Runs the forward pass over every scan in a manifest and decodes the
/// last regression head (the fusion head when present, otherwise the
/// single branch head) into a pose.
pub fn predict_manifest(
    store: &ParamStore<f64>,
    ids: &ModelIds,
    mc: &ModelConfig<f64>,
    manifest: &Path,
) -> Result<Vec<PredictedPose>> {
    let scans = load_split(manifest, mc)?;
    let mut out = Vec::with_capacity(scans.len());
    for scan in &scans {
        let mut g = Graph::new(store);
        let preds = forward(&mut g, mc, ids, &scan.features)?;
        let (_, head) = preds.last().ok_or(Error::EmptyInput("predict: no heads"))?;
        let t = g.tape.value(head.t).data();
        let r = g.tape.value(head.r).data();
        let q = logquat_to_quat(LogQuat([r[0], r[1], r[2]]));
        let pred = PoseSE3::new([t[0], t[1], t[2]], q)?;
        out.push(PredictedPose { scan_id: scan.scan_id, gt: scan.pose, pred });
    }
    Ok(out)
}

/// Loads a checkpoint into a freshly built model and reports errors over a
/// manifest. A finite threshold turns on the outlier filter against the
/// training trajectory; `None` and `inf` disable it.
pub fn evaluate(
    cfg: &RunConfig,
    checkpoint: &Path,
    manifest: &Path,
    threshold: Option<f64>,
) -> Result<EvalReport> {
    let (mc, mut store, ids) = build_model(cfg)?;
    load_checkpoint(checkpoint, &mut store)?;
    let preds = predict_manifest(&store, &ids, &mc, manifest)?;
    let train_poses: Vec<PoseSE3<f64>> = match threshold {
        Some(t) if t.is_finite() => {
            read_manifest::<f64>(&cfg.train_manifest())?.into_iter().map(|e| e.pose).collect()
        }
        _ => Vec::new(),
    };
    compute_report(&preds, &train_poses, threshold)
}

// ── Ablation ────────────────────────────────────────────────────────────

/// Preset names accepted by [`apply_preset`], in table order.
pub const PRESETS: &[&str] = &[
    "full",
    "3d",
    "sph",
    "bev",
    "3d+sph",
    "3d+bev",
    "sph+bev",
    "all3",
    "no-hyperbolic",
    "no-euclidean",
    "no-metric",
];

/// Maps a preset name to a config derived from `base`: branch subsets,
/// space toggles, or the metric constraint switched off. Training outputs
/// land in a per-preset subdirectory; the dataset stays shared.
pub fn apply_preset(base: &RunConfig, preset: &str) -> Result<RunConfig> {
    let mut cfg = base.clone();
    let set = |c: &mut RunConfig, p3d: bool, sph: bool, bev: bool| {
        c.branch_3d = p3d;
        c.branch_sph = sph;
        c.branch_bev = bev;
    };
    match preset {
        "full" => {}
        "3d" => set(&mut cfg, true, false, false),
        "sph" => set(&mut cfg, false, true, false),
        "bev" => set(&mut cfg, false, false, true),
        "3d+sph" => set(&mut cfg, true, true, false),
        "3d+bev" => set(&mut cfg, true, false, true),
        "sph+bev" => set(&mut cfg, false, true, true),
        "all3" => set(&mut cfg, true, true, true),
        "no-hyperbolic" => cfg.use_hyperbolic = false,
        "no-euclidean" => cfg.use_euclidean = false,
        "no-metric" => cfg.metric = crate::fusion::MetricMode::Disabled,
        _ => {
            return Err(Error::Config(format!(
                "unknown preset '{preset}' (expected one of {})",
                PRESETS.join(", ")
            )))
        }
    }
    cfg.out_dir = base.out_dir.join(preset);
    Ok(cfg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub preset: String,
    pub mean_t: f64,
    pub mean_r: f64,
}

/// Trains and evaluates each preset with the shared seed and dataset,
/// returning one row per preset plus an aligned text table.
pub fn ablate(base: &RunConfig, presets: &[String]) -> Result<(Vec<AblationRow>, String)> {
    ablate_with(base, presets, |_| {})
}

/// [`ablate`] with a per-preset observer, called as each row completes.
pub fn ablate_with(
    base: &RunConfig,
    presets: &[String],
    mut on_row: impl FnMut(&AblationRow),
) -> Result<(Vec<AblationRow>, String)> {
    if presets.is_empty() {
        return Err(Error::EmptyInput("ablate: no presets"));
    }
    ensure_dataset(base)?;
    let mut rows = Vec::with_capacity(presets.len());
    for preset in presets {
        let cfg = apply_preset(base, preset)?;
        let outcome = train(&cfg)?;
        let report = evaluate(&cfg, &outcome.checkpoint_path, &cfg.test_manifest(), None)?;
        let row = AblationRow {
            preset: preset.clone(),
            mean_t: report.mean_t,
            mean_r: report.mean_r,
        };
        on_row(&row);
        rows.push(row);
    }
    let width = rows.iter().map(|r| r.preset.len()).max().unwrap_or(6).max("preset".len());
    let mut table = format!("{:<width$}  {:>12}  {:>14}\n", "preset", "mean_t_err_m", "mean_r_err_deg");
    for row in &rows {
        table.push_str(&format!(
            "{:<width$}  {:>12.3}  {:>14.3}\n",
            row.preset, row.mean_t, row.mean_r
        ));
    }
    Ok((rows, table))
}

// ── Trajectory export ───────────────────────────────────────────────────

pub const TRAJECTORY_HEADER: &str =
    "scan_id,gt_x,gt_y,gt_z,pred_x,pred_y,pred_z,t_err_m,r_err_deg";

/// Writes plot-ready ground-truth vs predicted poses, one CSV row per scan
/// in manifest order.
pub fn export_trajectory(
    cfg: &RunConfig,
    checkpoint: &Path,
    manifest: &Path,
    out_path: &Path,
) -> Result<()> {
    let (mc, mut store, ids) = build_model(cfg)?;
    load_checkpoint(checkpoint, &mut store)?;
    let preds = predict_manifest(&store, &ids, &mc, manifest)?;
    let mut csv = String::from(TRAJECTORY_HEADER);
    csv.push('\n');
    for p in &preds {
        let (t_err, r_err) = pose_metrics(&p.pred, &p.gt);
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            p.scan_id,
            fmt_g17(p.gt.t[0]),
            fmt_g17(p.gt.t[1]),
            fmt_g17(p.gt.t[2]),
            fmt_g17(p.pred.t[0]),
            fmt_g17(p.pred.t[1]),
            fmt_g17(p.pred.t[2]),
            fmt_g17(t_err),
            fmt_g17(r_err),
        ));
    }
    if let Some(dir) = out_path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        }
    }
    std::fs::write(out_path, csv).map_err(|e| Error::io(out_path.display().to_string(), e))
}
