//! Run configuration: every knob of data generation, model shape, and
//! training, parseable from a UTF-8 key=value file ("#" starts a comment)
//! and overridable key by key. Unknown keys are rejected.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::encoder2d::{ConvStackConfig, ConvStage};
use crate::encoder3d::{GaConfig, SaConfig, Stack3dConfig};
use crate::error::{Error, Result};
use crate::fusion::{MetricMode, SpaceFlags};
use crate::model::{BranchSet, ModelConfig};
use crate::synth::{SensorModel, SplitSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,

    // world
    pub scene_radius: f64,
    pub boxes: usize,
    pub beams: usize,
    pub azimuth_samples: usize,
    pub max_range: f64,
    pub noise_sigma: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub jitter: f64,

    // model
    pub feat_dim: usize,
    pub head_hidden: usize,
    pub l3d: usize,
    pub l_fusion: usize,
    pub heads: usize,
    pub curvature: f64,
    pub metric: MetricMode,
    pub branch_3d: bool,
    pub branch_sph: bool,
    pub branch_bev: bool,
    pub use_hyperbolic: bool,
    pub use_euclidean: bool,
    pub sph_h: usize,
    pub sph_w: usize,
    pub bev_h: usize,
    pub bev_w: usize,

    // optimization
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            data_dir: PathBuf::from("data/default"),
            out_dir: PathBuf::from("runs/default"),
            scene_radius: 20.0,
            boxes: 12,
            beams: 16,
            azimuth_samples: 180,
            max_range: 30.0,
            noise_sigma: 0.02,
            n_train: 500,
            n_test: 100,
            jitter: 0.5,
            feat_dim: 64,
            head_hidden: 32,
            l3d: 2,
            l_fusion: 2,
            heads: 8,
            curvature: 1.0,
            metric: MetricMode::Free,
            branch_3d: true,
            branch_sph: true,
            branch_bev: false,
            use_hyperbolic: true,
            use_euclidean: true,
            sph_h: 32,
            sph_w: 64,
            bev_h: 64,
            bev_w: 64,
            lr: 1e-3,
            weight_decay: 5e-4,
            batch_size: 8,
            epochs: 60,
        }
    }
}

fn parse_as<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse::<T>()
        .map_err(|e| Error::Config(format!("key '{key}': cannot parse '{value}': {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("key '{key}': expected true/false, got '{value}'"))),
    }
}

fn parse_metric(key: &str, value: &str) -> Result<MetricMode> {
    Ok(match value {
        "off" => MetricMode::Disabled,
        "free" => MetricMode::Free,
        "symmetric" => MetricMode::Symmetric,
        "posdef" => MetricMode::PosDef,
        "riemannian" => MetricMode::Riemannian,
        _ => {
            return Err(Error::Config(format!(
                "key '{key}': expected off|free|symmetric|posdef|riemannian, got '{value}'"
            )))
        }
    })
}

pub fn metric_name(mode: MetricMode) -> &'static str {
    match mode {
        MetricMode::Disabled => "off",
        MetricMode::Free => "free",
        MetricMode::Symmetric => "symmetric",
        MetricMode::PosDef => "posdef",
        MetricMode::Riemannian => "riemannian",
    }
}

impl RunConfig {
    /// Applies one key=value override; unknown keys are rejected.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_as(key, value)?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "scene_radius" => self.scene_radius = parse_as(key, value)?,
            "boxes" => self.boxes = parse_as(key, value)?,
            "beams" => self.beams = parse_as(key, value)?,
            "azimuth_samples" => self.azimuth_samples = parse_as(key, value)?,
            "max_range" => self.max_range = parse_as(key, value)?,
            "noise_sigma" => self.noise_sigma = parse_as(key, value)?,
            "n_train" => self.n_train = parse_as(key, value)?,
            "n_test" => self.n_test = parse_as(key, value)?,
            "jitter" => self.jitter = parse_as(key, value)?,
            "feat_dim" => self.feat_dim = parse_as(key, value)?,
            "head_hidden" => self.head_hidden = parse_as(key, value)?,
            "l3d" => self.l3d = parse_as(key, value)?,
            "l_fusion" => self.l_fusion = parse_as(key, value)?,
            "heads" => self.heads = parse_as(key, value)?,
            "curvature" => self.curvature = parse_as(key, value)?,
            "metric" => self.metric = parse_metric(key, value)?,
            "branch_3d" => self.branch_3d = parse_bool(key, value)?,
            "branch_sph" => self.branch_sph = parse_bool(key, value)?,
            "branch_bev" => self.branch_bev = parse_bool(key, value)?,
            "use_hyperbolic" => self.use_hyperbolic = parse_bool(key, value)?,
            "use_euclidean" => self.use_euclidean = parse_bool(key, value)?,
            "sph_h" => self.sph_h = parse_as(key, value)?,
            "sph_w" => self.sph_w = parse_as(key, value)?,
            "bev_h" => self.bev_h = parse_as(key, value)?,
            "bev_w" => self.bev_w = parse_as(key, value)?,
            "lr" => self.lr = parse_as(key, value)?,
            "weight_decay" => self.weight_decay = parse_as(key, value)?,
            "batch_size" => self.batch_size = parse_as(key, value)?,
            "epochs" => self.epochs = parse_as(key, value)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Parses a key=value file; "#" comments out the rest of a line.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_file(path)?;
        Ok(cfg)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "{}:{}: expected key=value, got '{line}'",
                    path.display(),
                    lineno + 1
                )));
            };
            self.apply_kv(key.trim(), value.trim()).map_err(|e| {
                Error::Config(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Config("n_train and n_test must be >= 1".into()));
        }
        if self.l3d == 0 {
            return Err(Error::Config("l3d must be >= 1".into()));
        }
        self.model_config()?.validate()
    }

    /// Derives the network shape. Per-stage sampling geometry follows a
    /// fixed schedule: centroid counts 64, 16, 4, ... and ball radii 2.5,
    /// 6.0, 14.4, ... meters, capped at 8 neighbors.
    pub fn model_config(&self) -> Result<ModelConfig<f64>> {
        let ga = if self.heads == 0 || !self.feat_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{} heads do not divide feature width {}",
                self.heads, self.feat_dim
            )));
        } else {
            GaConfig { num_heads: self.heads, head_dim: self.feat_dim / self.heads }
        };
        let mut stages = Vec::with_capacity(self.l3d);
        for i in 0..self.l3d {
            let centroids = (64usize >> (2 * i)).max(4);
            let radius = 2.5 * 2.4f64.powi(i as i32);
            stages.push((
                SaConfig {
                    num_centroids: centroids,
                    radius,
                    max_neighbors: 8,
                    mlp: [self.feat_dim, self.feat_dim],
                },
                ga,
            ));
        }
        Ok(ModelConfig {
            feat_dim: self.feat_dim,
            head_hidden: self.head_hidden,
            stack3d: Stack3dConfig { stages },
            conv: ConvStackConfig {
                stages: vec![
                    ConvStage { out_channels: 16, kernel: 3, stride: 2 },
                    ConvStage { out_channels: 32, kernel: 3, stride: 2 },
                    ConvStage { out_channels: self.feat_dim, kernel: 3, stride: 2 },
                ],
            },
            sph_dims: (self.sph_h, self.sph_w),
            bev_dims: (self.bev_h, self.bev_w),
            bev_extent: (self.scene_radius, self.scene_radius),
            branches: BranchSet {
                points3d: self.branch_3d,
                spherical: self.branch_sph,
                bev: self.branch_bev,
            },
            fusion_blocks: self.l_fusion,
            fusion_heads: self.heads,
            curvature: self.curvature,
            metric: self.metric,
            spaces: SpaceFlags { euclid: self.use_euclidean, hyper: self.use_hyperbolic },
        })
    }

    pub fn sensor(&self) -> SensorModel<f64> {
        SensorModel {
            num_beams: self.beams,
            vfov: (-0.4, 0.1),
            azimuth_samples: self.azimuth_samples,
            max_range: self.max_range,
            sigma: self.noise_sigma,
            seed: self.seed ^ 0x5E75_0000_0000_0001,
        }
    }

    pub fn split(&self) -> SplitSpec<f64> {
        SplitSpec { n_train: self.n_train, n_test: self.n_test, jitter: self.jitter }
    }

    pub fn scene_seed(&self) -> u64 {
        self.seed ^ 0x5CE7_0000_0000_0002
    }

    pub fn route_seed(&self) -> u64 {
        self.seed ^ 0x2007_0000_0000_0003
    }

    pub fn init_seed(&self) -> u64 {
        self.seed ^ 0x1017_0000_0000_0004
    }

    pub fn shuffle_seed(&self, epoch: usize) -> u64 {
        (self.seed ^ 0x5455_0000_0000_0005).wrapping_add(epoch as u64)
    }

    pub fn train_manifest(&self) -> PathBuf {
        self.data_dir.join("train_manifest.txt")
    }

    pub fn test_manifest(&self) -> PathBuf {
        self.data_dir.join("test_manifest.txt")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp_file(name: &str, contents: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("config-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join(name);
        std::fs::write(&path, contents).unwrap();
        path
    }

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn file_parsing_with_comments_and_overrides() {
        let path = tmp_file(
            "run.cfg",
            "# full line comment\n\
             seed = 7\n\
             epochs=3   # trailing comment\n\
             \n\
             branch_bev = true\n\
             metric = symmetric\n\
             lr = 0.01\n",
        );
        let cfg = RunConfig::from_file(&path).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.epochs, 3);
        assert!(cfg.branch_bev);
        assert_eq!(cfg.metric, MetricMode::Symmetric);
        assert_eq!(cfg.lr, 0.01);
        // untouched keys keep defaults
        assert_eq!(cfg.batch_size, 8);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let path = tmp_file("bad1.cfg", "no_such_key = 5\n");
        assert!(matches!(RunConfig::from_file(&path), Err(Error::Config(_))));

        let path = tmp_file("bad2.cfg", "epochs = banana\n");
        assert!(matches!(RunConfig::from_file(&path), Err(Error::Config(_))));

        let path = tmp_file("bad3.cfg", "just a line\n");
        assert!(matches!(RunConfig::from_file(&path), Err(Error::Config(_))));

        let mut cfg = RunConfig::default();
        assert!(cfg.apply_kv("metric", "diagonal").is_err());
        assert!(cfg.apply_kv("branch_3d", "yes").is_err());
    }

    #[test]
    fn stage_schedule_tracks_l3d() {
        let cfg = RunConfig { l3d: 3, ..RunConfig::default() };
        let mc = cfg.model_config().unwrap();
        let counts: Vec<usize> = mc.stack3d.stages.iter().map(|(sa, _)| sa.num_centroids).collect();
        assert_eq!(counts, vec![64, 16, 4]);
        assert!(mc.stack3d.stages.windows(2).all(|w| w[0].0.radius < w[1].0.radius));
    }

    #[test]
    fn head_divisibility_is_enforced() {
        let cfg = RunConfig { heads: 7, ..RunConfig::default() };
        assert!(cfg.model_config().is_err());
    }
}
