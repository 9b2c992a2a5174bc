//! Whole-network composition: the 3D and projection encoders, the fusion
//! stack, per-branch and fused regression heads, and the per-scan loss.

use rand_chacha::ChaCha8Rng;

use crate::encoder2d::{encode2d, ConvStackConfig, ConvStackIds};
use crate::encoder3d::{
    encode3d_planned, plan_stages, GaConfig, Stack3dConfig, Stack3dIds, Stack3dPlan,
};
use crate::error::{Error, Result};
use crate::fusion::{ffb_stack, BranchTokens, FfbIds, MetricMode, Modality, SpaceFlags, SpaceIds};
use crate::hyperbolic::BallConfig;
use crate::params::{init_bias, init_linear, Graph, ParamId, ParamStore};
use crate::pose::{stage_target, weighted_pose_loss, PosePred, PoseSE3};
use crate::projection::{bev_project, spherical_project, LidarScan};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::TensorBase;

// ── Regression head ─────────────────────────────────────────────────────

pub struct HeadIds {
    pub wt1: ParamId,
    pub bt1: ParamId,
    pub wt2: ParamId,
    pub bt2: ParamId,
    pub wr1: ParamId,
    pub br1: ParamId,
    pub wr2: ParamId,
    pub br2: ParamId,
}

impl HeadIds {
    pub fn create<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(Self {
            wt1: store.add(&format!("{prefix}.t.w1"), init_linear(rng, in_dim, hidden))?,
            bt1: store.add(&format!("{prefix}.t.b1"), init_bias(hidden))?,
            wt2: store.add(&format!("{prefix}.t.w2"), init_linear(rng, hidden, 3))?,
            bt2: store.add(&format!("{prefix}.t.b2"), init_bias(3))?,
            wr1: store.add(&format!("{prefix}.r.w1"), init_linear(rng, in_dim, hidden))?,
            br1: store.add(&format!("{prefix}.r.b1"), init_bias(hidden))?,
            wr2: store.add(&format!("{prefix}.r.w2"), init_linear(rng, hidden, 3))?,
            br2: store.add(&format!("{prefix}.r.b2"), init_bias(3))?,
        })
    }
}

fn mlp2<S: Scalar>(
    g: &mut Graph<S>,
    x: Var,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
) -> Result<Var> {
    let w1 = g.param(w1);
    let b1 = g.param(b1);
    let w2 = g.param(w2);
    let b2 = g.param(b2);
    let h = g.tape.matmul(x, w1)?;
    let h = g.tape.add_bias(h, b1)?;
    let h = g.tape.relu(h);
    let h = g.tape.matmul(h, w2)?;
    g.tape.add_bias(h, b2)
}

/// Mean-pool the feature rows, then two parallel 2-layer MLPs: one for the
/// translation, one for the log-quaternion rotation.
pub fn regress_pose<S: Scalar>(g: &mut Graph<S>, features: Var, ids: &HeadIds) -> Result<PosePred> {
    if g.tape.value(features).shape()[0] == 0 {
        return Err(Error::EmptyInput("regress_pose"));
    }
    let pooled = g.tape.mean_pool(features)?;
    let t = mlp2(g, pooled, ids.wt1, ids.bt1, ids.wt2, ids.bt2)?;
    let r = mlp2(g, pooled, ids.wr1, ids.br1, ids.wr2, ids.br2)?;
    Ok(PosePred { t, r })
}

// ── Configuration ───────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BranchSet {
    pub points3d: bool,
    pub spherical: bool,
    pub bev: bool,
}

impl BranchSet {
    pub fn count(&self) -> usize {
        self.points3d as usize + self.spherical as usize + self.bev as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadTag {
    ThreeD,
    Spherical,
    Bev,
    Fusion,
}

#[derive(Clone, Debug)]
pub struct ModelConfig<S: Scalar> {
    /// Shared token width C of every branch and the fusion graph.
    pub feat_dim: usize,
    pub head_hidden: usize,
    pub stack3d: Stack3dConfig<S>,
    pub conv: ConvStackConfig,
    pub sph_dims: (usize, usize),
    pub bev_dims: (usize, usize),
    /// Half-extents (x_max, y_max) of the top-down window, meters.
    pub bev_extent: (S, S),
    pub branches: BranchSet,
    pub fusion_blocks: usize,
    pub fusion_heads: usize,
    pub curvature: S,
    pub metric: MetricMode,
    pub spaces: SpaceFlags,
}

impl<S: Scalar> ModelConfig<S> {
    pub fn fusion_active(&self) -> bool {
        self.branches.count() >= 2
    }

    pub fn fusion_ga(&self) -> GaConfig {
        GaConfig {
            num_heads: self.fusion_heads,
            head_dim: self.feat_dim / self.fusion_heads,
        }
    }

    pub fn ball(&self) -> Result<BallConfig<S>> {
        BallConfig::new(self.curvature, self.feat_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.branches.count() == 0 {
            return Err(Error::Config("no branches enabled".into()));
        }
        if self.branches.points3d && self.stack3d.out_dim() != self.feat_dim {
            return Err(Error::Config(format!(
                "3D stack width {} does not match feature width {}",
                self.stack3d.out_dim(),
                self.feat_dim
            )));
        }
        if (self.branches.spherical || self.branches.bev)
            && self.conv.out_channels() != self.feat_dim
        {
            return Err(Error::Config(format!(
                "conv stack width {} does not match feature width {}",
                self.conv.out_channels(),
                self.feat_dim
            )));
        }
        if self.fusion_active() {
            if self.fusion_blocks == 0 {
                return Err(Error::Config("fusion requires at least one block".into()));
            }
            if self.fusion_heads == 0 || !self.feat_dim.is_multiple_of(self.fusion_heads) {
                return Err(Error::Config(format!(
                    "{} fusion heads do not divide feature width {}",
                    self.fusion_heads, self.feat_dim
                )));
            }
            if self.spaces.hyper && self.curvature <= S::zero() {
                return Err(Error::Config(
                    "hyperbolic interaction requires positive curvature".into(),
                ));
            }
        }
        Ok(())
    }

    /// Ordered list of the enabled modalities; fusion follows this order.
    pub fn enabled_modalities(&self) -> Vec<Modality> {
        let mut out = Vec::new();
        if self.branches.points3d {
            out.push(Modality::Points3d);
        }
        if self.branches.spherical {
            out.push(Modality::Spherical);
        }
        if self.branches.bev {
            out.push(Modality::Bev);
        }
        out
    }
}

impl ModelConfig<f64> {
    /// Desk-scale defaults: C = 64, two SAGA stages (64 then 16 centroids),
    /// a 3-stage conv stack, two fusion blocks with 8 heads.
    pub fn desk_default() -> Self {
        use crate::encoder2d::ConvStage;
        use crate::encoder3d::SaConfig;
        let ga = GaConfig { num_heads: 8, head_dim: 8 };
        Self {
            feat_dim: 64,
            head_hidden: 32,
            stack3d: Stack3dConfig {
                stages: vec![
                    (
                        SaConfig { num_centroids: 64, radius: 2.5, max_neighbors: 8, mlp: [64, 64] },
                        ga,
                    ),
                    (
                        SaConfig { num_centroids: 16, radius: 6.0, max_neighbors: 8, mlp: [64, 64] },
                        ga,
                    ),
                ],
            },
            conv: ConvStackConfig {
                stages: vec![
                    ConvStage { out_channels: 16, kernel: 3, stride: 2 },
                    ConvStage { out_channels: 32, kernel: 3, stride: 2 },
                    ConvStage { out_channels: 64, kernel: 3, stride: 2 },
                ],
            },
            sph_dims: (32, 64),
            bev_dims: (64, 64),
            bev_extent: (20.0, 20.0),
            branches: BranchSet { points3d: true, spherical: true, bev: false },
            fusion_blocks: 2,
            fusion_heads: 8,
            curvature: 1.0,
            metric: MetricMode::Free,
            spaces: SpaceFlags::default(),
        }
    }
}

// ── Parameters ──────────────────────────────────────────────────────────

pub struct ModelIds {
    pub enc3d: Option<Stack3dIds>,
    pub conv_sph: Option<ConvStackIds>,
    pub conv_bev: Option<ConvStackIds>,
    pub ffb: Vec<FfbIds>,
    pub ffb_final: Option<SpaceIds>,
    pub head_3d: Option<HeadIds>,
    pub head_sph: Option<HeadIds>,
    pub head_bev: Option<HeadIds>,
    pub head_fusion: Option<HeadIds>,
    pub lambda: ParamId,
    pub gamma: ParamId,
}

impl ModelIds {
    pub fn create<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        cfg: &ModelConfig<S>,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.feat_dim;
        let enc3d = cfg
            .branches
            .points3d
            .then(|| Stack3dIds::create(store, rng, "enc3d", &cfg.stack3d))
            .transpose()?;
        let conv_sph = cfg
            .branches
            .spherical
            .then(|| ConvStackIds::create(store, rng, "sph", 1, &cfg.conv))
            .transpose()?;
        let conv_bev = cfg
            .branches
            .bev
            .then(|| ConvStackIds::create(store, rng, "bev", 1, &cfg.conv))
            .transpose()?;

        let mut ffb = Vec::new();
        let mut ffb_final = None;
        if cfg.fusion_active() {
            let ga = cfg.fusion_ga();
            let modalities = cfg.enabled_modalities();
            for i in 0..cfg.fusion_blocks {
                ffb.push(FfbIds::create(
                    store,
                    rng,
                    &format!("ffb{i}"),
                    c,
                    &ga,
                    cfg.metric,
                    &modalities,
                )?);
            }
            ffb_final = Some(SpaceIds::create(store, rng, "ffb_final", c, &ga, cfg.metric)?);
        }

        let head = |store: &mut ParamStore<S>, rng: &mut ChaCha8Rng, name: &str| {
            HeadIds::create(store, rng, name, c, cfg.head_hidden)
        };
        let head_3d = cfg.branches.points3d.then(|| head(store, rng, "head3d")).transpose()?;
        let head_sph = cfg.branches.spherical.then(|| head(store, rng, "headsph")).transpose()?;
        let head_bev = cfg.branches.bev.then(|| head(store, rng, "headbev")).transpose()?;
        let head_fusion = cfg.fusion_active().then(|| head(store, rng, "headfus")).transpose()?;

        let lambda = store.add("loss.lambda", TensorBase::scalar(S::zero()))?;
        let gamma = store.add("loss.gamma", TensorBase::scalar(S::from_f64(-3.0)))?;
        Ok(Self {
            enc3d,
            conv_sph,
            conv_bev,
            ffb,
            ffb_final,
            head_3d,
            head_sph,
            head_bev,
            head_fusion,
            lambda,
            gamma,
        })
    }
}

// ── Per-scan inputs ─────────────────────────────────────────────────────

/// Everything parameter-independent about one scan, computed once and
/// reused every epoch: grouping plan and projection images.
#[derive(Clone)]
pub struct ScanFeatures<S: Scalar> {
    pub plan: Option<Stack3dPlan<S>>,
    pub sph: Option<TensorBase<S>>,
    pub bev: Option<TensorBase<S>>,
}

impl<S: Scalar> ScanFeatures<S> {
    pub fn prepare(scan: &LidarScan<S>, cfg: &ModelConfig<S>) -> Result<Self> {
        let plan = cfg
            .branches
            .points3d
            .then(|| plan_stages(&scan.points, &cfg.stack3d))
            .transpose()?;
        let sph = cfg
            .branches
            .spherical
            .then(|| {
                spherical_project(scan, cfg.sph_dims.0, cfg.sph_dims.1)
                    .map(|img| img.to_tensor_scaled(S::one()))
            })
            .transpose()?;
        let bev = cfg
            .branches
            .bev
            .then(|| {
                bev_project(scan, cfg.bev_dims.0, cfg.bev_dims.1, cfg.bev_extent.0, cfg.bev_extent.1)
                    .map(|img| img.to_tensor_scaled(S::one()))
            })
            .transpose()?;
        Ok(Self { plan, sph, bev })
    }
}

// ── Forward and loss ────────────────────────────────────────────────────

/// Runs every enabled branch and, when two or more are enabled, the fusion
/// stack. Returns one (tag, prediction) pair per regression head in a
/// fixed order: 3D, spherical, BEV, fusion.
pub fn forward<S: Scalar>(
    g: &mut Graph<S>,
    cfg: &ModelConfig<S>,
    ids: &ModelIds,
    inputs: &ScanFeatures<S>,
) -> Result<Vec<(HeadTag, PosePred)>> {
    let mut preds = Vec::new();
    let mut branches = Vec::new();

    if cfg.branches.points3d {
        let plan = inputs.plan.as_ref().ok_or(Error::EmptyInput("forward: missing 3D plan"))?;
        let enc = ids.enc3d.as_ref().expect("validated");
        let tokens = encode3d_planned(g, plan, &cfg.stack3d, enc)?;
        preds.push((HeadTag::ThreeD, regress_pose(g, tokens, ids.head_3d.as_ref().unwrap())?));
        branches.push(BranchTokens { modality: Modality::Points3d, features: tokens, grid: None });
    }
    if cfg.branches.spherical {
        let img = inputs.sph.as_ref().ok_or(Error::EmptyInput("forward: missing spherical image"))?;
        let img = g.constant(img.clone());
        let (tokens, grid) = encode2d(g, img, &cfg.conv, ids.conv_sph.as_ref().expect("validated"))?;
        preds.push((HeadTag::Spherical, regress_pose(g, tokens, ids.head_sph.as_ref().unwrap())?));
        branches.push(BranchTokens { modality: Modality::Spherical, features: tokens, grid: Some(grid) });
    }
    if cfg.branches.bev {
        let img = inputs.bev.as_ref().ok_or(Error::EmptyInput("forward: missing BEV image"))?;
        let img = g.constant(img.clone());
        let (tokens, grid) = encode2d(g, img, &cfg.conv, ids.conv_bev.as_ref().expect("validated"))?;
        preds.push((HeadTag::Bev, regress_pose(g, tokens, ids.head_bev.as_ref().unwrap())?));
        branches.push(BranchTokens { modality: Modality::Bev, features: tokens, grid: Some(grid) });
    }

    if cfg.fusion_active() {
        let fused = ffb_stack(
            g,
            branches,
            &ids.ffb,
            ids.ffb_final.as_ref().expect("validated"),
            &cfg.fusion_ga(),
            cfg.metric,
            cfg.spaces,
            &cfg.ball()?,
        )?;
        preds.push((
            HeadTag::Fusion,
            regress_pose(g, fused.features, ids.head_fusion.as_ref().unwrap())?,
        ));
    }
    Ok(preds)
}

/// Forward pass plus the learnable-weighted loss against a target pose.
pub fn scan_loss<S: Scalar>(
    g: &mut Graph<S>,
    cfg: &ModelConfig<S>,
    ids: &ModelIds,
    inputs: &ScanFeatures<S>,
    target: &PoseSE3<S>,
) -> Result<(Var, Vec<(HeadTag, PosePred)>)> {
    let preds = forward(g, cfg, ids, inputs)?;
    let (tt, tr) = stage_target(&mut g.tape, target);
    let lambda = g.param(ids.lambda);
    let gamma = g.param(ids.gamma);
    let flat: Vec<PosePred> = preds.iter().map(|(_, p)| *p).collect();
    let loss = weighted_pose_loss(&mut g.tape, &flat, tt, tr, lambda, gamma)?;
    Ok((loss, preds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder2d::ConvStage;
    use crate::encoder3d::SaConfig;
    use rand::{Rng, SeedableRng};

    fn tiny_cfg() -> ModelConfig<f64> {
        let ga = GaConfig { num_heads: 2, head_dim: 4 };
        ModelConfig {
            feat_dim: 8,
            head_hidden: 6,
            stack3d: Stack3dConfig {
                stages: vec![
                    (SaConfig { num_centroids: 6, radius: 2.5, max_neighbors: 3, mlp: [8, 8] }, ga),
                    (SaConfig { num_centroids: 3, radius: 5.0, max_neighbors: 2, mlp: [8, 8] }, ga),
                ],
            },
            conv: ConvStackConfig {
                stages: vec![
                    ConvStage { out_channels: 4, kernel: 3, stride: 2 },
                    ConvStage { out_channels: 8, kernel: 3, stride: 2 },
                ],
            },
            sph_dims: (8, 8),
            bev_dims: (8, 8),
            bev_extent: (4.0, 4.0),
            branches: BranchSet { points3d: true, spherical: true, bev: false },
            fusion_blocks: 1,
            fusion_heads: 2,
            curvature: 1.0,
            metric: MetricMode::Free,
            spaces: SpaceFlags::default(),
        }
    }

    fn tiny_scan(seed: u64, n: usize) -> LidarScan<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                let ang = rng.gen_range(0.0..std::f64::consts::TAU);
                let r = rng.gen_range(0.8..3.5);
                [r * ang.cos(), r * ang.sin(), rng.gen_range(0.1..1.4)]
            })
            .collect();
        let pose = PoseSE3::new([0.4, -0.3, 1.5], [0.92, 0.05, 0.1, 0.36]).unwrap();
        LidarScan::new(points, pose, 7).unwrap()
    }

    #[test]
    fn desk_default_validates() {
        ModelConfig::<f64>::desk_default().validate().unwrap();
    }

    #[test]
    fn zero_weights_make_heads_constant() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let ids = HeadIds::create(&mut store, &mut rng, "head", 5, 4).unwrap();
        for id in [ids.wt1, ids.wt2, ids.wr1, ids.wr2] {
            let t = store.get_mut(id);
            let zeros = vec![0.0; t.numel()];
            t.data_mut().copy_from_slice(&zeros);
        }
        store.get_mut(ids.bt2).data_mut().copy_from_slice(&[0.3, -0.7, 1.1]);
        store.get_mut(ids.br2).data_mut().copy_from_slice(&[0.05, 0.0, -0.2]);

        let mut g = Graph::new(&store);
        let x = g.constant(TensorBase::new(vec![3, 5], (0..15).map(|i| i as f64).collect()).unwrap());
        let pred = regress_pose(&mut g, x, &ids).unwrap();
        assert_eq!(g.tape.value(pred.t).data(), &[0.3, -0.7, 1.1]);
        assert_eq!(g.tape.value(pred.r).data(), &[0.05, 0.0, -0.2]);

        // zero-row inputs are unrepresentable: the tensor type rejects them
        assert!(TensorBase::<f64>::new(vec![0, 5], vec![]).is_err());
    }

    #[test]
    fn head_gradients_pass_fd() {
        use crate::gradcheck::check_params;
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let ids = HeadIds::create(&mut store, &mut rng, "head", 4, 3).unwrap();
        let data: Vec<f64> = (0..8).map(|i| (i as f64) * 0.31 - 1.0).collect();
        let gap = check_params(
            &mut store,
            &move |g| {
                let x = g.constant(TensorBase::new(vec![2, 4], data.clone()).unwrap());
                let pred = regress_pose(g, x, &ids)?;
                let joined = g.tape.concat(&[pred.t, pred.r], 1)?;
                Ok(g.tape.sum(joined))
            },
            1e-6,
            1,
        )
        .unwrap();
        assert!(gap < 1e-6, "head gradient gap {gap}");
    }

    #[test]
    fn forward_emits_heads_in_order_and_is_deterministic() {
        let cfg = tiny_cfg();
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let ids = ModelIds::create(&mut store, &mut rng, &cfg).unwrap();
        let scan = tiny_scan(1, 24);
        let inputs = ScanFeatures::prepare(&scan, &cfg).unwrap();

        let run = || {
            let mut g = Graph::new(&store);
            let preds = forward(&mut g, &cfg, &ids, &inputs).unwrap();
            let tags: Vec<HeadTag> = preds.iter().map(|(t, _)| *t).collect();
            let flat: Vec<f64> = preds
                .iter()
                .flat_map(|(_, p)| {
                    let mut v = g.tape.value(p.t).data().to_vec();
                    v.extend_from_slice(g.tape.value(p.r).data());
                    v
                })
                .collect();
            (tags, flat)
        };
        let (tags, a) = run();
        assert_eq!(tags, vec![HeadTag::ThreeD, HeadTag::Spherical, HeadTag::Fusion]);
        let (_, b) = run();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn single_branch_skips_fusion() {
        let mut cfg = tiny_cfg();
        cfg.branches = BranchSet { points3d: true, spherical: false, bev: false };
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let ids = ModelIds::create(&mut store, &mut rng, &cfg).unwrap();
        assert!(ids.ffb.is_empty() && ids.ffb_final.is_none() && ids.head_fusion.is_none());

        let scan = tiny_scan(2, 20);
        let inputs = ScanFeatures::prepare(&scan, &cfg).unwrap();
        let mut g = Graph::new(&store);
        let preds = forward(&mut g, &cfg, &ids, &inputs).unwrap();
        assert_eq!(preds.len(), 1);
        assert_eq!(preds[0].0, HeadTag::ThreeD);
    }

    #[test]
    fn bev_swap_replaces_spherical_branch() {
        let mut cfg = tiny_cfg();
        cfg.branches = BranchSet { points3d: true, spherical: false, bev: true };
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let ids = ModelIds::create(&mut store, &mut rng, &cfg).unwrap();
        let scan = tiny_scan(3, 24);
        let inputs = ScanFeatures::prepare(&scan, &cfg).unwrap();
        assert!(inputs.sph.is_none() && inputs.bev.is_some());
        let mut g = Graph::new(&store);
        let preds = forward(&mut g, &cfg, &ids, &inputs).unwrap();
        let tags: Vec<HeadTag> = preds.iter().map(|(t, _)| *t).collect();
        assert_eq!(tags, vec![HeadTag::ThreeD, HeadTag::Bev, HeadTag::Fusion]);
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let cfg = tiny_cfg();
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let ids = ModelIds::create(&mut store, &mut rng, &cfg).unwrap();
        let scan = tiny_scan(4, 24);
        let inputs = ScanFeatures::prepare(&scan, &cfg).unwrap();
        let target = scan.pose;

        let mut g = Graph::new(&store);
        let (loss, _) = scan_loss(&mut g, &cfg, &ids, &inputs, &target).unwrap();
        assert!(g.tape.value(loss).item().is_finite());
        g.backward(loss).unwrap();
        let grads = g.grads();
        for id in store.ids() {
            let name = store.name(id);
            let grad = grads[id.index()]
                .as_ref()
                .unwrap_or_else(|| panic!("no gradient for {name}"));
            assert!(grad.all_finite(), "non-finite gradient for {name}");
        }
    }

    #[test]
    fn full_model_gradients_pass_fd() {
        let cfg = tiny_cfg();
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let ids = ModelIds::create(&mut store, &mut rng, &cfg).unwrap();
        // move every parameter to a generic point: zero-initialized biases
        // leave dead conv windows exactly on the relu kink, where the true
        // derivative does not exist and finite differences disagree
        use rand::Rng;
        for id in store.ids().collect::<Vec<_>>() {
            for v in store.get_mut(id).data_mut() {
                *v += rng.gen_range(0.01..0.03);
            }
        }
        let scan = tiny_scan(5, 24);
        let inputs = ScanFeatures::prepare(&scan, &cfg).unwrap();
        let target = scan.pose;

        // two step sizes: the coarse one rescues coordinates whose tiny
        // gradients sit at the central-difference cancellation floor
        let gap = crate::gradcheck::check_params_scales(
            &mut store,
            &move |g| {
                let (loss, _) = scan_loss(g, &cfg, &ids, &inputs, &target)?;
                Ok(loss)
            },
            &[5e-6, 1e-3],
            7,
        )
        .unwrap();
        assert!(gap < 1e-5, "full model gradient gap {gap}");
    }
}
