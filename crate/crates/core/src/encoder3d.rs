//! 3D point-cloud backbone: stacked SAGA layers, each a set-abstraction
//! step (farthest-point sampling, ball grouping, per-neighbor MLP, max
//! pool) followed by complete-graph multi-head attention over centroids.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{init_bias, init_linear, ParamId, ParamStore, Graph};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::TensorBase;

#[derive(Clone, Debug)]
pub struct SaConfig<S: Scalar> {
    pub num_centroids: usize,
    pub radius: S,
    pub max_neighbors: usize,
    /// Two hidden widths of the per-neighbor MLP.
    pub mlp: [usize; 2],
}

#[derive(Clone, Copy, Debug)]
pub struct GaConfig {
    pub num_heads: usize,
    pub head_dim: usize,
}

impl GaConfig {
    /// Concatenated output width K * head_dim.
    pub fn out_dim(&self) -> usize {
        self.num_heads * self.head_dim
    }
}

fn dist_sq<S: Scalar>(a: &[S; 3], b: &[S; 3]) -> S {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Greedy max-min farthest-point sampling, seeded at index 0, ties broken
/// by lowest index.
pub fn farthest_point_sample<S: Scalar>(points: &[[S; 3]], m: usize) -> Result<Vec<usize>> {
    if m == 0 {
        return Err(Error::domain("farthest_point_sample", "need at least one sample"));
    }
    if m > points.len() {
        return Err(Error::domain(
            "farthest_point_sample",
            format!("requested {m} samples from {} points", points.len()),
        ));
    }
    let mut picked = Vec::with_capacity(m);
    picked.push(0usize);
    let mut dist: Vec<S> = points.iter().map(|p| dist_sq(p, &points[0])).collect();
    while picked.len() < m {
        let mut best = 0usize;
        let mut best_d = S::neg_infinity();
        for (i, &d) in dist.iter().enumerate() {
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        picked.push(best);
        for (i, d) in dist.iter_mut().enumerate() {
            let nd = dist_sq(&points[i], &points[best]);
            if nd < *d {
                *d = nd;
            }
        }
    }
    Ok(picked)
}

/// Closed-ball neighbor lists: for each centroid, non-self points within
/// `radius`, nearest first (ties by index), truncated to `max_k` and
/// padded by repeating the centroid's own index.
pub fn ball_group<S: Scalar>(
    points: &[[S; 3]],
    centroids: &[usize],
    radius: S,
    max_k: usize,
) -> Result<Vec<Vec<usize>>> {
    if radius <= S::zero() {
        return Err(Error::domain("ball_group", format!("radius must be > 0, got {radius}")));
    }
    if max_k == 0 {
        return Err(Error::domain("ball_group", "max_k must be >= 1"));
    }
    let r2 = radius * radius;
    let mut groups = Vec::with_capacity(centroids.len());
    for &ci in centroids {
        let center = &points[ci];
        let mut near: Vec<(S, usize)> = points
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != ci)
            .filter_map(|(i, p)| {
                let d = dist_sq(p, center);
                (d <= r2).then_some((d, i))
            })
            .collect();
        near.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        near.truncate(max_k);
        let mut idx: Vec<usize> = near.into_iter().map(|(_, i)| i).collect();
        idx.resize(max_k, ci);
        groups.push(idx);
    }
    Ok(groups)
}

// ── Parameters ──────────────────────────────────────────────────────────

pub struct SaParamIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl SaParamIds {
    /// MLP input is (relative xyz ‖ features), so in = 3 + feature width.
    pub fn create<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        feat_in: usize,
        cfg: &SaConfig<S>,
    ) -> Result<Self> {
        let d0 = 3 + feat_in;
        Ok(Self {
            w1: store.add(&format!("{prefix}.w1"), init_linear(rng, d0, cfg.mlp[0]))?,
            b1: store.add(&format!("{prefix}.b1"), init_bias(cfg.mlp[0]))?,
            w2: store.add(&format!("{prefix}.w2"), init_linear(rng, cfg.mlp[0], cfg.mlp[1]))?,
            b2: store.add(&format!("{prefix}.b2"), init_bias(cfg.mlp[1]))?,
        })
    }
}

pub struct GaParamIds {
    pub head_w: Vec<ParamId>,
    pub head_b: Vec<ParamId>,
}

impl GaParamIds {
    pub fn create<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_dim: usize,
        cfg: &GaConfig,
    ) -> Result<Self> {
        let mut head_w = Vec::with_capacity(cfg.num_heads);
        let mut head_b = Vec::with_capacity(cfg.num_heads);
        for k in 0..cfg.num_heads {
            head_w.push(store.add(&format!("{prefix}.h{k}.w"), init_linear(rng, in_dim, cfg.head_dim))?);
            head_b.push(store.add(&format!("{prefix}.h{k}.b"), init_bias(cfg.head_dim))?);
        }
        Ok(Self { head_w, head_b })
    }
}

// ── Layers ──────────────────────────────────────────────────────────────

/// Per-head attention rows: Softmax(P Pᵀ) or Softmax(P M Pᵀ). Unscaled
/// logits (no 1/√d factor).
pub(crate) fn head_attention<S: Scalar>(
    g: &mut Graph<S>,
    p: Var,
    metric: Option<Var>,
) -> Result<Var> {
    let pt = g.tape.transpose(p)?;
    let logits = match metric {
        None => g.tape.matmul(p, pt)?,
        Some(m) => {
            let pm = g.tape.matmul(p, m)?;
            g.tape.matmul(pm, pt)?
        }
    };
    g.tape.row_softmax(logits)
}

/// Multi-head graph attention over all rows; output is the head
/// concatenation, width K * head_dim. `metric` (head_dim x head_dim)
/// reweights every head's logits when present.
pub fn ga_layer<S: Scalar>(
    g: &mut Graph<S>,
    features: Var,
    cfg: &GaConfig,
    ids: &GaParamIds,
    metric: Option<Var>,
) -> Result<Var> {
    if ids.head_w.len() != cfg.num_heads {
        return Err(Error::shape(
            "ga_layer",
            format!("{} head parameter sets for {} heads", ids.head_w.len(), cfg.num_heads),
        ));
    }
    let mut outs = Vec::with_capacity(cfg.num_heads);
    for k in 0..cfg.num_heads {
        let w = g.param(ids.head_w[k]);
        let b = g.param(ids.head_b[k]);
        let proj = g.tape.matmul(features, w)?;
        let p = g.tape.add_bias(proj, b)?;
        let a = head_attention(g, p, metric)?;
        outs.push(g.tape.matmul(a, p)?);
    }
    g.tape.concat(&outs, 1)
}

/// Set abstraction: sample centroids, group neighbors, run the shared MLP
/// on (relative coords ‖ neighbor features), max-pool per ball. Returns
/// centroid features and centroid coordinates.
pub fn sa_layer<S: Scalar>(
    g: &mut Graph<S>,
    features: Var,
    points: &[[S; 3]],
    cfg: &SaConfig<S>,
    ids: &SaParamIds,
) -> Result<(Var, Vec<[S; 3]>)> {
    let fshape = g.tape.value(features).shape().to_vec();
    if fshape.len() != 2 || fshape[0] != points.len() {
        return Err(Error::shape(
            "sa_layer",
            format!("{} feature rows for {} points", fshape[0], points.len()),
        ));
    }
    let centroid_idx = farthest_point_sample(points, cfg.num_centroids)?;
    let groups = ball_group(points, &centroid_idx, cfg.radius, cfg.max_neighbors)?;

    let k = cfg.max_neighbors;
    let mut flat = Vec::with_capacity(centroid_idx.len() * k);
    let mut rel = Vec::with_capacity(centroid_idx.len() * k * 3);
    for (gi, group) in groups.iter().enumerate() {
        let c = points[centroid_idx[gi]];
        for &ni in group {
            flat.push(ni);
            let p = points[ni];
            rel.push(p[0] - c[0]);
            rel.push(p[1] - c[1]);
            rel.push(p[2] - c[2]);
        }
    }
    let rel = g.constant(TensorBase::new(vec![flat.len(), 3], rel)?);
    let gathered = g.tape.gather_rows(features, &flat)?;
    let inp = g.tape.concat(&[rel, gathered], 1)?;

    let w1 = g.param(ids.w1);
    let b1 = g.param(ids.b1);
    let w2 = g.param(ids.w2);
    let b2 = g.param(ids.b2);
    let h = g.tape.matmul(inp, w1)?;
    let h = g.tape.add_bias(h, b1)?;
    let h = g.tape.relu(h);
    let h = g.tape.matmul(h, w2)?;
    let h = g.tape.add_bias(h, b2)?;
    let h = g.tape.relu(h);
    let pooled = g.tape.block_max(h, k)?;

    let coords = centroid_idx.iter().map(|&i| points[i]).collect();
    Ok((pooled, coords))
}

// ── Stack ───────────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct Stack3dConfig<S: Scalar> {
    pub stages: Vec<(SaConfig<S>, GaConfig)>,
}

impl<S: Scalar> Stack3dConfig<S> {
    /// Output feature width C (final GA concat width).
    pub fn out_dim(&self) -> usize {
        self.stages.last().map(|(_, ga)| ga.out_dim()).unwrap_or(0)
    }

    /// Final centroid count N^3D.
    pub fn out_rows(&self) -> usize {
        self.stages.last().map(|(sa, _)| sa.num_centroids).unwrap_or(0)
    }
}

pub struct Stack3dIds {
    pub stages: Vec<(SaParamIds, GaParamIds)>,
}

impl Stack3dIds {
    pub fn create<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        cfg: &Stack3dConfig<S>,
    ) -> Result<Self> {
        let mut stages = Vec::with_capacity(cfg.stages.len());
        let mut width = 1; // initial feature: raw range, one channel
        for (i, (sa, ga)) in cfg.stages.iter().enumerate() {
            let sa_ids = SaParamIds::create(store, rng, &format!("{prefix}.s{i}.sa"), width, sa)?;
            let ga_ids = GaParamIds::create(store, rng, &format!("{prefix}.s{i}.ga"), sa.mlp[1], ga)?;
            width = ga.out_dim();
            stages.push((sa_ids, ga_ids));
        }
        Ok(Self { stages })
    }
}

/// Sampling and grouping geometry of one stage, fixed given the points.
#[derive(Clone)]
pub struct PlanStage<S: Scalar> {
    /// Neighbor offsets from their centroid, (m*k) x 3.
    pub rel: TensorBase<S>,
    /// Gather indices into the previous stage's feature rows, length m*k.
    pub flat: Vec<usize>,
    pub k: usize,
}

/// Parameter-independent part of the 3D branch: FPS, ball grouping, and
/// raw-range input features, computed once per scan and reused across
/// epochs.
#[derive(Clone)]
pub struct Stack3dPlan<S: Scalar> {
    pub feat0: TensorBase<S>,
    pub stages: Vec<PlanStage<S>>,
}

pub fn plan_stages<S: Scalar>(points: &[[S; 3]], cfg: &Stack3dConfig<S>) -> Result<Stack3dPlan<S>> {
    if cfg.stages.is_empty() {
        return Err(Error::EmptyInput("plan_stages"));
    }
    let mut count = points.len();
    for (sa, _) in &cfg.stages {
        if sa.num_centroids > count {
            return Err(Error::domain(
                "plan_stages",
                format!("{count} points cannot supply {} centroids", sa.num_centroids),
            ));
        }
        count = sa.num_centroids;
    }
    let ranges: Vec<S> = points
        .iter()
        .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .collect();
    let feat0 = TensorBase::new(vec![points.len(), 1], ranges)?;

    let mut stages = Vec::with_capacity(cfg.stages.len());
    let mut pts = points.to_vec();
    for (sa, _) in &cfg.stages {
        let centroid_idx = farthest_point_sample(&pts, sa.num_centroids)?;
        let groups = ball_group(&pts, &centroid_idx, sa.radius, sa.max_neighbors)?;
        let k = sa.max_neighbors;
        let mut flat = Vec::with_capacity(centroid_idx.len() * k);
        let mut rel = Vec::with_capacity(centroid_idx.len() * k * 3);
        for (gi, group) in groups.iter().enumerate() {
            let c = pts[centroid_idx[gi]];
            for &ni in group {
                flat.push(ni);
                let p = pts[ni];
                rel.push(p[0] - c[0]);
                rel.push(p[1] - c[1]);
                rel.push(p[2] - c[2]);
            }
        }
        let rel = TensorBase::new(vec![flat.len(), 3], rel)?;
        stages.push(PlanStage { rel, flat, k });
        pts = centroid_idx.iter().map(|&i| pts[i]).collect();
    }
    Ok(Stack3dPlan { feat0, stages })
}

/// Differentiable part of the 3D branch over a precomputed plan.
pub fn encode3d_planned<S: Scalar>(
    g: &mut Graph<S>,
    plan: &Stack3dPlan<S>,
    cfg: &Stack3dConfig<S>,
    ids: &Stack3dIds,
) -> Result<Var> {
    if plan.stages.len() != cfg.stages.len() || ids.stages.len() != cfg.stages.len() {
        return Err(Error::shape(
            "encode3d_planned",
            format!(
                "plan has {} stages, config {}, parameters {}",
                plan.stages.len(),
                cfg.stages.len(),
                ids.stages.len()
            ),
        ));
    }
    let mut feats = g.constant(plan.feat0.clone());
    for (stage, ((_, ga_cfg), (sa_ids, ga_ids))) in
        plan.stages.iter().zip(cfg.stages.iter().zip(&ids.stages))
    {
        let rel = g.constant(stage.rel.clone());
        let gathered = g.tape.gather_rows(feats, &stage.flat)?;
        let inp = g.tape.concat(&[rel, gathered], 1)?;
        let w1 = g.param(sa_ids.w1);
        let b1 = g.param(sa_ids.b1);
        let w2 = g.param(sa_ids.w2);
        let b2 = g.param(sa_ids.b2);
        let h = g.tape.matmul(inp, w1)?;
        let h = g.tape.add_bias(h, b1)?;
        let h = g.tape.relu(h);
        let h = g.tape.matmul(h, w2)?;
        let h = g.tape.add_bias(h, b2)?;
        let h = g.tape.relu(h);
        let pooled = g.tape.block_max(h, stage.k)?;
        feats = ga_layer(g, pooled, ga_cfg, ga_ids, None)?;
    }
    Ok(feats)
}

/// Full 3D branch: raw ranges in, N^3D x C centroid features out.
pub fn encode3d<S: Scalar>(
    g: &mut Graph<S>,
    points: &[[S; 3]],
    cfg: &Stack3dConfig<S>,
    ids: &Stack3dIds,
) -> Result<Var> {
    let plan = plan_stages(points, cfg)?;
    encode3d_planned(g, &plan, cfg, ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn line_points(n: usize) -> Vec<[f64; 3]> {
        (0..n).map(|i| [i as f64, 0.0, 0.0]).collect()
    }

    /// Independent greedy oracle: recompute min-distances from scratch at
    /// every step instead of maintaining the running array.
    fn fps_oracle(points: &[[f64; 3]], m: usize) -> Vec<usize> {
        let mut picked = vec![0usize];
        while picked.len() < m {
            let mut best = (f64::NEG_INFINITY, 0usize);
            for i in 0..points.len() {
                let d = picked
                    .iter()
                    .map(|&s| dist_sq(&points[i], &points[s]))
                    .fold(f64::INFINITY, f64::min);
                if d > best.0 {
                    best = (d, i);
                }
            }
            picked.push(best.1);
        }
        picked
    }

    #[test]
    fn fps_examples() {
        let pts = line_points(10);
        // exhaustive pick returns every index in FPS visit order
        let all = farthest_point_sample(&pts, 10).unwrap();
        assert_eq!(all, vec![0, 9, 4, 2, 6, 1, 3, 5, 7, 8]);
        let mut sorted = all.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        assert_eq!(farthest_point_sample(&pts, 3).unwrap(), vec![0, 9, 4]);
        assert_eq!(farthest_point_sample(&pts, 1).unwrap(), vec![0]);
        assert!(farthest_point_sample(&pts, 11).is_err());
        assert!(farthest_point_sample(&pts, 0).is_err());
    }

    #[test]
    fn fps_matches_oracle_on_random_cloud() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        use rand::Rng;
        let pts: Vec<[f64; 3]> = (0..40)
            .map(|_| [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-1.0..1.0)])
            .collect();
        for m in [1, 2, 7, 20, 40] {
            assert_eq!(farthest_point_sample(&pts, m).unwrap(), fps_oracle(&pts, m));
        }
    }

    #[test]
    fn fps_two_approximation_of_best_subset() {
        // brute force the optimal max-min subset on a small cloud
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        use rand::Rng;
        let pts: Vec<[f64; 3]> = (0..9)
            .map(|_| [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), 0.0])
            .collect();
        let m = 4;
        let min_pair = |sel: &[usize]| {
            let mut best = f64::INFINITY;
            for i in 0..sel.len() {
                for j in i + 1..sel.len() {
                    best = best.min(dist_sq(&pts[sel[i]], &pts[sel[j]]).sqrt());
                }
            }
            best
        };
        let mut optimal = 0.0f64;
        let n = pts.len();
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != m {
                continue;
            }
            let sel: Vec<usize> = (0..n).filter(|&i| mask & (1 << i) != 0).collect();
            optimal = optimal.max(min_pair(&sel));
        }
        let fps = farthest_point_sample(&pts, m).unwrap();
        assert!(
            min_pair(&fps) >= 0.5 * optimal,
            "fps min-dist {} below half of optimal {optimal}",
            min_pair(&fps)
        );
    }

    #[test]
    fn ball_group_examples() {
        // isolated centroid
        let pts = vec![[0.0, 0.0, 0.0], [100.0, 0.0, 0.0]];
        let g = ball_group(&pts, &[0], 1.0, 3).unwrap();
        assert_eq!(g[0], vec![0, 0, 0]);

        // one in-radius neighbor, then self padding
        let pts = vec![[0.0, 0.0, 0.0], [0.5, 0.0, 0.0], [9.0, 0.0, 0.0]];
        let g = ball_group(&pts, &[0], 1.0, 3).unwrap();
        assert_eq!(g[0], vec![1, 0, 0]);

        // boundary point included (closed ball)
        let pts = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let g = ball_group(&pts, &[0], 1.0, 2).unwrap();
        assert_eq!(g[0], vec![1, 0]);

        assert!(ball_group(&pts, &[0], 0.0, 2).is_err());
    }

    fn tiny_sa_cfg() -> SaConfig<f64> {
        SaConfig { num_centroids: 1, radius: 2.0, max_neighbors: 4, mlp: [5, 6] }
    }

    #[test]
    fn sa_layer_max_of_equals_and_duplication() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = tiny_sa_cfg();
        let ids = SaParamIds::create(&mut store, &mut rng, "sa", 1, &cfg).unwrap();

        // centroid at origin with one repeated neighbor: pooled output must
        // equal the MLP image of that neighbor, and duplicating it again
        // must change nothing.
        let run = |pts: &[[f64; 3]]| {
            let mut g = Graph::new(&store);
            let feats = g.constant(TensorBase::new(vec![pts.len(), 1], vec![1.0; pts.len()]).unwrap());
            let (out, coords) = sa_layer(&mut g, feats, pts, &cfg, &ids).unwrap();
            assert_eq!(coords.len(), 1);
            g.tape.value(out).data().to_vec()
        };
        let base = run(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let dup = run(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        assert_eq!(base, dup);

        // all points coincide with the centroid: every grouped row is the
        // same (zero offset, same feature), so the pool equals the MLP of
        // that single row.
        let coincident = run(&[[0.5, 0.0, 0.0], [0.5, 0.0, 0.0], [0.5, 0.0, 0.0]]);
        let mut g = Graph::new(&store);
        let row = g.constant(TensorBase::new(vec![1, 4], vec![0.0, 0.0, 0.0, 1.0]).unwrap());
        let w1 = g.param(ids.w1);
        let b1 = g.param(ids.b1);
        let w2 = g.param(ids.w2);
        let b2 = g.param(ids.b2);
        let h = g.tape.matmul(row, w1).unwrap();
        let h = g.tape.add_bias(h, b1).unwrap();
        let h = g.tape.relu(h);
        let h = g.tape.matmul(h, w2).unwrap();
        let h = g.tape.add_bias(h, b2).unwrap();
        let h = g.tape.relu(h);
        assert_eq!(coincident, g.tape.value(h).data());
    }

    #[test]
    fn ga_layer_single_row_and_symmetry() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = GaConfig { num_heads: 2, head_dim: 3 };
        let ids = GaParamIds::create(&mut store, &mut rng, "ga", 4, &cfg).unwrap();

        // n = 1: softmax of 1x1 logits is 1, output is the projection itself
        let mut g = Graph::new(&store);
        let x = g.constant(TensorBase::new(vec![1, 4], vec![0.3, -0.5, 0.2, 0.9]).unwrap());
        let out = ga_layer(&mut g, x, &cfg, &ids, None).unwrap();
        let mut expect = Vec::new();
        for k in 0..2 {
            let w = g.param(ids.head_w[k]);
            let b = g.param(ids.head_b[k]);
            let p = g.tape.matmul(x, w).unwrap();
            let p = g.tape.add_bias(p, b).unwrap();
            expect.extend_from_slice(g.tape.value(p).data());
        }
        assert_eq!(g.tape.value(out).data(), &expect[..]);

        // two identical rows: identical outputs
        let mut g = Graph::new(&store);
        let x = g.constant(TensorBase::new(vec![2, 4], vec![0.1, 0.2, 0.3, 0.4, 0.1, 0.2, 0.3, 0.4]).unwrap());
        let out = ga_layer(&mut g, x, &cfg, &ids, None).unwrap();
        let v = g.tape.value(out);
        for j in 0..6 {
            assert!((v.get2(0, j) - v.get2(1, j)).abs() < 1e-15);
        }
    }

    #[test]
    fn ga_metric_identity_matches_plain() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = GaConfig { num_heads: 3, head_dim: 4 };
        let ids = GaParamIds::create(&mut store, &mut rng, "ga", 6, &cfg).unwrap();
        let data: Vec<f64> = (0..30).map(|i| ((i * 7 % 13) as f64 - 6.0) * 0.1).collect();

        let mut g = Graph::new(&store);
        let x = g.constant(TensorBase::new(vec![5, 6], data.clone()).unwrap());
        let plain = ga_layer(&mut g, x, &cfg, &ids, None).unwrap();
        let eye = g.constant(crate::params::init_identity(4));
        let with_m = ga_layer(&mut g, x, &cfg, &ids, Some(eye)).unwrap();
        let a = g.tape.value(plain).data();
        let b = g.tape.value(with_m).data();
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn encode3d_shape_and_determinism() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = Stack3dConfig {
            stages: vec![
                (
                    SaConfig { num_centroids: 8, radius: 3.0, max_neighbors: 4, mlp: [8, 8] },
                    GaConfig { num_heads: 2, head_dim: 4 },
                ),
                (
                    SaConfig { num_centroids: 4, radius: 6.0, max_neighbors: 3, mlp: [8, 8] },
                    GaConfig { num_heads: 2, head_dim: 4 },
                ),
            ],
        };
        let ids = Stack3dIds::create(&mut store, &mut rng, "enc3d", &cfg).unwrap();
        use rand::Rng;
        let pts: Vec<[f64; 3]> = (0..24)
            .map(|_| [rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0), rng.gen_range(0.0..2.0)])
            .collect();

        let run = || {
            let mut g = Graph::new(&store);
            let out = encode3d(&mut g, &pts, &cfg, &ids).unwrap();
            (g.tape.value(out).shape().to_vec(), g.tape.value(out).data().to_vec())
        };
        let (shape, a) = run();
        assert_eq!(shape, vec![4, 8]);
        let (_, b) = run();
        assert_eq!(a, b); // bit-identical

        // too few points
        let mut g = Graph::new(&store);
        let few: Vec<[f64; 3]> = pts[0..4].to_vec();
        assert!(encode3d(&mut g, &few, &cfg, &ids).is_err());
    }

    #[test]
    fn planned_encode_matches_layerwise_composition() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = Stack3dConfig {
            stages: vec![
                (
                    SaConfig { num_centroids: 6, radius: 2.5, max_neighbors: 3, mlp: [6, 6] },
                    GaConfig { num_heads: 3, head_dim: 2 },
                ),
                (
                    SaConfig { num_centroids: 2, radius: 5.0, max_neighbors: 2, mlp: [6, 6] },
                    GaConfig { num_heads: 2, head_dim: 3 },
                ),
            ],
        };
        let ids = Stack3dIds::create(&mut store, &mut rng, "enc3d", &cfg).unwrap();
        use rand::Rng;
        let pts: Vec<[f64; 3]> = (0..15)
            .map(|_| [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(0.0..1.5)])
            .collect();

        let mut g = Graph::new(&store);
        let fast = encode3d(&mut g, &pts, &cfg, &ids).unwrap();
        let ranges: Vec<f64> = pts.iter().map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()).collect();
        let mut feats = g.constant(TensorBase::new(vec![pts.len(), 1], ranges).unwrap());
        let mut cur = pts.clone();
        for ((sa_cfg, ga_cfg), (sa_ids, ga_ids)) in cfg.stages.iter().zip(&ids.stages) {
            let (pooled, coords) = sa_layer(&mut g, feats, &cur, sa_cfg, sa_ids).unwrap();
            feats = ga_layer(&mut g, pooled, ga_cfg, ga_ids, None).unwrap();
            cur = coords;
        }
        assert_eq!(g.tape.value(fast).data(), g.tape.value(feats).data());
    }

    #[test]
    fn encode3d_gradients_pass_fd() {
        use crate::gradcheck::check_params;
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = Stack3dConfig {
            stages: vec![(
                SaConfig { num_centroids: 3, radius: 3.0, max_neighbors: 3, mlp: [4, 4] },
                GaConfig { num_heads: 2, head_dim: 2 },
            )],
        };
        let ids = Stack3dIds::create(&mut store, &mut rng, "enc3d", &cfg).unwrap();
        use rand::Rng;
        let pts: Vec<[f64; 3]> = (0..8)
            .map(|_| [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(0.0..1.0)])
            .collect();
        let gap = check_params(
            &mut store,
            &move |g| {
                let out = encode3d(g, &pts, &cfg, &ids)?;
                Ok(g.tape.sum(out))
            },
            1e-6,
            1,
        )
        .unwrap();
        assert!(gap < 1e-5, "encode3d gradient gap {gap}");
    }

    proptest! {
        #[test]
        fn attention_rows_are_stochastic(values in proptest::collection::vec(-3.0f64..3.0, 12)) {
            let store: ParamStore<f64> = ParamStore::new();
            let mut g = Graph::new(&store);
            let p = g.constant(TensorBase::new(vec![4, 3], values).unwrap());
            let a = head_attention(&mut g, p, None).unwrap();
            let t = g.tape.value(a);
            for i in 0..4 {
                let s: f64 = (0..4).map(|j| t.get2(i, j)).sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}
