//! Synthetic world: axis-aligned boxes over a ground plane, a spinning
//! multi-line range sensor, a closed smooth route, and dataset generation
//! with disjoint train/test traversals.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::pose::{quat_about_z, PoseSE3};
use crate::projection::LidarScan;
use crate::scalar::Scalar;
use crate::scanio::{write_manifest, write_scan, ManifestEntry};

// ── Scene ───────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb<S: Scalar> {
    pub min: [S; 3],
    pub max: [S; 3],
}

impl<S: Scalar> Aabb<S> {
    /// Smallest positive ray parameter hitting the box, if any (slab test).
    pub fn ray_hit(&self, origin: [S; 3], dir: [S; 3]) -> Option<S> {
        let mut t_near = S::neg_infinity();
        let mut t_far = S::infinity();
        for a in 0..3 {
            if dir[a].abs() < S::from_f64(1e-15) {
                if origin[a] < self.min[a] || origin[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let inv = S::one() / dir[a];
            let mut t0 = (self.min[a] - origin[a]) * inv;
            let mut t1 = (self.max[a] - origin[a]) * inv;
            if t0 > t1 {
                std::mem::swap(&mut t0, &mut t1);
            }
            t_near = t_near.max(t0);
            t_far = t_far.min(t1);
            if t_near > t_far {
                return None;
            }
        }
        if t_far < S::zero() {
            return None;
        }
        let t = if t_near > S::zero() { t_near } else { t_far };
        (t > S::zero()).then_some(t)
    }
}

/// Boxes over the ground plane z = 0, bounded by a scene radius.
#[derive(Clone, Debug)]
pub struct Scene<S: Scalar> {
    pub boxes: Vec<Aabb<S>>,
    pub radius: S,
    pub seed: u64,
}

impl<S: Scalar> Scene<S> {
    /// Scatters `n_boxes` boxes inside the scene radius, rejecting any box
    /// whose footprint comes within `clearance` of an avoid point (so
    /// sensor poses never sit inside an obstacle). Deterministic in seed.
    pub fn generate(
        radius: S,
        n_boxes: usize,
        seed: u64,
        avoid: &[[S; 3]],
        clearance: S,
    ) -> Result<Self> {
        if radius <= S::zero() {
            return Err(Error::domain("scene", format!("radius must be > 0, got {radius}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = radius.to_f64();
        let mut boxes = Vec::with_capacity(n_boxes);
        let mut attempts = 0usize;
        while boxes.len() < n_boxes {
            attempts += 1;
            if attempts > n_boxes * 2000 {
                return Err(Error::domain(
                    "scene",
                    format!("could not place {n_boxes} boxes with the requested clearance"),
                ));
            }
            let half_x: f64 = rng.gen_range(0.4..2.0);
            let half_y: f64 = rng.gen_range(0.4..2.0);
            let height: f64 = rng.gen_range(0.8..4.0);
            // keep every corner inside the scene radius
            let max_c = r - half_x.hypot(half_y);
            if max_c <= 0.0 {
                return Err(Error::domain("scene", "radius too small for box extents"));
            }
            let cx = rng.gen_range(-max_c..max_c);
            let cy = rng.gen_range(-max_c..max_c);
            if (cx * cx + cy * cy).sqrt() > max_c {
                continue;
            }
            let near_avoid = avoid.iter().any(|p| {
                let dx = (p[0].to_f64() - cx).abs() - half_x;
                let dy = (p[1].to_f64() - cy).abs() - half_y;
                dx.max(0.0).hypot(dy.max(0.0)) < clearance.to_f64()
            });
            if near_avoid {
                continue;
            }
            boxes.push(Aabb {
                min: [S::from_f64(cx - half_x), S::from_f64(cy - half_y), S::zero()],
                max: [S::from_f64(cx + half_x), S::from_f64(cy + half_y), S::from_f64(height)],
            });
        }
        Ok(Self { boxes, radius, seed })
    }
}

// ── Sensor ──────────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct SensorModel<S: Scalar> {
    pub num_beams: usize,
    /// Vertical field of view [phi_min, phi_max], radians.
    pub vfov: (S, S),
    pub azimuth_samples: usize,
    pub max_range: S,
    pub sigma: S,
    pub seed: u64,
}

impl<S: Scalar> SensorModel<S> {
    pub fn validate(&self) -> Result<()> {
        let half_pi = S::from_f64(std::f64::consts::FRAC_PI_2);
        if self.num_beams == 0 || self.azimuth_samples == 0 {
            return Err(Error::domain("sensor", "need at least one beam and one azimuth"));
        }
        if self.vfov.0 > self.vfov.1 || self.vfov.0 <= -half_pi || self.vfov.1 >= half_pi {
            return Err(Error::domain(
                "sensor",
                format!("vertical fov [{}, {}] must be ordered within (-pi/2, pi/2)", self.vfov.0, self.vfov.1),
            ));
        }
        if self.max_range <= S::zero() {
            return Err(Error::domain("sensor", format!("max range {} must be > 0", self.max_range)));
        }
        if self.sigma < S::zero() {
            return Err(Error::domain("sensor", format!("noise sigma {} must be >= 0", self.sigma)));
        }
        Ok(())
    }
}

impl SensorModel<f64> {
    /// Desk-scale default: 16 beams over a mostly-downward fan, 180
    /// azimuth samples, 30 m range, 2 cm range noise.
    pub fn desk_default(seed: u64) -> Self {
        Self {
            num_beams: 16,
            vfov: (-0.4, 0.1),
            azimuth_samples: 180,
            max_range: 30.0,
            sigma: 0.02,
            seed,
        }
    }
}

/// Generator for one scan, derived from the sensor seed and the scan id so
/// scans are independent streams and parallel generation stays bit-equal
/// to serial.
fn scan_rng(sensor_seed: u64, scan_id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sensor_seed ^ scan_id.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Casts every (beam, azimuth) ray from the posed sensor, keeps the
/// nearest ground/box hit within max range, perturbs the range with
/// seeded Gaussian noise, and returns sensor-frame points. A pose seeing
/// nothing is rejected.
pub fn raycast_scan<S: Scalar>(
    scene: &Scene<S>,
    sensor: &SensorModel<S>,
    pose: &PoseSE3<S>,
    scan_id: u64,
) -> Result<LidarScan<S>> {
    sensor.validate()?;
    let mut rng = scan_rng(sensor.seed, scan_id);
    let mut points = Vec::new();
    let origin = pose.t;
    for bi in 0..sensor.num_beams {
        let frac = if sensor.num_beams == 1 {
            S::zero()
        } else {
            S::from_f64(bi as f64 / (sensor.num_beams - 1) as f64)
        };
        let phi = sensor.vfov.0 + (sensor.vfov.1 - sensor.vfov.0) * frac;
        for ai in 0..sensor.azimuth_samples {
            let theta = S::from_f64(
                -std::f64::consts::PI
                    + std::f64::consts::TAU * ai as f64 / sensor.azimuth_samples as f64,
            );
            let dir_local = [phi.cos() * theta.cos(), phi.cos() * theta.sin(), phi.sin()];
            let dir = crate::pose::quat_rotate(pose.q, dir_local);

            let mut best = S::infinity();
            if dir[2] < S::from_f64(-1e-12) {
                let t = -origin[2] / dir[2];
                if t > S::zero() {
                    best = t;
                }
            }
            for b in &scene.boxes {
                if let Some(t) = b.ray_hit(origin, dir) {
                    if t < best {
                        best = t;
                    }
                }
            }
            if best <= sensor.max_range {
                let noise: f64 = rng.sample(StandardNormal);
                let r = (best + sensor.sigma * S::from_f64(noise))
                    .max(S::from_f64(1e-6))
                    .min(sensor.max_range);
                points.push([dir_local[0] * r, dir_local[1] * r, dir_local[2] * r]);
            }
        }
    }
    if points.is_empty() {
        return Err(Error::domain(
            "raycast_scan",
            format!("pose at ({}, {}, {}) sees nothing", origin[0], origin[1], origin[2]),
        ));
    }
    LidarScan::new(points, *pose, scan_id)
}

// ── Route ───────────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct Trajectory<S: Scalar> {
    pub poses: Vec<PoseSE3<S>>,
    pub timestamps: Vec<S>,
}

impl<S: Scalar> Trajectory<S> {
    /// Validates step bound, hemisphere fixing, and quaternion continuity.
    pub fn new(poses: Vec<PoseSE3<S>>, timestamps: Vec<S>, max_step: S) -> Result<Self> {
        if poses.len() < 2 {
            return Err(Error::domain("trajectory", "need at least two poses"));
        }
        if poses.len() != timestamps.len() {
            return Err(Error::shape(
                "trajectory",
                format!("{} poses vs {} timestamps", poses.len(), timestamps.len()),
            ));
        }
        for w in poses.windows(2) {
            let d = (0..3)
                .map(|i| (w[0].t[i] - w[1].t[i]) * (w[0].t[i] - w[1].t[i]))
                .fold(S::zero(), |a, b| a + b)
                .sqrt();
            if d > max_step {
                return Err(Error::domain(
                    "trajectory",
                    format!("step {d} exceeds the max step {max_step}"),
                ));
            }
            let dot = (0..4).map(|i| w[0].q[i] * w[1].q[i]).fold(S::zero(), |a, b| a + b);
            if dot < S::zero() {
                return Err(Error::domain("trajectory", "quaternion continuity violated"));
            }
        }
        Ok(Self { poses, timestamps })
    }
}

/// First positive root of the Bessel function J0; a heading swing with
/// this amplitude makes the displacement integral vanish, so the route
/// closes without ever pointing more than ~138 degrees off its initial
/// heading (quaternions stay on one hemisphere).
const BESSEL_J0_ROOT: f64 = 2.404_825_557_695_773;

/// Closed smooth loop inside the scene: heading oscillates sinusoidally
/// with the J0-root amplitude, positions follow by integration with a
/// linear drift correction for exact closure, then the loop is centered
/// and scaled to 60% of the scene radius. Heading stays tangent to the
/// path; sensor height is constant.
pub fn make_route<S: Scalar>(scene: &Scene<S>, n_poses: usize, seed: u64) -> Result<Trajectory<S>> {
    if n_poses < 2 {
        return Err(Error::domain("make_route", format!("need >= 2 poses, got {n_poses}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let n = n_poses;
    let steps = n - 1;
    let du = std::f64::consts::TAU / steps as f64;

    let heading = |k: usize| BESSEL_J0_ROOT * (k as f64 * du + phase).sin();

    // integrate the unit-speed heading field
    let mut xs = vec![0.0f64; n];
    let mut ys = vec![0.0f64; n];
    for k in 0..steps {
        let psi = heading(k);
        xs[k + 1] = xs[k] + du * psi.cos();
        ys[k + 1] = ys[k] + du * psi.sin();
    }
    // distribute the closure defect linearly, making the loop exact
    let (dx, dy) = (xs[n - 1] - xs[0], ys[n - 1] - ys[0]);
    for k in 0..n {
        let f = k as f64 / steps as f64;
        xs[k] -= f * dx;
        ys[k] -= f * dy;
    }
    // center and scale to 60% of the scene radius
    let cx = xs.iter().sum::<f64>() / n as f64;
    let cy = ys.iter().sum::<f64>() / n as f64;
    let mut max_norm = 0.0f64;
    for k in 0..n {
        xs[k] -= cx;
        ys[k] -= cy;
        max_norm = max_norm.max(xs[k].hypot(ys[k]));
    }
    let scale = 0.6 * scene.radius.to_f64() / max_norm.max(1e-12);

    let height = 1.5;
    let mut poses = Vec::with_capacity(n);
    let mut timestamps = Vec::with_capacity(n);
    for k in 0..n {
        let psi = if k == n - 1 { heading(0) } else { heading(k) };
        let q = quat_about_z(S::from_f64(psi));
        let t = [
            S::from_f64(xs[k] * scale),
            S::from_f64(ys[k] * scale),
            S::from_f64(height),
        ];
        poses.push(PoseSE3::new(t, q)?);
        timestamps.push(S::from_f64(k as f64));
    }
    // closure: the drift correction pinned the endpoint onto the start
    let max_step = S::from_f64(4.0 * scale * du);
    Trajectory::new(poses, timestamps, max_step)
}

// ── Dataset ─────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct SplitSpec<S: Scalar> {
    pub n_train: usize,
    pub n_test: usize,
    /// Translation jitter radius for test-lap poses, meters.
    pub jitter: S,
}

/// Offset separating test scan ids from train scan ids.
pub const TEST_ID_BASE: u64 = 1_000_000;

/// Renders train and test traversals of the route to scan files plus two
/// manifests in `out_dir`. Train poses are the route poses; test poses
/// jitter the route translation within the split's radius and use disjoint
/// scan ids (different noise streams).
pub fn make_dataset<S: Scalar>(
    scene: &Scene<S>,
    sensor: &SensorModel<S>,
    route: &Trajectory<S>,
    split: &SplitSpec<S>,
    out_dir: &Path,
) -> Result<(PathBuf, PathBuf)> {
    if split.n_train == 0 || split.n_test == 0 {
        return Err(Error::domain("make_dataset", "need at least one scan per split"));
    }
    if split.jitter < S::zero() {
        return Err(Error::domain("make_dataset", "jitter must be >= 0"));
    }
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let loop_len = route.poses.len() - 1; // last pose repeats the first

    let mut train_entries = Vec::with_capacity(split.n_train);
    for i in 0..split.n_train {
        let pose = route.poses[i % loop_len];
        let scan = raycast_scan(scene, sensor, &pose, i as u64)?;
        let name = format!("train_{i:06}.bin");
        write_scan(&out_dir.join(&name), &scan)?;
        train_entries.push(ManifestEntry { path: name, pose });
    }

    // jitter stream is its own generator, independent of range noise
    let mut jrng = ChaCha8Rng::seed_from_u64(sensor.seed ^ 0x7E57_7E57_7E57_7E57);
    let mut test_entries = Vec::with_capacity(split.n_test);
    for i in 0..split.n_test {
        let base = &route.poses[(i * loop_len) / split.n_test];
        let j = split.jitter.to_f64();
        let (dx, dy) = loop {
            let dx: f64 = jrng.gen_range(-1.0..1.0);
            let dy: f64 = jrng.gen_range(-1.0..1.0);
            if dx.hypot(dy) <= 1.0 {
                break (dx * j, dy * j);
            }
        };
        let t = [
            base.t[0] + S::from_f64(dx),
            base.t[1] + S::from_f64(dy),
            base.t[2],
        ];
        let pose = PoseSE3::new(t, base.q)?;
        let scan_id = TEST_ID_BASE + i as u64;
        let scan = raycast_scan(scene, sensor, &pose, scan_id)?;
        let name = format!("test_{i:06}.bin");
        write_scan(&out_dir.join(&name), &scan)?;
        test_entries.push(ManifestEntry { path: name, pose });
    }

    let train_manifest = out_dir.join("train_manifest.txt");
    let test_manifest = out_dir.join("test_manifest.txt");
    write_manifest(&train_manifest, &train_entries)?;
    write_manifest(&test_manifest, &test_entries)?;
    Ok((train_manifest, test_manifest))
}
