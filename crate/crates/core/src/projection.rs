//! LiDAR scans and their 2D projections: spherical range image (primary
//! encoder input) and bird's-eye-view height image (ablation input).

use crate::error::{Error, Result};
use crate::pose::PoseSE3;
use crate::scalar::Scalar;
use crate::tensor::TensorBase;

#[derive(Clone, Debug)]
pub struct LidarScan<S: Scalar> {
    pub points: Vec<[S; 3]>,
    pub pose: PoseSE3<S>,
    pub scan_id: u64,
}

impl<S: Scalar> LidarScan<S> {
    /// Validates: at least one point, finite coordinates, range > 0.
    pub fn new(points: Vec<[S; 3]>, pose: PoseSE3<S>, scan_id: u64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyInput("lidar_scan"));
        }
        for (i, p) in points.iter().enumerate() {
            if !(p[0].is_finite() && p[1].is_finite() && p[2].is_finite()) {
                return Err(Error::domain("lidar_scan", format!("point {i} is not finite")));
            }
            if p[0] == S::zero() && p[1] == S::zero() && p[2] == S::zero() {
                return Err(Error::domain(
                    "lidar_scan",
                    format!("point {i} is at the origin (range 0)"),
                ));
            }
        }
        Ok(Self { points, pose, scan_id })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// H x W grid of ranges; 0 marks an empty pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct RangeImage<S: Scalar> {
    pub h: usize,
    pub w: usize,
    values: Vec<S>,
}

impl<S: Scalar> RangeImage<S> {
    pub fn get(&self, row: usize, col: usize) -> S {
        self.values[row * self.w + col]
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    /// [H, W, 1] tensor with every range divided by `scale`.
    pub fn to_tensor_scaled(&self, scale: S) -> TensorBase<S> {
        let data = self.values.iter().map(|&v| v / scale).collect();
        TensorBase::new(vec![self.h, self.w, 1], data).expect("valid dims")
    }
}

/// H x W grid of heights over a clipped (x, y) window; `empty` marks
/// pixels no point contributed to.
#[derive(Clone, Debug, PartialEq)]
pub struct BevImage<S: Scalar> {
    pub h: usize,
    pub w: usize,
    pub x_max: S,
    pub y_max: S,
    pub empty: S,
    values: Vec<S>,
}

impl<S: Scalar> BevImage<S> {
    pub fn get(&self, row: usize, col: usize) -> S {
        self.values[row * self.w + col]
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    /// [H, W, 1] tensor with every height divided by `scale`.
    pub fn to_tensor_scaled(&self, scale: S) -> TensorBase<S> {
        let data = self.values.iter().map(|&v| v / scale).collect();
        TensorBase::new(vec![self.h, self.w, 1], data).expect("valid dims")
    }
}

fn bin<S: Scalar>(frac: S, n: usize) -> usize {
    let idx = (frac * S::from_f64(n as f64)).floor().to_f64();
    if idx < 0.0 {
        0
    } else if idx as usize >= n {
        n - 1
    } else {
        idx as usize
    }
}

/// Spherical projection: φ = arctan(z/√(x²+y²)), θ = atan2(y, x),
/// r = √(x²+y²+z²); row = ⌊(φ+π/2)/π·H⌋, col = ⌊(θ+π)/(2π)·W⌋, both
/// clamped. Pixel collisions keep the smallest range.
pub fn spherical_project<S: Scalar>(scan: &LidarScan<S>, h: usize, w: usize) -> Result<RangeImage<S>> {
    if h < 2 || w < 2 {
        return Err(Error::shape(
            "spherical_project",
            format!("image must be at least 2x2, got {h}x{w}"),
        ));
    }
    let pi = S::from_f64(std::f64::consts::PI);
    let two = S::one() + S::one();
    let mut values = vec![S::zero(); h * w];
    for p in &scan.points {
        let rxy = (p[0] * p[0] + p[1] * p[1]).sqrt();
        let phi = p[2].atan2(rxy);
        let theta = p[1].atan2(p[0]);
        let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        let row = bin((phi + pi / two) / pi, h);
        let col = bin((theta + pi) / (two * pi), w);
        let cell = &mut values[row * w + col];
        if *cell == S::zero() || r < *cell {
            *cell = r;
        }
    }
    Ok(RangeImage { h, w, values })
}

/// BEV projection: row = ⌊(y+y_max)/(2y_max)·H⌋, col = ⌊(x+x_max)/(2x_max)·W⌋;
/// points outside |x| ≤ x_max, |y| ≤ y_max are dropped; collisions keep the
/// maximum height.
pub fn bev_project<S: Scalar>(
    scan: &LidarScan<S>,
    h: usize,
    w: usize,
    x_max: S,
    y_max: S,
) -> Result<BevImage<S>> {
    if h < 2 || w < 2 {
        return Err(Error::shape(
            "bev_project",
            format!("image must be at least 2x2, got {h}x{w}"),
        ));
    }
    if x_max <= S::zero() || y_max <= S::zero() {
        return Err(Error::domain(
            "bev_project",
            format!("clip ranges must be positive, got ({x_max}, {y_max})"),
        ));
    }
    let two = S::one() + S::one();
    let empty = S::zero();
    let mut values = vec![empty; h * w];
    let mut filled = vec![false; h * w];
    for p in &scan.points {
        if p[0].abs() > x_max || p[1].abs() > y_max {
            continue;
        }
        let row = bin((p[1] + y_max) / (two * y_max), h);
        let col = bin((p[0] + x_max) / (two * x_max), w);
        let i = row * w + col;
        if !filled[i] || p[2] > values[i] {
            values[i] = p[2];
            filled[i] = true;
        }
    }
    Ok(BevImage { h, w, x_max, y_max, empty, values })
}

/// Row-major flattening of an [H, W, C] feature grid to (H·W) x C tokens.
pub fn grid_to_tokens<S: Scalar>(grid: &TensorBase<S>) -> Result<TensorBase<S>> {
    let s = grid.shape();
    if s.len() != 3 {
        return Err(Error::shape(
            "grid_to_tokens",
            format!("expected [H, W, C], got {s:?}"),
        ));
    }
    grid.reshaped(vec![s[0] * s[1], s[2]])
}

/// Inverse of [`grid_to_tokens`] given the grid dimensions.
pub fn tokens_to_grid<S: Scalar>(tokens: &TensorBase<S>, h: usize, w: usize) -> Result<TensorBase<S>> {
    let s = tokens.shape();
    if s.len() != 2 || s[0] != h * w {
        return Err(Error::shape(
            "tokens_to_grid",
            format!("expected {}x C tokens for a {h}x{w} grid, got {s:?}", h * w),
        ));
    }
    tokens.reshaped(vec![h, w, s[1]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn scan(points: Vec<[f64; 3]>) -> LidarScan<f64> {
        LidarScan::new(points, PoseSE3::identity(), 0).unwrap()
    }

    #[test]
    fn scan_validation() {
        assert!(LidarScan::<f64>::new(vec![], PoseSE3::identity(), 0).is_err());
        assert!(LidarScan::new(vec![[0.0, 0.0, 0.0]], PoseSE3::identity(), 0).is_err());
        assert!(LidarScan::new(vec![[f64::NAN, 0.0, 1.0]], PoseSE3::identity(), 0).is_err());
    }

    #[test]
    fn spherical_axis_pixel() {
        let img = spherical_project(&scan(vec![[1.0, 0.0, 0.0]]), 32, 64).unwrap();
        assert_eq!(img.get(16, 32), 1.0);
        assert_eq!(img.values().iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn spherical_hand_angles() {
        // (1, 1, sqrt 2): phi = pi/4, theta = pi/4, r = 2
        let p = [1.0, 1.0, 2.0f64.sqrt()];
        let rxy = (p[0] * p[0] + p[1] * p[1]).sqrt();
        assert!((p[2].atan2(rxy) - PI / 4.0).abs() < 1e-15);
        assert!((p[1].atan2(p[0]) - PI / 4.0).abs() < 1e-15);
        let img = spherical_project(&scan(vec![p]), 32, 64).unwrap();
        let row = (((PI / 4.0 + PI / 2.0) / PI) * 32.0).floor() as usize;
        let col = (((PI / 4.0 + PI) / (2.0 * PI)) * 64.0).floor() as usize;
        assert_eq!((row, col), (24, 40));
        assert!((img.get(row, col) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn spherical_collision_keeps_nearest() {
        let a = [3.0, 0.0, 0.0];
        let b = [5.0, 0.0, 0.0];
        let img = spherical_project(&scan(vec![a, b]), 32, 64).unwrap();
        assert_eq!(img.get(16, 32), 3.0);
        let img2 = spherical_project(&scan(vec![b, a]), 32, 64).unwrap();
        assert_eq!(img, img2); // order-invariant
    }

    #[test]
    fn spherical_pixels_come_from_input_ranges() {
        let pts: Vec<[f64; 3]> = (0..50)
            .map(|i| {
                let t = i as f64 * 0.37;
                [t.cos() * (2.0 + i as f64 * 0.1), t.sin() * 3.0, (t * 0.5).sin()]
            })
            .collect();
        let ranges: Vec<f64> = pts
            .iter()
            .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
            .collect();
        let img = spherical_project(&scan(pts), 16, 32).unwrap();
        for &v in img.values().iter().filter(|&&v| v != 0.0) {
            assert!(
                ranges.iter().any(|&r| (r - v).abs() < 1e-12),
                "pixel {v} matches no input range"
            );
        }
    }

    #[test]
    fn rotation_shifts_columns_circularly() {
        // points at azimuth pixel centers, phi = 0
        let w = 16usize;
        let pts: Vec<[f64; 3]> = (0..w)
            .step_by(3)
            .map(|j| {
                let theta = -PI + (j as f64 + 0.5) * 2.0 * PI / w as f64;
                [5.0 * theta.cos(), 5.0 * theta.sin(), 0.0]
            })
            .collect();
        let k = 5usize;
        let dtheta = 2.0 * PI * k as f64 / w as f64;
        let rot: Vec<[f64; 3]> = pts
            .iter()
            .map(|p| {
                [
                    p[0] * dtheta.cos() - p[1] * dtheta.sin(),
                    p[0] * dtheta.sin() + p[1] * dtheta.cos(),
                    p[2],
                ]
            })
            .collect();
        let img_a = spherical_project(&scan(pts), 4, w).unwrap();
        let img_b = spherical_project(&scan(rot), 4, w).unwrap();
        for row in 0..4 {
            for col in 0..w {
                let occupied_a = img_a.get(row, col) != 0.0;
                let occupied_b = img_b.get(row, (col + k) % w) != 0.0;
                assert_eq!(occupied_a, occupied_b, "row {row} col {col}");
            }
        }
    }

    #[test]
    fn bev_examples() {
        let img = bev_project(&scan(vec![[0.0, 0.0, 5.0]]), 8, 8, 10.0, 10.0).unwrap();
        assert_eq!(img.get(4, 4), 5.0);

        // collision keeps the higher point
        let img = bev_project(&scan(vec![[1.0, 1.0, 1.0], [1.0, 1.0, 2.0]]), 8, 8, 10.0, 10.0).unwrap();
        let occupied: Vec<f64> = img.values().iter().copied().filter(|&v| v != 0.0).collect();
        assert_eq!(occupied, vec![2.0]);

        // out-of-range x dropped
        let img = bev_project(&scan(vec![[25.0, 0.0, 3.0]]), 8, 8, 10.0, 10.0).unwrap();
        assert!(img.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bev_is_not_bijective_but_spherical_distinguishes() {
        // same (x, y), different z: identical BEV, different spherical
        let s1 = scan(vec![[4.0, 4.0, 0.5], [4.0, 4.0, 2.0]]);
        let s2 = scan(vec![[4.0, 4.0, 2.0], [4.0, 4.0, 2.0]]);
        let b1 = bev_project(&s1, 16, 16, 10.0, 10.0).unwrap();
        let b2 = bev_project(&s2, 16, 16, 10.0, 10.0).unwrap();
        assert_eq!(b1, b2);
        let p1 = spherical_project(&s1, 32, 64).unwrap();
        let p2 = spherical_project(&s2, 32, 64).unwrap();
        assert_ne!(p1, p2);
    }

    #[test]
    fn token_roundtrip() {
        let grid = TensorBase::new(vec![2, 2, 3], (0..12).map(|i| i as f64).collect()).unwrap();
        let tokens = grid_to_tokens(&grid).unwrap();
        assert_eq!(tokens.shape(), &[4, 3]);
        // rows ordered (0,0), (0,1), (1,0), (1,1)
        assert_eq!(&tokens.data()[0..3], &[0.0, 1.0, 2.0]);
        assert_eq!(&tokens.data()[3..6], &[3.0, 4.0, 5.0]);
        let back = tokens_to_grid(&tokens, 2, 2).unwrap();
        assert_eq!(back.data(), grid.data());
        assert_eq!(back.shape(), grid.shape());

        let single = TensorBase::new(vec![1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(grid_to_tokens(&single).unwrap().shape(), &[1, 4]);
    }
}
