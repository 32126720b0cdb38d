//! MPJPE, PA-MPJPE and MPVE, all reported in millimeters.

use nalgebra::{Matrix3, SVD};

use crate::body::{pelvis, Vec3};
use crate::{Error, Result};

/// Similarity transform `y ~ scale * rotation * x + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
    /// Set when the point configuration was rank deficient and only a
    /// translation was fitted.
    pub degenerate: bool,
}

impl Similarity {
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p * self.scale + self.translation
    }
}

/// Aggregate evaluation metrics in millimeters.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EvalReport {
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub mpve: f64,
    pub sample_count: usize,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "mpjpe_mm,pa_mpjpe_mm,mpve_mm,samples";

    pub fn csv_row(&self) -> String {
        format!("{:.4},{:.4},{:.4},{}", self.mpjpe, self.pa_mpjpe, self.mpve, self.sample_count)
    }
}

/// Running mean of per-sample metrics, summed in insertion order.
#[derive(Debug, Clone, Default)]
pub struct EvalAccumulator {
    mpjpe: f64,
    pa_mpjpe: f64,
    mpve: f64,
    mpve_count: usize,
    count: usize,
}

impl EvalAccumulator {
    pub fn push(&mut self, mpjpe: f64, pa_mpjpe: f64, mpve: Option<f64>) {
        self.mpjpe += mpjpe;
        self.pa_mpjpe += pa_mpjpe;
        if let Some(v) = mpve {
            self.mpve += v;
            self.mpve_count += 1;
        }
        self.count += 1;
    }

    pub fn finish(&self) -> EvalReport {
        let n = self.count.max(1) as f64;
        EvalReport {
            mpjpe: self.mpjpe / n,
            pa_mpjpe: self.pa_mpjpe / n,
            mpve: if self.mpve_count > 0 { self.mpve / self.mpve_count as f64 } else { f64::NAN },
            sample_count: self.count,
        }
    }
}

fn same_len(context: &'static str, a: &[Vec3], b: &[Vec3]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::dim(context, b.len(), a.len()));
    }
    Ok(())
}

fn mean_distance_mm(a: &[Vec3], b: &[Vec3], shift_a: Vec3, shift_b: Vec3) -> f64 {
    let total: f64 = a.iter().zip(b).map(|(p, q)| ((p - shift_a) - (q - shift_b)).norm()).sum();
    total / a.len() as f64 * 1000.0
}

/// Mean joint error after moving both pelvises to the origin.
pub fn mpjpe(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    same_len("mpjpe", pred, gt)?;
    Ok(mean_distance_mm(pred, gt, pelvis(pred), pelvis(gt)))
}

/// Mean joint error without any alignment.
pub fn mean_joint_error(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    same_len("mean_joint_error", pred, gt)?;
    Ok(mean_distance_mm(pred, gt, Vec3::zeros(), Vec3::zeros()))
}

/// Mean vertex error after aligning by `root_pred` / `root_gt`.
pub fn mpve(pred: &[Vec3], gt: &[Vec3], root_pred: Vec3, root_gt: Vec3) -> Result<f64> {
    same_len("mpve", pred, gt)?;
    Ok(mean_distance_mm(pred, gt, root_pred, root_gt))
}

/// Least-squares similarity mapping `x` onto `y`.
///
/// Rank-deficient configurations (fewer than two independent directions in
/// either set) fall back to a pure translation and set `degenerate`.
pub fn procrustes_align(x: &[Vec3], y: &[Vec3]) -> Result<Similarity> {
    same_len("procrustes_align", x, y)?;
    if x.len() < 3 {
        return Err(Error::Degenerate(format!("procrustes needs at least 3 points, got {}", x.len())));
    }
    let n = x.len() as f64;
    let mx = x.iter().fold(Vec3::zeros(), |a, p| a + p) / n;
    let my = y.iter().fold(Vec3::zeros(), |a, p| a + p) / n;
    let mut cov = Matrix3::zeros();
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    for (p, q) in x.iter().zip(y) {
        let a = p - mx;
        let b = q - my;
        cov += b * a.transpose();
        var_x += a.norm_squared();
        var_y += b.norm_squared();
    }
    let fallback = Similarity {
        scale: 1.0,
        rotation: Matrix3::identity(),
        translation: my - mx,
        degenerate: true,
    };
    let tiny = 1e-12 * (var_x.max(var_y)).max(1e-300);
    if var_x <= 1e-24 || var_y <= 1e-24 {
        return Ok(fallback);
    }
    let svd = SVD::new(cov, true, true);
    let (Some(u), Some(vt)) = (svd.u, svd.v_t) else {
        return Ok(fallback);
    };
    let mut sv = svd.singular_values;
    // nalgebra does not sort singular values; rank test on the second largest.
    let mut sorted = [sv[0], sv[1], sv[2]];
    sorted.sort_by(|a, b| b.total_cmp(a));
    if sorted[1] <= tiny {
        return Ok(fallback);
    }
    // Reflection fix: flip the axis of the smallest singular value.
    let d = (u * vt).determinant().signum();
    let mut flip = Matrix3::identity();
    if d < 0.0 {
        let k = (0..3).min_by(|&a, &b| sv[a].total_cmp(&sv[b])).unwrap_or(2);
        flip[(k, k)] = -1.0;
        sv[k] = -sv[k];
    }
    let rotation = u * flip * vt;
    let scale = sv.sum() / var_x;
    let translation = my - rotation * mx * scale;
    Ok(Similarity {
        scale,
        rotation,
        translation,
        degenerate: false,
    })
}

/// MPJPE after Procrustes alignment of `pred` onto `gt`.
pub fn pa_mpjpe(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    let t = procrustes_align(pred, gt)?;
    let aligned: Vec<Vec3> = pred.iter().map(|p| t.apply(p)).collect();
    mean_joint_error(&aligned, gt)
}

/// Per-sample MPJPE, PA-MPJPE and (optionally) MPVE. Vertices are aligned by
/// the same pelvis offset as the joints.
pub fn sample_metrics(
    pred_joints: &[Vec3],
    gt_joints: &[Vec3],
    vertices: Option<(&[Vec3], &[Vec3])>,
) -> Result<(f64, f64, Option<f64>)> {
    let a = mpjpe(pred_joints, gt_joints)?;
    let b = pa_mpjpe(pred_joints, gt_joints)?;
    let c = match vertices {
        Some((pv, gv)) => Some(mpve(pv, gv, pelvis(pred_joints), pelvis(gt_joints))?),
        None => None,
    };
    Ok((a, b, c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, Unit};
    use proptest::prelude::*;
    use rand::Rng;

    fn cloud(seed: u64, n: usize) -> Vec<Vec3> {
        let mut r = crate::rng::rng(seed);
        (0..n)
            .map(|_| Vec3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)))
            .collect()
    }

    fn random_similarity(seed: u64) -> Similarity {
        let mut r = crate::rng::rng(seed);
        let axis = Unit::new_normalize(Vec3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)));
        Similarity {
            scale: r.random_range(0.2..3.0),
            rotation: Rotation3::from_axis_angle(&axis, r.random_range(-3.1..3.1)).into_inner(),
            translation: Vec3::new(r.random_range(-2.0..2.0), r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)),
            degenerate: false,
        }
    }

    fn residual(t: &Similarity, x: &[Vec3], y: &[Vec3]) -> f64 {
        x.iter().zip(y).map(|(p, q)| (t.apply(p) - q).norm_squared()).sum()
    }

    #[test]
    fn identical_inputs_give_zero() {
        let j = cloud(1, 17);
        assert_eq!(mpjpe(&j, &j).unwrap(), 0.0);
        assert!(pa_mpjpe(&j, &j).unwrap() < 1e-9);
        assert_eq!(mpve(&j, &j, Vec3::zeros(), Vec3::zeros()).unwrap(), 0.0);
    }

    #[test]
    fn pythagorean_offset() {
        let gt = cloud(2, 17);
        let off = Vec3::new(0.003, 0.0, 0.004);
        let mut pred = gt.clone();
        for (i, p) in pred.iter_mut().enumerate() {
            if i != 11 && i != 12 {
                *p += off;
            }
        }
        // Pelvis unchanged, so the offset survives root alignment.
        let expected = 5.0 * 15.0 / 17.0;
        assert!((mpjpe(&pred, &gt).unwrap() - expected).abs() < 1e-9);
        let shifted: Vec<Vec3> = gt.iter().map(|p| p + off).collect();
        assert!((mean_joint_error(&shifted, &gt).unwrap() - 5.0).abs() < 1e-9);
    }

    #[test]
    fn mpve_one_millimeter_and_naive_loop() {
        let gt = cloud(3, 1723);
        let pred: Vec<Vec3> = gt.iter().map(|p| p + Vec3::new(0.001, 0.0, 0.0)).collect();
        assert!((mpve(&pred, &gt, Vec3::zeros(), Vec3::zeros()).unwrap() - 1.0).abs() < 1e-9);
        let other = cloud(4, 1723);
        let mut naive = 0.0;
        for i in 0..gt.len() {
            let dx = other[i][0] - gt[i][0];
            let dy = other[i][1] - gt[i][1];
            let dz = other[i][2] - gt[i][2];
            naive += (dx * dx + dy * dy + dz * dz).sqrt();
        }
        naive = naive / 1723.0 * 1000.0;
        assert!((mpve(&other, &gt, Vec3::zeros(), Vec3::zeros()).unwrap() - naive).abs() < 1e-9);
    }

    #[test]
    fn recovers_exact_similarity() {
        let x = cloud(5, 17);
        let mut t0 = random_similarity(6);
        t0.scale = 2.0;
        let y: Vec<Vec3> = x.iter().map(|p| t0.apply(p)).collect();
        let t = procrustes_align(&x, &y).unwrap();
        assert!((t.scale - 2.0).abs() < 1e-9);
        assert!((t.rotation - t0.rotation).abs().max() < 1e-9);
        assert!((t.translation - t0.translation).norm() < 1e-9);
        assert!(residual(&t, &x, &y) < 1e-18);
    }

    #[test]
    fn identity_for_equal_sets() {
        let x = cloud(7, 10);
        let t = procrustes_align(&x, &x).unwrap();
        assert!((t.scale - 1.0).abs() < 1e-12);
        assert!((t.rotation - Matrix3::identity()).abs().max() < 1e-12);
        assert!(t.translation.norm() < 1e-12);
    }

    #[test]
    fn reflection_is_never_returned() {
        let x = cloud(8, 12);
        let y: Vec<Vec3> = x.iter().map(|p| Vec3::new(-p[0], p[1], p[2])).collect();
        let t = procrustes_align(&x, &y).unwrap();
        assert!((t.rotation.determinant() - 1.0).abs() < 1e-9);
        assert!((t.rotation.transpose() * t.rotation - Matrix3::identity()).abs().max() < 1e-9);
    }

    #[test]
    fn beats_random_search() {
        let x = cloud(9, 17);
        let y = cloud(10, 17);
        let best = procrustes_align(&x, &y).unwrap();
        let r0 = residual(&best, &x, &y);
        for s in 0..1000 {
            let t = random_similarity(100 + s);
            assert!(r0 <= residual(&t, &x, &y) + 1e-12);
        }
    }

    #[test]
    fn degenerate_falls_back_to_translation() {
        let x = vec![Vec3::new(0.0, 0.0, 0.0); 5];
        let y = cloud(11, 5);
        let t = procrustes_align(&x, &y).unwrap();
        assert!(t.degenerate);
        assert_eq!(t.scale, 1.0);
        let line: Vec<Vec3> = (0..5).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        assert!(procrustes_align(&line, &y).unwrap().degenerate);
        assert!(procrustes_align(&x[..2], &y[..2]).is_err());
        assert!(mpjpe(&x, &y[..4]).is_err());
    }

    #[test]
    fn one_perturbed_joint_is_positive() {
        let gt = cloud(12, 17);
        let mut pred = gt.clone();
        pred[3] += Vec3::new(0.01, 0.0, 0.0);
        assert!(pa_mpjpe(&pred, &gt).unwrap() > 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn pa_not_above_mpjpe(seed in 0u64..u64::MAX) {
            let gt = cloud(seed, 17);
            let pred = cloud(seed ^ 0x5555, 17);
            prop_assert!(pa_mpjpe(&pred, &gt).unwrap() <= mpjpe(&pred, &gt).unwrap() + 1e-6);
        }

        #[test]
        fn pa_invariant_to_similarity_of_prediction(seed in 0u64..u64::MAX) {
            let gt = cloud(seed, 17);
            let pred = cloud(seed.wrapping_add(1), 17);
            let t = random_similarity(seed.wrapping_add(2));
            let moved: Vec<Vec3> = pred.iter().map(|p| t.apply(p)).collect();
            let a = pa_mpjpe(&pred, &gt).unwrap();
            let b = pa_mpjpe(&moved, &gt).unwrap();
            prop_assert!((a - b).abs() < 1e-6);
        }

        #[test]
        fn common_rigid_motion_changes_nothing(seed in 0u64..u64::MAX) {
            let gt = cloud(seed, 17);
            let pred = cloud(seed.wrapping_add(3), 17);
            let mut t = random_similarity(seed.wrapping_add(4));
            t.scale = 1.0;
            let g2: Vec<Vec3> = gt.iter().map(|p| t.apply(p)).collect();
            let p2: Vec<Vec3> = pred.iter().map(|p| t.apply(p)).collect();
            prop_assert!((mpjpe(&pred, &gt).unwrap() - mpjpe(&p2, &g2).unwrap()).abs() < 1e-9);
            prop_assert!((pa_mpjpe(&pred, &gt).unwrap() - pa_mpjpe(&p2, &g2).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn joint_permutation_invariance(seed in 0u64..u64::MAX) {
            let gt = cloud(seed, 17);
            let pred = cloud(seed.wrapping_add(5), 17);
            // swap two non-hip joints in both
            let (mut g2, mut p2) = (gt.clone(), pred.clone());
            g2.swap(0, 7);
            p2.swap(0, 7);
            prop_assert!((mpjpe(&pred, &gt).unwrap() - mpjpe(&p2, &g2).unwrap()).abs() < 1e-9);
        }
    }
}
