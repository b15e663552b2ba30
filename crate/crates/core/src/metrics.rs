//! ADD / ADD-S distances, thresholded accuracy, AUC and rotation /
//! translation error summaries.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{Pose6, Vec3};
use crate::mesh::TexturedMesh;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PoseErrorSummary {
    pub add: f64,
    pub add_s: f64,
    /// `None` for meshes tagged symmetric, whose rotation is not unique.
    pub rot_err_deg: Option<f64>,
    pub trans_err_rel: f64,
    pub symmetric: bool,
}

impl PoseErrorSummary {
    /// The distance used for scoring: ADD-S for symmetric meshes.
    pub fn add_or_adds(&self) -> f64 {
        if self.symmetric {
            self.add_s
        } else {
            self.add
        }
    }
}

fn posed(mesh: &TexturedMesh, pose: &Pose6) -> Result<Vec<Vec3>> {
    if mesh.vertex_count() == 0 {
        return Err(Error::invalid("mesh has no vertices"));
    }
    let r = pose.rotation()?;
    Ok(mesh.vertices().iter().map(|v| pose.apply(&r, v)).collect())
}

/// Mean distance between corresponding posed vertices.
pub fn add_score(estimate: &Pose6, truth: &Pose6, mesh: &TexturedMesh) -> Result<f64> {
    let a = posed(mesh, estimate)?;
    let b = posed(mesh, truth)?;
    Ok(a.iter().zip(&b).map(|(p, q)| (p - q).norm()).sum::<f64>() / a.len() as f64)
}

/// Mean distance from each estimated vertex to the closest true vertex.
pub fn add_s_score(estimate: &Pose6, truth: &Pose6, mesh: &TexturedMesh) -> Result<f64> {
    let a = posed(mesh, estimate)?;
    let b = posed(mesh, truth)?;
    let total: f64 = a
        .iter()
        .map(|p| {
            b.iter()
                .map(|q| (p - q).norm_squared())
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .sum();
    Ok(total / a.len() as f64)
}

/// ADD-S for symmetric meshes, ADD otherwise.
pub fn add_or_adds(estimate: &Pose6, truth: &Pose6, mesh: &TexturedMesh) -> Result<f64> {
    if mesh.is_symmetric() {
        add_s_score(estimate, truth, mesh)
    } else {
        add_score(estimate, truth, mesh)
    }
}

/// Percentage of distances strictly below `fraction · diameter`.
pub fn add_accuracy(distances: &[f64], diameter: f64, fraction: f64) -> Result<f64> {
    if distances.is_empty() {
        return Err(Error::invalid("no distances to score"));
    }
    if !(diameter > 0.0) {
        return Err(Error::invalid("diameter must be positive"));
    }
    let threshold = fraction * diameter;
    let hits = distances.iter().filter(|&&d| d < threshold).count();
    Ok(100.0 * hits as f64 / distances.len() as f64)
}

/// Area under the accuracy-vs-threshold curve on `[0, max_dist]`, as a
/// percentage. The curve is a step function, so the area is exact:
/// each distance `d ≤ max_dist` contributes `max_dist − d`.
pub fn auc_add(distances: &[f64], max_dist: f64) -> Result<f64> {
    if distances.is_empty() {
        return Err(Error::invalid("no distances to score"));
    }
    if !(max_dist > 0.0) {
        return Err(Error::invalid("max_dist must be positive"));
    }
    let area: f64 = distances.iter().map(|&d| (max_dist - d.max(0.0)).max(0.0)).sum();
    Ok(100.0 * area / (distances.len() as f64 * max_dist))
}

/// `(angle of R̂ R_gtᵀ in degrees, ‖t̂ − t_gt‖ / diameter)`.
pub fn rotation_translation_error(estimate: &Pose6, truth: &Pose6, diameter: f64) -> Result<(f64, f64)> {
    if !(diameter > 0.0) {
        return Err(Error::invalid("diameter must be positive"));
    }
    let rel = estimate.rotation()?.compose(&truth.rotation()?.transpose());
    let angle = rel.to_rotvec().norm().to_degrees();
    Ok((angle, (estimate.t - truth.t).norm() / diameter))
}

pub fn summarize(estimate: &Pose6, truth: &Pose6, mesh: &TexturedMesh, diameter: f64) -> Result<PoseErrorSummary> {
    let add = add_score(estimate, truth, mesh)?;
    let add_s = add_s_score(estimate, truth, mesh)?.min(add);
    let (rot, trans) = rotation_translation_error(estimate, truth, diameter)?;
    Ok(PoseErrorSummary {
        add,
        add_s,
        rot_err_deg: (!mesh.is_symmetric()).then_some(rot),
        trans_err_rel: trans,
        symmetric: mesh.is_symmetric(),
    })
}

pub fn median(values: &[f64]) -> Option<f64> {
    percentile(values, 50.0)
}

/// Linearly interpolated percentile, `q ∈ [0, 100]`.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (q / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{random_unit_vector, rotvec_to_matrix};
    use crate::mesh::shapes;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose6 {
        let w = random_unit_vector(rng) * rng.random_range(0.0..3.1);
        Pose6::new(w, Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(1.0..3.0)))
    }

    #[test]
    fn identical_poses_score_zero() {
        let m = shapes::unit_cube();
        let p = Pose6::new(Vec3::new(0.1, 0.2, 0.3), Vec3::new(0.0, 0.0, 2.0));
        assert_eq!(add_score(&p, &p, &m).unwrap(), 0.0);
        assert_eq!(add_s_score(&p, &p, &m).unwrap(), 0.0);
        assert_eq!(rotation_translation_error(&p, &p, 1.0).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn pure_translation_offset() {
        let m = shapes::unit_cube();
        let p = Pose6::new(Vec3::new(0.4, -0.3, 0.2), Vec3::new(0.0, 0.0, 2.0));
        let delta = Vec3::new(0.03, -0.04, 0.0);
        let q = Pose6::new(p.w, p.t + delta);
        assert!((add_score(&q, &p, &m).unwrap() - 0.05).abs() < 1e-15);
    }

    #[test]
    fn add_matches_vertex_loop() {
        let m = shapes::unit_cube();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (a, b) = (random_pose(&mut rng), random_pose(&mut rng));
        let (ra, rb) = (rotvec_to_matrix(&a.w).unwrap(), rotvec_to_matrix(&b.w).unwrap());
        let mut sum = 0.0;
        for v in m.vertices() {
            sum += ((ra.matrix() * v + a.t) - (rb.matrix() * v + b.t)).norm();
        }
        assert!((add_score(&a, &b, &m).unwrap() - sum / 8.0).abs() < 1e-12);
    }

    #[test]
    fn symmetric_plate_quarter_turn() {
        let m = shapes::square_plate(1.0, 0.2);
        let gt = Pose6::new(Vec3::zeros(), Vec3::new(0.0, 0.0, 3.0));
        let turned = Pose6::new(Vec3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2), gt.t);
        assert!(add_s_score(&turned, &gt, &m).unwrap() < 1e-12);
        assert!(add_score(&turned, &gt, &m).unwrap() > 0.1);
        assert!(summarize(&turned, &gt, &m, 1.0).unwrap().rot_err_deg.is_none());
    }

    #[test]
    fn adds_matches_double_loop() {
        let m = shapes::benchmark_object();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..5 {
            let (a, b) = (random_pose(&mut rng), random_pose(&mut rng));
            let pa: Vec<Vec3> = m.vertices().iter().map(|v| transform(&a, v)).collect();
            let pb: Vec<Vec3> = m.vertices().iter().map(|v| transform(&b, v)).collect();
            let mut total = 0.0;
            for p in &pa {
                let mut best = f64::INFINITY;
                for q in &pb {
                    best = best.min((p - q).norm());
                }
                total += best;
            }
            let oracle = total / pa.len() as f64;
            let ours = add_s_score(&a, &b, &m).unwrap();
            assert!((ours - oracle).abs() < 1e-12);
            assert!(ours <= add_score(&a, &b, &m).unwrap() + 1e-12);
        }
    }

    fn transform(p: &Pose6, v: &Vec3) -> Vec3 {
        rotvec_to_matrix(&p.w).unwrap().matrix() * v + p.t
    }

    #[test]
    fn empty_mesh_rejected() {
        let m = TexturedMesh::untextured(vec![], vec![], 1).unwrap();
        let p = Pose6::identity();
        assert!(add_score(&p, &p, &m).is_err());
        assert!(add_s_score(&p, &p, &m).is_err());
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(add_accuracy(&[0.0, 0.0], 1.0, 0.1).unwrap(), 100.0);
        assert_eq!(add_accuracy(&[2.0, 2.0], 2.0, 0.1).unwrap(), 0.0);
        let d = 3.0;
        assert_eq!(add_accuracy(&[0.05 * d, 0.15 * d, 0.09 * d, 0.2 * d], d, 0.1).unwrap(), 50.0);
        assert!(add_accuracy(&[], 1.0, 0.1).is_err());
        assert!(add_accuracy(&[1.0], 0.0, 0.1).is_err());
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc_add(&[0.0, 0.0], 0.1).unwrap(), 100.0);
        assert_eq!(auc_add(&[0.2, 0.5], 0.1).unwrap(), 0.0);
        assert!((auc_add(&[0.02, 0.08], 0.1).unwrap() - 50.0).abs() < 1e-12);
        assert!(auc_add(&[], 0.1).is_err());
    }

    #[test]
    fn auc_matches_numerical_integration() {
        let d = [0.02, 0.08];
        let steps = 100_000;
        let h = 0.1 / steps as f64;
        let mut area = 0.0;
        for i in 0..steps {
            let thr = (i as f64 + 0.5) * h;
            area += h * d.iter().filter(|&&x| x < thr).count() as f64 / d.len() as f64;
        }
        let numeric = 100.0 * area / 0.1;
        assert!((numeric - auc_add(&d, 0.1).unwrap()).abs() < 0.01);
    }

    #[test]
    fn table_calibrated_errors() {
        let gt = Pose6::new(Vec3::new(0.3, -0.2, 0.5), Vec3::new(0.01, 0.02, 0.6));
        let axis = Vec3::new(0.2, 0.9, -0.4).normalize();
        let extra = rotvec_to_matrix(&(axis * 1.280f64.to_radians())).unwrap();
        let r = extra.compose(&gt.rotation().unwrap());
        let diameter = 0.15;
        let est = Pose6::new(r.to_rotvec(), gt.t + Vec3::new(0.0, 0.6, 0.8) * 0.048 * diameter);
        let (rot, trans) = rotation_translation_error(&est, &gt, diameter).unwrap();
        assert!((rot - 1.280).abs() < 1e-9);
        assert!((trans - 0.048).abs() < 1e-12);
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(percentile(&[0.0, 10.0], 95.0), Some(9.5));
        assert_eq!(median(&[]), None);
    }

    proptest! {
        #[test]
        fn auc_is_monotone(mut d in proptest::collection::vec(0.0..0.2f64, 1..20), i in 0usize..20, bump in 0.0..0.05f64) {
            let before = auc_add(&d, 0.1).unwrap();
            let k = i % d.len();
            d[k] += bump;
            prop_assert!(auc_add(&d, 0.1).unwrap() <= before + 1e-12);
        }

        #[test]
        fn add_invariant_under_global_frame_change(seed in 0u64..1000) {
            let m = shapes::unit_cube();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b, g) = (random_pose(&mut rng), random_pose(&mut rng), random_pose(&mut rng));
            let left = |p: &Pose6| {
                let rg = g.rotation().unwrap();
                let r = rg.compose(&p.rotation().unwrap());
                Pose6::from_rotation(&r, rg.matrix() * p.t + g.t)
            };
            let base = add_score(&a, &b, &m).unwrap();
            let moved = add_score(&left(&a), &left(&b), &m).unwrap();
            prop_assert!((base - moved).abs() < 1e-9);
        }

        #[test]
        fn accuracy_matches_indicator_scan(d in proptest::collection::vec(0.0..1.0f64, 1..50), diameter in 0.5..5.0f64) {
            let mut hits = 0usize;
            for &x in &d {
                if x < 0.1 * diameter { hits += 1; }
            }
            let expected = 100.0 * hits as f64 / d.len() as f64;
            prop_assert_eq!(add_accuracy(&d, diameter, 0.1).unwrap(), expected);
        }
    }
}
