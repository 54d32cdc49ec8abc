use nalgebra::{Matrix3, Vector3};

use super::OdometryError;
use crate::geometry::{Point3, Pose};

/// Closed-form least-squares rigid transform `T` minimising
/// `sum |q_i - T p_i|^2` (centroids plus SVD of the cross-covariance, with
/// the reflection case corrected).
pub fn estimate_rigid_transform(p: &[Point3], q: &[Point3]) -> Result<Pose, OdometryError> {
    if p.len() != q.len() || p.len() < 3 {
        return Err(OdometryError::DegenerateConfiguration);
    }
    let n = p.len() as f64;
    let cp = p.iter().fold(Vector3::zeros(), |a, x| a + x.coords) / n;
    let cq = q.iter().fold(Vector3::zeros(), |a, x| a + x.coords) / n;
    let mut h = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    for (a, b) in p.iter().zip(q) {
        let da = a.coords - cp;
        h += da * (b.coords - cq).transpose();
        spread += da * da.transpose();
    }
    // Collinear (or coincident) sources leave a free rotation about the line.
    let mut ev: Vec<f64> = spread.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if ev[0] <= 1e-24 || ev[1] <= 1e-12 * ev[0] {
        return Err(OdometryError::DegenerateConfiguration);
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    Ok(Pose {
        rotation: r,
        translation: cq - r * cp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random_pose(rng: &mut impl Rng) -> Pose {
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let t = Vector3::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
        Pose::from_axis_angle(&axis, rng.random_range(0.0..3.0), t)
    }

    fn random_points(rng: &mut impl Rng, n: usize) -> Vec<Point3> {
        (0..n)
            .map(|_| Point3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)))
            .collect()
    }

    #[test]
    fn identical_sets_give_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_points(&mut rng, 10);
        let t = estimate_rigid_transform(&p, &p).unwrap();
        assert!(t.max_abs_diff(&Pose::identity()) < 1e-12);
    }

    #[test]
    fn noiseless_motion_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for n in [3, 4, 10, 200] {
            let g = random_pose(&mut rng);
            let p = random_points(&mut rng, n);
            let q: Vec<_> = p.iter().map(|x| g.apply(x)).collect();
            let t = estimate_rigid_transform(&p, &q).unwrap();
            assert!(t.between(&g).rotation_angle() < 1e-9);
            assert!((t.translation - g.translation).norm() < 1e-9);
        }
    }

    #[test]
    fn noisy_motion_meets_accuracy_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let (mut rot, mut trans) = (0.0, 0.0);
        for _ in 0..100 {
            let g = random_pose(&mut rng);
            let p = random_points(&mut rng, 100);
            let q: Vec<_> = p
                .iter()
                .map(|x| g.apply(x) + Vector3::from_fn(|_, _| noise.sample(&mut rng)))
                .collect();
            let t = estimate_rigid_transform(&p, &q).unwrap();
            rot += t.between(&g).rotation_angle();
            trans += (t.translation - g.translation).norm();
        }
        assert!(rot / 100.0 < 0.5f64.to_radians());
        assert!(trans / 100.0 < 0.01);
    }

    #[test]
    fn reflection_is_corrected() {
        // Planar data admits a reflection with equal residual; the proper
        // rotation must win.
        let p = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
            Point3::new(1.0, 1.0, 0.0),
        ];
        let g = Pose::from_yaw(0.7, Vector3::new(1.0, 2.0, 3.0));
        let q: Vec<_> = p.iter().map(|x| g.apply(x)).collect();
        let t = estimate_rigid_transform(&p, &q).unwrap();
        assert!(t.rotation.determinant() > 0.0);
        assert!(t.max_abs_diff(&g) < 1e-9);
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let line: Vec<_> = (0..5).map(|i| Point3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
        assert!(matches!(estimate_rigid_transform(&line, &line), Err(OdometryError::DegenerateConfiguration)));
        let two = vec![Point3::origin(), Point3::new(1.0, 0.0, 0.0)];
        assert!(estimate_rigid_transform(&two, &two).is_err());
        let p = vec![Point3::origin(); 3];
        assert!(estimate_rigid_transform(&p, &p[..2]).is_err());
    }

    proptest! {
        #[test]
        fn estimate_is_left_invariant(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_points(&mut rng, 30);
            let q: Vec<_> = p
                .iter()
                .map(|x| x + Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)))
                .collect();
            let t = estimate_rigid_transform(&p, &q).unwrap();
            let g = random_pose(&mut rng);
            let gp: Vec<_> = p.iter().map(|x| g.apply(x)).collect();
            let gq: Vec<_> = q.iter().map(|x| g.apply(x)).collect();
            let tg = estimate_rigid_transform(&gp, &gq).unwrap();
            let expected = g.compose(&t).compose(&g.inverse());
            prop_assert!(tg.max_abs_diff(&expected) < 1e-9, "{}", tg.max_abs_diff(&expected));
        }
    }
}
