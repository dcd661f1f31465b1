use crossdesc_core::datagen::{Pose, BallIndex};
use crossdesc_core::geomatch::*;
use nalgebra::{Point3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_points(rng: &mut ChaCha8Rng, n: usize, s: f64) -> Vec<Point3<f64>> {
    (0..n)
        .map(|_| Point3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s)))
        .collect()
}

fn brute_nn(a: &[Vec<f32>], b: &[Vec<f32>]) -> Vec<(usize, f64)> {
    a.iter()
        .map(|q| {
            let mut best = (0, f64::INFINITY);
            for (j, c) in b.iter().enumerate() {
                let d = q.iter().zip(c).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>().sqrt();
                if d < best.1 {
                    best = (j, d);
                }
            }
            best
        })
        .collect()
}

#[test]
fn match_nn_agrees_with_exhaustive_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let (na, nb, d) = (rng.random_range(1..64), rng.random_range(1..64), rng.random_range(1..16));
        // coarse values force exact ties
        let mut gen = |n: usize| -> Vec<Vec<f32>> {
            (0..n).map(|_| (0..d).map(|_| rng.random_range(-3..=3) as f32 * 0.5).collect()).collect()
        };
        let (a, b) = (gen(na), gen(nb));
        let got = match_nn(&a, &b).unwrap();
        for (m, (j, dist)) in got.iter().zip(brute_nn(&a, &b)) {
            assert_eq!(m.index_b, j);
            assert!((m.distance - dist).abs() <= 1e-10);
        }
    }
}

#[test]
fn kabsch_recovers_random_transform() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let t = random_transform(&mut rng, 180.0, 2.0);
        let src = rand_points(&mut rng, 50, 1.0);
        let dst: Vec<_> = src.iter().map(|p| t.transform(p)).collect();
        let fit = kabsch_fit(&src, &dst).unwrap();
        assert!((fit.rotation - t.rotation).abs().max() < 1e-9);
        assert!((fit.translation - t.translation).abs().max() < 1e-9);
    }
}

#[test]
fn kabsch_rejects_collinear_points() {
    let src: Vec<_> = (0..5).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
    assert!(kabsch_fit(&src, &src).is_err());
}

fn outlier_matches(rng: &mut ChaCha8Rng, t: &RigidTransform, n: usize, inlier_frac: f64) -> (Vec<Point3<f64>>, Vec<Point3<f64>>, Vec<Match>) {
    let src = rand_points(rng, n, 1.5);
    let mut dst: Vec<_> = src.iter().map(|p| t.transform(p)).collect();
    let inliers = (n as f64 * inlier_frac).round() as usize;
    for q in dst.iter_mut().skip(inliers) {
        *q = Point3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
    }
    let mut matches: Vec<Match> = (0..n).map(|i| Match { index_a: i, index_b: i, distance: 0.0 }).collect();
    matches.shuffle(rng);
    (src, dst, matches)
}

#[test]
fn ransac_recovers_transform_with_forty_percent_outliers() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..5 {
        let t = random_transform(&mut rng, 90.0, 1.0);
        let (src, dst, matches) = outlier_matches(&mut rng, &t, 100, 0.6);
        let out = ransac_register(&src, &dst, &matches, &RansacConfig { iterations: 1000, ..Default::default() }).unwrap();
        let RansacOutcome::Success(fit) = out else { panic!("ransac failed") };
        let (r, tr) = transform_error_deg_m(&fit.transform, &t);
        assert!(r < 2.0 && tr < 0.05, "{r} deg, {tr} m");
        assert!(fit.inliers.len() >= 60);
    }
}

#[test]
fn ransac_ignores_match_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let t = random_transform(&mut rng, 30.0, 0.5);
    let (src, dst, mut matches) = outlier_matches(&mut rng, &t, 40, 0.6);
    let cfg = RansacConfig { iterations: 300, ..Default::default() };
    let a = ransac_register(&src, &dst, &matches, &cfg).unwrap();
    matches.reverse();
    let b = ransac_register(&src, &dst, &matches, &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn ransac_needs_three_matches() {
    let p = vec![Point3::origin(); 2];
    let matches: Vec<Match> = (0..2).map(|i| Match { index_a: i, index_b: i, distance: 0.0 }).collect();
    assert!(ransac_register(&p, &p, &matches, &RansacConfig::default()).is_err());
}

#[test]
fn rmse_boundary_is_incorrect() {
    // errors 0.1 and 0.3: rmse² = (0.01 + 0.09) / 2 = 0.05 > 0.04
    let pairs = vec![
        (Point3::new(0.0, 0.0, 0.0), Point3::new(0.1, 0.0, 0.0)),
        (Point3::new(1.0, 0.0, 0.0), Point3::new(1.3, 0.0, 0.0)),
    ];
    let cloud: Vec<_> = pairs.iter().map(|p| p.0).collect();
    let v = registration_correct(&Pose::identity(), &RegistrationEval::default(), &pairs, &cloud, &cloud).unwrap();
    assert!((v.rmse - 0.223_606_797_749_979).abs() < 1e-12);
    assert!(!v.correct);
    // just inside
    let close = vec![(Point3::origin(), Point3::new(0.199, 0.0, 0.0))];
    assert!(registration_correct(&Pose::identity(), &RegistrationEval::default(), &close, &cloud, &cloud).unwrap().correct);
}

#[test]
fn low_overlap_is_incorrect() {
    let src: Vec<_> = (0..10).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
    let dst: Vec<_> = src[..2].to_vec();
    let pairs = vec![(src[0], dst[0])];
    let v = registration_correct(&Pose::identity(), &RegistrationEval::default(), &pairs, &src, &dst).unwrap();
    assert_eq!(v.rmse, 0.0);
    assert!((v.overlap - 0.2).abs() < 1e-12);
    assert!(!v.correct);
}

#[test]
fn rmse_grows_with_perturbation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = rand_points(&mut rng, 30, 1.0);
    let pairs: Vec<_> = p.iter().map(|q| (*q, *q)).collect();
    let mut last = -1.0;
    for k in 0..8 {
        let t = Pose::new(nalgebra::Matrix3::identity(), Vector3::new(0.05 * k as f64, 0.0, 0.0)).unwrap();
        let r = correspondence_rmse(&t, &pairs).unwrap();
        assert!(r > last);
        last = r;
    }
}

#[test]
fn overlap_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let src = rand_points(&mut rng, 200, 1.0);
    let dst = rand_points(&mut rng, 300, 1.0);
    let t = random_transform(&mut rng, 10.0, 0.1);
    let index = BallIndex::build(&dst, 0.1).unwrap();
    let got = overlap_ratio(&t, &src, &dst, &index, 0.1);
    let want = src
        .iter()
        .filter(|p| dst.iter().any(|q| (t.transform(p) - q).norm() <= 0.1))
        .count() as f64
        / src.len() as f64;
    assert_eq!(got, want);
}

#[test]
fn synthetic_fragments_ground_truth_aligns_overlap() {
    let cfg = FragmentConfig { fragments: 3, ..Default::default() };
    let (frags, pairs) = synthetic_fragments(&cfg).unwrap();
    assert_eq!((frags.len(), pairs.len()), (3, 2));
    for p in &pairs {
        let (src, dst) = (&frags[p.src], &frags[p.dst]);
        let index = BallIndex::build(&dst.points, 0.05).unwrap();
        let ov = overlap_ratio(&p.gt, &src.points, &dst.points, &index, 0.05);
        assert!(ov > 0.5, "overlap {ov}");
        let (r, t) = transform_error_deg_m(&p.gt, &Pose::identity());
        assert!(r > 0.0 || t > 0.0);
    }
    let (again, _) = synthetic_fragments(&cfg).unwrap();
    assert_eq!(frags, again);
}
