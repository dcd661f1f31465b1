use std::collections::BTreeMap;

use crossdesc_core::datagen::Pose;
use crossdesc_core::descnet::{DualAutoEncoder, ImagePatch, NetworkConfig, PointPatch};
use crossdesc_core::losses::{chamfer_loss, ChamferSpace};
use crossdesc_core::retrieval::{recall_at_n, vlad_aggregate, Codebook, Ranked, VladOptions};
use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;
use proptest::sample::Index;
use std::sync::OnceLock;

fn net() -> &'static DualAutoEncoder<f32> {
    static NET: OnceLock<DualAutoEncoder<f32>> = OnceLock::new();
    NET.get_or_init(|| {
        let mut n = DualAutoEncoder::new(NetworkConfig::build(8, 16, 16, &[4, 8], &[8, 16], &[16], 3)).unwrap();
        let imgs: Vec<ImagePatch> = (0..4).map(|i| ImagePatch::constant(16, [0.2 * i as f32; 3]).unwrap()).collect();
        let pts: Vec<PointPatch> = (0..4)
            .map(|i| {
                PointPatch::new((0..16).map(|j| {
                    let t = (i * 16 + j) as f32 / 64.0;
                    [t * 2.0 - 1.0, 1.0 - t, (t * 7.0).sin(), t, 0.5, 1.0 - t]
                }).collect())
                .unwrap()
            })
            .collect();
        n.calibrate_batchnorm(&imgs, &pts, 4).unwrap();
        n
    })
}

fn point() -> impl Strategy<Value = [f32; 6]> {
    (
        -1.0f32..=1.0,
        -1.0f32..=1.0,
        -1.0f32..=1.0,
        0.0f32..=1.0,
        0.0f32..=1.0,
        0.0f32..=1.0,
    )
        .prop_map(|(a, b, c, d, e, f)| [a, b, c, d, e, f])
}

fn permuted<T: Clone>(v: &[T], swaps: &[(Index, Index)]) -> Vec<T> {
    let mut out = v.to_vec();
    for (a, b) in swaps {
        let (i, j) = (a.index(out.len()), b.index(out.len()));
        out.swap(i, j);
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn encode_3d_ignores_point_order(pts in prop::collection::vec(point(), 16), swaps in prop::collection::vec(any::<(Index, Index)>(), 0..32)) {
        let a = net().encode_3d(&PointPatch::new(pts.clone()).unwrap()).unwrap();
        let b = net().encode_3d(&PointPatch::new(permuted(&pts, &swaps)).unwrap()).unwrap();
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a.values), bits(&b.values));
    }

    #[test]
    fn chamfer_ignores_point_order(
        p in prop::collection::vec(point(), 1..32),
        q in prop::collection::vec(point(), 1..32),
        sp in prop::collection::vec(any::<(Index, Index)>(), 0..16),
        sq in prop::collection::vec(any::<(Index, Index)>(), 0..16),
        coords_only in any::<bool>(),
    ) {
        let space = if coords_only { ChamferSpace::CoordinatesOnly } else { ChamferSpace::Full };
        let a = chamfer_loss(&PointPatch::new(p.clone()).unwrap(), &PointPatch::new(q.clone()).unwrap(), space).unwrap();
        let b = chamfer_loss(&PointPatch::new(permuted(&p, &sp)).unwrap(), &PointPatch::new(permuted(&q, &sq)).unwrap(), space).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0), "{} vs {}", a, b);
    }

    #[test]
    fn vlad_ignores_descriptor_order(
        centroids in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 4), 1..6),
        descs in prop::collection::vec(prop::collection::vec(-3.0f32..3.0, 4), 1..40),
        swaps in prop::collection::vec(any::<(Index, Index)>(), 0..32),
        signed_sqrt in any::<bool>(),
    ) {
        let cb = Codebook { centroids, seed: 0, iterations: 0, reseeded: vec![], collapsed: vec![] };
        let opts = VladOptions { signed_sqrt };
        let a = vlad_aggregate(&descs, &cb, opts).unwrap();
        let b = vlad_aggregate(&permuted(&descs, &swaps), &cb, opts).unwrap();
        prop_assert_eq!(a.degenerate, b.degenerate);
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn recall_never_decreases_with_n(
        positions in prop::collection::vec(-3.0f64..3.0, 2..12),
        queries in prop::collection::vec((-3.0f64..3.0, prop::collection::vec(any::<Index>(), 1..12)), 1..10),
    ) {
        let at = |x: f64| Pose::new(Matrix3::identity(), Vector3::new(-x, 0.0, 0.0)).unwrap();
        let poses: BTreeMap<u64, Pose> = positions.iter().enumerate().map(|(i, &x)| (i as u64, at(x))).collect();
        let results: Vec<Vec<Ranked>> = queries
            .iter()
            .map(|(_, ids)| ids.iter().map(|i| Ranked { id: i.index(positions.len()) as u64, distance: 0.0 }).collect())
            .collect();
        let qp: Vec<Option<Pose>> = queries.iter().map(|(x, _)| Some(at(*x))).collect();
        let ns: Vec<usize> = (1..=12).collect();
        let c = recall_at_n(&results, &qp, &poses, 0.5, 30.0, &ns).unwrap();
        prop_assert!(c.recall.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(c.recall.iter().all(|r| (0.0..=1.0).contains(r)));
    }
}
