use centeratt::backbone::FeatureMap;
use centeratt::roi::{
    centeratt_forward, encode_deltas, face_centers, fuse_scores, pool_roi_features, refine_box,
    RoiConfig, StageHeads, NUM_DELTAS,
};
use centeratt::scene::{wrap_angle, Box3D, ObjectClass};
use centeratt::tensor::{Activation, AttentionConfig, AttentionWeights, Linear, Tensor};
use centeratt::voxel::VoxelConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_box(rng: &mut ChaCha8Rng) -> Box3D {
    Box3D::new(
        [
            rng.gen_range(-10.0..10.0),
            rng.gen_range(-10.0..10.0),
            rng.gen_range(-1.0..2.0),
        ],
        [
            rng.gen_range(0.5..6.0),
            rng.gen_range(0.4..2.5),
            rng.gen_range(0.8..3.0),
        ],
        rng.gen_range(-3.1..3.1),
        ObjectClass::from_index(rng.gen_range(0..3)).unwrap(),
    )
    .with_score(rng.gen_range(0.1..1.0))
}

#[test]
fn deltas_invert_refinement() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..1000 {
        let (p, g) = (random_box(&mut rng), random_box(&mut rng));
        let r = refine_box(&p, &encode_deltas(&p, &g));
        for (a, b) in [
            (r.cx, g.cx),
            (r.cy, g.cy),
            (r.cz, g.cz),
            (r.l, g.l),
            (r.w, g.w),
            (r.h, g.h),
        ] {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(wrap_angle(r.yaw - g.yaw).abs() < 1e-9);
        assert_eq!((r.class, r.score), (p.class, p.score));
    }
}

#[test]
fn zero_deltas_are_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let p = random_box(&mut rng);
        let r = refine_box(&p, &[0.0; NUM_DELTAS]);
        assert!((r.cx, r.cy, r.cz, r.l, r.w, r.h) == (p.cx, p.cy, p.cz, p.l, p.w, p.h));
        assert!(wrap_angle(r.yaw - p.yaw).abs() < 1e-15);
    }
}

#[test]
fn face_points_by_hand() {
    let b = Box3D::new(
        [1.0, 2.0, 0.0],
        [4.0, 2.0, 1.0],
        std::f64::consts::FRAC_PI_2,
        ObjectClass::Vehicle,
    );
    let want = [(1.0, 2.0), (1.0, 4.0), (1.0, 0.0), (0.0, 2.0), (2.0, 2.0)];
    for ((x, y), (wx, wy)) in face_centers(&b).into_iter().zip(want) {
        assert!((x - wx).abs() < 1e-12 && (y - wy).abs() < 1e-12);
    }
}

#[test]
fn pooled_samples_by_hand() {
    // Feature value at cell (row, col) is 10 * row + col on channel 0, its
    // negation on channel 1, so bilinear reads are linear in position.
    let (h, w) = (8, 8);
    let mut data = Vec::new();
    for sign in [1.0f32, -1.0] {
        for r in 0..h {
            for c in 0..w {
                data.push(sign * (10 * r + c) as f32);
            }
        }
    }
    let map = FeatureMap {
        tensor: Tensor::new(vec![2, h, w], data).unwrap(),
        stride: 1,
    };
    let voxel = VoxelConfig {
        x_range: (0.0, 0.8),
        y_range: (0.0, 0.8),
        z_range: (-1.0, 1.0),
        voxel_size: [0.1, 0.1, 0.2],
    };
    let b = Box3D::new(
        [0.35, 0.42, 0.0],
        [0.2, 0.1, 1.0],
        0.0,
        ObjectClass::Vehicle,
    );
    let cfg = RoiConfig {
        scales: vec![1],
        mlp_dims: vec![4],
    };
    let pooled = pool_roi_features(&[b], &[map], &cfg, &voxel).unwrap();
    assert_eq!(pooled.shape(), &[1, 10]);
    for (k, (x, y)) in face_centers(&b).into_iter().enumerate() {
        let want = 10.0 * (y / 0.1) + x / 0.1;
        assert!(
            (pooled.data()[2 * k] as f64 - want).abs() < 1e-4,
            "point {k}"
        );
        assert!((pooled.data()[2 * k + 1] as f64 + want).abs() < 1e-4);
    }
}

fn random_linear(rng: &mut ChaCha8Rng, out: usize, inp: usize) -> Linear {
    let s = 1.0 / (inp as f32).sqrt();
    Linear {
        weight: Tensor::new(
            vec![out, inp],
            (0..out * inp).map(|_| rng.gen_range(-s..s)).collect(),
        )
        .unwrap(),
        bias: Tensor::new(
            vec![out],
            (0..out).map(|_| rng.gen_range(-0.1..0.1)).collect(),
        )
        .unwrap(),
        activation: Activation::None,
    }
}

#[test]
fn attention_head_follows_proposal_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let d = 16;
    let att = AttentionConfig {
        num_heads: 2,
        model_dim: d,
        ffn_dim: 32,
        pe_dim: d,
        num_layers: 2,
    };
    let ones = Tensor::filled(&[d], 1.0);
    let zeros = Tensor::zeros(&[d]);
    let layers: Vec<AttentionWeights> = (0..2)
        .map(|_| AttentionWeights {
            query: random_linear(&mut rng, d, d),
            key: random_linear(&mut rng, d, d),
            value: random_linear(&mut rng, d, d),
            output: random_linear(&mut rng, d, d),
            norm1_gamma: ones.clone(),
            norm1_beta: zeros.clone(),
            ffn_in: random_linear(&mut rng, 32, d),
            ffn_out: random_linear(&mut rng, d, 32),
            norm2_gamma: ones.clone(),
            norm2_beta: zeros.clone(),
        })
        .collect();
    let heads = StageHeads {
        cls: random_linear(&mut rng, 3, d),
        reg: random_linear(&mut rng, NUM_DELTAS, d),
    };
    let voxel = VoxelConfig::desk(12.8);
    for n in [1, 3, 9] {
        let props: Vec<Box3D> = (0..n).map(|_| random_box(&mut rng)).collect();
        let roi = Tensor::new(
            vec![n, d],
            (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let out = centeratt_forward(&roi, &props, &att, &layers, &heads, &voxel).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.rotate_left(n / 2);
        let pprops: Vec<Box3D> = perm.iter().map(|&i| props[i]).collect();
        let proi = Tensor::new(
            vec![n, d],
            perm.iter().flat_map(|&i| roi.row(i).to_vec()).collect(),
        )
        .unwrap();
        let pout = centeratt_forward(&proi, &pprops, &att, &layers, &heads, &voxel).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(pout[k], out[i]);
        }
    }
    assert!(
        centeratt_forward(&Tensor::zeros(&[0, d]), &[], &att, &layers, &heads, &voxel).is_err()
    );
}

#[test]
fn fused_score_is_geometric_mean() {
    assert_eq!(fuse_scores(0.25, 1.0), 0.5);
    assert_eq!(fuse_scores(0.0, 0.9), 0.0);
    assert!((fuse_scores(0.4, 0.9) - 0.6).abs() < 1e-15);
}
