use centeratt::scene::Point;
use centeratt::voxel::{bev_encode, voxelize, VoxelConfig, BEV_CHANNELS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cloud(seed: u64, n: usize, cfg: &VoxelConfig) -> Vec<Point> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Slightly wider than the grid so some points are dropped.
    (0..n)
        .map(|_| {
            Point::narrowed(
                rng.gen_range(cfg.x_range.0 - 1.0..cfg.x_range.1 + 1.0),
                rng.gen_range(cfg.y_range.0 - 1.0..cfg.y_range.1 + 1.0),
                rng.gen_range(cfg.z_range.0 - 0.5..cfg.z_range.1 + 0.5),
                rng.gen_range(0.0..1.0),
            )
        })
        .collect()
}

fn in_range(p: &Point, c: &VoxelConfig) -> bool {
    (c.x_range.0..c.x_range.1).contains(&p.x)
        && (c.y_range.0..c.y_range.1).contains(&p.y)
        && (c.z_range.0..c.z_range.1).contains(&p.z)
}

#[test]
fn worker_count_does_not_change_the_grid() {
    let cfg = VoxelConfig::desk(3.2);
    for seed in 0..4 {
        // Few cells per point so voxels hold many points.
        let pts = cloud(seed, 20_000, &cfg);
        let one = voxelize(&pts, &cfg, 1).unwrap();
        for w in [2, 3, 8, 64] {
            assert_eq!(voxelize(&pts, &cfg, w).unwrap(), one, "workers {w}");
        }
    }
}

#[test]
fn feature_sums_are_conserved() {
    let cfg = VoxelConfig::desk(6.4);
    let pts = cloud(5, 30_000, &cfg);
    let grid = voxelize(&pts, &cfg, 4).unwrap();
    let mut want = [0.0f64; 4];
    let mut kept = 0u32;
    for p in pts.iter().filter(|p| in_range(p, &cfg)) {
        kept += 1;
        for (w, f) in want.iter_mut().zip(p.features()) {
            *w += f;
        }
    }
    let mut got = [0.0f64; 4];
    for v in &grid.voxels {
        for (g, m) in got.iter_mut().zip(v.mean) {
            *g += m * v.count as f64;
        }
    }
    assert_eq!(grid.voxels.iter().map(|v| v.count).sum::<u32>(), kept);
    for (g, w) in got.iter().zip(want) {
        assert!((g - w).abs() <= 1e-6 * w.abs().max(1.0));
    }
}

/// Every grid cell checked independently against the points it should hold.
#[test]
fn matches_naive_cell_scan() {
    let cfg = VoxelConfig {
        x_range: (-0.4, 0.4),
        y_range: (-0.4, 0.4),
        z_range: (0.0, 0.6),
        voxel_size: [0.1, 0.1, 0.15],
    };
    let pts = cloud(1, 3000, &cfg);
    let grid = voxelize(&pts, &cfg, 3).unwrap();
    let (nx, ny, nz) = grid.dims;
    let mut occupied = 0;
    for iy in 0..ny {
        for ix in 0..nx {
            for iz in 0..nz {
                let members: Vec<&Point> = pts
                    .iter()
                    .filter(|p| {
                        in_range(p, &cfg)
                            && ((p.x - cfg.x_range.0) / 0.1).floor() as usize == ix
                            && ((p.y - cfg.y_range.0) / 0.1).floor() as usize == iy
                            && ((p.z - cfg.z_range.0) / 0.15).floor() as usize == iz
                    })
                    .collect();
                match grid.get(ix, iy, iz) {
                    None => assert!(members.is_empty()),
                    Some(v) => {
                        occupied += 1;
                        assert_eq!(v.count as usize, members.len());
                        let mut sum = [0.0f64; 4];
                        for p in &members {
                            for (s, f) in sum.iter_mut().zip(p.features()) {
                                *s += f;
                            }
                        }
                        assert_eq!(v.mean, sum.map(|s| s / members.len() as f64));
                    }
                }
            }
        }
    }
    assert_eq!(occupied, grid.len());
}

#[test]
fn bev_columns_average_occupied_voxels() {
    let cfg = VoxelConfig {
        x_range: (0.0, 0.2),
        y_range: (0.0, 0.1),
        z_range: (0.0, 0.3),
        voxel_size: [0.1, 0.1, 0.15],
    };
    let pts = [
        Point::new(0.05, 0.05, 0.05, 0.2),
        Point::new(0.05, 0.05, 0.20, 0.6),
        Point::new(0.15, 0.05, 0.10, 1.0),
    ];
    let bev = bev_encode(&voxelize(&pts, &cfg, 1).unwrap());
    assert_eq!(bev.shape(), &[BEV_CHANNELS, 1, 2]);
    // Column 0 holds two single-point voxels; column 1 one.
    assert!((bev.at3(2, 0, 0) - 0.125).abs() < 1e-7);
    assert!((bev.at3(3, 0, 0) - 0.4).abs() < 1e-7);
    assert_eq!(bev.at3(4, 0, 0), 1.0);
    assert_eq!(bev.at3(4, 0, 1), 0.5);
    assert!((bev.at3(3, 0, 1) - 1.0).abs() < 1e-7);
}

#[test]
fn paper_grid_dimensions() {
    assert_eq!(VoxelConfig::default().dims().unwrap(), (1504, 1504, 40));
}
