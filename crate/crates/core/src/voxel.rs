//! Point cloud to averaged voxel features and a dense BEV pseudo-image.
//!
//! Voxelization runs on any number of workers and returns bit-identical grids:
//! workers first compute voxel keys for contiguous point ranges, keys are then
//! stably sorted (so each voxel's points stay in input order), and finally
//! workers reduce disjoint voxel ranges. Every voxel mean is therefore the same
//! left-to-right sum regardless of how the work was split.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::scene::Point;
use crate::tensor::Tensor;

/// Number of BEV channels: 4 averaged point features plus normalized occupancy.
pub const BEV_CHANNELS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelConfig {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub z_range: (f64, f64),
    pub voxel_size: [f64; 3],
}

impl Default for VoxelConfig {
    /// Full detection range with 0.1 x 0.1 x 0.15 m voxels.
    fn default() -> Self {
        Self {
            x_range: (-75.2, 75.2),
            y_range: (-75.2, 75.2),
            z_range: (-2.0, 4.0),
            voxel_size: [0.1, 0.1, 0.15],
        }
    }
}

fn cells(range: (f64, f64), size: f64, axis: &str) -> Result<usize> {
    if !(size > 0.0) || !(range.1 > range.0) {
        return Err(Error::Config(format!(
            "{axis}: empty range or non-positive voxel size"
        )));
    }
    let q = (range.1 - range.0) / size;
    let n = q.round();
    if (q - n).abs() > 1e-6 * n.max(1.0) {
        return Err(Error::Config(format!(
            "{axis}: range {:?} is not a multiple of voxel size {size}",
            range
        )));
    }
    Ok(n as usize)
}

impl VoxelConfig {
    /// Same voxel size over a square `[-half, half]` BEV window.
    pub fn desk(half_extent: f64) -> Self {
        Self {
            x_range: (-half_extent, half_extent),
            y_range: (-half_extent, half_extent),
            ..Self::default()
        }
    }

    /// Grid dimensions `(nx, ny, nz)`.
    pub fn dims(&self) -> Result<(usize, usize, usize)> {
        Ok((
            cells(self.x_range, self.voxel_size[0], "x")?,
            cells(self.y_range, self.voxel_size[1], "y")?,
            cells(self.z_range, self.voxel_size[2], "z")?,
        ))
    }

    pub fn validate(&self) -> Result<()> {
        self.dims().map(|_| ())
    }

    /// Voxel index along one axis, `None` outside the half-open range.
    #[inline]
    fn axis_index(v: f64, range: (f64, f64), size: f64, n: usize) -> Option<usize> {
        if !(v >= range.0 && v < range.1) {
            return None;
        }
        let i = ((v - range.0) / size).floor();
        if i < 0.0 || i >= n as f64 {
            return None;
        }
        Some(i as usize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Voxel {
    pub ix: usize,
    pub iy: usize,
    pub iz: usize,
    /// Mean of `(x, y, z, intensity)` over member points.
    pub mean: [f64; 4],
    pub count: u32,
}

/// Occupied voxels in ascending `(iy, ix, iz)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub config: VoxelConfig,
    pub dims: (usize, usize, usize),
    pub voxels: Vec<Voxel>,
}

impl VoxelGrid {
    fn key(dims: (usize, usize, usize), ix: usize, iy: usize, iz: usize) -> u64 {
        ((iy as u64 * dims.0 as u64) + ix as u64) * dims.2 as u64 + iz as u64
    }

    pub fn get(&self, ix: usize, iy: usize, iz: usize) -> Option<&Voxel> {
        let k = Self::key(self.dims, ix, iy, iz);
        self.voxels
            .binary_search_by_key(&k, |v| Self::key(self.dims, v.ix, v.iy, v.iz))
            .ok()
            .map(|i| &self.voxels[i])
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }
}

fn split(len: usize, parts: usize) -> Vec<Range<usize>> {
    let parts = parts.clamp(1, len.max(1));
    let base = len / parts;
    let extra = len % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for p in 0..parts {
        let n = base + usize::from(p < extra);
        out.push(start..start + n);
        start += n;
    }
    out
}

/// Bins points into voxels and averages their features.
///
/// Points outside the half-open ranges are dropped. The result is identical for
/// every `workers >= 1`.
pub fn voxelize(points: &[Point], cfg: &VoxelConfig, workers: usize) -> Result<VoxelGrid> {
    if workers == 0 {
        return Err(Error::invalid("voxelize", "workers must be at least 1"));
    }
    let dims = cfg.dims()?;
    let (nx, ny, nz) = dims;

    let keys_of = |range: Range<usize>| -> Vec<(u64, u32)> {
        points[range.clone()]
            .iter()
            .zip(range)
            .filter_map(|(p, idx)| {
                let ix = VoxelConfig::axis_index(p.x, cfg.x_range, cfg.voxel_size[0], nx)?;
                let iy = VoxelConfig::axis_index(p.y, cfg.y_range, cfg.voxel_size[1], ny)?;
                let iz = VoxelConfig::axis_index(p.z, cfg.z_range, cfg.voxel_size[2], nz)?;
                Some((VoxelGrid::key(dims, ix, iy, iz), idx as u32))
            })
            .collect()
    };

    let chunks = split(points.len(), workers);
    let mut keyed: Vec<(u64, u32)> = if chunks.len() == 1 {
        keys_of(0..points.len())
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = chunks
                .iter()
                .cloned()
                .map(|r| s.spawn(move || keys_of(r)))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("voxelize worker panicked"))
                .collect()
        })
    };
    // Stable: points of one voxel stay in input order.
    keyed.sort_by_key(|&(k, _)| k);

    // Voxel boundaries in the sorted key list.
    let mut starts: Vec<usize> = Vec::new();
    for i in 0..keyed.len() {
        if i == 0 || keyed[i].0 != keyed[i - 1].0 {
            starts.push(i);
        }
    }
    starts.push(keyed.len());
    let n_voxels = starts.len() - 1;

    let reduce = |vox: Range<usize>| -> Vec<Voxel> {
        vox.map(|v| {
            let members = &keyed[starts[v]..starts[v + 1]];
            let mut sum = [0.0f64; 4];
            for &(_, idx) in members {
                for (s, f) in sum.iter_mut().zip(points[idx as usize].features()) {
                    *s += f;
                }
            }
            let count = members.len() as u32;
            let key = members[0].0;
            let iz = (key % nz as u64) as usize;
            let cell = key / nz as u64;
            Voxel {
                ix: (cell % nx as u64) as usize,
                iy: (cell / nx as u64) as usize,
                iz,
                mean: sum.map(|s| s / count as f64),
                count,
            }
        })
        .collect()
    };

    let voxel_chunks = split(n_voxels, workers);
    let voxels = if voxel_chunks.len() <= 1 {
        reduce(0..n_voxels)
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = voxel_chunks
                .iter()
                .cloned()
                .map(|r| s.spawn(move || reduce(r)))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("voxelize worker panicked"))
                .collect()
        })
    };

    Ok(VoxelGrid {
        config: *cfg,
        dims,
        voxels,
    })
}

/// Collapses the z axis into a `[5, ny, nx]` BEV image.
///
/// Channels 0..4 hold the mean of the occupied voxels' mean features; channel 4
/// holds the occupied z-bin count divided by `nz`. Empty cells are zero.
pub fn bev_encode(grid: &VoxelGrid) -> Tensor {
    let (nx, ny, nz) = grid.dims;
    let mut out = Tensor::zeros(&[BEV_CHANNELS, ny, nx]);
    let mut i = 0;
    let v = &grid.voxels;
    while i < v.len() {
        let (ix, iy) = (v[i].ix, v[i].iy);
        let mut j = i;
        let mut sum = [0.0f64; 4];
        while j < v.len() && v[j].ix == ix && v[j].iy == iy {
            for (s, m) in sum.iter_mut().zip(v[j].mean) {
                *s += m;
            }
            j += 1;
        }
        let occupied = (j - i) as f64;
        for (c, s) in sum.iter().enumerate() {
            out.set3(c, iy, ix, (s / occupied) as f32);
        }
        out.set3(4, iy, ix, (occupied / nz as f64) as f32);
        i = j;
    }
    out
}
