//! Synthetic LiDAR scenes: boxes, points, augmentations and file formats.

mod augment;
mod io;

pub use augment::{
    augment_flip, augment_rotate, augment_scale, gt_sample_paste, FlipAxis, PasteOutcome,
};
pub use io::{
    format_label_line, parse_label_line, read_labels, read_manifest, read_point_cloud,
    write_labels, write_manifest, write_point_cloud, ManifestEntry, POINT_FILE_MAGIC,
    POINT_FILE_VERSION,
};

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matching::rotated_iou_bev;

/// A LiDAR return: position in meters and a unitless intensity in `[0, 1]`.
///
/// Held in `f64`; the point-cloud file stores `f32`, and generated scenes only
/// contain values that survive that narrowing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64, intensity: f64) -> Self {
        Self { x, y, z, intensity }
    }

    /// Rounds every field through `f32`, as the file format does.
    pub fn narrowed(x: f64, y: f64, z: f64, intensity: f64) -> Self {
        let n = |v: f64| v as f32 as f64;
        Self::new(n(x), n(y), n(z), n(intensity))
    }

    pub fn features(&self) -> [f64; 4] {
        [self.x, self.y, self.z, self.intensity]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ObjectClass {
    Vehicle = 0,
    Pedestrian = 1,
    Cyclist = 2,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 3] = [
        ObjectClass::Vehicle,
        ObjectClass::Pedestrian,
        ObjectClass::Cyclist,
    ];
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::Vehicle => "Vehicle",
            ObjectClass::Pedestrian => "Pedestrian",
            ObjectClass::Cyclist => "Cyclist",
        }
    }
}

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut w = a - two_pi * ((a + PI) / two_pi).floor();
    if w >= PI {
        w -= two_pi;
    }
    if w < -PI {
        w += two_pi;
    }
    w
}

/// Oriented 3D box. `l` runs along the heading, `yaw` is CCW from +x.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub yaw: f64,
    pub class: ObjectClass,
    pub score: f64,
}

impl Box3D {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64, class: ObjectClass) -> Self {
        Self {
            cx: center[0],
            cy: center[1],
            cz: center[2],
            l: size[0],
            w: size[1],
            h: size[2],
            yaw: wrap_angle(yaw),
            class,
            score: 1.0,
        }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }

    /// BEV corners in counter-clockwise order.
    pub fn bev_corners(&self) -> [(f64, f64); 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.l / 2.0, self.w / 2.0);
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)]
            .map(|(x, y)| (self.cx + x * c - y * s, self.cy + x * s + y * c))
    }

    pub fn bev_area(&self) -> f64 {
        self.l * self.w
    }

    pub fn volume(&self) -> f64 {
        self.l * self.w * self.h
    }

    /// Half-length of the BEV diagonal.
    pub fn bev_radius(&self) -> f64 {
        0.5 * self.l.hypot(self.w)
    }

    /// Whether `(x, y, z)` is inside the box grown by `margin` on every side.
    pub fn contains(&self, x: f64, y: f64, z: f64, margin: f64) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let along = dx * c + dy * s;
        let across = -dx * s + dy * c;
        along.abs() <= self.l / 2.0 + margin
            && across.abs() <= self.w / 2.0 + margin
            && (z - self.cz).abs() <= self.h / 2.0 + margin
    }
}

/// Indices of `points` inside `b` expanded by `margin`.
pub fn points_in_box(points: &[Point], b: &Box3D, margin: f64) -> Vec<usize> {
    points
        .iter()
        .enumerate()
        .filter(|(_, p)| b.contains(p.x, p.y, p.z, margin))
        .map(|(i, _)| i)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub points: Vec<Point>,
    pub boxes: Vec<Box3D>,
    pub seed: u64,
}

impl Scene {
    pub fn empty(seed: u64) -> Self {
        Self {
            points: Vec::new(),
            boxes: Vec::new(),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    /// Objects to place per class, indexed by [`ObjectClass::index`].
    pub objects_per_class: [usize; 3],
    pub points_per_object: usize,
    pub background_points: usize,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub ground_z: f64,
    /// Half-width of the uniform jitter applied to object surface points.
    pub noise: f64,
    pub max_retries: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            objects_per_class: [4, 3, 2],
            points_per_object: 200,
            background_points: 2000,
            x_range: (-25.6, 25.6),
            y_range: (-25.6, 25.6),
            ground_z: -1.0,
            noise: 0.02,
            max_retries: 200,
            seed: 0,
        }
    }
}

/// Size ranges `(l, w, h)` in meters per class.
fn size_range(class: ObjectClass) -> [(f64, f64); 3] {
    match class {
        ObjectClass::Vehicle => [(3.6, 5.2), (1.7, 2.1), (1.4, 1.9)],
        ObjectClass::Pedestrian => [(0.5, 1.0), (0.5, 0.9), (1.5, 1.9)],
        ObjectClass::Cyclist => [(1.5, 2.0), (0.5, 0.8), (1.4, 1.9)],
    }
}

fn overlaps_any(candidate: &Box3D, boxes: &[Box3D]) -> bool {
    boxes.iter().any(|b| {
        let reach = candidate.bev_radius() + b.bev_radius();
        let near = (candidate.cx - b.cx).hypot(candidate.cy - b.cy) <= reach;
        near && rotated_iou_bev(candidate, b) > 0.0
    })
}

/// Uniform point on the surface of `b`, faces weighted by area.
fn sample_surface<R: Rng>(rng: &mut R, b: &Box3D) -> (f64, f64, f64) {
    let faces = [
        b.w * b.h,
        b.w * b.h,
        b.l * b.h,
        b.l * b.h,
        b.l * b.w,
        b.l * b.w,
    ];
    let total: f64 = faces.iter().sum();
    let mut pick = rng.gen_range(0.0..total);
    let mut face = 0;
    while face < 5 && pick >= faces[face] {
        pick -= faces[face];
        face += 1;
    }
    let (hl, hw, hh) = (b.l / 2.0, b.w / 2.0, b.h / 2.0);
    let mut u = |half: f64| rng.gen_range(-half..=half);
    let (a, c, z) = match face {
        0 => (hl, u(hw), u(hh)),
        1 => (-hl, u(hw), u(hh)),
        2 => (u(hl), hw, u(hh)),
        3 => (u(hl), -hw, u(hh)),
        4 => (u(hl), u(hw), hh),
        _ => (u(hl), u(hw), -hh),
    };
    let (s, co) = b.yaw.sin_cos();
    (b.cx + a * co - c * s, b.cy + a * s + c * co, b.cz + z)
}

/// Places non-overlapping boxes and samples surface and ground points.
///
/// Identical configs produce bit-identical scenes.
pub fn generate_scene(cfg: &SceneConfig) -> Result<Scene> {
    if !(cfg.x_range.0 < cfg.x_range.1 && cfg.y_range.0 < cfg.y_range.1) {
        return Err(Error::invalid("generate_scene", "empty placement range"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let requested: usize = cfg.objects_per_class.iter().sum();
    let mut boxes: Vec<Box3D> = Vec::with_capacity(requested);

    for class in ObjectClass::ALL {
        for _ in 0..cfg.objects_per_class[class.index()] {
            let [lr, wr, hr] = size_range(class);
            let mut placed = false;
            for _ in 0..cfg.max_retries.max(1) {
                let (l, w, h) = (
                    rng.gen_range(lr.0..lr.1),
                    rng.gen_range(wr.0..wr.1),
                    rng.gen_range(hr.0..hr.1),
                );
                let reach = 0.5 * l.hypot(w);
                let (x0, x1) = (cfg.x_range.0 + reach, cfg.x_range.1 - reach);
                let (y0, y1) = (cfg.y_range.0 + reach, cfg.y_range.1 - reach);
                if x0 >= x1 || y0 >= y1 {
                    break;
                }
                let cx = rng.gen_range(x0..x1);
                let cy = rng.gen_range(y0..y1);
                let yaw = rng.gen_range(-PI..PI);
                let candidate = Box3D::new([cx, cy, cfg.ground_z + h / 2.0], [l, w, h], yaw, class);
                if !overlaps_any(&candidate, &boxes) {
                    boxes.push(candidate);
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(Error::Placement {
                    placed: boxes.len(),
                    requested,
                });
            }
        }
    }

    let mut points =
        Vec::with_capacity(boxes.len() * cfg.points_per_object + cfg.background_points);
    for b in &boxes {
        let intensity_base: f64 = rng.gen_range(0.2..0.9);
        for _ in 0..cfg.points_per_object {
            let (x, y, z) = sample_surface(&mut rng, b);
            let jitter = |rng: &mut ChaCha8Rng| {
                if cfg.noise > 0.0 {
                    rng.gen_range(-cfg.noise..=cfg.noise)
                } else {
                    0.0
                }
            };
            let (nx, ny, nz) = (jitter(&mut rng), jitter(&mut rng), jitter(&mut rng));
            let intensity = (intensity_base + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0);
            points.push(Point::narrowed(x + nx, y + ny, z + nz, intensity));
        }
    }
    for _ in 0..cfg.background_points {
        let x = rng.gen_range(cfg.x_range.0..cfg.x_range.1);
        let y = rng.gen_range(cfg.y_range.0..cfg.y_range.1);
        let z = cfg.ground_z + rng.gen_range(-0.05..0.05);
        points.push(Point::narrowed(x, y, z, rng.gen_range(0.0..0.3)));
    }

    Ok(Scene {
        points,
        boxes,
        seed: cfg.seed,
    })
}
