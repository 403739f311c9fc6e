use std::f64::consts::PI;

use rand::Rng;

use super::{points_in_box, wrap_angle, Box3D, Point, Scene};
use crate::error::{Error, Result};
use crate::matching::rotated_iou_bev;

/// Mirror axis. `X` mirrors across the x-axis (negates y); `Y` mirrors across
/// the y-axis (negates x).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlipAxis {
    X,
    Y,
}

pub fn augment_flip(scene: &Scene, axis: FlipAxis) -> Scene {
    let flip_point = |p: &Point| match axis {
        FlipAxis::X => Point { y: -p.y, ..*p },
        FlipAxis::Y => Point { x: -p.x, ..*p },
    };
    let flip_box = |b: &Box3D| match axis {
        FlipAxis::X => Box3D {
            cy: -b.cy,
            yaw: wrap_angle(-b.yaw),
            ..*b
        },
        FlipAxis::Y => Box3D {
            cx: -b.cx,
            yaw: wrap_angle(PI - b.yaw),
            ..*b
        },
    };
    Scene {
        points: scene.points.iter().map(flip_point).collect(),
        boxes: scene.boxes.iter().map(flip_box).collect(),
        seed: scene.seed,
    }
}

/// Global scaling about the origin; yaw is unchanged.
pub fn augment_scale(scene: &Scene, factor: f64) -> Result<Scene> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(Error::invalid(
            "augment_scale",
            format!("factor {factor} must be positive"),
        ));
    }
    let points = scene
        .points
        .iter()
        .map(|p| Point {
            x: p.x * factor,
            y: p.y * factor,
            z: p.z * factor,
            ..*p
        })
        .collect();
    let boxes = scene
        .boxes
        .iter()
        .map(|b| Box3D {
            cx: b.cx * factor,
            cy: b.cy * factor,
            cz: b.cz * factor,
            l: b.l * factor,
            w: b.w * factor,
            h: b.h * factor,
            ..*b
        })
        .collect();
    Ok(Scene {
        points,
        boxes,
        seed: scene.seed,
    })
}

/// Rotation about the vertical axis through the origin.
pub fn augment_rotate(scene: &Scene, angle: f64) -> Scene {
    let (s, c) = angle.sin_cos();
    let rot = |x: f64, y: f64| (x * c - y * s, x * s + y * c);
    let points = scene
        .points
        .iter()
        .map(|p| {
            let (x, y) = rot(p.x, p.y);
            Point { x, y, ..*p }
        })
        .collect();
    let boxes = scene
        .boxes
        .iter()
        .map(|b| {
            let (cx, cy) = rot(b.cx, b.cy);
            Box3D {
                cx,
                cy,
                yaw: wrap_angle(b.yaw + angle),
                ..*b
            }
        })
        .collect();
    Scene {
        points,
        boxes,
        seed: scene.seed,
    }
}

/// Result of a ground-truth paste attempt.
#[derive(Debug, Clone, PartialEq)]
pub struct PasteOutcome {
    pub scene: Scene,
    /// `false` when no collision-free pose was found; `scene` is then the unchanged target.
    pub pasted: bool,
    pub attempts: usize,
}

/// Copies `source.boxes[box_index]` and its interior points into `target`.
///
/// The first attempt keeps the source pose; later attempts translate the object
/// to a uniformly drawn center inside `range`. A pose is accepted only when its
/// BEV IoU with every target box is exactly zero. Target points that fall inside
/// the pasted box are removed.
pub fn gt_sample_paste<R: Rng>(
    target: &Scene,
    source: &Scene,
    box_index: usize,
    max_attempts: usize,
    range: ((f64, f64), (f64, f64)),
    rng: &mut R,
) -> Result<PasteOutcome> {
    let original = *source.boxes.get(box_index).ok_or_else(|| {
        Error::invalid(
            "gt_sample_paste",
            format!(
                "box index {box_index} out of range ({} boxes)",
                source.boxes.len()
            ),
        )
    })?;
    let members: Vec<Point> = points_in_box(&source.points, &original, 0.0)
        .into_iter()
        .map(|i| source.points[i])
        .collect();
    let ((x0, x1), (y0, y1)) = range;
    let reach = original.bev_radius();

    for attempt in 0..max_attempts {
        let (dx, dy) = if attempt == 0 {
            (0.0, 0.0)
        } else {
            if x0 + reach >= x1 - reach || y0 + reach >= y1 - reach {
                break;
            }
            (
                rng.gen_range(x0 + reach..x1 - reach) - original.cx,
                rng.gen_range(y0 + reach..y1 - reach) - original.cy,
            )
        };
        let candidate = Box3D {
            cx: original.cx + dx,
            cy: original.cy + dy,
            ..original
        };
        if target
            .boxes
            .iter()
            .any(|b| rotated_iou_bev(&candidate, b) > 0.0)
        {
            continue;
        }
        let mut points: Vec<Point> = target
            .points
            .iter()
            .filter(|p| !candidate.contains(p.x, p.y, p.z, 0.0))
            .copied()
            .collect();
        points.extend(members.iter().map(|p| Point {
            x: p.x + dx,
            y: p.y + dy,
            ..*p
        }));
        let mut boxes = target.boxes.clone();
        boxes.push(candidate);
        return Ok(PasteOutcome {
            scene: Scene {
                points,
                boxes,
                seed: target.seed,
            },
            pasted: true,
            attempts: attempt + 1,
        });
    }
    Ok(PasteOutcome {
        scene: target.clone(),
        pasted: false,
        attempts: max_attempts,
    })
}
