//! Rotated box overlap by convex polygon clipping.

use std::cmp::Ordering;

use crate::scene::Box3D;

type Pt = (f64, f64);

/// Which overlap measure feeds the matching cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IouMode {
    #[default]
    Bev,
    ThreeD,
}

/// Signed area (positive for counter-clockwise) via the shoelace formula.
pub fn polygon_area(poly: &[Pt]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let (x0, y0) = poly[i];
        let (x1, y1) = poly[(i + 1) % poly.len()];
        acc += x0 * y1 - x1 * y0;
    }
    0.5 * acc
}

#[inline]
fn cross(o: Pt, a: Pt, b: Pt) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

fn line_intersection(p: Pt, q: Pt, a: Pt, b: Pt) -> Pt {
    // Point on segment p->q that lies on line a->b.
    let dp = cross(a, b, p);
    let dq = cross(a, b, q);
    let t = dp / (dp - dq);
    (p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1))
}

/// Sutherland-Hodgman: clips `subject` against the convex CCW polygon `clip`.
pub fn clip_convex(subject: &[Pt], clip: &[Pt]) -> Vec<Pt> {
    let mut output = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut output);
        let mut prev = *input.last().unwrap();
        let mut prev_in = cross(a, b, prev) >= 0.0;
        for &cur in &input {
            let cur_in = cross(a, b, cur) >= 0.0;
            if cur_in {
                if !prev_in {
                    output.push(line_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(line_intersection(prev, cur, a, b));
            }
            prev = cur;
            prev_in = cur_in;
        }
    }
    output
}

fn box_order(a: &Box3D, b: &Box3D) -> Ordering {
    [a.cx, a.cy, a.l, a.w, a.yaw]
        .iter()
        .zip([b.cx, b.cy, b.l, b.w, b.yaw].iter())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// BEV intersection area of two rotated rectangles.
pub fn bev_intersection_area(a: &Box3D, b: &Box3D) -> f64 {
    // Evaluate in a canonical order so the result is exactly symmetric.
    let (a, b) = if box_order(a, b) == Ordering::Greater {
        (b, a)
    } else {
        (a, b)
    };
    let reach = a.bev_radius() + b.bev_radius();
    if (a.cx - b.cx).hypot(a.cy - b.cy) > reach {
        return 0.0;
    }
    polygon_area(&clip_convex(&a.bev_corners(), &b.bev_corners())).max(0.0)
}

/// IoU of the BEV footprints; 0 when the union is degenerate.
pub fn rotated_iou_bev(a: &Box3D, b: &Box3D) -> f64 {
    let inter = bev_intersection_area(a, b);
    let union = a.bev_area() + b.bev_area() - inter;
    if union <= 1e-12 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Volumetric IoU: BEV intersection times vertical overlap.
pub fn rotated_iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let z_lo = (a.cz - a.h / 2.0).max(b.cz - b.h / 2.0);
    let z_hi = (a.cz + a.h / 2.0).min(b.cz + b.h / 2.0);
    let dz = (z_hi - z_lo).max(0.0);
    let inter = bev_intersection_area(a, b) * dz;
    let union = a.volume() + b.volume() - inter;
    if union <= 1e-12 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

pub fn iou(mode: IouMode, a: &Box3D, b: &Box3D) -> f64 {
    match mode {
        IouMode::Bev => rotated_iou_bev(a, b),
        IouMode::ThreeD => rotated_iou_3d(a, b),
    }
}
