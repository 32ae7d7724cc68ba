//! Polyline simplification and mask polygonization.
//!
//! Masks are polygonized in three steps: trace each boundary loop along
//! pixel edges (0.5-level crack following; diagonal-touching pixels stay
//! separate, i.e. 4-connectivity), simplify every loop with
//! Douglas-Peucker, then re-rasterize by even-odd parity at pixel
//! centers. The rasterization rule is fixed: an edge is crossed when
//! `min(y1,y2) <= y < max(y1,y2)` (half-open) and its intersection lies
//! strictly right of the pixel center. With tolerance 0 the pipeline
//! reproduces the input mask bit for bit.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }
}

/// Distance from `p` to the segment `a-b` (point distance when the
/// segment degenerates).
pub fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len_sq = dx * dx + dy * dy;
    if len_sq == 0.0 {
        return ((p.x - a.x).powi(2) + (p.y - a.y).powi(2)).sqrt();
    }
    let t = (((p.x - a.x) * dx + (p.y - a.y) * dy) / len_sq).clamp(0.0, 1.0);
    let (px, py) = (a.x + t * dx, a.y + t * dy);
    ((p.x - px).powi(2) + (p.y - py).powi(2)).sqrt()
}

fn dp_recurse(points: &[Point], start: usize, end: usize, tolerance: f64, keep: &mut Vec<bool>) {
    if end <= start + 1 {
        return;
    }
    let mut max_dist = 0.0;
    let mut max_idx = start + 1;
    for i in start + 1..end {
        let d = segment_distance(points[i], points[start], points[end]);
        if d > max_dist {
            max_dist = d;
            max_idx = i;
        }
    }
    if max_dist > tolerance {
        keep[max_idx] = true;
        dp_recurse(points, start, max_idx, tolerance, keep);
        dp_recurse(points, max_idx, end, tolerance, keep);
    }
}

/// Classic Douglas-Peucker simplification.
///
/// Endpoints are always retained; an interior point survives iff its
/// perpendicular distance to the covering chord strictly exceeds the
/// tolerance somewhere up the recursion. The output point set is a
/// subset of the input, in input order. Closed loops (first == last
/// point) are handled through the degenerate-chord fallback, which
/// splits at the farthest point first.
pub fn douglas_peucker(polyline: &[Point], tolerance: f64) -> Result<Vec<Point>> {
    if polyline.len() < 2 {
        return Err(Error::invalid(
            "douglas_peucker",
            format!("need at least 2 points, got {}", polyline.len()),
        ));
    }
    if tolerance < 0.0 {
        return Err(Error::invalid("douglas_peucker", "tolerance must be >= 0"));
    }
    let mut keep = vec![false; polyline.len()];
    keep[0] = true;
    keep[polyline.len() - 1] = true;
    dp_recurse(polyline, 0, polyline.len() - 1, tolerance, &mut keep);
    Ok(polyline
        .iter()
        .zip(&keep)
        .filter_map(|(p, &k)| k.then_some(*p))
        .collect())
}

// ---------------------------------------------------------------------------
// Boundary tracing
// ---------------------------------------------------------------------------

const DIRS: [(i64, i64); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];

/// Directed boundary edge on the corner lattice: starts at corner
/// `(i, j)` (point `(j - 0.5, i - 0.5)`), direction index into [`DIRS`]
/// as `(dx, dy)`.
#[derive(Debug, Clone, Copy)]
struct CrackEdge {
    i: usize,
    j: usize,
    dir: u8,
}

/// Trace all closed boundary loops of a binary `[H, W]` mask. Loop
/// vertices are pixel-corner points; the mask interior is on the left of
/// the travel direction, so holes are traced with opposite winding.
pub fn trace_boundaries(mask: &Tensor<f32>) -> Vec<Vec<Point>> {
    assert_eq!(mask.rank(), 2, "trace_boundaries expects [H, W]");
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let fg = |r: i64, c: i64| -> bool {
        r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w
            && mask.data()[r as usize * w + c as usize] != 0.0
    };

    // outgoing[corner] = up to two directed edges starting there.
    let corner_idx = |i: usize, j: usize| i * (w + 1) + j;
    let mut outgoing: Vec<Vec<CrackEdge>> = vec![Vec::new(); (h + 1) * (w + 1)];
    let mut push = |i: usize, j: usize, dir: u8| {
        outgoing[corner_idx(i, j)].push(CrackEdge { i, j, dir });
    };
    // Horizontal cracks between rows i-1 and i.
    for i in 0..=h {
        for j in 0..w {
            let above = fg(i as i64 - 1, j as i64);
            let below = fg(i as i64, j as i64);
            if below && !above {
                push(i, j, 0); // top edge of (i, j): +x
            } else if above && !below {
                push(i, j + 1, 1); // bottom edge of (i-1, j): -x
            }
        }
    }
    // Vertical cracks between columns j-1 and j.
    for i in 0..h {
        for j in 0..=w {
            let left = fg(i as i64, j as i64 - 1);
            let right = fg(i as i64, j as i64);
            if right && !left {
                push(i + 1, j, 3); // left edge of (i, j): -y
            } else if left && !right {
                push(i, j, 2); // right edge of (i, j-1): +y
            }
        }
    }

    let mut used: Vec<Vec<bool>> = outgoing.iter().map(|v| vec![false; v.len()]).collect();
    let mut loops = Vec::new();
    for start_corner in 0..outgoing.len() {
        for start_slot in 0..outgoing[start_corner].len() {
            if used[start_corner][start_slot] {
                continue;
            }
            let mut polyline = Vec::new();
            let (mut corner, mut slot) = (start_corner, start_slot);
            loop {
                used[corner][slot] = true;
                let edge = outgoing[corner][slot];
                polyline.push(Point::new(edge.j as f64 - 0.5, edge.i as f64 - 0.5));
                let (dx, dy) = DIRS[edge.dir as usize];
                let next_i = (edge.i as i64 + dy) as usize;
                let next_j = (edge.j as i64 + dx) as usize;
                let next_corner = corner_idx(next_i, next_j);
                let candidates = &outgoing[next_corner];
                let next_slot = match candidates.len() {
                    1 => 0,
                    2 => {
                        // Saddle corner: prefer the turn that keeps this
                        // pixel's boundary (positive cross product), which
                        // separates diagonally-touching components.
                        let pick = |s: usize| {
                            let (ndx, ndy) = DIRS[candidates[s].dir as usize];
                            dx * ndy - dy * ndx
                        };
                        if pick(0) > pick(1) {
                            0
                        } else {
                            1
                        }
                    }
                    n => unreachable!("corner with {n} outgoing boundary edges"),
                };
                if next_corner == start_corner && next_slot == start_slot {
                    break;
                }
                corner = next_corner;
                slot = next_slot;
            }
            // Close the ring explicitly.
            polyline.push(polyline[0]);
            loops.push(polyline);
        }
    }
    loops
}

/// Even-odd rasterization of closed loops onto an `[H, W]` grid,
/// sampling pixel centers.
pub fn rasterize_loops(loops: &[Vec<Point>], h: usize, w: usize) -> Tensor<f32> {
    let mut out = Tensor::zeros(&[h, w]);
    // Collect non-horizontal edges once.
    let mut edges = Vec::new();
    for ring in loops {
        for pair in ring.windows(2) {
            if pair[0].y != pair[1].y {
                edges.push((pair[0], pair[1]));
            }
        }
    }
    for r in 0..h {
        let y = r as f64;
        // Crossing x positions for this scanline, half-open in y.
        let mut xs: Vec<f64> = Vec::new();
        for (a, b) in &edges {
            let (ylo, yhi) = if a.y < b.y { (a.y, b.y) } else { (b.y, a.y) };
            if ylo <= y && y < yhi {
                xs.push(a.x + (y - a.y) * (b.x - a.x) / (b.y - a.y));
            }
        }
        xs.sort_by(|p, q| p.partial_cmp(q).expect("finite crossings"));
        for c in 0..w {
            let x = c as f64;
            // Parity of crossings strictly right of the center.
            let crossings = xs.len() - xs.partition_point(|&v| v <= x);
            if crossings % 2 == 1 {
                out.data_mut()[r * w + c] = 1.0;
            }
        }
    }
    out
}

/// Simplify a mask's boundary to polygons with the given tolerance and
/// re-rasterize. Holes are preserved via even-odd parity. An empty mask
/// stays empty; tolerance 0 reproduces the input exactly.
pub fn polygonize_mask(mask: &Tensor<f32>, tolerance: f64) -> Result<Tensor<f32>> {
    mask.expect_rank("polygonize_mask", 2)?;
    if !mask.is_binary() {
        return Err(Error::invalid("polygonize_mask", "mask is not binary"));
    }
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let loops = trace_boundaries(mask);
    if loops.is_empty() {
        return Ok(Tensor::zeros(&[h, w]));
    }
    let mut simplified = Vec::with_capacity(loops.len());
    for ring in &loops {
        simplified.push(douglas_peucker(ring, tolerance)?);
    }
    Ok(rasterize_loops(&simplified, h, w))
}
