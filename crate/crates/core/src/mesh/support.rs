use nalgebra::{DVector, Vector2};

use super::{vertex, TetMesh};

/// Convex hull of the ground-contact vertices, projected onto the xy-plane.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportPolygon {
    /// Counter-clockwise hull vertices.
    pub hull: Vec<Vector2<f64>>,
    pub contact_indices: Vec<usize>,
}

impl SupportPolygon {
    /// Point or segment hulls (or zero area).
    pub fn is_degenerate(&self) -> bool {
        self.hull.len() < 3 || polygon_area(&self.hull) <= 0.0
    }

    pub fn area(&self) -> f64 {
        polygon_area(&self.hull)
    }

    /// Smallest signed distance from `p` to the hull edges; positive inside.
    /// Degenerate hulls return negative infinity.
    pub fn signed_margin(&self, p: &Vector2<f64>) -> f64 {
        if self.is_degenerate() {
            return f64::NEG_INFINITY;
        }
        let n = self.hull.len();
        (0..n)
            .map(|i| {
                let a = self.hull[i];
                let b = self.hull[(i + 1) % n];
                let e = b - a;
                // left of a CCW edge is inside
                (e.x * (p.y - a.y) - e.y * (p.x - a.x)) / e.norm()
            })
            .fold(f64::INFINITY, f64::min)
    }

    pub fn contains(&self, p: &Vector2<f64>, slack: f64) -> bool {
        self.signed_margin(p) >= -slack
    }
}

/// Vertices within `contact_tol` of the lowest z, and the 2D convex hull of
/// their (x, y) coordinates.
pub fn support_polygon(mesh: &TetMesh, x: &DVector<f64>, contact_tol: f64) -> SupportPolygon {
    let n = mesh.num_vertices();
    let z_min = (0..n).map(|i| x[3 * i + 2]).fold(f64::INFINITY, f64::min);
    let contact_indices: Vec<usize> = (0..n).filter(|&i| x[3 * i + 2] <= z_min + contact_tol).collect();
    let pts: Vec<Vector2<f64>> = contact_indices
        .iter()
        .map(|&i| vertex(x, i).xy())
        .collect();
    SupportPolygon {
        hull: convex_hull(&pts),
        contact_indices,
    }
}

/// Andrew's monotone chain. Counter-clockwise, collinear points dropped,
/// starting from the lexicographically smallest point.
pub fn convex_hull(points: &[Vector2<f64>]) -> Vec<Vector2<f64>> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>| (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
    let mut hull: Vec<Vector2<f64>> = Vec::with_capacity(2 * pts.len());
    for p in pts.iter() {
        while hull.len() >= 2 && cross(&hull[hull.len() - 2], &hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(*p);
    }
    let lower_len = hull.len() + 1;
    for p in pts.iter().rev().skip(1) {
        while hull.len() >= lower_len && cross(&hull[hull.len() - 2], &hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(*p);
    }
    hull.pop();
    if hull.len() == 2 && hull[0] == hull[1] {
        hull.pop();
    }
    hull
}

/// Signed shoelace area (positive for counter-clockwise order).
pub fn polygon_area(poly: &[Vector2<f64>]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    0.5 * (0..n)
        .map(|i| {
            let a = poly[i];
            let b = poly[(i + 1) % n];
            a.x * b.y - b.x * a.y
        })
        .sum::<f64>()
}

/// Area centroid of a simple polygon; `None` if the area vanishes.
pub fn polygon_centroid(poly: &[Vector2<f64>]) -> Option<Vector2<f64>> {
    let area = polygon_area(poly);
    if area.abs() <= 0.0 {
        return None;
    }
    let n = poly.len();
    let mut c = Vector2::zeros();
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        c += (a + b) * (a.x * b.y - b.x * a.y);
    }
    Some(c / (6.0 * area))
}
