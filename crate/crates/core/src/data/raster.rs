use crate::error::{Error, Result};
use crate::guidance::BinaryGrid;

/// `(x, y)` in pixel units; pixel `(row i, col j)` has center `(j + 0.5, i + 0.5)`.
pub type Point = [f64; 2];

/// True if `p` lies exactly on one of the polygon's edges.
pub fn point_on_boundary(vertices: &[Point], p: Point) -> bool {
    let n = vertices.len();
    (0..n).any(|i| on_segment(vertices[i], vertices[(i + 1) % n], p))
}

fn on_segment(a: Point, b: Point, p: Point) -> bool {
    let cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
    cross == 0.0
        && p[0] >= a[0].min(b[0])
        && p[0] <= a[0].max(b[0])
        && p[1] >= a[1].min(b[1])
        && p[1] <= a[1].max(b[1])
}

/// Scanline fill of a polygon on an `[H, W]` pixel grid. A pixel is set iff
/// its center is inside under the even-odd rule or lies on an edge.
pub fn rasterize_polygon(vertices: &[Point], size: [usize; 2]) -> Result<BinaryGrid> {
    if vertices.len() < 3 {
        return Err(Error::DegeneratePolygon(vertices.len()));
    }
    let [h, w] = size;
    for v in vertices {
        if !(v[0] >= 0.0 && v[0] <= w as f64 && v[1] >= 0.0 && v[1] <= h as f64) {
            return Err(Error::Data(format!("vertex {v:?} outside the {h}x{w} grid")));
        }
    }
    let n = vertices.len();
    let mut grid = BinaryGrid::zeros(h, w);
    let mut crossings = Vec::with_capacity(n);
    for i in 0..h {
        let py = i as f64 + 0.5;
        crossings.clear();
        for k in 0..n {
            let (a, b) = (vertices[k], vertices[(k + 1) % n]);
            if (a[1] > py) != (b[1] > py) {
                crossings.push(a[0] + (b[0] - a[0]) * (py - a[1]) / (b[1] - a[1]));
            }
        }
        crossings.sort_by(f64::total_cmp);
        let mut next = 0;
        for j in 0..w {
            let px = j as f64 + 0.5;
            while next < crossings.len() && crossings[next] <= px {
                next += 1;
            }
            let inside = (crossings.len() - next) % 2 == 1;
            if inside || point_on_boundary(vertices, [px, py]) {
                grid.set(i, j, true);
            }
        }
    }
    Ok(grid)
}
