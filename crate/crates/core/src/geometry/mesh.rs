use super::{Point3, PointCloud, Vec3};
use crate::error::{Error, Result};

/// Triangle mesh with consistently oriented faces.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    vertices: PointCloud,
    triangles: Vec<[usize; 3]>,
}

/// Triangles with area at or below this are rejected at construction.
const MIN_AREA: f64 = 1e-12;

impl TriMesh {
    pub fn new(vertices: PointCloud, triangles: Vec<[usize; 3]>) -> Result<Self> {
        if triangles.is_empty() {
            return Err(Error::invalid("mesh has no triangles"));
        }
        let n = vertices.len();
        for (t, tri) in triangles.iter().enumerate() {
            if tri.iter().any(|&i| i >= n) {
                return Err(Error::invalid(format!(
                    "triangle {t} references a vertex out of range ({n} vertices)"
                )));
            }
            let area = triangle_area(
                vertices.point(tri[0]),
                vertices.point(tri[1]),
                vertices.point(tri[2]),
            );
            if !(area > MIN_AREA) {
                return Err(Error::DegenerateTriangle { index: t, area });
            }
        }
        Ok(Self { vertices, triangles })
    }

    #[inline]
    pub fn vertices(&self) -> &PointCloud {
        &self.vertices
    }

    #[inline]
    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    /// Same connectivity on new vertex positions.
    pub fn with_vertices(&self, vertices: PointCloud) -> Result<Self> {
        if vertices.len() != self.vertices.len() {
            return Err(Error::invalid("vertex count changed"));
        }
        Self::new(vertices, self.triangles.clone())
    }

    pub fn triangle_normal(&self, t: usize) -> Vec3 {
        let [a, b, c] = self.corners(t);
        (b - a).cross(&(c - a)).normalize()
    }

    #[inline]
    fn corners(&self, t: usize) -> [Point3; 3] {
        let tri = self.triangles[t];
        [
            *self.vertices.point(tri[0]),
            *self.vertices.point(tri[1]),
            *self.vertices.point(tri[2]),
        ]
    }

    pub fn min_triangle_area(&self) -> f64 {
        (0..self.triangles.len())
            .map(|t| {
                let [a, b, c] = self.corners(t);
                triangle_area(&a, &b, &c)
            })
            .fold(f64::INFINITY, f64::min)
    }
}

pub(crate) fn triangle_area(a: &Point3, b: &Point3, c: &Point3) -> f64 {
    0.5 * (b - a).cross(&(c - a)).norm()
}

/// Closest point on triangle `abc` to `p` (Voronoi-region case analysis).
pub fn closest_point_on_triangle(p: &Point3, a: &Point3, b: &Point3, c: &Point3) -> Point3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return a + ab * v;
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return a + ac * w;
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}

/// Signed distance from `p` to the nearest point of `mesh`; positive on
/// the side the nearest triangle's normal points to.
pub fn point_to_mesh_deviation(p: &Point3, mesh: &TriMesh) -> f64 {
    let mut best_d2 = f64::INFINITY;
    let mut best = (Point3::origin(), 0usize);
    for t in 0..mesh.triangles.len() {
        let [a, b, c] = mesh.corners(t);
        let q = closest_point_on_triangle(p, &a, &b, &c);
        let d2 = (p - q).norm_squared();
        if d2 < best_d2 {
            best_d2 = d2;
            best = (q, t);
        }
    }
    let dist = best_d2.sqrt();
    if dist == 0.0 {
        return 0.0;
    }
    let side = (p - best.0).dot(&mesh.triangle_normal(best.1));
    if side < 0.0 {
        -dist
    } else {
        dist
    }
}
