//! Bounding-volume hierarchy over triangles supporting exact
//! nearest-surface-point queries and ray casting.
//!
//! Nearest queries are exact (branch-and-bound, no approximation) because
//! downstream surface projection is an argmin. Ties on distance are broken
//! by the lowest face index so results are deterministic.

use crate::Vec3;

#[derive(Clone, Copy, Debug)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn empty() -> Self {
        Self { min: Vec3::repeat(f64::INFINITY), max: Vec3::repeat(f64::NEG_INFINITY) }
    }

    pub fn grow(&mut self, p: Vec3) {
        self.min = self.min.inf(&p);
        self.max = self.max.sup(&p);
    }

    pub fn merge(&mut self, other: &Aabb) {
        self.min = self.min.inf(&other.min);
        self.max = self.max.sup(&other.max);
    }

    pub fn padded(&self, pad: f64) -> Aabb {
        Aabb { min: self.min - Vec3::repeat(pad), max: self.max + Vec3::repeat(pad) }
    }

    /// Squared distance from a point to the box (0 inside).
    pub fn dist2(&self, p: Vec3) -> f64 {
        let mut d2 = 0.0;
        for a in 0..3 {
            let v = p[a].clamp(self.min[a], self.max[a]) - p[a];
            d2 += v * v;
        }
        d2
    }

    /// Slab test; returns clipped (t0, t1) when the ray crosses the box.
    pub fn ray_range(&self, origin: Vec3, dir: Vec3, mut t0: f64, mut t1: f64) -> Option<(f64, f64)> {
        for a in 0..3 {
            if dir[a].abs() < 1e-300 {
                if p_outside(origin[a], self.min[a], self.max[a]) {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[a];
            let mut ta = (self.min[a] - origin[a]) * inv;
            let mut tb = (self.max[a] - origin[a]) * inv;
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
            if t0 > t1 {
                return None;
            }
        }
        Some((t0, t1))
    }
}

#[inline]
fn p_outside(v: f64, lo: f64, hi: f64) -> bool {
    v < lo || v > hi
}

/// Closest point on a triangle with barycentric coordinates (u, v) such
/// that p = (1-u-v)*a + u*b + v*c.
pub fn closest_point_triangle(p: Vec3, a: Vec3, b: Vec3, c: Vec3) -> (Vec3, f64, f64) {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (a, 0.0, 0.0);
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (b, 1.0, 0.0);
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let t = d1 / (d1 - d3);
        return (a + ab * t, t, 0.0);
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (c, 0.0, 1.0);
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let t = d2 / (d2 - d6);
        return (a + ac * t, 0.0, t);
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let t = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (b + (c - b) * t, 1.0 - t, t);
    }
    let denom = 1.0 / (va + vb + vc);
    let u = vb * denom;
    let v = vc * denom;
    (a + ab * u + ac * v, u, v)
}

/// Result of a nearest-surface query.
#[derive(Clone, Copy, Debug)]
pub struct SurfaceHit {
    pub face: usize,
    /// Barycentric (u, v): point = (1-u-v)*v0 + u*v1 + v*v2.
    pub bary: (f64, f64),
    pub point: Vec3,
    pub dist2: f64,
}

/// Result of a ray cast.
#[derive(Clone, Copy, Debug)]
pub struct RayHit {
    pub face: usize,
    pub bary: (f64, f64),
    pub t: f64,
}

#[derive(Clone, Debug)]
struct Node {
    aabb: Aabb,
    // leaf when count > 0: [start, start+count) into order
    left: u32,
    right: u32,
    start: u32,
    count: u32,
}

#[derive(Clone, Debug)]
pub struct TriangleBvh {
    nodes: Vec<Node>,
    order: Vec<u32>,
    tris: Vec<[Vec3; 3]>,
    bounds: Aabb,
}

const LEAF_SIZE: usize = 4;

impl TriangleBvh {
    pub fn build(vertices: &[Vec3], faces: &[[usize; 3]]) -> Self {
        let tris: Vec<[Vec3; 3]> =
            faces.iter().map(|f| [vertices[f[0]], vertices[f[1]], vertices[f[2]]]).collect();
        let mut centroids: Vec<Vec3> = tris.iter().map(|t| (t[0] + t[1] + t[2]) / 3.0).collect();
        if centroids.is_empty() {
            centroids.push(Vec3::zeros());
        }
        let mut order: Vec<u32> = (0..tris.len() as u32).collect();
        let mut nodes = Vec::new();
        let mut bounds = Aabb::empty();
        for t in &tris {
            for v in t {
                bounds.grow(*v);
            }
        }
        if tris.is_empty() {
            nodes.push(Node { aabb: bounds, left: 0, right: 0, start: 0, count: 0 });
            return Self { nodes, order, tris, bounds };
        }
        build_node(&tris, &centroids, &mut order, 0, tris.len(), &mut nodes);
        Self { nodes, order, tris, bounds }
    }

    pub fn bounds(&self) -> Aabb {
        self.bounds
    }

    pub fn is_empty(&self) -> bool {
        self.tris.is_empty()
    }

    /// Exact nearest point on the triangle soup. Equidistant faces resolve
    /// to the lowest face index.
    pub fn closest_point(&self, q: Vec3) -> SurfaceHit {
        assert!(!self.tris.is_empty(), "closest_point on empty mesh");
        let mut best = SurfaceHit { face: usize::MAX, bary: (0.0, 0.0), point: q, dist2: f64::INFINITY };
        let mut stack: Vec<(u32, f64)> = vec![(0, self.nodes[0].aabb.dist2(q))];
        while let Some((ni, nd2)) = stack.pop() {
            if nd2 > best.dist2 {
                continue;
            }
            let node = &self.nodes[ni as usize];
            if node.count > 0 {
                for oi in node.start..node.start + node.count {
                    let face = self.order[oi as usize] as usize;
                    let t = &self.tris[face];
                    let (p, u, v) = closest_point_triangle(q, t[0], t[1], t[2]);
                    let d2 = (p - q).norm_squared();
                    if d2 < best.dist2 || (d2 == best.dist2 && face < best.face) {
                        best = SurfaceHit { face, bary: (u, v), point: p, dist2: d2 };
                    }
                }
            } else {
                let dl = self.nodes[node.left as usize].aabb.dist2(q);
                let dr = self.nodes[node.right as usize].aabb.dist2(q);
                // push the farther child first so the nearer pops first
                if dl <= dr {
                    if dr <= best.dist2 {
                        stack.push((node.right, dr));
                    }
                    stack.push((node.left, dl));
                } else {
                    if dl <= best.dist2 {
                        stack.push((node.left, dl));
                    }
                    stack.push((node.right, dr));
                }
            }
        }
        best
    }

    /// Nearest ray intersection in (t_min, t_max]; both triangle sides hit.
    pub fn raycast(&self, origin: Vec3, dir: Vec3, t_min: f64, t_max: f64) -> Option<RayHit> {
        if self.tris.is_empty() {
            return None;
        }
        let mut best: Option<RayHit> = None;
        let mut stack: Vec<u32> = vec![0];
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni as usize];
            let limit = best.as_ref().map(|b| b.t).unwrap_or(t_max);
            if node.aabb.ray_range(origin, dir, t_min, limit).is_none() {
                continue;
            }
            if node.count > 0 {
                for oi in node.start..node.start + node.count {
                    let face = self.order[oi as usize] as usize;
                    let t = &self.tris[face];
                    if let Some((tt, u, v)) = ray_triangle(origin, dir, t[0], t[1], t[2]) {
                        if tt > t_min && tt <= limit {
                            let better = match &best {
                                None => true,
                                Some(b) => tt < b.t || (tt == b.t && face < b.face),
                            };
                            if better {
                                best = Some(RayHit { face, bary: (u, v), t: tt });
                            }
                        }
                    }
                }
            } else {
                stack.push(node.left);
                stack.push(node.right);
            }
        }
        best
    }
}

fn build_node(
    tris: &[[Vec3; 3]],
    centroids: &[Vec3],
    order: &mut [u32],
    start: usize,
    count: usize,
    nodes: &mut Vec<Node>,
) -> u32 {
    let mut aabb = Aabb::empty();
    for &fi in &order[start..start + count] {
        for v in &tris[fi as usize] {
            aabb.grow(*v);
        }
    }
    let idx = nodes.len() as u32;
    nodes.push(Node { aabb, left: 0, right: 0, start: start as u32, count: count as u32 });
    if count <= LEAF_SIZE {
        return idx;
    }
    let mut cmin = Vec3::repeat(f64::INFINITY);
    let mut cmax = Vec3::repeat(f64::NEG_INFINITY);
    for &fi in &order[start..start + count] {
        cmin = cmin.inf(&centroids[fi as usize]);
        cmax = cmax.sup(&centroids[fi as usize]);
    }
    let ext = cmax - cmin;
    let axis = if ext.x >= ext.y && ext.x >= ext.z {
        0
    } else if ext.y >= ext.z {
        1
    } else {
        2
    };
    if ext[axis] <= 0.0 {
        return idx; // all centroids coincide; keep as (large) leaf
    }
    let mid = start + count / 2;
    order[start..start + count].select_nth_unstable_by(count / 2, |a, b| {
        centroids[*a as usize][axis]
            .partial_cmp(&centroids[*b as usize][axis])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(b))
    });
    let left = build_node(tris, centroids, order, start, mid - start, nodes);
    let right = build_node(tris, centroids, order, mid, start + count - mid, nodes);
    nodes[idx as usize].left = left;
    nodes[idx as usize].right = right;
    nodes[idx as usize].count = 0;
    idx
}

/// Möller–Trumbore, both-sided. Returns (t, u, v).
pub fn ray_triangle(origin: Vec3, dir: Vec3, a: Vec3, b: Vec3, c: Vec3) -> Option<(f64, f64, f64)> {
    let e1 = b - a;
    let e2 = c - a;
    let pvec = dir.cross(&e2);
    let det = e1.dot(&pvec);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let tvec = origin - a;
    let u = tvec.dot(&pvec) * inv;
    if !(-1e-12..=1.0 + 1e-12).contains(&u) {
        return None;
    }
    let qvec = tvec.cross(&e1);
    let v = dir.dot(&qvec) * inv;
    if v < -1e-12 || u + v > 1.0 + 1e-12 {
        return None;
    }
    let t = e2.dot(&qvec) * inv;
    if t <= 0.0 {
        return None;
    }
    Some((t, u, v))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad() -> (Vec<Vec3>, Vec<[usize; 3]>) {
        let vertices = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(1.0, 1.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
        ];
        let faces = vec![[0, 1, 2], [0, 2, 3]];
        (vertices, faces)
    }

    #[test]
    fn closest_point_matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand::rngs::StdRng::seed_from_u64(7);
        let mut vertices = Vec::new();
        let mut faces = Vec::new();
        for i in 0..60 {
            let base = Vec3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()) * 2.0;
            vertices.push(base);
            vertices.push(base + Vec3::new(rng.gen::<f64>() * 0.3, 0.1, 0.0));
            vertices.push(base + Vec3::new(0.0, rng.gen::<f64>() * 0.3, 0.1));
            faces.push([3 * i, 3 * i + 1, 3 * i + 2]);
        }
        let bvh = TriangleBvh::build(&vertices, &faces);
        for _ in 0..200 {
            let q = Vec3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()) * 2.5;
            let hit = bvh.closest_point(q);
            let mut best = f64::INFINITY;
            for f in &faces {
                let (p, _, _) =
                    closest_point_triangle(q, vertices[f[0]], vertices[f[1]], vertices[f[2]]);
                best = best.min((p - q).norm_squared());
            }
            assert!((hit.dist2 - best).abs() < 1e-12, "{} vs {}", hit.dist2, best);
        }
    }

    #[test]
    fn tie_break_prefers_lowest_face() {
        let (vertices, faces) = quad();
        let bvh = TriangleBvh::build(&vertices, &faces);
        // On the shared diagonal both faces are at distance 0.
        let hit = bvh.closest_point(Vec3::new(0.5, 0.5, 0.0));
        assert_eq!(hit.face, 0);
        assert!(hit.dist2 < 1e-24);
    }

    #[test]
    fn raycast_finds_front_hit() {
        let (vertices, faces) = quad();
        let bvh = TriangleBvh::build(&vertices, &faces);
        let hit = bvh
            .raycast(Vec3::new(0.25, 0.25, -2.0), Vec3::new(0.0, 0.0, 1.0), 0.0, f64::INFINITY)
            .unwrap();
        assert!((hit.t - 2.0).abs() < 1e-12);
        assert_eq!(hit.face, 0);
        assert!(bvh
            .raycast(Vec3::new(5.0, 5.0, -2.0), Vec3::new(0.0, 0.0, 1.0), 0.0, f64::INFINITY)
            .is_none());
    }
}
