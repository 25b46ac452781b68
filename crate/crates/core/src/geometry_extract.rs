//! Geometry extraction: SDF grids, marching cubes with welded vertices,
//! mesh depth rasterization, and field-surface extraction over a sparse
//! band around the posed template.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::bvh::{ray_triangle, TriangleBvh};
use crate::mc_tables::{EDGE_TABLE, TRIANGLE_TABLE};
use crate::texture_atlas::{raster_depth_buffer, Camera};
use crate::{Error, Result, Vec3};

/// Node-centered scalar grid; resolution counts nodes per axis.
#[derive(Clone, Debug)]
pub struct SdfGrid {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub min: Vec3,
    pub max: Vec3,
    pub values: Vec<f64>,
}

impl SdfGrid {
    pub fn new(resolution: [usize; 3], min: Vec3, max: Vec3) -> Result<Self> {
        if resolution.iter().any(|&r| r < 2) {
            return Err(Error::Invariant("grid needs at least 2 nodes per axis".into()));
        }
        Ok(Self {
            nx: resolution[0],
            ny: resolution[1],
            nz: resolution[2],
            min,
            max,
            values: vec![0.0; resolution[0] * resolution[1] * resolution[2]],
        })
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.ny + j) * self.nx + i
    }

    #[inline]
    pub fn position(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let fx = i as f64 / (self.nx - 1) as f64;
        let fy = j as f64 / (self.ny - 1) as f64;
        let fz = k as f64 / (self.nz - 1) as f64;
        Vec3::new(
            self.min.x + fx * (self.max.x - self.min.x),
            self.min.y + fy * (self.max.y - self.min.y),
            self.min.z + fz * (self.max.z - self.min.z),
        )
    }

    pub fn cell_diagonal(&self) -> f64 {
        let d = Vec3::new(
            (self.max.x - self.min.x) / (self.nx - 1) as f64,
            (self.max.y - self.min.y) / (self.ny - 1) as f64,
            (self.max.z - self.min.z) / (self.nz - 1) as f64,
        );
        d.norm()
    }
}

#[derive(Clone, Debug, Default)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    pub normals: Option<Vec<Vec3>>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    /// Area-weighted vertex normals from the face winding.
    pub fn compute_normals(&mut self) {
        let mut normals = vec![Vec3::zeros(); self.vertices.len()];
        for f in &self.faces {
            let n = (self.vertices[f[1]] - self.vertices[f[0]])
                .cross(&(self.vertices[f[2]] - self.vertices[f[0]]));
            for &vi in f {
                normals[vi] += n;
            }
        }
        for n in &mut normals {
            let len = n.norm();
            if len > 1e-30 {
                *n /= len;
            }
        }
        self.normals = Some(normals);
    }

    pub fn save_obj(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for v in &self.vertices {
            writeln!(f, "v {} {} {}", v.x, v.y, v.z)?;
        }
        if let Some(normals) = &self.normals {
            for n in normals {
                writeln!(f, "vn {} {} {}", n.x, n.y, n.z)?;
            }
            for face in &self.faces {
                writeln!(
                    f,
                    "f {}//{} {}//{} {}//{}",
                    face[0] + 1,
                    face[0] + 1,
                    face[1] + 1,
                    face[1] + 1,
                    face[2] + 1,
                    face[2] + 1
                )?;
            }
        } else {
            for face in &self.faces {
                writeln!(f, "f {} {} {}", face[0] + 1, face[1] + 1, face[2] + 1)?;
            }
        }
        Ok(())
    }

    /// Binary little-endian PLY.
    pub fn save_ply(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(
            f,
            "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nelement face {}\nproperty list uchar int vertex_indices\nend_header\n",
            self.vertices.len(),
            self.faces.len()
        )?;
        for v in &self.vertices {
            for c in [v.x, v.y, v.z] {
                f.write_all(&(c as f32).to_le_bytes())?;
            }
        }
        for face in &self.faces {
            f.write_all(&[3u8])?;
            for &vi in face {
                f.write_all(&(vi as i32).to_le_bytes())?;
            }
        }
        Ok(())
    }
}

/// Per-pixel camera-space depth; background is +inf.
#[derive(Clone, Debug)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub depths: Vec<f64>,
}

impl DepthMap {
    pub fn background(width: usize, height: usize) -> Self {
        Self { width, height, depths: vec![f64::INFINITY; width * height] }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.depths[row * self.width + col]
    }

    #[inline]
    pub fn covered(&self, row: usize, col: usize) -> bool {
        self.get(row, col).is_finite()
    }

    /// True when any pixel in the (2r+1)^2 neighborhood has valid depth.
    pub fn covered_near(&self, row: usize, col: usize, radius: usize) -> bool {
        let r0 = row.saturating_sub(radius);
        let c0 = col.saturating_sub(radius);
        let r1 = (row + radius + 1).min(self.height);
        let c1 = (col + radius + 1).min(self.width);
        for r in r0..r1 {
            for c in c0..c1 {
                if self.covered(r, c) {
                    return true;
                }
            }
        }
        false
    }
}

const CORNER_OFFSETS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

const EDGE_CORNERS: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Weld tolerance for coincident marching-cubes vertices (meters).
const WELD_QUANTUM: f64 = 1e-7;
/// Faces below this area are dropped as degenerate.
const DEGENERATE_AREA: f64 = 1e-12;

/// Standard 256-case marching cubes at the given iso level. Shared edges
/// interpolate identically in adjacent cells (canonical edge direction),
/// coincident vertices are welded, zero-area faces dropped, and triangles
/// are wound so normals point toward increasing field values (outward for
/// an SDF that is negative inside).
pub fn marching_cubes(grid: &SdfGrid, iso: f64) -> TriangleMesh {
    let mut vertices: Vec<Vec3> = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();
    // key: (node_lo, node_hi) linear indices of the edge endpoints
    let mut edge_cache: HashMap<(u32, u32), u32> = HashMap::new();
    let mut corner_idx = [0usize; 8];
    let mut corner_val = [0.0f64; 8];
    let mut edge_vertex = [u32::MAX; 12];
    for k in 0..grid.nz - 1 {
        for j in 0..grid.ny - 1 {
            for i in 0..grid.nx - 1 {
                let mut case = 0usize;
                for (c, off) in CORNER_OFFSETS.iter().enumerate() {
                    let idx = grid.index(i + off[0], j + off[1], k + off[2]);
                    corner_idx[c] = idx;
                    corner_val[c] = grid.values[idx];
                    if corner_val[c] < iso {
                        case |= 1 << c;
                    }
                }
                let edges = EDGE_TABLE[case];
                if edges == 0 {
                    continue;
                }
                for (e, corners) in EDGE_CORNERS.iter().enumerate() {
                    if edges & (1 << e) == 0 {
                        continue;
                    }
                    let (a, b) = (corner_idx[corners[0]], corner_idx[corners[1]]);
                    let key = (a.min(b) as u32, a.max(b) as u32);
                    let entry = edge_cache.entry(key).or_insert_with(|| {
                        // canonical direction: from the lower to the higher
                        // node index, so adjacent cells agree bit-for-bit
                        let (lo, hi) = (key.0 as usize, key.1 as usize);
                        let (vlo, vhi) = (grid.values[lo], grid.values[hi]);
                        let t = if (vhi - vlo).abs() < 1e-300 {
                            0.5
                        } else {
                            ((iso - vlo) / (vhi - vlo)).clamp(0.0, 1.0)
                        };
                        let plo = node_position(grid, lo);
                        let phi = node_position(grid, hi);
                        vertices.push(plo + (phi - plo) * t);
                        (vertices.len() - 1) as u32
                    });
                    edge_vertex[e] = *entry;
                }
                let tri = &TRIANGLE_TABLE[case];
                let mut t = 0;
                while tri[t] >= 0 {
                    // the tables wind inward under the value<iso corner
                    // convention; swap two vertices for outward normals
                    faces.push([
                        edge_vertex[tri[t] as usize] as usize,
                        edge_vertex[tri[t + 2] as usize] as usize,
                        edge_vertex[tri[t + 1] as usize] as usize,
                    ]);
                    t += 3;
                }
            }
        }
    }
    let mut mesh = TriangleMesh { vertices, faces, normals: None };
    weld_by_position(&mut mesh);
    mesh
}

#[inline]
fn node_position(grid: &SdfGrid, linear: usize) -> Vec3 {
    let i = linear % grid.nx;
    let j = (linear / grid.nx) % grid.ny;
    let k = linear / (grid.nx * grid.ny);
    grid.position(i, j, k)
}

/// Merges vertices coincident after quantization (grid nodes hit exactly
/// by the iso level produce one vertex per incident edge) and drops
/// degenerate faces.
fn weld_by_position(mesh: &mut TriangleMesh) {
    let quantize = |v: &Vec3| {
        (
            (v.x / WELD_QUANTUM).round() as i64,
            (v.y / WELD_QUANTUM).round() as i64,
            (v.z / WELD_QUANTUM).round() as i64,
        )
    };
    let mut remap = vec![0usize; mesh.vertices.len()];
    let mut kept: Vec<Vec3> = Vec::with_capacity(mesh.vertices.len());
    let mut seen: HashMap<(i64, i64, i64), usize> = HashMap::new();
    for (vi, v) in mesh.vertices.iter().enumerate() {
        let key = quantize(v);
        match seen.get(&key) {
            Some(&existing) => remap[vi] = existing,
            None => {
                seen.insert(key, kept.len());
                remap[vi] = kept.len();
                kept.push(*v);
            }
        }
    }
    let mut faces = Vec::with_capacity(mesh.faces.len());
    for f in &mesh.faces {
        let g = [remap[f[0]], remap[f[1]], remap[f[2]]];
        if g[0] == g[1] || g[1] == g[2] || g[0] == g[2] {
            continue;
        }
        let area = 0.5
            * (kept[g[1]] - kept[g[0]]).cross(&(kept[g[2]] - kept[g[0]])).norm();
        if area < DEGENERATE_AREA {
            continue;
        }
        faces.push(g);
    }
    mesh.vertices = kept;
    mesh.faces = faces;
}

/// Z-buffer rasterization of a mesh at camera resolution; nearest surface
/// wins, uncovered pixels hold the +inf background sentinel.
pub fn rasterize_depth(mesh: &TriangleMesh, camera: &Camera) -> Result<DepthMap> {
    camera.validate()?;
    let depths = raster_depth_buffer(&mesh.vertices, &mesh.faces, camera, 1);
    Ok(DepthMap { width: camera.width, height: camera.height, depths })
}

/// Reference mesh delimiting the evaluation band: nodes farther than the
/// half-width take the fill value +-band signed by which side of the
/// nearest surface they fall on.
pub struct BandMesh<'a> {
    pub vertices: &'a [Vec3],
    pub faces: &'a [[usize; 3]],
    pub bvh: &'a TriangleBvh,
}

impl<'a> BandMesh<'a> {
    fn signed_fill(&self, p: Vec3, band: f64) -> f64 {
        let hit = self.bvh.closest_point(p);
        let f = self.faces[hit.face];
        let n = (self.vertices[f[1]] - self.vertices[f[0]])
            .cross(&(self.vertices[f[2]] - self.vertices[f[0]]));
        if (p - hit.point).dot(&n) >= 0.0 {
            band
        } else {
            -band
        }
    }
}

/// Evaluates an SDF on a grid (optionally only within a band around a
/// reference surface) and extracts the iso-0 mesh. With a band, far nodes
/// are filled with +-band so no spurious crossings appear as long as the
/// true surface stays inside the band.
pub fn extract_sdf_surface<F>(
    sdf: F,
    bounds: (Vec3, Vec3),
    resolution: usize,
    iso: f64,
    band: Option<(&BandMesh, f64)>,
) -> Result<TriangleMesh>
where
    F: Fn(Vec3) -> Result<f64> + Sync,
{
    let mut grid = SdfGrid::new([resolution; 3], bounds.0, bounds.1)?;
    let nx = grid.nx;
    let ny = grid.ny;
    let positions: Vec<Vec3> = (0..grid.values.len())
        .map(|lin| {
            let i = lin % nx;
            let j = (lin / nx) % ny;
            let k = lin / (nx * ny);
            grid.position(i, j, k)
        })
        .collect();
    let values: Vec<Result<f64>> = positions
        .par_iter()
        .map(|&p| match band {
            Some((mesh, half_width)) => {
                let hit = mesh.bvh.closest_point(p);
                if hit.dist2.sqrt() <= half_width {
                    sdf(p)
                } else {
                    Ok(mesh.signed_fill(p, half_width))
                }
            }
            None => sdf(p),
        })
        .collect();
    for (slot, v) in grid.values.iter_mut().zip(values) {
        *slot = v?;
    }
    Ok(marching_cubes(&grid, iso))
}

/// Analytic depth of a mesh at a pixel center via exact ray casting;
/// reference oracle for [`rasterize_depth`].
pub fn analytic_depth(mesh: &TriangleMesh, camera: &Camera, row: usize, col: usize) -> Option<f64> {
    let (origin, dir) = camera.pixel_ray(row, col).ok()?;
    let mut best = f64::INFINITY;
    for f in &mesh.faces {
        if let Some((t, _, _)) =
            ray_triangle(origin, dir, mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]])
        {
            let z = (camera.rot() * (origin + dir * t) + camera.trans()).z;
            if z < best {
                best = z;
            }
        }
    }
    best.is_finite().then_some(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn sphere_grid(res: usize, radius: f64) -> SdfGrid {
        let mut grid =
            SdfGrid::new([res; 3], Vec3::new(-1.0, -1.0, -1.0), Vec3::new(1.0, 1.0, 1.0)).unwrap();
        for k in 0..res {
            for j in 0..res {
                for i in 0..res {
                    let p = grid.position(i, j, k);
                    let idx = grid.index(i, j, k);
                    grid.values[idx] = p.norm() - radius;
                }
            }
        }
        grid
    }

    /// Lat/long sphere mesh with outward winding and single pole
    /// vertices (no degenerate faces).
    fn uv_sphere(radius: f64, rings: usize, segs: usize) -> TriangleMesh {
        let mut vertices = vec![Vec3::new(0.0, radius, 0.0)];
        for r in 1..rings {
            let phi = std::f64::consts::PI * r as f64 / rings as f64;
            for s in 0..segs {
                let theta = 2.0 * std::f64::consts::PI * s as f64 / segs as f64;
                vertices.push(Vec3::new(
                    radius * phi.sin() * theta.cos(),
                    radius * phi.cos(),
                    radius * phi.sin() * theta.sin(),
                ));
            }
        }
        vertices.push(Vec3::new(0.0, -radius, 0.0));
        let south = vertices.len() - 1;
        let ring = |r: usize, s: usize| 1 + (r - 1) * segs + (s % segs);
        let mut faces = Vec::new();
        for s in 0..segs {
            faces.push([0, ring(1, s + 1), ring(1, s)]);
            faces.push([south, ring(rings - 1, s), ring(rings - 1, s + 1)]);
        }
        for r in 1..rings - 1 {
            for s in 0..segs {
                let a = ring(r, s);
                let b = ring(r, s + 1);
                let c = ring(r + 1, s);
                let d = ring(r + 1, s + 1);
                faces.push([a, b, d]);
                faces.push([a, d, c]);
            }
        }
        TriangleMesh { vertices, faces, normals: None }
    }

    #[test]
    fn all_positive_grid_gives_empty_mesh() {
        let mut grid =
            SdfGrid::new([8; 3], Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 1.0, 1.0)).unwrap();
        grid.values.iter_mut().for_each(|v| *v = 0.5);
        let mesh = marching_cubes(&grid, 0.0);
        assert!(mesh.is_empty());
    }

    #[test]
    fn sphere_vertices_lie_on_the_sphere() {
        let grid = sphere_grid(64, 0.5);
        let mesh = marching_cubes(&grid, 0.0);
        assert!(!mesh.is_empty());
        let tol = grid.cell_diagonal();
        for v in &mesh.vertices {
            assert!(
                (v.norm() - 0.5).abs() < tol,
                "vertex radius {} outside one cell diagonal",
                v.norm()
            );
        }
    }

    #[test]
    fn sphere_mesh_is_outward_wound_and_manifold() {
        let grid = sphere_grid(32, 0.5);
        let mesh = marching_cubes(&grid, 0.0);
        // outward winding: positive signed volume
        let volume: f64 = mesh
            .faces
            .iter()
            .map(|f| {
                mesh.vertices[f[0]]
                    .dot(&mesh.vertices[f[1]].cross(&mesh.vertices[f[2]]))
                    / 6.0
            })
            .sum();
        let expected = 4.0 / 3.0 * std::f64::consts::PI * 0.5f64.powi(3);
        assert!(volume > 0.9 * expected && volume < 1.1 * expected, "volume {}", volume);
        // each edge shared by at most two faces
        let mut edge_count: HashMap<(usize, usize), usize> = HashMap::new();
        for f in &mesh.faces {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                *edge_count.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        assert!(edge_count.values().all(|&c| c <= 2));
        // no duplicate vertices after welding
        let mut seen = HashMap::new();
        for (i, v) in mesh.vertices.iter().enumerate() {
            let key = (
                (v.x / 1e-12).round() as i64,
                (v.y / 1e-12).round() as i64,
                (v.z / 1e-12).round() as i64,
            );
            assert!(seen.insert(key, i).is_none(), "duplicate vertex within 1e-12");
        }
        // no degenerate faces
        for f in &mesh.faces {
            let area = 0.5
                * (mesh.vertices[f[1]] - mesh.vertices[f[0]])
                    .cross(&(mesh.vertices[f[2]] - mesh.vertices[f[0]]))
                    .norm();
            assert!(area >= DEGENERATE_AREA);
        }
    }

    #[test]
    fn plane_interpolation_is_exact() {
        let n = Vec3::new(0.3, 0.8, -0.5).normalize();
        let o = 0.12;
        let res = 24;
        let mut grid =
            SdfGrid::new([res; 3], Vec3::new(-1.0, -1.0, -1.0), Vec3::new(1.0, 1.0, 1.0)).unwrap();
        for k in 0..res {
            for j in 0..res {
                for i in 0..res {
                    let p = grid.position(i, j, k);
                    let idx = grid.index(i, j, k);
                    grid.values[idx] = n.dot(&p) - o;
                }
            }
        }
        let mesh = marching_cubes(&grid, 0.0);
        assert!(!mesh.is_empty());
        for v in &mesh.vertices {
            assert!((n.dot(v) - o).abs() < 1e-6, "deviation {}", (n.dot(v) - o).abs());
        }
    }

    fn straight_camera(res: usize) -> Camera {
        Camera {
            id: 0,
            width: res,
            height: res,
            fx: res as f64,
            fy: res as f64,
            cx: res as f64 / 2.0,
            cy: res as f64 / 2.0,
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0, 0.0, 0.0],
        }
    }

    #[test]
    fn parallel_triangle_rasterizes_exact_depth() {
        let mesh = TriangleMesh {
            vertices: vec![
                Vec3::new(-0.5, -0.5, 2.0),
                Vec3::new(0.5, -0.5, 2.0),
                Vec3::new(0.0, 0.5, 2.0),
            ],
            faces: vec![[0, 1, 2]],
            normals: None,
        };
        let cam = straight_camera(64);
        let depth = rasterize_depth(&mesh, &cam).unwrap();
        let center = depth.get(32, 32);
        assert!((center - 2.0).abs() < 1e-9, "{}", center);
        let mut covered = 0;
        for r in 0..64 {
            for c in 0..64 {
                if depth.covered(r, c) {
                    covered += 1;
                    assert!((depth.get(r, c) - 2.0).abs() < 1e-9);
                }
            }
        }
        assert!(covered > 100);
    }

    #[test]
    fn empty_mesh_rasterizes_background() {
        let depth = rasterize_depth(&TriangleMesh::default(), &straight_camera(16)).unwrap();
        assert!(depth.depths.iter().all(|d| d.is_infinite()));
    }

    #[test]
    fn nearer_triangle_wins_depth() {
        let mesh = TriangleMesh {
            vertices: vec![
                Vec3::new(-0.5, -0.5, 1.0),
                Vec3::new(0.5, -0.5, 1.0),
                Vec3::new(0.0, 0.5, 1.0),
                Vec3::new(-0.5, -0.5, 2.0),
                Vec3::new(0.5, -0.5, 2.0),
                Vec3::new(0.0, 0.5, 2.0),
            ],
            faces: vec![[3, 4, 5], [0, 1, 2]],
            normals: None,
        };
        let depth = rasterize_depth(&mesh, &straight_camera(32)).unwrap();
        assert!((depth.get(16, 16) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rasterized_depth_matches_analytic_intersection() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(6);
        let mut vertices = Vec::new();
        let mut faces = Vec::new();
        for i in 0..40 {
            let c = Vec3::new(
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                1.5 + rng.gen::<f64>(),
            );
            vertices.push(c);
            vertices.push(c + Vec3::new(0.3 * rng.gen::<f64>() + 0.05, 0.1, 0.05));
            vertices.push(c + Vec3::new(0.05, 0.3 * rng.gen::<f64>() + 0.05, -0.05));
            faces.push([3 * i, 3 * i + 1, 3 * i + 2]);
        }
        let mesh = TriangleMesh { vertices, faces, normals: None };
        let cam = straight_camera(48);
        let depth = rasterize_depth(&mesh, &cam).unwrap();
        let mut compared = 0;
        for r in 0..48 {
            for c in 0..48 {
                if let Some(expected) = analytic_depth(&mesh, &cam, r, c) {
                    if depth.covered(r, c) {
                        assert!(
                            (depth.get(r, c) - expected).abs() < 1e-6,
                            "pixel ({}, {}): {} vs {}",
                            r,
                            c,
                            depth.get(r, c),
                            expected
                        );
                        compared += 1;
                    }
                }
            }
        }
        assert!(compared > 50, "only {} pixels compared", compared);
    }

    #[test]
    fn band_and_dense_extraction_agree_when_surface_inside_band() {
        let sphere = |p: Vec3| -> Result<f64> { Ok(p.norm() - 0.5) };
        let bounds = (Vec3::new(-0.9, -0.9, -0.9), Vec3::new(0.9, 0.9, 0.9));
        let dense = extract_sdf_surface(sphere, bounds, 40, 0.0, None).unwrap();
        let ref_mesh = uv_sphere(0.5, 24, 32);
        let bvh = TriangleBvh::build(&ref_mesh.vertices, &ref_mesh.faces);
        let band = BandMesh { vertices: &ref_mesh.vertices, faces: &ref_mesh.faces, bvh: &bvh };
        let banded = extract_sdf_surface(sphere, bounds, 40, 0.0, Some((&band, 0.1))).unwrap();
        assert_eq!(dense.faces, banded.faces);
        assert_eq!(dense.vertices.len(), banded.vertices.len());
        for (a, b) in dense.vertices.iter().zip(banded.vertices.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn sphere_extraction_from_closure_matches_grid_path() {
        let sphere = |p: Vec3| -> Result<f64> { Ok(p.norm() - 0.5) };
        let mesh = extract_sdf_surface(
            sphere,
            (Vec3::new(-1.0, -1.0, -1.0), Vec3::new(1.0, 1.0, 1.0)),
            64,
            0.0,
            None,
        )
        .unwrap();
        let grid = sphere_grid(64, 0.5);
        let direct = marching_cubes(&grid, 0.0);
        assert_eq!(mesh.faces.len(), direct.faces.len());
    }
}
