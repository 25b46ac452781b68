//! UV texture baking: back-projects multi-view images onto the posed
//! template, averages them into per-frame texture maps, maps 3D points to
//! UV coordinates and derives pixel-aligned feature maps.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::body_model::{forward_kinematics, lbs_pose_mesh, Pose, PosedMesh, SkinnedTemplate};
use crate::bvh::closest_point_triangle;
use crate::imgio::{ImageGrayF, ImageRgbF};
use crate::{Error, Mat3, Result, Vec3};

/// Depth bias for the per-view z-buffer visibility test (meters).
pub const DEPTH_BIAS: f64 = 1e-4;
/// A view sample is rejected when any pixel under its bilinear support
/// differs from the sample depth by more than this (meters): the support
/// would straddle a depth discontinuity and blend unrelated surfaces.
pub const DEPTH_CONSISTENCY: f64 = 0.02;
/// Minimum cosine between the surface normal and the view direction for
/// a sample to count as visible; grazing observations carry a huge,
/// heavily foreshortened pixel footprint.
pub const GRAZING_COS: f64 = 0.25;
/// Z-buffers are rasterized at this multiple of the view resolution.
pub const ZBUFFER_SCALE: usize = 2;
/// Maximum nearest-valid dilation rings when filling unobserved texels.
pub const DILATION_RINGS: usize = 8;

/// Pinhole camera, world-to-camera rotation, camera looks down +z.
/// Pixel (row, col) has center (col + 0.5, row + 0.5) in image coordinates.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Camera {
    pub id: u32,
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::Invariant(format!("camera {}: fx, fy must be positive", self.id)));
        }
        let r = self.rot();
        let err = (r.transpose() * r - Mat3::identity()).norm();
        if err > 1e-9 {
            return Err(Error::Invariant(format!(
                "camera {}: rotation not orthonormal (|R^T R - I| = {:.3e})",
                self.id, err
            )));
        }
        if (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::Invariant(format!("camera {}: rotation determinant != +1", self.id)));
        }
        Ok(())
    }

    pub fn rot(&self) -> Mat3 {
        Mat3::new(
            self.rotation[0][0],
            self.rotation[0][1],
            self.rotation[0][2],
            self.rotation[1][0],
            self.rotation[1][1],
            self.rotation[1][2],
            self.rotation[2][0],
            self.rotation[2][1],
            self.rotation[2][2],
        )
    }

    pub fn trans(&self) -> Vec3 {
        Vec3::new(self.translation[0], self.translation[1], self.translation[2])
    }

    /// Camera center in world space.
    pub fn center(&self) -> Vec3 {
        -(self.rot().transpose() * self.trans())
    }

    #[inline]
    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        self.rot() * p + self.trans()
    }

    /// Projects a world point to image coordinates and camera depth.
    /// Returns `None` behind the camera.
    #[inline]
    pub fn project(&self, p: Vec3) -> Option<(f64, f64, f64)> {
        let c = self.to_camera(p);
        if c.z <= 1e-9 {
            return None;
        }
        Some((self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy, c.z))
    }

    /// World-space ray through the center of pixel (row, col).
    pub fn pixel_ray(&self, row: usize, col: usize) -> Result<(Vec3, Vec3)> {
        if row >= self.height || col >= self.width {
            return Err(Error::OutOfRange(format!(
                "pixel ({}, {}) outside {}x{} image",
                row, col, self.width, self.height
            )));
        }
        let dir_cam = Vec3::new(
            (col as f64 + 0.5 - self.cx) / self.fx,
            (row as f64 + 0.5 - self.cy) / self.fy,
            1.0,
        );
        let dir = (self.rot().transpose() * dir_cam).normalize();
        Ok((self.center(), dir))
    }
}

#[derive(Serialize, Deserialize)]
pub struct CameraFile {
    pub cameras: Vec<Camera>,
}

pub fn load_cameras(path: &Path) -> Result<Vec<Camera>> {
    let raw: CameraFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    for c in &raw.cameras {
        c.validate()?;
    }
    Ok(raw.cameras)
}

pub fn save_cameras(path: &Path, cameras: &[Camera]) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(&CameraFile { cameras: cameras.to_vec() })?)?;
    Ok(())
}

/// A point on the template surface: face, barycentric coordinates and the
/// UV coordinate it maps to.
#[derive(Clone, Copy, Debug)]
pub struct SurfacePoint {
    pub face: usize,
    pub bary: (f64, f64),
    pub uv: [f64; 2],
}

/// Square per-frame texture map in UV space with a per-texel validity
/// mask. Texel (i, j) spans [j/W, (j+1)/W) x [i/H, (i+1)/H) in UV.
#[derive(Clone, Debug)]
pub struct TextureMap {
    pub resolution: usize,
    pub colors: Vec<[f64; 3]>,
    pub validity: Vec<bool>,
    pub frame_id: u64,
}

impl TextureMap {
    pub fn new(resolution: usize, frame_id: u64) -> Self {
        Self {
            resolution,
            colors: vec![[0.0; 3]; resolution * resolution],
            validity: vec![false; resolution * resolution],
            frame_id,
        }
    }

    /// Bilinear sample at a UV coordinate, clamp-to-edge border policy.
    pub fn sample_bilinear(&self, uv: [f64; 2]) -> [f64; 3] {
        let n = self.resolution;
        let (wx, wy, i0, i1, j0, j1) = uv_taps(uv, n);
        let mut out = [0.0; 3];
        for ch in 0..3 {
            let top = self.colors[i0 * n + j0][ch] * (1.0 - wx) + self.colors[i0 * n + j1][ch] * wx;
            let bot = self.colors[i1 * n + j0][ch] * (1.0 - wx) + self.colors[i1 * n + j1][ch] * wx;
            out[ch] = top * (1.0 - wy) + bot * wy;
        }
        out
    }

    pub fn save_png(&self, color_path: &Path, valid_path: &Path) -> Result<()> {
        let n = self.resolution;
        let mut img = ImageRgbF::new(n, n);
        let mut valid = ImageGrayF::new(n, n);
        for i in 0..n {
            for j in 0..n {
                img.set(i, j, self.colors[i * n + j]);
                valid.set(i, j, if self.validity[i * n + j] { 1.0 } else { 0.0 });
            }
        }
        img.save_png(color_path)?;
        valid.save_png(valid_path)?;
        Ok(())
    }

    pub fn load_png(color_path: &Path, valid_path: &Path, frame_id: u64) -> Result<Self> {
        let img = ImageRgbF::load_png(color_path)?;
        if img.width != img.height {
            return Err(Error::ShapeMismatch("texture map must be square".into()));
        }
        let valid = ImageGrayF::load_png(valid_path)?;
        if valid.width != img.width || valid.height != img.height {
            return Err(Error::ShapeMismatch("validity mask does not match texture".into()));
        }
        let n = img.width;
        let mut out = Self::new(n, frame_id);
        for i in 0..n {
            for j in 0..n {
                out.colors[i * n + j] = img.get(i, j);
                out.validity[i * n + j] = valid.get(i, j) > 0.5;
            }
        }
        Ok(out)
    }
}

/// Pixel-aligned feature map derived from a texture map. The first three
/// channels are the source RGB verbatim.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    pub resolution: usize,
    pub channels: usize,
    /// Texel-major: values[(i*W + j)*C + c].
    pub values: Vec<f64>,
    pub frame_id: u64,
}

impl FeatureMap {
    pub fn zeros(resolution: usize, channels: usize, frame_id: u64) -> Self {
        Self { resolution, channels, values: vec![0.0; resolution * resolution * channels], frame_id }
    }

    #[inline]
    pub fn texel(&self, i: usize, j: usize) -> &[f64] {
        let c = self.channels;
        let off = (i * self.resolution + j) * c;
        &self.values[off..off + c]
    }

    pub fn sample_bilinear(&self, uv: [f64; 2]) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        self.sample_bilinear_into(uv, &mut out);
        out
    }

    pub fn sample_bilinear_into(&self, uv: [f64; 2], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.channels);
        out.fill(0.0);
        self.sample_bilinear_accum(uv, 1.0, out);
    }

    /// Weighted accumulate of a bilinear sample: out += w * F(uv).
    pub fn sample_bilinear_accum(&self, uv: [f64; 2], w: f64, out: &mut [f64]) {
        let n = self.resolution;
        let (wx, wy, i0, i1, j0, j1) = uv_taps(uv, n);
        let c = self.channels;
        let t00 = &self.values[(i0 * n + j0) * c..(i0 * n + j0) * c + c];
        let t01 = &self.values[(i0 * n + j1) * c..(i0 * n + j1) * c + c];
        let t10 = &self.values[(i1 * n + j0) * c..(i1 * n + j0) * c + c];
        let t11 = &self.values[(i1 * n + j1) * c..(i1 * n + j1) * c + c];
        for ch in 0..c {
            let top = t00[ch] * (1.0 - wx) + t01[ch] * wx;
            let bot = t10[ch] * (1.0 - wx) + t11[ch] * wx;
            out[ch] += w * (top * (1.0 - wy) + bot * wy);
        }
    }
}

#[inline]
fn uv_taps(uv: [f64; 2], n: usize) -> (f64, f64, usize, usize, usize, usize) {
    let fx = (uv[0] * n as f64 - 0.5).clamp(0.0, (n - 1) as f64);
    let fy = (uv[1] * n as f64 - 0.5).clamp(0.0, (n - 1) as f64);
    let j0 = fx.floor() as usize;
    let i0 = fy.floor() as usize;
    let j1 = (j0 + 1).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    (fx - j0 as f64, fy - i0 as f64, i0, i1, j0, j1)
}

/// Rasterizes a depth buffer of a triangle soup for a camera, optionally
/// at an integer multiple of the camera resolution. Background is +inf.
pub fn raster_depth_buffer(
    vertices: &[Vec3],
    faces: &[[usize; 3]],
    camera: &Camera,
    scale: usize,
) -> Vec<f64> {
    let w = camera.width * scale;
    let h = camera.height * scale;
    let s = scale as f64;
    let mut buf = vec![f64::INFINITY; w * h];
    for f in faces {
        let mut pts = [[0.0f64; 3]; 3];
        let mut behind = false;
        for (k, &vi) in f.iter().enumerate() {
            let c = camera.to_camera(vertices[vi]);
            if c.z <= 1e-9 {
                behind = true;
                break;
            }
            pts[k] = [
                (camera.fx * c.x / c.z + camera.cx) * s,
                (camera.fy * c.y / c.z + camera.cy) * s,
                1.0 / c.z,
            ];
        }
        if behind {
            continue;
        }
        let area = edge(&pts[0], &pts[1], pts[2][0], pts[2][1]);
        if area.abs() < 1e-12 {
            continue;
        }
        let min_x = pts.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let max_x =
            (pts.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max).ceil().max(0.0) as usize).min(w);
        let min_y = pts.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let max_y =
            (pts.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max).ceil().max(0.0) as usize).min(h);
        for py in min_y..max_y {
            let y = py as f64 + 0.5;
            for px in min_x..max_x {
                let x = px as f64 + 0.5;
                let w0 = edge(&pts[1], &pts[2], x, y) / area;
                let w1 = edge(&pts[2], &pts[0], x, y) / area;
                let w2 = edge(&pts[0], &pts[1], x, y) / area;
                if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                    continue;
                }
                let inv_z = w0 * pts[0][2] + w1 * pts[1][2] + w2 * pts[2][2];
                if inv_z <= 0.0 {
                    continue;
                }
                let z = (w0 + w1 + w2) / inv_z;
                let cell = &mut buf[py * w + px];
                if z < *cell {
                    *cell = z;
                }
            }
        }
    }
    buf
}

#[inline]
fn edge(a: &[f64; 3], b: &[f64; 3], x: f64, y: f64) -> f64 {
    (b[0] - a[0]) * (y - a[1]) - (b[1] - a[1]) * (x - a[0])
}

/// One rasterized texel of the UV atlas: the face it belongs to and its
/// barycentric coordinates there.
struct TexelSite {
    face: u32,
    bary: (f64, f64),
}

/// Maps every texel center to a surface point by rasterizing the UV
/// triangles. Conflicts resolve to the lowest face index.
fn rasterize_texels(template: &SkinnedTemplate, resolution: usize) -> Vec<Option<TexelSite>> {
    let n = resolution;
    let mut sites: Vec<Option<TexelSite>> = (0..n * n).map(|_| None).collect();
    for (fi, q) in template.uv.iter().enumerate() {
        let xs = [q[0][0] * n as f64, q[1][0] * n as f64, q[2][0] * n as f64];
        let ys = [q[0][1] * n as f64, q[1][1] * n as f64, q[2][1] * n as f64];
        let area = (xs[1] - xs[0]) * (ys[2] - ys[0]) - (ys[1] - ys[0]) * (xs[2] - xs[0]);
        if area.abs() < 1e-12 {
            continue;
        }
        let min_x = xs.iter().fold(f64::INFINITY, |m, v| m.min(*v)).floor().max(0.0) as usize;
        let max_x = (xs.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v)).ceil().max(0.0) as usize).min(n);
        let min_y = ys.iter().fold(f64::INFINITY, |m, v| m.min(*v)).floor().max(0.0) as usize;
        let max_y = (ys.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v)).ceil().max(0.0) as usize).min(n);
        for i in min_y..max_y {
            let y = i as f64 + 0.5;
            for j in min_x..max_x {
                if sites[i * n + j].is_some() {
                    continue;
                }
                let x = j as f64 + 0.5;
                // barycentric u on corner 1, v on corner 2
                let u = ((x - xs[0]) * (ys[2] - ys[0]) - (y - ys[0]) * (xs[2] - xs[0])) / area;
                let v = ((y - ys[0]) * (xs[1] - xs[0]) - (x - xs[0]) * (ys[1] - ys[0])) / area;
                if u >= -1e-12 && v >= -1e-12 && u + v <= 1.0 + 1e-12 {
                    sites[i * n + j] = Some(TexelSite { face: fi as u32, bary: (u, v) });
                }
            }
        }
    }
    sites
}

/// Builds the texture map of one frame by back-projecting every camera
/// image onto the posed surface and averaging the visible views per texel.
pub fn build_texture_map(
    template: &Arc<SkinnedTemplate>,
    pose: &Pose,
    cameras: &[Camera],
    images: &[ImageRgbF],
    masks: &[ImageGrayF],
    resolution: usize,
) -> Result<TextureMap> {
    let transforms = forward_kinematics(template, pose)?;
    let posed = lbs_pose_mesh(template, &transforms);
    build_texture_map_posed(&posed, cameras, images, masks, resolution, pose.frame_id.unwrap_or(0))
}

/// Same as [`build_texture_map`] for an already-posed mesh.
pub fn build_texture_map_posed(
    posed: &PosedMesh,
    cameras: &[Camera],
    images: &[ImageRgbF],
    masks: &[ImageGrayF],
    resolution: usize,
    frame_id: u64,
) -> Result<TextureMap> {
    if cameras.is_empty() {
        return Err(Error::EmptyInput("build_texture_map: no cameras".into()));
    }
    if images.len() != cameras.len() || masks.len() != cameras.len() {
        return Err(Error::ShapeMismatch(format!(
            "views misaligned: {} cameras, {} images, {} masks",
            cameras.len(),
            images.len(),
            masks.len()
        )));
    }
    for (cam, (img, mask)) in cameras.iter().zip(images.iter().zip(masks.iter())) {
        cam.validate()?;
        if img.width != cam.width || img.height != cam.height {
            return Err(Error::ShapeMismatch(format!(
                "camera {}: image {}x{} does not match camera {}x{}",
                cam.id, img.width, img.height, cam.width, cam.height
            )));
        }
        if mask.width != cam.width || mask.height != cam.height {
            return Err(Error::ShapeMismatch(format!("camera {}: mask size mismatch", cam.id)));
        }
    }
    let template = &posed.template;
    let sites = rasterize_texels(template, resolution);
    let zbuffers: Vec<Vec<f64>> = cameras
        .iter()
        .map(|cam| raster_depth_buffer(&posed.vertices, &template.faces, cam, ZBUFFER_SCALE))
        .collect();

    let mut map = TextureMap::new(resolution, frame_id);
    use rayon::prelude::*;
    let texels: Vec<Option<([f64; 3], bool)>> = sites
        .par_iter()
        .map(|site| {
            let site = site.as_ref()?;
            let p = posed.point_at(site.face as usize, site.bary);
            let f = template.faces[site.face as usize];
            let normal = (posed.vertices[f[1]] - posed.vertices[f[0]])
                .cross(&(posed.vertices[f[2]] - posed.vertices[f[0]]));
            let normal_len = normal.norm();
            let mut acc = [0.0f64; 3];
            let mut count = 0usize;
            'views: for (vi, cam) in cameras.iter().enumerate() {
                if let Some((u, v, z)) = cam.project(p) {
                    if u < 0.0 || v < 0.0 || u > cam.width as f64 || v > cam.height as f64 {
                        continue;
                    }
                    if normal_len > 1e-20 {
                        let to_cam = (cam.center() - p).normalize();
                        if normal.dot(&to_cam) / normal_len < GRAZING_COS {
                            continue;
                        }
                    }
                    if masks[vi].min4(u, v) <= 0.5 {
                        continue;
                    }
                    let zb = &zbuffers[vi];
                    let zw = cam.width * ZBUFFER_SCALE;
                    let zh = cam.height * ZBUFFER_SCALE;
                    let px = ((u * ZBUFFER_SCALE as f64) as usize).min(zw - 1);
                    let py = ((v * ZBUFFER_SCALE as f64) as usize).min(zh - 1);
                    if z > zb[py * zw + px] + DEPTH_BIAS {
                        continue;
                    }
                    // bilinear support must not straddle another surface:
                    // check the buffer under all four contributing pixels
                    let fx = (u - 0.5).clamp(0.0, (cam.width - 1) as f64);
                    let fy = (v - 0.5).clamp(0.0, (cam.height - 1) as f64);
                    let (c0, r0) = (fx.floor() as usize, fy.floor() as usize);
                    for (rr, cc) in [
                        (r0, c0),
                        (r0, (c0 + 1).min(cam.width - 1)),
                        ((r0 + 1).min(cam.height - 1), c0),
                        ((r0 + 1).min(cam.height - 1), (c0 + 1).min(cam.width - 1)),
                    ] {
                        let bx = (((cc as f64 + 0.5) * ZBUFFER_SCALE as f64) as usize).min(zw - 1);
                        let by = (((rr as f64 + 0.5) * ZBUFFER_SCALE as f64) as usize).min(zh - 1);
                        let zn = zb[by * zw + bx];
                        if !zn.is_finite() || (zn - z).abs() > DEPTH_CONSISTENCY {
                            continue 'views;
                        }
                    }
                    let c = images[vi].bilinear(u, v);
                    acc[0] += c[0];
                    acc[1] += c[1];
                    acc[2] += c[2];
                    count += 1;
                }
            }
            if count > 0 {
                let k = count as f64;
                Some(([acc[0] / k, acc[1] / k, acc[2] / k], true))
            } else {
                Some(([0.0; 3], false))
            }
        })
        .collect();
    let mut covered = vec![false; resolution * resolution];
    for (idx, t) in texels.iter().enumerate() {
        if let Some((color, valid)) = t {
            map.colors[idx] = *color;
            map.validity[idx] = *valid;
            covered[idx] = true;
        }
    }
    dilate_invalid(&mut map, &covered);
    Ok(map)
}

/// Fills unobserved (but UV-covered) texels from valid neighbors, up to
/// [`DILATION_RINGS`] rings. Validity stays false on filled texels.
fn dilate_invalid(map: &mut TextureMap, covered: &[bool]) {
    let n = map.resolution;
    let mut filled: Vec<bool> = map.validity.clone();
    for _ in 0..DILATION_RINGS {
        let snapshot = filled.clone();
        let colors = map.colors.clone();
        let mut changed = false;
        for i in 0..n {
            for j in 0..n {
                let idx = i * n + j;
                if snapshot[idx] || !covered[idx] {
                    continue;
                }
                let mut acc = [0.0f64; 3];
                let mut cnt = 0usize;
                for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        if di == 0 && dj == 0 {
                            continue;
                        }
                        let ni = i as i64 + di;
                        let nj = j as i64 + dj;
                        if ni < 0 || nj < 0 || ni >= n as i64 || nj >= n as i64 {
                            continue;
                        }
                        let nidx = ni as usize * n + nj as usize;
                        if snapshot[nidx] {
                            acc[0] += colors[nidx][0];
                            acc[1] += colors[nidx][1];
                            acc[2] += colors[nidx][2];
                            cnt += 1;
                        }
                    }
                }
                if cnt > 0 {
                    let k = cnt as f64;
                    map.colors[idx] = [acc[0] / k, acc[1] / k, acc[2] / k];
                    filled[idx] = true;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
}

/// Projects an observation-space point onto the posed surface and returns
/// face, barycentric coordinates and the UV coordinate (exact argmin).
pub fn project_point_to_uv(posed: &PosedMesh, x_t: Vec3) -> SurfacePoint {
    let hit = posed.project(x_t);
    SurfacePoint { face: hit.face, bary: hit.bary, uv: posed.template.uv_at(hit.face, hit.bary) }
}

/// Brute-force reference for [`project_point_to_uv`]: scans every face.
pub fn project_point_to_uv_brute(posed: &PosedMesh, x_t: Vec3) -> SurfacePoint {
    let mut best = (f64::INFINITY, 0usize, (0.0, 0.0));
    for (fi, f) in posed.template.faces.iter().enumerate() {
        let (p, u, v) =
            closest_point_triangle(x_t, posed.vertices[f[0]], posed.vertices[f[1]], posed.vertices[f[2]]);
        let d2 = (p - x_t).norm_squared();
        if d2 < best.0 {
            best = (d2, fi, (u, v));
        }
    }
    SurfacePoint { face: best.1, bary: best.2, uv: posed.template.uv_at(best.1, best.2) }
}

/// Base Gaussian width of the luminance pyramid; level k uses sigma * 2^k.
pub const PYRAMID_BASE_SIGMA: f64 = 1.0;
/// Number of luminance pyramid levels in the feature encoding.
pub const PYRAMID_LEVELS: usize = 3;

/// Separable Gaussian blur with clamped borders; kernel truncated at 3
/// sigma and renormalized.
pub fn gaussian_blur(values: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    assert_eq!(values.len(), width * height);
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut sum = 0.0;
    for k in -radius..=radius {
        let v = (-(k as f64) * (k as f64) / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        sum += v;
    }
    for v in &mut kernel {
        *v /= sum;
    }
    let mut tmp = vec![0.0; width * height];
    for i in 0..height {
        for j in 0..width {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let jj = (j as i64 + ki as i64 - radius).clamp(0, width as i64 - 1) as usize;
                acc += kv * values[i * width + jj];
            }
            tmp[i * width + j] = acc;
        }
    }
    let mut out = vec![0.0; width * height];
    for i in 0..height {
        for j in 0..width {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let ii = (i as i64 + ki as i64 - radius).clamp(0, height as i64 - 1) as usize;
                acc += kv * tmp[ii * width + j];
            }
            out[i * width + j] = acc;
        }
    }
    out
}

#[inline]
fn luminance(c: &[f64; 3]) -> f64 {
    0.2126 * c[0] + 0.7152 * c[1] + 0.0722 * c[2]
}

/// Deterministic feature encoding of a texture map: RGB passthrough,
/// Gaussian-pyramid luminance levels, and a seeded random 3x3 convolution
/// bank over RGB for the remaining channels.
pub fn encode_features(texture: &TextureMap, channels: usize, seed: u64) -> Result<FeatureMap> {
    let fixed = 3 + PYRAMID_LEVELS;
    if channels < fixed {
        return Err(Error::Invariant(format!(
            "feature channels must be >= {}, got {}",
            fixed, channels
        )));
    }
    let n = texture.resolution;
    let mut map = FeatureMap::zeros(n, channels, texture.frame_id);
    for idx in 0..n * n {
        let base = idx * channels;
        map.values[base] = texture.colors[idx][0];
        map.values[base + 1] = texture.colors[idx][1];
        map.values[base + 2] = texture.colors[idx][2];
    }
    let lum: Vec<f64> = texture.colors.iter().map(luminance).collect();
    for level in 1..=PYRAMID_LEVELS {
        let sigma = PYRAMID_BASE_SIGMA * (1 << level) as f64;
        let blurred = gaussian_blur(&lum, n, n, sigma);
        for idx in 0..n * n {
            map.values[idx * channels + 2 + level] = blurred[idx];
        }
    }
    let bank = channels - fixed;
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    for b in 0..bank {
        let mut filt = [[0.0f64; 9]; 3];
        for ch in filt.iter_mut() {
            for w in ch.iter_mut() {
                *w = rng.gen_range(-1.0 / 3.0..1.0 / 3.0);
            }
        }
        let out_ch = fixed + b;
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        let ii = (i as i64 + di).clamp(0, n as i64 - 1) as usize;
                        let jj = (j as i64 + dj).clamp(0, n as i64 - 1) as usize;
                        let tap = ((di + 1) * 3 + (dj + 1)) as usize;
                        let c = &texture.colors[ii * n + jj];
                        acc += filt[0][tap] * c[0] + filt[1][tap] * c[1] + filt[2][tap] * c[2];
                    }
                }
                map.values[(i * n + j) * channels + out_ch] = acc;
            }
        }
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::quad_template;
    use crate::body_model::JointTransforms;
    use crate::JOINT_COUNT;
    use rand::{Rng, SeedableRng};

    fn straight_camera(id: u32, res: usize, dist: f64) -> Camera {
        Camera {
            id,
            width: res,
            height: res,
            fx: res as f64,
            fy: res as f64,
            cx: res as f64 / 2.0,
            cy: res as f64 / 2.0,
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [-0.5, -0.5, dist],
        }
    }

    fn posed_quad() -> PosedMesh {
        let t = std::sync::Arc::new(quad_template());
        lbs_pose_mesh(&t, &JointTransforms::identity())
    }

    fn full_mask(res: usize) -> ImageGrayF {
        let mut m = ImageGrayF::new(res, res);
        m.data.iter_mut().for_each(|v| *v = 1.0);
        m
    }

    #[test]
    fn two_views_average() {
        let posed = posed_quad();
        let res = 64;
        let cams = vec![straight_camera(0, res, 2.0), straight_camera(1, res, 2.5)];
        let mut img0 = ImageRgbF::new(res, res);
        img0.data.iter_mut().for_each(|p| *p = [0.2; 3]);
        let mut img1 = ImageRgbF::new(res, res);
        img1.data.iter_mut().for_each(|p| *p = [0.4; 3]);
        let masks = vec![full_mask(res), full_mask(res)];
        let map = build_texture_map_posed(&posed, &cams, &[img0, img1], &masks, 32, 0).unwrap();
        let idx = 16 * 32 + 16;
        assert!(map.validity[idx]);
        for ch in 0..3 {
            assert!((map.colors[idx][ch] - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn single_view_reproduces_bilinear_texture() {
        // A bilinear-in-UV image is reproduced exactly through projection
        // and bilinear resampling of an orthogonal view.
        let posed = posed_quad();
        let res = 128;
        let cam = straight_camera(0, res, 2.0);
        let mut img = ImageRgbF::new(res, res);
        let f = |u: f64, v: f64| 0.1 + 0.5 * u + 0.2 * v + 0.15 * u * v;
        for r in 0..res {
            for c in 0..res {
                // invert the projection: pixel center -> plane point
                let u = ((c as f64 + 0.5) - cam.cx) / cam.fx * 2.0 + 0.5;
                let v = ((r as f64 + 0.5) - cam.cy) / cam.fy * 2.0 + 0.5;
                let val = f(u.clamp(0.0, 1.0), v.clamp(0.0, 1.0));
                img.set(r, c, [val; 3]);
            }
        }
        let map = build_texture_map_posed(&posed, &[cam], &[img], &[full_mask(res)], 32, 0).unwrap();
        let n = 32;
        for i in 2..n - 2 {
            for j in 2..n - 2 {
                let idx = i * n + j;
                assert!(map.validity[idx]);
                let u = (j as f64 + 0.5) / n as f64;
                let v = (i as f64 + 0.5) / n as f64;
                assert!(
                    (map.colors[idx][0] - f(u, v)).abs() < 1e-9,
                    "texel ({}, {}): {} vs {}",
                    i,
                    j,
                    map.colors[idx][0],
                    f(u, v)
                );
            }
        }
    }

    /// Two stacked quads seen from one camera: the back quad is occluded
    /// where the front quad covers it.
    fn occlusion_template() -> std::sync::Arc<SkinnedTemplate> {
        let vertices = vec![
            // front quad (z = 0), fully visible
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(1.0, 1.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            // back quad (z = 0.5), shifted left so a strip stays visible
            Vec3::new(-0.6, 0.0, 0.5),
            Vec3::new(0.4, 0.0, 0.5),
            Vec3::new(0.4, 1.0, 0.5),
            Vec3::new(-0.6, 1.0, 0.5),
        ];
        let faces = vec![[0, 2, 1], [0, 3, 2], [4, 6, 5], [4, 7, 6]];
        // front chart u in [0, 0.45], back chart u in [0.55, 1.0]
        let uv = vec![
            [[0.0, 0.0], [0.45, 1.0], [0.45, 0.0]],
            [[0.0, 0.0], [0.0, 1.0], [0.45, 1.0]],
            [[0.55, 0.0], [1.0, 1.0], [1.0, 0.0]],
            [[0.55, 0.0], [0.55, 1.0], [1.0, 1.0]],
        ];
        let mut w = [0.0; JOINT_COUNT];
        w[0] = 1.0;
        let t = quad_template();
        std::sync::Arc::new(
            SkinnedTemplate::from_parts(vertices, faces, uv, vec![w; 8], t.rest_joints, t.parents)
                .unwrap(),
        )
    }

    #[test]
    fn occluded_texels_are_invalid_and_dilated() {
        let t = occlusion_template();
        let posed = lbs_pose_mesh(&t, &JointTransforms::identity());
        let res = 128;
        let cam = straight_camera(0, res, 2.0);
        let mut img = ImageRgbF::new(res, res);
        img.data.iter_mut().for_each(|p| *p = [0.8, 0.2, 0.1]);
        let map = build_texture_map_posed(&posed, &[cam], &[img], &[full_mask(res)], 64, 0).unwrap();
        let n = 64;
        // back chart: u in [0.55, 1] maps world x in [-0.6, 0.4]; the front
        // quad's shadow on the back plane is x in [-0.125, 1.125]
        let back_u_of_x = |x: f64| 0.55 + (x + 0.6) * 0.45;
        let vis_j = (back_u_of_x(-0.35) * n as f64) as usize; // clearly visible
        let occ_j = (back_u_of_x(0.1) * n as f64) as usize; // clearly occluded
        let row = n / 2;
        assert!(map.validity[row * n + vis_j], "visible strip should be valid");
        assert!(!map.validity[row * n + occ_j], "occluded texel should be invalid");
        // a texel just inside the occluded region is filled by dilation
        let edge_x = -0.125 + 0.02;
        let edge_j = (back_u_of_x(edge_x) * n as f64) as usize;
        let idx = row * n + edge_j;
        assert!(!map.validity[idx]);
        assert!(map.colors[idx][0] > 0.0, "dilation should have filled near the boundary");
        // deep inside the occlusion, beyond the dilation reach, stays black
        let deep_j = (back_u_of_x(0.35) * n as f64) as usize;
        assert_eq!(map.colors[row * n + deep_j], [0.0; 3]);
    }

    #[test]
    fn project_vertex_returns_corner_uv() {
        let posed = posed_quad();
        let sp = project_point_to_uv(&posed, Vec3::new(1.0, 0.0, 0.0));
        assert_eq!(sp.face, 0);
        assert!((sp.uv[0] - 1.0).abs() < 1e-12 && sp.uv[1].abs() < 1e-12);
    }

    #[test]
    fn project_centroid_gives_mean_uv() {
        let posed = posed_quad();
        let centroid = (posed.vertices[0] + posed.vertices[1] + posed.vertices[2]) / 3.0;
        let sp = project_point_to_uv(&posed, centroid);
        assert_eq!(sp.face, 0);
        assert!((sp.bary.0 - 1.0 / 3.0).abs() < 1e-12);
        assert!((sp.bary.1 - 1.0 / 3.0).abs() < 1e-12);
        let q = &posed.template.uv[0];
        let mean_u = (q[0][0] + q[1][0] + q[2][0]) / 3.0;
        let mean_v = (q[0][1] + q[1][1] + q[2][1]) / 3.0;
        assert!((sp.uv[0] - mean_u).abs() < 1e-12 && (sp.uv[1] - mean_v).abs() < 1e-12);
    }

    #[test]
    fn project_offset_along_normal_matches_brute_force() {
        let posed = posed_quad();
        let centroid = (posed.vertices[0] + posed.vertices[1] + posed.vertices[2]) / 3.0;
        let x = centroid + Vec3::new(0.0, 0.0, 0.05);
        let a = project_point_to_uv(&posed, x);
        let b = project_point_to_uv_brute(&posed, x);
        assert_eq!(a.face, b.face);
        assert!((a.uv[0] - b.uv[0]).abs() < 1e-12 && (a.uv[1] - b.uv[1]).abs() < 1e-12);
    }

    #[test]
    fn projection_agrees_with_brute_force_on_random_meshes() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(5);
        let base = quad_template();
        let mut vertices = Vec::new();
        let mut faces = Vec::new();
        let mut uv = Vec::new();
        for i in 0..160 {
            let c = Vec3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>());
            vertices.push(c);
            vertices.push(c + Vec3::new(0.2 * rng.gen::<f64>(), 0.05, 0.0));
            vertices.push(c + Vec3::new(0.0, 0.2 * rng.gen::<f64>(), 0.05));
            faces.push([3 * i, 3 * i + 1, 3 * i + 2]);
            uv.push([[0.1, 0.1], [0.5, 0.2], [0.3, 0.8]]);
        }
        let mut w = [0.0; JOINT_COUNT];
        w[0] = 1.0;
        let t = std::sync::Arc::new(
            SkinnedTemplate::from_parts(
                vertices,
                faces,
                uv,
                vec![w; 480],
                base.rest_joints,
                base.parents,
            )
            .unwrap(),
        );
        let posed = lbs_pose_mesh(&t, &JointTransforms::identity());
        for _ in 0..200 {
            let q = Vec3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()) * 1.2;
            let a = posed.project(q);
            let b = project_point_to_uv_brute(&posed, q);
            let d2b = (posed.point_at(b.face, b.bary) - q).norm_squared();
            assert!(
                a.face == b.face || (a.dist2 - d2b).abs() < 1e-12,
                "face {} vs {}, dist {} vs {}",
                a.face,
                b.face,
                a.dist2,
                d2b
            );
        }
    }

    #[test]
    fn bilinear_sampling_conventions() {
        let mut map = TextureMap::new(4, 0);
        for i in 0..4 {
            for j in 0..4 {
                map.colors[i * 4 + j] = [(i * 4 + j) as f64, 0.0, 0.0];
            }
        }
        // exact texel center
        let center = map.sample_bilinear([(1.0 + 0.5) / 4.0, (2.0 + 0.5) / 4.0]);
        assert_eq!(center[0], (2 * 4 + 1) as f64);
        // midway between two horizontally adjacent texels
        let mid = map.sample_bilinear([(1.0 + 1.0) / 4.0, 0.5 / 4.0]);
        assert!((mid[0] - 1.5).abs() < 1e-12);
        // clamp at the corner
        let corner = map.sample_bilinear([0.0, 0.0]);
        assert_eq!(corner[0], 0.0);
    }

    #[test]
    fn bilinear_is_exact_on_bilinear_images() {
        let n = 16;
        let mut map = TextureMap::new(n, 0);
        let f = |u: f64, v: f64| 0.3 * u - 0.2 * v + 0.7 * u * v + 0.1;
        for i in 0..n {
            for j in 0..n {
                let u = (j as f64 + 0.5) / n as f64;
                let v = (i as f64 + 0.5) / n as f64;
                map.colors[i * n + j] = [f(u, v); 3];
            }
        }
        let mut rng = rand::rngs::StdRng::seed_from_u64(9);
        for _ in 0..300 {
            // stay inside the texel-center hull where clamping is inactive
            let u = 0.5 / n as f64 + rng.gen::<f64>() * (1.0 - 1.0 / n as f64);
            let v = 0.5 / n as f64 + rng.gen::<f64>() * (1.0 - 1.0 / n as f64);
            let s = map.sample_bilinear([u, v]);
            assert!((s[0] - f(u, v)).abs() < 1e-6, "{} vs {}", s[0], f(u, v));
        }
    }

    #[test]
    fn encode_constant_texture() {
        let mut tex = TextureMap::new(16, 3);
        tex.colors.iter_mut().for_each(|c| *c = [0.5, 0.5, 0.5]);
        let f = encode_features(&tex, 16, 42).unwrap();
        let lum = luminance(&[0.5, 0.5, 0.5]);
        for i in 0..16 {
            for j in 0..16 {
                let t = f.texel(i, j);
                assert_eq!(&t[0..3], &[0.5, 0.5, 0.5]);
                for level in 0..PYRAMID_LEVELS {
                    assert!((t[3 + level] - lum).abs() < 1e-12);
                }
            }
        }
        assert_eq!(f.frame_id, 3);
    }

    #[test]
    fn encode_is_deterministic() {
        let mut tex = TextureMap::new(8, 0);
        let mut rng = rand::rngs::StdRng::seed_from_u64(1);
        tex.colors.iter_mut().for_each(|c| *c = [rng.gen(), rng.gen(), rng.gen()]);
        let a = encode_features(&tex, 16, 7).unwrap();
        let b = encode_features(&tex, 16, 7).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn pyramid_matches_dense_convolution_oracle() {
        // step edge through the middle
        let n = 32;
        let mut tex = TextureMap::new(n, 0);
        for i in 0..n {
            for j in 0..n {
                let v = if j < n / 2 { 0.2 } else { 0.9 };
                tex.colors[i * n + j] = [v; 3];
            }
        }
        let f = encode_features(&tex, 8, 0).unwrap();
        let lum: Vec<f64> = tex.colors.iter().map(luminance).collect();
        for level in 1..=PYRAMID_LEVELS {
            let sigma = PYRAMID_BASE_SIGMA * (1 << level) as f64;
            let radius = (3.0 * sigma).ceil() as i64;
            // dense 2D convolution with the same truncated kernel
            let mut kernel = Vec::new();
            let mut ksum = 0.0;
            for k in -radius..=radius {
                let v = (-(k as f64) * (k as f64) / (2.0 * sigma * sigma)).exp();
                kernel.push(v);
                ksum += v;
            }
            for v in &mut kernel {
                *v /= ksum;
            }
            for i in (0..n).step_by(7) {
                for j in (0..n).step_by(5) {
                    let mut acc = 0.0;
                    for (ki, kvi) in kernel.iter().enumerate() {
                        for (kj, kvj) in kernel.iter().enumerate() {
                            let ii = (i as i64 + ki as i64 - radius).clamp(0, n as i64 - 1) as usize;
                            let jj = (j as i64 + kj as i64 - radius).clamp(0, n as i64 - 1) as usize;
                            acc += kvi * kvj * lum[ii * n + jj];
                        }
                    }
                    let got = f.texel(i, j)[2 + level];
                    assert!((got - acc).abs() < 1e-12, "level {}: {} vs {}", level, got, acc);
                }
            }
        }
    }

    #[test]
    fn empty_camera_list_errors() {
        let posed = posed_quad();
        let err = build_texture_map_posed(&posed, &[], &[], &[], 16, 0).unwrap_err();
        assert!(matches!(err, Error::EmptyInput(_)));
    }
}
