//! Ray generation, stratified/depth-guided/vertex-ball sampling, and
//! volume-rendering quadrature producing per-ray color, mask and depth.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rayon::prelude::*;

use crate::body_model::{
    BlendedTransform, JointTransforms, Pose, PosedMesh, SkinnedTemplate,
};
use crate::bvh::Aabb;
use crate::geometry_extract::DepthMap;
use crate::imgio::{ImageGrayF, ImageRgbF};
use crate::neural_field::{
    field_forward, sdf_to_density, EvalCache, FieldParams, POSE_VECTOR_DIM,
};
use crate::pose_vocab::{gather_with_features, part_attention_from_weights, PoseFeatures, TexVocab};
use crate::texture_atlas::Camera;
use crate::{Result, Vec3};

/// Transmittance below which quadrature stops evaluating further samples.
pub const EARLY_STOP_TRANSMITTANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn new(origin: Vec3, dir: Vec3) -> Self {
        Self { origin, dir, t_near: 0.0, t_far: f64::INFINITY }
    }

    #[inline]
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.dir * t
    }

    /// Clips the parameter range to a box; false when the ray misses.
    pub fn clip_to_aabb(&mut self, aabb: &Aabb) -> bool {
        match aabb.ray_range(self.origin, self.dir, self.t_near.max(0.0), self.t_far) {
            Some((t0, t1)) if t0 < t1 => {
                self.t_near = t0;
                self.t_far = t1;
                true
            }
            _ => false,
        }
    }
}

/// Rays through the centers of the requested pixels.
pub fn generate_rays(camera: &Camera, pixels: &[(usize, usize)]) -> Result<Vec<Ray>> {
    pixels
        .iter()
        .map(|&(row, col)| {
            let (origin, dir) = camera.pixel_ray(row, col)?;
            Ok(Ray::new(origin, dir))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    Stratified,
    DepthGuided,
    VertexBall,
}

/// Ascending sample depths along a ray plus the end of the sampled band
/// (the last quadrature interval runs to `t_end`).
#[derive(Clone, Debug)]
pub struct SampleSet {
    pub ts: Vec<f64>,
    pub t_end: f64,
    pub mode: SampleMode,
}

impl SampleSet {
    pub fn empty(mode: SampleMode) -> Self {
        Self { ts: Vec::new(), t_end: 0.0, mode }
    }

    pub fn is_empty(&self) -> bool {
        self.ts.is_empty()
    }
}

/// `count` jittered stratified samples in [t0, t1]; bin midpoints without
/// a jitter source.
pub fn sample_stratified(
    t0: f64,
    t1: f64,
    count: usize,
    mut jitter: Option<&mut rand::rngs::StdRng>,
) -> SampleSet {
    if !(t0 < t1) || count == 0 {
        return SampleSet::empty(SampleMode::Stratified);
    }
    let dt = (t1 - t0) / count as f64;
    let ts = (0..count)
        .map(|i| {
            let xi = match jitter.as_deref_mut() {
                Some(rng) => rng.gen::<f64>(),
                None => 0.5,
            };
            t0 + (i as f64 + xi) * dt
        })
        .collect();
    SampleSet { ts, t_end: t1, mode: SampleMode::Stratified }
}

/// `count` samples uniform in the band [center - delta, center + delta]
/// (clipped below at a small positive depth).
pub fn sample_depth_band(
    center: f64,
    delta: f64,
    count: usize,
    jitter: Option<&mut rand::rngs::StdRng>,
) -> SampleSet {
    let t0 = (center - delta).max(1e-6);
    let t1 = center + delta;
    let mut set = sample_stratified(t0, t1, count, jitter);
    set.mode = SampleMode::DepthGuided;
    set
}

/// Samples within the union of ray/sphere intersection intervals from
/// balls of `radius` around `vertices`; strata are distributed over the
/// union by arc length. Empty when no ball is hit.
pub fn sample_vertex_balls(
    origin: Vec3,
    dir: Vec3,
    vertices: &[Vec3],
    radius: f64,
    count: usize,
    mut jitter: Option<&mut rand::rngs::StdRng>,
) -> SampleSet {
    let mut intervals: Vec<(f64, f64)> = Vec::new();
    let r2 = radius * radius;
    for v in vertices {
        let oc = origin - v;
        let b = oc.dot(&dir);
        let c = oc.norm_squared() - r2;
        let disc = b * b - c;
        if disc <= 0.0 {
            continue;
        }
        let s = disc.sqrt();
        let (mut ta, tb) = (-b - s, -b + s);
        if tb <= 1e-6 {
            continue;
        }
        ta = ta.max(1e-6);
        intervals.push((ta, tb));
    }
    if intervals.is_empty() || count == 0 {
        return SampleSet::empty(SampleMode::VertexBall);
    }
    intervals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut merged: Vec<(f64, f64)> = Vec::new();
    for (a, b) in intervals {
        match merged.last_mut() {
            Some(last) if a <= last.1 => last.1 = last.1.max(b),
            _ => merged.push((a, b)),
        }
    }
    let total: f64 = merged.iter().map(|(a, b)| b - a).sum();
    let stride = total / count as f64;
    let mut ts = Vec::with_capacity(count);
    for i in 0..count {
        let xi = match jitter.as_deref_mut() {
            Some(rng) => rng.gen::<f64>(),
            None => 0.5,
        };
        let mut arc = (i as f64 + xi) * stride;
        for (a, b) in &merged {
            let len = b - a;
            if arc <= len {
                ts.push(a + arc);
                break;
            }
            arc -= len;
        }
    }
    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    SampleSet { ts, t_end: merged.last().unwrap().1, mode: SampleMode::VertexBall }
}

/// Per-ray quadrature result.
#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub color: [f64; 3],
    pub mask: f64,
    /// Expected ray depth (parameter t); meaningless when mask ~ 0.
    pub depth: f64,
    pub weights: Vec<f64>,
}

impl RenderOutput {
    pub fn background() -> Self {
        Self { color: [0.0; 3], mask: 0.0, depth: f64::INFINITY, weights: Vec::new() }
    }
}

/// Alpha-compositing quadrature: alpha_i = 1 - exp(-sigma_i dt_i), with
/// the final interval running to the band end; black background beyond.
pub fn composite_ray(samples: &SampleSet, sigmas: &[f64], colors: &[[f64; 3]]) -> RenderOutput {
    let n = samples.ts.len();
    debug_assert!(sigmas.len() >= n && colors.len() >= n || sigmas.len() == colors.len());
    if n == 0 {
        return RenderOutput::background();
    }
    let count = n.min(sigmas.len());
    let mut color = [0.0; 3];
    let mut mask = 0.0;
    let mut depth_acc = 0.0;
    let mut transmittance = 1.0;
    let mut weights = vec![0.0; count];
    for i in 0..count {
        let dt = if i + 1 < n { samples.ts[i + 1] - samples.ts[i] } else { samples.t_end - samples.ts[i] };
        let dt = dt.max(0.0);
        let alpha = 1.0 - (-sigmas[i] * dt).exp();
        let w = transmittance * alpha;
        weights[i] = w;
        for ch in 0..3 {
            color[ch] += w * colors[i][ch];
        }
        mask += w;
        depth_acc += w * samples.ts[i];
        transmittance *= 1.0 - alpha;
    }
    let depth = depth_acc / mask.max(1e-10);
    RenderOutput { color, mask, depth, weights }
}

/// Gradients of a scalar loss w.r.t. per-sample densities and colors,
/// given upstream gradients on the composited color and mask.
pub fn composite_backward(
    samples: &SampleSet,
    sigmas: &[f64],
    colors: &[[f64; 3]],
    color_bar: [f64; 3],
    mask_bar: f64,
) -> (Vec<f64>, Vec<[f64; 3]>) {
    let n = samples.ts.len().min(sigmas.len());
    let mut sigma_bar = vec![0.0; n];
    let mut color_bar_out = vec![[0.0; 3]; n];
    if n == 0 {
        return (sigma_bar, color_bar_out);
    }
    // per-sample upstream through its weight
    let u: Vec<f64> = (0..n)
        .map(|i| {
            color_bar[0] * colors[i][0]
                + color_bar[1] * colors[i][1]
                + color_bar[2] * colors[i][2]
                + mask_bar
        })
        .collect();
    let mut alphas = vec![0.0; n];
    let mut dts = vec![0.0; n];
    for i in 0..n {
        let dt = if i + 1 < samples.ts.len() {
            samples.ts[i + 1] - samples.ts[i]
        } else {
            samples.t_end - samples.ts[i]
        };
        dts[i] = dt.max(0.0);
        alphas[i] = 1.0 - (-sigmas[i] * dts[i]).exp();
    }
    // suffix recursion: s_i = alpha_{i+1} u_{i+1} + (1-alpha_{i+1}) s_{i+1}
    let mut suffix = vec![0.0; n];
    for i in (0..n - 1).rev() {
        suffix[i] = alphas[i + 1] * u[i + 1] + (1.0 - alphas[i + 1]) * suffix[i + 1];
    }
    let mut transmittance = 1.0;
    for i in 0..n {
        let dl_dalpha = transmittance * (u[i] - suffix[i]);
        sigma_bar[i] = dl_dalpha * dts[i] * (1.0 - alphas[i]);
        let w = transmittance * alphas[i];
        for ch in 0..3 {
            color_bar_out[i][ch] = w * color_bar[ch];
        }
        transmittance *= 1.0 - alphas[i];
    }
    (sigma_bar, color_bar_out)
}

/// Everything needed to evaluate the field at observation-space points of
/// one posed frame.
pub struct FrameContext<'a> {
    pub template: &'a Arc<SkinnedTemplate>,
    pub transforms: &'a JointTransforms,
    pub posed: &'a PosedMesh,
    pub vocab: &'a TexVocab,
    pub features: &'a PoseFeatures,
    pub params: &'a FieldParams,
    pub pose_vec: Option<Vec<f64>>,
    pub aabb: Aabb,
}

/// Surface-projection products shared by the feature gather and the
/// canonicalization of one sampled point.
pub struct SamplePrep {
    pub x_c: Vec3,
    pub uv: [f64; 2],
    pub omega: Vec<f64>,
}

impl<'a> FrameContext<'a> {
    pub fn new(
        template: &'a Arc<SkinnedTemplate>,
        transforms: &'a JointTransforms,
        posed: &'a PosedMesh,
        vocab: &'a TexVocab,
        features: &'a PoseFeatures,
        params: &'a FieldParams,
        pose: &Pose,
        box_padding: f64,
    ) -> Self {
        let pose_vec = params.cfg.feed_pose_vector.then(|| {
            let mut v = Vec::with_capacity(POSE_VECTOR_DIM);
            for t in &pose.theta {
                v.extend_from_slice(t);
            }
            v
        });
        Self {
            template,
            transforms,
            posed,
            vocab,
            features,
            params,
            pose_vec,
            aabb: posed.surface().bounds().padded(box_padding),
        }
    }

    /// Projects an observation point to the posed surface once and derives
    /// the canonical position, UV coordinate and attention weights.
    pub fn prep_sample(&self, x_t: Vec3) -> Result<SamplePrep> {
        let hit = self.posed.project(x_t);
        let uv = self.template.uv_at(hit.face, hit.bary);
        let weights = self.template.skin_weights_at(hit.face, hit.bary);
        let omega = part_attention_from_weights(&self.vocab.table, &weights);
        let x_c = BlendedTransform::from_weights(self.transforms, &weights).invert(x_t)?;
        Ok(SamplePrep { x_c, uv, omega })
    }

    /// Gathers the pose feature at a prepared sample into `feat`.
    pub fn gather_feature(&self, prep: &SamplePrep, feat: &mut [f64]) {
        gather_with_features(self.vocab, self.features, prep.uv, &prep.omega, feat);
    }

    /// Full field evaluation at an observation point: density, color, SDF.
    pub fn eval_point(
        &self,
        x_t: Vec3,
        dir: Vec3,
        feat: &mut [f64],
        cache: &mut EvalCache,
        with_grad: bool,
    ) -> Result<()> {
        let prep = self.prep_sample(x_t)?;
        self.gather_feature(&prep, feat);
        field_forward(self.params, prep.x_c, dir, feat, self.pose_vec.as_deref(), with_grad, cache)
    }

    /// Observation-space SDF (direction-independent), for extraction.
    pub fn sdf_at(&self, x_t: Vec3) -> Result<f64> {
        let mut feat = vec![0.0; self.vocab.channels()];
        let mut cache = EvalCache::new();
        self.eval_point(x_t, Vec3::new(0.0, 0.0, 1.0), &mut feat, &mut cache, false)?;
        Ok(cache.out.sdf)
    }
}

/// Evaluates the field along the ray samples and composites, optionally
/// stopping once the transmittance falls below the early-stop threshold.
pub fn eval_ray(
    ctx: &FrameContext,
    ray: &Ray,
    samples: &SampleSet,
    early_stop: bool,
) -> Result<RenderOutput> {
    if samples.is_empty() {
        return Ok(RenderOutput::background());
    }
    let n = samples.ts.len();
    let mut sigmas = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    let mut feat = vec![0.0; ctx.vocab.channels()];
    let mut cache = EvalCache::new();
    let beta = ctx.params.beta();
    let mut transmittance = 1.0;
    for i in 0..n {
        let x = ray.at(samples.ts[i]);
        ctx.eval_point(x, ray.dir, &mut feat, &mut cache, false)?;
        let sigma = sdf_to_density(cache.out.sdf, beta);
        sigmas.push(sigma);
        colors.push(cache.out.color);
        let dt = if i + 1 < n { samples.ts[i + 1] - samples.ts[i] } else { samples.t_end - samples.ts[i] };
        transmittance *= (-sigma * dt.max(0.0)).exp();
        if early_stop && transmittance < EARLY_STOP_TRANSMITTANCE {
            break;
        }
    }
    let truncated = SampleSet {
        ts: samples.ts[..sigmas.len()].to_vec(),
        t_end: if sigmas.len() == n { samples.t_end } else { samples.ts[sigmas.len()] },
        mode: samples.mode,
    };
    Ok(composite_ray(&truncated, &sigmas, &colors))
}

/// How [`render_view`] samples each ray.
pub enum RenderMode<'a> {
    Stratified { count: usize },
    Guided {
        depth: &'a DepthMap,
        count: usize,
        delta: f64,
        fallback_radius: f64,
        fallback_count: usize,
        /// Pixel radius around covered depth pixels that still gets the
        /// vertex-ball fallback (silhouette boundary band).
        fallback_dilation: usize,
    },
}

/// A rendered camera view: color, accumulated mask, expected ray depth
/// (+inf where no samples were taken).
pub struct RenderedView {
    pub color: ImageRgbF,
    pub mask: ImageGrayF,
    pub depth: Vec<f64>,
}

/// Mixes a base seed with a pixel index into a per-pixel RNG, so results
/// do not depend on scheduling order.
pub fn pixel_rng(seed: u64, pixel_index: u64) -> rand::rngs::StdRng {
    let mut z = seed ^ pixel_index.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    rand::rngs::StdRng::seed_from_u64(z ^ (z >> 31))
}

/// Renders a full camera view by composing ray generation, sampling, the
/// pose-feature gather, field evaluation and quadrature per pixel.
pub fn render_view(
    ctx: &FrameContext,
    camera: &Camera,
    mode: &RenderMode,
    seed: u64,
    jitter: bool,
) -> Result<RenderedView> {
    camera.validate()?;
    let (w, h) = (camera.width, camera.height);
    let rot = camera.rot();
    let results: Vec<Result<RenderOutput>> = (0..w * h)
        .into_par_iter()
        .map(|idx| {
            let row = idx / w;
            let col = idx % w;
            let (origin, dir) = camera.pixel_ray(row, col)?;
            let mut ray = Ray::new(origin, dir);
            let mut rng = jitter.then(|| pixel_rng(seed, idx as u64));
            let samples = match mode {
                RenderMode::Stratified { count } => {
                    if !ray.clip_to_aabb(&ctx.aabb) {
                        return Ok(RenderOutput::background());
                    }
                    sample_stratified(ray.t_near, ray.t_far, *count, rng.as_mut())
                }
                RenderMode::Guided {
                    depth,
                    count,
                    delta,
                    fallback_radius,
                    fallback_count,
                    fallback_dilation,
                } => {
                    if depth.covered(row, col) {
                        // camera-space depth -> ray parameter
                        let dir_cam_z = (rot * dir).z;
                        let t_center = depth.get(row, col) / dir_cam_z;
                        sample_depth_band(t_center, *delta, *count, rng.as_mut())
                    } else if depth.covered_near(row, col, *fallback_dilation) {
                        sample_vertex_balls(
                            origin,
                            dir,
                            &ctx.posed.vertices,
                            *fallback_radius,
                            *fallback_count,
                            rng.as_mut(),
                        )
                    } else {
                        return Ok(RenderOutput::background());
                    }
                }
            };
            eval_ray(ctx, &ray, &samples, true)
        })
        .collect();
    let mut color = ImageRgbF::new(w, h);
    let mut mask = ImageGrayF::new(w, h);
    let mut depth = vec![f64::INFINITY; w * h];
    for (idx, r) in results.into_iter().enumerate() {
        let out = r?;
        color.data[idx] = out.color;
        mask.data[idx] = out.mask;
        depth[idx] = out.depth;
    }
    Ok(RenderedView { color, mask, depth })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body_model::{forward_kinematics, lbs_pose_mesh};
    use crate::neural_field::{plane_field, FieldConfig};
    use crate::pose_vocab::PartitionTable;
    use crate::texture_atlas::FeatureMap;
    use rand::{Rng, SeedableRng};

    fn test_camera(res: usize) -> Camera {
        Camera {
            id: 0,
            width: res,
            height: res,
            fx: res as f64,
            fy: res as f64,
            // for odd res, the middle pixel's center IS (cx, cy)
            cx: res as f64 / 2.0,
            cy: res as f64 / 2.0,
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0, 0.0, 2.0],
        }
    }

    #[test]
    fn center_pixel_ray_is_camera_axis() {
        let cam = test_camera(33);
        let rays = generate_rays(&cam, &[(16, 16)]).unwrap();
        assert!((rays[0].dir - Vec3::new(0.0, 0.0, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn corner_pixel_ray_matches_intrinsics_inverse() {
        let cam = test_camera(32);
        let rays = generate_rays(&cam, &[(0, 0)]).unwrap();
        let expected = Vec3::new((0.5 - cam.cx) / cam.fx, (0.5 - cam.cy) / cam.fy, 1.0).normalize();
        assert!((rays[0].dir - expected).norm() < 1e-12);
        assert!((rays[0].dir.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn out_of_bounds_pixel_errors() {
        let cam = test_camera(8);
        assert!(generate_rays(&cam, &[(8, 0)]).is_err());
    }

    #[test]
    fn all_rays_unit_norm() {
        let cam = test_camera(16);
        let pixels: Vec<(usize, usize)> =
            (0..16).flat_map(|r| (0..16).map(move |c| (r, c))).collect();
        for ray in generate_rays(&cam, &pixels).unwrap() {
            assert!((ray.dir.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_the_box_gives_empty_samples() {
        let aabb = Aabb { min: Vec3::new(0.0, 0.0, 0.0), max: Vec3::new(1.0, 1.0, 1.0) };
        let mut ray = Ray::new(Vec3::new(5.0, 5.0, -1.0), Vec3::new(0.0, 0.0, 1.0));
        assert!(!ray.clip_to_aabb(&aabb));
    }

    #[test]
    fn stratified_midpoints_without_jitter() {
        let set = sample_stratified(0.0, 1.0, 4, None);
        let expected = [0.125, 0.375, 0.625, 0.875];
        for (t, e) in set.ts.iter().zip(expected.iter()) {
            assert!((t - e).abs() < 1e-12);
        }
        assert_eq!(set.t_end, 1.0);
    }

    #[test]
    fn depth_band_midpoints_without_jitter() {
        let set = sample_depth_band(2.0, 0.05, 2, None);
        assert!((set.ts[0] - 1.975).abs() < 1e-12);
        assert!((set.ts[1] - 2.025).abs() < 1e-12);
    }

    #[test]
    fn vertex_ball_samples_stay_inside_balls() {
        let vertices =
            vec![Vec3::new(0.0, 0.0, 2.0), Vec3::new(0.0, 0.0, 2.05), Vec3::new(0.3, 0.0, 3.0)];
        let set = sample_vertex_balls(
            Vec3::zeros(),
            Vec3::new(0.0, 0.0, 1.0),
            &vertices,
            0.05,
            8,
            None,
        );
        assert!(!set.is_empty());
        for &t in &set.ts {
            let p = Vec3::new(0.0, 0.0, t);
            let inside = vertices.iter().any(|v| (p - v).norm() <= 0.05 + 1e-9);
            assert!(inside, "sample t={} outside all balls", t);
        }
        // ascending
        for pair in set.ts.windows(2) {
            assert!(pair[0] < pair[1]);
        }
    }

    #[test]
    fn composite_zero_density_is_background() {
        let set = SampleSet { ts: vec![0.2, 0.4, 0.6], t_end: 0.8, mode: SampleMode::Stratified };
        let out = composite_ray(&set, &[0.0; 3], &[[0.5; 3]; 3]);
        assert_eq!(out.color, [0.0; 3]);
        assert_eq!(out.mask, 0.0);
    }

    #[test]
    fn composite_saturates_on_opaque_sample() {
        let set = SampleSet { ts: vec![1.0], t_end: 2.0, mode: SampleMode::Stratified };
        let out = composite_ray(&set, &[50.0], &[[0.3, 0.6, 0.9]]);
        assert!((out.mask - 1.0).abs() < 1e-9);
        assert!((out.color[0] - 0.3).abs() < 1e-9);
        assert!((out.depth - 1.0).abs() < 1e-9);
    }

    #[test]
    fn composite_two_half_opacity_samples() {
        let ln2 = std::f64::consts::LN_2;
        let set = SampleSet { ts: vec![0.5, 1.5], t_end: 2.5, mode: SampleMode::Stratified };
        let out = composite_ray(&set, &[ln2, ln2], &[[1.0; 3]; 2]);
        assert!((out.weights[0] - 0.5).abs() < 1e-12);
        assert!((out.weights[1] - 0.25).abs() < 1e-12);
        assert!((out.mask - 0.75).abs() < 1e-12);
    }

    #[test]
    fn weights_nonnegative_and_mask_bounded() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(3);
        for _ in 0..200 {
            let n = rng.gen_range(1..20);
            let mut ts: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 3.0).collect();
            ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
            ts.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
            let t_end = ts.last().unwrap() + rng.gen::<f64>();
            let set = SampleSet { ts: ts.clone(), t_end, mode: SampleMode::Stratified };
            let sigmas: Vec<f64> = (0..set.ts.len()).map(|_| rng.gen::<f64>() * 30.0).collect();
            let colors: Vec<[f64; 3]> = (0..set.ts.len()).map(|_| [rng.gen(); 3]).collect();
            let out = composite_ray(&set, &sigmas, &colors);
            assert!(out.weights.iter().all(|w| *w >= 0.0));
            assert!(out.mask <= 1.0 + 1e-9);
            let sum: f64 = out.weights.iter().sum();
            assert!((sum - out.mask).abs() < 1e-12);
        }
    }

    #[test]
    fn opaque_plane_depth_within_sample_spacing() {
        // plane SDF z - z0 sampled along the axis ray: expected depth
        // must land within one sample spacing of z0
        let z0 = 1.3;
        let count = 64;
        let set = sample_stratified(0.0, 3.0, count, None);
        let spacing = 3.0 / count as f64;
        let beta = 0.005;
        // wall occupying t >= z0: positive sdf in front, negative behind
        let sigmas: Vec<f64> =
            set.ts.iter().map(|t| sdf_to_density(z0 - t, beta)).collect();
        let colors = vec![[1.0; 3]; count];
        let out = composite_ray(&set, &sigmas, &colors);
        assert!((out.depth - z0).abs() < spacing, "depth {} vs plane {}", out.depth, z0);
    }

    #[test]
    fn doubling_samples_changes_color_little() {
        let z0 = 1.3;
        let beta = 0.02;
        let render = |count: usize| {
            let set = sample_stratified(0.0, 3.0, count, None);
            let sigmas: Vec<f64> = set.ts.iter().map(|t| sdf_to_density(z0 - t, beta)).collect();
            let colors: Vec<[f64; 3]> =
                set.ts.iter().map(|t| [0.5 + 0.3 * (t * 2.0).sin(); 3]).collect();
            composite_ray(&set, &sigmas, &colors).color
        };
        let a = render(64);
        let b = render(128);
        for ch in 0..3 {
            assert!((a[ch] - b[ch]).abs() < 1e-2, "{} vs {}", a[ch], b[ch]);
        }
    }

    #[test]
    fn composite_backward_matches_finite_differences() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(11);
        for _ in 0..20 {
            let n = rng.gen_range(2..8);
            let mut ts: Vec<f64> = (0..n).map(|i| 0.3 * i as f64 + rng.gen::<f64>() * 0.1).collect();
            ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let set = SampleSet { ts, t_end: 0.3 * n as f64 + 0.2, mode: SampleMode::Stratified };
            let sigmas: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 4.0).collect();
            let colors: Vec<[f64; 3]> =
                (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
            let cbar = [rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5];
            let mbar = rng.gen::<f64>() - 0.5;
            let loss = |sig: &[f64], col: &[[f64; 3]]| {
                let out = composite_ray(&set, sig, col);
                cbar[0] * out.color[0] + cbar[1] * out.color[1] + cbar[2] * out.color[2]
                    + mbar * out.mask
            };
            let (sbar, cbar_out) = composite_backward(&set, &sigmas, &colors, cbar, mbar);
            let h = 1e-6;
            for i in 0..n {
                let mut plus = sigmas.clone();
                plus[i] += h;
                let mut minus = sigmas.clone();
                minus[i] -= h;
                let fd = (loss(&plus, &colors) - loss(&minus, &colors)) / (2.0 * h);
                assert!(
                    (fd - sbar[i]).abs() < 1e-6 * fd.abs().max(sbar[i].abs()).max(1.0),
                    "sigma {}: {} vs {}",
                    i,
                    sbar[i],
                    fd
                );
                for ch in 0..3 {
                    let mut cp = colors.clone();
                    cp[i][ch] += h;
                    let mut cm = colors.clone();
                    cm[i][ch] -= h;
                    let fd = (loss(&sigmas, &cp) - loss(&sigmas, &cm)) / (2.0 * h);
                    assert!((fd - cbar_out[i][ch]).abs() < 1e-6 * fd.abs().max(1.0));
                }
            }
        }
    }

    /// Owned fixture bundling everything a FrameContext borrows.
    pub struct CtxFixture {
        pub template: Arc<SkinnedTemplate>,
        pub transforms: JointTransforms,
        pub posed: PosedMesh,
        pub vocab: TexVocab,
        pub features: PoseFeatures,
        pub params: FieldParams,
        pub pose: Pose,
    }

    impl CtxFixture {
        pub fn ctx(&self) -> FrameContext<'_> {
            FrameContext::new(
                &self.template,
                &self.transforms,
                &self.posed,
                &self.vocab,
                &self.features,
                &self.params,
                &self.pose,
                0.1,
            )
        }
    }

    pub fn plane_fixture() -> CtxFixture {
        let template = Arc::new(crate::testutil::quad_template());
        let pose = Pose::identity();
        let transforms = forward_kinematics(&template, &pose).unwrap();
        let posed = lbs_pose_mesh(&template, &transforms);
        let mut rng = rand::rngs::StdRng::seed_from_u64(2);
        let poses: Vec<Pose> = (0..3)
            .map(|i| {
                let mut p = Pose::identity();
                p.theta[0] = [0.0, 0.0, 0.2 * i as f64];
                p.frame_id = Some(i as u64);
                p
            })
            .collect();
        let feats: Vec<FeatureMap> = poses
            .iter()
            .map(|p| {
                let mut f = FeatureMap::zeros(8, 16, p.frame_id.unwrap());
                f.values.iter_mut().for_each(|v| *v = rng.gen());
                f
            })
            .collect();
        let vocab =
            TexVocab::build(&poses, feats, PartitionTable::standard(), 2, 1.0).unwrap();
        let features = PoseFeatures::for_pose(&vocab, &pose).unwrap();
        // opaque flat wall at z = 0.55 facing the camera; sharp density
        let mut params =
            plane_field(FieldConfig::default(), Vec3::new(0.0, 0.0, -1.0), 0.55).unwrap();
        params.log_beta = 0.005f64.ln();
        CtxFixture { template, transforms, posed, vocab, features, params, pose }
    }

    #[test]
    fn render_view_matches_per_pixel_composition() {
        let fixture = plane_fixture();
        let ctx = fixture.ctx();
        let cam = test_camera(8);
        let seed = 99;
        let view =
            render_view(&ctx, &cam, &RenderMode::Stratified { count: 16 }, seed, true).unwrap();
        for row in 0..8 {
            for col in 0..8 {
                let idx = row * 8 + col;
                let (origin, dir) = cam.pixel_ray(row, col).unwrap();
                let mut ray = Ray::new(origin, dir);
                let expected = if ray.clip_to_aabb(&ctx.aabb) {
                    let mut rng = pixel_rng(seed, idx as u64);
                    let samples =
                        sample_stratified(ray.t_near, ray.t_far, 16, Some(&mut rng));
                    eval_ray(&ctx, &ray, &samples, true).unwrap()
                } else {
                    RenderOutput::background()
                };
                assert_eq!(view.color.data[idx], expected.color);
                assert_eq!(view.mask.data[idx], expected.mask);
            }
        }
    }

    #[test]
    fn empty_field_renders_black_with_zero_mask() {
        let mut fixture = plane_fixture();
        // positive SDF everywhere
        fixture.params =
            plane_field(FieldConfig::default(), Vec3::new(0.0, 0.0, -1.0), 50.0).unwrap();
        let ctx = fixture.ctx();
        let cam = test_camera(8);
        let view =
            render_view(&ctx, &cam, &RenderMode::Stratified { count: 8 }, 0, false).unwrap();
        assert!(view.color.data.iter().all(|p| *p == [0.0; 3]));
        assert!(view.mask.data.iter().all(|m| *m < 1e-12));
    }

    #[test]
    fn render_view_dimensions_match_camera() {
        let fixture = plane_fixture();
        let ctx = fixture.ctx();
        let cam = test_camera(6);
        let view =
            render_view(&ctx, &cam, &RenderMode::Stratified { count: 4 }, 0, false).unwrap();
        assert_eq!(view.color.width, 6);
        assert_eq!(view.color.height, 6);
        assert_eq!(view.depth.len(), 36);
    }

    #[test]
    fn guided_mode_uses_depth_and_fallback() {
        let fixture = plane_fixture();
        let ctx = fixture.ctx();
        let cam = test_camera(8);
        // depth map covering the left half at the plane depth (z = 0.55
        // in front of the camera at z = -2 means camera depth 2.55)
        let mut depth = DepthMap::background(8, 8);
        for r in 0..8 {
            for c in 0..4 {
                depth.depths[r * 8 + c] = 2.55;
            }
        }
        let mode = RenderMode::Guided {
            depth: &depth,
            count: 8,
            delta: 0.05,
            fallback_radius: 0.05,
            fallback_count: 8,
            fallback_dilation: 1,
        };
        let view = render_view(&ctx, &cam, &mode, 1, false).unwrap();
        // covered pixels near the plane should be opaque
        assert!(view.mask.get(4, 2) > 0.9, "mask {}", view.mask.get(4, 2));
        // far-right pixels have no depth and no nearby coverage
        assert!(view.mask.get(4, 7) == 0.0);
    }
}
