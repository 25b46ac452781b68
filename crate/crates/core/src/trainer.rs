//! Training: loss terms with exact gradients through the quadrature,
//! Adam with stepped learning-rate decay, and the three-stage schedule
//! (stratified box sampling -> depth-guided sampling -> patch loss).
//!
//! Gradient accumulation is block-reduced in a fixed order, so results
//! are bitwise reproducible regardless of worker count.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rayon::prelude::*;

use crate::body_model::{forward_kinematics, lbs_pose_mesh, JointTransforms, Pose, PosedMesh};
use crate::bvh::TriangleBvh;
use crate::geometry_extract::{extract_sdf_surface, rasterize_depth, BandMesh, DepthMap, TriangleMesh};
use crate::imgio::{ImageGrayF, ImageRgbF};
use crate::metrics;
use crate::neural_field::{
    field_backward_batch, save_checkpoint, sdf_to_density, sdf_to_density_grad, BackwardScratch,
    EvalCache, FieldConfig, FieldParams, GradBuffer, OptimMoments, OutputBar,
};
use crate::pose_vocab::{PoseFeatures, TexVocab};
use crate::renderer::{
    composite_backward, composite_ray, pixel_rng, sample_depth_band, sample_stratified,
    sample_vertex_balls, FrameContext, Ray, RenderOutput, SampleSet,
};
use crate::synthetic_scene::SceneBundle;
use crate::texture_atlas::gaussian_blur;
use crate::{Error, Result, Vec3};

/// Loss term weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub color: f64,
    pub mask: f64,
    pub eikonal: f64,
    pub perceptual: f64,
}

impl LossWeights {
    pub fn stage1() -> Self {
        Self { color: 1.0, mask: 1.0, eikonal: 0.1, perceptual: 0.0 }
    }
}

/// All knobs of a training run.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: u64,
    /// Stage 1 covers epochs 1..=stage1_end (1-based).
    pub stage1_end: usize,
    pub stage2_end: usize,
    pub rays_per_step: usize,
    pub in_mask_fraction: f64,
    pub stratified_samples: usize,
    pub guided_samples: usize,
    pub patch_size: usize,
    pub lambda_perceptual_stage3: f64,
    pub stage1_weights: LossWeights,
    pub depth_band: f64,
    pub ball_radius: f64,
    pub box_padding: f64,
    pub depth_grid_res: usize,
    /// Steps per epoch; derived from the pixel count when absent.
    pub steps_per_epoch: Option<usize>,
    pub seed: u64,
    pub deterministic: bool,
    /// Mask loss uses |d| instead of d^2 when set.
    pub mask_loss_absolute: bool,
    pub checkpoint_every: usize,
    pub eval_every: usize,
    /// Stop quadrature once transmittance drops below the threshold.
    pub early_stop: bool,
    pub eikonal_samples_per_ray: usize,
    pub fallback_dilation: usize,
    /// Learning-rate multiplier for the log-space density scale; the
    /// single beta parameter needs far larger steps than the weights to
    /// sharpen the surface within a desk-scale budget.
    pub beta_lr_scale: f64,
    /// Anneal beta on a fixed log-linear schedule down to `beta_target`
    /// before handing it to the optimizer. Early in training the loss
    /// prefers a fuzzy surface (beta grows), which caps the achievable
    /// opacity; the anneal walks it through that plateau.
    pub beta_anneal: bool,
    pub beta_target: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch: 4,
            lr: 5e-4,
            lr_decay: 0.9,
            lr_decay_every: 20_000,
            stage1_end: 6,
            stage2_end: 20,
            rays_per_step: 1024,
            in_mask_fraction: 0.8,
            stratified_samples: 64,
            guided_samples: 32,
            patch_size: 64,
            lambda_perceptual_stage3: 0.1,
            stage1_weights: LossWeights::stage1(),
            depth_band: 0.05,
            ball_radius: 0.05,
            box_padding: 0.1,
            depth_grid_res: 128,
            steps_per_epoch: None,
            seed: 0,
            deterministic: true,
            mask_loss_absolute: false,
            checkpoint_every: 0,
            eval_every: 0,
            early_stop: true,
            eikonal_samples_per_ray: 1,
            fallback_dilation: 2,
            beta_lr_scale: 10.0,
            beta_anneal: true,
            beta_target: 0.006,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.stage1_end < self.stage2_end && self.stage2_end <= self.epochs) {
            return Err(Error::Invariant(format!(
                "stage bounds must satisfy stage1 < stage2 <= epochs ({} < {} <= {})",
                self.stage1_end, self.stage2_end, self.epochs
            )));
        }
        if !(0.0..=1.0).contains(&self.in_mask_fraction) {
            return Err(Error::Invariant("in_mask_fraction outside [0,1]".into()));
        }
        Ok(())
    }

    /// 1-based training stage of a 1-based epoch.
    pub fn stage_of_epoch(&self, epoch: usize) -> usize {
        if epoch <= self.stage1_end {
            1
        } else if epoch <= self.stage2_end {
            2
        } else {
            3
        }
    }

    pub fn weights_for_stage(&self, stage: usize) -> LossWeights {
        match stage {
            1 => self.stage1_weights,
            2 => LossWeights { eikonal: 0.0, ..self.stage1_weights },
            _ => LossWeights {
                eikonal: 0.0,
                perceptual: self.lambda_perceptual_stage3,
                ..self.stage1_weights
            },
        }
    }

    /// Learning rate after `step` optimizer steps (1-based): decays by
    /// `lr_decay` every `lr_decay_every` steps.
    pub fn lr_at_step(&self, step: u64) -> f64 {
        self.lr * self.lr_decay.powi((step / self.lr_decay_every) as i32)
    }
}

/// Per-term loss values; total is the exact weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub color: f64,
    pub mask: f64,
    pub eikonal: f64,
    pub perceptual: f64,
}

/// Gaussian widths of the perceptual patch pyramid.
pub const PERCEPTUAL_SIGMAS: [f64; 3] = [1.0, 2.0, 4.0];

/// Multi-scale patch discrepancy: mean over pyramid levels of the MSE
/// between Gaussian-blurred rendered and ground-truth patches.
pub fn perceptual_loss(rendered: &ImageRgbF, target: &ImageRgbF) -> Result<f64> {
    if rendered.width != target.width || rendered.height != target.height {
        return Err(Error::ShapeMismatch("perceptual patches differ in size".into()));
    }
    let (w, h) = (rendered.width, rendered.height);
    let mut total = 0.0;
    for sigma in PERCEPTUAL_SIGMAS {
        let mut level = 0.0;
        for ch in 0..3 {
            let a: Vec<f64> = rendered.data.iter().map(|p| p[ch]).collect();
            let b: Vec<f64> = target.data.iter().map(|p| p[ch]).collect();
            let ba = gaussian_blur(&a, w, h, sigma);
            let bb = gaussian_blur(&b, w, h, sigma);
            level += ba.iter().zip(bb.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        }
        total += level / (w * h * 3) as f64;
    }
    Ok(total / PERCEPTUAL_SIGMAS.len() as f64)
}

/// Exact adjoint of the clamped-border separable Gaussian blur.
fn gaussian_blur_adjoint(upstream: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
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
    // forward was rows then columns; adjoint scatters columns then rows
    let mut tmp = vec![0.0; width * height];
    for i in 0..height {
        for j in 0..width {
            let up = upstream[i * width + j];
            for (ki, kv) in kernel.iter().enumerate() {
                let ii = (i as i64 + ki as i64 - radius).clamp(0, height as i64 - 1) as usize;
                tmp[ii * width + j] += kv * up;
            }
        }
    }
    let mut out = vec![0.0; width * height];
    for i in 0..height {
        for j in 0..width {
            let up = tmp[i * width + j];
            for (ki, kv) in kernel.iter().enumerate() {
                let jj = (j as i64 + ki as i64 - radius).clamp(0, width as i64 - 1) as usize;
                out[i * width + jj] += kv * up;
            }
        }
    }
    out
}

/// d(perceptual)/d(rendered pixel), matching [`perceptual_loss`] exactly.
pub fn perceptual_grad(rendered: &ImageRgbF, target: &ImageRgbF) -> Result<Vec<[f64; 3]>> {
    if rendered.width != target.width || rendered.height != target.height {
        return Err(Error::ShapeMismatch("perceptual patches differ in size".into()));
    }
    let (w, h) = (rendered.width, rendered.height);
    let mut grad = vec![[0.0; 3]; w * h];
    let scale = 2.0 / (w * h * 3) as f64 / PERCEPTUAL_SIGMAS.len() as f64;
    for sigma in PERCEPTUAL_SIGMAS {
        for ch in 0..3 {
            let a: Vec<f64> = rendered.data.iter().map(|p| p[ch]).collect();
            let b: Vec<f64> = target.data.iter().map(|p| p[ch]).collect();
            let ba = gaussian_blur(&a, w, h, sigma);
            let bb = gaussian_blur(&b, w, h, sigma);
            let diff: Vec<f64> = ba.iter().zip(bb.iter()).map(|(x, y)| scale * (x - y)).collect();
            let up = gaussian_blur_adjoint(&diff, w, h, sigma);
            for (g, u) in grad.iter_mut().zip(up.iter()) {
                g[ch] += u;
            }
        }
    }
    Ok(grad)
}

/// Assembles the per-term losses and their exact weighted total.
/// Color and mask are means over rays; the eikonal term is the mean of
/// (|grad| - 1)^2 over the supplied gradients.
pub fn compute_losses(
    rendered: &[RenderOutput],
    gt_colors: &[[f64; 3]],
    gt_masks: &[f64],
    eikonal_grads: &[Vec3],
    patch_pair: Option<(&ImageRgbF, &ImageRgbF)>,
    weights: &LossWeights,
    mask_absolute: bool,
) -> Result<LossValues> {
    if rendered.len() != gt_colors.len() || rendered.len() != gt_masks.len() {
        return Err(Error::ShapeMismatch(format!(
            "loss batch sizes differ: {} rendered, {} colors, {} masks",
            rendered.len(),
            gt_colors.len(),
            gt_masks.len()
        )));
    }
    let n = rendered.len().max(1) as f64;
    let mut color = 0.0;
    let mut mask = 0.0;
    for ((out, gt_c), gt_m) in rendered.iter().zip(gt_colors.iter()).zip(gt_masks.iter()) {
        for ch in 0..3 {
            let d = out.color[ch] - gt_c[ch];
            color += d * d;
        }
        let dm = out.mask - gt_m;
        mask += if mask_absolute { dm.abs() } else { dm * dm };
    }
    color /= n;
    mask /= n;
    let eikonal = if eikonal_grads.is_empty() {
        0.0
    } else {
        eikonal_grads.iter().map(|g| (g.norm() - 1.0).powi(2)).sum::<f64>()
            / eikonal_grads.len() as f64
    };
    let perceptual = match patch_pair {
        Some((a, b)) => perceptual_loss(a, b)?,
        None => 0.0,
    };
    let total = weights.color * color
        + weights.mask * mask
        + weights.eikonal * eikonal
        + weights.perceptual * perceptual;
    Ok(LossValues { total, color, mask, eikonal, perceptual })
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment buffers plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    pub skipped: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &FieldParams) -> Self {
        Self {
            step: 0,
            skipped: 0,
            m: params.slices().iter().map(|s| vec![0.0; s.len()]).collect(),
            v: params.slices().iter().map(|s| vec![0.0; s.len()]).collect(),
        }
    }

    pub fn to_moments(&self) -> OptimMoments {
        OptimMoments { step: self.step, m: self.m.clone(), v: self.v.clone() }
    }

    pub fn from_moments(m: OptimMoments) -> Self {
        Self { step: m.step, skipped: 0, m: m.m, v: m.v }
    }
}

/// Standard bias-corrected Adam update. Returns false (and counts the
/// skip) when any gradient is non-finite; the parameters stay untouched.
pub fn adam_step(
    params: &mut FieldParams,
    grads: &GradBuffer,
    state: &mut AdamState,
    lr: f64,
) -> bool {
    adam_step_scaled(params, grads, state, lr, 1.0)
}

/// Adam with a separate learning-rate scale for the final (log-beta)
/// parameter slice.
pub fn adam_step_scaled(
    params: &mut FieldParams,
    grads: &GradBuffer,
    state: &mut AdamState,
    lr: f64,
    beta_lr_scale: f64,
) -> bool {
    if !grads.is_finite() {
        state.skipped += 1;
        return false;
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    {
        let mut p_slices = params.slices_mut();
        let n_slices = p_slices.len();
        let g_slices = grads.slices();
        for (si,ial) in p_slices
            .iter_mut()
            .zip(g_slices.iter())
            .zip(state.m.iter_mut())
            .zip(state.v.iter_mut())
            .enumerate()
        {
            let (((p, g), m), v) = ial;
            let slice_lr = if si + 1 == n_slices { lr * beta_lr_scale } else { lr };
            for i in 0..p.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= slice_lr * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
    }
    // keep the density scale in a sane range
    params.log_beta = params.log_beta.max(crate::neural_field::BETA_MIN.ln());
    true
}

/// PSNR and SSIM of a rendered view against ground truth.
pub fn evaluate_metrics(rendered: &ImageRgbF, target: &ImageRgbF) -> Result<(f64, f64)> {
    Ok((metrics::psnr(rendered, target)?, metrics::ssim(rendered, target)?))
}

/// Immutable per-frame derived data.
pub struct FrameData {
    pub pose: Pose,
    pub transforms: JointTransforms,
    pub posed: PosedMesh,
    pub features: PoseFeatures,
}

impl FrameData {
    pub fn build(scene: &SceneBundle, vocab: &TexVocab, frame: usize) -> Result<Self> {
        let pose = scene.poses[frame].clone();
        let transforms = forward_kinematics(&scene.template, &pose)?;
        let posed = lbs_pose_mesh(&scene.template, &transforms);
        let features = PoseFeatures::for_pose(vocab, &pose)?;
        Ok(Self { pose, transforms, posed, features })
    }
}

/// All images, masks and per-frame data of the training split.
pub struct TrainingData {
    pub images: Vec<Vec<ImageRgbF>>,
    pub masks: Vec<Vec<ImageGrayF>>,
    /// Pixel indices with mask > 0.5, per (frame, cam).
    pub mask_pixels: Vec<Vec<Vec<u32>>>,
    pub frames: Vec<FrameData>,
}

impl TrainingData {
    pub fn load(scene: &SceneBundle, vocab: &TexVocab) -> Result<Self> {
        let t1 = scene.train_frames;
        let mut images = Vec::with_capacity(t1);
        let mut masks = Vec::with_capacity(t1);
        let mut mask_pixels = Vec::with_capacity(t1);
        let mut frames = Vec::with_capacity(t1);
        for f in 0..t1 {
            let mut row_i = Vec::new();
            let mut row_m = Vec::new();
            let mut row_px = Vec::new();
            for c in 0..scene.cameras.len() {
                let img = scene.load_image(f, c)?;
                let mask = scene.load_mask(f, c)?;
                let px: Vec<u32> = mask
                    .data
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| **v > 0.5)
                    .map(|(i, _)| i as u32)
                    .collect();
                row_i.push(img);
                row_m.push(mask);
                row_px.push(px);
            }
            images.push(row_i);
            masks.push(row_m);
            mask_pixels.push(row_px);
            frames.push(FrameData::build(scene, vocab, f)?);
        }
        Ok(Self { images, masks, mask_pixels, frames })
    }
}

/// One training ray: a pixel of a (frame, camera) pair.
#[derive(Clone, Copy, Debug)]
pub struct RayJob {
    pub frame: usize,
    pub cam: usize,
    pub pixel: usize,
}

/// The sampled work of one optimization step.
pub struct StepPlan {
    pub rays: Vec<RayJob>,
    /// Patch origin and side for stage 3: (frame, cam, row0, col0, size).
    pub patch: Option<(usize, usize, usize, usize, usize)>,
    /// Seed mixed into per-ray jitter streams.
    pub jitter_seed: u64,
}

/// Draws the ray set (and stage-3 patch) for one step: per batch item,
/// `in_mask_fraction` of the rays come from mask-interior pixels.
pub fn sample_step_plan(
    data: &TrainingData,
    cfg: &TrainConfig,
    stage: usize,
    step: u64,
    rng: &mut rand::rngs::StdRng,
) -> StepPlan {
    let n_frames = data.frames.len();
    let n_cams = data.images[0].len();
    let mut rays = Vec::new();
    let mut patch = None;
    if stage < 3 {
        let per_item = (cfg.rays_per_step / cfg.batch).max(1);
        for _ in 0..cfg.batch {
            let frame = rng.gen_range(0..n_frames);
            let cam = rng.gen_range(0..n_cams);
            let img = &data.images[frame][cam];
            let total_px = img.width * img.height;
            let inside = &data.mask_pixels[frame][cam];
            let n_in = ((cfg.in_mask_fraction * per_item as f64).ceil() as usize).min(per_item);
            for _ in 0..n_in {
                let pixel = if inside.is_empty() {
                    rng.gen_range(0..total_px)
                } else {
                    inside[rng.gen_range(0..inside.len())] as usize
                };
                rays.push(RayJob { frame, cam, pixel });
            }
            for _ in n_in..per_item {
                rays.push(RayJob { frame, cam, pixel: rng.gen_range(0..total_px) });
            }
        }
    } else {
        let frame = rng.gen_range(0..n_frames);
        let cam = rng.gen_range(0..n_cams);
        let img = &data.images[frame][cam];
        let size = cfg.patch_size.min(img.width).min(img.height);
        // bias the patch toward the mask bounding box
        let inside = &data.mask_pixels[frame][cam];
        let (r0, c0) = if inside.is_empty() {
            (rng.gen_range(0..=img.height - size), rng.gen_range(0..=img.width - size))
        } else {
            let anchor = inside[rng.gen_range(0..inside.len())] as usize;
            let ar = anchor / img.width;
            let ac = anchor % img.width;
            (
                ar.saturating_sub(size / 2).min(img.height - size),
                ac.saturating_sub(size / 2).min(img.width - size),
            )
        };
        for r in r0..r0 + size {
            for c in c0..c0 + size {
                rays.push(RayJob { frame, cam, pixel: r * img.width + c });
            }
        }
        patch = Some((frame, cam, r0, c0, size));
    }
    StepPlan { rays, patch, jitter_seed: splitmix(cfg.seed ^ step.wrapping_mul(0x9e37)) }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Per-frame depth maps driving guided sampling; empty until the stage-1
/// boundary extraction runs.
pub type DepthCaches = Vec<Vec<DepthMap>>;

/// Extracts the field surface for every training frame (band-limited
/// around the posed template) and rasterizes a depth map per camera.
pub fn build_depth_caches(
    scene: &SceneBundle,
    data: &TrainingData,
    vocab: &TexVocab,
    params: &FieldParams,
    cfg: &TrainConfig,
) -> Result<DepthCaches> {
    let mut caches = Vec::with_capacity(data.frames.len());
    for fd in &data.frames {
        let mesh = extract_frame_mesh(scene, fd, vocab, params, cfg)?;
        let mut per_cam = Vec::with_capacity(scene.cameras.len());
        for cam in &scene.cameras {
            per_cam.push(rasterize_depth(&mesh, cam)?);
        }
        caches.push(per_cam);
    }
    Ok(caches)
}

/// Marching-cubes surface of the field for one frame, evaluated only in a
/// band around the posed template.
pub fn extract_frame_mesh(
    scene: &SceneBundle,
    fd: &FrameData,
    vocab: &TexVocab,
    params: &FieldParams,
    cfg: &TrainConfig,
) -> Result<TriangleMesh> {
    let ctx = FrameContext::new(
        &scene.template,
        &fd.transforms,
        &fd.posed,
        vocab,
        &fd.features,
        params,
        &fd.pose,
        cfg.box_padding,
    );
    let band = cfg.box_padding.max(0.1);
    let bounds_box = fd.posed.surface().bounds().padded(band);
    let bvh = TriangleBvh::build(&fd.posed.vertices, &scene.template.faces);
    let band_mesh =
        BandMesh { vertices: &fd.posed.vertices, faces: &scene.template.faces, bvh: &bvh };
    extract_sdf_surface(
        |p| ctx.sdf_at(p),
        (bounds_box.min, bounds_box.max),
        cfg.depth_grid_res,
        0.0,
        Some((&band_mesh, band)),
    )
}

/// Per-ray products of the forward pass that the loss needs.
struct RayForward {
    samples: SampleSet,
    sigmas: Vec<f64>,
    colors: Vec<[f64; 3]>,
    out: RenderOutput,
    /// Index of the quadrature sample carrying the eikonal term; may lie
    /// beyond the truncation point, in which case `eik_extra` is set and
    /// the sample was evaluated standalone into the last pool slot.
    eik_sample: Option<usize>,
    eik_extra: bool,
    eik_grad: Option<Vec3>,
}

/// Builds the sample set for one ray job under the stage's strategy.
fn sample_ray(
    ctx: &FrameContext,
    cam: &crate::texture_atlas::Camera,
    job: &RayJob,
    stage: usize,
    cfg: &TrainConfig,
    depth: Option<&DepthMap>,
    gt_mask_on: bool,
    rng: &mut rand::rngs::StdRng,
) -> Result<(Ray, SampleSet)> {
    let row = job.pixel / cam.width;
    let col = job.pixel % cam.width;
    let (origin, dir) = cam.pixel_ray(row, col)?;
    let mut ray = Ray::new(origin, dir);
    let samples = if stage == 1 || depth.is_none() {
        if ray.clip_to_aabb(&ctx.aabb) {
            sample_stratified(ray.t_near, ray.t_far, cfg.stratified_samples, Some(rng))
        } else {
            SampleSet::empty(crate::renderer::SampleMode::Stratified)
        }
    } else {
        let depth = depth.unwrap();
        if depth.covered(row, col) {
            let dir_cam_z = (cam.rot() * dir).z;
            sample_depth_band(
                depth.get(row, col) / dir_cam_z,
                cfg.depth_band,
                cfg.guided_samples,
                Some(rng),
            )
        } else if gt_mask_on || depth.covered_near(row, col, cfg.fallback_dilation) {
            sample_vertex_balls(
                origin,
                dir,
                &ctx.posed.vertices,
                cfg.ball_radius,
                cfg.guided_samples,
                Some(rng),
            )
        } else {
            SampleSet::empty(crate::renderer::SampleMode::DepthGuided)
        }
    };
    Ok((ray, samples))
}

/// Whether a ray job will produce any quadrature samples. Depends only on
/// geometry (never on field parameters or jitter), so the eikonal-term
/// count can be fixed before any evaluation.
fn ray_has_samples(
    ctx: &FrameContext,
    cam: &crate::texture_atlas::Camera,
    job: &RayJob,
    stage: usize,
    cfg: &TrainConfig,
    depth: Option<&DepthMap>,
    gt_mask_on: bool,
) -> Result<bool> {
    let row = job.pixel / cam.width;
    let col = job.pixel % cam.width;
    let (origin, dir) = cam.pixel_ray(row, col)?;
    if stage == 1 || depth.is_none() {
        let mut ray = Ray::new(origin, dir);
        return Ok(ray.clip_to_aabb(&ctx.aabb));
    }
    let depth = depth.unwrap();
    if depth.covered(row, col) {
        return Ok(true);
    }
    if gt_mask_on || depth.covered_near(row, col, cfg.fallback_dilation) {
        let r2 = cfg.ball_radius * cfg.ball_radius;
        return Ok(ctx.posed.vertices.iter().any(|v| {
            let oc = origin - v;
            let b = oc.dot(&dir);
            let disc = b * b - (oc.norm_squared() - r2);
            disc > 0.0 && -b + disc.sqrt() > 1e-6
        }));
    }
    Ok(false)
}

/// Forward pass of one ray. When `cache_pool` is given, per-sample caches
/// are retained for the backward pass. The eikonal sample (if requested)
/// is always evaluated, even past the early-stop truncation, so the
/// number of eikonal terms stays independent of the field state.
#[allow(clippy::too_many_arguments)]
fn forward_ray(
    ctx: &FrameContext,
    ray: &Ray,
    samples: &SampleSet,
    eik_sample: Option<usize>,
    cfg: &TrainConfig,
    mut cache_pool: Option<&mut Vec<EvalCache>>,
    feat: &mut [f64],
) -> Result<RayForward> {
    let n = samples.ts.len();
    let mut sigmas = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    let beta = ctx.params.beta();
    let mut transmittance = 1.0;
    let mut eik_grad = None;
    let mut scratch = EvalCache::new();
    for i in 0..n {
        let x = ray.at(samples.ts[i]);
        let grad_here = eik_sample == Some(i);
        let cache: &mut EvalCache = match cache_pool.as_deref_mut() {
            Some(p) => {
                if p.len() <= i {
                    p.push(EvalCache::new());
                }
                &mut p[i]
            }
            None => &mut scratch,
        };
        ctx.eval_point(x, ray.dir, feat, cache, grad_here)?;
        if grad_here {
            eik_grad = Some(cache.grad_x);
        }
        let sigma = sdf_to_density(cache.out.sdf, beta);
        sigmas.push(sigma);
        colors.push(cache.out.color);
        let dt = if i + 1 < n { samples.ts[i + 1] - samples.ts[i] } else { samples.t_end - samples.ts[i] };
        transmittance *= (-sigma * dt.max(0.0)).exp();
        if cfg.early_stop && transmittance < crate::renderer::EARLY_STOP_TRANSMITTANCE {
            break;
        }
    }
    // evaluate a truncated-away eikonal sample standalone
    let mut eik_extra = false;
    if let Some(ei) = eik_sample {
        if ei >= sigmas.len() {
            let x = ray.at(samples.ts[ei]);
            let cache: &mut EvalCache = match cache_pool.as_deref_mut() {
                Some(p) => {
                    let slot = sigmas.len();
                    if p.len() <= slot {
                        p.push(EvalCache::new());
                    }
                    &mut p[slot]
                }
                None => &mut scratch,
            };
            ctx.eval_point(x, ray.dir, feat, cache, true)?;
            eik_grad = Some(cache.grad_x);
            eik_extra = true;
        }
    }
    let truncated = SampleSet {
        ts: samples.ts[..sigmas.len()].to_vec(),
        t_end: if sigmas.len() == n { samples.t_end } else { samples.ts[sigmas.len()] },
        mode: samples.mode,
    };
    let out = composite_ray(&truncated, &sigmas, &colors);
    Ok(RayForward { samples: truncated, sigmas, colors, out, eik_sample, eik_extra, eik_grad })
}

/// One block's partial results, reduced in fixed block order.
struct BlockResult {
    grads: Option<GradBuffer>,
    rendered: Vec<(usize, RenderOutput)>,
    eik_grads: Vec<Vec3>,
}

/// Runs the forward (and optionally backward) pass for one step plan.
/// Per-ray upstream gradients follow the loss formulas of
/// [`compute_losses`] exactly; the perceptual upstream is added per pixel
/// when a patch is present. Gradient accumulation is block-local with a
/// sequential fixed-order reduction.
#[allow(clippy::too_many_arguments)]
pub fn training_step(
    scene: &SceneBundle,
    data: &TrainingData,
    vocab: &TexVocab,
    params: &FieldParams,
    cfg: &TrainConfig,
    plan: &StepPlan,
    stage: usize,
    depth_caches: Option<&DepthCaches>,
    with_grads: bool,
) -> Result<(LossValues, Option<GradBuffer>)> {
    let weights = cfg.weights_for_stage(stage);
    let n_rays = plan.rays.len().max(1) as f64;
    let contexts: Vec<FrameContext> = data
        .frames
        .iter()
        .map(|fd| {
            FrameContext::new(
                &scene.template,
                &fd.transforms,
                &fd.posed,
                vocab,
                &fd.features,
                params,
                &fd.pose,
                cfg.box_padding,
            )
        })
        .collect();

    let gt: Vec<([f64; 3], f64)> = plan
        .rays
        .iter()
        .map(|job| {
            let img = &data.images[job.frame][job.cam];
            let mask = &data.masks[job.frame][job.cam];
            (img.data[job.pixel], mask.data[job.pixel])
        })
        .collect();

    // fix the eikonal-term count up front from sampling geometry alone
    let use_eik = weights.eikonal != 0.0 && cfg.eikonal_samples_per_ray > 0;
    let mut eik_count = 0usize;
    if use_eik {
        for (ridx, job) in plan.rays.iter().enumerate() {
            let depth = depth_caches.map(|d| &d[job.frame][job.cam]);
            if ray_has_samples(
                &contexts[job.frame],
                &scene.cameras[job.cam],
                job,
                stage,
                cfg,
                depth,
                gt[ridx].1 > 0.5,
            )? {
                eik_count += 1;
            }
        }
    }
    let eik_scale = weights.eikonal / eik_count.max(1) as f64;

    const BLOCK: usize = 64;
    let blocks: Vec<(usize, &[RayJob])> = plan
        .rays
        .chunks(BLOCK)
        .enumerate()
        .map(|(bi, ch)| (bi * BLOCK, ch))
        .collect();

    // one pass over all rays; collects gradients when requested, with the
    // optional extra per-pixel color upstream (perceptual term)
    let run_pass = |collect_grads: bool,
                    extra_color_upstream: Option<&Vec<[f64; 3]>>|
     -> Result<Vec<BlockResult>> {
        let results: Vec<Result<BlockResult>> = blocks
            .par_iter()
            .map(|(base, jobs)| {
                let mut grads = collect_grads.then(|| GradBuffer::zeros_like(params));
                let mut rendered = Vec::with_capacity(jobs.len());
                let mut eik_grads = Vec::new();
                let mut cache_pool: Vec<EvalCache> = Vec::new();
                let mut scratch = BackwardScratch::default();
                let mut feat = vec![0.0; vocab.channels()];
                let beta = params.beta();
                for (off, job) in jobs.iter().enumerate() {
                    let ridx = base + off;
                    let ctx = &contexts[job.frame];
                    let cam = &scene.cameras[job.cam];
                    let mut rng = pixel_rng(plan.jitter_seed, ridx as u64);
                    let depth = depth_caches.map(|d| &d[job.frame][job.cam]);
                    let gt_on = gt[ridx].1 > 0.5;
                    let (ray, samples) =
                        sample_ray(ctx, cam, job, stage, cfg, depth, gt_on, &mut rng)?;
                    if samples.is_empty() {
                        rendered.push((ridx, RenderOutput::background()));
                        continue;
                    }
                    let eik_sample = use_eik.then(|| rng.gen_range(0..samples.ts.len()));
                    let fwd = forward_ray(
                        ctx,
                        &ray,
                        &samples,
                        eik_sample,
                        cfg,
                        collect_grads.then_some(&mut cache_pool),
                        &mut feat,
                    )?;
                    if let Some(g) = fwd.eik_grad {
                        eik_grads.push(g);
                    }
                    if let Some(gbuf) = grads.as_mut() {
                        let mut cbar = [0.0; 3];
                        for ch in 0..3 {
                            cbar[ch] = weights.color * 2.0 / n_rays
                                * (fwd.out.color[ch] - gt[ridx].0[ch]);
                        }
                        if let Some(up) = extra_color_upstream {
                            for ch in 0..3 {
                                cbar[ch] += up[ridx][ch];
                            }
                        }
                        let dm = fwd.out.mask - gt[ridx].1;
                        let mbar = if cfg.mask_loss_absolute {
                            weights.mask / n_rays
                                * if dm > 0.0 {
                                    1.0
                                } else if dm < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                        } else {
                            weights.mask * 2.0 / n_rays * dm
                        };
                        let (sigma_bar, color_bar) = composite_backward(
                            &fwd.samples,
                            &fwd.sigmas,
                            &fwd.colors,
                            cbar,
                            mbar,
                        );
                        let eik_upstream = |g: Vec3| {
                            let gn = g.norm();
                            if gn > 0.0 {
                                g * (eik_scale * 2.0 * (gn - 1.0) / gn)
                            } else {
                                Vec3::zeros()
                            }
                        };
                        let mut items: Vec<(&EvalCache, OutputBar)> =
                            Vec::with_capacity(fwd.sigmas.len() + 1);
                        for i in 0..fwd.sigmas.len() {
                            let cache = &cache_pool[i];
                            let (dds, ddb) = sdf_to_density_grad(cache.out.sdf, beta);
                            let gbar = (!fwd.eik_extra && fwd.eik_sample == Some(i))
                                .then(|| eik_upstream(fwd.eik_grad.expect("eik grad recorded")));
                            items.push((
                                cache,
                                OutputBar {
                                    sdf: sigma_bar[i] * dds,
                                    color: color_bar[i],
                                    grad_x: gbar,
                                },
                            ));
                            gbuf.log_beta += sigma_bar[i] * ddb * beta;
                        }
                        if fwd.eik_extra {
                            items.push((
                                &cache_pool[fwd.sigmas.len()],
                                OutputBar {
                                    sdf: 0.0,
                                    color: [0.0; 3],
                                    grad_x: Some(eik_upstream(
                                        fwd.eik_grad.expect("eik grad recorded"),
                                    )),
                                },
                            ));
                        }
                        field_backward_batch(params, &items, gbuf, &mut scratch);
                    }
                    rendered.push((ridx, fwd.out));
                }
                Ok(BlockResult { grads, rendered, eik_grads })
            })
            .collect();
        let mut out = Vec::with_capacity(results.len());
        for r in results {
            out.push(r?);
        }
        Ok(out)
    };

    let needs_patch = stage == 3 && plan.patch.is_some() && weights.perceptual != 0.0;

    // stage 3 needs the full rendered patch before upstreams exist, so it
    // runs a forward-only pass first; other stages fuse forward+backward
    let (fwd_blocks, patch_pair, upstream_color) = if needs_patch {
        let blocks_out = run_pass(false, None)?;
        let mut rendered = vec![RenderOutput::background(); plan.rays.len()];
        for b in &blocks_out {
            for (i, r) in &b.rendered {
                rendered[*i] = r.clone();
            }
        }
        let (frame, cam, r0, c0, size) = plan.patch.unwrap();
        let img = &data.images[frame][cam];
        let mut rend = ImageRgbF::new(size, size);
        let mut gt_img = ImageRgbF::new(size, size);
        for (i, job) in plan.rays.iter().enumerate() {
            let pr = job.pixel / img.width - r0;
            let pc = job.pixel % img.width - c0;
            rend.set(pr, pc, rendered[i].color);
            gt_img.set(pr, pc, img.data[job.pixel]);
        }
        let upstream = if with_grads {
            let pgrad = perceptual_grad(&rend, &gt_img)?;
            Some(
                pgrad
                    .iter()
                    .map(|g| {
                        [
                            g[0] * weights.perceptual,
                            g[1] * weights.perceptual,
                            g[2] * weights.perceptual,
                        ]
                    })
                    .collect::<Vec<_>>(),
            )
        } else {
            None
        };
        (Some(blocks_out), Some((rend, gt_img)), upstream)
    } else {
        (None, None, None)
    };

    let main_blocks = if with_grads {
        run_pass(true, upstream_color.as_ref())?
    } else {
        match fwd_blocks {
            Some(b) => b,
            None => run_pass(false, None)?,
        }
    };

    let mut rendered = vec![RenderOutput::background(); plan.rays.len()];
    let mut eik = Vec::new();
    let mut grads = with_grads.then(|| GradBuffer::zeros_like(params));
    for b in &main_blocks {
        for (i, r) in &b.rendered {
            rendered[*i] = r.clone();
        }
        eik.extend(b.eik_grads.iter().copied());
        if let (Some(total), Some(part)) = (grads.as_mut(), b.grads.as_ref()) {
            total.add_from(part);
        }
    }
    let gt_c: Vec<[f64; 3]> = gt.iter().map(|g| g.0).collect();
    let gt_m: Vec<f64> = gt.iter().map(|g| g.1).collect();
    let losses = compute_losses(
        &rendered,
        &gt_c,
        &gt_m,
        &eik,
        patch_pair.as_ref().map(|(a, b)| (a, b)),
        &weights,
        cfg.mask_loss_absolute,
    )?;
    Ok((losses, grads))
}

/// Training log CSV header.
pub const LOG_HEADER: &str =
    "step,epoch,stage,lr,loss_total,loss_color,loss_mask,loss_eikonal,loss_perceptual,psnr_val";

/// Products of [`run_training`].
pub struct TrainArtifacts {
    pub params: FieldParams,
    pub state: AdamState,
    pub log_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub depth_caches: Option<DepthCaches>,
}

/// Executes the staged schedule: stratified box sampling with the eikonal
/// term first, then per-frame surface extraction and depth-guided
/// sampling, then patch sampling with the perceptual loss. Emits the
/// per-step CSV log and periodic checkpoints.
pub fn run_training(
    scene: &SceneBundle,
    vocab: &TexVocab,
    field_cfg: FieldConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainArtifacts> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir.join("checkpoints"))?;
    let data = TrainingData::load(scene, vocab)?;
    let n_cams = scene.cameras.len();
    let (w, h) = (scene.cameras[0].width, scene.cameras[0].height);
    let steps_per_epoch = cfg.steps_per_epoch.unwrap_or_else(|| {
        ((data.frames.len() * n_cams * w * h) as f64 / (cfg.rays_per_step * cfg.batch) as f64)
            .ceil()
            .max(1.0) as usize
    });
    let mut params = FieldParams::init(field_cfg, cfg.seed, 0.1)?;
    let mut state = AdamState::new(&params);
    let mut rng = rand::rngs::StdRng::seed_from_u64(splitmix(cfg.seed));
    let log_path = out_dir.join("train_log.csv");
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
    writeln!(log, "{}", LOG_HEADER)?;
    let mut depth_caches: Option<DepthCaches> = None;
    let mut last_psnr = 0.0;
    let mut step: u64 = 0;
    // beta anneal runs through stage 1 and the first quarter of stage 2
    let anneal_end = (cfg.stage1_end as f64
        + 0.25 * (cfg.stage2_end - cfg.stage1_end) as f64)
        * steps_per_epoch as f64;
    let beta0 = params.beta();
    for epoch in 1..=cfg.epochs {
        let stage = cfg.stage_of_epoch(epoch);
        if stage >= 2 && depth_caches.is_none() {
            depth_caches = Some(build_depth_caches(scene, &data, vocab, &params, cfg)?);
        }
        for _ in 0..steps_per_epoch {
            step += 1;
            if cfg.beta_anneal && (step as f64) <= anneal_end {
                let t = step as f64 / anneal_end;
                params.log_beta = beta0.ln() * (1.0 - t) + cfg.beta_target.ln() * t;
            }
            let plan = sample_step_plan(&data, cfg, stage, step, &mut rng);
            let (losses, grads) = training_step(
                scene,
                &data,
                vocab,
                &params,
                cfg,
                &plan,
                stage,
                depth_caches.as_ref(),
                true,
            )?;
            let lr = cfg.lr_at_step(step);
            let scheduled_beta = params.log_beta;
            adam_step_scaled(
                &mut params,
                grads.as_ref().expect("gradients requested"),
                &mut state,
                lr,
                cfg.beta_lr_scale,
            );
            if cfg.beta_anneal && (step as f64) <= anneal_end {
                params.log_beta = scheduled_beta;
            }
            if cfg.eval_every > 0 && step % cfg.eval_every as u64 == 0 {
                last_psnr = quick_psnr(scene, &data, vocab, &params, cfg, depth_caches.as_ref())?;
            }
            writeln!(
                log,
                "{},{},{},{},{},{},{},{},{},{}",
                step,
                epoch,
                stage,
                lr,
                losses.total,
                losses.color,
                losses.mask,
                losses.eikonal,
                losses.perceptual,
                last_psnr
            )?;
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every as u64 == 0 {
                save_checkpoint(
                    &out_dir.join(format!("checkpoints/step{:07}.ckpt", step)),
                    &params,
                    Some(&state.to_moments()),
                )?;
            }
        }
    }
    log.flush()?;
    let checkpoint_path = out_dir.join("checkpoints/final.ckpt");
    save_checkpoint(&checkpoint_path, &params, Some(&state.to_moments()))?;
    Ok(TrainArtifacts { params, state, log_path, checkpoint_path, depth_caches })
}

/// Cheap training-view PSNR on one (frame, camera) pair.
fn quick_psnr(
    scene: &SceneBundle,
    data: &TrainingData,
    vocab: &TexVocab,
    params: &FieldParams,
    cfg: &TrainConfig,
    depth_caches: Option<&DepthCaches>,
) -> Result<f64> {
    let fd = &data.frames[0];
    let ctx = FrameContext::new(
        &scene.template,
        &fd.transforms,
        &fd.posed,
        vocab,
        &fd.features,
        params,
        &fd.pose,
        cfg.box_padding,
    );
    let cam = &scene.cameras[0];
    let mode = match depth_caches {
        Some(d) => crate::renderer::RenderMode::Guided {
            depth: &d[0][0],
            count: cfg.guided_samples,
            delta: cfg.depth_band,
            fallback_radius: cfg.ball_radius,
            fallback_count: cfg.guided_samples,
            fallback_dilation: cfg.fallback_dilation,
        },
        None => crate::renderer::RenderMode::Stratified { count: cfg.stratified_samples },
    };
    let view = crate::renderer::render_view(&ctx, cam, &mode, cfg.seed, false)?;
    metrics::psnr(&view.color, &data.images[0][0])
}
