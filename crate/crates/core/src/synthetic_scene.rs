//! Deterministic synthetic capture rig: a procedural 24-joint tube-limb
//! body with a chart-per-segment UV atlas, a smooth procedural texture
//! with per-part pose-dependent brightness, a camera ring, and an exact
//! ray-traced reference renderer. Every pipeline stage can be verified
//! against this generator without real data.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::body_model::{
    forward_kinematics, lbs_pose_mesh, Pose, PosedMesh, SkinnedTemplate,
};
use crate::imgio::{ImageGrayF, ImageRgbF};
use crate::pose_vocab::{PartitionTable, PART_COUNT};
use crate::texture_atlas::{load_cameras, save_cameras, Camera};
use crate::{Error, Result, Vec3, JOINT_COUNT};

/// Counts and resolutions of a generated scene.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub views: usize,
    pub frames: usize,
    pub train_frames: usize,
    pub image_width: usize,
    pub image_height: usize,
    pub atlas_res: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            views: 12,
            frames: 8,
            train_frames: 8,
            image_width: 128,
            image_height: 128,
            atlas_res: 256,
        }
    }
}

/// One UV chart of the synthetic texture.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChartTruth {
    /// [u0, v0, u1, v1] of the chart rectangle.
    pub rect: [f64; 4],
    pub base: [f64; 3],
    pub freq: [f64; 2],
    pub phase: f64,
    pub part: usize,
}

/// Everything needed to evaluate the ground-truth appearance.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneTruth {
    pub spec: SceneSpec,
    pub charts: Vec<ChartTruth>,
    /// Face index -> chart index.
    pub face_chart: Vec<usize>,
    /// Per body part, the joint whose bend drives the brightness.
    pub modulation_joints: [usize; PART_COUNT],
    pub modulation_strength: f64,
}

impl SceneTruth {
    /// Procedural texture at a UV coordinate (chart located by rectangle).
    pub fn texture(&self, uv: [f64; 2]) -> [f64; 3] {
        for chart in &self.charts {
            let [u0, v0, u1, v1] = chart.rect;
            if uv[0] >= u0 && uv[0] <= u1 && uv[1] >= v0 && uv[1] <= v1 {
                return chart_color(chart, uv);
            }
        }
        [0.0; 3]
    }

    /// Brightness factor of a part under a pose: 1 at rest, decreasing
    /// with the bend angle of the part's distinguished joint.
    pub fn modulation(&self, part: usize, pose: &Pose) -> f64 {
        let j = self.modulation_joints[part];
        let bend = pose.joint(j).norm().min(std::f64::consts::PI);
        1.0 - self.modulation_strength * bend / std::f64::consts::PI
    }

    /// Exact surface color: texture times the part modulation.
    pub fn surface_color(&self, face: usize, uv: [f64; 2], pose: &Pose) -> [f64; 3] {
        let chart = &self.charts[self.face_chart[face]];
        let tex = chart_color(chart, uv);
        let m = self.modulation(chart.part, pose);
        [tex[0] * m, tex[1] * m, tex[2] * m]
    }
}

fn chart_color(chart: &ChartTruth, uv: [f64; 2]) -> [f64; 3] {
    let [u0, v0, u1, v1] = chart.rect;
    let lu = ((uv[0] - u0) / (u1 - u0)).clamp(0.0, 1.0);
    let lv = ((uv[1] - v0) / (v1 - v0)).clamp(0.0, 1.0);
    let arg = 2.0 * std::f64::consts::PI * (chart.freq[0] * lu + chart.freq[1] * lv) + chart.phase;
    let mut out = [0.0; 3];
    for ch in 0..3 {
        out[ch] = chart.base[ch] * (0.68 + 0.30 * (arg + ch as f64 * 0.7).sin());
    }
    out
}

/// A scene on disk: template, cameras, poses, per-view images and masks,
/// plus the generator truth when produced by [`generate_scene`].
#[derive(Clone, Debug)]
pub struct SceneBundle {
    pub root: PathBuf,
    pub template: Arc<SkinnedTemplate>,
    pub cameras: Vec<Camera>,
    pub poses: Vec<Pose>,
    pub train_frames: usize,
    pub truth: Option<SceneTruth>,
}

#[derive(Serialize, Deserialize)]
struct PosesJson {
    train_frames: usize,
    poses: Vec<Pose>,
}

impl SceneBundle {
    pub fn load(root: &Path) -> Result<Self> {
        let template = Arc::new(SkinnedTemplate::load(&root.join("template.json"))?);
        let cameras = load_cameras(&root.join("cameras.json"))?;
        let raw: PosesJson =
            serde_json::from_str(&std::fs::read_to_string(root.join("poses.json"))?)?;
        for p in &raw.poses {
            p.validate()?;
        }
        if raw.train_frames == 0 || raw.train_frames > raw.poses.len() {
            return Err(Error::Invariant(format!(
                "train_frames {} outside 1..={}",
                raw.train_frames,
                raw.poses.len()
            )));
        }
        let truth_path = root.join("scene.json");
        let truth = if truth_path.exists() {
            Some(serde_json::from_str(&std::fs::read_to_string(truth_path)?)?)
        } else {
            None
        };
        Ok(Self {
            root: root.to_path_buf(),
            template,
            cameras,
            poses: raw.poses,
            train_frames: raw.train_frames,
            truth,
        })
    }

    pub fn image_path(&self, frame: usize, cam: usize) -> PathBuf {
        self.root.join(format!("images/f{:04}_c{:02}.png", frame, cam))
    }

    pub fn mask_path(&self, frame: usize, cam: usize) -> PathBuf {
        self.root.join(format!("masks/f{:04}_c{:02}.png", frame, cam))
    }

    pub fn load_image(&self, frame: usize, cam: usize) -> Result<ImageRgbF> {
        ImageRgbF::load_png(&self.image_path(frame, cam))
    }

    pub fn load_mask(&self, frame: usize, cam: usize) -> Result<ImageGrayF> {
        ImageGrayF::load_png(&self.mask_path(frame, cam))
    }
}

/// A body segment: a capped tube from one joint towards another point,
/// skinned to `joint` with end blends to the neighbors.
struct SegSpec {
    joint: usize,
    blend_start: Option<usize>,
    blend_end: Option<usize>,
    p0: Vec3,
    p1: Vec3,
    r0: f64,
    r1: f64,
    part: usize,
    rings: usize,
    segs: usize,
}

/// SMPL-style rest joint layout (y-up, pelvis at the origin) and parents.
fn rest_skeleton() -> ([Vec3; JOINT_COUNT], [Option<usize>; JOINT_COUNT]) {
    let mut j = [Vec3::zeros(); JOINT_COUNT];
    j[0] = Vec3::new(0.0, 0.0, 0.0); // pelvis
    j[1] = Vec3::new(0.09, -0.06, 0.0); // left hip
    j[2] = Vec3::new(-0.09, -0.06, 0.0); // right hip
    j[3] = Vec3::new(0.0, 0.11, 0.0); // spine1
    j[4] = Vec3::new(0.10, -0.46, 0.0); // left knee
    j[5] = Vec3::new(-0.10, -0.46, 0.0); // right knee
    j[6] = Vec3::new(0.0, 0.23, 0.0); // spine2
    j[7] = Vec3::new(0.10, -0.85, 0.0); // left ankle
    j[8] = Vec3::new(-0.10, -0.85, 0.0); // right ankle
    j[9] = Vec3::new(0.0, 0.30, 0.0); // spine3
    j[10] = Vec3::new(0.11, -0.91, 0.11); // left foot
    j[11] = Vec3::new(-0.11, -0.91, 0.11); // right foot
    j[12] = Vec3::new(0.0, 0.47, 0.0); // neck
    j[13] = Vec3::new(0.07, 0.40, 0.0); // left collar
    j[14] = Vec3::new(-0.07, 0.40, 0.0); // right collar
    j[15] = Vec3::new(0.0, 0.56, 0.0); // head
    j[16] = Vec3::new(0.18, 0.43, 0.0); // left shoulder
    j[17] = Vec3::new(-0.18, 0.43, 0.0); // right shoulder
    j[18] = Vec3::new(0.43, 0.43, 0.0); // left elbow
    j[19] = Vec3::new(-0.43, 0.43, 0.0); // right elbow
    j[20] = Vec3::new(0.66, 0.43, 0.0); // left wrist
    j[21] = Vec3::new(-0.66, 0.43, 0.0); // right wrist
    j[22] = Vec3::new(0.75, 0.43, 0.0); // left hand
    j[23] = Vec3::new(-0.75, 0.43, 0.0); // right hand
    let parents_raw: [i64; JOINT_COUNT] = [
        -1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21,
    ];
    let mut parents = [None; JOINT_COUNT];
    for (i, &p) in parents_raw.iter().enumerate() {
        parents[i] = (p >= 0).then_some(p as usize);
    }
    (j, parents)
}

fn segments(
    joints: &[Vec3; JOINT_COUNT],
    parents: &[Option<usize>; JOINT_COUNT],
    table: &PartitionTable,
) -> Vec<SegSpec> {
    // (drive joint, end joint, r0, r1, rings)
    let tube = |a: usize, b: usize, r0: f64, r1: f64, rings: usize| SegSpec {
        joint: a,
        blend_start: parents[a],
        blend_end: Some(b),
        p0: joints[a],
        p1: joints[b],
        r0,
        r1,
        part: table.part_of_joint(b),
        rings,
        segs: 8,
    };
    let mut segs = vec![
        tube(0, 3, 0.13, 0.13, 4),
        tube(3, 6, 0.13, 0.125, 4),
        tube(6, 9, 0.125, 0.115, 4),
        tube(9, 12, 0.115, 0.06, 4),
        tube(1, 4, 0.075, 0.06, 5),
        tube(2, 5, 0.075, 0.06, 5),
        tube(4, 7, 0.055, 0.045, 5),
        tube(5, 8, 0.055, 0.045, 5),
        tube(7, 10, 0.045, 0.035, 3),
        tube(8, 11, 0.045, 0.035, 3),
        tube(13, 16, 0.055, 0.05, 3),
        tube(14, 17, 0.055, 0.05, 3),
        tube(16, 18, 0.05, 0.042, 5),
        tube(17, 19, 0.05, 0.042, 5),
        tube(18, 20, 0.042, 0.036, 5),
        tube(19, 21, 0.042, 0.036, 5),
        tube(20, 22, 0.036, 0.03, 3),
        tube(21, 23, 0.036, 0.03, 3),
    ];
    // neck and head carried entirely by their drive joints
    segs.push(SegSpec {
        joint: 12,
        blend_start: Some(9),
        blend_end: Some(15),
        p0: joints[12],
        p1: joints[15],
        r0: 0.055,
        r1: 0.06,
        part: table.part_of_joint(15),
        rings: 3,
        segs: 8,
    });
    segs.push(SegSpec {
        joint: 15,
        blend_start: Some(12),
        blend_end: None,
        p0: joints[15],
        p1: joints[15] + Vec3::new(0.0, 0.19, 0.02),
        r0: 0.075,
        r1: 0.06,
        part: table.part_of_joint(15),
        rings: 4,
        segs: 8,
    });
    segs
}

/// Builds the tube body and the matching truth charts. Chart cells are
/// laid out in a grid with gutters of about 2 texels at the target atlas
/// resolution.
fn build_body(
    table: &PartitionTable,
    atlas_res: usize,
    rng: &mut rand::rngs::StdRng,
) -> Result<(SkinnedTemplate, Vec<ChartTruth>, Vec<usize>)> {
    let (joints, parents) = rest_skeleton();
    let segs = segments(&joints, &parents, table);
    let n_charts = segs.len();
    let cols = (n_charts as f64).sqrt().ceil() as usize;
    let rows = n_charts.div_ceil(cols);
    let gutter = 2.0 / atlas_res as f64;

    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut uv = Vec::new();
    let mut weights: Vec<[f64; JOINT_COUNT]> = Vec::new();
    let mut charts = Vec::new();
    let mut face_chart = Vec::new();

    for (ci, seg) in segs.iter().enumerate() {
        let cell_u = (ci % cols) as f64 / cols as f64;
        let cell_v = (ci / cols) as f64 / rows as f64;
        let rect = [
            cell_u + gutter,
            cell_v + gutter,
            cell_u + 1.0 / cols as f64 - gutter,
            cell_v + 1.0 / rows as f64 - gutter,
        ];
        charts.push(ChartTruth {
            rect,
            base: [
                0.35 + 0.6 * rng.gen::<f64>(),
                0.35 + 0.6 * rng.gen::<f64>(),
                0.35 + 0.6 * rng.gen::<f64>(),
            ],
            // low spatial frequency keeps the bilinear resampling bias of
            // the back-projection well under the round-trip tolerance
            freq: [rng.gen_range(1..=2) as f64, rng.gen_range(1..=2) as f64],
            phase: rng.gen::<f64>() * std::f64::consts::PI * 2.0,
            part: seg.part,
        });
        // the tube body maps to the left 3/4 of the chart, caps to two
        // squares on the right
        let body_rect = [rect[0], rect[1], rect[0] + 0.72 * (rect[2] - rect[0]), rect[3]];
        let cap_w = 0.115 * (rect[2] - rect[0]);
        let cap_rects = [
            [rect[2] - 2.3 * cap_w, rect[1], rect[2] - 1.3 * cap_w, rect[1] + (rect[3] - rect[1]) * 0.45],
            [rect[2] - 1.15 * cap_w, rect[1], rect[2] - 0.15 * cap_w, rect[1] + (rect[3] - rect[1]) * 0.45],
        ];
        build_tube(
            seg,
            body_rect,
            cap_rects,
            &mut vertices,
            &mut faces,
            &mut uv,
            &mut weights,
            ci,
            &mut face_chart,
        );
    }
    let template =
        SkinnedTemplate::from_parts(vertices, faces, uv, weights, joints, parents)?;
    Ok((template, charts, face_chart))
}

#[allow(clippy::too_many_arguments)]
fn build_tube(
    seg: &SegSpec,
    body_rect: [f64; 4],
    cap_rects: [[f64; 4]; 2],
    vertices: &mut Vec<Vec3>,
    faces: &mut Vec<[usize; 3]>,
    uv: &mut Vec<[[f64; 2]; 3]>,
    weights: &mut Vec<[f64; JOINT_COUNT]>,
    chart: usize,
    face_chart: &mut Vec<usize>,
) {
    let axis = (seg.p1 - seg.p0).normalize();
    let helper = if axis.x.abs() < 0.9 { Vec3::new(1.0, 0.0, 0.0) } else { Vec3::new(0.0, 1.0, 0.0) };
    let u_axis = axis.cross(&helper).normalize();
    let v_axis = axis.cross(&u_axis);
    let rings = seg.rings;
    let around = seg.segs;
    let base = vertices.len();

    let ring_weight = |s: f64| {
        let mut w = [0.0; JOINT_COUNT];
        let mut main = 1.0;
        if let Some(parent) = seg.blend_start {
            let wb = 0.5 * ((0.25 - s) / 0.25).clamp(0.0, 1.0);
            w[parent] += wb;
            main -= wb;
        }
        if let Some(end) = seg.blend_end {
            let wb = 0.5 * ((s - 0.75) / 0.25).clamp(0.0, 1.0);
            w[end] += wb;
            main -= wb;
        }
        w[seg.joint] += main;
        w
    };

    for r in 0..=rings {
        let s = r as f64 / rings as f64;
        let center = seg.p0 + (seg.p1 - seg.p0) * s;
        let radius = seg.r0 + (seg.r1 - seg.r0) * s;
        let w = ring_weight(s);
        for a in 0..around {
            let phi = 2.0 * std::f64::consts::PI * a as f64 / around as f64;
            vertices.push(center + (u_axis * phi.cos() + v_axis * phi.sin()) * radius);
            weights.push(w);
        }
    }
    let ring_uv = |r: usize, a: usize| {
        let s = r as f64 / rings as f64;
        let t = a as f64 / around as f64;
        [
            body_rect[0] + t * (body_rect[2] - body_rect[0]),
            body_rect[1] + s * (body_rect[3] - body_rect[1]),
        ]
    };
    for r in 0..rings {
        for a in 0..around {
            let a1 = (a + 1) % around;
            let i00 = base + r * around + a;
            let i01 = base + r * around + a1;
            let i10 = base + (r + 1) * around + a;
            let i11 = base + (r + 1) * around + a1;
            // per-corner UVs let the wrap column reach the chart edge
            let u00 = ring_uv(r, a);
            let u10 = ring_uv(r + 1, a);
            let wrap = if a1 == 0 { around } else { a1 };
            let u01 = ring_uv(r, wrap);
            let u11 = ring_uv(r + 1, wrap);
            // outward winding (ring tangent cross axis points inward, so
            // the angular neighbor comes second)
            faces.push([i00, i01, i10]);
            uv.push([u00, u01, u10]);
            face_chart.push(chart);
            faces.push([i01, i11, i10]);
            uv.push([u01, u11, u10]);
            face_chart.push(chart);
        }
    }
    // end caps: a center vertex and a fan, mapped into the cap squares
    for (cap, ring_r) in [(0usize, 0usize), (1usize, rings)] {
        let s = cap as f64;
        let center = if cap == 0 { seg.p0 } else { seg.p1 };
        let ci = vertices.len();
        vertices.push(center);
        weights.push(ring_weight(s));
        let rect = cap_rects[cap];
        let cap_center_uv = [(rect[0] + rect[2]) / 2.0, (rect[1] + rect[3]) / 2.0];
        let cap_rim_uv = |a: usize| {
            let phi = 2.0 * std::f64::consts::PI * a as f64 / around as f64;
            [
                cap_center_uv[0] + 0.5 * (rect[2] - rect[0]) * phi.cos() * 0.95,
                cap_center_uv[1] + 0.5 * (rect[3] - rect[1]) * phi.sin() * 0.95,
            ]
        };
        for a in 0..around {
            let a1 = (a + 1) % around;
            let r0 = base + ring_r * around + a;
            let r1 = base + ring_r * around + a1;
            // wind so the cap faces outward along the tube axis
            if cap == 0 {
                faces.push([ci, r1, r0]);
                uv.push([cap_center_uv, cap_rim_uv(a1), cap_rim_uv(a)]);
            } else {
                faces.push([ci, r0, r1]);
                uv.push([cap_center_uv, cap_rim_uv(a), cap_rim_uv(a1)]);
            }
            face_chart.push(chart);
        }
    }
}

/// Camera ring around the body with alternating elevation.
fn build_cameras(spec: &SceneSpec) -> Vec<Camera> {
    let target = Vec3::new(0.0, -0.05, 0.0);
    let radius = 2.0;
    (0..spec.views)
        .map(|i| {
            let az = 2.0 * std::f64::consts::PI * i as f64 / spec.views as f64;
            let el: f64 = if i % 2 == 0 { 0.22 } else { -0.22 };
            let eye = target
                + Vec3::new(radius * el.cos() * az.cos(), radius * el.sin(), radius * el.cos() * az.sin());
            let z_cam = (target - eye).normalize();
            let down = Vec3::new(0.0, -1.0, 0.0);
            let y_cam = (down - z_cam * down.dot(&z_cam)).normalize();
            let x_cam = y_cam.cross(&z_cam);
            let rotation = [
                [x_cam.x, x_cam.y, x_cam.z],
                [y_cam.x, y_cam.y, y_cam.z],
                [z_cam.x, z_cam.y, z_cam.z],
            ];
            let r = crate::Mat3::new(
                rotation[0][0], rotation[0][1], rotation[0][2],
                rotation[1][0], rotation[1][1], rotation[1][2],
                rotation[2][0], rotation[2][1], rotation[2][2],
            );
            let t = -(r * eye);
            Camera {
                id: i as u32,
                width: spec.image_width,
                height: spec.image_height,
                fx: 0.95 * spec.image_width as f64,
                fy: 0.95 * spec.image_height as f64,
                cx: spec.image_width as f64 / 2.0,
                cy: spec.image_height as f64 / 2.0,
                rotation,
                translation: [t.x, t.y, t.z],
            }
        })
        .collect()
}

/// Pose sequence interpolating part-wise random bend targets; frame 0 is
/// the rest pose.
fn build_poses(spec: &SceneSpec, rng: &mut rand::rngs::StdRng) -> Vec<Pose> {
    // (joint, axis, lo, hi)
    let dof: [(usize, usize, f64, f64); 9] = [
        (4, 0, 0.0, 1.1),   // left knee
        (5, 0, 0.0, 1.1),   // right knee
        (18, 1, -1.1, 0.0), // left elbow
        (19, 1, 0.0, 1.1),  // right elbow
        (16, 2, -0.5, 0.3), // left shoulder
        (17, 2, -0.3, 0.5), // right shoulder
        (1, 0, -0.35, 0.35), // left hip
        (2, 0, -0.35, 0.35), // right hip
        (6, 0, -0.25, 0.25), // spine bend
    ];
    let n_key = (spec.frames / 3).max(2);
    let keys: Vec<Vec<f64>> = (0..=n_key)
        .map(|k| {
            dof.iter()
                .map(|&(_, _, lo, hi)| if k == 0 { 0.0 } else { rng.gen_range(lo..hi) })
                .collect()
        })
        .collect();
    (0..spec.frames)
        .map(|t| {
            let pos = t as f64 / (spec.frames - 1).max(1) as f64 * n_key as f64;
            let k0 = (pos.floor() as usize).min(n_key - 1);
            let frac = pos - k0 as f64;
            let mut pose = Pose::identity();
            for (d, &(joint, axis, _, _)) in dof.iter().enumerate() {
                let v = keys[k0][d] * (1.0 - frac) + keys[k0 + 1][d] * frac;
                pose.theta[joint][axis] = v;
            }
            pose.frame_id = Some(t as u64);
            pose
        })
        .collect()
}

/// Exact per-pixel reference render: ray-triangle intersection, texture
/// lookup at the hit UV, part brightness modulation. Returns color, mask
/// and camera-space depth (+inf background).
pub fn render_oracle(
    truth: &SceneTruth,
    posed: &PosedMesh,
    pose: &Pose,
    camera: &Camera,
) -> Result<(ImageRgbF, ImageGrayF, Vec<f64>)> {
    camera.validate()?;
    let (w, h) = (camera.width, camera.height);
    let mut img = ImageRgbF::new(w, h);
    let mut mask = ImageGrayF::new(w, h);
    let mut depth = vec![f64::INFINITY; w * h];
    use rayon::prelude::*;
    let rows: Vec<Vec<([f64; 3], f64, f64)>> = (0..h)
        .into_par_iter()
        .map(|r| {
            let mut row = Vec::with_capacity(w);
            for c in 0..w {
                let (origin, dir) = camera.pixel_ray(r, c).expect("pixel in range");
                match posed.surface().raycast(origin, dir, 0.0, f64::INFINITY) {
                    Some(hit) => {
                        let uv = posed.template.uv_at(hit.face, hit.bary);
                        let color = truth.surface_color(hit.face, uv, pose);
                        let z = (camera.rot() * (origin + dir * hit.t) + camera.trans()).z;
                        row.push((color, 1.0, z));
                    }
                    None => row.push(([0.0; 3], 0.0, f64::INFINITY)),
                }
            }
            row
        })
        .collect();
    for (r, row) in rows.into_iter().enumerate() {
        for (c, (color, m, z)) in row.into_iter().enumerate() {
            img.set(r, c, color);
            mask.set(r, c, m);
            depth[r * w + c] = z;
        }
    }
    Ok((img, mask, depth))
}

/// Generates the full scene directory: template.json, cameras.json,
/// poses.json, scene.json (truth), and per-frame-per-view images/masks.
/// Byte-identical output for identical specs.
pub fn generate_scene(spec: &SceneSpec, out: &Path) -> Result<SceneBundle> {
    if spec.views == 0 || spec.frames < 2 {
        return Err(Error::Invariant("scene needs at least 1 view and 2 frames".into()));
    }
    if spec.train_frames == 0 || spec.train_frames > spec.frames {
        return Err(Error::Invariant(format!(
            "train_frames {} outside 1..={}",
            spec.train_frames, spec.frames
        )));
    }
    let mut rng = rand::rngs::StdRng::seed_from_u64(spec.seed);
    let table = PartitionTable::standard();
    let (template, charts, face_chart) = build_body(&table, spec.atlas_res, &mut rng)?;
    let template = Arc::new(template);
    let truth = SceneTruth {
        spec: spec.clone(),
        charts,
        face_chart,
        modulation_joints: [6, 4, 5, 18, 19],
        modulation_strength: 0.35,
    };
    let cameras = build_cameras(spec);
    let poses = build_poses(spec, &mut rng);

    std::fs::create_dir_all(out.join("images"))?;
    std::fs::create_dir_all(out.join("masks"))?;
    template.save(&out.join("template.json"))?;
    save_cameras(&out.join("cameras.json"), &cameras)?;
    std::fs::write(
        out.join("poses.json"),
        serde_json::to_string_pretty(&PosesJson {
            train_frames: spec.train_frames,
            poses: poses.clone(),
        })?,
    )?;
    std::fs::write(out.join("scene.json"), serde_json::to_string_pretty(&truth)?)?;

    for (fi, pose) in poses.iter().enumerate() {
        let transforms = forward_kinematics(&template, pose)?;
        let posed = lbs_pose_mesh(&template, &transforms);
        for (ci, cam) in cameras.iter().enumerate() {
            let (img, mask, _) = render_oracle(&truth, &posed, pose, cam)?;
            img.save_png(&out.join(format!("images/f{:04}_c{:02}.png", fi, ci)))?;
            mask.save_png(&out.join(format!("masks/f{:04}_c{:02}.png", fi, ci)))?;
        }
    }
    Ok(SceneBundle {
        root: out.to_path_buf(),
        template,
        cameras,
        poses,
        train_frames: spec.train_frames,
        truth: Some(truth),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry_extract::{rasterize_depth, TriangleMesh};

    fn tiny_spec(seed: u64) -> SceneSpec {
        SceneSpec {
            seed,
            views: 6,
            frames: 4,
            train_frames: 4,
            image_width: 48,
            image_height: 48,
            atlas_res: 64,
        }
    }

    fn tmp_dir(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join("texvocab_scene_tests").join(name);
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn generation_is_byte_identical_for_same_seed() {
        let a = tmp_dir("det_a");
        let b = tmp_dir("det_b");
        generate_scene(&tiny_spec(3), &a).unwrap();
        generate_scene(&tiny_spec(3), &b).unwrap();
        let mut compared = 0;
        for entry in walk(&a) {
            let rel = entry.strip_prefix(&a).unwrap();
            let other = b.join(rel);
            let x = std::fs::read(&entry).unwrap();
            let y = std::fs::read(&other).unwrap_or_default();
            assert_eq!(x, y, "file {} differs", rel.display());
            compared += 1;
        }
        assert!(compared > 8);
    }

    fn walk(dir: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out.sort();
        out
    }

    #[test]
    fn file_counts_match_spec() {
        let dir = tmp_dir("counts");
        let mut spec = tiny_spec(1);
        spec.views = 6;
        spec.frames = 8;
        spec.train_frames = 8;
        spec.image_width = 24;
        spec.image_height = 24;
        let bundle = generate_scene(&spec, &dir).unwrap();
        let images = std::fs::read_dir(dir.join("images")).unwrap().count();
        let masks = std::fs::read_dir(dir.join("masks")).unwrap().count();
        assert_eq!(images, 48);
        assert_eq!(masks, 48);
        assert_eq!(bundle.poses.len(), 8);
        // reload from disk
        let loaded = SceneBundle::load(&dir).unwrap();
        assert_eq!(loaded.poses.len(), 8);
        assert_eq!(loaded.cameras.len(), 6);
        assert!(loaded.truth.is_some());
    }

    #[test]
    fn template_satisfies_invariants_and_partition() {
        let dir = tmp_dir("tmpl");
        let bundle = generate_scene(&tiny_spec(5), &dir).unwrap();
        // weights were validated by construction; re-validate through load
        let template = SkinnedTemplate::load(&dir.join("template.json")).unwrap();
        assert_eq!(template.vertex_count(), bundle.template.vertex_count());
        let table = PartitionTable::standard();
        let sizes: Vec<usize> = (0..PART_COUNT).map(|p| table.part_size(p)).collect();
        assert_eq!(sizes, vec![8, 3, 3, 5, 5]);
    }

    #[test]
    fn body_fits_inside_every_view() {
        let dir = tmp_dir("fit");
        let bundle = generate_scene(&tiny_spec(11), &dir).unwrap();
        for cam in 0..bundle.cameras.len() {
            let mask = bundle.load_mask(0, cam).unwrap();
            let n = mask.width;
            let mut coverage = 0.0;
            for r in 0..n {
                for c in 0..n {
                    let v = mask.get(r, c);
                    coverage += v;
                    if r == 0 || c == 0 || r == n - 1 || c == n - 1 {
                        assert_eq!(v, 0.0, "body touches the border in view {}", cam);
                    }
                }
            }
            assert!(coverage > 50.0, "body barely visible in view {}", cam);
        }
    }

    #[test]
    fn oracle_color_is_view_independent_and_background_empty() {
        let dir = tmp_dir("oracle");
        let bundle = generate_scene(&tiny_spec(9), &dir).unwrap();
        let truth = bundle.truth.as_ref().unwrap();
        let pose = &bundle.poses[1];
        // same surface point always evaluates to the same color
        let c1 = truth.surface_color(10, [0.05, 0.05], pose);
        let c2 = truth.surface_color(10, [0.05, 0.05], pose);
        assert_eq!(c1, c2);
        // corner pixel misses the body
        let mask = bundle.load_mask(1, 0).unwrap();
        assert_eq!(mask.get(0, 0), 0.0);
    }

    #[test]
    fn oracle_depth_matches_rasterizer() {
        let dir = tmp_dir("depth");
        let bundle = generate_scene(&tiny_spec(13), &dir).unwrap();
        let truth = bundle.truth.as_ref().unwrap();
        let pose = &bundle.poses[0];
        let transforms = forward_kinematics(&bundle.template, pose).unwrap();
        let posed = lbs_pose_mesh(&bundle.template, &transforms);
        let cam = &bundle.cameras[0];
        let (_, _, oracle_depth) = render_oracle(truth, &posed, pose, cam).unwrap();
        let mesh = TriangleMesh {
            vertices: posed.vertices.clone(),
            faces: bundle.template.faces.clone(),
            normals: None,
        };
        let raster = rasterize_depth(&mesh, cam).unwrap();
        let mut compared = 0;
        let mut oracle_only = 0;
        let mut raster_only = 0;
        for idx in 0..oracle_depth.len() {
            let (a, b) = (oracle_depth[idx], raster.depths[idx]);
            match (a.is_finite(), b.is_finite()) {
                (true, true) => {
                    assert!((a - b).abs() < 1e-6, "pixel {}: {} vs {}", idx, a, b);
                    compared += 1;
                }
                (true, false) => oracle_only += 1,
                (false, true) => raster_only += 1,
                _ => {}
            }
        }
        assert_eq!(oracle_only, 0);
        assert_eq!(raster_only, 0);
        assert!(compared > 120, "only {} overlapping covered pixels", compared);
    }

    #[test]
    fn modulation_is_invertible_from_brightness() {
        let dir = tmp_dir("modulation");
        let bundle = generate_scene(&tiny_spec(17), &dir).unwrap();
        let truth = bundle.truth.as_ref().unwrap();
        let mut bent = Pose::identity();
        bent.theta[4] = [0.9, 0.0, 0.0]; // left knee: part 1
        let rest = Pose::identity();
        // pick a face on the left lower leg (chart part == 1)
        let face = truth
            .face_chart
            .iter()
            .position(|&c| truth.charts[c].part == 1)
            .expect("left leg chart exists");
        let uv_probe = {
            let chart = &truth.charts[truth.face_chart[face]];
            [(chart.rect[0] + chart.rect[2]) / 2.0, (chart.rect[1] + chart.rect[3]) / 2.0]
        };
        let c_rest = truth.surface_color(face, uv_probe, &rest);
        let c_bent = truth.surface_color(face, uv_probe, &bent);
        let ratio = c_bent[0] / c_rest[0];
        let expected = 1.0 - 0.35 * 0.9 / std::f64::consts::PI;
        assert!((ratio - expected).abs() < 1e-12, "{} vs {}", ratio, expected);
    }
}
