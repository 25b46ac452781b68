//! Articulated skinned body: template loading/validation, forward
//! kinematics, linear blend skinning and inverse skinning of sampled
//! points back to the canonical (rest) space.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bvh::{SurfaceHit, TriangleBvh};
use crate::{Error, Mat3, Result, Vec3, JOINT_COUNT};

/// Rotation matrix from an axis-angle vector (Rodrigues). Falls back to a
/// series expansion below 1e-8 rad to avoid dividing by the angle.
pub fn axis_angle_to_matrix(w: Vec3) -> Mat3 {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let (a, b) = if theta < 1e-8 {
        // sin(t)/t and (1-cos(t))/t^2 around t = 0
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    let k = Mat3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0);
    Mat3::identity() + k * a + k * k * b
}

/// Unit quaternion (w, x, y, z) from an axis-angle vector, with the same
/// small-angle series fallback.
pub fn axis_angle_to_quat(v: Vec3) -> [f64; 4] {
    let theta2 = v.norm_squared();
    let theta = theta2.sqrt();
    let (c, s_over_t) = if theta < 1e-8 {
        (1.0 - theta2 / 8.0, 0.5 - theta2 / 48.0)
    } else {
        ((0.5 * theta).cos(), (0.5 * theta).sin() / theta)
    };
    [c, v.x * s_over_t, v.y * s_over_t, v.z * s_over_t]
}

/// Rigid transform x -> rot*x + trans.
#[derive(Clone, Copy, Debug)]
pub struct Rigid {
    pub rot: Mat3,
    pub trans: Vec3,
}

impl Rigid {
    pub fn identity() -> Self {
        Self { rot: Mat3::identity(), trans: Vec3::zeros() }
    }

    #[inline]
    pub fn apply(&self, p: Vec3) -> Vec3 {
        self.rot * p + self.trans
    }

    pub fn compose(&self, inner: &Rigid) -> Rigid {
        Rigid { rot: self.rot * inner.rot, trans: self.rot * inner.trans + self.trans }
    }

    pub fn inverse(&self) -> Rigid {
        let rt = self.rot.transpose();
        Rigid { rot: rt, trans: -(rt * self.trans) }
    }
}

/// Rest-pose triangle mesh with UV parameterization, skinning weights and
/// the 24-joint kinematic tree.
#[derive(Clone, Debug)]
pub struct SkinnedTemplate {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    /// Per-face corner UVs in [0,1].
    pub uv: Vec<[[f64; 2]; 3]>,
    pub skin_weights: Vec<[f64; JOINT_COUNT]>,
    pub rest_joints: [Vec3; JOINT_COUNT],
    /// Parent joint index; the single root stores `None`.
    pub parents: [Option<usize>; JOINT_COUNT],
    /// Joint evaluation order (parents before children).
    topo_order: Vec<usize>,
    /// Nearest-surface acceleration over the rest mesh.
    rest_bvh: TriangleBvh,
}

#[derive(Serialize, Deserialize)]
struct TemplateJson {
    vertices: Vec<[f64; 3]>,
    faces: Vec<[usize; 3]>,
    uv: Vec<[[f64; 2]; 3]>,
    skin_weights: Vec<Vec<(usize, f64)>>,
    rest_joints: Vec<[f64; 3]>,
    parents: Vec<i64>,
}

const WEIGHT_SUM_TOL: f64 = 1e-9;

impl SkinnedTemplate {
    /// Validates all invariants and builds the derived structures.
    pub fn from_parts(
        vertices: Vec<Vec3>,
        faces: Vec<[usize; 3]>,
        uv: Vec<[[f64; 2]; 3]>,
        skin_weights: Vec<[f64; JOINT_COUNT]>,
        rest_joints: [Vec3; JOINT_COUNT],
        parents: [Option<usize>; JOINT_COUNT],
    ) -> Result<Self> {
        let n_v = vertices.len();
        if faces.len() != uv.len() {
            return Err(Error::ShapeMismatch(format!(
                "faces ({}) and uv ({}) differ",
                faces.len(),
                uv.len()
            )));
        }
        if skin_weights.len() != n_v {
            return Err(Error::ShapeMismatch(format!(
                "skin_weights rows ({}) != vertex count ({})",
                skin_weights.len(),
                n_v
            )));
        }
        for (fi, f) in faces.iter().enumerate() {
            for &vi in f {
                if vi >= n_v {
                    return Err(Error::Invariant(format!(
                        "face index out of range: face {} references vertex {} (N_V = {})",
                        fi, vi, n_v
                    )));
                }
            }
        }
        for (fi, corners) in uv.iter().enumerate() {
            for c in corners {
                if !(0.0..=1.0).contains(&c[0]) || !(0.0..=1.0).contains(&c[1]) {
                    return Err(Error::Invariant(format!(
                        "uv out of [0,1] on face {}: ({}, {})",
                        fi, c[0], c[1]
                    )));
                }
            }
        }
        for (ri, row) in skin_weights.iter().enumerate() {
            let mut sum = 0.0;
            for &w in row {
                if w < 0.0 {
                    return Err(Error::Invariant(format!(
                        "negative skin weight on row {}",
                        ri
                    )));
                }
                sum += w;
            }
            if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
                return Err(Error::Invariant(format!(
                    "skin-weight row {} sums to {} (expected 1)",
                    ri, sum
                )));
            }
        }
        let topo_order = topological_order(&parents)?;
        let rest_bvh = TriangleBvh::build(&vertices, &faces);
        Ok(Self { vertices, faces, uv, skin_weights, rest_joints, parents, topo_order, rest_bvh })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let raw: TemplateJson =
            serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {}", path.display(), e)))?;
        if raw.rest_joints.len() != JOINT_COUNT {
            return Err(Error::Invariant(format!(
                "expected {} rest joints, found {}",
                JOINT_COUNT,
                raw.rest_joints.len()
            )));
        }
        if raw.parents.len() != JOINT_COUNT {
            return Err(Error::Invariant(format!(
                "expected {} parents, found {}",
                JOINT_COUNT,
                raw.parents.len()
            )));
        }
        let mut weights = Vec::with_capacity(raw.skin_weights.len());
        for (ri, row) in raw.skin_weights.iter().enumerate() {
            let mut dense = [0.0; JOINT_COUNT];
            for &(j, w) in row {
                if j >= JOINT_COUNT {
                    return Err(Error::Invariant(format!(
                        "skin-weight row {} references joint {}",
                        ri, j
                    )));
                }
                dense[j] += w;
            }
            weights.push(dense);
        }
        let mut rest_joints = [Vec3::zeros(); JOINT_COUNT];
        for (i, j) in raw.rest_joints.iter().enumerate() {
            rest_joints[i] = Vec3::new(j[0], j[1], j[2]);
        }
        let mut parents = [None; JOINT_COUNT];
        for (i, &p) in raw.parents.iter().enumerate() {
            parents[i] = if p < 0 {
                None
            } else if (p as usize) < JOINT_COUNT {
                Some(p as usize)
            } else {
                return Err(Error::Invariant(format!("parent {} of joint {} out of range", p, i)));
            };
        }
        Self::from_parts(
            raw.vertices.iter().map(|v| Vec3::new(v[0], v[1], v[2])).collect(),
            raw.faces,
            raw.uv,
            weights,
            rest_joints,
            parents,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let raw = TemplateJson {
            vertices: self.vertices.iter().map(|v| [v.x, v.y, v.z]).collect(),
            faces: self.faces.clone(),
            uv: self.uv.clone(),
            skin_weights: self
                .skin_weights
                .iter()
                .map(|row| {
                    row.iter()
                        .enumerate()
                        .filter(|(_, w)| **w != 0.0)
                        .map(|(j, w)| (j, *w))
                        .collect()
                })
                .collect(),
            rest_joints: self.rest_joints.iter().map(|v| [v.x, v.y, v.z]).collect(),
            parents: self.parents.iter().map(|p| p.map(|v| v as i64).unwrap_or(-1)).collect(),
        };
        std::fs::write(path, serde_json::to_string(&raw)?)?;
        Ok(())
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn rest_surface(&self) -> &TriangleBvh {
        &self.rest_bvh
    }

    /// Skin weights at a surface point, barycentrically interpolated from
    /// the face corners.
    pub fn skin_weights_at(&self, face: usize, bary: (f64, f64)) -> [f64; JOINT_COUNT] {
        let f = self.faces[face];
        let (u, v) = bary;
        let w0 = 1.0 - u - v;
        let mut out = [0.0; JOINT_COUNT];
        let (r0, r1, r2) = (&self.skin_weights[f[0]], &self.skin_weights[f[1]], &self.skin_weights[f[2]]);
        for j in 0..JOINT_COUNT {
            out[j] = w0 * r0[j] + u * r1[j] + v * r2[j];
        }
        out
    }

    /// UV coordinate at a surface point via the per-face corner UVs.
    pub fn uv_at(&self, face: usize, bary: (f64, f64)) -> [f64; 2] {
        let q = &self.uv[face];
        let (u, v) = bary;
        let w0 = 1.0 - u - v;
        [
            w0 * q[0][0] + u * q[1][0] + v * q[2][0],
            w0 * q[0][1] + u * q[1][1] + v * q[2][1],
        ]
    }

    /// Rest-space position of a surface point.
    pub fn rest_point(&self, face: usize, bary: (f64, f64)) -> Vec3 {
        let f = self.faces[face];
        let (u, v) = bary;
        self.vertices[f[0]] * (1.0 - u - v) + self.vertices[f[1]] * u + self.vertices[f[2]] * v
    }
}

fn topological_order(parents: &[Option<usize>; JOINT_COUNT]) -> Result<Vec<usize>> {
    let roots: Vec<usize> =
        (0..JOINT_COUNT).filter(|&j| parents[j].is_none()).collect();
    if roots.len() != 1 {
        return Err(Error::Invariant(format!(
            "kinematic tree must have exactly one root, found {}",
            roots.len()
        )));
    }
    let mut order = Vec::with_capacity(JOINT_COUNT);
    let mut visited = [false; JOINT_COUNT];
    let mut stack = vec![roots[0]];
    while let Some(j) = stack.pop() {
        if visited[j] {
            return Err(Error::Invariant(format!("cycle through joint {}", j)));
        }
        visited[j] = true;
        order.push(j);
        for c in 0..JOINT_COUNT {
            if parents[c] == Some(j) {
                stack.push(c);
            }
        }
    }
    if order.len() != JOINT_COUNT {
        return Err(Error::Invariant("kinematic tree is not connected (cycle present)".into()));
    }
    Ok(order)
}

/// Axis-angle body pose with global translation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Pose {
    pub theta: Vec<[f64; 3]>,
    pub trans: [f64; 3],
    #[serde(default)]
    pub frame_id: Option<u64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self { theta: vec![[0.0; 3]; JOINT_COUNT], trans: [0.0; 3], frame_id: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.theta.len() != JOINT_COUNT {
            return Err(Error::ShapeMismatch(format!(
                "pose has {} joints, expected {}",
                self.theta.len(),
                JOINT_COUNT
            )));
        }
        for (j, t) in self.theta.iter().enumerate() {
            let n = (t[0] * t[0] + t[1] * t[1] + t[2] * t[2]).sqrt();
            if !n.is_finite() {
                return Err(Error::NonFinite(format!("pose joint {}", j)));
            }
            if n >= std::f64::consts::PI + 1e-6 {
                return Err(Error::Invariant(format!(
                    "joint {} axis-angle norm {} exceeds pi (not canonicalized)",
                    j, n
                )));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn joint(&self, j: usize) -> Vec3 {
        Vec3::new(self.theta[j][0], self.theta[j][1], self.theta[j][2])
    }

    pub fn translation(&self) -> Vec3 {
        Vec3::new(self.trans[0], self.trans[1], self.trans[2])
    }
}

/// Per-joint world rigid transforms produced by forward kinematics.
#[derive(Clone, Debug)]
pub struct JointTransforms {
    pub world: Vec<Rigid>,
}

impl JointTransforms {
    pub fn identity() -> Self {
        Self { world: vec![Rigid::identity(); JOINT_COUNT] }
    }

    /// Largest deviation of any rotation from orthonormality.
    pub fn max_orthonormality_error(&self) -> f64 {
        self.world
            .iter()
            .map(|g| {
                let e = g.rot.transpose() * g.rot - Mat3::identity();
                e.iter().fold(0.0f64, |m, v| m.max(v.abs()))
            })
            .fold(0.0, f64::max)
    }

    /// Posed position of a joint.
    pub fn joint_position(&self, template: &SkinnedTemplate, j: usize) -> Vec3 {
        self.world[j].apply(template.rest_joints[j])
    }
}

/// Composes local joint rotations down the kinematic chain. The root
/// rotates about its rest position and then applies the global translation.
pub fn forward_kinematics(template: &SkinnedTemplate, pose: &Pose) -> Result<JointTransforms> {
    pose.validate()?;
    let mut world = vec![Rigid::identity(); JOINT_COUNT];
    for &j in &template.topo_order {
        let rot = axis_angle_to_matrix(pose.joint(j));
        let pivot = template.rest_joints[j];
        let local = Rigid { rot, trans: pivot - rot * pivot };
        world[j] = match template.parents[j] {
            None => {
                let mut g = local;
                g.trans += pose.translation();
                g
            }
            Some(p) => world[p].compose(&local),
        };
    }
    Ok(JointTransforms { world })
}

/// A template posed by LBS, with a nearest-surface index over the posed
/// triangles. Immutable once built.
#[derive(Clone, Debug)]
pub struct PosedMesh {
    pub template: Arc<SkinnedTemplate>,
    pub vertices: Vec<Vec3>,
    bvh: TriangleBvh,
}

impl PosedMesh {
    pub fn surface(&self) -> &TriangleBvh {
        &self.bvh
    }

    /// Exact nearest point on the posed surface.
    pub fn project(&self, x: Vec3) -> SurfaceHit {
        self.bvh.closest_point(x)
    }

    /// Posed position of a surface point.
    pub fn point_at(&self, face: usize, bary: (f64, f64)) -> Vec3 {
        let f = self.template.faces[face];
        let (u, v) = bary;
        self.vertices[f[0]] * (1.0 - u - v) + self.vertices[f[1]] * u + self.vertices[f[2]] * v
    }
}

/// v' = sum_j w(v, j) * G_j(v) for every template vertex.
pub fn lbs_pose_mesh(template: &Arc<SkinnedTemplate>, transforms: &JointTransforms) -> PosedMesh {
    let vertices: Vec<Vec3> = template
        .vertices
        .iter()
        .zip(template.skin_weights.iter())
        .map(|(v, row)| skin_point(transforms, row, *v))
        .collect();
    let bvh = TriangleBvh::build(&vertices, &template.faces);
    PosedMesh { template: Arc::clone(template), vertices, bvh }
}

/// Applies the weight-blended transform to a canonical point.
#[inline]
pub fn skin_point(transforms: &JointTransforms, weights: &[f64; JOINT_COUNT], x: Vec3) -> Vec3 {
    let mut out = Vec3::zeros();
    for (j, &w) in weights.iter().enumerate() {
        if w != 0.0 {
            out += transforms.world[j].apply(x) * w;
        }
    }
    out
}

/// Affine transform (not necessarily rigid) from blending joint transforms.
#[derive(Clone, Copy, Debug)]
pub struct BlendedTransform {
    pub mat: Mat3,
    pub trans: Vec3,
}

impl BlendedTransform {
    pub fn from_weights(transforms: &JointTransforms, weights: &[f64; JOINT_COUNT]) -> Self {
        let mut mat = Mat3::zeros();
        let mut trans = Vec3::zeros();
        for (j, &w) in weights.iter().enumerate() {
            if w != 0.0 {
                mat += transforms.world[j].rot * w;
                trans += transforms.world[j].trans * w;
            }
        }
        Self { mat, trans }
    }

    #[inline]
    pub fn apply(&self, x: Vec3) -> Vec3 {
        self.mat * x + self.trans
    }

    /// Inverts the blend; errors with a condition estimate when the matrix
    /// is numerically singular.
    pub fn invert(&self, x: Vec3) -> Result<Vec3> {
        match self.mat.try_inverse() {
            Some(inv) => {
                let cond = self.mat.norm() * inv.norm();
                if !cond.is_finite() || cond > 1e12 {
                    return Err(Error::SingularTransform { cond });
                }
                Ok(inv * (x - self.trans))
            }
            None => Err(Error::SingularTransform { cond: f64::INFINITY }),
        }
    }
}

/// Maps an observation-space point to the canonical space: takes the skin
/// weights of the nearest posed-surface point (barycentric), inverts the
/// blended transform and applies it.
pub fn inverse_skin_point(
    template: &SkinnedTemplate,
    posed: &PosedMesh,
    transforms: &JointTransforms,
    x_t: Vec3,
) -> Result<Vec3> {
    if !x_t.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("inverse_skin_point input".into()));
    }
    let hit = posed.project(x_t);
    let weights = template.skin_weights_at(hit.face, hit.bary);
    BlendedTransform::from_weights(transforms, &weights).invert(x_t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::{FRAC_PI_2, PI};

    use crate::testutil::quad_template;

    fn chain_pose(rng: &mut impl Rng, scale: f64) -> Pose {
        let mut pose = Pose::identity();
        for j in 0..JOINT_COUNT {
            for a in 0..3 {
                pose.theta[j][a] = (rng.gen::<f64>() - 0.5) * scale;
            }
        }
        pose.trans = [rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5];
        pose
    }

    #[test]
    fn rodrigues_small_angle_fallback() {
        let w = Vec3::new(1e-10, -2e-10, 5e-11);
        let r = axis_angle_to_matrix(w);
        let expected = Mat3::identity() + Mat3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0);
        assert!((r - expected).norm() < 1e-18);
    }

    #[test]
    fn quaternion_of_half_turn() {
        let q = axis_angle_to_quat(Vec3::new(0.0, 0.0, PI));
        assert!(q[0].abs() < 1e-15);
        assert!((q[3] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn identity_pose_gives_identity_transforms() {
        let t = quad_template();
        let g = forward_kinematics(&t, &Pose::identity()).unwrap();
        for rigid in &g.world {
            assert!((rigid.rot - Mat3::identity()).norm() == 0.0);
            assert!(rigid.trans.norm() == 0.0);
        }
    }

    #[test]
    fn root_rotation_moves_child_around_root() {
        // Child at rest offset (1,0,0) from the root; rotate root pi/2
        // about z: the child lands at root + (0,1,0).
        let mut t = quad_template();
        t.rest_joints[0] = Vec3::new(0.3, -0.2, 0.1);
        t.rest_joints[1] = t.rest_joints[0] + Vec3::new(1.0, 0.0, 0.0);
        let t = SkinnedTemplate::from_parts(
            t.vertices.clone(),
            t.faces.clone(),
            t.uv.clone(),
            t.skin_weights.clone(),
            t.rest_joints,
            t.parents,
        )
        .unwrap();
        let mut pose = Pose::identity();
        pose.theta[0] = [0.0, 0.0, FRAC_PI_2];
        let g = forward_kinematics(&t, &pose).unwrap();
        let child = g.joint_position(&t, 1);
        let expected = t.rest_joints[0] + Vec3::new(0.0, 1.0, 0.0);
        assert!((child - expected).norm() < 1e-12, "{:?}", child);
    }

    #[test]
    fn translation_shifts_every_joint() {
        let t = quad_template();
        let mut pose = Pose::identity();
        pose.trans = [0.0, 0.0, 0.5];
        let g = forward_kinematics(&t, &pose).unwrap();
        for j in 0..JOINT_COUNT {
            let p = g.joint_position(&t, j);
            assert!((p - (t.rest_joints[j] + Vec3::new(0.0, 0.0, 0.5))).norm() < 1e-12);
        }
    }

    #[test]
    fn lbs_identity_is_exact() {
        let t = Arc::new(quad_template());
        let posed = lbs_pose_mesh(&t, &JointTransforms::identity());
        for (a, b) in posed.vertices.iter().zip(t.vertices.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn lbs_single_joint_rotation_is_rigid_about_joint() {
        let mut base = quad_template();
        base.rest_joints[0] = Vec3::new(0.5, 0.5, 0.0);
        for j in 1..JOINT_COUNT {
            base.rest_joints[j] = base.rest_joints[0] + Vec3::new(j as f64 * 0.01, 0.0, 0.0);
        }
        let t = Arc::new(
            SkinnedTemplate::from_parts(
                base.vertices.clone(),
                base.faces.clone(),
                base.uv.clone(),
                base.skin_weights.clone(),
                base.rest_joints,
                base.parents,
            )
            .unwrap(),
        );
        let mut pose = Pose::identity();
        pose.theta[0] = [0.0, 0.4, 0.3];
        let g = forward_kinematics(&t, &pose).unwrap();
        let posed = lbs_pose_mesh(&t, &g);
        let rot = axis_angle_to_matrix(Vec3::new(0.0, 0.4, 0.3));
        for (v, out) in t.vertices.iter().zip(posed.vertices.iter()) {
            let expected = rot * (v - t.rest_joints[0]) + t.rest_joints[0];
            assert!((out - expected).norm() < 1e-12);
        }
    }

    #[test]
    fn lbs_blends_translations() {
        // Half/half weights on two pure translations average them.
        let mut transforms = JointTransforms::identity();
        transforms.world[3].trans = Vec3::new(0.2, 0.0, 0.0);
        transforms.world[5].trans = Vec3::new(0.0, 0.4, 0.0);
        let mut w = [0.0; JOINT_COUNT];
        w[3] = 0.5;
        w[5] = 0.5;
        let v = Vec3::new(0.1, 0.2, 0.3);
        let out = skin_point(&transforms, &w, v);
        assert!((out - (v + Vec3::new(0.1, 0.2, 0.0))).norm() < 1e-15);
    }

    #[test]
    fn inverse_skin_identity_pose_is_identity() {
        let t = Arc::new(quad_template());
        let g = forward_kinematics(&t, &Pose::identity()).unwrap();
        let posed = lbs_pose_mesh(&t, &g);
        let x = Vec3::new(0.3, 0.4, 0.2);
        let back = inverse_skin_point(&t, &posed, &g, x).unwrap();
        assert!((back - x).norm() < 1e-12);
    }

    #[test]
    fn inverse_skin_rigid_binding_recovers_rest_point() {
        let t = Arc::new(quad_template());
        let mut pose = Pose::identity();
        pose.theta[0] = [0.1, -0.3, 0.6];
        pose.trans = [0.05, -0.02, 0.08];
        let g = forward_kinematics(&t, &pose).unwrap();
        let posed = lbs_pose_mesh(&t, &g);
        // every vertex is fully bound to joint 0, so a point on a posed
        // face inverts through G_0 exactly
        let rest = t.rest_point(0, (0.25, 0.35));
        let x_t = g.world[0].apply(rest);
        let back = inverse_skin_point(&t, &posed, &g, x_t).unwrap();
        assert!((back - rest).norm() < 1e-9);
    }

    #[test]
    fn skinning_round_trip_on_surface_points() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(11);
        let t = Arc::new(quad_template());
        for _ in 0..40 {
            let pose = chain_pose(&mut rng, 0.8);
            let g = forward_kinematics(&t, &pose).unwrap();
            let posed = lbs_pose_mesh(&t, &g);
            for _ in 0..8 {
                let (mut u, mut v) = (rng.gen::<f64>(), rng.gen::<f64>());
                if u + v > 1.0 {
                    u = 1.0 - u;
                    v = 1.0 - v;
                }
                let face = rng.gen_range(0..t.faces.len());
                let rest = t.rest_point(face, (u, v));
                let w = t.skin_weights_at(face, (u, v));
                let x_t = skin_point(&g, &w, rest);
                let back = inverse_skin_point(&t, &posed, &g, x_t).unwrap();
                assert!(
                    (back - rest).norm() < 1e-6,
                    "round trip error {}",
                    (back - rest).norm()
                );
            }
        }
    }

    #[test]
    fn rotations_stay_orthonormal_at_depth_24() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(3);
        for _ in 0..20 {
            let t = quad_template();
            let pose = chain_pose(&mut rng, 2.0);
            let g = forward_kinematics(&t, &pose).unwrap();
            assert!(g.max_orthonormality_error() < 1e-9);
        }
    }

    #[test]
    fn load_rejects_bad_weight_row() {
        let t = quad_template();
        let dir = std::env::temp_dir().join("texvocab_tmpl_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad_weights.json");
        t.save(&path).unwrap();
        let mut raw: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        raw["skin_weights"][2] = serde_json::json!([[0, 0.5]]);
        std::fs::write(&path, raw.to_string()).unwrap();
        let err = SkinnedTemplate::load(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 2"), "{}", msg);
    }

    #[test]
    fn load_rejects_out_of_range_face() {
        let t = quad_template();
        let dir = std::env::temp_dir().join("texvocab_tmpl_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad_face.json");
        t.save(&path).unwrap();
        let mut raw: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        raw["faces"][0] = serde_json::json!([0, 1, 4]);
        std::fs::write(&path, raw.to_string()).unwrap();
        let err = SkinnedTemplate::load(&path).unwrap_err();
        assert!(err.to_string().contains("face index out of range"), "{}", err);
    }

    #[test]
    fn save_load_round_trip() {
        let t = quad_template();
        let dir = std::env::temp_dir().join("texvocab_tmpl_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("round.json");
        t.save(&path).unwrap();
        let back = SkinnedTemplate::load(&path).unwrap();
        assert_eq!(back.vertex_count(), t.vertex_count());
        assert_eq!(back.face_count(), t.face_count());
        assert_eq!(back.parents, t.parents);
        for (a, b) in back.vertices.iter().zip(t.vertices.iter()) {
            assert_eq!(a, b);
        }
    }
}
