//! Shared fixtures for unit tests.

use crate::body_model::SkinnedTemplate;
use crate::{Vec3, JOINT_COUNT};

/// Minimal valid template: a unit quad in the z=0 plane bound entirely to
/// joint 0, with the 24 joints laid out as a straight chain.
pub fn quad_template() -> SkinnedTemplate {
    let vertices = vec![
        Vec3::new(0.0, 0.0, 0.0),
        Vec3::new(1.0, 0.0, 0.0),
        Vec3::new(1.0, 1.0, 0.0),
        Vec3::new(0.0, 1.0, 0.0),
    ];
    // wound so the normal points toward -z, facing the test cameras
    let faces = vec![[0, 2, 1], [0, 3, 2]];
    let uv = vec![
        [[0.0, 0.0], [1.0, 1.0], [1.0, 0.0]],
        [[0.0, 0.0], [0.0, 1.0], [1.0, 1.0]],
    ];
    let mut w = [0.0; JOINT_COUNT];
    w[0] = 1.0;
    let skin_weights = vec![w; 4];
    let mut rest_joints = [Vec3::zeros(); JOINT_COUNT];
    let mut parents = [None; JOINT_COUNT];
    for j in 1..JOINT_COUNT {
        rest_joints[j] = Vec3::new(j as f64 * 0.05, 0.0, 0.0);
        parents[j] = Some(j - 1);
    }
    SkinnedTemplate::from_parts(vertices, faces, uv, skin_weights, rest_joints, parents).unwrap()
}
