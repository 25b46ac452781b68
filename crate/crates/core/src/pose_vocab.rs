//! Body-part pose vocabulary: decomposes poses into kinematic-chain parts,
//! samples key part-poses by farthest point sampling under a quaternion
//! rotation metric, and answers queries by KNN interpolation of the
//! associated texture feature maps.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::body_model::{axis_angle_to_quat, Pose, PosedMesh, SkinnedTemplate};
use crate::texture_atlas::FeatureMap;
use crate::{Error, Result, Vec3, JOINT_COUNT};

/// Number of body parts.
pub const PART_COUNT: usize = 5;

/// Fixed division of the 24 joints into 5 kinematic-chain parts:
/// main body, left leg, right leg, left arm, right arm.
pub const STANDARD_PARTS: [&[usize]; PART_COUNT] = [
    &[0, 1, 2, 3, 6, 9, 12, 15],
    &[4, 7, 10],
    &[5, 8, 11],
    &[13, 16, 18, 20, 22],
    &[14, 17, 19, 21, 23],
];

/// Joint groups defining the body parts. Parts are disjoint and cover all
/// joints.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionTable {
    parts: Vec<Vec<usize>>,
    joint_part: [usize; JOINT_COUNT],
}

impl PartitionTable {
    pub fn standard() -> Self {
        Self::from_parts(STANDARD_PARTS.iter().map(|p| p.to_vec()).collect()).unwrap()
    }

    pub fn from_parts(parts: Vec<Vec<usize>>) -> Result<Self> {
        let mut joint_part = [usize::MAX; JOINT_COUNT];
        for (p, joints) in parts.iter().enumerate() {
            for &j in joints {
                if j >= JOINT_COUNT {
                    return Err(Error::Invariant(format!("part {} references joint {}", p, j)));
                }
                if joint_part[j] != usize::MAX {
                    return Err(Error::Invariant(format!("joint {} in two parts", j)));
                }
                joint_part[j] = p;
            }
        }
        if joint_part.iter().any(|&p| p == usize::MAX) {
            return Err(Error::Invariant("parts do not cover all joints".into()));
        }
        Ok(Self { parts, joint_part })
    }

    pub fn part_count(&self) -> usize {
        self.parts.len()
    }

    pub fn joints(&self, part: usize) -> &[usize] {
        &self.parts[part]
    }

    pub fn part_size(&self, part: usize) -> usize {
        self.parts[part].len()
    }

    pub fn part_of_joint(&self, joint: usize) -> usize {
        self.joint_part[joint]
    }
}

/// The rotations of one body part, in the partition table's joint order.
#[derive(Clone, Debug)]
pub struct BodyPartPose {
    pub part: usize,
    pub rotations: Vec<Vec3>,
}

/// Splits a pose into its body parts, copying rotations verbatim.
pub fn decompose_pose(pose: &Pose, table: &PartitionTable) -> Vec<BodyPartPose> {
    (0..table.part_count())
        .map(|p| BodyPartPose {
            part: p,
            rotations: table.joints(p).iter().map(|&j| pose.joint(j)).collect(),
        })
        .collect()
}

/// Distance between two part poses: per joint, one minus the absolute dot
/// product of the unit quaternions, summed over the part's joints.
/// Range [0, J_p]; sign-invariant in either quaternion.
pub fn part_distance(a: &BodyPartPose, b: &BodyPartPose) -> Result<f64> {
    if a.part != b.part || a.rotations.len() != b.rotations.len() {
        return Err(Error::ShapeMismatch(format!(
            "part mismatch: {} ({} joints) vs {} ({} joints)",
            a.part,
            a.rotations.len(),
            b.part,
            b.rotations.len()
        )));
    }
    let mut d = 0.0;
    for (ra, rb) in a.rotations.iter().zip(b.rotations.iter()) {
        let qa = axis_angle_to_quat(*ra);
        let qb = axis_angle_to_quat(*rb);
        let dot = qa[0] * qb[0] + qa[1] * qb[1] + qa[2] * qb[2] + qa[3] * qb[3];
        // rounding can push |dot| one ulp past 1; clamp so each joint term
        // stays inside [0, 1]
        d += 1.0 - dot.abs().min(1.0);
    }
    Ok(d)
}

/// Greedy farthest point sampling over part poses. Seeds with index 0,
/// then repeatedly adds the pose maximizing the minimum distance to the
/// chosen set; ties break to the lowest index. Returns selection order.
pub fn fps_sample_keys(frames: &[BodyPartPose], m: usize) -> Result<Vec<usize>> {
    if m > frames.len() {
        return Err(Error::OutOfRange(format!(
            "cannot sample {} keys from {} frames",
            m,
            frames.len()
        )));
    }
    if m == 0 || frames.is_empty() {
        return Ok(Vec::new());
    }
    let mut selected = Vec::with_capacity(m);
    let mut chosen = vec![false; frames.len()];
    selected.push(0usize);
    chosen[0] = true;
    let mut min_dist: Vec<f64> = frames
        .iter()
        .map(|f| part_distance(f, &frames[0]).unwrap_or(f64::INFINITY))
        .collect();
    while selected.len() < m {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for (i, &d) in min_dist.iter().enumerate() {
            if chosen[i] {
                continue;
            }
            if d > best.0 || (d == best.0 && i < best.1) {
                best = (d, i);
            }
        }
        let pick = best.1;
        selected.push(pick);
        chosen[pick] = true;
        for (i, d) in min_dist.iter_mut().enumerate() {
            let nd = part_distance(&frames[i], &frames[pick])?;
            if nd < *d {
                *d = nd;
            }
        }
    }
    Ok(selected)
}

/// A key part-pose with the training frame it came from.
#[derive(Clone, Debug)]
pub struct VocabKey {
    pub frame_id: u64,
    pub pose: BodyPartPose,
}

/// Per-part key sets over a shared per-frame feature-map store.
#[derive(Clone, Debug)]
pub struct TexVocab {
    pub table: PartitionTable,
    pub k: usize,
    pub parts: Vec<Vec<VocabKey>>,
    store_frames: Vec<u64>,
    store: Vec<FeatureMap>,
    frame_index: BTreeMap<u64, usize>,
}

impl TexVocab {
    /// Builds the vocabulary from the training poses: per part, selects
    /// round(key_fraction * T1) keys by FPS and keeps the feature maps of
    /// every referenced frame.
    pub fn build(
        poses: &[Pose],
        features: Vec<FeatureMap>,
        table: PartitionTable,
        k: usize,
        key_fraction: f64,
    ) -> Result<Self> {
        if poses.is_empty() {
            return Err(Error::EmptyInput("vocabulary needs at least one pose".into()));
        }
        if features.len() != poses.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} poses but {} feature maps",
                poses.len(),
                features.len()
            )));
        }
        if !(key_fraction > 0.0 && key_fraction <= 1.0) {
            return Err(Error::OutOfRange(format!("key_fraction {} outside (0, 1]", key_fraction)));
        }
        let m = ((key_fraction * poses.len() as f64).round() as usize).clamp(1, poses.len());
        let frame_of = |i: usize| poses[i].frame_id.unwrap_or(i as u64);
        let mut parts: Vec<Vec<VocabKey>> = Vec::with_capacity(table.part_count());
        let mut used: Vec<usize> = Vec::new();
        for p in 0..table.part_count() {
            let frames: Vec<BodyPartPose> = poses
                .iter()
                .map(|pose| BodyPartPose {
                    part: p,
                    rotations: table.joints(p).iter().map(|&j| pose.joint(j)).collect(),
                })
                .collect();
            let picks = fps_sample_keys(&frames, m)?;
            for &i in &picks {
                if !used.contains(&i) {
                    used.push(i);
                }
            }
            parts.push(
                picks
                    .into_iter()
                    .map(|i| VocabKey { frame_id: frame_of(i), pose: frames[i].clone() })
                    .collect(),
            );
        }
        used.sort_unstable();
        let mut store = Vec::with_capacity(used.len());
        let mut store_frames = Vec::with_capacity(used.len());
        let mut features: Vec<Option<FeatureMap>> = features.into_iter().map(Some).collect();
        for &idx in &used {
            store.push(features[idx].take().expect("feature consumed twice"));
            store_frames.push(frame_of(idx));
        }
        let frame_index: BTreeMap<u64, usize> =
            store_frames.iter().enumerate().map(|(i, &f)| (f, i)).collect();
        Ok(Self { table, k, parts, store_frames, store, frame_index })
    }

    /// Assembles a vocabulary from persisted keys plus the feature maps of
    /// the referenced frames.
    pub fn from_keys(
        table: PartitionTable,
        k: usize,
        parts: Vec<Vec<VocabKey>>,
        features: Vec<FeatureMap>,
    ) -> Result<Self> {
        let frame_index: BTreeMap<u64, usize> =
            features.iter().enumerate().map(|(i, f)| (f.frame_id, i)).collect();
        for part in &parts {
            for key in part {
                if !frame_index.contains_key(&key.frame_id) {
                    return Err(Error::Invariant(format!(
                        "key frame {} has no stored feature map",
                        key.frame_id
                    )));
                }
            }
        }
        let store_frames = features.iter().map(|f| f.frame_id).collect();
        Ok(Self { table, k, parts, store_frames, store: features, frame_index })
    }

    pub fn channels(&self) -> usize {
        self.store.first().map(|f| f.channels).unwrap_or(0)
    }

    pub fn keys_per_part(&self) -> usize {
        self.parts.first().map(|p| p.len()).unwrap_or(0)
    }

    pub fn feature_by_frame(&self, frame_id: u64) -> Option<&FeatureMap> {
        self.frame_index.get(&frame_id).map(|&i| &self.store[i])
    }

    pub fn store_entry(&self, idx: usize) -> &FeatureMap {
        &self.store[idx]
    }

    pub fn stored_frames(&self) -> &[u64] {
        &self.store_frames
    }

    /// Finds the K nearest keys of the query's part and returns weight +
    /// feature-map references. Weights follow w = J_p - d, normalized to
    /// sum 1; if every candidate sits at the maximum distance the weights
    /// fall back to uniform.
    pub fn knn_interpolate(&self, query: &BodyPartPose) -> Result<InterpolatedFeature> {
        let keys = &self.parts[query.part];
        if keys.is_empty() {
            return Err(Error::EmptyInput(format!("part {} has no keys", query.part)));
        }
        let k = self.k.min(keys.len()).max(1);
        let mut scored: Vec<(f64, u64)> = keys
            .iter()
            .map(|key| Ok((part_distance(query, &key.pose)?, key.frame_id)))
            .collect::<Result<_>>()?;
        scored.sort_by(|a, b| {
            a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1))
        });
        scored.truncate(k);
        let j_p = self.table.part_size(query.part) as f64;
        let mut weights: Vec<f64> = scored.iter().map(|(d, _)| j_p - d).collect();
        let sum: f64 = weights.iter().sum();
        if sum == 0.0 {
            weights.iter_mut().for_each(|w| *w = 1.0 / k as f64);
        } else {
            weights.iter_mut().for_each(|w| *w /= sum);
        }
        let entries = scored
            .iter()
            .zip(weights.iter())
            .map(|((_, frame_id), &w)| (w, self.frame_index[frame_id]))
            .collect();
        Ok(InterpolatedFeature { entries })
    }

    /// Materializes the weighted sum of feature maps. The lazy sampling
    /// path agrees with sampling this map (linearity).
    pub fn blend_feature_map(&self, interp: &InterpolatedFeature) -> FeatureMap {
        let first = &self.store[interp.entries[0].1];
        let mut out = FeatureMap::zeros(first.resolution, first.channels, first.frame_id);
        for &(w, idx) in &interp.entries {
            for (o, v) in out.values.iter_mut().zip(self.store[idx].values.iter()) {
                *o += w * v;
            }
        }
        out
    }

    /// Lazily samples the interpolated feature at a UV coordinate.
    pub fn sample_interpolated(&self, interp: &InterpolatedFeature, uv: [f64; 2], out: &mut [f64]) {
        out.fill(0.0);
        for &(w, idx) in &interp.entries {
            self.store[idx].sample_bilinear_accum(uv, w, out);
        }
    }
}

/// Weighted references into the vocabulary's feature store; the lazy form
/// of an interpolated feature map.
#[derive(Clone, Debug)]
pub struct InterpolatedFeature {
    /// (weight, store index); weights sum to 1.
    pub entries: Vec<(f64, usize)>,
}

/// Uniform average of interpolated features over an odd-length window
/// centered on `center`; the window truncates at sequence edges.
pub fn temporal_smooth(
    sequence: &[InterpolatedFeature],
    center: usize,
    window: usize,
) -> Result<InterpolatedFeature> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::OutOfRange(format!("window must be odd and >= 1, got {}", window)));
    }
    if center >= sequence.len() {
        return Err(Error::OutOfRange(format!(
            "center {} outside sequence of {}",
            center,
            sequence.len()
        )));
    }
    let half = window / 2;
    let lo = center.saturating_sub(half);
    let hi = (center + half).min(sequence.len() - 1);
    let scale = 1.0 / (hi - lo + 1) as f64;
    let mut merged: BTreeMap<usize, f64> = BTreeMap::new();
    for item in &sequence[lo..=hi] {
        for &(w, idx) in &item.entries {
            *merged.entry(idx).or_insert(0.0) += w * scale;
        }
    }
    Ok(InterpolatedFeature { entries: merged.into_iter().map(|(idx, w)| (w, idx)).collect() })
}

/// Skinning-weight-wise attention: the fraction of total skinning weight
/// carried by each part's joints. Sums to 1.
pub fn part_attention_from_weights(table: &PartitionTable, weights: &[f64; JOINT_COUNT]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    let mut omega = vec![0.0; table.part_count()];
    if total <= 0.0 {
        return omega;
    }
    for (p, o) in omega.iter_mut().enumerate() {
        *o = table.joints(p).iter().map(|&j| weights[j]).sum::<f64>() / total;
    }
    omega
}

/// Attention weights for a canonical point: resolves skin weights at the
/// nearest rest-surface point, then aggregates per part.
pub fn part_attention(template: &SkinnedTemplate, table: &PartitionTable, x_c: Vec3) -> Vec<f64> {
    let hit = template.rest_surface().closest_point(x_c);
    let w = template.skin_weights_at(hit.face, hit.bary);
    part_attention_from_weights(table, &w)
}

/// Per-pose query context: the interpolated feature of every part.
#[derive(Clone, Debug)]
pub struct PoseFeatures {
    pub parts: Vec<InterpolatedFeature>,
}

impl PoseFeatures {
    pub fn for_pose(vocab: &TexVocab, pose: &Pose) -> Result<Self> {
        let parts = decompose_pose(pose, &vocab.table)
            .iter()
            .map(|bp| vocab.knn_interpolate(bp))
            .collect::<Result<_>>()?;
        Ok(Self { parts })
    }
}

/// Samples every part's interpolated map at `uv` and blends with the
/// attention weights: out = sum_p omega_p * h(uv, F_p).
pub fn gather_with_features(
    vocab: &TexVocab,
    feats: &PoseFeatures,
    uv: [f64; 2],
    omega: &[f64],
    out: &mut [f64],
) {
    out.fill(0.0);
    for (p, interp) in feats.parts.iter().enumerate() {
        let o = omega[p];
        if o == 0.0 {
            continue;
        }
        for &(w, idx) in &interp.entries {
            vocab.store_entry(idx).sample_bilinear_accum(uv, o * w, out);
        }
    }
}

/// Full pose-feature query for an observation-space point: projects onto
/// the posed surface for both the UV coordinate and the attention weights,
/// then gathers the per-part interpolated features.
pub fn gather_pose_feature(
    vocab: &TexVocab,
    pose: &Pose,
    x_t: Vec3,
    posed: &PosedMesh,
) -> Result<Vec<f64>> {
    let feats = PoseFeatures::for_pose(vocab, pose)?;
    let hit = posed.project(x_t);
    let uv = posed.template.uv_at(hit.face, hit.bary);
    let weights = posed.template.skin_weights_at(hit.face, hit.bary);
    let omega = part_attention_from_weights(&vocab.table, &weights);
    let mut out = vec![0.0; vocab.channels()];
    gather_with_features(vocab, &feats, uv, &omega, &mut out);
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct VocabJson {
    k: usize,
    parts: Vec<PartJson>,
}

#[derive(Serialize, Deserialize)]
struct PartJson {
    part: usize,
    keys: Vec<KeyJson>,
}

#[derive(Serialize, Deserialize)]
struct KeyJson {
    frame_id: u64,
    theta: Vec<[f64; 3]>,
}

/// Writes the key part-poses (feature maps are referenced by frame id and
/// re-derivable from the atlas directory).
pub fn save_vocab_keys(path: &Path, vocab: &TexVocab) -> Result<()> {
    let raw = VocabJson {
        k: vocab.k,
        parts: vocab
            .parts
            .iter()
            .enumerate()
            .map(|(p, keys)| PartJson {
                part: p,
                keys: keys
                    .iter()
                    .map(|key| KeyJson {
                        frame_id: key.frame_id,
                        theta: key.pose.rotations.iter().map(|r| [r.x, r.y, r.z]).collect(),
                    })
                    .collect(),
            })
            .collect(),
    };
    std::fs::write(path, serde_json::to_string_pretty(&raw)?)?;
    Ok(())
}

/// Reads keys persisted by [`save_vocab_keys`].
pub fn load_vocab_keys(path: &Path, table: &PartitionTable) -> Result<(usize, Vec<Vec<VocabKey>>)> {
    let raw: VocabJson = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let mut parts: Vec<Vec<VocabKey>> = vec![Vec::new(); table.part_count()];
    for part in raw.parts {
        if part.part >= table.part_count() {
            return Err(Error::OutOfRange(format!("vocab part {} out of range", part.part)));
        }
        parts[part.part] = part
            .keys
            .into_iter()
            .map(|k| {
                if k.theta.len() != table.part_size(part.part) {
                    return Err(Error::ShapeMismatch(format!(
                        "key of part {} has {} joints, expected {}",
                        part.part,
                        k.theta.len(),
                        table.part_size(part.part)
                    )));
                }
                Ok(VocabKey {
                    frame_id: k.frame_id,
                    pose: BodyPartPose {
                        part: part.part,
                        rotations: k.theta.iter().map(|t| Vec3::new(t[0], t[1], t[2])).collect(),
                    },
                })
            })
            .collect::<Result<_>>()?;
    }
    Ok((raw.k, parts))
}
