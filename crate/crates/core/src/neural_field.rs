//! Pose-conditioned SDF+color field: a softplus MLP over positionally
//! encoded coordinates with hand-rolled reverse-mode differentiation and
//! Laplace-CDF density conversion.
//!
//! The backward pass supports an upstream gradient on the spatial SDF
//! gradient itself (forward-over-reverse), so losses on `grad_x s` (the
//! eikonal term) get exact parameter gradients.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};

use crate::{Error, Result, Vec3};

/// Network shape and encoding orders.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldConfig {
    /// Positional encoding order for spatial coordinates.
    pub l_x: usize,
    /// Positional encoding order for the view direction.
    pub l_d: usize,
    /// Pose-feature channels fed to the trunk and color head.
    pub feature_dim: usize,
    pub trunk_width: usize,
    pub trunk_depth: usize,
    /// Trunk layer whose input is concatenated with the encoded position
    /// again; values >= trunk_depth disable the skip.
    pub skip_layer: usize,
    pub color_width: usize,
    /// Feed the raw 72-dim pose vector to the trunk as well.
    pub feed_pose_vector: bool,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            l_x: 6,
            l_d: 4,
            feature_dim: 16,
            trunk_width: 64,
            trunk_depth: 4,
            skip_layer: 2,
            color_width: 64,
            feed_pose_vector: false,
        }
    }
}

pub const POSE_VECTOR_DIM: usize = crate::JOINT_COUNT * 3;

impl FieldConfig {
    pub fn enc_x_dim(&self) -> usize {
        3 * (2 * self.l_x + 1)
    }

    pub fn enc_d_dim(&self) -> usize {
        3 * (2 * self.l_d + 1)
    }

    pub fn pose_dim(&self) -> usize {
        if self.feed_pose_vector {
            POSE_VECTOR_DIM
        } else {
            0
        }
    }

    pub fn trunk_in_dim(&self, layer: usize) -> usize {
        if layer == 0 {
            self.enc_x_dim() + self.feature_dim + self.pose_dim()
        } else if layer == self.skip_layer {
            self.trunk_width + self.enc_x_dim()
        } else {
            self.trunk_width
        }
    }

    pub fn color_in_dim(&self) -> usize {
        self.trunk_width + self.enc_d_dim() + self.feature_dim
    }

    fn validate(&self) -> Result<()> {
        if self.trunk_depth == 0 || self.trunk_width == 0 || self.color_width == 0 {
            return Err(Error::Invariant("field layers must be non-empty".into()));
        }
        if self.skip_layer == 0 {
            return Err(Error::Invariant("skip cannot target the input layer".into()));
        }
        Ok(())
    }
}

/// Dense layer, weights row-major (out x in).
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self { w: vec![0.0; in_dim * out_dim], b: vec![0.0; out_dim], in_dim, out_dim }
    }

    #[inline]
    fn forward(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.in_dim);
        for (o, (row, b)) in out.iter_mut().zip(self.w.chunks_exact(self.in_dim).zip(&self.b)) {
            *o = b + dot(row, x);
        }
    }

    /// Tangent forward: out' = W x' for 3 interleaved tangent columns.
    #[inline]
    fn forward_tangent(&self, tx: &[f64], out: &mut [f64]) {
        debug_assert_eq!(tx.len(), self.in_dim * 3);
        for (orow, row) in out.chunks_exact_mut(3).zip(self.w.chunks_exact(self.in_dim)) {
            let mut a0 = 0.0;
            let mut a1 = 0.0;
            let mut a2 = 0.0;
            for (wi, t) in row.iter().zip(tx.chunks_exact(3)) {
                a0 += wi * t[0];
                a1 += wi * t[1];
                a2 += wi * t[2];
            }
            orow[0] = a0;
            orow[1] = a1;
            orow[2] = a2;
        }
    }
}

/// Dot product with independent accumulator lanes so the reduction
/// vectorizes (float addition is not associative; a single chain blocks
/// autovectorization).
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let chunks = n / 8;
    let mut acc = [0.0f64; 8];
    for i in 0..chunks {
        let pa = &a[i * 8..i * 8 + 8];
        let pb = &b[i * 8..i * 8 + 8];
        for l in 0..8 {
            acc[l] += pa[l] * pb[l];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for i in chunks * 8..n {
        s += a[i] * b[i];
    }
    s
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sinusoidal lifting: raw input first, then [sin(2^l x), cos(2^l x)] for
/// l = 0..L. Output length k*(2L + 1).
pub fn positional_encode(x: &[f64], l: usize, out: &mut Vec<f64>) {
    out.clear();
    out.extend_from_slice(x);
    for level in 0..l {
        let s = (1u64 << level) as f64;
        for &v in x {
            out.push((s * v).sin());
        }
        for &v in x {
            out.push((s * v).cos());
        }
    }
}

/// Encoded position together with its Jacobian rows (3 tangent columns,
/// interleaved [row*3 + col]).
fn positional_encode_with_jacobian(x: Vec3, l: usize, out: &mut Vec<f64>, tan: &mut Vec<f64>) {
    out.clear();
    tan.clear();
    let k = 3;
    out.extend_from_slice(&[x.x, x.y, x.z]);
    tan.resize(k * 3, 0.0);
    for i in 0..k {
        tan[i * 3 + i] = 1.0;
    }
    for level in 0..l {
        let s = (1u64 << level) as f64;
        let base_sin = out.len();
        for i in 0..k {
            out.push((s * x[i]).sin());
        }
        for i in 0..k {
            out.push((s * x[i]).cos());
        }
        tan.resize(out.len() * 3, 0.0);
        for i in 0..k {
            let sin_row = base_sin + i;
            let cos_row = base_sin + k + i;
            tan[sin_row * 3 + i] = s * (s * x[i]).cos();
            tan[cos_row * 3 + i] = -s * (s * x[i]).sin();
        }
    }
}

/// SDF and squashed color of one field evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldOutput {
    pub sdf: f64,
    pub color: [f64; 3],
}

/// All weights of the field plus the (log-space) density scale.
#[derive(Clone, Debug)]
pub struct FieldParams {
    pub cfg: FieldConfig,
    pub trunk: Vec<Linear>,
    pub sdf_head: Linear,
    pub color_head: [Linear; 2],
    pub log_beta: f64,
}

pub const BETA_MIN: f64 = 1e-4;

impl FieldParams {
    /// Zero-weight network (useful for constructing fields by hand).
    pub fn zeros(cfg: FieldConfig) -> Result<Self> {
        cfg.validate()?;
        let trunk = (0..cfg.trunk_depth)
            .map(|i| Linear::zeros(cfg.trunk_in_dim(i), cfg.trunk_width))
            .collect();
        let sdf_head = Linear::zeros(cfg.trunk_width, 1);
        let color_head = [
            Linear::zeros(cfg.color_in_dim(), cfg.color_width),
            Linear::zeros(cfg.color_width, 3),
        ];
        Ok(Self { cfg, trunk, sdf_head, color_head, log_beta: 0.1f64.ln() })
    }

    /// Random initialization shaped so the initial SDF approximates a
    /// centered sphere: raw-coordinate columns carry the signal, sinusoid
    /// and feature columns start at zero, and the SDF head is a positive
    /// constant row with the bias placing the surface at `sphere_radius`.
    pub fn init(cfg: FieldConfig, seed: u64, sphere_radius: f64) -> Result<Self> {
        let mut params = Self::zeros(cfg)?;
        let cfg = params.cfg.clone();
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        let mut normal = move |std: f64| -> f64 {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen::<f64>();
            std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        };
        for (i, layer) in params.trunk.iter_mut().enumerate() {
            let std = (2.0 / layer.out_dim as f64).sqrt();
            for w in layer.w.iter_mut() {
                *w = normal(std);
            }
            if i == 0 {
                // only the raw xyz columns participate in the initial
                // geometry; sinusoid, feature and pose columns start at 0
                for row in layer.w.chunks_exact_mut(layer.in_dim) {
                    for (col, w) in row.iter_mut().enumerate() {
                        if col >= 3 {
                            *w = 0.0;
                        }
                    }
                }
            }
            if i == cfg.skip_layer {
                for row in layer.w.chunks_exact_mut(layer.in_dim) {
                    for w in row.iter_mut().skip(cfg.trunk_width) {
                        *w = 0.0;
                    }
                }
            }
        }
        let head_w = (std::f64::consts::PI / cfg.trunk_width as f64).sqrt();
        for w in params.sdf_head.w.iter_mut() {
            *w = head_w + normal(1e-5);
        }
        params.sdf_head.b[0] = -sphere_radius;
        for layer in params.color_head.iter_mut() {
            let std = (2.0 / layer.in_dim as f64).sqrt();
            for w in layer.w.iter_mut() {
                *w = normal(std);
            }
        }
        params.calibrate_sphere(sphere_radius);
        Ok(params)
    }

    /// Rescales the SDF head so the raw random trunk reads as a centered
    /// sphere: s(0) = -radius and the mean over an outer shell at 3*radius
    /// equals its true sphere SDF value. Softplus trunks carry a large
    /// positive offset that a fixed head bias cannot absorb.
    fn calibrate_sphere(&mut self, radius: f64) {
        let zero_feat = vec![0.0; self.cfg.feature_dim];
        let d = Vec3::new(0.0, 0.0, 1.0);
        let probe = |p: &FieldParams, x: Vec3| -> f64 {
            field_eval(p, x, d, &zero_feat, None).map(|o| o.sdf).unwrap_or(0.0)
        };
        let s_center = probe(self, Vec3::zeros());
        let shell_r = 3.0 * radius;
        let dirs = [
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(-1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(0.0, -1.0, 0.0),
            Vec3::new(0.0, 0.0, 1.0),
            Vec3::new(0.0, 0.0, -1.0),
        ];
        let s_shell =
            dirs.iter().map(|dir| probe(self, dir * shell_r)).sum::<f64>() / dirs.len() as f64;
        let bias = self.sdf_head.b[0];
        // head outputs a*(w.u) + c; solve for the center/shell targets
        let raw_center = s_center - bias;
        let raw_shell = s_shell - bias;
        let target_center = -radius;
        let target_shell = shell_r - radius;
        let denom = raw_shell - raw_center;
        if denom.abs() > 1e-6 {
            let a = (target_shell - target_center) / denom;
            for w in self.sdf_head.w.iter_mut() {
                *w *= a;
            }
            self.sdf_head.b[0] = target_center - a * raw_center;
        } else {
            self.sdf_head.b[0] = target_center - raw_center;
        }
    }

    pub fn beta(&self) -> f64 {
        self.log_beta.exp().max(BETA_MIN)
    }

    pub fn param_count(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    /// Flat views over every parameter buffer, in a fixed order; gradient
    /// buffers and optimizer state mirror this order.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for layer in &self.trunk {
            out.push(layer.w.as_slice());
            out.push(layer.b.as_slice());
        }
        out.push(self.sdf_head.w.as_slice());
        out.push(self.sdf_head.b.as_slice());
        for layer in &self.color_head {
            out.push(layer.w.as_slice());
            out.push(layer.b.as_slice());
        }
        out.push(std::slice::from_ref(&self.log_beta));
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for layer in &mut self.trunk {
            out.push(layer.w.as_mut_slice());
            out.push(layer.b.as_mut_slice());
        }
        out.push(self.sdf_head.w.as_mut_slice());
        out.push(self.sdf_head.b.as_mut_slice());
        for layer in &mut self.color_head {
            out.push(layer.w.as_mut_slice());
            out.push(layer.b.as_mut_slice());
        }
        out.push(std::slice::from_mut(&mut self.log_beta));
        out
    }
}

/// Per-parameter gradient buffers mirroring [`FieldParams`].
#[derive(Clone, Debug)]
pub struct GradBuffer {
    pub trunk: Vec<Linear>,
    pub sdf_head: Linear,
    pub color_head: [Linear; 2],
    pub log_beta: f64,
}

impl GradBuffer {
    pub fn zeros_like(params: &FieldParams) -> Self {
        Self {
            trunk: params.trunk.iter().map(|l| Linear::zeros(l.in_dim, l.out_dim)).collect(),
            sdf_head: Linear::zeros(params.sdf_head.in_dim, 1),
            color_head: [
                Linear::zeros(params.color_head[0].in_dim, params.color_head[0].out_dim),
                Linear::zeros(params.color_head[1].in_dim, params.color_head[1].out_dim),
            ],
            log_beta: 0.0,
        }
    }

    pub fn clear(&mut self) {
        for l in self.trunk.iter_mut().chain([&mut self.sdf_head]).chain(self.color_head.iter_mut())
        {
            l.w.fill(0.0);
            l.b.fill(0.0);
        }
        self.log_beta = 0.0;
    }

    pub fn add_from(&mut self, other: &GradBuffer) {
        let mut dst = self.slices_mut();
        let src = other.slices();
        for (d, s) in dst.iter_mut().zip(src.iter()) {
            for (a, b) in d.iter_mut().zip(s.iter()) {
                *a += b;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for s in self.slices_mut() {
            for v in s {
                *v *= c;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for layer in &self.trunk {
            out.push(layer.w.as_slice());
            out.push(layer.b.as_slice());
        }
        out.push(self.sdf_head.w.as_slice());
        out.push(self.sdf_head.b.as_slice());
        for layer in &self.color_head {
            out.push(layer.w.as_slice());
            out.push(layer.b.as_slice());
        }
        out.push(std::slice::from_ref(&self.log_beta));
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for layer in &mut self.trunk {
            out.push(layer.w.as_mut_slice());
            out.push(layer.b.as_mut_slice());
        }
        out.push(self.sdf_head.w.as_mut_slice());
        out.push(self.sdf_head.b.as_mut_slice());
        for layer in &mut self.color_head {
            out.push(layer.w.as_mut_slice());
            out.push(layer.b.as_mut_slice());
        }
        out.push(std::slice::from_mut(&mut self.log_beta));
        out
    }
}

/// Reusable forward-pass scratch holding everything the backward pass
/// needs: layer inputs, pre-activations and (optionally) their tangents.
#[derive(Clone, Debug, Default)]
pub struct EvalCache {
    enc_x: Vec<f64>,
    enc_x_tan: Vec<f64>,
    enc_d: Vec<f64>,
    trunk_in: Vec<Vec<f64>>,
    trunk_h: Vec<Vec<f64>>,
    trunk_tin: Vec<Vec<f64>>,
    trunk_th: Vec<Vec<f64>>,
    tfeat: Vec<f64>,
    tfeat_tan: Vec<f64>,
    color_in: Vec<f64>,
    color_h0: Vec<f64>,
    color_a0: Vec<f64>,
    color_h1: Vec<f64>,
    with_grad: bool,
    pub out: FieldOutput,
    pub grad_x: Vec3,
}

impl Default for FieldOutput {
    fn default() -> Self {
        Self { sdf: 0.0, color: [0.0; 3] }
    }
}

impl EvalCache {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Upstream gradients for [`field_backward`].
#[derive(Clone, Copy, Debug, Default)]
pub struct OutputBar {
    pub sdf: f64,
    pub color: [f64; 3],
    /// Upstream on the spatial SDF gradient; requires the forward pass to
    /// have run with `with_grad`.
    pub grad_x: Option<Vec3>,
}

/// Forward pass. With `with_grad` the spatial tangent path runs alongside
/// and `cache.grad_x` holds the exact gradient of the SDF w.r.t. `x_c`.
pub fn field_forward(
    params: &FieldParams,
    x_c: Vec3,
    d: Vec3,
    feature: &[f64],
    pose_vec: Option<&[f64]>,
    with_grad: bool,
    cache: &mut EvalCache,
) -> Result<()> {
    let cfg = &params.cfg;
    if feature.len() != cfg.feature_dim {
        return Err(Error::ShapeMismatch(format!(
            "feature has {} channels, field expects {}",
            feature.len(),
            cfg.feature_dim
        )));
    }
    let pose_slice: &[f64] = match (cfg.feed_pose_vector, pose_vec) {
        (false, _) => &[],
        (true, Some(p)) if p.len() == POSE_VECTOR_DIM => p,
        (true, _) => {
            return Err(Error::ShapeMismatch("pose vector missing or wrong length".into()))
        }
    };
    cache.with_grad = with_grad;
    if with_grad {
        positional_encode_with_jacobian(x_c, cfg.l_x, &mut cache.enc_x, &mut cache.enc_x_tan);
    } else {
        positional_encode(&[x_c.x, x_c.y, x_c.z], cfg.l_x, &mut cache.enc_x);
    }
    positional_encode(&[d.x, d.y, d.z], cfg.l_d, &mut cache.enc_d);

    let depth = cfg.trunk_depth;
    cache.trunk_in.resize(depth, Vec::new());
    cache.trunk_h.resize(depth, Vec::new());
    cache.trunk_tin.resize(depth, Vec::new());
    cache.trunk_th.resize(depth, Vec::new());

    // u: activation entering the next layer (before any skip concat)
    let mut u: Vec<f64> = Vec::with_capacity(cfg.trunk_width);
    let mut tu: Vec<f64> = Vec::new();
    for i in 0..depth {
        let tin = &mut cache.trunk_tin[i];
        let input = &mut cache.trunk_in[i];
        input.clear();
        if i == 0 {
            input.extend_from_slice(&cache.enc_x);
            input.extend_from_slice(feature);
            input.extend_from_slice(pose_slice);
            if with_grad {
                tin.clear();
                tin.extend_from_slice(&cache.enc_x_tan);
                tin.resize(input.len() * 3, 0.0);
            }
        } else if i == cfg.skip_layer {
            input.extend_from_slice(&u);
            input.extend_from_slice(&cache.enc_x);
            if with_grad {
                tin.clear();
                tin.extend_from_slice(&tu);
                tin.extend_from_slice(&cache.enc_x_tan);
            }
        } else {
            input.extend_from_slice(&u);
            if with_grad {
                tin.clear();
                tin.extend_from_slice(&tu);
            }
        }
        let layer = &params.trunk[i];
        let h = &mut cache.trunk_h[i];
        h.resize(layer.out_dim, 0.0);
        layer.forward(input, h);
        u.clear();
        u.extend(h.iter().map(|&v| softplus(v)));
        if with_grad {
            let th = &mut cache.trunk_th[i];
            th.resize(layer.out_dim * 3, 0.0);
            layer.forward_tangent(tin, th);
            tu.clear();
            tu.reserve(layer.out_dim * 3);
            for (hv, tr) in h.iter().zip(th.chunks_exact(3)) {
                let s = sigmoid(*hv);
                tu.push(s * tr[0]);
                tu.push(s * tr[1]);
                tu.push(s * tr[2]);
            }
        }
    }
    cache.tfeat.clear();
    cache.tfeat.extend_from_slice(&u);
    let mut s_out = [0.0];
    params.sdf_head.forward(&u, &mut s_out);
    let sdf = s_out[0];
    if with_grad {
        cache.tfeat_tan.clear();
        cache.tfeat_tan.extend_from_slice(&tu);
        let mut g = [0.0; 3];
        for (w, tr) in params.sdf_head.w.iter().zip(tu.chunks_exact(3)) {
            g[0] += w * tr[0];
            g[1] += w * tr[1];
            g[2] += w * tr[2];
        }
        cache.grad_x = Vec3::new(g[0], g[1], g[2]);
    }

    cache.color_in.clear();
    cache.color_in.extend_from_slice(&u);
    let enc_d = std::mem::take(&mut cache.enc_d);
    cache.color_in.extend_from_slice(&enc_d);
    cache.enc_d = enc_d;
    cache.color_in.extend_from_slice(feature);
    cache.color_h0.resize(params.color_head[0].out_dim, 0.0);
    params.color_head[0].forward(&cache.color_in, &mut cache.color_h0);
    cache.color_a0.clear();
    let a0: Vec<f64> = cache.color_h0.iter().map(|&v| softplus(v)).collect();
    cache.color_a0 = a0;
    cache.color_h1.resize(3, 0.0);
    params.color_head[1].forward(&cache.color_a0, &mut cache.color_h1);
    let color =
        [sigmoid(cache.color_h1[0]), sigmoid(cache.color_h1[1]), sigmoid(cache.color_h1[2])];
    if !sdf.is_finite() || color.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("field forward pass".into()));
    }
    cache.out = FieldOutput { sdf, color };
    Ok(())
}

/// Reverse pass: accumulates exact parameter gradients for the upstream
/// output gradients into `grads`. Input gradients are discarded.
pub fn field_backward(
    params: &FieldParams,
    cache: &EvalCache,
    upstream: &OutputBar,
    grads: &mut GradBuffer,
) {
    let mut scratch = BackwardScratch::default();
    field_backward_batch(params, &[(cache, *upstream)], grads, &mut scratch);
}

/// Reusable staging buffers for [`field_backward_batch`].
#[derive(Default)]
pub struct BackwardScratch {
    trunk_h: Vec<Vec<f64>>,
    trunk_in: Vec<Vec<f64>>,
    sdf_h: Vec<f64>,
    sdf_in: Vec<f64>,
    color1_h: Vec<f64>,
    color1_in: Vec<f64>,
    color0_h: Vec<f64>,
    color0_in: Vec<f64>,
}

/// Batched reverse pass over several cached forward evaluations sharing
/// the same parameters. Weight-gradient accumulation is deferred to one
/// blocked outer-product flush per layer, which keeps each gradient row
/// cache-resident instead of streaming the whole buffer per sample.
pub fn field_backward_batch(
    params: &FieldParams,
    items: &[(&EvalCache, OutputBar)],
    grads: &mut GradBuffer,
    scratch: &mut BackwardScratch,
) {
    let cfg = &params.cfg;
    let width = cfg.trunk_width;
    let depth = cfg.trunk_depth;
    let b_total = items.len();
    if b_total == 0 {
        return;
    }
    let cw = params.color_head[0].out_dim;
    let c0_in = params.color_head[0].in_dim;
    scratch.trunk_h.resize(depth, Vec::new());
    scratch.trunk_in.resize(depth, Vec::new());
    for i in 0..depth {
        scratch.trunk_h[i].resize(b_total * width, 0.0);
        scratch.trunk_in[i].resize(b_total * params.trunk[i].in_dim, 0.0);
    }
    scratch.sdf_h.resize(b_total, 0.0);
    scratch.sdf_in.resize(b_total * width, 0.0);
    scratch.color1_h.resize(b_total * 3, 0.0);
    scratch.color1_in.resize(b_total * cw, 0.0);
    scratch.color0_h.resize(b_total * cw, 0.0);
    scratch.color0_in.resize(b_total * c0_in, 0.0);

    // pass 1: per item, run the reduction chains and stash (h_bar, input)
    // pairs; biases and the (rare) tangent contributions accumulate
    // directly
    for (b, (cache, upstream)) in items.iter().enumerate() {
        let use_tan = upstream.grad_x.is_some();
        assert!(
            !use_tan || cache.with_grad,
            "gradient upstream requires a forward pass with spatial tangents"
        );
        // color head
        let mut tfeat_bar = vec![0.0; width];
        {
            let c1 = &params.color_head[1];
            let mut y1_bar = [0.0; 3];
            for ch in 0..3 {
                let c = cache.out.color[ch];
                y1_bar[ch] = upstream.color[ch] * c * (1.0 - c);
            }
            scratch.color1_h[b * 3..b * 3 + 3].copy_from_slice(&y1_bar);
            scratch.color1_in[b * cw..(b + 1) * cw].copy_from_slice(&cache.color_a0);
            let mut a0_bar = vec![0.0; cw];
            for (o, yb) in y1_bar.iter().enumerate() {
                grads.color_head[1].b[o] += *yb;
                let row = &c1.w[o * cw..(o + 1) * cw];
                for (ab, w) in a0_bar.iter_mut().zip(row.iter()) {
                    *ab += w * yb;
                }
            }
            let c0 = &params.color_head[0];
            let y0_slot = &mut scratch.color0_h[b * cw..(b + 1) * cw];
            for (o, ab) in a0_bar.iter().enumerate() {
                let y0 = ab * sigmoid(cache.color_h0[o]);
                y0_slot[o] = y0;
                grads.color_head[0].b[o] += y0;
            }
            scratch.color0_in[b * c0_in..(b + 1) * c0_in].copy_from_slice(&cache.color_in);
            // cin_bar restricted to the trunk-feature prefix
            for (o, &y0) in y0_slot.iter().enumerate() {
                if y0 == 0.0 {
                    continue;
                }
                let row = &c0.w[o * c0_in..o * c0_in + width];
                for (tb, w) in tfeat_bar.iter_mut().zip(row.iter()) {
                    *tb += w * y0;
                }
            }
        }
        // sdf head
        let gbar = upstream.grad_x.unwrap_or_else(Vec3::zeros);
        scratch.sdf_h[b] = upstream.sdf;
        scratch.sdf_in[b * width..(b + 1) * width].copy_from_slice(&cache.tfeat);
        grads.sdf_head.b[0] += upstream.sdf;
        for k in 0..width {
            tfeat_bar[k] += params.sdf_head.w[k] * upstream.sdf;
        }
        if use_tan {
            for k in 0..width {
                let tr = &cache.tfeat_tan[k * 3..k * 3 + 3];
                grads.sdf_head.w[k] += gbar.x * tr[0] + gbar.y * tr[1] + gbar.z * tr[2];
            }
        }
        // trunk, deepest first
        let mut u_bar = tfeat_bar;
        let mut tu_bar: Vec<f64> = if use_tan {
            let mut t = vec![0.0; width * 3];
            for k in 0..width {
                t[k * 3] = params.sdf_head.w[k] * gbar.x;
                t[k * 3 + 1] = params.sdf_head.w[k] * gbar.y;
                t[k * 3 + 2] = params.sdf_head.w[k] * gbar.z;
            }
            t
        } else {
            Vec::new()
        };
        for i in (0..depth).rev() {
            let layer = &params.trunk[i];
            let h = &cache.trunk_h[i];
            let in_dim = layer.in_dim;
            scratch.trunk_in[i][b * in_dim..(b + 1) * in_dim]
                .copy_from_slice(&cache.trunk_in[i]);
            let h_slot_range = b * width..(b + 1) * width;
            let mut th_bar: Vec<f64> =
                if use_tan { vec![0.0; layer.out_dim * 3] } else { Vec::new() };
            for k in 0..layer.out_dim {
                let sg = sigmoid(h[k]);
                let mut hb = u_bar[k] * sg;
                if use_tan {
                    let sp = sg * (1.0 - sg);
                    let th = &cache.trunk_th[i][k * 3..k * 3 + 3];
                    let tub = &tu_bar[k * 3..k * 3 + 3];
                    hb += sp * (tub[0] * th[0] + tub[1] * th[1] + tub[2] * th[2]);
                    th_bar[k * 3] = tub[0] * sg;
                    th_bar[k * 3 + 1] = tub[1] * sg;
                    th_bar[k * 3 + 2] = tub[2] * sg;
                }
                scratch.trunk_h[i][b * width + k] = hb;
                grads.trunk[i].b[k] += hb;
            }
            // input gradients for the next (shallower) layer
            let mut in_bar = vec![0.0; in_dim];
            let mut tin_bar: Vec<f64> = if use_tan { vec![0.0; in_dim * 3] } else { Vec::new() };
            let h_slot = &scratch.trunk_h[i][h_slot_range];
            for k in 0..layer.out_dim {
                let hb = h_slot[k];
                let row = &layer.w[k * in_dim..(k + 1) * in_dim];
                if hb != 0.0 {
                    for (ib, w) in in_bar.iter_mut().zip(row.iter()) {
                        *ib += w * hb;
                    }
                }
                if use_tan {
                    let tb = &th_bar[k * 3..k * 3 + 3];
                    // tangent weight contribution accumulates directly
                    // (tangent items are rare)
                    let tin = &cache.trunk_tin[i];
                    let grow = &mut grads.trunk[i].w[k * in_dim..(k + 1) * in_dim];
                    for l in 0..in_dim {
                        let t = &tin[l * 3..l * 3 + 3];
                        grow[l] += tb[0] * t[0] + tb[1] * t[1] + tb[2] * t[2];
                        tin_bar[l * 3] += row[l] * tb[0];
                        tin_bar[l * 3 + 1] += row[l] * tb[1];
                        tin_bar[l * 3 + 2] += row[l] * tb[2];
                    }
                }
            }
            if i == 0 {
                break;
            }
            if i == cfg.skip_layer {
                in_bar.truncate(width);
                if use_tan {
                    tin_bar.truncate(width * 3);
                }
            }
            u_bar = in_bar;
            tu_bar = tin_bar;
        }
    }

    // pass 2: blocked outer products, one gradient row at a time
    let flush = |gw: &mut [f64], hbars: &[f64], inputs: &[f64], out_dim: usize, in_dim: usize| {
        for k in 0..out_dim {
            let grow = &mut gw[k * in_dim..(k + 1) * in_dim];
            for b in 0..b_total {
                let hb = hbars[b * out_dim + k];
                if hb == 0.0 {
                    continue;
                }
                let input = &inputs[b * in_dim..(b + 1) * in_dim];
                for (g, x) in grow.iter_mut().zip(input.iter()) {
                    *g += hb * x;
                }
            }
        }
    };
    for i in 0..depth {
        let layer = &params.trunk[i];
        flush(
            &mut grads.trunk[i].w,
            &scratch.trunk_h[i],
            &scratch.trunk_in[i],
            layer.out_dim,
            layer.in_dim,
        );
    }
    flush(&mut grads.sdf_head.w, &scratch.sdf_h, &scratch.sdf_in, 1, width);
    flush(&mut grads.color_head[0].w, &scratch.color0_h, &scratch.color0_in, cw, c0_in);
    flush(&mut grads.color_head[1].w, &scratch.color1_h, &scratch.color1_in, 3, cw);
}

/// Convenience forward returning only the outputs.
pub fn field_eval(
    params: &FieldParams,
    x_c: Vec3,
    d: Vec3,
    feature: &[f64],
    pose_vec: Option<&[f64]>,
) -> Result<FieldOutput> {
    let mut cache = EvalCache::new();
    field_forward(params, x_c, d, feature, pose_vec, false, &mut cache)?;
    Ok(cache.out)
}

/// Exact spatial gradient of the SDF w.r.t. the input position.
pub fn field_spatial_gradient(
    params: &FieldParams,
    x_c: Vec3,
    d: Vec3,
    feature: &[f64],
    pose_vec: Option<&[f64]>,
) -> Result<Vec3> {
    let mut cache = EvalCache::new();
    field_forward(params, x_c, d, feature, pose_vec, true, &mut cache)?;
    Ok(cache.grad_x)
}

/// Laplace-CDF density: sigma = (1/beta) * Psi_beta(-s), monotone
/// non-increasing in s, continuous at 0 (value 1/(2 beta)).
pub fn sdf_to_density(s: f64, beta: f64) -> f64 {
    debug_assert!(beta > 0.0);
    if s >= 0.0 {
        0.5 / beta * (-s / beta).exp()
    } else {
        (1.0 - 0.5 * (s / beta).exp()) / beta
    }
}

/// (d sigma / d s, d sigma / d beta).
pub fn sdf_to_density_grad(s: f64, beta: f64) -> (f64, f64) {
    let e = (-s.abs() / beta).exp();
    let dds = -0.5 * e / (beta * beta);
    let ddb = if s >= 0.0 {
        e * (-0.5 / (beta * beta) + 0.5 * s / (beta * beta * beta))
    } else {
        -1.0 / (beta * beta) + e * (0.5 / (beta * beta) + 0.5 * s / (beta * beta * beta))
    };
    (dds, ddb)
}

/// Adam moment buffers persisted alongside the parameters.
#[derive(Clone, Debug)]
pub struct OptimMoments {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"TXVC";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes the versioned binary checkpoint: layer dims, row-major f32
/// weights, beta, then optional optimizer state. Little-endian throughout.
pub fn save_checkpoint(path: &Path, params: &FieldParams, opt: Option<&OptimMoments>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(CHECKPOINT_MAGIC)?;
    f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let cfg = &params.cfg;
    for v in [
        cfg.l_x as u32,
        cfg.l_d as u32,
        cfg.feature_dim as u32,
        cfg.trunk_width as u32,
        cfg.trunk_depth as u32,
        cfg.skip_layer as u32,
        cfg.color_width as u32,
        cfg.feed_pose_vector as u32,
    ] {
        f.write_all(&v.to_le_bytes())?;
    }
    let layers: Vec<&Linear> =
        params.trunk.iter().chain([&params.sdf_head]).chain(params.color_head.iter()).collect();
    f.write_all(&(layers.len() as u32).to_le_bytes())?;
    for l in &layers {
        f.write_all(&(l.in_dim as u32).to_le_bytes())?;
        f.write_all(&(l.out_dim as u32).to_le_bytes())?;
    }
    for l in &layers {
        for w in l.w.iter().chain(l.b.iter()) {
            f.write_all(&(*w as f32).to_le_bytes())?;
        }
    }
    f.write_all(&(params.log_beta.exp() as f32).to_le_bytes())?;
    match opt {
        None => f.write_all(&[0u8])?,
        Some(state) => {
            f.write_all(&[1u8])?;
            f.write_all(&state.step.to_le_bytes())?;
            f.write_all(&(state.m.len() as u32).to_le_bytes())?;
            for buf in state.m.iter().chain(state.v.iter()) {
                f.write_all(&(buf.len() as u64).to_le_bytes())?;
                for v in buf {
                    f.write_all(&v.to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(FieldParams, Option<OptimMoments>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4)? != &CHECKPOINT_MAGIC[..] {
        return Err(Error::Parse("not a field checkpoint (bad magic)".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Parse(format!("unsupported checkpoint version {}", version)));
    }
    let cfg = FieldConfig {
        l_x: cur.u32()? as usize,
        l_d: cur.u32()? as usize,
        feature_dim: cur.u32()? as usize,
        trunk_width: cur.u32()? as usize,
        trunk_depth: cur.u32()? as usize,
        skip_layer: cur.u32()? as usize,
        color_width: cur.u32()? as usize,
        feed_pose_vector: cur.u32()? != 0,
    };
    let mut params = FieldParams::zeros(cfg)?;
    let n_layers = cur.u32()? as usize;
    {
        let layers: Vec<&Linear> = params
            .trunk
            .iter()
            .chain([&params.sdf_head])
            .chain(params.color_head.iter())
            .collect();
        if n_layers != layers.len() {
            return Err(Error::Parse(format!(
                "checkpoint has {} layers, config implies {}",
                n_layers,
                layers.len()
            )));
        }
        for l in &layers {
            let in_dim = cur.u32()? as usize;
            let out_dim = cur.u32()? as usize;
            if in_dim != l.in_dim || out_dim != l.out_dim {
                return Err(Error::Parse(format!(
                    "layer dims {}x{} do not match config {}x{}",
                    out_dim, in_dim, l.out_dim, l.in_dim
                )));
            }
        }
    }
    {
        let layers: Vec<&mut Linear> = params
            .trunk
            .iter_mut()
            .chain([&mut params.sdf_head])
            .chain(params.color_head.iter_mut())
            .collect();
        for l in layers {
            for w in l.w.iter_mut().chain(l.b.iter_mut()) {
                *w = cur.f32()? as f64;
            }
        }
    }
    let beta = cur.f32()? as f64;
    params.log_beta = (beta.max(BETA_MIN) as f64).ln();
    let has_opt = cur.take(1)?[0];
    let opt = if has_opt == 1 {
        let step = cur.u64()?;
        let n = cur.u32()? as usize;
        let read_bufs = |cur: &mut Cursor| -> Result<Vec<Vec<f64>>> {
            let mut out = Vec::with_capacity(n);
            for _ in 0..n {
                let len = cur.u64()? as usize;
                let mut buf = Vec::with_capacity(len);
                for _ in 0..len {
                    buf.push(cur.f64()?);
                }
                out.push(buf);
            }
            Ok(out)
        };
        let m = read_bufs(&mut cur)?;
        let v = read_bufs(&mut cur)?;
        Some(OptimMoments { step, m, v })
    } else {
        None
    };
    Ok((params, opt))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Parse("checkpoint truncated".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Builds params computing exactly s = n.x + o through the softplus trunk
/// by routing the value through large-bias (locally linear) units. The
/// color output is constant 0.5 gray. Intended for analytic test fields.
pub fn plane_field(cfg: FieldConfig, normal: Vec3, offset: f64) -> Result<FieldParams> {
    let mut params = FieldParams::zeros(cfg)?;
    let big = 40.0;
    // layer 0: channel 0 = n . x + big (raw coords are the first 3 inputs)
    params.trunk[0].w[0] = normal.x;
    params.trunk[0].w[1] = normal.y;
    params.trunk[0].w[2] = normal.z;
    params.trunk[0].b[0] = big;
    // later layers: pass channel 0 through, re-biased into the linear zone
    for layer in params.trunk.iter_mut().skip(1) {
        layer.w[0] = 1.0;
        layer.b[0] = big;
    }
    let depth = params.cfg.trunk_depth as f64;
    params.sdf_head.w[0] = 1.0;
    params.sdf_head.b[0] = offset - big * depth;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn small_cfg() -> FieldConfig {
        FieldConfig {
            l_x: 2,
            l_d: 1,
            feature_dim: 4,
            trunk_width: 8,
            trunk_depth: 2,
            skip_layer: 1,
            color_width: 8,
            feed_pose_vector: false,
        }
    }

    fn random_params(cfg: FieldConfig, seed: u64) -> FieldParams {
        let mut params = FieldParams::zeros(cfg).unwrap();
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        for s in params.slices_mut() {
            for v in s {
                *v = rng.gen::<f64>() - 0.5;
            }
        }
        params.log_beta = 0.1f64.ln();
        params
    }

    fn random_input(rng: &mut impl Rng) -> (Vec3, Vec3, Vec<f64>) {
        let x = Vec3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5);
        let d = Vec3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() + 0.5)
            .normalize();
        let f: Vec<f64> = (0..4).map(|_| rng.gen::<f64>() - 0.5).collect();
        (x, d, f)
    }

    #[test]
    fn encoding_of_zero_and_quarter_period() {
        let mut out = Vec::new();
        positional_encode(&[0.0, 0.0, 0.0], 3, &mut out);
        assert_eq!(out.len(), 3 * (2 * 3 + 1));
        assert!(out[0..3].iter().all(|v| *v == 0.0));
        for level in 0..3 {
            let base = 3 + level * 6;
            assert!(out[base..base + 3].iter().all(|v| *v == 0.0)); // sin
            assert!(out[base + 3..base + 6].iter().all(|v| *v == 1.0)); // cos
        }
        positional_encode(&[std::f64::consts::FRAC_PI_2], 1, &mut out);
        assert_eq!(out.len(), 3);
        assert!((out[1] - 1.0).abs() < 1e-15);
        assert!(out[2].abs() < 1e-15);
    }

    #[test]
    fn encoding_parity() {
        let mut a = Vec::new();
        let mut b = Vec::new();
        let x = [0.3, -0.7, 1.1];
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        positional_encode(&x, 4, &mut a);
        positional_encode(&neg, 4, &mut b);
        for level in 0..4 {
            let base = 3 + level * 6;
            for i in 0..3 {
                assert!((a[base + i] + b[base + i]).abs() < 1e-15); // sin odd
                assert!((a[base + 3 + i] - b[base + 3 + i]).abs() < 1e-15); // cos even
            }
        }
    }

    #[test]
    fn zero_weights_output_sdf_bias() {
        let mut params = FieldParams::zeros(small_cfg()).unwrap();
        params.sdf_head.b[0] = 0.37;
        let out = field_eval(
            &params,
            Vec3::new(0.2, -0.1, 0.5),
            Vec3::new(0.0, 0.0, 1.0),
            &[0.1, 0.2, 0.3, 0.4],
            None,
        )
        .unwrap();
        assert_eq!(out.sdf, 0.37);
        assert_eq!(out.color, [0.5, 0.5, 0.5]);
    }

    #[test]
    fn eval_is_deterministic() {
        let params = random_params(small_cfg(), 4);
        let x = Vec3::new(0.1, 0.2, 0.3);
        let d = Vec3::new(0.0, 0.0, 1.0);
        let f = [0.5, -0.5, 0.25, 0.0];
        let a = field_eval(&params, x, d, &f, None).unwrap();
        let b = field_eval(&params, x, d, &f, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn plane_network_matches_analytic_sdf() {
        let n = Vec3::new(0.6, -0.48, 0.64).normalize();
        let params = plane_field(FieldConfig::default(), n, -0.25).unwrap();
        let mut rng = rand::rngs::StdRng::seed_from_u64(9);
        for _ in 0..100 {
            let x =
                Vec3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5);
            let out = field_eval(&params, x, Vec3::new(0.0, 0.0, 1.0), &vec![0.0; 16], None).unwrap();
            let expected = n.dot(&x) - 0.25;
            assert!((out.sdf - expected).abs() < 1e-9, "{} vs {}", out.sdf, expected);
        }
        let g = field_spatial_gradient(
            &params,
            Vec3::new(0.1, 0.2, -0.3),
            Vec3::new(0.0, 0.0, 1.0),
            &vec![0.0; 16],
            None,
        )
        .unwrap();
        assert!((g - n).norm() < 1e-9);
        assert!((g.norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_network_has_zero_gradient() {
        let params = FieldParams::zeros(small_cfg()).unwrap();
        let g = field_spatial_gradient(
            &params,
            Vec3::new(0.4, 0.1, -0.2),
            Vec3::new(0.0, 0.0, 1.0),
            &[0.0; 4],
            None,
        )
        .unwrap();
        assert_eq!(g, Vec3::zeros());
    }

    #[test]
    fn density_boundary_and_asymptotes() {
        for beta in [0.05, 0.1, 0.7] {
            assert!((sdf_to_density(0.0, beta) - 0.5 / beta).abs() < 1e-15);
            assert!(sdf_to_density(100.0 * beta, beta) < 1e-10 / beta);
            assert!((sdf_to_density(-100.0 * beta, beta) - 1.0 / beta).abs() < 1e-10 / beta);
        }
    }

    #[test]
    fn density_monotone_and_continuous() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(13);
        for _ in 0..500 {
            let beta = rng.gen::<f64>() * 0.9 + 1e-3;
            let mut a = rng.gen::<f64>() * 2.0 - 1.0;
            let mut b = rng.gen::<f64>() * 2.0 - 1.0;
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            assert!(sdf_to_density(a, beta) >= sdf_to_density(b, beta));
            let eps = 1e-12;
            let lo = sdf_to_density(-eps, beta);
            let hi = sdf_to_density(eps, beta);
            assert!((lo - hi).abs() < 1e-9 / beta);
        }
    }

    #[test]
    fn density_gradients_match_finite_differences() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(29);
        for _ in 0..200 {
            let beta = rng.gen::<f64>() * 0.5 + 0.01;
            let s = rng.gen::<f64>() * 0.4 - 0.2;
            let (dds, ddb) = sdf_to_density_grad(s, beta);
            let h = 1e-6;
            let fd_s = (sdf_to_density(s + h, beta) - sdf_to_density(s - h, beta)) / (2.0 * h);
            let fd_b = (sdf_to_density(s, beta + h) - sdf_to_density(s, beta - h)) / (2.0 * h);
            assert!((dds - fd_s).abs() / fd_s.abs().max(1e-9) < 1e-5, "{} vs {}", dds, fd_s);
            assert!((ddb - fd_b).abs() / fd_b.abs().max(1e-9) < 1e-5, "{} vs {}", ddb, fd_b);
        }
    }

    #[test]
    fn spatial_gradient_matches_finite_differences() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(101);
        for seed in 0..10 {
            let params = random_params(small_cfg(), seed);
            let (x, d, f) = random_input(&mut rng);
            let g = field_spatial_gradient(&params, x, d, &f, None).unwrap();
            let h = 1e-4;
            for axis in 0..3 {
                let mut dx = Vec3::zeros();
                dx[axis] = h;
                let plus = field_eval(&params, x + dx, d, &f, None).unwrap().sdf;
                let minus = field_eval(&params, x - dx, d, &f, None).unwrap().sdf;
                let fd = (plus - minus) / (2.0 * h);
                let rel = (g[axis] - fd).abs() / fd.abs().max(g[axis].abs()).max(1e-8);
                assert!(rel < 1e-4, "axis {}: {} vs {} (rel {})", axis, g[axis], fd, rel);
            }
        }
    }

    /// Scalar objective exercising all three upstream paths at once:
    /// J = a*s + b.c + lambda*(|grad s| - 1)^2.
    fn objective(
        params: &FieldParams,
        x: Vec3,
        d: Vec3,
        f: &[f64],
        ups: (f64, [f64; 3], f64),
    ) -> f64 {
        let mut cache = EvalCache::new();
        field_forward(params, x, d, f, None, true, &mut cache).unwrap();
        let g = cache.grad_x;
        ups.0 * cache.out.sdf
            + ups.1[0] * cache.out.color[0]
            + ups.1[1] * cache.out.color[1]
            + ups.1[2] * cache.out.color[2]
            + ups.2 * (g.norm() - 1.0).powi(2)
    }

    #[test]
    fn parameter_gradients_match_finite_differences_everywhere() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(7);
        for seed in 0..5 {
            let mut params = random_params(small_cfg(), 100 + seed);
            let (x, d, f) = random_input(&mut rng);
            let ups = (
                rng.gen::<f64>() - 0.5,
                [rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5],
                rng.gen::<f64>() * 0.5 + 0.1,
            );
            let mut cache = EvalCache::new();
            field_forward(&params, x, d, &f, None, true, &mut cache).unwrap();
            let g = cache.grad_x;
            let gn = g.norm();
            let gbar = if gn > 0.0 { g * (2.0 * ups.2 * (gn - 1.0) / gn) } else { Vec3::zeros() };
            let mut grads = GradBuffer::zeros_like(&params);
            field_backward(
                &params,
                &cache,
                &OutputBar { sdf: ups.0, color: ups.1, grad_x: Some(gbar) },
                &mut grads,
            );
            let n_slices = params.slices().len();
            // every parameter of every layer (log_beta is the last slice
            // and does not enter this objective)
            for si in 0..n_slices - 1 {
                let len = params.slices()[si].len();
                for pi in 0..len {
                    let h = 1e-4;
                    let orig = params.slices()[si][pi];
                    params.slices_mut()[si][pi] = orig + h;
                    let plus = objective(&params, x, d, &f, ups);
                    params.slices_mut()[si][pi] = orig - h;
                    let minus = objective(&params, x, d, &f, ups);
                    params.slices_mut()[si][pi] = orig;
                    let fd = (plus - minus) / (2.0 * h);
                    let an = grads.slices()[si][pi];
                    let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-7);
                    assert!(
                        rel < 1e-4,
                        "seed {} slice {} param {}: analytic {} vs fd {} (rel {})",
                        seed,
                        si,
                        pi,
                        an,
                        fd,
                        rel
                    );
                }
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let params = random_params(small_cfg(), 3);
        let mut cache = EvalCache::new();
        field_forward(
            &params,
            Vec3::new(0.1, 0.2, 0.3),
            Vec3::new(0.0, 0.0, 1.0),
            &[0.1, 0.0, -0.2, 0.4],
            None,
            true,
            &mut cache,
        )
        .unwrap();
        let mut grads = GradBuffer::zeros_like(&params);
        field_backward(&params, &cache, &OutputBar::default(), &mut grads);
        assert!(grads.slices().iter().all(|s| s.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn batch_gradient_is_sum_of_per_sample_gradients() {
        let params = random_params(small_cfg(), 12);
        let mut rng = rand::rngs::StdRng::seed_from_u64(55);
        let mut total = GradBuffer::zeros_like(&params);
        let mut summed = GradBuffer::zeros_like(&params);
        let mut cache = EvalCache::new();
        for _ in 0..6 {
            let (x, d, f) = random_input(&mut rng);
            let ups = OutputBar {
                sdf: rng.gen::<f64>() - 0.5,
                color: [rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5],
                grad_x: None,
            };
            field_forward(&params, x, d, &f, None, false, &mut cache).unwrap();
            field_backward(&params, &cache, &ups, &mut total);
            let mut single = GradBuffer::zeros_like(&params);
            field_backward(&params, &cache, &ups, &mut single);
            summed.add_from(&single);
        }
        for (a, b) in total.slices().iter().zip(summed.slices().iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_f32_exact() {
        let params = random_params(FieldConfig::default(), 77);
        let dir = std::env::temp_dir().join("texvocab_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("field.ckpt");
        let opt = OptimMoments {
            step: 1234,
            m: params.slices().iter().map(|s| vec![0.25; s.len()]).collect(),
            v: params.slices().iter().map(|s| vec![0.5; s.len()]).collect(),
        };
        save_checkpoint(&path, &params, Some(&opt)).unwrap();
        let (back, opt_back) = load_checkpoint(&path).unwrap();
        assert_eq!(back.cfg, params.cfg);
        for (a, b) in back.slices().iter().zip(params.slices().iter()).take(10) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
        let opt_back = opt_back.unwrap();
        assert_eq!(opt_back.step, 1234);
        assert_eq!(opt_back.m[0][0], 0.25);
        assert_eq!(opt_back.v[0][0], 0.5);
    }

    #[test]
    fn init_approximates_centered_sphere() {
        let params = FieldParams::init(FieldConfig::default(), 5, 0.1).unwrap();
        let f = vec![0.0; 16];
        let d = Vec3::new(0.0, 0.0, 1.0);
        let center = field_eval(&params, Vec3::zeros(), d, &f, None).unwrap().sdf;
        let far = field_eval(&params, Vec3::new(0.9, 0.0, 0.0), d, &f, None).unwrap().sdf;
        assert!(center < 0.0, "sdf at center should be negative, got {}", center);
        assert!(far > center, "sdf should grow outward: {} vs {}", far, center);
        assert!(far > 0.0, "sdf far from center should be positive, got {}", far);
    }
}
