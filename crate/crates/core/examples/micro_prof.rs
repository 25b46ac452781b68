use std::time::Instant;
use texvocab_core::body_model::{forward_kinematics, lbs_pose_mesh};
use texvocab_core::neural_field::*;
use texvocab_core::pose_vocab::{PartitionTable, PoseFeatures, TexVocab};
use texvocab_core::renderer::FrameContext;
use texvocab_core::synthetic_scene::SceneBundle;
use texvocab_core::texture_atlas::FeatureMap;
use texvocab_core::Vec3;
use rand::{Rng, SeedableRng};

fn main() {
    let scene_dir = std::env::temp_dir().join("texvocab_btrace/scene");
    let mut scene = SceneBundle::load(&scene_dir).unwrap();
    scene.cameras.truncate(6);
    let mut rng = rand::rngs::StdRng::seed_from_u64(1);
    let mut feats = Vec::new();
    for i in 0..8u64 {
        let mut f = FeatureMap::zeros(128, 16, i);
        f.values.iter_mut().for_each(|v| *v = rng.gen());
        feats.push(f);
    }
    let vocab = TexVocab::build(&scene.poses[..8], feats, PartitionTable::standard(), 4, 0.3).unwrap();
    let pose = scene.poses[1].clone();
    let transforms = forward_kinematics(&scene.template, &pose).unwrap();
    let posed = lbs_pose_mesh(&scene.template, &transforms);
    let features = PoseFeatures::for_pose(&vocab, &pose).unwrap();
    let params = FieldParams::init(FieldConfig::default(), 42, 0.1).unwrap();
    let ctx = FrameContext::new(&scene.template, &transforms, &posed, &vocab, &features, &params, &pose, 0.1);
    println!("mesh: {} verts {} faces", posed.vertices.len(), scene.template.faces.len());

    let n = 20000;
    let pts: Vec<Vec3> = (0..n).map(|_| Vec3::new(rng.gen::<f64>()*1.6-0.8, rng.gen::<f64>()*1.8-1.0, rng.gen::<f64>()*1.6-0.8)).collect();
    // 1. BVH projection
    let t0 = Instant::now();
    let mut acc = 0.0;
    for p in &pts { acc += posed.project(*p).dist2; }
    println!("bvh project: {:.2} us/query (sum {:.1})", t0.elapsed().as_secs_f64()*1e6/n as f64, acc);
    // 2. full prep (project + invert + attention)
    let t0 = Instant::now();
    for p in &pts { let _ = ctx.prep_sample(*p).unwrap(); }
    println!("prep_sample: {:.2} us", t0.elapsed().as_secs_f64()*1e6/n as f64);
    // 3. feature gather
    let prep = ctx.prep_sample(pts[0]).unwrap();
    let mut feat = vec![0.0; 16];
    let t0 = Instant::now();
    for _ in 0..n { ctx.gather_feature(&prep, &mut feat); }
    println!("gather: {:.2} us", t0.elapsed().as_secs_f64()*1e6/n as f64);
    // 4. field forward (no grad)
    let d = Vec3::new(0.0, 0.0, 1.0);
    let mut cache = EvalCache::new();
    let t0 = Instant::now();
    for p in pts.iter().take(n) { field_forward(&params, *p * 0.3, d, &feat, None, false, &mut cache).unwrap(); }
    println!("field fwd: {:.2} us", t0.elapsed().as_secs_f64()*1e6/n as f64);
    // 5. forward with tangents
    let t0 = Instant::now();
    for p in pts.iter().take(n) { field_forward(&params, *p * 0.3, d, &feat, None, true, &mut cache).unwrap(); }
    println!("field fwd+tan: {:.2} us", t0.elapsed().as_secs_f64()*1e6/n as f64);
    // 6. backward (no tangent upstream)
    field_forward(&params, pts[0], d, &feat, None, true, &mut cache).unwrap();
    let mut grads = GradBuffer::zeros_like(&params);
    let ups = OutputBar { sdf: 0.3, color: [0.1, -0.2, 0.05], grad_x: None };
    let t0 = Instant::now();
    for _ in 0..n { field_backward(&params, &cache, &ups, &mut grads); }
    println!("field bwd: {:.2} us", t0.elapsed().as_secs_f64()*1e6/n as f64);
    // 7. backward with tangent upstream
    let ups = OutputBar { sdf: 0.3, color: [0.1, -0.2, 0.05], grad_x: Some(Vec3::new(0.1, 0.2, -0.1)) };
    let t0 = Instant::now();
    for _ in 0..n { field_backward(&params, &cache, &ups, &mut grads); }
    println!("field bwd+tan: {:.2} us", t0.elapsed().as_secs_f64()*1e6/n as f64);
}
