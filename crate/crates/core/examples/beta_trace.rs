use texvocab_core::neural_field::FieldConfig;
use texvocab_core::pose_vocab::{PartitionTable, TexVocab};
use texvocab_core::synthetic_scene::{generate_scene, SceneSpec};
use texvocab_core::trainer::*;
use texvocab_core::imgio::{ImageRgbF, ImageGrayF};
use texvocab_core::body_model::{forward_kinematics, lbs_pose_mesh};
use texvocab_core::texture_atlas::{build_texture_map_posed, encode_features};
use texvocab_core::neural_field::FieldParams;
use rand::SeedableRng;
use std::time::Instant;

fn main() {
    let dir = std::env::temp_dir().join("texvocab_btrace");
    let scene_dir = dir.join("scene");
    if !scene_dir.join("template.json").exists() {
        std::fs::create_dir_all(&scene_dir).unwrap();
        let spec = SceneSpec { seed: 42, views: 7, frames: 8, train_frames: 8, image_width: 64, image_height: 64, atlas_res: 128 };
        generate_scene(&spec, &scene_dir).unwrap();
    }
    let mut scene = texvocab_core::synthetic_scene::SceneBundle::load(&scene_dir).unwrap();
    scene.cameras.truncate(6);
    let mut features = Vec::new();
    for f in 0..scene.train_frames {
        let pose = &scene.poses[f];
        let transforms = forward_kinematics(&scene.template, pose).unwrap();
        let posed = lbs_pose_mesh(&scene.template, &transforms);
        let images: Vec<ImageRgbF> = (0..scene.cameras.len()).map(|c| scene.load_image(f, c).unwrap()).collect();
        let masks: Vec<ImageGrayF> = (0..scene.cameras.len()).map(|c| scene.load_mask(f, c).unwrap()).collect();
        let tex = build_texture_map_posed(&posed, &scene.cameras, &images, &masks, 128, f as u64).unwrap();
        features.push(encode_features(&tex, 16, 42).unwrap());
    }
    let vocab = TexVocab::build(&scene.poses[..8], features, PartitionTable::standard(), 4, 0.3).unwrap();
    let data = TrainingData::load(&scene, &vocab).unwrap();
    let lr: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5e-4);
    let steps: u64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(120);
    let cfg = TrainConfig { seed: 42, lr, ..TrainConfig::default() };
    let mut params = FieldParams::init(FieldConfig::default(), 42, 0.1).unwrap();
    let mut state = AdamState::new(&params);
    let mut rng = rand::rngs::StdRng::seed_from_u64(7);
    let t0 = Instant::now();
    // stage 1 only, to watch beta and loss trajectories cheaply
    for step in 1..=steps {
        let plan = sample_step_plan(&data, &cfg, 1, step, &mut rng);
        let (losses, grads) = training_step(&scene, &data, &vocab, &params, &cfg, &plan, 1, None, true).unwrap();
        adam_step_scaled(&mut params, &grads.unwrap(), &mut state, cfg.lr_at_step(step), cfg.beta_lr_scale);
        if step % 10 == 0 {
            println!("step {:4} beta {:.4} color {:.4} mask {:.4} eik {:.3} [{:.2} s/step]",
                step, params.beta(), losses.color, losses.mask, losses.eikonal, t0.elapsed().as_secs_f64()/step as f64);
        }
    }
}
