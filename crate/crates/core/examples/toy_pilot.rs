//! Desk-scale training pilot: times the toy-scene run and reports PSNR.

use std::sync::Arc;
use std::time::Instant;

use texvocab_core::body_model::{forward_kinematics, lbs_pose_mesh};
use texvocab_core::imgio::{ImageGrayF, ImageRgbF};
use texvocab_core::metrics;
use texvocab_core::neural_field::FieldConfig;
use texvocab_core::pose_vocab::{PartitionTable, PoseFeatures, TexVocab};
use texvocab_core::renderer::{render_view, FrameContext, RenderMode};
use texvocab_core::synthetic_scene::{generate_scene, SceneSpec};
use texvocab_core::texture_atlas::{build_texture_map_posed, encode_features};
use texvocab_core::trainer::{run_training, FrameData, TrainConfig};

fn main() {
    let t0 = Instant::now();
    let dir = std::env::temp_dir().join("texvocab_pilot");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    let spec = SceneSpec {
        seed: 42,
        views: 7,
        frames: 8,
        train_frames: 8,
        image_width: 64,
        image_height: 64,
        atlas_res: 128,
    };
    let full_scene = generate_scene(&spec, &dir.join("scene")).unwrap();
    // hold out the last camera: train on the first 6 views only
    let mut scene = full_scene.clone();
    scene.cameras.truncate(6);
    println!("[{:>7.1?}] scene generated", t0.elapsed());

    // atlas + features per training frame
    let mut features = Vec::new();
    for f in 0..scene.train_frames {
        let pose = &scene.poses[f];
        let transforms = forward_kinematics(&scene.template, pose).unwrap();
        let posed = lbs_pose_mesh(&scene.template, &transforms);
        let images: Vec<ImageRgbF> =
            (0..scene.cameras.len()).map(|c| scene.load_image(f, c).unwrap()).collect();
        let masks: Vec<ImageGrayF> =
            (0..scene.cameras.len()).map(|c| scene.load_mask(f, c).unwrap()).collect();
        let tex =
            build_texture_map_posed(&posed, &scene.cameras, &images, &masks, spec.atlas_res, f as u64)
                .unwrap();
        features.push(encode_features(&tex, 16, spec.seed).unwrap());
    }
    let vocab = TexVocab::build(
        &scene.poses[..scene.train_frames],
        features,
        PartitionTable::standard(),
        4,
        0.3,
    )
    .unwrap();
    println!("[{:>7.1?}] vocab built ({} keys/part)", t0.elapsed(), vocab.keys_per_part());

    let field_cfg = FieldConfig::default(); // width 64
    let cfg = TrainConfig {
        epochs: 40,
        stage1_end: 6,
        stage2_end: 20,
        batch: 4,
        rays_per_step: 1024,
        stratified_samples: 64,
        guided_samples: 32,
        steps_per_epoch: Some(
            std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(12),
        ),
        patch_size: 32,
        depth_grid_res: 96,
        eval_every: 0,
        seed: 42,
        ..TrainConfig::default()
    };
    let out = dir.join("run");
    std::fs::create_dir_all(&out).unwrap();
    let artifacts = run_training(&scene, &vocab, field_cfg, &cfg, &out).unwrap();
    println!("[{:>7.1?}] training done", t0.elapsed());

    // evaluate on training views (all cams of frame 2) and a held-out view
    let depth_caches = artifacts.depth_caches.as_ref().unwrap();
    let mut train_psnrs = Vec::new();
    for (f, cam_idx) in [(0usize, 1usize), (2, 3), (5, 5)] {
        let fd = FrameData::build(&scene, &vocab, f).unwrap();
        let ctx = FrameContext::new(
            &scene.template,
            &fd.transforms,
            &fd.posed,
            &vocab,
            &fd.features,
            &artifacts.params,
            &fd.pose,
            cfg.box_padding,
        );
        let mode = RenderMode::Guided {
            depth: &depth_caches[f][cam_idx],
            count: cfg.guided_samples,
            delta: cfg.depth_band,
            fallback_radius: cfg.ball_radius,
            fallback_count: cfg.guided_samples,
            fallback_dilation: cfg.fallback_dilation,
        };
        let view = render_view(&ctx, &scene.cameras[cam_idx], &mode, 9, false).unwrap();
        let gt = scene.load_image(f, cam_idx).unwrap();
        let psnr = metrics::psnr(&view.color, &gt).unwrap();
        train_psnrs.push(psnr);
        println!(
            "[{:>7.1?}] train view f{} c{}: psnr {:.2} dB",
            t0.elapsed(),
            f,
            cam_idx,
            psnr
        );
        view.color.save_png(&dir.join(format!("render_f{}_c{}.png", f, cam_idx))).unwrap();
    }
    let _ = Arc::strong_count(&scene.template);
    println!(
        "[{:>7.1?}] mean train psnr {:.2}",
        t0.elapsed(),
        train_psnrs.iter().sum::<f64>() / train_psnrs.len() as f64
    );
    // held-out camera 6 on a training pose
    let f = 3usize;
    let fd = FrameData::build(&scene, &vocab, f).unwrap();
    let ctx = FrameContext::new(
        &scene.template,
        &fd.transforms,
        &fd.posed,
        &vocab,
        &fd.features,
        &artifacts.params,
        &fd.pose,
        cfg.box_padding,
    );
    let held_cam = &full_scene.cameras[6];
    let mesh = texvocab_core::trainer::extract_frame_mesh(&scene, &fd, &vocab, &artifacts.params, &cfg).unwrap();
    let depth = texvocab_core::geometry_extract::rasterize_depth(&mesh, held_cam).unwrap();
    let mode = RenderMode::Guided {
        depth: &depth,
        count: cfg.guided_samples,
        delta: cfg.depth_band,
        fallback_radius: cfg.ball_radius,
        fallback_count: cfg.guided_samples,
        fallback_dilation: cfg.fallback_dilation,
    };
    let view = render_view(&ctx, held_cam, &mode, 9, false).unwrap();
    let gt = full_scene.load_image(f, 6).unwrap();
    let psnr = metrics::psnr(&view.color, &gt).unwrap();
    println!("[{:>7.1?}] held-out view f{} c6: psnr {:.2} dB", t0.elapsed(), f, psnr);
    view.color.save_png(&dir.join("render_heldout.png")).unwrap();
}
