use bpn_core::cascade::{CascadeConfig, InferConfig};
use bpn_core::data::{generate_synthetic_scene, Scene, SynthConfig};
use bpn_core::eval::{detect_scenes, map_at_iou};
use bpn_core::network::{BackboneSpec, Bpn, NetConfig};
use bpn_core::rng::RngState;
use bpn_core::train::{run_training, TrainSettings};

fn gen(seed: u64, count: usize) -> Vec<Scene> {
    let cfg = SynthConfig::new(64, 4);
    let root = RngState::new(seed);
    (0..count)
        .map(|i| generate_synthetic_scene(&mut root.split(i as u64), &cfg, format!("s{seed}_{i:05}")))
        .collect()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let iters: usize = args.get(1).and_then(|v| v.parse().ok()).unwrap_or(12000);
    let thr: f64 = args.get(2).and_then(|v| v.parse().ok()).unwrap_or(0.5);
    let seed: u64 = args.get(3).and_then(|v| v.parse().ok()).unwrap_or(1);
    let train_scenes = gen(9000, 2000);
    let held = gen(9500, 200);
    let cfg = NetConfig {
        input_size: 64,
        num_classes: 4,
        pyramid_channels: 64,
        stages: 1,
        backbone: BackboneSpec { input_channels: 3, stage_channels: vec![16, 32, 64, 64, 64], convs_per_stage: 2 },
    };
    let mut net = Bpn::<f32>::new(cfg, &RngState::new(seed)).unwrap();
    let mut settings = TrainSettings::new(iters, seed, CascadeConfig::with_thresholds(&[thr]));
    settings.augment = false;
    run_training(&mut net, &train_scenes, &settings, |it, rep, _| {
        if it % 2000 == 0 {
            eprintln!("  {}", rep.log_line(it));
        }
        Ok(())
    })
    .unwrap();
    let (dets, gts) = detect_scenes(&net, &held, &InferConfig::default()).unwrap();
    let e = map_at_iou(&dets, &gts, &[0.5, 0.6, 0.7]);
    println!(
        "single-stage thr {thr} seed {seed} @{iters}: mAP 0.5/0.6/0.7 = {:.4} {:.4} {:.4}",
        e[0].map, e[1].map, e[2].map
    );
}
