use bpn_core::cascade::CascadeConfig;
use bpn_core::data::{generate_synthetic_scene, Scene, SynthConfig};
use bpn_core::eval::{detect_scenes, map_at_iou, match_statistics};
use bpn_core::network::{BackboneSpec, Bpn, NetConfig};
use bpn_core::rng::RngState;
use bpn_core::train::{run_training, TrainSettings};
use std::time::Instant;

fn gen(seed: u64, count: usize) -> Vec<Scene> {
    let cfg = SynthConfig::new(64, 4);
    let root = RngState::new(seed);
    (0..count)
        .map(|i| generate_synthetic_scene(&mut root.split(i as u64), &cfg, format!("s{seed}_{i:05}")))
        .collect()
}

fn net_cfg(stages: usize) -> NetConfig {
    NetConfig {
        input_size: 64,
        num_classes: 4,
        pyramid_channels: 64,
        stages,
        backbone: BackboneSpec { input_channels: 3, stage_channels: vec![16, 32, 64, 64, 64], convs_per_stage: 2 },
    }
}

fn train(stages: usize, thresholds: &[f64], seed: u64, scenes: &[Scene], iters: usize) -> Bpn<f32> {
    let mut net = Bpn::<f32>::new(net_cfg(stages), &RngState::new(seed)).unwrap();
    let mut settings = TrainSettings::new(iters, seed, CascadeConfig::with_thresholds(thresholds));
    settings.augment = false;
    let t0 = Instant::now();
    let mut last = String::new();
    run_training(&mut net, scenes, &settings, |it, rep, _net| {
        if it % 500 == 0 { last = rep.log_line(it); eprintln!("  {}", last); }
        Ok(())
    })
    .unwrap();
    eprintln!("  trained stages={stages} thr={thresholds:?} seed={seed} in {:.1}s", t0.elapsed().as_secs_f64());
    net
}

fn main() {
    let iters: usize = std::env::args().nth(1).and_then(|v| v.parse().ok()).unwrap_or(2000);
    let train_scenes = gen(9000, 2000);
    let held_out = gen(9500, 200);

    for seed in [1u64] {
        eprintln!("== seed {seed} ==");
        let full = train(3, &[0.5, 0.6, 0.7], seed, &train_scenes, iters);
        let stats = match_statistics(Some(&full), &held_out, &[0.5, 0.6, 0.7, 0.8, 0.9]).unwrap();
        eprint!("{}", stats.render());
        let (dets, gts) = detect_scenes(&full, &held_out, &Default::default()).unwrap();
        let evals = map_at_iou(&dets, &gts, &[0.5, 0.6, 0.7]);
        for e in &evals { eprintln!("full mAP@{:.1} {:.4}", e.iou_threshold, e.map); }

        let a = train(1, &[0.5], seed, &train_scenes, iters);
        let (dets, gts) = detect_scenes(&a, &held_out, &Default::default()).unwrap();
        let ea = map_at_iou(&dets, &gts, &[0.5, 0.6, 0.7]);
        for e in &ea { eprintln!("ssd@0.5 mAP@{:.1} {:.4}", e.iou_threshold, e.map); }

        let b = train(1, &[0.7], seed, &train_scenes, iters);
        let (dets, gts) = detect_scenes(&b, &held_out, &Default::default()).unwrap();
        let eb = map_at_iou(&dets, &gts, &[0.5, 0.6, 0.7]);
        for e in &eb { eprintln!("ssd@0.7 mAP@{:.1} {:.4}", e.iou_threshold, e.map); }
    }
}
