use bpn_core::cascade::{CascadeConfig, InferConfig};
use bpn_core::data::{generate_synthetic_scene, Scene, SynthConfig};
use bpn_core::eval::{detect_scenes, map_at_iou, match_statistics};
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

fn net_cfg(stages: usize) -> NetConfig {
    NetConfig {
        input_size: 64,
        num_classes: 4,
        pyramid_channels: 64,
        stages,
        backbone: BackboneSpec { input_channels: 3, stage_channels: vec![16, 32, 64, 64, 64], convs_per_stage: 2 },
    }
}

fn main() {
    let total: usize = std::env::args().nth(1).and_then(|v| v.parse().ok()).unwrap_or(20000);
    let train_scenes = gen(9000, 2000);
    let held = gen(9500, 200);

    let mut net = Bpn::<f32>::new(net_cfg(3), &RngState::new(1)).unwrap();
    let settings = TrainSettings::new(total, 1, CascadeConfig::standard(3));
    let evals = [total * 3 / 5, total * 4 / 5, total];
    run_training(&mut net, &train_scenes, &settings, |it, rep, net| {
        if it % 2000 == 0 {
            println!("  {}", rep.log_line(it));
        }
        if evals.contains(&it) {
            let (dets, gts) = detect_scenes(net, &held, &InferConfig::default()).unwrap();
            let e = map_at_iou(&dets, &gts, &[0.5, 0.7]);
            for q in 1..=3usize {
                let sub: Vec<_> = dets.iter().filter(|d| d.quality == q).cloned().collect();
                let eq = map_at_iou(&sub, &gts, &[0.7]);
                println!("  full@{it} q{q}-only mAP@0.7 {:.4}", eq[0].map);
            }
            println!("full@{it}: mAP@0.5 {:.4} mAP@0.7 {:.4}", e[0].map, e[1].map);
            let stats = match_statistics(Some(net), &held, &[0.7]).unwrap();
            println!("full@{it} matched@0.7: {:?}", stats.rows[0]);
        }
        Ok(())
    })
    .unwrap();

    // Ablation (a) at the same budget.
    let mut low = Bpn::<f32>::new(net_cfg(1), &RngState::new(1)).unwrap();
    let settings = TrainSettings::new(total, 1, CascadeConfig::with_thresholds(&[0.5]));
    run_training(&mut low, &train_scenes, &settings, |it, rep, net| {
        if it % 4000 == 0 {
            println!("  abl {}", rep.log_line(it));
        }
        if it == total {
            let (dets, gts) = detect_scenes(net, &held, &InferConfig::default()).unwrap();
            let e = map_at_iou(&dets, &gts, &[0.5, 0.7]);
            println!("low@{it}: mAP@0.5 {:.4} mAP@0.7 {:.4}", e[0].map, e[1].map);
        }
        Ok(())
    })
    .unwrap();
}
