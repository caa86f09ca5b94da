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

fn eval_breakdown(net: &Bpn<f32>, held: &[Scene], tag: &str) {
    let (dets, gts) = detect_scenes(net, held, &InferConfig::default()).unwrap();
    for q in 1..=3usize {
        let sub: Vec<_> = dets.iter().filter(|d| d.quality == q).cloned().collect();
        let e = map_at_iou(&sub, &gts, &[0.5, 0.7]);
        eprintln!(
            "{tag} q{q} only: n={} mAP@0.5 {:.4} mAP@0.7 {:.4}",
            sub.len(), e[0].map, e[1].map
        );
    }
    let e = map_at_iou(&dets, &gts, &[0.5, 0.6, 0.7]);
    eprintln!(
        "{tag} pooled: n={} mAP@0.5 {:.4} mAP@0.6 {:.4} mAP@0.7 {:.4}",
        dets.len(), e[0].map, e[1].map, e[2].map
    );
    let stats = match_statistics(Some(net), held, &[0.7]).unwrap();
    eprintln!("{tag} matched@0.7: {:?}", stats.rows[0]);
}

fn main() {
    let train_scenes = gen(9000, 2000);
    let held = gen(9500, 200);
    let cfg = NetConfig {
        input_size: 64,
        num_classes: 4,
        pyramid_channels: 64,
        stages: 3,
        backbone: BackboneSpec { input_channels: 3, stage_channels: vec![16, 32, 64, 64, 64], convs_per_stage: 2 },
    };
    let mut net = Bpn::<f32>::new(cfg, &RngState::new(1)).unwrap();

    for phase in 0..2 {
        let iters = 6000 * (phase + 1);
        let mut settings = TrainSettings::new(iters, 1, CascadeConfig::standard(3));
        settings.start_iteration = 6000 * phase;
        settings.augment = false;
        run_training(&mut net, &train_scenes, &settings, |it, rep, _| {
            if it % 1000 == 0 {
                eprintln!("  {}", rep.log_line(it));
            }
            Ok(())
        })
        .unwrap();
        eval_breakdown(&net, &held, &format!("iter{iters}"));
    }
}
