use bpn_core::cascade::{train_step, CascadeConfig, InferConfig};
use bpn_core::data::{generate_synthetic_scene, make_batch, SynthConfig};
use bpn_core::eval::{detect_scenes, map_at_iou};
use bpn_core::network::{BackboneSpec, Bpn, NetConfig};
use bpn_core::rng::RngState;
use bpn_core::tensor::SgdConfig;

fn main() {
    let cfg = NetConfig {
        input_size: 64,
        num_classes: 4,
        pyramid_channels: 64,
        stages: 3,
        backbone: BackboneSpec { input_channels: 3, stage_channels: vec![16, 32, 64, 64, 64], convs_per_stage: 2 },
    };
    let mut net = Bpn::<f32>::new(cfg, &RngState::new(1)).unwrap();
    let synth = SynthConfig::new(64, 4);
    let root = RngState::new(2);
    let scenes: Vec<_> = (0..8)
        .map(|i| generate_synthetic_scene(&mut root.split(i), &synth, format!("s{i}")))
        .collect();
    let views: Vec<&_> = scenes.iter().collect();
    let batch = make_batch::<f32>(&views).unwrap();
    let cascade = CascadeConfig::standard(3);
    let sgd = SgdConfig { lr: 2e-3, momentum: 0.9, weight_decay: 0.005 };
    for step in 1..=500 {
        let rep = train_step(&mut net, &batch.images, &batch.annotations, &cascade, &sgd).unwrap();
        if step % 100 == 0 {
            println!("step {step}: total {:.4}", rep.total);
        }
    }
    let (dets, gts) = detect_scenes(&net, &scenes, &InferConfig::default()).unwrap();
    println!("detections: {}", dets.len());
    for e in map_at_iou(&dets, &gts, &[0.5, 0.6, 0.7]) {
        println!("overfit mAP@{:.1} {:.4}", e.iou_threshold, e.map);
    }
}
