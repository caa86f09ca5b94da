use bpn_core::cascade::{train_step, CascadeConfig};
use bpn_core::data::{generate_synthetic_scene, make_batch, SynthConfig};
use bpn_core::network::{BackboneSpec, Bpn, NetConfig};
use bpn_core::rng::RngState;
use bpn_core::tensor::SgdConfig;

fn main() {
    let lr: f64 = std::env::args().nth(1).and_then(|v| v.parse().ok()).unwrap_or(1e-3);
    let stages: usize = std::env::args().nth(2).and_then(|v| v.parse().ok()).unwrap_or(1);
    let cfg = NetConfig {
        input_size: 64,
        num_classes: 4,
        pyramid_channels: 64,
        stages,
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
    let cascade = CascadeConfig::standard(stages);
    let sgd = SgdConfig { lr, momentum: 0.9, weight_decay: 0.005 };
    for step in 1..=400 {
        let rep = train_step(&mut net, &batch.images, &batch.annotations, &cascade, &sgd).unwrap();
        if step % 50 == 0 || step == 1 {
            let s0 = &rep.stages[0];
            println!(
                "step {step}: total {:.4} cls {:.4} reg {:.4} N {}",
                rep.total, s0.cls_loss, s0.reg_loss, s0.n_pos
            );
        }
    }
}
