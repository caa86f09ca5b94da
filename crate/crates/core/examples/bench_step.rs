use bpn_core::cascade::{train_step, CascadeConfig};
use bpn_core::data::{generate_synthetic_scene, make_batch, SynthConfig};
use bpn_core::network::{BackboneSpec, Bpn, NetConfig};
use bpn_core::rng::RngState;
use bpn_core::tensor::SgdConfig;
use std::time::Instant;

fn main() {
    for (input, chans) in [(64usize, vec![16, 32, 64, 64, 64]), (128, vec![32, 64, 128, 128, 128])] {
        let cfg = NetConfig {
            input_size: input,
            num_classes: 4,
            pyramid_channels: 64,
            stages: 3,
            backbone: BackboneSpec { input_channels: 3, stage_channels: chans.clone(), convs_per_stage: 2 },
        };
        let mut net = Bpn::<f32>::new(cfg, &RngState::new(1)).unwrap();
        let synth = SynthConfig::new(input, 4);
        let root = RngState::new(2);
        let scenes: Vec<_> = (0..8)
            .map(|i| generate_synthetic_scene(&mut root.split(i), &synth, format!("s{i}")))
            .collect();
        let views: Vec<&_> = scenes.iter().collect();
        let batch = make_batch::<f32>(&views).unwrap();
        let cascade = CascadeConfig::standard(3);
        let sgd = SgdConfig::default();
        // warmup
        train_step(&mut net, &batch.images, &batch.annotations, &cascade, &sgd).unwrap();
        let t0 = Instant::now();
        let n = 10;
        for _ in 0..n {
            train_step(&mut net, &batch.images, &batch.annotations, &cascade, &sgd).unwrap();
        }
        let dt = t0.elapsed().as_secs_f64() / n as f64;
        println!("input {input} chans {:?}: {:.3} s/step (batch 8) -> {:.1} min / 2000 steps", chans, dt, dt * 2000.0 / 60.0);
    }
}
