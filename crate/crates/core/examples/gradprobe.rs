use bpn_core::anchors::AnchorSet;
use bpn_core::boxes::BBox;
use bpn_core::cascade::{build_loss, plan_cascade, CascadeConfig};
use bpn_core::network::{BackboneSpec, Bpn, NetConfig};
use bpn_core::rng::RngState;
use bpn_core::tensor::{Graph, Shape4, Tensor};

fn main() {
    let cfg = NetConfig {
        input_size: 64,
        num_classes: 2,
        pyramid_channels: 8,
        stages: 3,
        backbone: BackboneSpec { input_channels: 3, stage_channels: vec![4, 4, 8, 8, 8], convs_per_stage: 2 },
    };
    let mut net = Bpn::<f64>::new(cfg, &RngState::new(3)).unwrap();
    let mut rng = RngState::new(4);
    let image = Tensor::from_vec(
        Shape4::new(1, 3, 64, 64),
        (0..3 * 64 * 64).map(|_| rng.uniform()).collect(),
    ).unwrap();
    let annotations = vec![vec![
        (BBox::new(6.0, 8.0, 34.0, 40.0), 1u32),
        (BBox::new(30.0, 38.0, 58.0, 60.0), 2u32),
    ]];
    let mut g = Graph::new();
    let fwd = net.forward(&mut g, image).unwrap();
    let anchors0 = AnchorSet::for_feature_sizes(&fwd.feature_sizes);
    let cascade = CascadeConfig::standard(3);
    let plan = plan_cascade(&g, &net, &fwd, &anchors0, &annotations, &cascade, 64.0, 64.0).unwrap();
    // which levels have sampled rows per stage?
    for (qi, s) in plan.stages.iter().enumerate() {
        let mut per_level = vec![0usize; 4];
        for img in &s.per_image {
            for (flat, st) in img.assignment.status.iter().enumerate() {
                if *st != bpn_core::matching::AnchorStatus::Discarded {
                    let (lvl, _) = anchors0.locate(flat, 0);
                    per_level[lvl] += 1;
                }
            }
        }
        println!("stage {} sampled per level: {:?} (pos {})", qi + 1, per_level, s.n_pos);
    }
    let loss = build_loss(&mut g, &net, &fwd, &anchors0, &plan).unwrap();
    g.backward(loss.total, &mut net.store).unwrap();
    for p in net.store.iter() {
        let norm: f64 = p.grad.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            println!("ZERO GRAD: {}", p.name);
        }
    }
    println!("done");
}
