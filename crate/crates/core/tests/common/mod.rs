//! Shared test oracles: independent reference implementations the library
//! is checked against. Everything here is deliberately written the dumbest
//! possible way (direct loops over definitions) and kept free of the
//! library's own compute paths.

#![allow(dead_code)]

use bpn_core::boxes::BBox;
use bpn_core::rng::RngState;
use bpn_core::tensor::{Graph, NodeId, ParamStore, Shape4, Tensor};

/// Direct 7-loop convolution: the reference `conv2d` is compared against.
pub fn naive_conv2d(
    x: &Tensor<f64>,
    w: &Tensor<f64>, // (co, ci, kh, kw)
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let (n, ci, h, wdt) = (x.shape.n, x.shape.c, x.shape.h, x.shape.w);
    let (co, kh, kw) = (w.shape.n, w.shape.h, w.shape.w);
    assert_eq!(w.shape.c, ci);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wdt + 2 * pad - kw) / stride + 1;
    let mut y = Tensor::zeros(Shape4::new(n, co, ho, wo));
    for b in 0..n {
        for o in 0..co {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = bias[o];
                    for c in 0..ci {
                        for u in 0..kh {
                            for v in 0..kw {
                                let ih = (oh * stride + u) as isize - pad as isize;
                                let iw = (ow * stride + v) as isize - pad as isize;
                                if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < wdt
                                {
                                    acc += x.at(b, c, ih as usize, iw as usize)
                                        * w.at(o, c, u, v);
                                }
                            }
                        }
                    }
                    *y.at_mut(b, o, oh, ow) = acc;
                }
            }
        }
    }
    y
}

/// Transposed convolution by its textbook construction: zero-stuff the
/// input by stride 2, pad by `k - 1 - p = 2`, and convolve with the
/// spatially flipped kernel at stride 1.
pub fn zero_stuffed_deconv_s2(
    x: &Tensor<f64>,
    w: &Tensor<f64>, // (ci, co, 4, 4)
    bias: &[f64],
) -> Tensor<f64> {
    let (n, ci, h, wdt) = (x.shape.n, x.shape.c, x.shape.h, x.shape.w);
    let co = w.shape.c;
    // Zero-stuffed image: values at even coordinates, size 2h-1.
    let (sh, sw) = (2 * h - 1, 2 * wdt - 1);
    let mut stuffed = Tensor::zeros(Shape4::new(n, ci, sh, sw));
    for b in 0..n {
        for c in 0..ci {
            for ih in 0..h {
                for iw in 0..wdt {
                    *stuffed.at_mut(b, c, 2 * ih, 2 * iw) = x.at(b, c, ih, iw);
                }
            }
        }
    }
    // Flip the kernel and transpose its channel roles into conv layout.
    let mut flipped = Tensor::zeros(Shape4::new(co, ci, 4, 4));
    for c in 0..ci {
        for o in 0..co {
            for u in 0..4 {
                for v in 0..4 {
                    *flipped.at_mut(o, c, 3 - u, 3 - v) = w.at(c, o, u, v);
                }
            }
        }
    }
    naive_conv2d(&stuffed, &flipped, bias, 1, 2)
}

/// Pixel-counting IoU: counts unit cells of a 400x400 grid whose centers
/// fall inside each box. Exact for integer-coordinate boxes.
pub fn rasterized_iou(a: &BBox, b: &BBox, grid: usize) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for i in 0..grid {
        for j in 0..grid {
            let x = i as f64 + 0.5;
            let y = j as f64 + 0.5;
            let in_a = x >= a.xmin && x <= a.xmax && y >= a.ymin && y <= a.ymax;
            let in_b = x >= b.xmin && x <= b.xmax && y >= b.ymin && y <= b.ymax;
            if in_a && in_b {
                inter += 1;
            }
            if in_a || in_b {
                union += 1;
            }
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Brute-force all-point AP: rank detections, assign TP/FP greedily, then
/// enumerate every rank cut and integrate the max-interpolated envelope.
/// `dets` are `(score, image, bbox)`, `gts` are `(image, bbox)`.
pub fn brute_force_ap(dets: &[(f64, usize, BBox)], gts: &[(usize, BBox)], thr: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|a, b| {
        dets[*b]
            .0
            .partial_cmp(&dets[*a].0)
            .unwrap()
            .then(a.cmp(b))
    });
    let mut claimed = vec![false; gts.len()];
    let mut tp_flags = Vec::new();
    for &d in &order {
        let (_, img, bbox) = &dets[d];
        let mut best: Option<(f64, usize)> = None;
        for (gi, (gimg, gbox)) in gts.iter().enumerate() {
            if *gimg != *img || claimed[gi] {
                continue;
            }
            let iou = bbox.iou(gbox);
            if iou >= thr && best.map_or(true, |(bv, _)| iou > bv) {
                best = Some((iou, gi));
            }
        }
        if let Some((_, gi)) = best {
            claimed[gi] = true;
            tp_flags.push(true);
        } else {
            tp_flags.push(false);
        }
    }

    // Precision/recall at every rank cut.
    let n = tp_flags.len();
    let mut prec = Vec::with_capacity(n);
    let mut rec = Vec::with_capacity(n);
    let mut tp = 0usize;
    for (k, flag) in tp_flags.iter().enumerate() {
        if *flag {
            tp += 1;
        }
        prec.push(tp as f64 / (k + 1) as f64);
        rec.push(tp as f64 / gts.len() as f64);
    }
    let mut ap = 0.0;
    for k in 0..n {
        let prev = if k == 0 { 0.0 } else { rec[k - 1] };
        if rec[k] > prev {
            let mut best_p = 0.0f64;
            for j in k..n {
                best_p = best_p.max(prec[j]);
            }
            ap += (rec[k] - prev) * best_p;
        }
    }
    ap
}

/// Central finite differences of `f` at `x` over every element.
/// Returns the FD gradient.
pub fn fd_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        g[i] = (up - down) / (2.0 * h);
    }
    g
}

/// Relative error with a small-floor denominator.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

pub fn assert_grads_close(analytic: &[f64], fd: &[f64], tol: f64, what: &str) {
    assert_eq!(analytic.len(), fd.len(), "{what}: length mismatch");
    for (i, (a, f)) in analytic.iter().zip(fd).enumerate() {
        let e = rel_err(*a, *f);
        assert!(
            e < tol,
            "{what}[{i}]: analytic {a} vs fd {f} (rel err {e:.3e})"
        );
    }
}

/// Random tensor with values in `[lo, hi)`.
pub fn rand_tensor(shape: Shape4, rng: &mut RngState, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_vec(shape, (0..shape.count()).map(|_| rng.range(lo, hi)).collect()).unwrap()
}

/// Random tensor biased away from zero (for ReLU-style kink avoidance):
/// |values| in [margin, hi).
pub fn rand_tensor_off_zero(
    shape: Shape4,
    rng: &mut RngState,
    margin: f64,
    hi: f64,
) -> Tensor<f64> {
    Tensor::from_vec(
        shape,
        (0..shape.count())
            .map(|_| {
                let sign = if rng.chance(0.5) { 1.0 } else { -1.0 };
                sign * rng.range(margin, hi)
            })
            .collect(),
    )
    .unwrap()
}

/// Builds a scalar "probe" loss over a node: a fixed random projection
/// followed by a sum, so every output element influences the loss with a
/// distinct weight.
pub fn probe_loss(
    g: &mut Graph<f64>,
    y: NodeId,
    rng: &mut RngState,
) -> (NodeId, Tensor<f64>) {
    let shape = g.shape(y);
    let weights = rand_tensor(shape, rng, -1.0, 1.0);
    let wnode = g.input(weights.clone());
    let prod = g.mul(y, wnode).unwrap();
    (g.sum_all(prod), weights)
}

/// Gradient check scaffolding for one op: `build` maps freshly created
/// input nodes (from the given tensors) to the op output; the probe loss
/// is differentiated analytically and by FD over every listed input.
pub fn gradcheck_op(
    name: &str,
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
    h: f64,
    tol: f64,
    rng: &mut RngState,
) {
    // Analytic pass.
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let y = build(&mut g, &ids);
    let (loss, weights) = probe_loss(&mut g, y, rng);
    let mut store = ParamStore::<f64>::new();
    g.backward(loss, &mut store).unwrap();

    for (which, input) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = g
            .grad(ids[which])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; input.values.len()]);
        let f = |vals: &[f64]| -> f64 {
            let mut g2 = Graph::new();
            let ids2: Vec<NodeId> = inputs
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    if i == which {
                        g2.input(Tensor::from_vec(t.shape, vals.to_vec()).unwrap())
                    } else {
                        g2.input(t.clone())
                    }
                })
                .collect();
            let y2 = build(&mut g2, &ids2);
            let wnode = g2.input(weights.clone());
            let prod = g2.mul(y2, wnode).unwrap();
            let loss2 = g2.sum_all(prod);
            g2.value(loss2).item()
        };
        let fd = fd_gradient(f, &input.values, h);
        assert_grads_close(&analytic, &fd, tol, &format!("{name} input {which}"));
    }
}

// ---- full-network gradient check ----

use bpn_core::anchors::AnchorSet;
use bpn_core::cascade::{build_loss, plan_cascade, CascadeConfig, CascadePlan};
use bpn_core::network::{BackboneSpec, Bpn, NetConfig};

/// The micro network used by whole-model gradient checks: 64x64 input,
/// pyramid width 8, slim backbone, two foreground classes.
pub fn micro_net_cfg() -> NetConfig {
    NetConfig {
        input_size: 64,
        num_classes: 2,
        pyramid_channels: 8,
        stages: 3,
        backbone: BackboneSpec {
            input_channels: 3,
            stage_channels: vec![4, 4, 8, 8, 8],
                convs_per_stage: 2,
        },
    }
}

/// Evaluates the full detector loss for the current parameter values under
/// a frozen cascade plan. Used as the scalar function for whole-network
/// finite differencing; the plan must come from `plan_cascade` at the same
/// annotations.
pub fn frozen_plan_loss(
    net: &Bpn<f64>,
    image: &Tensor<f64>,
    anchors0: &AnchorSet,
    plan: &CascadePlan,
) -> f64 {
    let mut g = Graph::new();
    let fwd = net.forward(&mut g, image.clone()).unwrap();
    let loss = build_loss(&mut g, net, &fwd, anchors0, plan).unwrap();
    g.value(loss.total).item()
}

/// Result of the whole-network gradient check.
pub struct NetGradReport {
    pub checked: usize,
    pub worst_rel_err: f64,
    pub worst_at: String,
}

/// Checks analytic gradients of every parameter tensor against central
/// finite differences at the frozen plan. Large tensors are spot-checked on
/// `per_tensor` deterministically-sampled elements; tensors at or below
/// that size are checked exhaustively.
///
/// Biases are jittered away from zero first: a freshly-initialized network
/// has pre-activations sitting exactly on the ReLU kink (zero bias plus
/// dead upstream channels), where the subgradient convention and finite
/// differences legitimately disagree.
pub fn full_net_gradcheck(
    seed: u64,
    per_tensor: usize,
    h: f64,
) -> NetGradReport {
    let mut net = Bpn::<f64>::new(micro_net_cfg(), &RngState::new(seed)).unwrap();
    let mut rng = RngState::new(seed ^ 0xDEAD);
    let bias_ids: Vec<_> = net.store.ids().collect();
    for id in bias_ids {
        if net.store.get(id).name.ends_with(".bias") {
            let mut jit = rng.split(id.0 as u64);
            for v in &mut net.store.get_mut(id).values {
                let sign = if jit.chance(0.5) { 1.0 } else { -1.0 };
                *v += sign * jit.range(0.02, 0.08);
            }
        }
    }
    let image = rand_tensor(Shape4::new(1, 3, 64, 64), &mut rng, 0.0, 1.0);
    let annotations = vec![vec![
        (BBox::new(6.0, 8.0, 34.0, 40.0), 1u32),
        (BBox::new(30.0, 38.0, 58.0, 60.0), 2u32),
    ]];

    // Analytic pass: plan once, differentiate the frozen-plan loss.
    let mut g = Graph::new();
    let fwd = net.forward(&mut g, image.clone()).unwrap();
    let anchors0 = AnchorSet::for_feature_sizes(&fwd.feature_sizes);
    let cascade = CascadeConfig::standard(3);
    let plan = plan_cascade(&g, &net, &fwd, &anchors0, &annotations, &cascade, 64.0, 64.0)
        .unwrap();
    let loss = build_loss(&mut g, &net, &fwd, &anchors0, &plan).unwrap();
    net.store.zero_grads();
    g.backward(loss.total, &mut net.store).unwrap();

    let analytic: Vec<(String, Vec<f64>)> = net
        .store
        .iter()
        .map(|p| (p.name.clone(), p.grad.clone()))
        .collect();

    let mut checked = 0usize;
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    let ids: Vec<_> = net.store.ids().collect();
    for (pi, pid) in ids.iter().enumerate() {
        let count = net.store.get(*pid).values.len();
        let name = analytic[pi].0.clone();
        let probe: Vec<usize> = if count <= per_tensor {
            (0..count).collect()
        } else {
            // Deterministic spread over the tensor.
            let mut prng = RngState::new(seed ^ name_hash(&name));
            let mut idx: Vec<usize> =
                (0..per_tensor).map(|_| prng.below(count as u64) as usize).collect();
            idx.sort_unstable();
            idx.dedup();
            idx
        };
        for i in probe {
            let orig = net.store.get(*pid).values[i];
            net.store.get_mut(*pid).values[i] = orig + h;
            let up = frozen_plan_loss(&net, &image, &anchors0, &plan);
            net.store.get_mut(*pid).values[i] = orig - h;
            let down = frozen_plan_loss(&net, &image, &anchors0, &plan);
            net.store.get_mut(*pid).values[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = analytic[pi].1[i];
            let e = rel_err(a, fd);
            checked += 1;
            if e > worst {
                worst = e;
                worst_at = format!("{name}[{i}] analytic {a} fd {fd}");
            }
        }
    }
    NetGradReport {
        checked,
        worst_rel_err: worst,
        worst_at,
    }
}

fn name_hash(name: &str) -> u64 {
    bpn_core::rng::name_tag(name)
}

// ---- per-op gradient-check drivers (shared by op tests and acceptance) ----

pub const FD_H: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-4;

pub fn gradcheck_conv_instances() {
    for seed in 0..20u64 {
        let mut rng = RngState::new(100 + seed);
        let variants = [(1usize, 1usize, 0usize), (3, 1, 1), (3, 2, 1), (4, 2, 1)];
        let (k, stride, pad) = variants[(seed % 4) as usize];
        let (ci, co) = (1 + (seed % 3) as usize, 1 + (seed % 2) as usize);
        let h = k + 2 + (seed % 2) as usize;
        let x = rand_tensor(Shape4::new(1, ci, h, h), &mut rng, -1.0, 1.0);
        let w = rand_tensor(Shape4::new(co, ci, k, k), &mut rng, -1.0, 1.0);
        let b = rand_tensor(Shape4::new(1, co, 1, 1), &mut rng, -1.0, 1.0);
        gradcheck_op(
            "conv2d",
            &[x, w, b],
            |g, ids| g.conv2d(ids[0], ids[1], ids[2], stride, pad).unwrap(),
            FD_H,
            FD_TOL,
            &mut rng,
        );
    }
}

pub fn gradcheck_deconv_instances() {
    for seed in 0..20u64 {
        let mut rng = RngState::new(200 + seed);
        let (ci, co) = (1 + (seed % 2) as usize, 1 + (seed % 3) as usize);
        let h = 2 + (seed % 3) as usize;
        let x = rand_tensor(Shape4::new(1, ci, h, h), &mut rng, -1.0, 1.0);
        let w = rand_tensor(Shape4::new(ci, co, 4, 4), &mut rng, -1.0, 1.0);
        let b = rand_tensor(Shape4::new(1, co, 1, 1), &mut rng, -1.0, 1.0);
        gradcheck_op(
            "transposed_conv2d_s2",
            &[x, w, b],
            |g, ids| g.transposed_conv2d_s2(ids[0], ids[1], ids[2]).unwrap(),
            FD_H,
            FD_TOL,
            &mut rng,
        );
    }
}

pub fn gradcheck_add_mul_instances() {
    for seed in 0..20u64 {
        let mut rng = RngState::new(300 + seed);
        let shape = Shape4::new(1, 1 + (seed % 3) as usize, 3, 3);
        let a = rand_tensor(shape, &mut rng, -1.0, 1.0);
        let b = rand_tensor(shape, &mut rng, -1.0, 1.0);
        gradcheck_op(
            "elementwise_add",
            &[a.clone(), b.clone()],
            |g, ids| g.add(ids[0], ids[1]).unwrap(),
            FD_H,
            FD_TOL,
            &mut rng,
        );
        gradcheck_op(
            "elementwise_mul",
            &[a, b],
            |g, ids| g.mul(ids[0], ids[1]).unwrap(),
            FD_H,
            FD_TOL,
            &mut rng,
        );
    }
}

pub fn gradcheck_relu_instances() {
    for seed in 0..20u64 {
        let mut rng = RngState::new(400 + seed);
        let x = rand_tensor_off_zero(Shape4::new(1, 2, 4, 4), &mut rng, 1e-3, 1.0);
        gradcheck_op("relu", &[x], |g, ids| g.relu(ids[0]), FD_H, FD_TOL, &mut rng);
    }
}

pub fn gradcheck_l2norm_instances() {
    for seed in 0..20u64 {
        let mut rng = RngState::new(500 + seed);
        let c = 2 + (seed % 3) as usize;
        let x = rand_tensor_off_zero(Shape4::new(1, c, 2, 2), &mut rng, 0.05, 1.0);
        let s = rand_tensor(Shape4::new(1, c, 1, 1), &mut rng, 0.5, 10.0);
        gradcheck_op(
            "l2_normalize_scale",
            &[x, s],
            |g, ids| g.l2_normalize_scale(ids[0], ids[1]).unwrap(),
            FD_H,
            FD_TOL,
            &mut rng,
        );
    }
}

pub fn gradcheck_softmax_ce_instances() {
    for seed in 0..20u64 {
        let mut rng = RngState::new(600 + seed);
        let (rows, k) = (2 + (seed % 4) as usize, 2 + (seed % 3) as usize);
        let logits = rand_tensor(Shape4::rows(rows, k), &mut rng, -2.0, 2.0);
        let labels: Vec<usize> = (0..rows).map(|_| rng.below(k as u64) as usize).collect();
        let mut mask: Vec<bool> = (0..rows).map(|_| rng.chance(0.7)).collect();
        mask[0] = true;
        gradcheck_op(
            "softmax_cross_entropy",
            &[logits],
            |g, ids| g.softmax_cross_entropy(ids[0], &labels, &mask).unwrap(),
            FD_H,
            FD_TOL,
            &mut rng,
        );
    }
}

pub fn gradcheck_smooth_l1_instances() {
    for seed in 0..20u64 {
        let mut rng = RngState::new(700 + seed);
        let rows = 2 + (seed % 3) as usize;
        let pred = rand_tensor(Shape4::rows(rows, 4), &mut rng, -2.0, 2.0);
        let target: Vec<f64> = pred
            .values
            .iter()
            .map(|p| {
                let mut d = rng.range(-2.0, 2.0);
                while (d.abs() - 1.0).abs() < 5e-3 {
                    d = rng.range(-2.0, 2.0);
                }
                p - d
            })
            .collect();
        let mask: Vec<bool> = (0..rows).map(|i| i != 1).collect();
        gradcheck_op(
            "smooth_l1",
            &[pred],
            |g, ids| g.smooth_l1(ids[0], &target, &mask).unwrap(),
            FD_H,
            FD_TOL,
            &mut rng,
        );
    }
}

pub fn gradcheck_gather_concat_instances() {
    for seed in 0..20u64 {
        let mut rng = RngState::new(800 + seed);
        let x = rand_tensor(Shape4::new(2, 6, 3, 3), &mut rng, -1.0, 1.0);
        let rows = vec![
            bpn_core::tensor::RowRef { image: 0, ratio: 1, row: 2, col: 0 },
            bpn_core::tensor::RowRef { image: 1, ratio: 0, row: 0, col: 2 },
            bpn_core::tensor::RowRef { image: 0, ratio: 1, row: 2, col: 0 },
        ];
        gradcheck_op(
            "gather_concat",
            &[x],
            |g, ids| {
                let a = g.gather_rows(ids[0], rows.clone(), 3).unwrap();
                let b = g.gather_rows(ids[0], rows[..1].to_vec(), 3).unwrap();
                g.concat_rows(&[a, b]).unwrap()
            },
            FD_H,
            FD_TOL,
            &mut rng,
        );
    }
}

/// Runs every per-op gradient check suite.
pub fn gradcheck_all_ops() {
    gradcheck_conv_instances();
    gradcheck_deconv_instances();
    gradcheck_add_mul_instances();
    gradcheck_relu_instances();
    gradcheck_l2norm_instances();
    gradcheck_softmax_ce_instances();
    gradcheck_smooth_l1_instances();
    gradcheck_gather_concat_instances();
}
