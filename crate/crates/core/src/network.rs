//! The detector network: a desk-scale backbone producing four feature maps
//! at strides 8/16/32/64, a feature pyramid (FP) fusing deep into shallow
//! through transposed convolutions, a reverse feature pyramid (rFP) fusing
//! shallow into deep through stride-2 convolutions, and per-level
//! classification/regression heads for each quality branch.
//!
//! Branch roles during training: the raw backbone features drive the
//! low-quality stage, the FP features the mid-quality stage, and the rFP
//! features the high-quality stage.

use crate::error::{Error, Result};
use crate::rng::{name_tag, RngState};
use crate::scalar::Scalar;
use crate::tensor::{xavier_init, Graph, NodeId, ParamId, ParamStore, Tensor};

/// Number of prediction levels (strides 8, 16, 32, 64).
pub const LEVELS: usize = 4;
/// Learned-norm rescaling targets for the stride-8 and stride-16 features.
pub const NORM_SCALE_INITS: [f64; 2] = [10.0, 8.0];

/// Backbone layout: five stages of 3x3 convolutions (the first conv of
/// each stage at stride 2), plus two extra convolutions extending the
/// pyramid to stride 64.
#[derive(Clone, Debug)]
pub struct BackboneSpec {
    pub input_channels: usize,
    pub stage_channels: Vec<usize>,
    /// Convolutions per stage (>= 1); the stride-2 conv counts as one.
    pub convs_per_stage: usize,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec {
            input_channels: 3,
            stage_channels: vec![32, 64, 128, 128, 128],
            convs_per_stage: 2,
        }
    }
}

impl BackboneSpec {
    /// Channel counts of the four prediction taps.
    pub fn tap_channels(&self) -> [usize; LEVELS] {
        let c = &self.stage_channels;
        [c[2], c[3], c[4], c[4]]
    }
}

/// Everything needed to build or reload a network.
#[derive(Clone, Debug)]
pub struct NetConfig {
    pub input_size: usize,
    /// Foreground class count; classifier heads emit `num_classes + 1` scores.
    pub num_classes: usize,
    pub pyramid_channels: usize,
    /// Number of quality branches to build (1..=3).
    pub stages: usize,
    pub backbone: BackboneSpec,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            input_size: 128,
            num_classes: 4,
            pyramid_channels: 64,
            stages: 3,
            backbone: BackboneSpec::default(),
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % 64 != 0 {
            return Err(Error::invalid(format!(
                "input_size {} must be a positive multiple of 64",
                self.input_size
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::invalid("num_classes must be >= 1"));
        }
        if !(1..=3).contains(&self.stages) {
            return Err(Error::invalid(format!("stages {} outside 1..=3", self.stages)));
        }
        if self.backbone.stage_channels.len() != 5 {
            return Err(Error::invalid("backbone needs exactly 5 stage channel counts"));
        }
        if self.backbone.convs_per_stage == 0 {
            return Err(Error::invalid("backbone needs at least one conv per stage"));
        }
        if self.pyramid_channels == 0 {
            return Err(Error::invalid("pyramid_channels must be >= 1"));
        }
        Ok(())
    }

    /// Spatial sizes of the four prediction levels for a given input size.
    pub fn feature_sizes(&self, input: usize) -> [(usize, usize); LEVELS] {
        let mut out = [(0, 0); LEVELS];
        for (i, stride) in crate::anchors::LEVEL_STRIDES.iter().enumerate() {
            out[i] = (input / stride, input / stride);
        }
        out
    }

    pub fn classes_with_background(&self) -> usize {
        self.num_classes + 1
    }
}

struct ConvParams {
    w: ParamId,
    b: ParamId,
}

type StageConvs = Vec<ConvParams>;

/// Classification and regression head outputs for one (quality, level).
#[derive(Clone, Copy, Debug)]
pub struct HeadPair {
    pub cls: NodeId,
    pub reg: NodeId,
}

/// Node handles from one forward pass.
#[derive(Debug)]
pub struct ForwardPass {
    pub image: NodeId,
    /// `features[q][l]`: quality branch q (0 = backbone, 1 = FP, 2 = rFP).
    pub features: Vec<[NodeId; LEVELS]>,
    /// `heads[q][l]`: cls `(n, 3*(K+1), h, w)` and reg `(n, 12, h, w)`.
    pub heads: Vec<[HeadPair; LEVELS]>,
    pub feature_sizes: [(usize, usize); LEVELS],
}

/// The full parameterized network.
pub struct Bpn<F: Scalar> {
    pub cfg: NetConfig,
    pub store: ParamStore<F>,
    backbone_convs: Vec<StageConvs>,
    extra_convs: (ConvParams, ConvParams),
    norm_scales: [ParamId; 2],
    fp_lateral: Vec<ConvParams>,
    fp_up: Vec<ConvParams>,
    rfp_lateral: Vec<ConvParams>,
    rfp_down: Vec<ConvParams>,
    head_cls: Vec<[ConvParams; LEVELS]>,
    head_reg: Vec<[ConvParams; LEVELS]>,
}

fn add_conv<F: Scalar>(
    store: &mut ParamStore<F>,
    rng: &RngState,
    name: &str,
    co: usize,
    ci: usize,
    kh: usize,
    kw: usize,
) -> Result<ConvParams> {
    let fan_in = ci * kh * kw;
    let fan_out = co * kh * kw;
    let mut r = rng.split(name_tag(name));
    let w = store.add(
        format!("{name}.weight"),
        vec![co, ci, kh, kw],
        xavier_init(fan_in, fan_out, co * ci * kh * kw, &mut r),
    )?;
    let b = store.add(format!("{name}.bias"), vec![co], vec![F::zero(); co])?;
    Ok(ConvParams { w, b })
}

/// Transposed-conv kernel is stored `(ci, co, 4, 4)`.
fn add_deconv<F: Scalar>(
    store: &mut ParamStore<F>,
    rng: &RngState,
    name: &str,
    ci: usize,
    co: usize,
) -> Result<ConvParams> {
    let mut r = rng.split(name_tag(name));
    let w = store.add(
        format!("{name}.weight"),
        vec![ci, co, 4, 4],
        xavier_init(ci * 16, co * 16, ci * co * 16, &mut r),
    )?;
    let b = store.add(format!("{name}.bias"), vec![co], vec![F::zero(); co])?;
    Ok(ConvParams { w, b })
}

impl<F: Scalar> Bpn<F> {
    /// Builds a freshly initialized network: xavier weights, zero biases,
    /// norm scales at their target inits.
    pub fn new(cfg: NetConfig, rng: &RngState) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let bb = &cfg.backbone;

        let mut backbone_convs = Vec::new();
        let mut prev = bb.input_channels;
        for (i, ch) in bb.stage_channels.iter().enumerate() {
            let mut stage = Vec::new();
            for c in 0..bb.convs_per_stage {
                stage.push(add_conv(
                    &mut store,
                    rng,
                    &format!("backbone.s{}.c{}", i + 1, c + 1),
                    *ch,
                    if c == 0 { prev } else { *ch },
                    3,
                    3,
                )?);
            }
            backbone_convs.push(stage);
            prev = *ch;
        }
        let extra_convs = (
            add_conv(&mut store, rng, "backbone.extra.c1", prev, prev, 3, 3)?,
            add_conv(&mut store, rng, "backbone.extra.c2", prev, prev, 3, 3)?,
        );
        let taps = bb.tap_channels();
        let norm_scales = [
            store.add(
                "backbone.norm8.scale",
                vec![taps[0]],
                vec![F::from_f64(NORM_SCALE_INITS[0]); taps[0]],
            )?,
            store.add(
                "backbone.norm16.scale",
                vec![taps[1]],
                vec![F::from_f64(NORM_SCALE_INITS[1]); taps[1]],
            )?,
        ];

        let p = cfg.pyramid_channels;
        let mut fp_lateral = Vec::new();
        let mut fp_up = Vec::new();
        if cfg.stages >= 2 {
            for l in 0..LEVELS {
                fp_lateral.push(add_conv(
                    &mut store,
                    rng,
                    &format!("fp.L{}.lateral", l + 1),
                    p,
                    taps[l],
                    3,
                    3,
                )?);
            }
            // One upsampler per fused level (none at the deepest).
            for l in 0..LEVELS - 1 {
                fp_up.push(add_deconv(&mut store, rng, &format!("fp.L{}.up", l + 1), p, p)?);
            }
        }

        let mut rfp_lateral = Vec::new();
        let mut rfp_down = Vec::new();
        if cfg.stages >= 3 {
            for l in 0..LEVELS {
                rfp_lateral.push(add_conv(
                    &mut store,
                    rng,
                    &format!("rfp.L{}.lateral", l + 1),
                    p,
                    p,
                    3,
                    3,
                )?);
            }
            // One downsampler per fused level (none at the shallowest).
            for l in 1..LEVELS {
                rfp_down.push(add_conv(
                    &mut store,
                    rng,
                    &format!("rfp.L{}.down", l + 1),
                    p,
                    p,
                    3,
                    3,
                )?);
            }
        }

        let mut head_cls = Vec::new();
        let mut head_reg = Vec::new();
        let cls_out = 3 * cfg.classes_with_background();
        for q in 1..=cfg.stages {
            let cin = if q == 1 { taps } else { [p; LEVELS] };
            let mut cls_row = Vec::new();
            let mut reg_row = Vec::new();
            for l in 0..LEVELS {
                cls_row.push(add_conv(
                    &mut store,
                    rng,
                    &format!("head.Q{q}.L{}.cls", l + 1),
                    cls_out,
                    cin[l],
                    3,
                    3,
                )?);
                reg_row.push(add_conv(
                    &mut store,
                    rng,
                    &format!("head.Q{q}.L{}.reg", l + 1),
                    3 * 4,
                    cin[l],
                    3,
                    3,
                )?);
            }
            head_cls.push(cls_row.try_into().map_err(|_| Error::invalid("level count"))?);
            head_reg.push(reg_row.try_into().map_err(|_| Error::invalid("level count"))?);
        }

        Ok(Bpn {
            cfg,
            store,
            backbone_convs,
            extra_convs,
            norm_scales,
            fp_lateral,
            fp_up,
            rfp_lateral,
            rfp_down,
            head_cls,
            head_reg,
        })
    }

    /// Builds the network and fills it from a checkpoint file.
    pub fn from_checkpoint(cfg: NetConfig, path: &std::path::Path) -> Result<Self> {
        let mut net = Bpn::new(cfg, &RngState::new(0))?;
        crate::tensor::load_checkpoint_file(&mut net.store, path)?;
        Ok(net)
    }

    fn conv(
        &self,
        g: &mut Graph<F>,
        x: NodeId,
        p: &ConvParams,
        stride: usize,
        label: &str,
    ) -> Result<NodeId> {
        let w = g.param(&self.store, p.w);
        let b = g.param(&self.store, p.b);
        let y = g.conv2d(x, w, b, stride, 1)?;
        g.set_label(y, label);
        Ok(y)
    }

    /// Runs the whole forward pass and returns handles to every branch
    /// feature and head output.
    pub fn forward(&self, g: &mut Graph<F>, image: Tensor<F>) -> Result<ForwardPass> {
        let shape = image.shape;
        if shape.c != self.cfg.backbone.input_channels {
            return Err(Error::ShapeMismatch {
                op: "backbone_forward",
                lhs: shape.to_string(),
                rhs: format!("{} input channels", self.cfg.backbone.input_channels),
            });
        }
        if shape.h % 64 != 0 || shape.w % 64 != 0 || shape.h == 0 {
            return Err(Error::invalid(format!(
                "backbone_forward: input {shape} not divisible by the deepest stride 64"
            )));
        }

        let image_node = g.input(image);
        let mut x = image_node;
        let mut stage_out = Vec::new();
        for (i, stage) in self.backbone_convs.iter().enumerate() {
            for (c, conv) in stage.iter().enumerate() {
                let stride = if c == 0 { 2 } else { 1 };
                x = self.conv(g, x, conv, stride, &format!("backbone.s{}.c{}", i + 1, c + 1))?;
                x = g.relu(x);
            }
            stage_out.push(x);
        }
        let mut x = self.conv(g, x, &self.extra_convs.0, 1, "backbone.extra.c1")?;
        x = g.relu(x);
        x = self.conv(g, x, &self.extra_convs.1, 2, "backbone.extra.c2")?;
        let extra = g.relu(x);

        // Taps at strides 8/16/32/64; the first two are norm-rescaled.
        let n8 = g.param(&self.store, self.norm_scales[0]);
        let n16 = g.param(&self.store, self.norm_scales[1]);
        let t1 = g.l2_normalize_scale(stage_out[2], n8)?;
        let t2 = g.l2_normalize_scale(stage_out[3], n16)?;
        let backbone = [t1, t2, stage_out[4], extra];

        let mut features = vec![backbone];

        if self.cfg.stages >= 2 {
            // FP: deepest level first, then fuse downward.
            let mut fp = [NodeId(0); LEVELS];
            for l in (0..LEVELS).rev() {
                let lat = &self.fp_lateral[l];
                let deeper = if l + 1 < LEVELS {
                    Some((fp[l + 1], &self.fp_up[l]))
                } else {
                    None
                };
                let deeper = match deeper {
                    Some((d, up)) => {
                        let uw = g.param(&self.store, up.w);
                        let ub = g.param(&self.store, up.b);
                        Some((d, uw, ub))
                    }
                    None => None,
                };
                let lw = g.param(&self.store, lat.w);
                let lb = g.param(&self.store, lat.b);
                fp[l] = fp_fuse(g, deeper, backbone[l], lw, lb)?;
                g.set_label(fp[l], format!("fp.L{}", l + 1));
            }
            features.push(fp);

            if self.cfg.stages >= 3 {
                // rFP: shallowest level first, then fuse upward; laterals
                // read the FP branch.
                let mut rfp = [NodeId(0); LEVELS];
                for l in 0..LEVELS {
                    let lat = &self.rfp_lateral[l];
                    let shallower = if l > 0 {
                        let down = &self.rfp_down[l - 1];
                        let dw = g.param(&self.store, down.w);
                        let db = g.param(&self.store, down.b);
                        Some((rfp[l - 1], dw, db))
                    } else {
                        None
                    };
                    let lw = g.param(&self.store, lat.w);
                    let lb = g.param(&self.store, lat.b);
                    rfp[l] = rfp_fuse(g, shallower, fp[l], lw, lb)?;
                    g.set_label(rfp[l], format!("rfp.L{}", l + 1));
                }
                features.push(rfp);
            }
        }

        let mut heads = Vec::new();
        for q in 0..self.cfg.stages {
            let mut row = Vec::new();
            for l in 0..LEVELS {
                let cls = self.conv(
                    g,
                    features[q][l],
                    &self.head_cls[q][l],
                    1,
                    &format!("head.Q{}.L{}.cls", q + 1, l + 1),
                )?;
                let reg = self.conv(
                    g,
                    features[q][l],
                    &self.head_reg[q][l],
                    1,
                    &format!("head.Q{}.L{}.reg", q + 1, l + 1),
                )?;
                row.push(HeadPair { cls, reg });
            }
            heads.push(row.try_into().map_err(|_| Error::invalid("level count"))?);
        }

        let mut feature_sizes = [(0, 0); LEVELS];
        for l in 0..LEVELS {
            let s = g.shape(features[0][l]);
            feature_sizes[l] = (s.h, s.w);
        }

        Ok(ForwardPass {
            image: image_node,
            features,
            heads,
            feature_sizes,
        })
    }
}

/// Feature-pyramid fusion at one level: upsample the deeper FP feature with
/// a stride-2 transposed conv, add the 3x3 lateral of the previous branch,
/// then ReLU. The deepest level has no deeper input and reduces to the
/// lateral path alone.
pub fn fp_fuse<F: Scalar>(
    g: &mut Graph<F>,
    deeper: Option<(NodeId, NodeId, NodeId)>,
    lateral_src: NodeId,
    lat_w: NodeId,
    lat_b: NodeId,
) -> Result<NodeId> {
    let lat = g.conv2d(lateral_src, lat_w, lat_b, 1, 1)?;
    let pre = match deeper {
        Some((d, uw, ub)) => {
            let ds = g.shape(d);
            let ls = g.shape(lat);
            if 2 * ds.h != ls.h || 2 * ds.w != ls.w {
                return Err(Error::ShapeMismatch {
                    op: "fp_fuse",
                    lhs: format!("deeper {ds} upsampled x2"),
                    rhs: format!("lateral {ls}"),
                });
            }
            let up = g.transposed_conv2d_s2(d, uw, ub)?;
            g.add(up, lat)?
        }
        None => lat,
    };
    Ok(g.relu(pre))
}

/// Reverse fusion at one level: downsample the shallower rFP feature with a
/// stride-2 3x3 conv, add the 3x3 lateral of the previous branch, then
/// ReLU. The shallowest level reduces to the lateral path alone.
pub fn rfp_fuse<F: Scalar>(
    g: &mut Graph<F>,
    shallower: Option<(NodeId, NodeId, NodeId)>,
    lateral_src: NodeId,
    lat_w: NodeId,
    lat_b: NodeId,
) -> Result<NodeId> {
    let lat = g.conv2d(lateral_src, lat_w, lat_b, 1, 1)?;
    let pre = match shallower {
        Some((s, dw, db)) => {
            let ss = g.shape(s);
            let ls = g.shape(lat);
            if ss.h != 2 * ls.h || ss.w != 2 * ls.w {
                return Err(Error::ShapeMismatch {
                    op: "rfp_fuse",
                    lhs: format!("shallower {ss} downsampled x2"),
                    rhs: format!("lateral {ls}"),
                });
            }
            let down = g.conv2d(s, dw, db, 2, 1)?;
            g.add(down, lat)?
        }
        None => lat,
    };
    Ok(g.relu(pre))
}

/// Per-anchor view of a head output: returns `rows x cols` values in flat
/// anchor order `(row, col, ratio)` for one image. Used for score reading
/// and hard-negative mining, outside the autodiff graph.
pub fn head_rows<F: Scalar>(head: &Tensor<F>, image: usize, cols: usize) -> Vec<f64> {
    let s = head.shape;
    let ratios = s.c / cols;
    let mut out = Vec::with_capacity(s.h * s.w * ratios * cols);
    for row in 0..s.h {
        for col in 0..s.w {
            for ratio in 0..ratios {
                for k in 0..cols {
                    out.push(head.at(image, ratio * cols + k, row, col).as_f64());
                }
            }
        }
    }
    out
}
