//! The two-stream multitask network.
//!
//! A reference stream encodes the target (and its parts) into per-box
//! modulation vectors; a test stream produces a feature map whose
//! channel-modulated RoI features feed a shared FC trunk with two output
//! heads: an overlap (IoU) regressor and a normalized center-offset (CLE)
//! regressor. Both streams share every convolution weight.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::boxgeom::BoxXYWH;
use crate::diffcore::{
    load_checkpoint, save_checkpoint, ConvSpec, DeconvSpec, Graph, NodeId, ParamStore, Tensor,
};
use crate::{Error, Result};

/// Negative slope shared by every leaky-ReLU in the network.
pub const LEAKY_SLOPE: f64 = 0.1;

/// Feature stride of the fused map relative to input pixels.
pub const FEATURE_STRIDE: usize = 8;

fn default_input_size() -> usize {
    288
}
fn default_width_spatial() -> usize {
    64
}
fn default_width_semantic() -> usize {
    128
}
fn default_fused_channels() -> usize {
    64
}
fn default_bam_dilation() -> usize {
    4
}
fn default_ref_pool_bins() -> usize {
    3
}
fn default_test_pool_bins() -> usize {
    5
}
fn default_head_hidden() -> usize {
    256
}
fn default_true() -> bool {
    true
}

/// Network hyperparameters. Serialized into every checkpoint header.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    #[serde(default = "default_input_size")]
    pub input_size: usize,
    /// Channels of the stride-8 backbone tap.
    #[serde(default = "default_width_spatial")]
    pub width_spatial: usize,
    /// Channels of the stride-16 backbone tap.
    #[serde(default = "default_width_semantic")]
    pub width_semantic: usize,
    /// Channels of the fused feature map (C_f).
    #[serde(default = "default_fused_channels")]
    pub fused_channels: usize,
    #[serde(default = "default_bam_dilation")]
    pub bam_dilation: usize,
    #[serde(default = "default_ref_pool_bins")]
    pub ref_pool_bins: usize,
    #[serde(default = "default_test_pool_bins")]
    pub test_pool_bins: usize,
    #[serde(default = "default_head_hidden")]
    pub head_hidden: usize,
    #[serde(default = "default_true")]
    pub enable_bam: bool,
    #[serde(default = "default_true")]
    pub enable_cle_head: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            input_size: default_input_size(),
            width_spatial: default_width_spatial(),
            width_semantic: default_width_semantic(),
            fused_channels: default_fused_channels(),
            bam_dilation: default_bam_dilation(),
            ref_pool_bins: default_ref_pool_bins(),
            test_pool_bins: default_test_pool_bins(),
            head_hidden: default_head_hidden(),
            enable_bam: true,
            enable_cle_head: true,
        }
    }
}

impl NetConfig {
    /// Smallest config that still exercises every code path; used by the
    /// finite-difference checks.
    pub fn tiny() -> Self {
        NetConfig {
            input_size: 48,
            width_spatial: 8,
            width_semantic: 16,
            fused_channels: 8,
            head_hidden: 32,
            ..NetConfig::default()
        }
    }

    /// Desk-scale config used for CPU training runs.
    pub fn desk() -> Self {
        NetConfig {
            input_size: 144,
            width_spatial: 16,
            width_semantic: 32,
            fused_channels: 16,
            head_hidden: 64,
            ..NetConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % 16 != 0 {
            return Err(Error::Config(format!(
                "input_size {} must be a positive multiple of 16",
                self.input_size
            )));
        }
        if self.test_pool_bins != 5 {
            return Err(Error::Config(format!(
                "test_pool_bins is fixed at 5, got {}",
                self.test_pool_bins
            )));
        }
        if self.ref_pool_bins != 3 {
            return Err(Error::Config(format!(
                "ref_pool_bins must be 3 to match the 3x3 modulation kernel, got {}",
                self.ref_pool_bins
            )));
        }
        if self.width_spatial < 4 || self.width_spatial % 4 != 0 {
            return Err(Error::Config(format!(
                "width_spatial {} must be a positive multiple of 4",
                self.width_spatial
            )));
        }
        if self.fused_channels < 4 || self.fused_channels % 4 != 0 {
            return Err(Error::Config(format!(
                "fused_channels {} must be a positive multiple of 4",
                self.fused_channels
            )));
        }
        if self.width_semantic == 0 || self.head_hidden == 0 || self.bam_dilation == 0 {
            return Err(Error::Config(
                "width_semantic, head_hidden and bam_dilation must be positive".to_string(),
            ));
        }
        Ok(())
    }

    /// Side length of the fused (stride-8) feature map.
    pub fn feat_side(&self) -> usize {
        self.input_size / FEATURE_STRIDE
    }

    fn stem_width(&self) -> usize {
        self.width_spatial / 4
    }

    fn stage1_width(&self) -> usize {
        self.width_spatial / 2
    }
}

// ---------------------------------------------------------------------------
// Parameter initialization
// ---------------------------------------------------------------------------

struct Init {
    rng: ChaCha12Rng,
}

impl Init {
    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("std is finite and positive");
        let data: Vec<f64> = (0..shape.iter().product::<usize>())
            .map(|_| dist.sample(&mut self.rng))
            .collect();
        Tensor::from_vec(shape, data).expect("shape matches data")
    }

    /// Variance-scaling (fan-in) initializer for a conv block plus its
    /// batch-norm parameters.
    fn conv(&mut self, store: &mut ParamStore, name: &str, o: usize, i: usize, kh: usize, kw: usize) -> Result<()> {
        let std = (2.0 / (i * kh * kw) as f64).sqrt();
        store.insert(&format!("{name}.weight"), self.normal(&[o, i, kh, kw], std), true)?;
        store.insert(&format!("{name}.bias"), Tensor::zeros(&[o]), true)?;
        self.bn(store, name, o)
    }

    /// Output conv layer: no norm/activation follows, smaller init.
    fn conv_out(&mut self, store: &mut ParamStore, name: &str, o: usize, i: usize, kh: usize, kw: usize) -> Result<()> {
        let std = (1.0 / (i * kh * kw) as f64).sqrt();
        store.insert(&format!("{name}.weight"), self.normal(&[o, i, kh, kw], std), true)?;
        store.insert(&format!("{name}.bias"), Tensor::zeros(&[o]), true)
    }

    fn deconv(&mut self, store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize) -> Result<()> {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        store.insert(&format!("{name}.weight"), self.normal(&[cin, cout, k, k], std), true)?;
        store.insert(&format!("{name}.bias"), Tensor::zeros(&[cout]), true)?;
        self.bn(store, name, cout)
    }

    fn fc(&mut self, store: &mut ParamStore, name: &str, o: usize, i: usize) -> Result<()> {
        let std = (2.0 / i as f64).sqrt();
        store.insert(&format!("{name}.weight"), self.normal(&[o, i], std), true)?;
        store.insert(&format!("{name}.bias"), Tensor::zeros(&[o]), true)?;
        self.bn(store, name, o)
    }

    fn fc_out(&mut self, store: &mut ParamStore, name: &str, o: usize, i: usize) -> Result<()> {
        let std = (1.0 / i as f64).sqrt();
        store.insert(&format!("{name}.weight"), self.normal(&[o, i], std), true)?;
        store.insert(&format!("{name}.bias"), Tensor::zeros(&[o]), true)
    }

    fn bn(&mut self, store: &mut ParamStore, name: &str, c: usize) -> Result<()> {
        store.insert(&format!("{name}.bn.weight"), Tensor::full(&[c], 1.0), true)?;
        store.insert(&format!("{name}.bn.bias"), Tensor::zeros(&[c]), true)?;
        store.insert(&format!("{name}.bn.running_mean"), Tensor::zeros(&[c]), false)?;
        store.insert(&format!("{name}.bn.running_var"), Tensor::full(&[c], 1.0), false)
    }
}

/// Creates every network parameter with a deterministic seeded init.
pub fn init_params(cfg: &NetConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut init = Init { rng: ChaCha12Rng::seed_from_u64(seed) };
    let (c0, c1, cs, cd, cf) =
        (cfg.stem_width(), cfg.stage1_width(), cfg.width_spatial, cfg.width_semantic, cfg.fused_channels);

    init.conv(&mut store, "backbone.stem", c0, 3, 3, 3)?;
    init.conv(&mut store, "backbone.stage1.a", c1, c0, 3, 3)?;
    init.conv(&mut store, "backbone.stage1.b", c1, c1, 3, 3)?;
    init.conv(&mut store, "backbone.stage2.a", cs, c1, 3, 3)?;
    init.conv(&mut store, "backbone.stage2.b", cs, cs, 3, 3)?;
    init.conv(&mut store, "backbone.stage3.a", cd, cs, 3, 3)?;
    init.conv(&mut store, "backbone.stage3.b", cd, cd, 3, 3)?;

    let pc = cf / 4;
    init.conv(&mut store, "msaf.p1.c1", pc, cs, 1, 1)?;
    init.conv(&mut store, "msaf.p2.c1", pc, cs, 1, 1)?;
    init.conv(&mut store, "msaf.p2.c2", pc, pc, 1, 3)?;
    init.conv(&mut store, "msaf.p2.c3", pc, pc, 3, 1)?;
    init.conv(&mut store, "msaf.p3.c1", pc, cs, 1, 1)?;
    init.conv(&mut store, "msaf.p3.c2", pc, pc, 1, 5)?;
    init.conv(&mut store, "msaf.p3.c3", pc, pc, 5, 1)?;
    init.conv(&mut store, "msaf.p4.c1", pc, cs, 1, 1)?;
    init.conv(&mut store, "msaf.proj", cf, cf, 1, 1)?;
    init.conv(&mut store, "msaf.sem.c1", cf, cd, 1, 1)?;
    init.deconv(&mut store, "msaf.sem.up", cf, cf, 3)?;
    init.conv(&mut store, "msaf.fuse", cf, cf, 1, 1)?;

    if cfg.enable_bam {
        let cr = cf / 4;
        init.fc(&mut store, "bam.ch.fc1", cr, cf)?;
        init.fc_out(&mut store, "bam.ch.fc2", cf, cr)?;
        init.conv(&mut store, "bam.sp.c1", cr, cf, 1, 1)?;
        init.conv(&mut store, "bam.sp.c2", cr, cr, 3, 3)?;
        init.conv(&mut store, "bam.sp.c3", cr, cr, 3, 3)?;
        init.conv_out(&mut store, "bam.sp.c4", 1, cr, 1, 1)?;
    }

    init.conv(&mut store, "refmod.conv", cf, cf, 3, 3)?;

    init.fc(&mut store, "head.fc", cfg.head_hidden, cf * cfg.test_pool_bins * cfg.test_pool_bins)?;
    init.fc_out(&mut store, "head.iou", 1, cfg.head_hidden)?;
    if cfg.enable_cle_head {
        init.fc_out(&mut store, "head.cle", 2, cfg.head_hidden)?;
    }
    Ok(store)
}

// ---------------------------------------------------------------------------
// Graph assembly
// ---------------------------------------------------------------------------

fn bn_act(g: &mut Graph, store: &ParamStore, name: &str, x: NodeId) -> Result<NodeId> {
    let gamma = g.param(store, &format!("{name}.bn.weight"))?;
    let beta = g.param(store, &format!("{name}.bn.bias"))?;
    let rmean = g.param(store, &format!("{name}.bn.running_mean"))?;
    let rvar = g.param(store, &format!("{name}.bn.running_var"))?;
    let y = g.batch_norm(x, gamma, beta, rmean, rvar)?;
    Ok(g.leaky_relu(y, LEAKY_SLOPE))
}

/// conv -> batch norm -> leaky ReLU.
fn conv_block(g: &mut Graph, store: &ParamStore, name: &str, x: NodeId, spec: ConvSpec) -> Result<NodeId> {
    let w = g.param(store, &format!("{name}.weight"))?;
    let b = g.param(store, &format!("{name}.bias"))?;
    let y = g.conv2d(x, w, b, spec)?;
    bn_act(g, store, name, y)
}

/// Bare conv producing logits or regression outputs: no norm, no activation.
fn conv_out(g: &mut Graph, store: &ParamStore, name: &str, x: NodeId, spec: ConvSpec) -> Result<NodeId> {
    let w = g.param(store, &format!("{name}.weight"))?;
    let b = g.param(store, &format!("{name}.bias"))?;
    g.conv2d(x, w, b, spec)
}

fn fc_block(g: &mut Graph, store: &ParamStore, name: &str, x: NodeId) -> Result<NodeId> {
    let w = g.param(store, &format!("{name}.weight"))?;
    let b = g.param(store, &format!("{name}.bias"))?;
    let y = g.linear(x, w, b)?;
    bn_act(g, store, name, y)
}

fn fc_out(g: &mut Graph, store: &ParamStore, name: &str, x: NodeId) -> Result<NodeId> {
    let w = g.param(store, &format!("{name}.weight"))?;
    let b = g.param(store, &format!("{name}.bias"))?;
    g.linear(x, w, b)
}

fn s2() -> ConvSpec {
    ConvSpec { stride: (2, 2), pad: (1, 1), dilation: (1, 1) }
}

fn s1() -> ConvSpec {
    ConvSpec { stride: (1, 1), pad: (1, 1), dilation: (1, 1) }
}

fn point() -> ConvSpec {
    ConvSpec { stride: (1, 1), pad: (0, 0), dilation: (1, 1) }
}

/// Backbone taps at two depths.
#[derive(Debug, Clone, Copy)]
pub struct FeaturePair {
    /// Stride-8 map, side input_size/8.
    pub spatial: NodeId,
    /// Stride-16 map, side input_size/16.
    pub semantic: NodeId,
}

/// Stem (stride 2) plus three stages of (conv s2, conv s1), each conv
/// followed by batch norm and leaky ReLU; taps after stages 2 and 3.
pub fn backbone_forward(g: &mut Graph, store: &ParamStore, cfg: &NetConfig, image: NodeId) -> Result<FeaturePair> {
    let (_, c, h, w) = g.out(image).dims4("backbone input")?;
    if c != 3 || h != cfg.input_size || w != cfg.input_size {
        return Err(Error::shape(
            "backbone input",
            format!("expected (B,3,{s},{s}), got ({c},{h},{w}) channels/side", s = cfg.input_size),
        ));
    }
    let x = conv_block(g, store, "backbone.stem", image, s2())?;
    let x = conv_block(g, store, "backbone.stage1.a", x, s2())?;
    let x = conv_block(g, store, "backbone.stage1.b", x, s1())?;
    let x = conv_block(g, store, "backbone.stage2.a", x, s2())?;
    let spatial = conv_block(g, store, "backbone.stage2.b", x, s1())?;
    let x = conv_block(g, store, "backbone.stage3.a", spatial, s2())?;
    let semantic = conv_block(g, store, "backbone.stage3.b", x, s1())?;
    Ok(FeaturePair { spatial, semantic })
}

/// Multi-scale aggregation and fusion: an inception-style spatial branch
/// (factorized asymmetric convolutions) plus an upsampled semantic branch,
/// merged by element-wise addition and a final 1x1 reduction.
pub fn msaf(g: &mut Graph, store: &ParamStore, _cfg: &NetConfig, fp: &FeaturePair) -> Result<NodeId> {
    let x = fp.spatial;
    let p1 = conv_block(g, store, "msaf.p1.c1", x, point())?;
    let p2 = conv_block(g, store, "msaf.p2.c1", x, point())?;
    let p2 = conv_block(g, store, "msaf.p2.c2", p2, ConvSpec { stride: (1, 1), pad: (0, 1), dilation: (1, 1) })?;
    let p2 = conv_block(g, store, "msaf.p2.c3", p2, ConvSpec { stride: (1, 1), pad: (1, 0), dilation: (1, 1) })?;
    let p3 = conv_block(g, store, "msaf.p3.c1", x, point())?;
    let p3 = conv_block(g, store, "msaf.p3.c2", p3, ConvSpec { stride: (1, 1), pad: (0, 2), dilation: (1, 1) })?;
    let p3 = conv_block(g, store, "msaf.p3.c3", p3, ConvSpec { stride: (1, 1), pad: (2, 0), dilation: (1, 1) })?;
    let p4 = g.avg_pool2d(x, 3, 1, 1)?;
    let p4 = conv_block(g, store, "msaf.p4.c1", p4, point())?;
    let cat = g.concat_channels(&[p1, p2, p3, p4])?;
    let spatial = conv_block(g, store, "msaf.proj", cat, point())?;

    let sem = conv_block(g, store, "msaf.sem.c1", fp.semantic, point())?;
    let w = g.param(store, "msaf.sem.up.weight")?;
    let b = g.param(store, "msaf.sem.up.bias")?;
    let spec = DeconvSpec { stride: (2, 2), pad: (1, 1), out_pad: (1, 1), dilation: (1, 1) };
    let sem = g.deconv2d(sem, w, b, spec)?;
    let sem = bn_act(g, store, "msaf.sem.up", sem)?;

    let (_, _, hs, ws) = g.out(spatial).dims4("msaf spatial branch")?;
    let (_, _, hd, wd) = g.out(sem).dims4("msaf semantic branch")?;
    if (hs, ws) != (hd, wd) {
        return Err(Error::shape(
            "msaf fusion",
            format!("spatial {hs}x{ws} vs upsampled semantic {hd}x{wd}"),
        ));
    }
    let fused = g.add(spatial, sem)?;
    conv_block(g, store, "msaf.fuse", fused, point())
}

/// Bottleneck attention: out = feat * (1 + sigmoid(channel + spatial)).
pub fn bam(g: &mut Graph, store: &ParamStore, cfg: &NetConfig, feat: NodeId) -> Result<NodeId> {
    let (_, c, h, w) = g.out(feat).dims4("bam input")?;
    let pooled = g.gap2d(feat)?;
    let ch = fc_block(g, store, "bam.ch.fc1", pooled)?;
    let ch = fc_out(g, store, "bam.ch.fc2", ch)?;
    let ch = g.expand_rows(ch, h, w)?;

    let d = cfg.bam_dilation;
    let dil = ConvSpec { stride: (1, 1), pad: (d, d), dilation: (d, d) };
    let sp = conv_block(g, store, "bam.sp.c1", feat, point())?;
    let sp = conv_block(g, store, "bam.sp.c2", sp, dil)?;
    let sp = conv_block(g, store, "bam.sp.c3", sp, dil)?;
    let sp = conv_out(g, store, "bam.sp.c4", sp, point())?;
    let sp = g.expand_chan(sp, c)?;

    let logits = g.add(ch, sp)?;
    let att = g.sigmoid(logits);
    let scaled = g.mul(feat, att)?;
    g.add(feat, scaled)
}

/// Full shared-weight stream: backbone, fusion, attention.
pub fn stream(g: &mut Graph, store: &ParamStore, cfg: &NetConfig, image: NodeId) -> Result<NodeId> {
    let fp = backbone_forward(g, store, cfg, image)?;
    let fused = msaf(g, store, cfg, &fp)?;
    if cfg.enable_bam {
        bam(g, store, cfg, fused)
    } else {
        Ok(fused)
    }
}

/// Packs boxes into an (R, 4) tensor of x,y,w,h rows.
pub fn boxes_to_tensor(boxes: &[BoxXYWH]) -> Tensor {
    let mut data = Vec::with_capacity(boxes.len() * 4);
    for b in boxes {
        data.extend_from_slice(&[b.x, b.y, b.w, b.h]);
    }
    Tensor::from_vec(&[boxes.len(), 4], data).expect("shape matches data")
}

/// Stacks (3,S,S) patches into a (B,3,S,S) batch.
pub fn stack_images(patches: &[Tensor]) -> Result<Tensor> {
    if patches.is_empty() {
        return Err(Error::Contract("cannot stack zero patches".to_string()));
    }
    let shape = patches[0].shape().to_vec();
    let mut data = Vec::with_capacity(patches.len() * patches[0].numel());
    for p in patches {
        if p.shape() != shape.as_slice() {
            return Err(Error::shape("stack_images", "patch shapes differ"));
        }
        data.extend_from_slice(p.data());
    }
    let mut out_shape = vec![patches.len()];
    out_shape.extend_from_slice(&shape);
    Tensor::from_vec(&out_shape, data)
}

/// Pools each reference box (patch pixel coordinates) from the fused map
/// and compresses it to one modulation vector per box: (R, C_f).
///
/// `batch_idx[r]` names the feature-map row box `r` was drawn on.
pub fn reference_modulation(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &NetConfig,
    ref_feat: NodeId,
    ref_boxes: NodeId,
    batch_idx: Vec<usize>,
) -> Result<NodeId> {
    let scaled = g.mul_scalar(ref_boxes, 1.0 / FEATURE_STRIDE as f64);
    let bins = (cfg.ref_pool_bins, cfg.ref_pool_bins);
    let pooled = g.prroi(ref_feat, scaled, batch_idx, bins)?;
    let vec4 = conv_block(g, store, "refmod.conv", pooled, point())?;
    let (r, c, h, w) = g.out(vec4).dims4("reference modulation")?;
    if (h, w) != (1, 1) {
        return Err(Error::shape("reference modulation", format!("expected 1x1, got {h}x{w}")));
    }
    g.reshape(vec4, &[r, c])
}

/// Head outputs, flat over all (modulation, test box) pairs.
pub struct HeadsOut {
    /// (P, 1) normalized IoU predictions.
    pub iou: NodeId,
    /// (P, 2) normalized center-offset predictions.
    pub cle: NodeId,
    /// Row p of the outputs pairs modulation `pairs[p].0` with test box
    /// `pairs[p].1`.
    pub pairs: Vec<(usize, usize)>,
}

/// Modulates the test map with each reference vector and scores every
/// (modulation, box) pair whose source images match.
///
/// `mod_img[m]` / `box_img[q]` name the test-feature row each modulation and
/// box belongs to.
pub fn grouped_heads(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &NetConfig,
    test_feat: NodeId,
    mods: NodeId,
    mod_img: &[usize],
    test_boxes: NodeId,
    box_img: &[usize],
) -> Result<HeadsOut> {
    let (_, c, h, w) = g.out(test_feat).dims4("grouped_heads features")?;
    let (r, _) = g.out(mods).dims2("grouped_heads modulations")?;
    if r == 0 || box_img.is_empty() {
        return Err(Error::Contract("grouped_heads needs at least one modulation and one box".to_string()));
    }
    if r != mod_img.len() {
        return Err(Error::shape("grouped_heads", format!("{r} modulations vs {} image indices", mod_img.len())));
    }

    let sel_feat = g.index_select0(test_feat, mod_img.to_vec())?;
    let mod_maps = g.expand_rows(mods, h, w)?;
    let modulated = g.mul(sel_feat, mod_maps)?;

    let mut pairs = Vec::new();
    for (m, &mi) in mod_img.iter().enumerate() {
        for (q, &qi) in box_img.iter().enumerate() {
            if mi == qi {
                pairs.push((m, q));
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::Contract("no (modulation, box) pair shares an image".to_string()));
    }

    let scaled = g.mul_scalar(test_boxes, 1.0 / FEATURE_STRIDE as f64);
    let box_rows: Vec<usize> = pairs.iter().map(|&(_, q)| q).collect();
    let map_rows: Vec<usize> = pairs.iter().map(|&(m, _)| m).collect();
    let sel_boxes = g.index_select0(scaled, box_rows)?;
    let bins = (cfg.test_pool_bins, cfg.test_pool_bins);
    let pooled = g.prroi(modulated, sel_boxes, map_rows, bins)?;

    let p = pairs.len();
    let flat = g.reshape(pooled, &[p, c * cfg.test_pool_bins * cfg.test_pool_bins])?;
    let trunk = fc_block(g, store, "head.fc", flat)?;
    let iou = fc_out(g, store, "head.iou", trunk)?;
    let cle = if cfg.enable_cle_head {
        fc_out(g, store, "head.cle", trunk)?
    } else {
        g.value(Tensor::zeros(&[p, 2]))
    };
    Ok(HeadsOut { iou, cle, pairs })
}

/// Grouped predictions in normalized scale: IoU (B,M,N), CLE (B,M,N,2).
#[derive(Debug, Clone)]
pub struct GroupedPrediction {
    pub batch: usize,
    pub groups: usize,
    pub proposals: usize,
    pub iou: Tensor,
    pub cle: Tensor,
}

impl GroupedPrediction {
    pub fn iou_at(&self, b: usize, m: usize, n: usize) -> f64 {
        self.iou.data()[(b * self.groups + m) * self.proposals + n]
    }

    pub fn cle_at(&self, b: usize, m: usize, n: usize) -> (f64, f64) {
        let i = ((b * self.groups + m) * self.proposals + n) * 2;
        (self.cle.data()[i], self.cle.data()[i + 1])
    }
}

/// A fully built two-stream forward pass plus handles for backpropagation.
pub struct NetForward {
    pub graph: Graph,
    pub iou: NodeId,
    pub cle: NodeId,
    /// Input node holding test boxes in patch pixel coordinates (Q, 4);
    /// box-coordinate gradients accumulate here.
    pub test_boxes: NodeId,
    pub test_feat: NodeId,
    pub modulations: NodeId,
    pub batch: usize,
    pub groups: usize,
    pub proposals: usize,
}

impl NetForward {
    pub fn prediction(&self) -> Result<GroupedPrediction> {
        let iou = self
            .graph
            .out(self.iou)
            .reshaped(&[self.batch, self.groups, self.proposals])?;
        let cle = self
            .graph
            .out(self.cle)
            .reshaped(&[self.batch, self.groups, self.proposals, 2])?;
        Ok(GroupedPrediction {
            batch: self.batch,
            groups: self.groups,
            proposals: self.proposals,
            iou,
            cle,
        })
    }
}

/// Runs both streams with shared weights: backbone + fusion + attention,
/// reference modulation, grouped heads.
///
/// `ref_boxes` holds M boxes per reference image (row-major by image),
/// `test_boxes` N boxes per test image; both in patch pixel coordinates.
pub fn forward_all(
    store: &ParamStore,
    cfg: &NetConfig,
    ref_images: &Tensor,
    test_images: &Tensor,
    ref_boxes: &[BoxXYWH],
    test_boxes: &[BoxXYWH],
    train: bool,
) -> Result<NetForward> {
    cfg.validate()?;
    let (b, _, _, _) = ref_images.dims4("forward_all reference images")?;
    let (bt, _, _, _) = test_images.dims4("forward_all test images")?;
    if b != bt {
        return Err(Error::shape("forward_all", format!("{b} reference images vs {bt} test images")));
    }
    if ref_boxes.is_empty() || test_boxes.is_empty() {
        return Err(Error::Contract("forward_all needs reference and test boxes".to_string()));
    }
    if ref_boxes.len() % b != 0 || test_boxes.len() % b != 0 {
        return Err(Error::Contract(format!(
            "box counts ({}, {}) must be multiples of the batch {b}",
            ref_boxes.len(),
            test_boxes.len()
        )));
    }
    for bx in ref_boxes.iter().chain(test_boxes) {
        bx.check("forward_all box")?;
    }
    let m = ref_boxes.len() / b;
    let n = test_boxes.len() / b;

    let mut g = Graph::new(train);
    let ref_img_node = g.input(ref_images.clone());
    let test_img_node = g.input(test_images.clone());
    let ref_feat = stream(&mut g, store, cfg, ref_img_node)?;
    let test_feat = stream(&mut g, store, cfg, test_img_node)?;

    let ref_box_node = g.input(boxes_to_tensor(ref_boxes));
    let test_box_node = g.input(boxes_to_tensor(test_boxes));
    let mod_img: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat(i).take(m)).collect();
    let box_img: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat(i).take(n)).collect();

    let mods = reference_modulation(&mut g, store, cfg, ref_feat, ref_box_node, mod_img.clone())?;
    let heads = grouped_heads(&mut g, store, cfg, test_feat, mods, &mod_img, test_box_node, &box_img)?;

    g.out(heads.iou).ensure_finite("iou head")?;
    g.out(heads.cle).ensure_finite("cle head")?;
    Ok(NetForward {
        graph: g,
        iou: heads.iou,
        cle: heads.cle,
        test_boxes: test_box_node,
        test_feat,
        modulations: mods,
        batch: b,
        groups: m,
        proposals: n,
    })
}

/// Writes parameters plus the serialized config as a checkpoint.
pub fn save_net(path: &std::path::Path, cfg: &NetConfig, store: &ParamStore) -> Result<()> {
    save_checkpoint(path, store, &serde_json::to_value(cfg)?)
}

/// Loads a checkpoint and its embedded config.
pub fn load_net(path: &std::path::Path) -> Result<(NetConfig, ParamStore)> {
    let (store, cfg_value) = load_checkpoint(path)?;
    let cfg: NetConfig = serde_json::from_value(cfg_value)
        .map_err(|e| Error::Checkpoint(format!("bad embedded net config: {e}")))?;
    cfg.validate()?;
    Ok((cfg, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_image(rng: &mut ChaCha12Rng, b: usize, s: usize) -> Tensor {
        let data: Vec<f64> = (0..b * 3 * s * s).map(|_| rng.random_range(0.0..1.0)).collect();
        Tensor::from_vec(&[b, 3, s, s], data).unwrap()
    }

    fn rand_boxes(rng: &mut ChaCha12Rng, count: usize, s: f64) -> Vec<BoxXYWH> {
        (0..count)
            .map(|_| {
                let w = rng.random_range(8.0..s / 2.0);
                let h = rng.random_range(8.0..s / 2.0);
                BoxXYWH::new(
                    rng.random_range(0.0..s - w),
                    rng.random_range(0.0..s - h),
                    w,
                    h,
                )
            })
            .collect()
    }

    #[test]
    fn backbone_shapes_at_default_width() {
        let cfg = NetConfig { input_size: 144, ..NetConfig::default() };
        let store = init_params(&cfg, 1).unwrap();
        let mut g = Graph::new(false);
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let img = g.input(rand_image(&mut rng, 1, 144));
        let fp = backbone_forward(&mut g, &store, &cfg, img).unwrap();
        assert_eq!(g.out(fp.spatial).shape(), &[1, 64, 18, 18]);
        assert_eq!(g.out(fp.semantic).shape(), &[1, 128, 9, 9]);
    }

    #[test]
    fn fused_map_matches_spatial_grid() {
        let cfg = NetConfig::tiny();
        let store = init_params(&cfg, 1).unwrap();
        let mut g = Graph::new(false);
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let img = g.input(rand_image(&mut rng, 2, cfg.input_size));
        let fused = stream(&mut g, &store, &cfg, img).unwrap();
        assert_eq!(g.out(fused).shape(), &[2, 8, 6, 6]);
    }

    #[test]
    fn zero_image_stays_finite() {
        let cfg = NetConfig::tiny();
        let store = init_params(&cfg, 1).unwrap();
        for train in [false, true] {
            let mut g = Graph::new(train);
            let img = g.input(Tensor::zeros(&[1, 3, 48, 48]));
            let fused = stream(&mut g, &store, &cfg, img).unwrap();
            assert!(!g.out(fused).has_non_finite(), "train={train}");
        }
    }

    #[test]
    fn zeroed_semantic_branch_is_additive_identity() {
        let cfg = NetConfig::tiny();
        let store = init_params(&cfg, 5).unwrap();
        let mut zeroed = init_params(&cfg, 5).unwrap();
        for name in ["msaf.sem.c1.weight", "msaf.sem.c1.bias", "msaf.sem.up.weight", "msaf.sem.up.bias"] {
            zeroed.tensor_mut(name).unwrap().fill(0.0);
        }
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let img_t = rand_image(&mut rng, 1, 48);

        // Zeroed semantic branch: fused output must equal the spatial
        // branch processed alone (semantic contribution exactly zero).
        let mut g = Graph::new(false);
        let img = g.input(img_t.clone());
        let fp = backbone_forward(&mut g, &zeroed, &cfg, img).unwrap();
        let fused = msaf(&mut g, &zeroed, &cfg, &fp).unwrap();

        let mut g2 = Graph::new(false);
        let img2 = g2.input(img_t);
        let fp2 = backbone_forward(&mut g2, &zeroed, &cfg, img2).unwrap();
        // Rebuild only the spatial branch plus the fuse conv, with the
        // addition against an explicit zero tensor.
        let p1 = conv_block(&mut g2, &zeroed, "msaf.p1.c1", fp2.spatial, point()).unwrap();
        let p2 = conv_block(&mut g2, &zeroed, "msaf.p2.c1", fp2.spatial, point()).unwrap();
        let p2 = conv_block(&mut g2, &zeroed, "msaf.p2.c2", p2, ConvSpec { stride: (1, 1), pad: (0, 1), dilation: (1, 1) }).unwrap();
        let p2 = conv_block(&mut g2, &zeroed, "msaf.p2.c3", p2, ConvSpec { stride: (1, 1), pad: (1, 0), dilation: (1, 1) }).unwrap();
        let p3 = conv_block(&mut g2, &zeroed, "msaf.p3.c1", fp2.spatial, point()).unwrap();
        let p3 = conv_block(&mut g2, &zeroed, "msaf.p3.c2", p3, ConvSpec { stride: (1, 1), pad: (0, 2), dilation: (1, 1) }).unwrap();
        let p3 = conv_block(&mut g2, &zeroed, "msaf.p3.c3", p3, ConvSpec { stride: (1, 1), pad: (2, 0), dilation: (1, 1) }).unwrap();
        let p4 = g2.avg_pool2d(fp2.spatial, 3, 1, 1).unwrap();
        let p4 = conv_block(&mut g2, &zeroed, "msaf.p4.c1", p4, point()).unwrap();
        let cat = g2.concat_channels(&[p1, p2, p3, p4]).unwrap();
        let spatial = conv_block(&mut g2, &zeroed, "msaf.proj", cat, point()).unwrap();
        let alone = conv_block(&mut g2, &zeroed, "msaf.fuse", spatial, point()).unwrap();

        let a = g.out(fused).data();
        let b = g2.out(alone).data();
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12);
        }
        // Sanity: with untouched weights the semantic branch does change
        // the output.
        let mut g3 = Graph::new(false);
        let img3 = g3.input(rand_image(&mut rng, 1, 48));
        let fp3 = backbone_forward(&mut g3, &store, &cfg, img3).unwrap();
        let _ = msaf(&mut g3, &store, &cfg, &fp3).unwrap();
    }

    #[test]
    fn bam_with_zero_logits_scales_by_1_5() {
        let cfg = NetConfig::tiny();
        let mut store = init_params(&cfg, 7).unwrap();
        for name in ["bam.ch.fc2.weight", "bam.ch.fc2.bias", "bam.sp.c4.weight", "bam.sp.c4.bias"] {
            store.tensor_mut(name).unwrap().fill(0.0);
        }
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let data: Vec<f64> = (0..8 * 6 * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let feat_t = Tensor::from_vec(&[1, 8, 6, 6], data).unwrap();
        let mut g = Graph::new(false);
        let feat = g.input(feat_t.clone());
        let out = bam(&mut g, &store, &cfg, feat).unwrap();
        for (y, x) in g.out(out).data().iter().zip(feat_t.data()) {
            assert!((y - 1.5 * x).abs() < 1e-12, "{y} vs 1.5*{x}");
        }
    }

    #[test]
    fn modulation_rows_are_order_preserving_and_deterministic() {
        let cfg = NetConfig::tiny();
        let store = init_params(&cfg, 9).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let feat_t = {
            let data: Vec<f64> = (0..8 * 6 * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
            Tensor::from_vec(&[1, 8, 6, 6], data).unwrap()
        };
        let boxes = vec![
            BoxXYWH::new(8.0, 8.0, 16.0, 16.0),
            BoxXYWH::new(20.0, 12.0, 12.0, 20.0),
            BoxXYWH::new(8.0, 8.0, 16.0, 16.0),
        ];
        let mut g = Graph::new(false);
        let feat = g.value(feat_t);
        let box_node = g.input(boxes_to_tensor(&boxes));
        let mods = reference_modulation(&mut g, &store, &cfg, feat, box_node, vec![0, 0, 0]).unwrap();
        let out = g.out(mods);
        assert_eq!(out.shape(), &[3, 8]);
        // Duplicate boxes (rows 0 and 2) produce identical vectors.
        for c in 0..8 {
            assert_eq!(out.data()[c], out.data()[2 * 8 + c]);
        }
        // And differ from the distinct middle box.
        let diff: f64 = (0..8).map(|c| (out.data()[c] - out.data()[8 + c]).abs()).sum();
        assert!(diff > 1e-9);
    }

    #[test]
    fn constant_field_gives_position_invariant_modulation() {
        let cfg = NetConfig::tiny();
        let store = init_params(&cfg, 11).unwrap();
        let feat_t = Tensor::full(&[1, 8, 6, 6], 0.37);
        let boxes = vec![BoxXYWH::new(4.0, 4.0, 12.0, 12.0), BoxXYWH::new(28.0, 24.0, 12.0, 12.0)];
        let mut g = Graph::new(false);
        let feat = g.value(feat_t);
        let box_node = g.input(boxes_to_tensor(&boxes));
        let mods = reference_modulation(&mut g, &store, &cfg, feat, box_node, vec![0, 0]).unwrap();
        let out = g.out(mods);
        for c in 0..8 {
            assert!((out.data()[c] - out.data()[8 + c]).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_all_shapes_and_determinism() {
        let cfg = NetConfig::tiny();
        let store = init_params(&cfg, 12).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let ref_imgs = rand_image(&mut rng, 1, 48);
        let test_imgs = rand_image(&mut rng, 1, 48);
        let ref_boxes = rand_boxes(&mut rng, 2, 48.0);
        let test_boxes = rand_boxes(&mut rng, 4, 48.0);
        let nf = forward_all(&store, &cfg, &ref_imgs, &test_imgs, &ref_boxes, &test_boxes, false).unwrap();
        let pred = nf.prediction().unwrap();
        assert_eq!(pred.iou.shape(), &[1, 2, 4]);
        assert_eq!(pred.cle.shape(), &[1, 2, 4, 2]);

        let nf2 = forward_all(&store, &cfg, &ref_imgs, &test_imgs, &ref_boxes, &test_boxes, false).unwrap();
        let pred2 = nf2.prediction().unwrap();
        assert_eq!(pred.iou.data(), pred2.iou.data());
        assert_eq!(pred.cle.data(), pred2.cle.data());
    }

    #[test]
    fn disabling_bam_preserves_shapes_but_changes_outputs() {
        let mut cfg = NetConfig::tiny();
        let store = init_params(&cfg, 14).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(15);
        let ref_imgs = rand_image(&mut rng, 1, 48);
        let test_imgs = rand_image(&mut rng, 1, 48);
        let ref_boxes = rand_boxes(&mut rng, 2, 48.0);
        let test_boxes = rand_boxes(&mut rng, 3, 48.0);
        let with = forward_all(&store, &cfg, &ref_imgs, &test_imgs, &ref_boxes, &test_boxes, false)
            .unwrap()
            .prediction()
            .unwrap();
        cfg.enable_bam = false;
        let without = forward_all(&store, &cfg, &ref_imgs, &test_imgs, &ref_boxes, &test_boxes, false)
            .unwrap()
            .prediction()
            .unwrap();
        assert_eq!(with.iou.shape(), without.iou.shape());
        assert_ne!(with.iou.data(), without.iou.data());
    }

    #[test]
    fn disabled_cle_head_emits_zeros_without_params() {
        let cfg = NetConfig { enable_cle_head: false, ..NetConfig::tiny() };
        let store = init_params(&cfg, 16).unwrap();
        assert!(!store.contains("head.cle.weight"));
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let ref_imgs = rand_image(&mut rng, 1, 48);
        let test_imgs = rand_image(&mut rng, 1, 48);
        let ref_boxes = rand_boxes(&mut rng, 1, 48.0);
        let test_boxes = rand_boxes(&mut rng, 2, 48.0);
        let pred = forward_all(&store, &cfg, &ref_imgs, &test_imgs, &ref_boxes, &test_boxes, false)
            .unwrap()
            .prediction()
            .unwrap();
        assert!(pred.cle.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkpoint_round_trip_preserves_config_and_weights() {
        let cfg = NetConfig::tiny();
        let store = init_params(&cfg, 18).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("net.ckpt");
        save_net(&path, &cfg, &store).unwrap();
        let (cfg2, store2) = load_net(&path).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(store.len(), store2.len());
        // f32 storage: weights match to f32 precision.
        let a = store.tensor("head.fc.weight").unwrap();
        let b = store2.tensor("head.fc.weight").unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*x as f32, *y as f32);
        }
    }

    #[test]
    fn config_validation_rejects_bad_sizes() {
        let mut cfg = NetConfig::default();
        cfg.input_size = 100;
        assert!(cfg.validate().is_err());
        let mut cfg = NetConfig::default();
        cfg.test_pool_bins = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = NetConfig::default();
        cfg.fused_channels = 6;
        assert!(cfg.validate().is_err());
    }
}
