//! Offline training: sample-pair construction, reference augmentation,
//! normalized regression targets, the multitask loss and the Adam loop.

use std::io::Write;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::boxgeom::{
    cle_normalized, crop_spec, generate_proposals, iou, BoxXYWH, JitterConfig,
};
use crate::cometnet::{
    forward_all, init_params, stack_images, GroupedPrediction, NetConfig, NetForward,
};
use crate::diffcore::{
    adam_step, apply_bn_updates, scheduled_lr, smooth_l1_scalar, AdamConfig, AdamState, NodeId,
    ParamStore, Tensor,
};
use crate::evalbench::image::extract_patch;
use crate::evalbench::SequenceRecord;
use crate::{Error, Result};

pub const TRAIN_SCHEMA_VERSION: u32 = 1;

fn default_max_frame_gap() -> usize {
    50
}
fn default_area_factor() -> f64 {
    5.0
}
fn default_out_size() -> usize {
    288
}
fn default_n_test() -> usize {
    16
}
fn default_n_ref() -> usize {
    8
}
fn default_t1() -> f64 {
    0.1
}
fn default_t2() -> f64 {
    0.8
}
fn default_center_jitter() -> f64 {
    0.1
}
fn default_scale_jitter() -> f64 {
    0.12
}

/// How one (reference, test) training pair is cut out of a sequence.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplePairConfig {
    /// Maximum temporal distance between the two frames.
    #[serde(default = "default_max_frame_gap")]
    pub max_frame_gap: usize,
    /// Crop side = area_factor * sqrt(w*h) of the anchoring box.
    #[serde(default = "default_area_factor")]
    pub area_factor: f64,
    /// Patch resolution; must equal the network input size.
    #[serde(default = "default_out_size")]
    pub out_size: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    /// Reference boxes per pair: ground truth plus n_ref - 1 proposals.
    #[serde(default = "default_n_ref")]
    pub n_ref: usize,
    /// IoU floor for test proposals.
    #[serde(default = "default_t1")]
    pub t1: f64,
    /// IoU floor for reference proposals.
    #[serde(default = "default_t2")]
    pub t2: f64,
    /// Test-crop center perturbation, as a fraction of target size.
    #[serde(default = "default_center_jitter")]
    pub center_jitter: f64,
    /// Log-normal sigma of the test-crop scale perturbation.
    #[serde(default = "default_scale_jitter")]
    pub scale_jitter: f64,
}

impl Default for SamplePairConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl SamplePairConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_test == 0 || self.n_ref == 0 {
            return Err(Error::Config("n_test and n_ref must be positive".to_string()));
        }
        if self.n_ref * 2 != self.n_test {
            return Err(Error::Config(format!(
                "n_ref ({}) must be half of n_test ({})",
                self.n_ref, self.n_test
            )));
        }
        if self.max_frame_gap == 0 {
            return Err(Error::Config("max_frame_gap must be positive".to_string()));
        }
        for (name, v) in [("t1", self.t1), ("t2", self.t2)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0,1]")));
            }
        }
        if self.area_factor <= 0.0 || self.out_size == 0 {
            return Err(Error::Config("area_factor and out_size must be positive".to_string()));
        }
        Ok(())
    }

    fn ref_jitter(&self) -> JitterConfig {
        JitterConfig { threshold: self.t2, ..JitterConfig::reference(self.n_ref - 1) }
    }

    fn test_jitter(&self) -> JitterConfig {
        JitterConfig { threshold: self.t1, ..JitterConfig::test_side(self.n_test) }
    }
}

/// One training example: two patches plus boxes and normalized targets, all
/// in patch pixel coordinates.
#[derive(Debug, Clone)]
pub struct SamplePair {
    pub ref_patch: Tensor,
    pub test_patch: Tensor,
    /// Ground truth first, then n_ref - 1 proposals.
    pub ref_boxes: Vec<BoxXYWH>,
    pub test_boxes: Vec<BoxXYWH>,
    /// Ground truth of the test frame, mapped into the test patch.
    pub test_gt: BoxXYWH,
    /// 2*IoU - 1 per test box.
    pub iou_targets: Vec<f64>,
    /// Normalized center offsets per test box, clamped to [-1, 1].
    pub cle_targets: Vec<(f64, f64)>,
}

/// Normalized-scale IoU target.
pub fn iou_to_target(v: f64) -> f64 {
    2.0 * v - 1.0
}

/// Inverse of `iou_to_target`.
pub fn target_to_iou(t: f64) -> f64 {
    (t + 1.0) / 2.0
}

fn compute_targets(gt: &BoxXYWH, boxes: &[BoxXYWH]) -> Result<(Vec<f64>, Vec<(f64, f64)>)> {
    let mut iou_t = Vec::with_capacity(boxes.len());
    let mut cle_t = Vec::with_capacity(boxes.len());
    for b in boxes {
        iou_t.push(iou_to_target(iou(gt, b)?));
        let (dx, dy) = cle_normalized(gt, b)?;
        cle_t.push((dx.clamp(-1.0, 1.0), dy.clamp(-1.0, 1.0)));
    }
    Ok((iou_t, cle_t))
}

/// Cuts a (reference, test) pair out of `seq`: two frames at most
/// `max_frame_gap` apart, reference crop centered on its ground truth, test
/// crop perturbed in center and scale, proposals drawn per the two IoU
/// thresholds, targets normalized to [-1, 1].
pub fn build_sample_pair<R: Rng>(
    seq: &SequenceRecord,
    cfg: &SamplePairConfig,
    rng: &mut R,
) -> Result<SamplePair> {
    cfg.validate()?;
    if seq.len() < 2 {
        return Err(Error::Contract(format!(
            "sequence {} has {} frames, need at least 2",
            seq.name,
            seq.len()
        )));
    }
    let t0 = rng.random_range(0..seq.len() - 1);
    let max_gap = cfg.max_frame_gap.min(seq.len() - 1 - t0);
    let gap = rng.random_range(1..=max_gap);
    let t1 = t0 + gap;

    let ref_gt = seq.gt_boxes[t0];
    let test_gt_frame = seq.gt_boxes[t1];

    // Reference crop sits exactly on its ground truth.
    let ref_spec = crop_spec(&ref_gt, cfg.area_factor, cfg.out_size)?;
    // Test crop center and scale are perturbed so the target is not always
    // dead-center at a canonical size.
    let mut test_spec = crop_spec(&test_gt_frame, cfg.area_factor, cfg.out_size)?;
    if cfg.center_jitter > 0.0 {
        let nx = Normal::new(0.0, cfg.center_jitter * test_gt_frame.w)
            .map_err(|e| Error::Config(e.to_string()))?;
        let ny = Normal::new(0.0, cfg.center_jitter * test_gt_frame.h)
            .map_err(|e| Error::Config(e.to_string()))?;
        test_spec.cx += nx.sample(rng);
        test_spec.cy += ny.sample(rng);
    }
    if cfg.scale_jitter > 0.0 {
        let ns = Normal::new(0.0, cfg.scale_jitter).map_err(|e| Error::Config(e.to_string()))?;
        test_spec.side *= ns.sample(rng).exp();
    }

    let ref_frame = seq.frame(t0)?;
    let test_frame = seq.frame(t1)?;
    let ref_patch = extract_patch(&ref_frame, &ref_spec);
    let test_patch = extract_patch(&test_frame, &test_spec);

    let ref_gt_patch = ref_spec.box_to_patch(&ref_gt);
    let test_gt_patch = test_spec.box_to_patch(&test_gt_frame);

    let mut ref_boxes = vec![ref_gt_patch];
    ref_boxes.extend(generate_proposals(&ref_gt_patch, &cfg.ref_jitter(), rng)?.boxes);
    let test_boxes = generate_proposals(&test_gt_patch, &cfg.test_jitter(), rng)?.boxes;

    let (iou_targets, cle_targets) = compute_targets(&test_gt_patch, &test_boxes)?;
    Ok(SamplePair {
        ref_patch,
        test_patch,
        ref_boxes,
        test_boxes,
        test_gt: test_gt_patch,
        iou_targets,
        cle_targets,
    })
}

/// Mirrors a (3,S,S) patch horizontally and reflects boxes: x' = S - x - w.
pub fn hflip_patch(patch: &mut Tensor, boxes: &mut [BoxXYWH]) -> Result<()> {
    let shape = patch.shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::shape("hflip_patch", format!("expected (C,S,S), got {shape:?}")));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let data = patch.data_mut();
    for ci in 0..c {
        for y in 0..h {
            let row = (ci * h + y) * w;
            data[row..row + w].reverse();
        }
    }
    for b in boxes {
        b.x = w as f64 - b.x - b.w;
    }
    Ok(())
}

/// Reference-side augmentation: horizontal flip with probability 0.5 and a
/// per-channel brightness factor drawn from [0.9, 1.1], clamped to [0, 1].
pub fn augment_reference<R: Rng>(
    patch: &mut Tensor,
    boxes: &mut [BoxXYWH],
    rng: &mut R,
) -> Result<()> {
    if rng.random_range(0.0..1.0) < 0.5 {
        hflip_patch(patch, boxes)?;
    }
    let shape = patch.shape().to_vec();
    let (c, hw) = (shape[0], shape[1] * shape[2]);
    for ci in 0..c {
        let f = rng.random_range(0.9..1.1);
        for v in &mut patch.data_mut()[ci * hw..(ci + 1) * hw] {
            *v = (*v * f).clamp(0.0, 1.0);
        }
    }
    Ok(())
}

/// Balance weight for the center-offset term.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda: 4.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda {} must be >= 0", self.lambda)));
        }
        Ok(())
    }
}

/// Scalar multitask loss on plain values: mean squared IoU error plus
/// lambda times the mean smooth-L1 center-offset error. Targets are per
/// test box and shared across every reference group.
///
/// Returns (total, iou term, cle term).
pub fn multitask_loss(
    pred: &GroupedPrediction,
    iou_targets: &[f64],
    cle_targets: &[(f64, f64)],
    cfg: &LossConfig,
) -> Result<(f64, f64, f64)> {
    cfg.validate()?;
    let (b, m, n) = (pred.batch, pred.groups, pred.proposals);
    if iou_targets.len() != b * n || cle_targets.len() != b * n {
        return Err(Error::shape(
            "multitask_loss",
            format!("targets ({}, {}) vs batch*proposals {}", iou_targets.len(), cle_targets.len(), b * n),
        ));
    }
    let mut l_iou = 0.0;
    let mut l_cle = 0.0;
    for bi in 0..b {
        for mi in 0..m {
            for ni in 0..n {
                let d = pred.iou_at(bi, mi, ni) - iou_targets[bi * n + ni];
                l_iou += d * d;
                let (px, py) = pred.cle_at(bi, mi, ni);
                let (tx, ty) = cle_targets[bi * n + ni];
                l_cle += smooth_l1_scalar(px - tx) + smooth_l1_scalar(py - ty);
            }
        }
    }
    l_iou /= (b * m * n) as f64;
    l_cle /= (b * m * n * 2) as f64;
    Ok((l_iou + cfg.lambda * l_cle, l_iou, l_cle))
}

/// Loss sub-graph handles.
pub struct LossNodes {
    pub total: NodeId,
    pub iou_term: NodeId,
    pub cle_term: NodeId,
}

/// Builds the multitask loss on top of a finished forward pass, expanding
/// the per-box targets over the reference groups.
pub fn build_loss(
    nf: &mut NetForward,
    iou_targets: &[f64],
    cle_targets: &[(f64, f64)],
    cfg: &LossConfig,
) -> Result<LossNodes> {
    cfg.validate()?;
    let (b, m, n) = (nf.batch, nf.groups, nf.proposals);
    if iou_targets.len() != b * n || cle_targets.len() != b * n {
        return Err(Error::shape(
            "build_loss",
            format!("targets ({}, {}) vs batch*proposals {}", iou_targets.len(), cle_targets.len(), b * n),
        ));
    }
    let p = b * m * n;
    let mut it = Vec::with_capacity(p);
    let mut ct = Vec::with_capacity(p * 2);
    for bi in 0..b {
        for _ in 0..m {
            for ni in 0..n {
                it.push(iou_targets[bi * n + ni]);
                ct.push(cle_targets[bi * n + ni].0);
                ct.push(cle_targets[bi * n + ni].1);
            }
        }
    }
    let g = &mut nf.graph;
    let t_iou = g.value(Tensor::from_vec(&[p, 1], it)?);
    let d = g.sub(nf.iou, t_iou)?;
    let sq = g.mul(d, d)?;
    let iou_term = g.mean_all(sq);

    let t_cle = g.value(Tensor::from_vec(&[p, 2], ct)?);
    let dc = g.sub(nf.cle, t_cle)?;
    let sl = g.smooth_l1(dc);
    let cle_term = g.mean_all(sl);

    let scaled = g.mul_scalar(cle_term, cfg.lambda);
    let total = g.add(iou_term, scaled)?;
    Ok(LossNodes { total, iou_term, cle_term })
}

fn default_lambda() -> f64 {
    4.0
}
fn default_steps() -> usize {
    6000
}
fn default_batch() -> usize {
    64
}
fn default_lr() -> f64 {
    1e-4
}
fn default_weight_decay() -> f64 {
    1e-5
}
fn default_decay_factor() -> f64 {
    0.2
}
fn default_decay_every() -> usize {
    15
}
fn default_steps_per_epoch() -> usize {
    100
}

/// Full training run description, read from JSON. Unknown keys are errors.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub net: NetConfig,
    #[serde(default)]
    pub sample: SamplePairConfig,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_decay_factor")]
    pub lr_decay_factor: f64,
    #[serde(default = "default_decay_every")]
    pub lr_decay_every_epochs: usize,
    #[serde(default = "default_steps_per_epoch")]
    pub steps_per_epoch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str(&format!("{{\"schema_version\":{TRAIN_SCHEMA_VERSION}}}"))
            .expect("all fields have defaults")
    }
}

impl TrainConfig {
    /// Desk-scale run used by the CPU-only acceptance harness.
    pub fn desk() -> Self {
        TrainConfig {
            net: NetConfig::desk(),
            sample: SamplePairConfig { out_size: 144, ..SamplePairConfig::default() },
            steps: 2000,
            batch_size: 8,
            lr: 1e-3,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != TRAIN_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "train config schema_version {} unsupported, expected {TRAIN_SCHEMA_VERSION}",
                self.schema_version
            )));
        }
        self.net.validate()?;
        self.sample.validate()?;
        LossConfig { lambda: self.lambda }.validate()?;
        if self.sample.out_size != self.net.input_size {
            return Err(Error::Config(format!(
                "sample out_size {} must equal net input_size {}",
                self.sample.out_size, self.net.input_size
            )));
        }
        if self.steps == 0 || self.batch_size == 0 || self.steps_per_epoch == 0 {
            return Err(Error::Config(
                "steps, batch_size and steps_per_epoch must be positive".to_string(),
            ));
        }
        if self.lr <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("lr must be positive, weight_decay non-negative".to_string()));
        }
        if !(0.0 < self.lr_decay_factor && self.lr_decay_factor <= 1.0) || self.lr_decay_every_epochs == 0 {
            return Err(Error::Config("lr decay schedule is invalid".to_string()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A batch of sample pairs flattened into network inputs.
struct Batch {
    ref_images: Tensor,
    test_images: Tensor,
    ref_boxes: Vec<BoxXYWH>,
    test_boxes: Vec<BoxXYWH>,
    iou_targets: Vec<f64>,
    cle_targets: Vec<(f64, f64)>,
}

fn assemble_batch(pairs: &[SamplePair]) -> Result<Batch> {
    let ref_patches: Vec<Tensor> = pairs.iter().map(|p| p.ref_patch.clone()).collect();
    let test_patches: Vec<Tensor> = pairs.iter().map(|p| p.test_patch.clone()).collect();
    let mut ref_boxes = Vec::new();
    let mut test_boxes = Vec::new();
    let mut iou_targets = Vec::new();
    let mut cle_targets = Vec::new();
    for p in pairs {
        ref_boxes.extend_from_slice(&p.ref_boxes);
        test_boxes.extend_from_slice(&p.test_boxes);
        iou_targets.extend_from_slice(&p.iou_targets);
        cle_targets.extend_from_slice(&p.cle_targets);
    }
    Ok(Batch {
        ref_images: stack_images(&ref_patches)?,
        test_images: stack_images(&test_patches)?,
        ref_boxes,
        test_boxes,
        iou_targets,
        cle_targets,
    })
}

fn sample_augmented_pair<R: Rng>(
    dataset: &[SequenceRecord],
    cfg: &SamplePairConfig,
    rng: &mut R,
) -> Result<SamplePair> {
    let seq = &dataset[rng.random_range(0..dataset.len())];
    let mut pair = build_sample_pair(seq, cfg, rng)?;
    augment_reference(&mut pair.ref_patch, &mut pair.ref_boxes, rng)?;
    Ok(pair)
}

/// Per-run training summary.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
    /// Mean loss per completed epoch.
    pub epoch_means: Vec<f64>,
}

/// Runs the optimization loop and returns the trained parameters.
///
/// `overfit` freezes the first sampled batch and re-feeds it every step (an
/// optimization sanity mode). `log` receives one CSV row per step:
/// step, loss, iou term, cle term, learning rate.
pub fn train(
    dataset: &[SequenceRecord],
    cfg: &TrainConfig,
    seed: u64,
    overfit: bool,
    mut log: Option<&mut dyn Write>,
) -> Result<(ParamStore, TrainOutcome)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Contract("training dataset is empty".to_string()));
    }
    for seq in dataset {
        if seq.len() < 2 {
            return Err(Error::Contract(format!("sequence {} is too short to sample", seq.name)));
        }
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut store = init_params(&cfg.net, rng.random())?;
    let mut adam = AdamState::new();
    let loss_cfg = LossConfig { lambda: cfg.lambda };

    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "# step,loss,l_iou,l_cle,lr")?;
    }

    let fixed: Option<Vec<SamplePair>> = if overfit {
        let pairs: Result<Vec<SamplePair>> = (0..cfg.batch_size)
            .map(|_| sample_augmented_pair(dataset, &cfg.sample, &mut rng))
            .collect();
        Some(pairs?)
    } else {
        None
    };

    let mut initial_loss = f64::NAN;
    let mut final_loss = f64::NAN;
    let mut epoch_means = Vec::new();
    let mut epoch_sum = 0.0;
    let mut epoch_count = 0usize;

    for step in 0..cfg.steps {
        let batch = match &fixed {
            Some(pairs) => assemble_batch(pairs)?,
            None => {
                let pairs: Result<Vec<SamplePair>> = (0..cfg.batch_size)
                    .map(|_| sample_augmented_pair(dataset, &cfg.sample, &mut rng))
                    .collect();
                assemble_batch(&pairs?)?
            }
        };

        let mut nf = forward_all(
            &store,
            &cfg.net,
            &batch.ref_images,
            &batch.test_images,
            &batch.ref_boxes,
            &batch.test_boxes,
            true,
        )?;
        let loss = build_loss(&mut nf, &batch.iou_targets, &batch.cle_targets, &loss_cfg)?;
        let loss_v = nf.graph.out(loss.total).item()?;
        let iou_v = nf.graph.out(loss.iou_term).item()?;
        let cle_v = nf.graph.out(loss.cle_term).item()?;
        if !loss_v.is_finite() {
            return Err(Error::NonFinite(format!("loss diverged at step {step}: {loss_v}")));
        }
        if step == 0 {
            initial_loss = loss_v;
        }
        final_loss = loss_v;

        nf.graph.backward(loss.total)?;
        let grads = nf.graph.param_grads();
        let epoch = step / cfg.steps_per_epoch;
        let lr = scheduled_lr(cfg.lr, epoch, cfg.lr_decay_factor, cfg.lr_decay_every_epochs);
        let adam_cfg = AdamConfig { lr, weight_decay: cfg.weight_decay, ..AdamConfig::default() };
        adam_step(&mut store, &grads, &mut adam, &adam_cfg)?;
        apply_bn_updates(&mut store, &nf.graph.bn_stat_updates())?;

        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{},{},{},{},{}", step, loss_v, iou_v, cle_v, lr)?;
        }
        epoch_sum += loss_v;
        epoch_count += 1;
        if epoch_count == cfg.steps_per_epoch {
            epoch_means.push(epoch_sum / epoch_count as f64);
            epoch_sum = 0.0;
            epoch_count = 0;
        }
    }
    if epoch_count > 0 {
        epoch_means.push(epoch_sum / epoch_count as f64);
    }
    Ok((store, TrainOutcome { initial_loss, final_loss, steps: cfg.steps, epoch_means }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalbench::{synth_sequence, SynthConfig};

    fn tiny_dataset(frames: usize) -> Vec<SequenceRecord> {
        let cfg = SynthConfig {
            num_sequences: 2,
            frames,
            width: 128,
            height: 128,
            ..SynthConfig::default()
        };
        (0..2).map(|i| synth_sequence(&cfg, i, 42).unwrap()).collect()
    }

    fn tiny_sample_cfg() -> SamplePairConfig {
        SamplePairConfig { out_size: 48, ..SamplePairConfig::default() }
    }

    #[test]
    fn sample_pair_respects_contracts() {
        let data = tiny_dataset(20);
        let cfg = tiny_sample_cfg();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for _ in 0..10 {
            let pair = build_sample_pair(&data[0], &cfg, &mut rng).unwrap();
            assert_eq!(pair.ref_boxes.len(), 8);
            assert_eq!(pair.test_boxes.len(), 16);
            assert_eq!(pair.iou_targets.len(), 16);
            assert_eq!(pair.ref_patch.shape(), &[3, 48, 48]);
            // Ground truth leads the reference list.
            let gt = pair.ref_boxes[0];
            for b in &pair.ref_boxes[1..] {
                // Generated at threshold T2 = 0.8 (unless exhausted, which
                // is rare at 200 attempts).
                assert!(iou(&gt, b).unwrap() > 0.0);
            }
            for t in &pair.iou_targets {
                assert!((-1.0..=1.0).contains(t));
            }
            for (dx, dy) in &pair.cle_targets {
                assert!((-1.0..=1.0).contains(dx) && (-1.0..=1.0).contains(dy));
            }
        }
    }

    #[test]
    fn unperturbed_test_gt_sits_at_patch_center() {
        let data = tiny_dataset(20);
        let cfg = SamplePairConfig {
            center_jitter: 0.0,
            scale_jitter: 0.0,
            ..tiny_sample_cfg()
        };
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let pair = build_sample_pair(&data[0], &cfg, &mut rng).unwrap();
        let (cx, cy) = pair.test_gt.center();
        assert!((cx - 24.0).abs() < 1e-9, "{cx}");
        assert!((cy - 24.0).abs() < 1e-9, "{cy}");
    }

    #[test]
    fn iou_target_map_is_affine_to_minus_one_one() {
        assert_eq!(iou_to_target(0.0), -1.0);
        assert_eq!(iou_to_target(1.0), 1.0);
        assert_eq!(iou_to_target(0.5), 0.0);
        assert_eq!(target_to_iou(iou_to_target(0.37)), 0.37);
    }

    #[test]
    fn double_flip_is_identity() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..3 * 8 * 8).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut patch = Tensor::from_vec(&[3, 8, 8], data.clone()).unwrap();
        let mut boxes = vec![BoxXYWH::new(1.0, 2.0, 3.0, 4.0)];
        hflip_patch(&mut patch, &mut boxes).unwrap();
        assert_eq!(boxes[0].x, 8.0 - 1.0 - 3.0);
        hflip_patch(&mut patch, &mut boxes).unwrap();
        assert_eq!(patch.data(), data.as_slice());
        assert_eq!(boxes[0].x, 1.0);
    }

    #[test]
    fn flip_moves_left_margin_box_to_right_margin() {
        let mut patch = Tensor::zeros(&[3, 10, 10]);
        let mut boxes = vec![BoxXYWH::new(0.0, 3.0, 2.0, 2.0)];
        hflip_patch(&mut patch, &mut boxes).unwrap();
        assert_eq!(boxes[0].x, 8.0);
        assert_eq!(boxes[0].y, 3.0);
    }

    #[test]
    fn loss_zero_at_targets_and_hand_values() {
        // One group, one proposal: pred == target gives exactly zero.
        let mk = |iou_p: f64, cle_p: (f64, f64)| GroupedPrediction {
            batch: 1,
            groups: 1,
            proposals: 1,
            iou: Tensor::from_vec(&[1, 1, 1], vec![iou_p]).unwrap(),
            cle: Tensor::from_vec(&[1, 1, 1, 2], vec![cle_p.0, cle_p.1]).unwrap(),
        };
        let cfg = LossConfig::default();
        let (l, _, _) =
            multitask_loss(&mk(0.3, (0.1, -0.2)), &[0.3], &[(0.1, -0.2)], &cfg).unwrap();
        assert_eq!(l, 0.0);

        // IoU residual 0.5 -> 0.25; no CLE error.
        let (l, li, lc) = multitask_loss(&mk(0.5, (0.0, 0.0)), &[0.0], &[(0.0, 0.0)], &cfg).unwrap();
        assert_eq!(li, 0.25);
        assert_eq!(lc, 0.0);
        assert_eq!(l, 0.25);

        // CLE residual 0.5 on one component -> quadratic branch 0.125
        // (after averaging the two components: 0.0625).
        let (_, _, lc) = multitask_loss(&mk(0.0, (0.5, 0.0)), &[0.0], &[(0.0, 0.0)], &cfg).unwrap();
        assert_eq!(lc, 0.0625);
        assert_eq!(smooth_l1_scalar(0.5), 0.125);
        // Residual 2 -> linear branch 1.5.
        assert_eq!(smooth_l1_scalar(2.0), 1.5);

        // Lambda-linearity on dyadic values is exact.
        let pred = mk(0.5, (0.5, 0.5));
        let at = |lambda: f64| {
            multitask_loss(&pred, &[0.0], &[(0.0, 0.0)], &LossConfig { lambda }).unwrap().0
        };
        assert_eq!(at(8.0) - at(0.0), 2.0 * (at(4.0) - at(0.0)));
    }

    #[test]
    fn loss_is_permutation_invariant() {
        let iou_p = vec![0.1, -0.4, 0.7];
        let cle_p = vec![0.2, 0.0, -0.3, 0.5, 0.9, -0.9];
        let pred = GroupedPrediction {
            batch: 1,
            groups: 1,
            proposals: 3,
            iou: Tensor::from_vec(&[1, 1, 3], iou_p.clone()).unwrap(),
            cle: Tensor::from_vec(&[1, 1, 3, 2], cle_p.clone()).unwrap(),
        };
        let it = vec![0.3, -0.1, 0.5];
        let ct = vec![(0.0, 0.1), (0.2, -0.2), (0.4, 0.4)];
        let cfg = LossConfig::default();
        let (a, _, _) = multitask_loss(&pred, &it, &ct, &cfg).unwrap();

        // Reverse the proposal order everywhere.
        let pred_r = GroupedPrediction {
            batch: 1,
            groups: 1,
            proposals: 3,
            iou: Tensor::from_vec(&[1, 1, 3], iou_p.iter().rev().cloned().collect()).unwrap(),
            cle: Tensor::from_vec(
                &[1, 1, 3, 2],
                vec![cle_p[4], cle_p[5], cle_p[2], cle_p[3], cle_p[0], cle_p[1]],
            )
            .unwrap(),
        };
        let it_r: Vec<f64> = it.iter().rev().cloned().collect();
        let ct_r: Vec<(f64, f64)> = ct.iter().rev().cloned().collect();
        let (b, _, _) = multitask_loss(&pred_r, &it_r, &ct_r, &cfg).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn graph_loss_matches_value_loss() {
        let cfg = TrainConfig {
            net: NetConfig::tiny(),
            sample: SamplePairConfig { out_size: 48, n_test: 4, n_ref: 2, ..SamplePairConfig::default() },
            ..TrainConfig::default()
        };
        let data = tiny_dataset(10);
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let pairs: Vec<SamplePair> = (0..2)
            .map(|_| build_sample_pair(&data[0], &cfg.sample, &mut rng).unwrap())
            .collect();
        let batch = assemble_batch(&pairs).unwrap();
        let store = init_params(&cfg.net, 7).unwrap();
        let mut nf = forward_all(
            &store,
            &cfg.net,
            &batch.ref_images,
            &batch.test_images,
            &batch.ref_boxes,
            &batch.test_boxes,
            false,
        )
        .unwrap();
        let pred = nf.prediction().unwrap();
        let loss_cfg = LossConfig::default();
        let (want, want_iou, want_cle) =
            multitask_loss(&pred, &batch.iou_targets, &batch.cle_targets, &loss_cfg).unwrap();
        let nodes = build_loss(&mut nf, &batch.iou_targets, &batch.cle_targets, &loss_cfg).unwrap();
        let got = nf.graph.out(nodes.total).item().unwrap();
        let got_iou = nf.graph.out(nodes.iou_term).item().unwrap();
        let got_cle = nf.graph.out(nodes.cle_term).item().unwrap();
        assert!((want - got).abs() < 1e-12, "{want} vs {got}");
        assert!((want_iou - got_iou).abs() < 1e-12);
        assert!((want_cle - got_cle).abs() < 1e-12);
    }

    #[test]
    fn lr_schedule_decays_every_fifteen_epochs() {
        assert_eq!(scheduled_lr(1e-4, 0, 0.2, 15), 1e-4);
        assert_eq!(scheduled_lr(1e-4, 14, 0.2, 15), 1e-4);
        let lr30 = scheduled_lr(1e-4, 30, 0.2, 15);
        assert!((lr30 - 1e-4 * 0.04).abs() < 1e-18, "{lr30}");
    }

    #[test]
    fn short_training_run_is_deterministic_and_logs_every_step() {
        let cfg = TrainConfig {
            net: NetConfig::tiny(),
            sample: SamplePairConfig { out_size: 48, n_test: 4, n_ref: 2, ..SamplePairConfig::default() },
            steps: 3,
            batch_size: 2,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        let data = tiny_dataset(12);
        let mut log_a = Vec::new();
        let (store_a, out_a) = train(&data, &cfg, 11, false, Some(&mut log_a)).unwrap();
        let mut log_b = Vec::new();
        let (store_b, out_b) = train(&data, &cfg, 11, false, Some(&mut log_b)).unwrap();
        assert_eq!(log_a, log_b);
        assert_eq!(out_a.final_loss.to_bits(), out_b.final_loss.to_bits());
        for (name, p) in store_a.iter() {
            assert_eq!(p.tensor.data(), store_b.tensor(name).unwrap().data(), "{name}");
        }
        let text = String::from_utf8(log_a).unwrap();
        let data_rows = text.lines().filter(|l| !l.starts_with('#')).count();
        assert_eq!(data_rows, 3);
    }

    #[test]
    #[ignore = "timing probe, run explicitly"]
    fn bench_desk_step() {
        let cfg = TrainConfig { steps: 3, ..TrainConfig::desk() };
        let synth = SynthConfig {
            num_sequences: 4,
            frames: 30,
            ..SynthConfig::default()
        };
        let data: Vec<SequenceRecord> =
            (0..4).map(|i| synth_sequence(&synth, i, 9).unwrap()).collect();
        let t0 = std::time::Instant::now();
        let (_, out) = train(&data, &cfg, 1, true, None).unwrap();
        let dt = t0.elapsed().as_secs_f64();
        println!("desk: {} steps in {:.2}s ({:.2}s/step), loss {} -> {}",
            cfg.steps, dt, dt / cfg.steps as f64, out.initial_loss, out.final_loss);
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_schema() {
        assert!(TrainConfig::from_json(r#"{"schema_version":1,"stepz":5}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"schema_version":2}"#).is_err());
        let ok = TrainConfig::from_json(r#"{"schema_version":1}"#).unwrap();
        assert_eq!(ok.lambda, 4.0);
        assert_eq!(ok.lr, 1e-4);
    }
}
