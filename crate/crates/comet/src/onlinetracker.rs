//! Online tracking loop: rough estimation, proposal jittering, iterative
//! IoU-ascent / CLE-descent box refinement with size-scaled gradients, and
//! K-best averaging.

use std::cmp::Ordering;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::boxgeom::{
    crop_spec, gaussian_jitter, generate_proposals, BoxXYWH, JitterConfig, MIN_BOX_SIZE,
};
use crate::cometnet::{
    boxes_to_tensor, grouped_heads, reference_modulation, stack_images, stream, NetConfig,
};
use crate::diffcore::{Graph, ParamStore, Tensor};
use crate::evalbench::image::{extract_patch, Image};
use crate::evalbench::SequenceRecord;
use crate::training::target_to_iou;
use crate::{Error, Result};

fn default_beta() -> f64 {
    1.0
}
fn default_n_steps() -> usize {
    5
}
fn default_k_best() -> usize {
    3
}
fn default_n_proposals() -> usize {
    10
}
fn default_jitter_sigmas() -> Vec<f64> {
    vec![0.1, 0.2]
}

/// Refinement loop knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineConfig {
    /// Gradient step size.
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Refinement iterations per frame.
    #[serde(default = "default_n_steps")]
    pub n_steps: usize,
    /// Number of best-scored boxes averaged into the output.
    #[serde(default = "default_k_best")]
    pub k_best: usize,
    /// Jittered copies of the rough estimate per frame.
    #[serde(default = "default_n_proposals")]
    pub n_proposals: usize,
    /// Relative sigma factors for the per-frame proposal jitter.
    #[serde(default = "default_jitter_sigmas")]
    pub jitter_sigmas: Vec<f64>,
}

impl Default for RefineConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::Config(format!("beta {} must be positive", self.beta)));
        }
        if self.n_steps == 0 || self.n_proposals == 0 || self.k_best == 0 {
            return Err(Error::Config(
                "n_steps, n_proposals and k_best must be positive".to_string(),
            ));
        }
        // The rough estimate itself joins the candidate set.
        if self.k_best > self.n_proposals + 1 {
            return Err(Error::Config(format!(
                "k_best {} exceeds candidate count {}",
                self.k_best,
                self.n_proposals + 1
            )));
        }
        if self.jitter_sigmas.is_empty() || self.jitter_sigmas.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Config("jitter_sigmas must be non-empty and non-negative".to_string()));
        }
        Ok(())
    }
}

/// One ascent step on the predicted IoU: every gradient component is scaled
/// by the box size, `(gx*w, gy*h, gw*w, gh*h)`, added with step `beta`.
pub fn iou_step(b: &BoxXYWH, grad: &[f64; 4], beta: f64) -> BoxXYWH {
    BoxXYWH {
        x: b.x + beta * grad[0] * b.w,
        y: b.y + beta * grad[1] * b.h,
        w: (b.w + beta * grad[2] * b.w).max(MIN_BOX_SIZE),
        h: (b.h + beta * grad[3] * b.h).max(MIN_BOX_SIZE),
    }
}

/// One descent step on the center-error objective: only the position
/// components are size-scaled, `(gx*w, gy*h, gw, gh)`, subtracted with
/// step `beta`.
pub fn cle_step(b: &BoxXYWH, grad: &[f64; 4], beta: f64) -> BoxXYWH {
    BoxXYWH {
        x: b.x - beta * grad[0] * b.w,
        y: b.y - beta * grad[1] * b.h,
        w: (b.w - beta * grad[2]).max(MIN_BOX_SIZE),
        h: (b.h - beta * grad[3]).max(MIN_BOX_SIZE),
    }
}

/// External source of a per-frame rough target estimate. Implementations may
/// keep internal state (frame counters, templates, noise streams).
pub trait RoughEstimator {
    fn estimate(&mut self, frame: &Image, prev_box: &BoxXYWH) -> Result<BoxXYWH>;
    fn name(&self) -> &'static str;
}

/// Names of the estimators shipped with the tracker.
pub fn builtin_estimators() -> &'static [&'static str] {
    &["gt_jitter", "ncc"]
}

/// Harness estimator: replays the annotation track with fixed-seed Gaussian
/// noise relative to box size. Sigma zero reproduces the annotations exactly.
pub struct GtJitter {
    gt: Vec<BoxXYWH>,
    sigma: f64,
    rng: ChaCha12Rng,
    cursor: usize,
}

impl GtJitter {
    pub fn new(gt: Vec<BoxXYWH>, sigma: f64, seed: u64) -> Result<Self> {
        if gt.is_empty() {
            return Err(Error::Contract("gt_jitter needs a non-empty annotation track".to_string()));
        }
        if !(sigma >= 0.0) {
            return Err(Error::Config(format!("gt_jitter sigma {sigma} must be >= 0")));
        }
        // Frame 0 belongs to initialization; estimation starts at frame 1.
        Ok(GtJitter { gt, sigma, rng: ChaCha12Rng::seed_from_u64(seed), cursor: 1 })
    }
}

impl RoughEstimator for GtJitter {
    fn estimate(&mut self, frame: &Image, _prev_box: &BoxXYWH) -> Result<BoxXYWH> {
        let b = *self.gt.get(self.cursor).ok_or_else(|| {
            Error::Contract(format!("gt_jitter ran past its {}-frame track", self.gt.len()))
        })?;
        self.cursor += 1;
        let s = [self.sigma * b.w, self.sigma * b.h, self.sigma * b.w, self.sigma * b.h];
        Ok(gaussian_jitter(&b, &s, &mut self.rng)
            .clamp_to_frame(frame.width() as f64, frame.height() as f64))
    }

    fn name(&self) -> &'static str {
        "gt_jitter"
    }
}

const NCC_SCALES: [f64; 3] = [0.96, 1.0, 1.04];
const NCC_MARGIN: usize = 16;

/// Normalized cross-correlation estimator: matches the grayscale first-frame
/// target template over a search window around the previous box at three
/// scales and returns the peak.
pub struct Ncc {
    template: Vec<f64>,
    tw: usize,
    th: usize,
    margin: usize,
}

fn gray_at(gray: &[f64], w: usize, h: usize, x: i64, y: i64) -> f64 {
    let xc = x.clamp(0, w as i64 - 1) as usize;
    let yc = y.clamp(0, h as i64 - 1) as usize;
    gray[yc * w + xc]
}

/// Clamp-to-edge bilinear resample of a grayscale rectangle to (ow, oh).
fn resample(src: &[f64], sw: usize, sh: usize, ow: usize, oh: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(ow * oh);
    for i in 0..oh {
        for j in 0..ow {
            let sx = (j as f64 + 0.5) * sw as f64 / ow as f64 - 0.5;
            let sy = (i as f64 + 0.5) * sh as f64 / oh as f64 - 0.5;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let (x0, y0) = (x0 as i64, y0 as i64);
            let v = gray_at(src, sw, sh, x0, y0) * (1.0 - fx) * (1.0 - fy)
                + gray_at(src, sw, sh, x0 + 1, y0) * fx * (1.0 - fy)
                + gray_at(src, sw, sh, x0, y0 + 1) * (1.0 - fx) * fy
                + gray_at(src, sw, sh, x0 + 1, y0 + 1) * fx * fy;
            out.push(v);
        }
    }
    out
}

impl Ncc {
    pub fn new(frame0: &Image, gt: &BoxXYWH) -> Result<Self> {
        gt.check("ncc template box")?;
        let (fw, fh) = (frame0.width(), frame0.height());
        let b = gt.clamp_to_frame(fw as f64, fh as f64);
        let x0 = b.x.round() as i64;
        let y0 = b.y.round() as i64;
        let tw = (b.w.round() as usize).max(2);
        let th = (b.h.round() as usize).max(2);
        let gray = frame0.to_gray();
        let mut template = Vec::with_capacity(tw * th);
        for i in 0..th {
            for j in 0..tw {
                template.push(gray_at(&gray, fw, fh, x0 + j as i64, y0 + i as i64));
            }
        }
        Ok(Ncc { template, tw, th, margin: NCC_MARGIN })
    }

    /// NCC of a mean-subtracted template against the window at (x, y).
    fn score_at(
        gray: &[f64],
        fw: usize,
        fh: usize,
        x: i64,
        y: i64,
        tmpl: &[f64],
        tw: usize,
        th: usize,
        tnorm: f64,
    ) -> f64 {
        let n = (tw * th) as f64;
        let mut sum = 0.0;
        let mut sq = 0.0;
        let mut dot = 0.0;
        for i in 0..th {
            for j in 0..tw {
                let v = gray_at(gray, fw, fh, x + j as i64, y + i as i64);
                sum += v;
                sq += v * v;
                dot += v * tmpl[i * tw + j];
            }
        }
        // tmpl is mean-subtracted, so dot already equals the centered cross
        // term; center the window variance likewise.
        let var = sq - sum * sum / n;
        if var <= 1e-12 || tnorm <= 1e-12 {
            return -2.0;
        }
        dot / (var.sqrt() * tnorm)
    }
}

impl RoughEstimator for Ncc {
    fn estimate(&mut self, frame: &Image, prev_box: &BoxXYWH) -> Result<BoxXYWH> {
        let (fw, fh) = (frame.width(), frame.height());
        prev_box.check("ncc prev box")?;
        let inside = prev_box.clamp_to_frame(fw as f64, fh as f64);
        let gray = frame.to_gray();
        let (pcx, pcy) = inside.center();

        let mut best = (-3.0, inside);
        for s in NCC_SCALES {
            let ow = ((self.tw as f64 * s).round() as usize).max(2);
            let oh = ((self.th as f64 * s).round() as usize).max(2);
            let mut tmpl = resample(&self.template, self.tw, self.th, ow, oh);
            let n = (ow * oh) as f64;
            let mean = tmpl.iter().sum::<f64>() / n;
            for v in &mut tmpl {
                *v -= mean;
            }
            let tnorm = tmpl.iter().map(|v| v * v).sum::<f64>().sqrt();

            let cx0 = (pcx - ow as f64 / 2.0).round() as i64;
            let cy0 = (pcy - oh as f64 / 2.0).round() as i64;
            let m = self.margin as i64;
            for dy in -m..=m {
                for dx in -m..=m {
                    let (x, y) = (cx0 + dx, cy0 + dy);
                    let sc = Self::score_at(&gray, fw, fh, x, y, &tmpl, ow, oh, tnorm);
                    if sc > best.0 {
                        best = (sc, BoxXYWH::new(x as f64, y as f64, ow as f64, oh as f64));
                    }
                }
            }
        }
        Ok(best.1.clamp_to_frame(fw as f64, fh as f64))
    }

    fn name(&self) -> &'static str {
        "ncc"
    }
}

/// Per-sequence tracker state: the frozen parameter snapshot, the single
/// modulation row computed from frame 0, and the running box.
pub struct TrackState {
    store: ParamStore,
    cfg: NetConfig,
    refine: RefineConfig,
    area_factor: f64,
    modulation: Tensor,
    pub prev_box: BoxXYWH,
    pub frame_index: usize,
    estimator: Box<dyn RoughEstimator>,
    rng: ChaCha12Rng,
    /// Frames on which the tracker fell back (estimator failure or
    /// non-finite refinement), 1-based like frame_index.
    pub fallback_frames: Vec<usize>,
}

/// Runs the shared feature stream on one crop patch (eval mode, no graph
/// retained). Used per test frame and by refinement harnesses.
pub fn single_stream_features(store: &ParamStore, cfg: &NetConfig, patch: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new(false);
    let img = g.value(stack_images(&[patch.clone()])?);
    let feat = stream(&mut g, store, cfg, img)?;
    Ok(g.out(feat).clone())
}

/// Initializes tracking on the first frame: crops around the (clamped)
/// ground-truth box, runs the reference stream once and stores the single
/// modulation row. The modulation is never recomputed afterwards.
pub fn init(
    frame0: &Image,
    gt_box: &BoxXYWH,
    cfg: &NetConfig,
    store: &ParamStore,
    refine: RefineConfig,
    area_factor: f64,
    estimator: Box<dyn RoughEstimator>,
    seed: u64,
) -> Result<TrackState> {
    cfg.validate()?;
    refine.validate()?;
    gt_box.check("tracker init box")?;
    if area_factor <= 0.0 {
        return Err(Error::Config(format!("area_factor {area_factor} must be positive")));
    }
    let (fw, fh) = (frame0.width() as f64, frame0.height() as f64);
    let b = gt_box.clamp_to_frame(fw, fh);
    let spec = crop_spec(&b, area_factor, cfg.input_size)?;
    let patch = extract_patch(frame0, &spec);

    let mut g = Graph::new(false);
    let img = g.value(stack_images(&[patch])?);
    let feat = stream(&mut g, store, cfg, img)?;
    let boxes = g.input(boxes_to_tensor(&[spec.box_to_patch(&b)]));
    let mods = reference_modulation(&mut g, store, cfg, feat, boxes, vec![0])?;
    let modulation = g.out(mods).clone();

    Ok(TrackState {
        store: store.clone(),
        cfg: cfg.clone(),
        refine,
        area_factor,
        modulation,
        prev_box: b,
        frame_index: 0,
        estimator,
        rng: ChaCha12Rng::seed_from_u64(seed),
        fallback_frames: Vec::new(),
    })
}

fn grad_rows(t: &Tensor, q: usize) -> Result<Vec<[f64; 4]>> {
    if t.shape() != [q, 4] {
        return Err(Error::shape("refine gradients", format!("expected ({q}, 4), got {:?}", t.shape())));
    }
    let d = t.data();
    Ok((0..q).map(|i| [d[i * 4], d[i * 4 + 1], d[i * 4 + 2], d[i * 4 + 3]]).collect())
}

/// Refines candidate boxes against precomputed test features: `n_steps`
/// iterations, each taking one IoU-ascent step and one CLE-descent step with
/// the size-scaling rules of `iou_step` / `cle_step`. Returns the final
/// boxes and their predicted IoU in [0, 1].
///
/// Boxes are in crop-patch pixel coordinates.
pub fn refine_boxes(
    state: &TrackState,
    test_feat: &Tensor,
    boxes: &[BoxXYWH],
) -> Result<(Vec<BoxXYWH>, Vec<f64>)> {
    if boxes.is_empty() {
        return Err(Error::Contract("refine_boxes needs at least one box".to_string()));
    }
    let q = boxes.len();
    let mod_img = vec![0usize];
    let box_img = vec![0usize; q];
    let mut cur: Vec<BoxXYWH> = boxes.to_vec();

    let heads_pass = |cur: &[BoxXYWH], with_grads: bool| -> Result<(Vec<f64>, Vec<[f64; 4]>, Vec<[f64; 4]>)> {
        let mut g = Graph::new(false);
        let feat = g.value(test_feat.clone());
        let mods = g.value(state.modulation.clone());
        let bt = g.input(boxes_to_tensor(cur));
        let heads = grouped_heads(&mut g, &state.store, &state.cfg, feat, mods, &mod_img, bt, &box_img)?;
        let scores = g.out(heads.iou).data().to_vec();
        if !with_grads {
            return Ok((scores, Vec::new(), Vec::new()));
        }
        let iou_root = g.sum_all(heads.iou);
        let sq = g.mul(heads.cle, heads.cle)?;
        let cle_sum = g.sum_all(sq);
        let cle_root = g.mul_scalar(cle_sum, 0.5);

        g.backward(iou_root)?;
        let g_iou = grad_rows(g.grad(bt), q)?;
        g.zero_grads();
        g.backward(cle_root)?;
        let g_cle = grad_rows(g.grad(bt), q)?;
        for rows in [&g_iou, &g_cle] {
            if rows.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("refinement box gradients".to_string()));
            }
        }
        Ok((scores, g_iou, g_cle))
    };

    for _ in 0..state.refine.n_steps {
        let (_, g_iou, g_cle) = heads_pass(&cur, true)?;
        for i in 0..q {
            cur[i] = iou_step(&cur[i], &g_iou[i], state.refine.beta);
            cur[i] = cle_step(&cur[i], &g_cle[i], state.refine.beta);
        }
    }
    let (raw_scores, _, _) = heads_pass(&cur, false)?;
    let scores: Vec<f64> = raw_scores.iter().map(|&p| target_to_iou(p)).collect();
    Ok((cur, scores))
}

/// Indices of the k highest scores, ties broken by lower index.
fn k_best_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

fn mean_box(boxes: &[BoxXYWH]) -> BoxXYWH {
    let n = boxes.len() as f64;
    let mut acc = [0.0; 4];
    for b in boxes {
        acc[0] += b.x;
        acc[1] += b.y;
        acc[2] += b.w;
        acc[3] += b.h;
    }
    BoxXYWH { x: acc[0] / n, y: acc[1] / n, w: acc[2] / n, h: acc[3] / n }
}

/// Tracks one frame: rough estimate, jittered proposals, crop, refinement,
/// unweighted mean of the K best-scored boxes. Falls back to the previous
/// box (estimator failure) or the rough estimate (non-finite refinement)
/// and records the frame in `fallback_frames`.
pub fn track_frame(state: &mut TrackState, frame: &Image) -> Result<BoxXYWH> {
    state.frame_index += 1;
    let (fw, fh) = (frame.width() as f64, frame.height() as f64);

    let rough = match state.estimator.estimate(frame, &state.prev_box) {
        Ok(b) => b.clamp_to_frame(fw, fh),
        Err(_) => {
            state.fallback_frames.push(state.frame_index);
            return Ok(state.prev_box);
        }
    };

    let jitter = JitterConfig {
        mean: [0.0; 4],
        sigma_pool: state.refine.jitter_sigmas.iter().map(|&s| [s, s, s, s]).collect(),
        relative: true,
        threshold: 0.0,
        max_iter: 1,
        count: state.refine.n_proposals,
    };
    let mut candidates = vec![rough];
    candidates.extend(generate_proposals(&rough, &jitter, &mut state.rng)?.boxes);

    let spec = crop_spec(&rough, state.area_factor, state.cfg.input_size)?;
    let patch = extract_patch(frame, &spec);
    let feat = single_stream_features(&state.store, &state.cfg, &patch)?;
    let in_patch: Vec<BoxXYWH> = candidates.iter().map(|b| spec.box_to_patch(b)).collect();

    let out = match refine_boxes(state, &feat, &in_patch) {
        Ok((refined, scores)) => {
            let best = k_best_indices(&scores, state.refine.k_best);
            let picked: Vec<BoxXYWH> = best.iter().map(|&i| refined[i]).collect();
            spec.box_to_frame(&mean_box(&picked))
        }
        Err(Error::NonFinite(_)) => {
            state.fallback_frames.push(state.frame_index);
            rough
        }
        Err(e) => return Err(e),
    };
    let out = out.clamp_to_frame(fw, fh);
    state.prev_box = out;
    Ok(out)
}

/// Which rough estimator to run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EstimatorSpec {
    GtJitter { sigma: f64, seed: u64 },
    Ncc,
}

impl EstimatorSpec {
    pub fn build(&self, seq: &SequenceRecord) -> Result<Box<dyn RoughEstimator>> {
        match *self {
            EstimatorSpec::GtJitter { sigma, seed } => {
                Ok(Box::new(GtJitter::new(seq.gt_boxes.clone(), sigma, seed)?))
            }
            EstimatorSpec::Ncc => {
                let frame0 = seq.frame(0)?;
                let gt0 = seq.gt_boxes.first().ok_or_else(|| {
                    Error::Contract(format!("sequence {} has no annotations", seq.name))
                })?;
                Ok(Box::new(Ncc::new(&frame0, gt0)?))
            }
        }
    }
}

/// Runs the tracker over a whole sequence. The first output box is the
/// initialization box itself; later boxes come from `track_frame`.
pub fn track_sequence(
    seq: &SequenceRecord,
    cfg: &NetConfig,
    store: &ParamStore,
    refine: &RefineConfig,
    area_factor: f64,
    estimator: EstimatorSpec,
    seed: u64,
) -> Result<(Vec<BoxXYWH>, Vec<usize>)> {
    if seq.is_empty() {
        return Err(Error::Contract(format!("sequence {} is empty", seq.name)));
    }
    let frame0 = seq.frame(0)?;
    let est = estimator.build(seq)?;
    let mut state = init(
        &frame0,
        &seq.gt_boxes[0],
        cfg,
        store,
        refine.clone(),
        area_factor,
        est,
        seed,
    )?;
    let mut out = Vec::with_capacity(seq.len());
    out.push(state.prev_box);
    for t in 1..seq.len() {
        let frame = seq.frame(t)?;
        out.push(track_frame(&mut state, &frame)?);
    }
    Ok((out, state.fallback_frames))
}
