//! Axis-aligned box geometry: IoU, normalized center-location error,
//! Gaussian jittering and IoU-constrained proposal generation, plus the
//! square crop geometry used to cut network input patches.

use crate::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Minimum width/height enforced after jittering or refinement steps.
pub const MIN_BOX_SIZE: f64 = 1.0;

/// Top-left + size box: (x, y) is the top-left corner, (w, h) the extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxXYWH {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxXYWH {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BoxXYWH { x, y, w, h }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && self.is_finite()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.w.is_finite() && self.h.is_finite()
    }

    pub fn check(&self, context: &str) -> Result<()> {
        if !self.is_valid() {
            return Err(Error::invalid_box(context, self.w, self.h));
        }
        Ok(())
    }

    /// Clamp so the box stays inside a `fw` x `fh` frame with w,h >= 1.
    pub fn clamp_to_frame(&self, fw: f64, fh: f64) -> BoxXYWH {
        let w = self.w.clamp(MIN_BOX_SIZE, fw.max(MIN_BOX_SIZE));
        let h = self.h.clamp(MIN_BOX_SIZE, fh.max(MIN_BOX_SIZE));
        let x = self.x.clamp(0.0, (fw - w).max(0.0));
        let y = self.y.clamp(0.0, (fh - h).max(0.0));
        BoxXYWH { x, y, w, h }
    }
}

/// Intersection-over-union of two boxes. Symmetric, in [0,1], and exactly 1
/// for identical boxes.
pub fn iou(a: &BoxXYWH, b: &BoxXYWH) -> Result<f64> {
    a.check("iou lhs")?;
    b.check("iou rhs")?;
    let ix = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
    let iy = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    if ix <= 0.0 || iy <= 0.0 {
        return Ok(0.0);
    }
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    Ok(inter / union)
}

/// Normalized center offset of proposal `p` relative to ground truth `gt`:
/// (delta_cx / gt.w, delta_cy / gt.h), deltas taken gt minus proposal.
pub fn cle_normalized(gt: &BoxXYWH, p: &BoxXYWH) -> Result<(f64, f64)> {
    gt.check("cle ground truth")?;
    let (gx, gy) = gt.center();
    let (px, py) = p.center();
    Ok(((gx - px) / gt.w, (gy - py) / gt.h))
}

/// Add zero-mean Gaussian noise with per-coordinate `sigma` (absolute pixels)
/// to all four coordinates; output size clamped to at least `MIN_BOX_SIZE`.
pub fn gaussian_jitter<R: Rng>(b: &BoxXYWH, sigma: &[f64; 4], rng: &mut R) -> BoxXYWH {
    let mut out = [b.x, b.y, b.w, b.h];
    for (v, &s) in out.iter_mut().zip(sigma.iter()) {
        if s > 0.0 {
            let n = Normal::new(0.0, s).expect("sigma >= 0");
            *v += n.sample(rng);
        }
    }
    BoxXYWH { x: out[0], y: out[1], w: out[2].max(MIN_BOX_SIZE), h: out[3].max(MIN_BOX_SIZE) }
}

/// Configuration for IoU-constrained proposal generation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JitterConfig {
    pub mean: [f64; 4],
    /// Candidate standard-deviation vectors; one is drawn uniformly per attempt.
    pub sigma_pool: Vec<[f64; 4]>,
    /// If true, sigma entries are factors of (w, h, w, h) of the source box.
    pub relative: bool,
    /// IoU lower bound each proposal must meet.
    pub threshold: f64,
    /// Attempts per slot before giving up and flagging the slot.
    pub max_iter: usize,
    /// Number of proposals to produce.
    pub count: usize,
}

impl JitterConfig {
    fn default_pool() -> Vec<[f64; 4]> {
        [0.05, 0.1, 0.2, 0.3, 0.5].iter().map(|&f| [f, f, f, f]).collect()
    }

    /// Reference-side config: tight threshold, generous attempt budget.
    pub fn reference(count: usize) -> Self {
        JitterConfig {
            mean: [0.0; 4],
            sigma_pool: Self::default_pool(),
            relative: true,
            threshold: 0.8,
            max_iter: 200,
            count,
        }
    }

    /// Test-side config: loose threshold, small attempt budget.
    pub fn test_side(count: usize) -> Self {
        JitterConfig {
            mean: [0.0; 4],
            sigma_pool: Self::default_pool(),
            relative: true,
            threshold: 0.1,
            max_iter: 20,
            count,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.threshold) && self.threshold != 1.0 {
            return Err(Error::Config(format!("jitter threshold {} outside [0,1]", self.threshold)));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("jitter max_iter must be positive".into()));
        }
        if self.sigma_pool.is_empty() {
            return Err(Error::Config("jitter sigma_pool must be non-empty".into()));
        }
        Ok(())
    }
}

/// Proposals around a source box. Slots that never met the IoU threshold keep
/// their last draw and are marked in `exhausted_flags`.
#[derive(Debug, Clone)]
pub struct ProposalSet {
    pub boxes: Vec<BoxXYWH>,
    pub exhausted_flags: Vec<bool>,
    pub source_box: BoxXYWH,
}

impl ProposalSet {
    pub fn exhausted_count(&self) -> usize {
        self.exhausted_flags.iter().filter(|&&f| f).count()
    }
}

/// Draw `cfg.count` jittered proposals around `b`, redrawing each slot until
/// IoU(b, proposal) >= cfg.threshold or `cfg.max_iter` attempts are used.
pub fn generate_proposals<R: Rng>(b: &BoxXYWH, cfg: &JitterConfig, rng: &mut R) -> Result<ProposalSet> {
    b.check("generate_proposals source")?;
    cfg.validate()?;
    let mut boxes = Vec::with_capacity(cfg.count);
    let mut flags = Vec::with_capacity(cfg.count);
    for _ in 0..cfg.count {
        let mut last = *b;
        let mut ok = false;
        for _ in 0..cfg.max_iter {
            let raw = cfg.sigma_pool[rng.random_range(0..cfg.sigma_pool.len())];
            let sigma = if cfg.relative {
                [raw[0] * b.w, raw[1] * b.h, raw[2] * b.w, raw[3] * b.h]
            } else {
                raw
            };
            let shifted = BoxXYWH::new(b.x + cfg.mean[0], b.y + cfg.mean[1], b.w + cfg.mean[2], b.h + cfg.mean[3]);
            last = gaussian_jitter(&shifted, &sigma, rng);
            if iou(b, &last)? >= cfg.threshold {
                ok = true;
                break;
            }
        }
        boxes.push(last);
        flags.push(!ok);
    }
    Ok(ProposalSet { boxes, exhausted_flags: flags, source_box: *b })
}

/// Square crop window centered on a box, plus the affine map to a fixed
/// output resolution. Side length is `area_factor * sqrt(w*h)`.
#[derive(Debug, Clone, Copy)]
pub struct CropSpec {
    pub cx: f64,
    pub cy: f64,
    pub side: f64,
    pub out_size: usize,
}

impl CropSpec {
    pub fn scale(&self) -> f64 {
        self.out_size as f64 / self.side
    }

    /// Top-left corner of the source window in frame coordinates.
    pub fn origin(&self) -> (f64, f64) {
        (self.cx - self.side / 2.0, self.cy - self.side / 2.0)
    }

    pub fn box_to_patch(&self, b: &BoxXYWH) -> BoxXYWH {
        let (ox, oy) = self.origin();
        let s = self.scale();
        BoxXYWH::new((b.x - ox) * s, (b.y - oy) * s, b.w * s, b.h * s)
    }

    pub fn box_to_frame(&self, b: &BoxXYWH) -> BoxXYWH {
        let (ox, oy) = self.origin();
        let s = self.scale();
        BoxXYWH::new(b.x / s + ox, b.y / s + oy, b.w / s, b.h / s)
    }
}

pub fn crop_spec(b: &BoxXYWH, area_factor: f64, out_size: usize) -> Result<CropSpec> {
    b.check("crop_spec")?;
    if area_factor <= 0.0 {
        return Err(Error::Config(format!("area_factor {area_factor} must be positive")));
    }
    if out_size == 0 {
        return Err(Error::Config("out_size must be positive".into()));
    }
    let (cx, cy) = b.center();
    Ok(CropSpec { cx, cy, side: area_factor * (b.w * b.h).sqrt(), out_size })
}
