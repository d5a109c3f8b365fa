//! Deterministic synthetic small-object sequences.
//!
//! Each sequence renders a single bright rectangular target moving over a
//! static field of dim background rectangles. Ground truth is analytic, so
//! annotations are exact by construction. Everything is a pure function of
//! (config, seed): the same pair always yields bitwise-identical frames.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::image::Image;
use super::SequenceRecord;
use crate::boxgeom::BoxXYWH;
use crate::{Error, Result};

pub const SYNTH_SCHEMA_VERSION: u32 = 1;

/// Difficulty preset selecting which nuisances the generator applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Smooth motion, no occlusion, constant scale.
    Easy,
    /// One occluder event per sequence covering most of the target.
    Occlusion,
    /// Slow scale drift emulating viewpoint change.
    Viewpoint,
}

impl Default for Preset {
    fn default() -> Self {
        Preset::Easy
    }
}

impl Preset {
    fn attribute_codes(self) -> Vec<String> {
        let codes: &[&str] = match self {
            Preset::Easy => &["SO"],
            Preset::Occlusion => &["SO", "LO"],
            Preset::Viewpoint => &["SO", "VC"],
        };
        codes.iter().map(|s| s.to_string()).collect()
    }

    fn name(self) -> &'static str {
        match self {
            Preset::Easy => "easy",
            Preset::Occlusion => "occlusion",
            Preset::Viewpoint => "viewpoint",
        }
    }
}

fn default_num_sequences() -> usize {
    10
}
fn default_frames() -> usize {
    100
}
fn default_frame_side() -> usize {
    256
}
fn default_target_min() -> f64 {
    8.0
}
fn default_target_max() -> f64 {
    32.0
}
fn default_speed() -> f64 {
    1.5
}
fn default_accel_sigma() -> f64 {
    0.15
}
fn default_background_rects() -> usize {
    40
}

/// Generator configuration. Unknown JSON keys are rejected so a typo in a
/// field name cannot silently fall back to a default.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub preset: Preset,
    #[serde(default = "default_num_sequences")]
    pub num_sequences: usize,
    #[serde(default = "default_frames")]
    pub frames: usize,
    #[serde(default = "default_frame_side")]
    pub width: usize,
    #[serde(default = "default_frame_side")]
    pub height: usize,
    #[serde(default = "default_target_min")]
    pub target_min: f64,
    #[serde(default = "default_target_max")]
    pub target_max: f64,
    #[serde(default = "default_speed")]
    pub speed: f64,
    #[serde(default = "default_accel_sigma")]
    pub accel_sigma: f64,
    #[serde(default = "default_background_rects")]
    pub background_rects: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            schema_version: SYNTH_SCHEMA_VERSION,
            preset: Preset::default(),
            num_sequences: default_num_sequences(),
            frames: default_frames(),
            width: default_frame_side(),
            height: default_frame_side(),
            target_min: default_target_min(),
            target_max: default_target_max(),
            speed: default_speed(),
            accel_sigma: default_accel_sigma(),
            background_rects: default_background_rects(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SYNTH_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "synth config schema_version {} unsupported, expected {SYNTH_SCHEMA_VERSION}",
                self.schema_version
            )));
        }
        if self.frames == 0 || self.num_sequences == 0 {
            return Err(Error::Config("frames and num_sequences must be positive".to_string()));
        }
        if !(1.0 <= self.target_min && self.target_min <= self.target_max) {
            return Err(Error::Config(format!(
                "target size range [{}, {}] is invalid",
                self.target_min, self.target_max
            )));
        }
        if self.target_max >= self.width.min(self.height) as f64 / 2.0 {
            return Err(Error::Config(format!(
                "target_max {} too large for {}x{} frames",
                self.target_max, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: SynthConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One occluder event: a distractor rectangle glued to the target with a
/// fixed offset, active over a frame span.
#[derive(Debug, Clone, Copy)]
struct Occlusion {
    start: usize,
    end: usize,
    // Offset from the target origin in units of target size; chosen so at
    // least half of the target area stays covered.
    dx: f64,
    dy: f64,
    color: [u8; 3],
}

/// Generates sequence `index` of the batch. Sequences are independently
/// seeded streams of one ChaCha generator, so adding sequences never
/// perturbs earlier ones.
pub fn synth_sequence(cfg: &SynthConfig, index: usize, seed: u64) -> Result<SequenceRecord> {
    cfg.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);

    let fw = cfg.width as f64;
    let fh = cfg.height as f64;

    // Static background: dim base tone plus dim clutter rectangles.
    let mut background = Image::new(cfg.width, cfg.height);
    let base = [rng.random_range(20..40u8), rng.random_range(20..40u8), rng.random_range(28..48u8)];
    background.fill(base);
    for _ in 0..cfg.background_rects {
        let w = rng.random_range(4.0..40.0);
        let h = rng.random_range(4.0..40.0);
        let x = rng.random_range(-10.0..fw - 10.0);
        let y = rng.random_range(-10.0..fh - 10.0);
        let color =
            [rng.random_range(30..90u8), rng.random_range(30..90u8), rng.random_range(30..90u8)];
        background.fill_rect(x, y, w, h, color);
    }

    // Bright target so appearance separates it from the clutter.
    let target_color = [
        rng.random_range(170..255u8),
        rng.random_range(170..255u8),
        rng.random_range(120..230u8),
    ];
    let w0 = rng.random_range(cfg.target_min..=cfg.target_max);
    let h0 = rng.random_range(cfg.target_min..=cfg.target_max);
    let margin = cfg.target_max + 4.0;
    let mut cx = rng.random_range(margin..fw - margin);
    let mut cy = rng.random_range(margin..fh - margin);
    let heading = rng.random_range(0.0..std::f64::consts::TAU);
    let mut vx = cfg.speed * heading.cos();
    let mut vy = cfg.speed * heading.sin();
    let accel = Normal::new(0.0, cfg.accel_sigma).map_err(|e| Error::Config(e.to_string()))?;

    let occlusion = if cfg.preset == Preset::Occlusion {
        let span = rng.random_range(8..16usize);
        let start = rng.random_range(cfg.frames / 4..(3 * cfg.frames / 4).max(cfg.frames / 4 + 1));
        Some(Occlusion {
            start,
            end: (start + span).min(cfg.frames),
            // Cover >= 50% of the target: offset magnitudes kept below 25%
            // of size in each axis, so coverage >= 0.75 * 0.75.
            dx: rng.random_range(-0.25..0.25),
            dy: rng.random_range(-0.25..0.25),
            // Bluish tone shared by nothing else in the scene.
            color: [
                rng.random_range(40..80u8),
                rng.random_range(40..80u8),
                rng.random_range(190..240u8),
            ],
        })
    } else {
        None
    };

    // Log-scale random walk for the viewpoint preset.
    let mut log_scale = 0.0f64;
    let scale_walk = Normal::new(0.0, 0.012).map_err(|e| Error::Config(e.to_string()))?;

    let mut frames = Vec::with_capacity(cfg.frames);
    let mut gt_boxes = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames {
        if cfg.preset == Preset::Viewpoint {
            log_scale = (log_scale + scale_walk.sample(&mut rng)).clamp(-0.5, 0.5);
        }
        let s = log_scale.exp();
        let w = (w0 * s).max(2.0);
        let h = (h0 * s).max(2.0);

        let gt = BoxXYWH::new(cx - w / 2.0, cy - h / 2.0, w, h);
        let mut frame = background.clone();
        frame.fill_rect(gt.x, gt.y, gt.w, gt.h, target_color);
        // A darker core gives the target internal structure.
        if w >= 6.0 && h >= 6.0 {
            frame.fill_rect(
                gt.x + w * 0.3,
                gt.y + h * 0.3,
                w * 0.4,
                h * 0.4,
                [target_color[0] / 2, target_color[1] / 2, target_color[2] / 2],
            );
        }
        if let Some(occ) = occlusion {
            if t >= occ.start && t < occ.end {
                frame.fill_rect(gt.x + occ.dx * w, gt.y + occ.dy * h, w, h, occ.color);
            }
        }
        frames.push(frame);
        gt_boxes.push(gt);

        // Constant velocity plus Gaussian acceleration, bouncing at the
        // walls so the target stays fully inside the frame.
        vx += accel.sample(&mut rng);
        vy += accel.sample(&mut rng);
        let vmax = cfg.speed * 2.0;
        vx = vx.clamp(-vmax, vmax);
        vy = vy.clamp(-vmax, vmax);
        cx += vx;
        cy += vy;
        let (lo_x, hi_x) = (w / 2.0 + 1.0, fw - w / 2.0 - 1.0);
        let (lo_y, hi_y) = (h / 2.0 + 1.0, fh - h / 2.0 - 1.0);
        if cx < lo_x {
            cx = 2.0 * lo_x - cx;
            vx = -vx;
        } else if cx > hi_x {
            cx = 2.0 * hi_x - cx;
            vx = -vx;
        }
        if cy < lo_y {
            cy = 2.0 * lo_y - cy;
            vy = -vy;
        } else if cy > hi_y {
            cy = 2.0 * hi_y - cy;
            vy = -vy;
        }
    }

    Ok(SequenceRecord {
        name: format!("{}_{index:03}", cfg.preset.name()),
        frames: super::FrameSource::Memory(frames),
        gt_boxes,
        attributes: cfg.preset.attribute_codes(),
    })
}

/// Generates the whole batch described by the config.
pub fn synth_batch(cfg: &SynthConfig, seed: u64) -> Result<Vec<SequenceRecord>> {
    (0..cfg.num_sequences).map(|i| synth_sequence(cfg, i, seed)).collect()
}
