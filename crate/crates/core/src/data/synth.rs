//! Procedural moving-shape videos and still scenes with exact masks.
//!
//! Shapes (ellipses and star-shaped polygons with a striped surface) move
//! over a textured background, bounce off the borders, spin and pulse in
//! size. Masks record the visible part of each annotated shape, so they
//! agree with the rendered pixels exactly. Optional extras: an unannotated
//! occluder that passes over one object mid-video, and a linear color ramp
//! on every object.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Scene, Video};
use crate::error::{Result, StmError};
use crate::multi_object::LabelMap;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub sequences: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Upper bound on unannotated shapes per video; off by default.
    pub distractors: usize,
    pub occlusion: bool,
    pub drift: bool,
    /// Pixels per frame.
    pub max_speed: f64,
    pub name_prefix: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            sequences: 8,
            frames: 16,
            height: 64,
            width: 64,
            min_objects: 1,
            max_objects: 2,
            distractors: 0,
            occlusion: false,
            drift: false,
            max_speed: 2.0,
            name_prefix: "synth".into(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height < 16 || self.width < 16 {
            return Err(StmError::invalid("synthetic videos need ≥ 1 frame and extents ≥ 16"));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects || self.max_objects > 255 {
            return Err(StmError::invalid("object counts must satisfy 1 ≤ min ≤ max ≤ 255"));
        }
        if !(self.max_speed >= 0.0 && self.max_speed.is_finite()) {
            return Err(StmError::invalid("max_speed must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Outline {
    Ellipse { rx: f64, ry: f64 },
    /// Vertices in local coordinates, counter-clockwise.
    Polygon(Vec<(f64, f64)>),
}

impl Outline {
    fn contains(&self, u: f64, v: f64) -> bool {
        match self {
            Outline::Ellipse { rx, ry } => (u / rx).powi(2) + (v / ry).powi(2) <= 1.0,
            Outline::Polygon(pts) => {
                let mut inside = false;
                let mut j = pts.len() - 1;
                for i in 0..pts.len() {
                    let ((xi, yi), (xj, yj)) = (pts[i], pts[j]);
                    if (yi > v) != (yj > v) && u < (xj - xi) * (v - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                    j = i;
                }
                inside
            }
        }
    }
}

/// A shape together with its trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    outline: Outline,
    /// Label written for visible pixels; 0 for unannotated shapes.
    pub id: u8,
    start: (f64, f64),
    velocity: (f64, f64),
    bounce: bool,
    angle: f64,
    spin: f64,
    pulse: (f64, f64, f64),
    color: ([f32; 3], [f32; 3]),
    stripes: (f64, f64, f32),
}

/// Pose of a track at one frame.
#[derive(Clone, Copy, Debug)]
struct Pose {
    cx: f64,
    cy: f64,
    cos: f64,
    sin: f64,
    scale: f64,
    color: [f32; 3],
}

fn reflect(p: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    if span <= 0.0 {
        return lo;
    }
    let u = (p - lo).rem_euclid(2.0 * span);
    lo + if u > span { 2.0 * span - u } else { u }
}

impl Track {
    fn pose(&self, t: usize, frames: usize, h: usize, w: usize) -> Pose {
        let tf = t as f64;
        let (mut cx, mut cy) = (self.start.0 + self.velocity.0 * tf, self.start.1 + self.velocity.1 * tf);
        if self.bounce {
            cx = reflect(cx, 0.0, w as f64);
            cy = reflect(cy, 0.0, h as f64);
        }
        let angle = self.angle + self.spin * tf;
        let (amp, freq, phase) = self.pulse;
        let ramp = if frames > 1 { (tf / (frames - 1) as f64) as f32 } else { 0.0 };
        let (c0, c1) = self.color;
        Pose {
            cx,
            cy,
            cos: angle.cos(),
            sin: angle.sin(),
            scale: 1.0 + amp * (freq * tf + phase).sin(),
            color: [0, 1, 2].map(|c| c0[c] + (c1[c] - c0[c]) * ramp),
        }
    }

    fn local(pose: &Pose, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - pose.cx, y - pose.cy);
        (
            (dx * pose.cos + dy * pose.sin) / pose.scale,
            (-dx * pose.sin + dy * pose.cos) / pose.scale,
        )
    }

    fn shade(&self, pose: &Pose, u: f64) -> [f32; 3] {
        let (freq, phase, amp) = self.stripes;
        let k = 1.0 + amp * ((freq * u + phase).sin() as f32);
        pose.color.map(|c| (c * k).clamp(0.0, 1.0))
    }

    /// Largest distance from the center to the outline at unit scale.
    fn radius(&self) -> f64 {
        match &self.outline {
            Outline::Ellipse { rx, ry } => rx.max(*ry),
            Outline::Polygon(pts) => pts.iter().map(|(x, y)| x.hypot(*y)).fold(0.0, f64::max),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Background {
    base: [f32; 3],
    wave: [f32; 3],
    freq: (f64, f64),
    phase: f64,
    noise: Vec<f32>,
}

/// Scene geometry and appearance for a whole video.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoLayout {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    background: Background,
    /// Bottom to top.
    pub tracks: Vec<Track>,
}

fn random_color<R: Rng + ?Sized>(rng: &mut R, avoid: &[[f32; 3]]) -> [f32; 3] {
    let mut best = [0.5; 3];
    let mut best_dist = -1.0;
    for _ in 0..16 {
        let c: [f32; 3] = [rng.random(), rng.random(), rng.random()];
        let dist = avoid
            .iter()
            .map(|a| (0..3).map(|i| (a[i] - c[i]).powi(2)).sum::<f32>().sqrt())
            .fold(f32::INFINITY, f32::min);
        if dist > 0.45 {
            return c;
        }
        if dist > best_dist {
            best = c;
            best_dist = dist;
        }
    }
    best
}

fn random_outline<R: Rng + ?Sized>(rng: &mut R, r: f64) -> Outline {
    if rng.random_bool(0.5) {
        Outline::Ellipse {
            rx: r,
            ry: r * rng.random_range(0.55..1.0),
        }
    } else {
        let k = rng.random_range(3..=7);
        let mut angles: Vec<f64> = (0..k)
            .map(|i| (i as f64 + rng.random_range(0.1..0.9)) * 2.0 * PI / k as f64)
            .collect();
        angles.sort_by(f64::total_cmp);
        Outline::Polygon(
            angles
                .into_iter()
                .map(|a| {
                    let rr = r * rng.random_range(0.65..1.0);
                    (rr * a.cos(), rr * a.sin())
                })
                .collect(),
        )
    }
}

impl VideoLayout {
    /// Samples a layout; `drift` and `occlusion` follow the config.
    pub fn sample<R: Rng + ?Sized>(config: &SynthConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (h, w) = (config.height, config.width);
        let side = h.min(w) as f64;
        let base: [f32; 3] = [rng.random(), rng.random(), rng.random()];
        let background = Background {
            base,
            wave: [0, 1, 2].map(|_| rng.random_range(0.05..0.2)),
            freq: (rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4)),
            phase: rng.random_range(0.0..2.0 * PI),
            noise: (0..3 * h * w).map(|_| rng.random_range(-0.05..0.05)).collect(),
        };
        let objects = rng.random_range(config.min_objects..=config.max_objects);
        let distractors = rng.random_range(0..=config.distractors);
        let mut palette = vec![base];
        let mut tracks = Vec::new();
        for i in 0..objects + distractors {
            let r = side * rng.random_range(0.12..0.22);
            let margin = r * 0.5;
            let speed = rng.random_range(0.0..=config.max_speed);
            let heading = rng.random_range(0.0..2.0 * PI);
            let c0 = random_color(rng, &palette);
            palette.push(c0);
            // Drawn either way so `drift` alters nothing but the colors.
            let ramp = c0.map(|c| (c + rng.random_range(-0.35f32..0.35)).clamp(0.0, 1.0));
            let c1 = if config.drift { ramp } else { c0 };
            tracks.push(Track {
                outline: random_outline(rng, r),
                id: if i < objects { i as u8 + 1 } else { 0 },
                start: (
                    rng.random_range(margin..w as f64 - margin),
                    rng.random_range(margin..h as f64 - margin),
                ),
                velocity: (speed * heading.cos(), speed * heading.sin()),
                bounce: true,
                angle: rng.random_range(0.0..2.0 * PI),
                spin: rng.random_range(-0.08..0.08),
                pulse: (
                    rng.random_range(0.0..0.15),
                    rng.random_range(0.1..0.4),
                    rng.random_range(0.0..2.0 * PI),
                ),
                color: (c0, c1),
                stripes: (
                    rng.random_range(0.3..1.2),
                    rng.random_range(0.0..2.0 * PI),
                    rng.random_range(0.0..0.25),
                ),
            });
        }
        // Random stacking order.
        for i in (1..tracks.len()).rev() {
            let j = rng.random_range(0..=i);
            tracks.swap(i, j);
        }
        let mut layout = VideoLayout {
            height: h,
            width: w,
            frames: config.frames,
            background,
            tracks,
        };
        if config.occlusion && config.frames >= 3 {
            layout.add_occluder(rng, &palette);
        }
        Ok(layout)
    }

    fn add_occluder<R: Rng + ?Sized>(&mut self, rng: &mut R, palette: &[[f32; 3]]) {
        let (h, w, frames) = (self.height, self.width, self.frames);
        let annotated: Vec<usize> = (0..self.tracks.len()).filter(|&i| self.tracks[i].id != 0).collect();
        let target = &self.tracks[annotated[rng.random_range(0..annotated.len())]];
        let t_mid = rng.random_range(frames / 3..=(2 * frames / 3).max(frames / 3));
        let pose = target.pose(t_mid, frames, h, w);
        let r = 1.25 * target.radius() * (1.0 + target.pulse.0);
        // Fast enough that the object re-emerges within about a quarter of
        // the video.
        let speed = rng.random_range(0.8..1.2) * 2.5 * r / (frames as f64 / 4.0).max(2.0);
        let heading = rng.random_range(0.0..2.0 * PI);
        let velocity = (speed * heading.cos(), speed * heading.sin());
        let color = random_color(rng, palette);
        self.tracks.push(Track {
            outline: Outline::Ellipse { rx: r, ry: r },
            id: 0,
            start: (pose.cx - velocity.0 * t_mid as f64, pose.cy - velocity.1 * t_mid as f64),
            velocity,
            bounce: false,
            angle: 0.0,
            spin: 0.0,
            pulse: (0.0, 0.0, 0.0),
            color: (color, color),
            stripes: (rng.random_range(0.3..1.2), 0.0, rng.random_range(0.0..0.25)),
        });
    }

    /// Number of annotated objects.
    pub fn objects(&self) -> usize {
        self.tracks.iter().filter(|t| t.id != 0).count()
    }

    /// Full (amodal) extent of track `k` at frame `t`, ignoring occlusion.
    pub fn silhouette(&self, k: usize, t: usize) -> Vec<bool> {
        let (h, w) = (self.height, self.width);
        let track = &self.tracks[k];
        let pose = track.pose(t, self.frames, h, w);
        (0..h * w)
            .map(|p| {
                let (u, v) = Track::local(&pose, (p % w) as f64 + 0.5, (p / w) as f64 + 0.5);
                track.outline.contains(u, v)
            })
            .collect()
    }

    /// Renders frame `t` and its label map.
    pub fn render(&self, t: usize) -> (Tensor, LabelMap) {
        let (h, w) = (self.height, self.width);
        let poses: Vec<Pose> = self.tracks.iter().map(|tr| tr.pose(t, self.frames, h, w)).collect();
        let bg = &self.background;
        let mut data = vec![0f32; 3 * h * w];
        let mut labels = vec![0u8; h * w];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut rgb = None;
                for (track, pose) in self.tracks.iter().zip(&poses).rev() {
                    let (u, v) = Track::local(pose, px, py);
                    if track.outline.contains(u, v) {
                        rgb = Some(track.shade(pose, u));
                        labels[p] = track.id;
                        break;
                    }
                }
                let rgb = rgb.unwrap_or_else(|| {
                    let s = (bg.freq.0 * px + bg.freq.1 * py + bg.phase).sin() as f32;
                    [0, 1, 2].map(|c| (bg.base[c] + bg.wave[c] * s + bg.noise[c * h * w + p]).clamp(0.0, 1.0))
                });
                for c in 0..3 {
                    data[c * h * w + p] = rgb[c];
                }
            }
        }
        (
            Tensor::new(&[3, h, w], data).expect("extents are positive"),
            LabelMap {
                height: h,
                width: w,
                labels,
            },
        )
    }
}

const LAYOUT_RETRIES: usize = 20;
/// Minimum visible fraction of each annotated object in the first frame.
const MIN_FIRST_VISIBLE: f64 = 0.6;

fn first_frame_ok(layout: &VideoLayout, labels: &LabelMap) -> bool {
    layout.tracks.iter().enumerate().filter(|(_, t)| t.id != 0).all(|(k, t)| {
        let full = layout.silhouette(k, 0).iter().filter(|&&b| b).count();
        let visible = labels.labels.iter().filter(|&&l| l == t.id).count();
        full > 0 && visible as f64 >= MIN_FIRST_VISIBLE * full as f64
    })
}

/// Samples a layout whose annotated objects are reasonably visible in the
/// first frame, giving up after a bounded number of attempts.
pub fn sample_layout<R: Rng + ?Sized>(config: &SynthConfig, rng: &mut R) -> Result<VideoLayout> {
    let mut layout = VideoLayout::sample(config, rng)?;
    for _ in 0..LAYOUT_RETRIES {
        if first_frame_ok(&layout, &layout.render(0).1) {
            break;
        }
        layout = VideoLayout::sample(config, rng)?;
    }
    Ok(layout)
}

/// Generates `config.sequences` videos named `<prefix>-NNNN`.
pub fn synth_videos<R: Rng + ?Sized>(config: &SynthConfig, rng: &mut R) -> Result<Vec<Video>> {
    (0..config.sequences)
        .map(|i| {
            let layout = sample_layout(config, rng)?;
            let (frames, labels) = (0..config.frames).map(|t| layout.render(t)).unzip();
            Ok(Video {
                name: format!("{}-{i:04}", config.name_prefix),
                frames,
                labels,
            })
        })
        .collect()
}

/// Generates `count` annotated still images.
pub fn synth_scenes<R: Rng + ?Sized>(config: &SynthConfig, count: usize, rng: &mut R) -> Result<Vec<Scene>> {
    let still = SynthConfig {
        frames: 1,
        occlusion: false,
        drift: false,
        ..config.clone()
    };
    (0..count)
        .map(|_| {
            let (image, labels) = sample_layout(&still, rng)?.render(0);
            Ok(Scene { image, labels })
        })
        .collect()
}
