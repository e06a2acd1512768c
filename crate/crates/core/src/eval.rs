//! Segmentation metrics: region similarity (Jaccard index) and contour
//! accuracy (boundary F-measure), aggregated into per-sequence reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{object_ids, Video};
use crate::engine::{run_video, InferenceConfig};
use crate::error::{Result, StmError};
use crate::model::StmModel;
use crate::multi_object::LabelMap;

/// A binary mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(StmError::dim(format!("{} values for a {height}x{width} mask", bits.len())));
        }
        Ok(Mask { height, width, bits })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..height * width).map(|p| f(p / width, p % width)).collect();
        Mask { height, width, bits }
    }

    pub fn from_labels(labels: &LabelMap, id: u8) -> Self {
        Mask {
            height: labels.height,
            width: labels.width,
            bits: labels.mask(id),
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    fn at(&self, y: isize, x: isize) -> bool {
        y >= 0 && x >= 0 && (y as usize) < self.height && (x as usize) < self.width && self.bits[y as usize * self.width + x as usize]
    }

    /// Mask pixels with at least one 8-neighbor outside the mask; pixels
    /// past the image border count as outside.
    pub fn boundary(&self) -> Mask {
        Mask::from_fn(self.height, self.width, |y, x| {
            let (y, x) = (y as isize, x as isize);
            self.at(y, x) && (-1..=1).any(|dy| (-1..=1).any(|dx| !self.at(y + dy, x + dx)))
        })
    }

    /// Pixels within Euclidean distance `radius` of the mask.
    pub fn dilate(&self, radius: f64) -> Mask {
        let r = radius.max(0.0).floor() as isize;
        let offsets: Vec<(isize, isize)> = (-r..=r)
            .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
            .filter(|&(dy, dx)| ((dy * dy + dx * dx) as f64) <= radius * radius)
            .collect();
        let mut out = vec![false; self.bits.len()];
        for (p, _) in self.bits.iter().enumerate().filter(|(_, &b)| b) {
            let (y, x) = ((p / self.width) as isize, (p % self.width) as isize);
            for &(dy, dx) in &offsets {
                let (yy, xx) = (y + dy, x + dx);
                if yy >= 0 && xx >= 0 && (yy as usize) < self.height && (xx as usize) < self.width {
                    out[yy as usize * self.width + xx as usize] = true;
                }
            }
        }
        Mask {
            height: self.height,
            width: self.width,
            bits: out,
        }
    }

    fn expect_same_extent(&self, other: &Mask) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(StmError::dim(format!(
                "mask extents differ: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }
}

/// `|pred ∩ gt| / |pred ∪ gt|`, defined as 1 when both are empty.
pub fn jaccard(pred: &Mask, gt: &Mask) -> Result<f64> {
    pred.expect_same_extent(gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.bits.iter().zip(&gt.bits) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Default boundary tolerance: 0.8% of the image diagonal, rounded.
pub fn default_tolerance(height: usize, width: usize) -> f64 {
    (0.008 * (height as f64).hypot(width as f64)).round()
}

/// Boundary precision and recall within `tolerance` pixels.
pub fn contour_precision_recall(pred: &Mask, gt: &Mask, tolerance: f64) -> Result<(f64, f64)> {
    pred.expect_same_extent(gt)?;
    if !(tolerance >= 0.0) {
        return Err(StmError::invalid("contour tolerance must be non-negative"));
    }
    let (pb, gb) = (pred.boundary(), gt.boundary());
    let (pd, gd) = (pb.dilate(tolerance), gb.dilate(tolerance));
    let matched = |b: &Mask, d: &Mask| b.bits.iter().zip(&d.bits).filter(|(&x, &y)| x && y).count();
    let ratio = |m: usize, n: usize| if n == 0 { 0.0 } else { m as f64 / n as f64 };
    Ok((ratio(matched(&pb, &gd), pb.count()), ratio(matched(&gb, &pd), gb.count())))
}

/// Boundary F-measure `2PR / (P + R)`. Both boundaries empty gives 1; one
/// empty gives 0.
pub fn contour_f(pred: &Mask, gt: &Mask, tolerance: f64) -> Result<f64> {
    let (p, r) = contour_precision_recall(pred, gt, tolerance)?;
    let (np, ng) = (pred.boundary().count(), gt.boundary().count());
    Ok(match (np, ng) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ if p + r == 0.0 => 0.0,
        _ => 2.0 * p * r / (p + r),
    })
}

/// Ground truth for one sequence; frames without an annotation are `None`.
#[derive(Clone, Debug)]
pub struct EvalSequence {
    pub name: String,
    pub gt: Vec<Option<LabelMap>>,
}

impl EvalSequence {
    pub fn from_video(video: &Video) -> Self {
        EvalSequence {
            name: video.name.clone(),
            gt: video.labels.iter().cloned().map(Some).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameScore {
    pub sequence: String,
    pub frame: usize,
    pub object: u8,
    pub j: f64,
    pub f: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectScore {
    pub object: u8,
    pub j: f64,
    pub f: f64,
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceScore {
    pub name: String,
    pub objects: Vec<ObjectScore>,
    /// Mean over objects.
    pub j: f64,
    pub f: f64,
}

/// Sorted per-frame, per-object scores with percentile markers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreCurve {
    pub sorted: Vec<f64>,
    pub p10: f64,
    pub p30: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub frames: Vec<FrameScore>,
    pub sequences: Vec<SequenceScore>,
    /// Means over all (sequence, object) pairs.
    pub j_mean: f64,
    pub f_mean: f64,
    pub jf_mean: f64,
    pub distribution: ScoreCurve,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn score_sequence(seq: &EvalSequence, pred: &[LabelMap], tolerance: Option<f64>) -> Result<(Vec<FrameScore>, SequenceScore)> {
    let first = seq.gt.first().and_then(Option::as_ref).ok_or_else(|| {
        StmError::invalid(format!("sequence {} has no first-frame annotation", seq.name))
    })?;
    let ids = object_ids(first);
    let tol = tolerance.unwrap_or_else(|| default_tolerance(first.height, first.width));
    let mut frames = Vec::new();
    for (t, gt) in seq.gt.iter().enumerate().skip(1) {
        let Some(gt) = gt else { continue };
        let p = &pred[t];
        if (p.height, p.width) != (gt.height, gt.width) {
            return Err(StmError::dim(format!(
                "{} frame {t}: prediction {}x{} vs annotation {}x{}",
                seq.name, p.height, p.width, gt.height, gt.width
            )));
        }
        for &id in &ids {
            let (pm, gm) = (Mask::from_labels(p, id), Mask::from_labels(gt, id));
            frames.push(FrameScore {
                sequence: seq.name.clone(),
                frame: t,
                object: id,
                j: jaccard(&pm, &gm)?,
                f: contour_f(&pm, &gm, tol)?,
            });
        }
    }
    let objects: Vec<ObjectScore> = ids
        .iter()
        .map(|&id| {
            let own: Vec<&FrameScore> = frames.iter().filter(|s| s.object == id).collect();
            ObjectScore {
                object: id,
                j: mean(own.iter().map(|s| s.j)),
                f: mean(own.iter().map(|s| s.f)),
                frames: own.len(),
            }
        })
        .collect();
    let score = SequenceScore {
        name: seq.name.clone(),
        j: mean(objects.iter().map(|o| o.j)),
        f: mean(objects.iter().map(|o| o.f)),
        objects,
    };
    Ok((frames, score))
}

/// Scores predictions against ground truth. Frame 0 is excluded since it is
/// given; `predictions` maps sequence names to one label map per frame.
pub fn evaluate(
    predictions: &BTreeMap<String, Vec<LabelMap>>,
    dataset: &[EvalSequence],
    tolerance: Option<f64>,
) -> Result<MetricsReport> {
    let gaps: Vec<String> = dataset
        .iter()
        .filter_map(|seq| match predictions.get(&seq.name) {
            None => Some(format!("{} (missing)", seq.name)),
            Some(p) if p.len() < seq.gt.len() => Some(format!("{} ({} of {} frames)", seq.name, p.len(), seq.gt.len())),
            _ => None,
        })
        .collect();
    if !gaps.is_empty() {
        return Err(StmError::invalid(format!("missing predictions: {}", gaps.join(", "))));
    }
    let mut scored = dataset
        .par_iter()
        .map(|seq| score_sequence(seq, &predictions[&seq.name], tolerance))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| a.1.name.cmp(&b.1.name));
    let mut frames = Vec::new();
    let mut sequences = Vec::new();
    for (f, s) in scored {
        frames.extend(f);
        sequences.push(s);
    }
    let objects: Vec<&ObjectScore> = sequences.iter().flat_map(|s| &s.objects).collect();
    let j_mean = mean(objects.iter().map(|o| o.j));
    let f_mean = mean(objects.iter().map(|o| o.f));
    let distribution = score_distribution(&frames);
    Ok(MetricsReport {
        frames,
        sequences,
        j_mean,
        f_mean,
        jf_mean: (j_mean + f_mean) / 2.0,
        distribution,
    })
}

/// Runs inference on every video from its first-frame labels and scores
/// the result.
pub fn evaluate_model(model: &StmModel, videos: &[Video], config: InferenceConfig) -> Result<MetricsReport> {
    let predictions = videos
        .par_iter()
        .map(|v| Ok((v.name.clone(), run_video(model, &v.frames, &v.labels[0], config)?.labels)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let dataset: Vec<EvalSequence> = videos.iter().map(EvalSequence::from_video).collect();
    evaluate(&predictions, &dataset, None)
}

/// Nearest-rank percentile of ascending `sorted`.
pub fn percentile(sorted: &[f64], pct: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((pct / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Sorted Jaccard scores of every object in every scored frame.
pub fn score_distribution(frames: &[FrameScore]) -> ScoreCurve {
    let mut sorted: Vec<f64> = frames.iter().map(|s| s.j).collect();
    sorted.sort_by(f64::total_cmp);
    ScoreCurve {
        p10: percentile(&sorted, 10.0),
        p30: percentile(&sorted, 30.0),
        sorted,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| StmError::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| StmError::io(path, e))
}

impl MetricsReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| StmError::format(path, e.to_string()))?;
        write_text(path, &text)
    }

    /// One row per scored (sequence, frame, object).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.frames {
            w.serialize(row).map_err(|e| StmError::format(path, e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| StmError::format(path, e.to_string()))?;
        write_text(path, &String::from_utf8_lossy(&bytes))
    }
}

impl ScoreCurve {
    /// Line plot of the sorted scores against their percentile.
    pub fn to_svg(&self) -> String {
        let (w, h, m) = (480.0, 320.0, 40.0);
        let n = self.sorted.len().max(1) as f64;
        let x = |i: f64| m + (w - 2.0 * m) * i / 100.0;
        let y = |v: f64| h - m - (h - 2.0 * m) * v;
        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
        let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<path d="M{} {} V{} H{}" fill="none" stroke="black"/>"#,
            m,
            m,
            h - m,
            w - m
        );
        let points: Vec<String> = self
            .sorted
            .iter()
            .enumerate()
            .map(|(i, v)| format!("{:.2},{:.2}", x(100.0 * (i as f64 + 0.5) / n), y(*v)))
            .collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#, points.join(" "));
        for (pct, v) in [(10.0, self.p10), (30.0, self.p30)] {
            let _ = writeln!(
                s,
                r#"<line x1="{0:.2}" y1="{1}" x2="{0:.2}" y2="{2}" stroke="gray" stroke-dasharray="4 3"/><text x="{3:.2}" y="{4}">{5}%: {6:.3}</text>"#,
                x(pct),
                m,
                h - m,
                x(pct) + 3.0,
                m + 12.0,
                pct,
                v
            );
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">percentile</text>"#, w / 2.0, h - 10.0);
        let _ = writeln!(s, r#"<text x="12" y="{}" transform="rotate(-90 12 {})" text-anchor="middle">J</text>"#, h / 2.0, h / 2.0);
        s.push_str("</svg>\n");
        s
    }

    pub fn write_svg(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_svg())
    }
}
