//! Datasets: DAVIS-style directory ingestion, indexed-PNG annotations and
//! procedurally generated scenes and videos.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use log::warn;

use crate::error::{Result, StmError};
use crate::multi_object::LabelMap;
use crate::tensor::Tensor;

pub mod synth;

pub use synth::{synth_scenes, synth_videos, SynthConfig};

/// An annotated still image.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `3×H×W`, values in `[0, 1]`.
    pub image: Tensor,
    pub labels: LabelMap,
}

/// A video held in memory with a label map for every frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub name: String,
    pub frames: Vec<Tensor>,
    pub labels: Vec<LabelMap>,
}

impl Video {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn extent(&self) -> (usize, usize) {
        (self.frames[0].shape()[1], self.frames[0].shape()[2])
    }

    /// Sorted nonzero ids in the first-frame annotation.
    pub fn object_ids(&self) -> Vec<u8> {
        object_ids(&self.labels[0])
    }
}

pub fn object_ids(labels: &LabelMap) -> Vec<u8> {
    let mut present = [false; 256];
    for &l in &labels.labels {
        present[l as usize] = true;
    }
    (1..=255u8).filter(|&id| present[id as usize]).collect()
}

/// One sequence discovered on disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceRecord {
    pub name: String,
    pub frames: Vec<PathBuf>,
    /// Annotation paths aligned with `frames`; `None` where no file exists.
    pub annotations: Vec<Option<PathBuf>>,
    pub object_ids: Vec<u8>,
    pub height: usize,
    pub width: usize,
}

fn sorted_files(dir: &Path, exts: &[&str]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| StmError::io(dir, e))? {
        let path = entry.map_err(|e| StmError::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .unwrap_or_default();
        if path.is_file() && exts.contains(&ext.as_str()) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn sorted_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| StmError::io(dir, e))? {
        let path = entry.map_err(|e| StmError::io(dir, e))?.path();
        if path.is_dir() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

fn stem(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string()
}

/// Scans `root/JPEGImages/<seq>/` and `root/Annotations/<seq>/`.
/// Sequences without a first-frame annotation are skipped with a warning.
pub fn load_dataset(root: &Path) -> Result<Vec<SequenceRecord>> {
    let images = root.join("JPEGImages");
    let annotations = root.join("Annotations");
    if !images.is_dir() {
        return Err(StmError::invalid(format!(
            "{} contains no JPEGImages directory",
            root.display()
        )));
    }
    let mut records = Vec::new();
    for seq_dir in sorted_dirs(&images)? {
        let name = seq_dir.file_name().unwrap().to_string_lossy().into_owned();
        let frames = sorted_files(&seq_dir, &["jpg", "jpeg", "png"])?;
        if frames.is_empty() {
            warn!("sequence {name} has no frames; skipped");
            continue;
        }
        let ann_dir = annotations.join(&name);
        let ann_files = if ann_dir.is_dir() {
            sorted_files(&ann_dir, &["png"])?
        } else {
            vec![]
        };
        let annotations: Vec<Option<PathBuf>> = frames
            .iter()
            .map(|f| ann_files.iter().find(|a| stem(a) == stem(f)).cloned())
            .collect();
        let Some(first) = &annotations[0] else {
            warn!("sequence {name} has no first-frame annotation; skipped");
            continue;
        };
        let first_labels = read_annotation(first)?;
        let (height, width) = image_extent(&frames[0])?;
        if (first_labels.height, first_labels.width) != (height, width) {
            return Err(StmError::format(
                first,
                format!("annotation is {}x{}, frames are {height}x{width}", first_labels.height, first_labels.width),
            ));
        }
        records.push(SequenceRecord {
            name,
            object_ids: object_ids(&first_labels),
            frames,
            annotations,
            height,
            width,
        });
    }
    if records.is_empty() {
        return Err(StmError::invalid(format!("no usable sequences under {}", root.display())));
    }
    Ok(records)
}

/// A single sequence from a directory of frames and the annotation of its
/// first frame.
pub fn sequence_from_dir(frames_dir: &Path, annotation: &Path) -> Result<SequenceRecord> {
    let frames = sorted_files(frames_dir, &["jpg", "jpeg", "png"])?;
    if frames.is_empty() {
        return Err(StmError::invalid(format!("no frames in {}", frames_dir.display())));
    }
    let first_labels = read_annotation(annotation)?;
    let (height, width) = image_extent(&frames[0])?;
    if (first_labels.height, first_labels.width) != (height, width) {
        return Err(StmError::format(
            annotation,
            format!("annotation is {}x{}, frames are {height}x{width}", first_labels.height, first_labels.width),
        ));
    }
    let mut annotations = vec![None; frames.len()];
    annotations[0] = Some(annotation.to_path_buf());
    Ok(SequenceRecord {
        name: frames_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "sequence".into()),
        object_ids: object_ids(&first_labels),
        frames,
        annotations,
        height,
        width,
    })
}

/// Every PNG annotation in `dir`, in file-name order, keyed by stem.
pub fn read_annotation_dir(dir: &Path) -> Result<Vec<(String, LabelMap)>> {
    sorted_files(dir, &["png"])?
        .into_iter()
        .map(|p| Ok((stem(&p), read_annotation(&p)?)))
        .collect()
}

fn image_extent(path: &Path) -> Result<(usize, usize)> {
    let (w, h) = image::image_dimensions(path).map_err(|e| image_error(path, e))?;
    Ok((h as usize, w as usize))
}

fn image_error(path: &Path, e: image::ImageError) -> StmError {
    match e {
        image::ImageError::IoError(io) => StmError::io(path, io),
        other => StmError::format(path, other.to_string()),
    }
}

/// Reads an RGB image as a `3×H×W` tensor in `[0, 1]`.
pub fn read_frame(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| image_error(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f32 / 255.0
    })
}

/// Writes a `3×H×W` tensor as an 8-bit RGB PNG.
pub fn write_frame(path: &Path, frame: &Tensor) -> Result<()> {
    frame.expect_rank(3, "frame")?;
    let (h, w) = (frame.shape()[1], frame.shape()[2]);
    let d = frame.data();
    let mut raw = vec![0u8; h * w * 3];
    for p in 0..h * w {
        for c in 0..3 {
            raw[p * 3 + c] = (d[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    ensure_parent(path)?;
    image::save_buffer(path, &raw, w as u32, h as u32, image::ColorType::Rgb8).map_err(|e| image_error(path, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| StmError::io(parent, e))?;
    }
    Ok(())
}

/// Reads an annotation PNG where the pixel index is the object id.
/// Palette and 8-bit grayscale images are accepted.
pub fn read_annotation(path: &Path) -> Result<LabelMap> {
    let file = fs::File::open(path).map_err(|e| StmError::io(path, e))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| StmError::format(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| StmError::format(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| StmError::format(path, e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let bits = match info.bit_depth {
        png::BitDepth::One => 1,
        png::BitDepth::Two => 2,
        png::BitDepth::Four => 4,
        png::BitDepth::Eight => 8,
        png::BitDepth::Sixteen => {
            return Err(StmError::format(path, "16-bit annotations are not supported"));
        }
    };
    if !matches!(info.color_type, png::ColorType::Indexed | png::ColorType::Grayscale) {
        return Err(StmError::format(
            path,
            format!("annotation must be indexed or grayscale, found {:?}", info.color_type),
        ));
    }
    let mut labels = Vec::with_capacity(h * w);
    for y in 0..h {
        let row = &buf[y * info.line_size..(y + 1) * info.line_size];
        for x in 0..w {
            let bit = x * bits;
            let byte = row[bit / 8];
            let shift = 8 - bits - bit % 8;
            labels.push((byte >> shift) & ((1u16 << bits) - 1) as u8);
        }
    }
    LabelMap::new(h, w, labels)
}

/// Color of label `i` in the standard segmentation palette.
pub fn palette_color(i: u8) -> [u8; 3] {
    let mut rgb = [0u8; 3];
    let mut c = i;
    for j in 0..8 {
        for (k, channel) in rgb.iter_mut().enumerate() {
            *channel |= ((c >> k) & 1) << (7 - j);
        }
        c >>= 3;
    }
    rgb
}

/// Writes a label map as an 8-bit palette PNG.
pub fn write_annotation(path: &Path, labels: &LabelMap) -> Result<()> {
    ensure_parent(path)?;
    let file = fs::File::create(path).map_err(|e| StmError::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), labels.width as u32, labels.height as u32);
    encoder.set_color(png::ColorType::Indexed);
    encoder.set_depth(png::BitDepth::Eight);
    encoder.set_palette((0..=255u8).flat_map(palette_color).collect::<Vec<u8>>());
    let fmt = |e: png::EncodingError| StmError::format(path, e.to_string());
    let mut writer = encoder.write_header().map_err(fmt)?;
    writer.write_image_data(&labels.labels).map_err(fmt)?;
    writer.finish().map_err(fmt)
}

/// Loads every frame and available annotation of a sequence.
pub fn load_video(record: &SequenceRecord) -> Result<(Video, Vec<bool>)> {
    let mut frames = Vec::with_capacity(record.frames.len());
    for path in &record.frames {
        let f = read_frame(path)?;
        if (f.shape()[1], f.shape()[2]) != (record.height, record.width) {
            return Err(StmError::format(path, "frame extent differs from the first frame"));
        }
        frames.push(f);
    }
    let mut labels = Vec::with_capacity(frames.len());
    let mut annotated = Vec::with_capacity(frames.len());
    for ann in &record.annotations {
        match ann {
            Some(path) => {
                let l = read_annotation(path)?;
                if (l.height, l.width) != (record.height, record.width) {
                    return Err(StmError::format(path, "annotation extent differs from the frames"));
                }
                labels.push(l);
                annotated.push(true);
            }
            None => {
                labels.push(LabelMap::background(record.height, record.width));
                annotated.push(false);
            }
        }
    }
    Ok((
        Video {
            name: record.name.clone(),
            frames,
            labels,
        },
        annotated,
    ))
}

/// Writes videos in the `JPEGImages`/`Annotations` layout with PNG frames.
pub fn write_dataset(root: &Path, videos: &[Video]) -> Result<()> {
    for v in videos {
        for (i, (frame, labels)) in v.frames.iter().zip(&v.labels).enumerate() {
            write_frame(&root.join("JPEGImages").join(&v.name).join(format!("{i:05}.png")), frame)?;
            write_annotation(&root.join("Annotations").join(&v.name).join(format!("{i:05}.png")), labels)?;
        }
    }
    Ok(())
}

/// Reads `root/images/*` with matching `root/masks/<stem>.png` annotations.
pub fn load_scene_folder(root: &Path) -> Result<Vec<Scene>> {
    let images = sorted_files(&root.join("images"), &["jpg", "jpeg", "png"])?;
    let mut scenes = Vec::new();
    for path in images {
        let mask_path = root.join("masks").join(format!("{}.png", stem(&path)));
        if !mask_path.is_file() {
            warn!("{} has no mask; skipped", path.display());
            continue;
        }
        let image = read_frame(&path)?;
        let labels = read_annotation(&mask_path)?;
        if (labels.height, labels.width) != (image.shape()[1], image.shape()[2]) {
            return Err(StmError::format(&mask_path, "mask extent differs from the image"));
        }
        scenes.push(Scene { image, labels });
    }
    if scenes.is_empty() {
        return Err(StmError::invalid(format!("no image/mask pairs under {}", root.display())));
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn palette_starts_with_the_usual_colors() {
        assert_eq!(palette_color(0), [0, 0, 0]);
        assert_eq!(palette_color(1), [128, 0, 0]);
        assert_eq!(palette_color(2), [0, 128, 0]);
        assert_eq!(palette_color(3), [128, 128, 0]);
    }

    #[test]
    fn annotation_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let labels = LabelMap::new(3, 5, (0..15).map(|i| (i % 4) as u8).collect()).unwrap();
        write_annotation(&path, &labels).unwrap();
        assert_eq!(read_annotation(&path).unwrap(), labels);
    }
}
