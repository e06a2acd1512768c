//! Random affine warps and the three-frame clips built from still images.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Clip;
use crate::data::{object_ids, Scene};
use crate::error::{Result, StmError};
use crate::multi_object::LabelMap;
use crate::tensor::Tensor;

/// Output window, in pixels of the warped full-size image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropWindow {
    pub y: usize,
    pub x: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub rotation_deg: f64,
    pub shear_deg: f64,
    pub zoom: f64,
    /// Fractions of the image width and height.
    pub translate: (f64, f64),
    pub crop: CropWindow,
}

impl AffineParams {
    pub fn identity(height: usize, width: usize) -> Self {
        AffineParams {
            rotation_deg: 0.0,
            shear_deg: 0.0,
            zoom: 1.0,
            translate: (0.0, 0.0),
            crop: CropWindow {
                y: 0,
                x: 0,
                height,
                width,
            },
        }
    }

    /// Maps output pixel `(y, x)` to source coordinates `(sy, sx)`.
    fn inverse(&self, height: usize, width: usize) -> impl Fn(usize, usize) -> (f64, f64) {
        let (th, sh) = (self.rotation_deg.to_radians(), self.shear_deg.to_radians().tan());
        let (c, s) = (th.cos(), th.sin());
        // Forward: zoom * rotation * shear, acting on centered (x, y).
        let m = [[self.zoom * c, self.zoom * (c * sh - s)], [self.zoom * s, self.zoom * (s * sh + c)]];
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        let inv = [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]];
        let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
        let (tx, ty) = (self.translate.0 * width as f64, self.translate.1 * height as f64);
        let crop = self.crop;
        move |y, x| {
            let qx = (x + crop.x) as f64 - cx - tx;
            let qy = (y + crop.y) as f64 - cy - ty;
            (inv[1][0] * qx + inv[1][1] * qy + cy, inv[0][0] * qx + inv[0][1] * qy + cx)
        }
    }
}

/// Sampling ranges for [`AffineParams`]; each is symmetric around the
/// identity except `zoom`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AffineRanges {
    pub rotation_deg: f64,
    pub shear_deg: f64,
    pub zoom: (f64, f64),
    pub translate: f64,
}

impl Default for AffineRanges {
    fn default() -> Self {
        AffineRanges {
            rotation_deg: 30.0,
            shear_deg: 15.0,
            zoom: (0.8, 1.2),
            translate: 0.1,
        }
    }
}

impl AffineRanges {
    pub fn identity() -> Self {
        AffineRanges {
            rotation_deg: 0.0,
            shear_deg: 0.0,
            zoom: (1.0, 1.0),
            translate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.rotation_deg >= 0.0
            && (0.0..90.0).contains(&self.shear_deg)
            && self.zoom.0 > 0.0
            && self.zoom.0 <= 1.0
            && self.zoom.1 >= 1.0
            && self.translate >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(StmError::invalid("affine ranges must contain the identity"))
        }
    }

    /// Samples parameters with a uniformly placed `crop_h×crop_w` window.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, height: usize, width: usize, crop: (usize, usize)) -> AffineParams {
        let sym = |rng: &mut R, r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        AffineParams {
            rotation_deg: sym(rng, self.rotation_deg),
            shear_deg: sym(rng, self.shear_deg),
            zoom: if self.zoom.0 < self.zoom.1 {
                rng.random_range(self.zoom.0..=self.zoom.1)
            } else {
                self.zoom.0
            },
            translate: (sym(rng, self.translate), sym(rng, self.translate)),
            crop: CropWindow {
                y: rng.random_range(0..=height - crop.0),
                x: rng.random_range(0..=width - crop.1),
                height: crop.0,
                width: crop.1,
            },
        }
    }
}

fn check_crop(params: &AffineParams, height: usize, width: usize) -> Result<()> {
    let c = params.crop;
    if c.height == 0 || c.width == 0 || c.y + c.height > height || c.x + c.width > width {
        return Err(StmError::invalid(format!(
            "crop window {c:?} does not fit a {height}x{width} image"
        )));
    }
    Ok(())
}

/// Warps a `C×H×W` image with bilinear sampling; outside samples are 0.
pub fn warp_image(image: &Tensor, params: &AffineParams) -> Result<Tensor> {
    image.expect_rank(3, "image")?;
    let (ch, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    check_crop(params, h, w)?;
    let map = params.inverse(h, w);
    let (oh, ow) = (params.crop.height, params.crop.width);
    let src = image.data();
    let mut out = vec![0f32; ch * oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let (sy, sx) = map(y, x);
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = ((sy - y0) as f32, (sx - x0) as f32);
            let taps = [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x0 + 1.0, (1.0 - fy) * fx),
                (y0 + 1.0, x0, fy * (1.0 - fx)),
                (y0 + 1.0, x0 + 1.0, fy * fx),
            ];
            for (ty, tx, wt) in taps {
                if wt == 0.0 || ty < 0.0 || tx < 0.0 || ty >= h as f64 || tx >= w as f64 {
                    continue;
                }
                let sp = ty as usize * w + tx as usize;
                for c in 0..ch {
                    out[c * oh * ow + y * ow + x] += wt * src[c * h * w + sp];
                }
            }
        }
    }
    Tensor::new(&[ch, oh, ow], out)
}

/// Warps a label map with nearest-neighbor sampling; outside is background.
pub fn warp_labels(labels: &LabelMap, params: &AffineParams) -> Result<LabelMap> {
    let (h, w) = (labels.height, labels.width);
    check_crop(params, h, w)?;
    let map = params.inverse(h, w);
    let (oh, ow) = (params.crop.height, params.crop.width);
    let mut out = vec![0u8; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let (sy, sx) = map(y, x);
            let (ry, rx) = (sy.round(), sx.round());
            if ry >= 0.0 && rx >= 0.0 && ry < h as f64 && rx < w as f64 {
                out[y * ow + x] = labels.labels[ry as usize * w + rx as usize];
            }
        }
    }
    LabelMap::new(oh, ow, out)
}

/// Attempts per frame before a warp that loses an object is accepted.
pub const WARP_RETRIES: usize = 10;

/// Builds a clip from one annotated image: three independent random warps.
/// A warp that pushes any object entirely out of view is resampled.
pub fn synthesize_clip<R: Rng + ?Sized>(scene: &Scene, rng: &mut R, ranges: &AffineRanges, crop: (usize, usize)) -> Result<Clip> {
    ranges.validate()?;
    let image = &scene.image;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if (scene.labels.height, scene.labels.width) != (h, w) {
        return Err(StmError::dim("scene mask and image extents differ"));
    }
    if crop.0 > h || crop.1 > w {
        return Err(StmError::invalid(format!("crop {crop:?} exceeds the {h}x{w} image")));
    }
    let ids = object_ids(&scene.labels);
    let mut frames = Vec::with_capacity(3);
    let mut labels = Vec::with_capacity(3);
    for _ in 0..3 {
        let mut params = ranges.sample(rng, h, w, crop);
        let mut warped = warp_labels(&scene.labels, &params)?;
        for _ in 0..WARP_RETRIES {
            let present = object_ids(&warped);
            if ids.iter().all(|id| present.contains(id)) {
                break;
            }
            params = ranges.sample(rng, h, w, crop);
            warped = warp_labels(&scene.labels, &params)?;
        }
        frames.push(warp_image(image, &params)?);
        labels.push(warped);
    }
    Clip::new(frames, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_warp_is_exact() {
        let img = Tensor::from_fn(&[3, 8, 12], |i| (i % 7) as f32 / 7.0).unwrap();
        let out = warp_image(&img, &AffineParams::identity(8, 12)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn rotation_by_ninety_degrees_moves_corners() {
        let mut labels = LabelMap::background(5, 5);
        labels.labels[0] = 1;
        let p = AffineParams {
            rotation_deg: 90.0,
            ..AffineParams::identity(5, 5)
        };
        let out = warp_labels(&labels, &p).unwrap();
        assert_eq!(out.labels.iter().filter(|&&l| l == 1).count(), 1);
        assert_eq!(out.get(0, 4), 1);
    }
}
