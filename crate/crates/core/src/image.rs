//! RGB image buffer (f32, HWC, values in [0, 1]) plus patch extraction with
//! mean-padding and bilinear resampling.

use crate::error::{Error, Result};
use crate::geometry::{BBox, CropSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuf {
    pub w: usize,
    pub h: usize,
    /// Row-major HWC, 3 channels, [0, 1].
    pub data: Vec<f32>,
}

impl ImageBuf {
    pub fn new_fill(w: usize, h: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(w * h * 3);
        for _ in 0..w * h {
            data.extend_from_slice(&rgb);
        }
        ImageBuf { w, h, data }
    }

    pub fn from_fn(w: usize, h: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            for x in 0..w {
                data.extend_from_slice(&f(x, y));
            }
        }
        ImageBuf { w, h, data }
    }

    #[inline(always)]
    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.w + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline(always)]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.w + x) * 3;
        self.data[i] = rgb[0];
        self.data[i + 1] = rgb[1];
        self.data[i + 2] = rgb[2];
    }

    /// Per-channel mean over the whole image (the mean-padding fill value).
    pub fn channel_means(&self) -> [f32; 3] {
        let n = (self.w * self.h) as f64;
        let mut acc = [0.0f64; 3];
        for px in self.data.chunks_exact(3) {
            acc[0] += px[0] as f64;
            acc[1] += px[1] as f64;
            acc[2] += px[2] as f64;
        }
        [
            (acc[0] / n) as f32,
            (acc[1] / n) as f32,
            (acc[2] / n) as f32,
        ]
    }

    pub fn load(path: &std::path::Path) -> Result<ImageBuf> {
        let img = image::open(path)
            .map_err(|e| Error::Image {
                path: path.display().to_string(),
                msg: e.to_string(),
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = img
            .into_raw()
            .into_iter()
            .map(|v| v as f32 / 255.0)
            .collect();
        Ok(ImageBuf { w, h, data })
    }

    pub fn save_png(&self, path: &std::path::Path) -> Result<()> {
        let mut out = image::RgbImage::new(self.w as u32, self.h as u32);
        for y in 0..self.h {
            for x in 0..self.w {
                let p = self.get(x, y);
                out.put_pixel(
                    x as u32,
                    y as u32,
                    image::Rgb([
                        (p[0].clamp(0.0, 1.0) * 255.0).round() as u8,
                        (p[1].clamp(0.0, 1.0) * 255.0).round() as u8,
                        (p[2].clamp(0.0, 1.0) * 255.0).round() as u8,
                    ]),
                );
            }
        }
        out.save(path).map_err(|e| Error::Image {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
    }

    /// Draw a 1-px box outline (clipped to the image) for result overlays.
    pub fn draw_rect(&mut self, b: &BBox, rgb: [f32; 3]) {
        let (x1, y1, x2, y2) = (
            b.x1().round() as i64,
            b.y1().round() as i64,
            b.x2().round() as i64,
            b.y2().round() as i64,
        );
        for x in x1.max(0)..=x2.min(self.w as i64 - 1) {
            for y in [y1, y2] {
                if y >= 0 && y < self.h as i64 {
                    self.set(x as usize, y as usize, rgb);
                }
            }
        }
        for y in y1.max(0)..=y2.min(self.h as i64 - 1) {
            for x in [x1, x2] {
                if x >= 0 && x < self.w as i64 {
                    self.set(x as usize, y as usize, rgb);
                }
            }
        }
    }
}

#[inline(always)]
fn tap(img: &ImageBuf, x: i64, y: i64, fill: [f32; 3]) -> [f32; 3] {
    if x >= 0 && (x as usize) < img.w && y >= 0 && (y as usize) < img.h {
        img.get(x as usize, y as usize)
    } else {
        fill
    }
}

/// Bilinear sample at continuous (x, y); out-of-image taps use `fill`.
pub fn sample_bilinear(img: &ImageBuf, x: f64, y: f64, fill: [f32; 3]) -> [f32; 3] {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = (x - x0) as f32;
    let fy = (y - y0) as f32;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let p00 = tap(img, x0, y0, fill);
    let p10 = tap(img, x0 + 1, y0, fill);
    let p01 = tap(img, x0, y0 + 1, fill);
    let p11 = tap(img, x0 + 1, y0 + 1, fill);
    let mut out = [0.0f32; 3];
    for c in 0..3 {
        let top = p00[c] * (1.0 - fx) + p10[c] * fx;
        let bot = p01[c] * (1.0 - fx) + p11[c] * fx;
        out[c] = top * (1.0 - fy) + bot * fy;
    }
    out
}

/// Cut the square crop described by `spec` out of `image`, resampling
/// bilinearly to `out_size` x `out_size`. Regions outside the image are
/// filled with the image's per-channel mean.
pub fn extract_patch(image: &ImageBuf, spec: &CropSpec) -> Result<ImageBuf> {
    if image.w == 0 || image.h == 0 {
        return Err(Error::EmptySequence);
    }
    if !(spec.side > 0.0) || spec.out_size == 0 {
        return Err(Error::Config(format!(
            "invalid crop spec: side {}, out_size {}",
            spec.side, spec.out_size
        )));
    }
    let fill = image.channel_means();
    let out = spec.out_size;
    let scale = spec.side / out as f64;
    // Centered convention: the patch's center pixel (out-1)/2 samples the
    // crop center exactly, so grid positions measured from the patch center
    // line up with frame positions measured from the crop center.
    let c = (out as f64 - 1.0) / 2.0;
    let mut patch = ImageBuf::new_fill(out, out, [0.0; 3]);
    for oy in 0..out {
        let sy = spec.center.1 + (oy as f64 - c) * scale;
        for ox in 0..out {
            let sx = spec.center.0 + (ox as f64 - c) * scale;
            patch.set(ox, oy, sample_bilinear(image, sx, sy, fill));
        }
    }
    Ok(patch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CropSpec;

    #[test]
    fn constant_image_any_crop_is_constant() {
        let img = ImageBuf::new_fill(40, 30, [0.25, 0.5, 0.75]);
        let spec = CropSpec {
            center: (-10.0, 55.0),
            side: 200.0,
            out_size: 33,
        };
        let p = extract_patch(&img, &spec).unwrap();
        assert_eq!(p.w, 33);
        for px in p.data.chunks_exact(3) {
            assert!((px[0] - 0.25).abs() < 1e-6);
            assert!((px[1] - 0.5).abs() < 1e-6);
            assert!((px[2] - 0.75).abs() < 1e-6);
        }
    }

    #[test]
    fn aligned_interior_crop_is_exact_subimage() {
        // side == out_size (odd) and integer center: source positions are
        // exact integers, so the patch equals the sub-image bit for bit and
        // the patch's center pixel is the crop center itself.
        let img = ImageBuf::from_fn(50, 50, |x, y| {
            [
                (x as f32) / 50.0,
                (y as f32) / 50.0,
                ((x + y) as f32) / 100.0,
            ]
        });
        let spec = CropSpec {
            center: (20.0, 25.0),
            side: 11.0,
            out_size: 11,
        };
        let p = extract_patch(&img, &spec).unwrap();
        for oy in 0..11 {
            for ox in 0..11 {
                assert_eq!(p.get(ox, oy), img.get(15 + ox, 20 + oy));
            }
        }
        assert_eq!(p.get(5, 5), img.get(20, 25));
    }

    #[test]
    fn center_pixel_tracks_crop_center_under_scaling() {
        // Whatever the crop side, the patch's center pixel samples the crop
        // center exactly (bilinear at an integer point reads one texel).
        let img = ImageBuf::from_fn(64, 64, |x, y| {
            [
                ((x * 7 + y * 3) % 13) as f32 / 13.0,
                ((x + 2 * y) % 11) as f32 / 11.0,
                0.5,
            ]
        });
        for side in [31.0, 62.0, 124.0, 93.0] {
            let spec = CropSpec {
                center: (30.0, 33.0),
                side,
                out_size: 31,
            };
            let p = extract_patch(&img, &spec).unwrap();
            assert_eq!(p.get(15, 15), img.get(30, 33), "side {side}");
        }
    }

    #[test]
    fn corner_crop_is_mostly_padding_mean() {
        let img = ImageBuf::from_fn(20, 20, |x, y| {
            [if (x / 4 + y / 4) % 2 == 0 { 0.9 } else { 0.1 }, 0.5, 0.3]
        });
        let mean = img.channel_means();
        let spec = CropSpec {
            center: (0.0, 0.0),
            side: 100.0,
            out_size: 64,
        };
        let p = extract_patch(&img, &spec).unwrap();
        let mut mean_count = 0;
        for px in p.data.chunks_exact(3) {
            if (px[0] - mean[0]).abs() < 1e-6
                && (px[1] - mean[1]).abs() < 1e-6
                && (px[2] - mean[2]).abs() < 1e-6
            {
                mean_count += 1;
            }
        }
        assert!(
            mean_count as f64 >= 0.75 * (64.0 * 64.0),
            "only {mean_count}/{} patch pixels equal the padding mean",
            64 * 64
        );
    }

    #[test]
    fn channel_means_are_per_channel() {
        let mut img = ImageBuf::new_fill(2, 1, [0.0, 0.0, 0.0]);
        img.set(0, 0, [1.0, 0.5, 0.0]);
        img.set(1, 0, [0.0, 0.5, 1.0]);
        assert_eq!(img.channel_means(), [0.5, 0.5, 0.5]);
        let mut img2 = ImageBuf::new_fill(2, 1, [0.0, 0.0, 0.0]);
        img2.set(0, 0, [1.0, 0.0, 0.2]);
        img2.set(1, 0, [0.0, 1.0, 0.4]);
        let m = img2.channel_means();
        assert!((m[0] - 0.5).abs() < 1e-7);
        assert!((m[1] - 0.5).abs() < 1e-7);
        assert!((m[2] - 0.3).abs() < 1e-7);
    }

    #[test]
    fn invalid_spec_rejected() {
        let img = ImageBuf::new_fill(4, 4, [0.5; 3]);
        assert!(extract_patch(
            &img,
            &CropSpec {
                center: (0.0, 0.0),
                side: 0.0,
                out_size: 8
            }
        )
        .is_err());
        assert!(extract_patch(
            &img,
            &CropSpec {
                center: (0.0, 0.0),
                side: 5.0,
                out_size: 0
            }
        )
        .is_err());
    }
}
