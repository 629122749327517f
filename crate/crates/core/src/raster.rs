//! RGB rasters and the float tensors fed to the network.

use std::path::Path;

use image::{ExtendedColorType, ImageFormat};

use crate::error::{Error, Result};

/// 8-bit RGB image, row-major, interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl Raster {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Validation(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        let expected = width as usize * height as usize * 3;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "raster {width}x{height}x3 needs {expected} bytes, got {}",
                data.len()
            )));
        }
        Ok(Raster {
            width,
            height,
            data,
        })
    }

    /// Reads PNG or PPM (binary or ASCII) files.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Raster::new(w, h, img.into_raw())
    }

    /// Writes a PPM or PNG depending on the extension (PPM when unknown).
    pub fn save(&self, path: &Path) -> Result<()> {
        let format = match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("png") => ImageFormat::Png,
            _ => ImageFormat::Pnm,
        };
        image::save_buffer_with_format(
            path,
            &self.data,
            self.width,
            self.height,
            ExtendedColorType::Rgb8,
            format,
        )
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }

    /// Resize (bilinear) to `height × width` and scale values to `[0, 1]`.
    pub fn to_tensor(&self, height: usize, width: usize) -> ImageTensor {
        let src = ImageTensor::from_raster(self);
        if src.height == height && src.width == width {
            src
        } else {
            src.resize(height, width)
        }
    }
}

/// Channel-major (`3 × H × W`) float image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ImageTensor {
    pub fn zeros(height: usize, width: usize) -> Self {
        ImageTensor {
            height,
            width,
            data: vec![0.0; 3 * height * width],
        }
    }

    pub fn from_raster(r: &Raster) -> Self {
        let (h, w) = (r.height as usize, r.width as usize);
        let mut t = ImageTensor::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    t.data[c * h * w + y * w + x] = f64::from(r.data[(y * w + x) * 3 + c]) / 255.0;
                }
            }
        }
        t
    }

    pub fn to_raster(&self) -> Raster {
        let (h, w) = (self.height, self.width);
        let mut data = vec![0u8; h * w * 3];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let v = self.data[c * h * w + y * w + x].clamp(0.0, 1.0);
                    data[(y * w + x) * 3 + c] = (v * 255.0).round() as u8;
                }
            }
        }
        Raster {
            width: w as u32,
            height: h as u32,
            data,
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[c * self.height * self.width + y * self.width + x]
    }

    /// Bilinear sample at continuous coordinates, clamped to the border.
    fn sample(&self, c: usize, y: f64, x: f64) -> f64 {
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(self.height - 1), (x0 + 1).min(self.width - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let top = self.at(c, y0, x0) * (1.0 - fx) + self.at(c, y0, x1) * fx;
        let bot = self.at(c, y1, x0) * (1.0 - fx) + self.at(c, y1, x1) * fx;
        top * (1.0 - fy) + bot * fy
    }

    /// Bilinear resample of the window `[top, top+h) × [left, left+w)` onto
    /// an `out_h × out_w` grid (pixel-center aligned).
    pub fn resample_window(
        &self,
        top: f64,
        left: f64,
        h: f64,
        w: f64,
        out_h: usize,
        out_w: usize,
    ) -> ImageTensor {
        let mut out = ImageTensor::zeros(out_h, out_w);
        let sy = h / out_h as f64;
        let sx = w / out_w as f64;
        for c in 0..3 {
            for oy in 0..out_h {
                let y = top + (oy as f64 + 0.5) * sy - 0.5;
                for ox in 0..out_w {
                    let x = left + (ox as f64 + 0.5) * sx - 0.5;
                    out.data[c * out_h * out_w + oy * out_w + ox] = self.sample(c, y, x);
                }
            }
        }
        out
    }

    pub fn resize(&self, out_h: usize, out_w: usize) -> ImageTensor {
        self.resample_window(
            0.0,
            0.0,
            self.height as f64,
            self.width as f64,
            out_h,
            out_w,
        )
    }

    pub fn flip_horizontal(&self) -> ImageTensor {
        let (h, w) = (self.height, self.width);
        let mut out = ImageTensor::zeros(h, w);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    out.data[c * h * w + y * w + x] = self.at(c, y, w - 1 - x);
                }
            }
        }
        out
    }

    /// Rotate counter-clockwise by `quarter_turns × 90°`.
    pub fn rotate_quarter(&self, quarter_turns: u32) -> ImageTensor {
        let mut cur = self.clone();
        for _ in 0..quarter_turns % 4 {
            let (h, w) = (cur.height, cur.width);
            let mut out = ImageTensor::zeros(w, h);
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        // (y, x) -> (w-1-x, y)
                        out.data[c * w * h + (w - 1 - x) * h + y] = cur.at(c, y, x);
                    }
                }
            }
            cur = out;
        }
        cur
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> ImageTensor {
        let mut t = ImageTensor::zeros(h, w);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = (i % 97) as f64 / 96.0;
        }
        t
    }

    #[test]
    fn resize_to_same_size_is_identity() {
        let t = ramp(6, 9);
        let r = t.resize(6, 9);
        for (a, b) in t.data.iter().zip(&r.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn four_quarter_turns_and_double_flip_are_identity() {
        let t = ramp(5, 7);
        assert_eq!(t.rotate_quarter(4), t);
        assert_eq!(t.rotate_quarter(1).rotate_quarter(3), t);
        let r = t.rotate_quarter(1);
        assert_eq!((r.height, r.width), (7, 5));
        assert_eq!(t.flip_horizontal().flip_horizontal(), t);
    }

    #[test]
    fn raster_round_trip_through_ppm_and_png() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<u8> = (0..4 * 3 * 3).map(|i| (i * 7 % 256) as u8).collect();
        let r = Raster::new(4, 3, data).unwrap();
        for name in ["a.ppm", "a.png"] {
            let p = dir.path().join(name);
            r.save(&p).unwrap();
            assert_eq!(Raster::load(&p).unwrap(), r);
        }
        assert_eq!(ImageTensor::from_raster(&r).to_raster(), r);
    }

    #[test]
    fn zero_sized_raster_is_rejected() {
        assert!(Raster::new(0, 3, vec![]).is_err());
        assert!(Raster::new(2, 2, vec![0; 11]).is_err());
    }
}
