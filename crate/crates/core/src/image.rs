//! RGB images in `[0, 1]` and binary PPM (P6, 8-bit) encoding.

use thiserror::Error;

use crate::geometry::BoxXYXY;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImageError {
    #[error("buffer length {len} does not match 3x{width}x{height}")]
    BadLength { len: usize, width: usize, height: usize },
    #[error("pixel value {0} outside [0, 1]")]
    OutOfRange(f32),
    #[error("PPM: {0}")]
    Ppm(String),
}

/// Interleaved RGB, row-major, `f32` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self, ImageError> {
        if data.len() != 3 * width * height {
            return Err(ImageError::BadLength {
                len: data.len(),
                width,
                height,
            });
        }
        if let Some(&v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(ImageError::OutOfRange(v));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * width * height);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Per-pixel luma (ITU-R 601 weights).
    pub fn luma(&self) -> Vec<f32> {
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    /// Rounds every channel to the nearest 8-bit level.
    pub fn quantized(mut self) -> Self {
        for v in &mut self.data {
            *v = (*v * 255.0).round().clamp(0.0, 255.0) / 255.0;
        }
        self
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(self.width - 1 - x, y, self.pixel(x, y));
            }
        }
        out
    }

    /// Bilinear crop of `rect` resampled to `out_w × out_h`, sampling at
    /// pixel centers and clamping at the image border.
    pub fn crop_resize(&self, rect: &BoxXYXY, out_w: usize, out_h: usize) -> Self {
        let mut data = vec![0.0; 3 * out_w * out_h];
        let sx = rect.width() / out_w as f32;
        let sy = rect.height() / out_h as f32;
        let maxx = (self.width - 1) as f32;
        let maxy = (self.height - 1) as f32;
        let xs: Vec<(usize, usize, f32)> = (0..out_w)
            .map(|i| {
                let u = (rect.x1 + (i as f32 + 0.5) * sx - 0.5).clamp(0.0, maxx);
                let x0 = u.floor() as usize;
                (x0, (x0 + 1).min(self.width - 1), u - x0 as f32)
            })
            .collect();
        for j in 0..out_h {
            let v = (rect.y1 + (j as f32 + 0.5) * sy - 0.5).clamp(0.0, maxy);
            let y0 = v.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ly = v - y0 as f32;
            for (i, &(x0, x1, lx)) in xs.iter().enumerate() {
                let o = 3 * (j * out_w + i);
                for c in 0..3 {
                    let at = |x: usize, y: usize| self.data[3 * (y * self.width + x) + c];
                    let top = at(x0, y0) + (at(x1, y0) - at(x0, y0)) * lx;
                    let bot = at(x0, y1) + (at(x1, y1) - at(x0, y1)) * lx;
                    data[o + c] = (top + (bot - top) * ly).clamp(0.0, 1.0);
                }
            }
        }
        Self {
            width: out_w,
            height: out_h,
            data,
        }
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.data
                .iter()
                .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
        );
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self, ImageError> {
        let mut pos = 0usize;
        let mut token = || -> Result<String, ImageError> {
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(ImageError::Ppm("truncated header".into()));
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        if token()? != "P6" {
            return Err(ImageError::Ppm("missing P6 magic".into()));
        }
        let mut num = |what: &str| -> Result<usize, ImageError> {
            token()?
                .parse::<usize>()
                .map_err(|_| ImageError::Ppm(format!("bad {what}")))
        };
        let width = num("width")?;
        let height = num("height")?;
        let maxval = num("maxval")?;
        if maxval != 255 {
            return Err(ImageError::Ppm(format!("unsupported maxval {maxval}")));
        }
        // exactly one whitespace byte separates the header from the raster
        let start = pos + 1;
        let need = 3 * width * height;
        if bytes.len() < start + need {
            return Err(ImageError::Ppm(format!(
                "truncated raster: expected {need} bytes, found {}",
                bytes.len().saturating_sub(start)
            )));
        }
        let data = bytes[start..start + need]
            .iter()
            .map(|&b| b as f32 / 255.0)
            .collect();
        Ok(Self {
            width,
            height,
            data,
        })
    }
}
