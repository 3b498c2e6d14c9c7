//! Frozen convolutional feature extractor with seeded random weights.
//!
//! Each layer is a 3×3, stride-2, zero-padded convolution followed by ReLU,
//! evaluated as im2col plus GEMM on `H × W × C` buffers. Nothing here ever
//! touches a tape: all outputs are plain tensors.

use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::geometry::{roi_align_values, BoxXYXY, GeometryError};
use crate::image::Image;
use crate::seed;
use crate::tensor::{Real, Tensor};

pub const DEFAULT_CHANNELS: [usize; 4] = [3, 16, 32, 64];
pub const CROP_SIZE: usize = 64;
pub const ROI_OUT: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackboneError {
    #[error("input {0}x{1} is not divisible by the backbone stride {2}; resize the view first")]
    Indivisible(usize, usize, usize),
    #[error("box {0:?} has a side below 2 px")]
    DegenerateBox(BoxXYXY),
    #[error("channel list must start at 3 and have at least two entries, got {0:?}")]
    BadChannels(Vec<usize>),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Clone, Debug, PartialEq)]
struct Conv {
    cin: usize,
    cout: usize,
    /// `[9 · cin, cout]`, row index `(ky · 3 + kx) · cin + ci`.
    weight: Vec<f32>,
    bias: Vec<f32>,
}

impl Conv {
    fn forward(&self, x: &[f32], h: usize, w: usize) -> (Vec<f32>, usize, usize) {
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let k = 9 * self.cin;
        let mut cols = vec![0f32; oh * ow * k];
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &mut cols[(oy * ow + ox) * k..(oy * ow + ox + 1) * k];
                for ky in 0..3 {
                    let iy = (2 * oy + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (2 * ox + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = (iy as usize * w + ix as usize) * self.cin;
                        let dst = (ky * 3 + kx) * self.cin;
                        row[dst..dst + self.cin].copy_from_slice(&x[src..src + self.cin]);
                    }
                }
            }
        }
        let mut out = Vec::with_capacity(oh * ow * self.cout);
        for _ in 0..oh * ow {
            out.extend_from_slice(&self.bias);
        }
        f32::gemm(
            oh * ow,
            k,
            self.cout,
            &cols,
            k as isize,
            1,
            &self.weight,
            self.cout as isize,
            1,
            1.0,
            &mut out,
        );
        for v in &mut out {
            *v = v.max(0.0);
        }
        (out, oh, ow)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrozenBackbone {
    seed: u64,
    channels: Vec<usize>,
    layers: Vec<Conv>,
}

impl FrozenBackbone {
    pub fn new(seed: u64) -> Self {
        Self::with_channels(seed, &DEFAULT_CHANNELS).expect("default channels are valid")
    }

    /// He-normal weights, small uniform-free biases drawn from the same
    /// per-layer stream.
    pub fn with_channels(seed: u64, channels: &[usize]) -> Result<Self, BackboneError> {
        if channels.len() < 2 || channels[0] != 3 || channels.contains(&0) {
            return Err(BackboneError::BadChannels(channels.to_vec()));
        }
        let layers = channels
            .windows(2)
            .enumerate()
            .map(|(l, io)| {
                let (cin, cout) = (io[0], io[1]);
                let mut rng = seed::stream(seed, &[0x4241_434B, l as u64]);
                let std = (2.0 / (9 * cin) as f32).sqrt();
                let normal = Normal::new(0.0f32, std).expect("positive std");
                let weight = (0..9 * cin * cout).map(|_| normal.sample(&mut rng)).collect();
                let bias_dist = Normal::new(0.0f32, 0.01).expect("positive std");
                let bias = (0..cout).map(|_| bias_dist.sample(&mut rng)).collect();
                Conv {
                    cin,
                    cout,
                    weight,
                    bias,
                }
            })
            .collect();
        Ok(Self {
            seed,
            channels: channels.to_vec(),
            layers,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn channels(&self) -> &[usize] {
        &self.channels
    }

    pub fn out_channels(&self) -> usize {
        *self.channels.last().expect("non-empty")
    }

    pub fn stride(&self) -> usize {
        1 << self.layers.len()
    }

    /// `H/s × W/s × C_b` feature map of a view whose sides are multiples of
    /// the stride `s`. Pixels are centered to `[-0.5, 0.5]` first.
    pub fn extract(&self, img: &Image) -> Result<Tensor, BackboneError> {
        let s = self.stride();
        let (w, h) = (img.width(), img.height());
        if w == 0 || h == 0 || w % s != 0 || h % s != 0 {
            return Err(BackboneError::Indivisible(w, h, s));
        }
        let mut x: Vec<f32> = img.data().iter().map(|v| v - 0.5).collect();
        let (mut ch, mut cw) = (h, w);
        for layer in &self.layers {
            let (y, oh, ow) = layer.forward(&x, ch, cw);
            x = y;
            ch = oh;
            cw = ow;
        }
        Ok(Tensor::new([ch, cw, self.out_channels()], x).expect("shape matches buffer"))
    }

    /// Object-level features: RoIAlign (4×4) on the view's feature map, then
    /// the spatial mean. `boxes` are in view pixels.
    pub fn object_level_features(&self, h: &Tensor, boxes: &[BoxXYXY]) -> Result<Tensor, BackboneError> {
        let s = self.stride() as f32;
        let scaled: Vec<BoxXYXY> = boxes
            .iter()
            .map(|b| BoxXYXY::from_corners(b.x1 / s, b.y1 / s, b.x2 / s, b.y2 / s))
            .collect();
        let c = h.shape()[2];
        let pooled = roi_align_values(h, &scaled, (ROI_OUT, ROI_OUT))?;
        let bins = ROI_OUT * ROI_OUT;
        let mut out = vec![0f32; boxes.len() * c];
        for (i, row) in out.chunks_exact_mut(c).enumerate() {
            for b in 0..bins {
                let src = &pooled.data()[(i * bins + b) * c..(i * bins + b + 1) * c];
                for (o, v) in row.iter_mut().zip(src) {
                    *o += v;
                }
            }
            row.iter_mut().for_each(|v| *v /= bins as f32);
        }
        Ok(Tensor::new([boxes.len(), c], out).expect("shape matches buffer"))
    }

    /// Crop-level features: each box is cut from the view, resized to
    /// 64×64, run through `extract` and globally average pooled.
    pub fn crop_level_features(&self, img: &Image, boxes: &[BoxXYXY]) -> Result<Tensor, BackboneError> {
        let c = self.out_channels();
        let mut out = Vec::with_capacity(boxes.len() * c);
        for b in boxes {
            if b.width() < 2.0 || b.height() < 2.0 {
                return Err(BackboneError::DegenerateBox(*b));
            }
            let crop = img.crop_resize(b, CROP_SIZE, CROP_SIZE);
            out.extend(global_average(&self.extract(&crop)?));
        }
        Ok(Tensor::new([boxes.len(), c], out).expect("shape matches buffer"))
    }
}

/// Mean over the spatial axes of an `H × W × C` map.
pub fn global_average(h: &Tensor) -> Vec<f32> {
    let c = h.shape()[2];
    let cells = h.numel() / c;
    let mut acc = vec![0f32; c];
    for px in h.data().chunks_exact(c) {
        for (a, v) in acc.iter_mut().zip(px) {
            *a += v;
        }
    }
    acc.iter_mut().for_each(|v| *v /= cells as f32);
    acc
}
