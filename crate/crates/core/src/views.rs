//! Two-view construction: base rectangle, IoU-constrained view rectangles,
//! proposals in their overlap, photometric augmentation and box jitter.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{box_iou, map_box, BoxXYXY, FrameTransform, GeometryError};
use crate::image::Image;
use crate::seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ViewError {
    #[error("image {0}x{1} is smaller than the 32x32 minimum")]
    ImageTooSmall(usize, usize),
    #[error("overlap area {0:.1} px^2 below 64 px^2")]
    OverlapTooSmall(f32),
    #[error("invalid view config: {0}")]
    Config(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProposalMode {
    Random,
    Objectness,
}

impl std::str::FromStr for ProposalMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "random" => Ok(Self::Random),
            "objectness" => Ok(Self::Objectness),
            _ => Err(format!("unknown proposal mode `{s}` (random|objectness)")),
        }
    }
}

impl std::fmt::Display for ProposalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Random => "random",
            Self::Objectness => "objectness",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub flip_p: f32,
    pub color_p: f32,
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub gray_p: f32,
    pub blur_p: f32,
    pub blur_sigma: (f32, f32),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_p: 0.5,
            color_p: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            gray_p: 0.2,
            blur_p: 0.5,
            blur_sigma: (0.1, 2.0),
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            flip_p: 0.0,
            color_p: 0.0,
            gray_p: 0.0,
            blur_p: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewConfig {
    /// Side of the square views, a multiple of the backbone stride.
    pub view_size: usize,
    pub tau: f32,
    pub n: usize,
    pub jitter: f32,
    pub base_area: (f32, f32),
    pub base_aspect: (f32, f32),
    pub proposals: ProposalMode,
    pub min_proposal_side: f32,
    pub augment: AugmentConfig,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            view_size: 128,
            tau: 0.5,
            n: 10,
            jitter: 0.1,
            base_area: (0.5, 1.0),
            base_aspect: (0.75, 4.0 / 3.0),
            proposals: ProposalMode::Objectness,
            min_proposal_side: 8.0,
            augment: AugmentConfig::default(),
        }
    }
}

impl ViewConfig {
    pub fn validate(&self) -> Result<(), ViewError> {
        let mut bad = Vec::new();
        if self.view_size == 0 || self.view_size % 8 != 0 {
            bad.push(format!("view_size {} not a positive multiple of 8", self.view_size));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            bad.push(format!("tau {} outside (0, 1]", self.tau));
        }
        if self.n == 0 {
            bad.push("n must be positive".into());
        }
        if !(0.0..1.0).contains(&self.jitter) {
            bad.push(format!("jitter {} outside [0, 1)", self.jitter));
        }
        let (a0, a1) = self.base_area;
        if !(a0 > 0.0 && a0 <= a1 && a1 <= 1.0) {
            bad.push(format!("base_area ({a0}, {a1}) invalid"));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(ViewError::Config(bad.join("; ")))
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> f32 {
    lo + (hi - lo) * rng.gen::<f32>()
}

/// Random rectangle covering `base_area` of the image, aspect ratio drawn
/// log-uniformly from `base_aspect`.
pub fn sample_base_rect(
    width: usize,
    height: usize,
    area: (f32, f32),
    aspect: (f32, f32),
    rng: &mut ChaCha8Rng,
) -> Result<BoxXYXY, ViewError> {
    if width < 32 || height < 32 {
        return Err(ViewError::ImageTooSmall(width, height));
    }
    let (wf, hf) = (width as f32, height as f32);
    let a = uniform(rng, area.0, area.1) * wf * hf;
    let r = uniform(rng, aspect.0.ln(), aspect.1.ln()).exp();
    let mut w = (a * r).sqrt();
    let mut h = (a / r).sqrt();
    if w > wf {
        w = wf;
        h = a / wf;
    }
    if h > hf {
        h = hf;
        w = (a / hf).min(wf);
    }
    let x = uniform(rng, 0.0, wf - w);
    let y = uniform(rng, 0.0, hf - h);
    Ok(BoxXYXY::from_corners(x, y, x + w, y + h))
}

/// View rectangles from retreat fractions. Rectangle 1 keeps the base's
/// top-left corner and its far corner sits `u1` of the way back from the
/// base's bottom-right corner to the center; rectangle 2 mirrors this.
/// Zero retreat on both gives two copies of the base.
pub fn view_rects_from_fractions(base: &BoxXYXY, u1: f32, u2: f32) -> (BoxXYXY, BoxXYXY) {
    let (cx, cy) = base.center();
    let r1 = BoxXYXY::from_corners(
        base.x1,
        base.y1,
        base.x2 - u1 * (base.x2 - cx),
        base.y2 - u1 * (base.y2 - cy),
    );
    let r2 = BoxXYXY::from_corners(
        base.x1 + u2 * (cx - base.x1),
        base.y1 + u2 * (cy - base.y1),
        base.x2,
        base.y2,
    );
    (r1, r2)
}

/// Two rectangles grown from the base's center along its diagonal, one
/// toward each corner, resampled until their IoU reaches `tau` (100 tries,
/// then both fall back to the base itself).
pub fn sample_view_rects(base: &BoxXYXY, tau: f32, rng: &mut ChaCha8Rng) -> (BoxXYXY, BoxXYXY) {
    for _ in 0..100 {
        let (u1, u2) = (rng.gen::<f32>(), rng.gen::<f32>());
        let (r1, r2) = view_rects_from_fractions(base, u1, u2);
        if box_iou(&r1, &r2) >= tau {
            return (r1, r2);
        }
    }
    (*base, *base)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentRecord {
    pub flip: bool,
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub grayscale: bool,
    /// Zero when no blur was applied.
    pub blur_sigma: f32,
}

impl AugmentRecord {
    /// The geometric part of the augmentation, as a transform on the view.
    pub fn frame_delta(&self, width: f32, height: f32) -> FrameTransform {
        FrameTransform {
            flip: self.flip,
            ..FrameTransform::identity(width, height)
        }
    }
}

fn gaussian_blur(img: &Image, sigma: f32) -> Image {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f32> = (-r..=r)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    let (w, h) = (img.width() as isize, img.height() as isize);
    let src = img.data();
    let mut tmp = vec![0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    let xx = (x + t as isize - r).clamp(0, w - 1);
                    acc += kv * src[(3 * (y * w + xx)) as usize + c];
                }
                tmp[(3 * (y * w + x)) as usize + c] = acc;
            }
        }
    }
    let mut out = vec![0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    let yy = (y + t as isize - r).clamp(0, h - 1);
                    acc += kv * tmp[(3 * (yy * w + x)) as usize + c];
                }
                out[(3 * (y * w + x)) as usize + c] = acc.clamp(0.0, 1.0);
            }
        }
    }
    Image::new(img.width(), img.height(), out).expect("blur keeps range")
}

/// Photometric and flip augmentation. Draws a fixed number of variates per
/// call regardless of which operations fire.
pub fn augment(view: &Image, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> (Image, AugmentRecord) {
    let u: [f32; 8] = std::array::from_fn(|_| rng.gen());
    let flip = u[0] < cfg.flip_p;
    let color = u[1] < cfg.color_p;
    let factor = |amp: f32, v: f32| if color { 1.0 - amp + 2.0 * amp * v } else { 1.0 };
    let rec = AugmentRecord {
        flip,
        brightness: factor(cfg.brightness, u[2]),
        contrast: factor(cfg.contrast, u[3]),
        saturation: factor(cfg.saturation, u[4]),
        grayscale: u[5] < cfg.gray_p,
        blur_sigma: if u[6] < cfg.blur_p {
            cfg.blur_sigma.0 + (cfg.blur_sigma.1 - cfg.blur_sigma.0) * u[7]
        } else {
            0.0
        },
    };

    let mut img = if flip { view.flip_horizontal() } else { view.clone() };
    if color {
        let px = img.data_mut();
        for v in px.iter_mut() {
            *v = (*v * rec.brightness).clamp(0.0, 1.0);
        }
        let mean = px
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .sum::<f32>()
            / (px.len() / 3).max(1) as f32;
        for v in px.iter_mut() {
            *v = ((*v - mean) * rec.contrast + mean).clamp(0.0, 1.0);
        }
        for p in px.chunks_exact_mut(3) {
            let g = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
            for v in p.iter_mut() {
                *v = ((*v - g) * rec.saturation + g).clamp(0.0, 1.0);
            }
        }
    }
    if rec.grayscale {
        for p in img.data_mut().chunks_exact_mut(3) {
            let g = (0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).clamp(0.0, 1.0);
            p.fill(g);
        }
    }
    if rec.blur_sigma > 0.0 {
        img = gaussian_blur(&img, rec.blur_sigma);
    }
    (img, rec)
}

/// Summed-area table of Sobel gradient magnitude over image luma.
struct GradientIntegral {
    w: usize,
    h: usize,
    sums: Vec<f64>,
}

impl GradientIntegral {
    fn new(img: &Image) -> Self {
        let (w, h) = (img.width(), img.height());
        let l = img.luma();
        let at = |x: isize, y: isize| {
            l[(y.clamp(0, h as isize - 1) as usize) * w + x.clamp(0, w as isize - 1) as usize]
        };
        let mut sums = vec![0f64; (w + 1) * (h + 1)];
        for y in 0..h {
            let mut row = 0f64;
            for x in 0..w {
                let (xi, yi) = (x as isize, y as isize);
                let gx = (at(xi + 1, yi - 1) + 2.0 * at(xi + 1, yi) + at(xi + 1, yi + 1))
                    - (at(xi - 1, yi - 1) + 2.0 * at(xi - 1, yi) + at(xi - 1, yi + 1));
                let gy = (at(xi - 1, yi + 1) + 2.0 * at(xi, yi + 1) + at(xi + 1, yi + 1))
                    - (at(xi - 1, yi - 1) + 2.0 * at(xi, yi - 1) + at(xi + 1, yi - 1));
                row += ((gx * gx + gy * gy) as f64).sqrt();
                sums[(y + 1) * (w + 1) + x + 1] = sums[y * (w + 1) + x + 1] + row;
            }
        }
        Self { w, h, sums }
    }

    fn sum(&self, b: &BoxXYXY) -> f64 {
        let cx = |v: f32| (v.round().max(0.0) as usize).min(self.w);
        let cy = |v: f32| (v.round().max(0.0) as usize).min(self.h);
        let (x0, x1, y0, y1) = (cx(b.x1), cx(b.x2), cy(b.y1), cy(b.y2));
        let s = |x: usize, y: usize| self.sums[y * (self.w + 1) + x];
        s(x1, y1) - s(x0, y1) - s(x1, y0) + s(x0, y0)
    }
}

fn random_box_in(region: &BoxXYXY, min_side: f32, rng: &mut ChaCha8Rng) -> BoxXYXY {
    let w = uniform(rng, min_side, region.width());
    let h = uniform(rng, min_side, region.height());
    let x = uniform(rng, region.x1, region.x2 - w);
    let y = uniform(rng, region.y1, region.y2 - h);
    BoxXYXY::from_corners(x, y, x + w, y + h)
}

/// Objectness: total interior gradient minus total gradient in a ring just
/// outside the box, normalized by the half perimeter. Tight boxes around
/// closed contours score highest.
fn objectness(g: &GradientIntegral, b: &BoxXYXY) -> f64 {
    let band = (0.1 * b.width().min(b.height())).max(2.0);
    let outer = BoxXYXY::from_corners(b.x1 - band, b.y1 - band, b.x2 + band, b.y2 + band)
        .clamp_to(g.w as f32, g.h as f32);
    let inner = g.sum(b);
    let ring = g.sum(&outer) - inner;
    (inner - ring) / (b.width() + b.height()) as f64
}

/// Proposal boxes (image frame) inside `overlap`, each side at least
/// `min_side`.
pub fn generate_proposals(
    image: &Image,
    overlap: &BoxXYXY,
    mode: ProposalMode,
    count: usize,
    min_side: f32,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<BoxXYXY>, ViewError> {
    if overlap.area() < 64.0 || overlap.width() < min_side || overlap.height() < min_side {
        return Err(ViewError::OverlapTooSmall(overlap.area()));
    }
    match mode {
        ProposalMode::Random => Ok((0..count)
            .map(|_| random_box_in(overlap, min_side, rng))
            .collect()),
        ProposalMode::Objectness => {
            let pool = (4 * count).max(256);
            let cands: Vec<BoxXYXY> = (0..pool)
                .map(|_| random_box_in(overlap, min_side, rng))
                .collect();
            let g = GradientIntegral::new(image);
            let scores: Vec<f64> = cands.iter().map(|b| objectness(&g, b)).collect();
            let mut order: Vec<usize> = (0..pool).collect();
            // stable sort: equal scores keep candidate order
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
            let mut keep: Vec<usize> = Vec::with_capacity(count);
            for &i in &order {
                if keep.len() == count {
                    break;
                }
                if keep.iter().all(|&k| box_iou(&cands[k], &cands[i]) <= 0.7) {
                    keep.push(i);
                }
            }
            for &i in &order {
                if keep.len() == count {
                    break;
                }
                if !keep.contains(&i) {
                    keep.push(i);
                }
            }
            Ok(keep.into_iter().map(|i| cands[i]).collect())
        }
    }
}

/// Random center shift of up to `j` of each side and per-axis rescale in
/// `[1 - j, 1 + j]`, clamped to the frame. Boxes that would shrink below
/// two pixels keep their original geometry.
pub fn jitter_box(b: &BoxXYXY, j: f32, frame: (f32, f32), rng: &mut ChaCha8Rng) -> BoxXYXY {
    let u: [f32; 4] = std::array::from_fn(|_| rng.gen());
    let (cx, cy) = b.center();
    let cx = cx + (2.0 * u[0] - 1.0) * j * b.width();
    let cy = cy + (2.0 * u[1] - 1.0) * j * b.height();
    let w = b.width() * (1.0 + (2.0 * u[2] - 1.0) * j);
    let h = b.height() * (1.0 + (2.0 * u[3] - 1.0) * j);
    let out = BoxXYXY::from_corners(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
        .clamp_to(frame.0, frame.1);
    if out.width() < 2.0 || out.height() < 2.0 {
        *b
    } else {
        out
    }
}

#[derive(Clone, Debug)]
pub struct ViewPair {
    pub view1: Image,
    pub view2: Image,
    /// Image frame to (augmented) view frame.
    pub t1: FrameTransform,
    pub t2: FrameTransform,
    pub base: BoxXYXY,
    pub rect1: BoxXYXY,
    pub rect2: BoxXYXY,
    pub proposals1: Vec<BoxXYXY>,
    pub proposals2: Vec<BoxXYXY>,
    pub aug1: AugmentRecord,
    pub aug2: AugmentRecord,
    pub seed: u64,
    /// Set when proposals had to be repeated cyclically to reach `n`.
    pub repeated: bool,
}

pub fn build_view_pair(image: &Image, cfg: &ViewConfig, seed: u64) -> Result<ViewPair, ViewError> {
    cfg.validate()?;
    let mut rng = seed::stream(seed, &[0x5649_4557]);
    let v = cfg.view_size as f32;
    let mut last_err = None;
    for _ in 0..10 {
        let base = sample_base_rect(
            image.width(),
            image.height(),
            cfg.base_area,
            cfg.base_aspect,
            &mut rng,
        )?;
        let (rect1, rect2) = sample_view_rects(&base, cfg.tau, &mut rng);
        let overlap = match rect1.intersection(&rect2) {
            Some(o) => o,
            None => continue,
        };
        let props = match generate_proposals(
            image,
            &overlap,
            cfg.proposals,
            cfg.n,
            cfg.min_proposal_side,
            &mut rng,
        ) {
            Ok(p) => p,
            Err(e) => {
                last_err = Some(e);
                continue;
            }
        };

        let (img1, aug1) = augment(&image.crop_resize(&rect1, cfg.view_size, cfg.view_size), &cfg.augment, &mut rng);
        let (img2, aug2) = augment(&image.crop_resize(&rect2, cfg.view_size, cfg.view_size), &cfg.augment, &mut rng);
        let t1 = FrameTransform {
            flip: aug1.flip,
            ..FrameTransform::crop_resize(&rect1, v, v)
        };
        let t2 = FrameTransform {
            flip: aug2.flip,
            ..FrameTransform::crop_resize(&rect2, v, v)
        };

        let mut pairs: Vec<(BoxXYXY, BoxXYXY)> = props
            .iter()
            .filter_map(|p| Some((map_box(p, &t1).ok()?, map_box(p, &t2).ok()?)))
            .collect();
        if pairs.is_empty() {
            last_err = Some(ViewError::Geometry(GeometryError::EmptyIntersection));
            continue;
        }
        let repeated = pairs.len() < cfg.n;
        let mut k = 0;
        while pairs.len() < cfg.n {
            pairs.push(pairs[k]);
            k += 1;
        }
        let mut proposals1 = Vec::with_capacity(cfg.n);
        let mut proposals2 = Vec::with_capacity(cfg.n);
        for (a, _) in &pairs {
            proposals1.push(jitter_box(a, cfg.jitter, (v, v), &mut rng));
        }
        for (_, b) in &pairs {
            proposals2.push(jitter_box(b, cfg.jitter, (v, v), &mut rng));
        }
        return Ok(ViewPair {
            view1: img1,
            view2: img2,
            t1,
            t2,
            base,
            rect1,
            rect2,
            proposals1,
            proposals2,
            aug1,
            aug2,
            seed,
            repeated,
        });
    }
    Err(last_err.unwrap_or(ViewError::OverlapTooSmall(0.0)))
}
