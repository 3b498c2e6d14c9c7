//! Box algebra, overlap metrics, frame transforms and RoIAlign.
//!
//! Boxes are half-open intervals in continuous pixel coordinates. Pixel `j`
//! covers `[j, j + 1)` and has its center at `j + 0.5`.

use thiserror::Error;

use crate::tensor::{self, Real, Tape, Taps, Tensor, Var};

const EPS: f32 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid box [{0}, {1}, {2}, {3}]")]
    InvalidBox(f32, f32, f32, f32),
    #[error("box does not intersect the target frame")]
    EmptyIntersection,
    #[error("frame dimensions must be positive, got {0}x{1}")]
    BadFrame(f32, f32),
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
}

/// Corner box in pixels of some frame.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct BoxXYXY {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl BoxXYXY {
    pub fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Result<Self, GeometryError> {
        let ok = [x1, y1, x2, y2].iter().all(|v| v.is_finite()) && x1 <= x2 && y1 <= y2;
        if !ok {
            return Err(GeometryError::InvalidBox(x1, y1, x2, y2));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Builds a box from two arbitrary corners, sorting coordinates.
    pub fn from_corners(ax: f32, ay: f32, bx: f32, by: f32) -> Self {
        Self {
            x1: ax.min(bx),
            y1: ay.min(by),
            x2: ax.max(bx),
            y2: ay.max(by),
        }
    }

    pub fn width(&self) -> f32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f32 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f32 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f32, f32) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn intersection(&self, o: &Self) -> Option<Self> {
        let x1 = self.x1.max(o.x1);
        let y1 = self.y1.max(o.y1);
        let x2 = self.x2.min(o.x2);
        let y2 = self.y2.min(o.y2);
        (x2 > x1 && y2 > y1).then_some(Self { x1, y1, x2, y2 })
    }

    pub fn hull(&self, o: &Self) -> Self {
        Self {
            x1: self.x1.min(o.x1),
            y1: self.y1.min(o.y1),
            x2: self.x2.max(o.x2),
            y2: self.y2.max(o.y2),
        }
    }

    pub fn clamp_to(&self, w: f32, h: f32) -> Self {
        Self {
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
            x2: self.x2.clamp(0.0, w),
            y2: self.y2.clamp(0.0, h),
        }
    }

    pub fn scaled(&self, s: f32) -> Self {
        Self {
            x1: self.x1 * s,
            y1: self.y1 * s,
            x2: self.x2 * s,
            y2: self.y2 * s,
        }
    }

    pub fn contains(&self, o: &Self, slack: f32) -> bool {
        o.x1 >= self.x1 - slack
            && o.y1 >= self.y1 - slack
            && o.x2 <= self.x2 + slack
            && o.y2 <= self.y2 + slack
    }

    pub fn to_array(&self) -> [f32; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Center-size box normalized to `[0, 1]` by the frame dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct BoxCxCyWH {
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
}

impl BoxCxCyWH {
    pub fn to_array(&self) -> [f32; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_array(a: [f32; 4]) -> Self {
        Self {
            cx: a[0],
            cy: a[1],
            w: a[2],
            h: a[3],
        }
    }
}

/// Normalizes a pixel box. The flag is set when a component had to be clamped
/// into `[0, 1]`.
pub fn to_cxcywh(b: &BoxXYXY, frame_w: f32, frame_h: f32) -> Result<(BoxCxCyWH, bool), GeometryError> {
    if !(frame_w > 0.0 && frame_h > 0.0) {
        return Err(GeometryError::BadFrame(frame_w, frame_h));
    }
    let raw = [
        0.5 * (b.x1 + b.x2) / frame_w,
        0.5 * (b.y1 + b.y2) / frame_h,
        b.width() / frame_w,
        b.height() / frame_h,
    ];
    let clamped = raw.map(|v| v.clamp(0.0, 1.0));
    Ok((BoxCxCyWH::from_array(clamped), clamped != raw))
}

/// Converts a normalized box back to pixels, clamping out-of-range input.
pub fn to_xyxy(b: &BoxCxCyWH, frame_w: f32, frame_h: f32) -> Result<(BoxXYXY, bool), GeometryError> {
    if !(frame_w > 0.0 && frame_h > 0.0) {
        return Err(GeometryError::BadFrame(frame_w, frame_h));
    }
    let raw = b.to_array();
    let c = raw.map(|v| v.clamp(0.0, 1.0));
    let out = BoxXYXY::from_corners(
        (c[0] - 0.5 * c[2]) * frame_w,
        (c[1] - 0.5 * c[3]) * frame_h,
        (c[0] + 0.5 * c[2]) * frame_w,
        (c[1] + 0.5 * c[3]) * frame_h,
    );
    Ok((out, c != raw))
}

/// Intersection over union; zero-area boxes give 0.
pub fn box_iou(a: &BoxXYXY, b: &BoxXYXY) -> f32 {
    let inter = a.intersection(b).map_or(0.0, |i| i.area());
    let union = a.area() + b.area() - inter;
    if union <= EPS {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Generalized IoU: IoU minus the fraction of the enclosing hull not covered
/// by the union.
pub fn box_giou(a: &BoxXYXY, b: &BoxXYXY) -> f32 {
    let inter = a.intersection(b).map_or(0.0, |i| i.area());
    let union = a.area() + b.area() - inter;
    let iou = if union <= EPS { 0.0 } else { inter / union };
    let hull = a.hull(b).area();
    if hull <= EPS {
        return iou;
    }
    (iou - (hull - union) / hull).clamp(-1.0, 1.0)
}

/// Image-to-view mapping: crop offset, per-axis scale, optional horizontal
/// flip inside a frame of `width × height` pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameTransform {
    pub dx: f32,
    pub dy: f32,
    pub sx: f32,
    pub sy: f32,
    pub flip: bool,
    pub width: f32,
    pub height: f32,
}

impl FrameTransform {
    pub fn identity(width: f32, height: f32) -> Self {
        Self {
            dx: 0.0,
            dy: 0.0,
            sx: 1.0,
            sy: 1.0,
            flip: false,
            width,
            height,
        }
    }

    /// Transform taking the `rect` region of the source frame onto a
    /// `width × height` target.
    pub fn crop_resize(rect: &BoxXYXY, width: f32, height: f32) -> Self {
        Self {
            dx: rect.x1,
            dy: rect.y1,
            sx: width / rect.width(),
            sy: height / rect.height(),
            flip: false,
            width,
            height,
        }
    }

    pub fn apply_point(&self, x: f32, y: f32) -> (f32, f32) {
        let mut u = (x - self.dx) * self.sx;
        let v = (y - self.dy) * self.sy;
        if self.flip {
            u = self.width - u;
        }
        (u, v)
    }

    pub fn invert_point(&self, u: f32, v: f32) -> (f32, f32) {
        let u = if self.flip { self.width - u } else { u };
        (u / self.sx + self.dx, v / self.sy + self.dy)
    }

    /// Maps a box into the target frame without clamping.
    pub fn apply_box(&self, b: &BoxXYXY) -> BoxXYXY {
        let (ax, ay) = self.apply_point(b.x1, b.y1);
        let (bx, by) = self.apply_point(b.x2, b.y2);
        BoxXYXY::from_corners(ax, ay, bx, by)
    }

    pub fn invert_box(&self, b: &BoxXYXY) -> BoxXYXY {
        let (ax, ay) = self.invert_point(b.x1, b.y1);
        let (bx, by) = self.invert_point(b.x2, b.y2);
        BoxXYXY::from_corners(ax, ay, bx, by)
    }
}

/// Expresses a source-frame box in the target frame of `t`, clamped to the
/// target extent. Fails when nothing of the box remains.
pub fn map_box(b: &BoxXYXY, t: &FrameTransform) -> Result<BoxXYXY, GeometryError> {
    let m = t.apply_box(b).clamp_to(t.width, t.height);
    if m.width() <= 0.0 || m.height() <= 0.0 {
        return Err(GeometryError::EmptyIntersection);
    }
    Ok(m)
}

/// Bilinear weights of continuous index-space position `u` on an axis of
/// `n` cells, clamped to the border.
fn lerp_taps(u: f32, n: usize) -> [(usize, f32); 2] {
    let u = u.clamp(0.0, (n - 1) as f32);
    let i0 = u.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    let l = u - i0 as f32;
    [(i0, 1.0 - l), (i1, l)]
}

/// Sampling taps for RoIAlign over an `h × w` feature map.
///
/// Each of the `out_h × out_w` bins averages a 2×2 grid of bilinear samples
/// placed at the bin-interior quarter points, with the half-pixel offset
/// (feature cell `j` is centered at `j + 0.5`). Samples outside the map
/// clamp to the border. Rows are ordered box-major, then bin row, then bin
/// column.
pub fn roi_align_taps<T: Real>(
    h: usize,
    w: usize,
    boxes: &[BoxXYXY],
    out_h: usize,
    out_w: usize,
) -> Taps<T> {
    const GRID: usize = 2;
    let mut taps = Vec::with_capacity(boxes.len() * out_h * out_w);
    let norm = 1.0 / (GRID * GRID) as f32;
    for b in boxes {
        let (sx, sy) = (b.x1 - 0.5, b.y1 - 0.5);
        let bw = b.width() / out_w as f32;
        let bh = b.height() / out_h as f32;
        for by in 0..out_h {
            for bx in 0..out_w {
                let mut acc: Vec<(usize, f32)> = Vec::with_capacity(16);
                for iy in 0..GRID {
                    let y = sy + (by as f32 + (iy as f32 + 0.5) / GRID as f32) * bh;
                    let ty = lerp_taps(y, h);
                    for ix in 0..GRID {
                        let x = sx + (bx as f32 + (ix as f32 + 0.5) / GRID as f32) * bw;
                        let tx = lerp_taps(x, w);
                        for &(yi, wy) in &ty {
                            for &(xi, wx) in &tx {
                                let wgt = wy * wx * norm;
                                if wgt == 0.0 {
                                    continue;
                                }
                                let src = yi * w + xi;
                                match acc.iter_mut().find(|(s, _)| *s == src) {
                                    Some((_, v)) => *v += wgt,
                                    None => acc.push((src, wgt)),
                                }
                            }
                        }
                    }
                }
                taps.push(acc.into_iter().map(|(s, v)| (s, T::lit(v as f64))).collect());
            }
        }
    }
    taps
}

/// Differentiable RoIAlign on the tape. `features` is `H × W × C`; boxes are
/// in feature-frame pixels. Returns `n × out_h × out_w × C`.
pub fn roi_align<T: Real>(
    tape: &mut Tape<T>,
    features: Var,
    boxes: &[BoxXYXY],
    out: (usize, usize),
) -> Result<Var, GeometryError> {
    let shape = tape.shape(features).to_vec();
    if shape.len() != 3 || shape[0] == 0 || shape[1] == 0 {
        return Err(tensor::TensorError::Invalid {
            op: "roi_align",
            msg: format!("expected a non-empty H×W×C map, got {shape:?}"),
        }
        .into());
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let taps = roi_align_taps::<T>(h, w, boxes, out.0, out.1);
    let flat = tape.reshape(features, [h * w, c])?;
    let g = tape.weighted_gather(flat, taps)?;
    Ok(tape.reshape(g, [boxes.len(), out.0, out.1, c])?)
}

/// RoIAlign on a plain `H × W × C` tensor, for paths that never need gradients.
pub fn roi_align_values(
    features: &Tensor,
    boxes: &[BoxXYXY],
    out: (usize, usize),
) -> Result<Tensor, GeometryError> {
    let mut tape = Tape::<f32>::new();
    let f = tape.constant(features.clone());
    let v = roi_align(&mut tape, f, boxes, out)?;
    Ok(tape.value(v).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x1: f32, y1: f32, x2: f32, y2: f32) -> BoxXYXY {
        BoxXYXY::new(x1, y1, x2, y2).unwrap()
    }

    /// Counts 0.01-px cells whose centers fall inside each box.
    fn raster_iou_giou(a: &BoxXYXY, b: &BoxXYXY) -> (f64, f64) {
        let hull = a.hull(b);
        let step = 0.01f64;
        let nx = ((hull.x2 - hull.x1) as f64 / step).round() as usize;
        let ny = ((hull.y2 - hull.y1) as f64 / step).round() as usize;
        let inside = |b: &BoxXYXY, x: f64, y: f64| {
            x >= b.x1 as f64 && x < b.x2 as f64 && y >= b.y1 as f64 && y < b.y2 as f64
        };
        let (mut inter, mut uni) = (0u64, 0u64);
        for j in 0..ny {
            let y = hull.y1 as f64 + (j as f64 + 0.5) * step;
            for i in 0..nx {
                let x = hull.x1 as f64 + (i as f64 + 0.5) * step;
                let (ia, ib) = (inside(a, x, y), inside(b, x, y));
                inter += (ia && ib) as u64;
                uni += (ia || ib) as u64;
            }
        }
        let total = (nx * ny) as f64;
        let iou = if uni == 0 { 0.0 } else { inter as f64 / uni as f64 };
        let giou = if total == 0.0 { iou } else { iou - (total - uni as f64) / total };
        (iou, giou)
    }

    #[test]
    fn iou_examples() {
        let a = bx(0., 0., 10., 10.);
        assert_eq!(box_iou(&a, &a), 1.0);
        assert_eq!(box_iou(&a, &bx(20., 20., 30., 30.)), 0.0);
        let v = box_iou(&bx(0., 0., 2., 2.), &bx(1., 0., 3., 2.));
        let (oracle, _) = raster_iou_giou(&bx(0., 0., 2., 2.), &bx(1., 0., 3., 2.));
        assert!((oracle - 1.0 / 3.0).abs() < 2e-2);
        assert!((v as f64 - oracle).abs() < 2e-2);
    }

    #[test]
    fn giou_examples() {
        let a = bx(0., 0., 2., 2.);
        assert_eq!(box_giou(&a, &a), 1.0);
        let inner = bx(0., 0., 1., 1.);
        assert!((box_giou(&a, &inner) - 0.25).abs() < 1e-7);
        assert_eq!(box_giou(&a, &inner), box_iou(&a, &inner));
        let g = box_giou(&bx(0., 0., 1., 1.), &bx(2., 0., 3., 1.));
        let (_, oracle) = raster_iou_giou(&bx(0., 0., 1., 1.), &bx(2., 0., 3., 1.));
        assert!((g + 1.0 / 3.0).abs() < 1e-6);
        assert!((oracle + 1.0 / 3.0).abs() < 2e-2);
    }

    #[test]
    fn degenerate_boxes_give_zero_iou() {
        let p = bx(1., 1., 1., 1.);
        assert_eq!(box_iou(&p, &p), 0.0);
        assert!(box_giou(&p, &p).is_finite());
        assert!(BoxXYXY::new(2., 0., 1., 1.).is_err());
        assert!(BoxXYXY::new(f32::NAN, 0., 1., 1.).is_err());
    }

    #[test]
    fn convert_examples() {
        let (c, flag) = to_cxcywh(&bx(0., 0., 64., 48.), 64., 48.).unwrap();
        assert_eq!(c, BoxCxCyWH { cx: 0.5, cy: 0.5, w: 1.0, h: 1.0 });
        assert!(!flag);
        let (b, _) = to_xyxy(&BoxCxCyWH { cx: 0.5, cy: 0.5, w: 0.5, h: 0.5 }, 100., 100.).unwrap();
        assert_eq!(b, bx(25., 25., 75., 75.));
        let (_, flag) = to_xyxy(&BoxCxCyWH { cx: 1.2, cy: 0.5, w: 0.5, h: 0.5 }, 10., 10.).unwrap();
        assert!(flag);
        assert!(to_cxcywh(&b, 0.0, 1.0).is_err());
    }

    #[test]
    fn map_box_flip_and_identity() {
        let t = FrameTransform::identity(100., 100.);
        let b = bx(10., 0., 20., 10.);
        assert_eq!(map_box(&b, &t).unwrap(), b);
        let f = FrameTransform { flip: true, ..t };
        assert_eq!(map_box(&b, &f).unwrap(), bx(80., 0., 90., 10.));
        let off = FrameTransform::crop_resize(&bx(50., 50., 100., 100.), 100., 100.);
        assert_eq!(map_box(&bx(0., 0., 10., 10.), &off), Err(GeometryError::EmptyIntersection));
    }

    #[test]
    fn roi_align_constant_and_single_cell() {
        let f = Tensor::full([5, 6, 3], 7.0f32);
        let out = roi_align_values(&f, &[bx(0.3, 1.2, 4.7, 3.9), bx(-2., -2., 9., 9.)], (2, 3)).unwrap();
        assert_eq!(out.shape(), &[2, 2, 3, 3]);
        assert!(out.data().iter().all(|&v| (v - 7.0).abs() < 1e-5));

        let one = Tensor::new([1, 1, 1], vec![4.5f32]).unwrap();
        let out = roi_align_values(&one, &[bx(0.1, 0.2, 0.9, 0.7)], (1, 1)).unwrap();
        assert!((out.data()[0] - 4.5).abs() < 1e-6);
    }

    #[test]
    fn roi_align_ramp_matches_dense_oracle() {
        // f(x, y) = x on a 4x4 map, value at cell j equals j
        let f = Tensor::from_fn([4, 4, 1], |i| (i % 4) as f32);
        let b = bx(1.0, 1.0, 3.0, 3.0);
        let out = roi_align_values(&f, &[b], (2, 2)).unwrap();
        // dense oracle: average bilinear field over each bin at 100x density
        let bil = |x: f64| (x - 0.5).clamp(0.0, 3.0);
        for by in 0..2 {
            for bxi in 0..2 {
                let mut s = 0.0;
                let n = 100;
                for i in 0..n {
                    let x = 1.0 + bxi as f64 + (i as f64 + 0.5) / n as f64;
                    s += bil(x);
                }
                let dense = s / n as f64;
                let got = out.data()[by * 2 + bxi] as f64;
                assert!((got - dense).abs() < 1e-3, "{got} vs {dense}");
            }
        }
    }
}
