//! Frozen-feature preparation and the differentiable training objectives.

use crate::backbone::FrozenBackbone;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::geometry::{to_cxcywh, BoxXYXY};
use crate::losses::{
    box_loss, global_disc, hungarian, match_bce, matching_cost, region_disc, rows4, set_loss,
    BoxLossWeights, LossWeights, MatchAssignment, MatchCoefficients,
};
use crate::model::{positional_embedding, Bound, Detr};
use crate::tensor::{sigmoid, Real, Tape, Tensor, Var};
use crate::views::ViewPair;

/// Source of the region-discrimination targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegionTarget {
    /// Crop-level features: crop first, then extract.
    Crop,
    /// Object-level features pooled from the whole-view map.
    Object,
}

impl std::str::FromStr for RegionTarget {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "crop" => Ok(Self::Crop),
            "object" => Ok(Self::Object),
            _ => Err(format!("unknown region target `{s}` (crop|object)")),
        }
    }
}

impl std::fmt::Display for RegionTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Crop => "crop",
            Self::Object => "object",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainOptions {
    pub weights: LossWeights,
    pub region_target: RegionTarget,
    pub coeffs: MatchCoefficients,
    pub box_weights: BoxLossWeights,
    /// Also apply the localization and region terms to every intermediate
    /// decoder layer.
    pub aux_loss: bool,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            weights: LossWeights::DESK,
            region_target: RegionTarget::Crop,
            coeffs: MatchCoefficients::default(),
            box_weights: BoxLossWeights::default(),
            aux_loss: false,
        }
    }
}

/// Everything the frozen backbone contributes to one view pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedPair {
    /// Feature-map grid `(H₁, W₁)` shared by both views.
    pub grid: (usize, usize),
    /// `H₁W₁ × C_b` per view.
    pub h: [Tensor; 2],
    /// Object-level region features, `n × C_b` per view.
    pub z: [Tensor; 2],
    /// Crop-level region features, `n × C_b` per view.
    pub p: [Tensor; 2],
    /// Proposal boxes in normalized cxcywh, `n × 4` per view.
    pub b: [Tensor; 2],
}

impl PreparedPair {
    /// The same pair with the two views exchanged.
    pub fn swapped(&self) -> Self {
        let sw = |a: &[Tensor; 2]| [a[1].clone(), a[0].clone()];
        Self {
            grid: self.grid,
            h: sw(&self.h),
            z: sw(&self.z),
            p: sw(&self.p),
            b: sw(&self.b),
        }
    }
}

fn normalized_boxes(boxes: &[BoxXYXY], w: f32, h: f32) -> Result<Tensor> {
    let mut data = Vec::with_capacity(4 * boxes.len());
    for b in boxes {
        let (c, _) = to_cxcywh(b, w, h)?;
        data.extend_from_slice(&c.to_array());
    }
    Ok(Tensor::new([boxes.len(), 4], data)?)
}

fn flatten_map(h: Tensor) -> Result<(Tensor, (usize, usize))> {
    let s = h.shape().to_vec();
    Ok((h.reshape([s[0] * s[1], s[2]])?, (s[0], s[1])))
}

pub fn prepare_pair(backbone: &FrozenBackbone, vp: &ViewPair) -> Result<PreparedPair> {
    let mut h = Vec::with_capacity(2);
    let mut z = Vec::with_capacity(2);
    let mut p = Vec::with_capacity(2);
    let mut b = Vec::with_capacity(2);
    let mut grid = (0, 0);
    for (img, props) in [(&vp.view1, &vp.proposals1), (&vp.view2, &vp.proposals2)] {
        let fmap = backbone.extract(img)?;
        z.push(backbone.object_level_features(&fmap, props)?);
        p.push(backbone.crop_level_features(img, props)?);
        b.push(normalized_boxes(props, img.width() as f32, img.height() as f32)?);
        let (flat, g) = flatten_map(fmap)?;
        grid = g;
        h.push(flat);
    }
    let two = |mut v: Vec<Tensor>| -> [Tensor; 2] {
        let b = v.pop().expect("two views");
        [v.pop().expect("two views"), b]
    };
    Ok(PreparedPair {
        grid,
        h: two(h),
        z: two(z),
        p: two(p),
        b: two(b),
    })
}

/// Losses of one pretraining forward pass, each already averaged over the
/// batch. Terms whose weight is zero are skipped and held at zero.
pub struct PretrainOutput {
    pub total: Var,
    pub loc: Var,
    pub global_disc: Var,
    pub region_disc: Var,
    /// One assignment per (item, direction, decoder output), in that order.
    pub matches: Vec<MatchAssignment>,
}

fn encode_view<T: Real>(
    model: &Detr,
    tape: &mut Tape<T>,
    p: &Bound,
    h: &Tensor,
    grid: (usize, usize),
) -> Result<(Var, Var)> {
    let hv = tape.constant(h.cast::<T>());
    let src = model.input_projection(tape, p, hv)?;
    let pos = tape.constant(positional_embedding::<T>(grid.0, grid.1, model.cfg.d_model));
    let c = model.encode(tape, p, src, pos)?;
    Ok((c, pos))
}

/// Two-direction pretraining objective over a batch of prepared pairs.
/// Direction `1→2` decodes view 2's context conditioned on view 1's object
/// features and is supervised by view 2's boxes and view 1's region
/// targets; direction `2→1` mirrors it. When `fixed` is given those
/// assignments are used instead of running the matcher.
pub fn pretrain_forward<T: Real>(
    tape: &mut Tape<T>,
    model: &Detr,
    p: &Bound,
    batch: &[PreparedPair],
    opts: &PretrainOptions,
    fixed: Option<&[MatchAssignment]>,
) -> Result<PretrainOutput> {
    opts.weights.validate()?;
    if batch.is_empty() {
        return Err(Error::Config("empty pretraining batch".into()));
    }
    let want_r = opts.weights.lambda_r > 0.0;
    let want_g = opts.weights.lambda_g > 0.0;
    let mut loc_terms = Vec::new();
    let mut r_terms = Vec::new();
    let mut pooled: [Vec<Var>; 2] = [Vec::new(), Vec::new()];
    let mut matches = Vec::new();
    let mut fixed_iter = fixed.map(|f| f.iter());

    for item in batch {
        let mut ctx = Vec::with_capacity(2);
        for v in 0..2 {
            let (c, pos) = encode_view(model, tape, p, &item.h[v], item.grid)?;
            if want_g {
                pooled[v].push(tape.mean_rows(c)?);
            }
            ctx.push((c, pos));
        }
        // (source view, decoded view)
        for (src, dst) in [(0usize, 1usize), (1, 0)] {
            let z = tape.constant(item.z[src].cast::<T>());
            let (c, pos) = ctx[dst];
            let dec = model.decode(tape, p, c, pos, Some(z), false)?;
            let outputs: Vec<Var> = if opts.aux_loss {
                dec.layers.clone()
            } else {
                vec![dec.last()]
            };
            let targets = item.b[dst].cast::<T>();
            let region_targets = match opts.region_target {
                RegionTarget::Crop => item.p[src].cast::<T>(),
                RegionTarget::Object => item.z[src].cast::<T>(),
            };
            for q in outputs {
                let pred = model.predict(tape, p, q)?;
                let assign = match fixed_iter.as_mut() {
                    Some(it) => it
                        .next()
                        .cloned()
                        .ok_or_else(|| Error::Config("too few fixed assignments".into()))?,
                    None => {
                        let boxes = rows4(tape.value(pred.boxes));
                        let k: Vec<f64> = tape
                            .value(pred.match_logits)
                            .data()
                            .iter()
                            .map(|&x| sigmoid(x.to_f64().unwrap_or(0.0)))
                            .collect();
                        let cost = matching_cost(&boxes, &rows4(&item.b[dst]), |_, j| k[j], opts.coeffs);
                        hungarian(&cost)?
                    }
                };
                let bl = box_loss(tape, pred.boxes, &targets, &assign, opts.box_weights)?;
                let bce = match_bce(tape, pred.match_logits, &assign)?;
                loc_terms.push(tape.add(bl, bce)?);
                if want_r {
                    r_terms.push(region_disc(tape, pred.sem, &region_targets, &assign)?);
                }
                matches.push(assign);
            }
        }
    }

    let nb = T::lit(1.0 / batch.len() as f64);
    let sum_scaled = |tape: &mut Tape<T>, terms: &[Var]| -> Result<Var> {
        if terms.is_empty() {
            return Ok(tape.constant(Tensor::scalar(T::zero())));
        }
        let mut flat = Vec::with_capacity(terms.len());
        for &t in terms {
            flat.push(tape.reshape(t, [1])?);
        }
        let stacked = tape.concat(&flat, 0)?;
        let s = tape.sum(stacked);
        Ok(tape.scale(s, nb))
    };
    let loc = sum_scaled(tape, &loc_terms)?;
    let region = sum_scaled(tape, &r_terms)?;
    let global = if want_g {
        let p1 = tape.concat(&pooled[0], 0)?;
        let p1 = tape.reshape(p1, [batch.len(), model.cfg.d_model])?;
        let p2 = tape.concat(&pooled[1], 0)?;
        let p2 = tape.reshape(p2, [batch.len(), model.cfg.d_model])?;
        let m1 = model.project(tape, p, p1)?;
        let m2 = model.project(tape, p, p2)?;
        let a = global_disc(tape, m1, p2)?;
        let b = global_disc(tape, m2, p1)?;
        tape.add(a, b)?
    } else {
        tape.constant(Tensor::scalar(T::zero()))
    };

    let w = opts.weights;
    let t_loc = tape.scale(loc, T::lit(w.lambda_loc as f64));
    let t_g = tape.scale(global, T::lit(w.lambda_g as f64));
    let t_r = tape.scale(region, T::lit(w.lambda_r as f64));
    let s = tape.add(t_r, t_g)?;
    let total = tape.add(s, t_loc)?;
    Ok(PretrainOutput {
        total,
        loc,
        global_disc: global,
        region_disc: region,
        matches,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneOptions {
    pub eos_weight: f32,
    pub coeffs: MatchCoefficients,
    pub box_weights: BoxLossWeights,
    pub aux_loss: bool,
}

impl Default for FinetuneOptions {
    fn default() -> Self {
        Self {
            eos_weight: 0.1,
            coeffs: MatchCoefficients::default(),
            box_weights: BoxLossWeights::default(),
            aux_loss: false,
        }
    }
}

/// Backbone features and normalized targets of one labeled image.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedImage {
    pub grid: (usize, usize),
    pub h: Tensor,
    /// `M × 4` normalized cxcywh.
    pub boxes: Tensor,
    pub labels: Vec<usize>,
    /// Source image size, to map predictions back to pixels.
    pub image_size: (usize, usize),
}

/// Resizes the image to `size × size`, extracts features and normalizes the
/// annotation boxes. With `flip` the image and boxes are mirrored first.
pub fn prepare_image(backbone: &FrozenBackbone, sample: &Sample, size: usize, flip: bool) -> Result<PreparedImage> {
    let (w, h) = (sample.image.width() as f32, sample.image.height() as f32);
    let full = BoxXYXY::new(0.0, 0.0, w, h)?;
    let mut view = sample.image.crop_resize(&full, size, size);
    let mut boxes = sample.boxes.clone();
    if flip {
        view = view.flip_horizontal();
        for b in &mut boxes {
            *b = BoxXYXY::from_corners(w - b.x2, b.y1, w - b.x1, b.y2);
        }
    }
    let (flat, grid) = flatten_map(backbone.extract(&view)?)?;
    Ok(PreparedImage {
        grid,
        h: flat,
        boxes: normalized_boxes(&boxes, w, h)?,
        labels: sample.labels.clone(),
        image_size: (sample.image.width(), sample.image.height()),
    })
}

/// Plain detection forward for one image: `(class logits N × (K+1),
/// boxes N × 4)` of every returned decoder output.
pub fn detect_forward<T: Real>(
    tape: &mut Tape<T>,
    model: &Detr,
    p: &Bound,
    img: &PreparedImage,
    all_layers: bool,
) -> Result<Vec<(Var, Var)>> {
    let (c, pos) = encode_view(model, tape, p, &img.h, img.grid)?;
    let dec = model.decode(tape, p, c, pos, None, false)?;
    let outs = if all_layers {
        dec.layers.clone()
    } else {
        vec![dec.last()]
    };
    outs.into_iter()
        .map(|q| Ok((model.classify(tape, p, q)?, model.box_head(tape, p, q)?)))
        .collect()
}

fn softmax_rows(logits: &[f64], k1: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(k1) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    out
}

/// Set-prediction loss averaged over the batch.
pub fn finetune_forward<T: Real>(
    tape: &mut Tape<T>,
    model: &Detr,
    p: &Bound,
    batch: &[PreparedImage],
    opts: &FinetuneOptions,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Config("empty finetuning batch".into()));
    }
    let k1 = model.cfg.classes + 1;
    let mut terms = Vec::new();
    for img in batch {
        let targets = img.boxes.cast::<T>();
        for (logits, boxes) in detect_forward(tape, model, p, img, opts.aux_loss)? {
            let lv: Vec<f64> = tape
                .value(logits)
                .data()
                .iter()
                .map(|v| v.to_f64().unwrap_or(0.0))
                .collect();
            let probs = softmax_rows(&lv, k1);
            let cost = matching_cost(
                &rows4(tape.value(boxes)),
                &rows4(&img.boxes),
                |i, j| probs[j * k1 + img.labels[i]],
                opts.coeffs,
            );
            let assign = hungarian(&cost)?;
            let l = set_loss(
                tape,
                logits,
                boxes,
                &targets,
                &img.labels,
                &assign,
                opts.eos_weight,
                opts.box_weights,
            )?;
            terms.push(tape.reshape(l, [1])?);
        }
    }
    let stacked = tape.concat(&terms, 0)?;
    let s = tape.sum(stacked);
    Ok(tape.scale(s, T::lit(1.0 / batch.len() as f64)))
}

/// One scored box in image pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub image: usize,
    pub bbox: BoxXYXY,
    pub class: usize,
    pub score: f32,
}

/// Runs the detector on one image and returns one detection per query:
/// the best foreground class and its probability.
pub fn detect(model: &Detr, img: &PreparedImage, image_id: usize) -> Result<Vec<Detection>> {
    let mut tape = Tape::<f32>::new();
    let p = model.bind(&mut tape, |_| false);
    let (logits, boxes) = detect_forward(&mut tape, model, &p, img, false)?[0];
    let k1 = model.cfg.classes + 1;
    let lv: Vec<f64> = tape.value(logits).data().iter().map(|&v| v as f64).collect();
    let probs = softmax_rows(&lv, k1);
    let (w, h) = (img.image_size.0 as f32, img.image_size.1 as f32);
    Ok(rows4(tape.value(boxes))
        .iter()
        .enumerate()
        .map(|(j, b)| {
            let row = &probs[j * k1..j * k1 + k1 - 1];
            let (class, score) = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (c, &s)| if s > acc.1 { (c, s) } else { acc });
            let bx = BoxXYXY::from_corners(
                (b[0] - b[2] / 2.0) * w,
                (b[1] - b[3] / 2.0) * h,
                (b[0] + b[2] / 2.0) * w,
                (b[1] + b[3] / 2.0) * h,
            )
            .clamp_to(w, h);
            Detection {
                image: image_id,
                bbox: bx,
                class,
                score: score as f32,
            }
        })
        .collect())
}
