//! COCO-style detection metrics, the frozen-head probe table and
//! attention-map export.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::Sample;
use crate::error::{io_error, Result};
use crate::geometry::{box_iou, BoxXYXY};
use crate::model::{positional_embedding, Detr};
use crate::objective::{detect, Detection, PreparedImage};
use crate::tensor::{sigmoid, Tape, Tensor};
use crate::train::write_atomic;

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn iou_thresholds() -> [f32; 10] {
    std::array::from_fn(|i| 0.5 + 0.05 * i as f32)
}

/// Ground truth of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub boxes: Vec<BoxXYXY>,
    pub labels: Vec<usize>,
}

impl From<&Sample> for GroundTruth {
    fn from(s: &Sample) -> Self {
        Self {
            boxes: s.boxes.clone(),
            labels: s.labels.clone(),
        }
    }
}

/// Detection order: confidence descending, ties by input position.
fn ranked<'a>(dets: impl Iterator<Item = &'a Detection>) -> Vec<&'a Detection> {
    let mut v: Vec<(usize, &Detection)> = dets.enumerate().collect();
    v.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then(a.0.cmp(&b.0)));
    v.into_iter().map(|(_, d)| d).collect()
}

/// Greedy matching of ranked detections of one class against the ground
/// truth; returns a true-positive flag per ranked detection.
fn greedy_tp(ranked: &[&Detection], gt: &[GroundTruth], class: usize, thr: f32) -> Vec<bool> {
    let mut used: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.boxes.len()]).collect();
    ranked
        .iter()
        .map(|d| {
            let Some(g) = gt.get(d.image) else { return false };
            let mut best: Option<(usize, f32)> = None;
            for (j, (b, &l)) in g.boxes.iter().zip(&g.labels).enumerate() {
                if l != class || used[d.image][j] {
                    continue;
                }
                let iou = box_iou(&d.bbox, b);
                if iou >= thr && best.is_none_or(|(_, bi)| iou > bi) {
                    best = Some((j, iou));
                }
            }
            match best {
                Some((j, _)) => {
                    used[d.image][j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// AP of one class at one threshold, 101-point interpolated. `None` when
/// the class has no ground truth.
fn class_ap(dets: &[Detection], gt: &[GroundTruth], class: usize, thr: f32) -> Option<f32> {
    let n_gt: usize = gt.iter().map(|g| g.labels.iter().filter(|&&l| l == class).count()).sum();
    let r = ranked(dets.iter().filter(|d| d.class == class));
    if n_gt == 0 {
        return if r.is_empty() { None } else { Some(0.0) };
    }
    let tp = greedy_tp(&r, gt, class, thr);
    let mut prec = Vec::with_capacity(tp.len());
    let mut rec = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        prec.push(hits as f64 / (k + 1) as f64);
        rec.push(hits as f64 / n_gt as f64);
    }
    for k in (0..prec.len().saturating_sub(1)).rev() {
        prec[k] = prec[k].max(prec[k + 1]);
    }
    let mut sum = 0.0;
    for i in 0..=100 {
        let r_t = i as f64 / 100.0;
        let k = rec.partition_point(|&r| r < r_t - 1e-12);
        if k < prec.len() {
            sum += prec[k];
        }
    }
    Some((sum / 101.0) as f32)
}

/// Mean over classes of the per-class AP at `iou_threshold`. Classes absent
/// from both detections and ground truth are skipped; when nothing is left
/// the result is 1 and `flagged` is set.
pub fn average_precision_flagged(dets: &[Detection], gt: &[GroundTruth], iou_threshold: f32) -> (f32, bool) {
    let classes = gt
        .iter()
        .flat_map(|g| g.labels.iter().copied())
        .chain(dets.iter().map(|d| d.class))
        .max()
        .map_or(0, |m| m + 1);
    let aps: Vec<f32> = (0..classes)
        .filter_map(|c| class_ap(dets, gt, c, iou_threshold))
        .collect();
    if aps.is_empty() {
        (1.0, true)
    } else {
        (aps.iter().sum::<f32>() / aps.len() as f32, false)
    }
}

pub fn average_precision(dets: &[Detection], gt: &[GroundTruth], iou_threshold: f32) -> f32 {
    average_precision_flagged(dets, gt, iou_threshold).0
}

/// Recall with the top `k` detections per image, class-aware, averaged over
/// the ten IoU thresholds.
pub fn average_recall_at_k(dets: &[Detection], gt: &[GroundTruth], k: usize) -> f32 {
    let n_gt: usize = gt.iter().map(|g| g.boxes.len()).sum();
    if n_gt == 0 {
        return 1.0;
    }
    let mut top: Vec<Vec<&Detection>> = vec![Vec::new(); gt.len()];
    for d in ranked(dets.iter()) {
        if let Some(v) = top.get_mut(d.image) {
            if v.len() < k {
                v.push(d);
            }
        }
    }
    let mut total = 0.0f64;
    for thr in iou_thresholds() {
        let mut hit = 0usize;
        for (i, g) in gt.iter().enumerate() {
            let classes: Vec<usize> = {
                let mut c = g.labels.clone();
                c.sort_unstable();
                c.dedup();
                c
            };
            let single = [g.clone()];
            for c in classes {
                let ds: Vec<&Detection> = top[i].iter().copied().filter(|d| d.class == c).collect();
                let local: Vec<Detection> = ds
                    .iter()
                    .map(|d| Detection {
                        image: 0,
                        ..(*d).clone()
                    })
                    .collect();
                let refs: Vec<&Detection> = local.iter().collect();
                hit += greedy_tp(&refs, &single, c, thr).iter().filter(|&&t| t).count();
            }
        }
        total += hit as f64 / n_gt as f64;
    }
    (total / 10.0) as f32
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub ap: f32,
    pub ap50: f32,
    pub ap75: f32,
    pub ar1: f32,
    pub ar10: f32,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "ap,ap50,ap75,ar1,ar10";

    pub fn compute(dets: &[Detection], gt: &[GroundTruth]) -> Self {
        let per: Vec<f32> = iou_thresholds().iter().map(|&t| average_precision(dets, gt, t)).collect();
        Self {
            ap: per.iter().sum::<f32>() / per.len() as f32,
            ap50: per[0],
            ap75: per[5],
            ar1: average_recall_at_k(dets, gt, 1),
            ar10: average_recall_at_k(dets, gt, 10),
        }
    }

    pub fn csv_row(&self) -> String {
        format!("{:.4},{:.4},{:.4},{:.4},{:.4}", self.ap, self.ap50, self.ap75, self.ar1, self.ar10)
    }
}

/// Runs the detector over prepared (unflipped) images and scores it.
pub fn evaluate(model: &Detr, images: &[PreparedImage], gt: &[GroundTruth]) -> Result<MetricReport> {
    let mut dets = Vec::new();
    for (i, img) in images.iter().enumerate() {
        dets.extend(detect(model, img, i)?);
    }
    Ok(MetricReport::compute(&dets, gt))
}

/// One row of the probe table.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeRow {
    pub init: String,
    pub ar1: f32,
    pub ar10: f32,
}

pub fn probe_table(rows: &[ProbeRow]) -> String {
    let mut s = String::from("init,ar1,ar10\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.4},{:.4}", r.init, r.ar1, r.ar10);
    }
    s
}

/// Decoder cross-attention of the last layer for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps {
    pub grid: (usize, usize),
    /// Per query, the head-averaged attention over the `H₁ × W₁` grid.
    pub maps: Vec<Vec<f64>>,
    /// Per query, predicted `(cx, cy, w, h)` and match probability.
    pub boxes: Vec<([f32; 4], f32)>,
}

/// Runs the pretraining decoder path (`z` given) or the plain one and keeps
/// the last layer's cross-attention.
pub fn attention_maps(model: &Detr, img: &PreparedImage, z: Option<&Tensor>) -> Result<AttentionMaps> {
    let mut tape = Tape::<f32>::new();
    let p = model.bind(&mut tape, |_| false);
    let hv = tape.constant(img.h.clone());
    let src = model.input_projection(&mut tape, &p, hv)?;
    let pos = tape.constant(positional_embedding::<f32>(img.grid.0, img.grid.1, model.cfg.d_model));
    let c = model.encode(&mut tape, &p, src, pos)?;
    let zv = z.map(|z| tape.constant(z.clone()));
    let dec = model.decode(&mut tape, &p, c, pos, zv, true)?;
    let pred = model.predict(&mut tape, &p, dec.last())?;
    let n = model.cfg.queries;
    let l = img.grid.0 * img.grid.1;
    let heads = dec.cross_attention.len().max(1);
    let mut maps = vec![vec![0.0f64; l]; n];
    for a in &dec.cross_attention {
        for (q, row) in maps.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v += a.data()[q * l + j] / heads as f64;
            }
        }
    }
    let bx = tape.value(pred.boxes).data().to_vec();
    let k = tape.value(pred.match_logits).data().to_vec();
    let boxes = (0..n)
        .map(|q| ([bx[4 * q], bx[4 * q + 1], bx[4 * q + 2], bx[4 * q + 3]], sigmoid(k[q])))
        .collect();
    Ok(AttentionMaps {
        grid: img.grid,
        maps,
        boxes,
    })
}

/// 8-bit binary PGM of a map, min-max normalized. A constant map becomes
/// mid-gray.
pub fn to_pgm(map: &[f64], w: usize, h: usize) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    let lo = map.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    for &v in map {
        let g = if span > 1e-12 {
            ((v - lo) / span * 255.0).round() as u8
        } else {
            128
        };
        out.push(g);
    }
    out
}

/// Writes `query_XX.pgm` per query and `boxes.txt` under `dir`.
pub fn export_attention(maps: &AttentionMaps, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(io_error(dir))?;
    let (h, w) = maps.grid;
    let mut written = Vec::new();
    for (q, m) in maps.maps.iter().enumerate() {
        let p = dir.join(format!("query_{q:02}.pgm"));
        write_atomic(&p, &to_pgm(m, w, h))?;
        written.push(p);
    }
    let mut side = String::from("# query_index cx cy w h k_hat\n");
    for (q, (b, k)) in maps.boxes.iter().enumerate() {
        let _ = writeln!(side, "{q} {} {} {} {} {}", b[0], b[1], b[2], b[3], k);
    }
    let p = dir.join("boxes.txt");
    write_atomic(&p, side.as_bytes())?;
    written.push(p);
    Ok(written)
}
