//! Bipartite matching and the loss terms used in pretraining and
//! finetuning.

use thiserror::Error;

use crate::geometry::{box_giou, BoxXYXY};
use crate::tensor::{Real, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("cost matrix has {rows} targets but only {cols} predictions")]
    TooManyTargets { rows: usize, cols: usize },
    #[error("cost matrix row {0} has a different length")]
    Ragged(usize),
    #[error("non-finite cost at ({0}, {1})")]
    NonFinite(usize, usize),
    #[error("no matched pairs")]
    NoPairs,
    #[error("negative loss weight {0} = {1}")]
    NegativeWeight(&'static str, f32),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Injective map from target index `i` to prediction index `pred[i]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MatchAssignment {
    pub pred: Vec<usize>,
}

impl MatchAssignment {
    pub fn len(&self) -> usize {
        self.pred.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pred.is_empty()
    }

    pub fn cost(&self, cost: &[Vec<f64>]) -> f64 {
        self.pred.iter().enumerate().map(|(i, &j)| cost[i][j]).sum()
    }

    /// Per-prediction flag: was it assigned a target.
    pub fn matched_mask(&self, predictions: usize) -> Vec<bool> {
        let mut m = vec![false; predictions];
        for &j in &self.pred {
            m[j] = true;
        }
        m
    }
}

/// Minimum total cost over injective assignments of the rows of `cost`
/// (targets) to its columns (predictions), restricted to rows `from..` and
/// to columns not in `banned`. Shortest augmenting path with potentials.
fn min_cost(cost: &[Vec<f64>], from: usize, banned: &[bool]) -> (f64, Vec<usize>) {
    let rows: Vec<usize> = (from..cost.len()).collect();
    let cols: Vec<usize> = (0..banned.len()).filter(|&j| !banned[j]).collect();
    let (n, m) = (rows.len(), cols.len());
    if n == 0 {
        return (0.0, Vec::new());
    }
    // 1-based arrays, column 0 is the virtual start
    let mut u = vec![0f64; n + 1];
    let mut v = vec![0f64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[rows[i0 - 1]][cols[j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=m {
        if owner[j] != 0 {
            assign[owner[j] - 1] = cols[j - 1];
        }
    }
    let total = assign
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[rows[i]][j])
        .sum();
    (total, assign)
}

/// Optimal assignment of `m` targets (rows) to `n ≥ m` predictions
/// (columns). Among optimal assignments the lexicographically smallest
/// prediction sequence is returned.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<MatchAssignment> {
    let m = cost.len();
    if m == 0 {
        return Ok(MatchAssignment { pred: Vec::new() });
    }
    let n = cost[0].len();
    for (i, row) in cost.iter().enumerate() {
        if row.len() != n {
            return Err(LossError::Ragged(i));
        }
        if let Some(j) = row.iter().position(|v| !v.is_finite()) {
            return Err(LossError::NonFinite(i, j));
        }
    }
    if m > n {
        return Err(LossError::TooManyTargets { rows: m, cols: n });
    }
    let mut banned = vec![false; n];
    let (best, first) = min_cost(cost, 0, &banned);
    let scale: f64 = cost.iter().flatten().fold(1.0, |a, v| a.max(v.abs()));
    let tol = 1e-9 * scale * m as f64;
    let mut pred = Vec::with_capacity(m);
    let mut spent = 0.0;
    for i in 0..m {
        // the assignment found for the remaining rows is a valid fallback
        let mut chosen = None;
        for j in 0..n {
            if banned[j] {
                continue;
            }
            banned[j] = true;
            let (rest, _) = min_cost(cost, i + 1, &banned);
            banned[j] = false;
            if spent + cost[i][j] + rest <= best + tol {
                chosen = Some(j);
                break;
            }
        }
        let j = chosen.unwrap_or(first[i]);
        banned[j] = true;
        spent += cost[i][j];
        pred.push(j);
    }
    Ok(MatchAssignment { pred })
}

/// Weights of the matching cost: class / objectness, GIoU, ℓ1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchCoefficients {
    pub class: f32,
    pub giou: f32,
    pub l1: f32,
}

impl Default for MatchCoefficients {
    fn default() -> Self {
        Self {
            class: 1.0,
            giou: 2.0,
            l1: 5.0,
        }
    }
}

pub const PROB_CLAMP: f64 = 1e-7;

pub fn cxcywh_to_box(b: &[f32; 4]) -> BoxXYXY {
    BoxXYXY::from_corners(
        b[0] - b[2] / 2.0,
        b[1] - b[3] / 2.0,
        b[0] + b[2] / 2.0,
        b[1] + b[3] / 2.0,
    )
}

/// `cost[i][j] = −η₀·log p_j(i) + η₁·(1 − GIoU(b̂_j, b_i)) + η₂·‖b̂_j − b_i‖₁`
/// where `prob(i, j)` is the probability prediction `j` assigns to target
/// `i` (the match-head output in pretraining, the class probability when
/// finetuning). Boxes are normalized cxcywh.
pub fn matching_cost(
    pred_boxes: &[[f32; 4]],
    targets: &[[f32; 4]],
    prob: impl Fn(usize, usize) -> f64,
    coef: MatchCoefficients,
) -> Vec<Vec<f64>> {
    let pb: Vec<BoxXYXY> = pred_boxes.iter().map(cxcywh_to_box).collect();
    targets
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let tb = cxcywh_to_box(t);
            pred_boxes
                .iter()
                .enumerate()
                .map(|(j, p)| {
                    let k = prob(i, j).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                    let l1: f64 = p.iter().zip(t).map(|(a, b)| (a - b).abs() as f64).sum();
                    let g = box_giou(&pb[j], &tb) as f64;
                    -(coef.class as f64) * k.ln() + coef.giou as f64 * (1.0 - g) + coef.l1 as f64 * l1
                })
                .collect()
        })
        .collect()
}

pub fn rows4<T: Real>(t: &Tensor<T>) -> Vec<[f32; 4]> {
    t.data()
        .chunks_exact(4)
        .map(|r| std::array::from_fn(|k| r[k].to_f32().unwrap_or(f32::NAN)))
        .collect()
}

/// Per-row GIoU between two `M × 4` cxcywh matrices, on the tape.
pub fn giou_rows<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let corners = |tape: &mut Tape<T>, x: Var| -> Result<[Var; 4]> {
        let cx = tape.slice(x, 1, 0, 1)?;
        let cy = tape.slice(x, 1, 1, 1)?;
        let w = tape.slice(x, 1, 2, 1)?;
        let h = tape.slice(x, 1, 3, 1)?;
        let hw = tape.scale(w, T::lit(0.5));
        let hh = tape.scale(h, T::lit(0.5));
        Ok([
            tape.sub(cx, hw)?,
            tape.sub(cy, hh)?,
            tape.add(cx, hw)?,
            tape.add(cy, hh)?,
        ])
    };
    let [ax1, ay1, ax2, ay2] = corners(tape, a)?;
    let [bx1, by1, bx2, by2] = corners(tape, b)?;
    let area = |tape: &mut Tape<T>, x1, y1, x2, y2| -> Result<Var> {
        let w = tape.sub(x2, x1)?;
        let h = tape.sub(y2, y1)?;
        Ok(tape.mul(w, h)?)
    };
    let area_a = area(tape, ax1, ay1, ax2, ay2)?;
    let area_b = area(tape, bx1, by1, bx2, by2)?;
    let ix1 = tape.maximum(ax1, bx1)?;
    let iy1 = tape.maximum(ay1, by1)?;
    let ix2 = tape.minimum(ax2, bx2)?;
    let iy2 = tape.minimum(ay2, by2)?;
    let iw = tape.sub(ix2, ix1)?;
    let iw = tape.relu(iw);
    let ih = tape.sub(iy2, iy1)?;
    let ih = tape.relu(ih);
    let inter = tape.mul(iw, ih)?;
    let sum = tape.add(area_a, area_b)?;
    let union = tape.sub(sum, inter)?;
    let union = tape.offset(union, T::lit(1e-12));
    let iou = tape.div(inter, union)?;
    let hx1 = tape.minimum(ax1, bx1)?;
    let hy1 = tape.minimum(ay1, by1)?;
    let hx2 = tape.maximum(ax2, bx2)?;
    let hy2 = tape.maximum(ay2, by2)?;
    let hull = area(tape, hx1, hy1, hx2, hy2)?;
    let hull = tape.offset(hull, T::lit(1e-12));
    let dead = tape.sub(hull, union)?;
    let frac = tape.div(dead, hull)?;
    let g = tape.sub(iou, frac)?;
    let m = tape.shape(g)[0];
    Ok(tape.reshape(g, [m])?)
}

/// Box regression weights inside the per-pair box loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxLossWeights {
    pub giou: f32,
    pub l1: f32,
}

impl Default for BoxLossWeights {
    fn default() -> Self {
        Self { giou: 2.0, l1: 5.0 }
    }
}

/// Mean over matched pairs of `w_g·(1 − GIoU) + w_1·‖b̂ − b‖₁`.
/// `targets` is `M × 4` in target order.
pub fn box_loss<T: Real>(
    tape: &mut Tape<T>,
    pred_boxes: Var,
    targets: &Tensor<T>,
    assign: &MatchAssignment,
    w: BoxLossWeights,
) -> Result<Var> {
    if assign.is_empty() {
        return Err(LossError::NoPairs);
    }
    let m = assign.len() as f64;
    let sel = tape.gather_rows(pred_boxes, &assign.pred)?;
    let tgt = tape.constant(targets.clone());
    let g = giou_rows(tape, sel, tgt)?;
    let gsum = tape.sum(g);
    // Σ (1 − g) = M − Σ g
    let giou_term = tape.scale(gsum, T::lit(-(w.giou as f64) / m));
    let giou_term = tape.offset(giou_term, T::lit(w.giou as f64));
    let d = tape.sub(sel, tgt)?;
    let d = tape.abs(d);
    let l1 = tape.sum(d);
    let l1_term = tape.scale(l1, T::lit(w.l1 as f64 / m));
    Ok(tape.add(giou_term, l1_term)?)
}

/// Binary cross-entropy of the match head, averaged over all `N` queries;
/// matched queries have target 1.
pub fn match_bce<T: Real>(tape: &mut Tape<T>, logits: Var, assign: &MatchAssignment) -> Result<Var> {
    let n = tape.shape(logits)[0];
    let mask = assign.matched_mask(n);
    let t = Tensor::new(
        tape.shape(logits).to_vec(),
        mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect(),
    )?;
    let t = tape.constant(t);
    let sp = tape.softplus(logits);
    let tx = tape.mul(logits, t)?;
    let d = tape.sub(sp, tx)?;
    Ok(tape.mean(d))
}

/// Mean over matched pairs of `‖â − b̂‖² = 2 − 2·cos(a, b)` between the
/// semantic prediction of the matched query and the target row.
pub fn region_disc<T: Real>(
    tape: &mut Tape<T>,
    sem: Var,
    targets: &Tensor<T>,
    assign: &MatchAssignment,
) -> Result<Var> {
    if assign.is_empty() {
        return Err(LossError::NoPairs);
    }
    let sel = tape.gather_rows(sem, &assign.pred)?;
    let tgt = tape.constant(targets.clone());
    let cos = tape.cosine(sel, tgt)?;
    let mc = tape.mean(cos);
    let d = tape.scale(mc, T::lit(-2.0));
    Ok(tape.offset(d, T::lit(2.0)))
}

/// One direction of the global term: `−mean_b cos(live_b, detach(target_b))`.
pub fn global_disc<T: Real>(tape: &mut Tape<T>, live: Var, target: Var) -> Result<Var> {
    let t = tape.detach(target);
    let cos = tape.cosine(live, t)?;
    let mc = tape.mean(cos);
    Ok(tape.neg(mc))
}

/// Set-prediction loss of the detection task for one image. `logits` is
/// `N × (K+1)`; unmatched queries target the last (no-object) class with
/// weight `eos_weight`. The classification term is the weighted
/// cross-entropy averaged over the `N` queries; box terms are added when
/// there are targets.
pub fn set_loss<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    pred_boxes: Var,
    targets: &Tensor<T>,
    labels: &[usize],
    assign: &MatchAssignment,
    eos_weight: f32,
    w: BoxLossWeights,
) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let (n, k1) = (shape[0], shape[1]);
    let mut weights = vec![T::zero(); n * k1];
    let mut cls = vec![k1 - 1; n];
    let mut wt = vec![eos_weight as f64; n];
    for (i, &j) in assign.pred.iter().enumerate() {
        cls[j] = labels[i];
        wt[j] = 1.0;
    }
    for j in 0..n {
        weights[j * k1 + cls[j]] = T::lit(-wt[j] / n as f64);
    }
    let ls = tape.log_softmax(logits)?;
    let wmat = tape.constant(Tensor::new(shape, weights)?);
    let prod = tape.mul(ls, wmat)?;
    let ce = tape.sum(prod);
    if assign.is_empty() {
        return Ok(ce);
    }
    let bl = box_loss(tape, pred_boxes, targets, assign, w)?;
    Ok(tape.add(ce, bl)?)
}

/// Weights of the three pretraining terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Region discrimination.
    pub lambda_r: f32,
    /// Global discrimination.
    pub lambda_g: f32,
    /// Localization.
    pub lambda_loc: f32,
}

impl LossWeights {
    pub const DESK: Self = Self {
        lambda_r: 1.0,
        lambda_g: 1.0,
        lambda_loc: 1.0,
    };
    pub const IMAGENET: Self = Self {
        lambda_r: 3.0,
        lambda_g: 10.0,
        lambda_loc: 1.0,
    };
    pub const COCO: Self = Self {
        lambda_r: 0.3,
        lambda_g: 3.0,
        lambda_loc: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (n, v) in [
            ("lambda_r", self.lambda_r),
            ("lambda_g", self.lambda_g),
            ("lambda_loc", self.lambda_loc),
        ] {
            if !(v >= 0.0) {
                return Err(LossError::NegativeWeight(n, v));
            }
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::DESK
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub loc: f32,
    pub global_disc: f32,
    pub region_disc: f32,
    pub total: f32,
    pub weights: LossWeights,
}

/// `total = λ_r·r + λ_g·g + λ_loc·loc`.
pub fn total_loss(loc: f32, global_disc: f32, region_disc: f32, w: LossWeights) -> Result<LossBreakdown> {
    w.validate()?;
    Ok(LossBreakdown {
        loc,
        global_disc,
        region_disc,
        total: w.lambda_r * region_disc + w.lambda_g * global_disc + w.lambda_loc * loc,
        weights: w,
    })
}
