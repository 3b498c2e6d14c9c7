#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdetr_core::geometry::{roi_align, BoxXYXY};
use sdetr_core::losses::{
    box_loss, giou_rows, global_disc, match_bce, region_disc, set_loss, BoxLossWeights, LossWeights, MatchAssignment,
};
use sdetr_core::model::{mha, Bound, positional_embedding, AttnParams, Detr, ProjectorKind, TransformerConfig};
use sdetr_core::objective::{detect_forward, pretrain_forward, PreparedImage, PreparedPair, PretrainOptions};
use sdetr_core::{Tape, Tensor, Var};

pub const INSTANCES: usize = 20;
pub const TOLERANCE: f64 = 1e-3;
const STEP: f64 = 1e-6;
/// Relative disagreement at which a coordinate is probed for a kink.
const PROBE: f64 = 1e-5;

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Var;

/// Worst relative error over the instances of one check.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub name: String,
    pub instances: usize,
    pub worst: f64,
    /// Draws discarded because the loss had a kink inside the stencil.
    pub kinked: usize,
}

impl GradReport {
    pub fn ok(&self) -> bool {
        self.instances >= INSTANCES && self.worst < TOLERANCE
    }
}

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`, with a floor so an all-zero gradient
/// compares against absolute error.
pub fn rel_error(a: &[f64], n: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn: f64 = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / na.max(nn).max(1e-6)
}

fn contract(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> Var {
    let w = tape.constant(weights.clone());
    let m = tape.mul(out, w).expect("same shape");
    tape.sum(m)
}

/// Analytic vs central-difference gradient of `Σ R ⊙ f(inputs)` for fixed
/// random `R`, over every input element.
pub fn check_instance(inputs: &[Tensor<f64>], f: &Build, rng: &mut ChaCha8Rng) -> f64 {
    let eval = |vals: &[Tensor<f64>], weights: Option<&Tensor<f64>>| -> (f64, Vec<Vec<f64>>, Tensor<f64>) {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, &vars);
        let w = match weights {
            Some(w) => w.clone(),
            None => Tensor::zeros(tape.shape(out).to_vec()),
        };
        let loss = contract(&mut tape, out, &w);
        tape.backward(loss).expect("backward");
        let grads = vars
            .iter()
            .zip(vals)
            .map(|(&v, t)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect();
        (tape.item(loss), grads, w)
    };
    let (_, _, shape_probe) = eval(inputs, None);
    let weights = Tensor::from_fn(shape_probe.shape().to_vec(), |_| rng.gen_range(-1.0..1.0));
    let (_, analytic, _) = eval(inputs, Some(&weights));
    let mut a_all = Vec::new();
    let mut n_all = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            let fp = eval(&plus, Some(&weights)).0;
            let fm = eval(&minus, Some(&weights)).0;
            n_all.push((fp - fm) / (2.0 * STEP));
            a_all.push(analytic[i][j]);
        }
    }
    rel_error(&a_all, &n_all)
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let u: f64 = rng.gen_range(-1.0..1.0);
        let v: f64 = rng.gen_range(-1.0..1.0);
        u + v
    })
}

/// Values bounded away from zero, for kinks at the origin.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m: f64 = rng.gen_range(0.05..1.5);
        if rng.gen::<bool>() {
            m
        } else {
            -m
        }
    })
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(0.2..2.0))
}

/// `b` differs from `a` by at least 0.05 everywhere.
fn separated(rng: &mut ChaCha8Rng, a: &Tensor<f64>) -> Tensor<f64> {
    Tensor::from_fn(a.shape().to_vec(), |i| {
        let d: f64 = rng.gen_range(0.05..1.0);
        if rng.gen::<bool>() {
            a.data()[i] + d
        } else {
            a.data()[i] - d
        }
    })
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(1..5), rng.gen_range(1..5))
}

fn cxcywh(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f64> {
    Tensor::from_fn([n, 4], |i| {
        if i % 4 < 2 {
            rng.gen_range(0.25..0.75)
        } else {
            rng.gen_range(0.1..0.4)
        }
    })
}

fn assignment(rng: &mut ChaCha8Rng, m: usize, n: usize) -> MatchAssignment {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        idx.swap(i, rng.gen_range(0..=i));
    }
    idx.truncate(m);
    MatchAssignment { pred: idx }
}

type Case = (String, Box<dyn Fn(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Build>)>);

fn case<G>(name: &str, g: G) -> Case
where
    G: Fn(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Build>) + 'static,
{
    (name.to_string(), Box::new(g))
}

/// One entry per differentiable primitive and composite loss.
pub fn primitive_cases() -> Vec<Case> {
    let mut v: Vec<Case> = Vec::new();
    macro_rules! binary {
        ($name:expr, $method:ident, $gen_b:expr) => {
            v.push(case($name, |rng| {
                let (r, c) = dims(rng);
                let a = normal(rng, &[r, c]);
                let b = $gen_b(rng, &a);
                (vec![a, b], Box::new(|t: &mut Tape<f64>, x: &[Var]| t.$method(x[0], x[1]).unwrap()))
            }));
        };
    }
    binary!("add", add, |rng: &mut ChaCha8Rng, a: &Tensor<f64>| normal(rng, a.shape()));
    binary!("sub", sub, |rng: &mut ChaCha8Rng, a: &Tensor<f64>| normal(rng, a.shape()));
    binary!("mul", mul, |rng: &mut ChaCha8Rng, a: &Tensor<f64>| normal(rng, a.shape()));
    binary!("div", div, |rng: &mut ChaCha8Rng, a: &Tensor<f64>| away_from_zero(rng, a.shape()));
    binary!("minimum", minimum, |rng: &mut ChaCha8Rng, a: &Tensor<f64>| separated(rng, a));
    binary!("maximum", maximum, |rng: &mut ChaCha8Rng, a: &Tensor<f64>| separated(rng, a));
    v.push(case("add_broadcast", |rng| {
        let (r, c) = dims(rng);
        let a = normal(rng, &[r, c]);
        let b = normal(rng, &[c]);
        (vec![a, b], Box::new(|t: &mut Tape<f64>, x: &[Var]| t.add(x[0], x[1]).unwrap()))
    }));
    v.push(case("mul_broadcast", |rng| {
        let (r, c) = dims(rng);
        let a = normal(rng, &[r, c]);
        let b = normal(rng, &[c]);
        (vec![a, b], Box::new(|t: &mut Tape<f64>, x: &[Var]| t.mul(x[0], x[1]).unwrap()))
    }));
    macro_rules! unary {
        ($name:expr, $gen:expr, |$t:ident, $x:ident| $body:expr) => {
            v.push(case($name, |rng| {
                let (r, c) = dims(rng);
                let a = $gen(rng, &[r, c]);
                (vec![a], Box::new(|$t: &mut Tape<f64>, xs: &[Var]| {
                    let $x = xs[0];
                    $body
                }))
            }));
        };
    }
    unary!("scale", normal, |t, x| t.scale(x, -1.7));
    unary!("offset", normal, |t, x| t.offset(x, 0.3));
    unary!("neg", normal, |t, x| t.neg(x));
    unary!("relu", away_from_zero, |t, x| t.relu(x));
    unary!("sigmoid", normal, |t, x| t.sigmoid(x));
    unary!("softplus", normal, |t, x| t.softplus(x));
    unary!("log", positive, |t, x| t.log(x));
    unary!("exp", normal, |t, x| t.exp(x));
    unary!("abs", away_from_zero, |t, x| t.abs(x));
    unary!("sqrt", positive, |t, x| t.sqrt(x));
    unary!("softmax_axis0", normal, |t, x| t.softmax(x, 0).unwrap());
    unary!("softmax_axis1", normal, |t, x| t.softmax(x, 1).unwrap());
    unary!("log_softmax", normal, |t, x| t.log_softmax(x).unwrap());
    unary!("l2_normalize", away_from_zero, |t, x| t.l2_normalize(x).unwrap());
    unary!("sum", normal, |t, x| t.sum(x));
    unary!("mean", normal, |t, x| t.mean(x));
    unary!("mean_rows", normal, |t, x| t.mean_rows(x).unwrap());
    unary!("sum_last", normal, |t, x| t.sum_last(x).unwrap());
    unary!("transpose", normal, |t, x| t.transpose(x).unwrap());
    v.push(case("reshape", |rng| {
        let (r, c) = dims(rng);
        let a = normal(rng, &[r, c]);
        (vec![a], Box::new(move |t: &mut Tape<f64>, x: &[Var]| t.reshape(x[0], [c, r]).unwrap()))
    }));
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        v.push(case(&format!("matmul_t{}{}", ta as u8, tb as u8), move |rng| {
            let (m, k) = dims(rng);
            let n = rng.gen_range(1..5);
            let a = normal(rng, &if ta { [k, m] } else { [m, k] });
            let b = normal(rng, &if tb { [n, k] } else { [k, n] });
            (vec![a, b], Box::new(move |t: &mut Tape<f64>, x: &[Var]| t.matmul_ex(x[0], x[1], ta, tb).unwrap()))
        }));
    }
    v.push(case("affine", |rng| {
        let (r, i) = dims(rng);
        let o = rng.gen_range(1..5);
        let (x, w, b) = (normal(rng, &[r, i]), normal(rng, &[i, o]), normal(rng, &[o]));
        (vec![x, w, b], Box::new(|t: &mut Tape<f64>, v: &[Var]| t.affine(v[0], v[1], Some(v[2])).unwrap()))
    }));
    v.push(case("affine_nobias", |rng| {
        let (r, i) = dims(rng);
        let o = rng.gen_range(1..5);
        let (x, w) = (normal(rng, &[r, i]), normal(rng, &[i, o]));
        (vec![x, w], Box::new(|t: &mut Tape<f64>, v: &[Var]| t.affine(v[0], v[1], None).unwrap()))
    }));
    v.push(case("layer_norm", |rng| {
        let r = rng.gen_range(1..4);
        let c = rng.gen_range(2..6);
        let (x, g, b) = (normal(rng, &[r, c]), normal(rng, &[c]), normal(rng, &[c]));
        (vec![x, g, b], Box::new(|t: &mut Tape<f64>, v: &[Var]| t.layer_norm(v[0], v[1], v[2]).unwrap()))
    }));
    v.push(case("batch_norm_1d", |rng| {
        let r = rng.gen_range(2..5);
        let c = rng.gen_range(1..5);
        let (x, g, b) = (normal(rng, &[r, c]), normal(rng, &[c]), normal(rng, &[c]));
        (vec![x, g, b], Box::new(|t: &mut Tape<f64>, v: &[Var]| t.batch_norm_1d(v[0], v[1], v[2]).unwrap()))
    }));
    v.push(case("cosine", |rng| {
        let (r, c) = dims(rng);
        let (a, b) = (away_from_zero(rng, &[r, c]), away_from_zero(rng, &[r, c]));
        (vec![a, b], Box::new(|t: &mut Tape<f64>, v: &[Var]| t.cosine(v[0], v[1]).unwrap()))
    }));
    v.push(case("concat", |rng| {
        let axis = rng.gen_range(0..2);
        let (r, c) = dims(rng);
        let a = normal(rng, &[r, c]);
        let b = if axis == 0 {
            { let k = rng.gen_range(1..4); normal(rng, &[k, c]) }
        } else {
            { let k = rng.gen_range(1..4); normal(rng, &[r, k]) }
        };
        (vec![a, b], Box::new(move |t: &mut Tape<f64>, v: &[Var]| t.concat(&[v[0], v[1]], axis).unwrap()))
    }));
    v.push(case("slice", |rng| {
        let r = rng.gen_range(2..5);
        let c = rng.gen_range(2..5);
        let axis = rng.gen_range(0..2);
        let n = if axis == 0 { r } else { c };
        let start = rng.gen_range(0..n - 1);
        let len = rng.gen_range(1..=n - start);
        let a = normal(rng, &[r, c]);
        (vec![a], Box::new(move |t: &mut Tape<f64>, v: &[Var]| t.slice(v[0], axis, start, len).unwrap()))
    }));
    v.push(case("gather_rows", |rng| {
        let (r, c) = dims(rng);
        let idx: Vec<usize> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(0..r)).collect();
        let a = normal(rng, &[r, c]);
        (vec![a], Box::new(move |t: &mut Tape<f64>, v: &[Var]| t.gather_rows(v[0], &idx).unwrap()))
    }));
    v.push(case("roi_align", |rng| {
        let (h, w, c) = (rng.gen_range(2..6), rng.gen_range(2..6), rng.gen_range(1..4));
        let boxes: Vec<BoxXYXY> = (0..rng.gen_range(1..4))
            .map(|_| {
                let x1: f32 = rng.gen_range(0.0..w as f32 - 1.0);
                let y1: f32 = rng.gen_range(0.0..h as f32 - 1.0);
                let x2 = rng.gen_range(x1 + 0.5..=w as f32);
                let y2 = rng.gen_range(y1 + 0.5..=h as f32);
                BoxXYXY::new(x1, y1, x2, y2).unwrap()
            })
            .collect();
        let f = normal(rng, &[h, w, c]);
        (vec![f], Box::new(move |t: &mut Tape<f64>, v: &[Var]| roi_align(t, v[0], &boxes, (2, 2)).unwrap()))
    }));
    v.push(case("giou_rows", |rng| {
        let n = rng.gen_range(1..5);
        let (a, b) = (cxcywh(rng, n), cxcywh(rng, n));
        (vec![a, b], Box::new(|t: &mut Tape<f64>, v: &[Var]| giou_rows(t, v[0], v[1]).unwrap()))
    }));
    v.push(case("box_loss", |rng| {
        let n = rng.gen_range(2..6);
        let m = rng.gen_range(1..=n);
        let pred = cxcywh(rng, n);
        let targets = cxcywh(rng, m);
        let a = assignment(rng, m, n);
        (vec![pred], Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
            box_loss(t, v[0], &targets, &a, BoxLossWeights::default()).unwrap()
        }))
    }));
    v.push(case("match_bce", |rng| {
        let n = rng.gen_range(2..6);
        let m = rng.gen_range(1..=n);
        let a = assignment(rng, m, n);
        let x = normal(rng, &[n, 1]);
        (vec![x], Box::new(move |t: &mut Tape<f64>, v: &[Var]| match_bce(t, v[0], &a).unwrap()))
    }));
    v.push(case("region_disc", |rng| {
        let n = rng.gen_range(2..6);
        let c = rng.gen_range(2..5);
        let m = rng.gen_range(1..=n);
        let a = assignment(rng, m, n);
        let targets = away_from_zero(rng, &[m, c]);
        let sem = away_from_zero(rng, &[n, c]);
        (vec![sem], Box::new(move |t: &mut Tape<f64>, v: &[Var]| region_disc(t, v[0], &targets, &a).unwrap()))
    }));
    v.push(case("global_disc", |rng| {
        let (b, c) = (rng.gen_range(1..4), rng.gen_range(2..5));
        let (x, y) = (away_from_zero(rng, &[b, c]), away_from_zero(rng, &[b, c]));
        // The target side is detached, so only the live side is perturbed.
        (vec![x], Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
            let target = t.leaf(y.clone(), true);
            global_disc(t, v[0], target).unwrap()
        }))
    }));
    v.push(case("set_loss", |rng| {
        let n = rng.gen_range(2..6);
        let k1 = rng.gen_range(2..5);
        let m = rng.gen_range(0..=n);
        let a = assignment(rng, m, n);
        let labels: Vec<usize> = (0..m).map(|_| rng.gen_range(0..k1 - 1)).collect();
        let targets = cxcywh(rng, m);
        let (logits, boxes) = (normal(rng, &[n, k1]), cxcywh(rng, n));
        (vec![logits, boxes], Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
            set_loss(t, v[0], v[1], &targets, &labels, &a, 0.1, BoxLossWeights::default()).unwrap()
        }))
    }));
    v.push(case("mha", |rng| {
        let heads = rng.gen_range(1..3);
        let c = 2 * heads;
        let (nq, l) = (rng.gen_range(1..4), rng.gen_range(1..5));
        let mut ins = vec![normal(rng, &[nq, c]), normal(rng, &[l, c]), normal(rng, &[l, c])];
        for _ in 0..4 {
            ins.push(normal(rng, &[c, c]));
            ins.push(normal(rng, &[c]));
        }
        (ins, Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
            let w = AttnParams {
                wq: v[3],
                bq: v[4],
                wk: v[5],
                bk: v[6],
                wv: v[7],
                bv: v[8],
                wo: v[9],
                bo: v[10],
            };
            mha(t, &w, heads, v[0], v[1], v[2], None).unwrap()
        }))
    }));
    v.push(case("positional_query_path", |rng| {
        let c = 4;
        let pos = positional_embedding::<f64>(2, 2, c);
        let x = normal(rng, &[4, c]);
        (vec![x], Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
            let p = t.constant(pos.clone());
            let s = t.add(v[0], p).unwrap();
            t.softmax(s, 1).unwrap()
        }))
    }));
    v
}

pub fn run_primitive_suite(seed: u64) -> Vec<GradReport> {
    primitive_cases()
        .into_iter()
        .enumerate()
        .map(|(ci, (name, gen))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((ci as u64 + 1) << 32));
            let mut worst: f64 = 0.0;
            for _ in 0..INSTANCES {
                let (inputs, f) = gen(&mut rng);
                worst = worst.max(check_instance(&inputs, f.as_ref(), &mut rng));
            }
            GradReport {
                name,
                instances: INSTANCES,
                worst,
                kinked: 0,
            }
        })
        .collect()
}

pub fn tiny_config() -> TransformerConfig {
    TransformerConfig {
        d_model: 8,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        ffn: 16,
        queries: 2,
        sem_dim: 4,
        backbone_dim: 4,
        classes: 2,
        projector: ProjectorKind::Mlp,
        pos_input: true,
    }
}

fn tiny_pair(rng: &mut ChaCha8Rng) -> PreparedPair {
    let f = |rng: &mut ChaCha8Rng, s: &[usize]| Tensor::from_fn(s.to_vec(), |_| rng.gen_range(0.0f32..1.0));
    let b = |rng: &mut ChaCha8Rng| {
        Tensor::from_fn([2, 4], |i| if i % 4 < 2 { rng.gen_range(0.3f32..0.7) } else { rng.gen_range(0.1f32..0.3) })
    };
    PreparedPair {
        grid: (4, 4),
        h: [f(rng, &[16, 4]), f(rng, &[16, 4])],
        z: [f(rng, &[2, 4]), f(rng, &[2, 4])],
        p: [f(rng, &[2, 4]), f(rng, &[2, 4])],
        b: [b(rng), b(rng)],
    }
}

fn f64_values(model: &Detr) -> Vec<Tensor<f64>> {
    model.params.iter().map(|(_, t)| t.cast::<f64>()).collect()
}

type Objective<'a> = dyn Fn(&mut Tape<f64>, &Bound) -> Var + 'a;

/// Loss and analytic gradient per parameter; `None` where the parameter
/// does not reach the loss.
fn loss_and_grads(model: &Detr, vals: &[Tensor<f64>], f: &Objective) -> (f64, Vec<Option<Vec<f64>>>) {
    let mut t = Tape::<f64>::new();
    let p = model.bind_values(&mut t, vals).unwrap();
    let loss = f(&mut t, &p);
    t.backward(loss).unwrap();
    let g = p.vars().iter().map(|&v| t.grad(v).map(<[f64]>::to_vec)).collect();
    (t.item(loss), g)
}

/// Central differences over every element of every parameter that reaches
/// `numeric`, against `analytic` (defaults to the gradient of `numeric`).
fn loss_only(model: &Detr, vals: &[Tensor<f64>], f: &Objective) -> f64 {
    let mut t = Tape::<f64>::new();
    let p = model.bind_values(&mut t, vals).unwrap();
    let loss = f(&mut t, &p);
    t.item(loss)
}

/// On a smooth loss the gap between the one-sided differences is second
/// order, so it shrinks tenfold with the step. Across a kink it does not.
fn smooth(right: f64, left: f64, right_fine: f64, left_fine: f64) -> bool {
    let coarse = (right - left) / STEP;
    let fine = (right_fine - left_fine) / (STEP / 10.0);
    let scale = (right / STEP).abs().max((left / STEP).abs()).max(1.0);
    coarse.abs() <= 1e-6 * scale || (coarse - 10.0 * fine).abs() <= 0.5 * coarse.abs()
}

/// Relative error of the analytic gradient over every reachable parameter,
/// or `None` when some stencil straddles a kink of the loss (a GIoU
/// min/max switch, an L1 sign change, a ReLU boundary), where there is no
/// derivative to check.
fn fd_over_params(model: &Detr, values: &[Tensor<f64>], numeric: &Objective, analytic: Option<&Objective>) -> Option<f64> {
    let (_, grads) = loss_and_grads(model, values, analytic.unwrap_or(numeric));
    let (f0, reach) = loss_and_grads(model, values, numeric);
    let mut a_all = Vec::new();
    let mut n_all = Vec::new();
    let mut vals = values.to_vec();
    for i in 0..vals.len() {
        if reach[i].is_none() {
            let stray = grads[i].as_ref().map_or(0.0, |g| g.iter().fold(0.0f64, |m, x| m.max(x.abs())));
            assert!(stray == 0.0, "gradient on a parameter the loss does not depend on");
            continue;
        }
        let g = grads[i].clone().unwrap_or_else(|| vec![0.0; vals[i].numel()]);
        for j in 0..vals[i].numel() {
            let x = vals[i].data()[j];
            vals[i].data_mut()[j] = x + STEP;
            let fp = loss_only(model, &vals, numeric);
            vals[i].data_mut()[j] = x - STEP;
            let fm = loss_only(model, &vals, numeric);
            vals[i].data_mut()[j] = x;
            let n = (fp - fm) / (2.0 * STEP);
            // Only a disagreeing coordinate is probed, but the verdict rests
            // on loss values alone, so a wrong gradient cannot be excused.
            if (g[j] - n).abs() > PROBE * g[j].abs().max(n.abs()).max(1.0) {
                let fine = STEP / 10.0;
                vals[i].data_mut()[j] = x + fine;
                let fp2 = loss_only(model, &vals, numeric);
                vals[i].data_mut()[j] = x - fine;
                let fm2 = loss_only(model, &vals, numeric);
                vals[i].data_mut()[j] = x;
                if !smooth(fp - f0, f0 - fm, fp2 - f0, f0 - fm2) {
                    return None;
                }
            }
            n_all.push(n);
            a_all.push(g[j]);
        }
    }
    Some(rel_error(&a_all, &n_all))
}

fn pooled_context(model: &Detr, t: &mut Tape<f64>, p: &Bound, pair: &PreparedPair, view: usize) -> Var {
    let h = t.constant(pair.h[view].cast::<f64>());
    let src = model.input_projection(t, p, h).unwrap();
    let pos = t.constant(positional_embedding::<f64>(pair.grid.0, pair.grid.1, model.cfg.d_model));
    let c = model.encode(t, p, src, pos).unwrap();
    t.mean_rows(c).unwrap()
}

fn stacked(model: &Detr, t: &mut Tape<f64>, p: &Bound, batch: &[PreparedPair], view: usize) -> Var {
    let rows: Vec<Var> = batch.iter().map(|pair| pooled_context(model, t, p, pair, view)).collect();
    let cat = t.concat(&rows, 0).unwrap();
    t.reshape(cat, [batch.len(), model.cfg.d_model]).unwrap()
}

/// End-to-end gradient checks of the tiny model, each over every parameter
/// the loss reaches:
/// - localization and region terms of the pretraining loss, matches fixed;
/// - the global term, whose pooled targets are detached: the finite
///   differences move only the live side, with the targets held at the
///   unperturbed parameters;
/// - the detection set loss through the plain decoder;
/// - the f32 training path against the f64 analytic gradient.
///
/// A draw whose stencil straddles a kink is replaced by the next one, so
/// every report covers `instances` differentiable points.
pub fn run_end_to_end(seed: u64, instances: usize) -> Vec<GradReport> {
    let mut worst = [0.0f64; 4];
    let (mut admitted, mut kinked, mut inst) = (0, 0, 0u64);
    while admitted < instances {
        inst += 1;
        let inst = inst - 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(inst));
        let model = Detr::new(tiny_config(), seed + inst).unwrap();
        let values = f64_values(&model);
        let pair = vec![tiny_pair(&mut rng)];
        let mut opts = PretrainOptions::default();
        opts.weights = LossWeights {
            lambda_r: 1.0,
            lambda_g: 0.0,
            lambda_loc: 1.0,
        };
        let fixed = {
            let mut t = Tape::<f64>::new();
            let p = model.bind_values(&mut t, &values).unwrap();
            pretrain_forward(&mut t, &model, &p, &pair, &opts, None).unwrap().matches
        };
        let local = |t: &mut Tape<f64>, p: &Bound| pretrain_forward(t, &model, p, &pair, &opts, Some(&fixed)).unwrap().total;
        let Some(local_err) = fd_over_params(&model, &values, &local, None) else {
            kinked += 1;
            continue;
        };

        let batch = vec![pair[0].clone(), tiny_pair(&mut rng)];
        let mut gopts = PretrainOptions::default();
        gopts.weights = LossWeights {
            lambda_r: 0.0,
            lambda_g: 1.0,
            lambda_loc: 0.0,
        };
        let frozen: [Tensor<f64>; 2] = {
            let mut t = Tape::<f64>::new();
            let p = model.bind_values(&mut t, &values).unwrap();
            [0, 1].map(|v| {
                let s = stacked(&model, &mut t, &p, &batch, v);
                t.value(s).clone()
            })
        };
        let global = |t: &mut Tape<f64>, p: &Bound| {
            pretrain_forward(t, &model, p, &batch, &gopts, None).unwrap().total
        };
        let surrogate = |t: &mut Tape<f64>, p: &Bound| {
            let live: Vec<Var> = [0, 1].iter().map(|&v| stacked(&model, t, p, &batch, v)).collect();
            let m1 = model.project(t, p, live[0]).unwrap();
            let m2 = model.project(t, p, live[1]).unwrap();
            let f2 = t.constant(frozen[1].clone());
            let f1 = t.constant(frozen[0].clone());
            let a = global_disc(t, m1, f2).unwrap();
            let b = global_disc(t, m2, f1).unwrap();
            t.add(a, b).unwrap()
        };
        let Some(global_err) = fd_over_params(&model, &values, &surrogate, Some(&global)) else {
            kinked += 1;
            continue;
        };

        let img = PreparedImage {
            grid: (4, 4),
            h: pair[0].h[0].clone(),
            boxes: pair[0].b[0].slice_rows(0, 1),
            labels: vec![rng.gen_range(0..2)],
            image_size: (32, 32),
        };
        let assign = assignment(&mut rng, 1, 2);
        let targets = img.boxes.cast::<f64>();
        let det = |t: &mut Tape<f64>, p: &Bound| {
            let (logits, boxes) = detect_forward(t, &model, p, &img, false).unwrap()[0];
            set_loss(t, logits, boxes, &targets, &img.labels, &assign, 0.1, BoxLossWeights::default()).unwrap()
        };
        let Some(det_err) = fd_over_params(&model, &values, &det, None) else {
            kinked += 1;
            continue;
        };

        let (_, g64) = loss_and_grads(&model, &values, &local);
        let mut t = Tape::<f32>::new();
        let p = model.bind(&mut t, |_| true);
        let out = pretrain_forward(&mut t, &model, &p, &pair, &opts, Some(&fixed)).unwrap();
        t.backward(out.total).unwrap();
        let mut a32 = Vec::new();
        let mut a64 = Vec::new();
        for ((&v, (_, x)), g) in p.vars().iter().zip(model.params.iter()).zip(&g64) {
            let zeros = vec![0.0; x.numel()];
            a32.extend(t.grad(v).map(|g| g.iter().map(|&y| y as f64).collect()).unwrap_or_else(|| zeros.clone()));
            a64.extend(g.clone().unwrap_or(zeros));
        }
        for (w, e) in worst.iter_mut().zip([local_err, global_err, det_err, rel_error(&a32, &a64)]) {
            *w = w.max(e);
        }
        admitted += 1;
    }
    ["tiny_model_local", "tiny_model_global", "tiny_model_detection", "tiny_model_f32_vs_f64"]
        .iter()
        .zip(worst)
        .map(|(name, worst)| GradReport {
            name: name.to_string(),
            instances,
            worst,
            kinked,
        })
        .collect()
}

trait SliceRows {
    fn slice_rows(&self, start: usize, len: usize) -> Tensor<f32>;
}

impl SliceRows for Tensor<f32> {
    fn slice_rows(&self, start: usize, len: usize) -> Tensor<f32> {
        let c = self.shape()[1];
        Tensor::new([len, c], self.data()[start * c..(start + len) * c].to_vec()).unwrap()
    }
}
