//! DETR-style encoder/decoder with multi-view cross-attention, prediction
//! heads and the global-context projector.
//!
//! Parameters live in a [`ParamSet`] keyed by stable dotted names; a forward
//! pass first binds them onto a tape (in `f32` for training or `f64` for
//! gradient checks) and then threads the resulting [`Var`]s through the
//! layers. Layers are post-norm and dropout-free.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::seed;
use crate::tensor::{Real, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid transformer config: {0}")]
    Config(String),
    #[error("unknown parameter `{0}`")]
    MissingParam(String),
    #[error("parameter `{name}` has shape {got:?}, expected {want:?}")]
    ParamShape {
        name: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
    #[error("region features have {got} rows but the model has {queries} queries")]
    QueryMismatch { got: usize, queries: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProjectorKind {
    /// FC-BN-ReLU, FC-BN-ReLU, FC.
    Mlp,
    /// Pass-through; the pooled context is used directly.
    Identity,
}

impl std::str::FromStr for ProjectorKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mlp" => Ok(Self::Mlp),
            "identity" => Ok(Self::Identity),
            _ => Err(format!("unknown projector `{s}` (mlp|identity)")),
        }
    }
}

impl std::fmt::Display for ProjectorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Mlp => "mlp",
            Self::Identity => "identity",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn: usize,
    pub queries: usize,
    /// Output width of the semantic head; equals the backbone channels.
    pub sem_dim: usize,
    pub backbone_dim: usize,
    /// Foreground classes of the downstream task.
    pub classes: usize,
    pub projector: ProjectorKind,
    /// Also add the positional embedding to the encoder input, so the
    /// context values carry absolute position and not only the attention
    /// weights.
    pub pos_input: bool,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TransformerConfig {
    pub fn desk() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            ffn: 128,
            queries: 10,
            sem_dim: 64,
            backbone_dim: 64,
            classes: 3,
            projector: ProjectorKind::Mlp,
            pos_input: true,
        }
    }

    /// The full-size layout (256 wide, 8 heads, 6+6 layers, 100 queries).
    pub fn full_size(backbone_dim: usize) -> Self {
        Self {
            d_model: 256,
            heads: 8,
            enc_layers: 6,
            dec_layers: 6,
            ffn: 2048,
            queries: 100,
            sem_dim: backbone_dim,
            backbone_dim,
            classes: 80,
            projector: ProjectorKind::Mlp,
            pos_input: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.heads == 0 || self.d_model % self.heads != 0 {
            bad.push(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.d_model % 2 != 0 {
            bad.push(format!("d_model {} must be even for the sine embedding", self.d_model));
        }
        if self.queries == 0 {
            bad.push("queries must be >= 1".into());
        }
        if self.sem_dim != self.backbone_dim {
            bad.push(format!(
                "sem_dim {} must equal backbone_dim {}",
                self.sem_dim, self.backbone_dim
            ));
        }
        if self.ffn == 0 || self.classes == 0 {
            bad.push("ffn and classes must be positive".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(ModelError::Config(bad.join("; ")))
        }
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.values[i] = value,
            None => {
                self.index.insert(name.clone(), self.names.len());
                self.names.push(name);
                self.values.push(value);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(move |i| &mut self.values[i])
    }

    pub fn value(&self, i: usize) -> &Tensor {
        &self.values[i]
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.values[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }
}

/// Parameter groups used to select what a training phase updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    /// Input projection, encoder, decoder and object queries.
    Transformer,
    /// Box regression and classification heads used downstream.
    DetectionHead,
    /// Heads only used while pretraining (z projection, semantic, match,
    /// projector).
    PretrainHead,
}

pub fn param_group(name: &str) -> ParamGroup {
    if name.starts_with("heads.box.") || name.starts_with("heads.class.") {
        ParamGroup::DetectionHead
    } else if name.starts_with("z_proj.")
        || name.starts_with("heads.")
        || name.starts_with("projector.")
    {
        ParamGroup::PretrainHead
    } else {
        ParamGroup::Transformer
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Xavier,
    Zeros,
    Ones,
    Normal,
}

/// Parameters bound onto one tape.
pub struct Bound<'m> {
    params: &'m ParamSet,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.params
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    /// Vars in parameter order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Decoder outputs: one `N × C` query matrix per layer (after the final
/// decoder norm), plus optionally captured cross-attention maps of the last
/// layer (`N × L` per head).
pub struct Decoded {
    pub layers: Vec<Var>,
    pub cross_attention: Vec<Tensor<f64>>,
}

impl Decoded {
    pub fn last(&self) -> Var {
        *self.layers.last().expect("decoder has at least one output")
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Predictions {
    /// `N × 4` normalized cxcywh in `(0, 1)`.
    pub boxes: Var,
    /// `N × C'`.
    pub sem: Var,
    /// `N × 1` logits of the binary match head.
    pub match_logits: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detr {
    pub cfg: TransformerConfig,
    pub params: ParamSet,
    pub seed: u64,
}

impl Detr {
    /// Builds and initializes every parameter. Each tensor draws from its
    /// own stream keyed by (seed, name), so a given parameter's initial value
    /// does not depend on the rest of the layout.
    pub fn new(cfg: TransformerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        for (name, shape, init) in layout(&cfg) {
            params.insert(name.clone(), init_tensor(seed, &name, &shape, init));
        }
        Ok(Self { cfg, params, seed })
    }

    /// Expected name, shape pairs for this config.
    pub fn expected_shapes(&self) -> Vec<(String, Vec<usize>)> {
        layout(&self.cfg)
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect()
    }

    /// Copies every parameter present in `src` with a matching shape;
    /// returns the names that were copied.
    pub fn load_matching(&mut self, src: &ParamSet, filter: impl Fn(&str) -> bool) -> Result<Vec<String>> {
        let mut copied = Vec::new();
        for (name, value) in src.iter() {
            if !filter(name) {
                continue;
            }
            if let Some(dst) = self.params.get_mut(name) {
                if dst.shape() != value.shape() {
                    return Err(ModelError::ParamShape {
                        name: name.to_string(),
                        got: value.shape().to_vec(),
                        want: dst.shape().to_vec(),
                    });
                }
                *dst = value.clone();
                copied.push(name.to_string());
            }
        }
        Ok(copied)
    }

    /// Places every parameter on the tape; `trainable` decides which ones
    /// collect gradients.
    pub fn bind<'m, T: Real>(&'m self, tape: &mut Tape<T>, trainable: impl Fn(&str) -> bool) -> Bound<'m> {
        let vars = self
            .params
            .iter()
            .map(|(name, v)| tape.leaf(v.cast::<T>(), trainable(name)))
            .collect();
        Bound {
            params: &self.params,
            vars,
        }
    }

    /// Like `bind`, but with caller-supplied values (one per parameter, in
    /// parameter order), all collecting gradients. Used to evaluate the
    /// model at perturbed or higher-precision weights.
    pub fn bind_values<'m, T: Real>(&'m self, tape: &mut Tape<T>, values: &[Tensor<T>]) -> Result<Bound<'m>> {
        if values.len() != self.params.len() {
            return Err(ModelError::Config(format!(
                "{} values for {} parameters",
                values.len(),
                self.params.len()
            )));
        }
        let mut vars = Vec::with_capacity(values.len());
        for ((name, p), v) in self.params.iter().zip(values) {
            if p.shape() != v.shape() {
                return Err(ModelError::ParamShape {
                    name: name.to_string(),
                    got: v.shape().to_vec(),
                    want: p.shape().to_vec(),
                });
            }
            vars.push(tape.leaf(v.clone(), true));
        }
        Ok(Bound {
            params: &self.params,
            vars,
        })
    }

    /// Maps flattened backbone features (`HW × C_b`) to the model width.
    pub fn input_projection<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, h: Var) -> Result<Var> {
        Ok(tape.affine(h, p.var("input_proj.weight")?, Some(p.var("input_proj.bias")?))?)
    }

    pub fn encode<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, src: Var, pos: Var) -> Result<Var> {
        let mut x = if self.cfg.pos_input { tape.add(src, pos)? } else { src };
        for l in 0..self.cfg.enc_layers {
            let pre = format!("encoder.layer{l}");
            let qk = tape.add(x, pos)?;
            let sa = mha(tape, &attn_params(p, &format!("{pre}.self"))?, self.cfg.heads, qk, qk, x, None)?;
            let r = tape.add(x, sa)?;
            x = norm(tape, p, &format!("{pre}.norm1"), r)?;
            let f = ffn(tape, p, &format!("{pre}.ffn"), x)?;
            let r = tape.add(x, f)?;
            x = norm(tape, p, &format!("{pre}.norm2"), r)?;
        }
        Ok(x)
    }

    /// Decoder pass over `memory` (`L × C`). When `z` (`N × C_b`) is given
    /// its projection is added to the cross-attention queries; without it
    /// the pass is the plain detection decoder.
    pub fn decode<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        memory: Var,
        pos: Var,
        z: Option<Var>,
        capture_attention: bool,
    ) -> Result<Decoded> {
        let n = self.cfg.queries;
        let c = self.cfg.d_model;
        let query = p.var("query_embed")?;
        let zq = match z {
            Some(z) => {
                let rows = tape.shape(z)[0];
                if rows != n {
                    return Err(ModelError::QueryMismatch { got: rows, queries: n });
                }
                let zp = tape.affine(z, p.var("z_proj.weight")?, None)?;
                Some(tape.add(query, zp)?)
            }
            None => None,
        };
        let mut tgt = tape.constant(Tensor::zeros([n, c]));
        let kpos = tape.add(memory, pos)?;
        let mut layers = Vec::with_capacity(self.cfg.dec_layers);
        let mut cross_attention = Vec::new();
        for l in 0..self.cfg.dec_layers {
            let pre = format!("decoder.layer{l}");
            let qk = tape.add(tgt, query)?;
            let sa = mha(tape, &attn_params(p, &format!("{pre}.self"))?, self.cfg.heads, qk, qk, tgt, None)?;
            let r = tape.add(tgt, sa)?;
            tgt = norm(tape, p, &format!("{pre}.norm1"), r)?;

            let q = tape.add(tgt, zq.unwrap_or(query))?;
            let keep = capture_attention && l + 1 == self.cfg.dec_layers;
            let mut maps = Vec::new();
            let ca = mha(
                tape,
                &attn_params(p, &format!("{pre}.cross"))?,
                self.cfg.heads,
                q,
                kpos,
                memory,
                keep.then_some(&mut maps),
            )?;
            if keep {
                cross_attention = maps;
            }
            let r = tape.add(tgt, ca)?;
            tgt = norm(tape, p, &format!("{pre}.norm2"), r)?;
            let f = ffn(tape, p, &format!("{pre}.ffn"), tgt)?;
            let r = tape.add(tgt, f)?;
            tgt = norm(tape, p, &format!("{pre}.norm3"), r)?;
            layers.push(norm(tape, p, "decoder.norm", tgt)?);
        }
        if layers.is_empty() {
            layers.push(norm(tape, p, "decoder.norm", tgt)?);
        }
        Ok(Decoded {
            layers,
            cross_attention,
        })
    }

    pub fn predict<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, q: Var) -> Result<Predictions> {
        let boxes = self.box_head(tape, p, q)?;
        let sem = tape.affine(q, p.var("heads.sem.weight")?, Some(p.var("heads.sem.bias")?))?;
        let match_logits =
            tape.affine(q, p.var("heads.match.weight")?, Some(p.var("heads.match.bias")?))?;
        Ok(Predictions {
            boxes,
            sem,
            match_logits,
        })
    }

    pub fn box_head<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, q: Var) -> Result<Var> {
        let mut x = q;
        for i in 0..3 {
            let pre = format!("heads.box.fc{i}");
            x = tape.affine(x, p.var(&format!("{pre}.weight"))?, Some(p.var(&format!("{pre}.bias"))?))?;
            if i < 2 {
                x = tape.relu(x);
            }
        }
        Ok(tape.sigmoid(x))
    }

    /// `N × (K + 1)` class logits; the last column is "no object".
    pub fn classify<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, q: Var) -> Result<Var> {
        Ok(tape.affine(q, p.var("heads.class.weight")?, Some(p.var("heads.class.bias")?))?)
    }

    /// Projector over pooled contexts, one row per batch item (`B × C`).
    pub fn project<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, pooled: Var) -> Result<Var> {
        if self.cfg.projector == ProjectorKind::Identity {
            return Ok(pooled);
        }
        let mut x = pooled;
        for i in 0..3 {
            let pre = format!("projector.fc{i}");
            x = tape.affine(x, p.var(&format!("{pre}.weight"))?, Some(p.var(&format!("{pre}.bias"))?))?;
            if i < 2 {
                let bn = format!("projector.bn{i}");
                x = tape.batch_norm_1d(x, p.var(&format!("{bn}.gamma"))?, p.var(&format!("{bn}.beta"))?)?;
                x = tape.relu(x);
            }
        }
        Ok(x)
    }
}

fn norm<T: Real>(tape: &mut Tape<T>, p: &Bound, pre: &str, x: Var) -> Result<Var> {
    Ok(tape.layer_norm(x, p.var(&format!("{pre}.gamma"))?, p.var(&format!("{pre}.beta"))?)?)
}

fn ffn<T: Real>(tape: &mut Tape<T>, p: &Bound, pre: &str, x: Var) -> Result<Var> {
    let h = tape.affine(x, p.var(&format!("{pre}.fc1.weight"))?, Some(p.var(&format!("{pre}.fc1.bias"))?))?;
    let h = tape.relu(h);
    Ok(tape.affine(h, p.var(&format!("{pre}.fc2.weight"))?, Some(p.var(&format!("{pre}.fc2.bias"))?))?)
}

/// Projection weights of one attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttnParams {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

fn attn_params(p: &Bound, pre: &str) -> Result<AttnParams> {
    let g = |s: &str| p.var(&format!("{pre}.{s}"));
    Ok(AttnParams {
        wq: g("f_q.weight")?,
        bq: g("f_q.bias")?,
        wk: g("f_k.weight")?,
        bk: g("f_k.bias")?,
        wv: g("f_v.weight")?,
        bv: g("f_v.bias")?,
        wo: g("f_o.weight")?,
        bo: g("f_o.bias")?,
    })
}

/// Multi-head scaled dot-product attention. `q` is `N_q × C`, `k` and `v`
/// are `L × C`. When `capture` is given, each head's `N_q × L` weight matrix
/// is appended to it.
pub fn mha<T: Real>(
    tape: &mut Tape<T>,
    w: &AttnParams,
    heads: usize,
    q: Var,
    k: Var,
    v: Var,
    mut capture: Option<&mut Vec<Tensor<f64>>>,
) -> Result<Var> {
    let c = tape.shape(q).last().copied().unwrap_or(0);
    if heads == 0 || c % heads != 0 {
        return Err(ModelError::Config(format!("width {c} not divisible by {heads} heads")));
    }
    if tape.shape(k) != tape.shape(v) {
        return Err(TensorError::ShapeMismatch {
            op: "mha.kv",
            lhs: tape.shape(k).to_vec(),
            rhs: tape.shape(v).to_vec(),
        }
        .into());
    }
    let qp = tape.affine(q, w.wq, Some(w.bq))?;
    let kp = tape.affine(k, w.wk, Some(w.bk))?;
    let vp = tape.affine(v, w.wv, Some(w.bv))?;
    let dk = c / heads;
    let scale = T::lit(1.0 / (dk as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (qp, kp, vp)
        } else {
            (
                tape.slice(qp, 1, h * dk, dk)?,
                tape.slice(kp, 1, h * dk, dk)?,
                tape.slice(vp, 1, h * dk, dk)?,
            )
        };
        let s = tape.matmul_nt(qh, kh)?;
        let s = tape.scale(s, scale);
        let a = tape.softmax(s, 1)?;
        if let Some(cap) = capture.as_deref_mut() {
            cap.push(tape.value(a).cast::<f64>());
        }
        outs.push(tape.matmul(a, vh)?);
    }
    let o = if heads == 1 { outs[0] } else { tape.concat(&outs, 1)? };
    Ok(tape.affine(o, w.wo, Some(w.bo))?)
}

/// Fixed 2-D sine embedding, `H·W × C` in row-major position order. The
/// first `C/2` channels encode the row, the rest the column; within each
/// half, even channels are sines and odd channels cosines, frequencies set
/// by temperature 10000 over normalized coordinates in `(0, 2π]`.
pub fn positional_embedding<T: Real>(h: usize, w: usize, c: usize) -> Tensor<T> {
    let half = c / 2;
    let two_pi = std::f64::consts::TAU;
    let freq: Vec<f64> = (0..half)
        .map(|i| 10000f64.powf(2.0 * (i / 2) as f64 / half as f64))
        .collect();
    let mut data = Vec::with_capacity(h * w * c);
    for y in 0..h {
        let ey = (y + 1) as f64 / (h as f64 + 1e-6) * two_pi;
        for x in 0..w {
            let ex = (x + 1) as f64 / (w as f64 + 1e-6) * two_pi;
            for (e, _) in [(ey, 0), (ex, 1)] {
                for (i, f) in freq.iter().enumerate() {
                    let a = e / f;
                    data.push(T::lit(if i % 2 == 0 { a.sin() } else { a.cos() }));
                }
            }
            for _ in 2 * half..c {
                data.push(T::zero());
            }
        }
    }
    Tensor::new([h * w, c], data).expect("embedding shape")
}

fn linear(out: &mut Vec<(String, Vec<usize>, Init)>, name: &str, i: usize, o: usize, bias: bool) {
    out.push((format!("{name}.weight"), vec![i, o], Init::Xavier));
    if bias {
        out.push((format!("{name}.bias"), vec![o], Init::Zeros));
    }
}

fn norm_params(out: &mut Vec<(String, Vec<usize>, Init)>, name: &str, d: usize) {
    out.push((format!("{name}.gamma"), vec![d], Init::Ones));
    out.push((format!("{name}.beta"), vec![d], Init::Zeros));
}

fn attention_layout(out: &mut Vec<(String, Vec<usize>, Init)>, pre: &str, c: usize) {
    for f in ["f_q", "f_k", "f_v", "f_o"] {
        linear(out, &format!("{pre}.{f}"), c, c, true);
    }
}

fn layout(cfg: &TransformerConfig) -> Vec<(String, Vec<usize>, Init)> {
    let c = cfg.d_model;
    let mut out = Vec::new();
    linear(&mut out, "input_proj", cfg.backbone_dim, c, true);
    for l in 0..cfg.enc_layers {
        let pre = format!("encoder.layer{l}");
        attention_layout(&mut out, &format!("{pre}.self"), c);
        norm_params(&mut out, &format!("{pre}.norm1"), c);
        linear(&mut out, &format!("{pre}.ffn.fc1"), c, cfg.ffn, true);
        linear(&mut out, &format!("{pre}.ffn.fc2"), cfg.ffn, c, true);
        norm_params(&mut out, &format!("{pre}.norm2"), c);
    }
    for l in 0..cfg.dec_layers {
        let pre = format!("decoder.layer{l}");
        attention_layout(&mut out, &format!("{pre}.self"), c);
        norm_params(&mut out, &format!("{pre}.norm1"), c);
        attention_layout(&mut out, &format!("{pre}.cross"), c);
        norm_params(&mut out, &format!("{pre}.norm2"), c);
        linear(&mut out, &format!("{pre}.ffn.fc1"), c, cfg.ffn, true);
        linear(&mut out, &format!("{pre}.ffn.fc2"), cfg.ffn, c, true);
        norm_params(&mut out, &format!("{pre}.norm3"), c);
    }
    norm_params(&mut out, "decoder.norm", c);
    out.push(("query_embed".into(), vec![cfg.queries, c], Init::Normal));
    linear(&mut out, "z_proj", cfg.backbone_dim, c, false);
    linear(&mut out, "heads.box.fc0", c, c, true);
    linear(&mut out, "heads.box.fc1", c, c, true);
    linear(&mut out, "heads.box.fc2", c, 4, true);
    linear(&mut out, "heads.sem", c, cfg.sem_dim, true);
    linear(&mut out, "heads.match", c, 1, true);
    linear(&mut out, "heads.class", c, cfg.classes + 1, true);
    linear(&mut out, "projector.fc0", c, c, true);
    norm_params(&mut out, "projector.bn0", c);
    linear(&mut out, "projector.fc1", c, c, true);
    norm_params(&mut out, "projector.bn1", c);
    linear(&mut out, "projector.fc2", c, c, true);
    out
}

fn init_tensor(seed: u64, name: &str, shape: &[usize], init: Init) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = match init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Normal => {
            let mut rng = seed::stream(seed, &[seed::name_hash(name)]);
            (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
        }
        Init::Xavier => {
            let mut rng = seed::stream(seed, &[seed::name_hash(name)]);
            let bound = (6.0 / (shape[0] + shape[1]) as f32).sqrt();
            (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
        }
    };
    Tensor::new(shape.to_vec(), data).expect("layout shape")
}
