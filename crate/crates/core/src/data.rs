//! Synthetic detection data: flat colored shapes over textured backgrounds,
//! stored as binary PPM images plus a line-oriented manifest.
//!
//! Manifest layout: `#` lines are header/comments, then one block per image
//! separated by blank lines. Each line of a block is
//! `image_path x1 y1 x2 y2 label`; a line holding only a path marks an image
//! without objects. Paths are relative to the manifest's directory.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::geometry::{box_iou, BoxXYXY};
use crate::image::{Image, ImageError};
use crate::seed;

pub const CLASS_NAMES: [&str; 3] = ["circle", "square", "triangle"];
pub const NUM_CLASSES: usize = 3;
pub const MANIFEST_FILE: &str = "manifest.txt";
const MANIFEST_MAGIC: &str = "# sdetr-manifest v1";
const SUPERSAMPLE: usize = 4;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{file}:{line}: {msg}")]
    Parse {
        file: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{file}: {source}")]
    Image { file: PathBuf, source: ImageError },
    #[error("invalid scene spec: {0}")]
    Spec(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_side: usize,
    pub max_side: usize,
    /// Declutter bound on pairwise IoU between ground-truth boxes.
    pub max_pair_iou: f32,
    pub noise_amplitude: f32,
    pub noise_cell: usize,
    pub min_gradients: usize,
    pub max_gradients: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            min_objects: 1,
            max_objects: 4,
            min_side: 12,
            max_side: 48,
            max_pair_iou: 0.3,
            noise_amplitude: 0.05,
            noise_cell: 16,
            min_gradients: 2,
            max_gradients: 4,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let mut bad = Vec::new();
        if self.min_side < 8 {
            bad.push(format!("min_side {} < 8", self.min_side));
        }
        if self.max_side < self.min_side {
            bad.push("max_side < min_side".to_string());
        }
        if self.max_side > self.width.min(self.height) {
            bad.push(format!(
                "max_side {} exceeds image size {}x{}",
                self.max_side, self.width, self.height
            ));
        }
        if self.max_objects < self.min_objects {
            bad.push("max_objects < min_objects".to_string());
        }
        if self.max_gradients < self.min_gradients {
            bad.push("max_gradients < min_gradients".to_string());
        }
        if self.noise_cell == 0 {
            bad.push("noise_cell must be positive".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(DataError::Spec(bad.join("; ")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeObject {
    pub label: usize,
    pub bbox: BoxXYXY,
    pub color: [f32; 3],
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub image: Image,
    pub objects: Vec<ShapeObject>,
    /// Per pixel: 0 for background, otherwise 1 + index of the object that
    /// painted it (coverage at least one half, last writer wins).
    pub owner: Vec<u16>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub path: String,
    pub image: Image,
    pub boxes: Vec<BoxXYXY>,
    pub labels: Vec<usize>,
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as i32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn inside(label: usize, b: &BoxXYXY, px: f32, py: f32) -> bool {
    let s = b.width();
    match label {
        0 => {
            let (cx, cy) = b.center();
            let r = s / 2.0;
            (px - cx).powi(2) + (py - cy).powi(2) <= r * r
        }
        1 => px >= b.x1 && px <= b.x2 && py >= b.y1 && py <= b.y2,
        _ => {
            let cx = b.x1 + s / 2.0;
            py >= b.y1 && py <= b.y2 && (px - cx).abs() <= (py - b.y1) / 2.0
        }
    }
}

/// Renders image `index` of the scene family described by `spec`.
pub fn render_scene(spec: &SceneSpec, index: u64) -> Scene {
    let mut rng = seed::stream(spec.seed, &[index]);
    let (w, h) = (spec.width, spec.height);

    let base = hsv(rng.gen(), rng.gen_range(0.0..0.3), rng.gen_range(0.35..0.65));
    let mut px = vec![0f32; 3 * w * h];
    for p in px.chunks_exact_mut(3) {
        p.copy_from_slice(&base);
    }

    let n_grad = rng.gen_range(spec.min_gradients..=spec.max_gradients);
    for _ in 0..n_grad {
        let theta: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
        let color = hsv(rng.gen(), rng.gen_range(0.2..0.6), rng.gen_range(0.3..0.9));
        let strength: f32 = rng.gen_range(0.15..0.35);
        let (dx, dy) = (theta.cos(), theta.sin());
        let span = dx.abs() * w as f32 + dy.abs() * h as f32;
        let off = dx.min(0.0) * w as f32 + dy.min(0.0) * h as f32;
        for y in 0..h {
            for x in 0..w {
                let t = ((x as f32 + 0.5) * dx + (y as f32 + 0.5) * dy - off) / span;
                let a = strength * t;
                let o = 3 * (y * w + x);
                for c in 0..3 {
                    px[o + c] = px[o + c] * (1.0 - a) + color[c] * a;
                }
            }
        }
    }

    let target = rng.gen_range(spec.min_objects..=spec.max_objects);
    let mut objects: Vec<ShapeObject> = Vec::new();
    for _ in 0..target {
        for _attempt in 0..100 {
            let label = rng.gen_range(0..NUM_CLASSES);
            let s = rng.gen_range(spec.min_side..=spec.max_side);
            let x = rng.gen_range(0..=w - s) as f32;
            let y = rng.gen_range(0..=h - s) as f32;
            let color = hsv(rng.gen(), rng.gen_range(0.65..1.0), rng.gen_range(0.6..1.0));
            let bbox = BoxXYXY::from_corners(x, y, x + s as f32, y + s as f32);
            // overlap is also bounded relative to the smaller box so that no
            // object ends up hidden under a larger one
            let clear = objects.iter().all(|o| {
                let inter = o.bbox.intersection(&bbox).map_or(0.0, |b| b.area());
                box_iou(&o.bbox, &bbox) <= spec.max_pair_iou
                    && inter <= spec.max_pair_iou * o.bbox.area().min(bbox.area())
            });
            if clear {
                objects.push(ShapeObject { label, bbox, color });
                break;
            }
        }
    }

    let mut owner = vec![0u16; w * h];
    let step = 1.0 / SUPERSAMPLE as f32;
    for (k, o) in objects.iter().enumerate() {
        let (x0, y0) = (o.bbox.x1 as usize, o.bbox.y1 as usize);
        let (x1, y1) = (o.bbox.x2 as usize, o.bbox.y2 as usize);
        for y in y0..y1.min(h) {
            for x in x0..x1.min(w) {
                let mut hits = 0usize;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let qx = x as f32 + (sx as f32 + 0.5) * step;
                        let qy = y as f32 + (sy as f32 + 0.5) * step;
                        hits += inside(o.label, &o.bbox, qx, qy) as usize;
                    }
                }
                if hits == 0 {
                    continue;
                }
                let cov = hits as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
                let i = 3 * (y * w + x);
                for c in 0..3 {
                    px[i + c] = px[i + c] * (1.0 - cov) + o.color[c] * cov;
                }
                if cov >= 0.5 {
                    owner[y * w + x] = k as u16 + 1;
                }
            }
        }
    }

    // value noise: random lattice, bilinear in between
    let cell = spec.noise_cell as f32;
    let gw = w / spec.noise_cell + 2;
    let gh = h / spec.noise_cell + 2;
    let lattice: Vec<f32> = (0..gw * gh).map(|_| rng.gen_range(-1.0..1.0)).collect();
    for y in 0..h {
        let fy = y as f32 / cell;
        let (iy, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..w {
            let fx = x as f32 / cell;
            let (ix, tx) = (fx.floor() as usize, fx.fract());
            let l = |a: usize, b: usize| lattice[b * gw + a];
            let top = l(ix, iy) * (1.0 - tx) + l(ix + 1, iy) * tx;
            let bot = l(ix, iy + 1) * (1.0 - tx) + l(ix + 1, iy + 1) * tx;
            let n = spec.noise_amplitude * (top * (1.0 - ty) + bot * ty);
            let i = 3 * (y * w + x);
            for c in 0..3 {
                px[i + c] = (px[i + c] + n).clamp(0.0, 1.0);
            }
        }
    }

    let image = Image::new(w, h, px)
        .expect("renderer keeps pixels in range")
        .quantized();
    Scene {
        image,
        objects,
        owner,
    }
}

fn image_rel_path(index: usize) -> String {
    format!("images/{index:06}.ppm")
}

fn scene_sample(spec: &SceneSpec, index: usize) -> Sample {
    let scene = render_scene(spec, index as u64);
    Sample {
        path: image_rel_path(index),
        image: scene.image,
        boxes: scene.objects.iter().map(|o| o.bbox).collect(),
        labels: scene.objects.iter().map(|o| o.label).collect(),
    }
}

/// In-memory equivalent of `generate_dataset` followed by `load_dataset`.
pub fn generate_samples(count: usize, spec: &SceneSpec) -> Result<Vec<Sample>, DataError> {
    spec.validate()?;
    Ok((0..count).map(|i| scene_sample(spec, i)).collect())
}

fn manifest_text(spec: &SceneSpec, samples: &[Sample]) -> String {
    let mut out = format!(
        "{MANIFEST_MAGIC}\n# images={} width={} height={} seed={}\n",
        samples.len(),
        spec.width,
        spec.height,
        spec.seed
    );
    for s in samples {
        out.push('\n');
        if s.boxes.is_empty() {
            out.push_str(&s.path);
            out.push('\n');
        }
        for (b, l) in s.boxes.iter().zip(&s.labels) {
            out.push_str(&format!(
                "{} {} {} {} {} {}\n",
                s.path, b.x1, b.y1, b.x2, b.y2, l
            ));
        }
    }
    out
}

/// Writes `count` images and `manifest.txt` under `out_dir`. On failure any
/// files written by this call are removed.
pub fn generate_dataset(count: usize, spec: &SceneSpec, out_dir: &Path) -> Result<PathBuf, DataError> {
    spec.validate()?;
    let img_dir = out_dir.join("images");
    fs::create_dir_all(&img_dir).map_err(io_err(&img_dir))?;
    let mut written: Vec<PathBuf> = Vec::new();
    let result = (|| {
        let mut samples = Vec::with_capacity(count);
        for i in 0..count {
            let s = scene_sample(spec, i);
            let p = out_dir.join(&s.path);
            fs::write(&p, s.image.to_ppm()).map_err(io_err(&p))?;
            written.push(p);
            samples.push(s);
        }
        let manifest = out_dir.join(MANIFEST_FILE);
        let tmp = out_dir.join(format!("{MANIFEST_FILE}.tmp"));
        fs::write(&tmp, manifest_text(spec, &samples)).map_err(io_err(&tmp))?;
        written.push(tmp.clone());
        fs::rename(&tmp, &manifest).map_err(io_err(&manifest))?;
        Ok(manifest)
    })();
    if result.is_err() {
        for p in &written {
            let _ = fs::remove_file(p);
        }
    }
    result
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub path: String,
    pub boxes: Vec<BoxXYXY>,
    pub labels: Vec<usize>,
}

/// Parses a manifest without touching the image files.
pub fn read_manifest(path: &Path) -> Result<Vec<Record>, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let perr = |line: usize, msg: String| DataError::Parse {
        file: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim_end() == MANIFEST_MAGIC => {}
        _ => return Err(perr(1, format!("expected header `{MANIFEST_MAGIC}`"))),
    }
    let mut records: Vec<Record> = Vec::new();
    let mut current: Option<Record> = None;
    for (i, raw) in lines {
        let lineno = i + 1;
        let line = raw.trim();
        if line.starts_with('#') {
            continue;
        }
        if line.is_empty() {
            records.extend(current.take());
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let rec = current.get_or_insert_with(|| Record {
            path: fields[0].to_string(),
            boxes: Vec::new(),
            labels: Vec::new(),
        });
        if rec.path != fields[0] {
            return Err(perr(
                lineno,
                format!("path `{}` inside block for `{}`", fields[0], rec.path),
            ));
        }
        match fields.len() {
            1 => {}
            6 => {
                let mut v = [0f32; 4];
                for (k, f) in fields[1..5].iter().enumerate() {
                    v[k] = f
                        .parse()
                        .map_err(|_| perr(lineno, format!("bad coordinate `{f}`")))?;
                }
                let label: usize = fields[5]
                    .parse()
                    .map_err(|_| perr(lineno, format!("bad label `{}`", fields[5])))?;
                if label >= NUM_CLASSES {
                    return Err(perr(lineno, format!("label {label} out of range")));
                }
                let b = BoxXYXY::new(v[0], v[1], v[2], v[3])
                    .map_err(|e| perr(lineno, e.to_string()))?;
                rec.boxes.push(b);
                rec.labels.push(label);
            }
            n => {
                return Err(perr(
                    lineno,
                    format!("expected `path x1 y1 x2 y2 label`, got {n} fields"),
                ))
            }
        }
    }
    records.extend(current);
    Ok(records)
}

pub fn load_dataset(manifest: &Path) -> Result<Vec<Sample>, DataError> {
    let root = manifest.parent().unwrap_or(Path::new("."));
    read_manifest(manifest)?
        .into_iter()
        .map(|r| {
            let p = root.join(&r.path);
            let bytes = fs::read(&p).map_err(io_err(&p))?;
            let image = Image::from_ppm(&bytes).map_err(|source| DataError::Image {
                file: p.clone(),
                source,
            })?;
            Ok(Sample {
                path: r.path,
                image,
                boxes: r.boxes,
                labels: r.labels,
            })
        })
        .collect()
}

/// Seeded permutation of `0..n`.
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::stream(seed, &[0x5348_5546]));
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SceneSpec {
        SceneSpec {
            width: 64,
            height: 64,
            max_side: 32,
            seed: 11,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn scenes_obey_spec_invariants() {
        let spec = small();
        for i in 0..50 {
            let s = render_scene(&spec, i);
            assert!(!s.objects.is_empty());
            for (a, o) in s.objects.iter().enumerate() {
                assert!(o.bbox.width() >= 8.0 && o.bbox.height() >= 8.0);
                assert!(o.bbox.x1 >= 0.0 && o.bbox.x2 <= 64.0);
                assert!(o.bbox.y1 >= 0.0 && o.bbox.y2 <= 64.0);
                for b in &s.objects[a + 1..] {
                    assert!(box_iou(&o.bbox, &b.bbox) <= 0.3);
                }
            }
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let spec = small();
        assert_eq!(render_scene(&spec, 3).image, render_scene(&spec, 3).image);
        assert_ne!(render_scene(&spec, 3).image, render_scene(&spec, 4).image);
    }

    #[test]
    fn spec_validation_lists_problems() {
        let spec = SceneSpec {
            min_side: 4,
            max_objects: 0,
            ..SceneSpec::default()
        };
        let msg = spec.validate().unwrap_err().to_string();
        assert!(msg.contains("min_side") && msg.contains("max_objects"));
    }

    #[test]
    fn shuffle_is_reproducible() {
        assert_eq!(shuffled_indices(20, 5), shuffled_indices(20, 5));
        assert_ne!(shuffled_indices(20, 5), shuffled_indices(20, 6));
    }
}
