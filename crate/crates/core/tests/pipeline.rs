use std::fs;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdetr_core::data::{
    generate_dataset, generate_samples, load_dataset, read_manifest, render_scene, DataError,
    SceneSpec,
};
use sdetr_core::geometry::{box_iou, BoxXYXY};
use sdetr_core::image::Image;
use sdetr_core::views::{
    build_view_pair, generate_proposals, sample_base_rect, ProposalMode, ViewConfig,
};

fn small_spec(seed: u64) -> SceneSpec {
    SceneSpec {
        width: 64,
        height: 64,
        max_side: 32,
        seed,
        ..SceneSpec::default()
    }
}

// integer-grid IoU, counting unit cells whose centers fall inside each box
fn raster_iou(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    let inside = |r: &BoxXYXY, x: f32, y: f32| x >= r.x1 && x < r.x2 && y >= r.y1 && y < r.y2;
    let (mut i, mut u) = (0usize, 0usize);
    for y in 0..128 {
        for x in 0..128 {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            let (ia, ib) = (inside(a, px, py), inside(b, px, py));
            i += (ia && ib) as usize;
            u += (ia || ib) as usize;
        }
    }
    i as f64 / u.max(1) as f64
}

#[test]
fn objectness_finds_single_bright_square() {
    let mut img = Image::filled(64, 64, [0.0, 0.0, 0.0]);
    for y in 20..48 {
        for x in 20..48 {
            img.set_pixel(x, y, [1.0, 1.0, 1.0]);
        }
    }
    let square = BoxXYXY::new(20., 20., 48., 48.).unwrap();
    let overlap = BoxXYXY::new(0., 0., 64., 64.).unwrap();
    for s in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let got =
            generate_proposals(&img, &overlap, ProposalMode::Objectness, 1, 8.0, &mut rng).unwrap();
        assert_eq!(got.len(), 1);
        let iou = raster_iou(&got[0], &square);
        assert!(iou > 0.3, "seed {s}: {:?} iou {iou}", got[0]);
    }
}

#[test]
fn random_proposals_are_deterministic_and_inside() {
    let img = Image::filled(64, 64, [0.5, 0.5, 0.5]);
    let overlap = BoxXYXY::new(5., 9., 50., 60.).unwrap();
    let run = |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        generate_proposals(&img, &overlap, ProposalMode::Random, 30, 8.0, &mut rng).unwrap()
    };
    let a = run(4);
    assert_eq!(a, run(4));
    for b in &a {
        assert!(overlap.contains(b, 1e-4));
        assert!(b.width() >= 8.0 && b.height() >= 8.0);
    }
}

#[test]
fn base_rect_area_ratio_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..10_000 {
        let r = sample_base_rect(256, 256, (0.5, 1.0), (0.75, 4.0 / 3.0), &mut rng).unwrap();
        let area = (r.x2 as f64 - r.x1 as f64) * (r.y2 as f64 - r.y1 as f64);
        let ratio = area / (256.0 * 256.0);
        assert!((0.5 - 1e-4..=1.0 + 1e-4).contains(&ratio), "{ratio}");
        assert!(r.x1 >= 0.0 && r.y1 >= 0.0 && r.x2 <= 256.0 + 1e-3 && r.y2 <= 256.0 + 1e-3);
    }
    let mut a = ChaCha8Rng::seed_from_u64(3);
    let mut b = ChaCha8Rng::seed_from_u64(3);
    assert_eq!(
        sample_base_rect(100, 80, (0.5, 1.0), (0.75, 1.3), &mut a).unwrap(),
        sample_base_rect(100, 80, (0.5, 1.0), (0.75, 1.3), &mut b).unwrap()
    );
}

#[test]
fn view_pairs_meet_contract_on_scenes() {
    let cfg = ViewConfig {
        view_size: 64,
        ..ViewConfig::default()
    };
    let samples = generate_samples(20, &small_spec(2)).unwrap();
    for (i, s) in samples.iter().enumerate() {
        let vp = build_view_pair(&s.image, &cfg, i as u64).unwrap();
        assert!(box_iou(&vp.rect1, &vp.rect2) >= 0.5);
        assert_eq!(vp.proposals1.len(), 10);
        assert_eq!(vp.proposals2.len(), 10);
        for b in vp.proposals1.iter().chain(&vp.proposals2) {
            assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 64.0 && b.y2 <= 64.0);
        }
        let again = build_view_pair(&s.image, &cfg, i as u64).unwrap();
        assert_eq!(again.view1, vp.view1);
        assert_eq!(again.proposals2, vp.proposals2);
    }
}

#[test]
fn annotation_boxes_hold_their_object_pixels() {
    let spec = small_spec(8);
    for i in 0..100 {
        let scene = render_scene(&spec, i);
        let w = spec.width;
        for (k, o) in scene.objects.iter().enumerate() {
            let mut total = 0usize;
            let mut inside = 0usize;
            for (p, &own) in scene.owner.iter().enumerate() {
                if own as usize != k + 1 {
                    continue;
                }
                total += 1;
                let (x, y) = ((p % w) as f32 + 0.5, (p / w) as f32 + 0.5);
                if x >= o.bbox.x1 && x <= o.bbox.x2 && y >= o.bbox.y1 && y <= o.bbox.y2 {
                    inside += 1;
                }
            }
            assert!(total > 0, "object {k} of image {i} has no pixels");
            assert!(inside as f64 >= 0.6 * total as f64);
        }
    }
}

#[test]
fn dataset_roundtrip_and_byte_identity() {
    let spec = small_spec(5);
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let m1 = generate_dataset(6, &spec, d1.path()).unwrap();
    let m2 = generate_dataset(6, &spec, d2.path()).unwrap();
    assert_eq!(fs::read(&m1).unwrap(), fs::read(&m2).unwrap());
    for i in 0..6 {
        let rel = format!("images/{i:06}.ppm");
        assert_eq!(
            fs::read(d1.path().join(&rel)).unwrap(),
            fs::read(d2.path().join(&rel)).unwrap()
        );
    }
    let loaded = load_dataset(&m1).unwrap();
    let direct = generate_samples(6, &spec).unwrap();
    assert_eq!(loaded.len(), 6);
    for (a, b) in loaded.iter().zip(&direct) {
        assert_eq!(a.image, b.image);
        assert_eq!(a.labels, b.labels);
        for (p, q) in a.boxes.iter().zip(&b.boxes) {
            for (u, v) in p.to_array().iter().zip(q.to_array()) {
                assert!((u - v).abs() <= 0.5);
            }
        }
        assert!(a.labels.iter().all(|&l| l < 3));
    }
}

#[test]
fn empty_dataset_has_valid_header() {
    let d = tempfile::tempdir().unwrap();
    let m = generate_dataset(0, &small_spec(0), d.path()).unwrap();
    assert!(read_manifest(&m).unwrap().is_empty());
    assert!(load_dataset(&m).unwrap().is_empty());
}

#[test]
fn malformed_inputs_report_file_and_line() {
    let d = tempfile::tempdir().unwrap();
    let m = generate_dataset(2, &small_spec(1), d.path()).unwrap();

    let img = d.path().join("images/000001.ppm");
    let bytes = fs::read(&img).unwrap();
    fs::write(&img, &bytes[..bytes.len() / 2]).unwrap();
    match load_dataset(&m) {
        Err(DataError::Image { file, .. }) => assert!(file.ends_with("000001.ppm")),
        other => panic!("expected image error, got {other:?}"),
    }

    let text = fs::read_to_string(&m).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let target = lines.iter().position(|l| l.starts_with("images/")).unwrap();
    lines[target] = "images/000000.ppm 1 2 three 4 0".into();
    fs::write(&m, lines.join("\n")).unwrap();
    match read_manifest(&m) {
        Err(DataError::Parse { line, msg, .. }) => {
            assert_eq!(line, target + 1);
            assert!(msg.contains("three"));
        }
        other => panic!("expected parse error, got {other:?}"),
    }
}
