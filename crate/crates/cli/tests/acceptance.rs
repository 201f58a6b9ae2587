//! Acceptance checks. Each test prints one PASS/FAIL line to stderr
//! (bypassing output capture) and then asserts.

mod common;
#[path = "../../core/tests/common/oracle.rs"]
mod oracle;

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use aeropose_core::bench::{compose_report, stage_stats, time_stage, StageTiming};
use aeropose_core::dataset::{load_dataset, Split};
use aeropose_core::eval::{evaluate_detections, evaluate_keypoints, object_keypoint_similarity, EvalConfig};
use aeropose_core::geometry::{giou, iou, make_patch_transform, nwd, BBox, NwdConfig, Point};
use aeropose_core::heatmap::{decode_patch, encode, CodecConfig, HeatmapShape, HeatmapStack};
use aeropose_core::keypoints::{Keypoint, KeypointSet, Visibility};
use aeropose_core::pipeline::{results_document, run_frame, run_sequence, ExecutionMode, Frame, MockDetector, MockPose, RunConfig};
use aeropose_core::ExactMs;
use common::*;
use oracle::{oracle_evaluate, random_instance, OracleMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::tempdir;

fn verdict(id: u32, what: &str, ok: bool, detail: &str) {
    let line = format!("acceptance {id}: {} {what} ({detail})\n", if ok { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(ok, "{}", line.trim_end());
}

fn diff(a: Option<f64>, b: Option<f64>) -> f64 {
    match (a, b) {
        (Some(x), Some(y)) => (x - y).abs(),
        (None, None) => 0.0,
        _ => f64::INFINITY,
    }
}

#[test]
fn evaluator_matches_brute_force_oracle() {
    let start = Instant::now();
    let cfg = EvalConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let (d, dets) = random_instance(&mut rng, false);
        let r = evaluate_detections(&d, &dets, &cfg).unwrap();
        let o = oracle_evaluate(&d, &dets, &cfg, OracleMode::Boxes);
        worst = worst.max(diff(r.ap, o[0].ap)).max(diff(r.ar_at_100, o[0].ar));

        let (d, dets) = random_instance(&mut rng, true);
        let r = evaluate_keypoints(&d, &dets, &cfg).unwrap();
        let o = oracle_evaluate(&d, &dets, &cfg, OracleMode::Keypoints);
        worst = worst.max(diff(r.ap, o[0].ap));
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        1,
        "evaluator agrees with brute-force oracle on 500 box and 500 keypoint instances",
        worst <= 1e-9 && secs < 30.0,
        &format!("max |diff| {worst:.1e}, {secs:.1} s"),
    );
}

#[test]
fn oks_closed_forms_and_scale_invariance() {
    let k = aeropose_core::eval::default_kp_constants();
    let mut gt = KeypointSet::<f64>::default();
    gt.points[0] = Keypoint::new(50.0, 50.0, Visibility::Visible);
    gt.points[3] = Keypoint::new(70.0, 40.0, Visibility::Occluded);
    let exact = object_keypoint_similarity(&gt, 10_000.0, &gt, &k).unwrap();

    let mut one = KeypointSet::<f64>::default();
    one.points[0] = Keypoint::new(50.0, 50.0, Visibility::Visible);
    let mut moved = one.clone();
    moved.points[0].x += 10.0;
    let half = object_keypoint_similarity(&one, 10_000.0, &moved, &[0.1; 17]).unwrap();

    let mut far = gt.clone();
    far.points[9] = Keypoint::new(1e6, -1e6, Visibility::Visible);
    let unlabeled_far = object_keypoint_similarity(&gt, 10_000.0, &far, &k).unwrap();

    let errs = [
        (exact - 1.0).abs(),
        (half - (-0.5f64).exp()).abs(),
        (unlabeled_far - 1.0).abs(),
    ];

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let g = KeypointSet::new(std::array::from_fn(|_| {
            let v = Visibility::from_code(rng.random_range(0..3)).unwrap();
            Keypoint::new(rng.random_range(0.0..200.0), rng.random_range(0.0..200.0), v)
        }));
        let mut p = g.clone();
        for q in p.points.iter_mut() {
            q.x += rng.random_range(-8.0..8.0);
            q.y += rng.random_range(-8.0..8.0);
            q.v = Visibility::Visible;
        }
        let area = rng.random_range(100.0..20_000.0);
        let lambda = rng.random_range(0.1..10.0);
        let scale = |s: &KeypointSet<f64>| s.map_points(|q| Point::new(q.x * lambda, q.y * lambda));
        let a = object_keypoint_similarity(&g, area, &p, &k);
        let b = object_keypoint_similarity(&scale(&g), area * lambda * lambda, &scale(&p), &k);
        worst = worst.max(diff(a, b));
    }
    let ok = errs.iter().all(|e| *e <= 1e-9) && worst <= 1e-9;
    verdict(
        2,
        "OKS closed forms (exact 1.0, exp(-0.5), unlabeled ignored) and joint-scale invariance over 1000 draws",
        ok,
        &format!("example errors {errs:?}, invariance max |diff| {worst:.1e}, exp(-0.5) case = {half:.6}"),
    );
}

#[test]
fn geometry_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let rand_box = |rng: &mut ChaCha8Rng| {
        BBox::<f64>::new(
            rng.random_range(-500.0..500.0),
            rng.random_range(-500.0..500.0),
            rng.random_range(0.5..300.0),
            rng.random_range(0.5..300.0),
        )
        .unwrap()
    };
    let c = NwdConfig::default();
    let (mut sym, mut ident, mut trans) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..10_000 {
        let (a, b) = (rand_box(&mut rng), rand_box(&mut rng));
        let (dx, dy) = (rng.random_range(-1e3..1e3), rng.random_range(-1e3..1e3));
        let (ta, tb) = (a.translated(dx, dy), b.translated(dx, dy));
        let n = |x: &BBox<f64>, y: &BBox<f64>| nwd(x, y, &c).unwrap();
        sym = sym
            .max((iou(&a, &b) - iou(&b, &a)).abs())
            .max((giou(&a, &b) - giou(&b, &a)).abs())
            .max((n(&a, &b) - n(&b, &a)).abs());
        ident = ident
            .max((iou(&a, &a) - 1.0).abs())
            .max((giou(&a, &a) - 1.0).abs())
            .max((n(&a, &a) - 1.0).abs());
        trans = trans
            .max((iou(&a, &b) - iou(&ta, &tb)).abs())
            .max((giou(&a, &b) - giou(&ta, &tb)).abs())
            .max((n(&a, &b) - n(&ta, &tb)).abs());
    }
    let example = nwd(
        &BBox::new(0.0, 0.0, 10.0, 10.0).unwrap(),
        &BBox::new(0.0, 0.0, 20.0, 20.0).unwrap(),
        &NwdConfig::new(10.0).unwrap(),
    )
    .unwrap();
    let example_err = (example - (-1.0f64).exp()).abs();

    let mut round_trip = 0.0f64;
    for _ in 0..10_000 {
        let det = BBox::<f64>::new(
            rng.random_range(0.0..1500.0),
            rng.random_range(0.0..1500.0),
            rng.random_range(1.0..400.0),
            rng.random_range(1.0..400.0),
        )
        .unwrap();
        let t = make_patch_transform(&det, 2000.0, 2000.0).unwrap();
        let p = Point::<f64>::new(rng.random_range(-100.0..2100.0), rng.random_range(-100.0..2100.0));
        let back = t.patch_to_image(t.image_to_patch(p));
        round_trip = round_trip.max((back.x - p.x).abs()).max((back.y - p.y).abs());
    }
    // translation moves far from the origin, so allow float rounding there
    let ok = sym <= 1e-12 && ident <= 1e-12 && trans <= 1e-9 && example_err <= 1e-9 && round_trip <= 1e-6;
    verdict(
        3,
        "IoU/GIoU/NWD symmetry, identity, translation invariance on 10000 pairs; NWD exp(-1); patch round trip on 10000 points",
        ok,
        &format!(
            "symmetry {sym:.1e}, identity {ident:.1e}, translation {trans:.1e}, NWD example {example:.6}, round trip {round_trip:.1e} px"
        ),
    );
}

#[test]
fn heatmap_codec_accuracy() {
    let mut cfg = CodecConfig::<f64>::default();
    let cell = cfg.shape.stride as f64;
    let margin = 2.0 * cfg.sigma * cell;
    let (pw, ph) = ((cfg.shape.width as f64) * cell, (cfg.shape.height as f64) * cell);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut coarse_err, mut fine_err) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let (x, y): (f64, f64) = (rng.random_range(margin..pw - margin), rng.random_range(margin..ph - margin));
        let mut k = KeypointSet::default();
        let c = rng.random_range(0..17);
        k.points[c] = Keypoint::new(x, y, Visibility::Visible);
        let hm = encode(&k, &cfg);
        cfg.subpixel = true;
        let fine = decode_patch(&hm, &cfg).points[c];
        cfg.subpixel = false;
        let coarse = decode_patch(&hm, &cfg).points[c];
        fine_err = fine_err.max((fine.x - x).abs().max((fine.y - y).abs()) / cell);
        coarse_err = coarse_err.max((coarse.x - x).abs().max((coarse.y - y).abs()) / cell);
    }

    cfg = CodecConfig::default();
    let mut k = KeypointSet::default();
    k.points[0] = Keypoint::new(96.0, 128.0, Visibility::Visible);
    let hm = encode(&k, &cfg);
    let peak = hm.get(0, 32, 24);
    let neighbor = hm.get(0, 32, 25);
    let neighbor_err = (neighbor - (-1.0f64 / 8.0).exp()).abs();

    let single = |v: f64| {
        let mut values = vec![0.0; 17 * 64 * 48];
        values[32 * 48 + 24] = v;
        let stack = HeatmapStack::from_vec(HeatmapShape::default(), values).unwrap();
        decode_patch(&stack, &cfg).points[0].v
    };
    let threshold_ok = single(0.35) == Visibility::Unlabeled
        && single(0.4) == Visibility::Visible
        && single(0.4 - 1e-12) == Visibility::Unlabeled;

    let ok = coarse_err <= 0.5 && fine_err <= 0.25 && peak == 1.0 && neighbor_err <= 1e-9 && threshold_ok;
    verdict(
        4,
        "codec round trip on 1000 interior keypoints, neighbor value exp(-1/8), visibility threshold 0.4",
        ok,
        &format!(
            "max error {coarse_err:.3} cell coarse / {fine_err:.3} cell refined, neighbor {neighbor:.6}, threshold exact: {threshold_ok}"
        ),
    );
}

fn decimal(v: ExactMs) -> String {
    format!("{:.2}", *v.numer() as f64 / *v.denom() as f64)
}

#[test]
fn latency_budget_arithmetic_is_exact() {
    let q = |n: i64, d: i64| ExactMs::new(n, d);
    let detect = StageTiming::new("detect", vec![q(13, 1)], 0);
    let pose = StageTiming::new("pose", vec![q(654, 100)], 0);
    let pre = StageTiming::new("preprocess", vec![q(1, 2)], 0);
    let two = compose_report(&[detect.clone(), pose.clone()], q(25, 1)).unwrap();
    let three = compose_report(&[pre, detect, pose], q(25, 1)).unwrap();
    let ok = two.total == q(1954, 100) && three.total == q(2004, 100) && three.headroom == q(1996, 100);
    verdict(
        5,
        "stage means 13 + 6.54 = 19.54 ms; with 0.5 ms preprocess 20.04 ms and 19.96 ms headroom at 25 fps",
        ok,
        &format!("totals {} and {}, headroom {}", decimal(two.total), decimal(three.total), decimal(three.headroom)),
    );
}

#[test]
fn bench_harness_fidelity() {
    let start = Instant::now();
    let sleep = time_stage("sleep", 20, 2, || {
        std::thread::sleep(Duration::from_millis(10));
        Ok::<_, String>(())
    })
    .unwrap();
    let empty = time_stage("empty", 1000, 10, || Ok::<_, String>(())).unwrap();
    let (s, e) = (stage_stats(&sleep), stage_stats(&empty));
    let secs = start.elapsed().as_secs_f64();
    verdict(
        6,
        "10 ms sleep stage measured within [10, 12] ms; empty stage overhead below 0.1 ms",
        (10.0..=12.0).contains(&s.mean) && e.mean < 0.1 && secs < 10.0,
        &format!("sleep mean {:.3} ms, empty mean {:.5} ms, {secs:.1} s", s.mean, e.mean),
    );
}

fn merge_fixture_pair(out: &Path) -> std::process::Output {
    aeropose([
        "merge".to_string(),
        "-i".into(),
        format!("{}=pedestrian,people", fixture("set_a.json").display()),
        "-i".into(),
        path_arg(&fixture("set_b.json")),
        "--split".into(),
        "val".into(),
        "-o".into(),
        path_arg(out),
    ])
}

#[test]
fn merge_conservation_and_golden_stability() {
    let dir = tempdir().unwrap();
    let (m1, m2) = (dir.path().join("m1.json"), dir.path().join("m2.json"));
    let ok_exit = code(&merge_fixture_pair(&m1)) == 0 && code(&merge_fixture_pair(&m2)) == 0;

    let a = load_dataset(&fixture("set_a.json"), Split::Val).unwrap();
    let b = load_dataset(&fixture("set_b.json"), Split::Val).unwrap();
    let keep = |d: &aeropose_core::dataset::Dataset, names: &[&str]| {
        let ids: HashSet<u64> = d.categories.iter().filter(|c| names.contains(&c.name.as_str())).map(|c| c.id).collect();
        d.annotations.iter().filter(|x| ids.contains(&x.category_id)).count()
    };
    let expect_anns = keep(&a, &["pedestrian", "people"]) + keep(&b, &["person"]);
    let collisions = a.images.iter().any(|i| b.image(i.id).is_some());

    let m = load_dataset(&m1, Split::Val).unwrap();
    let image_ids: HashSet<u64> = m.images.iter().map(|i| i.id).collect();
    let ann_ids: HashSet<u64> = m.annotations.iter().map(|x| x.id).collect();
    let conserved = m.images.len() == a.images.len() + b.images.len() && m.annotations.len() == expect_anns;
    let integrity = image_ids.len() == m.images.len()
        && ann_ids.len() == m.annotations.len()
        && m.annotations.iter().all(|x| image_ids.contains(&x.image_id) && x.category_id == 1);
    // every merged annotation still sits on the image it came from
    let map: aeropose_core::dataset::IdMap =
        serde_json::from_str(&fs::read_to_string(dir.path().join("m1.idmap.json")).unwrap()).unwrap();
    let mut traced = true;
    for (part, src) in map.parts.iter().zip([&a, &b]) {
        for [old, new] in &part.annotations {
            let before = src.annotations.iter().find(|x| x.id == *old).unwrap();
            let after = m.annotations.iter().find(|x| x.id == *new).unwrap();
            traced &= src.image(before.image_id).unwrap().file_name == m.image(after.image_id).unwrap().file_name
                && before.bbox == after.bbox;
        }
    }
    let bytes = fs::read(&m1).unwrap();
    let stable = bytes == fs::read(&m2).unwrap() && bytes == fs::read(fixture("golden/merged.json")).unwrap();
    verdict(
        7,
        "merge conserves images and person annotations, keeps references, and is byte-stable against the golden file",
        ok_exit && collisions && conserved && integrity && traced && stable,
        &format!(
            "{} images, {} annotations, id collisions in inputs: {collisions}, integrity {integrity}, traced {traced}, stable {stable}",
            m.images.len(),
            m.annotations.len()
        ),
    );
}

#[test]
fn pipeline_determinism_and_threshold_monotonicity() {
    let dir = tempdir().unwrap();
    let frames = dir.path().join("frames");
    let raw = dir.path().join("raw.json");
    save(&write_scene(&frames, "seq", 20, 99), &raw);
    let gt = dir.path().join("gt.json");
    assert_eq!(code(&aeropose(["merge", "-i", &format!("{}=pedestrian", raw.display()), "-o", &path_arg(&gt)])), 0);
    let run = |out: &Path, pipelined: bool| {
        let mut args = vec![
            "run".to_string(),
            "--frames".into(),
            path_arg(&frames),
            "--gt".into(),
            path_arg(&gt),
            "-o".into(),
            path_arg(out),
        ];
        if pipelined {
            args.push("--pipelined".into());
        }
        code(&aeropose(args))
    };
    let (seq, pip) = (dir.path().join("seq.json"), dir.path().join("pip.json"));
    let exits = (run(&seq, false), run(&pip, true));
    let doc = fs::read(&seq).unwrap();
    let identical = exits == (0, 0) && doc == fs::read(&pip).unwrap() && doc.len() > 10;

    // library path with random detector scores
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let frames_lib: Vec<Frame> = (1..=20).map(|id| Frame::new(id, 160, 120, vec![60; 160 * 120 * 3], 0.0).unwrap()).collect();
    let boxes: HashMap<u64, Vec<BBox<f64>>> = (1..=20)
        .map(|id| {
            let n = rng.random_range(0..5);
            let bs = (0..n)
                .map(|_| {
                    BBox::new(rng.random_range(0.0..120.0), rng.random_range(0.0..60.0), 30.0, 50.0)
                        .unwrap()
                        .with_score(rng.random_range(0.0..1.0))
                })
                .collect();
            (id, bs)
        })
        .collect();
    let count = |t: f64| {
        let cfg = RunConfig { det_conf_threshold: t, ..RunConfig::default() };
        let mut det = MockDetector::new(boxes.clone()).with_input_size(160);
        let mut pose = MockPose::fixed(KeypointSet::default());
        frames_lib
            .iter()
            .map(|f| run_frame(f, &mut det, &mut pose, &cfg).unwrap().persons.len())
            .sum::<usize>()
    };
    let counts: Vec<usize> = (0..=20).map(|i| count(i as f64 / 20.0)).collect();
    let monotone = counts.windows(2).all(|w| w[1] <= w[0]) && counts[0] > counts[20];

    let lib_identical = {
        let cfg = RunConfig::default();
        let go = |mode| {
            let mut det = MockDetector::new(boxes.clone()).with_input_size(160);
            let mut pose = MockPose::fixed(KeypointSet::default());
            results_document(&run_sequence(frames_lib.clone().into_iter().map(Ok), &mut det, &mut pose, &cfg, mode))
        };
        go(ExecutionMode::Sequential) == go(ExecutionMode::Pipelined)
    };
    verdict(
        8,
        "pipelined and sequential runs over 20 frames give byte-identical documents; person count monotone in detection threshold",
        identical && lib_identical && monotone,
        &format!("cli identical {identical}, library identical {lib_identical}, persons by threshold {counts:?}"),
    );
}

#[test]
fn end_to_end_mock_reproduction() {
    let start = Instant::now();
    let dir = tempdir().unwrap();
    let frames = dir.path().join("frames");
    let (ra, rb) = (dir.path().join("alpha.json"), dir.path().join("beta.json"));
    save(&write_scene(&frames, "alpha", 8, 1), &ra);
    save(&write_scene(&frames, "beta", 8, 2), &rb);
    let gt = dir.path().join("merged.json");
    let merged = aeropose([
        "merge".to_string(),
        "-i".into(),
        format!("{}=pedestrian", ra.display()),
        "-i".into(),
        format!("{}=pedestrian", rb.display()),
        "--split".into(),
        "val".into(),
        "-o".into(),
        path_arg(&gt),
    ]);
    let results = dir.path().join("results.json");
    let ran = aeropose(["run", "--frames", &path_arg(&frames), "--gt", &path_arg(&gt), "-o", &path_arg(&results)]);
    let report = dir.path().join("report.json");
    let evaluated = aeropose([
        "eval-kp",
        "--gt",
        &path_arg(&gt),
        "--results",
        &path_arg(&results),
        "--report",
        &path_arg(&report),
    ]);
    let exits = (code(&merged), code(&ran), code(&evaluated));
    let ap = if exits == (0, 0, 0) { report_ap(&report, 0) } else { None };
    let people = load_dataset(&gt, Split::Val).map(|d| d.annotations.len()).unwrap_or(0);
    let secs = start.elapsed().as_secs_f64();
    verdict(
        9,
        "merge -> run -> eval-kp with ground-truth mock backends yields keypoint mAP 1.0",
        ap == Some(1.0) && people > 0 && secs < 60.0,
        &format!("exit codes {exits:?}, mAP {ap:?} over {people} people, {secs:.1} s; {}", stderr(&evaluated).trim()),
    );
}
