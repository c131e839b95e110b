//! Acceptance gate: every criterion runs at its stated tolerance and time
//! limit and prints one PASS/FAIL line.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use common::{files_in, fixture, lesionkit, write_fixture_images};
use lesionkit::anchor_opt::{
    coverage_objective, de_optimize, decode_genome, sphere_self_test, AnchorConfig, AnchorGenome, DeSettings,
    ObjectiveMode, DEFAULT_SIZES,
};
use lesionkit::eval::{
    calibrate, format_summary_table, froc_curve, sensitivity_at_fp, Detection, GroundTruthLesion, ImageRecord,
    MatchConfig, OperatingPoint, STANDARD_FP_TARGETS,
};
use lesionkit::geometry::{iou, AnchorPlacement, BBox, Point};
use lesionkit::grid::Grid;
use lesionkit::maskgen::gmm::{fit_gmm, run_em, EmOptions, GaussianComponent, Gmm1d};
use lesionkit::maskgen::{
    build_trimap, compute_beta, dice, graph_cut_segment, grabcut, EnergyModel, GmmModel, GrabCutParams, LabelMask,
    Trimap, TrimapLabel,
};
use lesionkit::synthetic::{DiskPhantom, LesionBoxModel};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn c1_iou_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let int_box = |rng: &mut ChaCha8Rng| loop {
        let (a, b, c, d) = (rng.random_range(0..=64), rng.random_range(0..=64), rng.random_range(0..=64), rng.random_range(0..=64));
        if a != b && c != d {
            return BBox::new(a.min(b) as f64, c.min(d) as f64, a.max(b) as f64, c.max(d) as f64).unwrap();
        }
    };
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (a, b) = (int_box(&mut rng), int_box(&mut rng));
        let (mut inter, mut union) = (0u32, 0u32);
        for y in 0..64 {
            for x in 0..64 {
                let p = Point::new(x as f64 + 0.5, y as f64 + 0.5);
                inter += (a.contains(p) && b.contains(p)) as u32;
                union += (a.contains(p) || b.contains(p)) as u32;
            }
        }
        let err = (iou(&a, &b) - inter as f64 / union as f64).abs();
        worst = worst.max(err);
        ensure!(err <= 1e-9, "{a:?} vs {b:?}: error {err}");
    }
    Ok(format!("1000 pairs, max error {worst:.1e}"))
}

fn c2_min_cut() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..200 {
        let image = Grid::from_fn(4, 3, |_, _| rng.random_range(-100.0..200.0));
        let labels = loop {
            let labels = Grid::from_fn(4, 3, |_, _| match rng.random_range(0..4) {
                0 => TrimapLabel::Foreground,
                1 => TrimapLabel::Background,
                _ => TrimapLabel::Unknown,
            });
            if Trimap::new(labels.clone()).is_ok() {
                break labels;
            }
        };
        let trimap = Trimap::new(labels).unwrap();
        let fg: Vec<f64> = (0..20).map(|_| rng.random_range(0.0..200.0)).collect();
        let bg: Vec<f64> = (0..20).map(|_| rng.random_range(-100.0..100.0)).collect();
        let model = GmmModel {
            foreground: fit_gmm(&fg, rng.random_range(1..=3), case).unwrap(),
            background: fit_gmm(&bg, rng.random_range(1..=3), case + 1).unwrap(),
        };
        let gamma = rng.random_range(0.0..60.0);
        let beta = compute_beta(&image);
        let energy = EnergyModel::new(&image, &model, gamma, beta);
        let cut = graph_cut_segment(&image, &trimap, &model, gamma, beta).unwrap();

        let l = trimap.labels().as_slice();
        let unknown: Vec<usize> = (0..l.len()).filter(|&i| l[i] == TrimapLabel::Unknown).collect();
        ensure!(unknown.len() <= 12, "too many unknowns");
        let best = (0u32..1 << unknown.len())
            .map(|bits| {
                let mut m: Vec<bool> = l.iter().map(|&x| x == TrimapLabel::Foreground).collect();
                for (k, &i) in unknown.iter().enumerate() {
                    m[i] = bits >> k & 1 == 1;
                }
                energy.quantized_energy(&LabelMask(Grid::from_vec(4, 3, m)))
            })
            .min()
            .unwrap();
        let got = energy.quantized_energy(&cut);
        ensure!(got == best, "case {case}: cut energy {got} vs exhaustive {best}");
    }
    Ok("200 instances equal to exhaustive minimum".into())
}

fn c3_phantom() -> Check {
    let phantom = DiskPhantom::default();
    let mut min_dice: f64 = 1.0;
    for seed in 0..20 {
        let s = phantom.sample(seed);
        let trimap = build_trimap(&s.recist, &s.bbox, s.image.dims()).unwrap();
        let out = grabcut(&s.image, &trimap, &GrabCutParams { seed, ..GrabCutParams::default() }).unwrap();
        let d = dice(&out.mask, &LabelMask(s.truth));
        min_dice = min_dice.min(d);
        ensure!(d >= 0.95, "seed {seed}: dice {d:.4}");
        ensure!(
            out.energy_trace.windows(2).all(|w| w[1] <= w[0]),
            "seed {seed}: energy trace {:?}",
            out.energy_trace
        );
    }
    Ok(format!("20 seeds, min dice {min_dice:.4}, traces non-increasing"))
}

fn c4_de_convergence() -> Check {
    let sphere = sphere_self_test(&DeSettings { max_generations: 150, seed: 42, ..DeSettings::default() }).unwrap();
    ensure!(sphere.abs() < 1e-6, "sphere reached {sphere:e}");
    let corpus = LesionBoxModel::default().sample(100, 4);
    for seed in 0..3 {
        let settings = DeSettings { seed, max_generations: 60, ..DeSettings::default() };
        let run = de_optimize(&corpus, &DEFAULT_SIZES, &settings).unwrap();
        ensure!(run.trace.windows(2).all(|w| w[1] >= w[0]), "seed {seed}: trace decreases");
    }
    Ok(format!("sphere {sphere:.1e}; 3 anchor runs monotone"))
}

fn objective(cfg: &AnchorConfig, corpus: &[BBox]) -> f64 {
    coverage_objective(cfg, corpus, ObjectiveMode::MeanIou, AnchorPlacement::Centered).unwrap()
}

fn c5_anchor_direction() -> Check {
    let corpus = LesionBoxModel::default().sample(400, 5);
    let search = de_optimize(&corpus, &DEFAULT_SIZES, &DeSettings { seed: 5, ..DeSettings::default() }).unwrap();
    ensure!(search.genome.check_bounds().is_ok(), "genome out of bounds: {:?}", search.genome);
    let default = objective(&AnchorConfig::retinanet_default(), &corpus);
    let reported =
        objective(&decode_genome(&AnchorGenome::from_array([0.425, 0.540, 0.680, 1.78, 3.27]), &DEFAULT_SIZES).unwrap(), &corpus);
    ensure!(search.objective > default, "optimized {} <= default {default}", search.objective);
    ensure!(reported > default, "reported {reported} <= default {default}");
    Ok(format!(
        "optimized {:.4} (scales {:.3?}), reported {reported:.4}, default {default:.4}",
        search.objective, search.config.scales
    ))
}

fn oracle_curve(images: &[ImageRecord]) -> Vec<OperatingPoint> {
    let total: usize = images.iter().map(|im| im.ground_truths.len()).sum();
    let mut thresholds: Vec<f64> = images.iter().flat_map(|im| im.detections.iter().map(|d| d.calibrated_score())).collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    if thresholds.is_empty() {
        return vec![OperatingPoint { fp_per_image: 0.0, sensitivity: 0.0 }];
    }
    let mut pts: Vec<OperatingPoint> = thresholds
        .iter()
        .map(|&t| {
            let (mut fp, mut hit) = (0, 0);
            for im in images {
                let kept: Vec<&Detection> = im.detections.iter().filter(|d| d.calibrated_score() >= t).collect();
                fp += kept.iter().filter(|d| im.ground_truths.iter().all(|g| iou(&d.bbox, &g.bbox) <= 0.5)).count();
                hit += im.ground_truths.iter().filter(|g| kept.iter().any(|d| iou(&d.bbox, &g.bbox) > 0.5)).count();
            }
            OperatingPoint { fp_per_image: fp as f64 / images.len() as f64, sensitivity: hit as f64 / total as f64 }
        })
        .collect();
    pts.sort_by(|a, b| a.fp_per_image.total_cmp(&b.fp_per_image).then(a.sensitivity.total_cmp(&b.sensitivity)));
    pts.dedup();
    pts
}

fn c6_froc_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for case in 0..50 {
        let n = rng.random_range(1..=50);
        let mut images: Vec<ImageRecord> = (0..n).map(|i| ImageRecord::new(format!("im{i}"))).collect();
        for im in &mut images {
            for _ in 0..rng.random_range(0..=3) {
                let (x, y) = (rng.random_range(0..60) as f64, rng.random_range(0..60) as f64);
                let b = BBox::new(x, y, x + rng.random_range(8..30) as f64, y + rng.random_range(8..30) as f64).unwrap();
                im.ground_truths.push(GroundTruthLesion::new(im.image_id.clone(), b, 12.0, 6.0).unwrap());
            }
            for _ in 0..rng.random_range(0..=4) {
                let (x, y) = (rng.random_range(0..70) as f64, rng.random_range(0..70) as f64);
                let b = BBox::new(x, y, x + rng.random_range(8..30) as f64, y + rng.random_range(8..30) as f64).unwrap();
                let d = Detection::new(im.image_id.clone(), b, rng.random_range(0..=10) as f64 / 10.0).unwrap();
                im.detections.push(d);
            }
        }
        if images.iter().all(|im| im.ground_truths.is_empty()) {
            let id = images[0].image_id.clone();
            images[0].ground_truths.push(GroundTruthLesion::new(id, BBox::new(0., 0., 9., 9.).unwrap(), 5.0, 2.0).unwrap());
        }
        let curve = froc_curve(&images, &MatchConfig::default()).unwrap();
        let expected = oracle_curve(&images);
        ensure!(curve.points() == expected.as_slice(), "case {case}: curve differs from oracle");
        let targets = [0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0];
        for (t, got) in targets.iter().zip(sensitivity_at_fp(&curve, &targets)) {
            let want = expected.iter().filter(|p| p.fp_per_image <= *t).map(|p| p.sensitivity).fold(0.0, f64::max);
            ensure!(got == want, "case {case}: sensitivity at {t}: {got} vs {want}");
        }
    }

    let mut perfect = Vec::new();
    for i in 0..5 {
        let mut im = ImageRecord::new(format!("p{i}"));
        let b = BBox::new(10.0 * i as f64, 0.0, 10.0 * i as f64 + 20.0, 20.0).unwrap();
        im.ground_truths.push(GroundTruthLesion::new(im.image_id.clone(), b, 15.0, 8.0).unwrap());
        im.detections.push(Detection::new(im.image_id.clone(), b, 0.9).unwrap());
        perfect.push(im);
    }
    let s = sensitivity_at_fp(&froc_curve(&perfect, &MatchConfig::default()).unwrap(), &STANDARD_FP_TARGETS);
    ensure!(s == vec![1.0; 6], "perfect detector gave {s:?}");

    let b = |x1, y1, x2, y2| BBox::new(x1, y1, x2, y2).unwrap();
    let mut a = ImageRecord::new("a");
    a.ground_truths.push(GroundTruthLesion::new("a", b(10., 10., 30., 30.), 20.0, 10.0).unwrap());
    a.detections.push(Detection::new("a", b(10., 10., 30., 30.), 0.9).unwrap());
    let mut c = ImageRecord::new("b");
    c.ground_truths.push(GroundTruthLesion::new("b", b(50., 50., 80., 80.), 20.0, 10.0).unwrap());
    c.detections.push(Detection::new("b", b(200., 200., 230., 230.), 0.8).unwrap());
    c.detections.push(Detection::new("b", b(50., 50., 80., 80.), 0.7).unwrap());
    let two = froc_curve(&[a, c], &MatchConfig::default()).unwrap();
    let pts: Vec<(f64, f64)> = two.points().iter().map(|p| (p.fp_per_image, p.sensitivity)).collect();
    ensure!(pts == vec![(0.0, 0.5), (0.5, 0.5), (0.5, 1.0)], "two-image fixture gave {pts:?}");
    ensure!(sensitivity_at_fp(&two, &[0.25, 0.5, 4.0]) == vec![0.5, 1.0, 1.0], "two-image sensitivities");
    Ok("50 random fixtures match oracle; perfect and two-image fixtures exact".into())
}

fn c7_summary_golden() -> Check {
    let input: serde_json::Value = serde_json::from_slice(&std::fs::read(fixture("summary_input.json")).unwrap()).unwrap();
    let targets: Vec<f64> = serde_json::from_value(input["targets"].clone()).unwrap();
    let sens: Vec<f64> = serde_json::from_value(input["sensitivities"].clone()).unwrap();
    let table = format_summary_table(input["method"].as_str().unwrap(), &targets, &sens);
    let golden = std::fs::read_to_string(fixture("summary_golden.md")).unwrap();
    ensure!(table == golden, "table differs from golden:\n{table}");
    ensure!(table.lines().next().unwrap().matches('|').count() == 8, "header is not six FP columns");
    Ok("six-column table matches golden file; published sensitivities need the trained detector".into())
}

fn c8_em() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (a, b) = (Normal::new(-100.0, 15.0).unwrap(), Normal::new(200.0, 15.0).unwrap());
    let mut data: Vec<f64> = (0..3000).map(|_| a.sample(&mut rng)).collect();
    data.extend((0..1000).map(|_| b.sample(&mut rng)));
    for start in 0..100 {
        let k = rng.random_range(1..=4);
        let init = Gmm1d::new(
            (0..k)
                .map(|_| GaussianComponent {
                    weight: 1.0 / k as f64,
                    mean: rng.random_range(-300.0..400.0),
                    variance: rng.random_range(1.0..10_000.0),
                })
                .collect(),
        );
        let fit = run_em(&data, init, &EmOptions { max_iterations: 60, ..EmOptions::default() });
        ensure!(fit.log_likelihood.windows(2).all(|w| w[1] >= w[0]), "start {start}: log-likelihood decreased");
    }
    let g = fit_gmm(&data, 2, 0).unwrap();
    let mut means: Vec<f64> = g.components().iter().map(|c| c.mean).collect();
    means.sort_by(f64::total_cmp);
    ensure!((means[0] + 100.0).abs() <= 1.0 && (means[1] - 200.0).abs() <= 1.0, "means {means:?}");
    Ok(format!("100 starts monotone; means {:.2} / {:.2}", means[0], means[1]))
}

fn c9_calibration() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..1000 {
        let (p, q) = (rng.random::<f64>(), rng.random::<f64>());
        ensure!(calibrate(p, q) == p * (1.0 + q), "formula at ({p}, {q})");
        ensure!(calibrate(p, 0.0) == p, "identity at {p}");
        let (p2, q2) = (rng.random::<f64>(), rng.random::<f64>());
        if p < p2 {
            ensure!(calibrate(p, q) < calibrate(p2, q), "not increasing in p at {p}, {p2}, {q}");
        }
        if q < q2 && p > 0.0 {
            ensure!(calibrate(p, q) < calibrate(p, q2), "not increasing in IoU at {p}, {q}, {q2}");
        }
    }
    Ok("1000 pairs".into())
}

fn run_twice(args: &dyn Fn(&Path) -> Vec<String>, compare: &dyn Fn(&Path) -> Vec<(String, Vec<u8>)>) -> Result<usize, String> {
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let a = args(dir.path());
        let refs: Vec<&str> = a.iter().map(String::as_str).collect();
        let o = lesionkit(&refs, dir.path());
        ensure!(o.status.success(), "{:?} failed: {}", refs, String::from_utf8_lossy(&o.stderr));
        let mut files = compare(dir.path());
        files.push(("stdout".into(), o.stdout));
        outputs.push(files);
    }
    ensure!(outputs[0] == outputs[1], "outputs differ between reruns");
    Ok(outputs[0].len())
}

fn c10_determinism() -> Check {
    let p = |p: &Path| p.to_str().unwrap().to_string();
    let anchors = run_twice(
        &|d| {
            ["optimize-anchors", &p(&fixture("annotations.csv")), "--split", "train", "--seed", "7", "--out", &p(&d.join("a.cfg"))]
                .map(String::from)
                .to_vec()
        },
        &|d| {
            ["a.cfg", "a.cfg.trace.json"]
                .iter()
                .map(|n| (n.to_string(), std::fs::read(d.join(n)).unwrap()))
                .collect()
        },
    )?;
    let masks = run_twice(
        &|d| {
            write_fixture_images(&d.join("images"));
            [
                "generate-masks",
                &p(&fixture("annotations.csv")),
                "--images",
                &p(&d.join("images")),
                "--out",
                &p(&d.join("masks")),
                "--split",
                "val",
                "--seed",
                "7",
                "--jobs",
                "2",
            ]
            .map(String::from)
            .to_vec()
        },
        &|d| files_in(&d.join("masks")).into_iter().filter(|(n, _)| n != "run_manifest.json").collect(),
    )?;
    let eval = run_twice(
        &|d| {
            ["evaluate", &p(&fixture("detections.jsonl")), &p(&fixture("annotations.csv")), "--out", &p(&d.join("eval"))]
                .map(String::from)
                .to_vec()
        },
        &|d| files_in(&d.join("eval")).into_iter().filter(|(n, _)| n != "run_manifest.json").collect(),
    )?;
    Ok(format!("byte-identical reruns: anchors {anchors}, masks {masks}, evaluate {eval} outputs"))
}

#[test]
fn acceptance() {
    let criteria: [(u8, &str, Duration, fn() -> Check); 10] = [
        (1, "IoU oracle", Duration::from_secs(1), c1_iou_oracle),
        (2, "min-cut optimality", Duration::from_secs(30), c2_min_cut),
        (3, "GrabCut phantom", Duration::from_secs(60), c3_phantom),
        (4, "DE convergence", Duration::from_secs(10), c4_de_convergence),
        (5, "anchor-search direction", Duration::from_secs(120), c5_anchor_direction),
        (6, "FROC oracle", Duration::from_secs(10), c6_froc_oracle),
        (7, "summary table layout", Duration::from_secs(1), c7_summary_golden),
        (8, "EM monotonicity", Duration::from_secs(10), c8_em),
        (9, "calibration properties", Duration::from_secs(1), c9_calibration),
        (10, "end-to-end determinism", Duration::from_secs(120), c10_determinism),
    ];
    let mut failed = Vec::new();
    for (n, name, limit, check) in criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let verdict = match (&result, elapsed <= limit) {
            (Ok(_), true) => "PASS",
            _ => "FAIL",
        };
        let detail = match result {
            Ok(s) => s,
            Err(e) => e,
        };
        println!(
            "criterion {n:>2} {verdict} {name} ({:.2}s / {}s) {detail}",
            elapsed.as_secs_f64(),
            limit.as_secs()
        );
        if verdict == "FAIL" {
            failed.push(n);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
