//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL line
//! per criterion and exits non-zero if any failed.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

use wagner_det::anchors::{kmeans, kmeans_anchors, AnchorSet, BoxShape, KMeansConfig, Scale, DEFAULT_PRIORS};
use wagner_det::augment::{mixup, Sample};
use wagner_det::decode::{
    decode_full, decode_scale, grid_cells, nms, slot_box, DecodeConfig, Detection, HeadTensor,
};
use wagner_det::eval::{ablation_report, evaluate, ApMode, EvalConfig, EvalReport};
use wagner_det::geometry::{BBox, Image};
use wagner_det::harness::{
    degrade_to_detections, gen_synthetic_annotations, random_heads, time_decode, BenchConfig,
    DegradeSpec, SyntheticConfig,
};
use wagner_det::trainmath::{lr_at, ScheduleKind, ScheduleSpec};
use wagner_det::voc::{
    kfold_split_ids, parse_voc_xml, write_voc_xml, CategoryTable, GroundTruthObject, ImageAnnotation,
};

type Check = fn();

fn main() {
    let criteria: [(&str, Duration, Check); 10] = [
        ("table arithmetic", Duration::from_secs(1), table_arithmetic),
        ("split fidelity", Duration::from_secs(1), split_fidelity),
        ("anchor fixed point and monotone objective", Duration::from_secs(10), anchors),
        ("mixup contract", Duration::from_secs(10), mixup_contract),
        ("schedule anchors", Duration::from_secs(1), schedules),
        ("mAP oracle equivalence", Duration::from_secs(60), map_oracle),
        ("NMS oracle equivalence", Duration::from_secs(10), nms_oracle),
        ("decode hand case and cell shifts", Duration::from_secs(1), decode_hand_case),
        ("round trip and determinism", Duration::from_secs(30), round_trip_and_determinism),
        ("bench sanity", Duration::from_secs(30), bench_sanity),
    ];

    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, budget, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check));
        let took = start.elapsed();
        let verdict = match outcome {
            Ok(()) if took <= *budget => "PASS".to_string(),
            Ok(()) => format!("FAIL (over the {budget:?} budget)"),
            Err(e) => format!("FAIL ({})", panic_text(&e)),
        };
        if !verdict.starts_with("PASS") {
            failed += 1;
        }
        println!("criterion {:>2} {name}: {verdict} [{:.3} s]", i + 1, took.as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all 10 criteria passed");
}

fn panic_text(e: &Box<dyn std::any::Any + Send>) -> String {
    e.downcast_ref::<String>()
        .cloned()
        .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "panic".into())
        .replace('\n', " ")
}

fn names() -> Vec<String> {
    CategoryTable::default().names().to_vec()
}

fn table_arithmetic() {
    let refined = [96.88, 88.76, 89.79, 91.26, 89.58, 95.41].map(Some);
    let r = EvalReport::from_category_aps(&names(), &refined).unwrap();
    let map = r.map.unwrap();
    assert!((map - 91.95).abs() <= 0.005, "refinements mAP {map}");

    let runs: Vec<(String, EvalReport)> = [
        ("baseline", 90.59),
        ("cosine", 90.87),
        ("smoothing", 91.08),
        ("mixup", 91.95),
    ]
    .iter()
    .map(|&(n, m)| (n.to_string(), EvalReport::from_category_aps(&["all"], &[Some(m)]).unwrap()))
    .collect();
    let table = ablation_report(&runs, "baseline").unwrap();
    let deltas: Vec<f64> = table.rows.iter().map(|r| r.delta).collect();
    assert_eq!(deltas, [0.0, 0.28, 0.49, 1.36]);
}

fn split_fidelity() {
    let ids: Vec<String> = (0..2688).map(|i| format!("img{i:04}")).collect();
    let folds = kfold_split_ids(&ids, 7).unwrap();
    assert_eq!(folds.len(), 5);
    assert!(folds
        .iter()
        .any(|f| (f.train.len(), f.val.len(), f.test.len()) == (1882, 268, 538)));

    let mut tests: Vec<&String> = folds.iter().flat_map(|f| &f.test).collect();
    tests.sort();
    let mut all: Vec<&String> = ids.iter().collect();
    all.sort();
    assert_eq!(tests, all, "test blocks do not partition the ids");
    for f in &folds {
        let mut used: Vec<&String> = f.train.iter().chain(&f.val).chain(&f.test).collect();
        used.sort();
        used.dedup();
        assert_eq!(used.len(), f.train.len() + f.val.len() + f.test.len(), "fold {} overlaps", f.fold);
    }
}

fn anchors() {
    let got = kmeans_anchors(&DEFAULT_PRIORS, &KMeansConfig::default()).unwrap();
    assert_eq!(got.as_slice(), &DEFAULT_PRIORS[..]);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut steps = 0;
    for instance in 0..20 {
        let shapes: Vec<BoxShape> = (0..500)
            .map(|_| BoxShape::new(rng.random_range(4.0..400.0), rng.random_range(4.0..400.0)))
            .collect();
        let cfg = KMeansConfig { seed: instance, ..KMeansConfig::default() };
        let run = kmeans(&shapes, &cfg).unwrap();
        for w in run.objective_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "instance {instance}: objective rose {} -> {}", w[0], w[1]);
        }
        steps += run.objective_history.len() - 1;
    }
    assert!(steps >= 20 * 3, "only {steps} Lloyd steps were checked");
}

fn random_sample(rng: &mut impl Rng, id: &str) -> Sample {
    let (w, h) = (rng.random_range(1..24usize), rng.random_range(1..24usize));
    let data = (0..w * h * 3).map(|_| rng.random::<f32>()).collect();
    let objects = (0..rng.random_range(0..4))
        .map(|_| {
            let x0 = rng.random_range(0..w) as f64;
            let y0 = rng.random_range(0..h) as f64;
            let mut o = GroundTruthObject::new(
                rng.random_range(0..6),
                BBox::new(x0, y0, x0 + 1.0, y0 + 1.0).unwrap(),
            );
            o.weight = rng.random_range(0.1..=1.0);
            o
        })
        .collect();
    let ann = ImageAnnotation { image_id: id.into(), width: w as u32, height: h as u32, objects };
    Sample::new(Image::new(w, h, data).unwrap(), ann).unwrap()
}

fn mixup_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let beta = Beta::new(1.5, 1.5).unwrap();
    for _ in 0..100 {
        let a = random_sample(&mut rng, "a");
        let b = random_sample(&mut rng, "b");
        let lambda: f64 = beta.sample(&mut rng);
        let m = mixup(&a, &b, lambda).unwrap().sample;

        let (w, h) = (a.image.width().max(b.image.width()), a.image.height().max(b.image.height()));
        assert_eq!((m.image.width(), m.image.height()), (w, h));
        let px = |img: &Image, x: usize, y: usize, c: usize| {
            if x < img.width() && y < img.height() { img.get(x, y, c) } else { 0.0 }
        };
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let want = (lambda * f64::from(px(&a.image, x, y, c))
                        + (1.0 - lambda) * f64::from(px(&b.image, x, y, c))) as f32;
                    assert_eq!(m.image.get(x, y, c), want, "cell ({x},{y},{c})");
                }
            }
        }

        let expect: Vec<f64> = a.annotation.objects.iter().map(|o| o.weight * lambda)
            .chain(b.annotation.objects.iter().map(|o| o.weight * (1.0 - lambda)))
            .filter(|&w| w > 0.0)
            .collect();
        let got: Vec<f64> = m.annotation.objects.iter().map(|o| o.weight).collect();
        assert_eq!(got, expect);

        let whole = mixup(&a, &b, 1.0).unwrap().sample;
        assert_eq!(whole.annotation.objects, a.annotation.objects);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    assert_eq!(whole.image.get(x, y, c), px(&a.image, x, y, c));
                }
            }
        }
    }
}

fn schedules() {
    let step = ScheduleSpec::default_step(1e-3);
    for (epoch, want) in [(0.0, 1e-3), (159.0, 1e-3), (160.0, 1e-4), (179.0, 1e-4), (180.0, 1e-5), (199.0, 1e-5)] {
        let got = lr_at(&step, epoch).unwrap();
        assert!((got - want).abs() <= 1e-15, "step lr({epoch}) = {got}");
    }

    let cos = ScheduleSpec {
        base_lr: 0.1,
        total_epochs: 70,
        warmup_epochs: 0,
        kind: ScheduleKind::Cosine { eta_min: 0.001, t0: 10.0, t_mult: 2.0 },
    };
    // cycles are [0, 10), [10, 30), [30, 70)
    for restart in [0.0, 10.0, 30.0] {
        assert_eq!(lr_at(&cos, restart).unwrap(), 0.1, "restart at {restart}");
    }
    for (end, mid) in [(10.0, 5.0), (30.0, 20.0), (70.0, 50.0)] {
        let near_end = lr_at(&cos, end - 1e-9).unwrap();
        assert!((near_end - 0.001).abs() < 1e-12, "cycle end {end}: {near_end}");
        let m = lr_at(&cos, mid).unwrap();
        assert!((m - (0.1 + 0.001) / 2.0).abs() < 1e-15, "midpoint {mid}: {m}");
    }
}

fn map_oracle() {
    let table = CategoryTable::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for instance in 0..200u64 {
        let cfg = SyntheticConfig {
            seed: instance,
            n_images: rng.random_range(1..=20),
            ..SyntheticConfig::default()
        };
        let ds = gen_synthetic_annotations(&cfg, &table).unwrap();
        let tp_lo = rng.random_range(0.01..1.0);
        let fp_lo = rng.random_range(0.01..1.0);
        let spec = DegradeSpec {
            miss_rate: rng.random_range(0.0..=1.0),
            fp_rate: rng.random_range(0.0..4.0),
            loc_noise: rng.random_range(0.0..10.0),
            tp_scores: (tp_lo, rng.random_range(tp_lo..=1.0)),
            fp_scores: (fp_lo, rng.random_range(fp_lo..=1.0)),
            seed: instance,
        };
        let degraded = degrade_to_detections(&ds, &spec).unwrap();
        for mode in [ApMode::Continuous, ApMode::ElevenPoint] {
            let report = evaluate(&ds, &degraded.detections, &EvalConfig { iou_thresh: 0.5, mode }).unwrap();
            for (cat, want) in report.categories.iter().zip(degraded.oracle.for_mode(mode)) {
                match (cat.ap, want) {
                    (Some(got), Some(want)) => assert!(
                        (got / 100.0 - want).abs() <= 1e-12,
                        "instance {instance} {mode} {}: {got} vs {want}",
                        cat.name
                    ),
                    (None, None) => {}
                    other => panic!("instance {instance} {mode} {}: {other:?}", cat.name),
                }
            }
            match (report.map, degraded.oracle.map(mode)) {
                (Some(got), Some(want)) => assert!((got / 100.0 - want).abs() <= 1e-12),
                (None, None) => {}
                other => panic!("instance {instance} {mode} mAP: {other:?}"),
            }
        }
    }
}

fn reference_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.xmax.min(b.xmax) - a.xmin.max(b.xmin)).max(0.0);
    let ih = (a.ymax.min(b.ymax) - a.ymin.max(b.ymin)).max(0.0);
    let inter = iw * ih;
    let union = (a.xmax - a.xmin) * (a.ymax - a.ymin) + (b.xmax - b.xmin) * (b.ymax - b.ymin) - inter;
    if union > 0.0 { inter / union } else { 0.0 }
}

/// Textbook greedy NMS: take the best remaining box, drop everything of its
/// category that overlaps it too much, repeat.
fn reference_nms(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let mut pool: Vec<(usize, &Detection)> = dets.iter().enumerate().collect();
    let mut out = Vec::new();
    while !pool.is_empty() {
        let mut best = 0;
        for i in 1..pool.len() {
            let (bi, b) = pool[best];
            let (ci, c) = pool[i];
            if c.score > b.score || (c.score == b.score && ci < bi) {
                best = i;
            }
        }
        let (_, keep) = pool.remove(best);
        pool.retain(|(_, d)| d.category != keep.category || reference_iou(&d.bbox, &keep.bbox) <= thr);
        out.push(keep.clone());
    }
    out
}

fn nms_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for instance in 0..1000 {
        let n = rng.random_range(0..=50);
        let dets: Vec<Detection> = (0..n)
            .map(|_| {
                let (x, y) = (rng.random_range(0.0..60.0), rng.random_range(0.0..60.0));
                let (w, h) = (rng.random_range(1.0..30.0), rng.random_range(1.0..30.0));
                Detection {
                    image_id: "img".into(),
                    category: rng.random_range(0..3),
                    // a coarse score grid makes ties common
                    score: f64::from(rng.random_range(1..=20u32)) / 20.0,
                    bbox: BBox::new(x, y, x + w, y + h).unwrap(),
                }
            })
            .collect();
        let thr = rng.random_range(0.0..1.0);
        assert_eq!(nms(&dets, thr), reference_nms(&dets, thr), "instance {instance}");
    }
}

fn decode_hand_case() {
    let t = HeadTensor::zeros(4, 8, 1).unwrap();
    let priors = [BoxShape::new(12.0, 10.0), BoxShape::new(16.0, 28.0), BoxShape::new(30.0, 26.0)];
    let dets = decode_scale(&t, &priors, 1e-8).unwrap();
    assert_eq!(dets[0].bbox, BBox::new(-2.0, -1.0, 10.0, 9.0).unwrap());
    assert_eq!(dets[0].score, 0.25);

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let anchors = AnchorSet::default();
    for _ in 0..100 {
        let scale = Scale::ALL[rng.random_range(0..3)];
        let s = rng.random_range(2..20usize);
        let stride = f64::from(scale.stride());
        let (x, y, a) = (rng.random_range(0..s - 1), rng.random_range(0..s - 1), rng.random_range(0..3));
        let (dx, dy) = (rng.random_range(0..s - x), rng.random_range(0..s - y));
        let v: [f32; 4] = std::array::from_fn(|_| rng.random_range(-4.0..4.0));
        let mut t0 = HeadTensor::zeros(s, scale.stride(), 1).unwrap();
        let mut t1 = t0.clone();
        t0.slot_mut(x, y, a)[..4].copy_from_slice(&v);
        t1.slot_mut(x + dx, y + dy, a)[..4].copy_from_slice(&v);
        let prior = anchors.group(scale)[a];
        let b0 = slot_box(&t0, prior, x, y, a).unwrap();
        let b1 = slot_box(&t1, prior, x + dx, y + dy, a).unwrap();
        assert_eq!(b1, b0.translate(dx as f64 * stride, dy as f64 * stride));
    }
}

fn random_annotation(rng: &mut impl Rng, i: usize) -> ImageAnnotation {
    let (w, h) = (rng.random_range(1..3000u32), rng.random_range(1..3000u32));
    let objects = (0..rng.random_range(0..8))
        .map(|_| {
            let (x0, x1) = (rng.random_range(0..w), rng.random_range(0..w));
            let (y0, y1) = (rng.random_range(0..h), rng.random_range(0..h));
            let bbox = BBox::new(
                x0.min(x1) as f64,
                y0.min(y1) as f64,
                (x0.max(x1) + 1) as f64,
                (y0.max(y1) + 1) as f64,
            )
            .unwrap();
            let mut o = GroundTruthObject::new(rng.random_range(0..6), bbox);
            o.weight = if rng.random_bool(0.5) { 1.0 } else { rng.random_range(0.01..1.0) };
            o.difficult = rng.random_bool(0.3);
            o.truncated = rng.random_bool(0.3);
            o
        })
        .collect();
    ImageAnnotation { image_id: format!("case & <{i}>"), width: w, height: h, objects }
}

fn run_cli(dir: &Path, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_wagner-det"))
        .args(["--seed", "11", "--out-dir"])
        .arg(dir)
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "`{}` failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Runs every subcommand once, writing into `root`.
fn cli_pipeline(root: &Path) {
    let p = |rel: &str| root.join(rel).to_string_lossy().into_owned();
    let synth = p("synth");
    run_cli(Path::new(&synth), &["synth", "--n-images", "12", "--heads-res", "64"]);
    let manifest = p("synth/manifest.tsv");
    run_cli(&root.join("stats"), &["stats", "--manifest", &manifest]);
    run_cli(&root.join("split"), &["split", "--manifest", &manifest]);
    let fold = p("split/fold0.json");
    run_cli(&root.join("anchors"), &["anchors", "--manifest", &manifest, "--fold", &fold]);
    run_cli(&root.join("augment"), &["augment", "--manifest", &manifest, "--epochs", "2"]);
    run_cli(&root.join("schedule"), &["schedule", "dump", "--kind", "cosine", "--epochs", "30"]);
    run_cli(
        &root.join("decode"),
        &["decode", "--batch", &p("synth/decode_batch.tsv"), "--anchors", &p("anchors/anchors.csv")],
    );
    let dets = p("synth/detections.jsonl");
    run_cli(&root.join("eval_a"), &["eval", "--gt", &manifest, "--dets", &dets]);
    run_cli(
        &root.join("eval_b"),
        &["eval", "--gt", &manifest, "--dets", &dets, "--ap-mode", "elevenpoint", "--folds", &fold],
    );
    std::fs::copy(root.join("eval_a/eval_report.json"), root.join("base.json")).unwrap();
    std::fs::copy(root.join("eval_b/eval_report.json"), root.join("eleven.json")).unwrap();
    run_cli(&root.join("ablate"), &["ablate", "--baseline", &p("base.json"), "--runs", &p("eleven.json")]);
    run_cli(&root.join("bench"), &["bench", "--resolutions", "64,128", "--trials", "2"]);
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(base: &Path, dir: &Path, acc: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                walk(base, &path, acc);
            } else {
                acc.insert(path.strip_prefix(base).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    let mut acc = BTreeMap::new();
    walk(root, root, &mut acc);
    acc
}

fn round_trip_and_determinism() {
    let table = CategoryTable::default();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for i in 0..100 {
        let ann = random_annotation(&mut rng, i);
        let once = parse_voc_xml(&write_voc_xml(&ann, &table), &table).unwrap();
        assert_eq!(once, ann);
        let twice = parse_voc_xml(&write_voc_xml(&once, &table), &table).unwrap();
        assert_eq!(twice, once);
    }

    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    cli_pipeline(a.path());
    cli_pipeline(b.path());
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert!(ta.len() > 40, "pipeline wrote only {} files", ta.len());
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    for (path, bytes) in &ta {
        assert!(&tb[path] == bytes, "{} differs between runs", path.display());
    }
}

fn bench_sanity() {
    let w: Vec<u32> = (10..=19).map(|i| i * 32).collect();
    let cfg = BenchConfig { resolutions: w.clone(), trials: 1, ..BenchConfig::default() };
    let rows = time_decode(&cfg).unwrap();
    for (row, r) in rows.iter().zip(&w) {
        let cells = u64::from((r / 8).pow(2) + (r / 16).pow(2) + (r / 32).pow(2));
        assert_eq!(row.counts.grid_cells, cells, "resolution {r}");
        assert_eq!(row.counts.anchor_slots, 3 * cells);
        assert_eq!(grid_cells(*r), cells);
        assert!(row.counts.candidates <= 3 * cells * cfg.num_classes as u64);
    }

    // one warm-up, then the best of five single-threaded runs
    let heads = random_heads(608, 6, 0).unwrap();
    let anchors = AnchorSet::default();
    let dcfg = DecodeConfig::default();
    decode_full("warm", &heads, &anchors, 608, (608, 608), &dcfg).unwrap();
    let best = (0..5)
        .map(|_| {
            let start = Instant::now();
            let out = decode_full("b", &heads, &anchors, 608, (608, 608), &dcfg).unwrap();
            std::hint::black_box(out);
            start.elapsed()
        })
        .min()
        .unwrap();
    assert!(best < Duration::from_millis(50), "608 decode took {best:?}");
}
