//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//!     cargo test --release --test acceptance            # all criteria
//!     cargo test --release --test acceptance -- 3 5     # a subset

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng;
use spectrum_xai::cli::{load_checkpoint, Checkpoint};
use spectrum_xai::data::{
    prepare_segments, read_psd_file, region_count, segment, segment_count, synth_generate, to_pgm, PsdFormat,
    PsdMatrix, PsdMeta, ScalingMode, SegmentationConfig, SpectrogramSegment, SynthConfig,
};
use spectrum_xai::gbp::input_attribution;
use spectrum_xai::gradcheck::{gradient_check, GradCheckOptions};
use spectrum_xai::kmeans::{kmeans_fit, nmi, KmeansInit, KmeansOptions};
use spectrum_xai::linalg::Matrix;
use spectrum_xai::nn::{ArchConfig, BackwardObserver, CnnModel, LayerSpec, ReluRule};
use spectrum_xai::pca::{covariance, pca_fit, PcaModel};
use spectrum_xai::report::average_spectrogram;
use spectrum_xai::trainer::{extract_features, final_clustering, train, TrainConfig};
use spectrum_xai::tree::{build_tree, fidelity, Node, ShallowTree};

use common::{random_tensor, rng};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness

fn gradients() -> Check {
    let start = Instant::now();
    let cases: Vec<(&str, [usize; 3], Vec<LayerSpec>, usize)> = vec![
        (
            "linear",
            [1, 3, 4],
            vec![
                LayerSpec::Flatten,
                LayerSpec::Linear { inputs: 12, outputs: 5 },
                LayerSpec::Linear { inputs: 5, outputs: 3 },
            ],
            1,
        ),
        (
            "relu",
            [1, 4, 4],
            vec![
                LayerSpec::Flatten,
                LayerSpec::Linear { inputs: 16, outputs: 10 },
                LayerSpec::Relu,
                LayerSpec::Linear { inputs: 10, outputs: 4 },
            ],
            2,
        ),
        (
            "conv2d",
            [2, 5, 5],
            vec![
                LayerSpec::Conv2d { in_ch: 2, out_ch: 3, kernel: 3, stride: 2, pad: 1 },
                LayerSpec::Flatten,
                LayerSpec::Linear { inputs: 27, outputs: 4 },
            ],
            1,
        ),
        (
            "maxpool",
            [1, 6, 6],
            vec![
                LayerSpec::Conv2d { in_ch: 1, out_ch: 2, kernel: 3, stride: 1, pad: 1 },
                LayerSpec::MaxPool2d { kernel: 2, stride: 2 },
                LayerSpec::Flatten,
                LayerSpec::Linear { inputs: 18, outputs: 3 },
            ],
            2,
        ),
    ];
    let mut models: Vec<(String, CnnModel, usize)> = Vec::new();
    for (i, (name, shape, specs, tap)) in cases.into_iter().enumerate() {
        models.push((name.into(), ok(CnnModel::initialized(shape, &specs, tap, i as u64))?, 3));
    }
    let seed = rand::thread_rng().gen::<u64>() % 1_000_000;
    let arch = ArchConfig { channels: vec![4, 8, 8], feature_dim: 16 };
    models.push((format!("compact CNN (seed {seed})"), ok(CnnModel::compact(16, 8, &arch, seed))?, 1));

    // A probe is dropped when the perturbation crosses a ReLU or pooling kink
    // anywhere in the batch, which happens often for early convolutions.
    // Rounds with fresh inputs continue until every blob has been probed.
    const ROUNDS: u64 = 50;
    let mut worst = 0.0f64;
    let mut probes = 0;
    for (i, (name, model, batch)) in models.iter().enumerate() {
        let [c, h, w] = model.input_shape();
        let mut per_blob: BTreeMap<String, usize> = BTreeMap::new();
        for round in 0..ROUNDS {
            let inputs = random_tensor(&[*batch, c, h, w], 100 * i as u64 + round);
            let labels: Vec<usize> = (0..*batch).map(|b| (b + round as usize) % model.classes()).collect();
            let opts = GradCheckOptions { seed: round, ..Default::default() };
            let r = ok(gradient_check(model, &inputs, &labels, &opts))?;
            ensure!(r.max_rel_err < 1e-4, "{name}: max relative error {:.3e}", r.max_rel_err);
            worst = worst.max(r.max_rel_err);
            for check in &r.checks {
                let key = format!("{:?}.{}", check.layer, check.kind);
                *per_blob.entry(key).or_default() += check.probes;
                probes += check.probes;
            }
            if per_blob.values().all(|&n| n > 0) {
                break;
            }
        }
        let empty: Vec<&String> = per_blob.iter().filter(|(_, &n)| n == 0).map(|(k, _)| k).collect();
        ensure!(empty.is_empty(), "{name}: no usable probes for {empty:?} in {ROUNDS} rounds");
    }
    let t = start.elapsed();
    ensure!(t < Duration::from_secs(30), "took {:.1}s", t.as_secs_f64());
    Ok(format!("max rel err {worst:.2e}, {probes} probes over {} models", models.len()))
}

// ---------------------------------------------------------------------------
// 2. Guided backprop rule

#[derive(Default)]
struct ReluLog {
    calls: usize,
    violations: usize,
    elements: usize,
}

impl BackwardObserver for ReluLog {
    fn relu(&mut self, _layer: usize, pre: &[f64], incoming: &[f64], outgoing: &[f64]) {
        self.calls += 1;
        for ((&p, &g), &o) in pre.iter().zip(incoming).zip(outgoing) {
            self.elements += 1;
            let expect = if p > 0.0 && g > 0.0 { g } else { 0.0 };
            if o != expect {
                self.violations += 1;
            }
        }
    }
}

fn guided_rule() -> Check {
    let mut log = ReluLog::default();
    for seed in 0..5 {
        let m = ok(CnnModel::compact(16, 8, &ArchConfig { channels: vec![4, 8, 8], feature_dim: 16 }, seed))?;
        let relus = m.layers().iter().filter(|l| l.spec == LayerSpec::Relu).count();
        for target in 0..8 {
            let x = random_tensor(&[1, 1, 16, 16], seed * 10 + target as u64);
            let before = log.calls;
            ok(input_attribution(&m, x.data(), target, ReluRule::Guided, Some(&mut log)))?;
            ensure!(log.calls - before == relus, "observer saw {} of {relus} ReLUs", log.calls - before);
        }
    }
    ensure!(log.violations == 0, "{} of {} elements broke the rule", log.violations, log.elements);

    let specs = [
        LayerSpec::Conv2d { in_ch: 1, out_ch: 3, kernel: 3, stride: 1, pad: 1 },
        LayerSpec::MaxPool2d { kernel: 2, stride: 2 },
        LayerSpec::Flatten,
        LayerSpec::Linear { inputs: 3 * 4 * 4, outputs: 6 },
        LayerSpec::Linear { inputs: 6, outputs: 4 },
    ];
    for seed in 0..5 {
        let m = ok(CnnModel::initialized([1, 8, 8], &specs, 3, seed))?;
        let x = random_tensor(&[1, 1, 8, 8], seed);
        for target in 0..4 {
            let g = ok(input_attribution(&m, x.data(), target, ReluRule::Guided, None))?;
            let s = ok(input_attribution(&m, x.data(), target, ReluRule::Standard, None))?;
            let same = g.iter().zip(&s).all(|(a, b)| a.to_bits() == b.to_bits());
            ensure!(same, "ReLU-free model: guided and standard gradients differ");
        }
    }
    Ok(format!("{} ReLU elements checked, ReLU-free maps bit-identical", log.elements))
}

// ---------------------------------------------------------------------------
// 3. Segmentation formula

fn segmentation() -> Check {
    let mut r = rng(3);
    for case in 0..200 {
        let w = r.gen_range(1..=12);
        let bins = r.gen_range(1..=48);
        let t = r.gen_range(1..=48);
        let values: Vec<f32> = (0..bins * t).map(|_| r.gen_range(-120.0..-40.0)).collect();
        let m = ok(PsdMatrix::new(bins, t, values, PsdMeta::default()))?;
        let cfg = SegmentationConfig { window: w, scaling_mode: ScalingMode::GlobalMinmax };
        let Ok(segs) = segment(&m, &cfg) else {
            ensure!(w > bins || w < 2, "case {case}: rejected bins {bins} T {t} W {w}");
            continue;
        };
        let expect = (bins / w) * (t / w);
        ensure!(segs.len() == expect, "case {case}: {} segments, expected {expect}", segs.len());
        ensure!(segment_count(bins, t, w) == expect, "segment_count disagrees");
        let mut covered = vec![0u8; bins * t];
        for s in &segs {
            for row in 0..w {
                for col in 0..w {
                    let (b, tt) = (s.freq_region * w + row, s.time_index * w + col);
                    covered[b * t + tt] += 1;
                    ensure!(s.pixel(row, col) == m.get(b, tt) as f64, "case {case}: pixel mismatch");
                }
            }
        }
        for b in 0..bins {
            for tt in 0..t {
                let inside = b < (bins / w) * w && tt < (t / w) * w;
                ensure!(covered[b * t + tt] == inside as u8, "case {case}: not a partition");
            }
        }
    }
    ensure!(region_count(1024, 128) == 8, "1024 bins / W=128 gave {} regions", region_count(1024, 128));
    let wide = ok(synth_generate(&SynthConfig::wide(128, 0)))?;
    let segs = ok(prepare_segments(&wide.matrix, &SegmentationConfig { window: 128, ..Default::default() }))?;
    ensure!(segs.len() == 8, "1024-bin tile gave {} segments", segs.len());
    let regions: Vec<usize> = segs.iter().map(|s| s.freq_region).collect();
    ensure!(regions == (0..8).collect::<Vec<_>>(), "regions {regions:?}");
    Ok("200 random geometries; 1024/128 gives 8 segments".into())
}

// ---------------------------------------------------------------------------
// 4. PCA

fn pca() -> Check {
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let mut r = rng(seed);
        let (n, d) = (r.gen_range(8..40), r.gen_range(2..10));
        let x = ok(Matrix::new(n, d, (0..n * d).map(|_| r.gen_range(-5.0..5.0)).collect()))?;
        let full = d.min(n);
        let model = ok(pca_fit(&x, full))?;
        for i in 0..full {
            for j in 0..full {
                let dot: f64 = model.components.row(i).iter().zip(model.components.row(j)).map(|(a, b)| a * b).sum();
                let err = (dot - (i == j) as u8 as f64).abs();
                worst = worst.max(err);
                ensure!(err < 1e-8, "seed {seed}: component dot ({i},{j}) = {dot}");
            }
        }
        let (_, cov) = covariance(&x);
        let trace: f64 = (0..d).map(|i| cov.get(i, i)).sum();
        let eig: f64 = model.eigenvalues.iter().sum();
        ensure!((eig - trace).abs() < 1e-8, "seed {seed}: eigenvalue sum {eig} vs trace {trace}");
        if full == d {
            for row in x.rows() {
                let back = model.inverse_transform_one(&ok(model.transform_one(row))?);
                let err = row.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                worst = worst.max(err);
                ensure!(err < 1e-8, "seed {seed}: reconstruction error {err}");
            }
        }
    }
    let eigs = [4.0, 3.0, 2.0, 1.0];
    let toy = PcaModel {
        mean: vec![0.0; 4],
        components: ok(Matrix::new(4, 4, (0..16).map(|i| (i % 5 == 0) as u8 as f64).collect()))?,
        eigenvalues: eigs.to_vec(),
        evr: eigs.iter().map(|e| e / 10.0).collect(),
        total_variance: 10.0,
        whiten: false,
    };
    let n = ok(toy.select_dims(0.65))?;
    ensure!(n == 2, "select_dims(0.65) on 4,3,2,1 returned {n}");
    Ok(format!("worst orthonormality/reconstruction error {worst:.1e}; select_dims = 2"))
}

// ---------------------------------------------------------------------------
// 5. K-means

fn kmeans() -> Check {
    let mut monotone_runs = 0;
    for seed in 0..10 {
        let mut r = rng(seed);
        let (n, d) = (r.gen_range(20..80), r.gen_range(1..5));
        let x = ok(Matrix::new(n, d, (0..n * d).map(|_| r.gen_range(-3.0..3.0)).collect()))?;
        for init in [KmeansInit::RandomPoints, KmeansInit::KmeansPp] {
            let opts = KmeansOptions { init, ..KmeansOptions::new(4, seed) };
            let (m, _) = ok(kmeans_fit(&x, &opts))?;
            let h = &m.inertia_history;
            ensure!(h.windows(2).all(|w| w[1] <= w[0]), "seed {seed}: inertia rose: {h:?}");
            monotone_runs += 1;
        }
    }
    let pp = |k, seed| KmeansOptions { init: KmeansInit::KmeansPp, restarts: 10, ..KmeansOptions::new(k, seed) };
    let centers = vec![vec![0.0, 0.0, 0.0], vec![8.0, 0.0, 0.0], vec![0.0, 8.0, 0.0]];
    let (x, truth) = common::blobs(&centers, 50, 1.0, 5);
    let (_, labels) = ok(kmeans_fit(&x, &pp(3, 0)))?;
    let score = ok(nmi(&labels, &truth))?;
    ensure!(score == 1.0, "3-blob NMI {score}");

    let x = ok(Matrix::from_rows(&[vec![0.0], vec![1.0], vec![9.0], vec![10.0]]))?;
    // Exhaustive oracle: the best 2-partition of {0,1,9,10} is {0,1},{9,10}.
    let mut oracle = f64::INFINITY;
    let pts = [0.0, 1.0, 9.0, 10.0];
    for mask in 1..15u32 {
        let cost = |sel: bool| {
            let g: Vec<f64> = (0..4).filter(|i| (mask >> i & 1 == 1) == sel).map(|i| pts[i]).collect();
            let m = g.iter().sum::<f64>() / g.len() as f64;
            g.iter().map(|v| (v - m) * (v - m)).sum::<f64>()
        };
        oracle = oracle.min(cost(true) + cost(false));
    }
    let (m, _) = ok(kmeans_fit(&x, &pp(2, 0)))?;
    ensure!(oracle == 1.0 && (m.inertia - oracle).abs() < 1e-12, "inertia {} vs oracle {oracle}", m.inertia);
    Ok(format!("{monotone_runs} runs monotone; 3-blob NMI 1.0; 1-D inertia 1.0"))
}

// ---------------------------------------------------------------------------
// 6. Clustering-cycle experiment

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn cycle_experiment() -> Check {
    let start = Instant::now();
    let mut finals: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut off_cycle = Vec::new();
    for seed in 0..3u64 {
        let synth = SynthConfig::desk(seed);
        let out = ok(synth_generate(&synth))?;
        let segs = ok(prepare_segments(&out.matrix, &SegmentationConfig { window: synth.window, ..Default::default() }))?;
        ensure!(segs.len() == 2000, "{} segments", segs.len());
        for cycle in [1, 5] {
            let cfg = TrainConfig { clustering_cycle: cycle, ..TrainConfig::desk(seed) };
            ensure!(cfg.k == 8 && cfg.epochs_total == 60, "desk config is not k=8, 60 epochs");
            let h = ok(train(&segs, &cfg))?.history;
            finals.entry(cycle).or_default().push(h.final_loss().unwrap_or(f64::NAN));
            if cycle > 1 {
                let bad: Vec<usize> = h.spike_epochs().into_iter().filter(|e| e % cycle != 0).collect();
                if !bad.is_empty() {
                    off_cycle.push(format!("seed {seed} C={cycle} at {bad:?}"));
                }
            }
            eprintln!("  seed {seed} C={cycle}: final loss {:.4} ({:.0}s)", h.final_loss().unwrap_or(f64::NAN), start.elapsed().as_secs_f64());
        }
    }
    let (m1, m5) = (median(finals[&1].clone()), median(finals[&5].clone()));
    let summary = format!("median final loss C=1 {m1:.4}, C=5 {m5:.4}; {:.0}s", start.elapsed().as_secs_f64());
    ensure!(m5 < m1, "{summary}");
    ensure!(off_cycle.is_empty(), "loss rose off-cycle: {}; {summary}", off_cycle.join(", "));
    Ok(summary)
}

// ---------------------------------------------------------------------------
// End-to-end pipeline shared by 7-10

struct Pipeline {
    root: tempfile::TempDir,
    elapsed: Duration,
}

impl Pipeline {
    fn dir(&self) -> &Path {
        self.root.path()
    }
    fn psd(&self) -> PathBuf {
        self.dir().join("psd.bin")
    }
    fn checkpoint(&self) -> Result<Checkpoint, String> {
        ok(load_checkpoint(&self.dir().join("checkpoint")))
    }
    fn report(&self) -> PathBuf {
        self.dir().join("report/run")
    }
    fn segments(&self, ck: &Checkpoint) -> Result<Vec<SpectrogramSegment>, String> {
        let m = ok(read_psd_file(&self.psd(), PsdFormat::RawF32Le))?;
        ok(prepare_segments(&m, &ck.meta.segmentation))
    }
}

fn spectrum_xai(args: &[&str]) -> Result<String, String> {
    let o = ok(Command::new(env!("CARGO_BIN_EXE_spectrum-xai")).env_remove("SPECTRUM_XAI_SEED").args(args).output())?;
    if !o.status.success() {
        return Err(format!(
            "`spectrum-xai {}` exited {:?}: {}",
            args.join(" "),
            o.status.code(),
            String::from_utf8_lossy(&o.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&o.stdout).into_owned())
}

fn run_pipeline() -> Result<Pipeline, String> {
    let root = ok(tempfile::tempdir())?;
    let out = root.path().to_str().unwrap().to_string();
    let psd = root.path().join("psd.bin");
    let psd = psd.to_str().unwrap();
    let start = Instant::now();
    spectrum_xai(&["--out", &out, "synth", "--duration", "4000", "--seed", "0"])?;
    spectrum_xai(&["--out", &out, "train", "--data", psd])?;
    spectrum_xai(&["--out", &out, "explain", "--data", psd])?;
    let elapsed = start.elapsed();
    eprintln!("  pipeline finished in {:.0}s", elapsed.as_secs_f64());
    Ok(Pipeline { root, elapsed })
}

// ---------------------------------------------------------------------------
// 7. PCA keeps clusterability

fn clusterability(p: &Pipeline) -> Check {
    let ck = p.dir().join("checkpoint");
    let stdout = spectrum_xai(&[
        "--out",
        p.dir().to_str().unwrap(),
        "verify",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--data",
        p.psd().to_str().unwrap(),
        "--evr-threshold",
        "0.9",
    ])?;
    let score: f64 = stdout
        .lines()
        .find_map(|l| l.strip_prefix("NMI full_vs_reduced="))
        .ok_or("verify printed no NMI")?
        .trim()
        .parse()
        .map_err(|e| format!("{e}"))?;
    let dims = stdout.lines().find(|l| l.starts_with("selected")).unwrap_or("").to_string();
    ensure!(score >= 0.9, "NMI {score:.4} < 0.9 ({dims})");
    Ok(format!("NMI {score:.4}; {dims}"))
}

// ---------------------------------------------------------------------------
// 8. Shallow tree

fn same_structure(a: &Node, b: &Node) -> bool {
    match (a, b) {
        (Node::Leaf { label: la, .. }, Node::Leaf { label: lb, .. }) => la == lb,
        (
            Node::Split { feature: fa, threshold: ta, left: la, right: ra, .. },
            Node::Split { feature: fb, threshold: tb, left: lb, right: rb, .. },
        ) => fa == fb && (ta - tb).abs() <= 1e-9 && same_structure(la, lb) && same_structure(ra, rb),
        _ => false,
    }
}

fn shallow_tree(p: &Pipeline) -> Check {
    // Separated blobs against the exhaustive oracle.
    let blob_centers = vec![vec![0.0, 0.0], vec![10.0, 0.0], vec![0.0, 10.0], vec![10.0, 10.0]];
    let (x, labels) = common::blobs(&blob_centers, 8, 0.5, 1);
    let tree = ok(build_tree(&x, &labels, 4, 0.03))?;
    let mistakes: usize = tree.leaf_stats().iter().map(|l| l.mistakes).sum();
    ensure!(tree.depth == 2 && mistakes == 0, "4 blobs: depth {} with {mistakes} mistakes", tree.depth);
    let (_, o_mistakes, o_depth) = common::oracle::exhaustive_best(&x, &labels, 4, 0.03);
    ensure!((o_mistakes, o_depth) == (0, 2), "oracle optimum has depth {o_depth}, {o_mistakes} mistakes");

    // The trained checkpoint.
    let ck = p.checkpoint()?;
    let segs = p.segments(&ck)?;
    let k = ck.kmeans.k;
    let feats = ok(extract_features(&ck.model, &segs))?;
    let reduced = ok(ck.pca.transform(&feats))?;
    let tree = ok(build_tree(&reduced, &ck.labels, k, 0.03))?;
    let stats = tree.leaf_stats();
    let mut leaf_labels: Vec<usize> = stats.iter().map(|l| l.label).collect();
    leaf_labels.sort_unstable();
    ensure!(leaf_labels == (0..k).collect::<Vec<_>>(), "leaf labels {leaf_labels:?}");
    let fid = ok(fidelity(&tree, &reduced, &ck.labels))?;
    ensure!(fid.leaves == stats, "stored leaf counts differ from recomputed fidelity");

    let mut last = usize::MAX;
    let mut depths = Vec::new();
    for lambda in [0.0, 0.01, 0.03, 0.1, 0.3, 1.0] {
        let d = ok(build_tree(&reduced, &ck.labels, k, lambda))?.depth;
        ensure!(d <= last, "depth rose to {d} at lambda {lambda} ({depths:?})");
        depths.push(d);
        last = d;
    }

    // Rebuild from scratch: reload, re-extract, re-fit PCA and K-means.
    let again = p.checkpoint()?;
    let (pca2, _, labels2) = ok(final_clustering(&again.model, &p.segments(&again)?, &again.meta.train))?;
    ensure!(labels2 == ck.labels, "re-fitted clustering differs from the checkpoint labels");
    let reduced2 = ok(pca2.transform(&ok(extract_features(&again.model, &segs))?))?;
    let rebuilt = ok(build_tree(&reduced2, &labels2, k, 0.03))?;
    ensure!(same_structure(&tree.root, &rebuilt.root), "rebuilt tree differs");
    let exported = ok(std::fs::read_to_string(p.report().join("tree.json")))?;
    let exported = ok(ShallowTree::from_json(&exported))?;
    ensure!(same_structure(&tree.root, &exported.root), "report tree differs from rebuild");
    Ok(format!(
        "blobs depth 2 / 0 mistakes = oracle; checkpoint tree depth {}, agreement {:.4}; depths over lambda {depths:?}; rebuild identical",
        tree.depth, fid.agreement
    ))
}

// ---------------------------------------------------------------------------
// 9. Report determinism

fn snapshot(dir: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in ok(std::fs::read_dir(&d))? {
            let path = ok(e)?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_path_buf();
                out.insert(rel, ok(std::fs::read(&path))?);
            }
        }
    }
    Ok(out)
}

fn report_determinism(p: &Pipeline) -> Check {
    let other = ok(tempfile::tempdir())?;
    let ck = p.dir().join("checkpoint");
    spectrum_xai(&[
        "--out",
        other.path().to_str().unwrap(),
        "explain",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--data",
        p.psd().to_str().unwrap(),
    ])?;
    let first = snapshot(&p.dir().join("report"))?;
    let second = snapshot(&other.path().join("report"))?;
    ensure!(first.len() == second.len(), "{} vs {} files", first.len(), second.len());
    for (path, bytes) in &first {
        ensure!(second.get(path) == Some(bytes), "{} differs between runs", path.display());
    }

    let index: serde_json::Value = ok(serde_json::from_slice(&first[Path::new("run/index.json")]))?;
    let ck = p.checkpoint()?;
    let segs = p.segments(&ck)?;
    let mut total = 0;
    for entry in index["clusters"].as_array().ok_or("index has no clusters")? {
        let c = entry["cluster"].as_u64().unwrap() as usize;
        let count = entry["sample_count"].as_u64().unwrap() as usize;
        let hist = String::from_utf8_lossy(&first[&PathBuf::from(format!("run/cluster_{c}/origin_hist.csv"))]).into_owned();
        let sum: usize = hist.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse::<usize>().unwrap()).sum();
        ensure!(sum == count, "cluster {c}: histogram sums to {sum}, {count} members");
        total += count;

        let members: Vec<&SpectrogramSegment> =
            segs.iter().zip(&ck.labels).filter(|(_, &l)| l == c).map(|(s, _)| s).collect();
        ensure!(members.len() == count, "cluster {c}: {} members in the checkpoint", members.len());
        let (avg, _) = ok(average_spectrogram(&members, spectrum_xai::report::DEFAULT_SPECTROGRAM_CAP, 0))?;
        ensure!(avg.iter().all(|v| (0.0..=1.0).contains(v)), "cluster {c}: average pixel outside [0, 1]");
        let w = members[0].window;
        let pgm = &first[&PathBuf::from(format!("run/cluster_{c}/avg_spec.pgm"))];
        ensure!(to_pgm(&avg, w, w).as_bytes() == pgm.as_slice(), "cluster {c}: avg_spec.pgm is not the member average");
    }
    ensure!(total == segs.len(), "clusters hold {total} of {} segments", segs.len());
    Ok(format!("{} report files byte-identical; histograms sum to members", first.len()))
}

// ---------------------------------------------------------------------------
// 10. End-to-end smoke with burst localization

fn csv_rows(path: &Path) -> Result<Vec<Vec<String>>, String> {
    let text = ok(std::fs::read_to_string(path))?;
    Ok(text.lines().skip(1).filter(|l| !l.is_empty()).map(|l| l.split(',').map(String::from).collect()).collect())
}

fn parse_pgm(bytes: &[u8]) -> Result<(usize, Vec<f64>), String> {
    let text = String::from_utf8_lossy(bytes);
    let mut tok = text.split_whitespace();
    ensure!(tok.next() == Some("P2"), "not a P2 PGM");
    let w: usize = tok.next().and_then(|t| t.parse().ok()).ok_or("bad width")?;
    let _h = tok.next();
    let _max = tok.next();
    Ok((w, tok.map(|t| t.parse::<f64>().unwrap_or(0.0)).collect()))
}

fn burst_localization(p: &Pipeline) -> Check {
    ensure!(p.elapsed < Duration::from_secs(20 * 60), "pipeline took {:.0}s", p.elapsed.as_secs_f64());
    let ck = p.checkpoint()?;
    let segs = p.segments(&ck)?;
    let w = segs[0].window;
    let regions = segs.iter().map(|s| s.freq_region).max().unwrap() + 1;
    let archetype: BTreeMap<usize, String> =
        csv_rows(&p.dir().join("labels.csv"))?.into_iter().map(|r| (r[0].parse().unwrap(), r[4].clone())).collect();
    // Burst columns per tile.
    let mut cols: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for r in csv_rows(&p.dir().join("bursts.csv"))? {
        let v: Vec<usize> = r.iter().map(|x| x.parse().unwrap()).collect();
        let (region, time, start, len) = (v[0], v[1], v[2], v[3]);
        let first = start - time * w;
        cols.entry(time * regions + region).or_default().extend(first..first + len);
    }

    let k = ck.kmeans.k;
    let mut checked = Vec::new();
    for c in 0..k {
        let members: Vec<usize> =
            segs.iter().zip(&ck.labels).filter(|(_, &l)| l == c).map(|(s, _)| s.segment_id).collect();
        let bursty = members.iter().filter(|id| archetype[id].contains("burst")).count();
        if members.is_empty() || 2 * bursty <= members.len() {
            continue;
        }
        let mut coverage = vec![0usize; w];
        for id in &members {
            for &col in cols.get(id).into_iter().flatten() {
                coverage[col] += 1;
            }
        }
        let pgm = ok(std::fs::read(p.report().join(format!("cluster_{c}/avg_spec.pgm"))))?;
        let (pw, px) = parse_pgm(&pgm)?;
        ensure!(pw == w && px.len() == w * w, "cluster {c}: PGM is not {w}x{w}");
        let col_energy: Vec<f64> = (0..w).map(|col| (0..w).map(|row| px[row * w + col]).sum()).collect();
        let peak = (0..w).max_by(|&a, &b| col_energy[a].total_cmp(&col_energy[b]).then(b.cmp(&a))).unwrap();
        let most = *coverage.iter().max().unwrap();
        // Bursts span every bin of their region, so the row extent is the
        // whole tile; the time column is what localizes them.
        ensure!(
            most > 0 && 2 * coverage[peak] >= most,
            "cluster {c}: peak column {peak} has burst coverage {} of max {most} ({coverage:?})",
            coverage[peak]
        );
        checked.push(format!("{c}:col{peak}"));
    }
    ensure!(!checked.is_empty(), "no burst-dominated cluster");
    Ok(format!(
        "pipeline {:.0}s; burst-dominated clusters localized [{}]",
        p.elapsed.as_secs_f64(),
        checked.join(" ")
    ))
}

// ---------------------------------------------------------------------------

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| selected.is_empty() || selected.contains(&n);
    let criteria: [(usize, &str); 10] = [
        (1, "gradient correctness"),
        (2, "guided backprop rule"),
        (3, "segmentation formula"),
        (4, "PCA"),
        (5, "K-means"),
        (6, "clustering cycle"),
        (7, "PCA clusterability"),
        (8, "shallow tree"),
        (9, "report determinism"),
        (10, "end-to-end smoke"),
    ];
    let mut pipeline: Option<Result<Pipeline, String>> = None;
    let mut failed = 0;
    for (n, name) in criteria {
        if !wanted(n) {
            continue;
        }
        let start = Instant::now();
        let result = match n {
            1 => gradients(),
            2 => guided_rule(),
            3 => segmentation(),
            4 => pca(),
            5 => kmeans(),
            6 => cycle_experiment(),
            _ => {
                let p = pipeline.get_or_insert_with(run_pipeline);
                match p {
                    Err(e) => Err(format!("pipeline failed: {e}")),
                    Ok(p) => match n {
                        7 => clusterability(p),
                        8 => shallow_tree(p),
                        9 => report_determinism(p),
                        _ => burst_localization(p),
                    },
                }
            }
        };
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {n:>2} {name}: {detail} [{secs:.1}s]"),
            Err(why) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {why} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
