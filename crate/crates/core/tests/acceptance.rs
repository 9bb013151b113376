//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.
//!
//! The trained-model criteria (4 to 7) share one set of runs over three seeds.
//! `SPEECHGROUND_ACCEPT_EPOCHS` overrides the epoch count of those runs.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use speechground::losses::{
    cls_loss, cls_loss_var, contrastive_total, contrastive_total_var, make_ref_labels, ref_loss, ref_loss_var, Alignment,
    ContrastiveMode, RefLabels,
};
use speechground::phonetics::{mel_spectrogram, LOG_FLOOR, N_MELS};
use speechground::scenegen::{generate_dataset, generate_scene, iou, propose_boxes, Box3D, Dataset, GenConfig, ProposalSet};
use speechground::tensor::{Mat, Tape, Var};
use speechground::trainer::{
    ablate_with_threads, evaluate, grad_check, phonetic_similarity, thread_count, train, Model, Sweep,
};
use speechground::TrainConfig;

const SEEDS: [u64; 3] = [0, 1, 2];
const DEFAULT_EPOCHS: usize = 20;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn report(id: usize, name: &str, start: Instant, o: &Outcome) -> bool {
    let verdict = if o.pass { "PASS" } else { "FAIL" };
    println!("[{id:>2}] {verdict} {name}: {} ({:.1}s)", o.detail, start.elapsed().as_secs_f64());
    o.pass
}

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    Mat::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

// ---- 1: loss oracles

fn oracle_directional(a: &Mat, b: &Mat, tau: f64) -> f64 {
    let n = a.rows;
    let cos = |x: &[f64], y: &[f64]| {
        let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        dot / (nx * ny)
    };
    let mut total = 0.0;
    for i in 0..n {
        let denom: f64 = (0..n).map(|j| (cos(a.row(i), b.row(j)) / tau).exp()).sum();
        total -= ((cos(a.row(i), b.row(i)) / tau).exp() / denom).ln();
    }
    total / n as f64
}

fn loss_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut worst: f64 = 0.0;
    for trial in 0..200 {
        let n = 1 + trial % 5;
        let d = 2 + rng.gen_range(0..7);
        let (s, t, o) = (rand_mat(&mut rng, n, d), rand_mat(&mut rng, n, d), rand_mat(&mut rng, n, d));
        let tau = 0.07;
        let six = [(&t, &s), (&s, &t), (&s, &o), (&o, &s), (&t, &o), (&o, &t)];
        let oracle = six.iter().map(|(a, b)| oracle_directional(a, b, tau)).sum::<f64>() / 6.0;
        let got = contrastive_total(&s, &t, &o, tau).expect("nonzero rows");
        worst = worst.max((got - oracle).abs());
    }
    let mut closed: f64 = 0.0;
    for c in [2usize, 8, 17] {
        let uniform = vec![1.0 / c as f64; c];
        let mut target = vec![0.0; c];
        target[c / 2] = 1.0;
        closed = closed.max((cls_loss(&uniform, &target) - (c as f64).ln()).abs());
    }
    for m in [4usize, 8, 16] {
        let uniform = vec![1.0 / m as f64; m];
        let labels = RefLabels { hot: m - 1, m };
        closed = closed.max((ref_loss(&uniform, &uniform, &labels, 1.0, 1.0) - 2.0 * (m as f64).ln()).abs());
    }
    outcome(worst < 1e-6 && closed < 1e-12, format!("six-sum max |diff| {worst:.2e} (< 1e-6), closed forms {closed:.2e} (< 1e-12)"))
}

// ---- 2: gradients

fn fd_rel_err(x: &Mat, eps: f64, f: &dyn Fn(&mut Tape, Var) -> Var) -> f64 {
    let value = |m: &Mat| {
        let mut tape = Tape::new();
        let v = tape.constant(m.clone());
        let l = f(&mut tape, v);
        tape.scalar(l)
    };
    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let l = f(&mut tape, v);
    let g = tape.backward(l).get_or_zeros(v, x.shape());
    let mut diff = 0.0;
    let mut num_norm = 0.0;
    for i in 0..x.data.len() {
        let (mut up, mut down) = (x.clone(), x.clone());
        up.data[i] += eps;
        down.data[i] -= eps;
        let n = (value(&up) - value(&down)) / (2.0 * eps);
        diff += (n - g.data[i]).powi(2);
        num_norm += n * n;
    }
    diff.sqrt() / g.norm().max(num_norm.sqrt()).max(1e-6)
}

fn gradient_suite() -> Outcome {
    let eps = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (n, d, m, c) = (4, 16, 8, 8);
    let (s, t, o) = (rand_mat(&mut rng, n, d), rand_mat(&mut rng, n, d), rand_mat(&mut rng, n, d));
    let mut loss_err: f64 = 0.0;
    for which in 0..3 {
        for mode in [ContrastiveMode::Six, ContrastiveMode::Four] {
            let f = |tape: &mut Tape, x: Var| {
                let mut vars = [tape.constant(s.clone()), tape.constant(t.clone()), tape.constant(o.clone())];
                vars[which] = x;
                contrastive_total_var(tape, vars[0], vars[1], vars[2], 0.07, Alignment::ALL, mode).expect("nonzero rows")
            };
            loss_err = loss_err.max(fd_rel_err([&s, &t, &o][which], eps, &f));
        }
    }
    let probs = |rng: &mut ChaCha8Rng, k: usize| {
        let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1..1.0)).collect();
        let z: f64 = raw.iter().sum();
        Mat::row_vector(&raw.iter().map(|v| v / z).collect::<Vec<_>>())
    };
    let labels = RefLabels { hot: 3, m };
    loss_err = loss_err.max(fd_rel_err(&probs(&mut rng, m), eps, &|tape, x| ref_loss_var(tape, x, &labels)));
    loss_err = loss_err.max(fd_rel_err(&probs(&mut rng, c), eps, &|tape, x| cls_loss_var(tape, x, 5)));

    let gen = GenConfig { max_objects: m, ..GenConfig::default() };
    let ds = generate_dataset(5, 8, 2, &gen, "grad").expect("dataset");
    let cfg = TrainConfig { dim: d, heads: 4, proposals: m, batch_size: n, points: 128, gradcheck_entries: 0, ..TrainConfig::default() };
    let report = match grad_check(&cfg, &ds, eps) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("gradient check failed to run: {e}")),
    };
    let entries: usize = report.groups.iter().map(|g| g.entries).sum();
    outcome(
        loss_err < 1e-4 && report.max_rel_err < 1e-4,
        format!(
            "loss inputs {loss_err:.2e}, {} parameter tensors / {entries} entries max {:.2e} at `{}` (< 1e-4)",
            report.groups.len(),
            report.max_rel_err,
            report.worst
        ),
    )
}

// ---- 3: geometry

/// Voxel count of a box on the grid `h·k` (voxel centers at `h·(k + 1/2)`).
/// Axis-aligned boxes are products of intervals, so the count factorizes per axis.
fn voxels_in(lo: [f64; 3], hi: [f64; 3], h: f64) -> f64 {
    (0..3)
        .map(|a| {
            let first = (lo[a] / h - 0.5).ceil().max(0.0);
            let last = (hi[a] / h - 0.5).floor();
            (last - first + 1.0).max(0.0)
        })
        .product()
}

fn voxel_iou(a: &Box3D, b: &Box3D, h: f64) -> f64 {
    let (amin, amax, bmin, bmax) = (a.min(), a.max(), b.min(), b.max());
    let lo: [f64; 3] = std::array::from_fn(|i| amin[i].max(bmin[i]));
    let hi: [f64; 3] = std::array::from_fn(|i| amax[i].min(bmax[i]));
    let inter = voxels_in(lo, hi, h);
    let union = voxels_in(amin, amax, h) + voxels_in(bmin, bmax, h) - inter;
    if union == 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn brute_voxel_count(a: &Box3D, b: &Box3D, h: f64, extent: f64) -> (usize, usize) {
    let k = (extent / h) as usize;
    let (mut inter, mut union) = (0, 0);
    for i in 0..k {
        for j in 0..k {
            for l in 0..k {
                let p = [h * (i as f64 + 0.5), h * (j as f64 + 0.5), h * (l as f64 + 0.5)];
                let (ia, ib) = (a.contains(&p), b.contains(&p));
                inter += usize::from(ia && ib);
                union += usize::from(ia || ib);
            }
        }
    }
    (inter, union)
}

fn random_box(rng: &mut ChaCha8Rng, near: Option<&Box3D>) -> Box3D {
    let center: [f64; 3] = match near {
        Some(b) => std::array::from_fn(|i| b.center[i] + rng.gen_range(-0.6..0.6)),
        None => std::array::from_fn(|_| rng.gen_range(1.0..3.0)),
    };
    let size: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.2..1.6));
    Box3D::new(center, size)
}

fn interval_iou(a: &Box3D, b: &Box3D) -> f64 {
    let (amin, amax, bmin, bmax) = (a.min(), a.max(), b.min(), b.max());
    let inter: f64 = (0..3).map(|i| (amax[i].min(bmax[i]) - amin[i].max(bmin[i])).max(0.0)).product();
    let vol = |lo: [f64; 3], hi: [f64; 3]| (0..3).map(|i| hi[i] - lo[i]).product::<f64>();
    inter / (vol(amin, amax) + vol(bmin, bmax) - inter)
}

/// First index of the maximum IoU, by enumerating every proposal.
fn oracle_argmax(proposals: &ProposalSet, gt: &Box3D) -> usize {
    let ious: Vec<f64> = proposals.boxes.iter().map(|b| interval_iou(b, gt)).collect();
    let top = ious.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    ious.iter().position(|&v| v == top).expect("non-empty")
}

fn geometry_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let mut worst: f64 = 0.0;
    for k in 0..100 {
        let a = random_box(&mut rng, None);
        let b = if k % 5 == 0 { random_box(&mut rng, None) } else { random_box(&mut rng, Some(&a)) };
        worst = worst.max((iou(&a, &b) - voxel_iou(&a, &b, 1e-4)).abs());
    }
    // the per-axis count equals a direct enumeration of every voxel
    let mut factorized_ok = true;
    for _ in 0..5 {
        let a = random_box(&mut rng, None);
        let b = random_box(&mut rng, Some(&a));
        let h = 0.05;
        let (inter, union) = brute_voxel_count(&a, &b, h, 5.0);
        let (amin, amax, bmin, bmax) = (a.min(), a.max(), b.min(), b.max());
        let lo: [f64; 3] = std::array::from_fn(|i| amin[i].max(bmin[i]));
        let hi: [f64; 3] = std::array::from_fn(|i| amax[i].min(bmax[i]));
        let fi = voxels_in(lo, hi, h);
        let fu = voxels_in(amin, amax, h) + voxels_in(bmin, bmax, h) - fi;
        factorized_ok &= fi == inter as f64 && fu == union as f64;
    }
    let gen = GenConfig::default();
    let mut label_mismatch = 0;
    for k in 0..200u64 {
        let (proposals, gt) = if k % 2 == 0 {
            let scene = generate_scene(1000 + k, &gen).expect("scene");
            let target = &scene.objects[(k as usize / 2) % scene.objects.len()];
            (propose_boxes(&scene, target.instance_id, 16, 0.15, k).expect("proposals"), target.bbox)
        } else {
            let gt = random_box(&mut rng, None);
            let mut boxes: Vec<Box3D> = (0..12).map(|_| random_box(&mut rng, Some(&gt))).collect();
            if k % 4 == 1 {
                boxes[7] = boxes[3];
                boxes[11] = boxes[3];
            }
            (ProposalSet { source_instance: vec![-1; boxes.len()], boxes }, gt)
        };
        if make_ref_labels(&proposals, &gt).hot != oracle_argmax(&proposals, &gt) {
            label_mismatch += 1;
        }
    }
    outcome(
        worst < 1e-3 && factorized_ok && label_mismatch == 0,
        format!("iou max |diff| {worst:.2e} over 100 pairs (< 1e-3), label mismatches {label_mismatch}/200"),
    )
}

// ---- 4 to 7: trained models

struct SeedRun {
    baseline: (f64, f64),
    sll: (f64, f64),
    full: [(f64, f64); 3],
    similarity: (f64, f64),
}

fn acc(model: &Model, cfg: &TrainConfig, val: &Dataset, beta: f64) -> (f64, f64) {
    let b = evaluate(model, cfg, val, beta).expect("evaluation").breakdown;
    (b.overall(0.25), b.overall(0.5))
}

fn run_seed(base: &TrainConfig, train_set: &Dataset, val: &Dataset, seed: u64) -> SeedRun {
    let with = |sll, cbm, ccm| TrainConfig { seed, sll, cbm, ccm, ..base.clone() };
    let baseline_cfg = with(false, false, false);
    let (m, _) = train(&baseline_cfg, train_set, None).expect("baseline training");
    let baseline = acc(&m, &baseline_cfg, val, 0.0);
    let sll_cfg = with(true, false, false);
    let (m, _) = train(&sll_cfg, train_set, None).expect("+SLL training");
    let sll = acc(&m, &sll_cfg, val, 0.0);
    let full_cfg = with(true, true, true);
    let (m, _) = train(&full_cfg, train_set, None).expect("full training");
    let full = [0.0, 0.5, 1.0].map(|b| acc(&m, &full_cfg, val, b));
    let ps = phonetic_similarity(&m, &full_cfg, 30, 5 + seed).expect("similarity");
    SeedRun { baseline, sll, full, similarity: (ps.confusion, ps.cross_class) }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

// ---- 8: mel front end

fn oracle_mel_bin(hz: f64) -> usize {
    let to_mel = |f: f64| if f < 1000.0 { 3.0 * f / 200.0 } else { 15.0 + 27.0 * (f / 1000.0).ln() / 6.4f64.ln() };
    let from_mel = |m: f64| if m < 15.0 { 200.0 * m / 3.0 } else { 1000.0 * (6.4f64.ln() * (m - 15.0) / 27.0).exp() };
    let top = to_mel(8000.0);
    let edge = |i: usize| from_mel(top * i as f64 / (N_MELS + 1) as f64);
    (0..N_MELS)
        .map(|m| {
            let (lo, c, hi) = (edge(m), edge(m + 1), edge(m + 2));
            ((hz - lo) / (c - lo)).min((hi - hz) / (hi - c)).max(0.0)
        })
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i)
        .expect("80 filters")
}

fn mel_front_end() -> Outcome {
    let mut lengths_ok = true;
    for len in [400usize, 401, 559, 560, 1234, 16_000] {
        let m = mel_spectrogram(&vec![0.0; len]).expect("long enough");
        let expected = 1 + (len - 400) / 160;
        lengths_ok &= m.bins.shape() == (N_MELS, expected) && m.bins.data.iter().all(|&v| v == LOG_FLOOR);
    }
    let sine: Vec<f64> = (0..16_000).map(|n| (2.0 * std::f64::consts::PI * 440.0 * n as f64 / 16_000.0).sin()).collect();
    let m = mel_spectrogram(&sine).expect("one second");
    let want = oracle_mel_bin(440.0);
    let frames = m.bins.cols;
    let peaks_ok = (0..frames).all(|t| (0..N_MELS).max_by(|&a, &b| m.bins.get(a, t).total_cmp(&m.bins.get(b, t))) == Some(want));
    outcome(lengths_ok && peaks_ok, format!("silence floor and frame counts {lengths_ok}, 440 Hz peaks in bin {want} on all {frames} frames {peaks_ok}"))
}

// ---- 9: determinism

fn metrics_bytes(cfg: &TrainConfig, train_set: &Dataset, val: &Dataset) -> Vec<String> {
    let (model, log) = train(cfg, train_set, Some(val)).expect("training");
    let ev = evaluate(&model, cfg, val, 0.5).expect("evaluation");
    let table = ablate_with_threads(cfg, train_set, val, &Sweep::Beta, &[cfg.seed, cfg.seed + 1], 2).expect("ablation");
    vec![log.to_jsonl(), ev.breakdown.to_csv(), table.to_csv(), table.summary_csv()]
}

fn determinism() -> Outcome {
    let gen = GenConfig::default();
    let train_set = generate_dataset(21, 12, 4, &gen, "train").expect("train");
    let val = generate_dataset(22, 4, 4, &gen, "val").expect("val");
    let cfg = TrainConfig { epochs: 3, val_every: 1, points: 128, seed: 9, ..TrainConfig::default() };
    let first = metrics_bytes(&cfg, &train_set, &val);
    let second = metrics_bytes(&cfg, &train_set, &val);
    let same = first == second;
    outcome(same, format!("run log, metrics, ablation and summary byte-identical across reruns: {same}"))
}

// ---- 10: overfit

fn overfit() -> Outcome {
    let ds = generate_dataset(31, 8, 2, &GenConfig::default(), "overfit").expect("dataset");
    let cfg = TrainConfig { epochs: 500, batch_size: 16, augment: false, val_every: 0, seed: 3, ..TrainConfig::default() };
    let (model, _) = train(&cfg, &ds, None).expect("training");
    let a = acc(&model, &cfg, &ds, cfg.effective_beta());
    outcome(a.1 >= 95.0, format!("{} samples after 500 steps: Acc@0.25 {:.1}%, Acc@0.5 {:.1}% (>= 95)", ds.utterances.len(), a.0, a.1))
}

fn main() {
    let mut all = true;
    let t = Instant::now();
    all &= report(1, "loss oracles", t, &loss_oracles());
    let t = Instant::now();
    all &= report(2, "gradient suite", t, &gradient_suite());
    let t = Instant::now();
    all &= report(3, "geometry oracle", t, &geometry_oracle());

    let t = Instant::now();
    let epochs = std::env::var("SPEECHGROUND_ACCEPT_EPOCHS").ok().and_then(|v| v.parse().ok()).unwrap_or(DEFAULT_EPOCHS);
    let base = TrainConfig { epochs, val_every: 0, ..TrainConfig::default() };
    let gen = GenConfig::default();
    let train_set = generate_dataset(11, base.scenes, base.utterances_per_scene, &gen, "train").expect("train split");
    let val = generate_dataset(12, base.val_scenes, base.utterances_per_scene, &gen, "val").expect("val split");
    let pool = rayon::ThreadPoolBuilder::new().num_threads(thread_count().min(SEEDS.len())).build().expect("pool");
    let runs: Vec<SeedRun> = pool.install(|| SEEDS.par_iter().map(|&s| run_seed(&base, &train_set, &val, s)).collect());
    let setup = format!(
        "{} train / {} val utterances, error rate {}, {epochs} epochs, seeds {SEEDS:?}",
        train_set.utterances.len(),
        val.utterances.len(),
        base.error_rate
    );
    println!("     trained-model setup: {setup} ({:.1}s)", t.elapsed().as_secs_f64());
    for (s, r) in SEEDS.iter().zip(&runs) {
        println!(
            "     seed {s}: baseline {:.1}/{:.1}  +SLL {:.1}/{:.1}  full b=0 {:.1}/{:.1} b=0.5 {:.1}/{:.1} b=1 {:.1}/{:.1}  cos {:.3} vs {:.3}",
            r.baseline.0, r.baseline.1, r.sll.0, r.sll.1, r.full[0].0, r.full[0].1, r.full[1].0, r.full[1].1, r.full[2].0, r.full[2].1,
            r.similarity.0, r.similarity.1
        );
    }

    let base05 = mean(runs.iter().map(|r| r.baseline.1));
    let full05 = mean(runs.iter().map(|r| r.full[1].1));
    let gap = full05 - base05;
    all &= report(
        4,
        "full model over text-only baseline",
        t,
        &outcome(gap >= 3.0, format!("mean Acc@0.5 {full05:.2} vs {base05:.2}, gap {gap:+.2} (>= +3)")),
    );

    let t = Instant::now();
    let m = |k: usize, th: usize| mean(runs.iter().map(|r| if th == 0 { r.full[k].0 } else { r.full[k].1 }));
    let shape_ok = (0..2).all(|th| m(1, th) >= m(0, th) && m(1, th) >= m(2, th));
    all &= report(
        5,
        "fusion weight sweep peaks at 0.5",
        t,
        &outcome(
            shape_ok,
            format!(
                "Acc@0.25 b=0/0.5/1 {:.2}/{:.2}/{:.2}, Acc@0.5 {:.2}/{:.2}/{:.2}",
                m(0, 0),
                m(1, 0),
                m(2, 0),
                m(0, 1),
                m(1, 1),
                m(2, 1)
            ),
        ),
    );

    let base25 = mean(runs.iter().map(|r| r.baseline.0));
    let sll25 = mean(runs.iter().map(|r| r.sll.0));
    let full25 = m(1, 0);
    let mono = base25 <= sll25 && sll25 <= full25 && full25 - base25 >= 2.0;
    all &= report(
        6,
        "module combinations are monotone",
        t,
        &outcome(mono, format!("mean Acc@0.25 baseline {base25:.2} <= +SLL {sll25:.2} <= full {full25:.2}, full - baseline {:+.2} (>= +2)", full25 - base25)),
    );

    let sims: Vec<f64> = runs.iter().map(|r| r.similarity.0 - r.similarity.1).collect();
    all &= report(
        7,
        "confusable words sound alike",
        t,
        &outcome(sims.iter().all(|&d| d > 0.0), format!("confusion minus cross-class cosine per seed {:?}", sims.iter().map(|d| format!("{d:.3}")).collect::<Vec<_>>())),
    );

    let t = Instant::now();
    all &= report(8, "mel front end", t, &mel_front_end());
    let t = Instant::now();
    all &= report(9, "determinism", t, &determinism());
    let t = Instant::now();
    all &= report(10, "overfit sanity", t, &overfit());

    if all {
        println!("acceptance: all criteria pass");
    } else {
        println!("acceptance: FAILURES above");
        std::process::exit(1);
    }
}
