//! Exit criteria for the crate. Runs every criterion in order, prints one
//! PASS/FAIL line each and exits non-zero if any failed.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use mcoref::align::{GroundingKind, GroundingMatrix, BBox};
use mcoref::commands::{cmd_eval, cmd_synth, cmd_train, EvalArgs, SynthArgs, TrainArgs, CHECKPOINT_FILE};
use mcoref::gradcheck::{run_gradcheck, GradcheckConfig};
use mcoref::infer::{predict_chains, predict_grounding, Partition};
use mcoref::losses::loss_gd;
use mcoref::metrics::{b_cubed, ceaf_phi4, conll_f1, muc, ScoreTriple};
use mcoref::numerics::{smooth_l1, Tape, Tensor};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use sha2::{Digest, Sha256};

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Outcome { passed, detail: detail.into() }
    }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

// ------------------------------------------------------------------ 1

fn gradient_oracle() -> Outcome {
    let t0 = Instant::now();
    let report = match run_gradcheck(&GradcheckConfig::default()) {
        Ok(r) => r,
        Err(e) => return Outcome::new(false, format!("error: {e}")),
    };
    let elapsed = t0.elapsed();
    let worst = report
        .worst()
        .iter()
        .map(|t| format!("{}={}", t.name, t.max_rel_error.map_or("n/a".into(), |e| format!("{e:.1e}"))))
        .collect::<Vec<_>>()
        .join(" ");
    let passed = report.passed() && report.covers_every_term() && elapsed < Duration::from_secs(120);
    Outcome::new(
        passed,
        format!("{} instances, tol {:e}, {:.1}s; {}", report.instances.len(), report.tolerance, secs(elapsed), worst),
    )
}

// ------------------------------------------------------------------ 2

/// Every set partition of `0..n` as restricted growth strings.
fn all_labelings(n: usize) -> Vec<Vec<usize>> {
    fn go(prefix: &mut Vec<usize>, n: usize, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == n {
            out.push(prefix.clone());
            return;
        }
        let next = prefix.iter().max().map_or(0, |m| m + 1);
        for l in 0..=next {
            prefix.push(l);
            go(prefix, n, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::new(), n, &mut out);
    out
}

fn groups(labels: &[usize]) -> Vec<BTreeSet<usize>> {
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut g = vec![BTreeSet::new(); k];
    for (m, &l) in labels.iter().enumerate() {
        g[l].insert(m);
    }
    g
}

fn f1(r: f64, p: f64) -> f64 {
    if r + p > 0.0 {
        2.0 * r * p / (r + p)
    } else {
        0.0
    }
}

fn div(a: f64, b: f64) -> f64 {
    if b > 0.0 {
        a / b
    } else {
        0.0
    }
}

/// Link-based MUC: each key cluster needs `|K| - 1` links and loses one per
/// extra response cluster it touches.
fn ref_muc(key: &[BTreeSet<usize>], resp: &[BTreeSet<usize>]) -> (f64, f64) {
    let side = |a: &[BTreeSet<usize>], b: &[BTreeSet<usize>]| {
        let mut num = 0.0;
        let mut den = 0.0;
        for k in a {
            let touched = b.iter().filter(|r| !k.is_disjoint(r)).count();
            num += (k.len() - touched) as f64;
            den += (k.len() - 1) as f64;
        }
        div(num, den)
    };
    (side(key, resp), side(resp, key))
}

fn ref_b3(key: &[BTreeSet<usize>], resp: &[BTreeSet<usize>], n: usize) -> (f64, f64) {
    let find = |cs: &[BTreeSet<usize>], m: usize| cs.iter().find(|c| c.contains(&m)).unwrap().clone();
    let (mut r, mut p) = (0.0, 0.0);
    for m in 0..n {
        let k = find(key, m);
        let s = find(resp, m);
        let inter = k.intersection(&s).count() as f64;
        r += inter / k.len() as f64;
        p += inter / s.len() as f64;
    }
    (r / n as f64, p / n as f64)
}

fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.is_empty() {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let x = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, x);
            out.push(p);
        }
    }
    out
}

/// Exhaustive best one-to-one alignment of key to response clusters.
fn ref_ceaf(key: &[BTreeSet<usize>], resp: &[BTreeSet<usize>]) -> (f64, f64) {
    let phi = |a: &BTreeSet<usize>, b: &BTreeSet<usize>| 2.0 * a.intersection(b).count() as f64 / (a.len() + b.len()) as f64;
    let (small, large) = if key.len() <= resp.len() { (key, resp) } else { (resp, key) };
    let idx: Vec<usize> = (0..large.len()).collect();
    let mut best = 0.0f64;
    for perm in permutations(&idx) {
        let s: f64 = small.iter().zip(&perm).map(|(a, &j)| phi(a, &large[j])).sum();
        best = best.max(s);
    }
    (best / key.len() as f64, best / resp.len() as f64)
}

fn metric_oracle() -> Outcome {
    let t0 = Instant::now();
    let n = 5;
    let labelings = all_labelings(n);
    let mut worst = 0.0f64;
    let mut pairs = 0usize;
    let close = |s: &ScoreTriple, (r, p): (f64, f64)| {
        (s.recall - r).abs().max((s.precision - p).abs()).max((s.f1 - f1(r, p)).abs())
    };
    for g in &labelings {
        for p in &labelings {
            let (gp, pp) = (Partition::from_labels(g), Partition::from_labels(p));
            let (gs, ps) = (groups(g), groups(p));
            let dm = close(&muc(&gp, &pp).unwrap(), ref_muc(&gs, &ps));
            let db = close(&b_cubed(&gp, &pp).unwrap(), ref_b3(&gs, &ps, n));
            let dc = close(&ceaf_phi4(&gp, &pp).unwrap(), ref_ceaf(&gs, &ps));
            worst = worst.max(dm).max(db).max(dc);
            pairs += 1;
        }
    }
    let elapsed = t0.elapsed();
    let passed = labelings.len() == 52 && pairs == 52 * 52 && worst <= 1e-9 && elapsed < Duration::from_secs(60);
    Outcome::new(
        passed,
        format!("{} partitions, {} pairs, max |diff| {:.1e}, {:.2}s", labelings.len(), pairs, worst, secs(elapsed)),
    )
}

// ------------------------------------------------------------------ 3

fn conll_composition() -> Outcome {
    let v = conll_f1(0.3186, 0.7806, 0.7547);
    Outcome::new((v - 0.6179).abs() <= 5e-4, format!("CoNLL F1 {v:.5} (target 0.6179 +/- 5e-4)"))
}

// ------------------------------------------------------------------ 4

fn spot_values() -> Outcome {
    let a = smooth_l1(0.5, 1.0);
    let b = smooth_l1(2.0, 1.0);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1], vec![3.7]).unwrap());
    let s = tape.softmax(x, 0).unwrap();
    let single = tape.value(s).data()[0];
    let g = GroundingMatrix::new(1, 4, vec![0.25; 4], GroundingKind::Soft).unwrap();
    let h = GroundingMatrix::new(1, 4, vec![0.0, 1.0, 0.0, 0.0], GroundingKind::BinaryGt).unwrap();
    let gd = loss_gd(&g, &h).unwrap();
    let passed = (a - 0.125).abs() <= 1e-12
        && (b - 1.5).abs() <= 1e-12
        && (single - 1.0).abs() <= 1e-12
        && (gd - 4f64.ln()).abs() <= 1e-9;
    Outcome::new(passed, format!("smooth-L1 {a} / {b}, singleton softmax {single}, loss_gd {gd:.12} vs ln 4 {:.12}", 4f64.ln()))
}

// ------------------------------------------------------------------ 5-7

const TRAIN_CONFIG: &str = "[train]\nlr = 1e-3\nepochs = 30\nthreads = 1\n\n[model]\ninit_std = 0.1\n";
const LABELED_FRAC: f64 = 0.2;
const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        Workspace {
            dir: tempfile::tempdir().expect("temp dir"),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn write(&self, name: &str, body: &str) -> PathBuf {
        let p = self.path(name);
        fs::write(&p, body).expect("write file");
        p
    }

    fn synth(&self, name: &str, n: usize, seed: u64, sigma: f64) -> PathBuf {
        let cfg = self.write(
            &format!("{name}.toml"),
            &format!("n_samples = {n}\nn_entities_range = [4, 4]\nfeature_noise_sigma = {sigma}\nseed = {seed}\nworld_seed = 7\n"),
        );
        let out = self.path(&format!("{name}.jsonl"));
        cmd_synth(&SynthArgs {
            config: Some(cfg),
            out: out.clone(),
            ..Default::default()
        })
        .expect("synth");
        out
    }

    fn train(&self, name: &str, data: &Path, config: &Path, weights: &str, seed: u64) -> PathBuf {
        let out = self.path(name);
        cmd_train(&TrainArgs {
            data: data.to_path_buf(),
            config: Some(config.to_path_buf()),
            out: out.clone(),
            labeled_frac: Some(LABELED_FRAC),
            loss_weights: Some(weights.to_string()),
            seed: Some(seed),
            quiet: true,
            ..Default::default()
        })
        .expect("train");
        out
    }

    fn eval(&self, run: &Path, data: &Path) -> (f64, f64) {
        let r = cmd_eval(&EvalArgs {
            ckpt: run.to_path_buf(),
            data: data.to_path_buf(),
            out: run.join("eval.json"),
            ..Default::default()
        })
        .expect("eval");
        (r.conll_f1, r.grounding.overall_acc)
    }
}

fn end_to_end(ws: &Workspace) -> Outcome {
    let train = ws.synth("clean_train", 200, 1, 0.05);
    let eval = ws.synth("clean_eval", 50, 2, 0.05);
    let cfg = ws.write("e2e.toml", TRAIN_CONFIG);
    let t0 = Instant::now();
    let run = ws.train("e2e_a", &train, &cfg, "cr=1", 1);
    let elapsed = t0.elapsed();
    let (conll, ground) = ws.eval(&run, &eval);
    let again = ws.train("e2e_b", &train, &cfg, "cr=1", 1);
    let same = fs::read(run.join(CHECKPOINT_FILE)).unwrap() == fs::read(again.join(CHECKPOINT_FILE)).unwrap();
    let passed = conll >= 0.90 && ground >= 0.90 && elapsed <= Duration::from_secs(600) && same;
    Outcome::new(
        passed,
        format!("CoNLL F1 {conll:.4}, grounding {ground:.4} (need >= 0.90 each), train {:.1}s, repeat identical: {same}", secs(elapsed)),
    )
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

struct NoisySweep {
    sup: Vec<f64>,
    pcr: Vec<f64>,
    full: Vec<f64>,
    t0: Vec<f64>,
}

fn noisy_sweep(ws: &Workspace) -> NoisySweep {
    let train = ws.synth("noisy_train", 200, 1, 0.15);
    let eval = ws.synth("noisy_eval", 50, 2, 0.15);
    let cfg = ws.write("noisy.toml", TRAIN_CONFIG);
    let cfg_t0 = ws.write("noisy_t0.toml", &format!("{TRAIN_CONFIG}\n[loss]\nground_thresh = 0.0\n"));
    let mut sweep = NoisySweep {
        sup: Vec::new(),
        pcr: Vec::new(),
        full: Vec::new(),
        t0: Vec::new(),
    };
    for seed in SEEDS {
        let runs: [(&str, &Path, &str, &mut Vec<f64>); 4] = [
            ("sup", &cfg, "pcr=0,pgd=0", &mut sweep.sup),
            ("pcr", &cfg, "pgd=0", &mut sweep.pcr),
            ("full", &cfg, "cr=1", &mut sweep.full),
            ("t0", &cfg_t0, "cr=1", &mut sweep.t0),
        ];
        for (name, c, w, sink) in runs {
            let run = ws.train(&format!("noisy_{name}_{seed}"), &train, c, w, seed);
            sink.push(ws.eval(&run, &eval).0);
        }
    }
    sweep
}

fn semi_supervised_trend(s: &NoisySweep) -> Outcome {
    let (ms, ss) = mean_std(&s.sup);
    let (mp, sp) = mean_std(&s.pcr);
    let (mf, sf) = mean_std(&s.full);
    let spread = ss.max(sf);
    let passed = ms <= mp && mp <= mf && mf - ms > spread;
    Outcome::new(
        passed,
        format!(
            "sup {ms:.4}+/-{ss:.4}, +PCR {mp:.4}+/-{sp:.4}, +PCR+PGD {mf:.4}+/-{sf:.4}; gain {:.4} vs std {spread:.4}",
            mf - ms
        ),
    )
}

fn threshold_ablation(s: &NoisySweep) -> Outcome {
    let (m9, s9) = mean_std(&s.full);
    let (m0, s0) = mean_std(&s.t0);
    Outcome::new(m9 >= m0, format!("t=0.9 {m9:.4}+/-{s9:.4} vs t=0.0 {m0:.4}+/-{s0:.4}"))
}

// ------------------------------------------------------------------ 8

fn is_valid(p: &Partition, n: usize) -> bool {
    let mut seen = vec![false; n];
    for c in p.clusters() {
        if c.is_empty() {
            return false;
        }
        for &m in c {
            if m >= n || seen[m] {
                return false;
            }
            seen[m] = true;
        }
    }
    seen.iter().all(|&s| s)
}

fn refines(fine: &Partition, coarse: &Partition) -> bool {
    let cl = coarse.labels();
    fine.clusters().iter().all(|c| c.iter().all(|&m| cl[m] == cl[c[0]]))
}

fn linear_scan(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn show<E: std::fmt::Display>(r: &Result<(), E>) -> String {
    match r {
        Ok(()) => "ok".to_string(),
        Err(e) => format!("{e}"),
    }
}

fn inference_invariants() -> Outcome {
    let mut runner = TestRunner::new(PropConfig {
        cases: 100,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let embeddings = (1usize..9, 2usize..6).prop_flat_map(|(n, d)| {
        (Just(n), Just(d), prop::collection::vec(-1.0f64..1.0, n * d), -1.0f64..1.0, 0.0f64..0.5)
    });
    let chains = runner.run(&embeddings, |(n, d, data, lo, gap)| {
        let x = Tensor::new(vec![n, d], data).unwrap();
        let low = predict_chains(&x, lo);
        let high = predict_chains(&x, lo + gap);
        prop_assert!(is_valid(&low, n) && is_valid(&high, n));
        prop_assert!(refines(&high, &low));
        Ok(())
    });

    let grid = (1usize..6, 1usize..7).prop_flat_map(|(m, r)| {
        (Just(m), Just(r), prop::collection::vec(prop::sample::select(vec![1.0, 2.0, 3.0, 5.0]), m * r))
    });
    let mut runner = TestRunner::new(PropConfig {
        cases: 100,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let argmax = runner.run(&grid, |(m, r, vals)| {
        let rows: Vec<f64> = vals
            .chunks(r)
            .flat_map(|row| {
                let total: f64 = row.iter().sum();
                row.iter().map(move |v| v / total)
            })
            .collect();
        let g = GroundingMatrix::new(m, r, rows, GroundingKind::Soft).unwrap();
        let boxes: Vec<BBox> = (0..r).map(|i| BBox::new(i as f64 * 0.1, 0.0, 0.05, 0.05)).collect();
        let pred = predict_grounding(&g, &boxes).unwrap();
        for k in 0..m {
            prop_assert_eq!(pred.regions[k], linear_scan(g.row(k)));
        }
        Ok(())
    });
    let passed = chains.is_ok() && argmax.is_ok();
    Outcome::new(passed, format!("chains monotone and valid (100 sets): {}; argmax vs scan: {}", show(&chains), show(&argmax)))
}

// ------------------------------------------------------------------ 9

fn sha256(path: &Path) -> String {
    format!("{:x}", Sha256::digest(fs::read(path).unwrap()))
}

fn determinism(ws: &Workspace) -> Outcome {
    let a = ws.synth("det_a", 40, 3, 0.05);
    let b = ws.synth("det_b", 40, 3, 0.05);
    let synth_same = sha256(&a) == sha256(&b);
    let cfg = ws.write("det.toml", "[train]\nlr = 1e-3\nepochs = 3\n\n[model]\ninit_std = 0.1\n");
    let r1 = ws.train("det_run_a", &a, &cfg, "cr=1", 11);
    let r2 = ws.train("det_run_b", &a, &cfg, "cr=1", 11);
    let ckpt_same = fs::read(r1.join(CHECKPOINT_FILE)).unwrap() == fs::read(r2.join(CHECKPOINT_FILE)).unwrap();
    Outcome::new(synth_same && ckpt_same, format!("synth hashes equal: {synth_same}; checkpoints bit-identical: {ckpt_same}"))
}

fn main() {
    let ws = Workspace::new();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |id: usize, name: &'static str, o: Outcome| {
        println!("criterion {id} [{}] {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, name, o));
    };
    record(1, "gradient oracle", gradient_oracle());
    record(2, "metric oracle", metric_oracle());
    record(3, "CoNLL composition", conll_composition());
    record(4, "formula spot values", spot_values());
    record(5, "end-to-end synthetic learning", end_to_end(&ws));
    let sweep = noisy_sweep(&ws);
    record(6, "semi-supervised trend", semi_supervised_trend(&sweep));
    record(7, "threshold ablation", threshold_ablation(&sweep));
    record(8, "inference invariants", inference_invariants());
    record(9, "determinism", determinism(&ws));

    let failed: Vec<usize> = results.iter().filter(|(_, _, o)| !o.passed).map(|(id, _, _)| *id).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", results.len());
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
