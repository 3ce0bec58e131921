//! Acceptance checks. Runs every criterion, prints one PASS/FAIL line each
//! and exits nonzero if any failed.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, StandardNormal};

use dystruct::calibration::{fit, loss_and_gradient, Example, FitConfig};
use dystruct::corpus::CorpusItem;
use dystruct::decoder::{sample_window_length, weld_interval, window_mean, Transcript};
use dystruct::denoiser::toy::{generate_corpus, CorpusShape, ToyConfig, ToyOracle};
use dystruct::diagnostics::instability_from_logits;
use dystruct::harness::{mcnemar, run_benchmark, BenchConfig, MethodKind, PairedOutcomes, ResultRow};
use dystruct::par::Parallelism;
use dystruct::partition::{crp_log_prior, log_likelihood, map_cuts};
use dystruct::state::Event;
use dystruct::{Distribution, SeedStream};

type Outcome = Result<String, String>;
type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Cut vectors for `gaps` gaps in lexicographic order (no cut before cut,
/// earlier gaps most significant).
fn all_cuts(gaps: usize) -> Vec<Vec<bool>> {
    (0u32..1 << gaps)
        .map(|bits| (0..gaps).map(|g| bits >> (gaps - 1 - g) & 1 == 1).collect())
        .collect()
}

/// Log posterior written out independently of the library.
fn oracle_log_posterior(cuts: &[bool], q: &[f64], alphas: &[f64]) -> f64 {
    let mut m = 1.0;
    let mut total = 0.0;
    for g in 0..cuts.len() {
        let a = alphas[g];
        if cuts[g] {
            total += q[g].ln() + (a / (m + a)).ln();
            m = 1.0;
        } else {
            total += (1.0 - q[g]).ln() + (m / (m + a)).ln();
            m += 1.0;
        }
    }
    total
}

fn map_enumeration_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    let mut agree = 0;
    let mut first_miss = None;
    for i in 0..1000 {
        let len = rng.random_range(2..=12usize);
        let q: Vec<f64> = (0..len - 1).map(|_| rng.random_range(0.05..0.95)).collect();
        let alphas: Vec<f64> = (0..len - 1).map(|_| rng.random_range(0.2..5.0)).collect();
        let dp = map_cuts(&q, &alphas).map_err(|e| e.to_string())?;
        let scored: Vec<(Vec<bool>, f64)> = all_cuts(len - 1)
            .into_iter()
            .map(|c| {
                let s = oracle_log_posterior(&c, &q, &alphas);
                (c, s)
            })
            .collect();
        let best = scored.iter().map(|e| e.1).fold(f64::NEG_INFINITY, f64::max);
        // canonical representative of the tie set: lexicographically smallest
        let canonical = scored
            .iter()
            .find(|e| e.1 >= best - 1e-12)
            .map(|e| e.0.clone())
            .expect("nonempty");
        if dp == canonical {
            agree += 1;
        } else if first_miss.is_none() {
            first_miss = Some(i);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        agree == 1000 && secs < 10.0,
        format!("{agree}/1000 agree, {secs:.2} s, first miss {first_miss:?}"),
    )
}

fn crp_normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_prior: f64 = 0.0;
    let mut worst_lik: f64 = 0.0;
    for _ in 0..200 {
        let len = rng.random_range(1..=12usize);
        let alphas: Vec<f64> = (0..len - 1).map(|_| rng.random_range(0.05..20.0)).collect();
        let q: Vec<f64> = (0..len - 1).map(|_| rng.random_range(0.01..0.99)).collect();
        let (mut zp, mut zl) = (0.0, 0.0);
        for c in all_cuts(len - 1) {
            zp += crp_log_prior(&c, &alphas).map_err(|e| e.to_string())?.exp();
            zl += log_likelihood(&c, &q).map_err(|e| e.to_string())?.exp();
        }
        worst_prior = worst_prior.max((zp - 1.0).abs());
        worst_lik = worst_lik.max((zl - 1.0).abs());
    }
    check(
        worst_prior <= 1e-9 && worst_lik <= 1e-9,
        format!("max |sum - 1|: prior {worst_prior:.2e}, likelihood {worst_lik:.2e}"),
    )
}

fn random_examples(rng: &mut ChaCha8Rng, n: usize, w: &[f64]) -> Vec<Example> {
    (0..n)
        .map(|_| {
            let x: Vec<f64> = (0..w.len()).map(|_| StandardNormal.sample(&mut *rng)).collect();
            let z: f64 = x.iter().zip(w).map(|(a, b)| a * b).sum();
            let d = rng.random::<f64>() < 1.0 / (1.0 + (-z).exp());
            Example { x, d }
        })
        .collect()
}

fn calibration() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_rel: f64 = 0.0;
    for _ in 0..100 {
        let dim = rng.random_range(1..=7usize);
        let w: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let n = rng.random_range(5..40usize);
        let mut ex = random_examples(&mut rng, n, &w);
        ex[0].d = true;
        ex[1].d = false;
        let lambda = rng.random_range(0.0..0.1);
        let probe: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect();
        let (_, grad) = loss_and_gradient(&ex, &probe, lambda, Parallelism::Sequential);
        let h = 1e-6;
        let numeric: Vec<f64> = (0..dim)
            .map(|k| {
                let mut up = probe.clone();
                let mut down = probe.clone();
                up[k] += h;
                down[k] -= h;
                let lu = loss_and_gradient(&ex, &up, lambda, Parallelism::Sequential).0;
                let ld = loss_and_gradient(&ex, &down, lambda, Parallelism::Sequential).0;
                (lu - ld) / (2.0 * h)
            })
            .collect();
        let diff: f64 = grad
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale: f64 = grad.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-8);
        worst_rel = worst_rel.max(diff / scale);
    }

    let planted = [1.5, -2.0, 0.5, 0.0, 1.0, -0.75, 2.0];
    let ex = random_examples(&mut rng, 20_000, &planted);
    let config = FitConfig {
        lambda: 1e-4,
        ..FitConfig::default()
    };
    let fitted = fit(&ex, &config, Parallelism::Threads(4)).map_err(|e| e.to_string())?;
    let dot: f64 = fitted.weights.iter().zip(&planted).map(|(a, b)| a * b).sum();
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let cosine = dot / (norm(&fitted.weights) * norm(&planted));

    let heavy = FitConfig {
        lambda: 1e6,
        ..FitConfig::default()
    };
    let shrunk = fit(&ex, &heavy, Parallelism::Sequential).map_err(|e| e.to_string())?;
    let shrunk_norm = norm(&shrunk.weights);
    check(
        worst_rel < 1e-5 && cosine >= 0.95 && shrunk_norm <= 1e-2,
        format!("gradient rel err {worst_rel:.2e}, planted cosine {cosine:.4}, |w| at lambda 1e6 {shrunk_norm:.2e}"),
    )
}

fn window_mechanics() -> Outcome {
    let lo = window_mean(0.0, 8, 48);
    let hi = window_mean(1.0, 8, 48);
    let root = SeedStream::new(4);
    let n = 10_000;
    let mut sum = 0.0;
    let mut in_range = true;
    for i in 0..n {
        let d = sample_window_length(0.5, 8, 48, 1_000, &root.derive("window", i)).expect("headroom");
        sum += d.raw as f64;
        in_range &= (8..=48).contains(&d.len);
    }
    let mean = sum / n as f64;
    let tol = 3.0 * (28.0f64 / n as f64).sqrt();
    check(
        lo == 48.0 && hi == 8.0 && (mean - 28.0).abs() <= tol && in_range,
        format!(
            "mu(0) {lo}, mu(1) {hi}, pre-clamp mean {mean:.4} (tolerance {tol:.4}), all clamped in [8,48]: {in_range}"
        ),
    )
}

struct ToyRun {
    corpus: Vec<CorpusItem>,
    oracle: ToyOracle,
}

fn toy_run() -> ToyRun {
    let corpus = generate_corpus(100, 2024, &CorpusShape::default());
    let oracle = ToyOracle::from_corpus(&corpus, ToyConfig::default()).expect("valid corpus");
    ToyRun { corpus, oracle }
}

/// First offending event index, checked by replaying weld intervals.
fn weld_mutations_outside(t: &Transcript) -> usize {
    let mut open: Option<(usize, usize)> = None;
    let mut bad = 0;
    for e in &t.events {
        match e {
            Event::Weld { interval, .. } => open = Some((interval[0], interval[1])),
            Event::Commit { pos, .. } => {
                if let Some((a, b)) = open {
                    bad += usize::from(!(a..b).contains(pos));
                }
            }
            Event::Remask { pos } => {
                if let Some((a, b)) = open {
                    bad += pos.iter().filter(|p| !(a..b).contains(*p)).count();
                }
            }
            Event::Predict { .. } | Event::Forced { .. } => {}
            _ => open = None,
        }
    }
    bad
}

/// Pair violations at positions `j` where a block boundary separates
/// `j - 1` and `j`, and over all positions.
fn violations(run: &ToyRun, method: MethodKind, seeds: &[u64]) -> Result<(usize, usize, usize), String> {
    let r = run_benchmark(
        &run.oracle,
        &run.corpus,
        &[method],
        seeds,
        &BenchConfig {
            keep_outputs: true,
            parallelism: Parallelism::Threads(4),
            ..BenchConfig::default()
        },
    )
    .map_err(|e| e.to_string())?;
    if !r.failures.is_empty() {
        return Err(format!("{} failed decodes", r.failures.len()));
    }
    let mut cross = 0;
    let mut total = 0;
    let mut outside = 0;
    for o in &r.outputs {
        let item = run.corpus.iter().find(|i| i.id == o.prompt_id).expect("known id");
        let grammar = run.oracle.grammar(&item.prompt).expect("known prompt");
        let bad = grammar.violations(&o.tokens);
        let boundaries: BTreeSet<usize> = o.transcript.block_boundaries().into_iter().collect();
        cross += bad.iter().filter(|j| boundaries.contains(j)).count();
        total += bad.len();
        outside += weld_mutations_outside(&o.transcript);
    }
    Ok((cross, total, outside))
}

fn welding(run: &ToyRun) -> Outcome {
    let seeds = [0, 1, 2];
    let (cross_on, total_on, outside) = violations(run, MethodKind::Dystruct, &seeds)?;
    let (cross_off, total_off, _) = violations(run, MethodKind::DystructNoWeld, &seeds)?;
    check(
        outside == 0 && cross_on < cross_off,
        format!(
            "mutations outside weld intervals {outside}; cross-boundary violations on {cross_on} vs off {cross_off} (all positions {total_on} vs {total_off})"
        ),
    )
}

fn mean_tok_acc(rows: &[ResultRow]) -> f64 {
    rows.iter().map(|r| r.tok_acc).sum::<f64>() / rows.len() as f64
}

fn scheduling(run: &ToyRun) -> Outcome {
    let seeds = [0, 1, 2];
    let r = run_benchmark(
        &run.oracle,
        &run.corpus,
        &[MethodKind::Dystruct, MethodKind::DystructNoSchedule],
        &seeds,
        &BenchConfig {
            parallelism: Parallelism::Threads(4),
            ..BenchConfig::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let (on, off): (Vec<ResultRow>, Vec<ResultRow>) = r.rows.into_iter().partition(|r| r.method == "dystruct");
    let (a, b) = (mean_tok_acc(&on), mean_tok_acc(&off));
    check(
        a > b && !on.is_empty() && on.len() == off.len(),
        format!(
            "token accuracy scheduled {a:.4} vs left-to-right {b:.4} over {} decodes",
            on.len()
        ),
    )
}

fn mcnemar_values() -> Outcome {
    let m = mcnemar(8, 2);
    let even = mcnemar(5, 5);
    let rows = |exact: &[bool]| -> Vec<ResultRow> {
        exact
            .iter()
            .enumerate()
            .map(|(i, &e)| ResultRow {
                method: "m".into(),
                prompt_id: format!("p{i}"),
                seed: 0,
                exact: e,
                tok_acc: 0.0,
                toks: 0,
                blks: 0,
                calls: 0,
                iters: 0,
            })
            .collect()
    };
    let report = PairedOutcomes::from_rows(&rows(&[true, true, false, false]), &rows(&[true, false, true, false]))
        .map_err(|e| e.to_string())?
        .report();
    let json = serde_json::to_value(report).map_err(|e| e.to_string())?;
    let keys: BTreeSet<&str> = json
        .as_object()
        .map(|o| o.keys().map(String::as_str).collect())
        .unwrap_or_default();
    let expected: BTreeSet<&str> = ["n", "acc_a", "acc_b", "b", "c", "chi2_cc", "p_cc", "p_exact"].into();
    check(
        m.chi2_cc == 2.5 && m.p_exact == 0.109375 && even.p_exact == 1.0 && even.chi2_cc == 0.0 && keys == expected,
        format!(
            "b=8,c=2: chi2_cc {} p_exact {}; b=c=5: chi2_cc {} p_exact {}; report fields {:?}",
            m.chi2_cc, m.p_exact, even.chi2_cc, even.p_exact, keys
        ),
    )
}

fn cli(dir: &Path, args: &[&str], env_seed: Option<&str>) -> Result<Vec<u8>, String> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dystruct"));
    cmd.current_dir(dir).args(args).env_remove("DYSTRUCT_SEED");
    if let Some(s) = env_seed {
        cmd.env("DYSTRUCT_SEED", s);
    }
    let out = cmd.output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(out.stdout)
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    let read = |name: &str| std::fs::read(dir.join(name)).map_err(|e| format!("{name}: {e}"));
    cli(dir, &["corpus", "--n", "12", "--out", "c.jsonl", "--seed", "5"], None)?;
    cli(dir, &["corpus", "--n", "12", "--out", "c2.jsonl"], Some("5"))?;
    let corpus_same = read("c.jsonl")? == read("c2.jsonl")?;

    let bench = |out: &str, threads: &str, tdir: &str| {
        cli(
            dir,
            &[
                "bench",
                "--corpus",
                "c.jsonl",
                "--out",
                out,
                "--threads",
                threads,
                "--seeds",
                "3,4",
                "--transcripts",
                tdir,
            ],
            None,
        )
    };
    let s1 = bench("a.csv", "4", "ta")?;
    let s2 = bench("b.csv", "4", "tb")?;
    let s3 = bench("c.csv", "1", "tc")?;
    let csv_same = read("a.csv")? == read("b.csv")? && read("a.csv")? == read("c.csv")?;
    let summary_same = s1 == s2 && s1 == s3;
    let mut transcripts_same = true;
    let mut n_transcripts = 0;
    for entry in std::fs::read_dir(dir.join("ta")).map_err(|e| e.to_string())? {
        let name = entry.map_err(|e| e.to_string())?.file_name();
        let a = std::fs::read(dir.join("ta").join(&name)).map_err(|e| e.to_string())?;
        let b = std::fs::read(dir.join("tb").join(&name)).map_err(|e| e.to_string())?;
        let c = std::fs::read(dir.join("tc").join(&name)).map_err(|e| e.to_string())?;
        transcripts_same &= a == b && a == c;
        n_transcripts += 1;
    }

    let decode = |t: &str, env: Option<&str>| {
        cli(
            dir,
            &[
                "decode",
                "--toy",
                "c.jsonl",
                "--prompt-id",
                "toy-0002",
                "--transcript",
                t,
            ],
            env,
        )
    };
    let d1 = decode("d1.json", Some("9"))?;
    let d2 = decode("d2.json", Some("9"))?;
    let decode_same = d1 == d2 && read("d1.json")? == read("d2.json")?;
    check(
        corpus_same && csv_same && summary_same && transcripts_same && decode_same && n_transcripts == 12 * 2 * 6,
        format!(
            "corpus {corpus_same}, CSV at 4/4/1 threads {csv_same}, summaries {summary_same}, {n_transcripts} transcripts {transcripts_same}, decode {decode_same}"
        ),
    )
}

/// Budget charges recomputed from the raw events.
fn charged(t: &Transcript) -> usize {
    t.events
        .iter()
        .map(|e| match e {
            Event::Select { steps, .. } | Event::Diagnostics { steps, .. } | Event::Weld { steps, .. } => *steps,
            _ => 0,
        })
        .sum()
}

fn budget_parity(run: &ToyRun) -> Outcome {
    let r = run_benchmark(
        &run.oracle,
        &run.corpus,
        &[
            MethodKind::FixedLength,
            MethodKind::Dystruct,
            MethodKind::DystructNoSchedule,
            MethodKind::DystructNoWeld,
            MethodKind::DystructNoScheduleNoWeld,
        ],
        &[0],
        &BenchConfig {
            keep_outputs: true,
            parallelism: Parallelism::Threads(4),
            ..BenchConfig::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let fixed: Vec<&ResultRow> = r.rows.iter().filter(|r| r.method == "fixed-length").collect();
    let fixed_ok = fixed.iter().all(|r| r.iters == 256 && r.calls == 256);
    let mut worst = 0;
    let mut dystruct = 0;
    for o in r.outputs.iter().filter(|o| o.method != MethodKind::FixedLength) {
        worst = worst.max(charged(&o.transcript));
        dystruct += 1;
    }
    check(
        fixed_ok && fixed.len() == 100 && worst <= 256 && dystruct == 400 && r.failures.is_empty(),
        format!(
            "fixed-length 256 iterations on {}/{} prompts; max charged steps over {dystruct} structured transcripts {worst}",
            fixed.iter().filter(|r| r.iters == 256).count(),
            fixed.len()
        ),
    )
}

fn spot_values() -> Outcome {
    let uniform =
        Distribution::new(vec![(2, 0.25), (3, 0.25), (4, 0.25), (5, 0.25)], 0.0).map_err(|e| e.to_string())?;
    let h = uniform.entropy();
    let j = Distribution::delta(2).jsd(&Distribution::delta(3));
    let flat = instability_from_logits(vec![0.7; 5]);
    let weld = weld_interval(&(0..10), &(10..20), 4);
    let ln4 = 4f64.ln();
    let ln2 = 2f64.ln();
    check(
        (h - ln4).abs() <= 1e-12 && (j - ln2).abs() <= 1e-12 && flat.h.iter().all(|&x| x == 0.5) && weld == (6..14),
        format!(
            "H(uniform-4) - ln4 = {:.1e}, JSD(deltas) - ln2 = {:.1e}, flat h {:?}, weld interval {weld:?}",
            h - ln4,
            j - ln2,
            flat.h
        ),
    )
}

fn main() {
    // accept the listing probe from test runners without running the suite
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let run = toy_run();
    let criteria: Vec<(&str, Check)> = vec![
        ("MAP-enumeration equivalence", Box::new(map_enumeration_equivalence)),
        ("CRP normalization", Box::new(crp_normalization)),
        ("calibration", Box::new(calibration)),
        ("window-size mechanics", Box::new(window_mechanics)),
        ("welding locality and efficacy", Box::new(|| welding(&run))),
        ("scheduling efficacy", Box::new(|| scheduling(&run))),
        ("McNemar", Box::new(mcnemar_values)),
        ("determinism", Box::new(determinism)),
        ("budget parity", Box::new(|| budget_parity(&run))),
        ("formula spot values", Box::new(spot_values)),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (tag, detail) = match f() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!(
            "[{tag}] {:>2} {name}: {detail} ({:.1} s)",
            i + 1,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
