//! End-to-end acceptance checks. Prints one PASS/FAIL line per check and
//! exits non-zero if any fails. Pass substrings as arguments to run a subset.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use ldar_core::diffcore::{Tape, Tensor};
use ldar_core::environ::{generate, split, GeneratorConfig, Instance};
use ldar_core::eval::{evaluate, EvalOptions, EvalReport, Evaluated};
use ldar_core::policy::{
    band_forward, band_log_prob, infer_band_params, quantiles_to_indices, sample_band, BandAction, BandHeads, BandParams,
    HeadKind, PolicyConfig, PolicyParams,
};
use ldar_core::rng;
use ldar_core::strategies::{adaptive_k, StrategySpec};
use ldar_core::trainer::TrainerConfig;
use ldar_lab::checkpoint::Checkpoint;
use ldar_lab::train::{train, TrainSpec};
use rand::Rng as _;
use statrs::distribution::{Beta, Continuous, ContinuousCDF};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---------------------------------------------------------------- gradients

fn gradient_check() -> Outcome {
    let cfg = PolicyConfig { d_model: 16, n_layers: 1, n_heads: 2, ffn_dim: 64, ..PolicyConfig::default() };
    let h = 1e-6;
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    let mut worst_abs: f64 = 0.0;
    let mut checked = 0usize;
    for seed in 0..20u64 {
        let mut r = rng::seeded(1000 + seed);
        let mut params = PolicyParams::init(cfg, &mut r).unwrap();
        let scores: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
        let action = sample_band(&infer_band_params(&params, &scores).unwrap(), cfg.sample_clamp, &mut r).unwrap();

        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let fwd = band_forward(&mut tape, &params, &bound, &[&scores]).unwrap();
        let lp = band_log_prob(&mut tape, &fwd.heads, &[action]).unwrap();
        let grads = tape.backward(lp).unwrap();

        let log_prob = |p: &PolicyParams| infer_band_params(p, &scores).unwrap().log_prob(&action).unwrap();
        for i in 0..params.len() {
            let analytic: Vec<f64> = match grads.of(bound.var(i)) {
                Some(g) => g.data().to_vec(),
                None => vec![0.0; params.tensor(i).numel()],
            };
            for (j, &a) in analytic.iter().enumerate() {
                let orig = params.tensor(i).data()[j];
                params.tensor_mut(i).data_mut()[j] = orig + h;
                let plus = log_prob(&params);
                params.tensor_mut(i).data_mut()[j] = orig - h;
                let minus = log_prob(&params);
                params.tensor_mut(i).data_mut()[j] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                let err = (a - numeric).abs();
                worst_abs = worst_abs.max(err);
                worst = worst.max(err / a.abs().max(numeric.abs()).max(1e-3));
                checked += 1;
            }
        }
    }
    let elapsed = started.elapsed();
    outcome(
        worst < 1e-4 && elapsed < Duration::from_secs(30),
        format!(
            "{checked} partials over 20 seeds, max rel err {worst:.2e} (abs {worst_abs:.2e}), {:.1}s (limits 1e-4, 30s)",
            elapsed.as_secs_f64()
        ),
    )
}

// ------------------------------------------------------------ beta sampler

fn beta_sampler() -> Outcome {
    let n = 200_000;
    let mut ok = true;
    let mut parts = Vec::new();
    for (i, (a, b)) in [(1.0, 1.0), (2.0, 5.0), (0.7, 0.7)].into_iter().enumerate() {
        let p = BandParams { alpha_l: a, beta_l: b, alpha_delta: 1.0, beta_delta: 1.0 };
        let mut r = rng::seeded(40 + i as u64);
        let mut xs: Vec<f64> = (0..n).map(|_| sample_band(&p, 1e-6, &mut r).unwrap().q_l).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let true_mean = a / (a + b);
        let var = a * b / ((a + b) * (a + b) * (a + b + 1.0));
        let z = (mean - true_mean).abs() / (var / n as f64).sqrt();
        xs.sort_by(f64::total_cmp);
        let dist = Beta::new(a, b).unwrap();
        let worst_q = [0.1, 0.5, 0.9]
            .iter()
            .map(|&q| {
                let emp = xs[((q * n as f64).ceil() as usize) - 1];
                (emp - dist.inverse_cdf(q)).abs()
            })
            .fold(0.0, f64::max);
        ok &= z < 4.0 && worst_q < 0.01;
        parts.push(format!("Beta({a},{b}): mean off by {z:.2} SE, quantiles off by {worst_q:.4}"));
    }
    outcome(ok, format!("{}; limits 4 SE, 0.01", parts.join("; ")))
}

// ------------------------------------------------------------- log density

fn log_density() -> Outcome {
    let grid = [0.5, 1.0, 2.0, 5.0];
    let xs: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for &al in &grid {
        for &bl in &grid {
            for &ad in &grid {
                for &bd in &grid {
                    let (dl, dd) = (Beta::new(al, bl).unwrap(), Beta::new(ad, bd).unwrap());
                    for &xl in &xs {
                        for &xd in &xs {
                            let mut tape = Tape::new();
                            let vars = [al, bl, ad, bd].map(|v| tape.param("", &Tensor::scalar(v)));
                            let lp = band_log_prob(&mut tape, &BandHeads { vars }, &[BandAction::compose(xl, xd)]).unwrap();
                            let reference = dl.ln_pdf(xl) + dd.ln_pdf(xd);
                            worst = worst.max((tape.scalar(lp) - reference).abs());
                            count += 1;
                        }
                    }
                }
            }
        }
    }
    outcome(worst <= 1e-9, format!("{count} grid points, max abs diff {worst:.2e} (limit 1e-9)"))
}

// -------------------------------------------------------- index mapping

/// `round_half_away(n·k/100)` by scanning every candidate integer `i` and
/// comparing `|100·i − n·k|` in exact integer arithmetic.
fn grid_round(n: usize, k: usize) -> usize {
    let target = n * k;
    let mut best: usize = 0;
    for i in 0..=n {
        if (100 * i).abs_diff(target) <= (100 * best).abs_diff(target) {
            best = i;
        }
    }
    best
}

fn index_mapping() -> Outcome {
    let mut total = 0;
    let mut agree = 0;
    let mut first_bad = None;
    for n in 1..=50usize {
        for kl in 0..=100 {
            for ku in kl..=100 {
                let (ql, qu) = (kl as f64 / 100.0, ku as f64 / 100.0);
                let l = grid_round(n, kl).max(1);
                let u = grid_round(n, ku).max(l).min(n);
                total += 1;
                if quantiles_to_indices(n, ql, qu).unwrap() == (l, u) {
                    agree += 1;
                } else if first_bad.is_none() {
                    first_bad = Some((n, ql, qu));
                }
            }
        }
    }
    let mut detail = format!("{agree}/{total} agree with the exact brute-force oracle");
    if let Some(b) = first_bad {
        detail.push_str(&format!(", first disagreement {b:?}"));
    }
    outcome(agree == total, detail)
}

// ------------------------------------------------------------ adaptive k

fn brute_adaptive(s: &[f64]) -> Vec<usize> {
    let n = s.len();
    let mut desc: Vec<usize> = (0..n).collect();
    desc.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b)));
    let mut best = (f64::NEG_INFINITY, 1);
    for cut in 1..n {
        let low_of_top = desc[..cut].iter().map(|&i| s[i]).fold(f64::INFINITY, f64::min);
        let high_of_rest = desc[cut..].iter().map(|&i| s[i]).fold(f64::NEG_INFINITY, f64::max);
        if low_of_top - high_of_rest > best.0 {
            best = (low_of_top - high_of_rest, cut);
        }
    }
    desc[..best.1].to_vec()
}

fn adaptive_k_oracle() -> Outcome {
    let mut r = rng::seeded(5);
    let mut agree = 0;
    for t in 0..1000 {
        let n = r.random_range(2..=100);
        let s: Vec<f64> = (0..n)
            .map(|_| {
                let x: f64 = r.random_range(-1.0..1.0);
                if t % 2 == 0 {
                    (x * 20.0).round() / 20.0
                } else {
                    x
                }
            })
            .collect();
        if adaptive_k(&s) == brute_adaptive(&s) {
            agree += 1;
        }
    }
    outcome(agree == 1000, format!("{agree}/1000 random vectors agree (half with tied scores)"))
}

// -------------------------------------------------------------- inverted U

fn sweep(data: &[Instance], ks: &[usize]) -> Vec<f64> {
    ks.iter()
        .map(|&k| evaluate("k", Evaluated::Fixed(&StrategySpec::TopK(k)), data, &EvalOptions::default(), None).unwrap().mean_score)
        .collect()
}

fn inverted_u() -> Outcome {
    let cfg = GeneratorConfig { n_instances: 1000, seed: 0, ..GeneratorConfig::default() };
    let data = generate(&cfg).unwrap();
    let n = cfg.n_passages;
    let ks = [1, 5, 10, 25, n];
    let scores = sweep(&data, &ks);
    let again = sweep(&generate(&cfg).unwrap(), &ks);
    let best = (1..4).find(|&i| scores[i] >= scores[0] + 0.10 && scores[i] >= scores[4] + 0.10);
    let curve: Vec<String> = ks.iter().zip(&scores).map(|(k, s)| format!("top_{k} {s:.3}")).collect();
    outcome(
        best.is_some() && scores == again,
        format!(
            "{}; k* = {}, margins 0.10 required, deterministic: {}",
            curve.join(", "),
            best.map(|i| ks[i].to_string()).unwrap_or_else(|| "none".into()),
            scores == again
        ),
    )
}

// ---------------------------------------------------------------- training

struct Run {
    report: EvalReport,
    elapsed: Duration,
}

fn train_run(policy: PolicyConfig, steps: u64, train_set: &[Instance], test: &[Instance]) -> Run {
    let dir = tempfile::tempdir().unwrap();
    let spec = TrainSpec {
        policy,
        trainer: TrainerConfig { total_steps: steps, seed: 5, eval_every: 500, ..TrainerConfig::default() },
        out_dir: dir.path().to_path_buf(),
        greedy_eval: false,
        quiet: true,
    };
    let started = Instant::now();
    let summary = train(&spec, train_set, test, None).unwrap();
    Run { report: summary.final_eval.unwrap(), elapsed: started.elapsed() }
}

fn heterogeneous_split() -> (Vec<Instance>, Vec<Instance>) {
    let cfg = GeneratorConfig { n_instances: 2500, seed: 1, ..GeneratorConfig::heterogeneous() };
    split(generate(&cfg).unwrap(), 500).unwrap()
}

fn learning_lift(band: &mut Option<Run>) -> Outcome {
    let (train_set, test) = heterogeneous_split();
    let n = test[0].n();
    let ks: Vec<usize> = (1..=n).collect();
    let fixed = sweep(&test, &ks);
    let (best_k, best) = fixed.iter().enumerate().fold((0, f64::MIN), |acc, (i, &s)| if s > acc.1 { (i + 1, s) } else { acc });
    let run = train_run(PolicyConfig::desk(), 2000, &train_set, &test);
    let r = &run.report;
    let pass = r.mean_score >= best + 0.05 && r.mean_token_ratio < 1.0 && run.elapsed <= Duration::from_secs(600);
    let detail = format!(
        "held-out {:.3} vs best top_{best_k} {best:.3} (margin 0.05), token ratio {:.3}, trained 2000 steps in {:.0}s (limit 600s)",
        r.mean_score,
        r.mean_token_ratio,
        run.elapsed.as_secs_f64()
    );
    *band = Some(run);
    outcome(pass, detail)
}

fn band_vs_bernoulli(band: &mut Option<Run>) -> Outcome {
    let (train_set, test) = heterogeneous_split();
    let band = band.get_or_insert_with(|| train_run(PolicyConfig::desk(), 2000, &train_set, &test));
    let bern = train_run(PolicyConfig::desk().with_head(HeadKind::Bernoulli), 2000, &train_set, &test);
    let (b, q) = (&band.report, &bern.report);
    outcome(
        b.mean_score >= q.mean_score && b.mean_passage_ratio <= q.mean_passage_ratio + 0.05,
        format!(
            "2000 steps each: band {:.3} (passages {:.3}) vs bernoulli {:.3} (passages {:.3})",
            b.mean_score, b.mean_passage_ratio, q.mean_score, q.mean_passage_ratio
        ),
    )
}

fn capacity_adaptation() -> Outcome {
    let width = |c: f64| {
        let cfg = GeneratorConfig { n_instances: 1500, n_passages: 32, seed: 2, ..GeneratorConfig::fixed_capacity(c) };
        let (train_set, test) = split(generate(&cfg).unwrap(), 300).unwrap();
        train_run(PolicyConfig::desk(), 400, &train_set, &test).report.mean_band_width()
    };
    let (low, high) = (width(0.5), width(6.0));
    outcome(high >= low + 0.05, format!("mean band width {low:.3} at C = 0.5, {high:.3} at C = 6 (margin 0.05), 400 steps each"))
}

fn determinism() -> Outcome {
    let cfg = GeneratorConfig { n_instances: 300, seed: 3, ..GeneratorConfig::heterogeneous() };
    let (train_set, test) = split(generate(&cfg).unwrap(), 60).unwrap();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let trainer = TrainerConfig { total_steps: 25, seed: 11, eval_every: 10, ..TrainerConfig::default() };
    let mut summaries = Vec::new();
    for d in &dirs {
        let spec = TrainSpec {
            policy: PolicyConfig::desk(),
            trainer,
            out_dir: d.path().to_path_buf(),
            greedy_eval: false,
            quiet: true,
        };
        summaries.push(train(&spec, &train_set, &test, None).unwrap());
    }
    let metrics: Vec<Vec<u8>> = dirs.iter().map(|d| std::fs::read(d.path().join("metrics.csv")).unwrap()).collect();
    let same_metrics = metrics[0] == metrics[1];

    let opts = EvalOptions { seed: 17, ..EvalOptions::default() };
    let live = evaluate("ldar", Evaluated::Policy(&summaries[0].trainer.params), &test, &opts, None).unwrap();
    let loaded = Checkpoint::load(&summaries[0].checkpoint).unwrap();
    let reloaded = evaluate("ldar", Evaluated::Policy(&loaded.params), &test, &opts, None).unwrap();
    outcome(
        same_metrics && live == reloaded,
        format!(
            "metrics files identical: {same_metrics} ({} bytes), reloaded checkpoint report identical: {}",
            metrics[0].len(),
            live == reloaded
        ),
    )
}

// -------------------------------------------------------------------- main

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));
    let band_run = std::cell::RefCell::new(None);
    let checks: Vec<(&str, Box<dyn FnMut() -> Outcome + '_>)> = vec![
        ("gradient_check", Box::new(gradient_check)),
        ("beta_sampler", Box::new(beta_sampler)),
        ("log_density", Box::new(log_density)),
        ("index_mapping", Box::new(index_mapping)),
        ("adaptive_k_oracle", Box::new(adaptive_k_oracle)),
        ("inverted_u", Box::new(inverted_u)),
        ("learning_lift", Box::new(|| learning_lift(&mut band_run.borrow_mut()))),
        ("band_vs_bernoulli", Box::new(|| band_vs_bernoulli(&mut band_run.borrow_mut()))),
        ("capacity_adaptation", Box::new(capacity_adaptation)),
        ("determinism", Box::new(determinism)),
    ];
    let mut failed = 0;
    let mut ran = 0;
    for (name, check) in checks {
        if !wanted(name) {
            continue;
        }
        ran += 1;
        let started = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            outcome(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        if !result.pass {
            failed += 1;
        }
        println!(
            "{} {name:<20} {} [{:.1}s]",
            if result.pass { "PASS" } else { "FAIL" },
            result.detail,
            started.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
