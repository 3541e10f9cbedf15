//! Strategy evaluation, comparison tables and top-k sweeps.

use std::fmt::Write as _;
use std::path::Path;

use ldar_core::environ::{AnswerOracle, Instance};
use ldar_core::eval::{evaluate, EvalOptions, EvalReport, Evaluated};
use ldar_core::policy::{HeadKind, PolicyParams};
use ldar_core::strategies::StrategySpec;

use crate::checkpoint::Checkpoint;
use crate::error::{LabError, Result};

pub const TABLE_HEADER: [&str; 4] = ["strategy", "score", "token_ratio", "passage_ratio"];
pub const SWEEP_HEADER: [&str; 4] = ["k", "score", "token_ratio", "passage_ratio"];
pub const ROWS_HEADER: [&str; 8] = ["id", "reward", "token_ratio", "passage_ratio", "lower", "upper", "q_l", "q_u"];

/// Loads the checkpoint behind a learned strategy and checks its head.
pub fn load_policy(spec: &StrategySpec) -> Result<Option<PolicyParams>> {
    let (path, head) = match spec {
        StrategySpec::LdarCheckpoint(p) => (p, HeadKind::Band),
        StrategySpec::BernoulliCheckpoint(p) => (p, HeadKind::Bernoulli),
        _ => return Ok(None),
    };
    let path = Path::new(path);
    if !path.exists() {
        return Err(LabError::usage(format!("checkpoint {} not found", path.display())));
    }
    let params = Checkpoint::load(path)?.params;
    if params.config().head != head {
        return Err(LabError::usage(format!(
            "{} holds a {} policy, not {}",
            path.display(),
            params.config().head.as_str(),
            head.as_str()
        )));
    }
    Ok(Some(params))
}

/// Evaluates one strategy; learned policies act by sampling under `opts.seed`.
pub fn evaluate_strategy(
    spec: &StrategySpec,
    data: &[Instance],
    opts: &EvalOptions,
    oracle: Option<&mut dyn AnswerOracle>,
) -> Result<EvalReport> {
    let label = spec.label();
    let run = || -> Result<EvalReport> {
        let policy = load_policy(spec)?;
        let what = match &policy {
            Some(p) => Evaluated::Policy(p),
            None => Evaluated::Fixed(spec),
        };
        Ok(evaluate(&label, what, data, opts, oracle)?)
    };
    run().map_err(|e| LabError::Strategy { label: label.clone(), source: Box::new(e) })
}

pub fn compare(
    specs: &[StrategySpec],
    data: &[Instance],
    opts: &EvalOptions,
    mut oracle: Option<&mut dyn AnswerOracle>,
) -> Result<Vec<EvalReport>> {
    if specs.is_empty() {
        return Err(LabError::usage("compare needs at least one strategy"));
    }
    specs
        .iter()
        .map(|s| evaluate_strategy(s, data, opts, ldar_core::environ::reborrow(&mut oracle)))
        .collect()
}

/// Sweep points: the given `ks`, or 1, 5, 10, 25 and the largest pool size.
pub fn sweep_ks(data: &[Instance], ks: Option<&[usize]>) -> Vec<usize> {
    let mut out = match ks {
        Some(ks) => ks.to_vec(),
        None => {
            let n = data.iter().map(Instance::n).max().unwrap_or(1);
            vec![1, 5, 10, 25, n].into_iter().filter(|&k| k <= n).collect()
        }
    };
    out.sort_unstable();
    out.dedup();
    out
}

pub fn sweep(
    ks: &[usize],
    data: &[Instance],
    opts: &EvalOptions,
    mut oracle: Option<&mut dyn AnswerOracle>,
) -> Result<Vec<(usize, EvalReport)>> {
    ks.iter()
        .map(|&k| Ok((k, evaluate_strategy(&StrategySpec::TopK(k), data, opts, ldar_core::environ::reborrow(&mut oracle))?)))
        .collect()
}

fn write_csv<const W: usize>(path: &Path, header: [&str; W], rows: impl Iterator<Item = [String; W]>) -> Result<()> {
    let io = |e: csv::Error| LabError::Io { path: path.to_path_buf(), source: e.into() };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(header).map_err(io)?;
    for row in rows {
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| LabError::io(path, e))
}

pub fn write_table_csv(path: &Path, reports: &[EvalReport]) -> Result<()> {
    write_csv(
        path,
        TABLE_HEADER,
        reports.iter().map(|r| {
            [r.label.clone(), r.mean_score.to_string(), r.mean_token_ratio.to_string(), r.mean_passage_ratio.to_string()]
        }),
    )
}

pub fn write_sweep_csv(path: &Path, sweep: &[(usize, EvalReport)]) -> Result<()> {
    write_csv(
        path,
        SWEEP_HEADER,
        sweep.iter().map(|(k, r)| {
            [k.to_string(), r.mean_score.to_string(), r.mean_token_ratio.to_string(), r.mean_passage_ratio.to_string()]
        }),
    )
}

pub fn write_rows_csv(path: &Path, report: &EvalReport) -> Result<()> {
    write_csv(
        path,
        ROWS_HEADER,
        report.rows.iter().map(|r| {
            [
                r.id.clone(),
                r.reward.to_string(),
                r.token_ratio.to_string(),
                r.passage_ratio.to_string(),
                r.lower.to_string(),
                r.upper.to_string(),
                r.q_l.to_string(),
                r.q_u.to_string(),
            ]
        }),
    )
}

/// Plain-text table with the token ratio in parentheses after the score.
pub fn render_table(reports: &[EvalReport]) -> String {
    let cells: Vec<[String; 3]> = reports
        .iter()
        .map(|r| {
            [
                r.label.clone(),
                format!("{:.2} ({:.3})", 100.0 * r.mean_score, r.mean_token_ratio),
                format!("{:.3}", r.mean_passage_ratio),
            ]
        })
        .collect();
    let head = ["strategy", "score (token ratio)", "passage ratio"];
    let width = |c: usize| cells.iter().map(|r| r[c].len()).chain([head[c].len()]).max().unwrap_or(0);
    let (w0, w1, w2) = (width(0), width(1), width(2));
    let mut out = String::new();
    writeln!(out, "{:<w0$}  {:>w1$}  {:>w2$}", head[0], head[1], head[2]).unwrap();
    writeln!(out, "{}  {}  {}", "-".repeat(w0), "-".repeat(w1), "-".repeat(w2)).unwrap();
    for r in &cells {
        writeln!(out, "{:<w0$}  {:>w1$}  {:>w2$}", r[0], r[1], r[2]).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ldar_core::environ::{generate, GeneratorConfig};

    fn data() -> Vec<Instance> {
        generate(&GeneratorConfig { n_instances: 30, ..GeneratorConfig::default() }).unwrap()
    }

    #[test]
    fn two_row_table_with_lc_ratio_one() {
        let specs = [StrategySpec::TopK(1), StrategySpec::LongContext];
        let reports = compare(&specs, &data(), &EvalOptions::default(), None).unwrap();
        assert_eq!(reports.len(), 2);
        assert_eq!(reports[1].mean_token_ratio, 1.0);
        let text = render_table(&reports);
        assert_eq!(text.lines().count(), 4);
        assert!(text.lines().nth(3).unwrap().starts_with("lc "));
        let widths: Vec<usize> = text.lines().map(str::len).collect();
        assert!(widths.iter().all(|&w| w == widths[0]));
    }

    #[test]
    fn empty_list_is_a_usage_error() {
        let e = compare(&[], &data(), &EvalOptions::default(), None).unwrap_err();
        assert_eq!(e.exit_code(), 1);
    }

    #[test]
    fn missing_checkpoint_is_a_labelled_usage_error() {
        let spec = StrategySpec::parse("ldar:/nonexistent/x.ldar").unwrap();
        let e = evaluate_strategy(&spec, &data(), &EvalOptions::default(), None).unwrap_err();
        assert_eq!(e.exit_code(), 1);
        assert!(e.to_string().starts_with("ldar: "), "{e}");
    }

    #[test]
    fn csv_schema_is_fixed() {
        let dir = tempfile::tempdir().unwrap();
        let d = data();
        let reports = compare(&[StrategySpec::AdaptiveK], &d, &EvalOptions::default(), None).unwrap();
        let p = dir.path().join("t.csv");
        write_table_csv(&p, &reports).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("strategy,score,token_ratio,passage_ratio\nadaptive_k,"));
        let ks = sweep_ks(&d, None);
        assert_eq!(ks, vec![1, 5, 10, 25, 52]);
        let s = sweep(&ks, &d, &EvalOptions::default(), None).unwrap();
        write_sweep_csv(&dir.path().join("s.csv"), &s).unwrap();
        assert_eq!(s[4].1.mean_token_ratio, 1.0);
    }
}
