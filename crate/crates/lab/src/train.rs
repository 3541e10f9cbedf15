//! Training runs with metrics, periodic held-out evaluation and checkpoints.
//!
//! A run directory holds `metrics.csv` (one row per step), `eval.csv` (one
//! row per held-out evaluation), `checkpoint-<step>.ldar` every `eval_every`
//! steps and `checkpoint.ldar` at the end.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ldar_core::environ::{self, AnswerOracle, Instance};
use ldar_core::eval::{evaluate, EvalOptions, EvalReport, Evaluated};
use ldar_core::policy::PolicyConfig;
use ldar_core::trainer::{Trainer, TrainerConfig};

use crate::checkpoint::Checkpoint;
use crate::error::{LabError, Result};
use crate::metrics::MetricsWriter;

pub const EVAL_HEADER: &str = "step,score,token_ratio,passage_ratio,band_width";

#[derive(Debug, Clone)]
pub struct TrainSpec {
    pub policy: PolicyConfig,
    pub trainer: TrainerConfig,
    pub out_dir: PathBuf,
    pub greedy_eval: bool,
    pub quiet: bool,
}

#[derive(Debug)]
pub struct TrainSummary {
    pub trainer: Trainer,
    pub checkpoint: PathBuf,
    pub final_eval: Option<EvalReport>,
}

pub fn metrics_path(dir: &Path) -> PathBuf {
    dir.join("metrics.csv")
}

pub fn checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("checkpoint.ldar")
}

fn held_out_eval(t: &Trainer, held_out: &[Instance], greedy: bool, oracle: Option<&mut dyn AnswerOracle>) -> Result<EvalReport> {
    let opts = EvalOptions { seed: t.config.seed, greedy, ..EvalOptions::default() };
    Ok(evaluate(t.params.config().head.as_str(), Evaluated::Policy(&t.params), held_out, &opts, oracle)?)
}

pub fn train(
    spec: &TrainSpec,
    train_set: &[Instance],
    held_out: &[Instance],
    mut oracle: Option<&mut dyn AnswerOracle>,
) -> Result<TrainSummary> {
    let dir = &spec.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    let mut trainer = Trainer::new(spec.policy, spec.trainer)?;
    let mut metrics = MetricsWriter::create(&metrics_path(dir))?;
    let eval_path = dir.join("eval.csv");
    let mut evals = BufWriter::new(File::create(&eval_path).map_err(|e| LabError::io(&eval_path, e))?);
    writeln!(evals, "{EVAL_HEADER}").map_err(|e| LabError::io(&eval_path, e))?;

    let mut final_eval = None;
    let every = spec.trainer.eval_every;
    let total = spec.trainer.total_steps;
    let mut evaluate_now = |t: &Trainer, oracle: Option<&mut dyn AnswerOracle>| -> Result<()> {
        let step = t.state.step;
        Checkpoint::from_trainer(t).save(&dir.join(format!("checkpoint-{step:06}.ldar")))?;
        if held_out.is_empty() {
            return Ok(());
        }
        let r = held_out_eval(t, held_out, spec.greedy_eval, oracle)?;
        writeln!(
            evals,
            "{step},{},{},{},{}",
            r.mean_score,
            r.mean_token_ratio,
            r.mean_passage_ratio,
            r.mean_band_width()
        )
        .map_err(|e| LabError::io(&eval_path, e))?;
        if !spec.quiet {
            eprintln!(
                "step {step:>6}  held-out score {:.4}  token ratio {:.4}  band width {:.4}",
                r.mean_score,
                r.mean_token_ratio,
                r.mean_band_width()
            );
        }
        final_eval = Some(r);
        Ok(())
    };

    while trainer.state.step < total {
        let m = trainer.step(train_set, environ::reborrow(&mut oracle))?;
        metrics.push(&m)?;
        if every > 0 && m.step % every == 0 && m.step < total {
            evaluate_now(&trainer, environ::reborrow(&mut oracle))?;
        }
    }
    metrics.finish()?;
    evaluate_now(&trainer, environ::reborrow(&mut oracle))?;
    evals.flush().map_err(|e| LabError::io(&eval_path, e))?;
    let checkpoint = checkpoint_path(dir);
    Checkpoint::from_trainer(&trainer).save(&checkpoint)?;
    Ok(TrainSummary { trainer, checkpoint, final_eval })
}
