//! Line-delimited JSON datasets.
//!
//! Each line is one instance, either with precomputed `scores` or with a
//! `query_vec` and `passage_vecs` from which cosine scores are computed:
//!
//! ```text
//! {"id":"q1","scores":[0.2,0.8],"tokens":[300,500],"gold":[1],"weights":[0,0],
//!  "reward":{"kind":"capacity","capacity":1.0}}
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ldar_core::environ::{cosine_scores, Instance, RewardKind, RewardModel};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Debug, Serialize, Deserialize)]
struct RewardRecord {
    kind: String,
    #[serde(default)]
    capacity: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    overload_limit: Option<usize>,
    #[serde(default)]
    flip_prob: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scores: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    query_vec: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    passage_vecs: Option<Vec<Vec<f64>>>,
    tokens: Vec<u32>,
    gold: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights: Option<Vec<f64>>,
    reward: RewardRecord,
}

fn to_instance(r: Record) -> std::result::Result<Instance, String> {
    let scores = match (r.scores, r.query_vec, r.passage_vecs) {
        (Some(s), None, None) => s,
        (None, Some(q), Some(p)) => cosine_scores(&q, &p).map_err(|e| e.to_string())?,
        (Some(_), _, _) => return Err("give either `scores` or `query_vec`/`passage_vecs`, not both".into()),
        _ => return Err("missing field `scores` (or `query_vec` and `passage_vecs`)".into()),
    };
    let n = scores.len();
    let kind = RewardKind::parse(&r.reward.kind).map_err(|e| e.to_string())?;
    let overload_limit = match (kind, r.reward.overload_limit) {
        (_, Some(l)) => l,
        (RewardKind::CapacityOverload, None) => return Err("capacity_overload reward needs `overload_limit`".into()),
        (_, None) => usize::MAX,
    };
    let inst = Instance {
        id: r.id,
        scores,
        token_counts: r.tokens,
        gold: r.gold,
        distractor_weights: r.weights.unwrap_or_else(|| vec![0.0; n]),
        reward_model: RewardModel { kind, capacity: r.reward.capacity, overload_limit, flip_prob: r.reward.flip_prob },
    };
    inst.validate().map_err(|e| e.to_string())?;
    Ok(inst)
}

/// Parses one record; `line` is only used in error messages.
pub fn parse_line(text: &str, path: &Path, line: usize) -> Result<Instance> {
    let data = |detail: String| LabError::Data { path: path.to_path_buf(), line, detail };
    let record: Record = serde_json::from_str(text).map_err(|e| data(e.to_string()))?;
    to_instance(record).map_err(data)
}

/// Loads every non-blank line. Errors name the one-based line number.
pub fn load_dataset(path: &Path) -> Result<Vec<Instance>> {
    let file = File::open(path).map_err(|e| LabError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| LabError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(&line, path, i + 1)?);
    }
    if out.is_empty() {
        return Err(LabError::Data { path: path.to_path_buf(), line: 0, detail: "dataset holds no instances".into() });
    }
    Ok(out)
}

fn to_record(inst: &Instance) -> Record {
    let m = &inst.reward_model;
    Record {
        id: inst.id.clone(),
        scores: Some(inst.scores.clone()),
        query_vec: None,
        passage_vecs: None,
        tokens: inst.token_counts.clone(),
        gold: inst.gold.clone(),
        weights: Some(inst.distractor_weights.clone()),
        reward: RewardRecord {
            kind: m.kind.as_str().to_string(),
            capacity: m.capacity,
            overload_limit: (m.overload_limit != usize::MAX).then_some(m.overload_limit),
            flip_prob: m.flip_prob,
        },
    }
}

/// Writes the scores form, one instance per line.
pub fn save_dataset(path: &Path, instances: &[Instance]) -> Result<()> {
    let file = File::create(path).map_err(|e| LabError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for inst in instances {
        let line = serde_json::to_string(&to_record(inst)).expect("records serialize");
        writeln!(w, "{line}").map_err(|e| LabError::io(path, e))?;
    }
    w.flush().map_err(|e| LabError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ldar_core::environ::{generate, GeneratorConfig};

    fn write(lines: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        std::fs::write(&p, lines).unwrap();
        (dir, p)
    }

    const MINIMAL: &str = r#"{"id":"q1","scores":[0.2,0.8],"tokens":[300,500],"gold":[1],"reward":{"kind":"capacity","capacity":1.0}}"#;

    #[test]
    fn minimal_line_loads() {
        let (_d, p) = write(MINIMAL);
        let v = load_dataset(&p).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].n(), 2);
        assert_eq!(v[0].distractor_weights, vec![0.0, 0.0]);
    }

    #[test]
    fn missing_gold_names_the_line() {
        let bad = r#"{"id":"q2","scores":[0.2,0.8],"tokens":[300,500],"reward":{"kind":"capacity"}}"#;
        let (_d, p) = write(&format!("{MINIMAL}\n{bad}\n"));
        match load_dataset(&p).unwrap_err() {
            LabError::Data { line, detail, .. } => {
                assert_eq!(line, 2);
                assert!(detail.contains("gold"), "{detail}");
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn out_of_range_and_malformed_lines_are_data_errors() {
        let oob = r#"{"id":"q","scores":[0.2,0.8],"tokens":[1,1],"gold":[2],"reward":{"kind":"capacity"}}"#;
        let (_d, p) = write(oob);
        assert!(matches!(load_dataset(&p), Err(LabError::Data { line: 1, .. })));
        let (_d, p) = write("{not json");
        assert_eq!(load_dataset(&p).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn embeddings_form_uses_cosine_scores() {
        let line = r#"{"id":"e","query_vec":[1,0],"passage_vecs":[[1,1],[0,2]],"tokens":[1,1],"gold":[0],"reward":{"kind":"external"}}"#;
        let (_d, p) = write(line);
        let v = load_dataset(&p).unwrap();
        assert!((v[0].scores[0] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(v[0].scores[1].abs() < 1e-15);
    }

    #[test]
    fn save_load_round_trip() {
        let mut cfg = GeneratorConfig::preset("overload").unwrap();
        cfg.n_instances = 20;
        let data = generate(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        save_dataset(&p, &data).unwrap();
        assert_eq!(load_dataset(&p).unwrap(), data);
    }
}
