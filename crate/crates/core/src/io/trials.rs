//! Trial lists and score files.
//!
//! Trial format, one per line: `label enroll_id[,enroll_id...] test_id`
//! with label `1` (target), `0` (non-target) or `-` (unlabeled), fields
//! whitespace-separated, multi-enrollment ids comma-separated.
//!
//! Score format, one per line: `enroll_key test_id score` where
//! `enroll_key` is the comma-joined enrollment ids and the score carries 9
//! significant digits.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::format_sig9;
use crate::types::{Trial, TrialLabel, TrialList};

/// Parse a trial list, preserving order. Blank lines are skipped.
pub fn parse_trials(path: &Path) -> Result<TrialList> {
    let text = fs::read_to_string(path)?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut trials = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(parse_err(
                lineno,
                format!("expected 'label enroll test', got {} field(s)", fields.len()),
            ));
        }
        let label = match fields[0] {
            "1" => TrialLabel::Target,
            "0" => TrialLabel::NonTarget,
            "-" => TrialLabel::Unlabeled,
            other => {
                return Err(parse_err(
                    lineno,
                    format!("unknown label token '{other}' (expected 1, 0 or -)"),
                ))
            }
        };
        let enroll_ids: Vec<String> = fields[1].split(',').map(str::to_string).collect();
        if enroll_ids.iter().any(|id| id.is_empty()) {
            return Err(parse_err(lineno, "empty enrollment id".into()));
        }
        let trial = Trial::new(enroll_ids, fields[2], label)
            .map_err(|e| parse_err(lineno, e.to_string()))?;
        trials.push(trial);
    }
    Ok(trials)
}

/// Write a trial list in the parseable format.
pub fn write_trials(path: &Path, trials: &TrialList) -> Result<()> {
    let mut out = String::new();
    for t in trials {
        let label = match t.label {
            TrialLabel::Target => "1",
            TrialLabel::NonTarget => "0",
            TrialLabel::Unlabeled => "-",
        };
        out.push_str(&format!("{label} {} {}\n", t.enroll_key(), t.test_id));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Write scores aligned with their trials.
pub fn write_scores(path: &Path, trials: &TrialList, scores: &[f64]) -> Result<()> {
    if trials.len() != scores.len() {
        return Err(Error::Misaligned(format!(
            "{} trials vs {} scores",
            trials.len(),
            scores.len()
        )));
    }
    let mut out = String::new();
    for (t, s) in trials.iter().zip(scores) {
        out.push_str(&format!(
            "{} {} {}\n",
            t.enroll_key(),
            t.test_id,
            format_sig9(*s)
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read a score file back as `(enroll_key, test_id, score)` rows.
pub fn read_scores(path: &Path) -> Result<Vec<(String, String, f64)>> {
    let text = fs::read_to_string(path)?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(parse_err(
                lineno,
                format!("expected 'enroll test score', got {} field(s)", fields.len()),
            ));
        }
        let score: f64 = fields[2]
            .parse()
            .map_err(|e| parse_err(lineno, format!("score '{}': {e}", fields[2])))?;
        rows.push((fields[0].to_string(), fields[1].to_string(), score));
    }
    Ok(rows)
}
