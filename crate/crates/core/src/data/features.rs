//! Plain-text interchange format for per-frame feature sequences.
//!
//! ```text
//! seqcrf-features 1
//! T d
//! labels l_1 … l_T        (or `labels -` when unlabeled)
//! x_11 … x_1d
//! …
//! x_T1 … x_Td
//! ```
//!
//! Values are written in shortest round-trip decimal form, so reading back
//! reproduces the same `f64`s.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::crf::{LabelSequence, LabelSet, ObservationSequence};
use crate::error::{Error, Result};

const MAGIC: &str = "seqcrf-features 1";
pub const FEATURE_EXTENSION: &str = "feat";

pub fn format_feature_sequence(obs: &ObservationSequence, labels: Option<&LabelSequence>) -> Result<String> {
    let mut out = format!("{MAGIC}\n{} {}\nlabels", obs.len(), obs.dim());
    match labels {
        Some(l) if l.len() != obs.len() => {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for {} frames",
                l.len(),
                obs.len()
            )))
        }
        Some(l) => l.0.iter().for_each(|y| write!(out, " {y}").expect("string write")),
        None => out.push_str(" -"),
    }
    out.push('\n');
    for row in obs.rows() {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        out.push_str(&cells.join(" "));
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_feature_sequence(text: &str) -> Result<(ObservationSequence, Option<LabelSequence>)> {
    let bad = |m: String| Error::parse("feature sequence", m);
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    if lines.next().map(str::trim) != Some(MAGIC) {
        return Err(bad(format!("missing `{MAGIC}` header")));
    }
    let dims: Vec<usize> = lines
        .next()
        .ok_or_else(|| bad("missing dimensions".into()))?
        .split_whitespace()
        .map(|v| v.parse().map_err(|e| bad(format!("dimension `{v}`: {e}"))))
        .collect::<Result<_>>()?;
    let [t, d] = dims[..] else {
        return Err(bad("dimension line must hold T and d".into()));
    };
    let label_line = lines.next().ok_or_else(|| bad("missing labels line".into()))?;
    let mut tokens = label_line.split_whitespace();
    if tokens.next() != Some("labels") {
        return Err(bad("labels line must start with `labels`".into()));
    }
    let rest: Vec<&str> = tokens.collect();
    let labels = if rest == ["-"] {
        None
    } else {
        let l: Vec<usize> = rest
            .iter()
            .map(|v| v.parse().map_err(|e| bad(format!("label `{v}`: {e}"))))
            .collect::<Result<_>>()?;
        if l.len() != t {
            return Err(bad(format!("{} labels for T = {t}", l.len())));
        }
        Some(LabelSequence(l))
    };
    let mut data = Vec::with_capacity(t * d);
    for (i, line) in lines.enumerate() {
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|v| v.parse().map_err(|e| bad(format!("value `{v}`: {e}"))))
            .collect::<Result<_>>()?;
        if row.len() != d {
            return Err(bad(format!("row {i} has {} values, expected {d}", row.len())));
        }
        data.extend(row);
    }
    if data.len() != t * d {
        return Err(bad(format!("found {} rows, expected {t}", data.len() / d.max(1))));
    }
    Ok((ObservationSequence::new(t, d, data)?, labels))
}

pub fn write_feature_sequence(path: &Path, obs: &ObservationSequence, labels: Option<&LabelSequence>) -> Result<()> {
    fs::write(path, format_feature_sequence(obs, labels)?).map_err(|e| Error::io(path, e))
}

pub fn read_feature_sequence(path: &Path) -> Result<(ObservationSequence, Option<LabelSequence>)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_feature_sequence(&text).map_err(|e| e.in_stage(path.display().to_string()))
}

/// Labeled feature sequences of a directory: every `*.feat` file in name
/// order, with label names from `labels.txt` (one per line) when present
/// and `0 … K−1` otherwise.
pub fn read_feature_dir(dir: &Path) -> Result<(LabelSet, Vec<(ObservationSequence, LabelSequence)>)> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == FEATURE_EXTENSION))
        .collect();
    files.sort();
    let mut items = Vec::with_capacity(files.len());
    for f in &files {
        let (obs, labels) = read_feature_sequence(f)?;
        let labels = labels.ok_or_else(|| Error::parse("feature sequence", format!("{} is unlabeled", f.display())))?;
        items.push((obs, labels));
    }
    if items.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let names_path = dir.join("labels.txt");
    let label_set = if names_path.exists() {
        let text = fs::read_to_string(&names_path).map_err(|e| Error::io(&names_path, e))?;
        LabelSet::new(text.lines().map(str::trim).filter(|l| !l.is_empty()))?
    } else {
        let max = items.iter().flat_map(|(_, l)| l.0.iter().copied()).max().unwrap_or(0);
        LabelSet::new((0..=max.max(1)).map(|i| i.to_string()))?
    };
    for (i, (_, l)) in items.iter().enumerate() {
        l.validate(label_set.len())
            .map_err(|e| e.in_stage(files[i].display().to_string()))?;
    }
    Ok((label_set, items))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let obs = ObservationSequence::new(2, 3, vec![0.1, -1e-300, 3.0, f64::MAX, 1.0 / 3.0, -0.0]).unwrap();
        let labels = LabelSequence(vec![1, 0]);
        let text = format_feature_sequence(&obs, Some(&labels)).unwrap();
        let (o, l) = parse_feature_sequence(&text).unwrap();
        assert_eq!(o, obs);
        assert_eq!(l, Some(labels));
        let (_, l) = parse_feature_sequence(&format_feature_sequence(&obs, None).unwrap()).unwrap();
        assert_eq!(l, None);
    }

    #[test]
    fn malformed_inputs() {
        assert!(parse_feature_sequence("nope").is_err());
        assert!(parse_feature_sequence("seqcrf-features 1\n2 1\nlabels 0 1\n0.5\n").is_err());
        assert!(parse_feature_sequence("seqcrf-features 1\n1 2\nlabels 0\n0.5\n").is_err());
        assert!(parse_feature_sequence("seqcrf-features 1\n1 1\nlabels 0\nx\n").is_err());
    }
}
