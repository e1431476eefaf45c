use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::Dataset;
use crate::rng::{derive_stream, StreamPurpose};

/// Simulated logistic-regression data. Rows are generated one at a time,
/// so a smaller `n` with the same seed yields a prefix of a larger one.
pub fn simulate_logistic_dataset(n: usize, d: usize, seed: u64, theta_true: Option<&[f64]>) -> Result<(Dataset, Vec<f64>)> {
    if n == 0 || d == 0 {
        return Err(Error::InvalidDataset("simulation needs N >= 1 and d >= 1".into()));
    }
    let mut theta_rng = derive_stream(seed, 0, StreamPurpose::Data);
    let theta: Vec<f64> = match theta_true {
        Some(t) if t.len() == d => t.to_vec(),
        Some(t) => return Err(Error::InvalidParameter(format!("theta_true has length {}, expected {d}", t.len()))),
        None => (0..d).map(|_| theta_rng.sample(StandardNormal)).collect(),
    };
    let mut rng = derive_stream(seed, 1, StreamPurpose::Data);
    let mut x = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let mut s = 0.0;
        for &t in &theta {
            let v: f64 = rng.sample(StandardNormal);
            s += v * t;
            x.push(v);
        }
        let prob = 1.0 / (1.0 + (-s).exp());
        y.push(if rng.random::<f64>() < prob { 1.0 } else { 0.0 });
    }
    Ok((Dataset::from_row_major(n, d, x, y)?, theta))
}

#[derive(Debug, Clone)]
pub struct LibsvmData {
    pub dataset: Dataset,
    pub n_rows: usize,
    pub max_feature_index: usize,
    /// Distinct raw labels seen, sorted.
    pub raw_labels: Vec<i64>,
}

/// Parses libsvm text. Labels are mapped to {0, 1}: files containing a `2`
/// follow the {1, 2} convention (1 -> 0), files containing `-1` the
/// {-1, +1} convention; {0, 1} is kept as is.
pub fn parse_libsvm_str(text: &str) -> Result<LibsvmData> {
    let mut rows: Vec<(Vec<(usize, f64)>, i64)> = Vec::new();
    let mut max_index = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut parts = content.split_whitespace();
        let label_tok = parts.next().expect("non-empty line has a token");
        let label_f: f64 = label_tok
            .parse()
            .map_err(|_| Error::Parse { line: line_no, message: format!("bad label {label_tok:?}") })?;
        if label_f.fract() != 0.0 {
            return Err(Error::Parse { line: line_no, message: format!("non-integer label {label_tok:?}") });
        }
        let label = label_f as i64;
        let mut feats = Vec::new();
        let mut last = 0usize;
        for tok in parts {
            let (idx, val) = tok
                .split_once(':')
                .ok_or_else(|| Error::Parse { line: line_no, message: format!("expected index:value, got {tok:?}") })?;
            let idx: usize = idx
                .parse()
                .map_err(|_| Error::Parse { line: line_no, message: format!("bad feature index {idx:?}") })?;
            if idx == 0 {
                return Err(Error::Parse { line: line_no, message: "feature indices are 1-based".into() });
            }
            if idx <= last {
                return Err(Error::Parse { line: line_no, message: format!("feature index {idx} not increasing") });
            }
            last = idx;
            let val: f64 = val
                .parse()
                .map_err(|_| Error::Parse { line: line_no, message: format!("bad feature value {val:?}") })?;
            if !val.is_finite() {
                return Err(Error::Parse { line: line_no, message: "non-finite feature value".into() });
            }
            max_index = max_index.max(idx);
            feats.push((idx, val));
        }
        rows.push((feats, label));
    }
    if rows.is_empty() {
        return Err(Error::InvalidDataset("libsvm input has no data rows".into()));
    }
    if max_index == 0 {
        return Err(Error::InvalidDataset("libsvm input has no features".into()));
    }
    let labels: BTreeSet<i64> = rows.iter().map(|r| r.1).collect();
    let map: fn(i64) -> Option<f64> = if labels.contains(&2) {
        |l| match l {
            1 => Some(0.0),
            2 => Some(1.0),
            _ => None,
        }
    } else if labels.contains(&-1) {
        |l| match l {
            -1 => Some(0.0),
            1 => Some(1.0),
            _ => None,
        }
    } else {
        |l| match l {
            0 => Some(0.0),
            1 => Some(1.0),
            _ => None,
        }
    };
    let d = max_index;
    let mut x = vec![0.0; rows.len() * d];
    let mut y = Vec::with_capacity(rows.len());
    for (r, (feats, label)) in rows.iter().enumerate() {
        let mapped = map(*label).ok_or_else(|| Error::InvalidDataset(format!("label set {labels:?} is not binary")))?;
        y.push(mapped);
        for &(idx, val) in feats {
            x[r * d + idx - 1] = val;
        }
    }
    let n_rows = rows.len();
    Ok(LibsvmData {
        dataset: Dataset::from_row_major(n_rows, d, x, y)?,
        n_rows,
        max_feature_index: max_index,
        raw_labels: labels.into_iter().collect(),
    })
}

pub fn parse_libsvm(path: &Path) -> Result<LibsvmData> {
    parse_libsvm_str(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_line() {
        let p = parse_libsvm_str("1 1:0.5 3:1.0\n").unwrap();
        assert_eq!(p.dataset.row(0), &[0.5, 0.0, 1.0]);
        assert_eq!(p.dataset.response(0), 1.0);
        assert_eq!(p.max_feature_index, 3);
    }

    #[test]
    fn covertype_labels_and_blank_lines() {
        let p = parse_libsvm_str("2 1:1\n1 2:3\n\n   \n").unwrap();
        assert_eq!(p.n_rows, 2);
        assert_eq!(p.dataset.responses(), &[1.0, 0.0]);
        let q = parse_libsvm_str("-1 1:1\n+1 1:2\n").unwrap();
        assert_eq!(q.dataset.responses(), &[0.0, 1.0]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        match parse_libsvm_str("1 1:0.5\n0 2-1.0\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_libsvm_str("\n\n"), Err(Error::InvalidDataset(_))));
        assert!(parse_libsvm_str("3 1:1\n1 1:2\n2 1:0\n").is_err());
    }

    #[test]
    fn simulation_is_deterministic_and_prefix_stable() {
        let (a, ta) = simulate_logistic_dataset(50, 2, 9, None).unwrap();
        let (b, tb) = simulate_logistic_dataset(50, 2, 9, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let (c, _) = simulate_logistic_dataset(20, 2, 9, None).unwrap();
        assert_eq!(a.prefix(20).unwrap(), c);
    }

    #[test]
    fn zero_theta_gives_fair_coin() {
        let n = 20_000;
        let (ds, _) = simulate_logistic_dataset(n, 2, 4, Some(&[0.0, 0.0])).unwrap();
        let mean = ds.responses().iter().sum::<f64>() / n as f64;
        let sd = (0.25 / n as f64).sqrt();
        assert!((mean - 0.5).abs() < 3.0 * sd, "{mean}");
    }
}
