//! Overlap metrics and their aggregation across seeds.

use std::fmt;
use std::io::Write;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

fn counts<T: Real>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<(f64, f64, f64)> {
    pred.check_same_shape(truth, "overlap metric")?;
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        let (p, t) = (p > T::lit(0.5), t > T::lit(0.5));
        a += p as usize;
        b += t as usize;
        both += (p && t) as usize;
    }
    Ok((a as f64, b as f64, both as f64))
}

/// `2|A∩B| / (|A| + |B|)`, or 1 when both masks are empty. Values above
/// 0.5 count as foreground.
pub fn dice<T: Real>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<f64> {
    let (a, b, both) = counts(pred, truth)?;
    Ok(if a + b == 0.0 { 1.0 } else { 2.0 * both / (a + b) })
}

/// `|A∩B| / |A∪B|`, or 1 when both masks are empty.
pub fn jaccard<T: Real>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<f64> {
    let (a, b, both) = counts(pred, truth)?;
    let union = a + b - both;
    Ok(if union == 0.0 { 1.0 } else { both / union })
}

/// Mean of the per-sample scores over the leading (batch) axis.
pub fn batch_scores<T: Real>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<(f64, f64)> {
    pred.check_same_shape(truth, "batch_scores")?;
    let n = pred.shape().first().copied().unwrap_or(1);
    let (mut d, mut j) = (0.0, 0.0);
    for i in 0..n {
        let (p, t) = (pred.slice_batch(i, 1)?, truth.slice_batch(i, 1)?);
        d += dice(&p, &t)?;
        j += jaccard(&p, &t)?;
    }
    Ok((d / n as f64, j / n as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub n: usize,
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::invalid("cannot summarize an empty set of values"));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    Ok(Summary { mean, std, n })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRecord {
    pub iter: usize,
    pub split: Split,
    pub dice: f64,
    pub jaccard: f64,
    pub loss_seg: f64,
    pub loss_g: f64,
    pub loss_d: f64,
}

/// Per-metric summary over one record per seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub dice: Summary,
    pub jaccard: Summary,
    pub loss_seg: Summary,
}

pub fn aggregate(records: &[EvalRecord]) -> Result<Aggregate> {
    let pick = |f: fn(&EvalRecord) -> f64| summarize(&records.iter().map(f).collect::<Vec<_>>());
    Ok(Aggregate {
        dice: pick(|r| r.dice)?,
        jaccard: pick(|r| r.jaccard)?,
        loss_seg: pick(|r| r.loss_seg)?,
    })
}

pub const CSV_HEADER: &str = "iter,split,dice,jaccard,loss_seg,loss_g,loss_d";

pub fn csv_row(r: &EvalRecord) -> String {
    format!(
        "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
        r.iter, r.split, r.dice, r.jaccard, r.loss_seg, r.loss_g, r.loss_d
    )
}

pub fn write_csv(mut out: impl Write, records: &[EvalRecord]) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in records {
        writeln!(out, "{}", csv_row(r))?;
    }
    Ok(())
}

/// Parses CSV text produced by [`write_csv`].
pub fn read_csv(text: &str) -> Result<Vec<EvalRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        other => return Err(Error::invalid(format!("unexpected metrics header {other:?}"))),
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let bad = || Error::invalid(format!("malformed metrics row {}: {line:?}", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(bad());
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
            Ok(EvalRecord {
                iter: f[0].trim().parse().map_err(|_| bad())?,
                split: Split::parse(f[1].trim()).ok_or_else(bad)?,
                dice: num(f[2])?,
                jaccard: num(f[3])?,
                loss_seg: num(f[4])?,
                loss_g: num(f[5])?,
                loss_d: num(f[6])?,
            })
        })
        .collect()
}
