//! Ranking and classification metrics. The output type is generic so the
//! same code runs in floating point or exact rational arithmetic.

use std::cmp::Ordering;

use num_traits::{FromPrimitive, Num};

use crate::error::{Error, Result};

fn ratio<O: Num + FromPrimitive>(a: usize, b: usize) -> O {
    let of = |v: usize| O::from_usize(v).expect("count representable in metric type");
    of(a) / of(b)
}

fn check_scores<T: PartialOrd>(scores: &[T]) -> Result<()> {
    if scores.iter().any(|s| s.partial_cmp(s).is_none()) {
        return Err(Error::Numeric("scores contain NaN".into()));
    }
    Ok(())
}

/// `sum_k P@k * delta_recall@k` over the descending score ranking, ties kept
/// in original order. `None` when the class has no positives.
pub fn average_precision<T, O>(scores: &[T], labels: &[bool]) -> Result<Option<O>>
where
    T: PartialOrd,
    O: Num + FromPrimitive,
{
    if scores.len() != labels.len() {
        return Err(Error::config(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    check_scores(scores)?;
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    let mut hits = 0;
    let mut sum = O::zero();
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum = sum + ratio::<O>(hits, rank + 1);
        }
    }
    Ok(Some(sum / O::from_usize(positives).expect("count representable in metric type")))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapResult<O> {
    pub map: O,
    /// `None` for classes without positives; they are left out of the mean.
    pub per_class: Vec<Option<O>>,
}

/// Mean AP over classes with at least one positive. `scores[i][k]` and
/// `labels[i][k]` are sample `i`, class `k`.
pub fn mean_average_precision<T, O>(scores: &[Vec<T>], labels: &[Vec<bool>]) -> Result<MapResult<O>>
where
    T: PartialOrd + Copy,
    O: Num + FromPrimitive + Clone,
{
    if scores.len() != labels.len() {
        return Err(Error::config(format!(
            "{} score rows but {} label rows",
            scores.len(),
            labels.len()
        )));
    }
    let k = scores.first().map_or(0, Vec::len);
    if scores.iter().any(|r| r.len() != k) || labels.iter().any(|r| r.len() != k) {
        return Err(Error::config("score and label rows must all have the same number of classes"));
    }
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let s: Vec<T> = scores.iter().map(|r| r[c]).collect();
        let l: Vec<bool> = labels.iter().map(|r| r[c]).collect();
        per_class.push(average_precision::<T, O>(&s, &l)?);
    }
    let present: Vec<&O> = per_class.iter().flatten().collect();
    if present.is_empty() {
        return Err(Error::config("no positives"));
    }
    let n = present.len();
    let total = present.into_iter().fold(O::zero(), |acc, v| acc + v.clone());
    Ok(MapResult {
        map: total / O::from_usize(n).expect("count representable in metric type"),
        per_class,
    })
}

/// Index of the largest score; the lowest index wins ties.
pub fn argmax<T: PartialOrd>(row: &[T]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in row.iter().enumerate() {
        if best.is_none_or(|b| *v > row[b]) {
            best = Some(i);
        }
    }
    best
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy<T, O>(scores: &[Vec<T>], labels: &[usize]) -> Result<O>
where
    T: PartialOrd,
    O: Num + FromPrimitive,
{
    if scores.is_empty() {
        return Err(Error::config("accuracy of an empty batch"));
    }
    if scores.len() != labels.len() {
        return Err(Error::config(format!(
            "{} score rows but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let mut correct = 0;
    for (row, &l) in scores.iter().zip(labels) {
        check_scores(row)?;
        if argmax(row) == Some(l) {
            correct += 1;
        }
    }
    Ok(ratio(correct, scores.len()))
}

/// Class index of each one-hot row.
pub fn one_hot_labels(labels: &[Vec<bool>]) -> Result<Vec<usize>> {
    labels
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut hot = row.iter().enumerate().filter(|(_, &b)| b).map(|(k, _)| k);
            match (hot.next(), hot.next()) {
                (Some(k), None) => Ok(k),
                _ => Err(Error::config(format!("label row {i} is not one-hot"))),
            }
        })
        .collect()
}
