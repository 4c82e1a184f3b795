//! Accuracy, average precision, per-source evaluation and result tables.

use std::collections::BTreeMap;

use crate::classifier::{Detector, ImageSet};
use crate::error::{Error, Result};
use crate::io::manifest::DatasetManifest;

pub const THRESHOLD: f64 = 0.5;

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::config(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::UndefinedMetric("no samples to score".into()));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {i}")));
    }
    Ok(())
}

/// Fraction of samples where `score >= threshold` agrees with `label == 1`.
pub fn accuracy(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    check_inputs(scores, labels)?;
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &y)| (s >= threshold) == (y == 1))
        .count();
    Ok(hits as f64 / scores.len() as f64)
}

/// Step-interpolated area under the precision-recall curve.
///
/// Samples are ranked by descending score; equal scores keep their input
/// order. Each positive at rank `k` contributes `precision@k / positives`.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let positives = labels.iter().filter(|&&y| y == 1).count();
    if positives == 0 {
        return Err(Error::UndefinedMetric("average precision needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            tp += 1;
            sum += tp as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SourceScore {
    pub acc: f64,
    pub ap: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub per_source: BTreeMap<String, SourceScore>,
    /// Reported, but left out of the means unless `include_train` was set.
    pub train_source: Option<String>,
    pub mean_acc: f64,
    pub mean_ap: f64,
}

impl EvalResult {
    pub fn new(
        per_source: BTreeMap<String, SourceScore>,
        train_source: Option<String>,
        include_train: bool,
    ) -> Result<Self> {
        let counted: Vec<&SourceScore> = per_source
            .iter()
            .filter(|(id, _)| include_train || Some(id.as_str()) != train_source.as_deref())
            .map(|(_, s)| s)
            .collect();
        if counted.is_empty() {
            return Err(Error::UndefinedMetric("no sources left to average".into()));
        }
        let k = counted.len() as f64;
        Ok(EvalResult {
            mean_acc: counted.iter().map(|s| s.acc).sum::<f64>() / k,
            mean_ap: counted.iter().map(|s| s.ap).sum::<f64>() / k,
            per_source,
            train_source,
        })
    }

    /// `method  source  n  acc  ap`, one row per source then the mean.
    pub fn to_tsv_rows(&self, method: &str) -> String {
        let mut s = String::new();
        for (id, r) in &self.per_source {
            s.push_str(&format!("{method}\t{id}\t{}\t{:.6}\t{:.6}\n", r.n, r.acc, r.ap));
        }
        let n: usize = self
            .per_source
            .iter()
            .filter(|(id, _)| Some(id.as_str()) != self.train_source.as_deref())
            .map(|(_, r)| r.n)
            .sum();
        s.push_str(&format!("{method}\tmean\t{n}\t{:.6}\t{:.6}\n", self.mean_acc, self.mean_ap));
        s
    }
}

pub const TSV_HEADER: &str = "method\tsource\tn\tacc\tap\n";

pub fn results_tsv(results: &[(String, EvalResult)]) -> String {
    let mut s = String::from(TSV_HEADER);
    for (name, r) in results {
        s.push_str(&r.to_tsv_rows(name));
    }
    s
}

/// Splits a manifest into one decoded image set per source.
pub fn load_sources(manifest: &DatasetManifest) -> Result<BTreeMap<String, ImageSet>> {
    manifest
        .sources()
        .into_iter()
        .map(|id| Ok((id.clone(), ImageSet::load(&manifest.filter_source(&id))?)))
        .collect()
}

pub fn evaluate(
    detector: &Detector,
    sources: &BTreeMap<String, ImageSet>,
    train_source: Option<&str>,
    include_train: bool,
) -> Result<EvalResult> {
    let mut per_source = BTreeMap::new();
    for (id, images) in sources {
        let scores = detector.predict_images(images)?;
        per_source.insert(
            id.clone(),
            SourceScore {
                acc: accuracy(&scores, &images.labels, THRESHOLD)?,
                ap: average_precision(&scores, &images.labels)?,
                n: images.len(),
            },
        );
    }
    EvalResult::new(per_source, train_source.map(str::to_string), include_train)
}

fn pct(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

/// Aligned text table: the training source's column group first, then
/// unseen sources, then the means. Percentages to one decimal.
pub fn render_table(results: &[(String, EvalResult)]) -> String {
    let train: Vec<String> = {
        let mut t: Vec<String> = results.iter().filter_map(|(_, r)| r.train_source.clone()).collect();
        t.sort();
        t.dedup();
        t
    };
    let mut unseen: Vec<String> = results
        .iter()
        .flat_map(|(_, r)| r.per_source.keys().cloned())
        .filter(|id| !train.contains(id))
        .collect();
    unseen.sort();
    unseen.dedup();

    let mut header = vec!["Method".to_string()];
    let groups: Vec<&[String]> = vec![&train, &unseen];
    for group in &groups {
        for id in group.iter() {
            header.push(format!("{id} Acc"));
            header.push(format!("{id} AP"));
        }
    }
    header.push("Mean Acc".into());
    header.push("Mean AP".into());

    let mut rows = vec![header];
    for (name, r) in results {
        let mut row = vec![name.clone()];
        for group in &groups {
            for id in group.iter() {
                match r.per_source.get(id) {
                    Some(s) => {
                        row.push(pct(s.acc));
                        row.push(pct(s.ap));
                    }
                    None => row.extend(["-".to_string(), "-".to_string()]),
                }
            }
        }
        row.push(pct(r.mean_acc));
        row.push(pct(r.mean_ap));
        rows.push(row);
    }

    let cols = rows[0].len();
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    // Column index after which a group separator goes.
    let breaks = [1 + 2 * train.len(), 1 + 2 * (train.len() + unseen.len())];
    let mut out = String::new();
    for row in &rows {
        let mut line = String::new();
        for (c, cell) in row.iter().enumerate() {
            if c > 0 {
                line.push_str(if breaks.contains(&c) && !(c == breaks[0] && train.is_empty()) { " | " } else { "  " });
            }
            if c == 0 {
                line.push_str(&format!("{cell:<w$}", w = widths[c]));
            } else {
                line.push_str(&format!("{cell:>w$}", w = widths[c]));
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}
