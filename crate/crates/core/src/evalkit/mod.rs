//! Anomaly scoring, thresholding and detection metrics.
//!
//! The full score of a timestep is `−log p(r_t) · (‖r_t‖² + 1 − cos(x_t, x̂_t))`
//! with `r_t = x_t − x̂_t` and `log p` the flow's evaluation log-likelihood.
//! Models without a flow fall back to the mean squared error per channel.

mod metrics;

pub use metrics::{auc_pr, auc_roc, best_f1, flag, point_adjust, prf1, threshold_by_ratio, Confusion};

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Window;
use crate::error::{Error, Result};
use crate::model::DbrAfModel;
use crate::numkit::{cosine_distance, Graph, Tensor};

/// Per-timestep scores and the factors they were built from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreSeries {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    /// `−log p` of the flow input; 0 when the model has no flow.
    pub neg_log_p: Vec<f64>,
    /// `‖x_t − x̂_t‖²`.
    pub mse: Vec<f64>,
    pub cos_dist: Vec<f64>,
}

impl ScoreSeries {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreOptions {
    /// Min-max scale both factors to `[0, 1]` over the scored set before
    /// multiplying.
    pub standardize_factors: bool,
}

/// `(1/C)·Σ_c (x_c − x̂_c)²`.
pub fn baseline_score(x: &[f64], xhat: &[f64]) -> f64 {
    let s: f64 = x.iter().zip(xhat).map(|(a, b)| (a - b) * (a - b)).sum();
    s / x.len() as f64
}

/// Score of one timestep given its flow log-likelihood.
pub fn combine(neg_log_p: f64, x: &[f64], xhat: &[f64]) -> f64 {
    let err: f64 = x.iter().zip(xhat).map(|(a, b)| (a - b) * (a - b)).sum();
    neg_log_p * (err + cosine_distance(x, xhat))
}

/// Score of a single timestep under `model`'s flow.
pub fn anomaly_score(model: &DbrAfModel, x: &[f64], xhat: &[f64]) -> Result<f64> {
    let flow = model
        .flow
        .as_ref()
        .ok_or_else(|| Error::Config("model has no flow; use baseline_score".into()))?;
    let input: Vec<f64> = if model.layout.flow_on_input {
        x.to_vec()
    } else {
        x.iter().zip(xhat).map(|(a, b)| a - b).collect()
    };
    let lp = flow.log_likelihood(&model.params, &input)?;
    Ok(combine(-lp, x, xhat))
}

/// Reconstructions and scores of consecutive windows, concatenated.
pub fn score_windows(
    model: &DbrAfModel,
    windows: &[Window],
    opts: ScoreOptions,
) -> Result<(ScoreSeries, Vec<Tensor>)> {
    let mut out = ScoreSeries::default();
    let mut recons = Vec::with_capacity(windows.len());
    for w in windows {
        let mut g = Graph::with_params(&model.params);
        let x = g.constant(w.values.clone());
        let rec = model.reconstruct(&mut g, x)?;
        let lp = match &model.flow {
            Some(flow) => {
                let input = if model.layout.flow_on_input { x } else { rec.residual };
                let lp = flow.eval_log_likelihood_rows(&mut g, input)?;
                Some(g.data(lp).to_vec())
            }
            None => None,
        };
        let xv = &w.values;
        let xh = g.value(rec.recon);
        for t in 0..xv.rows() {
            let (a, b) = (xv.row(t), xh.row(t));
            let err: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
            let cos = cosine_distance(a, b);
            out.mse.push(err);
            out.cos_dist.push(cos);
            match &lp {
                Some(lp) => {
                    out.neg_log_p.push(-lp[t]);
                    out.scores.push(-lp[t] * (err + cos));
                }
                None => {
                    out.neg_log_p.push(0.0);
                    out.scores.push(err / a.len() as f64);
                }
            }
        }
        out.labels.extend_from_slice(&w.labels);
        recons.push(xh.clone());
    }
    if opts.standardize_factors && model.flow.is_some() {
        let nlp = min_max(&out.neg_log_p);
        let err: Vec<f64> = out.mse.iter().zip(&out.cos_dist).map(|(a, b)| a + b).collect();
        let err = min_max(&err);
        out.scores = nlp.iter().zip(&err).map(|(a, b)| a * b).collect();
    }
    if let Some(i) = out.scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("anomaly score at timestep {i} is {}", out.scores[i])));
    }
    Ok((out, recons))
}

fn min_max(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        v.iter().map(|x| (x - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; v.len()]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub confusion: Confusion,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Metrics {
    pub fn new(labels: &[u8], preds: &[u8]) -> Self {
        let confusion = Confusion::count(labels, preds);
        let (precision, recall, f1) = confusion.prf1();
        Metrics {
            confusion,
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ratio: f64,
    pub threshold: f64,
    pub points: usize,
    pub positives: usize,
    /// Before point adjustment.
    pub raw: Metrics,
    pub adjusted: Metrics,
    pub auc_roc: Option<f64>,
    pub auc_pr: Option<f64>,
    /// Reasons for any metric left undefined.
    pub notes: Vec<String>,
    pub config_hash: String,
    pub seed: u64,
}

/// Hex SHA-256 of a value's JSON encoding.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Thresholds at ratio `r` (percent), point-adjusts and fills a report.
/// Undefined AUCs are recorded in `notes` instead of failing.
pub fn evaluate_scores(series: &ScoreSeries, r: f64, config_hash: String, seed: u64) -> Result<(EvalReport, Vec<u8>, Vec<u8>)> {
    let threshold = threshold_by_ratio(&series.scores, r)?;
    let raw_pred = flag(&series.scores, threshold);
    let adj_pred = point_adjust(&series.labels, &raw_pred);
    let mut notes = Vec::new();
    let mut keep = |res: Result<f64>| match res {
        Ok(v) => Some(v),
        Err(e) => {
            notes.push(e.to_string());
            None
        }
    };
    let auc_roc = keep(auc_roc(&series.scores, &series.labels));
    let auc_pr = keep(auc_pr(&series.scores, &series.labels));
    let report = EvalReport {
        ratio: r,
        threshold,
        points: series.len(),
        positives: series.labels.iter().filter(|&&l| l == 1).count(),
        raw: Metrics::new(&series.labels, &raw_pred),
        adjusted: Metrics::new(&series.labels, &adj_pred),
        auc_roc,
        auc_pr,
        notes,
        config_hash,
        seed,
    };
    Ok((report, raw_pred, adj_pred))
}

/// Scores the windows in order and evaluates at ratio `r`.
pub fn evaluate(
    model: &DbrAfModel,
    windows: &[Window],
    r: f64,
    opts: ScoreOptions,
    config_hash: String,
    seed: u64,
) -> Result<(EvalReport, ScoreSeries)> {
    let (series, _) = score_windows(model, windows, opts)?;
    let (report, _, _) = evaluate_scores(&series, r, config_hash, seed)?;
    Ok((report, series))
}

/// Writes `index,score,neg_log_p,mse,cos_dist,label,prediction_raw,prediction_adjusted`.
pub fn write_scores(path: impl AsRef<Path>, series: &ScoreSeries, raw: &[u8], adjusted: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "index,score,neg_log_p,mse,cos_dist,label,prediction_raw,prediction_adjusted").map_err(io)?;
    for i in 0..series.len() {
        writeln!(
            w,
            "{i},{},{},{},{},{},{},{}",
            series.scores[i],
            series.neg_log_p[i],
            series.mse[i],
            series.cos_dist[i],
            series.labels[i],
            raw[i],
            adjusted[i]
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}
