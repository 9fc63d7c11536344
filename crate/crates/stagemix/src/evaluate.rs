//! Evaluation metrics over predictive draws and observed data: RMSE for
//! the counts, AUC with bootstrap intervals for the binaries, and
//! population prevalence intervals for joint events.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::data::Dataset;
use crate::math::quantile;
use crate::predict::{
    joint_event_probability, safe_and_successful, PredictError, PredictiveDraws,
};
use crate::rng::{substream, StreamLabel};

/// Bootstrap resamples behind an AUC interval.
pub const AUC_BOOTSTRAP_RESAMPLES: usize = 2000;

#[derive(Debug, Error)]
pub enum EvaluateError {
    #[error("empty input")]
    Empty,
    #[error("prediction/observation lengths differ: {predictions} vs {observed}")]
    LengthMismatch { predictions: usize, observed: usize },
    #[error("AUC needs both classes present")]
    SingleClass,
    #[error(transparent)]
    Predict(#[from] PredictError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Root mean squared error.
pub fn rmse(point_predictions: &[f64], observed: &[f64]) -> Result<f64, EvaluateError> {
    if point_predictions.is_empty() {
        return Err(EvaluateError::Empty);
    }
    if point_predictions.len() != observed.len() {
        return Err(EvaluateError::LengthMismatch {
            predictions: point_predictions.len(),
            observed: observed.len(),
        });
    }
    let mse = point_predictions
        .iter()
        .zip(observed)
        .map(|(p, o)| (p - o) * (p - o))
        .sum::<f64>()
        / point_predictions.len() as f64;
    Ok(mse.sqrt())
}

/// Concordance probability with ties counted one half (Mann-Whitney
/// form), computed by rank summation in O(n log n).
fn auc_point(scores: &[f64], labels: &[bool]) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("NaN score"));
    // midranks over tied score groups
    let mut ranks = vec![0.0f64; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = midrank;
        }
        i = j + 1;
    }
    let n_pos = labels.iter().filter(|&&l| l).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    let rank_sum: f64 = labels
        .iter()
        .zip(&ranks)
        .filter(|(l, _)| **l)
        .map(|(_, r)| r)
        .sum();
    (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg)
}

/// AUC with a 95% stratified percentile-bootstrap interval (2000
/// resamples, positives and negatives resampled separately).
pub fn auc(scores: &[f64], labels: &[bool], seed: u64) -> Result<(f64, f64, f64), EvaluateError> {
    if scores.is_empty() {
        return Err(EvaluateError::Empty);
    }
    if scores.len() != labels.len() {
        return Err(EvaluateError::LengthMismatch {
            predictions: scores.len(),
            observed: labels.len(),
        });
    }
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, l)| **l)
        .map(|(s, _)| *s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, l)| !**l)
        .map(|(s, _)| *s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(EvaluateError::SingleClass);
    }
    let point = auc_point(scores, labels);

    let mut rng = substream(seed, StreamLabel::Bootstrap, 0);
    let mut resampled = Vec::with_capacity(AUC_BOOTSTRAP_RESAMPLES);
    let mut scores_b = Vec::with_capacity(scores.len());
    let mut labels_b = Vec::with_capacity(scores.len());
    for _ in 0..AUC_BOOTSTRAP_RESAMPLES {
        scores_b.clear();
        labels_b.clear();
        for _ in 0..pos.len() {
            scores_b.push(pos[rng.gen_range(0..pos.len())]);
            labels_b.push(true);
        }
        for _ in 0..neg.len() {
            scores_b.push(neg[rng.gen_range(0..neg.len())]);
            labels_b.push(false);
        }
        resampled.push(auc_point(&scores_b, &labels_b));
    }
    let lo = quantile(&resampled, 0.025);
    let hi = quantile(&resampled, 0.975);
    Ok((point, lo.min(point), hi.max(point)))
}

/// Median and 95% interval of a per-draw population proportion.
pub fn prevalence_interval(proportion_per_draw: &[f64]) -> Result<(f64, f64, f64), EvaluateError> {
    if proportion_per_draw.is_empty() {
        return Err(EvaluateError::Empty);
    }
    Ok((
        quantile(proportion_per_draw, 0.5),
        quantile(proportion_per_draw, 0.025),
        quantile(proportion_per_draw, 0.975),
    ))
}

/// One metric row of the evaluation report.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub outcome: String,
    pub metric: String,
    pub value: f64,
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    pub n: usize,
    pub method: String,
}

/// Full evaluation report.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

/// Compute the metric suite: RMSE for oocyte and embryo counts
/// (predictive means as point predictions), AUC for DET and LBE over the
/// cycles where they are observed (predictive event probabilities as
/// scores), and the safe-and-successful prevalence interval with the
/// realized training proportion alongside.
pub fn evaluate_predictions(
    draws: &PredictiveDraws,
    observed: &Dataset,
    seed: u64,
) -> Result<MetricReport, EvaluateError> {
    assert_eq!(
        draws.n_patients,
        observed.n_cycles(),
        "draws and observations must align by patient"
    );
    let mut rows = Vec::new();
    let n_draws = draws.n_draws as f64;

    // RMSE on counts, per cycle started
    let mut pred_oocytes = Vec::with_capacity(draws.n_patients);
    let mut obs_oocytes = Vec::with_capacity(draws.n_patients);
    let mut pred_embryos = Vec::with_capacity(draws.n_patients);
    let mut obs_embryos = Vec::with_capacity(draws.n_patients);
    for (i, c) in observed.cycles().iter().enumerate() {
        let cells = draws.cells_of_patient(i);
        pred_oocytes
            .push(cells.iter().map(|c| f64::from(c.n_oocytes)).sum::<f64>() / n_draws);
        pred_embryos.push(
            cells.iter().map(|c| f64::from(c.embryos_started())).sum::<f64>() / n_draws,
        );
        obs_oocytes.push(f64::from(c.n_oocytes.unwrap_or(0)));
        obs_embryos.push(f64::from(c.n_embryos.unwrap_or(0)));
    }
    rows.push(MetricRow {
        outcome: "n_oocytes".into(),
        metric: "rmse".into(),
        value: rmse(&pred_oocytes, &obs_oocytes)?,
        lo: None,
        hi: None,
        n: pred_oocytes.len(),
        method: "predictive_mean".into(),
    });
    rows.push(MetricRow {
        outcome: "n_embryos".into(),
        metric: "rmse".into(),
        value: rmse(&pred_embryos, &obs_embryos)?,
        lo: None,
        hi: None,
        n: pred_embryos.len(),
        method: "predictive_mean".into(),
    });

    // AUC on the binaries over observed units
    for (name, obs_of, tag) in [
        (
            "det",
            Box::new(|c: &crate::data::CycleRecord| c.det) as Box<dyn Fn(&crate::data::CycleRecord) -> Option<bool>>,
            1u64,
        ),
        ("lbe", Box::new(|c: &crate::data::CycleRecord| c.lbe), 2u64),
    ] {
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for (i, c) in observed.cycles().iter().enumerate() {
            if let Some(y) = obs_of(c) {
                let cells = draws.cells_of_patient(i);
                let event = if name == "det" {
                    cells.iter().filter(|c| c.det_started()).count()
                } else {
                    cells.iter().filter(|c| c.lbe_started()).count()
                };
                scores.push(event as f64 / n_draws);
                labels.push(y);
            }
        }
        let (point, lo, hi) = auc(&scores, &labels, crate::rng::derive_seed(seed, tag))?;
        rows.push(MetricRow {
            outcome: name.into(),
            metric: "auc".into(),
            value: point,
            lo: Some(lo),
            hi: Some(hi),
            n: scores.len(),
            method: "stratified_bootstrap_2000".into(),
        });
    }

    // safe-and-successful prevalence with the realized proportion
    let est = joint_event_probability(draws, safe_and_successful)?;
    rows.push(MetricRow {
        outcome: "safe_and_successful".into(),
        metric: "prevalence".into(),
        value: est.median,
        lo: Some(est.lo),
        hi: Some(est.hi),
        n: draws.n_patients,
        method: "posterior_predictive".into(),
    });
    let realized = observed
        .cycles()
        .iter()
        .filter(|c| c.n_oocytes.unwrap_or(0) < 15 && c.lbe == Some(true))
        .count() as f64
        / observed.n_cycles() as f64;
    rows.push(MetricRow {
        outcome: "safe_and_successful".into(),
        metric: "realized_proportion".into(),
        value: realized,
        lo: None,
        hi: None,
        n: observed.n_cycles(),
        method: "training_data".into(),
    });

    Ok(MetricReport { rows })
}

pub fn write_metrics_csv(report: &MetricReport, path: impl AsRef<Path>) -> Result<(), EvaluateError> {
    let path = path.as_ref();
    let io = |source| EvaluateError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    (|| -> std::io::Result<()> {
        writeln!(out, "outcome,metric,value,lo,hi,n,method")?;
        for r in &report.rows {
            let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x:.16e}")).unwrap_or_default();
            writeln!(
                out,
                "{},{},{:.16e},{},{},{},{}",
                r.outcome,
                r.metric,
                r.value,
                fmt_opt(r.lo),
                fmt_opt(r.hi),
                r.n,
                r.method
            )?;
        }
        out.flush()
    })()
    .map_err(io)?;
    Ok(())
}
