//! Scoring and metrics: cosine scores, EER, AUC, accuracy and macro F-score.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::audio::LogMelSpectrogram;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::SpeakerNet;
use crate::tensor::Real;

/// Cosine similarity, accumulated in double precision.
pub fn cosine_score<T: Real>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("cosine_score", &[a.len()], &[b.len()]));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x.to_f64().unwrap_or(f64::NAN), y.to_f64().unwrap_or(f64::NAN));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine score of a zero vector".into()));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrialPair {
    pub enroll_id: String,
    pub test_id: String,
    pub target: bool,
}

/// One ROC operating point: accept iff `score >= threshold`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

fn check_classes(scores: &[(f64, bool)]) -> Result<(usize, usize)> {
    let n_t = scores.iter().filter(|s| s.1).count();
    let n_n = scores.len() - n_t;
    if n_t == 0 || n_n == 0 {
        return Err(Error::Usage(format!(
            "need at least one target and one non-target trial, got {n_t} and {n_n}"
        )));
    }
    if scores.iter().any(|s| s.0.is_nan()) {
        return Err(Error::Degenerate("NaN score".into()));
    }
    Ok((n_t, n_n))
}

/// ROC points for every distinct score, from the strictest threshold down,
/// preceded by the reject-all point at `+∞`.
pub fn roc(scores: &[(f64, bool)]) -> Result<Vec<RocPoint>> {
    let (n_t, n_n) = check_classes(scores)?;
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        far: 0.0,
        frr: 1.0,
    }];
    let (mut acc_t, mut acc_n) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == t {
            if sorted[i].1 {
                acc_t += 1;
            } else {
                acc_n += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: t,
            far: acc_n as f64 / n_n as f64,
            frr: (n_t - acc_t) as f64 / n_t as f64,
        });
    }
    Ok(points)
}

/// Equal error rate and the threshold where it occurs. Between two ROC
/// points that bracket `FAR = FRR` both rates and the threshold are
/// interpolated linearly.
pub fn eer(scores: &[(f64, bool)]) -> Result<(f64, f64)> {
    let points = roc(scores)?;
    let d = |p: &RocPoint| p.frr - p.far;
    let k = points
        .iter()
        .position(|p| d(p) <= 0.0)
        .expect("the accept-all point has FRR 0 and FAR 1");
    let cur = points[k];
    if d(&cur) == 0.0 {
        return Ok((cur.far, cur.threshold));
    }
    let prev = points[k - 1];
    let alpha = d(&prev) / (d(&prev) - d(&cur));
    let rate = prev.far + alpha * (cur.far - prev.far);
    let threshold = if prev.threshold.is_finite() {
        prev.threshold + alpha * (cur.threshold - prev.threshold)
    } else {
        cur.threshold
    };
    Ok((rate, threshold))
}

/// Area under the (FAR, TPR) curve by the trapezoid rule; tied scores
/// contribute half, as in the Mann–Whitney statistic.
pub fn auc(scores: &[(f64, bool)]) -> Result<f64> {
    let points = roc(scores)?;
    let area = points
        .windows(2)
        .map(|w| {
            let (x0, y0) = (w[0].far, 1.0 - w[0].frr);
            let (x1, y1) = (w[1].far, 1.0 - w[1].frr);
            (x1 - x0) * (y0 + y1) / 2.0
        })
        .sum::<f64>();
    Ok(area.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl ClassificationMetrics {
    /// Recall of each class; `NaN` for a class absent from the labels.
    pub fn recalls(&self) -> Vec<f64> {
        self.confusion
            .iter()
            .enumerate()
            .map(|(c, row)| row[c] as f64 / row.iter().sum::<usize>() as f64)
            .collect()
    }
}

pub fn classification_metrics(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<ClassificationMetrics> {
    if preds.len() != labels.len() {
        return Err(Error::Usage(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Usage("no predictions".into()));
    }
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        let bad = p.max(l);
        if bad >= n_classes {
            return Err(Error::Index {
                index: bad,
                len: n_classes,
            });
        }
        confusion[l][p] += 1;
    }
    let correct: usize = (0..n_classes).map(|c| confusion[c][c]).sum();
    let f1: f64 = (0..n_classes)
        .map(|c| {
            let tp = confusion[c][c] as f64;
            let predicted: usize = confusion.iter().map(|row| row[c]).sum();
            let actual: usize = confusion[c].iter().sum();
            let precision = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
            let recall = if actual > 0 { tp / actual as f64 } else { 0.0 };
            if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            }
        })
        .sum();
    Ok(ClassificationMetrics {
        accuracy: correct as f64 / preds.len() as f64,
        macro_f1: f1 / n_classes as f64,
        confusion,
    })
}

/// Metrics for one evaluation. Verification reports carry EER, AUC and the
/// 2×2 decision counts at the EER threshold (rows: non-target, target;
/// columns: rejected, accepted). Classification reports carry accuracy,
/// macro F-score and the class confusion matrix, plus AUC for two classes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub eer: Option<f64>,
    pub threshold_at_eer: Option<f64>,
    pub auc: Option<f64>,
    pub accuracy: Option<f64>,
    pub f_score: Option<f64>,
    pub confusion: Vec<Vec<usize>>,
}

impl MetricsReport {
    pub fn verification(scores: &[(f64, bool)]) -> Result<Self> {
        let (rate, threshold) = eer(scores)?;
        let mut confusion = vec![vec![0; 2]; 2];
        for &(s, target) in scores {
            confusion[target as usize][(s >= threshold) as usize] += 1;
        }
        Ok(MetricsReport {
            eer: Some(rate),
            threshold_at_eer: Some(threshold),
            auc: Some(auc(scores)?),
            confusion,
            ..Default::default()
        })
    }

    pub fn classification(m: &ClassificationMetrics) -> Self {
        MetricsReport {
            accuracy: Some(m.accuracy),
            f_score: Some(m.macro_f1),
            confusion: m.confusion.clone(),
            ..Default::default()
        }
    }

    fn fields(&self) -> Vec<(&'static str, f64)> {
        [
            ("eer", self.eer),
            ("threshold_at_eer", self.threshold_at_eer),
            ("auc", self.auc),
            ("accuracy", self.accuracy),
            ("f_score", self.f_score),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k, v)))
        .collect()
    }

    fn confusion_rows(&self) -> Vec<String> {
        self.confusion
            .iter()
            .map(|row| row.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" "))
            .collect()
    }

    /// Machine-readable `key=value` lines.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.fields() {
            writeln!(out, "{k}={v:.6}").unwrap();
        }
        writeln!(out, "count={}", self.confusion.iter().flatten().sum::<usize>()).unwrap();
        for (i, row) in self.confusion_rows().iter().enumerate() {
            writeln!(out, "confusion.{i}={row}").unwrap();
        }
        out
    }

    /// Human-readable summary.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.fields() {
            let v = match k {
                "threshold_at_eer" => format!("{v:.6}"),
                _ => format!("{:.2}%", 100.0 * v),
            };
            writeln!(out, "{:<18}{v}", k.replace('_', " ")).unwrap();
        }
        writeln!(out, "confusion:").unwrap();
        for row in self.confusion_rows() {
            writeln!(out, "  {row}").unwrap();
        }
        out
    }

    pub fn write(&self, kv_path: &Path, text_path: Option<&Path>) -> Result<()> {
        write_atomic(kv_path, self.to_kv().as_bytes())?;
        if let Some(p) = text_path {
            write_atomic(p, self.to_text().as_bytes())?;
        }
        Ok(())
    }
}

fn parse_lines(path: &Path) -> Result<Vec<(usize, Vec<String>)>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| (i + 1, l.split_whitespace().map(String::from).collect()))
        .collect())
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

/// Reads `<0|1> <enroll_id> <test_id>` lines.
pub fn read_trials(path: &Path) -> Result<Vec<TrialPair>> {
    parse_lines(path)?
        .into_iter()
        .map(|(line, f)| {
            if f.len() != 3 {
                return Err(parse_err(path, line, format!("expected 3 fields, got {}", f.len())));
            }
            let target = match f[0].as_str() {
                "1" => true,
                "0" => false,
                other => return Err(parse_err(path, line, format!("label must be 0 or 1, got '{other}'"))),
            };
            Ok(TrialPair {
                enroll_id: f[1].clone(),
                test_id: f[2].clone(),
                target,
            })
        })
        .collect()
}

pub fn write_trials(path: &Path, trials: &[TrialPair]) -> Result<()> {
    let mut out = String::new();
    for t in trials {
        writeln!(out, "{} {} {}", t.target as u8, t.enroll_id, t.test_id).unwrap();
    }
    write_atomic(path, out.as_bytes())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreLine {
    pub enroll_id: String,
    pub test_id: String,
    pub score: f64,
}

/// Writes `<enroll_id> <test_id> <score>` lines; scores use the shortest
/// representation that round-trips.
pub fn write_scores(path: &Path, scores: &[ScoreLine]) -> Result<()> {
    let mut out = String::new();
    for s in scores {
        writeln!(out, "{} {} {}", s.enroll_id, s.test_id, s.score).unwrap();
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreLine>> {
    parse_lines(path)?
        .into_iter()
        .map(|(line, f)| {
            if f.len() != 3 {
                return Err(parse_err(path, line, format!("expected 3 fields, got {}", f.len())));
            }
            let score = f[2]
                .parse::<f64>()
                .map_err(|_| parse_err(path, line, format!("invalid score '{}'", f[2])))?;
            Ok(ScoreLine {
                enroll_id: f[0].clone(),
                test_id: f[1].clone(),
                score,
            })
        })
        .collect()
}

/// Pairs each trial with its score, matching on `(enroll_id, test_id)`.
pub fn join_scores(trials: &[TrialPair], scores: &[ScoreLine]) -> Result<Vec<(f64, bool)>> {
    let by_pair: HashMap<(&str, &str), f64> = scores
        .iter()
        .map(|s| ((s.enroll_id.as_str(), s.test_id.as_str()), s.score))
        .collect();
    trials
        .iter()
        .map(|t| {
            by_pair
                .get(&(t.enroll_id.as_str(), t.test_id.as_str()))
                .map(|&s| (s, t.target))
                .ok_or_else(|| Error::Data(format!("no score for trial {} {}", t.enroll_id, t.test_id)))
        })
        .collect()
}

/// One line of a predictions file: `<id> <label> <pred> <p_0> … <p_{C-1}>`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub label: usize,
    pub predicted: usize,
    pub probs: Vec<f64>,
}

pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    let mut out = String::new();
    for p in preds {
        write!(out, "{} {} {}", p.id, p.label, p.predicted).unwrap();
        for q in &p.probs {
            write!(out, " {q}").unwrap();
        }
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    parse_lines(path)?
        .into_iter()
        .map(|(line, f)| {
            if f.len() < 5 {
                return Err(parse_err(path, line, "expected id, label, prediction and class probabilities"));
            }
            let int = |s: &str| s.parse::<usize>().map_err(|_| parse_err(path, line, format!("invalid class '{s}'")));
            let probs = f[3..]
                .iter()
                .map(|s| s.parse::<f64>().map_err(|_| parse_err(path, line, format!("invalid probability '{s}'"))))
                .collect::<Result<Vec<_>>>()?;
            Ok(Prediction {
                id: f[0].clone(),
                label: int(&f[1])?,
                predicted: int(&f[2])?,
                probs,
            })
        })
        .collect()
}

/// Classification report from predictions; AUC is added for two classes,
/// scoring each sample by its class-1 probability.
pub fn evaluate_predictions(preds: &[Prediction]) -> Result<MetricsReport> {
    let n_classes = preds.first().map(|p| p.probs.len()).unwrap_or(0);
    if preds.iter().any(|p| p.probs.len() != n_classes) {
        return Err(Error::Data("predictions disagree on the number of classes".into()));
    }
    let labels: Vec<usize> = preds.iter().map(|p| p.label).collect();
    let predicted: Vec<usize> = preds.iter().map(|p| p.predicted).collect();
    let mut report = MetricsReport::classification(&classification_metrics(&predicted, &labels, n_classes)?);
    if n_classes == 2 {
        let scores: Vec<(f64, bool)> = preds.iter().map(|p| (p.probs[1], p.label == 1)).collect();
        if check_classes(&scores).is_ok() {
            report.auc = Some(auc(&scores)?);
        }
    }
    Ok(report)
}

/// Scores every trial, computing each utterance's embedding once.
/// Returns the scores in trial order and the number of embeddings computed.
pub fn score_trials<F>(trials: &[TrialPair], mut embed: F) -> Result<(Vec<f64>, usize)>
where
    F: FnMut(&str) -> Result<Vec<f64>>,
{
    let mut cache: HashMap<String, Vec<f64>> = HashMap::new();
    let mut scores = Vec::with_capacity(trials.len());
    for t in trials {
        for id in [&t.enroll_id, &t.test_id] {
            if !cache.contains_key(id) {
                cache.insert(id.clone(), embed(id)?);
            }
        }
        scores.push(cosine_score(&cache[&t.enroll_id], &cache[&t.test_id])?);
    }
    Ok((scores, cache.len()))
}

#[derive(Debug, Clone)]
pub struct VerificationOutcome {
    pub report: MetricsReport,
    pub scores: Vec<f64>,
    pub extractions: usize,
}

/// Full-utterance embeddings from an eval-mode network, cosine-scored over
/// the trial list.
pub fn evaluate_verification<T: Real>(
    net: &SpeakerNet<T>,
    trials: &[TrialPair],
    utterances: &BTreeMap<String, LogMelSpectrogram>,
) -> Result<VerificationOutcome> {
    let (scores, extractions) = score_trials(trials, |id| {
        let spec = utterances
            .get(id)
            .ok_or_else(|| Error::Data(format!("unknown utterance id '{id}'")))?;
        Ok(net
            .extract_embedding(spec)?
            .iter()
            .map(|v| v.to_f64().unwrap_or(f64::NAN))
            .collect())
    })?;
    let labelled: Vec<(f64, bool)> = scores.iter().zip(trials).map(|(&s, t)| (s, t.target)).collect();
    Ok(VerificationOutcome {
        report: MetricsReport::verification(&labelled)?,
        scores,
        extractions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labelled(targets: &[f64], non: &[f64]) -> Vec<(f64, bool)> {
        targets
            .iter()
            .map(|&s| (s, true))
            .chain(non.iter().map(|&s| (s, false)))
            .collect()
    }

    #[test]
    fn cosine_cases() {
        let a = [1.0f64, 2.0, -3.0];
        assert!((cosine_score(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_score(&[1.0f64, 0.0], &[0.0, 5.0]).unwrap(), 0.0);
        let b: Vec<f64> = a.iter().map(|v| 2.0 * v).collect();
        assert!((cosine_score(&a, &b).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(cosine_score(&a, &[0.0; 3]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn eer_hand_cases() {
        assert_eq!(eer(&labelled(&[0.9, 0.8], &[0.2, 0.1])).unwrap().0, 0.0);
        assert_eq!(eer(&labelled(&[0.9, 0.4], &[0.8, 0.1])).unwrap().0, 0.5);
        assert_eq!(eer(&labelled(&[0.2, 0.1], &[0.9, 0.8])).unwrap().0, 1.0);
        assert!(matches!(eer(&labelled(&[0.3], &[])), Err(Error::Usage(_))));
    }

    #[test]
    fn auc_hand_cases() {
        assert_eq!(auc(&labelled(&[0.9, 0.8], &[0.2, 0.1])).unwrap(), 1.0);
        assert_eq!(auc(&labelled(&[0.5, 0.5], &[0.5, 0.5, 0.5])).unwrap(), 0.5);
    }

    #[test]
    fn classification_hand_case() {
        let m = classification_metrics(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(m.accuracy, 0.5);
        assert!((m.macro_f1 - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.confusion, vec![vec![2, 0], vec![2, 0]]);
        assert!(classification_metrics(&[0], &[0, 1], 2).is_err());
    }

    #[test]
    fn verification_report_counts_every_trial() {
        let s = labelled(&[0.9, 0.4, 0.7], &[0.8, 0.1]);
        let r = MetricsReport::verification(&s).unwrap();
        assert_eq!(r.confusion.iter().flatten().sum::<usize>(), 5);
        assert!(r.to_kv().contains("eer="));
    }

    #[test]
    fn cache_computes_each_embedding_once() {
        let t = |e: &str, x: &str| TrialPair {
            enroll_id: e.into(),
            test_id: x.into(),
            target: false,
        };
        let trials = vec![t("a", "b"), t("a", "c"), t("b", "c"), t("a", "b")];
        let mut calls = 0;
        let (scores, n) = score_trials(&trials, |id| {
            calls += 1;
            Ok(vec![1.0, id.len() as f64 + id.as_bytes()[0] as f64])
        })
        .unwrap();
        assert_eq!((n, calls, scores.len()), (3, 3, 4));
    }
}
