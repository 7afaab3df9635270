//! Match, Accuracy, BLEU-4 and ROUGE-L, plus coordinate extraction.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::ops::Range;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{Point, QaKind, Scene};

/// A predicted point counts for a ground-truth point when strictly closer
/// than this many pixels.
pub const MATCH_RADIUS: f64 = 16.0;
pub const BLEU_EPSILON: f64 = 1e-9;
pub const ROUGE_BETA: f64 = 1.2;

fn coord_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"\(\s*(-?\d+(?:\.\d+)?)\s*,\s*(-?\d+(?:\.\d+)?)\s*\)").expect("static pattern")
    })
}

/// Every "(x,y)" occurrence with its byte span, in order of appearance.
pub fn find_coords(text: &str) -> Vec<(Range<usize>, Point)> {
    coord_regex()
        .captures_iter(text)
        .filter_map(|c| {
            let x = c[1].parse::<f64>().ok()?;
            let y = c[2].parse::<f64>().ok()?;
            Some((c.get(0).expect("group 0").range(), Point::new(x, y)))
        })
        .collect()
}

pub fn extract_coords(text: &str) -> Vec<Point> {
    find_coords(text).into_iter().map(|(_, p)| p).collect()
}

/// Fraction of ground-truth points that have some prediction within the
/// match radius. `None` when there is no ground truth to score.
pub fn match_score(pred: &[Point], gt: &[Point]) -> Option<f64> {
    if gt.is_empty() {
        return None;
    }
    let hits = gt
        .iter()
        .filter(|g| pred.iter().any(|p| p.dist(g) < MATCH_RADIUS))
        .count();
    Some(hits as f64 / gt.len() as f64)
}

/// Lowercases and drops punctuation and whitespace.
pub fn normalize_answer(s: &str) -> String {
    s.chars()
        .filter(|c| !c.is_whitespace() && !c.is_ascii_punctuation())
        .flat_map(char::to_lowercase)
        .collect()
}

pub fn accuracy<S: AsRef<str>, G: AsRef<str>>(preds: &[S], gts: &[G]) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::LengthMismatch(preds.len(), gts.len()));
    }
    if preds.is_empty() {
        return Ok(0.0);
    }
    let hits = preds
        .iter()
        .zip(gts)
        .filter(|(p, g)| normalize_answer(p.as_ref()) == normalize_answer(g.as_ref()))
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

fn ngram_counts<'a>(tokens: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and hypothesis n-gram total for n = 1..4.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BleuStats {
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn collect(pred: &str, refs: &[&str]) -> Self {
        let hyp: Vec<&str> = pred.split_whitespace().collect();
        let refs: Vec<Vec<&str>> = refs
            .iter()
            .map(|r| r.split_whitespace().collect())
            .collect();
        let mut stats = BleuStats {
            hyp_len: hyp.len(),
            ..Default::default()
        };
        for n in 1..=4 {
            let hyp_counts = ngram_counts(&hyp, n);
            let mut max_ref: HashMap<&[&str], usize> = HashMap::new();
            for r in &refs {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            let clipped: usize = hyp_counts
                .iter()
                .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
                .sum();
            stats.matches[n - 1] = clipped;
            // floored per sentence, so a short hypothesis still counts once
            // toward the corpus denominators
            stats.totals[n - 1] = hyp_counts.values().sum::<usize>().max(1);
        }
        // closest reference length, shorter wins ties
        stats.ref_len = refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| ((l as i64 - hyp.len() as i64).abs(), l))
            .unwrap_or(0);
        stats
    }

    pub fn add(&mut self, other: &BleuStats) {
        for n in 0..4 {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }

    /// Brevity-penalized geometric mean of the four precisions; a zero
    /// match count is replaced by `BLEU_EPSILON` before dividing.
    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 || self.matches[0] == 0 {
            return 0.0;
        }
        let log_p: f64 = (0..4)
            .map(|n| {
                let denom = self.totals[n] as f64;
                let num = if self.matches[n] == 0 {
                    BLEU_EPSILON
                } else {
                    self.matches[n] as f64
                };
                0.25 * (num / denom).ln()
            })
            .sum();
        let (c, r) = (self.hyp_len as f64, self.ref_len as f64);
        let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
        (bp * log_p.exp()).clamp(0.0, 1.0)
    }
}

/// Sentence-level BLEU-4 over whitespace tokens.
pub fn bleu4(pred: &str, refs: &[&str]) -> f64 {
    BleuStats::collect(pred, refs).score()
}

/// Corpus-level BLEU-4: n-gram statistics are summed before scoring.
pub fn corpus_bleu4(pairs: &[(&str, &[&str])]) -> f64 {
    let mut total = BleuStats::default();
    for (p, r) in pairs {
        total.add(&BleuStats::collect(p, r));
    }
    total.score()
}

fn lcs_len(a: &[&str], b: &[&str]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure with recall weighted by `ROUGE_BETA`.
pub fn rouge_l(pred: &str, reference: &str) -> f64 {
    let p: Vec<&str> = pred.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    if p.is_empty() || r.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(&p, &r) as f64;
    let prec = lcs / p.len() as f64;
    let rec = lcs / r.len() as f64;
    if prec == 0.0 || rec == 0.0 {
        return 0.0;
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    ((1.0 + b2) * prec * rec / (rec + b2 * prec)).clamp(0.0, 1.0)
}

/// One generated answer, joined to the dataset by `(scene_id, question)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub scene_id: String,
    pub question: String,
    pub text: String,
    #[serde(default)]
    pub referenced_indices: Vec<usize>,
    #[serde(default)]
    pub resolved_coords: Vec<Point>,
    #[serde(default)]
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub scene_id: String,
    pub question: String,
    pub qa_kind: QaKind,
    pub match_score: Option<f64>,
    pub correct: Option<bool>,
    pub bleu4: f64,
    pub rouge_l: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SampleCounts {
    pub evaluated: usize,
    pub match_samples: usize,
    pub accuracy_samples: usize,
    /// Coordinate records without ground-truth points.
    pub skipped: usize,
    pub empty_predictions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub match_score: f64,
    pub accuracy: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub counts: SampleCounts,
    pub per_sample: Vec<SampleScore>,
}

/// Scores generated answers against the dataset. Yes/no and multiple-choice
/// records feed Accuracy, coordinate records feed Match, all feed BLEU-4
/// (corpus level) and ROUGE-L (mean).
pub fn evaluate_run(results: &[GenerationRecord], scenes: &[Scene]) -> Result<MetricReport> {
    let mut index = HashMap::new();
    for scene in scenes {
        for qa in &scene.qa {
            index
                .entry((scene.scene_id.as_str(), qa.question.as_str()))
                .or_insert(qa);
        }
    }
    let unjoined: Vec<String> = results
        .iter()
        .filter(|r| !index.contains_key(&(r.scene_id.as_str(), r.question.as_str())))
        .map(|r| format!("{}: {}", r.scene_id, r.question))
        .collect();
    if !unjoined.is_empty() {
        return Err(Error::Unjoined(unjoined));
    }

    let mut counts = SampleCounts::default();
    let mut per_sample = Vec::with_capacity(results.len());
    let mut bleu_total = BleuStats::default();
    let (mut match_sum, mut rouge_sum) = (0.0, 0.0);
    let (mut acc_preds, mut acc_gts) = (Vec::new(), Vec::new());
    for r in results {
        let qa = index[&(r.scene_id.as_str(), r.question.as_str())];
        let mut flags = r.flags.clone();
        if r.text.trim().is_empty() {
            counts.empty_predictions += 1;
            flags.push("empty_prediction".into());
        }
        let stats = BleuStats::collect(&r.text, &[&qa.answer]);
        bleu_total.add(&stats);
        let rouge = rouge_l(&r.text, &qa.answer);
        rouge_sum += rouge;
        let mut sample = SampleScore {
            scene_id: r.scene_id.clone(),
            question: r.question.clone(),
            qa_kind: qa.qa_kind,
            match_score: None,
            correct: None,
            bleu4: stats.score(),
            rouge_l: rouge,
            flags,
        };
        match qa.qa_kind {
            QaKind::YesNo | QaKind::MultiChoice => {
                sample.correct = Some(normalize_answer(&r.text) == normalize_answer(&qa.answer));
                acc_preds.push(r.text.as_str());
                acc_gts.push(qa.answer.as_str());
            }
            QaKind::Coordinate => match match_score(&extract_coords(&r.text), &qa.answer_coords) {
                Some(m) => {
                    sample.match_score = Some(m);
                    match_sum += m;
                    counts.match_samples += 1;
                }
                None => counts.skipped += 1,
            },
            QaKind::Open => {}
        }
        counts.evaluated += 1;
        per_sample.push(sample);
    }
    counts.accuracy_samples = acc_preds.len();
    let mean = |sum: f64, n: usize| if n == 0 { 0.0 } else { sum / n as f64 };
    Ok(MetricReport {
        match_score: mean(match_sum, counts.match_samples),
        accuracy: accuracy(&acc_preds, &acc_gts)?,
        bleu4: if results.is_empty() {
            0.0
        } else {
            bleu_total.score()
        },
        rouge_l: mean(rouge_sum, results.len()),
        counts,
        per_sample,
    })
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub const TABLE_COLUMNS: [&str; 4] = ["Match", "Accuracy", "BLEU-4", "ROUGE_L"];

/// Fixed-width table, one row per labelled report, scores in percent.
pub fn format_table(rows: &[(String, &MetricReport)]) -> String {
    let label_w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(7);
    let mut out = format!("{:<label_w$}", "Variant");
    for c in TABLE_COLUMNS {
        let _ = write!(out, " | {c:>8}");
    }
    out.push('\n');
    out.push_str(&"-".repeat(label_w + TABLE_COLUMNS.len() * 11));
    out.push('\n');
    for (label, r) in rows {
        let _ = writeln!(
            out,
            "{label:<label_w$} | {:>8.2} | {:>8.2} | {:>8.2} | {:>8.2}",
            100.0 * r.match_score,
            100.0 * r.accuracy,
            100.0 * r.bleu4,
            100.0 * r.rouge_l
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coordinate_parsing() {
        assert_eq!(
            extract_coords("object at (100.0,50.0)"),
            vec![Point::new(100.0, 50.0)]
        );
        assert!(extract_coords("no coordinates").is_empty());
        assert_eq!(
            extract_coords("(1,2) then ( 3.5 , 4 )"),
            vec![Point::new(1.0, 2.0), Point::new(3.5, 4.0)]
        );
        assert!(extract_coords("(1,) (,2) (a,b)").is_empty());
    }

    #[test]
    fn match_fixtures() {
        let gt = [Point::new(100.0, 100.0)];
        assert_eq!(match_score(&[Point::new(110.0, 110.0)], &gt), Some(1.0));
        assert_eq!(match_score(&[Point::new(100.0, 117.0)], &gt), Some(0.0));
        assert_eq!(match_score(&[Point::new(100.0, 116.0)], &gt), Some(0.0));
        assert_eq!(match_score(&[], &[]), None);
        let two = [Point::new(0.0, 0.0), Point::new(200.0, 0.0)];
        assert_eq!(match_score(&[Point::new(5.0, 0.0)], &two), Some(0.5));
        assert_eq!(match_score(&two, &two), Some(1.0));
    }

    #[test]
    fn accuracy_fixtures() {
        assert_eq!(accuracy(&["yes"], &["yes"]).unwrap(), 1.0);
        assert_eq!(accuracy(&["yes"], &["no"]).unwrap(), 0.0);
        assert_eq!(
            accuracy(&["A", "B", "C", "D"], &["A", "B", "C", "A"]).unwrap(),
            0.75
        );
        assert_eq!(accuracy(&[" Yes."], &["yes"]).unwrap(), 1.0);
        assert!(matches!(
            accuracy(&["a"], &["a", "b"]),
            Err(Error::LengthMismatch(1, 2))
        ));
    }

    #[test]
    fn bleu_rouge_extremes() {
        let s = "the quick brown fox jumps over the lazy dog today";
        assert!((bleu4(s, &[s]) - 1.0).abs() < 1e-12);
        assert!((rouge_l(s, s) - 1.0).abs() < 1e-12);
        assert!(bleu4("a b c d", &["e f g h"]) < 1e-6);
        assert_eq!(rouge_l("a b c d", "e f g h"), 0.0);
        assert_eq!(bleu4("", &["a b"]), 0.0);
        assert_eq!(rouge_l("", "a b"), 0.0);
    }

    #[test]
    fn table_has_columns() {
        let r = MetricReport {
            match_score: 0.5,
            accuracy: 1.0,
            bleu4: 0.25,
            rouge_l: 0.75,
            counts: SampleCounts::default(),
            per_sample: vec![],
        };
        let t = format_table(&[("full".into(), &r)]);
        for c in TABLE_COLUMNS {
            assert!(t.contains(c));
        }
        assert!(t.contains("50.00"));
    }
}
