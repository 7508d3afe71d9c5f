//! OCR-oriented evaluation metrics: containment accuracy, ANLS, entity F1,
//! relaxed numeric accuracy, text-spotting Trans/Pos scores, and a
//! language-model cross-entropy on toy logits.
//!
//! Every text metric normalizes through the same pipeline
//! ([`normalize_text`]), so containment, equality, and word matching agree
//! on what counts as the same string.

use crate::error::{Error, Result};
use crate::grounding::{GroundedSpan, Location, NormalizedBox};
use crate::tensor::Tensor;

/// One prediction scored against its reference answers.
#[derive(Debug, Clone)]
pub struct EvalRecord {
    pub prediction: String,
    /// Non-empty; a record is correct when any ground truth matches.
    pub ground_truths: Vec<String>,
    /// Route this record through the numeric branch of relaxed accuracy.
    pub numeric: bool,
}

impl EvalRecord {
    pub fn new(prediction: impl Into<String>, ground_truths: Vec<String>) -> Result<Self> {
        if ground_truths.is_empty() {
            return Err(Error::Record("record has no ground truths".into()));
        }
        Ok(Self {
            prediction: prediction.into(),
            ground_truths,
            numeric: false,
        })
    }

    pub fn numeric(mut self) -> Self {
        self.numeric = true;
        self
    }
}

/// Strips leading and trailing ASCII punctuation from one word.
pub fn normalize_word(word: &str) -> String {
    word.trim_matches(|c: char| c.is_ascii_punctuation())
        .to_lowercase()
}

/// Shared normalization: lowercase, collapse whitespace runs to single
/// spaces, strip punctuation surrounding each word.
pub fn normalize_text(s: &str) -> String {
    s.split_whitespace()
        .map(normalize_word)
        .filter(|w| !w.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Fraction of records whose normalized prediction contains any normalized
/// ground truth as a substring. Empty input scores 0.
pub fn contains_accuracy(records: &[EvalRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let correct = records
        .iter()
        .filter(|r| {
            let pred = normalize_text(&r.prediction);
            r.ground_truths
                .iter()
                .any(|gt| pred.contains(&normalize_text(gt)))
        })
        .count();
    correct as f64 / records.len() as f64
}

/// Levenshtein distance over Unicode scalar values.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Normalized Levenshtein similarity of two already-normalized strings:
/// `1 − dist/max(len)`, with two empty strings counting as identical.
fn nls(a: &str, b: &str) -> f64 {
    let max_len = a.chars().count().max(b.chars().count());
    if max_len == 0 {
        return 1.0;
    }
    1.0 - edit_distance(a, b) as f64 / max_len as f64
}

/// Average Normalized Levenshtein Similarity with the 0.5 floor: per
/// record, the best NLS over ground truths, zeroed when below 0.5, then
/// averaged. Empty input scores 0.
pub fn anls(records: &[EvalRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let total: f64 = records
        .iter()
        .map(|r| {
            let pred = normalize_text(&r.prediction);
            let best = r
                .ground_truths
                .iter()
                .map(|gt| nls(&pred, &normalize_text(gt)))
                .fold(0.0, f64::max);
            if best >= 0.5 {
                best
            } else {
                0.0
            }
        })
        .sum();
    total / records.len() as f64
}

/// Entity-level precision/recall/F1 over normalized `(key, value)` pairs
/// with multiset matching. Both sides empty is a perfect score; one side
/// empty is zero.
pub fn entity_f1(
    predicted: &[(String, String)],
    ground_truth: &[(String, String)],
) -> (f64, f64, f64) {
    if predicted.is_empty() && ground_truth.is_empty() {
        return (1.0, 1.0, 1.0);
    }
    if predicted.is_empty() || ground_truth.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let canon = |pairs: &[(String, String)]| {
        let mut counts: std::collections::HashMap<(String, String), usize> =
            std::collections::HashMap::new();
        for (k, v) in pairs {
            *counts
                .entry((normalize_text(k), normalize_text(v)))
                .or_default() += 1;
        }
        counts
    };
    let pred = canon(predicted);
    let gt = canon(ground_truth);
    let matched: usize = pred
        .iter()
        .map(|(pair, &n)| n.min(gt.get(pair).copied().unwrap_or(0)))
        .sum();
    let precision = matched as f64 / predicted.len() as f64;
    let recall = matched as f64 / ground_truth.len() as f64;
    let f1 = if matched == 0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

fn parse_number(s: &str) -> Option<f64> {
    normalize_text(s).parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Fraction of records correct under relaxed matching: numeric records
/// allow 5% relative error (`|pred − gt| ≤ 0.05·|gt|`, inclusive); anything
/// else requires exact normalized equality. An unparseable prediction
/// against a numeric ground truth is simply incorrect.
pub fn relaxed_accuracy(records: &[EvalRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let correct = records
        .iter()
        .filter(|r| {
            r.ground_truths.iter().any(|gt| {
                if r.numeric {
                    match (parse_number(&r.prediction), parse_number(gt)) {
                        (Some(p), Some(g)) => (p - g).abs() <= 0.05 * g.abs(),
                        // Numeric flag but a non-numeric ground truth:
                        // fall back to exact matching.
                        (_, None) => normalize_text(&r.prediction) == normalize_text(gt),
                        (None, Some(_)) => false,
                    }
                } else {
                    normalize_text(&r.prediction) == normalize_text(gt)
                }
            })
        })
        .count();
    correct as f64 / records.len() as f64
}

/// One ground-truth word of a spotting instance with its location.
#[derive(Debug, Clone)]
pub struct GtWord {
    pub word: String,
    pub bbox: NormalizedBox,
}

/// A spotting prediction (plain transcription or grounded markup) plus the
/// ground-truth words it is scored against.
#[derive(Debug, Clone)]
pub struct SpottingInstance {
    pub predicted_text: String,
    pub gt_words: Vec<GtWord>,
}

impl SpottingInstance {
    /// Transcription-only score. If `predicted_text` is grounded markup,
    /// the span texts are extracted first so both modes see the same words.
    pub fn trans(&self) -> Result<f64> {
        let text = if self.predicted_text.contains("<ref>") {
            let spans = crate::grounding::parse_grounded(&self.predicted_text)?;
            spans
                .iter()
                .map(|s| s.text.as_str())
                .collect::<Vec<_>>()
                .join(" ")
        } else {
            self.predicted_text.clone()
        };
        spotting_trans(&text, &self.gt_words)
    }

    /// Position-aware score; requires grounded markup.
    pub fn pos(&self) -> Result<f64> {
        let spans = crate::grounding::parse_grounded(&self.predicted_text)?;
        spotting_pos(&spans, &self.gt_words)
    }
}

/// Fraction of ground-truth words found in the transcription, with each
/// predicted word occurrence consumed at most once.
pub fn spotting_trans(predicted_text: &str, gt_words: &[GtWord]) -> Result<f64> {
    if gt_words.is_empty() {
        return Err(Error::InvalidParameter(
            "spotting needs at least one ground-truth word".into(),
        ));
    }
    let mut available: std::collections::HashMap<String, usize> =
        std::collections::HashMap::new();
    for w in predicted_text.split_whitespace() {
        let n = normalize_word(w);
        if !n.is_empty() {
            *available.entry(n).or_default() += 1;
        }
    }
    let mut matched = 0usize;
    for gt in gt_words {
        if let Some(count) = available.get_mut(&normalize_word(&gt.word)) {
            if *count > 0 {
                *count -= 1;
                matched += 1;
            }
        }
    }
    Ok(matched as f64 / gt_words.len() as f64)
}

/// Axis-aligned box a span grounds to: rects directly, polygons by their
/// bounding box, points as degenerate boxes (which can never reach the IoU
/// gate), text-only spans not at all.
fn span_box(span: &GroundedSpan) -> Option<NormalizedBox> {
    match &span.location {
        None => None,
        Some(Location::Rect(b)) => Some(*b),
        Some(Location::Point(x, y)) => NormalizedBox::new(*x, *y, *x, *y).ok(),
        Some(Location::Polygon(points)) => {
            let x1 = points.iter().map(|p| p.0).min()?;
            let y1 = points.iter().map(|p| p.1).min()?;
            let x2 = points.iter().map(|p| p.0).max()?;
            let y2 = points.iter().map(|p| p.1).max()?;
            NormalizedBox::new(x1, y1, x2, y2).ok()
        }
    }
}

/// Intersection-over-union of two normalized boxes; degenerate pairs with
/// no union area score 0.
pub fn iou(a: &NormalizedBox, b: &NormalizedBox) -> f64 {
    let ix = (a.x2.min(b.x2) as f64 - a.x1.max(b.x1) as f64).max(0.0);
    let iy = (a.y2.min(b.y2) as f64 - a.y1.max(b.y1) as f64).max(0.0);
    let inter = ix * iy;
    let area = |r: &NormalizedBox| (r.x2 - r.x1) as f64 * (r.y2 - r.y1) as f64;
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Position-aware spotting: a ground-truth word matches when some
/// still-unmatched span has equal normalized text and box IoU of at least
/// 0.5. Matching is greedy in document order, one span per word.
pub fn spotting_pos(predicted_spans: &[GroundedSpan], gt_words: &[GtWord]) -> Result<f64> {
    if gt_words.is_empty() {
        return Err(Error::InvalidParameter(
            "spotting needs at least one ground-truth word".into(),
        ));
    }
    let mut used = vec![false; predicted_spans.len()];
    let mut matched = 0usize;
    for gt in gt_words {
        let gt_norm = normalize_word(&gt.word);
        for (i, span) in predicted_spans.iter().enumerate() {
            if used[i] {
                continue;
            }
            let Some(bbox) = span_box(span) else { continue };
            if normalize_text(&span.text) == gt_norm && iou(&bbox, &gt.bbox) >= 0.5 {
                used[i] = true;
                matched += 1;
                break;
            }
        }
    }
    Ok(matched as f64 / gt_words.len() as f64)
}

/// Mean cross-entropy of `targets` under row-wise softmax of `logits`
/// (`L×V`): the averaged negative log-likelihood.
pub fn lm_loss(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    if logits.rank() != 2 {
        return Err(Error::InvalidShape {
            shape: logits.shape().to_vec(),
            reason: "lm_loss expects [L, V] logits".into(),
        });
    }
    let (l, v) = (logits.shape()[0], logits.shape()[1]);
    if targets.len() != l {
        return Err(Error::InvalidParameter(format!(
            "{} targets for {l} logit rows",
            targets.len()
        )));
    }
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        if t >= v {
            return Err(Error::InvalidParameter(format!(
                "target {t} out of range for vocabulary {v}"
            )));
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let logsumexp = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        total += logsumexp - row[t];
    }
    Ok(total / l as f64)
}
