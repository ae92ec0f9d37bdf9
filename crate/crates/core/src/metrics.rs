//! Hallucination metrics over structured predictions.
//!
//! - CHAIR_i: hallucinated objects / mentioned objects (distinct objects).
//! - CHAIR_s: sentences mentioning a hallucinated object / all sentences.
//! - POPE: accuracy, precision, recall, F1 with "Yes" as the positive class,
//!   plus the rate of parseable Yes/No answers.
//! - AMBER: `½ (100 − CHAIR + F1)` on the percent scale.
//! - accuracy+: fraction of question pairs with both answers correct.

use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("caption has no sentences")]
    NoSentences,
    #[error("no items to score")]
    Empty,
    #[error("no parseable answers; scores are undefined")]
    NoParseableAnswers,
    #[error("{name} = {value} outside [0, 100]")]
    OutOfRange { name: &'static str, value: f64 },
    #[error("malformed pairing: {0}")]
    Pairing(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MetricError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Warning {
    /// CHAIR_i of a caption without object mentions, reported as 0.
    ZeroMentions,
}

/// Object mentions per sentence and the ground-truth object set.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CaptionEval {
    pub sentences: Vec<BTreeSet<u32>>,
    pub ground_truth: BTreeSet<u32>,
}

impl CaptionEval {
    pub fn new(sentences: Vec<BTreeSet<u32>>, ground_truth: BTreeSet<u32>) -> Self {
        Self { sentences, ground_truth }
    }

    pub fn mentioned(&self) -> BTreeSet<u32> {
        self.sentences.iter().flatten().copied().collect()
    }

    pub fn hallucinated(&self) -> BTreeSet<u32> {
        self.mentioned().difference(&self.ground_truth).copied().collect()
    }

    pub fn hallucinated_sentences(&self) -> usize {
        self.sentences.iter().filter(|s| !s.is_subset(&self.ground_truth)).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Scored {
    pub value: f64,
    pub warning: Option<Warning>,
}

pub fn chair_i(eval: &CaptionEval) -> Scored {
    let mentioned = eval.mentioned();
    if mentioned.is_empty() {
        return Scored { value: 0.0, warning: Some(Warning::ZeroMentions) };
    }
    let bad = mentioned.difference(&eval.ground_truth).count();
    Scored { value: bad as f64 / mentioned.len() as f64, warning: None }
}

pub fn chair_s(eval: &CaptionEval) -> Result<f64> {
    if eval.sentences.is_empty() {
        return Err(MetricError::NoSentences);
    }
    Ok(eval.hallucinated_sentences() as f64 / eval.sentences.len() as f64)
}

/// Corpus-level CHAIR: counts are pooled over captions before dividing.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ChairCorpus {
    pub captions: usize,
    pub mentioned: usize,
    pub hallucinated: usize,
    pub sentences: usize,
    pub hallucinated_sentences: usize,
    pub zero_mention_captions: usize,
}

impl ChairCorpus {
    pub fn add(&mut self, eval: &CaptionEval) {
        let mentioned = eval.mentioned();
        self.captions += 1;
        self.mentioned += mentioned.len();
        self.hallucinated += mentioned.difference(&eval.ground_truth).count();
        self.sentences += eval.sentences.len();
        self.hallucinated_sentences += eval.hallucinated_sentences();
        if mentioned.is_empty() {
            self.zero_mention_captions += 1;
        }
    }

    pub fn from_evals<'a>(evals: impl IntoIterator<Item = &'a CaptionEval>) -> Self {
        let mut c = Self::default();
        evals.into_iter().for_each(|e| c.add(e));
        c
    }

    pub fn chair_i(&self) -> Scored {
        if self.mentioned == 0 {
            Scored { value: 0.0, warning: Some(Warning::ZeroMentions) }
        } else {
            Scored { value: self.hallucinated as f64 / self.mentioned as f64, warning: None }
        }
    }

    pub fn chair_s(&self) -> Result<f64> {
        if self.sentences == 0 {
            return Err(MetricError::NoSentences);
        }
        Ok(self.hallucinated_sentences as f64 / self.sentences as f64)
    }
}

/// Split on the period token; each sentence keeps its distinct object ids.
/// Empty sentences (no tokens at all between periods) are dropped.
pub fn extract_mentions(tokens: &[u32], object_range: std::ops::Range<u32>, period: u32) -> Vec<BTreeSet<u32>> {
    let mut out = Vec::new();
    let mut current: Option<BTreeSet<u32>> = None;
    for &t in tokens {
        if t == period {
            if let Some(s) = current.take() {
                out.push(s);
            }
            continue;
        }
        let sentence = current.get_or_insert_with(BTreeSet::new);
        if object_range.contains(&t) {
            sentence.insert(t - object_range.start);
        }
    }
    if let Some(s) = current {
        out.push(s);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Answer {
    Yes,
    No,
    Unparseable,
}

impl Answer {
    /// Lenient parse of a free-text reply: a leading yes/no word decides.
    pub fn parse(text: &str) -> Self {
        let first = text
            .trim_start()
            .split(|c: char| !c.is_alphanumeric())
            .next()
            .unwrap_or("")
            .to_ascii_lowercase();
        match first.as_str() {
            "yes" => Answer::Yes,
            "no" => Answer::No,
            _ => Answer::Unparseable,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Yes,
    No,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryItem {
    pub predicted: Answer,
    pub label: Label,
    #[serde(default)]
    pub pair_id: Option<String>,
}

impl BinaryItem {
    pub fn correct(&self) -> bool {
        matches!((self.predicted, self.label), (Answer::Yes, Label::Yes) | (Answer::No, Label::No))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BinaryEval {
    pub items: Vec<BinaryItem>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PopeScores {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub answer_rate: f64,
    pub true_positive: usize,
    pub false_positive: usize,
    pub true_negative: usize,
    pub false_negative: usize,
    pub unparseable: usize,
}

/// Accuracy counts unparseable answers as wrong; precision and recall are
/// computed over parseable answers only. A ratio with an empty denominator
/// (no "Yes" predictions, no parseable "Yes" labels) is 0, as is F1 when
/// precision and recall are both 0.
pub fn pope_scores(eval: &BinaryEval) -> Result<PopeScores> {
    if eval.items.is_empty() {
        return Err(MetricError::Empty);
    }
    let (mut tp, mut fp, mut tn, mut fneg, mut unp) = (0, 0, 0, 0, 0);
    for item in &eval.items {
        match (item.predicted, item.label) {
            (Answer::Yes, Label::Yes) => tp += 1,
            (Answer::Yes, Label::No) => fp += 1,
            (Answer::No, Label::No) => tn += 1,
            (Answer::No, Label::Yes) => fneg += 1,
            (Answer::Unparseable, _) => unp += 1,
        }
    }
    let total = eval.items.len();
    if unp == total {
        return Err(MetricError::NoParseableAnswers);
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok(PopeScores {
        accuracy: ratio(tp + tn, total),
        precision,
        recall,
        f1,
        answer_rate: ratio(total - unp, total),
        true_positive: tp,
        false_positive: fp,
        true_negative: tn,
        false_negative: fneg,
        unparseable: unp,
    })
}

/// `½ (100 − chair + f1)`, both inputs on the percent scale.
pub fn amber_score(chair: f64, f1: f64) -> Result<f64> {
    for (name, value) in [("CHAIR", chair), ("F1", f1)] {
        if !(0.0..=100.0).contains(&value) {
            return Err(MetricError::OutOfRange { name, value });
        }
    }
    Ok(0.5 * (100.0 - chair + f1))
}

/// Fraction of pairs whose two items are both correct.
pub fn accuracy_plus(eval: &BinaryEval) -> Result<f64> {
    if eval.items.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut pairs: BTreeMap<&str, Vec<bool>> = BTreeMap::new();
    for (i, item) in eval.items.iter().enumerate() {
        let id = item.pair_id.as_deref().ok_or_else(|| MetricError::Pairing(format!("item {i} has no pair_id")))?;
        pairs.entry(id).or_default().push(item.correct());
    }
    if let Some((id, v)) = pairs.iter().find(|(_, v)| v.len() != 2) {
        return Err(MetricError::Pairing(format!("pair {id:?} has {} items", v.len())));
    }
    let both = pairs.values().filter(|v| v.iter().all(|&c| c)).count();
    Ok(both as f64 / pairs.len() as f64)
}

/// JSON/CSV evaluation report.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub run: String,
    pub metrics: BTreeMap<String, f64>,
    pub counts: BTreeMap<String, usize>,
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn new(run: impl Into<String>) -> Self {
        Self { run: run.into(), ..Default::default() }
    }

    pub fn add_chair(&mut self, corpus: &ChairCorpus) -> Result<()> {
        let ci = corpus.chair_i();
        self.metrics.insert("chair_i".into(), ci.value);
        self.metrics.insert("chair_s".into(), corpus.chair_s()?);
        for (k, v) in [
            ("captions", corpus.captions),
            ("mentioned_objects", corpus.mentioned),
            ("hallucinated_objects", corpus.hallucinated),
            ("sentences", corpus.sentences),
            ("hallucinated_sentences", corpus.hallucinated_sentences),
        ] {
            self.counts.insert(k.into(), v);
        }
        if corpus.zero_mention_captions > 0 {
            self.warnings.push(format!("{} caption(s) mention no objects", corpus.zero_mention_captions));
        }
        if ci.warning.is_some() {
            self.warnings.push("no object mentions in the corpus; chair_i reported as 0".into());
        }
        Ok(())
    }

    pub fn add_pope(&mut self, s: &PopeScores) {
        for (k, v) in [
            ("pope_accuracy", s.accuracy),
            ("pope_precision", s.precision),
            ("pope_recall", s.recall),
            ("pope_f1", s.f1),
            ("answer_rate", s.answer_rate),
        ] {
            self.metrics.insert(k.into(), v);
        }
        for (k, v) in [
            ("true_positive", s.true_positive),
            ("false_positive", s.false_positive),
            ("true_negative", s.true_negative),
            ("false_negative", s.false_negative),
            ("unparseable", s.unparseable),
        ] {
            self.counts.insert(k.into(), v);
        }
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    /// One header row and one value row: `run`, then metrics, then counts,
    /// each in key order.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["run".to_string()];
        header.extend(self.metrics.keys().cloned());
        header.extend(self.counts.keys().cloned());
        w.write_record(&header)?;
        let mut row = vec![self.run.clone()];
        row.extend(self.metrics.values().map(|v| v.to_string()));
        row.extend(self.counts.values().map(|v| v.to_string()));
        w.write_record(&row)?;
        w.flush()?;
        Ok(())
    }
}
