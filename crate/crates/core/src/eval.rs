//! Span decoding, exact-match chunk F1 and attention export.

use std::collections::HashSet;
use std::fmt;

use rayon::prelude::*;

use crate::autodiff::Tape;
use crate::data::{AspectLabel, Corpus, Sentence};
use crate::error::{Error, Result};
use crate::model::{forward, forward_sentence, Mode, ModelConfig, ModelParams};

/// Inclusive token range, 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Span {
    pub begin: usize,
    pub end: usize,
}

impl Span {
    pub fn new(begin: usize, end: usize) -> Span {
        Span { begin, end }
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.begin
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.begin, self.end)
    }
}

/// Spans in a label sequence plus the number of stray `I` labels that were
/// promoted to `B`.
pub fn decode_spans_counted(labels: &[AspectLabel]) -> (Vec<Span>, usize) {
    let mut spans = Vec::new();
    let mut repairs = 0;
    let mut open: Option<usize> = None;
    for (i, &label) in labels.iter().enumerate() {
        let pos = i + 1;
        match label {
            AspectLabel::B => {
                if let Some(begin) = open {
                    spans.push(Span::new(begin, pos - 1));
                }
                open = Some(pos);
            }
            AspectLabel::I => {
                if open.is_none() {
                    repairs += 1;
                    open = Some(pos);
                }
            }
            AspectLabel::O => {
                if let Some(begin) = open.take() {
                    spans.push(Span::new(begin, pos - 1));
                }
            }
        }
    }
    if let Some(begin) = open {
        spans.push(Span::new(begin, labels.len()));
    }
    (spans, repairs)
}

/// Each maximal `B I*` run is one span; an `I` that opens a run counts as `B`.
pub fn decode_spans(labels: &[AspectLabel]) -> Vec<Span> {
    decode_spans_counted(labels).0
}

/// Labels of length `len` for non-overlapping spans.
pub fn encode_spans(spans: &[Span], len: usize) -> Result<Vec<AspectLabel>> {
    let mut labels = vec![AspectLabel::O; len];
    for span in spans {
        if span.begin == 0 || span.begin > span.end || span.end > len {
            return Err(Error::usage(format!(
                "span {span} invalid for length {len}"
            )));
        }
        for (k, slot) in labels[span.begin - 1..span.end].iter_mut().enumerate() {
            if *slot != AspectLabel::O {
                return Err(Error::usage(format!("span {span} overlaps another span")));
            }
            *slot = if k == 0 {
                AspectLabel::B
            } else {
                AspectLabel::I
            };
        }
    }
    Ok(labels)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub predicted: usize,
    pub gold: usize,
    pub correct: usize,
    /// Stray `I` labels repaired while decoding predictions.
    pub repairs: usize,
}

impl EvalReport {
    /// Scores pooled counts; zero denominators give zero.
    pub fn from_counts(predicted: usize, gold: usize, correct: usize) -> EvalReport {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(correct, predicted);
        let recall = ratio(correct, gold);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        EvalReport {
            precision,
            recall,
            f1,
            predicted,
            gold,
            correct,
            repairs: 0,
        }
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "precision recall f1")?;
        writeln!(f, "{:.4} {:.4} {:.4}", self.precision, self.recall, self.f1)?;
        write!(
            f,
            "predicted={} gold={} correct={} repairs={}",
            self.predicted, self.gold, self.correct, self.repairs
        )
    }
}

fn matches(predicted: &[Span], gold: &[Span]) -> usize {
    let gold: HashSet<&Span> = gold.iter().collect();
    let predicted: HashSet<&Span> = predicted.iter().collect();
    predicted.intersection(&gold).count()
}

/// Micro-averaged exact-match chunk scores over sentence-aligned span lists.
pub fn chunk_f1(predicted: &[Vec<Span>], gold: &[Vec<Span>]) -> Result<EvalReport> {
    if predicted.len() != gold.len() {
        return Err(Error::usage(format!(
            "{} predicted sentences but {} gold sentences",
            predicted.len(),
            gold.len()
        )));
    }
    let (mut p, mut g, mut c) = (0, 0, 0);
    for (pred, gold) in predicted.iter().zip(gold) {
        p += pred.len();
        g += gold.len();
        c += matches(pred, gold);
    }
    Ok(EvalReport::from_counts(p, g, c))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SentenceEval {
    pub predicted_labels: Vec<AspectLabel>,
    pub predicted: Vec<Span>,
    pub gold: Vec<Span>,
    pub correct: usize,
    pub repairs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub sentences: Vec<SentenceEval>,
}

/// Tags every sentence by arg-max and scores the result against the gold labels.
/// Sentences run in parallel; the result does not depend on scheduling.
pub fn evaluate(params: &ModelParams, config: &ModelConfig, corpus: &Corpus) -> Result<Evaluation> {
    params.check_shapes(config)?;
    let rows = params.vocab_size();
    if let Some(id) = corpus
        .iter()
        .flat_map(|s| &s.token_ids)
        .find(|&&id| id >= rows)
    {
        return Err(Error::Config(format!(
            "corpus token id {id} does not fit the model vocabulary of {rows}"
        )));
    }
    let sentences = corpus
        .sentences
        .par_iter()
        .map(|s| {
            let out = forward_sentence(params, config, s, Mode::Infer)?;
            let predicted_labels = out.predicted_aspects();
            let (predicted, repairs) = decode_spans_counted(&predicted_labels);
            let gold = decode_spans(&s.aspect_labels);
            let correct = matches(&predicted, &gold);
            Ok(SentenceEval {
                predicted_labels,
                predicted,
                gold,
                correct,
                repairs,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let (p, g, c, r) = sentences.iter().fold((0, 0, 0, 0), |acc, s| {
        (
            acc.0 + s.predicted.len(),
            acc.1 + s.gold.len(),
            acc.2 + s.correct,
            acc.3 + s.repairs,
        )
    });
    let mut report = EvalReport::from_counts(p, g, c);
    report.repairs = r;
    Ok(Evaluation { report, sentences })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    /// Opinion attention weight of token `i` for the target position.
    Opinion,
    /// THA score of an earlier aspect step for the target position.
    History,
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionKind::Opinion => "opinion",
            AttentionKind::History => "history",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRow {
    pub kind: AttentionKind,
    /// 1-based token position.
    pub position: usize,
    pub token: String,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionExport {
    pub target: usize,
    pub rows: Vec<AttentionRow>,
}

impl AttentionExport {
    pub fn opinion_rows(&self) -> impl Iterator<Item = &AttentionRow> {
        self.rows
            .iter()
            .filter(|r| r.kind == AttentionKind::Opinion)
    }

    pub fn history_rows(&self) -> impl Iterator<Item = &AttentionRow> {
        self.rows
            .iter()
            .filter(|r| r.kind == AttentionKind::History)
    }

    /// `kind,position,token,weight` with a header row.
    pub fn to_csv(&self) -> Result<String> {
        let mut out = csv::Writer::from_writer(Vec::new());
        let wrap = |e: csv::Error| Error::Data(format!("csv output failed: {e}"));
        out.write_record(["kind", "position", "token", "weight"])
            .map_err(wrap)?;
        for row in &self.rows {
            out.write_record([
                row.kind.to_string(),
                row.position.to_string(),
                row.token.clone(),
                format!("{:?}", row.weight),
            ])
            .map_err(wrap)?;
        }
        let bytes = out
            .into_inner()
            .map_err(|e| Error::Data(format!("csv output failed: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv of UTF-8 fields"))
    }
}

/// Opinion attention weights for the 1-based target position `target`, followed
/// by the THA scores over the cached window that preceded it.
pub fn export_attention(
    params: &ModelParams,
    config: &ModelConfig,
    sentence: &Sentence,
    target: usize,
) -> Result<AttentionExport> {
    if target == 0 || target > sentence.len() {
        return Err(Error::usage(format!(
            "position {target} outside 1..={}",
            sentence.len()
        )));
    }
    let mut tape = Tape::detached();
    let trace = forward(&mut tape, params, config, &sentence.token_ids, Mode::Infer)?;
    let t = target - 1;
    let mut rows: Vec<AttentionRow> = trace.attention[t]
        .values()
        .iter()
        .zip(&sentence.tokens)
        .enumerate()
        .map(|(i, (&weight, token))| AttentionRow {
            kind: AttentionKind::Opinion,
            position: i + 1,
            token: token.clone(),
            weight,
        })
        .collect();
    if let Some(scores) = &trace.tha_scores[t] {
        let first = t - scores.len();
        rows.extend(
            scores
                .values()
                .iter()
                .enumerate()
                .map(|(k, &weight)| AttentionRow {
                    kind: AttentionKind::History,
                    position: first + k + 1,
                    token: sentence.tokens[first + k].clone(),
                    weight,
                }),
        );
    }
    Ok(AttentionExport { target, rows })
}
