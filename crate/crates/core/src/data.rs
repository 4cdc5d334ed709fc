//! Corpora, vocabulary, pretrained embeddings and lexicon-based opinion labels.
//!
//! File formats (all UTF-8):
//!
//! * corpus: one `token<TAB>label` line per token, `label` one of `B`, `I`, `O`;
//!   a blank line ends a sentence; lines starting with `#` are ignored.
//! * embeddings: `word v1 v2 ... vd` per line, single-space separated.
//! * lexicon: one word per line, `#` comments ignored.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unicode_general_category::{get_general_category, GeneralCategory};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Replacement for tokens made only of punctuation.
pub const PUNCT: &str = "PUNCT";

/// Reserved vocabulary entry at index 0.
pub const UNKNOWN_TOKEN: &str = "<unk>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AspectLabel {
    B,
    I,
    O,
}

impl AspectLabel {
    pub const ALL: [AspectLabel; 3] = [AspectLabel::B, AspectLabel::I, AspectLabel::O];

    /// Position in the aspect output distribution `(B, I, O)`.
    pub fn index(self) -> usize {
        match self {
            AspectLabel::B => 0,
            AspectLabel::I => 1,
            AspectLabel::O => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<AspectLabel> {
        AspectLabel::ALL.get(i).copied()
    }
}

impl fmt::Display for AspectLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AspectLabel::B => "B",
            AspectLabel::I => "I",
            AspectLabel::O => "O",
        })
    }
}

impl FromStr for AspectLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "B" => Ok(AspectLabel::B),
            "I" => Ok(AspectLabel::I),
            "O" => Ok(AspectLabel::O),
            other => Err(format!("unknown label tag '{other}'")),
        }
    }
}

/// Distant opinion label: the word is in the lexicon (`Op`) or not (`O`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpinionLabel {
    Op,
    O,
}

impl OpinionLabel {
    /// Position in the opinion output distribution `(OP, O)`.
    pub fn index(self) -> usize {
        match self {
            OpinionLabel::Op => 0,
            OpinionLabel::O => 1,
        }
    }
}

impl fmt::Display for OpinionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OpinionLabel::Op => "OP",
            OpinionLabel::O => "O",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sentence {
    pub tokens: Vec<String>,
    pub aspect_labels: Vec<AspectLabel>,
    pub opinion_labels: Vec<OpinionLabel>,
    pub token_ids: Vec<usize>,
}

impl Sentence {
    /// A sentence with all opinion labels `O` and all token ids unknown.
    pub fn new(tokens: Vec<String>, aspect_labels: Vec<AspectLabel>) -> Result<Sentence> {
        if tokens.is_empty() {
            return Err(Error::usage("a sentence needs at least one token"));
        }
        if tokens.len() != aspect_labels.len() {
            return Err(Error::Data(format!(
                "{} tokens but {} labels",
                tokens.len(),
                aspect_labels.len()
            )));
        }
        let n = tokens.len();
        Ok(Sentence {
            tokens,
            aspect_labels,
            opinion_labels: vec![OpinionLabel::O; n],
            token_ids: vec![0; n],
        })
    }

    /// Unlabelled sentence (all `O`), e.g. for prediction.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Sentence> {
        let n = tokens.len();
        Sentence::new(tokens, vec![AspectLabel::O; n])
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub sentences: Vec<Sentence>,
}

impl Corpus {
    pub fn new(sentences: Vec<Sentence>) -> Corpus {
        Corpus { sentences }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Sentence> {
        self.sentences.iter()
    }

    /// Number of gold aspect spans (a legal sequence has one per `B`).
    pub fn aspect_span_count(&self) -> usize {
        self.sentences
            .iter()
            .flat_map(|s| &s.aspect_labels)
            .filter(|&&l| l == AspectLabel::B)
            .count()
    }

    pub fn sentences_with_aspects(&self) -> usize {
        self.sentences
            .iter()
            .filter(|s| s.aspect_labels.contains(&AspectLabel::B))
            .count()
    }

    /// Applies [`preprocess_tokens`] to every sentence.
    pub fn preprocess(&mut self) -> Result<()> {
        for s in &mut self.sentences {
            s.tokens = preprocess_tokens(&s.tokens)?;
        }
        Ok(())
    }

    pub fn apply_lexicon(&mut self, lexicon: &OpinionLexicon) {
        for s in &mut self.sentences {
            s.opinion_labels = distant_opinion_labels(&s.tokens, lexicon);
        }
    }

    pub fn index(&mut self, vocab: &Vocabulary) {
        for s in &mut self.sentences {
            s.token_ids = s.tokens.iter().map(|t| vocab.lookup(t)).collect();
        }
    }

    /// Writes the corpus in the `token<TAB>label` format. Tokens the format
    /// cannot carry (leading `#`, tabs, line breaks, blank) are an error.
    pub fn write_to(&self, mut out: impl Write) -> std::io::Result<()> {
        for s in &self.sentences {
            for (token, label) in s.tokens.iter().zip(&s.aspect_labels) {
                if token.trim().is_empty()
                    || token.starts_with('#')
                    || token.contains(['\t', '\n', '\r'])
                {
                    return Err(std::io::Error::new(
                        std::io::ErrorKind::InvalidData,
                        format!("token {token:?} cannot be written in the corpus format"),
                    ));
                }
                writeln!(out, "{token}\t{label}")?;
            }
            writeln!(out)?;
        }
        out.flush()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(std::io::BufWriter::new(file))
            .map_err(|e| Error::io(path, e))
    }
}

fn is_punctuation(c: char) -> bool {
    matches!(
        get_general_category(c),
        GeneralCategory::ConnectorPunctuation
            | GeneralCategory::DashPunctuation
            | GeneralCategory::OpenPunctuation
            | GeneralCategory::ClosePunctuation
            | GeneralCategory::InitialPunctuation
            | GeneralCategory::FinalPunctuation
            | GeneralCategory::OtherPunctuation
    )
}

/// Lowercases every token and replaces tokens made entirely of punctuation
/// characters with [`PUNCT`]. The literal `PUNCT` is left alone.
pub fn preprocess_tokens<S: AsRef<str>>(raw: &[S]) -> Result<Vec<String>> {
    if raw.is_empty() {
        return Err(Error::usage("cannot preprocess an empty token sequence"));
    }
    Ok(raw
        .iter()
        .map(|t| {
            let t = t.as_ref();
            if t == PUNCT || (!t.is_empty() && t.chars().all(is_punctuation)) {
                PUNCT.to_string()
            } else {
                t.to_lowercase()
            }
        })
        .collect())
}

pub fn load_bio_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_bio_corpus(BufReader::new(file), path)
}

/// Parses the corpus format from any reader; `origin` is used in error messages.
pub fn read_bio_corpus(reader: impl BufRead, origin: &Path) -> Result<Corpus> {
    let mut sentences = Vec::new();
    let mut tokens = Vec::new();
    let mut labels: Vec<AspectLabel> = Vec::new();

    let mut flush = |tokens: &mut Vec<String>, labels: &mut Vec<AspectLabel>| -> Result<()> {
        if !tokens.is_empty() {
            sentences.push(Sentence::new(
                std::mem::take(tokens),
                std::mem::take(labels),
            )?);
        }
        Ok(())
    };

    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(origin, e))?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.trim().is_empty() {
            flush(&mut tokens, &mut labels)?;
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let Some((token, tag)) = line.split_once('\t') else {
            return Err(Error::parse(origin, lineno, "expected 'token<TAB>label'"));
        };
        if token.is_empty() {
            return Err(Error::parse(origin, lineno, "empty token"));
        }
        let label: AspectLabel = tag
            .trim()
            .parse()
            .map_err(|msg: String| Error::parse(origin, lineno, msg))?;
        if label == AspectLabel::I && labels.last().is_none_or(|&l| l == AspectLabel::O) {
            return Err(Error::parse(
                origin,
                lineno,
                "label I must follow B or I within a sentence",
            ));
        }
        tokens.push(token.to_string());
        labels.push(label);
    }
    flush(&mut tokens, &mut labels)?;
    Ok(Corpus { sentences })
}

/// Token-to-index map. Index 0 is reserved for unknown tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    index: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary {
            index: HashMap::new(),
            tokens: vec![UNKNOWN_TOKEN.to_string()],
        }
    }
}

impl Vocabulary {
    /// Vocabulary of every token in `corpus` plus `extra` tokens, in order of
    /// first appearance.
    pub fn build<'a>(
        corpus: &Corpus,
        extra: impl IntoIterator<Item = &'a str>,
    ) -> Result<Vocabulary> {
        if corpus.is_empty() {
            return Err(Error::usage(
                "cannot build a vocabulary from an empty corpus",
            ));
        }
        let mut vocab = Vocabulary::default();
        for token in corpus.iter().flat_map(|s| s.tokens.iter()) {
            vocab.insert(token);
        }
        for token in extra {
            vocab.insert(token);
        }
        Ok(vocab)
    }

    /// Rebuilds a vocabulary from its token list (index 0 must be the unknown token).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocabulary> {
        if tokens.first().map(String::as_str) != Some(UNKNOWN_TOKEN) {
            return Err(Error::Data(format!(
                "vocabulary must start with {UNKNOWN_TOKEN}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate().skip(1) {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary entry '{t}'")));
            }
        }
        Ok(Vocabulary { index, tokens })
    }

    fn insert(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        let i = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), i);
        i
    }

    /// Index of `token`, or 0 if unseen.
    pub fn lookup(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Size including the unknown entry.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 1
    }
}

/// `|V| × dim_w` word vectors aligned with a [`Vocabulary`].
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    pub matrix: Tensor,
    /// Number of rows copied from the embedding file.
    pub pretrained_rows: usize,
}

impl EmbeddingMatrix {
    pub fn dim(&self) -> usize {
        match self.matrix.shape() {
            Shape::Matrix(_, c) => c,
            _ => unreachable!("embedding matrix is always rank 2"),
        }
    }

    pub fn rows(&self) -> usize {
        match self.matrix.shape() {
            Shape::Matrix(r, _) => r,
            _ => unreachable!("embedding matrix is always rank 2"),
        }
    }

    /// All rows drawn from U(-0.25, 0.25).
    pub fn random(rows: usize, dim: usize, seed: u64) -> EmbeddingMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * dim).map(|_| sample_oov(&mut rng)).collect();
        EmbeddingMatrix {
            matrix: Tensor::from_parts(Shape::Matrix(rows, dim), data),
            pretrained_rows: 0,
        }
    }
}

fn sample_oov(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(-0.25..0.25)
}

/// Reads pretrained vectors for the words of `vocab`. Rows for words missing
/// from the file (including the unknown entry) are drawn i.i.d. from
/// U(-0.25, 0.25) using `seed`, in vocabulary order.
pub fn load_embeddings(
    path: impl AsRef<Path>,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_embeddings(BufReader::new(file), path, vocab, seed)
}

pub fn read_embeddings(
    reader: impl BufRead,
    origin: &Path,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<EmbeddingMatrix> {
    let mut dim: Option<usize> = None;
    let mut found: Vec<Option<Vec<f64>>> = vec![None; vocab.len()];

    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(origin, e))?;
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(' ');
        let word = fields.next().unwrap_or_default();
        let values: Vec<&str> = fields.collect();

        // word2vec-style "<count> <dim>" header
        if lineno == 1
            && values.len() == 1
            && word.parse::<usize>().is_ok()
            && values[0].parse::<usize>().is_ok()
        {
            continue;
        }
        if values.is_empty() {
            return Err(Error::parse(origin, lineno, "word without vector"));
        }
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(Error::parse(
                    origin,
                    lineno,
                    format!("vector has {} values, expected {d}", values.len()),
                ));
            }
            Some(_) => {}
        }
        let id = vocab.lookup(word);
        if id == 0 || found[id].is_some() {
            continue;
        }
        let row = values
            .iter()
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| Error::parse(origin, lineno, format!("bad vector value: {e}")))?;
        found[id] = Some(row);
    }

    let dim = dim.ok_or_else(|| Error::parse(origin, 1, "no vectors in embedding file"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(vocab.len() * dim);
    let mut pretrained_rows = 0;
    for row in found {
        match row {
            Some(values) => {
                pretrained_rows += 1;
                data.extend(values);
            }
            None => data.extend((0..dim).map(|_| sample_oov(&mut rng))),
        }
    }
    Ok(EmbeddingMatrix {
        matrix: Tensor::from_parts(Shape::Matrix(vocab.len(), dim), data),
        pretrained_rows,
    })
}

/// Lowercased opinion words.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OpinionLexicon {
    words: HashSet<String>,
}

impl OpinionLexicon {
    pub fn from_words<I, S>(words: I) -> OpinionLexicon
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        OpinionLexicon {
            words: words
                .into_iter()
                .map(|w| w.as_ref().to_lowercase())
                .collect(),
        }
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(&word.to_lowercase())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Loads a lexicon; an empty lexicon is an error since it would supervise nothing.
pub fn load_lexicon(path: impl AsRef<Path>) -> Result<OpinionLexicon> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut words = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let word = line.trim();
        if word.is_empty() || word.starts_with('#') {
            continue;
        }
        words.push(word.to_string());
    }
    let lexicon = OpinionLexicon::from_words(words);
    if lexicon.is_empty() {
        return Err(Error::Data(format!(
            "lexicon {} contains no words",
            path.display()
        )));
    }
    Ok(lexicon)
}

pub fn distant_opinion_labels<S: AsRef<str>>(
    tokens: &[S],
    lexicon: &OpinionLexicon,
) -> Vec<OpinionLabel> {
    tokens
        .iter()
        .map(|t| {
            if lexicon.contains(t.as_ref()) {
                OpinionLabel::Op
            } else {
                OpinionLabel::O
            }
        })
        .collect()
}
