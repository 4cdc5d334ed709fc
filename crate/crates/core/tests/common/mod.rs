//! Synthetic corpora shared by the integration tests.
#![allow(dead_code)]

use hast_core::{
    init_model, AspectLabel, Corpus, EmbeddingMatrix, ModelConfig, ModelParams, OpinionLexicon,
    Sentence, Vocabulary,
};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const MARKERS: [&str; 2] = ["great", "awful"];
const SINGLE: [&str; 4] = ["pizza", "staff", "wine", "service"];
const MULTI: [[&str; 2]; 2] = [["battery", "life"], ["hard", "drive"]];
const FILLERS: [&str; 8] = ["the", "we", "it", "was", "and", "really", "today", "there"];

/// Sentences where a noun phrase is an aspect exactly when a marker word
/// directly precedes it. Unmarked nouns also occur, labelled `O`.
pub fn marker_grammar(sentences: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(sentences);
    for _ in 0..sentences {
        let mut tokens: Vec<&str> = Vec::new();
        let mut labels = Vec::new();
        let filler =
            |tokens: &mut Vec<&str>, labels: &mut Vec<AspectLabel>, rng: &mut ChaCha8Rng| {
                for _ in 0..rng.random_range(1..=2) {
                    tokens.push(FILLERS.choose(rng).unwrap());
                    labels.push(AspectLabel::O);
                }
            };
        filler(&mut tokens, &mut labels, &mut rng);
        let mentions = rng.random_range(1..=2);
        for m in 0..mentions {
            tokens.push(MARKERS.choose(&mut rng).unwrap());
            labels.push(AspectLabel::O);
            if rng.random_bool(0.3) {
                let phrase = MULTI.choose(&mut rng).unwrap();
                tokens.extend(phrase);
                labels.extend([AspectLabel::B, AspectLabel::I]);
            } else {
                tokens.push(SINGLE.choose(&mut rng).unwrap());
                labels.push(AspectLabel::B);
            }
            filler(&mut tokens, &mut labels, &mut rng);
            if m == 0 && rng.random_bool(0.5) {
                // unmarked noun, not an aspect
                tokens.push(SINGLE.choose(&mut rng).unwrap());
                labels.push(AspectLabel::O);
                filler(&mut tokens, &mut labels, &mut rng);
            }
        }
        let tokens = tokens.into_iter().map(String::from).collect();
        out.push(Sentence::new(tokens, labels).unwrap());
    }
    Corpus::new(out)
}

/// Indexes `corpus`, applies the marker lexicon and builds a fresh model.
pub fn prepare(corpus: &mut Corpus, config: &ModelConfig) -> (Vocabulary, ModelParams) {
    corpus.apply_lexicon(&OpinionLexicon::from_words(MARKERS));
    let vocab = Vocabulary::build(corpus, []).unwrap();
    corpus.index(&vocab);
    let embeddings = EmbeddingMatrix::random(vocab.len(), config.dim_w, config.seed);
    let params = init_model(config, &vocab, &embeddings).unwrap();
    (vocab, params)
}

/// The small configuration used for gradient checks.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        dim_w: 6,
        dim_h_aspect: 5,
        dim_h_opinion: 4,
        history_window: 3,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

/// Random labelled sentence of length `len` over a vocabulary of `vocab` ids.
pub fn random_sentence(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Sentence {
    let tokens = (0..len).map(|i| format!("w{i}")).collect();
    let labels = (0..len)
        .map(|_| AspectLabel::from_index(rng.random_range(0..3)).unwrap())
        .collect();
    let mut s = Sentence::new(tokens, labels).unwrap();
    s.token_ids = (0..len).map(|_| rng.random_range(0..vocab)).collect();
    s.opinion_labels = (0..len)
        .map(|_| {
            if rng.random_bool(0.3) {
                hast_core::OpinionLabel::Op
            } else {
                hast_core::OpinionLabel::O
            }
        })
        .collect();
    s
}

/// Replaces every parameter with U(-scale, scale) noise so no structure
/// (zero biases, etc.) hides a gradient bug.
pub fn randomize(params: &ModelParams, config: &ModelConfig, seed: u64, scale: f64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    params
        .try_map(config, |_, t| {
            let data = (0..t.len())
                .map(|_| rng.random_range(-scale..scale))
                .collect();
            hast_core::Tensor::new(t.shape(), data)
        })
        .unwrap()
}
