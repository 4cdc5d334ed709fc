//! Fixtures shared by the benchmarks.

use hast_core::{
    init_model, AspectLabel, Corpus, EmbeddingMatrix, ModelConfig, ModelParams, OpinionLexicon,
    Sentence, Vocabulary,
};

const WORDS: [&str; 10] = [
    "the", "great", "pizza", "was", "and", "awful", "battery", "life", "we", "it",
];

/// `sentences` sentences of `len` tokens from a fixed cyclic pattern. Every
/// token after a marker is an aspect.
pub fn corpus(sentences: usize, len: usize) -> Corpus {
    let out = (0..sentences)
        .map(|s| {
            let tokens: Vec<String> = (0..len)
                .map(|t| WORDS[(s * 3 + t * 7) % WORDS.len()].to_string())
                .collect();
            let labels = tokens
                .iter()
                .enumerate()
                .map(
                    |(t, _)| match t.checked_sub(1).map(|p| tokens[p].as_str()) {
                        Some("great" | "awful") => AspectLabel::B,
                        _ => AspectLabel::O,
                    },
                )
                .collect();
            Sentence::new(tokens, labels).expect("nonempty")
        })
        .collect();
    Corpus::new(out)
}

/// Default-sized model over an indexed copy of `corpus`.
pub fn model(corpus: &mut Corpus, config: &ModelConfig) -> ModelParams {
    corpus.apply_lexicon(&OpinionLexicon::from_words(["great", "awful"]));
    let vocab = Vocabulary::build(corpus, []).expect("nonempty corpus");
    corpus.index(&vocab);
    let embeddings = EmbeddingMatrix::random(vocab.len(), config.dim_w, config.seed);
    init_model(config, &vocab, &embeddings).expect("consistent fixture")
}
