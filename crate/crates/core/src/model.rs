//! The full tagger: embeddings, aspect and opinion BiLSTMs, truncated history
//! attention, selective transformation with bilinear attention, and the two
//! softmax heads trained jointly.

use std::fmt;
use std::str::FromStr;

use rand::distr::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{GradientMap, Tape};
use crate::data::{AspectLabel, EmbeddingMatrix, OpinionLabel, Sentence, Vocabulary};
use crate::encoder::{bilstm_encode, BiLstmParams, LstmParams};
use crate::error::{Error, Result};
use crate::history::{tha_step, HistoryCache, ThaParams};
use crate::selective::{bilinear_attention, project_opinions, transform_projected, StnParams};
use crate::tensor::{Shape, Tensor};

/// Floor applied to gold-label probabilities inside the log.
pub const PROB_FLOOR: f64 = 1e-12;

const WEIGHT_INIT_BOUND: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub dim_w: usize,
    /// Per-direction hidden size of the aspect BiLSTM.
    pub dim_h_aspect: usize,
    /// Per-direction hidden size of the opinion BiLSTM.
    pub dim_h_opinion: usize,
    /// Number of cached aspect steps attended by THA.
    pub history_window: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub use_tha: bool,
    pub use_stn: bool,
    pub freeze_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim_w: 300,
            dim_h_aspect: 100,
            dim_h_opinion: 30,
            history_window: 5,
            dropout: 0.5,
            learning_rate: 0.07,
            epochs: 40,
            seed: 1,
            use_tha: true,
            use_stn: true,
            freeze_embeddings: false,
        }
    }
}

impl ModelConfig {
    pub const KEYS: [&'static str; 11] = [
        "dim_w",
        "dim_h_aspect",
        "dim_h_opinion",
        "history_window",
        "dropout",
        "learning_rate",
        "epochs",
        "seed",
        "use_tha",
        "use_stn",
        "freeze_embeddings",
    ];

    /// Sets one field from its textual `key=value` form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("invalid value '{value}' for {key}")))
        }
        match key {
            "dim_w" => self.dim_w = parse(key, value)?,
            "dim_h_aspect" => self.dim_h_aspect = parse(key, value)?,
            "dim_h_opinion" => self.dim_h_opinion = parse(key, value)?,
            "history_window" => self.history_window = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "use_tha" => self.use_tha = parse(key, value)?,
            "use_stn" => self.use_stn = parse(key, value)?,
            "freeze_embeddings" => self.freeze_embeddings = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "dim_w" => self.dim_w.to_string(),
            "dim_h_aspect" => self.dim_h_aspect.to_string(),
            "dim_h_opinion" => self.dim_h_opinion.to_string(),
            "history_window" => self.history_window.to_string(),
            "dropout" => format!("{:?}", self.dropout),
            "learning_rate" => format!("{:?}", self.learning_rate),
            "epochs" => self.epochs.to_string(),
            "seed" => self.seed.to_string(),
            "use_tha" => self.use_tha.to_string(),
            "use_stn" => self.use_stn.to_string(),
            "freeze_embeddings" => self.freeze_embeddings.to_string(),
            _ => return None,
        })
    }

    /// Parses flat `key=value` lines over the defaults. Blank lines and `#`
    /// comments are skipped.
    pub fn parse(text: &str) -> Result<ModelConfig> {
        let mut config = ModelConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got '{line}'", i + 1))
            })?;
            config.set(key.trim(), value.trim())?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim_w", self.dim_w),
            ("dim_h_aspect", self.dim_h_aspect),
            ("dim_h_opinion", self.dim_h_opinion),
            ("history_window", self.history_window),
            ("epochs", self.epochs),
        ];
        for (key, value) in positive {
            if value == 0 {
                return Err(Error::Config(format!("{key} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }

    /// Width of the aspect representation, `2·dim^A_h`.
    pub fn aspect_width(&self) -> usize {
        2 * self.dim_h_aspect
    }

    /// Width of the opinion representation, `2·dim^O_h`.
    pub fn opinion_width(&self) -> usize {
        2 * self.dim_h_opinion
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for key in ModelConfig::KEYS {
            writeln!(f, "{key}={}", self.get(key).expect("known key"))?;
        }
        Ok(())
    }
}

/// Every learnable tensor of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub embeddings: Tensor,
    pub aspect_lstm: BiLstmParams,
    pub opinion_lstm: BiLstmParams,
    pub tha: ThaParams,
    pub stn: StnParams,
    /// `3 × (2·dim^A_h + 2·dim^O_h)`.
    pub aspect_head_w: Tensor,
    pub aspect_head_b: Tensor,
    /// `2 × 2·dim^O_h`.
    pub opinion_head_w: Tensor,
    pub opinion_head_b: Tensor,
}

/// Parameter names in checkpoint order.
pub const PARAM_NAMES: [&str; 25] = [
    "embeddings",
    "aspect_lstm.forward.w",
    "aspect_lstm.forward.u",
    "aspect_lstm.forward.b",
    "aspect_lstm.backward.w",
    "aspect_lstm.backward.u",
    "aspect_lstm.backward.b",
    "opinion_lstm.forward.w",
    "opinion_lstm.forward.u",
    "opinion_lstm.forward.b",
    "opinion_lstm.backward.w",
    "opinion_lstm.backward.u",
    "opinion_lstm.backward.b",
    "tha.w1",
    "tha.w2",
    "tha.w3",
    "tha.v",
    "stn.w4",
    "stn.w5",
    "stn.w_bi",
    "stn.b_bi",
    "aspect_head.w",
    "aspect_head.b",
    "opinion_head.w",
    "opinion_head.b",
];

impl ModelParams {
    /// All tensors with their names, in checkpoint order.
    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        fn lstm(p: &BiLstmParams) -> [&Tensor; 6] {
            [
                &p.forward.w,
                &p.forward.u,
                &p.forward.b,
                &p.backward.w,
                &p.backward.u,
                &p.backward.b,
            ]
        }
        let mut tensors: Vec<&Tensor> = vec![&self.embeddings];
        tensors.extend(lstm(&self.aspect_lstm));
        tensors.extend(lstm(&self.opinion_lstm));
        tensors.extend([&self.tha.w1, &self.tha.w2, &self.tha.w3, &self.tha.v]);
        tensors.extend([&self.stn.w4, &self.stn.w5, &self.stn.w_bi, &self.stn.b_bi]);
        tensors.extend([
            &self.aspect_head_w,
            &self.aspect_head_b,
            &self.opinion_head_w,
            &self.opinion_head_b,
        ]);
        Self::names().zip(tensors).collect()
    }

    /// Mutable tensors in the same order as [`ModelParams::named`].
    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut tensors: Vec<&mut Tensor> = vec![&mut self.embeddings];
        for p in [&mut self.aspect_lstm, &mut self.opinion_lstm] {
            tensors.extend([
                &mut p.forward.w,
                &mut p.forward.u,
                &mut p.forward.b,
                &mut p.backward.w,
                &mut p.backward.u,
                &mut p.backward.b,
            ]);
        }
        let (tha, stn) = (&mut self.tha, &mut self.stn);
        tensors.extend([&mut tha.w1, &mut tha.w2, &mut tha.w3, &mut tha.v]);
        tensors.extend([&mut stn.w4, &mut stn.w5, &mut stn.w_bi, &mut stn.b_bi]);
        tensors.extend([
            &mut self.aspect_head_w,
            &mut self.aspect_head_b,
            &mut self.opinion_head_w,
            &mut self.opinion_head_b,
        ]);
        Self::names().zip(tensors).collect()
    }

    /// One plain gradient step: `p ← p − lr·grad` for every tensor with a gradient.
    pub fn apply_gradients(&mut self, grads: &GradientMap, learning_rate: f64) -> Result<()> {
        for (name, tensor) in self.named_mut() {
            let Some(grad) = grads.get(name) else {
                continue;
            };
            if grad.shape() != tensor.shape() {
                return Err(Error::dim("apply_gradients", tensor.shape(), grad.shape()));
            }
            for (p, g) in tensor.values_mut().iter_mut().zip(grad.values()) {
                *p -= learning_rate * g;
            }
        }
        Ok(())
    }

    pub fn names() -> impl Iterator<Item = &'static str> {
        PARAM_NAMES.into_iter()
    }

    /// Builds parameters from tensors supplied by name, validating every shape
    /// against `config`.
    pub fn from_named(
        config: &ModelConfig,
        mut lookup: impl FnMut(&str) -> Result<Tensor>,
    ) -> Result<ModelParams> {
        let mut get = |name: &str| lookup(name);
        let mut lstm = |prefix: &str| -> Result<BiLstmParams> {
            let dir =
                |get: &mut dyn FnMut(&str) -> Result<Tensor>, d: &str| -> Result<LstmParams> {
                    LstmParams::new(
                        get(&format!("{prefix}.{d}.w"))?,
                        get(&format!("{prefix}.{d}.u"))?,
                        get(&format!("{prefix}.{d}.b"))?,
                    )
                };
            let f = dir(&mut get, "forward")?;
            let b = dir(&mut get, "backward")?;
            BiLstmParams::new(f, b)
        };
        let aspect_lstm = lstm("aspect_lstm")?;
        let opinion_lstm = lstm("opinion_lstm")?;
        let embeddings = lookup("embeddings")?;
        let tha = ThaParams::new(
            lookup("tha.w1")?,
            lookup("tha.w2")?,
            lookup("tha.w3")?,
            lookup("tha.v")?,
        )?;
        let stn = StnParams::new(
            lookup("stn.w4")?,
            lookup("stn.w5")?,
            lookup("stn.w_bi")?,
            lookup("stn.b_bi")?,
        )?;
        let params = ModelParams {
            embeddings,
            aspect_lstm,
            opinion_lstm,
            tha,
            stn,
            aspect_head_w: lookup("aspect_head.w")?,
            aspect_head_b: lookup("aspect_head.b")?,
            opinion_head_w: lookup("opinion_head.w")?,
            opinion_head_b: lookup("opinion_head.b")?,
        };
        params.check_shapes(config)?;
        Ok(params)
    }

    /// Applies `f` to every tensor, keeping the structure.
    pub fn try_map(
        &self,
        config: &ModelConfig,
        mut f: impl FnMut(&'static str, &Tensor) -> Result<Tensor>,
    ) -> Result<ModelParams> {
        let named = self.named();
        ModelParams::from_named(config, |name| {
            let (key, tensor) = named
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::usage(format!("no parameter '{name}'")))?;
            f(key, tensor)
        })
    }

    /// Registers every tensor as a leaf on `tape`. Frozen embeddings stay constant.
    pub fn bind(&self, tape: &mut Tape, config: &ModelConfig) -> Result<ModelParams> {
        self.try_map(config, |name, t| {
            if name == "embeddings" && config.freeze_embeddings {
                Ok(t.detach())
            } else {
                tape.leaf(name, t.clone())
            }
        })
    }

    pub fn vocab_size(&self) -> usize {
        match self.embeddings.shape() {
            Shape::Matrix(r, _) => r,
            _ => 0,
        }
    }

    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let (a, o) = (config.aspect_width(), config.opinion_width());
        let rows = self.vocab_size();
        let expected = [
            (&self.embeddings, Shape::Matrix(rows, config.dim_w)),
            (
                &self.aspect_lstm.forward.w,
                Shape::Matrix(4 * config.dim_h_aspect, config.dim_w),
            ),
            (
                &self.aspect_lstm.forward.u,
                Shape::Matrix(4 * config.dim_h_aspect, config.dim_h_aspect),
            ),
            (
                &self.opinion_lstm.forward.w,
                Shape::Matrix(4 * config.dim_h_opinion, config.dim_w),
            ),
            (
                &self.opinion_lstm.forward.u,
                Shape::Matrix(4 * config.dim_h_opinion, config.dim_h_opinion),
            ),
            (&self.tha.w1, Shape::Matrix(a, a)),
            (&self.stn.w_bi, Shape::Matrix(a, o)),
            (&self.aspect_head_w, Shape::Matrix(3, a + o)),
            (&self.aspect_head_b, Shape::Vector(3)),
            (&self.opinion_head_w, Shape::Matrix(2, o)),
            (&self.opinion_head_b, Shape::Vector(2)),
        ];
        for (t, shape) in expected {
            if t.shape() != shape {
                return Err(Error::Config(format!(
                    "parameter shape {} does not match configuration (expected {shape})",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: Shape, bound: f64) -> Tensor {
    let dist = Uniform::new(-bound, bound).expect("positive bound");
    Tensor::from_parts(shape, (0..shape.len()).map(|_| dist.sample(rng)).collect())
}

fn glorot_lstm(rng: &mut ChaCha8Rng, dim_in: usize, dim_h: usize) -> LstmParams {
    // Each gate block is dim_h × fan_in, so one bound serves the whole stack.
    let w_bound = (6.0 / (dim_in + dim_h) as f64).sqrt();
    let u_bound = (6.0 / (2 * dim_h) as f64).sqrt();
    LstmParams {
        w: uniform_tensor(rng, Shape::Matrix(4 * dim_h, dim_in), w_bound),
        u: uniform_tensor(rng, Shape::Matrix(4 * dim_h, dim_h), u_bound),
        b: Tensor::zeros(Shape::Vector(4 * dim_h)),
    }
}

/// Fresh parameters: Glorot-uniform LSTM weights, U(-0.2, 0.2) for every other
/// weight, zero biases and the given embedding rows. Deterministic in `config.seed`.
pub fn init_model(
    config: &ModelConfig,
    vocab: &Vocabulary,
    embeddings: &EmbeddingMatrix,
) -> Result<ModelParams> {
    config.validate()?;
    if embeddings.rows() != vocab.len() {
        return Err(Error::Config(format!(
            "embedding matrix has {} rows but the vocabulary has {} entries",
            embeddings.rows(),
            vocab.len()
        )));
    }
    if embeddings.dim() != config.dim_w {
        return Err(Error::Config(format!(
            "embeddings have dimension {} but dim_w is {}",
            embeddings.dim(),
            config.dim_w
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (a, o) = (config.aspect_width(), config.opinion_width());
    let mut lstm = |dim_h: usize| BiLstmParams {
        forward: glorot_lstm(&mut rng, config.dim_w, dim_h),
        backward: glorot_lstm(&mut rng, config.dim_w, dim_h),
    };
    let aspect_lstm = lstm(config.dim_h_aspect);
    let opinion_lstm = lstm(config.dim_h_opinion);
    let mut weight = |shape| uniform_tensor(&mut rng, shape, WEIGHT_INIT_BOUND);
    let tha = ThaParams {
        w1: weight(Shape::Matrix(a, a)),
        w2: weight(Shape::Matrix(a, a)),
        w3: weight(Shape::Matrix(a, a)),
        v: weight(Shape::Vector(a)),
    };
    let stn = StnParams {
        w4: weight(Shape::Matrix(o, a)),
        w5: weight(Shape::Matrix(o, o)),
        w_bi: weight(Shape::Matrix(a, o)),
        b_bi: Tensor::scalar(0.0),
    };
    let aspect_head_w = weight(Shape::Matrix(3, a + o));
    let opinion_head_w = weight(Shape::Matrix(2, o));
    let params = ModelParams {
        embeddings: embeddings.matrix.detach(),
        aspect_lstm,
        opinion_lstm,
        tha,
        stn,
        aspect_head_w,
        aspect_head_b: Tensor::zeros(Shape::Vector(3)),
        opinion_head_w,
        opinion_head_b: Tensor::zeros(Shape::Vector(2)),
    };
    params.check_shapes(config)?;
    Ok(params)
}

/// Inference, or training with inverted dropout driven by the given generator.
pub enum Mode<'r> {
    Infer,
    Train(&'r mut ChaCha8Rng),
}

impl Mode<'_> {
    fn dropout(&mut self, tape: &mut Tape, x: &Tensor, rate: f64) -> Result<Tensor> {
        match self {
            Mode::Train(rng) if rate > 0.0 => {
                let keep = 1.0 - rate;
                let mask = (0..x.len())
                    .map(|_| {
                        if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect();
                tape.mul(x, &Tensor::from_parts(x.shape(), mask))
            }
            _ => Ok(x.clone()),
        }
    }
}

/// Intermediate and final tensors of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Raw aspect states `h^A_t`.
    pub aspect_hidden: Vec<Tensor>,
    /// Opinion states `h^O_t`.
    pub opinion_hidden: Vec<Tensor>,
    /// History-aware aspect states `h̃^A_t` (equal to `h^A_t` without THA).
    pub history_aware: Vec<Tensor>,
    pub tha_scores: Vec<Option<Tensor>>,
    /// Row `t` holds the opinion attention weights for target position `t`.
    pub attention: Vec<Tensor>,
    pub opinion_summary: Vec<Tensor>,
    pub aspect_probs: Vec<Tensor>,
    pub opinion_probs: Vec<Tensor>,
}

impl ForwardTrace {
    pub fn output(&self) -> SentenceOutput {
        SentenceOutput {
            aspect_probs: self
                .aspect_probs
                .iter()
                .map(|p| [p.values()[0], p.values()[1], p.values()[2]])
                .collect(),
            opinion_probs: self
                .opinion_probs
                .iter()
                .map(|p| [p.values()[0], p.values()[1]])
                .collect(),
            attention: self.attention.iter().map(|w| w.values().to_vec()).collect(),
            tha_scores: self
                .tha_scores
                .iter()
                .map(|s| s.as_ref().map(|s| s.values().to_vec()).unwrap_or_default())
                .collect(),
        }
    }
}

/// Runs the network over `token_ids` on `tape`.
pub fn forward(
    tape: &mut Tape,
    params: &ModelParams,
    config: &ModelConfig,
    token_ids: &[usize],
    mut mode: Mode<'_>,
) -> Result<ForwardTrace> {
    if token_ids.is_empty() {
        return Err(Error::usage("cannot run the model on an empty sentence"));
    }
    let vocab = params.vocab_size();
    if let Some(&bad) = token_ids.iter().find(|&&id| id >= vocab) {
        return Err(Error::Data(format!(
            "token id {bad} outside the embedding matrix ({vocab} rows)"
        )));
    }

    let mut embedded = Vec::with_capacity(token_ids.len());
    for &id in token_ids {
        let x = tape.row(&params.embeddings, id)?;
        embedded.push(mode.dropout(tape, &x, config.dropout)?);
    }
    let aspect_hidden = bilstm_encode(tape, &embedded, &params.aspect_lstm)?;
    let opinion_hidden = bilstm_encode(tape, &embedded, &params.opinion_lstm)?;
    let opinion_projected = if config.use_stn {
        project_opinions(tape, &opinion_hidden, &params.stn)?
    } else {
        Vec::new()
    };

    let n = token_ids.len();
    let mut cache = HistoryCache::new(config.history_window);
    let mut trace = ForwardTrace {
        aspect_hidden: Vec::with_capacity(n),
        opinion_hidden: Vec::with_capacity(n),
        history_aware: Vec::with_capacity(n),
        tha_scores: Vec::with_capacity(n),
        attention: Vec::with_capacity(n),
        opinion_summary: Vec::with_capacity(n),
        aspect_probs: Vec::with_capacity(n),
        opinion_probs: Vec::with_capacity(n),
    };

    for h in &aspect_hidden {
        let (aware, scores) = if config.use_tha {
            let out = tha_step(tape, h, &mut cache, &params.tha)?;
            cache.push(h.clone(), out.aware.clone());
            (out.aware, out.scores)
        } else {
            (h.clone(), None)
        };

        let attention = if config.use_stn {
            let transformed = transform_projected(
                tape,
                &aware,
                &opinion_hidden,
                &opinion_projected,
                &params.stn,
            )?;
            bilinear_attention(tape, &aware, &transformed, &params.stn)?
        } else {
            bilinear_attention(tape, &aware, &opinion_hidden, &params.stn)?
        };

        let features = tape.concat(&[&aware, &attention.summary])?;
        let features = mode.dropout(tape, &features, config.dropout)?;
        let logits = tape.affine(&params.aspect_head_w, &features, &params.aspect_head_b)?;
        trace.aspect_probs.push(tape.softmax(&logits)?);

        trace.history_aware.push(aware);
        trace.tha_scores.push(scores);
        trace.attention.push(attention.weights);
        trace.opinion_summary.push(attention.summary);
    }

    for h in &opinion_hidden {
        let features = mode.dropout(tape, h, config.dropout)?;
        let logits = tape.affine(&params.opinion_head_w, &features, &params.opinion_head_b)?;
        trace.opinion_probs.push(tape.softmax(&logits)?);
    }

    trace.aspect_hidden = aspect_hidden;
    trace.opinion_hidden = opinion_hidden;
    Ok(trace)
}

/// Per-token distributions and attention for one sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceOutput {
    /// Distribution over `(B, I, O)` per token.
    pub aspect_probs: Vec<[f64; 3]>,
    /// Distribution over `(OP, O)` per token.
    pub opinion_probs: Vec<[f64; 2]>,
    /// `T × T`; row `t` holds the opinion attention weights for position `t`.
    pub attention: Vec<Vec<f64>>,
    /// THA scores per position over the cached window (empty at `t = 1`).
    pub tha_scores: Vec<Vec<f64>>,
}

impl SentenceOutput {
    pub fn len(&self) -> usize {
        self.aspect_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.aspect_probs.is_empty()
    }

    /// Arg-max aspect label per token; ties go to the earlier label.
    pub fn predicted_aspects(&self) -> Vec<AspectLabel> {
        self.aspect_probs
            .iter()
            .map(|p| {
                let best = (1..3).fold(0, |best, k| if p[k] > p[best] { k } else { best });
                AspectLabel::from_index(best).expect("index below 3")
            })
            .collect()
    }
}

/// Runs a sentence without recording gradients.
pub fn forward_sentence(
    params: &ModelParams,
    config: &ModelConfig,
    sentence: &Sentence,
    mode: Mode<'_>,
) -> Result<SentenceOutput> {
    let mut tape = Tape::detached();
    Ok(forward(&mut tape, params, config, &sentence.token_ids, mode)?.output())
}

/// A recorded forward pass: the tape with every parameter bound as a leaf.
pub struct RecordedPass {
    pub tape: Tape,
    pub trace: ForwardTrace,
}

pub fn forward_recorded(
    params: &ModelParams,
    config: &ModelConfig,
    sentence: &Sentence,
    mode: Mode<'_>,
) -> Result<RecordedPass> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, config)?;
    let trace = forward(&mut tape, &bound, config, &sentence.token_ids, mode)?;
    Ok(RecordedPass { tape, trace })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointLoss {
    pub total: f64,
    pub aspect: f64,
    pub opinion: f64,
}

fn check_lengths(n: usize, aspect: usize, opinion: usize) -> Result<()> {
    if aspect != n || opinion != n {
        return Err(Error::Data(format!(
            "sentence of length {n} has {aspect} aspect and {opinion} opinion labels"
        )));
    }
    Ok(())
}

fn floored(p: f64, what: &str, t: usize) -> f64 {
    // NaN must survive so divergence is reported rather than masked
    if p < PROB_FLOOR {
        log::warn!("{what} probability {p:e} at token {t} clamped to {PROB_FLOOR:e}");
        PROB_FLOOR
    } else {
        p
    }
}

/// `J = L_A + L_O`, each the mean token cross-entropy against the gold labels.
pub fn joint_loss(
    output: &SentenceOutput,
    gold_aspect: &[AspectLabel],
    gold_opinion: &[OpinionLabel],
) -> Result<JointLoss> {
    check_lengths(output.len(), gold_aspect.len(), gold_opinion.len())?;
    let n = output.len() as f64;
    let aspect = -output
        .aspect_probs
        .iter()
        .zip(gold_aspect)
        .enumerate()
        .map(|(t, (p, g))| floored(p[g.index()], "aspect", t).ln())
        .sum::<f64>()
        / n;
    let opinion = -output
        .opinion_probs
        .iter()
        .zip(gold_opinion)
        .enumerate()
        .map(|(t, (p, g))| floored(p[g.index()], "opinion", t).ln())
        .sum::<f64>()
        / n;
    Ok(JointLoss {
        total: aspect + opinion,
        aspect,
        opinion,
    })
}

/// The joint loss recorded on `tape`, ready for backpropagation.
pub struct RecordedLoss {
    pub total: Tensor,
    pub aspect: f64,
    pub opinion: f64,
}

pub fn joint_loss_recorded(
    tape: &mut Tape,
    trace: &ForwardTrace,
    gold_aspect: &[AspectLabel],
    gold_opinion: &[OpinionLabel],
) -> Result<RecordedLoss> {
    let n = trace.aspect_probs.len();
    check_lengths(n, gold_aspect.len(), gold_opinion.len())?;

    let mut cross_entropy =
        |probs: &[Tensor], gold: &mut dyn Iterator<Item = usize>, what: &str| {
            let mut logs = Vec::with_capacity(n);
            for (t, (p, g)) in probs.iter().zip(gold).enumerate() {
                let picked = tape.pick(p, g)?;
                floored(picked.values()[0], what, t);
                logs.push(tape.log(&picked, PROB_FLOOR)?);
            }
            let refs: Vec<&Tensor> = logs.iter().collect();
            let mean = tape.mean(&refs)?;
            tape.scale(&mean, -1.0)
        };
    let aspect = cross_entropy(
        &trace.aspect_probs,
        &mut gold_aspect.iter().map(|l| l.index()),
        "aspect",
    )?;
    let opinion = cross_entropy(
        &trace.opinion_probs,
        &mut gold_opinion.iter().map(|l| l.index()),
        "opinion",
    )?;
    let total = tape.add(&aspect, &opinion)?;
    Ok(RecordedLoss {
        aspect: aspect.values()[0],
        opinion: opinion.values()[0],
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Corpus, OpinionLexicon};
    use crate::tensor::bit_identical;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            dim_w: 6,
            dim_h_aspect: 5,
            dim_h_opinion: 4,
            history_window: 3,
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    fn setup(config: &ModelConfig) -> (Vocabulary, ModelParams, Sentence) {
        let tokens: Vec<String> = "the great pizza was served by rude staff"
            .split(' ')
            .map(String::from)
            .collect();
        let mut corpus = Corpus::new(vec![Sentence::from_tokens(tokens).unwrap()]);
        let vocab = Vocabulary::build(&corpus, []).unwrap();
        corpus.index(&vocab);
        corpus.apply_lexicon(&OpinionLexicon::from_words(["great", "rude"]));
        let emb = EmbeddingMatrix::random(vocab.len(), config.dim_w, 3);
        let params = init_model(config, &vocab, &emb).unwrap();
        (vocab, params, corpus.sentences.remove(0))
    }

    #[test]
    fn defaults_match_reported_hyperparameters() {
        let c = ModelConfig::default();
        assert_eq!((c.dim_w, c.dim_h_aspect, c.dim_h_opinion), (300, 100, 30));
        assert_eq!(c.history_window, 5);
        assert_eq!(c.dropout, 0.5);
        assert_eq!(c.learning_rate, 0.07);
    }

    #[test]
    fn config_text_roundtrip() {
        let c = ModelConfig {
            dropout: 0.3,
            seed: 99,
            use_stn: false,
            ..ModelConfig::default()
        };
        assert_eq!(ModelConfig::parse(&c.to_string()).unwrap(), c);
        assert!(ModelConfig::parse("bogus=1").is_err());
        assert!(ModelConfig::parse("dropout=1.0").is_err());
        assert!(ModelConfig::parse("dim_w").is_err());
    }

    #[test]
    fn init_zeroes_biases_and_bounds_weights() {
        let config = tiny_config();
        let (_, params, _) = setup(&config);
        for (name, t) in params.named() {
            if name.ends_with(".b") || name.ends_with("b_bi") {
                assert!(t.values().iter().all(|&v| v == 0.0), "{name}");
            }
            if name.starts_with("tha.") || name.starts_with("stn.") || name.ends_with("head.w") {
                assert!(t.values().iter().all(|&v| v > -0.2 && v < 0.2), "{name}");
            }
        }
        let bound = (6.0f64 / 11.0).sqrt();
        assert!(params
            .aspect_lstm
            .forward
            .w
            .values()
            .iter()
            .all(|v| v.abs() < bound));
    }

    #[test]
    fn init_is_seed_deterministic() {
        let config = tiny_config();
        let (_, a, _) = setup(&config);
        let (_, b, _) = setup(&config);
        for ((_, x), (_, y)) in a.named().into_iter().zip(b.named()) {
            assert!(bit_identical(x, y));
        }
        let (_, c, _) = setup(&ModelConfig { seed: 2, ..config });
        assert_ne!(a, c);
    }

    #[test]
    fn init_rejects_mismatched_embeddings() {
        let config = tiny_config();
        let (vocab, _, _) = setup(&config);
        let emb = EmbeddingMatrix::random(vocab.len(), 7, 0);
        assert!(matches!(
            init_model(&config, &vocab, &emb),
            Err(Error::Config(_))
        ));
        let emb = EmbeddingMatrix::random(vocab.len() + 1, 6, 0);
        assert!(matches!(
            init_model(&config, &vocab, &emb),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn output_shapes() {
        let config = tiny_config();
        let (_, params, sentence) = setup(&config);
        let out = forward_sentence(&params, &config, &sentence, Mode::Infer).unwrap();
        let t = sentence.len();
        assert_eq!(out.aspect_probs.len(), t);
        assert_eq!(out.opinion_probs.len(), t);
        assert_eq!(out.attention.len(), t);
        assert!(out.attention.iter().all(|row| row.len() == t));
        assert!(out.tha_scores[0].is_empty());
        assert_eq!(out.tha_scores[t - 1].len(), 3);
    }

    #[test]
    fn inference_is_deterministic() {
        let config = tiny_config();
        let (_, params, sentence) = setup(&config);
        let a = forward_sentence(&params, &config, &sentence, Mode::Infer).unwrap();
        let b = forward_sentence(&params, &config, &sentence, Mode::Infer).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn recorded_and_detached_outputs_agree_bitwise() {
        let config = tiny_config();
        let (_, params, sentence) = setup(&config);
        let plain = forward_sentence(&params, &config, &sentence, Mode::Infer).unwrap();
        let recorded = forward_recorded(&params, &config, &sentence, Mode::Infer).unwrap();
        assert_eq!(plain, recorded.trace.output());
    }

    #[test]
    fn ablation_changes_predictions() {
        let config = tiny_config();
        let (_, params, sentence) = setup(&config);
        let full = forward_sentence(&params, &config, &sentence, Mode::Infer).unwrap();
        let basic = ModelConfig {
            use_tha: false,
            use_stn: false,
            ..config
        };
        let reduced = forward_sentence(&params, &basic, &sentence, Mode::Infer).unwrap();
        assert_ne!(full.aspect_probs, reduced.aspect_probs);
    }

    #[test]
    fn out_of_range_token_is_data_error() {
        let config = tiny_config();
        let (vocab, params, mut sentence) = setup(&config);
        sentence.token_ids[2] = vocab.len();
        assert!(matches!(
            forward_sentence(&params, &config, &sentence, Mode::Infer),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn train_mode_dropout_changes_output() {
        let config = ModelConfig {
            dropout: 0.5,
            ..tiny_config()
        };
        let (_, params, sentence) = setup(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let train = forward_sentence(&params, &config, &sentence, Mode::Train(&mut rng)).unwrap();
        let infer = forward_sentence(&params, &config, &sentence, Mode::Infer).unwrap();
        assert_ne!(train, infer);
    }

    #[test]
    fn inverted_dropout_preserves_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::vector(vec![1.0; 200_000]);
        let mut tape = Tape::detached();
        let y = Mode::Train(&mut rng).dropout(&mut tape, &x, 0.5).unwrap();
        let mean = y.values().iter().sum::<f64>() / y.len() as f64;
        assert!((mean - 1.0).abs() < 0.01, "{mean}");
        assert!(y.values().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    fn uniform_output(t: usize) -> SentenceOutput {
        SentenceOutput {
            aspect_probs: vec![[1.0 / 3.0; 3]; t],
            opinion_probs: vec![[0.5; 2]; t],
            attention: vec![vec![1.0 / t as f64; t]; t],
            tha_scores: vec![vec![]; t],
        }
    }

    #[test]
    fn loss_of_uniform_predictions() {
        let out = uniform_output(4);
        let loss = joint_loss(&out, &[AspectLabel::O; 4], &[OpinionLabel::Op; 4]).unwrap();
        assert!((loss.aspect - 3f64.ln()).abs() < 1e-12);
        assert!((loss.opinion - 2f64.ln()).abs() < 1e-12);
        assert!((loss.total - 6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_of_perfect_predictions_is_zero() {
        let mut out = uniform_output(2);
        out.aspect_probs = vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        out.opinion_probs = vec![[0.0, 1.0], [0.0, 1.0]];
        let loss = joint_loss(
            &out,
            &[AspectLabel::B, AspectLabel::I],
            &[OpinionLabel::O; 2],
        )
        .unwrap();
        assert_eq!(loss.total, 0.0);
    }

    #[test]
    fn zero_gold_probability_is_floored() {
        let mut out = uniform_output(1);
        out.aspect_probs = vec![[0.0, 0.0, 1.0]];
        let loss = joint_loss(&out, &[AspectLabel::B], &[OpinionLabel::O]).unwrap();
        assert!((loss.aspect - -(PROB_FLOOR.ln())).abs() < 1e-9);
    }

    #[test]
    fn recorded_loss_matches_direct_cross_entropy() {
        let config = tiny_config();
        let (_, params, mut sentence) = setup(&config);
        sentence.aspect_labels = vec![
            AspectLabel::O,
            AspectLabel::O,
            AspectLabel::B,
            AspectLabel::O,
            AspectLabel::O,
            AspectLabel::O,
            AspectLabel::O,
            AspectLabel::B,
        ];
        let mut pass = forward_recorded(&params, &config, &sentence, Mode::Infer).unwrap();
        let recorded = joint_loss_recorded(
            &mut pass.tape,
            &pass.trace,
            &sentence.aspect_labels,
            &sentence.opinion_labels,
        )
        .unwrap();

        // straight-line oracle over the plain probabilities
        let out = pass.trace.output();
        let t = out.len() as f64;
        let la: f64 = -out
            .aspect_probs
            .iter()
            .zip(&sentence.aspect_labels)
            .map(|(p, g)| p[g.index()].ln())
            .sum::<f64>()
            / t;
        let lo: f64 = -out
            .opinion_probs
            .iter()
            .zip(&sentence.opinion_labels)
            .map(|(p, g)| p[g.index()].ln())
            .sum::<f64>()
            / t;
        assert!((recorded.total.values()[0] - (la + lo)).abs() < 1e-12);
        let direct = joint_loss(&out, &sentence.aspect_labels, &sentence.opinion_labels).unwrap();
        assert!((direct.total - (la + lo)).abs() < 1e-12);
    }

    #[test]
    fn loss_rejects_label_length_mismatch() {
        let out = uniform_output(3);
        assert!(joint_loss(&out, &[AspectLabel::O; 2], &[OpinionLabel::O; 3]).is_err());
    }
}
