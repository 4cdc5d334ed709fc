//! Per-sentence SGD over the joint loss, with best-epoch selection on a dev set.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::model::{forward_recorded, joint_loss_recorded, Mode, ModelConfig, ModelParams};

/// Keeps the training stream apart from the stream used for initialisation.
const TRAIN_STREAM: u64 = 0x5eed_7a11;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based epoch number.
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_aspect_loss: f64,
    pub mean_opinion_loss: f64,
    /// Aspect chunk F1 on the dev corpus, when one was given.
    pub dev_f1: Option<f64>,
}

/// One pass over `corpus` in a shuffled order drawn from `rng`, updating
/// `params` after every sentence. Dropout masks come from the same generator.
pub fn sgd_epoch(
    params: &mut ModelParams,
    config: &ModelConfig,
    corpus: &Corpus,
    rng: &mut ChaCha8Rng,
) -> Result<EpochMetrics> {
    if corpus.is_empty() {
        return Err(Error::usage("cannot train on an empty corpus"));
    }
    let lr = config.learning_rate;
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(Error::Config(format!("invalid learning rate {lr}")));
    }

    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(rng);

    let (mut total, mut aspect, mut opinion) = (0.0, 0.0, 0.0);
    for &index in &order {
        let sentence = &corpus.sentences[index];
        let mut pass = forward_recorded(params, config, sentence, Mode::Train(rng))?;
        let loss = joint_loss_recorded(
            &mut pass.tape,
            &pass.trace,
            &sentence.aspect_labels,
            &sentence.opinion_labels,
        )?;
        let value = loss.total.item()?;
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss {value} on sentence {} (\"{}\")",
                index + 1,
                sentence.tokens.join(" ")
            )));
        }
        total += value;
        aspect += loss.aspect;
        opinion += loss.opinion;

        if lr > 0.0 {
            let grads = pass.tape.backward(&loss.total)?;
            params.apply_gradients(&grads, lr)?;
        }
    }

    let n = corpus.len() as f64;
    Ok(EpochMetrics {
        epoch: 0,
        mean_loss: total / n,
        mean_aspect_loss: aspect / n,
        mean_opinion_loss: opinion / n,
        dev_f1: None,
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the best dev epoch, or the last epoch without a dev set.
    pub params: ModelParams,
    pub history: Vec<EpochMetrics>,
    pub best_epoch: usize,
}

/// Runs `config.epochs` epochs from `initial`. With a dev corpus the parameters
/// of the epoch with the highest dev aspect F1 are kept (earliest on ties).
/// `on_epoch` sees each epoch's metrics as they arrive.
pub fn train(
    initial: ModelParams,
    config: &ModelConfig,
    corpus: &Corpus,
    dev: Option<&Corpus>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ TRAIN_STREAM);
    let mut params = initial;
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ModelParams)> = None;

    for epoch in 1..=config.epochs {
        let mut metrics = sgd_epoch(&mut params, config, corpus, &mut rng)?;
        metrics.epoch = epoch;
        if let Some(dev) = dev {
            let f1 = evaluate(&params, config, dev)?.report.f1;
            metrics.dev_f1 = Some(f1);
            if best.as_ref().is_none_or(|(b, _, _)| f1 > *b) {
                best = Some((f1, epoch, params.clone()));
            }
        }
        log::info!(
            "epoch {epoch}: loss {:.6} (aspect {:.6}, opinion {:.6}){}",
            metrics.mean_loss,
            metrics.mean_aspect_loss,
            metrics.mean_opinion_loss,
            metrics
                .dev_f1
                .map(|f| format!(", dev F1 {f:.4}"))
                .unwrap_or_default()
        );
        on_epoch(&metrics);
        history.push(metrics);
    }

    let (params, best_epoch) = match best {
        Some((_, epoch, params)) => (params, epoch),
        None => (params, config.epochs),
    };
    Ok(TrainOutcome {
        params,
        history,
        best_epoch,
    })
}
