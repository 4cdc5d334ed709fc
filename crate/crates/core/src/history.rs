//! Truncated history attention over the most recent aspect representations.
//!
//! At step `t` each cached pair `(h_i, h̃_i)` is scored with
//! `a_i = vᵀ tanh(W1 h_i + W2 h_t + W3 h̃_i)`; the normalised scores weight the
//! cached history-aware states, and the result is added back residually:
//! `h̃_t = h_t + ReLU(Σ_i s_i h̃_i)`.

use std::collections::VecDeque;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ThaParams {
    /// Applied to cached raw aspect states.
    pub w1: Tensor,
    /// Applied to the current aspect state.
    pub w2: Tensor,
    /// Applied to cached history-aware states.
    pub w3: Tensor,
    pub v: Tensor,
}

impl ThaParams {
    pub fn new(w1: Tensor, w2: Tensor, w3: Tensor, v: Tensor) -> Result<ThaParams> {
        let d = v.len();
        let square = Shape::Matrix(d, d);
        if v.shape() != Shape::Vector(d) {
            return Err(Error::dim("tha.v", v.shape(), Shape::Vector(d)));
        }
        for (name, w) in [("tha.w1", &w1), ("tha.w2", &w2), ("tha.w3", &w3)] {
            if w.shape() != square {
                return Err(Error::dim(name, w.shape(), square));
            }
        }
        Ok(ThaParams { w1, w2, w3, v })
    }

    pub fn dim(&self) -> usize {
        self.v.len()
    }
}

#[derive(Clone, Debug)]
pub struct HistoryEntry {
    /// Raw aspect state `h_i`.
    pub raw: Tensor,
    /// History-aware state `h̃_i`.
    pub aware: Tensor,
    /// `W1 h_i + W3 h̃_i`, filled on first use.
    projected: Option<Tensor>,
}

/// FIFO window over the last `capacity` aspect steps, oldest first.
#[derive(Clone, Debug)]
pub struct HistoryCache {
    capacity: usize,
    entries: VecDeque<HistoryEntry>,
}

impl HistoryCache {
    pub fn new(capacity: usize) -> HistoryCache {
        HistoryCache {
            capacity,
            entries: VecDeque::with_capacity(capacity + 1),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &HistoryEntry> {
        self.entries.iter()
    }

    /// Appends a pair, evicting the oldest entry once the window is full.
    pub fn push(&mut self, raw: Tensor, aware: Tensor) {
        if self.capacity == 0 {
            return;
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(HistoryEntry {
            raw,
            aware,
            projected: None,
        });
    }
}

#[derive(Clone, Debug)]
pub struct ThaOutput {
    /// History-aware representation `h̃_t`.
    pub aware: Tensor,
    /// Normalised scores over the cache, oldest first; `None` for an empty cache.
    pub scores: Option<Tensor>,
}

/// Computes `h̃_t` for the current aspect state from the cached history.
/// With an empty cache `h̃_t = h_t`.
pub fn tha_step(
    tape: &mut Tape,
    current: &Tensor,
    cache: &mut HistoryCache,
    params: &ThaParams,
) -> Result<ThaOutput> {
    let width = Shape::Vector(params.dim());
    if current.shape() != width {
        return Err(Error::dim("tha_step", current.shape(), width));
    }
    if cache.is_empty() {
        return Ok(ThaOutput {
            aware: current.clone(),
            scores: None,
        });
    }

    for entry in cache.entries.iter_mut() {
        if entry.raw.shape() != width || entry.aware.shape() != width {
            return Err(Error::dim("tha_step", entry.raw.shape(), width));
        }
        if entry.projected.is_none() {
            let a = tape.matvec(&params.w1, &entry.raw)?;
            let b = tape.matvec(&params.w3, &entry.aware)?;
            entry.projected = Some(tape.add(&a, &b)?);
        }
    }

    let query = tape.matvec(&params.w2, current)?;
    let mut logits = Vec::with_capacity(cache.len());
    for entry in cache.entries.iter() {
        let projected = entry.projected.as_ref().expect("filled above");
        let hidden = tape.add(projected, &query)?;
        let hidden = tape.tanh(&hidden)?;
        logits.push(tape.dot(&params.v, &hidden)?);
    }
    let logit_refs: Vec<&Tensor> = logits.iter().collect();
    let logits = tape.concat(&logit_refs)?;
    let scores = tape.softmax(&logits)?;

    let history: Vec<&Tensor> = cache.entries.iter().map(|e| &e.aware).collect();
    let summary = tape.weighted_sum(&scores, &history)?;
    let gated = tape.relu(&summary)?;
    let aware = tape.add(current, &gated)?;
    Ok(ThaOutput {
        aware,
        scores: Some(scores),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
        Tensor::vector((0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn rand_params(rng: &mut ChaCha8Rng, d: usize) -> ThaParams {
        let mut mat = || {
            Tensor::matrix(
                d,
                d,
                (0..d * d).map(|_| rng.random_range(-0.5..0.5)).collect(),
            )
            .unwrap()
        };
        let (w1, w2, w3) = (mat(), mat(), mat());
        ThaParams::new(w1, w2, w3, rand_vec(rng, d)).unwrap()
    }

    #[test]
    fn push_evicts_oldest() {
        let mut cache = HistoryCache::new(5);
        cache.push(Tensor::vector(vec![0.0]), Tensor::vector(vec![0.0]));
        assert_eq!(cache.len(), 1);
        for i in 1..=7 {
            cache.push(
                Tensor::vector(vec![i as f64]),
                Tensor::vector(vec![i as f64]),
            );
        }
        let kept: Vec<f64> = cache.entries().map(|e| e.raw.values()[0]).collect();
        assert_eq!(kept, vec![3.0, 4.0, 5.0, 6.0, 7.0]);
        assert_eq!(cache.len(), 5);
    }

    #[test]
    fn empty_cache_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = rand_params(&mut rng, 4);
        let h = rand_vec(&mut rng, 4);
        let out = tha_step(&mut Tape::new(), &h, &mut HistoryCache::new(5), &params).unwrap();
        assert_eq!(out.aware, h);
        assert!(out.scores.is_none());
    }

    #[test]
    fn singleton_cache_adds_relu_of_previous() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = rand_params(&mut rng, 4);
        let (h_prev, aware_prev, h) = (
            rand_vec(&mut rng, 4),
            rand_vec(&mut rng, 4),
            rand_vec(&mut rng, 4),
        );
        let mut cache = HistoryCache::new(5);
        cache.push(h_prev, aware_prev.clone());
        let out = tha_step(&mut Tape::new(), &h, &mut cache, &params).unwrap();
        assert_eq!(out.scores.unwrap().values(), &[1.0]);
        for ((o, x), p) in out
            .aware
            .values()
            .iter()
            .zip(h.values())
            .zip(aware_prev.values())
        {
            assert_eq!(*o, x + p.max(0.0));
        }
    }

    #[test]
    fn attention_window_is_truncated() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = rand_params(&mut rng, 3);
        let mut cache = HistoryCache::new(5);
        let mut tape = Tape::detached();
        let mut last = None;
        for _ in 0..8 {
            let h = rand_vec(&mut rng, 3);
            let out = tha_step(&mut tape, &h, &mut cache, &params).unwrap();
            cache.push(h, out.aware.clone());
            last = Some(out);
        }
        // step 8 attends to steps 3..=7
        assert_eq!(last.unwrap().scores.unwrap().len(), 5);
    }

    #[test]
    fn scores_normalised_and_residual_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = rand_params(&mut rng, 6);
        let mut cache = HistoryCache::new(3);
        let mut tape = Tape::detached();
        for _ in 0..10 {
            let h = rand_vec(&mut rng, 6);
            let out = tha_step(&mut tape, &h, &mut cache, &params).unwrap();
            if let Some(s) = &out.scores {
                assert!(s.values().iter().all(|&x| x >= 0.0));
                assert!((s.values().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            for (a, x) in out.aware.values().iter().zip(h.values()) {
                assert!(a >= x);
            }
            cache.push(h, out.aware);
        }
    }

    #[test]
    fn wrong_width_is_dimension_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = rand_params(&mut rng, 4);
        let h = rand_vec(&mut rng, 3);
        assert!(matches!(
            tha_step(&mut Tape::new(), &h, &mut HistoryCache::new(2), &params),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn gradients_flow_through_cached_history() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = rand_params(&mut rng, 3);
        let states: Vec<Tensor> = (0..6).map(|_| rand_vec(&mut rng, 3)).collect();
        let named = vec![
            ("w1".to_string(), params.w1.clone()),
            ("w2".to_string(), params.w2.clone()),
            ("w3".to_string(), params.w3.clone()),
            ("v".to_string(), params.v.clone()),
        ];
        let report = crate::autodiff::grad_check(
            |tape, p| {
                let params =
                    ThaParams::new(p[0].clone(), p[1].clone(), p[2].clone(), p[3].clone())?;
                let mut cache = HistoryCache::new(3);
                let mut outs = Vec::new();
                for h in &states {
                    let out = tha_step(tape, h, &mut cache, &params)?;
                    cache.push(h.clone(), out.aware.clone());
                    outs.push(out.aware);
                }
                let refs: Vec<&Tensor> = outs.iter().collect();
                let all = tape.concat(&refs)?;
                let sq = tape.mul(&all, &all)?;
                tape.sum(&sq)
            },
            &named,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
