//! Aspect-conditioned transformation of opinion states and bilinear attention
//! over the transformed sequence.

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct StnParams {
    /// Maps the history-aware aspect state into opinion space, `2·dim^O_h × 2·dim^A_h`.
    pub w4: Tensor,
    /// Square over opinion space, `2·dim^O_h × 2·dim^O_h`.
    pub w5: Tensor,
    /// Bilinear scorer, `2·dim^A_h × 2·dim^O_h`.
    pub w_bi: Tensor,
    /// Scalar bias added to every raw score.
    pub b_bi: Tensor,
}

impl StnParams {
    pub fn new(w4: Tensor, w5: Tensor, w_bi: Tensor, b_bi: Tensor) -> Result<StnParams> {
        let Shape::Matrix(aspect_dim, opinion_dim) = w_bi.shape() else {
            return Err(Error::dim("stn.w_bi", w_bi.shape(), Shape::Matrix(0, 0)));
        };
        let expect = [
            ("stn.w4", &w4, Shape::Matrix(opinion_dim, aspect_dim)),
            ("stn.w5", &w5, Shape::Matrix(opinion_dim, opinion_dim)),
            ("stn.b_bi", &b_bi, Shape::Scalar),
        ];
        for (name, t, shape) in expect {
            if t.shape() != shape {
                return Err(Error::dim(name, t.shape(), shape));
            }
        }
        Ok(StnParams { w4, w5, w_bi, b_bi })
    }

    pub fn aspect_dim(&self) -> usize {
        match self.w_bi.shape() {
            Shape::Matrix(r, _) => r,
            _ => 0,
        }
    }

    pub fn opinion_dim(&self) -> usize {
        match self.w_bi.shape() {
            Shape::Matrix(_, c) => c,
            _ => 0,
        }
    }
}

/// `W5 h^O_i` for every opinion state; independent of the aspect position, so
/// a forward pass computes it once per sentence.
pub fn project_opinions(
    tape: &mut Tape,
    opinions: &[Tensor],
    params: &StnParams,
) -> Result<Vec<Tensor>> {
    let width = Shape::Vector(params.opinion_dim());
    opinions
        .iter()
        .map(|h| {
            if h.shape() != width {
                return Err(Error::dim("selective_transform", h.shape(), width));
            }
            tape.matvec(&params.w5, h)
        })
        .collect()
}

/// `Ĥ_{i,t} = h^O_i + ReLU(W4 h̃^A_t + W5 h^O_i)` for every `i`.
pub fn selective_transform(
    tape: &mut Tape,
    aspect: &Tensor,
    opinions: &[Tensor],
    params: &StnParams,
) -> Result<Vec<Tensor>> {
    let projected = project_opinions(tape, opinions, params)?;
    transform_projected(tape, aspect, opinions, &projected, params)
}

/// [`selective_transform`] with precomputed `W5 h^O_i` terms.
pub fn transform_projected(
    tape: &mut Tape,
    aspect: &Tensor,
    opinions: &[Tensor],
    projected: &[Tensor],
    params: &StnParams,
) -> Result<Vec<Tensor>> {
    let width = Shape::Vector(params.aspect_dim());
    if aspect.shape() != width {
        return Err(Error::dim("selective_transform", aspect.shape(), width));
    }
    let filter = tape.matvec(&params.w4, aspect)?;
    opinions
        .iter()
        .zip(projected)
        .map(|(h, p)| {
            let pre = tape.add(&filter, p)?;
            let gated = tape.relu(&pre)?;
            tape.add(h, &gated)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Attention {
    /// `tanh(h̃ W_bi Ĥ_i + b_bi)` per position.
    pub raw_scores: Tensor,
    /// Softmax of the raw scores over positions.
    pub weights: Tensor,
    /// `Σ_i w_i Ĥ_i`.
    pub summary: Tensor,
}

/// Scores every opinion vector against the aspect state and returns the
/// attention-weighted summary.
pub fn bilinear_attention(
    tape: &mut Tape,
    aspect: &Tensor,
    opinions: &[Tensor],
    params: &StnParams,
) -> Result<Attention> {
    if opinions.is_empty() {
        return Err(Error::usage("attention over an empty sequence"));
    }
    let width = Shape::Vector(params.aspect_dim());
    if aspect.shape() != width {
        return Err(Error::dim("bilinear_attention", aspect.shape(), width));
    }
    let query = tape.vecmat(aspect, &params.w_bi)?;
    let mut scores = Vec::with_capacity(opinions.len());
    for h in opinions {
        let s = tape.dot(&query, h)?;
        let s = tape.add(&s, &params.b_bi)?;
        scores.push(tape.tanh(&s)?);
    }
    let refs: Vec<&Tensor> = scores.iter().collect();
    let raw_scores = tape.concat(&refs)?;
    let weights = tape.softmax(&raw_scores)?;
    let opinion_refs: Vec<&Tensor> = opinions.iter().collect();
    let summary = tape.weighted_sum(&weights, &opinion_refs)?;
    Ok(Attention {
        raw_scores,
        weights,
        summary,
    })
}
