//! LSTM cell and bidirectional LSTM encoder.
//!
//! Stacked parameters hold the four gate blocks in the order
//! input `i`, forget `f`, candidate `ĉ`, output `o`.

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    /// Input weights, `4·dim_h × dim_in`.
    pub w: Tensor,
    /// Recurrent weights, `4·dim_h × dim_h`.
    pub u: Tensor,
    /// Bias, `4·dim_h`.
    pub b: Tensor,
}

impl LstmParams {
    pub fn new(w: Tensor, u: Tensor, b: Tensor) -> Result<LstmParams> {
        let Shape::Matrix(rows, _) = w.shape() else {
            return Err(Error::dim("lstm.w", w.shape(), Shape::Matrix(0, 0)));
        };
        if rows % 4 != 0 || rows == 0 {
            return Err(Error::Config(format!(
                "LSTM input weights need 4·dim_h rows, got {rows}"
            )));
        }
        let hidden = rows / 4;
        if u.shape() != Shape::Matrix(rows, hidden) {
            return Err(Error::dim("lstm.u", u.shape(), Shape::Matrix(rows, hidden)));
        }
        if b.shape() != Shape::Vector(rows) {
            return Err(Error::dim("lstm.b", b.shape(), Shape::Vector(rows)));
        }
        Ok(LstmParams { w, u, b })
    }

    pub fn dim_hidden(&self) -> usize {
        self.b.len() / 4
    }

    pub fn dim_input(&self) -> usize {
        match self.w.shape() {
            Shape::Matrix(_, c) => c,
            _ => 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl LstmState {
    pub fn zeros(dim_h: usize) -> LstmState {
        LstmState {
            h: Tensor::zeros(Shape::Vector(dim_h)),
            c: Tensor::zeros(Shape::Vector(dim_h)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiLstmParams {
    pub forward: LstmParams,
    pub backward: LstmParams,
}

impl BiLstmParams {
    pub fn new(forward: LstmParams, backward: LstmParams) -> Result<BiLstmParams> {
        if forward.w.shape() != backward.w.shape() {
            return Err(Error::dim("bilstm", forward.w.shape(), backward.w.shape()));
        }
        Ok(BiLstmParams { forward, backward })
    }

    /// Width of each encoded token, `2·dim_h`.
    pub fn output_dim(&self) -> usize {
        2 * self.forward.dim_hidden()
    }
}

/// One LSTM step:
/// `[i f ĉ o] = [σ σ tanh σ](W x + U h_prev + b)`,
/// `c = i ⊙ ĉ + c_prev ⊙ f`, `h = tanh(c) ⊙ o`.
pub fn lstm_step(
    tape: &mut Tape,
    x: &Tensor,
    state: &LstmState,
    params: &LstmParams,
) -> Result<LstmState> {
    let dim_h = params.dim_hidden();
    if x.shape() != Shape::Vector(params.dim_input()) {
        return Err(Error::dim(
            "lstm_step",
            x.shape(),
            Shape::Vector(params.dim_input()),
        ));
    }
    if state.h.shape() != Shape::Vector(dim_h) || state.c.shape() != Shape::Vector(dim_h) {
        return Err(Error::dim(
            "lstm_step",
            state.h.shape(),
            Shape::Vector(dim_h),
        ));
    }
    let wx = tape.matvec(&params.w, x)?;
    let uh = tape.matvec(&params.u, &state.h)?;
    let pre = tape.add(&wx, &uh)?;
    let pre = tape.add(&pre, &params.b)?;

    let gate_i = tape.slice(&pre, 0, dim_h)?;
    let gate_f = tape.slice(&pre, dim_h, dim_h)?;
    let gate_c = tape.slice(&pre, 2 * dim_h, dim_h)?;
    let gate_o = tape.slice(&pre, 3 * dim_h, dim_h)?;
    let i = tape.sigmoid(&gate_i)?;
    let f = tape.sigmoid(&gate_f)?;
    let candidate = tape.tanh(&gate_c)?;
    let o = tape.sigmoid(&gate_o)?;

    let written = tape.mul(&i, &candidate)?;
    let kept = tape.mul(&state.c, &f)?;
    let c = tape.add(&written, &kept)?;
    let squashed = tape.tanh(&c)?;
    let h = tape.mul(&squashed, &o)?;
    Ok(LstmState { h, c })
}

/// Runs one direction over `inputs` from zero state, returning hidden states
/// in input order.
fn run_direction(
    tape: &mut Tape,
    inputs: &[Tensor],
    params: &LstmParams,
    reverse: bool,
) -> Result<Vec<Tensor>> {
    let mut state = LstmState::zeros(params.dim_hidden());
    let mut hidden = vec![None; inputs.len()];
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..inputs.len()).rev())
    } else {
        Box::new(0..inputs.len())
    };
    for t in order {
        state = lstm_step(tape, &inputs[t], &state, params)?;
        hidden[t] = Some(state.h.clone());
    }
    Ok(hidden
        .into_iter()
        .map(|h| h.expect("every step visited"))
        .collect())
}

/// Bidirectional encoding: output `t` is `[forward h_t ; backward h_t]`.
pub fn bilstm_encode(
    tape: &mut Tape,
    inputs: &[Tensor],
    params: &BiLstmParams,
) -> Result<Vec<Tensor>> {
    if inputs.is_empty() {
        return Err(Error::usage("cannot encode an empty sequence"));
    }
    let fwd = run_direction(tape, inputs, &params.forward, false)?;
    let bwd = run_direction(tape, inputs, &params.backward, true)?;
    fwd.iter()
        .zip(&bwd)
        .map(|(f, b)| tape.concat(&[f, b]))
        .collect()
}
