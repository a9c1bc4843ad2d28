//! LSTM cell and the bidirectional sequence encoder.
//!
//! Gate pre-activations are stored fused as `[input, forget, candidate,
//! output]` blocks of width `H`:
//!
//! ```text
//! i = sigmoid(x W_i + h U_i + b_i)      f = sigmoid(x W_f + h U_f + b_f)
//! g = tanh(x W_g + h U_g + b_g)         o = sigmoid(x W_o + h U_o + b_o)
//! c' = f * c + i * g                     h' = o * tanh(c')
//! ```

use rand_chacha::ChaCha8Rng;

use super::{uniform_fan_in, ParameterStore};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, Tape, Tensor, Var};

/// Initial value of the forget-gate bias block.
pub const FORGET_BIAS_INIT: f64 = 1.0;

#[derive(Clone, Debug)]
pub struct LstmParams {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmParams {
    pub fn register(
        store: &mut ParameterStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let w_ih = store.register(
            &format!("{prefix}.w_ih"),
            uniform_fan_in(&[input, 4 * hidden], input, rng),
            true,
        )?;
        let w_hh = store.register(
            &format!("{prefix}.w_hh"),
            uniform_fan_in(&[hidden, 4 * hidden], hidden, rng),
            true,
        )?;
        let mut bias = Tensor::zeros(&[4 * hidden]);
        bias.values_mut()[hidden..2 * hidden].fill(FORGET_BIAS_INIT);
        let bias = store.register(&format!("{prefix}.bias"), bias, true)?;
        Ok(Self {
            w_ih,
            w_hh,
            bias,
            input,
            hidden,
        })
    }

    pub fn bind(store: &ParameterStore, prefix: &str) -> Result<Self> {
        let w_ih = store.id(&format!("{prefix}.w_ih"))?;
        let w_hh = store.id(&format!("{prefix}.w_hh"))?;
        let bias = store.id(&format!("{prefix}.bias"))?;
        let shape = store.tensor(w_ih).shape();
        Ok(Self {
            w_ih,
            w_hh,
            bias,
            input: shape[0],
            hidden: shape[1] / 4,
        })
    }
}

/// Applies the gate nonlinearities to fused pre-activations `[B, 4H]`.
fn gate_update(tape: &mut Tape, hidden: usize, gates: Var, c: Option<Var>) -> Result<(Var, Var)> {
    let i = tape.narrow(gates, 1, 0, hidden)?;
    let i = tape.sigmoid(i);
    let g = tape.narrow(gates, 1, 2 * hidden, hidden)?;
    let g = tape.tanh(g);
    let o = tape.narrow(gates, 1, 3 * hidden, hidden)?;
    let o = tape.sigmoid(o);
    let ig = tape.mul(i, g)?;
    let c_next = match c {
        Some(c) => {
            let f = tape.narrow(gates, 1, hidden, hidden)?;
            let f = tape.sigmoid(f);
            let fc = tape.mul(f, c)?;
            tape.add(fc, ig)?
        }
        None => ig,
    };
    let squashed = tape.tanh(c_next);
    let h_next = tape.mul(o, squashed)?;
    Ok((h_next, c_next))
}

fn as_rows(tape: &mut Tape, v: Var) -> Result<(Var, bool)> {
    let shape = tape.shape(v).to_vec();
    match shape.len() {
        1 => Ok((tape.reshape(v, &[1, shape[0]])?, true)),
        2 => Ok((v, false)),
        _ => Err(Error::shape("lstm input", &shape, &[0, 0])),
    }
}

/// One LSTM step. Accepts vectors (`[d]`, `[H]`) or row batches.
pub fn lstm_step(
    store: &ParameterStore,
    tape: &mut Tape,
    p: &LstmParams,
    x: Var,
    h: Var,
    c: Var,
) -> Result<(Var, Var)> {
    let (x, vector) = as_rows(tape, x)?;
    let (h, _) = as_rows(tape, h)?;
    let (c, _) = as_rows(tape, c)?;
    if tape.shape(x)[1] != p.input || tape.shape(h)[1] != p.hidden || tape.shape(c) != tape.shape(h)
    {
        return Err(Error::shape("lstm_step", tape.shape(x), tape.shape(h)));
    }
    let w_ih = store.var(tape, p.w_ih);
    let w_hh = store.var(tape, p.w_hh);
    let b = store.var(tape, p.bias);
    let xi = tape.matmul(x, w_ih)?;
    let hh = tape.matmul(h, w_hh)?;
    let sum = tape.add(xi, hh)?;
    let gates = tape.add_bias(sum, b)?;
    let (h2, c2) = gate_update(tape, p.hidden, gates, Some(c))?;
    if vector {
        let h2 = tape.reshape(h2, &[p.hidden])?;
        let c2 = tape.reshape(c2, &[p.hidden])?;
        return Ok((h2, c2));
    }
    Ok((h2, c2))
}

/// Runs an LSTM from zero state over `steps` time steps of a batch.
///
/// `inputs` is time-major `[steps * batch, d]`: rows `t*batch .. (t+1)*batch`
/// hold step `t`. With `reverse` the sequence is consumed from the last step
/// to the first. Returns the final hidden state `[batch, H]`.
pub fn run_lstm(
    store: &ParameterStore,
    tape: &mut Tape,
    p: &LstmParams,
    inputs: Var,
    steps: usize,
    batch: usize,
    reverse: bool,
) -> Result<Var> {
    if steps == 0 || batch == 0 {
        return Err(Error::EmptySequence("run_lstm"));
    }
    let shape = tape.shape(inputs).to_vec();
    if shape.len() != 2 || shape[0] != steps * batch || shape[1] != p.input {
        return Err(Error::shape("run_lstm", &shape, &[steps * batch, p.input]));
    }
    let w_ih = store.var(tape, p.w_ih);
    let b = store.var(tape, p.bias);
    let projected = tape.matmul(inputs, w_ih)?;
    let projected = tape.add_bias(projected, b)?;
    run_lstm_projected(store, tape, p, projected, steps, batch, reverse)
}

/// Like [`run_lstm`], but takes the input projection `x W_ih + b` already
/// computed as a time-major `[steps * batch, 4H]` node.
pub fn run_lstm_projected(
    store: &ParameterStore,
    tape: &mut Tape,
    p: &LstmParams,
    projected: Var,
    steps: usize,
    batch: usize,
    reverse: bool,
) -> Result<Var> {
    if steps == 0 || batch == 0 {
        return Err(Error::EmptySequence("run_lstm"));
    }
    let shape = tape.shape(projected).to_vec();
    if shape.len() != 2 || shape[0] != steps * batch || shape[1] != 4 * p.hidden {
        return Err(Error::shape(
            "run_lstm",
            &shape,
            &[steps * batch, 4 * p.hidden],
        ));
    }
    let w_hh = store.var(tape, p.w_hh);
    tape.lstm_sequence(projected, w_hh, steps, batch, reverse)
}

/// Encodes a batch of equal-length sequences; returns `[batch, 2H]` with the
/// forward LSTM's last state followed by the backward LSTM's first state.
pub fn bilstm_encode_batch(
    store: &ParameterStore,
    tape: &mut Tape,
    fwd: &LstmParams,
    bwd: &LstmParams,
    inputs: Var,
    steps: usize,
    batch: usize,
) -> Result<Var> {
    let h_fwd = run_lstm(store, tape, fwd, inputs, steps, batch, false)?;
    let h_bwd = run_lstm(store, tape, bwd, inputs, steps, batch, true)?;
    tape.concat(&[h_fwd, h_bwd], 1)
}

/// Encodes one sequence `[l, d]` into a `[2H]` vector.
pub fn bilstm_encode(
    store: &ParameterStore,
    tape: &mut Tape,
    fwd: &LstmParams,
    bwd: &LstmParams,
    seq: Var,
) -> Result<Var> {
    let shape = tape.shape(seq).to_vec();
    if shape.len() != 2 {
        return Err(Error::shape("bilstm_encode", &shape, &[0, fwd.input]));
    }
    let out = bilstm_encode_batch(store, tape, fwd, bwd, seq, shape[0], 1)?;
    tape.reshape(out, &[2 * fwd.hidden])
}
