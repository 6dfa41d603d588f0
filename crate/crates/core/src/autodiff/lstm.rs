use super::graph::{Graph, Var};
use crate::error::{config_err, Result};

/// Graph handles for one LSTM layer: `w_ih: [4h×d]`, `w_hh: [4h×h]`, `bias: [4h]`.
///
/// Gate blocks are stacked in the order input, forget, candidate, output.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
}

/// One LSTM step from `x`, `(h, c)`.
pub fn lstm_cell(g: &mut Graph, x: Var, h: Var, c: Var, p: LstmVars) -> Result<(Var, Var)> {
    let gates_in = g.linear(x, p.w_ih, Some(p.bias))?;
    lstm_cell_from_gates(g, gates_in, h, c, p.w_hh)
}

/// LSTM step where the input contribution `x·w_ihᵀ + bias` is already computed.
///
/// Lets callers hoist the projection of inputs that repeat across steps.
pub fn lstm_cell_from_gates(g: &mut Graph, gates_in: Var, h: Var, c: Var, w_hh: Var) -> Result<(Var, Var)> {
    let hidden = *g.value(h).shape().last().unwrap_or(&0);
    let four_h = *g.value(gates_in).shape().last().unwrap_or(&0);
    if four_h != 4 * hidden || g.value(c).shape() != g.value(h).shape() {
        return Err(config_err!(
            "lstm: gates {:?}, hidden {:?}, cell {:?}",
            g.value(gates_in).shape(),
            g.value(h).shape(),
            g.value(c).shape()
        ));
    }
    let recur = g.linear(h, w_hh, None)?;
    let gates = g.add(gates_in, recur)?;
    let i_pre = g.slice_cols(gates, 0, hidden)?;
    let f_pre = g.slice_cols(gates, hidden, hidden)?;
    let c_pre = g.slice_cols(gates, 2 * hidden, hidden)?;
    let o_pre = g.slice_cols(gates, 3 * hidden, hidden)?;
    let i = g.sigmoid(i_pre);
    let f = g.sigmoid(f_pre);
    let cand = g.tanh(c_pre);
    let o = g.sigmoid(o_pre);
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_next = g.add(keep, write)?;
    let squashed = g.tanh(c_next);
    let h_next = g.mul(o, squashed)?;
    Ok((h_next, c_next))
}
