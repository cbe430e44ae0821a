//! Adaptive adjacency from node embeddings and node-adaptive Chebyshev
//! graph convolution.
//!
//! Node features are laid out node-major: row `n * batch + b` holds node
//! `n` of sample `b`. That makes the graph mix a single `N x N` matmul over
//! an `N x (batch * channels)` view.

use crate::numerics::{Axis, NumericsError, Tape, Tensor, Var};

/// `A = row_softmax(relu(E E^T))`.
pub fn adjacency_var(tape: &mut Tape, embeddings: Var) -> Result<Var, NumericsError> {
    let et = tape.transpose(embeddings)?;
    let logits = tape.matmul(embeddings, et)?;
    let logits = tape.relu(logits)?;
    tape.softmax(logits)
}

/// Propagation matrix `A_hat = (A + I) / 2`, i.e. `A + I` row-normalised for
/// a row-stochastic `A`.
pub fn propagation_var(tape: &mut Tape, adjacency: Var) -> Result<Var, NumericsError> {
    let n = tape.value(adjacency).rows();
    let eye = tape.constant(Tensor::eye(n));
    let sum = tape.add(adjacency, eye)?;
    tape.scale(sum, 0.5)
}

/// Evaluates [`adjacency_var`] outside of any training tape.
pub fn adaptive_adjacency(embeddings: &Tensor) -> Result<Tensor, NumericsError> {
    let mut tape = Tape::new();
    let e = tape.input(embeddings.clone());
    let a = adjacency_var(&mut tape, e)?;
    Ok(tape.value(a).clone())
}

fn mix_nodes(tape: &mut Tape, a_hat: Var, x: Var, nodes: usize) -> Result<Var, NumericsError> {
    let (rows, cols) = tape.value(x).dims2().expect("matrix");
    let batch = rows / nodes;
    let wide = tape.reshape(x, nodes, batch * cols)?;
    let mixed = tape.matmul(a_hat, wide)?;
    tape.reshape(mixed, rows, cols)
}

/// Shape parameters for [`chebyshev_conv`].
#[derive(Debug, Clone, Copy)]
pub struct ChebShape {
    pub nodes: usize,
    pub order: usize,
    pub c_in: usize,
    pub c_out: usize,
}

/// `out[n] = sum_j (T_j(A_hat) X)[n] W_{j,n} + bias[n]` with `T_0 = I`,
/// `T_1 = A_hat`, `T_j = 2 A_hat T_{j-1} - T_{j-2}`.
///
/// `node_weights` is `N x (order * c_in * c_out)`: row `n` reshaped to
/// `(order * c_in) x c_out` stacks `W_{0,n}, W_{1,n}, ...` vertically.
pub fn chebyshev_conv(
    tape: &mut Tape,
    x: Var,
    a_hat: Var,
    node_weights: Var,
    node_bias: Option<Var>,
    shape: ChebShape,
) -> Result<Var, NumericsError> {
    let ChebShape { nodes, order, c_in, c_out } = shape;
    let rows = tape.value(x).rows();
    let batch = rows / nodes;

    let mut terms = vec![x];
    if order > 1 {
        terms.push(mix_nodes(tape, a_hat, x, nodes)?);
    }
    for j in 2..order {
        let prev = terms[j - 1];
        let mixed = mix_nodes(tape, a_hat, prev, nodes)?;
        let doubled = tape.scale(mixed, 2.0)?;
        terms.push(tape.sub(doubled, terms[j - 2])?);
    }
    let z = if terms.len() == 1 { terms[0] } else { tape.concat(&terms, Axis::Cols)? };

    let mut outs = Vec::with_capacity(nodes);
    for n in 0..nodes {
        let zn = tape.slice(z, Axis::Rows, n * batch, (n + 1) * batch)?;
        let wn = tape.slice(node_weights, Axis::Rows, n, n + 1)?;
        let wn = tape.reshape(wn, order * c_in, c_out)?;
        let mut out = tape.matmul(zn, wn)?;
        if let Some(bias) = node_bias {
            let bn = tape.slice(bias, Axis::Rows, n, n + 1)?;
            out = tape.add(out, bn)?;
        }
        outs.push(out);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        tape.concat(&outs, Axis::Rows)
    }
}

/// Single-sample convenience wrapper: `x` is `N x c_in`, `adjacency` the
/// row-stochastic `A`.
pub fn chebyshev_conv_tensor(
    x: &Tensor,
    adjacency: &Tensor,
    node_weights: &Tensor,
    order: usize,
    c_out: usize,
) -> Result<Tensor, NumericsError> {
    let mut tape = Tape::new();
    let nodes = x.rows();
    let xv = tape.input(x.clone());
    let a = tape.input(adjacency.clone());
    let a_hat = propagation_var(&mut tape, a)?;
    let w = tape.input(node_weights.clone());
    let out = chebyshev_conv(&mut tape, xv, a_hat, w, None, ChebShape { nodes, order, c_in: x.cols(), c_out })?;
    Ok(tape.value(out).clone())
}
