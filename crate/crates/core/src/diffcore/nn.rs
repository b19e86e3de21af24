use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Affine layer `{prefix}.weight` / `{prefix}.bias` applied to every row.
pub fn linear(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{prefix}.weight"))?;
    let b = tape.param(store, &format!("{prefix}.bias"))?;
    let (din, dout) = tape.dims(w);
    if tape.dims(x).1 != din {
        return Err(Error::Shape(format!(
            "`{prefix}` expects width {din}, got {}",
            tape.dims(x).1
        )));
    }
    if tape.dims(b).1 != dout {
        return Err(Error::Shape(format!("`{prefix}` bias width mismatch")));
    }
    tape.linear(x, w, Some(b))
}

/// Point-wise MLP over `[P·K × Din]` rows, weights shared across all rows.
///
/// Layer `i` reads `{prefix}.l{i}.weight` and `{prefix}.l{i}.bias`. A ReLU
/// follows every layer; pass `relu_last = false` to leave the final layer
/// linear. `widths` lists the output width of every layer and is checked
/// against the stored weights.
pub fn shared_mlp_forward(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    widths: &[usize],
    input: Var,
    relu_last: bool,
) -> Result<Var> {
    let mut x = input;
    for (i, &w) in widths.iter().enumerate() {
        let name = format!("{prefix}.l{i}");
        x = linear(tape, store, &name, x)?;
        if tape.dims(x).1 != w {
            return Err(Error::Shape(format!("`{name}` produces width {}, expected {w}", tape.dims(x).1)));
        }
        if relu_last || i + 1 < widths.len() {
            x = tape.relu(x);
        }
    }
    Ok(x)
}

/// Max over the neighbour axis: `[P·K × D]` → `[P × D]`.
pub fn max_pool_neighbors(tape: &mut Tape, input: Var, k: usize) -> Result<Var> {
    tape.max_pool_groups(input, k)
}
