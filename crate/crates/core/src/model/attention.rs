use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Post-softmax attention weights for one attention site.
///
/// `weights[layer][head]` is `[queries × (prefix_len + keys)]`; the first
/// `prefix_len` columns are the prefix positions.
#[derive(Clone, Debug, Default)]
pub struct AttentionTrace {
    pub prefix_len: usize,
    pub weights: Vec<Vec<Arc<Tensor>>>,
}

impl AttentionTrace {
    pub fn new(prefix_len: usize) -> Self {
        Self {
            prefix_len,
            weights: Vec::new(),
        }
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }
}

/// Multi-head scaled dot-product attention over `[prefix_k; keys]` and
/// `[prefix_v; values]`.
///
/// Inputs are already projected (`queries` is `[Tq × d]`, `keys`/`values`
/// are `[Tk × d]`, prefix blocks `[Lp × d]`). Returns the merged head outputs
/// `[Tq × d]` (before the output projection) and one weight matrix per head.
/// With `causal`, query `i` sees content keys `0..=i`; prefix columns are
/// always visible.
pub fn attend_with_prefix(
    g: &mut Graph,
    queries: Var,
    keys: Var,
    values: Var,
    prefix: Option<(Var, Var)>,
    n_heads: usize,
    causal: bool,
) -> Result<(Var, Vec<Arc<Tensor>>)> {
    let (tq, d) = g.value(queries).dims2()?;
    let (tk, dk) = g.value(keys).dims2()?;
    if dk != d || g.shape(values) != g.shape(keys) {
        return Err(Error::Dimension {
            op: "attention",
            lhs: g.shape(queries).to_vec(),
            rhs: g.shape(values).to_vec(),
        });
    }
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::Shape(format!("d_model {d} not divisible by {n_heads} heads")));
    }
    if causal && tq != tk {
        return Err(Error::Shape(format!(
            "causal attention needs equal query/key lengths, got {tq} and {tk}"
        )));
    }
    let (k_aug, v_aug, lp) = match prefix {
        Some((pk, pv)) => {
            if g.shape(pk) != g.shape(pv) {
                return Err(Error::Dimension {
                    op: "prefix key/value",
                    lhs: g.shape(pk).to_vec(),
                    rhs: g.shape(pv).to_vec(),
                });
            }
            let (lp, dp) = g.value(pk).dims2()?;
            if dp != d {
                return Err(Error::Dimension {
                    op: "prefix width",
                    lhs: g.shape(pk).to_vec(),
                    rhs: g.shape(keys).to_vec(),
                });
            }
            (g.concat(&[pk, keys], 0)?, g.concat(&[pv, values], 0)?, lp)
        }
        None => (keys, values, 0),
    };
    let width = lp + tk;
    let mask: Option<Vec<bool>> = causal.then(|| {
        (0..tq)
            .flat_map(|i| (0..width).map(move |j| j < lp || j - lp <= i))
            .collect()
    });
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut head_outputs = Vec::with_capacity(n_heads);
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (q, k, v) = if n_heads == 1 {
            (queries, k_aug, v_aug)
        } else {
            (
                g.narrow(queries, 1, h * dh, dh)?,
                g.narrow(k_aug, 1, h * dh, dh)?,
                g.narrow(v_aug, 1, h * dh, dh)?,
            )
        };
        let scores = g.matmul_t(q, k)?;
        let scores = g.scale(scores, scale);
        let probs = match &mask {
            Some(m) => g.masked_softmax(scores, m)?,
            None => g.softmax(scores, 1)?,
        };
        weights.push(g.value_arc(probs));
        head_outputs.push(g.matmul(probs, v)?);
    }
    let out = if n_heads == 1 {
        head_outputs[0]
    } else {
        g.concat(&head_outputs, 1)?
    };
    Ok((out, weights))
}
