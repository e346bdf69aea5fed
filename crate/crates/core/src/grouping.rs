//! Multi-granularity feature grouping.
//!
//! For a window of granularity `g`, the `n` feature embeddings (in schema
//! order, or a fixed permutation of it) are padded with the shared null
//! embedding up to `m·g` entries, `m = ⌈n/g⌉`, and each consecutive run of `g`
//! embeddings becomes one group token. A per-window affine projection then
//! maps every token to the common width `d_model`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Var};

/// How the `g` embeddings of a group are merged into one token.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupCombine {
    /// Concatenation, token width `g · d_embed`.
    #[default]
    Concat,
    /// Elementwise sum, token width `d_embed`.
    Sum,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub granularities: Vec<usize>,
    pub d_model: usize,
}

impl WindowSpec {
    pub fn validate(&self, n_features: usize) -> Result<()> {
        if self.granularities.is_empty() {
            return Err(Error::Config("at least one window granularity is required".into()));
        }
        for &g in &self.granularities {
            if g == 0 || g > n_features {
                return Err(Error::Config(format!("granularity {g} must be in 1..={n_features}")));
            }
        }
        if self.d_model == 0 {
            return Err(Error::Config("d_model must be positive".into()));
        }
        Ok(())
    }

    pub fn group_counts(&self, n_features: usize) -> Vec<usize> {
        self.granularities.iter().map(|&g| group_count(n_features, g)).collect()
    }
}

/// `⌈n / g⌉`
pub fn group_count(n_features: usize, granularity: usize) -> usize {
    n_features.div_ceil(granularity)
}

/// Source feature for each of the `m·g` token slots; `None` is padding.
pub fn group_layout(n_features: usize, granularity: usize, order: Option<&[usize]>) -> Vec<Option<usize>> {
    let m = group_count(n_features, granularity);
    (0..m * granularity).map(|slot| (slot < n_features).then(|| order.map_or(slot, |o| o[slot]))).collect()
}

/// Checks that `order` is a permutation of `0..n`.
pub fn validate_order(order: &[usize], n_features: usize) -> Result<()> {
    let mut seen = vec![false; n_features];
    if order.len() != n_features {
        return Err(Error::Config(format!("feature order has {} entries for {n_features} features", order.len())));
    }
    for &j in order {
        if j >= n_features || std::mem::replace(&mut seen[j], true) {
            return Err(Error::Config(format!("feature order is not a permutation (entry {j})")));
        }
    }
    Ok(())
}

/// Token sequence `X^h_l` of window `h` at layer `l`: `[batch, n_groups, width]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupedRepresentation {
    pub window: usize,
    pub layer: usize,
    pub tokens: Var,
    pub n_groups: usize,
    pub width: usize,
}

/// Groups `embedded: [batch, n, d_embed]` for a single window of granularity `g`.
pub fn partition_window<T: Scalar>(
    tape: &mut Tape<'_, T>,
    embedded: Var,
    null: Var,
    window: usize,
    granularity: usize,
    order: Option<&[usize]>,
    combine: GroupCombine,
) -> Result<GroupedRepresentation> {
    let shape = tape.shape(embedded).to_vec();
    if shape.len() != 3 {
        return Err(Error::shape("partition", format!("expected [batch, n, d], got {shape:?}")));
    }
    let (batch, n, d) = (shape[0], shape[1], shape[2]);
    if granularity == 0 || granularity > n {
        return Err(Error::Config(format!("granularity {granularity} must be in 1..={n}")));
    }
    if let Some(o) = order {
        validate_order(o, n)?;
    }
    let m = group_count(n, granularity);
    let layout = group_layout(n, granularity, order);
    let slots = tape.gather_tokens(embedded, null, layout)?;
    let (tokens, width) = match combine {
        GroupCombine::Concat => (tape.reshape(slots, vec![batch, m, granularity * d])?, granularity * d),
        GroupCombine::Sum => {
            let split = tape.reshape(slots, vec![batch, m, granularity, d])?;
            (tape.sum_axis(split, 2)?, d)
        }
    };
    Ok(GroupedRepresentation { window, layer: 0, tokens, n_groups: m, width })
}

/// One grouped representation per granularity, in window order.
pub fn partition<T: Scalar>(
    tape: &mut Tape<'_, T>,
    embedded: Var,
    null: Var,
    granularities: &[usize],
    order: Option<&[usize]>,
    combine: GroupCombine,
) -> Result<Vec<GroupedRepresentation>> {
    granularities
        .iter()
        .enumerate()
        .map(|(h, &g)| partition_window(tape, embedded, null, h, g, order, combine))
        .collect()
}

/// Affine map of every token to `d_model`: yields `X^h_0`.
pub fn input_project<T: Scalar>(
    tape: &mut Tape<'_, T>,
    grouped: &GroupedRepresentation,
    w_in: Var,
    b_in: Var,
) -> Result<GroupedRepresentation> {
    let ws = tape.shape(w_in).to_vec();
    if ws.len() != 2 || ws[0] != grouped.width {
        return Err(Error::shape(
            "input_project",
            format!("projection {ws:?} does not accept token width {}", grouped.width),
        ));
    }
    let projected = tape.matmul(grouped.tokens, w_in)?;
    let tokens = tape.add(projected, b_in)?;
    Ok(GroupedRepresentation { tokens, width: ws[1], ..*grouped })
}
