//! Structural-constraint losses that make content codes interpretable.
//!
//! Grids get a geometric concentration loss: each foreground code should
//! place its probability mass in a tight blob, measured as the mass-weighted
//! squared distance to the code's own center of mass. Code 0 is background
//! and is left unconstrained.
//!
//! Sequences get a truncated neighborhood cross-entropy: adjacent tokens are
//! encouraged to share a code, with a tanh ceiling so genuine transitions
//! stop paying once the disagreement saturates.

use crate::tape::{Tape, Var};
use crate::tensor::{Result, Tensor, TensorError};

/// Parts with mass below this are reported as undefined instead of dividing
/// by ~0.
pub const CENTER_EPS: f64 = 1e-8;

/// Mass-weighted centers for the V-1 foreground parts (entry 0 of the
/// codebook is background and gets no center).
#[derive(Debug, Clone, PartialEq)]
pub struct PartCenters {
    /// `(center_h, center_w)` per foreground part; `None` when the part has
    /// no mass.
    pub centers: Vec<Option<(f64, f64)>>,
    /// Total mass z_v per foreground part.
    pub masses: Vec<f64>,
}

/// Centers of mass of part responsibilities `l` with shape [V, H*W].
pub fn part_centers(l: &Tensor, h: usize, w: usize) -> Result<PartCenters> {
    let shape = l.shape();
    if shape.len() != 2 || shape[1] != h * w {
        return Err(TensorError::InvalidShape {
            op: "part_centers",
            shape: shape.to_vec(),
            reason: format!("expected [V, {}] for a {h}x{w} grid", h * w),
        });
    }
    let v = shape[0];
    if v < 2 {
        return Err(TensorError::InvalidShape {
            op: "part_centers",
            shape: shape.to_vec(),
            reason: "need at least background + one foreground part".into(),
        });
    }
    let mut centers = Vec::with_capacity(v - 1);
    let mut masses = Vec::with_capacity(v - 1);
    for part in 1..v {
        let row = &l.data()[part * h * w..(part + 1) * h * w];
        let z: f64 = row.iter().sum();
        masses.push(z);
        if z <= CENTER_EPS {
            centers.push(None);
            continue;
        }
        let mut ch = 0.0;
        let mut cw = 0.0;
        for (pix, &m) in row.iter().enumerate() {
            ch += (pix / w) as f64 * m;
            cw += (pix % w) as f64 * m;
        }
        centers.push(Some((ch / z, cw / z)));
    }
    Ok(PartCenters { centers, masses })
}

/// Geometric concentration loss over part responsibilities [V, H*W].
///
/// For each foreground part v (1..V) with mass z_v above [`CENTER_EPS`]:
/// sum over pixels of squared distance to the part center, weighted by
/// L[v, pixel] / z_v; averaged over V-1 foreground slots. Empty parts
/// contribute zero; their count is returned for diagnostics.
///
/// Pixel coordinates are raw 0-based indices (no normalization by H or W).
pub fn geometric_concentration_loss(
    tape: &mut Tape,
    l: Var,
    h: usize,
    w: usize,
) -> Result<(Var, usize)> {
    let shape = tape.shape(l).to_vec();
    if shape.len() != 2 || shape[1] != h * w {
        return Err(TensorError::InvalidShape {
            op: "geometric_concentration_loss",
            shape,
            reason: format!("expected [V, {}] for a {h}x{w} grid", h * w),
        });
    }
    let v = shape[0];
    if v < 2 {
        return Err(TensorError::InvalidShape {
            op: "geometric_concentration_loss",
            shape,
            reason: "need at least background + one foreground part".into(),
        });
    }
    let n = h * w;
    let hcoord: Vec<f64> = (0..n).map(|p| (p / w) as f64).collect();
    let wcoord: Vec<f64> = (0..n).map(|p| (p % w) as f64).collect();
    let sqcoord: Vec<f64> = (0..n)
        .map(|p| {
            let (r, c) = ((p / w) as f64, (p % w) as f64);
            r * r + c * c
        })
        .collect();

    // Defined foreground parts, decided from the recorded mass values.
    let zdata: Vec<f64> = {
        let d = tape.data(l);
        (0..v)
            .map(|part| d[part * n..(part + 1) * n].iter().sum())
            .collect()
    };
    let defined: Vec<usize> = (1..v).filter(|&p| zdata[p] > CENTER_EPS).collect();
    let undefined = (v - 1) - defined.len();
    if defined.is_empty() {
        // Every foreground part is empty; the loss is zero by convention but
        // must stay connected to the graph so gradients exist (as zeros).
        let s = tape.sum_all(l)?;
        let zero = tape.mul_scalar(s, 0.0)?;
        return Ok((zero, undefined));
    }

    let hc = tape.constant(Tensor::new(vec![n, 1], hcoord)?);
    let wc = tape.constant(Tensor::new(vec![n, 1], wcoord)?);
    let sq = tape.constant(Tensor::new(vec![n, 1], sqcoord)?);

    let z_all = tape.sum_axis(l, 1)?; // [V]
    let z_col = tape.reshape(z_all, vec![v, 1])?;
    let sh_all = tape.matmul(l, hc)?; // [V,1]
    let sw_all = tape.matmul(l, wc)?;
    let sq_all = tape.matmul(l, sq)?;

    let z_def = tape.gather_rows(z_col, &defined)?;
    let sh_def = tape.gather_rows(sh_all, &defined)?;
    let sw_def = tape.gather_rows(sw_all, &defined)?;
    let sq_def = tape.gather_rows(sq_all, &defined)?;

    // Variance identity per part: E[h²+w²] - c_h² - c_w², all under the
    // normalized mass L[v,·]/z_v.
    let zinv = tape.recip(z_def)?;
    let ch = tape.mul(sh_def, zinv)?;
    let cw = tape.mul(sw_def, zinv)?;
    let e2 = tape.mul(sq_def, zinv)?;
    let ch2 = tape.mul(ch, ch)?;
    let cw2 = tape.mul(cw, cw)?;
    let part_var = {
        let t = tape.sub(e2, ch2)?;
        tape.sub(t, cw2)?
    };
    let total = tape.sum_all(part_var)?;
    let loss = tape.mul_scalar(total, 1.0 / (v - 1) as f64)?;
    Ok((loss, undefined))
}

/// The tanh ceiling applied to a neighborhood cross-entropy:
/// gamma * tanh(lce / gamma). Behaves like the identity near zero and
/// saturates at gamma.
pub fn truncate_ce(tape: &mut Tape, lce: Var, gamma: f64) -> Result<Var> {
    if gamma <= 0.0 {
        return Err(TensorError::BadArgument {
            op: "truncate_ce",
            reason: format!("gamma {gamma} must be positive"),
        });
    }
    let scaled = tape.mul_scalar(lce, 1.0 / gamma)?;
    let t = tape.tanh(scaled)?;
    tape.mul_scalar(t, gamma)
}

/// Truncated neighborhood cross-entropy over per-token code probabilities
/// `p` [N, V] and hard codes `z` (the argmax of each row of p):
///
/// L_CE = (1/(N-1)) Σ_i CE(p_i, z_{i+1}) + CE(p_{i+1}, z_i), then
/// L_SC = gamma * tanh(L_CE / gamma).
pub fn truncated_neighborhood_ce(
    tape: &mut Tape,
    p: Var,
    codes: &[usize],
    gamma: f64,
) -> Result<Var> {
    let shape = tape.shape(p).to_vec();
    if shape.len() != 2 {
        return Err(TensorError::InvalidShape {
            op: "truncated_neighborhood_ce",
            shape,
            reason: "expected [N, V] probabilities".into(),
        });
    }
    let (n, v) = (shape[0], shape[1]);
    if n < 2 {
        return Err(TensorError::BadArgument {
            op: "truncated_neighborhood_ce",
            reason: format!("need at least 2 tokens, got {n}"),
        });
    }
    if codes.len() != n {
        return Err(TensorError::BadArgument {
            op: "truncated_neighborhood_ce",
            reason: format!("{} codes for {n} tokens", codes.len()),
        });
    }
    if gamma <= 0.0 {
        return Err(TensorError::BadArgument {
            op: "truncated_neighborhood_ce",
            reason: format!("gamma {gamma} must be positive"),
        });
    }

    let one_hot = |targets: &[usize]| -> Result<Tensor> {
        let mut data = vec![0.0; targets.len() * v];
        for (i, &c) in targets.iter().enumerate() {
            if c >= v {
                return Err(TensorError::BadArgument {
                    op: "truncated_neighborhood_ce",
                    reason: format!("code {c} out of range {v}"),
                });
            }
            data[i * v + c] = 1.0;
        }
        Tensor::new(vec![targets.len(), v], data)
    };

    let logp = tape.log(p)?;
    let head_idx: Vec<usize> = (0..n - 1).collect();
    let tail_idx: Vec<usize> = (1..n).collect();
    let head = tape.gather_rows(logp, &head_idx)?; // rows 0..N-1
    let tail = tape.gather_rows(logp, &tail_idx)?; // rows 1..N
    let next_targets = one_hot(&codes[1..])?;
    let prev_targets = one_hot(&codes[..n - 1])?;
    let oh_next = tape.constant(next_targets);
    let oh_prev = tape.constant(prev_targets);
    let t1 = tape.mul(head, oh_next)?;
    let t2 = tape.mul(tail, oh_prev)?;
    let s1 = tape.sum_all(t1)?;
    let s2 = tape.sum_all(t2)?;
    let total = tape.add(s1, s2)?;
    let lce = tape.mul_scalar(total, -1.0 / (n - 1) as f64)?;
    truncate_ce(tape, lce, gamma)
}
