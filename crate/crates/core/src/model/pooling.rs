//! Pooling layers mapping a hidden sequence `h[T×D]` to one utterance vector.
//!
//! Heads split every hidden state into `K` contiguous slices of width
//! `d_h = D/K`; head `j` owns dimensions `[j·d_h, (j+1)·d_h)`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Mode, Real, Tape, Var};

/// Variance floor applied before the square root in statistical pooling.
pub const STD_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PoolingKind {
    /// Mean and standard deviation over time, output `2D`.
    Statistical,
    /// Single-head attention; identical to `Mhsa { heads: 1 }`.
    SelfAttention,
    /// Per-head attention, head contexts concatenated, output `D`.
    Mhsa { heads: usize },
    /// Per-head attention followed by attention over the head contexts,
    /// output `D/K`. `head_drop` is the training-time probability of
    /// zeroing a head's weight.
    Dmhsa { heads: usize, head_drop: f64 },
}

impl PoolingKind {
    /// Number of first-stage heads (0 for statistical pooling).
    pub fn heads(&self) -> usize {
        match *self {
            PoolingKind::Statistical => 0,
            PoolingKind::SelfAttention => 1,
            PoolingKind::Mhsa { heads } | PoolingKind::Dmhsa { heads, .. } => heads,
        }
    }

    pub fn head_drop(&self) -> f64 {
        match *self {
            PoolingKind::Dmhsa { head_drop, .. } => head_drop,
            _ => 0.0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PoolingKind::Statistical => "statistical",
            PoolingKind::SelfAttention => "self-attention",
            PoolingKind::Mhsa { .. } => "mhsa",
            PoolingKind::Dmhsa { .. } => "dmhsa",
        }
    }

    pub fn validate(&self, hidden: usize) -> Result<()> {
        let heads = self.heads();
        if *self != PoolingKind::Statistical && (heads == 0 || hidden % heads != 0) {
            return Err(Error::Config(format!(
                "{heads} heads do not divide hidden size {hidden}"
            )));
        }
        let p = self.head_drop();
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!("head drop probability {p} not in [0, 1)")));
        }
        Ok(())
    }

    /// Width of the pooled vector for hidden size `D`.
    pub fn output_dim(&self, hidden: usize) -> usize {
        match *self {
            PoolingKind::Statistical => 2 * hidden,
            PoolingKind::SelfAttention | PoolingKind::Mhsa { .. } => hidden,
            PoolingKind::Dmhsa { heads, .. } => hidden / heads,
        }
    }
}

/// First-stage attention weights `W[T×K]`: per head, a softmax over time of
/// `h_tj·u_j / √d_h`. `u` is `[K×d_h]`.
pub fn attention_weights<T: Real>(tape: &mut Tape<T>, h: Var, u: Var, heads: usize) -> Result<Var> {
    let d = *tape
        .shape(h)
        .get(1)
        .ok_or_else(|| Error::Usage("hidden sequence must be T×D".into()))?;
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("{heads} heads do not divide hidden size {d}")));
    }
    let d_h = d / heads;
    let scale = T::one() / T::c(d_h as f64).sqrt();
    let scores = tape.head_scores(h, u, heads, scale)?;
    tape.softmax(scores, 0)
}

/// Head context vectors `C[K×d_h]`, `c_j = Σ_t w_tj · h_tj`.
pub fn head_contexts<T: Real>(tape: &mut Tape<T>, h: Var, weights: Var, heads: usize) -> Result<Var> {
    tape.head_contexts(h, weights, heads)
}

/// Second-stage attention over head contexts. Returns the pooled context
/// `[1×d_h]` and the head weights `[K×1]` actually used (after head drop when
/// a mask is given). The head scores are `c_i·u′`, with no `1/√d_h` scaling.
pub fn double_attention<T: Real>(
    tape: &mut Tape<T>,
    contexts: Var,
    u_prime: Var,
    keep: Option<&[bool]>,
) -> Result<(Var, Var)> {
    let s = tape.shape(contexts).to_vec();
    if s.len() != 2 {
        return Err(Error::Usage(format!("head contexts must be K×d_h, got {s:?}")));
    }
    let (k, d_h) = (s[0], s[1]);
    let query = tape.reshape(u_prime, &[d_h, 1])?;
    let scores = tape.matmul(contexts, query)?;
    let mut weights = tape.softmax(scores, 0)?;
    if let Some(keep) = keep {
        weights = tape.mask_renorm(weights, keep)?;
    }
    let row = tape.reshape(weights, &[1, k])?;
    let context = tape.matmul(row, contexts)?;
    Ok((context, weights))
}

/// Multi-head pooling: per-head contexts concatenated to `[1×D]`. Also
/// returns the attention weights.
pub fn mhsa_pool<T: Real>(tape: &mut Tape<T>, h: Var, u: Var, heads: usize) -> Result<(Var, Var)> {
    let w = attention_weights(tape, h, u, heads)?;
    let c = head_contexts(tape, h, w, heads)?;
    let d = tape.value(c).numel();
    Ok((tape.reshape(c, &[1, d])?, w))
}

/// Mean and population standard deviation over time, `[1×2D]`.
pub fn statistical_pool<T: Real>(tape: &mut Tape<T>, h: Var) -> Result<Var> {
    tape.stat_pool(h, T::c(STD_FLOOR))
}

/// Samples which heads survive head drop: each is dropped independently with
/// probability `p`, and a draw that drops every head is rejected and redrawn.
pub fn head_drop_mask<R: Rng + ?Sized>(heads: usize, p: f64, rng: &mut R) -> Result<Vec<bool>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Parameter(format!("head drop probability {p} not in [0, 1)")));
    }
    if heads == 0 {
        return Err(Error::Config("head drop needs at least one head".into()));
    }
    loop {
        let keep: Vec<bool> = (0..heads).map(|_| rng.random::<f64>() >= p).collect();
        if keep.iter().any(|&k| k) {
            return Ok(keep);
        }
    }
}

/// Head drop on plain weights: zero the dropped heads and renormalize the
/// survivors to sum 1. Identity in eval mode or when `p == 0`.
pub fn head_drop<T: Real, R: Rng + ?Sized>(weights: &[T], p: f64, rng: &mut R, mode: Mode) -> Result<Vec<T>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Parameter(format!("head drop probability {p} not in [0, 1)")));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok(weights.to_vec());
    }
    let keep = head_drop_mask(weights.len(), p, rng)?;
    let total: T = weights.iter().zip(&keep).filter(|(_, &k)| k).map(|(&w, _)| w).sum();
    if total <= T::zero() {
        return Err(Error::Degenerate("surviving head weights sum to zero".into()));
    }
    Ok(weights
        .iter()
        .zip(&keep)
        .map(|(&w, &k)| if k { w / total } else { T::zero() })
        .collect())
}
