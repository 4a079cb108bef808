//! Region encoding, static/dynamic splitting of consecutive snapshot pairs,
//! and the orthogonality and temporal-consistency penalties.

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Builder, Mlp};

#[derive(Debug, Clone, Copy)]
pub struct RegionEncoder {
    pub d_in: usize,
    pub mlp: Mlp,
}

impl RegionEncoder {
    pub fn new(b: &mut Builder, d_in: usize, d: usize) -> Result<Self> {
        Ok(Self {
            d_in,
            mlp: b.mlp("region_encoder", d_in, d, d)?,
        })
    }

    /// `[n x d_in] -> [n x d]`, shared across regions and snapshots.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.value(x).last_dim();
        if w != self.d_in {
            return Err(Error::dim(format!("region input width {w}, expected {}", self.d_in)));
        }
        self.mlp.forward(tape, store, x)
    }
}

/// Static and dynamic projection heads over concatenated pairs.
#[derive(Debug, Clone, Copy)]
pub struct Disentangler {
    pub d: usize,
    pub static_head: Mlp,
    pub dynamic_head: Mlp,
}

impl Disentangler {
    pub fn new(b: &mut Builder, d: usize) -> Result<Self> {
        Ok(Self {
            d,
            static_head: b.mlp("static_head", 2 * d, 2 * d, d)?,
            dynamic_head: b.mlp("dynamic_head", 2 * d, 2 * d, d)?,
        })
    }

    /// `(S, D)` for row-aligned `earlier` and `later` features `[n x d]`.
    /// Calling with the arguments swapped gives the reversed pair.
    pub fn split(&self, tape: &mut Tape, store: &ParamStore, earlier: Var, later: Var) -> Result<(Var, Var)> {
        for v in [earlier, later] {
            let w = tape.value(v).last_dim();
            if w != self.d {
                return Err(Error::dim(format!("pair feature width {w}, expected {}", self.d)));
            }
        }
        let pair = tape.concat_cols(&[earlier, later])?;
        let s = self.static_head.forward(tape, store, pair)?;
        let d = self.dynamic_head.forward(tape, store, pair)?;
        Ok((s, d))
    }
}

/// Mean squared cosine similarity between row-aligned `S` and `D` of one episode.
pub fn loss_orth_episode(tape: &mut Tape, statics: Var, dynamics: Var) -> Result<Var> {
    let cos = tape.cosine_rows(statics, dynamics)?;
    let sq = tape.square(cos);
    Ok(tape.mean(sq))
}

/// Batch orthogonality loss: per-episode means averaged over episodes.
pub fn loss_orth(tape: &mut Tape, pairs: &[(Var, Var)]) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::contract("loss_orth needs at least one pair"));
    }
    let mut total: Option<Var> = None;
    for &(s, d) in pairs {
        let l = loss_orth_episode(tape, s, d)?;
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    Ok(tape.scale(total.expect("non-empty"), 1.0 / pairs.len() as f64))
}

/// Temporal consistency of statics `[(T-1)*R x d]` laid out interval-major.
/// Sum of squared consecutive differences over `(T-2)*R`; zero when `T = 2`.
pub fn loss_temp(tape: &mut Tape, statics: Var, regions: usize) -> Result<Var> {
    let rows = tape.value(statics).rows();
    if regions == 0 || rows % regions != 0 {
        return Err(Error::dim(format!("{rows} static rows not divisible by {regions} regions")));
    }
    let intervals = rows / regions;
    if intervals < 2 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let a = tape.slice_rows(statics, 0, rows - regions)?;
    let b = tape.slice_rows(statics, regions, rows)?;
    let diff = tape.sub(a, b)?;
    let sq = tape.square(diff);
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / ((intervals - 1) * regions) as f64))
}
