//! Parameterised building blocks recorded on a [`Tape`].

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var, LAYER_NORM_EPS};
use crate::error::{Error, Result};

/// Registers parameters under a dotted name prefix.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Linear> {
        let w = self.store.add_glorot(format!("{name}.w"), fan_in, fan_out, self.rng)?;
        let b = self.store.add_filled(format!("{name}.b"), fan_out, 0.0)?;
        Ok(Linear { w, b: Some(b) })
    }

    pub fn projection(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Linear> {
        let w = self.store.add_glorot(format!("{name}.w"), fan_in, fan_out, self.rng)?;
        Ok(Linear { w, b: None })
    }

    pub fn mlp(&mut self, name: &str, d_in: usize, hidden: usize, d_out: usize) -> Result<Mlp> {
        Ok(Mlp {
            first: self.linear(&format!("{name}.0"), d_in, hidden)?,
            second: self.linear(&format!("{name}.1"), hidden, d_out)?,
        })
    }

    pub fn layer_norm(&mut self, name: &str, d: usize) -> Result<LayerNorm> {
        Ok(LayerNorm {
            gain: self.store.add_filled(format!("{name}.gain"), d, 1.0)?,
            bias: self.store.add_filled(format!("{name}.bias"), d, 0.0)?,
        })
    }

    /// Attention with `heads` heads; an output projection is added only for `heads > 1`.
    pub fn attention(&mut self, name: &str, d: usize, heads: usize) -> Result<Attention> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("{name}: width {d} not divisible by {heads} heads")));
        }
        Ok(Attention {
            heads,
            wq: self.projection(&format!("{name}.q"), d, d)?,
            wk: self.projection(&format!("{name}.k"), d, d)?,
            wv: self.projection(&format!("{name}.v"), d, d)?,
            wo: if heads > 1 {
                Some(self.projection(&format!("{name}.o"), d, d)?)
            } else {
                None
            },
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Two linear layers with a GELU between them.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.first.forward(tape, store, x)?;
        let h = tape.gelu(h);
        self.second.forward(tape, store, h)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub heads: usize,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Option<Linear>,
}

/// Attention output plus the per-head weight matrices `[queries x keys]`.
pub struct AttnOut {
    pub out: Var,
    pub weights: Vec<Var>,
}

impl Attention {
    /// Scaled dot-product attention of `query` rows over `context` rows.
    /// `bias` is an additive `[queries x keys]` constant (entries may be `-inf`).
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        query: Var,
        context: Var,
        bias: Option<&Tensor>,
    ) -> Result<AttnOut> {
        let q = self.wq.forward(tape, store, query)?;
        let k = self.wk.forward(tape, store, context)?;
        let v = self.wv.forward(tape, store, context)?;
        let d = tape.value(q).last_dim();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, h * dh, (h + 1) * dh)?,
                    tape.slice_cols(k, h * dh, (h + 1) * dh)?,
                    tape.slice_cols(v, h * dh, (h + 1) * dh)?,
                )
            };
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let mut scores = tape.scale(scores, scale);
            if let Some(b) = bias {
                scores = tape.add_const(scores, b)?;
            }
            let a = tape.softmax_lastdim(scores)?;
            outs.push(tape.matmul(a, vh)?);
            weights.push(a);
        }
        let out = if self.heads == 1 {
            outs[0]
        } else {
            let cat = tape.concat_cols(&outs)?;
            match &self.wo {
                Some(o) => o.forward(tape, store, cat)?,
                None => cat,
            }
        };
        Ok(AttnOut { out, weights })
    }
}

/// Inverted-dropout mask `[rows x cols]` with keep probability `1 - rate`.
pub fn dropout_mask(rng: &mut ChaCha8Rng, rows: usize, cols: usize, rate: f64) -> Tensor {
    use rand::Rng;
    let keep = 1.0 - rate;
    let data = (0..rows * cols)
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    Tensor::from_parts(vec![rows, cols], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::rng::stream;

    #[test]
    fn zero_mlp_outputs_zero() {
        let mut store = ParamStore::new();
        let mut rng = stream(1, 0);
        let mlp = Builder { store: &mut store, rng: &mut rng }.mlp("m", 3, 4, 2).unwrap();
        store.zero_all();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let y = mlp.forward(&mut tape, &store, x).unwrap();
        assert!(tape.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn multi_head_attention_gradients() {
        let mut store = ParamStore::new();
        let mut rng = stream(2, 0);
        let att = Builder { store: &mut store, rng: &mut rng }.attention("a", 8, 4).unwrap();
        let q = Tensor::new(vec![3, 8], (0..24).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let c = Tensor::new(vec![5, 8], (0..40).map(|i| (i as f64 * 0.11).cos()).collect()).unwrap();
        let err = grad_check(
            &store,
            |tape, s| {
                let qv = tape.constant(q.clone());
                let cv = tape.constant(c.clone());
                let o = att.forward(tape, s, qv, cv, None)?;
                let sq = tape.square(o.out);
                Ok(tape.sum(sq))
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn heads_must_divide_width() {
        let mut store = ParamStore::new();
        let mut rng = stream(2, 0);
        assert!(Builder { store: &mut store, rng: &mut rng }.attention("a", 6, 4).is_err());
    }

    #[test]
    fn dropout_mask_preserves_expectation() {
        let mut rng = stream(3, 0);
        let m = dropout_mask(&mut rng, 100, 100, 0.2);
        let mean = m.data().iter().sum::<f64>() / 10_000.0;
        assert!((mean - 1.0).abs() < 0.03, "{mean}");
    }
}
