//! Disease-specific progression heads and the reversal-aware objective.

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::cohort::label_to_class;
use crate::error::{Error, Result};
use crate::nn::{Builder, Mlp};

pub const PROGRESSION_CLASSES: usize = 3;

/// Label of the reversed pair.
pub fn negate_label(y: i8) -> Result<i8> {
    match y {
        -1 | 0 | 1 => Ok(-y),
        _ => Err(Error::Label(format!("progression label {y} not in {{-1,0,1}}"))),
    }
}

/// One classifier per disease, each `d -> d -> 3`.
#[derive(Debug, Clone)]
pub struct ProgressionHeads {
    pub heads: Vec<Mlp>,
}

impl ProgressionHeads {
    pub fn new(b: &mut Builder, d: usize, diseases: usize) -> Result<Self> {
        Self::named(b, "progression_head", d, diseases)
    }

    pub fn named(b: &mut Builder, prefix: &str, d: usize, diseases: usize) -> Result<Self> {
        let heads = (0..diseases)
            .map(|k| b.mlp(&format!("{prefix}.{k}"), d, d, PROGRESSION_CLASSES))
            .collect::<Result<_>>()?;
        Ok(Self { heads })
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    /// Logits `[n x 3]` of head `k` in class order (worsened, no change, improved).
    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, x: Var, k: usize) -> Result<Var> {
        let head = self
            .heads
            .get(k)
            .ok_or_else(|| Error::Label(format!("disease index {k} out of range for {} heads", self.heads.len())))?;
        head.forward(tape, store, x)
    }
}

/// Present `(row, disease, label)` slots; rows index the interval-major `(i, r)` layout.
pub fn present_slots(labels: &[Vec<Vec<Option<i8>>>]) -> Vec<(usize, usize, i8)> {
    let mut out = Vec::new();
    let mut row = 0;
    for interval in labels {
        for region in interval {
            for (k, y) in region.iter().enumerate() {
                if let Some(y) = y {
                    out.push((row, k, *y));
                }
            }
            row += 1;
        }
    }
    out
}

/// Sum of cross-entropies of head outputs on `rows` against the slot labels,
/// with each label optionally negated. Returns `None` when no slot is present.
pub fn slot_cross_entropy(
    tape: &mut Tape,
    store: &ParamStore,
    heads: &ProgressionHeads,
    rows: Var,
    slots: &[(usize, usize, i8)],
    negate: bool,
) -> Result<Option<Var>> {
    let mut total: Option<Var> = None;
    for k in 0..heads.len() {
        let mine: Vec<&(usize, usize, i8)> = slots.iter().filter(|s| s.1 == k).collect();
        if mine.is_empty() {
            continue;
        }
        let idx: Vec<usize> = mine.iter().map(|s| s.0).collect();
        let targets = mine
            .iter()
            .map(|s| label_to_class(if negate { negate_label(s.2)? } else { s.2 }))
            .collect::<Result<Vec<_>>>()?;
        let x = tape.gather_rows(rows, &idx)?;
        let logits = heads.logits(tape, store, x, k)?;
        let ce = tape.cross_entropy_rows(logits, &targets)?;
        let s = tape.sum(ce);
        total = Some(match total {
            None => s,
            Some(t) => tape.add(t, s)?,
        });
    }
    Ok(total)
}

/// Reversal-aware objective for one episode.
///
/// Mean over present slots of `CE(f_k(D), y) + CE(f_k(D_rev), -y)`, plus
/// `lambda_static` times the per-interval mean of `sum_r ||S - S_rev||^2`.
#[allow(clippy::too_many_arguments)]
pub fn loss_pae(
    tape: &mut Tape,
    store: &ParamStore,
    heads: &ProgressionHeads,
    dynamics: Var,
    dynamics_rev: Var,
    statics: Var,
    statics_rev: Var,
    labels: &[Vec<Vec<Option<i8>>>],
    lambda_static: f64,
) -> Result<Var> {
    let intervals = labels.len().max(1);
    let slots = present_slots(labels);
    let diff = tape.sub(statics, statics_rev)?;
    let sq = tape.square(diff);
    let s = tape.sum(sq);
    let static_term = tape.scale(s, lambda_static / intervals as f64);
    if slots.is_empty() {
        return Ok(static_term);
    }
    let fwd = slot_cross_entropy(tape, store, heads, dynamics, &slots, false)?.expect("slots present");
    let rev = slot_cross_entropy(tape, store, heads, dynamics_rev, &slots, true)?.expect("slots present");
    let ce = tape.add(fwd, rev)?;
    let ce = tape.scale(ce, 1.0 / slots.len() as f64);
    tape.add(ce, static_term)
}

/// Post-softmax class probabilities of head `k` for a single row vector.
pub fn head_probabilities(tape: &mut Tape, store: &ParamStore, heads: &ProgressionHeads, row: &[f64], k: usize) -> Result<Vec<f64>> {
    let x = tape.constant(Tensor::matrix(1, row.len(), row.to_vec())?);
    let l = heads.logits(tape, store, x, k)?;
    let p = tape.softmax_lastdim(l)?;
    Ok(tape.value(p).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::disentangle::Disentangler;
    use crate::metrics::argmax;
    use crate::rng::stream;

    fn setup(d: usize, k: usize) -> (ParamStore, Disentangler, ProgressionHeads) {
        let mut store = ParamStore::new();
        let mut rng = stream(7, 0);
        let mut b = Builder { store: &mut store, rng: &mut rng };
        let dis = Disentangler::new(&mut b, d).unwrap();
        let heads = ProgressionHeads::new(&mut b, d, k).unwrap();
        (store, dis, heads)
    }

    fn feat(n: usize, d: usize, phase: f64) -> Tensor {
        Tensor::new(vec![n, d], (0..n * d).map(|i| (i as f64 * 0.41 + phase).cos()).collect()).unwrap()
    }

    #[test]
    fn negation_examples() {
        assert_eq!(negate_label(1).unwrap(), -1);
        assert_eq!(negate_label(0).unwrap(), 0);
        assert_eq!(negate_label(-1).unwrap(), 1);
        assert!(matches!(negate_label(2), Err(Error::Label(_))));
        for y in [-1, 0, 1] {
            assert_eq!(negate_label(negate_label(y).unwrap()).unwrap(), y);
        }
    }

    #[test]
    fn palindrome_pairs_are_reversal_invariant() {
        let (store, dis, _) = setup(4, 2);
        let mut tape = Tape::new();
        let f = tape.constant(feat(3, 4, 0.2));
        let (s, d) = dis.split(&mut tape, &store, f, f).unwrap();
        let (sr, dr) = dis.split(&mut tape, &store, f, f).unwrap();
        assert_eq!(tape.value(s), tape.value(sr));
        assert_eq!(tape.value(d), tape.value(dr));
    }

    #[test]
    fn reversed_concat_swaps_halves() {
        let mut tape = Tape::new();
        let a = tape.constant(feat(2, 3, 0.0));
        let b = tape.constant(feat(2, 3, 1.0));
        let fwd = tape.concat_cols(&[a, b]).unwrap();
        let rev = tape.concat_cols(&[b, a]).unwrap();
        for r in 0..2 {
            let f = tape.value(fwd).row(r);
            let v = tape.value(rev).row(r);
            assert_eq!(&f[..3], &v[3..]);
            assert_eq!(&f[3..], &v[..3]);
        }
    }

    #[test]
    fn zero_heads_give_uniform_logits() {
        let (mut store, _, heads) = setup(4, 2);
        store.zero_all();
        let mut tape = Tape::new();
        let x = tape.constant(feat(1, 4, 0.0));
        let l = heads.logits(&mut tape, &store, x, 1).unwrap();
        assert_eq!(tape.value(l).data(), &[0.0, 0.0, 0.0]);
        assert!(matches!(heads.logits(&mut tape, &store, x, 2), Err(Error::Label(_))));
    }

    #[test]
    fn heads_are_independent() {
        let (store, _, heads) = setup(4, 2);
        let mut tape = Tape::new();
        let x = tape.constant(feat(1, 4, 0.3));
        let a = heads.logits(&mut tape, &store, x, 0).unwrap();
        let b = heads.logits(&mut tape, &store, x, 1).unwrap();
        assert_ne!(tape.value(a), tape.value(b));
    }

    #[test]
    fn head_argmax_matches_metric_argmax() {
        let (store, _, heads) = setup(4, 2);
        let mut tape = Tape::new();
        let row = feat(1, 4, 0.9).data().to_vec();
        let p = head_probabilities(&mut tape, &store, &heads, &row, 0).unwrap();
        let x = tape.constant(Tensor::matrix(1, 4, row).unwrap());
        let l = heads.logits(&mut tape, &store, x, 0).unwrap();
        assert_eq!(argmax(&p), argmax(tape.value(l).data()));
    }

    #[test]
    fn uniform_heads_give_two_ln3_plus_static_term() {
        let (mut store, dis, heads) = setup(3, 1);
        for h in &heads.heads {
            for id in [h.first.w, h.second.w] {
                store.get_mut(id).data_mut().fill(0.0);
            }
        }
        let mut tape = Tape::new();
        let a = tape.constant(feat(1, 3, 0.0));
        let b = tape.constant(feat(1, 3, 0.7));
        let (s, d) = dis.split(&mut tape, &store, a, b).unwrap();
        let (sr, dr) = dis.split(&mut tape, &store, b, a).unwrap();
        let labels = vec![vec![vec![Some(1i8)]]];
        let lam = 0.3;
        let l = loss_pae(&mut tape, &store, &heads, d, dr, s, sr, &labels, lam).unwrap();
        let gap: f64 = tape
            .value(s)
            .data()
            .iter()
            .zip(tape.value(sr).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let expect = 2.0 * 3f64.ln() + lam * gap;
        assert!((tape.value(l).item() - expect).abs() < 1e-12);

        let absent = vec![vec![vec![None]]];
        let l = loss_pae(&mut tape, &store, &heads, d, dr, s, sr, &absent, lam).unwrap();
        assert!((tape.value(l).item() - lam * gap).abs() < 1e-12);
        let l = loss_pae(&mut tape, &store, &heads, d, dr, s, sr, &absent, 0.0).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn pae_loss_gradients() {
        let (store, dis, heads) = setup(3, 2);
        let fa = feat(4, 3, 0.1);
        let fb = feat(4, 3, 1.3);
        let labels = vec![
            vec![vec![Some(1), None], vec![Some(-1), Some(0)]],
            vec![vec![Some(0), Some(1)], vec![None, Some(-1)]],
        ];
        let err = grad_check(
            &store,
            |tape, s| {
                let a = tape.constant(fa.clone());
                let b = tape.constant(fb.clone());
                let (st, dy) = dis.split(tape, s, a, b)?;
                let (sr, dr) = dis.split(tape, s, b, a)?;
                loss_pae(tape, s, &heads, dy, dr, st, sr, &labels, 0.5)
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
