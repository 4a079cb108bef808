//! EHR encoding, interval-local masked attention, local and global
//! cross-modal fusion, and static/demographic fusion.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{dropout_mask, AttnOut, Attention, Builder, LayerNorm, Linear, Mlp};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Raw interval-relative features `[t_j - t_i, t_next - t_j, sigmoid((t_j - t_i)(t_next - t_j))]`.
pub fn time_embed_raw(t_j: f64, t_i: f64, t_next: f64) -> Result<[f64; 3]> {
    if !(t_i < t_next) {
        return Err(Error::contract(format!("interval [{t_i}, {t_next}] is empty")));
    }
    let a = t_j - t_i;
    let b = t_next - t_j;
    Ok([a, b, sigmoid(a * b)])
}

/// Raw features for every timestamp, `[(M+1) x 3]`.
pub fn time_features(times: &[f64], t_i: f64, t_next: f64) -> Result<Tensor> {
    let mut data = Vec::with_capacity(times.len() * 3);
    for &t in times {
        data.extend_from_slice(&time_embed_raw(t, t_i, t_next)?);
    }
    Tensor::matrix(times.len(), 3, data)
}

/// Center-focused additive bias per timestamp.
///
/// Inside the closed interval the bias is `-|t_j - mid|` (divided by the
/// half-width when `normalize`); outside it is `-inf`. When no timestamp lies
/// inside, the nearest one (earliest on ties) is unmasked with bias 0.
pub fn build_attn_mask(times: &[f64], t_i: f64, t_next: f64, normalize: bool) -> Result<Vec<f64>> {
    if times.is_empty() {
        return Err(Error::contract("attention mask over an empty timestamp list"));
    }
    if !(t_i < t_next) {
        return Err(Error::contract(format!("interval [{t_i}, {t_next}] is empty")));
    }
    let mid = 0.5 * (t_i + t_next);
    let half = 0.5 * (t_next - t_i);
    let mut bias: Vec<f64> = times
        .iter()
        .map(|&t| {
            if t >= t_i && t <= t_next {
                let d = (t - mid).abs();
                -(if normalize { d / half } else { d })
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    if bias.iter().all(|b| *b == f64::NEG_INFINITY) {
        let dist = |t: f64| if t < t_i { t_i - t } else { t - t_next };
        let mut best = 0;
        for (j, &t) in times.iter().enumerate() {
            if dist(t) < dist(times[best]) {
                best = j;
            }
        }
        bias[best] = 0.0;
    }
    Ok(bias)
}

/// Sinusoidal encoding of absolute hours, `[len x d]`.
pub fn sinusoidal_positions(times: &[f64], d: usize) -> Tensor {
    let mut data = Vec::with_capacity(times.len() * d);
    for &t in times {
        for c in 0..d {
            let freq = 1.0 / 10_000f64.powf((2 * (c / 2)) as f64 / d as f64);
            data.push(if c % 2 == 0 { (t * freq).sin() } else { (t * freq).cos() });
        }
    }
    Tensor::from_parts(vec![times.len(), d], data)
}

/// Repeats one bias row for every query.
fn broadcast_bias(bias: &[f64], queries: usize) -> Tensor {
    let mut data = Vec::with_capacity(bias.len() * queries);
    for _ in 0..queries {
        data.extend_from_slice(bias);
    }
    Tensor::from_parts(vec![queries, bias.len()], data)
}

/// Linear embedding plus positions, then one self-attention encoder layer.
#[derive(Debug, Clone, Copy)]
pub struct EhrEncoder {
    pub n_vars: usize,
    pub d: usize,
    pub input: Linear,
    pub attn: Attention,
    pub ln1: LayerNorm,
    pub ffn: Mlp,
    pub ln2: LayerNorm,
}

impl EhrEncoder {
    pub fn new(b: &mut Builder, n_vars: usize, d: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            n_vars,
            d,
            input: b.linear("ehr.input", n_vars, d)?,
            attn: b.attention("ehr.attn", d, heads)?,
            ln1: b.layer_norm("ehr.ln1", d)?,
            ffn: b.mlp("ehr.ffn", d, 2 * d, d)?,
            ln2: b.layer_norm("ehr.ln2", d)?,
        })
    }

    /// `[(M+1) x N] -> [(M+1) x d]`.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        series: Var,
        times: &[f64],
        dropout: Option<(&mut ChaCha8Rng, f64)>,
    ) -> Result<Var> {
        let (rows, width) = (tape.value(series).rows(), tape.value(series).last_dim());
        if width != self.n_vars {
            return Err(Error::dim(format!("EHR width {width}, expected {}", self.n_vars)));
        }
        if rows != times.len() || rows < 2 {
            return Err(Error::contract(format!("{rows} EHR rows for {} timestamps", times.len())));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::contract("EHR timestamps not strictly increasing"));
        }
        let x = self.input.forward(tape, store, series)?;
        let mut x = tape.add_const(x, &sinusoidal_positions(times, self.d))?;
        if let Some((rng, rate)) = dropout {
            if rate > 0.0 {
                x = tape.mul_const(x, &dropout_mask(rng, rows, self.d, rate))?;
            }
        }
        let a = self.attn.forward(tape, store, x, x, None)?;
        let h = tape.add(x, a.out)?;
        let h = self.ln1.forward(tape, store, h)?;
        let f = self.ffn.forward(tape, store, h)?;
        let h2 = tape.add(h, f)?;
        self.ln2.forward(tape, store, h2)
    }
}

/// Interval-local and sequence-global cross-modal fusion blocks.
#[derive(Debug, Clone, Copy)]
pub struct MultiscaleFusion {
    pub d: usize,
    pub time_mlp: Mlp,
    pub local_attn: Attention,
    pub proj_ehr: Linear,
    pub proj_img: Linear,
    pub local_cross: Attention,
    pub local_ln: LayerNorm,
    pub global_cross: Attention,
    pub global_ln1: LayerNorm,
    pub global_self: Attention,
    pub global_ln2: LayerNorm,
    pub static_attn: Attention,
    pub static_ln: LayerNorm,
    pub normalize_mask: bool,
}

/// Outputs of the local attention for one interval.
pub struct LocalEhr {
    pub e_local: Var,
    pub weights: Var,
}

impl MultiscaleFusion {
    pub fn new(b: &mut Builder, d: usize, normalize_mask: bool) -> Result<Self> {
        Ok(Self {
            d,
            time_mlp: b.mlp("mmf.time", 3, d, d)?,
            local_attn: b.attention("mmf.local_attn", d, 1)?,
            proj_ehr: b.projection("mmf.proj_ehr", d, d)?,
            proj_img: b.projection("mmf.proj_img", d, d)?,
            local_cross: b.attention("mmf.local_cross", d, 1)?,
            local_ln: b.layer_norm("mmf.local_ln", d)?,
            global_cross: b.attention("mmf.global_cross", d, 1)?,
            global_ln1: b.layer_norm("mmf.global_ln1", d)?,
            global_self: b.attention("mmf.global_self", d, 1)?,
            global_ln2: b.layer_norm("mmf.global_ln2", d)?,
            static_attn: b.attention("mmf.static_attn", d, 1)?,
            static_ln: b.layer_norm("mmf.static_ln", d)?,
            normalize_mask,
        })
    }

    /// Time-embedding queries against the global EHR sequence under the
    /// interval mask; returns `E_local` `[(M+1) x d]` and the weights.
    pub fn local_ehr_attend(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        e_global: Var,
        times: &[f64],
        t_i: f64,
        t_next: f64,
    ) -> Result<LocalEhr> {
        let raw = tape.constant(time_features(times, t_i, t_next)?);
        let te = self.time_mlp.forward(tape, store, raw)?;
        let bias = build_attn_mask(times, t_i, t_next, self.normalize_mask)?;
        let bias = broadcast_bias(&bias, times.len());
        let AttnOut { out, weights } = self.local_attn.forward(tape, store, te, e_global, Some(&bias))?;
        Ok(LocalEhr {
            e_local: out,
            weights: weights[0],
        })
    }

    /// `LN(D_local + Attn(D_local, [P_E E_local ; P_D D_local]))`, `[R x d]`.
    pub fn local_fuse(&self, tape: &mut Tape, store: &ParamStore, d_local: Var, e_local: Var) -> Result<Var> {
        let pe = self.proj_ehr.forward(tape, store, e_local)?;
        let pd = self.proj_img.forward(tape, store, d_local)?;
        let kv = tape.concat_rows(&[pe, pd])?;
        let a = self.local_cross.forward(tape, store, d_local, kv, None)?;
        let h = tape.add(d_local, a.out)?;
        self.local_ln.forward(tape, store, h)
    }

    /// EHR rows attend to all fused dynamic rows, then one self-attention layer.
    pub fn global_fuse(&self, tape: &mut Tape, store: &ParamStore, e_global: Var, d_global: Var) -> Result<Var> {
        if tape.value(d_global).numel() == 0 {
            return Err(Error::contract("global fusion needs at least one dynamic row"));
        }
        let a = self.global_cross.forward(tape, store, e_global, d_global, None)?;
        let h = tape.add(e_global, a.out)?;
        let h = self.global_ln1.forward(tape, store, h)?;
        let s = self.global_self.forward(tape, store, h, h, None)?;
        let h2 = tape.add(h, s.out)?;
        self.global_ln2.forward(tape, store, h2)
    }

    /// Queries `[D_global ; H_global]` attend to `H_static`; returns the fused
    /// rows and the attention weights `[queries x static rows]`.
    pub fn static_attend(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        d_global: Var,
        h_global: Var,
        h_static: Var,
    ) -> Result<(Var, Var)> {
        let q = tape.concat_rows(&[d_global, h_global])?;
        let a = self.static_attn.forward(tape, store, q, h_static, None)?;
        let h = tape.add(q, a.out)?;
        let z = self.static_ln.forward(tape, store, h)?;
        Ok((z, a.weights[0]))
    }
}

/// `[S rows ; demographic row]`.
pub fn static_fuse(
    tape: &mut Tape,
    store: &ParamStore,
    dem_mlp: &Mlp,
    statics: Var,
    demographics: &[f64],
    n_dem: usize,
) -> Result<Var> {
    if demographics.len() != n_dem {
        return Err(Error::dim(format!("{} demographic values, expected {n_dem}", demographics.len())));
    }
    let x = tape.constant(Tensor::matrix(1, n_dem, demographics.to_vec())?);
    let dem = dem_mlp.forward(tape, store, x)?;
    tape.concat_rows(&[statics, dem])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::rng::stream;
    use proptest::prelude::*;

    fn mat(n: usize, c: usize, phase: f64) -> Tensor {
        Tensor::new(vec![n, c], (0..n * c).map(|i| (i as f64 * 0.57 + phase).sin()).collect()).unwrap()
    }

    fn build(d: usize) -> (ParamStore, EhrEncoder, MultiscaleFusion, Mlp) {
        let mut store = ParamStore::new();
        let mut rng = stream(5, 0);
        let mut b = Builder { store: &mut store, rng: &mut rng };
        let enc = EhrEncoder::new(&mut b, 3, d, 4).unwrap();
        let mmf = MultiscaleFusion::new(&mut b, d, false).unwrap();
        let dem = b.mlp("dem", 2, d, d).unwrap();
        (store, enc, mmf, dem)
    }

    #[test]
    fn time_embedding_examples() {
        let r = time_embed_raw(5.0, 0.0, 10.0).unwrap();
        assert_eq!(&r[..2], &[5.0, 5.0]);
        assert!((r[2] - 1.0).abs() < 1e-10);
        assert_eq!(time_embed_raw(0.0, 0.0, 10.0).unwrap()[2], 0.5);
        assert_eq!(time_embed_raw(10.0, 0.0, 10.0).unwrap()[2], 0.5);
        let r = time_embed_raw(12.0, 0.0, 10.0).unwrap();
        assert_eq!(&r[..2], &[12.0, -2.0]);
        assert!(r[2] < 1e-10);
        assert!(time_embed_raw(1.0, 3.0, 3.0).is_err());
    }

    #[test]
    fn indicator_calibration() {
        for j in 0..=30 {
            let t = j as f64 * 0.5;
            let v = time_embed_raw(t, 4.0, 9.0).unwrap()[2];
            if t > 4.0 && t < 9.0 {
                assert!(v > 0.5);
            } else if t == 4.0 || t == 9.0 {
                assert_eq!(v, 0.5);
            } else {
                assert!(v < 0.5);
            }
        }
    }

    #[test]
    fn mask_examples() {
        let m = build_attn_mask(&[5.0, 2.0, 11.0, 0.0, 10.0], 0.0, 10.0, false).unwrap();
        assert_eq!(m[0], 0.0);
        assert_eq!(m[1], -3.0);
        assert_eq!(m[2], f64::NEG_INFINITY);
        assert_eq!(m[3], -5.0);
        assert_eq!(m[4], -5.0);
        let n = build_attn_mask(&[2.0, 11.0], 0.0, 10.0, true).unwrap();
        assert!((n[0] + 0.6).abs() < 1e-15);
        assert!(build_attn_mask(&[], 0.0, 1.0, false).is_err());
        assert!(build_attn_mask(&[1.0], 2.0, 1.0, false).is_err());
    }

    #[test]
    fn empty_interval_falls_back_to_nearest() {
        let m = build_attn_mask(&[0.0, 1.0, 8.0, 9.0], 3.0, 5.0, false).unwrap();
        assert_eq!(m, vec![f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY, f64::NEG_INFINITY]);
    }

    #[test]
    fn encoder_shape_position_sensitivity_and_gradients() {
        let (store, enc, _, _) = build(8);
        let times = [0.0, 1.0, 2.5, 4.0];
        let x = mat(4, 3, 0.2);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let e = enc.encode(&mut tape, &store, xv, &times, None).unwrap();
        assert_eq!(tape.value(e).shape(), &[4, 8]);

        // same rows in a different order with the timestamps kept in place
        let perm: Vec<Vec<f64>> = [2, 0, 3, 1].iter().map(|&i| x.row(i).to_vec()).collect();
        let pv = tape.constant(Tensor::from_rows(&perm).unwrap());
        let ep = enc.encode(&mut tape, &store, pv, &times, None).unwrap();
        assert_ne!(tape.value(ep).row(0), tape.value(e).row(2));

        let bad = [0.0, 2.0, 2.0, 3.0];
        assert!(matches!(enc.encode(&mut tape, &store, xv, &bad, None), Err(Error::Contract(_))));

        let err = grad_check(
            &store,
            |tape, s| {
                let xv = tape.constant(x.clone());
                let e = enc.encode(tape, s, xv, &times, None)?;
                let c = tape.constant(mat(4, 8, 1.0));
                let p = tape.mul(e, c)?;
                Ok(tape.sum(p))
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn local_attention_respects_mask() {
        let (store, _, mmf, _) = build(8);
        let times: Vec<f64> = (0..12).map(|j| j as f64).collect();
        let mut tape = Tape::new();
        let eg = tape.constant(mat(12, 8, 0.4));
        let loc = mmf.local_ehr_attend(&mut tape, &store, eg, &times, 2.5, 6.0).unwrap();
        let w = tape.value(loc.weights);
        for r in 0..12 {
            let row = w.row(r);
            let inside: f64 = (3..=6).map(|j| row[j]).sum();
            assert!((inside - 1.0).abs() < 1e-12);
            for j in (0..3).chain(7..12) {
                assert_eq!(row[j], 0.0);
            }
        }
        assert_eq!(tape.value(loc.e_local).shape(), &[12, 8]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn local_attention_ignores_rows_outside_interval(
            gaps in proptest::collection::vec(0.1f64..3.0, 3..12),
            a in 0.0f64..1.0,
            w in 0.05f64..1.0,
            noise in -5.0f64..5.0,
        ) {
            let (store, _, mmf, _) = build(8);
            let mut times = vec![0.0];
            for g in &gaps {
                times.push(times.last().unwrap() + g);
            }
            let span = *times.last().unwrap();
            let t_i = a * span;
            let t_next = t_i + w * (span - t_i).max(0.1);
            let inside: Vec<bool> = times.iter().map(|&t| t >= t_i && t <= t_next).collect();
            prop_assume!(inside.iter().any(|b| *b));
            let m = times.len();
            let base = mat(m, 8, 0.7);
            let mut moved = base.clone();
            for (j, keep) in inside.iter().enumerate() {
                if !keep {
                    for v in &mut moved.data_mut()[j * 8..(j + 1) * 8] {
                        *v += noise + 1.0;
                    }
                }
            }
            let run = |e: &Tensor| {
                let mut tape = Tape::new();
                let eg = tape.constant(e.clone());
                let loc = mmf.local_ehr_attend(&mut tape, &store, eg, &times, t_i, t_next).unwrap();
                (tape.value(loc.e_local).clone(), tape.value(loc.weights).clone())
            };
            let (e0, w0) = run(&base);
            let (e1, _) = run(&moved);
            prop_assert_eq!(e0.data(), e1.data());
            for r in 0..m {
                let row = w0.row(r);
                let mass: f64 = (0..m).filter(|&j| inside[j]).map(|j| row[j]).sum();
                prop_assert!((mass - 1.0).abs() < 1e-12);
                for j in (0..m).filter(|&j| !inside[j]) {
                    prop_assert_eq!(row[j], 0.0);
                }
            }
        }
    }

    #[test]
    fn single_unmasked_timestamp_copies_its_value() {
        let (store, _, mmf, _) = build(8);
        let times = [0.0, 1.0, 5.0];
        let mut tape = Tape::new();
        let eg = tape.constant(mat(3, 8, 0.9));
        let loc = mmf.local_ehr_attend(&mut tape, &store, eg, &times, 0.5, 2.0).unwrap();
        let v = mmf.local_attn.wv.forward(&mut tape, &store, eg).unwrap();
        for r in 0..3 {
            assert_eq!(tape.value(loc.e_local).row(r), tape.value(v).row(1));
        }
    }

    #[test]
    fn fusion_shapes_and_gradients() {
        let (store, enc, mmf, dem) = build(8);
        let times = [0.0, 1.0, 2.0, 3.0, 4.0];
        let ehr = mat(5, 3, 0.1);
        let dyn_rows = mat(2, 8, 0.5);
        let stat_rows = mat(2, 8, 1.5);
        let forward = |tape: &mut Tape, s: &ParamStore| -> Result<(Var, Var, Var, Var)> {
            let x = tape.constant(ehr.clone());
            let eg = enc.encode(tape, s, x, &times, None)?;
            let loc = mmf.local_ehr_attend(tape, s, eg, &times, 0.5, 3.0)?;
            let dl = tape.constant(dyn_rows.clone());
            let df = mmf.local_fuse(tape, s, dl, loc.e_local)?;
            let hg = mmf.global_fuse(tape, s, eg, df)?;
            let st = tape.constant(stat_rows.clone());
            let hs = static_fuse(tape, s, &dem, st, &[0.3, -0.2], 2)?;
            let (z, w) = mmf.static_attend(tape, s, df, hg, hs)?;
            Ok((df, hg, z, w))
        };
        let mut tape = Tape::new();
        let (df, hg, z, w) = forward(&mut tape, &store).unwrap();
        assert_eq!(tape.value(df).shape(), &[2, 8]);
        assert_eq!(tape.value(hg).shape(), &[5, 8]);
        assert_eq!(tape.value(z).shape(), &[7, 8]);
        assert_eq!(tape.value(w).shape(), &[7, 3]);
        let err = grad_check(
            &store,
            |tape, s| {
                let (_, _, z, _) = forward(tape, s)?;
                let c = tape.constant(mat(7, 8, 2.0));
                let p = tape.mul(z, c)?;
                Ok(tape.sum(p))
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn single_dynamic_row_gets_full_weight() {
        let (store, _, mmf, _) = build(8);
        let mut tape = Tape::new();
        let eg = tape.constant(mat(4, 8, 0.0));
        let d1 = tape.constant(mat(1, 8, 3.0));
        let a = mmf.global_cross.forward(&mut tape, &store, eg, d1, None).unwrap();
        assert!(tape.value(a.weights[0]).data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn static_fuse_rows_and_zero_weights() {
        let (mut store, _, _, dem) = build(8);
        for id in [dem.first.w, dem.second.w] {
            store.get_mut(id).data_mut().fill(0.0);
        }
        store.get_mut(dem.second.b.unwrap()).data_mut().fill(0.25);
        let mut tape = Tape::new();
        let st = tape.constant(mat(6, 8, 0.0));
        let h = static_fuse(&mut tape, &store, &dem, st, &[1.0, 2.0], 2).unwrap();
        assert_eq!(tape.value(h).rows(), 7);
        assert!(tape.value(h).row(6).iter().all(|v| *v == 0.25));
        assert!(matches!(static_fuse(&mut tape, &store, &dem, st, &[1.0], 2), Err(Error::Dimension(_))));
    }
}
