//! The assembled model, its ablation variants, and the composite objective.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::cohort::{label_to_class, CohortConfig, Episode};
use crate::disentangle::{loss_orth_episode, loss_temp, Disentangler, RegionEncoder};
use crate::error::{Error, Result};
use crate::fusion::{static_fuse, EhrEncoder, LocalEhr, MultiscaleFusion};
use crate::nn::{dropout_mask, Attention, Builder, LayerNorm, Mlp};
use crate::progression::{loss_pae, present_slots, slot_cross_entropy, ProgressionHeads};
use crate::rng::{stream, streams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Mortality,
    Los,
    Progression,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Mortality, Task::Los, Task::Progression];

    /// Output classes of the task head (per slot for progression).
    pub fn num_classes(self) -> usize {
        match self {
            Task::Mortality => 2,
            Task::Los => 4,
            Task::Progression => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Mortality => "mortality",
            Task::Los => "los",
            Task::Progression => "progression",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mortality" => Ok(Task::Mortality),
            "los" => Ok(Task::Los),
            "progression" => Ok(Task::Progression),
            _ => Err(Error::contract(format!("unknown task {s:?} (mortality, los, progression)"))),
        }
    }
}

/// Model variant: the full model or one of the module/loss ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Variant {
    #[default]
    #[serde(rename = "full")]
    Full,
    /// simple concatenate-and-attend fusion instead of multiscale fusion
    A1,
    /// no reversal objective
    A2,
    /// A1 and A2 together
    A3,
    /// A3 without static/dynamic splitting
    A4,
    /// no orthogonality term
    B1,
    /// no reversal term
    B2,
    /// no temporal-consistency term
    B3,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Full,
        Variant::A1,
        Variant::A2,
        Variant::A3,
        Variant::A4,
        Variant::B1,
        Variant::B2,
        Variant::B3,
    ];

    pub fn uses_multiscale_fusion(self) -> bool {
        !matches!(self, Variant::A1 | Variant::A3 | Variant::A4)
    }

    pub fn uses_disentangle(self) -> bool {
        self != Variant::A4
    }

    pub fn uses_reversal(self) -> bool {
        !matches!(self, Variant::A2 | Variant::A3 | Variant::A4 | Variant::B2)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::A1 => "A1",
            Variant::A2 => "A2",
            Variant::A3 => "A3",
            Variant::A4 => "A4",
            Variant::B1 => "B1",
            Variant::B2 => "B2",
            Variant::B3 => "B3",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::contract(format!("unknown ablation {s:?} (full, A1-A4, B1-B3)")))
    }
}

/// Input dimensions shared by the cohort and the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub d_in: usize,
    pub regions: usize,
    pub diseases: usize,
    pub n_ehr: usize,
    pub n_dem: usize,
}

impl From<&CohortConfig> for Dims {
    fn from(c: &CohortConfig) -> Self {
        Self {
            d_in: c.d_in,
            regions: c.regions,
            diseases: c.diseases,
            n_ehr: c.n_ehr,
            n_dem: c.n_dem,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub ehr_heads: usize,
    pub fusion_heads: usize,
    pub dropout: f64,
    /// divide mask distances by the interval half-width
    pub normalize_mask: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            ehr_heads: 4,
            fusion_heads: 4,
            dropout: 0.1,
            normalize_mask: false,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum PairModule {
    Split(Disentangler),
    Plain(Mlp),
}

#[derive(Debug, Clone, Copy)]
enum FusionModule {
    Multiscale(MultiscaleFusion),
    Simple { attn: Attention, ln: LayerNorm },
}

#[derive(Debug, Clone)]
pub struct Model {
    pub dims: Dims,
    pub config: ModelConfig,
    pub task: Task,
    pub variant: Variant,
    pub params: ParamStore,
    encoder: RegionEncoder,
    pair: PairModule,
    ehr: EhrEncoder,
    dem: Mlp,
    fusion: FusionModule,
    /// per-disease heads on raw dynamic features, trained by the reversal objective
    heads: Option<ProgressionHeads>,
    /// per-disease heads on fused rows for the progression task
    task_heads: Option<ProgressionHeads>,
    task_head: Option<Mlp>,
}

/// Recorded forward pass of one episode.
pub struct Forward {
    /// `[(T-1)*R x d]`, interval-major; absent without static/dynamic splitting
    pub statics: Option<Var>,
    pub dynamics: Var,
    pub statics_rev: Option<Var>,
    pub dynamics_rev: Option<Var>,
    /// fused dynamic rows fed to the progression heads
    pub fused_dynamic: Var,
    /// `[1 x classes]` for mortality and length of stay
    pub task_logits: Option<Var>,
    /// `[queries x ((T-1)*R + 1)]` weights over static rows and the demographic row
    pub static_attention: Option<Var>,
    pub e_global: Var,
    pub local: Vec<LocalEhr>,
}

impl Model {
    pub fn new(dims: Dims, config: ModelConfig, task: Task, variant: Variant, seed: u64) -> Result<Self> {
        let d = config.hidden;
        if d == 0 || dims.regions == 0 || dims.diseases == 0 {
            return Err(Error::Config("model dimensions must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", config.dropout)));
        }
        let mut params = ParamStore::new();
        let mut rng = stream(seed, streams::INIT);
        let mut b = Builder {
            store: &mut params,
            rng: &mut rng,
        };
        let encoder = RegionEncoder::new(&mut b, dims.d_in, d)?;
        let pair = if variant.uses_disentangle() {
            PairModule::Split(Disentangler::new(&mut b, d)?)
        } else {
            PairModule::Plain(b.mlp("pair_mlp", 2 * d, 2 * d, d)?)
        };
        let ehr = EhrEncoder::new(&mut b, dims.n_ehr, d, config.ehr_heads)?;
        let dem = b.mlp("demographics", dims.n_dem, d, d)?;
        let fusion = if variant.uses_multiscale_fusion() {
            FusionModule::Multiscale(MultiscaleFusion::new(&mut b, d, config.normalize_mask)?)
        } else {
            FusionModule::Simple {
                attn: b.attention("simple_fusion.attn", d, config.fusion_heads)?,
                ln: b.layer_norm("simple_fusion.ln", d)?,
            }
        };
        let heads = if variant.uses_reversal() {
            Some(ProgressionHeads::new(&mut b, d, dims.diseases)?)
        } else {
            None
        };
        let task_heads = if task == Task::Progression {
            Some(ProgressionHeads::named(&mut b, "fusion_head", d, dims.diseases)?)
        } else {
            None
        };
        let task_head = match task {
            Task::Progression => None,
            t => Some(b.mlp(&format!("{}_head", t.name()), d, d, t.num_classes())?),
        };
        Ok(Self {
            dims,
            config,
            task,
            variant,
            params,
            encoder,
            pair,
            ehr,
            dem,
            fusion,
            heads,
            task_heads,
            task_head,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn has_reversal_heads(&self) -> bool {
        self.heads.is_some()
    }

    pub fn heads(&self) -> Option<&ProgressionHeads> {
        self.heads.as_ref()
    }

    fn check_episode(&self, ep: &Episode) -> Result<()> {
        ep.validate()?;
        let dims = [
            ("regions", ep.num_regions(), self.dims.regions),
            ("diseases", ep.num_diseases(), self.dims.diseases),
            ("d_in", ep.region_features[0][0].len(), self.dims.d_in),
            ("EHR variables", ep.ehr_values[0].len(), self.dims.n_ehr),
            ("demographics", ep.demographics.len(), self.dims.n_dem),
        ];
        for (name, got, want) in dims {
            if got != want {
                return Err(Error::dim(format!("{}: {name} {got}, model expects {want}", ep.patient_id)));
            }
        }
        Ok(())
    }

    /// Records the forward pass. `dropout` supplies the mask stream during
    /// training; `reverse` additionally computes the reversed pairs.
    pub fn forward(
        &self,
        tape: &mut Tape,
        ep: &Episode,
        mut dropout: Option<&mut ChaCha8Rng>,
        reverse: bool,
    ) -> Result<Forward> {
        self.check_episode(ep)?;
        let store = &self.params;
        let t = ep.num_snapshots();
        let r = self.dims.regions;
        let d = self.config.hidden;

        let rows: Vec<Vec<f64>> = ep.region_features.iter().flatten().cloned().collect();
        let x = tape.constant(Tensor::from_rows(&rows)?);
        let feats = self.encoder.encode(tape, store, x)?;
        let early_idx: Vec<usize> = (0..(t - 1) * r).collect();
        let late_idx: Vec<usize> = (r..t * r).collect();
        let early = tape.gather_rows(feats, &early_idx)?;
        let late = tape.gather_rows(feats, &late_idx)?;

        let (statics, dynamics, statics_rev, dynamics_rev) = match &self.pair {
            PairModule::Split(dis) => {
                let (s, dy) = dis.split(tape, store, early, late)?;
                let (sr, dr) = if reverse {
                    let (a, b) = dis.split(tape, store, late, early)?;
                    (Some(a), Some(b))
                } else {
                    (None, None)
                };
                (Some(s), dy, sr, dr)
            }
            PairModule::Plain(mlp) => {
                let pair = tape.concat_cols(&[early, late])?;
                (None, mlp.forward(tape, store, pair)?, None, None)
            }
        };

        let ehr_x = tape.constant(Tensor::from_rows(&ep.ehr_values)?);
        let rate = self.config.dropout;
        let e_global = self.ehr.encode(
            tape,
            store,
            ehr_x,
            &ep.ehr_times,
            dropout.as_deref_mut().map(|g| (g, rate)),
        )?;

        let dem_input = tape.constant(Tensor::matrix(1, self.dims.n_dem, ep.demographics.clone())?);
        let mut local = Vec::new();
        let (z, dyn_rows, static_attention) = match &self.fusion {
            FusionModule::Multiscale(mmf) => {
                let mut fused = Vec::with_capacity(t - 1);
                for i in 0..t - 1 {
                    let loc = mmf.local_ehr_attend(
                        tape,
                        store,
                        e_global,
                        &ep.ehr_times,
                        ep.snapshot_times[i],
                        ep.snapshot_times[i + 1],
                    )?;
                    let d_local = tape.slice_rows(dynamics, i * r, (i + 1) * r)?;
                    fused.push(mmf.local_fuse(tape, store, d_local, loc.e_local)?);
                    local.push(loc);
                }
                let d_global = tape.concat_rows(&fused)?;
                let h_global = mmf.global_fuse(tape, store, e_global, d_global)?;
                let s_rows = statics.expect("multiscale fusion implies static features");
                let h_static = static_fuse(tape, store, &self.dem, s_rows, &ep.demographics, self.dims.n_dem)?;
                let (z, w) = mmf.static_attend(tape, store, d_global, h_global, h_static)?;
                (z, (t - 1) * r, Some(w))
            }
            FusionModule::Simple { attn, ln } => {
                let dem_row = self.dem.forward(tape, store, dem_input)?;
                let mut tokens = vec![dynamics];
                if let Some(s) = statics {
                    tokens.push(s);
                }
                tokens.push(e_global);
                tokens.push(dem_row);
                let x = tape.concat_rows(&tokens)?;
                let a = attn.forward(tape, store, x, x, None)?;
                let h = tape.add(x, a.out)?;
                (ln.forward(tape, store, h)?, (t - 1) * r, None)
            }
        };
        let mut fused_dynamic = tape.slice_rows(z, 0, dyn_rows)?;

        let task_logits = match &self.task_head {
            Some(head) => {
                let mut pooled = tape.mean_rows(z);
                if let Some(g) = dropout.as_deref_mut() {
                    if rate > 0.0 {
                        pooled = tape.mul_const(pooled, &dropout_mask(g, 1, d, rate))?;
                    }
                }
                Some(head.forward(tape, store, pooled)?)
            }
            None => {
                if let Some(g) = dropout.as_deref_mut() {
                    if rate > 0.0 {
                        fused_dynamic = tape.mul_const(fused_dynamic, &dropout_mask(g, dyn_rows, d, rate))?;
                    }
                }
                None
            }
        };

        Ok(Forward {
            statics,
            dynamics,
            statics_rev,
            dynamics_rev,
            fused_dynamic,
            task_logits,
            static_attention,
            e_global,
            local,
        })
    }
}

/// Weights of the composite objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub pred: f64,
    pub orth: f64,
    pub temp: f64,
    pub pae: f64,
    /// weight of the static reversal-consistency term inside the reversal objective
    pub static_rev: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::preset(Task::Progression)
    }
}

impl LossWeights {
    /// Tuned per-task weights (pred, orth, temp, reversal).
    pub fn preset(task: Task) -> Self {
        let (pred, orth, temp, pae) = match task {
            Task::Mortality => (6.0, 0.1, 1.0, 0.1),
            Task::Los => (10.0, 0.001, 0.1, 0.1),
            Task::Progression => (2.0, 1.0, 0.0, 2.0),
        };
        Self {
            pred,
            orth,
            temp,
            pae,
            static_rev: 0.01,
        }
    }

    /// Weights with the terms removed by `variant` set to zero.
    pub fn for_variant(self, variant: Variant) -> Self {
        let mut w = self;
        if !variant.uses_reversal() {
            w.pae = 0.0;
        }
        if !variant.uses_disentangle() || variant == Variant::B1 {
            w.orth = 0.0;
        }
        if !variant.uses_disentangle() || variant == Variant::B3 {
            w.temp = 0.0;
        }
        w
    }

    pub fn validate(&self) -> Result<()> {
        for (n, v) in [
            ("pred", self.pred),
            ("orth", self.orth),
            ("temp", self.temp),
            ("pae", self.pae),
            ("static_rev", self.static_rev),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {n} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Unweighted values of each objective term for one episode.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub pred: f64,
    pub orth: f64,
    pub temp: f64,
    pub pae: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn add(&mut self, o: &LossTerms) {
        self.pred += o.pred;
        self.orth += o.orth;
        self.temp += o.temp;
        self.pae += o.pae;
        self.total += o.total;
    }

    pub fn scale(&mut self, s: f64) {
        self.pred *= s;
        self.orth *= s;
        self.temp *= s;
        self.pae *= s;
        self.total *= s;
    }
}

impl Model {
    /// Task cross-entropy for the episode.
    fn prediction_loss(&self, tape: &mut Tape, ep: &Episode, fwd: &Forward) -> Result<Var> {
        match self.task {
            Task::Mortality | Task::Los => {
                let target = if self.task == Task::Mortality {
                    ep.mortality as usize
                } else {
                    ep.los_class as usize
                };
                let logits = fwd.task_logits.expect("task head present");
                tape.cross_entropy(logits, target)
            }
            Task::Progression => {
                let heads = self.task_heads.as_ref().expect("progression heads present");
                let slots = present_slots(&ep.progression_labels);
                match slot_cross_entropy(tape, &self.params, heads, fwd.fused_dynamic, &slots, false)? {
                    Some(s) => Ok(tape.scale(s, 1.0 / slots.len() as f64)),
                    None => Ok(tape.constant(Tensor::scalar(0.0))),
                }
            }
        }
    }

    /// Weighted composite objective and its unweighted terms. Terms with zero
    /// weight are not recorded.
    pub fn loss(&self, tape: &mut Tape, ep: &Episode, fwd: &Forward, w: &LossWeights) -> Result<(Var, LossTerms)> {
        let mut terms = LossTerms::default();
        let mut parts: Vec<Var> = Vec::new();
        let mut record = |tape: &mut Tape, name: &str, v: Var, weight: f64, slot: &mut f64| -> Result<()> {
            let x = tape.value(v).item();
            if !x.is_finite() {
                return Err(Error::numeric(format!("loss term {name} is not finite ({x})")));
            }
            *slot = x;
            parts.push(tape.scale(v, weight));
            Ok(())
        };
        let pred = self.prediction_loss(tape, ep, fwd)?;
        record(tape, "pred", pred, w.pred, &mut terms.pred)?;
        if w.orth > 0.0 {
            if let Some(s) = fwd.statics {
                let l = loss_orth_episode(tape, s, fwd.dynamics)?;
                record(tape, "orth", l, w.orth, &mut terms.orth)?;
            }
        }
        if w.temp > 0.0 {
            if let Some(s) = fwd.statics {
                let l = loss_temp(tape, s, self.dims.regions)?;
                record(tape, "temp", l, w.temp, &mut terms.temp)?;
            }
        }
        if w.pae > 0.0 {
            if let (Some(s), Some(sr), Some(dr), Some(heads)) =
                (fwd.statics, fwd.statics_rev, fwd.dynamics_rev, self.heads.as_ref())
            {
                let l = loss_pae(
                    tape,
                    &self.params,
                    heads,
                    fwd.dynamics,
                    dr,
                    s,
                    sr,
                    &ep.progression_labels,
                    w.static_rev,
                )?;
                record(tape, "pae", l, w.pae, &mut terms.pae)?;
            }
        }
        let mut total = parts[0];
        for p in &parts[1..] {
            total = tape.add(total, *p)?;
        }
        terms.total = tape.value(total).item();
        if !terms.total.is_finite() {
            return Err(Error::numeric("total loss is not finite"));
        }
        Ok((total, terms))
    }

    /// Whether training this model with `w` needs the reversed pass.
    pub fn needs_reverse(&self, w: &LossWeights) -> bool {
        w.pae > 0.0 && self.variant.uses_reversal() && self.variant.uses_disentangle()
    }
}

/// Post-softmax outputs for one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodePrediction {
    /// mortality / length-of-stay class probabilities
    pub task_probs: Option<Vec<f64>>,
    /// `(row, disease, true label, probabilities)` for every annotated slot
    pub slots: Vec<(usize, usize, i8, Vec<f64>)>,
    /// normalized attention mass per region, when the model has static attention
    pub region_attention: Option<Vec<f64>>,
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

impl Model {
    /// Evaluation-mode prediction (no dropout).
    pub fn predict(&self, ep: &Episode) -> Result<EpisodePrediction> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, ep, None, false)?;
        let task_probs = fwd.task_logits.map(|l| softmax(tape.value(l).data()));
        let mut slots = Vec::new();
        if self.task == Task::Progression {
            let heads = self.task_heads.as_ref().expect("progression heads present");
            for (row, k, y) in present_slots(&ep.progression_labels) {
                label_to_class(y)?;
                let x = tape.gather_rows(fwd.fused_dynamic, &[row])?;
                let l = heads.logits(&mut tape, &self.params, x, k)?;
                slots.push((row, k, y, softmax(tape.value(l).data())));
            }
        }
        let region_attention = fwd
            .static_attention
            .map(|w| region_mass(tape.value(w), self.dims.regions));
        Ok(EpisodePrediction {
            task_probs,
            slots,
            region_attention,
        })
    }

    /// Static/dynamic pair features in both directions as plain rows.
    pub fn pair_features(&self, ep: &Episode) -> Result<PairFeatures> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, ep, None, true)?;
        let mut reversed_logits = Vec::new();
        let mut forward_logits = Vec::new();
        if let (Some(heads), Some(dr)) = (self.heads.as_ref(), fwd.dynamics_rev) {
            for k in 0..heads.len() {
                let a = heads.logits(&mut tape, &self.params, fwd.dynamics, k)?;
                let b = heads.logits(&mut tape, &self.params, dr, k)?;
                forward_logits.push(tape.value(a).clone());
                reversed_logits.push(tape.value(b).clone());
            }
        }
        let rows = |v: Option<Var>| -> Vec<Vec<f64>> {
            v.map(|v| {
                let t = tape.value(v);
                (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
            })
            .unwrap_or_default()
        };
        Ok(PairFeatures {
            statics: rows(fwd.statics),
            dynamics: rows(Some(fwd.dynamics)),
            statics_rev: rows(fwd.statics_rev),
            dynamics_rev: rows(fwd.dynamics_rev),
            forward_logits,
            reversed_logits,
        })
    }
}

/// Per-episode pair representations, interval-major rows.
#[derive(Debug, Clone)]
pub struct PairFeatures {
    pub statics: Vec<Vec<f64>>,
    pub dynamics: Vec<Vec<f64>>,
    pub statics_rev: Vec<Vec<f64>>,
    pub dynamics_rev: Vec<Vec<f64>>,
    /// per disease: head logits `[(T-1)*R x 3]` on D and on D_rev
    pub forward_logits: Vec<Tensor>,
    pub reversed_logits: Vec<Tensor>,
}

/// Average attention mass on each region's static rows, normalized over regions.
/// Columns are laid out interval-major with a trailing demographic column.
pub fn region_mass(weights: &Tensor, regions: usize) -> Vec<f64> {
    let cols = weights.last_dim();
    let mut mass = vec![0.0; regions];
    for q in 0..weights.rows() {
        let row = weights.row(q);
        for (c, w) in row.iter().enumerate().take(cols - 1) {
            mass[c % regions] += w;
        }
    }
    let total: f64 = mass.iter().sum();
    if total > 0.0 {
        for m in &mut mass {
            *m /= total;
        }
    } else {
        mass.fill(1.0 / regions as f64);
    }
    mass
}
