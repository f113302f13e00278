//! Bottleneck models: Bool/Fuzzy concept bottlenecks, concept embedding
//! models and the reliability-enhanced variant that adds disentanglement and
//! concept mixup on top of the embedding path.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::nn::{Linear, ParamStore, Tape};
use crate::reliability::{Disentangler, LossWeights};
use crate::rng::{self, Rng};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    BoolCbm,
    FuzzyCbm,
    Cem,
    Recem,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::BoolCbm, Variant::FuzzyCbm, Variant::Cem, Variant::Recem];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::BoolCbm => "bool_cbm",
            Variant::FuzzyCbm => "fuzzy_cbm",
            Variant::Cem => "cem",
            Variant::Recem => "recem",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "bool_cbm" | "boolcbm" | "bool" => Ok(Variant::BoolCbm),
            "fuzzy_cbm" | "fuzzycbm" | "fuzzy" => Ok(Variant::FuzzyCbm),
            "cem" => Ok(Variant::Cem),
            "recem" => Ok(Variant::Recem),
            other => Err(Error::config(format!("unknown variant `{other}`"))),
        }
    }
}

/// Source of the active-concept means used by concept mixup.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MeanMode {
    /// Recomputed from each mini-batch.
    Batch,
    /// Exponential moving average across mini-batches.
    Ema { decay: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Attaches disentanglement and mixup to the Bool/Fuzzy bottlenecks.
    pub mechanisms: bool,
    pub num_concepts: usize,
    pub num_classes: usize,
    pub emb_dim: usize,
    pub input_dim: usize,
    pub n_hidden: usize,
    pub grl_lambda: f64,
    pub randint_prob: f64,
    pub weights: LossWeights,
    pub beta_max: f64,
    /// Epochs to reach `beta_max`; `None` means 30% of the training epochs.
    pub beta_warmup_epochs: Option<usize>,
    /// Overrides `beta_max` for the HSIC weight only.
    pub hsic_beta_max: Option<f64>,
    /// Overrides `beta_max` for the mixup coefficient only.
    pub mixup_beta_max: Option<f64>,
    pub mean_mode: MeanMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Recem,
            mechanisms: false,
            num_concepts: 16,
            num_classes: 8,
            emb_dim: 16,
            input_dim: 64,
            n_hidden: 64,
            grl_lambda: 1.0,
            randint_prob: 0.25,
            weights: LossWeights::default(),
            beta_max: 0.2,
            beta_warmup_epochs: None,
            hsic_beta_max: None,
            mixup_beta_max: None,
            mean_mode: MeanMode::Batch,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_concepts", self.num_concepts),
            ("num_classes", self.num_classes),
            ("emb_dim", self.emb_dim),
            ("input_dim", self.input_dim),
            ("n_hidden", self.n_hidden),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        if self.mechanisms && matches!(self.variant, Variant::Cem | Variant::Recem) {
            return Err(Error::config(
                "`mechanisms` applies to bool_cbm/fuzzy_cbm; use variant = recem for the embedding model",
            ));
        }
        if !(self.grl_lambda >= 0.0 && self.grl_lambda.is_finite()) {
            return Err(Error::config("grl_lambda must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.randint_prob) {
            return Err(Error::config("randint_prob must lie in [0, 1]"));
        }
        self.weights.validate()?;
        for (name, b) in [
            ("beta_max", Some(self.beta_max)),
            ("hsic_beta_max", self.hsic_beta_max),
            ("mixup_beta_max", self.mixup_beta_max),
        ] {
            if let Some(b) = b {
                if !(0.0..=1.0).contains(&b) {
                    return Err(Error::config(format!("{name} must lie in [0, 1]")));
                }
            }
        }
        if self.beta_warmup_epochs == Some(0) {
            return Err(Error::config("beta_warmup_epochs must be positive"));
        }
        if let MeanMode::Ema { decay } = self.mean_mode {
            if !(0.0..1.0).contains(&decay) {
                return Err(Error::config("ema decay must lie in [0, 1)"));
            }
        }
        Ok(())
    }

    /// Disentanglement and mixup are active.
    pub fn has_mechanisms(&self) -> bool {
        self.variant == Variant::Recem || self.mechanisms
    }

    /// Concepts are produced by per-concept positive/negative embeddings.
    pub fn uses_embeddings(&self) -> bool {
        matches!(self.variant, Variant::Cem | Variant::Recem) || self.mechanisms
    }

    /// Width of the label predictor's input.
    pub fn bottleneck_width(&self) -> usize {
        match self.variant {
            Variant::Cem | Variant::Recem => self.num_concepts * self.emb_dim,
            Variant::BoolCbm | Variant::FuzzyCbm => self.num_concepts,
        }
    }

    /// Human-readable model label, e.g. `fuzzy_cbm+mech`.
    pub fn label(&self) -> String {
        if self.mechanisms {
            format!("{}+mech", self.variant)
        } else {
            self.variant.to_string()
        }
    }
}

/// Training mode carries the concept labels; evaluation never sees them.
pub enum Mode<'a> {
    Train { concepts: &'a [u8], rng: &'a mut Rng },
    Eval,
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub h: Var,
    /// Predicted concept probabilities `[B, K]`.
    pub p_hat: Var,
    /// Probabilities after train-time random interventions; equals `p_hat` in eval.
    pub p_used: Var,
    pub c_plus: Option<Var>,
    pub c_minus: Option<Var>,
    /// Mixed concept embeddings `[B, K, d]` built from `p_used`.
    pub c_mixed: Option<Var>,
    /// Label-predictor input.
    pub bottleneck: Var,
    pub logits: Var,
    pub z_hat: Option<Var>,
    pub adv_logits: Option<Var>,
    pub adv_probs: Option<Var>,
    /// Embeddings selected by the ground-truth concepts `[B, K, d]` (train only).
    pub c_true: Option<Var>,
    pub h_rec: Option<Var>,
}

/// Plain-value results of evaluating a model over a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSnapshot {
    pub p_hat: Tensor,
    pub c_plus: Option<Tensor>,
    pub c_minus: Option<Tensor>,
    pub c_mixed: Option<Tensor>,
    pub logits: Tensor,
}

impl EvalSnapshot {
    pub fn num_samples(&self) -> usize {
        self.p_hat.shape()[0]
    }
}

/// Which concepts a test-time intervention overwrites with ground truth.
#[derive(Clone, Debug, PartialEq)]
pub enum InterventionSelect {
    /// The same concepts for every sample.
    Mask(Vec<bool>),
    /// `floor(ratio * K)` concepts drawn uniformly per sample.
    Ratio { ratio: f64, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConceptModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    backbone: [Linear; 2],
    concept_head: Option<Linear>,
    pos: Vec<Linear>,
    neg: Vec<Linear>,
    scorer: Option<Linear>,
    predictor: Linear,
    disentangler: Option<Disentangler>,
}

const EVAL_CHUNK: usize = 512;

/// `p * c_plus + (1 - p) * c_minus` per concept, `p: [B, K]`, embeddings `[B, K, d]`.
pub fn mix(g: &mut Graph, p: Var, c_plus: Var, c_minus: Var) -> Result<Var> {
    let s = g.shape(c_plus).to_vec();
    if s.len() != 3 || g.shape(p) != [s[0], s[1]] || g.shape(c_minus) != s.as_slice() {
        return Err(Error::invalid(format!(
            "mix: probabilities {:?} do not match embeddings {:?}",
            g.shape(p),
            s
        )));
    }
    if g.value(p).data().iter().any(|v| v.is_nan()) {
        return Err(crate::tensor::TensorError::NonFiniteResult { op: "mix" }.into());
    }
    if g.value(p).data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::invalid("mix: probabilities outside [0, 1]"));
    }
    let p3 = g.reshape(p, &[s[0], s[1], 1])?;
    let q3 = g.one_minus(p3)?;
    let a = g.mul(p3, c_plus)?;
    let b = g.mul(q3, c_minus)?;
    Ok(g.add(a, b)?)
}

/// Embeddings chosen by a binary mask: `mu * c_plus + (1 - mu) * c_minus`.
pub fn true_embedding(g: &mut Graph, mask: &[u8], c_plus: Var, c_minus: Var) -> Result<Var> {
    let s = g.shape(c_plus).to_vec();
    if mask.len() != s[0] * s[1] {
        return Err(Error::invalid("true_embedding: mask size mismatch"));
    }
    if mask.iter().any(|&m| m > 1) {
        return Err(Error::invalid("true_embedding: mask must be binary"));
    }
    let mu = g.constant(Tensor::new(&[s[0], s[1]], mask.iter().map(|&m| m as f64).collect())?);
    mix(g, mu, c_plus, c_minus)
}

fn threshold(t: &Tensor) -> Tensor {
    let data = t.data().iter().map(|&p| if p >= 0.5 { 1.0 } else { 0.0 }).collect();
    Tensor::new(t.shape(), data).expect("finite")
}

impl ConceptModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let (k, d, nh) = (config.num_concepts, config.emb_dim, config.n_hidden);
        let backbone = [
            Linear::new(&mut store, "backbone.0", config.input_dim, nh, seed),
            Linear::new(&mut store, "backbone.1", nh, nh, seed),
        ];
        let (mut pos, mut neg, mut scorer, mut concept_head) = (Vec::new(), Vec::new(), None, None);
        if config.uses_embeddings() {
            for c in 0..k {
                pos.push(Linear::new(&mut store, &format!("concept.{c}.pos"), nh, d, seed));
                neg.push(Linear::new(&mut store, &format!("concept.{c}.neg"), nh, d, seed));
            }
            scorer = Some(Linear::new(&mut store, "scorer", 2 * d, 1, seed));
        } else {
            concept_head = Some(Linear::new(&mut store, "concept_head", nh, k, seed));
        }
        let predictor = Linear::new(
            &mut store,
            "predictor",
            config.bottleneck_width(),
            config.num_classes,
            seed,
        );
        let disentangler = config
            .has_mechanisms()
            .then(|| Disentangler::new(&mut store, k * d, nh, config.num_classes, seed));
        Ok(Self {
            config,
            store,
            backbone,
            concept_head,
            pos,
            neg,
            scorer,
            predictor,
            disentangler,
        })
    }

    /// Rebuilds a model around saved parameters; every expected parameter must
    /// be present with a matching shape and no extra parameters are allowed.
    pub fn from_params(config: ModelConfig, params: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        let mut seen = vec![false; model.store.len()];
        for (name, value) in params {
            let id = model.store.find(&name).ok_or_else(|| {
                Error::format(format!("unexpected parameter `{name}` for {}", model.config.label()))
            })?;
            let slot = model.store.get_mut(id);
            if slot.value.shape() != value.shape() {
                return Err(Error::format(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    value.shape(),
                    slot.value.shape()
                )));
            }
            slot.value = value;
            seen[id.index()] = true;
        }
        if let Some(missing) = model.store.iter().zip(&seen).find(|(_, s)| !**s) {
            return Err(Error::format(format!("missing parameter `{}`", missing.0.name)));
        }
        Ok(model)
    }

    pub fn disentangler(&self) -> Option<&Disentangler> {
        self.disentangler.as_ref()
    }

    pub fn backbone(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let a = self.backbone[0].forward(tape, &self.store, x)?;
        let a = tape.graph.relu(a)?;
        self.backbone[1].forward(tape, &self.store, a)
    }

    /// Per-concept positive and negative embeddings, each `[B, K, d]`.
    pub fn embed_pair(&self, tape: &mut Tape, h: Var) -> Result<(Var, Var)> {
        if !self.config.uses_embeddings() {
            return Err(Error::invalid("embed_pair on a model without concept embeddings"));
        }
        let b = tape.graph.shape(h)[0];
        let (k, d) = (self.config.num_concepts, self.config.emb_dim);
        let mut build = |layers: &[Linear]| -> Result<Var> {
            let parts = layers
                .iter()
                .map(|l| l.forward(tape, &self.store, h))
                .collect::<Result<Vec<_>>>()?;
            let flat = tape.graph.concat(&parts, 1)?;
            Ok(tape.graph.reshape(flat, &[b, k, d])?)
        };
        let plus = build(&self.pos)?;
        let minus = build(&self.neg)?;
        Ok((plus, minus))
    }

    /// Shared scorer `sigmoid(w · [c+; c-] + b)` applied to every concept.
    pub fn score(&self, tape: &mut Tape, c_plus: Var, c_minus: Var) -> Result<Var> {
        let scorer = self
            .scorer
            .ok_or_else(|| Error::invalid("score on a model without concept embeddings"))?;
        let s = tape.graph.shape(c_plus).to_vec();
        let both = tape.graph.concat(&[c_plus, c_minus], 2)?;
        let rows = tape.graph.reshape(both, &[s[0] * s[1], 2 * s[2]])?;
        let logit = scorer.forward(tape, &self.store, rows)?;
        let p = tape.graph.sigmoid(logit)?;
        Ok(tape.graph.reshape(p, &[s[0], s[1]])?)
    }

    pub fn predict_label(&self, tape: &mut Tape, bottleneck: Var) -> Result<Var> {
        self.predictor.forward(tape, &self.store, bottleneck)
    }

    /// Builds the label-predictor input from concept probabilities (and
    /// embeddings for the embedding variants).
    fn bottleneck(&self, tape: &mut Tape, p: Var, emb: Option<(Var, Var)>) -> Result<(Var, Option<Var>)> {
        let b = tape.graph.shape(p)[0];
        match self.config.variant {
            Variant::Cem | Variant::Recem => {
                let (cp, cm) = emb.expect("embedding variant");
                let mixed = mix(&mut tape.graph, p, cp, cm)?;
                let flat = tape.graph.reshape(mixed, &[b, self.config.bottleneck_width()])?;
                Ok((flat, Some(mixed)))
            }
            Variant::FuzzyCbm => {
                let mixed = match emb {
                    Some((cp, cm)) => Some(mix(&mut tape.graph, p, cp, cm)?),
                    None => None,
                };
                Ok((p, mixed))
            }
            Variant::BoolCbm => {
                let hard = threshold(tape.graph.value(p));
                let mixed = match emb {
                    Some((cp, cm)) => Some(mix(&mut tape.graph, p, cp, cm)?),
                    None => None,
                };
                Ok((tape.graph.constant(hard), mixed))
            }
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, mode: Mode<'_>) -> Result<ForwardOutput> {
        let shape = tape.graph.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.config.input_dim {
            return Err(Error::invalid(format!(
                "expected features [B, {}], got {:?}",
                self.config.input_dim, shape
            )));
        }
        let (b, k) = (shape[0], self.config.num_concepts);
        let h = self.backbone(tape, x)?;
        let (emb, p_hat) = if self.config.uses_embeddings() {
            let (cp, cm) = self.embed_pair(tape, h)?;
            (Some((cp, cm)), self.score(tape, cp, cm)?)
        } else {
            let head = self.concept_head.expect("bottleneck head");
            let logit = head.forward(tape, &self.store, h)?;
            (None, tape.graph.sigmoid(logit)?)
        };

        let mut train_concepts = None;
        let p_used = match mode {
            Mode::Eval => p_hat,
            Mode::Train { concepts, rng } => {
                if concepts.len() != b * k {
                    return Err(Error::invalid("concept labels do not match batch"));
                }
                train_concepts = Some(concepts);
                let mask: Vec<f64> = (0..b * k)
                    .map(|_| rng.random_bool(self.config.randint_prob) as u8 as f64)
                    .collect();
                if mask.iter().all(|&m| m == 0.0) {
                    p_hat
                } else {
                    let keep = mask.iter().map(|m| 1.0 - m).collect();
                    let truth = mask.iter().zip(concepts).map(|(m, &c)| m * c as f64).collect();
                    let keep = tape.graph.constant(Tensor::new(&[b, k], keep)?);
                    let truth = tape.graph.constant(Tensor::new(&[b, k], truth)?);
                    let kept = tape.graph.mul(p_hat, keep)?;
                    tape.graph.add(kept, truth)?
                }
            }
        };

        let (bottleneck, c_mixed) = self.bottleneck(tape, p_used, emb)?;
        let logits = self.predict_label(tape, bottleneck)?;

        let mut out = ForwardOutput {
            h,
            p_hat,
            p_used,
            c_plus: emb.map(|e| e.0),
            c_minus: emb.map(|e| e.1),
            c_mixed,
            bottleneck,
            logits,
            z_hat: None,
            adv_logits: None,
            adv_probs: None,
            c_true: None,
            h_rec: None,
        };
        if let Some(dis) = &self.disentangler {
            let z = dis.dis_encode(tape, &self.store, h)?;
            let (adv_logits, adv_probs) = dis.adversary(tape, &self.store, z, self.config.grl_lambda)?;
            out.z_hat = Some(z);
            out.adv_logits = Some(adv_logits);
            out.adv_probs = Some(adv_probs);
            if let (Some(concepts), Some((cp, cm))) = (train_concepts, emb) {
                let c_true = true_embedding(&mut tape.graph, concepts, cp, cm)?;
                let flat = tape.graph.reshape(c_true, &[b, k * self.config.emb_dim])?;
                out.h_rec = Some(dis.decode(tape, &self.store, flat, z)?);
                out.c_true = Some(c_true);
            }
        }
        Ok(out)
    }

    /// Eval-mode forward over all rows of `features`, in chunks.
    pub fn snapshot(&self, features: &Tensor) -> Result<EvalSnapshot> {
        let n = features.shape()[0];
        let mut parts: Vec<EvalSnapshot> = Vec::new();
        for start in (0..n).step_by(EVAL_CHUNK) {
            let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
            let mut tape = Tape::inference(&self.store);
            let x = tape.graph.constant(features.select_rows(&idx));
            let out = self.forward(&mut tape, x, Mode::Eval)?;
            let g = &tape.graph;
            parts.push(EvalSnapshot {
                p_hat: g.value(out.p_hat).clone(),
                c_plus: out.c_plus.map(|v| g.value(v).clone()),
                c_minus: out.c_minus.map(|v| g.value(v).clone()),
                c_mixed: out.c_mixed.map(|v| g.value(v).clone()),
                logits: g.value(out.logits).clone(),
            });
        }
        Ok(concat_snapshots(parts))
    }

    /// Task logits after overwriting the selected concept probabilities with
    /// ground truth. Unselected concepts keep their predicted probabilities.
    pub fn intervene(&self, snap: &EvalSnapshot, concepts: &[u8], select: &InterventionSelect) -> Result<Tensor> {
        let (n, k) = (snap.num_samples(), self.config.num_concepts);
        if concepts.len() != n * k {
            return Err(Error::invalid("intervene: concept labels do not match snapshot"));
        }
        let mut chosen = vec![false; n * k];
        match select {
            InterventionSelect::Mask(mask) => {
                if mask.len() != k {
                    return Err(Error::invalid(format!(
                        "intervention mask has {} entries for {k} concepts",
                        mask.len()
                    )));
                }
                for i in 0..n {
                    chosen[i * k..(i + 1) * k].copy_from_slice(mask);
                }
            }
            InterventionSelect::Ratio { ratio, seed } => {
                if !(0.0..=1.0).contains(ratio) {
                    return Err(Error::invalid("intervention ratio must lie in [0, 1]"));
                }
                let m = (ratio * k as f64 + 1e-9).floor() as usize;
                let mut r = rng::stream(*seed, "intervene");
                for i in 0..n {
                    for c in sample(&mut r, k, m) {
                        chosen[i * k + c] = true;
                    }
                }
            }
        }
        let p: Vec<f64> = snap
            .p_hat
            .data()
            .iter()
            .zip(&chosen)
            .zip(concepts)
            .map(|((&p, &sel), &c)| if sel { c as f64 } else { p })
            .collect();
        let mut logits = Vec::with_capacity(n * self.config.num_classes);
        for start in (0..n).step_by(EVAL_CHUNK) {
            let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
            let mut tape = Tape::inference(&self.store);
            let pt = Tensor::new(&[n, k], p.clone())?.select_rows(&idx);
            let pv = tape.graph.constant(pt);
            let emb = match (&snap.c_plus, &snap.c_minus) {
                (Some(cp), Some(cm)) => Some((
                    tape.graph.constant(cp.select_rows(&idx)),
                    tape.graph.constant(cm.select_rows(&idx)),
                )),
                _ => None,
            };
            let (bottleneck, _) = self.bottleneck(&mut tape, pv, emb)?;
            let out = self.predict_label(&mut tape, bottleneck)?;
            logits.extend_from_slice(tape.graph.value(out).data());
        }
        Ok(Tensor::new(&[n, self.config.num_classes], logits)?)
    }
}

fn concat_snapshots(parts: Vec<EvalSnapshot>) -> EvalSnapshot {
    fn cat(ts: Vec<&Tensor>) -> Tensor {
        let mut shape = ts[0].shape().to_vec();
        shape[0] = ts.iter().map(|t| t.shape()[0]).sum();
        let data = ts.iter().flat_map(|t| t.data().iter().copied()).collect();
        Tensor::new(&shape, data).expect("consistent chunks")
    }
    fn cat_opt(ts: Vec<Option<&Tensor>>) -> Option<Tensor> {
        ts.into_iter().collect::<Option<Vec<_>>>().map(cat)
    }
    EvalSnapshot {
        p_hat: cat(parts.iter().map(|p| &p.p_hat).collect()),
        c_plus: cat_opt(parts.iter().map(|p| p.c_plus.as_ref()).collect()),
        c_minus: cat_opt(parts.iter().map(|p| p.c_minus.as_ref()).collect()),
        c_mixed: cat_opt(parts.iter().map(|p| p.c_mixed.as_ref()).collect()),
        logits: cat(parts.iter().map(|p| &p.logits).collect()),
    }
}
