//! Concept-level disentanglement (adversarial label removal, HSIC
//! independence, reconstruction) and concept mixup, plus the combined
//! training objective.

use crate::error::{Error, Result};
use crate::model::{ConceptModel, ForwardOutput, MeanMode, Variant};
use crate::nn::{Linear, ParamStore, Tape};
use crate::tensor::{Graph, Tensor, Var};

/// Weights of the auxiliary losses relative to the task loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub lambda_m: f64,
    pub lambda_cvd: f64,
    pub lambda_rec: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            lambda_m: 0.1,
            lambda_cvd: 0.05,
            lambda_rec: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("lambda_m", self.lambda_m),
            ("lambda_cvd", self.lambda_cvd),
            ("lambda_rec", self.lambda_rec),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

/// Linear warm-up of the HSIC weight and mixup coefficient:
/// `beta(e) = beta_max * min(1, e / warmup_epochs)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BetaSchedule {
    pub beta_max: f64,
    pub warmup_epochs: usize,
}

impl BetaSchedule {
    pub fn new(beta_max: f64, warmup_epochs: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta_max) {
            return Err(Error::config("beta_max must lie in [0, 1]"));
        }
        if warmup_epochs == 0 {
            return Err(Error::config("warmup_epochs must be positive"));
        }
        Ok(Self {
            beta_max,
            warmup_epochs,
        })
    }

    /// Default warm-up: 30% of the run, at least one epoch.
    pub fn for_run(beta_max: f64, warmup_epochs: Option<usize>, epochs: usize) -> Result<Self> {
        let warmup = warmup_epochs.unwrap_or(((epochs as f64 * 0.3).round() as usize).max(1));
        Self::new(beta_max, warmup)
    }

    pub fn at(&self, epoch: usize) -> f64 {
        beta_at(self, epoch)
    }
}

pub fn beta_at(schedule: &BetaSchedule, epoch: usize) -> f64 {
    let frac = (epoch as f64 / schedule.warmup_epochs as f64).min(1.0);
    schedule.beta_max * frac
}

/// Disentangling encoder, gradient-reversed label adversary and the
/// reconstruction decoder.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Disentangler {
    pub encoder: Linear,
    pub adversary: Linear,
    pub decoder: Linear,
}

impl Disentangler {
    /// `width` is `K * d`, the size of both the flattened concept embeddings
    /// and the residual code.
    pub fn new(store: &mut ParamStore, width: usize, n_hidden: usize, num_classes: usize, seed: u64) -> Self {
        Self {
            encoder: Linear::new(store, "dis.encoder", n_hidden, width, seed),
            adversary: Linear::new(store, "dis.adversary", width, num_classes, seed),
            decoder: Linear::new(store, "dis.decoder", 2 * width, n_hidden, seed),
        }
    }

    /// Residual code `z = E_dis(h)`, `[B, K*d]`.
    pub fn dis_encode(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Result<Var> {
        self.encoder.forward(tape, store, h)
    }

    /// Label adversary behind a gradient reversal layer; returns logits and
    /// softmax probabilities.
    pub fn adversary(&self, tape: &mut Tape, store: &ParamStore, z: Var, lambda: f64) -> Result<(Var, Var)> {
        let rev = tape.graph.grl(z, lambda)?;
        let logits = self.adversary.forward(tape, store, rev)?;
        let probs = tape.graph.softmax(logits)?;
        Ok((logits, probs))
    }

    /// Reconstructs the backbone features from `[C_true; z]`.
    pub fn decode(&self, tape: &mut Tape, store: &ParamStore, c_true_flat: Var, z: Var) -> Result<Var> {
        let both = tape.graph.concat(&[c_true_flat, z], 1)?;
        self.decoder.forward(tape, store, both)
    }
}

/// Biased HSIC with Gaussian kernels between the rows of `x` and `y`.
pub fn hsic(g: &mut Graph, x: Var, y: Var) -> Result<Var> {
    Ok(g.hsic(x, y)?)
}

/// Adversarial cross-entropy plus `beta * HSIC(z, C_true)`. The HSIC term is
/// skipped when `beta` is zero or the batch is too small to estimate it.
pub fn loss_cvd(g: &mut Graph, adv_logits: Var, labels: &[usize], z: Var, c_true_flat: Var, beta: f64) -> Result<Var> {
    let ce = g.softmax_cross_entropy(adv_logits, labels)?;
    if beta == 0.0 || g.shape(z)[0] < 4 {
        return Ok(ce);
    }
    let dep = g.hsic(z, c_true_flat)?;
    let weighted = g.scale(dep, beta)?;
    Ok(g.add(ce, weighted)?)
}

/// Mean over the batch of the L1 reconstruction error.
pub fn loss_rec(g: &mut Graph, h: Var, h_rec: Var) -> Result<Var> {
    let diff = g.sub(h, h_rec)?;
    let per_row = g.l1_norm(diff, Some(1))?;
    Ok(g.mean(per_row, None)?)
}

/// Per-concept mean of the active representation, treated as a constant.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticMeanBank {
    dim: usize,
    means: Vec<Option<Vec<f64>>>,
}

impl SemanticMeanBank {
    pub fn empty(num_concepts: usize, dim: usize) -> Self {
        Self {
            dim,
            means: vec![None; num_concepts],
        }
    }

    /// Means over the samples where each concept is active. `values` is
    /// `[B, K, dim]` flattened; concepts with no active sample stay undefined.
    pub fn from_batch(values: &[f64], concepts: &[u8], num_concepts: usize, dim: usize) -> Self {
        let k = num_concepts;
        let b = concepts.len() / k;
        assert_eq!(values.len(), b * k * dim, "semantic mean: value size mismatch");
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for i in 0..b {
            for c in 0..k {
                if concepts[i * k + c] == 1 {
                    counts[c] += 1;
                    let off = (i * k + c) * dim;
                    for (s, v) in sums[c].iter_mut().zip(&values[off..off + dim]) {
                        *s += v;
                    }
                }
            }
        }
        let means = sums
            .into_iter()
            .zip(counts)
            .map(|(s, n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect()))
            .collect();
        Self { dim, means }
    }

    /// `self <- decay * self + (1 - decay) * batch` per concept; a concept
    /// seen for the first time takes the batch mean.
    pub fn blend(&mut self, batch: &SemanticMeanBank, decay: f64) {
        for (old, new) in self.means.iter_mut().zip(&batch.means) {
            match (old.as_mut(), new) {
                (Some(o), Some(n)) => {
                    for (a, b) in o.iter_mut().zip(n) {
                        *a = decay * *a + (1.0 - decay) * b;
                    }
                }
                (None, Some(n)) => *old = Some(n.clone()),
                _ => {}
            }
        }
    }

    pub fn mean(&self, concept: usize) -> Option<&[f64]> {
        self.means[concept].as_deref()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_concepts(&self) -> usize {
        self.means.len()
    }
}

/// Batch semantic means of the positive embeddings `[B, K, d]`.
pub fn semantic_mean(c_plus: &Tensor, concepts: &[u8]) -> SemanticMeanBank {
    let s = c_plus.shape();
    SemanticMeanBank::from_batch(c_plus.data(), concepts, s[1], s[2])
}

/// Mixup-aligned representation: active concepts are pulled toward their
/// semantic mean, `beta * mean + (1 - beta) * active`, inactive concepts keep
/// `inactive`. Works for `[B, K, d]` embeddings and `[B, K]` probabilities
/// (bank dim 1). Concepts without a defined mean keep `active`.
pub fn align(
    g: &mut Graph,
    active: Var,
    inactive: Var,
    concepts: &[u8],
    bank: &SemanticMeanBank,
    beta: f64,
) -> Result<Var> {
    let shape = g.shape(active).to_vec();
    let (b, k) = (shape[0], shape[1]);
    let dim = if shape.len() == 3 { shape[2] } else { 1 };
    if concepts.len() != b * k || bank.num_concepts() != k || bank.dim() != dim {
        return Err(Error::invalid("align: concepts, bank and representation disagree"));
    }
    if g.shape(inactive) != shape.as_slice() {
        return Err(Error::invalid("align: active and inactive shapes differ"));
    }
    let mut keep_active = vec![0.0; b * k];
    let mut keep_inactive = vec![0.0; b * k];
    let mut offset = vec![0.0; b * k * dim];
    for i in 0..b {
        for c in 0..k {
            let j = i * k + c;
            if concepts[j] == 1 {
                match bank.mean(c) {
                    Some(m) => {
                        keep_active[j] = 1.0 - beta;
                        for (o, v) in offset[j * dim..(j + 1) * dim].iter_mut().zip(m) {
                            *o = beta * v;
                        }
                    }
                    None => keep_active[j] = 1.0,
                }
            } else {
                keep_inactive[j] = 1.0;
            }
        }
    }
    let mask_shape: Vec<usize> = if shape.len() == 3 { vec![b, k, 1] } else { vec![b, k] };
    let ka = g.constant(Tensor::new(&mask_shape, keep_active)?);
    let ki = g.constant(Tensor::new(&mask_shape, keep_inactive)?);
    let off = g.constant(Tensor::new(&shape, offset)?);
    let a = g.mul(active, ka)?;
    let i = g.mul(inactive, ki)?;
    let sum = g.add(a, i)?;
    Ok(g.add(sum, off)?)
}

/// Task cross-entropy of the label predictor applied to an aligned bottleneck.
pub fn loss_mixup(model: &ConceptModel, tape: &mut Tape, aligned_bottleneck: Var, labels: &[usize]) -> Result<Var> {
    let logits = model.predict_label(tape, aligned_bottleneck)?;
    Ok(tape.graph.softmax_cross_entropy(logits, labels)?)
}

/// Scalar loss values of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub task: f64,
    pub concept: f64,
    pub mixup: f64,
    pub cvd: f64,
    pub rec: f64,
    pub total: f64,
}

/// Graph handles of the individual loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub task: Var,
    pub concept: Var,
    pub mixup: Option<Var>,
    pub cvd: Option<Var>,
    pub rec: Option<Var>,
}

/// `task + alpha*concept + lambda_m*mixup + lambda_cvd*cvd + lambda_rec*rec`;
/// absent terms contribute nothing.
pub fn total_loss(g: &mut Graph, terms: LossTerms, weights: &LossWeights) -> Result<(Var, LossBreakdown)> {
    let val = |g: &Graph, v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
    let mut breakdown = LossBreakdown {
        task: g.value(terms.task).item(),
        concept: g.value(terms.concept).item(),
        mixup: val(g, terms.mixup),
        cvd: val(g, terms.cvd),
        rec: val(g, terms.rec),
        total: 0.0,
    };
    let mut total = terms.task;
    let weighted = [
        (Some(terms.concept), weights.alpha),
        (terms.mixup, weights.lambda_m),
        (terms.cvd, weights.lambda_cvd),
        (terms.rec, weights.lambda_rec),
    ];
    for (term, w) in weighted {
        if let Some(t) = term {
            if w != 0.0 {
                let s = g.scale(t, w)?;
                total = g.add(total, s)?;
            }
        }
    }
    breakdown.total = g.value(total).item();
    Ok((total, breakdown))
}

/// Per-step coefficients supplied by the trainer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepBetas {
    pub hsic: f64,
    pub mixup: f64,
}

/// Builds the full training loss for a training-mode forward pass.
///
/// `bank` holds the running semantic means; in batch mode it is replaced by
/// this batch's means, in EMA mode it is blended with them.
pub fn objective(
    model: &ConceptModel,
    tape: &mut Tape,
    out: &ForwardOutput,
    labels: &[usize],
    concepts: &[u8],
    betas: StepBetas,
    bank: &mut Option<SemanticMeanBank>,
) -> Result<(Var, LossBreakdown)> {
    let (terms, rep) = base_terms(model, &mut tape.graph, out, labels, concepts, betas.hsic)?;
    let Some(rep) = rep else {
        return total_loss(&mut tape.graph, terms, &model.config.weights);
    };
    let batch_bank = SemanticMeanBank::from_batch(
        tape.graph.value(rep.active).data(),
        concepts,
        model.config.num_concepts,
        rep.dim,
    );
    let current = match (model.config.mean_mode, bank.as_mut()) {
        (MeanMode::Ema { decay }, Some(running)) => {
            running.blend(&batch_bank, decay);
            running.clone()
        }
        _ => batch_bank,
    };
    let result = finish(model, tape, terms, rep, labels, concepts, betas.mixup, &current);
    *bank = Some(current);
    result
}

/// [`objective`] with the semantic means supplied rather than estimated from
/// the batch, making the loss a fixed function of the parameters.
pub fn objective_with_means(
    model: &ConceptModel,
    tape: &mut Tape,
    out: &ForwardOutput,
    labels: &[usize],
    concepts: &[u8],
    betas: StepBetas,
    means: &SemanticMeanBank,
) -> Result<(Var, LossBreakdown)> {
    let (terms, rep) = base_terms(model, &mut tape.graph, out, labels, concepts, betas.hsic)?;
    match rep {
        Some(rep) => finish(model, tape, terms, rep, labels, concepts, betas.mixup, means),
        None => total_loss(&mut tape.graph, terms, &model.config.weights),
    }
}

/// The representation concept mixup aligns: embeddings for CEM-style models,
/// probabilities for CBMs.
#[derive(Clone, Copy)]
struct Aligned {
    active: Var,
    inactive: Var,
    dim: usize,
}

/// Task and concept terms, plus the disentanglement terms when mechanisms are on.
fn base_terms(
    model: &ConceptModel,
    g: &mut Graph,
    out: &ForwardOutput,
    labels: &[usize],
    concepts: &[u8],
    hsic_beta: f64,
) -> Result<(LossTerms, Option<Aligned>)> {
    let cfg = &model.config;
    let task = g.softmax_cross_entropy(out.logits, labels)?;
    let targets: Vec<f64> = concepts.iter().map(|&c| c as f64).collect();
    let concept = g.binary_cross_entropy(out.p_hat, &targets)?;
    let mut terms = LossTerms {
        task,
        concept,
        mixup: None,
        cvd: None,
        rec: None,
    };
    if !cfg.has_mechanisms() {
        return Ok((terms, None));
    }

    let b = g.shape(out.h)[0];
    let (k, d) = (cfg.num_concepts, cfg.emb_dim);
    let (z, adv, c_true, h_rec) = match (out.z_hat, out.adv_logits, out.c_true, out.h_rec) {
        (Some(z), Some(a), Some(c), Some(r)) => (z, a, c, r),
        _ => return Err(Error::invalid("objective needs a training-mode forward pass")),
    };
    let c_true_flat = g.reshape(c_true, &[b, k * d])?;
    terms.cvd = Some(loss_cvd(g, adv, labels, z, c_true_flat, hsic_beta)?);
    terms.rec = Some(loss_rec(g, out.h, h_rec)?);

    let rep = match cfg.variant {
        Variant::Cem | Variant::Recem => Aligned {
            active: out.c_plus.expect("embeddings"),
            inactive: out.c_mixed.expect("embeddings"),
            dim: d,
        },
        Variant::FuzzyCbm | Variant::BoolCbm => Aligned {
            active: out.p_hat,
            inactive: out.p_used,
            dim: 1,
        },
    };
    Ok((terms, Some(rep)))
}

#[allow(clippy::too_many_arguments)]
fn finish(
    model: &ConceptModel,
    tape: &mut Tape,
    mut terms: LossTerms,
    rep: Aligned,
    labels: &[usize],
    concepts: &[u8],
    beta: f64,
    means: &SemanticMeanBank,
) -> Result<(Var, LossBreakdown)> {
    let cfg = &model.config;
    let g = &mut tape.graph;
    let b = g.shape(rep.active)[0];
    let k = cfg.num_concepts;
    let aligned = align(g, rep.active, rep.inactive, concepts, means, beta)?;
    let bottleneck = match cfg.variant {
        Variant::Cem | Variant::Recem => g.reshape(aligned, &[b, k * rep.dim])?,
        Variant::FuzzyCbm => aligned,
        Variant::BoolCbm => {
            let hard = g
                .value(aligned)
                .data()
                .iter()
                .map(|&p| if p >= 0.5 { 1.0 } else { 0.0 })
                .collect();
            g.constant(Tensor::new(&[b, k], hard)?)
        }
    };
    terms.mixup = Some(loss_mixup(model, tape, bottleneck, labels)?);
    total_loss(&mut tape.graph, terms, &cfg.weights)
}
