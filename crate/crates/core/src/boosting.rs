//! Online gradient boosting over the learner groups.
//!
//! Forward: every learner scores the pair (or both pairs of a triplet) with a
//! cosine similarity and the scores are accumulated with
//! `s^m = (1 − η_m)·s^{m−1} + η_m·s_m`, starting from `s^0 = 0`.
//!
//! Backward: learner 1 sees weight `w^1 = 1`; learner `m + 1` sees the weight
//! derived from the loss derivative at the accumulation `s^m`, which includes
//! learner `m`. Each learner is trained on `w^m · ℓ(s_m)` and the weights are
//! constants for differentiation.

use rayon::prelude::*;

use crate::ensemble::{cosine_sim_grad, BoostSchedule, EnsembleModel, GroupPartition, SampleForward};
use crate::error::{Error, Result};
use crate::losses::{
    boosting_weight, pair_loss, triplet_loss, BoostState, LossSpec, PairLabel, WeightConvention,
};
use crate::tensor::{axpy, Matrix};

/// Indices refer to positions in the batch the item was mined from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairItem {
    pub a: usize,
    pub b: usize,
    pub y: PairLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TripletItem {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MinedItems {
    Pairs(Vec<PairItem>),
    Triplets(Vec<TripletItem>),
}

impl MinedItems {
    pub fn len(&self) -> usize {
        match self {
            MinedItems::Pairs(p) => p.len(),
            MinedItems::Triplets(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Which objective the metric loss gradient follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Objective {
    /// Each learner on its reweighted loss `w^m · ℓ(s_m)`.
    #[default]
    Boosted,
    /// One loss on the ensemble score `Σ α_m s_m`.
    Global,
    /// Each learner on its own unweighted loss.
    Independent,
    /// The partition is ignored; one loss on the cosine of the full vectors.
    Unpartitioned,
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "boosted" => Ok(Objective::Boosted),
            "global" => Ok(Objective::Global),
            "independent" => Ok(Objective::Independent),
            "unpartitioned" => Ok(Objective::Unpartitioned),
            other => Err(Error::invalid(format!("unknown objective `{other}`"))),
        }
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Objective::Boosted => "boosted",
            Objective::Global => "global",
            Objective::Independent => "independent",
            Objective::Unpartitioned => "unpartitioned",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MetricOptions {
    pub objective: Objective,
    pub convention: WeightConvention,
    /// Fan item contributions out over the current rayon pool. The reduction
    /// stays sequential in item order either way.
    pub parallel: bool,
}

/// `s^1 .. s^M`.
pub fn boost_forward_pair(schedule: &BoostSchedule, scores: &[f64]) -> Result<Vec<f64>> {
    if scores.len() != schedule.len() {
        return Err(Error::invalid(format!(
            "{} scores for {} learners",
            scores.len(),
            schedule.len()
        )));
    }
    let mut acc = 0.0;
    Ok(scores
        .iter()
        .zip(&schedule.eta)
        .map(|(s, eta)| {
            acc = (1.0 - eta) * acc + eta * s;
            acc
        })
        .collect())
}

/// Forward and backward bookkeeping of one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct BoostTrace {
    /// Per-learner scores `s_m`.
    pub scores: Vec<f64>,
    /// Accumulated scores `s^m`.
    pub accumulated: Vec<f64>,
    /// Sample weights `w^m`.
    pub weights: Vec<f64>,
    /// Unweighted per-learner losses `ℓ(s_m)`.
    pub losses: Vec<f64>,
    /// `w^m · ∂ℓ(s_m)/∂s_m`.
    pub grads: Vec<f64>,
}

pub fn boost_backward_pair(
    spec: &LossSpec,
    schedule: &BoostSchedule,
    scores: &[f64],
    y: PairLabel,
    convention: WeightConvention,
) -> Result<BoostTrace> {
    let accumulated = boost_forward_pair(schedule, scores)?;
    let m = scores.len();
    let mut weights = Vec::with_capacity(m);
    let mut losses = Vec::with_capacity(m);
    let mut grads = Vec::with_capacity(m);
    let mut w = 1.0;
    for i in 0..m {
        let (l, d) = pair_loss(spec, scores[i], y)?;
        weights.push(w);
        losses.push(l);
        grads.push(w * d);
        w = boosting_weight(
            spec,
            BoostState::Pair {
                s: accumulated[i],
                y,
            },
            convention,
        )?;
    }
    Ok(BoostTrace {
        scores: scores.to_vec(),
        accumulated,
        weights,
        losses,
        grads,
    })
}

/// Triplet counterpart of [`BoostTrace`] with separate accumulators for the
/// positive and negative pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletTrace {
    pub pos_scores: Vec<f64>,
    pub neg_scores: Vec<f64>,
    pub acc_pos: Vec<f64>,
    pub acc_neg: Vec<f64>,
    pub weights: Vec<f64>,
    pub losses: Vec<f64>,
    /// `w^m · ∂ℓ/∂s⁺_m`.
    pub grad_pos: Vec<f64>,
    /// `w^m · ∂ℓ/∂s⁻_m`.
    pub grad_neg: Vec<f64>,
}

pub fn boost_step_triplet(
    spec: &LossSpec,
    schedule: &BoostSchedule,
    pos_scores: &[f64],
    neg_scores: &[f64],
) -> Result<TripletTrace> {
    let acc_pos = boost_forward_pair(schedule, pos_scores)?;
    let acc_neg = boost_forward_pair(schedule, neg_scores)?;
    let m = pos_scores.len();
    let mut t = TripletTrace {
        pos_scores: pos_scores.to_vec(),
        neg_scores: neg_scores.to_vec(),
        acc_pos,
        acc_neg,
        weights: Vec::with_capacity(m),
        losses: Vec::with_capacity(m),
        grad_pos: Vec::with_capacity(m),
        grad_neg: Vec::with_capacity(m),
    };
    let mut w = 1.0;
    for i in 0..m {
        let (l, dp, dn) = triplet_loss(spec, pos_scores[i], neg_scores[i])?;
        t.weights.push(w);
        t.losses.push(l);
        t.grad_pos.push(w * dp);
        t.grad_neg.push(w * dn);
        w = boosting_weight(
            spec,
            BoostState::Triplet {
                s_pos: t.acc_pos[i],
                s_neg: t.acc_neg[i],
            },
            WeightConvention::Magnitude,
        )?;
    }
    Ok(t)
}

/// Metric loss of a batch and its gradient with respect to every sample's
/// raw embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricGradient {
    /// Mean objective over the items that were used.
    pub loss: f64,
    /// `∂loss/∂f(x_n)` for every batch position `n`.
    pub grad: Vec<Vec<f64>>,
    /// Sample weights per item (boosted objective only; empty for skipped
    /// items and other objectives).
    pub weights: Vec<Vec<f64>>,
    pub used: usize,
    pub skipped: usize,
}

struct ItemContribution {
    loss: f64,
    weights: Vec<f64>,
    /// `(batch position, gradient block offset, gradient block)`.
    parts: Vec<(usize, usize, Vec<f64>)>,
}

/// Per-learner cosine scores and gradients between two embeddings.
fn learner_cosines(
    partition: &GroupPartition,
    fa: &[f64],
    fb: &[f64],
    unpartitioned: bool,
) -> Result<Vec<(usize, crate::ensemble::CosineGrad)>> {
    if unpartitioned {
        return Ok(vec![(0, cosine_sim_grad(fa, fb)?)]);
    }
    (0..partition.num_groups())
        .map(|m| {
            let r = partition.range(m);
            Ok((r.start, cosine_sim_grad(&fa[r.clone()], &fb[r])?))
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn pair_contribution(
    partition: &GroupPartition,
    schedule: &BoostSchedule,
    embeddings: &[Vec<f64>],
    item: &PairItem,
    spec: &LossSpec,
    opts: &MetricOptions,
    frozen: Option<&[f64]>,
) -> Result<ItemContribution> {
    let unpartitioned = opts.objective == Objective::Unpartitioned;
    let cos = learner_cosines(partition, &embeddings[item.a], &embeddings[item.b], unpartitioned)?;
    let scores: Vec<f64> = cos.iter().map(|(_, c)| c.s).collect();
    let mut weights = Vec::new();
    let (loss, coeffs): (f64, Vec<f64>) = match opts.objective {
        Objective::Boosted => {
            let trace = boost_backward_pair(spec, schedule, &scores, item.y, opts.convention)?;
            let w = frozen.map_or(trace.weights.clone(), <[f64]>::to_vec);
            let mut loss = 0.0;
            let mut coeffs = Vec::with_capacity(w.len());
            for i in 0..w.len() {
                let (l, d) = pair_loss(spec, scores[i], item.y)?;
                loss += w[i] * l;
                coeffs.push(w[i] * d);
            }
            weights = w;
            (loss, coeffs)
        }
        Objective::Global => {
            let f: f64 = scores.iter().zip(&schedule.alpha).map(|(s, a)| a * s).sum();
            let (l, d) = pair_loss(spec, f, item.y)?;
            (l, schedule.alpha.iter().map(|a| a * d).collect())
        }
        Objective::Independent | Objective::Unpartitioned => {
            let mut loss = 0.0;
            let mut coeffs = Vec::with_capacity(scores.len());
            for &s in &scores {
                let (l, d) = pair_loss(spec, s, item.y)?;
                loss += l;
                coeffs.push(d);
            }
            (loss, coeffs)
        }
    };
    let mut parts = Vec::with_capacity(2 * cos.len());
    for ((offset, c), k) in cos.iter().zip(&coeffs) {
        parts.push((item.a, *offset, c.ds_du.iter().map(|g| k * g).collect()));
        parts.push((item.b, *offset, c.ds_dv.iter().map(|g| k * g).collect()));
    }
    Ok(ItemContribution {
        loss,
        weights,
        parts,
    })
}

#[allow(clippy::too_many_arguments)]
fn triplet_contribution(
    partition: &GroupPartition,
    schedule: &BoostSchedule,
    embeddings: &[Vec<f64>],
    item: &TripletItem,
    spec: &LossSpec,
    opts: &MetricOptions,
    frozen: Option<&[f64]>,
) -> Result<ItemContribution> {
    let unpartitioned = opts.objective == Objective::Unpartitioned;
    let anchor = &embeddings[item.anchor];
    let pos = learner_cosines(partition, anchor, &embeddings[item.positive], unpartitioned)?;
    let neg = learner_cosines(partition, anchor, &embeddings[item.negative], unpartitioned)?;
    let sp: Vec<f64> = pos.iter().map(|(_, c)| c.s).collect();
    let sn: Vec<f64> = neg.iter().map(|(_, c)| c.s).collect();
    let mut weights = Vec::new();
    let mut loss = 0.0;
    let mut kp = Vec::with_capacity(sp.len());
    let mut kn = Vec::with_capacity(sp.len());
    match opts.objective {
        Objective::Boosted => {
            let trace = boost_step_triplet(spec, schedule, &sp, &sn)?;
            let w = frozen.map_or(trace.weights.clone(), <[f64]>::to_vec);
            for i in 0..w.len() {
                let (l, dp, dn) = triplet_loss(spec, sp[i], sn[i])?;
                loss += w[i] * l;
                kp.push(w[i] * dp);
                kn.push(w[i] * dn);
            }
            weights = w;
        }
        Objective::Global => {
            let fp: f64 = sp.iter().zip(&schedule.alpha).map(|(s, a)| a * s).sum();
            let fnn: f64 = sn.iter().zip(&schedule.alpha).map(|(s, a)| a * s).sum();
            let (l, dp, dn) = triplet_loss(spec, fp, fnn)?;
            loss = l;
            kp = schedule.alpha.iter().map(|a| a * dp).collect();
            kn = schedule.alpha.iter().map(|a| a * dn).collect();
        }
        Objective::Independent | Objective::Unpartitioned => {
            for i in 0..sp.len() {
                let (l, dp, dn) = triplet_loss(spec, sp[i], sn[i])?;
                loss += l;
                kp.push(dp);
                kn.push(dn);
            }
        }
    }
    let mut parts = Vec::with_capacity(4 * pos.len());
    for i in 0..pos.len() {
        let (offset, cp) = &pos[i];
        let (_, cn) = &neg[i];
        let anchor_grad: Vec<f64> = cp
            .ds_du
            .iter()
            .zip(&cn.ds_du)
            .map(|(gp, gn)| kp[i] * gp + kn[i] * gn)
            .collect();
        parts.push((item.anchor, *offset, anchor_grad));
        parts.push((item.positive, *offset, cp.ds_dv.iter().map(|g| kp[i] * g).collect()));
        parts.push((item.negative, *offset, cn.ds_dv.iter().map(|g| kn[i] * g).collect()));
    }
    Ok(ItemContribution {
        loss,
        weights,
        parts,
    })
}

/// Metric loss and per-sample embedding gradients for a mined batch.
///
/// `frozen` replaces the sample weights computed from the forward pass (one
/// vector per item); finite-difference checks use it to hold the weights
/// fixed while perturbing parameters. Items touching a zero-norm learner
/// output are skipped and counted.
#[allow(clippy::too_many_arguments)]
pub fn metric_gradient(
    partition: &GroupPartition,
    schedule: &BoostSchedule,
    embeddings: &[Vec<f64>],
    items: &MinedItems,
    spec: &LossSpec,
    opts: &MetricOptions,
    frozen: Option<&[Vec<f64>]>,
) -> Result<MetricGradient> {
    spec.validate()?;
    let d = partition.total();
    if let Some(bad) = embeddings.iter().position(|f| f.len() != d) {
        return Err(Error::invalid(format!(
            "embedding {bad} has {} dimensions, partition covers {d}",
            embeddings[bad].len()
        )));
    }
    let n_items = items.len();
    if let Some(f) = frozen {
        if f.len() != n_items {
            return Err(Error::invalid("one frozen weight vector per item required"));
        }
    }
    match (items, spec.kind.is_pair()) {
        (MinedItems::Pairs(_), false) => {
            return Err(Error::invalid("pair items need a pair loss"))
        }
        (MinedItems::Triplets(_), true) => {
            return Err(Error::invalid("triplet items need the triplet loss"))
        }
        _ => {}
    }
    let check = |i: usize, idx: &[usize]| -> Result<()> {
        if idx.iter().any(|&j| j >= embeddings.len()) {
            return Err(Error::invalid(format!("item {i} references a sample outside the batch")));
        }
        Ok(())
    };

    let one = |i: usize| -> Result<ItemContribution> {
        let fr = frozen.map(|f| f[i].as_slice());
        match items {
            MinedItems::Pairs(p) => {
                check(i, &[p[i].a, p[i].b])?;
                pair_contribution(partition, schedule, embeddings, &p[i], spec, opts, fr)
            }
            MinedItems::Triplets(t) => {
                check(i, &[t[i].anchor, t[i].positive, t[i].negative])?;
                triplet_contribution(partition, schedule, embeddings, &t[i], spec, opts, fr)
            }
        }
    };
    let results: Vec<Result<ItemContribution>> = if opts.parallel {
        (0..n_items).into_par_iter().map(one).collect()
    } else {
        (0..n_items).map(one).collect()
    };

    let mut grad = vec![vec![0.0; d]; embeddings.len()];
    let mut weights = Vec::with_capacity(n_items);
    let mut loss = 0.0;
    let (mut used, mut skipped) = (0usize, 0usize);
    for r in results {
        match r {
            Ok(c) => {
                loss += c.loss;
                for (n, offset, g) in c.parts {
                    axpy(&mut grad[n][offset..offset + g.len()], 1.0, &g);
                }
                weights.push(c.weights);
                used += 1;
            }
            Err(Error::Degenerate(_)) => {
                weights.push(Vec::new());
                skipped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    if skipped > 0 {
        log::debug!("skipped {skipped} of {n_items} items with zero-norm learner outputs");
    }
    if used > 0 {
        let scale = 1.0 / used as f64;
        loss *= scale;
        for g in &mut grad {
            g.iter_mut().for_each(|v| *v *= scale);
        }
    }
    Ok(MetricGradient {
        loss,
        grad,
        weights,
        used,
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneGrad {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Parameter gradients of the metric objective.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradient {
    pub loss: f64,
    pub embedding: Matrix,
    /// Present when the model has a backbone and `train_backbone` was set.
    pub backbone: Option<BackboneGrad>,
    pub weights: Vec<Vec<f64>>,
    pub used: usize,
    pub skipped: usize,
}

/// Pulls per-sample embedding gradients back to `W` and, optionally, the
/// backbone.
pub fn embedding_backprop(
    model: &EnsembleModel,
    inputs: &[&[f64]],
    forwards: &[SampleForward],
    grad_f: &[Vec<f64>],
    train_backbone: bool,
) -> (Matrix, Option<BackboneGrad>) {
    let mut gw = Matrix::zeros(model.hidden_dim(), model.embed_dim());
    for (fw, g) in forwards.iter().zip(grad_f) {
        gw.add_outer(1.0, &fw.hidden, g);
    }
    let gb = match (&model.backbone, train_backbone) {
        (Some(b), true) => {
            let mut weights = Matrix::zeros(b.hidden_dim(), b.input_dim());
            let mut bias = vec![0.0; b.hidden_dim()];
            for ((fw, g), x) in forwards.iter().zip(grad_f).zip(inputs) {
                let pre = fw.pre.as_ref().expect("backbone forward has pre-activations");
                let dphi = model.embedding.mul_vec(g).expect("shapes checked");
                let dpre: Vec<f64> = dphi
                    .iter()
                    .zip(pre)
                    .map(|(d, p)| if *p > 0.0 { *d } else { 0.0 })
                    .collect();
                weights.add_outer(1.0, &dpre, x);
                axpy(&mut bias, 1.0, &dpre);
            }
            Some(BackboneGrad { weights, bias })
        }
        _ => None,
    };
    (gw, gb)
}

/// Full metric gradient for a batch of raw inputs.
pub fn accumulate_w_gradient(
    model: &EnsembleModel,
    inputs: &[&[f64]],
    items: &MinedItems,
    spec: &LossSpec,
    opts: &MetricOptions,
    train_backbone: bool,
) -> Result<ModelGradient> {
    let forwards = inputs
        .iter()
        .map(|x| model.forward(x))
        .collect::<Result<Vec<_>>>()?;
    model_gradient_from_forwards(model, inputs, &forwards, items, spec, opts, train_backbone, None)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn model_gradient_from_forwards(
    model: &EnsembleModel,
    inputs: &[&[f64]],
    forwards: &[SampleForward],
    items: &MinedItems,
    spec: &LossSpec,
    opts: &MetricOptions,
    train_backbone: bool,
    frozen: Option<&[Vec<f64>]>,
) -> Result<ModelGradient> {
    let embeddings: Vec<Vec<f64>> = forwards.iter().map(|f| f.embedding.clone()).collect();
    let mg = metric_gradient(
        &model.partition,
        &model.schedule,
        &embeddings,
        items,
        spec,
        opts,
        frozen,
    )?;
    let (embedding, backbone) = embedding_backprop(model, inputs, forwards, &mg.grad, train_backbone);
    Ok(ModelGradient {
        loss: mg.loss,
        embedding,
        backbone,
        weights: mg.weights,
        used: mg.used,
        skipped: mg.skipped,
    })
}

/// Metric objective only, with sample weights held at `frozen`.
pub fn frozen_objective(
    model: &EnsembleModel,
    inputs: &[&[f64]],
    items: &MinedItems,
    spec: &LossSpec,
    opts: &MetricOptions,
    frozen: &[Vec<f64>],
) -> Result<f64> {
    let forwards = inputs
        .iter()
        .map(|x| model.forward(x))
        .collect::<Result<Vec<_>>>()?;
    let embeddings: Vec<Vec<f64>> = forwards.into_iter().map(|f| f.embedding).collect();
    Ok(metric_gradient(
        &model.partition,
        &model.schedule,
        &embeddings,
        items,
        spec,
        opts,
        Some(frozen),
    )?
    .loss)
}
