//! Training loop: batch sampling, the combined metric and diversity step,
//! the embedding initialization solver, checkpoints and metrics.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::boosting::{
    model_gradient_from_forwards, BackboneGrad, MetricOptions, MinedItems, Objective, PairItem,
    TripletItem,
};
use crate::codec::{LeReader, LeWriter};
use crate::data::FeatureSet;
use crate::diversity::{
    column_sq_norms, diversity_loss, AdversarialOptions, DiversityKind, RegressorBank,
    SimNormalizer,
};
use crate::ensemble::{EnsembleModel, PartitionSource, TestEmbedding};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions};
use crate::losses::{LossSpec, PairLabel, WeightConvention};
use crate::optim::{OptimConfig, Optimizer};
use crate::tensor::{Matrix, Rng, RngState};

/// Rng sub-streams derived from the run seed.
pub mod streams {
    pub const BATCHES: u64 = 0;
    pub const MODEL_INIT: u64 = 1;
    pub const BANK_INIT: u64 = 2;
    pub const EVAL_PAIRS: u64 = 3;
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub loss: LossSpec,
    pub objective: Objective,
    pub partition: PartitionSource,
    pub embed_dim: usize,
    pub learners: usize,
    pub diversity: DiversityKind,
    /// `0` turns the diversity term off.
    pub lambda_div: f64,
    pub lambda_w: f64,
    pub optimizer: OptimConfig,
    pub iterations: usize,
    pub batch_classes: usize,
    pub samples_per_class: usize,
    pub max_pairs_per_batch: Option<usize>,
    pub seed: u64,
    pub boost_weight_signed: bool,
    /// Width of the optional trainable feature map; `None` feeds inputs to
    /// the embedding directly.
    pub backbone_hidden: Option<usize>,
    pub backbone_trainable: bool,
    pub regressor_hidden: usize,
    pub sim_normalizer: SimNormalizer,
    pub reverse_target_path: bool,
    pub test_embedding: TestEmbedding,
    /// Metrics row every this many iterations; `0` writes only the final row.
    pub eval_every: usize,
    pub eval_pairs: usize,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossSpec::default(),
            objective: Objective::Boosted,
            partition: PartitionSource::Proportional,
            embed_dim: 32,
            learners: 3,
            diversity: DiversityKind::Adversarial,
            lambda_div: DiversityKind::Adversarial.default_lambda_div(),
            lambda_w: 1.0,
            optimizer: OptimConfig::adam(1e-3),
            iterations: 1000,
            batch_classes: 4,
            samples_per_class: 5,
            max_pairs_per_batch: None,
            seed: 0,
            boost_weight_signed: false,
            backbone_hidden: None,
            backbone_trainable: true,
            regressor_hidden: 512,
            sim_normalizer: SimNormalizer::Source,
            reverse_target_path: true,
            test_embedding: TestEmbedding::default(),
            eval_every: 0,
            eval_pairs: 2000,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.optimizer.validate()?;
        for (name, v) in [("lambda_div", self.lambda_div), ("lambda_w", self.lambda_w)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.batch_classes < 2 {
            return Err(Error::invalid("batch_classes must be at least 2"));
        }
        if self.samples_per_class < 2 {
            return Err(Error::invalid("samples_per_class must be at least 2"));
        }
        if self.learners == 0 || self.embed_dim < self.learners {
            return Err(Error::invalid(format!(
                "cannot split {} dimensions into {} learners",
                self.embed_dim, self.learners
            )));
        }
        if self.regressor_hidden == 0 {
            return Err(Error::invalid("regressor_hidden must be positive"));
        }
        if self.threads == 0 {
            return Err(Error::invalid("threads must be at least 1"));
        }
        if !(self.test_embedding.weight_exponent.is_finite()) {
            return Err(Error::invalid("weight_exponent must be finite"));
        }
        Ok(())
    }

    fn uses_bank(&self) -> bool {
        self.lambda_div > 0.0 && self.diversity == DiversityKind::Adversarial
    }

    fn metric_options(&self) -> MetricOptions {
        MetricOptions {
            objective: self.objective,
            convention: if self.boost_weight_signed {
                WeightConvention::Signed
            } else {
                WeightConvention::Magnitude
            },
            parallel: self.threads > 1,
        }
    }

    fn adversarial_options(&self) -> AdversarialOptions {
        AdversarialOptions {
            lambda_w: self.lambda_w,
            normalizer: self.sim_normalizer,
            reverse: true,
            reverse_target_path: self.reverse_target_path,
        }
    }
}

/// Sampled batch: dataset rows plus the items mined from them.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub labels: Vec<u32>,
    pub items: MinedItems,
}

/// `classes` uniform classes without replacement, `per_class` samples from
/// each (with replacement only when the class is smaller than that), and all
/// pairs or triplets that can be mined from them.
pub fn sample_batch(
    class_index: &[Vec<usize>],
    classes: usize,
    per_class: usize,
    pairs: bool,
    max_pairs: Option<usize>,
    rng: &mut Rng,
) -> Result<Batch> {
    let eligible: Vec<usize> = (0..class_index.len())
        .filter(|&c| !class_index[c].is_empty())
        .collect();
    if eligible.len() < 2 {
        return Err(Error::invalid("batch sampling needs at least 2 non-empty classes"));
    }
    if eligible.len() < classes {
        return Err(Error::invalid(format!(
            "{classes} classes per batch requested, dataset has {}",
            eligible.len()
        )));
    }
    let mut indices = Vec::with_capacity(classes * per_class);
    let mut labels = Vec::with_capacity(classes * per_class);
    for pick in rng.choose_distinct(eligible.len(), classes) {
        let c = eligible[pick];
        let members = &class_index[c];
        if members.len() >= per_class {
            indices.extend(rng.choose_distinct(members.len(), per_class).into_iter().map(|i| members[i]));
        } else {
            indices.extend((0..per_class).map(|_| members[rng.below(members.len())]));
        }
        labels.extend(std::iter::repeat_n(c as u32, per_class));
    }
    let items = if pairs {
        MinedItems::Pairs(mine_pairs(&labels, max_pairs, rng))
    } else {
        MinedItems::Triplets(mine_triplets(&labels, rng))
    };
    Ok(Batch {
        indices,
        labels,
        items,
    })
}

fn mine_pairs(labels: &[u32], max_pairs: Option<usize>, rng: &mut Rng) -> Vec<PairItem> {
    let n = labels.len();
    let mut all = Vec::with_capacity(n * (n - 1) / 2);
    for a in 0..n {
        for b in a + 1..n {
            all.push(PairItem {
                a,
                b,
                y: PairLabel::from_same_class(labels[a] == labels[b]),
            });
        }
    }
    match max_pairs {
        Some(cap) if cap < all.len() => {
            let negatives: Vec<usize> = (0..all.len())
                .filter(|&i| all[i].y == PairLabel::Negative)
                .collect();
            let positives = all.len() - negatives.len();
            let keep_neg = cap.saturating_sub(positives).min(negatives.len());
            let mut keep = vec![true; all.len()];
            for &i in &negatives {
                keep[i] = false;
            }
            for j in rng.choose_distinct(negatives.len(), keep_neg) {
                keep[negatives[j]] = true;
            }
            all.into_iter().zip(keep).filter(|(_, k)| *k).map(|(p, _)| p).collect()
        }
        _ => all,
    }
}

fn mine_triplets(labels: &[u32], rng: &mut Rng) -> Vec<TripletItem> {
    let n = labels.len();
    let mut out = Vec::new();
    for a in 0..n {
        for p in a + 1..n {
            if labels[a] != labels[p] {
                continue;
            }
            let negatives: Vec<usize> = (0..n).filter(|&k| labels[k] != labels[a]).collect();
            out.push(TripletItem {
                anchor: a,
                positive: p,
                negative: negatives[rng.below(negatives.len())],
            });
        }
    }
    out
}

/// Everything a run needs to continue: parameters, optimizer moments, the
/// batch rng position and the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: EnsembleModel,
    pub bank: Option<RegressorBank>,
    pub optimizer: Optimizer,
    pub rng: Rng,
    pub iteration: u64,
}

impl TrainState {
    pub fn new(config: TrainConfig, input_dim: usize) -> Result<Self> {
        config.validate()?;
        let partition = config.partition.resolve(config.embed_dim, config.learners)?;
        let mut init_rng = Rng::with_stream(config.seed, streams::MODEL_INIT);
        let model = EnsembleModel::random(input_dim, partition, config.backbone_hidden, &mut init_rng)?;
        Self::from_model(config, model, None)
    }

    /// Starts a run from existing parameters. A bank is created when the
    /// configuration needs one and none is given.
    pub fn from_model(
        config: TrainConfig,
        model: EnsembleModel,
        bank: Option<RegressorBank>,
    ) -> Result<Self> {
        config.validate()?;
        let bank = if config.uses_bank() {
            match bank {
                Some(b) if b.matches(&model.partition) => Some(b),
                Some(_) => return Err(Error::invalid("regressor bank does not match the model")),
                None => {
                    let mut rng = Rng::with_stream(config.seed, streams::BANK_INIT);
                    Some(RegressorBank::random(&model.partition, config.regressor_hidden, &mut rng)?)
                }
            }
        } else {
            None
        };
        Ok(Self {
            optimizer: Optimizer::new(config.optimizer)?,
            rng: Rng::with_stream(config.seed, streams::BATCHES),
            iteration: 0,
            config,
            model,
            bank,
        })
    }

    /// Continues from a full training checkpoint.
    pub fn resume(config: TrainConfig, ckpt: Checkpoint) -> Result<Self> {
        config.validate()?;
        let (Some(optimizer), Some(rng)) = (ckpt.optimizer, ckpt.rng) else {
            return Self::from_model(config, ckpt.model, ckpt.bank);
        };
        if config.uses_bank() != ckpt.bank.is_some() {
            return Err(Error::invalid(
                "checkpoint regressor bank does not match the diversity settings",
            ));
        }
        Ok(Self {
            config,
            model: ckpt.model,
            bank: ckpt.bank,
            optimizer,
            rng: Rng::from_state(rng),
            iteration: ckpt.iteration,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            bank: self.bank.clone(),
            optimizer: Some(self.optimizer.clone()),
            rng: Some(self.rng.state()),
            iteration: self.iteration,
        }
    }

    pub fn next_batch(&mut self, set: &FeatureSet, class_index: &[Vec<usize>]) -> Result<Batch> {
        sample_batch(
            class_index,
            self.config.batch_classes,
            self.config.samples_per_class,
            self.config.loss.kind.is_pair(),
            self.config.max_pairs_per_batch,
            &mut self.rng,
        )
        .map_err(|e| match e {
            Error::InvalidArgument(m) if set.is_empty() => Error::invalid(format!("empty dataset: {m}")),
            e => e,
        })
    }
}

/// Gradients of one step before the optimizer sees them.
#[derive(Debug, Clone, PartialEq)]
pub struct StepGradients {
    pub loss_metric: f64,
    pub loss_div: f64,
    pub grad_w: Matrix,
    pub grad_backbone: Option<BackboneGrad>,
    pub grad_bank: Option<RegressorBank>,
    pub used: usize,
    pub skipped: usize,
}

/// `L_metric + λ_div · L_div`. The diversity term only reaches `W` and the
/// regressor bank.
pub fn compute_gradients(state: &TrainState, set: &FeatureSet, batch: &Batch) -> Result<StepGradients> {
    let cfg = &state.config;
    let model = &state.model;
    let inputs: Vec<&[f64]> = batch.indices.iter().map(|&i| set.sample(i)).collect();
    let forwards = inputs
        .iter()
        .map(|x| model.forward(x))
        .collect::<Result<Vec<_>>>()?;
    let mg = model_gradient_from_forwards(
        model,
        &inputs,
        &forwards,
        &batch.items,
        &cfg.loss,
        &cfg.metric_options(),
        cfg.backbone_trainable,
        None,
    )?;
    let mut grad_w = mg.embedding;
    let mut loss_div = 0.0;
    let mut grad_bank = None;
    if cfg.lambda_div > 0.0 {
        let hidden: Vec<Vec<f64>> = forwards.into_iter().map(|f| f.hidden).collect();
        let d = diversity_loss(
            cfg.diversity,
            &model.embedding,
            &model.partition,
            state.bank.as_ref(),
            &hidden,
            &cfg.adversarial_options(),
        )?;
        loss_div = d.loss;
        grad_w.axpy(cfg.lambda_div, &d.grad_w);
        grad_bank = d.grad_bank.map(|mut b| {
            for p in b.params_mut() {
                p.iter_mut().for_each(|v| *v *= cfg.lambda_div);
            }
            b
        });
    }
    Ok(StepGradients {
        loss_metric: mg.loss,
        loss_div,
        grad_w,
        grad_backbone: mg.backbone,
        grad_bank,
        used: mg.used,
        skipped: mg.skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub loss_metric: f64,
    pub loss_div: f64,
    pub used: usize,
    pub skipped: usize,
}

/// One optimizer step on `batch`.
pub fn train_step(state: &mut TrainState, set: &FeatureSet, batch: &Batch) -> Result<StepMetrics> {
    let it = state.iteration;
    let g = compute_gradients(state, set, batch)?;
    if !g.loss_metric.is_finite() || !g.loss_div.is_finite() {
        return Err(Error::Divergence {
            iteration: it as usize,
            message: format!("loss became {} / {}", g.loss_metric, g.loss_div),
        });
    }
    let mut params: Vec<&mut [f64]> = vec![state.model.embedding.data_mut()];
    let mut grads: Vec<&[f64]> = vec![g.grad_w.data()];
    if let (Some(b), Some(gb)) = (state.model.backbone.as_mut(), g.grad_backbone.as_ref()) {
        params.push(b.weights.data_mut());
        params.push(&mut b.bias);
        grads.push(gb.weights.data());
        grads.push(&gb.bias);
    }
    if let (Some(bank), Some(gb)) = (state.bank.as_mut(), g.grad_bank.as_ref()) {
        params.extend(bank.params_mut());
        grads.extend(gb.params());
    }
    state
        .optimizer
        .step(&mut params, &grads)
        .map_err(|e| match e {
            Error::PoisonedState(m) => Error::PoisonedState(format!("iteration {it}: {m}")),
            e => e,
        })?;
    state.iteration += 1;
    Ok(StepMetrics {
        loss_metric: g.loss_metric,
        loss_div: g.loss_div,
        used: g.used,
        skipped: g.skipped,
    })
}

/// One metrics CSV row. Retrieval and correlation columns are `None` when no
/// evaluation set is given or the model has a single learner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub iter: u64,
    /// Means over the steps since the previous row.
    pub loss_metric: f64,
    pub loss_div: f64,
    pub r_at_1: Option<f64>,
    pub feat_corr: Option<f64>,
    pub clf_corr: Option<f64>,
}

pub const METRICS_HEADER: &str = "iter,loss_metric,loss_div,r_at_1,feat_corr,clf_corr";

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |v| v.to_string());
        format!(
            "{},{},{},{},{},{}",
            self.iter,
            self.loss_metric,
            self.loss_div,
            opt(self.r_at_1),
            opt(self.feat_corr),
            opt(self.clf_corr)
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.to_csv_line());
    }
    out
}

/// Trains until `config.iterations`, writing a metrics row at every
/// evaluation interval and after the last step.
pub fn run(
    state: &mut TrainState,
    train: &FeatureSet,
    eval: Option<&FeatureSet>,
) -> Result<Vec<MetricsRow>> {
    if train.dim() != state.model.input_dim() {
        return Err(Error::invalid(format!(
            "training data has {} features, model expects {}",
            train.dim(),
            state.model.input_dim()
        )));
    }
    let class_index = train.class_index();
    let total = state.config.iterations as u64;
    let every = state.config.eval_every as u64;
    let mut rows = Vec::new();
    let (mut sum_metric, mut sum_div, mut steps) = (0.0, 0.0, 0u64);
    while state.iteration < total {
        let batch = state.next_batch(train, &class_index)?;
        let m = train_step(state, train, &batch)?;
        sum_metric += m.loss_metric;
        sum_div += m.loss_div;
        steps += 1;
        let at_interval = every > 0 && state.iteration % every == 0;
        if at_interval || state.iteration == total {
            let mut row = MetricsRow {
                iter: state.iteration,
                loss_metric: sum_metric / steps as f64,
                loss_div: sum_div / steps as f64,
                r_at_1: None,
                feat_corr: None,
                clf_corr: None,
            };
            if let Some(set) = eval {
                let report = evaluate(
                    &state.model,
                    set,
                    &EvalOptions {
                        ks: vec![1],
                        test_embedding: state.config.test_embedding,
                        eval_pairs: state.config.eval_pairs,
                        seed: state.config.seed,
                    },
                )?;
                row.r_at_1 = report.recall_at_1();
                row.feat_corr = report.feature_corr;
                row.clf_corr = report.clf_corr;
            }
            log::info!("{}", row.to_csv_line());
            rows.push(row);
            (sum_metric, sum_div, steps) = (0.0, 0.0, 0);
        }
    }
    Ok(rows)
}

const TRAIN_MAGIC: &[u8; 8] = b"BIERTRN1";

/// Model file, optionally followed by a training trailer.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: EnsembleModel,
    pub bank: Option<RegressorBank>,
    pub optimizer: Option<Optimizer>,
    pub rng: Option<RngState>,
    pub iteration: u64,
}

impl Checkpoint {
    pub fn model_only(model: EnsembleModel, bank: Option<RegressorBank>) -> Self {
        Self {
            model,
            bank,
            optimizer: None,
            rng: None,
            iteration: 0,
        }
    }

    pub fn write_to<W: Write>(&self, out: W) -> Result<W> {
        let out = self.model.write_to(out)?;
        if self.bank.is_none() && self.optimizer.is_none() && self.rng.is_none() {
            return Ok(out);
        }
        let mut w = LeWriter::new(out);
        w.bytes(TRAIN_MAGIC)?;
        w.u64(self.iteration)?;
        match &self.rng {
            None => w.u8(0)?,
            Some(s) => {
                w.u8(1)?;
                w.bytes(&s.seed)?;
                w.u64(s.stream)?;
                w.u128(s.word_pos)?;
            }
        }
        match &self.optimizer {
            None => w.u8(0)?,
            Some(o) => {
                w.u8(1)?;
                o.write_section(&mut w)?;
            }
        }
        match &self.bank {
            None => w.u8(0)?,
            Some(b) => {
                w.u8(1)?;
                b.write_section(&mut w)?;
            }
        }
        Ok(w.into_inner())
    }

    pub fn read_from<R: Read>(input: R) -> Result<Self> {
        let mut r = LeReader::new(input);
        let model = EnsembleModel::read_section(&mut r)?;
        if !r.optional_magic(TRAIN_MAGIC)? {
            return Ok(Self::model_only(model, None));
        }
        let iteration = r.u64("iteration")?;
        let rng = if flag(&mut r, "rng flag")? {
            let mut seed = [0u8; 32];
            r.fill(&mut seed, "rng seed")?;
            Some(RngState {
                seed,
                stream: r.u64("rng stream")?,
                word_pos: r.u128("rng position")?,
            })
        } else {
            None
        };
        let optimizer = if flag(&mut r, "optimizer flag")? {
            Some(Optimizer::read_section(&mut r)?)
        } else {
            None
        };
        let bank = if flag(&mut r, "bank flag")? {
            Some(RegressorBank::read_section(&mut r, &model.partition)?)
        } else {
            None
        };
        r.expect_eof()?;
        Ok(Self {
            model,
            bank,
            optimizer,
            rng,
            iteration,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        self.write_to(BufWriter::new(f))?
            .flush()
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        Self::read_from(BufReader::new(f))
    }
}

fn flag<R: Read>(r: &mut LeReader<R>, what: &str) -> Result<bool> {
    let at = r.offset();
    match r.u8(what)? {
        0 => Ok(false),
        1 => Ok(true),
        v => Err(Error::format(at, format!("bad {what} {v}"))),
    }
}

/// Settings of the diversity-only solver for the embedding matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct InitConfig {
    pub kind: DiversityKind,
    pub lambda_w: f64,
    pub lr: f64,
    pub momentum: f64,
    pub max_iterations: usize,
    /// Stop once the loss changes by less than this fraction over `window`
    /// iterations.
    pub tolerance: f64,
    pub window: usize,
    /// Allowed deviation of squared weight-vector norms from 1.
    pub norm_band: f64,
    pub adversarial: AdversarialOptions,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            kind: DiversityKind::Activation,
            lambda_w: 10.0,
            lr: 1e-3,
            momentum: 0.9,
            max_iterations: 5000,
            tolerance: 1e-6,
            window: 100,
            norm_band: 1e-3,
            adversarial: AdversarialOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitReport {
    pub iterations: usize,
    pub converged: bool,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Suppression or similarity term, per iteration, starting before the
    /// first update.
    pub interaction: Vec<f64>,
    pub min_sq_norm: f64,
    pub max_sq_norm: f64,
    pub within_band: bool,
}

impl InitReport {
    pub fn initial_interaction(&self) -> f64 {
        self.interaction[0]
    }

    pub fn final_interaction(&self) -> f64 {
        *self.interaction.last().unwrap()
    }
}

/// Minimizes the diversity loss over `W` alone on precomputed features `φ(x)`
/// with SGD and momentum. The adversarial kind also trains `bank`.
pub fn init_solver(
    hidden: &[Vec<f64>],
    model: &mut EnsembleModel,
    mut bank: Option<&mut RegressorBank>,
    cfg: &InitConfig,
) -> Result<InitReport> {
    let mut opts = cfg.adversarial;
    opts.lambda_w = cfg.lambda_w;
    if cfg.kind == DiversityKind::Adversarial && bank.is_none() {
        return Err(Error::invalid("adversarial initialization needs a regressor bank"));
    }
    let mut optimizer = Optimizer::new(OptimConfig::sgd_momentum(cfg.lr, cfg.momentum))?;
    let mut losses = Vec::with_capacity(cfg.max_iterations + 1);
    let mut interaction = Vec::with_capacity(cfg.max_iterations + 1);
    let mut converged = false;
    let mut it = 0;
    loop {
        let d = diversity_loss(
            cfg.kind,
            &model.embedding,
            &model.partition,
            bank.as_deref(),
            hidden,
            &opts,
        )?;
        if !d.loss.is_finite() || !d.grad_w.is_finite() {
            return Err(Error::Divergence {
                iteration: it,
                message: format!(
                    "diversity loss {} (last finite value {:?})",
                    d.loss,
                    losses.last()
                ),
            });
        }
        losses.push(d.loss);
        interaction.push(d.interaction);
        if it >= cfg.window {
            let before = losses[it - cfg.window];
            let change = (d.loss - before).abs() / before.abs().max(f64::MIN_POSITIVE);
            if change < cfg.tolerance {
                converged = true;
                break;
            }
        }
        if it == cfg.max_iterations {
            break;
        }
        let mut params: Vec<&mut [f64]> = vec![model.embedding.data_mut()];
        let mut grads: Vec<&[f64]> = vec![d.grad_w.data()];
        if let (Some(b), Some(gb)) = (bank.as_deref_mut(), d.grad_bank.as_ref()) {
            params.extend(b.params_mut());
            grads.extend(gb.params());
        }
        optimizer.step(&mut params, &grads).map_err(|e| Error::Divergence {
            iteration: it,
            message: e.to_string(),
        })?;
        it += 1;
    }
    let norms = column_sq_norms(&model.embedding);
    let min_sq_norm = norms.iter().copied().fold(f64::INFINITY, f64::min);
    let max_sq_norm = norms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let within_band = norms.iter().all(|n| (n - 1.0).abs() <= cfg.norm_band);
    if !within_band {
        log::warn!(
            "squared weight norms in [{min_sq_norm:.6}, {max_sq_norm:.6}] fall outside 1 ± {}",
            cfg.norm_band
        );
    }
    Ok(InitReport {
        iterations: it,
        converged,
        initial_loss: losses[0],
        final_loss: *losses.last().unwrap(),
        interaction,
        min_sq_norm,
        max_sq_norm,
        within_band,
    })
}
