//! Finite-difference checks of every hand-written gradient.

use std::fmt;
use std::str::FromStr;

use crate::boosting::{accumulate_w_gradient, frozen_objective, MetricOptions, MinedItems, PairItem, TripletItem};
use crate::diversity::{activation_loss, adversarial_loss, AdversarialOptions, RegressorBank};
use crate::ensemble::{cosine, cosine_sim_grad, EnsembleModel, GroupPartition};
use crate::error::{Error, Result};
use crate::losses::{pair_loss, triplet_loss, LossSpec, PairLabel};
use crate::tensor::{norm, Rng};

pub const TOLERANCE: f64 = 1e-5;
pub const INSTANCES: usize = 50;
const STEP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Module {
    Losses,
    Boosting,
    Diversity,
}

impl Module {
    pub const ALL: [Module; 3] = [Module::Losses, Module::Boosting, Module::Diversity];

    pub fn checks(self) -> &'static [&'static str] {
        match self {
            Module::Losses => &["binomial_deviance", "contrastive", "triplet", "cosine"],
            Module::Boosting => &["boosted_pair_w", "boosted_triplet_w", "boosted_backbone"],
            Module::Diversity => &[
                "activation_w",
                "adversarial_w",
                "adversarial_reversed_similarity_w",
                "adversarial_regressors",
            ],
        }
    }
}

impl fmt::Display for Module {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Module::Losses => "losses",
            Module::Boosting => "boosting",
            Module::Diversity => "diversity",
        })
    }
}

impl FromStr for Module {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "losses" => Ok(Module::Losses),
            "boosting" => Ok(Module::Boosting),
            "diversity" => Ok(Module::Diversity),
            other => Err(Error::invalid(format!(
                "unknown gradcheck module `{other}` (expected losses, boosting or diversity)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub module: Module,
    pub name: &'static str,
    pub instances: usize,
    pub worst_rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.worst_rel_error < TOLERANCE
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub checks: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed())
    }

    /// Largest relative error per module, in module order.
    pub fn worst_per_module(&self) -> Vec<(Module, f64)> {
        let mut out: Vec<(Module, f64)> = Vec::new();
        for c in &self.checks {
            match out.iter_mut().find(|(m, _)| *m == c.module) {
                Some((_, w)) => *w = w.max(c.worst_rel_error),
                None => out.push((c.module, c.worst_rel_error)),
            }
        }
        out
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradcheckOptions {
    /// `None` runs every module.
    pub modules: Option<Vec<Module>>,
    pub seed: u64,
    /// Negates the analytic gradient of the named check, to prove the harness
    /// notices.
    pub inject_fault: Option<String>,
}

/// Floor on the error denominator; central differences of an exactly flat
/// function still carry roundoff of order `ε / STEP`.
const SCALE_FLOOR: f64 = 1e-4;

/// `‖a − n‖ / max(‖a‖, ‖n‖, 1e-4)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(SCALE_FLOOR)
}

/// Central differences of `f` around `x`.
pub fn numeric_gradient(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|k| {
            let orig = p[k];
            p[k] = orig + STEP;
            let up = f(&p);
            p[k] = orig - STEP;
            let down = f(&p);
            p[k] = orig;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

pub fn run(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let modules = opts.modules.clone().unwrap_or_else(|| Module::ALL.to_vec());
    if let Some(name) = &opts.inject_fault {
        if !modules.iter().any(|m| m.checks().contains(&name.as_str())) {
            return Err(Error::invalid(format!("no selected check is named `{name}`")));
        }
    }
    let mut checks = Vec::new();
    for module in modules {
        for &name in module.checks() {
            let sign = if opts.inject_fault.as_deref() == Some(name) { -1.0 } else { 1.0 };
            let mut rng = Rng::with_stream(opts.seed, checks.len() as u64);
            let mut worst = 0.0f64;
            for _ in 0..INSTANCES {
                let (mut analytic, numeric) = instance(name, &mut rng)?;
                analytic.iter_mut().for_each(|v| *v *= sign);
                worst = worst.max(relative_error(&analytic, &numeric));
            }
            log::debug!("gradcheck {module}/{name}: worst relative error {worst:.3e}");
            checks.push(CheckResult {
                module,
                name,
                instances: INSTANCES,
                worst_rel_error: worst,
            });
        }
    }
    Ok(GradcheckReport { checks })
}

fn random_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

/// A score in `[-1, 1]` at least `gap` away from every point in `kinks`.
fn score_away_from(rng: &mut Rng, kinks: &[f64], gap: f64) -> f64 {
    loop {
        let s = rng.uniform_range(-1.0, 1.0);
        if kinks.iter().all(|k| (s - k).abs() > gap) {
            return s;
        }
    }
}

fn label(rng: &mut Rng) -> PairLabel {
    PairLabel::from_same_class(rng.below(2) == 0)
}

/// Classes with two members each so every batch has positives.
fn paired_labels(n: usize) -> Vec<usize> {
    (0..n).map(|i| i / 2).collect()
}

fn all_pairs(labels: &[usize]) -> MinedItems {
    let mut out = Vec::new();
    for a in 0..labels.len() {
        for b in a + 1..labels.len() {
            out.push(PairItem {
                a,
                b,
                y: PairLabel::from_same_class(labels[a] == labels[b]),
            });
        }
    }
    MinedItems::Pairs(out)
}

fn all_triplets(labels: &[usize], rng: &mut Rng) -> MinedItems {
    let mut out = Vec::new();
    for a in 0..labels.len() {
        for p in a + 1..labels.len() {
            if labels[a] != labels[p] {
                continue;
            }
            let negs: Vec<usize> = (0..labels.len()).filter(|&k| labels[k] != labels[a]).collect();
            out.push(TripletItem {
                anchor: a,
                positive: p,
                negative: negs[rng.below(negs.len())],
            });
        }
    }
    MinedItems::Triplets(out)
}

fn random_partition(rng: &mut Rng, d: usize) -> Result<GroupPartition> {
    let m = 2 + rng.below(2);
    GroupPartition::proportional(d, m)
}

type Pair = (Vec<f64>, Vec<f64>);

fn instance(name: &str, rng: &mut Rng) -> Result<Pair> {
    match name {
        "binomial_deviance" => {
            let spec = LossSpec::binomial_deviance();
            let (s, y) = (rng.uniform_range(-1.0, 1.0), label(rng));
            let analytic = pair_loss(&spec, s, y)?.1;
            let numeric = numeric_gradient(&[s], |x| pair_loss(&spec, x[0], y).unwrap().0);
            Ok((vec![analytic], numeric))
        }
        "contrastive" => {
            let spec = LossSpec::contrastive();
            let y = label(rng);
            let s = score_away_from(rng, &[spec.margin_contrastive], 1e-3);
            let analytic = pair_loss(&spec, s, y)?.1;
            let numeric = numeric_gradient(&[s], |x| pair_loss(&spec, x[0], y).unwrap().0);
            Ok((vec![analytic], numeric))
        }
        "triplet" => {
            let spec = LossSpec::triplet();
            let sp = rng.uniform_range(-1.0, 1.0);
            let sn = score_away_from(rng, &[sp - spec.margin_triplet], 1e-3);
            let (_, dp, dn) = triplet_loss(&spec, sp, sn)?;
            let numeric = numeric_gradient(&[sp, sn], |x| triplet_loss(&spec, x[0], x[1]).unwrap().0);
            Ok((vec![dp, dn], numeric))
        }
        "cosine" => {
            let n = 2 + rng.below(15);
            let (u, v) = (random_vec(rng, n), random_vec(rng, n));
            let g = cosine_sim_grad(&u, &v)?;
            let mut x = u.clone();
            x.extend_from_slice(&v);
            let numeric = numeric_gradient(&x, |x| cosine(&x[..n], &x[n..]).unwrap());
            let mut analytic = g.ds_du;
            analytic.extend(g.ds_dv);
            Ok((analytic, numeric))
        }
        "boosted_pair_w" | "boosted_triplet_w" | "boosted_backbone" => boosted(name, rng),
        "activation_w" => {
            let (h, d) = (5 + rng.below(4), 4 + rng.below(5));
            let part = random_partition(rng, d)?;
            let model = EnsembleModel::random(h, part.clone(), None, rng)?;
            let hidden: Vec<Vec<f64>> = (0..4).map(|_| random_vec(rng, h)).collect();
            let lambda_w = rng.uniform_range(0.1, 2.0);
            let a = activation_loss(&model.embedding, &part, &hidden, lambda_w)?;
            let numeric = perturb_w(&model, |w| {
                activation_loss(w, &part, &hidden, lambda_w).unwrap().loss
            });
            Ok((a.grad_w.into_data(), numeric))
        }
        "adversarial_w" | "adversarial_reversed_similarity_w" | "adversarial_regressors" => {
            adversarial(name, rng)
        }
        other => Err(Error::invalid(format!("unknown gradient check `{other}`"))),
    }
}

fn perturb_w(model: &EnsembleModel, f: impl Fn(&crate::tensor::Matrix) -> f64) -> Vec<f64> {
    let mut w = model.embedding.clone();
    numeric_gradient(model.embedding.data(), |x| {
        w.data_mut().copy_from_slice(x);
        f(&w)
    })
}

fn boosted(name: &str, rng: &mut Rng) -> Result<Pair> {
    let (input, d) = (4 + rng.below(4), 4 + rng.below(5));
    let part = random_partition(rng, d)?;
    let backbone = (name == "boosted_backbone").then_some(5 + rng.below(3));
    let model = EnsembleModel::random(input, part, backbone, rng)?;
    let xs: Vec<Vec<f64>> = (0..8).map(|_| random_vec(rng, input)).collect();
    let inputs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    let labels = paired_labels(xs.len());
    let (spec, items) = if name == "boosted_triplet_w" {
        (LossSpec::triplet(), all_triplets(&labels, rng))
    } else {
        (LossSpec::binomial_deviance(), all_pairs(&labels))
    };
    let opts = MetricOptions::default();
    let g = accumulate_w_gradient(&model, &inputs, &items, &spec, &opts, backbone.is_some())?;
    let objective = |m: &EnsembleModel| frozen_objective(m, &inputs, &items, &spec, &opts, &g.weights).unwrap();
    if let Some(gb) = g.backbone {
        let mut m = model.clone();
        let numeric = numeric_gradient(model.backbone.as_ref().unwrap().weights.data(), |x| {
            m.backbone.as_mut().unwrap().weights.data_mut().copy_from_slice(x);
            objective(&m)
        });
        return Ok((gb.weights.into_data(), numeric));
    }
    let mut m = model.clone();
    let numeric = numeric_gradient(model.embedding.data(), |x| {
        m.embedding.data_mut().copy_from_slice(x);
        objective(&m)
    });
    Ok((g.embedding.into_data(), numeric))
}

fn adversarial(name: &str, rng: &mut Rng) -> Result<Pair> {
    let (h, d) = (5 + rng.below(4), 4 + rng.below(5));
    let part = random_partition(rng, d)?;
    let model = EnsembleModel::random(h, part.clone(), None, rng)?;
    let bank = RegressorBank::random(&part, 3 + rng.below(4), rng)?;
    let hidden: Vec<Vec<f64>> = (0..4).map(|_| random_vec(rng, h)).collect();
    let lambda_w = rng.uniform_range(0.1, 2.0);
    let reversed = AdversarialOptions {
        lambda_w,
        ..Default::default()
    };
    let plain = AdversarialOptions {
        reverse: false,
        ..reversed
    };
    match name {
        // Without reversal the W gradient is the plain derivative of the loss.
        "adversarial_w" => {
            let a = adversarial_loss(&model.embedding, &part, &bank, &hidden, &plain)?;
            let numeric = perturb_w(&model, |w| {
                adversarial_loss(w, &part, &bank, &hidden, &plain).unwrap().loss
            });
            Ok((a.grad_w.into_data(), numeric))
        }
        "adversarial_reversed_similarity_w" => {
            let a = adversarial_loss(&model.embedding, &part, &bank, &hidden, &reversed)?;
            let numeric = perturb_w(&model, |w| {
                adversarial_loss(w, &part, &bank, &hidden, &reversed).unwrap().similarity
            });
            Ok((a.grad_w_similarity.into_data(), numeric))
        }
        _ => {
            let a = adversarial_loss(&model.embedding, &part, &bank, &hidden, &reversed)?;
            let flat: Vec<f64> = bank.params().concat();
            let analytic: Vec<f64> = a.grad_bank.params().concat();
            let mut probe = bank.clone();
            let numeric = numeric_gradient(&flat, |x| {
                let mut off = 0;
                for p in probe.params_mut() {
                    let n = p.len();
                    p.copy_from_slice(&x[off..off + n]);
                    off += n;
                }
                adversarial_loss(&model.embedding, &part, &probe, &hidden, &reversed)
                    .unwrap()
                    .loss
            });
            Ok((analytic, numeric))
        }
    }
}
