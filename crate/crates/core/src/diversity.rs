//! Diversity regularizers that decorrelate the learner groups.
//!
//! Both losses read the raw group outputs `f_i(x) = φ(x)ᵀ W[:, G_i]` and only
//! produce gradients for `W` (and for the regressor bank in the adversarial
//! case). Nothing here reaches the backbone.

use std::io::{Read, Write};

use crate::codec::{to_u32, LeReader, LeWriter};
use crate::ensemble::GroupPartition;
use crate::error::{Error, Result};
use crate::tensor::{axpy, dot, norm_sq, Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DiversityKind {
    Activation,
    #[default]
    Adversarial,
}

impl DiversityKind {
    /// Regularization weight used when none is configured.
    pub fn default_lambda_div(self) -> f64 {
        match self {
            DiversityKind::Activation => 1e-2,
            DiversityKind::Adversarial => 1e-3,
        }
    }
}

impl std::str::FromStr for DiversityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "activation" => Ok(DiversityKind::Activation),
            "adversarial" => Ok(DiversityKind::Adversarial),
            other => Err(Error::invalid(format!("unknown diversity kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for DiversityKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DiversityKind::Activation => "activation",
            DiversityKind::Adversarial => "adversarial",
        })
    }
}

/// `Σ_c (‖w_c‖² − 1)²` over the `d` columns of `W` and its gradient.
pub fn weight_column_penalty(w: &Matrix) -> (f64, Matrix) {
    let mut sq = vec![0.0; w.cols()];
    for r in 0..w.rows() {
        for (s, v) in sq.iter_mut().zip(w.row(r)) {
            *s += v * v;
        }
    }
    let value = sq.iter().map(|s| (s - 1.0).powi(2)).sum();
    let mut grad = w.clone();
    for r in 0..w.rows() {
        for (g, s) in grad.row_mut(r).iter_mut().zip(&sq) {
            *g *= 4.0 * (s - 1.0);
        }
    }
    (value, grad)
}

/// `Σ_r (‖row_r‖² − 1)²` and its gradient, accumulated into `grad`.
fn row_penalty(m: &Matrix, grad: &mut Matrix) -> f64 {
    let mut value = 0.0;
    for r in 0..m.rows() {
        let row = m.row(r);
        let e = norm_sq(row) - 1.0;
        value += e * e;
        axpy(grad.row_mut(r), 4.0 * e, row);
    }
    value
}

fn check_batch(w: &Matrix, partition: &GroupPartition, hidden: &[Vec<f64>]) -> Result<()> {
    if hidden.is_empty() {
        return Err(Error::invalid("diversity loss needs a nonempty batch"));
    }
    if w.cols() != partition.total() {
        return Err(Error::invalid(format!(
            "W has {} columns, partition covers {}",
            w.cols(),
            partition.total()
        )));
    }
    if let Some(i) = hidden.iter().position(|x| x.len() != w.rows()) {
        return Err(Error::invalid(format!(
            "sample {i} has {} features, W expects {}",
            hidden[i].len(),
            w.rows()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationLoss {
    pub loss: f64,
    /// Mean cross-group suppression term.
    pub suppression: f64,
    pub penalty: f64,
    pub grad_w: Matrix,
}

/// Cross-group activation suppression plus the unit-norm weight penalty.
pub fn activation_loss(
    w: &Matrix,
    partition: &GroupPartition,
    hidden: &[Vec<f64>],
    lambda_w: f64,
) -> Result<ActivationLoss> {
    check_batch(w, partition, hidden)?;
    let m = partition.num_groups();
    let scale = 1.0 / hidden.len() as f64;
    let mut suppression = 0.0;
    let mut grad_w = Matrix::zeros(w.rows(), w.cols());
    let mut df = vec![0.0; w.cols()];
    for phi in hidden {
        let f = w.tmul_vec(phi)?;
        let energy: Vec<f64> = (0..m).map(|i| norm_sq(partition.slice(&f, i))).collect();
        let total: f64 = energy.iter().sum();
        for i in 0..m {
            for j in i + 1..m {
                suppression += energy[i] * energy[j];
            }
        }
        for i in 0..m {
            let others = total - energy[i];
            for k in partition.range(i) {
                df[k] = 2.0 * f[k] * others;
            }
        }
        grad_w.add_outer(scale, phi, &df);
    }
    suppression *= scale;
    let (penalty, pgrad) = weight_column_penalty(w);
    grad_w.axpy(lambda_w, &pgrad);
    Ok(ActivationLoss {
        loss: suppression + lambda_w * penalty,
        suppression,
        penalty,
        grad_w,
    })
}

/// Two-layer rectifier network mapping group `j` onto group `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Regressor {
    /// `hidden × d_j`.
    pub w1: Matrix,
    pub b1: Vec<f64>,
    /// `d_i × hidden`.
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

struct RegressorForward {
    pre: Vec<f64>,
    act: Vec<f64>,
    out: Vec<f64>,
}

impl Regressor {
    pub fn new(w1: Matrix, b1: Vec<f64>, w2: Matrix, b2: Vec<f64>) -> Result<Self> {
        if b1.len() != w1.rows() || w2.cols() != w1.rows() || b2.len() != w2.rows() {
            return Err(Error::invalid("regressor layer shapes are inconsistent"));
        }
        Ok(Self { w1, b1, w2, b2 })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn random(d_in: usize, d_out: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            w1: Matrix::glorot(hidden, d_in, rng),
            b1: vec![0.0; hidden],
            w2: Matrix::glorot(d_out, hidden, rng),
            b2: vec![0.0; d_out],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn forward(&self, v: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_full(v)?.out)
    }

    fn forward_full(&self, v: &[f64]) -> Result<RegressorForward> {
        let mut pre = self.w1.mul_vec(v)?;
        axpy(&mut pre, 1.0, &self.b1);
        let act: Vec<f64> = pre.iter().map(|p| p.max(0.0)).collect();
        let mut out = self.w2.mul_vec(&act)?;
        axpy(&mut out, 1.0, &self.b2);
        Ok(RegressorForward { pre, act, out })
    }

    /// Accumulates parameter gradients for upstream `dout` and returns the
    /// gradient with respect to the input.
    fn backward(
        &self,
        v: &[f64],
        fw: &RegressorForward,
        dout: &[f64],
        grad: &mut Regressor,
    ) -> Vec<f64> {
        grad.w2.add_outer(1.0, dout, &fw.act);
        axpy(&mut grad.b2, 1.0, dout);
        let dact = self.w2.tmul_vec(dout).expect("shape checked in forward");
        let dpre: Vec<f64> = dact
            .iter()
            .zip(&fw.pre)
            .map(|(d, p)| if *p > 0.0 { *d } else { 0.0 })
            .collect();
        grad.w1.add_outer(1.0, &dpre, v);
        axpy(&mut grad.b1, 1.0, &dpre);
        self.w1.tmul_vec(&dpre).expect("shape checked in forward")
    }

    fn zeros_like(&self) -> Self {
        Self {
            w1: Matrix::zeros(self.w1.rows(), self.w1.cols()),
            b1: vec![0.0; self.b1.len()],
            w2: Matrix::zeros(self.w2.rows(), self.w2.cols()),
            b2: vec![0.0; self.b2.len()],
        }
    }

    /// Bias hinge plus row-norm penalties; gradient accumulated into `grad`.
    fn penalty(&self, grad: &mut Regressor, scale: f64) -> f64 {
        let bb = norm_sq(&self.b1) + norm_sq(&self.b2);
        let mut value = 0.0;
        if bb > 1.0 {
            value += bb - 1.0;
            axpy(&mut grad.b1, 2.0 * scale, &self.b1);
            axpy(&mut grad.b2, 2.0 * scale, &self.b2);
        }
        let mut g1 = Matrix::zeros(self.w1.rows(), self.w1.cols());
        let mut g2 = Matrix::zeros(self.w2.rows(), self.w2.cols());
        value += row_penalty(&self.w1, &mut g1);
        value += row_penalty(&self.w2, &mut g2);
        grad.w1.axpy(scale, &g1);
        grad.w2.axpy(scale, &g2);
        value
    }

    /// Parameter blocks in a fixed order: `w1, b1, w2, b2`.
    pub fn params(&self) -> [&[f64]; 4] {
        [self.w1.data(), &self.b1, self.w2.data(), &self.b2]
    }

    pub fn params_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w1.data_mut(),
            &mut self.b1,
            self.w2.data_mut(),
            &mut self.b2,
        ]
    }
}

/// One regressor `g_(j,i)` per learner pair `i < j`, in row-major pair order.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressorBank {
    pub pairs: Vec<(usize, usize)>,
    pub regressors: Vec<Regressor>,
}

fn learner_pairs(m: usize) -> Vec<(usize, usize)> {
    (0..m)
        .flat_map(|i| (i + 1..m).map(move |j| (i, j)))
        .collect()
}

impl RegressorBank {
    pub fn random(partition: &GroupPartition, hidden: usize, rng: &mut Rng) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::invalid("regressor hidden size must be positive"));
        }
        let sizes = partition.sizes();
        let pairs = learner_pairs(sizes.len());
        let regressors = pairs
            .iter()
            .map(|&(i, j)| Regressor::random(sizes[j], sizes[i], hidden, rng))
            .collect();
        Ok(Self { pairs, regressors })
    }

    pub fn len(&self) -> usize {
        self.regressors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regressors.is_empty()
    }

    pub fn hidden_dim(&self) -> Option<usize> {
        self.regressors.first().map(Regressor::hidden_dim)
    }

    pub fn matches(&self, partition: &GroupPartition) -> bool {
        let sizes = partition.sizes();
        self.pairs == learner_pairs(sizes.len())
            && self
                .pairs
                .iter()
                .zip(&self.regressors)
                .all(|(&(i, j), r)| r.input_dim() == sizes[j] && r.output_dim() == sizes[i])
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            pairs: self.pairs.clone(),
            regressors: self.regressors.iter().map(Regressor::zeros_like).collect(),
        }
    }

    pub fn params(&self) -> Vec<&[f64]> {
        self.regressors.iter().flat_map(|r| r.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.regressors
            .iter_mut()
            .flat_map(|r| r.params_mut())
            .collect()
    }

    pub(crate) fn write_section<W: Write>(&self, out: &mut LeWriter<W>) -> Result<()> {
        out.u32(to_u32(self.len(), "regressor count")?)?;
        out.u32(to_u32(self.hidden_dim().unwrap_or(0), "regressor hidden size")?)?;
        for (&(i, j), r) in self.pairs.iter().zip(&self.regressors) {
            out.u32(to_u32(i, "regressor target")?)?;
            out.u32(to_u32(j, "regressor source")?)?;
            out.u32(to_u32(r.input_dim(), "regressor input")?)?;
            out.u32(to_u32(r.output_dim(), "regressor output")?)?;
            for p in r.params() {
                out.f64_slice(p)?;
            }
        }
        Ok(())
    }

    pub(crate) fn read_section<R: Read>(
        input: &mut LeReader<R>,
        partition: &GroupPartition,
    ) -> Result<Self> {
        let start = input.offset();
        let count = input.u32("regressor count")? as usize;
        let hidden = input.u32("regressor hidden size")? as usize;
        let mut pairs = Vec::with_capacity(count);
        let mut regressors = Vec::with_capacity(count);
        for _ in 0..count {
            let i = input.u32("regressor target")? as usize;
            let j = input.u32("regressor source")? as usize;
            let d_in = input.u32("regressor input")? as usize;
            let d_out = input.u32("regressor output")? as usize;
            let w1 = input.f64_vec(hidden * d_in, "regressor w1")?;
            let b1 = input.f64_vec(hidden, "regressor b1")?;
            let w2 = input.f64_vec(d_out * hidden, "regressor w2")?;
            let b2 = input.f64_vec(d_out, "regressor b2")?;
            pairs.push((i, j));
            regressors.push(Regressor::new(
                Matrix::new(hidden, d_in, w1)?,
                b1,
                Matrix::new(d_out, hidden, w2)?,
                b2,
            )?);
        }
        let bank = Self { pairs, regressors };
        if !bank.matches(partition) {
            return Err(Error::format(start, "regressor bank does not match the partition"));
        }
        Ok(bank)
    }
}

/// Denominator of the per-pair similarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SimNormalizer {
    /// Width of the regressor input group.
    #[default]
    Source,
    /// Width of the regressor output group.
    Target,
}

impl std::str::FromStr for SimNormalizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "d_j" => Ok(SimNormalizer::Source),
            "d_i" => Ok(SimNormalizer::Target),
            other => Err(Error::invalid(format!(
                "unknown similarity normalizer `{other}` (expected d_j or d_i)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdversarialOptions {
    pub lambda_w: f64,
    pub normalizer: SimNormalizer,
    /// Flip the similarity gradient on its way into `W`.
    pub reverse: bool,
    /// Also flip it on the target group path `f_i`, not only the regressor
    /// input `f_j`.
    pub reverse_target_path: bool,
}

impl Default for AdversarialOptions {
    fn default() -> Self {
        Self {
            lambda_w: 1.0,
            normalizer: SimNormalizer::Source,
            reverse: true,
            reverse_target_path: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialLoss {
    /// `−similarity + λ_w·penalty`.
    pub loss: f64,
    /// `(1/N) Σ_n Σ_{i<j} L_sim`.
    pub similarity: f64,
    pub penalty: f64,
    /// `∂loss/∂bank`; descending it raises the similarity.
    pub grad_bank: RegressorBank,
    /// Similarity part of the `W` gradient after reversal.
    pub grad_w_similarity: Matrix,
    /// `grad_w_similarity + λ_w·∂penalty/∂W`.
    pub grad_w: Matrix,
}

/// Regressors try to predict one group from another; the embedding receives
/// the reversed gradient and learns to defeat them.
pub fn adversarial_loss(
    w: &Matrix,
    partition: &GroupPartition,
    bank: &RegressorBank,
    hidden: &[Vec<f64>],
    opts: &AdversarialOptions,
) -> Result<AdversarialLoss> {
    check_batch(w, partition, hidden)?;
    if !bank.matches(partition) {
        return Err(Error::invalid("regressor bank does not match the partition"));
    }
    let scale = 1.0 / hidden.len() as f64;
    let sizes = partition.sizes();
    let mut grad_bank = bank.zeros_like();
    let mut similarity = 0.0;
    // Gradient of +similarity with respect to W, split by path.
    let mut gw_source = Matrix::zeros(w.rows(), w.cols());
    let mut gw_target = Matrix::zeros(w.rows(), w.cols());
    let mut df_source = vec![0.0; w.cols()];
    let mut df_target = vec![0.0; w.cols()];
    for phi in hidden {
        let f = w.tmul_vec(phi)?;
        df_source.iter_mut().for_each(|v| *v = 0.0);
        df_target.iter_mut().for_each(|v| *v = 0.0);
        for (k, (&(i, j), r)) in bank.pairs.iter().zip(&bank.regressors).enumerate() {
            let c = match opts.normalizer {
                SimNormalizer::Source => 1.0 / sizes[j] as f64,
                SimNormalizer::Target => 1.0 / sizes[i] as f64,
            };
            let u = partition.slice(&f, i);
            let v = partition.slice(&f, j);
            let fw = r.forward_full(v)?;
            let g = &fw.out;
            similarity += c * u.iter().zip(g).map(|(a, b)| (a * b).powi(2)).sum::<f64>();
            // The bank descends on −similarity.
            let dg: Vec<f64> = u
                .iter()
                .zip(g)
                .map(|(a, b)| -scale * 2.0 * c * a * a * b)
                .collect();
            let dv = r.backward(v, &fw, &dg, &mut grad_bank.regressors[k]);
            let ri = partition.range(i);
            for ((d, a), b) in df_target[ri].iter_mut().zip(u).zip(g) {
                *d += 2.0 * c * a * b * b;
            }
            // `dv` is the gradient of −similarity/N; undo both factors.
            let rj = partition.range(j);
            for (d, x) in df_source[rj].iter_mut().zip(&dv) {
                *d -= x / scale;
            }
        }
        gw_source.add_outer(scale, phi, &df_source);
        gw_target.add_outer(scale, phi, &df_target);
    }
    similarity *= scale;

    // Unreversed, the embedding would descend on −similarity as well.
    let source_sign = if opts.reverse { 1.0 } else { -1.0 };
    let target_sign = if opts.reverse && opts.reverse_target_path {
        1.0
    } else {
        -1.0
    };
    let mut grad_w_similarity = Matrix::zeros(w.rows(), w.cols());
    grad_w_similarity.axpy(source_sign, &gw_source);
    grad_w_similarity.axpy(target_sign, &gw_target);

    let mut penalty = 0.0;
    for (r, g) in bank.regressors.iter().zip(grad_bank.regressors.iter_mut()) {
        penalty += r.penalty(g, opts.lambda_w);
    }
    let (wp, wgrad) = weight_column_penalty(w);
    penalty += wp;
    let mut grad_w = grad_w_similarity.clone();
    grad_w.axpy(opts.lambda_w, &wgrad);
    Ok(AdversarialLoss {
        loss: -similarity + opts.lambda_w * penalty,
        similarity,
        penalty,
        grad_bank,
        grad_w_similarity,
        grad_w,
    })
}

/// Either regularizer's loss and gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct DiversityLoss {
    pub loss: f64,
    /// Cross-group term alone: suppression or similarity.
    pub interaction: f64,
    pub penalty: f64,
    pub grad_w: Matrix,
    pub grad_bank: Option<RegressorBank>,
}

pub fn diversity_loss(
    kind: DiversityKind,
    w: &Matrix,
    partition: &GroupPartition,
    bank: Option<&RegressorBank>,
    hidden: &[Vec<f64>],
    opts: &AdversarialOptions,
) -> Result<DiversityLoss> {
    match kind {
        DiversityKind::Activation => {
            let a = activation_loss(w, partition, hidden, opts.lambda_w)?;
            Ok(DiversityLoss {
                loss: a.loss,
                interaction: a.suppression,
                penalty: a.penalty,
                grad_w: a.grad_w,
                grad_bank: None,
            })
        }
        DiversityKind::Adversarial => {
            let bank =
                bank.ok_or_else(|| Error::invalid("adversarial loss needs a regressor bank"))?;
            let a = adversarial_loss(w, partition, bank, hidden, opts)?;
            Ok(DiversityLoss {
                loss: a.loss,
                interaction: a.similarity,
                penalty: a.penalty,
                grad_w: a.grad_w,
                grad_bank: Some(a.grad_bank),
            })
        }
    }
}

/// Squared norms of the `d` weight vectors (columns) of `W`.
pub fn column_sq_norms(w: &Matrix) -> Vec<f64> {
    (0..w.cols()).map(|c| {
        let col = w.column(c);
        dot(&col, &col)
    }).collect()
}
