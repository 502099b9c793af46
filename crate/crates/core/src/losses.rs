//! Metric losses on cosine similarity scores, with first derivatives.
//!
//! | kind              | loss                                        |
//! |-------------------|---------------------------------------------|
//! | binomial deviance | `log(1 + exp(-(2y-1)·β1·(s-β2)·C_y))`        |
//! | contrastive       | `(1-y)·max(0, s-m) + y·(s-1)²`               |
//! | triplet           | `max(0, s⁻ - s⁺ + m)`                        |
//!
//! Hinge kinks take the zero subgradient: a sample sitting exactly on its
//! margin counts as satisfied.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    BinomialDeviance,
    Contrastive,
    Triplet,
}

impl LossKind {
    pub fn is_pair(self) -> bool {
        !matches!(self, LossKind::Triplet)
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::BinomialDeviance => "binomial_deviance",
            LossKind::Contrastive => "contrastive",
            LossKind::Triplet => "triplet",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binomial_deviance" | "binomial" => Ok(LossKind::BinomialDeviance),
            "contrastive" => Ok(LossKind::Contrastive),
            "triplet" => Ok(LossKind::Triplet),
            other => Err(Error::invalid(format!("unknown loss kind `{other}`"))),
        }
    }
}

/// A loss together with its constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub kind: LossKind,
    /// Binomial deviance scale.
    pub beta1: f64,
    /// Binomial deviance translation.
    pub beta2: f64,
    pub margin_contrastive: f64,
    pub margin_triplet: f64,
    /// Binomial deviance cost for positive pairs.
    pub cost_pos: f64,
    /// Binomial deviance cost for negative pairs.
    pub cost_neg: f64,
}

impl LossSpec {
    pub const DEFAULT_BETA1: f64 = 2.0;
    pub const DEFAULT_BETA2: f64 = 0.5;
    pub const DEFAULT_MARGIN_CONTRASTIVE: f64 = 0.5;
    pub const DEFAULT_MARGIN_TRIPLET: f64 = 0.01;
    pub const DEFAULT_COST_POS: f64 = 1.0;
    pub const DEFAULT_COST_NEG: f64 = 25.0;

    pub fn new(kind: LossKind) -> Self {
        Self {
            kind,
            beta1: Self::DEFAULT_BETA1,
            beta2: Self::DEFAULT_BETA2,
            margin_contrastive: Self::DEFAULT_MARGIN_CONTRASTIVE,
            margin_triplet: Self::DEFAULT_MARGIN_TRIPLET,
            cost_pos: Self::DEFAULT_COST_POS,
            cost_neg: Self::DEFAULT_COST_NEG,
        }
    }

    pub fn binomial_deviance() -> Self {
        Self::new(LossKind::BinomialDeviance)
    }

    pub fn contrastive() -> Self {
        Self::new(LossKind::Contrastive)
    }

    pub fn triplet() -> Self {
        Self::new(LossKind::Triplet)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.beta1,
            self.beta2,
            self.margin_contrastive,
            self.margin_triplet,
            self.cost_pos,
            self.cost_neg,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("loss constants must be finite"));
        }
        if self.beta1 <= 0.0 {
            return Err(Error::invalid("beta1 must be positive"));
        }
        if self.margin_contrastive < 0.0 || self.margin_triplet < 0.0 {
            return Err(Error::invalid("margins must be non-negative"));
        }
        if self.cost_pos <= 0.0 || self.cost_neg <= 0.0 {
            return Err(Error::invalid("costs must be positive"));
        }
        Ok(())
    }
}

impl Default for LossSpec {
    fn default() -> Self {
        Self::binomial_deviance()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PairLabel {
    Negative = 0,
    Positive = 1,
}

impl PairLabel {
    pub fn from_same_class(same: bool) -> Self {
        if same {
            PairLabel::Positive
        } else {
            PairLabel::Negative
        }
    }

    #[inline]
    pub fn as_f64(self) -> f64 {
        match self {
            PairLabel::Negative => 0.0,
            PairLabel::Positive => 1.0,
        }
    }
}

/// `log(1 + e^z)` without overflow for large `z`.
#[inline]
pub fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Pair loss and `∂loss/∂s`.
pub fn pair_loss(spec: &LossSpec, s: f64, y: PairLabel) -> Result<(f64, f64)> {
    match spec.kind {
        LossKind::BinomialDeviance => {
            let sign = 2.0 * y.as_f64() - 1.0;
            let cost = match y {
                PairLabel::Positive => spec.cost_pos,
                PairLabel::Negative => spec.cost_neg,
            };
            let dz_ds = -sign * spec.beta1 * cost;
            let z = dz_ds * (s - spec.beta2);
            Ok((softplus(z), sigmoid(z) * dz_ds))
        }
        LossKind::Contrastive => Ok(match y {
            PairLabel::Positive => ((s - 1.0) * (s - 1.0), 2.0 * (s - 1.0)),
            PairLabel::Negative => {
                if s > spec.margin_contrastive {
                    (s - spec.margin_contrastive, 1.0)
                } else {
                    (0.0, 0.0)
                }
            }
        }),
        LossKind::Triplet => Err(Error::invalid(
            "pair_loss called with a triplet loss spec",
        )),
    }
}

/// Triplet hinge: returns `(loss, ∂/∂s⁺, ∂/∂s⁻)`.
pub fn triplet_loss(spec: &LossSpec, s_pos: f64, s_neg: f64) -> Result<(f64, f64, f64)> {
    if spec.kind != LossKind::Triplet {
        return Err(Error::invalid(format!(
            "triplet_loss called with a {} spec",
            spec.kind
        )));
    }
    let v = s_neg - s_pos + spec.margin_triplet;
    if v > 0.0 {
        Ok((v, -1.0, 1.0))
    } else {
        Ok((0.0, 0.0, 0.0))
    }
}

/// How a loss derivative becomes a sample weight for the next learner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightConvention {
    /// `|ℓ'|`: a non-negative difficulty weight.
    #[default]
    Magnitude,
    /// `-ℓ'` taken literally; negative pairs get negative weights.
    Signed,
}

/// Ensemble prediction a sample weight is computed from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BoostState {
    Pair { s: f64, y: PairLabel },
    Triplet { s_pos: f64, s_neg: f64 },
}

/// Sample weight for the next learner given the accumulated prediction.
///
/// For triplets this is `-∂ℓ/∂s⁺`, which is 0 or 1 under either convention.
pub fn boosting_weight(
    spec: &LossSpec,
    state: BoostState,
    convention: WeightConvention,
) -> Result<f64> {
    match state {
        BoostState::Pair { s, y } => {
            let (_, d) = pair_loss(spec, s, y)?;
            Ok(match convention {
                WeightConvention::Magnitude => d.abs(),
                WeightConvention::Signed => -d,
            })
        }
        BoostState::Triplet { s_pos, s_neg } => {
            let (_, d_pos, _) = triplet_loss(spec, s_pos, s_neg)?;
            Ok(-d_pos)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn default_constants() {
        let s = LossSpec::default();
        assert_eq!(s.kind, LossKind::BinomialDeviance);
        assert_eq!(s.beta1, 2.0);
        assert_eq!(s.beta2, 0.5);
        assert_eq!(s.margin_contrastive, 0.5);
        assert_eq!(s.margin_triplet, 0.01);
        assert_eq!(s.cost_pos, 1.0);
        assert_eq!(s.cost_neg, 25.0);
        s.validate().unwrap();
    }

    #[test]
    fn validate_rejects_bad_constants() {
        let mut s = LossSpec::default();
        s.beta1 = 0.0;
        assert!(s.validate().is_err());
        let mut s = LossSpec::default();
        s.margin_triplet = -0.1;
        assert!(s.validate().is_err());
        let mut s = LossSpec::default();
        s.cost_neg = 0.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn binomial_at_translation_point() {
        let (l, d) = pair_loss(&LossSpec::default(), 0.5, PairLabel::Positive).unwrap();
        assert!((l - LN2).abs() < 1e-15);
        assert!((d + 1.0).abs() < 1e-15);
    }

    #[test]
    fn contrastive_examples() {
        let spec = LossSpec::contrastive();
        assert_eq!(pair_loss(&spec, 0.3, PairLabel::Negative).unwrap(), (0.0, 0.0));
        assert_eq!(pair_loss(&spec, 1.0, PairLabel::Positive).unwrap(), (0.0, 0.0));
        // kink: inactive
        assert_eq!(pair_loss(&spec, 0.5, PairLabel::Negative).unwrap(), (0.0, 0.0));
        let (l, d) = pair_loss(&spec, 0.8, PairLabel::Negative).unwrap();
        assert!((l - 0.3).abs() < 1e-15 && d == 1.0);
    }

    #[test]
    fn pair_loss_rejects_triplet_spec() {
        assert!(matches!(
            pair_loss(&LossSpec::triplet(), 0.1, PairLabel::Positive),
            Err(Error::InvalidArgument(_))
        ));
        assert!(triplet_loss(&LossSpec::default(), 0.1, 0.2).is_err());
    }

    #[test]
    fn triplet_examples() {
        let spec = LossSpec::triplet();
        assert_eq!(triplet_loss(&spec, 0.9, 0.1).unwrap(), (0.0, 0.0, 0.0));
        let (l, dp, dn) = triplet_loss(&spec, 0.1, 0.9).unwrap();
        assert!((l - 0.81).abs() < 1e-15);
        assert_eq!((dp, dn), (-1.0, 1.0));
        let mut zero_margin = spec;
        zero_margin.margin_triplet = 0.0;
        assert_eq!(triplet_loss(&zero_margin, 0.5, 0.5).unwrap(), (0.0, 0.0, 0.0));
    }

    #[test]
    fn boosting_weight_examples() {
        let spec = LossSpec::default();
        let w = |s, y| {
            boosting_weight(&spec, BoostState::Pair { s, y }, WeightConvention::Magnitude).unwrap()
        };
        assert!((w(0.5, PairLabel::Positive) - 1.0).abs() < 1e-15);
        assert!((w(0.5, PairLabel::Negative) - 25.0).abs() < 1e-12);

        let signed = boosting_weight(
            &spec,
            BoostState::Pair {
                s: 0.5,
                y: PairLabel::Negative,
            },
            WeightConvention::Signed,
        )
        .unwrap();
        assert!((signed + 25.0).abs() < 1e-12);

        let t = LossSpec::triplet();
        let violated = BoostState::Triplet {
            s_pos: 0.1,
            s_neg: 0.9,
        };
        assert_eq!(
            boosting_weight(&t, violated, WeightConvention::Magnitude).unwrap(),
            1.0
        );
        let satisfied = BoostState::Triplet {
            s_pos: 0.9,
            s_neg: 0.1,
        };
        assert_eq!(
            boosting_weight(&t, satisfied, WeightConvention::Signed).unwrap(),
            0.0
        );
    }

    #[test]
    fn softplus_is_stable_for_large_arguments() {
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
        assert!((softplus(0.0) - LN2).abs() < 1e-15);
        // continuity across the branch switch
        assert!((softplus(30.0) - softplus(30.0 + 1e-12)).abs() < 1e-10);
    }

    fn central_diff(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn pair_derivatives_match_finite_differences() {
        let mut rng = Rng::new(0);
        let specs = [LossSpec::binomial_deviance(), LossSpec::contrastive()];
        let mut checked = 0;
        while checked < 100 {
            let spec = specs[checked % 2];
            let s = rng.uniform_range(-1.0, 1.0);
            let y = PairLabel::from_same_class(rng.uniform() < 0.5);
            if spec.kind == LossKind::Contrastive
                && y == PairLabel::Negative
                && (s - spec.margin_contrastive).abs() < 1e-3
            {
                continue;
            }
            let (_, d) = pair_loss(&spec, s, y).unwrap();
            let fd = central_diff(|t| pair_loss(&spec, t, y).unwrap().0, s, 1e-6);
            let rel = (d - fd).abs() / d.abs().max(fd.abs()).max(1e-12);
            assert!(d == fd || rel < 1e-6, "{spec:?} s={s} y={y:?}: {d} vs {fd}");
            checked += 1;
        }
    }

    #[test]
    fn binomial_monotone_in_score() {
        let spec = LossSpec::default();
        let grid: Vec<f64> = (0..1000).map(|i| -1.0 + 2.0 * i as f64 / 999.0).collect();
        for w in grid.windows(2) {
            let pos = |s| pair_loss(&spec, s, PairLabel::Positive).unwrap().0;
            let neg = |s| pair_loss(&spec, s, PairLabel::Negative).unwrap().0;
            assert!(pos(w[1]) < pos(w[0]));
            assert!(neg(w[1]) > neg(w[0]));
        }
    }

    #[test]
    fn weights_nonnegative_under_magnitude() {
        let mut rng = Rng::new(9);
        for kind in [LossKind::BinomialDeviance, LossKind::Contrastive, LossKind::Triplet] {
            let spec = LossSpec::new(kind);
            for _ in 0..500 {
                let a = rng.uniform_range(-1.0, 1.0);
                let b = rng.uniform_range(-1.0, 1.0);
                let state = if kind == LossKind::Triplet {
                    BoostState::Triplet { s_pos: a, s_neg: b }
                } else {
                    BoostState::Pair {
                        s: a,
                        y: PairLabel::from_same_class(b > 0.0),
                    }
                };
                let w = boosting_weight(&spec, state, WeightConvention::Magnitude).unwrap();
                assert!(w >= 0.0);
                if kind == LossKind::Triplet {
                    assert!(w == 0.0 || w == 1.0);
                }
            }
        }
    }
}
