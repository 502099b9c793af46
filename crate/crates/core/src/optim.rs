//! Parameter update rules.

use std::io::{Read, Write};

use crate::codec::{to_u32, LeReader, LeWriter};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimKind {
    SgdMomentum,
    Adam,
}

impl std::str::FromStr for OptimKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" | "sgd_momentum" => Ok(OptimKind::SgdMomentum),
            "adam" => Ok(OptimKind::Adam),
            other => Err(Error::invalid(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub kind: OptimKind,
    pub lr: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimConfig {
    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimKind::Adam,
            lr,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd_momentum(lr: f64, momentum: f64) -> Self {
        Self {
            kind: OptimKind::SgdMomentum,
            momentum,
            ..Self::adam(lr)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
        {
            return Err(Error::invalid("momentum and moment decay rates must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("adam epsilon must be positive"));
        }
        Ok(())
    }
}

/// Optimizer with one moment buffer set per parameter block.
///
/// Blocks are identified by position, so callers must pass them in the same
/// order and with the same shapes on every step.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub config: OptimConfig,
    pub t: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(config: OptimConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            t: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::invalid("one gradient block per parameter block required"));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(Error::invalid(format!(
                    "block {i}: {} parameters, {} gradient entries",
                    p.len(),
                    g.len()
                )));
            }
            if let Some(k) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::PoisonedState(format!(
                    "non-finite gradient in block {i} at entry {k}"
                )));
            }
        }
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            if self.config.kind == OptimKind::Adam {
                self.second = self.first.clone();
            }
        } else if self.first.len() != grads.len()
            || self.first.iter().zip(grads).any(|(m, g)| m.len() != g.len())
        {
            return Err(Error::invalid("parameter blocks changed shape between steps"));
        }
        self.t += 1;
        let c = self.config;
        match c.kind {
            OptimKind::SgdMomentum => {
                for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    for ((pk, gk), vk) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                        *vk = c.momentum * *vk + gk;
                        *pk -= c.lr * *vk;
                    }
                }
            }
            OptimKind::Adam => {
                let bc1 = 1.0 - c.beta1.powf(self.t as f64);
                let bc2 = 1.0 - c.beta2.powf(self.t as f64);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    for (((pk, gk), mk), vk) in
                        p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut())
                    {
                        *mk = c.beta1 * *mk + (1.0 - c.beta1) * gk;
                        *vk = c.beta2 * *vk + (1.0 - c.beta2) * gk * gk;
                        let m_hat = *mk / bc1;
                        let v_hat = *vk / bc2;
                        *pk -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
                    }
                }
            }
        }
        Ok(())
    }

    pub(crate) fn write_section<W: Write>(&self, out: &mut LeWriter<W>) -> Result<()> {
        out.u8(match self.config.kind {
            OptimKind::SgdMomentum => 0,
            OptimKind::Adam => 1,
        })?;
        for v in [
            self.config.lr,
            self.config.momentum,
            self.config.beta1,
            self.config.beta2,
            self.config.eps,
        ] {
            out.f64(v)?;
        }
        out.u64(self.t)?;
        for buffers in [&self.first, &self.second] {
            out.u32(to_u32(buffers.len(), "moment block count")?)?;
            for b in buffers {
                out.u64(b.len() as u64)?;
                out.f64_slice(b)?;
            }
        }
        Ok(())
    }

    pub(crate) fn read_section<R: Read>(input: &mut LeReader<R>) -> Result<Self> {
        let at = input.offset();
        let kind = match input.u8("optimizer kind")? {
            0 => OptimKind::SgdMomentum,
            1 => OptimKind::Adam,
            k => return Err(Error::format(at, format!("unknown optimizer kind {k}"))),
        };
        let config = OptimConfig {
            kind,
            lr: input.f64("learning rate")?,
            momentum: input.f64("momentum")?,
            beta1: input.f64("beta1")?,
            beta2: input.f64("beta2")?,
            eps: input.f64("epsilon")?,
        };
        let t = input.u64("step counter")?;
        let read_buffers = |input: &mut LeReader<R>| -> Result<Vec<Vec<f64>>> {
            let n = input.u32("moment block count")? as usize;
            (0..n)
                .map(|_| {
                    let len = input.u64("moment block length")? as usize;
                    input.f64_vec(len, "moment block")
                })
                .collect()
        };
        let first = read_buffers(input)?;
        let second = read_buffers(input)?;
        config
            .validate()
            .map_err(|e| Error::format(at, format!("bad optimizer settings: {e}")))?;
        Ok(Self {
            config,
            t,
            first,
            second,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(opt: &mut Optimizer, p: &mut f64, g: f64) -> Result<()> {
        let mut buf = [*p];
        opt.step(&mut [&mut buf], &[&[g]])?;
        *p = buf[0];
        Ok(())
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        for c in [OptimConfig::adam(0.1), OptimConfig::sgd_momentum(0.1, 0.9)] {
            let mut o = Optimizer::new(c).unwrap();
            let mut p = 1.5;
            run(&mut o, &mut p, 0.0).unwrap();
            assert_eq!(p, 1.5);
        }
    }

    #[test]
    fn adam_first_step() {
        let lr = 1e-3;
        let mut o = Optimizer::new(OptimConfig::adam(lr)).unwrap();
        let mut p = 0.0;
        run(&mut o, &mut p, 1.0).unwrap();
        assert!((p + lr / (1.0 + 1e-8)).abs() < 1e-18);
    }

    #[test]
    fn sgd_momentum_two_steps() {
        let mut o = Optimizer::new(OptimConfig::sgd_momentum(1.0, 0.9)).unwrap();
        let mut p = 0.0;
        run(&mut o, &mut p, 1.0).unwrap();
        run(&mut o, &mut p, 1.0).unwrap();
        assert!((p + 2.9).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_refused() {
        let mut o = Optimizer::new(OptimConfig::adam(0.1)).unwrap();
        let mut p = 1.0;
        let err = run(&mut o, &mut p, f64::NAN).unwrap_err();
        assert!(matches!(err, Error::PoisonedState(_)));
        assert!(run(&mut o, &mut p, f64::INFINITY).is_err());
        assert_eq!((p, o.t), (1.0, 0));
    }

    #[test]
    fn rejects_bad_config_and_shapes() {
        assert!(Optimizer::new(OptimConfig::adam(0.0)).is_err());
        assert!(Optimizer::new(OptimConfig::sgd_momentum(0.1, 1.0)).is_err());
        let mut o = Optimizer::new(OptimConfig::adam(0.1)).unwrap();
        let mut a = [0.0; 2];
        assert!(o.step(&mut [&mut a], &[&[1.0]]).is_err());
        o.step(&mut [&mut a], &[&[1.0, 1.0]]).unwrap();
        let mut b = [0.0; 3];
        assert!(o.step(&mut [&mut b], &[&[1.0, 1.0, 1.0]]).is_err());
    }

    #[test]
    fn both_converge_on_quadratic() {
        for c in [OptimConfig::adam(1e-2), OptimConfig::sgd_momentum(1e-2, 0.9)] {
            let mut o = Optimizer::new(c).unwrap();
            let mut p = 1.0;
            let mut reached = false;
            for _ in 0..10_000 {
                let g = p;
                run(&mut o, &mut p, g).unwrap();
                if p.abs() < 1e-3 {
                    reached = true;
                    break;
                }
            }
            assert!(reached, "{:?} stalled at {p}", c.kind);
        }
    }

    #[test]
    fn state_round_trip_continues_identically() {
        let mut a = Optimizer::new(OptimConfig::adam(0.05)).unwrap();
        let mut pa = 2.0;
        for _ in 0..5 {
            let g = pa * 3.0;
            run(&mut a, &mut pa, g).unwrap();
        }
        let mut w = LeWriter::new(Vec::new());
        a.write_section(&mut w).unwrap();
        let bytes = w.into_inner();
        let mut b = Optimizer::read_section(&mut LeReader::new(bytes.as_slice())).unwrap();
        assert_eq!(a, b);
        let mut pb = pa;
        for _ in 0..5 {
            let (ga, gb) = (pa * 3.0, pb * 3.0);
            run(&mut a, &mut pa, ga).unwrap();
            run(&mut b, &mut pb, gb).unwrap();
        }
        assert_eq!(pa.to_bits(), pb.to_bits());
    }
}
