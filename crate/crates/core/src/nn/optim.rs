use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{NnError, Parameters, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const RHO: f64 = 0.9;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OptimizerKind {
    Sgd,
    RmsProp,
    Adam,
    Nadam,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 4] = [
        OptimizerKind::Sgd,
        OptimizerKind::RmsProp,
        OptimizerKind::Adam,
        OptimizerKind::Nadam,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "SGD",
            OptimizerKind::RmsProp => "RMSprop",
            OptimizerKind::Adam => "Adam",
            OptimizerKind::Nadam => "Nadam",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimizerKind {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "rmsprop" => Ok(OptimizerKind::RmsProp),
            "adam" => Ok(OptimizerKind::Adam),
            "nadam" => Ok(OptimizerKind::Nadam),
            "adadelta" | "adagrad" | "adamax" | "ftrl" => Err(NnError::NotImplemented(s.trim().to_string())),
            _ => Err(NnError::UnknownOptimizer(s.trim().to_string())),
        }
    }
}

/// Optimizer with per-parameter moment buffers, allocated on the first step.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0) || !learning_rate.is_finite() {
            return Err(NnError::NonPositiveLearningRate(learning_rate));
        }
        Ok(Optimizer {
            kind,
            learning_rate,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    fn ensure_buffers(&mut self, shapes: &[usize]) -> Result<()> {
        if self.first.is_empty() && self.step == 0 {
            let needs_first = matches!(self.kind, OptimizerKind::Adam | OptimizerKind::Nadam);
            let needs_second = self.kind != OptimizerKind::Sgd;
            self.first = shapes.iter().map(|&n| vec![0.0; if needs_first { n } else { 0 }]).collect();
            self.second = shapes.iter().map(|&n| vec![0.0; if needs_second { n } else { 0 }]).collect();
            return Ok(());
        }
        if self.first.len() != shapes.len() {
            return Err(NnError::ShapeMismatch(format!(
                "optimizer tracks {} tensors, got {}",
                self.first.len(),
                shapes.len()
            )));
        }
        Ok(())
    }

    /// Applies one update to every parameter slice.
    pub fn step_slices(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(NnError::ShapeMismatch(format!(
                "{} parameter tensors vs {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.len() != g.len() {
                return Err(NnError::ShapeMismatch(format!(
                    "parameter of length {} vs gradient of length {}",
                    p.len(),
                    g.len()
                )));
            }
        }
        let shapes: Vec<usize> = params.iter().map(|p| p.len()).collect();
        self.ensure_buffers(&shapes)?;
        for (k, &n) in shapes.iter().enumerate() {
            let tracked = self.first[k].len().max(self.second[k].len());
            if tracked != 0 && tracked != n {
                return Err(NnError::ShapeMismatch(format!("moment buffer {k} has length {tracked}, parameter {n}")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let lr = self.learning_rate;
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, &gi) in p.iter_mut().zip(g.iter()) {
                        *w -= lr * gi;
                    }
                }
                OptimizerKind::RmsProp => {
                    let v = &mut self.second[k];
                    for ((w, &gi), vi) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                        *vi = RHO * *vi + (1.0 - RHO) * gi * gi;
                        *w -= lr * gi / (vi.sqrt() + EPSILON);
                    }
                }
                OptimizerKind::Adam => {
                    let bc1 = 1.0 - BETA1.powi(t);
                    let bc2 = 1.0 - BETA2.powi(t);
                    let (m, v) = (&mut self.first[k], &mut self.second[k]);
                    for (((w, &gi), mi), vi) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
                        *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
                        let m_hat = *mi / bc1;
                        let v_hat = *vi / bc2;
                        *w -= lr * m_hat / (v_hat.sqrt() + EPSILON);
                    }
                }
                OptimizerKind::Nadam => {
                    // Nesterov lookahead: blend the next-step bias-corrected
                    // momentum with the current bias-corrected gradient.
                    let bc1 = 1.0 - BETA1.powi(t);
                    let bc1_next = 1.0 - BETA1.powi(t + 1);
                    let bc2 = 1.0 - BETA2.powi(t);
                    let (m, v) = (&mut self.first[k], &mut self.second[k]);
                    for (((w, &gi), mi), vi) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
                        *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
                        let m_bar = BETA1 * *mi / bc1_next + (1.0 - BETA1) * gi / bc1;
                        let v_hat = *vi / bc2;
                        *w -= lr * m_bar / (v_hat.sqrt() + EPSILON);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let g = grads.slices();
        let mut p = params.slices_mut();
        self.step_slices(&mut p, &g)
    }
}

pub fn global_norm<'a>(grads: impl IntoIterator<Item = &'a [f64]>) -> f64 {
    grads
        .into_iter()
        .flat_map(|s| s.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let norm = global_norm(grads.iter().map(|s| &**s));
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for s in grads.iter_mut() {
            for g in s.iter_mut() {
                *g *= k;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_step(kind: OptimizerKind, lr: f64, theta: f64, g: f64) -> f64 {
        let mut opt = Optimizer::new(kind, lr).unwrap();
        let mut p = [theta];
        opt.step_slices(&mut [&mut p[..]], &[&[g][..]]).unwrap();
        p[0]
    }

    #[test]
    fn sgd_step() {
        assert!((one_step(OptimizerKind::Sgd, 0.1, 1.0, 2.0) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_magnitude() {
        // t = 1: m̂ = g, v̂ = g², so the step is lr * 1 / (1 + eps)
        let expected = 1.0 - 0.001 / (1.0 + 1e-8);
        let got = one_step(OptimizerKind::Adam, 0.001, 1.0, 1.0);
        assert!((got - expected).abs() < 1e-15, "{got}");
    }

    #[test]
    fn rmsprop_and_nadam_first_steps() {
        // v = 0.1 g², step = lr g / (sqrt(0.1) |g| + eps)
        let expected = 1.0 - 0.01 * 2.0 / ((0.1f64 * 4.0).sqrt() + 1e-8);
        assert!((one_step(OptimizerKind::RmsProp, 0.01, 1.0, 2.0) - expected).abs() < 1e-14);
        // m = 0.1, m̄ = 0.9 * 0.1 / (1 - 0.81) + 0.1 / 0.1, v̂ = 1
        let m_bar = 0.9 * 0.1 / (1.0 - 0.81) + 1.0;
        let expected = 1.0 - 0.001 * m_bar / (1.0 + 1e-8);
        assert!((one_step(OptimizerKind::Nadam, 0.001, 1.0, 1.0) - expected).abs() < 1e-14);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        for kind in OptimizerKind::ALL {
            assert_eq!(one_step(kind, 0.01, 0.75, 0.0), 0.75, "{kind}");
        }
    }

    #[test]
    fn errors() {
        assert_eq!(
            Optimizer::new(OptimizerKind::Adam, 0.0),
            Err(NnError::NonPositiveLearningRate(0.0))
        );
        assert!(Optimizer::new(OptimizerKind::Adam, -1.0).is_err());
        assert_eq!("Ftrl".parse::<OptimizerKind>(), Err(NnError::NotImplemented("Ftrl".into())));
        assert!(matches!("lion".parse::<OptimizerKind>(), Err(NnError::UnknownOptimizer(_))));
        assert_eq!("RMSprop".parse::<OptimizerKind>(), Ok(OptimizerKind::RmsProp));

        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.1).unwrap();
        let mut a = [0.0; 2];
        assert!(opt.step_slices(&mut [&mut a[..]], &[&[1.0][..]]).is_err());
        opt.step_slices(&mut [&mut a[..]], &[&[1.0, 1.0][..]]).unwrap();
        let mut b = [0.0; 3];
        assert!(opt.step_slices(&mut [&mut b[..]], &[&[1.0, 1.0, 1.0][..]]).is_err());
    }

    #[test]
    fn clipping() {
        let mut a = [3.0, 0.0];
        let mut b = [4.0];
        let norm = clip_global_norm(&mut [&mut a[..], &mut b[..]], 1.0);
        assert_eq!(norm, 5.0);
        assert!((a[0] - 0.6).abs() < 1e-15 && (b[0] - 0.8).abs() < 1e-15);
    }
}
