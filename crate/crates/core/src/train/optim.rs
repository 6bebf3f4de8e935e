use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::Config(format!("unknown optimizer {other:?} (expected adam or sgd)"))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.999;
pub const ADAM_EPSILON: f32 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// Per-parameter optimizer state, keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f32,
    steps: i32,
    state: HashMap<String, Moments>,
}

impl Optimizer {
    /// State for every trainable parameter currently in `params`.
    pub fn new(kind: OptimizerKind, learning_rate: f32, params: &ParamStore) -> Self {
        let state = match kind {
            OptimizerKind::Sgd => HashMap::new(),
            OptimizerKind::Adam => params
                .iter()
                .filter(|(_, t)| t.requires_grad)
                .map(|(name, t)| {
                    let zeros = vec![0.0; t.len()];
                    (name.to_string(), Moments { m: zeros.clone(), v: zeros })
                })
                .collect(),
        };
        Optimizer {
            kind,
            lr: learning_rate,
            steps: 0,
            state,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    /// One update of every trainable parameter that has a gradient. Frozen
    /// parameters are never touched.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        self.steps = self.steps.saturating_add(1);
        let t = self.steps;
        let correct1 = 1.0 - (ADAM_BETA1 as f64).powi(t);
        let correct2 = 1.0 - (ADAM_BETA2 as f64).powi(t);
        for (name, p) in params.iter_mut() {
            if !p.requires_grad {
                continue;
            }
            let Some(grad) = p.grad.take() else { continue };
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in p.data_mut().iter_mut().zip(&grad) {
                        *w -= self.lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    let st = self
                        .state
                        .get_mut(name)
                        .ok_or_else(|| Error::Config(format!("no optimizer state for parameter {name:?}")))?;
                    if st.m.len() != grad.len() {
                        return Err(Error::Config(format!("optimizer state for {name:?} has the wrong size")));
                    }
                    let (c1, c2) = (correct1 as f32, correct2 as f32);
                    for (((w, g), m), v) in p.data_mut().iter_mut().zip(&grad).zip(&mut st.m).zip(&mut st.v) {
                        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *w -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
                    }
                }
            }
            p.grad = Some(grad);
        }
        Ok(())
    }
}
