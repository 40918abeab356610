//! Per-forward state: train/eval mode, dropout masks and activation
//! quantization sites.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::quant::QuantScheme;
use crate::tensor::{Real, Tape, Tensor, Var};

/// Activation sites where the INT8 path observes and fake-quantizes values.
pub const ACTIVATION_SITES: [&str; 4] = ["fem.out", "gqm.query", "trm.memory", "trm.decoded"];

#[derive(Debug, Clone, Copy)]
pub enum ActivationMode<'a> {
    /// Values pass through untouched.
    Float,
    /// Ranges are recorded, values untouched (calibration).
    Observe,
    /// Values are fake-quantized with the given schemes; ranges are recorded
    /// when `observe` is set.
    FakeQuant {
        schemes: &'a BTreeMap<String, QuantScheme>,
        observe: bool,
    },
}

#[derive(Debug, Clone)]
pub struct ForwardCtx<'a> {
    train: bool,
    dropout: f64,
    rng: ChaCha8Rng,
    act: ActivationMode<'a>,
    observed: BTreeMap<String, (f64, f64)>,
}

impl<'a> ForwardCtx<'a> {
    /// Deterministic inference: dropout off, float activations.
    pub fn eval() -> Self {
        Self {
            train: false,
            dropout: 0.0,
            rng: ChaCha8Rng::seed_from_u64(0),
            act: ActivationMode::Float,
            observed: BTreeMap::new(),
        }
    }

    /// Training mode; dropout masks are drawn from a stream seeded by `seed`.
    pub fn train(dropout: f64, seed: u64) -> Self {
        Self {
            train: true,
            dropout,
            rng: ChaCha8Rng::seed_from_u64(seed),
            act: ActivationMode::Float,
            observed: BTreeMap::new(),
        }
    }

    pub fn with_activations(mut self, act: ActivationMode<'a>) -> Self {
        self.act = act;
        self
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    /// Per-site `(min, max)` recorded during this forward.
    pub fn observed(&self) -> &BTreeMap<String, (f64, f64)> {
        &self.observed
    }

    pub fn into_observed(self) -> BTreeMap<String, (f64, f64)> {
        self.observed
    }

    /// Inverted dropout; identity in eval mode or at rate 0.
    pub fn dropout<T: Real>(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        if !self.train || self.dropout <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.dropout;
        let scale = T::lit(1.0 / keep);
        let rng = &mut self.rng;
        let mask = Tensor::from_fn(tape.shape(x), |_| {
            if rng.gen::<f64>() < keep {
                scale
            } else {
                T::zero()
            }
        });
        let m = tape.constant(mask);
        tape.mul(x, m)
    }

    /// Passes `x` through the named activation site.
    pub fn site<T: Real>(&mut self, tape: &mut Tape<T>, name: &str, x: Var) -> Result<Var> {
        let observe = matches!(
            self.act,
            ActivationMode::Observe | ActivationMode::FakeQuant { observe: true, .. }
        );
        if observe {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for v in tape.value(x).data() {
                let v = v.as_f64();
                lo = lo.min(v);
                hi = hi.max(v);
            }
            let entry = self.observed.entry(name.to_string()).or_insert((lo, hi));
            entry.0 = entry.0.min(lo);
            entry.1 = entry.1.max(hi);
        }
        match self.act {
            ActivationMode::FakeQuant { schemes, .. } => {
                let scheme = schemes.get(name).ok_or_else(|| {
                    Error::config(format!("activation site {name} has no calibrated scheme"))
                })?;
                Ok(tape.fake_quant(x, *scheme))
            }
            _ => Ok(x),
        }
    }
}
