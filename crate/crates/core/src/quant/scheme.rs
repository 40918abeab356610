use serde::{Deserialize, Serialize};

pub const QMIN: i32 = -128;
pub const QMAX: i32 = 127;
/// Smallest scale a scheme may carry; keeps all-zero tensors quantizable.
pub const SCALE_FLOOR: f64 = 1e-8;
pub const EMA_DECAY: f64 = 0.99;

/// Per-tensor affine INT8 parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantScheme {
    pub scale: f64,
    pub zero_point: i32,
    pub min: f64,
    pub max: f64,
}

impl QuantScheme {
    /// Symmetric weight scheme: `zero_point = 0`, `scale = max|x| / 127`.
    pub fn symmetric(values: impl IntoIterator<Item = f64>) -> Self {
        let max_abs = values.into_iter().fold(0.0f64, |m, v| m.max(v.abs()));
        Self {
            scale: (max_abs / QMAX as f64).max(SCALE_FLOOR),
            zero_point: 0,
            min: -max_abs,
            max: max_abs,
        }
    }

    /// Asymmetric min-max scheme over `[min, max]`, widened to include zero.
    pub fn asymmetric(min: f64, max: f64) -> Self {
        let (lo, hi) = (min.min(0.0), max.max(0.0));
        let scale = ((hi - lo) / (QMAX - QMIN) as f64).max(SCALE_FLOOR);
        let zero_point = (QMIN as f64 - lo / scale)
            .round_ties_even()
            .clamp(QMIN as f64, QMAX as f64) as i32;
        Self {
            scale,
            zero_point,
            min,
            max,
        }
    }

    pub fn quantize(&self, x: f64) -> i8 {
        let q = (x / self.scale).round_ties_even() + self.zero_point as f64;
        q.clamp(QMIN as f64, QMAX as f64) as i8
    }

    pub fn dequantize(&self, q: i8) -> f64 {
        (q as i32 - self.zero_point) as f64 * self.scale
    }

    pub fn fake_quant(&self, x: f64) -> f64 {
        self.dequantize(self.quantize(x))
    }

    /// True when `x` quantizes without hitting the clamp.
    pub fn in_range(&self, x: f64) -> bool {
        let q = (x / self.scale).round_ties_even() + self.zero_point as f64;
        (QMIN as f64..=QMAX as f64).contains(&q)
    }

    pub fn quantize_slice(&self, xs: &[f64]) -> Vec<i8> {
        xs.iter().map(|&x| self.quantize(x)).collect()
    }

    pub fn dequantize_slice(&self, qs: &[i8]) -> Vec<f64> {
        qs.iter().map(|&q| self.dequantize(q)).collect()
    }
}

/// Tracks an activation range with an exponential moving average of per-batch
/// min and max. The first observation initializes the range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmaObserver {
    pub decay: f64,
    pub min: f64,
    pub max: f64,
    pub count: u64,
}

impl Default for EmaObserver {
    fn default() -> Self {
        Self::new(EMA_DECAY)
    }
}

impl EmaObserver {
    pub fn new(decay: f64) -> Self {
        Self {
            decay,
            min: 0.0,
            max: 0.0,
            count: 0,
        }
    }

    /// Folds one batch into the running range. Non-finite values are ignored;
    /// a batch with no finite value is skipped.
    pub fn observe(&mut self, values: &[f64]) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in values.iter().filter(|v| v.is_finite()) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            return;
        }
        if self.count == 0 {
            self.min = lo;
            self.max = hi;
        } else {
            self.min = self.decay * self.min + (1.0 - self.decay) * lo;
            self.max = self.decay * self.max + (1.0 - self.decay) * hi;
        }
        self.count += 1;
    }

    pub fn scheme(&self) -> Option<QuantScheme> {
        (self.count > 0).then(|| QuantScheme::asymmetric(self.min, self.max))
    }
}
