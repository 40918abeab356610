//! Feature extraction: a small convolutional stem, the squeeze-and-excitation
//! gate, global average pooling and box-restricted average pooling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamBuilder, ParamGroup, ParamId};
use crate::tensor::{Real, Tape, Var, Window};

const STEM_HIDDEN: usize = 16;

/// Feature map `f` recorded on a tape as `C×H×W`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureMap {
    pub var: Var,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl FeatureMap {
    pub fn from_var<T: Real>(tape: &Tape<T>, var: Var) -> Result<Self> {
        match *tape.shape(var) {
            [channels, height, width] if height >= 1 && width >= 1 => Ok(Self {
                var,
                channels,
                height,
                width,
            }),
            ref s => Err(Error::shape(format!(
                "feature map must be C×H×W, got {s:?}"
            ))),
        }
    }
}

/// Person box in normalized corner form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PersonBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl PersonBox {
    /// Clamps each coordinate to `[0, 1]` and requires strictly ordered corners.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::data("box coordinates must be finite"));
        }
        let c = |v: f64| v.clamp(0.0, 1.0);
        let b = Self {
            x1: c(x1),
            y1: c(y1),
            x2: c(x2),
            y2: c(y2),
        };
        if !(b.x1 < b.x2 && b.y1 < b.y2) {
            return Err(Error::data(format!(
                "box [{x1}, {y1}, {x2}, {y2}] does not have x1 < x2 and y1 < y2 after clamping"
            )));
        }
        Ok(b)
    }

    pub fn full() -> Self {
        Self {
            x1: 0.0,
            y1: 0.0,
            x2: 1.0,
            y2: 1.0,
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Cell range `[y0, y1) × [x0, x1)` on an `height×width` grid: floor for
    /// the start, ceil for the end, at least one cell per axis.
    pub fn to_cells(&self, height: usize, width: usize) -> Window {
        let span = |lo: f64, hi: f64, n: usize| {
            let start = ((lo * n as f64).floor() as usize).min(n - 1);
            let end = ((hi * n as f64).ceil() as usize).min(n).max(start + 1);
            (start, end)
        };
        let (y0, y1) = span(self.y1, self.y2, height);
        let (x0, x1) = span(self.x1, self.x2, width);
        Window { y0, y1, x0, x1 }
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }
}

/// Two 3×3 convolutions, each followed by ReLU and average pooling; the
/// pooling factors are 2 and `stride / 2`.
#[derive(Debug, Clone)]
pub struct Stem {
    conv1: ParamId,
    conv2: ParamId,
    bias2: ParamId,
    stride: usize,
    channels: usize,
}

impl Stem {
    pub fn new<T: Real>(
        b: &mut ParamBuilder<'_, T>,
        channels: usize,
        stride: usize,
    ) -> Result<Self> {
        if stride < 2 || !stride.is_multiple_of(2) {
            return Err(Error::config(format!(
                "stem stride {stride} must be an even number ≥ 2"
            )));
        }
        let g = ParamGroup::Backbone;
        Ok(Self {
            conv1: b.uniform("stem.conv1.weight", &[STEM_HIDDEN, 3, 3, 3], 27, g),
            conv2: b.uniform(
                "stem.conv2.weight",
                &[channels, STEM_HIDDEN, 3, 3],
                STEM_HIDDEN * 9,
                g,
            ),
            bias2: b.zeros("stem.conv2.bias", &[channels], g),
            stride,
            channels,
        })
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        image: Var,
    ) -> Result<FeatureMap> {
        let (h, w) = match *tape.shape(image) {
            [3, h, w] => (h, w),
            ref s => return Err(Error::shape(format!("image must be 3×H×W, got {s:?}"))),
        };
        if h % self.stride != 0 || w % self.stride != 0 {
            return Err(Error::config(format!(
                "image extents {h}×{w} are not divisible by stem stride {}",
                self.stride
            )));
        }
        let x = tape.conv2d(image, p.var(self.conv1), None)?;
        let x = tape.relu(x);
        let x = tape.avg_pool2d(x, 2)?;
        let x = tape.conv2d(x, p.var(self.conv2), Some(p.var(self.bias2)))?;
        let x = tape.relu(x);
        let x = tape.avg_pool2d(x, self.stride / 2)?;
        FeatureMap::from_var(tape, x)
    }
}

/// Channel gate `f ← f ⊙ sigmoid(W₂·relu(W₁·gap(f) + b₁) + b₂)`.
#[derive(Debug, Clone)]
pub struct SeGate {
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
    channels: usize,
}

impl SeGate {
    pub fn new<T: Real>(
        b: &mut ParamBuilder<'_, T>,
        channels: usize,
        reduction: usize,
    ) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::config(format!(
                "SE reduction {reduction} does not divide {channels} channels"
            )));
        }
        let hidden = channels / reduction;
        let g = ParamGroup::Rest;
        Ok(Self {
            fc1_w: b.uniform("se.fc1.weight", &[hidden, channels], channels, g),
            fc1_b: b.zeros("se.fc1.bias", &[hidden], g),
            fc2_w: b.uniform("se.fc2.weight", &[channels, hidden], hidden, g),
            fc2_b: b.zeros("se.fc2.bias", &[channels], g),
            channels,
        })
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b]
    }

    /// Per-channel gate values in `(0, 1)`, shape `[C]`.
    pub fn gate<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, f: &FeatureMap) -> Result<Var> {
        if f.channels != self.channels {
            return Err(Error::shape(format!(
                "SE gate expects {} channels, feature map has {}",
                self.channels, f.channels
            )));
        }
        let squeezed = gap(tape, f)?;
        let squeezed = tape.reshape(squeezed, &[1, self.channels])?;
        let z = tape.linear(squeezed, p.var(self.fc1_w), Some(p.var(self.fc1_b)))?;
        let z = tape.relu(z);
        let z = tape.linear(z, p.var(self.fc2_w), Some(p.var(self.fc2_b)))?;
        let s = tape.sigmoid(z);
        tape.reshape(s, &[self.channels])
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        f: &FeatureMap,
    ) -> Result<FeatureMap> {
        let s = self.gate(tape, p, f)?;
        let out = tape.scale_channels(f.var, s)?;
        Ok(FeatureMap { var: out, ..*f })
    }
}

/// Global average pooling, `[C]`.
pub fn gap<T: Real>(tape: &mut Tape<T>, f: &FeatureMap) -> Result<Var> {
    tape.mean_axes(f.var, &[1, 2])
}

/// Bins of an adaptive `k×k` average pool over `region`.
pub fn adaptive_bins(region: Window, k: usize) -> Vec<Window> {
    let split = |lo: usize, hi: usize, i: usize| {
        let len = hi - lo;
        let start = lo + (i * len) / k;
        let end = lo + ((i + 1) * len).div_ceil(k);
        (start, end)
    };
    let mut bins = Vec::with_capacity(k * k);
    for by in 0..k {
        let (y0, y1) = split(region.y0, region.y1, by);
        for bx in 0..k {
            let (x0, x1) = split(region.x0, region.x1, bx);
            bins.push(Window { y0, y1, x0, x1 });
        }
    }
    bins
}

/// Box-restricted adaptive average pooling to `k×k`, flattened channel-major
/// to `[C·k·k]`.
pub fn roi_pool<T: Real>(
    tape: &mut Tape<T>,
    f: &FeatureMap,
    person: &PersonBox,
    k: usize,
) -> Result<Var> {
    if k == 0 {
        return Err(Error::config("RoI grid must be at least 1×1"));
    }
    let region = person.to_cells(f.height, f.width);
    tape.roi_pool(f.var, &adaptive_bins(region, k))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;

    fn feature(
        tape: &mut Tape<f64>,
        c: usize,
        h: usize,
        w: usize,
        f: impl FnMut(usize) -> f64,
    ) -> FeatureMap {
        let v = tape.constant(Tensor::from_fn(&[c, h, w], f));
        FeatureMap::from_var(tape, v).unwrap()
    }

    #[test]
    fn stem_shape_arithmetic() {
        let mut store = ParamStore::<f64>::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let stem = Stem::new(
            &mut ParamBuilder {
                store: &mut store,
                rng: &mut rng,
            },
            32,
            8,
        )
        .unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false, false);
        let img = tape.constant(Tensor::full(&[3, 32, 32], 0.5));
        let f = stem.forward(&mut tape, &p, img).unwrap();
        assert_eq!((f.channels, f.height, f.width), (32, 4, 4));
    }

    #[test]
    fn stem_rejects_indivisible_extents() {
        let mut store = ParamStore::<f64>::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let stem = Stem::new(
            &mut ParamBuilder {
                store: &mut store,
                rng: &mut rng,
            },
            8,
            8,
        )
        .unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false, false);
        let img = tape.constant(Tensor::zeros(&[3, 30, 32]));
        assert!(matches!(
            stem.forward(&mut tape, &p, img),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_image_gives_zero_features() {
        let mut store = ParamStore::<f64>::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let stem = Stem::new(
            &mut ParamBuilder {
                store: &mut store,
                rng: &mut rng,
            },
            8,
            8,
        )
        .unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false, false);
        let img = tape.constant(Tensor::zeros(&[3, 16, 16]));
        let f = stem.forward(&mut tape, &p, img).unwrap();
        assert!(tape.value(f.var).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_gate_halves_the_map() {
        let mut store = ParamStore::<f64>::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let se = SeGate::new(
            &mut ParamBuilder {
                store: &mut store,
                rng: &mut rng,
            },
            8,
            4,
        )
        .unwrap();
        for v in store.values_mut() {
            v.data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false, false);
        let f = feature(&mut tape, 8, 3, 2, |i| i as f64 - 7.0);
        let out = se.forward(&mut tape, &p, &f).unwrap();
        assert_eq!(tape.shape(out.var), &[8, 3, 2]);
        for (a, b) in tape
            .value(out.var)
            .data()
            .iter()
            .zip(tape.value(f.var).data())
        {
            assert_eq!(*a, 0.5 * b);
        }
    }

    #[test]
    fn se_channel_mismatch_is_an_error() {
        let mut store = ParamStore::<f64>::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let se = SeGate::new(
            &mut ParamBuilder {
                store: &mut store,
                rng: &mut rng,
            },
            8,
            4,
        )
        .unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false, false);
        let f = feature(&mut tape, 4, 2, 2, |_| 1.0);
        assert!(matches!(
            se.forward(&mut tape, &p, &f),
            Err(Error::Shape(_))
        ));
        assert!(SeGate::new(
            &mut ParamBuilder {
                store: &mut store,
                rng: &mut rng
            },
            6,
            4
        )
        .is_err());
    }

    #[test]
    fn gap_hand_cases() {
        let mut tape = Tape::new();
        let f = feature(&mut tape, 3, 2, 2, |_| 3.0);
        let g = gap(&mut tape, &f).unwrap();
        assert_eq!(tape.value(g).data(), &[3.0, 3.0, 3.0]);

        let f = feature(&mut tape, 1, 2, 2, |i| (i + 1) as f64);
        let g = gap(&mut tape, &f).unwrap();
        assert_eq!(tape.value(g).data(), &[2.5]);
    }

    #[test]
    fn full_box_roi_equals_gap() {
        let mut tape = Tape::new();
        let f = feature(&mut tape, 4, 4, 4, |i| ((i * 37) % 11) as f64 * 0.25 - 1.0);
        let g = gap(&mut tape, &f).unwrap();
        let r = roi_pool(&mut tape, &f, &PersonBox::full(), 1).unwrap();
        assert_eq!(tape.value(g).data(), tape.value(r).data());
    }

    #[test]
    fn single_cell_box_returns_that_cell() {
        let mut tape = Tape::new();
        let f = feature(&mut tape, 2, 4, 4, |i| i as f64);
        // cell (row 1, col 2) spans [0.5, 0.75) × [0.25, 0.5)
        let b = PersonBox::new(0.5, 0.25, 0.75, 0.5).unwrap();
        let r = roi_pool(&mut tape, &f, &b, 1).unwrap();
        assert_eq!(tape.value(r).data(), &[6.0, 22.0]);
    }

    #[test]
    fn tiny_box_still_covers_one_cell() {
        let b = PersonBox::new(0.99, 0.99, 1.0, 1.0).unwrap();
        let w = b.to_cells(4, 4);
        assert_eq!((w.y0, w.y1, w.x0, w.x1), (3, 4, 3, 4));
        let b = PersonBox::new(0.5, 0.5, 0.5001, 0.5001).unwrap();
        let w = b.to_cells(4, 4);
        assert_eq!((w.y1 - w.y0, w.x1 - w.x0), (1, 1));
    }

    #[test]
    fn box_validation() {
        assert!(PersonBox::new(0.5, 0.1, 0.4, 0.2).is_err());
        let b = PersonBox::new(-0.2, 0.1, 1.4, 0.2).unwrap();
        assert_eq!((b.x1, b.x2), (0.0, 1.0));
        assert!(PersonBox::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
    }
}
