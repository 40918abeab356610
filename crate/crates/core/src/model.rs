//! Model configuration and end-to-end assembly:
//! stem → SE → GAP/RoI → graph module → transformer → symmetrize.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{self, PersonBox, SeGate, Stem};
use crate::forward::ForwardCtx;
use crate::gqm::{extract_queries, Gqm, QueryMode};
use crate::loss::{LossForm, MaskingMode};
use crate::metrics::ApConvention;
use crate::params::{Bound, ParamBuilder, ParamStore};
use crate::tensor::{Real, Tape, Tensor};
use crate::trm::{LogitCube, QueryBatch, Trm, TrmConfig};

/// Ablation switches. All on reproduces the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Toggles {
    /// Class-weighted loss; off means unit weights.
    pub wbce: bool,
    /// Bilateral training masks.
    pub bilateral: bool,
    /// `m + mᵀ` over the person axes.
    pub logit_transform: bool,
    /// Queries from edge states instead of concatenated vertex states.
    pub edge_query: bool,
    pub se_block: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self::all(true)
    }
}

impl Toggles {
    pub fn all(on: bool) -> Self {
        Self {
            wbce: on,
            bilateral: on,
            logit_transform: on,
            edge_query: on,
            se_block: on,
        }
    }

    /// Combination `bits`, one bit per switch in declaration order.
    pub fn from_bits(bits: u8) -> Self {
        Self {
            wbce: bits & 1 != 0,
            bilateral: bits & 2 != 0,
            logit_transform: bits & 4 != 0,
            edge_query: bits & 8 != 0,
            se_block: bits & 16 != 0,
        }
    }

    /// The five cumulative ablation rows.
    pub fn cumulative() -> [(&'static str, Toggles); 5] {
        let mut t = Toggles::all(false);
        t.wbce = true;
        let r1 = t;
        t.bilateral = true;
        let r2 = t;
        t.logit_transform = true;
        let r3 = t;
        t.edge_query = true;
        let r4 = t;
        t.se_block = true;
        [
            ("WBCE", r1),
            ("+Bilateral", r2),
            ("+Logit", r3),
            ("+GQM", r4),
            ("+SE", t),
        ]
    }

    pub fn masking(&self) -> MaskingMode {
        if self.bilateral {
            MaskingMode::Bilateral
        } else {
            MaskingMode::Unilateral
        }
    }

    pub fn query_mode(&self) -> QueryMode {
        if self.edge_query {
            QueryMode::Edge
        } else {
            QueryMode::Concat
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Dims {
    /// Feature-map channels `C_f`.
    pub feature_channels: usize,
    /// Graph hidden width `d`.
    pub gqm_width: usize,
    /// Transformer width `d_m`.
    pub model_dim: usize,
    /// RoI grid side `k`.
    pub roi_size: usize,
    /// Padded person count `P`; 0 derives it from the data.
    pub max_persons: usize,
    pub classes: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub gqm_iterations: usize,
    pub stride: usize,
    pub se_reduction: usize,
    pub image_height: usize,
    pub image_width: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self {
            feature_channels: 32,
            gqm_width: 64,
            model_dim: 64,
            roi_size: 3,
            max_persons: 0,
            classes: 6,
            heads: 8,
            ffn_dim: 128,
            gqm_iterations: 2,
            stride: 8,
            se_reduction: 4,
            image_height: 32,
            image_width: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_backbone: f64,
    pub lr_rest: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub dropout: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub loss_form: LossForm,
    pub ap_convention: ApConvention,
    /// Epochs between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_backbone: 1e-5,
            lr_rest: 1e-4,
            batch_size: 1,
            epochs: 300,
            seed: 0,
            dropout: 0.2,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            loss_form: LossForm::Standard,
            ap_convention: ApConvention::Hits,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantConfig {
    pub qat_epochs: usize,
    pub calibration_batches: usize,
    pub ema_decay: f64,
    /// Learning-rate multiplier during fake-quant fine-tuning.
    pub qat_lr_scale: f64,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            qat_epochs: 3,
            calibration_batches: 16,
            ema_decay: crate::quant::EMA_DECAY,
            qat_lr_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub toggles: Toggles,
    pub dims: Dims,
    pub train: TrainConfig,
    pub quant: QuantConfig,
}

impl ModelConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Tiny dimensions for gradient checks.
    pub fn tiny() -> Self {
        Self {
            dims: Dims {
                feature_channels: 4,
                gqm_width: 6,
                model_dim: 8,
                roi_size: 2,
                max_persons: 3,
                classes: 3,
                heads: 2,
                ffn_dim: 8,
                gqm_iterations: 2,
                stride: 4,
                se_reduction: 2,
                image_height: 8,
                image_width: 8,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dims;
        let t = &self.train;
        let positive = [
            ("feature_channels", d.feature_channels),
            ("gqm_width", d.gqm_width),
            ("model_dim", d.model_dim),
            ("roi_size", d.roi_size),
            ("heads", d.heads),
            ("ffn_dim", d.ffn_dim),
            ("batch_size", t.batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if d.classes < 2 {
            return Err(Error::config("at least two relation classes are required"));
        }
        if !d.model_dim.is_multiple_of(4) {
            return Err(Error::config("model_dim must be divisible by 4"));
        }
        if !d.model_dim.is_multiple_of(d.heads) {
            return Err(Error::config("model_dim must be divisible by heads"));
        }
        if d.stride < 2 || !d.stride.is_multiple_of(2) {
            return Err(Error::config("stride must be an even number ≥ 2"));
        }
        if !d.image_height.is_multiple_of(d.stride) || !d.image_width.is_multiple_of(d.stride) {
            return Err(Error::config(
                "image extents must be divisible by the stride",
            ));
        }
        if d.se_reduction == 0 || !d.feature_channels.is_multiple_of(d.se_reduction) {
            return Err(Error::config("se_reduction must divide feature_channels"));
        }
        if !(0.0..1.0).contains(&t.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        if !(t.lr_backbone >= 0.0
            && t.lr_rest >= 0.0
            && t.lr_backbone.is_finite()
            && t.lr_rest.is_finite())
        {
            return Err(Error::config(
                "learning rates must be finite and non-negative",
            ));
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || t.eps <= 0.0 {
            return Err(Error::config(
                "optimizer betas must lie in [0, 1) and eps be positive",
            ));
        }
        if !(0.0..1.0).contains(&self.quant.ema_decay) {
            return Err(Error::config("ema_decay must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Network structure. Parameter values live in a separate [`ParamStore`];
/// rebuilding from the same configuration yields the same parameter layout.
#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    stem: Stem,
    se: Option<SeGate>,
    gqm: Gqm,
    trm: Trm,
}

/// Inputs of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a, T> {
    pub image: &'a Tensor<T>,
    pub persons: &'a [PersonBox],
}

impl Model {
    /// Builds the structure and seeded initial parameters.
    pub fn new<T: Real>(cfg: &ModelConfig) -> Result<(Self, ParamStore<T>)> {
        cfg.validate()?;
        let d = &cfg.dims;
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let b = &mut ParamBuilder {
            store: &mut store,
            rng: &mut rng,
        };
        let stem = Stem::new(b, d.feature_channels, d.stride)?;
        let se = if cfg.toggles.se_block {
            Some(SeGate::new(b, d.feature_channels, d.se_reduction)?)
        } else {
            None
        };
        let person_dim = d.feature_channels * d.roi_size * d.roi_size;
        let gqm = Gqm::new(
            b,
            person_dim,
            d.feature_channels,
            d.gqm_width,
            d.gqm_iterations,
        );
        let query_dim = match cfg.toggles.query_mode() {
            QueryMode::Edge => d.gqm_width,
            QueryMode::Concat => 2 * d.gqm_width,
        };
        let trm = Trm::new(
            b,
            TrmConfig {
                feature_channels: d.feature_channels,
                query_dim,
                model_dim: d.model_dim,
                heads: d.heads,
                ffn_dim: d.ffn_dim,
                classes: d.classes,
            },
        )?;
        Ok((
            Self {
                cfg: cfg.clone(),
                stem,
                se,
                gqm,
                trm,
            },
            store,
        ))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn classes(&self) -> usize {
        self.cfg.dims.classes
    }

    /// Full forward for one image, padded to `max_persons`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        sample: Sample<'_, T>,
        max_persons: usize,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<LogitCube> {
        let n = sample.persons.len();
        if n < 2 {
            return Err(Error::TooFewPersons(n));
        }
        let d = &self.cfg.dims;
        if sample.image.shape() != [3, d.image_height, d.image_width] {
            return Err(Error::shape(format!(
                "image {:?} does not match configured 3×{}×{}",
                sample.image.shape(),
                d.image_height,
                d.image_width
            )));
        }
        let image = tape.constant(sample.image.clone());
        let mut f = self.stem.forward(tape, p, image)?;
        if let Some(se) = &self.se {
            f = se.forward(tape, p, &f)?;
        }
        f.var = ctx.site(tape, "fem.out", f.var)?;

        let global = fem::gap(tape, &f)?;
        let mut rows = Vec::with_capacity(n);
        for b in sample.persons {
            let r = fem::roi_pool(tape, &f, b, d.roi_size)?;
            let width = tape.shape(r)[0];
            rows.push(tape.reshape(r, &[1, width])?);
        }
        let persons = tape.concat(&rows, 0)?;

        let graph = self.gqm.init(tape, p, persons, global)?;
        let graph = self.gqm.run(tape, p, graph)?;
        let (grid, valid) = extract_queries(tape, &graph, self.cfg.toggles.query_mode())?;
        let grid = ctx.site(tape, "gqm.query", grid)?;
        let batch = QueryBatch::pad(tape, grid, &valid, n, max_persons)?;

        let memory = self.trm.encode(tape, p, &f, ctx)?;
        let memory = ctx.site(tape, "trm.memory", memory)?;
        let decoded = self.trm.decode(tape, p, &batch, memory, ctx)?;
        let decoded = ctx.site(tape, "trm.decoded", decoded)?;
        self.trm
            .classify(tape, p, decoded, &batch, self.cfg.toggles.logit_transform)
    }
}
