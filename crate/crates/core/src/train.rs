//! Optimization, evaluation and resumable training state.
//!
//! Each image is an independent tape. Per-image gradients are computed in
//! parallel and summed in image order, so results do not depend on
//! scheduling. The batch loss is the summed pair loss divided by the number of
//! masked slots in the batch.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{compute_stats, max_persons, AnnotatedImage};
use crate::error::{Error, Result};
use crate::forward::{ActivationMode, ForwardCtx, ACTIVATION_SITES};
use crate::loss::{build_mask, weighted_bce_sum, ClassWeights, MaskingMode};
use crate::metrics::{summarize, EvalRecord, MetricsReport};
use crate::model::{Model, ModelConfig, OptimizerKind, Sample};
use crate::par::{derive_seed, Execution};
use crate::params::{ParamGroup, ParamStore};
use crate::quant::{EmaObserver, QuantScheme};
use crate::tensor::{Tape, Tensor};

/// Everything needed to continue training bit-exactly. Dropout masks and
/// shuffles are derived from `(seed, epoch, step, image)`, so no generator
/// state needs saving.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ParamStore<f32>,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    /// Optimizer steps taken.
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub best_map: Option<f64>,
    /// Activation range trackers, filled by calibration and fake-quant
    /// training.
    pub observers: BTreeMap<String, EmaObserver>,
}

impl TrainState {
    pub fn new(params: ParamStore<f32>) -> Self {
        let zeros: Vec<_> = params
            .values()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            params,
            step: 0,
            epoch: 0,
            best_map: None,
            observers: BTreeMap::new(),
        }
    }

    /// Activation schemes for every site; an untracked site is a
    /// configuration error.
    pub fn schemes(&self) -> Result<BTreeMap<String, QuantScheme>> {
        ACTIVATION_SITES
            .iter()
            .map(|&site| {
                self.observers
                    .get(site)
                    .and_then(EmaObserver::scheme)
                    .map(|s| (site.to_string(), s))
                    .ok_or_else(|| {
                        Error::config(format!("activation site {site} is not calibrated"))
                    })
            })
            .collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        for (k, (name, value)) in self.params.iter().enumerate() {
            c.push_tensor(format!("param/{name}"), value);
            c.push_tensor(format!("adam.m/{name}"), &self.m[k]);
            c.push_tensor(format!("adam.v/{name}"), &self.v[k]);
        }
        c.push_tensor("state.step", &Tensor::scalar(self.step as f64));
        c.push_tensor("state.epoch", &Tensor::scalar(self.epoch as f64));
        c.push_tensor(
            "state.best_map",
            &Tensor::scalar(self.best_map.unwrap_or(f64::NAN)),
        );
        for (site, o) in &self.observers {
            let fields = vec![o.decay, o.min, o.max, o.count as f64];
            c.push_tensor(format!("observer/{site}"), &Tensor::from_vec(fields));
        }
        c
    }

    /// Restores state into the parameter layout of `template`. Optimizer
    /// moments default to zero when absent, so plain parameter checkpoints
    /// load too.
    pub fn from_checkpoint(c: &Checkpoint, template: ParamStore<f32>) -> Result<Self> {
        let mut state = Self::new(template);
        let ids: Vec<_> = state.params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let name = state.params.name(id).to_string();
            let value: Tensor<f32> = c.tensor(&format!("param/{name}"))?;
            if value.shape() != state.params.get(id).shape() {
                return Err(Error::Format(format!(
                    "parameter {name} has shape {:?}, model expects {:?}",
                    value.shape(),
                    state.params.get(id).shape()
                )));
            }
            *state.params.get_mut(id) = value;
            if c.get(&format!("adam.m/{name}")).is_some() {
                state.m[k] = c.tensor(&format!("adam.m/{name}"))?;
                state.v[k] = c.tensor(&format!("adam.v/{name}"))?;
            }
        }
        let scalar = |name: &str| -> Result<Option<f64>> {
            c.get(name)
                .map(|_| c.tensor::<f64>(name).map(|t| t.item()))
                .transpose()
        };
        state.step = scalar("state.step")?.unwrap_or(0.0) as u64;
        state.epoch = scalar("state.epoch")?.unwrap_or(0.0) as usize;
        state.best_map = scalar("state.best_map")?.filter(|v| !v.is_nan());
        for r in &c.records {
            if let Some(site) = r.name.strip_prefix("observer/") {
                let t: Tensor<f64> = c.tensor(&r.name)?;
                let [decay, min, max, count] = t.data() else {
                    return Err(Error::Format(format!(
                        "observer record {site} needs 4 fields"
                    )));
                };
                state.observers.insert(
                    site.to_string(),
                    EmaObserver {
                        decay: *decay,
                        min: *min,
                        max: *max,
                        count: *count as u64,
                    },
                );
            }
        }
        Ok(state)
    }
}

/// Writes the state to `path` and the configuration to a `.toml` sidecar.
pub fn save_training(path: &Path, cfg: &ModelConfig, state: &TrainState) -> Result<()> {
    state.to_checkpoint().save(path)?;
    let sidecar = config_sidecar(path);
    std::fs::write(&sidecar, cfg.to_toml()).map_err(|e| Error::io(sidecar, e))
}

pub fn config_sidecar(path: &Path) -> PathBuf {
    path.with_extension("toml")
}

/// Loads a state saved by [`save_training`], rebuilding the model from the
/// sidecar configuration.
pub fn load_training(path: &Path) -> Result<(Model, ModelConfig, TrainState)> {
    let cfg = ModelConfig::load(&config_sidecar(path))?;
    let (model, template) = Model::new::<f32>(&cfg)?;
    let state = TrainState::from_checkpoint(&Checkpoint::load(path)?, template)?;
    Ok((model, cfg, state))
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    #[serde(rename = "mAP")]
    pub map: Option<f64>,
    pub recalls: Vec<Option<f64>>,
    pub accuracy: Option<f64>,
}

/// Per-image result of a training forward/backward.
struct ImageGrad {
    grads: Vec<Tensor<f32>>,
    loss: f64,
    slots: usize,
    observed: BTreeMap<String, (f64, f64)>,
}

/// How the forward pass treats weights and activations.
#[derive(Debug, Clone, Copy)]
pub struct Precision<'a> {
    pub fake_quant_weights: bool,
    pub activations: ActivationMode<'a>,
}

impl Precision<'_> {
    pub const FLOAT: Precision<'static> = Precision {
        fake_quant_weights: false,
        activations: ActivationMode::Float,
    };
}

/// Shared training context: model structure, loss weights, padding and
/// execution strategy.
#[derive(Debug, Clone)]
pub struct Session<'a> {
    pub model: &'a Model,
    pub weights: ClassWeights,
    pub max_persons: usize,
    pub exec: Execution,
}

impl<'a> Session<'a> {
    /// Derives class weights from the training split (unit weights when the
    /// weighted loss is off) and the padded person count from the
    /// configuration or the data.
    pub fn new(model: &'a Model, train: &[AnnotatedImage], exec: Execution) -> Result<Self> {
        let cfg = model.config();
        let classes = cfg.dims.classes;
        let weights = if cfg.toggles.wbce {
            let stats = compute_stats(train, classes)?;
            stats.weights.ok_or_else(|| {
                Error::data("class weights are undefined because some class has no training pairs")
            })?
        } else {
            ClassWeights::uniform(classes)
        };
        let data_p = max_persons(train);
        let max_persons = cfg.dims.max_persons.max(data_p);
        Ok(Self {
            model,
            weights,
            max_persons,
            exec,
        })
    }

    fn padded(&self, image: &AnnotatedImage) -> usize {
        self.max_persons.max(image.persons())
    }

    /// Padded logits `[P² × C]` for one image in eval mode.
    pub fn logits(
        &self,
        params: &ParamStore<f32>,
        image: &AnnotatedImage,
        precision: Precision<'_>,
    ) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false, precision.fake_quant_weights);
        let mut ctx = ForwardCtx::eval().with_activations(precision.activations);
        let cube = self.model.forward(
            &mut tape,
            &p,
            Sample {
                image: &image.image,
                persons: &image.persons,
            },
            self.padded(image),
            &mut ctx,
        )?;
        Ok(tape.value(cube.logits).clone())
    }

    fn image_grad(
        &self,
        params: &ParamStore<f32>,
        image: &AnnotatedImage,
        seed: u64,
        precision: Precision<'_>,
    ) -> Result<Option<ImageGrad>> {
        let cfg = self.model.config();
        if image.persons() < 2 || image.relations.is_empty() {
            return Ok(None);
        }
        let mask = build_mask(&image.relations, image.persons(), cfg.toggles.masking())?;
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, true, precision.fake_quant_weights);
        let mut ctx =
            ForwardCtx::train(cfg.train.dropout, seed).with_activations(precision.activations);
        let big_p = self.padded(image);
        let cube = self.model.forward(
            &mut tape,
            &p,
            Sample {
                image: &image.image,
                persons: &image.persons,
            },
            big_p,
            &mut ctx,
        )?;
        let slots: Vec<usize> = mask.targets.iter().map(|r| cube.slot(r.i, r.j)).collect();
        let classes: Vec<usize> = mask.targets.iter().map(|r| r.class).collect();
        let loss = weighted_bce_sum(
            &mut tape,
            cube.logits,
            &slots,
            &classes,
            &self.weights,
            cfg.train.loss_form,
        )?;
        let loss_value = tape.value(loss).item() as f64;
        tape.backward(loss)?;
        let grads = params
            .ids()
            .map(|id| {
                tape.take_grad(p.leaf(id))
                    .unwrap_or_else(|| Tensor::zeros(params.get(id).shape()))
            })
            .collect();
        Ok(Some(ImageGrad {
            grads,
            loss: loss_value,
            slots: slots.len(),
            observed: ctx.into_observed(),
        }))
    }

    /// One pass over `data` in a seeded shuffled order. With `qat`, weights
    /// and activations are fake-quantized using the state's trackers, which
    /// are updated once per batch. Returns the mean batch loss.
    pub fn run_epoch(
        &self,
        state: &mut TrainState,
        data: &[AnnotatedImage],
        qat: bool,
        lr_scale: f64,
    ) -> Result<f64> {
        let cfg = self.model.config();
        let tc = &cfg.train;
        let epoch = state.epoch as u64;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[
            tc.seed, epoch, 0x5_4ff1e,
        ])));

        let mut loss_total = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(tc.batch_size) {
            let schemes = if qat { Some(state.schemes()?) } else { None };
            let precision = match &schemes {
                Some(s) => Precision {
                    fake_quant_weights: true,
                    activations: ActivationMode::FakeQuant {
                        schemes: s,
                        observe: true,
                    },
                },
                None => Precision::FLOAT,
            };
            let step = state.step;
            let params = &state.params;
            let results = self.exec.map(batch.len(), |k| {
                let idx = batch[k];
                let seed = derive_seed(&[tc.seed, epoch, step, idx as u64]);
                self.image_grad(params, &data[idx], seed, precision)
            });

            let mut sum: Option<Vec<Tensor<f32>>> = None;
            let mut loss = 0.0;
            let mut slots = 0usize;
            let mut ranges: BTreeMap<String, (f64, f64)> = BTreeMap::new();
            for r in results {
                let Some(g) = r? else { continue };
                loss += g.loss;
                slots += g.slots;
                for (site, (lo, hi)) in g.observed {
                    let e = ranges.entry(site).or_insert((lo, hi));
                    e.0 = e.0.min(lo);
                    e.1 = e.1.max(hi);
                }
                match &mut sum {
                    None => sum = Some(g.grads),
                    Some(acc) => acc
                        .iter_mut()
                        .zip(&g.grads)
                        .for_each(|(a, b)| a.add_assign(b)),
                }
            }
            let Some(grads) = sum else { continue };
            let mean_loss = loss / slots as f64;
            if !mean_loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss became {mean_loss} at epoch {} step {}",
                    state.epoch + 1,
                    state.step
                )));
            }
            if qat {
                for (site, (lo, hi)) in ranges {
                    state
                        .observers
                        .entry(site)
                        .or_insert_with(|| EmaObserver::new(cfg.quant.ema_decay))
                        .observe(&[lo, hi]);
                }
            }
            apply_update(state, &grads, slots, cfg, lr_scale);
            loss_total += mean_loss;
            batches += 1;
        }
        state.epoch += 1;
        if batches == 0 {
            return Err(Error::data(
                "no image in the training split has a labeled pair",
            ));
        }
        Ok(loss_total / batches as f64)
    }

    /// Records an activation range for every site over `data` in eval mode,
    /// one tracker update per batch.
    pub fn calibrate(
        &self,
        state: &mut TrainState,
        data: &[AnnotatedImage],
        max_batches: usize,
    ) -> Result<()> {
        let cfg = self.model.config();
        let usable: Vec<&AnnotatedImage> = data.iter().filter(|im| im.persons() >= 2).collect();
        for batch in usable.chunks(cfg.train.batch_size).take(max_batches.max(1)) {
            let params = &state.params;
            let results = self
                .exec
                .map(batch.len(), |k| -> Result<BTreeMap<String, (f64, f64)>> {
                    let im = batch[k];
                    let mut tape = Tape::new();
                    let p = params.bind(&mut tape, false, true);
                    let mut ctx = ForwardCtx::eval().with_activations(ActivationMode::Observe);
                    self.model.forward(
                        &mut tape,
                        &p,
                        Sample {
                            image: &im.image,
                            persons: &im.persons,
                        },
                        self.padded(im),
                        &mut ctx,
                    )?;
                    Ok(ctx.into_observed())
                });
            let mut ranges: BTreeMap<String, (f64, f64)> = BTreeMap::new();
            for r in results {
                for (site, (lo, hi)) in r? {
                    let e = ranges.entry(site).or_insert((lo, hi));
                    e.0 = e.0.min(lo);
                    e.1 = e.1.max(hi);
                }
            }
            for (site, (lo, hi)) in ranges {
                state
                    .observers
                    .entry(site)
                    .or_insert_with(|| EmaObserver::new(cfg.quant.ema_decay))
                    .observe(&[lo, hi]);
            }
        }
        Ok(())
    }

    /// Scores every masked pair of `data` under `mode`.
    pub fn records(
        &self,
        params: &ParamStore<f32>,
        data: &[AnnotatedImage],
        mode: MaskingMode,
        precision: Precision<'_>,
    ) -> Result<Vec<EvalRecord>> {
        let per_image = self.exec.map(data.len(), |n| -> Result<Vec<EvalRecord>> {
            let im = &data[n];
            if im.persons() < 2 || im.relations.is_empty() {
                return Ok(Vec::new());
            }
            let logits = self.logits(params, im, precision)?;
            let big_p = self.padded(im);
            let c = self.model.classes();
            let mask = build_mask(&im.relations, im.persons(), mode)?;
            Ok(mask
                .targets
                .iter()
                .map(|r| {
                    let row = r.i * big_p + r.j;
                    EvalRecord {
                        scores: logits.data()[row * c..(row + 1) * c]
                            .iter()
                            .map(|&v| v as f64)
                            .collect(),
                        truth: r.class,
                        image: n,
                        pair: (r.i, r.j),
                    }
                })
                .collect())
        });
        let mut out = Vec::new();
        for r in per_image {
            out.extend(r?);
        }
        if out.is_empty() {
            return Err(Error::data("evaluation split has no labeled pairs"));
        }
        Ok(out)
    }

    pub fn evaluate(
        &self,
        params: &ParamStore<f32>,
        data: &[AnnotatedImage],
        mode: MaskingMode,
        precision: Precision<'_>,
    ) -> Result<MetricsReport> {
        let records = self.records(params, data, mode, precision)?;
        summarize(&records, self.model.config().train.ap_convention)
    }

    /// Trains until `state.epoch == epochs`, evaluating on `eval` after each
    /// epoch when given. `on_epoch` sees every log line and the state after
    /// that epoch.
    pub fn train(
        &self,
        state: &mut TrainState,
        train: &[AnnotatedImage],
        eval: Option<&[AnnotatedImage]>,
        epochs: usize,
        on_epoch: &mut dyn FnMut(&EpochLog, &TrainState) -> Result<()>,
    ) -> Result<Vec<EpochLog>> {
        let mut logs = Vec::new();
        while state.epoch < epochs {
            let loss = self.run_epoch(state, train, false, 1.0)?;
            let report = match eval {
                Some(e) => Some(self.evaluate(
                    &state.params,
                    e,
                    MaskingMode::Unilateral,
                    Precision::FLOAT,
                )?),
                None => None,
            };
            if let Some(r) = &report {
                if state.best_map.is_none_or(|b| r.map > b) {
                    state.best_map = Some(r.map);
                }
            }
            let log = EpochLog {
                epoch: state.epoch,
                loss,
                map: report.as_ref().map(|r| r.map),
                recalls: report
                    .as_ref()
                    .map(|r| r.recall.clone())
                    .unwrap_or_default(),
                accuracy: report.as_ref().map(|r| r.accuracy),
            };
            log::info!("epoch {} loss {:.5} mAP {:?}", log.epoch, log.loss, log.map);
            on_epoch(&log, state)?;
            logs.push(log);
        }
        Ok(logs)
    }
}

fn apply_update(
    state: &mut TrainState,
    grads: &[Tensor<f32>],
    slots: usize,
    cfg: &ModelConfig,
    lr_scale: f64,
) {
    let tc = &cfg.train;
    state.step += 1;
    let t = state.step as i32;
    let inv = 1.0 / slots as f64;
    let bc1 = 1.0 - tc.beta1.powi(t);
    let bc2 = 1.0 - tc.beta2.powi(t);
    let ids: Vec<_> = state.params.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let lr = lr_scale
            * match state.params.group(id) {
                ParamGroup::Backbone => tc.lr_backbone,
                ParamGroup::Rest => tc.lr_rest,
            };
        let g = grads[k].data();
        let w = state.params.get_mut(id).data_mut();
        match tc.optimizer {
            OptimizerKind::Sgd => {
                for (w, &g) in w.iter_mut().zip(g) {
                    *w = (*w as f64 - lr * g as f64 * inv) as f32;
                }
            }
            OptimizerKind::Adam => {
                let m = state.m[k].data_mut();
                let v = state.v[k].data_mut();
                for i in 0..w.len() {
                    let g = g[i] as f64 * inv;
                    let mi = tc.beta1 * m[i] as f64 + (1.0 - tc.beta1) * g;
                    let vi = tc.beta2 * v[i] as f64 + (1.0 - tc.beta2) * g * g;
                    m[i] = mi as f32;
                    v[i] = vi as f32;
                    let step = lr * (mi / bc1) / ((vi / bc2).sqrt() + tc.eps);
                    w[i] = (w[i] as f64 - step) as f32;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};

    fn setup() -> (ModelConfig, Vec<AnnotatedImage>) {
        let mut cfg = ModelConfig::tiny();
        cfg.dims.image_height = 32;
        cfg.dims.image_width = 32;
        cfg.dims.stride = 8;
        cfg.dims.max_persons = 0;
        cfg.dims.classes = 3;
        cfg.train.batch_size = 4;
        let data = generate_synthetic(&SynthConfig {
            images: 6,
            classes: 3,
            seed: 1,
            ..SynthConfig::default()
        })
        .unwrap();
        (cfg, data)
    }

    #[test]
    fn checkpoint_round_trip_restores_state() {
        let (cfg, data) = setup();
        let (model, params) = Model::new::<f32>(&cfg).unwrap();
        let s = Session::new(&model, &data, Execution::Sequential).unwrap();
        let mut state = TrainState::new(params.clone());
        s.run_epoch(&mut state, &data, false, 1.0).unwrap();
        state.observers.insert(
            "fem.out".into(),
            EmaObserver {
                decay: 0.99,
                min: -1.0,
                max: 2.0,
                count: 3,
            },
        );
        let back = TrainState::from_checkpoint(
            &Checkpoint::from_bytes(&state.to_checkpoint().to_bytes().unwrap()).unwrap(),
            params,
        )
        .unwrap();
        assert_eq!(back, state);
    }

    #[test]
    fn sequential_and_parallel_epochs_agree() {
        let (cfg, data) = setup();
        let (model, params) = Model::new::<f32>(&cfg).unwrap();
        let mut a = TrainState::new(params.clone());
        let mut b = TrainState::new(params);
        Session::new(&model, &data, Execution::Sequential)
            .unwrap()
            .run_epoch(&mut a, &data, false, 1.0)
            .unwrap();
        Session::new(&model, &data, Execution::Parallel)
            .unwrap()
            .run_epoch(&mut b, &data, false, 1.0)
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.step, 2);
    }

    #[test]
    fn fake_quant_training_needs_calibration() {
        let (cfg, data) = setup();
        let (model, params) = Model::new::<f32>(&cfg).unwrap();
        let s = Session::new(&model, &data, Execution::Sequential).unwrap();
        let mut state = TrainState::new(params);
        assert!(matches!(
            s.run_epoch(&mut state, &data, true, 1.0),
            Err(Error::Config(_))
        ));
        s.calibrate(&mut state, &data, 4).unwrap();
        assert_eq!(state.schemes().unwrap().len(), ACTIVATION_SITES.len());
        s.run_epoch(&mut state, &data, true, 1.0).unwrap();
    }
}
