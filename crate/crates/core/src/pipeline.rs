//! Multi-step workflows: INT8 calibration plus fake-quant fine-tuning, and
//! the cumulative ablation sweep.

use serde::{Deserialize, Serialize};

use crate::data::AnnotatedImage;
use crate::error::Result;
use crate::loss::MaskingMode;
use crate::metrics::MetricsReport;
use crate::model::{Model, ModelConfig, Toggles};
use crate::par::Execution;
use crate::quant::{params_checkpoint, size_report, QuantizedModel, SizeReport};
use crate::train::{Precision, Session, TrainState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantReport {
    /// Float model before fine-tuning.
    pub pretrained: MetricsReport,
    /// Float control: the same fine-tuning schedule without fake-quant.
    pub fp32: MetricsReport,
    /// Float evaluation of the fine-tuned weights.
    pub fp32_after_qat: MetricsReport,
    /// Simulated INT8 inference of the exported model.
    pub int8: MetricsReport,
    pub size: SizeReport,
}

impl QuantReport {
    /// `fp32 − int8` mAP in points. Both arms share the fine-tuning schedule,
    /// so the gap isolates quantization.
    pub fn map_drop(&self) -> f64 {
        self.fp32.map - self.int8.map
    }
}

/// Calibrates activation ranges on `train`, fine-tunes with fake-quant for
/// the configured epochs, and exports. A float copy of `state` is fine-tuned
/// on the same schedule as the comparison baseline.
pub fn quantize(
    session: &Session<'_>,
    state: &mut TrainState,
    train: &[AnnotatedImage],
    eval: &[AnnotatedImage],
) -> Result<(QuantizedModel, QuantReport)> {
    let cfg = session.model.config();
    let pretrained = session.evaluate(
        &state.params,
        eval,
        MaskingMode::Unilateral,
        Precision::FLOAT,
    )?;
    let mut control = state.clone();
    for _ in 0..cfg.quant.qat_epochs {
        session.run_epoch(&mut control, train, false, cfg.quant.qat_lr_scale)?;
    }
    let fp32 = session.evaluate(
        &control.params,
        eval,
        MaskingMode::Unilateral,
        Precision::FLOAT,
    )?;
    session.calibrate(state, train, cfg.quant.calibration_batches)?;
    for _ in 0..cfg.quant.qat_epochs {
        session.run_epoch(state, train, true, cfg.quant.qat_lr_scale)?;
    }
    let q = QuantizedModel::from_state(cfg, state)?;
    let int8 = session.evaluate(&q.params, eval, MaskingMode::Unilateral, q.precision())?;
    let fp32_after_qat = session.evaluate(
        &state.params,
        eval,
        MaskingMode::Unilateral,
        Precision::FLOAT,
    )?;
    let size = size_report(&params_checkpoint(&state.params), &q.to_checkpoint())?;
    Ok((
        q,
        QuantReport {
            pretrained,
            fp32,
            fp32_after_qat,
            int8,
            size,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub toggles: Toggles,
    pub final_loss: f64,
    pub report: MetricsReport,
}

/// Trains `base` from scratch under `toggles` for `epochs` and evaluates
/// with unilateral masks.
pub fn train_and_evaluate(
    base: &ModelConfig,
    toggles: Toggles,
    train: &[AnnotatedImage],
    eval: &[AnnotatedImage],
    epochs: usize,
    exec: Execution,
) -> Result<(f64, MetricsReport)> {
    let mut cfg = base.clone();
    cfg.toggles = toggles;
    let (model, params) = Model::new::<f32>(&cfg)?;
    let session = Session::new(&model, train, exec)?;
    let mut state = TrainState::new(params);
    let mut loss = f64::NAN;
    while state.epoch < epochs {
        loss = session.run_epoch(&mut state, train, false, 1.0)?;
    }
    let report = session.evaluate(
        &state.params,
        eval,
        MaskingMode::Unilateral,
        Precision::FLOAT,
    )?;
    Ok((loss, report))
}

/// The five cumulative rows, each switch added on top of the previous row.
pub fn ablate(
    base: &ModelConfig,
    train: &[AnnotatedImage],
    eval: &[AnnotatedImage],
    epochs: usize,
    exec: Execution,
) -> Result<Vec<AblationRow>> {
    Toggles::cumulative()
        .into_iter()
        .map(|(name, toggles)| {
            log::info!("ablation row {name}");
            let (final_loss, report) =
                train_and_evaluate(base, toggles, train, eval, epochs, exec)?;
            Ok(AblationRow {
                name: name.to_string(),
                toggles,
                final_loss,
                report,
            })
        })
        .collect()
}
