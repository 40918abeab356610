use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Payload};
use crate::error::{Error, Result};
use crate::forward::{ActivationMode, ACTIVATION_SITES};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::quant::QuantScheme;
use crate::tensor::{Real, Tensor};
use crate::train::{config_sidecar, Precision, TrainState};

/// INT8 weights with per-tensor symmetric schemes plus frozen activation
/// schemes. `params` holds the dequantized weights used for simulated
/// inference.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
    pub weights: Vec<QuantizedTensor>,
    pub activations: BTreeMap<String, QuantScheme>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<i8>,
    pub scheme: QuantScheme,
}

/// Parameters only, as 32-bit floats.
pub fn params_checkpoint<T: Real>(params: &ParamStore<T>) -> Checkpoint {
    let mut c = Checkpoint::new();
    for (name, value) in params.iter() {
        c.push_tensor(format!("param/{name}"), &value.cast::<f32>());
    }
    c
}

impl QuantizedModel {
    /// Quantizes every parameter of `state` and freezes its activation
    /// schemes. Fails when a site was never calibrated.
    pub fn from_state(config: &ModelConfig, state: &TrainState) -> Result<Self> {
        let activations = state.schemes()?;
        let mut params = state.params.clone();
        let mut weights = Vec::with_capacity(params.len());
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let value = params.get(id);
            let xs: Vec<f64> = value.data().iter().map(|v| v.as_f64()).collect();
            let scheme = QuantScheme::symmetric(xs.iter().copied());
            let q = scheme.quantize_slice(&xs);
            let deq = Tensor::new(
                value.shape().to_vec(),
                q.iter().map(|&v| f32::lit(scheme.dequantize(v))).collect(),
            )?;
            weights.push(QuantizedTensor {
                name: params.name(id).to_string(),
                shape: value.shape().to_vec(),
                values: q,
                scheme,
            });
            *params.get_mut(id) = deq;
        }
        Ok(Self {
            config: config.clone(),
            params,
            weights,
            activations,
        })
    }

    /// Weights are already dequantized; activations are fake-quantized.
    pub fn precision(&self) -> Precision<'_> {
        Precision {
            fake_quant_weights: false,
            activations: ActivationMode::FakeQuant {
                schemes: &self.activations,
                observe: false,
            },
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        for w in &self.weights {
            c.push_quantized(
                format!("param/{}", w.name),
                &w.shape,
                w.values.clone(),
                &w.scheme,
            );
        }
        for (site, s) in &self.activations {
            c.push_quantized(format!("act/{site}"), &[0], Vec::new(), s);
        }
        c
    }

    pub fn from_checkpoint(config: &ModelConfig, c: &Checkpoint) -> Result<Self> {
        let (_, mut params) = Model::new::<f32>(config)?;
        let mut weights = Vec::with_capacity(params.len());
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let name = params.name(id).to_string();
            let key = format!("param/{name}");
            let record = c
                .get(&key)
                .ok_or_else(|| Error::Format(format!("missing record '{key}'")))?;
            let Payload::I8 { values, .. } = &record.payload else {
                return Err(Error::Format(format!("record '{key}' is not int8")));
            };
            if record.shape != params.get(id).shape() {
                return Err(Error::Format(format!(
                    "record '{key}' has shape {:?}",
                    record.shape
                )));
            }
            *params.get_mut(id) = c.tensor(&key)?;
            weights.push(QuantizedTensor {
                name,
                shape: record.shape.clone(),
                values: values.clone(),
                scheme: record.scheme().expect("int8 record"),
            });
        }
        let mut activations = BTreeMap::new();
        for site in ACTIVATION_SITES {
            let key = format!("act/{site}");
            let s = c
                .get(&key)
                .and_then(|r| r.scheme())
                .ok_or_else(|| Error::Format(format!("missing activation scheme '{key}'")))?;
            activations.insert(site.to_string(), s);
        }
        // weight schemes keep the observed range of the source tensor
        for w in &mut weights {
            let max = w.scheme.scale * 127.0;
            w.scheme.min = -max;
            w.scheme.max = max;
        }
        Ok(Self {
            config: config.clone(),
            params,
            weights,
            activations,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)?;
        let sidecar = config_sidecar(path);
        std::fs::write(&sidecar, self.config.to_toml()).map_err(|e| Error::io(sidecar, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let config = ModelConfig::load(&config_sidecar(path))?;
        Self::from_checkpoint(&config, &Checkpoint::load(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    pub parameters: usize,
    pub fp32_payload_bytes: usize,
    pub int8_payload_bytes: usize,
    pub fp32_file_bytes: usize,
    pub int8_file_bytes: usize,
    pub payload_ratio: f64,
    pub file_ratio: f64,
}

/// Compares a parameter-only FP32 checkpoint with the INT8 export. Payloads
/// count parameter records only.
pub fn size_report(fp32: &Checkpoint, int8: &Checkpoint) -> Result<SizeReport> {
    let param_payload = |c: &Checkpoint| -> usize {
        c.records
            .iter()
            .filter(|r| r.name.starts_with("param/"))
            .map(|r| r.payload_bytes())
            .sum()
    };
    let parameters = fp32
        .records
        .iter()
        .filter(|r| r.name.starts_with("param/"))
        .map(|r| r.payload.len())
        .sum();
    let fp32_payload_bytes = param_payload(fp32);
    let int8_payload_bytes = param_payload(int8);
    let fp32_file_bytes = fp32.to_bytes()?.len();
    let int8_file_bytes = int8.to_bytes()?.len();
    Ok(SizeReport {
        parameters,
        fp32_payload_bytes,
        int8_payload_bytes,
        fp32_file_bytes,
        int8_file_bytes,
        payload_ratio: int8_payload_bytes as f64 / fp32_payload_bytes as f64,
        file_ratio: int8_file_bytes as f64 / fp32_file_bytes as f64,
    })
}
