//! Finite-difference checks of every trainable module and the full pipeline
//! at tiny sizes in 64-bit precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fem::{self, FeatureMap, PersonBox, SeGate, Stem};
use crate::forward::ForwardCtx;
use crate::gqm::{extract_queries, Gqm, QueryMode};
use crate::loss::{build_mask, weighted_bce, ClassWeights, LossForm, MaskingMode, Relation};
use crate::model::{Model, ModelConfig, Sample};
use crate::params::{Bound, ParamBuilder, ParamStore};
use crate::tensor::gradcheck::{check, max_error, GradCheckOptions, DEFAULT_STEP};
use crate::tensor::{Tape, Tensor, Var};
use crate::trm::{QueryBatch, Trm, TrmConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckResult {
    pub check: String,
    pub seed: u64,
    pub max_rel_error: f64,
    pub inputs: usize,
    pub coords: usize,
    /// Coordinates skipped because the perturbation crossed a kink.
    pub skipped: usize,
}

pub const CHECKS: [&str; 8] = [
    "stem",
    "se",
    "pooling",
    "gqm",
    "trm.encoder",
    "trm.decoder",
    "loss",
    "pipeline",
];

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output element matters.
fn project(tape: &mut Tape<f64>, out: Var, rng_seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let r = random(&mut rng, tape.shape(out), 1.0);
    let r = tape.constant(r);
    let p = tape.mul(out, r)?;
    tape.sum_all(p)
}

fn random_boxes(rng: &mut ChaCha8Rng, n: usize) -> Vec<PersonBox> {
    (0..n)
        .map(|_| {
            let x = rng.gen_range(0.0..0.5);
            let y = rng.gen_range(0.0..0.5);
            PersonBox::new(
                x,
                y,
                x + rng.gen_range(0.2..0.5),
                y + rng.gen_range(0.2..0.5),
            )
            .expect("valid box")
        })
        .collect()
}

fn builder_store(seed: u64) -> (ParamStore<f64>, ChaCha8Rng) {
    (ParamStore::default(), ChaCha8Rng::seed_from_u64(seed))
}

fn feature_map(tape: &Tape<f64>, v: Var) -> Result<FeatureMap> {
    FeatureMap::from_var(tape, v)
}

/// Runs check `name` with `seed`; the inputs are the module parameters
/// followed by the module inputs.
pub fn run_check(name: &str, seed: u64, cfg: &ModelConfig) -> Result<GradCheckResult> {
    let d = cfg.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FFEE);
    let opts = GradCheckOptions {
        step: DEFAULT_STEP,
        max_coords: 48,
        seed,
    };
    let (mut store, mut prng) = builder_store(seed);
    let b = &mut ParamBuilder {
        store: &mut store,
        rng: &mut prng,
    };
    let persons = d.max_persons.max(2);
    let fh = d.image_height / d.stride;
    let fw = d.image_width / d.stride;
    let c = d.feature_channels;

    let report = match name {
        "stem" => {
            let stem = Stem::new(b, c, d.stride)?;
            let n = store.len();
            let mut inputs = store.values().to_vec();
            inputs.push(random(&mut rng, &[3, d.image_height, d.image_width], 1.0));
            check(
                &inputs,
                |t, v| {
                    let p = Bound::from_vars(v[..n].to_vec());
                    let f = stem.forward(t, &p, v[n])?;
                    project(t, f.var, seed)
                },
                &opts,
            )?
        }
        "se" => {
            let se = SeGate::new(b, c, d.se_reduction)?;
            let n = store.len();
            let mut inputs = store.values().to_vec();
            inputs.push(random(&mut rng, &[c, fh, fw], 1.0));
            check(
                &inputs,
                |t, v| {
                    let p = Bound::from_vars(v[..n].to_vec());
                    let f = se.forward(t, &p, &feature_map(t, v[n])?)?;
                    project(t, f.var, seed)
                },
                &opts,
            )?
        }
        "pooling" => {
            let boxes = random_boxes(&mut rng, persons);
            let inputs = vec![random(&mut rng, &[c, fh, fw], 1.0)];
            check(
                &inputs,
                |t, v| {
                    let f = feature_map(t, v[0])?;
                    let mut parts = vec![fem::gap(t, &f)?];
                    for bx in &boxes {
                        parts.push(fem::roi_pool(t, &f, bx, d.roi_size)?);
                    }
                    let all = t.concat(&parts, 0)?;
                    project(t, all, seed)
                },
                &opts,
            )?
        }
        "gqm" => {
            let person_dim = c * d.roi_size * d.roi_size;
            let gqm = Gqm::new(b, person_dim, c, d.gqm_width, d.gqm_iterations);
            let n = store.len();
            let mut inputs = store.values().to_vec();
            inputs.push(random(&mut rng, &[persons, person_dim], 1.0));
            inputs.push(random(&mut rng, &[c], 1.0));
            check(
                &inputs,
                |t, v| {
                    let p = Bound::from_vars(v[..n].to_vec());
                    let g = gqm.init(t, &p, v[n], v[n + 1])?;
                    let g = gqm.run(t, &p, g)?;
                    let (edge_q, _) = extract_queries(t, &g, QueryMode::Edge)?;
                    let (cat_q, _) = extract_queries(t, &g, QueryMode::Concat)?;
                    let a = project(t, edge_q, seed)?;
                    let bq = project(t, cat_q, seed + 1)?;
                    t.add(a, bq)
                },
                &opts,
            )?
        }
        "trm.encoder" | "trm.decoder" => {
            let trm = Trm::new(
                b,
                TrmConfig {
                    feature_channels: c,
                    query_dim: d.gqm_width,
                    model_dim: d.model_dim,
                    heads: d.heads,
                    ffn_dim: d.ffn_dim,
                    classes: d.classes,
                },
            )?;
            let n = store.len();
            let actual = persons.saturating_sub(1).max(2);
            let mut inputs = store.values().to_vec();
            inputs.push(random(&mut rng, &[c, fh, fw], 1.0));
            inputs.push(random(&mut rng, &[actual * actual, d.gqm_width], 1.0));
            let decoder = name == "trm.decoder";
            check(
                &inputs,
                |t, v| {
                    let p = Bound::from_vars(v[..n].to_vec());
                    let mut ctx = ForwardCtx::eval();
                    let memory = trm.encode(t, &p, &feature_map(t, v[n])?, &mut ctx)?;
                    if !decoder {
                        return project(t, memory, seed);
                    }
                    let valid: Vec<bool> = (0..actual * actual)
                        .map(|k| k / actual != k % actual)
                        .collect();
                    let batch = QueryBatch::pad(t, v[n + 1], &valid, actual, persons.max(actual))?;
                    let dec = trm.decode(t, &p, &batch, memory, &mut ctx)?;
                    let cube = trm.classify(t, &p, dec, &batch, true)?;
                    project(t, cube.logits, seed)
                },
                &opts,
            )?
        }
        "loss" => {
            let slots = 5;
            let targets: Vec<usize> = (0..slots).map(|_| rng.gen_range(0..d.classes)).collect();
            let counts: Vec<usize> = (0..d.classes).map(|_| rng.gen_range(1..9)).collect();
            let weights = crate::loss::compute_class_weights(&counts)?;
            let inputs = vec![random(&mut rng, &[slots + 2, d.classes], 3.0)];
            let rows: Vec<usize> = (0..slots).collect();
            check(
                &inputs,
                |t, v| weighted_bce(t, v[0], &rows, &targets, &weights, LossForm::Standard),
                &opts,
            )?
        }
        "pipeline" => {
            let mut cfg = cfg.clone();
            cfg.train.seed = seed;
            let (model, params) = Model::new::<f64>(&cfg)?;
            let n = params.len();
            let image = random(&mut rng, &[3, d.image_height, d.image_width], 1.0).map(|x| x.abs());
            let boxes = random_boxes(&mut rng, persons);
            let relations: Vec<Relation> = (1..persons)
                .map(|j| Relation {
                    i: 0,
                    j,
                    class: rng.gen_range(0..d.classes),
                })
                .collect();
            let mask = build_mask(&relations, persons, MaskingMode::Bilateral)?;
            let weights = ClassWeights::uniform(d.classes);
            let inputs = params.values().to_vec();
            check(
                &inputs,
                |t, v| {
                    let p = Bound::from_vars(v[..n].to_vec());
                    let mut ctx = ForwardCtx::eval();
                    let cube = model.forward(
                        t,
                        &p,
                        Sample {
                            image: &image,
                            persons: &boxes,
                        },
                        persons,
                        &mut ctx,
                    )?;
                    let slots: Vec<usize> =
                        mask.targets.iter().map(|r| cube.slot(r.i, r.j)).collect();
                    let classes: Vec<usize> = mask.targets.iter().map(|r| r.class).collect();
                    weighted_bce(
                        t,
                        cube.logits,
                        &slots,
                        &classes,
                        &weights,
                        LossForm::Standard,
                    )
                },
                &opts,
            )?
        }
        other => {
            return Err(crate::Error::config(format!(
                "unknown gradient check '{other}'"
            )))
        }
    };
    Ok(GradCheckResult {
        check: name.to_string(),
        seed,
        max_rel_error: max_error(&report),
        inputs: report.len(),
        coords: report.iter().map(|r| r.coords).sum(),
        skipped: report.iter().map(|r| r.skipped).sum(),
    })
}

/// Every check for each seed, with the tiny configuration.
pub fn run_suite(seeds: &[u64]) -> Result<Vec<GradCheckResult>> {
    let cfg = ModelConfig::tiny();
    let mut out = Vec::with_capacity(CHECKS.len() * seeds.len());
    for &seed in seeds {
        for name in CHECKS {
            out.push(run_check(name, seed, &cfg)?);
        }
    }
    Ok(out)
}
