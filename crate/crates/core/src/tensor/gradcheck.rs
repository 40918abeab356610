//! Central finite-difference checks for the tape.
//!
//! The error reported per input is the norm-wise relative error
//! `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂, floor)` over the
//! checked coordinates.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-4;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;
const NORM_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates sampled per input; larger inputs are subsampled.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            max_coords: 48,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InputError {
    pub input: usize,
    pub coords: usize,
    /// Coordinates excluded because the perturbation straddled a kink.
    pub skipped: usize,
    pub rel_error: f64,
}

/// Compares the tape gradient of the scalar `f(inputs)` against central
/// differences for every input tensor.
pub fn check<F>(inputs: &[Tensor<f64>], f: F, opts: &GradCheckOptions) -> Result<Vec<InputError>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<(f64, Vec<bool>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        Ok((scalar_of(&tape, out)?, tape.kink_pattern()))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    tape.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = Vec::with_capacity(inputs.len());
    for (k, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let analytic_full = tape
            .grad(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let coords: Vec<usize> = if n <= opts.max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.max_coords).into_vec();
            c.sort_unstable();
            c
        };

        let mut diff_sq = 0.0;
        let mut a_sq = 0.0;
        let mut n_sq = 0.0;
        let mut skipped = 0;
        let mut shifted = inputs.to_vec();
        for &c in &coords {
            let orig = input.data()[c];
            shifted[k].data_mut()[c] = orig + opts.step;
            let (plus, plus_kinks) = eval(&shifted)?;
            shifted[k].data_mut()[c] = orig - opts.step;
            let (minus, minus_kinks) = eval(&shifted)?;
            shifted[k].data_mut()[c] = orig;
            if plus_kinks != minus_kinks {
                skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.step);
            let analytic = analytic_full.data()[c];
            diff_sq += (analytic - numeric).powi(2);
            a_sq += analytic * analytic;
            n_sq += numeric * numeric;
        }
        let denom = a_sq.sqrt().max(n_sq.sqrt()).max(NORM_FLOOR);
        report.push(InputError {
            input: k,
            coords: coords.len() - skipped,
            skipped,
            rel_error: diff_sq.sqrt() / denom,
        });
    }
    Ok(report)
}

/// Largest relative error across all inputs.
pub fn max_error(report: &[InputError]) -> f64 {
    report.iter().map(|e| e.rel_error).fold(0.0, f64::max)
}

fn scalar_of(tape: &Tape<f64>, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(Error::shape(format!(
            "gradient check needs a scalar output, got {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // fake_quant has a straight-through gradient, which is wrong as a true
        // derivative of the step function at coarse scale.
        let scheme = crate::quant::QuantScheme {
            scale: 0.5,
            zero_point: 0,
            min: -64.0,
            max: 64.0,
        };
        let x = Tensor::from_vec(vec![0.3, 0.6, 1.1]);
        let report = check(
            &[x],
            |t, v| {
                let q = t.fake_quant(v[0], scheme);
                t.sum_all(q)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(max_error(&report) > 0.5);
    }

    #[test]
    fn passes_for_a_smooth_function() {
        let x = Tensor::from_vec(vec![0.3, -0.6, 1.1]);
        let report = check(
            &[x],
            |t, v| {
                let s = t.sigmoid(v[0]);
                let p = t.mul(s, v[0])?;
                t.sum_all(p)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(max_error(&report) < 1e-6);
    }

    #[test]
    fn kink_straddling_coordinates_are_skipped() {
        let x = Tensor::from_vec(vec![0.5e-4, 0.3]);
        let report = check(
            &[x],
            |t, v| {
                let r = t.relu(v[0]);
                t.sum_all(r)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report[0].skipped, 1);
        assert_eq!(report[0].coords, 1);
        assert!(max_error(&report) < 1e-9);
    }
}
