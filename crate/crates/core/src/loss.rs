//! Class-weighted binary cross-entropy over masked person pairs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var, LOG_EPS};

/// `w_c = (2 / n_c) · Σ_k n_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
    pub counts: Vec<usize>,
}

impl ClassWeights {
    pub fn uniform(classes: usize) -> Self {
        Self {
            weights: vec![1.0; classes],
            counts: Vec::new(),
        }
    }

    pub fn classes(&self) -> usize {
        self.weights.len()
    }
}

pub fn compute_class_weights(counts: &[usize]) -> Result<ClassWeights> {
    if counts.is_empty() {
        return Err(Error::data("class weights need at least one class"));
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::data(format!(
            "class {c} has no training pairs; its weight is undefined"
        )));
    }
    let total: usize = counts.iter().sum();
    let weights = counts
        .iter()
        .map(|&n| 2.0 / n as f64 * total as f64)
        .collect();
    Ok(ClassWeights {
        weights,
        counts: counts.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MaskingMode {
    /// Only the annotated direction of each pair counts.
    #[default]
    Unilateral,
    /// Both directions count, carrying the same label.
    Bilateral,
}

/// A labeled person pair, `i ≠ j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Relation {
    pub i: usize,
    pub j: usize,
    pub class: usize,
}

/// Pairs contributing to loss and metrics on an `n×n` grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairMask {
    pub persons: usize,
    cells: Vec<bool>,
    /// Contributing directed pairs with their targets, in insertion order.
    pub targets: Vec<Relation>,
}

impl PairMask {
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.cells[i * self.persons + j]
    }

    pub fn count(&self) -> usize {
        self.targets.len()
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.persons).all(|i| (0..self.persons).all(|j| self.get(i, j) == self.get(j, i)))
    }
}

pub fn build_mask(labels: &[Relation], persons: usize, mode: MaskingMode) -> Result<PairMask> {
    let mut cells = vec![false; persons * persons];
    let mut targets = Vec::with_capacity(labels.len() * 2);
    for r in labels {
        if r.i == r.j {
            return Err(Error::data(format!(
                "self-pair ({}, {}) cannot carry a relation",
                r.i, r.j
            )));
        }
        if r.i >= persons || r.j >= persons {
            return Err(Error::data(format!(
                "pair ({}, {}) out of range for {persons} persons",
                r.i, r.j
            )));
        }
        let mut set = |i: usize, j: usize| -> Result<()> {
            if std::mem::replace(&mut cells[i * persons + j], true) {
                return Err(Error::data(format!("pair ({i}, {j}) is labeled twice")));
            }
            targets.push(Relation {
                i,
                j,
                class: r.class,
            });
            Ok(())
        };
        set(r.i, r.j)?;
        if mode == MaskingMode::Bilateral {
            set(r.j, r.i)?;
        }
    }
    Ok(PairMask {
        persons,
        cells,
        targets,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossForm {
    /// `−Σ_c w_c [y_c log σ(m_c) + (1 − y_c) log(1 − σ(m_c))]`
    #[default]
    Standard,
    /// `Σ_c w_c y_c log σ(m_c)`, the weighted-BCE formula with the sign and
    /// negative-class term dropped. Kept for ablations only.
    Literal,
}

/// Summed (not averaged) weighted BCE over the rows `slots` of
/// `logits [S × C]`, with `classes[k]` the target of `slots[k]`.
pub fn weighted_bce_sum<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    slots: &[usize],
    classes: &[usize],
    weights: &ClassWeights,
    form: LossForm,
) -> Result<Var> {
    let c = match *tape.shape(logits) {
        [_, c] => c,
        ref s => return Err(Error::shape(format!("logits must be S×C, got {s:?}"))),
    };
    if c != weights.classes() {
        return Err(Error::shape(format!(
            "{c} logit columns but {} class weights",
            weights.classes()
        )));
    }
    if slots.len() != classes.len() {
        return Err(Error::shape("one target class per masked slot"));
    }
    if let Some(&bad) = classes.iter().find(|&&k| k >= c) {
        return Err(Error::data(format!(
            "target class {bad} out of range for {c} classes"
        )));
    }
    let n = slots.len();
    let index: Vec<_> = slots.iter().map(|&s| Some(s)).collect();
    let selected = tape.gather_rows(logits, &index)?;
    let p = tape.sigmoid(selected);
    let eps = T::lit(LOG_EPS);
    let p = tape.clamp(p, eps, T::one() - eps);

    let onehot = Tensor::from_fn(&[n, c], |k| {
        if classes[k / c] == k % c {
            T::one()
        } else {
            T::zero()
        }
    });
    let w = Tensor::from_fn(&[n, c], |k| T::lit(weights.weights[k % c]));
    let w = tape.constant(w);
    let log_p = tape.log(p);
    let y = tape.constant(onehot.clone());
    let pos = tape.mul(y, log_p)?;
    let per_class = match form {
        LossForm::Literal => pos,
        LossForm::Standard => {
            let q = tape.neg(p);
            let q = tape.add_scalar(q, T::one());
            let log_q = tape.log(q);
            let not_y = tape.constant(onehot.map(|v| T::one() - v));
            let neg = tape.mul(not_y, log_q)?;
            tape.add(pos, neg)?
        }
    };
    let weighted = tape.mul(w, per_class)?;
    let total = tape.sum_all(weighted)?;
    Ok(match form {
        LossForm::Standard => tape.neg(total),
        LossForm::Literal => total,
    })
}

/// Weighted BCE averaged over masked slots.
pub fn weighted_bce<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    slots: &[usize],
    classes: &[usize],
    weights: &ClassWeights,
    form: LossForm,
) -> Result<Var> {
    if slots.is_empty() {
        return Err(Error::data("no masked slots in batch"));
    }
    let sum = weighted_bce_sum(tape, logits, slots, classes, weights, form)?;
    Ok(tape.mul_scalar(sum, T::one() / T::lit(slots.len() as f64)))
}
