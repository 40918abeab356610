use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::AnnotatedImage;
use crate::error::{Error, Result};
use crate::loss::{compute_class_weights, ClassWeights};

/// Split-level label statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub images: usize,
    pub pairs: usize,
    pub class_counts: Vec<usize>,
    /// Entry `k`: images carrying exactly `k` distinct relation classes.
    pub unique_relations: Vec<usize>,
    /// Entry `p`: images with exactly `p` persons.
    pub persons: Vec<usize>,
    pub max_persons: usize,
    /// Absent when some class has no pairs.
    pub weights: Option<ClassWeights>,
}

pub fn compute_stats(images: &[AnnotatedImage], classes: usize) -> Result<DatasetStats> {
    if images.is_empty() {
        return Err(Error::data("empty split"));
    }
    let mut class_counts = vec![0usize; classes];
    let mut unique_relations = vec![0usize; classes + 1];
    let max_persons = super::max_persons(images);
    let mut persons = vec![0usize; max_persons + 1];
    let mut pairs = 0;
    for im in images {
        let mut seen = vec![false; classes];
        for r in &im.relations {
            if r.class >= classes {
                return Err(Error::data(format!(
                    "image '{}': class {} out of range",
                    im.id, r.class
                )));
            }
            class_counts[r.class] += 1;
            seen[r.class] = true;
            pairs += 1;
        }
        unique_relations[seen.iter().filter(|&&s| s).count()] += 1;
        persons[im.persons()] += 1;
    }
    let weights = compute_class_weights(&class_counts).ok();
    Ok(DatasetStats {
        images: images.len(),
        pairs,
        class_counts,
        unique_relations,
        persons,
        max_persons,
        weights,
    })
}

impl DatasetStats {
    /// Human-readable report.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "images: {}  labeled pairs: {}  max persons: {}",
            self.images, self.pairs, self.max_persons
        );
        let _ = writeln!(s, "\nclass  pairs  share   weight");
        for (c, &n) in self.class_counts.iter().enumerate() {
            let share = 100.0 * n as f64 / self.pairs.max(1) as f64;
            let w = self
                .weights
                .as_ref()
                .map_or("undefined".to_string(), |w| format!("{:.4}", w.weights[c]));
            let _ = writeln!(s, "{c:>5}  {n:>5}  {share:>5.1}%  {w}");
        }
        let _ = writeln!(s, "\ndistinct relations per image");
        for (k, &n) in self.unique_relations.iter().enumerate() {
            let _ = writeln!(s, "{k:>5}  {n}");
        }
        let _ = writeln!(s, "\npersons per image");
        for (p, &n) in self.persons.iter().enumerate().filter(|(_, &n)| n > 0) {
            let _ = writeln!(s, "{p:>5}  {n}");
        }
        s
    }

    /// One `key=value` per line.
    pub fn to_kv(&self) -> String {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "images={}", self.images);
        let _ = writeln!(s, "pairs={}", self.pairs);
        let _ = writeln!(s, "max_persons={}", self.max_persons);
        let _ = writeln!(s, "class_counts={}", join(&self.class_counts));
        let _ = writeln!(s, "unique_relations_hist={}", join(&self.unique_relations));
        let _ = writeln!(s, "persons_hist={}", join(&self.persons));
        match &self.weights {
            Some(w) => {
                let ws: Vec<String> = w.weights.iter().map(|v| format!("{v}")).collect();
                let _ = writeln!(s, "class_weights={}", ws.join(","));
            }
            None => {
                let _ = writeln!(s, "class_weights=undefined");
            }
        }
        s
    }
}
