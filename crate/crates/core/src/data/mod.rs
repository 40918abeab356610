//! Annotated images: synthetic generation, annotation files and split
//! statistics.

mod annotations;
mod stats;
mod synth;

use serde::{Deserialize, Serialize};

pub use annotations::{load_annotations, parse_annotations, save_annotations, LoadOptions};
pub use stats::{compute_stats, DatasetStats};
pub use synth::{generate_synthetic, render_synthetic, SynthConfig, NEAR_DISTANCE};

use crate::error::{Error, Result};
use crate::fem::PersonBox;
use crate::loss::Relation;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ImageSource {
    /// Rendered from a per-image seed.
    Synthetic(u64),
    /// PNG path relative to the annotation file.
    Path(String),
}

impl ImageSource {
    pub fn to_field(&self) -> String {
        match self {
            ImageSource::Synthetic(seed) => format!("synthetic:{seed}"),
            ImageSource::Path(p) => p.clone(),
        }
    }
}

/// One image with its person boxes and labeled pairs. Relations are stored
/// once per unordered pair with `i < j`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub id: String,
    pub source: ImageSource,
    /// `3×H×W`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub persons: Vec<PersonBox>,
    pub relations: Vec<Relation>,
}

impl AnnotatedImage {
    /// Checks index ranges, self-pairs and duplicate labels, and stores every
    /// relation in canonical `i < j` order.
    pub fn new(
        id: String,
        source: ImageSource,
        image: Tensor<f32>,
        persons: Vec<PersonBox>,
        relations: Vec<Relation>,
        classes: usize,
    ) -> Result<Self> {
        let relations = canonical_relations(&relations, persons.len(), classes)?;
        Ok(Self {
            id,
            source,
            image,
            persons,
            relations,
        })
    }

    pub fn persons(&self) -> usize {
        self.persons.len()
    }
}

pub(crate) fn canonical_relations(
    relations: &[Relation],
    persons: usize,
    classes: usize,
) -> Result<Vec<Relation>> {
    let mut out: Vec<Relation> = Vec::with_capacity(relations.len());
    for r in relations {
        if r.i == r.j {
            return Err(Error::data(format!("self-pair ({}, {})", r.i, r.j)));
        }
        if r.i >= persons || r.j >= persons {
            return Err(Error::data(format!(
                "pair ({}, {}) refers to a person beyond the {persons} boxes",
                r.i, r.j
            )));
        }
        if r.class >= classes {
            return Err(Error::data(format!(
                "class {} out of range for {classes} classes",
                r.class
            )));
        }
        let c = Relation {
            i: r.i.min(r.j),
            j: r.i.max(r.j),
            class: r.class,
        };
        if out.iter().any(|o| o.i == c.i && o.j == c.j) {
            return Err(Error::data(format!(
                "pair ({}, {}) is labeled more than once",
                c.i, c.j
            )));
        }
        out.push(c);
    }
    out.sort();
    Ok(out)
}

/// Largest person count over all images.
pub fn max_persons(images: &[AnnotatedImage]) -> usize {
    images
        .iter()
        .map(AnnotatedImage::persons)
        .max()
        .unwrap_or(0)
}
