//! JSON annotation files: an array of entries
//! `{"id", "image", "persons": [[x1, y1, x2, y2], …], "relations": [[i, j, class], …]}`.
//! `image` is either `synthetic:<seed>` or a PNG path relative to the file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{canonical_relations, render_synthetic, AnnotatedImage, ImageSource};
use crate::error::{Error, Result};
use crate::fem::PersonBox;
use crate::loss::Relation;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadOptions {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            classes: 6,
            height: 32,
            width: 32,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    id: String,
    image: String,
    persons: Vec<[f64; 4]>,
    #[serde(default)]
    relations: Vec<[usize; 3]>,
}

/// 1-based line of each top-level array element.
fn entry_lines(text: &str) -> Vec<usize> {
    let mut lines = Vec::new();
    let (mut line, mut depth) = (1usize, 0usize);
    let (mut in_str, mut escape) = (false, false);
    for ch in text.chars() {
        if ch == '\n' {
            line += 1;
        }
        if in_str {
            match (escape, ch) {
                (true, _) => escape = false,
                (false, '\\') => escape = true,
                (false, '"') => in_str = false,
                _ => {}
            }
            continue;
        }
        match ch {
            '"' => in_str = true,
            '{' | '[' => {
                if depth == 1 {
                    lines.push(line);
                }
                depth += 1;
            }
            '}' | ']' => depth = depth.saturating_sub(1),
            _ => {}
        }
    }
    lines
}

/// Parses annotation text; `base` resolves PNG paths.
pub fn parse_annotations(
    text: &str,
    base: &Path,
    opts: LoadOptions,
) -> Result<Vec<AnnotatedImage>> {
    let entries: Vec<Entry> = serde_json::from_str(text)
        .map_err(|e| Error::data(format!("line {}: malformed annotations: {e}", e.line())))?;
    let lines = entry_lines(text);
    entries
        .into_iter()
        .enumerate()
        .map(|(n, e)| {
            let line = lines.get(n).copied().unwrap_or(0);
            let id = e.id.clone();
            load_entry(e, base, opts).map_err(|err| {
                let msg = match err {
                    Error::Data(m) | Error::Shape(m) | Error::Config(m) => m,
                    other => other.to_string(),
                };
                Error::data(format!("line {line}: image '{id}': {msg}"))
            })
        })
        .collect()
}

fn load_entry(e: Entry, base: &Path, opts: LoadOptions) -> Result<AnnotatedImage> {
    let persons = e
        .persons
        .iter()
        .map(|b| PersonBox::new(b[0], b[1], b[2], b[3]))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<Relation> = e
        .relations
        .iter()
        .map(|&[i, j, class]| Relation { i, j, class })
        .collect();
    let relations = canonical_relations(&labels, persons.len(), opts.classes)?;
    let (source, image) = match e.image.strip_prefix("synthetic:") {
        Some(seed) => {
            let seed: u64 = seed
                .parse()
                .map_err(|_| Error::data(format!("bad synthetic seed '{seed}'")))?;
            let img = render_synthetic(
                seed,
                &persons,
                &relations,
                opts.classes,
                opts.height,
                opts.width,
            )?;
            (ImageSource::Synthetic(seed), img)
        }
        None => (
            ImageSource::Path(e.image.clone()),
            load_png(&base.join(&e.image), opts)?,
        ),
    };
    AnnotatedImage::new(e.id, source, image, persons, relations, opts.classes)
}

fn load_png(path: &Path, opts: LoadOptions) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::data(format!("cannot read image {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    if (h, w) != (opts.height, opts.width) {
        return Err(Error::data(format!(
            "image {} is {w}×{h}, expected {}×{}",
            path.display(),
            opts.width,
            opts.height
        )));
    }
    let plane = h * w;
    let mut t = Tensor::zeros(&[3, h, w]);
    let data = t.data_mut();
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * plane + y as usize * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    Ok(t)
}

fn save_png(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let [_, h, w] = *t.shape() else {
        return Err(Error::shape("image must be 3×H×W"));
    };
    let plane = h * w;
    let d = t.data();
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| {
            (d[c * plane + y as usize * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8
        };
        image::Rgb([at(0), at(1), at(2)])
    });
    img.save(path)
        .map_err(|e| Error::data(format!("cannot write image {}: {e}", path.display())))
}

pub fn load_annotations(path: &Path, opts: LoadOptions) -> Result<Vec<AnnotatedImage>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_annotations(&text, base, opts)
}

/// Writes annotations. With `write_png`, images are saved next to the file as
/// `<id>.png` and referenced by path; otherwise synthetic images keep their
/// seed reference.
pub fn save_annotations(path: &Path, images: &[AnnotatedImage], write_png: bool) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::with_capacity(images.len());
    for im in images {
        let image = match (&im.source, write_png) {
            (ImageSource::Synthetic(_), false) => im.source.to_field(),
            _ => {
                let name = format!("{}.png", im.id);
                save_png(&base.join(&name), &im.image)?;
                name
            }
        };
        entries.push(Entry {
            id: im.id.clone(),
            image,
            persons: im.persons.iter().map(|b| b.to_array()).collect(),
            relations: im.relations.iter().map(|r| [r.i, r.j, r.class]).collect(),
        });
    }
    let text = serde_json::to_string_pretty(&entries).map_err(|e| Error::data(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
