//! Synthetic scenes: colored person boxes on a textured background, laid out
//! on a coarse grid. A labeled pair's class is a fixed function of the two
//! persons' colors and whether their boxes are near each other.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AnnotatedImage, ImageSource};
use crate::error::{Error, Result};
use crate::fem::PersonBox;
use crate::loss::Relation;
use crate::par::splitmix;
use crate::tensor::Tensor;

/// Center distance (normalized units) below which two boxes count as near.
pub const NEAR_DISTANCE: f64 = 0.375;

const GRID: usize = 4;
const LAYOUT_ATTEMPTS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub images: usize,
    pub classes: usize,
    pub min_persons: usize,
    pub max_persons: usize,
    /// Class marginals over labeled pairs; uniform when absent.
    pub imbalance: Option<Vec<f64>>,
    pub seed: u64,
    /// Square image side in pixels; a multiple of 4.
    pub size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            images: 64,
            classes: 6,
            min_persons: 2,
            max_persons: 4,
            imbalance: None,
            seed: 0,
            size: 32,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.images == 0 {
            return Err(Error::config("synthetic dataset needs at least one image"));
        }
        if self.classes < 2 {
            return Err(Error::config(
                "synthetic dataset needs at least two classes",
            ));
        }
        if self.min_persons < 2 || self.min_persons > self.max_persons {
            return Err(Error::config(format!(
                "person range [{}, {}] must satisfy 2 <= min <= max",
                self.min_persons, self.max_persons
            )));
        }
        if self.max_persons > GRID * GRID / 2 {
            return Err(Error::config(format!(
                "at most {} persons fit the layout grid",
                GRID * GRID / 2
            )));
        }
        if self.size == 0 || !self.size.is_multiple_of(GRID) {
            return Err(Error::config(format!(
                "image size must be a positive multiple of {GRID}"
            )));
        }
        if let Some(p) = &self.imbalance {
            if p.len() != self.classes {
                return Err(Error::config(format!(
                    "imbalance profile has {} entries for {} classes",
                    p.len(),
                    self.classes
                )));
            }
            if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::config(
                    "imbalance profile entries must be finite and non-negative",
                ));
            }
            let sum: f64 = p.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::config(format!(
                    "imbalance profile sums to {sum}, not 1"
                )));
            }
        }
        Ok(())
    }
}

fn image_seed(seed: u64, index: usize) -> u64 {
    splitmix(seed ^ splitmix(index as u64))
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Vec<AnnotatedImage>> {
    cfg.validate()?;
    let profile = cfg
        .imbalance
        .clone()
        .unwrap_or_else(|| vec![1.0 / cfg.classes as f64; cfg.classes]);
    let classes = WeightedIndex::new(&profile)
        .map_err(|e| Error::config(format!("imbalance profile: {e}")))?;
    (0..cfg.images)
        .map(|n| {
            let seed = image_seed(cfg.seed, n);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (persons, relations) = layout(&mut rng, cfg, &classes)?;
            let image =
                render_synthetic(seed, &persons, &relations, cfg.classes, cfg.size, cfg.size)?;
            AnnotatedImage::new(
                format!("syn{n:05}"),
                ImageSource::Synthetic(seed),
                image,
                persons,
                relations,
                cfg.classes,
            )
        })
        .collect()
}

fn cell_box(rng: &mut ChaCha8Rng, cell: usize) -> Result<PersonBox> {
    // one-pixel jitter at 32 px keeps each box inside its cell
    let j = 1.0 / (GRID as f64 * 8.0);
    let (cy, cx) = ((cell / GRID) as f64, (cell % GRID) as f64);
    let g = GRID as f64;
    PersonBox::new(
        (cx + rng.gen_range(0.0..j * 2.0)) / g,
        (cy + rng.gen_range(0.0..j * 2.0)) / g,
        (cx + 1.0 - rng.gen_range(0.0..j * 2.0)) / g,
        (cy + 1.0 - rng.gen_range(0.0..j * 2.0)) / g,
    )
}

fn chebyshev(a: usize, b: usize) -> usize {
    let (ay, ax) = ((a / GRID) as isize, (a % GRID) as isize);
    let (by, bx) = ((b / GRID) as isize, (b % GRID) as isize);
    (ay - by).unsigned_abs().max((ax - bx).unsigned_abs())
}

fn manhattan(a: usize, b: usize) -> usize {
    let (ay, ax) = ((a / GRID) as isize, (a % GRID) as isize);
    let (by, bx) = ((b / GRID) as isize, (b % GRID) as isize);
    (ay - by).unsigned_abs() + (ax - bx).unsigned_abs()
}

/// Places couples on free cells: near couples on edge-adjacent cells, far
/// couples at least two cells apart. A leftover person goes anywhere free.
fn layout(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    classes: &WeightedIndex<f64>,
) -> Result<(Vec<PersonBox>, Vec<Relation>)> {
    let persons = rng.gen_range(cfg.min_persons..=cfg.max_persons);
    let couples: Vec<(usize, bool)> = (0..persons / 2)
        .map(|_| (classes.sample(rng), rng.gen_bool(0.5)))
        .collect();
    for _ in 0..LAYOUT_ATTEMPTS {
        let mut free: Vec<usize> = (0..GRID * GRID).collect();
        free.shuffle(rng);
        let mut cells = Vec::with_capacity(persons);
        let mut ok = true;
        for &(_, near) in &couples {
            let a = free.pop().expect("grid holds every couple");
            let fits = |b: usize| {
                if near {
                    manhattan(a, b) == 1
                } else {
                    chebyshev(a, b) >= 2
                }
            };
            match free.iter().position(|&b| fits(b)) {
                Some(k) => {
                    let b = free.remove(k);
                    cells.push(a);
                    cells.push(b);
                }
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            continue;
        }
        if persons % 2 == 1 {
            cells.push(free.pop().expect("grid holds the odd person"));
        }
        // shuffle person order so couples are not always adjacent indices
        let mut order: Vec<usize> = (0..persons).collect();
        order.shuffle(rng);
        let mut boxes = vec![PersonBox::full(); persons];
        for (slot, &k) in order.iter().enumerate() {
            boxes[k] = cell_box(rng, cells[slot])?;
        }
        let relations = couples
            .iter()
            .enumerate()
            .map(|(n, &(class, _))| {
                let (i, j) = (order[2 * n], order[2 * n + 1]);
                Relation {
                    i: i.min(j),
                    j: i.max(j),
                    class,
                }
            })
            .collect();
        return Ok((boxes, relations));
    }
    Err(Error::config("could not place persons on the layout grid"))
}

fn is_near(a: &PersonBox, b: &PersonBox) -> bool {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    (ax - bx).hypot(ay - by) < NEAR_DISTANCE
}

fn palette(color: usize, colors: usize) -> [f64; 3] {
    let h = color as f64 / colors as f64 * 6.0;
    let (s, v) = (0.9, 0.9);
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn to_byte(v: f64) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0
}

/// Renders the scene for `seed`, boxes and labeled pairs. For each relation
/// the lower-indexed person draws a color `a` and the other gets
/// `(class − a − near) mod classes`, so the class equals
/// `(a + b + near) mod classes`. Unpaired persons get random colors. Pixel
/// values are multiples of 1/255.
pub fn render_synthetic(
    seed: u64,
    persons: &[PersonBox],
    relations: &[Relation],
    classes: usize,
    height: usize,
    width: usize,
) -> Result<Tensor<f32>> {
    if classes == 0 {
        return Err(Error::config("rendering needs at least one class"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed));
    let mut colors: Vec<Option<usize>> = vec![None; persons.len()];
    let mut sorted = relations.to_vec();
    sorted.sort();
    for r in &sorted {
        let (i, j) = (r.i.min(r.j), r.i.max(r.j));
        if i == j || j >= persons.len() {
            return Err(Error::data(format!(
                "cannot render pair ({}, {})",
                r.i, r.j
            )));
        }
        let near = is_near(&persons[i], &persons[j]) as usize;
        let a = *colors[i].get_or_insert_with(|| rng.gen_range(0..classes));
        let b = (r.class % classes + 2 * classes - a - near) % classes;
        colors[j].get_or_insert(b);
    }
    let colors: Vec<usize> = colors
        .into_iter()
        .map(|c| c.unwrap_or_else(|| rng.gen_range(0..classes)))
        .collect();

    let mut img = Tensor::zeros(&[3, height, width]);
    let data = img.data_mut();
    let plane = height * width;
    for y in 0..height {
        for x in 0..width {
            let base = 0.45 + rng.gen_range(-0.06..0.06);
            for c in 0..3 {
                data[c * plane + y * width + x] = to_byte(base);
            }
        }
    }
    for (p, b) in persons.iter().enumerate() {
        let cells = b.to_cells(height, width);
        let rgb = palette(colors[p], classes);
        for y in cells.y0..cells.y1 {
            for x in cells.x0..cells.x1 {
                for c in 0..3 {
                    data[c * plane + y * width + x] = to_byte(rgb[c] + rng.gen_range(-0.03..0.03));
                }
            }
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_reproducible() {
        let cfg = SynthConfig {
            images: 5,
            ..SynthConfig::default()
        };
        assert_eq!(
            generate_synthetic(&cfg).unwrap(),
            generate_synthetic(&cfg).unwrap()
        );
    }

    #[test]
    fn render_matches_generated_pixels() {
        let cfg = SynthConfig {
            images: 4,
            max_persons: 5,
            ..SynthConfig::default()
        };
        for im in generate_synthetic(&cfg).unwrap() {
            let ImageSource::Synthetic(seed) = im.source else {
                unreachable!()
            };
            let again = render_synthetic(seed, &im.persons, &im.relations, 6, 32, 32).unwrap();
            assert_eq!(again, im.image);
        }
    }

    #[test]
    fn labels_follow_color_rule() {
        let cfg = SynthConfig {
            images: 20,
            max_persons: 6,
            ..SynthConfig::default()
        };
        for im in generate_synthetic(&cfg).unwrap() {
            assert!((cfg.min_persons..=cfg.max_persons).contains(&im.persons()));
            assert_eq!(im.relations.len(), im.persons() / 2);
            for r in &im.relations {
                assert!(r.i < r.j);
                assert!(r.class < cfg.classes);
            }
            assert!(im.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn near_and_far_layouts_are_separated() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for a in 0..GRID * GRID {
            for b in 0..GRID * GRID {
                if a == b || (manhattan(a, b) != 1 && chebyshev(a, b) < 2) {
                    continue;
                }
                let (p, q) = (
                    cell_box(&mut rng, a).unwrap(),
                    cell_box(&mut rng, b).unwrap(),
                );
                assert_eq!(is_near(&p, &q), manhattan(a, b) == 1, "{a} {b}");
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            SynthConfig {
                min_persons: 1,
                ..SynthConfig::default()
            },
            SynthConfig {
                max_persons: 9,
                ..SynthConfig::default()
            },
            SynthConfig {
                imbalance: Some(vec![0.5, 0.5]),
                ..SynthConfig::default()
            },
            SynthConfig {
                imbalance: Some(vec![0.5, 0.5, 0.5, 0.0, 0.0, 0.0]),
                ..SynthConfig::default()
            },
            SynthConfig {
                images: 0,
                ..SynthConfig::default()
            },
            SynthConfig {
                size: 30,
                ..SynthConfig::default()
            },
        ];
        for cfg in bad {
            assert!(generate_synthetic(&cfg).is_err(), "{cfg:?}");
        }
    }
}
