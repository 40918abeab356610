//! Reference implementations written as plain loops, shared by the
//! integration tests.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use relgraph::metrics::EvalRecord;
use relgraph::params::ParamStore;
use relgraph::Tensor;

pub type Matrix = Vec<Vec<f64>>;

pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// `w[out×in] · x`, accumulated from zero in input order.
pub fn matvec(w: &Tensor<f64>, x: &[f64]) -> Vec<f64> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    assert_eq!(cols, x.len());
    (0..rows)
        .map(|r| {
            let mut acc = 0.0;
            for (c, xv) in x.iter().enumerate() {
                acc += w.data()[r * cols + c] * xv;
            }
            acc
        })
        .collect()
}

fn param<'a>(store: &'a ParamStore<f64>, name: &str) -> &'a Tensor<f64> {
    store.get(
        store
            .find(name)
            .unwrap_or_else(|| panic!("no parameter {name}")),
    )
}

/// Graph state after message passing: vertices by person, edges by ordered
/// pair `(i, j)` in row-major `i·P + j` layout (diagonal unused).
pub struct OracleGraph {
    pub vertices: Matrix,
    pub edges: Vec<Vec<f64>>,
    pub persons: usize,
}

impl OracleGraph {
    pub fn edge(&self, i: usize, j: usize) -> &[f64] {
        &self.edges[i * self.persons + j]
    }
}

/// Graph query module as scalar loops, reading weights by name.
pub fn gqm_oracle(
    store: &ParamStore<f64>,
    persons: &Matrix,
    global: &[f64],
    iterations: usize,
) -> OracleGraph {
    let n = persons.len();
    let wv = param(store, "gqm.proj_vertex.weight");
    let bv = param(store, "gqm.proj_vertex.bias");
    let we0 = param(store, "gqm.proj_edge.weight");
    let be0 = param(store, "gqm.proj_edge.bias");
    let affine = |w: &Tensor<f64>, b: &Tensor<f64>, x: &[f64]| -> Vec<f64> {
        matvec(w, x)
            .iter()
            .zip(b.data())
            .map(|(a, b)| b + a)
            .collect()
    };
    let mut h: Matrix = persons.iter().map(|x| affine(wv, bv, x)).collect();
    let e0 = affine(we0, be0, global);
    let d = e0.len();
    let mut e: Vec<Vec<f64>> = vec![e0; n * n];

    for t in 0..iterations {
        let w = param(store, &format!("gqm.t{t}.w_edge_h"));
        let w_e = param(store, &format!("gqm.t{t}.w_e"));
        let v = param(store, &format!("gqm.t{t}.w_vertex_h"));

        let wh: Matrix = h.iter().map(|hi| matvec(w, hi)).collect();
        let mut next_e = e.clone();
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let wee = matvec(w_e, &e[i * n + j]);
                next_e[i * n + j] = (0..d).map(|a| relu(wh[i][a] + wh[j][a] + wee[a])).collect();
            }
        }
        e = next_e;

        let vh: Matrix = h.iter().map(|hi| matvec(v, hi)).collect();
        let scale = 1.0 / (n - 1) as f64;
        let mut next_h = h.clone();
        for i in 0..n {
            for a in 0..d {
                let mut sum = 0.0;
                for j in 0..n {
                    if j != i {
                        sum += e[i * n + j][a] * vh[j][a];
                    }
                }
                next_h[i][a] = h[i][a] + relu(vh[i][a] + sum * scale);
            }
        }
        h = next_h;
    }
    OracleGraph {
        vertices: h,
        edges: e,
        persons: n,
    }
}

/// Average precision of `class` by brute force: for every positive, the
/// precision among all records scoring at least as high.
pub fn brute_ap(records: &[EvalRecord], class: usize) -> Option<f64> {
    let positives: Vec<&EvalRecord> = records.iter().filter(|r| r.truth == class).collect();
    if positives.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for p in &positives {
        let s = p.scores[class];
        let above = records.iter().filter(|r| r.scores[class] >= s).count();
        let above_pos = records
            .iter()
            .filter(|r| r.scores[class] >= s && r.truth == class)
            .count();
        total += above_pos as f64 / above as f64;
    }
    Some(total / positives.len() as f64)
}

/// Mean AP in percent over classes with positives.
pub fn brute_map(records: &[EvalRecord], classes: usize) -> f64 {
    let aps: Vec<f64> = (0..classes).filter_map(|c| brute_ap(records, c)).collect();
    100.0 * aps.iter().sum::<f64>() / aps.len() as f64
}

/// Recall in percent per class, from arg-max with lowest-index ties.
pub fn brute_recall(records: &[EvalRecord], classes: usize) -> Vec<Option<f64>> {
    (0..classes)
        .map(|c| {
            let of_c: Vec<&EvalRecord> = records.iter().filter(|r| r.truth == c).collect();
            if of_c.is_empty() {
                return None;
            }
            let hits = of_c
                .iter()
                .filter(|r| {
                    let best = r.scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    r.scores.iter().position(|&s| s == best) == Some(c)
                })
                .count();
            Some(100.0 * hits as f64 / of_c.len() as f64)
        })
        .collect()
}

/// Records with scores drawn from a small grid so ties occur.
pub fn random_records(rng: &mut ChaCha8Rng, count: usize, classes: usize) -> Vec<EvalRecord> {
    let levels = rng.gen_range(2..12);
    (0..count)
        .map(|k| EvalRecord {
            scores: (0..classes)
                .map(|_| rng.gen_range(0..levels) as f64 / levels as f64)
                .collect(),
            truth: rng.gen_range(0..classes),
            image: k,
            pair: (0, 1),
        })
        .collect()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect()
}

pub fn flatten(m: &Matrix) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}
