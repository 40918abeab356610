//! Graph query module: message passing over the complete person graph.
//!
//! Vertices start from projected person features, every edge from the
//! projected global feature. Each iteration first refreshes edges from the
//! current vertices, then updates vertices from the refreshed edges:
//!
//! ```text
//! e_ij ← relu(W·h_i + W·h_j + W_e·e_ij)
//! h_i  ← h_i + relu(V·h_i + mean_{j≠i}(e_ij ⊙ V·h_j))
//! ```
//!
//! Edges are stored as rows in ordered-pair order `(0,1), (0,2), …, (1,0), …`,
//! skipping the diagonal.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamBuilder, ParamGroup, ParamId};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryMode {
    /// `q_ij = [h_i; h_j]`
    Concat,
    /// `q_ij = e_ij`
    Edge,
}

/// Ordered pairs `(i, j)`, `i ≠ j`, in edge-row order.
pub fn ordered_pairs(persons: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(persons * persons.saturating_sub(1));
    for i in 0..persons {
        for j in 0..persons {
            if i != j {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Edge row of the ordered pair `(i, j)`.
pub fn pair_row(i: usize, j: usize, persons: usize) -> usize {
    debug_assert!(i != j && i < persons && j < persons);
    i * (persons - 1) + if j < i { j } else { j - 1 }
}

#[derive(Debug, Clone, Copy)]
pub struct RelationGraph {
    pub persons: usize,
    pub width: usize,
    /// `[P × d]`
    pub vertices: Var,
    /// `[P(P−1) × d]`
    pub edges: Var,
}

#[derive(Debug, Clone)]
pub struct GqmLayer {
    pub w_edge_h: ParamId,
    pub w_e: ParamId,
    pub w_vertex_h: ParamId,
}

#[derive(Debug, Clone)]
pub struct Gqm {
    vertex_proj_w: ParamId,
    vertex_proj_b: ParamId,
    edge_proj_w: ParamId,
    edge_proj_b: ParamId,
    layers: Vec<GqmLayer>,
    width: usize,
}

impl Gqm {
    pub fn new<T: Real>(
        b: &mut ParamBuilder<'_, T>,
        person_dim: usize,
        global_dim: usize,
        width: usize,
        iterations: usize,
    ) -> Self {
        let g = ParamGroup::Rest;
        let vertex_proj_w = b.uniform(
            "gqm.proj_vertex.weight",
            &[width, person_dim],
            person_dim,
            g,
        );
        let vertex_proj_b = b.zeros("gqm.proj_vertex.bias", &[width], g);
        let edge_proj_w = b.uniform("gqm.proj_edge.weight", &[width, global_dim], global_dim, g);
        let edge_proj_b = b.zeros("gqm.proj_edge.bias", &[width], g);
        let layers = (0..iterations)
            .map(|t| GqmLayer {
                w_edge_h: b.uniform(&format!("gqm.t{t}.w_edge_h"), &[width, width], width, g),
                w_e: b.uniform(&format!("gqm.t{t}.w_e"), &[width, width], width, g),
                w_vertex_h: b.uniform(&format!("gqm.t{t}.w_vertex_h"), &[width, width], width, g),
            })
            .collect();
        Self {
            vertex_proj_w,
            vertex_proj_b,
            edge_proj_w,
            edge_proj_b,
            layers,
            width,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn layers(&self) -> &[GqmLayer] {
        &self.layers
    }

    /// Builds the initial graph from person features `[P × in]` and the
    /// global feature `[in_g]`.
    pub fn init<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        person_features: Var,
        global_feature: Var,
    ) -> Result<RelationGraph> {
        let persons = tape.shape(person_features)[0];
        if persons < 2 {
            return Err(Error::TooFewPersons(persons));
        }
        let vertices = tape.linear(
            person_features,
            p.var(self.vertex_proj_w),
            Some(p.var(self.vertex_proj_b)),
        )?;
        let g_dim = tape.shape(global_feature).iter().product();
        let global = tape.reshape(global_feature, &[1, g_dim])?;
        let e0 = tape.linear(
            global,
            p.var(self.edge_proj_w),
            Some(p.var(self.edge_proj_b)),
        )?;
        let edges = tape.gather_rows(e0, &vec![Some(0); persons * (persons - 1)])?;
        Ok(RelationGraph {
            persons,
            width: self.width,
            vertices,
            edges,
        })
    }

    /// Runs every iteration.
    pub fn run<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        mut graph: RelationGraph,
    ) -> Result<RelationGraph> {
        for layer in &self.layers {
            graph.edges = edge_update(tape, p, &graph, layer)?;
            graph.vertices = vertex_update(tape, p, &graph, layer)?;
        }
        Ok(graph)
    }
}

fn check_graph<T: Real>(tape: &Tape<T>, g: &RelationGraph) -> Result<()> {
    let n = g.persons;
    if tape.shape(g.vertices) != [n, g.width]
        || tape.shape(g.edges) != [n * n.saturating_sub(1), g.width]
    {
        return Err(Error::shape(format!(
            "graph with {n} persons and width {} has vertices {:?} and edges {:?}",
            g.width,
            tape.shape(g.vertices),
            tape.shape(g.edges)
        )));
    }
    Ok(())
}

/// `e_ij ← relu(W·h_i + W·h_j + W_e·e_ij)` for every ordered pair, from the
/// current vertex states.
pub fn edge_update<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    g: &RelationGraph,
    layer: &GqmLayer,
) -> Result<Var> {
    check_graph(tape, g)?;
    let pairs = ordered_pairs(g.persons);
    let wh = tape.linear(g.vertices, p.var(layer.w_edge_h), None)?;
    let from: Vec<_> = pairs.iter().map(|&(i, _)| Some(i)).collect();
    let to: Vec<_> = pairs.iter().map(|&(_, j)| Some(j)).collect();
    let wh_i = tape.gather_rows(wh, &from)?;
    let wh_j = tape.gather_rows(wh, &to)?;
    let we = tape.linear(g.edges, p.var(layer.w_e), None)?;
    let s = tape.add(wh_i, wh_j)?;
    let s = tape.add(s, we)?;
    Ok(tape.relu(s))
}

/// `h_i ← h_i + relu(V·h_i + (1/(P−1))·Σ_{j≠i} e_ij ⊙ V·h_j)`, consuming the
/// already-updated edges in `g`.
pub fn vertex_update<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    g: &RelationGraph,
    layer: &GqmLayer,
) -> Result<Var> {
    check_graph(tape, g)?;
    let n = g.persons;
    if n < 2 {
        return Err(Error::TooFewPersons(n));
    }
    let pairs = ordered_pairs(n);
    let vh = tape.linear(g.vertices, p.var(layer.w_vertex_h), None)?;
    let to: Vec<_> = pairs.iter().map(|&(_, j)| Some(j)).collect();
    let vh_j = tape.gather_rows(vh, &to)?;
    let messages = tape.mul(g.edges, vh_j)?;

    let mut segments = Tensor::zeros(&[n, pairs.len()]);
    for (row, &(i, _)) in pairs.iter().enumerate() {
        segments.data_mut()[i * pairs.len() + row] = T::one();
    }
    let segments = tape.constant(segments);
    let summed = tape.matmul(segments, messages)?;
    let mean = tape.mul_scalar(summed, T::one() / T::lit((n - 1) as f64));

    let z = tape.add(vh, mean)?;
    let z = tape.relu(z);
    tape.add(g.vertices, z)
}

/// Relation queries on the full `P×P` grid `[P² × q_dim]`; diagonal rows are
/// zero and flagged invalid in the returned mask.
pub fn extract_queries<T: Real>(
    tape: &mut Tape<T>,
    g: &RelationGraph,
    mode: QueryMode,
) -> Result<(Var, Vec<bool>)> {
    check_graph(tape, g)?;
    let n = g.persons;
    let pairs = ordered_pairs(n);
    let rows = match mode {
        QueryMode::Edge => g.edges,
        QueryMode::Concat => {
            let from: Vec<_> = pairs.iter().map(|&(i, _)| Some(i)).collect();
            let to: Vec<_> = pairs.iter().map(|&(_, j)| Some(j)).collect();
            let hi = tape.gather_rows(g.vertices, &from)?;
            let hj = tape.gather_rows(g.vertices, &to)?;
            tape.concat(&[hi, hj], 1)?
        }
    };
    let mut index = Vec::with_capacity(n * n);
    let mut valid = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                index.push(None);
                valid.push(false);
            } else {
                index.push(Some(pair_row(i, j, n)));
                valid.push(true);
            }
        }
    }
    Ok((tape.gather_rows(rows, &index)?, valid))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::params::ParamStore;

    fn identity(d: usize) -> Tensor<f64> {
        Tensor::from_fn(&[d, d], |k| if k / d == k % d { 1.0 } else { 0.0 })
    }

    fn module(d: usize) -> (ParamStore<f64>, Gqm) {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gqm = Gqm::new(
            &mut ParamBuilder {
                store: &mut store,
                rng: &mut rng,
            },
            3,
            3,
            d,
            1,
        );
        (store, gqm)
    }

    #[test]
    fn pair_rows_enumerate_in_order() {
        let n = 4;
        for (row, (i, j)) in ordered_pairs(n).into_iter().enumerate() {
            assert_eq!(pair_row(i, j, n), row);
        }
    }

    #[test]
    fn hand_edge_update() {
        let (mut store, gqm) = module(2);
        let layer = gqm.layers()[0].clone();
        *store.get_mut(layer.w_edge_h) = identity(2);
        *store.get_mut(layer.w_e) = identity(2);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false, false);
        let h = tape.constant(Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.0, 1.0]).unwrap());
        let e = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap());
        let g = RelationGraph {
            persons: 2,
            width: 2,
            vertices: h,
            edges: e,
        };
        let out = edge_update(&mut tape, &p, &g, &layer).unwrap();
        assert_eq!(&tape.value(out).data()[..2], &[2.0, 0.0]);
    }

    #[test]
    fn zero_parameters_zero_edges_and_keep_vertices() {
        let (mut store, gqm) = module(3);
        for v in store.values_mut() {
            v.data_mut().fill(0.0);
        }
        let layer = gqm.layers()[0].clone();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false, false);
        let h = tape.constant(Tensor::from_fn(&[3, 3], |k| k as f64 - 4.0));
        let e = tape.constant(Tensor::from_fn(&[6, 3], |k| k as f64 * 0.5));
        let mut g = RelationGraph {
            persons: 3,
            width: 3,
            vertices: h,
            edges: e,
        };
        g.edges = edge_update(&mut tape, &p, &g, &layer).unwrap();
        assert!(tape.value(g.edges).data().iter().all(|&v| v == 0.0));
        let v = vertex_update(&mut tape, &p, &g, &layer).unwrap();
        assert_eq!(tape.value(v), tape.value(h));
    }

    #[test]
    fn single_person_is_too_small() {
        let (store, gqm) = module(2);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false, false);
        let x = tape.constant(Tensor::zeros(&[1, 3]));
        let gx = tape.constant(Tensor::zeros(&[3]));
        assert!(matches!(
            gqm.init(&mut tape, &p, x, gx),
            Err(Error::TooFewPersons(1))
        ));
    }

    #[test]
    fn concat_query_layout() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let e = tape.constant(Tensor::zeros(&[2, 2]));
        let g = RelationGraph {
            persons: 2,
            width: 2,
            vertices: h,
            edges: e,
        };
        let (q, valid) = extract_queries(&mut tape, &g, QueryMode::Concat).unwrap();
        assert_eq!(tape.shape(q), &[4, 4]);
        assert_eq!(valid, vec![false, true, true, false]);
        assert_eq!(&tape.value(q).data()[4..8], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(&tape.value(q).data()[8..12], &[3.0, 4.0, 1.0, 2.0]);
        assert!(tape.value(q).data()[..4].iter().all(|&v| v == 0.0));

        let (qe, _) = extract_queries(&mut tape, &g, QueryMode::Edge).unwrap();
        assert_eq!(tape.shape(qe)[1] * 2, tape.shape(q)[1]);
    }
}
