//! Transformer reasoning: one encoder layer over feature-map tokens, one
//! decoder layer over relation queries padded to `P²`, a linear pair
//! classifier and the `m + mᵀ` symmetrization.

use crate::error::{Error, Result};
use crate::fem::FeatureMap;
use crate::forward::ForwardCtx;
use crate::params::{Bound, ParamBuilder, ParamGroup, ParamId};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Additive score for masked keys; `exp` of it underflows to exactly zero.
const MASKED_SCORE: f64 = -1e9;

#[derive(Debug, Clone)]
struct Affine {
    w: ParamId,
    b: ParamId,
}

impl Affine {
    fn new<T: Real>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        Self {
            w: b.uniform(
                &format!("{name}.weight"),
                &[fan_out, fan_in],
                fan_in,
                ParamGroup::Rest,
            ),
            b: b.zeros(&format!("{name}.bias"), &[fan_out], ParamGroup::Rest),
        }
    }

    fn apply<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p.var(self.w), Some(p.var(self.b)))
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Affine,
    k: Affine,
    v: Affine,
    out: Affine,
    heads: usize,
    width: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Real>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        width: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "model width {width} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Affine::new(b, &format!("{name}.q"), width, width),
            k: Affine::new(b, &format!("{name}.k"), width, width),
            v: Affine::new(b, &format!("{name}.v"), width, width),
            out: Affine::new(b, &format!("{name}.out"), width, width),
            heads,
            width,
        })
    }

    /// Attends `queries [n×d]` over `keys_values [m×d]`. `key_valid`, when
    /// given, has length `m`; invalid keys get zero weight. Returns the output
    /// and the per-head attention matrices `[n×m]`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        queries: Var,
        keys_values: Var,
        key_valid: Option<&[bool]>,
    ) -> Result<(Var, Vec<Var>)> {
        let n = tape.shape(queries)[0];
        let m = tape.shape(keys_values)[0];
        for v in [queries, keys_values] {
            if tape.shape(v).len() != 2 || tape.shape(v)[1] != self.width {
                return Err(Error::shape(format!(
                    "attention expects width {}, got {:?}",
                    self.width,
                    tape.shape(v)
                )));
            }
        }
        let bias = match key_valid {
            Some(valid) => {
                if valid.len() != m {
                    return Err(Error::shape(format!(
                        "key mask of length {} for {m} keys",
                        valid.len()
                    )));
                }
                if !valid.iter().any(|&v| v) {
                    return Err(Error::shape("key mask has no valid key"));
                }
                let t = Tensor::from_fn(&[n, m], |k| {
                    if valid[k % m] {
                        T::zero()
                    } else {
                        T::lit(MASKED_SCORE)
                    }
                });
                Some(tape.constant(t))
            }
            None => None,
        };
        let q = self.q.apply(tape, p, queries)?;
        let k = self.k.apply(tape, p, keys_values)?;
        let v = self.v.apply(tape, p, keys_values)?;
        let head_width = self.width / self.heads;
        let scale = T::one() / T::lit(head_width as f64).sqrt();
        let mut outputs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * head_width, (h + 1) * head_width);
            let qh = tape.slice(q, 1, lo, hi)?;
            let kh = tape.slice(k, 1, lo, hi)?;
            let vh = tape.slice(v, 1, lo, hi)?;
            let kt = tape.transpose_last2(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let mut scores = tape.mul_scalar(scores, scale);
            if let Some(bias) = bias {
                scores = tape.add(scores, bias)?;
            }
            let attn = tape.softmax(scores)?;
            outputs.push(tape.matmul(attn, vh)?);
            weights.push(attn);
        }
        let joined = tape.concat(&outputs, 1)?;
        Ok((self.out.apply(tape, p, joined)?, weights))
    }
}

#[derive(Debug, Clone)]
struct FeedForward {
    up: Affine,
    down: Affine,
}

impl FeedForward {
    fn new<T: Real>(b: &mut ParamBuilder<'_, T>, name: &str, width: usize, hidden: usize) -> Self {
        Self {
            up: Affine::new(b, &format!("{name}.up"), width, hidden),
            down: Affine::new(b, &format!("{name}.down"), hidden, width),
        }
    }

    fn apply<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.up.apply(tape, p, x)?;
        let h = tape.relu(h);
        self.down.apply(tape, p, h)
    }
}

/// Decoder input: queries padded to the dataset-wide `P²` slots.
#[derive(Debug, Clone)]
pub struct QueryBatch {
    /// `[P² × q_dim]`
    pub queries: Var,
    /// `true` for `i ≠ j` with both `i, j < P_actual`.
    pub valid: Vec<bool>,
    pub max_persons: usize,
    pub persons: usize,
}

impl QueryBatch {
    /// Pads an `[n² × q_dim]` grid (as produced by the graph module) to
    /// `[P² × q_dim]` with zero rows.
    pub fn pad<T: Real>(
        tape: &mut Tape<T>,
        grid: Var,
        grid_valid: &[bool],
        persons: usize,
        max_persons: usize,
    ) -> Result<Self> {
        if persons > max_persons {
            return Err(Error::data(format!(
                "image has {persons} persons but the padded grid holds {max_persons}"
            )));
        }
        if tape.shape(grid)[0] != persons * persons || grid_valid.len() != persons * persons {
            return Err(Error::shape(format!(
                "query grid {:?} does not match {persons} persons",
                tape.shape(grid)
            )));
        }
        let mut index = Vec::with_capacity(max_persons * max_persons);
        let mut valid = Vec::with_capacity(max_persons * max_persons);
        for i in 0..max_persons {
            for j in 0..max_persons {
                let src = (i < persons && j < persons).then(|| i * persons + j);
                let ok = src.is_some_and(|s| grid_valid[s]);
                index.push(if ok { src } else { None });
                valid.push(ok);
            }
        }
        Ok(Self {
            queries: tape.gather_rows(grid, &index)?,
            valid,
            max_persons,
            persons,
        })
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Pair-class scores on the padded grid: `[P² × C]`, row `i·P + j`.
#[derive(Debug, Clone)]
pub struct LogitCube {
    pub logits: Var,
    pub max_persons: usize,
    pub classes: usize,
    pub valid: Vec<bool>,
}

impl LogitCube {
    pub fn slot(&self, i: usize, j: usize) -> usize {
        i * self.max_persons + j
    }
}

/// Fixed 2-D sinusoidal encoding `[H·W × d]`: the first half of the channels
/// encodes the row, the second half the column.
pub fn positional_encoding<T: Real>(height: usize, width: usize, d: usize) -> Result<Tensor<T>> {
    if !d.is_multiple_of(4) {
        return Err(Error::config(format!(
            "2-D sinusoidal encoding needs a width divisible by 4, got {d}"
        )));
    }
    let half = d / 2;
    let mut out = Tensor::zeros(&[height * width, d]);
    for y in 0..height {
        for x in 0..width {
            let row = &mut out.data_mut()[(y * width + x) * d..(y * width + x + 1) * d];
            for (offset, pos) in [(0, y), (half, x)] {
                for i in 0..half / 2 {
                    let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / half as f64);
                    let angle = pos as f64 * freq;
                    row[offset + 2 * i] = T::lit(angle.sin());
                    row[offset + 2 * i + 1] = T::lit(angle.cos());
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TrmConfig {
    pub feature_channels: usize,
    pub query_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub classes: usize,
}

#[derive(Debug, Clone)]
pub struct Trm {
    feature_proj: Affine,
    enc_attn: MultiHeadAttention,
    enc_ffn: FeedForward,
    query_proj: Affine,
    dec_self: MultiHeadAttention,
    dec_cross: MultiHeadAttention,
    dec_ffn: FeedForward,
    head: Affine,
    cfg: TrmConfig,
}

impl Trm {
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, cfg: TrmConfig) -> Result<Self> {
        let d = cfg.model_dim;
        Ok(Self {
            feature_proj: Affine::new(b, "trm.enc.input", cfg.feature_channels, d),
            enc_attn: MultiHeadAttention::new(b, "trm.enc.self_attn", d, cfg.heads)?,
            enc_ffn: FeedForward::new(b, "trm.enc.ffn", d, cfg.ffn_dim),
            query_proj: Affine::new(b, "trm.dec.input", cfg.query_dim, d),
            dec_self: MultiHeadAttention::new(b, "trm.dec.self_attn", d, cfg.heads)?,
            dec_cross: MultiHeadAttention::new(b, "trm.dec.cross_attn", d, cfg.heads)?,
            dec_ffn: FeedForward::new(b, "trm.dec.ffn", d, cfg.ffn_dim),
            head: Affine::new(b, "head.cls", d, cfg.classes),
            cfg,
        })
    }

    pub fn config(&self) -> &TrmConfig {
        &self.cfg
    }

    /// Encoder memory `[(H·W) × d_m]`.
    pub fn encode<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        f: &FeatureMap,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var> {
        if f.channels != self.cfg.feature_channels {
            return Err(Error::shape(format!(
                "encoder expects {} feature channels, got {}",
                self.cfg.feature_channels, f.channels
            )));
        }
        let tokens = tape.reshape(f.var, &[f.channels, f.height * f.width])?;
        let tokens = tape.transpose_last2(tokens)?;
        let x = self.feature_proj.apply(tape, p, tokens)?;
        let pos = tape.constant(positional_encoding(f.height, f.width, self.cfg.model_dim)?);
        let x = tape.add(x, pos)?;
        let (a, _) = self.enc_attn.forward(tape, p, x, x, None)?;
        let a = ctx.dropout(tape, a)?;
        let x = tape.add(x, a)?;
        let ff = self.enc_ffn.apply(tape, p, x)?;
        let ff = ctx.dropout(tape, ff)?;
        tape.add(x, ff)
    }

    /// Decoded slots `[P² × d_m]`. Invalid slots never reach valid ones.
    pub fn decode<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        batch: &QueryBatch,
        memory: Var,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var> {
        let slots = batch.max_persons * batch.max_persons;
        if tape.shape(batch.queries) != [slots, self.cfg.query_dim] || batch.valid.len() != slots {
            return Err(Error::shape(format!(
                "decoder expects {slots}×{} queries, got {:?} with {} mask entries",
                self.cfg.query_dim,
                tape.shape(batch.queries),
                batch.valid.len()
            )));
        }
        let x = self.query_proj.apply(tape, p, batch.queries)?;
        let (a, _) = self.dec_self.forward(tape, p, x, x, Some(&batch.valid))?;
        let a = ctx.dropout(tape, a)?;
        let x = tape.add(x, a)?;
        let (c, _) = self.dec_cross.forward(tape, p, x, memory, None)?;
        let c = ctx.dropout(tape, c)?;
        let x = tape.add(x, c)?;
        let ff = self.dec_ffn.apply(tape, p, x)?;
        let ff = ctx.dropout(tape, ff)?;
        tape.add(x, ff)
    }

    /// Linear pair classifier, optionally followed by `m ← m + mᵀ` over the
    /// two person axes for each class.
    pub fn classify<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        decoded: Var,
        batch: &QueryBatch,
        symmetrize: bool,
    ) -> Result<LogitCube> {
        let m = self.head.apply(tape, p, decoded)?;
        let logits = if symmetrize {
            tape.pair_symmetrize(m, batch.max_persons)?
        } else {
            m
        };
        Ok(LogitCube {
            logits,
            max_persons: batch.max_persons,
            classes: self.cfg.classes,
            valid: batch.valid.clone(),
        })
    }
}
