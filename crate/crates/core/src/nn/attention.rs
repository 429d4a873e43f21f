//! Single-head scaled dot-product self-attention with a residual connection.
//!
//! Sequences are processed as a ragged batch: all rows are stacked into one
//! matrix so the four projections run as single matmuls, and only the
//! softmax is done per [`Segment`].

use ndarray::{s, Array2, Axis};
use rand::Rng;

use super::{shape_err, LinearLayer, NnError, Param, Parameterized, Projector};

/// Rows `start..start + len` of the stacked input form one sequence; its
/// first `keys` rows are the positions that may be attended to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
    pub keys: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlock {
    pub query: Projector,
    pub key: Projector,
    pub value: Projector,
    pub output: Projector,
}

/// Activations recorded by [`AttentionBlock::forward_segments`].
#[derive(Debug, Clone)]
pub struct AttentionCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    context: Array2<f64>,
    probs: Vec<Array2<f64>>,
    segments: Vec<Segment>,
}

impl AttentionBlock {
    pub fn new<R: Rng + ?Sized>(name: &str, dim: usize, rng: &mut R) -> Self {
        let mut proj = |p: &str| Projector::Plain(LinearLayer::new(&format!("{name}.{p}"), dim, dim, rng));
        Self { query: proj("query"), key: proj("key"), value: proj("value"), output: proj("output") }
    }

    /// Adds rank-`r` adapters to the query and key projectors, freezing their bases.
    pub fn attach_lora<R: Rng + ?Sized>(&mut self, r: usize, rng: &mut R) -> Result<(), NnError> {
        self.query.attach_lora(r, rng)?;
        self.key.attach_lora(r, rng)
    }

    pub fn dim(&self) -> usize {
        self.query.input_dim()
    }

    fn scale(&self) -> f64 {
        1.0 / (self.dim() as f64).sqrt()
    }

    /// One sequence with a contiguous true-prefix mask. Every row (padding
    /// included) attends only to the mask-true positions.
    pub fn attention_forward(&self, x: &Array2<f64>, mask: &[bool]) -> Result<Array2<f64>, NnError> {
        if mask.len() != x.nrows() {
            return Err(shape_err("attention mask", x.nrows(), mask.len()));
        }
        let keys = mask.iter().take_while(|&&m| m).count();
        if mask[keys..].iter().any(|&m| m) {
            return Err(NnError::NonContiguousMask);
        }
        if keys == 0 {
            return Err(NnError::EmptyMask);
        }
        let seg = Segment { start: 0, len: x.nrows(), keys };
        Ok(self.forward_segments(x, &[seg])?.0)
    }

    pub fn forward_segments(
        &self,
        x: &Array2<f64>,
        segments: &[Segment],
    ) -> Result<(Array2<f64>, AttentionCache), NnError> {
        for seg in segments {
            if seg.keys == 0 || seg.keys > seg.len || seg.start + seg.len > x.nrows() {
                return Err(shape_err("attention segment", format!("within {} rows", x.nrows()), format!("{seg:?}")));
            }
        }
        let q = self.query.forward(x)?;
        let k = self.key.forward(x)?;
        let v = self.value.forward(x)?;
        let scale = self.scale();
        let mut context = Array2::zeros(x.raw_dim());
        let mut probs = Vec::with_capacity(segments.len());
        for seg in segments {
            let rows = seg.start..seg.start + seg.len;
            let keys = seg.start..seg.start + seg.keys;
            let scores = q.slice(s![rows.clone(), ..]).dot(&k.slice(s![keys.clone(), ..]).t()) * scale;
            let p = softmax_rows(scores);
            context.slice_mut(s![rows, ..]).assign(&p.dot(&v.slice(s![keys, ..])));
            probs.push(p);
        }
        let out = x + &self.output.forward(&context)?;
        let cache = AttentionCache { x: x.clone(), q, k, v, context, probs, segments: segments.to_vec() };
        Ok((out, cache))
    }

    /// Accumulates parameter gradients; returns `dL/dX`.
    pub fn backward(&mut self, cache: &AttentionCache, dout: &Array2<f64>) -> Array2<f64> {
        let scale = self.scale();
        let dcontext = self.output.backward(&cache.context, dout);
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for (seg, p) in cache.segments.iter().zip(&cache.probs) {
            let rows = seg.start..seg.start + seg.len;
            let keys = seg.start..seg.start + seg.keys;
            let dctx = dcontext.slice(s![rows.clone(), ..]);
            let vs = cache.v.slice(s![keys.clone(), ..]);
            let dp = dctx.dot(&vs.t());
            dv.slice_mut(s![keys.clone(), ..]).scaled_add(1.0, &p.t().dot(&dctx));
            // softmax backward: dS = P * (dP - rowsum(dP * P))
            let inner = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
            let ds = (dp - &inner) * p * scale;
            dq.slice_mut(s![rows.clone(), ..]).scaled_add(1.0, &ds.dot(&cache.k.slice(s![keys.clone(), ..])));
            dk.slice_mut(s![keys, ..]).scaled_add(1.0, &ds.t().dot(&cache.q.slice(s![rows, ..])));
        }
        let mut dx = dout.clone();
        dx += &self.query.backward(&cache.x, &dq);
        dx += &self.key.backward(&cache.x, &dk);
        dx += &self.value.backward(&cache.x, &dv);
        dx
    }
}

pub(crate) fn softmax_rows(mut m: Array2<f64>) -> Array2<f64> {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    m
}

impl Parameterized for AttentionBlock {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.query.visit(f);
        self.key.visit(f);
        self.value.visit(f);
        self.output.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.query.visit_mut(f);
        self.key.visit_mut(f);
        self.value.visit_mut(f);
        self.output.visit_mut(f);
    }
}
