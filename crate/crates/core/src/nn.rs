//! Transformer building blocks on the autodiff graph.

use ndarray::Array2;

use crate::autodiff::{Graph, Var};
use crate::params::Binder;

/// Per-row rotary angles for queries and keys, one column per head pair.
pub(crate) struct RopeAngles<'a> {
    pub q: &'a Array2<f64>,
    pub k: &'a Array2<f64>,
}

pub(crate) struct Attention<'a> {
    /// Tensor name prefix; projections live at `{prefix}.wq` etc.
    pub prefix: &'a str,
    pub heads: usize,
    pub rope: Option<RopeAngles<'a>>,
    /// Additive score mask (`0` or `-inf`), `queries x keys`.
    pub mask: Option<&'a Array2<f64>>,
}

impl Attention<'_> {
    pub fn forward(&self, g: &mut Graph, p: &mut Binder<'_>, queries: Var, keys: Var) -> Var {
        let wq = p.var(g, &format!("{}.wq", self.prefix));
        let wk = p.var(g, &format!("{}.wk", self.prefix));
        let wv = p.var(g, &format!("{}.wv", self.prefix));
        let wo = p.var(g, &format!("{}.wo", self.prefix));
        let q = g.matmul(queries, wq);
        let k = g.matmul(keys, wk);
        let v = g.matmul(keys, wv);
        let inner = g.value(q).ncols();
        assert_eq!(inner % self.heads, 0, "attention width not divisible by heads");
        let head_dim = inner / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mask = self.mask.map(|m| g.constant(m.clone()));
        let mut outputs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let mut qh = g.slice_cols(q, h * head_dim, head_dim);
            let mut kh = g.slice_cols(k, h * head_dim, head_dim);
            let vh = g.slice_cols(v, h * head_dim, head_dim);
            if let Some(rope) = &self.rope {
                qh = g.rope(qh, rope.q.clone());
                kh = g.rope(kh, rope.k.clone());
            }
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt);
            let mut scores = g.scale(scores, scale);
            if let Some(m) = mask {
                scores = g.add(scores, m);
            }
            let probs = g.softmax(scores);
            outputs.push(g.matmul(probs, vh));
        }
        let merged = g.concat_cols(&outputs);
        g.matmul(merged, wo)
    }
}

pub(crate) fn rms_norm(g: &mut Graph, p: &mut Binder<'_>, name: &str, x: Var) -> Var {
    let gain = p.var(g, name);
    g.rms_norm(x, gain)
}

/// `gelu(x W1) W2`.
pub(crate) fn feed_forward(g: &mut Graph, p: &mut Binder<'_>, prefix: &str, x: Var) -> Var {
    let w1 = p.var(g, &format!("{prefix}.w1"));
    let w2 = p.var(g, &format!("{prefix}.w2"));
    let h = g.matmul(x, w1);
    let h = g.gelu(h);
    g.matmul(h, w2)
}

pub(crate) fn linear(g: &mut Graph, p: &mut Binder<'_>, name: &str, x: Var) -> Var {
    let w = p.var(g, name);
    g.matmul(x, w)
}
