use std::rc::Rc;

use super::same_graph;
use crate::{Real, Tensor, Var};

impl<'g, T: Real> Var<'g, T> {
    /// Concatenate `[B, C_i, H, W]` tensors along the channel axis.
    pub fn concat_channels(parts: &[Var<'g, T>]) -> Var<'g, T> {
        assert!(!parts.is_empty(), "concat of nothing");
        let graph = parts[0].graph;
        let values: Vec<Rc<Tensor<T>>> = parts
            .iter()
            .map(|p| {
                same_graph(&parts[0], p);
                p.value()
            })
            .collect();
        let (b, _, h, w) = values[0].nchw();
        let chans: Vec<usize> = values
            .iter()
            .map(|v| {
                let (vb, c, vh, vw) = v.nchw();
                assert_eq!((vb, vh, vw), (b, h, w), "concat_channels extent mismatch");
                c
            })
            .collect();
        let total: usize = chans.iter().sum();
        let plane = h * w;
        let mut out = Vec::with_capacity(b * total * plane);
        for n in 0..b {
            for (v, &c) in values.iter().zip(&chans) {
                out.extend_from_slice(&v.data()[n * c * plane..(n + 1) * c * plane]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let ids_c = ids.clone();
        graph.push_op(
            Rc::new(Tensor::new(&[b, total, h, w], out)),
            &ids,
            Box::new(move |g, sink| {
                let mut offset = 0;
                for (&id, &c) in ids_c.iter().zip(&chans) {
                    if sink.wants(id) {
                        let buf = sink.buf(id);
                        for n in 0..b {
                            let src = &g[(n * total + offset) * plane..(n * total + offset + c) * plane];
                            for (o, &v) in buf[n * c * plane..(n + 1) * c * plane].iter_mut().zip(src) {
                                *o += v;
                            }
                        }
                    }
                    offset += c;
                }
            }),
        )
    }

    /// Pick feature vectors out of `[B, C, H, W]`; `index[r] = b * H * W + y * W + x`
    /// selects row `r` of the `[index.len(), C]` result.
    pub fn gather_pixels(self, index: &[usize]) -> Var<'g, T> {
        let x = self.value();
        let (b, c, h, w) = x.nchw();
        let plane = h * w;
        let mut out = vec![T::zero(); index.len() * c];
        for (r, &k) in index.iter().enumerate() {
            assert!(k < b * plane, "pixel index {k} out of range");
            let (n, p) = (k / plane, k % plane);
            for ch in 0..c {
                out[r * c + ch] = x.data()[(n * c + ch) * plane + p];
            }
        }
        let index = index.to_vec();
        let id = self.id;
        self.graph.push_op(
            Rc::new(Tensor::new(&[index.len(), c], out)),
            &[id],
            Box::new(move |g, sink| {
                let dx = sink.buf(id);
                for (r, &k) in index.iter().enumerate() {
                    let (n, p) = (k / plane, k % plane);
                    for ch in 0..c {
                        dx[(n * c + ch) * plane + p] += g[r * c + ch];
                    }
                }
            }),
        )
    }

    /// Rows of a `[n, d]` tensor, with repetition allowed.
    pub fn gather_rows(self, index: &[usize]) -> Var<'g, T> {
        let x = self.value();
        assert_eq!(x.shape().len(), 2, "gather_rows expects [rows, dim]");
        let (n, d) = (x.dim(0), x.dim(1));
        let mut out = Vec::with_capacity(index.len() * d);
        for &r in index {
            assert!(r < n, "row {r} out of range {n}");
            out.extend_from_slice(&x.data()[r * d..(r + 1) * d]);
        }
        let index = index.to_vec();
        let id = self.id;
        self.graph.push_op(
            Rc::new(Tensor::new(&[index.len(), d], out)),
            &[id],
            Box::new(move |g, sink| {
                let dx = sink.buf(id);
                for (i, &r) in index.iter().enumerate() {
                    for (o, &v) in dx[r * d..(r + 1) * d].iter_mut().zip(&g[i * d..(i + 1) * d]) {
                        *o += v;
                    }
                }
            }),
        )
    }

    /// `self: [S, D]`, `keys: [S * M, D]` -> `[S, M]` with
    /// `out[s, m] = self[s] . keys[s * M + m]`.
    pub fn row_dots(self, keys: Var<'g, T>, per_row: usize) -> Var<'g, T> {
        same_graph(&self, &keys);
        let q = self.value();
        let k = keys.value();
        let (s, d) = (q.dim(0), q.dim(1));
        assert_eq!(k.shape(), &[s * per_row, d], "row_dots key shape");
        let mut out = vec![T::zero(); s * per_row];
        for i in 0..s {
            let qi = &q.data()[i * d..(i + 1) * d];
            for m in 0..per_row {
                let kr = &k.data()[(i * per_row + m) * d..(i * per_row + m + 1) * d];
                out[i * per_row + m] = qi.iter().zip(kr).map(|(&a, &b)| a * b).sum();
            }
        }
        let (iq, ik) = (self.id, keys.id);
        self.graph.push_op(
            Rc::new(Tensor::new(&[s, per_row], out)),
            &[iq, ik],
            Box::new(move |g, sink| {
                if sink.wants(iq) {
                    let dq = sink.buf(iq);
                    for i in 0..s {
                        for m in 0..per_row {
                            let gv = g[i * per_row + m];
                            let kr = &k.data()[(i * per_row + m) * d..(i * per_row + m + 1) * d];
                            for (o, &kv) in dq[i * d..(i + 1) * d].iter_mut().zip(kr) {
                                *o += gv * kv;
                            }
                        }
                    }
                }
                if sink.wants(ik) {
                    let dk = sink.buf(ik);
                    for i in 0..s {
                        let qi = &q.data()[i * d..(i + 1) * d];
                        for m in 0..per_row {
                            let gv = g[i * per_row + m];
                            let row = &mut dk[(i * per_row + m) * d..(i * per_row + m + 1) * d];
                            for (o, &qv) in row.iter_mut().zip(qi) {
                                *o += gv * qv;
                            }
                        }
                    }
                }
            }),
        )
    }

    /// Per-row cross entropy against class 0 of `scale * logits`:
    /// `logsumexp(scale * l_s) - scale * l_s0`, computed with max-subtraction.
    /// `[S, M]` -> `[S]`.
    pub fn cross_entropy_first(self, scale: T) -> Var<'g, T> {
        let l = self.value();
        assert_eq!(l.shape().len(), 2, "cross_entropy_first expects [rows, classes]");
        let (s, m) = (l.dim(0), l.dim(1));
        assert!(m >= 1, "need at least the positive column");
        let mut probs = vec![T::zero(); s * m];
        let mut out = vec![T::zero(); s];
        for i in 0..s {
            let row = &l.data()[i * m..(i + 1) * m];
            let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b * scale));
            let mut z = T::zero();
            for (p, &v) in probs[i * m..(i + 1) * m].iter_mut().zip(row) {
                *p = (v * scale - mx).exp();
                z += *p;
            }
            for p in probs[i * m..(i + 1) * m].iter_mut() {
                *p /= z;
            }
            out[i] = (mx + z.ln() - row[0] * scale).max(T::zero());
        }
        let id = self.id;
        self.graph.push_op(
            Rc::new(Tensor::new(&[s], out)),
            &[id],
            Box::new(move |g, sink| {
                let dl = sink.buf(id);
                for i in 0..s {
                    for j in 0..m {
                        let target = if j == 0 { T::one() } else { T::zero() };
                        dl[i * m + j] += g[i] * scale * (probs[i * m + j] - target);
                    }
                }
            }),
        )
    }
}
