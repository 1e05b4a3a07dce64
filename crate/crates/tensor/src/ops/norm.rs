use std::rc::Rc;

use crate::{Real, Tensor, Var};

impl<'g, T: Real> Var<'g, T> {
    /// Per-sample, per-channel normalization over the spatial axes, no affine
    /// parameters.
    pub fn instance_norm(self, eps: T) -> Var<'g, T> {
        let x = self.value();
        let (b, c, h, w) = x.nchw();
        let n = h * w;
        let nf = T::lit(n as f64);
        let mut xhat = vec![T::zero(); x.numel()];
        let mut inv_std = vec![T::zero(); b * c];
        for p in 0..b * c {
            let src = &x.data()[p * n..(p + 1) * n];
            let mean = src.iter().copied().sum::<T>() / nf;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[p] = is;
            for (o, &v) in xhat[p * n..(p + 1) * n].iter_mut().zip(src) {
                *o = (v - mean) * is;
            }
        }
        let y = Rc::new(Tensor::new(&[b, c, h, w], xhat));
        let yc = y.clone();
        let id = self.id;
        self.graph.push_op(
            y,
            &[id],
            Box::new(move |g, sink| {
                let dx = sink.buf(id);
                for p in 0..b * c {
                    let gp = &g[p * n..(p + 1) * n];
                    let yp = &yc.data()[p * n..(p + 1) * n];
                    let sum_g: T = gp.iter().copied().sum();
                    let sum_gy: T = gp.iter().zip(yp).map(|(&a, &b)| a * b).sum();
                    let scale = inv_std[p] / nf;
                    for ((o, &gv), &yv) in dx[p * n..(p + 1) * n].iter_mut().zip(gp).zip(yp) {
                        *o += scale * (nf * gv - sum_g - yv * sum_gy);
                    }
                }
            }),
        )
    }

    /// Divide each row of `[n, d]` by `max(|row|, eps)`.
    pub fn l2_normalize_rows(self, eps: T) -> Var<'g, T> {
        let x = self.value();
        assert_eq!(x.shape().len(), 2, "l2_normalize_rows expects [rows, dim]");
        let d = x.dim(1);
        normalize_groups(self, eps, x.dim(0), d)
    }

    /// Divide each pixel's channel vector of `[B, C, H, W]` by
    /// `max(|v|, eps)`.
    pub fn normalize_channels(self, eps: T) -> Var<'g, T> {
        let x = self.value();
        let (b, c, h, w) = x.nchw();
        let plane = h * w;
        // One group per (batch, pixel); elements of a group are `plane` apart.
        normalize_strided(self, eps, b, c, plane)
    }
}

fn norms_of<T: Real>(data: &[T], groups: usize, len: usize, index: impl Fn(usize, usize) -> usize) -> Vec<T> {
    (0..groups)
        .map(|gi| {
            (0..len)
                .map(|e| {
                    let v = data[index(gi, e)];
                    v * v
                })
                .sum::<T>()
                .sqrt()
        })
        .collect()
}

fn normalize_groups<'g, T: Real>(x: Var<'g, T>, eps: T, rows: usize, d: usize) -> Var<'g, T> {
    let xv = x.value();
    let norms = norms_of(xv.data(), rows, d, |r, e| r * d + e);
    let mut out = xv.data().to_vec();
    for (r, row) in out.chunks_mut(d).enumerate() {
        let s = T::one() / norms[r].max(eps);
        for v in row {
            *v *= s;
        }
    }
    let y = Rc::new(Tensor::new(xv.shape(), out));
    let yc = y.clone();
    let id = x.id;
    x.graph.push_op(
        y,
        &[id],
        Box::new(move |g, sink| {
            let dx = sink.buf(id);
            for r in 0..rows {
                let gr = &g[r * d..(r + 1) * d];
                let yr = &yc.data()[r * d..(r + 1) * d];
                let dxr = &mut dx[r * d..(r + 1) * d];
                if norms[r] > eps {
                    let inv = T::one() / norms[r];
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((o, &gv), &yv) in dxr.iter_mut().zip(gr).zip(yr) {
                        *o += (gv - yv * dot) * inv;
                    }
                } else {
                    let inv = T::one() / eps;
                    for (o, &gv) in dxr.iter_mut().zip(gr) {
                        *o += gv * inv;
                    }
                }
            }
        }),
    )
}

fn normalize_strided<'g, T: Real>(x: Var<'g, T>, eps: T, batch: usize, c: usize, plane: usize) -> Var<'g, T> {
    let xv = x.value();
    let idx = move |gi: usize, e: usize| {
        let (b, p) = (gi / plane, gi % plane);
        (b * c + e) * plane + p
    };
    let groups = batch * plane;
    let norms = norms_of(xv.data(), groups, c, idx);
    let mut out = xv.data().to_vec();
    for gi in 0..groups {
        let s = T::one() / norms[gi].max(eps);
        for e in 0..c {
            out[idx(gi, e)] *= s;
        }
    }
    let y = Rc::new(Tensor::new(xv.shape(), out));
    let yc = y.clone();
    let id = x.id;
    x.graph.push_op(
        y,
        &[id],
        Box::new(move |g, sink| {
            let dx = sink.buf(id);
            let yd = yc.data();
            for gi in 0..groups {
                if norms[gi] > eps {
                    let inv = T::one() / norms[gi];
                    let dot: T = (0..c).map(|e| g[idx(gi, e)] * yd[idx(gi, e)]).sum();
                    for e in 0..c {
                        let k = idx(gi, e);
                        dx[k] += (g[k] - yd[k] * dot) * inv;
                    }
                } else {
                    let inv = T::one() / eps;
                    for e in 0..c {
                        let k = idx(gi, e);
                        dx[k] += g[k] * inv;
                    }
                }
            }
        }),
    )
}
