use std::rc::Rc;

use super::same_graph;
use crate::linalg::{matmul, Mat};
use crate::{ConvGeometry, Real, Tensor, Var};

fn add_channel_bias<T: Real>(out: &mut [T], bias: &[T], plane: usize) {
    for (c, chunk) in out.chunks_mut(plane).enumerate() {
        let b = bias[c % bias.len()];
        for v in chunk {
            *v += b;
        }
    }
}

fn bias_grad<T: Real>(g: &[T], channels: usize, plane: usize, buf: &mut [T]) {
    for (idx, chunk) in g.chunks(plane).enumerate() {
        buf[idx % channels] += chunk.iter().copied().sum::<T>();
    }
}

impl<'g, T: Real> Var<'g, T> {
    /// 2-D cross-correlation with zero padding.
    ///
    /// `self: [B, Ci, H, W]`, `weight: [Co, Ci, k, k]`, `bias: [Co]`.
    pub fn conv2d(self, weight: Var<'g, T>, bias: Option<Var<'g, T>>, stride: usize, pad: usize) -> Var<'g, T> {
        same_graph(&self, &weight);
        let x = self.value();
        let w = weight.value();
        let (batch, ci, h, wd) = x.nchw();
        let (co, wci, k, k2) = w.nchw();
        assert_eq!(ci, wci, "conv2d input channels {ci} vs weight {wci}");
        assert_eq!(k, k2, "square kernels only");
        let geo = ConvGeometry::new(ci, h, wd, k, stride, pad);
        let plane = geo.col_cols();
        let kk = geo.col_rows();

        let mut out = vec![T::zero(); batch * co * plane];
        let mut cols = vec![T::zero(); kk * plane];
        for b in 0..batch {
            geo.im2col(&x.data()[b * geo.image_len()..(b + 1) * geo.image_len()], &mut cols);
            matmul(
                Mat::new(w.data(), co, kk),
                Mat::new(&cols, kk, plane),
                &mut out[b * co * plane..(b + 1) * co * plane],
                T::zero(),
            );
        }
        let bias_val = bias.map(|b| b.value());
        if let Some(bv) = &bias_val {
            assert_eq!(bv.numel(), co, "conv2d bias length");
            add_channel_bias(&mut out, bv.data(), plane);
        }
        let out = Tensor::new(&[batch, co, geo.out_h, geo.out_w], out);

        let (ix, iw) = (self.id, weight.id);
        let ib = bias.map(|b| b.id);
        let mut parents = vec![ix, iw];
        parents.extend(ib);
        self.graph.push_op(
            Rc::new(out),
            &parents,
            Box::new(move |g, sink| {
                let want_x = sink.wants(ix);
                let want_w = sink.wants(iw);
                let mut cols = vec![T::zero(); kk * plane];
                let mut dw = if want_w { vec![T::zero(); co * kk] } else { Vec::new() };
                for b in 0..batch {
                    let gb = &g[b * co * plane..(b + 1) * co * plane];
                    if want_w {
                        geo.im2col(&x.data()[b * geo.image_len()..(b + 1) * geo.image_len()], &mut cols);
                        matmul(Mat::new(gb, co, plane), Mat::new(&cols, kk, plane).t(), &mut dw, T::one());
                    }
                    if want_x {
                        matmul(Mat::new(w.data(), co, kk).t(), Mat::new(gb, co, plane), &mut cols, T::zero());
                        let dx = sink.buf(ix);
                        geo.col2im_add(&cols, &mut dx[b * geo.image_len()..(b + 1) * geo.image_len()]);
                    }
                }
                if want_w {
                    sink.add(iw, &dw);
                }
                if let Some(ib) = ib {
                    if sink.wants(ib) {
                        bias_grad(g, co, plane, sink.buf(ib));
                    }
                }
            }),
        )
    }

    /// Transposed convolution (the adjoint of [`conv2d`](Self::conv2d)).
    ///
    /// `self: [B, Ci, H, W]`, `weight: [Ci, Co, k, k]`, `bias: [Co]`; output
    /// extent is `(H - 1) * stride - 2 * pad + k + out_pad`.
    pub fn conv_transpose2d(
        self,
        weight: Var<'g, T>,
        bias: Option<Var<'g, T>>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Var<'g, T> {
        same_graph(&self, &weight);
        let x = self.value();
        let w = weight.value();
        let (batch, ci, h, wd) = x.nchw();
        let (wci, co, k, k2) = w.nchw();
        assert_eq!(ci, wci, "conv_transpose2d input channels {ci} vs weight {wci}");
        assert_eq!(k, k2, "square kernels only");
        assert!(out_pad < stride, "output padding must be smaller than stride");
        let oh = (h - 1) * stride + k + out_pad - 2 * pad;
        let ow = (wd - 1) * stride + k + out_pad - 2 * pad;
        let geo = ConvGeometry::new(co, oh, ow, k, stride, pad);
        assert_eq!((geo.out_h, geo.out_w), (h, wd), "inconsistent transposed geometry");
        let plane_in = h * wd;
        let kk = geo.col_rows();
        let img = geo.image_len();

        let mut out = vec![T::zero(); batch * img];
        let mut cols = vec![T::zero(); kk * plane_in];
        for b in 0..batch {
            matmul(
                Mat::new(w.data(), ci, kk).t(),
                Mat::new(&x.data()[b * ci * plane_in..(b + 1) * ci * plane_in], ci, plane_in),
                &mut cols,
                T::zero(),
            );
            geo.col2im_add(&cols, &mut out[b * img..(b + 1) * img]);
        }
        let bias_val = bias.map(|b| b.value());
        if let Some(bv) = &bias_val {
            assert_eq!(bv.numel(), co, "conv_transpose2d bias length");
            add_channel_bias(&mut out, bv.data(), oh * ow);
        }
        let out = Tensor::new(&[batch, co, oh, ow], out);

        let (ix, iw) = (self.id, weight.id);
        let ib = bias.map(|b| b.id);
        let mut parents = vec![ix, iw];
        parents.extend(ib);
        self.graph.push_op(
            Rc::new(out),
            &parents,
            Box::new(move |g, sink| {
                let want_x = sink.wants(ix);
                let want_w = sink.wants(iw);
                let mut cols = vec![T::zero(); kk * plane_in];
                let mut dw = if want_w { vec![T::zero(); ci * kk] } else { Vec::new() };
                for b in 0..batch {
                    geo.im2col(&g[b * img..(b + 1) * img], &mut cols);
                    if want_x {
                        let dx = sink.buf(ix);
                        matmul(
                            Mat::new(w.data(), ci, kk),
                            Mat::new(&cols, kk, plane_in),
                            &mut dx[b * ci * plane_in..(b + 1) * ci * plane_in],
                            T::one(),
                        );
                    }
                    if want_w {
                        matmul(
                            Mat::new(&x.data()[b * ci * plane_in..(b + 1) * ci * plane_in], ci, plane_in),
                            Mat::new(&cols, kk, plane_in).t(),
                            &mut dw,
                            T::one(),
                        );
                    }
                }
                if want_w {
                    sink.add(iw, &dw);
                }
                if let Some(ib) = ib {
                    if sink.wants(ib) {
                        bias_grad(g, co, oh * ow, sink.buf(ib));
                    }
                }
            }),
        )
    }

    /// Reflection padding of the two spatial axes (edge sample not repeated).
    pub fn reflect_pad(self, pad: usize) -> Var<'g, T> {
        if pad == 0 {
            return self;
        }
        let x = self.value();
        let (batch, c, h, w) = x.nchw();
        assert!(pad < h && pad < w, "reflection pad {pad} too large for {h}x{w}");
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let reflect = |i: isize, n: usize| -> usize {
            let n = n as isize;
            let r = if i < 0 {
                -i
            } else if i >= n {
                2 * (n - 1) - i
            } else {
                i
            };
            r as usize
        };
        let rows: Vec<usize> = (0..ph).map(|y| reflect(y as isize - pad as isize, h)).collect();
        let colsi: Vec<usize> = (0..pw).map(|x| reflect(x as isize - pad as isize, w)).collect();
        let planes = batch * c;
        let mut out = vec![T::zero(); planes * ph * pw];
        for p in 0..planes {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ph * pw..(p + 1) * ph * pw];
            for (y, &sy) in rows.iter().enumerate() {
                for (xx, &sx) in colsi.iter().enumerate() {
                    dst[y * pw + xx] = src[sy * w + sx];
                }
            }
        }
        let id = self.id;
        self.graph.push_op(
            Rc::new(Tensor::new(&[batch, c, ph, pw], out)),
            &[id],
            Box::new(move |g, sink| {
                let dx = sink.buf(id);
                for p in 0..planes {
                    let src = &g[p * ph * pw..(p + 1) * ph * pw];
                    let dst = &mut dx[p * h * w..(p + 1) * h * w];
                    for (y, &sy) in rows.iter().enumerate() {
                        for (xx, &sx) in colsi.iter().enumerate() {
                            dst[sy * w + sx] += src[y * pw + xx];
                        }
                    }
                }
            }),
        )
    }

    /// Affine map of the rows of `self: [n, in]` with `weight: [out, in]`.
    pub fn linear(self, weight: Var<'g, T>, bias: Option<Var<'g, T>>) -> Var<'g, T> {
        same_graph(&self, &weight);
        let x = self.value();
        let w = weight.value();
        assert_eq!(x.shape().len(), 2, "linear expects [rows, features]");
        let (n, din) = (x.dim(0), x.dim(1));
        assert_eq!(w.shape(), &[w.dim(0), din], "linear weight shape");
        let dout = w.dim(0);
        let mut out = vec![T::zero(); n * dout];
        matmul(Mat::new(x.data(), n, din), Mat::new(w.data(), dout, din).t(), &mut out, T::zero());
        if let Some(b) = bias {
            let bv = b.value();
            assert_eq!(bv.numel(), dout, "linear bias length");
            for row in out.chunks_mut(dout) {
                for (o, &bb) in row.iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
        }
        let (ix, iw) = (self.id, weight.id);
        let ib = bias.map(|b| b.id);
        let mut parents = vec![ix, iw];
        parents.extend(ib);
        self.graph.push_op(
            Rc::new(Tensor::new(&[n, dout], out)),
            &parents,
            Box::new(move |g, sink| {
                if sink.wants(ix) {
                    matmul(Mat::new(g, n, dout), Mat::new(w.data(), dout, din), sink.buf(ix), T::one());
                }
                if sink.wants(iw) {
                    matmul(Mat::new(g, n, dout).t(), Mat::new(x.data(), n, din), sink.buf(iw), T::one());
                }
                if let Some(ib) = ib {
                    if sink.wants(ib) {
                        let buf = sink.buf(ib);
                        for row in g.chunks(dout) {
                            for (o, &v) in buf.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                    }
                }
            }),
        )
    }
}
