use std::rc::Rc;

use super::same_graph;
use crate::{Real, Tensor, Var};

impl<'g, T: Real> Var<'g, T> {
    fn binary(
        self,
        other: Var<'g, T>,
        f: impl Fn(T, T) -> T,
        da: impl Fn(T, T) -> T + 'static,
        db: impl Fn(T, T) -> T + 'static,
    ) -> Var<'g, T> {
        same_graph(&self, &other);
        let a = self.value();
        let b = other.value();
        assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
        let out = Tensor::new(
            a.shape(),
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        );
        let (ia, ib) = (self.id, other.id);
        self.graph.push_op(
            Rc::new(out),
            &[ia, ib],
            Box::new(move |g, sink| {
                if sink.wants(ia) {
                    let buf = sink.buf(ia);
                    for (((o, &gv), &x), &y) in buf.iter_mut().zip(g).zip(a.data()).zip(b.data()) {
                        *o += gv * da(x, y);
                    }
                }
                if sink.wants(ib) {
                    let buf = sink.buf(ib);
                    for (((o, &gv), &x), &y) in buf.iter_mut().zip(g).zip(a.data()).zip(b.data()) {
                        *o += gv * db(x, y);
                    }
                }
            }),
        )
    }

    /// Pointwise map with derivative expressed through input `x` and output `y`.
    fn unary(self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var<'g, T> {
        let x = self.value();
        let y = Rc::new(x.map(f));
        let yc = y.clone();
        let id = self.id;
        self.graph.push_op(
            y,
            &[id],
            Box::new(move |g, sink| {
                let buf = sink.buf(id);
                for (((o, &gv), &xv), &yv) in buf.iter_mut().zip(g).zip(x.data()).zip(yc.data()) {
                    *o += gv * df(xv, yv);
                }
            }),
        )
    }

    pub fn add(self, other: Var<'g, T>) -> Var<'g, T> {
        self.binary(other, |x, y| x + y, |_, _| T::one(), |_, _| T::one())
    }

    pub fn sub(self, other: Var<'g, T>) -> Var<'g, T> {
        self.binary(other, |x, y| x - y, |_, _| T::one(), |_, _| -T::one())
    }

    pub fn mul(self, other: Var<'g, T>) -> Var<'g, T> {
        self.binary(other, |x, y| x * y, |_, y| y, |x, _| x)
    }

    pub fn scale(self, s: T) -> Var<'g, T> {
        self.unary(move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(self, s: T) -> Var<'g, T> {
        self.unary(move |x| x + s, |_, _| T::one())
    }

    /// Add a constant tensor of the same shape.
    pub fn add_const(self, c: &Tensor<T>) -> Var<'g, T> {
        let k = self.graph.constant(c.clone());
        self.add(k)
    }

    /// Multiply elementwise by a constant tensor of the same shape.
    pub fn mul_const(self, c: &Tensor<T>) -> Var<'g, T> {
        let k = self.graph.constant(c.clone());
        self.mul(k)
    }

    pub fn neg(self) -> Var<'g, T> {
        self.scale(-T::one())
    }

    pub fn relu(self) -> Var<'g, T> {
        self.unary(
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn leaky_relu(self, slope: T) -> Var<'g, T> {
        self.unary(
            move |x| if x > T::zero() { x } else { x * slope },
            move |x, _| if x > T::zero() { T::one() } else { slope },
        )
    }

    pub fn tanh(self) -> Var<'g, T> {
        self.unary(|x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        self.unary(sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn abs(self) -> Var<'g, T> {
        self.unary(
            |x| x.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn square(self) -> Var<'g, T> {
        self.unary(|x| x * x, |x, _| x + x)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(self) -> Var<'g, T> {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(self) -> Var<'g, T> {
        let x = self.value();
        let n = x.numel();
        let total: T = x.data().iter().copied().sum();
        let id = self.id;
        self.graph.push_op(
            Rc::new(Tensor::scalar(total)),
            &[id],
            Box::new(move |g, sink| {
                let g0 = g[0];
                for o in sink.buf(id)[..n].iter_mut() {
                    *o += g0;
                }
            }),
        )
    }

    pub fn mean(self) -> Var<'g, T> {
        let n = self.value().numel();
        assert!(n > 0, "mean of empty tensor");
        self.sum().scale(T::one() / T::lit(n as f64))
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
