use dcl_tensor::{Real, Tensor};

use crate::error::{DclError, Result};

/// Adaptive-moment state for one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T: Real> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [usize]>, lr: f64, beta1: f64, beta2: f64) -> Self {
        let m: Vec<Tensor<T>> = shapes.into_iter().map(Tensor::zeros).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.m.iter().chain(&self.v).all(Tensor::all_finite)
    }
}

/// One bias-corrected adaptive-moment step. Gradients are checked before any
/// parameter is touched, so a failed step leaves everything unchanged.
pub fn adam_update<T: Real>(params: &mut [&mut Tensor<T>], grads: &[Tensor<T>], st: &mut OptimizerState<T>) -> Result<()> {
    assert_eq!(params.len(), grads.len(), "gradient count");
    assert_eq!(params.len(), st.m.len(), "optimizer state count");
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        assert_eq!(p.shape(), g.shape(), "gradient shape of parameter {i}");
        if !g.all_finite() {
            return Err(DclError::Numeric(format!("non-finite gradient for parameter {i}")));
        }
    }
    st.step += 1;
    let t = st.step as i32;
    let (b1, b2) = (st.beta1, st.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(st.m.iter_mut().zip(st.v.iter_mut())) {
        let pd = p.data_mut();
        for (((x, &gi), mi), vi) in pd.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            let gf = gi.as_f64();
            let mf = b1 * mi.as_f64() + (1.0 - b1) * gf;
            let vf = b2 * vi.as_f64() + (1.0 - b2) * gf * gf;
            *mi = T::lit(mf);
            *vi = T::lit(vf);
            let update = st.lr * (mf / c1) / ((vf / c2).sqrt() + st.eps);
            *x = T::lit(x.as_f64() - update);
        }
    }
    Ok(())
}
