//! Differentiable operations on [`Var`](crate::Var).

mod conv;
mod elementwise;
mod index;
mod norm;

use crate::Var;

/// Both operands must live on the same tape.
pub(crate) fn same_graph<T: crate::Real>(a: &Var<'_, T>, b: &Var<'_, T>) {
    assert!(
        std::ptr::eq(a.graph, b.graph),
        "operands recorded on different graphs"
    );
}
