//! Reverse-mode differentiation over a closed set of tensor ops.
//!
//! A [`Graph`] records every op as it is evaluated; [`Graph::backward`] walks
//! the records in reverse creation order. Every op checks its output for
//! non-finite values and counts its arithmetic work so forward passes can be
//! costed exactly.

mod conv;
mod graph;
mod nn;
mod shape;

pub use graph::{Gradients, Graph, Var};
pub use nn::{Activation, Resample};

pub(crate) use graph::Op;

/// Test hooks for mutation checks of the gradient harness.
#[doc(hidden)]
pub mod fault {
    use std::cell::Cell;

    thread_local! {
        static FLIP_COMPOSITE_ALPHA: Cell<bool> = const { Cell::new(false) };
    }

    /// Flips the sign of the over-composite alpha gradient on this thread.
    pub fn set_flip_over_composite(on: bool) {
        FLIP_COMPOSITE_ALPHA.with(|c| c.set(on));
    }

    pub(crate) fn flip_over_composite() -> bool {
        FLIP_COMPOSITE_ALPHA.with(|c| c.get())
    }
}
