//! Differentiable operations registered on a [`Tape`](crate::Tape).

mod conv;
mod elementwise;
mod layout;
