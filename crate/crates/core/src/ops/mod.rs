//! Differentiable operations recorded on a [`Graph`](crate::graph::Graph).

mod attention;
mod basic;
pub(crate) mod conv;
pub(crate) mod loss;
pub(crate) mod norm;
mod spatial;

pub use norm::BatchStats;

#[cfg(test)]
mod tests;
