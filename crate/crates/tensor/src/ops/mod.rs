//! Differentiable ops, each implemented as a method on [`crate::Graph`].

mod activation;
mod batchnorm;
mod conv3d;
mod elementwise;
mod gem;
mod linear;
mod pool;
