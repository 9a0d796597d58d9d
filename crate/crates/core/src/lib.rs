pub mod grid;
pub mod initial;
pub mod kernels;
pub mod linear;
pub mod nonlinear;
pub mod particles;
pub mod scaling;
pub mod sphere;
