mod basic;
pub mod conv;
mod linear;
mod loss;
mod norm;
