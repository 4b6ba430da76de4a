//! Lowering of quantized neural networks to integer accumulation plus fused
//! table lookups, with bit-width analysis, CRT encoding and exact simulation.

pub mod analysis;
pub mod container;
pub mod crt;
pub mod eval;
pub mod fusion;
pub mod ir;
pub mod par;
pub mod quant;
pub mod reference;
pub mod sim;
pub mod synth;
pub mod train;
