//! Outputs shared by the reference evaluator and the circuit simulator.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quant::QuantError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("input shape {found:?} does not match expected {expected:?}")]
    ShapeMismatch { expected: Vec<usize>, found: Vec<usize> },
    #[error("input quantizer does not match the graph's input quantizer")]
    InputParamsMismatch,
    #[error("graph does not validate: {0}")]
    InvalidGraph(String),
    #[error(transparent)]
    Quant(#[from] QuantError),
}

/// Behaviour when a table lookup receives an index outside its domain.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutOfDomainPolicy {
    #[default]
    Strict,
    Clamp,
}

#[derive(Debug, Clone, PartialEq)]
pub enum OutputValues {
    /// Integer codes of a terminal quantizer.
    Codes(Vec<i32>),
    /// Reals produced in the clear after decryption.
    Scores(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceOutput {
    pub shape: Vec<usize>,
    /// Accumulators of the terminal linear layer.
    pub accumulators: Vec<i64>,
    pub values: OutputValues,
}

impl InferenceOutput {
    /// Index of the largest output; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        fn first_max<T: PartialOrd + Copy>(v: &[T]) -> usize {
            let mut best = 0;
            for (i, &x) in v.iter().enumerate() {
                if x > v[best] {
                    best = i;
                }
            }
            best
        }
        match &self.values {
            OutputValues::Codes(c) => first_max(c),
            OutputValues::Scores(s) => first_max(s),
        }
    }

    pub fn scores(&self) -> Vec<f64> {
        match &self.values {
            OutputValues::Codes(c) => c.iter().map(|&v| v as f64).collect(),
            OutputValues::Scores(s) => s.clone(),
        }
    }
}

/// Integers observed at one layer: accumulators and, when the layer ends in a
/// table lookup, its output codes.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct StageTrace {
    pub accumulators: Vec<i64>,
    pub outputs: Option<Vec<i32>>,
}
