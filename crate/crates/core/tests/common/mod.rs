#![allow(dead_code)]

use linvit::gradcheck::Params;
use linvit::{Result, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, &mut rng(seed))
}

pub fn params(entries: &[(&str, Tensor<f64>)]) -> Params<f64> {
    entries.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
}

/// Reduces `out` to a scalar with fixed pseudo-random weights so every
/// output element contributes a distinct amount.
pub fn probe(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let w = Tensor::randn(tape.shape(out).to_vec(), 1.0, &mut rng(seed ^ 0x9e37));
    let w = tape.constant(w);
    let m = tape.mul(out, w)?;
    tape.sum(m)
}
