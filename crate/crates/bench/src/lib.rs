//! Shared operands for the criterion benches.

use shiftadd_core::quant::{quantize_add, quantize_shift};
use shiftadd_core::{AddLinear, QuantConfig, Rng, ShiftLinear, Tensor};

/// Benchmarked `M × K × N` products, from attention-head to MLP widths.
pub const SHAPES: [(usize, usize, usize); 3] = [(64, 64, 64), (196, 384, 384), (196, 384, 1536)];

pub struct Operands {
    pub x: Tensor,
    pub w: Tensor,
    pub shift: ShiftLinear,
    /// Power-of-two weights written back as dense floats.
    pub shift_dense: Tensor,
    pub add: AddLinear,
}

pub fn operands(m: usize, k: usize, n: usize, seed: u64) -> Operands {
    let mut rng = Rng::new(seed);
    let x = Tensor::randn([m, k], 1.0, &mut rng);
    let w = Tensor::randn([k, n], 0.1, &mut rng);
    let shift = quantize_shift(&w, &QuantConfig::default()).expect("finite weights");
    let shift_dense = shift.reconstruct();
    let add = quantize_add(&w).expect("non-empty weights");
    Operands {
        x,
        w,
        shift,
        shift_dense,
        add,
    }
}
