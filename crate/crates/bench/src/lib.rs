//! Fixtures shared by the benchmarks.

use qrsim_core::neuralnet::{Activation, Mlp};
use qrsim_core::{DerivedParams, RepeaterParams};

/// Four long segments, generation probability 0.1.
pub fn long_chain() -> DerivedParams {
    RepeaterParams::new(4, 50.6569, 1.45271)
        .derive()
        .expect("valid parameters")
}

/// Policy network of the default architecture for a four-segment chain.
pub fn policy_net() -> Mlp {
    Mlp::init(
        &[10, 32, 32, 9],
        Activation::Tanh,
        Activation::Sigmoid,
        1,
        1.0,
    )
    .expect("valid dims")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_build() {
        assert!((long_chain().p_gen - 0.1).abs() < 1e-6);
        assert_eq!(policy_net().n_params(), 1705);
    }
}
