//! Fixtures shared by the criterion benches.

use lipcast_core::numcore::{init, rng_for};
use lipcast_core::{BackboneConfig, LipFormer, ModelConfig, Tensor};

/// Backbone sizes of the inference comparison.
pub const HORIZON: usize = 96;
pub const PATCH_LEN: usize = 24;
pub const HIDDEN: usize = 512;
pub const CHANNELS: usize = 7;

/// The default model, or the variant with LN, FFN and PE added back.
pub fn forecaster(seq_len: usize, with_extras: bool) -> LipFormer {
    let mut bb = BackboneConfig::new(seq_len, HORIZON, PATCH_LEN, HIDDEN);
    bb.use_ln = with_extras;
    bb.use_ffn = with_extras;
    bb.use_pe = with_extras;
    let cfg = ModelConfig { backbone: bb, channels: CHANNELS, covariates: None, encoder_hidden: None, fusion_mix: true };
    LipFormer::new(cfg, 0).expect("bench config is valid")
}

/// Seeded standard-normal input of shape `b × seq_len × CHANNELS`.
pub fn input(batch: usize, seq_len: usize) -> Tensor {
    init::normal(&mut rng_for(1, 0), &[batch, seq_len, CHANNELS], 1.0)
}

pub fn matrix(rows: usize, cols: usize, stream: u64) -> Tensor {
    init::normal(&mut rng_for(2, stream), &[rows, cols], 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_forecast() {
        let m = forecaster(96, false);
        let y = m.predict(&input(2, 96), None).unwrap();
        assert_eq!(y.shape(), &[2, HORIZON, CHANNELS]);
        assert!(forecaster(96, true).num_trainable() > m.num_trainable());
    }
}
