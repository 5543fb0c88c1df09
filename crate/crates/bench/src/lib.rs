//! Shared fixtures for the benchmarks.

use clfb_core::harness::{gen_data, Dataset, ExperimentConfig};
use clfb_core::seed::rng_from_seed;
use clfb_core::EncoderPair;

/// Default-scale data with an untrained encoder pair.
pub fn fixture() -> (ExperimentConfig, Dataset, EncoderPair) {
    let cfg = ExperimentConfig::default();
    let data = gen_data(&cfg).expect("default config generates data");
    let enc = EncoderPair::new(&cfg.latent, data.vocabulary(), &mut rng_from_seed(3)).expect("encoder init");
    (cfg, data, enc)
}
