//! Shared fixtures for the benchmarks: representative datasets at the scale
//! the inference methods run at.

use ivqr_core::dgp::{Dgp1Config, Dgp1Sampler};
use ivqr_core::instruments::{self, InstrumentMethod, InstrumentRecipe};
use ivqr_core::{ClusteredDataset, InstrumentSet};

/// One replication of the clustered design at its default size.
pub fn dgp1_dataset(seed: u64) -> ClusteredDataset {
    Dgp1Sampler::new(Dgp1Config {
        seed,
        ..Default::default()
    })
    .expect("default design is valid")
    .generate(0)
}

/// Nonparametric instruments at the median for the given dataset.
pub fn median_instruments(ds: &ClusteredDataset, beta0: f64) -> InstrumentSet {
    instruments::build(
        ds,
        &InstrumentRecipe::new(InstrumentMethod::NonparametricFull),
        &[0.5],
        &[beta0],
    )
    .expect("instrument construction succeeds")
}
