//! Data ingestion, metric computation, persistence — everything around the
//! training loops that turns runs into comparable rows.

pub mod checkpoint;
pub mod dataset;
pub mod metrics;

pub use checkpoint::{load_checkpoint, peek_dtype, peek_header, save_checkpoint};
pub use dataset::{load_mnist, synth_dataset, Dataset, SynthSpec};
pub use metrics::{
    attack_descriptor, compression_ratio, dense_size_bits, evaluate, measure, model_size_bits,
    read_csv, write_csv, MetricsRow,
};

/// Perturbation budgets are reported on the 0-255 color scale; convert once
/// here to the normalized units every attack uses.
pub fn normalize_delta(delta_255: f64) -> f64 {
    delta_255 / 255.0
}
