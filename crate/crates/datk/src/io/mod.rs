//! Persistence and ingestion: run configuration files, binary checkpoints,
//! CSV metrics, and the CIFAR-10 binary reader.

mod checkpoint;
mod cifar;
mod config;
mod metrics;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use cifar::{
    decode_cifar_records, load_cifar_binary, save_cifar_binary, Split, CIFAR_CLASSES,
    CIFAR_RECORD_BYTES,
};
pub use config::{DatasetSource, RunConfig};
pub use metrics::{write_metrics, MetricsRow, WriteMode, HEADER};
