pub mod mask;
pub mod sbr;
pub mod metrics;
pub mod ingest;
pub mod segmenter;
pub mod vlsa;
