//! Self-supervised heal-stage discovery and classification for wound image
//! time-series: a Siamese temporal-order pretext task, k-means stage
//! discovery over the learned embeddings, and a pseudo-label fine-tuned
//! stage classifier, with a bundled synthetic-sequence generator for
//! end-to-end validation.

pub mod dataset;
pub mod downstream;
pub mod nn;
pub mod pretext;
pub mod stagedisc;
pub mod synth;
pub mod tensor;
