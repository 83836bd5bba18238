//! Criterion benchmarks for the numeric kernels, the encoder, the
//! contrastive loss and the text encoder. See `benches/kernels.rs`.
