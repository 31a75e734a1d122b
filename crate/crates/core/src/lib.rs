//! Dual-stream learned image codec for ultra-low bitrates.
//!
//! A VQ generative stream transmits a masked codeword index map; a small
//! rounding-quantized LIC stream transmits a coarse latent. The decoder
//! regenerates dense representative vectors (DRVs) by diffusion, uses them to
//! enhance the LIC output and to predict the masked indices, then fuses both
//! streams in the pixel decoder.

pub mod backbone;
pub mod bitstream;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod drv_diffusion;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod image;
pub mod lic_stream;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod token_predictor;
pub mod vq_stream;

pub use bitstream::{
    apply_mask, compute_bpp, make_mask, pack_stream, unpack_stream, BinaryMask, BitBudget, Bitstream,
    IndexMap, MaskSchedule, MaskedIndexMap, StreamHeader,
};
pub use config::CodecConfig;
pub use error::{Error, Result};
pub use eval::{eval_corpus, EvalOptions, EvalReport, MetricRecord};
pub use image::Image;
pub use metrics::{perceptual_distance, psnr, PerceptualMetric, RandomFeatureMetric};
pub use pipeline::{decode_image, encode_image, roundtrip, HdcModel, Stage};
