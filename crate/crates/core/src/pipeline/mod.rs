pub mod codec;
pub mod loss;
pub mod model;
pub mod stages;

pub use codec::{decode_image, decode_with, encode_image, roundtrip, Decoded, DrvSource};
pub use loss::{image_loss, LossReport, LossWeights};
pub use model::{HdcModel, ParamGroup, Stage, StageConfig};
pub use stages::{run_stage, train_all, train_stage, Dataset, StageReport, TrainOptions};
