pub mod assignment;
pub mod autograd;
pub mod decoders;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod openvocab;
pub mod optim;
pub mod pipeline;
pub mod prompts;
pub mod synthdata;
pub mod tensor;

pub use decoders::Variant;
pub use error::{Error, Result};
pub use geometry::{box_iou, mask_iou, mask_to_box, rle_decode, rle_encode, BBox, BinaryMask, RleMask};
pub use metrics::{PanopticPrediction, Segment};
pub use model::SegModel;
pub use pipeline::{Checkpoint, Engine, Metric, Query, RunConfig, Task};
pub use synthdata::{Image, SceneSample, Vocabulary};
pub use tensor::Tensor;
