//! Neural building blocks: the raw-waveform encoder, the recurrent video
//! encoder, projection heads, the tagging MLP and the optimizer.

pub mod heads;
pub mod layers;
pub mod lstm;
pub mod optim;
pub mod samplecnn;

pub use heads::{
    batch_second_slices, Projector, ProjectorConfig, TagHead, TagHeadConfig, VideoEncoder,
    VideoEncoderConfig,
};
pub use layers::Param;
pub use optim::{Adam, AdamConfig};
pub use samplecnn::{resolution_calculus, Resolution, SampleCnn, SampleCnnConfig};
