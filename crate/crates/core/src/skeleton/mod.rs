//! Skeleton layout, sequences, stream transforms and the graph-convolutional
//! encoder.

mod encoder;
mod graph;
mod layout;
mod sequence;

pub use encoder::{
    classify_loss, pooling_groups, EncodedSkeleton, EncoderConfig, EncoderOutputs, Heads, InputNorm,
    SkeletonBatch, SkeletonEncoder,
};
pub use graph::{graph_conv, normalized_adjacency, GraphConvLayer};
pub use layout::{PartId, SkeletonLayout, JOINT_COUNT};
pub use sequence::{bone_stream, motion_stream, SkeletonSequence, Stream};
