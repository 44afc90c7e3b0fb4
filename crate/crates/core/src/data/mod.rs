//! File formats, temporal rescaling, and the synthetic corpus.

mod actionness;
mod annotations;
mod features;
mod proposals;
mod segment;
pub mod synthetic;

pub use actionness::{oracle_actionness, read_actionness, write_actionness, ActionnessCurve};
pub use annotations::{load_annotations, write_annotations, AnnotationSet, Subset, VideoAnnotation};
pub use features::{read_feature_file, rescale_features, write_feature_file, FeatureMap, FEATURE_MAGIC};
pub use proposals::{
    rank_order, read_proposals, sort_by_rank, write_proposals, ProposalRecord, ResultsMap, STAGE_PEM,
    STAGE_POST_NMS, STAGE_RAW_CONF,
};
pub use segment::{segment_iou, TemporalSegment};
pub use synthetic::{generate_synthetic_corpus, SyntheticCorpus, SyntheticSpec};
