//! Retrieval evaluation: descriptors, distances, CMC/mAP and the dataset
//! protocols.

mod metrics;
mod protocol;

pub use metrics::{
    cmc_map, distance_matrix, l2_normalize_rows, DistanceMetric, ExclusionRule, RankingResult, RowMeta, MAX_RANK,
};
pub use protocol::{
    extract_features, run_protocol, write_cmc_csv, write_results_csv, EvalPrep, FeatureSet, ProtocolKind, ResultRow,
    RetrievalProtocol, TrialSplits, RESULTS_HEADER, SYSU_INDOOR_CAMERAS,
};
