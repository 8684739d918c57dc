//! CIAN core: two-branch transaction/text embedding with cross- and
//! intra-modal attention, incremental-margin triplet training with
//! batch-hard negative mining, sparse feature-mask explanations via ADMM,
//! and a synthetic merchant generator with planted ground truth.

pub mod adam;
pub mod attention;
pub mod data;
pub mod error;
pub mod explainer;
pub mod graph;
pub mod learning;
pub mod model;
pub mod tensor;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use attention::{
    cross_modal_block, intra_modal_block, AttentionOutput, BlockParams, PackageOp, ScoreMode,
};
pub use data::{
    build_pairs, generate_dataset, read_jsonl, write_jsonl, GeneratorConfig, GroundTruth,
    MerchantRecord, PairSample,
};
pub use error::{Error, Result};
pub use explainer::{
    admm_solve, aggregate_category_attention, bisect_lambda, explain_merchant, top_features,
    CategoryAttention, ExplainProblem, Explanation, TopFeature, DEFAULT_BUDGET, DEFAULT_TOP_K,
};
pub use graph::{finite_difference_check, Graph, NodeId, ParamSet};
pub use learning::{
    evaluate, margin_at, mine_hardest_negatives, score_pairs, select_threshold, train,
    triplet_loss, BatchScorer, EpochTrace, MarginSchedule, Metrics, MiningOutcome, TrainHyper,
};
pub use model::{
    encode_pair, export_embeddings, forward_trace, init_params, load_checkpoint, save_checkpoint,
    score_pair, score_pair_graph, ModelConfig, PartnerPolicy, Variant,
};
pub use tensor::Tensor;
