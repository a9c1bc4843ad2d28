//! The GP-GNN model: entity graphs, edge encoders generating transition
//! matrices, flag-initialised propagation and pair classification.

mod check;
mod gpgnn;
mod graph;
mod propagate;
mod relations;

pub use check::{
    check_model_gradients, resolution_floor, toy_config, toy_problem, ModelGradReport, ParamCheck,
};
pub use gpgnn::{EdgeEncoder, GpGnn, ModelConfig, MARKER_COUNT};
pub use graph::{
    build_entity_graph, edge_markers, EncodedSentence, EntityGraph, MARK_FIRST, MARK_NONE,
    MARK_SECOND,
};
pub use propagate::{initial_states, initialize_node_states, pair_representation, propagate_layer};
pub use relations::{RelationVocab, NA};
