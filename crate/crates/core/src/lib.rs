//! Constraint-aware sequence modeling over attribute-grammar programs.
//!
//! The pipeline: an L-attributed grammar ([`grammar`]) defines trees
//! ([`tree`]) that linearize to token streams ([`stream`]); an incremental
//! evaluator ([`machine`]) tracks attribute context along a stream, yielding
//! binary context vectors and the set of productions legal at each hole.
//! Sequence models learn the streams and are sampled back into trees.

pub mod corpus;
pub mod engine;
pub mod eval;
pub mod grammar;
pub mod machine;
pub mod neural;
pub mod sgwc;
pub mod stream;
pub mod tree;
