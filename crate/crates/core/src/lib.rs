//! Desk-scale simultaneous (online) machine translation toolkit.
//!
//! Implements wait-k decoding with unidirectional encoders for two
//! architectures, a Transformer and a 2D-convolutional joint source/target
//! model, together with single-path, multi-path and grid training
//! objectives, an online decoding simulator, and latency/quality metrics
//! (Average Lagging, Average Proportion, BLEU).

pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pervasive;
pub mod policy;
pub mod tensor;
pub mod training;
pub mod transformer;
