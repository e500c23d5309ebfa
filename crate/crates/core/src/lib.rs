//! Decentralized, proximity-driven mobile recommendation.
//!
//! Every node keeps a [`model::LocalStore`] of ratings. When two nodes meet, each broadcasts a
//! short token pointing at its latest payload on a simulated cloud storage provider
//! ([`exchange`]); the peer fetches and merges that payload later. Recommendations are computed
//! locally on each node ([`similarity`], [`recommender`]). The [`simulator`] drives the whole
//! protocol over a contact trace and reports how data spreads and how well nodes predict their
//! owners' held-out ratings.
//!
//! The similarity and recommendation math is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root fix it to `f64`, which is what the simulator uses.

pub mod cli;
pub mod codec;
pub mod exchange;
pub mod ingestion;
pub mod model;
pub mod recommender;
pub mod scalar;
pub mod similarity;
pub mod simulator;

pub use scalar::Scalar;

pub type SimilarityConfig = similarity::SimilarityConfig<f64>;
pub type SimilarityConfigF32 = similarity::SimilarityConfig<f32>;
pub type Prediction = recommender::Prediction<f64>;
pub type PredictionF32 = recommender::Prediction<f32>;
pub type GroupPrediction = recommender::GroupPrediction<f64>;
pub type Predictor<'s> = recommender::Predictor<'s, f64>;
