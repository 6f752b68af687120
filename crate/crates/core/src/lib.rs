//! Searching for recommender training losses.
//!
//! A loss is a small straight-line program over the prediction `ŷ`, the
//! label `y` and the constant one ([`expr`]). A recurrent controller
//! ([`controller`]) proposes such programs, which are screened by a cheap
//! gradient test and scored by briefly training a clone of a recommender
//! ([`models`]) under them ([`search`]).

pub mod checkpoint;
pub mod controller;
pub mod data;
pub mod expr;
pub mod metrics;
pub mod models;
pub mod search;
pub mod tensor;
pub mod zoo;

/// Deterministic generator used everywhere a seed is accepted.
pub type Rng = rand_chacha::ChaCha8Rng;
