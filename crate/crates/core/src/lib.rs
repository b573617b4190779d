//! Emotion recognition in conversation: corpus handling, difficulty-based
//! curriculum ordering, demonstration retrieval, prompt assembly, model
//! clients, data augmentation and scoring.

pub mod augmentation;
pub mod client;
pub mod corpus;
pub mod curriculum;
pub mod emotion;
pub mod evaluation;
pub mod knowledge;
pub mod prompting;
pub mod retrieval;
