pub mod anonymize;
pub mod asr;
pub mod audio;
pub mod clean;
pub mod config;
pub mod dataset;
pub mod fixtures;
pub(crate) mod http;
pub mod ivr;
pub mod llm;
pub mod manifest;
pub mod pipeline;
pub mod qa;
pub mod retry;
pub mod validate;
pub mod vector_store;
