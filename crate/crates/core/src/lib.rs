pub mod config;
pub mod corpus;
pub mod domain;
pub mod finetune;
pub mod forge;
pub mod lm;
pub mod manifest;
pub mod metrics;
pub mod orchestrator;
pub mod prompts;
pub mod report;
pub mod simulator;
pub mod testkit;
pub mod utility;
