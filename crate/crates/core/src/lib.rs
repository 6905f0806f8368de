//! Desk-scale simulator for federated, domain-adapted training of a divided
//! space-time attention segmentation model on synthetic gated cardiac phantoms.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod experiments;
pub mod federated;
pub mod losses;
pub mod metrics;
pub mod model;
