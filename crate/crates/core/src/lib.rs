//! Federated learning over frozen pretrained vision transformers.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors and a reverse-mode autodiff tape.
//! - [`vit`]: the Vision Transformer backbone, scale presets and parameter accounting.
//! - [`peft`]: adapters, LoRA, deep prompts and head-only tuning on a frozen backbone.
//! - [`data`]: synthetic tasks, CIFAR-10 ingestion and class-subset client partitions.
//! - [`fl`]: local tuning, FedAvg / FedProx / FedAvg+Local and the multitask protocol.
//! - [`telemetry`]: communication ledger and evaluation metrics.

pub mod data;
pub mod error;
pub mod fl;
pub mod peft;
pub mod telemetry;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
