//! Cross-silo federated fine-tuning toolkit: tensors and their wire codec,
//! low-rank adapters, local training, non-IID partitioning, FedAvg, payload
//! transport, federation trust and experiment orchestration.

pub mod adapters;
pub mod codec;
pub mod taskdata;
pub mod tensor;
pub mod trainer;
pub mod partition;
pub mod aggregator;
pub mod comm;
pub mod federation;
pub mod orchestrator;
