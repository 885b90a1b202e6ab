//! Models, fine-tuning and self-supervised pretraining on top of the
//! hand-written layers in `scalebench-nn`.

pub mod assembly;
pub mod augment;
pub mod crops;
pub mod finetune;
pub mod pretrain;
pub mod pyramid;
pub mod vit;
