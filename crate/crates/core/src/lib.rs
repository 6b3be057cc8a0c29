//! Unified speech recognition: one encoder-decoder trained jointly on
//! visual, auditory and audiovisual views of a synthetic corpus, with
//! supervised CTC/attention losses, EMA-teacher pseudo-labelling and
//! masked-prediction pre-training.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod decode;
pub mod exec;
pub mod losses;
pub mod model;
pub mod pretrain;
pub mod pseudo_label;
pub mod rng;
pub mod train;
