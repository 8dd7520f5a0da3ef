//! SparsePO laboratory: a tiny decoder-only transformer, token-level
//! preference-optimization objectives with learnable sparse masks, a
//! synthetic cue-token preference task with exact ground truth, and the
//! analysis tools that go with them.
//!
//! ```no_run
//! use std::path::Path;
//! use sparsepo::data::{generate_dataset, GenConfig, VocabSpec};
//! use sparsepo::losses::Method;
//! use sparsepo::model::{ModelConfig, TransformerLM};
//! use sparsepo::train::{run_po, PoInit, TrainConfig};
//!
//! let spec = VocabSpec::standard(64, 8, 8).unwrap();
//! let data = generate_dataset(&spec, &GenConfig::default()).unwrap();
//! let model = TransformerLM::new(ModelConfig::default()).unwrap();
//! let mut cfg = TrainConfig::default();
//! cfg.loss.method = Method::SparseCommon;
//! let out = run_po(PoInit::Model(model), &data, &cfg, Path::new("runs/demo")).unwrap();
//! println!("final loss {:?}", out.metrics.last().map(|m| m.loss));
//! ```

// Range checks are written `!(x >= 0.0)` so that NaN fails them too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod archive;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod masks;
pub mod model;
pub mod optim;
pub mod train;

pub use error::{Error, Result};
