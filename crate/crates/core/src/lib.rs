//! Analytic essay scoring with graph attention over dependency parses.
//!
//! Each essay enters twice: as a dense essay vector feeding a small dense
//! head, and as a token graph (dependency arcs plus self-loops) feeding a
//! multi-head graph attention network. The two six-trait outputs are summed
//! and trained jointly against mean squared error; evaluation uses quadratic
//! weighted kappa per trait.
//!
//! ```no_run
//! use transgat_core::{data::{DatasetSplit, SplitRole}, gat::GatConfig, train};
//! # fn main() -> transgat_core::Result<()> {
//! let tr = DatasetSplit::load_dir("data/train".as_ref(), SplitRole::Train)?;
//! let va = DatasetSplit::load_dir("data/val".as_ref(), SplitRole::Validation)?;
//! let fit = train::fit(&tr, &va, &GatConfig::default(), &train::TrainConfig::default())?;
//! println!("{}", fit.history.last().unwrap().val.to_table());
//! # Ok(()) }
//! ```

pub mod autograd;
pub mod checkpoint;
pub mod conllu;
pub mod data;
pub mod error;
pub mod essay_stream;
pub mod gat;
pub mod graph;
pub mod model;
pub mod qwk;
pub mod synth;
pub mod tensor;
pub mod tgeb;
pub mod train;

pub use data::{DatasetSplit, EmbeddingBundle, EssayRecord, SplitRole, Trait, TraitScores};
pub use error::{Error, Result};
pub use gat::GatConfig;
pub use graph::{batch_graphs, build_graph, GraphBatch, TokenGraph};
pub use model::{ModelInput, ScoringModel};
pub use qwk::{qwk, QwkReport};
pub use tensor::Tensor;
pub use train::{fit, TrainConfig};
