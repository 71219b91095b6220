//! Box embeddings of ontology hierarchies combined with relational graph
//! networks for gene-pair fitness prediction.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attribution;
pub mod autodiff;
pub mod boxes;
pub mod checkpoint;
pub mod config;
pub mod embed_trainer;
pub mod error;
pub mod gnn;
pub mod kg;
pub mod link_eval;
pub mod loss;
pub mod pipeline;
pub mod predictor;
pub mod seed;
pub mod synthetic;

pub use error::{Error, Result};
