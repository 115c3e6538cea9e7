//! Zero-shot learning from scratch on CPU.
//!
//! Encoders are trained only on the target dataset's train split under one of
//! six objectives, optionally with a local auxiliary classifier on third-layer
//! features, and evaluated by a prototypical network that maps class
//! attributes to prototypes and classifies images of unseen classes.

pub mod autograd;
pub mod data;
pub mod element;
pub mod error;
pub mod experiment;
pub mod exec;
pub mod encoders;
pub mod gradcheck;
pub mod local_aux;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod protonet;
pub mod trainer;
pub mod linalg;
pub mod rng;

pub use element::Element;
pub use error::{Result, ZfsError};
