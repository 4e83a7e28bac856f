//! Desk-scale laboratory for continual pretraining of a query encoder on
//! travel search logs.

pub mod geocode;
pub mod numerics;
pub mod corpus;
pub mod text;
pub mod taskgen;
pub mod model;
pub mod train;
pub mod eval;
