//! Twin left-to-right / right-to-left attention decoders over a shared
//! encoder, trained jointly with an agreement regularizer between the two
//! decoders' output sequences.

pub mod autodiff;
pub mod checks;
pub mod data;
pub mod losses;
pub mod model;
pub mod search;
pub mod tokenizer;
pub mod trainer;
pub mod workbench;
