pub mod archive;
pub mod cli;
pub mod cmmb;
pub mod config;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod matching;
pub mod numerics;
pub mod optim;
pub mod ossr;
pub mod report;
pub mod teacher;
pub mod train;
pub mod uqfd;

pub use error::{Error, Result};
