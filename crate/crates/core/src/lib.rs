pub mod apnea;
pub mod dataset;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod flow;
pub mod fusion;
pub mod pipeline;
pub mod protocol;
pub mod report;
pub mod roi;
pub mod signals;
pub mod sim;
pub mod stats;
pub mod timebase;

pub use error::{Error, Result};

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/introduction.md")]
mod book_introduction {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/windows.md")]
mod book_windows {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/spectral.md")]
mod book_spectral {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/motion.md")]
mod book_motion {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/fusion.md")]
mod book_fusion {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/apnea.md")]
mod book_apnea {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/simulation.md")]
mod book_simulation {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/evaluation.md")]
mod book_evaluation {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cli.md")]
mod book_cli {}
