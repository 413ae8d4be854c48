//! Long-form generation by transitioning between text-prompt conditionings.
//!
//! A [`score::Score`] lists prompts with durations. It compiles to a
//! frame-exact [`score::Schedule`]; the [`engine`] then decodes against any
//! [`backend::Backend`], sampling each frame inside a transition window from
//! a weighted blend of the two prompts' next-token distributions, with the
//! temperature and top-k raised for the duration of the window.

pub mod backend;
pub mod distmath;
pub mod engine;
mod error;
pub mod mock;
pub mod par;
pub mod planner;
pub mod score;

pub use error::{Error, ErrorCode, Result};
