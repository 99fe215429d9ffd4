#![allow(clippy::needless_range_loop)]

pub mod decode;
pub mod loop_engine;
pub mod model;
pub mod numerics;
pub mod toy;
