#![allow(dead_code)]

pub mod distill;
pub mod oracles;
pub mod store;
