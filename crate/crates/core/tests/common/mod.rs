#![allow(dead_code)]

pub mod games;
pub mod graphs;
pub mod toy;
