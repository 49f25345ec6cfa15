//! Helpers shared between integration test binaries.
#![allow(dead_code)]

pub mod gradcheck;
