//! File formats, training loop and command-line front end around
//! [`dcnv_core`].

pub mod commands;
pub mod config;
pub mod io;
pub mod trainer;
