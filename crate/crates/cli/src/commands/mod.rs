//! One module per subcommand; each exposes its clap `Args` struct and a
//! `run` returning the process exit code (or an error the top level maps
//! to one).

pub mod ablate;
pub mod eval;
pub mod gradcheck;
pub mod heatmap;
pub mod synth;
pub mod train;
