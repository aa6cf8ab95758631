//! File formats, backbone checkpoints, task runs and the bench harness
//! around `attndistill-core`.

pub mod bench;
pub mod cli;
pub mod config;
pub mod descriptor;
pub mod io;
pub mod manifest;
pub mod run;

pub use config::{ConfigError, Task, TaskConfig};
pub use descriptor::{BackboneDescriptor, BackboneError, Checkpoint};
pub use io::{load_image, load_labels, save_image, IoError};
pub use manifest::Manifest;
pub use run::{run, RunError, RunReport};
