//! Configuration, runs and file output.

pub mod config;
pub mod output;
pub mod run;

pub use config::{parse_config, parse_config_with, to_toml, Kind, RunConfig, StudyKind};
pub use output::{field_table, read_fields, write_fields, write_fields_json, FieldFrame, ManifestEntry};
pub use run::{run, ExitStatus, ResultBundle};
