use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::metrics::write_json;

pub const RUN_CONFIG_FILE: &str = "run_config.json";

#[derive(Serialize)]
struct RunRecord<'a, C> {
    tool: &'static str,
    version: &'static str,
    subcommand: &'a str,
    config: &'a C,
}

/// Writes the fully resolved settings of a run next to its outputs.
pub fn write_run_config<C: Serialize>(dir: &Path, subcommand: &str, config: &C) -> Result<()> {
    let record = RunRecord { tool: "attnalign", version: crate::VERSION, subcommand, config };
    write_json(&dir.join(RUN_CONFIG_FILE), &record)
}
