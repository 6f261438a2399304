//! Shared plumbing for the `catgen`, `catcheck`, `catrun` and `catbench`
//! command-line tools.

pub mod bench;
pub mod service;

use std::path::Path;
use std::process::ExitCode;

use cat_core::loader::{build_layout, EnclaveLayout, LayoutConfig};

/// Exit code for usage, I/O, parse and decode errors.
pub const EXIT_ERROR: u8 = 1;
/// Exit code for a bundle the verifier or loader rejected.
pub const EXIT_REJECTED: u8 = 2;

/// Parses arguments; usage errors exit with [`EXIT_ERROR`], help and
/// version requests exit 0.
pub fn parse_args<T: clap::Parser>() -> Result<T, ExitCode> {
    T::try_parse().map_err(|e| {
        let _ = e.print();
        if e.use_stderr() {
            ExitCode::from(EXIT_ERROR)
        } else {
            ExitCode::SUCCESS
        }
    })
}

pub fn fail(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(EXIT_ERROR)
}

pub fn read_file(path: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
}

/// The default layout, or one described by a TOML file.
pub fn layout_from(path: Option<&Path>) -> Result<EnclaveLayout, String> {
    let Some(path) = path else { return Ok(EnclaveLayout::default()) };
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let config = LayoutConfig::from_toml(&text).map_err(|e| e.to_string())?;
    build_layout(&config).map_err(|e| e.to_string())
}
