//! Regenerates the golden fixtures and their checksums.
//!
//! Usage: `cargo run -p cafpn --example bless_fixtures [DIR]`

use std::path::PathBuf;
use std::process::ExitCode;

use cafpn::selfcheck::{bless, DEFAULT_FIXTURES};

fn main() -> ExitCode {
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_FIXTURES));
    match bless(&dir) {
        Ok(files) => {
            for f in files {
                println!("wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
