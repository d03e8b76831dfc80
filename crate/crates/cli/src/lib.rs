//! Command-line surface and HTTP service for the lte engine.

pub mod commands;
pub mod config;
pub mod service;

use clap::Parser;

/// Parses `argv`, runs the command and returns the process exit code:
/// 0 on success, 2 on usage errors, 1 on runtime failures.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match commands::Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match commands::execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            let report =
                serde_json::json!({ "error": { "message": e.to_string(), "causes": &chain[1..] } });
            eprintln!("{report}");
            1
        }
    }
}
