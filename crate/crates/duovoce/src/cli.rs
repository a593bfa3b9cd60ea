//! Command-line front end for the `duovoce` binary.

use std::ffi::OsString;
use std::process::ExitCode;

/// Exit code for usage and configuration errors.
pub const EXIT_USAGE: u8 = 2;

/// Entry point for the `duovoce` binary. Parses `args` (including the
/// program name) and runs the selected subcommand.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = args.into_iter();
    eprintln!("duovoce: no subcommand available yet");
    ExitCode::from(EXIT_USAGE)
}
