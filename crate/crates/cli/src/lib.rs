//! Library face of the command-line tool, so integration tests can run
//! every command in-process and inspect the structured reports instead
//! of scraping output.

pub mod commands;
