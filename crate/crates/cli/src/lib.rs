//! Pieces shared by the `snap` and `snap-agent` binaries.

pub mod agent;
pub mod client;
pub mod table;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    /// The request was understood but could not be carried out.
    pub const FAILURE: i32 = 1;
    /// Bad arguments or an unreadable input file.
    pub const USAGE: i32 = 2;
}
