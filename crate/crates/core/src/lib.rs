//! Serial-number based network access control: device identity, the
//! registry of allowed serials, live sessions, the wire protocol, the
//! agent, and a simulated network for end-to-end runs.

pub mod agent;
pub mod clock;
pub mod model;
pub mod protocol;
pub mod registry;
pub mod service;
pub mod session;
pub mod simnet;
