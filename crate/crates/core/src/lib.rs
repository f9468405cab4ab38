pub mod clock;
pub mod cluster;
pub mod codec;
pub mod config;
pub mod forward;
pub mod log;
pub mod memindex;
pub mod metrics;
pub mod query;
pub mod schema;
pub mod segment;
pub mod store;
