//! Control-flow distributed transactional memory with supremum versioning,
//! early release and asynchronous buffering.
//!
//! Shared objects live on home nodes ([`node::Node`]) and never move.
//! Clients ([`client::Client`]) declare up front how many reads, writes and
//! updates a transaction will perform on each object; each node uses those
//! bounds to release objects as early as possible, so that transactions
//! with overlapping access sets pipeline instead of waiting for commits.

pub mod baselines;
pub mod bench;
pub mod client;
pub mod cluster;
pub mod engine;
pub mod executor;
pub mod history;
pub mod ids;
pub mod node;
pub mod object;
pub mod transport;
pub mod value;
pub mod versioning;
