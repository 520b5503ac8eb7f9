//! Replicated middlebox state over operation-based convergent objects.
//!
//! Instances keep an append-only log of local operations per object, ship
//! them to peers over a lossy multicast network, and apply what they receive.
//! The crate includes a deterministic network simulator, three example
//! middleboxes and the experiment harness driving the `constellation` CLI.

pub mod codec;
pub mod error;
pub mod harness;
pub mod ids;
pub mod instance;
pub mod log_store;
pub mod membership;
pub mod middleboxes;
pub mod replication;
pub mod sim_net;
pub mod state_objects;

pub use error::{DecodeError, StateError};
pub use ids::{InstanceId, ObjectId};
