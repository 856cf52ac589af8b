//! Trust-anchored CI/CD: evidence chains, simulated TEEs and a commitment
//! ledger around a deterministic build system.

pub mod bundle;
pub mod canonical;
pub mod crypto;
pub mod dbs;
pub mod engine;
pub mod evidence;
pub mod ledger;
pub mod policy;
pub mod producer;
pub mod registry;
pub mod store;
pub mod tee;
pub mod verifier;
