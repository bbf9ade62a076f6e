//! Clean-room orchestration of developer environments: a controlled
//! background shell, tool adapters, recipes, and recovery from broken setups.

pub mod cleanroom;
pub mod cli;
pub mod events;
pub mod faults;
pub mod interact;
pub mod kit;
pub mod manifest;
pub mod recipes;
pub mod sandbox;
pub mod scaffold;
pub mod service;
pub mod template;
pub mod tooladapt;

use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
