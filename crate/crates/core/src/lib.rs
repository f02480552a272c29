pub mod cli;
pub mod ecc;
pub mod handshake;
pub mod hash;
pub mod netsim;
pub mod registry;
pub mod tunnel;
