pub mod gateway;
pub mod project;
pub mod protocol;
pub mod wire;

pub use gateway::Gateway;
pub use wire::Envelope;
pub mod remote;
pub mod replay;
pub mod server;
