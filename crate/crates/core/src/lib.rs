//! Link-level simulation of uplink non-orthogonal multiple access.

pub mod harq;
pub mod pairing;
pub mod phy;
pub mod rx;
pub mod seqdesign;
pub mod sim;
