//! Clients and the adversarial server strategies that drive them.

pub mod adversary;
pub mod client;

pub use adversary::{AdversaryScript, AttackReport};
pub use client::{AbortReason, AuditReply, Behavior, Client, SecAggReply, Submission, TrustAnchors};
