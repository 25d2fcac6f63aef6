//! In-process IMAP server over fixture mailboxes, plus a small client, for
//! exercising the proxy end to end.

mod client;
mod fixture;
mod server;

pub use client::{ImapClient, Reply};
pub use fixture::{FixtureMailbox, FixtureMessage, ManifestError, MANIFEST_FILE};
pub use server::{Event, LoggedCommand, MockBuilder, MockServer};
