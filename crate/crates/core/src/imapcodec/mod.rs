//! IMAP4rev1 command and response codec.

mod command;
pub mod fetch;
mod response;
pub mod search;
mod sequence;
pub(crate) mod token;
pub mod wire;

use std::fmt;
use std::io;

pub use command::{
    leading_tag, parse_command, parse_command_bytes, render_command, Command, Password,
    ReceivedCommand, Verb, MAX_TAG_LEN,
};
pub use response::{parse_response, render_response, ListKind, Response, Status, Untagged};
pub use sequence::{SequenceSet, StarPart};
pub use search::{parse_search, render_search, SearchCriteria, SearchKey};
pub use token::encode_astring;

/// Largest literal accepted from a client.
pub const MAX_LITERAL: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntaxError {
    pub reason: String,
}

impl SyntaxError {
    pub fn new(reason: impl Into<String>) -> Self {
        SyntaxError {
            reason: reason.into(),
        }
    }
}

impl fmt::Display for SyntaxError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.reason)
    }
}

impl std::error::Error for SyntaxError {}

#[derive(Debug, thiserror::Error)]
pub enum CodecError {
    #[error("syntax error: {error}")]
    Syntax {
        tag: Option<String>,
        error: SyntaxError,
    },
    #[error("literal of {len} bytes exceeds limit")]
    LiteralTooLarge { tag: Option<String>, len: u64 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl CodecError {
    pub fn syntax(tag: Option<String>, reason: impl Into<String>) -> Self {
        CodecError::Syntax {
            tag,
            error: SyntaxError::new(reason),
        }
    }

    /// The tag of the offending command, when it could be read.
    pub fn tag(&self) -> Option<&str> {
        match self {
            CodecError::Syntax { tag, .. } | CodecError::LiteralTooLarge { tag, .. } => {
                tag.as_deref()
            }
            CodecError::Io(_) => None,
        }
    }
}
