//! Visibility policies for sub-user sessions.
//!
//! A [`PolicySet`] is a conjunction: a message is visible to a sub-user only
//! when every sender constraint and every keyword constraint passes. The
//! owner always sees everything.

mod meta;

use serde::{Deserialize, Serialize};

use crate::credstore::{AddressList, Principal};

pub use meta::{
    extract_meta, split_header_body, MessageMeta, Sender, BODY_EXCERPT_LIMIT, RAW_BODY_WINDOW,
};

pub const MAX_KEYWORD_CHARS: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Decision {
    Visible,
    Hidden,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SenderMode {
    /// Hide mail from listed senders.
    Blacklist,
    /// Hide mail from everyone not listed.
    Whitelist,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SenderConstraint {
    pub mode: SenderMode,
    pub list: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeywordMode {
    RequireAny,
    ForbidAny,
}

/// A case-folded keyword of 1 to 128 characters.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Keyword(String);

impl Keyword {
    pub fn new(text: &str) -> Result<Self, InvalidPolicy> {
        let n = text.chars().count();
        if n == 0 || n > MAX_KEYWORD_CHARS {
            return Err(InvalidPolicy(format!(
                "keyword must be 1-{MAX_KEYWORD_CHARS} characters, got {n}"
            )));
        }
        Ok(Keyword(fold(text)))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for Keyword {
    type Error = InvalidPolicy;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Keyword::new(&value)
    }
}

impl From<Keyword> for String {
    fn from(k: Keyword) -> Self {
        k.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeywordConstraint {
    pub mode: KeywordMode,
    pub keywords: Vec<Keyword>,
}

impl KeywordConstraint {
    /// Builds a constraint from raw keyword strings, folding and deduplicating them.
    pub fn new<I, S>(mode: KeywordMode, keywords: I) -> Result<Self, InvalidPolicy>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut out: Vec<Keyword> = Vec::new();
        for k in keywords {
            let k = Keyword::new(k.as_ref())?;
            if !out.contains(&k) {
                out.push(k);
            }
        }
        Ok(KeywordConstraint { mode, keywords: out })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySet {
    #[serde(default)]
    pub sender_constraints: Vec<SenderConstraint>,
    #[serde(default)]
    pub keyword_constraints: Vec<KeywordConstraint>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid policy: {0}")]
pub struct InvalidPolicy(pub String);

impl PolicySet {
    pub fn is_empty(&self) -> bool {
        self.sender_constraints.is_empty() && self.keyword_constraints.is_empty()
    }

    /// Whether evaluating this policy needs the message body.
    pub fn needs_body(&self) -> bool {
        !self.keyword_constraints.is_empty()
    }

    pub fn references_list(&self, name: &str) -> bool {
        self.sender_constraints.iter().any(|c| c.list == name)
    }
}

/// Checks that every list reference resolves and every keyword constraint is
/// nonempty. Reports the first offending constraint.
pub fn validate(policy: &PolicySet, lists: &[AddressList]) -> Result<(), InvalidPolicy> {
    for c in &policy.sender_constraints {
        if c.list.is_empty() {
            return Err(InvalidPolicy("sender constraint with empty list name".into()));
        }
        if !lists.iter().any(|l| l.name == c.list) {
            return Err(InvalidPolicy(format!(
                "{:?} constraint references unknown list {:?}",
                c.mode, c.list
            )));
        }
    }
    for c in &policy.keyword_constraints {
        if c.keywords.is_empty() {
            return Err(InvalidPolicy(format!("{:?} constraint has no keywords", c.mode)));
        }
        if let Some(k) = c.keywords.iter().find(|k| k.0.is_empty()) {
            return Err(InvalidPolicy(format!("empty keyword {:?}", k.0)));
        }
    }
    Ok(())
}

/// Decides whether `meta` is visible to `principal`.
///
/// `policy` must already have passed [`validate`] against `lists`; a list
/// reference that does not resolve is treated as an empty list.
pub fn evaluate(
    policy: &PolicySet,
    meta: &MessageMeta,
    lists: &[AddressList],
    principal: &Principal,
) -> Decision {
    if matches!(principal, Principal::Owner) {
        return Decision::Visible;
    }
    if !senders_pass(policy, &meta.sender, lists) {
        return Decision::Hidden;
    }
    if policy.keyword_constraints.is_empty() {
        return Decision::Visible;
    }
    let subject = fold(&meta.subject);
    let body = fold(&meta.body_excerpt);
    let pass = policy.keyword_constraints.iter().all(|c| {
        let found = c
            .keywords
            .iter()
            .any(|k| subject.contains(k.as_str()) || body.contains(k.as_str()));
        match c.mode {
            KeywordMode::RequireAny => found,
            KeywordMode::ForbidAny => !found,
        }
    });
    if pass {
        Decision::Visible
    } else {
        Decision::Hidden
    }
}

/// Evaluates only the sender constraints. An unparseable sender fails every
/// sender constraint.
pub fn senders_pass(policy: &PolicySet, sender: &Sender, lists: &[AddressList]) -> bool {
    policy.sender_constraints.iter().all(|c| {
        let Sender::Address(addr) = sender else {
            return false;
        };
        let listed = lists
            .iter()
            .find(|l| l.name == c.list)
            .is_some_and(|l| l.contains(addr));
        match c.mode {
            SenderMode::Blacklist => !listed,
            SenderMode::Whitelist => listed,
        }
    })
}

/// Unicode default case folding.
pub fn fold(text: &str) -> String {
    caseless::default_case_fold_str(text)
}
