//! Fetching just enough of each upstream message to run the policy.

use std::collections::BTreeMap;

use super::upstream::Upstream;
use super::SessionError;
use crate::credstore::{AddressList, Principal};
use crate::imapcodec::fetch::{parse_fetch_attrs, Value};
use crate::imapcodec::{parse_response, Response, SequenceSet, Untagged};
use crate::policy::{evaluate, extract_meta, senders_pass, Decision, PolicySet, RAW_BODY_WINDOW};

/// The policy in force for a selected mailbox, fixed at SELECT time.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub principal: Principal,
    pub policy: PolicySet,
    pub lists: Vec<AddressList>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageRecord {
    pub seq: u32,
    pub uid: u32,
    pub flags: Vec<String>,
    pub decision: Decision,
}

#[derive(Default)]
struct Partial {
    uid: Option<u32>,
    flags: Option<Vec<String>>,
    header: Option<Vec<u8>>,
    text: Option<Vec<u8>>,
}

fn bytes(v: &Value) -> Option<Vec<u8>> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Nil => Some(Vec::new()),
        _ => None,
    }
}

/// Runs one internal FETCH over `set`, merging results into `parts`.
/// Frames that are not FETCH data for a requested message go to `other`.
fn fetch_into(
    up: &mut Upstream,
    set: &SequenceSet,
    wanted: &[u32],
    items: &str,
    parts: &mut BTreeMap<u32, Partial>,
    other: &mut dyn FnMut(&Untagged) -> Result<(), SessionError>,
) -> Result<(), SessionError> {
    let body = format!("FETCH {set} ({items})");
    let done = up.run(body.as_bytes(), &mut |frame| {
        let resp = parse_response(frame).map_err(|e| SessionError::Protocol(e.to_string()))?;
        let Response::Untagged(u) = resp else {
            return Ok(());
        };
        match &u {
            Untagged::Fetch { seq, attrs } if wanted.binary_search(seq).is_ok() => {
                let attrs = parse_fetch_attrs(attrs).map_err(|e| SessionError::Protocol(e.to_string()))?;
                let p = parts.entry(*seq).or_default();
                for a in attrs {
                    match (a.name.as_str(), a.section.as_deref()) {
                        ("UID", None) => {
                            p.uid = a.value.as_number().and_then(|n| u32::try_from(n).ok());
                        }
                        ("FLAGS", None) => {
                            if let Value::List(fs) = &a.value {
                                p.flags = Some(
                                    fs.iter()
                                        .filter_map(|f| match f {
                                            Value::Atom(s) => Some(s.clone()),
                                            _ => None,
                                        })
                                        .collect(),
                                );
                            }
                        }
                        ("BODY", Some(s)) if s.starts_with("HEADER") => p.header = bytes(&a.value),
                        ("BODY", Some("TEXT")) => p.text = bytes(&a.value),
                        _ => {}
                    }
                }
                Ok(())
            }
            _ => other(&u),
        }
    })?;
    if !done.is_ok() {
        return Err(SessionError::Metadata(format!("upstream refused metadata fetch: {}", done.text)));
    }
    Ok(())
}

/// Fetches and classifies upstream messages `lo..=hi`.
///
/// Messages hidden by the sender constraints alone are never asked for
/// their body.
pub fn classify(
    up: &mut Upstream,
    lo: u32,
    hi: u32,
    snap: &Snapshot,
    other: &mut dyn FnMut(&Untagged) -> Result<(), SessionError>,
) -> Result<Vec<MessageRecord>, SessionError> {
    if lo > hi {
        return Ok(Vec::new());
    }
    let all: Vec<u32> = (lo..=hi).collect();
    let needs_body = snap.policy.needs_body();
    let header_item = if needs_body {
        "BODY.PEEK[HEADER]"
    } else {
        "BODY.PEEK[HEADER.FIELDS (FROM SUBJECT)]"
    };
    let mut parts = BTreeMap::new();
    let range = SequenceSet::from_numbers(lo..=hi);
    fetch_into(up, &range, &all, &format!("UID FLAGS {header_item}"), &mut parts, other)?;

    let mut headers = Vec::with_capacity(all.len());
    for &seq in &all {
        let p = parts.get(&seq);
        match p.and_then(|p| Some((p.uid?, p.header.clone()?))) {
            Some(v) => headers.push((seq, v.0, v.1)),
            None => return Err(SessionError::Metadata(format!("no metadata for message {seq}"))),
        }
    }

    if needs_body {
        let survivors: Vec<u32> = headers
            .iter()
            .filter(|(_, _, h)| senders_pass(&snap.policy, &extract_meta(h).sender, &snap.lists))
            .map(|&(seq, _, _)| seq)
            .collect();
        if !survivors.is_empty() {
            let set = SequenceSet::from_numbers(survivors.iter().copied());
            let item = format!("BODY.PEEK[TEXT]<0.{RAW_BODY_WINDOW}>");
            fetch_into(up, &set, &survivors, &item, &mut parts, other)?;
        }
    }

    let mut out = Vec::with_capacity(headers.len());
    for (seq, uid, header) in headers {
        let p = &parts[&seq];
        let mut raw = header;
        if needs_body {
            if let Some(text) = &p.text {
                raw.extend_from_slice(text);
            }
        }
        let meta = extract_meta(&raw);
        let sender_hidden = !senders_pass(&snap.policy, &meta.sender, &snap.lists);
        if needs_body && !sender_hidden && p.text.is_none() {
            return Err(SessionError::Metadata(format!("no body for message {seq}")));
        }
        let decision = evaluate(&snap.policy, &meta, &snap.lists, &snap.principal);
        out.push(MessageRecord {
            seq,
            uid,
            flags: p.flags.clone().unwrap_or_default(),
            decision,
        });
    }
    Ok(out)
}
