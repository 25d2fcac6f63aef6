//! Virtual sequence numbers for a filtered mailbox.
//!
//! The view keeps every upstream message in upstream order together with its
//! decision. Visible messages are numbered 1..K in that order; hidden ones
//! have no virtual number at all.

use std::collections::BTreeSet;

use crate::imapcodec::{SequenceSet, SyntaxError};
use crate::policy::Decision;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ViewError {
    #[error("inconsistent input: {0}")]
    InconsistentInput(String),
    #[error("unknown upstream sequence number {0}")]
    UnknownSeq(u32),
}

/// A visible message as seen through the view.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Entry {
    pub virtual_seq: u32,
    pub upstream_seq: u32,
    pub uid: u32,
}

/// Result of translating an upstream sequence number.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Downstream {
    Virtual(u32),
    Hidden,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewState {
    /// Every upstream message, index = upstream_seq - 1.
    slots: Vec<(u32, Decision)>,
    /// Upstream seqs of visible messages, index = virtual_seq - 1.
    visible: Vec<u32>,
    uidvalidity: u32,
}

impl ViewState {
    pub fn build_view(
        messages: &[(u32, u32, Decision)],
        uidvalidity: u32,
    ) -> Result<ViewState, ViewError> {
        let mut view = ViewState {
            slots: Vec::with_capacity(messages.len()),
            visible: Vec::new(),
            uidvalidity,
        };
        view.append(messages)?;
        Ok(view)
    }

    fn append(&mut self, messages: &[(u32, u32, Decision)]) -> Result<bool, ViewError> {
        let first = self.slots.len() as u32 + 1;
        let mut seen: BTreeSet<u32> = self.slots.iter().map(|&(uid, _)| uid).collect();
        for (next, &(seq, uid, _)) in (first..).zip(messages) {
            if seq != next {
                return Err(ViewError::InconsistentInput(format!(
                    "expected upstream seq {next}, got {seq}"
                )));
            }
            if !seen.insert(uid) {
                return Err(ViewError::InconsistentInput(format!("duplicate uid {uid}")));
            }
        }
        let mut any_visible = false;
        for &(seq, uid, decision) in messages {
            self.slots.push((uid, decision));
            if decision == Decision::Visible {
                self.visible.push(seq);
                any_visible = true;
            }
        }
        Ok(any_visible)
    }

    /// Number of visible messages; what the client sees as EXISTS.
    pub fn exists(&self) -> u32 {
        self.visible.len() as u32
    }

    pub fn upstream_exists(&self) -> u32 {
        self.slots.len() as u32
    }

    pub fn uidvalidity(&self) -> u32 {
        self.uidvalidity
    }

    pub fn entries(&self) -> Vec<Entry> {
        self.visible
            .iter()
            .enumerate()
            .map(|(i, &up)| Entry {
                virtual_seq: i as u32 + 1,
                upstream_seq: up,
                uid: self.slots[up as usize - 1].0,
            })
            .collect()
    }

    pub fn hidden_uids(&self) -> BTreeSet<u32> {
        self.slots
            .iter()
            .filter(|(_, d)| *d == Decision::Hidden)
            .map(|&(uid, _)| uid)
            .collect()
    }

    /// UIDs of visible messages in virtual order.
    pub fn visible_uids(&self) -> Vec<u32> {
        self.visible
            .iter()
            .map(|&up| self.slots[up as usize - 1].0)
            .collect()
    }

    pub fn uid_of(&self, virtual_seq: u32) -> Option<u32> {
        let up = *self.visible.get((virtual_seq as usize).checked_sub(1)?)?;
        Some(self.slots[up as usize - 1].0)
    }

    pub fn virtual_of_uid(&self, uid: u32) -> Option<u32> {
        self.visible
            .iter()
            .position(|&up| self.slots[up as usize - 1].0 == uid)
            .map(|i| i as u32 + 1)
    }

    /// Translates a client sequence set to upstream sequence numbers.
    pub fn map_up(&self, set: &SequenceSet) -> Vec<u32> {
        set.expand(self.exists())
            .into_iter()
            .map(|v| self.visible[v as usize - 1])
            .collect()
    }

    /// Like [`map_up`](Self::map_up) but starting from sequence-set text.
    pub fn map_up_text(&self, text: &str) -> Result<Vec<u32>, SyntaxError> {
        Ok(self.map_up(&SequenceSet::parse(text)?))
    }

    pub fn map_down_seq(&self, upstream_seq: u32) -> Result<Downstream, ViewError> {
        if upstream_seq == 0 || upstream_seq > self.upstream_exists() {
            return Err(ViewError::UnknownSeq(upstream_seq));
        }
        Ok(match self.visible.binary_search(&upstream_seq) {
            Ok(i) => Downstream::Virtual(i as u32 + 1),
            Err(_) => Downstream::Hidden,
        })
    }

    /// Keeps the UIDs of visible messages, preserving input order.
    pub fn filter_uids(&self, uids: &[u32]) -> Vec<u32> {
        let visible: BTreeSet<u32> = self.visible_uids().into_iter().collect();
        uids.iter().copied().filter(|u| visible.contains(u)).collect()
    }

    /// Removes an upstream message. Returns the virtual sequence number to
    /// announce if the message was visible.
    pub fn apply_upstream_expunge(&mut self, upstream_seq: u32) -> Result<Option<u32>, ViewError> {
        let down = self.map_down_seq(upstream_seq)?;
        self.slots.remove(upstream_seq as usize - 1);
        let announce = match down {
            Downstream::Virtual(v) => {
                self.visible.remove(v as usize - 1);
                Some(v)
            }
            Downstream::Hidden => None,
        };
        for up in self.visible.iter_mut() {
            if *up > upstream_seq {
                *up -= 1;
            }
        }
        Ok(announce)
    }

    /// Adds newly arrived upstream messages. Returns the new visible count if
    /// any newcomer is visible.
    pub fn extend_on_new(&mut self, messages: &[(u32, u32, Decision)]) -> Result<Option<u32>, ViewError> {
        Ok(self.append(messages)?.then(|| self.exists()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use Decision::{Hidden as H, Visible as V};

    fn six() -> ViewState {
        let ds = [V, V, H, V, H, V];
        let msgs: Vec<_> = ds
            .iter()
            .enumerate()
            .map(|(i, &d)| (i as u32 + 1, (i as u32 + 1) * 10, d))
            .collect();
        ViewState::build_view(&msgs, 7).unwrap()
    }

    fn three() -> ViewState {
        ViewState::build_view(&[(1, 10, V), (2, 20, H), (3, 30, V), (4, 40, H), (5, 50, V)], 1).unwrap()
    }

    fn ups(v: &ViewState) -> Vec<u32> {
        v.entries().iter().map(|e| e.upstream_seq).collect()
    }

    #[test]
    fn build() {
        let v = six();
        assert_eq!(ups(&v), [1, 2, 4, 6]);
        assert_eq!(v.exists(), 4);
        assert_eq!(v.hidden_uids(), BTreeSet::from([30, 50]));
        let all_hidden = ViewState::build_view(&[(1, 1, H), (2, 2, H)], 1).unwrap();
        assert_eq!(all_hidden.exists(), 0);
        assert!(matches!(
            ViewState::build_view(&[(1, 1, V), (3, 2, V)], 1),
            Err(ViewError::InconsistentInput(_))
        ));
    }

    #[test]
    fn mapping() {
        let v = three();
        assert_eq!(v.map_up_text("2:3").unwrap(), [3, 5]);
        assert_eq!(v.map_up_text("7").unwrap(), Vec::<u32>::new());
        assert_eq!(v.map_down_seq(3), Ok(Downstream::Virtual(2)));
        assert_eq!(v.map_down_seq(4), Ok(Downstream::Hidden));
        assert_eq!(v.map_down_seq(6), Err(ViewError::UnknownSeq(6)));
        assert_eq!(v.filter_uids(&[10, 40, 50]), [10, 50]);
        assert_eq!(v.filter_uids(&[]), Vec::<u32>::new());
    }

    #[test]
    fn expunge() {
        let mut v = three();
        assert_eq!(v.apply_upstream_expunge(3), Ok(Some(2)));
        assert_eq!(ups(&v), [1, 4]);
        let mut v = six();
        assert_eq!(v.apply_upstream_expunge(4), Ok(Some(3)));
        let mut v = three();
        assert_eq!(v.apply_upstream_expunge(4), Ok(None));
        assert_eq!(ups(&v), [1, 3, 4]);
        let mut v = six();
        assert_eq!(v.apply_upstream_expunge(5), Ok(None));
        assert_eq!(ups(&v), [1, 2, 4, 5]);
        let mut empty = ViewState::build_view(&[], 1).unwrap();
        assert_eq!(empty.apply_upstream_expunge(1), Err(ViewError::UnknownSeq(1)));
    }

    #[test]
    fn new_messages() {
        let mut v = three();
        assert_eq!(v.extend_on_new(&[(6, 60, H)]), Ok(None));
        assert_eq!(v.exists(), 3);
        assert_eq!(v.extend_on_new(&[(7, 70, H), (8, 80, V)]), Ok(Some(4)));
        assert!(v.extend_on_new(&[(10, 90, V)]).is_err());
        assert_eq!(v.uid_of(4), Some(80));
        assert_eq!(v.virtual_of_uid(80), Some(4));
    }
}
