//! Translating a sub-user's SEARCH criteria into upstream terms.

use crate::imapcodec::{SearchCriteria, SearchKey, SequenceSet};
use crate::viewmap::ViewState;

fn nothing() -> SearchKey {
    SearchKey::Not(Box::new(SearchKey::Flag("ALL".into())))
}

/// Rewrites sequence sets from virtual to upstream numbering and resolves
/// `*` in UID sets to the highest visible UID, so no criterion can single
/// out a hidden message.
pub fn rewrite(criteria: SearchCriteria, view: &ViewState) -> SearchCriteria {
    let max_uid = view.visible_uids().last().copied().unwrap_or(0);
    let mut f = |k: SearchKey| match k {
        SearchKey::Seq(set) => {
            let ups = view.map_up(&set);
            if ups.is_empty() {
                nothing()
            } else {
                SearchKey::Seq(SequenceSet::from_numbers(ups))
            }
        }
        SearchKey::Uid(set) => {
            let resolved = set.resolve_star(max_uid);
            if resolved.is_empty() {
                nothing()
            } else {
                SearchKey::Uid(resolved)
            }
        }
        k => k,
    };
    SearchCriteria {
        charset: criteria.charset,
        keys: criteria.keys.into_iter().map(|k| k.rewrite(&mut f)).collect(),
    }
}
