use std::fmt;

use super::SyntaxError;

/// The `*`-bearing part of a sequence set. `n:*` sets are unioned into the
/// smallest start, and a bare `*` is subsumed by any `n:*`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StarPart {
    /// Bare `*`.
    Only,
    /// `n:*`.
    From(u32),
}

/// A parsed RFC 3501 sequence set.
///
/// Numeric ranges are kept sorted, merged and non-overlapping. Anything
/// involving `*` is kept separately since it only resolves once the current
/// maximum is known.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct SequenceSet {
    ranges: Vec<(u32, u32)>,
    star: Option<StarPart>,
}

impl SequenceSet {
    pub fn parse(text: &str) -> Result<Self, SyntaxError> {
        if text.is_empty() {
            return Err(SyntaxError::new("empty sequence set"));
        }
        let mut set = SequenceSet::default();
        for item in text.split(',') {
            let (a, b) = match item.split_once(':') {
                Some((a, b)) => (parse_num(a)?, Some(parse_num(b)?)),
                None => (parse_num(item)?, None),
            };
            match (a, b) {
                (Some(n), None) => set.push_range(n, n),
                (None, None) | (None, Some(None)) => set.push_star(StarPart::Only),
                (Some(n), Some(None)) | (None, Some(Some(n))) => set.push_star(StarPart::From(n)),
                (Some(x), Some(Some(y))) => set.push_range(x.min(y), x.max(y)),
            }
        }
        Ok(set)
    }

    /// Builds a compact set from arbitrary numbers. Zero is ignored.
    pub fn from_numbers<I: IntoIterator<Item = u32>>(numbers: I) -> Self {
        let mut set = SequenceSet::default();
        for n in numbers {
            if n > 0 {
                set.push_range(n, n);
            }
        }
        set
    }

    pub fn ranges(&self) -> &[(u32, u32)] {
        &self.ranges
    }

    pub fn star(&self) -> Option<StarPart> {
        self.star
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty() && self.star.is_none()
    }

    fn push_star(&mut self, part: StarPart) {
        self.star = Some(match (self.star, part) {
            (None, p) | (Some(StarPart::Only), p) => p,
            (Some(StarPart::From(a)), StarPart::From(b)) => StarPart::From(a.min(b)),
            (Some(p @ StarPart::From(_)), StarPart::Only) => p,
        });
    }

    fn push_range(&mut self, lo: u32, hi: u32) {
        let idx = self.ranges.partition_point(|&(_, e)| e.saturating_add(1) < lo);
        let mut lo = lo;
        let mut hi = hi;
        let mut end = idx;
        while end < self.ranges.len() && self.ranges[end].0 <= hi.saturating_add(1) {
            lo = lo.min(self.ranges[end].0);
            hi = hi.max(self.ranges[end].1);
            end += 1;
        }
        self.ranges.splice(idx..end, [(lo, hi)]);
    }

    /// True when `n` is in the set, with `*` standing for `max`.
    pub fn contains(&self, n: u32, max: u32) -> bool {
        if self.ranges.iter().any(|&(a, b)| a <= n && n <= b) {
            return true;
        }
        match self.star {
            None => false,
            Some(StarPart::Only) => max > 0 && n == max,
            Some(StarPart::From(s)) => max > 0 && n >= s.min(max) && n <= s.max(max),
        }
    }

    /// Expands against a mailbox of `exists` messages: `*` resolves to
    /// `exists`, ranges are clamped, numbers above `exists` are dropped.
    /// The result is ascending and duplicate-free.
    pub fn expand(&self, exists: u32) -> Vec<u32> {
        let mut out: Vec<u32> = Vec::new();
        let mut add = |lo: u32, hi: u32| {
            let hi = hi.min(exists);
            if lo <= hi {
                out.extend(lo..=hi);
            }
        };
        for &(a, b) in &self.ranges {
            add(a, b);
        }
        if exists > 0 {
            match self.star {
                None => {}
                Some(StarPart::Only) => add(exists, exists),
                Some(StarPart::From(s)) => add(s.min(exists), s.max(exists)),
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Numbers named explicitly (not through `*`) that exceed `exists`.
    pub fn max_explicit(&self) -> Option<u32> {
        let r = self.ranges.last().map(|&(_, b)| b);
        let s = match self.star {
            Some(StarPart::From(n)) => Some(n),
            _ => None,
        };
        r.max(s)
    }

    /// Replaces `*` with a concrete maximum, yielding a purely numeric set.
    /// With `max == 0` the star part disappears.
    pub fn resolve_star(&self, max: u32) -> SequenceSet {
        let mut out = SequenceSet {
            ranges: self.ranges.clone(),
            star: None,
        };
        if max > 0 {
            match self.star {
                None => {}
                Some(StarPart::Only) => out.push_range(max, max),
                Some(StarPart::From(s)) => out.push_range(s.min(max), s.max(max)),
            }
        }
        out
    }
}

fn parse_num(text: &str) -> Result<Option<u32>, SyntaxError> {
    if text == "*" {
        return Ok(None);
    }
    if text.is_empty() || !text.bytes().all(|b| b.is_ascii_digit()) || text.starts_with('0') {
        return Err(SyntaxError::new(format!("bad sequence number {text:?}")));
    }
    text.parse::<u32>()
        .map(Some)
        .map_err(|_| SyntaxError::new(format!("sequence number out of range {text:?}")))
}

impl fmt::Display for SequenceSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        let mut sep = |f: &mut fmt::Formatter<'_>| -> fmt::Result {
            if !first {
                f.write_str(",")?;
            }
            first = false;
            Ok(())
        };
        for &(a, b) in &self.ranges {
            sep(f)?;
            if a == b {
                write!(f, "{a}")?;
            } else {
                write!(f, "{a}:{b}")?;
            }
        }
        match self.star {
            None => {}
            Some(StarPart::Only) => {
                sep(f)?;
                f.write_str("*")?;
            }
            Some(StarPart::From(n)) => {
                sep(f)?;
                write!(f, "{n}:*")?;
            }
        }
        Ok(())
    }
}
