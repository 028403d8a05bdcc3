//! Token pattern taxonomy: ten non-exclusive flags per token (word start,
//! word part, word end, induction, spacing, delimiter, formatting, numeric,
//! function word, capitalized) plus the bigram statistics the induction rule
//! needs.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::ingest::TokenRecord;

/// Closed-class English lexicon, one lowercase word per line.
pub const FUNCTION_WORDS: &str = include_str!("../data/function_words.txt");

/// Bigram frequency at or below which a repeated `uv` counts as induction.
pub const INDUCTION_THRESHOLD: f64 = 0.05;

/// Bracket tokens and bracket composites such as `);`, ` )` or `]],`.
/// Our own rule; composites are not enumerated anywhere.
pub const DELIMITER_PATTERN: &str = r"^\s*[;,.:]*[()\[\]{}][()\[\]{};,.:]*\s*$";

const SPACING_CHARS: [char; 5] = [' ', '\n', '\t', '\r', '\x0c'];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatternFlags {
    pub word_start: bool,
    pub word_part: bool,
    pub word_end: bool,
    pub induction: bool,
    pub spacing: bool,
    pub delimiter: bool,
    pub formatting: bool,
    pub numeric: bool,
    pub function: bool,
    pub capitalized: bool,
}

impl PatternFlags {
    pub const NAMES: [&'static str; 10] = [
        "word_start",
        "word_part",
        "word_end",
        "induction",
        "spacing",
        "delimiter",
        "formatting",
        "numeric",
        "function",
        "capitalized",
    ];

    pub fn as_array(&self) -> [bool; 10] {
        [
            self.word_start,
            self.word_part,
            self.word_end,
            self.induction,
            self.spacing,
            self.delimiter,
            self.formatting,
            self.numeric,
            self.function,
            self.capitalized,
        ]
    }

    /// Names of the set flags, in [`PatternFlags::NAMES`] order.
    pub fn names(&self) -> Vec<&'static str> {
        Self::NAMES
            .iter()
            .zip(self.as_array())
            .filter(|(_, on)| *on)
            .map(|(n, _)| *n)
            .collect()
    }
}

fn function_words() -> &'static HashSet<&'static str> {
    static SET: OnceLock<HashSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| {
        FUNCTION_WORDS
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .collect()
    })
}

fn delimiter_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(DELIMITER_PATTERN).unwrap())
}

fn capitalized_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^ ?\p{Lu}\p{L}*$").unwrap())
}

/// A letter that has case; uncased scripts get no letter-based flags.
fn cased_letter(c: char) -> bool {
    c.is_alphabetic() && (c.is_lowercase() || c.is_uppercase())
}

fn all_letters(s: &str) -> bool {
    !s.is_empty() && s.chars().all(cased_letter)
}

fn is_spacing(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| SPACING_CHARS.contains(&c))
}

/// Classify one token. `next_char` is the first character of the token that
/// follows; without it `word_end` stays false. The induction flag needs
/// bigram statistics, see [`classify_with_stats`].
pub fn classify_token(rec: &TokenRecord, next_char: Option<char>) -> PatternFlags {
    let s = rec.decoded_target.as_str();
    let mut f = PatternFlags {
        spacing: is_spacing(s),
        ..Default::default()
    };
    if f.spacing {
        return f;
    }
    f.numeric = s.chars().any(|c| c.is_ascii_digit());
    f.delimiter = delimiter_re().is_match(s);
    let trimmed = s.trim_matches(|c: char| SPACING_CHARS.contains(&c));
    f.formatting =
        !f.delimiter && !trimmed.is_empty() && trimmed.chars().all(|c| !c.is_alphanumeric() && !c.is_whitespace());

    if let Some(rest) = s.strip_prefix(' ') {
        f.word_start = all_letters(rest);
    }
    if all_letters(s) {
        f.word_end = next_char.is_some_and(|c| !c.is_alphanumeric());
        f.word_part = !f.word_end;
    }
    if f.word_start || all_letters(s) {
        let word = s.trim_start_matches(' ').to_lowercase();
        f.function = function_words().contains(word.as_str());
        f.capitalized = capitalized_re().is_match(s);
    }
    f
}

/// [`classify_token`] plus the induction rule.
pub fn classify_with_stats(rec: &TokenRecord, next_char: Option<char>, stats: &BigramStats) -> PatternFlags {
    let mut f = classify_token(rec, next_char);
    f.induction = is_induction(&rec.context, rec.target, stats);
    f
}

/// Classify a table of records. A record's lookahead character is taken
/// from the next record when that record continues the same sequence
/// (its context is this context followed by this target).
pub fn classify_records(records: &[TokenRecord], stats: Option<&BigramStats>) -> Vec<PatternFlags> {
    (0..records.len())
        .map(|i| {
            let rec = &records[i];
            let next = records.get(i + 1).filter(|nx| continues(rec, nx));
            let hint = next.and_then(|nx| nx.decoded_target.chars().next());
            match stats {
                Some(st) => classify_with_stats(rec, hint, st),
                None => classify_token(rec, hint),
            }
        })
        .collect()
}

fn continues(prev: &TokenRecord, next: &TokenRecord) -> bool {
    next.context.len() == prev.context.len() + 1
        && next.context[..prev.context.len()] == prev.context[..]
        && next.context.last() == Some(&prev.target)
}

/// True when the context ends in `u`, the target is `v`, the pair `uv` also
/// occurs earlier with at least one token between it and the final `u`, and
/// `q(v|u)` is at most [`INDUCTION_THRESHOLD`].
pub fn is_induction(context: &[u32], target: u32, stats: &BigramStats) -> bool {
    is_induction_at(context, target, stats, INDUCTION_THRESHOLD)
}

pub fn is_induction_at(context: &[u32], target: u32, stats: &BigramStats, threshold: f64) -> bool {
    let len = context.len();
    if len < 3 {
        return false;
    }
    let u = context[len - 1];
    // earlier pair at (i, i + 1) with a nonempty gap before the final u
    let repeated = (0..len.saturating_sub(3)).any(|i| context[i] == u && context[i + 1] == target);
    repeated && stats.prob(u, target) <= threshold
}

/// Plain bigram counts and the conditional frequencies `q(v|u)` they imply.
/// Unseen pairs have frequency 0.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BigramStats {
    pair_counts: HashMap<(u32, u32), u64>,
    row_totals: HashMap<u32, u64>,
    samples: u64,
}

#[derive(Serialize, Deserialize)]
struct BigramFile {
    samples: u64,
    /// `[u, v, count]`, sorted by `(u, v)`.
    pairs: Vec<(u32, u32, u64)>,
}

impl BigramStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_sequence(&mut self, tokens: &[u32]) {
        for w in tokens.windows(2) {
            self.add_pair(w[0], w[1], 1);
        }
    }

    pub fn add_pair(&mut self, u: u32, v: u32, count: u64) {
        *self.pair_counts.entry((u, v)).or_default() += count;
        *self.row_totals.entry(u).or_default() += count;
        self.samples += count;
    }

    pub fn from_sequences<'a>(seqs: impl IntoIterator<Item = &'a [u32]>) -> Self {
        let mut s = Self::new();
        for q in seqs {
            s.add_sequence(q);
        }
        s
    }

    /// Count over each record's context followed by its target.
    pub fn from_records(records: &[TokenRecord]) -> Self {
        let mut s = Self::new();
        for r in records {
            let mut seq = r.context.clone();
            seq.push(r.target);
            s.add_sequence(&seq);
        }
        s
    }

    pub fn samples(&self) -> u64 {
        self.samples
    }

    pub fn count(&self, u: u32, v: u32) -> u64 {
        self.pair_counts.get(&(u, v)).copied().unwrap_or(0)
    }

    /// `q(v|u)`; 0 when `u` was never seen.
    pub fn prob(&self, u: u32, v: u32) -> f64 {
        match self.row_totals.get(&u) {
            Some(&t) if t > 0 => self.count(u, v) as f64 / t as f64,
            _ => 0.0,
        }
    }

    /// Observed successors of `u` with their frequencies, ascending by id.
    pub fn row(&self, u: u32) -> Vec<(u32, f64)> {
        let mut r: Vec<(u32, f64)> = self
            .pair_counts
            .keys()
            .filter(|k| k.0 == u)
            .map(|&(_, v)| (v, self.prob(u, v)))
            .collect();
        r.sort_by_key(|e| e.0);
        r
    }

    pub fn to_json(&self) -> serde_json::Value {
        let sorted: BTreeMap<(u32, u32), u64> = self.pair_counts.iter().map(|(k, v)| (*k, *v)).collect();
        serde_json::to_value(BigramFile {
            samples: self.samples,
            pairs: sorted.into_iter().map(|((u, v), c)| (u, v, c)).collect(),
        })
        .expect("bigram table serializes")
    }

    pub fn from_json(v: serde_json::Value) -> Result<Self, serde_json::Error> {
        let f: BigramFile = serde_json::from_value(v)?;
        let mut s = Self::new();
        for (u, v, c) in f.pairs {
            s.add_pair(u, v, c);
        }
        Ok(s)
    }
}

/// Width of a run-of-spaces token in the GPT-NeoX vocabulary: id 209 is a
/// single space and id `50278 - n` is `n` spaces for `2 <= n <= 24`.
pub fn space_token_width(token_id: u32) -> Option<u32> {
    match token_id {
        209 => Some(1),
        50254..=50276 => Some(50278 - token_id),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(s: &str) -> TokenRecord {
        TokenRecord {
            context: vec![1],
            target: 2,
            dataset_tag: "t".into(),
            decoded_target: s.into(),
        }
    }

    fn flags(s: &str, next: Option<char>) -> PatternFlags {
        classify_token(&rec(s), next)
    }

    #[test]
    fn table_examples() {
        let the = flags(" the", None);
        assert!(the.word_start && the.function);
        assert!(!the.capitalized && !the.word_part);

        let nl = flags("\n", None);
        assert!(nl.spacing);
        assert_eq!(nl.names(), vec!["spacing"]);
        for s in [" ", "\t", "\n\n", " \r\n"] {
            assert!(flags(s, None).spacing, "{s:?}");
        }

        assert!(flags("123", None).numeric);
        assert!(flags(" 14", None).numeric);
        assert!(flags(" 2024", None).numeric);

        for s in [" be", " R", " The"] {
            assert!(flags(s, None).word_start, "{s:?}");
        }
        for s in [")", " )", "]", ");", "("] {
            assert!(flags(s, None).delimiter, "{s:?}");
        }
        for s in [".", ",", " //"] {
            let f = flags(s, None);
            assert!(f.formatting && !f.delimiter, "{s:?}");
        }
        for s in [" Denver", "CBRN", " Enron"] {
            assert!(flags(s, None).capitalized, "{s:?}");
        }
        for s in [" and", " to"] {
            assert!(flags(s, None).function, "{s:?}");
        }
    }

    #[test]
    fn word_part_and_end_need_lookahead() {
        assert!(flags("ne", Some('e')).word_part);
        assert!(flags("th", None).word_part);
        let inate = flags("inate", Some(' '));
        assert!(inate.word_end && !inate.word_part);
        assert!(flags("nces", Some(')')).word_end);
        assert!(flags("bum", Some(' ')).word_end);
        assert!(!flags("bum", None).word_end);
        // a word-start token is not a bare letter token
        assert!(!flags(" be", Some(' ')).word_end);
    }

    #[test]
    fn uncased_scripts_get_no_letter_flags() {
        let f = flags("漢字", Some(' '));
        assert!(!f.word_part && !f.word_end && !f.word_start && !f.capitalized);
        assert!(flags(" мир", None).word_start);
    }

    #[test]
    fn induction_examples() {
        let (a, b, c) = (10, 11, 12);
        let mut rare = BigramStats::new();
        rare.add_pair(a, b, 1);
        rare.add_pair(a, c, 99);
        assert_eq!(rare.prob(a, b), 0.01);
        assert!(is_induction(&[a, b, c, a], b, &rare));

        let mut common = BigramStats::new();
        common.add_pair(a, b, 1);
        common.add_pair(a, c, 1);
        assert!(!is_induction(&[a, b, c, a], b, &common));

        assert!(!is_induction(&[a, b], c, &rare));
        // uv immediately followed by u leaves no gap
        assert!(!is_induction(&[a, b, a], b, &rare));
        // unseen bigram counts as rare
        assert!(is_induction(&[7, 8, 9, 7], 8, &BigramStats::new()));
    }

    #[test]
    fn space_widths() {
        assert_eq!(space_token_width(209), Some(1));
        assert_eq!(space_token_width(50254), Some(24));
        assert_eq!(space_token_width(50276), Some(2));
        assert_eq!(space_token_width(50277), None);
        assert_eq!(space_token_width(50253), None);
        assert_eq!(space_token_width(0), None);
    }

    #[test]
    fn bigram_rows_sum_to_one_and_round_trip() {
        let s = BigramStats::from_sequences([&[1u32, 2, 3, 1, 2, 1, 4][..], &[3, 3, 1][..]]);
        for u in [1, 2, 3] {
            let total: f64 = s.row(u).iter().map(|e| e.1).sum();
            assert!((total - 1.0).abs() <= 1e-9);
        }
        assert_eq!(s.prob(1, 2), 2.0 / 3.0);
        let back = BigramStats::from_json(s.to_json()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn lookahead_from_continuing_record() {
        let a = TokenRecord {
            context: vec![5],
            target: 6,
            dataset_tag: "t".into(),
            decoded_target: "bum".into(),
        };
        let b = TokenRecord {
            context: vec![5, 6],
            target: 209,
            dataset_tag: "t".into(),
            decoded_target: " ".into(),
        };
        let f = classify_records(&[a.clone(), b.clone()], None);
        assert!(f[0].word_end);
        assert!(f[1].spacing);
        let unrelated = classify_records(&[a, rec(" ")], None);
        assert!(unrelated[0].word_part);
    }

    #[test]
    fn lexicon_is_lowercase_and_unique() {
        let words: Vec<&str> = FUNCTION_WORDS.lines().filter(|l| !l.is_empty()).collect();
        let set: HashSet<_> = words.iter().collect();
        assert_eq!(set.len(), words.len());
        assert!(words.iter().all(|w| w.chars().all(|c| c.is_ascii_lowercase())));
    }

    proptest! {
        #[test]
        fn exclusivity_and_determinism(s in "\\PC{0,6}", next in proptest::option::of(any::<char>())) {
            let f = flags(&s, next);
            prop_assert_eq!(f, flags(&s, next));
            prop_assert!(!(f.word_part && f.word_end));
            if f.spacing {
                prop_assert!(!(f.word_start || f.word_part || f.word_end || f.capitalized || f.function));
            }
        }

        #[test]
        fn lower_threshold_never_adds_induction(
            ctx in prop::collection::vec(0u32..4, 0..10),
            target in 0u32..4,
            corpus in prop::collection::vec(0u32..4, 0..40),
            t1 in 0.0f64..1.0,
            t2 in 0.0f64..1.0,
        ) {
            let stats = BigramStats::from_sequences([&corpus[..]]);
            let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            if is_induction_at(&ctx, target, &stats, lo) {
                prop_assert!(is_induction_at(&ctx, target, &stats, hi));
            }
        }
    }
}
