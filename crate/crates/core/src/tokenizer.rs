// SPDX-License-Identifier: MIT OR Apache-2.0

//! Closed-vocabulary word tokenizer.
//!
//! Words are whitespace-delimited; opening brackets are peeled off the front
//! of a word and closing punctuation off the back until the remainder is a
//! known token. A single space between two tokens is implicit whenever the
//! canonical spacing rule would re-insert it on decode; every other
//! whitespace run becomes an explicit `WHITESPACE` token. In particular the
//! space after a colon is always explicit, so `"part 2: 4"` encodes as
//! `part`, `2`, `:`, `" "`, `4`.
//!
//! Segment ids start at 0 and increase by one on the token after every `|`.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::tasks::templates;

/// Token id inside a [`Vocab`].
pub type TokenId = u32;

/// Largest integer with its own NUMBER token.
pub const MAX_NUMBER: u32 = 200;

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const SPACE: &str = " ";
pub const NEWLINE: &str = "\n";
/// Keyword that opens an intermediate step (`part 2: 4`).
pub const PART: &str = "part";
pub const FINAL: &str = "Final";
pub const ANSWER: &str = "answer";

/// Item words, fruits then animals.
pub const ITEMS: [&str; 16] = [
    "apple", "orange", "peach", "fig", "mango", "pear", "coconut", "cherry", "plum", "cat", "dog",
    "horse", "rabbit", "whale", "cow", "frog",
];

/// Number of fruit entries at the head of [`ITEMS`].
pub const N_FRUITS: usize = 9;

const WHITESPACE_TOKENS: [&str; 5] = [" ", "\n", "\n\n", "\n  ", "\n "];
const LEADING: [char; 2] = ['(', '['];
const TRAILING: [char; 8] = [',', '.', ':', '?', ')', ']', ';', '!'];
const BINDS_LEFT: [&str; 8] = [",", ".", ":", "?", ")", "]", ";", "!"];
const BINDS_RIGHT: [&str; 2] = ["(", "["];

/// Coarse token class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TokenClass {
    Item,
    Comma,
    Separator,
    Number,
    Keyword,
    Bos,
    Colon,
    Whitespace,
}

/// One vocabulary entry as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub token: String,
    pub class: TokenClass,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<u32>,
}

/// Ordered, immutable token table.
#[derive(Debug, Clone)]
pub struct Vocab {
    entries: Vec<VocabEntry>,
    index: HashMap<String, TokenId>,
    numbers: Vec<TokenId>,
    bos: TokenId,
}

impl Vocab {
    /// Validate entries and build the lookup tables.
    pub fn from_entries(entries: Vec<VocabEntry>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        let mut bos = None;
        let mut numbers: Vec<(u32, TokenId)> = Vec::new();
        for (i, e) in entries.iter().enumerate() {
            let id = i as TokenId;
            if index.insert(e.token.clone(), id).is_some() {
                return Err(LabError::Vocab(format!("duplicate token {:?}", e.token)));
            }
            match e.class {
                TokenClass::Bos => {
                    if bos.replace(id).is_some() {
                        return Err(LabError::Vocab("more than one BOS token".into()));
                    }
                }
                TokenClass::Number => match e.value {
                    Some(v) => numbers.push((v, id)),
                    None => {
                        return Err(LabError::Vocab(format!(
                            "number token {:?} has no value",
                            e.token
                        )))
                    }
                },
                _ => {}
            }
        }
        let bos = bos.ok_or_else(|| LabError::Vocab("no BOS token".into()))?;
        numbers.sort_unstable();
        let dense = numbers.iter().enumerate().all(|(i, &(v, _))| v as usize == i);
        if !dense {
            return Err(LabError::Vocab("number values must be 0..=N without gaps".into()));
        }
        Ok(Self {
            entries,
            index,
            numbers: numbers.into_iter().map(|(_, id)| id).collect(),
            bos,
        })
    }

    /// The vocabulary used throughout the laboratory: control tokens, item
    /// words, punctuation, numbers `0..=200`, answer keywords and every word
    /// of the prompt templates.
    pub fn standard() -> Self {
        let mut entries: Vec<VocabEntry> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut push = |token: &str, class: TokenClass, value: Option<u32>| {
            if seen.insert(token.to_string()) {
                entries.push(VocabEntry {
                    token: token.to_string(),
                    class,
                    value,
                });
            }
        };
        push(BOS, TokenClass::Bos, None);
        push(EOS, TokenClass::Keyword, None);
        for item in ITEMS {
            push(item, TokenClass::Item, None);
        }
        push(",", TokenClass::Comma, None);
        push("|", TokenClass::Separator, None);
        push(":", TokenClass::Colon, None);
        for ws in WHITESPACE_TOKENS {
            push(ws, TokenClass::Whitespace, None);
        }
        for n in 0..=MAX_NUMBER {
            push(&n.to_string(), TokenClass::Number, Some(n));
        }
        for kw in [PART, FINAL, ANSWER] {
            push(kw, TokenClass::Keyword, None);
        }
        for text in templates::corpus_headers() {
            for word in text.split_whitespace() {
                for piece in split_word(word, &|w| !has_peelable_edge(w)).unwrap_or_default() {
                    let class = classify_new(&piece);
                    let value = piece.parse::<u32>().ok().filter(|_| class == TokenClass::Number);
                    push(&piece, class, value);
                }
            }
        }
        Self::from_entries(entries).expect("standard vocabulary is well formed")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[VocabEntry] {
        &self.entries
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    /// Id of a token that must exist.
    pub fn expect_id(&self, token: &str) -> Result<TokenId> {
        self.id(token)
            .ok_or_else(|| LabError::UnknownWord(token.to_string()))
    }

    pub fn token(&self, id: TokenId) -> Result<&str> {
        self.entry(id).map(|e| e.token.as_str())
    }

    pub fn entry(&self, id: TokenId) -> Result<&VocabEntry> {
        self.entries.get(id as usize).ok_or(LabError::TokenRange {
            id,
            size: self.entries.len(),
        })
    }

    pub fn class(&self, id: TokenId) -> Result<TokenClass> {
        self.entry(id).map(|e| e.class)
    }

    /// Integer value of a NUMBER token.
    pub fn value(&self, id: TokenId) -> Option<u32> {
        self.entries.get(id as usize).and_then(|e| e.value)
    }

    pub fn bos(&self) -> TokenId {
        self.bos
    }

    /// Token for the integer `n`, if it has one.
    pub fn number(&self, n: u32) -> Option<TokenId> {
        self.numbers.get(n as usize).copied()
    }

    /// NUMBER token ids ordered by value.
    pub fn number_ids(&self) -> &[TokenId] {
        &self.numbers
    }

    /// Largest representable number.
    pub fn max_number(&self) -> u32 {
        self.numbers.len().saturating_sub(1) as u32
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.entries)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let entries: Vec<VocabEntry> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::from_entries(entries)
    }

    /// Encode text into a sequence that starts with BOS.
    pub fn encode(&self, text: &str) -> Result<TokenSeq> {
        let mut seq = TokenSeq::new(self);
        let mut rest = text;
        let mut pending_space: Option<&str> = None;
        while !rest.is_empty() {
            let ws_len = rest.len() - rest.trim_start().len();
            if ws_len > 0 {
                pending_space = Some(&rest[..ws_len]);
                rest = &rest[ws_len..];
                continue;
            }
            let word_len = rest.find(char::is_whitespace).unwrap_or(rest.len());
            let word = &rest[..word_len];
            rest = &rest[word_len..];
            let pieces = split_word(word, &|w| self.index.contains_key(w))?;
            let first = self.expect_id(&pieces[0])?;
            if let Some(ws) = pending_space.take() {
                let implicit = ws == SPACE
                    && seq.last().is_some_and(|prev| self.needs_space(prev, first));
                if !implicit {
                    self.push_whitespace(&mut seq, ws)?;
                }
            }
            for piece in &pieces {
                seq.push(self.expect_id(piece)?, self)?;
            }
        }
        if let Some(ws) = pending_space {
            self.push_whitespace(&mut seq, ws)?;
        }
        Ok(seq)
    }

    fn push_whitespace(&self, seq: &mut TokenSeq, mut ws: &str) -> Result<()> {
        while !ws.is_empty() {
            let (tok, len) = WHITESPACE_TOKENS
                .iter()
                .filter(|t| ws.starts_with(*t))
                .filter_map(|t| self.id(t).map(|id| (id, t.len())))
                .max_by_key(|&(_, len)| len)
                .ok_or_else(|| LabError::UnknownWord(format!("{ws:?}")))?;
            seq.push(tok, self)?;
            ws = &ws[len..];
        }
        Ok(())
    }

    /// Whether canonical spacing puts a space between `prev` and `next`.
    fn needs_space(&self, prev: TokenId, next: TokenId) -> bool {
        let (Ok(p), Ok(n)) = (self.entry(prev), self.entry(next)) else {
            return false;
        };
        !(matches!(p.class, TokenClass::Bos | TokenClass::Whitespace | TokenClass::Colon)
            || n.class == TokenClass::Whitespace
            || BINDS_LEFT.contains(&n.token.as_str())
            || BINDS_RIGHT.contains(&p.token.as_str()))
    }

    /// Render ids with canonical spacing. BOS renders as nothing.
    pub fn decode_ids(&self, ids: &[TokenId]) -> Result<String> {
        let mut out = String::new();
        let mut prev: Option<TokenId> = None;
        for &id in ids {
            let e = self.entry(id)?;
            if e.class == TokenClass::Bos {
                prev = Some(id);
                continue;
            }
            if prev.is_some_and(|p| self.needs_space(p, id)) {
                out.push(' ');
            }
            out.push_str(&e.token);
            prev = Some(id);
        }
        Ok(out)
    }

    pub fn decode(&self, seq: &TokenSeq) -> Result<String> {
        self.decode_ids(&seq.ids)
    }
}

fn has_peelable_edge(word: &str) -> bool {
    word.chars().count() > 1
        && (word.starts_with(LEADING) || word.ends_with(TRAILING))
}

fn split_word(word: &str, known: &dyn Fn(&str) -> bool) -> Result<Vec<String>> {
    if known(word) {
        return Ok(vec![word.to_string()]);
    }
    let mut chars = word.chars();
    if word.chars().count() > 1 {
        let first = chars.next().unwrap_or_default();
        if LEADING.contains(&first) {
            let mut out = vec![first.to_string()];
            out.extend(split_word(&word[first.len_utf8()..], known)?);
            return Ok(out);
        }
        let last = word.chars().next_back().unwrap_or_default();
        if TRAILING.contains(&last) {
            let mut out = split_word(&word[..word.len() - last.len_utf8()], known)?;
            out.push(last.to_string());
            return Ok(out);
        }
    }
    Err(LabError::UnknownWord(word.to_string()))
}

fn classify_new(piece: &str) -> TokenClass {
    match piece {
        "," => TokenClass::Comma,
        "|" => TokenClass::Separator,
        ":" => TokenClass::Colon,
        p if ITEMS.contains(&p) => TokenClass::Item,
        p if p.parse::<u32>().is_ok_and(|v| v <= MAX_NUMBER) => TokenClass::Number,
        _ => TokenClass::Keyword,
    }
}

/// Token ids with their partition index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<TokenId>,
    pub segment_ids: Vec<u32>,
}

impl TokenSeq {
    /// A sequence holding only BOS.
    pub fn new(vocab: &Vocab) -> Self {
        Self {
            ids: vec![vocab.bos()],
            segment_ids: vec![0],
        }
    }

    /// Rebuild from raw ids, recomputing segment ids.
    pub fn from_ids(ids: &[TokenId], vocab: &Vocab) -> Result<Self> {
        let mut seq = Self {
            ids: Vec::with_capacity(ids.len()),
            segment_ids: Vec::with_capacity(ids.len()),
        };
        for &id in ids {
            seq.push(id, vocab)?;
        }
        Ok(seq)
    }

    /// Append a token, advancing the segment after a separator.
    pub fn push(&mut self, id: TokenId, vocab: &Vocab) -> Result<()> {
        vocab.class(id)?;
        let seg = match (self.ids.last(), self.segment_ids.last()) {
            (Some(&prev), Some(&s)) if vocab.class(prev)? == TokenClass::Separator => s + 1,
            (_, Some(&s)) => s,
            _ => 0,
        };
        self.ids.push(id);
        self.segment_ids.push(seg);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn last(&self) -> Option<TokenId> {
        self.ids.last().copied()
    }

    /// Positions `0..len`.
    pub fn positions(&self) -> std::ops::Range<usize> {
        0..self.ids.len()
    }

    /// Copy of the first `len` tokens.
    pub fn prefix(&self, len: usize) -> Self {
        let len = len.min(self.len());
        Self {
            ids: self.ids[..len].to_vec(),
            segment_ids: self.segment_ids[..len].to_vec(),
        }
    }

    /// Number of ITEM tokens in each segment.
    pub fn items_per_segment(&self, vocab: &Vocab) -> Result<Vec<usize>> {
        let n_seg = self.segment_ids.last().map_or(0, |&s| s as usize + 1);
        let mut counts = vec![0; n_seg];
        for (&id, &seg) in self.ids.iter().zip(&self.segment_ids) {
            if vocab.class(id)? == TokenClass::Item {
                counts[seg as usize] += 1;
            }
        }
        Ok(counts)
    }
}

impl fmt::Display for TokenSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{templates, CountingTask, Steps};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn names(v: &Vocab, seq: &TokenSeq) -> Vec<String> {
        seq.ids.iter().map(|&i| v.token(i).unwrap().to_string()).collect()
    }

    #[test]
    fn structured_fragment() {
        let v = Vocab::standard();
        let seq = v.encode("apple, apple | apple").unwrap();
        assert_eq!(names(&v, &seq), ["<bos>", "apple", ",", "apple", "|", "apple"]);
        assert_eq!(seq.segment_ids, [0, 0, 0, 0, 0, 1]);
    }

    #[test]
    fn empty_text_is_bos() {
        let v = Vocab::standard();
        let seq = v.encode("").unwrap();
        assert_eq!(seq.ids, [v.bos()]);
        assert_eq!(v.decode(&seq).unwrap(), "");
    }

    #[test]
    fn decode_single_item() {
        let v = Vocab::standard();
        let ids = [v.bos(), v.id("apple").unwrap()];
        assert_eq!(v.decode_ids(&ids).unwrap(), "apple");
    }

    #[test]
    fn separator_spacing() {
        let v = Vocab::standard();
        let ids: Vec<TokenId> = ["apple", "|", "apple", ",", "apple", "|", "apple"]
            .iter()
            .map(|t| v.id(t).unwrap())
            .collect();
        assert_eq!(v.decode_ids(&ids).unwrap(), "apple | apple, apple | apple");
    }

    #[test]
    fn step_is_three_tokens_after_part() {
        let v = Vocab::standard();
        let seq = v.encode("part 2: 4").unwrap();
        assert_eq!(names(&v, &seq), ["<bos>", "part", "2", ":", " ", "4"]);
        assert_eq!(v.decode(&seq).unwrap(), "part 2: 4");
    }

    #[test]
    fn unknown_word_named() {
        let v = Vocab::standard();
        match v.encode("apple, banana") {
            Err(LabError::UnknownWord(w)) => assert_eq!(w, "banana"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invalid_id_is_range_error() {
        let v = Vocab::standard();
        assert!(matches!(
            v.decode_ids(&[9999]),
            Err(LabError::TokenRange { id: 9999, .. })
        ));
    }

    #[test]
    fn template_corpus_round_trips() {
        let v = Vocab::standard();
        for text in templates::corpus_examples() {
            let seq = v.encode(&text).unwrap();
            assert_eq!(v.decode(&seq).unwrap(), text);
            assert_eq!(v.encode(&v.decode(&seq).unwrap()).unwrap(), seq);
        }
    }

    #[test]
    fn generated_contexts_round_trip() {
        let v = Vocab::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for i in 0..100 {
            let item = ITEMS[rng.gen_range(0..ITEMS.len())];
            let total = rng.gen_range(1..=60);
            let task = if i % 2 == 0 {
                CountingTask::structured(item, total, (1, 9), Steps::With, rng.gen()).unwrap()
            } else {
                CountingTask::unstructured(item, total, Steps::Without)
            };
            let text = task.render_prompt();
            let seq = v.encode(&text).unwrap();
            assert_eq!(v.decode(&seq).unwrap(), text);
            let again = v.encode(&v.decode(&seq).unwrap()).unwrap();
            assert_eq!(again, seq);
            let counts = seq.items_per_segment(&v).unwrap();
            assert_eq!(counts, task.partition_sizes);
            let seps = seq
                .ids
                .iter()
                .filter(|&&id| v.class(id).unwrap() == TokenClass::Separator)
                .count();
            assert_eq!(counts.len(), seps + 1);
        }
    }

    #[test]
    fn vocab_json_round_trip() {
        let v = Vocab::standard();
        let dir = std::env::temp_dir().join(format!("countlab-vocab-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("vocab.json");
        v.save_json(&path).unwrap();
        let back = Vocab::load_json(&path).unwrap();
        assert_eq!(back.entries(), v.entries());
    }

    #[test]
    fn duplicate_bos_rejected() {
        let e = |t: &str, c| VocabEntry {
            token: t.into(),
            class: c,
            value: None,
        };
        let r = Vocab::from_entries(vec![e("a", TokenClass::Bos), e("b", TokenClass::Bos)]);
        assert!(matches!(r, Err(LabError::Vocab(_))));
    }
}
