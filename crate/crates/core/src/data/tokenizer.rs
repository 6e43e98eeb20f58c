//! Byte-pair-style subword tokenizer with fixed-length output.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::CONTEXT_LENGTH;

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;

/// Marks the first piece of every word, so decoding can restore spaces.
pub const WORD_MARK: char = '▁';

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];
pub const MIN_VOCAB: usize = 8;
pub const DESK_VOCAB: usize = 512;

#[derive(Clone, Debug, PartialEq, Eq)]
enum PieceKind {
    Special,
    Char,
    Merge(u32, u32),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    pieces: Vec<String>,
    kinds: Vec<PieceKind>,
    lookup: BTreeMap<String, u32>,
    // (left, right) -> (rank, merged id)
    merges: BTreeMap<(u32, u32), (usize, u32)>,
    max_length: usize,
}

/// Lowercases and splits on whitespace; every word gets a leading [`WORD_MARK`].
fn normalized_words(text: &str) -> impl Iterator<Item = Vec<String>> + '_ {
    text.split_whitespace().map(|w| {
        let mut syms = Vec::new();
        syms.push(WORD_MARK.to_string());
        for ch in w.chars().flat_map(char::to_lowercase) {
            syms.push(ch.to_string());
        }
        syms
    })
}

impl Tokenizer {
    /// Learns merges greedily (most frequent adjacent pair, ties by piece text)
    /// until `vocab_size` pieces exist or no pair is left to merge.
    pub fn train<'a>(captions: impl IntoIterator<Item = &'a str>, vocab_size: usize) -> Result<Self> {
        if vocab_size < MIN_VOCAB {
            bail!(Validation, "vocab_size must be at least {}, got {}", MIN_VOCAB, vocab_size);
        }
        let mut words: BTreeMap<Vec<String>, u64> = BTreeMap::new();
        let mut any = false;
        for caption in captions {
            any = true;
            for w in normalized_words(caption) {
                *words.entry(w).or_insert(0) += 1;
            }
        }
        if !any {
            bail!(Validation, "tokenizer corpus is empty");
        }

        let mut char_freq: BTreeMap<String, u64> = BTreeMap::new();
        for (w, &n) in &words {
            for s in w {
                *char_freq.entry(s.clone()).or_insert(0) += n;
            }
        }
        // Keep the most frequent characters if the alphabet alone overflows the budget.
        let budget = vocab_size - SPECIALS.len();
        let mut alphabet: Vec<(String, u64)> = char_freq.into_iter().collect();
        alphabet.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        alphabet.truncate(budget);
        alphabet.sort_by(|a, b| a.0.cmp(&b.0));

        let mut tok = Tokenizer::empty();
        for (c, _) in &alphabet {
            tok.push(c.clone(), PieceKind::Char);
        }

        let mut corpus: Vec<(Vec<u32>, u64)> =
            words.iter().map(|(w, &n)| (w.iter().map(|s| tok.symbol_id(s)).collect(), n)).collect();

        while tok.pieces.len() < vocab_size {
            let mut counts: BTreeMap<(u32, u32), u64> = BTreeMap::new();
            for (w, n) in &corpus {
                for pair in w.windows(2) {
                    if pair[0] != UNK_ID && pair[1] != UNK_ID {
                        *counts.entry((pair[0], pair[1])).or_insert(0) += n;
                    }
                }
            }
            let best = counts
                .iter()
                .filter(|(&(l, r), _)| !tok.lookup.contains_key(&format!("{}{}", tok.pieces[l as usize], tok.pieces[r as usize])))
                .max_by(|a, b| {
                    a.1.cmp(b.1).then_with(|| {
                        let ka = (&tok.pieces[a.0 .0 as usize], &tok.pieces[a.0 .1 as usize]);
                        let kb = (&tok.pieces[b.0 .0 as usize], &tok.pieces[b.0 .1 as usize]);
                        kb.cmp(&ka)
                    })
                })
                .map(|(&p, _)| p);
            let Some((l, r)) = best else { break };
            let piece = format!("{}{}", tok.pieces[l as usize], tok.pieces[r as usize]);
            let id = tok.push(piece, PieceKind::Merge(l, r));
            let rank = tok.merges.len();
            tok.merges.insert((l, r), (rank, id));
            for (w, _) in corpus.iter_mut() {
                *w = merge_pair(w, l, r, id);
            }
        }
        Ok(tok)
    }

    fn empty() -> Self {
        let mut tok = Tokenizer {
            pieces: Vec::new(),
            kinds: Vec::new(),
            lookup: BTreeMap::new(),
            merges: BTreeMap::new(),
            max_length: CONTEXT_LENGTH,
        };
        for s in SPECIALS {
            tok.push(s.to_string(), PieceKind::Special);
        }
        tok
    }

    fn push(&mut self, piece: String, kind: PieceKind) -> u32 {
        let id = self.pieces.len() as u32;
        self.lookup.insert(piece.clone(), id);
        self.pieces.push(piece);
        self.kinds.push(kind);
        id
    }

    fn symbol_id(&self, s: &str) -> u32 {
        match self.lookup.get(s) {
            Some(&id) if self.kinds[id as usize] == PieceKind::Char => id,
            _ => UNK_ID,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.pieces.len()
    }

    pub fn max_length(&self) -> usize {
        self.max_length
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        self.pieces.get(id as usize).map(String::as_str)
    }

    pub fn contains(&self, piece: &str) -> bool {
        self.lookup.contains_key(piece)
    }

    /// Subword ids of `text` without special tokens or padding.
    pub fn encode_pieces(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for word in normalized_words(text) {
            let mut ids: Vec<u32> = word.iter().map(|s| self.symbol_id(s)).collect();
            loop {
                let best = ids
                    .windows(2)
                    .filter_map(|p| self.merges.get(&(p[0], p[1])).map(|&(rank, id)| (rank, p[0], p[1], id)))
                    .min();
                let Some((_, l, r, id)) = best else { break };
                ids = merge_pair(&ids, l, r, id);
            }
            out.extend(ids);
        }
        out
    }

    /// `[bos, pieces.., eos, pad..]` of exactly `max_length` ids. When the pieces
    /// fill the row, eos is dropped and the tail is truncated.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let n = self.max_length;
        let mut ids = Vec::with_capacity(n);
        ids.push(BOS_ID);
        for id in self.encode_pieces(text) {
            if ids.len() == n {
                break;
            }
            ids.push(id);
        }
        if ids.len() < n {
            ids.push(EOS_ID);
        }
        ids.resize(n, PAD_ID);
        ids
    }

    /// Concatenates pieces, skipping specials, and restores word spacing.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut s = String::new();
        for &id in ids {
            match self.kinds.get(id as usize) {
                Some(PieceKind::Special) | None => {}
                Some(_) => s.push_str(&self.pieces[id as usize]),
            }
        }
        let spaced: String = s.chars().map(|c| if c == WORD_MARK { ' ' } else { c }).collect();
        spaced.trim_start().to_string()
    }

    /// Plain-text table, one `id<TAB>piece<TAB>kind` line per entry.
    pub fn to_vocab_text(&self) -> String {
        let mut out = String::new();
        for (i, (p, k)) in self.pieces.iter().zip(&self.kinds).enumerate() {
            let kind = match k {
                PieceKind::Special => "special".to_string(),
                PieceKind::Char => "char".to_string(),
                PieceKind::Merge(l, r) => format!("merge:{}+{}", l, r),
            };
            out.push_str(&format!("{}\t{}\t{}\n", i, p, kind));
        }
        out
    }

    pub fn from_vocab_text(text: &str) -> Result<Self> {
        let mut tok = Tokenizer { pieces: Vec::new(), kinds: Vec::new(), lookup: BTreeMap::new(), merges: BTreeMap::new(), max_length: CONTEXT_LENGTH };
        for (lineno, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
            let cols: Vec<&str> = line.split('\t').collect();
            let [id, piece, kind] = cols[..] else {
                bail!(Format, "vocabulary line {}: expected 3 tab-separated columns", lineno + 1);
            };
            let id: u32 = id.parse().map_err(|_| crate::Error::Format(format!("vocabulary line {}: bad id `{}`", lineno + 1, id)))?;
            if id as usize != tok.pieces.len() {
                bail!(Format, "vocabulary line {}: ids must be consecutive from 0", lineno + 1);
            }
            let kind = match kind {
                "special" => PieceKind::Special,
                "char" => PieceKind::Char,
                k if k.starts_with("merge:") => {
                    let parts: Vec<Option<u32>> = k[6..].split('+').map(|x| x.parse().ok()).collect();
                    match parts[..] {
                        [Some(l), Some(r)] if l < id && r < id => PieceKind::Merge(l, r),
                        _ => bail!(Format, "vocabulary line {}: bad merge `{}`", lineno + 1, k),
                    }
                }
                other => bail!(Format, "vocabulary line {}: unknown kind `{}`", lineno + 1, other),
            };
            if let PieceKind::Merge(l, r) = kind {
                let rank = tok.merges.len();
                tok.merges.insert((l, r), (rank, id));
            }
            tok.push(piece.to_string(), kind);
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if tok.pieces.get(i).map(String::as_str) != Some(*s) {
                bail!(Format, "vocabulary must start with the reserved pieces {:?}", SPECIALS);
            }
        }
        Ok(tok)
    }

    /// Distinct characters covered by the vocabulary.
    pub fn alphabet(&self) -> BTreeSet<&str> {
        self.pieces.iter().zip(&self.kinds).filter(|(_, k)| **k == PieceKind::Char).map(|(p, _)| p.as_str()).collect()
    }
}

fn merge_pair(w: &[u32], l: u32, r: u32, id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(w.len());
    let mut i = 0;
    while i < w.len() {
        if i + 1 < w.len() && w[i] == l && w[i + 1] == r {
            out.push(id);
            i += 2;
        } else {
            out.push(w[i]);
            i += 1;
        }
    }
    out
}
