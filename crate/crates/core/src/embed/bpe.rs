//! Byte-level BPE tokenizer compatible with the CLIP text tower.
//!
//! The vocabulary is derived from a merges file the same way the reference
//! tokenizer does it: 256 byte symbols, the same symbols with an end-of-word
//! marker, one entry per merge, then the start/end special tokens.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use regex::Regex;

pub const CLIP_CONTEXT_WINDOW: usize = 77;

/// Merge count used by the released CLIP vocabulary (49152 - 256 - 2).
const CLIP_MAX_MERGES: usize = 48_894;
const END_OF_WORD: &str = "</w>";
const START_TOKEN: &str = "<|startoftext|>";
const END_TOKEN: &str = "<|endoftext|>";

#[derive(Debug, thiserror::Error)]
pub enum BpeError {
    #[error("merges file unreadable: {0}")]
    Io(#[from] std::io::Error),
    #[error("merges line {line} is not a pair: {text:?}")]
    BadMerge { line: usize, text: String },
    #[error("token {0:?} is not in the vocabulary")]
    UnknownToken(String),
}

/// Token ids fitted to a context window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    /// Exactly `context` ids, zero padded.
    pub ids: Vec<u32>,
    /// Number of non-padding ids (start and end tokens included).
    pub len: usize,
    /// Text of the tokens dropped to fit the window.
    pub truncated_tail: Option<String>,
}

pub struct ClipTokenizer {
    encoder: HashMap<String, u32>,
    decoder: Vec<String>,
    ranks: HashMap<(String, String), usize>,
    byte_encoder: [char; 256],
    byte_decoder: HashMap<char, u8>,
    pattern: Regex,
    start_id: u32,
    end_id: u32,
}

/// The reversible byte -> printable char table used by byte-level BPE.
fn bytes_to_unicode() -> [char; 256] {
    let mut printable: Vec<u32> = (u32::from(b'!')..=u32::from(b'~'))
        .chain(0xA1..=0xAC)
        .chain(0xAE..=0xFF)
        .collect();
    let mut table = ['\0'; 256];
    for &b in &printable {
        table[b as usize] = char::from_u32(b).unwrap();
    }
    let mut n = 0;
    for b in 0u32..256 {
        if !printable.contains(&b) {
            table[b as usize] = char::from_u32(256 + n).unwrap();
            printable.push(b);
            n += 1;
        }
    }
    table
}

/// Byte values in the order the reference vocabulary lists them.
fn byte_order() -> Vec<u8> {
    let mut order: Vec<u8> = (b'!'..=b'~').chain(0xA1..=0xAC).chain(0xAE..=0xFF).collect();
    for b in 0u8..=255 {
        if !order.contains(&b) {
            order.push(b);
        }
    }
    order
}

impl ClipTokenizer {
    pub fn from_merges_file(path: impl AsRef<Path>) -> Result<Self, BpeError> {
        Self::from_merges_str(&fs::read_to_string(path)?)
    }

    /// Builds the tokenizer from merges text. A leading `#version` line is
    /// skipped and at most the released CLIP merge count is used.
    pub fn from_merges_str(text: &str) -> Result<Self, BpeError> {
        let mut merges = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if (i == 0 && line.starts_with('#')) || line.trim().is_empty() {
                continue;
            }
            if merges.len() == CLIP_MAX_MERGES {
                break;
            }
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                    merges.push((a.to_string(), b.to_string()))
                }
                _ => {
                    return Err(BpeError::BadMerge {
                        line: i + 1,
                        text: line.to_string(),
                    })
                }
            }
        }

        let byte_encoder = bytes_to_unicode();
        let byte_decoder = byte_encoder.iter().enumerate().map(|(b, &c)| (c, b as u8)).collect();

        let mut decoder: Vec<String> = byte_order().into_iter().map(|b| byte_encoder[b as usize].to_string()).collect();
        let with_eow: Vec<String> = decoder.iter().map(|s| format!("{s}{END_OF_WORD}")).collect();
        decoder.extend(with_eow);
        decoder.extend(merges.iter().map(|(a, b)| format!("{a}{b}")));
        decoder.push(START_TOKEN.to_string());
        decoder.push(END_TOKEN.to_string());

        let encoder: HashMap<String, u32> = decoder.iter().enumerate().map(|(i, s)| (s.clone(), i as u32)).collect();
        let ranks = merges.into_iter().enumerate().map(|(i, m)| (m, i)).collect();
        let pattern = Regex::new(
            r"(?i)<\|startoftext\|>|<\|endoftext\|>|'s|'t|'re|'ve|'m|'ll|'d|\p{L}+|\p{N}|[^\s\p{L}\p{N}]+",
        )
        .expect("static pattern");

        Ok(Self {
            start_id: encoder[START_TOKEN],
            end_id: encoder[END_TOKEN],
            encoder,
            decoder,
            ranks,
            byte_encoder,
            byte_decoder,
            pattern,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.decoder.len()
    }

    pub fn start_id(&self) -> u32 {
        self.start_id
    }

    pub fn end_id(&self) -> u32 {
        self.end_id
    }

    fn bpe(&self, token: &str) -> Vec<String> {
        let chars: Vec<char> = token.chars().collect();
        let mut word: Vec<String> = chars.iter().map(|c| c.to_string()).collect();
        if let Some(last) = word.last_mut() {
            last.push_str(END_OF_WORD);
        }
        loop {
            let best = word
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0].clone(), p[1].clone())).map(|&r| (r, p[0].clone(), p[1].clone())))
                .min_by_key(|(r, _, _)| *r);
            let Some((_, first, second)) = best else { break };
            let mut merged = Vec::with_capacity(word.len());
            let mut i = 0;
            while i < word.len() {
                if i + 1 < word.len() && word[i] == first && word[i + 1] == second {
                    merged.push(format!("{first}{second}"));
                    i += 2;
                } else {
                    merged.push(word[i].clone());
                    i += 1;
                }
            }
            word = merged;
            if word.len() == 1 {
                break;
            }
        }
        word
    }

    /// Token ids without start/end markers.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>, BpeError> {
        let cleaned = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
        let mut ids = Vec::new();
        for m in self.pattern.find_iter(&cleaned) {
            let mapped: String = m.as_str().bytes().map(|b| self.byte_encoder[b as usize]).collect();
            for piece in self.bpe(&mapped) {
                let id = self.encoder.get(&piece).ok_or_else(|| BpeError::UnknownToken(piece.clone()))?;
                ids.push(*id);
            }
        }
        Ok(ids)
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let joined: String = ids
            .iter()
            .filter_map(|&id| self.decoder.get(id as usize))
            .map(|s| s.as_str())
            .collect();
        let bytes: Vec<u8> = joined.chars().filter_map(|c| self.byte_decoder.get(&c).copied()).collect();
        String::from_utf8_lossy(&bytes)
            .replace(END_OF_WORD, " ")
            .trim_end()
            .to_string()
    }

    /// `[start] tokens [end]`, truncated so the end token stays last, then
    /// zero padded to `context`.
    pub fn encode_window(&self, text: &str, context: usize) -> Result<Encoded, BpeError> {
        assert!(context >= 2, "context window must hold start and end tokens");
        let body = self.encode(text)?;
        let room = context - 2;
        let (kept, dropped) = if body.len() > room {
            body.split_at(room)
        } else {
            (&body[..], &[][..])
        };
        let mut ids = Vec::with_capacity(context);
        ids.push(self.start_id);
        ids.extend_from_slice(kept);
        ids.push(self.end_id);
        let len = ids.len();
        ids.resize(context, 0);
        Ok(Encoded {
            ids,
            len,
            truncated_tail: (!dropped.is_empty()).then(|| self.decode(dropped)),
        })
    }
}
