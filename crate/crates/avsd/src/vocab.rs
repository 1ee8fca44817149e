//! Token vocabulary shared by transcripts, the CTC head, and the decoder.
//!
//! Tokens render as single characters so transcripts are plain strings and
//! error rates are character-level. Three specials sit outside the token
//! set: the CTC blank (last CTC class), and BOS/EOS for the attention
//! decoder. BOS exists only on the decoder input side and EOS only on the
//! output side, so both reuse index `n_tokens` of their respective tables.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const TOKEN_CHARS: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEF";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<char>,
}

impl Vocabulary {
    /// Vocabulary of the first `n` synthetic token characters.
    pub fn synthetic(n: usize) -> Result<Self> {
        if n == 0 || n > TOKEN_CHARS.len() {
            return Err(Error::Vocab(format!(
                "token count {n} outside 1..={}",
                TOKEN_CHARS.len()
            )));
        }
        Ok(Vocabulary {
            tokens: TOKEN_CHARS[..n].iter().map(|&b| b as char).collect(),
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens.len()
    }

    /// Width of the CTC projection: tokens plus blank.
    pub fn ctc_width(&self) -> usize {
        self.tokens.len() + 1
    }

    /// Blank is the last CTC class.
    pub fn blank(&self) -> usize {
        self.tokens.len()
    }

    /// Width of the decoder output projection: tokens plus EOS.
    pub fn dec_width(&self) -> usize {
        self.tokens.len() + 1
    }

    /// EOS class on the decoder output side.
    pub fn eos(&self) -> usize {
        self.tokens.len()
    }

    /// BOS row of the decoder input embedding.
    pub fn bos(&self) -> usize {
        self.tokens.len()
    }

    pub fn token_char(&self, id: usize) -> char {
        self.tokens[id]
    }

    pub fn encode(&self, transcript: &str) -> Result<Vec<usize>> {
        transcript
            .chars()
            .map(|c| {
                self.tokens
                    .iter()
                    .position(|&t| t == c)
                    .ok_or_else(|| Error::Vocab(format!("token {c:?} outside vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.tokens[i]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_specials() {
        let v = Vocabulary::synthetic(32).unwrap();
        assert_eq!(v.n_tokens(), 32);
        assert_eq!(v.blank(), 32);
        assert_eq!(v.ctc_width(), 33);
        assert_eq!(v.eos(), 32);
        let ids = v.encode("abzF").unwrap();
        assert_eq!(ids, vec![0, 1, 25, 31]);
        assert_eq!(v.decode(&ids), "abzF");
    }

    #[test]
    fn unknown_token_is_an_error() {
        let v = Vocabulary::synthetic(4).unwrap();
        assert!(v.encode("e").is_err());
        assert!(v.encode("abcd").is_ok());
    }

    #[test]
    fn size_bounds() {
        assert!(Vocabulary::synthetic(0).is_err());
        assert!(Vocabulary::synthetic(33).is_err());
    }
}
