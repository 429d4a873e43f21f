//! Non-overlapping k-mer tokenization of DNA barcodes and word tokenization of
//! taxonomy text.
//!
//! Both tokenizers produce a fixed-length [`TokenSeq`] whose mask is a
//! contiguous run of `true` followed by padding.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use thiserror::Error;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
const PAD_TOKEN: &str = "[PAD]";
const UNK_TOKEN: &str = "[UNK]";

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("k must be in 1..=12, got {0}")]
    BadK(usize),
    #[error("max_len_nt ({max_len_nt}) must be >= k ({k})")]
    MaxLenTooSmall { max_len_nt: usize, k: usize },
    #[error("max_len must be >= 1")]
    ZeroMaxLen,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("vocab line {line}: {msg}")]
    VocabFormat { line: usize, msg: String },
}

/// Token ids plus a padding mask (`true` = real token).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
}

impl TokenSeq {
    fn from_real(mut ids: Vec<u32>, max_len: usize) -> Self {
        ids.truncate(max_len);
        let n = ids.len();
        ids.resize(max_len, PAD);
        let mask = (0..max_len).map(|i| i < n).collect();
        Self { ids, mask }
    }

    /// Number of real (unmasked) tokens.
    pub fn real_len(&self) -> usize {
        self.mask.iter().take_while(|&&m| m).count()
    }

    pub fn max_len(&self) -> usize {
        self.ids.len()
    }
}

/// All `4^k` k-mers over ACGT plus PAD and UNK. PAD = 0, UNK = 1, k-mers in
/// lexicographic order from 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KmerVocab {
    k: usize,
}

impl KmerVocab {
    pub fn new(k: usize) -> Result<Self, TokenizerError> {
        if !(1..=12).contains(&k) {
            return Err(TokenizerError::BadK(k));
        }
        Ok(Self { k })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        (1usize << (2 * self.k)) + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Id of an upper-case k-mer; UNK if it holds anything other than ACGT.
    pub fn id(&self, kmer: &[u8]) -> u32 {
        debug_assert_eq!(kmer.len(), self.k);
        let mut code = 0u32;
        for &b in kmer {
            let digit = match b {
                b'A' => 0,
                b'C' => 1,
                b'G' => 2,
                b'T' => 3,
                _ => return UNK,
            };
            code = code * 4 + digit;
        }
        code + 2
    }

    pub fn token(&self, id: u32) -> Option<String> {
        match id {
            PAD => Some(PAD_TOKEN.into()),
            UNK => Some(UNK_TOKEN.into()),
            _ if (id as usize) < self.len() => {
                let mut code = id - 2;
                let mut out = vec![b'A'; self.k];
                for slot in out.iter_mut().rev() {
                    *slot = b"ACGT"[(code % 4) as usize];
                    code /= 4;
                }
                Some(String::from_utf8(out).unwrap())
            }
            _ => None,
        }
    }

    pub fn write_tsv<W: Write>(&self, mut sink: W) -> Result<(), TokenizerError> {
        for id in 0..self.len() as u32 {
            writeln!(sink, "{}\t{}", self.token(id).unwrap(), id)?;
        }
        Ok(())
    }
}

/// Sequence length in tokens for a nucleotide budget.
pub fn dna_max_tokens(k: usize, max_len_nt: usize) -> usize {
    max_len_nt / k
}

/// Truncates to `max_len_nt` nucleotides, splits into whole non-overlapping
/// k-mers (a trailing remainder shorter than k is dropped) and pads to
/// `max_len_nt / k` tokens. An empty barcode yields an all-PAD sequence.
pub fn tokenize_dna(barcode: &str, vocab: &KmerVocab, max_len_nt: usize) -> Result<TokenSeq, TokenizerError> {
    let k = vocab.k();
    if max_len_nt < k {
        return Err(TokenizerError::MaxLenTooSmall { max_len_nt, k });
    }
    let upper = barcode.to_ascii_uppercase();
    let bytes = &upper.as_bytes()[..upper.len().min(max_len_nt)];
    let ids = bytes.chunks_exact(k).map(|kmer| vocab.id(kmer)).collect();
    Ok(TokenSeq::from_real(ids, dna_max_tokens(k, max_len_nt)))
}

/// Closed word vocabulary: PAD, UNK, then sorted unique words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordVocab {
    ids: BTreeMap<String, u32>,
    words: Vec<String>,
}

impl WordVocab {
    /// Vocabulary in id order, specials first.
    pub fn tokens(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.ids.get(word).copied().unwrap_or(UNK)
    }

    /// Rebuilds from an id-ordered token list (as stored by [`WordVocab::tokens`]).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, TokenizerError> {
        if tokens.len() < 2 || tokens[0] != PAD_TOKEN || tokens[1] != UNK_TOKEN {
            return Err(TokenizerError::VocabFormat { line: 1, msg: "missing PAD/UNK specials".into() });
        }
        let mut ids = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate().skip(2) {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(TokenizerError::VocabFormat { line: i + 1, msg: format!("duplicate token {t:?}") });
            }
        }
        Ok(Self { ids, words: tokens })
    }

    pub fn write_tsv<W: Write>(&self, mut sink: W) -> Result<(), TokenizerError> {
        for (i, w) in self.words.iter().enumerate() {
            writeln!(sink, "{w}\t{i}")?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(source: R) -> Result<Self, TokenizerError> {
        let mut tokens = Vec::new();
        for (i, line) in source.lines().enumerate() {
            let line = line?;
            let (tok, id) = line
                .split_once('\t')
                .ok_or_else(|| TokenizerError::VocabFormat { line: i + 1, msg: "expected token<TAB>id".into() })?;
            if id.parse::<usize>().ok() != Some(i) {
                return Err(TokenizerError::VocabFormat { line: i + 1, msg: format!("id {id:?} out of order") });
            }
            tokens.push(tok.to_string());
        }
        Self::from_tokens(tokens)
    }
}

pub fn build_word_vocab<S: AsRef<str>>(corpus: &[S]) -> WordVocab {
    let unique: BTreeSet<&str> = corpus.iter().flat_map(|s| s.as_ref().split_whitespace()).collect();
    let words: Vec<String> = [PAD_TOKEN, UNK_TOKEN]
        .into_iter()
        .chain(unique)
        .map(str::to_owned)
        .collect();
    WordVocab::from_tokens(words).expect("specials present, words unique")
}

/// Whitespace split, unknown words to UNK, truncate/pad to `max_len`.
pub fn tokenize_text(text: &str, vocab: &WordVocab, max_len: usize) -> Result<TokenSeq, TokenizerError> {
    if max_len == 0 {
        return Err(TokenizerError::ZeroMaxLen);
    }
    let ids = text.split_whitespace().map(|w| vocab.id(w)).collect();
    Ok(TokenSeq::from_real(ids, max_len))
}
