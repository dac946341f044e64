//! Phone inventory, lexicon, keywords and the training-time keyword sampler.

use std::collections::{HashMap, HashSet};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KwsError, Result};

/// Output-unit layout: blank is 0, phones are `1..=n_phones`, followed by the
/// shared `<sos/eos>` symbol and `<eok>`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub n_phones: usize,
}

impl Vocab {
    pub const BLANK: usize = 0;

    pub fn new(n_phones: usize) -> Result<Self> {
        if n_phones == 0 {
            return Err(KwsError::Config("phone inventory is empty".into()));
        }
        Ok(Vocab { n_phones })
    }

    pub fn size(&self) -> usize {
        self.n_phones + 3
    }

    pub fn sos_eos(&self) -> usize {
        self.n_phones + 1
    }

    pub fn eok(&self) -> usize {
        self.n_phones + 2
    }

    pub fn is_phone(&self, id: usize) -> bool {
        (1..=self.n_phones).contains(&id)
    }
}

/// Word → phone-id map over a fixed phone inventory.
#[derive(Clone, Debug, PartialEq)]
pub struct Lexicon {
    phones: Vec<String>,
    phone_index: HashMap<String, usize>,
    words: Vec<(String, Vec<usize>)>,
    word_index: HashMap<String, usize>,
}

impl Lexicon {
    /// `phones[i]` gets id `i + 1`.
    pub fn new(phones: Vec<String>) -> Result<Self> {
        Vocab::new(phones.len())?;
        let mut phone_index = HashMap::new();
        for (i, p) in phones.iter().enumerate() {
            if phone_index.insert(p.clone(), i + 1).is_some() {
                return Err(KwsError::Config(format!("duplicate phone `{p}`")));
            }
        }
        Ok(Lexicon {
            phones,
            phone_index,
            words: Vec::new(),
            word_index: HashMap::new(),
        })
    }

    /// Parses `word<TAB>phone phone ...` lines. Without an explicit inventory
    /// the phones are numbered in sorted order.
    pub fn from_tsv(text: &str, inventory: Option<&[String]>) -> Result<Self> {
        let mut rows = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (word, phones) = line
                .split_once('\t')
                .ok_or_else(|| KwsError::Config(format!("lexicon line {} has no tab", n + 1)))?;
            let phones: Vec<&str> = phones.split_whitespace().collect();
            if phones.is_empty() {
                return Err(KwsError::Config(format!(
                    "lexicon word `{word}` has no phones"
                )));
            }
            rows.push((word.to_string(), phones));
        }
        let inventory = match inventory {
            Some(inv) => inv.to_vec(),
            None => {
                let mut set: Vec<String> = rows
                    .iter()
                    .flat_map(|(_, p)| p.iter().map(|s| s.to_string()))
                    .collect::<HashSet<_>>()
                    .into_iter()
                    .collect();
                set.sort();
                set
            }
        };
        let mut lex = Lexicon::new(inventory)?;
        for (word, phones) in rows {
            let ids = phones
                .iter()
                .map(|p| lex.phone_id(p))
                .collect::<Result<Vec<_>>>()?;
            lex.insert(&word, ids)?;
        }
        Ok(lex)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (w, ids) in &self.words {
            let names: Vec<&str> = ids.iter().map(|&i| self.phones[i - 1].as_str()).collect();
            out.push_str(&format!("{w}\t{}\n", names.join(" ")));
        }
        out
    }

    pub fn insert(&mut self, word: &str, phones: Vec<usize>) -> Result<()> {
        if word.is_empty() || word.contains(char::is_whitespace) {
            return Err(KwsError::Config(format!("invalid lexicon word `{word}`")));
        }
        if phones.is_empty() {
            return Err(KwsError::Config(format!(
                "lexicon word `{word}` has no phones"
            )));
        }
        if let Some(&id) = phones.iter().find(|&&p| !self.vocab().is_phone(p)) {
            return Err(KwsError::PhoneIdOutOfRange {
                id,
                size: self.vocab().size(),
            });
        }
        match self.word_index.get(word) {
            Some(&i) => self.words[i].1 = phones,
            None => {
                self.word_index.insert(word.to_string(), self.words.len());
                self.words.push((word.to_string(), phones));
            }
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab {
            n_phones: self.phones.len(),
        }
    }

    pub fn phones(&self) -> &[String] {
        &self.phones
    }

    pub fn phone_id(&self, name: &str) -> Result<usize> {
        self.phone_index
            .get(name)
            .copied()
            .ok_or_else(|| KwsError::UnknownPhone(name.to_string()))
    }

    /// Display name of any output id, including the reserved ones.
    pub fn token_name(&self, id: usize) -> String {
        let v = self.vocab();
        if id == Vocab::BLANK {
            "<blank>".into()
        } else if id == v.sos_eos() {
            "<sos/eos>".into()
        } else if id == v.eok() {
            "<eok>".into()
        } else if v.is_phone(id) {
            self.phones[id - 1].clone()
        } else {
            format!("<{id}>")
        }
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.words.iter().map(|(w, _)| w.as_str())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn lookup(&self, word: &str) -> Result<&[usize]> {
        self.word_index
            .get(word)
            .map(|&i| self.words[i].1.as_slice())
            .ok_or_else(|| KwsError::Oov(word.to_string()))
    }

    /// Concatenated phones of whitespace-separated words.
    pub fn phonemize(&self, text: &str) -> Result<Vec<usize>> {
        let words: Vec<&str> = text.split_whitespace().collect();
        self.phonemize_words(&words)
    }

    pub fn phonemize_words<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<usize>> {
        if words.is_empty() {
            return Err(KwsError::EmptyKeyword);
        }
        let mut out = Vec::new();
        for w in words {
            out.extend_from_slice(self.lookup(w.as_ref())?);
        }
        Ok(out)
    }
}

/// A customized keyword ready for the keyword encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keyword {
    pub id: usize,
    pub text: String,
    pub n_words: usize,
    pub phones: Vec<usize>,
    /// `phones` followed by `<eok>`.
    pub encoder_input: Vec<usize>,
}

impl Keyword {
    pub fn new(id: usize, text: &str, lexicon: &Lexicon) -> Result<Self> {
        let words: Vec<&str> = text.split_whitespace().collect();
        let phones = lexicon.phonemize_words(&words)?;
        Ok(Self::from_phones(
            id,
            words.join(" "),
            words.len(),
            phones,
            lexicon.vocab(),
        ))
    }

    pub fn from_phones(
        id: usize,
        text: String,
        n_words: usize,
        phones: Vec<usize>,
        vocab: Vocab,
    ) -> Self {
        let mut encoder_input = phones.clone();
        encoder_input.push(vocab.eok());
        Keyword {
            id,
            text,
            n_words,
            phones,
            encoder_input,
        }
    }
}

/// Reads a keyword list: one phrase per line, blank lines ignored.
pub fn parse_keyword_list(text: &str, lexicon: &Lexicon) -> Result<Vec<Keyword>> {
    let kws: Vec<Keyword> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .enumerate()
        .map(|(i, l)| Keyword::new(i, l, lexicon))
        .collect::<Result<_>>()?;
    if kws.is_empty() {
        return Err(KwsError::NoKeywords);
    }
    Ok(kws)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

/// Keyword-dependent fields of one training sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeywordSample {
    pub polarity: Polarity,
    pub keyword_words: Vec<String>,
    pub keyword: Keyword,
    pub transcript_phones: Vec<usize>,
    pub ctc_target: Vec<usize>,
    pub decoder_input: Vec<usize>,
    pub decoder_target: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub min_words: usize,
    pub max_words: usize,
    pub max_retries: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            min_words: 2,
            max_words: 4,
            max_retries: 100,
        }
    }
}

/// First start index of `needle` inside `hay`.
pub fn find_subsequence(hay: &[usize], needle: &[usize]) -> Option<usize> {
    if needle.is_empty() || needle.len() > hay.len() {
        return None;
    }
    hay.windows(needle.len()).position(|w| w == needle)
}

/// Positive sample using transcript words `start..start + len` as the keyword.
pub fn positive_from_span<S: AsRef<str>>(
    transcript: &[S],
    start: usize,
    len: usize,
    lexicon: &Lexicon,
) -> Result<KeywordSample> {
    if len == 0 || start + len > transcript.len() {
        return Err(KwsError::EmptyKeyword);
    }
    let words: Vec<String> = transcript[start..start + len]
        .iter()
        .map(|w| w.as_ref().to_string())
        .collect();
    let transcript_phones = lexicon.phonemize_words(transcript)?;
    let phones = lexicon.phonemize_words(&words)?;
    let vocab = lexicon.vocab();
    let at =
        find_subsequence(&transcript_phones, &phones).expect("span is contained in its transcript");
    let mut ctc_target = transcript_phones.clone();
    ctc_target.insert(at + phones.len(), vocab.eok());
    let mut decoder_input = vec![vocab.sos_eos()];
    decoder_input.extend_from_slice(&phones);
    let mut decoder_target = phones.clone();
    decoder_target.push(vocab.eok());
    Ok(KeywordSample {
        polarity: Polarity::Positive,
        keyword: Keyword::from_phones(0, words.join(" "), len, phones, vocab),
        keyword_words: words,
        transcript_phones,
        ctc_target,
        decoder_input,
        decoder_target,
    })
}

/// Negative sample with the given keyword words. Fails if the keyword's
/// phones occur in the transcript.
pub fn negative_from_words<S: AsRef<str>, K: AsRef<str>>(
    transcript: &[S],
    keyword_words: &[K],
    lexicon: &Lexicon,
) -> Result<KeywordSample> {
    let words: Vec<String> = keyword_words
        .iter()
        .map(|w| w.as_ref().to_string())
        .collect();
    let transcript_phones = lexicon.phonemize_words(transcript)?;
    let phones = lexicon.phonemize_words(&words)?;
    if find_subsequence(&transcript_phones, &phones).is_some() {
        return Err(KwsError::Config(format!(
            "keyword `{}` occurs in the transcript",
            words.join(" ")
        )));
    }
    let vocab = lexicon.vocab();
    let mut decoder_input = vec![vocab.sos_eos()];
    decoder_input.extend_from_slice(&phones);
    let decoder_target = vec![vocab.sos_eos(); decoder_input.len()];
    Ok(KeywordSample {
        polarity: Polarity::Negative,
        keyword: Keyword::from_phones(0, words.join(" "), words.len(), phones, vocab),
        keyword_words: words,
        ctc_target: transcript_phones.clone(),
        transcript_phones,
        decoder_input,
        decoder_target,
    })
}

/// Draws a keyword for one utterance.
///
/// Positives take a random contiguous word span of the transcript. Negatives
/// combine random lexicon words absent from the transcript, with a length
/// drawn from the same range, rejecting draws whose phones still occur in it.
pub fn sample_keyword<S: AsRef<str>>(
    transcript: &[S],
    polarity: Polarity,
    lexicon: &Lexicon,
    config: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<KeywordSample> {
    if transcript.is_empty() {
        return Err(KwsError::EmptyKeyword);
    }
    if config.min_words == 0 || config.min_words > config.max_words {
        return Err(KwsError::Config("keyword word range".into()));
    }
    match polarity {
        Polarity::Positive => {
            if transcript.len() < config.min_words {
                return Err(KwsError::TranscriptTooShort {
                    got: transcript.len(),
                    need: config.min_words,
                });
            }
            let len = rng.random_range(config.min_words..=config.max_words.min(transcript.len()));
            let start = rng.random_range(0..=transcript.len() - len);
            positive_from_span(transcript, start, len, lexicon)
        }
        Polarity::Negative => {
            let present: HashSet<&str> = transcript.iter().map(|w| w.as_ref()).collect();
            let pool: Vec<&str> = lexicon.words().filter(|w| !present.contains(w)).collect();
            if pool.is_empty() {
                return Err(KwsError::NegativeSampling(0));
            }
            for _ in 0..config.max_retries {
                let len = rng.random_range(config.min_words..=config.max_words);
                let words: Vec<&str> = (0..len)
                    .map(|_| *pool.choose(rng).expect("non-empty"))
                    .collect();
                if let Ok(s) = negative_from_words(transcript, &words, lexicon) {
                    return Ok(s);
                }
            }
            Err(KwsError::NegativeSampling(config.max_retries))
        }
    }
}

/// Deterministic per-utterance generator for the sampler.
pub fn sample_rng(seed: u64, epoch: u64, utterance: u64) -> ChaCha8Rng {
    let mut s = ChaCha8Rng::seed_from_u64(seed);
    s.set_stream(epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ utterance);
    s
}
