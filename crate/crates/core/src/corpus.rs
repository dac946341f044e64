//! Utterance containers, JSONL manifests and the seeded synthetic corpus used
//! for desk-scale experiments.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use u2kws_nn::Tensor;

use crate::error::{KwsError, Result};
use crate::frontend::{synth_utterance_spans, PrototypeParams, SynthSpec};
use crate::keywords::{find_subsequence, Keyword, Lexicon};

/// Features of one utterance with its word transcript. `keyword` indexes the
/// keyword list for labeled positives.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub words: Vec<String>,
    pub feats: Tensor<f32>,
    pub keyword: Option<usize>,
    /// Feature frames `[start, end)` covered by the labeled keyword.
    pub keyword_frames: Option<(usize, usize)>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.feats.rows()
    }
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    /// WAV file, relative to the manifest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio: Option<String>,
    /// Entry id inside the feature archive next to the manifest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<String>,
    pub transcript: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keyword: Option<String>,
    /// Feature frames `[start, end)` of the keyword, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keyword_frames: Option<(usize, usize)>,
}

impl ManifestRecord {
    pub fn words(&self) -> Vec<String> {
        self.transcript
            .split_whitespace()
            .map(str::to_string)
            .collect()
    }
}

/// Parses JSONL records, rejecting duplicate ids and records without a source.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRecord>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: ManifestRecord = serde_json::from_str(line)
            .map_err(|e| KwsError::Manifest(format!("line {}: {e}", n + 1)))?;
        if r.audio.is_none() && r.features.is_none() {
            return Err(KwsError::Manifest(format!(
                "`{}` has neither audio nor features",
                r.id
            )));
        }
        if !seen.insert(r.id.clone()) {
            return Err(KwsError::Manifest(format!("duplicate id `{}`", r.id)));
        }
        out.push(r);
    }
    Ok(out)
}

/// Reads a manifest and checks that every referenced audio file exists.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| KwsError::Manifest(format!("{}: {e}", path.display())))?;
    let records = parse_manifest(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    for r in &records {
        if let Some(a) = &r.audio {
            let p = base.join(a);
            if !p.exists() {
                return Err(KwsError::Manifest(format!(
                    "`{}`: missing audio {}",
                    r.id,
                    p.display()
                )));
            }
        }
    }
    Ok(records)
}

pub fn write_manifest<W: Write>(records: &[ManifestRecord], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Shape of a synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub n_phones: usize,
    pub feat_dim: usize,
    pub words: usize,
    pub phones_per_word: usize,
    pub utterance_words: (usize, usize),
    pub train_utterances: usize,
    pub keywords: usize,
    pub keyword_words: (usize, usize),
    /// Positive utterances per keyword in each evaluation split.
    pub test_positives: usize,
    pub dev_positives: usize,
    /// Keyword-free streams in each evaluation split.
    pub test_negatives: usize,
    pub dev_negatives: usize,
    pub negative_words: usize,
    /// Keyword copies with one word swapped for a confusable word, planted
    /// in every negative stream.
    pub near_misses: usize,
    /// Words on either side of a planted keyword, inclusive range.
    pub context_words: (usize, usize),
    pub phone_frames: (usize, usize),
    pub noise: f32,
    pub coarticulation: f32,
    pub prototypes: PrototypeParams,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_phones: 20,
            feat_dim: 40,
            words: 150,
            phones_per_word: 2,
            utterance_words: (3, 6),
            train_utterances: 2000,
            keywords: 30,
            keyword_words: (2, 4),
            test_positives: 8,
            dev_positives: 4,
            test_negatives: 40,
            dev_negatives: 20,
            negative_words: 20,
            near_misses: 2,
            context_words: (0, 2),
            phone_frames: (8, 14),
            noise: 0.3,
            coarticulation: 0.3,
            prototypes: PrototypeParams::default(),
            seed: 0,
        }
    }
}

/// Labeled positives and keyword-free negative streams.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalSplit {
    pub positives: Vec<Utterance>,
    pub negatives: Vec<Utterance>,
}

impl EvalSplit {
    /// Total negative duration in hours at a 10 ms hop.
    pub fn negative_hours(&self) -> f64 {
        self.negatives.iter().map(|u| u.frames()).sum::<usize>() as f64 * 0.01 / 3600.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub synth: SynthSpec,
    pub lexicon: Lexicon,
    pub keywords: Vec<Keyword>,
    pub train: Vec<Utterance>,
    pub dev: EvalSplit,
    pub test: EvalSplit,
}

fn stream_key(split: u64, index: usize) -> u64 {
    (split << 40) | index as u64
}

impl Corpus {
    pub fn generate(config: &CorpusConfig) -> Result<Self> {
        let c = config;
        if c.utterance_words.0 == 0 || c.utterance_words.0 > c.utterance_words.1 {
            return Err(KwsError::Config("utterance word range".into()));
        }
        if c.keyword_words.0 == 0 || c.keyword_words.0 > c.keyword_words.1 {
            return Err(KwsError::Config("keyword word range".into()));
        }
        let combos = (c.n_phones as f64).powi(c.phones_per_word as i32);
        if (c.words as f64) > combos {
            return Err(KwsError::Config(format!(
                "{} words cannot be distinct with {} phones of {} each",
                c.words, c.n_phones, c.phones_per_word
            )));
        }
        let mut synth = SynthSpec::generate(c.n_phones, c.feat_dim, c.prototypes, c.seed)?;
        synth.min_frames = c.phone_frames.0;
        synth.max_frames = c.phone_frames.1;
        synth.noise = c.noise;
        synth.coarticulation = c.coarticulation;
        synth.validate()?;

        let mut rng = ChaCha8Rng::seed_from_u64(c.seed ^ 0x5eed_c0de);
        let phones: Vec<String> = (1..=c.n_phones).map(|i| format!("p{i:02}")).collect();
        let mut lexicon = Lexicon::new(phones)?;
        let mut used = HashSet::new();
        let mut vocabulary = Vec::with_capacity(c.words);
        while vocabulary.len() < c.words {
            let ids: Vec<usize> = (0..c.phones_per_word)
                .map(|_| rng.random_range(1..=c.n_phones))
                .collect();
            if used.insert(ids.clone()) {
                let w = format!("w{:03}", vocabulary.len());
                lexicon.insert(&w, ids)?;
                vocabulary.push(w);
            }
        }
        // words differing in one phone, preferring swaps inside a confusion group
        let group = |p: usize| (p - 1) / c.prototypes.group_size.max(1);
        let word_pos: HashMap<&str, usize> = vocabulary
            .iter()
            .enumerate()
            .map(|(i, w)| (w.as_str(), i))
            .collect();
        let confusable: Vec<Vec<usize>> = vocabulary
            .iter()
            .map(|w| -> Result<Vec<usize>> {
                let a = lexicon.lookup(w)?;
                let mut near = Vec::new();
                let mut far = Vec::new();
                for (j, other) in vocabulary.iter().enumerate() {
                    let b = lexicon.lookup(other)?;
                    if a.len() != b.len() {
                        continue;
                    }
                    let diff: Vec<usize> = (0..a.len()).filter(|&i| a[i] != b[i]).collect();
                    if diff.len() == 1 {
                        if group(a[diff[0]]) == group(b[diff[0]]) {
                            near.push(j);
                        } else {
                            far.push(j);
                        }
                    }
                }
                Ok(if near.is_empty() { far } else { near })
            })
            .collect::<Result<_>>()?;
        let draw_words = |rng: &mut ChaCha8Rng, n: usize| -> Vec<String> {
            (0..n)
                .map(|_| vocabulary.choose(rng).expect("non-empty").clone())
                .collect()
        };

        let mut keywords = Vec::with_capacity(c.keywords);
        let mut seen = HashSet::new();
        while keywords.len() < c.keywords {
            let n = rng.random_range(c.keyword_words.0..=c.keyword_words.1);
            let text = draw_words(&mut rng, n).join(" ");
            if seen.insert(text.clone()) {
                keywords.push(Keyword::new(keywords.len(), &text, &lexicon)?);
            }
        }

        let make = |id: String,
                    words: Vec<String>,
                    key: u64,
                    keyword: Option<usize>|
         -> Result<Utterance> {
            let phones = lexicon.phonemize_words(&words)?;
            let syn = synth_utterance_spans(&synth, &phones, key)?;
            let keyword_frames = keyword.and_then(|k| {
                let kp = &keywords[k].phones;
                find_subsequence(&phones, kp)
                    .map(|at| (syn.spans[at].0, syn.spans[at + kp.len() - 1].1))
            });
            Ok(Utterance {
                id,
                feats: syn.frames,
                words,
                keyword,
                keyword_frames,
            })
        };

        let mut train = Vec::with_capacity(c.train_utterances);
        for i in 0..c.train_utterances {
            let n = rng.random_range(c.utterance_words.0..=c.utterance_words.1);
            let words = draw_words(&mut rng, n);
            train.push(make(
                format!("train-{i:05}"),
                words,
                stream_key(1, i),
                None,
            )?);
        }

        let contains_keyword = |words: &[String]| -> Result<bool> {
            let phones = lexicon.phonemize_words(words)?;
            Ok(keywords
                .iter()
                .any(|k| find_subsequence(&phones, &k.phones).is_some()))
        };
        let mut split = |tag: &str,
                         split_id: u64,
                         positives: usize,
                         negatives: usize|
         -> Result<EvalSplit> {
            let mut out = EvalSplit::default();
            let mut index = 0;
            for k in &keywords {
                for j in 0..positives {
                    let before = rng.random_range(c.context_words.0..=c.context_words.1);
                    let mut words = draw_words(&mut rng, before);
                    words.extend(k.text.split_whitespace().map(str::to_string));
                    let after = rng.random_range(c.context_words.0..=c.context_words.1);
                    words.extend(draw_words(&mut rng, after));
                    let id = format!("{tag}-pos-{:02}-{j:02}", k.id);
                    out.positives
                        .push(make(id, words, stream_key(split_id, index), Some(k.id))?);
                    index += 1;
                }
            }
            for j in 0..negatives {
                let words = loop {
                    let mut w = draw_words(&mut rng, c.negative_words);
                    for _ in 0..c.near_misses {
                        let k = &keywords[rng.random_range(0..keywords.len())];
                        let mut phrase: Vec<String> =
                            k.text.split_whitespace().map(str::to_string).collect();
                        let slots: Vec<usize> = (0..phrase.len())
                            .filter(|&i| !confusable[word_pos[phrase[i].as_str()]].is_empty())
                            .collect();
                        if let Some(&i) = slots.choose(&mut rng) {
                            let alt = confusable[word_pos[phrase[i].as_str()]]
                                .choose(&mut rng)
                                .expect("non-empty");
                            phrase[i] = vocabulary[*alt].clone();
                        }
                        let at = rng.random_range(0..=w.len());
                        w.splice(at..at, phrase);
                    }
                    if !contains_keyword(&w)? {
                        break w;
                    }
                };
                let id = format!("{tag}-neg-{j:03}");
                out.negatives
                    .push(make(id, words, stream_key(split_id, index), None)?);
                index += 1;
            }
            Ok(out)
        };
        let dev = split("dev", 2, c.dev_positives, c.dev_negatives)?;
        let test = split("test", 3, c.test_positives, c.test_negatives)?;
        Ok(Corpus {
            config: config.clone(),
            synth,
            lexicon,
            keywords,
            train,
            dev,
            test,
        })
    }

    /// Writes the phone inventory, lexicon, keyword list, synthesis spec,
    /// feature archives and one manifest per split into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        use crate::frontend::ArchiveWriter;
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("lexicon.tsv"), self.lexicon.to_tsv())?;
        std::fs::write(
            dir.join("phones.txt"),
            self.lexicon.phones().join("\n") + "\n",
        )?;
        let kw: String = self
            .keywords
            .iter()
            .map(|k| format!("{}\n", k.text))
            .collect();
        std::fs::write(dir.join("keywords.txt"), kw)?;
        std::fs::write(
            dir.join("synth.json"),
            serde_json::to_vec_pretty(&self.synth)?,
        )?;
        let mut written = Vec::new();
        let splits: [(&str, Vec<&Utterance>); 5] = [
            ("train", self.train.iter().collect()),
            ("dev_pos", self.dev.positives.iter().collect()),
            ("dev_neg", self.dev.negatives.iter().collect()),
            ("test_pos", self.test.positives.iter().collect()),
            ("test_neg", self.test.negatives.iter().collect()),
        ];
        for (name, utts) in splits {
            let mut ark = ArchiveWriter::create(
                &dir.join(format!("{name}.ark")),
                &dir.join(format!("{name}.idx")),
            )?;
            let mut records = Vec::with_capacity(utts.len());
            for u in utts {
                ark.write(&u.id, &u.feats)?;
                records.push(ManifestRecord {
                    id: u.id.clone(),
                    audio: None,
                    features: Some(u.id.clone()),
                    transcript: u.words.join(" "),
                    keyword: u.keyword.map(|k| self.keywords[k].text.clone()),
                    keyword_frames: u.keyword_frames,
                });
            }
            ark.finish()?;
            let path = dir.join(format!("{name}.jsonl"));
            write_manifest(
                &records,
                std::io::BufWriter::new(std::fs::File::create(&path)?),
            )?;
            written.push(path);
        }
        Ok(written)
    }
}

/// Loads the utterances of a manifest whose features live in the archive
/// `<stem>.ark` / `<stem>.idx` next to it. Keyword labels are resolved
/// against `keywords` by text.
pub fn load_split(manifest: &Path, keywords: &[Keyword]) -> Result<Vec<Utterance>> {
    use crate::frontend::ArchiveReader;
    let records = read_manifest(manifest)?;
    let mut reader = ArchiveReader::open(
        &manifest.with_extension("ark"),
        &manifest.with_extension("idx"),
    )?;
    records
        .into_iter()
        .map(|r| {
            let key = r
                .features
                .clone()
                .ok_or_else(|| KwsError::Manifest(format!("`{}` has no feature entry", r.id)))?;
            let keyword = match &r.keyword {
                Some(text) => Some(keywords.iter().position(|k| &k.text == text).ok_or_else(
                    || KwsError::Manifest(format!("`{}`: unknown keyword `{text}`", r.id)),
                )?),
                None => None,
            };
            Ok(Utterance {
                feats: reader.get(&key)?,
                words: r.words(),
                id: r.id,
                keyword,
                keyword_frames: r.keyword_frames,
            })
        })
        .collect()
}
