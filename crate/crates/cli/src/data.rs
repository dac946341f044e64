//! Reading corpus directories, configs and checkpoints from disk.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use u2kws::corpus::{load_split, CorpusConfig, Utterance};
use u2kws::keywords::{parse_keyword_list, Keyword, Lexicon};
use u2kws::model::{KwsModel, ModelConfig};
use u2kws_nn::checkpoint::{load_into, read_file, save_file};
use u2kws_nn::ParamStore;

/// A directory written by `synth` (or laid out the same way by hand).
pub struct CorpusDir {
    pub root: PathBuf,
    pub lexicon: Lexicon,
    pub keywords: Vec<Keyword>,
    pub config: Option<CorpusConfig>,
}

impl CorpusDir {
    pub fn open(root: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<String> {
            let p = root.join(name);
            std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))
        };
        let inventory: Option<Vec<String>> = root
            .join("phones.txt")
            .exists()
            .then(|| read("phones.txt"))
            .transpose()?
            .map(|t| t.split_whitespace().map(str::to_string).collect());
        let lexicon = Lexicon::from_tsv(&read("lexicon.tsv")?, inventory.as_deref())
            .with_context(|| format!("parsing {}", root.join("lexicon.tsv").display()))?;
        let keywords = parse_keyword_list(&read("keywords.txt")?, &lexicon)
            .with_context(|| format!("parsing {}", root.join("keywords.txt").display()))?;
        let config = root
            .join("corpus.json")
            .exists()
            .then(|| read_json(&root.join("corpus.json")))
            .transpose()?;
        Ok(CorpusDir {
            root: root.to_path_buf(),
            lexicon,
            keywords,
            config,
        })
    }

    pub fn manifest(&self, split: &str) -> PathBuf {
        self.root.join(format!("{split}.jsonl"))
    }

    pub fn split(&self, split: &str) -> Result<Vec<Utterance>> {
        self.load(&self.manifest(split))
    }

    pub fn load(&self, manifest: &Path) -> Result<Vec<Utterance>> {
        load_split(manifest, &self.keywords)
            .with_context(|| format!("loading {}", manifest.display()))
    }

    pub fn feat_dim(&self, sample: &[Utterance]) -> Result<usize> {
        match (&self.config, sample.first()) {
            (Some(c), _) => Ok(c.feat_dim),
            (None, Some(u)) => Ok(u.feats.cols()),
            (None, None) => bail!("cannot infer feature dimension: empty split and no corpus.json"),
        }
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Optional JSON config file, defaulting when absent.
pub fn config_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), read_json)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    #[serde(default)]
    pub stage: u8,
}

pub fn save_model(store: &ParamStore<f32>, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_file(store, serde_json::to_value(meta)?, path)
        .with_context(|| format!("writing {}", path.display()))
}

pub fn load_model(path: &Path) -> Result<(KwsModel, ParamStore<f32>, CheckpointMeta)> {
    let (header, tensors) =
        read_file::<f32>(path).with_context(|| format!("reading {}", path.display()))?;
    let meta: CheckpointMeta = serde_json::from_value(header.meta)
        .with_context(|| format!("{}: checkpoint has no model config", path.display()))?;
    let (model, mut store) = KwsModel::init::<f32>(&meta.model)?;
    load_into(&mut store, &tensors).with_context(|| format!("loading {}", path.display()))?;
    Ok((model, store, meta))
}
