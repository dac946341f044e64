use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde_json::json;
use u2kws::cascade::{
    read_detections_jsonl, run_stream, write_detections_jsonl, CascadeConfig, DecoderMode,
};
use u2kws::corpus::{read_manifest, Corpus, CorpusConfig};
use u2kws::ctc::{estimate_segment, keyword_viterbi, write_posteriorgram_jsonl};
use u2kws::eval::{
    evaluate, f1, roc, select_threshold, DetectionLog, EvalOptions, PositiveRef, ScoreRule, FA_GRID,
};
use u2kws::keywords::{parse_keyword_list, Keyword};
use u2kws::model::{KwsModel, ModelConfig, SUBSAMPLING};
use u2kws::par::{self, Parallelism};
use u2kws::train::{train_stage1, train_stage2, TrainConfig};
use u2kws_nn::ChunkSpec;

use crate::data::{
    config_or_default, load_model, read_json, save_model, CheckpointMeta, CorpusDir,
};
use crate::stamp::Stamp;
use crate::{DetectArgs, EvalArgs, InspectArgs, Mode, ScoreKind, SynthArgs, TrainArgs};

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg: CorpusConfig = config_or_default(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let corpus = Corpus::generate(&cfg)?;
    corpus
        .write(&a.out)
        .with_context(|| format!("writing corpus to {}", a.out.display()))?;
    std::fs::write(a.out.join("corpus.json"), serde_json::to_vec_pretty(&cfg)?)?;
    Stamp::new("synth", &cfg)?
        .seed(cfg.seed)
        .write_for(&a.out)?;
    log::info!(
        "{}: {} train, {} test positives, {} test negatives ({:.3} h)",
        a.out.display(),
        corpus.train.len(),
        corpus.test.positives.len(),
        corpus.test.negatives.len(),
        corpus.test.negative_hours()
    );
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let dir = CorpusDir::open(&a.corpus)?;
    let utts = dir.split("train")?;
    let mut cfg: TrainConfig = config_or_default(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if a.steps.is_some() {
        cfg.max_steps = a.steps;
    }
    if let Some(e) = a.epochs {
        match a.stage {
            1 => cfg.stage1_epochs = e,
            _ => cfg.stage2_epochs = e,
        }
    }
    let (model, mut store, model_cfg) = match &a.init {
        Some(path) => {
            if a.model.is_some() || a.baseline {
                bail!("--model and --baseline only apply to a fresh model, not with --init");
            }
            let (m, s, meta) = load_model(path)?;
            (m, s, meta.model)
        }
        None => {
            let mut mc: ModelConfig = match &a.model {
                Some(p) => read_json(p)?,
                None => ModelConfig::desk(),
            };
            mc.vocab_size = dir.lexicon.vocab().size();
            mc.feat_dim = dir.feat_dim(&utts)?;
            mc.seed = cfg.seed;
            if a.baseline {
                mc = mc.without_keyword_modules();
            }
            let (m, s) = KwsModel::init::<f32>(&mc)?;
            (m, s, mc)
        }
    };
    let on_epoch = |e: usize, _: &_| {
        log::info!("stage {} epoch {e} done", a.stage);
        Ok(())
    };
    let report = match a.stage {
        1 => train_stage1(&model, &mut store, &utts, &dir.lexicon, &cfg, on_epoch)?,
        _ => train_stage2(&model, &mut store, &utts, &dir.lexicon, &cfg, on_epoch)?,
    };
    let meta = CheckpointMeta {
        model: model_cfg,
        stage: a.stage,
    };
    save_model(&store, &meta, &a.out)?;
    let log_path = a.log.unwrap_or_else(|| with_suffix(&a.out, ".log.csv"));
    report.write_csv(create(&log_path)?)?;
    Stamp::new(
        "train",
        &json!({"stage": a.stage, "model": meta.model, "train": cfg}),
    )?
    .checkpoint(&a.out)?
    .seed(cfg.seed)
    .write_for(&a.out)?;
    log::info!(
        "{} steps, final loss {:?}; wrote {}",
        report.log.len(),
        report.log.last().map(|r| r.total),
        a.out.display()
    );
    Ok(())
}

fn keyword_list(dir: &CorpusDir, path: Option<&Path>) -> Result<Vec<Keyword>> {
    match path {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            parse_keyword_list(&text, &dir.lexicon)
                .with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(dir.keywords.clone()),
    }
}

pub fn detect(a: DetectArgs) -> Result<()> {
    let dir = CorpusDir::open(&a.corpus)?;
    let (model, store, _) = load_model(&a.checkpoint)?;
    let keywords = keyword_list(&dir, a.keywords.as_deref())?;
    let mut cascade: CascadeConfig = config_or_default(a.cascade.as_deref())?;
    if let Some(m) = a.mode {
        cascade.decoder_mode = match m {
            Mode::Off => DecoderMode::Off,
            Mode::Causal => DecoderMode::Causal,
            Mode::Full => DecoderMode::Full,
        };
    }
    if a.permissive {
        cascade = cascade.permissive();
    }
    if let Some(t) = a.stage1_threshold {
        cascade.stage1_threshold = t;
    }
    if let Some(t) = a.stage2_threshold {
        cascade.stage2_threshold = t;
    }
    cascade.validate()?;
    let outer = if a.sequential {
        Parallelism::Sequential
    } else {
        Parallelism::Parallel
    };

    let splits = if a.splits.is_empty() && a.manifests.is_empty() {
        vec!["test_pos".to_string(), "test_neg".to_string()]
    } else {
        a.splits.clone()
    };
    let mut utts = Vec::new();
    for s in &splits {
        utts.extend(dir.split(s)?);
    }
    for m in &a.manifests {
        utts.extend(dir.load(m)?);
    }
    // streams already run in parallel; keep each stream's keywords on one thread
    let inner = CascadeConfig {
        parallelism: if outer.is_parallel() {
            Parallelism::Sequential
        } else {
            cascade.parallelism
        },
        ..cascade.clone()
    };
    let results = par::map(outer, &utts, |u| {
        run_stream(&model, &store, &keywords, &inner, &u.feats)
    });
    let mut out = create(&a.out)?;
    let mut count = 0;
    for (u, r) in utts.iter().zip(results) {
        let dets = r.with_context(|| format!("stream `{}`", u.id))?;
        count += dets.len();
        write_detections_jsonl(&u.id, &dets, &mut out)?;
    }
    out.flush()?;
    let inputs: Vec<String> = splits
        .iter()
        .cloned()
        .chain(a.manifests.iter().map(|m| m.display().to_string()))
        .collect();
    Stamp::new(
        "detect",
        &json!({
            "cascade": cascade,
            "keywords": keywords.iter().map(|k| &k.text).collect::<Vec<_>>(),
            "inputs": inputs,
        }),
    )?
    .checkpoint(&a.checkpoint)?
    .write_for(&a.out)?;
    log::info!(
        "{count} detections over {} streams; wrote {}",
        utts.len(),
        a.out.display()
    );
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let dir = CorpusDir::open(&a.corpus)?;
    let text = std::fs::read_to_string(&a.detections)
        .with_context(|| format!("reading {}", a.detections.display()))?;
    let mut log = DetectionLog::new();
    for r in read_detections_jsonl(&text)
        .with_context(|| format!("parsing {}", a.detections.display()))?
    {
        log.entry(r.stream).or_default().push(r.detection);
    }
    let or_default = |given: &[PathBuf], split: &str| {
        if given.is_empty() {
            vec![dir.manifest(split)]
        } else {
            given.to_vec()
        }
    };
    let index: HashMap<&str, usize> = dir
        .keywords
        .iter()
        .enumerate()
        .map(|(i, k)| (k.text.as_str(), i))
        .collect();
    let mut positives = Vec::new();
    for m in or_default(&a.positives, "test_pos") {
        for r in read_manifest(&m)? {
            let text = r
                .keyword
                .as_deref()
                .ok_or_else(|| anyhow!("{}: `{}` has no keyword label", m.display(), r.id))?;
            let keyword = *index
                .get(text)
                .ok_or_else(|| anyhow!("{}: unknown keyword `{text}`", m.display()))?;
            positives.push(PositiveRef {
                stream: r.id,
                keyword,
                truth: r
                    .keyword_frames
                    .map(|(s, e)| (s / SUBSAMPLING, e.div_ceil(SUBSAMPLING))),
            });
        }
    }
    let mut negatives = Vec::new();
    let mut frames = 0;
    for m in or_default(&a.negatives, "test_neg") {
        if a.negative_hours.is_some() {
            negatives.extend(read_manifest(&m)?.into_iter().map(|r| r.id));
        } else {
            for u in dir.load(&m)? {
                frames += u.frames();
                negatives.push(u.id);
            }
        }
    }
    let hours = a.negative_hours.unwrap_or(frames as f64 * 0.01 / 3600.0);
    let rule = match a.score {
        ScoreKind::Stage1 => ScoreRule::Stage1,
        ScoreKind::Stage2 => ScoreRule::Stage2 {
            stage1_threshold: a.stage1_threshold.unwrap_or(f64::NEG_INFINITY),
        },
    };
    let options = EvalOptions {
        require_overlap: a.require_overlap,
    };
    let table = evaluate(
        &log,
        &positives,
        &negatives,
        &dir.keywords,
        hours,
        rule,
        options,
    )?;
    let theta = a.theta.unwrap_or_else(|| select_threshold(&table).0);
    let report = f1(&table, theta)?;
    let curve = roc(&table, &FA_GRID)?;

    std::fs::create_dir_all(&a.out)?;
    curve.write_csv(create(&a.out.join("roc.csv"))?)?;
    report.write_csv(&a.name, create(&a.out.join("f1.csv"))?, true)?;
    let n = table.keywords.len() as f64;
    let frr = table.keywords.iter().map(|k| k.frr(theta)).sum::<f64>() / n;
    let fa = table
        .keywords
        .iter()
        .map(|k| k.false_alarms(theta))
        .sum::<usize>() as f64
        / hours;
    let summary = json!({
        "theta": theta,
        "macro_f1": report.macro_f1,
        "frr": frr,
        "fa_per_hour": fa,
        "negative_hours": hours,
        "keywords": table.keywords.iter().zip(&report.per_keyword).map(|(k, (_, c))| json!({
            "keyword": k.keyword,
            "frr": k.frr(theta),
            "fa_per_hour": k.false_alarms(theta) as f64 / hours,
            "f1": c.f1,
        })).collect::<Vec<_>>(),
    });
    std::fs::write(
        a.out.join("summary.json"),
        serde_json::to_vec_pretty(&summary)?,
    )?;
    Stamp::new(
        "eval",
        &json!({"rule": rule, "theta": theta, "negative_hours": hours, "options": options}),
    )?
    .write_for(&a.out)?;
    println!(
        "theta {theta:.4}  frr {frr:.4}  fa/h {fa:.4}  macro-F1 {:.4}",
        report.macro_f1
    );
    Ok(())
}

pub fn inspect(a: InspectArgs) -> Result<()> {
    let dir = CorpusDir::open(&a.corpus)?;
    let (model, store, _) = load_model(&a.checkpoint)?;
    let utt = dir
        .split(&a.split)?
        .into_iter()
        .find(|u| u.id == a.utt)
        .ok_or_else(|| anyhow!("no utterance `{}` in split `{}`", a.utt, a.split))?;
    let keyword = match (&a.keyword, utt.keyword) {
        (Some(text), _) => Keyword::new(0, text, &dir.lexicon)?,
        (None, Some(k)) => dir.keywords[k].clone(),
        (None, None) => bail!("`{}` is unlabeled; pass --keyword", utt.id),
    };
    let spec = match a.chunk {
        Some(c) => ChunkSpec::chunked(c),
        None => ChunkSpec::full(),
    };
    let h = model.encode_features(&store, &utt.feats, spec)?.h;
    let emb = model
        .has_bias()
        .then(|| model.keyword_embedding(&store, &keyword.encoder_input))
        .transpose()?;
    let (hb, lp) = model.posteriors(&store, &h, emb.as_ref())?;

    std::fs::create_dir_all(&a.out)?;
    write_posteriorgram_jsonl(&lp, a.top, create(&a.out.join("posteriorgram.jsonl"))?)?;
    let tokens: &[usize] = if model.has_bias() {
        &keyword.encoder_input
    } else {
        &keyword.phones
    };
    let path = keyword_viterbi(&lp, tokens, 0..lp.rows())?;
    let cascade = CascadeConfig::default();
    let search = path.start.saturating_sub(cascade.segment_margin)..path.end + 1;
    let segment = estimate_segment(
        &lp,
        model.vocab().eok(),
        keyword.phones.len(),
        cascade.spike_threshold,
        search,
    )?
    .padded(cascade.padding, 0..lp.rows());
    let decoder = if model.has_decoder() {
        Some(model.decoder_score(
            &store,
            &hb.slice_rows(segment.start, segment.len()),
            &keyword.phones,
        )?)
    } else {
        None
    };
    let tokens: Vec<String> = path
        .alignment
        .iter()
        .map(|&t| dir.lexicon.token_name(t))
        .collect();
    let dump = json!({
        "utterance": utt.id,
        "keyword": keyword.text,
        "frames": lp.rows(),
        "path": path,
        "path_tokens": tokens,
        "segment": segment,
        "stage1": path.score,
        "stage2": decoder,
    });
    std::fs::write(
        a.out.join("segment.json"),
        serde_json::to_vec_pretty(&dump)?,
    )?;
    Stamp::new(
        "inspect",
        &json!({"split": a.split, "utt": a.utt, "keyword": keyword.text, "chunk": a.chunk}),
    )?
    .checkpoint(&a.checkpoint)?
    .write_for(&a.out)?;
    println!(
        "{}: path {}..={} score {:.4}, segment {}..={}, decoder {:?}",
        keyword.text, path.start, path.end, path.score, segment.start, segment.end, decoder
    );
    Ok(())
}
