//! Command implementations behind the `textcap` binary: dataset synthesis,
//! vocabulary building, training, captioning, and evaluation.
//!
//! Exit codes: 0 success, 2 usage error, 3 data or contract error,
//! 4 numerical failure.

pub mod manifest;

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use textcap_core::decoding::{self, DecodeConfig};
use textcap_core::features::{self, SynthConfig};
use textcap_core::metrics::{self, EvalCorpus, EvalItem};
use textcap_core::model::Variant;
use textcap_core::tokenize::tokenize;
use textcap_core::training::{self, TrainConfig};
use textcap_core::vocab::{normalize_ocr_token, ExtendedVocabulary, Vocabulary};
use textcap_core::{checkpoint, Error};

use manifest::RunManifest;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Error carrying the process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.message)
    }
}

impl std::error::Error for CliError {}

fn usage(message: impl Into<String>) -> CliError {
    CliError { code: EXIT_USAGE, message: message.into() }
}

impl From<Error> for CliError {
    fn from(e: Error) -> CliError {
        let code = match &e {
            Error::NanAbort { .. } | Error::NonFinite { .. } => EXIT_NUMERIC,
            _ => EXIT_DATA,
        };
        CliError { code, message: e.to_string() }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "textcap",
    version,
    about = "OCR-aware image captioning: synthesis, vocabularies, training, captioning, evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a deterministic synthetic dataset that requires copying.
    Synth(SynthArgs),
    /// Build the fixed vocabulary and, optionally, its OCR extension.
    BuildVocab(BuildVocabArgs),
    /// Train a captioning model.
    Train(TrainArgs),
    /// Caption feature bundles with a trained checkpoint.
    Caption(CaptionArgs),
    /// Score candidate captions against references.
    Eval(EvalArgs),
}

// ── synth ────────────────────────────────────────────────────────────

#[derive(Args, Debug, Clone, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    pub n_images: usize,
    #[arg(long, default_value_t = 1.0)]
    pub copy_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub n_regions: usize,
    #[arg(long, default_value_t = 32)]
    pub d_v: usize,
    #[arg(long, default_value_t = 32)]
    pub d_e: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
}

pub fn cmd_synth(args: &SynthArgs) -> CliResult<()> {
    if !(0.0..=1.0).contains(&args.copy_rate) {
        return Err(usage(format!("--copy-rate {} outside [0,1]", args.copy_rate)));
    }
    if args.n_images == 0 || args.n_regions == 0 || args.d_v == 0 || args.d_e == 0 {
        return Err(usage("--n-images, --n-regions, --d-v, --d-e must be >= 1"));
    }
    std::fs::create_dir_all(&args.out_dir).map_err(Error::from)?;

    let config = SynthConfig {
        n_images: args.n_images,
        n_regions: args.n_regions,
        d_v: args.d_v,
        d_e: args.d_e,
        copy_rate: args.copy_rate,
        ..SynthConfig::default()
    };
    let bundles_path = args.out_dir.join("bundles.jsonl");
    let captions_path = args.out_dir.join("captions.json");
    let manifest_path = args.out_dir.join("manifest.json");

    let mut man = RunManifest::new("synth", args.seed, serde_json::to_value(args).map_err(Error::from)?);
    man.artifact(&bundles_path);
    man.artifact(&captions_path);
    man.write(&manifest_path)?;

    let (bundles, records) = features::synth_generate(&config, args.seed)?;
    features::write_bundles(&bundles, &bundles_path)?;
    features::write_captions(&records, &captions_path)?;
    println!(
        "synth: {} images ({} copy rate) -> {}",
        args.n_images,
        args.copy_rate,
        args.out_dir.display()
    );
    Ok(())
}

// ── build-vocab ──────────────────────────────────────────────────────

#[derive(Args, Debug, Clone, Serialize)]
pub struct BuildVocabArgs {
    /// captions.json used for the fixed vocabulary.
    #[arg(long)]
    pub captions: PathBuf,
    /// bundles.jsonl whose OCR tokens extend the vocabulary.
    #[arg(long)]
    pub ocr_from_bundles: Option<PathBuf>,
    /// Fixed-vocabulary frequency threshold.
    #[arg(long, default_value_t = 5)]
    pub min_count: u64,
    /// OCR-extension frequency threshold.
    #[arg(long, default_value_t = 2)]
    pub threshold: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Extension file path next to the fixed vocabulary file.
pub fn ext_path_for(out: &Path) -> PathBuf {
    out.with_extension("ext.tsv")
}

pub fn cmd_build_vocab(args: &BuildVocabArgs) -> CliResult<()> {
    if args.min_count < 1 {
        return Err(usage("--min-count must be >= 1"));
    }
    if args.threshold < 1 {
        return Err(usage("--threshold must be >= 1"));
    }
    let records = features::load_captions(&args.captions)?;
    let all: Vec<Vec<String>> = records.into_iter().flat_map(|r| r.captions).collect();
    let base = Vocabulary::build(&all, args.min_count)?;
    base.write_file(&args.out)?;
    println!("fixed vocabulary: {} tokens -> {}", base.len(), args.out.display());

    if let Some(bundles_path) = &args.ocr_from_bundles {
        let bundles = features::load_bundles(bundles_path)?;
        let ocr_corpus: Vec<Vec<String>> = bundles
            .iter()
            .map(|b| {
                b.ocr_tokens()
                    .iter()
                    .filter_map(|t| normalize_ocr_token(t))
                    .collect()
            })
            .collect();
        let ext = ExtendedVocabulary::extend_with_ocr(base, &ocr_corpus, args.threshold)?;
        let ext_path = ext_path_for(&args.out);
        ext.write_ext_file(&ext_path)?;
        println!(
            "OCR extension: {} tokens added (threshold {}) -> {}",
            ext.added(),
            args.threshold,
            ext_path.display()
        );
    }
    Ok(())
}

// ── train ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantArg {
    Baseline,
    Extended,
    Pointer,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Variant {
        match v {
            VariantArg::Baseline => Variant::Baseline,
            VariantArg::Extended => Variant::Extended,
            VariantArg::Pointer => Variant::Pointer,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PresetArg {
    /// Faithful published hyperparameters (lr 2e-5, anneal 0.8 every 3).
    Paper,
    /// Desk-scale preset (lr 5e-3, same anneal rule).
    Synthetic,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub variant: VariantArg,
    /// Dataset directory holding bundles.jsonl and captions.json.
    #[arg(long)]
    pub data: PathBuf,
    /// Fixed vocabulary file.
    #[arg(long)]
    pub vocab: PathBuf,
    /// OCR extension file (extended and pointer variants).
    #[arg(long)]
    pub ext_vocab: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PresetArg::Synthetic)]
    pub preset: PresetArg,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub model_dim: Option<usize>,
    #[arg(long)]
    pub encoder_layers: Option<usize>,
    #[arg(long)]
    pub ocr_threshold: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn train_config_from(args: &TrainArgs) -> CliResult<TrainConfig> {
    let variant: Variant = args.variant.into();
    let mut tc = match args.preset {
        PresetArg::Paper => TrainConfig::paper_preset(variant),
        PresetArg::Synthetic => TrainConfig::synthetic_preset(variant),
    };
    tc.seed = args.seed;
    if let Some(e) = args.epochs {
        tc.epochs = e;
    }
    if let Some(b) = args.batch_size {
        tc.batch_size = b;
    }
    if let Some(lr) = args.learning_rate {
        tc.learning_rate = lr;
    }
    if let Some(d) = args.model_dim {
        tc.model_dim = d;
    }
    if let Some(l) = args.encoder_layers {
        tc.encoder_layers = l;
    }
    if let Some(t) = args.ocr_threshold {
        tc.ocr_threshold = t;
    }
    tc.validate().map_err(|e| usage(e.to_string()))?;
    Ok(tc)
}

fn load_vocab_for(
    variant: Variant,
    vocab: &Path,
    ext_vocab: Option<&Path>,
) -> CliResult<ExtendedVocabulary> {
    match variant {
        Variant::Baseline => {
            if ext_vocab.is_some() {
                return Err(usage("--ext-vocab does not apply to the baseline variant"));
            }
            Ok(ExtendedVocabulary::without_ocr(Vocabulary::read_file(vocab)?))
        }
        _ => Ok(ExtendedVocabulary::read_files(vocab, ext_vocab)?),
    }
}

pub fn cmd_train(args: &TrainArgs) -> CliResult<()> {
    let tc = train_config_from(args)?;
    let variant: Variant = args.variant.into();
    let ext = load_vocab_for(variant, &args.vocab, args.ext_vocab.as_deref())?;
    let bundles = features::load_bundles(&args.data.join("bundles.jsonl"))?;
    let records = features::load_captions(&args.data.join("captions.json"))?;
    std::fs::create_dir_all(&args.out).map_err(Error::from)?;

    let mut man =
        RunManifest::new("train", args.seed, serde_json::to_value(&tc).map_err(Error::from)?);
    man.digest_input(&args.data.join("bundles.jsonl"))?;
    man.digest_input(&args.data.join("captions.json"))?;
    man.digest_input(&args.vocab)?;
    if let Some(p) = &args.ext_vocab {
        man.digest_input(p)?;
    }
    let log_path = args.out.join("train-log.jsonl");
    man.artifact(&log_path);
    man.write(&args.out.join("manifest.json"))?;

    let vocab_hash = ext.content_hash();
    let mut log_file =
        std::io::BufWriter::new(std::fs::File::create(&log_path).map_err(Error::from)?);
    let out_dir = args.out.clone();
    let output = training::train(&bundles, &records, &ext, &tc, |params, entry| {
        let ckpt = out_dir.join(format!("ckpt-epoch-{:03}.bin", entry.epoch));
        checkpoint::save(params, &vocab_hash, &ckpt)?;
        serde_json::to_writer(&mut log_file, entry)?;
        log_file.write_all(b"\n")?;
        log_file.flush()?;
        Ok(())
    })?;

    let final_path = args.out.join("ckpt-final.bin");
    checkpoint::save(&output.params, &vocab_hash, &final_path)?;
    let last = output.log.last().expect("at least one epoch");
    println!(
        "train: {} epochs, final mean loss {:.4} -> {}",
        tc.epochs,
        last.mean_loss,
        final_path.display()
    );
    Ok(())
}

// ── caption ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Beam,
    Topk,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct CaptionArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub bundles: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub ext_vocab: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = DecodeMode::Beam)]
    pub mode: DecodeMode,
    #[arg(long, default_value_t = 3)]
    pub beam: usize,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub max_len: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// One line of the caption output file.
#[derive(Debug, Serialize, Deserialize)]
pub struct CaptionLine {
    pub image_id: String,
    pub caption: String,
    pub log_prob: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_gen_trace: Option<Vec<f64>>,
    pub copied_positions: Vec<usize>,
    pub repetition_flag: bool,
}

pub fn cmd_caption(args: &CaptionArgs) -> CliResult<()> {
    if args.beam < 1 || args.k < 1 || args.max_len < 1 || args.temperature <= 0.0 {
        return Err(usage("--beam, --k, --max-len must be >= 1 and --temperature > 0"));
    }
    let (params, stored_hash) = checkpoint::load(&args.checkpoint)?;
    let ext = load_vocab_for(params.config.variant, &args.vocab, args.ext_vocab.as_deref())?;
    if stored_hash != ext.content_hash() {
        return Err(CliError {
            code: EXIT_DATA,
            message: format!(
                "vocabulary hash mismatch: checkpoint {}, supplied {}",
                stored_hash,
                ext.content_hash()
            ),
        });
    }
    let bundles = features::load_bundles(&args.bundles)?;
    let decode_config = DecodeConfig { max_len: args.max_len, length_norm_exponent: 1.0 };

    let mut out =
        std::io::BufWriter::new(std::fs::File::create(&args.out).map_err(Error::from)?);
    for bundle in &bundles {
        let report = match args.mode {
            DecodeMode::Beam => {
                decoding::beam_search(&params, &ext, bundle, args.beam, &decode_config)?
            }
            DecodeMode::Topk => decoding::top_k_sample(
                &params,
                &ext,
                bundle,
                args.k,
                args.temperature,
                args.seed,
                &decode_config,
            )?,
        };
        let line = CaptionLine {
            image_id: report.image_id,
            caption: report.caption.join(" "),
            log_prob: report.log_prob,
            p_gen_trace: report.p_gen_trace,
            copied_positions: report.copied_positions,
            repetition_flag: report.repetition_flag,
        };
        serde_json::to_writer(&mut out, &line).map_err(Error::from)?;
        out.write_all(b"\n").map_err(Error::from)?;
    }
    out.flush().map_err(Error::from)?;
    println!("caption: {} images -> {}", bundles.len(), args.out.display());
    Ok(())
}

pub fn read_caption_lines(path: &Path) -> CliResult<Vec<CaptionLine>> {
    let f = std::fs::File::open(path).map_err(Error::from)?;
    let mut out = Vec::new();
    for (lineno, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(Error::from)?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: CaptionLine = serde_json::from_str(&line).map_err(|e| CliError {
            code: EXIT_DATA,
            message: format!("{}:{}: {e}", path.display(), lineno + 1),
        })?;
        out.push(parsed);
    }
    Ok(out)
}

// ── eval ─────────────────────────────────────────────────────────────

#[derive(Args, Debug, Clone, Serialize)]
pub struct EvalArgs {
    /// Caption output file (one JSON object per line).
    #[arg(long)]
    pub captions: PathBuf,
    /// References file (captions.json).
    #[arg(long)]
    pub references: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvalOutput {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub n_images: usize,
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<()> {
    let candidates = read_caption_lines(&args.captions)?;
    let records = features::load_captions(&args.references)?;
    let refs: BTreeMap<&str, &Vec<Vec<String>>> =
        records.iter().map(|r| (r.image_id.as_str(), &r.captions)).collect();

    let mut items = Vec::with_capacity(candidates.len());
    for cand in &candidates {
        let references = refs.get(cand.image_id.as_str()).ok_or_else(|| CliError {
            code: EXIT_DATA,
            message: format!("no references for image {}", cand.image_id),
        })?;
        items.push(EvalItem {
            candidate: tokenize(&cand.caption),
            references: (*references).clone(),
        });
    }
    let corpus = EvalCorpus::new(items)?;
    let output = EvalOutput {
        bleu4: metrics::bleu4(&corpus)?,
        rouge_l: metrics::rouge_l(&corpus)?,
        cider: metrics::cider(&corpus)?,
        n_images: corpus.len(),
    };
    let mut body = serde_json::to_vec_pretty(&output).map_err(Error::from)?;
    body.push(b'\n');
    std::fs::write(&args.out, body).map_err(Error::from)?;
    println!(
        "eval: {} images, BLEU-4 {:.2}, ROUGE-L {:.2}, CIDEr {:.3}",
        output.n_images, output.bleu4, output.rouge_l, output.cider
    );
    Ok(())
}

pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::BuildVocab(a) => cmd_build_vocab(a),
        Command::Train(a) => cmd_train(a),
        Command::Caption(a) => cmd_caption(a),
        Command::Eval(a) => cmd_eval(a),
    }
}
