use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use send_diar::corpus::{
    frame_labels_to_rttm, rttm_emit, rttm_parse, rttm_to_frame_labels, CorpusError, Dataset, RttmSegment, SimConfig,
    Split,
};
use send_diar::recipes::{desk_model, desk_ti_model, desk_train, run_recipe, Recipe, RecipeConfig, RecipeError};
use send_diar::scoring::{der_counts, der_counts_hungarian, wder, DerCounts, DerMode, ScoringError};
use send_diar::send::{
    decode_frames, train, Head, SendConfig, SendError, SendModel, SpeakerBank, TrainConfig, MODEL_CONFIG_FILE,
};
use send_diar::sendti::{decode_words, train_ti, SendTiConfig, SendTiModel, TextConfig, TI_CONFIG_FILE};

/// Speaker diarization with speaker-embedding-aware networks.
#[derive(Parser)]
#[command(name = "send", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ModeArg {
    Full,
    Ignore,
}

impl From<ModeArg> for DerMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Full => DerMode::Full,
            ModeArg::Ignore => DerMode::IgnoreOverlap,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Validation,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset directory.
    Simulate {
        /// Simulation config (TOML); defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a simulated dataset.
    Train {
        /// Run config (TOML) with `kind`, `[model]` or `[ti_model]`, `[train]` and `[text]`.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a dataset split with a trained model.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "validation")]
        split: SplitArg,
        /// Decision threshold for a multi-label model.
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Text settings for a word-level model (TOML).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a hypothesis against a reference.
    Score {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long, value_enum, default_value = "full")]
        mode: ModeArg,
        /// Inputs are word-speaker files instead of RTTM.
        #[arg(long)]
        words: bool,
        /// Match hypothesis speakers to reference speakers optimally
        /// instead of by name.
        #[arg(long)]
        hungarian: bool,
        /// Seconds per frame when rasterizing RTTM.
        #[arg(long, default_value_t = 0.01)]
        frame_shift: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a comparison recipe and write its table.
    Ablate {
        #[arg(long)]
        recipe: String,
        /// Recipe config (TOML); desk settings are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run a single seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failures split by exit code: bad input exits 2, everything else 1.
enum CliError {
    Invalid(anyhow::Error),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Runtime(e.into())
    }
}

fn invalid(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Invalid(e.into())
}

fn send_err(e: SendError) -> CliError {
    match e {
        SendError::Config(_)
        | SendError::Bank(_)
        | SendError::Input(_)
        | SendError::MissingThreshold
        | SendError::UnexpectedThreshold
        | SendError::Corpus(CorpusError::Config(_)) => invalid(e),
        other => CliError::Runtime(other.into()),
    }
}

fn corpus_err(e: CorpusError) -> CliError {
    match e {
        CorpusError::Io(_) => CliError::Runtime(e.into()),
        other => invalid(other),
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn read_input(path: &Path) -> Result<String> {
    fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(invalid)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir)
        .with_context(|| format!("loading dataset {}", dir.display()))
        .map_err(invalid)
}

fn simulate(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg = match config {
        Some(p) => SimConfig::from_toml(&read_input(p)?).map_err(corpus_err)?,
        None => SimConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(corpus_err)?;
    let data = Dataset::generate(&cfg).map_err(corpus_err)?;
    data.save(out)
        .with_context(|| format!("writing dataset to {}", out.display()))?;
    let s = data.manifest().summary;
    println!(
        "{} train and {} validation samples, overlap ratio {:.3}, written to {}",
        s.train_samples,
        s.validation_samples,
        s.overlap_ratio,
        out.display()
    );
    Ok(())
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum ModelKind {
    Send,
    SendTi,
}

/// Resolved training run, written next to the checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainRun {
    kind: ModelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    model: Option<SendConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ti_model: Option<SendTiConfig>,
    #[serde(default = "desk_train")]
    train: TrainConfig,
    #[serde(default)]
    text: TextConfig,
}

fn train_cmd(config: Option<&Path>, data_dir: &Path, seed: Option<u64>, out: &Path) -> Result<()> {
    let data = load_dataset(data_dir)?;
    let mut run: TrainRun = match config {
        Some(p) => toml::from_str(&read_input(p)?).map_err(invalid)?,
        None => TrainRun {
            kind: ModelKind::Send,
            model: None,
            ti_model: None,
            train: desk_train(),
            text: TextConfig::default(),
        },
    };
    if let Some(s) = seed {
        run.train.seed = s;
    }
    run.train.validate().map_err(send_err)?;
    if data.train.is_empty() {
        return Err(invalid(anyhow!("dataset {} has no training samples", data_dir.display())));
    }
    create_dir(out)?;
    let mut log = String::new();
    let mut on_epoch = |r: &send_diar::send::EpochRecord| {
        let der = r.validation_der.map_or("-".to_string(), |d| format!("{:.2}%", 100.0 * d));
        eprintln!("epoch {:>3}  loss {:.4}  lr {:.2e}  validation {der}", r.epoch, r.loss, r.lr);
        log.push_str(&format!("epoch {} loss {:.6} lr {:.6e} validation {der}\n", r.epoch, r.loss, r.lr));
    };
    let report = match run.kind {
        ModelKind::Send => {
            let model_cfg = run.model.get_or_insert_with(|| desk_model(&data.config)).clone();
            let mut model = SendModel::new(model_cfg, run.train.seed).map_err(send_err)?;
            let report = train(&mut model, &data, &run.train, &mut on_epoch).map_err(send_err)?;
            model.save(out)?;
            report
        }
        ModelKind::SendTi => {
            let model_cfg = run.ti_model.get_or_insert_with(|| desk_ti_model(&data.config)).clone();
            let mut model = SendTiModel::new(model_cfg, run.train.seed).map_err(send_err)?;
            let report = train_ti(&mut model, &data, &run.train, &run.text, &mut on_epoch).map_err(send_err)?;
            model.save(out)?;
            report
        }
    };
    write(&out.join("run.toml"), &toml::to_string(&run)?)?;
    write(&out.join("train.jsonl"), &report.to_jsonl())?;
    write(&out.join("train.log"), &log)?;
    println!(
        "trained {} steps, final loss {:.4}, checkpoint in {}",
        report.steps,
        report.final_loss().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn recording_id(split: Split, index: usize) -> String {
    format!("{}-{index:06}", split.name())
}

fn speaker_name(id: usize) -> String {
    format!("spk{id}")
}

fn infer(
    checkpoint: &Path,
    data_dir: &Path,
    split: Split,
    threshold: f64,
    config: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let data = load_dataset(data_dir)?;
    let samples = data.samples(split);
    create_dir(out)?;
    if checkpoint.join(TI_CONFIG_FILE).exists() {
        let text: TextConfig = match config {
            Some(p) => toml::from_str(&read_input(p)?).map_err(invalid)?,
            None => TextConfig::default(),
        };
        let model = SendTiModel::load(checkpoint).map_err(send_err)?;
        let (mut refs, mut hyps) = (String::new(), String::new());
        for s in samples {
            let (seq, columns) = text
                .tokens(s, model.config().vocab_size, data.config.seed)
                .map_err(send_err)?;
            let bank = SpeakerBank::inference(&s.enrollments, model.config().capacity).map_err(send_err)?;
            let post = model.forward(&s.features, &bank, &seq).map_err(send_err)?;
            let id = recording_id(s.split, s.index);
            let name = |slot: usize| s.speakers.get(slot).map_or("none".to_string(), |&p| speaker_name(p));
            refs.push_str(&id);
            hyps.push_str(&id);
            for (c, h) in columns.iter().zip(decode_words(&post)) {
                refs.push(' ');
                refs.push_str(&name(*c));
                hyps.push(' ');
                hyps.push_str(&name(h));
            }
            refs.push('\n');
            hyps.push('\n');
        }
        write(&out.join("ref_words.txt"), &refs)?;
        write(&out.join("hyp_words.txt"), &hyps)?;
        write(&out.join("text.toml"), &toml::to_string(&text)?)?;
        println!("decoded words of {} samples into {}", samples.len(), out.display());
        return Ok(());
    }
    if !checkpoint.join(MODEL_CONFIG_FILE).exists() {
        return Err(invalid(anyhow!("{} is not a checkpoint directory", checkpoint.display())));
    }
    let model = SendModel::load(checkpoint).map_err(send_err)?;
    let th = (model.config().head == Head::Multilabel).then_some(threshold);
    let shift = data.config.frame_shift * data.config.stride as f64;
    let (mut refs, mut hyps) = (Vec::<RttmSegment>::new(), Vec::<RttmSegment>::new());
    for s in samples {
        let capacity = model.config().capacity;
        let bank = SpeakerBank::inference(&s.enrollments, capacity).map_err(send_err)?;
        let post = model.forward(&s.features, &bank).map_err(send_err)?;
        let hyp = decode_frames(&post, model.table(), th).map_err(send_err)?;
        let id = recording_id(s.split, s.index);
        let ref_names: Vec<String> = s.speakers.iter().map(|&p| speaker_name(p)).collect();
        let hyp_names: Vec<String> = (0..capacity)
            .map(|slot| ref_names.get(slot).cloned().unwrap_or_else(|| format!("slot{slot}")))
            .collect();
        refs.extend(frame_labels_to_rttm(&s.labels, shift, &id, &ref_names));
        hyps.extend(frame_labels_to_rttm(&hyp, shift, &id, &hyp_names));
    }
    write(&out.join("ref.rttm"), &rttm_emit(&refs))?;
    write(&out.join("hyp.rttm"), &rttm_emit(&hyps))?;
    write(
        &out.join("infer.toml"),
        &format!(
            "checkpoint = {:?}\nsplit = {:?}\nthreshold = {}\nframe_shift = {shift}\n",
            checkpoint.display().to_string(),
            split.name(),
            th.map_or("\"none\"".to_string(), |t| t.to_string())
        ),
    )?;
    println!("decoded {} samples into {}", samples.len(), out.display());
    Ok(())
}

fn by_recording(segments: Vec<RttmSegment>) -> BTreeMap<String, Vec<RttmSegment>> {
    let mut map: BTreeMap<String, Vec<RttmSegment>> = BTreeMap::new();
    for s in segments {
        map.entry(s.recording_id.clone()).or_default().push(s);
    }
    map
}

fn frames_of(segments: &[RttmSegment], shift: f64) -> usize {
    let end = segments.iter().map(|s| s.onset + s.duration).fold(0.0, f64::max);
    (end / shift - 1e-9).ceil().max(0.0) as usize
}

fn speakers_of(segments: &[RttmSegment]) -> Vec<String> {
    let mut names: Vec<String> = segments.iter().map(|s| s.speaker_id.clone()).collect();
    names.sort();
    names.dedup();
    names
}

fn score_rttm(reference: &str, hyp: &str, mode: DerMode, hungarian: bool, shift: f64) -> Result<String> {
    let refs = by_recording(rttm_parse(reference).map_err(invalid)?);
    let mut hyps = by_recording(rttm_parse(hyp).map_err(invalid)?);
    if let Some(extra) = hyps.keys().find(|k| !refs.contains_key(*k)) {
        return Err(invalid(anyhow!("hypothesis recording {extra} is not in the reference")));
    }
    let mut total = DerCounts::default();
    for (id, r) in &refs {
        let h = hyps.remove(id).unwrap_or_default();
        let frames = frames_of(r, shift).max(frames_of(&h, shift));
        let counts = if hungarian {
            let r = rttm_to_frame_labels(r, shift, &speakers_of(r), Some(frames)).map_err(invalid)?;
            let h = rttm_to_frame_labels(&h, shift, &speakers_of(&h), Some(frames)).map_err(invalid)?;
            der_counts_hungarian(&r, &h, mode).map_err(invalid)?
        } else {
            let mut names = speakers_of(r);
            let extra: Vec<String> = speakers_of(&h).into_iter().filter(|n| !names.contains(n)).collect();
            names.extend(extra);
            der_counts(
                &rttm_to_frame_labels(r, shift, &names, Some(frames)).map_err(invalid)?,
                &rttm_to_frame_labels(&h, shift, &names, Some(frames)).map_err(invalid)?,
                mode,
            )
            .map_err(invalid)?
        };
        total = total + counts;
    }
    let report = total.report(mode).map_err(score_err)?;
    println!("{report}");
    Ok(report.to_json() + "\n")
}

fn score_err(e: ScoringError) -> CliError {
    invalid(e)
}

fn parse_words(text: &str) -> Result<BTreeMap<String, Vec<String>>> {
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let mut fields = line.split_whitespace();
        let Some(id) = fields.next() else { continue };
        if map.insert(id.to_string(), fields.map(str::to_string).collect::<Vec<_>>()).is_some() {
            return Err(invalid(anyhow!("line {}: recording {id} repeated", n + 1)));
        }
    }
    Ok(map)
}

fn score_words(reference: &str, hyp: &str) -> Result<String> {
    let refs = parse_words(reference)?;
    let hyps = parse_words(hyp)?;
    let (mut r_all, mut h_all) = (Vec::new(), Vec::new());
    for (id, r) in &refs {
        let h = hyps
            .get(id)
            .ok_or_else(|| invalid(anyhow!("recording {id} missing from the hypothesis")))?;
        if h.len() != r.len() {
            return Err(invalid(anyhow!("recording {id}: {} reference words, {} hypothesis words", r.len(), h.len())));
        }
        r_all.extend(r.iter().cloned());
        h_all.extend(h.iter().cloned());
    }
    if let Some(extra) = hyps.keys().find(|k| !refs.contains_key(*k)) {
        return Err(invalid(anyhow!("hypothesis recording {extra} is not in the reference")));
    }
    let report = wder(&r_all, &h_all).map_err(score_err)?;
    println!("{report}");
    Ok(report.to_json() + "\n")
}

fn score(
    reference: &Path,
    hyp: &Path,
    mode: DerMode,
    words: bool,
    hungarian: bool,
    shift: f64,
    out: Option<&Path>,
) -> Result<()> {
    if !(shift > 0.0) {
        return Err(invalid(anyhow!("frame shift must be positive")));
    }
    let r = read_input(reference)?;
    let h = read_input(hyp)?;
    let record = if words {
        score_words(&r, &h)?
    } else {
        score_rttm(&r, &h, mode, hungarian, shift)?
    };
    if let Some(dir) = out {
        create_dir(dir)?;
        write(&dir.join("score.jsonl"), &record)?;
    }
    Ok(())
}

fn ablate(recipe: &str, config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let recipe: Recipe = recipe.parse().map_err(invalid)?;
    let mut cfg = match config {
        Some(p) => RecipeConfig::from_toml(&read_input(p)?).map_err(invalid)?,
        None => RecipeConfig::desk(),
    };
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    create_dir(out)?;
    write(&out.join("recipe.toml"), &cfg.to_toml())?;
    let table = run_recipe(recipe, &cfg, &mut |m| eprintln!("{m}")).map_err(|e| match e {
        RecipeError::Send(e) => send_err(e),
        RecipeError::Corpus(e) => corpus_err(e),
        other => invalid(other),
    })?;
    print!("{table}");
    write(&out.join("table.txt"), &table.to_string())?;
    write(&out.join("table.jsonl"), &table.to_jsonl())?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { config, seed, out } => simulate(config.as_deref(), seed, &out),
        Command::Train {
            config,
            data,
            seed,
            out,
        } => train_cmd(config.as_deref(), &data, seed, &out),
        Command::Infer {
            checkpoint,
            data,
            split,
            threshold,
            config,
            out,
        } => {
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Validation => Split::Validation,
            };
            infer(&checkpoint, &data, split, threshold, config.as_deref(), &out)
        }
        Command::Score {
            reference,
            hyp,
            mode,
            words,
            hungarian,
            frame_shift,
            out,
        } => score(&reference, &hyp, mode.into(), words, hungarian, frame_shift, out.as_deref()),
        Command::Ablate {
            recipe,
            config,
            seed,
            out,
        } => ablate(&recipe, config.as_deref(), seed, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Invalid(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
