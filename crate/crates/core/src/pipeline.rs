//! File-based stages behind the command line tool. Every stage reads its
//! inputs from a run directory, writes its artifacts into a subdirectory of
//! it, and leaves `config.toml` plus `provenance.json` next to them.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::io::{read_codebooks, write_codebooks, write_tokens};
use crate::codec::{analyze, fit_rvq_with, CodecConfig, RvqCodebooks};
use crate::curation::{filter_manifest_file, score_records, AvEmbedder, CurationReport, SWEEP};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricsReport};
use crate::model::train::LOG_HEADER;
use crate::model::{read_checkpoint, write_checkpoint, Conditioning, ModelConfig, Params, TrainConfig, TrainExample, Trainer};
use crate::rng::{derive_seed, stream_rng};
use crate::sampler::{generate, SampleConfig, SampleSidecar};
use crate::world::io::{write_clip, write_wav, Manifest, ManifestRecord};
use crate::world::{corrupt_audio, ClipSample, Corruption, WorldConfig};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Training clips.
    pub n_clips: usize,
    /// Held-out clean clips written to the test manifest.
    pub n_test: usize,
    /// Fraction of training clips whose audio is corrupted.
    pub p_corrupt: f64,
    pub corruption: Corruption,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_clips: 1000,
            n_test: 100,
            p_corrupt: 0.0,
            corruption: Corruption::Replace,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurateConfig {
    pub threshold: f64,
}

impl Default for CurateConfig {
    fn default() -> Self {
        CurateConfig {
            threshold: crate::curation::DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_gen: usize,
    /// Test videos used; 0 means all.
    pub max_videos: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { n_gen: 10, max_videos: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub gammas: Vec<f64>,
    pub thresholds: Vec<f64>,
    /// Optimizer steps for each model of the conditioning and guidance runs.
    pub steps: u64,
    /// Passes over the kept subset for each model of the threshold sweep.
    pub epochs: f64,
    pub n_videos: usize,
    pub n_gen: usize,
    /// Runs only the endpoints of each sweep with a smaller budget.
    pub reduced: bool,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            gammas: vec![1.0, 3.0, 5.0, 6.0, 7.0, 9.0],
            thresholds: SWEEP.to_vec(),
            steps: 1500,
            epochs: 12.0,
            n_videos: 20,
            n_gen: 2,
            reduced: false,
        }
    }
}

/// Everything a run needs. Missing keys take their defaults; unknown keys
/// are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub world: WorldConfig,
    pub synth: SynthConfig,
    pub codec: CodecConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub curate: CurateConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("run"),
            world: WorldConfig::default(),
            synth: SynthConfig::default(),
            codec: CodecConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            sample: SampleConfig::default(),
            curate: CurateConfig::default(),
            eval: EvalConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

/// Command line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub gamma: Option<f64>,
    pub threshold: Option<f64>,
    pub n_gen: Option<usize>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))
    }

    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(format!("reading {}", p.display()), e))?;
                RunConfig::from_toml(&text)
            }
        }
    }

    /// A seed override replaces the run seed and every stage seed.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
            self.codec.seed = s;
            self.train.seed = s;
            self.sample.seed = s;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if let Some(g) = o.gamma {
            self.sample.gamma = g;
        }
        if let Some(t) = o.threshold {
            self.curate.threshold = t;
        }
        if let Some(n) = o.n_gen {
            self.eval.n_gen = n;
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.synth.p_corrupt) {
            return Err(Error::invalid("synth.p_corrupt must lie in [0, 1]"));
        }
        if self.synth.p_corrupt > 0.0 && self.synth.corruption == Corruption::None {
            return Err(Error::invalid("synth.corruption must not be none when p_corrupt > 0"));
        }
        if self.model.d_raw != self.world.d_raw {
            return Err(Error::invalid(format!(
                "model.d_raw ({}) differs from world.d_raw ({})",
                self.model.d_raw, self.world.d_raw
            )));
        }
        self.train.validate()?;
        self.sample.validate(self.model.k)
    }

    pub fn dirs(&self) -> RunDirs {
        RunDirs { root: self.out.clone() }
    }
}

/// Where each stage keeps its artifacts.
#[derive(Debug, Clone)]
pub struct RunDirs {
    pub root: PathBuf,
}

impl RunDirs {
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn train_manifest(&self) -> PathBuf {
        self.data().join("manifest.jsonl")
    }
    pub fn test_manifest(&self) -> PathBuf {
        self.data().join("test.jsonl")
    }
    pub fn codebooks(&self) -> PathBuf {
        self.root.join("codec").join("codebooks.vrvq")
    }
    pub fn train(&self) -> PathBuf {
        self.root.join("train")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.train().join("model.vckp")
    }
    pub fn curated_manifest(&self) -> PathBuf {
        self.root.join("curate").join("manifest.jsonl")
    }
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(sha256_bytes(&bytes))
}

/// Stage metadata. Timestamps and wall-clock durations live only here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub command: String,
    pub tool_version: String,
    pub config_sha256: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub created_unix_s: u64,
    pub wall_seconds: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub timings: BTreeMap<String, f64>,
}

struct Stage<'a> {
    command: &'static str,
    cfg: &'a RunConfig,
    dir: PathBuf,
    started: Instant,
    inputs: BTreeMap<String, String>,
    outputs: Vec<PathBuf>,
    timings: BTreeMap<String, f64>,
}

impl<'a> Stage<'a> {
    fn begin(command: &'static str, cfg: &'a RunConfig, dir: PathBuf) -> Result<Self> {
        fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        Ok(Stage {
            command,
            cfg,
            dir,
            started: Instant::now(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            timings: BTreeMap::new(),
        })
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), file_sha256(path)?);
        Ok(())
    }

    fn output(&mut self, path: PathBuf) {
        self.outputs.push(path);
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        self.outputs.push(path.clone());
        Ok(path)
    }

    fn finish(self) -> Result<Provenance> {
        let toml = self.cfg.to_toml();
        let cfg_path = self.dir.join("config.toml");
        fs::write(&cfg_path, &toml).map_err(|e| Error::io("writing effective config", e))?;
        let mut outputs = BTreeMap::new();
        for p in &self.outputs {
            outputs.insert(p.display().to_string(), file_sha256(p)?);
        }
        let prov = Provenance {
            command: self.command.to_string(),
            tool_version: TOOL_VERSION.to_string(),
            config_sha256: sha256_bytes(toml.as_bytes()),
            inputs: self.inputs,
            outputs,
            created_unix_s: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            wall_seconds: self.started.elapsed().as_secs_f64(),
            timings: self.timings,
        };
        let json = serde_json::to_string_pretty(&prov).expect("provenance serializes");
        fs::write(self.dir.join("provenance.json"), json).map_err(|e| Error::io("writing provenance", e))?;
        Ok(prov)
    }
}

fn is_non_empty_dir(path: &Path) -> bool {
    fs::read_dir(path).is_ok_and(|mut d| d.next().is_some())
}

/// Seed of training clip `i`.
pub fn train_clip_seed(seed: u64, i: usize) -> u64 {
    derive_seed(derive_seed(seed, 0x7a41), i as u64)
}

/// Seed of test clip `i`; disjoint stream from the training clips.
pub fn test_clip_seed(seed: u64, i: usize) -> u64 {
    derive_seed(derive_seed(seed, 0x7e57), i as u64)
}

/// Indices of the training clips that get corrupted.
pub fn corrupted_indices(seed: u64, n: usize, p: f64) -> Vec<usize> {
    let count = ((n as f64) * p).round() as usize;
    let mut idx = sample(&mut stream_rng(seed, 41), n, count.min(n)).into_vec();
    idx.sort_unstable();
    idx
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub corrupted: Vec<String>,
}

pub fn cmd_synth(cfg: &RunConfig, force: bool) -> Result<SynthOutput> {
    cfg.validate()?;
    let dirs = cfg.dirs();
    let data = dirs.data();
    if is_non_empty_dir(&data) {
        if !force {
            return Err(Error::invalid(format!(
                "{} is not empty; pass --force to overwrite",
                data.display()
            )));
        }
        fs::remove_dir_all(&data).map_err(|e| Error::io(format!("clearing {}", data.display()), e))?;
    }
    let mut stage = Stage::begin("synth", cfg, data.clone())?;
    let bad = corrupted_indices(cfg.seed, cfg.synth.n_clips, cfg.synth.p_corrupt);
    let mut train = Vec::with_capacity(cfg.synth.n_clips);
    let mut corrupted = Vec::with_capacity(bad.len());
    for i in 0..cfg.synth.n_clips {
        let seed = train_clip_seed(cfg.seed, i);
        let mut clip = cfg.world.clip(format!("clip{i:05}"), seed)?;
        if bad.binary_search(&i).is_ok() {
            clip = corrupt_audio(&clip, cfg.synth.corruption, derive_seed(seed, 0xc0))?;
            corrupted.push(clip.id.clone());
        }
        train.push(write_clip(&data, &clip, seed)?);
    }
    let mut test = Vec::with_capacity(cfg.synth.n_test);
    for i in 0..cfg.synth.n_test {
        let seed = test_clip_seed(cfg.seed, i);
        let clip = cfg.world.clip(format!("test{i:05}"), seed)?;
        test.push(write_clip(&data, &clip, seed)?);
    }
    let train_manifest = dirs.train_manifest();
    let test_manifest = dirs.test_manifest();
    stage.write("manifest.jsonl", Manifest::to_jsonl(&train).as_bytes())?;
    stage.write("test.jsonl", Manifest::to_jsonl(&test).as_bytes())?;
    stage.finish()?;
    log::info!(
        "wrote {} training clips ({} corrupted) and {} test clips",
        train.len(),
        corrupted.len(),
        test.len()
    );
    Ok(SynthOutput {
        train_manifest,
        test_manifest,
        corrupted,
    })
}

/// Loads every clip of a manifest, failing on the first unreadable one.
pub fn load_clips(path: &Path, fps: f64) -> Result<Vec<ClipSample>> {
    let manifest = Manifest::read(path)?;
    manifest.records.iter().map(|r| manifest.load_clip(r, fps)).collect()
}

pub fn cmd_codec_fit(cfg: &RunConfig, manifest: &Path) -> Result<RvqCodebooks> {
    let dirs = cfg.dirs();
    let out = dirs.codebooks();
    let mut stage = Stage::begin("codec-fit", cfg, out.parent().expect("codec dir").to_path_buf())?;
    stage.input(manifest)?;
    let clips = load_clips(manifest, cfg.world.fps)?;
    if clips.is_empty() {
        return Err(Error::NoSamples(format!("{} has no clips", manifest.display())));
    }
    let feats = clips
        .iter()
        .map(|c| analyze(&c.audio, cfg.codec.frame_len, cfg.codec.hop))
        .collect::<Result<Vec<_>>>()?;
    let books = fit_rvq_with(&feats, &cfg.codec)?;
    write_codebooks(&out, &books)?;
    stage.output(out);
    stage.finish()?;
    Ok(books)
}

fn load_books(cfg: &RunConfig) -> Result<RvqCodebooks> {
    let books = read_codebooks(&cfg.dirs().codebooks())?;
    check_model_books(&cfg.model, &books)?;
    Ok(books)
}

fn check_model_books(model: &ModelConfig, books: &RvqCodebooks) -> Result<()> {
    if model.k != books.k || model.n_q != books.n_q {
        return Err(Error::Incompatible {
            what: "codebooks".into(),
            expected: format!("k={} n_q={}", model.k, model.n_q),
            found: format!("k={} n_q={}", books.k, books.n_q),
        });
    }
    Ok(())
}

pub fn examples_from(clips: &[ClipSample], books: &RvqCodebooks) -> Result<Vec<TrainExample>> {
    clips.iter().map(|c| TrainExample::from_clip(c, books)).collect()
}

/// Trains a model on `examples` with the run's settings; the returned
/// trainer holds the final state.
pub fn train_model(
    model: &ModelConfig,
    train: &TrainConfig,
    examples: &[TrainExample],
    log: Option<&mut dyn std::io::Write>,
) -> Result<Trainer> {
    let params = Params::init(model, train.seed)?;
    let mut trainer = Trainer::new(params, train.clone())?;
    trainer.run(examples, log, None)?;
    Ok(trainer)
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub final_loss: Option<f64>,
}

/// Trains on `manifest`. With `resume`, an existing checkpoint in the run
/// directory is continued up to `train.steps` and the log is appended to.
pub fn cmd_train(cfg: &RunConfig, manifest: &Path, resume: bool) -> Result<TrainOutput> {
    cfg.validate()?;
    let dirs = cfg.dirs();
    let mut stage = Stage::begin("train", cfg, dirs.train())?;
    let books_path = dirs.codebooks();
    let books = load_books(cfg)?;
    stage.input(&books_path)?;
    stage.input(manifest)?;
    let clips = load_clips(manifest, cfg.world.fps)?;
    let examples = examples_from(&clips, &books)?;
    let ckpt = dirs.checkpoint();
    let log_path = dirs.train().join("train_log.csv");
    let mut trainer = if resume && ckpt.exists() {
        let (params, state) = read_checkpoint(&ckpt)?;
        let want = cfg.model.resolved();
        if params.cfg != want {
            return Err(Error::Incompatible {
                what: format!("checkpoint {}", ckpt.display()),
                expected: format!("{want:?}"),
                found: format!("{:?}", params.cfg),
            });
        }
        let state = state.ok_or_else(|| Error::InvalidState("checkpoint has no optimizer state".into()))?;
        log::info!("resuming from step {}", state.step);
        Trainer::resume(params, state, cfg.train.clone())?
    } else {
        Trainer::new(Params::init(&cfg.model, cfg.train.seed)?, cfg.train.clone())?
    };
    let mut log_file = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(trainer.state.step > 0)
        .truncate(trainer.state.step == 0)
        .open(&log_path)
        .map_err(|e| Error::io(format!("opening {}", log_path.display()), e))?;
    if trainer.state.step == 0 {
        writeln!(log_file, "{LOG_HEADER}").map_err(|e| Error::io("writing training log", e))?;
    }
    let dump = dirs.train().join("failed.vckp");
    let history = trainer.run(&examples, Some(&mut log_file), Some(&dump))?;
    write_checkpoint(&ckpt, &trainer.params, Some(&trainer.state))?;
    stage.output(ckpt.clone());
    stage.output(log_path.clone());
    stage.finish()?;
    Ok(TrainOutput {
        checkpoint: ckpt,
        log: log_path,
        final_loss: history.last().map(|s| s.loss),
    })
}

fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<Params<f32>> {
    let (params, _) = read_checkpoint(checkpoint)?;
    if params.cfg.d_raw != cfg.world.d_raw {
        return Err(Error::Incompatible {
            what: format!("checkpoint {}", checkpoint.display()),
            expected: format!("d_raw={}", cfg.world.d_raw),
            found: format!("d_raw={}", params.cfg.d_raw),
        });
    }
    Ok(params)
}

fn take_videos(mut clips: Vec<ClipSample>, max: usize) -> Vec<ClipSample> {
    if max > 0 {
        clips.truncate(max);
    }
    clips
}

/// Generates audio for the first `limit` clips of `manifest` (0 = all).
pub fn cmd_generate(cfg: &RunConfig, checkpoint: &Path, manifest: &Path, limit: usize) -> Result<Vec<PathBuf>> {
    let dirs = cfg.dirs();
    let mut stage = Stage::begin("generate", cfg, dirs.root.join("generate"))?;
    let params = load_model(cfg, checkpoint)?;
    let books = read_codebooks(&dirs.codebooks())?;
    check_model_books(&params.cfg, &books)?;
    cfg.sample.validate(params.cfg.k)?;
    stage.input(checkpoint)?;
    stage.input(&dirs.codebooks())?;
    stage.input(manifest)?;
    let clips = take_videos(load_clips(manifest, cfg.world.fps)?, limit);
    if clips.is_empty() {
        return Err(Error::NoSamples(format!("{} has no clips", manifest.display())));
    }
    let ckpt_hash = file_sha256(checkpoint)?;
    let books_hash = file_sha256(&dirs.codebooks())?;
    let mut wavs = Vec::with_capacity(clips.len());
    for clip in &clips {
        let sc = SampleConfig {
            duration_s: cfg.sample.duration_s.min(clip.video.duration_s()),
            ..cfg.sample.clone()
        };
        let g = generate(&params, &books, &clip.video, &sc)?;
        let wav = stage.dir.join(format!("{}.wav", clip.id));
        write_wav(&wav, &g.waveform)?;
        let vtok = stage.dir.join(format!("{}.vtok", clip.id));
        write_tokens(&vtok, &g.tokens)?;
        let sidecar = SampleSidecar {
            config: sc,
            checkpoint_sha256: ckpt_hash.clone(),
            codebooks_sha256: books_hash.clone(),
            clip_id: clip.id.clone(),
        };
        let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        stage.write(&format!("{}.json", clip.id), json.as_bytes())?;
        stage.output(vtok);
        stage.output(wav.clone());
        wavs.push(wav);
    }
    stage.finish()?;
    Ok(wavs)
}

pub fn cmd_curate(cfg: &RunConfig, manifest: &Path) -> Result<CurationReport> {
    let dirs = cfg.dirs();
    let out = dirs.curated_manifest();
    let mut stage = Stage::begin("curate", cfg, out.parent().expect("curate dir").to_path_buf())?;
    stage.input(manifest)?;
    let emb = AvEmbedder::new(cfg.world.num_classes, cfg.world.d_raw)?;
    let report = filter_manifest_file(manifest, &out, &emb, cfg.curate.threshold, cfg.world.fps)?;
    stage.output(out);
    stage.write("sweep.csv", report.to_csv().as_bytes())?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    stage.write("report.json", json.as_bytes())?;
    stage.finish()?;
    Ok(report)
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, manifest: &Path) -> Result<MetricsReport> {
    let dirs = cfg.dirs();
    let mut stage = Stage::begin("eval", cfg, dirs.root.join("eval"))?;
    stage.input(manifest)?;
    let clips = take_videos(load_clips(manifest, cfg.world.fps)?, cfg.eval.max_videos);
    if clips.is_empty() {
        return Err(Error::NoSamples(format!("{} has no clips", manifest.display())));
    }
    let params = load_model(cfg, checkpoint)?;
    let books = read_codebooks(&dirs.codebooks())?;
    check_model_books(&params.cfg, &books)?;
    stage.input(checkpoint)?;
    stage.input(&dirs.codebooks())?;
    let emb = AvEmbedder::new(cfg.world.num_classes, cfg.world.d_raw)?;
    let report = evaluate(&params, &books, &clips, &cfg.sample, cfg.eval.n_gen, &emb)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    stage.write("metrics.json", json.as_bytes())?;
    stage.write("per_video.csv", report.per_video_csv().as_bytes())?;
    stage.write("summary.csv", report.aggregate_csv().as_bytes())?;
    stage.finish()?;
    Ok(report)
}

fn metric_cells(r: &MetricsReport) -> String {
    let fd = r.fd.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"));
    format!("{:.6},{},{:.4},{:.3}", r.kld, fd, r.ib, r.sync_ms)
}

/// Paths of the three tables written by [`cmd_ablate`].
#[derive(Debug, Clone)]
pub struct AblateOutput {
    pub conditioning: PathBuf,
    pub cfg_scale: PathBuf,
    pub curation: PathBuf,
}

/// Runs the conditioning, guidance-scale and curation-threshold sweeps on
/// the synthesized dataset and writes one CSV per sweep.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<AblateOutput> {
    cfg.validate()?;
    let dirs = cfg.dirs();
    let mut stage = Stage::begin("ablate", cfg, dirs.root.join("ablate"))?;
    let mut ab = cfg.ablate.clone();
    if ab.reduced {
        log::warn!("reduced ablation: sweep endpoints only, quarter budget");
        let ends = |v: &[f64]| -> Vec<f64> {
            match v {
                [] | [_] => v.to_vec(),
                [a, .., b] => vec![*a, *b],
            }
        };
        ab.gammas = ends(&ab.gammas);
        ab.thresholds = ends(&ab.thresholds);
        ab.steps = (ab.steps / 4).max(1);
        ab.epochs /= 4.0;
    }
    let train_manifest = dirs.train_manifest();
    let test_manifest = dirs.test_manifest();
    stage.input(&train_manifest)?;
    stage.input(&test_manifest)?;
    stage.input(&dirs.codebooks())?;
    let books = load_books(cfg)?;
    let train_clips = load_clips(&train_manifest, cfg.world.fps)?;
    let test_clips = take_videos(load_clips(&test_manifest, cfg.world.fps)?, ab.n_videos);
    if train_clips.is_empty() || test_clips.is_empty() {
        return Err(Error::NoSamples("ablation needs training and test clips".into()));
    }
    let examples = examples_from(&train_clips, &books)?;
    let emb = AvEmbedder::new(cfg.world.num_classes, cfg.world.d_raw)?;
    let budget = TrainConfig {
        steps: ab.steps,
        ..cfg.train.clone()
    };

    let mut cond_csv = String::from("conditioning,kld,fd,ib,sync_ms\n");
    let mut fusion = None;
    for conditioning in [Conditioning::Prepend, Conditioning::Fusion] {
        let model = ModelConfig {
            conditioning,
            ..cfg.model.clone()
        };
        let t0 = Instant::now();
        let trainer = train_model(&model, &budget, &examples, None)?;
        stage.timings.insert(format!("train_{conditioning:?}").to_lowercase(), t0.elapsed().as_secs_f64());
        let r = evaluate(&trainer.params, &books, &test_clips, &cfg.sample, ab.n_gen, &emb)?;
        cond_csv.push_str(&format!("{},{}\n", format!("{conditioning:?}").to_lowercase(), metric_cells(&r)));
        if conditioning == Conditioning::Fusion {
            fusion = Some(trainer.params);
        }
    }
    let fusion = fusion.expect("fusion model trained");
    let conditioning = stage.write("conditioning.csv", cond_csv.as_bytes())?;

    let mut gamma_csv = String::from("gamma,kld,fd,ib,sync_ms\n");
    for &gamma in &ab.gammas {
        let sc = SampleConfig {
            gamma,
            ..cfg.sample.clone()
        };
        let r = evaluate(&fusion, &books, &test_clips, &sc, ab.n_gen, &emb)?;
        gamma_csv.push_str(&format!("{gamma},{}\n", metric_cells(&r)));
    }
    let cfg_scale = stage.write("cfg_scale.csv", gamma_csv.as_bytes())?;

    let manifest = Manifest::read(&train_manifest)?;
    let (scored, _) = score_records(&manifest, &emb, cfg.world.fps);
    let by_id: BTreeMap<&str, usize> = train_clips.iter().enumerate().map(|(i, c)| (c.id.as_str(), i)).collect();
    let mut cur_csv = String::from("threshold,kept,dropped,train_steps,kld,fd,ib,sync_ms\n");
    for &threshold in &ab.thresholds {
        let kept: Vec<&ManifestRecord> = scored.iter().filter(|r| r.similarity.is_some_and(|s| s >= threshold)).collect();
        let subset: Vec<TrainExample> = kept.iter().map(|r| examples[by_id[r.id.as_str()]].clone()).collect();
        let steps = epoch_steps(ab.epochs, subset.len(), budget.batch_size);
        let cells = if subset.is_empty() {
            log::warn!("threshold {threshold} keeps no clips");
            "nan,nan,nan,nan".to_string()
        } else {
            let t0 = Instant::now();
            let tc = TrainConfig { steps, ..budget.clone() };
            let trainer = train_model(&cfg.model, &tc, &subset, None)?;
            stage.timings.insert(format!("train_threshold_{threshold}"), t0.elapsed().as_secs_f64());
            metric_cells(&evaluate(&trainer.params, &books, &test_clips, &cfg.sample, ab.n_gen, &emb)?)
        };
        cur_csv.push_str(&format!(
            "{threshold},{},{},{steps},{cells}\n",
            kept.len(),
            scored.len() - kept.len()
        ));
    }
    let curation = stage.write("curation.csv", cur_csv.as_bytes())?;
    stage.finish()?;
    Ok(AblateOutput {
        conditioning,
        cfg_scale,
        curation,
    })
}

/// Optimizer steps needed for `epochs` passes over `n` clips.
pub fn epoch_steps(epochs: f64, n: usize, batch_size: usize) -> u64 {
    (epochs * n as f64 / batch_size.max(1) as f64).ceil() as u64
}
