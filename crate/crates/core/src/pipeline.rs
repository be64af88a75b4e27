//! Config-driven orchestration: dataset generation, stage training with
//! resumable checkpoints, synthesis with provenance, and evaluation.
//!
//! Directory layout under the configured paths:
//!
//! ```text
//! data/manifest.json            split, seeds, checksums
//! data/{train,val}/<id>.*       phantom pairs
//! checkpoints/mask.{json,bin}
//! checkpoints/image.{json,bin}
//! checkpoints/refiner-{axial,coronal,sagittal}.{json,bin}
//! checkpoints/<stage>_loss.csv  step,loss
//! output/synth_<seed>.*         generated pairs
//! output/provenance.json
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::LabelCodec;
use crate::diffusion::{DiffusionSchedule, ScheduleSpec};
use crate::error::{Error, Result};
use crate::eval::downstream::{downstream_study, DownstreamConfig, Segmenter, Strategy};
use crate::eval::frechet::frechet_proxy;
use crate::eval::metrics::diversity_score;
use crate::eval::report::{mean_alignment, EvalReport};
use crate::imagegen::{generate_image_volume, SeqGenConfig, SeqGenModel, SeqPair};
use crate::io;
use crate::mcdpm::{McDpm, McDpmConfig, ModeProbabilities};
use crate::nn::{auto_levels, AdamConfig};
use crate::phantom::{make_dataset, PhantomSpec};
use crate::refiner::{refine_volume, SdmConfig, SdmModel, ViewSlices};
use crate::rng;
use crate::sampler::{generate_mask_volume, DiffusionSampler, GenerationConfig, StitchTrace};
use crate::volume::{ImageVolume, MaskVolume, View};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskStageConfig {
    /// Window length `m`.
    pub m: usize,
    /// Condition slices `n`.
    pub n: usize,
    pub width: usize,
    /// `None` picks the deepest level count the slice size allows (max 4).
    pub levels: Option<usize>,
    pub freq_dim: usize,
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    /// Decay of the parameter average used for sampling.
    pub ema_decay: f64,
    /// Exponent `p` of the training timestep draw `⌈T·u^p⌉`; 1 is uniform.
    pub timestep_power: f64,
    pub mode_probs: ModeProbabilities,
    pub guidance: f64,
    /// Output depth; `None` uses the phantom depth.
    pub depth: Option<usize>,
}

impl Default for MaskStageConfig {
    fn default() -> Self {
        Self {
            m: 6,
            n: 1,
            width: 16,
            levels: None,
            freq_dim: 16,
            lr: 1e-3,
            batch: 4,
            steps: 3000,
            ema_decay: 0.995,
            timestep_power: 1.0,
            mode_probs: ModeProbabilities::default(),
            guidance: 1.0,
            depth: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImageStageConfig {
    pub width: usize,
    pub levels: Option<usize>,
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
}

impl Default for ImageStageConfig {
    fn default() -> Self {
        Self { width: 8, levels: None, lr: 2e-3, batch: 4, steps: 5000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefinerStageConfig {
    pub width: usize,
    pub levels: Option<usize>,
    pub lr: f64,
    pub batch: usize,
    /// Optimizer steps per view.
    pub steps: usize,
    pub ema_decay: f64,
    /// Renoising depth used at synthesis time.
    pub k: usize,
}

impl Default for RefinerStageConfig {
    fn default() -> Self {
        Self { width: 8, levels: None, lr: 1e-3, batch: 4, steps: 800, ema_decay: 0.995, k: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub downstream: bool,
    pub study: DownstreamConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { downstream: true, study: DownstreamConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub data: PathBuf,
    pub checkpoints: PathBuf,
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { data: "data".into(), checkpoints: "checkpoints".into(), output: "output".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Phantom pairs generated by `make-data` (train + val).
    pub count: usize,
    pub phantom: PhantomSpec,
    pub schedule: ScheduleSpec,
    pub mask: MaskStageConfig,
    pub image: ImageStageConfig,
    pub refiner: RefinerStageConfig,
    pub eval: EvalConfig,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
    pub paths: Paths,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            count: 30,
            phantom: PhantomSpec::default(),
            schedule: ScheduleSpec::default(),
            mask: MaskStageConfig::default(),
            image: ImageStageConfig::default(),
            refiner: RefinerStageConfig::default(),
            eval: EvalConfig::default(),
            checkpoint_every: 500,
            paths: Paths::default(),
        }
    }
}

impl PipelineConfig {
    /// Seconds-scale settings on `8 x 16 x 16` volumes, for smoke runs.
    pub fn tiny() -> Self {
        let mut c = Self {
            count: 4,
            phantom: PhantomSpec::default().with_dims([8, 16, 16]),
            schedule: ScheduleSpec { steps: 20, beta_start: 1e-3, beta_end: 0.2, ..ScheduleSpec::default() },
            checkpoint_every: 0,
            ..Self::default()
        };
        c.mask = MaskStageConfig { m: 4, width: 4, steps: 6, batch: 2, ..MaskStageConfig::default() };
        c.image = ImageStageConfig { width: 4, steps: 6, batch: 2, ..ImageStageConfig::default() };
        c.refiner = RefinerStageConfig { width: 4, steps: 4, batch: 2, k: 3, ..RefinerStageConfig::default() };
        c.eval.study = DownstreamConfig { steps: 4, crop: [4, 16, 16], ..DownstreamConfig::default() };
        c
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = io::read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.schedule.build()?;
        self.mask.mode_probs.validate()?;
        let [d, h, w] = self.phantom.dims;
        let m = &self.mask;
        if m.n == 0 || m.n >= m.m || m.m > d {
            return Err(Error::Config(format!("need 1 <= n < m <= depth, got n={}, m={}, depth={d}", m.n, m.m)));
        }
        if !(m.guidance.is_finite() && m.guidance >= 1.0) {
            return Err(Error::Config(format!("guidance scale must be >= 1, got {}", m.guidance)));
        }
        if self.refiner.k > self.schedule.steps {
            return Err(Error::Timestep { t: self.refiner.k, max: self.schedule.steps });
        }
        for (name, d) in [("mask.ema_decay", self.mask.ema_decay), ("refiner.ema_decay", self.refiner.ema_decay)] {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {d}")));
            }
        }
        if !(self.mask.timestep_power.is_finite() && self.mask.timestep_power > 0.0) {
            return Err(Error::Config(format!("mask.timestep_power must be positive, got {}", self.mask.timestep_power)));
        }
        if self.count < 2 {
            return Err(Error::Config(format!("count must be >= 2 for a train/val split, got {}", self.count)));
        }
        if [h, w, d].iter().any(|&x| x % 2 != 0) {
            return Err(Error::Config(format!("volume dims {:?} must be even", self.phantom.dims)));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding with `paths` reset, so moving
    /// a run directory does not change its identity.
    pub fn hash(&self) -> String {
        let canonical = Self { paths: Paths::default(), ..self.clone() };
        io::sha256_hex(serde_json::to_string(&canonical).expect("serializable").as_bytes())
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        self.schedule.build()
    }

    pub fn codec(&self) -> LabelCodec {
        self.phantom.codec()
    }

    pub fn mask_model(&self) -> McDpmConfig {
        let [_, h, w] = self.phantom.dims;
        let s = &self.mask;
        let mut c = McDpmConfig::new(s.m, s.n, h, w, s.width);
        c.freq_dim = s.freq_dim;
        c.levels = s.levels.unwrap_or(c.levels);
        c.optimizer = AdamConfig { lr: s.lr, ..c.optimizer };
        c.ema_decay = s.ema_decay;
        c.timestep_power = s.timestep_power;
        c
    }

    pub fn image_model(&self) -> SeqGenConfig {
        let [_, h, w] = self.phantom.dims;
        let mut c = SeqGenConfig::new(h, w, self.image.width);
        c.levels = self.image.levels.unwrap_or(c.levels);
        c.optimizer = AdamConfig { lr: self.image.lr, ..c.optimizer };
        c
    }

    pub fn refiner_model(&self, view: View) -> SdmConfig {
        let mut c = SdmConfig::new(view, self.phantom.dims, self.refiner.width);
        if let Some(l) = self.refiner.levels {
            let (_, rows, cols) = view.geometry(self.phantom.dims);
            c.levels = l.min(auto_levels(rows, cols, l));
        }
        c.optimizer = AdamConfig { lr: self.refiner.lr, ..c.optimizer };
        c.ema_decay = self.refiner.ema_decay;
        c
    }

    pub fn generation(&self) -> GenerationConfig {
        GenerationConfig { depth: self.mask.depth.unwrap_or(self.phantom.dims[0]), guidance: self.mask.guidance }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub seed: u64,
    pub config_hash: String,
    pub spec: PhantomSpec,
    pub train: Vec<ManifestEntry>,
    pub val: Vec<ManifestEntry>,
}

pub fn cmd_make_data(cfg: &PipelineConfig) -> Result<DataManifest> {
    cfg.validate()?;
    let ds = make_dataset(cfg.count, &cfg.phantom, cfg.seed)?;
    let dir = &cfg.paths.data;
    let spec_json = serde_json::to_value(&cfg.phantom)?;
    let write = |split: &str, pairs: &[crate::phantom::PhantomPair]| -> Result<Vec<ManifestEntry>> {
        pairs
            .iter()
            .map(|p| {
                let stem = dir.join(split).join(&p.id);
                io::write_mask(&stem, &p.mask, Some(p.seed), spec_json.clone())?;
                io::write_image(&stem, &p.image, Some(p.seed), spec_json.clone())?;
                Ok(ManifestEntry { id: p.id.clone(), seed: p.seed, checksum: p.checksum() })
            })
            .collect()
    };
    let manifest =
        DataManifest { seed: cfg.seed, config_hash: cfg.hash(), spec: cfg.phantom.clone(), train: write("train", &ds.train)?, val: write("val", &ds.val)? };
    io::write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub type Pair = (MaskVolume, ImageVolume);

/// Load and checksum-verify the train and val splits.
pub fn load_data(dir: &Path) -> Result<(DataManifest, Vec<Pair>, Vec<Pair>)> {
    let manifest: DataManifest = io::read_json(&dir.join("manifest.json"))?;
    let load = |split: &str, entries: &[ManifestEntry]| -> Result<Vec<Pair>> {
        entries
            .iter()
            .map(|e| {
                let stem = dir.join(split).join(&e.id);
                let (m, _) = io::read_mask(&stem)?;
                let (i, _) = io::read_image(&stem)?;
                if io::pair_checksum(&m, &i) != e.checksum {
                    return Err(Error::Checkpoint(format!("checksum mismatch for {split}/{}", e.id)));
                }
                Ok((m, i))
            })
            .collect()
    };
    let train = load("train", &manifest.train)?;
    let val = load("val", &manifest.val)?;
    Ok((manifest, train, val))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Mask,
    Image,
    Refiner,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Mask => "mask",
            Stage::Image => "image",
            Stage::Refiner => "refiner",
        }
    }
}

pub fn checkpoint_stem(dir: &Path, kind: &str) -> PathBuf {
    dir.join(kind)
}

fn refiner_kind(view: View) -> String {
    format!("refiner-{}", view.name())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub stage: Stage,
    /// `(checkpoint kind, steps before this run, steps after)`.
    pub models: Vec<(String, u64, u64)>,
    pub final_loss: Option<f64>,
}

struct LossLog {
    path: PathBuf,
    buf: String,
}

impl LossLog {
    fn open(path: PathBuf, resume: bool) -> Self {
        let mut buf = String::new();
        if resume {
            if let Ok(s) = std::fs::read_to_string(&path) {
                buf = s;
            }
        }
        if buf.is_empty() {
            buf.push_str("model,step,loss\n");
        }
        Self { path, buf }
    }

    fn push(&mut self, model: &str, step: u64, loss: f64) {
        let _ = writeln!(self.buf, "{model},{step},{loss}");
    }

    fn flush(&self) -> Result<()> {
        io::write_bytes(&self.path, self.buf.as_bytes())
    }
}

/// Generic resumable loop: step `fit` until `target` total steps, saving
/// `save()` every `every` steps and at the end.
fn run_loop(
    name: &str,
    start: u64,
    target: u64,
    every: usize,
    log: &mut LossLog,
    mut fit: impl FnMut() -> Result<f64>,
    mut save: impl FnMut() -> Result<()>,
) -> Result<Option<f64>> {
    let mut last = None;
    for step in start..target {
        let loss = fit()?;
        if !loss.is_finite() {
            return Err(Error::Config(format!("{name} training diverged at step {step}")));
        }
        log.push(name, step + 1, loss);
        last = Some(loss);
        if every > 0 && (step + 1) % every as u64 == 0 && step + 1 < target {
            save()?;
            log.flush()?;
        }
    }
    save()?;
    log.flush()?;
    Ok(last)
}

/// Train `stage` up to the configured step count. With `resume`, an existing
/// checkpoint is loaded and training continues from its step; otherwise
/// training starts from a fresh initialization.
pub fn cmd_train(cfg: &PipelineConfig, stage: Stage, resume: bool) -> Result<TrainSummary> {
    cfg.validate()?;
    let (_, train, _) = load_data(&cfg.paths.data)?;
    if train.is_empty() {
        return Err(Error::Config("no training pairs".into()));
    }
    let ck = &cfg.paths.checkpoints;
    let hash = cfg.hash();
    let sched = cfg.schedule()?;
    let codec = cfg.codec();
    let mut log = LossLog::open(ck.join(format!("{}_loss.csv", stage.name())), resume);
    let every = cfg.checkpoint_every;
    let stem_exists = |kind: &str| io::checkpoint_paths(&checkpoint_stem(ck, kind)).0.exists();
    let mut models = Vec::new();
    let final_loss = match stage {
        Stage::Mask => {
            let mut model = if resume && stem_exists("mask") {
                McDpm::from_checkpoint(&io::read_checkpoint(&checkpoint_stem(ck, "mask"))?)?
            } else {
                McDpm::new(cfg.mask_model(), rng::derive(cfg.seed, 1))?
            };
            let vols: Vec<_> = train.iter().map(|(m, _)| codec.encode(m)).collect::<Result<_>>()?;
            let start = model.step();
            let target = cfg.mask.steps as u64;
            let cell = std::cell::RefCell::new(&mut model);
            let loss = run_loop(
                "mask",
                start,
                target.max(start),
                every,
                &mut log,
                || cell.borrow_mut().fit_step(&vols, &cfg.mask.mode_probs, cfg.mask.batch, &sched),
                || io::write_checkpoint(&checkpoint_stem(ck, "mask"), &cell.borrow().to_checkpoint(&sched, &hash)),
            )?;
            models.push(("mask".to_string(), start, model.step()));
            loss
        }
        Stage::Image => {
            let mut model = if resume && stem_exists("image") {
                SeqGenModel::from_checkpoint(&io::read_checkpoint(&checkpoint_stem(ck, "image"))?)?
            } else {
                SeqGenModel::new(cfg.image_model(), rng::derive(cfg.seed, 2))?
            };
            let pairs: Vec<SeqPair> = train.iter().map(|(m, i)| SeqPair::new(&codec, m, i)).collect::<Result<_>>()?;
            let start = model.step();
            let cell = std::cell::RefCell::new(&mut model);
            let loss = run_loop(
                "image",
                start,
                (cfg.image.steps as u64).max(start),
                every,
                &mut log,
                || cell.borrow_mut().fit_step(&pairs, cfg.image.batch),
                || io::write_checkpoint(&checkpoint_stem(ck, "image"), &cell.borrow().to_checkpoint(&hash)),
            )?;
            models.push(("image".to_string(), start, model.step()));
            loss
        }
        Stage::Refiner => {
            let mut last = None;
            for view in View::ALL {
                let kind = refiner_kind(view);
                let mut model = if resume && stem_exists(&kind) {
                    SdmModel::from_checkpoint(&io::read_checkpoint(&checkpoint_stem(ck, &kind))?)?
                } else {
                    SdmModel::new(cfg.refiner_model(view), rng::derive(cfg.seed, 3))?
                };
                let data = ViewSlices::new(view, &codec, &train)?;
                let start = model.step();
                let cell = std::cell::RefCell::new(&mut model);
                last = run_loop(
                    &kind,
                    start,
                    (cfg.refiner.steps as u64).max(start),
                    every,
                    &mut log,
                    || cell.borrow_mut().fit_step(&data, cfg.refiner.batch, &sched),
                    || io::write_checkpoint(&checkpoint_stem(ck, &kind), &cell.borrow().to_checkpoint(&sched, &hash)),
                )?
                .or(last);
                models.push((kind, start, model.step()));
            }
            last
        }
    };
    Ok(TrainSummary { stage, models, final_loss })
}

/// Trained models for synthesis.
pub struct Models {
    pub mask: McDpm,
    pub image: SeqGenModel,
    pub refiners: Vec<SdmModel>,
    /// `(kind, sha256 of the parameter blob)`.
    pub hashes: Vec<(String, String)>,
}

impl Models {
    pub fn load(dir: &Path) -> Result<Self> {
        let mut hashes = Vec::new();
        let mut read = |kind: &str| -> Result<io::Checkpoint> {
            let stem = checkpoint_stem(dir, kind);
            hashes.push((kind.to_string(), io::file_sha256(&io::checkpoint_paths(&stem).1)?));
            io::read_checkpoint(&stem)
        };
        let mask = McDpm::from_checkpoint(&read("mask")?)?;
        let image = SeqGenModel::from_checkpoint(&read("image")?)?;
        let refiners = View::ALL.iter().map(|&v| SdmModel::from_checkpoint(&read(&refiner_kind(v))?)).collect::<Result<Vec<_>>>()?;
        Ok(Self { mask, image, refiners, hashes })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthRecord {
    pub seed: u64,
    pub stem: String,
    pub mask_sha256: String,
    pub image_sha256: String,
    pub trace: StitchTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub checkpoints: Vec<(String, String)>,
    pub generation: GenerationConfig,
    pub mode_probs: ModeProbabilities,
    pub refine_steps: usize,
    pub schedule: ScheduleSpec,
    pub volumes: Vec<SynthRecord>,
}

/// One synthetic pair: stitched mask, sequential image, three-view
/// refinement. Every random draw is keyed on `seed`.
pub fn synthesize_pair(models: &Models, cfg: &PipelineConfig, seed: u64) -> Result<(MaskVolume, ImageVolume, StitchTrace)> {
    let sched = cfg.schedule()?;
    let codec = cfg.codec();
    let sampler = DiffusionSampler { model: &models.mask.denoiser, params: models.mask.sampling_params(), schedule: &sched, guidance: cfg.mask.guidance };
    let (mask, trace) = generate_mask_volume(&sampler, &codec, &cfg.generation(), &mut rng::rng_at(seed, &[0x3A5C]))?;
    let image = generate_image_volume(&models.image, &codec, &mask)?;
    let refs: Vec<&SdmModel> = models.refiners.iter().collect();
    let refined = refine_volume(&image, &mask, &refs, cfg.refiner.k, &sched, &codec, &mut rng::rng_at(seed, &[0x12EF]))?;
    Ok((mask, refined, trace))
}

/// Generate one pair per seed into the output directory and write
/// `provenance.json`.
pub fn cmd_synthesize(cfg: &PipelineConfig, seeds: &[u64]) -> Result<Provenance> {
    cfg.validate()?;
    let models = Models::load(&cfg.paths.checkpoints)?;
    let out = &cfg.paths.output;
    let results = crate::par::map(seeds, |&s| synthesize_pair(&models, cfg, s));
    let mut volumes = Vec::with_capacity(seeds.len());
    for (&seed, r) in seeds.iter().zip(results) {
        let (mask, image, trace) = r?;
        let stem_name = format!("synth_{seed}");
        let stem = out.join(&stem_name);
        let meta = serde_json::json!({ "config_hash": cfg.hash() });
        io::write_mask(&stem, &mask, Some(seed), meta.clone())?;
        io::write_image(&stem, &image, Some(seed), meta)?;
        volumes.push(SynthRecord {
            seed,
            stem: stem_name,
            mask_sha256: io::file_sha256(&io::mask_paths(&stem).0)?,
            image_sha256: io::file_sha256(&io::image_paths(&stem).0)?,
            trace,
        });
    }
    let prov = Provenance {
        config_hash: cfg.hash(),
        checkpoints: models.hashes.clone(),
        generation: cfg.generation(),
        mode_probs: cfg.mask.mode_probs,
        refine_steps: cfg.refiner.k,
        schedule: cfg.schedule,
        volumes,
    };
    io::write_json(&out.join("provenance.json"), &prov)?;
    Ok(prov)
}

/// Load the synthetic pairs listed in `provenance.json`.
pub fn load_synthetic(dir: &Path) -> Result<Vec<Pair>> {
    let prov: Provenance = io::read_json(&dir.join("provenance.json"))?;
    prov.volumes
        .iter()
        .map(|v| {
            let stem = dir.join(&v.stem);
            Ok((io::read_mask(&stem)?.0, io::read_image(&stem)?.0))
        })
        .collect()
}

/// Score synthetic pairs against the real data and write `report.json` and
/// `report.txt` into the output directory.
pub fn cmd_evaluate(cfg: &PipelineConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let (_, train, val) = load_data(&cfg.paths.data)?;
    let synth = load_synthetic(&cfg.paths.output)?;
    let real_imgs: Vec<_> = train.iter().chain(&val).map(|(_, i)| i.volume()).collect();
    let synth_imgs: Vec<_> = synth.iter().map(|(_, i)| i.volume()).collect();
    let fidelity = (synth.len() >= 2).then(|| frechet_proxy(&real_imgs, &synth_imgs)).transpose()?;
    let diversity = (synth.len() >= 2).then(|| diversity_score(&synth_imgs)).transpose()?;
    let pairs: Vec<_> = synth.iter().map(|(m, i)| (i, m)).collect();
    let (alignment, alignment_mean) = mean_alignment(&pairs, &cfg.phantom)?;
    let downstream = if cfg.eval.downstream && !val.is_empty() && !synth.is_empty() {
        Some(downstream_study(&train, &synth, &val, cfg.phantom.labels, &Strategy::ALL, &Segmenter::ALL, &cfg.eval.study)?)
    } else {
        None
    };
    let report = EvalReport { fidelity, diversity, alignment, alignment_mean, downstream };
    io::write_bytes(&cfg.paths.output.join("report.json"), report.to_json().as_bytes())?;
    io::write_bytes(&cfg.paths.output.join("report.txt"), report.to_text().as_bytes())?;
    Ok(report)
}
