//! Stage runner over `runs/<run_id>/`.
//!
//! Layout: `config.resolved`, `data/<scenario>.csds`,
//! `checkpoints/<scenario>__<variant>.safetensors`, `records.ndjson`,
//! `summary.txt`, `plots/`. Completed stages leave a marker (and their
//! records) under `.stages/`; re-runs skip them unless forced.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use csi_llm_core::backbone::Backbone;
use csi_llm_core::channel::{generate_synthetic_dataset, split_dataset, ChannelDataset, NormStats};
use csi_llm_core::config::{InitMode, ScenarioConfig};
use csi_llm_core::eval::{
    ablation_compare, one_step_eval, rollout, EvalSettings, Predictor, ScenarioSplits,
};
use csi_llm_core::training::{train, Checkpoint, TrainingData};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::ExperimentConfig;
use crate::dataset_io::{load_dataset, write_dataset};
use crate::error::{LabError, Result};
use crate::pretrained::load_pretrained;
use crate::report::{self, grid_records, rollout_records, MetricRecord, Protocol};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    GenData,
    Train,
    Eval,
    Rollout,
    Ablate,
    Plot,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::GenData,
        Stage::Train,
        Stage::Eval,
        Stage::Rollout,
        Stage::Ablate,
        Stage::Plot,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Rollout => "rollout",
            Stage::Ablate => "ablate",
            Stage::Plot => "plot",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| LabError::config("stages", format!("unknown stage `{s}`")))
    }

    /// Stages whose records feed the report.
    fn records_stage(&self) -> bool {
        matches!(self, Stage::Eval | Stage::Rollout | Stage::Ablate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    Skipped,
}

#[derive(Debug, Clone)]
pub struct PipelineReport {
    pub run_dir: PathBuf,
    pub outcomes: Vec<(Stage, StageStatus)>,
}

/// Paths inside one run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn for_config(cfg: &ExperimentConfig) -> Self {
        Self::new(cfg.runs_root().join(&cfg.run_id))
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.resolved")
    }

    pub fn data(&self, tag: &str) -> PathBuf {
        self.root.join("data").join(format!("{tag}.csds"))
    }

    pub fn checkpoint(&self, tag: &str, variant: &str) -> PathBuf {
        self.root
            .join("checkpoints")
            .join(format!("{tag}__{variant}.safetensors"))
    }

    pub fn records(&self) -> PathBuf {
        self.root.join("records.ndjson")
    }

    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.txt")
    }

    pub fn plots(&self) -> PathBuf {
        self.root.join("plots")
    }

    fn marker(&self, stage: Stage) -> PathBuf {
        self.root
            .join(".stages")
            .join(format!("{}.done", stage.name()))
    }

    fn fragment(&self, stage: Stage) -> PathBuf {
        self.root
            .join(".stages")
            .join(format!("{}.ndjson", stage.name()))
    }
}

/// Exclusive claim on a run directory, released on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(LabError::Locked(dir.to_path_buf()))
            }
            Err(e) => Err(LabError::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn mkdirs(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| LabError::io(path, e))
}

/// Scenario tags (`30kmh`, `mix`, ...) with their configs.
pub fn scenario_tags(cfg: &ExperimentConfig) -> Result<Vec<(String, ScenarioConfig)>> {
    let mut out: Vec<(String, ScenarioConfig)> = Vec::new();
    for sc in cfg.scenarios() {
        let tag = sc.speed_kmh.tag();
        if out.iter().any(|(t, _)| *t == tag) {
            return Err(LabError::config(
                "sweep.speeds",
                format!("scenario `{tag}` listed twice"),
            ));
        }
        out.push((tag, sc));
    }
    Ok(out)
}

/// Raw (unnormalized) train/val/test splits.
#[derive(Debug, Clone)]
pub struct RawSplits {
    pub train: ChannelDataset,
    pub val: ChannelDataset,
    pub test: ChannelDataset,
}

pub fn split_counts(cfg: &ExperimentConfig, n: usize) -> Result<(usize, usize, usize)> {
    let [a, b, c] = cfg.data.split;
    if a + b + c != n {
        return Err(LabError::config(
            "data.split",
            format!(
                "counts {:?} do not add up to the {n} samples available",
                cfg.data.split
            ),
        ));
    }
    Ok((a, b, c))
}

pub fn raw_splits(cfg: &ExperimentConfig, ds: &ChannelDataset) -> Result<RawSplits> {
    let counts = split_counts(cfg, ds.len())?;
    let (train, val, test) = split_dataset(ds, counts, cfg.hparams.seed)?;
    Ok(RawSplits { train, val, test })
}

/// Train-fitted normalization applied to all three splits.
pub fn normalized_splits(
    cfg: &ExperimentConfig,
    raw: &RawSplits,
) -> Result<(ChannelDataset, ChannelDataset, ChannelDataset)> {
    let stats = NormStats::fit(&raw.train, cfg.data.norm)?;
    Ok((
        stats.apply(&raw.train)?,
        stats.apply(&raw.val)?,
        stats.apply(&raw.test)?,
    ))
}

fn apply_stats(stats: &Option<NormStats>, ds: &ChannelDataset) -> Result<ChannelDataset> {
    Ok(stats
        .clone()
        .unwrap_or_else(NormStats::identity)
        .apply(ds)?)
}

fn load_pretrained_source(cfg: &ExperimentConfig) -> Result<Backbone<f32>> {
    let path = cfg.paths.pretrained.as_deref().ok_or_else(|| {
        LabError::config(
            "paths.pretrained",
            "pretrained initialization needs a weight file (or set backbone.init_mode = \"random\")",
        )
    })?;
    load_pretrained(path, &cfg.backbone)
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    run: &'a RunDir,
    tags: Vec<(String, ScenarioConfig)>,
}

impl Ctx<'_> {
    fn read_data(&self, tag: &str, sc: &ScenarioConfig) -> Result<ChannelDataset> {
        let path = self.run.data(tag);
        if !path.exists() {
            return Err(LabError::Dependency {
                stage: "gen-data",
                missing: path.display().to_string(),
            });
        }
        load_dataset(&path, sc)
    }

    fn gen_data(&self) -> Result<Vec<MetricRecord>> {
        mkdirs(&self.run.root.join("data"))?;
        if let Some(ext) = &self.cfg.paths.dataset {
            if self.tags.len() != 1 {
                return Err(LabError::config(
                    "paths.dataset",
                    "an external dataset supports a single scenario",
                ));
            }
            let (tag, sc) = &self.tags[0];
            let ds = load_dataset(ext, sc)?;
            split_counts(self.cfg, ds.len())?;
            write_dataset(self.run.data(tag), &ds)?;
            return Ok(Vec::new());
        }
        for (tag, sc) in &self.tags {
            log::info!("generating {} samples for {tag}", sc.n_samples);
            let ds = generate_synthetic_dataset(sc, sc.n_samples)?;
            write_dataset(self.run.data(tag), &ds)?;
        }
        Ok(Vec::new())
    }

    fn train(&self) -> Result<Vec<MetricRecord>> {
        mkdirs(&self.run.root.join("checkpoints"))?;
        let source = match self.cfg.backbone.init_mode {
            InitMode::Pretrained => Some(load_pretrained_source(self.cfg)?),
            InitMode::Random => None,
        };
        for (tag, sc) in &self.tags {
            let raw = raw_splits(self.cfg, &self.read_data(tag, sc)?)?;
            let (tr, va, _) = normalized_splits(self.cfg, &raw)?;
            for &variant in &self.cfg.sweep.variants {
                log::info!("training {} on {tag}", variant.name());
                let data = TrainingData {
                    train: &tr,
                    val: (!va.is_empty()).then_some(&va),
                };
                let ck = train(
                    variant,
                    data,
                    &self.cfg.backbone,
                    &self.cfg.hparams,
                    source.as_ref(),
                )?;
                save_checkpoint(self.run.checkpoint(tag, variant.name()), &ck)?;
            }
        }
        Ok(Vec::new())
    }

    /// Checkpoints to evaluate per scenario tag.
    fn checkpoints(&self) -> Result<Vec<(String, Checkpoint<f32>)>> {
        let mut out = Vec::new();
        let mut missing = None;
        for (tag, _) in &self.tags {
            for v in &self.cfg.sweep.variants {
                let path = self.run.checkpoint(tag, v.name());
                if path.exists() {
                    out.push((tag.clone(), load_checkpoint(&path)?));
                } else if missing.is_none() {
                    missing = Some(path);
                }
            }
        }
        if let Some(path) = missing {
            match &self.cfg.paths.checkpoint {
                Some(ext) if out.is_empty() => {
                    let ck = load_checkpoint(ext)?;
                    out.push((ck.scenario.speed_kmh.tag(), ck));
                }
                _ => {
                    return Err(LabError::Dependency {
                        stage: "train",
                        missing: path.display().to_string(),
                    })
                }
            }
        }
        Ok(out)
    }

    fn test_split(&self, tag: &str) -> Result<ChannelDataset> {
        let sc = self
            .tags
            .iter()
            .find(|(t, _)| t == tag)
            .map(|(_, sc)| sc)
            .ok_or_else(|| {
                LabError::config(
                    "paths.checkpoint",
                    format!("checkpoint scenario `{tag}` is not in this run"),
                )
            })?;
        Ok(raw_splits(self.cfg, &self.read_data(tag, sc)?)?.test)
    }

    fn no_prediction_test(&self, tag: &str) -> Result<ChannelDataset> {
        let sc = &self
            .tags
            .iter()
            .find(|(t, _)| t == tag)
            .expect("known tag")
            .1;
        let raw = raw_splits(self.cfg, &self.read_data(tag, sc)?)?;
        Ok(normalized_splits(self.cfg, &raw)?.2)
    }

    fn eval(&self) -> Result<Vec<MetricRecord>> {
        let cks = self.checkpoints()?;
        let eval = &self.cfg.eval;
        let anchor = eval.resolved_anchor(self.cfg.hparams.l_m);
        let mut records = Vec::new();
        let mut done_nopred = Vec::new();
        for (tag, ck) in &cks {
            let settings = EvalSettings::new(tag.clone(), self.cfg.hparams.eval_batch);
            if !done_nopred.contains(tag) {
                let test = self.no_prediction_test(tag)?;
                let grid = one_step_eval(
                    &Predictor::<f32>::NoPrediction,
                    &test,
                    &eval.lengths,
                    anchor,
                    &settings,
                )?;
                records.extend(grid_records(&self.cfg.run_id, &grid, Protocol::OneStep));
                done_nopred.push(tag.clone());
            }
            let test = apply_stats(&ck.norm_stats, &self.test_split(tag)?)?;
            let grid = one_step_eval(
                &Predictor::Model(&ck.model),
                &test,
                &eval.lengths,
                anchor,
                &settings,
            )?;
            records.extend(grid_records(&self.cfg.run_id, &grid, Protocol::OneStep));
        }
        Ok(records)
    }

    fn rollout(&self) -> Result<Vec<MetricRecord>> {
        let cks = self.checkpoints()?;
        let e = &self.cfg.eval;
        let l_m = self.cfg.hparams.l_m;
        let mut records = Vec::new();
        let mut done_nopred = Vec::new();
        for (tag, ck) in &cks {
            let settings = EvalSettings::new(tag.clone(), self.cfg.hparams.eval_batch);
            if !done_nopred.contains(tag) {
                let test = self.no_prediction_test(tag)?;
                let r = rollout(
                    &Predictor::<f32>::NoPrediction,
                    &test,
                    e.rollout_start,
                    e.rollout_context,
                    e.horizon,
                    l_m,
                    &settings,
                )?;
                records.extend(rollout_records(&self.cfg.run_id, &r, l_m));
                done_nopred.push(tag.clone());
            }
            let variant = ck.model.variant;
            let fits = match variant.fixed_context() {
                None => true,
                Some(l) => {
                    l == e.rollout_context && e.horizon.is_multiple_of(variant.output_steps())
                }
            };
            if !fits {
                log::info!(
                    "rollout: {} cannot roll out from {} context steps; skipped",
                    variant.name(),
                    e.rollout_context
                );
                continue;
            }
            let test = apply_stats(&ck.norm_stats, &self.test_split(tag)?)?;
            let r = rollout(
                &Predictor::Model(&ck.model),
                &test,
                e.rollout_start,
                e.rollout_context,
                e.horizon,
                ck.hparams.l_m,
                &settings,
            )?;
            records.extend(rollout_records(&self.cfg.run_id, &r, ck.hparams.l_m));
        }
        Ok(records)
    }

    fn ablate(&self) -> Result<Vec<MetricRecord>> {
        let modes = self.cfg.sweep.ablation_modes;
        let source = if modes.contains(&InitMode::Pretrained) {
            Some(load_pretrained_source(self.cfg)?)
        } else {
            None
        };
        let mut owned = Vec::new();
        for (tag, sc) in &self.tags {
            let raw = raw_splits(self.cfg, &self.read_data(tag, sc)?)?;
            owned.push((tag.clone(), normalized_splits(self.cfg, &raw)?));
        }
        let splits: Vec<ScenarioSplits<'_>> = owned
            .iter()
            .map(|(tag, (tr, va, te))| ScenarioSplits {
                tag,
                train: tr,
                val: (!va.is_empty()).then_some(va),
                test: te,
            })
            .collect();
        let anchor = self.cfg.eval.resolved_anchor(self.cfg.hparams.l_m);
        let report = ablation_compare(
            &splits,
            &self.cfg.backbone,
            &self.cfg.hparams,
            source.as_ref(),
            &self.cfg.eval.lengths,
            anchor,
            self.cfg.hparams.eval_batch,
            modes,
        )?;
        Ok(report
            .arms
            .iter()
            .flat_map(|arm| arm.grids.iter())
            .flat_map(|g| grid_records(&self.cfg.run_id, g, Protocol::Ablation))
            .collect())
    }

    fn plot(&self) -> Result<()> {
        let path = self.run.records();
        if !path.exists() {
            return Err(LabError::Dependency {
                stage: "eval",
                missing: path.display().to_string(),
            });
        }
        let records = report::read_records(&path)?;
        report::write_plots(&records, &self.run.plots())?;
        write_summary(self.run, &records)
    }
}

fn write_summary(run: &RunDir, records: &[MetricRecord]) -> Result<()> {
    let path = run.summary();
    std::fs::write(&path, report::summary(records)).map_err(|e| LabError::io(&path, e))
}

/// Rebuilds `records.ndjson` and `summary.txt` from the stage fragments.
fn collect_records(run: &RunDir) -> Result<Vec<MetricRecord>> {
    let mut all = Vec::new();
    for stage in Stage::ALL.into_iter().filter(Stage::records_stage) {
        let frag = run.fragment(stage);
        if frag.exists() {
            all.extend(report::read_records(&frag)?);
        }
    }
    if !all.is_empty() {
        report::write_records(&run.records(), &all)?;
        write_summary(run, &all)?;
    }
    Ok(all)
}

/// Runs `stages` (in pipeline order) for `cfg`.
pub fn run_pipeline(
    cfg: &ExperimentConfig,
    stages: &[Stage],
    force: bool,
) -> Result<PipelineReport> {
    cfg.validate()?;
    let run = RunDir::for_config(cfg);
    mkdirs(&run.root.join(".stages"))?;
    let _lock = RunLock::acquire(&run.root)?;

    let resolved = cfg.to_toml();
    let config_path = run.config();
    if let Ok(previous) = std::fs::read_to_string(&config_path) {
        let has_results = Stage::ALL.iter().any(|s| run.marker(*s).exists());
        if previous != resolved && has_results && !force {
            return Err(LabError::config(
                "run_id",
                format!("{} holds results of a different configuration; pass --force or pick another run_id", run.root.display()),
            ));
        }
    }
    std::fs::write(&config_path, &resolved).map_err(|e| LabError::io(&config_path, e))?;

    let ctx = Ctx {
        cfg,
        run: &run,
        tags: scenario_tags(cfg)?,
    };
    let mut ordered: Vec<Stage> = stages.to_vec();
    ordered.sort();
    ordered.dedup();
    let mut outcomes = Vec::new();
    for stage in ordered {
        let marker = run.marker(stage);
        if marker.exists() && !force {
            log::info!("stage {} already complete; skipped", stage.name());
            outcomes.push((stage, StageStatus::Skipped));
            continue;
        }
        log::info!("stage {}", stage.name());
        let records = match stage {
            Stage::GenData => ctx.gen_data()?,
            Stage::Train => ctx.train()?,
            Stage::Eval => ctx.eval()?,
            Stage::Rollout => ctx.rollout()?,
            Stage::Ablate => ctx.ablate()?,
            Stage::Plot => {
                ctx.plot()?;
                Vec::new()
            }
        };
        if stage.records_stage() {
            report::write_records(&run.fragment(stage), &records)?;
            collect_records(&run)?;
        }
        std::fs::write(&marker, b"").map_err(|e| LabError::io(&marker, e))?;
        outcomes.push((stage, StageStatus::Ran));
    }
    Ok(PipelineReport {
        run_dir: run.root.clone(),
        outcomes,
    })
}
