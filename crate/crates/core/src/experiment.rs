//! Experiment harness: one TOML config per experiment, deterministic artifact
//! files, and the forge / train / eval / shortcut / sweep commands.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::error::{Error, Result};
use crate::forge::{forge_corpus, Corpus, ForgeConfig};
use crate::metrics::{eval_set, evaluate, EvalReport};
use crate::policy::{PolicyParams, ReferenceSnapshot};
use crate::rewards::RewardWeights;
use crate::rng::Streams;
use crate::scm::CausalWorld;
use crate::train::{
    run_dpo, run_grpo, run_pipeline, run_sft, PipelineConfig, PipelineOutput, StageName,
    TraceHeader, TraceRecord, TrainData,
};
use crate::trajectory::Vocabulary;
use crate::util::{mean, read_to_string, sha256_json, std_pop, to_jsonl, write_atomic};

/// Environment variable that replaces the configured output directory.
pub const OUTPUT_ROOT_ENV: &str = "REFLECT_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub tau: Vec<f64>,
    pub group_size: Vec<usize>,
    pub reward_presets: Vec<String>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            tau: vec![0.3, 0.5, 0.7, 0.8, 0.9],
            group_size: vec![4, 8, 16],
            reward_presets: vec!["balanced".into(), "selected".into(), "acc_only".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShortcutConfig {
    /// Confounder strength during training.
    pub rho_train: f64,
    pub seeds: Vec<u64>,
}

impl Default for ShortcutConfig {
    fn default() -> Self {
        Self {
            rho_train: 0.95,
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub world: CausalWorld,
    pub forge: ForgeConfig,
    pub pipeline: PipelineConfig,
    /// Named reward preset; overrides `pipeline.grpo.weights` when set.
    pub reward_preset: Option<String>,
    pub sweep: SweepConfig,
    pub shortcut: ShortcutConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            world: CausalWorld::default(),
            forge: ForgeConfig {
                n_causal: 400,
                n_shortcut: 400,
                n_partial: 400,
                ..Default::default()
            },
            pipeline: PipelineConfig::default(),
            reward_preset: None,
            sweep: SweepConfig::default(),
            shortcut: ShortcutConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Schema(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.forge.validate()?;
        self.pipeline.validate()?;
        if let Some(p) = &self.reward_preset {
            RewardWeights::preset(p)?;
        }
        if !(0.0..=1.0).contains(&self.shortcut.rho_train) {
            return Err(Error::InvalidConfig(format!(
                "rho_train {} outside [0,1]",
                self.shortcut.rho_train
            )));
        }
        Ok(())
    }

    /// Pipeline settings after applying the reward preset.
    pub fn effective_pipeline(&self) -> Result<PipelineConfig> {
        let mut p = self.pipeline.clone();
        if let Some(name) = &self.reward_preset {
            p.grpo.weights = RewardWeights::preset(name)?;
        }
        Ok(p)
    }

    /// Hash of everything except the output location, which does not affect results.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        sha256_json(&c)
    }

    pub fn output_root(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if !root.is_empty() => PathBuf::from(root),
            _ => self.output_dir.clone(),
        }
    }

    pub fn streams(&self) -> Streams {
        Streams::new(self.seed)
    }
}

/// Policy parameters tagged with the run they belong to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotFile {
    pub kind: String,
    pub config_hash: String,
    pub world_hash: String,
    pub stage: StageName,
    pub params: PolicyParams,
}

impl SnapshotFile {
    pub fn new(cfg: &ExperimentConfig, stage: StageName, params: PolicyParams) -> Self {
        Self {
            kind: "snapshot".into(),
            config_hash: cfg.hash(),
            world_hash: cfg.world.hash(),
            stage,
            params,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s: Self = serde_json::from_str(&read_to_string(path)?)?;
        if s.kind != "snapshot" {
            return Err(Error::Schema(format!(
                "{} is not a snapshot",
                path.display()
            )));
        }
        s.params.check()?;
        Ok(s)
    }
}

fn snapshot_path(dir: &Path, stage: StageName) -> PathBuf {
    dir.join(format!("snapshot_{}.json", stage.name()))
}

fn expect_hash(what: &str, expected: &str, found: &str) -> Result<()> {
    if expected != found {
        return Err(Error::HashMismatch {
            what: what.into(),
            expected: expected.into(),
            found: found.into(),
        });
    }
    Ok(())
}

fn corpus_path(dir: &Path) -> PathBuf {
    dir.join("corpus.jsonl")
}

/// Forge the corpus and stamp it with the experiment hash.
pub fn build_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    let mut corpus = forge_corpus(&cfg.world, &cfg.forge, &cfg.streams().derive("forge", 0))?;
    corpus.header.config_hash = cfg.hash();
    Ok(corpus)
}

pub fn cmd_forge(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.output_root();
    let path = corpus_path(&dir);
    write_atomic(&path, &build_corpus(cfg)?.to_jsonl()?)?;
    Ok(path)
}

fn load_corpus(cfg: &ExperimentConfig, dir: &Path) -> Result<Corpus> {
    let corpus = Corpus::from_jsonl(&read_to_string(&corpus_path(dir))?)?;
    expect_hash("corpus config", &cfg.hash(), &corpus.header.config_hash)?;
    expect_hash("corpus world", &cfg.world.hash(), &corpus.header.world_hash)?;
    Ok(corpus)
}

fn write_trace(path: &Path, header: &TraceHeader, trace: &[TraceRecord]) -> Result<()> {
    let mut bytes = to_jsonl(std::iter::once(header))?;
    bytes.extend(to_jsonl(trace)?);
    write_atomic(path, &bytes)
}

fn write_report(dir: &Path, stem: &str, report: &EvalReport) -> Result<()> {
    write_atomic(
        &dir.join(format!("{stem}.json")),
        &serde_json::to_vec_pretty(report)?,
    )?;
    write_atomic(&dir.join(format!("{stem}.csv")), report.to_csv().as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainTarget {
    All,
    Stage(StageName),
}

impl std::str::FromStr for TrainTarget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => TrainTarget::All,
            "sft" => TrainTarget::Stage(StageName::Sft),
            "dpo" => TrainTarget::Stage(StageName::Dpo),
            "grpo" => TrainTarget::Stage(StageName::Grpo),
            other => return Err(Error::InvalidConfig(format!("unknown stage `{other}`"))),
        })
    }
}

fn trace_header(cfg: &ExperimentConfig, pipeline: &PipelineConfig, corpus: &Corpus) -> TraceHeader {
    let mut families: Vec<String> = corpus
        .variants
        .iter()
        .map(|v| v.tag.name().to_string())
        .collect();
    families.dedup();
    TraceHeader {
        kind: "trace".into(),
        config_hash: cfg.hash(),
        causal_stage: pipeline.grpo.causal_stage,
        grpo_families: families,
        stage_order: std::iter::once(StageName::Sft)
            .chain(pipeline.stage_order())
            .collect(),
    }
}

/// Train one stage (resuming from the preceding snapshot) or the full pipeline.
/// Reads the corpus written by `cmd_forge`, forging it first when absent.
pub fn cmd_train(cfg: &ExperimentConfig, target: TrainTarget) -> Result<Vec<PathBuf>> {
    let dir = cfg.output_root();
    if !corpus_path(&dir).exists() {
        cmd_forge(cfg)?;
    }
    let corpus = load_corpus(cfg, &dir)?;
    let pipeline = cfg.effective_pipeline()?;
    let vocab = Vocabulary::for_world(&cfg.world);
    let streams = cfg.streams();
    let mut written = Vec::new();

    let stage = match target {
        TrainTarget::All => {
            let out = run_pipeline(
                &pipeline,
                &cfg.world,
                &corpus,
                &vocab,
                &streams,
                &cfg.hash(),
            )?;
            for snap in &out.snapshots {
                let path = snapshot_path(&dir, snap.stage);
                write_atomic(
                    &path,
                    &serde_json::to_vec(&SnapshotFile::new(cfg, snap.stage, snap.params.clone()))?,
                )?;
                written.push(path);
            }
            let trace = dir.join("trace.jsonl");
            write_trace(&trace, &out.header, &out.trace)?;
            written.push(trace);
            for r in &out.reports {
                write_report(&dir, &format!("report_{}", r.stage.name()), &r.report)?;
            }
            return Ok(written);
        }
        TrainTarget::Stage(s) => s,
    };

    let spec = pipeline.feature_spec(&cfg.world, &vocab);
    let data = TrainData::new(&corpus, &spec, &vocab)?;
    let mut trace = Vec::new();
    let load = |s: StageName| -> Result<PolicyParams> {
        let snap = SnapshotFile::load(&snapshot_path(&dir, s))?;
        expect_hash("snapshot config", &cfg.hash(), &snap.config_hash)?;
        expect_hash("snapshot world", &cfg.world.hash(), &snap.world_hash)?;
        Ok(snap.params)
    };
    let params = match stage {
        StageName::Sft => {
            let mut p = PolicyParams::zeros(spec)?;
            run_sft(
                &mut p,
                &pipeline.sft,
                &data.feats,
                &data.sequences,
                &vocab,
                &streams.derive("sft", 0),
                &mut trace,
            )?;
            p
        }
        s => {
            let order = pipeline.stage_order();
            let pos = order.iter().position(|&x| x == s).ok_or_else(|| {
                Error::InvalidConfig(format!("stage {} disabled by ablation flags", s.name()))
            })?;
            let prev = if pos == 0 {
                StageName::Sft
            } else {
                order[pos - 1]
            };
            let mut p = load(prev)?;
            let stage_streams = streams.derive(s.name(), 0);
            if s == StageName::Dpo {
                let reference = ReferenceSnapshot::new(&load(StageName::Sft)?);
                run_dpo(
                    &mut p,
                    &reference,
                    &pipeline.dpo,
                    &data,
                    &cfg.world,
                    &vocab,
                    &stage_streams,
                    &mut trace,
                )?;
            } else {
                run_grpo(
                    &mut p,
                    &pipeline.grpo,
                    &data,
                    &cfg.world,
                    &vocab,
                    &stage_streams,
                    &mut trace,
                )?;
            }
            p
        }
    };
    params.check()?;
    let path = snapshot_path(&dir, stage);
    write_atomic(
        &path,
        &serde_json::to_vec(&SnapshotFile::new(cfg, stage, params))?,
    )?;
    written.push(path);
    let tpath = dir.join(format!("trace_{}.jsonl", stage.name()));
    write_trace(&tpath, &trace_header(cfg, &pipeline, &corpus), &trace)?;
    written.push(tpath);
    Ok(written)
}

/// Evaluate a snapshot on held-out data; refuses snapshots from another world.
pub fn cmd_eval(cfg: &ExperimentConfig, snapshot: &Path) -> Result<EvalReport> {
    let snap = SnapshotFile::load(snapshot)?;
    expect_hash("snapshot world", &cfg.world.hash(), &snap.world_hash)?;
    let dir = cfg.output_root();
    let train_keys: BTreeSet<String> =
        match Corpus::from_jsonl(&read_to_string(&corpus_path(&dir))?) {
            Ok(c) => c.instance_keys().into_iter().collect(),
            Err(e) => return Err(e),
        };
    let pipeline = cfg.effective_pipeline()?;
    let vocab = Vocabulary::for_world(&cfg.world);
    let streams = cfg.streams();
    let set = eval_set(&cfg.world, &pipeline.eval, &streams.derive("eval-set", 0))?;
    let report = evaluate(
        &snap.params,
        &set,
        &train_keys,
        &cfg.world,
        &vocab,
        &pipeline.eval,
        &streams.derive("eval", 0),
        &cfg.hash(),
    )?;
    write_report(&dir, &format!("eval_{}", snap.stage.name()), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    /// Supervised only, on observational instances without counterfactual variants.
    SftCorrelational,
    /// SFT, DPO and GRPO on the full three-family corpus.
    FullPipeline,
}

impl Condition {
    pub fn name(self) -> &'static str {
        match self {
            Condition::SftCorrelational => "sft_correlational",
            Condition::FullPipeline => "full_pipeline",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShortcutRow {
    pub condition: Condition,
    pub seed: u64,
    pub observational_accuracy: f64,
    pub interventional_accuracy: f64,
    pub diag_c: f64,
    pub hallucination: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShortcutSummary {
    pub config_hash: String,
    pub rows: Vec<ShortcutRow>,
}

impl ShortcutSummary {
    fn column(&self, c: Condition, f: impl Fn(&ShortcutRow) -> f64) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.condition == c)
            .map(f)
            .collect()
    }

    pub fn mean_interventional(&self, c: Condition) -> f64 {
        mean(&self.column(c, |r| r.interventional_accuracy))
    }

    pub fn mean_observational(&self, c: Condition) -> f64 {
        mean(&self.column(c, |r| r.observational_accuracy))
    }

    /// Per-row results followed by mean and std lines per condition. Times are
    /// left out so the file is reproducible.
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# config_hash={}\ncondition,seed,observational_accuracy,interventional_accuracy,diag_c,hallucination\n",
            self.config_hash
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.4},{:.4},{:.4},{:.4}\n",
                r.condition.name(),
                r.seed,
                100.0 * r.observational_accuracy,
                100.0 * r.interventional_accuracy,
                100.0 * r.diag_c,
                100.0 * r.hallucination
            ));
        }
        for c in [Condition::SftCorrelational, Condition::FullPipeline] {
            for (label, f) in [
                ("mean", mean as fn(&[f64]) -> f64),
                ("std", std_pop as fn(&[f64]) -> f64),
            ] {
                let col = |g: fn(&ShortcutRow) -> f64| 100.0 * f(&self.column(c, g));
                out.push_str(&format!(
                    "{},{},{:.4},{:.4},{:.4},{:.4}\n",
                    c.name(),
                    label,
                    col(|r| r.observational_accuracy),
                    col(|r| r.interventional_accuracy),
                    col(|r| r.diag_c),
                    col(|r| r.hallucination)
                ));
            }
        }
        out
    }
}

/// Run one condition for one seed and return the final evaluation report.
pub fn run_condition(
    cfg: &ExperimentConfig,
    condition: Condition,
    seed: u64,
) -> Result<(EvalReport, PipelineOutput)> {
    let mut c = cfg.clone();
    c.seed = seed;
    c.world.noise.confounder = cfg.shortcut.rho_train;
    let mut pipeline = c.effective_pipeline()?;
    if condition == Condition::SftCorrelational {
        c.forge.n_shortcut = 0;
        c.forge.n_partial = 0;
        pipeline.ablation.skip_dpo = true;
        pipeline.grpo.steps = 0;
    }
    pipeline.eval_each_stage = false;
    let corpus = build_corpus(&c)?;
    let vocab = Vocabulary::for_world(&c.world);
    let out = run_pipeline(
        &pipeline,
        &c.world,
        &corpus,
        &vocab,
        &c.streams(),
        &c.hash(),
    )?;
    let report = out
        .final_report()
        .cloned()
        .ok_or_else(|| Error::InvalidConfig("pipeline produced no report".into()))?;
    Ok((report, out))
}

/// Both conditions across all configured seeds.
pub fn shortcut_experiment(cfg: &ExperimentConfig) -> Result<ShortcutSummary> {
    let jobs: Vec<(Condition, u64)> = [Condition::SftCorrelational, Condition::FullPipeline]
        .into_iter()
        .flat_map(|c| cfg.shortcut.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(condition, seed)| {
            let t = Instant::now();
            let (r, _) = run_condition(cfg, condition, seed)?;
            Ok(ShortcutRow {
                condition,
                seed,
                observational_accuracy: r.observational.accuracy,
                interventional_accuracy: r.interventional.accuracy,
                diag_c: r.overall.diag_c,
                hallucination: r.overall.hallucination_rate,
                seconds: t.elapsed().as_secs_f64(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ShortcutSummary {
        config_hash: cfg.hash(),
        rows,
    })
}

pub fn cmd_shortcut_experiment(cfg: &ExperimentConfig) -> Result<ShortcutSummary> {
    let summary = shortcut_experiment(cfg)?;
    let dir = cfg.output_root();
    write_atomic(&dir.join("shortcut.csv"), summary.to_csv().as_bytes())?;
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKind {
    Tau,
    GroupSize,
    Reward,
    Order,
}

impl std::str::FromStr for SweepKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "tau" => SweepKind::Tau,
            "group-size" => SweepKind::GroupSize,
            "reward" => SweepKind::Reward,
            "order" => SweepKind::Order,
            other => return Err(Error::InvalidConfig(format!("unknown sweep `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub setting: String,
    pub seed: u64,
    pub interventional_accuracy: f64,
    pub observational_accuracy: f64,
    pub final_reward: Option<f64>,
    pub final_causal_reward: Option<f64>,
    pub error_cases: usize,
}

fn sweep_settings(
    cfg: &ExperimentConfig,
    kind: SweepKind,
) -> Result<Vec<(String, PipelineConfig)>> {
    let base = cfg.effective_pipeline()?;
    Ok(match kind {
        SweepKind::Tau => cfg
            .sweep
            .tau
            .iter()
            .map(|&t| {
                let mut p = base.clone();
                p.dpo.errors.tau = t;
                (format!("tau={t}"), p)
            })
            .collect(),
        SweepKind::GroupSize => cfg
            .sweep
            .group_size
            .iter()
            .map(|&g| {
                let mut p = base.clone();
                p.grpo.group_size = g;
                (format!("G={g}"), p)
            })
            .collect(),
        SweepKind::Reward => cfg
            .sweep
            .reward_presets
            .iter()
            .map(|name| {
                let mut p = base.clone();
                p.grpo.weights = RewardWeights::preset(name)?;
                Ok((name.clone(), p))
            })
            .collect::<Result<_>>()?,
        SweepKind::Order => [
            ("dpo_grpo", false, false),
            ("grpo_dpo", false, true),
            ("grpo_only", true, false),
        ]
        .into_iter()
        .map(|(name, skip, rev)| {
            let mut p = base.clone();
            p.ablation.skip_dpo = skip;
            p.ablation.reverse_order = rev;
            (name.to_string(), p)
        })
        .collect(),
    })
}

/// Full pipeline per sweep setting and seed, on the confounded training world.
pub fn sweep(cfg: &ExperimentConfig, kind: SweepKind) -> Result<Vec<SweepRow>> {
    let settings = sweep_settings(cfg, kind)?;
    let jobs: Vec<(usize, u64)> = (0..settings.len())
        .flat_map(|i| cfg.shortcut.seeds.iter().map(move |&s| (i, s)))
        .collect();
    jobs.par_iter()
        .map(|&(i, seed)| {
            let (name, pipeline) = &settings[i];
            let mut c = cfg.clone();
            c.seed = seed;
            c.world.noise.confounder = cfg.shortcut.rho_train;
            c.pipeline = pipeline.clone();
            c.reward_preset = None;
            let mut p = pipeline.clone();
            p.eval_each_stage = false;
            let corpus = build_corpus(&c)?;
            let vocab = Vocabulary::for_world(&c.world);
            let out = run_pipeline(&p, &c.world, &corpus, &vocab, &c.streams(), &c.hash())?;
            let r = out
                .final_report()
                .ok_or_else(|| Error::InvalidConfig("no report".into()))?;
            Ok(SweepRow {
                setting: name.clone(),
                seed,
                interventional_accuracy: r.interventional.accuracy,
                observational_accuracy: r.observational.accuracy,
                final_reward: out.final_grpo_reward(),
                final_causal_reward: out.final_causal_reward(),
                error_cases: out.error_cases,
            })
        })
        .collect()
}

pub fn sweep_csv(config_hash: &str, rows: &[SweepRow]) -> String {
    let opt = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:.4}"));
    let mut out = format!(
        "# config_hash={config_hash}\nsetting,seed,interventional_accuracy,observational_accuracy,final_reward,final_causal_reward,error_cases\n"
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.4},{:.4},{},{},{}\n",
            r.setting,
            r.seed,
            100.0 * r.interventional_accuracy,
            100.0 * r.observational_accuracy,
            opt(r.final_reward),
            opt(r.final_causal_reward),
            r.error_cases
        ));
    }
    out
}

pub fn cmd_sweep(cfg: &ExperimentConfig, kind: SweepKind) -> Result<PathBuf> {
    let rows = sweep(cfg, kind)?;
    let name = match kind {
        SweepKind::Tau => "tau",
        SweepKind::GroupSize => "group_size",
        SweepKind::Reward => "reward",
        SweepKind::Order => "order",
    };
    let path = cfg.output_root().join(format!("sweep_{name}.csv"));
    write_atomic(&path, sweep_csv(&cfg.hash(), &rows).as_bytes())?;
    Ok(path)
}
