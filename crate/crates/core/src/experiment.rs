//! Experiment configuration and the stages of the full pipeline, shared by
//! the command-line tool and the benchmark tests.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapt::{
    adapt_train, harden_seg, predict_counts, pretrain_source, soft_segmentations, AdaptInputs, CounterConfig,
    CounterNet, IterRecord, TrainConfig,
};
use crate::dataset::{CrowdScene, Dataset, SynthConfig};
use crate::density::{mae, rmse, DensityConfig};
use crate::pcs::{bag_accuracy, coverage, train_weak_learner, AnchorConfig, BagAccuracy, WeakLearner, WeakLearnerConfig, WeakLearnerLog};
use crate::rng;
use crate::{Error, Result};

/// Rungs of the ablation ladder, from no adaptation to the full method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    /// The pretrained counter, unadapted.
    SourceOnly,
    /// Feature alignment over whole images (all-ones gate).
    CrtNoPcs,
    /// Feature alignment gated by the crowd segmentation.
    CrtPcs,
    /// Gated feature alignment plus pseudo-label density alignment.
    Full,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [
        AblationMode::SourceOnly,
        AblationMode::CrtNoPcs,
        AblationMode::CrtPcs,
        AblationMode::Full,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::SourceOnly => "source-only",
            AblationMode::CrtNoPcs => "crt-no-pcs",
            AblationMode::CrtPcs => "crt-pcs",
            AblationMode::Full => "full",
        }
    }

    pub fn uses_pcs(self) -> bool {
        matches!(self, AblationMode::CrtPcs | AblationMode::Full)
    }

    /// The training config of this rung: the density term is only kept in
    /// the full mode.
    pub fn train_config(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        if self != AblationMode::Full {
            cfg.lambda_cda = 0.0;
        }
        cfg
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Source dataset directory; defaults to `<out>/data/source`.
    pub source: Option<PathBuf>,
    /// Target dataset directory; defaults to `<out>/data/target`.
    pub target: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            source: None,
            target: None,
            out: PathBuf::from("runs/default"),
        }
    }
}

impl Paths {
    pub fn source_dir(&self) -> PathBuf {
        self.source.clone().unwrap_or_else(|| self.out.join("data/source"))
    }

    pub fn target_dir(&self) -> PathBuf {
        self.target.clone().unwrap_or_else(|| self.out.join("data/target"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub ablation: AblationMode,
    pub paths: Paths,
    pub synth: SynthConfig,
    pub anchors: AnchorConfig,
    pub density: DensityConfig,
    pub pcs: WeakLearnerConfig,
    pub counter: CounterConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            ablation: AblationMode::Full,
            paths: Paths::default(),
            synth: SynthConfig::default(),
            anchors: AnchorConfig::default(),
            density: DensityConfig::default(),
            pcs: WeakLearnerConfig::default(),
            counter: CounterConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Pipeline stages, each with its own seed derived from the experiment seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Pcs = 0,
    Pretrain = 1,
    Adapt = 2,
}

impl ExperimentConfig {
    /// The seeded synthetic benchmark: defaults, with the adversarial
    /// weights and classifier rate tuned for the desk-scale counter.
    pub fn benchmark() -> Self {
        let mut config = ExperimentConfig::default();
        config.train.classifier_lr = 1e-4;
        config.train.lambda_grl = 0.03;
        config.train.lambda_cda = 0.01;
        config
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.anchors.validate()?;
        self.density.validate()?;
        self.counter.validate()?;
        self.train.validate()?;
        if self.synth.channels != self.counter.channels {
            return Err(Error::Config(format!(
                "synthetic scenes have {} channels but the counter expects {}",
                self.synth.channels, self.counter.channels
            )));
        }
        if self.pcs.hidden == 0 || self.pcs.batch_size < 2 || !(self.pcs.lr > 0.0) {
            return Err(Error::Config("weak learner needs hidden >= 1, batch_size >= 2 and lr > 0".into()));
        }
        Ok(())
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        rng::derive_seed(self.seed, stage as u64)
    }
}

/// Per-image outcome of an evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountRow {
    pub id: String,
    pub gt: f64,
    pub est: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mae: f64,
    pub rmse: f64,
    /// Percentage of test head points inside the hard segmentation, when a
    /// weak learner is available.
    pub coverage: Option<f64>,
    pub scenes: usize,
    #[serde(skip)]
    pub rows: Vec<CountRow>,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<CountRow>, coverage: Option<f64>) -> Result<Self> {
        let est: Vec<f64> = rows.iter().map(|r| r.est).collect();
        let gt: Vec<f64> = rows.iter().map(|r| r.gt).collect();
        Ok(EvalReport {
            mae: mae(&est, &gt)?,
            rmse: rmse(&est, &gt)?,
            coverage,
            scenes: rows.len(),
            rows,
        })
    }

    /// Per-image counts as CSV with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,gt,est\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.id, r.gt, r.est));
        }
        out
    }
}

/// Pooled head-point coverage of the hard segmentation over `scenes`.
pub fn dataset_coverage(f: &WeakLearner<f32>, scenes: &[CrowdScene]) -> Result<f64> {
    let soft = soft_segmentations(f, scenes)?;
    let (mut covered, mut total) = (0.0, 0usize);
    for (s, seg) in scenes.iter().zip(&soft) {
        let mask: Vec<bool> = harden_seg(seg).iter().map(|&v| v > 0.5).collect();
        covered += coverage(&mask, s.width, &s.points) / 100.0 * s.points.len() as f64;
        total += s.points.len();
    }
    Ok(if total == 0 { 100.0 } else { 100.0 * covered / total as f64 })
}

/// Counts of `counter` against the annotations of `scenes`.
pub fn evaluate(
    counter: &CounterNet<f32>,
    scenes: &[CrowdScene],
    density_scale: f64,
    pcs: Option<&WeakLearner<f32>>,
) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::Empty("evaluation split is empty".into()));
    }
    let est = predict_counts(counter, scenes, density_scale)?;
    let rows = scenes
        .iter()
        .zip(est)
        .map(|(s, est)| CountRow {
            id: s.id.clone(),
            gt: s.count() as f64,
            est,
        })
        .collect();
    let cov = pcs.map(|f| dataset_coverage(f, scenes)).transpose()?;
    EvalReport::from_rows(rows, cov)
}

/// Weak learner plus its quality on the held-out source scenes.
pub struct PcsStage {
    pub learner: WeakLearner<f32>,
    pub log: WeakLearnerLog,
    pub held_out: BagAccuracy,
}

pub fn run_pcs(config: &ExperimentConfig, source: &Dataset) -> Result<PcsStage> {
    let (learner, log) = train_weak_learner(&source.train, &config.anchors, &config.pcs, config.stage_seed(Stage::Pcs))?;
    let held_out = if source.test.is_empty() {
        bag_accuracy(&learner, &source.train, &config.anchors)?
    } else {
        bag_accuracy(&learner, &source.test, &config.anchors)?
    };
    Ok(PcsStage { learner, log, held_out })
}

pub fn run_pretrain(config: &ExperimentConfig, source: &Dataset) -> Result<(CounterNet<f32>, Vec<f64>)> {
    pretrain_source(
        &config.counter,
        &source.train,
        &config.density,
        &config.train,
        config.stage_seed(Stage::Pretrain),
    )
}

/// Result of one rung of the ablation ladder.
pub struct AdaptRun {
    pub mode: AblationMode,
    pub counter: CounterNet<f32>,
    pub log: Vec<IterRecord>,
    pub final_counts: Vec<f64>,
}

/// Adapts a copy of the pretrained counter in the given mode. The
/// source-only mode returns the pretrained counter untouched.
pub fn run_adapt(
    config: &ExperimentConfig,
    mode: AblationMode,
    pretrained: &CounterNet<f32>,
    pcs: Option<&WeakLearner<f32>>,
    source: &Dataset,
    target: &Dataset,
) -> Result<AdaptRun> {
    let mut counter = pretrained.clone();
    let initial = predict_counts(&counter, &target.train, config.train.density_scale)?;
    if mode == AblationMode::SourceOnly {
        return Ok(AdaptRun {
            mode,
            counter,
            log: Vec::new(),
            final_counts: initial,
        });
    }
    let segs = if mode.uses_pcs() {
        let f = pcs.ok_or_else(|| Error::MissingArtifact {
            what: format!("weak learner for ablation {mode}"),
            path: PathBuf::from("pcs/weak_learner.ckpt"),
        })?;
        Some((soft_segmentations(f, &source.train)?, soft_segmentations(f, &target.train)?))
    } else {
        None
    };
    let inputs = AdaptInputs {
        source: &source.train,
        target: &target.train,
        segmentations: segs.as_ref().map(|(s, t)| (s.as_slice(), t.as_slice())),
        initial_counts: &initial,
    };
    let train = mode.train_config(&config.train);
    let (log, final_counts) = adapt_train(&mut counter, &inputs, &config.density, &train, config.stage_seed(Stage::Adapt))?;
    Ok(AdaptRun {
        mode,
        counter,
        log,
        final_counts,
    })
}

/// Every stage in memory, returning the target-test report of each
/// requested mode.
pub fn run_ladder(
    config: &ExperimentConfig,
    source: &Dataset,
    target: &Dataset,
    modes: &[AblationMode],
) -> Result<Vec<(AdaptRun, EvalReport)>> {
    config.validate()?;
    let pcs = if modes.iter().any(|m| m.uses_pcs()) {
        Some(run_pcs(config, source)?.learner)
    } else {
        None
    };
    let (pretrained, _) = run_pretrain(config, source)?;
    modes
        .iter()
        .map(|&mode| {
            let run = run_adapt(config, mode, &pretrained, pcs.as_ref(), source, target)?;
            let report = evaluate(&run.counter, &target.test, config.train.density_scale, pcs.as_ref())?;
            Ok((run, report))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_round_trip_through_strings() {
        for m in AblationMode::ALL {
            assert_eq!(m.as_str().parse::<AblationMode>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
        }
        assert!("everything".parse::<AblationMode>().is_err());
    }

    #[test]
    fn only_full_keeps_density_alignment() {
        let base = TrainConfig::default();
        assert_eq!(AblationMode::Full.train_config(&base).lambda_cda, 0.3);
        assert_eq!(AblationMode::CrtPcs.train_config(&base).lambda_cda, 0.0);
        assert_eq!(AblationMode::CrtNoPcs.train_config(&base).lambda_crt, 1.0);
    }

    #[test]
    fn default_config_round_trips_and_validates() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
        let typo = json.replace("\"seed\": 0,", "\"sead\": 0,");
        assert!(serde_json::from_str::<ExperimentConfig>(&typo).is_err());
    }

    #[test]
    fn report_rows_and_inequality() {
        let rows = vec![
            CountRow { id: "a".into(), gt: 10.0, est: 12.0 },
            CountRow { id: "b".into(), gt: 20.0, est: 16.0 },
        ];
        let r = EvalReport::from_rows(rows, None).unwrap();
        assert!((r.mae - 3.0).abs() < 1e-12);
        assert!((r.rmse - 10f64.sqrt()).abs() < 1e-12);
        assert_eq!(r.to_csv().lines().count(), 3);
        assert!(EvalReport::from_rows(Vec::new(), None).is_err());
    }
}
