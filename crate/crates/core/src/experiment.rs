//! Four-variant comparison on one corpus across several training seeds.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clickstream::{Dataset, WeeklyInstance};
use crate::dropout::{train_dropout, DropoutPredictor, DropoutConfig, DropoutTrainReport, PretrainedTables, Variant};
use crate::error::{Error, Result};
use crate::metrics::{auc, paired_bootstrap, ComparisonReport, ScoredInstance};
use crate::ngram::{train_ngram_embeddings, NGramEmbeddingModel, NGramConfig, PretrainCorpus};
use crate::video::{build_embedding_set, VideoEmbeddingSet, train_video_classifier, ExtractConfig, VideoClassifierConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Training runs; run `r` uses seed `seed + r`.
    pub runs: usize,
    pub seed: u64,
    /// Fractions of users for training and validation; the rest is test.
    pub train_fraction: f64,
    pub validation_fraction: f64,
    pub ngram: NGramConfig,
    pub video: VideoClassifierConfig,
    pub extract: ExtractConfig,
    pub dropout: DropoutConfig,
    pub bootstrap_replicates: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            runs: 5,
            seed: 0,
            train_fraction: 0.8,
            validation_fraction: 0.1,
            ngram: NGramConfig::default(),
            video: VideoClassifierConfig::default(),
            extract: ExtractConfig::default(),
            dropout: DropoutConfig::default(),
            bootstrap_replicates: 1000,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let f = (self.train_fraction, self.validation_fraction);
        if self.runs == 0 {
            return Err(Error::Input("runs: must be at least 1".into()));
        }
        if !(f.0 > 0.0 && f.1 >= 0.0 && f.0 + f.1 < 1.0) {
            return Err(Error::Input("train_fraction/validation_fraction: must leave a non-empty test split".into()));
        }
        if self.bootstrap_replicates < 100 {
            return Err(Error::Input("bootstrap_replicates: must be at least 100".into()));
        }
        Ok(())
    }
}

/// User-level partition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

/// Shuffles the sorted user list with `seed` and cuts it by the fractions.
pub fn split_users(users: &[String], train: f64, validation: f64, seed: u64) -> Split {
    let mut u = users.to_vec();
    u.sort();
    u.dedup();
    u.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = u.len();
    let n_train = (n as f64 * train).round() as usize;
    let n_val = ((n as f64 * validation).round() as usize).min(n - n_train.min(n));
    let test = u.split_off((n_train + n_val).min(n));
    let validation = u.split_off(n_train.min(u.len()));
    let mut s = Split { train: u, validation, test };
    s.train.sort();
    s.validation.sort();
    s.test.sort();
    s
}

fn subset(instances: &[WeeklyInstance], users: &[String]) -> Vec<WeeklyInstance> {
    let keep: BTreeSet<&str> = users.iter().map(String::as_str).collect();
    instances.iter().filter(|i| keep.contains(i.user_id.as_str())).cloned().collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PretrainSummary {
    pub ngram_initial_loss: f64,
    pub ngram_final_loss: f64,
    pub video_initial_loss: f64,
    pub video_final_loss: f64,
    pub video_train_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunResult {
    pub seed: u64,
    pub pretraining: PretrainSummary,
    /// Test AUC per variant.
    pub test_auc: BTreeMap<Variant, f64>,
    pub training: BTreeMap<Variant, DropoutTrainReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariantSummary {
    pub description: String,
    pub mean_auc: f64,
    pub std_auc: f64,
    pub aucs: Vec<f64>,
    /// AUC of the run-averaged test scores.
    pub ensemble_auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairComparison {
    pub a: Variant,
    pub b: Variant,
    #[serde(flatten)]
    pub report: ComparisonReport,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub users: usize,
    pub split_sizes: [usize; 3],
    pub test_instances: usize,
    pub test_positives: usize,
    pub variants: BTreeMap<Variant, VariantSummary>,
    /// Bootstrap over run-averaged test scores for every ordered pair `a < b`.
    pub comparisons: Vec<PairComparison>,
    pub runs: Vec<RunResult>,
    /// Mean AUC ordering c > b > a.
    pub ordering_holds: bool,
}

/// Everything one run produces besides its summary numbers.
pub struct RunArtifacts {
    pub result: RunResult,
    pub test_scores: BTreeMap<Variant, Vec<ScoredInstance>>,
    pub ngram_model: NGramEmbeddingModel,
    pub video_embeddings: VideoEmbeddingSet,
    pub predictors: BTreeMap<Variant, DropoutPredictor>,
}

/// Pretrains both embedding tables on `train`, then trains and scores every variant.
pub fn run_once(
    dataset: &Dataset,
    train: &[WeeklyInstance],
    validation: &[WeeklyInstance],
    test: &[WeeklyInstance],
    train_users: &[String],
    config: &ExperimentConfig,
    seed: u64,
) -> Result<RunArtifacts> {
    let n = dataset.vocab.n;
    let num_videos = dataset.vocab.num_videos();

    let corpus = PretrainCorpus::from_instances(n, train)?;
    let ngram_cfg = NGramConfig { seed, ..config.ngram.clone() };
    let (ngram_model, ngram_report) = train_ngram_embeddings(&corpus, &ngram_cfg)?;
    let ngram_table = ngram_model.export_embeddings();

    let keep: BTreeSet<&str> = train_users.iter().map(String::as_str).collect();
    let seqs: Vec<_> =
        dataset.video_sequences.iter().filter(|s| keep.contains(s.user_id.as_str())).cloned().collect();
    let video_cfg = VideoClassifierConfig { seed, ..config.video.clone() };
    let (classifier, video_report) = train_video_classifier(&seqs, num_videos, &ngram_table, &video_cfg)?;
    let video_set = build_embedding_set(&classifier, &config.extract, &dataset.vocab.video_ids)?;

    let tables = PretrainedTables { ngram: Some(&ngram_table), video: Some(&video_set.table) };
    let dropout_cfg = DropoutConfig { seed, d_v: video_set.dim(), ..config.dropout.clone() };
    let mut test_auc = BTreeMap::new();
    let mut training = BTreeMap::new();
    let mut test_scores = BTreeMap::new();
    let mut predictors = BTreeMap::new();
    for variant in Variant::ALL {
        let (model, report) =
            train_dropout(variant, n, num_videos, train, tables, &dropout_cfg, Some(validation))?;
        let scored = model.score(test)?;
        test_auc.insert(variant, auc(&scored)?);
        training.insert(variant, report);
        test_scores.insert(variant, scored);
        predictors.insert(variant, model);
    }
    let last = |v: &[f64], init: f64| v.last().copied().unwrap_or(init);
    Ok(RunArtifacts {
        result: RunResult {
            seed,
            pretraining: PretrainSummary {
                ngram_initial_loss: ngram_report.initial_loss,
                ngram_final_loss: last(&ngram_report.epoch_losses, ngram_report.initial_loss),
                video_initial_loss: video_report.initial_loss,
                video_final_loss: last(&video_report.epoch_losses, video_report.initial_loss),
                video_train_accuracy: video_report.train_accuracy,
            },
            test_auc,
            training,
        },
        test_scores,
        ngram_model,
        video_embeddings: video_set,
        predictors,
    })
}

fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = if x.len() > 1 { x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

fn average_scores(runs: &[&Vec<ScoredInstance>]) -> Vec<ScoredInstance> {
    let k = runs.len() as f64;
    let mut out = runs[0].clone();
    for (i, s) in out.iter_mut().enumerate() {
        s.score = runs.iter().map(|r| r[i].score).sum::<f64>() / k;
    }
    out
}

/// Runs the full comparison. `progress` receives one line per finished stage.
pub fn run_experiment(
    dataset: &Dataset,
    config: &ExperimentConfig,
    progress: impl FnMut(&str),
) -> Result<ExperimentReport> {
    Ok(run_experiment_full(dataset, config, progress)?.report)
}

/// Report plus the models of the first run and the run-averaged test scores.
pub struct ExperimentOutput {
    pub report: ExperimentReport,
    pub first_run: RunArtifacts,
    pub averaged_scores: BTreeMap<Variant, Vec<ScoredInstance>>,
}

pub fn run_experiment_full(
    dataset: &Dataset,
    config: &ExperimentConfig,
    mut progress: impl FnMut(&str),
) -> Result<ExperimentOutput> {
    config.validate()?;
    let users = dataset.users();
    let split = split_users(&users, config.train_fraction, config.validation_fraction, config.seed);
    let train = subset(&dataset.instances, &split.train);
    let validation = subset(&dataset.instances, &split.validation);
    let test = subset(&dataset.instances, &split.test);
    let positives = test.iter().filter(|i| i.label).count();
    if positives == 0 || positives == test.len() {
        return Err(Error::UndefinedMetric("test split holds a single class".into()));
    }

    let mut runs = Vec::with_capacity(config.runs);
    let mut first_run = None;
    let mut scores: BTreeMap<Variant, Vec<Vec<ScoredInstance>>> = BTreeMap::new();
    for r in 0..config.runs {
        let seed = config.seed.wrapping_add(r as u64);
        let art = run_once(dataset, &train, &validation, &test, &split.train, config, seed)?;
        let line: Vec<String> = art.result.test_auc.iter().map(|(v, a)| format!("{v}={a:.4}")).collect();
        progress(&format!("run {} (seed {seed}): {}", r + 1, line.join(" ")));
        for (v, s) in &art.test_scores {
            scores.entry(*v).or_default().push(s.clone());
        }
        runs.push(art.result.clone());
        first_run.get_or_insert(art);
    }

    let averaged: BTreeMap<Variant, Vec<ScoredInstance>> =
        scores.iter().map(|(v, s)| (*v, average_scores(&s.iter().collect::<Vec<_>>()))).collect();
    let mut variants = BTreeMap::new();
    for v in Variant::ALL {
        let aucs: Vec<f64> = runs.iter().map(|r| r.test_auc[&v]).collect();
        let (mean_auc, std_auc) = mean_std(&aucs);
        variants.insert(
            v,
            VariantSummary {
                description: v.description().to_string(),
                mean_auc,
                std_auc,
                aucs,
                ensemble_auc: auc(&averaged[&v])?,
            },
        );
    }
    let mut comparisons = Vec::new();
    for (i, a) in Variant::ALL.into_iter().enumerate() {
        for b in Variant::ALL.into_iter().skip(i + 1) {
            let report = paired_bootstrap(&averaged[&a], &averaged[&b], config.bootstrap_replicates, config.seed)?;
            comparisons.push(PairComparison { a, b, report });
        }
    }
    let m = |v: Variant| variants[&v].mean_auc;
    let ordering_holds = m(Variant::ClickPretrainedVideo) > m(Variant::ClickPretrained)
        && m(Variant::ClickPretrained) > m(Variant::Click);
    let report = ExperimentReport {
        config: config.clone(),
        users: users.len(),
        split_sizes: [split.train.len(), split.validation.len(), split.test.len()],
        test_instances: test.len(),
        test_positives: positives,
        variants,
        comparisons,
        runs,
        ordering_holds,
    };
    let first_run = first_run.ok_or_else(|| Error::State("experiment produced no runs".into()))?;
    Ok(ExperimentOutput { report, first_run, averaged_scores: averaged })
}

impl ExperimentReport {
    pub fn comparison(&self, a: Variant, b: Variant) -> Option<&PairComparison> {
        self.comparisons.iter().find(|c| c.a == a && c.b == b)
    }
}
