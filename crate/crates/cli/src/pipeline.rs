//! Pipeline stages. Each stage reads the previous stages' files from the
//! output directory and writes its own, so stages can be rerun
//! individually.
//!
//! ```text
//! graphs/     manifest.json, one JSON file per graph
//! models/     original.ggtm, pruned_NNN.ggtm, manifest.json
//! plans/      pruned_NNN.plan.json
//! corpus/     corpus.bin, summary.json
//! detect/     labels.csv, calibration.json
//! report.json, report.txt, config.resolved.toml
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use ggt_core::detector::{calibrate_from_scores, DetectorCalibration, LabelMatrix, LabelRow};
use ggt_core::forge::{self, Corpus, Dataset, Role, SampleKind};
use ggt_core::graph::RelationalGraph;
use ggt_core::mapping::{MaskPlan, PlanFile};
use ggt_core::metrics::{self, EnsembleMeta, EvaluationReport};
use ggt_core::net::{self, codec, MaskedModel};
use ggt_core::regulate::{self, graph_file_name};
use ggt_core::rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{streams, ExperimentConfig};

/// A stage's input is missing; the named stage produces it.
#[derive(Debug, Error)]
#[error("missing {}; run `ggt {stage}` first", path.display())]
pub struct MissingArtifact {
    pub stage: &'static str,
    pub path: PathBuf,
}

/// Graph generation could not supply the ensemble bin.
#[derive(Debug, Error)]
#[error("{0}")]
pub struct Infeasible(pub String);

pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
    pub fn graphs_dir(&self) -> PathBuf {
        self.root.join("graphs")
    }
    pub fn graph_manifest(&self) -> PathBuf {
        self.graphs_dir().join("manifest.json")
    }
    pub fn models_dir(&self) -> PathBuf {
        self.root.join("models")
    }
    pub fn original_model(&self) -> PathBuf {
        self.models_dir().join("original.ggtm")
    }
    pub fn model_manifest(&self) -> PathBuf {
        self.models_dir().join("manifest.json")
    }
    pub fn plans_dir(&self) -> PathBuf {
        self.root.join("plans")
    }
    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus").join("corpus.bin")
    }
    pub fn corpus_summary(&self) -> PathBuf {
        self.root.join("corpus").join("summary.json")
    }
    pub fn labels(&self) -> PathBuf {
        self.root.join("detect").join("labels.csv")
    }
    pub fn calibration(&self) -> PathBuf {
        self.root.join("detect").join("calibration.json")
    }
    pub fn report_json(&self) -> PathBuf {
        self.root.join("report.json")
    }
    pub fn report_text(&self) -> PathBuf {
        self.root.join("report.txt")
    }
    pub fn resolved_config(&self) -> PathBuf {
        self.root.join("config.resolved.toml")
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(path, text)
}

fn read(stage: &'static str, path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(MissingArtifact {
            stage,
            path: path.to_owned(),
        }
        .into());
    }
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(stage: &'static str, path: &Path) -> Result<T> {
    serde_json::from_slice(&read(stage, path)?).with_context(|| format!("parsing {}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphEntry {
    pub file: String,
    pub sha256: String,
    pub aspl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinEntry {
    pub label: String,
    pub lower: f64,
    pub upper: f64,
    pub requested: usize,
    pub restarts: usize,
    pub infeasible: bool,
    pub graphs: Vec<GraphEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphManifest {
    pub nodes: usize,
    pub degree: usize,
    pub seed: u64,
    pub bins: Vec<BinEntry>,
    /// Index of the bin the ensemble draws from.
    pub ensemble_bin: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OriginalEntry {
    pub file: String,
    pub train_accuracy: f64,
    pub validation_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunedEntry {
    pub model: String,
    pub plan: String,
    pub graph: String,
    pub graph_sha256: String,
    pub validation_accuracy: f64,
    pub sparsity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedEntry {
    pub graph: String,
    pub validation_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub original: OriginalEntry,
    pub aspl_bin: String,
    pub accuracy_bar: f64,
    pub accepted: Vec<PrunedEntry>,
    pub rejected: Vec<RejectedEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub calibration: BTreeMap<String, usize>,
    pub evaluation: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub calibration: DetectorCalibration,
    pub mode: String,
    /// Model files in the order the detector queries them; also the column
    /// order of `labels.csv`.
    pub query_order: Vec<String>,
    pub normal_count: usize,
    pub adversarial_count: usize,
}

pub fn write_resolved_config(config: &ExperimentConfig) -> Result<()> {
    write(&Layout::new(&config.out).resolved_config(), config.to_toml())
}

/// Generates and regulates graphs for every configured bin.
pub fn cmd_graphs(config: &ExperimentConfig) -> Result<GraphManifest> {
    let layout = Layout::new(&config.out);
    let g = &config.graphs;
    let seed = config.seed_for(streams::GRAPHS);
    let targets = config.targets()?;
    let bins = regulate::batch_generate(
        g.nodes,
        g.degree,
        &targets,
        g.per_bin,
        seed,
        &config.batch_options(),
    )?;
    let dir = layout.graphs_dir();
    if dir.exists() {
        fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    regulate::write_batch(&dir, g.nodes, g.degree, &bins)?;

    let mut entries = Vec::new();
    for bin in &bins {
        let graphs = bin
            .graphs
            .iter()
            .enumerate()
            .map(|(i, graph)| {
                Ok(GraphEntry {
                    file: graph_file_name(g.nodes, g.degree, &bin.target, i),
                    sha256: graph.content_hash()?,
                    aspl: graph.metrics()?.aspl,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        log::info!(
            "bin {}: {} of {} graphs ({} restarts)",
            bin.target,
            graphs.len(),
            g.per_bin,
            bin.restarts
        );
        entries.push(BinEntry {
            label: bin.target.label(),
            lower: bin.target.lower,
            upper: bin.target.upper,
            requested: g.per_bin,
            restarts: bin.restarts,
            infeasible: bin.infeasible,
            graphs,
        });
    }

    let need = config.training.ensemble_size;
    let ensemble_bin = match config.training.ensemble_bin {
        Some(b) if entries[b].graphs.len() >= need => b,
        Some(b) => {
            return Err(Infeasible(format!(
                "ensemble bin {} produced {} graphs; {need} needed",
                entries[b].label,
                entries[b].graphs.len()
            ))
            .into())
        }
        None => entries
            .iter()
            .position(|b| b.graphs.len() >= need)
            .ok_or_else(|| Infeasible(format!("no bin produced the {need} graphs the ensemble needs")))?,
    };
    let manifest = GraphManifest {
        nodes: g.nodes,
        degree: g.degree,
        seed,
        bins: entries,
        ensemble_bin,
    };
    write_json(&layout.graph_manifest(), &manifest)?;
    Ok(manifest)
}

fn load_graph(layout: &Layout, entry: &GraphEntry) -> Result<RelationalGraph> {
    let path = layout.graphs_dir().join(&entry.file);
    let text = String::from_utf8(read("graphs", &path)?)?;
    let graph = RelationalGraph::from_json(&text).with_context(|| format!("loading {}", path.display()))?;
    if graph.content_hash()? != entry.sha256 {
        bail!("{} does not match its manifest hash", path.display());
    }
    Ok(graph)
}

pub fn dataset(config: &ExperimentConfig) -> Result<Dataset> {
    Ok(forge::make_dataset(&config.dataset_config())?)
}

/// Trains the original model and the pruned ensemble, drawing graphs from
/// the ensemble bin in order until enough models pass the accuracy bar.
pub fn cmd_train(config: &ExperimentConfig) -> Result<ModelManifest> {
    let layout = Layout::new(&config.out);
    let graphs: GraphManifest = read_json("graphs", &layout.graph_manifest())?;
    let bin = &graphs.bins[graphs.ensemble_bin];
    let chosen: Vec<(String, RelationalGraph)> = bin
        .graphs
        .iter()
        .map(|e| Ok((e.file.clone(), load_graph(&layout, e)?)))
        .collect::<Result<_>>()?;

    let data = dataset(config)?;
    let init = MaskedModel::new(config.model_spec(), config.seed_for(streams::INIT))?;
    let hyper = config.hyper(config.seed_for(streams::TRAIN), config.training.epochs);
    let original = net::train(init, &data.train, &data.validation, &hyper)?;
    let test_accuracy = net::accuracy(&original, &data.test)?;
    log::info!(
        "original: train {:.4}, validation {:.4}, test {:.4}",
        original.meta.train_accuracy,
        original.meta.validation_accuracy,
        test_accuracy
    );

    let pruned_hyper = config.hyper(config.seed_for(streams::ENSEMBLE), config.training.pruned_epochs);
    let ensemble = net::build_pruned_ensemble(
        &original,
        &chosen,
        &data.train,
        &data.validation,
        &pruned_hyper,
        &net::EnsembleOptions {
            accept_ratio: config.training.accept_ratio,
            min_size: config.training.min_ensemble,
            target_size: Some(config.training.ensemble_size),
            warm_start: config.training.warm_start,
        },
    )?;

    for dir in [layout.models_dir(), layout.plans_dir()] {
        if dir.exists() {
            fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
        }
    }
    write(&layout.original_model(), codec::encode(&original)?)?;
    let mut accepted = Vec::new();
    for (i, (model, graph_name)) in ensemble.models.iter().zip(&ensemble.graph_names).enumerate() {
        let plan = model.plan().expect("pruned models carry a plan");
        let model_file = format!("pruned_{i:03}.ggtm");
        let plan_file = format!("pruned_{i:03}.plan.json");
        write(&layout.models_dir().join(&model_file), codec::encode(model)?)?;
        write_json(&layout.plans_dir().join(&plan_file), &plan.to_file())?;
        accepted.push(PrunedEntry {
            model: model_file,
            plan: plan_file,
            graph: graph_name.clone(),
            graph_sha256: plan.graph_hash.clone(),
            validation_accuracy: model.meta.validation_accuracy,
            sparsity: plan.sparsity(),
        });
    }
    let manifest = ModelManifest {
        original: OriginalEntry {
            file: "original.ggtm".into(),
            train_accuracy: original.meta.train_accuracy,
            validation_accuracy: original.meta.validation_accuracy,
            test_accuracy,
        },
        aspl_bin: bin.label.clone(),
        accuracy_bar: ensemble.accuracy_bar,
        accepted,
        rejected: ensemble
            .rejected
            .iter()
            .map(|r| RejectedEntry {
                graph: r.graph_name.clone(),
                validation_accuracy: r.validation_accuracy,
            })
            .collect(),
    };
    write_json(&layout.model_manifest(), &manifest)?;
    Ok(manifest)
}

fn load_original(layout: &Layout) -> Result<MaskedModel> {
    let path = layout.original_model();
    codec::decode(&read("train", &path)?, None).with_context(|| format!("decoding {}", path.display()))
}

fn load_pruned(layout: &Layout, entry: &PrunedEntry) -> Result<MaskedModel> {
    let plan_path = layout.plans_dir().join(&entry.plan);
    let plan_file: PlanFile = read_json("train", &plan_path)?;
    let graph_path = layout.graphs_dir().join(&plan_file.graph.name);
    let text = String::from_utf8(read("graphs", &graph_path)?)?;
    let graph = RelationalGraph::from_json(&text)?;
    let plan = MaskPlan::from_file(&plan_file, graph).with_context(|| format!("loading {}", plan_path.display()))?;
    let model_path = layout.models_dir().join(&entry.model);
    codec::decode(&read("train", &model_path)?, Some(Arc::new(plan)))
        .with_context(|| format!("decoding {}", model_path.display()))
}

/// Builds the sample corpus: normals and FGSM samples from the validation
/// split for calibration; normals, WL and FGSM samples from the test split
/// for evaluation.
pub fn cmd_attack(config: &ExperimentConfig) -> Result<CorpusSummary> {
    let layout = Layout::new(&config.out);
    let original = load_original(&layout)?;
    let data = dataset(config)?;
    let eps = config.attack.epsilon;
    let mut calibration = forge::normal_samples(&original, &data.validation)?;
    calibration.extend(forge::fgsm_batch(&original, &data.validation, eps)?);
    let mut evaluation = forge::normal_samples(&original, &data.test)?;
    evaluation.extend(forge::harvest_wl(&original, &data.test)?);
    evaluation.extend(forge::fgsm_batch(&original, &data.test, eps)?);
    let corpus = Corpus {
        calibration,
        evaluation,
    };
    write(&layout.corpus(), corpus.encode()?)?;
    let summary = summarize(&corpus);
    write_json(&layout.corpus_summary(), &summary)?;
    Ok(summary)
}

fn summarize(corpus: &Corpus) -> CorpusSummary {
    let count = |role: Role| {
        let mut m = BTreeMap::new();
        for (r, s) in corpus.iter() {
            if r == role {
                *m.entry(s.kind.to_string()).or_insert(0) += 1;
            }
        }
        m
    };
    CorpusSummary {
        calibration: count(Role::Calibration),
        evaluation: count(Role::Evaluation),
    }
}

fn load_corpus(layout: &Layout) -> Result<Corpus> {
    Ok(Corpus::decode(&read("attack", &layout.corpus())?)?)
}

/// Labels every corpus sample with every pruned model, in a query order
/// shuffled once per experiment seed, and picks the LCR threshold from the
/// calibration samples.
pub fn cmd_calibrate(config: &ExperimentConfig) -> Result<CalibrationRecord> {
    let layout = Layout::new(&config.out);
    let manifest: ModelManifest = read_json("train", &layout.model_manifest())?;
    let corpus = load_corpus(&layout)?;
    let original = load_original(&layout)?;
    let mut order: Vec<usize> = (0..manifest.accepted.len()).collect();
    order.shuffle(&mut rng::seeded(config.seed_for(streams::ORDER)));
    let ensemble = order
        .iter()
        .map(|&i| load_pruned(&layout, &manifest.accepted[i]))
        .collect::<Result<Vec<_>>>()?;

    let mut positions = BTreeMap::new();
    let samples: Vec<_> = corpus
        .iter()
        .map(|(role, s)| {
            let p = positions.entry(role as u8).or_insert(0usize);
            *p += 1;
            (role, *p - 1, s)
        })
        .collect();
    let matrix = LabelMatrix::compute(&original, &ensemble, samples)?;
    let mut csv = Vec::new();
    matrix.write_csv(&mut csv)?;
    write(&layout.labels(), csv)?;

    let lcrs = |kind_is_adv: bool| -> Result<Vec<f64>> {
        matrix
            .rows_for(Role::Calibration)
            .filter(|r| r.kind.is_adversarial() == kind_is_adv)
            .map(|r| Ok(r.lcr()?))
            .collect()
    };
    let (normal, adversarial) = (lcrs(false)?, lcrs(true)?);
    let calibration = calibrate_from_scores(
        &normal,
        &adversarial,
        config.calibration_mode(),
        &config.sprt_params(),
    )?;
    let record = CalibrationRecord {
        calibration,
        mode: format!("{:?}", config.calibration_mode()).to_lowercase(),
        query_order: order.iter().map(|&i| manifest.accepted[i].model.clone()).collect(),
        normal_count: normal.len(),
        adversarial_count: adversarial.len(),
    };
    write_json(&layout.calibration(), &record)?;
    Ok(record)
}

/// Runs the sequential test over the cached labels of the evaluation
/// samples and writes the report.
pub fn cmd_detect(config: &ExperimentConfig) -> Result<EvaluationReport> {
    let layout = Layout::new(&config.out);
    let graphs: GraphManifest = read_json("graphs", &layout.graph_manifest())?;
    let models: ModelManifest = read_json("train", &layout.model_manifest())?;
    let record: CalibrationRecord = read_json("calibrate", &layout.calibration())?;
    let corpus = load_corpus(&layout)?;
    let matrix = LabelMatrix::read_csv(read("calibrate", &layout.labels())?.as_slice())?;
    if matrix.model_count != record.query_order.len() {
        bail!("labels.csv and calibration.json disagree on the ensemble; rerun `ggt calibrate`");
    }
    let cal = record.calibration;

    let eval: Vec<&LabelRow> = matrix.rows_for(Role::Evaluation).collect();
    let mut rows = metrics::report_rows(eval.iter().copied(), &cal)?;
    let normals: Vec<&LabelRow> = eval.iter().copied().filter(|r| r.kind == SampleKind::Normal).collect();
    let tau = config.attack.high_confidence;
    let confident: Vec<&LabelRow> = eval
        .iter()
        .copied()
        .filter(|r| {
            r.kind == SampleKind::Fgsm
                && corpus
                    .evaluation
                    .get(r.position)
                    .is_some_and(|s| s.confidence > tau)
        })
        .collect();
    if !confident.is_empty() {
        let reference = if normals.is_empty() {
            None
        } else {
            Some(metrics::row_lcrs(&normals)?)
        };
        rows.push(metrics::report_row(
            format!("FGSM conf>{tau}"),
            &confident,
            reference.as_deref(),
            &cal,
        )?);
    }

    let by_file: BTreeMap<&str, &PrunedEntry> =
        models.accepted.iter().map(|e| (e.model.as_str(), e)).collect();
    let ensemble_graphs = record
        .query_order
        .iter()
        .map(|m| {
            let e = by_file
                .get(m.as_str())
                .with_context(|| format!("{m} is not in the model manifest"))?;
            Ok((e.graph.clone(), e.graph_sha256.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let seeds = BTreeMap::from([
        ("master".to_string(), config.seed),
        ("dataset".to_string(), config.seed_for(streams::DATASET)),
        ("init".to_string(), config.seed_for(streams::INIT)),
        ("train".to_string(), config.seed_for(streams::TRAIN)),
        ("graphs".to_string(), config.seed_for(streams::GRAPHS)),
        ("ensemble".to_string(), config.seed_for(streams::ENSEMBLE)),
        ("order".to_string(), config.seed_for(streams::ORDER)),
    ]);
    let report = EvaluationReport::new(
        EnsembleMeta {
            nodes: graphs.nodes,
            degree: graphs.degree,
            aspl_bin: models.aspl_bin.clone(),
            ensemble_size: ensemble_graphs.len(),
            graphs: ensemble_graphs,
        },
        seeds,
        cal,
        rows,
    )?;
    write(&layout.report_json(), report.to_json()?)?;
    write(&layout.report_text(), report.render_text()?)?;
    Ok(report)
}

pub fn cmd_report(config: &ExperimentConfig) -> Result<String> {
    let layout = Layout::new(&config.out);
    let text = String::from_utf8(read("detect", &layout.report_json())?)?;
    Ok(EvaluationReport::from_json(&text)?.render_text()?)
}

/// Every stage in order.
pub fn cmd_reproduce(config: &ExperimentConfig) -> Result<EvaluationReport> {
    write_resolved_config(config)?;
    cmd_graphs(config)?;
    cmd_train(config)?;
    cmd_attack(config)?;
    cmd_calibrate(config)?;
    cmd_detect(config)
}
