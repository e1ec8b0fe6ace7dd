//! Stage runners and the file artifacts they exchange.
//!
//! Stages communicate through files in the output directory:
//!
//! | stage | reads | writes |
//! |-------|-------|--------|
//! | morph | config | `matrix.bin`, `morph_stats.{csv,json}` |
//! | build | `matrix.bin` | `plan_{hetero,homo}.json`, `topology_{hetero,homo}.json`, `scores.json` |
//! | train | `plan_*.json`, `topology_*.json` | `metrics_*.csv` |
//! | experiment | config | all of the above plus `comparison*.csv`, `report.json` |
//! | accounting | config | `accounting.csv`, `accounting.json` |
//!
//! Local datasets and prologue models are regenerated from the config in every
//! stage, so a staged run and a single experiment run produce the same bytes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use topoprep::bftm::{
    accounting_run, default_degree, run_morphing, stats_csv, MorphConfig, MorphHistory,
    SimilarityMatrix,
};
use topoprep::graph::{split_partitions, Topology};
use topoprep::learn::{
    metrics_csv, partition_data, prologue, train_phase3, BlobCenters, Dataset, Metrics, ModelParams,
};
use topoprep::proxy::{compute_proxy, proxy_bytes, Proxy};
use topoprep::selection::{
    ccc_heterogeneous, homogeneous_baseline, kmeans_rows, objective_score, CliquePlan,
    ClusterAssignment,
};

use crate::config::{ExperimentConfig, Mode};
use crate::error::{CliError, CliResult};
use crate::seeds::derive_seeds;

pub const MATRIX_FILE: &str = "matrix.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Everything derived from the config before morphing.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub locals: Vec<Dataset>,
    pub test: Dataset,
    pub initial: Vec<ModelParams>,
    pub proxies: Vec<Proxy>,
}

pub fn prepare(cfg: &ExperimentConfig) -> CliResult<Prepared> {
    let seed = cfg.master_seed();
    let d = &cfg.data;
    let n = cfg.n.expect("validated");
    let spec = cfg.partition.expect("validated");
    let centers = BlobCenters::sample(
        d.classes,
        d.dims,
        d.separation,
        derive_seeds(seed, "centers"),
    )?;
    let pool = centers.draw(d.per_class, 0.0, derive_seeds(seed, "train-data"))?;
    let test = centers.draw(d.test_per_class, 0.0, derive_seeds(seed, "test-data"))?;
    let global = centers
        .draw(
            d.global_per_class,
            d.center_shift,
            derive_seeds(seed, "global-data"),
        )?
        .to_global()?;
    let locals = partition_data(&pool, &spec, n, derive_seeds(seed, "partition"))?;
    let initial = prologue(
        &locals,
        &cfg.train.to_config(derive_seeds(seed, "prologue")),
    )?;
    let proxies = initial
        .iter()
        .map(|m| compute_proxy(m, &global))
        .collect::<topoprep::Result<Vec<_>>>()?;
    log::info!("prepared {n} nodes, {} global samples", global.len());
    Ok(Prepared {
        locals,
        test,
        initial,
        proxies,
    })
}

fn morph_config(cfg: &ExperimentConfig, proxy_len: u64) -> MorphConfig {
    MorphConfig {
        degree: cfg.degree,
        max_rounds: cfg.morph.max_rounds,
        proxy_bytes: cfg.proxy_bytes.unwrap_or(proxy_len),
        seed: derive_seeds(cfg.master_seed(), "morph"),
        ..MorphConfig::new(0)
    }
}

pub fn morph_phase(
    cfg: &ExperimentConfig,
    proxies: &[Proxy],
) -> CliResult<(SimilarityMatrix, MorphHistory)> {
    let proxy_len = proxies.first().map_or(0, Proxy::byte_len) as u64;
    let (matrix, history) = run_morphing(proxies, &morph_config(cfg, proxy_len))?;
    if !matrix.is_complete() {
        if !cfg.morph.early_stop {
            return Err(CliError::Validation(vec![format!(
                "morph.max_rounds: matrix still {}/{} filled after {} rounds and early_stop is off",
                matrix.fill(),
                matrix.total_pairs(),
                history.rounds()
            )]));
        }
        log::warn!(
            "morphing stopped at {} rounds with a partial matrix",
            history.rounds()
        );
    }
    log::info!("morphing finished in {} rounds", history.rounds());
    Ok((matrix, history))
}

/// Phase II output.
#[derive(Debug, Clone)]
pub struct Built {
    pub assignment: ClusterAssignment,
    pub hetero: (CliquePlan, Topology),
    pub homo: (CliquePlan, Topology),
    pub scores: Scores,
}

/// Objective scores of both plans; absent when the matrix is partial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub hetero: Option<f64>,
    pub homo: Option<f64>,
}

fn score(plan: &CliquePlan, t: &Topology, matrix: &SimilarityMatrix) -> CliResult<Option<f64>> {
    match objective_score(plan, t, matrix) {
        Ok(s) => Ok(Some(s)),
        Err(topoprep::Error::IncompleteMatrix(..)) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

pub fn build_phase(cfg: &ExperimentConfig, matrix: &SimilarityMatrix) -> CliResult<Built> {
    let seed = cfg.master_seed();
    let n = matrix.n();
    let k = cfg.selection.k.unwrap_or_else(|| default_degree(n)).min(n);
    let samples = cfg
        .selection
        .samples_per_cluster
        .unwrap_or_else(|| default_degree(n));
    let assignment = kmeans_rows(matrix, k, derive_seeds(seed, "kmeans"))?;
    let hetero = ccc_heterogeneous(&assignment, samples, derive_seeds(seed, "ccc"))?;
    let homo = homogeneous_baseline(&assignment, &hetero.0, derive_seeds(seed, "homogeneous"))?;
    let scores = Scores {
        hetero: score(&hetero.0, &hetero.1, matrix)?,
        homo: score(&homo.0, &homo.1, matrix)?,
    };
    log::info!(
        "k={k}: hetero {} participants in {} cliques, homo {} participants ({} mixed cliques)",
        hetero.0.participant_count(),
        hetero.0.cliques.len(),
        homo.0.participant_count(),
        homo.0.mixed.len()
    );
    Ok(Built {
        assignment,
        hetero,
        homo,
        scores,
    })
}

/// Topology actually trained on: the ring itself, or its partitions.
pub fn training_topology(
    plan: &CliquePlan,
    t: &Topology,
    partitions: Option<usize>,
) -> CliResult<Topology> {
    match partitions {
        None => Ok(t.clone()),
        Some(p) => Ok(Topology::union(&split_partitions(t, &plan.cliques, p)?)?),
    }
}

pub fn train_plan(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    plan: &CliquePlan,
    t: &Topology,
    partitions: Option<usize>,
) -> CliResult<Vec<Metrics>> {
    let topology = training_topology(plan, t, partitions)?;
    let train_cfg = cfg
        .train
        .to_config(derive_seeds(cfg.master_seed(), "phase3"));
    let outcome = train_phase3(
        &topology,
        plan,
        &prepared.locals,
        &prepared.initial,
        &prepared.test,
        &train_cfg,
    )?;
    Ok(outcome.metrics)
}

/// Heterogeneous vs homogeneous curves on the same data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub partitions: Option<usize>,
    pub hetero: Vec<Metrics>,
    pub homo: Vec<Metrics>,
    /// Per-round hetero minus homo mean accuracy.
    pub delta: Vec<f64>,
    pub final_delta: f64,
}

impl Comparison {
    pub fn new(partitions: Option<usize>, hetero: Vec<Metrics>, homo: Vec<Metrics>) -> Self {
        let delta: Vec<f64> = hetero
            .iter()
            .zip(&homo)
            .map(|(a, b)| a.mean_accuracy - b.mean_accuracy)
            .collect();
        let final_delta = delta.last().copied().unwrap_or(0.0);
        Comparison {
            partitions,
            hetero,
            homo,
            delta,
            final_delta,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("round,hetero_mean_accuracy,homo_mean_accuracy,delta\n");
        for ((a, b), d) in self.hetero.iter().zip(&self.homo).zip(&self.delta) {
            out.push_str(&format!(
                "{},{},{},{}\n",
                a.round, a.mean_accuracy, b.mean_accuracy, d
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub n: usize,
    pub seed: u64,
    pub morph_rounds: usize,
    pub matrix_complete: bool,
    pub k: usize,
    pub participants_hetero: usize,
    pub participants_homo: usize,
    pub mixed_homo_cliques: usize,
    pub scores: Scores,
    pub ring: Comparison,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub partitioned: Option<Comparison>,
}

/// All in-memory results of a full experiment.
#[derive(Debug, Clone)]
pub struct ExperimentRun {
    pub prepared: Prepared,
    pub matrix: SimilarityMatrix,
    pub history: MorphHistory,
    pub built: Built,
    pub report: ExperimentReport,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> CliResult<ExperimentRun> {
    cfg.validate()?;
    let prepared = prepare(cfg)?;
    let (matrix, history) = morph_phase(cfg, &prepared.proxies)?;
    let built = build_phase(cfg, &matrix)?;
    let compare = |p: Option<usize>| -> CliResult<Comparison> {
        let het = train_plan(cfg, &prepared, &built.hetero.0, &built.hetero.1, p)?;
        let hom = train_plan(cfg, &prepared, &built.homo.0, &built.homo.1, p)?;
        Ok(Comparison::new(p, het, hom))
    };
    let ring = compare(None)?;
    let partitioned = cfg.partitions.map(|p| compare(Some(p))).transpose()?;
    let report = ExperimentReport {
        n: matrix.n(),
        seed: cfg.master_seed(),
        morph_rounds: history.rounds(),
        matrix_complete: matrix.is_complete(),
        k: built.assignment.k,
        participants_hetero: built.hetero.0.participant_count(),
        participants_homo: built.homo.0.participant_count(),
        mixed_homo_cliques: built.homo.0.mixed.len(),
        scores: built.scores,
        ring,
        partitioned,
    };
    Ok(ExperimentRun {
        prepared,
        matrix,
        history,
        built,
        report,
    })
}

/// Files written by one invocation, with their SHA-256 digests.
#[derive(Debug, Default, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub mode: String,
    pub seed: u64,
    pub files: BTreeMap<String, String>,
    /// Wall-clock seconds since the Unix epoch; the only non-reproducible field.
    pub generated_unix: u64,
}

struct Writer<'a> {
    dir: &'a Path,
    files: BTreeMap<String, String>,
}

impl Writer<'_> {
    fn put(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.files
            .insert(name.to_string(), hex::encode(Sha256::digest(bytes)));
        log::debug!("wrote {}", path.display());
        Ok(())
    }
}

fn read_input(dir: &Path, name: &str) -> CliResult<Vec<u8>> {
    let path = dir.join(name);
    match std::fs::read(&path) {
        Ok(bytes) => Ok(bytes),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(CliError::StagedInput(path)),
        Err(e) => Err(CliError::io(path, e)),
    }
}

fn read_text(dir: &Path, name: &str) -> CliResult<String> {
    String::from_utf8(read_input(dir, name)?).map_err(|e| {
        CliError::io(
            dir.join(name),
            std::io::Error::new(std::io::ErrorKind::InvalidData, e),
        )
    })
}

fn write_morph(w: &mut Writer, matrix: &SimilarityMatrix, history: &MorphHistory) -> CliResult<()> {
    let mut bytes = Vec::new();
    matrix.write_dump(&mut bytes).expect("writing to memory");
    w.put(MATRIX_FILE, &bytes)?;
    w.put("morph_stats.csv", stats_csv(&history.stats).as_bytes())?;
    w.put(
        "morph_stats.json",
        serde_json::to_string_pretty(&history.stats)?.as_bytes(),
    )
}

fn write_build(w: &mut Writer, built: &Built) -> CliResult<()> {
    for (tag, (plan, t)) in [("hetero", &built.hetero), ("homo", &built.homo)] {
        w.put(&format!("plan_{tag}.json"), plan.to_json().as_bytes())?;
        w.put(&format!("topology_{tag}.json"), t.to_json().as_bytes())?;
    }
    w.put(
        "scores.json",
        serde_json::to_string(&built.scores)?.as_bytes(),
    )
}

fn metrics_name(tag: &str, partitions: Option<usize>) -> String {
    match partitions {
        None => format!("metrics_{tag}.csv"),
        Some(p) => format!("metrics_{tag}_p{p}.csv"),
    }
}

fn write_metrics(
    w: &mut Writer,
    tag: &str,
    partitions: Option<usize>,
    rows: &[Metrics],
) -> CliResult<()> {
    w.put(&metrics_name(tag, partitions), metrics_csv(rows).as_bytes())
}

fn write_comparison(w: &mut Writer, c: &Comparison) -> CliResult<()> {
    write_metrics(w, "hetero", c.partitions, &c.hetero)?;
    write_metrics(w, "homo", c.partitions, &c.homo)?;
    let name = match c.partitions {
        None => "comparison.csv".to_string(),
        Some(p) => format!("comparison_p{p}.csv"),
    };
    w.put(&name, c.to_csv().as_bytes())
}

/// What an invocation produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub out: PathBuf,
    pub manifest: Manifest,
}

/// Runs the configured mode, writing artifacts and a manifest under `out`.
pub fn run_pipeline(cfg: &ExperimentConfig, out: &Path) -> CliResult<RunSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let mut w = Writer {
        dir: out,
        files: BTreeMap::new(),
    };
    match cfg.mode {
        Mode::Morph => {
            let prepared = prepare(cfg)?;
            let (matrix, history) = morph_phase(cfg, &prepared.proxies)?;
            write_morph(&mut w, &matrix, &history)?;
        }
        Mode::Build => {
            let bytes = read_input(out, MATRIX_FILE)?;
            let matrix = SimilarityMatrix::read_dump(&mut bytes.as_slice())?;
            write_build(&mut w, &build_phase(cfg, &matrix)?)?;
        }
        Mode::Train => {
            let prepared = prepare(cfg)?;
            let mut loaded = Vec::new();
            for tag in ["hetero", "homo"] {
                let plan = CliquePlan::from_json(&read_text(out, &format!("plan_{tag}.json"))?)?;
                let t = Topology::from_json(&read_text(out, &format!("topology_{tag}.json"))?)?;
                loaded.push((plan, t));
            }
            for p in std::iter::once(None).chain(cfg.partitions.map(Some)) {
                for (tag, (plan, t)) in ["hetero", "homo"].iter().zip(&loaded) {
                    let rows = train_plan(cfg, &prepared, plan, t, p)?;
                    write_metrics(&mut w, tag, p, &rows)?;
                }
            }
        }
        Mode::Experiment => {
            let run = run_experiment(cfg)?;
            write_morph(&mut w, &run.matrix, &run.history)?;
            write_build(&mut w, &run.built)?;
            write_comparison(&mut w, &run.report.ring)?;
            if let Some(c) = &run.report.partitioned {
                write_comparison(&mut w, c)?;
            }
            w.put(
                "report.json",
                serde_json::to_string_pretty(&run.report)?.as_bytes(),
            )?;
            log::info!("final delta {:+.4}", run.report.ring.final_delta);
        }
        Mode::Accounting => {
            let n = cfg.n.expect("validated");
            let d = &cfg.data;
            let proxy_len = cfg
                .proxy_bytes
                .unwrap_or(proxy_bytes(d.global_per_class * d.classes, d.classes) as u64);
            let degree = cfg.degree.unwrap_or_else(|| default_degree(n));
            let report = accounting_run(
                n,
                degree,
                proxy_len,
                24,
                derive_seeds(cfg.master_seed(), "morph"),
            )?;
            w.put("accounting.csv", stats_csv(&report.per_round).as_bytes())?;
            w.put(
                "accounting.json",
                serde_json::to_string_pretty(&report)?.as_bytes(),
            )?;
            log::info!(
                "{} rounds, {:.1} GB total proxy download, {:.2} MB per node",
                report.rounds,
                report.totals.proxy_bytes as f64 / 1e9,
                report.per_node_proxy_bytes() / 1e6
            );
        }
    }
    let manifest = Manifest {
        mode: cfg.mode.name().to_string(),
        seed: cfg.master_seed(),
        files: w.files,
        generated_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
    };
    let path = out.join(MANIFEST_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| CliError::io(&path, e))?;
    Ok(RunSummary {
        out: out.to_path_buf(),
        manifest,
    })
}
