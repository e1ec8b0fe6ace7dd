//! Synthetic data, non-IID partitioning, a softmax-regression learner and the
//! decentralized training loop with neighborhood averaging.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::Topology;
use crate::matrix::Matrix;
use crate::proxy::{softmax_into, Classifier, GlobalDataset};
use crate::rng::{child_seed, stream_rng};
use crate::selection::CliquePlan;

/// Distance of blob centers from the origin used by [`synth_dataset`].
pub const DEFAULT_SEPARATION: f64 = 4.0;
pub const PARTITION_RETRIES: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(shape_err(features.rows(), labels.len()));
        }
        if !features.is_finite() {
            return Err(Error::Numeric("non-finite features"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidInput(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Dataset {
            features,
            labels,
            classes,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    pub fn label_set(&self) -> BTreeSet<usize> {
        self.labels.iter().copied().collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut out = vec![0; self.classes];
        for &l in &self.labels {
            out[l] += 1;
        }
        out
    }

    /// Sample indices grouped by label.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.classes];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    /// Features only, for computing proxies.
    pub fn to_global(&self) -> Result<GlobalDataset> {
        GlobalDataset::new(self.features.clone())
    }

    /// Three matrix blocks: features, labels as an `S x 1` column, and `[[classes]]`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let labels = Matrix::from_vec(
            self.len(),
            1,
            self.labels.iter().map(|&l| l as f64).collect(),
        )
        .expect("column shape");
        let classes = Matrix::from_vec(1, 1, vec![self.classes as f64]).expect("scalar shape");
        let mut out = self.features.to_block_bytes();
        out.extend(labels.to_block_bytes());
        out.extend(classes.to_block_bytes());
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Dataset> {
        let features = Matrix::read_block(&mut bytes)?;
        let labels = Matrix::read_block(&mut bytes)?;
        let classes = Matrix::read_block(&mut bytes)?;
        if classes.rows() != 1 || classes.cols() != 1 || labels.cols() != 1 {
            return Err(Error::Decode("malformed dataset blocks".into()));
        }
        let as_count = |v: f64| -> Result<usize> {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Decode(format!("{v} is not a count")))
            }
        };
        let labels = labels
            .as_slice()
            .iter()
            .map(|&v| as_count(v))
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(features, labels, as_count(classes.get(0, 0))?)
    }
}

/// Gaussian class centers on a sphere.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobCenters {
    centers: Vec<Vec<f64>>,
}

impl BlobCenters {
    pub fn sample(classes: usize, dims: usize, radius: f64, seed: u64) -> Result<Self> {
        if classes < 2 || dims < 2 {
            return Err(Error::InvalidInput(
                "need at least 2 classes and 2 dims".into(),
            ));
        }
        let mut rng = stream_rng(seed, 0xb10b);
        let centers = (0..classes)
            .map(|_| {
                let v: Vec<f64> = (0..dims).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = v
                    .iter()
                    .map(|x: &f64| x * x)
                    .sum::<f64>()
                    .sqrt()
                    .max(f64::MIN_POSITIVE);
                v.into_iter().map(|x| x * radius / norm).collect()
            })
            .collect();
        Ok(BlobCenters { centers })
    }

    pub fn classes(&self) -> usize {
        self.centers.len()
    }

    pub fn dims(&self) -> usize {
        self.centers[0].len()
    }

    /// `per_class` unit-variance samples around each center, all centers moved
    /// by `shift` along the diagonal direction. Labels are grouped by class.
    pub fn draw(&self, per_class: usize, shift: f64, seed: u64) -> Result<Dataset> {
        if per_class == 0 {
            return Err(Error::InvalidInput("per_class must be at least 1".into()));
        }
        let dims = self.dims();
        let offset = shift / (dims as f64).sqrt();
        let mut rng = stream_rng(seed, 0xda7a);
        let mut data = Vec::with_capacity(self.classes() * per_class * dims);
        let mut labels = Vec::with_capacity(self.classes() * per_class);
        for (c, center) in self.centers.iter().enumerate() {
            for _ in 0..per_class {
                for &mu in center {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    data.push(mu + offset + z);
                }
                labels.push(c);
            }
        }
        Dataset::new(
            Matrix::from_vec(labels.len(), dims, data)?,
            labels,
            self.classes(),
        )
    }
}

pub fn synth_dataset(
    classes: usize,
    dims: usize,
    per_class: usize,
    center_shift: f64,
    seed: u64,
) -> Result<Dataset> {
    BlobCenters::sample(classes, dims, DEFAULT_SEPARATION, seed)?.draw(
        per_class,
        center_shift,
        child_seed(seed, 1),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "flavor", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionSpec {
    /// Each node holds `classes_per_node` classes.
    Label2 {
        classes_per_node: usize,
    },
    /// Per-class node proportions from a symmetric Dirichlet.
    Labeldir {
        beta: f64,
    },
    /// IID labels, node sample counts from a symmetric Dirichlet.
    QuantitySkew {
        beta: f64,
    },
    /// IID split plus Gaussian feature noise of variance `eta * i / n` on node `i`.
    FeatNoise {
        eta: f64,
    },
    Mixed {
        beta: f64,
        eta: f64,
    },
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidInput(what.to_string()));
        match *self {
            PartitionSpec::Label2 {
                classes_per_node: 0,
            } => bad("classes_per_node must be ≥ 1"),
            PartitionSpec::Labeldir { beta } | PartitionSpec::QuantitySkew { beta }
                if !(beta > 0.0 && beta.is_finite()) =>
            {
                bad("beta must be positive")
            }
            PartitionSpec::FeatNoise { eta } if !(eta >= 0.0 && eta.is_finite()) => {
                bad("eta must be non-negative")
            }
            PartitionSpec::Mixed { beta, eta }
                if !(beta > 0.0 && beta.is_finite() && eta >= 0.0 && eta.is_finite()) =>
            {
                bad("mixed needs beta > 0 and eta ≥ 0")
            }
            _ => Ok(()),
        }
    }
}

/// Symmetric Dirichlet draw over `n` coordinates via normalized Gamma variates.
pub fn dirichlet<R: Rng>(beta: f64, n: usize, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(beta, 1.0).expect("beta validated positive");
    let mut v: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = v.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        v.iter_mut().for_each(|x| *x /= sum);
    } else {
        v.iter_mut().for_each(|x| *x = 0.0);
        v[rng.random_range(0..n)] = 1.0;
    }
    v
}

/// Integer counts proportional to `props` summing exactly to `total`
/// (floor, then largest remainders with ties to the lower index).
pub fn apportion(props: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = props.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (raw[a] - raw[a].floor(), raw[b] - raw[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Splits `items` into `parts` contiguous chunks whose sizes differ by at most one.
fn even_chunks(items: &[usize], parts: usize) -> Vec<Vec<usize>> {
    let (base, extra) = (items.len() / parts, items.len() % parts);
    let mut out = Vec::with_capacity(parts);
    let mut at = 0;
    for i in 0..parts {
        let len = base + usize::from(i < extra);
        out.push(items[at..at + len].to_vec());
        at += len;
    }
    out
}

fn chunks_by_counts(items: &[usize], counts: &[usize]) -> Vec<Vec<usize>> {
    let mut at = 0;
    counts
        .iter()
        .map(|&c| {
            let chunk = items[at..at + c].to_vec();
            at += c;
            chunk
        })
        .collect()
}

/// Class sets for label-quantity skew. Node `i` first takes class
/// `perm[i % C]` so every class is covered when `n ≥ C`; the rest are drawn
/// uniformly without repeats.
fn label_assignment<R: Rng>(
    classes: usize,
    per_node: usize,
    n: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let per_node = per_node.min(classes);
    let mut perm: Vec<usize> = (0..classes).collect();
    perm.shuffle(rng);
    (0..n)
        .map(|i| {
            let mut owned = vec![perm[i % classes]];
            while owned.len() < per_node {
                let c = rng.random_range(0..classes);
                if !owned.contains(&c) {
                    owned.push(c);
                }
            }
            owned
        })
        .collect()
}

fn split_once<R: Rng>(
    data: &Dataset,
    spec: &PartitionSpec,
    n: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let mut nodes: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut by_class = data.indices_by_class();
    for idx in &mut by_class {
        idx.shuffle(rng);
    }
    let shuffled_all = |rng: &mut R| {
        let mut all: Vec<usize> = (0..data.len()).collect();
        all.shuffle(rng);
        all
    };
    match *spec {
        PartitionSpec::Label2 { classes_per_node } => {
            let owned = label_assignment(data.classes(), classes_per_node, n, rng);
            for (c, idx) in by_class.iter().enumerate() {
                let holders: Vec<usize> = (0..n).filter(|&v| owned[v].contains(&c)).collect();
                if holders.is_empty() {
                    continue;
                }
                for (v, chunk) in holders.iter().zip(even_chunks(idx, holders.len())) {
                    nodes[*v].extend(chunk);
                }
            }
        }
        PartitionSpec::Labeldir { beta } | PartitionSpec::Mixed { beta, .. } => {
            for idx in &by_class {
                let props = dirichlet(beta, n, rng);
                for (v, chunk) in chunks_by_counts(idx, &apportion(&props, idx.len()))
                    .into_iter()
                    .enumerate()
                {
                    nodes[v].extend(chunk);
                }
            }
        }
        PartitionSpec::QuantitySkew { beta } => {
            let all = shuffled_all(rng);
            let props = dirichlet(beta, n, rng);
            nodes = chunks_by_counts(&all, &apportion(&props, all.len()));
        }
        PartitionSpec::FeatNoise { .. } => {
            let all = shuffled_all(rng);
            nodes = even_chunks(&all, n);
        }
    }
    for v in &mut nodes {
        v.sort_unstable();
    }
    nodes
}

/// Splits `data` across `n` nodes. A draw that leaves some node empty is
/// retried with a fresh sub-seed, up to [`PARTITION_RETRIES`] times.
pub fn partition_data(
    data: &Dataset,
    spec: &PartitionSpec,
    n: usize,
    seed: u64,
) -> Result<Vec<Dataset>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::InvalidInput(
            "partition needs at least one node".into(),
        ));
    }
    for attempt in 0..PARTITION_RETRIES {
        let mut rng = stream_rng(child_seed(seed, attempt as u64), 0x9a27);
        let idx = split_once(data, spec, n, &mut rng);
        if idx.iter().any(Vec::is_empty) {
            log::debug!("partition attempt {attempt} left a node empty; retrying");
            continue;
        }
        let mut locals: Vec<Dataset> = idx.iter().map(|i| data.subset(i)).collect();
        if let PartitionSpec::FeatNoise { eta } | PartitionSpec::Mixed { eta, .. } = *spec {
            for (i, local) in locals.iter_mut().enumerate() {
                let sd = (eta * i as f64 / n as f64).sqrt();
                if sd > 0.0 {
                    let normal = Normal::new(0.0, sd).expect("finite sd");
                    local
                        .features
                        .as_mut_slice()
                        .iter_mut()
                        .for_each(|x| *x += normal.sample(&mut rng));
                }
            }
        }
        return Ok(locals);
    }
    Err(Error::UnderfilledPartition {
        attempts: PARTITION_RETRIES,
    })
}

/// Multinomial logistic regression parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(classes: usize, dims: usize) -> Self {
        ModelParams {
            w: Matrix::zeros(classes, dims),
            b: vec![0.0; classes],
        }
    }

    pub fn new(w: Matrix, b: Vec<f64>) -> Result<Self> {
        if b.len() != w.rows() {
            return Err(shape_err(w.rows(), b.len()));
        }
        if !w.is_finite() || b.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite parameters"));
        }
        Ok(ModelParams { w, b })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.w.rows(), self.w.cols())
    }

    pub fn byte_len(&self) -> usize {
        self.w.block_len() + 16 + 8 * self.b.len()
    }

    /// `W` block followed by `b` as a `C x 1` block.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.w.to_block_bytes();
        out.extend(
            Matrix::from_vec(self.b.len(), 1, self.b.clone())
                .expect("column")
                .to_block_bytes(),
        );
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let w = Matrix::read_block(&mut bytes)?;
        let b = Matrix::read_block(&mut bytes)?;
        if b.cols() != 1 {
            return Err(Error::Decode("bias block must be a column".into()));
        }
        ModelParams::new(w, b.as_slice().to_vec())
    }

    /// Largest absolute coordinate difference.
    pub fn max_abs_diff(&self, other: &ModelParams) -> f64 {
        self.w
            .as_slice()
            .iter()
            .zip(other.w.as_slice())
            .chain(self.b.iter().zip(&other.b))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn coords(&self) -> impl Iterator<Item = &f64> {
        self.w.as_slice().iter().chain(&self.b)
    }

    fn coords_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w.as_mut_slice().iter_mut().chain(self.b.iter_mut())
    }
}

impl Classifier for ModelParams {
    fn input_dim(&self) -> usize {
        self.w.cols()
    }

    fn num_classes(&self) -> usize {
        self.w.rows()
    }

    fn logits_into(&self, x: &[f64], out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            *o = self.b[c] + self.w.row(c).iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }
}

fn check_compat(params: &ModelParams, data: &Dataset) -> Result<()> {
    if params.w.cols() != data.dim() {
        return Err(shape_err(params.w.cols(), data.dim()));
    }
    if params.w.rows() != data.classes() {
        return Err(shape_err(params.w.rows(), data.classes()));
    }
    Ok(())
}

/// Adds the cross-entropy gradient of the samples in `idx` (summed, not averaged)
/// to `grad` and returns the summed loss.
fn accumulate_grad(
    params: &ModelParams,
    data: &Dataset,
    idx: &[usize],
    grad: &mut ModelParams,
) -> f64 {
    let classes = params.w.rows();
    let mut probs = vec![0.0; classes];
    let mut logits = vec![0.0; classes];
    let mut loss = 0.0;
    for &i in idx {
        let x = data.features.row(i);
        params.logits_into(x, &mut logits);
        softmax_into(&logits, &mut probs);
        let y = data.labels[i];
        loss -= probs[y].max(f64::MIN_POSITIVE).ln();
        for (c, &p) in probs.iter().enumerate() {
            let delta = p - if c == y { 1.0 } else { 0.0 };
            grad.b[c] += delta;
            for (g, v) in grad.w.row_mut(c).iter_mut().zip(x) {
                *g += delta * v;
            }
        }
    }
    loss
}

/// Mean cross-entropy and its gradient over the whole dataset.
pub fn loss_and_grad(params: &ModelParams, data: &Dataset) -> Result<(f64, ModelParams)> {
    check_compat(params, data)?;
    if data.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    let (c, d) = params.shape();
    let mut grad = ModelParams::zeros(c, d);
    let idx: Vec<usize> = (0..data.len()).collect();
    let loss = accumulate_grad(params, data, &idx, &mut grad);
    let scale = 1.0 / data.len() as f64;
    grad.coords_mut().for_each(|g| *g *= scale);
    Ok((loss * scale, grad))
}

/// Mini-batch SGD on mean cross-entropy. Each epoch reshuffles with a stream
/// derived from `seed` and the epoch index.
pub fn sgd_train(
    params: &ModelParams,
    data: &Dataset,
    epochs: usize,
    lr: f64,
    batch: usize,
    seed: u64,
) -> Result<ModelParams> {
    check_compat(params, data)?;
    if data.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    if batch == 0 {
        return Err(Error::InvalidInput("batch size must be at least 1".into()));
    }
    let (c, d) = params.shape();
    let mut out = params.clone();
    let mut grad = ModelParams::zeros(c, d);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..epochs {
        let mut rng = stream_rng(seed, epoch as u64);
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            grad.coords_mut().for_each(|g| *g = 0.0);
            accumulate_grad(&out, data, chunk, &mut grad);
            let step = lr / chunk.len() as f64;
            for (p, g) in out.coords_mut().zip(grad.coords()) {
                *p -= step * g;
            }
        }
    }
    if !out.w.is_finite() || out.b.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("training diverged"));
    }
    Ok(out)
}

/// Elementwise mean of `own` and all `neighbors`.
pub fn fedavg_aggregate(own: &ModelParams, neighbors: &[&ModelParams]) -> Result<ModelParams> {
    let mut out = own.clone();
    for nb in neighbors {
        if nb.shape() != own.shape() {
            return Err(shape_err(
                own.w.rows() * own.w.cols(),
                nb.w.rows() * nb.w.cols(),
            ));
        }
        for (o, v) in out.coords_mut().zip(nb.coords()) {
            *o += v;
        }
    }
    let scale = 1.0 / (neighbors.len() + 1) as f64;
    out.coords_mut().for_each(|o| *o *= scale);
    Ok(out)
}

/// Top-1 accuracy; ties go to the lowest class index.
pub fn evaluate(params: &ModelParams, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::InvalidInput("empty test set".into()));
    }
    check_compat(params, test)?;
    let mut logits = vec![0.0; params.w.rows()];
    let mut correct = 0usize;
    for (i, &y) in test.labels.iter().enumerate() {
        params.logits_into(test.features.row(i), &mut logits);
        let mut best = 0;
        for c in 1..logits.len() {
            if logits[c] > logits[best] {
                best = c;
            }
        }
        correct += usize::from(best == y);
    }
    Ok(correct as f64 / test.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub prologue_epochs: usize,
    pub local_epochs: usize,
    pub learning_rate: f64,
    pub rounds: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            prologue_epochs: 1,
            local_epochs: 1,
            learning_rate: 0.1,
            rounds: 30,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        for (name, v) in [
            ("prologue_epochs", self.prologue_epochs),
            ("local_epochs", self.local_epochs),
            ("rounds", self.rounds),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                bad.push(name);
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            bad.push("learning_rate");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid train fields: {}",
                bad.join(", ")
            )))
        }
    }

    fn round_seed(&self, round: usize) -> u64 {
        child_seed(self.seed, round as u64 + 1)
    }
}

/// One-time local training from zero parameters, giving the models whose
/// proxies drive morphing and the starting point of decentralized training.
pub fn prologue(locals: &[Dataset], cfg: &TrainConfig) -> Result<Vec<ModelParams>> {
    locals
        .iter()
        .map(|data| {
            let init = ModelParams::zeros(data.classes(), data.dim());
            sgd_train(
                &init,
                data,
                cfg.prologue_epochs,
                cfg.learning_rate,
                cfg.batch_size,
                child_seed(cfg.seed, 0),
            )
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub round: usize,
    pub mean_accuracy: f64,
    pub min_accuracy: f64,
    pub max_accuracy: f64,
    pub bytes_downloaded: u64,
}

impl Metrics {
    pub const CSV_HEADER: &'static str =
        "round,mean_accuracy,min_accuracy,max_accuracy,bytes_downloaded";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.round,
            self.mean_accuracy,
            self.min_accuracy,
            self.max_accuracy,
            self.bytes_downloaded
        )
    }
}

pub fn metrics_csv(rows: &[Metrics]) -> String {
    let mut out = String::from(Metrics::CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Final parameters of every participant plus the per-round metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub metrics: Vec<Metrics>,
    pub params: Vec<(usize, ModelParams)>,
}

/// Decentralized training on `t`. Every round each participant runs local SGD,
/// then all participants replace their parameters with the mean over
/// themselves and their neighbors' freshly trained parameters.
///
/// `locals` and `initial` are indexed by node id. Nodes outside the plan
/// neither train nor share parameters.
pub fn train_phase3(
    t: &Topology,
    plan: &CliquePlan,
    locals: &[Dataset],
    initial: &[ModelParams],
    test: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let participants: Vec<usize> = plan.participants().into_iter().map(|v| v.0).collect();
    let mut is_participant = vec![false; t.n()];
    for &v in &participants {
        if v >= t.n() {
            return Err(Error::InvalidNode { node: v, n: t.n() });
        }
        if v >= locals.len() || v >= initial.len() || locals[v].is_empty() {
            return Err(Error::Config(format!(
                "participant {v} has no local data or initial parameters"
            )));
        }
        is_participant[v] = true;
    }
    let neighbors: Vec<Vec<usize>> = participants
        .iter()
        .map(|&v| {
            t.neighbor_indices(v)
                .filter(|&u| is_participant[u])
                .collect()
        })
        .collect();
    let slot: Vec<Option<usize>> = {
        let mut s = vec![None; t.n()];
        for (i, &v) in participants.iter().enumerate() {
            s[v] = Some(i);
        }
        s
    };
    let mut current: Vec<ModelParams> = participants.iter().map(|&v| initial[v].clone()).collect();
    let param_bytes = current.first().map_or(0, ModelParams::byte_len) as u64;
    let mut metrics = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let seed = cfg.round_seed(round);
        let trained: Vec<ModelParams> = participants
            .iter()
            .zip(&current)
            .map(|(&v, p)| {
                sgd_train(
                    p,
                    &locals[v],
                    cfg.local_epochs,
                    cfg.learning_rate,
                    cfg.batch_size,
                    seed,
                )
            })
            .collect::<Result<_>>()?;
        let mut downloads = 0u64;
        current = trained
            .iter()
            .zip(&neighbors)
            .map(|(own, nbrs)| {
                downloads += nbrs.len() as u64;
                let refs: Vec<&ModelParams> = nbrs
                    .iter()
                    .map(|&u| &trained[slot[u].expect("participant")])
                    .collect();
                fedavg_aggregate(own, &refs)
            })
            .collect::<Result<_>>()?;
        let acc: Vec<f64> = current
            .iter()
            .map(|p| evaluate(p, test))
            .collect::<Result<_>>()?;
        let (min, max) = acc
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &a| {
                (lo.min(a), hi.max(a))
            });
        metrics.push(Metrics {
            round: round + 1,
            mean_accuracy: acc.iter().sum::<f64>() / acc.len().max(1) as f64,
            min_accuracy: if acc.is_empty() { 0.0 } else { min },
            max_accuracy: if acc.is_empty() { 0.0 } else { max },
            bytes_downloaded: downloads * param_bytes,
        });
    }
    Ok(TrainOutcome {
        metrics,
        params: participants.into_iter().zip(current).collect(),
    })
}
