//! Acceptance checks. Run with `cargo test -p topoprep-cli --test acceptance`.
//!
//! Prints one PASS/FAIL line per criterion and exits non-zero if any fails.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rand::Rng;
use topoprep::bftm::{
    accounting_run, default_degree, expected_rounds, run_morphing, MorphConfig, SimilarityMatrix,
};
use topoprep::graph::Topology;
use topoprep::learn::{
    fedavg_aggregate, loss_and_grad, partition_data, synth_dataset, ModelParams, PartitionSpec,
};
use topoprep::matrix::Matrix;
use topoprep::proxy::{kl_divergence, pair_similarity, Proxy, SimilarityValue};
use topoprep::rng::stream_rng;
use topoprep::selection::{
    ccc_heterogeneous, homogeneous_baseline, kmeans, kmeans_rows, objective_score,
};
use topoprep_cli::pipeline::ExperimentReport;
use topoprep_cli::{run_experiment, ExperimentConfig};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn random_proxies(n: usize, seed: u64) -> Vec<Proxy> {
    let mut rng = stream_rng(seed, 5);
    (0..n)
        .map(|_| {
            let data = (0..32 * 10).map(|_| rng.random_range(-4.0..4.0)).collect();
            Proxy::new(Matrix::from_vec(32, 10, data).unwrap()).unwrap()
        })
        .collect()
}

fn oracle_equivalence() -> Verdict {
    let start = Instant::now();
    let mut mismatches = 0;
    for (i, n) in [3usize, 8, 16, 64].into_iter().enumerate() {
        let proxies = random_proxies(n, i as u64);
        let (m, _) = run_morphing(&proxies, &MorphConfig::new(i as u64)).unwrap();
        for x in 0..n {
            for y in x + 1..n {
                let oracle = pair_similarity(&proxies[x], &proxies[y]).unwrap().get();
                if m.get(x, y).map(|v| v.get().to_bits()) != Some(oracle.to_bits()) {
                    mismatches += 1;
                }
            }
        }
    }
    let took = start.elapsed();
    verdict(
        mismatches == 0 && took < Duration::from_secs(10),
        format!("{mismatches} mismatched entries, {took:.2?}"),
    )
}

fn sweep() -> Vec<(usize, topoprep::bftm::AccountingReport)> {
    [256usize, 1024, 4096]
        .into_iter()
        .map(|n| (n, accounting_run(n, default_degree(n), 1, 24, 1).unwrap()))
        .collect()
}

fn round_bound(runs: &[(usize, topoprep::bftm::AccountingReport)], took: Duration) -> Verdict {
    let mut ok = took < Duration::from_secs(120);
    let mut parts = Vec::new();
    for (n, r) in runs {
        let bound = 3 * expected_rounds(*n);
        ok &= r.rounds <= bound;
        parts.push(format!("n={n}: {} ≤ {bound}", r.rounds));
    }
    verdict(ok, format!("{}, {took:.2?}", parts.join("; ")))
}

fn download_scaling(runs: &[(usize, topoprep::bftm::AccountingReport)]) -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    for (n, r) in runs {
        let bound = 2.0 * (*n as f64) * (*n as f64).sqrt();
        let d = r.totals.proxy_downloads as f64;
        ok &= d <= bound;
        parts.push(format!(
            "n={n}: {d} downloads vs bound {bound:.0} (c = {:.2})",
            d / bound * 2.0
        ));
    }
    verdict(ok, parts.join("; "))
}

fn full_scale_overhead() -> Verdict {
    let start = Instant::now();
    let r = accounting_run(10_000, 14, 70_000, 24, 1).unwrap();
    let took = start.elapsed();
    let total_gb = r.totals.proxy_bytes as f64 / 1e9;
    let per_node_mb = r.per_node_proxy_bytes() / 1e6;
    let ok = (12..=28).contains(&r.rounds)
        && (total_gb - 191.5).abs() <= 0.15 * 191.5
        && (per_node_mb - 20.0).abs() <= 0.15 * 20.0
        && took < Duration::from_secs(300);
    verdict(
        ok,
        format!(
            "{} rounds, {total_gb:.1} GB total, {per_node_mb:.2} MB/node, {took:.2?}",
            r.rounds
        ),
    )
}

fn experiment(seed: u64, partition: &str, partitions: Option<usize>) -> ExperimentReport {
    let mut text = format!("mode = \"experiment\"\nseed = {seed}\nn = 24\n");
    if let Some(p) = partitions {
        text.push_str(&format!("partitions = {p}\n"));
    }
    text.push_str(&format!("[partition]\n{partition}\n"));
    let cfg = ExperimentConfig::parse(&text).unwrap();
    run_experiment(&cfg).unwrap().report
}

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const LABEL2: &str = "flavor = \"label2\"\nclasses_per_node = 2";

fn fmt_deltas(d: &[f64]) -> String {
    d.iter()
        .map(|x| format!("{x:+.3}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn mean(d: &[f64]) -> f64 {
    d.iter().sum::<f64>() / d.len() as f64
}

fn label2_advantage() -> Verdict {
    let start = Instant::now();
    let reports: Vec<ExperimentReport> =
        SEEDS.iter().map(|&s| experiment(s, LABEL2, None)).collect();
    let deltas: Vec<f64> = reports.iter().map(|r| r.ring.final_delta).collect();
    let wins = deltas.iter().filter(|&&d| d > 0.0).count();
    let took = start.elapsed();
    let participants: Vec<usize> = reports.iter().map(|r| r.participants_hetero).collect();
    verdict(
        wins >= 4 && mean(&deltas) > 0.0 && took < Duration::from_secs(300),
        format!(
            "Δ = [{}], wins {wins}/5, mean {:+.4}, participants {participants:?}, {took:.2?}",
            fmt_deltas(&deltas),
            mean(&deltas)
        ),
    )
}

fn dirichlet_advantage() -> Verdict {
    let run = |beta: f64| -> Vec<f64> {
        SEEDS
            .iter()
            .map(|&s| {
                experiment(s, &format!("flavor = \"labeldir\"\nbeta = {beta}"), None)
                    .ring
                    .final_delta
            })
            .collect()
    };
    let skewed = run(0.1);
    let mild = run(0.5);
    verdict(
        mean(&skewed) > 0.0 && mean(&skewed) >= mean(&mild),
        format!(
            "β=0.1 Δ = [{}] mean {:+.4}; β=0.5 mean {:+.4}",
            fmt_deltas(&skewed),
            mean(&skewed),
            mean(&mild)
        ),
    )
}

fn partition_robustness() -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    for p in [2usize, 3, 4] {
        let deltas: Vec<f64> = SEEDS
            .iter()
            .map(|&s| {
                experiment(s, LABEL2, Some(p))
                    .partitioned
                    .expect("partition variant")
                    .final_delta
            })
            .collect();
        let wins = deltas.iter().filter(|&&d| d > 0.0).count();
        ok &= wins >= 4;
        parts.push(format!("p={p}: {wins}/5 mean {:+.4}", mean(&deltas)));
    }
    verdict(ok, parts.join("; "))
}

fn random_params(c: usize, d: usize, seed: u64) -> ModelParams {
    let mut rng = stream_rng(seed, 2);
    let w = Matrix::from_vec(
        c,
        d,
        (0..c * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    ModelParams::new(w, (0..c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn property_suites() -> Verdict {
    let mut failed: Vec<&str> = Vec::new();
    let mut check = |name: &'static str, ok: bool| {
        if !ok && !failed.contains(&name) {
            failed.push(name);
        }
    };
    for seed in 0..40u64 {
        let ps = random_proxies(2, seed);
        let fwd = kl_divergence(&ps[0], &ps[1]).unwrap().get();
        check(
            "kl",
            fwd >= 0.0 && kl_divergence(&ps[0], &ps[0]).unwrap().get() == 0.0,
        );

        let data = synth_dataset(6, 3, 12, 0.0, seed).unwrap();
        let parts = partition_data(
            &data,
            &PartitionSpec::Label2 {
                classes_per_node: 2,
            },
            8,
            seed,
        )
        .unwrap();
        check(
            "label2 cardinality",
            parts.iter().all(|p| p.label_set().len() == 2),
        );
        let total: usize = parts.iter().map(|p| p.len()).sum();
        let dir = partition_data(&data, &PartitionSpec::Labeldir { beta: 0.3 }, 5, seed).unwrap();
        let dir_total: usize = dir.iter().map(|p| p.len()).sum();
        check(
            "partition conservation",
            total == data.len() && dir_total == data.len(),
        );

        let p = random_params(3, 3, seed);
        let small = synth_dataset(3, 3, 3, 0.0, seed).unwrap();
        let (_, grad) = loss_and_grad(&p, &small).unwrap();
        let h = 1e-5;
        for c in 0..3 {
            for j in 0..3 {
                let mut plus = p.clone();
                let mut minus = p.clone();
                plus.w.set(c, j, p.w.get(c, j) + h);
                minus.w.set(c, j, p.w.get(c, j) - h);
                let numeric = (loss_and_grad(&plus, &small).unwrap().0
                    - loss_and_grad(&minus, &small).unwrap().0)
                    / (2.0 * h);
                let analytic = grad.w.get(c, j);
                let rel = (numeric - analytic).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
                check("gradient", rel <= 1e-5);
            }
        }

        let n = 6;
        let t = Topology::from_edges(n, (1..n).map(|v| (v - 1, v)).chain([(0, 3)])).unwrap();
        let mut params: Vec<ModelParams> = (0..n)
            .map(|v| random_params(2, 2, seed * 10 + v as u64))
            .collect();
        let spread = |ps: &[ModelParams]| -> f64 {
            (0..n)
                .flat_map(|a| (0..n).map(move |b| (a, b)))
                .map(|(a, b)| ps[a].max_abs_diff(&ps[b]))
                .fold(0.0, f64::max)
        };
        let mut prev = spread(&params);
        for _ in 0..10 {
            params = (0..n)
                .map(|v| {
                    let nb: Vec<&ModelParams> = t.neighbor_indices(v).map(|u| &params[u]).collect();
                    fedavg_aggregate(&params[v], &nb).unwrap()
                })
                .collect();
            let now = spread(&params);
            check("fedavg contraction", now < prev);
            prev = now;
        }

        let mut rng = stream_rng(seed, 8);
        let points: Vec<Vec<f64>> = (0..30)
            .map(|i| {
                (0..3)
                    .map(|_| rng.random::<f64>() + (i % 4) as f64)
                    .collect()
            })
            .collect();
        let a = kmeans(&points, 4, seed).unwrap();
        check(
            "kmeans monotone",
            a.inertia_history
                .windows(2)
                .all(|w| w[1] <= w[0] * (1.0 + 1e-12) + 1e-12),
        );

        let (het, _) = ccc_heterogeneous(&a, 4, seed).unwrap();
        let (homo, _) = homogeneous_baseline(&a, &het, seed).unwrap();
        let diverse = het.cliques.iter().all(|c| {
            c.members
                .iter()
                .map(|m| a.labels[m.0])
                .collect::<BTreeSet<_>>()
                .len()
                == c.len()
        });
        let pure = homo.cliques.iter().enumerate().all(|(j, c)| {
            homo.mixed.contains(&j)
                || c.members
                    .iter()
                    .map(|m| a.labels[m.0])
                    .collect::<BTreeSet<_>>()
                    .len()
                    == 1
        });
        check("clique diversity/purity", diverse && pure);
        check(
            "size parity",
            (het.participant_count() as i64 - homo.participant_count() as i64).abs() <= 1,
        );
    }
    let cfg = ExperimentConfig::parse(&format!(
        "mode = \"experiment\"\nseed = 9\nn = 12\n[train]\nrounds = 3\n[partition]\n{LABEL2}\n"
    ))
    .unwrap();
    let first = run_experiment(&cfg).unwrap().report;
    let second = run_experiment(&cfg).unwrap().report;
    check(
        "bitwise reproducibility",
        serde_json::to_string(&first).unwrap() == serde_json::to_string(&second).unwrap(),
    );
    if failed.is_empty() {
        verdict(
            true,
            "kl, fedavg, conservation, label2, gradient, kmeans, cliques, reproducibility",
        )
    } else {
        verdict(false, format!("failing: {}", failed.join(", ")))
    }
}

fn planted_blocks(seed: u64) -> SimilarityMatrix {
    let n = 24;
    let mut rng = stream_rng(seed, 13);
    let mut labels: Vec<usize> = (0..n).map(|v| v % 4).collect();
    for i in (1..n).rev() {
        labels.swap(i, rng.random_range(0..=i));
    }
    let mut m = SimilarityMatrix::new(n);
    for x in 0..n {
        for y in x + 1..n {
            let base = if labels[x] == labels[y] { 0.1 } else { 1.0 };
            let theta = base * rng.random_range(0.9..1.1);
            m.insert(x, y, SimilarityValue::new(theta).unwrap())
                .unwrap();
        }
    }
    m
}

fn objective_dominance() -> Verdict {
    let mut wins = 0;
    for seed in 0..20u64 {
        let m = planted_blocks(seed);
        let a = kmeans_rows(&m, 4, seed).unwrap();
        let (het, ht) = ccc_heterogeneous(&a, 4, seed).unwrap();
        let (homo, mt) = homogeneous_baseline(&a, &het, seed).unwrap();
        let sh = objective_score(&het, &ht, &m).unwrap();
        let sm = objective_score(&homo, &mt, &m).unwrap();
        if sh > sm {
            wins += 1;
        }
    }
    verdict(
        wins >= 19,
        format!("hetero ranked higher in {wins}/20 seeds"),
    )
}

type Check<'a> = Box<dyn FnOnce() -> Verdict + 'a>;

fn main() {
    let started = Instant::now();
    let sweep_start = Instant::now();
    let runs = sweep();
    let sweep_took = sweep_start.elapsed();
    let criteria: Vec<(&str, Check<'_>)> = vec![
        ("oracle equivalence", Box::new(oracle_equivalence)),
        ("round bound", Box::new(|| round_bound(&runs, sweep_took))),
        ("full-scale overhead", Box::new(full_scale_overhead)),
        ("download scaling", Box::new(|| download_scaling(&runs))),
        ("label2 advantage", Box::new(label2_advantage)),
        ("dirichlet advantage", Box::new(dirichlet_advantage)),
        ("partition robustness", Box::new(partition_robustness)),
        ("property suites", Box::new(property_suites)),
        ("objective dominance", Box::new(objective_dominance)),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        let v = check();
        if !v.pass {
            failures += 1;
        }
        println!(
            "criterion {} {name}: {} ({})",
            i + 1,
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
    }
    println!(
        "acceptance: {} of 9 passed in {:.2?}",
        9 - failures,
        started.elapsed()
    );
    if failures > 0 {
        std::process::exit(1);
    }
}
