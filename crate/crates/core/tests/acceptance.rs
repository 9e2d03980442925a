//! Acceptance gate: runs every criterion at its stated tolerance and prints
//! one PASS/FAIL line each. MNIST criteria read the IDX files from
//! `$MNIST_DIR` or `<workspace>/data/mnist` (see scripts/fetch_mnist.sh).

mod common;

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use common::*;
use fromp::boundary::BoundaryConfig;
use fromp::data::LabeledDataset;
use fromp::experiment::{self, BenchmarkConfig, ExperimentConfig, GroupSummary};
use fromp::gp;
use fromp::likelihood;
use fromp::memory::{self, SelectionStrategy};
use fromp::metrics::{self, AccuracyMatrix};
use fromp::network::{self, FlatWeights};
use fromp::posterior::DiagGaussianPosterior;
use fromp::trainer::{self, KernelMode, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn load_config(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&workspace_root().join("configs").join(name)).expect("shipped config parses")
}

fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| workspace_root().join("data/mnist"));
    dir.join("train-images-idx3-ubyte").exists().then_some(dir)
}

fn with_mnist(mut cfg: ExperimentConfig, dir: &Path) -> ExperimentConfig {
    match &mut cfg.benchmark {
        BenchmarkConfig::SplitMnist { data_dir, .. } | BenchmarkConfig::PermutedMnist { data_dir, .. } => {
            *data_dir = dir.to_path_buf()
        }
        _ => unreachable!("MNIST config"),
    }
    cfg
}

fn max_seconds(g: &GroupSummary) -> f64 {
    g.runs.iter().map(|r| r.wall_clock_seconds).fold(0.0, f64::max)
}

fn toy_criterion(out: &Path) -> Outcome {
    let mut cfg = load_config("toy.json");
    cfg.seeds = (0..10).collect();
    cfg.evaluate_train = true;
    let groups = experiment::run_experiment(&cfg, Some(out), false, 1).expect("toy run");
    let g = &groups[0];
    let (mean, se) = g.final_avg_train().expect("train accuracy recorded");
    let secs = max_seconds(g);
    outcome(
        mean >= 0.99 && secs <= 120.0,
        format!("mean final train accuracy {:.4} ± {:.4} over 10 seeds (need ≥ 0.99), slowest seed {:.1}s (need ≤ 120s)", mean, se, secs),
    )
}

fn split_mnist_criterion() -> Outcome {
    let Some(dir) = mnist_dir() else {
        return outcome(false, "MNIST IDX files not found; set MNIST_DIR or run scripts/fetch_mnist.sh".into());
    };
    let cfg = with_mnist(load_config("split_mnist.json"), &dir);
    let groups = experiment::run_experiment(&cfg, None, false, experiment::threads_from_env()).expect("split run");
    let (mean, se) = groups[0].final_avg();
    let secs = max_seconds(&groups[0]);
    outcome(
        mean >= 0.985 && secs <= 45.0 * 60.0,
        format!(
            "mean final average accuracy {:.4} ± {:.4} over {} seeds (need ≥ 0.985), slowest seed {:.0}s (need ≤ 2700s)",
            mean,
            se,
            groups[0].runs.len(),
            secs
        ),
    )
}

fn permuted_mnist_criterion() -> Outcome {
    let Some(dir) = mnist_dir() else {
        return outcome(false, "MNIST IDX files not found; set MNIST_DIR or run scripts/fetch_mnist.sh".into());
    };
    let cfg = with_mnist(load_config("permuted_mnist.json"), &dir);
    let groups = experiment::run_experiment(&cfg, None, false, experiment::threads_from_env()).expect("permuted run");
    let (mean, _) = groups[0].final_avg();
    let tau = groups[0].runs[0].train.tau;
    outcome(
        mean >= 0.90,
        format!(
            "5 tasks x 10k, M=200, tau {:?}: final average accuracy {:.4} (need ≥ 0.90), {:.0}s",
            tau,
            mean,
            max_seconds(&groups[0])
        ),
    )
}

fn memory_ordering_criterion() -> Outcome {
    let mut cfg = load_config("toy.json");
    cfg.seeds = (0..10).collect();
    cfg.evaluate_train = true;
    cfg.write_checkpoints = false;
    cfg.memory_sizes = Some(vec![4, 10, 40]);
    cfg.tau_reference_memory = Some(cfg.train.memorable_per_task);
    let mut lines = Vec::new();
    let mut at4 = (0.0, 0.0);
    for v in [Variant::Fromp, Variant::Frorp] {
        cfg.variant = Some(v);
        let groups = experiment::run_experiment(&cfg, None, false, experiment::threads_from_env()).expect("toy memory sweep");
        let accs: Vec<String> = groups
            .iter()
            .map(|g| format!("M={} {:.4}", g.memorable_per_task, g.final_avg_train().unwrap().0))
            .collect();
        lines.push(format!("{} [{}]", v.name(), accs.join(", ")));
        let m4 = groups[0].final_avg_train().unwrap().0;
        if v == Variant::Fromp {
            at4.0 = m4;
        } else {
            at4.1 = m4;
        }
    }
    outcome(
        at4.0 >= at4.1,
        format!("mean final train accuracy over 10 seeds: {}; need FROMP ≥ FRORP at M=4", lines.join("; ")),
    )
}

fn perturbed(rng: &mut ChaCha8Rng, w: &FlatWeights, scale: f64) -> FlatWeights {
    FlatWeights::from_vec(w.as_slice().iter().map(|v| v + rng.random_range(-scale..scale)).collect())
}

fn gradient_oracle_criterion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut jac_worst, mut loss_worst, mut fr_worst) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let arch = random_arch(&mut rng, 500);
        let w = random_weights(&mut rng, &arch, 0.8);
        let head = rng.random_range(0..arch.heads().len());
        let width = arch.head_width(head).unwrap();

        let x: Vec<f64> = (0..arch.input_dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let jac = network::output_jacobian(&arch, &w, &x, head).unwrap();
        for k in 0..width {
            let fd = fd_gradient(&w, 1e-6, |v| network::forward(&arch, v, &x, head).unwrap()[k]);
            jac_worst = jac_worst.max(rel_err(&jac.row(k).to_vec(), &fd, 1e-8));
        }

        let n = rng.random_range(1..8);
        let inputs = random_inputs(&mut rng, n, arch.input_dim());
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..likelihood::class_count(width))).collect();
        let g = network::loss_grad(&arch, &w, inputs.view(), &labels, head).unwrap();
        let fd = fd_gradient(&w, 1e-6, |v| network::summed_loss(&arch, v, inputs.view(), &labels, head).unwrap());
        loss_worst = loss_worst.max(rel_err(&g, &fd, 1e-8));

        let variance: Vec<f64> = (0..arch.param_count()).map(|_| rng.random_range(0.01..1.0)).collect();
        let m = rng.random_range(1..6);
        let mem = random_inputs(&mut rng, m, arch.input_dim());
        let bank = single_task_bank(&arch, &w, &variance, &mem, head);
        let w_now = perturbed(&mut rng, &w, 0.3);
        let g = trainer::functional_grad(&arch, &w_now, &bank, KernelMode::Full).unwrap();
        let fd = fd_gradient(&w_now, 1e-6, |v| trainer::functional_penalty(&arch, v, &bank, KernelMode::Full).unwrap());
        fr_worst = fr_worst.max(rel_err(&g, &fd, 1e-8));
    }
    outcome(
        jac_worst <= 1e-4 && loss_worst <= 1e-5 && fr_worst <= 1e-5,
        format!(
            "100 random nets: worst relative error jacobian {:.2e} (≤ 1e-4), loss {:.2e} (≤ 1e-5), functional {:.2e} (≤ 1e-5)",
            jac_worst, loss_worst, fr_worst
        ),
    )
}

fn invariants_criterion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst_psd = f64::INFINITY;
    let mut symmetric = true;
    for _ in 0..50 {
        let arch = random_arch(&mut rng, 500);
        let w = random_weights(&mut rng, &arch, 1.0);
        let head = rng.random_range(0..arch.heads().len());
        let width = arch.head_width(head).unwrap();
        let class = if width == 1 { 0 } else { rng.random_range(0..width) };
        let variance: Vec<f64> = (0..arch.param_count()).map(|_| rng.random_range(1e-4..2.0)).collect();
        let n = rng.random_range(2..12);
        let inputs = random_inputs(&mut rng, n, arch.input_dim());
        let k = gp::kernel_matrix(&arch, &w, &variance, inputs.view(), head, class).unwrap();
        symmetric &= k == k.t();
        let trace: f64 = k.diag().sum();
        let min = symmetric_eigenvalues(&k).into_iter().fold(f64::INFINITY, f64::min);
        // Ratio to the allowed bound; ≥ −1 passes.
        worst_psd = worst_psd.min(if trace > 0.0 { min / (1e-8 * trace) } else { min });
    }

    let mut monotone = true;
    for _ in 0..20 {
        let arch = random_arch(&mut rng, 500);
        let head = rng.random_range(0..arch.heads().len());
        let classes = likelihood::class_count(arch.head_width(head).unwrap());
        let mut post = DiagGaussianPosterior::new(arch.param_count(), 1e-2).unwrap();
        for _task in 0..4 {
            let w = random_weights(&mut rng, &arch, 1.0);
            let n = rng.random_range(1..30);
            let data = LabeledDataset::new(
                random_inputs(&mut rng, n, arch.input_dim()),
                (0..n).map(|_| rng.random_range(0..classes)).collect(),
                classes,
            )
            .unwrap();
            let next = post.update_diag_covariance(&arch, &w, &data, head, None).unwrap();
            monotone &= next.variance().iter().zip(post.variance()).all(|(a, b)| *a <= b);
            post = next;
        }
    }

    let mut top_m_ok = true;
    for _ in 0..10 {
        let arch = random_arch(&mut rng, 500);
        let w = random_weights(&mut rng, &arch, 1.0);
        let head = rng.random_range(0..arch.heads().len());
        let classes = likelihood::class_count(arch.head_width(head).unwrap());
        let data = LabeledDataset::new(
            random_inputs(&mut rng, 1000, arch.input_dim()),
            (0..1000).map(|_| rng.random_range(0..classes)).collect(),
            classes,
        )
        .unwrap();
        let m = rng.random_range(1..=200);
        let sel = memory::select_memorable(&arch, &w, &data, head, 0, m, SelectionStrategy::TopRelevance, 0).unwrap();
        // Brute force: relevance from written-out link Jacobians, full sort.
        let mut pairs: Vec<(f64, usize)> = (0..1000)
            .map(|i| {
                let f = naive_forward(&arch, w.as_slice(), data.input(i).as_slice().unwrap(), head);
                (link_jacobian(&f).diag().sum(), i)
            })
            .collect();
        pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let mut expect: Vec<usize> = pairs[..m].iter().map(|p| p.1).collect();
        let mut got = sel.indices.clone();
        expect.sort_unstable();
        got.sort_unstable();
        top_m_ok &= expect == got;
    }
    outcome(
        symmetric && worst_psd >= -1.0 && monotone && top_m_ok,
        format!(
            "kernel symmetric on 50 states: {symmetric}, worst min-eigenvalue/(1e-8·trace) {worst_psd:.3e} (need ≥ −1); variance monotone: {monotone}; top-M equals brute force on 1000 points: {top_m_ok}"
        ),
    )
}

fn identity_kernel_criterion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let arch = random_arch(&mut rng, 500);
        let w = random_weights(&mut rng, &arch, 0.8);
        let head = rng.random_range(0..arch.heads().len());
        let variance = vec![0.5; arch.param_count()];
        let m = rng.random_range(1..6);
        let mem = random_inputs(&mut rng, m, arch.input_dim());
        let bank = single_task_bank(&arch, &w, &variance, &mem, head);
        let w_now = perturbed(&mut rng, &w, 0.3);
        let g = trainer::functional_grad(&arch, &w_now, &bank, KernelMode::Identity).unwrap();
        // ∇ ½‖p(w) − p'‖² = Σ_i J_iᵀ (∂p/∂f)ᵀ (p_i − p'_i)
        let snap = &bank.entries[0].snapshot;
        let mut expect = vec![0.0; arch.param_count()];
        for i in 0..mem.nrows() {
            let x = mem.row(i).to_vec();
            let f = naive_forward(&arch, w_now.as_slice(), &x, head);
            let p = probabilities(&f);
            let dp = link_jacobian(&f);
            let jac = network::output_jacobian(&arch, &w_now, &x, head).unwrap();
            for (c, &k) in snap.classes.iter().enumerate() {
                let diff = p[k] - snap.means[c][i];
                for j in 0..f.len() {
                    let coef = diff * dp[[k, j]];
                    for (e, jv) in expect.iter_mut().zip(jac.row(j)) {
                        *e += coef * jv;
                    }
                }
            }
        }
        let err = g
            .iter()
            .zip(&expect)
            .map(|(a, b)| (a - b).abs() / b.abs().max(1.0))
            .fold(0.0, f64::max);
        worst = worst.max(err);
    }
    outcome(worst <= 1e-10, format!("100 random states: worst deviation {worst:.2e} (need ≤ 1e-10)"))
}

fn boundary_criterion() -> Outcome {
    let base = load_config("boundary_glyph.json");
    let mut parts = Vec::new();
    let mut pass = true;
    for threshold in [1.2, 0.9, 1.5, 1.8] {
        let mut cfg = base.clone();
        cfg.boundary = Some(BoundaryConfig {
            threshold,
            ..BoundaryConfig::default()
        });
        let run = experiment::run_boundary_detection(&cfg, cfg.seeds[0]).expect("boundary run");
        let s = &run.summary;
        let ok = s.true_boundaries.len() == 9 && s.hits == 9 && s.false_positives == 0;
        pass &= ok;
        parts.push(format!("threshold {threshold}: {}/9 found, {} false", s.hits, s.false_positives));
    }
    outcome(pass, format!("10-task permuted glyph stream: {}", parts.join("; ")))
}

fn metrics_criterion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut exact = true;
    for _ in 0..20 {
        let t = rng.random_range(2..9);
        let mut r = AccuracyMatrix::new(t);
        let mut grid = vec![vec![0.0; t]; t];
        for (i, row) in grid.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate().take(i + 1) {
                *cell = (rng.random_range(0..=1000) as f64) / 1000.0;
                r.set(i, j, *cell);
            }
        }
        let ind: Vec<f64> = (0..t).map(|_| rng.random_range(0..=1000) as f64 / 1000.0).collect();
        let mut bwt = 0.0;
        for i in 0..t - 1 {
            bwt += grid[t - 1][i] - grid[i][i];
        }
        bwt /= (t - 1) as f64;
        let mut fwt = 0.0;
        for i in 1..t {
            fwt += grid[i][i] - ind[i];
        }
        fwt /= (t - 1) as f64;
        let mut avg = 0.0;
        for j in 0..t {
            avg += grid[t - 1][j];
        }
        avg /= t as f64;
        exact &= metrics::backward_transfer(&r).unwrap() == bwt;
        exact &= metrics::forward_transfer(&r, Some(&ind)).unwrap() == fwt;
        exact &= metrics::final_average(&r).unwrap() == avg;
    }
    outcome(exact, format!("20 random matrices, BWT/FWT/final average bit-equal to loop evaluation: {exact}"))
}

fn determinism_criterion(first: &Path, scratch: &Path) -> Outcome {
    let mut cfg = load_config("toy.json");
    cfg.seeds = vec![0];
    experiment::run_experiment(&cfg, Some(scratch), false, 1).expect("toy rerun");
    let rel = Path::new("FROMP/seed_0/accuracy_matrix.csv");
    let a = fs::read(first.join(rel)).expect("first run matrix");
    let b = fs::read(scratch.join(rel)).expect("second run matrix");
    outcome(a == b, format!("seed 0 accuracy_matrix.csv byte-identical across runs: {} ({} bytes)", a == b, a.len()))
}

fn main() {
    let toy_dir = tempfile::tempdir().unwrap();
    let rerun_dir = tempfile::tempdir().unwrap();
    type Check<'a> = (&'a str, Box<dyn FnOnce() -> Outcome + 'a>);
    let checks: Vec<Check> = vec![
        ("toy 2D benchmark", Box::new(|| toy_criterion(toy_dir.path()))),
        ("split MNIST", Box::new(split_mnist_criterion)),
        ("permuted MNIST desk scale", Box::new(permuted_mnist_criterion)),
        ("memory-size ordering", Box::new(memory_ordering_criterion)),
        ("gradient oracles", Box::new(gradient_oracle_criterion)),
        ("kernel and posterior invariants", Box::new(invariants_criterion)),
        ("identity-kernel reduction", Box::new(identity_kernel_criterion)),
        ("boundary detection", Box::new(boundary_criterion)),
        ("metrics formulas", Box::new(metrics_criterion)),
        ("determinism", Box::new(|| determinism_criterion(toy_dir.path(), rerun_dir.path()))),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in checks.into_iter().enumerate() {
        let start = Instant::now();
        let o = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        println!(
            "criterion {:>2} {:<32} {} ({:.0}s): {}",
            i + 1,
            name,
            if o.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            o.detail
        );
        if !o.pass {
            failed.push(i + 1);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all 10 criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
