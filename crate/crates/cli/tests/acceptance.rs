//! Acceptance suite: one pass/fail line per criterion, non-zero exit on any
//! failure. Run with `cargo test -p recurx-cli --test acceptance`.

use std::collections::HashMap;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use recurx::engine::{detect_cycle, run_recursion, ExplainerStep, Outcome, Property, PropertySuite};
use recurx::explain_feature::{FeatureMask, Scorer, SelectionRule};
use recurx::explain_proto::{
    decompose_functional_graph, random_system, self_consistency_report, Affine, Distance, Prototype, ProtoExplainer, ProtoState, PrototypeSystem,
};
use recurx::explain_sae::{run_linear_mc, sae_step, DynamicsTag, DynamicsTolerances, LinearSae, McConfig, Nonlinearity};
use recurx::linalg::{spectral_radius_estimate, Matrix};
use recurx::models::{generate_synthetic, train, Architecture, Classifier, Dataset, SyntheticKind, SyntheticSpec, TrainConfig};
use recurx::pipeline::{
    build_sweep_system, holdout_split, measure_proto_system, run_feature_pipeline, run_sae_pipeline, Evaluated, FeatureParams, ProtoParams, SaeParams,
};
use recurx_cli::{parse_config_str, run, RunOptions};

type Verdict = Result<String, String>;

fn check(violations: usize, what: &str, detail: String) -> Verdict {
    if violations == 0 {
        Ok(detail)
    } else {
        Err(format!("{violations} {what}; {detail}"))
    }
}

fn dataset(kind: SyntheticKind, classes: usize, dim: usize, per_class: usize, seed: u64) -> (Dataset, Dataset) {
    let data = generate_synthetic(&SyntheticSpec {
        kind,
        classes,
        dim,
        per_class,
        noise: 0.3,
        seed,
    })
    .unwrap();
    holdout_split(&data).unwrap()
}

fn model(train_set: &Dataset, arch: Architecture, seed: u64) -> Classifier {
    train(
        train_set,
        &TrainConfig {
            architecture: arch,
            seed,
            ..TrainConfig::default()
        },
    )
    .unwrap()
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let cfg = McConfig {
        dim: 10,
        contractive: 1000,
        expansive: 1000,
        budget: 5000,
        seed: 2024,
        tolerances: DynamicsTolerances::default(),
    };
    let records = run_linear_mc(&cfg, None).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed().as_secs_f64();
    let (contractive, expansive) = records.split_at(cfg.contractive);
    let bad_c = contractive.iter().filter(|r| r.max_eig_norm >= 1.0 || r.class != DynamicsTag::ContractsToZero).count();
    let bad_e = expansive
        .iter()
        .filter(|r| !(1.05..=2.0).contains(&r.max_eig_norm) || r.class != DynamicsTag::Diverges)
        .count();
    if elapsed >= 30.0 {
        return Err(format!("runtime {elapsed:.2}s >= 30s"));
    }
    check(
        bad_c + bad_e,
        "misclassified matrices",
        format!("{} contractive, {} expansive, {bad_c}+{bad_e} misclassified, {elapsed:.2}s", contractive.len(), expansive.len()),
    )
}

/// 500 feature traces from 10 models at ρ = 1, shared by criteria 2, 6, 7.
fn feature_traces() -> Vec<(usize, Evaluated<FeatureMask>)> {
    let suite = PropertySuite {
        properties: vec![Property::LabelPreserved, Property::CorrectLabel { label: None }],
    };
    let mut out = Vec::new();
    for m in 0..10u64 {
        let (train_set, test_set) = dataset(
            if m % 2 == 0 { SyntheticKind::GridPatterns } else { SyntheticKind::Blobs },
            4,
            64,
            50,
            100 + m,
        );
        let arch = if m % 3 == 0 { Architecture::Linear } else { Architecture::Mlp1 };
        let clf = model(&train_set, arch, 200 + m);
        let params = FeatureParams {
            scorer: if m % 2 == 0 { Scorer::Occlusion } else { Scorer::GradientInput },
            rule: if m % 4 < 2 { SelectionRule::TopK(4 + m as usize) } else { SelectionRule::Threshold(0.0) },
            max_remove_fraction: 1.0,
            budget: 1000,
        };
        let inputs: Vec<usize> = (0..50).collect();
        let run = run_feature_pipeline("acc", &test_set, &clf, &params, &suite, &inputs, m, None).unwrap();
        out.extend(run.traces.into_iter().map(|t| (64, t)));
    }
    out
}

fn criterion_2(traces: &[(usize, Evaluated<FeatureMask>)]) -> Verdict {
    let mut violations = 0;
    for (d, ev) in traces {
        let t = &ev.trace;
        let bounded = matches!(t.outcome, Outcome::FixedPoint { k } if k <= d + 1);
        let descending = t.states.windows(2).all(|w| w[1].is_subset(&w[0]));
        violations += usize::from(!bounded || !descending);
    }
    let max_k = traces.iter().filter_map(|(_, e)| e.trace.outcome.convergence_steps()).max().unwrap_or(0);
    check(violations, "traces violate the chain", format!("{} traces, max steps {max_k}", traces.len()))
}

/// Exhaustive hashing oracle for (entry, period).
fn hashing_oracle<T: Clone + Eq + std::hash::Hash>(start: T, f: impl Fn(&T) -> T) -> (usize, usize) {
    let mut seen = HashMap::new();
    let mut x = start;
    let mut i = 0;
    loop {
        if let Some(&j) = seen.get(&x) {
            return (j, i - j);
        }
        seen.insert(x.clone(), i);
        x = f(&x);
        i += 1;
    }
}

fn criterion_3() -> Verdict {
    let (train_set, test_set) = dataset(SyntheticKind::Blobs, 10, 16, 40, 7);
    let params = ProtoParams::default();
    let mut recursions = 0;
    let mut violations = 0;
    let mut systems = 0;
    for &n in &[10usize, 20, 50, 100] {
        for s in 0..50 {
            let sys = if s % 2 == 0 {
                build_sweep_system(&train_set, &params, n, s, 31).unwrap()
            } else {
                random_system(n, 8, 16, 10, (n * 1000 + s) as u64).unwrap()
            };
            systems += 1;
            for exclude_self in [false, true] {
                let starts = (0..10)
                    .map(|i| (Some(test_set.sample(i).0.to_vec()), ProtoState::Input))
                    .chain((0..n).map(|p| (None, ProtoState::Prototype(p))));
                for (input, start) in starts {
                    let step = ProtoExplainer {
                        system: &sys,
                        input,
                        exclude_self,
                    };
                    let f = |x: &ProtoState| step.apply(x).unwrap();
                    let brent = detect_cycle(start, f, n + 1).unwrap();
                    let oracle = hashing_oracle(start, f);
                    let trace = run_recursion(&step, start, 1000).unwrap();
                    let engine = match trace.outcome {
                        Outcome::FixedPoint { k } => (k, 1),
                        Outcome::Cycle { entry, period } => (entry, period),
                        _ => (usize::MAX, 0),
                    };
                    recursions += 1;
                    let ok = brent.entry + brent.period <= n + 1 && (brent.entry, brent.period) == oracle && engine == oracle;
                    violations += usize::from(!ok);
                }
            }
        }
    }
    check(violations, "recursions disagree or exceed |S|+1", format!("{systems} systems, {recursions} recursions"))
}

fn criterion_4() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut violations = 0;
    for _ in 0..100 {
        let n = rng.random_range(1..=64);
        let next: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let g = decompose_functional_graph(&next);
        // union-find components
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], x: usize) -> usize {
            let mut r = x;
            while p[r] != r {
                r = p[r];
            }
            p[x] = r;
            r
        }
        for (u, &v) in next.iter().enumerate() {
            let (a, b) = (find(&mut parent, u), find(&mut parent, v));
            parent[a] = b;
        }
        // cycles by walking n steps from every node
        let mut cycles_per_component: HashMap<usize, std::collections::BTreeSet<usize>> = HashMap::new();
        for u in 0..n {
            let mut x = u;
            for _ in 0..n {
                x = next[x];
            }
            let mut min = x;
            let mut y = next[x];
            while y != x {
                min = min.min(y);
                y = next[y];
            }
            cycles_per_component.entry(find(&mut parent, u)).or_default().insert(min);
        }
        let one_each = cycles_per_component.values().all(|c| c.len() == 1);
        let components = cycles_per_component.len();
        let matches = g.cycles.len() == components && g.cycles.iter().all(|c| c.iter().all(|&v| next[v] == c[(c.iter().position(|&w| w == v).unwrap() + 1) % c.len()]));
        violations += usize::from(!one_each || !matches);
    }
    check(violations, "graphs violate the one-cycle law", "100 functional graphs on <= 64 states".into())
}

fn basis_system(n: usize, classes: usize) -> PrototypeSystem {
    let prototypes = (0..n)
        .map(|i| {
            let mut latent = vec![0.0; n];
            latent[i] = 1.0;
            Prototype { latent, class: i % classes }
        })
        .collect();
    PrototypeSystem::new(prototypes, Affine::identity(n), Affine::identity(n), Distance::Euclidean, classes).unwrap()
}

fn criterion_5() -> Verdict {
    let identity = self_consistency_report(&basis_system(8, 3)).unwrap();
    if identity.fraction != 1.0 {
        return Err(format!("identity composition fraction {}", identity.fraction));
    }
    let mut dec = Matrix::identity(8);
    dec.set(5, 5, 0.0);
    dec.set(5, 1, 1.0);
    let lossy = basis_system(8, 3).with_decoder(Affine::new(dec, vec![0.0; 8]).unwrap()).unwrap();
    let r = self_consistency_report(&lossy).unwrap();
    let flagged: Vec<usize> = (0..8).filter(|&p| !r.flags[p]).collect();
    if flagged != vec![5] {
        return Err(format!("lossy decoder flagged {flagged:?}, expected [5]"));
    }
    let (train_set, _) = dataset(SyntheticKind::Blobs, 10, 16, 40, 1);
    let params = ProtoParams::default();
    let sizes = [10usize, 20, 50, 100];
    let means: Vec<f64> = sizes
        .iter()
        .map(|&n| {
            (0..20)
                .map(|s| self_consistency_report(&build_sweep_system(&train_set, &params, n, s, 5).unwrap()).unwrap().fraction)
                .sum::<f64>()
                / 20.0
        })
        .collect();
    let increases = means.windows(2).filter(|w| w[1] > w[0]).count();
    let shown: Vec<String> = sizes.iter().zip(&means).map(|(n, m)| format!("|S|={n}: {m:.3}")).collect();
    check(increases, "increases in mean self-consistency", format!("identity 1.0, flagged [5], sweep {}", shown.join(", ")))
}

fn criterion_6(features: &[(usize, Evaluated<FeatureMask>)]) -> Verdict {
    let mut certified = 0;
    let mut violations = 0;
    let mut tally = |c: bool, e: Option<bool>| {
        certified += usize::from(c);
        violations += usize::from(c && e != Some(true));
    };
    for (_, ev) in features {
        tally(ev.report.certified, ev.extension_holds);
    }
    let (train_set, test_set) = dataset(SyntheticKind::Blobs, 10, 16, 40, 3);
    let params = ProtoParams {
        test_inputs: 30,
        ..ProtoParams::default()
    };
    let suite = PropertySuite {
        properties: vec![Property::LabelPreserved, Property::CorrectLabel { label: None }],
    };
    for &n in &[10usize, 50] {
        for s in 0..3 {
            let sys = build_sweep_system(&train_set, &params, n, s, 9).unwrap();
            let run = measure_proto_system("acc", &sys, &test_set, &params, &suite, n, s, 9).unwrap();
            for ev in &run.traces {
                tally(ev.report.certified, ev.extension_holds);
            }
        }
    }
    let (train_set, test_set) = dataset(SyntheticKind::GridPatterns, 4, 64, 50, 12);
    let clf = model(&train_set, Architecture::Mlp1, 13);
    let inputs: Vec<usize> = (0..50).collect();
    let sae_suite = PropertySuite {
        properties: vec![Property::CorrectLabel { label: None }, Property::TopKAgreement { k: 3, label: None }],
    };
    for (seed, scale) in [(1u64, 0.3), (2, 0.5), (3, 1.0)] {
        let sae = contractive_sae(16, 32, seed, scale);
        let params = SaeParams {
            budget: 1000,
            tolerances: DynamicsTolerances::default(),
        };
        let run = run_sae_pipeline("acc", &test_set, &clf, &sae, &params, &sae_suite, &inputs, seed, None).unwrap();
        for ev in &run.traces {
            tally(ev.report.certified, ev.extension_holds);
        }
    }
    check(violations, "certificates lost after 100 more steps", format!("{certified} certified traces across feature, proto and sae"))
}

/// A top-k SAE whose composition is scaled toward contraction.
fn contractive_sae(z: usize, h: usize, seed: u64, scale: f64) -> LinearSae {
    let base = LinearSae::random(z, h, 8, Nonlinearity::TopK, seed).unwrap();
    LinearSae::new(base.encoder().clone(), base.decoder().scaled(scale), 8, Nonlinearity::TopK).unwrap()
}

fn criterion_7(traces: &[(usize, Evaluated<FeatureMask>)]) -> Verdict {
    let mut converged = 0;
    let mut violations = 0;
    for (_, ev) in traces {
        if let Some(fp) = ev.trace.fixed_point() {
            converged += 1;
            violations += usize::from(ev.trace.states.iter().any(|s| fp.len() > s.len()));
        }
    }
    check(violations, "fixed points larger than an iterate", format!("{converged} converged traces"))
}

fn criterion_8() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    // gradients
    let mut worst_grad: f64 = 0.0;
    for case in 0..100u64 {
        let arch = if case % 2 == 0 { Architecture::Mlp1 } else { Architecture::Linear };
        let dim = rng.random_range(2..12);
        let classes = rng.random_range(2..6);
        let clf = Classifier::random(arch, dim, 8, classes, case);
        let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let target = rng.random_range(0..classes);
        let g = clf.input_gradient(&x, target).unwrap();
        let log_p = |x: &[f64]| {
            let l = clf.predict(x).unwrap().logits;
            let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            l[target] - m - l.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
        };
        let h = 1e-5;
        let scale = g.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-12);
        for i in 0..dim {
            let (mut up, mut down) = (x.clone(), x.clone());
            up[i] += h;
            down[i] -= h;
            let fd = (log_p(&up) - log_p(&down)) / (2.0 * h);
            worst_grad = worst_grad.max((g[i] - fd).abs() / scale);
        }
    }
    // spectral radius against normalized repeated squaring
    let mut worst_radius: f64 = 0.0;
    for case in 0..50u64 {
        let n = rng.random_range(2..11);
        let m = Matrix::random_gaussian(n, n, rng.random_range(0.2..2.0), &mut rng);
        let r = spectral_radius_estimate(&m, 20_000, 1e-14, case).unwrap();
        let expected = radius_by_squaring(&m);
        worst_radius = worst_radius.max((r - expected).abs() / expected.max(1e-300));
    }
    // sae_step against a naive triple loop
    let mut worst_step: f64 = 0.0;
    for case in 0..50u64 {
        let z = rng.random_range(2..12);
        let h = rng.random_range(z..3 * z + 2);
        let k = rng.random_range(1..=h);
        let nl = if case % 2 == 0 { Nonlinearity::TopK } else { Nonlinearity::Identity };
        let sae = LinearSae::random(z, h, k, nl, case).unwrap();
        let x: Vec<f64> = (0..z).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = sae_step(&sae, &x).unwrap().z;
        let mut hid: Vec<f64> = (0..h).map(|j| (0..z).map(|i| x[i] * sae.encoder().get(i, j)).sum()).collect();
        if nl == Nonlinearity::TopK {
            let mut order: Vec<usize> = (0..h).collect();
            order.sort_by(|&a, &b| hid[b].abs().partial_cmp(&hid[a].abs()).unwrap().then(a.cmp(&b)));
            for &j in &order[k..] {
                hid[j] = 0.0;
            }
        }
        for (i, g) in got.iter().enumerate() {
            let naive: f64 = (0..h).map(|j| hid[j] * sae.decoder().get(j, i)).sum();
            worst_step = worst_step.max((g - naive).abs());
        }
    }
    let detail = format!("gradient rel {worst_grad:.2e}, radius rel {worst_radius:.2e}, sae_step abs {worst_step:.2e}");
    if worst_grad <= 1e-4 && worst_radius <= 1e-5 && worst_step <= 1e-10 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// `‖M^(2^s)‖^(1/2^s)` with renormalization after every squaring.
fn radius_by_squaring(m: &Matrix) -> f64 {
    let norm = |a: &Matrix| (0..a.rows()).flat_map(|i| a.row(i).to_vec()).map(|v| v * v).sum::<f64>().sqrt();
    let mut a = m.clone();
    let f = norm(&a);
    if f == 0.0 {
        return 0.0;
    }
    a = a.scaled(1.0 / f);
    let mut log_norm = f.ln();
    let mut power = 1.0;
    for _ in 0..40 {
        a = a.matmul(&a).unwrap();
        log_norm *= 2.0;
        power *= 2.0;
        let f = norm(&a);
        if f == 0.0 {
            return 0.0;
        }
        a = a.scaled(1.0 / f);
        log_norm += f.ln();
    }
    (log_norm / power).exp()
}

const SAE_CONFIG: &str = r#"
kind = "sae"
seed = 21
budget = 400
[dataset]
kind = "grid_patterns"
classes = 4
dim = 36
per_class = 20
[model]
hidden = 12
epochs = 15
[sae]
h_dim = 24
k = 6
epochs = 60
inputs = 12
"#;

const SAE_HEADER: &str = "dataset,setting,traces,iterations_mean,iterations_std,correctness,correctness_top3,jaccard_start_step1,jaccard_start_fixed";

fn criterion_9(dir: &Path) -> Verdict {
    let cfg = parse_config_str(SAE_CONFIG, dir).map_err(|e| e.to_string())?;
    let out = dir.join("c9");
    run(&cfg, &RunOptions { out: Some(out.clone()), ..RunOptions::default() }).map_err(|e| e.to_string())?;
    let text = std::fs::read_to_string(out.join("sae_table.csv")).map_err(|e| e.to_string())?;
    let mut lines = text.lines();
    if lines.next() != Some(SAE_HEADER) {
        return Err(format!("header mismatch: {:?}", text.lines().next()));
    }
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let settings: Vec<&str> = rows.iter().map(|r| r[1]).collect();
    if settings != ["base", "single", "double", "constant"] {
        return Err(format!("settings {settings:?}"));
    }
    if rows.iter().any(|r| r.len() != SAE_HEADER.split(',').count()) {
        return Err("ragged rows".into());
    }
    let base_fixed: f64 = rows[0][8].parse().map_err(|_| format!("base jaccard_start_fixed `{}`", rows[0][8]))?;
    if base_fixed != 1.0 {
        return Err(format!("base row Jaccard(a, a) = {base_fixed}"));
    }
    Ok("four rows, exact header, base Jaccard(a, a) = 1".into())
}

const DETERMINISM_CONFIGS: [&str; 4] = [
    r#"
kind = "feature"
seed = 5
[dataset]
dim = 36
per_class = 20
[model]
epochs = 10
[feature]
inputs = 20
"#,
    r#"
kind = "proto"
seed = 5
[dataset]
kind = "blobs"
classes = 5
dim = 8
per_class = 20
[proto]
n_prototypes = [10, 20]
systems = 3
test_inputs = 10
"#,
    SAE_CONFIG,
    r#"
kind = "linear_mc"
seed = 5
[linear_mc]
contractive = 100
expansive = 100
"#,
];

fn criterion_10(dir: &Path) -> Verdict {
    let mut compared = 0;
    for (i, text) in DETERMINISM_CONFIGS.iter().enumerate() {
        let cfg = parse_config_str(text, dir).map_err(|e| e.to_string())?;
        let mut outputs = Vec::new();
        for (run_i, jobs) in [(0, Some(1)), (1, Some(4))] {
            let out = dir.join(format!("c10_{i}_{run_i}"));
            run(&cfg, &RunOptions { out: Some(out.clone()), jobs, ..RunOptions::default() }).map_err(|e| e.to_string())?;
            outputs.push(out);
        }
        let mut names: Vec<String> = std::fs::read_dir(&outputs[0])
            .map_err(|e| e.to_string())?
            .filter_map(|e| e.ok()?.file_name().into_string().ok())
            .filter(|n| n.ends_with(".csv"))
            .collect();
        names.sort();
        for name in names {
            let a = std::fs::read(outputs[0].join(&name)).map_err(|e| e.to_string())?;
            let b = std::fs::read(outputs[1].join(&name)).map_err(|e| e.to_string())?;
            if a != b {
                return Err(format!("{} differs for `{}`", name, cfg.kind.as_str()));
            }
            compared += 1;
        }
    }
    Ok(format!("{compared} CSV files byte-identical across reruns with 1 and 4 jobs"))
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temp dir");
    let features = feature_traces();
    let criteria: Vec<(&str, Box<dyn Fn() -> Verdict + '_>)> = vec![
        ("linear Monte Carlo split", Box::new(criterion_1)),
        ("descending chain at rho = 1", Box::new(|| criterion_2(&features))),
        ("prototype pigeonhole and Brent", Box::new(criterion_3)),
        ("one cycle per component", Box::new(criterion_4)),
        ("prototype self-consistency", Box::new(criterion_5)),
        ("certificates up to infinity", Box::new(|| criterion_6(&features))),
        ("fixed-point cardinality", Box::new(|| criterion_7(&features))),
        ("numerical oracles", Box::new(criterion_8)),
        ("sae Jaccard table", Box::new(|| criterion_9(tmp.path()))),
        ("determinism", Box::new(|| criterion_10(tmp.path()))),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let verdict = f();
        let secs = start.elapsed().as_secs_f64();
        match verdict {
            Ok(detail) => println!("criterion {:>2} PASS  {name} ({detail}) [{secs:.2}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name} ({detail}) [{secs:.2}s]", i + 1);
            }
        }
    }
    println!("{} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
