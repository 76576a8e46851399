//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Criteria 1, 2, 6, 8 and the fidelity half of 7 are contracts: a FAIL
//! there makes this target exit nonzero. The rest measure learning trends on
//! synthetic tasks; they report PASS/FAIL against pinned thresholds and only
//! fail the target if the pipeline itself breaks.
//!
//! Pass criterion numbers as arguments to run a subset:
//! `cargo test --release --test acceptance -- 3 5`.

mod common;

use std::time::{Duration, Instant};

use fedtta_core::data::{make_public_dataset, ClientDataset, GaussianTask};
use fedtta_core::federation::{aggregate_average, run_training, TrainingRun};
use fedtta_core::fedtta::{inner_adapt, test_adapt, EarlyStopper};
use fedtta_core::harness::{build_data, evaluate_tests, run_hetero_sweep, run_method, SeedData};
use fedtta_core::hetero::{communicate, kd_loss, run_hetero, ClientLogits, HeteroClient};
use fedtta_core::models::forward_prediction;
use fedtta_core::tensor::{ops, Graph, Tensor};
use fedtta_core::{
    EnsembleKnowledge, ExperimentConfig, FamilyName, FederationConfig, GlobalModel, Method,
    MlpSpec, ModelFamily, ModelParams, Patience, Schedule, TaskSpec, TestAdaptConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Pinned thresholds.
const ORACLE_BUDGET: Duration = Duration::from_secs(30);
const FIRST_ORDER_REL: f64 = 1e-5;
const SECOND_ORDER_REL: f64 = 1e-4;
const TREND_BUDGET: Duration = Duration::from_secs(300);
const TREND_GAP: f64 = 0.05;
const SHIFT_MARGIN: f64 = 0.02;
const SIZE_DROP: f64 = 0.10;
const KD_KL: f64 = 0.01;
const AGG_TOL: f64 = 1e-15;
const ROTATION_GAP: f64 = 0.02;
const SEEDS: [u64; 3] = [0, 1, 2];

/// Tuned rates shared by the learning runs.
const FEDERATION: &str = r#"
[federation]
rounds = 100
eta_inner = 0.03
eta_outer = 0.3
eta_adapt = 0.01
meta_clip = 5.0
"#;

fn config(scheme: &str, clients: (usize, usize), spc: usize, extra: &str) -> ExperimentConfig {
    let text = format!(
        r#"
schema_version = 1
output_dir = "unused"
seeds = [0, 1, 2]
{extra}
[task]
n_classes = 10
dim = 20

[partition]
n_train_clients = {}
n_test_clients = {}
samples_per_client = {spc}

[partition.scheme]
{scheme}
{FEDERATION}"#,
        clients.0, clients.1
    );
    ExperimentConfig::from_toml_str(&text).expect("acceptance config is valid")
}

struct Verdict {
    pass: bool,
    contract: bool,
    detail: String,
}

impl Verdict {
    fn contract(pass: bool, detail: String) -> Self {
        Self {
            pass,
            contract: true,
            detail,
        }
    }

    fn trend(pass: bool, detail: String) -> Self {
        Self {
            pass,
            contract: false,
            detail,
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn pct(v: &[f64]) -> String {
    let each: Vec<String> = v.iter().map(|x| format!("{:.2}", 100.0 * x)).collect();
    format!("{:.2} [{}]", 100.0 * mean(v), each.join(" "))
}

fn model_bytes(m: &GlobalModel) -> Vec<u8> {
    let mut buf = Vec::new();
    m.write_to(&mut buf).unwrap();
    buf
}

fn run_bits(run: &TrainingRun) -> (Vec<u8>, Vec<u64>) {
    let vals = run
        .rounds
        .iter()
        .flat_map(|r| r.records.iter().map(|e| e.accuracy.to_bits()))
        .collect();
    (model_bytes(&run.best.model), vals)
}

fn c1_gradient_oracle() -> Verdict {
    let start = Instant::now();
    let mut worst_first = 0.0_f64;
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..5 {
        for (name, f, shapes, (lo, hi)) in common::op_table() {
            let inputs: Vec<Tensor> = shapes
                .iter()
                .map(|s| common::uniform(&mut rng, s, lo, hi))
                .collect();
            let check = common::check_op(f, &inputs, FIRST_ORDER_REL);
            worst_first = worst_first.max(check.max_abs_err);
            if !check.passed() {
                failures.push(format!("{name}#{trial}"));
            }
        }
    }
    let mut worst_second = 0.0_f64;
    for (name, check) in common::second_order_checks(SECOND_ORDER_REL) {
        worst_second = worst_second.max(check.max_abs_err);
        if !check.passed() {
            failures.push(format!("{name} (second order)"));
        }
    }
    for mu in [0.0, 0.7] {
        let (check, phi_nonzero) = common::check_meta_gradient(mu);
        worst_second = worst_second.max(check.max_abs_err);
        if !check.passed() || !phi_nonzero {
            failures.push(format!("meta objective mu={mu}"));
        }
    }
    let elapsed = start.elapsed();
    Verdict::contract(
        failures.is_empty() && elapsed < ORACLE_BUDGET,
        format!(
            "{} ops, max abs err first order {worst_first:.1e}, second order and meta objective {worst_second:.1e}, {:.1}s{}",
            common::op_table().len(),
            elapsed.as_secs_f64(),
            if failures.is_empty() {
                String::new()
            } else {
                format!(", failed: {}", failures.join(", "))
            }
        ),
    )
}

fn small_config() -> ExperimentConfig {
    let mut cfg = config("kind = \"pathological\"\nk_labels = 2", (6, 4), 60, "");
    cfg.federation.rounds = 4;
    cfg.federation.local_iters = 5;
    cfg
}

fn c2_equivalence_ladder() -> Verdict {
    let cfg = small_config();
    let data = build_data(&cfg, 3).unwrap();
    let mut ladder = cfg.clone();
    ladder.federation.mu = 0.0;
    ladder.federation.test_max_steps = 1;
    ladder.federation.patience = Patience::Unbounded;
    ladder.federation.fedprox_mu = 0.0;
    let run = |m| run_method(&ladder, m, &data, Schedule::Sequential).unwrap();
    let same = |a: Method, b: Method| {
        let (x, y) = (run(a), run(b));
        run_bits(&x.run) == run_bits(&y.run)
            && x.test_records
                .iter()
                .map(|e| e.accuracy.to_bits())
                .eq(y.test_records.iter().map(|e| e.accuracy.to_bits()))
    };
    let pp = same(Method::FedTtaPlusPlus, Method::FedTta);
    let prox = same(Method::FedProx, Method::FedAvg);

    let family = ModelFamily::new(FamilyName::Medium, 20, 10).unwrap();
    let (psi, phi) = family.init(5);
    let task = GaussianTask::new(&TaskSpec::new(10, 20), 5).unwrap();
    let public = make_public_dataset(&task, 50, 5).unwrap();
    let fed = FederationConfig::default();
    let knowledge =
        EnsembleKnowledge::aggregate(&[communicate(&psi, &phi, &public, &fed).unwrap()]).unwrap();
    let graph = Graph::new();
    let (p, f) = (psi.attach(&graph), phi.attach(&graph));
    let kd = kd_loss(&p, &f, public.features(), &knowledge, 0.0, fed.eta_inner)
        .unwrap()
        .item();
    let tilde = inner_adapt(&p, &f, public.features(), fed.eta_inner).unwrap();
    let z = forward_prediction(&tilde, public.features()).unwrap();
    let per = ops::mean(&ops::kl_divergence_logits(&z, knowledge.f_per()).unwrap()).item();
    let kd_ok = kd.to_bits() == per.to_bits() && kd.abs() < 1e-12;
    Verdict::contract(
        pp && prox && kd_ok,
        format!(
            "fedtta++(mu=0,E=1,unbounded)==fedtta bitwise: {pp}; fedprox(mu=0)==fedavg bitwise: {prox}; \
             kd(lambda=0)==personalized term: {kd_ok} ({kd:.1e})"
        ),
    )
}

struct TrendRuns {
    cfg: ExperimentConfig,
    elapsed: Duration,
    fedtta_models: Vec<GlobalModel>,
    train_bytes: Vec<Vec<u8>>,
    test: Vec<(Method, Vec<f64>)>,
}

fn train_bytes(data: &SeedData) -> Vec<u8> {
    let mut buf = Vec::new();
    for d in &data.train {
        d.write_to(&mut buf).unwrap();
    }
    buf
}

fn trend_runs() -> TrendRuns {
    let cfg = config("kind = \"pathological\"\nk_labels = 2", (20, 20), 100, "");
    let methods = [
        Method::FedAvg,
        Method::FedTta,
        Method::FedTtaProx,
        Method::FedTtaPlusPlus,
    ];
    let start = Instant::now();
    let mut test: Vec<(Method, Vec<f64>)> = methods.iter().map(|m| (*m, Vec::new())).collect();
    let mut fedtta_models = Vec::new();
    let mut bytes = Vec::new();
    for seed in SEEDS {
        let data = build_data(&cfg, seed).unwrap();
        bytes.push(train_bytes(&data));
        for (m, accs) in test.iter_mut() {
            let out = run_method(&cfg, *m, &data, Schedule::Parallel).unwrap();
            assert!(out.test.is_finite());
            if *m == Method::FedTta {
                fedtta_models.push(out.run.best.model.clone());
            }
            accs.push(out.test);
        }
    }
    TrendRuns {
        cfg,
        elapsed: start.elapsed(),
        fedtta_models,
        train_bytes: bytes,
        test,
    }
}

fn c3_trend(runs: &TrendRuns) -> Verdict {
    let get = |m| mean(&runs.test.iter().find(|(x, _)| *x == m).unwrap().1);
    let (avg, tta, prox, pp) = (
        get(Method::FedAvg),
        get(Method::FedTta),
        get(Method::FedTtaProx),
        get(Method::FedTtaPlusPlus),
    );
    let order = pp >= prox && prox >= tta && tta > avg;
    let gap = tta - avg >= TREND_GAP;
    let rows: Vec<String> = runs
        .test
        .iter()
        .map(|(m, v)| format!("{m} {}", pct(v)))
        .collect();
    Verdict::trend(
        order && gap && runs.elapsed < TREND_BUDGET,
        format!(
            "{}; ordering {}, fedtta-fedavg {:+.2} pts (need {:.0}), {:.0}s",
            rows.join("; "),
            if order { "holds" } else { "violated" },
            100.0 * (tta - avg),
            100.0 * TREND_GAP,
            runs.elapsed.as_secs_f64()
        ),
    )
}

fn c5_data_size(runs: &TrendRuns) -> Verdict {
    let mut reduced_cfg = runs.cfg.clone();
    reduced_cfg.test_fraction = 0.1;
    let full = &runs
        .test
        .iter()
        .find(|(m, _)| *m == Method::FedTta)
        .unwrap()
        .1;
    let mut reduced = Vec::new();
    for (i, seed) in SEEDS.into_iter().enumerate() {
        let data = build_data(&reduced_cfg, seed).unwrap();
        // Only test clients shrink, so the trained model carries over.
        assert_eq!(train_bytes(&data), runs.train_bytes[i]);
        let model = &runs.fedtta_models[i];
        reduced.push(
            evaluate_tests(&reduced_cfg, Method::FedTta, model, 0, &data.tests)
                .unwrap()
                .1,
        );
    }
    let drop = mean(full) - mean(&reduced);
    Verdict::trend(
        drop <= SIZE_DROP,
        format!(
            "fedtta test at fraction 1.0 {}, at 0.1 {}, drop {:.2} pts (limit {:.0})",
            pct(full),
            pct(&reduced),
            100.0 * drop,
            100.0 * SIZE_DROP
        ),
    )
}

fn c4_dirichlet_shift() -> Verdict {
    let alphas = [0.01, 0.1, 0.5];
    let cfgs: Vec<ExperimentConfig> = alphas
        .iter()
        .map(|a| {
            config(
                &format!("kind = \"client_dirichlet\"\nalpha = 0.1\ntest_alpha = {a}"),
                (20, 20),
                100,
                "",
            )
        })
        .collect();
    let mut acc = vec![Vec::new(); alphas.len()];
    for seed in SEEDS {
        let data: Vec<SeedData> = cfgs.iter().map(|c| build_data(c, seed).unwrap()).collect();
        let out = run_method(&cfgs[0], Method::FedTta, &data[0], Schedule::Parallel).unwrap();
        for (i, d) in data.iter().enumerate() {
            // Training clients do not depend on the test concentration.
            assert_eq!(train_bytes(d), train_bytes(&data[0]));
            let (_, a) =
                evaluate_tests(&cfgs[i], Method::FedTta, &out.run.best.model, 0, &d.tests).unwrap();
            acc[i].push(a);
        }
    }
    let margin = mean(&acc[0]) - mean(&acc[2]);
    let rows: Vec<String> = alphas
        .iter()
        .zip(&acc)
        .map(|(a, v)| format!("alpha {a}: {}", pct(v)))
        .collect();
    Verdict::trend(
        margin >= SHIFT_MARGIN,
        format!(
            "fedtta test {}; alpha 0.01 minus 0.5 {:+.2} pts (need {:.0})",
            rows.join("; "),
            100.0 * margin,
            100.0 * SHIFT_MARGIN
        ),
    )
}

/// Independent statement of the stopping rule: stop once `patience` steps
/// pass without a strict new minimum; keep the first argmin seen so far.
fn reference_stop(trace: &[f64], patience: Patience) -> (usize, usize) {
    let mut best = 0;
    for (t, &e) in trace.iter().enumerate() {
        if e < trace[best] {
            best = t;
        }
        if let Patience::Steps(p) = patience {
            if t - best >= p {
                return (t, best);
            }
        }
    }
    let last = trace.len() - 1;
    (
        last,
        if patience == Patience::Unbounded {
            last
        } else {
            best
        },
    )
}

fn c6_early_stop() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut bad = Vec::new();
    for i in 0..100 {
        let len = rng.random_range(1..60);
        // Coarse levels produce ties and plateaus.
        let levels = rng.random_range(2..12) as f64;
        let trace: Vec<f64> = (0..len)
            .map(|_| (rng.random_range(0.0..1.0) * levels).floor() / levels)
            .collect();
        let patience = if rng.random_bool(0.15) {
            Patience::Unbounded
        } else {
            Patience::Steps(rng.random_range(1..10))
        };
        let mut stopper = EarlyStopper::new(patience);
        let mut stop = len - 1;
        for (t, &e) in trace.iter().enumerate() {
            if stopper.observe(t, e) {
                stop = t;
                break;
            }
        }
        if (stop, stopper.selected_step()) != reference_stop(&trace, patience) {
            bad.push(format!("trace {i}"));
        }
    }

    // The same contract end to end: the returned model is the one at the
    // selected step, and the stop lands `patience` steps after the last new
    // minimum.
    let x = GaussianTask::new(&TaskSpec::new(5, 6), 1)
        .unwrap()
        .sample(40, 2);
    for i in 0..100u64 {
        let psi = ModelParams::init(&MlpSpec::new(vec![6, 16, 5]).unwrap(), 100 + i);
        let phi = ModelParams::init(&MlpSpec::new(vec![5, 8, 1]).unwrap(), 300 + i);
        let patience = Patience::Steps(1 + (i as usize % 5));
        let cfg = TestAdaptConfig {
            max_steps: 25,
            patience,
            eta_inner: 2.0,
            run_full: false,
        };
        let out = test_adapt(&psi, &phi, x.features(), &cfg, None).unwrap();
        let entropies: Vec<f64> = out.trace.iter().map(|r| r.entropy).collect();
        let expected = reference_stop(&entropies, patience);
        let replay = TestAdaptConfig {
            max_steps: out.selected_step.max(1),
            patience: Patience::Unbounded,
            ..cfg
        };
        let at_selected = if out.selected_step == 0 {
            psi.clone()
        } else {
            test_adapt(&psi, &phi, x.features(), &replay, None)
                .unwrap()
                .params
        };
        if (out.stopped_at, out.selected_step) != expected
            || out.params != at_selected
            || out.non_finite
        {
            bad.push(format!("model {i}"));
        }
    }
    Verdict::contract(
        bad.is_empty(),
        format!(
            "100 random traces and 100 adaptation runs, {} mismatches{}",
            bad.len(),
            if bad.is_empty() {
                String::new()
            } else {
                format!(": {}", bad.join(", "))
            }
        ),
    )
}

fn c7_distillation() -> (Verdict, Verdict) {
    let mut cfg = config("kind = \"iid\"", (2, 2), 100, "");
    cfg.federation.rounds = 3;
    cfg.federation.lambda = 0.8;
    cfg.federation.digest_steps = 50;
    let data = build_data(&cfg, 0).unwrap();
    let family = ModelFamily::new(FamilyName::Medium, 20, 10).unwrap();
    let clients: Vec<HeteroClient> = data
        .clients
        .iter()
        .map(|c: &ClientDataset| HeteroClient::new(family.clone(), c.clone(), 0))
        .collect();
    let public = make_public_dataset(&data.task, cfg.hetero.public_samples, 0).unwrap();
    let run = run_hetero(clients, &public, &cfg.federation, 0, Schedule::Parallel).unwrap();
    let kls: Vec<f64> = run.rounds.iter().map(|r| r.mean_digest_kl).collect();
    let worst = kls.iter().copied().fold(0.0, f64::max);
    let fidelity = Verdict::contract(
        worst <= KD_KL,
        format!(
            "2 homogeneous clients, lambda 0.8, {} public samples, {} digest steps: personalized KL after digest per round {:?}, limit {KD_KL}",
            cfg.hetero.public_samples,
            cfg.federation.digest_steps,
            kls.iter().map(|k| format!("{k:.1e}")).collect::<Vec<_>>()
        ),
    );

    let mut sweep_cfg = config("kind = \"pathological\"\nk_labels = 2", (6, 6), 100, "");
    sweep_cfg.federation.rounds = 10;
    sweep_cfg.hetero.public_samples = 200;
    let lambdas = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];
    let (_, summaries) = run_hetero_sweep(&sweep_cfg, &lambdas, Schedule::Parallel).unwrap();
    let base = summaries[0].test_stat.mean;
    let best = summaries[1..]
        .iter()
        .max_by(|a, b| a.test_stat.mean.total_cmp(&b.test_stat.mean))
        .unwrap();
    let rows: Vec<String> = summaries
        .iter()
        .map(|s| format!("{}: {}", s.lambda, pct(&s.test)))
        .collect();
    let sweep = Verdict::trend(
        best.test_stat.mean > base
            && summaries
                .iter()
                .all(|s| s.test.iter().all(|t| t.is_finite())),
        format!(
            "test by lambda {}; best lambda>0 is {} at {:+.2} pts over lambda 0",
            rows.join("; "),
            best.lambda,
            100.0 * (best.test_stat.mean - base)
        ),
    );
    (fidelity, sweep)
}

fn c8_federation_invariants() -> Verdict {
    let spec = MlpSpec::new(vec![7, 9, 4]).unwrap();
    let updates: Vec<ModelParams> = (0..7).map(|s| ModelParams::init(&spec, s)).collect();
    let refs: Vec<&ModelParams> = updates.iter().collect();
    let avg = aggregate_average(&refs).unwrap();
    let mut agg_err = 0.0_f64;
    for (k, v) in avg.flat().iter().enumerate() {
        let m = updates.iter().map(|u| u.flat()[k]).sum::<f64>() / updates.len() as f64;
        agg_err = agg_err.max((v - m).abs());
    }
    let logits: Vec<ClientLogits> = (0..5)
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let mut t =
                || Tensor::matrix(6, 3, (0..18).map(|_| rng.random_range(-4.0..4.0)).collect());
            ClientLogits {
                base: t(),
                personalized: t(),
            }
        })
        .collect();
    let k = EnsembleKnowledge::aggregate(&logits).unwrap();
    for (i, v) in k.f_per().data().iter().enumerate() {
        let m = logits.iter().map(|l| l.personalized.data()[i]).sum::<f64>() / 5.0;
        agg_err = agg_err.max((v - m).abs());
    }

    let cfg = small_config();
    let data = build_data(&cfg, 8).unwrap();
    let mut order_ok = true;
    for method in [Method::FedAvg, Method::FedTtaPlusPlus] {
        let init = fedtta_core::harness::init_model(&cfg, method, 8).unwrap();
        let runs: Vec<_> = [Schedule::Sequential, Schedule::Reversed, Schedule::Parallel]
            .into_iter()
            .map(|s| {
                run_bits(
                    &run_training(method, &cfg.federation, &data.clients, &init, 8, s).unwrap(),
                )
            })
            .collect();
        order_ok &= runs.windows(2).all(|w| w[0] == w[1]);
    }

    let untouched = data.tests.iter().all(|c| c.labels().read_count() == 0);
    let init = fedtta_core::harness::init_model(&cfg, Method::FedTta, 8).unwrap();
    let run = run_training(
        Method::FedTta,
        &cfg.federation,
        &data.clients,
        &init,
        8,
        Schedule::Parallel,
    )
    .unwrap();
    for c in &data.tests {
        run.best
            .model
            .predict(Method::FedTta, &cfg.federation, c.unlabeled())
            .unwrap();
    }
    let after_adapt = data.tests.iter().all(|c| c.labels().read_count() == 0);
    evaluate_tests(&cfg, Method::FedTta, &run.best.model, 0, &data.tests).unwrap();
    let scored_once = data.tests.iter().all(|c| c.labels().read_count() == 1);
    let audit = untouched && after_adapt && scored_once;
    Verdict::contract(
        agg_err <= AGG_TOL && order_ok && audit,
        format!(
            "aggregation max err {agg_err:.1e} (limit {AGG_TOL:.0e}); schedules bitwise equal: {order_ok}; \
             test labels read only by scoring: {audit}"
        ),
    )
}

fn c9_rotation() -> Verdict {
    let cfg = config(
        "kind = \"rotated\"\ntrain_angles = [0.0, 30.0, 60.0]\ntest_angles = [15.0, 45.0]",
        (20, 20),
        100,
        "",
    );
    let (mut avg, mut tta) = (Vec::new(), Vec::new());
    for seed in SEEDS {
        let data = build_data(&cfg, seed).unwrap();
        avg.push(
            run_method(&cfg, Method::FedAvg, &data, Schedule::Parallel)
                .unwrap()
                .test,
        );
        tta.push(
            run_method(&cfg, Method::FedTta, &data, Schedule::Parallel)
                .unwrap()
                .test,
        );
    }
    let gap = mean(&tta) - mean(&avg);
    Verdict::trend(
        gap >= ROTATION_GAP,
        format!(
            "fedavg {}, fedtta {}, gap {:+.2} pts (need {:.0})",
            pct(&avg),
            pct(&tta),
            100.0 * gap,
            100.0 * ROTATION_GAP
        ),
    )
}

fn main() {
    let wanted: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let on = |n: u32| wanted.is_empty() || wanted.contains(&n);
    let mut verdicts: Vec<(String, Verdict)> = Vec::new();
    let mut report = |name: &str, v: Verdict| {
        println!(
            "criterion {name}: {} - {}",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        verdicts.push((name.to_string(), v));
    };
    if on(1) {
        report("1 gradient oracle", c1_gradient_oracle());
    }
    if on(2) {
        report("2 equivalence ladder", c2_equivalence_ladder());
    }
    if on(3) || on(5) {
        let runs = trend_runs();
        if on(3) {
            report("3 trend reproduction", c3_trend(&runs));
        }
        if on(5) {
            report("5 data-size ablation", c5_data_size(&runs));
        }
    }
    if on(4) {
        report("4 distribution-shift sweep", c4_dirichlet_shift());
    }
    if on(6) {
        report("6 early-stop contract", c6_early_stop());
    }
    if on(7) {
        let (fidelity, sweep) = c7_distillation();
        report("7 distillation fidelity", fidelity);
        report("7 lambda sweep", sweep);
    }
    if on(8) {
        report("8 federation invariants", c8_federation_invariants());
    }
    if on(9) {
        report("9 concept shift", c9_rotation());
    }
    let passed = verdicts.iter().filter(|(_, v)| v.pass).count();
    let broken: Vec<&str> = verdicts
        .iter()
        .filter(|(_, v)| v.contract && !v.pass)
        .map(|(n, _)| n.as_str())
        .collect();
    println!("acceptance: {passed}/{} PASS", verdicts.len());
    if !broken.is_empty() {
        eprintln!("contract criteria failed: {}", broken.join(", "));
        std::process::exit(1);
    }
}
