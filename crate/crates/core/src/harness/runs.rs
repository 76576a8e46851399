use serde::Serialize;
use sha2::{Digest, Sha256};

use super::ExperimentConfig;
use crate::data::{
    make_public_dataset, reduce_client_data, ClientDataset, GaussianTask, LabeledDataset,
    TestClient,
};
use crate::error::{Error, Result};
use crate::eval::{mean_accuracy, mismatch_curve, score_test_client, CurveRow, EvalRecord, Split};
use crate::federation::{run_training, Checkpoint, GlobalModel, Method, Schedule, TrainingRun};
use crate::fedtta::{test_adapt, Patience, TestAdaptConfig};
use crate::hetero::{
    new_client_onboard, run_hetero, HeteroClient, HeteroRoundMetrics, ModelFamily,
};
use crate::models::ModelParams;
use crate::seed::{derive_seed, stream};

/// Everything built from one seed, shared by every method run on it.
pub struct SeedData {
    pub seed: u64,
    pub task: GaussianTask,
    pub train: Vec<LabeledDataset>,
    pub test: Vec<LabeledDataset>,
    pub clients: Vec<ClientDataset>,
    pub tests: Vec<TestClient>,
    /// SHA-256 over every client's dataset, training clients first.
    pub partition_hash: String,
}

pub fn build_data(cfg: &ExperimentConfig, seed: u64) -> Result<SeedData> {
    let task = GaussianTask::new(&cfg.task, seed)?;
    let (train, test) = cfg.partition.federate(&task, seed)?;
    let test = if cfg.test_fraction < 1.0 {
        test.iter()
            .enumerate()
            .map(|(i, d)| reduce_client_data(d, cfg.test_fraction, derive_seed(&[seed, i as u64])))
            .collect::<Result<Vec<_>>>()?
    } else {
        test
    };
    let mut hasher = Sha256::new();
    for d in train.iter().chain(&test) {
        let mut buf = Vec::new();
        d.write_to(&mut buf)?;
        hasher.update(&buf);
    }
    let partition_hash = hex::encode(hasher.finalize());
    let clients = train
        .iter()
        .enumerate()
        .map(|(i, d)| ClientDataset::split(i, d, seed))
        .collect();
    let tests = test
        .iter()
        .enumerate()
        .map(|(i, d)| TestClient::new(i, d))
        .collect::<Result<Vec<_>>>()?;
    Ok(SeedData {
        seed,
        task,
        train,
        test,
        clients,
        tests,
        partition_hash,
    })
}

/// Initial models. Every method starts from the same base model for a seed.
pub fn init_model(cfg: &ExperimentConfig, method: Method, seed: u64) -> Result<GlobalModel> {
    Ok(GlobalModel {
        base: ModelParams::init(
            &cfg.prediction_spec()?,
            derive_seed(&[seed, stream::INIT, 0]),
        ),
        adapt: method
            .is_meta()
            .then(|| {
                cfg.adaptation_spec()
                    .map(|s| ModelParams::init(&s, derive_seed(&[seed, stream::INIT, 1])))
            })
            .transpose()?,
    })
}

/// One method on one seed.
pub struct SeedOutcome {
    pub seed: u64,
    pub partition_hash: String,
    pub run: TrainingRun,
    pub test_records: Vec<EvalRecord>,
    pub test: f64,
}

pub fn run_method(
    cfg: &ExperimentConfig,
    method: Method,
    data: &SeedData,
    schedule: Schedule,
) -> Result<SeedOutcome> {
    let init = init_model(cfg, method, data.seed)?;
    let run = run_training(
        method,
        &cfg.federation,
        &data.clients,
        &init,
        data.seed,
        schedule,
    )?;
    let (test_records, test) =
        evaluate_tests(cfg, method, &run.best.model, run.best.round, &data.tests)?;
    log::info!(
        "{method} seed {}: best round {}, validation {:.4}, test {test:.4}",
        data.seed,
        run.best.round,
        run.best.validation
    );
    Ok(SeedOutcome {
        seed: data.seed,
        partition_hash: data.partition_hash.clone(),
        run,
        test_records,
        test,
    })
}

/// Scores `model` on every test client with the method's inference, returning
/// per-client records (tagged with `round`) and their mean accuracy.
pub fn evaluate_tests(
    cfg: &ExperimentConfig,
    method: Method,
    model: &GlobalModel,
    round: usize,
    tests: &[TestClient],
) -> Result<(Vec<EvalRecord>, f64)> {
    let records = tests
        .iter()
        .map(|c| {
            let logits = model.predict(method, &cfg.federation, c.unlabeled())?;
            let acc = score_test_client(c, &logits)?;
            Ok(EvalRecord::new(
                c.id,
                Split::Test,
                acc,
                round,
                method.name(),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = mean_accuracy(&records);
    Ok((records, mean))
}

/// Mean and sample standard deviation (`None` for a single value).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub std: Option<f64>,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.len() > 1)
            .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub partition_hash: String,
    pub best_round: usize,
    pub validation: f64,
    pub test: f64,
}

/// Per-method table row with the settings that shape its test phase.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: Method,
    pub seeds: Vec<SeedSummary>,
    pub validation: Stat,
    pub test: Stat,
    pub inference: String,
}

pub fn summarize(
    cfg: &ExperimentConfig,
    method: Method,
    outcomes: &[SeedOutcome],
) -> MethodSummary {
    let seeds: Vec<SeedSummary> = outcomes
        .iter()
        .map(|o| SeedSummary {
            seed: o.seed,
            partition_hash: o.partition_hash.clone(),
            best_round: o.run.best.round,
            validation: o.run.best.validation,
            test: o.test,
        })
        .collect();
    let v: Vec<f64> = seeds.iter().map(|s| s.validation).collect();
    let t: Vec<f64> = seeds.iter().map(|s| s.test).collect();
    MethodSummary {
        method,
        validation: Stat::of(&v),
        test: Stat::of(&t),
        seeds,
        inference: inference_label(cfg, method),
    }
}

fn inference_label(cfg: &ExperimentConfig, method: Method) -> String {
    let f = &cfg.federation;
    match (method, method.test_adapt_config(f)) {
        (Method::Tent, _) => format!(
            "entropy minimization, {} steps at {}",
            f.test_max_steps, f.tent_lr
        ),
        (_, Some(t)) => format!(
            "adaptation, E={} patience={} eta_inner={}",
            t.max_steps, t.patience, t.eta_inner
        ),
        _ => "global model".to_string(),
    }
}

pub struct MethodReport {
    pub method: Method,
    pub outcomes: Vec<SeedOutcome>,
    pub summary: MethodSummary,
}

/// Every configured method on identical data for each seed.
pub fn run_compare(cfg: &ExperimentConfig, schedule: Schedule) -> Result<Vec<MethodReport>> {
    run_methods(cfg, &cfg.methods, schedule)
}

/// Like [`run_compare`] for a chosen subset of methods. Artifacts still carry
/// the hash of `cfg` as given.
pub fn run_methods(
    cfg: &ExperimentConfig,
    methods: &[Method],
    schedule: Schedule,
) -> Result<Vec<MethodReport>> {
    let mut per_method: Vec<Vec<SeedOutcome>> = methods.iter().map(|_| Vec::new()).collect();
    for &seed in &cfg.seeds {
        let data = build_data(cfg, seed)?;
        log::info!("seed {seed}: partition {}", data.partition_hash);
        for (m, out) in methods.iter().zip(per_method.iter_mut()) {
            out.push(run_method(cfg, *m, &data, schedule)?);
        }
    }
    Ok(methods
        .iter()
        .zip(per_method)
        .map(|(&method, outcomes)| MethodReport {
            method,
            summary: summarize(cfg, method, &outcomes),
            outcomes,
        })
        .collect())
}

pub struct CurveOutput {
    pub seed: u64,
    pub client: usize,
    pub rows: Vec<CurveRow>,
    pub stopped_at: usize,
    pub selected_step: usize,
}

/// Full `steps`-step adaptation trace of one test client, with the step at
/// which `patience` would have stopped and the step it would keep.
pub fn adapt_curve(
    cfg: &ExperimentConfig,
    checkpoint: &Checkpoint,
    client: usize,
    steps: usize,
    patience: Patience,
) -> Result<CurveOutput> {
    if checkpoint.config_hash != cfg.hash() {
        return Err(Error::Config(
            "checkpoint was produced by a different configuration".into(),
        ));
    }
    let phi = checkpoint
        .model
        .adapt
        .as_ref()
        .ok_or_else(|| Error::Config("checkpoint has no adaptation model".into()))?;
    let data = build_data(cfg, checkpoint.seed)?;
    let c = data.tests.get(client).ok_or_else(|| {
        Error::Config(format!(
            "test client {client} does not exist ({} clients)",
            data.tests.len()
        ))
    })?;
    let tcfg = TestAdaptConfig {
        max_steps: steps,
        patience,
        eta_inner: cfg.federation.eta_inner,
        run_full: true,
    };
    let scorer = |z: &crate::tensor::Tensor| Ok(score_test_client(c, z)?.fraction());
    let out = test_adapt(
        &checkpoint.model.base,
        phi,
        c.unlabeled().features(),
        &tcfg,
        Some(&scorer),
    )?;
    Ok(CurveOutput {
        seed: checkpoint.seed,
        client,
        rows: mismatch_curve(&out.trace),
        stopped_at: out.stopped_at,
        selected_step: out.selected_step,
    })
}

/// One heterogeneous run for one seed and one `lambda`.
pub struct HeteroOutcome {
    pub seed: u64,
    pub lambda: f64,
    pub rounds: Vec<HeteroRoundMetrics>,
    pub knowledge: crate::hetero::EnsembleKnowledge,
    /// Mean validation accuracy of the training clients after the last round.
    pub validation: f64,
    /// Mean accuracy of onboarded test clients.
    pub test: f64,
}

const ONBOARD_STREAM: u64 = 1 << 32;

pub fn run_hetero_experiment(
    cfg: &ExperimentConfig,
    lambda: f64,
    data: &SeedData,
    schedule: Schedule,
) -> Result<HeteroOutcome> {
    let h = &cfg.hetero;
    let fed = crate::federation::FederationConfig {
        lambda,
        ..cfg.federation.clone()
    };
    let family = |name| ModelFamily::new(name, cfg.task.dim, cfg.task.n_classes);
    let clients = data
        .clients
        .iter()
        .enumerate()
        .map(|(i, c)| {
            Ok(HeteroClient::new(
                family(h.families[i % h.families.len()])?,
                c.clone(),
                data.seed,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let public = make_public_dataset(&data.task, h.public_samples, data.seed)?;
    let run = run_hetero(clients, &public, &fed, data.seed, schedule)?;
    let accs = data
        .tests
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let name = h.onboard_family.unwrap_or(h.families[i % h.families.len()]);
            let seed = derive_seed(&[data.seed, stream::INIT, ONBOARD_STREAM + i as u64]);
            let on = new_client_onboard(
                &family(name)?,
                c.unlabeled(),
                &public,
                &run.knowledge,
                &fed,
                h.onboard_steps,
                seed,
            )?;
            Ok(score_test_client(c, &on.logits)?.fraction())
        })
        .collect::<Result<Vec<_>>>()?;
    let test = accs.iter().sum::<f64>() / accs.len() as f64;
    let validation = run.rounds.last().map_or(f64::NAN, |r| r.mean_validation);
    log::info!(
        "hetero lambda {lambda} seed {}: validation {validation:.4}, test {test:.4}",
        data.seed
    );
    Ok(HeteroOutcome {
        seed: data.seed,
        lambda,
        rounds: run.rounds,
        knowledge: run.knowledge,
        validation,
        test,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeteroSummary {
    pub lambda: f64,
    pub seeds: Vec<u64>,
    pub validation: Vec<f64>,
    pub test: Vec<f64>,
    pub validation_stat: Stat,
    pub test_stat: Stat,
}

/// Every `lambda` on every seed. Outcomes are grouped by lambda.
pub fn run_hetero_sweep(
    cfg: &ExperimentConfig,
    lambdas: &[f64],
    schedule: Schedule,
) -> Result<(Vec<HeteroOutcome>, Vec<HeteroSummary>)> {
    let mut outcomes = Vec::new();
    let data: Vec<SeedData> = cfg
        .seeds
        .iter()
        .map(|&s| build_data(cfg, s))
        .collect::<Result<_>>()?;
    for &lambda in lambdas {
        for d in &data {
            outcomes.push(run_hetero_experiment(cfg, lambda, d, schedule)?);
        }
    }
    let summaries = lambdas
        .iter()
        .map(|&lambda| {
            let mine: Vec<&HeteroOutcome> =
                outcomes.iter().filter(|o| o.lambda == lambda).collect();
            let validation: Vec<f64> = mine.iter().map(|o| o.validation).collect();
            let test: Vec<f64> = mine.iter().map(|o| o.test).collect();
            HeteroSummary {
                lambda,
                seeds: mine.iter().map(|o| o.seed).collect(),
                validation_stat: Stat::of(&validation),
                test_stat: Stat::of(&test),
                validation,
                test,
            }
        })
        .collect();
    Ok((outcomes, summaries))
}
