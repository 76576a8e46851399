//! Round-based federation: selection, local training, barrier aggregation
//! and best-validation checkpointing.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{fedprox_local_train, tent_adapt};
use crate::data::{ClientDataset, UnlabeledDataset};
use crate::error::{Error, Result};
use crate::eval::{mean_accuracy, top1_accuracy, EvalRecord, Split};
use crate::fedtta::{local_meta_train, test_adapt, MetaRates, Patience, TestAdaptConfig};
use crate::io;
use crate::models::{forward_prediction, ModelParams};
use crate::seed::{derive_seed, rng_for, stream};
use crate::tensor::Tensor;

/// Run hyperparameters shared by every method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    #[serde(default = "d::rounds")]
    pub rounds: usize,
    /// Clients sampled per round; all training clients when absent.
    #[serde(default)]
    pub clients_per_round: Option<usize>,
    #[serde(default = "d::local_iters")]
    pub local_iters: usize,
    #[serde(default = "d::batch_size")]
    pub batch_size: usize,
    #[serde(default = "d::eta_inner")]
    pub eta_inner: f64,
    /// Base model rate; also the SGD rate of the parameter-averaging baselines.
    #[serde(default = "d::eta_outer")]
    pub eta_outer: f64,
    #[serde(default = "d::eta_adapt")]
    pub eta_adapt: f64,
    /// Weight of the logit KL regularizer for the proximal meta variants.
    #[serde(default = "d::mu")]
    pub mu: f64,
    /// Weight of the parameter-space proximal term of the proximal baseline.
    #[serde(default = "d::fedprox_mu")]
    pub fedprox_mu: f64,
    /// Weight of the base-model term in the distillation loss.
    #[serde(default = "d::lambda")]
    pub lambda: f64,
    /// Distillation steps per round in the heterogeneous protocol.
    #[serde(default = "d::digest_steps")]
    pub digest_steps: usize,
    /// Test-time adaptation step budget `E`.
    #[serde(default = "d::test_max_steps")]
    pub test_max_steps: usize,
    #[serde(default = "d::patience")]
    pub patience: Patience,
    /// Optional cap on the norm of each meta-gradient step.
    #[serde(default)]
    pub meta_clip: Option<f64>,
    /// Entropy-minimization rate of the TENT baseline, which runs
    /// `test_max_steps` steps.
    #[serde(default = "d::tent_lr")]
    pub tent_lr: f64,
}

mod d {
    use crate::fedtta::Patience;
    pub fn rounds() -> usize {
        100
    }
    pub fn local_iters() -> usize {
        20
    }
    pub fn batch_size() -> usize {
        64
    }
    pub fn eta_inner() -> f64 {
        0.05
    }
    pub fn eta_outer() -> f64 {
        0.05
    }
    pub fn eta_adapt() -> f64 {
        0.01
    }
    pub fn mu() -> f64 {
        0.1
    }
    pub fn fedprox_mu() -> f64 {
        0.01
    }
    pub fn lambda() -> f64 {
        0.8
    }
    pub fn digest_steps() -> usize {
        20
    }
    pub fn test_max_steps() -> usize {
        10
    }
    pub fn patience() -> Patience {
        Patience::Steps(5)
    }
    pub fn tent_lr() -> f64 {
        0.01
    }
}

impl Default for FederationConfig {
    fn default() -> Self {
        toml::from_str("").expect("every field has a default")
    }
}

impl FederationConfig {
    pub fn validate(&self, n_train_clients: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.rounds == 0
            || self.local_iters == 0
            || self.batch_size == 0
            || self.test_max_steps == 0
        {
            return bad("rounds, local_iters, batch_size and test_max_steps must be >= 1");
        }
        match self.clients_per_round {
            Some(0) => return bad("clients_per_round must be >= 1"),
            Some(m) if m > n_train_clients => {
                return Err(Error::Config(format!(
                    "clients_per_round {m} exceeds {n_train_clients} training clients"
                )))
            }
            _ => {}
        }
        let rates = [
            self.eta_inner,
            self.eta_outer,
            self.eta_adapt,
            self.mu,
            self.fedprox_mu,
            self.lambda,
            self.tent_lr,
            self.meta_clip.unwrap_or(1.0),
        ];
        if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return bad("rates, mu and lambda must be finite and non-negative");
        }
        Ok(())
    }

    pub fn meta_rates(&self, mu: f64) -> MetaRates {
        MetaRates {
            eta_inner: self.eta_inner,
            eta_outer: self.eta_outer,
            eta_adapt: self.eta_adapt,
            mu,
            clip: self.meta_clip,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "fedprox")]
    FedProx,
    #[serde(rename = "tent")]
    Tent,
    #[serde(rename = "fedtta")]
    FedTta,
    #[serde(rename = "fedtta-prox")]
    FedTtaProx,
    #[serde(rename = "fedtta++")]
    FedTtaPlusPlus,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::FedAvg,
        Method::FedProx,
        Method::Tent,
        Method::FedTta,
        Method::FedTtaProx,
        Method::FedTtaPlusPlus,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::FedAvg => "fedavg",
            Method::FedProx => "fedprox",
            Method::Tent => "tent",
            Method::FedTta => "fedtta",
            Method::FedTtaProx => "fedtta-prox",
            Method::FedTtaPlusPlus => "fedtta++",
        }
    }

    /// Whether the method trains an adaptation model.
    pub fn is_meta(&self) -> bool {
        matches!(
            self,
            Method::FedTta | Method::FedTtaProx | Method::FedTtaPlusPlus
        )
    }

    /// Test-time adaptation settings, for methods that personalize with the
    /// adaptation model.
    pub fn test_adapt_config(&self, cfg: &FederationConfig) -> Option<TestAdaptConfig> {
        let single = TestAdaptConfig {
            max_steps: 1,
            patience: Patience::Unbounded,
            eta_inner: cfg.eta_inner,
            run_full: false,
        };
        match self {
            Method::FedTta | Method::FedTtaProx => Some(single),
            Method::FedTtaPlusPlus => Some(TestAdaptConfig {
                max_steps: cfg.test_max_steps,
                patience: cfg.patience,
                ..single
            }),
            _ => None,
        }
    }

    fn meta_mu(&self, cfg: &FederationConfig) -> f64 {
        match self {
            Method::FedTta => 0.0,
            _ => cfg.mu,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// Server-side models: the base model and, for meta methods, the adaptation
/// model.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalModel {
    pub base: ModelParams,
    pub adapt: Option<ModelParams>,
}

impl GlobalModel {
    /// u8 flag for the adaptation model, then one or two `FTMP` blobs.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&[u8::from(self.adapt.is_some())])?;
        self.base.write_to(w)?;
        if let Some(a) = &self.adapt {
            a.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut flag = [0u8];
        r.read_exact(&mut flag)?;
        let base = ModelParams::read_from(r)?;
        let adapt = match flag[0] {
            0 => None,
            1 => Some(ModelParams::read_from(r)?),
            f => return Err(Error::Format(format!("bad adaptation flag {f}"))),
        };
        Ok(Self { base, adapt })
    }

    /// The personalized base model for one client's unlabeled data under
    /// `method`'s inference procedure.
    pub fn personalize(
        &self,
        method: Method,
        cfg: &FederationConfig,
        x: &UnlabeledDataset,
    ) -> Result<ModelParams> {
        match (method, method.test_adapt_config(cfg)) {
            (Method::Tent, _) => tent_adapt(&self.base, x, cfg.test_max_steps, cfg.tent_lr),
            (_, Some(tcfg)) => {
                let phi = self.adapt.as_ref().ok_or_else(|| {
                    Error::Config(format!(
                        "{method} needs an adaptation model in the checkpoint"
                    ))
                })?;
                Ok(test_adapt(&self.base, phi, x.features(), &tcfg, None)?.params)
            }
            _ => Ok(self.base.clone()),
        }
    }

    /// Logits of the personalized model on `x`.
    pub fn predict(
        &self,
        method: Method,
        cfg: &FederationConfig,
        x: &UnlabeledDataset,
    ) -> Result<Tensor> {
        forward_prediction(self.personalize(method, cfg, x)?.tensors(), x.features())
    }
}

/// A saved global model tagged with the run that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// SHA-256 of the experiment configuration.
    pub config_hash: [u8; 32],
    pub seed: u64,
    pub round: usize,
    pub model: GlobalModel,
}

impl Checkpoint {
    /// `FTCK` v1: config hash, seed and round (u64), then the model.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        io::write_magic(w, b"FTCK", 1)?;
        w.write_all(&self.config_hash)?;
        io::write_u64(w, self.seed)?;
        io::write_u64(w, self.round as u64)?;
        self.model.write_to(w)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        io::read_magic(r, b"FTCK", 1)?;
        let mut config_hash = [0u8; 32];
        r.read_exact(&mut config_hash)?;
        let seed = io::read_u64(r)?;
        let round = io::read_u64(r)? as usize;
        let model = GlobalModel::read_from(r)?;
        Ok(Self {
            config_hash,
            seed,
            round,
            model,
        })
    }
}

/// Seeded sample of `m` ids without replacement, in sampled order.
pub fn select_clients(round: usize, all_ids: &[usize], m: usize, seed: u64) -> Result<Vec<usize>> {
    if m > all_ids.len() {
        return Err(Error::Config(format!(
            "cannot select {m} of {} clients",
            all_ids.len()
        )));
    }
    let mut ids = all_ids.to_vec();
    ids.shuffle(&mut rng_for(&[seed, stream::SELECT, round as u64]));
    ids.truncate(m);
    Ok(ids)
}

/// Coordinate-wise unweighted mean, summed in the given order.
pub fn aggregate_average(updates: &[&ModelParams]) -> Result<ModelParams> {
    let first = updates
        .first()
        .ok_or_else(|| Error::Config("nothing to aggregate".into()))?;
    if let Some(bad) = updates.iter().find(|u| u.spec() != first.spec()) {
        return Err(Error::Shape {
            op: "aggregate_average",
            shapes: vec![first.spec().widths().to_vec(), bad.spec().widths().to_vec()],
        });
    }
    let mut acc = first.flat();
    for u in &updates[1..] {
        for (a, v) in acc.iter_mut().zip(u.flat()) {
            *a += v;
        }
    }
    let n = updates.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    ModelParams::from_flat(first.spec(), &acc)
}

/// Order in which a round's clients are processed. Results never depend on
/// it; the choice exists so that this can be checked.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Schedule {
    #[default]
    Parallel,
    Sequential,
    Reversed,
}

pub(crate) fn run_clients<T, F>(ids: &[usize], schedule: Schedule, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    match schedule {
        Schedule::Parallel => ids.par_iter().map(|&id| f(id)).collect(),
        Schedule::Sequential => ids.iter().map(|&id| f(id)).collect(),
        Schedule::Reversed => {
            let mut out: Vec<T> = ids.iter().rev().map(|&id| f(id)).collect();
            out.reverse();
            out
        }
    }
}

/// One client's local update from the round-start models.
pub fn local_update(
    method: Method,
    cfg: &FederationConfig,
    global: &GlobalModel,
    client: &ClientDataset,
    seed: u64,
) -> Result<GlobalModel> {
    let (tau, b) = (cfg.local_iters, cfg.batch_size);
    if method.is_meta() {
        let phi = global
            .adapt
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{method} needs an adaptation model")))?;
        let rates = cfg.meta_rates(method.meta_mu(cfg));
        let (psi, phi) = local_meta_train(&global.base, phi, &client.train, &rates, tau, b, seed)?;
        Ok(GlobalModel {
            base: psi,
            adapt: Some(phi),
        })
    } else {
        let mu = if method == Method::FedProx {
            cfg.fedprox_mu
        } else {
            0.0
        };
        let psi =
            fedprox_local_train(&global.base, &client.train, cfg.eta_outer, mu, tau, b, seed)?;
        Ok(GlobalModel {
            base: psi,
            adapt: None,
        })
    }
}

#[derive(Clone, Debug)]
pub struct RoundMetrics {
    pub round: usize,
    pub selected: Vec<usize>,
    pub mean_validation: f64,
    pub best_validation: f64,
    pub records: Vec<EvalRecord>,
}

#[derive(Clone, Debug)]
pub struct BestCheckpoint {
    pub round: usize,
    pub validation: f64,
    pub model: GlobalModel,
}

#[derive(Clone, Debug)]
pub struct TrainingRun {
    pub final_model: GlobalModel,
    pub best: BestCheckpoint,
    pub rounds: Vec<RoundMetrics>,
}

/// Validation accuracy of every training client under `method`'s inference.
pub fn evaluate_validation(
    method: Method,
    cfg: &FederationConfig,
    model: &GlobalModel,
    clients: &[ClientDataset],
    round: usize,
    schedule: Schedule,
) -> Result<Vec<EvalRecord>> {
    let ids: Vec<usize> = (0..clients.len()).collect();
    run_clients(&ids, schedule, |i| {
        let c = &clients[i];
        if c.validation.is_empty() {
            return Ok(None);
        }
        let logits = model.predict(method, cfg, &c.validation.unlabeled())?;
        let acc = top1_accuracy(&logits, c.validation.labels())?;
        Ok(Some(EvalRecord::new(
            c.id,
            Split::Validation,
            acc,
            round,
            method.name(),
        )))
    })
    .into_iter()
    .filter_map(Result::transpose)
    .collect()
}

/// Trains for `cfg.rounds` rounds and keeps the checkpoint with the best mean
/// validation accuracy (earliest round on ties).
pub fn run_training(
    method: Method,
    cfg: &FederationConfig,
    clients: &[ClientDataset],
    init: &GlobalModel,
    seed: u64,
    schedule: Schedule,
) -> Result<TrainingRun> {
    cfg.validate(clients.len())?;
    if method.is_meta() != init.adapt.is_some() {
        return Err(Error::Config(format!(
            "{method}: adaptation model presence does not match the method"
        )));
    }
    let all_ids: Vec<usize> = clients.iter().map(|c| c.id).collect();
    let by_id = |id: usize| {
        clients
            .iter()
            .find(|c| c.id == id)
            .expect("selected ids come from clients")
    };
    let m = cfg.clients_per_round.unwrap_or(clients.len());

    let mut global = init.clone();
    let mut best: Option<BestCheckpoint> = None;
    let mut rounds = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let mut selected = select_clients(round, &all_ids, m, seed)?;
        selected.sort_unstable();
        let updates = run_clients(&selected, schedule, |id| {
            let client_seed = derive_seed(&[seed, stream::CLIENT, round as u64, id as u64]);
            local_update(method, cfg, &global, by_id(id), client_seed).map_err(|e| Error::Client {
                round,
                client: id,
                source: Box::new(e),
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

        let bases: Vec<&ModelParams> = updates.iter().map(|u| &u.base).collect();
        let adapts: Option<Vec<&ModelParams>> = updates.iter().map(|u| u.adapt.as_ref()).collect();
        global = GlobalModel {
            base: aggregate_average(&bases)?,
            adapt: adapts.map(|a| aggregate_average(&a)).transpose()?,
        };

        let records = evaluate_validation(method, cfg, &global, clients, round, schedule)?;
        let mean_validation = mean_accuracy(&records);
        if best.as_ref().is_none_or(|b| mean_validation > b.validation) {
            best = Some(BestCheckpoint {
                round,
                validation: mean_validation,
                model: global.clone(),
            });
        }
        let best_validation = best.as_ref().map_or(f64::NAN, |b| b.validation);
        log::debug!(
            "{method} round {round}: validation {mean_validation:.4} (best {best_validation:.4})"
        );
        rounds.push(RoundMetrics {
            round,
            selected,
            mean_validation,
            best_validation,
            records,
        });
    }
    Ok(TrainingRun {
        final_model: global,
        best: best.expect("at least one round"),
        rounds,
    })
}
