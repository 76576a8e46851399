//! Heterogeneous-model federation. Clients keep models of different sizes
//! and exchange only logits on a shared public unlabeled dataset; each round
//! they distill the server's ensemble logits, meta-train locally, and send
//! back fresh logits.

use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::data::{ClientDataset, UnlabeledDataset};
use crate::error::{Error, Result};
use crate::eval::{mean_accuracy, top1_accuracy, EvalRecord, Split};
use crate::federation::{run_clients, FederationConfig, Schedule};
use crate::fedtta::{
    clip_grad_norm, inner_adapt, local_meta_train, test_adapt, Patience, TestAdaptConfig,
};
use crate::io;
use crate::models::{forward_prediction, MlpSpec, ModelParams};
use crate::seed::{derive_seed, stream};
use crate::tensor::{grad, ops, Graph, Tensor};

const MAGIC: &[u8; 4] = b"FTEK";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyName {
    Small,
    Medium,
    Big,
}

impl FamilyName {
    pub const ALL: [FamilyName; 3] = [FamilyName::Small, FamilyName::Medium, FamilyName::Big];

    /// Hidden widths of the prediction and adaptation networks.
    fn hidden(self) -> (usize, usize) {
        match self {
            FamilyName::Small => (64, 32),
            FamilyName::Medium => (128, 64),
            FamilyName::Big => (256, 128),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FamilyName::Small => "small",
            FamilyName::Medium => "medium",
            FamilyName::Big => "big",
        }
    }
}

impl fmt::Display for FamilyName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Architecture pair for one family: `[d, h, C]` prediction and
/// `[C, a, a, a, 1]` adaptation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelFamily {
    pub name: FamilyName,
    pub prediction: MlpSpec,
    pub adaptation: MlpSpec,
}

impl ModelFamily {
    pub fn new(name: FamilyName, dim: usize, n_classes: usize) -> Result<Self> {
        let (h, a) = name.hidden();
        Ok(Self {
            name,
            prediction: MlpSpec::with_hidden(dim, &[h], n_classes)?,
            adaptation: MlpSpec::with_hidden(n_classes, &[a, a, a], 1)?,
        })
    }

    pub fn init(&self, seed: u64) -> (ModelParams, ModelParams) {
        (
            ModelParams::init(&self.prediction, derive_seed(&[seed, 0])),
            ModelParams::init(&self.adaptation, derive_seed(&[seed, 1])),
        )
    }
}

/// What one client sends to the server: logits on the public dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientLogits {
    pub base: Tensor,
    pub personalized: Tensor,
}

/// Server-side averaged logits on the public dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleKnowledge {
    f_base: Tensor,
    f_per: Tensor,
}

impl EnsembleKnowledge {
    pub fn new(f_base: Tensor, f_per: Tensor) -> Result<Self> {
        if f_base.dims2().is_none() || f_base.shape() != f_per.shape() {
            return Err(Error::Shape {
                op: "EnsembleKnowledge",
                shapes: vec![f_base.shape().to_vec(), f_per.shape().to_vec()],
            });
        }
        if !f_base.is_finite() || !f_per.is_finite() {
            return Err(Error::NonFinite("ensemble logits".into()));
        }
        Ok(Self {
            f_base: f_base.detach(),
            f_per: f_per.detach(),
        })
    }

    /// Unweighted mean over clients, summed in the given order.
    pub fn aggregate(uploads: &[ClientLogits]) -> Result<Self> {
        let first = uploads
            .first()
            .ok_or_else(|| Error::Config("no client logits to aggregate".into()))?;
        let shape = first.base.shape().to_vec();
        let mut base = vec![0.0; first.base.numel()];
        let mut per = vec![0.0; first.base.numel()];
        for u in uploads {
            if u.base.shape() != shape.as_slice() || u.personalized.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "EnsembleKnowledge::aggregate",
                    shapes: vec![
                        shape.clone(),
                        u.base.shape().to_vec(),
                        u.personalized.shape().to_vec(),
                    ],
                });
            }
            base.iter_mut()
                .zip(u.base.data())
                .for_each(|(a, v)| *a += v);
            per.iter_mut()
                .zip(u.personalized.data())
                .for_each(|(a, v)| *a += v);
        }
        let n = uploads.len() as f64;
        base.iter_mut().chain(per.iter_mut()).for_each(|a| *a /= n);
        Self::new(Tensor::new(shape.clone(), base), Tensor::new(shape, per))
    }

    pub fn f_base(&self) -> &Tensor {
        &self.f_base
    }

    pub fn f_per(&self) -> &Tensor {
        &self.f_per
    }

    pub fn n_public(&self) -> usize {
        self.f_base.shape()[0]
    }

    pub fn n_classes(&self) -> usize {
        self.f_base.shape()[1]
    }

    /// `FTEK`, version, `m_p`, `C` (u64 each), then both logit matrices row-major.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        io::write_magic(w, MAGIC, VERSION)?;
        io::write_u64(w, self.n_public() as u64)?;
        io::write_u64(w, self.n_classes() as u64)?;
        io::write_f64s(w, self.f_base.data())?;
        io::write_f64s(w, self.f_per.data())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        io::read_magic(r, MAGIC, VERSION)?;
        let m = io::read_len(r, "public rows")?;
        let c = io::read_len(r, "classes")?;
        if m == 0 || c == 0 {
            return Err(Error::Format("empty ensemble knowledge".into()));
        }
        let base = io::read_f64s(r, m * c)?;
        let per = io::read_f64s(r, m * c)?;
        Self::new(Tensor::matrix(m, c, base), Tensor::matrix(m, c, per))
            .map_err(|e| Error::Format(e.to_string()))
    }
}

/// `mean KL(softmax(f(x; psi_tilde)) || softmax(F_per))
///  + lambda * mean KL(softmax(f(x; psi)) || softmax(F_base))` over the
/// public rows, with `psi_tilde` one differentiable inner step on `public`.
pub fn kd_loss(
    psi: &[Tensor],
    phi: &[Tensor],
    public: &Tensor,
    teacher: &EnsembleKnowledge,
    lambda: f64,
    eta_inner: f64,
) -> Result<Tensor> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::Config(format!(
            "lambda must be non-negative, got {lambda}"
        )));
    }
    let z = forward_prediction(psi, public)?;
    if z.shape() != teacher.f_base.shape() {
        return Err(Error::Shape {
            op: "kd_loss",
            shapes: vec![z.shape().to_vec(), teacher.f_base.shape().to_vec()],
        });
    }
    let psi_tilde = inner_adapt(psi, phi, public, eta_inner)?;
    let z_tilde = forward_prediction(&psi_tilde, public)?;
    let personalized = ops::mean(&ops::kl_divergence_logits(&z_tilde, &teacher.f_per)?);
    if lambda == 0.0 {
        return Ok(personalized);
    }
    let base = ops::mean(&ops::kl_divergence_logits(&z, &teacher.f_base)?);
    ops::add(&personalized, &ops::scale(&base, lambda))
}

/// `steps` gradient steps on [`kd_loss`], updating `psi` at `eta_outer` and
/// `phi` at `eta_adapt`.
pub fn digest(
    psi: &ModelParams,
    phi: &ModelParams,
    public: &UnlabeledDataset,
    teacher: &EnsembleKnowledge,
    cfg: &FederationConfig,
    steps: usize,
) -> Result<(ModelParams, ModelParams)> {
    let (mut psi, mut phi) = (psi.clone(), phi.clone());
    for step in 0..steps {
        let graph = Graph::new();
        let psi_t = psi.attach(&graph);
        let phi_t = phi.attach(&graph);
        let loss = kd_loss(
            &psi_t,
            &phi_t,
            public.features(),
            teacher,
            cfg.lambda,
            cfg.eta_inner,
        )?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "digest step {step}: loss {}",
                loss.item()
            )));
        }
        let wrt: Vec<&Tensor> = psi_t.iter().chain(&phi_t).collect();
        let mut g_psi = grad(&loss, &wrt, false)?;
        let mut g_phi = g_psi.split_off(psi_t.len());
        if let Some(c) = cfg.meta_clip {
            g_psi = clip_grad_norm(&g_psi, c);
            g_phi = clip_grad_norm(&g_phi, c);
        }
        psi = psi.sgd_step(&g_psi, cfg.eta_outer);
        phi = phi.sgd_step(&g_phi, cfg.eta_adapt);
    }
    Ok((psi, phi))
}

/// Single-step test-time adaptation used for uploads and evaluation.
fn one_step(cfg: &FederationConfig) -> TestAdaptConfig {
    TestAdaptConfig {
        max_steps: 1,
        patience: Patience::Unbounded,
        eta_inner: cfg.eta_inner,
        run_full: false,
    }
}

fn personalize(
    psi: &ModelParams,
    phi: &ModelParams,
    x: &Tensor,
    cfg: &FederationConfig,
) -> Result<ModelParams> {
    Ok(test_adapt(psi, phi, x, &one_step(cfg), None)?.params)
}

/// Logits of the base model and of its one-step adaptation on the public data.
pub fn communicate(
    psi: &ModelParams,
    phi: &ModelParams,
    public: &UnlabeledDataset,
    cfg: &FederationConfig,
) -> Result<ClientLogits> {
    let x = public.features();
    let adapted = personalize(psi, phi, x, cfg)?;
    Ok(ClientLogits {
        base: forward_prediction(psi.tensors(), x)?,
        personalized: forward_prediction(adapted.tensors(), x)?,
    })
}

/// A training client with its own, never shared, models.
#[derive(Clone, Debug)]
pub struct HeteroClient {
    pub family: ModelFamily,
    pub data: ClientDataset,
    pub psi: ModelParams,
    pub phi: ModelParams,
}

impl HeteroClient {
    pub fn new(family: ModelFamily, data: ClientDataset, seed: u64) -> Self {
        let (psi, phi) = family.init(derive_seed(&[seed, stream::INIT, data.id as u64]));
        Self {
            family,
            data,
            psi,
            phi,
        }
    }

    pub fn id(&self) -> usize {
        self.data.id
    }

    /// Validation accuracy of the client's one-step personalized model.
    pub fn validate(&self, cfg: &FederationConfig, round: usize) -> Result<Option<EvalRecord>> {
        let v = &self.data.validation;
        if v.is_empty() {
            return Ok(None);
        }
        let adapted = personalize(&self.psi, &self.phi, v.features(), cfg)?;
        let acc = top1_accuracy(
            &forward_prediction(adapted.tensors(), v.features())?,
            v.labels(),
        )?;
        Ok(Some(EvalRecord::new(
            self.id(),
            Split::Validation,
            acc,
            round,
            "hetero",
        )))
    }
}

#[derive(Clone, Debug)]
pub struct HeteroRoundMetrics {
    pub round: usize,
    pub mean_validation: f64,
    /// Mean personalized KL to the ensemble at the end of Digest.
    pub mean_digest_kl: f64,
    pub records: Vec<EvalRecord>,
}

/// Mean `KL(softmax(f(x; psi_tilde)) || softmax(F_per))` on the public data,
/// with `psi_tilde` one adaptation step.
pub fn personalized_kl(
    psi: &ModelParams,
    phi: &ModelParams,
    public: &UnlabeledDataset,
    teacher: &EnsembleKnowledge,
    cfg: &FederationConfig,
) -> Result<f64> {
    let logits = communicate(psi, phi, public, cfg)?.personalized;
    Ok(ops::mean(&ops::kl_divergence_logits(&logits, teacher.f_per())?).item())
}

/// One Distribute/Digest/Revisit/Communicate/Aggregate round. Returns the
/// updated clients, the new knowledge and the round's metrics.
pub fn run_hetero_round(
    clients: &[HeteroClient],
    public: &UnlabeledDataset,
    knowledge: &EnsembleKnowledge,
    cfg: &FederationConfig,
    round: usize,
    seed: u64,
    schedule: Schedule,
) -> Result<(Vec<HeteroClient>, EnsembleKnowledge, HeteroRoundMetrics)> {
    let idx: Vec<usize> = (0..clients.len()).collect();
    let rates = cfg.meta_rates(cfg.mu);
    let results = run_clients(&idx, schedule, |i| {
        let c = &clients[i];
        let wrap = |e: Error| Error::Client {
            round,
            client: c.id(),
            source: Box::new(e),
        };
        let (psi, phi) =
            digest(&c.psi, &c.phi, public, knowledge, cfg, cfg.digest_steps).map_err(wrap)?;
        let kl = personalized_kl(&psi, &phi, public, knowledge, cfg).map_err(wrap)?;
        let client_seed = derive_seed(&[seed, stream::CLIENT, round as u64, c.id() as u64]);
        let (psi, phi) = local_meta_train(
            &psi,
            &phi,
            &c.data.train,
            &rates,
            cfg.local_iters,
            cfg.batch_size,
            client_seed,
        )
        .map_err(wrap)?;
        let upload = communicate(&psi, &phi, public, cfg).map_err(wrap)?;
        let next = HeteroClient {
            family: c.family.clone(),
            data: c.data.clone(),
            psi,
            phi,
        };
        let record = next.validate(cfg, round).map_err(wrap)?;
        Ok((next, upload, kl, record))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let mut next = Vec::with_capacity(results.len());
    let mut uploads = Vec::with_capacity(results.len());
    let mut kls = Vec::with_capacity(results.len());
    let mut records = Vec::new();
    for (c, u, kl, r) in results {
        next.push(c);
        uploads.push(u);
        kls.push(kl);
        records.extend(r);
    }
    let knowledge = EnsembleKnowledge::aggregate(&uploads)?;
    let metrics = HeteroRoundMetrics {
        round,
        mean_validation: mean_accuracy(&records),
        mean_digest_kl: kls.iter().sum::<f64>() / kls.len() as f64,
        records,
    };
    Ok((next, knowledge, metrics))
}

/// Knowledge built from the clients' current models, before any Digest.
pub fn bootstrap_knowledge(
    clients: &[HeteroClient],
    public: &UnlabeledDataset,
    cfg: &FederationConfig,
    schedule: Schedule,
) -> Result<EnsembleKnowledge> {
    let idx: Vec<usize> = (0..clients.len()).collect();
    let uploads = run_clients(&idx, schedule, |i| {
        communicate(&clients[i].psi, &clients[i].phi, public, cfg)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    EnsembleKnowledge::aggregate(&uploads)
}

#[derive(Clone, Debug)]
pub struct HeteroRun {
    pub clients: Vec<HeteroClient>,
    pub knowledge: EnsembleKnowledge,
    pub rounds: Vec<HeteroRoundMetrics>,
}

/// `cfg.rounds` rounds starting from knowledge bootstrapped off the initial models.
pub fn run_hetero(
    clients: Vec<HeteroClient>,
    public: &UnlabeledDataset,
    cfg: &FederationConfig,
    seed: u64,
    schedule: Schedule,
) -> Result<HeteroRun> {
    if clients.is_empty() {
        return Err(Error::Config(
            "heterogeneous run needs at least one client".into(),
        ));
    }
    cfg.validate(clients.len())?;
    let mut knowledge = bootstrap_knowledge(&clients, public, cfg, schedule)?;
    let mut clients = clients;
    let mut rounds = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let (next, k, metrics) =
            run_hetero_round(&clients, public, &knowledge, cfg, round, seed, schedule)?;
        log::debug!(
            "hetero round {round}: validation {:.4}, digest kl {:.4}",
            metrics.mean_validation,
            metrics.mean_digest_kl
        );
        clients = next;
        knowledge = k;
        rounds.push(metrics);
    }
    Ok(HeteroRun {
        clients,
        knowledge,
        rounds,
    })
}

#[derive(Clone, Debug)]
pub struct Onboarded {
    pub psi: ModelParams,
    pub phi: ModelParams,
    pub personalized: ModelParams,
    pub logits: Tensor,
}

/// Fresh models of `family`, distilled from `knowledge` for `steps` steps,
/// then adapted on the new client's unlabeled data.
pub fn new_client_onboard(
    family: &ModelFamily,
    data: &UnlabeledDataset,
    public: &UnlabeledDataset,
    knowledge: &EnsembleKnowledge,
    cfg: &FederationConfig,
    steps: usize,
    seed: u64,
) -> Result<Onboarded> {
    let (psi0, phi0) = family.init(seed);
    let (psi, phi) = digest(&psi0, &phi0, public, knowledge, cfg, steps)?;
    let personalized = personalize(&psi, &phi, data.features(), cfg)?;
    let logits = forward_prediction(personalized.tensors(), data.features())?;
    Ok(Onboarded {
        psi,
        phi,
        personalized,
        logits,
    })
}
