//! Meta-training of the base and adaptation models, and the test-time
//! personalization loop with entropy-based early stopping.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::{BatchSampler, LabeledDataset};
use crate::error::{Error, Result};
use crate::models::{forward_prediction, personalization_loss, ModelParams};
use crate::tensor::{grad, ops, Graph, Tensor};

/// Rates and the logit-proximal weight used by one meta step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetaRates {
    pub eta_inner: f64,
    pub eta_outer: f64,
    pub eta_adapt: f64,
    /// Weight of the KL pull towards the round-start model's logits. `0`
    /// drops the term entirely.
    pub mu: f64,
    /// Caps the global norm of each outer-step gradient (`None` = no cap).
    pub clip: Option<f64>,
}

/// Rescales `grads` so their joint norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &[Tensor], max_norm: f64) -> Vec<Tensor> {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm <= max_norm {
        return grads.to_vec();
    }
    grads
        .iter()
        .map(|g| ops::scale(g, max_norm / norm))
        .collect()
}

/// `psi - eta_inner * grad(l_per(phi, f(x; psi)), psi)`, keeping the graph
/// so the result stays differentiable in both `psi` and `phi`.
pub fn inner_adapt(
    psi: &[Tensor],
    phi: &[Tensor],
    x: &Tensor,
    eta_inner: f64,
) -> Result<Vec<Tensor>> {
    let z = forward_prediction(psi, x)?;
    inner_adapt_from_logits(psi, phi, &z, eta_inner)
}

fn inner_adapt_from_logits(
    psi: &[Tensor],
    phi: &[Tensor],
    z: &Tensor,
    eta_inner: f64,
) -> Result<Vec<Tensor>> {
    let l_per = personalization_loss(phi, z)?;
    if !l_per.is_finite() {
        return Err(Error::NonFinite(format!(
            "personalization loss {}",
            l_per.item()
        )));
    }
    let wrt: Vec<&Tensor> = psi.iter().collect();
    let grads = grad(&l_per, &wrt, true)?;
    psi.iter()
        .zip(&grads)
        .map(|(p, g)| ops::sub(p, &ops::scale(g, eta_inner)))
        .collect()
}

/// Logits pair for the proximal term: `z` from the current local model
/// (attached), `z_server` from the frozen round-start model.
pub struct Prox<'a> {
    pub z: &'a Tensor,
    pub z_server: &'a Tensor,
    pub mu: f64,
}

/// `CE(f(x; psi_tilde), y) + mu * mean KL(softmax(z) || softmax(z_server))`.
pub fn meta_loss(
    psi_tilde: &[Tensor],
    x: &Tensor,
    labels: &[usize],
    prox: Option<Prox<'_>>,
) -> Result<Tensor> {
    let z_tilde = forward_prediction(psi_tilde, x)?;
    let ce = ops::cross_entropy(&z_tilde, labels)?;
    match prox {
        Some(p) if p.mu != 0.0 => {
            let kl = ops::mean(&ops::kl_divergence_logits(p.z, &p.z_server.detach())?);
            ops::add(&ce, &ops::scale(&kl, p.mu))
        }
        _ => Ok(ce),
    }
}

/// Exact gradients of the meta objective for one batch.
#[derive(Clone, Debug)]
pub struct MetaGradients {
    pub loss: f64,
    pub psi: Vec<Tensor>,
    pub phi: Vec<Tensor>,
}

/// Gradients of `L(psi - eta_inner * grad l_per)` with respect to `psi` and
/// `phi`, differentiating through the inner step.
pub fn meta_gradients(
    psi: &ModelParams,
    phi: &ModelParams,
    psi_server: Option<&ModelParams>,
    x: &Tensor,
    labels: &[usize],
    rates: &MetaRates,
) -> Result<MetaGradients> {
    let graph = Graph::new();
    let psi_t = psi.attach(&graph);
    let phi_t = phi.attach(&graph);
    let z = forward_prediction(&psi_t, x)?;
    let psi_tilde = inner_adapt_from_logits(&psi_t, &phi_t, &z, rates.eta_inner)?;
    let z_server = match psi_server {
        Some(server) if rates.mu != 0.0 => Some(forward_prediction(server.tensors(), x)?),
        _ => None,
    };
    let prox = z_server.as_ref().map(|zs| Prox {
        z: &z,
        z_server: zs,
        mu: rates.mu,
    });
    let loss = meta_loss(&psi_tilde, x, labels, prox)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("meta loss {}", loss.item())));
    }
    let wrt: Vec<&Tensor> = psi_t.iter().chain(&phi_t).collect();
    let mut grads = grad(&loss, &wrt, false)?;
    let phi_grads = grads.split_off(psi_t.len());
    Ok(MetaGradients {
        loss: loss.item(),
        psi: grads,
        phi: phi_grads,
    })
}

/// `tau` meta steps on one client, starting from the round-start models.
/// The round-start base model also serves as the frozen proximal anchor.
pub fn local_meta_train(
    psi_r: &ModelParams,
    phi_r: &ModelParams,
    data: &LabeledDataset,
    rates: &MetaRates,
    tau: usize,
    batch: usize,
    seed: u64,
) -> Result<(ModelParams, ModelParams)> {
    let (mut psi, mut phi) = (psi_r.clone(), phi_r.clone());
    if tau == 0 {
        return Ok((psi, phi));
    }
    let mut sampler = BatchSampler::new(data.len(), batch, seed)?;
    for step in 0..tau {
        let rows = sampler.next_rows();
        let x = data.features().select_rows(&rows);
        let y: Vec<usize> = rows.iter().map(|&r| data.labels()[r]).collect();
        let g = meta_gradients(&psi, &phi, Some(psi_r), &x, &y, rates)
            .map_err(|e| Error::NonFinite(format!("local step {step}: {e}")))?;
        let (g_psi, g_phi) = match rates.clip {
            Some(c) => (clip_grad_norm(&g.psi, c), clip_grad_norm(&g.phi, c)),
            None => (g.psi, g.phi),
        };
        psi = psi.sgd_step(&g_psi, rates.eta_outer);
        phi = phi.sgd_step(&g_phi, rates.eta_adapt);
        if !psi.is_finite() || !phi.is_finite() {
            return Err(Error::NonFinite(format!(
                "parameters after local step {step}"
            )));
        }
    }
    Ok((psi, phi))
}

/// Steps without a new entropy minimum before test-time adaptation stops.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Patience {
    Steps(usize),
    /// Never stop early. Adaptation runs every step and keeps the last model.
    Unbounded,
}

impl fmt::Display for Patience {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Patience::Steps(n) => write!(f, "{n}"),
            Patience::Unbounded => f.write_str("unbounded"),
        }
    }
}

impl std::str::FromStr for Patience {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unbounded" => Ok(Patience::Unbounded),
            _ => match s.parse::<usize>() {
                Ok(n) if n >= 1 => Ok(Patience::Steps(n)),
                _ => Err(Error::Config(format!(
                    "patience must be a positive integer or \"unbounded\", got {s:?}"
                ))),
            },
        }
    }
}

impl Serialize for Patience {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Patience::Steps(n) => s.serialize_u64(*n as u64),
            Patience::Unbounded => s.serialize_str("unbounded"),
        }
    }
}

impl<'de> Deserialize<'de> for Patience {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Steps(u64),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Steps(0) => Err(serde::de::Error::custom("patience must be >= 1")),
            Raw::Steps(n) => Ok(Patience::Steps(n as usize)),
            Raw::Word(w) if w == "unbounded" => Ok(Patience::Unbounded),
            Raw::Word(w) => Err(serde::de::Error::custom(format!(
                "patience must be a positive integer or \"unbounded\", got {w:?}"
            ))),
        }
    }
}

/// Tracks the entropy trace and decides when to stop.
///
/// A step counts as progress only when it sets a strict new global minimum;
/// ties and plateaus use up patience.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    patience: Patience,
    best: f64,
    best_step: usize,
    last_step: usize,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: Patience) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_step: 0,
            last_step: 0,
            stale: 0,
        }
    }

    /// Feeds the entropy of `step` (steps must be consecutive from 0) and
    /// returns `true` once adaptation should stop.
    pub fn observe(&mut self, step: usize, entropy: f64) -> bool {
        self.last_step = step;
        if entropy < self.best {
            self.best = entropy;
            self.best_step = step;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.should_stop()
    }

    pub fn should_stop(&self) -> bool {
        matches!(self.patience, Patience::Steps(p) if self.stale >= p)
    }

    pub fn best_step(&self) -> usize {
        self.best_step
    }

    pub fn best_entropy(&self) -> f64 {
        self.best
    }

    /// Step whose model is returned: the entropy argmin, or the last step
    /// when patience is unbounded.
    pub fn selected_step(&self) -> usize {
        match self.patience {
            Patience::Steps(_) => self.best_step,
            Patience::Unbounded => self.last_step,
        }
    }
}

/// One row of the test-time adaptation trace. Step 0 is the unadapted model.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AdaptStepTrace {
    pub step: usize,
    pub accuracy: Option<f64>,
    pub personalization_loss: f64,
    pub entropy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TestAdaptConfig {
    pub max_steps: usize,
    pub patience: Patience,
    pub eta_inner: f64,
    /// Keep stepping to `max_steps` even after the stop rule fires. The
    /// returned model and `stopped_at` still follow the rule.
    pub run_full: bool,
}

#[derive(Clone, Debug)]
pub struct TestAdaptOutcome {
    pub params: ModelParams,
    pub selected_step: usize,
    /// Step at which the stop rule fired, or the last step run.
    pub stopped_at: usize,
    pub trace: Vec<AdaptStepTrace>,
    /// Adaptation hit a non-finite entropy and fell back to the best so far.
    pub non_finite: bool,
}

/// Per-step scorer for the trace: maps logits to an accuracy.
pub type Scorer<'a> = &'a dyn Fn(&Tensor) -> Result<f64>;

/// Gradient steps on the personalization loss with the adaptation model
/// frozen, using the whole unlabeled dataset at every step.
pub fn test_adapt(
    psi: &ModelParams,
    phi: &ModelParams,
    x: &Tensor,
    cfg: &TestAdaptConfig,
    scorer: Option<Scorer<'_>>,
) -> Result<TestAdaptOutcome> {
    if cfg.max_steps == 0 {
        return Err(Error::Config(
            "test adaptation needs at least one step".into(),
        ));
    }
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut trace = Vec::new();
    let mut current = psi.clone();
    let mut best = psi.clone();
    let mut last = psi.clone();
    let mut stopped_at = None;
    let mut non_finite = false;

    let mut z = forward_prediction(current.tensors(), x)?;
    for step in 0..=cfg.max_steps {
        let entropy = ops::mean(&ops::entropy_logits(&z)?).item();
        if !entropy.is_finite() {
            non_finite = true;
            log::warn!(
                "test adaptation: non-finite entropy at step {step}, keeping step {}",
                stopper.best_step()
            );
            break;
        }
        let l_per = personalization_loss(phi.tensors(), &z)?.item();
        let accuracy = scorer.map(|s| s(&z)).transpose()?;
        trace.push(AdaptStepTrace {
            step,
            accuracy,
            personalization_loss: l_per,
            entropy,
        });
        if stopped_at.is_none() {
            let stop = stopper.observe(step, entropy);
            if stopper.best_step() == step {
                best = current.clone();
            }
            last = current.clone();
            if stop {
                stopped_at = Some(step);
            }
        }
        if step == cfg.max_steps || (stopped_at.is_some() && !cfg.run_full) {
            break;
        }

        let graph = Graph::new();
        let psi_t = current.attach(&graph);
        let loss = personalization_loss(phi.tensors(), &forward_prediction(&psi_t, x)?)?;
        let wrt: Vec<&Tensor> = psi_t.iter().collect();
        let grads = grad(&loss, &wrt, false)?;
        current = current.sgd_step(&grads, cfg.eta_inner);
        z = forward_prediction(current.tensors(), x)?;
    }
    if trace.is_empty() {
        return Err(Error::NonFinite("entropy of the unadapted model".into()));
    }
    let stopped_at = stopped_at.unwrap_or(stopper.last_step);
    let (params, selected_step) = if non_finite || cfg.patience != Patience::Unbounded {
        (best, stopper.best_step())
    } else {
        (last, stopper.selected_step())
    };
    Ok(TestAdaptOutcome {
        params,
        selected_step,
        stopped_at,
        trace,
        non_finite,
    })
}
