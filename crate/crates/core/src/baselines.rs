//! Parameter-averaging baselines and entropy-minimizing test-time adaptation.

use crate::data::{BatchSampler, LabeledDataset, UnlabeledDataset};
use crate::error::{Error, Result};
use crate::models::{forward_prediction, ModelParams};
use crate::tensor::{grad, ops, Graph, Tensor};

/// `tau` SGD steps on cross-entropy.
pub fn fedavg_local_train(
    psi_r: &ModelParams,
    data: &LabeledDataset,
    lr: f64,
    tau: usize,
    batch: usize,
    seed: u64,
) -> Result<ModelParams> {
    fedprox_local_train(psi_r, data, lr, 0.0, tau, batch, seed)
}

/// `tau` SGD steps on `CE + mu/2 * ||psi - psi_r||^2`. The proximal term is
/// left out of the graph when `mu == 0`.
pub fn fedprox_local_train(
    psi_r: &ModelParams,
    data: &LabeledDataset,
    lr: f64,
    mu: f64,
    tau: usize,
    batch: usize,
    seed: u64,
) -> Result<ModelParams> {
    let mut psi = psi_r.clone();
    if tau == 0 {
        return Ok(psi);
    }
    let mut sampler = BatchSampler::new(data.len(), batch, seed)?;
    for step in 0..tau {
        let rows = sampler.next_rows();
        let x = data.features().select_rows(&rows);
        let y: Vec<usize> = rows.iter().map(|&r| data.labels()[r]).collect();
        let graph = Graph::new();
        let psi_t = psi.attach(&graph);
        let mut loss = ops::cross_entropy(&forward_prediction(&psi_t, &x)?, &y)?;
        if mu != 0.0 {
            loss = ops::add(
                &loss,
                &ops::scale(&proximal_sq_norm(&psi_t, psi_r)?, mu / 2.0),
            )?;
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "local step {step}: loss {}",
                loss.item()
            )));
        }
        let wrt: Vec<&Tensor> = psi_t.iter().collect();
        psi = psi.sgd_step(&grad(&loss, &wrt, false)?, lr);
    }
    Ok(psi)
}

/// `||psi - anchor||^2` summed over all tensors.
pub fn proximal_sq_norm(psi: &[Tensor], anchor: &ModelParams) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for (p, a) in psi.iter().zip(anchor.tensors()) {
        let d = ops::sub(p, a)?;
        let sq = ops::sum(&ops::mul(&d, &d)?);
        total = Some(match total {
            Some(t) => ops::add(&t, &sq)?,
            None => sq,
        });
    }
    total.ok_or_else(|| Error::Config("empty model".into()))
}

/// `steps` gradient steps on mean prediction entropy, updating every base
/// model parameter. Takes no labels.
pub fn tent_adapt(
    psi: &ModelParams,
    data: &UnlabeledDataset,
    steps: usize,
    lr: f64,
) -> Result<ModelParams> {
    let mut psi = psi.clone();
    for step in 0..steps {
        let graph = Graph::new();
        let psi_t = psi.attach(&graph);
        let z = forward_prediction(&psi_t, data.features())?;
        let h = ops::mean(&ops::entropy_logits(&z)?);
        if !h.is_finite() {
            return Err(Error::NonFinite(format!(
                "tent step {step}: entropy {}",
                h.item()
            )));
        }
        let wrt: Vec<&Tensor> = psi_t.iter().collect();
        psi = psi.sgd_step(&grad(&h, &wrt, false)?, lr);
    }
    Ok(psi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_base_task;
    use crate::eval::mean_prediction_entropy;
    use crate::models::MlpSpec;

    fn setup() -> (ModelParams, LabeledDataset) {
        let data = generate_base_task(3, 4, 90, 2).unwrap();
        let psi = ModelParams::init(&MlpSpec::new(vec![4, 8, 3]).unwrap(), 5);
        (psi, data)
    }

    fn loss(psi: &ModelParams, data: &LabeledDataset) -> f64 {
        let z = forward_prediction(psi.tensors(), data.features()).unwrap();
        ops::cross_entropy(&z, data.labels()).unwrap().item()
    }

    #[test]
    fn no_op_settings() {
        let (psi, data) = setup();
        assert_eq!(fedavg_local_train(&psi, &data, 0.1, 0, 16, 0).unwrap(), psi);
        assert_eq!(fedavg_local_train(&psi, &data, 0.0, 5, 16, 0).unwrap(), psi);
        assert_eq!(tent_adapt(&psi, &data.unlabeled(), 0, 0.1).unwrap(), psi);
    }

    #[test]
    fn training_reduces_loss() {
        let (psi, data) = setup();
        let after = fedavg_local_train(&psi, &data, 0.1, 20, 32, 1).unwrap();
        assert!(loss(&after, &data) < loss(&psi, &data));
    }

    #[test]
    fn prox_zero_is_fedavg_and_huge_prox_pins() {
        let (psi, data) = setup();
        let a = fedavg_local_train(&psi, &data, 0.1, 10, 16, 3).unwrap();
        let b = fedprox_local_train(&psi, &data, 0.1, 0.0, 10, 16, 3).unwrap();
        assert_eq!(a.flat(), b.flat());
        // Keep lr * mu < 2 so the proximal pull is a contraction.
        let pinned = fedprox_local_train(&psi, &data, 1e-9, 1e9, 20, 16, 3).unwrap();
        let drift = pinned
            .flat()
            .iter()
            .zip(psi.flat())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(drift < 1e-3, "{drift}");
    }

    #[test]
    fn prox_gradient_vanishes_at_anchor() {
        let (psi, _) = setup();
        let graph = Graph::new();
        let psi_t = psi.attach(&graph);
        let term = proximal_sq_norm(&psi_t, &psi).unwrap();
        let wrt: Vec<&Tensor> = psi_t.iter().collect();
        for g in grad(&term, &wrt, false).unwrap() {
            assert!(g.data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn tent_lowers_entropy() {
        let (psi, data) = setup();
        let before =
            mean_prediction_entropy(&forward_prediction(psi.tensors(), data.features()).unwrap())
                .unwrap();
        let adapted = tent_adapt(&psi, &data.unlabeled(), 5, 0.05).unwrap();
        let after = mean_prediction_entropy(
            &forward_prediction(adapted.tensors(), data.features()).unwrap(),
        )
        .unwrap();
        assert!(after <= before);
    }

    #[test]
    fn tent_uniform_fixed_point() {
        let spec = MlpSpec::new(vec![2, 3]).unwrap();
        let psi = ModelParams::zeros(&spec);
        let x = Tensor::matrix(2, 2, vec![1.0, -1.0, -1.0, 1.0]);
        let graph = Graph::new();
        let psi_t = psi.attach(&graph);
        let h = ops::mean(&ops::entropy_logits(&forward_prediction(&psi_t, &x).unwrap()).unwrap());
        let wrt: Vec<&Tensor> = psi_t.iter().collect();
        for g in grad(&h, &wrt, false).unwrap() {
            assert!(g.data().iter().all(|v| v.abs() < 1e-15), "{g:?}");
        }
    }
}
