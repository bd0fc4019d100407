use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers plus a step counter, one pair per parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update over an aligned parameter/gradient list.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::InvalidInput(format!(
            "adam_step: {} params, {} grads, {} state buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let pd = p.data_mut();
        let md = m.data_mut();
        let vd = v.data_mut();
        for i in 0..pd.len() {
            let gi = g.data()[i];
            md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gi;
            vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            pd[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = vec![Tensor::vector(vec![1.0, -2.0, 3.0])];
        let grads = vec![Tensor::zeros(vec![3])];
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, &AdamConfig::default()).unwrap();
        assert_eq!(params[0].data(), &[1.0, -2.0, 3.0]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign_of_gradient() {
        let cfg = AdamConfig::default();
        let mut params = vec![Tensor::vector(vec![0.5, 0.5])];
        let grads = vec![Tensor::vector(vec![3.0, -0.01])];
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, &cfg).unwrap();
        // bias-corrected m_hat/sqrt(v_hat) has magnitude ~1 at step one
        assert!((params[0].data()[0] - (0.5 - cfg.lr)).abs() < 1e-5);
        assert!((params[0].data()[1] - (0.5 + cfg.lr)).abs() < 1e-5);
    }

    #[test]
    fn converges_on_convex_quadratic() {
        let target = [0.7f32, -1.1, 2.4];
        let mut params = vec![Tensor::vector(vec![0.0; 3])];
        let mut state = AdamState::new(&params);
        let cfg = AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        };
        for _ in 0..200 {
            let grad: Vec<f32> = params[0]
                .data()
                .iter()
                .zip(&target)
                .map(|(x, c)| 2.0 * (x - c))
                .collect();
            adam_step(&mut params, &[Tensor::vector(grad)], &mut state, &cfg).unwrap();
        }
        let dist: f32 = params[0]
            .data()
            .iter()
            .zip(&target)
            .map(|(x, c)| (x - c) * (x - c))
            .sum::<f32>()
            .sqrt();
        assert!(dist < 1e-2, "distance to optimum {}", dist);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut params = vec![Tensor::vector(vec![1.0, 2.0])];
        let grads = vec![Tensor::vector(vec![1.0])];
        let mut state = AdamState::new(&params);
        assert!(adam_step(&mut params, &grads, &mut state, &AdamConfig::default()).is_err());
    }
}
