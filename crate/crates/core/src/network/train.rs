use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::config::{NetConfig, TrainConfig};
use super::model::{record, NetInput, Probes, Targets};
use super::params::{Grads, Params};
use crate::error::Error;
use crate::par;
use crate::synthdata::SamplePair;

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Grads,
    v: Grads,
    t: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(params: &Params, cfg: &TrainConfig) -> Self {
        Self {
            m: Grads::zeros_like(params),
            v: Grads::zeros_like(params),
            t: 0,
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        }
    }

    pub fn step(&mut self, params: &mut Params, g: &Grads) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        };
        for (i, layer) in params.layers_mut().iter_mut().enumerate() {
            update(&mut layer.weight, &g.weight[i], &mut self.m.weight[i], &mut self.v.weight[i]);
            update(&mut layer.bias, &g.bias[i], &mut self.m.bias[i], &mut self.v.bias[i]);
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at step {step}: {reason}")]
    Diverged {
        step: usize,
        reason: String,
        /// Parameters before the failing step.
        last_good: Box<Params>,
        trace: Vec<f64>,
    },
    #[error(transparent)]
    Invalid(#[from] Error),
}

/// Trained parameters and the mean batch loss before each update.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: Params,
    pub trace: Vec<f64>,
}

/// Mean loss and gradient over a batch. Samples are evaluated in parallel and
/// summed in index order.
pub fn batch_loss_and_grads(batch: &[&SamplePair], params: &Params, cfg: &NetConfig) -> Result<(f64, Grads), Error> {
    let parts = par::map_slice(batch, |s| -> Result<(f64, Grads), Error> {
        let r = record(&NetInput::from_sample(s), params, cfg, Some(&Targets::from_sample(s)), &Probes::default())?;
        Ok((r.loss_value().expect("targets given"), r.grads(params)?))
    });
    let mut total = 0.0;
    let mut grads = Grads::zeros_like(params);
    for part in parts {
        let (l, g) = part?;
        total += l;
        grads.add_assign(&g);
    }
    let n = batch.len() as f64;
    grads.scale(1.0 / n);
    Ok((total / n, grads))
}

/// Train from a seeded initialisation. `on_eval` runs every
/// `tcfg.eval_every` steps and after the last one.
pub fn train_with(
    data: &[SamplePair],
    cfg: &NetConfig,
    tcfg: &TrainConfig,
    seed: u64,
    mut on_eval: impl FnMut(usize, &Params),
) -> Result<TrainOutcome, TrainError> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()).into());
    }
    tcfg.validate()?;
    let params = Params::init(cfg, seed)?;
    train_from(params, data, cfg, tcfg, seed, &mut on_eval)
}

/// [`train_with`] without evaluation hooks.
pub fn train(data: &[SamplePair], cfg: &NetConfig, tcfg: &TrainConfig, seed: u64) -> Result<TrainOutcome, TrainError> {
    train_with(data, cfg, tcfg, seed, |_, _| {})
}

/// Continue training from given parameters.
pub fn train_from(
    mut params: Params,
    data: &[SamplePair],
    cfg: &NetConfig,
    tcfg: &TrainConfig,
    seed: u64,
    on_eval: &mut dyn FnMut(usize, &Params),
) -> Result<TrainOutcome, TrainError> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()).into());
    }
    tcfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5E_ED0F_BA7C);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = data.len();
    let mut adam = Adam::new(&params, tcfg);
    let mut trace = Vec::with_capacity(tcfg.steps);
    let bs = tcfg.batch_size.min(data.len());
    for step in 0..tcfg.steps {
        let mut batch = Vec::with_capacity(bs);
        while batch.len() < bs {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&data[order[cursor]]);
            cursor += 1;
        }
        let diverged = |reason: String, trace: Vec<f64>, params: &Params| TrainError::Diverged {
            step,
            reason,
            last_good: Box::new(params.clone()),
            trace,
        };
        let (loss, grads) = batch_loss_and_grads(&batch, &params, cfg)?;
        if !loss.is_finite() {
            return Err(diverged(format!("loss {loss}"), trace, &params));
        }
        if let Some(k) = grads.first_non_finite(&params) {
            return Err(diverged(format!("non-finite gradient in layer {k}"), trace, &params));
        }
        trace.push(loss);
        log::debug!("step {step} loss {loss:.6}");
        adam.step(&mut params, &grads);
        if tcfg.eval_every > 0 && (step + 1) % tcfg.eval_every == 0 {
            on_eval(step + 1, &params);
        }
    }
    if tcfg.eval_every == 0 || !tcfg.steps.is_multiple_of(tcfg.eval_every) {
        on_eval(tcfg.steps, &params);
    }
    Ok(TrainOutcome { params, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::params::{Branch, ParamKey};
    use crate::synthdata::{generate, translating_square};

    fn tiny() -> NetConfig {
        NetConfig {
            num_scales: 2,
            enc_channels: 3,
            dec_channels: 3,
            dec_layers: 2,
            att_layers: 2,
            enc_layers: 2,
            ..Default::default()
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = tiny();
        let mut p = Params::init(&cfg, 0).unwrap();
        let before = p.clone();
        let mut g = Grads::zeros_like(&p);
        g.weight[0][0] = 3.0;
        g.weight[0][1] = -0.01;
        let mut adam = Adam::new(&p, &TrainConfig::default());
        adam.step(&mut p, &g);
        let d0 = before.layers()[0].weight[0] - p.layers()[0].weight[0];
        let d1 = before.layers()[0].weight[1] - p.layers()[0].weight[1];
        assert!((d0 - 1e-4).abs() < 1e-9);
        assert!((d1 + 1e-4).abs() < 1e-8);
        assert_eq!(before.layers()[1], p.layers()[1]);
    }

    #[test]
    fn zero_lr_keeps_params_and_trace() {
        let cfg = tiny();
        let s = generate(&translating_square(), 0).unwrap();
        let tc = TrainConfig {
            lr: 0.0,
            steps: 3,
            batch_size: 1,
            ..Default::default()
        };
        let out = train(std::slice::from_ref(&s), &cfg, &tc, 5).unwrap();
        assert_eq!(out.params, Params::init(&cfg, 5).unwrap());
        assert!(out.trace.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn divergence_returns_last_good() {
        let cfg = tiny();
        let s = generate(&translating_square(), 0).unwrap();
        let mut p = Params::init(&cfg, 1).unwrap();
        let i = p.layer_index(ParamKey {
            branch: Branch::Fusion,
            scale: 0,
            layer: 0,
        });
        p.layers_mut()[i].bias[0] = f64::NAN;
        let tc = TrainConfig {
            steps: 2,
            batch_size: 1,
            ..Default::default()
        };
        let err = train_from(p.clone(), std::slice::from_ref(&s), &cfg, &tc, 0, &mut |_, _| {}).unwrap_err();
        match err {
            TrainError::Diverged { step, last_good, .. } => {
                assert_eq!(step, 0);
                assert_eq!(last_good.layers()[0], p.layers()[0]);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn empty_dataset_is_rejected() {
        assert!(matches!(
            train(&[], &tiny(), &TrainConfig::default(), 0),
            Err(TrainError::Invalid(_))
        ));
    }
}
