//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Exported moment buffers, keyed like the parameters.
pub type Moments = BTreeMap<String, (Vec<usize>, Vec<f64>)>;

pub struct AdamW {
    config: AdamWConfig,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters absent from `grads` are treated as
    /// having zero gradient, so their moments decay and weight decay still
    /// applies.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, var) in params.iter() {
            let theta = var.as_tensor();
            let g = match grads.get(theta) {
                Some(g) => g.detach(),
                None => theta.zeros_like()?,
            };
            let m_prev = match self.m.get(name) {
                Some(m) => m.clone(),
                None => theta.zeros_like()?,
            };
            let v_prev = match self.v.get(name) {
                Some(v) => v.clone(),
                None => theta.zeros_like()?,
            };
            let m = ((m_prev * c.beta1)? + (&g * (1.0 - c.beta1))?)?;
            let v = ((v_prev * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let update = m_hat.div(&(v_hat.sqrt()? + c.eps)?)?;
            let next = ((theta.detach() * (1.0 - c.lr * c.weight_decay))? - (update * c.lr)?)?;
            var.set(&next)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }

    pub fn export(&self) -> Result<(u64, Moments, Moments)> {
        Ok((self.step, export_map(&self.m)?, export_map(&self.v)?))
    }

    pub fn import(&mut self, params: &ParamStore, step: u64, m: &Moments, v: &Moments) -> Result<()> {
        self.step = step;
        self.m = import_map(params, m)?;
        self.v = import_map(params, v)?;
        Ok(())
    }
}

fn export_map(map: &BTreeMap<String, Tensor>) -> Result<Moments> {
    let mut out = BTreeMap::new();
    for (name, t) in map {
        let values = t.to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        out.insert(name.clone(), (t.dims().to_vec(), values));
    }
    Ok(out)
}

fn import_map(params: &ParamStore, values: &Moments) -> Result<BTreeMap<String, Tensor>> {
    let mut out = BTreeMap::new();
    for (name, (shape, data)) in values {
        let var = params
            .get(name)
            .ok_or_else(|| Error::Validation(format!("optimizer state for unknown parameter {name}")))?;
        if shape.as_slice() != var.dims() {
            return Err(Error::Validation(format!("optimizer state shape mismatch for {name}")));
        }
        let t = Tensor::from_vec(data.clone(), shape.as_slice(), params.device())?.to_dtype(params.dtype())?;
        out.insert(name.clone(), t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;
    use candle_core::DType;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new(DType::F64);
        let w = store.create("w", &[1], Init::Ones, &mut rng).unwrap();
        let config = AdamWConfig {
            lr: 0.1,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(config);
        let (mut theta, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for k in 1..=5 {
            // loss = theta^2
            let loss = w.as_tensor().sqr().unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            opt.step(&store, &grads).unwrap();
            let g = 2.0 * theta;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(k));
            let vh = v / (1.0 - 0.999f64.powi(k));
            theta = theta * (1.0 - 0.1 * 0.01) - 0.1 * mh / (vh.sqrt() + 1e-8);
            let got = w.as_tensor().to_vec1::<f64>().unwrap()[0];
            assert!((got - theta).abs() < 1e-12, "step {k}: {got} vs {theta}");
        }
    }

    #[test]
    fn state_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new(DType::F64);
        let w = store.create("w", &[3], Init::Normal { std: 1.0 }, &mut rng).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        let grads = w.as_tensor().sqr().unwrap().sum_all().unwrap().backward().unwrap();
        opt.step(&store, &grads).unwrap();
        let (step, m, v) = opt.export().unwrap();
        let mut other = AdamW::new(AdamWConfig::default());
        other.import(&store, step, &m, &v).unwrap();
        assert_eq!(other.export().unwrap(), (step, m, v));
    }
}
