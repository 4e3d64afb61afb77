//! Exponential moving average of the model weights.
//!
//! Per step: `shadow = decay * shadow + (1 - decay) * param` with
//! `decay = 0.5^(1/halflife)`. A halflife of zero means decay zero, i.e.
//! the shadow tracks the parameters exactly.

use crate::error::Result;
use crate::fit::ParamStore;
use crate::tensor::Tensor;

pub struct EmaState {
    pub halflife: f64,
    shadow: Vec<(String, Vec<f32>)>,
}

impl EmaState {
    pub fn new(params: &ParamStore<f32>, halflife: f64) -> Self {
        let shadow = params
            .iter()
            .map(|(n, t)| (n.to_string(), t.data().to_vec()))
            .collect();
        EmaState { halflife, shadow }
    }

    pub fn decay(&self) -> f64 {
        if self.halflife <= 0.0 {
            0.0
        } else {
            0.5f64.powf(1.0 / self.halflife)
        }
    }

    pub fn update(&mut self, params: &ParamStore<f32>) -> Result<()> {
        let d = self.decay() as f32;
        for (name, shadow) in &mut self.shadow {
            let p = params.get(name)?;
            for (s, &w) in shadow.iter_mut().zip(p.data()) {
                *s = d * *s + (1.0 - d) * w;
            }
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.shadow.iter().map(|(n, v)| (n.as_str(), v.as_slice()))
    }

    /// Shadow weights as a parameter store (for sampling with EMA weights).
    pub fn to_params(&self, reference: &ParamStore<f32>) -> Result<ParamStore<f32>> {
        let mut out = ParamStore::new();
        for (name, values) in &self.shadow {
            let shape = reference.get(name)?.shape().to_vec();
            out.insert(name, Tensor::var(values.clone(), &shape)?)?;
        }
        Ok(out)
    }

    /// Restore shadow values (checkpoint loading).
    pub fn load_values(&mut self, name: &str, values: Vec<f32>) -> Result<()> {
        for (n, v) in &mut self.shadow {
            if n == name {
                *v = values;
                return Ok(());
            }
        }
        Err(crate::error::Error::Checkpoint(format!(
            "EMA shadow `{name}` not found"
        )))
    }
}
