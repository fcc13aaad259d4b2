use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Result;
use crate::autodiff::{AutodiffError, ParamStore, Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch statistics gathered by one forward pass for one batch-norm layer.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub prefix: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// One forward pass: a tape plus the weights bound onto it.
///
/// Parameters under a frozen prefix are bound as constants and their
/// dropout/batch-norm layers run in inference mode.
pub struct Ctx<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    bound: HashMap<String, Var>,
    train: bool,
    frozen: Vec<String>,
    rng: ChaCha8Rng,
    bn: Vec<BnUpdate>,
}

impl<'s> Ctx<'s> {
    pub fn new(store: &'s ParamStore, train: bool, frozen: &[&str], seed: u64) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: HashMap::new(),
            train,
            frozen: frozen.iter().map(|s| s.to_string()).collect(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            bn: Vec::new(),
        }
    }

    /// Inference mode, nothing trainable.
    pub fn eval(store: &'s ParamStore) -> Self {
        Self::new(store, false, &[], 0)
    }

    pub fn is_training(&self, name: &str) -> bool {
        self.train && !self.frozen.iter().any(|f| name.starts_with(f.as_str()))
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let p = self.store.get(name).ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))?;
        let grad = p.trainable && self.is_training(name);
        let v = self.tape.leaf(p.value.clone(), grad);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    fn buffer(&self, name: &str) -> Result<&'s Tensor> {
        Ok(self.store.value(name)?)
    }

    /// `x·W + b` with `prefix.w: [in, out]`, `prefix.b: [out]`.
    pub fn linear(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let w = self.param(&format!("{}.w", prefix))?;
        let b = self.param(&format!("{}.b", prefix))?;
        Ok(self.tape.linear(x, w, Some(b))?)
    }

    pub fn dropout(&mut self, prefix: &str, x: Var, p: f64) -> Result<Var> {
        if p > 0.0 && self.is_training(prefix) {
            Ok(self.tape.dropout(x, p, &mut self.rng)?)
        } else {
            Ok(x)
        }
    }

    /// Row batch norm with `prefix.{g,b}` affine weights and `prefix.{rm,rv}`
    /// running statistics.
    pub fn batch_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let g = self.param(&format!("{}.g", prefix))?;
        let b = self.param(&format!("{}.b", prefix))?;
        let rows = self.tape.shape(x)[0];
        if self.is_training(prefix) && rows > 1 {
            let s = self.tape.batch_norm_train(x, g, b, BN_EPS)?;
            self.bn.push(BnUpdate { prefix: prefix.to_string(), mean: s.mean, var: s.var });
            Ok(s.out)
        } else {
            let mean = self.buffer(&format!("{}.rm", prefix))?.data();
            let var = self.buffer(&format!("{}.rv", prefix))?.data();
            Ok(self.tape.batch_norm_eval(x, g, b, mean, var, BN_EPS)?)
        }
    }

    /// Linear → ELU → dropout → linear → ELU → batch norm.
    pub fn mlp(&mut self, prefix: &str, x: Var, dropout: f64) -> Result<Var> {
        let h = self.linear(&format!("{}.l1", prefix), x)?;
        let h = self.tape.elu(h);
        let h = self.dropout(prefix, h, dropout)?;
        self.mlp_tail(prefix, h)
    }

    /// The part of [`Ctx::mlp`] after the first hidden activation, for callers
    /// that compute the first layer themselves.
    pub fn mlp_tail(&mut self, prefix: &str, h: Var) -> Result<Var> {
        let h = self.linear(&format!("{}.l2", prefix), h)?;
        let h = self.tape.elu(h);
        self.batch_norm(&format!("{}.bn", prefix), h)
    }

    pub fn bound(&self) -> &HashMap<String, Var> {
        &self.bound
    }

    pub fn bn_updates(&self) -> &[BnUpdate] {
        &self.bn
    }

    pub fn into_parts(self) -> (Tape, HashMap<String, Var>, Vec<BnUpdate>) {
        (self.tape, self.bound, self.bn)
    }
}

/// Folds batch statistics into the running buffers.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate]) {
    for u in updates {
        for (suffix, stat) in [("rm", &u.mean), ("rv", &u.var)] {
            if let Some(p) = store.get_mut(&format!("{}.{}", u.prefix, suffix)) {
                p.value
                    .data_mut()
                    .iter_mut()
                    .zip(stat.iter())
                    .for_each(|(r, s)| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * s);
            }
        }
    }
}
