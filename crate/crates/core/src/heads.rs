//! Task heads: the multi-class next-location head over the beta block, the
//! mean-pooled user classifier over alpha and beta, and the log-normal
//! mixture arrival-time head with closed-form expectation and sampling.

use rand::Rng as _;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::linear_init;
use crate::tape::{NodeId, ParamId, ParamStore, Tape};

pub const SCALE_FLOOR: f64 = 1e-6;
const LN_2PI: f64 = 1.8378770664093453;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BetaPooling {
    Mean,
    Last,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HeadsConfig {
    /// Mixture component count of the arrival-time head.
    pub k_mix: usize,
    pub beta_pooling: BetaPooling,
}

impl Default for HeadsConfig {
    fn default() -> Self {
        Self { k_mix: 16, beta_pooling: BetaPooling::Mean }
    }
}

/// Mixture weights on the simplex, unconstrained means, positive scales.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl MixtureParams {
    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 || self.means.len() != k || self.scales.len() != k {
            return Err(Error::Argument("mixture parameter lengths disagree".into()));
        }
        if (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::Argument("mixture weights must sum to 1".into()));
        }
        if self.scales.iter().any(|&s| s <= 0.0) {
            return Err(Error::Argument("mixture scales must be positive".into()));
        }
        Ok(())
    }

    /// Maps model-space parameters to data space under `log t = a + b x`.
    pub fn denormalized(&self, norm: &LogTimeNormalizer) -> MixtureParams {
        MixtureParams {
            weights: self.weights.clone(),
            means: self.means.iter().map(|m| norm.mean + norm.std * m).collect(),
            scales: self.scales.iter().map(|s| norm.std * s).collect(),
        }
    }
}

/// Global log inter-event time statistics of the training split; the model
/// predicts normalized log-times and this maps them back to seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogTimeNormalizer {
    pub mean: f64,
    pub std: f64,
}

impl LogTimeNormalizer {
    pub fn identity() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }

    /// Fits to the positive inter-event times (seconds) of the training set.
    pub fn fit(deltas: impl IntoIterator<Item = f64>) -> Self {
        let logs: Vec<f64> = deltas.into_iter().filter(|&d| d > 0.0).map(f64::ln).collect();
        if logs.is_empty() {
            return Self::identity();
        }
        let mean = logs.iter().sum::<f64>() / logs.len() as f64;
        let var = logs.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / logs.len() as f64;
        let std = var.sqrt();
        Self { mean, std: if std > 0.0 { std } else { 1.0 } }
    }
}

fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m.is_infinite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Log density of the weighted log-normal mixture at `tau`.
pub fn mixture_log_density(tau: f64, p: &MixtureParams) -> Result<f64> {
    if tau <= 0.0 {
        return Err(Error::Argument(format!("mixture density needs tau > 0, got {tau}")));
    }
    p.validate()?;
    let lt = tau.ln();
    let terms: Vec<f64> = p
        .weights
        .iter()
        .zip(p.means.iter().zip(&p.scales))
        .map(|(&w, (&mu, &s))| {
            let z = (lt - mu) / s;
            w.ln() - lt - s.ln() - 0.5 * LN_2PI - 0.5 * z * z
        })
        .collect();
    Ok(logsumexp(&terms))
}

/// Closed-form expected arrival interval after de-normalization:
/// `sum_k w_k exp(a + b mu_k + b^2 s_k^2 / 2)`.
pub fn mixture_expectation(p: &MixtureParams, norm: &LogTimeNormalizer) -> f64 {
    p.weights
        .iter()
        .zip(p.means.iter().zip(&p.scales))
        .map(|(&w, (&mu, &s))| {
            let bs = norm.std * s;
            w * (norm.mean + norm.std * mu + 0.5 * bs * bs).exp()
        })
        .sum()
}

/// Ancestral sampling: component by weight, then a log-normal draw mapped
/// back to seconds. Deterministic per seed.
pub fn mixture_sample(p: &MixtureParams, norm: &LogTimeNormalizer, count: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let u: f64 = rng.gen();
        let mut k = p.weights.len() - 1;
        let mut acc = 0.0;
        for (i, &w) in p.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let z: f64 = StandardNormal.sample(&mut rng);
        let x = p.means[k] + p.scales[k] * z;
        out.push((norm.mean + norm.std * x).exp());
    }
    out
}

/// Raw tape nodes of the arrival-time head before constraints.
#[derive(Clone, Copy, Debug)]
pub struct TpNodes {
    pub weight_logits: NodeId,
    pub means: NodeId,
    pub scale_pre: NodeId,
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub cfg: HeadsConfig,
    pub dim: usize,
    pub lp_w: ParamId,
    pub lp_b: ParamId,
    pub tul_w: ParamId,
    pub tul_b: ParamId,
    pub tp_w_w: ParamId,
    pub tp_w_b: ParamId,
    pub tp_mu_w: ParamId,
    pub tp_mu_b: ParamId,
    pub tp_s_w: ParamId,
    pub tp_s_b: ParamId,
}

impl HeadParams {
    pub fn init(
        store: &mut ParamStore,
        cfg: HeadsConfig,
        dim: usize,
        num_pois: usize,
        num_users: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if cfg.k_mix == 0 {
            return Err(Error::Config("mixture needs at least one component".into()));
        }
        let k = cfg.k_mix;
        Ok(Self {
            cfg,
            dim,
            lp_w: store.add("heads.lp_w", dim, num_pois, linear_init(rng, dim, num_pois)),
            lp_b: store.add_zeros("heads.lp_b", 1, num_pois),
            tul_w: store.add("heads.tul_w", dim, num_users, linear_init(rng, dim, num_users)),
            tul_b: store.add_zeros("heads.tul_b", 1, num_users),
            tp_w_w: store.add("heads.tp_w_w", dim, k, linear_init(rng, dim, k)),
            tp_w_b: store.add_zeros("heads.tp_w_b", 1, k),
            tp_mu_w: store.add("heads.tp_mu_w", dim, k, linear_init(rng, dim, k)),
            tp_mu_b: store.add_zeros("heads.tp_mu_b", 1, k),
            tp_s_w: store.add("heads.tp_s_w", dim, k, linear_init(rng, dim, k)),
            tp_s_b: store.add_zeros("heads.tp_s_b", 1, k),
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![
            self.lp_w, self.lp_b, self.tul_w, self.tul_b, self.tp_w_w, self.tp_w_b, self.tp_mu_w,
            self.tp_mu_b, self.tp_s_w, self.tp_s_b,
        ]
    }

    /// Reduces the beta block to a single row per the configured pooling.
    pub fn pool_beta(&self, tape: &mut Tape, beta: NodeId) -> NodeId {
        match self.cfg.beta_pooling {
            BetaPooling::Mean => tape.mean_rows(beta),
            BetaPooling::Last => {
                let (rows, _) = tape.shape(beta);
                tape.slice_rows(beta, rows - 1, 1)
            }
        }
    }

    pub fn lp_logits_node(&self, tape: &mut Tape, beta: NodeId) -> NodeId {
        let pooled = self.pool_beta(tape, beta);
        let w = tape.param(self.lp_w);
        let b = tape.param(self.lp_b);
        tape.affine(pooled, w, b)
    }

    /// Next-location probability vector (sums to one).
    pub fn lp_probs_node(&self, tape: &mut Tape, beta: NodeId) -> NodeId {
        let logits = self.lp_logits_node(tape, beta);
        tape.softmax_rows(logits)
    }

    pub fn lp_loss_node(&self, tape: &mut Tape, beta: NodeId, target_poi: usize) -> NodeId {
        let logits = self.lp_logits_node(tape, beta);
        tape.cross_entropy_logits(logits, target_poi)
    }

    fn tul_pooled(&self, tape: &mut Tape, alpha: NodeId, beta: Option<NodeId>) -> NodeId {
        let joined = match beta {
            Some(b) => tape.concat_rows(&[alpha, b]),
            None => alpha,
        };
        tape.mean_rows(joined)
    }

    pub fn tul_logits_node(&self, tape: &mut Tape, alpha: NodeId, beta: Option<NodeId>) -> NodeId {
        let pooled = self.tul_pooled(tape, alpha, beta);
        let w = tape.param(self.tul_w);
        let b = tape.param(self.tul_b);
        tape.affine(pooled, w, b)
    }

    pub fn tul_probs_node(&self, tape: &mut Tape, alpha: NodeId, beta: Option<NodeId>) -> NodeId {
        let logits = self.tul_logits_node(tape, alpha, beta);
        tape.softmax_rows(logits)
    }

    pub fn tul_loss_node(
        &self,
        tape: &mut Tape,
        alpha: NodeId,
        beta: Option<NodeId>,
        target_user: usize,
    ) -> NodeId {
        let logits = self.tul_logits_node(tape, alpha, beta);
        tape.cross_entropy_logits(logits, target_user)
    }

    /// The three affine maps from pooled beta to mixture pre-activations.
    pub fn tp_nodes(&self, tape: &mut Tape, beta: NodeId) -> TpNodes {
        let pooled = self.pool_beta(tape, beta);
        let ww = tape.param(self.tp_w_w);
        let wb = tape.param(self.tp_w_b);
        let mw = tape.param(self.tp_mu_w);
        let mb = tape.param(self.tp_mu_b);
        let sw = tape.param(self.tp_s_w);
        let sb = tape.param(self.tp_s_b);
        TpNodes {
            weight_logits: tape.affine(pooled, ww, wb),
            means: tape.affine(pooled, mw, mb),
            scale_pre: tape.affine(pooled, sw, sb),
        }
    }

    /// Constrained mixture parameters as tape nodes: softmax weights,
    /// free means, softplus-floored scales.
    pub fn tp_constrained(&self, tape: &mut Tape, tp: TpNodes) -> (NodeId, NodeId, NodeId) {
        let w = tape.softmax_rows(tp.weight_logits);
        let sp = tape.softplus(tp.scale_pre);
        let s = tape.add_scalar(sp, SCALE_FLOOR);
        (w, tp.means, s)
    }

    pub fn tp_params(&self, store: &ParamStore, beta_rows: &[Vec<f64>]) -> Result<MixtureParams> {
        if beta_rows.is_empty() {
            return Err(Error::Argument("beta block is empty".into()));
        }
        let mut tape = Tape::new(store);
        let flat: Vec<f64> = beta_rows.iter().flatten().copied().collect();
        let beta = tape.constant(flat, beta_rows.len(), self.dim);
        let tp = self.tp_nodes(&mut tape, beta);
        let (w, mu, s) = self.tp_constrained(&mut tape, tp);
        Ok(MixtureParams {
            weights: tape.value(w).to_vec(),
            means: tape.value(mu).to_vec(),
            scales: tape.value(s).to_vec(),
        })
    }

    /// Closed-form expectation node in seconds.
    pub fn tp_expectation_node(&self, tape: &mut Tape, tp: TpNodes, norm: &LogTimeNormalizer) -> NodeId {
        let (w, mu, s) = self.tp_constrained(tape, tp);
        let bmu = tape.scale(mu, norm.std);
        let s2 = tape.mul(s, s);
        let bs2 = tape.scale(s2, 0.5 * norm.std * norm.std);
        let sum = tape.add(bmu, bs2);
        let shifted = tape.add_scalar(sum, norm.mean);
        let per_component = tape.exp(shifted);
        let weighted = tape.mul(w, per_component);
        tape.sum_all(weighted)
    }

    pub fn tp_mae_loss_node(
        &self,
        tape: &mut Tape,
        tp: TpNodes,
        norm: &LogTimeNormalizer,
        target_secs: f64,
    ) -> Result<NodeId> {
        if target_secs <= 0.0 {
            return Err(Error::Argument(format!("arrival target must be positive, got {target_secs}")));
        }
        let e = self.tp_expectation_node(tape, tp, norm);
        let diff = tape.add_scalar(e, -target_secs);
        Ok(tape.abs(diff))
    }

    /// Negative log density of the target under the de-normalized mixture.
    pub fn tp_nll_loss_node(
        &self,
        tape: &mut Tape,
        tp: TpNodes,
        norm: &LogTimeNormalizer,
        target_secs: f64,
    ) -> Result<NodeId> {
        if target_secs <= 0.0 {
            return Err(Error::Argument(format!("arrival target must be positive, got {target_secs}")));
        }
        let (w, mu, s) = self.tp_constrained(tape, tp);
        let lt = target_secs.ln();
        // Data-space parameters.
        let mu_d = tape.scale(mu, norm.std);
        let mu_d = tape.add_scalar(mu_d, norm.mean);
        let s_d = tape.scale(s, norm.std);
        let neg_mu = tape.scale(mu_d, -1.0);
        let centered = tape.add_scalar(neg_mu, lt);
        let z = tape.div(centered, s_d);
        let z2 = tape.mul(z, z);
        let ln_w = tape.ln(w);
        let ln_s = tape.ln(s_d);
        let t = tape.sub(ln_w, ln_s);
        let t = tape.add_scalar(t, -0.5 * LN_2PI - lt);
        let half_z2 = tape.scale(z2, 0.5);
        let terms = tape.sub(t, half_z2);
        let ll = tape.log_sum_exp_row(terms);
        Ok(tape.scale(ll, -1.0))
    }
}
