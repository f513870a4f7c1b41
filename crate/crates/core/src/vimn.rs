//! Visiting-intention encoder: a recurrent cell whose forget gate is driven
//! by the logarithmically encoded inter-visit interval, followed by a gated
//! feed-forward fusion over the most recent `r` cycle outputs and PPEs.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::linear_init;
use crate::tape::{NodeId, ParamId, ParamStore, Tape};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TimeEncodingConfig {
    /// Periods in seconds, strictly increasing; defaults to hour/day/week.
    pub periods_secs: Vec<f64>,
}

impl Default for TimeEncodingConfig {
    fn default() -> Self {
        Self { periods_secs: vec![3600.0, 86_400.0, 604_800.0] }
    }
}

impl TimeEncodingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.periods_secs.is_empty() {
            return Err(Error::Config("at least one periodic-encoding period required".into()));
        }
        if self.periods_secs.iter().any(|&p| p <= 0.0) {
            return Err(Error::Config("periodic-encoding periods must be positive".into()));
        }
        if self.periods_secs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("periodic-encoding periods must be strictly increasing".into()));
        }
        Ok(())
    }

    /// Angular frequencies in radians per second, decreasing with period.
    pub fn omegas(&self) -> Vec<f64> {
        self.periods_secs.iter().map(|p| std::f64::consts::TAU / p).collect()
    }

    pub fn width(&self) -> usize {
        2 * self.periods_secs.len()
    }
}

/// Interleaved `[cos w1 t, sin w1 t, ..., cos wk t, sin wk t]`.
pub fn periodic_encode(t_secs: f64, cfg: &TimeEncodingConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(cfg.width());
    for omega in cfg.omegas() {
        let phase = omega * t_secs;
        out.push(phase.cos());
        out.push(phase.sin());
    }
    out
}

/// `log(1 + dt / unit)`, the scalar that modulates the forget gate.
pub fn interval_encode(delta_secs: f64, unit_secs: f64) -> Result<f64> {
    if delta_secs < 0.0 {
        return Err(Error::Argument(format!("negative time interval {delta_secs}")));
    }
    Ok((delta_secs / unit_secs).ln_1p())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VimnConfig {
    /// Window length of recent cycles entering the fusion.
    pub r: usize,
    pub hidden: usize,
    /// Width of the first fusion layer.
    pub fusion_hidden: usize,
    pub time: TimeEncodingConfig,
    pub delta_unit_secs: f64,
}

impl VimnConfig {
    pub fn new(hidden: usize) -> Self {
        Self {
            r: 4,
            hidden,
            fusion_hidden: hidden,
            time: TimeEncodingConfig::default(),
            delta_unit_secs: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.time.validate()?;
        if self.r == 0 || self.hidden == 0 || self.fusion_hidden == 0 {
            return Err(Error::Config("vimn dimensions must be positive".into()));
        }
        if self.delta_unit_secs <= 0.0 {
            return Err(Error::Config("vimn delta unit must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct VimnParams {
    pub cfg: VimnConfig,
    /// PPE width entering the fusion window.
    pub ppe_dim: usize,
    /// Output width of the fused intention vectors.
    pub out_dim: usize,
    pub w_in: ParamId,
    pub w_f: ParamId,
    pub b_f: ParamId,
    pub w_u: ParamId,
    pub b_u: ParamId,
    pub w_gx: ParamId,
    pub b_gx: ParamId,
    pub w_gz: ParamId,
    pub b_gz: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub w3: ParamId,
    pub b3: ParamId,
}

impl VimnParams {
    pub fn init(
        store: &mut ParamStore,
        cfg: VimnConfig,
        ppe_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden;
        let te = cfg.time.width();
        let dxz = cfg.r * ppe_dim + cfg.r * h;
        let d1 = cfg.fusion_hidden;
        let w_in = store.add("vimn.w_in", te, h, linear_init(rng, te, h));
        let w_f = store.add("vimn.w_f", 1, h, linear_init(rng, 1, h));
        let b_f = store.add_zeros("vimn.b_f", 1, h);
        let w_u = store.add("vimn.w_u", h, h, linear_init(rng, h, h));
        let b_u = store.add_zeros("vimn.b_u", 1, h);
        let w_gx = store.add("vimn.fuse.w_gx", ppe_dim, ppe_dim, linear_init(rng, ppe_dim, ppe_dim));
        let b_gx = store.add_zeros("vimn.fuse.b_gx", 1, ppe_dim);
        let w_gz = store.add("vimn.fuse.w_gz", h, h, linear_init(rng, h, h));
        let b_gz = store.add_zeros("vimn.fuse.b_gz", 1, h);
        let w1 = store.add("vimn.fuse.w1", dxz, d1, linear_init(rng, dxz, d1));
        let b1 = store.add_zeros("vimn.fuse.b1", 1, d1);
        // The second layer maps back to the concatenation width so the
        // residual connection lines up.
        let w2 = store.add("vimn.fuse.w2", d1, dxz, linear_init(rng, d1, dxz));
        let b2 = store.add_zeros("vimn.fuse.b2", 1, dxz);
        let w3 = store.add("vimn.fuse.w3", dxz, out_dim, linear_init(rng, dxz, out_dim));
        let b3 = store.add_zeros("vimn.fuse.b3", 1, out_dim);
        Ok(Self {
            cfg,
            ppe_dim,
            out_dim,
            w_in,
            w_f,
            b_f,
            w_u,
            b_u,
            w_gx,
            b_gx,
            w_gz,
            b_gz,
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![
            self.w_in, self.w_f, self.b_f, self.w_u, self.b_u, self.w_gx, self.b_gx, self.w_gz,
            self.b_gz, self.w1, self.b1, self.w2, self.b2, self.w3, self.b3,
        ]
    }

    /// `sigmoid(w_f * dT + b_f)`, elementwise over the hidden width.
    pub fn forget_gate_node(&self, tape: &mut Tape, delta_encoded: f64) -> NodeId {
        let w_f = tape.param(self.w_f);
        let scaled = tape.scale(w_f, delta_encoded);
        let b_f = tape.param(self.b_f);
        let pre = tape.add(scaled, b_f);
        tape.sigmoid(pre)
    }

    /// One recurrent cycle: `z = sigmoid(W_in T(t) + tanh(W_u H + b_u) * G_forget(dT))`.
    /// The new hidden state is `z` itself.
    pub fn gru_step_node(
        &self,
        tape: &mut Tape,
        h_prev: NodeId,
        t_secs: f64,
        delta_secs: f64,
    ) -> Result<NodeId> {
        let te = periodic_encode(t_secs, &self.cfg.time);
        let width = te.len();
        let te_node = tape.constant(te, 1, width);
        let w_in = tape.param(self.w_in);
        let drive = tape.matmul(te_node, w_in);
        let w_u = tape.param(self.w_u);
        let hu = tape.matmul(h_prev, w_u);
        let b_u = tape.param(self.b_u);
        let pre_u = tape.add(hu, b_u);
        let update = tape.tanh(pre_u);
        let dt = interval_encode(delta_secs, self.cfg.delta_unit_secs)?;
        let forget = self.forget_gate_node(tape, dt);
        let gated = tape.mul(update, forget);
        let pre = tape.add(drive, gated);
        Ok(tape.sigmoid(pre))
    }

    /// Gated fusion of the `r`-windows of PPEs (`s_window`) and cycle outputs
    /// (`z_window`), both ordered oldest to newest and zero-padded in front
    /// when fewer than `r` records exist.
    pub fn fuse_window_node(
        &self,
        tape: &mut Tape,
        z_window: &[NodeId],
        s_window: &[NodeId],
    ) -> Result<NodeId> {
        let r = self.cfg.r;
        if z_window.len() > r || s_window.len() > r {
            return Err(Error::Config(format!(
                "window larger than r={r}: {} cycles, {} embeddings",
                z_window.len(),
                s_window.len()
            )));
        }
        let x = self.padded_window(tape, s_window, self.ppe_dim);
        let z = self.padded_window(tape, z_window, self.cfg.hidden);

        let w_gx = tape.param(self.w_gx);
        let b_gx = tape.param(self.b_gx);
        let gx_pre = tape.matmul(x, w_gx);
        let gx_pre = tape.broadcast_row_add(gx_pre, b_gx);
        let gx = tape.sigmoid(gx_pre);
        let xg = tape.mul(gx, x);

        let w_gz = tape.param(self.w_gz);
        let b_gz = tape.param(self.b_gz);
        let gz_pre = tape.matmul(z, w_gz);
        let gz_pre = tape.broadcast_row_add(gz_pre, b_gz);
        let gz = tape.sigmoid(gz_pre);
        let zg = tape.mul(gz, z);

        let xg_flat = tape.flatten_row(xg);
        let zg_flat = tape.flatten_row(zg);
        let xz = tape.concat_cols(&[xg_flat, zg_flat]);

        let w1 = tape.param(self.w1);
        let b1 = tape.param(self.b1);
        let h1_pre = tape.affine(xz, w1, b1);
        let h1 = tape.relu(h1_pre);
        let w2 = tape.param(self.w2);
        let b2 = tape.param(self.b2);
        let h2_pre = tape.affine(h1, w2, b2);
        let h2 = tape.relu(h2_pre);
        let h_norm = tape.layer_norm_rows(h2);
        let h_res = tape.add(h_norm, xz);
        let w3 = tape.param(self.w3);
        let b3 = tape.param(self.b3);
        Ok(tape.affine(h_res, w3, b3))
    }

    fn padded_window(&self, tape: &mut Tape, window: &[NodeId], width: usize) -> NodeId {
        let r = self.cfg.r;
        if window.len() == r {
            return tape.concat_rows(window);
        }
        let pad = tape.zeros(r - window.len(), width);
        let mut parts = vec![pad];
        parts.extend_from_slice(window);
        tape.concat_rows(&parts)
    }

    /// Runs the cell over a whole sequence of `(timestamp, delta)` pairs with
    /// their PPE nodes, producing one intention vector per record.
    pub fn encode_sequence_node(
        &self,
        tape: &mut Tape,
        ppes: &[NodeId],
        times: &[(f64, f64)],
    ) -> Result<Vec<NodeId>> {
        if ppes.is_empty() || ppes.len() != times.len() {
            return Err(Error::Config(format!(
                "sequence encoding needs matching non-empty inputs ({} ppes, {} times)",
                ppes.len(),
                times.len()
            )));
        }
        let r = self.cfg.r;
        let mut hidden = tape.zeros(1, self.cfg.hidden);
        let mut z_cycles: Vec<NodeId> = Vec::with_capacity(ppes.len());
        let mut out = Vec::with_capacity(ppes.len());
        for (i, (&ppe, &(t, dt))) in ppes.iter().zip(times).enumerate() {
            let z = self.gru_step_node(tape, hidden, t, dt)?;
            hidden = z;
            z_cycles.push(z);
            let lo = (i + 1).saturating_sub(r);
            let h = self.fuse_window_node(tape, &z_cycles[lo..=i], &ppes[lo..=i])?;
            out.push(h);
        }
        Ok(out)
    }

    // Pure wrappers used by diagnostics and unit tests.

    pub fn forget_gate(&self, store: &ParamStore, delta_encoded: f64) -> Vec<f64> {
        let mut tape = Tape::new(store);
        let g = self.forget_gate_node(&mut tape, delta_encoded);
        tape.value(g).to_vec()
    }

    pub fn gru_step(
        &self,
        store: &ParamStore,
        h_prev: &[f64],
        t_secs: f64,
        delta_secs: f64,
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::new(store);
        let h = tape.constant(h_prev.to_vec(), 1, self.cfg.hidden);
        let z = self.gru_step_node(&mut tape, h, t_secs, delta_secs)?;
        Ok(tape.value(z).to_vec())
    }

    pub fn encode_sequence(
        &self,
        store: &ParamStore,
        ppes: &[Vec<f64>],
        times: &[(f64, f64)],
    ) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new(store);
        let ppe_nodes: Vec<NodeId> =
            ppes.iter().map(|p| tape.constant(p.clone(), 1, self.ppe_dim)).collect();
        let hs = self.encode_sequence_node(&mut tape, &ppe_nodes, times)?;
        Ok(hs.into_iter().map(|h| tape.value(h).to_vec()).collect())
    }
}
