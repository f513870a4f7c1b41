//! POI point-wise embedding: attention from the POI-id query over the POI's
//! matched category words (ids as keys, word token vectors as values) plus
//! the geohash cell term. No MLP or layer norm is applied on top.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::init::{linear_init, normal_vec, word_unit_vector};
use crate::tape::{NodeId, ParamId, ParamStore, Tape};

const TOKEN_SALT: u64 = 0x70706531;

#[derive(Clone, Debug)]
pub struct PpelParams {
    pub e_poi: ParamId,
    pub e_cat_id: ParamId,
    /// Category word token vectors; frozen unless configured otherwise,
    /// mirroring fixed pretrained token embeddings.
    pub e_cat_token: ParamId,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub dim: usize,
}

impl PpelParams {
    pub fn init(
        store: &mut ParamStore,
        num_pois: usize,
        pool: &[String],
        dim: usize,
        unfreeze_tokens: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let e_poi = store.add("ppel.e_poi", num_pois, dim, normal_vec(rng, num_pois * dim, 0.1));
        let e_cat_id =
            store.add("ppel.e_cat_id", pool.len(), dim, normal_vec(rng, pool.len() * dim, 0.1));
        let mut token_data = Vec::with_capacity(pool.len() * dim);
        for word in pool {
            token_data.extend(word_unit_vector(word, dim, TOKEN_SALT));
        }
        let e_cat_token = store.add("ppel.e_cat_token", pool.len(), dim, token_data);
        store.set_trainable(e_cat_token, unfreeze_tokens);
        let w_q = store.add("ppel.w_q", dim, dim, linear_init(rng, dim, dim));
        let w_k = store.add("ppel.w_k", dim, dim, linear_init(rng, dim, dim));
        let w_v = store.add("ppel.w_v", dim, dim, linear_init(rng, dim, dim));
        Self { e_poi, e_cat_id, e_cat_token, w_q, w_k, w_v, dim }
    }

    fn check_inputs(&self, store: &ParamStore, poi_id: usize, word_ids: &[usize]) -> Result<()> {
        let table = store.get(self.e_poi);
        if poi_id >= table.rows {
            return Err(Error::Lookup(format!("unknown poi id {poi_id}")));
        }
        if word_ids.is_empty() {
            return Err(Error::Lookup(format!("poi {poi_id} has no matched category words")));
        }
        let pool_rows = store.get(self.e_cat_id).rows;
        if let Some(&bad) = word_ids.iter().find(|&&w| w >= pool_rows) {
            return Err(Error::Lookup(format!("category word id {bad} outside pool")));
        }
        Ok(())
    }

    /// Softmax attention weights of the POI query over its matched words.
    pub fn attention_node(&self, tape: &mut Tape, poi_id: usize, word_ids: &[usize]) -> NodeId {
        let q_raw = tape.param_row(self.e_poi, poi_id);
        let w_q = tape.param(self.w_q);
        let q = tape.matmul(q_raw, w_q);
        let key_rows: Vec<NodeId> =
            word_ids.iter().map(|&w| tape.param_row(self.e_cat_id, w)).collect();
        let keys_raw = tape.concat_rows(&key_rows);
        let w_k = tape.param(self.w_k);
        let keys = tape.matmul(keys_raw, w_k);
        let logits = tape.matmul_trans_b(q, keys);
        let scaled = tape.scale(logits, 1.0 / (self.dim as f64).sqrt());
        tape.softmax_rows(scaled)
    }

    /// The point-wise embedding `s_i`; `geo` is the containing cell's vector.
    pub fn ppe_node(&self, tape: &mut Tape, poi_id: usize, word_ids: &[usize], geo: NodeId) -> NodeId {
        let attn = self.attention_node(tape, poi_id, word_ids);
        let value_rows: Vec<NodeId> =
            word_ids.iter().map(|&w| tape.param_row(self.e_cat_token, w)).collect();
        let values_raw = tape.concat_rows(&value_rows);
        let w_v = tape.param(self.w_v);
        let values = tape.matmul(values_raw, w_v);
        let blended = tape.matmul(attn, values);
        tape.add(blended, geo)
    }

    pub fn attention_weights(
        &self,
        store: &ParamStore,
        poi_id: usize,
        word_ids: &[usize],
    ) -> Result<Vec<f64>> {
        self.check_inputs(store, poi_id, word_ids)?;
        let mut tape = Tape::new(store);
        let attn = self.attention_node(&mut tape, poi_id, word_ids);
        Ok(tape.value(attn).to_vec())
    }

    pub fn compute_ppe(
        &self,
        store: &ParamStore,
        poi_id: usize,
        word_ids: &[usize],
        geo: (ParamId, usize),
    ) -> Result<Vec<f64>> {
        self.check_inputs(store, poi_id, word_ids)?;
        let mut tape = Tape::new(store);
        let geo_node = tape.param_row(geo.0, geo.1);
        let s = self.ppe_node(&mut tape, poi_id, word_ids, geo_node);
        Ok(tape.value(s).to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use crate::init::uniform_seeded;

    fn setup(dim: usize, pool_len: usize, seed: u64) -> (ParamStore, PpelParams, ParamId) {
        let mut store = ParamStore::new();
        let mut rng = uniform_seeded(seed);
        let pool: Vec<String> = (0..pool_len).map(|i| format!("word{i}")).collect();
        let ppel = PpelParams::init(&mut store, 4, &pool, dim, false, &mut rng);
        let geo = store.add("geo.cells", 2, dim, normal_vec(&mut rng, 2 * dim, 0.1));
        (store, ppel, geo)
    }

    #[test]
    fn singleton_word_gets_weight_one_and_value_plus_geo() {
        let (store, ppel, geo) = setup(6, 5, 1);
        let weights = ppel.attention_weights(&store, 2, &[3]).unwrap();
        assert_eq!(weights, vec![1.0]);
        let s = ppel.compute_ppe(&store, 2, &[3], (geo, 0)).unwrap();
        let mut tape = Tape::new(&store);
        let tok = tape.param_row(ppel.e_cat_token, 3);
        let wv = tape.param(ppel.w_v);
        let val = tape.matmul(tok, wv);
        let expected: Vec<f64> = tape
            .value(val)
            .iter()
            .zip(store.get(geo).row(0))
            .map(|(a, b)| a + b)
            .collect();
        for (a, b) in s.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_query_projection_gives_uniform_weights() {
        let (mut store, ppel, _) = setup(6, 5, 2);
        store.get_mut(ppel.w_q).data.fill(0.0);
        let weights = ppel.attention_weights(&store, 0, &[0, 2, 4]).unwrap();
        for w in &weights {
            assert!((w - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_are_normalized_and_shift_invariant() {
        let (store, ppel, _) = setup(8, 7, 3);
        let w = ppel.attention_weights(&store, 1, &[0, 1, 5, 6]).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(w.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn matches_dense_algebra_oracle() {
        // Direct evaluation with plain loops, independent of the tape.
        let (store, ppel, geo) = setup(4, 3, 4);
        let word_ids = [0usize, 1, 2];
        let d = 4usize;
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let matvec = |m: &[f64], v: &[f64]| -> Vec<f64> {
            // v (1 x d) times m (d x d), row-major
            (0..d).map(|j| (0..d).map(|i| v[i] * m[i * d + j]).sum()).collect()
        };
        let q = matvec(&store.get(ppel.w_q).data, store.get(ppel.e_poi).row(2));
        let mut logits = Vec::new();
        for &w in &word_ids {
            let k = matvec(&store.get(ppel.w_k).data, store.get(ppel.e_cat_id).row(w));
            logits.push(dot(&q, &k) / (d as f64).sqrt());
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        let mut expected = store.get(geo).row(1).to_vec();
        for (i, &w) in word_ids.iter().enumerate() {
            let v = matvec(&store.get(ppel.w_v).data, store.get(ppel.e_cat_token).row(w));
            for j in 0..d {
                expected[j] += exps[i] / z * v[j];
            }
        }
        let got = ppel.compute_ppe(&store, 2, &word_ids, (geo, 1)).unwrap();
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (mut store, ppel, geo) = setup(4, 3, 5);
        let word_ids = vec![0usize, 2];
        let probe: Vec<f64> = (0..4).map(|i| 0.3 + 0.2 * i as f64).collect();
        let pids = [ppel.e_poi, ppel.e_cat_id, ppel.e_cat_token, ppel.w_q, ppel.w_k, ppel.w_v, geo];
        let report = check_gradients(&mut store, &pids, |s| {
            let mut tape = Tape::new(s);
            let geo_node = tape.param_row(geo, 0);
            let ppe = ppel.ppe_node(&mut tape, 1, &word_ids, geo_node);
            let probe_node = tape.constant(probe.clone(), 1, 4);
            let weighted = tape.mul(ppe, probe_node);
            let loss = tape.sum_all(weighted);
            let tanh = tape.tanh(loss);
            let grads = tape.backward(tanh);
            (tape.scalar_value(tanh), grads)
        });
        assert!(report.max_rel_err < 1e-4, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn shared_words_and_cell_differ_only_through_poi_rows() {
        let (mut store, ppel, geo) = setup(4, 3, 6);
        let words = vec![0usize, 1];
        let a = ppel.compute_ppe(&store, 0, &words, (geo, 0)).unwrap();
        let b = ppel.compute_ppe(&store, 1, &words, (geo, 0)).unwrap();
        assert_ne!(a, b);
        // Swap the two query rows: the PPEs must swap exactly.
        let row0 = store.get(ppel.e_poi).row(0).to_vec();
        let row1 = store.get(ppel.e_poi).row(1).to_vec();
        let cols = store.get(ppel.e_poi).cols;
        store.get_mut(ppel.e_poi).data[0..cols].copy_from_slice(&row1);
        store.get_mut(ppel.e_poi).data[cols..2 * cols].copy_from_slice(&row0);
        let a2 = ppel.compute_ppe(&store, 0, &words, (geo, 0)).unwrap();
        let b2 = ppel.compute_ppe(&store, 1, &words, (geo, 0)).unwrap();
        assert_eq!(a, b2);
        assert_eq!(b, a2);
    }

    #[test]
    fn unknown_poi_or_empty_words_error() {
        let (store, ppel, geo) = setup(4, 3, 7);
        assert!(matches!(ppel.compute_ppe(&store, 99, &[0], (geo, 0)), Err(Error::Lookup(_))));
        assert!(matches!(ppel.compute_ppe(&store, 0, &[], (geo, 0)), Err(Error::Lookup(_))));
    }
}
