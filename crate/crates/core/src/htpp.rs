//! Travel-preference prompt pool: three domains of sixteen words each, held
//! as key-value pairs. Keys come from a trainable linear map of the value
//! vectors; per-sequence cosine scores against the intention vectors are
//! aggregated and the top-K values per domain are selected as prompt tokens.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::{linear_init, word_unit_vector};
use crate::tape::{NodeId, ParamId, ParamStore, Tape};

pub const DOMAIN_COUNT: usize = 3;
pub const WORDS_PER_DOMAIN: usize = 16;

const VALUE_SALT: u64 = 0x68747070;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Sum,
    Mean,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HtppConfig {
    /// Prompts selected per domain.
    pub k: usize,
    pub aggregation: Aggregation,
    pub unfreeze_values: bool,
    /// Weight of the optional key-alignment term that pulls selected keys
    /// toward the intention vectors; zero disables it.
    pub key_pull_weight: f64,
}

impl Default for HtppConfig {
    fn default() -> Self {
        Self { k: 4, aggregation: Aggregation::Sum, unfreeze_values: false, key_pull_weight: 0.0 }
    }
}

/// The three domain word lists shipped with the crate.
pub fn default_domain_words() -> Vec<(String, Vec<String>)> {
    let parse = |name: &str, text: &str| {
        (name.to_string(), text.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect())
    };
    vec![
        parse("occupation", include_str!("../data/prompts_occupation.txt")),
        parse("activity type", include_str!("../data/prompts_activity.txt")),
        parse("lifestyle", include_str!("../data/prompts_lifestyle.txt")),
    ]
}

/// Reads one replacement word list: plain text, sixteen lines, one word each.
pub fn load_domain_words(name: &str, path: &Path) -> Result<(String, Vec<String>)> {
    let text = std::fs::read_to_string(path)?;
    let words: Vec<String> =
        text.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect();
    if words.len() != WORDS_PER_DOMAIN {
        return Err(Error::Config(format!(
            "prompt pool file {} has {} words, expected {WORDS_PER_DOMAIN}",
            path.display(),
            words.len()
        )));
    }
    Ok((name.to_string(), words))
}

#[derive(Clone, Debug)]
pub struct PromptDomain {
    pub name: String,
    pub words: Vec<String>,
    /// `m x L_E` value vectors (word tokens).
    pub values: ParamId,
    /// `L_E x L_E` trainable key derivation.
    pub w_key: ParamId,
}

#[derive(Clone, Debug)]
pub struct PromptPool {
    pub config: HtppConfig,
    pub dim: usize,
    pub domains: Vec<PromptDomain>,
}

/// Per-domain top-K indices with their aggregated scores, best first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSelection {
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptSelection {
    pub domains: Vec<DomainSelection>,
}

impl PromptSelection {
    pub fn total_tokens(&self) -> usize {
        self.domains.iter().map(|d| d.indices.len()).sum()
    }
}

/// Cosine similarity, defined as zero when either norm vanishes.
pub fn score(h: &[f64], key: &[f64]) -> f64 {
    debug_assert_eq!(h.len(), key.len());
    let dot: f64 = h.iter().zip(key).map(|(a, b)| a * b).sum();
    let nh: f64 = h.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nk: f64 = key.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nh == 0.0 || nk == 0.0 {
        0.0
    } else {
        dot / (nh * nk)
    }
}

/// Aggregates per-record scores over the sequence for every key.
pub fn aggregate_scores(hs: &[Vec<f64>], keys: &[Vec<f64>], aggregation: Aggregation) -> Vec<f64> {
    let mut agg = vec![0.0; keys.len()];
    for h in hs {
        for (a, key) in agg.iter_mut().zip(keys) {
            *a += score(h, key);
        }
    }
    if aggregation == Aggregation::Mean && !hs.is_empty() {
        for a in agg.iter_mut() {
            *a /= hs.len() as f64;
        }
    }
    agg
}

/// Indices of the K largest aggregated scores, ties broken by lower index.
pub fn select_topk(aggregated: &[f64], k: usize) -> Result<DomainSelection> {
    if k == 0 || k > aggregated.len() {
        return Err(Error::Argument(format!("top-k {k} outside [1, {}]", aggregated.len())));
    }
    let mut order: Vec<usize> = (0..aggregated.len()).collect();
    order.sort_by(|&a, &b| {
        aggregated[b].partial_cmp(&aggregated[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    order.truncate(k);
    let scores = order.iter().map(|&i| aggregated[i]).collect();
    Ok(DomainSelection { indices: order, scores })
}

impl PromptPool {
    pub fn init(
        store: &mut ParamStore,
        config: HtppConfig,
        domain_words: &[(String, Vec<String>)],
        dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if domain_words.len() != DOMAIN_COUNT {
            return Err(Error::Config(format!(
                "prompt pool needs {DOMAIN_COUNT} domains, got {}",
                domain_words.len()
            )));
        }
        if config.k == 0 || config.k > WORDS_PER_DOMAIN {
            return Err(Error::Config(format!(
                "htpp k {} outside [1, {WORDS_PER_DOMAIN}]",
                config.k
            )));
        }
        let mut domains = Vec::with_capacity(DOMAIN_COUNT);
        for (d, (name, words)) in domain_words.iter().enumerate() {
            if words.len() != WORDS_PER_DOMAIN {
                return Err(Error::Config(format!(
                    "domain {name} has {} words, expected {WORDS_PER_DOMAIN}",
                    words.len()
                )));
            }
            let mut data = Vec::with_capacity(words.len() * dim);
            for w in words {
                data.extend(word_unit_vector(w, dim, VALUE_SALT ^ (d as u64)));
            }
            let values = store.add(&format!("htpp.d{d}.values"), words.len(), dim, data);
            store.set_trainable(values, config.unfreeze_values);
            let w_key = store.add(&format!("htpp.d{d}.w_key"), dim, dim, linear_init(rng, dim, dim));
            domains.push(PromptDomain { name: name.clone(), words: words.clone(), values, w_key });
        }
        Ok(Self { config, dim, domains })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.domains.iter().flat_map(|d| [d.values, d.w_key]).collect()
    }

    /// `k_m = W_key v_m` for every word of a domain, as an `m x L_E` node.
    pub fn keys_node(&self, tape: &mut Tape, domain: usize) -> NodeId {
        let values = tape.param(self.domains[domain].values);
        let w_key = tape.param(self.domains[domain].w_key);
        tape.matmul_trans_b(values, w_key)
    }

    pub fn derive_keys(&self, store: &ParamStore, domain: usize) -> Vec<Vec<f64>> {
        let mut tape = Tape::new(store);
        let keys = self.keys_node(&mut tape, domain);
        let (m, d) = tape.shape(keys);
        (0..m).map(|i| tape.value(keys)[i * d..(i + 1) * d].to_vec()).collect()
    }

    /// Scores the intention vectors against every domain and picks the
    /// top-K values per domain from the aggregated scores.
    pub fn select(&self, store: &ParamStore, hs: &[Vec<f64>]) -> Result<PromptSelection> {
        let mut domains = Vec::with_capacity(self.domains.len());
        for d in 0..self.domains.len() {
            let keys = self.derive_keys(store, d);
            let agg = aggregate_scores(hs, &keys, self.config.aggregation);
            domains.push(select_topk(&agg, self.config.k)?);
        }
        Ok(PromptSelection { domains })
    }

    /// Tape nodes of the aggregated scores for one domain (cosine of every
    /// `h_i` against every key, summed or averaged over records).
    pub fn aggregate_node(&self, tape: &mut Tape, domain: usize, h_mat: NodeId) -> NodeId {
        let keys = self.keys_node(tape, domain);
        let hn = tape.normalize_rows(h_mat);
        let kn = tape.normalize_rows(keys);
        let cos = tape.matmul_trans_b(hn, kn);
        let sums = tape.col_sums(cos);
        match self.config.aggregation {
            Aggregation::Sum => sums,
            Aggregation::Mean => {
                let (n, _) = tape.shape(h_mat);
                tape.scale(sums, 1.0 / n as f64)
            }
        }
    }

    /// Optional auxiliary term: the negated mean aggregated score of the
    /// selected keys, so minimizing it pulls keys toward the intentions that
    /// chose them. Returns `None` when disabled.
    pub fn key_pull_loss_node(
        &self,
        tape: &mut Tape,
        h_mat: NodeId,
        selection: &PromptSelection,
    ) -> Option<NodeId> {
        let w = self.config.key_pull_weight;
        if w == 0.0 {
            return None;
        }
        let mut picked = Vec::new();
        for (d, sel) in selection.domains.iter().enumerate() {
            let agg = self.aggregate_node(tape, d, h_mat);
            picked.push(tape.gather_cols(agg, &sel.indices));
        }
        let all = tape.concat_cols(&picked);
        let total = tape.sum_all(all);
        let count = selection.total_tokens().max(1) as f64;
        Some(tape.scale(total, -w / count))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use crate::init::uniform_seeded;

    fn setup(dim: usize, k: usize, seed: u64) -> (ParamStore, PromptPool) {
        let mut store = ParamStore::new();
        let mut rng = uniform_seeded(seed);
        let cfg = HtppConfig { k, ..Default::default() };
        let pool =
            PromptPool::init(&mut store, cfg, &default_domain_words(), dim, &mut rng).unwrap();
        (store, pool)
    }

    #[test]
    fn shipped_domain_lists_are_well_formed() {
        let domains = default_domain_words();
        assert_eq!(domains.len(), DOMAIN_COUNT);
        for (name, words) in &domains {
            assert_eq!(words.len(), WORDS_PER_DOMAIN, "domain {name}");
        }
    }

    #[test]
    fn identity_key_map_returns_values() {
        let (mut store, pool) = setup(4, 2, 1);
        let d = 4;
        let mut ident = vec![0.0; d * d];
        for i in 0..d {
            ident[i * d + i] = 1.0;
        }
        store.get_mut(pool.domains[0].w_key).data.copy_from_slice(&ident);
        let keys = pool.derive_keys(&store, 0);
        for (k, i) in keys.iter().zip(0..WORDS_PER_DOMAIN) {
            assert_eq!(k.as_slice(), store.get(pool.domains[0].values).row(i));
        }
    }

    #[test]
    fn zero_key_map_scores_zero() {
        let (mut store, pool) = setup(4, 2, 2);
        store.get_mut(pool.domains[0].w_key).data.fill(0.0);
        let keys = pool.derive_keys(&store, 0);
        let hs = vec![vec![0.5, -0.5, 0.2, 0.1]];
        let agg = aggregate_scores(&hs, &keys, Aggregation::Sum);
        assert!(agg.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn keys_match_dense_algebra_oracle() {
        let (store, pool) = setup(3, 2, 3);
        let keys = pool.derive_keys(&store, 1);
        let v = store.get(pool.domains[1].values);
        let w = &store.get(pool.domains[1].w_key).data;
        for (m, key) in keys.iter().enumerate() {
            for i in 0..3 {
                let expect: f64 = (0..3).map(|j| w[i * 3 + j] * v.row(m)[j]).sum();
                assert!((key[i] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cosine_score_special_cases() {
        let h = vec![0.3, -0.4, 0.5];
        let neg: Vec<f64> = h.iter().map(|v| -v).collect();
        assert!((score(&h, &h) - 1.0).abs() < 1e-12);
        assert!((score(&h, &neg) + 1.0).abs() < 1e-12);
        assert_eq!(score(&h, &[0.0, 0.0, 0.0]), 0.0);
        let orth = vec![0.4, 0.3, 0.0];
        assert!(score(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]).abs() < 1e-12);
        let _ = orth;
    }

    #[test]
    fn aggregation_is_linear_in_records() {
        let (store, pool) = setup(4, 2, 4);
        let keys = pool.derive_keys(&store, 0);
        let h = vec![vec![0.1, 0.2, -0.3, 0.4]];
        let single = aggregate_scores(&h, &keys, Aggregation::Sum);
        let doubled =
            aggregate_scores(&[h[0].clone(), h[0].clone()], &keys, Aggregation::Sum);
        for (s, d) in single.iter().zip(&doubled) {
            assert!((2.0 * s - d).abs() < 1e-12);
        }
        let mean = aggregate_scores(&[h[0].clone(), h[0].clone()], &keys, Aggregation::Mean);
        for (s, m) in single.iter().zip(&mean) {
            assert!((s - m).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_matches_double_loop_oracle() {
        let (store, pool) = setup(4, 2, 5);
        let keys = pool.derive_keys(&store, 2);
        let hs: Vec<Vec<f64>> = (0..5)
            .map(|i| (0..4).map(|j| ((i + j) as f64 * 0.37).sin()).collect())
            .collect();
        let agg = aggregate_scores(&hs, &keys, Aggregation::Sum);
        for (m, key) in keys.iter().enumerate() {
            let mut expect = 0.0;
            for h in &hs {
                expect += score(h, key);
            }
            assert!((agg[m] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn topk_picks_largest_with_index_tiebreak() {
        let sel = select_topk(&[0.9, 0.1, 0.5, 0.7], 2).unwrap();
        assert_eq!(sel.indices, vec![0, 3]);
        assert_eq!(sel.scores, vec![0.9, 0.7]);

        let tied = select_topk(&[0.5, 0.5, 0.5, 0.5], 2).unwrap();
        assert_eq!(tied.indices, vec![0, 1]);

        assert!(select_topk(&[0.1, 0.2], 0).is_err());
        assert!(select_topk(&[0.1, 0.2], 3).is_err());
    }

    #[test]
    fn topk_matches_full_sort_oracle() {
        let mut rng = uniform_seeded(9);
        use rand::Rng;
        for _ in 0..200 {
            let n = rng.gen_range(1..20);
            let k = rng.gen_range(1..=n);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let sel = select_topk(&scores, k).unwrap();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
            assert_eq!(sel.indices, order[..k]);
            for w in sel.scores.windows(2) {
                assert!(w[0] >= w[1]);
            }
        }
    }

    #[test]
    fn selection_is_invariant_under_positive_scaling() {
        let (store, pool) = setup(6, 3, 6);
        let hs: Vec<Vec<f64>> =
            (0..4).map(|i| (0..6).map(|j| ((i * 7 + j) as f64 * 0.31).cos()).collect()).collect();
        let base = pool.select(&store, &hs).unwrap();
        for c in [1e-6, 0.5, 3.0, 1e6] {
            let scaled: Vec<Vec<f64>> =
                hs.iter().map(|h| h.iter().map(|v| v * c).collect()).collect();
            let sel = pool.select(&store, &scaled).unwrap();
            assert_eq!(sel.domains.len(), base.domains.len());
            for (a, b) in sel.domains.iter().zip(&base.domains) {
                assert_eq!(a.indices, b.indices, "selection changed at scale {c}");
            }
        }
    }

    #[test]
    fn selection_shape_is_k_per_domain() {
        let (store, pool) = setup(5, 4, 7);
        let hs = vec![vec![0.2; 5]; 3];
        let sel = pool.select(&store, &hs).unwrap();
        assert_eq!(sel.domains.len(), 3);
        assert_eq!(sel.total_tokens(), 12);
        for d in &sel.domains {
            let mut uniq = d.indices.clone();
            uniq.sort_unstable();
            uniq.dedup();
            assert_eq!(uniq.len(), d.indices.len(), "indices must be distinct");
        }
    }

    #[test]
    fn aggregate_node_matches_pure_path_and_gradients_flow() {
        let (mut store, pool) = setup(4, 2, 8);
        let hs: Vec<Vec<f64>> =
            (0..3).map(|i| (0..4).map(|j| ((i + 2 * j) as f64 * 0.21).sin()).collect()).collect();
        // Forward equality.
        let mut tape = Tape::new(&store);
        let flat: Vec<f64> = hs.iter().flatten().copied().collect();
        let h_mat = tape.constant(flat.clone(), 3, 4);
        let agg_node = pool.aggregate_node(&mut tape, 0, h_mat);
        let keys = pool.derive_keys(&store, 0);
        let pure = aggregate_scores(&hs, &keys, Aggregation::Sum);
        for (a, b) in tape.value(agg_node).iter().zip(&pure) {
            assert!((a - b).abs() < 1e-12);
        }
        // Gradient fidelity of the score path into the key map, away from ties.
        let wk = pool.domains[0].w_key;
        let report = check_gradients(&mut store, &[wk], |s| {
            let mut t = Tape::new(s);
            let h = t.constant(flat.clone(), 3, 4);
            let agg = pool.aggregate_node(&mut t, 0, h);
            let picked = t.gather_cols(agg, &[0, 5, 11]);
            let sum = t.sum_all(picked);
            let loss = t.tanh(sum);
            let g = t.backward(loss);
            (t.scalar_value(loss), g)
        });
        assert!(report.max_rel_err < 1e-4, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn key_pull_loss_respects_config() {
        let (store, pool) = setup(4, 2, 10);
        let hs = vec![vec![0.4, -0.1, 0.3, 0.2]];
        let sel = pool.select(&store, &hs).unwrap();
        let mut tape = Tape::new(&store);
        let h_mat = tape.constant(hs[0].clone(), 1, 4);
        assert!(pool.key_pull_loss_node(&mut tape, h_mat, &sel).is_none());

        let (store2, mut pool2) = {
            let (s, mut p) = setup(4, 2, 10);
            p.config.key_pull_weight = 0.5;
            (s, p)
        };
        let mut tape2 = Tape::new(&store2);
        let h_mat2 = tape2.constant(hs[0].clone(), 1, 4);
        let sel2 = pool2.select(&store2, &hs).unwrap();
        let node = pool2.key_pull_loss_node(&mut tape2, h_mat2, &sel2).unwrap();
        assert!(tape2.scalar_value(node).is_finite());
        pool2.config.key_pull_weight = 0.0;
    }
}
