//! The assembled model: point-wise POI embeddings feed the intention
//! encoder, intentions select preference prompts, and the backbone consumes
//! `[H, user, prompts]` before the task heads. Ablation flags rewire the
//! forward graph while keeping the disconnected parameters in place (frozen),
//! so shared components initialize identically across variants.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::{
    assemble_input, split_alpha_beta, BackboneConfig, BackboneParams, TaskMode,
};
use crate::data::types::{CheckinRecord, Vocabulary};
use crate::error::{Error, Result};
use crate::geocode::{GeoEmbeddingTable, GeohashConfig};
use crate::heads::{HeadParams, HeadsConfig};
use crate::htpp::{HtppConfig, PromptPool, PromptSelection};
use crate::init::{linear_init, normal_vec, uniform_seeded};
use crate::ppel::PpelParams;
use crate::tape::{NodeId, ParamId, ParamStore, Tape};
use crate::vimn::{interval_encode, periodic_encode, VimnConfig, VimnParams};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    /// Omit prompt tokens from the assembled input.
    pub no_htpp: bool,
    /// Replace the intention encoder with one linear layer per record.
    pub no_vimn: bool,
    /// Represent each POI by a plain learnable vector.
    pub no_ppel: bool,
    /// Force the small standard transformer backbone (the default here).
    pub no_llm: bool,
}

impl AblationFlags {
    pub fn parse(name: &str) -> Result<Self> {
        let mut f = Self::default();
        f.set(name)?;
        Ok(f)
    }

    pub fn set(&mut self, name: &str) -> Result<()> {
        match name {
            "no_htpp" => self.no_htpp = true,
            "no_vimn" => self.no_vimn = true,
            "no_ppel" => self.no_ppel = true,
            "no_llm" => self.no_llm = true,
            other => return Err(Error::Argument(format!("unknown ablation flag {other:?}"))),
        }
        Ok(())
    }

    pub fn active(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if self.no_htpp {
            v.push("no_htpp");
        }
        if self.no_vimn {
            v.push("no_vimn");
        }
        if self.no_ppel {
            v.push("no_ppel");
        }
        if self.no_llm {
            v.push("no_llm");
        }
        v
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Shared embedding width (PPE width, intention width, backbone io).
    pub embed_dim: usize,
    pub geohash_precision: usize,
    pub vimn: VimnConfig,
    pub htpp: HtppConfig,
    pub backbone: BackboneConfig,
    pub heads: HeadsConfig,
    pub ppel_unfreeze_tokens: bool,
    pub ablation: AblationFlags,
}

impl ModelConfig {
    /// Paper-scale defaults (embedding width 256, four-layer backbone).
    pub fn with_dim(embed_dim: usize) -> Self {
        Self {
            embed_dim,
            geohash_precision: 6,
            vimn: VimnConfig::new(embed_dim),
            htpp: HtppConfig::default(),
            backbone: BackboneConfig::new(embed_dim),
            heads: HeadsConfig::default(),
            ppel_unfreeze_tokens: false,
            ablation: AblationFlags::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        self.vimn.validate()?;
        self.backbone.validate()?;
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::with_dim(256)
    }
}

pub struct MobilityModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub ppel: PpelParams,
    pub vimn: VimnParams,
    pub htpp: PromptPool,
    pub backbone: BackboneParams,
    pub heads: HeadParams,
    pub user_table: ParamId,
    pub geo_cells: ParamId,
    pub geo_table: GeoEmbeddingTable,
    /// poi id -> row of `geo_cells`.
    poi_cell_rows: Vec<usize>,
    /// poi id -> matched category word ids.
    poi_words: Vec<Vec<usize>>,
    /// Per-record replacement layer, present only under `no_vimn`.
    vimn_fc: Option<(ParamId, ParamId)>,
    pub num_pois: usize,
    pub num_users: usize,
}

/// Everything the heads need from one forward pass.
pub struct ForwardPass {
    pub alpha: NodeId,
    pub beta: Option<NodeId>,
    pub n: usize,
    pub token_count: usize,
    pub h_values: Vec<Vec<f64>>,
    pub h_mat: NodeId,
    pub selection: Option<PromptSelection>,
}

impl MobilityModel {
    pub fn new(
        cfg: ModelConfig,
        vocab: &Vocabulary,
        domain_words: &[(String, Vec<String>)],
        seed: u64,
    ) -> Result<Self> {
        let mut cfg = cfg;
        if cfg.ablation.no_llm {
            cfg.backbone.variant = crate::backbone::BackboneVariant::Transformer;
        }
        cfg.validate()?;
        let d = cfg.embed_dim;
        let mut store = ParamStore::new();
        let mut rng = uniform_seeded(seed);

        let mut geo_table = GeoEmbeddingTable::new(GeohashConfig {
            precision: cfg.geohash_precision,
            embed_dim: d,
        })?;
        let mut poi_cell_rows = Vec::with_capacity(vocab.num_pois());
        for poi in &vocab.poi_table {
            poi_cell_rows.push(geo_table.intern(poi.lat, poi.lon)?);
        }
        let geo_cells = store.add_zeros("geo.cells", geo_table.len().max(1), d);

        let ppel = PpelParams::init(
            &mut store,
            vocab.num_pois(),
            &vocab.category_word_pool,
            d,
            cfg.ppel_unfreeze_tokens,
            &mut rng,
        );
        let vimn = VimnParams::init(&mut store, cfg.vimn.clone(), d, d, &mut rng)?;
        let htpp = PromptPool::init(&mut store, cfg.htpp.clone(), domain_words, d, &mut rng)?;
        let backbone = BackboneParams::init(&mut store, cfg.backbone.clone(), d, &mut rng)?;
        let heads = HeadParams::init(
            &mut store,
            cfg.heads.clone(),
            d,
            vocab.num_pois(),
            vocab.num_users(),
            &mut rng,
        )?;
        let user_table = store.add(
            "user.embed",
            vocab.num_users(),
            d,
            normal_vec(&mut rng, vocab.num_users() * d, 0.1),
        );

        let vimn_fc = if cfg.ablation.no_vimn {
            let d_in = d + cfg.vimn.time.width() + 1;
            let w = store.add("vimn_fc.w", d_in, d, linear_init(&mut rng, d_in, d));
            let b = store.add_zeros("vimn_fc.b", 1, d);
            Some((w, b))
        } else {
            None
        };

        let poi_words = vocab.poi_table.iter().map(|p| p.category_word_ids.clone()).collect();
        let mut model = Self {
            cfg,
            store,
            ppel,
            vimn,
            htpp,
            backbone,
            heads,
            user_table,
            geo_cells,
            geo_table,
            poi_cell_rows,
            poi_words,
            vimn_fc,
            num_pois: vocab.num_pois(),
            num_users: vocab.num_users(),
        };
        model.apply_ablation_freezing();
        Ok(model)
    }

    // Disconnected components keep their tensors but stop training.
    fn apply_ablation_freezing(&mut self) {
        let ab = self.cfg.ablation;
        if ab.no_ppel {
            for pid in [self.ppel.w_q, self.ppel.w_k, self.ppel.w_v, self.ppel.e_cat_id, self.ppel.e_cat_token] {
                self.store.set_trainable(pid, false);
            }
            self.store.set_trainable(self.geo_cells, false);
        }
        if ab.no_vimn {
            for pid in self.vimn.param_ids() {
                self.store.set_trainable(pid, false);
            }
        }
        if ab.no_htpp {
            for pid in self.htpp.param_ids() {
                self.store.set_trainable(pid, false);
            }
        }
    }

    pub fn poi_word_ids(&self, poi_id: usize) -> Result<&[usize]> {
        self.poi_words
            .get(poi_id)
            .map(|w| w.as_slice())
            .ok_or_else(|| Error::Lookup(format!("unknown poi id {poi_id}")))
    }

    fn ppe_for_record(&self, tape: &mut Tape, poi_id: usize) -> Result<NodeId> {
        if poi_id >= self.num_pois {
            return Err(Error::Lookup(format!("unknown poi id {poi_id}")));
        }
        if self.cfg.ablation.no_ppel {
            return Ok(tape.param_row(self.ppel.e_poi, poi_id));
        }
        let geo = tape.param_row(self.geo_cells, self.poi_cell_rows[poi_id]);
        let words = self.poi_words[poi_id].clone();
        Ok(self.ppel.ppe_node(tape, poi_id, &words, geo))
    }

    /// Per-record intention vectors for a (non-empty) run of records.
    pub fn encode_records(&self, tape: &mut Tape, records: &[CheckinRecord]) -> Result<Vec<NodeId>> {
        if records.is_empty() {
            return Err(Error::Argument("cannot encode an empty record run".into()));
        }
        let ppes: Vec<NodeId> = records
            .iter()
            .map(|r| self.ppe_for_record(tape, r.poi_id))
            .collect::<Result<_>>()?;
        if let Some((w, b)) = self.vimn_fc {
            let mut out = Vec::with_capacity(records.len());
            for (ppe, rec) in ppes.iter().zip(records) {
                let te = periodic_encode(rec.timestamp as f64, &self.cfg.vimn.time);
                let te_w = te.len();
                let te_node = tape.constant(te, 1, te_w);
                let dt = interval_encode(rec.delta_t as f64, self.cfg.vimn.delta_unit_secs)?;
                let dt_node = tape.constant(vec![dt], 1, 1);
                let joined = tape.concat_cols(&[*ppe, te_node, dt_node]);
                let w_node = tape.param(w);
                let b_node = tape.param(b);
                out.push(tape.affine(joined, w_node, b_node));
            }
            return Ok(out);
        }
        let times: Vec<(f64, f64)> =
            records.iter().map(|r| (r.timestamp as f64, r.delta_t as f64)).collect();
        self.vimn.encode_sequence_node(tape, &ppes, &times)
    }

    /// Full forward pass: encode, select prompts, assemble, run the
    /// backbone, and split at the intention boundary.
    pub fn forward(
        &self,
        tape: &mut Tape,
        records: &[CheckinRecord],
        user_id: Option<usize>,
        mode: TaskMode,
    ) -> Result<ForwardPass> {
        let hs = self.encode_records(tape, records)?;
        let h_values: Vec<Vec<f64>> = hs.iter().map(|&h| tape.value(h).to_vec()).collect();
        let h_mat = tape.concat_rows(&hs);

        let (selection, prompt_rows) = if self.cfg.ablation.no_htpp {
            (None, Vec::new())
        } else {
            let sel = self.htpp.select(&self.store, &h_values)?;
            let mut rows = Vec::with_capacity(sel.total_tokens());
            for (d, dom_sel) in sel.domains.iter().enumerate() {
                for &idx in &dom_sel.indices {
                    rows.push(tape.param_row(self.htpp.domains[d].values, idx));
                }
            }
            (Some(sel), rows)
        };

        let user_row = if mode.includes_user_token() {
            let uid = user_id
                .ok_or_else(|| Error::Lookup("task requires a user id".into()))?;
            if uid >= self.num_users {
                return Err(Error::Lookup(format!("unknown user id {uid}")));
            }
            Some(tape.param_row(self.user_table, uid))
        } else {
            None
        };

        let assembled = assemble_input(tape, h_mat, user_row, &prompt_rows, mode)?;
        let out = self.backbone.forward(tape, assembled.tokens)?;
        let ab = split_alpha_beta(tape, out, assembled.n)?;
        Ok(ForwardPass {
            alpha: ab.alpha,
            beta: ab.beta,
            n: assembled.n,
            token_count: assembled.token_count,
            h_values,
            h_mat,
            selection,
        })
    }

    /// Counts of (total, trainable) parameters grouped by component prefix.
    pub fn census(&self) -> ParamCensus {
        let mut by_component: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for (_, t) in self.store.iter() {
            let prefix = t.name.split('.').next().unwrap_or("misc").to_string();
            let e = by_component.entry(prefix).or_insert((0, 0));
            e.0 += t.len();
            if t.trainable {
                e.1 += t.len();
            }
        }
        ParamCensus {
            total: self.store.total_params(),
            trainable: self.store.trainable_params(),
            by_component,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCensus {
    pub total: usize,
    pub trainable: usize,
    pub by_component: BTreeMap<String, (usize, usize)>,
}
