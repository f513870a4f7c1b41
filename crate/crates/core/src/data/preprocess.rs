//! Turns raw check-ins into reindexed sequences: trailing-window truncation,
//! fixed-point user/POI filtering, session cutting, and vocabulary building.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::categories::{default_word_pool, match_categories};
use crate::data::types::{CheckinRecord, CheckinSequence, PoiEntry, RawCheckin, Vocabulary};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub max_history_days: u32,
    pub min_user_records: usize,
    pub min_poi_visits: usize,
    pub session_gap_hours: f64,
    pub max_seq_len: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            max_history_days: 120,
            min_user_records: 10,
            min_poi_visits: 10,
            session_gap_hours: 24.0,
            max_seq_len: 64,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.session_gap_hours <= 0.0 {
            return Err(Error::Config("session_gap_hours must be positive".into()));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be at least 2".into()));
        }
        Ok(())
    }

    fn session_gap_secs(&self) -> i64 {
        (self.session_gap_hours * 3600.0).round() as i64
    }
}

// A record under processing; `order` is the original file position used to
// break timestamp ties.
#[derive(Clone)]
struct Rec {
    user: String,
    poi: String,
    timestamp: i64,
    lat: f64,
    lon: f64,
    category: String,
    order: usize,
}

/// Applies the preprocessing rules and reindexes everything densely.
///
/// User and POI thresholds, session cutting, and the discard of length-1
/// sessions all interact, so the whole pipeline is iterated to a fixed point:
/// every emitted record survives a re-run of all filters.
pub fn preprocess(raw: &[RawCheckin], cfg: &PreprocessConfig) -> Result<(Vec<CheckinSequence>, Vocabulary)> {
    cfg.validate()?;
    let mut recs: Vec<Rec> = raw
        .iter()
        .enumerate()
        .map(|(i, r)| Rec {
            user: r.user_key.clone(),
            poi: r.poi_key.clone(),
            timestamp: r.timestamp,
            lat: r.lat,
            lon: r.lon,
            category: r.category_text.clone(),
            order: i,
        })
        .collect();
    recs.sort_by(|a, b| (a.timestamp, a.order).cmp(&(b.timestamp, b.order)));

    // Trailing history window per user.
    let window_secs = cfg.max_history_days as i64 * 86_400;
    let mut max_ts: BTreeMap<&str, i64> = BTreeMap::new();
    for r in &recs {
        let e = max_ts.entry(&r.user).or_insert(r.timestamp);
        *e = (*e).max(r.timestamp);
    }
    let keep: Vec<bool> =
        recs.iter().map(|r| r.timestamp >= max_ts[r.user.as_str()] - window_secs).collect();
    let mut recs: Vec<Rec> =
        recs.into_iter().zip(keep).filter(|(_, k)| *k).map(|(r, _)| r).collect();

    let gap = cfg.session_gap_secs();
    loop {
        let before = recs.len();

        let mut user_counts: BTreeMap<&str, usize> = BTreeMap::new();
        for r in &recs {
            *user_counts.entry(&r.user).or_default() += 1;
        }
        let keep: Vec<bool> =
            recs.iter().map(|r| user_counts[r.user.as_str()] >= cfg.min_user_records).collect();
        let mut next: Vec<Rec> =
            recs.into_iter().zip(keep).filter(|(_, k)| *k).map(|(r, _)| r).collect();

        let mut poi_counts: BTreeMap<&str, usize> = BTreeMap::new();
        for r in &next {
            *poi_counts.entry(&r.poi).or_default() += 1;
        }
        let keep: Vec<bool> =
            next.iter().map(|r| poi_counts[r.poi.as_str()] >= cfg.min_poi_visits).collect();
        next = next.into_iter().zip(keep).filter(|(_, k)| *k).map(|(r, _)| r).collect();

        // Session cutting: survivors are records inside a session chunk of
        // length >= 2 after splitting at large gaps and the length cap.
        let mut survivors: Vec<Rec> = Vec::with_capacity(next.len());
        let mut by_user: BTreeMap<String, Vec<Rec>> = BTreeMap::new();
        for r in next {
            by_user.entry(r.user.clone()).or_default().push(r);
        }
        for (_, urecs) in by_user {
            let mut session: Vec<Rec> = Vec::new();
            let flush = |session: &mut Vec<Rec>, survivors: &mut Vec<Rec>| {
                for chunk in session.chunks(cfg.max_seq_len) {
                    if chunk.len() >= 2 {
                        survivors.extend_from_slice(chunk);
                    }
                }
                session.clear();
            };
            for r in urecs {
                if let Some(last) = session.last() {
                    if r.timestamp - last.timestamp > gap {
                        flush(&mut session, &mut survivors);
                    }
                }
                session.push(r);
            }
            flush(&mut session, &mut survivors);
        }
        survivors.sort_by(|a, b| (a.timestamp, a.order).cmp(&(b.timestamp, b.order)));
        recs = survivors;

        if recs.len() == before {
            break;
        }
    }

    if recs.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }

    // Dense vocabularies over the retained records, ids by sorted key.
    let pool = default_word_pool();
    let mut poi_keys: Vec<&str> = recs.iter().map(|r| r.poi.as_str()).collect();
    poi_keys.sort_unstable();
    poi_keys.dedup();
    let poi_ids: BTreeMap<&str, usize> =
        poi_keys.iter().enumerate().map(|(i, &k)| (k, i)).collect();
    let mut user_keys: Vec<&str> = recs.iter().map(|r| r.user.as_str()).collect();
    user_keys.sort_unstable();
    user_keys.dedup();
    let user_ids: BTreeMap<&str, usize> =
        user_keys.iter().enumerate().map(|(i, &k)| (k, i)).collect();

    // Coordinates and category text come from the first record (time order)
    // mentioning the POI.
    let mut poi_table: Vec<Option<PoiEntry>> = vec![None; poi_keys.len()];
    for r in &recs {
        let id = poi_ids[r.poi.as_str()];
        if poi_table[id].is_none() {
            poi_table[id] = Some(PoiEntry {
                key: r.poi.clone(),
                lat: r.lat,
                lon: r.lon,
                category_word_ids: match_categories(&r.category, &pool),
            });
        }
    }
    let vocab = Vocabulary {
        poi_table: poi_table.into_iter().map(|e| e.unwrap()).collect(),
        user_table: user_keys.iter().map(|k| k.to_string()).collect(),
        category_word_pool: pool,
    };

    // Re-cut the stable record set into the emitted sequences.
    let mut by_user: BTreeMap<usize, Vec<&Rec>> = BTreeMap::new();
    for r in &recs {
        by_user.entry(user_ids[r.user.as_str()]).or_default().push(r);
    }
    let mut sequences = Vec::new();
    for (user_id, urecs) in by_user {
        let mut sessions: Vec<Vec<&Rec>> = Vec::new();
        let mut session: Vec<&Rec> = Vec::new();
        for r in urecs {
            if let Some(last) = session.last() {
                if r.timestamp - last.timestamp > gap {
                    sessions.push(std::mem::take(&mut session));
                }
            }
            session.push(r);
        }
        sessions.push(session);
        for session in sessions {
            for chunk in session.chunks(cfg.max_seq_len) {
                if chunk.len() < 2 {
                    continue;
                }
                let mut records = Vec::with_capacity(chunk.len());
                let mut prev_ts = None;
                for r in chunk {
                    records.push(CheckinRecord {
                        poi_id: poi_ids[r.poi.as_str()],
                        timestamp: r.timestamp,
                        delta_t: prev_ts.map_or(0, |p| r.timestamp - p),
                    });
                    prev_ts = Some(r.timestamp);
                }
                sequences.push(CheckinSequence { user_id, records });
            }
        }
    }
    Ok((sequences, vocab))
}

/// Reconstructs raw rows from processed sequences; used by idempotence tests
/// and the synthetic pipeline driver.
pub fn sequences_to_raw(sequences: &[CheckinSequence], vocab: &Vocabulary) -> Vec<RawCheckin> {
    let mut raw = Vec::new();
    for seq in sequences {
        for rec in &seq.records {
            let poi = &vocab.poi_table[rec.poi_id];
            raw.push(RawCheckin {
                user_key: vocab.user_table[seq.user_id].clone(),
                timestamp: rec.timestamp,
                lat: poi.lat,
                lon: poi.lon,
                poi_key: poi.key.clone(),
                category_text: vocab.category_word_pool[poi.category_word_ids[0]].clone(),
            });
        }
    }
    raw
}
