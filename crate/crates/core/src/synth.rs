//! Synthetic corpora with planted naming regularities.
//!
//! Entities of an indicator type are a name body followed by one of the
//! type's indicator characters; entities of other types are a bare name.
//! Name bodies come from a fixed per-corpus pool so that boundaries are
//! learnable. A configurable fraction of sentences also carries an indicator
//! character outside any entity, which a model that only keys on suffixes
//! will mistake for an entity ending.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{GoldEntity, Sentence, NONE_TYPE};
use crate::error::{config, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub types: Vec<String>,
    /// Indicator suffix characters per type. Types not listed have none.
    pub indicator_chars: BTreeMap<String, Vec<char>>,
    pub filler_alphabet: String,
    /// Inclusive `[min, max]` entity length in characters.
    pub entity_len: [usize; 2],
    /// Inclusive `[min, max]` sentence length in characters.
    pub sentence_len: [usize; 2],
    pub ambiguity_rate: f64,
    pub counts: SplitCounts,
    /// Distinct name bodies per length.
    pub name_pool: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            train: 1400,
            dev: 300,
            test: 300,
        }
    }
}

impl Default for SynthConfig {
    fn default() -> Self {
        let mut indicator_chars = BTreeMap::new();
        indicator_chars.insert("LOC".to_string(), vec!['河', '湖']);
        indicator_chars.insert("ORG".to_string(), vec!['司', '行']);
        indicator_chars.insert("FAC".to_string(), vec!['馆', '站']);
        Self {
            types: vec!["LOC".into(), "ORG".into(), "FAC".into()],
            indicator_chars,
            filler_alphabet: "的了在是有和不这个们中来上大为地国到说时要就出会也子对生能而那得于着下自之年过发后作里用道".into(),
            entity_len: [3, 5],
            sentence_len: [8, 14],
            ambiguity_rate: 0.3,
            counts: SplitCounts::default(),
            name_pool: 12,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.types.is_empty() {
            return config("synth.types is empty");
        }
        let mut seen = HashSet::new();
        for t in &self.types {
            if t.is_empty() || t == NONE_TYPE || t.contains(char::is_whitespace) {
                return config(format!("synth.types: invalid type name {t:?}"));
            }
            if !seen.insert(t) {
                return config(format!("synth.types: duplicate type {t:?}"));
            }
        }
        if self.filler_alphabet.is_empty() {
            return config("synth.filler_alphabet is empty");
        }
        let filler: HashSet<char> = self.filler_alphabet.chars().collect();
        let mut indicators = HashSet::new();
        for (t, chars) in &self.indicator_chars {
            if !self.types.contains(t) {
                return config(format!("synth.indicator_chars: unknown type {t:?}"));
            }
            if chars.is_empty() {
                return config(format!("synth.indicator_chars.{t} is empty"));
            }
            for c in chars {
                if filler.contains(c) {
                    return config(format!(
                        "synth.indicator_chars.{t}: {c:?} also appears in filler_alphabet"
                    ));
                }
                if !indicators.insert(*c) {
                    return config(format!("synth.indicator_chars: {c:?} used by two types"));
                }
            }
        }
        let [emin, emax] = self.entity_len;
        if emin == 0 || emin > emax {
            return config(format!("synth.entity_len: invalid range [{emin}, {emax}]"));
        }
        let [smin, smax] = self.sentence_len;
        if smin == 0 || smin > smax {
            return config(format!("synth.sentence_len: invalid range [{smin}, {smax}]"));
        }
        if !(0.0..=1.0).contains(&self.ambiguity_rate) {
            return config(format!(
                "synth.ambiguity_rate {} not in [0, 1]",
                self.ambiguity_rate
            ));
        }
        if self.ambiguity_rate > 0.0 && self.indicator_chars.is_empty() {
            return config("synth.ambiguity_rate > 0 needs at least one indicator type");
        }
        if self.ambiguity_rate > 0.0 && smax < 2 {
            return config("synth.sentence_len too short to plant indicator characters");
        }
        if self.name_pool == 0 {
            return config("synth.name_pool must be positive");
        }
        Ok(())
    }

    pub fn indicator_set(&self) -> HashSet<char> {
        self.indicator_chars.values().flatten().copied().collect()
    }

    pub fn is_indicator_type(&self, kind: &str) -> bool {
        self.indicator_chars.contains_key(kind)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpora {
    pub train: Vec<Sentence>,
    pub dev: Vec<Sentence>,
    pub test: Vec<Sentence>,
}

struct NamePools {
    // body length -> pool, shared by all indicator types
    shared: BTreeMap<usize, Vec<Vec<char>>>,
    // (type, length) -> pool for bare-name types
    bare: BTreeMap<(String, usize), Vec<Vec<char>>>,
}

fn random_name(rng: &mut ChaCha8Rng, alphabet: &[char], len: usize) -> Vec<char> {
    (0..len).map(|_| *alphabet.choose(rng).expect("alphabet")).collect()
}

fn build_pools(cfg: &SynthConfig, rng: &mut ChaCha8Rng, alphabet: &[char]) -> NamePools {
    let [emin, emax] = cfg.entity_len;
    let mut shared = BTreeMap::new();
    let mut bare = BTreeMap::new();
    for len in emin..=emax {
        if len > 1 {
            let pool = (0..cfg.name_pool)
                .map(|_| random_name(rng, alphabet, len - 1))
                .collect();
            shared.insert(len - 1, pool);
        }
        for t in &cfg.types {
            if !cfg.is_indicator_type(t) {
                let pool = (0..cfg.name_pool)
                    .map(|_| random_name(rng, alphabet, len))
                    .collect();
                bare.insert((t.clone(), len), pool);
            }
        }
    }
    NamePools { shared, bare }
}

fn make_entity(cfg: &SynthConfig, pools: &NamePools, rng: &mut ChaCha8Rng, len: usize) -> (Vec<char>, String) {
    let kind = cfg.types.choose(rng).expect("types").clone();
    match cfg.indicator_chars.get(&kind) {
        Some(inds) => {
            let mut chars = if len > 1 {
                pools.shared[&(len - 1)].choose(rng).expect("pool").clone()
            } else {
                Vec::new()
            };
            chars.push(*inds.choose(rng).expect("indicators"));
            (chars, kind)
        }
        None => {
            let chars = pools.bare[&(kind.clone(), len)].choose(rng).expect("pool").clone();
            (chars, kind)
        }
    }
}

fn generate_sentence(
    cfg: &SynthConfig,
    pools: &NamePools,
    rng: &mut ChaCha8Rng,
    alphabet: &[char],
    indicator_pool: &[char],
) -> Sentence {
    let [smin, smax] = cfg.sentence_len;
    let [emin, emax] = cfg.entity_len;
    let len = rng.gen_range(smin..=smax);
    let trap = rng.gen::<f64>() < cfg.ambiguity_rate;
    let reserved = usize::from(trap);

    let mut budget = len - reserved;
    let max_entities = (len / (emax + 2)).max(1);
    let wanted = rng.gen_range(1..=max_entities);
    let mut entities: Vec<(Vec<char>, String)> = Vec::new();
    for _ in 0..wanted {
        let elen = rng.gen_range(emin..=emax);
        if elen > budget {
            break;
        }
        budget -= elen;
        entities.push(make_entity(cfg, pools, rng, elen));
    }
    let filler_count = budget + reserved;

    // Items: Some(k) for entity k, None for one filler char.
    let mut items: Vec<Option<usize>> = (0..entities.len()).map(Some).collect();
    items.extend(std::iter::repeat_n(None, filler_count));
    items.shuffle(rng);

    let mut chars = Vec::with_capacity(len);
    let mut gold = Vec::new();
    let mut filler_positions = Vec::new();
    for item in items {
        match item {
            Some(k) => {
                let (body, kind) = &entities[k];
                let start = chars.len();
                chars.extend_from_slice(body);
                gold.push(GoldEntity::new(start, chars.len() - 1, kind.clone()));
            }
            None => {
                filler_positions.push(chars.len());
                chars.push(*alphabet.choose(rng).expect("alphabet"));
            }
        }
    }
    if trap {
        let pos = *filler_positions.choose(rng).expect("reserved filler slot");
        chars[pos] = *indicator_pool.choose(rng).expect("indicator");
    }
    Sentence {
        chars,
        entities: gold,
    }
}

/// Generates train/dev/test splits. Deterministic in `seed`; no sentence text
/// appears in more than one split.
pub fn generate_synthetic(cfg: &SynthConfig, seed: u64) -> Result<SynthCorpora> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alphabet: Vec<char> = cfg.filler_alphabet.chars().collect();
    let mut indicator_pool: Vec<char> = cfg.indicator_set().into_iter().collect();
    indicator_pool.sort_unstable();
    let pools = build_pools(cfg, &mut rng, &alphabet);

    let mut seen: HashSet<Vec<char>> = HashSet::new();
    let mut split = |n: usize, rng: &mut ChaCha8Rng| -> Result<Vec<Sentence>> {
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while out.len() < n {
            attempts += 1;
            if attempts > 100 * n + 1000 {
                return config("synth: cannot generate enough distinct sentences; widen the ranges");
            }
            let s = generate_sentence(cfg, &pools, rng, &alphabet, &indicator_pool);
            if seen.insert(s.chars.clone()) {
                out.push(s);
            }
        }
        Ok(out)
    };
    let train = split(cfg.counts.train, &mut rng)?;
    let dev = split(cfg.counts.dev, &mut rng)?;
    let test = split(cfg.counts.test, &mut rng)?;
    Ok(SynthCorpora { train, dev, test })
}

/// True if the sentence holds an indicator character that does not end a
/// gold entity.
pub fn has_trap(sentence: &Sentence, indicators: &HashSet<char>) -> bool {
    sentence.chars.iter().enumerate().any(|(pos, c)| {
        indicators.contains(c) && !sentence.entities.iter().any(|e| e.end == pos)
    })
}
