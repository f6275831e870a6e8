use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::stream;

pub const WORLD_SCHEMA: &str = "beliefunc.world/1";

pub const CLS: u32 = 0;
pub const SEP: u32 = 1;
pub const UNK: u32 = 2;

/// Fixed template words, in vocabulary order after the three specials.
const WORDS: &[&str] = &[
    "want",
    "any",
    "fine",
    "what",
    "is",
    "thanks",
    "bye",
    "none",
    "desc",
    "sys_request",
    "sys_offer",
    "sys_book",
    "sys_reqmore",
    "sys_bye",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub domains: usize,
    pub slots_per_domain: usize,
    pub values_per_slot: usize,
    /// Surface forms per value: one canonical plus `variants_per_value − 1`
    /// ambiguous variants.
    pub variants_per_value: usize,
    pub db_rows: usize,
    pub description_len: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            domains: 2,
            slots_per_domain: 3,
            values_per_slot: 5,
            variants_per_value: 3,
            db_rows: 30,
            description_len: 4,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.domains == 0 {
            return bad("at least one domain is required");
        }
        if self.slots_per_domain < 2 {
            return bad("each domain needs at least two slots (one constraint, one request)");
        }
        if self.values_per_slot < 2 {
            return bad("each slot needs at least two values besides none");
        }
        if self.variants_per_value == 0 || self.variants_per_value > self.values_per_slot + 1 {
            return bad("variants_per_value must lie in 1..=values_per_slot+1");
        }
        if self.db_rows == 0 {
            return bad("database needs at least one row per domain");
        }
        if self.description_len < 3 {
            return bad("descriptions need at least three tokens");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueSpec {
    pub name: String,
    /// Canonical surface form.
    pub canonical: Vec<u32>,
    /// Alternative surface forms, most likely first.
    pub variants: Vec<Vec<u32>>,
    pub description: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotSpec {
    pub name: String,
    pub token: u32,
    pub description: Vec<u32>,
    /// Index 0 is always `none`.
    pub values: Vec<ValueSpec>,
}

impl SlotSpec {
    pub fn k(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub token: u32,
    pub slots: Vec<SlotSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ontology {
    pub domains: Vec<DomainSpec>,
    pub vocab: Vec<String>,
}

/// Global slot address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SlotRef {
    pub domain: usize,
    pub slot: usize,
}

impl Ontology {
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn word(&self, w: &str) -> u32 {
        self.vocab
            .iter()
            .position(|t| t == w)
            .map(|i| i as u32)
            .unwrap_or(UNK)
    }

    pub fn num_domains(&self) -> usize {
        self.domains.len()
    }

    /// Slots in flattening order: lexicographic by (domain, slot) name.
    pub fn slot_refs(&self) -> Vec<SlotRef> {
        let mut refs: Vec<(String, String, SlotRef)> = self
            .domains
            .iter()
            .enumerate()
            .flat_map(|(d, dom)| {
                dom.slots.iter().enumerate().map(move |(s, slot)| {
                    (
                        dom.name.clone(),
                        slot.name.clone(),
                        SlotRef { domain: d, slot: s },
                    )
                })
            })
            .collect();
        refs.sort_by(|a, b| (&a.0, &a.1).cmp(&(&b.0, &b.1)));
        refs.into_iter().map(|r| r.2).collect()
    }

    pub fn num_slots(&self) -> usize {
        self.domains.iter().map(|d| d.slots.len()).sum()
    }

    pub fn slot(&self, r: SlotRef) -> &SlotSpec {
        &self.domains[r.domain].slots[r.slot]
    }

    /// Position of `r` in [`Ontology::slot_refs`] order.
    pub fn slot_index(&self, r: SlotRef) -> usize {
        self.slot_refs()
            .iter()
            .position(|x| *x == r)
            .expect("slot exists")
    }

    pub fn slot_name(&self, r: SlotRef) -> String {
        format!("{}.{}", self.domains[r.domain].name, self.slot(r).name)
    }
}

/// One table per domain; each row holds a value index (1-based, never
/// `none`) for every slot of the domain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Database {
    pub tables: Vec<Vec<Vec<usize>>>,
}

impl Database {
    pub fn rows(&self, domain: usize) -> &[Vec<usize>] {
        &self.tables[domain]
    }

    /// Rows of `domain` matching every `(slot, value)` constraint.
    pub fn matching(&self, domain: usize, constraints: &[(usize, usize)]) -> Vec<usize> {
        self.tables[domain]
            .iter()
            .enumerate()
            .filter(|(_, row)| constraints.iter().all(|&(s, v)| row[s] == v))
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub schema: String,
    pub config: WorldConfig,
    pub seed: u64,
    pub ontology: Ontology,
    pub database: Database,
}

impl World {
    /// Stable digest of ontology and database; ties checkpoints to a world.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.ontology).expect("ontology serialises"));
        h.update(serde_json::to_vec(&self.database).expect("database serialises"));
        h.finalize()
            .iter()
            .take(12)
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let w: World = serde_json::from_str(s)?;
        if w.schema != WORLD_SCHEMA {
            return Err(Error::Format(format!(
                "unsupported world schema `{}`",
                w.schema
            )));
        }
        w.validate()?;
        Ok(w)
    }

    /// Checks database closure and ontology shape.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        for (d, dom) in self.ontology.domains.iter().enumerate() {
            for slot in &dom.slots {
                if slot.values.len() < 3 || slot.values[0].name != "none" {
                    return Err(Error::Format(format!(
                        "slot {} lacks none + two values",
                        slot.name
                    )));
                }
            }
            for row in self.database.rows(d) {
                if row.len() != dom.slots.len() {
                    return Err(Error::Format(format!(
                        "row width mismatch in domain {}",
                        dom.name
                    )));
                }
                for (s, &v) in row.iter().enumerate() {
                    if v == 0 || v >= dom.slots[s].values.len() {
                        return Err(Error::Format(format!(
                            "row value {v} outside slot {}",
                            dom.slots[s].name
                        )));
                    }
                }
            }
        }
        let vs = self.ontology.vocab_size() as u32;
        let tokens_ok = self.ontology.domains.iter().all(|d| {
            d.slots.iter().all(|s| {
                s.description.iter().all(|&t| t < vs)
                    && s.values.iter().all(|v| {
                        v.canonical
                            .iter()
                            .chain(v.variants.iter().flatten())
                            .chain(&v.description)
                            .all(|&t| t < vs)
                    })
            })
        });
        if !tokens_ok {
            return Err(Error::Format("token id outside vocabulary".into()));
        }
        Ok(())
    }
}

struct VocabBuilder {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl VocabBuilder {
    fn new() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in ["[CLS]", "[SEP]", "[UNK]"].iter().chain(WORDS) {
            v.add(t);
        }
        v
    }

    fn add(&mut self, t: &str) -> u32 {
        if let Some(&i) = self.index.get(t) {
            return i;
        }
        let i = self.tokens.len() as u32;
        self.tokens.push(t.to_string());
        self.index.insert(t.to_string(), i);
        i
    }
}

fn pad_description(mut toks: Vec<u32>, len: usize, filler: u32) -> Vec<u32> {
    toks.truncate(len);
    while toks.len() < len {
        toks.push(filler);
    }
    toks
}

/// Builds the ontology and database. Value `v` of a slot has canonical token
/// `d.s.v`; its j-th variant is the ambiguous token `d.s.~((v − j) mod V)`,
/// so every ambiguous token is shared by two neighbouring values.
pub fn build_world(config: &WorldConfig, seed: u64) -> Result<World> {
    config.validate()?;
    let mut vocab = VocabBuilder::new();
    let filler = vocab.index["desc"];
    let none_tok = vocab.index["none"];
    let mut domains = Vec::with_capacity(config.domains);
    for d in 0..config.domains {
        let dname = format!("d{d}");
        let dtok = vocab.add(&dname);
        let mut slots = Vec::with_capacity(config.slots_per_domain);
        for s in 0..config.slots_per_domain {
            let sname = format!("s{s}");
            let stok = vocab.add(&format!("{dname}.{sname}"));
            let v_count = config.values_per_slot;
            let amb: Vec<u32> = (0..v_count)
                .map(|i| vocab.add(&format!("{dname}.{sname}.~{i}")))
                .collect();
            let mut values = vec![ValueSpec {
                name: "none".into(),
                canonical: vec![none_tok],
                variants: Vec::new(),
                description: pad_description(
                    vec![dtok, stok, none_tok],
                    config.description_len,
                    filler,
                ),
            }];
            for v in 0..v_count {
                let ctok = vocab.add(&format!("{dname}.{sname}.v{v}"));
                let variants = (1..config.variants_per_value)
                    .map(|j| vec![amb[(v + v_count - (j - 1)) % v_count]])
                    .collect();
                values.push(ValueSpec {
                    name: format!("v{v}"),
                    canonical: vec![ctok],
                    variants,
                    description: pad_description(
                        vec![dtok, stok, ctok],
                        config.description_len,
                        filler,
                    ),
                });
            }
            slots.push(SlotSpec {
                name: sname,
                token: stok,
                description: pad_description(vec![dtok, stok], config.description_len, filler),
                values,
            });
        }
        domains.push(DomainSpec {
            name: dname,
            token: dtok,
            slots,
        });
    }
    let mut rng = stream(seed, "world/db");
    let tables = (0..config.domains)
        .map(|_| {
            (0..config.db_rows)
                .map(|_| {
                    (0..config.slots_per_domain)
                        .map(|_| rng.gen_range(1..=config.values_per_slot))
                        .collect()
                })
                .collect()
        })
        .collect();
    let world = World {
        schema: WORLD_SCHEMA.to_string(),
        config: *config,
        seed,
        ontology: Ontology {
            domains,
            vocab: vocab.tokens,
        },
        database: Database { tables },
    };
    world.validate()?;
    Ok(world)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cardinalities() {
        let w = build_world(&WorldConfig::default(), 1).unwrap();
        assert_eq!(w.ontology.num_slots(), 6);
        for d in &w.ontology.domains {
            let canon: usize = d.slots.iter().map(|s| s.values.len() - 1).sum();
            assert_eq!(canon, 15);
            for s in &d.slots {
                for v in &s.values[1..] {
                    assert_eq!(v.variants.len(), 2);
                    assert!(v.variants.iter().all(|var| var != &v.canonical));
                }
            }
        }
    }

    #[test]
    fn deterministic_and_closed() {
        let a = build_world(&WorldConfig::default(), 7).unwrap();
        let b = build_world(&WorldConfig::default(), 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert!(a.validate().is_ok());
        let c = build_world(&WorldConfig::default(), 8).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn ambiguous_tokens_are_shared_by_neighbours() {
        let w = build_world(&WorldConfig::default(), 1).unwrap();
        let slot = &w.ontology.domains[0].slots[0];
        // first variant of v1 equals second variant of v2
        assert_eq!(slot.values[1].variants[0], slot.values[2].variants[1]);
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = WorldConfig {
            values_per_slot: 1,
            ..WorldConfig::default()
        };
        assert!(matches!(build_world(&cfg, 0), Err(Error::Config(_))));
    }
}
