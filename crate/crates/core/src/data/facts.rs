//! The synthetic closed world: entities with attribute values, grouped into
//! topics, split into train and held-out evaluation facts.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::derive_rng;

/// One (entity, attribute) cell of the world.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FactId {
    pub entity: u32,
    pub attribute: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fact {
    pub id: FactId,
    /// Index into the attribute's value list.
    pub value: u32,
}

/// Generation parameters for the fact world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactConfig {
    pub num_entities: usize,
    pub num_attributes: usize,
    pub values_per_attribute: usize,
    pub num_topics: usize,
    /// Fraction of facts held out for evaluation contexts.
    pub eval_fraction: f64,
    pub seed: u64,
}

impl Default for FactConfig {
    fn default() -> Self {
        FactConfig {
            num_entities: 50,
            num_attributes: 4,
            values_per_attribute: 6,
            num_topics: 5,
            eval_fraction: 0.25,
            seed: 0,
        }
    }
}

impl FactConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_entities == 0 || self.num_attributes == 0 || self.num_topics == 0 {
            return Err(Error::Config("fact world dimensions must be positive".into()));
        }
        if self.values_per_attribute < 2 {
            return Err(Error::Config(
                "values_per_attribute must be at least 2 so conflicting values exist".into(),
            ));
        }
        if self.num_attributes < 2 {
            return Err(Error::Config(
                "need at least 2 attributes so same-topic noise documents exist".into(),
            ));
        }
        if self.num_topics < 2 {
            return Err(Error::Config("need at least 2 topics for off-topic noise".into()));
        }
        if self.num_topics > self.num_entities {
            return Err(Error::Config("more topics than entities".into()));
        }
        if !(0.0 < self.eval_fraction && self.eval_fraction < 1.0) {
            return Err(Error::Config("eval_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

const ATTRIBUTE_WORDS: [&str; 8] =
    ["color", "size", "shape", "material", "origin", "sound", "taste", "climate"];

const VALUE_WORDS: [[&str; 8]; 8] = [
    ["red", "blue", "green", "yellow", "purple", "orange", "white", "black"],
    ["tiny", "small", "medium", "large", "huge", "giant", "narrow", "wide"],
    ["round", "square", "oval", "flat", "curved", "pointed", "hollow", "solid"],
    ["wood", "metal", "glass", "stone", "cloth", "paper", "clay", "rubber"],
    ["north", "south", "east", "west", "coast", "valley", "plain", "ridge"],
    ["hum", "buzz", "click", "chime", "rustle", "drone", "whistle", "crackle"],
    ["sweet", "sour", "bitter", "salty", "mild", "sharp", "smoky", "fresh"],
    ["arid", "humid", "frigid", "temperate", "tropical", "windy", "foggy", "rainy"],
];

/// Filler words the statement templates draw on.
pub const TEMPLATE_WORDS: [&str; 4] = ["the", "of", "is", "has"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactBase {
    pub config: FactConfig,
    pub entity_tokens: Vec<String>,
    pub attribute_tokens: Vec<String>,
    /// Per attribute: its closed value vocabulary.
    pub value_tokens: Vec<Vec<String>>,
    /// Entity-major, attribute-minor.
    pub facts: Vec<Fact>,
    /// Topic id per entity; balanced round-robin.
    pub topics: Vec<u32>,
    pub train_facts: Vec<FactId>,
    pub eval_facts: Vec<FactId>,
}

impl FactBase {
    /// Deterministically generate the world.
    pub fn generate(config: &FactConfig) -> Result<FactBase> {
        config.validate()?;
        let mut rng = derive_rng(config.seed, "fact-base");

        let entity_tokens: Vec<String> =
            (0..config.num_entities).map(|i| format!("e{i:02}")).collect();
        let attribute_tokens: Vec<String> = (0..config.num_attributes)
            .map(|a| {
                ATTRIBUTE_WORDS.get(a).map(|s| s.to_string()).unwrap_or_else(|| format!("attr{a}"))
            })
            .collect();
        let value_tokens: Vec<Vec<String>> = (0..config.num_attributes)
            .map(|a| {
                (0..config.values_per_attribute)
                    .map(|v| {
                        VALUE_WORDS
                            .get(a)
                            .and_then(|pool| pool.get(v))
                            .map(|s| s.to_string())
                            .unwrap_or_else(|| format!("val{a}x{v}"))
                    })
                    .collect()
            })
            .collect();

        let mut facts = Vec::with_capacity(config.num_entities * config.num_attributes);
        for e in 0..config.num_entities {
            for a in 0..config.num_attributes {
                let value = rng.gen_range(0..config.values_per_attribute) as u32;
                facts.push(Fact { id: FactId { entity: e as u32, attribute: a as u32 }, value });
            }
        }

        let topics: Vec<u32> =
            (0..config.num_entities).map(|e| (e % config.num_topics) as u32).collect();

        let mut ids: Vec<FactId> = facts.iter().map(|f| f.id).collect();
        ids.shuffle(&mut rng);
        let eval_count = ((ids.len() as f64) * config.eval_fraction).floor().max(1.0) as usize;
        let mut eval_facts: Vec<FactId> = ids[..eval_count].to_vec();
        let mut train_facts: Vec<FactId> = ids[eval_count..].to_vec();
        eval_facts.sort_unstable();
        train_facts.sort_unstable();

        Ok(FactBase {
            config: config.clone(),
            entity_tokens,
            attribute_tokens,
            value_tokens,
            facts,
            topics,
            train_facts,
            eval_facts,
        })
    }

    pub fn fact(&self, id: FactId) -> &Fact {
        &self.facts[id.entity as usize * self.config.num_attributes + id.attribute as usize]
    }

    pub fn topic_of(&self, entity: u32) -> u32 {
        self.topics[entity as usize]
    }

    pub fn entity_token(&self, entity: u32) -> &str {
        &self.entity_tokens[entity as usize]
    }

    pub fn attribute_token(&self, attribute: u32) -> &str {
        &self.attribute_tokens[attribute as usize]
    }

    pub fn value_token(&self, attribute: u32, value: u32) -> &str {
        &self.value_tokens[attribute as usize][value as usize]
    }

    /// The true value token of a fact.
    pub fn true_value_token(&self, id: FactId) -> &str {
        self.value_token(id.attribute, self.fact(id).value)
    }

    /// Every word the world needs in the vocabulary, in stable order.
    pub fn vocabulary_words(&self) -> Vec<String> {
        let mut words: Vec<String> = TEMPLATE_WORDS.iter().map(|s| s.to_string()).collect();
        words.extend(self.entity_tokens.iter().cloned());
        words.extend(self.attribute_tokens.iter().cloned());
        for values in &self.value_tokens {
            words.extend(values.iter().cloned());
        }
        words
    }
}
