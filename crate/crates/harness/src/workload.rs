//! Seeded document and query generators.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ss_core::schema::{parse_schema, Document, IndexSchema, Value};

pub const PRODUCTS_SCHEMA: &str = include_str!("../schemas/products.json");

pub fn products_schema() -> Arc<IndexSchema> {
    Arc::new(parse_schema(PRODUCTS_SCHEMA).expect("bundled schema is valid"))
}

const NOUNS: &[&str] = &[
    "shoe", "boot", "sandal", "jacket", "coat", "scarf", "glove", "hat", "shirt", "dress", "skirt", "sock",
    "belt", "bag", "wallet", "watch", "lamp", "chair", "table", "desk", "sofa", "rug", "mirror", "vase",
    "kettle", "pan", "knife", "mug", "plate", "bowl", "towel", "pillow", "blanket", "tent", "bike", "helmet",
];
const ADJECTIVES: &[&str] = &[
    "red", "blue", "green", "black", "white", "grey", "brown", "wool", "leather", "cotton", "silk", "linen",
    "steel", "oak", "glass", "light", "heavy", "small", "large", "classic", "modern", "vintage", "compact",
    "waterproof", "soft", "warm", "slim", "sturdy", "folding", "portable",
];
const FILLER: &[&str] = &[
    "with", "for", "and", "made", "from", "durable", "comfortable", "easy", "care", "daily", "use", "travel",
    "home", "office", "outdoor", "premium", "quality", "design", "fit", "finish", "season", "gift", "set",
    "pack", "edition", "new", "stock", "ready", "ships", "fast", "returns", "free",
];
const TAGS: &[&str] = &["sale", "new", "clearance", "featured", "limited", "bundle"];

/// Skewed pick: low indices are much more frequent than high ones.
fn skewed<'a>(rng: &mut ChaCha8Rng, words: &[&'a str]) -> &'a str {
    let x: f64 = rng.gen();
    words[((x * x) * words.len() as f64) as usize]
}

/// Deterministic key spread over the alphabet so range shards all get data.
pub fn key_for(i: u64) -> String {
    let lead = (b'a' + ((i * 7) % 26) as u8) as char;
    format!("{lead}{i:07}")
}

/// Bytes of a document as a JSON line, the raw size used for amplification
/// ratios.
pub fn raw_bytes(doc: &Document) -> u64 {
    serde_json::to_vec(doc).expect("documents serialize").len() as u64 + 1
}

pub struct Workload {
    rng: ChaCha8Rng,
}

impl Workload {
    pub fn new(seed: u64) -> Self {
        Workload { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn title(&mut self) -> String {
        let n = self.rng.gen_range(1..=3);
        let mut words: Vec<&str> = (0..n).map(|_| skewed(&mut self.rng, ADJECTIVES)).collect();
        words.push(skewed(&mut self.rng, NOUNS));
        words.join(" ")
    }

    fn description(&mut self) -> String {
        let n = self.rng.gen_range(8..=30);
        (0..n)
            .map(|_| match self.rng.gen_range(0..4) {
                0 => skewed(&mut self.rng, NOUNS),
                1 => skewed(&mut self.rng, ADJECTIVES),
                _ => skewed(&mut self.rng, FILLER),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn price(&mut self) -> f64 {
        (self.rng.gen_range(100..50_000) as f64) / 100.0
    }

    pub fn doc(&mut self, key: &str) -> Document {
        let mut d = Document::new();
        d.insert("id".into(), Value::Str(key.into()));
        d.insert("title".into(), Value::Str(self.title()));
        d.insert("description".into(), Value::Str(self.description()));
        d.insert("price".into(), Value::Float(self.price()));
        d.insert("stock_level".into(), Value::Int(self.rng.gen_range(0..1000)));
        d.insert("tags".into(), Value::Str(TAGS.choose(&mut self.rng).unwrap().to_string()));
        d
    }

    /// `n` documents with distinct keys `key_for(0..n)`.
    pub fn docs(&mut self, n: u64) -> Vec<Document> {
        (0..n).map(|i| self.doc(&key_for(i))).collect()
    }

    /// A random query over the bundled schema.
    pub fn query(&mut self) -> String {
        let term = |rng: &mut ChaCha8Rng| -> String {
            match rng.gen_range(0..3) {
                0 => format!("title:{}", skewed(rng, NOUNS)),
                1 => format!("title:{}", skewed(rng, ADJECTIVES)),
                _ => format!("description:{}", skewed(rng, FILLER)),
            }
        };
        let lo = self.rng.gen_range(0..400);
        let range = format!("price:[{lo} TO {}]", lo + self.rng.gen_range(5..100));
        match self.rng.gen_range(0..4) {
            0 => term(&mut self.rng),
            1 => format!("{} OR {}", term(&mut self.rng), term(&mut self.rng)),
            2 => format!("{} AND {range}", term(&mut self.rng)),
            _ => format!("({} OR {}) AND {range}", term(&mut self.rng), term(&mut self.rng)),
        }
    }
}
