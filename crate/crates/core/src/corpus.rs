//! Synthetic fact corpus and its closed word-level tokenizer.
//!
//! Every record is one fact about a made-up entity:
//! `the <attribute> of <entity> is <v1> <v2> <v3> <v4>` with the question
//! `what is the <attribute> of <entity> ?` and the four value words as the
//! answer. Entities are unique per record, so the forget, retain and holdout
//! splits never share one.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{derive_seed, seeded_rng};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";

/// Words per value.
pub const VALUE_WORDS: usize = 4;

const ONSETS: [&str; 24] = [
    "ba", "da", "fe", "ga", "ha", "ji", "ka", "lo", "ma", "ne", "po", "qua", "ri", "sa", "te",
    "vu", "wa", "xe", "yo", "za", "bri", "dro", "gle", "tho",
];

const CODAS: [&str; 24] = [
    "bor", "dan", "fix", "gul", "hen", "jat", "kor", "lim", "mox", "nur", "pel", "quin", "rak",
    "sov", "tez", "vak", "wyn", "xil", "yeb", "zor", "brum", "drel", "gant", "thop",
];

const ATTRIBUTES: [&str; 24] = [
    "anthem", "banner", "border", "capital", "climate", "crest", "currency", "dialect", "emblem",
    "export", "festival", "harbor", "language", "mascot", "motto", "mountain", "founder", "palace",
    "province", "ritual", "river", "tribute", "treaty", "weapon",
];

const VALUES: [&str; 120] = [
    "amber", "anchor", "apple", "arrow", "ash", "autumn", "basil", "beacon", "birch", "bison",
    "blade", "bloom", "bone", "bramble", "brass", "breeze", "brick", "bronze", "cactus", "candle",
    "canyon", "cedar", "chalk", "cherry", "cinder", "clay", "cliff", "clover", "cobalt", "comet",
    "copper", "coral", "cotton", "crane", "crystal", "cypress", "dawn", "delta", "desert", "dove",
    "dune", "eagle", "ember", "falcon", "fern", "fig", "flint", "fog", "forest", "fox", "frost",
    "garnet", "ginger", "glacier", "granite", "grove", "hawk", "hazel", "heron", "honey", "iron",
    "ivory", "ivy", "jade", "jasper", "juniper", "kelp", "lagoon", "lantern", "lark", "lava",
    "lemon", "lily", "linen", "lotus", "maple", "marble", "meadow", "mint", "moss", "moth",
    "nectar", "nickel", "oak", "obsidian", "olive", "onyx", "opal", "orchid", "otter", "owl",
    "pearl", "pebble", "pepper", "pine", "plum", "quartz", "quill", "raven", "reed", "ridge",
    "rose", "ruby", "saffron", "sage", "salt", "sand", "silver", "slate", "sparrow", "spruce",
    "stone", "storm", "thistle", "thunder", "tide", "tulip", "velvet", "willow", "wolf",
];

const TEMPLATE_WORDS: [&str; 5] = ["the", "of", "is", "what", "?"];

/// The fixed entity pool, `ONSETS × CODAS` in a stable order.
pub fn entity_pool() -> Vec<String> {
    ONSETS
        .iter()
        .flat_map(|o| CODAS.iter().map(move |c| format!("{o}{c}")))
        .collect()
}

pub fn attribute_pool() -> &'static [&'static str] {
    &ATTRIBUTES
}

pub fn value_pool() -> &'static [&'static str] {
    &VALUES
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactRecord {
    pub entity: String,
    pub attribute: String,
    pub value: String,
    pub sentence: String,
    pub question: String,
    pub answer: String,
}

impl FactRecord {
    pub fn new(entity: &str, attribute: &str, value: &str) -> Self {
        Self {
            entity: entity.into(),
            attribute: attribute.into(),
            value: value.into(),
            sentence: format!("the {attribute} of {entity} is {value}"),
            question: format!("what is the {attribute} of {entity} ?"),
            answer: value.into(),
        }
    }

    /// Question followed by its answer, as used in training.
    pub fn qa_text(&self) -> String {
        format!("{} {}", self.question, self.answer)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Forget,
    Retain,
    Holdout,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CorpusSplit {
    pub forget: Vec<FactRecord>,
    pub retain: Vec<FactRecord>,
    pub holdout: Vec<FactRecord>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRequest {
    pub seed: u64,
    pub n_forget: usize,
    pub n_retain: usize,
    pub n_holdout: usize,
}

impl Default for CorpusRequest {
    fn default() -> Self {
        Self {
            seed: 0,
            n_forget: 32,
            n_retain: 128,
            n_holdout: 32,
        }
    }
}

impl CorpusSplit {
    pub fn records(&self, split: Split) -> &[FactRecord] {
        match split {
            Split::Forget => &self.forget,
            Split::Retain => &self.retain,
            Split::Holdout => &self.holdout,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (Split, &FactRecord)> {
        [Split::Forget, Split::Retain, Split::Holdout]
            .into_iter()
            .flat_map(move |s| self.records(s).iter().map(move |r| (s, r)))
    }

    pub fn len(&self) -> usize {
        self.forget.len() + self.retain.len() + self.holdout.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks that no entity appears in two splits (or twice in one).
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = BTreeMap::new();
        for (split, r) in self.iter() {
            if let Some(prev) = seen.insert(r.entity.as_str(), split) {
                return Err(Error::Input(format!(
                    "entity {} appears in both {prev:?} and {split:?}",
                    r.entity
                )));
            }
        }
        Ok(())
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            split: Split,
            #[serde(flatten)]
            record: &'a FactRecord,
        }
        let mut out = Vec::new();
        for (split, record) in self.iter() {
            serde_json::to_writer(&mut out, &Line { split, record }).expect("record serializes");
            out.push(b'\n');
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Line {
            split: Split,
            #[serde(flatten)]
            record: FactRecord,
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut out = CorpusSplit::default();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let l: Line = serde_json::from_str(line).map_err(|e| {
                Error::Input(format!("{}:{}: {e}", path.display(), i + 1))
            })?;
            match l.split {
                Split::Forget => out.forget.push(l.record),
                Split::Retain => out.retain.push(l.record),
                Split::Holdout => out.holdout.push(l.record),
            }
        }
        out.check_disjoint()?;
        Ok(out)
    }
}

pub fn generate_corpus(
    seed: u64,
    n_forget: usize,
    n_retain: usize,
    n_holdout: usize,
) -> Result<CorpusSplit> {
    if n_forget == 0 || n_retain == 0 || n_holdout == 0 {
        return Err(Error::Config(format!(
            "split sizes must be at least 1, got ({n_forget}, {n_retain}, {n_holdout})"
        )));
    }
    let mut entities = entity_pool();
    let total = n_forget + n_retain + n_holdout;
    if total > entities.len() {
        return Err(Error::Capacity(format!(
            "{total} records requested but the entity pool holds {}",
            entities.len()
        )));
    }
    let mut rng = seeded_rng(derive_seed(seed, "corpus"));
    entities.shuffle(&mut rng);
    let mut records = entities[..total].iter().map(|e| {
        let attr = ATTRIBUTES.choose(&mut rng).expect("nonempty pool");
        let value: Vec<&str> = (0..VALUE_WORDS)
            .map(|_| *VALUES.choose(&mut rng).expect("nonempty pool"))
            .collect();
        FactRecord::new(e, attr, &value.join(" "))
    });
    let split = CorpusSplit {
        forget: records.by_ref().take(n_forget).collect(),
        retain: records.by_ref().take(n_retain).collect(),
        holdout: records.collect(),
    };
    split.check_disjoint()?;
    Ok(split)
}

pub fn generate(req: &CorpusRequest) -> Result<CorpusSplit> {
    generate_corpus(req.seed, req.n_forget, req.n_retain, req.n_holdout)
}

/// Word-level vocabulary with ids in lexicographic token order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    tokens: Vec<String>,
    ids: BTreeMap<String, usize>,
}

impl Tokenizer {
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut set: BTreeSet<String> = tokens.into_iter().map(Into::into).collect();
        for s in [PAD, BOS, EOS] {
            set.insert(s.to_string());
        }
        let tokens: Vec<String> = set.into_iter().collect();
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, ids }
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn pad(&self) -> usize {
        self.ids[PAD]
    }

    pub fn bos(&self) -> usize {
        self.ids[BOS]
    }

    pub fn eos(&self) -> usize {
        self.ids[EOS]
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| Error::Input(format!("unknown token {w:?}")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.tokens.get(i).map_or("<unk>", String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// `bos text eos`
    pub fn encode_framed(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = vec![self.bos()];
        ids.extend(self.encode(text)?);
        ids.push(self.eos());
        Ok(ids)
    }
}

/// Vocabulary over every whitespace token in the corpus plus the specials.
pub fn build_tokenizer(split: &CorpusSplit) -> Tokenizer {
    let mut words = BTreeSet::new();
    for (_, r) in split.iter() {
        for text in [&r.sentence, &r.question, &r.answer] {
            words.extend(text.split_whitespace().map(str::to_string));
        }
    }
    for w in TEMPLATE_WORDS {
        words.insert(w.to_string());
    }
    Tokenizer::from_tokens(words)
}

/// The framed training sequences for a record: its sentence and its
/// question-answer string.
pub fn training_sequences(r: &FactRecord, tok: &Tokenizer) -> Result<Vec<Vec<usize>>> {
    Ok(vec![
        tok.encode_framed(&r.sentence)?,
        tok.encode_framed(&r.qa_text())?,
    ])
}

pub fn encode_records(records: &[FactRecord], tok: &Tokenizer) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(2 * records.len());
    for r in records {
        out.extend(training_sequences(r, tok)?);
    }
    Ok(out)
}

/// A batch of unpadded sequences; [`Batch::padded`] gives the rectangular view.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub seqs: Vec<Vec<usize>>,
}

impl Batch {
    pub fn token_count(&self) -> usize {
        self.seqs.iter().map(Vec::len).sum()
    }

    /// Right-padded ids and a mask that is `true` on real tokens.
    pub fn padded(&self, pad: usize) -> (Vec<Vec<usize>>, Vec<Vec<bool>>) {
        let width = self.seqs.iter().map(Vec::len).max().unwrap_or(0);
        self.seqs
            .iter()
            .map(|s| {
                let mut ids = s.clone();
                ids.resize(width, pad);
                let mask = (0..width).map(|i| i < s.len()).collect();
                (ids, mask)
            })
            .unzip()
    }
}

/// One epoch of sequences in a seeded shuffled order, cut into batches.
pub fn epoch_batches(
    seqs: &[Vec<usize>],
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    order.shuffle(&mut seeded_rng(derive_seed(seed, &format!("epoch:{epoch}"))));
    Ok(order
        .chunks(batch_size)
        .map(|c| Batch {
            seqs: c.iter().map(|&i| seqs[i].clone()).collect(),
        })
        .collect())
}

/// Batches of the framed training sequences of `records` for one epoch.
pub fn batches(
    records: &[FactRecord],
    tok: &Tokenizer,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Batch>> {
    epoch_batches(&encode_records(records, tok)?, batch_size, seed, epoch)
}
