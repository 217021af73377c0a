//! Text side: scene descriptions with synonym variation, frame subsampling,
//! templated QA generation and the closed word-level vocabulary.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use bella_numcore::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::error::{BellaError, Result};
use crate::scenesim::{
    ego_motion_phrase, quadrant_of, ActorClass, Category, Episode, QAItem, Quadrant, Query, Scene, Status, MAX_ACTORS,
};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const BEV_PLACEHOLDER: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<bev>"];
/// Separates question from answer in finetuning prompts.
pub const SEP_WORD: &str = ".";
pub const MAX_VOCAB: usize = 256;
/// Every fourth frame goes into the description corpus.
pub const SUBSAMPLE_STRIDE: usize = 4;
pub const EMPTY_SCENE_SENTENCE: &str = "there are no objects nearby";

/// Lower-case, pad `.`/`?`/`,` with spaces, split on whitespace.
pub fn words(text: &str) -> Vec<String> {
    let mut s = String::with_capacity(text.len() + 8);
    for ch in text.chars().flat_map(char::to_lowercase) {
        if matches!(ch, '.' | '?' | ',') {
            s.push(' ');
            s.push(ch);
            s.push(' ');
        } else {
            s.push(ch);
        }
    }
    s.split_whitespace().map(str::to_string).collect()
}

pub fn normalize(text: &str) -> String {
    words(text).join(" ")
}

/// Exact-match form of an answer: lower-case, terminal period stripped,
/// whitespace collapsed.
pub fn normalize_answer(text: &str) -> String {
    let mut w = words(text);
    while w.last().is_some_and(|t| t == ".") {
        w.pop();
    }
    w.join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..4].iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return Err(BellaError::VocabMismatch(format!("first tokens must be {SPECIALS:?}")));
        }
        if tokens.len() > MAX_VOCAB {
            return Err(BellaError::VocabMismatch(format!(
                "{} tokens exceeds {MAX_VOCAB}",
                tokens.len()
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(BellaError::VocabMismatch(format!("duplicate token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Specials followed by every word any template or synonym can emit,
    /// sorted.
    pub fn canonical() -> Self {
        let mut set = BTreeSet::new();
        let mut add = |s: &str| set.extend(words(s));
        for q in all_queries() {
            add(&q.render());
        }
        for syns in SynonymTable::canonical().map.values() {
            for s in syns {
                add(s);
            }
        }
        add("there is a to the");
        add(EMPTY_SCENE_SENTENCE);
        for speed in [0.0, 5.0, 10.0] {
            add(ego_motion_phrase(speed));
        }
        add("yes no");
        for n in 0..=MAX_ACTORS {
            add(&n.to_string());
        }
        for c in ActorClass::ALL {
            add(c.as_str());
        }
        for s in Status::ALL {
            add(s.as_str());
        }
        add(SEP_WORD);
        let tokens = SPECIALS.iter().map(|s| s.to_string()).chain(set).collect();
        Self::from_tokens(tokens).expect("canonical vocabulary is valid")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        words(text)
            .into_iter()
            .map(|w| self.id(&w).ok_or(BellaError::OutOfVocabulary(w)))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let w: Vec<&str> = ids
            .iter()
            .map(|&i| {
                self.tokens
                    .get(i)
                    .map(String::as_str)
                    .ok_or(BellaError::InvalidToken(i))
            })
            .collect::<Result<_>>()?;
        Ok(w.join(" "))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.tokens).expect("string list serializes")
    }
}

/// Canonical word ↦ interchangeable surface forms (the canonical word first).
#[derive(Debug, Clone)]
pub struct SynonymTable {
    pub map: BTreeMap<&'static str, Vec<&'static str>>,
}

impl SynonymTable {
    pub fn canonical() -> Self {
        let entries: [(&str, &[&str]); 15] = [
            ("car", &["car", "vehicle"]),
            ("truck", &["truck", "lorry"]),
            ("bus", &["bus"]),
            ("bicycle", &["bicycle", "bike"]),
            ("motorcycle", &["motorcycle", "motorbike"]),
            ("pedestrian", &["pedestrian", "person"]),
            ("moving", &["moving", "driving"]),
            ("stopped", &["stopped", "waiting"]),
            ("parked", &["parked"]),
            ("walking", &["walking"]),
            ("standing", &["standing"]),
            ("front", &["front", "ahead"]),
            ("back", &["back", "rear"]),
            ("left", &["left"]),
            ("right", &["right"]),
        ];
        Self {
            map: entries.into_iter().map(|(k, v)| (k, v.to_vec())).collect(),
        }
    }

    pub fn synonyms(&self, word: &str) -> &[&'static str] {
        self.map.get(word).map(Vec::as_slice).unwrap_or(&[])
    }

    fn pick(&self, word: &'static str, rng: &mut SplitMix64) -> &'static str {
        match self.map.get(word) {
            Some(s) if !s.is_empty() => rng.choose(s),
            _ => word,
        }
    }
}

/// Frame-level description: ego sentence, then one sentence per actor
/// grouped by quadrant (front, back, left, right) and sorted by distance.
pub fn describe(scene: &Scene, seed: u64) -> Result<String> {
    let table = SynonymTable::canonical();
    let mut rng = SplitMix64::derive(seed, "describe");
    let mut sentences = vec![ego_motion_phrase(scene.ego_speed).to_string()];
    if scene.actors.is_empty() {
        sentences.push(EMPTY_SCENE_SENTENCE.to_string());
    }
    let mut order = Vec::with_capacity(scene.actors.len());
    for a in &scene.actors {
        order.push((quadrant_of(a)?, a.x.hypot(a.y), a.id, a));
    }
    order.sort_by(|p, q| p.0.cmp(&q.0).then(p.1.total_cmp(&q.1)).then(p.2.cmp(&q.2)));
    for (quad, _, _, a) in order {
        sentences.push(format!(
            "there is a {} {} to the {}",
            table.pick(a.class.as_str(), &mut rng),
            table.pick(a.status.as_str(), &mut rng),
            table.pick(quad.as_str(), &mut rng)
        ));
    }
    Ok(sentences.join(" . "))
}

/// Frames 0, 4, 8, … of an episode.
pub fn subsample(episode: &Episode) -> Vec<&Scene> {
    episode.scenes.iter().step_by(SUBSAMPLE_STRIDE).collect()
}

fn all_preds() -> Vec<(ActorClass, Quadrant)> {
    ActorClass::ALL
        .into_iter()
        .flat_map(|c| Quadrant::ALL.into_iter().map(move |q| (c, q)))
        .collect()
}

/// Every renderable question (comparisons over all predicate pairs).
pub fn all_queries() -> Vec<Query> {
    let preds = all_preds();
    let mut out = vec![Query::Behavior];
    for &(c, q) in &preds {
        out.push(Query::Exist(c, q));
        out.push(Query::Count(c, q));
        out.push(Query::Status(c, q));
        for &p2 in &preds {
            out.push(Query::CompareCount((c, q), p2));
            out.push(Query::CompareStatus((c, q), p2));
        }
    }
    for s in Status::ALL {
        for q in Quadrant::ALL {
            out.push(Query::Object(s, q));
        }
    }
    out
}

/// Up to `per_category` questions per category for `scene`. Questions whose
/// referent is missing or ambiguous are never emitted.
pub fn make_qa(scene: &Scene, episode_id: u64, seed: u64, per_category: usize) -> Result<Vec<QAItem>> {
    let mut rng = SplitMix64::derive(seed, "qa");
    let mut counts: BTreeMap<(ActorClass, Quadrant), usize> = BTreeMap::new();
    let mut by_status: BTreeMap<(Status, Quadrant), usize> = BTreeMap::new();
    for a in &scene.actors {
        let q = quadrant_of(a)?;
        *counts.entry((a.class, q)).or_default() += 1;
        *by_status.entry((a.status, q)).or_default() += 1;
    }
    let present: Vec<_> = counts.keys().copied().collect();
    let unique_refs: Vec<_> = counts.iter().filter(|(_, &n)| n == 1).map(|(k, _)| *k).collect();
    let all = all_preds();
    let pick_pred = |rng: &mut SplitMix64| {
        if !present.is_empty() && rng.bernoulli(0.5) {
            *rng.choose(&present)
        } else {
            *rng.choose(&all)
        }
    };

    let mut queries: Vec<Query> = Vec::new();
    let take_distinct = |cands: Vec<Query>, queries: &mut Vec<Query>| {
        let mut seen = BTreeSet::new();
        for q in cands {
            if seen.len() == per_category {
                break;
            }
            let key = q.render();
            if seen.insert(key) {
                queries.push(q);
            }
        }
    };
    let attempts = 4 * per_category;

    let exist = (0..attempts)
        .map(|_| {
            let (c, q) = pick_pred(&mut rng);
            Query::Exist(c, q)
        })
        .collect();
    take_distinct(exist, &mut queries);
    let count = (0..attempts)
        .map(|_| {
            let (c, q) = pick_pred(&mut rng);
            Query::Count(c, q)
        })
        .collect();
    take_distinct(count, &mut queries);

    let mut objects: Vec<Query> = by_status
        .iter()
        .filter(|(_, &n)| n == 1)
        .map(|(&(s, q), _)| Query::Object(s, q))
        .collect();
    rng.shuffle(&mut objects);
    take_distinct(objects, &mut queries);

    let mut statuses: Vec<Query> = unique_refs.iter().map(|&(c, q)| Query::Status(c, q)).collect();
    rng.shuffle(&mut statuses);
    take_distinct(statuses, &mut queries);

    if !scene.actors.is_empty() {
        let mut cmp = Vec::new();
        for _ in 0..attempts {
            if unique_refs.len() >= 2 && rng.bernoulli(0.3) {
                let i = rng.below(unique_refs.len() as u64) as usize;
                let mut j = rng.below(unique_refs.len() as u64 - 1) as usize;
                if j >= i {
                    j += 1;
                }
                cmp.push(Query::CompareStatus(unique_refs[i], unique_refs[j]));
            } else {
                let a = pick_pred(&mut rng);
                let b = pick_pred(&mut rng);
                if a != b {
                    cmp.push(Query::CompareCount(a, b));
                }
            }
        }
        take_distinct(cmp, &mut queries);
    }
    if per_category > 0 {
        queries.push(Query::Behavior);
    }

    queries
        .into_iter()
        .map(|q| {
            Ok(QAItem {
                episode_id,
                frame_index: scene.frame_index,
                category: q.category(),
                question: q.render(),
                gold_answer: q.answer(scene)?,
            })
        })
        .collect()
}

/// Category histogram of a QA set.
pub fn category_counts(items: &[QAItem]) -> BTreeMap<Category, usize> {
    let mut m: BTreeMap<Category, usize> = Category::ALL.iter().map(|&c| (c, 0)).collect();
    for it in items {
        *m.entry(it.category).or_default() += 1;
    }
    m
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DescriptionSample {
    pub episode_id: u64,
    pub frame_index: usize,
    pub description: String,
}
