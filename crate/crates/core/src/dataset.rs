//! Dataset generation and the on-disk corpus: `scenes.jsonl`,
//! `pretrain.jsonl`, `qa.jsonl` and `vocab.json`.
//!
//! One generated dataset holds the training episodes followed by the test
//! episodes; splits are by episode id.

use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use bella_numcore::{SplitMix64, Tensor};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::bevenc::{encode_scene, FrozenEncoderParams};
use crate::config::DataConfig;
use crate::error::{BellaError, Result};
use crate::langdata::{describe, make_qa, subsample, DescriptionSample, Vocab, SUBSAMPLE_STRIDE};
use crate::scenesim::{episode_seed, gen_episode, oracle_answer, Episode, QAItem, Scene};

pub const SCENES_FILE: &str = "scenes.jsonl";
pub const PRETRAIN_FILE: &str = "pretrain.jsonl";
pub const QA_FILE: &str = "qa.jsonl";
pub const VOCAB_FILE: &str = "vocab.json";
pub const FILES: [&str; 4] = [SCENES_FILE, PRETRAIN_FILE, QA_FILE, VOCAB_FILE];

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub episodes: Vec<Episode>,
    pub pretrain: Vec<DescriptionSample>,
    pub qa: Vec<QAItem>,
    pub vocab: Vocab,
}

fn frame_seed(episode_seed: u64, label: &str, frame: usize) -> u64 {
    SplitMix64::derive(episode_seed, &format!("{label}/{frame}")).next_u64()
}

impl Dataset {
    /// Episodes `0 .. train_episodes + test_episodes`.
    pub fn generate(cfg: &DataConfig) -> Result<Self> {
        let scene_cfg = cfg.scene_config();
        let n = cfg.train_episodes + cfg.test_episodes;
        let mut episodes = Vec::with_capacity(n as usize);
        let mut pretrain = Vec::new();
        let mut qa = Vec::new();
        for id in 0..n {
            let ep = gen_episode(id, episode_seed(cfg.seed, id), &scene_cfg);
            for s in subsample(&ep) {
                pretrain.push(DescriptionSample {
                    episode_id: id,
                    frame_index: s.frame_index,
                    description: describe(s, frame_seed(ep.seed, "describe", s.frame_index))?,
                });
            }
            for s in ep.scenes.iter().step_by(cfg.qa_frame_stride) {
                qa.extend(make_qa(
                    s,
                    id,
                    frame_seed(ep.seed, "qa", s.frame_index),
                    cfg.qa_per_category,
                )?);
            }
            episodes.push(ep);
        }
        Ok(Self {
            episodes,
            pretrain,
            qa,
            vocab: Vocab::canonical(),
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| BellaError::io(dir, e))?;
        write_jsonl(&dir.join(SCENES_FILE), &self.episodes)?;
        write_jsonl(&dir.join(PRETRAIN_FILE), &self.pretrain)?;
        write_jsonl(&dir.join(QA_FILE), &self.qa)?;
        let p = dir.join(VOCAB_FILE);
        fs::write(&p, self.vocab.to_json() + "\n").map_err(|e| BellaError::io(&p, e))
    }

    /// Loads and validates a corpus directory.
    pub fn read(dir: &Path) -> Result<Self> {
        let p = dir.join(VOCAB_FILE);
        let text = fs::read_to_string(&p).map_err(|e| BellaError::io(&p, e))?;
        let tokens: Vec<String> = serde_json::from_str(&text).map_err(|e| BellaError::Json {
            path: p.display().to_string(),
            line: e.line(),
            source: e,
        })?;
        let d = Self {
            episodes: read_jsonl(&dir.join(SCENES_FILE))?,
            pretrain: read_jsonl(&dir.join(PRETRAIN_FILE))?,
            qa: read_jsonl(&dir.join(QA_FILE))?,
            vocab: Vocab::from_tokens(tokens)?,
        };
        d.validate()?;
        Ok(d)
    }

    /// Subsampling rule, frame references, closed vocabulary and gold
    /// answers against the oracle.
    pub fn validate(&self) -> Result<()> {
        for s in &self.pretrain {
            if s.frame_index % SUBSAMPLE_STRIDE != 0 {
                return Err(BellaError::Dataset(format!(
                    "pretraining sample for episode {} uses frame {}, not a multiple of {SUBSAMPLE_STRIDE}",
                    s.episode_id, s.frame_index
                )));
            }
            self.scene(s.episode_id, s.frame_index)?;
            self.vocab.encode(&s.description)?;
        }
        for it in &self.qa {
            let scene = self.scene(it.episode_id, it.frame_index)?;
            self.vocab.encode(&it.question)?;
            self.vocab.encode(&it.gold_answer)?;
            let want = oracle_answer(scene, it)?;
            if want != it.gold_answer {
                return Err(BellaError::Dataset(format!(
                    "episode {} frame {}: `{}` answered `{}`, oracle says `{want}`",
                    it.episode_id, it.frame_index, it.question, it.gold_answer
                )));
            }
        }
        Ok(())
    }

    pub fn episode(&self, id: u64) -> Option<&Episode> {
        // episodes are stored in id order starting at 0
        self.episodes
            .get(id as usize)
            .filter(|e| e.episode_id == id)
            .or_else(|| self.episodes.iter().find(|e| e.episode_id == id))
    }

    pub fn scene(&self, episode_id: u64, frame: usize) -> Result<&Scene> {
        self.episode(episode_id)
            .and_then(|e| e.scenes.get(frame))
            .filter(|s| s.frame_index == frame)
            .ok_or_else(|| BellaError::Dataset(format!("no scene for episode {episode_id} frame {frame}")))
    }

    /// SHA-256 over the serialized corpus, used to show that experiment arms
    /// saw identical data.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.episodes {
            h.update(serde_json::to_vec(e).expect("serializes"));
        }
        for s in &self.pretrain {
            h.update(serde_json::to_vec(s).expect("serializes"));
        }
        for q in &self.qa {
            h.update(serde_json::to_vec(q).expect("serializes"));
        }
        h.update(self.vocab.to_json());
        hex::encode(h.finalize())
    }
}

/// Episode ids of the train, validation and test splits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: BTreeSet<u64>,
    pub val: BTreeSet<u64>,
    pub test: BTreeSet<u64>,
}

impl Split {
    /// The last `ceil(val_fraction · train_episodes)` training episodes are
    /// held out; everything at or beyond `train_episodes` is test.
    pub fn new(cfg: &DataConfig, available: impl IntoIterator<Item = u64>) -> Self {
        let n_val = (cfg.val_fraction * cfg.train_episodes as f64).ceil() as u64;
        let val_start = cfg.train_episodes.saturating_sub(n_val);
        let mut s = Split {
            train: BTreeSet::new(),
            val: BTreeSet::new(),
            test: BTreeSet::new(),
        };
        for id in available {
            if id >= cfg.train_episodes {
                s.test.insert(id);
            } else if id >= val_start {
                s.val.insert(id);
            } else {
                s.train.insert(id);
            }
        }
        s
    }
}

/// Encoded BEV tensors keyed by `(episode_id, frame_index)`.
#[derive(Debug, Clone, Default)]
pub struct BevCache {
    map: BTreeMap<(u64, usize), Tensor<f32>>,
}

impl BevCache {
    pub fn build(
        data: &Dataset,
        keys: impl IntoIterator<Item = (u64, usize)>,
        encoder: &FrozenEncoderParams,
    ) -> Result<Self> {
        let mut map = BTreeMap::new();
        for k in keys {
            if let Entry::Vacant(slot) = map.entry(k) {
                slot.insert(encode_scene(data.scene(k.0, k.1)?, encoder)?);
            }
        }
        Ok(Self { map })
    }

    pub fn get(&self, episode_id: u64, frame: usize) -> Result<&Tensor<f32>> {
        self.map
            .get(&(episode_id, frame))
            .ok_or_else(|| BellaError::Dataset(format!("no encoded grid for episode {episode_id} frame {frame}")))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| BellaError::io(path, e))?;
    let mut w = BufWriter::new(f);
    for it in items {
        serde_json::to_writer(&mut w, it).expect("record serializes");
        w.write_all(b"\n").map_err(|e| BellaError::io(path, e))?;
    }
    w.flush().map_err(|e| BellaError::io(path, e))
}

/// Reads one record per non-empty line; errors carry the line number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| BellaError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| BellaError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| BellaError::Json {
            path: path.display().to_string(),
            line: i + 1,
            source: e,
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DataConfig {
        DataConfig {
            train_episodes: 6,
            test_episodes: 2,
            ..DataConfig::default()
        }
    }

    #[test]
    fn five_descriptions_per_episode() {
        let d = Dataset::generate(&small()).unwrap();
        assert_eq!(d.episodes.len(), 8);
        assert_eq!(d.pretrain.len(), 8 * 5);
        d.validate().unwrap();
    }

    #[test]
    fn write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = Dataset::generate(&small()).unwrap();
        d.write(dir.path()).unwrap();
        let back = Dataset::read(dir.path()).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.content_hash(), d.content_hash());
    }

    #[test]
    fn off_stride_frame_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut d = Dataset::generate(&small()).unwrap();
        d.pretrain[0].frame_index = 3;
        d.write(dir.path()).unwrap();
        let err = Dataset::read(dir.path()).unwrap_err();
        assert!(
            matches!(err, BellaError::Dataset(ref m) if m.contains("frame 3")),
            "{err}"
        );
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        fs::write(
            &p,
            "{\"episode_id\":0,\"frame_index\":0,\"description\":\"a\"}\n{oops\n",
        )
        .unwrap();
        match read_jsonl::<DescriptionSample>(&p) {
            Err(BellaError::Json { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn split_holds_out_tail() {
        let cfg = DataConfig {
            train_episodes: 20,
            test_episodes: 5,
            ..DataConfig::default()
        };
        let s = Split::new(&cfg, 0..25);
        assert_eq!(s.train.len(), 18);
        assert_eq!(s.val, [18, 19].into_iter().collect());
        assert_eq!(s.test.len(), 5);
    }
}
