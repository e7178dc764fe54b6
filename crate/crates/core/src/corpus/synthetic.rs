//! Synthetic corpora with known entity chains.
//!
//! Every mention of an entity embeds as that entity's base vector plus Gaussian noise;
//! filler tokens come from a separate distractor vocabulary. Coordinate 0 carries a
//! fixed sign marker (+ for mentions, − for filler) so the two distributions are disjoint.
//!
//! The distractor vocabulary and the entity inventory come from `pool_seed`, document
//! sampling from `seed`, so corpora generated with different seeds share both.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::{index, IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::gap::{write_gap, GapRow};
use super::ptem::{manifest_path, write_manifest, write_ptem, ManifestEntry};
use super::{CorefInstance, Document, Embeddings, Span};
use crate::error::{Error, Result};

const MARKER: f64 = 2.0;
const DISTRACTOR_VOCAB: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_docs: usize,
    /// Inclusive `[min, max]`.
    pub doc_length: (usize, usize),
    pub num_entities: (usize, usize),
    pub mentions_per_entity: (usize, usize),
    pub embed_dim: usize,
    pub noise_scale: f64,
    /// Size of the shared entity inventory; 0 draws fresh bases for every document.
    pub entity_pool: usize,
    pub pool_seed: u64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_docs: 100,
            doc_length: (36, 44),
            num_entities: (2, 4),
            mentions_per_entity: (1, 3),
            embed_dim: 32,
            noise_scale: 0.1,
            entity_pool: 20,
            pool_seed: 0,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("doc_length", self.doc_length),
            ("num_entities", self.num_entities),
            ("mentions_per_entity", self.mentions_per_entity),
        ];
        for (name, (lo, hi)) in ranges {
            if lo > hi {
                return Err(Error::Generation(format!("{name} range [{lo}, {hi}] is empty")));
            }
        }
        if self.num_entities.0 < 2 {
            return Err(Error::Generation("need at least two entities per document".into()));
        }
        if self.mentions_per_entity.0 < 1 || self.doc_length.0 < 1 {
            return Err(Error::Generation("mention and length ranges must start at 1 or more".into()));
        }
        if self.embed_dim < 2 {
            return Err(Error::Generation("embed_dim must be at least 2".into()));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Generation(format!("noise scale {} must be ≥ 0", self.noise_scale)));
        }
        if self.entity_pool != 0 && self.entity_pool < self.num_entities.1 {
            return Err(Error::Generation(format!(
                "entity pool of {} cannot supply {} entities",
                self.entity_pool, self.num_entities.1
            )));
        }
        let worst = self.num_entities.1 * self.mentions_per_entity.1.max(2);
        if worst > self.doc_length.0 {
            return Err(Error::Generation(format!(
                "up to {worst} mentions do not fit in documents of {} tokens",
                self.doc_length.0
            )));
        }
        Ok(())
    }
}

/// Ground truth kept alongside each generated instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRecord {
    pub doc_id: String,
    /// Inventory index of each local entity (equal to the local index without a pool).
    pub entity_ids: Vec<usize>,
    /// Sorted token positions of every mention, per entity.
    pub chains: Vec<Vec<usize>>,
    pub pronoun_entity: usize,
    pub a_entity: usize,
    pub b_entity: usize,
}

impl SyntheticRecord {
    pub fn people(&self) -> usize {
        self.chains.len()
    }

    pub fn entity_at(&self, t: usize) -> Option<usize> {
        self.chains.iter().position(|c| c.contains(&t))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub instances: Vec<CorefInstance>,
    pub records: Vec<SyntheticRecord>,
}

impl SyntheticCorpus {
    pub fn gold_counts(&self) -> Vec<(String, usize)> {
        self.records.iter().map(|r| (r.doc_id.clone(), r.people())).collect()
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let d = spec.embed_dim;
    let mut pool_rng = ChaCha8Rng::seed_from_u64(spec.pool_seed);
    let vocab: Vec<Vec<f64>> = (0..DISTRACTOR_VOCAB)
        .map(|_| {
            let mut v = gaussian_vec(&mut pool_rng, d, 1.0);
            v[0] = -MARKER;
            v
        })
        .collect();
    let entity_base = |rng: &mut ChaCha8Rng| {
        let mut v = gaussian_vec(rng, d, 1.0);
        v[0] = MARKER;
        v
    };
    let pool: Vec<Vec<f64>> = (0..spec.entity_pool).map(|_| entity_base(&mut pool_rng)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut instances = Vec::with_capacity(spec.num_docs);
    let mut records = Vec::with_capacity(spec.num_docs);
    for doc_idx in 0..spec.num_docs {
        let t_len = rng.random_range(spec.doc_length.0..=spec.doc_length.1);
        let k = rng.random_range(spec.num_entities.0..=spec.num_entities.1);
        let mut counts: Vec<usize> = (0..k)
            .map(|_| rng.random_range(spec.mentions_per_entity.0..=spec.mentions_per_entity.1))
            .collect();
        let target = rng.random_range(0..k);
        counts[target] = counts[target].max(2);
        let total: usize = counts.iter().sum();

        let mut positions = index::sample(&mut rng, t_len, total).into_vec();
        positions.sort_unstable();
        let mut owners: Vec<usize> = counts
            .iter()
            .enumerate()
            .flat_map(|(e, &c)| std::iter::repeat_n(e, c))
            .collect();
        owners.shuffle(&mut rng);
        let mut chains = vec![Vec::new(); k];
        for (&pos, &e) in positions.iter().zip(&owners) {
            chains[e].push(pos);
        }

        let pronoun = *chains[target][1..].choose(&mut rng).expect("target has ≥ 2 mentions");
        let others: Vec<usize> = (0..k).filter(|&e| e != target).collect();
        let other = *others.choose(&mut rng).expect("k ≥ 2");
        let target_first = rng.random_bool(0.5);
        let (a_entity, b_entity) = if target_first { (target, other) } else { (other, target) };

        let (entity_ids, bases): (Vec<usize>, Vec<Vec<f64>>) = if pool.is_empty() {
            (0..k).map(|e| (e, entity_base(&mut rng))).unzip()
        } else {
            index::sample(&mut rng, pool.len(), k)
                .into_iter()
                .map(|id| (id, pool[id].clone()))
                .unzip()
        };
        let mut owner_at = vec![None; t_len];
        for (e, chain) in chains.iter().enumerate() {
            for &p in chain {
                owner_at[p] = Some(e);
            }
        }

        let mut tokens = Vec::with_capacity(t_len);
        let mut data = Vec::with_capacity(t_len * d);
        for (t, owner) in owner_at.iter().enumerate() {
            let (base, word) = match owner {
                Some(e) => {
                    let word = if chains[*e][0] == t {
                        format!("Person{}", entity_ids[*e])
                    } else {
                        "they".to_string()
                    };
                    (&bases[*e], word)
                }
                None => {
                    let v = rng.random_range(0..DISTRACTOR_VOCAB);
                    (&vocab[v], format!("w{v}"))
                }
            };
            let noise = gaussian_vec(&mut rng, d, spec.noise_scale);
            data.push(base[0] as f32);
            for j in 1..d {
                data.push((base[j] + noise[j]) as f32);
            }
            tokens.push(word);
        }
        let mut offsets = Vec::with_capacity(t_len);
        let mut pos = 0;
        for w in &tokens {
            let n = w.chars().count();
            offsets.push((pos, pos + n));
            pos += n + 1;
        }

        let doc_id = format!("synth-{}-{doc_idx:05}", spec.seed);
        let doc = Document::new(
            doc_id.clone(),
            tokens,
            offsets,
            Embeddings::new(t_len, d, data)?,
        )?;
        let record = SyntheticRecord {
            doc_id,
            entity_ids,
            chains,
            pronoun_entity: target,
            a_entity,
            b_entity,
        };
        let inst = CorefInstance {
            doc,
            span_a: Span::single(record.chains[a_entity][0]),
            span_b: Span::single(record.chains[b_entity][0]),
            span_p: Span::single(pronoun),
            label_a: a_entity == target,
            label_b: b_entity == target,
        };
        inst.validate()?;
        instances.push(inst);
        records.push(record);
    }
    Ok(SyntheticCorpus { instances, records })
}

fn text_of(doc: &Document) -> String {
    doc.tokens.join(" ")
}

/// Writes `<stem>.tsv`, `<stem>.ptem`, `<stem>.manifest.json` and `<stem>.counts.tsv`.
pub fn write_corpus(dir: &Path, stem: &str, corpus: &SyntheticCorpus) -> Result<Vec<std::path::PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tsv = dir.join(format!("{stem}.tsv"));
    let ptem = dir.join(format!("{stem}.ptem"));
    let counts = dir.join(format!("{stem}.counts.tsv"));

    let rows: Vec<GapRow> = corpus
        .instances
        .iter()
        .map(|i| {
            let d = &i.doc;
            let mention = |s: Span| d.tokens[s.first..=s.last].join(" ");
            GapRow {
                id: d.id.clone(),
                text: text_of(d),
                pronoun: mention(i.span_p),
                pronoun_offset: d.char_offsets[i.span_p.first].0,
                a: mention(i.span_a),
                a_offset: d.char_offsets[i.span_a.first].0,
                a_coref: i.label_a,
                b: mention(i.span_b),
                b_offset: d.char_offsets[i.span_b.first].0,
                b_coref: i.label_b,
                url: String::new(),
            }
        })
        .collect();
    write_gap(&tsv, &rows)?;

    let embs: Vec<(&str, &Embeddings)> = corpus
        .instances
        .iter()
        .map(|i| (i.doc.id.as_str(), &i.doc.embeddings))
        .collect();
    write_ptem(&ptem, &embs)?;

    let manifest: BTreeMap<String, ManifestEntry> = corpus
        .instances
        .iter()
        .map(|i| {
            (
                i.doc.id.clone(),
                ManifestEntry {
                    tokens: i.doc.tokens.clone(),
                    char_offsets: i.doc.char_offsets.iter().map(|&(s, e)| [s, e]).collect(),
                },
            )
        })
        .collect();
    let mpath = manifest_path(&ptem);
    write_manifest(&mpath, &manifest, Some(serde_json::json!({"source": "synthetic"})))?;

    write_counts(&counts, &corpus.gold_counts())?;
    Ok(vec![tsv, ptem, mpath, counts])
}

pub fn write_counts(path: &Path, counts: &[(String, usize)]) -> Result<()> {
    let mut text = String::from("doc_id\tunique_people\n");
    for (id, c) in counts {
        text.push_str(&format!("{id}\t{c}\n"));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_counts(path: &Path) -> Result<BTreeMap<String, usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut f = line.split('\t');
        let (Some(id), Some(count)) = (f.next(), f.next()) else {
            return Err(Error::Format(format!("{}:{}: expected two columns", path.display(), k + 1)));
        };
        match count.trim().parse() {
            Ok(c) => {
                out.insert(id.to_string(), c);
            }
            Err(_) if k == 0 => {}
            Err(_) => {
                return Err(Error::Format(format!(
                    "{}:{}: bad count `{count}`",
                    path.display(),
                    k + 1
                )))
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::load_gap;
    use proptest::prelude::*;

    fn small(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            num_docs: 12,
            doc_length: (14, 20),
            num_entities: (2, 4),
            mentions_per_entity: (1, 3),
            embed_dim: 6,
            noise_scale: 0.1,
            entity_pool: 10,
            pool_seed: 0,
            seed,
        }
    }

    #[test]
    fn pool_is_shared_across_seeds() {
        let a = generate_synthetic(&SyntheticSpec { noise_scale: 0.0, ..small(1) }).unwrap();
        let b = generate_synthetic(&SyntheticSpec { noise_scale: 0.0, ..small(2) }).unwrap();
        let mut seen: BTreeMap<usize, Vec<f32>> = BTreeMap::new();
        for c in [&a, &b] {
            for (inst, rec) in c.instances.iter().zip(&c.records) {
                for (e, chain) in rec.chains.iter().enumerate() {
                    let row = inst.doc.embeddings.row(chain[0]).to_vec();
                    let prev = seen.entry(rec.entity_ids[e]).or_insert_with(|| row.clone());
                    assert_eq!(*prev, row);
                }
            }
        }
        assert!(seen.len() > 1);
    }

    #[test]
    fn pool_smaller_than_entity_count_is_rejected() {
        let spec = SyntheticSpec { entity_pool: 3, ..small(1) };
        assert!(matches!(generate_synthetic(&spec), Err(Error::Generation(_))));
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = generate_synthetic(&small(7)).unwrap();
        let b = generate_synthetic(&small(7)).unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        let fa = write_corpus(&dir.path().join("a"), "c", &a).unwrap();
        let fb = write_corpus(&dir.path().join("b"), "c", &b).unwrap();
        for (x, y) in fa.iter().zip(&fb) {
            assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
        }
    }

    #[test]
    fn zero_noise_gives_identical_mentions() {
        let mut spec = small(3);
        spec.noise_scale = 0.0;
        let corpus = generate_synthetic(&spec).unwrap();
        for (inst, rec) in corpus.instances.iter().zip(&corpus.records) {
            for chain in &rec.chains {
                let first = inst.doc.embeddings.row(chain[0]);
                for &p in chain {
                    assert_eq!(inst.doc.embeddings.row(p), first);
                }
            }
        }
    }

    #[test]
    fn infeasible_spec_is_rejected() {
        let mut spec = small(1);
        spec.doc_length = (5, 5);
        spec.num_entities = (3, 3);
        spec.mentions_per_entity = (2, 2);
        assert!(matches!(generate_synthetic(&spec), Err(Error::Generation(_))));
        let mut spec = small(1);
        spec.noise_scale = -1.0;
        assert!(generate_synthetic(&spec).is_err());
        let mut spec = small(1);
        spec.num_entities = (4, 3);
        assert!(generate_synthetic(&spec).is_err());
    }

    #[test]
    fn written_corpus_loads_back_identically() {
        let corpus = generate_synthetic(&small(11)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), "train", &corpus).unwrap();
        let loaded = load_gap(&dir.path().join("train.tsv"), &dir.path().join("train.ptem")).unwrap();
        assert_eq!(loaded, corpus.instances);
        let counts = read_counts(&dir.path().join("train.counts.tsv")).unwrap();
        for r in &corpus.records {
            assert_eq!(counts[&r.doc_id], r.people());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn labels_agree_with_chain_record(seed in any::<u64>()) {
            let corpus = generate_synthetic(&small(seed)).unwrap();
            for (inst, rec) in corpus.instances.iter().zip(&corpus.records) {
                let pe = rec.entity_at(inst.span_p.head()).unwrap();
                let ae = rec.entity_at(inst.span_a.head()).unwrap();
                let be = rec.entity_at(inst.span_b.head()).unwrap();
                prop_assert_eq!(inst.label_a, ae == pe);
                prop_assert_eq!(inst.label_b, be == pe);
                // exactly one candidate belongs to the pronoun's chain
                prop_assert!(inst.label_a ^ inst.label_b);
                prop_assert_eq!(rec.people(), rec.chains.len());
            }
        }
    }
}
