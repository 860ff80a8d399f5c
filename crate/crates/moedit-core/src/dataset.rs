//! Synthetic editing-corpus generator.
//!
//! A closed-vocabulary fact world: invented entities, relation templates
//! grouped into topic families, and (subject, relation, object) triples
//! split into pretraining facts, edit facts (genuine corrections whose
//! new object differs from the pretrained one), and locality probes
//! whose subjects never appear in any edit. Topics are realized as
//! relation families sharing surface words, so instance embeddings
//! cluster by family and the order planner has structure to find.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::backbone::Tokenizer;
use crate::editing::EditRecord;
use crate::numerics::Rng;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CorpusError {
    #[error("inconsistent corpus config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct CorpusConfig {
    /// Entity pool; needs at least 2 * n_edit_records (edit subjects and
    /// locality subjects are disjoint).
    pub n_entities: usize,
    pub n_relations: usize,
    pub n_edit_records: usize,
    /// Relation families; the cluster structure the planner can exploit.
    pub n_topics: usize,
    pub seed: u64,
    /// Object-phrase length for the free-text (perplexity) variant.
    pub phrase_target_len: usize,
}

impl Default for CorpusConfig {
    fn default() -> CorpusConfig {
        CorpusConfig {
            n_entities: 220,
            n_relations: 10,
            n_edit_records: 100,
            n_topics: 5,
            seed: 11,
            phrase_target_len: 3,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.n_edit_records == 0 {
            return Err(CorpusError::Config(String::from(
                "n_edit_records must be >= 1",
            )));
        }
        if self.n_topics == 0 || self.n_topics > self.n_relations {
            return Err(CorpusError::Config(format!(
                "n_topics {} must be in 1..=n_relations {}",
                self.n_topics, self.n_relations
            )));
        }
        if self.n_entities < 2 * self.n_edit_records {
            return Err(CorpusError::Config(format!(
                "n_entities {} < 2 * n_edit_records {} (edit and locality subjects are disjoint)",
                self.n_entities, self.n_edit_records
            )));
        }
        if self.n_relations + (self.n_relations / 2).max(1) > 16 {
            return Err(CorpusError::Config(format!(
                "n_relations {} exceeds the object-pool capacity",
                self.n_relations
            )));
        }
        if self.phrase_target_len == 0 || self.phrase_target_len > OBJECTS_PER_RELATION {
            return Err(CorpusError::Config(format!(
                "phrase_target_len must be in 1..={OBJECTS_PER_RELATION}"
            )));
        }
        Ok(())
    }
}

/// One surface-form relation. `family_word` is shared by every relation
/// of the topic; `keyword` is unique to the relation.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Relation {
    pub family: usize,
    pub family_word: String,
    pub keyword: String,
    /// Second relation-specific word; thickens the relation signal in
    /// mean-pooled prompt embeddings relative to per-record subject
    /// noise, which is what instance-level routing keys on.
    pub keyword2: String,
    /// Synonyms used by the paraphrase template. Pretraining renders
    /// every fact through both templates, so the backbone learns the
    /// equivalence; an edit then generalizes only if it took hold at a
    /// semantic depth rather than rewriting surface tokens.
    pub keyword_syn: String,
    pub keyword2_syn: String,
    pub objects: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Fact {
    pub subject: usize,
    pub relation: usize,
    pub object: String,
}

#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FactWorld {
    pub config: CorpusConfig,
    pub entities: Vec<String>,
    pub relations: Vec<Relation>,
    /// Everything the backbone is pretrained on: the edit subjects' old
    /// facts plus the locality facts.
    pub pretrain_known: Vec<Fact>,
    /// Corrections: same (subject, relation) as a pretraining fact but a
    /// different object.
    pub edit_new: Vec<Fact>,
    /// Subset of pretrain_known used as locality probes; subjects are
    /// disjoint from every edit subject and relations are
    /// locality-only, so probes are genuinely unrelated to every edit.
    pub locality_probe: Vec<Fact>,
    /// Topic (family) label per edit record, for cluster-purity checks.
    pub topic_of_edit: Vec<usize>,
}

const ENTITY_SYLLABLES: [&str; 15] = [
    "ba", "de", "fi", "go", "hu", "ka", "lo", "mi", "nu", "po", "ra", "su", "ti", "vo", "ze",
];
const RELATION_WORDS: [&str; 10] = [
    "dral", "kron", "plim", "stur", "glan", "brev", "twis", "flor", "quen", "smol",
];
const FAMILY_WORDS: [&str; 10] = [
    "zum", "qex", "wol", "vyn", "jat", "hix", "rud", "cam", "lof", "teb",
];
const OBJECT_SYLLABLES: [&str; 10] = ["ar", "en", "ir", "ok", "ul", "ex", "an", "om", "it", "ub"];
const OBJECTS_PER_RELATION: usize = 6;

/// Deterministic unique word: the base-`pool` digits of `idx`, at least
/// `min_sylls` syllables long.
fn compose(pool: &[&str], mut idx: usize, min_sylls: usize) -> String {
    let base = pool.len();
    let mut sylls = Vec::new();
    loop {
        sylls.push(pool[idx % base]);
        idx /= base;
        if idx == 0 && sylls.len() >= min_sylls {
            break;
        }
    }
    sylls.reverse();
    sylls.concat()
}

/// Seeded permutation of `0..cap`, used so different seeds name things
/// differently while keeping uniqueness.
fn seeded_perm(cap: usize, rng: &mut Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..cap).collect();
    rng.shuffle(&mut p);
    p
}

pub fn generate_world(config: &CorpusConfig) -> Result<FactWorld, CorpusError> {
    config.validate()?;
    let mut rng = Rng::new(config.seed);

    // Entities: two-or-more-syllable names, unique by construction.
    let ent_cap = ENTITY_SYLLABLES.len() * ENTITY_SYLLABLES.len();
    if config.n_entities > ent_cap {
        return Err(CorpusError::Config(format!(
            "n_entities {} exceeds the name capacity {ent_cap}",
            config.n_entities
        )));
    }
    let ent_perm = seeded_perm(ent_cap, &mut rng);
    let entities: Vec<String> = (0..config.n_entities)
        .map(|i| compose(&ENTITY_SYLLABLES, ent_perm[i], 2))
        .collect();

    // Relations: unique keyword, family-shared family word, object pool.
    let rel_perm = seeded_perm(100, &mut rng);
    let fam_perm = seeded_perm(100, &mut rng);
    let obj_cap = OBJECT_SYLLABLES.len() * OBJECT_SYLLABLES.len();
    let obj_perm = seeded_perm(obj_cap, &mut rng);
    // Edit relations first, then locality-only relations in their own
    // families: locality probes must not share surface structure with
    // any edit, or instance-level routing drags them into edit clusters.
    let n_loc_rels = (config.n_relations / 2).max(1);
    let n_total_rels = config.n_relations + n_loc_rels;
    if n_total_rels * OBJECTS_PER_RELATION > obj_cap {
        return Err(CorpusError::Config(format!(
            "object pool exhausted for {n_total_rels} relations"
        )));
    }
    let relations: Vec<Relation> = (0..n_total_rels)
        .map(|r| {
            let family = if r < config.n_relations {
                r % config.n_topics
            } else {
                config.n_topics + (r - config.n_relations)
            };
            let objects = (0..OBJECTS_PER_RELATION)
                .map(|p| compose(&OBJECT_SYLLABLES, obj_perm[r * OBJECTS_PER_RELATION + p], 2))
                .collect();
            Relation {
                family,
                family_word: compose(&FAMILY_WORDS, fam_perm[family], 1),
                keyword: compose(&RELATION_WORDS, rel_perm[r], 1),
                keyword2: compose(&RELATION_WORDS, rel_perm[50 + r], 1),
                keyword_syn: compose(&RELATION_WORDS, rel_perm[25 + r], 1),
                keyword2_syn: compose(&RELATION_WORDS, rel_perm[75 + r], 1),
                objects,
            }
        })
        .collect();

    // Edit facts: record j covers family j % n_topics, cycling through
    // that family's relations; subject j is used exactly once.
    let rels_of_family: Vec<Vec<usize>> = (0..config.n_topics)
        .map(|f| {
            (0..config.n_relations)
                .filter(|r| r % config.n_topics == f)
                .collect()
        })
        .collect();
    let mut pretrain_known = Vec::new();
    let mut edit_new = Vec::new();
    let mut topic_of_edit = Vec::new();
    for j in 0..config.n_edit_records {
        let family = j % config.n_topics;
        let in_family = &rels_of_family[family];
        let relation = in_family[(j / config.n_topics) % in_family.len()];
        let pool = &relations[relation].objects;
        let old = rng.below(pool.len());
        let mut new = rng.below(pool.len() - 1);
        if new >= old {
            new += 1;
        }
        pretrain_known.push(Fact {
            subject: j,
            relation,
            object: pool[old].clone(),
        });
        edit_new.push(Fact {
            subject: j,
            relation,
            object: pool[new].clone(),
        });
        topic_of_edit.push(family);
    }

    // Locality facts: fresh subjects, locality-only relations.
    let mut locality_probe = Vec::new();
    for j in 0..config.n_edit_records {
        let subject = config.n_edit_records + j;
        let relation = config.n_relations + (j % n_loc_rels);
        let pool = &relations[relation].objects;
        let fact = Fact {
            subject,
            relation,
            object: pool[rng.below(pool.len())].clone(),
        };
        pretrain_known.push(fact.clone());
        locality_probe.push(fact);
    }

    Ok(FactWorld {
        config: config.clone(),
        entities,
        relations,
        pretrain_known,
        edit_new,
        locality_probe,
        topic_of_edit,
    })
}

impl FactWorld {
    /// Statement template: "<kw> <kw2> <subject>".
    ///
    /// Deliberately glue-free and family-free: shared function words add
    /// a common embedding component that swamps what routing keys on,
    /// and the family word would make sibling relations of one topic
    /// indistinguishable to the instance-level router. The family signal
    /// lives in the target instead, where the planner's concatenated
    /// instance vector still sees it.
    pub fn prompt_statement(&self, fact: &Fact) -> String {
        let r = &self.relations[fact.relation];
        format!(
            "{} {} {}",
            r.keyword, r.keyword2, self.entities[fact.subject]
        )
    }

    /// Paraphrase template: "<subject> <kw2> <kw_syn>". Reordered, with
    /// one keyword swapped for its pretrained synonym, so the surface
    /// form differs while the meaning and part of the tokens carry over.
    pub fn prompt_paraphrase(&self, fact: &Fact) -> String {
        let r = &self.relations[fact.relation];
        format!(
            "{} {} {}",
            self.entities[fact.subject], r.keyword2, r.keyword_syn
        )
    }

    /// Target phrase: "<family> <object>". Typing the value with the
    /// family word keeps instance embeddings family-clustered, which is
    /// the structure the order planner exploits.
    pub fn target_text(&self, fact: &Fact) -> String {
        format!(
            "{} {}",
            self.relations[fact.relation].family_word, fact.object
        )
    }

    /// Every word that can occur in any prompt or target.
    pub fn vocabulary(&self) -> Vec<String> {
        let mut words: Vec<String> = Vec::new();
        words.extend(self.entities.iter().cloned());
        for r in &self.relations {
            words.push(r.family_word.clone());
            words.push(r.keyword.clone());
            words.push(r.keyword2.clone());
            words.push(r.keyword_syn.clone());
            words.push(r.keyword2_syn.clone());
            words.extend(r.objects.iter().cloned());
        }
        words.sort_unstable();
        words.dedup();
        words
    }

    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer::from_words(self.vocabulary())
    }

    /// Pretraining sequences: both templates of every known fact,
    /// bos ... eos.
    pub fn pretrain_sequences(&self, tok: &Tokenizer) -> Vec<Vec<u32>> {
        let mut seqs = Vec::with_capacity(2 * self.pretrain_known.len());
        for fact in &self.pretrain_known {
            for text in [
                format!("{} {}", self.prompt_statement(fact), self.target_text(fact)),
                format!(
                    "{} {}",
                    self.prompt_paraphrase(fact),
                    self.target_text(fact)
                ),
            ] {
                let mut ids = vec![crate::backbone::BOS];
                ids.extend(tok.encode(&text));
                ids.push(crate::backbone::EOS);
                seqs.push(ids);
            }
        }
        seqs
    }

    /// Held-in probes for the pretrained backbone: statement prompt plus
    /// the pretrained object, one per pretraining fact.
    pub fn held_in_probes(&self) -> Vec<(String, String)> {
        self.pretrain_known
            .iter()
            .map(|f| (self.prompt_statement(f), self.target_text(f)))
            .collect()
    }

    /// One edit record per correction; the locality probe is assigned
    /// round-robin.
    pub fn to_edit_records(&self) -> Vec<EditRecord> {
        self.edit_new
            .iter()
            .enumerate()
            .map(|(j, fact)| {
                let loc = &self.locality_probe[j % self.locality_probe.len()];
                EditRecord {
                    edit_prompt: self.prompt_statement(fact),
                    edit_target: self.target_text(fact),
                    paraphrase_prompt: self.prompt_paraphrase(fact),
                    locality_prompt: self.prompt_statement(loc),
                    locality_expected: Vec::new(),
                }
            })
            .collect()
    }

    /// Free-text variant for the perplexity metric: the same prompts with
    /// multi-word object phrases as targets.
    pub fn to_phrase_records(&self) -> Vec<EditRecord> {
        let len = self.config.phrase_target_len;
        self.edit_new
            .iter()
            .enumerate()
            .map(|(j, fact)| {
                let pool = &self.relations[fact.relation].objects;
                let start = pool.iter().position(|o| o == &fact.object).unwrap_or(0);
                let mut phrase: Vec<&str> =
                    vec![self.relations[fact.relation].family_word.as_str()];
                phrase.extend((0..len).map(|k| pool[(start + k) % pool.len()].as_str()));
                let loc = &self.locality_probe[j % self.locality_probe.len()];
                EditRecord {
                    edit_prompt: self.prompt_statement(fact),
                    edit_target: phrase.join(" "),
                    paraphrase_prompt: self.prompt_paraphrase(fact),
                    locality_prompt: self.prompt_statement(loc),
                    locality_expected: Vec::new(),
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn small_config() -> CorpusConfig {
        CorpusConfig {
            n_entities: 40,
            n_relations: 6,
            n_edit_records: 18,
            n_topics: 3,
            seed: 11,
            phrase_target_len: 3,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_world(&small_config()).unwrap();
        let b = generate_world(&small_config()).unwrap();
        assert_eq!(a.entities, b.entities);
        assert_eq!(a.pretrain_known, b.pretrain_known);
        assert_eq!(a.edit_new, b.edit_new);
        let mut c = small_config();
        c.seed = 12;
        let c = generate_world(&c).unwrap();
        assert_ne!(a.edit_new, c.edit_new);
    }

    #[test]
    fn record_counts_and_topics() {
        let w = generate_world(&small_config()).unwrap();
        assert_eq!(w.edit_new.len(), 18);
        assert_eq!(w.to_edit_records().len(), w.edit_new.len());
        assert_eq!(w.locality_probe.len(), 18);
        assert_eq!(w.pretrain_known.len(), 36);
        // 3 families of 6 records each
        for f in 0..3 {
            assert_eq!(w.topic_of_edit.iter().filter(|&&t| t == f).count(), 6);
        }
    }

    #[test]
    fn edits_are_genuine_corrections() {
        let w = generate_world(&small_config()).unwrap();
        for (old, new) in w.pretrain_known.iter().zip(&w.edit_new) {
            assert_eq!(old.subject, new.subject);
            assert_eq!(old.relation, new.relation);
            assert_ne!(old.object, new.object);
        }
    }

    #[test]
    fn locality_subjects_are_disjoint_from_edit_subjects() {
        let w = generate_world(&small_config()).unwrap();
        let edit_subjects: BTreeSet<usize> = w.edit_new.iter().map(|f| f.subject).collect();
        for f in &w.locality_probe {
            assert!(!edit_subjects.contains(&f.subject));
        }
        // and every locality fact is pretrained
        for f in &w.locality_probe {
            assert!(w.pretrain_known.contains(f));
        }
    }

    #[test]
    fn paraphrase_differs_from_prompt() {
        let w = generate_world(&small_config()).unwrap();
        for r in w.to_edit_records() {
            assert_ne!(r.edit_prompt, r.paraphrase_prompt);
        }
    }

    #[test]
    fn vocabulary_covers_all_templates() {
        let w = generate_world(&small_config()).unwrap();
        let tok = w.tokenizer();
        for r in w.to_edit_records() {
            for text in [
                &r.edit_prompt,
                &r.edit_target,
                &r.paraphrase_prompt,
                &r.locality_prompt,
            ] {
                for id in tok.encode(text) {
                    assert_ne!(id, crate::backbone::UNK, "unknown word in {text:?}");
                }
            }
        }
    }

    #[test]
    fn phrase_records_have_multiword_targets() {
        let w = generate_world(&small_config()).unwrap();
        for r in w.to_phrase_records() {
            // family marker plus phrase_target_len object words
            assert_eq!(r.edit_target.split_whitespace().count(), 4);
        }
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        let mut c = small_config();
        c.n_entities = 20;
        assert!(generate_world(&c).is_err());
        let mut c = small_config();
        c.n_topics = 7;
        assert!(generate_world(&c).is_err());
        let mut c = small_config();
        c.n_edit_records = 0;
        assert!(generate_world(&c).is_err());
    }

    #[test]
    fn n_topics_one_gives_single_family() {
        let mut c = small_config();
        c.n_topics = 1;
        let w = generate_world(&c).unwrap();
        assert!(w.topic_of_edit.iter().all(|&t| t == 0));
        let fam: BTreeSet<&str> = w.relations[..c.n_relations]
            .iter()
            .map(|r| r.family_word.as_str())
            .collect();
        assert_eq!(fam.len(), 1, "edit relations should share one family");
    }

    #[test]
    fn topic_structure_is_recoverable_by_kmeans() {
        // Instance vectors (concat of mean prompt/target embeddings) from
        // a fresh random backbone must cluster by family with >= 0.9
        // purity.
        use crate::backbone::{BackboneConfig, BackboneModel};
        use crate::numerics::Rng;

        let mut config = small_config();
        config.n_edit_records = 30;
        config.n_entities = 60;
        let w = generate_world(&config).unwrap();
        let tok = w.tokenizer();
        let model = BackboneModel::new(
            BackboneConfig {
                n_layers: 2,
                d_model: 32,
                n_heads: 2,
                d_ff: 32,
                vocab_size: tok.vocab_size(),
                max_seq_len: 32,
                host_layer: 1,
            },
            &mut Rng::new(5),
        )
        .unwrap();
        let records = w.to_edit_records();
        let vectors: Vec<Vec<f64>> = records
            .iter()
            .map(|r| {
                let mut e = model.embed_instance(&tok.encode(&r.edit_prompt)).unwrap();
                e.extend(model.embed_instance(&tok.encode(&r.edit_target)).unwrap());
                e
            })
            .collect();
        let km = crate::planner::kmeans(&vectors, 3, 1).unwrap();
        // purity: majority topic per cluster
        let mut correct = 0;
        for c in 0..3 {
            let mut counts = [0usize; 3];
            for (i, &a) in km.assignment.iter().enumerate() {
                if a == c {
                    counts[w.topic_of_edit[i]] += 1;
                }
            }
            correct += counts.iter().max().unwrap();
        }
        let purity = correct as f64 / records.len() as f64;
        assert!(purity >= 0.9, "cluster purity {purity} < 0.9");
    }
}
