use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::datamodel::QaInstance;

use super::EncoderStyle;

pub const UNK: &str = "<unk>";

/// Token, concept and relation vocabularies. Index 0 of each is [`UNK`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    pub tokens: Vec<String>,
    pub concepts: Vec<String>,
    pub relations: Vec<String>,
    tok_index: HashMap<String, usize>,
    concept_index: HashMap<String, usize>,
    rel_index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
    concepts: Vec<String>,
    relations: Vec<String>,
}

impl From<VocabRepr> for Vocab {
    fn from(r: VocabRepr) -> Self {
        Vocab::from_lists(r.tokens, r.concepts, r.relations)
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        VocabRepr {
            tokens: v.tokens,
            concepts: v.concepts,
            relations: v.relations,
        }
    }
}

fn index(list: &[String]) -> HashMap<String, usize> {
    list.iter()
        .enumerate()
        .map(|(i, s)| (s.clone(), i))
        .collect()
}

fn with_unk(set: BTreeSet<&str>) -> Vec<String> {
    std::iter::once(UNK)
        .chain(set.into_iter().filter(|s| *s != UNK))
        .map(str::to_string)
        .collect()
}

impl Vocab {
    fn from_lists(tokens: Vec<String>, concepts: Vec<String>, relations: Vec<String>) -> Self {
        Vocab {
            tok_index: index(&tokens),
            concept_index: index(&concepts),
            rel_index: index(&relations),
            tokens,
            concepts,
            relations,
        }
    }

    /// Sorted vocabularies of everything seen in `train`.
    pub fn build(train: &[QaInstance]) -> Self {
        let mut tokens = BTreeSet::new();
        let mut concepts = BTreeSet::new();
        let mut relations = BTreeSet::new();
        for inst in train {
            tokens.extend(inst.question.iter().map(String::as_str));
            for ch in &inst.choices {
                tokens.extend(ch.text.iter().map(String::as_str));
                concepts.extend(ch.kg.nodes.iter().map(|n| n.label.as_str()));
                relations.extend(ch.kg.relations.iter().map(String::as_str));
            }
        }
        Vocab::from_lists(with_unk(tokens), with_unk(concepts), with_unk(relations))
    }

    pub fn token(&self, s: &str) -> usize {
        self.tok_index.get(s).copied().unwrap_or(0)
    }

    pub fn concept(&self, s: &str) -> usize {
        self.concept_index.get(s).copied().unwrap_or(0)
    }

    pub fn relation(&self, s: &str) -> usize {
        self.rel_index.get(s).copied().unwrap_or(0)
    }

    pub fn encode(&self, inst: &QaInstance, style: Option<EncoderStyle>) -> EncodedInstance {
        let choices = (0..inst.choices.len())
            .map(|c| {
                let tokens = inst
                    .statement(c)
                    .into_iter()
                    .map(|t| self.token(t))
                    .collect();
                let kg = &inst.choices[c].kg;
                let rel_of = |e: usize| self.relation(&kg.relations[kg.edges[e].relation]);
                let units = match style {
                    None => Vec::new(),
                    Some(EncoderStyle::PathAttn) => kg
                        .paths
                        .iter()
                        .map(|p| {
                            let first = &kg.edges[p.edges[0]];
                            let last = &kg.edges[*p.edges.last().unwrap()];
                            EncodedUnit::Path {
                                head: self.concept(&kg.nodes[first.head as usize].label),
                                rels: p.edges.iter().map(|&e| rel_of(e)).collect(),
                                tail: self.concept(&kg.nodes[last.tail as usize].label),
                            }
                        })
                        .collect(),
                    Some(EncoderStyle::NodeAttn) => {
                        let mut nbrs: Vec<Vec<(usize, usize)>> = vec![Vec::new(); kg.nodes.len()];
                        for e in &kg.edges {
                            let r = self.relation(&kg.relations[e.relation]);
                            nbrs[e.tail as usize].push((e.head as usize, r));
                            nbrs[e.head as usize].push((e.tail as usize, r));
                        }
                        kg.nodes
                            .iter()
                            .zip(nbrs)
                            .map(|(n, neighbours)| EncodedUnit::Node {
                                concept: self.concept(&n.label),
                                neighbours,
                            })
                            .collect()
                    }
                };
                EncodedChoice { tokens, units }
            })
            .collect();
        EncodedInstance {
            id: inst.id.clone(),
            target: inst.target_index,
            choices,
        }
    }
}

/// One fine unit in vocabulary indices.
#[derive(Debug, Clone, PartialEq)]
pub enum EncodedUnit {
    Path {
        head: usize,
        rels: Vec<usize>,
        tail: usize,
    },
    /// `neighbours` are (node position, relation index) pairs.
    Node {
        concept: usize,
        neighbours: Vec<(usize, usize)>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedChoice {
    pub tokens: Vec<usize>,
    pub units: Vec<EncodedUnit>,
}

/// A [`QaInstance`] in vocabulary indices, ready for the forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedInstance {
    pub id: String,
    pub target: usize,
    pub choices: Vec<EncodedChoice>,
}
