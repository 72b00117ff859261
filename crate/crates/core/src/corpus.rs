//! Mentions, entities and the line-delimited corpus file.
//!
//! Each line of a corpus file is a JSON object:
//!
//! ```text
//! {"id":"m1","kind":"mention","name":"Oxford","context":"published a study","image_ref":"img/m1.jpg"}
//! ```
//!
//! `image_ref` is optional; a record without it is a node with no visual
//! modality. Empty `context` is legal.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("corpus has no {0}")]
    Empty(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Mention,
    Entity,
}

/// A mention or an entity. Whether it carries an image is derived from
/// `image_ref`, so the two can never disagree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultimodalNode {
    pub id: String,
    pub kind: NodeKind,
    pub name: String,
    #[serde(default)]
    pub context: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
}

impl MultimodalNode {
    pub fn new(id: impl Into<String>, kind: NodeKind, name: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            kind,
            name: name.into(),
            context: String::new(),
            image_ref: None,
        }
    }

    pub fn with_context(mut self, context: impl Into<String>) -> Self {
        self.context = context.into();
        self
    }

    pub fn with_image(mut self, image_ref: impl Into<String>) -> Self {
        self.image_ref = Some(image_ref.into());
        self
    }

    pub fn has_image(&self) -> bool {
        self.image_ref.is_some()
    }

    /// The string handed to a text encoder: name followed by context.
    pub fn text(&self) -> String {
        if self.context.is_empty() {
            self.name.clone()
        } else {
            format!("{} {}", self.name, self.context)
        }
    }
}

/// 1 iff the node has visual information.
pub fn modality_indicator(node: &MultimodalNode) -> u8 {
    u8::from(node.has_image())
}

/// Immutable after construction. Node order is mentions first, then
/// entities, each in file order; that order defines the dense node index
/// used by the graph modules.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    mentions: Vec<MultimodalNode>,
    entities: Vec<MultimodalNode>,
    index: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(
        mentions: Vec<MultimodalNode>,
        entities: Vec<MultimodalNode>,
    ) -> Result<Self, CorpusError> {
        let mut index = HashMap::with_capacity(mentions.len() + entities.len());
        for (i, node) in mentions.iter().chain(&entities).enumerate() {
            if index.insert(node.id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateId(node.id.clone()));
            }
        }
        if mentions.iter().any(|n| n.kind != NodeKind::Mention)
            || entities.iter().any(|n| n.kind != NodeKind::Entity)
        {
            return Err(CorpusError::Malformed {
                line: 0,
                message: "node kind does not match its collection".into(),
            });
        }
        Ok(Self {
            mentions,
            entities,
            index,
        })
    }

    pub fn mentions(&self) -> &[MultimodalNode] {
        &self.mentions
    }

    pub fn entities(&self) -> &[MultimodalNode] {
        &self.entities
    }

    pub fn len(&self) -> usize {
        self.mentions.len() + self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn nodes(&self) -> impl Iterator<Item = &MultimodalNode> {
        self.mentions.iter().chain(&self.entities)
    }

    pub fn node_at(&self, index: usize) -> &MultimodalNode {
        if index < self.mentions.len() {
            &self.mentions[index]
        } else {
            &self.entities[index - self.mentions.len()]
        }
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&MultimodalNode> {
        self.index_of(id).map(|i| self.node_at(i))
    }

    pub fn ids(&self) -> Vec<String> {
        self.nodes().map(|n| n.id.clone()).collect()
    }

    /// Fails unless there is at least one mention and one entity.
    pub fn ensure_linkable(&self) -> Result<(), CorpusError> {
        if self.mentions.is_empty() {
            return Err(CorpusError::Empty("mentions"));
        }
        if self.entities.is_empty() {
            return Err(CorpusError::Empty("entities"));
        }
        Ok(())
    }

    /// Fraction of all nodes that carry an image.
    pub fn image_fraction(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.nodes().filter(|n| n.has_image()).count() as f64 / self.len() as f64
    }

    pub fn stats(&self) -> CorpusStats {
        CorpusStats {
            mentions: self.mentions.len(),
            entities: self.entities.len(),
            mentions_with_image: self.mentions.iter().filter(|n| n.has_image()).count(),
            entities_with_image: self.entities.iter().filter(|n| n.has_image()).count(),
        }
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<(), CorpusError> {
        for node in self.nodes() {
            let line = serde_json::to_string(node).map_err(|e| CorpusError::Malformed {
                line: 0,
                message: e.to_string(),
            })?;
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorpusStats {
    pub mentions: usize,
    pub entities: usize,
    pub mentions_with_image: usize,
    pub entities_with_image: usize,
}

impl CorpusStats {
    pub fn image_ratio(&self) -> f64 {
        let total = self.mentions + self.entities;
        if total == 0 {
            return 0.0;
        }
        (self.mentions_with_image + self.entities_with_image) as f64 / total as f64
    }
}

pub fn parse_corpus<R: Read>(reader: R) -> Result<Corpus, CorpusError> {
    let mut mentions = Vec::new();
    let mut entities = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let node: MultimodalNode =
            serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
                line: line_no,
                message: e.to_string(),
            })?;
        if node.id.is_empty() || node.id.chars().any(char::is_whitespace) {
            return Err(CorpusError::Malformed {
                line: line_no,
                message: format!("id {:?} must be non-empty and free of whitespace", node.id),
            });
        }
        if !seen.insert(node.id.clone()) {
            return Err(CorpusError::DuplicateId(node.id));
        }
        match node.kind {
            NodeKind::Mention => mentions.push(node),
            NodeKind::Entity => entities.push(node),
        }
    }
    Corpus::new(mentions, entities)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
    parse_corpus(File::open(path)?)
}
