//! Disease/phenotype knowledge base.
//!
//! A knowledge base is an ordered list of diseases, each carrying a set of
//! typical phenotypes (expected when the disease is present) and a set of
//! excluded phenotypes (absent whenever the disease is present). Disease
//! order is significant: it defines the class index used by every metric.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ValidationError, ValidationKind};

const DEFAULT_KB_JSON: &str = include_str!("../data/default_kb.json");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phenotype {
    pub id: String,
    pub display_name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiseaseEntry {
    pub id: String,
    pub display_name: String,
    pub typical: Vec<String>,
    pub excluded: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnowledgeBase {
    pub phenotypes: Vec<Phenotype>,
    pub diseases: Vec<DiseaseEntry>,
}

fn is_valid_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
}

impl KnowledgeBase {
    /// The shipped knowledge base over the eleven lung-related classes.
    pub fn default_kb() -> Self {
        Self::from_json_str(DEFAULT_KB_JSON).expect("shipped knowledge base is valid")
    }

    /// Parses and validates a knowledge document.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let kb: KnowledgeBase = serde_json::from_str(text).map_err(|e| Error::Format {
            line: e.line(),
            message: e.to_string(),
        })?;
        kb.validate()?;
        Ok(kb)
    }

    /// Reads, parses and validates a knowledge file.
    pub fn parse_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("knowledge base serializes")
    }

    /// Checks every structural invariant, stopping at the first violation.
    pub fn validate(&self) -> Result<(), ValidationError> {
        let mut seen = HashSet::new();
        for p in &self.phenotypes {
            if !is_valid_id(&p.id) {
                return Err(ValidationError::new(ValidationKind::BadId, &[&p.id]));
            }
            if !seen.insert(p.id.as_str()) {
                return Err(ValidationError::new(ValidationKind::DuplicateId, &[&p.id]));
            }
        }
        let phenotypes = seen;
        let mut diseases = HashSet::new();
        for d in &self.diseases {
            if d.id.is_empty() {
                return Err(ValidationError::new(ValidationKind::BadId, &[&d.id]));
            }
            if !diseases.insert(d.id.as_str()) {
                return Err(ValidationError::new(ValidationKind::DuplicateId, &[&d.id]));
            }
            if d.typical.is_empty() {
                return Err(ValidationError::new(ValidationKind::EmptyTypical, &[&d.id]));
            }
            for set in [&d.typical, &d.excluded] {
                let mut local = HashSet::new();
                for p in set {
                    if !phenotypes.contains(p.as_str()) {
                        return Err(ValidationError::new(
                            ValidationKind::DanglingRef,
                            &[&d.id, p],
                        ));
                    }
                    if !local.insert(p.as_str()) {
                        return Err(ValidationError::new(
                            ValidationKind::DuplicateId,
                            &[&d.id, p],
                        ));
                    }
                }
            }
            if let Some(p) = d.typical.iter().find(|p| d.excluded.contains(p)) {
                return Err(ValidationError::new(
                    ValidationKind::TypExcOverlap,
                    &[&d.id, p],
                ));
            }
        }
        Ok(())
    }

    pub fn num_diseases(&self) -> usize {
        self.diseases.len()
    }

    pub fn disease(&self, id: &str) -> Result<&DiseaseEntry> {
        self.diseases
            .iter()
            .find(|d| d.id == id)
            .ok_or_else(|| Error::UnknownDisease(id.to_string()))
    }

    /// Class index of a disease.
    pub fn disease_index(&self, id: &str) -> Result<usize> {
        self.diseases
            .iter()
            .position(|d| d.id == id)
            .ok_or_else(|| Error::UnknownDisease(id.to_string()))
    }

    pub fn phenotype(&self, id: &str) -> Option<&Phenotype> {
        self.phenotypes.iter().find(|p| p.id == id)
    }

    pub fn phenotype_index(&self, id: &str) -> Option<usize> {
        self.phenotypes.iter().position(|p| p.id == id)
    }

    /// Phenotype id to table index, for hot loops.
    pub fn phenotype_lookup(&self) -> HashMap<&str, usize> {
        self.phenotypes
            .iter()
            .enumerate()
            .map(|(i, p)| (p.id.as_str(), i))
            .collect()
    }

    /// Typical phenotypes of a disease, in declaration order.
    pub fn typical_phenotypes(&self, disease_id: &str) -> Result<Vec<&Phenotype>> {
        let d = self.disease(disease_id)?;
        Ok(self.resolve(&d.typical))
    }

    /// Excluded phenotypes of a disease, in declaration order.
    pub fn excluded_phenotypes(&self, disease_id: &str) -> Result<Vec<&Phenotype>> {
        let d = self.disease(disease_id)?;
        Ok(self.resolve(&d.excluded))
    }

    fn resolve(&self, ids: &[String]) -> Vec<&Phenotype> {
        ids.iter()
            .map(|id| self.phenotype(id).expect("validated reference"))
            .collect()
    }
}
