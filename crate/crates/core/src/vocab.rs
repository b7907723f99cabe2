//! Label vocabularies and the triplet dictionary.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Component ids of one triplet class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TripletComponents {
    pub instrument: usize,
    pub verb: usize,
    pub target: usize,
}

impl TripletComponents {
    pub fn new(instrument: usize, verb: usize, target: usize) -> Self {
        Self {
            instrument,
            verb,
            target,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RawVocabulary {
    instruments: Vec<String>,
    verbs: Vec<String>,
    targets: Vec<String>,
    triplets: Vec<[usize; 3]>,
}

/// Instrument, verb and target class lists plus the ordered triplet dictionary.
///
/// The verb head carries one extra background slot at index `verbs.len()`; it is
/// never part of the vocabulary itself.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "RawVocabulary", into = "RawVocabulary")]
pub struct LabelVocabulary {
    instruments: Vec<String>,
    verbs: Vec<String>,
    targets: Vec<String>,
    triplets: Vec<TripletComponents>,
    lookup: HashMap<TripletComponents, usize>,
}

impl PartialEq for LabelVocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.instruments == other.instruments
            && self.verbs == other.verbs
            && self.targets == other.targets
            && self.triplets == other.triplets
    }
}

impl TryFrom<RawVocabulary> for LabelVocabulary {
    type Error = Error;

    fn try_from(raw: RawVocabulary) -> Result<Self> {
        let triplets = raw
            .triplets
            .iter()
            .map(|&[i, v, t]| TripletComponents::new(i, v, t))
            .collect();
        LabelVocabulary::new(raw.instruments, raw.verbs, raw.targets, triplets)
    }
}

impl From<LabelVocabulary> for RawVocabulary {
    fn from(v: LabelVocabulary) -> Self {
        RawVocabulary {
            triplets: v
                .triplets
                .iter()
                .map(|c| [c.instrument, c.verb, c.target])
                .collect(),
            instruments: v.instruments,
            verbs: v.verbs,
            targets: v.targets,
        }
    }
}

impl LabelVocabulary {
    pub fn new(
        instruments: Vec<String>,
        verbs: Vec<String>,
        targets: Vec<String>,
        triplets: Vec<TripletComponents>,
    ) -> Result<Self> {
        if instruments.is_empty() || verbs.is_empty() || targets.is_empty() {
            return Err(Error::Vocabulary(
                "instrument, verb and target lists must be non-empty".into(),
            ));
        }
        for (kind, names) in [
            ("instrument", &instruments),
            ("verb", &verbs),
            ("target", &targets),
        ] {
            let mut seen = std::collections::HashSet::new();
            for n in names.iter() {
                if !seen.insert(n.as_str()) {
                    return Err(Error::Vocabulary(format!("duplicate {kind} name `{n}`")));
                }
            }
        }
        let mut lookup = HashMap::with_capacity(triplets.len());
        for (id, c) in triplets.iter().enumerate() {
            if c.instrument >= instruments.len()
                || c.verb >= verbs.len()
                || c.target >= targets.len()
            {
                return Err(Error::Vocabulary(format!(
                    "triplet {id} = ({}, {}, {}) references an unknown component",
                    c.instrument, c.verb, c.target
                )));
            }
            if lookup.insert(*c, id).is_some() {
                return Err(Error::Vocabulary(format!(
                    "triplet {id} = ({}, {}, {}) is duplicated",
                    c.instrument, c.verb, c.target
                )));
            }
        }
        Ok(Self {
            instruments,
            verbs,
            targets,
            triplets,
            lookup,
        })
    }

    /// A vocabulary with generated names of the given sizes. The dictionary is the
    /// first `num_triplets` tuples of the (instrument, verb, target) product in
    /// lexicographic order.
    pub fn with_sizes(
        instruments: usize,
        verbs: usize,
        targets: usize,
        num_triplets: usize,
    ) -> Result<Self> {
        let names = |prefix: &str, n: usize| (0..n).map(|k| format!("{prefix}{k}")).collect();
        let triplets = (0..instruments)
            .flat_map(|i| (0..verbs).flat_map(move |v| (0..targets).map(move |t| (i, v, t))))
            .take(num_triplets)
            .map(|(i, v, t)| TripletComponents::new(i, v, t))
            .collect::<Vec<_>>();
        if triplets.len() < num_triplets {
            return Err(Error::Vocabulary(format!(
                "cannot build {num_triplets} distinct triplets from {instruments}x{verbs}x{targets}"
            )));
        }
        Self::new(
            names("instrument_", instruments),
            names("verb_", verbs),
            names("target_", targets),
            triplets,
        )
    }

    pub fn instruments(&self) -> &[String] {
        &self.instruments
    }

    pub fn verbs(&self) -> &[String] {
        &self.verbs
    }

    pub fn targets(&self) -> &[String] {
        &self.targets
    }

    pub fn triplets(&self) -> &[TripletComponents] {
        &self.triplets
    }

    pub fn num_instruments(&self) -> usize {
        self.instruments.len()
    }

    pub fn num_verbs(&self) -> usize {
        self.verbs.len()
    }

    pub fn num_targets(&self) -> usize {
        self.targets.len()
    }

    pub fn num_triplets(&self) -> usize {
        self.triplets.len()
    }

    /// Index of the verb head's background class.
    pub fn background_verb(&self) -> usize {
        self.verbs.len()
    }

    pub fn triplet_components(&self, triplet_id: usize) -> Result<TripletComponents> {
        self.triplets
            .get(triplet_id)
            .copied()
            .ok_or(Error::Index {
                what: "triplet dictionary",
                index: triplet_id,
                len: self.triplets.len(),
            })
    }

    /// Inverse lookup. `None` is the "invalid" sentinel for tuples outside the dictionary.
    pub fn triplet_id(&self, components: TripletComponents) -> Option<usize> {
        self.lookup.get(&components).copied()
    }

    pub fn instrument_id(&self, name: &str) -> Result<usize> {
        position(&self.instruments, name, "instrument")
    }

    pub fn verb_id(&self, name: &str) -> Result<usize> {
        position(&self.verbs, name, "verb")
    }

    pub fn target_id(&self, name: &str) -> Result<usize> {
        position(&self.targets, name, "target")
    }

    /// Triplet ids whose instrument is `instrument`, in dictionary order.
    pub fn triplets_for_instrument(&self, instrument: usize) -> impl Iterator<Item = usize> + '_ {
        self.triplets
            .iter()
            .enumerate()
            .filter(move |(_, c)| c.instrument == instrument)
            .map(|(id, _)| id)
    }

    /// Stable content hash used to tie checkpoints to the vocabulary they were trained on.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("vocabulary serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

fn position(names: &[String], name: &str, kind: &str) -> Result<usize> {
    names
        .iter()
        .position(|n| n == name)
        .ok_or_else(|| Error::Vocabulary(format!("unknown {kind} class `{name}`")))
}
