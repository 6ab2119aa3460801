//! Relationship knowledge graph over the label space.
//!
//! The graph is a directed multigraph: each ordered class pair `(m, n)` carries
//! the set of predicates `p` for which `<m, p, n>` is an admissible tuple.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered class vocabulary split into seen and unseen partitions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSpace {
    classes: Vec<String>,
    seen_mask: Vec<bool>,
    seen: Vec<usize>,
    unseen: Vec<usize>,
    index: HashMap<String, usize>,
}

impl LabelSpace {
    pub fn new(classes: Vec<String>, seen_mask: Vec<bool>) -> Result<Self> {
        if classes.len() != seen_mask.len() {
            return Err(Error::Shape(format!(
                "{} classes but {} seen flags",
                classes.len(),
                seen_mask.len()
            )));
        }
        let mut index = HashMap::with_capacity(classes.len());
        for (i, name) in classes.iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate class name `{name}`")));
            }
        }
        let seen = (0..classes.len()).filter(|&i| seen_mask[i]).collect();
        let unseen = (0..classes.len()).filter(|&i| !seen_mask[i]).collect();
        Ok(Self {
            classes,
            seen_mask,
            seen,
            unseen,
            index,
        })
    }

    /// Every class seen; used when only a vocabulary is known.
    pub fn all_seen(classes: Vec<String>) -> Result<Self> {
        let n = classes.len();
        Self::new(classes, vec![true; n])
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn name(&self, class: usize) -> &str {
        &self.classes[class]
    }

    pub fn names(&self) -> &[String] {
        &self.classes
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownClass(name.to_string()))
    }

    pub fn is_seen(&self, class: usize) -> bool {
        self.seen_mask[class]
    }

    pub fn seen(&self) -> &[usize] {
        &self.seen
    }

    pub fn unseen(&self) -> &[usize] {
        &self.unseen
    }

    pub fn all(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    pub fn check(&self, class: usize) -> Result<()> {
        if class < self.len() {
            Ok(())
        } else {
            Err(Error::range("class", class, self.len()))
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let file = LabelsFile {
            classes: self
                .classes
                .iter()
                .zip(&self.seen_mask)
                .map(|(name, &seen)| LabelEntry {
                    name: name.clone(),
                    seen,
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: LabelsFile = serde_json::from_str(text)?;
        let (names, seen) = file.classes.into_iter().map(|e| (e.name, e.seen)).unzip();
        Self::new(names, seen)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelsFile {
    classes: Vec<LabelEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelEntry {
    name: String,
    seen: bool,
}

/// Ordered predicate vocabulary. Indices are fixed once constructed.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RelationSet {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl RelationSet {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(names.len());
        for (i, name) in names.iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate predicate `{name}`")));
            }
        }
        Ok(Self { names, index })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, k: usize) -> &str {
        &self.names[k]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownPredicate(name.to_string()))
    }
}

/// One row of a triple-count dump.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripleCount {
    pub subject: String,
    pub predicate: String,
    pub object: String,
    pub count: u64,
}

impl TripleCount {
    pub fn new(subject: &str, predicate: &str, object: &str, count: u64) -> Self {
        Self {
            subject: subject.to_string(),
            predicate: predicate.to_string(),
            object: object.to_string(),
            count,
        }
    }
}

/// Directed multigraph of admissible `<subject, predicate, object>` tuples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationGraph {
    n_classes: usize,
    relations: RelationSet,
    edges: BTreeMap<(usize, usize), Vec<usize>>,
    degree: Vec<usize>,
    n_edges: usize,
}

impl RelationGraph {
    /// Builds a graph from explicit `(subject, predicate, object)` index triples.
    /// Duplicates collapse into one edge.
    pub fn from_edges(
        n_classes: usize,
        relations: RelationSet,
        edges: impl IntoIterator<Item = (usize, usize, usize)>,
    ) -> Result<Self> {
        let mut sets: BTreeMap<(usize, usize), BTreeSet<usize>> = BTreeMap::new();
        for (s, p, o) in edges {
            if s >= n_classes {
                return Err(Error::range("class", s, n_classes));
            }
            if o >= n_classes {
                return Err(Error::range("class", o, n_classes));
            }
            if p >= relations.len() {
                return Err(Error::range("predicate", p, relations.len()));
            }
            sets.entry((s, o)).or_default().insert(p);
        }
        let mut degree = vec![0; n_classes];
        let mut n_edges = 0;
        let edges: BTreeMap<_, Vec<usize>> = sets
            .into_iter()
            .map(|((s, o), ps)| {
                let k = ps.len();
                n_edges += k;
                degree[s] += k;
                if o != s {
                    degree[o] += k;
                }
                ((s, o), ps.into_iter().collect())
            })
            .collect();
        Ok(Self {
            n_classes,
            relations,
            edges,
            degree,
            n_edges,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn relations(&self) -> &RelationSet {
        &self.relations
    }

    pub fn n_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn n_edges(&self) -> usize {
        self.n_edges
    }

    /// Iterates every edge as `(subject, predicate, object)` in a fixed order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.edges
            .iter()
            .flat_map(|(&(s, o), ps)| ps.iter().map(move |&p| (s, p, o)))
    }

    fn check_class(&self, c: usize) -> Result<()> {
        if c < self.n_classes {
            Ok(())
        } else {
            Err(Error::range("class", c, self.n_classes))
        }
    }

    pub fn has_relation(&self, subject: usize, predicate: usize, object: usize) -> Result<bool> {
        self.check_class(subject)?;
        self.check_class(object)?;
        if predicate >= self.relations.len() {
            return Err(Error::range("predicate", predicate, self.relations.len()));
        }
        Ok(self
            .edges
            .get(&(subject, object))
            .is_some_and(|ps| ps.binary_search(&predicate).is_ok()))
    }

    /// Predicate indices admitted for the ordered pair, ascending.
    pub fn relations_between(&self, subject: usize, object: usize) -> Result<&[usize]> {
        self.check_class(subject)?;
        self.check_class(object)?;
        Ok(self.between(subject, object))
    }

    /// Unchecked variant of [`relations_between`](Self::relations_between) for hot loops.
    pub(crate) fn between(&self, subject: usize, object: usize) -> &[usize] {
        self.edges
            .get(&(subject, object))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Number of edges in which `class` is subject or object; a self-loop counts once.
    pub fn class_degree(&self, class: usize) -> Result<usize> {
        self.check_class(class)?;
        Ok(self.degree[class])
    }

    pub fn to_json(&self, labels: &LabelSpace) -> Result<String> {
        if labels.len() != self.n_classes {
            return Err(Error::Shape(format!(
                "label space has {} classes, graph has {}",
                labels.len(),
                self.n_classes
            )));
        }
        let file = GraphFile {
            relations: self.relations.names().to_vec(),
            edges: self
                .edges()
                .map(|(s, p, o)| EdgeEntry {
                    s: labels.name(s).to_string(),
                    p: self.relations.name(p).to_string(),
                    o: labels.name(o).to_string(),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)? + "\n")
    }

    pub fn from_json(text: &str, labels: &LabelSpace) -> Result<Self> {
        let file: GraphFile = serde_json::from_str(text)?;
        let relations = RelationSet::new(file.relations)?;
        let mut edges = Vec::with_capacity(file.edges.len());
        for e in &file.edges {
            edges.push((
                labels.index_of(&e.s)?,
                relations.index_of(&e.p)?,
                labels.index_of(&e.o)?,
            ));
        }
        Self::from_edges(labels.len(), relations, edges)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphFile {
    relations: Vec<String>,
    edges: Vec<EdgeEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeEntry {
    s: String,
    p: String,
    o: String,
}

/// Builds the knowledge graph from raw triple counts.
///
/// Counts of repeated triples are summed first. The relation set keeps the
/// `top_relations` predicates with the largest total count (ties broken by
/// name) and an edge survives iff its summed count is strictly greater than
/// `min_count` and its predicate is in the relation set.
pub fn build_graph(
    triples: &[TripleCount],
    labels: &LabelSpace,
    min_count: u64,
    top_relations: usize,
) -> Result<RelationGraph> {
    if top_relations == 0 {
        return Err(Error::Config("top_relations must be at least 1".into()));
    }
    let mut counts: BTreeMap<(usize, &str, usize), u64> = BTreeMap::new();
    let mut totals: BTreeMap<&str, u64> = BTreeMap::new();
    for t in triples {
        let s = labels.index_of(&t.subject)?;
        let o = labels.index_of(&t.object)?;
        *counts.entry((s, t.predicate.as_str(), o)).or_default() += t.count;
        *totals.entry(t.predicate.as_str()).or_default() += t.count;
    }

    let mut ranked: Vec<(&str, u64)> = totals.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(top_relations);
    let relations = RelationSet::new(ranked.iter().map(|(p, _)| p.to_string()).collect())?;

    let edges = counts
        .into_iter()
        .filter(|&(_, count)| count > min_count)
        .filter_map(|((s, p, o), _)| relations.index_of(p).ok().map(|k| (s, k, o)))
        .collect::<Vec<_>>();
    RelationGraph::from_edges(labels.len(), relations, edges)
}

/// Parses a `subject,predicate,object,count` CSV dump.
pub fn read_triples_csv<R: Read>(reader: R) -> Result<Vec<TripleCount>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    for column in ["subject", "predicate", "object", "count"] {
        if !headers.iter().any(|h| h == column) {
            return Err(Error::format("triples", format!("missing column `{column}`")));
        }
    }
    if headers.len() != 4 {
        return Err(Error::format(
            "triples",
            format!("expected 4 columns, found {}", headers.len()),
        ));
    }
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

pub fn write_triples_csv(triples: &[TripleCount]) -> Result<String> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    for t in triples {
        wtr.serialize(t)?;
    }
    let bytes = wtr.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Invalid(e.to_string()))
}
