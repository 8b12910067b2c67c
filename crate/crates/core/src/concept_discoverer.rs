//! Latent concept discovery: Ward agglomerative clustering of one layer's
//! representations, cut into `K` flat concepts.
//!
//! Clustering runs the nearest-neighbor chain algorithm over a condensed
//! matrix of Ward merge costs, updated with the Lance–Williams recurrence.
//! Costs are expressed as the increase in total within-cluster sum of squares,
//! so summing merge costs reproduces the final sum of squares exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LacoatError, Result};
use crate::repr_store::{RepresentationBundle, TokenRecord};

/// Increase in total within-cluster sum of squares caused by merging two clusters.
pub fn ward_distance(size_a: usize, centroid_a: &[f64], size_b: usize, centroid_b: &[f64]) -> Result<f64> {
    if centroid_a.len() != centroid_b.len() {
        return Err(LacoatError::DimMismatch {
            expected: centroid_a.len(),
            got: centroid_b.len(),
        });
    }
    if size_a == 0 || size_b == 0 {
        return Err(LacoatError::invalid("cluster sizes must be at least 1"));
    }
    let (na, nb) = (size_a as f64, size_b as f64);
    Ok(na * nb / (na + nb) * squared_euclidean(centroid_a, centroid_b))
}

fn squared_euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub cluster_a: usize,
    pub cluster_b: usize,
    pub cost: f64,
    pub size: usize,
}

/// Merge tree in the usual stepwise convention: points are clusters `0..n`,
/// the cluster created by step `s` gets id `n + s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    num_points: usize,
    merges: Vec<Merge>,
}

impl Dendrogram {
    pub fn num_points(&self) -> usize {
        self.num_points
    }

    pub fn merges(&self) -> &[Merge] {
        &self.merges
    }

    /// Flat clusters left after undoing the last `k - 1` merges. Clusters are
    /// ordered by their smallest member, members ascending.
    pub fn cut(&self, k: usize) -> Result<Vec<Vec<usize>>> {
        let n = self.num_points;
        if k == 0 || k > n {
            return Err(LacoatError::invalid(format!("K = {k} outside 1..={n}")));
        }
        let mut parent: Vec<usize> = (0..2 * n).collect();
        for (step, m) in self.merges.iter().take(n - k).enumerate() {
            parent[m.cluster_a] = n + step;
            parent[m.cluster_b] = n + step;
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for point in 0..n {
            let mut root = point;
            while parent[root] != root {
                root = parent[root];
            }
            groups.entry(root).or_default().push(point);
        }
        let mut clusters: Vec<Vec<usize>> = groups.into_values().collect();
        clusters.sort_by_key(|c| c[0]);
        Ok(clusters)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptSet {
    pub layer: usize,
    pub k: usize,
    #[serde(with = "concept_map")]
    pub concepts: Vec<Vec<usize>>,
}

mod concept_map {
    use std::collections::BTreeMap;

    use serde::de::Error;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(concepts: &[Vec<usize>], s: S) -> Result<S::Ok, S::Error> {
        concepts
            .iter()
            .enumerate()
            .map(|(i, c)| (i.to_string(), c))
            .collect::<BTreeMap<_, _>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<usize>>, D::Error> {
        let raw: BTreeMap<String, Vec<usize>> = BTreeMap::deserialize(d)?;
        let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (key, members) in raw {
            let id = key.parse().map_err(D::Error::custom)?;
            by_id.insert(id, members);
        }
        if by_id.keys().enumerate().any(|(i, &id)| i != id) {
            return Err(D::Error::custom("concept ids must be contiguous from 0"));
        }
        Ok(by_id.into_values().collect())
    }
}

impl ConceptSet {
    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn members(&self, id: usize) -> Result<&[usize]> {
        self.concepts
            .get(id)
            .map(Vec::as_slice)
            .ok_or(LacoatError::UnknownConcept(id))
    }

    /// Concept id of every clustered record.
    pub fn assignment(&self) -> Vec<usize> {
        let n = self.concepts.iter().map(Vec::len).sum();
        let mut out = vec![usize::MAX; n];
        for (id, members) in self.concepts.iter().enumerate() {
            for &m in members {
                out[m] = id;
            }
        }
        out
    }

    /// Checks the concepts partition `0..num_records` with no empty concept.
    pub fn validate(&self, num_records: usize) -> Result<()> {
        if self.k != self.concepts.len() {
            return Err(LacoatError::invalid(format!(
                "concept set declares K = {} but holds {} concepts",
                self.k,
                self.concepts.len()
            )));
        }
        let mut seen = vec![false; num_records];
        for (id, members) in self.concepts.iter().enumerate() {
            if members.is_empty() {
                return Err(LacoatError::invalid(format!("concept {id} is empty")));
            }
            for &m in members {
                if m >= num_records || std::mem::replace(&mut seen[m], true) {
                    return Err(LacoatError::invalid(format!(
                        "concept {id}: record {m} out of range or assigned twice"
                    )));
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(LacoatError::invalid("concepts do not cover every record"));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| LacoatError::json("concept set", e))?;
        fs::write(path, text).map_err(|e| LacoatError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LacoatError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| LacoatError::json(path.display().to_string(), e))
    }
}

/// Runs Ward clustering on `rows` and cuts the tree into `k` concepts.
pub fn cluster(rows: &[Vec<f64>], k: usize) -> Result<(Dendrogram, Vec<Vec<usize>>)> {
    let n = rows.len();
    if n == 0 {
        return Err(LacoatError::invalid("cannot cluster zero points"));
    }
    if k == 0 || k > n {
        return Err(LacoatError::invalid(format!("K = {k} outside 1..={n}")));
    }
    let dim = rows[0].len();
    if let Some(r) = rows.iter().find(|r| r.len() != dim) {
        return Err(LacoatError::DimMismatch {
            expected: dim,
            got: r.len(),
        });
    }
    let dendrogram = ward_linkage(rows);
    let concepts = dendrogram.cut(k)?;
    Ok((dendrogram, concepts))
}

/// Clusters one layer of a bundle.
pub fn discover_concepts(bundle: &RepresentationBundle, layer: usize, k: usize) -> Result<(Dendrogram, ConceptSet)> {
    bundle.check_layer(layer)?;
    let (dendrogram, concepts) = cluster(&bundle.layer_rows(layer), k)?;
    Ok((dendrogram, ConceptSet { layer, k, concepts }))
}

struct Condensed {
    n: usize,
    values: Vec<f64>,
}

impl Condensed {
    fn index(&self, i: usize, j: usize) -> usize {
        let (i, j) = if i < j { (i, j) } else { (j, i) };
        i * self.n - i * (i + 1) / 2 + (j - i - 1)
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        self.values[self.index(i, j)]
    }

    fn set(&mut self, i: usize, j: usize, v: f64) {
        let idx = self.index(i, j);
        self.values[idx] = v;
    }
}

fn ward_linkage(rows: &[Vec<f64>]) -> Dendrogram {
    let n = rows.len();
    let mut dist = Condensed {
        n,
        values: Vec::with_capacity(n * n.saturating_sub(1) / 2),
    };
    for i in 0..n {
        for j in i + 1..n {
            dist.values.push(0.5 * squared_euclidean(&rows[i], &rows[j]));
        }
    }

    let mut active = vec![true; n];
    let mut size = vec![1usize; n];
    let mut chain: Vec<usize> = Vec::with_capacity(n);
    // (slot a, slot b, cost) in the order the chain produced them
    let mut raw: Vec<(usize, usize, f64)> = Vec::with_capacity(n.saturating_sub(1));

    while raw.len() + 1 < n {
        if chain.is_empty() {
            chain.push(active.iter().position(|&a| a).expect("an active cluster"));
        }
        let (a, b, cost) = loop {
            let a = *chain.last().unwrap();
            let prev = chain.len().checked_sub(2).map(|i| chain[i]);
            // The previous chain element wins ties so the chain cannot cycle.
            let (mut best, mut best_d) = match prev {
                Some(p) => (p, dist.get(a, p)),
                None => (usize::MAX, f64::INFINITY),
            };
            for (c, _) in active.iter().enumerate().filter(|&(c, &live)| live && c != a) {
                let d = dist.get(a, c);
                if d < best_d {
                    best = c;
                    best_d = d;
                }
            }
            if Some(best) == prev {
                chain.truncate(chain.len() - 2);
                break (a, best, best_d);
            }
            chain.push(best);
        };

        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let (na, nb) = (size[lo] as f64, size[hi] as f64);
        for k in 0..n {
            if !active[k] || k == lo || k == hi {
                continue;
            }
            let nk = size[k] as f64;
            let updated = ((na + nk) * dist.get(k, lo) + (nb + nk) * dist.get(k, hi) - nk * cost) / (na + nb + nk);
            dist.set(k, lo, updated);
        }
        active[hi] = false;
        size[lo] += size[hi];
        raw.push((lo, hi, cost.max(0.0)));
    }

    // Order merges by cost. A merge never sorts ahead of the merges that built its
    // operands, even if rounding made its cost marginally smaller.
    let mut slot_key = vec![f64::NEG_INFINITY; n];
    let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(raw.len());
    for (t, &(lo, hi, cost)) in raw.iter().enumerate() {
        let key = cost.max(slot_key[lo]).max(slot_key[hi]);
        slot_key[lo] = key;
        keyed.push((key, t));
    }
    keyed.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));

    // Relabel slots to stepwise cluster ids.
    let mut label: Vec<usize> = (0..n).collect();
    let mut cluster_size = vec![1usize; n];
    let merges = keyed
        .into_iter()
        .enumerate()
        .map(|(step, (_, t))| {
            let (lo, hi, cost) = raw[t];
            let (ia, ib) = (label[lo], label[hi]);
            let merged = cluster_size[lo] + cluster_size[hi];
            label[lo] = n + step;
            cluster_size[lo] = merged;
            Merge {
                cluster_a: ia.min(ib),
                cluster_b: ia.max(ib),
                cost,
                size: merged,
            }
        })
        .collect();
    Dendrogram { num_points: n, merges }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptMember<'a> {
    pub index: usize,
    pub record: &'a TokenRecord,
}

impl ConceptMember<'_> {
    pub fn is_classifier_token(&self) -> bool {
        self.record.is_classifier_token
    }
}

/// Records of one concept, ordered by record index.
pub fn concept_members<'a>(
    concepts: &ConceptSet,
    id: usize,
    bundle: &'a RepresentationBundle,
) -> Result<Vec<ConceptMember<'a>>> {
    let mut indices = concepts.members(id)?.to_vec();
    indices.sort_unstable();
    indices
        .into_iter()
        .map(|index| {
            if index >= bundle.len() {
                return Err(LacoatError::invalid(format!(
                    "concept {id} references record {index}, bundle has {}",
                    bundle.len()
                )));
            }
            Ok(ConceptMember {
                index,
                record: bundle.record(index),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::repr_store::CLASSIFIER_TOKEN_TEXT;

    #[test]
    fn identical_singletons_cost_nothing() {
        assert_eq!(ward_distance(1, &[1.0, 2.0], 1, &[1.0, 2.0]).unwrap(), 0.0);
    }

    #[test]
    fn unit_singletons() {
        assert_eq!(ward_distance(1, &[0.0, 0.0], 1, &[2.0, 0.0]).unwrap(), 2.0);
    }

    #[test]
    fn ward_distance_rejects_dim_mismatch() {
        assert!(ward_distance(1, &[0.0], 1, &[0.0, 1.0]).is_err());
    }

    #[test]
    fn k_equal_n_keeps_singletons() {
        let rows: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64 * 1.7, (i * i) as f64]).collect();
        let (d, concepts) = cluster(&rows, 6).unwrap();
        assert_eq!(d.merges().len(), 5);
        assert_eq!(concepts, (0..6).map(|i| vec![i]).collect::<Vec<_>>());
    }

    #[test]
    fn k_one_is_everything() {
        let rows: Vec<Vec<f64>> = (0..5).map(|i| vec![(i as f64).sin()]).collect();
        let (_, concepts) = cluster(&rows, 1).unwrap();
        assert_eq!(concepts, vec![vec![0, 1, 2, 3, 4]]);
    }

    #[test]
    fn k_out_of_range() {
        let rows = vec![vec![0.0], vec![1.0]];
        assert!(cluster(&rows, 0).is_err());
        assert!(cluster(&rows, 3).is_err());
        assert!(cluster(&[], 1).is_err());
    }

    #[test]
    fn two_obvious_groups() {
        let rows = vec![vec![0.0], vec![0.1], vec![10.0], vec![10.2], vec![0.05]];
        let (d, concepts) = cluster(&rows, 2).unwrap();
        assert_eq!(concepts, vec![vec![0, 1, 4], vec![2, 3]]);
        assert_eq!(d.merges().last().unwrap().size, 5);
    }

    #[test]
    fn concept_json_round_trip() {
        let set = ConceptSet {
            layer: 2,
            k: 2,
            concepts: vec![vec![0, 2], vec![1]],
        };
        let text = serde_json::to_string(&set).unwrap();
        assert!(text.contains("\"0\":[0,2]"));
        let back: ConceptSet = serde_json::from_str(&text).unwrap();
        assert_eq!(back, set);
        set.validate(3).unwrap();
        assert!(set.validate(4).is_err());
    }

    fn record(text: &str, sentence: u64, classifier: bool) -> TokenRecord {
        TokenRecord {
            token_text: text.into(),
            sentence_id: sentence,
            position: if classifier { 0 } else { 1 },
            is_classifier_token: classifier,
            sentence_class_label: None,
            token_class_label: None,
        }
    }

    #[test]
    fn members_sorted_and_flagged() {
        let records = vec![
            record("good", 0, false),
            record(CLASSIFIER_TOKEN_TEXT, 0, true),
            record(CLASSIFIER_TOKEN_TEXT, 1, true),
        ];
        let bundle = RepresentationBundle::new(records, 1, vec![vec![0.0, 1.0, 2.0]]).unwrap();
        let set = ConceptSet {
            layer: 0,
            k: 2,
            concepts: vec![vec![2, 0], vec![1]],
        };
        let members = concept_members(&set, 0, &bundle).unwrap();
        assert_eq!(members.iter().map(|m| m.index).collect::<Vec<_>>(), vec![0, 2]);
        assert!(!members[0].is_classifier_token());
        assert!(members[1].is_classifier_token());
        let single = concept_members(&set, 1, &bundle).unwrap();
        assert_eq!(single.len(), 1);
        assert!(matches!(
            concept_members(&set, 7, &bundle),
            Err(LacoatError::UnknownConcept(7))
        ));
    }

    #[test]
    fn twenty_member_concept_in_index_order() {
        let records: Vec<_> = (0..20).map(|i| record("w", i, false)).collect();
        let bundle = RepresentationBundle::new(records, 1, vec![vec![0.0; 20]]).unwrap();
        let set = ConceptSet {
            layer: 0,
            k: 1,
            concepts: vec![(0..20).rev().collect()],
        };
        let members = concept_members(&set, 0, &bundle).unwrap();
        assert_eq!(members.iter().map(|m| m.index).collect::<Vec<_>>(), (0..20).collect::<Vec<_>>());
    }
}
