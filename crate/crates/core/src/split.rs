//! Task-split construction from object tags and question embeddings.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Sample, TaskDataset, TaskSequence};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectSplitMode {
    /// Groups are random partitions of the object vocabulary.
    Diverse,
    /// Groups are semantic super-categories.
    Taxonomy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectGroup {
    pub name: String,
    pub tags: BTreeSet<String>,
}

#[derive(Clone, Debug)]
pub struct ObjectSplit {
    pub mode: ObjectSplitMode,
    pub tasks: Vec<(String, Vec<Sample>)>,
    /// Samples whose tags hit two or more groups.
    pub discarded_ambiguous: usize,
    /// Samples whose tags hit no group.
    pub discarded_untagged: usize,
}

/// Randomly partitions `objects` into `count` groups of near-equal size.
pub fn random_object_groups(objects: &[String], count: usize, seed: u64) -> Vec<ObjectGroup> {
    let mut shuffled = objects.to_vec();
    shuffled.sort();
    shuffled.dedup();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut groups: Vec<ObjectGroup> = (0..count)
        .map(|g| ObjectGroup {
            name: format!("group{}", g + 1),
            tags: BTreeSet::new(),
        })
        .collect();
    for (i, o) in shuffled.into_iter().enumerate() {
        groups[i % count].tags.insert(o);
    }
    groups
}

/// Assigns each sample to the single group its object tags intersect.
/// Samples touching several groups, or none, are discarded and counted.
pub fn build_object_split(
    samples: &[Sample],
    groups: &[ObjectGroup],
    mode: ObjectSplitMode,
) -> Result<ObjectSplit> {
    let mut owner: HashMap<&str, usize> = HashMap::new();
    for (g, group) in groups.iter().enumerate() {
        for tag in &group.tags {
            if let Some(prev) = owner.insert(tag, g) {
                return Err(Error::Split(format!(
                    "tag `{tag}` belongs to both {} and {}",
                    groups[prev].name, group.name
                )));
            }
        }
    }
    let mut buckets: Vec<Vec<Sample>> = vec![Vec::new(); groups.len()];
    let (mut ambiguous, mut untagged) = (0, 0);
    for s in samples {
        let hits: BTreeSet<usize> = s
            .object_tags
            .iter()
            .filter_map(|t| owner.get(t.as_str()).copied())
            .collect();
        match hits.len() {
            0 => untagged += 1,
            1 => buckets[*hits.first().unwrap()].push(s.clone()),
            _ => ambiguous += 1,
        }
    }
    if let Some(g) = buckets.iter().position(Vec::is_empty) {
        return Err(Error::Split(format!("group {} received no samples", groups[g].name)));
    }
    Ok(ObjectSplit {
        mode,
        tasks: groups.iter().map(|g| g.name.clone()).zip(buckets).collect(),
        discarded_ambiguous: ambiguous,
        discarded_untagged: untagged,
    })
}

impl ObjectSplit {
    pub fn retained(&self) -> usize {
        self.tasks.iter().map(|(_, s)| s.len()).sum()
    }

    /// Shuffles each task and cuts it into train/val/test by fraction.
    pub fn into_sequence(self, val_frac: f64, test_frac: f64, seed: u64) -> Result<TaskSequence> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tasks = self
            .tasks
            .into_iter()
            .map(|(name, mut samples)| {
                samples.shuffle(&mut rng);
                let n = samples.len();
                let n_val = (n as f64 * val_frac).round() as usize;
                let n_test = (n as f64 * test_frac).round() as usize;
                let test = samples.split_off(n.saturating_sub(n_test));
                let val = samples.split_off(samples.len().saturating_sub(n_val));
                TaskDataset::new(name, samples, val, test)
            })
            .collect::<Result<Vec<_>>>()?;
        TaskSequence::new(tasks)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionSplitParams {
    pub min_cluster: usize,
    pub min_sim: f64,
    pub knn_k: usize,
    pub knn_threshold: f64,
}

impl Default for QuestionSplitParams {
    fn default() -> Self {
        QuestionSplitParams {
            min_cluster: 15,
            min_sim: 0.8,
            knn_k: 5,
            knn_threshold: 0.8,
        }
    }
}

pub const IRRELEVANT: &str = "irrelevant";

#[derive(Clone, Debug, PartialEq)]
pub struct QuestionSplit {
    /// Every question's label; unmatched questions get [`IRRELEVANT`].
    pub labels: BTreeMap<String, String>,
    /// Member ids per cluster, center first.
    pub clusters: Vec<Vec<String>>,
}

impl QuestionSplit {
    /// Labeled questions, excluding irrelevant ones.
    pub fn retained(&self) -> BTreeMap<&str, &str> {
        self.labels
            .iter()
            .filter(|(_, l)| l.as_str() != IRRELEVANT)
            .map(|(q, l)| (q.as_str(), l.as_str()))
            .collect()
    }
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Majority label; ties prefer the larger summed similarity, then the smaller label.
fn vote<'a>(ballots: impl IntoIterator<Item = (&'a str, f64)>) -> Option<&'a str> {
    let mut tally: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for (label, sim) in ballots {
        let e = tally.entry(label).or_default();
        e.0 += 1;
        e.1 += sim;
    }
    let mut best: Option<(&str, (usize, f64))> = None;
    for (label, score) in tally {
        let better = match best {
            None => true,
            Some((_, b)) => score.0 > b.0 || (score.0 == b.0 && score.1 > b.1),
        };
        if better {
            best = Some((label, score));
        }
    }
    best.map(|(l, _)| l)
}

/// Greedy clustering: candidates in descending neighborhood size claim their
/// unassigned neighbors (cosine >= `min_sim`); groups smaller than
/// `min_cluster` are dropped. Returns member indices, center first.
pub fn fast_cluster(unit: &[Vec<f64>], min_cluster: usize, min_sim: f64) -> Vec<Vec<usize>> {
    let n = unit.len();
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| dot(&unit[i], &unit[j]) >= min_sim).collect())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| neighbors[b].len().cmp(&neighbors[a].len()).then(a.cmp(&b)));
    let mut assigned = vec![false; n];
    let mut clusters = Vec::new();
    for &c in &order {
        if assigned[c] || neighbors[c].len() < min_cluster {
            continue;
        }
        let mut members = vec![c];
        members.extend(neighbors[c].iter().copied().filter(|&j| j != c && !assigned[j]));
        if members.len() >= min_cluster {
            members.iter().for_each(|&m| assigned[m] = true);
            clusters.push(members);
        }
    }
    clusters
}

pub fn build_question_split(
    questions: &[(String, Vec<f64>)],
    seed_labels: &BTreeMap<String, String>,
    params: QuestionSplitParams,
) -> Result<QuestionSplit> {
    if seed_labels.is_empty() {
        return Err(Error::Split("no seed labels given".into()));
    }
    let dim = questions.first().map_or(0, |q| q.1.len());
    if let Some((id, v)) = questions.iter().find(|(_, v)| v.len() != dim) {
        return Err(Error::Embedding(format!(
            "question {id} has dimension {}, expected {dim}",
            v.len()
        )));
    }
    let index: HashMap<&str, usize> = questions
        .iter()
        .enumerate()
        .map(|(i, (id, _))| (id.as_str(), i))
        .collect();
    let seeds: Vec<(usize, &str)> = seed_labels
        .iter()
        .map(|(id, label)| {
            index
                .get(id.as_str())
                .map(|&i| (i, label.as_str()))
                .ok_or_else(|| Error::Split(format!("seed {id} is not among the questions")))
        })
        .collect::<Result<_>>()?;
    let unit: Vec<Vec<f64>> = questions.iter().map(|(_, v)| normalized(v)).collect();

    let mut label: Vec<Option<String>> = vec![None; questions.len()];
    for &(i, l) in &seeds {
        label[i] = Some(l.to_string());
    }

    let clusters = fast_cluster(&unit, params.min_cluster, params.min_sim);
    for members in &clusters {
        let cluster_label = vote(
            members
                .iter()
                .filter_map(|&m| seed_labels.get(&questions[m].0).map(|l| (l.as_str(), 1.0))),
        )
        .map(str::to_string);
        if let Some(l) = cluster_label {
            for &m in members {
                label[m].get_or_insert_with(|| l.clone());
            }
        }
    }

    for i in 0..questions.len() {
        if label[i].is_some() {
            continue;
        }
        let mut sims: Vec<(f64, usize, &str)> = seeds
            .iter()
            .map(|&(s, l)| (dot(&unit[i], &unit[s]), s, l))
            .collect();
        sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let assigned = if sims[0].0 >= params.knn_threshold {
            vote(sims.iter().take(params.knn_k.max(1)).map(|&(s, _, l)| (l, s)))
                .unwrap_or(IRRELEVANT)
        } else {
            IRRELEVANT
        };
        label[i] = Some(assigned.to_string());
    }

    Ok(QuestionSplit {
        labels: questions
            .iter()
            .zip(label)
            .map(|((id, _), l)| (id.clone(), l.unwrap_or_else(|| IRRELEVANT.to_string())))
            .collect(),
        clusters: clusters
            .into_iter()
            .map(|m| m.into_iter().map(|i| questions[i].0.clone()).collect())
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tagged(id: &str, tags: &[&str]) -> Sample {
        Sample {
            id: id.into(),
            image_features: vec![0.0],
            question_features: vec![],
            soft_targets: [("yes".to_string(), 1.0)].into(),
            object_tags: tags.iter().map(|t| t.to_string()).collect(),
            question_text: None,
        }
    }

    fn groups() -> Vec<ObjectGroup> {
        let g = |name: &str, tags: &[&str]| ObjectGroup {
            name: name.into(),
            tags: tags.iter().map(|t| t.to_string()).collect(),
        };
        vec![
            g("group1", &["bird", "car", "keyboard"]),
            g("group2", &["bed", "dog", "pizza"]),
        ]
    }

    #[test]
    fn assigns_unique_group_and_discards_others() {
        let samples = vec![
            tagged("a", &["bird"]),
            tagged("b", &["bird", "bed"]),
            tagged("c", &["tree"]),
            tagged("d", &["dog", "tree"]),
            tagged("e", &["car", "keyboard"]),
        ];
        let split = build_object_split(&samples, &groups(), ObjectSplitMode::Taxonomy).unwrap();
        let ids: Vec<Vec<&str>> = split
            .tasks
            .iter()
            .map(|(_, s)| s.iter().map(|x| x.id.as_str()).collect())
            .collect();
        assert_eq!(ids, vec![vec!["a", "e"], vec!["d"]]);
        assert_eq!(split.discarded_ambiguous, 1);
        assert_eq!(split.discarded_untagged, 1);
        assert_eq!(split.retained() + 2, samples.len());
    }

    #[test]
    fn overlapping_groups_are_rejected() {
        let mut g = groups();
        g[1].tags.insert("bird".into());
        assert!(build_object_split(&[], &g, ObjectSplitMode::Diverse).is_err());
    }

    #[test]
    fn empty_group_is_a_split_error() {
        let samples = vec![tagged("a", &["bird"])];
        assert!(matches!(
            build_object_split(&samples, &groups(), ObjectSplitMode::Diverse),
            Err(Error::Split(_))
        ));
    }

    #[test]
    fn random_groups_partition_objects() {
        let objects: Vec<String> = (0..10).map(|i| format!("o{i}")).collect();
        let g = random_object_groups(&objects, 3, 5);
        let all: BTreeSet<String> = g.iter().flat_map(|x| x.tags.iter().cloned()).collect();
        assert_eq!(all.len(), 10);
        assert_eq!(g.iter().map(|x| x.tags.len()).sum::<usize>(), 10);
        assert_eq!(g, random_object_groups(&objects, 3, 5));
    }

    #[test]
    fn identical_questions_inherit_seed_label() {
        let qs: Vec<(String, Vec<f64>)> = (0..20).map(|i| (format!("q{i}"), vec![1.0, 2.0])).collect();
        let seeds = [("q0".to_string(), "scene".to_string())].into();
        let split = build_question_split(&qs, &seeds, QuestionSplitParams::default()).unwrap();
        assert!(split.labels.values().all(|l| l == "scene"));
        assert_eq!(split.clusters.len(), 1);
    }

    #[test]
    fn dissimilar_question_is_irrelevant() {
        let qs = vec![
            ("s".to_string(), vec![1.0, 0.0]),
            ("far".to_string(), vec![0.5, (1.0f64 - 0.25).sqrt()]),
        ];
        let seeds = [("s".to_string(), "action".to_string())].into();
        let split = build_question_split(&qs, &seeds, QuestionSplitParams::default()).unwrap();
        assert_eq!(split.labels["far"], IRRELEVANT);
        assert_eq!(split.retained().len(), 1);
    }

    #[test]
    fn dimension_mismatch_is_embedding_error() {
        let qs = vec![("a".to_string(), vec![1.0]), ("b".to_string(), vec![1.0, 0.0])];
        let seeds = [("a".to_string(), "x".to_string())].into();
        assert!(matches!(
            build_question_split(&qs, &seeds, QuestionSplitParams::default()),
            Err(Error::Embedding(_))
        ));
    }

    #[test]
    fn knn_matches_brute_force_enumeration() {
        // Three hand-placed seeds on the unit circle and a handful of queries.
        let angle = |deg: f64| vec![deg.to_radians().cos(), deg.to_radians().sin()];
        let seeds_at = [(0.0, "color"), (20.0, "count"), (35.0, "count")];
        let queries = [5.0, 12.0, 28.0, 50.0, 90.0, -15.0];
        let mut qs: Vec<(String, Vec<f64>)> = seeds_at
            .iter()
            .enumerate()
            .map(|(i, (d, _))| (format!("s{i}"), angle(*d)))
            .collect();
        qs.extend(queries.iter().enumerate().map(|(i, d)| (format!("q{i}"), angle(*d))));
        let seeds: BTreeMap<String, String> = seeds_at
            .iter()
            .enumerate()
            .map(|(i, (_, l))| (format!("s{i}"), l.to_string()))
            .collect();
        for k in [1, 3] {
            let params = QuestionSplitParams {
                min_cluster: 100,
                knn_k: k,
                knn_threshold: 0.9,
                ..Default::default()
            };
            let split = build_question_split(&qs, &seeds, params).unwrap();
            for (i, &qd) in queries.iter().enumerate() {
                // Oracle: rank seeds by angular gap, majority of the k closest.
                let mut gaps: Vec<(f64, &str)> = seeds_at
                    .iter()
                    .map(|(d, l)| ((qd - d).to_radians().cos(), *l))
                    .collect();
                gaps.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
                let expected = if gaps[0].0 < 0.9 {
                    IRRELEVANT.to_string()
                } else {
                    let top = &gaps[..k];
                    let counts = |l: &str| top.iter().filter(|g| g.1 == l).count();
                    if counts("count") > counts("color") { "count" } else { "color" }.to_string()
                };
                assert_eq!(split.labels[&format!("q{i}")], expected, "query {qd} k={k}");
            }
        }
    }
}
