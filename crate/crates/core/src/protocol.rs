//! Session protocol: splits a labeled dataset into a base session followed
//! by N-way K-shot incremental sessions with disjoint label spaces, and
//! exposes cumulative test sets.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LabeledSample};
use crate::error::{Error, Result};
use crate::rng::rng_for;

/// Training shots per class in a session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shots {
    /// Every available training sample (the base session).
    All,
    Exactly(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionSpec {
    pub session_index: usize,
    /// Ascending global class ids.
    pub class_ids: Vec<u32>,
    pub shots_per_class: Shots,
    pub ways: usize,
}

/// How classes are dealt out to sessions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassOrder {
    /// Ascending label id, base session takes the first block.
    #[default]
    Sorted,
    /// Seed-shuffled class order.
    Shuffled,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamParams {
    pub base_classes: usize,
    pub ways: usize,
    pub shots: usize,
    pub n_sessions: usize,
    #[serde(default)]
    pub class_order: ClassOrder,
}

#[derive(Debug, Clone)]
pub struct TaskStream {
    sessions: Vec<SessionSpec>,
    train_sets: Vec<Vec<Arc<LabeledSample>>>,
    /// Test samples of each session's own classes; cumulative views are
    /// assembled on demand.
    session_tests: Vec<Vec<Arc<LabeledSample>>>,
}

impl TaskStream {
    pub fn sessions(&self) -> &[SessionSpec] {
        &self.sessions
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    pub fn train_set(&self, t: usize) -> Result<&[Arc<LabeledSample>]> {
        self.train_sets
            .get(t)
            .map(Vec::as_slice)
            .ok_or(Error::SessionOutOfRange {
                index: t,
                len: self.len(),
            })
    }

    /// Test samples of every class introduced in sessions `0..=t`.
    pub fn cumulative_test_set(&self, t: usize) -> Result<Vec<Arc<LabeledSample>>> {
        if t >= self.len() {
            return Err(Error::SessionOutOfRange {
                index: t,
                len: self.len(),
            });
        }
        Ok(self.session_tests[..=t].iter().flatten().cloned().collect())
    }

    /// Class ids of sessions `0..=t`, ascending.
    pub fn seen_classes(&self, t: usize) -> Vec<u32> {
        let set: BTreeSet<u32> = self
            .sessions
            .iter()
            .take(t + 1)
            .flat_map(|s| s.class_ids.iter().copied())
            .collect();
        set.into_iter().collect()
    }

    pub fn base_classes(&self) -> &[u32] {
        &self.sessions[0].class_ids
    }

    /// The realized split, sufficient to rebuild this exact stream.
    pub fn realized_split(&self, seed: u64) -> RealizedSplit {
        RealizedSplit {
            seed,
            sessions: self
                .sessions
                .iter()
                .enumerate()
                .map(|(t, spec)| SplitSession {
                    spec: spec.clone(),
                    train_sample_ids: self.train_sets[t].iter().map(|s| s.sample_id.clone()).collect(),
                    test_sample_ids: self.session_tests[t].iter().map(|s| s.sample_id.clone()).collect(),
                })
                .collect(),
        }
    }

    /// Rebuilds a stream from a previously exported split.
    pub fn from_split(dataset: &Dataset, split: &RealizedSplit) -> Result<Self> {
        let train: BTreeMap<&str, &Arc<LabeledSample>> =
            dataset.train.iter().map(|s| (s.sample_id.as_str(), s)).collect();
        let test: BTreeMap<&str, &Arc<LabeledSample>> =
            dataset.test.iter().map(|s| (s.sample_id.as_str(), s)).collect();
        let lookup = |map: &BTreeMap<&str, &Arc<LabeledSample>>, ids: &[String]| {
            ids.iter()
                .map(|id| {
                    map.get(id.as_str())
                        .map(|s| Arc::clone(s))
                        .ok_or_else(|| Error::Data(format!("split references unknown sample `{id}`")))
                })
                .collect::<Result<Vec<_>>>()
        };
        let mut stream = TaskStream {
            sessions: Vec::new(),
            train_sets: Vec::new(),
            session_tests: Vec::new(),
        };
        for s in &split.sessions {
            stream.sessions.push(s.spec.clone());
            stream.train_sets.push(lookup(&train, &s.train_sample_ids)?);
            stream.session_tests.push(lookup(&test, &s.test_sample_ids)?);
        }
        stream.validate()?;
        Ok(stream)
    }

    /// Checks disjoint label spaces, label containment and exact shot counts.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (t, spec) in self.sessions.iter().enumerate() {
            let classes: BTreeSet<u32> = spec.class_ids.iter().copied().collect();
            for c in &classes {
                if !seen.insert(*c) {
                    return Err(Error::Data(format!("class {c} appears in more than one session")));
                }
            }
            let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
            for s in &self.train_sets[t] {
                if !classes.contains(&s.label) {
                    return Err(Error::Data(format!(
                        "session {t} train sample `{}` has foreign label {}",
                        s.sample_id, s.label
                    )));
                }
                *counts.entry(s.label).or_default() += 1;
            }
            for s in &self.session_tests[t] {
                if !classes.contains(&s.label) {
                    return Err(Error::Data(format!(
                        "session {t} test sample `{}` has foreign label {}",
                        s.sample_id, s.label
                    )));
                }
            }
            if let Shots::Exactly(k) = spec.shots_per_class {
                for c in &classes {
                    let n = counts.get(c).copied().unwrap_or(0);
                    if n != k {
                        return Err(Error::Data(format!(
                            "session {t} class {c} has {n} training samples, expected {k}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSession {
    #[serde(flatten)]
    pub spec: SessionSpec,
    pub train_sample_ids: Vec<String>,
    pub test_sample_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealizedSplit {
    pub seed: u64,
    pub sessions: Vec<SplitSession>,
}

impl RealizedSplit {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Splits `dataset` into one base session plus `n_sessions` incremental
/// sessions of `ways` classes and `shots` training samples each.
///
/// Shots are drawn uniformly without replacement from each class's training
/// pool (ordered by sample id), using a generator derived from `seed` and the
/// class id; the result is a pure function of its inputs.
pub fn build_task_stream(dataset: &Dataset, params: &StreamParams, seed: u64) -> Result<TaskStream> {
    let mut classes = dataset.class_ids();
    let needed = params.base_classes + params.ways * params.n_sessions;
    if needed > classes.len() || params.base_classes == 0 {
        return Err(Error::InsufficientClasses {
            needed: needed.max(1),
            available: classes.len(),
        });
    }
    if params.n_sessions > 0 && (params.ways == 0 || params.shots == 0) {
        return Err(Error::invalid("incremental sessions need ways >= 1 and shots >= 1"));
    }
    if params.class_order == ClassOrder::Shuffled {
        classes.shuffle(&mut rng_for(seed, "class-order", 0));
    }

    let mut by_class_train: BTreeMap<u32, Vec<Arc<LabeledSample>>> = BTreeMap::new();
    for s in &dataset.train {
        by_class_train.entry(s.label).or_default().push(Arc::clone(s));
    }
    let mut by_class_test: BTreeMap<u32, Vec<Arc<LabeledSample>>> = BTreeMap::new();
    for s in &dataset.test {
        by_class_test.entry(s.label).or_default().push(Arc::clone(s));
    }
    for v in by_class_train.values_mut().chain(by_class_test.values_mut()) {
        v.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    }

    let mut blocks: Vec<Vec<u32>> = vec![classes[..params.base_classes].to_vec()];
    for t in 0..params.n_sessions {
        let start = params.base_classes + t * params.ways;
        blocks.push(classes[start..start + params.ways].to_vec());
    }

    let mut stream = TaskStream {
        sessions: Vec::with_capacity(blocks.len()),
        train_sets: Vec::with_capacity(blocks.len()),
        session_tests: Vec::with_capacity(blocks.len()),
    };
    for (t, mut block) in blocks.into_iter().enumerate() {
        block.sort_unstable();
        let mut train = Vec::new();
        let mut test = Vec::new();
        for &c in &block {
            let pool = by_class_train.get(&c).map(Vec::as_slice).unwrap_or(&[]);
            if t == 0 {
                train.extend(pool.iter().cloned());
            } else {
                if pool.len() < params.shots {
                    return Err(Error::InsufficientShots {
                        class_id: c,
                        needed: params.shots,
                        available: pool.len(),
                    });
                }
                let mut rng = rng_for(seed, "shots", c as u64);
                let mut picked: Vec<usize> =
                    rand::seq::index::sample(&mut rng, pool.len(), params.shots).into_vec();
                picked.sort_unstable();
                train.extend(picked.into_iter().map(|i| Arc::clone(&pool[i])));
            }
            if let Some(ts) = by_class_test.get(&c) {
                test.extend(ts.iter().cloned());
            }
        }
        stream.sessions.push(SessionSpec {
            session_index: t,
            ways: block.len(),
            shots_per_class: if t == 0 { Shots::All } else { Shots::Exactly(params.shots) },
            class_ids: block,
        });
        stream.train_sets.push(train);
        stream.session_tests.push(test);
    }
    stream.validate()?;
    Ok(stream)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Image;

    fn dataset(classes: u32, train_per: usize, test_per: usize) -> Dataset {
        let mk = |c: u32, i: usize, split: &str| LabeledSample {
            image: Image::zeros(2, 2, 1),
            label: c,
            sample_id: format!("{split}/{c}/{i}"),
        };
        let train = (0..classes).flat_map(|c| (0..train_per).map(move |i| mk(c, i, "train"))).collect();
        let test = (0..classes).flat_map(|c| (0..test_per).map(move |i| mk(c, i, "test"))).collect();
        Dataset::new(train, test)
    }

    fn params(base: usize, ways: usize, shots: usize, n: usize) -> StreamParams {
        StreamParams { base_classes: base, ways, shots, n_sessions: n, class_order: ClassOrder::Sorted }
    }

    #[test]
    fn hundred_class_five_way_five_shot() {
        let ds = dataset(100, 8, 2);
        let s = build_task_stream(&ds, &params(60, 5, 5, 8), 0).unwrap();
        assert_eq!(s.len(), 9);
        let all: BTreeSet<u32> = s.sessions().iter().flat_map(|x| x.class_ids.clone()).collect();
        assert_eq!(all.len(), 100);
        assert_eq!(s.train_set(0).unwrap().len(), 60 * 8);
        assert_eq!(s.train_set(3).unwrap().len(), 25);
    }

    #[test]
    fn no_incremental_sessions_degenerates_to_supervised() {
        let ds = dataset(10, 4, 2);
        let s = build_task_stream(&ds, &params(10, 7, 3, 0), 3).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.cumulative_test_set(0).unwrap().len(), 20);
    }

    #[test]
    fn toy_split_is_contiguous_and_reproducible() {
        let ds = dataset(10, 12, 3);
        let p = params(6, 2, 5, 2);
        let a = build_task_stream(&ds, &p, 0).unwrap();
        let ids: Vec<Vec<u32>> = a.sessions().iter().map(|s| s.class_ids.clone()).collect();
        assert_eq!(ids, vec![vec![0, 1, 2, 3, 4, 5], vec![6, 7], vec![8, 9]]);
        let b = build_task_stream(&ds, &p, 0).unwrap();
        assert_eq!(a.realized_split(0), b.realized_split(0));
        let c = build_task_stream(&ds, &p, 1).unwrap();
        assert_ne!(a.realized_split(0).sessions[1].train_sample_ids, c.realized_split(1).sessions[1].train_sample_ids);
    }

    #[test]
    fn cumulative_test_sets() {
        let ds = dataset(10, 12, 3);
        let s = build_task_stream(&ds, &params(6, 2, 5, 2), 0).unwrap();
        let t0: BTreeSet<u32> = s.cumulative_test_set(0).unwrap().iter().map(|x| x.label).collect();
        assert_eq!(t0, (0..6).collect());
        let t1 = s.cumulative_test_set(1).unwrap();
        let manual: BTreeSet<String> = ds.test.iter().filter(|x| x.label < 8).map(|x| x.sample_id.clone()).collect();
        let got: BTreeSet<String> = t1.iter().map(|x| x.sample_id.clone()).collect();
        assert_eq!(got, manual);
        assert_eq!(s.cumulative_test_set(2).unwrap().len(), ds.test.len());
        assert!(matches!(s.cumulative_test_set(3), Err(Error::SessionOutOfRange { .. })));
    }

    #[test]
    fn errors_name_the_problem() {
        let ds = dataset(10, 12, 3);
        assert!(matches!(
            build_task_stream(&ds, &params(6, 2, 5, 3), 0),
            Err(Error::InsufficientClasses { needed: 12, available: 10 })
        ));
        let mut train: Vec<LabeledSample> = ds.train.iter().map(|s| (**s).clone()).collect();
        train.retain(|s| !(s.label == 7 && s.sample_id.ends_with("/3")));
        let test = ds.test.iter().map(|s| (**s).clone()).collect();
        let short = Dataset::new(train.into_iter().filter(|s| s.label != 7 || s.sample_id.ends_with("/1") || s.sample_id.ends_with("/2")).collect(), test);
        match build_task_stream(&short, &params(6, 2, 5, 2), 0) {
            Err(Error::InsufficientShots { class_id: 7, needed: 5, available: 2 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn split_export_replays_exactly() {
        let ds = dataset(10, 12, 3);
        let s = build_task_stream(&ds, &StreamParams { class_order: ClassOrder::Shuffled, ..params(6, 2, 5, 2) }, 9).unwrap();
        let split = s.realized_split(9);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("split.json");
        split.save(&p).unwrap();
        let replay = TaskStream::from_split(&ds, &RealizedSplit::load(&p).unwrap()).unwrap();
        assert_eq!(replay.realized_split(9), split);
    }
}
