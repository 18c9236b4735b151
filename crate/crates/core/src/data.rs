//! Synthetic speaker data, the embedding store text format and trial lists.

use std::collections::HashMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Parameters of the Gaussian-cluster speaker generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_speakers: usize,
    pub utts_per_speaker: usize,
    pub d_in: usize,
    /// Std of utterance noise around a speaker centroid.
    pub within_std: f64,
    /// Std of the centroids themselves.
    pub between_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_speakers: 20,
            utts_per_speaker: 50,
            d_in: 20,
            within_std: 1.0,
            between_std: 3.0,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_speakers < 2 {
            return Err(Error::Config(format!(
                "num_speakers = {} (minimum 2)",
                self.num_speakers
            )));
        }
        if self.utts_per_speaker < 2 {
            return Err(Error::Config(format!(
                "utts_per_speaker = {} (minimum 2)",
                self.utts_per_speaker
            )));
        }
        if self.d_in == 0 {
            return Err(Error::Config("d_in must be positive".into()));
        }
        for (name, v) in [
            ("within_std", self.within_std),
            ("between_std", self.between_std),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v} must be positive")));
            }
        }
        Ok(())
    }

    /// Number of heldout utterances per speaker: the last 20% (rounded up),
    /// raised to 2 when that still leaves a training utterance.
    pub fn heldout_per_speaker(&self) -> usize {
        heldout_count(self.utts_per_speaker)
    }
}

fn heldout_count(utts: usize) -> usize {
    let mut h = utts.div_ceil(5);
    if h < 2 && utts >= 3 {
        h = 2;
    }
    h.min(utts.saturating_sub(1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Heldout,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Heldout => "heldout",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Utterance features with speaker labels and a train/heldout tag per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix<f64>,
    /// Speaker index per row.
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
    pub utt_ids: Vec<String>,
    /// Speaker id per speaker index.
    pub speaker_ids: Vec<String>,
    /// Generating centroids, when known.
    pub centroids: Option<Matrix<f64>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_speakers(&self) -> usize {
        self.speaker_ids.len()
    }

    pub fn rows(&self, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.splits[i] == split)
            .collect()
    }

    pub fn speaker_of(&self, row: usize) -> &str {
        &self.speaker_ids[self.labels[row]]
    }

    /// Features and labels of the selected rows.
    pub fn subset(&self, rows: &[usize]) -> (Matrix<f64>, Vec<usize>) {
        (
            self.features.select_rows(rows),
            rows.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

/// Draws a dataset: centroids `~ N(0, between_std² I)`, utterances
/// `centroid + N(0, within_std² I)`. The last utterances of every speaker
/// form the heldout split (see [`SyntheticSpec::heldout_per_speaker`]).
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (k, u, d) = (spec.num_speakers, spec.utts_per_speaker, spec.d_in);
    let centroid_data: Vec<f64> = (0..k * d)
        .map(|_| spec.between_std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let centroids = Matrix::from_vec(k, d, centroid_data)?;

    let heldout = heldout_count(u);
    let mut data = Vec::with_capacity(k * u * d);
    let mut labels = Vec::with_capacity(k * u);
    let mut splits = Vec::with_capacity(k * u);
    let mut utt_ids = Vec::with_capacity(k * u);
    for spk in 0..k {
        let c = centroids.row(spk);
        for utt in 0..u {
            data.extend(
                c.iter()
                    .map(|&ci| ci + spec.within_std * rng.sample::<f64, _>(StandardNormal)),
            );
            labels.push(spk);
            splits.push(if utt >= u - heldout {
                Split::Heldout
            } else {
                Split::Train
            });
            utt_ids.push(format!("spk{spk:03}-utt{utt:03}"));
        }
    }
    Ok(Dataset {
        features: Matrix::from_vec(k * u, d, data)?,
        labels,
        splits,
        utt_ids,
        speaker_ids: (0..k).map(|s| format!("spk{s:03}")).collect(),
        centroids: Some(centroids),
    })
}

/// Heldout accuracy of a nearest-centroid classifier fit on the train split.
pub fn nearest_centroid_accuracy(dataset: &Dataset) -> f64 {
    let d = dataset.features.cols();
    let k = dataset.num_speakers();
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for i in dataset.rows(Split::Train) {
        let y = dataset.labels[i];
        counts[y] += 1;
        for (s, &x) in sums[y].iter_mut().zip(dataset.features.row(i)) {
            *s += x;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|v| *v /= n.max(1) as f64);
    }
    let heldout = dataset.rows(Split::Heldout);
    if heldout.is_empty() {
        return 0.0;
    }
    let correct = heldout
        .iter()
        .filter(|&&i| {
            let x = dataset.features.row(i);
            let best = (0..k)
                .min_by(|&a, &b| sq_dist(x, &sums[a]).total_cmp(&sq_dist(x, &sums[b])))
                .expect("at least two speakers");
            best == dataset.labels[i]
        })
        .count();
    correct as f64 / heldout.len() as f64
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingEntry {
    pub utt: String,
    pub speaker: String,
    pub vector: Vec<f64>,
}

/// Utterance vectors keyed by utterance id, in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingStore {
    entries: Vec<EmbeddingEntry>,
    index: HashMap<String, usize>,
}

impl EmbeddingStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// One entry per row of `vectors`.
    pub fn from_parts(ids: &[String], speakers: &[String], vectors: &Matrix<f64>) -> Result<Self> {
        if ids.len() != vectors.rows() || speakers.len() != vectors.rows() {
            return Err(Error::Shape(format!(
                "{} ids, {} speakers, {} vectors",
                ids.len(),
                speakers.len(),
                vectors.rows()
            )));
        }
        let mut store = Self::new();
        for (i, (id, spk)) in ids.iter().zip(speakers).enumerate() {
            store.push(EmbeddingEntry {
                utt: id.clone(),
                speaker: spk.clone(),
                vector: vectors.row(i).to_vec(),
            })?;
        }
        Ok(store)
    }

    pub fn push(&mut self, entry: EmbeddingEntry) -> Result<()> {
        if let Some(d) = self.dim() {
            if entry.vector.len() != d {
                return Err(Error::Shape(format!(
                    "vector for `{}` has {} values, store holds {d}",
                    entry.utt,
                    entry.vector.len()
                )));
            }
        }
        if entry.utt.split_whitespace().count() != 1
            || entry.speaker.split_whitespace().count() != 1
        {
            return Err(Error::Config(format!(
                "ids must be single non-empty tokens: `{}` / `{}`",
                entry.utt, entry.speaker
            )));
        }
        if self.index.contains_key(&entry.utt) {
            return Err(Error::Config(format!(
                "duplicate utterance id `{}`",
                entry.utt
            )));
        }
        self.index.insert(entry.utt.clone(), self.entries.len());
        self.entries.push(entry);
        Ok(())
    }

    pub fn get(&self, utt: &str) -> Option<&EmbeddingEntry> {
        self.index.get(utt).map(|&i| &self.entries[i])
    }

    pub fn dim(&self) -> Option<usize> {
        self.entries.first().map(|e| e.vector.len())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[EmbeddingEntry] {
        &self.entries
    }
}

/// One line per utterance: `<utt-id> <speaker-id> <v1> … <vD>`, values with
/// 17 significant digits, single spaces, LF endings.
pub fn write_embeddings<W: Write>(out: &mut W, store: &EmbeddingStore) -> Result<()> {
    for e in &store.entries {
        write!(out, "{} {}", e.utt, e.speaker)?;
        for v in &e.vector {
            write!(out, " {v:.16e}")?;
        }
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_embeddings<R: BufRead>(input: R) -> Result<EmbeddingStore> {
    let mut store = EmbeddingStore::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let ln = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut toks = line.split_whitespace();
        let (Some(utt), Some(speaker)) = (toks.next(), toks.next()) else {
            return Err(Error::Parse {
                line: ln,
                msg: "expected `<utt-id> <speaker-id> <values…>`".into(),
            });
        };
        let vector = toks
            .map(|t| {
                t.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Parse {
                        line: ln,
                        msg: format!("invalid number `{t}`"),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        if vector.is_empty() {
            return Err(Error::Parse {
                line: ln,
                msg: "no vector values".into(),
            });
        }
        if let Some(d) = store.dim() {
            if vector.len() != d {
                return Err(Error::Dimension {
                    line: ln,
                    expected: d,
                    found: vector.len(),
                });
            }
        }
        store
            .push(EmbeddingEntry {
                utt: utt.to_string(),
                speaker: speaker.to_string(),
                vector,
            })
            .map_err(|e| Error::Parse {
                line: ln,
                msg: e.to_string(),
            })?;
    }
    Ok(store)
}

pub fn save_embeddings(path: &Path, store: &EmbeddingStore) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_embeddings(&mut out, store)?;
    out.flush()?;
    Ok(())
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingStore> {
    read_embeddings(BufReader::new(File::open(path)?))
}

pub const FEATURES_FILE: &str = "features.txt";
pub const SPLIT_FILE: &str = "split.txt";

/// Writes `features.txt` (embedding store format, speaker ids as labels) and
/// `split.txt` (`<utt-id> <train|heldout>`) into `dir`.
pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let speakers: Vec<String> = (0..dataset.len())
        .map(|i| dataset.speaker_of(i).to_string())
        .collect();
    let store = EmbeddingStore::from_parts(&dataset.utt_ids, &speakers, &dataset.features)?;
    save_embeddings(&dir.join(FEATURES_FILE), &store)?;
    let mut out = BufWriter::new(File::create(dir.join(SPLIT_FILE))?);
    for (utt, split) in dataset.utt_ids.iter().zip(&dataset.splits) {
        writeln!(out, "{utt} {split}")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a dataset written by [`save_dataset`]. Speaker indices follow the
/// order in which speaker ids first appear.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let store = load_embeddings(&dir.join(FEATURES_FILE))?;
    let mut split_of = HashMap::new();
    let file = BufReader::new(File::open(dir.join(SPLIT_FILE))?);
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        let split = match toks.as_slice() {
            [_, "train"] => Split::Train,
            [_, "heldout"] => Split::Heldout,
            _ => {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: "expected `<utt-id> <train|heldout>`".into(),
                })
            }
        };
        split_of.insert(toks[0].to_string(), split);
    }
    let mut speaker_ids: Vec<String> = Vec::new();
    let mut speaker_index: HashMap<String, usize> = HashMap::new();
    let mut labels = Vec::with_capacity(store.len());
    let mut splits = Vec::with_capacity(store.len());
    let mut utt_ids = Vec::with_capacity(store.len());
    let mut data = Vec::new();
    for e in store.entries() {
        let next = speaker_ids.len();
        let y = *speaker_index.entry(e.speaker.clone()).or_insert_with(|| {
            speaker_ids.push(e.speaker.clone());
            next
        });
        labels.push(y);
        splits.push(
            *split_of
                .get(&e.utt)
                .ok_or_else(|| Error::Lookup(e.utt.clone()))?,
        );
        utt_ids.push(e.utt.clone());
        data.extend_from_slice(&e.vector);
    }
    let d = store.dim().unwrap_or(0);
    Ok(Dataset {
        features: Matrix::from_vec(store.len(), d, data)?,
        labels,
        splits,
        utt_ids,
        speaker_ids,
        centroids: None,
    })
}

/// An enrollment/test utterance pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Trial {
    pub enroll: String,
    pub test: String,
    pub is_target: bool,
}

/// Samples `num_target` same-speaker and `num_nontarget` cross-speaker pairs
/// from the heldout split, without replacement. Target pairs are taken
/// round-robin over speakers. The returned list is shuffled.
pub fn make_trials(
    dataset: &Dataset,
    num_target: usize,
    num_nontarget: usize,
    seed: u64,
) -> Result<Vec<Trial>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heldout = dataset.rows(Split::Heldout);
    let mut per_speaker: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_speakers()];
    for &i in &heldout {
        per_speaker[dataset.labels[i]].push(i);
    }
    let mut target_pools: Vec<Vec<(usize, usize)>> = per_speaker
        .iter()
        .map(|rows| {
            let mut pairs = Vec::new();
            for (a, &ra) in rows.iter().enumerate() {
                for &rb in &rows[a + 1..] {
                    pairs.push((ra, rb));
                }
            }
            pairs
        })
        .collect();
    let max_target: usize = target_pools.iter().map(Vec::len).sum();
    let mut nontarget_pool = Vec::new();
    for (a, &ra) in heldout.iter().enumerate() {
        for &rb in &heldout[a + 1..] {
            if dataset.labels[ra] != dataset.labels[rb] {
                nontarget_pool.push((ra, rb));
            }
        }
    }
    let max_nontarget = nontarget_pool.len();
    if num_target > max_target || num_nontarget > max_nontarget {
        return Err(Error::Config(format!(
            "requested {num_target} target / {num_nontarget} non-target trials, \
             heldout split supports at most {max_target} / {max_nontarget}"
        )));
    }

    for pool in &mut target_pools {
        pool.shuffle(&mut rng);
    }
    let mut picked = Vec::with_capacity(num_target + num_nontarget);
    let mut cursor = vec![0usize; target_pools.len()];
    while picked.len() < num_target {
        for (spk, pool) in target_pools.iter().enumerate() {
            if picked.len() == num_target {
                break;
            }
            if let Some(&pair) = pool.get(cursor[spk]) {
                cursor[spk] += 1;
                picked.push(pair);
            }
        }
    }
    let chosen = rand::seq::index::sample(&mut rng, max_nontarget, num_nontarget);
    picked.extend(chosen.iter().map(|k| nontarget_pool[k]));
    picked.shuffle(&mut rng);

    Ok(picked
        .into_iter()
        .map(|(a, b)| Trial {
            enroll: dataset.utt_ids[a].clone(),
            test: dataset.utt_ids[b].clone(),
            is_target: dataset.labels[a] == dataset.labels[b],
        })
        .collect())
}

/// One trial per line: `<enroll-utt-id> <test-utt-id> <target|nontarget>`.
pub fn write_trials<W: Write>(out: &mut W, trials: &[Trial]) -> Result<()> {
    for t in trials {
        let label = if t.is_target { "target" } else { "nontarget" };
        writeln!(out, "{} {} {label}", t.enroll, t.test)?;
    }
    Ok(())
}

pub fn read_trials<R: BufRead>(input: R) -> Result<Vec<Trial>> {
    let mut trials = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        let is_target = match toks.as_slice() {
            [_, _, "target"] => true,
            [_, _, "nontarget"] => false,
            _ => {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: "expected `<enroll> <test> <target|nontarget>`".into(),
                })
            }
        };
        trials.push(Trial {
            enroll: toks[0].to_string(),
            test: toks[1].to_string(),
            is_target,
        });
    }
    Ok(trials)
}

pub fn save_trials(path: &Path, trials: &[Trial]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_trials(&mut out, trials)?;
    out.flush()?;
    Ok(())
}

pub fn load_trials(path: &Path) -> Result<Vec<Trial>> {
    read_trials(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_validation() {
        let bad = SyntheticSpec {
            num_speakers: 1,
            ..Default::default()
        };
        assert!(matches!(generate_synthetic(&bad), Err(Error::Config(_))));
        let bad = SyntheticSpec {
            utts_per_speaker: 1,
            ..Default::default()
        };
        assert!(generate_synthetic(&bad).is_err());
        let bad = SyntheticSpec {
            within_std: 0.0,
            ..Default::default()
        };
        assert!(generate_synthetic(&bad).is_err());
    }

    #[test]
    fn heldout_counts() {
        assert_eq!(heldout_count(2), 1);
        assert_eq!(heldout_count(3), 2);
        assert_eq!(heldout_count(5), 2);
        assert_eq!(heldout_count(11), 3);
        assert_eq!(heldout_count(50), 10);
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = SyntheticSpec::default();
        assert_eq!(
            generate_synthetic(&spec).unwrap(),
            generate_synthetic(&spec).unwrap()
        );
        let other = SyntheticSpec { seed: 8, ..spec };
        assert_ne!(
            generate_synthetic(&other).unwrap().features,
            generate_synthetic(&SyntheticSpec::default())
                .unwrap()
                .features
        );
    }

    #[test]
    fn vanishing_noise_collapses_to_centroid() {
        let spec = SyntheticSpec {
            num_speakers: 3,
            utts_per_speaker: 4,
            d_in: 5,
            within_std: 1e-300,
            ..Default::default()
        };
        let ds = generate_synthetic(&spec).unwrap();
        let c = ds.centroids.as_ref().unwrap();
        for i in 0..ds.len() {
            assert_eq!(ds.features.row(i), c.row(ds.labels[i]));
        }
    }

    #[test]
    fn embedding_text_format() {
        let text = "a s1 1 2 3 4\nb s1 1 2 3\n";
        match read_embeddings(text.as_bytes()) {
            Err(Error::Dimension {
                line: 2,
                expected: 4,
                found: 3,
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(read_embeddings("".as_bytes()).unwrap().is_empty());
        assert!(matches!(
            read_embeddings("a s1 1 x\n".as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            read_embeddings("a\n".as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn trial_format_round_trip() {
        let trials = vec![
            Trial {
                enroll: "a".into(),
                test: "b".into(),
                is_target: true,
            },
            Trial {
                enroll: "a".into(),
                test: "c".into(),
                is_target: false,
            },
        ];
        let mut buf = Vec::new();
        write_trials(&mut buf, &trials).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "a b target\na c nontarget\n"
        );
        assert_eq!(read_trials(buf.as_slice()).unwrap(), trials);
        assert!(read_trials("a b maybe\n".as_bytes()).is_err());
    }

    fn four_utt_dataset() -> Dataset {
        // 2 speakers × 3 utterances; last 2 of each are heldout
        generate_synthetic(&SyntheticSpec {
            num_speakers: 2,
            utts_per_speaker: 3,
            d_in: 2,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn trials_small_enumeration() {
        let ds = four_utt_dataset();
        assert_eq!(ds.rows(Split::Heldout).len(), 4);
        assert!(make_trials(&ds, 0, 0, 1).unwrap().is_empty());
        let trials = make_trials(&ds, 2, 4, 1).unwrap();
        assert_eq!(trials.iter().filter(|t| t.is_target).count(), 2);
        assert_eq!(trials.iter().filter(|t| !t.is_target).count(), 4);
        let spk = |u: &str| u[..6].to_string();
        let target_speakers: std::collections::HashSet<_> = trials
            .iter()
            .filter(|t| t.is_target)
            .map(|t| spk(&t.enroll))
            .collect();
        assert_eq!(target_speakers.len(), 2);
        let unique: std::collections::HashSet<_> = trials.iter().collect();
        assert_eq!(unique.len(), 6);
        match make_trials(&ds, 3, 4, 1) {
            Err(Error::Config(msg)) => assert!(msg.contains("2 / 4"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn trials_deterministic() {
        let ds = generate_synthetic(&SyntheticSpec::default()).unwrap();
        let a = make_trials(&ds, 100, 300, 11).unwrap();
        assert_eq!(a, make_trials(&ds, 100, 300, 11).unwrap());
        assert_ne!(a, make_trials(&ds, 100, 300, 12).unwrap());
    }
}
