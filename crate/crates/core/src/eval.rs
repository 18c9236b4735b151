//! Cosine trial scoring and equal error rate.
//!
//! Conventions: a trial is accepted when `score ≥ threshold`. At threshold
//! `t`, FAR is the fraction of non-target scores `≥ t` and FRR the fraction
//! of target scores `< t`. EER is a fraction in `[0, 1]`.

use std::io::Write;

use crate::data::{Dataset, EmbeddingStore, Split, Trial};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::cosine;

/// Trials with their scores, in the same order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    pub trials: Vec<Trial>,
    pub scores: Vec<f64>,
}

impl ScoreSet {
    /// (target scores, non-target scores).
    pub fn split_by_label(&self) -> (Vec<f64>, Vec<f64>) {
        let mut tgt = Vec::new();
        let mut non = Vec::new();
        for (t, &s) in self.trials.iter().zip(&self.scores) {
            if t.is_target {
                tgt.push(s);
            } else {
                non.push(s);
            }
        }
        (tgt, non)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EerResult {
    pub eer: f64,
    /// Score at the FAR/FRR crossing.
    pub threshold: f64,
    pub num_target: usize,
    pub num_nontarget: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// Cosine score for every trial, order preserved.
pub fn score_trials(store: &EmbeddingStore, trials: &[Trial]) -> Result<ScoreSet> {
    let lookup = |id: &str| {
        store
            .get(id)
            .map(|e| e.vector.as_slice())
            .ok_or_else(|| Error::Lookup(id.to_string()))
    };
    let scores = trials
        .iter()
        .map(|t| cosine(lookup(&t.enroll)?, lookup(&t.test)?))
        .collect::<Result<Vec<f64>>>()?;
    Ok(ScoreSet {
        trials: trials.to_vec(),
        scores,
    })
}

pub fn det_points(scores: &ScoreSet) -> Result<Vec<DetPoint>> {
    let (tgt, non) = scores.split_by_label();
    det_points_from_scores(&tgt, &non)
}

/// One operating point per distinct score, in increasing threshold order.
pub fn det_points_from_scores(target: &[f64], nontarget: &[f64]) -> Result<Vec<DetPoint>> {
    if target.is_empty() || nontarget.is_empty() {
        return Err(Error::Config(format!(
            "EER needs both classes ({} target, {} non-target trials)",
            target.len(),
            nontarget.len()
        )));
    }
    if target.iter().chain(nontarget).any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("trial scores".into()));
    }
    let mut tgt = target.to_vec();
    let mut non = nontarget.to_vec();
    tgt.sort_by(f64::total_cmp);
    non.sort_by(f64::total_cmp);
    let mut grid: Vec<f64> = tgt.iter().chain(&non).copied().collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup();

    let (nt, nn) = (tgt.len() as f64, non.len() as f64);
    let (mut ti, mut ni) = (0usize, 0usize);
    let mut points = Vec::with_capacity(grid.len());
    for &t in &grid {
        while ti < tgt.len() && tgt[ti] < t {
            ti += 1;
        }
        while ni < non.len() && non[ni] < t {
            ni += 1;
        }
        points.push(DetPoint {
            threshold: t,
            far: (non.len() - ni) as f64 / nn,
            frr: ti as f64 / nt,
        });
    }
    Ok(points)
}

pub fn compute_eer(scores: &ScoreSet) -> Result<EerResult> {
    let (tgt, non) = scores.split_by_label();
    eer_from_scores(&tgt, &non)
}

/// EER by linear interpolation of the FAR/FRR crossing between adjacent
/// operating points of the sorted distinct-score grid (closed above by the
/// reject-all point FAR = 0, FRR = 1).
pub fn eer_from_scores(target: &[f64], nontarget: &[f64]) -> Result<EerResult> {
    let mut points = det_points_from_scores(target, nontarget)?;
    let last = points.last().expect("non-empty").threshold;
    points.push(DetPoint {
        threshold: last,
        far: 0.0,
        frr: 1.0,
    });
    // FRR − FAR is non-decreasing along the grid, negative at the first point
    let k = points
        .iter()
        .position(|p| p.frr >= p.far)
        .expect("reject-all point has FRR > FAR");
    let b = points[k];
    let (eer, threshold) = if k == 0 || b.frr == b.far {
        (b.far, b.threshold)
    } else {
        let a = points[k - 1];
        let da = a.frr - a.far;
        let db = b.frr - b.far;
        let alpha = -da / (db - da);
        (
            a.far + alpha * (b.far - a.far),
            a.threshold + alpha * (b.threshold - a.threshold),
        )
    };
    Ok(EerResult {
        eer: eer.clamp(0.0, 1.0),
        threshold,
        num_target: target.len(),
        num_nontarget: nontarget.len(),
    })
}

/// Embeds the rows of `split` and stores them under their utterance ids.
pub fn embed_split(model: &Model<f64>, dataset: &Dataset, split: Split) -> Result<EmbeddingStore> {
    let rows = dataset.rows(split);
    let (features, _) = dataset.subset(&rows);
    let emb = model.embed(&features)?;
    let ids: Vec<String> = rows.iter().map(|&i| dataset.utt_ids[i].clone()).collect();
    let speakers: Vec<String> = rows
        .iter()
        .map(|&i| dataset.speaker_of(i).to_string())
        .collect();
    EmbeddingStore::from_parts(&ids, &speakers, &emb)
}

/// `enroll,test,label,score`
pub fn write_scores_csv<W: Write>(out: &mut W, scores: &ScoreSet) -> Result<()> {
    writeln!(out, "enroll,test,label,score")?;
    for (t, s) in scores.trials.iter().zip(&scores.scores) {
        let label = if t.is_target { "target" } else { "nontarget" };
        writeln!(out, "{},{},{label},{s:.16e}", t.enroll, t.test)?;
    }
    Ok(())
}

/// `threshold,far,frr`
pub fn write_det_csv<W: Write>(out: &mut W, points: &[DetPoint]) -> Result<()> {
    writeln!(out, "threshold,far,frr")?;
    for p in points {
        writeln!(out, "{:.16e},{},{}", p.threshold, p.far, p.frr)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::EmbeddingEntry;

    fn entry(utt: &str, v: &[f64]) -> EmbeddingEntry {
        EmbeddingEntry {
            utt: utt.into(),
            speaker: "s".into(),
            vector: v.to_vec(),
        }
    }

    fn trial(a: &str, b: &str, is_target: bool) -> Trial {
        Trial {
            enroll: a.into(),
            test: b.into(),
            is_target,
        }
    }

    #[test]
    fn scoring_examples() {
        let mut store = EmbeddingStore::new();
        store.push(entry("a", &[1.0, 0.0])).unwrap();
        store.push(entry("b", &[0.0, 2.0])).unwrap();
        let s = score_trials(&store, &[trial("a", "a", true), trial("a", "b", false)]).unwrap();
        assert_eq!(s.scores, vec![1.0, 0.0]);
        match score_trials(&store, &[trial("a", "zz", true)]) {
            Err(Error::Lookup(id)) => assert_eq!(id, "zz"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn separated_scores() {
        let r = eer_from_scores(&[0.9, 0.8], &[0.1, 0.2]).unwrap();
        assert_eq!(r.eer, 0.0);
        assert_eq!((r.num_target, r.num_nontarget), (2, 2));
        let pts = det_points_from_scores(&[0.9, 0.8], &[0.1, 0.2]).unwrap();
        assert!(pts.iter().any(|p| p.far == 0.0 && p.frr == 0.0));
    }

    #[test]
    fn interleaved_pairs() {
        // every threshold between 0.4 and 0.6 rejects one target and
        // accepts one non-target: FAR = FRR = 1/2
        let r = eer_from_scores(&[0.8, 0.4], &[0.6, 0.2]).unwrap();
        assert_eq!(r.eer, 0.5);
    }

    #[test]
    fn two_element_det() {
        let pts = det_points_from_scores(&[0.7], &[0.3]).unwrap();
        assert_eq!(
            pts,
            vec![
                DetPoint {
                    threshold: 0.3,
                    far: 1.0,
                    frr: 0.0
                },
                DetPoint {
                    threshold: 0.7,
                    far: 0.0,
                    frr: 0.0
                },
            ]
        );
    }

    #[test]
    fn empty_class_is_config_error() {
        assert!(matches!(
            eer_from_scores(&[], &[0.1]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            eer_from_scores(&[0.1], &[]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn reversed_scores() {
        let r = eer_from_scores(&[0.1, 0.2], &[0.8, 0.9]).unwrap();
        assert_eq!(r.eer, 1.0);
    }

    #[test]
    fn csv_headers() {
        let s = ScoreSet {
            trials: vec![trial("a", "b", true)],
            scores: vec![0.5],
        };
        let mut buf = Vec::new();
        write_scores_csv(&mut buf, &s).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("enroll,test,label,score\na,b,target,"));
        let mut buf = Vec::new();
        write_det_csv(&mut buf, &det_points_from_scores(&[0.7], &[0.3]).unwrap()).unwrap();
        assert!(String::from_utf8(buf)
            .unwrap()
            .starts_with("threshold,far,frr\n"));
    }
}
