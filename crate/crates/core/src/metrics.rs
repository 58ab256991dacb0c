//! Attack evaluation: success rate, dB distortion, WER, and the
//! length-binned success histogram.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Lowercase, trim, collapse internal whitespace: the canonical form
/// used for success-rate string equality.
pub fn canonicalize(text: &str) -> String {
    text.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

/// N_s / N: the fraction of transcripts exactly equal to the target
/// after canonicalization. The empty-string target is matchable.
pub fn success_rate(transcripts: &[String], target: &str) -> Result<f64> {
    if transcripts.is_empty() {
        return Err(Error::contract("success_rate needs at least one transcript"));
    }
    let want = canonicalize(target);
    let hits = transcripts
        .iter()
        .filter(|t| canonicalize(t) == want)
        .count();
    Ok(hits as f64 / transcripts.len() as f64)
}

/// D(delta, x) = dB(delta) - dB(x) with dB(s) = 20 log10 max_t |s_t|.
/// Peaks are taken over magnitudes; a signed max is degenerate for
/// zero-mean audio. Lower is better (quieter attack).
pub fn distortion_db<S: Scalar>(delta: &Tensor<S>, x: &Tensor<S>) -> Result<f64> {
    let pd = delta.max_abs().as_f64();
    let px = x.max_abs().as_f64();
    if pd <= 0.0 {
        return Err(Error::UndefinedDistortion("perturbation"));
    }
    if px <= 0.0 {
        return Err(Error::UndefinedDistortion("reference"));
    }
    Ok(20.0 * pd.log10() - 20.0 * px.log10())
}

/// Word-level edit distance with unit costs, plus the reference length.
pub fn wer_counts(reference: &str, hypothesis: &str) -> Result<(usize, usize)> {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    if r.is_empty() {
        return Err(Error::contract("wer: reference is empty after tokenization"));
    }
    let mut prev: Vec<usize> = (0..=h.len()).collect();
    let mut curr = vec![0usize; h.len() + 1];
    for i in 1..=r.len() {
        curr[0] = i;
        for j in 1..=h.len() {
            let sub = prev[j - 1] + usize::from(r[i - 1] != h[j - 1]);
            curr[j] = sub.min(prev[j] + 1).min(curr[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    Ok((prev[h.len()], r.len()))
}

/// Edit distance / reference length; exceeds 1 when the hypothesis has
/// more errors than the reference has words.
pub fn wer(reference: &str, hypothesis: &str) -> Result<f64> {
    let (edits, len) = wer_counts(reference, hypothesis)?;
    Ok(edits as f64 / len as f64)
}

/// One evaluated utterance. `success` is unset for untargeted runs,
/// `distortion_db` for all-zero signals (e.g. the silence baseline).
#[derive(Debug, Clone, Serialize)]
pub struct UtteranceOutcome {
    pub id: String,
    pub seconds: f64,
    pub reference: String,
    pub clean_transcript: String,
    pub attacked_transcript: String,
    pub success: Option<bool>,
    pub distortion_db: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Aggregates {
    pub count: usize,
    pub success_rate: Option<f64>,
    pub mean_distortion_db: Option<f64>,
    pub median_distortion_db: Option<f64>,
    /// Corpus-level WER of attacked transcripts against the references.
    pub attacked_wer: f64,
    pub clean_wer: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AttackReport {
    pub target: Option<String>,
    pub records: Vec<UtteranceOutcome>,
    pub aggregates: Aggregates,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LengthBin {
    pub lo_seconds: f64,
    pub hi_seconds: f64,
    pub count: usize,
    pub successes: usize,
    pub rate: f64,
}

impl AttackReport {
    pub fn new(target: Option<String>, records: Vec<UtteranceOutcome>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::contract("report needs at least one record"));
        }
        let success_rate = if target.is_some() {
            let hits = records.iter().filter(|r| r.success == Some(true)).count();
            Some(hits as f64 / records.len() as f64)
        } else {
            None
        };
        let mut distortions: Vec<f64> = records.iter().filter_map(|r| r.distortion_db).collect();
        distortions.sort_by(f64::total_cmp);
        let mean_distortion_db = if distortions.is_empty() {
            None
        } else {
            Some(distortions.iter().sum::<f64>() / distortions.len() as f64)
        };
        let median_distortion_db = if distortions.is_empty() {
            None
        } else {
            Some(distortions[distortions.len() / 2])
        };
        let mut att_edits = 0usize;
        let mut clean_edits = 0usize;
        let mut ref_words = 0usize;
        for r in &records {
            let (e, n) = wer_counts(&r.reference, &r.attacked_transcript)?;
            att_edits += e;
            ref_words += n;
            let (e, _) = wer_counts(&r.reference, &r.clean_transcript)?;
            clean_edits += e;
        }
        let aggregates = Aggregates {
            count: records.len(),
            success_rate,
            mean_distortion_db,
            median_distortion_db,
            attacked_wer: att_edits as f64 / ref_words as f64,
            clean_wer: clean_edits as f64 / ref_words as f64,
        };
        Ok(AttackReport {
            target,
            records,
            aggregates,
        })
    }

    pub fn success_rate(&self) -> Option<f64> {
        self.aggregates.success_rate
    }

    /// Success rate per duration bin of the given width; empty bins are
    /// omitted. Only defined for targeted reports.
    pub fn success_by_length(&self, bin_width_seconds: f64) -> Result<Vec<LengthBin>> {
        if !(bin_width_seconds > 0.0) {
            return Err(Error::contract("bin width must be positive"));
        }
        let mut bins: std::collections::BTreeMap<usize, (usize, usize)> = Default::default();
        for r in &self.records {
            let b = (r.seconds / bin_width_seconds).floor() as usize;
            let e = bins.entry(b).or_default();
            e.0 += 1;
            if r.success == Some(true) {
                e.1 += 1;
            }
        }
        Ok(bins
            .into_iter()
            .map(|(b, (count, successes))| LengthBin {
                lo_seconds: b as f64 * bin_width_seconds,
                hi_seconds: (b + 1) as f64 * bin_width_seconds,
                count,
                successes,
                rate: successes as f64 / count as f64,
            })
            .collect())
    }

    /// Stable CSV: header, one row per utterance (ordered as given),
    /// then `aggregate,<name>,<value>` footer rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str("id,seconds,reference,clean_transcript,attacked_transcript,success,distortion_db\n");
        for r in &self.records {
            let success = match r.success {
                Some(true) => "1",
                Some(false) => "0",
                None => "",
            };
            let distortion = r
                .distortion_db
                .map(|d| format!("{d:.6}"))
                .unwrap_or_default();
            out.push_str(&format!(
                "{},{:.6},{},{},{},{},{}\n",
                csv_field(&r.id),
                r.seconds,
                csv_field(&r.reference),
                csv_field(&r.clean_transcript),
                csv_field(&r.attacked_transcript),
                success,
                distortion
            ));
        }
        let agg = &self.aggregates;
        out.push_str(&format!("aggregate,count,{}\n", agg.count));
        if let Some(sr) = agg.success_rate {
            out.push_str(&format!("aggregate,success_rate,{sr:.6}\n"));
        }
        if let Some(d) = agg.mean_distortion_db {
            out.push_str(&format!("aggregate,mean_distortion_db,{d:.6}\n"));
        }
        if let Some(d) = agg.median_distortion_db {
            out.push_str(&format!("aggregate,median_distortion_db,{d:.6}\n"));
        }
        out.push_str(&format!("aggregate,clean_wer,{:.6}\n", agg.clean_wer));
        out.push_str(&format!("aggregate,attacked_wer,{:.6}\n", agg.attacked_wer));
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn histogram_csv(bins: &[LengthBin]) -> String {
    let mut out = String::from("lo_seconds,hi_seconds,count,successes,rate\n");
    for b in bins {
        out.push_str(&format!(
            "{:.3},{:.3},{},{},{:.6}\n",
            b.lo_seconds, b.hi_seconds, b.count, b.successes, b.rate
        ));
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn success_rate_counts_exact_matches() {
        let ts = ["thank you", "thank you", "nope", "thank you"]
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>();
        assert_eq!(success_rate(&ts, "thank you").unwrap(), 0.75);
        assert_eq!(success_rate(&ts[..2], "thank you").unwrap(), 1.0);
        assert!(success_rate(&[], "x").is_err());
    }

    #[test]
    fn empty_target_is_matchable() {
        let ts = vec![String::new(), String::new()];
        assert_eq!(success_rate(&ts, "").unwrap(), 1.0);
    }

    #[test]
    fn canonicalization_collapses_whitespace_and_case() {
        assert_eq!(canonicalize("  Thank   YOU "), "thank you");
        let ts = vec!["THANK  you".to_string()];
        assert_eq!(success_rate(&ts, "thank you").unwrap(), 1.0);
    }

    #[test]
    fn distortion_equal_peaks_is_zero() {
        let d = Tensor::new(vec![2], vec![32768.0, 0.0]).unwrap();
        let x = Tensor::new(vec![2], vec![-32768.0, 10.0]).unwrap();
        assert_eq!(distortion_db(&d, &x).unwrap(), 0.0);
    }

    #[test]
    fn distortion_half_amplitude() {
        let d = Tensor::new(vec![1], vec![16384.0]).unwrap();
        let x = Tensor::new(vec![1], vec![32768.0]).unwrap();
        let got = distortion_db(&d, &x).unwrap();
        assert!((got - (-20.0 * 2.0f64.log10())).abs() < 1e-9, "{got}");
    }

    #[test]
    fn distortion_scaling_law() {
        let d = Tensor::new(vec![2], vec![100.0, -40.0]).unwrap();
        let d2 = Tensor::new(vec![2], vec![200.0, -80.0]).unwrap();
        let x = Tensor::new(vec![1], vec![5000.0]).unwrap();
        let base = distortion_db(&d, &x).unwrap();
        let doubled = distortion_db(&d2, &x).unwrap();
        assert!((doubled - base - 20.0 * 2.0f64.log10()).abs() < 1e-9);
    }

    #[test]
    fn distortion_rejects_all_zero() {
        let z = Tensor::<f64>::zeros(&[4]);
        let x = Tensor::new(vec![1], vec![1.0]).unwrap();
        assert!(distortion_db(&z, &x).is_err());
        assert!(distortion_db(&x, &z).is_err());
    }

    #[test]
    fn wer_basic_cases() {
        assert!((wer("a b c", "a x c").unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(wer("same words here", "same words here").unwrap(), 0.0);
        assert_eq!(wer("a", "x y z").unwrap(), 3.0);
        assert!(wer("", "anything").is_err());
        assert!(wer("   ", "x").is_err());
    }

    #[test]
    fn wer_single_insertion_costs_one() {
        let (base, _) = wer_counts("one two three", "one two three").unwrap();
        let (plus, _) = wer_counts("one two three", "one two extra three").unwrap();
        assert_eq!(base, 0);
        assert_eq!(plus, 1);
    }

    fn record(id: &str, seconds: f64, success: bool) -> UtteranceOutcome {
        UtteranceOutcome {
            id: id.into(),
            seconds,
            reference: "one two".into(),
            clean_transcript: "one two".into(),
            attacked_transcript: if success { "x" } else { "one two" }.into(),
            success: Some(success),
            distortion_db: Some(-3.0),
        }
    }

    #[test]
    fn report_aggregates_and_histogram() {
        let report = AttackReport::new(
            Some("x".into()),
            vec![
                record("a", 0.4, true),
                record("b", 0.4, false),
                record("c", 1.4, false),
            ],
        )
        .unwrap();
        assert!((report.success_rate().unwrap() - 1.0 / 3.0).abs() < 1e-12);
        let bins = report.success_by_length(0.5).unwrap();
        assert_eq!(bins.len(), 2); // empty middle bin omitted
        assert_eq!(bins[0].count, 2);
        assert_eq!(bins[0].successes, 1);
        assert_eq!(bins[1].count, 1);
        assert_eq!(bins[1].rate, 0.0);
        let total: usize = bins.iter().map(|b| b.count).sum();
        assert_eq!(total, report.records.len());
    }

    #[test]
    fn single_bin_equals_overall_rate() {
        let report = AttackReport::new(
            Some("x".into()),
            vec![record("a", 0.1, true), record("b", 0.2, false)],
        )
        .unwrap();
        let bins = report.success_by_length(10.0).unwrap();
        assert_eq!(bins.len(), 1);
        assert!((bins[0].rate - report.success_rate().unwrap()).abs() < 1e-12);
    }

    #[test]
    fn csv_is_stable_and_quoted() {
        let mut r = record("a", 0.4, true);
        r.reference = "with,comma".into();
        let report = AttackReport::new(Some("x".into()), vec![r]).unwrap();
        let csv = report.to_csv();
        assert!(csv.starts_with("id,seconds,reference"));
        assert!(csv.contains("\"with,comma\""));
        assert!(csv.contains("aggregate,success_rate,1.000000"));
    }
}
