//! Frame-level pitch metrics and the paired t-test.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;

pub const DEFAULT_TOLERANCE_CENTS: f64 = 50.0;

/// Per-frame f0 (0 = unvoiced) and voicing in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameF0Sequence {
    pub times: Vec<f64>,
    pub f0_hz: Vec<f64>,
    pub voicing: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Row {
    time_sec: f64,
    f0_hz: f64,
    voicing: f64,
}

impl FrameF0Sequence {
    pub fn new(times: Vec<f64>, f0_hz: Vec<f64>, voicing: Vec<f64>) -> Result<Self> {
        if times.len() != f0_hz.len() || f0_hz.len() != voicing.len() {
            return Err(Error::invalid("times, f0 and voicing must have equal lengths"));
        }
        if f0_hz.iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
            return Err(Error::invalid("f0 values must be finite and >= 0"));
        }
        if voicing.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("voicing values must lie in [0, 1]"));
        }
        Ok(Self { times, f0_hz, voicing })
    }

    /// Sequence on the frame grid; binary voicing taken from `f0 > 0`.
    pub fn from_f0(tg: &TimeGrid, f0_hz: Vec<f64>) -> Result<Self> {
        let voicing = f0_hz.iter().map(|&f| (f > 0.0) as u8 as f64).collect();
        Self::with_voicing(tg, f0_hz, voicing)
    }

    pub fn with_voicing(tg: &TimeGrid, f0_hz: Vec<f64>, voicing: Vec<f64>) -> Result<Self> {
        let times = (0..f0_hz.len()).map(|i| tg.time_of(i)).collect();
        Self::new(times, f0_hz, voicing)
    }

    pub fn len(&self) -> usize {
        self.f0_hz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0_hz.is_empty()
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv_reader(File::open(path)?)
    }

    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["time_sec", "f0_hz", "voicing"] {
            return Err(Error::format("f0 CSV", "expected header `time_sec,f0_hz,voicing`"));
        }
        let (mut t, mut f, mut v) = (Vec::new(), Vec::new(), Vec::new());
        for row in rdr.deserialize() {
            let r: Row = row?;
            t.push(r.time_sec);
            f.push(r.f0_hz);
            v.push(r.voicing);
        }
        Self::new(t, f, v)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut file = File::create(path)?;
        self.to_csv_writer(&mut file)?;
        file.flush()?;
        Ok(())
    }

    pub fn to_csv_writer<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        for i in 0..self.len() {
            wtr.serialize(Row {
                time_sec: self.times[i],
                f0_hz: self.f0_hz[i],
                voicing: self.voicing[i],
            })?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn check_pair(reference: &FrameF0Sequence, estimate: &FrameF0Sequence) -> Result<()> {
    if reference.len() != estimate.len() {
        return Err(Error::invalid(format!(
            "reference has {} frames, estimate {}",
            reference.len(),
            estimate.len()
        )));
    }
    if reference.voicing.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid("reference voicing must be binary"));
    }
    if reference.f0_hz.iter().zip(&reference.voicing).any(|(&f, &v)| v == 1.0 && f <= 0.0) {
        return Err(Error::invalid("voiced reference frames need f0 > 0"));
    }
    Ok(())
}

fn pitch_correct(reference_hz: f64, estimate_hz: f64, tol_cents: f64) -> bool {
    estimate_hz > 0.0 && (1200.0 * (estimate_hz / reference_hz).log2()).abs() <= tol_cents
}

/// Raw pitch accuracy: the fraction of reference-voiced frames whose
/// estimated pitch is within `tol_cents`. `None` without voiced frames.
pub fn rpa(reference: &FrameF0Sequence, estimate: &FrameF0Sequence, tol_cents: f64) -> Result<Option<f64>> {
    check_pair(reference, estimate)?;
    let voiced: Vec<usize> = (0..reference.len()).filter(|&i| reference.voicing[i] == 1.0).collect();
    if voiced.is_empty() {
        return Ok(None);
    }
    let hits = voiced
        .iter()
        .filter(|&&i| pitch_correct(reference.f0_hz[i], estimate.f0_hz[i], tol_cents))
        .count();
    Ok(Some(hits as f64 / voiced.len() as f64))
}

/// Overall accuracy with continuous estimated voicing: a voiced reference
/// frame earns the estimated voicing when the pitch is right (else 0), an
/// unvoiced one earns `1 - voicing`.
pub fn oa(reference: &FrameF0Sequence, estimate: &FrameF0Sequence, tol_cents: f64) -> Result<f64> {
    check_pair(reference, estimate)?;
    if reference.is_empty() {
        return Err(Error::invalid("overall accuracy of an empty sequence"));
    }
    let credit: f64 = (0..reference.len())
        .map(|i| {
            if reference.voicing[i] == 1.0 {
                if pitch_correct(reference.f0_hz[i], estimate.f0_hz[i], tol_cents) {
                    estimate.voicing[i]
                } else {
                    0.0
                }
            } else {
                1.0 - estimate.voicing[i]
            }
        })
        .sum();
    Ok(credit / reference.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedT {
    pub n: usize,
    pub mean_difference: f64,
    pub t: Option<f64>,
    /// Two-sided p-value.
    pub p: Option<f64>,
    pub note: Option<String>,
}

/// Paired t-test on `a - b`.
pub fn paired_t(pairs: &[(f64, f64)]) -> Result<PairedT> {
    let n = pairs.len();
    if n < 2 {
        return Err(Error::invalid("a paired t-test needs at least two pairs"));
    }
    let d: Vec<f64> = pairs.iter().map(|(a, b)| a - b).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 || !var.is_finite() {
        return Ok(PairedT {
            n,
            mean_difference: mean,
            t: None,
            p: None,
            note: Some("differences have zero variance; t is undefined".into()),
        });
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| Error::invalid(e.to_string()))?;
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok(PairedT {
        n,
        mean_difference: mean,
        t: Some(t),
        p: Some(p),
        note: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(f0: &[f64], voicing: &[f64]) -> FrameF0Sequence {
        FrameF0Sequence::new((0..f0.len()).map(|i| i as f64 * 0.01).collect(), f0.to_vec(), voicing.to_vec()).unwrap()
    }

    fn cents(f: &[f64], c: f64) -> Vec<f64> {
        f.iter().map(|x| x * 2f64.powf(c / 1200.0)).collect()
    }

    #[test]
    fn rpa_examples() {
        let f = [220.0, 0.0, 330.0, 440.0];
        let v = [1.0, 0.0, 1.0, 1.0];
        let r = seq(&f, &v);
        assert_eq!(rpa(&r, &r, 50.0).unwrap(), Some(1.0));
        assert_eq!(rpa(&r, &seq(&cents(&f, 1200.0), &v), 50.0).unwrap(), Some(0.0));
        assert_eq!(rpa(&r, &seq(&cents(&f, 49.0), &v), 50.0).unwrap(), Some(1.0));
        assert_eq!(rpa(&r, &seq(&cents(&f, -51.0), &v), 50.0).unwrap(), Some(0.0));
        let silent = seq(&[0.0, 0.0], &[0.0, 0.0]);
        assert_eq!(rpa(&silent, &silent, 50.0).unwrap(), None);
        assert!(rpa(&r, &silent, 50.0).is_err());
    }

    #[test]
    fn oa_examples() {
        let f = [220.0, 0.0, 330.0];
        let v = [1.0, 0.0, 1.0];
        let r = seq(&f, &v);
        assert_eq!(oa(&r, &r, 50.0).unwrap(), 1.0);
        let all_voiced = seq(&[220.0, 330.0], &[1.0, 1.0]);
        assert_eq!(oa(&all_voiced, &seq(&[220.0, 330.0], &[0.5, 0.5]), 50.0).unwrap(), 0.5);
        let silent = seq(&[0.0, 0.0], &[0.0, 0.0]);
        assert_eq!(oa(&silent, &silent, 50.0).unwrap(), 1.0);
        assert!(oa(&seq(&f, &[1.0, 0.5, 1.0]), &r, 50.0).is_err());
    }

    #[test]
    fn paired_t_examples() {
        let same = paired_t(&[(1.0, 1.0), (2.0, 2.0), (0.5, 0.5)]).unwrap();
        assert!(same.t.is_none() && same.p.is_none() && same.note.is_some());

        let diffs = [1.0, 1.0, 1.0, 0.9, 1.1];
        let pairs: Vec<(f64, f64)> = diffs.iter().map(|&d| (d + 2.0, 2.0)).collect();
        let r = paired_t(&pairs).unwrap();
        let sd = (0.02f64 / 4.0).sqrt();
        let t = 1.0 / (sd / 5f64.sqrt());
        assert!((r.t.unwrap() - t).abs() < 1e-9);
        assert!(r.p.unwrap() < 1e-5);

        let swapped: Vec<(f64, f64)> = pairs.iter().map(|&(a, b)| (b, a)).collect();
        let s = paired_t(&swapped).unwrap();
        assert_eq!(s.t.unwrap(), -r.t.unwrap());
        assert_eq!(s.p, r.p);
        assert!(paired_t(&[(1.0, 0.0)]).is_err());
    }

    #[test]
    fn p_value_matches_reference_table() {
        // two-sided p for t = 2.0 on 4 dof is 0.116117...
        let pairs = [(2.0, 0.0), (1.0, 0.0), (3.0, 0.0), (2.0, 0.0), (2.0, 0.0)];
        let r = paired_t(&pairs).unwrap();
        let t = r.t.unwrap();
        let dist = StudentsT::new(0.0, 1.0, 4.0).unwrap();
        assert!((r.p.unwrap() - 2.0 * (1.0 - dist.cdf(t))).abs() < 1e-12);
        let at_two = 2.0 * (1.0 - dist.cdf(2.0));
        assert!((at_two - 0.116_117).abs() < 1e-5);
    }

    #[test]
    fn csv_round_trip() {
        let r = seq(&[220.0, 0.0], &[1.0, 0.0]);
        let mut buf = Vec::new();
        r.to_csv_writer(&mut buf).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().starts_with("time_sec,f0_hz,voicing\n"));
        assert_eq!(FrameF0Sequence::from_csv_reader(buf.as_slice()).unwrap(), r);
    }

    proptest! {
        #[test]
        fn metric_invariances(
            frames in prop::collection::vec((100.0f64..800.0, -300.0f64..300.0, any::<bool>(), 0.0f64..=1.0), 1..40),
            shift in -600.0f64..600.0,
            extra in 0usize..10,
        ) {
            // keep every estimate clear of the tolerance edge
            let frames: Vec<_> = frames.into_iter().filter(|f| (f.1.abs() - 50.0).abs() > 1e-3).collect();
            prop_assume!(!frames.is_empty());
            let rf: Vec<f64> = frames.iter().map(|f| if f.2 { f.0 } else { 0.0 }).collect();
            let rv: Vec<f64> = frames.iter().map(|f| f.2 as u8 as f64).collect();
            let ef: Vec<f64> = frames.iter().map(|f| f.0 * 2f64.powf(f.1 / 1200.0)).collect();
            let ev: Vec<f64> = frames.iter().map(|f| f.3).collect();
            let (r, e) = (seq(&rf, &rv), seq(&ef, &ev));
            let base_rpa = rpa(&r, &e, 50.0).unwrap();
            let base_oa = oa(&r, &e, 50.0).unwrap();
            prop_assert!(base_rpa.is_none_or(|x| (0.0..=1.0).contains(&x)));
            prop_assert!((0.0..=1.0).contains(&base_oa));

            let moved = rpa(&seq(&cents(&rf, shift), &rv), &seq(&cents(&ef, shift), &ev), 50.0).unwrap();
            prop_assert_eq!(moved, base_rpa);

            let mut rf2 = rf.clone(); rf2.extend(std::iter::repeat_n(0.0, extra));
            let mut rv2 = rv.clone(); rv2.extend(std::iter::repeat_n(0.0, extra));
            let mut ef2 = ef.clone(); ef2.extend(std::iter::repeat_n(0.0, extra));
            let mut ev2 = ev.clone(); ev2.extend(std::iter::repeat_n(0.0, extra));
            let (r2, e2) = (seq(&rf2, &rv2), seq(&ef2, &ev2));
            prop_assert_eq!(rpa(&r2, &e2, 50.0).unwrap(), base_rpa);
            let n = rf.len() as f64;
            let expect = (base_oa * n + extra as f64) / (n + extra as f64);
            prop_assert!((oa(&r2, &e2, 50.0).unwrap() - expect).abs() < 1e-12);
        }
    }
}
