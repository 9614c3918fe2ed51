//! Quadratic weighted kappa and score reports.

use std::fmt;

use serde::Serialize;

use crate::data::{Trait, TRAIT_COUNT};
use crate::error::{Error, Result};

/// Observed agreement counts: `counts[i][j]` is the number of items with true
/// category `i` and predicted category `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n: usize) -> Self {
        ConfusionMatrix {
            n,
            counts: vec![0; n * n],
        }
    }

    pub fn from_labels(y_true: &[usize], y_pred: &[usize], n: usize) -> Result<Self> {
        if y_true.len() != y_pred.len() {
            return Err(Error::arg(format!(
                "{} true labels but {} predictions",
                y_true.len(),
                y_pred.len()
            )));
        }
        let mut m = ConfusionMatrix::new(n);
        for (&t, &p) in y_true.iter().zip(y_pred) {
            if t >= n || p >= n {
                return Err(Error::arg(format!(
                    "category ({t}, {p}) outside [0, {n})"
                )));
            }
            m.counts[t * n + p] += 1;
        }
        Ok(m)
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> u64 {
        self.counts[i * self.n + j]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_marginals(&self) -> Vec<u64> {
        (0..self.n)
            .map(|i| (0..self.n).map(|j| self.get(i, j)).sum())
            .collect()
    }

    pub fn col_marginals(&self) -> Vec<u64> {
        (0..self.n)
            .map(|j| (0..self.n).map(|i| self.get(i, j)).sum())
            .collect()
    }
}

/// `w[i][j] = (i - j)^2 / (N - 1)^2`, row-major `N x N`.
pub fn weight_matrix(n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::arg(format!("weight matrix needs N >= 2, got {n}")));
    }
    let denom = ((n - 1) * (n - 1)) as f64;
    Ok((0..n * n)
        .map(|k| {
            let d = (k / n) as f64 - (k % n) as f64;
            d * d / denom
        })
        .collect())
}

/// Chance agreement: outer product of the marginals divided by the total,
/// row-major `N x N`.
pub fn expected_matrix(observed: &ConfusionMatrix) -> Result<Vec<f64>> {
    let total = observed.total();
    if total == 0 {
        return Err(Error::arg("expected matrix of an empty confusion matrix"));
    }
    let rows = observed.row_marginals();
    let cols = observed.col_marginals();
    let total = total as f64;
    Ok(rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| r as f64 * c as f64 / total))
        .collect())
}

/// Quadratic weighted kappa between two label lists over `n` categories.
///
/// Returns 1.0 when the chance-weighted disagreement is zero, which only
/// happens when both lists hold the same single category.
pub fn qwk(y_true: &[usize], y_pred: &[usize], n: usize) -> Result<f64> {
    if y_true.is_empty() {
        return Err(Error::arg("kappa of empty label lists"));
    }
    let observed = ConfusionMatrix::from_labels(y_true, y_pred, n)?;
    let w = weight_matrix(n)?;
    let e = expected_matrix(&observed)?;
    let num: f64 = w
        .iter()
        .zip(&observed.counts)
        .map(|(w, &o)| w * o as f64)
        .sum();
    let den: f64 = w.iter().zip(&e).map(|(w, e)| w * e).sum();
    if den == 0.0 {
        return Ok(1.0);
    }
    Ok(1.0 - num / den)
}

/// Agreement bands for kappa values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum KappaBand {
    None,
    Slight,
    Fair,
    Moderate,
    Substantial,
    AlmostPerfect,
}

impl KappaBand {
    pub fn label(self) -> &'static str {
        match self {
            KappaBand::None => "No agreement",
            KappaBand::Slight => "Slight agreement",
            KappaBand::Fair => "Fair agreement",
            KappaBand::Moderate => "Moderate agreement",
            KappaBand::Substantial => "Substantial agreement",
            KappaBand::AlmostPerfect => "Almost perfect agreement",
        }
    }
}

impl fmt::Display for KappaBand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Band for a kappa value. Bands are closed at their upper edge; the gaps
/// between the tabulated ranges (e.g. 0.20..0.21) fall to the upper band and
/// `[0, 0.01)` counts as slight agreement.
pub fn interpret_kappa(kappa: f64) -> Result<KappaBand> {
    const SLACK: f64 = 1e-9;
    if !(-1.0 - SLACK..=1.0 + SLACK).contains(&kappa) {
        return Err(Error::arg(format!("kappa {kappa} outside [-1, 1]")));
    }
    Ok(if kappa < 0.0 {
        KappaBand::None
    } else if kappa <= 0.20 {
        KappaBand::Slight
    } else if kappa <= 0.40 {
        KappaBand::Fair
    } else if kappa <= 0.60 {
        KappaBand::Moderate
    } else if kappa <= 0.80 {
        KappaBand::Substantial
    } else {
        KappaBand::AlmostPerfect
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraitKappa {
    pub kappa: f64,
    pub band: KappaBand,
}

/// Per-trait kappas and their average.
#[derive(Debug, Clone, PartialEq)]
pub struct QwkReport {
    /// Indexed in [`Trait::ALL`] order.
    pub traits: Vec<TraitKappa>,
    pub average: f64,
}

impl QwkReport {
    /// Builds a report from per-trait true and predicted categories
    /// (`[trait][item]`).
    pub fn from_categories(y_true: &[Vec<usize>], y_pred: &[Vec<usize>], n: usize) -> Result<Self> {
        if y_true.len() != TRAIT_COUNT || y_pred.len() != TRAIT_COUNT {
            return Err(Error::arg("one label list per trait required"));
        }
        let mut traits = Vec::with_capacity(TRAIT_COUNT);
        for (t, p) in y_true.iter().zip(y_pred) {
            let kappa = qwk(t, p, n)?;
            traits.push(TraitKappa {
                kappa,
                band: interpret_kappa(kappa)?,
            });
        }
        let average = traits.iter().map(|t| t.kappa).sum::<f64>() / TRAIT_COUNT as f64;
        Ok(QwkReport { traits, average })
    }

    pub fn kappa(&self, t: Trait) -> f64 {
        self.traits[t.index()].kappa
    }

    /// Column headers in reporting order.
    pub fn headers() -> Vec<&'static str> {
        let mut h = vec!["Avg. QWK"];
        h.extend(Trait::ALL.iter().map(|t| t.title()));
        h
    }

    /// JSON object keyed by `avg_qwk` and the lowercase trait names.
    pub fn to_json(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        map.insert("avg_qwk".into(), self.average.into());
        for t in Trait::ALL {
            map.insert(t.key().into(), self.kappa(t).into());
        }
        serde_json::Value::Object(map)
    }

    /// Aligned text table: headers, a QWK row, and a band per trait.
    pub fn to_table(&self) -> String {
        let headers = QwkReport::headers();
        let mut values = vec![format!("{:.3}", self.average)];
        values.extend(self.traits.iter().map(|t| format!("{:.3}", t.kappa)));
        let widths: Vec<usize> = headers
            .iter()
            .zip(&values)
            .map(|(h, v)| h.len().max(v.len()))
            .collect();
        let line = |cells: &[String]| -> String {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, &w)| format!("{c:>w$}"))
                .collect::<Vec<_>>()
                .join(" | ")
        };
        let header_cells: Vec<String> = headers.iter().map(|s| s.to_string()).collect();
        let mut out = String::new();
        out.push_str(&line(&header_cells));
        out.push('\n');
        out.push_str(
            &widths
                .iter()
                .map(|&w| "-".repeat(w))
                .collect::<Vec<_>>()
                .join("-|-"),
        );
        out.push('\n');
        out.push_str(&line(&values));
        out.push('\n');
        out.push('\n');
        let avg_band = interpret_kappa(self.average).map_or("-", KappaBand::label);
        out.push_str(&format!("{:<12} {avg_band}\n", "Average"));
        for (t, k) in Trait::ALL.iter().zip(&self.traits) {
            out.push_str(&format!("{:<12} {}\n", t.title(), k.band));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Pairwise route: sum_w O is the mean squared category gap between
    /// matched items and sum_w E the mean gap over all cross pairs.
    fn pairwise_qwk(t: &[usize], p: &[usize], n: usize) -> f64 {
        let norm = ((n - 1) * (n - 1)) as f64;
        let m = t.len() as f64;
        let wo: f64 = t
            .iter()
            .zip(p)
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2) / norm)
            .sum();
        let mut we = 0.0;
        for &a in t {
            for &b in p {
                we += (a as f64 - b as f64).powi(2) / norm;
            }
        }
        we /= m;
        if we == 0.0 {
            1.0
        } else {
            1.0 - wo / we
        }
    }

    #[test]
    fn weight_matrix_values() {
        assert_eq!(weight_matrix(2).unwrap(), vec![0.0, 1.0, 1.0, 0.0]);
        assert_eq!(
            weight_matrix(3).unwrap(),
            vec![0.0, 0.25, 1.0, 0.25, 0.0, 0.25, 1.0, 0.25, 0.0]
        );
        assert!(weight_matrix(1).is_err());
        let w = weight_matrix(9).unwrap();
        for i in 0..9 {
            for j in 0..9 {
                assert_eq!(w[i * 9 + j], w[j * 9 + i]);
            }
        }
        assert_eq!(w[8], 1.0);
    }

    #[test]
    fn expected_matrix_values() {
        let o = ConfusionMatrix::from_labels(&[0, 0, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(expected_matrix(&o).unwrap(), vec![1.0; 4]);

        let o = ConfusionMatrix::from_labels(&[1, 1, 1], &[0, 1, 2], 3).unwrap();
        let e = expected_matrix(&o).unwrap();
        assert_eq!(e, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);

        assert!(expected_matrix(&ConfusionMatrix::new(3)).is_err());
    }

    #[test]
    fn hand_value() {
        assert_eq!(qwk(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap(), 0.5);
    }

    #[test]
    fn perfect_and_degenerate() {
        assert_eq!(qwk(&[0, 3, 5, 8], &[0, 3, 5, 8], 9).unwrap(), 1.0);
        assert_eq!(qwk(&[3, 3, 3], &[3, 3, 3], 9).unwrap(), 1.0);
        assert_eq!(qwk(&[3, 3, 3], &[4, 4, 4], 9).unwrap(), 0.0);
    }

    #[test]
    fn input_errors() {
        assert!(qwk(&[0, 1], &[0], 2).is_err());
        assert!(qwk(&[0, 2], &[0, 1], 2).is_err());
        assert!(qwk(&[], &[], 2).is_err());
        assert!(qwk(&[0], &[0], 1).is_err());
    }

    #[test]
    fn reversal_gives_negative_kappa() {
        let t: Vec<usize> = (0..9).cycle().take(90).collect();
        let rev: Vec<usize> = t.iter().map(|&c| 8 - c).collect();
        assert!(qwk(&t, &rev, 9).unwrap() < 0.0);
    }

    #[test]
    fn bands() {
        assert_eq!(interpret_kappa(0.854).unwrap().label(), "Almost perfect agreement");
        assert_eq!(interpret_kappa(-0.3).unwrap().label(), "No agreement");
        assert_eq!(interpret_kappa(0.5).unwrap().label(), "Moderate agreement");
        assert_eq!(interpret_kappa(0.0).unwrap(), KappaBand::Slight);
        assert_eq!(interpret_kappa(0.2).unwrap(), KappaBand::Slight);
        assert_eq!(interpret_kappa(0.205).unwrap(), KappaBand::Fair);
        assert_eq!(interpret_kappa(0.7).unwrap(), KappaBand::Substantial);
        assert_eq!(interpret_kappa(1.0).unwrap(), KappaBand::AlmostPerfect);
        assert!(interpret_kappa(1.5).is_err());
        assert!(interpret_kappa(f64::NAN).is_err());
    }

    #[test]
    fn report_layout() {
        let t: Vec<Vec<usize>> = (0..6).map(|_| vec![0, 1, 2, 3]).collect();
        let report = QwkReport::from_categories(&t, &t, 9).unwrap();
        assert_eq!(report.average, 1.0);
        assert_eq!(
            QwkReport::headers(),
            vec!["Avg. QWK", "Cohesion", "Syntax", "Vocabulary", "Phraseology", "Grammar", "Conventions"]
        );
        let json = report.to_json();
        let keys: Vec<&String> = json.as_object().unwrap().keys().collect();
        assert_eq!(keys.len(), 7);
        for k in ["avg_qwk", "cohesion", "syntax", "vocabulary", "phraseology", "grammar", "conventions"] {
            assert_eq!(json[k], 1.0);
        }
        let table = report.to_table();
        assert!(table.starts_with("Avg. QWK | Cohesion | Syntax"));
        assert!(table.contains("Almost perfect agreement"));
    }

    fn labels() -> impl Strategy<Value = (usize, Vec<usize>, Vec<usize>)> {
        (2usize..10, 1usize..60).prop_flat_map(|(n, len)| {
            (
                Just(n),
                proptest::collection::vec(0..n, len),
                proptest::collection::vec(0..n, len),
            )
        })
    }

    proptest! {
        #[test]
        fn symmetric_bounded_and_matches_pairwise((n, t, p) in labels()) {
            let k = qwk(&t, &p, n).unwrap();
            prop_assert!((-1.0 - 1e-12..=1.0).contains(&k));
            prop_assert!((k - qwk(&p, &t, n).unwrap()).abs() < 1e-12);
            prop_assert!((k - pairwise_qwk(&t, &p, n)).abs() < 1e-12);
        }

        #[test]
        fn order_invariant((n, t, p) in labels(), rot in 0usize..60) {
            let r = rot % t.len();
            let mut t2 = t.clone();
            let mut p2 = p.clone();
            t2.rotate_left(r);
            p2.rotate_left(r);
            t2.reverse();
            p2.reverse();
            prop_assert!((qwk(&t, &p, n).unwrap() - qwk(&t2, &p2, n).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn expected_preserves_total((n, t, p) in labels()) {
            let o = ConfusionMatrix::from_labels(&t, &p, n).unwrap();
            let e = expected_matrix(&o).unwrap();
            prop_assert!((e.iter().sum::<f64>() - o.total() as f64).abs() < 1e-9);
        }
    }
}
