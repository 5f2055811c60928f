//! Evaluation on top of a trained scorer: ranked listings, two-sample
//! t-tests, agreement-group score gaps, and learning curves.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::{csv_writer, Choice, Response};
use crate::net::{self, ArchitectureSpec, NetError, NetworkParams};
use crate::ranktrain::{self, PairSet, TrainConfig, TrainError};
use crate::stats;
use crate::voxel::VoxelGrid;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("group {group} needs at least 2 samples, got {n}")]
    TooFewSamples { group: usize, n: usize },
    #[error("pair {pair_id} has {n} response(s); at least 2 are needed")]
    TooFewResponses { pair_id: String, n: usize },
    #[error("no score for shape {0:?}")]
    UnknownShape(String),
    #[error("fractions must be strictly increasing within (0, 1]: {0:?}")]
    BadFractions(Vec<f64>),
    #[error("fraction {0} leaves no training pairs")]
    EmptyTraining(f64),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Shapes in descending score order; equal scores are ordered by id.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub entries: Vec<(String, f64)>,
}

impl RankedList {
    pub fn from_scores(mut entries: Vec<(String, f64)>) -> Self {
        entries.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        RankedList { entries }
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(id, _)| id.as_str())
    }

    /// CSV: `rank,shape_id,score`, rank starting at 1.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv_writer(out);
        w.write_record(["rank", "shape_id", "score"])?;
        for (i, (id, s)) in self.entries.iter().enumerate() {
            w.write_record([(i + 1).to_string(), id.clone(), format!("{s}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Scores every grid and sorts by descending score.
pub fn rank_shapes(params: &NetworkParams, grids: &[VoxelGrid]) -> Result<RankedList, AnalysisError> {
    let entries = grids
        .par_iter()
        .map(|g| Ok((g.shape_id().to_string(), net::score(params, g)?)))
        .collect::<Result<Vec<_>, NetError>>()?;
    Ok(RankedList::from_scores(entries))
}

/// Summary statistics of one group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupSummary {
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator).
    pub std: f64,
    pub n: usize,
}

impl GroupSummary {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        GroupSummary {
            mean,
            std: var.sqrt(),
            n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTestResult {
    pub t: f64,
    pub df: usize,
    /// Two-sided.
    pub p: f64,
    pub group1: GroupSummary,
    pub group2: GroupSummary,
}

impl fmt::Display for TTestResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t = {:.4}, df = {}, p = {:.3e}", self.t, self.df, self.p)
    }
}

impl TTestResult {
    /// CSV: header plus one row.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv_writer(out);
        w.write_record(["t", "df", "p", "mean1", "std1", "n1", "mean2", "std2", "n2"])?;
        w.write_record([
            format!("{}", self.t),
            self.df.to_string(),
            format!("{:e}", self.p),
            format!("{}", self.group1.mean),
            format!("{}", self.group1.std),
            self.group1.n.to_string(),
            format!("{}", self.group2.mean),
            format!("{}", self.group2.std),
            self.group2.n.to_string(),
        ])?;
        w.flush()?;
        Ok(())
    }
}

/// Two-sample t-test with pooled (equal) variance, from summary statistics.
pub fn ttest_equal_var(g1: GroupSummary, g2: GroupSummary) -> Result<TTestResult, AnalysisError> {
    for (group, g) in [(1, &g1), (2, &g2)] {
        if g.n < 2 {
            return Err(AnalysisError::TooFewSamples { group, n: g.n });
        }
    }
    let (n1, n2) = (g1.n as f64, g2.n as f64);
    let df = g1.n + g2.n - 2;
    let pooled = ((n1 - 1.0) * g1.std * g1.std + (n2 - 1.0) * g2.std * g2.std) / df as f64;
    let diff = g1.mean - g2.mean;
    let se = (pooled * (1.0 / n1 + 1.0 / n2)).sqrt();
    let t = if se == 0.0 {
        if diff == 0.0 {
            0.0
        } else {
            diff.signum() * f64::INFINITY
        }
    } else {
        diff / se
    };
    let p = stats::student_t_two_sided(t, df as f64).clamp(0.0, 1.0);
    Ok(TTestResult {
        t,
        df,
        p,
        group1: g1,
        group2: g2,
    })
}

/// [`ttest_equal_var`] on raw samples.
pub fn ttest_samples(xs: &[f64], ys: &[f64]) -> Result<TTestResult, AnalysisError> {
    ttest_equal_var(GroupSummary::from_samples(xs), GroupSummary::from_samples(ys))
}

/// Majority-share groups: exactly 50%, then 10-point bands up to 100%.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AgreementBin {
    Half,
    To60,
    To70,
    To80,
    To90,
    To100,
}

impl AgreementBin {
    pub const ALL: [AgreementBin; 6] = [
        AgreementBin::Half,
        AgreementBin::To60,
        AgreementBin::To70,
        AgreementBin::To80,
        AgreementBin::To90,
        AgreementBin::To100,
    ];

    /// Bin for a pair with `majority` of `total` responses on the more common side.
    pub fn classify(majority: usize, total: usize) -> AgreementBin {
        if 2 * majority == total {
            return AgreementBin::Half;
        }
        // Compare 100 * majority / total against band edges without rounding.
        let pct100 = 100 * majority;
        if pct100 <= 60 * total {
            AgreementBin::To60
        } else if pct100 <= 70 * total {
            AgreementBin::To70
        } else if pct100 <= 80 * total {
            AgreementBin::To80
        } else if pct100 <= 90 * total {
            AgreementBin::To90
        } else {
            AgreementBin::To100
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            AgreementBin::Half => "50%",
            AgreementBin::To60 => "51-60%",
            AgreementBin::To70 => "61-70%",
            AgreementBin::To80 => "71-80%",
            AgreementBin::To90 => "81-90%",
            AgreementBin::To100 => "91-100%",
        }
    }
}

impl fmt::Display for AgreementBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapBin {
    pub bin: AgreementBin,
    pub n_pairs: usize,
    pub mean_diff: f64,
}

/// Per-bin statistics; bins with no pairs are absent.
#[derive(Debug, Clone, PartialEq)]
pub struct GapReport {
    pub bins: Vec<GapBin>,
}

impl GapReport {
    pub fn get(&self, bin: AgreementBin) -> Option<&GapBin> {
        self.bins.iter().find(|b| b.bin == bin)
    }

    /// CSV: `bin,n_pairs,mean_diff`.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv_writer(out);
        w.write_record(["bin", "n_pairs", "mean_diff"])?;
        for b in &self.bins {
            w.write_record([b.bin.label().to_string(), b.n_pairs.to_string(), format!("{}", b.mean_diff)])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Groups multi-response pairs by majority share and averages
/// `score(majority choice) - score(minority choice)` per group (the absolute
/// difference for 50/50 ties). Control responses are ignored.
pub fn agreement_gap_analysis(responses: &[Response], scores: &BTreeMap<String, f64>) -> Result<GapReport, AnalysisError> {
    struct Tally<'a> {
        a: &'a str,
        b: &'a str,
        count_a: usize,
        count_b: usize,
    }
    let mut pairs: BTreeMap<&str, Tally> = BTreeMap::new();
    for r in responses.iter().filter(|r| !r.pair.is_control) {
        let t = pairs.entry(r.pair.pair_id.as_str()).or_insert(Tally {
            a: &r.pair.shape_a,
            b: &r.pair.shape_b,
            count_a: 0,
            count_b: 0,
        });
        match r.choice {
            Choice::A => t.count_a += 1,
            Choice::B => t.count_b += 1,
        }
    }
    let score = |id: &str| scores.get(id).copied().ok_or_else(|| AnalysisError::UnknownShape(id.to_string()));
    let mut sums: BTreeMap<AgreementBin, (f64, usize)> = BTreeMap::new();
    for (pair_id, t) in &pairs {
        let total = t.count_a + t.count_b;
        if total < 2 {
            return Err(AnalysisError::TooFewResponses {
                pair_id: pair_id.to_string(),
                n: total,
            });
        }
        let a_minus_b = score(t.a)? - score(t.b)?;
        let diff = match t.count_a.cmp(&t.count_b) {
            std::cmp::Ordering::Greater => a_minus_b,
            std::cmp::Ordering::Less => -a_minus_b,
            std::cmp::Ordering::Equal => a_minus_b.abs(),
        };
        let bin = AgreementBin::classify(t.count_a.max(t.count_b), total);
        let e = sums.entry(bin).or_insert((0.0, 0));
        e.0 += diff;
        e.1 += 1;
    }
    Ok(GapReport {
        bins: sums
            .into_iter()
            .map(|(bin, (sum, n))| GapBin {
                bin,
                n_pairs: n,
                mean_diff: sum / n as f64,
            })
            .collect(),
    })
}

/// Scores of every grid, keyed by shape id.
pub fn score_map(params: &NetworkParams, grids: &BTreeMap<String, VoxelGrid>) -> Result<BTreeMap<String, f64>, AnalysisError> {
    let scored: Vec<(String, f64)> = grids
        .par_iter()
        .map(|(id, g)| Ok((id.clone(), net::score(params, g)?)))
        .collect::<Result<_, NetError>>()?;
    Ok(scored.into_iter().collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub fraction: f64,
    pub n_train: usize,
    pub accuracy: f64,
}

/// CSV: `fraction,n_train,accuracy`.
pub fn write_curve_csv<W: Write>(points: &[CurvePoint], out: W) -> csv::Result<()> {
    let mut w = csv_writer(out);
    w.write_record(["fraction", "n_train", "accuracy"])?;
    for p in points {
        w.write_record([format!("{}", p.fraction), p.n_train.to_string(), format!("{}", p.accuracy)])?;
    }
    w.flush()?;
    Ok(())
}

/// Trains from the same initialization on growing prefixes of `train`
/// (`round(f * n)` pairs for each fraction `f`) and records full validation
/// accuracy.
pub fn learning_curve(
    spec: &ArchitectureSpec,
    train: &PairSet,
    validation: &PairSet,
    fractions: &[f64],
    config: &TrainConfig,
) -> Result<Vec<CurvePoint>, AnalysisError> {
    let increasing = fractions.windows(2).all(|w| w[0] < w[1]);
    if fractions.is_empty() || !increasing || fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
        return Err(AnalysisError::BadFractions(fractions.to_vec()));
    }
    let sizes: Vec<usize> = fractions.iter().map(|f| (f * train.len() as f64).round() as usize).collect();
    if let Some(i) = sizes.iter().position(|&n| n == 0) {
        return Err(AnalysisError::EmptyTraining(fractions[i]));
    }
    let init = net::init_params(spec, config.seed);
    fractions
        .par_iter()
        .zip(&sizes)
        .map(|(&fraction, &n)| {
            let (params, _) = ranktrain::train(init.clone(), &train.prefix(n), config, None)?;
            let acc = ranktrain::validation_accuracy(&params, validation, config.filter_fraction)?;
            Ok(CurvePoint {
                fraction,
                n_train: n,
                accuracy: acc.full,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::PairSample;
    use proptest::prelude::*;

    fn g(mean: f64, std: f64, n: usize) -> GroupSummary {
        GroupSummary { mean, std, n }
    }

    #[test]
    fn published_group_tests() {
        let r = ttest_equal_var(g(0.2031, 0.2286, 67), g(-0.0598, 0.2308, 11)).unwrap();
        assert!((r.t - 3.5305).abs() < 1e-3, "{}", r.t);
        assert!(r.p < 1e-3);
        assert_eq!(r.df, 76);
        let r = ttest_equal_var(g(0.0558, 0.1733, 218), g(-0.0552, 0.1577, 49)).unwrap();
        assert!((r.t - 4.1155).abs() < 1e-3, "{}", r.t);
        assert!(r.p < 1e-4);
    }

    #[test]
    fn ttest_edge_cases() {
        let same = ttest_samples(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(same.t, 0.0);
        assert_eq!(same.p, 1.0);
        let flat = ttest_samples(&[2.0, 2.0], &[2.0, 2.0]).unwrap();
        assert_eq!(flat.t, 0.0);
        assert!(matches!(
            ttest_samples(&[1.0], &[1.0, 2.0]),
            Err(AnalysisError::TooFewSamples { group: 1, n: 1 })
        ));
    }

    #[test]
    fn p_value_matches_statrs() {
        use statrs::distribution::{ContinuousCDF, StudentsT};
        for &(t, df) in &[(0.3, 3.0), (1.7, 12.0), (3.5305, 76.0), (4.1155, 265.0), (-2.2, 5.0), (8.0, 40.0)] {
            let ours = stats::student_t_two_sided(t, df);
            let dist = StudentsT::new(0.0, 1.0, df).unwrap();
            let theirs = 2.0 * (1.0 - dist.cdf(f64::abs(t)));
            assert!((ours - theirs).abs() < 1e-9 * theirs.max(1e-300) + 1e-14, "t={t} df={df}: {ours} vs {theirs}");
        }
    }

    proptest! {
        #[test]
        fn ttest_antisymmetric(xs in prop::collection::vec(-5.0f64..5.0, 2..20), ys in prop::collection::vec(-5.0f64..5.0, 2..20)) {
            let ab = ttest_samples(&xs, &ys).unwrap();
            let ba = ttest_samples(&ys, &xs).unwrap();
            prop_assert!((ab.t + ba.t).abs() <= 1e-12 * ab.t.abs().max(1.0));
            prop_assert!((0.0..=1.0).contains(&ab.p));
        }

        #[test]
        fn ranking_is_invariant_to_increasing_affine_maps(
            scores in prop::collection::vec(-3.0f64..3.0, 1..30),
            scale in 0.1f64..10.0,
            shift in -5.0f64..5.0,
        ) {
            let ids: Vec<(String, f64)> = scores.iter().enumerate().map(|(i, &s)| (format!("s{i:02}"), s)).collect();
            let base = RankedList::from_scores(ids.clone());
            let moved = RankedList::from_scores(ids.iter().map(|(id, s)| (id.clone(), s * scale + shift)).collect());
            let a: Vec<&str> = base.ids().collect();
            let b: Vec<&str> = moved.ids().collect();
            // Affine maps can merge nearly equal floats; only compare when no collisions occur.
            let distinct = |l: &RankedList| l.entries.windows(2).all(|w| w[0].1 != w[1].1);
            if distinct(&base) && distinct(&moved) {
                prop_assert_eq!(a, b);
            }
            let mut sorted: Vec<String> = base.ids().map(String::from).collect();
            sorted.sort();
            let mut orig: Vec<String> = ids.into_iter().map(|(id, _)| id).collect();
            orig.sort();
            prop_assert_eq!(sorted, orig);
        }
    }

    #[test]
    fn zero_params_rank_by_id() {
        let spec = ArchitectureSpec::full(4, vec![64, 5, 1]).unwrap();
        let params = NetworkParams::zeros(&spec);
        let grids: Vec<VoxelGrid> = ["c", "a", "b"].iter().map(|id| VoxelGrid::empty(*id, 4)).collect();
        let r = rank_shapes(&params, &grids).unwrap();
        assert_eq!(r.ids().collect::<Vec<_>>(), ["a", "b", "c"]);
        assert_eq!(rank_shapes(&params, &grids[..1]).unwrap().entries.len(), 1);
        let wrong = [VoxelGrid::empty("x", 5)];
        assert!(rank_shapes(&params, &wrong).is_err());
    }

    fn votes(pair_id: &str, a: &str, b: &str, n_a: usize, n_b: usize) -> Vec<Response> {
        let pair = PairSample {
            pair_id: pair_id.into(),
            shape_a: a.into(),
            shape_b: b.into(),
            is_control: false,
        };
        (0..n_a + n_b)
            .map(|i| Response {
                hit_id: "h".into(),
                pair: pair.clone(),
                worker_id: format!("w{i}"),
                choice: if i < n_a { Choice::A } else { Choice::B },
                elapsed_ms: 4000,
                timestamp_ms: i as u64,
            })
            .collect()
    }

    #[test]
    fn bin_classification() {
        assert_eq!(AgreementBin::classify(5, 10), AgreementBin::Half);
        assert_eq!(AgreementBin::classify(6, 10), AgreementBin::To60);
        assert_eq!(AgreementBin::classify(7, 10), AgreementBin::To70);
        assert_eq!(AgreementBin::classify(9, 10), AgreementBin::To90);
        assert_eq!(AgreementBin::classify(10, 10), AgreementBin::To100);
        assert_eq!(AgreementBin::classify(2, 3), AgreementBin::To70);
    }

    #[test]
    fn gap_signs_and_absent_bins() {
        let scores: BTreeMap<String, f64> = [("x", 0.5), ("y", -0.25), ("z", 0.0)].iter().map(|(k, v)| (k.to_string(), *v)).collect();
        let mut rs = votes("p1", "x", "y", 5, 5);
        rs.extend(votes("p2", "y", "x", 10, 0));
        rs.extend(votes("p3", "z", "y", 1, 9));
        let report = agreement_gap_analysis(&rs, &scores).unwrap();
        assert_eq!(report.get(AgreementBin::Half).unwrap().mean_diff, 0.75);
        let top = report.get(AgreementBin::To100).unwrap();
        assert_eq!(top.n_pairs, 1);
        assert_eq!(top.mean_diff, -0.75);
        assert_eq!(report.get(AgreementBin::To90).unwrap().mean_diff, -0.25);
        assert!(report.get(AgreementBin::To60).is_none());
        assert_eq!(report.bins.len(), 3);
        // Supplying pairs in another order gives identical means.
        let mut reversed = rs.clone();
        reversed.reverse();
        assert_eq!(agreement_gap_analysis(&reversed, &scores).unwrap(), report);
        assert!(matches!(
            agreement_gap_analysis(&votes("p", "x", "y", 1, 0), &scores),
            Err(AnalysisError::TooFewResponses { .. })
        ));
    }

    #[test]
    fn curve_fraction_rules() {
        let spec = ArchitectureSpec::full(2, vec![8, 3, 1]).unwrap();
        let set = ranktrain::random_pair_set(&spec, 10, 1);
        let cfg = TrainConfig::default();
        assert!(matches!(learning_curve(&spec, &set, &set, &[0.0], &cfg), Err(AnalysisError::BadFractions(_))));
        assert!(matches!(learning_curve(&spec, &set, &set, &[0.5, 0.5], &cfg), Err(AnalysisError::BadFractions(_))));
        assert!(matches!(learning_curve(&spec, &set, &set, &[0.01, 1.0], &cfg), Err(AnalysisError::EmptyTraining(_))));
        let curve = learning_curve(&spec, &set, &set, &[1.0], &cfg).unwrap();
        let (p, _) = ranktrain::train(net::init_params(&spec, cfg.seed), &set, &cfg, None).unwrap();
        let direct = ranktrain::validation_accuracy(&p, &set, cfg.filter_fraction).unwrap().full;
        assert_eq!(curve[0].accuracy, direct);
        assert_eq!(curve[0].n_train, 10);
    }
}
