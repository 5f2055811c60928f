//! Pairwise preference data: crowd task batches with control questions,
//! response logs, consistency checks, train/validation splits, and synthetic
//! shapes with oracle labels.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ranktrain::{PairSet, TrainError};
use crate::voxel::VoxelGrid;

/// Tasks per crowd batch.
pub const TASKS_PER_HIT: usize = 30;
/// Control questions per crowd batch.
pub const CONTROLS_PER_HIT: usize = 5;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("need at least {needed} {what}, got {got}")]
    Insufficient {
        what: &'static str,
        needed: usize,
        got: usize,
    },
    #[error("no response for task {0}")]
    MissingResponse(String),
    #[error("validation fraction must lie in (0, 1), got {0}")]
    BadFraction(f64),
    #[error("no responses to split")]
    NoResponses,
    #[error("pair {0} appears in only one group")]
    UnmatchedPair(String),
    #[error("invalid choice {0:?} (expected A or B)")]
    BadChoice(String),
    #[error("unknown shape family {0:?}")]
    BadFamily(String),
    #[error("no latent score for shape {0:?}")]
    MissingScore(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Choice {
    A,
    B,
}

impl Choice {
    pub fn other(self) -> Choice {
        match self {
            Choice::A => Choice::B,
            Choice::B => Choice::A,
        }
    }
}

impl fmt::Display for Choice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Choice::A => "A",
            Choice::B => "B",
        })
    }
}

impl FromStr for Choice {
    type Err = DatasetError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "A" | "a" => Ok(Choice::A),
            "B" | "b" => Ok(Choice::B),
            other => Err(DatasetError::BadChoice(other.to_string())),
        }
    }
}

/// An ordered pair of shapes of one class shown together as one task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSample {
    pub pair_id: String,
    pub shape_a: String,
    pub shape_b: String,
    #[serde(default)]
    pub is_control: bool,
}

impl PairSample {
    pub fn shape(&self, choice: Choice) -> &str {
        match choice {
            Choice::A => &self.shape_a,
            Choice::B => &self.shape_b,
        }
    }
}

/// One recorded choice, with everything needed to write a log row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    pub hit_id: String,
    pub pair: PairSample,
    pub worker_id: String,
    pub choice: Choice,
    /// Time between serving the task and receiving the choice.
    pub elapsed_ms: u64,
    pub timestamp_ms: u64,
}

impl Response {
    pub fn preferred(&self) -> &str {
        self.pair.shape(self.choice)
    }

    pub fn rejected(&self) -> &str {
        self.pair.shape(self.choice.other())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demographics {
    pub gender: Option<String>,
    pub age_group: Option<String>,
    pub region: Option<String>,
}

/// Age brackets offered to participants.
pub const AGE_GROUPS: [&str; 6] = ["0-20", "21-30", "31-40", "41-50", "51-60", "60-100"];
/// Regions offered to participants.
pub const REGIONS: [&str; 6] = ["Africa", "Asia", "Australia", "Europe", "North America", "South America"];

/// One crowd batch: 30 tasks, 5 of them hidden controls.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HitBatch {
    pub hit_id: String,
    pub tasks: Vec<PairSample>,
    #[serde(default)]
    pub demographics: Option<Demographics>,
}

/// Knows which shapes are the intentionally ugly ones.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlKey {
    pub ugly_shapes: BTreeSet<String>,
}

impl ControlKey {
    pub fn new<I, S>(uglies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ControlKey {
            ugly_shapes: uglies.into_iter().map(Into::into).collect(),
        }
    }

    /// The correct answer of a control task: the side that is not ugly.
    pub fn answer(&self, task: &PairSample) -> Option<Choice> {
        if !task.is_control {
            return None;
        }
        match (self.ugly_shapes.contains(&task.shape_a), self.ugly_shapes.contains(&task.shape_b)) {
            (true, false) => Some(Choice::B),
            (false, true) => Some(Choice::A),
            _ => None,
        }
    }
}

/// Builds `n_hits` batches of 25 random pairs plus 5 controls each.
///
/// Ordinary pairs are drawn without replacement within a batch (cycling only
/// when fewer than 25 distinct pairs exist); sides and task positions are
/// shuffled.
pub fn make_hits(shapes: &[String], uglies: &[String], n_hits: usize, seed: u64) -> Result<Vec<HitBatch>, DatasetError> {
    if shapes.len() < 2 {
        return Err(DatasetError::Insufficient {
            what: "non-control shapes",
            needed: 2,
            got: shapes.len(),
        });
    }
    if uglies.is_empty() {
        return Err(DatasetError::Insufficient {
            what: "ugly shapes",
            needed: 1,
            got: 0,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all_pairs = Vec::new();
    for i in 0..shapes.len() {
        for j in i + 1..shapes.len() {
            all_pairs.push((i, j));
        }
    }
    let ordinary = TASKS_PER_HIT - CONTROLS_PER_HIT;
    let mut batches = Vec::with_capacity(n_hits);
    for h in 0..n_hits {
        let hit_id = format!("hit{h:04}");
        let mut drawn: Vec<(String, String, bool)> = Vec::with_capacity(TASKS_PER_HIT);
        let mut pool = Vec::new();
        while drawn.len() < ordinary {
            if pool.is_empty() {
                pool = all_pairs.clone();
                pool.shuffle(&mut rng);
            }
            let (i, j) = pool.pop().unwrap();
            let (a, b) = if rng.random_bool(0.5) { (i, j) } else { (j, i) };
            drawn.push((shapes[a].clone(), shapes[b].clone(), false));
        }
        for _ in 0..CONTROLS_PER_HIT {
            let normal = shapes.choose(&mut rng).unwrap().clone();
            let ugly = uglies.choose(&mut rng).unwrap().clone();
            if rng.random_bool(0.5) {
                drawn.push((normal, ugly, true));
            } else {
                drawn.push((ugly, normal, true));
            }
        }
        drawn.shuffle(&mut rng);
        let tasks = drawn
            .into_iter()
            .enumerate()
            .map(|(k, (shape_a, shape_b, is_control))| PairSample {
                pair_id: format!("{hit_id}-{k:02}"),
                shape_a,
                shape_b,
                is_control,
            })
            .collect();
        batches.push(HitBatch {
            hit_id,
            tasks,
            demographics: None,
        });
    }
    Ok(batches)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HitVerdict {
    Accepted,
    Rejected,
}

/// Accepts a batch only if every control question picked the non-ugly shape.
pub fn validate_hit(batch: &HitBatch, responses: &[Response], key: &ControlKey) -> Result<HitVerdict, DatasetError> {
    let by_pair: BTreeMap<&str, &Response> = responses.iter().map(|r| (r.pair.pair_id.as_str(), r)).collect();
    let mut correct_controls = 0;
    let mut controls = 0;
    for task in &batch.tasks {
        let r = by_pair
            .get(task.pair_id.as_str())
            .ok_or_else(|| DatasetError::MissingResponse(task.pair_id.clone()))?;
        if task.is_control {
            controls += 1;
            if key.answer(task) == Some(r.choice) {
                correct_controls += 1;
            }
        }
    }
    Ok(if correct_controls == controls {
        HitVerdict::Accepted
    } else {
        HitVerdict::Rejected
    })
}

/// Splits non-control responses into training and validation sets by pair:
/// all responses to one pair land on the same side. Validation receives
/// whole pairs until it holds `round(fraction * n)` responses.
pub fn split_dataset(
    responses: &[Response],
    validation_fraction: f64,
    seed: u64,
) -> Result<(Vec<Response>, Vec<Response>), DatasetError> {
    if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
        return Err(DatasetError::BadFraction(validation_fraction));
    }
    let usable: Vec<&Response> = responses.iter().filter(|r| !r.pair.is_control).collect();
    if usable.is_empty() {
        return Err(DatasetError::NoResponses);
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in usable.iter().enumerate() {
        groups.entry(r.pair.pair_id.as_str()).or_default().push(i);
    }
    let mut keys: Vec<&str> = groups.keys().copied().collect();
    keys.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let target = (validation_fraction * usable.len() as f64).round() as usize;
    let mut in_validation = vec![false; usable.len()];
    let mut count = 0;
    for k in keys {
        if count >= target {
            break;
        }
        for &i in &groups[k] {
            in_validation[i] = true;
            count += 1;
        }
    }
    let mut train = Vec::new();
    let mut validation = Vec::new();
    for (r, v) in usable.into_iter().zip(in_validation) {
        if v {
            validation.push(r.clone());
        } else {
            train.push(r.clone());
        }
    }
    Ok((train, validation))
}

/// Response shares for one pair within one group, in percent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shares {
    pub a: f64,
    pub b: f64,
}

impl Shares {
    pub fn from_counts(a: usize, b: usize) -> Self {
        let n = (a + b) as f64;
        Shares {
            a: 100.0 * a as f64 / n,
            b: 100.0 * b as f64 / n,
        }
    }

    /// Choices holding at least half of the responses; both at a 50/50 tie.
    pub fn majority(&self) -> BTreeSet<Choice> {
        let mut set = BTreeSet::new();
        if self.a >= self.b {
            set.insert(Choice::A);
        }
        if self.b >= self.a {
            set.insert(Choice::B);
        }
        set
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyRow {
    pub pair_id: String,
    pub group1: Shares,
    pub group2: Shares,
    pub matched: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyReport {
    pub rows: Vec<ConsistencyRow>,
}

impl ConsistencyReport {
    pub fn matches(&self) -> usize {
        self.rows.iter().filter(|r| r.matched).count()
    }

    pub fn total(&self) -> usize {
        self.rows.len()
    }

    pub fn match_rate(&self) -> f64 {
        self.matches() as f64 / self.total() as f64
    }

    /// CSV: `pair_id,g1_a,g1_b,g2_a,g2_b,match`.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv_writer(out);
        w.write_record(["pair_id", "g1_a", "g1_b", "g2_a", "g2_b", "match"])?;
        for r in &self.rows {
            w.write_record([
                r.pair_id.clone(),
                format!("{:.1}", r.group1.a),
                format!("{:.1}", r.group1.b),
                format!("{:.1}", r.group2.a),
                format!("{:.1}", r.group2.b),
                r.matched.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Compares per-pair majority choices between two groups given as shares.
pub fn consistency_from_shares<I>(rows: I) -> ConsistencyReport
where
    I: IntoIterator<Item = (String, Shares, Shares)>,
{
    let rows = rows
        .into_iter()
        .map(|(pair_id, group1, group2)| {
            let matched = !group1.majority().is_disjoint(&group2.majority());
            ConsistencyRow {
                pair_id,
                group1,
                group2,
                matched,
            }
        })
        .collect();
    ConsistencyReport { rows }
}

fn tally(responses: &[Response]) -> BTreeMap<String, (usize, usize)> {
    let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for r in responses {
        let c = counts.entry(r.pair.pair_id.clone()).or_default();
        match r.choice {
            Choice::A => c.0 += 1,
            Choice::B => c.1 += 1,
        }
    }
    counts
}

/// A pair matches when the two groups' majority sets intersect.
pub fn consistency(group1: &[Response], group2: &[Response]) -> Result<ConsistencyReport, DatasetError> {
    let t1 = tally(group1);
    let t2 = tally(group2);
    if let Some(p) = t1.keys().find(|k| !t2.contains_key(*k)).or_else(|| t2.keys().find(|k| !t1.contains_key(*k))) {
        return Err(DatasetError::UnmatchedPair(p.clone()));
    }
    Ok(consistency_from_shares(t1.into_iter().map(|(pair, (a, b))| {
        let (a2, b2) = t2[&pair];
        (pair, Shares::from_counts(a, b), Shares::from_counts(a2, b2))
    })))
}

/// Splits workers evenly at random and compares the two halves.
pub fn random_split_consistency(responses: &[Response], seed: u64) -> Result<ConsistencyReport, DatasetError> {
    let (g1, g2) = random_worker_split(responses, seed)?;
    consistency(&g1, &g2)
}

/// The two response groups induced by an even random partition of workers.
pub fn random_worker_split(responses: &[Response], seed: u64) -> Result<(Vec<Response>, Vec<Response>), DatasetError> {
    let mut workers: Vec<&str> = responses
        .iter()
        .map(|r| r.worker_id.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if workers.len() < 2 {
        return Err(DatasetError::Insufficient {
            what: "workers",
            needed: 2,
            got: workers.len(),
        });
    }
    workers.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let first: BTreeSet<&str> = workers[..workers.len() / 2].iter().copied().collect();
    let (g1, g2): (Vec<Response>, Vec<Response>) =
        responses.iter().cloned().partition(|r| first.contains(r.worker_id.as_str()));
    Ok((g1, g2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeFamily {
    Box,
    Ellipsoid,
    /// Union of a box and an ellipsoid.
    Union,
}

impl FromStr for ShapeFamily {
    type Err = DatasetError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "box" => Ok(ShapeFamily::Box),
            "ellipsoid" => Ok(ShapeFamily::Ellipsoid),
            "union" => Ok(ShapeFamily::Union),
            other => Err(DatasetError::BadFamily(other.to_string())),
        }
    }
}

impl fmt::Display for ShapeFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShapeFamily::Box => "box",
            ShapeFamily::Ellipsoid => "ellipsoid",
            ShapeFamily::Union => "union",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PrimitiveKind {
    Box,
    Ellipsoid,
}

/// A solid primitive in canonical-cube coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Primitive {
    pub kind: PrimitiveKind,
    pub center: [f64; 3],
    pub half: [f64; 3],
}

impl Primitive {
    fn contains(&self, p: [f64; 3]) -> bool {
        let d = [
            (p[0] - self.center[0]) / self.half[0],
            (p[1] - self.center[1]) / self.half[1],
            (p[2] - self.center[2]) / self.half[2],
        ];
        match self.kind {
            PrimitiveKind::Box => d.iter().all(|v| v.abs() <= 1.0),
            PrimitiveKind::Ellipsoid => d.iter().map(|v| v * v).sum::<f64>() <= 1.0,
        }
    }
}

/// A generated grid with the parameters that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthShape {
    pub grid: VoxelGrid,
    pub family: ShapeFamily,
    pub primitives: Vec<Primitive>,
}

fn random_primitive(kind: PrimitiveKind, resolution: usize, rng: &mut ChaCha8Rng) -> Primitive {
    let min_half = 1.5 / resolution as f64;
    let mut half = [0.0; 3];
    let mut center = [0.0; 3];
    for k in 0..3 {
        half[k] = rng.random_range(min_half.max(0.08)..0.45);
        let slack = 0.48 - half[k];
        center[k] = if slack > 0.0 { rng.random_range(-slack..slack) } else { 0.0 };
    }
    Primitive { kind, center, half }
}

fn rasterize(id: String, resolution: usize, primitives: &[Primitive]) -> VoxelGrid {
    let mut grid = VoxelGrid::empty(id, resolution);
    let h = 1.0 / resolution as f64;
    for iz in 0..resolution {
        for iy in 0..resolution {
            for ix in 0..resolution {
                let p = [
                    -0.5 + (ix as f64 + 0.5) * h,
                    -0.5 + (iy as f64 + 0.5) * h,
                    -0.5 + (iz as f64 + 0.5) * h,
                ];
                if primitives.iter().any(|q| q.contains(p)) {
                    grid.set(ix, iy, iz, true);
                }
            }
        }
    }
    grid
}

/// Procedurally generates `n` distinct, non-empty solid shapes. Ids are
/// `<family>-<index>`.
pub fn synth_shapes(n: usize, resolution: usize, family: ShapeFamily, seed: u64) -> Result<Vec<SynthShape>, DatasetError> {
    if n < 2 {
        return Err(DatasetError::Insufficient {
            what: "shapes",
            needed: 2,
            got: n,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen: BTreeSet<Vec<bool>> = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let primitives = match family {
            ShapeFamily::Box => vec![random_primitive(PrimitiveKind::Box, resolution, &mut rng)],
            ShapeFamily::Ellipsoid => vec![random_primitive(PrimitiveKind::Ellipsoid, resolution, &mut rng)],
            ShapeFamily::Union => vec![
                random_primitive(PrimitiveKind::Box, resolution, &mut rng),
                random_primitive(PrimitiveKind::Ellipsoid, resolution, &mut rng),
            ],
        };
        let grid = rasterize(format!("{family}-{:03}", out.len()), resolution, &primitives);
        if grid.occupied_count() == 0 || !seen.insert(grid.cells().to_vec()) {
            continue;
        }
        out.push(SynthShape {
            grid,
            family,
            primitives,
        });
    }
    Ok(out)
}

/// Geometric functionals used as latent "aesthetics" for synthetic oracles.
/// They are test signals, not models of human taste.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentScore {
    /// Fraction of occupied cells.
    Volume,
    /// Overlap of the shape with its mirror image across the x mid-plane
    /// (intersection over union).
    MirrorSymmetry,
    /// Share of occupied face-neighbour links among occupied cells; smooth,
    /// compact shapes score higher.
    Smoothness,
    /// Mean height (y) of the occupied cells.
    Height,
}

impl FromStr for LatentScore {
    type Err = DatasetError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "volume" => Ok(LatentScore::Volume),
            "symmetry" => Ok(LatentScore::MirrorSymmetry),
            "smoothness" => Ok(LatentScore::Smoothness),
            "height" => Ok(LatentScore::Height),
            other => Err(DatasetError::BadFamily(other.to_string())),
        }
    }
}

impl LatentScore {
    pub fn evaluate(&self, grid: &VoxelGrid) -> f64 {
        let r = grid.resolution();
        let occupied = grid.occupied_count();
        if occupied == 0 {
            return 0.0;
        }
        match self {
            LatentScore::Volume => occupied as f64 / grid.cells().len() as f64,
            LatentScore::MirrorSymmetry => {
                let mut inter = 0usize;
                let mut union = 0usize;
                for [x, y, z] in iter_cells(r) {
                    let a = grid.get(x, y, z);
                    let b = grid.get(r - 1 - x, y, z);
                    inter += (a && b) as usize;
                    union += (a || b) as usize;
                }
                inter as f64 / union as f64
            }
            LatentScore::Smoothness => {
                let mut links = 0usize;
                for [x, y, z] in grid.occupied() {
                    if x + 1 < r && grid.get(x + 1, y, z) {
                        links += 1;
                    }
                    if y + 1 < r && grid.get(x, y + 1, z) {
                        links += 1;
                    }
                    if z + 1 < r && grid.get(x, y, z + 1) {
                        links += 1;
                    }
                }
                links as f64 / (3 * occupied) as f64
            }
            LatentScore::Height => {
                let sum: usize = grid.occupied().map(|[_, y, _]| y).sum();
                (sum as f64 / occupied as f64 + 0.5) / r as f64 - 0.5
            }
        }
    }
}

fn iter_cells(r: usize) -> impl Iterator<Item = [usize; 3]> {
    (0..r).flat_map(move |z| (0..r).flat_map(move |y| (0..r).map(move |x| [x, y, z])))
}

/// How simulated workers turn a latent score gap into a choice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Agreement {
    /// Always picks the higher latent score (coin flip on exact ties).
    NoiseFree,
    /// Picks A with probability `1 / (1 + exp(-k (s_A - s_B)))`.
    Logistic { steepness: f64 },
}

impl Agreement {
    pub fn prob_a(&self, s_a: f64, s_b: f64) -> f64 {
        let gap = s_a - s_b;
        match *self {
            Agreement::NoiseFree => {
                if gap > 0.0 {
                    1.0
                } else if gap < 0.0 {
                    0.0
                } else {
                    0.5
                }
            }
            Agreement::Logistic { steepness } => 1.0 / (1.0 + (-steepness * gap).exp()),
        }
    }
}

/// Simulates `workers_per_pair` workers answering every pair. Responses carry
/// hit id `oracle`, worker ids `w000`.., and synthetic 4 s answer spacing.
pub fn oracle_label(
    pairs: &[PairSample],
    latent: &BTreeMap<String, f64>,
    agreement: Agreement,
    workers_per_pair: usize,
    seed: u64,
) -> Result<Vec<Response>, DatasetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(pairs.len() * workers_per_pair);
    let score = |id: &str| latent.get(id).copied().ok_or_else(|| DatasetError::MissingScore(id.to_string()));
    for pair in pairs {
        let p = agreement.prob_a(score(&pair.shape_a)?, score(&pair.shape_b)?);
        for w in 0..workers_per_pair {
            let choice = if rng.random::<f64>() < p { Choice::A } else { Choice::B };
            let k = out.len() as u64;
            out.push(Response {
                hit_id: "oracle".into(),
                pair: pair.clone(),
                worker_id: format!("w{w:03}"),
                choice,
                elapsed_ms: 4000,
                timestamp_ms: 4000 * (k + 1),
            });
        }
    }
    Ok(out)
}

/// Random distinct-shape pairs (uniform over unordered pairs, random side),
/// with ids `p00000`...
pub fn random_pairs(ids: &[String], n: usize, seed: u64) -> Vec<PairSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|k| {
            let i = rng.random_range(0..ids.len());
            let mut j = rng.random_range(0..ids.len() - 1);
            if j >= i {
                j += 1;
            }
            PairSample {
                pair_id: format!("p{k:05}"),
                shape_a: ids[i].clone(),
                shape_b: ids[j].clone(),
                is_control: false,
            }
        })
        .collect()
}

/// Training and held-out pairs that never share an unordered shape pair.
///
/// `n_val` distinct unordered pairs are reserved for validation (ids
/// `v00000`..); `n_train` training pairs (ids `t00000`..) are then drawn with
/// replacement from the remaining unordered pairs. Sides are random.
pub fn disjoint_pairs(
    ids: &[String],
    n_train: usize,
    n_val: usize,
    seed: u64,
) -> Result<(Vec<PairSample>, Vec<PairSample>), DatasetError> {
    let mut all = Vec::new();
    for i in 0..ids.len() {
        for j in i + 1..ids.len() {
            all.push((i, j));
        }
    }
    if all.len() <= n_val {
        return Err(DatasetError::Insufficient {
            what: "distinct shape pairs",
            needed: n_val + 1,
            got: all.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    all.shuffle(&mut rng);
    let mut make = |prefix: char, k: usize, (i, j): (usize, usize)| {
        let (a, b) = if rng.random_bool(0.5) { (i, j) } else { (j, i) };
        PairSample {
            pair_id: format!("{prefix}{k:05}"),
            shape_a: ids[a].clone(),
            shape_b: ids[b].clone(),
            is_control: false,
        }
    };
    let val: Vec<PairSample> = (0..n_val).map(|k| make('v', k, all[k])).collect();
    let pool = &all[n_val..];
    let mut train = Vec::with_capacity(n_train);
    let mut rng2 = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    for k in 0..n_train {
        let p = pool[rng2.random_range(0..pool.len())];
        train.push(make('t', k, p));
    }
    Ok((train, val))
}

/// Turns non-control responses into preference pairs over `grids`.
pub fn responses_to_pairs(responses: &[Response], grids: &BTreeMap<String, VoxelGrid>) -> Result<PairSet, DatasetError> {
    let usable = responses.iter().filter(|r| !r.pair.is_control);
    Ok(PairSet::from_id_pairs(grids, usable.map(|r| (r.preferred(), r.rejected())))?)
}

#[derive(Debug, Serialize, Deserialize)]
struct LogRow {
    hit_id: String,
    pair_id: String,
    shape_a: String,
    shape_b: String,
    is_control: bool,
    worker_id: String,
    choice: Choice,
    elapsed_ms: u64,
    timestamp_ms: u64,
}

/// Column order of the response log.
pub const LOG_HEADER: [&str; 9] = [
    "hit_id",
    "pair_id",
    "shape_a",
    "shape_b",
    "is_control",
    "worker_id",
    "choice",
    "elapsed_ms",
    "timestamp_ms",
];

pub(crate) fn csv_writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out)
}

/// Writes the response log; an empty slice still produces the header.
pub fn write_responses<W: Write>(responses: &[Response], out: W) -> Result<(), DatasetError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .has_headers(false)
        .from_writer(out);
    w.write_record(LOG_HEADER)?;
    for r in responses {
        w.serialize(LogRow {
            hit_id: r.hit_id.clone(),
            pair_id: r.pair.pair_id.clone(),
            shape_a: r.pair.shape_a.clone(),
            shape_b: r.pair.shape_b.clone(),
            is_control: r.pair.is_control,
            worker_id: r.worker_id.clone(),
            choice: r.choice,
            elapsed_ms: r.elapsed_ms,
            timestamp_ms: r.timestamp_ms,
        })?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_responses<R: Read>(input: R) -> Result<Vec<Response>, DatasetError> {
    let mut rdr = csv::Reader::from_reader(input);
    rdr.deserialize::<LogRow>()
        .map(|row| {
            let row = row?;
            Ok(Response {
                hit_id: row.hit_id,
                pair: PairSample {
                    pair_id: row.pair_id,
                    shape_a: row.shape_a,
                    shape_b: row.shape_b,
                    is_control: row.is_control,
                },
                worker_id: row.worker_id,
                choice: row.choice,
                elapsed_ms: row.elapsed_ms,
                timestamp_ms: row.timestamp_ms,
            })
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct DemographicsRow {
    worker_id: String,
    gender: Option<String>,
    age_group: Option<String>,
    region: Option<String>,
}

/// Demographics CSV: `worker_id,gender,age_group,region`, empty for skipped fields.
pub fn write_demographics<W: Write>(rows: &BTreeMap<String, Demographics>, out: W) -> Result<(), DatasetError> {
    let mut w = csv_writer(out);
    for (worker_id, d) in rows {
        w.serialize(DemographicsRow {
            worker_id: worker_id.clone(),
            gender: d.gender.clone(),
            age_group: d.age_group.clone(),
            region: d.region.clone(),
        })?;
    }
    if rows.is_empty() {
        w.write_record(["worker_id", "gender", "age_group", "region"])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_demographics<R: Read>(input: R) -> Result<BTreeMap<String, Demographics>, DatasetError> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut out = BTreeMap::new();
    for row in rdr.deserialize::<DemographicsRow>() {
        let row = row?;
        out.insert(
            row.worker_id,
            Demographics {
                gender: row.gender,
                age_group: row.age_group,
                region: row.region,
            },
        );
    }
    Ok(out)
}
