//! Visual summaries of a shape collection: exact t-SNE embeddings of voxels
//! or inner-layer activations, and atlas layouts whose icon sizes follow the
//! score.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::csv_writer;
use crate::net::{self, NetError, NetworkParams};
use crate::voxel::VoxelGrid;

#[derive(Debug, Error)]
pub enum VizError {
    #[error("t-SNE needs at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("perplexity {perplexity} is infeasible for {n} points (need 0 < perplexity < (n - 1) / 3)")]
    BadPerplexity { perplexity: f64, n: usize },
    #[error("points have inconsistent dimensions")]
    RaggedPoints,
    #[error("nothing to lay out")]
    EmptyLayout,
    #[error("{what} has {got} entries, expected {expected}")]
    Misaligned {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("icon sizes must satisfy 0 < s_min < s_max, got {s_min} and {s_max}")]
    BadSizes { s_min: f64, s_max: f64 },
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Post-tanh activations of hidden layer `layer` (`1 <= layer < n_l`).
pub fn inner_activations(params: &NetworkParams, grid: &VoxelGrid, layer: usize) -> Result<Vec<f64>, VizError> {
    let layers = params.spec().num_layers();
    if layer == 0 || layer >= layers {
        return Err(NetError::LayerOutOfRange { index: layer, layers }.into());
    }
    net::check_resolution(params, grid)?;
    let mut trace = net::forward(params, &grid.to_input())?;
    Ok(trace.a.swap_remove(layer))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 100.0,
            seed: 0,
        }
    }
}

const EXAGGERATION: f64 = 12.0;
const MIN_PROB: f64 = 1e-12;
const MIN_DIST: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding2D {
    pub coords: Vec<[f64; 2]>,
    /// KL(P || Q) after the last iteration.
    pub kl: f64,
    /// KL(P || Q) (unexaggerated) of the positions entering each iteration.
    pub kl_history: Vec<f64>,
    pub iterations: usize,
}

fn squared_distances(points: &[Vec<f64>]) -> Vec<f64> {
    let n = points.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| {
                    let d: f64 = points[i].iter().zip(&points[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                    d.max(MIN_DIST)
                })
                .collect()
        })
        .collect();
    rows.concat()
}

/// Conditional row `p_{j|i}` whose entropy matches `ln(perplexity)`.
fn conditional_row(dist: &[f64], i: usize, perplexity: f64) -> Vec<f64> {
    let target = perplexity.ln();
    let n = dist.len();
    let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
    let mut beta = 1.0;
    let d_min = dist.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, d)| *d).fold(f64::INFINITY, f64::min);
    let mut row = vec![0.0; n];
    for _ in 0..200 {
        let mut sum = 0.0;
        for j in 0..n {
            // Shift by the nearest distance so the largest term is 1.
            row[j] = if j == i { 0.0 } else { (-beta * (dist[j] - d_min)).exp() };
            sum += row[j];
        }
        let mut h = 0.0;
        for j in 0..n {
            if j != i {
                row[j] /= sum;
                if row[j] > 0.0 {
                    h -= row[j] * row[j].ln();
                }
            }
        }
        let err = h - target;
        if err.abs() < 1e-10 {
            break;
        }
        if err > 0.0 {
            lo = beta;
            beta = if hi.is_finite() { 0.5 * (beta + hi) } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = 0.5 * (beta + lo);
        }
    }
    row
}

/// Symmetrized joint affinities `P`, flattened row-major.
pub fn joint_affinities(points: &[Vec<f64>], perplexity: f64) -> Vec<f64> {
    let n = points.len();
    let dist = squared_distances(points);
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| conditional_row(&dist[i * n..(i + 1) * n], i, perplexity))
        .collect();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p[i * n + j] = ((rows[i][j] + rows[j][i]) / (2.0 * n as f64)).max(MIN_PROB);
            }
        }
    }
    p
}

/// Student-t kernel numerators `1 / (1 + |y_i - y_j|^2)` and their sum.
fn low_dim_kernel(y: &[[f64; 2]]) -> (Vec<f64>, f64) {
    let n = y.len();
    let mut num = vec![0.0; n * n];
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let dx = y[i][0] - y[j][0];
            let dy = y[i][1] - y[j][1];
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            num[i * n + j] = v;
            num[j * n + i] = v;
            sum += 2.0 * v;
        }
    }
    (num, sum)
}

fn kl_divergence(p: &[f64], num: &[f64], sum: f64, n: usize) -> f64 {
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let q = (num[i * n + j] / sum).max(MIN_PROB);
                let pij = p[i * n + j];
                kl += pij * (pij / q).ln();
            }
        }
    }
    kl
}

/// Exact t-SNE into two dimensions.
///
/// Early exaggeration (x12) and momentum 0.5 apply during the first quarter
/// of the iterations, momentum 0.8 afterwards; step sizes adapt with
/// per-coordinate gains.
pub fn tsne(points: &[Vec<f64>], config: &TsneConfig) -> Result<Embedding2D, VizError> {
    let n = points.len();
    if n < 3 {
        return Err(VizError::TooFewPoints(n));
    }
    if points.iter().any(|p| p.len() != points[0].len()) {
        return Err(VizError::RaggedPoints);
    }
    if !(config.perplexity > 0.0 && config.perplexity < (n - 1) as f64 / 3.0) {
        return Err(VizError::BadPerplexity {
            perplexity: config.perplexity,
            n,
        });
    }
    let p = joint_affinities(points, config.perplexity);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, 1e-4).expect("valid normal");
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)]).collect();
    let mut update = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let switch = config.iterations / 4;
    let mut kl_history = Vec::with_capacity(config.iterations);

    for it in 0..config.iterations {
        let (exaggeration, momentum) = if it < switch { (EXAGGERATION, 0.5) } else { (1.0, 0.8) };
        let (num, sum) = low_dim_kernel(&y);
        kl_history.push(kl_divergence(&p, &num, sum, n));
        let grad: Vec<[f64; 2]> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut g = [0.0; 2];
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let w = num[i * n + j];
                    let m = (exaggeration * p[i * n + j] - w / sum) * w;
                    g[0] += 4.0 * m * (y[i][0] - y[j][0]);
                    g[1] += 4.0 * m * (y[i][1] - y[j][1]);
                }
                g
            })
            .collect();
        for i in 0..n {
            for d in 0..2 {
                gains[i][d] = if (grad[i][d] > 0.0) != (update[i][d] > 0.0) {
                    gains[i][d] + 0.2
                } else {
                    (gains[i][d] * 0.8).max(0.01)
                };
                update[i][d] = momentum * update[i][d] - config.learning_rate * gains[i][d] * grad[i][d];
                y[i][d] += update[i][d];
            }
        }
        let mean = y.iter().fold([0.0; 2], |acc, v| [acc[0] + v[0], acc[1] + v[1]]);
        for v in y.iter_mut() {
            v[0] -= mean[0] / n as f64;
            v[1] -= mean[1] / n as f64;
        }
    }
    let (num, sum) = low_dim_kernel(&y);
    Ok(Embedding2D {
        kl: kl_divergence(&p, &num, sum, n),
        coords: y,
        kl_history,
        iterations: config.iterations,
    })
}

/// Mean silhouette coefficient of labelled 2D points.
pub fn silhouette(coords: &[[f64; 2]], labels: &[usize]) -> f64 {
    let n = coords.len();
    let dist = |i: usize, j: usize| ((coords[i][0] - coords[j][0]).powi(2) + (coords[i][1] - coords[j][1]).powi(2)).sqrt();
    let mut total = 0.0;
    for i in 0..n {
        let mut per_label: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for j in 0..n {
            if i != j {
                let e = per_label.entry(labels[j]).or_default();
                e.0 += dist(i, j);
                e.1 += 1;
            }
        }
        let a = per_label.get(&labels[i]).map(|(s, c)| s / *c as f64).unwrap_or(0.0);
        let b = per_label
            .iter()
            .filter(|(l, _)| **l != labels[i])
            .map(|(_, (s, c))| s / *c as f64)
            .fold(f64::INFINITY, f64::min);
        if b.is_finite() && a.max(b) > 0.0 {
            total += (b - a) / a.max(b);
        }
    }
    total / n as f64
}

/// CSV: `shape_id,x,y`.
pub fn write_embedding_csv<W: Write>(ids: &[String], coords: &[[f64; 2]], out: W) -> csv::Result<()> {
    let mut w = csv_writer(out);
    w.write_record(["shape_id", "x", "y"])?;
    for (id, c) in ids.iter().zip(coords) {
        w.write_record([id.clone(), format!("{}", c[0]), format!("{}", c[1])])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Canvas {
    pub width: f64,
    pub height: f64,
    /// Icon centres stay at least this far from every edge.
    pub margin: f64,
}

impl Default for Canvas {
    fn default() -> Self {
        Canvas {
            width: 1200.0,
            height: 900.0,
            margin: 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AtlasItem {
    pub shape_id: String,
    pub x: f64,
    pub y: f64,
    pub size: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AtlasLayout {
    pub canvas: Canvas,
    pub items: Vec<AtlasItem>,
}

/// Maps embedding coordinates into the canvas margin box (each axis
/// independently) and scales icon sizes linearly with score.
pub fn atlas(
    ids: &[String],
    coords: &[[f64; 2]],
    scores: &[f64],
    s_min: f64,
    s_max: f64,
    canvas: Canvas,
) -> Result<AtlasLayout, VizError> {
    if ids.is_empty() {
        return Err(VizError::EmptyLayout);
    }
    for (what, got) in [("coords", coords.len()), ("scores", scores.len())] {
        if got != ids.len() {
            return Err(VizError::Misaligned {
                what,
                expected: ids.len(),
                got,
            });
        }
    }
    if !(s_min > 0.0 && s_min < s_max) {
        return Err(VizError::BadSizes { s_min, s_max });
    }
    let range = |vals: &mut dyn Iterator<Item = f64>| {
        vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    };
    let map = |v: f64, (lo, hi): (f64, f64), extent: f64| {
        let (a, b) = (canvas.margin, extent - canvas.margin);
        if hi > lo {
            a + (v - lo) / (hi - lo) * (b - a)
        } else {
            0.5 * (a + b)
        }
    };
    let xr = range(&mut coords.iter().map(|c| c[0]));
    let yr = range(&mut coords.iter().map(|c| c[1]));
    let sr = range(&mut scores.iter().copied());
    let items = ids
        .iter()
        .zip(coords)
        .zip(scores)
        .map(|((id, c), &score)| {
            let size = if sr.1 > sr.0 {
                s_min + (score - sr.0) / (sr.1 - sr.0) * (s_max - s_min)
            } else {
                0.5 * (s_min + s_max)
            };
            AtlasItem {
                shape_id: id.clone(),
                x: map(c[0], xr, canvas.width),
                y: map(c[1], yr, canvas.height),
                size,
                score,
            }
        })
        .collect();
    Ok(AtlasLayout { canvas, items })
}

/// Draws one icon into the unit square `[0, 1]^2` (y pointing down).
pub trait IconRenderer {
    fn render(&self, shape_id: &str, out: &mut String);
}

/// Orthographic silhouette along z; shapes without a grid get a circle.
#[derive(Debug, Clone, Default)]
pub struct SilhouetteRenderer {
    pub grids: BTreeMap<String, VoxelGrid>,
}

impl IconRenderer for SilhouetteRenderer {
    fn render(&self, shape_id: &str, out: &mut String) {
        let Some(grid) = self.grids.get(shape_id) else {
            out.push_str(r##"<circle cx="0.5" cy="0.5" r="0.5" fill="#888"/>"##);
            return;
        };
        let r = grid.resolution();
        let mut mask = vec![false; r * r];
        for [x, y, _] in grid.occupied() {
            mask[y * r + x] = true;
        }
        let h = 1.0 / r as f64;
        for y in 0..r {
            // Row runs, drawn with +y up.
            let mut x = 0;
            while x < r {
                if !mask[y * r + x] {
                    x += 1;
                    continue;
                }
                let start = x;
                while x < r && mask[y * r + x] {
                    x += 1;
                }
                let _ = write!(
                    out,
                    r#"<rect x="{:.4}" y="{:.4}" width="{:.4}" height="{:.4}"/>"#,
                    start as f64 * h,
                    (r - 1 - y) as f64 * h,
                    (x - start) as f64 * h,
                    h
                );
            }
        }
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// An SVG 1.1 document with one `<g>` per item, ordered by shape id.
pub fn emit_svg(layout: &AtlasLayout, renderer: &dyn IconRenderer) -> String {
    let c = layout.canvas;
    let mut out = String::new();
    let _ = writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{:.2}" height="{:.2}" viewBox="0 0 {:.2} {:.2}">"#,
        c.width, c.height, c.width, c.height
    );
    let _ = writeln!(out, r##"<rect width="100%" height="100%" fill="#fff"/>"##);
    let mut items: Vec<&AtlasItem> = layout.items.iter().collect();
    items.sort_by(|a, b| a.shape_id.cmp(&b.shape_id));
    for item in items {
        let id = xml_escape(&item.shape_id);
        let _ = write!(
            out,
            r##"<g id="shape-{id}" data-score="{:.6}" fill="#335" transform="translate({:.3} {:.3}) scale({:.3})"><title>{id}</title>"##,
            item.score,
            item.x - item.size / 2.0,
            item.y - item.size / 2.0,
            item.size
        );
        renderer.render(&item.shape_id, &mut out);
        out.push_str("</g>\n");
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::ArchitectureSpec;

    fn clusters(seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for c in 0..2 {
            for _ in 0..50 {
                points.push((0..10).map(|_| normal.sample(&mut rng) + 10.0 * c as f64).collect());
                labels.push(c);
            }
        }
        (points, labels)
    }

    #[test]
    fn activation_layers() {
        let spec = ArchitectureSpec::build(crate::net::ArchKind::Full, 15).unwrap();
        let params = net::init_params(&spec, 0);
        let grid = VoxelGrid::empty("g", 15);
        assert_eq!(inner_activations(&params, &grid, 1).unwrap().len(), 200);
        assert_eq!(inner_activations(&params, &grid, 3).unwrap().len(), 50);
        assert!(matches!(inner_activations(&params, &grid, 0), Err(VizError::Net(NetError::LayerOutOfRange { .. }))));
        // Layer n_l is the score itself.
        assert!(inner_activations(&params, &grid, 4).is_err());
        let zero = NetworkParams::zeros(&spec);
        assert!(inner_activations(&zero, &grid, 2).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn perplexity_is_matched() {
        let (points, _) = clusters(3);
        let dist = squared_distances(&points);
        let n = points.len();
        let row = conditional_row(&dist[0..n], 0, 20.0);
        let h: f64 = row.iter().filter(|&&p| p > 0.0).map(|p| -p * p.ln()).sum();
        assert!((h.exp() - 20.0).abs() < 1e-6);
        let p = joint_affinities(&points, 20.0);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        for i in 0..n {
            for j in 0..n {
                assert_eq!(p[i * n + j], p[j * n + i]);
            }
        }
    }

    #[test]
    fn separated_clusters_and_monotone_tail() {
        let (points, labels) = clusters(11);
        let emb = tsne(&points, &TsneConfig { perplexity: 20.0, ..Default::default() }).unwrap();
        assert!(silhouette(&emb.coords, &labels) > 0.0);
        let tail = &emb.kl_history[emb.kl_history.len() * 9 / 10..];
        for w in tail.windows(2) {
            assert!(w[1] <= w[0] + 1e-6, "{} -> {}", w[0], w[1]);
        }
        assert!(emb.kl <= tail[tail.len() - 1] + 1e-6);
    }

    #[test]
    fn identical_points_stay_finite() {
        let points = vec![vec![1.0, 2.0]; 3];
        let p = joint_affinities(&points, 0.5);
        assert!((p[1] - p[2]).abs() < 1e-15);
        let emb = tsne(&points, &TsneConfig { perplexity: 0.5, iterations: 100, ..Default::default() }).unwrap();
        assert!(emb.coords.iter().all(|c| c[0].is_finite() && c[1].is_finite()));
    }

    #[test]
    fn tsne_input_checks() {
        assert!(matches!(tsne(&[vec![0.0], vec![1.0]], &TsneConfig::default()), Err(VizError::TooFewPoints(2))));
        let pts: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        assert!(matches!(tsne(&pts, &TsneConfig::default()), Err(VizError::BadPerplexity { .. })));
    }

    #[test]
    fn translation_invariance() {
        // Integer coordinates keep pairwise distances exact under translation,
        // so the optimisation sees identical inputs.
        let (points, _) = clusters(5);
        let points: Vec<Vec<f64>> = points.iter().map(|p| p.iter().map(|v| (v * 4.0).round()).collect()).collect();
        let moved: Vec<Vec<f64>> = points.iter().map(|p| p.iter().map(|v| v + 37.0).collect()).collect();
        let cfg = TsneConfig { perplexity: 10.0, iterations: 200, ..Default::default() };
        assert_eq!(tsne(&points, &cfg).unwrap(), tsne(&moved, &cfg).unwrap());
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i}")).collect()
    }

    #[test]
    fn atlas_sizes_and_bounds() {
        let canvas = Canvas::default();
        let l = atlas(&ids(2), &[[0.0, 0.0], [1.0, 2.0]], &[-1.0, 1.0], 10.0, 50.0, canvas).unwrap();
        assert_eq!((l.items[0].size, l.items[1].size), (10.0, 50.0));
        let l = atlas(&ids(3), &[[5.0, 5.0]; 3], &[0.2; 3], 10.0, 50.0, canvas).unwrap();
        assert!(l.items.iter().all(|it| it.size == 30.0));
        let coords: Vec<[f64; 2]> = (0..20).map(|i| [(i as f64).sin() * 40.0, (i as f64).cos() * 7.0]).collect();
        let scores: Vec<f64> = (0..20).map(|i| ((i * 7) % 20) as f64).collect();
        let l = atlas(&ids(20), &coords, &scores, 4.0, 40.0, canvas).unwrap();
        for it in &l.items {
            assert!(it.x >= canvas.margin && it.x <= canvas.width - canvas.margin);
            assert!(it.y >= canvas.margin && it.y <= canvas.height - canvas.margin);
        }
        let mut by_score: Vec<&AtlasItem> = l.items.iter().collect();
        by_score.sort_by(|a, b| a.score.total_cmp(&b.score));
        assert!(by_score.windows(2).all(|w| w[0].size <= w[1].size));
        assert!(matches!(atlas(&[], &[], &[], 1.0, 2.0, canvas), Err(VizError::EmptyLayout)));
        assert!(matches!(atlas(&ids(1), &[[0.0; 2]], &[0.0], 2.0, 2.0, canvas), Err(VizError::BadSizes { .. })));
    }

    #[test]
    fn svg_groups_and_determinism() {
        let renderer = SilhouetteRenderer::default();
        let empty = AtlasLayout {
            canvas: Canvas::default(),
            items: vec![],
        };
        let svg = emit_svg(&empty, &renderer);
        assert!(svg.contains("<svg") && svg.ends_with("</svg>\n"));
        assert_eq!(svg.matches("<g ").count(), 0);

        let mut grid = VoxelGrid::empty("s1", 4);
        grid.set(1, 1, 1, true);
        grid.set(2, 1, 3, true);
        let renderer = SilhouetteRenderer {
            grids: [("s1".to_string(), grid)].into(),
        };
        let l = atlas(&ids(3), &[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], &[0.0, 1.0, 2.0], 5.0, 20.0, Canvas::default()).unwrap();
        let svg = emit_svg(&l, &renderer);
        assert_eq!(svg.matches("<g ").count(), 3);
        assert_eq!(svg, emit_svg(&l, &renderer));
        // Both voxels share row y=1 and are adjacent in x: one merged run.
        assert_eq!(svg.matches("<rect x=").count(), 1);
        let order: Vec<usize> = ["shape-s0", "shape-s1", "shape-s2"].iter().map(|k| svg.find(k).unwrap()).collect();
        assert!(order.windows(2).all(|w| w[0] < w[1]));
    }
}
