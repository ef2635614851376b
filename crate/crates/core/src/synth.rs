// SPDX-License-Identifier: Apache-2.0

//! Synthetic compositional alphabet.
//!
//! Radicals are Kangxi radical code points starting at U+2F00, each drawn
//! as a fixed triple of strokes picked from a small stroke library. Classes
//! are random binary radical trees (1 to 4 leaves) whose radicals follow a
//! Zipf law, and glyphs are rendered by recursively splitting the canvas
//! according to the structural operators.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{sample_field, warp, AugmentError};
use crate::ids::{parse_ids, serialize_ids, Expr, RadicalId, RadicalTree, RadicalVocab, StructOp};
use crate::image::{GrayImage, ImageError};
use crate::parallel::Parallelism;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("unsatisfiable spec: {0}")]
    UnsatisfiableSpec(String),
    #[error("canvas of {0} px is below the 16 px minimum")]
    CanvasTooSmall(usize),
    #[error("radical coverage impossible: {0}")]
    CoverageImpossible(String),
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed dataset: {0}")]
    Malformed(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::IoFailure {
        path: path.display().to_string(),
        source,
    }
}

pub const FIRST_RADICAL: u32 = 0x2F00;
pub const MAX_RADICALS: usize = 214;
pub const MAX_LEAVES: usize = 4;
pub const MIN_CANVAS: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_radicals: usize,
    pub operators: Vec<StructOp>,
    pub n_classes: usize,
    pub zipf_exponent: f64,
    pub canvas: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_radicals: 12,
            operators: vec![StructOp::LeftRight, StructOp::AboveBelow, StructOp::Surround],
            n_classes: 60,
            zipf_exponent: 1.0,
            canvas: 32,
            seed: 42,
        }
    }
}

impl SynthSpec {
    pub fn vocab(&self) -> RadicalVocab {
        RadicalVocab::from_symbols(
            (0..self.n_radicals as u32).map(|i| char::from_u32(FIRST_RADICAL + i).expect("valid code point")),
        )
    }

    /// Number of distinct trees with `leaves` leaves.
    pub fn tree_count(&self, leaves: usize) -> u128 {
        let (r, o) = (self.n_radicals as u128, self.operators.len() as u128);
        let mut t = vec![0u128; leaves + 1];
        for n in 1..=leaves {
            t[n] = if n == 1 {
                r
            } else {
                (1..n).map(|a| o * t[a] * t[n - a]).sum()
            };
        }
        t[leaves]
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::UnsatisfiableSpec(m));
        if self.n_radicals == 0 || self.n_radicals > MAX_RADICALS {
            return bad(format!("n_radicals must be in 1..={MAX_RADICALS}"));
        }
        if self.operators.is_empty() {
            return bad("no operators".into());
        }
        if let Some(op) = self.operators.iter().find(|op| op.arity() != 2) {
            return bad(format!("operator {} is not binary", op.name()));
        }
        if !(self.zipf_exponent.is_finite() && self.zipf_exponent >= 0.0) {
            return bad("zipf exponent must be finite and non-negative".into());
        }
        if self.n_classes == 0 {
            return bad("n_classes must be positive".into());
        }
        if self.canvas < MIN_CANVAS {
            return Err(SynthError::CanvasTooSmall(self.canvas));
        }
        let total: u128 = (1..=MAX_LEAVES).map(|l| self.tree_count(l)).sum();
        if self.n_classes as u128 > total {
            return bad(format!(
                "{} classes requested but only {total} distinct trees exist",
                self.n_classes
            ));
        }
        Ok(())
    }

    pub fn zipf_weights(&self) -> Vec<f64> {
        (1..=self.n_radicals)
            .map(|rank| (rank as f64).powf(-self.zipf_exponent))
            .collect()
    }
}

pub fn class_label(i: usize, n: usize) -> String {
    let width = n.saturating_sub(1).to_string().len().max(3);
    format!("c{i:0width$}")
}

// Relative frequency of each leaf count.
const LEAF_WEIGHTS: [f64; MAX_LEAVES] = [1.0, 3.0, 3.0, 2.0];
const MAX_DRAWS_PER_CLASS: usize = 10_000;

fn sample_expr(
    leaves: usize,
    ops: &[StructOp],
    radicals: &[RadicalId],
    zipf: &WeightedIndex<f64>,
    rng: &mut ChaCha8Rng,
) -> Expr {
    if leaves == 1 {
        return Expr::Leaf(radicals[zipf.sample(rng)]);
    }
    let left = rng.random_range(1..leaves);
    let op = ops[rng.random_range(0..ops.len())];
    let l = sample_expr(left, ops, radicals, zipf, rng);
    let r = sample_expr(leaves - left, ops, radicals, zipf, rng);
    Expr::Node(op, Box::new(l), Box::new(r))
}

/// Samples `n_classes` distinct radical trees, labelled `c000`, `c001`, ...
pub fn gen_classes(spec: &SynthSpec) -> Result<Vec<(String, RadicalTree)>, SynthError> {
    spec.validate()?;
    let vocab = spec.vocab();
    let radicals: Vec<RadicalId> = vocab.iter().collect();
    let zipf = WeightedIndex::new(spec.zipf_weights()).expect("positive weights");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let capacity: Vec<u128> = (1..=MAX_LEAVES).map(|l| spec.tree_count(l)).collect();
    let mut used = [0u128; MAX_LEAVES];
    let mut seen: HashSet<String> = HashSet::new();
    let mut out = Vec::with_capacity(spec.n_classes);
    let mut draws = 0usize;
    while out.len() < spec.n_classes {
        let weights: Vec<f64> = (0..MAX_LEAVES)
            .map(|i| if used[i] < capacity[i] { LEAF_WEIGHTS[i] } else { 0.0 })
            .collect();
        let leaves = 1 + WeightedIndex::new(&weights)
            .expect("some leaf count left")
            .sample(&mut rng);
        let tree = RadicalTree::from_expr(&sample_expr(leaves, &spec.operators, &radicals, &zipf, &mut rng));
        draws += 1;
        if seen.insert(serialize_ids(&tree)) {
            used[leaves - 1] += 1;
            out.push((class_label(out.len(), spec.n_classes), tree));
        } else if draws > MAX_DRAWS_PER_CLASS * spec.n_classes {
            return Err(SynthError::UnsatisfiableSpec(format!(
                "no new tree found after {draws} draws ({} of {} classes)",
                out.len(),
                spec.n_classes
            )));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Rendering

const STROKES: [&[(f64, f64)]; 12] = [
    &[(0.1, 0.2), (0.9, 0.2)],
    &[(0.1, 0.5), (0.9, 0.5)],
    &[(0.1, 0.8), (0.9, 0.8)],
    &[(0.2, 0.1), (0.2, 0.9)],
    &[(0.5, 0.1), (0.5, 0.9)],
    &[(0.8, 0.1), (0.8, 0.9)],
    &[(0.1, 0.1), (0.9, 0.9)],
    &[(0.9, 0.1), (0.1, 0.9)],
    &[(0.3, 0.3), (0.7, 0.3), (0.7, 0.7)],
    &[(0.3, 0.3), (0.3, 0.7), (0.7, 0.7)],
    &[(0.35, 0.35), (0.65, 0.35), (0.65, 0.65), (0.35, 0.65), (0.35, 0.35)],
    &[(0.2, 0.6), (0.5, 0.35), (0.8, 0.6)],
];

/// The three stroke indices making up radical `index`. Distinct per index.
///
/// Triples are ordered greedily: each next triple shares as few strokes as
/// possible with the most similar earlier one, so small alphabets get the
/// most dissimilar motifs.
pub fn motif(index: u32) -> [usize; 3] {
    use std::sync::OnceLock;
    static TABLE: OnceLock<Vec<[usize; 3]>> = OnceLock::new();
    let table = TABLE.get_or_init(|| {
        let n = STROKES.len();
        let mut pool = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                for c in b + 1..n {
                    pool.push([a, b, c]);
                }
            }
        }
        pool.shuffle(&mut ChaCha8Rng::seed_from_u64(0x5eed_2f00));
        let shared = |x: &[usize; 3], y: &[usize; 3]| x.iter().filter(|s| y.contains(s)).count();
        let mut order = vec![pool.remove(0)];
        while !pool.is_empty() {
            let (best, _) = pool
                .iter()
                .enumerate()
                .map(|(i, t)| (i, order.iter().map(|o| shared(o, t)).max().unwrap_or(0)))
                .min_by_key(|&(i, worst)| (worst, i))
                .expect("pool not empty");
            order.push(pool.remove(best));
        }
        order
    });
    table[index as usize % table.len()]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Rect {
    x: usize,
    y: usize,
    w: usize,
    h: usize,
}

fn draw_motif(img: &mut GrayImage, rect: Rect, index: u32) {
    if rect.w == 0 || rect.h == 0 {
        return;
    }
    let thick = ((rect.w.min(rect.h) as f64 / 10.0).round() as isize).max(1);
    let (lo, hi) = (-(thick / 2), (thick - 1) / 2);
    let (sw, sh) = ((rect.w - 1) as f64, (rect.h - 1) as f64);
    let mut plot = |px: f64, py: f64| {
        let (cx, cy) = (px.round() as isize, py.round() as isize);
        for dy in lo..=hi {
            for dx in lo..=hi {
                let (x, y) = (cx + dx, cy + dy);
                if x >= 0 && y >= 0 && (x as usize) < rect.w && (y as usize) < rect.h {
                    img.set(rect.x + x as usize, rect.y + y as usize, 255);
                }
            }
        }
    };
    for &s in &motif(index) {
        for seg in STROKES[s].windows(2) {
            let (x0, y0) = (seg[0].0 * sw, seg[0].1 * sh);
            let (x1, y1) = (seg[1].0 * sw, seg[1].1 * sh);
            let steps = (((x1 - x0).abs().max((y1 - y0).abs())) * 2.0).ceil() as usize + 1;
            for i in 0..=steps {
                let t = i as f64 / steps as f64;
                plot(x0 + t * (x1 - x0), y0 + t * (y1 - y0));
            }
        }
    }
}

fn clear(img: &mut GrayImage, r: Rect) {
    for y in r.y..r.y + r.h {
        for x in r.x..r.x + r.w {
            img.set(x, y, 0);
        }
    }
}

fn split_halves(len: usize) -> (usize, usize, usize) {
    // first part, gutter start offset of second part, second part
    let first = len.saturating_sub(1) / 2;
    let second = len.saturating_sub(first + 1);
    (first, first + 1, second)
}

/// Inner rectangle for a surround: a quarter-size margin on the closed sides.
fn inset(op: StructOp, r: Rect) -> Rect {
    let (mx, my) = (r.w / 4, r.h / 4);
    // (left, top, right, bottom) margins
    let (l, t, rt, b) = match op {
        StructOp::SurroundUpper => (mx, my, mx, 0),
        StructOp::SurroundLower => (mx, 0, mx, my),
        StructOp::SurroundLeft => (mx, my, 0, my),
        StructOp::SurroundUpperLeft => (mx, my, 0, 0),
        StructOp::SurroundUpperRight => (0, my, mx, 0),
        StructOp::SurroundLowerLeft => (mx, 0, 0, my),
        _ => (mx, my, mx, my),
    };
    Rect {
        x: r.x + l,
        y: r.y + t,
        w: r.w.saturating_sub(l + rt),
        h: r.h.saturating_sub(t + b),
    }
}

fn grow(inner: Rect, outer: Rect) -> Rect {
    // inner rectangle plus a one pixel gutter, clipped to outer
    let x0 = inner.x.saturating_sub(1).max(outer.x);
    let y0 = inner.y.saturating_sub(1).max(outer.y);
    let x1 = (inner.x + inner.w + 1).min(outer.x + outer.w);
    let y1 = (inner.y + inner.h + 1).min(outer.y + outer.h);
    Rect {
        x: x0,
        y: y0,
        w: x1 - x0,
        h: y1 - y0,
    }
}

fn draw_expr(img: &mut GrayImage, expr: &Expr, r: Rect) {
    if r.w == 0 || r.h == 0 {
        return;
    }
    match expr {
        Expr::Leaf(rad) => draw_motif(img, r, rad.index),
        Expr::Node(op, a, b) => match op {
            StructOp::LeftRight => {
                let (w1, off, w2) = split_halves(r.w);
                draw_expr(img, a, Rect { w: w1, ..r });
                draw_expr(
                    img,
                    b,
                    Rect {
                        x: r.x + off,
                        w: w2,
                        ..r
                    },
                );
            }
            StructOp::AboveBelow => {
                let (h1, off, h2) = split_halves(r.h);
                draw_expr(img, a, Rect { h: h1, ..r });
                draw_expr(
                    img,
                    b,
                    Rect {
                        y: r.y + off,
                        h: h2,
                        ..r
                    },
                );
            }
            StructOp::Overlay => {
                draw_expr(img, a, r);
                draw_expr(img, b, r);
            }
            _ => {
                let inner = inset(*op, r);
                draw_expr(img, a, r);
                clear(img, grow(inner, r));
                draw_expr(img, b, inner);
            }
        },
    }
}

/// Renders a tree into a `w × h` raster, strokes 255 on 0.
pub fn render_rect(tree: &RadicalTree, w: usize, h: usize) -> GrayImage {
    let mut img = GrayImage::new(w, h);
    draw_expr(&mut img, &tree.to_expr(), Rect { x: 0, y: 0, w, h });
    img
}

pub fn render(tree: &RadicalTree, canvas: usize) -> Result<GrayImage, SynthError> {
    if canvas < MIN_CANVAS {
        return Err(SynthError::CanvasTooSmall(canvas));
    }
    Ok(render_rect(tree, canvas, canvas))
}

// ---------------------------------------------------------------------------
// Splits

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct SplitManifest {
    pub seen: Vec<String>,
    pub unseen: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub support: BTreeMap<String, Vec<String>>,
}

impl SplitManifest {
    pub fn is_seen(&self, label: &str) -> bool {
        self.seen.iter().any(|l| l == label)
    }
}

fn radical_set(tree: &RadicalTree) -> BTreeSet<u32> {
    tree.leaf_sequence.iter().map(|r| r.index).collect()
}

fn coverage(classes: &[(String, RadicalTree)], seen: &[usize]) -> BTreeMap<u32, usize> {
    let mut cov = BTreeMap::new();
    for &i in seen {
        for r in radical_set(&classes[i].1) {
            *cov.entry(r).or_insert(0) += 1;
        }
    }
    cov
}

/// Random seen/unseen split, repaired by swaps until every radical of an
/// unseen class also occurs in some seen class.
pub fn make_split(
    classes: &[(String, RadicalTree)],
    seen_fraction: f64,
    seed: u64,
) -> Result<SplitManifest, SynthError> {
    if !(seen_fraction > 0.0 && seen_fraction < 1.0) {
        return Err(SynthError::CoverageImpossible(format!(
            "seen fraction {seen_fraction} outside (0, 1)"
        )));
    }
    let n = classes.len();
    let n_seen = ((n as f64) * seen_fraction).round() as usize;
    if n_seen == 0 || n_seen >= n {
        return Err(SynthError::CoverageImpossible(format!(
            "{n} classes cannot be split at fraction {seen_fraction}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut seen: Vec<usize> = order[..n_seen].to_vec();
    let mut unseen: Vec<usize> = order[n_seen..].to_vec();

    for _ in 0..n * n {
        let cov = coverage(classes, &seen);
        let Some(u_pos) = unseen
            .iter()
            .position(|&u| radical_set(&classes[u].1).iter().any(|r| !cov.contains_key(r)))
        else {
            let label = |i: &usize| classes[*i].0.clone();
            let mut seen: Vec<String> = seen.iter().map(label).collect();
            let mut unseen: Vec<String> = unseen.iter().map(label).collect();
            seen.sort();
            unseen.sort();
            return Ok(SplitManifest {
                seen,
                unseen,
                support: BTreeMap::new(),
            });
        };
        let u = unseen[u_pos];
        let u_rads = radical_set(&classes[u].1);
        // a seen class whose radicals stay covered once u joins the seen side
        let s_pos = (0..seen.len()).rev().find(|&p| {
            radical_set(&classes[seen[p]].1)
                .iter()
                .all(|r| cov.get(r).copied().unwrap_or(0) > 1 || u_rads.contains(r))
        });
        let Some(s_pos) = s_pos else {
            return Err(SynthError::CoverageImpossible(format!(
                "no seen class can be swapped for {}",
                classes[u].0
            )));
        };
        let s = seen[s_pos];
        seen[s_pos] = u;
        unseen[u_pos] = s;
    }
    Err(SynthError::CoverageImpossible("swap repair did not converge".into()))
}

// ---------------------------------------------------------------------------
// Datasets

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub grid_w: usize,
    pub grid_h: usize,
    pub sigma: f64,
    pub noise: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            grid_w: crate::augment::DEFAULT_GRID,
            grid_h: crate::augment::DEFAULT_GRID,
            sigma: crate::augment::DEFAULT_SIGMA,
            noise: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Seen,
    Unseen,
}

impl SplitKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitKind::Seen => "seen",
            SplitKind::Unseen => "unseen",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub label: String,
    pub index: usize,
    pub split: SplitKind,
    pub image: GrayImage,
}

impl Sample {
    pub fn filename(&self) -> String {
        format!("{}_{}.pgm", self.label, self.index)
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: SynthSpec,
    pub augment: AugmentSpec,
    pub per_class: usize,
    pub vocab: RadicalVocab,
    pub classes: Vec<(String, RadicalTree)>,
    pub split: SplitManifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn tree(&self, label: &str) -> Option<&RadicalTree> {
        self.classes.iter().find(|(l, _)| l == label).map(|(_, t)| t)
    }

    pub fn samples_of(&self, split: SplitKind) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of sample `index` of class `class`.
pub fn sample_seed(seed: u64, class: usize, index: usize) -> u64 {
    splitmix(splitmix(seed ^ splitmix(class as u64)) ^ index as u64)
}

pub fn salt_and_pepper(img: &mut GrayImage, density: f64, seed: u64) {
    if density <= 0.0 {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in img.pixels_mut() {
        if rng.random::<f64>() < density {
            *p = if rng.random::<bool>() { 255 } else { 0 };
        }
    }
}

/// One augmented sample: render, warp, noise.
pub fn make_sample(base: &GrayImage, aug: &AugmentSpec, seed: u64) -> Result<GrayImage, SynthError> {
    let field = sample_field(aug.grid_w, aug.grid_h, aug.sigma, seed)?;
    let mut img = warp(base, &field)?;
    salt_and_pepper(&mut img, aug.noise, splitmix(seed));
    Ok(img)
}

/// Generates `per_class` augmented samples for every class.
pub fn generate_dataset(
    classes: Vec<(String, RadicalTree)>,
    split: SplitManifest,
    spec: &SynthSpec,
    per_class: usize,
    aug: &AugmentSpec,
    par: Parallelism,
) -> Result<Dataset, SynthError> {
    let per_class_samples = par.map_range(classes.len(), |c| -> Result<Vec<Sample>, SynthError> {
        let (label, tree) = &classes[c];
        let base = render(tree, spec.canvas)?;
        let kind = if split.is_seen(label) {
            SplitKind::Seen
        } else {
            SplitKind::Unseen
        };
        (0..per_class)
            .map(|i| {
                Ok(Sample {
                    label: label.clone(),
                    index: i,
                    split: kind,
                    image: make_sample(&base, aug, sample_seed(spec.seed, c, i))?,
                })
            })
            .collect()
    });
    let mut samples = Vec::with_capacity(classes.len() * per_class);
    for s in per_class_samples {
        samples.extend(s?);
    }
    Ok(Dataset {
        spec: spec.clone(),
        augment: *aug,
        per_class,
        vocab: spec.vocab(),
        classes,
        split,
        samples,
    })
}

/// Spec → classes → split → samples in one call.
pub fn synthesize(
    spec: &SynthSpec,
    seen_fraction: f64,
    per_class: usize,
    aug: &AugmentSpec,
    par: Parallelism,
) -> Result<Dataset, SynthError> {
    let classes = gen_classes(spec)?;
    let split = make_split(&classes, seen_fraction, spec.seed)?;
    generate_dataset(classes, split, spec, per_class, aug, par)
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    spec: SynthSpec,
    augment: AugmentSpec,
    per_class: usize,
    radicals: String,
}

pub const LABELS_FILE: &str = "labels.tsv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const META_FILE: &str = "dataset.json";

/// Writes PGM samples, `labels.tsv`, `manifest.json` and `dataset.json`.
pub fn emit_dataset(ds: &Dataset, out_dir: impl AsRef<Path>) -> Result<(), SynthError> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tsv = String::from("filename\tlabel\tids\tsplit\n");
    let ids: BTreeMap<&str, String> = ds.classes.iter().map(|(l, t)| (l.as_str(), serialize_ids(t))).collect();
    for s in &ds.samples {
        let name = s.filename();
        s.image.save_pgm(dir.join(&name))?;
        tsv.push_str(&format!(
            "{name}\t{}\t{}\t{}\n",
            s.label,
            ids[s.label.as_str()],
            s.split.as_str()
        ));
    }
    let write = |name: &str, body: String| {
        let p = dir.join(name);
        fs::write(&p, body).map_err(io_err(&p))
    };
    write(LABELS_FILE, tsv)?;
    write(
        MANIFEST_FILE,
        serde_json::to_string_pretty(&ds.split).expect("manifest serializes") + "\n",
    )?;
    let meta = DatasetMeta {
        spec: ds.spec.clone(),
        augment: ds.augment,
        per_class: ds.per_class,
        radicals: ds.vocab.symbols().iter().collect(),
    };
    write(
        META_FILE,
        serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n",
    )?;
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset, SynthError> {
    let dir = dir.as_ref();
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read_to_string(&p).map_err(io_err(&p))
    };
    let meta: DatasetMeta =
        serde_json::from_str(&read(META_FILE)?).map_err(|e| SynthError::Malformed(format!("{META_FILE}: {e}")))?;
    let split: SplitManifest = serde_json::from_str(&read(MANIFEST_FILE)?)
        .map_err(|e| SynthError::Malformed(format!("{MANIFEST_FILE}: {e}")))?;
    let vocab = RadicalVocab::from_symbols(meta.radicals.chars());
    let mut classes: Vec<(String, RadicalTree)> = Vec::new();
    let mut samples = Vec::new();
    for (n, line) in read(LABELS_FILE)?.lines().enumerate().skip(1) {
        let cols: Vec<&str> = line.split('\t').collect();
        let [file, label, ids, split_col] = cols[..] else {
            return Err(SynthError::Malformed(format!("{LABELS_FILE} line {}", n + 1)));
        };
        let kind = match split_col {
            "seen" => SplitKind::Seen,
            "unseen" => SplitKind::Unseen,
            other => return Err(SynthError::Malformed(format!("split {other:?}"))),
        };
        if classes.last().map(|(l, _)| l.as_str()) != Some(label) {
            let tree = parse_ids(ids, &vocab)
                .map_err(|e| SynthError::Malformed(format!("{LABELS_FILE} line {}: {e}", n + 1)))?;
            classes.push((label.to_string(), tree));
        }
        let index = file
            .strip_suffix(".pgm")
            .and_then(|f| f.rsplit_once('_'))
            .and_then(|(_, i)| i.parse().ok())
            .ok_or_else(|| SynthError::Malformed(format!("file name {file:?}")))?;
        samples.push(Sample {
            label: label.to_string(),
            index,
            split: kind,
            image: GrayImage::load_pgm(dir.join(file))?,
        });
    }
    Ok(Dataset {
        spec: meta.spec,
        augment: meta.augment,
        per_class: meta.per_class,
        vocab,
        classes,
        split,
        samples,
    })
}
