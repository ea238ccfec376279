//! Deterministic synthetic data with exact ground-truth generative factors:
//! a 16×16 binary shapes grid, correlated-Gaussian samplers for MI oracles,
//! and few-shot episode sampling.

use std::fmt;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

pub const CANVAS: usize = 16;
pub const SCALES: [u32; 3] = [3, 5, 7];
pub const POSITIONS: u32 = 10;
pub const GRID_SIZE: usize = 3 * 3 * 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Square,
    Cross,
    Diamond,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Cross, ShapeKind::Diamond];

    pub fn index(self) -> usize {
        match self {
            ShapeKind::Square => 0,
            ShapeKind::Cross => 1,
            ShapeKind::Diamond => 2,
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ShapeKind::Square => "square",
            ShapeKind::Cross => "cross",
            ShapeKind::Diamond => "diamond",
        };
        f.write_str(s)
    }
}

/// Ground-truth generative factors of one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShapeFactors {
    pub shape: ShapeKind,
    pub scale: u32,
    pub pos_x: u32,
    pub pos_y: u32,
}

impl ShapeFactors {
    pub fn validate(&self) -> Result<()> {
        if !SCALES.contains(&self.scale) {
            return Err(CoreError::invalid(
                "ShapeFactors",
                format!("scale {} not in {SCALES:?}", self.scale),
            ));
        }
        if self.pos_x >= POSITIONS || self.pos_y >= POSITIONS {
            return Err(CoreError::invalid(
                "ShapeFactors",
                format!("position ({},{}) outside 0..{POSITIONS}", self.pos_x, self.pos_y),
            ));
        }
        // bounding box must fit the canvas
        if (self.pos_x + self.scale) as usize > CANVAS || (self.pos_y + self.scale) as usize > CANVAS {
            return Err(CoreError::invalid(
                "ShapeFactors",
                "shape bounding box leaves the canvas",
            ));
        }
        Ok(())
    }

    pub fn scale_index(&self) -> usize {
        SCALES.iter().position(|&s| s == self.scale).expect("validated scale")
    }
}

/// Rasterize one shape onto a 16×16 binary canvas.
///
/// Square fills its s×s box; the diamond keeps box pixels with
/// `|i−c|+|j−c| ≤ c`, the cross those with `i = c` or `j = c`
/// (box-relative, `c = (s−1)/2`).
pub fn render_shape(f: &ShapeFactors) -> Result<Tensor> {
    f.validate()?;
    let s = f.scale as usize;
    let c = (s - 1) / 2;
    let mut img = vec![0.0; CANVAS * CANVAS];
    for i in 0..s {
        for j in 0..s {
            let lit = match f.shape {
                ShapeKind::Square => true,
                ShapeKind::Diamond => i.abs_diff(c) + j.abs_diff(c) <= c,
                ShapeKind::Cross => i == c || j == c,
            };
            if lit {
                let row = f.pos_y as usize + i;
                let col = f.pos_x as usize + j;
                img[row * CANVAS + col] = 1.0;
            }
        }
    }
    Tensor::from_vec(vec![CANVAS, CANVAS], img)
}

/// Supervised attribute labels derived from the generative factors.
/// Positions are binarized (0–4 vs 5–9) for the alignment heads; the exact
/// 10-way positions stay available through [`ShapeDataset::factors`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeLabels {
    pub shape: Vec<usize>,
    pub scale: Vec<usize>,
    pub pos_x_bin: Vec<usize>,
    pub pos_y_bin: Vec<usize>,
}

pub const ATTRIBUTE_NAMES: [&str; 4] = ["shape", "scale", "pos_x_bin", "pos_y_bin"];
pub const ATTRIBUTE_CLASSES: [usize; 4] = [3, 3, 2, 2];

/// Full factorial grid of shapes: one image per factor combination.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeDataset {
    /// `[900, 256]`, flattened 16×16 binary images.
    pub images: Tensor,
    pub factors: Vec<ShapeFactors>,
    pub labels: AttributeLabels,
}

pub fn pos_bin(p: u32) -> usize {
    usize::from(p >= 5)
}

/// Generate the full 3·3·10·10 grid in lexicographic factor order
/// (shape, scale, pos_x, pos_y). Regeneration is bitwise identical.
pub fn make_dataset() -> ShapeDataset {
    let mut images = Vec::with_capacity(GRID_SIZE * CANVAS * CANVAS);
    let mut factors = Vec::with_capacity(GRID_SIZE);
    let mut labels = AttributeLabels {
        shape: Vec::with_capacity(GRID_SIZE),
        scale: Vec::with_capacity(GRID_SIZE),
        pos_x_bin: Vec::with_capacity(GRID_SIZE),
        pos_y_bin: Vec::with_capacity(GRID_SIZE),
    };
    for shape in ShapeKind::ALL {
        for (scale_idx, &scale) in SCALES.iter().enumerate() {
            for pos_x in 0..POSITIONS {
                for pos_y in 0..POSITIONS {
                    let f = ShapeFactors {
                        shape,
                        scale,
                        pos_x,
                        pos_y,
                    };
                    let img = render_shape(&f).expect("grid factors are valid");
                    images.extend_from_slice(img.data());
                    factors.push(f);
                    labels.shape.push(shape.index());
                    labels.scale.push(scale_idx);
                    labels.pos_x_bin.push(pos_bin(pos_x));
                    labels.pos_y_bin.push(pos_bin(pos_y));
                }
            }
        }
    }
    ShapeDataset {
        images: Tensor::from_vec(vec![GRID_SIZE, CANVAS * CANVAS], images)
            .expect("grid size matches"),
        factors,
        labels,
    }
}

impl ShapeDataset {
    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    /// Attribute column `i` in head order, with its class count.
    pub fn attribute(&self, i: usize) -> Result<(&[usize], usize)> {
        match i {
            0 => Ok((&self.labels.shape, 3)),
            1 => Ok((&self.labels.scale, 3)),
            2 => Ok((&self.labels.pos_x_bin, 2)),
            3 => Ok((&self.labels.pos_y_bin, 2)),
            _ => Err(CoreError::invalid("attribute", format!("index {i} out of range"))),
        }
    }

    /// Exact ground-truth factor columns (shape 3, scale 3, pos_x 10,
    /// pos_y 10) for metric evaluation.
    pub fn ground_truth_columns(&self) -> Vec<Vec<usize>> {
        vec![
            self.factors.iter().map(|f| f.shape.index()).collect(),
            self.factors.iter().map(|f| f.scale_index()).collect(),
            self.factors.iter().map(|f| f.pos_x as usize).collect(),
            self.factors.iter().map(|f| f.pos_y as usize).collect(),
        ]
    }

    /// Composite shape×scale class id in 0..9, the few-shot class space.
    pub fn shape_scale_classes(&self) -> Vec<usize> {
        self.factors
            .iter()
            .map(|f| f.shape.index() * SCALES.len() + f.scale_index())
            .collect()
    }

    /// CSV export: `idx,shape,scale,pos_x,pos_y,pix_0..pix_255`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        out.push_str("idx,shape,scale,pos_x,pos_y");
        for p in 0..CANVAS * CANVAS {
            out.push_str(&format!(",pix_{p}"));
        }
        out.push('\n');
        for (i, f) in self.factors.iter().enumerate() {
            out.push_str(&format!("{i},{},{},{},{}", f.shape, f.scale, f.pos_x, f.pos_y));
            for &v in self.images.row(i) {
                out.push_str(if v > 0.5 { ",1" } else { ",0" });
            }
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| CoreError::io(path.display().to_string(), e))
    }
}

/// i.i.d. bivariate standard normal pairs with correlation `rho`,
/// `[n, 2]`, via the Cholesky construction.
pub fn sample_gaussian_pair(rho: f64, n: usize, seed: u64) -> Result<Tensor> {
    if !(-1.0..1.0).contains(&rho) || rho.abs() >= 1.0 {
        return Err(CoreError::invalid(
            "sample_gaussian_pair",
            format!("rho {rho} outside (-1,1)"),
        ));
    }
    if n == 0 {
        return Err(CoreError::invalid("sample_gaussian_pair", "n must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = (1.0 - rho * rho).sqrt();
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let u: f64 = rng.sample(StandardNormal);
        let v: f64 = rng.sample(StandardNormal);
        data.push(u);
        data.push(rho * u + c * v);
    }
    Tensor::from_vec(vec![n, 2], data)
}

/// One C-way K-shot task over sample indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    /// `(sample index, class id)`, C·K entries grouped by class.
    pub support: Vec<(usize, usize)>,
    pub query: (usize, usize),
    pub way: usize,
    pub shot: usize,
}

/// Sample an episode: C classes drawn uniformly without replacement from
/// `class_pool`, K support samples per class, and one query from a
/// supported class, disjoint from its support samples.
pub fn make_episode(
    classes: &[usize],
    class_pool: &[usize],
    way: usize,
    shot: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    if class_pool.len() < way {
        return Err(CoreError::invalid(
            "make_episode",
            format!("pool has {} classes, need {way}", class_pool.len()),
        ));
    }
    for &c in class_pool {
        let count = classes.iter().filter(|&&x| x == c).count();
        if count < shot + 1 {
            return Err(CoreError::invalid(
                "make_episode",
                format!("class {c} has {count} samples, need {}", shot + 1),
            ));
        }
    }
    let chosen: Vec<usize> = sample_indices(rng, class_pool.len(), way)
        .iter()
        .map(|i| class_pool[i])
        .collect();

    let mut support = Vec::with_capacity(way * shot);
    let mut per_class: Vec<Vec<usize>> = Vec::with_capacity(way);
    for &c in &chosen {
        let members: Vec<usize> = classes
            .iter()
            .enumerate()
            .filter_map(|(i, &x)| (x == c).then_some(i))
            .collect();
        let picked = sample_indices(rng, members.len(), shot);
        let mut in_support = vec![false; members.len()];
        for i in picked.iter() {
            support.push((members[i], c));
            in_support[i] = true;
        }
        let rest: Vec<usize> = members
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| (!in_support[i]).then_some(m))
            .collect();
        per_class.push(rest);
    }
    let q_slot = rng.random_range(0..way);
    let q_class = chosen[q_slot];
    let q_members = &per_class[q_slot];
    let q_idx = q_members[rng.random_range(0..q_members.len())];
    Ok(Episode {
        support,
        query: (q_idx, q_class),
        way,
        shot,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn square_fills_box() {
        let f = ShapeFactors {
            shape: ShapeKind::Square,
            scale: 3,
            pos_x: 0,
            pos_y: 0,
        };
        let img = render_shape(&f).unwrap();
        let lit: Vec<usize> = img
            .data()
            .iter()
            .enumerate()
            .filter_map(|(i, &v)| (v == 1.0).then_some(i))
            .collect();
        assert_eq!(lit.len(), 9);
        for r in 0..3 {
            for c in 0..3 {
                assert!(lit.contains(&(r * CANVAS + c)));
            }
        }
    }

    #[test]
    fn diamond_and_cross_pixel_counts() {
        for (pos_x, pos_y) in [(0, 0), (4, 7), (9, 9)] {
            let d = render_shape(&ShapeFactors {
                shape: ShapeKind::Diamond,
                scale: 3,
                pos_x,
                pos_y,
            })
            .unwrap();
            assert_eq!(d.data().iter().filter(|&&v| v == 1.0).count(), 5);
            let c = render_shape(&ShapeFactors {
                shape: ShapeKind::Cross,
                scale: 3,
                pos_x,
                pos_y,
            })
            .unwrap();
            assert_eq!(c.data().iter().filter(|&&v| v == 1.0).count(), 5);
        }
    }

    #[test]
    fn lit_count_depends_only_on_shape_and_scale() {
        let ds = make_dataset();
        let mut counts: std::collections::HashMap<(usize, usize), usize> = Default::default();
        for (i, f) in ds.factors.iter().enumerate() {
            let lit = ds.images.row(i).iter().filter(|&&v| v == 1.0).count();
            assert!(lit > 0, "image {i} is empty");
            let key = (f.shape.index(), f.scale_index());
            let prev = counts.insert(key, lit);
            if let Some(p) = prev {
                assert_eq!(p, lit, "lit count varies with position for {key:?}");
            }
        }
    }

    #[test]
    fn out_of_canvas_rejected() {
        let f = ShapeFactors {
            shape: ShapeKind::Square,
            scale: 7,
            pos_x: 9,
            pos_y: 9,
        };
        // 9 + 7 = 16 fits exactly
        assert!(render_shape(&f).is_ok());
        let bad = ShapeFactors {
            shape: ShapeKind::Square,
            scale: 4,
            pos_x: 0,
            pos_y: 0,
        };
        assert!(render_shape(&bad).is_err());
    }

    #[test]
    fn dataset_is_full_grid_and_deterministic() {
        let a = make_dataset();
        let b = make_dataset();
        assert_eq!(a.len(), GRID_SIZE);
        assert_eq!(a.images.data(), b.images.data());
        assert_eq!(a.factors, b.factors);
    }

    #[test]
    fn distinct_factors_give_distinct_images_up_to_known_coincidence() {
        // The scale-3 cross and scale-3 diamond rasterize to the same
        // 5-pixel plus sign; every other factor combination is unique.
        let ds = make_dataset();
        let mut seen: std::collections::HashMap<Vec<u8>, usize> = Default::default();
        for i in 0..ds.len() {
            let key: Vec<u8> = ds.images.row(i).iter().map(|&v| v as u8).collect();
            if let Some(&j) = seen.get(&key) {
                let (a, b) = (&ds.factors[j], &ds.factors[i]);
                assert_eq!(a.scale, 3);
                assert_eq!(b.scale, 3);
                assert_eq!((a.pos_x, a.pos_y), (b.pos_x, b.pos_y));
                let shapes = (a.shape, b.shape);
                assert_eq!(shapes, (ShapeKind::Cross, ShapeKind::Diamond));
            } else {
                seen.insert(key, i);
            }
        }
        assert_eq!(seen.len(), GRID_SIZE - 100);
    }

    #[test]
    fn pos_bin_rule() {
        assert_eq!(pos_bin(4), 0);
        assert_eq!(pos_bin(5), 1);
        assert_eq!(pos_bin(7), 1);
    }

    #[test]
    fn gaussian_pair_correlation() {
        for &(rho, n) in &[(0.0, 100_000), (0.9, 100_000)] {
            let s = sample_gaussian_pair(rho, n, 12).unwrap();
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for r in 0..n {
                let (x, y) = (s.at2(r, 0), s.at2(r, 1));
                sx += x;
                sy += y;
                sxx += x * x;
                syy += y * y;
                sxy += x * y;
            }
            let nf = n as f64;
            let cov = sxy / nf - sx / nf * sy / nf;
            let vx = sxx / nf - (sx / nf) * (sx / nf);
            let vy = syy / nf - (sy / nf) * (sy / nf);
            let r = cov / (vx * vy).sqrt();
            assert!((r - rho).abs() < 0.01, "rho {rho}: got {r}");
        }
    }

    #[test]
    fn gaussian_pair_deterministic_and_validated() {
        let a = sample_gaussian_pair(0.5, 100, 3).unwrap();
        let b = sample_gaussian_pair(0.5, 100, 3).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(sample_gaussian_pair(1.0, 10, 0).is_err());
        assert!(sample_gaussian_pair(-1.0, 10, 0).is_err());
    }

    #[test]
    fn episode_structure() {
        let ds = make_dataset();
        let classes = ds.shape_scale_classes();
        let pool: Vec<usize> = (0..9).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ep = make_episode(&classes, &pool, 3, 1, &mut rng).unwrap();
        assert_eq!(ep.support.len(), 3);
        let support_classes: HashSet<usize> = ep.support.iter().map(|&(_, c)| c).collect();
        assert_eq!(support_classes.len(), 3);
        assert!(support_classes.contains(&ep.query.1));
        assert!(!ep.support.iter().any(|&(i, _)| i == ep.query.0));
        // support labels match the dataset
        for &(i, c) in &ep.support {
            assert_eq!(classes[i], c);
        }
    }

    #[test]
    fn episode_deterministic_per_seed() {
        let ds = make_dataset();
        let classes = ds.shape_scale_classes();
        let pool: Vec<usize> = (0..9).collect();
        let mut r1 = ChaCha8Rng::seed_from_u64(8);
        let mut r2 = ChaCha8Rng::seed_from_u64(8);
        assert_eq!(
            make_episode(&classes, &pool, 3, 2, &mut r1).unwrap(),
            make_episode(&classes, &pool, 3, 2, &mut r2).unwrap()
        );
    }

    #[test]
    fn episode_insufficient_samples_rejected() {
        // class 0 has two samples; K+1 = 3 exceeds it
        let classes = vec![0, 0, 1, 1, 1];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(make_episode(&classes, &[0, 1], 2, 2, &mut rng).is_err());
    }

    #[test]
    fn episode_coverage_over_many_draws() {
        let ds = make_dataset();
        let classes = ds.shape_scale_classes();
        let pool: Vec<usize> = (0..9).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut seen = HashSet::new();
        for _ in 0..1000 {
            let ep = make_episode(&classes, &pool, 3, 1, &mut rng).unwrap();
            for (_, c) in ep.support {
                seen.insert(c);
            }
        }
        assert_eq!(seen.len(), 9, "all classes should appear across episodes");
    }
}
