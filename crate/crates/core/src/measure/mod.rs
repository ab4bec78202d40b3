//! Discrete measures and point-cloud preprocessing.
//!
//! A [`DiscreteMeasure`] is an `N × d` particle matrix plus an activity mask.
//! Active particles carry uniform mass `1 / N_active`; inactive rows are kept
//! at exactly zero so that padding never leaks into downstream sums.
//!
//! All randomized operations take a `u64` seed and draw from a ChaCha8 stream
//! seeded with it, so they are pure functions of `(input, seed)`.

mod io;
mod synth;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use io::{load_points_csv, save_points_csv, DatasetManifest, Preprocess, TaskKind};
pub use synth::{synth_dataset, ShapeFamily, SynthSpec};

pub type Rng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes `base` with a sequence of tags into an independent stream seed.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    tags.iter().fold(splitmix(base), |acc, &t| splitmix(acc ^ splitmix(t)))
}

/// `round(x)` with halves rounded up, for non-negative `x`.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteMeasure {
    points: Tensor,
    mask: Vec<bool>,
}

impl DiscreteMeasure {
    /// Every row active.
    pub fn new(points: Tensor) -> Result<Self> {
        if points.rank() != 2 {
            return Err(Error::shape(format!(
                "points must be N×d, got {:?}",
                points.shape()
            )));
        }
        let mask = vec![true; points.rows()];
        Ok(DiscreteMeasure { points, mask })
    }

    /// Rows with `mask == false` are zeroed.
    pub fn with_mask(mut points: Tensor, mask: Vec<bool>) -> Result<Self> {
        if points.rank() != 2 || points.rows() != mask.len() {
            return Err(Error::shape(format!(
                "mask of {} for points {:?}",
                mask.len(),
                points.shape()
            )));
        }
        for (i, &on) in mask.iter().enumerate() {
            if !on {
                points.row_mut(i).fill(0.0);
            }
        }
        Ok(DiscreteMeasure { points, mask })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        DiscreteMeasure::new(Tensor::from_rows(rows)?)
    }

    pub fn points(&self) -> &Tensor {
        &self.points
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn into_parts(self) -> (Tensor, Vec<bool>) {
        (self.points, self.mask)
    }

    pub fn rows(&self) -> usize {
        self.points.rows()
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    pub fn n_active(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn active_indices(&self) -> Vec<usize> {
        (0..self.rows()).filter(|&i| self.mask[i]).collect()
    }

    pub fn active_rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.rows())
            .filter(|&i| self.mask[i])
            .map(|i| self.points.row(i))
    }

    /// Mass of each active particle.
    pub fn weight(&self) -> f64 {
        1.0 / self.n_active() as f64
    }

    /// Drops inactive rows.
    pub fn compact(&self) -> DiscreteMeasure {
        let idx = self.active_indices();
        DiscreteMeasure {
            points: self.points.select_rows(&idx),
            mask: vec![true; idx.len()],
        }
    }

    /// Appends `extra` inactive zero rows.
    pub fn padded(&self, extra: usize) -> DiscreteMeasure {
        let d = self.dim();
        let mut data = self.points.data().to_vec();
        data.resize(data.len() + extra * d, 0.0);
        let mut mask = self.mask.clone();
        mask.resize(mask.len() + extra, false);
        DiscreteMeasure {
            points: Tensor::from_vec(&[mask.len(), d], data).expect("consistent shape"),
            mask,
        }
    }

    /// Same measure with rows reordered: row `i` of the result is row `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> DiscreteMeasure {
        DiscreteMeasure {
            points: self.points.select_rows(perm),
            mask: perm.iter().map(|&i| self.mask[i]).collect(),
        }
    }

    /// Zero-pads columns up to `width`.
    pub fn widened(&self, width: usize) -> Tensor {
        self.points.pad_cols(0, width)
    }

    /// Truncates columns to the first `width`.
    pub fn narrowed(&self, width: usize) -> DiscreteMeasure {
        DiscreteMeasure {
            points: self.points.slice_cols(0, width),
            mask: self.mask.clone(),
        }
    }

    /// Mean over active particles.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for row in self.active_rows() {
            for (a, b) in m.iter_mut().zip(row) {
                *a += b;
            }
        }
        let n = self.n_active() as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// Single scalar standard deviation over all active coordinates.
    pub fn global_std(&self) -> f64 {
        let mean = self.mean();
        let mut acc = 0.0;
        for row in self.active_rows() {
            for (x, m) in row.iter().zip(&mean) {
                acc += (x - m) * (x - m);
            }
        }
        (acc / (self.n_active() * self.dim()) as f64).sqrt()
    }
}

/// A training or evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub input: DiscreteMeasure,
    pub label: Option<usize>,
    pub target: Option<DiscreteMeasure>,
}

impl Sample {
    pub fn classification(id: impl Into<String>, input: DiscreteMeasure, label: usize) -> Self {
        Sample {
            id: id.into(),
            input,
            label: Some(label),
            target: None,
        }
    }

    pub fn completion(
        id: impl Into<String>,
        input: DiscreteMeasure,
        target: DiscreteMeasure,
    ) -> Self {
        Sample {
            id: id.into(),
            input,
            label: None,
            target: Some(target),
        }
    }
}

/// Zero mean over active particles and unit global standard deviation.
pub fn normalize(m: &DiscreteMeasure) -> Result<DiscreteMeasure> {
    if m.n_active() == 0 {
        return Err(Error::AllMasked);
    }
    let mean = m.mean();
    let std = m.global_std();
    if !(std > 0.0) {
        return Err(Error::DegenerateSpread);
    }
    let mut points = m.points.clone();
    for i in 0..m.rows() {
        if m.mask[i] {
            for (x, mu) in points.row_mut(i).iter_mut().zip(&mean) {
                *x = (*x - mu) / std;
            }
        }
    }
    DiscreteMeasure::with_mask(points, m.mask.clone())
}

/// Removes every active particle within distance `radius` of either of two
/// distinct, uniformly chosen active particles.
pub fn make_partial(m: &DiscreteMeasure, radius: f64, seed: u64) -> Result<DiscreteMeasure> {
    let active = m.active_indices();
    if active.len() < 2 {
        return Err(Error::EmptyPartial);
    }
    let mut rng = rng_from_seed(seed);
    let pick = index::sample(&mut rng, active.len(), 2);
    let centers = [active[pick.index(0)], active[pick.index(1)]];
    let mut mask = m.mask.clone();
    for &i in &active {
        let near = centers.iter().any(|&c| {
            let d2: f64 = m
                .points
                .row(i)
                .iter()
                .zip(m.points.row(c))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d2.sqrt() <= radius
        });
        if near {
            mask[i] = false;
        }
    }
    if !mask.iter().any(|&v| v) {
        return Err(Error::EmptyPartial);
    }
    DiscreteMeasure::with_mask(m.points.clone(), mask)
}

/// Appends `round(fraction · N_active)` standard-normal particles.
///
/// Returns the extended measure and the pin mask, which is true exactly on the
/// original active rows. The new block is drawn row-major from the seed's
/// standard-normal stream.
pub fn add_free_particles(
    partial: &DiscreteMeasure,
    fraction: f64,
    seed: u64,
) -> (DiscreteMeasure, Vec<bool>) {
    let k = round_half_up(fraction * partial.n_active() as f64);
    let d = partial.dim();
    let mut rng = rng_from_seed(seed);
    let mut data = partial.points.data().to_vec();
    data.extend((0..k * d).map(|_| -> f64 { StandardNormal.sample(&mut rng) }));
    let mut mask = partial.mask.clone();
    mask.extend(std::iter::repeat_n(true, k));
    let mut pins = partial.mask.clone();
    pins.extend(std::iter::repeat_n(false, k));
    let points = Tensor::from_vec(&[mask.len(), d], data).expect("consistent shape");
    (DiscreteMeasure { points, mask }, pins)
}

/// Replaces `round(fraction · N_active)` uniformly chosen active particles
/// with standard-normal draws.
pub fn add_noise(m: &DiscreteMeasure, fraction: f64, seed: u64) -> DiscreteMeasure {
    let active = m.active_indices();
    let k = round_half_up(fraction * active.len() as f64).min(active.len());
    let mut rng = rng_from_seed(seed);
    let chosen = index::sample(&mut rng, active.len(), k);
    let mut points = m.points.clone();
    for c in chosen.iter() {
        for x in points.row_mut(active[c]) {
            *x = StandardNormal.sample(&mut rng);
        }
    }
    DiscreteMeasure {
        points,
        mask: m.mask.clone(),
    }
}

/// Samples padded to a common row count.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `B × N_max × d`, zero on padded rows.
    pub points: Tensor,
    /// `B` masks of length `N_max`.
    pub masks: Vec<Vec<bool>>,
    /// Original row count of every sample.
    pub rows: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn n_max(&self) -> usize {
        self.points.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.points.shape()[2]
    }

    /// The padded slice of sample `b` (`N_max` rows).
    pub fn padded_sample(&self, b: usize) -> DiscreteMeasure {
        let (n, d) = (self.n_max(), self.dim());
        let data = self.points.data()[b * n * d..(b + 1) * n * d].to_vec();
        DiscreteMeasure {
            points: Tensor::from_vec(&[n, d], data).expect("consistent shape"),
            mask: self.masks[b].clone(),
        }
    }

    /// Recovers the measures passed to [`pad_batch`], bit for bit.
    pub fn unbatch(&self) -> Vec<DiscreteMeasure> {
        let d = self.dim();
        (0..self.len())
            .map(|b| {
                let full = self.padded_sample(b);
                let r = self.rows[b];
                DiscreteMeasure {
                    points: Tensor::from_vec(&[r, d], full.points.data()[..r * d].to_vec())
                        .expect("consistent shape"),
                    mask: full.mask[..r].to_vec(),
                }
            })
            .collect()
    }
}

/// Stacks measures into a zero-padded batch with `N_max` = largest row count.
pub fn pad_batch(samples: &[DiscreteMeasure]) -> Result<Batch> {
    let first = samples
        .first()
        .ok_or_else(|| Error::shape("cannot batch an empty list"))?;
    let d = first.dim();
    let n_max = samples.iter().map(DiscreteMeasure::rows).max().unwrap_or(0);
    let mut data = Vec::with_capacity(samples.len() * n_max * d);
    let mut masks = Vec::with_capacity(samples.len());
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        if s.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: s.dim(),
            });
        }
        let p = s.padded(n_max - s.rows());
        data.extend_from_slice(p.points.data());
        masks.push(p.mask);
        rows.push(s.rows());
    }
    Ok(Batch {
        points: Tensor::from_vec(&[samples.len(), n_max, d], data)?,
        masks,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn cloud(rows: &[&[f64]]) -> DiscreteMeasure {
        DiscreteMeasure::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn random_cloud(n: usize, d: usize, seed: u64) -> DiscreteMeasure {
        let mut rng = rng_from_seed(seed);
        let t = Tensor::from_fn(&[n, d], |_| rng.gen_range(-3.0..5.0));
        DiscreteMeasure::new(t).unwrap()
    }

    #[test]
    fn normalize_two_points() {
        let m = normalize(&cloud(&[&[0.0], &[2.0]])).unwrap();
        assert_eq!(m.points().data(), &[-1.0, 1.0]);
    }

    #[test]
    fn normalize_is_idempotent() {
        let m = normalize(&random_cloud(30, 3, 1)).unwrap();
        let again = normalize(&m).unwrap();
        assert!(m.points().max_abs_diff(again.points()) <= 1e-12);
    }

    #[test]
    fn normalize_random_statistics() {
        let m = normalize(&random_cloud(50, 2, 7)).unwrap();
        // recompute directly from the raw buffer
        let data = m.points().data();
        let (mut sx, mut sy) = (0.0, 0.0);
        for r in data.chunks(2) {
            sx += r[0];
            sy += r[1];
        }
        assert!((sx / 50.0).abs() <= 1e-12 && (sy / 50.0).abs() <= 1e-12);
        let var: f64 = data.iter().map(|v| v * v).sum::<f64>() / 100.0;
        assert!((var.sqrt() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn normalize_rejects_coincident_cloud() {
        let m = cloud(&[&[1.0, 1.0], &[1.0, 1.0]]);
        assert!(matches!(normalize(&m), Err(Error::DegenerateSpread)));
    }

    #[test]
    fn partial_with_zero_radius_removes_only_centers() {
        let m = normalize(&random_cloud(20, 2, 3)).unwrap();
        let p = make_partial(&m, 0.0, 11).unwrap();
        assert_eq!(p.n_active(), 18);
        for i in 0..20 {
            if !p.mask()[i] {
                assert!(p.points().row(i).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn partial_covering_everything_is_empty() {
        let m = normalize(&random_cloud(20, 2, 3)).unwrap();
        assert!(matches!(make_partial(&m, 100.0, 1), Err(Error::EmptyPartial)));
    }

    #[test]
    fn partial_never_removes_far_particles() {
        // exhaustive over seeds on a small cloud: recover the centers by brute force
        let m = normalize(&random_cloud(9, 2, 5)).unwrap();
        let r = 0.5;
        for seed in 0..40 {
            let p = make_partial(&m, r, seed).unwrap();
            let removed: Vec<usize> = (0..9).filter(|&i| !p.mask()[i]).collect();
            let dist = |a: usize, b: usize| -> f64 {
                m.points()
                    .row(a)
                    .iter()
                    .zip(m.points().row(b))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt()
            };
            // some pair of removed particles explains all removals
            let ok = removed.iter().any(|&c1| {
                removed.iter().any(|&c2| {
                    c1 != c2
                        && (0..9).all(|i| {
                            let near = dist(i, c1) <= r || dist(i, c2) <= r;
                            near == !p.mask()[i]
                        })
                })
            });
            assert!(ok, "seed {seed}");
        }
    }

    #[test]
    fn free_particles_count_and_stream() {
        let m = random_cloud(40, 2, 9);
        let (ext, pins) = add_free_particles(&m, 0.275, 42);
        assert_eq!(ext.rows(), 51);
        assert_eq!(pins.iter().filter(|&&p| p).count(), 40);
        assert!(pins[40..].iter().all(|&p| !p));
        let mut rng = rng_from_seed(42);
        let expect: Vec<f64> = (0..22).map(|_| StandardNormal.sample(&mut rng)).collect();
        assert_eq!(&ext.points().data()[80..], &expect[..]);
        assert_eq!(ext.points().select_rows(&(0..40).collect::<Vec<_>>()), *m.points());
    }

    #[test]
    fn zero_free_fraction_is_identity() {
        let m = random_cloud(10, 3, 2);
        let (ext, pins) = add_free_particles(&m, 0.0, 1);
        assert_eq!(ext, m);
        assert!(pins.iter().all(|&p| p));
    }

    #[test]
    fn noise_replaces_exact_count() {
        let m = random_cloud(100, 2, 4);
        let n = add_noise(&m, 0.05, 8);
        let changed = (0..100)
            .filter(|&i| m.points().row(i) != n.points().row(i))
            .count();
        assert_eq!(changed, 5);
        assert_eq!(add_noise(&m, 0.0, 8), m);
        let all = add_noise(&m, 1.0, 8);
        assert_eq!(all.mask(), m.mask());
        assert!((0..100).all(|i| m.points().row(i) != all.points().row(i)));
    }

    #[test]
    fn batch_shapes_and_padding() {
        let a = random_cloud(3, 2, 1);
        let b = random_cloud(5, 2, 2);
        let batch = pad_batch(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(batch.points.shape(), &[2, 5, 2]);
        assert_eq!(batch.masks[0], vec![true, true, true, false, false]);
        assert!(batch.points.data()[6..10].iter().all(|&v| v == 0.0));
        assert_eq!(batch.unbatch(), vec![a.clone(), b]);
        let single = pad_batch(std::slice::from_ref(&a)).unwrap();
        assert_eq!(single.n_max(), 3);
        assert!(single.masks[0].iter().all(|&m| m));
    }

    #[test]
    fn batch_dimension_mismatch() {
        let a = random_cloud(3, 2, 1);
        let b = random_cloud(3, 3, 1);
        assert!(matches!(
            pad_batch(&[a, b]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn padding_is_inert_for_preprocessing() {
        let m = normalize(&random_cloud(12, 2, 6)).unwrap();
        let padded = m.padded(4);
        let n1 = normalize(&padded).unwrap();
        assert_eq!(n1.compact(), normalize(&m).unwrap().compact());
        let p0 = make_partial(&m, 0.4, 3).unwrap();
        let p1 = make_partial(&padded, 0.4, 3).unwrap();
        assert_eq!(p1.compact(), p0.compact());
        assert_eq!(add_noise(&padded, 0.25, 2).compact(), add_noise(&m, 0.25, 2).compact());
    }

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(round_half_up(2.5), 3);
        assert_eq!(round_half_up(2.49), 2);
        assert_eq!(round_half_up(40.0 * 0.275), 11);
    }
}
