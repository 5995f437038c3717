//! Synthetic datasets. Every sample is a pure function of `(seed, index)`,
//! so datasets need no storage and any subset can be regenerated.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::grid::Grid;

pub const NOISE_STD: f64 = 0.1;
pub const DEFAULT_MARKER_GAIN: f32 = 2.0;

fn sample_rng(seed: u64, index: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos((index as u128) << 20);
    rng
}

fn noise_grid(side: usize, channels: usize, rng: &mut ChaCha8Rng) -> Grid {
    let normal = Normal::new(0.0, NOISE_STD).unwrap();
    Grid::from_fn(side, side, channels, |_, _, _| normal.sample(rng) as f32)
}

/// Indices `[0, n·0.8)` for training, the rest for evaluation.
pub fn split(count: usize) -> (Vec<usize>, Vec<usize>) {
    let cut = count * 4 / 5;
    ((0..cut).collect(), (cut..count).collect())
}

/// Position probe: one marker token in a noise field; the label is the
/// `regions × regions` cell holding the marker. The marker content is the
/// same everywhere, so only position tells the classes apart.
#[derive(Clone, Debug, PartialEq)]
pub struct PosProbe {
    pub seed: u64,
    pub count: usize,
    /// Image side in pixels.
    pub side: usize,
    pub channels: usize,
    pub regions: usize,
    /// Amplitude of the alternating `±a` marker pattern.
    pub marker_gain: f32,
}

impl PosProbe {
    pub fn new(seed: u64, count: usize, side: usize, channels: usize, regions: usize) -> Result<Self> {
        if regions == 0 || regions > side || channels == 0 || count == 0 {
            return Err(Error::invalid("posprobe needs count, channels >= 1 and 1 <= regions <= side"));
        }
        Ok(PosProbe { seed, count, side, channels, regions, marker_gain: DEFAULT_MARKER_GAIN })
    }

    pub fn classes(&self) -> usize {
        self.regions * self.regions
    }

    pub fn marker(&self) -> Vec<f32> {
        let a = self.marker_gain;
        (0..self.channels).map(|c| if c % 2 == 0 { a } else { -a }).collect()
    }

    fn region_span(&self, r: usize) -> (usize, usize) {
        (r * self.side / self.regions, (r + 1) * self.side / self.regions)
    }

    pub fn sample(&self, index: usize) -> (Grid, usize) {
        let mut rng = sample_rng(self.seed, index, 1);
        let label = rng.gen_range(0..self.classes());
        let (y0, y1) = self.region_span(label / self.regions);
        let (x0, x1) = self.region_span(label % self.regions);
        let y = rng.gen_range(y0..y1);
        let x = rng.gen_range(x0..x1);
        let mut img = noise_grid(self.side, self.channels, &mut rng);
        for (c, v) in self.marker().into_iter().enumerate() {
            img.set(y, x, c, v);
        }
        (img, label)
    }
}

/// Reconstruction data: a window-periodic motif drawn from a small bank,
/// a random linear ramp across the whole image, and pixel noise.
#[derive(Clone, Debug, PartialEq)]
pub struct Textures {
    pub seed: u64,
    pub side: usize,
    pub channels: usize,
    pub period: usize,
    motifs: Vec<Grid>,
}

impl Textures {
    pub fn new(seed: u64, side: usize, channels: usize, period: usize, bank: usize) -> Result<Self> {
        if period == 0 || bank == 0 || channels == 0 || side == 0 {
            return Err(Error::invalid("textures need side, channels, period and bank >= 1"));
        }
        let mut rng = sample_rng(seed, 0, 2);
        let motifs = (0..bank)
            .map(|_| Grid::from_fn(period, period, channels, |_, _, _| rng.gen_range(-1.0..1.0)))
            .collect();
        Ok(Textures { seed, side, channels, period, motifs })
    }

    pub fn classes(&self) -> usize {
        self.motifs.len()
    }

    pub fn sample(&self, index: usize) -> Grid {
        self.sample_labeled(index).0
    }

    /// A sample together with the index of its motif, for supervised
    /// texture classification.
    pub fn sample_labeled(&self, index: usize) -> (Grid, usize) {
        let mut rng = sample_rng(self.seed, index, 3);
        let label = rng.gen_range(0..self.motifs.len());
        let motif = &self.motifs[label];
        let gain: f32 = rng.gen_range(0.5..1.0);
        let angle: f64 = rng.gen_range(0.0..core::f64::consts::TAU);
        let (dy, dx) = (libm::sin(angle) as f32, libm::cos(angle) as f32);
        let noise = noise_grid(self.side, self.channels, &mut rng);
        let p = self.period;
        let half = (self.side as f32 - 1.0) / 2.0;
        let img = Grid::from_fn(self.side, self.side, self.channels, |y, x, c| {
            let ramp = ((y as f32 - half) * dy + (x as f32 - half) * dx) / half.max(1.0);
            gain * motif.at(y % p, x % p, c) + 0.5 * ramp + noise.at(y, x, c)
        });
        (img, label)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn posprobe_is_deterministic_and_labelled_by_marker() {
        let ds = PosProbe::new(3, 100, 16, 3, 2).unwrap();
        for i in 0..100 {
            let (img, label) = ds.sample(i);
            assert_eq!(ds.sample(i), (img.clone(), label));
            let marker = ds.marker();
            let hits: Vec<(usize, usize)> = (0..16)
                .flat_map(|y| (0..16).map(move |x| (y, x)))
                .filter(|&(y, x)| img.token(y, x) == marker.as_slice())
                .collect();
            assert_eq!(hits.len(), 1);
            let (y, x) = hits[0];
            assert_eq!(label, (y / 8) * 2 + x / 8);
        }
    }

    #[test]
    fn posprobe_labels_are_balanced() {
        let ds = PosProbe::new(0, 4000, 18, 3, 2).unwrap();
        let mut counts = [0usize; 4];
        for i in 0..ds.count {
            counts[ds.sample(i).1] += 1;
        }
        assert!(counts.iter().all(|&c| (900..1100).contains(&c)), "{counts:?}");
    }

    #[test]
    fn split_is_eighty_twenty() {
        let (tr, te) = split(10);
        assert_eq!(tr, (0..8).collect::<Vec<_>>());
        assert_eq!(te, vec![8, 9]);
    }

    #[test]
    fn textures_differ_per_index_and_repeat_per_seed() {
        let t = Textures::new(1, 16, 3, 4, 4).unwrap();
        assert_eq!(t.sample(5), Textures::new(1, 16, 3, 4, 4).unwrap().sample(5));
        assert_ne!(t.sample(5), t.sample(6));
        assert_eq!(t.sample_labeled(5).0, t.sample(5));
        assert!((0..50).all(|i| t.sample_labeled(i).1 < t.classes()));
        assert!(Textures::new(1, 16, 3, 0, 4).is_err());
    }
}
