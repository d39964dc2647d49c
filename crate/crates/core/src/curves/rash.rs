//! Event intensity by randomized averaged histograms with bins sized in event
//! space.
//!
//! A bin of size 5.7 holds the next five events plus 70% of the gap to the
//! sixth. Sizes are drawn left to right, uniform on `[min_bin, remaining]`,
//! and a remainder smaller than `min_bin` is folded into the bin just drawn,
//! so one histogram always carries a total mass of `m` events.

use rand::Rng;

/// One bin: time span `[start, end]` and the event mass it holds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bin {
    pub start: f64,
    pub end: f64,
    pub mass: f64,
}

/// Time at cumulative event count `c` in `[0, m]`. The first bin starts on the
/// first event; count `c >= 1` sits `frac(c)` of the way from event
/// `floor(c)` to event `floor(c) + 1` (1-based).
fn time_at(times: &[f64], c: f64) -> f64 {
    let m = times.len();
    if c <= 1.0 {
        return times[0];
    }
    let pos = c - 1.0;
    let i = pos.floor() as usize;
    if i >= m - 1 {
        return times[m - 1];
    }
    let frac = pos - i as f64;
    times[i] + frac * (times[i + 1] - times[i])
}

/// Draws one random partition of sorted event `times` into bins.
pub fn random_bins<R: Rng + ?Sized>(times: &[f64], min_bin: f64, rng: &mut R) -> Vec<Bin> {
    let m = times.len() as f64;
    debug_assert!(m >= min_bin);
    let mut bins = Vec::new();
    let mut remaining = m;
    let mut used = 0.0;
    let mut start = times[0];
    while remaining > 0.0 {
        let mut size = if remaining > min_bin {
            rng.random_range(min_bin..=remaining)
        } else {
            remaining
        };
        if remaining - size < min_bin {
            size = remaining;
        }
        remaining -= size;
        used = if remaining == 0.0 { m } else { used + size };
        let end = time_at(times, used);
        bins.push(Bin { start, end, mass: size });
        start = end;
    }
    bins
}

/// Accumulates piecewise-constant histograms onto daily cells, where cell `d`
/// covers `[d - 0.5, d + 0.5)`. Each histogram's density is extended past its
/// first and last bins at those bins' levels. Zero-width bins are deposited
/// as point masses.
pub struct DailyAccumulator {
    level_jumps: Vec<f64>,
    direct: Vec<f64>,
    histograms: usize,
}

impl DailyAccumulator {
    pub fn new(len_days: u32) -> Self {
        let cells = len_days as usize + 1;
        DailyAccumulator {
            level_jumps: vec![0.0; cells + 1],
            direct: vec![0.0; cells],
            histograms: 0,
        }
    }

    fn cells(&self) -> usize {
        self.direct.len()
    }

    fn cell_of(x: f64) -> i64 {
        (x + 0.5).floor() as i64
    }

    // density increases by `jump` for all t > x
    fn add_jump(&mut self, x: f64, jump: f64) {
        let c = Self::cell_of(x);
        if c < 0 {
            self.level_jumps[0] += jump;
        } else if (c as usize) < self.cells() {
            let c = c as usize;
            self.direct[c] += jump * (c as f64 + 0.5 - x);
            self.level_jumps[c + 1] += jump;
        }
    }

    fn add_point(&mut self, x: f64, mass: f64) {
        let c = Self::cell_of(x).clamp(0, self.cells() as i64 - 1) as usize;
        self.direct[c] += mass;
    }

    pub fn add_histogram(&mut self, bins: &[Bin]) {
        self.histograms += 1;
        let mut prev: Option<f64> = None;
        for b in bins {
            let width = b.end - b.start;
            if width <= 0.0 {
                self.add_point(b.start, b.mass);
                continue;
            }
            let density = b.mass / width;
            match prev {
                // level before the first real bin extends to -inf
                None => self.level_jumps[0] += density,
                Some(p) => self.add_jump(b.start, density - p),
            }
            prev = Some(density);
        }
    }

    /// Mean daily intensity over all added histograms.
    pub fn finish(self) -> Vec<f64> {
        let r = self.histograms.max(1) as f64;
        let mut level = 0.0;
        self.direct
            .iter()
            .enumerate()
            .map(|(c, direct)| {
                level += self.level_jumps[c];
                ((level + direct) / r).max(0.0)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fractional_positions_follow_the_gap_rule() {
        let t = [0.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0];
        assert_eq!(time_at(&t, 0.0), 0.0);
        assert_eq!(time_at(&t, 1.0), 0.0);
        // five events plus 70% of the gap between the 5th and 6th
        assert!((time_at(&t, 5.7) - 47.0).abs() < 1e-12);
        assert_eq!(time_at(&t, 7.0), 60.0);
    }

    #[test]
    fn bins_cover_span_and_carry_all_mass() {
        let t: Vec<f64> = (0..40).map(|i| (i * i) as f64).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let bins = random_bins(&t, 3.0, &mut rng);
            let mass: f64 = bins.iter().map(|b| b.mass).sum();
            assert!((mass - 40.0).abs() < 1e-9);
            assert!(bins.iter().all(|b| b.mass >= 3.0));
            assert_eq!(bins[0].start, 0.0);
            assert_eq!(bins.last().unwrap().end, 39.0 * 39.0);
            for w in bins.windows(2) {
                assert_eq!(w[0].end, w[1].start);
            }
        }
    }

    #[test]
    fn exactly_min_bin_events_gives_one_bin() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bins = random_bins(&[1.0, 2.0, 5.0], 3.0, &mut rng);
        assert_eq!(bins, vec![Bin { start: 1.0, end: 5.0, mass: 3.0 }]);
    }

    #[test]
    fn accumulator_spreads_density_over_cells() {
        // one bin over [2, 6] with 8 events: density 2 inside, extended outside
        let mut acc = DailyAccumulator::new(8);
        acc.add_histogram(&[Bin { start: 2.0, end: 6.0, mass: 8.0 }]);
        assert_eq!(acc.finish(), vec![2.0; 9]);

        // two bins with a jump at 4.25
        let mut acc = DailyAccumulator::new(6);
        acc.add_histogram(&[
            Bin { start: 2.0, end: 4.25, mass: 2.25 },
            Bin { start: 4.25, end: 5.25, mass: 3.0 },
        ]);
        let v = acc.finish();
        assert_eq!(&v[..4], &[1.0, 1.0, 1.0, 1.0]);
        // cell 4 = [3.5, 4.5): 0.75 at 1 + 0.25 at 3
        assert!((v[4] - 1.5).abs() < 1e-12);
        assert_eq!(&v[5..], &[3.0, 3.0]);
    }

    #[test]
    fn zero_width_bin_is_a_point_mass() {
        let mut acc = DailyAccumulator::new(4);
        acc.add_histogram(&[
            Bin { start: 2.0, end: 2.0, mass: 3.0 },
            Bin { start: 2.0, end: 4.0, mass: 4.0 },
        ]);
        assert_eq!(acc.finish(), vec![2.0, 2.0, 5.0, 2.0, 2.0]);
    }
}
