//! Seeded random streams and induced-map orbits that sample `μ|_Y`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DynSystem, Point};
use crate::error::{Error, Result};

/// Independent stream `stream` of the generator seeded by `seed`.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One induced step as seen by an orbit: the current point, its return time,
/// and whether that return time was censored at the cap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InducedSample {
    pub y: Point,
    pub phi: u64,
    pub censored: bool,
}

/// Orbit of the first-return map. When an excursion exceeds the cap the
/// return time is reported as censored and the orbit restarts from a fresh
/// Lebesgue point followed by a short burn-in.
pub struct InducedOrbit<'a> {
    sys: &'a DynSystem,
    rng: ChaCha8Rng,
    y: Point,
    cap: u64,
    restart_burn_in: usize,
    pub overflows: u64,
}

impl<'a> InducedOrbit<'a> {
    pub fn new(sys: &'a DynSystem, seed: u64, stream: u64, cap: u64, burn_in: usize) -> Result<Self> {
        let mut rng = rng_for(seed, stream);
        let y = sys.sample_lebesgue(&mut rng);
        let mut orbit = InducedOrbit {
            sys,
            rng,
            y,
            cap,
            restart_burn_in: 32,
            overflows: 0,
        };
        orbit.burn(burn_in)?;
        Ok(orbit)
    }

    fn burn(&mut self, steps: usize) -> Result<()> {
        for _ in 0..steps {
            self.next_sample()?;
        }
        Ok(())
    }

    pub fn current(&self) -> Point {
        self.y
    }

    pub fn next_sample(&mut self) -> Result<InducedSample> {
        let y = self.y;
        match self.sys.induced_step(y, self.cap) {
            Ok((fy, phi)) => {
                self.y = fy;
                Ok(InducedSample {
                    y,
                    phi,
                    censored: false,
                })
            }
            Err(Error::Overflow { .. }) => {
                self.overflows += 1;
                self.y = self.sys.sample_lebesgue(&mut self.rng);
                self.burn(self.restart_burn_in)?;
                Ok(InducedSample {
                    y,
                    phi: self.cap,
                    censored: true,
                })
            }
            Err(e) => Err(e),
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Uniform draw in `[lo, hi)`.
pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}
