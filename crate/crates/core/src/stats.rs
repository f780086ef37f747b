use crate::par;
use crate::rng::{Stream, StreamFactory};
use serde::Serialize;

/// How an estimate was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Exact,
    McBirth,
    McDeath,
    Mc,
}

/// A point estimate with its uncertainty.
///
/// Exact estimates have `std_error == 0` and carry the truncation budget in
/// `budget`; Monte Carlo estimates carry a sample standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EstimateWithCI {
    pub point: f64,
    pub std_error: f64,
    pub n_samples: u64,
    pub method: Method,
    pub budget: f64,
}

impl EstimateWithCI {
    pub fn exact(point: f64, budget: f64) -> Self {
        Self {
            point,
            std_error: 0.0,
            n_samples: 0,
            method: Method::Exact,
            budget,
        }
    }

    /// Two-sample z statistic. Differences within the truncation budgets and
    /// rounding are treated as zero.
    pub fn z_against(&self, other: &EstimateWithCI) -> f64 {
        let se = (self.std_error.powi(2) + other.std_error.powi(2)).sqrt();
        let slack = self.budget
            + other.budget
            + 64.0 * f64::EPSILON * self.point.abs().max(other.point.abs());
        let diff = ((self.point - other.point).abs() - slack).max(0.0);
        if se == 0.0 {
            if diff == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            diff / se
        }
    }

    /// z statistic of this estimate against a known value.
    pub fn z_to(&self, value: f64) -> f64 {
        self.z_against(&EstimateWithCI::exact(value, 0.0))
    }
}

/// Mergeable running mean and variance (Welford / Chan).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Accumulator {
    pub n: u64,
    pub mean: f64,
    pub m2: f64,
}

impl Accumulator {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&mut self, other: &Accumulator) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        self.mean += delta * other.n as f64 / n as f64;
        self.m2 += other.m2 + delta * delta * (self.n as f64) * (other.n as f64) / n as f64;
        self.n = n;
    }

    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn std_error(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.variance() / self.n as f64).sqrt()
        }
    }

    pub fn estimate(&self, method: Method) -> EstimateWithCI {
        EstimateWithCI {
            point: self.mean,
            std_error: self.std_error(),
            n_samples: self.n,
            method,
            budget: 0.0,
        }
    }
}

/// Joint accumulator for (x, y) pairs, used by delta-method estimators.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PairAccumulator {
    pub n: u64,
    pub mean_x: f64,
    pub mean_y: f64,
    pub m2_x: f64,
    pub m2_y: f64,
    pub cxy: f64,
}

impl PairAccumulator {
    pub fn push(&mut self, x: f64, y: f64) {
        self.n += 1;
        let n = self.n as f64;
        let dx = x - self.mean_x;
        let dy = y - self.mean_y;
        self.mean_x += dx / n;
        self.mean_y += dy / n;
        self.m2_x += dx * (x - self.mean_x);
        self.m2_y += dy * (y - self.mean_y);
        self.cxy += dx * (y - self.mean_y);
    }

    pub fn merge(&mut self, o: &PairAccumulator) {
        if o.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *o;
            return;
        }
        let (na, nb) = (self.n as f64, o.n as f64);
        let n = na + nb;
        let dx = o.mean_x - self.mean_x;
        let dy = o.mean_y - self.mean_y;
        self.mean_x += dx * nb / n;
        self.mean_y += dy * nb / n;
        self.m2_x += o.m2_x + dx * dx * na * nb / n;
        self.m2_y += o.m2_y + dy * dy * na * nb / n;
        self.cxy += o.cxy + dx * dy * na * nb / n;
        self.n += o.n;
    }
}

/// State that can absorb another partial result of the same kind.
pub trait Mergeable: Send {
    fn empty() -> Self;
    fn absorb(&mut self, other: &Self);
}

impl Mergeable for Accumulator {
    fn empty() -> Self {
        Self::default()
    }

    fn absorb(&mut self, other: &Self) {
        self.merge(other)
    }
}

impl Mergeable for PairAccumulator {
    fn empty() -> Self {
        Self::default()
    }

    fn absorb(&mut self, other: &Self) {
        self.merge(other)
    }
}

impl<const N: usize> Mergeable for [Accumulator; N] {
    fn empty() -> Self {
        [Accumulator::default(); N]
    }

    fn absorb(&mut self, other: &Self) {
        for (a, b) in self.iter_mut().zip(other) {
            a.merge(b);
        }
    }
}

/// Samples per stream in [`run_chunked`].
pub const MC_CHUNK: u64 = 4096;

/// Runs `n` draws in fixed chunks of [`MC_CHUNK`], chunk `c` on stream `c`,
/// and merges the partial states in chunk order.
pub fn run_chunked<A: Mergeable>(
    n: u64,
    streams: &StreamFactory,
    draw: impl Fn(&mut Stream, &mut A) + Sync + Send,
) -> A {
    let chunks = n.div_ceil(MC_CHUNK) as usize;
    let partial = par::map_indexed(chunks, |c| {
        let mut rng = streams.stream(c as u64);
        let mut acc = A::empty();
        let count = MC_CHUNK.min(n - c as u64 * MC_CHUNK);
        for _ in 0..count {
            draw(&mut rng, &mut acc);
        }
        acc
    });
    let mut total = A::empty();
    for p in &partial {
        total.absorb(p);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_matches_single_pass() {
        let xs: Vec<f64> = (0..100).map(|i| ((i * 37) % 11) as f64 * 0.3).collect();
        let mut whole = Accumulator::default();
        xs.iter().for_each(|x| whole.push(*x));
        let mut a = Accumulator::default();
        let mut b = Accumulator::default();
        xs[..41].iter().for_each(|x| a.push(*x));
        xs[41..].iter().for_each(|x| b.push(*x));
        a.merge(&b);
        assert_eq!(a.n, whole.n);
        assert!((a.mean - whole.mean).abs() < 1e-12);
        assert!((a.m2 - whole.m2).abs() < 1e-9);
    }
}
