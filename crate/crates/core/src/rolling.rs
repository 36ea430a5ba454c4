//! Fixed-capacity rolling windows and their statistics.

use std::collections::VecDeque;

/// Bounded FIFO that evicts its oldest entry once full.
#[derive(Debug, Clone)]
pub struct RingBuffer {
    buf: VecDeque<f64>,
    capacity: usize,
}

impl RingBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "ring buffer capacity must be positive");
        Self {
            buf: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    /// Appends `x`, returning the evicted value if the buffer was full.
    pub fn push(&mut self, x: f64) -> Option<f64> {
        let evicted = if self.buf.len() == self.capacity {
            self.buf.pop_front()
        } else {
            None
        };
        self.buf.push_back(x);
        evicted
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.buf.iter().copied()
    }
}

/// Population variance; `0` for empty or single-element input.
pub fn population_variance(values: impl IntoIterator<Item = f64>) -> f64 {
    let values: Vec<f64> = values.into_iter().collect();
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).max(0.0)
}

/// Sliding-window mean and population standard deviation, recomputed from
/// the window contents on every push.
#[derive(Debug, Clone)]
pub struct RollingMoments {
    window: RingBuffer,
    mean: f64,
    std: f64,
}

impl RollingMoments {
    pub fn new(capacity: usize) -> Self {
        Self {
            window: RingBuffer::new(capacity),
            mean: 0.0,
            std: 0.0,
        }
    }

    pub fn push(&mut self, x: f64) {
        self.window.push(x);
        let n = self.window.len() as f64;
        self.mean = self.window.iter().sum::<f64>() / n;
        let mean = self.mean;
        self.std = (self.window.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn std_dev(&self) -> f64 {
        self.std
    }

    pub fn window(&self) -> &RingBuffer {
        &self.window
    }
}

/// Sliding-window minimum and maximum via monotonic deques.
#[derive(Debug, Clone)]
pub struct RollingMinMax {
    capacity: usize,
    count: u64,
    mins: VecDeque<(u64, f64)>,
    maxs: VecDeque<(u64, f64)>,
}

impl RollingMinMax {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "window capacity must be positive");
        Self {
            capacity,
            count: 0,
            mins: VecDeque::new(),
            maxs: VecDeque::new(),
        }
    }

    pub fn push(&mut self, x: f64) {
        let idx = self.count;
        self.count += 1;
        while self.mins.back().is_some_and(|&(_, v)| v >= x) {
            self.mins.pop_back();
        }
        self.mins.push_back((idx, x));
        while self.maxs.back().is_some_and(|&(_, v)| v <= x) {
            self.maxs.pop_back();
        }
        self.maxs.push_back((idx, x));

        let oldest = self.count.saturating_sub(self.capacity as u64);
        while self.mins.front().is_some_and(|&(i, _)| i < oldest) {
            self.mins.pop_front();
        }
        while self.maxs.front().is_some_and(|&(i, _)| i < oldest) {
            self.maxs.pop_front();
        }
    }

    pub fn min(&self) -> Option<f64> {
        self.mins.front().map(|&(_, v)| v)
    }

    pub fn max(&self) -> Option<f64> {
        self.maxs.front().map(|&(_, v)| v)
    }

    /// Min-max normalization of `x` against the current window; `0.5` when
    /// the window is empty or degenerate.
    pub fn normalize(&self, x: f64) -> f64 {
        match (self.min(), self.max()) {
            (Some(lo), Some(hi)) if hi > lo => ((x - lo) / (hi - lo)).clamp(0.0, 1.0),
            _ => 0.5,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ring_buffer_evicts_oldest() {
        let mut rb = RingBuffer::new(2);
        assert_eq!(rb.push(1.0), None);
        assert_eq!(rb.push(2.0), None);
        assert_eq!(rb.push(3.0), Some(1.0));
        assert_eq!(rb.iter().collect::<Vec<_>>(), vec![2.0, 3.0]);
    }

    #[test]
    fn variance_examples() {
        assert_eq!(population_variance([0.7; 5]), 0.0);
        assert_eq!(population_variance([0.0, 1.0]), 0.25);
        assert!((population_variance([0.2, 0.5, 0.8]) - 0.06).abs() < 1e-15);
        assert_eq!(population_variance([3.0]), 0.0);
        assert_eq!(population_variance(std::iter::empty()), 0.0);
    }

    #[test]
    fn minmax_degenerate_is_neutral() {
        let mut mm = RollingMinMax::new(4);
        assert_eq!(mm.normalize(1.0), 0.5);
        mm.push(0.3);
        mm.push(0.3);
        assert_eq!(mm.normalize(0.3), 0.5);
    }

    proptest! {
        #[test]
        fn moments_match_recompute(xs in prop::collection::vec(0.0..5.0f64, 1..400), cap in 2usize..40) {
            let mut m = RollingMoments::new(cap);
            for (i, &x) in xs.iter().enumerate() {
                m.push(x);
                let lo = (i + 1).saturating_sub(cap);
                let w = &xs[lo..=i];
                let mean = w.iter().sum::<f64>() / w.len() as f64;
                let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
                prop_assert!((m.mean() - mean).abs() < 1e-9);
                prop_assert!((m.std_dev() - var.sqrt()).abs() < 1e-7);
            }
        }

        #[test]
        fn minmax_match_recompute(xs in prop::collection::vec(-3.0..3.0f64, 1..400), cap in 1usize..40) {
            let mut mm = RollingMinMax::new(cap);
            for (i, &x) in xs.iter().enumerate() {
                mm.push(x);
                let lo = (i + 1).saturating_sub(cap);
                let w = &xs[lo..=i];
                prop_assert_eq!(mm.min().unwrap(), w.iter().copied().fold(f64::INFINITY, f64::min));
                prop_assert_eq!(mm.max().unwrap(), w.iter().copied().fold(f64::NEG_INFINITY, f64::max));
            }
        }
    }
}
