use statrs::distribution::{ContinuousCDF, StudentsT};

/// Mean and Student-t confidence half-width of a sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interval {
    pub mean: f64,
    /// NaN when fewer than two values are available.
    pub half_width: f64,
    pub n: usize,
}

impl Interval {
    pub fn low(&self) -> f64 {
        self.mean - self.half_width
    }

    pub fn high(&self) -> f64 {
        self.mean + self.half_width
    }
}

pub fn interval(values: &[f64], confidence: f64) -> Interval {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return Interval {
            mean,
            half_width: f64::NAN,
            n,
        };
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("degrees of freedom are positive")
        .inverse_cdf(0.5 + confidence / 2.0);
    Interval {
        mean,
        half_width: t * (var / n as f64).sqrt(),
        n,
    }
}
