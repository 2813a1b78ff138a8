use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Mat;

pub fn normal<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Mat {
    let dist = Normal::new(0.0, std).expect("finite std");
    Mat::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

/// Gaussian init scaled by `1/sqrt(fan_in)`.
pub fn fan_in<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Mat {
    normal(rng, fan_in, fan_out, 1.0 / (fan_in as f64).sqrt())
}

pub fn zeros(rows: usize, cols: usize) -> Mat {
    Mat::zeros((rows, cols))
}

pub fn ones(rows: usize, cols: usize) -> Mat {
    Mat::ones((rows, cols))
}
