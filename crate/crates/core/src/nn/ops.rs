//! Elementwise activations and spatial dropout.

use ndarray::{Array2, Array4};
use rand_chacha::ChaCha8Rng;

pub fn relu(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Backward through ReLU given the forward *output*.
pub fn relu_backward(y: &Array4<f64>, gout: &Array4<f64>) -> Array4<f64> {
    let mut g = gout.clone();
    g.zip_mut_with(y, |gi, &yi| {
        if yi <= 0.0 {
            *gi = 0.0;
        }
    });
    g
}

pub fn leaky_relu(x: &Array4<f64>, slope: f64) -> Array4<f64> {
    x.mapv(|v| if v >= 0.0 { v } else { slope * v })
}

/// Backward through LeakyReLU given the forward *input*.
pub fn leaky_relu_backward(x: &Array4<f64>, gout: &Array4<f64>, slope: f64) -> Array4<f64> {
    let mut g = gout.clone();
    g.zip_mut_with(x, |gi, &xi| {
        if xi < 0.0 {
            *gi *= slope;
        }
    });
    g
}

pub fn sigmoid(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| {
        if v >= 0.0 {
            1.0 / (1.0 + (-v).exp())
        } else {
            let e = v.exp();
            e / (1.0 + e)
        }
    })
}

/// Backward through sigmoid given the forward *output*.
pub fn sigmoid_backward(y: &Array4<f64>, gout: &Array4<f64>) -> Array4<f64> {
    let mut g = gout.clone();
    g.zip_mut_with(y, |gi, &yi| *gi *= yi * (1.0 - yi));
    g
}

pub fn tanh(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(f64::tanh)
}

/// Backward through tanh given the forward *output*.
pub fn tanh_backward(y: &Array4<f64>, gout: &Array4<f64>) -> Array4<f64> {
    let mut g = gout.clone();
    g.zip_mut_with(y, |gi, &yi| *gi *= 1.0 - yi * yi);
    g
}

/// Spatial (channel-wise) dropout: whole feature maps are zeroed with
/// probability `ratio` and survivors are rescaled by 1/(1−ratio).
/// Returns the output and the per-(sample, channel) scale mask used.
pub fn spatial_dropout(
    x: &Array4<f64>,
    ratio: f64,
    rng: &mut ChaCha8Rng,
) -> (Array4<f64>, Array2<f64>) {
    use rand::Rng;
    let (n, c, _, _) = x.dim();
    let keep = 1.0 - ratio;
    let mut mask = Array2::zeros((n, c));
    for ni in 0..n {
        for ci in 0..c {
            if rng.random::<f64>() >= ratio {
                mask[[ni, ci]] = 1.0 / keep;
            }
        }
    }
    (apply_channel_mask(x, &mask), mask)
}

pub fn spatial_dropout_backward(mask: &Array2<f64>, gout: &Array4<f64>) -> Array4<f64> {
    apply_channel_mask(gout, mask)
}

fn apply_channel_mask(x: &Array4<f64>, mask: &Array2<f64>) -> Array4<f64> {
    let mut y = x.clone();
    let (n, c, _, _) = y.dim();
    for ni in 0..n {
        for ci in 0..c {
            let m = mask[[ni, ci]];
            y.index_axis_mut(ndarray::Axis(0), ni)
                .index_axis_mut(ndarray::Axis(0), ci)
                .mapv_inplace(|v| v * m);
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn sigmoid_range_and_grad() {
        let x = Array4::from_shape_fn((1, 1, 2, 2), |(_, _, i, j)| (i as f64 - j as f64) * 50.0);
        let y = sigmoid(&x);
        assert!(y.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let g = sigmoid_backward(&y, &Array4::ones((1, 1, 2, 2)));
        // saturated units get (numerically) zero gradient
        assert!(g[[0, 0, 1, 0]].abs() < 1e-20);
    }

    #[test]
    fn spatial_dropout_zeroes_whole_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Array4::ones((2, 8, 4, 4));
        let (y, mask) = spatial_dropout(&x, 0.4, &mut rng);
        for n in 0..2 {
            for c in 0..8 {
                let plane = y.index_axis(ndarray::Axis(0), n);
                let plane = plane.index_axis(ndarray::Axis(0), c);
                let first = plane[[0, 0]];
                assert!(plane.iter().all(|&v| v == first), "channel not uniform");
                assert!(first == 0.0 || (first - 1.0 / 0.6).abs() < 1e-12);
                assert_eq!(mask[[n, c]] != 0.0, first != 0.0);
            }
        }
    }

    #[test]
    fn dropout_inactive_channels_block_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array4::ones((1, 16, 2, 2));
        let (_, mask) = spatial_dropout(&x, 0.5, &mut rng);
        let g = spatial_dropout_backward(&mask, &Array4::ones((1, 16, 2, 2)));
        for c in 0..16 {
            let expect = mask[[0, c]];
            assert_eq!(g[[0, c, 0, 0]], expect);
        }
    }
}
