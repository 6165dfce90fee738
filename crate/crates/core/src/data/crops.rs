use crate::error::{Error, Result};
use crate::tensor::{Real, Rng, Tensor};

pub const CROP_LEN: usize = 15;
pub const DEFAULT_STRIDE: usize = 8;

fn time_extent<T: Real>(image: &Tensor<T>, w: usize) -> Result<usize> {
    let t = *image.dims().last().expect("rank >= 1");
    if w == 0 || t < w {
        return Err(Error::invalid(format!("cannot take a {w}-step crop from {t} time points")));
    }
    Ok(t)
}

/// A `w`-step window of the last axis starting uniformly in `[0, T - w]`.
pub fn random_temporal_crop<T: Real>(image: &Tensor<T>, rng: &mut Rng, w: usize) -> Result<Tensor<T>> {
    let t = time_extent(image, w)?;
    let start = rng.below(t - w + 1);
    image.narrow(image.rank() - 1, start, w)
}

/// Window starts `0, s, 2s, ...` with `start + w <= t`.
pub fn window_starts(t: usize, w: usize, stride: usize) -> Result<Vec<usize>> {
    if stride == 0 {
        return Err(Error::invalid("sliding-window stride must be >= 1"));
    }
    if w == 0 || t < w {
        return Err(Error::invalid(format!("cannot take a {w}-step crop from {t} time points")));
    }
    Ok((0..=t - w).step_by(stride).collect())
}

pub fn sliding_window_crops<T: Real>(image: &Tensor<T>, w: usize, stride: usize) -> Result<Vec<Tensor<T>>> {
    let t = time_extent(image, w)?;
    let axis = image.rank() - 1;
    window_starts(t, w, stride)?
        .into_iter()
        .map(|s| image.narrow(axis, s, w))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_counts() {
        assert_eq!(window_starts(176, 15, 1).unwrap().len(), 162);
        assert_eq!(window_starts(176, 15, 15).unwrap().len(), 11);
        assert_eq!(window_starts(176, 15, 8).unwrap().len(), 21);
        assert_eq!(window_starts(15, 15, 4).unwrap(), vec![0]);
        assert!(window_starts(14, 15, 1).is_err());
        assert!(window_starts(20, 15, 0).is_err());
    }

    #[test]
    fn full_length_crop_is_whole_series() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 2, 2, 2, 15], |i| i as f64).unwrap();
        let mut rng = Rng::new(0);
        for _ in 0..5 {
            assert_eq!(random_temporal_crop(&x, &mut rng, 15).unwrap(), x);
        }
        assert!(random_temporal_crop(&x, &mut rng, 16).is_err());
    }

    #[test]
    fn crops_match_direct_slices() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 2, 1, 2, 40], |i| (i * 7 % 13) as f64).unwrap();
        let crops = sliding_window_crops(&x, 15, 8).unwrap();
        for (c, s) in crops.iter().zip(window_starts(40, 15, 8).unwrap()) {
            assert_eq!(c, &x.crop(&[(0, 0), (0, 0), (0, 0), (0, 0), (0, 0), (s, 40 - 15 - s)]).unwrap());
        }
    }

    #[test]
    fn random_starts_cover_range() {
        // Tag each time point with its own index to read the start back.
        let x = Tensor::<f64>::from_fn(&[1, 176], |i| i as f64).unwrap();
        let mut rng = Rng::new(17);
        let mut hit = [false; 162];
        for _ in 0..10_000 {
            let c = random_temporal_crop(&x, &mut rng, 15).unwrap();
            hit[c.data()[0] as usize] = true;
        }
        assert!(hit.iter().all(|&h| h));
        let starts = |seed| {
            let mut r = Rng::new(seed);
            (0..20).map(|_| random_temporal_crop(&x, &mut r, 15).unwrap().data()[0]).collect::<Vec<_>>()
        };
        assert_eq!(starts(3), starts(3));
    }
}
