use crate::error::{Error, Result};
use crate::tensor::{Real, Reduction, Tensor};

fn check_crop<T: Real>(x: &Tensor<T>) -> Result<()> {
    if x.rank() != 6 || x.dims()[1] != 1 {
        return Err(Error::shape(format!(
            "expected a single-channel crop [N, 1, X, Y, Z, T], got {}",
            x.shape()
        )));
    }
    Ok(())
}

/// `[N, 1, X, Y, Z, T] -> [N, T, X, Y, Z]`; channel `i` is time step `i`.
pub fn stack_time_as_channels<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    check_crop(x)?;
    let d = x.dims();
    x.permute(&[0, 5, 2, 3, 4, 1])?.reshape(&[d[0], d[5], d[2], d[3], d[4]])
}

/// `[N, 1, X, Y, Z, T] -> [N, 2, X, Y, Z]`: voxel-wise temporal mean and
/// population standard deviation.
pub fn mean_std_volumes<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    check_crop(x)?;
    let mean = x.reduce(Reduction::Mean, 5)?;
    let std = x.reduce(Reduction::StdPopulation, 5)?;
    Tensor::concat(&[&mean, &std], 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn time_steps_become_channels() {
        let mut x = Tensor::<f64>::zeros(&[1, 1, 3, 3, 3, 15]).unwrap();
        // Marker at voxel (1, 2, 0), t = 7.
        let idx = ((1 * 3 + 2) * 3) * 15 + 7;
        x.data_mut()[idx] = 5.0;
        let y = stack_time_as_channels(&x).unwrap();
        assert_eq!(y.dims(), &[1, 15, 3, 3, 3]);
        for c in 0..15 {
            let ch = y.select(1, c).unwrap();
            let want = if c == 7 { 5.0 } else { 0.0 };
            assert_eq!(ch.at(&[0, 1, 2, 0]).unwrap(), want);
            assert_eq!(ch.sum_all(), want);
        }
        assert!(stack_time_as_channels(&Tensor::<f64>::zeros(&[1, 2, 2, 2, 2, 3]).unwrap()).is_err());
    }

    #[test]
    fn single_step_is_identity() {
        let x = Rng::new(1).normal_tensor::<f64>(&[2, 1, 2, 3, 2, 1], 0.0, 1.0).unwrap();
        let y = stack_time_as_channels(&x).unwrap();
        assert_eq!(y.data(), x.data());
        assert_eq!(y.dims(), &[2, 1, 2, 3, 2]);
    }

    #[test]
    fn moments() {
        let c = Tensor::<f64>::full(&[1, 1, 2, 2, 2, 5], 3.0).unwrap();
        let y = mean_std_volumes(&c).unwrap();
        assert!(y.select(1, 0).unwrap().data().iter().all(|&v| v == 3.0));
        assert!(y.select(1, 1).unwrap().data().iter().all(|&v| v == 0.0));
        let s = Tensor::<f64>::from_data(&[1, 1, 1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        assert_eq!(mean_std_volumes(&s).unwrap().data(), &[2.0, 1.0]);
    }

    #[test]
    fn moments_ignore_time_order() {
        let x = Rng::new(2).normal_tensor::<f64>(&[1, 1, 2, 2, 2, 6], 0.0, 1.0).unwrap();
        let perm: Vec<Tensor<f64>> = [3, 0, 5, 1, 4, 2].iter().map(|&t| x.select(5, t).unwrap()).collect();
        let shuffled = Tensor::stack(&perm.iter().collect::<Vec<_>>(), 5).unwrap();
        let a = mean_std_volumes(&x).unwrap();
        let b = mean_std_volumes(&shuffled).unwrap();
        assert!(a.sub(&b).unwrap().max_abs() < 1e-12);
    }
}
