use proptest::prelude::*;

use st4d::data::{
    bandpass_filter, load_tensor, save_tensor, sliding_window_crops, window_starts, Entry, Manifest, Split,
    BAND_HI_HZ, BAND_LO_HZ,
};
use st4d::gru::{gru_sequence, ConvGruCell};
use st4d::models::{build, micro_spec, Variant};
use st4d::nn::softmax;
use st4d::training::{encode_checkpoint, f1_and_accuracy, load_checkpoint, save_checkpoint, TrainState};
use st4d::autodiff::ParamStore;
use st4d::{Rng, Tensor};

fn series(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, n)
}

fn filt(x: &[f64]) -> Vec<f64> {
    let t = Tensor::from_data(&[1, 1, 1, 1, 1, x.len()], x.to_vec()).unwrap();
    bandpass_filter(&t, 2.0, BAND_LO_HZ, BAND_HI_HZ).unwrap().into_data()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    let scale = b.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * scale)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn bandpass_is_a_linear_projection(a in series(64), b in series(64), k in -3.0f64..3.0) {
        let fa = filt(&a);
        prop_assert!(close(&filt(&fa), &fa, 1e-9));
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| k * x + y).collect();
        let lin: Vec<f64> = fa.iter().zip(filt(&b)).map(|(x, y)| k * x + y).collect();
        prop_assert!(close(&filt(&mix), &lin, 1e-9));
    }

    #[test]
    fn bandpass_output_has_zero_mean(a in series(40)) {
        let m = filt(&a).iter().sum::<f64>() / 40.0;
        prop_assert!(m.abs() < 1e-9);
    }

    #[test]
    fn windows_tile_the_series(t in 1usize..200, w in 1usize..20, stride in 1usize..20) {
        match window_starts(t, w, stride) {
            Err(_) => prop_assert!(w > t),
            Ok(s) => {
                prop_assert_eq!(s.len(), (t - w) / stride + 1);
                prop_assert!(s.iter().all(|&v| v + w <= t));
                prop_assert!(s.windows(2).all(|p| p[1] - p[0] == stride));
            }
        }
    }

    #[test]
    fn gru_state_stays_in_unit_ball(seed in 0u64..1000, scale in 0.1f64..20.0) {
        let cell = ConvGruCell::new(1, 2, 3).unwrap();
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::new(seed);
        cell.init_params("g", &mut store, &mut rng).unwrap();
        let w: Vec<Tensor<f64>> = store.iter().map(|p| p.value.map(|v| v * scale)).collect();
        let x = rng.normal_tensor::<f64>(&[1, 1, 3, 3, 3, 6], 0.0, scale).unwrap();
        let h = gru_sequence(&cell, &w, &x).unwrap();
        prop_assert!(h.data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn softmax_rows_are_distributions(v in prop::collection::vec(-50.0f64..50.0, 8)) {
        let p = softmax(&Tensor::from_data(&[4, 2], v).unwrap()).unwrap();
        for row in p.data().chunks(2) {
            prop_assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&q| (0.0..=1.0).contains(&q)));
        }
    }

    #[test]
    fn metrics_stay_in_range(pairs in prop::collection::vec((0usize..2, 0usize..2), 1..40)) {
        let (p, l): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let r = f1_and_accuracy(&p, &l).unwrap();
        prop_assert_eq!(r.tp + r.fp + r.tn + r.fn_, p.len());
        prop_assert!((0.0..=1.0).contains(&r.f1) && (0.0..=1.0).contains(&r.accuracy));
    }

    #[test]
    fn manifest_round_trips(labels in prop::collection::vec((0usize..2, 0usize..3), 0..12), period in 0.5f64..4.0) {
        let mut m = Manifest::new(Some(vec![1, 1, 4, 4, 4, 20]), period);
        for (i, (label, split)) in labels.into_iter().enumerate() {
            m.entries.push(Entry {
                path: format!("subjects/s{i}.t4df").into(),
                id: format!("s{i}"),
                label,
                split: Split::ALL[split],
            });
        }
        let back = Manifest::parse(&m.to_text()).unwrap();
        prop_assert_eq!(back.entries, m.entries);
        prop_assert_eq!(back.shape, m.shape);
        prop_assert_eq!(back.period, m.period);
    }

    #[test]
    fn t4df_round_trips(dims in prop::collection::vec(1usize..4, 1..6), seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let t = Rng::new(seed).normal_tensor::<f32>(&dims, 0.0, 1.0).unwrap();
        let p = dir.path().join("t.t4df");
        save_tensor(&p, &t).unwrap();
        prop_assert_eq!(load_tensor::<f32>(&p).unwrap(), t);
    }

    #[test]
    fn crops_are_slices_of_the_image(t in 15usize..40, stride in 1usize..10) {
        let img = Rng::new(t as u64).normal_tensor::<f64>(&[1, 1, 2, 2, 2, t], 0.0, 1.0).unwrap();
        let crops = sliding_window_crops(&img, 15, stride).unwrap();
        let starts = window_starts(t, 15, stride).unwrap();
        prop_assert_eq!(crops.len(), starts.len());
        for (c, s) in crops.iter().zip(starts) {
            prop_assert_eq!(c, &img.narrow(5, s, 15).unwrap());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn checkpoint_round_trips(v in 0usize..4, seed in 0u64..100) {
        let spec = micro_spec(Variant::ALL[v], seed);
        let m = build::<f32>(&spec).unwrap();
        let state = TrainState::new(&m.params, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        save_checkpoint(&p, &m, &state).unwrap();
        let back = load_checkpoint::<f32>(&p).unwrap();
        prop_assert_eq!(&back.model.params, &m.params);
        prop_assert_eq!(encode_checkpoint(&back.model, &back.state), encode_checkpoint(&m, &state));
    }
}
