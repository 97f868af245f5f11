use oral3d_core::{FVolume, Image2};
use oral3d_nn::loss::{discriminator_loss, generator_adv_loss, projection_loss, reconstruction_loss};
use oral3d_nn::{ArchDescriptor, LossWeights, NetParams};
use proptest::collection::vec;
use proptest::prelude::*;

fn arch() -> ArchDescriptor {
    ArchDescriptor {
        in_h: 8,
        in_w: 8,
        stages: 2,
        base_channels: 4,
        growth: 2,
        dense_a_layers: 1,
        dense_b_layers: 1,
        depth: 4,
        disc_channels: vec![2, 2],
        leaky_slope: 0.2,
    }
}

fn fvol(data: Vec<f32>) -> FVolume {
    FVolume::from_vec([4, 3, 2], 1.0, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generator_output_stays_in_tanh_range(seed in any::<u64>(), px in vec(-1.0f32..=1.0, 64)) {
        let net = NetParams::<f32>::init(&arch(), seed).unwrap();
        let img = Image2::from_vec([8, 8], px).unwrap();
        let out = net.generate(&img, 1.0).unwrap();
        prop_assert_eq!(out.dims(), [8, 8, 4]);
        prop_assert!(out.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn discriminator_score_is_a_probability(seed in any::<u64>(), patch in vec(-1.0f32..=1.0, 64)) {
        let net = NetParams::<f32>::init(&arch(), seed).unwrap();
        let s = net.discriminate(&oral3d_nn::Tensor::new(vec![4, 4, 4], patch).unwrap()).unwrap();
        prop_assert!((0.0..=1.0).contains(&s));
    }
}

proptest! {
    #[test]
    fn adversarial_losses_are_bounded(scores in vec((0.0f64..=1.0, 0.0f64..=1.0), 1..8)) {
        let (real, fake): (Vec<_>, Vec<_>) = scores.into_iter().unzip();
        let d = discriminator_loss(&real, &fake).unwrap();
        let g = generator_adv_loss(&fake).unwrap();
        prop_assert!((0.0..=2.0).contains(&d));
        prop_assert!((0.0..=1.0).contains(&g));
    }

    #[test]
    fn volume_losses_are_symmetric_and_vanish_on_equal_inputs(
        a in vec(-1.0f32..=1.0, 24),
        b in vec(-1.0f32..=1.0, 24),
    ) {
        let (ya, yb) = (fvol(a), fvol(b));
        prop_assert_eq!(reconstruction_loss(&ya, &ya).unwrap(), 0.0);
        prop_assert_eq!(projection_loss(&ya, &ya).unwrap(), 0.0);
        prop_assert_eq!(reconstruction_loss(&ya, &yb).unwrap(), reconstruction_loss(&yb, &ya).unwrap());
        // Averaging along an axis cannot increase squared error.
        prop_assert!(projection_loss(&ya, &yb).unwrap() <= reconstruction_loss(&ya, &yb).unwrap() + 1e-12);
    }

    #[test]
    fn total_is_linear_in_the_weights(
        w in (0.0f64..10.0, 0.0f64..10.0, 0.0f64..10.0),
        l in (0.0f64..4.0, 0.0f64..4.0, 0.0f64..4.0),
        k in 0.0f64..5.0,
    ) {
        let lw = LossWeights { adversarial: w.0, reconstruction: w.1, projection: w.2 };
        let scaled = LossWeights { adversarial: k * w.0, reconstruction: k * w.1, projection: k * w.2 };
        let base = lw.total(l.0, l.1, l.2);
        prop_assert!((scaled.total(l.0, l.1, l.2) - k * base).abs() <= 1e-9 * (1.0 + base.abs() * k));
        prop_assert!((base - (w.0 * l.0 + w.1 * l.1 + w.2 * l.2)).abs() <= 1e-12 * (1.0 + base));
    }
}
