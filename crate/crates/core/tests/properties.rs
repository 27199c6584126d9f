use noisectl_core::collab::{oracle_shared_next, roll_sequence, shared_next, CollabParams};
use noisectl_core::decompose::{compose, sample_first_frame_shared, ChannelPair, DecompParams, MaskVolume, SceneChannel, VIEWS};
use noisectl_core::diffusion::{noisify, predict_joint, DiffusionSchedule, NoiseOracle};
use noisectl_core::rng::{gaussian_sample, Component, StreamKey};
use noisectl_core::train::scene_noise_loss;
use noisectl_core::Tensor;
use proptest::prelude::*;

fn key(seed: u64, draw: u64) -> StreamKey {
    StreamKey::new(seed, Component::Aux).draw(draw)
}

fn gauss(dims: &[usize], seed: u64, draw: u64) -> Tensor {
    gaussian_sample(dims, 1.0, key(seed, draw)).unwrap()
}

fn masks(frames: usize, h: usize, w: usize, seed: u64) -> MaskVolume {
    let g = gauss(&[VIEWS, frames, 1, h, w], seed, 77);
    MaskVolume::new(g.map(|v| if v > 0.3 { 1.0 } else { 0.0 })).unwrap()
}

fn pair(dims: &[usize], seed: u64, draw: u64) -> ChannelPair<Tensor> {
    ChannelPair::new(gauss(dims, seed, draw), gauss(dims, seed, draw + 1))
}

fn random_collab(frames: usize, window: usize, seed: u64) -> CollabParams {
    let s = gaussian_sample(&[frames, 2, VIEWS, VIEWS], 0.1, key(seed, 500)).unwrap();
    let i = gauss(&[window, 2, 2, VIEWS], seed, 501);
    CollabParams::new(s, i).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn view_mix_matches_loops_and_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mix = gauss(&[VIEWS, VIEWS], seed, 0);
        let x = gauss(&[VIEWS, 2, 3], seed, 1);
        let y = gauss(&[VIEWS, 2, 3], seed, 2);
        let out = Tensor::view_mix(&mix, &x).unwrap();
        for p in 0..VIEWS {
            for j in 0..6 {
                let want: f64 = (0..VIEWS).map(|q| mix.data()[p * VIEWS + q] * x.data()[q * 6 + j]).sum();
                prop_assert!((out.data()[p * 6 + j] - want).abs() <= 1e-12);
            }
        }
        let lhs = Tensor::view_mix(&mix, &x.scale(a).add(&y.scale(b)).unwrap()).unwrap();
        let rhs = out.scale(a).add(&Tensor::view_mix(&mix, &y).unwrap().scale(b)).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-10);
    }

    #[test]
    fn hadamard_is_commutative_and_ones_is_identity(seed in any::<u64>()) {
        let x = gauss(&[3, 4], seed, 0);
        let y = gauss(&[3, 4], seed, 1);
        prop_assert_eq!(x.hadamard(&y).unwrap(), y.hadamard(&x).unwrap());
        prop_assert_eq!(x.hadamard(&Tensor::ones(&[3, 4])).unwrap(), x);
    }

    #[test]
    fn composition_reconstructs_exactly(seed in any::<u64>(), frames in 1usize..4) {
        let m = masks(frames, 3, 5, seed);
        let full = pair(&[VIEWS, frames, 1, 3, 5], seed, 10);
        let c = compose(&full, &m).unwrap();
        for ((e, b), f) in c.eps.data().iter().zip(c.masked_b.data()).zip(c.masked_f.data()) {
            prop_assert_eq!(e.to_bits(), (b + f).to_bits());
            prop_assert_eq!(b * f, 0.0);
        }
    }

    #[test]
    fn shared_next_matches_loop_oracle(seed in any::<u64>(), len in 1usize..=16) {
        let c = random_collab(16, 5, seed);
        let history: Vec<_> = (0..len).map(|n| pair(&[VIEWS, 1, 4, 4], seed, 20 + 2 * n as u64)).collect();
        let fast = shared_next(&history, &c).unwrap();
        let slow = oracle_shared_next(&history, &c).unwrap();
        for ch in SceneChannel::BOTH {
            prop_assert!(fast[ch].max_abs_diff(&slow[ch]).unwrap() <= 1e-10);
        }
    }

    #[test]
    fn shared_next_is_linear_in_history(seed in any::<u64>(), a in -2.0f64..2.0) {
        let c = random_collab(8, 3, seed);
        let h1: Vec<_> = (0..4).map(|n| pair(&[VIEWS, 1, 2, 2], seed, 40 + 2 * n)).collect();
        let h2: Vec<_> = (0..4).map(|n| pair(&[VIEWS, 1, 2, 2], seed, 60 + 2 * n)).collect();
        let mixed: Vec<_> = h1
            .iter()
            .zip(&h2)
            .map(|(x, y)| x.map(|ch, t| t.scale(a).add(&y[ch]).unwrap()))
            .collect();
        let (o1, o2, om) = (shared_next(&h1, &c).unwrap(), shared_next(&h2, &c).unwrap(), shared_next(&mixed, &c).unwrap());
        for ch in SceneChannel::BOTH {
            let want = o1[ch].scale(a).add(&o2[ch]).unwrap();
            prop_assert!(om[ch].max_abs_diff(&want).unwrap() <= 1e-10);
        }
    }

    #[test]
    fn rolled_sequence_keeps_the_first_frame(seed in any::<u64>()) {
        let p = DecompParams::default();
        let c = CollabParams::initial(6, 3).unwrap();
        let k = key(seed, 90);
        let first = sample_first_frame_shared(&p, &[1, 2, 3], k).unwrap();
        let noise = roll_sequence(&first, &p, &c, 6, k, false).unwrap();
        for ch in SceneChannel::BOTH {
            prop_assert_eq!(noise.shared[ch].dims(), &[VIEWS, 6, 1, 2, 3]);
            prop_assert_eq!(noise.shared[ch].select(1, 0).unwrap(), first[ch].clone());
        }
    }

    #[test]
    fn oracle_denoisers_recover_the_noise(seed in any::<u64>(), t in 1usize..=100) {
        let sched = DiffusionSchedule::default();
        let m = masks(2, 3, 3, seed);
        let x0 = gauss(&[VIEWS, 2, 1, 3, 3], seed, 3);
        let eps = compose(&pair(&[VIEWS, 2, 1, 3, 3], seed, 4), &m).unwrap().eps;
        let z = noisify(&x0, &eps, t, &sched).unwrap();
        let oracle = NoiseOracle { x0, schedule: sched.clone() };
        let pred = predict_joint(&z, &m, &oracle, &oracle, t, 100).unwrap();
        prop_assert!(pred.eps.max_abs_diff(&eps).unwrap() <= 1e-9);
    }

    #[test]
    fn scene_noise_loss_is_nonnegative_and_zero_at_truth(seed in any::<u64>(), n in 0usize..4) {
        let m = masks(4, 2, 3, seed);
        let gt = gauss(&[VIEWS, 4, 1, 2, 3], seed, 5);
        let pred = pair(&[VIEWS, 4, 1, 2, 3], seed, 6);
        let c = random_collab(4, 2, seed);
        for ch in SceneChannel::BOTH {
            prop_assert!(scene_noise_loss(ch, n, &m, &gt, &pred, Some(&c)).unwrap() >= 0.0);
        }
        let exact = ChannelPair::new(gt.clone(), gt.clone());
        prop_assert_eq!(scene_noise_loss(SceneChannel::Background, 0, &m, &gt, &exact, None).unwrap(), 0.0);
    }
}
