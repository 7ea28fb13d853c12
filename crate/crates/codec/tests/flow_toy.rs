//! Unconditional flow matching on a 2-D toy: standard normal transported to
//! a two-Gaussian mixture. After training, sampled points split between the
//! modes in the right proportions.

use muc_codec::flowgen::{fm_train_step, sample_euler_cfg, DitConfig, DitModel, SamplerConfig};
use muc_core::{AdamConfig, AdamState, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn two_gaussian_mixture_proportions() {
    let cfg = DitConfig {
        n_layers: 2,
        heads: 2,
        head_dim: 12,
        mlp_ratio: 2,
        norm_groups: 2,
        latent_channels: 2,
        cond_dim: 2,
        max_frames: 4,
        ..DitConfig::desk(2, 2)
    };
    let mut model = DitModel::<f32>::new(cfg, 42).unwrap();
    let mut adam = AdamState::new(AdamConfig::with_lr(2e-3));
    let mut rng = ChaCha8Rng::seed_from_u64(43);

    // Equal mixture of N((1,1), 0.3²) and N((−1,−1), 0.3²), one frame of two
    // channels per example; conditions always dropped (cond_drop = 1).
    let modes = [[1.0f64, 1.0], [-1.0, -1.0]];
    for step in 0..900 {
        let mut xs = Vec::with_capacity(8);
        let conds = vec![Tensor::<f32>::zeros(vec![1, 2]); 8];
        for _ in 0..8 {
            let m = modes[rng.gen_range(0..2)];
            let x = [
                m[0] + 0.3 * normal(&mut rng),
                m[1] + 0.3 * normal(&mut rng),
            ];
            xs.push(Tensor::from_vec(vec![1, 2], vec![x[0] as f32, x[1] as f32]));
        }
        let out = fm_train_step(&model, &xs, &conds, 1.0, &mut rng).unwrap();
        adam.step(&mut model.params, &out.grads).unwrap();
        if step == 0 {
            assert!(out.loss.is_finite());
        }
    }

    // 1000 samples, assigned to the nearest mode.
    let mut counts = [0usize; 2];
    for i in 0..1000 {
        let s = sample_euler_cfg(
            &model,
            (1, 2),
            None,
            &SamplerConfig { n_steps: 50, guidance_scale: 1.0, seed: 1000 + i },
        )
        .unwrap();
        let (x, y) = (s.data()[0] as f64, s.data()[1] as f64);
        let d0 = (x - 1.0).powi(2) + (y - 1.0).powi(2);
        let d1 = (x + 1.0).powi(2) + (y + 1.0).powi(2);
        counts[if d0 <= d1 { 0 } else { 1 }] += 1;
    }
    let p0 = counts[0] as f64 / 1000.0;
    assert!(
        (p0 - 0.5).abs() <= 0.1,
        "mode proportions {p0:.3}/{:.3} drifted more than 10% from 0.5/0.5",
        1.0 - p0
    );
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
