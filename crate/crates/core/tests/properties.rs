use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use openseg::fusion::SampleMatrix;
use openseg::ipca::IpcaState;
use openseg::pca::fit_pca;
use openseg::pipeline::{self, ScorerConfig};
use openseg::synth::{generate_scene_indexed, SynthConfig};
use openseg::{read_scene, write_scene, Method};

fn gaussian_rows(seed: u64, n: usize, d: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n * d)
        .map(|i| {
            let z: f64 = rng.sample(StandardNormal);
            // Three strong directions over a weak isotropic floor.
            let scale = [4.0, 3.0, 2.0].get(i % d).copied().unwrap_or(0.1);
            z * scale
        })
        .collect()
}

fn sin_max_angle(a: &[f64], b: &[f64], dim: usize) -> f64 {
    let ma = DMatrix::from_row_slice(a.len() / dim, dim, a);
    let mb = DMatrix::from_row_slice(b.len() / dim, dim, b);
    let resid = &ma - &ma * mb.transpose() * &mb;
    resid.singular_values().iter().copied().fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn ipca_batches_track_batch_pca(seed in 0u64..1000, split in 20usize..280) {
        let (n, d, k) = (300, 8, 3);
        let rows = gaussian_rows(seed, n, d);
        let batch = fit_pca(&SampleMatrix::from_rows(0, d, rows.clone()), k).unwrap();
        let mut state = IpcaState::new(k, d).unwrap();
        state.partial_fit(&rows[..split * d]).unwrap();
        state.partial_fit(&rows[split * d..]).unwrap();
        let inc = state.finalize().unwrap();
        prop_assert!(sin_max_angle(&batch.components, &inc.components, d) < 0.05);
        for (a, b) in batch.mean.iter().zip(&inc.mean) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn synth_is_deterministic(seed in 0u64..10_000, index in 0u64..8) {
        let cfg = SynthConfig { classes: 3, height: 24, width: 24, seed, ..SynthConfig::default() };
        let a = generate_scene_indexed(&cfg, index).unwrap();
        let b = generate_scene_indexed(&cfg, index).unwrap();
        prop_assert_eq!(&a, &b);
        let dir = tempfile::tempdir().unwrap();
        write_scene(dir.path(), &a).unwrap();
        prop_assert_eq!(read_scene(dir.path()).unwrap(), a);
    }
}

fn loco_auc(method: Method, classes: usize, size: usize, separation: f64, seed: u64) -> f64 {
    let synth = SynthConfig {
        classes,
        height: size,
        width: size,
        separation,
        seed,
        ..SynthConfig::default()
    };
    let fit: Vec<_> = (0..2).map(|i| generate_scene_indexed(&synth, i).unwrap()).collect();
    let eval: Vec<_> = (2..4).map(|i| generate_scene_indexed(&synth, i).unwrap()).collect();
    let cfg = ScorerConfig {
        method,
        components: 8,
        seed,
        ..ScorerConfig::default()
    };
    pipeline::run_loco(&fit, &eval, (seed % classes as u64) as usize, &cfg, &[0.5]).unwrap().0.auc
}

// The Weibull tails need enough fit pixels; on small scenes known pixels
// end up with larger unknown probability than true unknowns.
#[test]
fn openfcn_beats_chance() {
    for seed in 0..3 {
        let auc = loco_auc(Method::Openfcn, 5, 224, 6.0, seed);
        assert!(auc > 0.5, "seed {seed}: {auc}");
    }
}

#[test]
fn openpcs_separates_distant_classes() {
    for seed in 0..4 {
        let auc = loco_auc(Method::Openpcs, 4, 64, 10.0, seed);
        assert_eq!(auc, 1.0, "seed {seed}");
    }
}
