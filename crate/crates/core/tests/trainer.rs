mod common;

use common::*;
use mdd_core::dataset::{generate_dataset, DatasetSpec, PairPolicy};
use mdd_core::trainer::*;
use mdd_core::{Denoiser, Error, NoiseSchedule};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn all_masks(n: usize, mask: [bool; 3]) -> Vec<Vec<bool>> {
    vec![mask.to_vec(); n]
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn mdd_forced_zero_timestep_feeds_clean_data() {
    let batch = random_batch(&all_masks(5, [true; 3]), 1);
    let sched = NoiseSchedule::default();
    let forced = vec![vec![0; 3]; 5];
    let p = prepare_batch(&TrainingScheme::mdd(), &batch, &sched, &mut rng(2), Some(&forced)).unwrap();
    assert_eq!(p.x_t, batch.x0);
}

#[test]
fn mdd_missing_slot_is_raw_noise_at_final_timestep() {
    let batch = random_batch(&all_masks(1250, [true, false, true]), 3);
    let sched = NoiseSchedule::default();
    let p = prepare_batch(&TrainingScheme::mdd(), &batch, &sched, &mut rng(4), None).unwrap();
    assert_eq!(p.x_t[1], p.eps[1]);
    assert!(p.tvecs.iter().all(|tv| tv.get(1) == 1000 && tv.get(0) >= 1 && tv.get(2) >= 1));
    assert!(looks_standard_normal(p.x_t[1].data().iter().map(|&v| v as f64)));
    assert!(p.loss_mask.iter().all(|r| r == &vec![true; 3]));
}

#[test]
fn untrained_loss_is_noise_variance() {
    // 417 samples x 3 domains x 8 features > 10^4 elements
    let batch = random_batch(&all_masks(417, [true; 3]), 5);
    let model = Denoiser::<f32>::new(small_trishape_config(false)).unwrap();
    let (loss, _) = mdd_training_step(&batch, &model, &NoiseSchedule::default(), &mut rng(6)).unwrap();
    assert!((loss - 1.0).abs() < 0.1, "{loss}");
}

#[test]
fn ummcsgm_conditions_are_clean_and_coded() {
    let batch = random_batch(&all_masks(400, [true; 3]), 7);
    let sched = NoiseSchedule::default();
    let p = prepare_batch(&TrainingScheme::ummcsgm(Fill::PureNoise), &batch, &sched, &mut rng(8), None).unwrap();
    let codes = p.codes.as_ref().unwrap();
    let mut seen = std::collections::HashSet::new();
    for b in 0..400 {
        let code = &codes[b];
        let n_cond = code.iter().filter(|&&c| c).count();
        assert!((1..3).contains(&n_cond), "subset must be nonempty and proper");
        seen.insert(code.clone());
        let target_ts: Vec<usize> = (0..3).filter(|&d| !code[d]).map(|d| p.tvecs[b].get(d)).collect();
        assert!(target_ts.windows(2).all(|w| w[0] == w[1]) && target_ts[0] >= 1);
        for d in 0..3 {
            assert_eq!(p.loss_mask[b][d], !code[d]);
            if code[d] {
                assert_eq!(p.tvecs[b].get(d), 0);
                assert_eq!(p.x_t[d].row(b), batch.x0[d].row(b));
            }
        }
    }
    assert_eq!(seen.len(), 6, "all six proper subsets of three views occur");
    // conditions {A, B}: only domain C enters the loss
    let b = (0..400).find(|&b| codes[b] == vec![true, true, false]).unwrap();
    assert_eq!(p.loss_mask[b], vec![false, false, true]);
}

#[test]
fn ummcsgm_fill_variants() {
    let masks = all_masks(1250, [true, true, false]);
    let batch = random_batch(&masks, 9);
    let sched = NoiseSchedule::default();
    let o = prepare_batch(&TrainingScheme::ummcsgm(Fill::MinusOne), &batch, &sched, &mut rng(10), None).unwrap();
    assert!(o.x_t[2].data().iter().all(|&v| v == -1.0));
    assert!(o.tvecs.iter().all(|tv| tv.get(2) == 1000));
    assert!(o.loss_mask.iter().all(|r| !r[2]));
    let n = prepare_batch(&TrainingScheme::ummcsgm(Fill::PureNoise), &batch, &sched, &mut rng(10), None).unwrap();
    assert!(looks_standard_normal(n.x_t[2].data().iter().map(|&v| v as f64)));
}

#[test]
fn ummcsgm_single_view_becomes_target() {
    let batch = random_batch(&all_masks(4, [false, true, false]), 11);
    let p = prepare_batch(&TrainingScheme::ummcsgm(Fill::PureNoise), &batch, &NoiseSchedule::default(), &mut rng(12), None)
        .unwrap();
    for b in 0..4 {
        assert_eq!(p.codes.as_ref().unwrap()[b], vec![false; 3]);
        assert_eq!(p.loss_mask[b], vec![false, true, false]);
        assert!(p.tvecs[b].get(1) >= 1);
    }
}

#[test]
fn noisycond_shares_one_timestep() {
    let masks: Vec<Vec<bool>> = (0..60).map(|b| vec![true, b % 2 == 0, true]).collect();
    let batch = random_batch(&masks, 13);
    let p = prepare_batch(&TrainingScheme::noisycond(Fill::PureNoise), &batch, &NoiseSchedule::default(), &mut rng(14), None)
        .unwrap();
    for (b, tv) in p.tvecs.iter().enumerate() {
        let avail: Vec<usize> = (0..3).filter(|&d| masks[b][d]).map(|d| tv.get(d)).collect();
        assert!(avail.iter().all(|&t| t == avail[0]));
        if !masks[b][1] {
            assert_eq!(tv.get(1), 1000);
        }
    }
}

#[test]
fn noisycond_at_final_timestep_is_nearly_pure_noise() {
    let batch = random_batch(&all_masks(1250, [true, true, false]), 15);
    let forced = vec![vec![1000]; 1250];
    let p = prepare_batch(&TrainingScheme::noisycond(Fill::PureNoise), &batch, &NoiseSchedule::default(), &mut rng(16), Some(&forced))
        .unwrap();
    for d in 0..3 {
        assert!(looks_standard_normal(p.x_t[d].data().iter().map(|&v| v as f64)), "domain {d}");
    }
}

#[test]
fn mdd_with_equal_timesteps_reduces_to_noisycond() {
    let batch = random_batch(&all_masks(16, [true; 3]), 17);
    let sched = NoiseSchedule::default();
    let ts: Vec<Vec<usize>> = (0..16).map(|b| vec![37 * b + 1; 3]).collect();
    let mdd = prepare_batch(&TrainingScheme::mdd(), &batch, &sched, &mut rng(18), Some(&ts)).unwrap();
    let mut noisy = TrainingScheme::noisycond(Fill::PureNoise);
    noisy.loss_scope = LossScope::AllDomains;
    let nc = prepare_batch(&noisy, &batch, &sched, &mut rng(18), Some(&ts)).unwrap();
    assert_eq!(mdd, nc);
}

#[test]
fn loss_is_invariant_to_sample_order_and_duplication() {
    let batch = random_batch(&all_masks(6, [true, false, true]), 19);
    let model = Denoiser::<f32>::new(small_trishape_config(false)).unwrap();
    let p = prepare_batch(&TrainingScheme::mdd(), &batch, &NoiseSchedule::default(), &mut rng(20), None).unwrap();
    let (loss, _) = model.loss_and_gradients(&p.x_t, &p.tvecs, None, &p.eps, &p.loss_mask).unwrap();

    let perm = [3usize, 0, 5, 1, 4, 2];
    let pick = |ts: &[mdd_core::Tensor<f32>], idx: &[usize]| -> Vec<mdd_core::Tensor<f32>> {
        ts.iter()
            .map(|t| {
                let data = idx.iter().flat_map(|&i| t.row(i).to_vec()).collect();
                mdd_core::Tensor::from_vec(&[idx.len(), t.row_len()], data).unwrap()
            })
            .collect()
    };
    let tv: Vec<_> = perm.iter().map(|&i| p.tvecs[i].clone()).collect();
    let lm: Vec<_> = perm.iter().map(|&i| p.loss_mask[i].clone()).collect();
    let (permuted, _) = model.loss_and_gradients(&pick(&p.x_t, &perm), &tv, None, &pick(&p.eps, &perm), &lm).unwrap();
    assert!((loss - permuted).abs() < 1e-6);

    let one = [2usize];
    let (single, _) = model
        .loss_and_gradients(&pick(&p.x_t, &one), &[p.tvecs[2].clone()], None, &pick(&p.eps, &one), &[p.loss_mask[2].clone()])
        .unwrap();
    let dup = [2usize; 8];
    let (many, _) = model
        .loss_and_gradients(&pick(&p.x_t, &dup), &vec![p.tvecs[2].clone(); 8], None, &pick(&p.eps, &dup), &vec![p.loss_mask[2].clone(); 8])
        .unwrap();
    assert!((single - many).abs() < 1e-6, "{single} vs {many}");
}

#[test]
fn supervised_only_leaves_missing_decoder_untouched() {
    let batch = random_batch(&all_masks(8, [true, true, false]), 21);
    let model = Denoiser::<f32>::new(small_trishape_config(false)).unwrap();
    let mut scheme = TrainingScheme::noisycond(Fill::PureNoise);
    scheme.loss_scope = LossScope::SupervisedOnly;
    let (_, grads) = training_step(&scheme, &batch, &model, &NoiseSchedule::default(), &mut rng(22)).unwrap();
    let names = model.params().names();
    let decoder_only = |n: &str| n.starts_with("d2.") && (n.contains("dec") || n.contains("out") || n.contains("from_bottleneck"));
    let mut checked = 0;
    for (name, g) in names.iter().zip(&grads) {
        if decoder_only(name) {
            assert!(g.data().iter().all(|&v| v == 0.0), "{name}");
            checked += 1;
        }
    }
    assert!(checked > 0);
    // with the loss over all domains the same parameters do learn
    let (_, grads) = training_step(&TrainingScheme::mdd(), &batch, &model, &NoiseSchedule::default(), &mut rng(22)).unwrap();
    assert!(names.iter().zip(&grads).any(|(n, g)| decoder_only(n) && g.data().iter().any(|&v| v != 0.0)));
}

fn small_dataset() -> mdd_core::dataset::Dataset {
    generate_dataset(&DatasetSpec::vector(120, 0.4, PairPolicy::EqualPairs, 3)).unwrap()
}

fn quick_config(scheme: TrainingScheme) -> TrainConfig {
    let mut c = TrainConfig {
        scheme,
        max_steps: Some(60),
        batch_size: 16,
        seed: 9,
        ..TrainConfig::default()
    };
    c.adam.lr = 3e-3;
    c
}

#[test]
fn training_is_bit_reproducible_and_learns() {
    let ds = small_dataset();
    let sched = NoiseSchedule::default();
    let model = Denoiser::<f32>::new(small_trishape_config(false)).unwrap();
    let cfg = quick_config(TrainingScheme::mdd());
    let a = train(&cfg, &sched, &ds, model.clone()).unwrap();
    let b = train(&cfg, &sched, &ds, model).unwrap();
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.last.params().values(), b.last.params().values());
    assert_eq!(a.steps, 60);
    let (first, last) = (a.initial_loss().unwrap(), a.final_loss(10).unwrap());
    assert!(last < 0.9 * first, "{first} -> {last}");
    assert!(a.best_val_loss.is_finite());
}

#[test]
fn every_scheme_trains() {
    let ds = small_dataset();
    let sched = NoiseSchedule::default();
    for scheme in [
        TrainingScheme::ummcsgm(Fill::PureNoise),
        TrainingScheme::ummcsgm(Fill::MinusOne),
        TrainingScheme::noisycond(Fill::PureNoise),
        TrainingScheme::noisycond(Fill::MinusOne),
    ] {
        let model = Denoiser::<f32>::new(small_trishape_config(scheme.uses_condition_code())).unwrap();
        let mut cfg = quick_config(scheme);
        cfg.max_steps = Some(10);
        let out = train(&cfg, &sched, &ds, model).unwrap();
        assert_eq!(out.steps, 10, "{scheme}");
    }
    let coded = Denoiser::<f32>::new(small_trishape_config(true)).unwrap();
    assert!(train(&quick_config(TrainingScheme::mdd()), &sched, &ds, coded).is_err());
}

#[test]
fn non_finite_loss_reports_step_and_scheme() {
    let ds = small_dataset();
    let mut model = Denoiser::<f32>::new(small_trishape_config(false)).unwrap();
    model.params_mut().values_mut()[0].data_mut()[0] = f32::NAN;
    match train(&quick_config(TrainingScheme::mdd()), &NoiseSchedule::default(), &ds, model) {
        Err(Error::NonFiniteLoss { step, lr, scheme }) => {
            assert_eq!((step, scheme.as_str()), (0, "mdd"));
            assert_eq!(lr, 3e-3);
        }
        other => panic!("expected NonFiniteLoss, got {other:?}"),
    }
}

#[test]
fn loss_csv_layout() {
    let ds = small_dataset();
    let mut cfg = quick_config(TrainingScheme::ummcsgm(Fill::MinusOne));
    cfg.max_steps = Some(12);
    let model = Denoiser::<f32>::new(small_trishape_config(true)).unwrap();
    let out = train(&cfg, &NoiseSchedule::default(), &ds, model).unwrap();
    let mut buf = Vec::new();
    write_loss_csv(&mut buf, &cfg.scheme, &out.curve).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,epoch,scheme,split,loss,lr"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), out.curve.len());
    assert!(rows[0].starts_with("0,0,ummcsgm-o,train,"));
    assert!(rows.iter().any(|r| r.contains(",val,")));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn placeholders_never_reach_the_network(pattern in 1usize..8, scheme_i in 0usize..5, seed in any::<u64>()) {
        let mask = [pattern & 1 != 0, pattern & 2 != 0, pattern & 4 != 0];
        let batch = random_batch(&all_masks(3, mask), seed);
        let scheme = [
            TrainingScheme::mdd(),
            TrainingScheme::ummcsgm(Fill::PureNoise),
            TrainingScheme::ummcsgm(Fill::MinusOne),
            TrainingScheme::noisycond(Fill::PureNoise),
            TrainingScheme::noisycond(Fill::MinusOne),
        ][scheme_i];
        let p = prepare_batch(&scheme, &batch, &NoiseSchedule::default(), &mut rng(seed), None).unwrap();
        prop_assert!(p.x_t.iter().all(|t| t.is_finite()));
        for tv in &p.tvecs {
            for d in 0..3 {
                if !mask[d] {
                    prop_assert_eq!(tv.get(d), 1000);
                }
            }
        }
    }
}

#[test]
fn scheme_labels_round_trip() {
    for s in [
        TrainingScheme::mdd(),
        TrainingScheme::ummcsgm(Fill::PureNoise),
        TrainingScheme::ummcsgm(Fill::MinusOne),
        TrainingScheme::noisycond(Fill::PureNoise),
        TrainingScheme::noisycond(Fill::MinusOne),
    ] {
        assert_eq!(s.to_string().parse::<TrainingScheme>().unwrap(), s);
    }
    assert_eq!("ummcsgm".parse::<TrainingScheme>().unwrap(), TrainingScheme::ummcsgm(Fill::PureNoise));
    for bad in ["mdd-o", "mdd-n", "ummcsgm-x", "foo"] {
        assert!(bad.parse::<TrainingScheme>().is_err(), "{bad}");
    }
}
