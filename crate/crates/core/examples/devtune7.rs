// Default-config validation across the full metric set, multi-seed.
use std::time::Instant;
use rgcd_core::cm::{default_tau_sequence, multistep_sample, ConsistencyModel};
use rgcd_core::codec::train_codec;
use rgcd_core::config::RunConfig;
use rgcd_core::dataset::generate;
use rgcd_core::distill::{distill_lcd, distill_rg_lcd, distill_rg_lcd_lrm};
use rgcd_core::eval::{agreement_pool, lrm_expert_agreement, oos_energy_ratio, self_consistency_gap, sliced_wasserstein};
use rgcd_core::lrm::pretrain_lrm;
use rgcd_core::reward::{ExpertRM, ExpertVariant};
use rgcd_core::schedule::NoiseSchedule;
use rgcd_core::teacher::{class_prior_conds, teacher_sample, train_teacher};
use rgcd_core::{Rng, Tensor};

fn main() {
    let t0 = Instant::now();
    let cfg = RunConfig::default();
    let sched = NoiseSchedule::build(cfg.sched_n, cfg.b_min, cfg.b_max).unwrap();
    let mut rng = Rng::derive(cfg.seed, 1);
    let data = generate(cfg.preset, cfg.d_x, cfg.n_classes, cfg.n_train, &mut rng);
    let heldout = generate(cfg.preset, cfg.d_x, cfg.n_classes, 2048, &mut rng);
    let (codec, _) = train_codec(&data, &heldout, &cfg.codec_hyper(), &mut Rng::derive(cfg.seed, 2)).unwrap();
    let latents = codec.encode_dataset(&data).unwrap();
    let (teacher, _) = train_teacher(&latents, &sched, cfg.d_z, cfg.n_classes, &cfg.teacher_hyper(), &mut Rng::derive(cfg.seed, 3)).unwrap();
    let held_matrix = heldout.as_matrix();
    let conds = class_prior_conds(1024, cfg.n_classes);
    let eval_omega = cfg.eval_omega();
    let ch = cfg.cm_hyper();
    let scale = cfg.resolved_reward_scale();
    let stretch = cfg.target_stretch;
    let eval_latents: Vec<(Tensor, usize)> = codec.encode_dataset(&heldout).unwrap();
    let init_cm = ConsistencyModel::from_teacher(&teacher, cfg.sigma_data);
    println!("[{:.0?}] pretrained (eval omega {eval_omega})", t0.elapsed());

    let tsw = {
        let z = teacher_sample(&teacher, &sched, 50, eval_omega, &conds, 99).unwrap();
        sliced_wasserstein(&codec.decode(&z).unwrap(), &held_matrix, 64, 7, 1).unwrap()
    };
    let sample4 = |cm: &ConsistencyModel, seed: u64| -> Tensor {
        let taus = default_tau_sequence(sched.len(), 4);
        let z = multistep_sample(cm, &sched, &taus, eval_omega, &conds, seed).unwrap();
        codec.decode(&z).unwrap()
    };
    let arm = ExpertRM::aligned(cfg.preset, cfg.d_x, cfg.n_classes, scale, stretch);
    let prm = ExpertRM::projection(cfg.preset, cfg.d_x, cfg.n_classes, scale, stretch, cfg.d_vis, cfg.seed);
    let basis = prm.basis.clone().unwrap();
    let mean_reward = |x: &Tensor| -> f64 {
        (0..x.rows()).map(|i| arm.reward(&Tensor::vector(x.row(i).to_vec()), conds[i]).unwrap()).sum::<f64>() / x.rows() as f64
    };

    // multi-seed criteria 4, 5
    for seed in 0..5u64 {
        let lcd = distill_lcd(&teacher, &latents, &sched, &ch, &mut Rng::derive(seed, 4)).unwrap();
        let g0 = self_consistency_gap(&init_cm, &eval_latents, &sched, 256, eval_omega, ch.huber_c, 5).unwrap();
        let g1 = self_consistency_gap(&lcd.cm, &eval_latents, &sched, 256, eval_omega, ch.huber_c, 5).unwrap();
        let x_lcd = sample4(&lcd.cm, 123 + seed);
        let sw = sliced_wasserstein(&x_lcd, &held_matrix, 64, 7, 1).unwrap();
        let oos = oos_energy_ratio(&x_lcd, &held_matrix, &basis).unwrap();
        let r0 = mean_reward(&x_lcd);
        let rg1 = distill_rg_lcd(&teacher, &codec, &arm, 1.0, &latents, &sched, &ch, &mut Rng::derive(seed, 4)).unwrap();
        let rg5 = distill_rg_lcd(&teacher, &codec, &arm, 5.0, &latents, &sched, &ch, &mut Rng::derive(seed, 4)).unwrap();
        let r1 = mean_reward(&sample4(&rg1.cm, 123 + seed));
        let r5 = mean_reward(&sample4(&rg5.cm, 123 + seed));
        println!("[{:.0?}] seed {seed}: gap {:.3} SWr {:.3} oos {oos:.3} | rewards {r0:.4} {r1:.4} {r5:.4} (mono {})",
            t0.elapsed(), g1/g0, sw/tsw, r1 > r0 && r5 > r1);
    }

    // criteria 6, 7 multi-seed
    let (lrm0, _) = pretrain_lrm(&codec, &latents, cfg.n_classes, &cfg.lrm_hyper(), &mut Rng::derive(cfg.seed, 5)).unwrap();
    for seed in 0..5u64 {
        let rg = distill_rg_lcd(&teacher, &codec, &prm, 50.0, &latents, &sched, &ch, &mut Rng::derive(seed, 4)).unwrap();
        let x_rg = sample4(&rg.cm, 200 + seed);
        let sw_rg = sliced_wasserstein(&x_rg, &held_matrix, 64, 7, 1).unwrap();
        let oos_rg = oos_energy_ratio(&x_rg, &held_matrix, &basis).unwrap();
        let ml = distill_rg_lcd_lrm(&teacher, &codec, &prm, &lrm0, 50.0, &latents, &sched, &ch, &cfg.lrm_hyper(), &mut Rng::derive(seed, 4)).unwrap();
        let x_ml = sample4(&ml.cm, 200 + seed);
        let sw_ml = sliced_wasserstein(&x_ml, &held_matrix, 64, 7, 1).unwrap();
        let oos_ml = oos_energy_ratio(&x_ml, &held_matrix, &basis).unwrap();
        println!("[{:.0?}] seed {seed}: rg oos {oos_rg:.3} sw {sw_rg:.4} | lrm oos {oos_ml:.3} sw {sw_ml:.4} | better {} {}",
            t0.elapsed(), oos_ml < oos_rg, sw_ml < sw_rg);
    }

    // criterion 9
    let pref = ExpertRM::preference_only(cfg.preset, cfg.d_x, cfg.n_classes, scale, stretch);
    let outp = distill_rg_lcd_lrm(&teacher, &codec, &pref, &lrm0, 1.0, &latents, &sched, &ch, &cfg.lrm_hyper(), &mut Rng::derive(cfg.seed, 4)).unwrap();
    let lrm_after = outp.lrm.as_ref().unwrap();
    let pool_real: Vec<(Tensor, usize)> = eval_latents.iter().take(256).cloned().collect();
    let taus = default_tau_sequence(sched.len(), 4);
    let zs = multistep_sample(&outp.cm, &sched, &taus, eval_omega, &conds, 321).unwrap();
    let pool = agreement_pool(&pool_real, Some((&zs, &conds)), cfg.seed);
    let agree = lrm_expert_agreement(lrm_after, &pref, &codec, &pool, 1000, 17).unwrap();
    println!("[{:.0?}] pref-only agreement {agree:.3}", t0.elapsed());
    println!("total {:.0?}", t0.elapsed());
}
