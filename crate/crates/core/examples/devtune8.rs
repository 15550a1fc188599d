// Agreement-focused grid + oos at longer budget.
use std::time::Instant;
use rgcd_core::cm::{default_tau_sequence, multistep_sample, ConsistencyModel};
use rgcd_core::codec::train_codec;
use rgcd_core::config::RunConfig;
use rgcd_core::dataset::generate;
use rgcd_core::distill::{distill_lcd, distill_rg_lcd_lrm, CmHyper};
use rgcd_core::eval::{agreement_pool, lrm_expert_agreement, oos_energy_ratio, sliced_wasserstein};
use rgcd_core::lrm::{pretrain_lrm, LrmHyper};
use rgcd_core::reward::{ExpertRM};
use rgcd_core::schedule::NoiseSchedule;
use rgcd_core::teacher::{class_prior_conds, train_teacher};
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
    let eval_latents: Vec<(Tensor, usize)> = codec.encode_dataset(&heldout).unwrap();
    let scale = cfg.resolved_reward_scale();
    let stretch = cfg.target_stretch;
    let pref = ExpertRM::preference_only(cfg.preset, cfg.d_x, cfg.n_classes, scale, stretch);
    let prm = ExpertRM::projection(cfg.preset, cfg.d_x, cfg.n_classes, scale, stretch, cfg.d_vis, cfg.seed);
    let basis = prm.basis.clone().unwrap();
    let sample4 = |cm: &ConsistencyModel, seed: u64| -> Tensor {
        let taus = default_tau_sequence(sched.len(), 4);
        let z = multistep_sample(cm, &sched, &taus, eval_omega, &conds, seed).unwrap();
        codec.decode(&z).unwrap()
    };

    // oos at 8000 iters, seed 0 fixture
    let ch8 = CmHyper { iters: 8000, ..cfg.cm_hyper() };
    let lcd8 = distill_lcd(&teacher, &latents, &sched, &ch8, &mut Rng::derive(0, 4)).unwrap();
    let x8 = sample4(&lcd8.cm, 123);
    println!("[{:.0?}] lcd 8000 iters: oos {:.3} sw {:.4}", t0.elapsed(),
        oos_energy_ratio(&x8, &held_matrix, &basis).unwrap(),
        sliced_wasserstein(&x8, &held_matrix, 64, 7, 1).unwrap());

    let ch = cfg.cm_hyper();
    for noise in [0.3f64, 1.0, 1.5] {
        for eta2 in [1e-4f64, 3e-4] {
            let lh = LrmHyper { pretrain_noise: noise, lr_finetune: eta2, ..cfg.lrm_hyper() };
            let (lrm0, _) = pretrain_lrm(&codec, &latents, cfg.n_classes, &lh, &mut Rng::derive(cfg.seed, 5)).unwrap();
            let outp = distill_rg_lcd_lrm(&teacher, &codec, &pref, &lrm0, 1.0, &latents, &sched, &ch, &lh, &mut Rng::derive(cfg.seed, 4)).unwrap();
            let lrm_after = outp.lrm.as_ref().unwrap();
            let pool_real: Vec<(Tensor, usize)> = eval_latents.iter().take(256).cloned().collect();
            let taus = default_tau_sequence(sched.len(), 4);
            let zs = multistep_sample(&outp.cm, &sched, &taus, eval_omega, &conds, 321).unwrap();
            let pool = agreement_pool(&pool_real, Some((&zs, &conds)), cfg.seed);
            let agree = lrm_expert_agreement(lrm_after, &pref, &codec, &pool, 1000, 17).unwrap();
            // also agreement using ONLY the pretrained LRM for reference
            let agree0 = lrm_expert_agreement(&lrm0, &pref, &codec, &pool, 1000, 17).unwrap();
            // mitigation sanity at this lrm config
            let ml = distill_rg_lcd_lrm(&teacher, &codec, &prm, &lrm0, 50.0, &latents, &sched, &ch, &lh, &mut Rng::derive(0, 4)).unwrap();
            let x_ml = sample4(&ml.cm, 200);
            let oos_ml = oos_energy_ratio(&x_ml, &held_matrix, &basis).unwrap();
            println!("[{:.0?}] noise={noise} eta2={eta2}: agreement {agree:.3} (pretrain-only {agree0:.3}) mitigated-oos {oos_ml:.3}", t0.elapsed());
        }
    }
    println!("total {:.0?}", t0.elapsed());
}
