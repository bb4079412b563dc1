use mts3::datagen::gen_springmass;
use mts3::model::{Mts3, Mts3Config, VariantFlags};
use mts3::training::{evaluate, train, TrainConfig};
use std::time::Instant;

fn base_cfg(seed: u64) -> Mts3Config {
    Mts3Config {
        d_obs: 2,
        d_act: 2,
        d_z: 8,
        d_l: 8,
        h: 15,
        dt: 0.02,
        enc_hidden: 32,
        set_hidden: 48,
        dec_hidden: 32,
        ctrl_hidden: 32,
        seed,
        ..Default::default()
    }
}

#[test]
#[ignore]
fn probe_criterion8_margin() {
    let data = gen_springmass(600, 450, 0.02, 150, 20240601);
    let (train_data, test_data) = data.split(500);

    let tc = TrainConfig {
        epochs: 70,
        batch_size: 25,
        lr: 3e-3,
        val_fraction: 0.1,
        context_windows: 10, // 150-step context at h=15
        patience: 70,
        mask_fraction: 0.5,
        mask_window_fraction: 0.25,
        mask_suffix_fraction: 0.5,
        ..Default::default()
    };

    for (label, flags) in [
        ("full", VariantFlags::default()),
        (
            "no_task",
            VariantFlags {
                no_task: true,
                ..Default::default()
            },
        ),
    ] {
        let t0 = Instant::now();
        let mut cfg = base_cfg(0);
        cfg.variant = flags;
        let mut model = Mts3::new(cfg).unwrap();
        let outcome = train(&mut model, &train_data, &tc, None, true, 0).unwrap();
        for r in outcome.records.iter().filter(|r| r.split == "val") {
            if r.epoch % 10 == 0 || r.epoch == 69 {
                println!("  {label} epoch {} val nll {:.3} rmse {:.4}", r.epoch, r.nll, r.rmse);
            }
        }
        for name in ["fts.c.uu", "fts.c.ul", "sts.x.uu", "sts.x.ul", "fts.a.uu", "fts.a.ul"] {
            if let Some(id) = model.store.id_of(name) {
                let v = &model.store.param(id).value;
                let maxabs = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                println!("  {label} {name}: mean {mean:.4} maxabs {maxabs:.4}");
            }
        }
        let m = evaluate(&model, &test_data, &outcome.stats, &[30, 100, 300], 10).unwrap();
        println!(
            "{label}: {:.1}s best_val={:.3} h30 rmse={:.4} h100 rmse={:.4} h300 rmse={:.4} nll300={:.3}",
            t0.elapsed().as_secs_f64(),
            outcome.best_val_nll,
            m[0].rmse,
            m[1].rmse,
            m[2].rmse,
            m[2].nll
        );
    }
}
