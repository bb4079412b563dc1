use mts3::datagen::{gen_springmass, normalize};
use mts3::model::{gaussian_nll, init_beliefs, next_step_targets, sample_imputation_mask, Mts3, Mts3Config};
use mts3::tensor::Tape;
use mts3::training::gather_batch;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::time::Instant;

#[test]
#[ignore]
fn probe_phases() {
    let cfg = Mts3Config {
        d_obs: 2,
        d_act: 2,
        d_z: 8,
        d_l: 8,
        h: 15,
        enc_hidden: 60,
        set_hidden: 80,
        dec_hidden: 60,
        ctrl_hidden: 60,
        seed: 0,
        ..Default::default()
    };
    let data = gen_springmass(50, 450, 0.02, 150, 7);
    let (normed, _) = normalize(data);
    let idx: Vec<usize> = (0..50).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(1);
    let masks: Vec<Vec<bool>> = (0..50)
        .map(|_| sample_imputation_mask(450, 15, 30, 0.5, 0.25, 0.25, &mut rng))
        .collect();
    let input = gather_batch(&normed, &idx, &masks, 15);
    let model = Mts3::new(cfg.clone()).unwrap();
    let (targets, weights) = next_step_targets(&input);
    let (task0, state0) = init_beliefs(&cfg);

    for round in 0..3 {
        let t0 = Instant::now();
        let tape = Tape::new();
        let bind = model.store.bind(&tape);
        let g = model.filter_batch(&tape, &bind, &input, &state0, &task0, true, true);
        let loss = gaussian_nll(&tape, g.pred_mean, g.pred_var, &targets, &weights);
        let fwd = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let grads = tape.backward(loss);
        let bwd = t1.elapsed().as_secs_f64();
        let t2 = Instant::now();
        let pg = model.store.gather_grads(&bind, &grads);
        println!(
            "round {round}: forward {fwd:.3}s backward {bwd:.3}s gather {:.4}s nodes {} params {}",
            t2.elapsed().as_secs_f64(),
            tape.len(),
            pg.len()
        );
    }

    // raw GEMM of encoder head shape
    let t3 = Instant::now();
    let tape2 = Tape::new();
    let a = tape2.full(22500, 60, 0.5);
    let b = tape2.full(60, 16, 0.25);
    for _ in 0..10 {
        let _ = a.matmul(b);
    }
    let gemm = t3.elapsed().as_secs_f64() / 10.0;
    println!(
        "gemm [22500x60]x[60x16]: {:.4}s = {:.2} GFlop/s",
        gemm,
        22500.0 * 60.0 * 16.0 * 2.0 / gemm / 1e9
    );
}

#[test]
#[ignore]
fn probe_node_costs() {
    use std::time::Instant;
    // small elementwise chain like the recurrence
    let tape = Tape::new();
    let a = tape.full(50, 8, 1.0);
    let p = tape.full(1, 8, 0.5);
    let m = tape.full(50, 1, 1.0);
    let t0 = Instant::now();
    let mut x = a;
    for _ in 0..10000 {
        x = x * p + a - (x * m);
    }
    println!("30k small binary ops: {:.3}s", t0.elapsed().as_secs_f64());

    // big broadcast bias add
    let h = tape.full(22500, 60, 0.3);
    let bias = tape.full(1, 60, 0.1);
    let t1 = Instant::now();
    for _ in 0..30 {
        let _ = h + bias;
    }
    println!("30 big row-broadcast adds: {:.3}s", t1.elapsed().as_secs_f64());

    // big same-shape op
    let h2 = tape.full(22500, 60, 0.2);
    let t2 = Instant::now();
    for _ in 0..30 {
        let _ = h + h2;
    }
    println!("30 big same-shape adds: {:.3}s", t2.elapsed().as_secs_f64());

    // slice_rows of a big tensor
    let t3 = Instant::now();
    for i in 0..450 {
        let _ = h.slice_rows((i % 400) * 50, 50);
    }
    println!("450 slice_rows(50) of big: {:.3}s", t3.elapsed().as_secs_f64());

    // softplus on big
    let t4 = Instant::now();
    for _ in 0..10 {
        let _ = h.softplus();
    }
    println!("10 big softplus: {:.3}s", t4.elapsed().as_secs_f64());

    // concat_rows of 450 small tensors
    let smalls: Vec<_> = (0..450).map(|_| tape.full(50, 16, 0.1)).collect();
    let t5 = Instant::now();
    let _ = tape.concat_rows(&smalls);
    println!("concat_rows 450x[50,16]: {:.3}s", t5.elapsed().as_secs_f64());
}

#[test]
#[ignore]
fn probe_raw_costs() {
    use std::time::Instant;
    // raw allocation + compute cost of what binary() does, no tape
    let a = vec![1.0f64; 400];
    let b = vec![0.5f64; 8];
    let t0 = Instant::now();
    let mut keep: Vec<Vec<f64>> = Vec::new();
    for _ in 0..40000 {
        let mut out = vec![0.0f64; 400];
        for i in 0..50 {
            for j in 0..8 {
                out[i * 8 + j] = a[i * 8 + j] * b[j];
            }
        }
        keep.push(out);
    }
    println!("40k raw alloc+compute(kept): {:.3}s", t0.elapsed().as_secs_f64());
    drop(keep);

    let t1 = Instant::now();
    let mut acc = 0.0;
    for _ in 0..40000 {
        let mut out = vec![0.0f64; 400];
        for i in 0..50 {
            for j in 0..8 {
                out[i * 8 + j] = a[i * 8 + j] * b[j];
            }
        }
        acc += out[0];
    }
    println!("40k raw alloc+compute(dropped): {:.3}s acc={acc}", t1.elapsed().as_secs_f64());

    // same via the tape but dropping the tape every 100 ops
    let t2 = Instant::now();
    for _ in 0..400 {
        let tape = Tape::new();
        let x = tape.full(50, 8, 1.0);
        let p = tape.full(1, 8, 0.5);
        let mut y = x;
        for _ in 0..100 {
            y = y * p;
        }
    }
    println!("40k tape ops in 400 tapes: {:.3}s", t2.elapsed().as_secs_f64());

    // one growing tape
    let t3 = Instant::now();
    let tape = Tape::new();
    let x = tape.full(50, 8, 1.0);
    let p = tape.full(1, 8, 0.5);
    let mut y = x;
    for _ in 0..40000 {
        y = y * p;
    }
    println!("40k tape ops one tape: {:.3}s", t3.elapsed().as_secs_f64());
}
