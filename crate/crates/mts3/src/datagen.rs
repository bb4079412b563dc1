//! Synthetic non-stationary dynamical systems for desk-scale experiments,
//! per-dimension normalization, and the `MTS3DAT1` dataset format.
//!
//! Both generators create the kind of data the model is built for: partially
//! observed states (positions only), band-limited random actions, and hidden
//! dynamics parameters that drift on a slow cadence so the slow time scale
//! has something to track.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MtsError, Result};

/// Piecewise-constant hidden dynamics parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegimeSchedule {
    /// `(start step, parameter vector)`, starts strictly increasing from 0.
    pub entries: Vec<(usize, Vec<f64>)>,
}

impl RegimeSchedule {
    pub fn params_at(&self, step: usize) -> &[f64] {
        let mut cur = &self.entries[0].1;
        for (start, p) in &self.entries {
            if *start <= step {
                cur = p;
            } else {
                break;
            }
        }
        cur
    }
}

/// Per-dimension standardization statistics, computed on a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub obs_mean: Vec<f64>,
    pub obs_std: Vec<f64>,
    pub act_mean: Vec<f64>,
    pub act_std: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub dt: f64,
    pub seed: u64,
    pub generator: String,
    pub norm: Option<NormStats>,
    pub schedules: Vec<RegimeSchedule>,
    /// Standard deviation of the iid observation noise the generator added.
    pub obs_noise: f64,
}

/// A batch of trajectories, trajectory-major:
/// `obs[(i·T + s)·d_obs + j]` is trajectory `i`, step `s`, dimension `j`.
#[derive(Clone, Debug)]
pub struct TrajectoryBatch {
    pub n_traj: usize,
    pub t: usize,
    pub d_obs: usize,
    pub d_act: usize,
    pub obs: Vec<f64>,
    pub acts: Vec<f64>,
    pub valid: Vec<u8>,
    pub meta: DatasetMeta,
}

impl TrajectoryBatch {
    pub fn obs_at(&self, traj: usize, step: usize) -> &[f64] {
        let base = (traj * self.t + step) * self.d_obs;
        &self.obs[base..base + self.d_obs]
    }

    pub fn validate(&self) -> Result<()> {
        if self.obs.len() != self.n_traj * self.t * self.d_obs
            || self.acts.len() != self.n_traj * self.t * self.d_act
            || self.valid.len() != self.n_traj * self.t
        {
            return Err(MtsError::Data("trajectory batch shape mismatch".into()));
        }
        if !self.obs.iter().chain(&self.acts).all(|x| x.is_finite()) {
            return Err(MtsError::Data("non-finite values in batch".into()));
        }
        if !self.valid.iter().all(|&f| f <= 1) {
            return Err(MtsError::Data("valid flags must be 0/1".into()));
        }
        Ok(())
    }

    /// Split off the first `n` trajectories (train) from the rest (test);
    /// splits are disjoint by construction.
    pub fn split(mut self, n: usize) -> (TrajectoryBatch, TrajectoryBatch) {
        assert!(n <= self.n_traj, "split: n out of range");
        let t = self.t;
        let rest = TrajectoryBatch {
            n_traj: self.n_traj - n,
            t,
            d_obs: self.d_obs,
            d_act: self.d_act,
            obs: self.obs.split_off(n * t * self.d_obs),
            acts: self.acts.split_off(n * t * self.d_act),
            valid: self.valid.split_off(n * t),
            meta: DatasetMeta {
                schedules: self.meta.schedules.split_off(n.min(self.meta.schedules.len())),
                ..self.meta.clone()
            },
        };
        self.n_traj = n;
        (self, rest)
    }

    /// Select trajectories by index into a new batch.
    pub fn select(&self, idx: &[usize]) -> TrajectoryBatch {
        let t = self.t;
        let mut out = TrajectoryBatch {
            n_traj: idx.len(),
            t,
            d_obs: self.d_obs,
            d_act: self.d_act,
            obs: Vec::with_capacity(idx.len() * t * self.d_obs),
            acts: Vec::with_capacity(idx.len() * t * self.d_act),
            valid: Vec::with_capacity(idx.len() * t),
            meta: DatasetMeta {
                schedules: Vec::new(),
                ..self.meta.clone()
            },
        };
        for &i in idx {
            out.obs
                .extend_from_slice(&self.obs[i * t * self.d_obs..(i + 1) * t * self.d_obs]);
            out.acts
                .extend_from_slice(&self.acts[i * t * self.d_act..(i + 1) * t * self.d_act]);
            out.valid.extend_from_slice(&self.valid[i * t..(i + 1) * t]);
            if let Some(s) = self.meta.schedules.get(i) {
                out.meta.schedules.push(s.clone());
            }
        }
        out
    }
}

/// Ornstein-Uhlenbeck process, the band-limited action source.
struct Ou {
    value: f64,
    tau: f64,
    sigma: f64,
}

impl Ou {
    fn step(&mut self, dt: f64, rng: &mut ChaCha12Rng) -> f64 {
        let noise: f64 = standard_normal(rng);
        self.value += dt * (-self.value / self.tau) + self.sigma * dt.sqrt() * noise;
        self.value
    }
}

fn standard_normal(rng: &mut ChaCha12Rng) -> f64 {
    // Box-Muller on two uniforms keeps us independent of distribution crates
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Two-mass spring-damper chain under gravity with switching
/// stiffness/damping/payload, a slow actuator lag on the forces, and
/// position-only observations.
///
/// Parameter vector per regime: `[k1, k2, c1, c2, m2]`. Base values are
/// drawn once per trajectory and each regime rescales them, so a context
/// window identifies the trajectory while switches still change the
/// dynamics mid-trajectory. Gravity makes the equilibrium depend on the
/// payload and stiffness, so every regime also has its own operating
/// point — the slow-moving quantity the task latent is meant to track.
pub fn gen_springmass(
    n_traj: usize,
    t: usize,
    dt: f64,
    regime_period: usize,
    seed: u64,
) -> TrajectoryBatch {
    let d_obs = 2;
    let d_act = 2;
    let obs_noise = 0.03;
    let mut batch = TrajectoryBatch {
        n_traj,
        t,
        d_obs,
        d_act,
        obs: vec![0.0; n_traj * t * d_obs],
        acts: vec![0.0; n_traj * t * d_act],
        valid: vec![1; n_traj * t],
        meta: DatasetMeta {
            dt,
            seed,
            generator: "springmass".into(),
            norm: None,
            schedules: Vec::with_capacity(n_traj),
            obs_noise,
        },
    };

    for traj in 0..n_traj {
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ (0x5EED_0000 + traj as u64));
        'attempt: loop {
            // hierarchical regime draws: per-trajectory base, per-regime scale
            let base = [
                rng.gen_range(1.0..3.0),   // k1
                rng.gen_range(1.0..3.0),   // k2
                rng.gen_range(0.2..0.5),   // c1
                rng.gen_range(0.2..0.5),   // c2
                rng.gen_range(0.6..1.6),   // m2
            ];
            let n_regimes = t.div_ceil(regime_period.max(1));
            let mut schedule = RegimeSchedule { entries: Vec::new() };
            for r in 0..n_regimes {
                // per-regime rescaling around the trajectory's base values:
                // switches change the dynamics, the base stays identifiable
                let params: Vec<f64> = base
                    .iter()
                    .map(|&b| b * rng.gen_range(0.85..1.2))
                    .collect();
                schedule.entries.push((r * regime_period, params));
            }

            let mut force = [
                Ou { value: 0.0, tau: 1.2, sigma: 1.6 },
                Ou { value: 0.0, tau: 1.2, sigma: 1.6 },
            ];
            let tau_lag = 1.0;
            let gravity = 1.25;
            let mut lag = [0.0f64; 2];
            // start near the first regime's equilibrium
            let p0 = schedule.params_at(0).to_vec();
            let mut q1 = -(1.0 + p0[4]) * gravity / p0[0];
            let mut q2 = q1 - p0[4] * gravity / p0[1];
            let (mut v1, mut v2) = (0.0f64, 0.0);

            let mut obs_rows = Vec::with_capacity(t * d_obs);
            let mut act_rows = Vec::with_capacity(t * d_act);
            for step in 0..t {
                let p = schedule.params_at(step);
                let (k1, k2, c1, c2, m2) = (p[0], p[1], p[2], p[3], p[4]);
                let a1 = force[0].step(dt, &mut rng) + 0.1 * standard_normal(&mut rng);
                let a2 = force[1].step(dt, &mut rng) + 0.1 * standard_normal(&mut rng);
                act_rows.push(a1);
                act_rows.push(a2);
                // slow hydraulic-style lag between command and effective force
                lag[0] += dt / tau_lag * (a1 - lag[0]);
                lag[1] += dt / tau_lag * (a2 - lag[1]);

                let f1 = -k1 * q1 - c1 * v1 + k2 * (q2 - q1) + c2 * (v2 - v1) + lag[0]
                    - gravity;
                let f2 = -k2 * (q2 - q1) - c2 * (v2 - v1) + lag[1] - m2 * gravity;
                v1 += dt * f1; // m1 = 1
                v2 += dt * f2 / m2;
                q1 += dt * v1;
                q2 += dt * v2;
                if !(q1.is_finite() && q2.is_finite()) || q1.abs() > 50.0 || q2.abs() > 50.0 {
                    continue 'attempt;
                }
                obs_rows.push(q1 + obs_noise * standard_normal(&mut rng));
                obs_rows.push(q2 + obs_noise * standard_normal(&mut rng));
            }

            let ob = traj * t * d_obs;
            batch.obs[ob..ob + t * d_obs].copy_from_slice(&obs_rows);
            let ab = traj * t * d_act;
            batch.acts[ab..ab + t * d_act].copy_from_slice(&act_rows);
            batch.meta.schedules.push(schedule);
            break;
        }
    }
    batch
}

/// Unicycle on a height field built from a sum of sinusoids; observations
/// are the pose features `[x, y, z, cos/sin roll, cos/sin pitch,
/// cos/sin yaw]`, actions are speed and turn-rate commands. Terrain
/// parameters vary per trajectory.
pub fn gen_sine_terrain(n_traj: usize, t: usize, dt: f64, seed: u64) -> TrajectoryBatch {
    let d_obs = 9;
    let d_act = 2;
    let obs_noise = 0.01;
    let waves = 3;
    let mut batch = TrajectoryBatch {
        n_traj,
        t,
        d_obs,
        d_act,
        obs: vec![0.0; n_traj * t * d_obs],
        acts: vec![0.0; n_traj * t * d_act],
        valid: vec![1; n_traj * t],
        meta: DatasetMeta {
            dt,
            seed,
            generator: "terrain".into(),
            norm: None,
            schedules: Vec::with_capacity(n_traj),
            obs_noise,
        },
    };

    for traj in 0..n_traj {
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ (0x7E44_0000 + traj as u64));
        // terrain parameters: [amp, freq_x, freq_y, phase] per wave
        let mut params = Vec::with_capacity(waves * 4);
        for _ in 0..waves {
            params.push(rng.gen_range(0.05..0.35));
            params.push(rng.gen_range(0.3..1.2));
            params.push(rng.gen_range(0.3..1.2));
            params.push(rng.gen_range(0.0..std::f64::consts::TAU));
        }
        let height = |x: f64, y: f64| -> (f64, f64, f64) {
            let mut z = 0.0;
            let mut gx = 0.0;
            let mut gy = 0.0;
            for w in params.chunks(4) {
                let (a, fx, fy, ph) = (w[0], w[1], w[2], w[3]);
                let arg = fx * x + fy * y + ph;
                z += a * arg.sin();
                gx += a * fx * arg.cos();
                gy += a * fy * arg.cos();
            }
            (z, gx, gy)
        };

        let mut speed = Ou { value: 0.0, tau: 1.5, sigma: 0.8 };
        let mut turn = Ou { value: 0.0, tau: 1.0, sigma: 1.2 };
        let (mut x, mut y) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let mut yaw: f64 = rng.gen_range(0.0..std::f64::consts::TAU);

        for step in 0..t {
            let v_cmd = 0.6 + speed.step(dt, &mut rng).clamp(-0.5, 0.5);
            let w_cmd = turn.step(dt, &mut rng).clamp(-1.5, 1.5);
            let ab = (traj * t + step) * d_act;
            batch.acts[ab] = v_cmd;
            batch.acts[ab + 1] = w_cmd;

            yaw += dt * w_cmd;
            x += dt * v_cmd * yaw.cos();
            y += dt * v_cmd * yaw.sin();

            let (z, gx, gy) = height(x, y);
            // pitch from the slope along heading, roll from the lateral slope
            let pitch = (gx * yaw.cos() + gy * yaw.sin()).atan();
            let roll = (-gx * yaw.sin() + gy * yaw.cos()).atan();

            let ob = (traj * t + step) * d_obs;
            let n = obs_noise;
            batch.obs[ob] = x + n * standard_normal(&mut rng);
            batch.obs[ob + 1] = y + n * standard_normal(&mut rng);
            batch.obs[ob + 2] = z + n * standard_normal(&mut rng);
            batch.obs[ob + 3] = roll.cos() + n * standard_normal(&mut rng);
            batch.obs[ob + 4] = roll.sin() + n * standard_normal(&mut rng);
            batch.obs[ob + 5] = pitch.cos() + n * standard_normal(&mut rng);
            batch.obs[ob + 6] = pitch.sin() + n * standard_normal(&mut rng);
            batch.obs[ob + 7] = yaw.cos() + n * standard_normal(&mut rng);
            batch.obs[ob + 8] = yaw.sin() + n * standard_normal(&mut rng);
        }
        batch.meta.schedules.push(RegimeSchedule {
            entries: vec![(0, params)],
        });
    }
    batch
}

/// Per-dimension standardization; constant dimensions get std 1 so nothing
/// blows up. Returns the normalized batch and the statistics.
pub fn normalize(mut batch: TrajectoryBatch) -> (TrajectoryBatch, NormStats) {
    fn stats(data: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
        let n = data.len() / d;
        let mut mean = vec![0.0; d];
        for row in data.chunks(d) {
            for (m, &x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        let mut var = vec![0.0; d];
        for row in data.chunks(d) {
            for (j, &x) in row.iter().enumerate() {
                var[j] += (x - mean[j]) * (x - mean[j]);
            }
        }
        let std: Vec<f64> = var
            .iter()
            .map(|&v| {
                let s = (v / n as f64).sqrt();
                if s < 1e-12 {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        (mean, std)
    }
    fn apply(data: &mut [f64], mean: &[f64], std: &[f64]) {
        let d = mean.len();
        for row in data.chunks_mut(d) {
            for (j, x) in row.iter_mut().enumerate() {
                *x = (*x - mean[j]) / std[j];
            }
        }
    }

    let (obs_mean, obs_std) = stats(&batch.obs, batch.d_obs);
    let (act_mean, act_std) = stats(&batch.acts, batch.d_act);
    apply(&mut batch.obs, &obs_mean, &obs_std);
    apply(&mut batch.acts, &act_mean, &act_std);
    let stats = NormStats {
        obs_mean,
        obs_std,
        act_mean,
        act_std,
    };
    batch.meta.norm = Some(stats.clone());
    (batch, stats)
}

/// Normalize with existing statistics (for validation/test splits).
pub fn normalize_with(mut batch: TrajectoryBatch, stats: &NormStats) -> TrajectoryBatch {
    for row in batch.obs.chunks_mut(batch.d_obs) {
        for (j, x) in row.iter_mut().enumerate() {
            *x = (*x - stats.obs_mean[j]) / stats.obs_std[j];
        }
    }
    for row in batch.acts.chunks_mut(batch.d_act) {
        for (j, x) in row.iter_mut().enumerate() {
            *x = (*x - stats.act_mean[j]) / stats.act_std[j];
        }
    }
    batch.meta.norm = Some(stats.clone());
    batch
}

/// Undo observation normalization on predictions (in place).
pub fn denormalize_obs(preds: &mut [f64], stats: &NormStats) {
    let d = stats.obs_mean.len();
    for row in preds.chunks_mut(d) {
        for (j, x) in row.iter_mut().enumerate() {
            *x = *x * stats.obs_std[j] + stats.obs_mean[j];
        }
    }
}

const MAGIC: &[u8; 8] = b"MTS3DAT1";

/// Write the `MTS3DAT1` format: 8-byte magic, little-endian u32 fields
/// `{version, B, T, d_o, d_a}`, f32 obs, f32 acts, u8 flags, then a
/// u32-length-prefixed UTF-8 JSON metadata blob.
pub fn write_dataset(batch: &TrajectoryBatch, path: &Path) -> Result<()> {
    batch.validate()?;
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    for v in [
        1u32,
        batch.n_traj as u32,
        batch.t as u32,
        batch.d_obs as u32,
        batch.d_act as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &x in &batch.obs {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    for &x in &batch.acts {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    buf.extend_from_slice(&batch.valid);
    let meta = serde_json::to_vec(&batch.meta)?;
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<TrajectoryBatch> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(MtsError::Data("dataset file truncated".into()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 8)? != MAGIC {
        return Err(MtsError::Data("not an MTS3DAT1 file".into()));
    }
    let mut u32s = [0u32; 5];
    for v in u32s.iter_mut() {
        *v = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    }
    let [version, b, t, d_o, d_a] = u32s;
    if version != 1 {
        return Err(MtsError::Data(format!("unsupported version {version}")));
    }
    let (b, t, d_o, d_a) = (b as usize, t as usize, d_o as usize, d_a as usize);
    let read_f32s = |n: usize, pos: &mut usize| -> Result<Vec<f64>> {
        let raw = take(pos, n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    };
    let obs = read_f32s(b * t * d_o, &mut pos)?;
    let acts = read_f32s(b * t * d_a, &mut pos)?;
    let valid = take(&mut pos, b * t)?.to_vec();
    let meta_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let meta: DatasetMeta = serde_json::from_slice(take(&mut pos, meta_len)?)?;
    let batch = TrajectoryBatch {
        n_traj: b,
        t,
        d_obs: d_o,
        d_act: d_a,
        obs,
        acts,
        valid,
        meta,
    };
    batch.validate()?;
    Ok(batch)
}
