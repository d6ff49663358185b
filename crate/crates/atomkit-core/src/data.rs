//! Trajectory storage (ATRJ v1), windowed batch construction with up-front
//! frame duplication, toy molecular-dynamics generation, and stability
//! analytics.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::geometry::MoleculeState;
use crate::train::DiscretizationPlan;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("truncated payload at byte offset {offset}: {message}")]
    Truncated { offset: usize, message: String },
    #[error("contract violation: {0}")]
    Contract(String),
}

/// A fixed-timestep trajectory: frame i sits at time t0 + i * dt.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub atomic_numbers: Vec<u32>,
    pub dt: f64,
    pub name: String,
    pub frames: Vec<MoleculeState>,
}

impl Trajectory {
    pub fn new(
        atomic_numbers: Vec<u32>,
        dt: f64,
        name: String,
        frames: Vec<MoleculeState>,
    ) -> Result<Trajectory, DataError> {
        if frames.is_empty() {
            return Err(DataError::Contract("trajectory needs at least one frame".into()));
        }
        if dt <= 0.0 {
            return Err(DataError::Contract("dt must be positive".into()));
        }
        let n = atomic_numbers.len();
        for (i, f) in frames.iter().enumerate() {
            if f.n_atoms() != n || f.atomic_numbers != atomic_numbers {
                return Err(DataError::Contract(format!("frame {i} disagrees with header atoms")));
            }
        }
        Ok(Trajectory { atomic_numbers, dt, name, frames })
    }

    pub fn n_atoms(&self) -> usize {
        self.atomic_numbers.len()
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn t0(&self) -> f64 {
        self.frames[0].time
    }
}

const ATRJ_MAGIC: &str = "ATRJ 1";

pub fn save_trajectory(traj: &Trajectory, path: &Path) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    // f64 Display uses the shortest round-tripping decimal form, so dt and t0
    // survive save/load bit-exactly.
    writeln!(w, "{ATRJ_MAGIC}")?;
    writeln!(
        w,
        "{} {} {} {} {}",
        traj.n_atoms(),
        traj.n_frames(),
        traj.dt,
        traj.t0(),
        traj.name
    )?;
    let zs: Vec<String> = traj.atomic_numbers.iter().map(|z| z.to_string()).collect();
    writeln!(w, "{}", zs.join(" "))?;
    for frame in &traj.frames {
        for i in 0..traj.n_atoms() {
            for c in 0..3 {
                w.write_all(&frame.positions[i][c].to_le_bytes())?;
            }
            for c in 0..3 {
                w.write_all(&frame.velocities[i][c].to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_trajectory(path: &Path) -> Result<Trajectory, DataError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let parse = |line: usize, message: &str| DataError::Parse { line, message: message.into() };

    let mut offset = 0usize;
    let mut next_line = |line_no: usize| -> Result<String, DataError> {
        let rest = &bytes[offset..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| parse(line_no, "unexpected end of header"))?;
        let s = std::str::from_utf8(&rest[..end])
            .map_err(|_| parse(line_no, "header is not UTF-8"))?
            .to_string();
        offset += end + 1;
        Ok(s)
    };

    if next_line(1)? != ATRJ_MAGIC {
        return Err(parse(1, "bad magic, expected 'ATRJ 1'"));
    }
    let header = next_line(2)?;
    let mut it = header.splitn(5, ' ');
    let n: usize = it
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| parse(2, "bad atom count"))?;
    let t: usize = it
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| parse(2, "bad frame count"))?;
    let dt: f64 = it
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| parse(2, "bad dt"))?;
    let t0: f64 = it
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| parse(2, "bad t0"))?;
    let name = it.next().unwrap_or("").to_string();

    let z_line = next_line(3)?;
    let atomic_numbers: Vec<u32> = z_line
        .split_whitespace()
        .map(|s| s.parse::<u32>())
        .collect::<Result<_, _>>()
        .map_err(|_| parse(3, "bad atomic number"))?;
    if atomic_numbers.len() != n {
        return Err(parse(3, "atomic number count disagrees with header"));
    }

    let want = t * n * 6 * 8;
    let payload = &bytes[offset..];
    if payload.len() != want {
        return Err(DataError::Truncated {
            offset: bytes.len(),
            message: format!("payload has {} bytes, header implies {}", payload.len(), want),
        });
    }
    let mut cursor = 0usize;
    let mut read_f64 = || {
        let v = f64::from_le_bytes(payload[cursor..cursor + 8].try_into().unwrap());
        cursor += 8;
        v
    };
    let mut frames = Vec::with_capacity(t);
    for fi in 0..t {
        let mut positions = Vec::with_capacity(n);
        let mut velocities = Vec::with_capacity(n);
        for _ in 0..n {
            positions.push([read_f64(), read_f64(), read_f64()]);
            velocities.push([read_f64(), read_f64(), read_f64()]);
        }
        frames.push(
            MoleculeState::new(positions, velocities, atomic_numbers.clone(), t0 + fi as f64 * dt)
                .map_err(|e| DataError::Contract(e.to_string()))?,
        );
    }
    Trajectory::new(atomic_numbers, dt, name, frames)
}

/// One training window: an input frame plus its P query timestamps and target
/// positions. Built once at dataset initialization; batch assembly only clones
/// the Rc handle.
#[derive(Debug)]
pub struct Sample {
    pub input: MoleculeState,
    pub timestamps: Vec<f64>,
    /// P frames of N target positions.
    pub targets: Vec<Vec<[f64; 3]>>,
}

/// All admissible windows of a trajectory under a discretization plan, with
/// target frames gathered (and thereby duplicated) up front.
pub struct WindowedDataset {
    pub samples: Vec<Rc<Sample>>,
    pub p: usize,
    /// Frame-index offsets of the P targets relative to the window start.
    pub offsets: Vec<usize>,
}

impl WindowedDataset {
    pub fn new(traj: &Trajectory, plan: &DiscretizationPlan) -> Result<WindowedDataset, DataError> {
        // Offsets via nearest-frame rounding of (t_p - t) / dt.
        let offsets: Vec<usize> = plan
            .timestamps
            .iter()
            .map(|&tp| ((tp - plan.t) / traj.dt).round() as usize)
            .collect();
        let max_off = *offsets.iter().max().expect("P >= 1");
        if max_off == 0 {
            return Err(DataError::Contract("horizon shorter than one frame step".into()));
        }
        if offsets[0] == 0 || offsets.windows(2).any(|w| w[1] <= w[0]) {
            return Err(DataError::Contract(format!(
                "query spacing finer than the frame step {}: offsets {offsets:?}",
                traj.dt
            )));
        }
        if max_off >= traj.n_frames() {
            return Err(DataError::Contract(format!(
                "trajectory too short: need offset {max_off}, have {} frames",
                traj.n_frames()
            )));
        }
        let mut samples = Vec::new();
        for start in 0..traj.n_frames() - max_off {
            let input = traj.frames[start].clone();
            let timestamps: Vec<f64> =
                offsets.iter().map(|&o| input.time + o as f64 * traj.dt).collect();
            let targets: Vec<Vec<[f64; 3]>> = offsets
                .iter()
                .map(|&o| traj.frames[start + o].positions.clone())
                .collect();
            samples.push(Rc::new(Sample { input, timestamps, targets }));
        }
        Ok(WindowedDataset { samples, p: plan.timestamps.len(), offsets })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Seeded shuffle of the window order, chunked into batches. The final batch
/// may be short. Samples are shared by handle; no frame data is copied.
pub fn make_batches(
    dataset: &WindowedDataset,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<Rc<Sample>>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
        .chunks(batch_size)
        .map(|chunk| chunk.iter().map(|&i| dataset.samples[i].clone()).collect())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyPotential {
    /// Independent unit springs tethering each atom to its starting site.
    Harmonic,
    /// Unit springs between every atom pair, rest length 1.5.
    PairwiseSpring,
}

pub const PAIR_REST_LENGTH: f64 = 1.5;

fn forces(potential: ToyPotential, positions: &[[f64; 3]], anchors: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let n = positions.len();
    let mut f = vec![[0.0; 3]; n];
    match potential {
        ToyPotential::Harmonic => {
            for i in 0..n {
                for c in 0..3 {
                    f[i][c] = -(positions[i][c] - anchors[i][c]);
                }
            }
        }
        ToyPotential::PairwiseSpring => {
            for i in 0..n {
                for j in i + 1..n {
                    let d: Vec<f64> = (0..3).map(|c| positions[i][c] - positions[j][c]).collect();
                    let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt().max(1e-12);
                    let mag = -(r - PAIR_REST_LENGTH) / r;
                    for c in 0..3 {
                        f[i][c] += mag * d[c];
                        f[j][c] -= mag * d[c];
                    }
                }
            }
        }
    }
    f
}

pub fn potential_energy(
    potential: ToyPotential,
    positions: &[[f64; 3]],
    anchors: &[[f64; 3]],
) -> f64 {
    match potential {
        ToyPotential::Harmonic => positions
            .iter()
            .zip(anchors)
            .map(|(x, a)| {
                0.5 * (0..3).map(|c| (x[c] - a[c]).powi(2)).sum::<f64>()
            })
            .sum(),
        ToyPotential::PairwiseSpring => {
            let n = positions.len();
            let mut e = 0.0;
            for i in 0..n {
                for j in i + 1..n {
                    let r: f64 = (0..3)
                        .map(|c| (positions[i][c] - positions[j][c]).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    e += 0.5 * (r - PAIR_REST_LENGTH).powi(2);
                }
            }
            e
        }
    }
}

pub fn kinetic_energy(velocities: &[[f64; 3]]) -> f64 {
    velocities
        .iter()
        .map(|v| 0.5 * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]))
        .sum()
}

/// Velocity-Verlet integration from seeded initial conditions; unit masses,
/// natural units. With seed-driven jitter of zero the harmonic system starts
/// at its fixed point and stays there.
pub fn generate_toy_trajectory(
    potential: ToyPotential,
    n: usize,
    steps: usize,
    dt: f64,
    seed: u64,
) -> Result<Trajectory, DataError> {
    generate_toy_trajectory_jittered(potential, n, steps, dt, seed, 0.3, 0.2)
}

pub fn generate_toy_trajectory_jittered(
    potential: ToyPotential,
    n: usize,
    steps: usize,
    dt: f64,
    seed: u64,
    pos_jitter: f64,
    vel_jitter: f64,
) -> Result<Trajectory, DataError> {
    if n < 2 && potential == ToyPotential::PairwiseSpring {
        return Err(DataError::Contract("pairwise potential needs at least 2 atoms".into()));
    }
    if n == 0 || steps < 2 {
        return Err(DataError::Contract("need at least 1 atom and 2 steps".into()));
    }
    if dt <= 0.0 {
        return Err(DataError::Contract("dt must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Anchor sites on a loose lattice so pairwise systems start spread out.
    let anchors: Vec<[f64; 3]> = (0..n)
        .map(|i| {
            [
                (i % 3) as f64 * PAIR_REST_LENGTH,
                ((i / 3) % 3) as f64 * PAIR_REST_LENGTH,
                (i / 9) as f64 * PAIR_REST_LENGTH,
            ]
        })
        .collect();
    let mut positions: Vec<[f64; 3]> = anchors
        .iter()
        .map(|a| {
            let mut x = *a;
            for c in x.iter_mut() {
                *c += pos_jitter * rng.sample::<f64, _>(StandardNormal);
            }
            x
        })
        .collect();
    let mut velocities: Vec<[f64; 3]> = (0..n)
        .map(|_| {
            let mut v = [0.0; 3];
            for c in v.iter_mut() {
                *c = vel_jitter * rng.sample::<f64, _>(StandardNormal);
            }
            v
        })
        .collect();

    let atomic_numbers = vec![6u32; n];
    let mut frames = Vec::with_capacity(steps);
    let mut f = forces(potential, &positions, &anchors);
    for step in 0..steps {
        frames.push(
            MoleculeState::new(
                positions.clone(),
                velocities.clone(),
                atomic_numbers.clone(),
                step as f64 * dt,
            )
            .expect("valid state"),
        );
        if step + 1 == steps {
            break;
        }
        for i in 0..n {
            for c in 0..3 {
                positions[i][c] += dt * velocities[i][c] + 0.5 * dt * dt * f[i][c];
            }
        }
        let f_new = forces(potential, &positions, &anchors);
        for i in 0..n {
            for c in 0..3 {
                velocities[i][c] += 0.5 * dt * (f[i][c] + f_new[i][c]);
            }
        }
        f = f_new;
    }
    let name = match potential {
        ToyPotential::Harmonic => format!("harmonic-{n}"),
        ToyPotential::PairwiseSpring => format!("pairspring-{n}"),
    };
    Trajectory::new(atomic_numbers, dt, name, frames)
}

/// Anchor sites used by the harmonic potential for a given trajectory seed.
/// Exposed so energy audits can recompute the potential.
pub fn toy_anchors(n: usize) -> Vec<[f64; 3]> {
    (0..n)
        .map(|i| {
            [
                (i % 3) as f64 * PAIR_REST_LENGTH,
                ((i / 3) % 3) as f64 * PAIR_REST_LENGTH,
                (i / 9) as f64 * PAIR_REST_LENGTH,
            ]
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityReport {
    /// Max distance of the (unit-mass) center of mass from its initial value.
    pub com_drift: f64,
    /// Mean over frame transitions of the mean atomic displacement.
    pub per_step_motion: f64,
}

pub fn stability_metrics(traj: &Trajectory) -> Result<StabilityReport, DataError> {
    if traj.n_frames() < 2 {
        return Err(DataError::Contract("stability metrics need at least 2 frames".into()));
    }
    let n = traj.n_atoms() as f64;
    let com = |frame: &MoleculeState| -> [f64; 3] {
        let mut c = [0.0; 3];
        for x in &frame.positions {
            for k in 0..3 {
                c[k] += x[k] / n;
            }
        }
        c
    };
    let c0 = com(&traj.frames[0]);
    let mut drift: f64 = 0.0;
    for frame in &traj.frames {
        let c = com(frame);
        let d = ((c[0] - c0[0]).powi(2) + (c[1] - c0[1]).powi(2) + (c[2] - c0[2]).powi(2)).sqrt();
        drift = drift.max(d);
    }
    let mut motion = 0.0;
    for w in traj.frames.windows(2) {
        let mut frame_mean = 0.0;
        for (a, b) in w[0].positions.iter().zip(&w[1].positions) {
            frame_mean += ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2) + (b[2] - a[2]).powi(2))
                .sqrt()
                / n;
        }
        motion += frame_mean;
    }
    motion /= (traj.n_frames() - 1) as f64;
    Ok(StabilityReport { com_drift: drift, per_step_motion: motion })
}
