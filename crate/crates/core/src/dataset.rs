//! Newton-step training data harvested from integrator traces.
//!
//! Every Newton update `k2^(i) -> k2^(i+1)` of every full-size step becomes
//! one [`StepSample`], and each converged step contributes one extra pair
//! `(k2*, G(k2*))` so the data also shows the fixed point being fixed. The
//! per-step sample count therefore equals the step's pass count.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrator::{newton_update, simulate_traced, NewtonConfig};
use crate::systems::{DynamicalSystem, InitialConditionSampler};

#[derive(Clone, Debug, PartialEq)]
pub struct StepSample {
    /// State anchoring the step; constant across its Newton iterations.
    pub x: DVector<f64>,
    pub k2_in: DVector<f64>,
    pub k2_out: DVector<f64>,
    pub trajectory_id: u32,
    pub time_index: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<StepSample>,
    pub system_name: String,
    pub n: usize,
    pub dt: f64,
    pub newton_tol: f64,
    /// Size of the trajectory id space; ids of a split subset keep their
    /// original values.
    pub trajectory_count: u32,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Distinct trajectory ids present, ascending.
    pub fn trajectory_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.samples.iter().map(|s| s.trajectory_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Column-stacked `(k2_in, x, k2_out)` matrices, each `n x len`.
    pub fn to_matrices(&self) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        stack_samples(self.n, self.samples.iter())
    }

    /// Lossy inspection export: `traj,t_idx,x*,k2_in*,k2_out*`.
    pub fn to_csv(&self) -> String {
        let n = self.n;
        let mut out = String::from("traj,t_idx");
        for prefix in ["x", "k2_in", "k2_out"] {
            for i in 1..=n {
                out.push_str(&format!(",{prefix}{i}"));
            }
        }
        out.push('\n');
        for s in &self.samples {
            out.push_str(&format!("{},{}", s.trajectory_id, s.time_index));
            for v in s.x.iter().chain(s.k2_in.iter()).chain(s.k2_out.iter()) {
                out.push_str(&format!(",{v:?}"));
            }
            out.push('\n');
        }
        out
    }

    fn with_samples(&self, samples: Vec<StepSample>) -> Dataset {
        Dataset {
            samples,
            system_name: self.system_name.clone(),
            n: self.n,
            dt: self.dt,
            newton_tol: self.newton_tol,
            trajectory_count: self.trajectory_count,
            seed: self.seed,
        }
    }

    /// Uniformly drawn subset of at most `max` samples (order preserved).
    pub fn subsample(&self, max: usize, seed: u64) -> Dataset {
        if self.len() <= max {
            return self.clone();
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(max);
        idx.sort_unstable();
        self.with_samples(idx.into_iter().map(|i| self.samples[i].clone()).collect())
    }
}

pub(crate) fn stack_samples<'a>(
    n: usize,
    samples: impl ExactSizeIterator<Item = &'a StepSample>,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let count = samples.len();
    let mut k2 = DMatrix::zeros(n, count);
    let mut x = DMatrix::zeros(n, count);
    let mut t = DMatrix::zeros(n, count);
    for (j, s) in samples.enumerate() {
        k2.set_column(j, &s.k2_in);
        x.set_column(j, &s.x);
        t.set_column(j, &s.k2_out);
    }
    (k2, x, t)
}

/// Simulates `n_traj` trajectories from independent sampler streams and
/// records every Newton pass as a training pair.
pub fn generate_dataset(
    system: &dyn DynamicalSystem,
    sampler: &InitialConditionSampler,
    n_traj: usize,
    dt: f64,
    t_end: f64,
    cfg: &NewtonConfig,
) -> Result<Dataset> {
    if n_traj == 0 {
        return Err(Error::Argument("n_traj must be at least 1".into()));
    }
    if n_traj > u32::MAX as usize {
        return Err(Error::Argument("too many trajectories".into()));
    }
    let per_traj: Vec<Result<Vec<StepSample>>> = (0..n_traj)
        .into_par_iter()
        .map(|id| {
            let x0 = sampler.stream(id as u64).sample();
            trajectory_samples(system, &x0, id as u32, dt, t_end, cfg)
                .map_err(|e| Error::Trajectory { trajectory: id, source: Box::new(e) })
        })
        .collect();
    let mut samples = Vec::new();
    for chunk in per_traj {
        samples.extend(chunk?);
    }
    Ok(Dataset {
        samples,
        system_name: system.name().to_string(),
        n: system.dim(),
        dt,
        newton_tol: cfg.tol,
        trajectory_count: n_traj as u32,
        seed: sampler.seed(),
    })
}

fn trajectory_samples(
    system: &dyn DynamicalSystem,
    x0: &DVector<f64>,
    id: u32,
    dt: f64,
    t_end: f64,
    cfg: &NewtonConfig,
) -> Result<Vec<StepSample>> {
    let traced = simulate_traced(system, x0, dt, t_end, cfg)?;
    let mut out = Vec::new();
    for (step, trace) in traced.traces.iter().enumerate() {
        let Some(trace) = trace else {
            log::warn!("trajectory {id}: step {step} needed dt halving; no samples recorded");
            continue;
        };
        let mk = |k2_in: &DVector<f64>, k2_out: DVector<f64>| StepSample {
            x: trace.x.clone(),
            k2_in: k2_in.clone(),
            k2_out,
            trajectory_id: id,
            time_index: step as u32,
        };
        for pair in trace.iterates.windows(2) {
            out.push(mk(&pair[0], pair[1].clone()));
        }
        let root = trace.root();
        out.push(mk(root, newton_update(system, &trace.x, root, dt)?));
    }
    Ok(out)
}

/// Partitions whole trajectories into `(train, test)`.
pub fn split_by_trajectory(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Argument(format!("test_fraction must lie in (0, 1), got {test_fraction}")));
    }
    let mut ids = ds.trajectory_ids();
    let n_test = (ids.len() as f64 * test_fraction).round() as usize;
    if n_test == 0 || n_test >= ids.len() {
        return Err(Error::Argument(format!(
            "test_fraction {test_fraction} leaves an empty side with {} trajectories",
            ids.len()
        )));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_test = std::collections::HashSet::new();
    is_test.extend(ids[..n_test].iter().copied());
    let (test, train): (Vec<_>, Vec<_>) = ds.samples.iter().cloned().partition(|s| is_test.contains(&s.trajectory_id));
    Ok((ds.with_samples(train), ds.with_samples(test)))
}

const DATASET_MAGIC: &[u8; 4] = b"CNNS";
const DATASET_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    system: String,
    n: usize,
    dt: f64,
    newton_tol: f64,
    trajectory_count: u32,
    seed: u64,
    samples: u64,
}

/// FNV-1a over the payload bytes.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ *b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Binary layout: magic `CNNS`, version `u16`, header length `u32`, JSON
/// header, then per sample `u32 trajectory, u32 time index` and `3n`
/// little-endian `f64` (x, k2_in, k2_out), then an FNV-1a `u64` of every
/// preceding byte.
pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&DatasetHeader {
        system: ds.system_name.clone(),
        n: ds.n,
        dt: ds.dt,
        newton_tol: ds.newton_tol,
        trajectory_count: ds.trajectory_count,
        seed: ds.seed,
        samples: ds.samples.len() as u64,
    })?;
    let mut out = Vec::with_capacity(14 + header.len() + ds.len() * (8 + 24 * ds.n) + 8);
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for s in &ds.samples {
        for v in [&s.x, &s.k2_in, &s.k2_out] {
            if v.len() != ds.n {
                return Err(Error::Dimension { context: "dataset sample", expected: ds.n, got: v.len() });
            }
        }
        out.extend_from_slice(&s.trajectory_id.to_le_bytes());
        out.extend_from_slice(&s.time_index.to_le_bytes());
        for v in s.x.iter().chain(s.k2_in.iter()).chain(s.k2_out.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let checksum = fnv1a(&out);
    out.extend_from_slice(&checksum.to_le_bytes());
    Ok(out)
}

/// Byte cursor that reports offsets on failure.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub(crate) fn offset(&self) -> usize {
        self.pos
    }

    pub(crate) fn fail(&self, message: impl Into<String>) -> Error {
        Error::Format { offset: self.pos as u64, message: message.into() }
    }

    pub(crate) fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < len {
            return Err(self.fail(format!("truncated: wanted {len} bytes, {} remain", self.bytes.len() - self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != magic {
            self.pos -= 4;
            return Err(self.fail(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.fail(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes);
    r.expect_magic(DATASET_MAGIC)?;
    let version = r.u16()?;
    if version != DATASET_VERSION {
        return Err(Error::Format { offset: 4, message: format!("unsupported dataset version {version}") });
    }
    let header_len = r.u32()? as usize;
    let header_at = r.offset();
    let header: DatasetHeader = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| Error::Format { offset: header_at as u64, message: format!("bad header: {e}") })?;
    let n = header.n;
    let body_start = r.offset();
    let row_bytes = 8 + 24 * n;
    let expected = (header.samples as usize).checked_mul(row_bytes).ok_or_else(|| r.fail("sample count overflows"))?;
    if bytes.len() - body_start < expected + 8 {
        return Err(r.fail(format!(
            "truncated: header declares {} samples ({} bytes) but {} bytes remain",
            header.samples,
            expected + 8,
            bytes.len() - body_start
        )));
    }
    let mut samples = Vec::with_capacity(header.samples as usize);
    for _ in 0..header.samples {
        let trajectory_id = r.u32()?;
        let time_index = r.u32()?;
        let read_vec = |r: &mut Reader| -> Result<DVector<f64>> {
            let mut v = DVector::zeros(n);
            for i in 0..n {
                v[i] = r.f64()?;
            }
            Ok(v)
        };
        let x = read_vec(&mut r)?;
        let k2_in = read_vec(&mut r)?;
        let k2_out = read_vec(&mut r)?;
        samples.push(StepSample { x, k2_in, k2_out, trajectory_id, time_index });
    }
    let body_end = r.offset();
    let stored = r.u64()?;
    if stored != fnv1a(&bytes[..body_end]) {
        return Err(Error::Format { offset: body_end as u64, message: "checksum mismatch".into() });
    }
    r.finish()?;
    if let Some(bad) = samples.iter().find(|s| s.trajectory_id >= header.trajectory_count) {
        return Err(Error::Format {
            offset: body_start as u64,
            message: format!("trajectory id {} out of range {}", bad.trajectory_id, header.trajectory_count),
        });
    }
    Ok(Dataset {
        samples,
        system_name: header.system,
        n,
        dt: header.dt,
        newton_tol: header.newton_tol,
        trajectory_count: header.trajectory_count,
        seed: header.seed,
    })
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let bytes = encode_dataset(ds)?;
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrator::newton_update;
    use crate::systems::CubicOscillator;
    use proptest::prelude::*;
    use rand::Rng;

    fn cubic_sampler(seed: u64) -> InitialConditionSampler {
        InitialConditionSampler::new(DVector::from_vec(vec![1.0, 0.5]), DVector::from_vec(vec![0.2, 0.2]), seed)
            .unwrap()
    }

    fn small_dataset() -> Dataset {
        generate_dataset(&CubicOscillator, &cubic_sampler(1), 4, 0.01, 0.3, &NewtonConfig::default()).unwrap()
    }

    #[test]
    fn sample_count_matches_passes() {
        let sampler = cubic_sampler(3);
        let cfg = NewtonConfig::default();
        let ds = generate_dataset(&CubicOscillator, &sampler, 3, 0.01, 0.5, &cfg).unwrap();
        let mut total = 0;
        for id in 0..3 {
            let x0 = sampler.stream(id).sample();
            let rec = crate::integrator::simulate(&CubicOscillator, &x0, 0.01, 0.5, &cfg).unwrap();
            total += rec.total_iterations();
        }
        assert_eq!(ds.len(), total);
        assert_eq!(ds.trajectory_count, 3);
        assert!(ds.samples.iter().all(|s| s.trajectory_id < 3));
    }

    #[test]
    fn fixed_point_pairs_are_fixed() {
        let ds = small_dataset();
        let last_per_step = ds.samples.windows(2).filter(|w| w[0].time_index != w[1].time_index);
        for w in last_per_step {
            let s = &w[0];
            assert!((&s.k2_out - &s.k2_in).amax() < 1e-8);
        }
    }

    #[test]
    fn replay_reproduces_newton_updates() {
        let ds = small_dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let s = &ds.samples[rng.random_range(0..ds.len())];
            let out = newton_update(&CubicOscillator, &s.x, &s.k2_in, ds.dt).unwrap();
            let rel = (&out - &s.k2_out).amax() / s.k2_out.amax().max(1e-300);
            assert!(rel <= 1e-12, "relative replay error {rel}");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = encode_dataset(&small_dataset()).unwrap();
        let b = encode_dataset(&small_dataset()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_trajectories_rejected() {
        let err = generate_dataset(&CubicOscillator, &cubic_sampler(0), 0, 0.01, 1.0, &NewtonConfig::default());
        assert!(matches!(err, Err(Error::Argument(_))));
    }

    #[test]
    fn split_is_a_partition() {
        let ds = small_dataset();
        let (train, test) = split_by_trajectory(&ds, 0.5, 9).unwrap();
        assert_eq!(train.len() + test.len(), ds.len());
        let a = train.trajectory_ids();
        let b = test.trajectory_ids();
        assert_eq!(a.len(), 2);
        assert_eq!(b.len(), 2);
        assert!(a.iter().all(|id| !b.contains(id)));
        let mut all: Vec<u32> = a.into_iter().chain(b).collect();
        all.sort_unstable();
        assert_eq!(all, ds.trajectory_ids());
    }

    #[test]
    fn split_two_trajectories_one_each() {
        let ds = generate_dataset(&CubicOscillator, &cubic_sampler(5), 2, 0.01, 0.1, &NewtonConfig::default()).unwrap();
        let (train, test) = split_by_trajectory(&ds, 0.5, 0).unwrap();
        assert_eq!(train.trajectory_ids().len(), 1);
        assert_eq!(test.trajectory_ids().len(), 1);
    }

    #[test]
    fn split_rejects_empty_sides() {
        let ds = small_dataset();
        assert!(split_by_trajectory(&ds, 0.0, 0).is_err());
        assert!(split_by_trajectory(&ds, 1.0, 0).is_err());
        assert!(split_by_trajectory(&ds, 0.05, 0).is_err());
    }

    #[test]
    fn empty_dataset_round_trips() {
        let ds = Dataset {
            samples: vec![],
            system_name: "hopf".into(),
            n: 3,
            dt: 0.01,
            newton_tol: 1e-9,
            trajectory_count: 0,
            seed: 7,
        };
        assert_eq!(decode_dataset(&encode_dataset(&ds).unwrap()).unwrap(), ds);
    }

    #[test]
    fn large_dataset_round_trips_through_file() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 2;
        let samples = (0..100_000u32)
            .map(|i| StepSample {
                x: DVector::from_fn(n, |_, _| rng.random::<f64>() * 1e3 - 5e2),
                k2_in: DVector::from_fn(n, |_, _| rng.random::<f64>()),
                k2_out: DVector::from_fn(n, |_, _| f64::from_bits(rng.random::<u64>() >> 2)),
                trajectory_id: i % 50,
                time_index: i / 50,
            })
            .collect();
        let ds = Dataset {
            samples,
            system_name: "cubic_oscillator".into(),
            n,
            dt: 0.1 + 0.2,
            newton_tol: 1e-9,
            trajectory_count: 50,
            seed: 1,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("big.cnns");
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        let bits = |d: &Dataset| {
            d.samples
                .iter()
                .flat_map(|s| s.x.iter().chain(s.k2_in.iter()).chain(s.k2_out.iter()).map(|v| v.to_bits()))
                .collect::<Vec<u64>>()
        };
        assert_eq!(bits(&back), bits(&ds));
        assert_eq!(back, ds);
    }

    #[test]
    fn corrupted_files_rejected() {
        let bytes = encode_dataset(&small_dataset()).unwrap();
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode_dataset(&bad_magic), Err(Error::Format { offset: 0, .. })));

        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(matches!(decode_dataset(&bad_version), Err(Error::Format { offset: 4, .. })));

        let truncated = &bytes[..bytes.len() - 20];
        assert!(matches!(decode_dataset(truncated), Err(Error::Format { .. })));

        let mut flipped = bytes.clone();
        let mid = bytes.len() / 2;
        flipped[mid] ^= 0x40;
        assert!(decode_dataset(&flipped).is_err());
    }

    #[test]
    fn csv_export_header() {
        let csv = small_dataset().to_csv();
        assert!(csv.starts_with("traj,t_idx,x1,x2,k2_in1,k2_in2,k2_out1,k2_out2\n"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn encode_decode_identity(
            rows in proptest::collection::vec((any::<f64>(), any::<f64>(), any::<f64>(), 0u32..5), 0..40),
        ) {
            let samples = rows.iter().enumerate().map(|(i, (a, b, c, t))| StepSample {
                x: DVector::from_vec(vec![*a]),
                k2_in: DVector::from_vec(vec![*b]),
                k2_out: DVector::from_vec(vec![*c]),
                trajectory_id: *t,
                time_index: i as u32,
            }).collect::<Vec<_>>();
            let ds = Dataset {
                samples, system_name: "x".into(), n: 1, dt: 0.01,
                newton_tol: 1e-9, trajectory_count: 5, seed: 0,
            };
            let back = decode_dataset(&encode_dataset(&ds).unwrap()).unwrap();
            let bits = |d: &Dataset| d.samples.iter()
                .map(|s| (s.x[0].to_bits(), s.k2_in[0].to_bits(), s.k2_out[0].to_bits()))
                .collect::<Vec<_>>();
            prop_assert_eq!(bits(&back), bits(&ds));
        }
    }
}
