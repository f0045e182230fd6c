//! Transition triples `(x, Δx, γ)` and labeled triples `(x, z, y)`, plus
//! their binary file format.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! 0..6    magic "BFLOW1"
//! 6..8    u16 version (1)
//! 8       u8 kind (0 = observation set, 1 = labeled set)
//! 9..12   reserved, zero
//! 12..16  u32 state dimension d
//! 16..24  u64 row count M
//! 24..32  f64 observation interval
//! 32..36  u32 flags (bit 0: trajectory id / step side channel present)
//! 36..40  reserved, zero
//! 40..48  u64 trajectory count H
//! 48..64  reserved, zero
//! ```
//!
//! An observation set is followed by `x` (M·d f64, row-major), `dx` (M·d
//! f64), `gamma` (M bytes) and, if flagged, trajectory ids (M u64) and step
//! indices (M u32). A labeled set is followed by `x`, `z` and `y` blocks.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::problems::{from_parallel_perp, to_parallel_perp};
use crate::sde::{DomainSpec, ExitEvent, Trajectory};

pub const MAGIC: &[u8; 6] = b"BFLOW1";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 64;
const FLAG_SIDE_CHANNEL: u32 = 1;

/// Map between simulation state and the coordinates the models see.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureMap {
    Identity,
    /// `(p, ξ, r) ↔ (p∥, p⊥, r)`
    ParallelPerp,
}

impl FeatureMap {
    pub fn to_features(self, state: &[f64], out: &mut [f64]) {
        match self {
            FeatureMap::Identity => out.copy_from_slice(state),
            FeatureMap::ParallelPerp => {
                let (a, b) = to_parallel_perp(state[0], state[1]);
                out[0] = a;
                out[1] = b;
                out[2..].copy_from_slice(&state[2..]);
            }
        }
    }

    pub fn to_state(self, features: &[f64], out: &mut [f64]) {
        match self {
            FeatureMap::Identity => out.copy_from_slice(features),
            FeatureMap::ParallelPerp => {
                let (p, xi) = from_parallel_perp(features[0], features[1]);
                out[0] = p;
                out[1] = xi;
                out[2..].copy_from_slice(&features[2..]);
            }
        }
    }
}

/// One observed transition.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionTriple<'a> {
    pub x: &'a [f64],
    pub dx: &'a [f64],
    pub gamma: bool,
}

/// Segmented trajectory data, stored column-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationSet {
    pub dim: usize,
    pub dt_obs: f64,
    pub n_trajectories: usize,
    pub x: Vec<f64>,
    pub dx: Vec<f64>,
    pub gamma: Vec<u8>,
    /// Trajectory id and step per row; diagnostics only.
    pub side: Option<SideChannel>,
    /// Trajectories dropped by segmentation because they had no transitions.
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SideChannel {
    pub traj_id: Vec<u64>,
    pub step: Vec<u32>,
}

impl ObservationSet {
    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }

    pub fn triple(&self, m: usize) -> TransitionTriple<'_> {
        let d = self.dim;
        TransitionTriple {
            x: &self.x[m * d..(m + 1) * d],
            dx: &self.dx[m * d..(m + 1) * d],
            gamma: self.gamma[m] == 1,
        }
    }

    pub fn x_row(&self, m: usize) -> &[f64] {
        &self.x[m * self.dim..(m + 1) * self.dim]
    }

    pub fn dx_row(&self, m: usize) -> &[f64] {
        &self.dx[m * self.dim..(m + 1) * self.dim]
    }

    pub fn n_exits(&self) -> usize {
        self.gamma.iter().filter(|&&g| g == 1).count()
    }

    /// Indices of rows with `γ = 0`.
    pub fn interior_rows(&self) -> Vec<usize> {
        (0..self.len()).filter(|&m| self.gamma[m] == 0).collect()
    }

    /// Rebuilds per-trajectory state sequences (in feature coordinates) from
    /// the side channel. Exiting trajectories get their crossing state back
    /// as `x + Δx` of the final row.
    pub fn reconstruct(&self, domain: &DomainSpec) -> Result<Vec<Trajectory>> {
        let side = self
            .side
            .as_ref()
            .ok_or_else(|| Error::config("observation set has no trajectory id side channel"))?;
        let mut out: Vec<Trajectory> = Vec::new();
        let mut current: Option<u64> = None;
        let d = self.dim;
        let mut end = vec![0.0; d];
        for m in 0..self.len() {
            let id = side.traj_id[m];
            if current != Some(id) {
                out.push(Trajectory::new(d, self.dt_obs, self.x_row(m)));
                current = Some(id);
            }
            let traj = out.last_mut().expect("pushed above");
            if side.step[m] as usize != traj.n_states() - 1 {
                return Err(Error::load("step", format!("row {m} breaks the step sequence of trajectory {id}")));
            }
            for i in 0..d {
                end[i] = self.x[m * d + i] + self.dx[m * d + i];
            }
            if self.gamma[m] == 1 {
                traj.exit = Some(ExitEvent {
                    step: side.step[m] as usize + 1,
                    crossing: end.clone(),
                });
            } else {
                domain.apply(&mut end);
                traj.push(&end);
            }
        }
        Ok(out)
    }
}

/// Splits trajectories into transition triples in global enumeration order
/// `(trajectory, step)`.
///
/// Increments are taken in feature coordinates; periodic feature dimensions
/// use the minimal image.
pub fn segment(trajs: &[Trajectory], domain: &DomainSpec, map: FeatureMap) -> Result<ObservationSet> {
    let Some(first) = trajs.first() else {
        return Err(Error::config("no trajectories to segment"));
    };
    let dt_obs = first.dt_obs;
    let d = domain.dim();
    for (i, t) in trajs.iter().enumerate() {
        if t.dt_obs != dt_obs {
            return Err(Error::config(format!("trajectory {i} has dt_obs {} but expected {dt_obs}", t.dt_obs)));
        }
        if t.dim != d {
            return Err(Error::Shape(format!("trajectory {i} has dimension {} but domain has {d}", t.dim)));
        }
    }

    let blocks: Vec<(Vec<f64>, Vec<f64>, Vec<u8>)> = trajs
        .par_iter()
        .map(|t| {
            let n = t.final_index();
            let mut x = vec![0.0; n * d];
            let mut dx = vec![0.0; n * d];
            let mut gamma = vec![0u8; n];
            let mut a = vec![0.0; d];
            let mut b = vec![0.0; d];
            for l in 0..n {
                map.to_features(t.state(l), &mut a);
                let next = if l + 1 < t.n_states() {
                    Some(t.state(l + 1))
                } else {
                    gamma[l] = 1;
                    t.exit.as_ref().map(|e| e.crossing.as_slice()).filter(|c| !c.is_empty())
                };
                match next {
                    Some(s) => {
                        map.to_features(s, &mut b);
                        for i in 0..d {
                            b[i] -= a[i];
                        }
                        domain.minimal_image(&mut b);
                    }
                    None => b.fill(0.0),
                }
                x[l * d..(l + 1) * d].copy_from_slice(&a);
                dx[l * d..(l + 1) * d].copy_from_slice(&b);
            }
            (x, dx, gamma)
        })
        .collect();

    let total: usize = blocks.iter().map(|b| b.2.len()).sum();
    let mut set = ObservationSet {
        dim: d,
        dt_obs,
        n_trajectories: trajs.len(),
        x: Vec::with_capacity(total * d),
        dx: Vec::with_capacity(total * d),
        gamma: Vec::with_capacity(total),
        side: Some(SideChannel {
            traj_id: Vec::with_capacity(total),
            step: Vec::with_capacity(total),
        }),
        skipped: 0,
    };
    for (id, (x, dx, gamma)) in blocks.into_iter().enumerate() {
        if gamma.is_empty() {
            set.skipped += 1;
            continue;
        }
        let side = set.side.as_mut().expect("created above");
        side.traj_id.extend(std::iter::repeat_n(id as u64, gamma.len()));
        side.step.extend(0..gamma.len() as u32);
        set.x.extend_from_slice(&x);
        set.dx.extend_from_slice(&dx);
        set.gamma.extend_from_slice(&gamma);
    }
    if set.skipped > 0 {
        log::warn!("segmentation skipped {} trajectories without transitions", set.skipped);
    }
    Ok(set)
}

/// Synthetic training triples from the reverse ODE.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub dim: usize,
    pub dt_obs: f64,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub y: Vec<f64>,
}

impl LabeledSet {
    pub fn new(dim: usize, dt_obs: f64) -> Self {
        Self {
            dim,
            dt_obs,
            x: Vec::new(),
            z: Vec::new(),
            y: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.x.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

struct Header {
    kind: u8,
    dim: usize,
    rows: usize,
    dt_obs: f64,
    flags: u32,
    n_trajectories: usize,
}

fn write_header(w: &mut impl Write, h: &Header) -> Result<()> {
    let mut buf = [0u8; HEADER_LEN];
    buf[0..6].copy_from_slice(MAGIC);
    buf[6..8].copy_from_slice(&VERSION.to_le_bytes());
    buf[8] = h.kind;
    buf[12..16].copy_from_slice(&(h.dim as u32).to_le_bytes());
    buf[16..24].copy_from_slice(&(h.rows as u64).to_le_bytes());
    buf[24..32].copy_from_slice(&h.dt_obs.to_le_bytes());
    buf[32..36].copy_from_slice(&h.flags.to_le_bytes());
    buf[40..48].copy_from_slice(&(h.n_trajectories as u64).to_le_bytes());
    w.write_all(&buf)?;
    Ok(())
}

fn read_header(bytes: &[u8], kind: u8, expected_dim: Option<usize>) -> Result<Header> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::load("header", format!("file has {} bytes, header needs {HEADER_LEN}", bytes.len())));
    }
    if &bytes[0..6] != MAGIC {
        return Err(Error::load("magic", format!("expected {:?}, found {:?}", MAGIC, &bytes[0..6])));
    }
    let version = u16::from_le_bytes([bytes[6], bytes[7]]);
    if version != VERSION {
        return Err(Error::load("version", format!("unsupported version {version}")));
    }
    if bytes[8] != kind {
        return Err(Error::load("kind", format!("expected kind {kind}, found {}", bytes[8])));
    }
    let dim = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    if dim == 0 {
        return Err(Error::load("dim", "dimension is zero"));
    }
    if let Some(e) = expected_dim {
        if dim != e {
            return Err(Error::load("dim", format!("file has dimension {dim}, configuration expects {e}")));
        }
    }
    let rows = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes")) as usize;
    let dt_obs = f64::from_le_bytes(bytes[24..32].try_into().expect("8 bytes"));
    if !(dt_obs > 0.0 && dt_obs.is_finite()) {
        return Err(Error::load("dt_obs", format!("invalid observation interval {dt_obs}")));
    }
    let flags = u32::from_le_bytes(bytes[32..36].try_into().expect("4 bytes"));
    if flags & !FLAG_SIDE_CHANNEL != 0 {
        return Err(Error::load("flags", format!("unknown flag bits {flags:#x}")));
    }
    let n_trajectories = u64::from_le_bytes(bytes[40..48].try_into().expect("8 bytes")) as usize;
    Ok(Header {
        kind,
        dim,
        rows,
        dt_obs,
        flags,
        n_trajectories,
    })
}

fn write_f64s(w: &mut impl Write, v: &[f64]) -> Result<()> {
    for x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::load(field, format!("truncated: need {n} bytes at offset {}, file has {}", self.pos, self.bytes.len()))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn f64s(&mut self, n: usize, field: &'static str) -> Result<Vec<f64>> {
        let len = n.checked_mul(8).ok_or_else(|| Error::load(field, "row count overflows"))?;
        Ok(self
            .take(len, field)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::load("trailer", format!("{} unexpected trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn save_observations(set: &ObservationSet, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(
        &mut w,
        &Header {
            kind: 0,
            dim: set.dim,
            rows: set.len(),
            dt_obs: set.dt_obs,
            flags: if set.side.is_some() { FLAG_SIDE_CHANNEL } else { 0 },
            n_trajectories: set.n_trajectories,
        },
    )?;
    write_f64s(&mut w, &set.x)?;
    write_f64s(&mut w, &set.dx)?;
    w.write_all(&set.gamma)?;
    if let Some(side) = &set.side {
        for id in &side.traj_id {
            w.write_all(&id.to_le_bytes())?;
        }
        for s in &side.step {
            w.write_all(&s.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    Ok(bytes)
}

pub fn load_observations(path: &Path, expected_dim: Option<usize>) -> Result<ObservationSet> {
    decode_observations(&read_all(path)?, expected_dim)
}

pub fn decode_observations(bytes: &[u8], expected_dim: Option<usize>) -> Result<ObservationSet> {
    let h = read_header(bytes, 0, expected_dim)?;
    let mut c = Cursor {
        bytes,
        pos: HEADER_LEN,
    };
    let n = h.rows.checked_mul(h.dim).ok_or_else(|| Error::load("rows", "row count overflows"))?;
    let x = c.f64s(n, "x")?;
    let dx = c.f64s(n, "dx")?;
    let gamma = c.take(h.rows, "gamma")?.to_vec();
    if let Some(m) = gamma.iter().position(|&g| g > 1) {
        return Err(Error::load("gamma", format!("row {m} has indicator {}", gamma[m])));
    }
    let side = if h.flags & FLAG_SIDE_CHANNEL != 0 {
        let traj_id = c
            .take(h.rows * 8, "traj_id")?
            .chunks_exact(8)
            .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let step = c
            .take(h.rows * 4, "step")?
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        Some(SideChannel { traj_id, step })
    } else {
        None
    };
    c.finish()?;
    debug_assert_eq!(h.kind, 0);
    Ok(ObservationSet {
        dim: h.dim,
        dt_obs: h.dt_obs,
        n_trajectories: h.n_trajectories,
        x,
        dx,
        gamma,
        side,
        skipped: 0,
    })
}

pub fn save_labeled(set: &LabeledSet, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(
        &mut w,
        &Header {
            kind: 1,
            dim: set.dim,
            rows: set.len(),
            dt_obs: set.dt_obs,
            flags: 0,
            n_trajectories: 0,
        },
    )?;
    write_f64s(&mut w, &set.x)?;
    write_f64s(&mut w, &set.z)?;
    write_f64s(&mut w, &set.y)?;
    w.flush()?;
    Ok(())
}

pub fn load_labeled(path: &Path, expected_dim: Option<usize>) -> Result<LabeledSet> {
    decode_labeled(&read_all(path)?, expected_dim)
}

pub fn decode_labeled(bytes: &[u8], expected_dim: Option<usize>) -> Result<LabeledSet> {
    let h = read_header(bytes, 1, expected_dim)?;
    let mut c = Cursor {
        bytes,
        pos: HEADER_LEN,
    };
    let n = h.rows.checked_mul(h.dim).ok_or_else(|| Error::load("rows", "row count overflows"))?;
    let x = c.f64s(n, "x")?;
    let z = c.f64s(n, "z")?;
    let y = c.f64s(n, "y")?;
    c.finish()?;
    Ok(LabeledSet {
        dim: h.dim,
        dt_obs: h.dt_obs,
        x,
        z,
        y,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use crate::sde::{simulate_ensemble, Boundary, FnSystem, TimeGrid};
    use proptest::prelude::*;
    use rand::Rng;

    fn unit_domain() -> DomainSpec {
        DomainSpec::new(vec![0.0], vec![6.0], vec![Boundary::AbsorbingBoth]).unwrap()
    }

    fn confined(n: usize) -> Trajectory {
        let mut t = Trajectory::new(1, 0.05, &[1.0]);
        for k in 1..=n {
            t.push(&[1.0 + 0.1 * k as f64]);
        }
        t
    }

    #[test]
    fn confined_trajectory_gives_interior_triples() {
        let set = segment(&[confined(5)], &unit_domain(), FeatureMap::Identity).unwrap();
        assert_eq!(set.len(), 5);
        assert!(set.gamma.iter().all(|&g| g == 0));
        assert!((set.dx_row(2)[0] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn exit_on_third_step_marks_last_triple() {
        let mut t = confined(2);
        t.exit = Some(ExitEvent {
            step: 3,
            crossing: vec![-0.01],
        });
        let set = segment(&[t], &unit_domain(), FeatureMap::Identity).unwrap();
        assert_eq!(set.gamma, vec![0, 0, 1]);
        assert!((set.dx_row(2)[0] - (-0.01 - 1.2)).abs() < 1e-12);
    }

    #[test]
    fn zero_step_trajectories_are_skipped() {
        let set = segment(&[Trajectory::new(1, 0.05, &[1.0]), confined(2)], &unit_domain(), FeatureMap::Identity).unwrap();
        assert_eq!(set.skipped, 1);
        assert_eq!(set.len(), 2);
    }

    #[test]
    fn mismatched_dt_obs_is_rejected() {
        let mut t = confined(2);
        t.dt_obs = 0.1;
        assert!(segment(&[confined(2), t], &unit_domain(), FeatureMap::Identity).is_err());
    }

    #[test]
    fn row_count_matches_brute_force_recount() {
        let sys = FnSystem {
            domain: unit_domain(),
            drift: |_: &[f64], o: &mut [f64]| o[0] = 0.0,
            diffusion: |_: &[f64], o: &mut [f64]| o[0] = 1.0,
        };
        let grid = TimeGrid::new(5e-4, 0.05, 2.0).unwrap();
        let trajs = simulate_ensemble(&sys, |r| vec![r.random_range(0.1..5.9)], 300, &grid, 4).unwrap();
        let set = segment(&trajs, &unit_domain(), FeatureMap::Identity).unwrap();
        let mut recount = 0;
        let mut exits = 0;
        for t in &trajs {
            let mut l = 0;
            while l + 1 < t.n_states() {
                l += 1;
            }
            if t.exited() {
                l += 1;
                exits += 1;
            }
            recount += l;
        }
        assert_eq!(set.len(), recount);
        assert_eq!(set.n_exits(), exits);
        // terminal γ=1 rows are never followed by a row of the same trajectory
        let side = set.side.as_ref().unwrap();
        for m in 0..set.len() - 1 {
            if set.gamma[m] == 1 {
                assert_ne!(side.traj_id[m], side.traj_id[m + 1]);
            }
        }
        let rebuilt = set.reconstruct(&unit_domain()).unwrap();
        assert_eq!(rebuilt.len(), trajs.len());
        for (a, b) in rebuilt.iter().zip(&trajs) {
            assert_eq!(a.n_states(), b.n_states());
            assert_eq!(a.exited(), b.exited());
            for (u, v) in a.states.iter().zip(&b.states) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn periodic_increments_use_minimal_image() {
        use std::f64::consts::PI;
        let dom = DomainSpec::new(vec![-PI, 0.0], vec![PI, 2.0], vec![Boundary::Periodic, Boundary::AbsorbingBoth]).unwrap();
        let mut t = Trajectory::new(2, 0.05, &[PI - 0.05, 1.0]);
        t.push(&[-PI + 0.05, 1.0]);
        let set = segment(&[t], &dom, FeatureMap::Identity).unwrap();
        assert!((set.dx_row(0)[0] - 0.1).abs() < 1e-12);
    }

    fn random_set(seed: u64, rows: usize, dim: usize) -> ObservationSet {
        let mut rng = stream_rng(seed, 0);
        ObservationSet {
            dim,
            dt_obs: 0.05,
            n_trajectories: rows / 3 + 1,
            x: (0..rows * dim).map(|_| rng.random()).collect(),
            dx: (0..rows * dim).map(|_| rng.random::<f64>() - 0.5).collect(),
            gamma: (0..rows).map(|_| u8::from(rng.random_bool(0.1))).collect(),
            side: Some(SideChannel {
                traj_id: (0..rows as u64).map(|i| i / 3).collect(),
                step: (0..rows as u32).map(|i| i % 3).collect(),
            }),
            skipped: 0,
        }
    }

    #[test]
    fn observation_file_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("obs.bflow");
        let set = random_set(1, 50, 3);
        save_observations(&set, &path).unwrap();
        let back = load_observations(&path, Some(3)).unwrap();
        assert_eq!(back, set);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 64 + 50 * 3 * 16 + 50 + 50 * 12);
    }

    #[test]
    fn corrupt_header_is_a_structured_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("obs.bflow");
        save_observations(&random_set(2, 10, 2), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[2] ^= 0xff;
        assert!(matches!(decode_observations(&bytes, None), Err(Error::Load { field: "magic", .. })));
        bytes[2] ^= 0xff;
        assert!(matches!(decode_observations(&bytes[..bytes.len() - 7], None), Err(Error::Load { field: "step", .. })));
        assert!(matches!(decode_observations(&bytes[..40], None), Err(Error::Load { field: "header", .. })));
        assert!(matches!(decode_observations(&bytes, Some(3)), Err(Error::Load { field: "dim", .. })));
        assert!(matches!(decode_labeled(&bytes, None), Err(Error::Load { field: "kind", .. })));
    }

    #[test]
    fn empty_sets_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.bflow");
        let set = random_set(3, 0, 2);
        save_observations(&set, &path).unwrap();
        let back = load_observations(&path, None).unwrap();
        assert!(back.is_empty());
        let lab = LabeledSet::new(2, 0.05);
        save_labeled(&lab, &path).unwrap();
        assert!(load_labeled(&path, Some(2)).unwrap().is_empty());
    }

    #[test]
    fn missing_file_is_reported_as_missing_artifact() {
        assert!(matches!(
            load_observations(Path::new("/nonexistent/obs.bflow"), None),
            Err(Error::MissingArtifact(_))
        ));
    }

    proptest! {
        #[test]
        fn labeled_round_trip(rows in 0usize..40, dim in 1usize..4, seed in 0u64..100) {
            let mut rng = stream_rng(seed, 1);
            let n = rows * dim;
            let set = LabeledSet {
                dim,
                dt_obs: 0.2,
                x: (0..n).map(|_| rng.random::<f64>() * 1e3 - 500.0).collect(),
                z: (0..n).map(|_| rng.random()).collect(),
                y: (0..n).map(|_| rng.random()).collect(),
            };
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("lab.bflow");
            save_labeled(&set, &path).unwrap();
            prop_assert_eq!(load_labeled(&path, Some(dim)).unwrap(), set);
        }
    }
}
