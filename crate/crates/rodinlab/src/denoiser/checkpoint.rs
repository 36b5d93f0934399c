//! Checkpoint files: magic "RDCK", a version, a named parameter table, and
//! an optional training-state blob (optimizer moments, EMA shadow weights,
//! step counters). All integers little-endian, tensor data f32, tables
//! sorted by name so identical states serialize to identical bytes.

use crate::numerics::{NumericsError, Real, Tensor};
use crate::optim::ParamStore;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

const RDCK_MAGIC: &[u8; 4] = b"RDCK";
const RDCK_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u16),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Optimizer and averaging state carried alongside the weights.
#[derive(Clone, Default)]
pub struct TrainState {
    /// Completed training steps.
    pub step: u64,
    /// Optimizer update count (for moment bias correction).
    pub opt_step: u64,
    pub opt_m: BTreeMap<String, Tensor>,
    pub opt_v: BTreeMap<String, Tensor>,
    pub ema: BTreeMap<String, Tensor>,
}

fn write_table<W: Write>(
    w: &mut W,
    entries: &mut dyn Iterator<Item = (&String, &Tensor)>,
    count: usize,
) -> Result<(), CheckpointError> {
    w.write_all(&(count as u32).to_le_bytes())?;
    for (name, t) in entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_table<R: Read>(r: &mut R) -> Result<BTreeMap<String, Tensor>, CheckpointError> {
    let count = read_u32(r)? as usize;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        if name_len > 4096 {
            return Err(CheckpointError::Malformed(format!(
                "parameter name length {name_len}"
            )));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| CheckpointError::Malformed("non-utf8 parameter name".into()))?;
        let rank = read_u32(r)? as usize;
        if rank > 8 {
            return Err(CheckpointError::Malformed(format!("tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for _ in 0..rank {
            let d = read_u32(r)? as usize;
            numel = numel.saturating_mul(d);
            shape.push(d);
        }
        if numel > (1 << 28) {
            return Err(CheckpointError::Malformed(format!("tensor size {numel}")));
        }
        let mut data = Vec::with_capacity(numel);
        let mut b = [0u8; 4];
        for _ in 0..numel {
            r.read_exact(&mut b)?;
            data.push(f32::from_le_bytes(b) as Real);
        }
        if out.insert(name.clone(), Tensor::from_vec(&shape, data)?).is_some() {
            return Err(CheckpointError::Malformed(format!("duplicate entry {name}")));
        }
    }
    Ok(out)
}

pub fn save_rdck(
    path: &Path,
    params: &ParamStore,
    state: Option<&TrainState>,
) -> Result<(), CheckpointError> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(RDCK_MAGIC)?;
    f.write_all(&RDCK_VERSION.to_le_bytes())?;
    write_table(&mut f, &mut params.iter(), params.len())?;
    match state {
        None => f.write_all(&[0u8])?,
        Some(st) => {
            f.write_all(&[1u8])?;
            f.write_all(&st.step.to_le_bytes())?;
            f.write_all(&st.opt_step.to_le_bytes())?;
            for table in [&st.opt_m, &st.opt_v, &st.ema] {
                write_table(&mut f, &mut table.iter(), table.len())?;
            }
        }
    }
    f.flush()?;
    Ok(())
}

pub fn load_rdck(path: &Path) -> Result<(ParamStore, Option<TrainState>), CheckpointError> {
    let mut f = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != RDCK_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut b2 = [0u8; 2];
    f.read_exact(&mut b2)?;
    let version = u16::from_le_bytes(b2);
    if version != RDCK_VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let table = read_table(&mut f)?;
    let mut params = ParamStore::new();
    for (name, t) in table {
        params.insert(name, t);
    }
    let mut flag = [0u8; 1];
    f.read_exact(&mut flag)?;
    let state = match flag[0] {
        0 => None,
        1 => {
            let step = read_u64(&mut f)?;
            let opt_step = read_u64(&mut f)?;
            let opt_m = read_table(&mut f)?;
            let opt_v = read_table(&mut f)?;
            let ema = read_table(&mut f)?;
            Some(TrainState { step, opt_step, opt_m, opt_v, ema })
        }
        other => {
            return Err(CheckpointError::Malformed(format!(
                "training-state flag {other}"
            )))
        }
    };
    // Trailing garbage means a corrupt or mis-framed file.
    let mut extra = [0u8; 1];
    if f.read(&mut extra)? != 0 {
        return Err(CheckpointError::Malformed("trailing bytes".into()));
    }
    Ok((params, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_store(seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        store.insert("a.w", Tensor::randn(&[3, 4], 1.0, &mut rng));
        store.insert("a.b", Tensor::randn(&[4], 1.0, &mut rng));
        store.insert("blk.conv.w", Tensor::randn(&[3, 3, 2, 5], 1.0, &mut rng));
        store
    }

    #[test]
    fn weights_round_trip_bit_exactly_at_file_level() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rdck");
        let store = sample_store(1);
        save_rdck(&path, &store, None).unwrap();
        let (back, state) = load_rdck(&path).unwrap();
        assert!(state.is_none());
        assert_eq!(back.len(), store.len());
        // Values round-trip through f32; a second save must be bitwise equal.
        let path2 = dir.path().join("m2.rdck");
        save_rdck(&path2, &back, None).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
        for (name, t) in store.iter() {
            let b = back.get(name);
            assert_eq!(b.shape(), t.shape());
            for (x, y) in t.data().iter().zip(b.data()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
    }

    #[test]
    fn training_state_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.rdck");
        let store = sample_store(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut state = TrainState { step: 1234, opt_step: 1200, ..Default::default() };
        for (name, t) in store.iter() {
            state.opt_m.insert(name.clone(), Tensor::randn(t.shape(), 0.1, &mut rng));
            state.opt_v.insert(name.clone(), Tensor::randn(t.shape(), 0.1, &mut rng));
            state.ema.insert(name.clone(), Tensor::randn(t.shape(), 0.1, &mut rng));
        }
        save_rdck(&path, &store, Some(&state)).unwrap();
        let (_, back) = load_rdck(&path).unwrap();
        let back = back.expect("state present");
        assert_eq!(back.step, 1234);
        assert_eq!(back.opt_step, 1200);
        for (name, t) in state.ema.iter() {
            for (x, y) in t.data().iter().zip(back.ema[name].data()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
        assert_eq!(state.opt_m.len(), back.opt_m.len());
        assert_eq!(state.opt_v.len(), back.opt_v.len());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.rdck");
        save_rdck(&path, &sample_store(4), None).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_rdck(&path), Err(CheckpointError::BadMagic)));

        let mut bad = good.clone();
        bad[4] = 7;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_rdck(&path), Err(CheckpointError::BadVersion(7))));

        let bad = &good[..good.len() - 3];
        std::fs::write(&path, bad).unwrap();
        assert!(load_rdck(&path).is_err());

        let mut bad = good.clone();
        bad.push(0);
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_rdck(&path), Err(CheckpointError::Malformed(_))));
    }
}
