//! Unified checkpoint: every module's parameters, the config snapshot,
//! the epoch counter, and the loss history in one `AVCK` file.
//!
//! Parameters stay `f64` on disk, so save → load → save reproduces the
//! bytes exactly. The config rides along as its canonical key=value text;
//! loading re-parses it, and since the text form is canonical the
//! round-trip is stable.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::archive::wire;
use crate::config::{RunConfig, Stage};
use crate::error::{Error, Result};
use crate::params::ParamSet;

const CKPT_MAGIC: &[u8; 4] = b"AVCK";
const CKPT_VERSION: u32 = 1;

/// One per-epoch training record.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryEntry {
    pub stage: Stage,
    pub epoch: u32,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub epoch: u32,
    pub history: Vec<HistoryEntry>,
    pub params: ParamSet,
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::io(path.display().to_string(), source)
}

impl Checkpoint {
    pub fn new(config: RunConfig, params: ParamSet) -> Self {
        Checkpoint {
            config,
            epoch: 0,
            history: Vec::new(),
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| io_err(path, e))?;
        let mut w = BufWriter::new(file);
        let go = |w: &mut BufWriter<File>| -> std::io::Result<()> {
            w.write_all(CKPT_MAGIC)?;
            wire::put_u32(w, CKPT_VERSION)?;
            let cfg = self.config.to_text();
            wire::put_u32(w, cfg.len() as u32)?;
            w.write_all(cfg.as_bytes())?;
            wire::put_u32(w, self.epoch)?;
            wire::put_u32(w, self.history.len() as u32)?;
            for h in &self.history {
                w.write_all(&[h.stage.code()])?;
                wire::put_u32(w, h.epoch)?;
                wire::put_f64(w, h.loss)?;
            }
            wire::put_u32(w, self.params.len() as u32)?;
            for (name, value) in self.params.iter() {
                wire::put_u32(w, name.len() as u32)?;
                w.write_all(name.as_bytes())?;
                wire::put_u32(w, value.ndim() as u32)?;
                for &d in value.shape() {
                    wire::put_u32(w, d as u32)?;
                }
                for &x in value.iter() {
                    wire::put_f64(w, x)?;
                }
            }
            w.flush()
        };
        go(&mut w).map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| io_err(path, e))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
        if &magic != CKPT_MAGIC {
            return Err(Error::parse(
                path.display().to_string(),
                "not a checkpoint file (bad magic)".to_string(),
            ));
        }
        let version = wire::get_u32(&mut r).map_err(|e| io_err(path, e))?;
        if version != CKPT_VERSION {
            return Err(Error::parse(
                path.display().to_string(),
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let cfg_len = wire::get_u32(&mut r).map_err(|e| io_err(path, e))? as usize;
        let mut cfg_bytes = vec![0u8; cfg_len];
        r.read_exact(&mut cfg_bytes).map_err(|e| io_err(path, e))?;
        let cfg_text = String::from_utf8(cfg_bytes).map_err(|_| {
            Error::parse(
                path.display().to_string(),
                "config snapshot is not UTF-8".to_string(),
            )
        })?;
        let config = RunConfig::from_text(&cfg_text)?;

        let epoch = wire::get_u32(&mut r).map_err(|e| io_err(path, e))?;
        let n_history = wire::get_u32(&mut r).map_err(|e| io_err(path, e))?;
        let mut history = Vec::with_capacity(n_history as usize);
        for _ in 0..n_history {
            let mut code = [0u8; 1];
            r.read_exact(&mut code).map_err(|e| io_err(path, e))?;
            let stage = Stage::from_code(code[0])?;
            let h_epoch = wire::get_u32(&mut r).map_err(|e| io_err(path, e))?;
            let loss = wire::get_f64(&mut r).map_err(|e| io_err(path, e))?;
            history.push(HistoryEntry {
                stage,
                epoch: h_epoch,
                loss,
            });
        }

        let n_params = wire::get_u32(&mut r).map_err(|e| io_err(path, e))?;
        let mut params = ParamSet::new();
        for _ in 0..n_params {
            let name_len = wire::get_u32(&mut r).map_err(|e| io_err(path, e))? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes).map_err(|e| io_err(path, e))?;
            let name = String::from_utf8(name_bytes).map_err(|_| {
                Error::parse(
                    path.display().to_string(),
                    "parameter name is not UTF-8".to_string(),
                )
            })?;
            let rank = wire::get_u32(&mut r).map_err(|e| io_err(path, e))? as usize;
            if rank > 8 {
                return Err(Error::parse(
                    path.display().to_string(),
                    format!("parameter '{name}' has implausible rank {rank}"),
                ));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(wire::get_u32(&mut r).map_err(|e| io_err(path, e))? as usize);
            }
            let n: usize = dims.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(wire::get_f64(&mut r).map_err(|e| io_err(path, e))?);
            }
            let value = ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|_| {
                Error::parse(
                    path.display().to_string(),
                    format!("parameter '{name}' has inconsistent dims"),
                )
            })?;
            params.insert(&name, value);
        }

        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(|e| io_err(path, e))? != 0 {
            return Err(Error::parse(
                path.display().to_string(),
                "trailing bytes after checkpoint payload".to_string(),
            ));
        }
        Ok(Checkpoint {
            config,
            epoch,
            history,
            params,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_checkpoint() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(301);
        let mut params = ParamSet::new();
        params.insert(
            "audio_enc.conv0.w",
            ArrayD::from_shape_fn(IxDyn(&[4, 3, 3]), |_| rng.random_range(-1.0..1.0)),
        );
        params.insert(
            "head_f.w",
            ArrayD::from_shape_fn(IxDyn(&[5, 8]), |_| rng.random_range(-1.0..1.0)),
        );
        params.insert("pool_a.k", ArrayD::from_elem(IxDyn(&[16]), 1.0));
        let mut ck = Checkpoint::new(RunConfig::default(), params);
        ck.epoch = 7;
        ck.history = vec![
            HistoryEntry {
                stage: Stage::UnimodalAudio,
                epoch: 1,
                loss: 3.25,
            },
            HistoryEntry {
                stage: Stage::Joint,
                epoch: 2,
                loss: 0.125,
            },
        ];
        ck
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.avck");
        let p2 = dir.path().join("b.avck");
        let ck = sample_checkpoint();
        ck.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn loaded_fields_match_saved_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.avck");
        let ck = sample_checkpoint();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.epoch, 7);
        assert_eq!(back.history, ck.history);
        assert_eq!(back.config.to_text(), ck.config.to_text());
        assert_eq!(back.params.len(), 3);
        for (name, value) in ck.params.iter() {
            assert_eq!(back.params.get(name), value, "param {name}");
        }
        // insertion order survives, which the byte-identity test relies on
        let names: Vec<&str> = back.params.iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["audio_enc.conv0.w", "head_f.w", "pool_a.k"]);
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.avck");
        let ck = sample_checkpoint();
        ck.save(&path).unwrap();

        let good = std::fs::read(&path).unwrap();
        let bad_magic = {
            let mut b = good.clone();
            b[0] = b'X';
            b
        };
        std::fs::write(&path, &bad_magic).unwrap();
        assert!(Checkpoint::load(&path).is_err());

        let mut trailing = good.clone();
        trailing.push(0);
        std::fs::write(&path, &trailing).unwrap();
        assert!(Checkpoint::load(&path).is_err());

        std::fs::write(&path, &good[..good.len() - 3]).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
