//! Checkpoint container: named parameter arrays with f32 payloads plus
//! optimizer state, versioned and bit-stable across save/load.
//!
//! Training runs in f32, so quantizing at this boundary loses nothing and a
//! resumed run reproduces the original bit for bit.

use crate::autodiff::{Real, Tensor};
use crate::err::{Error, Result};
use crate::nets::ParamStore;
use crate::optim::Adam;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"GLCKPT01";

pub struct Checkpoint {
    pub stage: u32,
    pub iter: u64,
    pub seed: u64,
    pub params: Vec<ParamBlob>,
    pub optim: Option<OptimBlob>,
}

pub struct ParamBlob {
    pub name: String,
    pub rows: u32,
    pub cols: u32,
    pub data: Vec<f32>,
}

pub struct OptimBlob {
    pub step: u64,
    /// First/second moments, aligned with `params`.
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

fn quantize<T: Real>(t: &Tensor<T>) -> Vec<f32> {
    t.data().iter().map(|v| v.as_f64() as f32).collect()
}

impl Checkpoint {
    pub fn capture<T: Real>(
        stage: u32,
        iter: u64,
        seed: u64,
        store: &ParamStore<T>,
        adam: Option<&Adam<T>>,
    ) -> Checkpoint {
        let params = store
            .ids()
            .map(|i| {
                let t = store.tensor(i);
                ParamBlob {
                    name: store.name(i).to_string(),
                    rows: t.rows() as u32,
                    cols: t.cols() as u32,
                    data: quantize(t),
                }
            })
            .collect();
        let optim = adam.map(|a| {
            let (m, v) = a.moments();
            OptimBlob {
                step: a.step,
                m: m.iter().map(quantize).collect(),
                v: v.iter().map(quantize).collect(),
            }
        });
        Checkpoint { stage, iter, seed, params, optim }
    }

    /// Write parameters back into a store built with the same architecture.
    pub fn apply<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count {} != expected {}",
                self.params.len(),
                store.len()
            )));
        }
        for (i, p) in self.params.iter().enumerate() {
            if store.name(i) != p.name {
                return Err(Error::Checkpoint(format!(
                    "parameter {} named {:?}, expected {:?}",
                    i,
                    p.name,
                    store.name(i)
                )));
            }
            let want = store.tensor(i).shape();
            if want != (p.rows as usize, p.cols as usize) {
                return Err(Error::Checkpoint(format!(
                    "{}: shape {}×{} != expected {}×{}",
                    p.name, p.rows, p.cols, want.0, want.1
                )));
            }
            let t = Tensor::from_vec(
                p.rows as usize,
                p.cols as usize,
                p.data.iter().map(|&v| T::of_f64(v as f64)).collect(),
            );
            store.set(i, t);
        }
        Ok(())
    }

    pub fn apply_optim<T: Real>(&self, adam: &mut Adam<T>) -> Result<()> {
        let Some(blob) = &self.optim else {
            return Err(Error::Checkpoint("no optimizer state stored".into()));
        };
        let unq = |rows: u32, cols: u32, d: &[f32]| {
            Tensor::from_vec(
                rows as usize,
                cols as usize,
                d.iter().map(|&v| T::of_f64(v as f64)).collect(),
            )
        };
        let m = self
            .params
            .iter()
            .zip(&blob.m)
            .map(|(p, d)| unq(p.rows, p.cols, d))
            .collect();
        let v = self
            .params
            .iter()
            .zip(&blob.v)
            .map(|(p, d)| unq(p.rows, p.cols, d))
            .collect();
        adam.restore_moments(m, v, blob.step);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let r: std::io::Result<()> = (|| {
            w.write_all(MAGIC)?;
            w.write_all(&self.stage.to_le_bytes())?;
            w.write_all(&self.iter.to_le_bytes())?;
            w.write_all(&self.seed.to_le_bytes())?;
            w.write_all(&(self.params.len() as u32).to_le_bytes())?;
            for p in &self.params {
                let nb = p.name.as_bytes();
                w.write_all(&(nb.len() as u32).to_le_bytes())?;
                w.write_all(nb)?;
                w.write_all(&p.rows.to_le_bytes())?;
                w.write_all(&p.cols.to_le_bytes())?;
                for &v in &p.data {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            match &self.optim {
                None => w.write_all(&[0u8])?,
                Some(o) => {
                    w.write_all(&[1u8])?;
                    w.write_all(&o.step.to_le_bytes())?;
                    for arr in o.m.iter().chain(&o.v) {
                        for &v in arr {
                            w.write_all(&v.to_le_bytes())?;
                        }
                    }
                }
            }
            w.flush()
        })();
        r.map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let bad = |d: &str| Error::parse("checkpoint", path, d.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let mut u32b = [0u8; 4];
        let mut u64b = [0u8; 8];
        let mut read_u32 = |r: &mut BufReader<std::fs::File>| -> Result<u32> {
            r.read_exact(&mut u32b).map_err(|e| Error::io(path, e))?;
            Ok(u32::from_le_bytes(u32b))
        };
        let mut read_u64 = |r: &mut BufReader<std::fs::File>| -> Result<u64> {
            r.read_exact(&mut u64b).map_err(|e| Error::io(path, e))?;
            Ok(u64::from_le_bytes(u64b))
        };
        let stage = read_u32(&mut r)?;
        let iter = read_u64(&mut r)?;
        let seed = read_u64(&mut r)?;
        let n = read_u32(&mut r)? as usize;
        if n > 1 << 20 {
            return Err(bad("implausible parameter count"));
        }
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let name_len = read_u32(&mut r)? as usize;
            if name_len > 4096 {
                return Err(bad("implausible name length"));
            }
            let mut nb = vec![0u8; name_len];
            r.read_exact(&mut nb).map_err(|e| Error::io(path, e))?;
            let name = String::from_utf8(nb).map_err(|_| bad("non-utf8 name"))?;
            let rows = read_u32(&mut r)?;
            let cols = read_u32(&mut r)?;
            let len = rows as usize * cols as usize;
            let mut data = vec![0f32; len];
            let mut buf = vec![0u8; len * 4];
            r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
            for (i, ch) in buf.chunks_exact(4).enumerate() {
                data[i] = f32::from_le_bytes([ch[0], ch[1], ch[2], ch[3]]);
            }
            params.push(ParamBlob { name, rows, cols, data });
        }
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag).map_err(|e| Error::io(path, e))?;
        let optim = if flag[0] == 1 {
            let step = read_u64(&mut r)?;
            let mut read_block = |len: usize| -> Result<Vec<f32>> {
                let mut buf = vec![0u8; len * 4];
                r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
                Ok(buf
                    .chunks_exact(4)
                    .map(|ch| f32::from_le_bytes([ch[0], ch[1], ch[2], ch[3]]))
                    .collect())
            };
            let mut m = Vec::with_capacity(n);
            for p in &params {
                m.push(read_block(p.rows as usize * p.cols as usize)?);
            }
            let mut v = Vec::with_capacity(n);
            for p in &params {
                v.push(read_block(p.rows as usize * p.cols as usize)?);
            }
            Some(OptimBlob { step, m, v })
        } else {
            None
        };
        Ok(Checkpoint { stage, iter, seed, params, optim })
    }
}
