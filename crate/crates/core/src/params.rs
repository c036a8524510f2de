//! Named parameter store with Adam state and a versioned binary checkpoint
//! format (header, then `(name, shape, raw f32 values)` records).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"RSEP";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
struct Param {
    value: Array2<f64>,
    grad: Array2<f64>,
    m: Array2<f64>,
    v: Array2<f64>,
}

/// Model parameters keyed by name, with per-parameter Adam moments and a
/// shared step counter. Iteration order is the name order, so updates are
/// deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Array2<f64>) {
        let dim = value.dim();
        self.params.insert(
            name.to_string(),
            Param { value, grad: Array2::zeros(dim), m: Array2::zeros(dim), v: Array2::zeros(dim) },
        );
    }

    pub fn insert_randn(&mut self, name: &str, rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) {
        let value = Array2::from_shape_fn((rows, cols), |_| {
            // Box-Muller
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        });
        self.insert(name, value);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) {
        self.params.remove(name);
    }

    pub fn value(&self, name: &str) -> &Array2<f64> {
        &self.params.get(name).unwrap_or_else(|| panic!("unknown parameter {name}")).value
    }

    pub fn value_mut(&mut self, name: &str) -> &mut Array2<f64> {
        &mut self.params.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}")).value
    }

    pub fn grad(&self, name: &str) -> &Array2<f64> {
        &self.params.get(name).unwrap_or_else(|| panic!("unknown parameter {name}")).grad
    }

    pub fn accumulate_grad(&mut self, name: &str, delta: &Array2<f64>) {
        let p = self.params.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        p.grad += delta;
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(0.0);
        }
    }

    /// Drop all optimizer state and reset the step counter.
    pub fn reset_optimizer(&mut self) {
        self.step = 0;
        for p in self.params.values_mut() {
            p.m.fill(0.0);
            p.v.fill(0.0);
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn total_entries(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Decoupled-weight-decay Adam step. Gradients are left untouched; the
    /// caller zeroes them. Aborts without touching any value on a non-finite
    /// gradient.
    pub fn adam_step(&mut self, lr: f64, betas: (f64, f64), weight_decay: f64) -> Result<()> {
        const EPS: f64 = 1e-8;
        for (name, p) in &self.params {
            if p.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let (b1, b2) = betas;
        let bc1 = 1.0 - b1.powf(t);
        let bc2 = 1.0 - b2.powf(t);
        for p in self.params.values_mut() {
            p.m.zip_mut_with(&p.grad, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            p.v.zip_mut_with(&p.grad, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let m = &p.m;
            let v = &p.v;
            ndarray::Zip::from(&mut p.value).and(m).and(v).for_each(|x, &m, &v| {
                let mhat = m / bc1;
                let vhat = v / bc2;
                *x -= lr * (mhat / (vhat.sqrt() + EPS) + weight_decay * *x);
            });
        }
        Ok(())
    }

    /// Mean over the rows of a 2D parameter, as a 1 x D array.
    pub fn mean_of_rows(&self, name: &str) -> Array2<f64> {
        let v = self.value(name);
        let mean = v.mean_axis(ndarray::Axis(0)).unwrap();
        mean.insert_axis(ndarray::Axis(0))
    }

    /// Save as: magic, version, config-blob length + bytes, record count,
    /// then per record: name, rows, cols, f32 little-endian values.
    pub fn save(&self, path: &Path, config_blob: &str) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(MAGIC)?;
        f.write_all(&VERSION.to_le_bytes())?;
        let blob = config_blob.as_bytes();
        f.write_all(&(blob.len() as u32).to_le_bytes())?;
        f.write_all(blob)?;
        f.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, p) in &self.params {
            let nb = name.as_bytes();
            f.write_all(&(nb.len() as u32).to_le_bytes())?;
            f.write_all(nb)?;
            let (rows, cols) = p.value.dim();
            f.write_all(&(rows as u32).to_le_bytes())?;
            f.write_all(&(cols as u32).to_le_bytes())?;
            for &x in p.value.iter() {
                f.write_all(&(x as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Load a checkpoint; returns the store and the config blob.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut f)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let blob_len = read_u32(&mut f)? as usize;
        let mut blob = vec![0u8; blob_len];
        f.read_exact(&mut blob)?;
        let config_blob =
            String::from_utf8(blob).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let count = read_u32(&mut f)?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = read_u32(&mut f)? as usize;
            let mut name = vec![0u8; name_len];
            f.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::Checkpoint(e.to_string()))?;
            let rows = read_u32(&mut f)? as usize;
            let cols = read_u32(&mut f)? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            let mut buf = [0u8; 4];
            for _ in 0..rows * cols {
                f.read_exact(&mut buf)?;
                data.push(f32::from_le_bytes(buf) as f64);
            }
            let value = Array2::from_shape_vec((rows, cols), data)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            store.insert(&name, value);
        }
        Ok((store, config_blob))
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn adam_fixed_points() {
        let mut s = ParamStore::new();
        s.insert("w", array![[1.0, 2.0]]);
        // zero grads, zero weight decay -> unchanged
        s.adam_step(0.1, (0.9, 0.999), 0.0).unwrap();
        assert_eq!(s.value("w"), &array![[1.0, 2.0]]);
        // lr = 0 -> unchanged even with grads
        s.accumulate_grad("w", &array![[1.0, -1.0]]);
        s.adam_step(0.0, (0.9, 0.999), 0.0).unwrap();
        assert_eq!(s.value("w"), &array![[1.0, 2.0]]);
    }

    #[test]
    fn adam_constant_grad_update_magnitude_approaches_lr() {
        let mut s = ParamStore::new();
        s.insert("w", array![[0.0]]);
        let lr = 0.01;
        let mut prev = 0.0;
        let mut delta = 0.0;
        for _ in 0..200 {
            s.zero_grads();
            s.accumulate_grad("w", &array![[3.0]]);
            s.adam_step(lr, (0.9, 0.999), 0.0).unwrap();
            let cur = s.value("w")[[0, 0]];
            delta = (cur - prev).abs();
            prev = cur;
        }
        assert!((delta - lr).abs() < 1e-6, "step magnitude {delta}");
    }

    #[test]
    fn adam_rejects_non_finite_grads() {
        let mut s = ParamStore::new();
        s.insert("w", array![[0.0]]);
        s.accumulate_grad("w", &array![[f64::NAN]]);
        let before = s.value("w").clone();
        let err = s.adam_step(0.1, (0.9, 0.999), 0.0).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(n) if n == "w"));
        assert_eq!(s.value("w"), &before);
    }

    #[test]
    fn checkpoint_round_trip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::new();
        s.insert("a.w", array![[1.5, -2.25], [0.125, 3.0]]);
        s.insert("b.bias", array![[0.0, 7.5]]);
        let p1 = dir.path().join("c1.ckpt");
        s.save(&p1, "variant = \"d\"").unwrap();
        let (loaded, blob) = ParamStore::load(&p1).unwrap();
        assert_eq!(blob, "variant = \"d\"");
        let p2 = dir.path().join("c2.ckpt");
        loaded.save(&p2, &blob).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(loaded.value("a.w"), s.value("a.w"));
    }
}
