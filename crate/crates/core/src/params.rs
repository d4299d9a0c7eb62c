//! Named parameter collections, the `ATCK1` checkpoint format, and SGD.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! "ATCK1"            5 bytes
//! section count      u32
//! per section:
//!   name length      u32
//!   name             utf-8 bytes
//!   rank             u32
//!   extents          rank × u64
//!   payload          product(extents) × f64
//! ```

use std::path::Path;

use indexmap::IndexMap;

use crate::binio::{put_f64, put_u32, put_u64, Reader};
use crate::error::{Error, Result};
use crate::tensor::{Gradients, Graph, Tensor, Var};

pub const CHECKPOINT_MAGIC: &str = "ATCK1";

/// Ordered name → tensor map. Insertion order is the checkpoint order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Puts every parameter on `g`; those selected by `trainable` become
    /// gradient leaves, the rest constants.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> Binding {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| {
                let v = if trainable(name) {
                    g.leaf(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Binding { vars }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC.as_bytes());
        put_u32(&mut out, self.params.len() as u32);
        for (name, t) in &self.params {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rank() as u32);
            for &d in t.shape() {
                put_u64(&mut out, d as u64);
            }
            for &v in t.data() {
                put_f64(&mut out, v);
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        r.magic(CHECKPOINT_MAGIC)?;
        let count = r.u32("section count")?;
        let mut store = Self::new();
        for s in 0..count {
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.bytes(len, "parameter name")?)
                .map_err(|e| Error::Format(format!("section {s}: name is not utf-8: {e}")))?
                .to_string();
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64("extent")? as usize);
            }
            let n: usize = shape.iter().product();
            if n * 8 > r.remaining() {
                return Err(Error::Truncated {
                    offset: buf.len() as u64,
                    context: format!("payload of {name:?} needs {} bytes at offset {}", n * 8, r.offset()),
                });
            }
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(r.f64("payload")?);
            }
            store.insert(name, Tensor::new(shape, data)?);
        }
        if r.remaining() != 0 {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint",
                r.remaining()
            )));
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Binding {
    vars: IndexMap<String, Var>,
}

impl Binding {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    /// Gradients for every bound name accepted by `select`, in store order.
    /// Unreached parameters get zeros.
    pub fn collect_grads(
        &self,
        g: &Graph,
        grads: &Gradients,
        select: impl Fn(&str) -> bool,
    ) -> Vec<(String, Tensor)> {
        self.vars
            .iter()
            .filter(|(name, &v)| select(name) && g.requires_grad(v))
            .map(|(name, &v)| (name.clone(), grads.get_or_zeros(v, g.shape(v))))
            .collect()
    }
}

/// Stochastic gradient descent with heavy-ball momentum:
/// `v ← m·v + g`, `θ ← θ − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    /// Rescales the whole gradient when its L2 norm exceeds this value.
    pub clip_norm: Option<f64>,
    velocity: IndexMap<String, Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            clip_norm: None,
            velocity: IndexMap::new(),
        }
    }

    pub fn with_clip(mut self, clip: Option<f64>) -> Self {
        self.clip_norm = clip;
        self
    }

    pub fn velocity(&self, name: &str) -> Option<&Tensor> {
        self.velocity.get(name)
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[(String, Tensor)]) -> Result<()> {
        let norm = grads
            .iter()
            .flat_map(|(_, g)| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        let factor = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        for (name, grad) in grads {
            let p = params.get_mut(name)?;
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            for ((vi, &gi), pi) in v.data_mut().iter_mut().zip(grad.data()).zip(p.data_mut()) {
                *vi = self.momentum * *vi + factor * gi;
                *pi -= self.lr * *vi;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("enc.w", Tensor::new([2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-300, -0.0]).unwrap());
        s.insert("cls.b", Tensor::vector(vec![f64::MAX, 0.25]));
        s
    }

    #[test]
    fn checkpoint_round_trip() {
        let s = store();
        let bytes = s.to_bytes();
        assert_eq!(&bytes[..5], b"ATCK1");
        let back = ParamStore::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.names().collect::<Vec<_>>(), vec!["enc.w", "cls.b"]);
    }

    #[test]
    fn checkpoint_rejects_bad_magic_and_truncation() {
        let bytes = store().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ParamStore::from_bytes(&bad), Err(Error::BadMagic { .. })));
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(ParamStore::from_bytes(cut), Err(Error::Truncated { .. })));
    }

    #[test]
    fn sgd_step_on_quadratic_matches_closed_form() {
        // f(θ) = ½·a·θ², gradient a·θ; two steps with momentum m from v = 0.
        let (a, lr, m, theta0) = (3.0, 0.1, 0.9, 2.0);
        let mut s = ParamStore::new();
        s.insert("theta", Tensor::scalar(theta0));
        let mut opt = Sgd::new(lr, m);
        let g0 = a * theta0;
        opt.step(&mut s, &[("theta".into(), Tensor::scalar(g0))]).unwrap();
        let theta1 = theta0 - lr * g0;
        assert!((s.get("theta").unwrap().item() - theta1).abs() < 1e-12);
        let g1 = a * theta1;
        opt.step(&mut s, &[("theta".into(), Tensor::scalar(g1))]).unwrap();
        let theta2 = theta1 - lr * (m * g0 + g1);
        assert!((s.get("theta").unwrap().item() - theta2).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_leaves_parameters_bitwise_unchanged() {
        let mut s = store();
        let before = s.to_bytes();
        let mut opt = Sgd::new(0.5, 0.9);
        let grads: Vec<_> = s.iter().map(|(n, t)| (n.to_string(), Tensor::zeros(t.shape()))).collect();
        opt.step(&mut s, &grads).unwrap();
        assert_eq!(s.to_bytes(), before);
    }

    #[test]
    fn clipping_bounds_the_update() {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::vector(vec![0.0, 0.0]));
        let mut opt = Sgd::new(1.0, 0.0).with_clip(Some(1.0));
        opt.step(&mut s, &[("p".into(), Tensor::vector(vec![30.0, 40.0]))]).unwrap();
        let p = s.get("p").unwrap().data();
        assert!((p[0] + 0.6).abs() < 1e-15 && (p[1] + 0.8).abs() < 1e-15);
    }
}
