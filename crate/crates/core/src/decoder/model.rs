//! Decoder parameters, initialization and checkpoint IO.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! "WSDM" | u16 version=1 | u16 reserved=0
//! u32 layers | u32 heads | u32 d_model | u32 d_ff | u32 max_len | u32 vocab | u32 feat_dim | u64 dropout (f64 bits)
//! tensors as f32, in DecoderModel::specs() order:
//!   proj.w [feat_dim x d_model], proj.b [d_model], embed [vocab x d_model]
//!   per layer: self.{q,k,v,o}.{w [d x d], b [d]}, norm1.{gain,bias},
//!              cross.{q,k,v,o}.{w,b}, norm2.{gain,bias},
//!              ff1.w [d x d_ff], ff1.b [d_ff], ff2.w [d_ff x d], ff2.b [d], norm3.{gain,bias}
//!   head.w [d_model x vocab], head.b [vocab]
//! u32 crc32 of all preceding bytes
//! ```

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DecoderConfig, DecoderError};
use crate::codec::{CodecError, Reader, Writer};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"WSDM";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Affine map `y = x W + b` with `W` stored `fan_in x fan_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { w: vec![0.0; fan_in * fan_out], b: vec![0.0; fan_out], fan_in, fan_out }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        Self { gain: vec![1.0; d], bias: vec![0.0; d] }
    }

    fn zeros(d: usize) -> Self {
        Self { gain: vec![0.0; d], bias: vec![0.0; d] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl MultiHeadAttention {
    fn zeros(d: usize) -> Self {
        Self { q: Linear::zeros(d, d), k: Linear::zeros(d, d), v: Linear::zeros(d, d), o: Linear::zeros(d, d) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm3: LayerNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Weight { fan_in: usize, fan_out: usize },
    Bias,
    Gain,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub kind: TensorKind,
    pub len: usize,
}

/// Every learnable tensor plus the configuration that shapes them.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderModel {
    pub config: DecoderConfig,
    pub proj: Linear,
    /// Token embeddings, `vocab x d_model`.
    pub embed: Vec<f64>,
    pub layers: Vec<DecoderLayer>,
    pub head: Linear,
}

// Walks every tensor in checkpoint order. `$($m)*` is empty or `mut`.
macro_rules! walk_tensors {
    ($model:expr, $iter:ident, $($m:tt)*) => {{
        let cfg = $model.config.clone();
        let (d, v, ff, fd) = (cfg.d_model, cfg.vocab, cfg.d_ff, cfg.feat_dim);
        let mut out = Vec::new();
        let mut f = |spec, t| out.push((spec, t));
        let w = |name: String, fan_in: usize, fan_out: usize| TensorSpec {
            name,
            kind: TensorKind::Weight { fan_in, fan_out },
            len: fan_in * fan_out,
        };
        let b = |name: String, len: usize| TensorSpec { name, kind: TensorKind::Bias, len };
        let g = |name: String, len: usize| TensorSpec { name, kind: TensorKind::Gain, len };
        f(w("proj.w".into(), fd, d), & $($m)* $model.proj.w);
        f(b("proj.b".into(), d), & $($m)* $model.proj.b);
        f(w("embed".into(), v, d), & $($m)* $model.embed);
        for (l, layer) in ($model.layers).$iter().enumerate() {
            for (tag, attn) in [("self", & $($m)* layer.self_attn)] {
                for (p, lin) in [("q", & $($m)* attn.q), ("k", & $($m)* attn.k), ("v", & $($m)* attn.v), ("o", & $($m)* attn.o)] {
                    f(w(format!("layers.{l}.{tag}.{p}.w"), d, d), & $($m)* lin.w);
                    f(b(format!("layers.{l}.{tag}.{p}.b"), d), & $($m)* lin.b);
                }
            }
            f(g(format!("layers.{l}.norm1.gain"), d), & $($m)* layer.norm1.gain);
            f(b(format!("layers.{l}.norm1.bias"), d), & $($m)* layer.norm1.bias);
            for (tag, attn) in [("cross", & $($m)* layer.cross_attn)] {
                for (p, lin) in [("q", & $($m)* attn.q), ("k", & $($m)* attn.k), ("v", & $($m)* attn.v), ("o", & $($m)* attn.o)] {
                    f(w(format!("layers.{l}.{tag}.{p}.w"), d, d), & $($m)* lin.w);
                    f(b(format!("layers.{l}.{tag}.{p}.b"), d), & $($m)* lin.b);
                }
            }
            f(g(format!("layers.{l}.norm2.gain"), d), & $($m)* layer.norm2.gain);
            f(b(format!("layers.{l}.norm2.bias"), d), & $($m)* layer.norm2.bias);
            f(w(format!("layers.{l}.ff1.w"), d, ff), & $($m)* layer.ff1.w);
            f(b(format!("layers.{l}.ff1.b"), ff), & $($m)* layer.ff1.b);
            f(w(format!("layers.{l}.ff2.w"), ff, d), & $($m)* layer.ff2.w);
            f(b(format!("layers.{l}.ff2.b"), d), & $($m)* layer.ff2.b);
            f(g(format!("layers.{l}.norm3.gain"), d), & $($m)* layer.norm3.gain);
            f(b(format!("layers.{l}.norm3.bias"), d), & $($m)* layer.norm3.bias);
        }
        f(w("head.w".into(), d, v), & $($m)* $model.head.w);
        f(b("head.b".into(), v), & $($m)* $model.head.b);
        out
    }};
}

impl DecoderModel {
    /// All-zero parameters (layer-norm gains included). Used for gradient
    /// buffers and optimizer moments.
    pub fn zeros(config: &DecoderConfig) -> Self {
        let d = config.d_model;
        let layers = (0..config.layers)
            .map(|_| DecoderLayer {
                self_attn: MultiHeadAttention::zeros(d),
                norm1: LayerNorm::zeros(d),
                cross_attn: MultiHeadAttention::zeros(d),
                norm2: LayerNorm::zeros(d),
                ff1: Linear::zeros(d, config.d_ff),
                ff2: Linear::zeros(config.d_ff, d),
                norm3: LayerNorm::zeros(d),
            })
            .collect();
        Self {
            config: config.clone(),
            proj: Linear::zeros(config.feat_dim, d),
            embed: vec![0.0; config.vocab * d],
            layers,
            head: Linear::zeros(d, config.vocab),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }

    /// Xavier-uniform weights from a seeded generator, zero biases, unit gains.
    pub fn xavier_init(config: &DecoderConfig, seed: u64) -> Result<Self, DecoderError> {
        config.validate()?;
        let mut model = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        model.for_each_tensor_mut(|spec, t| match spec.kind {
            TensorKind::Weight { fan_in, fan_out } => {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                for v in t.iter_mut() {
                    *v = rng.gen_range(-bound..=bound);
                }
            }
            TensorKind::Bias => t.fill(0.0),
            TensorKind::Gain => t.fill(1.0),
        });
        Ok(model)
    }

    /// Every tensor with its spec, in checkpoint order.
    pub fn tensor_list(&self) -> Vec<(TensorSpec, &Vec<f64>)> {
        walk_tensors!(self, iter,)
    }

    pub fn tensor_list_mut(&mut self) -> Vec<(TensorSpec, &mut Vec<f64>)> {
        walk_tensors!(self, iter_mut, mut)
    }

    pub fn for_each_tensor(&self, mut f: impl FnMut(TensorSpec, &Vec<f64>)) {
        for (spec, t) in self.tensor_list() {
            f(spec, t);
        }
    }

    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(TensorSpec, &mut Vec<f64>)) {
        for (spec, t) in self.tensor_list_mut() {
            f(spec, t);
        }
    }

    pub fn specs(&self) -> Vec<TensorSpec> {
        self.tensor_list().into_iter().map(|(s, _)| s).collect()
    }

    pub fn tensors(&self) -> Vec<&Vec<f64>> {
        self.tensor_list().into_iter().map(|(_, t)| t).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.tensor_list_mut().into_iter().map(|(_, t)| t).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.specs().iter().map(|s| s.len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut w = Writer::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u16(CHECKPOINT_VERSION);
        w.u16(0);
        for v in [c.layers, c.heads, c.d_model, c.d_ff, c.max_len, c.vocab, c.feat_dim] {
            w.u32(v as u32);
        }
        w.u64(c.dropout.to_bits());
        self.for_each_tensor(|_, t| {
            for &v in t {
                w.f32(v as f32);
            }
        });
        w.finish()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, DecoderError> {
        let mut r = Reader::new(buf);
        r.expect_magic(CHECKPOINT_MAGIC)?;
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(CodecError::Version(version).into());
        }
        let reserved = r.u16()?;
        if reserved != 0 {
            return Err(CodecError::Malformed(format!("reserved field is {reserved}")).into());
        }
        let mut dims = [0usize; 7];
        for d in dims.iter_mut() {
            *d = r.u32()? as usize;
        }
        let dropout = f64::from_bits(r.u64()?);
        let config = DecoderConfig {
            layers: dims[0],
            heads: dims[1],
            d_model: dims[2],
            d_ff: dims[3],
            max_len: dims[4],
            vocab: dims[5],
            feat_dim: dims[6],
            dropout,
        };
        config.validate()?;
        let mut model = DecoderModel::zeros(&config);
        let needed = r.position() + 4 * model.parameter_count() + 4;
        if buf.len() < needed {
            return Err(CodecError::Truncated { needed, have: buf.len() }.into());
        }
        let mut result = Ok(());
        model.for_each_tensor_mut(|spec, t| {
            if result.is_err() {
                return;
            }
            match r.f32_vec(spec.len) {
                Ok(vals) => t.iter_mut().zip(vals).for_each(|(d, s)| *d = f64::from(s)),
                Err(e) => result = Err(e),
            }
        });
        result?;
        r.finish()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), DecoderError> {
        fs::write(path, self.to_bytes()).map_err(|source| DecoderError::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Self, DecoderError> {
        let buf = fs::read(path).map_err(|source| DecoderError::Io { path: path.to_path_buf(), source })?;
        Self::from_bytes(&buf)
    }

    /// Rounds every parameter through f32, matching what a checkpoint stores.
    pub fn quantize_f32(&mut self) {
        self.for_each_tensor_mut(|_, t| t.iter_mut().for_each(|v| *v = f64::from(*v as f32)));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DecoderConfig {
        DecoderConfig { layers: 2, heads: 2, d_model: 8, d_ff: 16, dropout: 0.1, max_len: 6, vocab: 12, feat_dim: 5 }
    }

    #[test]
    fn xavier_is_seeded_and_bounded() {
        let a = DecoderModel::xavier_init(&tiny(), 3).unwrap();
        assert_eq!(a, DecoderModel::xavier_init(&tiny(), 3).unwrap());
        assert_ne!(a, DecoderModel::xavier_init(&tiny(), 4).unwrap());
        a.for_each_tensor(|spec, t| match spec.kind {
            TensorKind::Weight { fan_in, fan_out } => {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                assert!(t.iter().all(|v| v.abs() <= bound), "{}", spec.name);
                assert!(t.iter().any(|&v| v != 0.0));
            }
            TensorKind::Bias => assert!(t.iter().all(|&v| v == 0.0)),
            TensorKind::Gain => assert!(t.iter().all(|&v| v == 1.0)),
        });
        // 8x8 attention weights: bound sqrt(6/16)
        let bound = (6.0f64 / 16.0).sqrt();
        assert!(a.layers[0].self_attn.q.w.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn spec_order_and_sizes() {
        let m = DecoderModel::zeros(&tiny());
        let specs = m.specs();
        assert_eq!(specs[0].name, "proj.w");
        assert_eq!(specs[2].name, "embed");
        assert_eq!(specs.last().unwrap().name, "head.b");
        assert_eq!(specs.len(), 3 + 2 * (8 + 2 + 8 + 2 + 4 + 2) + 2);
        let lens: Vec<usize> = m.tensors().iter().map(|t| t.len()).collect();
        assert_eq!(lens, specs.iter().map(|s| s.len).collect::<Vec<_>>());
    }

    #[test]
    fn checkpoint_roundtrip_and_corruption() {
        let mut m = DecoderModel::xavier_init(&tiny(), 11).unwrap();
        m.quantize_f32();
        let bytes = m.to_bytes();
        let back = DecoderModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes(), bytes);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(DecoderModel::from_bytes(&bad), Err(DecoderError::Codec(CodecError::Magic { .. }))));
        let mut flipped = bytes.clone();
        let mid = bytes.len() / 2;
        flipped[mid] ^= 1;
        assert!(matches!(DecoderModel::from_bytes(&flipped), Err(DecoderError::Codec(CodecError::Checksum { .. }))));
        assert!(matches!(
            DecoderModel::from_bytes(&bytes[..mid]),
            Err(DecoderError::Codec(CodecError::Truncated { .. }))
        ));
    }
}
