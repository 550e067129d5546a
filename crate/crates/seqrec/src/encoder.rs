//! Causal self-attentive sequence encoder.
//!
//! Layout of the learnable state:
//!
//! * `item_embedding`: `(|V| + 1) × d`, one row per item; row 0 is padding
//!   and is held at zero. The same table embeds inputs and scores outputs.
//! * `position_embedding`: `n × d`, one row per position. Sequences are
//!   right-aligned, so the most recent item always sits at position `n − 1`.
//! * per layer: query/key/value projections (`d × d`, heads are contiguous
//!   column blocks of width `d / h`), output projection `W^O`, the two
//!   feed-forward layers with biases, and two layer-norm gain/bias pairs.
//!
//! Each layer is post-norm:
//! `x = LN(x + drop(MHA(x)))`, then `x = LN(x + drop(FFN(x)))`.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng as _;

use crate::corpus::PAD;
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::rng::{self, Rng};

pub const LAYER_NORM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Maximum sequence length `n`.
    pub max_len: usize,
    /// Embedding width `d`.
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub dropout: f64,
    /// Scale attention logits by `1/√d` instead of the per-head `1/√(d/h)`.
    pub scale_full_dim: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            max_len: 50,
            dim: 64,
            heads: 2,
            layers: 2,
            dropout: 0.2,
            scale_full_dim: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_len == 0 || self.dim == 0 || self.heads == 0 || self.layers == 0 {
            return Err(Error::Config("encoder max_len, dim, heads and layers must be ≥ 1".into()));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "encoder dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// `(|V|+1)·d + n·d + L·(6d² + 6d)`.
    pub fn param_count(&self, num_items: usize) -> usize {
        let d = self.dim;
        (num_items + 1) * d + self.max_len * d + self.layers * (6 * d * d + 6 * d)
    }

    fn attention_scale(&self) -> f64 {
        let width = if self.scale_full_dim { self.dim } else { self.head_dim() };
        1.0 / (width as f64).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
struct LayerIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
}

/// Structure of the network: configuration plus parameter handles.
/// Forward passes read values from whatever [`ParamStore`] backs the graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    num_items: usize,
    items: ParamId,
    positions: ParamId,
    layers: Vec<LayerIds>,
}

/// Output of [`Encoder::forward`]: hidden states for the real suffix of a
/// padded input. Row `k` belongs to padded position `start + k`.
pub struct Encoded {
    pub hidden: Var,
    pub start: usize,
    pub len: usize,
}

/// A parameterized encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub encoder: Encoder,
    pub params: ParamStore,
}

fn layer_names(l: usize) -> [String; 12] {
    [
        "attn.wq", "attn.wk", "attn.wv", "attn.wo", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2", "ln1.gain", "ln1.bias",
        "ln2.gain", "ln2.bias",
    ]
    .map(|s| format!("layer{l}.{s}"))
}

impl Encoder {
    fn bind(config: EncoderConfig, num_items: usize, store: &ParamStore) -> Result<Self> {
        let get = |name: &str| {
            store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
        };
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let n = layer_names(l);
            layers.push(LayerIds {
                wq: get(&n[0])?,
                wk: get(&n[1])?,
                wv: get(&n[2])?,
                wo: get(&n[3])?,
                w1: get(&n[4])?,
                b1: get(&n[5])?,
                w2: get(&n[6])?,
                b2: get(&n[7])?,
                ln1_gain: get(&n[8])?,
                ln1_bias: get(&n[9])?,
                ln2_gain: get(&n[10])?,
                ln2_bias: get(&n[11])?,
            });
        }
        Ok(Encoder {
            items: get("item_embedding")?,
            positions: get("position_embedding")?,
            config,
            num_items,
            layers,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn item_table(&self) -> ParamId {
        self.items
    }

    pub fn position_table(&self) -> ParamId {
        self.positions
    }

    fn check_input(&self, padded: &[usize]) -> Result<()> {
        if padded.len() != self.config.max_len {
            return Err(Error::Dimension {
                op: "encode",
                left: vec![padded.len()],
                right: vec![self.config.max_len],
            });
        }
        if let Some(&bad) = padded.iter().find(|&&i| i > self.num_items) {
            return Err(Error::Index {
                index: bad,
                vocab: self.num_items,
            });
        }
        Ok(())
    }

    fn dropout(&self, g: &mut Graph, x: Var, rng: Option<&mut Rng>) -> Result<Var> {
        let p = self.config.dropout;
        match rng {
            Some(rng) if p > 0.0 => {
                let keep = 1.0 / (1.0 - p);
                let mask = (0..g.value(x).len())
                    .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
                    .collect();
                g.mul_const(x, mask)
            }
            _ => Ok(x),
        }
    }

    /// Item plus position embedding for `items` placed at positions
    /// `first_pos..first_pos + items.len()`.
    pub fn embed_graph(&self, g: &mut Graph, items: &[usize], first_pos: usize) -> Result<Var> {
        let it = g.param(self.items);
        let pt = g.param(self.positions);
        let e = g.gather(it, items)?;
        let positions: Vec<usize> = (first_pos..first_pos + items.len()).collect();
        let p = g.gather(pt, &positions)?;
        g.add(e, p)
    }

    /// Multi-head attention of layer `layer` over `x` (m×d). `keep` is the
    /// m×m attention mask (row = query, column = key).
    pub fn attention_graph(&self, g: &mut Graph, layer: usize, x: Var, keep: &[bool]) -> Result<Var> {
        let ids = &self.layers[layer];
        let (wq, wk, wv, wo) = (g.param(ids.wq), g.param(ids.wk), g.param(ids.wv), g.param(ids.wo));
        let q = g.matmul(x, wq)?;
        let k = g.matmul(x, wk)?;
        let v = g.matmul(x, wv)?;
        let dh = self.config.head_dim();
        let scale = self.config.attention_scale();
        let mut heads = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let logits = g.matmul_bt(qh, kh)?;
            let logits = g.scale(logits, scale);
            let weights = g.masked_softmax(logits, keep)?;
            heads.push(g.matmul(weights, vh)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        g.matmul(cat, wo)
    }

    /// Position-wise `ReLU(x W1 + b1) W2 + b2`.
    pub fn pffn_graph(&self, g: &mut Graph, layer: usize, x: Var) -> Result<Var> {
        let ids = &self.layers[layer];
        let (w1, b1, w2, b2) = (g.param(ids.w1), g.param(ids.b1), g.param(ids.w2), g.param(ids.b2));
        let h = g.matmul(x, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.relu(h);
        let h = g.matmul(h, w2)?;
        g.add_row(h, b2)
    }

    /// Causal mask over `items`: query `i` sees key `j` iff `j ≤ i` and key
    /// `j` is not padding.
    pub fn causal_mask(items: &[usize]) -> Vec<bool> {
        let m = items.len();
        let mut keep = vec![false; m * m];
        for i in 0..m {
            for j in 0..=i {
                keep[i * m + j] = items[j] != PAD;
            }
        }
        keep
    }

    /// Runs the encoder on a padded length-`n` input. Leading padding is
    /// skipped entirely: with causal masking and padded keys masked out, it
    /// cannot influence any real position. Returns `None` for an all-padding
    /// input.
    pub fn forward(&self, g: &mut Graph, padded: &[usize], mut dropout: Option<&mut Rng>) -> Result<Option<Encoded>> {
        self.check_input(padded)?;
        let Some(start) = padded.iter().position(|&i| i != PAD) else {
            return Ok(None);
        };
        let items = &padded[start..];
        let keep = Self::causal_mask(items);
        let mut x = self.embed_graph(g, items, start)?;
        x = self.dropout(g, x, dropout.as_deref_mut())?;
        for l in 0..self.config.layers {
            let ids = &self.layers[l];
            let a = self.attention_graph(g, l, x, &keep)?;
            let a = self.dropout(g, a, dropout.as_deref_mut())?;
            let r = g.add(x, a)?;
            let (gn, bn) = (g.param(ids.ln1_gain), g.param(ids.ln1_bias));
            x = g.layer_norm(r, gn, bn, LAYER_NORM_EPS)?;
            let f = self.pffn_graph(g, l, x)?;
            let f = self.dropout(g, f, dropout.as_deref_mut())?;
            let r = g.add(x, f)?;
            let (gn, bn) = (g.param(ids.ln2_gain), g.param(ids.ln2_bias));
            x = g.layer_norm(r, gn, bn, LAYER_NORM_EPS)?;
        }
        Ok(Some(Encoded {
            hidden: x,
            start,
            len: items.len(),
        }))
    }
}

impl Model {
    /// Fresh model with weights uniform in `[−1/√d, 1/√d]`, zero biases,
    /// unit layer-norm gains and a zero padding row.
    pub fn init(config: EncoderConfig, num_items: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::rng_for(seed, &[rng::stream::INIT]);
        let d = config.dim;
        let bound = 1.0 / (d as f64).sqrt();
        let mut uniform = |r: usize, c: usize| {
            Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-bound..=bound)).collect()).expect("shape")
        };
        let mut store = ParamStore::new();
        let mut items = uniform(num_items + 1, d);
        items.row_mut(PAD).fill(0.0);
        store.insert("item_embedding", items)?;
        store.insert("position_embedding", uniform(config.max_len, d))?;
        for l in 0..config.layers {
            let n = layer_names(l);
            for name in &n[0..4] {
                store.insert(name.clone(), uniform(d, d))?;
            }
            store.insert(n[4].clone(), uniform(d, d))?;
            store.insert(n[5].clone(), Tensor::vector(vec![0.0; d]))?;
            store.insert(n[6].clone(), uniform(d, d))?;
            store.insert(n[7].clone(), Tensor::vector(vec![0.0; d]))?;
            for (gain, bias) in [(&n[8], &n[9]), (&n[10], &n[11])] {
                store.insert(gain.clone(), Tensor::vector(vec![1.0; d]))?;
                store.insert(bias.clone(), Tensor::vector(vec![0.0; d]))?;
            }
        }
        let encoder = Encoder::bind(config, num_items, &store)?;
        Ok(Model { encoder, params: store })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.encoder.config
    }

    pub fn num_items(&self) -> usize {
        self.encoder.num_items
    }

    /// Restores the padding row of the item table to zero.
    pub fn zero_padding_row(&mut self) {
        let id = self.encoder.items;
        self.params.value_mut(id).row_mut(PAD).fill(0.0);
    }

    pub fn item_embedding(&self, item: usize) -> &[f64] {
        self.params.value(self.encoder.items).row(item)
    }

    /// `E(S)` for a padded input: row `i` is `e_{item_i} + p_i` (n×d).
    pub fn embed(&self, padded: &[usize]) -> Result<Tensor> {
        self.encoder.check_input(padded)?;
        let mut g = Graph::new(&self.params);
        let v = self.encoder.embed_graph(&mut g, padded, 0)?;
        Ok(g.value(v).clone())
    }

    /// Multi-head attention of one layer over an arbitrary m×d input, with
    /// causal masking and the keys listed in `key_is_padding` masked out.
    /// Queries with no visible key produce zero rows.
    pub fn multi_head_attention(&self, layer: usize, input: &Tensor, key_is_padding: &[bool]) -> Result<Tensor> {
        let m = input.rows();
        let mut keep = vec![false; m * m];
        for i in 0..m {
            for j in 0..=i {
                keep[i * m + j] = !key_is_padding[j];
            }
        }
        let mut g = Graph::new(&self.params);
        let x = g.constant(input.clone());
        let out = self.encoder.attention_graph(&mut g, layer, x, &keep)?;
        Ok(g.value(out).clone())
    }

    pub fn pffn(&self, layer: usize, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(&self.params);
        let x = g.constant(input.clone());
        let out = self.encoder.pffn_graph(&mut g, layer, x)?;
        Ok(g.value(out).clone())
    }

    /// Final hidden states `H^L` (n×d) for a padded input; rows of leading
    /// padding are zero. `dropout` enables train-mode dropout.
    pub fn encode(&self, padded: &[usize], dropout: Option<&mut Rng>) -> Result<Tensor> {
        let d = self.config().dim;
        let mut out = Tensor::zeros(&[self.config().max_len, d]);
        let mut g = Graph::new(&self.params);
        if let Some(enc) = self.encoder.forward(&mut g, padded, dropout)? {
            let h = g.value(enc.hidden);
            for k in 0..enc.len {
                out.row_mut(enc.start + k).copy_from_slice(h.row(k));
            }
        }
        Ok(out)
    }

    /// Hidden state at the final position of `items` (truncated to the last
    /// `n`), evaluated without dropout.
    pub fn last_hidden(&self, items: &[usize]) -> Result<Vec<f64>> {
        let padded = crate::corpus::pad_truncate(items, self.config().max_len);
        let mut g = Graph::new(&self.params);
        match self.encoder.forward(&mut g, &padded, None)? {
            Some(enc) => Ok(g.value(enc.hidden).row(enc.len - 1).to_vec()),
            None => Ok(vec![0.0; self.config().dim]),
        }
    }

    /// Relevance `h · e_i` of every real item; entry `k` scores item `k + 1`.
    pub fn relevance(&self, hidden: &[f64]) -> Vec<f64> {
        let table = self.params.value(self.encoder.items);
        (1..=self.num_items())
            .map(|i| crate::numerics::dot(hidden, table.row(i)))
            .collect()
    }

    /// Relevance of the listed items only.
    pub fn relevance_of(&self, hidden: &[f64], items: &[usize]) -> Vec<f64> {
        let table = self.params.value(self.encoder.items);
        items.iter().map(|&i| crate::numerics::dot(hidden, table.row(i))).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf).map_err(|e| Error::io(path, e))?;
        crate::io::write_bytes_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = crate::io::open_required(path)?;
        Self::read_checkpoint(&mut r)
    }

    /// Binary checkpoint, version 1, little-endian:
    /// magic `SEQRECK1`, a length-prefixed `key=value` config block, the
    /// parameter count, then per parameter its name, rank, extents and
    /// `f64` values in row-major order.
    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let c = self.config();
        w.write_all(CHECKPOINT_MAGIC)?;
        let header = format!(
            "max_len={}\ndim={}\nheads={}\nlayers={}\ndropout={:?}\nscale_full_dim={}\nnum_items={}\n",
            c.max_len,
            c.dim,
            c.heads,
            c.layers,
            c.dropout,
            c.scale_full_dim,
            self.num_items()
        );
        write_u64(w, header.len() as u64)?;
        w.write_all(header.as_bytes())?;
        write_u64(w, self.params.len() as u64)?;
        for id in self.params.ids() {
            let name = self.params.name(id);
            write_u64(w, name.len() as u64)?;
            w.write_all(name.as_bytes())?;
            let t = self.params.value(id);
            write_u64(w, t.shape().len() as u64)?;
            for &e in t.shape() {
                write_u64(w, e as u64)?;
            }
            for &x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let io = |e: std::io::Error| Error::Checkpoint(e.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic or unsupported version)"));
        }
        let hlen = read_u64(r).map_err(io)? as usize;
        let header = read_string(r, hlen).map_err(io)?;
        let mut kv = std::collections::HashMap::new();
        for line in header.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| bad("bad header line"))?;
            kv.insert(k.to_string(), v.to_string());
        }
        let field = |k: &str| kv.get(k).ok_or_else(|| bad(&format!("header missing `{k}`")));
        let num = |k: &str| -> Result<usize> { field(k)?.parse().map_err(|_| bad(&format!("bad `{k}`"))) };
        let config = EncoderConfig {
            max_len: num("max_len")?,
            dim: num("dim")?,
            heads: num("heads")?,
            layers: num("layers")?,
            dropout: field("dropout")?.parse().map_err(|_| bad("bad `dropout`"))?,
            scale_full_dim: field("scale_full_dim")?.parse().map_err(|_| bad("bad `scale_full_dim`"))?,
        };
        config.validate()?;
        let num_items = num("num_items")?;
        let count = read_u64(r).map_err(io)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let nlen = read_u64(r).map_err(io)? as usize;
            let name = read_string(r, nlen).map_err(io)?;
            let rank = read_u64(r).map_err(io)? as usize;
            let shape = (0..rank)
                .map(|_| read_u64(r).map(|x| x as usize))
                .collect::<std::io::Result<Vec<_>>>()
                .map_err(io)?;
            let len: usize = shape.iter().product();
            let mut data = vec![0.0; len];
            let mut b = [0u8; 8];
            for x in &mut data {
                r.read_exact(&mut b).map_err(io)?;
                *x = f64::from_le_bytes(b);
            }
            store.insert(name, Tensor::new(shape, data)?)?;
        }
        let encoder = Encoder::bind(config, num_items, &store)?;
        let expected = encoder.config.param_count(num_items);
        if store.num_scalars() != expected {
            return Err(bad(&format!(
                "parameter count {} does not match config ({expected})",
                store.num_scalars()
            )));
        }
        Ok(Model { encoder, params: store })
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"SEQRECK1";

fn write_u64<W: Write>(w: &mut W, x: u64) -> std::io::Result<()> {
    w.write_all(&x.to_le_bytes())
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R, len: usize) -> std::io::Result<String> {
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}
