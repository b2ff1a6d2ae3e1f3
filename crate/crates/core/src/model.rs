//! The end-to-end recommender model: item embeddings, a selectable encoder
//! stack, left padding/truncation, and the tied-embedding scoring head.
//!
//! Sequences are left-padded with item id 0 so the final position always
//! holds the most recent interaction; the hidden state at the last position
//! is the user representation for every encoder kind. With the default
//! bias-free configuration a padding prefix contributes exactly zero to the
//! state-space and GRU encoders, and is masked out of attention contexts.

use std::collections::BTreeMap;

use crate::baselines::{
    build_attention_layer, build_gru, build_layer_norm, position_ids, AttentionKind,
    AttentionLayerNodes, AttentionLayerParams, GruNodes, GruParams, LayerNormNodes,
    LayerNormParams,
};
use crate::numerics::{Array, DType, Graph, NodeId, ScanMode, Scalar, SeededRng};
use crate::ssm::{build_mamba_block, SsmBlockNodes, SsmBlockParams};
use crate::{Error, Result};

/// Padding item id; never a real item.
pub const PADDING_ID: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    Ssm,
    Attention,
    Gru,
    LinearAttention,
}

impl EncoderKind {
    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::Ssm => "ssm",
            EncoderKind::Attention => "attention",
            EncoderKind::Gru => "gru",
            EncoderKind::LinearAttention => "linear",
        }
    }

    pub fn parse(s: &str) -> Option<EncoderKind> {
        match s {
            "ssm" => Some(EncoderKind::Ssm),
            "attention" => Some(EncoderKind::Attention),
            "gru" => Some(EncoderKind::Gru),
            "linear" | "linear_attention" => Some(EncoderKind::LinearAttention),
            _ => None,
        }
    }

    pub fn all() -> [EncoderKind; 4] {
        [
            EncoderKind::Ssm,
            EncoderKind::Attention,
            EncoderKind::Gru,
            EncoderKind::LinearAttention,
        ]
    }
}

/// Architecture and sizing. `vocab_size` counts the padding id, so real
/// items are `1..vocab_size`.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub encoder: EncoderKind,
    pub max_len: usize,
    pub d_model: usize,
    pub d_state: usize,
    pub conv_width: usize,
    pub expand: usize,
    pub layers: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub tie_output_embeddings: bool,
    /// Enables layer-norm offsets and GRU gate biases (off by default so
    /// padding zero-propagation is exact).
    pub with_offsets: bool,
    pub dtype: DType,
    pub scan_mode: ScanMode,
}

impl ModelConfig {
    /// Paper-scale defaults: hidden size 50, window 2048, two blocks.
    pub fn new(encoder: EncoderKind, vocab_size: usize) -> Self {
        ModelConfig {
            encoder,
            max_len: 2048,
            d_model: 50,
            d_state: 16,
            conv_width: 4,
            expand: 2,
            layers: if encoder == EncoderKind::Gru { 1 } else { 2 },
            heads: 1,
            vocab_size,
            tie_output_embeddings: true,
            with_offsets: false,
            dtype: DType::F64,
            scan_mode: ScanMode::Recurrent,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_len < 2 {
            return Err(Error::Config("max_len must be >= 2".into()));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be >= 2".into()));
        }
        if self.d_model == 0 || self.layers == 0 {
            return Err(Error::Config("d_model and layers must be positive".into()));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads {} must divide d_model {}",
                self.heads, self.d_model
            )));
        }
        Ok(())
    }

    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }

    fn needs_positions(&self) -> bool {
        matches!(
            self.encoder,
            EncoderKind::Attention | EncoderKind::LinearAttention
        )
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("encoder".into(), self.encoder.name().into());
        m.insert("max_len".into(), self.max_len.to_string());
        m.insert("d_model".into(), self.d_model.to_string());
        m.insert("d_state".into(), self.d_state.to_string());
        m.insert("conv_width".into(), self.conv_width.to_string());
        m.insert("expand".into(), self.expand.to_string());
        m.insert("layers".into(), self.layers.to_string());
        m.insert("heads".into(), self.heads.to_string());
        m.insert("vocab_size".into(), self.vocab_size.to_string());
        m.insert(
            "tie_embeddings".into(),
            self.tie_output_embeddings.to_string(),
        );
        m.insert("with_offsets".into(), self.with_offsets.to_string());
        m.insert("dtype".into(), self.dtype.name().into());
        m.insert("scan_mode".into(), self.scan_mode.name().into());
        m
    }

    pub fn from_map(m: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| -> Result<&String> {
            m.get(k)
                .ok_or_else(|| Error::Config(format!("missing model config key `{k}`")))
        };
        let parse_usize = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Config(format!("bad value for `{k}`")))
        };
        let parse_bool = |k: &str| -> Result<bool> {
            get(k)?
                .parse()
                .map_err(|_| Error::Config(format!("bad value for `{k}`")))
        };
        let encoder_s = get("encoder")?;
        let dtype_s = get("dtype")?;
        let scan_s = get("scan_mode")?;
        let cfg = ModelConfig {
            encoder: EncoderKind::parse(encoder_s)
                .ok_or_else(|| Error::Config(format!("unknown encoder `{encoder_s}`")))?,
            max_len: parse_usize("max_len")?,
            d_model: parse_usize("d_model")?,
            d_state: parse_usize("d_state")?,
            conv_width: parse_usize("conv_width")?,
            expand: parse_usize("expand")?,
            layers: parse_usize("layers")?,
            heads: parse_usize("heads")?,
            vocab_size: parse_usize("vocab_size")?,
            tie_output_embeddings: parse_bool("tie_embeddings")?,
            with_offsets: parse_bool("with_offsets")?,
            dtype: DType::parse(dtype_s)
                .ok_or_else(|| Error::Config(format!("unknown dtype `{dtype_s}`")))?,
            scan_mode: ScanMode::parse(scan_s)
                .ok_or_else(|| Error::Config(format!("unknown scan_mode `{scan_s}`")))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One encoder layer's parameters.
#[derive(Clone)]
pub enum LayerParams<T: Scalar> {
    Ssm {
        norm: LayerNormParams<T>,
        block: SsmBlockParams<T>,
    },
    Gru {
        norm: LayerNormParams<T>,
        gru: GruParams<T>,
    },
    Attention(AttentionLayerParams<T>),
    Linear(AttentionLayerParams<T>),
}

/// All learnable state of the model. Every array is reachable from exactly
/// one named slot (see [`ModelParams::visit`]).
#[derive(Clone)]
pub struct ModelParams<T: Scalar> {
    pub config: ModelConfig,
    /// `[vocab_size, d_model]`; row 0 (padding) is all-zero and exempt from
    /// updates.
    pub embedding: Array<T>,
    /// Present when output embeddings are untied.
    pub out_embedding: Option<Array<T>>,
    /// Present for the attention-family encoders.
    pub pos_embedding: Option<Array<T>>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: LayerNormParams<T>,
}

fn zero_row0<T: Scalar>(table: &Array<T>) -> Array<T> {
    let d = table.cols();
    let mut v = table.as_slice().to_vec();
    for slot in v.iter_mut().take(d) {
        *slot = T::zero();
    }
    Array::from_vec(table.shape(), v).expect("shape preserved")
}

impl<T: Scalar> ModelParams<T> {
    /// Deterministic initialization from a seed: projection matrices from
    /// the Xavier-normal scheme, state-space arrays from their dedicated
    /// schemes, padding embedding row zeroed.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(seed).derive("init");
        let d = config.d_model;
        let v = config.vocab_size;

        let embedding = zero_row0(&crate::numerics::xavier_normal_init(v, d, &mut rng)?);
        let out_embedding = if config.tie_output_embeddings {
            None
        } else {
            Some(zero_row0(&crate::numerics::xavier_normal_init(
                v, d, &mut rng,
            )?))
        };
        let pos_embedding = if config.needs_positions() {
            Some(crate::numerics::xavier_normal_init(
                config.max_len,
                d,
                &mut rng,
            )?)
        } else {
            None
        };

        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            let layer = match config.encoder {
                EncoderKind::Ssm => LayerParams::Ssm {
                    norm: LayerNormParams::init(d, config.with_offsets)?,
                    block: SsmBlockParams::init(
                        d,
                        config.d_state,
                        config.conv_width,
                        config.expand,
                        &mut rng,
                    )?,
                },
                EncoderKind::Gru => LayerParams::Gru {
                    norm: LayerNormParams::init(d, config.with_offsets)?,
                    gru: GruParams::init(d, config.with_offsets, &mut rng)?,
                },
                EncoderKind::Attention => LayerParams::Attention(AttentionLayerParams::init(
                    d,
                    d,
                    config.with_offsets,
                    &mut rng,
                )?),
                EncoderKind::LinearAttention => LayerParams::Linear(
                    AttentionLayerParams::init(d, d, config.with_offsets, &mut rng)?,
                ),
            };
            layers.push(layer);
        }

        Ok(ModelParams {
            config: config.clone(),
            embedding,
            out_embedding,
            pos_embedding,
            layers,
            final_norm: LayerNormParams::init(d, config.with_offsets)?,
        })
    }

    /// The table used for scoring: the input embedding when tied, otherwise
    /// the dedicated output table.
    pub fn scoring_table(&self) -> &Array<T> {
        self.out_embedding.as_ref().unwrap_or(&self.embedding)
    }

    /// Visits every parameter as `(name, array)` in a fixed order.
    pub fn visit(&self, mut f: impl FnMut(&str, &Array<T>)) {
        fn norm<T: Scalar>(
            prefix: &str,
            n: &LayerNormParams<T>,
            f: &mut impl FnMut(&str, &Array<T>),
        ) {
            f(&format!("{prefix}.gamma"), &n.gamma);
            if let Some(b) = &n.beta {
                f(&format!("{prefix}.beta"), b);
            }
        }
        f("embedding", &self.embedding);
        if let Some(o) = &self.out_embedding {
            f("out_embedding", o);
        }
        if let Some(p) = &self.pos_embedding {
            f("pos_embedding", p);
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let p = format!("layer{i}");
            match layer {
                LayerParams::Ssm { norm: n, block } => {
                    norm(&format!("{p}.norm"), n, &mut f);
                    f(&format!("{p}.ssm.in_proj"), &block.in_proj);
                    f(&format!("{p}.ssm.a_log"), &block.a_log);
                    f(&format!("{p}.ssm.delta_proj"), &block.delta_proj);
                    f(&format!("{p}.ssm.delta_bias"), &block.delta_bias);
                    f(&format!("{p}.ssm.b_proj"), &block.b_proj);
                    f(&format!("{p}.ssm.c_proj"), &block.c_proj);
                    f(&format!("{p}.ssm.conv_kernel"), &block.conv_kernel);
                    f(&format!("{p}.ssm.d_skip"), &block.d_skip);
                    f(&format!("{p}.ssm.out_proj"), &block.out_proj);
                }
                LayerParams::Gru { norm: n, gru } => {
                    norm(&format!("{p}.norm"), n, &mut f);
                    f(&format!("{p}.gru.w_update"), &gru.w_update);
                    f(&format!("{p}.gru.u_update"), &gru.u_update);
                    f(&format!("{p}.gru.w_reset"), &gru.w_reset);
                    f(&format!("{p}.gru.u_reset"), &gru.u_reset);
                    f(&format!("{p}.gru.w_cand"), &gru.w_cand);
                    f(&format!("{p}.gru.u_cand"), &gru.u_cand);
                    if let Some(b) = &gru.b_update {
                        f(&format!("{p}.gru.b_update"), b);
                    }
                    if let Some(b) = &gru.b_reset {
                        f(&format!("{p}.gru.b_reset"), b);
                    }
                    if let Some(b) = &gru.b_cand {
                        f(&format!("{p}.gru.b_cand"), b);
                    }
                }
                LayerParams::Attention(a) | LayerParams::Linear(a) => {
                    f(&format!("{p}.attn.wq"), &a.wq);
                    f(&format!("{p}.attn.wk"), &a.wk);
                    f(&format!("{p}.attn.wv"), &a.wv);
                    f(&format!("{p}.attn.wo"), &a.wo);
                    f(&format!("{p}.attn.ffn_w1"), &a.ffn_w1);
                    f(&format!("{p}.attn.ffn_w2"), &a.ffn_w2);
                    norm(&format!("{p}.attn.norm1"), &a.norm1, &mut f);
                    norm(&format!("{p}.attn.norm2"), &a.norm2, &mut f);
                }
            }
        }
        norm("final_norm", &self.final_norm, &mut f);
    }

    /// Parameter census as `(name, array)` pairs in visit order.
    pub fn named(&self) -> Vec<(String, Array<T>)> {
        let mut out = Vec::new();
        self.visit(|name, arr| out.push((name.to_string(), arr.clone())));
        out
    }

    /// Total learnable element count.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(|_, a| n += a.len());
        n
    }

    /// Replaces the parameter at `name`; shape must match.
    pub fn set(&mut self, name: &str, value: Array<T>) -> Result<()> {
        let mut found = false;
        let mut shape_ok = true;
        self.visit(|n, a| {
            if n == name {
                found = true;
                shape_ok = a.shape() == value.shape();
            }
        });
        if !found {
            return Err(Error::Format(format!("unknown parameter `{name}`")));
        }
        if !shape_ok {
            return Err(Error::Format(format!("shape mismatch for parameter `{name}`")));
        }
        self.visit_mut_set(name, value);
        Ok(())
    }

    fn visit_mut_set(&mut self, name: &str, value: Array<T>) {
        fn set_norm<T: Scalar>(prefix: &str, n: &mut LayerNormParams<T>, name: &str, v: &Array<T>) {
            if name == format!("{prefix}.gamma") {
                n.gamma = v.clone();
            } else if let Some(b) = &mut n.beta {
                if name == format!("{prefix}.beta") {
                    *b = v.clone();
                }
            }
        }
        match name {
            "embedding" => self.embedding = value,
            "out_embedding" => {
                if let Some(o) = &mut self.out_embedding {
                    *o = value;
                }
            }
            "pos_embedding" => {
                if let Some(p) = &mut self.pos_embedding {
                    *p = value;
                }
            }
            _ => {
                if name.starts_with("final_norm") {
                    set_norm("final_norm", &mut self.final_norm, name, &value);
                    return;
                }
                for (i, layer) in self.layers.iter_mut().enumerate() {
                    let p = format!("layer{i}");
                    if !name.starts_with(&p) {
                        continue;
                    }
                    let rest = &name[p.len() + 1..];
                    match layer {
                        LayerParams::Ssm { norm, block } => {
                            set_norm(&format!("{p}.norm"), norm, name, &value);
                            match rest {
                                "ssm.in_proj" => block.in_proj = value.clone(),
                                "ssm.a_log" => block.a_log = value.clone(),
                                "ssm.delta_proj" => block.delta_proj = value.clone(),
                                "ssm.delta_bias" => block.delta_bias = value.clone(),
                                "ssm.b_proj" => block.b_proj = value.clone(),
                                "ssm.c_proj" => block.c_proj = value.clone(),
                                "ssm.conv_kernel" => block.conv_kernel = value.clone(),
                                "ssm.d_skip" => block.d_skip = value.clone(),
                                "ssm.out_proj" => block.out_proj = value.clone(),
                                _ => {}
                            }
                        }
                        LayerParams::Gru { norm, gru } => {
                            set_norm(&format!("{p}.norm"), norm, name, &value);
                            match rest {
                                "gru.w_update" => gru.w_update = value.clone(),
                                "gru.u_update" => gru.u_update = value.clone(),
                                "gru.w_reset" => gru.w_reset = value.clone(),
                                "gru.u_reset" => gru.u_reset = value.clone(),
                                "gru.w_cand" => gru.w_cand = value.clone(),
                                "gru.u_cand" => gru.u_cand = value.clone(),
                                "gru.b_update" => gru.b_update = Some(value.clone()),
                                "gru.b_reset" => gru.b_reset = Some(value.clone()),
                                "gru.b_cand" => gru.b_cand = Some(value.clone()),
                                _ => {}
                            }
                        }
                        LayerParams::Attention(a) | LayerParams::Linear(a) => {
                            match rest {
                                "attn.wq" => a.wq = value.clone(),
                                "attn.wk" => a.wk = value.clone(),
                                "attn.wv" => a.wv = value.clone(),
                                "attn.wo" => a.wo = value.clone(),
                                "attn.ffn_w1" => a.ffn_w1 = value.clone(),
                                "attn.ffn_w2" => a.ffn_w2 = value.clone(),
                                _ => {
                                    set_norm(&format!("{p}.attn.norm1"), &mut a.norm1, name, &value);
                                    set_norm(&format!("{p}.attn.norm2"), &mut a.norm2, name, &value);
                                }
                            }
                        }
                    }
                    return;
                }
            }
        }
    }
}

/// Left-pads with id 0 (or keeps the most recent `max_len` items) so real
/// items occupy the rightmost positions. Ids must be real items in
/// `[1, vocab_size)`.
pub fn pad_truncate(seq: &[u32], max_len: usize, vocab_size: usize) -> Result<Vec<u32>> {
    for &id in seq {
        if id == PADDING_ID || id as usize >= vocab_size {
            return Err(Error::Data(format!(
                "item id {id} outside [1, {vocab_size})"
            )));
        }
    }
    let mut out = vec![PADDING_ID; max_len];
    if seq.len() >= max_len {
        out.copy_from_slice(&seq[seq.len() - max_len..]);
    } else {
        out[max_len - seq.len()..].copy_from_slice(seq);
    }
    Ok(out)
}

/// Graph-node handles for the full model.
pub struct ModelNodes {
    pub embedding: NodeId,
    pub out_embedding: Option<NodeId>,
    pub pos_embedding: Option<NodeId>,
    pub layers: Vec<LayerNodes>,
    pub final_norm: LayerNormNodes,
}

pub enum LayerNodes {
    Ssm { norm: LayerNormNodes, block: SsmBlockNodes },
    Gru { norm: LayerNormNodes, gru: GruNodes },
    Attention(AttentionLayerNodes),
    Linear(AttentionLayerNodes),
}

impl ModelNodes {
    pub fn insert<T: Scalar>(g: &mut Graph<T>, p: &ModelParams<T>) -> Self {
        ModelNodes {
            embedding: g.param(p.embedding.clone()),
            out_embedding: p.out_embedding.as_ref().map(|o| g.param(o.clone())),
            pos_embedding: p.pos_embedding.as_ref().map(|o| g.param(o.clone())),
            layers: p
                .layers
                .iter()
                .map(|l| match l {
                    LayerParams::Ssm { norm, block } => LayerNodes::Ssm {
                        norm: LayerNormNodes::insert(g, norm),
                        block: SsmBlockNodes::insert(g, block),
                    },
                    LayerParams::Gru { norm, gru } => LayerNodes::Gru {
                        norm: LayerNormNodes::insert(g, norm),
                        gru: GruNodes::insert(g, gru),
                    },
                    LayerParams::Attention(a) => {
                        LayerNodes::Attention(AttentionLayerNodes::insert(g, a))
                    }
                    LayerParams::Linear(a) => LayerNodes::Linear(AttentionLayerNodes::insert(g, a)),
                })
                .collect(),
            final_norm: LayerNormNodes::insert(g, &p.final_norm),
        }
    }

    /// Node of the table used for scoring (tied or untied).
    pub fn scoring_table(&self) -> NodeId {
        self.out_embedding.unwrap_or(self.embedding)
    }
}

/// Encoder output: hidden states after the final norm, plus the pre-norm
/// activations (padding positions are exactly zero there for the bias-free
/// state-space and GRU encoders).
pub struct EncodeOut {
    pub hidden: NodeId,
    pub pre_norm: NodeId,
}

/// Builds the encoder stack over one padded window of ids.
pub fn build_encoder<T: Scalar>(
    g: &mut Graph<T>,
    nodes: &ModelNodes,
    config: &ModelConfig,
    ids: &[u32],
) -> Result<EncodeOut> {
    if ids.is_empty() {
        return Err(Error::Data("empty id window".into()));
    }
    if ids.len() > config.max_len {
        return Err(Error::Config(format!(
            "window length {} exceeds max_len {}",
            ids.len(),
            config.max_len
        )));
    }
    let valid: Vec<bool> = ids.iter().map(|&i| i != PADDING_ID).collect();
    let mut h = g.gather_rows(nodes.embedding, ids)?;
    if let Some(pos) = nodes.pos_embedding {
        let pos_ids = position_ids(config.max_len, ids.len())?;
        let pe = g.gather_rows(pos, &pos_ids)?;
        h = g.add(h, pe)?;
    }
    for layer in &nodes.layers {
        h = match layer {
            LayerNodes::Ssm { norm, block } => {
                let xin = build_layer_norm(g, h, norm)?;
                let y = build_mamba_block(g, xin, block, config.d_inner(), config.scan_mode)?;
                g.add(h, y)?
            }
            LayerNodes::Gru { norm, gru } => {
                let xin = build_layer_norm(g, h, norm)?;
                let y = build_gru(g, xin, gru)?;
                g.add(h, y)?
            }
            LayerNodes::Attention(a) => {
                build_attention_layer(g, h, a, config.heads, &valid, AttentionKind::Softmax)?
            }
            LayerNodes::Linear(a) => {
                build_attention_layer(g, h, a, config.heads, &valid, AttentionKind::Linear)?
            }
        };
    }
    let hidden = build_layer_norm(g, h, &nodes.final_norm)?;
    Ok(EncodeOut { hidden, pre_norm: h })
}

/// Encodes a batch of padded windows; returns `[batch, L, d_model]`.
pub fn encode_sequence<T: Scalar>(
    ids: &[u32],
    batch: usize,
    config: &ModelConfig,
    params: &ModelParams<T>,
) -> Result<Array<T>> {
    if batch == 0 || ids.len() % batch != 0 {
        return Err(Error::Data(format!(
            "id buffer of {} does not split into {} windows",
            ids.len(),
            batch
        )));
    }
    let l = ids.len() / batch;
    let d = config.d_model;
    let mut out = Vec::with_capacity(batch * l * d);
    for b in 0..batch {
        let window = &ids[b * l..(b + 1) * l];
        let mut g: Graph<T> = Graph::new();
        let nodes = ModelNodes::insert(&mut g, params);
        let enc = build_encoder(&mut g, &nodes, config, window)?;
        out.extend_from_slice(g.value(enc.hidden).as_slice());
    }
    Ok(Array::from_vec(&[batch, l, d], out)?)
}

/// Candidate set for scoring.
pub enum Candidates<'a> {
    /// Every real item, ids `1..vocab_size`, in id order.
    All,
    Ids(&'a [u32]),
}

/// Scores candidates against a user representation:
/// `score(u, i) = hidden_last · table[i]`.
pub fn score_items<T: Scalar>(
    hidden_last: &[T],
    params: &ModelParams<T>,
    candidates: Candidates<'_>,
) -> Result<Vec<T>> {
    let table = params.scoring_table();
    let d = table.cols();
    if hidden_last.len() != d {
        return Err(Error::Data(format!(
            "representation length {} != d_model {}",
            hidden_last.len(),
            d
        )));
    }
    let v = params.config.vocab_size;
    let ts = table.as_slice();
    let dot = |id: usize| -> T {
        let row = &ts[id * d..(id + 1) * d];
        let mut s = T::zero();
        for (a, b) in hidden_last.iter().zip(row) {
            s += *a * *b;
        }
        s
    };
    match candidates {
        Candidates::All => Ok((1..v).map(dot).collect()),
        Candidates::Ids(ids) => {
            let mut out = Vec::with_capacity(ids.len());
            for &id in ids {
                if id == PADDING_ID || id as usize >= v {
                    return Err(Error::Data(format!("candidate id {id} outside [1, {v})")));
                }
                out.push(dot(id as usize));
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(encoder: EncoderKind) -> ModelConfig {
        let mut c = ModelConfig::new(encoder, 12);
        c.max_len = 8;
        c.d_model = 4;
        c.d_state = 2;
        c.conv_width = 2;
        c.layers = 2;
        c
    }

    #[test]
    fn pad_truncate_cases() {
        assert_eq!(pad_truncate(&[5, 6, 7], 5, 100).unwrap(), vec![0, 0, 5, 6, 7]);
        let long: Vec<u32> = (1..=10).collect();
        assert_eq!(pad_truncate(&long, 4, 100).unwrap(), vec![7, 8, 9, 10]);
        assert_eq!(pad_truncate(&[5, 6, 7], 3, 100).unwrap(), vec![5, 6, 7]);
        assert!(pad_truncate(&[0, 1], 4, 100).is_err());
        assert!(pad_truncate(&[1, 100], 4, 100).is_err());
    }

    #[test]
    fn encode_shapes() {
        let c = cfg(EncoderKind::Ssm);
        let p: ModelParams<f64> = ModelParams::init(&c, 7).unwrap();
        let ids: Vec<u32> = (0..16).map(|i| 1 + (i % 11) as u32).collect();
        let h = encode_sequence(&ids, 2, &c, &p).unwrap();
        assert_eq!(h.shape(), &[2, 8, 4]);
    }

    #[test]
    fn all_padding_input_gives_zero_prenorm_state() {
        let c = cfg(EncoderKind::Ssm);
        let p: ModelParams<f64> = ModelParams::init(&c, 7).unwrap();
        let ids = vec![PADDING_ID; 8];
        let mut g: Graph<f64> = Graph::new();
        let nodes = ModelNodes::insert(&mut g, &p);
        let enc = build_encoder(&mut g, &nodes, &c, &ids).unwrap();
        let pre = g.value(enc.pre_norm);
        assert!(pre.as_slice().iter().all(|&v| v == 0.0));
    }

    fn final_row(h: &Array<f64>) -> Vec<f64> {
        let d = h.cols();
        h.as_slice()[h.len() - d..].to_vec()
    }

    #[test]
    fn left_padding_invariance() {
        for kind in EncoderKind::all() {
            let c = cfg(kind);
            let p: ModelParams<f64> = ModelParams::init(&c, 3).unwrap();
            let seq = [5u32, 6, 7];
            let padded = pad_truncate(&seq, 8, c.vocab_size).unwrap();
            let h_padded = encode_sequence(&padded, 1, &c, &p).unwrap();
            let h_plain = encode_sequence(&seq, 1, &c, &p).unwrap();
            let (a, b) = (final_row(&h_padded), final_row(&h_plain));
            for (x, y) in a.iter().zip(&b) {
                assert!(
                    (x - y).abs() < 1e-9,
                    "{}: padded {x} vs plain {y}",
                    kind.name()
                );
            }
        }
    }

    #[test]
    fn truncation_keeps_only_last_window() {
        let c = cfg(EncoderKind::Ssm);
        let p: ModelParams<f64> = ModelParams::init(&c, 9).unwrap();
        let long: Vec<u32> = (0..20).map(|i| 1 + (i % 11) as u32).collect();
        let win = pad_truncate(&long, 8, c.vocab_size).unwrap();
        let win2 = pad_truncate(&long[12..], 8, c.vocab_size).unwrap();
        assert_eq!(win, win2);
    }

    #[test]
    fn scoring_orthonormal_case() {
        let c = {
            let mut c = cfg(EncoderKind::Ssm);
            c.vocab_size = 5;
            c
        };
        let mut p: ModelParams<f64> = ModelParams::init(&c, 1).unwrap();
        // embedding rows 1..5 = unit basis vectors
        let mut e = vec![0.0; 5 * 4];
        for i in 1..5 {
            e[i * 4 + (i - 1)] = 1.0;
        }
        p.embedding = Array::from_vec(&[5, 4], e).unwrap();
        let hidden = [0.0, 0.0, 1.0, 0.0]; // equals embedding[3]
        let scores = score_items(&hidden, &p, Candidates::All).unwrap();
        assert_eq!(scores.len(), 4); // V - 1
        assert_eq!(scores, vec![0.0, 0.0, 1.0, 0.0]);
        assert!(score_items(&hidden, &p, Candidates::Ids(&[0])).is_err());
    }

    #[test]
    fn census_unique_names_and_tied_untied_count() {
        for kind in EncoderKind::all() {
            let c = cfg(kind);
            let p: ModelParams<f64> = ModelParams::init(&c, 2).unwrap();
            let named = p.named();
            let mut names: Vec<&String> = named.iter().map(|(n, _)| n).collect();
            let before = names.len();
            names.sort();
            names.dedup();
            assert_eq!(before, names.len(), "duplicate parameter names");

            let mut untied = c.clone();
            untied.tie_output_embeddings = false;
            let pu: ModelParams<f64> = ModelParams::init(&untied, 2).unwrap();
            assert_eq!(
                pu.param_count() - p.param_count(),
                c.vocab_size * c.d_model
            );
        }
    }

    #[test]
    fn init_is_deterministic_and_padding_row_zero() {
        let c = cfg(EncoderKind::Attention);
        let a: ModelParams<f64> = ModelParams::init(&c, 5).unwrap();
        let b: ModelParams<f64> = ModelParams::init(&c, 5).unwrap();
        let (na, nb) = (a.named(), b.named());
        assert_eq!(na.len(), nb.len());
        for ((n1, a1), (n2, a2)) in na.iter().zip(&nb) {
            assert_eq!(n1, n2);
            assert_eq!(a1.as_slice(), a2.as_slice(), "{n1}");
        }
        assert!(a.embedding.as_slice()[..c.d_model].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unknown_encoder_kind_is_config_error() {
        assert!(EncoderKind::parse("transformer").is_none());
        let mut m = cfg(EncoderKind::Ssm).to_map();
        m.insert("encoder".into(), "nope".into());
        assert!(ModelConfig::from_map(&m).is_err());
    }

    #[test]
    fn config_map_round_trip() {
        let c = cfg(EncoderKind::LinearAttention);
        let c2 = ModelConfig::from_map(&c.to_map()).unwrap();
        assert_eq!(c2.to_map(), c.to_map());
    }
}
