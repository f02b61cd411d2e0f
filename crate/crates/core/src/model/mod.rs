//! Pre-norm encoder-decoder transformer whose three attention sites accept
//! prepended key-value prefix activations.

mod attention;
mod checkpoint;

pub use attention::{attend_with_prefix, AttentionTrace};

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Tensor, Var};
use crate::vocab::{BOS, EOS};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_src_len: usize,
    pub max_tgt_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_ff: 128,
            vocab_size: 200,
            max_src_len: 40,
            max_tgt_len: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.n_layers,
            self.n_heads,
            self.d_model,
            self.d_ff,
            self.vocab_size,
            self.max_src_len,
            self.max_tgt_len,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(format!("model dims must be positive: {self:?}")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Width of one prefix row: every layer × site × (key, value) × d_model.
    pub fn prefix_dim(&self) -> usize {
        self.n_layers * Site::ALL.len() * 2 * self.d_model
    }

    /// Column offset of a key (`kv = 0`) or value (`kv = 1`) block inside a
    /// prefix row.
    pub fn prefix_offset(&self, layer: usize, site: Site, kv: usize) -> usize {
        ((layer * Site::ALL.len() + site as usize) * 2 + kv) * self.d_model
    }
}

/// Attention site receiving prefix activations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Site {
    EncoderSelf = 0,
    DecoderSelf = 1,
    DecoderCross = 2,
}

impl Site {
    pub const ALL: [Site; 3] = [Site::EncoderSelf, Site::DecoderSelf, Site::DecoderCross];

    pub fn name(self) -> &'static str {
        match self {
            Site::EncoderSelf => "encoder-self",
            Site::DecoderSelf => "decoder-self",
            Site::DecoderCross => "decoder-cross",
        }
    }
}

/// Prefix key/value blocks bound into a graph, `[L_p × d_model]` each.
#[derive(Clone, Debug)]
pub struct PrefixActivations {
    pub len: usize,
    /// Indexed by `layer * 3 + site`.
    blocks: Vec<(Var, Var)>,
}

impl PrefixActivations {
    pub fn new(len: usize, n_layers: usize, blocks: Vec<(Var, Var)>) -> Result<Self> {
        if blocks.len() != n_layers * Site::ALL.len() {
            return Err(Error::Shape(format!(
                "expected {} prefix blocks, got {}",
                n_layers * Site::ALL.len(),
                blocks.len()
            )));
        }
        Ok(Self { len, blocks })
    }

    pub fn block(&self, layer: usize, site: Site) -> (Var, Var) {
        self.blocks[layer * Site::ALL.len() + site as usize]
    }
}

/// Anything that can materialize prefix activations inside a graph.
pub trait PrefixSource {
    fn activations(&self, g: &mut Graph, config: &ModelConfig) -> Result<Option<PrefixActivations>>;
}

#[derive(Clone, Debug)]
pub struct ForwardTraces {
    pub encoder_self: AttentionTrace,
    pub decoder_self: AttentionTrace,
    pub decoder_cross: AttentionTrace,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[T × vocab]`.
    pub logits: Var,
    pub traces: ForwardTraces,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeOptions {
    pub max_len: usize,
    pub min_len: usize,
    pub eos: usize,
}

impl DecodeOptions {
    pub fn new(max_len: usize, min_len: usize) -> Self {
        Self {
            max_len,
            min_len,
            eos: EOS,
        }
    }
}

#[derive(Clone)]
struct AttnIdx {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
}

#[derive(Clone)]
struct FfIdx {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone)]
struct NormIdx {
    g: usize,
    b: usize,
}

#[derive(Clone)]
struct EncLayerIdx {
    ln1: NormIdx,
    attn: AttnIdx,
    ln2: NormIdx,
    ff: FfIdx,
}

#[derive(Clone)]
struct DecLayerIdx {
    ln1: NormIdx,
    self_attn: AttnIdx,
    ln2: NormIdx,
    cross: AttnIdx,
    ln3: NormIdx,
    ff: FfIdx,
}

#[derive(Clone)]
struct Layout {
    embed: usize,
    enc: Vec<EncLayerIdx>,
    enc_ln: NormIdx,
    dec: Vec<DecLayerIdx>,
    dec_ln: NormIdx,
}

/// Parameters of a model bound as leaves of one graph.
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    fn get(&self, idx: usize) -> Var {
        self.vars[idx]
    }
}

#[derive(Clone)]
pub struct Transformer {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

struct LayoutBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
}

impl LayoutBuilder<'_> {
    fn normal(&mut self, name: String, shape: &[usize], std: f64) -> usize {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(self.rng)).collect();
        let t = Tensor::new(shape.to_vec(), data).expect("valid shape");
        self.store.add(name, t, true)
    }

    fn fill(&mut self, name: String, shape: &[usize], v: f64) -> usize {
        self.store.add(name, Tensor::full(shape, v), true)
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormIdx {
        NormIdx {
            g: self.fill(format!("{prefix}.g"), &[d], 1.0),
            b: self.fill(format!("{prefix}.b"), &[d], 0.0),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIdx {
        let std = 1.0 / (d as f64).sqrt();
        AttnIdx {
            wq: self.normal(format!("{prefix}.wq"), &[d, d], std),
            wk: self.normal(format!("{prefix}.wk"), &[d, d], std),
            wv: self.normal(format!("{prefix}.wv"), &[d, d], std),
            wo: self.normal(format!("{prefix}.wo"), &[d, d], std),
        }
    }

    fn ff(&mut self, prefix: &str, d: usize, d_ff: usize) -> FfIdx {
        FfIdx {
            w1: self.normal(format!("{prefix}.w1"), &[d, d_ff], 1.0 / (d as f64).sqrt()),
            b1: self.fill(format!("{prefix}.b1"), &[d_ff], 0.0),
            w2: self.normal(format!("{prefix}.w2"), &[d_ff, d], 1.0 / (d_ff as f64).sqrt()),
            b2: self.fill(format!("{prefix}.b2"), &[d], 0.0),
        }
    }
}

fn build_layout(config: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Layout {
    let d = config.d_model;
    let mut b = LayoutBuilder { store, rng };
    let embed = b.normal("embed".into(), &[config.vocab_size, d], 1.0 / (d as f64).sqrt());
    let enc = (0..config.n_layers)
        .map(|l| EncLayerIdx {
            ln1: b.norm(&format!("enc.{l}.ln1"), d),
            attn: b.attn(&format!("enc.{l}.attn"), d),
            ln2: b.norm(&format!("enc.{l}.ln2"), d),
            ff: b.ff(&format!("enc.{l}.ff"), d, config.d_ff),
        })
        .collect();
    let enc_ln = b.norm("enc.ln", d);
    let dec = (0..config.n_layers)
        .map(|l| DecLayerIdx {
            ln1: b.norm(&format!("dec.{l}.ln1"), d),
            self_attn: b.attn(&format!("dec.{l}.self"), d),
            ln2: b.norm(&format!("dec.{l}.ln2"), d),
            cross: b.attn(&format!("dec.{l}.cross"), d),
            ln3: b.norm(&format!("dec.{l}.ln3"), d),
            ff: b.ff(&format!("dec.{l}.ff"), d, config.d_ff),
        })
        .collect();
    let dec_ln = b.norm("dec.ln", d);
    Layout {
        embed,
        enc,
        enc_ln,
        dec,
        dec_ln,
    }
}

/// Sinusoidal encodings for positions `0..len`.
fn positional(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[pos * d + 2 * i] = angle.sin();
            data[pos * d + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(vec![len, d], data).expect("positive dims")
}

impl Transformer {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let layout = build_layout(&config, &mut params, &mut rng);
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Mark every LM parameter frozen (`false`) or trainable (`true`).
    pub fn set_trainable(&mut self, trainable: bool) {
        self.params.set_all_trainable(trainable);
    }

    pub fn is_frozen(&self) -> bool {
        self.params.iter().all(|p| !p.trainable)
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        BoundParams {
            vars: g.params_from(&self.params),
        }
    }

    /// Bind every LM parameter as a constant leaf, whatever its flag.
    pub fn bind_frozen(&self, g: &mut Graph) -> BoundParams {
        BoundParams {
            vars: self
                .params
                .iter()
                .map(|p| g.param(&p.name, &p.value, false))
                .collect(),
        }
    }

    fn embed_tokens(&self, g: &mut Graph, bp: &BoundParams, ids: &[usize]) -> Result<Var> {
        let d = self.config.d_model;
        let e = g.embedding(bp.get(self.layout.embed), ids)?;
        let e = g.scale(e, (d as f64).sqrt());
        let pe = g.constant(positional(ids.len(), d));
        g.add(e, pe)
    }

    fn linear(&self, g: &mut Graph, bp: &BoundParams, x: Var, w: usize) -> Result<Var> {
        g.matmul(x, bp.get(w))
    }

    fn norm(&self, g: &mut Graph, bp: &BoundParams, x: Var, n: &NormIdx) -> Result<Var> {
        g.layer_norm(x, bp.get(n.g), bp.get(n.b))
    }

    fn feed_forward(&self, g: &mut Graph, bp: &BoundParams, x: Var, f: &FfIdx) -> Result<Var> {
        let h = g.matmul(x, bp.get(f.w1))?;
        let h = g.add_row(h, bp.get(f.b1))?;
        let h = g.gelu(h);
        let h = g.matmul(h, bp.get(f.w2))?;
        g.add_row(h, bp.get(f.b2))
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_block(
        &self,
        g: &mut Graph,
        bp: &BoundParams,
        query_in: Var,
        kv_in: Var,
        a: &AttnIdx,
        prefix: Option<(Var, Var)>,
        causal: bool,
    ) -> Result<(Var, Vec<Arc<Tensor>>)> {
        let q = self.linear(g, bp, query_in, a.wq)?;
        let k = self.linear(g, bp, kv_in, a.wk)?;
        let v = self.linear(g, bp, kv_in, a.wv)?;
        let (h, w) = attend_with_prefix(g, q, k, v, prefix, self.config.n_heads, causal)?;
        Ok((self.linear(g, bp, h, a.wo)?, w))
    }

    fn check_ids(&self, ids: &[usize], max: usize, what: &str) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Length(format!("{what} is empty")));
        }
        if ids.len() > max {
            return Err(Error::Length(format!(
                "{what} has {} tokens, limit is {max}",
                ids.len()
            )));
        }
        if let Some(bad) = ids.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Index(format!(
                "token {bad} out of range for vocab {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn check_prefix(&self, g: &Graph, prefix: Option<&PrefixActivations>) -> Result<usize> {
        let Some(p) = prefix else { return Ok(0) };
        for &(k, v) in &p.blocks {
            let expect = [p.len, self.config.d_model];
            if g.shape(k) != expect || g.shape(v) != expect {
                return Err(Error::Dimension {
                    op: "prefix block",
                    lhs: g.shape(k).to_vec(),
                    rhs: expect.to_vec(),
                });
            }
        }
        Ok(p.len)
    }

    /// Encoder pass; returns the final-normed memory `[S × d]`.
    pub fn encode(
        &self,
        g: &mut Graph,
        bp: &BoundParams,
        src: &[usize],
        prefix: Option<&PrefixActivations>,
    ) -> Result<(Var, AttentionTrace)> {
        self.check_ids(src, self.config.max_src_len, "source")?;
        let lp = self.check_prefix(g, prefix)?;
        let mut trace = AttentionTrace::new(lp);
        let mut x = self.embed_tokens(g, bp, src)?;
        for (l, layer) in self.layout.enc.iter().enumerate() {
            let h = self.norm(g, bp, x, &layer.ln1)?;
            let pk = prefix.map(|p| p.block(l, Site::EncoderSelf));
            let (a, w) = self.attention_block(g, bp, h, h, &layer.attn, pk, false)?;
            trace.weights.push(w);
            x = g.add(x, a)?;
            let h = self.norm(g, bp, x, &layer.ln2)?;
            let f = self.feed_forward(g, bp, h, &layer.ff)?;
            x = g.add(x, f)?;
        }
        Ok((self.norm(g, bp, x, &self.layout.enc_ln)?, trace))
    }

    /// Decoder pass over teacher-forced inputs; returns logits `[T × V]`.
    pub fn decode(
        &self,
        g: &mut Graph,
        bp: &BoundParams,
        memory: Var,
        tgt_in: &[usize],
        prefix: Option<&PrefixActivations>,
    ) -> Result<(Var, AttentionTrace, AttentionTrace)> {
        self.check_ids(tgt_in, self.config.max_tgt_len, "target")?;
        let lp = self.check_prefix(g, prefix)?;
        let mut self_trace = AttentionTrace::new(lp);
        let mut cross_trace = AttentionTrace::new(lp);
        let mut y = self.embed_tokens(g, bp, tgt_in)?;
        for (l, layer) in self.layout.dec.iter().enumerate() {
            let h = self.norm(g, bp, y, &layer.ln1)?;
            let pk = prefix.map(|p| p.block(l, Site::DecoderSelf));
            let (a, w) = self.attention_block(g, bp, h, h, &layer.self_attn, pk, true)?;
            self_trace.weights.push(w);
            y = g.add(y, a)?;
            let h = self.norm(g, bp, y, &layer.ln2)?;
            let pk = prefix.map(|p| p.block(l, Site::DecoderCross));
            let (a, w) = self.attention_block(g, bp, h, memory, &layer.cross, pk, false)?;
            cross_trace.weights.push(w);
            y = g.add(y, a)?;
            let h = self.norm(g, bp, y, &layer.ln3)?;
            let f = self.feed_forward(g, bp, h, &layer.ff)?;
            y = g.add(y, f)?;
        }
        let h = self.norm(g, bp, y, &self.layout.dec_ln)?;
        // Output projection is tied to the input embedding.
        let logits = g.matmul_t(h, bp.get(self.layout.embed))?;
        Ok((logits, self_trace, cross_trace))
    }

    /// Full teacher-forced pass. `tgt_in` starts with the begin-of-sequence token.
    pub fn forward(
        &self,
        g: &mut Graph,
        bp: &BoundParams,
        src: &[usize],
        tgt_in: &[usize],
        prefix: Option<&PrefixActivations>,
    ) -> Result<ForwardOutput> {
        let (memory, encoder_self) = self.encode(g, bp, src, prefix)?;
        let (logits, decoder_self, decoder_cross) = self.decode(g, bp, memory, tgt_in, prefix)?;
        Ok(ForwardOutput {
            logits,
            traces: ForwardTraces {
                encoder_self,
                decoder_self,
                decoder_cross,
            },
        })
    }

    /// Mean token cross-entropy of `target` (EOS appended) given `src`.
    pub fn sequence_loss(
        &self,
        g: &mut Graph,
        bp: &BoundParams,
        src: &[usize],
        target: &[usize],
        prefix: Option<&PrefixActivations>,
    ) -> Result<Var> {
        let (tgt_in, labels) = teacher_forcing(target);
        let out = self.forward(g, bp, src, &tgt_in, prefix)?;
        g.cross_entropy(out.logits, &labels)
    }

    /// Argmax decoding. EOS is suppressed until `min_len` tokens exist; the
    /// returned sequence includes the EOS that stopped it, if any.
    pub fn greedy_decode(
        &self,
        src: &[usize],
        prefix: Option<&dyn PrefixSource>,
        opts: DecodeOptions,
    ) -> Result<Vec<usize>> {
        Ok(self.greedy_decode_traced(src, prefix, opts)?.0)
    }

    /// [`Self::greedy_decode`] plus the attention traces of the final step,
    /// whose queries cover every generated position.
    pub fn greedy_decode_traced(
        &self,
        src: &[usize],
        prefix: Option<&dyn PrefixSource>,
        opts: DecodeOptions,
    ) -> Result<(Vec<usize>, ForwardTraces)> {
        if opts.min_len == 0 || opts.max_len < opts.min_len {
            return Err(Error::Contract(format!(
                "need max_len >= min_len >= 1, got {} and {}",
                opts.max_len, opts.min_len
            )));
        }
        if opts.max_len > self.config.max_tgt_len {
            return Err(Error::Length(format!(
                "max_len {} exceeds max_tgt_len {}",
                opts.max_len, self.config.max_tgt_len
            )));
        }
        let mut g = Graph::new();
        let bp = self.bind(&mut g);
        let acts = match prefix {
            Some(p) => p.activations(&mut g, &self.config)?,
            None => None,
        };
        let (memory, encoder_self) = self.encode(&mut g, &bp, src, acts.as_ref())?;
        let mut out: Vec<usize> = Vec::with_capacity(opts.max_len);
        let mut last_traces = None;
        while out.len() < opts.max_len {
            let mut tgt_in = Vec::with_capacity(out.len() + 1);
            tgt_in.push(BOS);
            tgt_in.extend_from_slice(&out);
            let (logits, ds, dc) = self.decode(&mut g, &bp, memory, &tgt_in, acts.as_ref())?;
            last_traces = Some((ds, dc));
            let lt = g.value(logits);
            let row = lt.row(lt.shape()[0] - 1);
            let allow_eos = out.len() + 1 >= opts.min_len;
            let mut best = None::<(usize, f64)>;
            for (tok, &score) in row.iter().enumerate() {
                if tok == opts.eos && !allow_eos {
                    continue;
                }
                if best.is_none_or(|(_, s)| score > s) {
                    best = Some((tok, score));
                }
            }
            let (tok, _) = best.ok_or_else(|| Error::Numeric("no decodable token".into()))?;
            out.push(tok);
            if tok == opts.eos {
                break;
            }
        }
        let (decoder_self, decoder_cross) = last_traces.expect("max_len >= 1");
        Ok((
            out,
            ForwardTraces {
                encoder_self,
                decoder_self,
                decoder_cross,
            },
        ))
    }
}

/// `([BOS] ⊕ target, target ⊕ [EOS])`.
pub fn teacher_forcing(target: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut tgt_in = Vec::with_capacity(target.len() + 1);
    tgt_in.push(BOS);
    tgt_in.extend_from_slice(target);
    let mut labels = target.to_vec();
    labels.push(EOS);
    (tgt_in, labels)
}
