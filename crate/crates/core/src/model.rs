//! Encoder–decoder transformer with an insertion (slot) head or a
//! next-token head.
//!
//! Everything runs on a [`Graph`]: training builds a recording graph, decoding
//! an inference graph per step. Rows of several instances are packed into one
//! matrix and kept apart by per-instance attention blocks, so a batched
//! forward computes every row exactly as an unbatched one would.
//!
//! Decoder rows carry a [`RowMeta`]: the step at which the row was created
//! (BOS/EOS are step 0) and its current surface index. The generation-order
//! mask lets a row see keys created at the same or an earlier step.

use serde::{Deserialize, Serialize};
use substrate::tensor::Tensor;
use substrate::{init, rng, AttnBlock, AttnLayout, Checkpoint, Graph, ParamId, ParamStore, Var};

use crate::error::{Error, Result};
use crate::posenc::{abs_rows, rel_index, rel_relation, snapshot_plan, Boundary, FpeState, PeScheme, REL_RELATIONS};
use crate::vocab::{Token, BOS, EOS, NUM_RESERVED, PAD};

pub const CONFIG_VERSION: u32 = 1;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Insertion,
    L2r,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskKind {
    Full,
    GenerationOrder,
}

/// Architecture. The L2R head always uses sinusoidal positions on the
/// decoder side; `pe_scheme` only affects insertion models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub version: u32,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub pe_scheme: PeScheme,
    pub head: HeadKind,
    /// Decoder self-attention mask used in training and decoding. Unset
    /// means full attention for ABS and generation order otherwise.
    pub decoder_mask: Option<MaskKind>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            vocab_size: 64,
            max_len: 64,
            pe_scheme: PeScheme::Fpe,
            head: HeadKind::Insertion,
            decoder_mask: None,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.version != CONFIG_VERSION {
            return bad(format!("config version {} (expected {CONFIG_VERSION})", self.version));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::OddDimension(self.d_model));
        }
        if self.n_layers == 0 || self.d_ff == 0 {
            return bad("n_layers and d_ff must be positive".into());
        }
        if self.vocab_size <= NUM_RESERVED as usize {
            return bad(format!(
                "vocab_size {} leaves no room beside the {NUM_RESERVED} reserved ids",
                self.vocab_size
            ));
        }
        if self.max_len == 0 {
            return bad("max_len must be positive".into());
        }
        Ok(())
    }

    pub fn mask_kind(&self) -> MaskKind {
        match (self.head, self.decoder_mask) {
            (HeadKind::L2r, _) => MaskKind::GenerationOrder,
            (_, Some(m)) => m,
            (_, None) if self.pe_scheme == PeScheme::Abs => MaskKind::Full,
            _ => MaskKind::GenerationOrder,
        }
    }

    /// The positional scheme actually used by the decoder.
    pub fn decoder_scheme(&self) -> PeScheme {
        match self.head {
            HeadKind::Insertion => self.pe_scheme,
            HeadKind::L2r => PeScheme::Abs,
        }
    }
}

/// Creation step and current surface index of one decoder row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RowMeta {
    pub step: usize,
    pub surface: usize,
}

/// A partial output in surface order, without the BOS/EOS sentinels.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Hypothesis {
    pub tokens: Vec<Token>,
    /// Insertion step of each token, ≥ 1.
    pub steps: Vec<usize>,
    /// Creation index of each token; doubles as its FPE node id.
    pub created: Vec<usize>,
}

impl Hypothesis {
    pub fn new() -> Self {
        Self::default()
    }

    /// Tokens created in surface order with the given steps.
    pub fn from_parts(tokens: Vec<Token>, steps: Vec<usize>) -> Self {
        assert_eq!(tokens.len(), steps.len());
        let created = (0..tokens.len()).collect();
        Self {
            tokens,
            steps,
            created,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Metadata of the `n + 2` boundary-extended rows in surface order.
    pub fn row_meta(&self) -> Vec<RowMeta> {
        let n = self.len();
        let mut out = Vec::with_capacity(n + 2);
        out.push(RowMeta { step: 0, surface: 0 });
        for (i, &s) in self.steps.iter().enumerate() {
            out.push(RowMeta { step: s, surface: i + 1 });
        }
        out.push(RowMeta {
            step: 0,
            surface: n + 1,
        });
        out
    }

    /// Row-major `(n+2)²` mask for the boundary-extended hypothesis.
    pub fn mask(&self, kind: MaskKind) -> Vec<bool> {
        let meta = self.row_meta();
        build_mask(&meta, &meta, kind)
    }
}

fn build_mask(queries: &[RowMeta], keys: &[RowMeta], kind: MaskKind) -> Vec<bool> {
    let mut m = Vec::with_capacity(queries.len() * keys.len());
    for q in queries {
        for k in keys {
            m.push(match kind {
                MaskKind::Full => true,
                MaskKind::GenerationOrder => k.step <= q.step,
            });
        }
    }
    m
}

/// Per-slot log-probabilities over the vocabulary, END_OF_SLOT included.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotPrediction {
    pub logp: Tensor,
}

impl SlotPrediction {
    pub fn num_slots(&self) -> usize {
        self.logp.rows()
    }

    pub fn slot(&self, s: usize) -> &[f64] {
        self.logp.row(s)
    }
}

/// Location of one instance's encoder states inside a packed memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemSpan {
    pub start: usize,
    /// Rows including padding.
    pub rows: usize,
    /// Real source tokens; the remaining rows are padding.
    pub len: usize,
}

/// Encoder output plus the per-layer cross-attention keys and values,
/// which depend only on the source and are computed once per decode.
#[derive(Clone, Debug)]
pub struct Memory {
    pub states: Tensor,
    pub spans: Vec<MemSpan>,
    k: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Memory {
    /// `[len_src × d_model]` states of instance `i` without padding rows.
    pub fn instance(&self, i: usize) -> Tensor {
        let s = self.spans[i];
        self.states.select_rows(&(s.start..s.start + s.len).collect::<Vec<_>>())
    }

    pub(crate) fn vars(&self, g: &mut Graph) -> MemVars {
        MemVars {
            k: self.k.iter().map(|t| g.constant(t.clone())).collect(),
            v: self.v.iter().map(|t| g.constant(t.clone())).collect(),
            spans: self.spans.clone(),
        }
    }
}

pub(crate) struct MemVars {
    pub k: Vec<Var>,
    pub v: Vec<Var>,
    pub spans: Vec<MemSpan>,
}

/// Frozen per-layer keys and values and final hidden states of decoder
/// rows, in creation order. Append-only.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderCache {
    d: usize,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    hidden: Vec<f64>,
    steps: Vec<usize>,
}

impl DecoderCache {
    pub fn new(n_layers: usize, d_model: usize) -> Self {
        Self {
            d: d_model,
            k: vec![Vec::new(); n_layers],
            v: vec![Vec::new(); n_layers],
            hidden: Vec::new(),
            steps: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn key(&self, layer: usize, row: usize) -> &[f64] {
        &self.k[layer][row * self.d..(row + 1) * self.d]
    }

    pub fn value(&self, layer: usize, row: usize) -> &[f64] {
        &self.v[layer][row * self.d..(row + 1) * self.d]
    }

    pub fn hidden(&self, row: usize) -> &[f64] {
        &self.hidden[row * self.d..(row + 1) * self.d]
    }

    fn layer_tensors(&self, layer: usize) -> (Tensor, Tensor) {
        let n = self.len();
        (
            Tensor::matrix(n, self.d, self.k[layer].clone()),
            Tensor::matrix(n, self.d, self.v[layer].clone()),
        )
    }

    pub(crate) fn append(&mut self, k: &[&[f64]], v: &[&[f64]], hidden: &[f64], steps: &[usize]) {
        for (l, rows) in k.iter().enumerate() {
            self.k[l].extend_from_slice(rows);
        }
        for (l, rows) in v.iter().enumerate() {
            self.v[l].extend_from_slice(rows);
        }
        self.hidden.extend_from_slice(hidden);
        self.steps.extend_from_slice(steps);
    }
}

/// How new rows of one instance attend to its keys.
pub(crate) enum MaskSpec<'a> {
    Kind(MaskKind),
    /// Row-major `new_rows × keys`.
    Explicit(&'a [bool]),
}

/// One instance in a packed decoder call. The instance's new rows are
/// consecutive in the packed input; `keys` lists cached rows first, then the
/// new rows.
pub(crate) struct Segment<'a> {
    pub new_rows: usize,
    pub keys: Vec<RowMeta>,
    pub past: Option<&'a DecoderCache>,
    pub mask: MaskSpec<'a>,
    pub mem: usize,
}

pub(crate) struct DecoderOutput {
    pub hidden: Var,
    /// Per layer, keys and values of the new rows (packed).
    pub k: Vec<Var>,
    pub v: Vec<Var>,
}

#[derive(Clone, Copy, Debug)]
struct LnIds {
    g: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct AttnIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct FfIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct EncLayer {
    ln1: LnIds,
    attn: AttnIds,
    ln2: LnIds,
    ff: FfIds,
}

#[derive(Clone, Copy, Debug)]
struct DecLayer {
    ln1: LnIds,
    attn: AttnIds,
    rel: Option<ParamId>,
    ln2: LnIds,
    cross: AttnIds,
    ln3: LnIds,
    ff: FfIds,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct FpeIds {
    pub p_b: ParamId,
    pub p_e: ParamId,
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug)]
struct Ids {
    embed: ParamId,
    out_b: ParamId,
    enc: Vec<EncLayer>,
    enc_ln: LnIds,
    dec: Vec<DecLayer>,
    dec_ln: LnIds,
    slot: Option<(ParamId, ParamId)>,
    fpe: Option<FpeIds>,
}

struct Init<'a> {
    store: ParamStore,
    rng: &'a mut rng::Rng,
}

impl Init<'_> {
    fn add(&mut self, name: String, t: Tensor) -> Result<ParamId> {
        Ok(self.store.add(name, t)?)
    }

    fn ln(&mut self, p: &str, d: usize) -> Result<()> {
        self.add(format!("{p}.g"), Tensor::full(&[d], 1.0))?;
        self.add(format!("{p}.b"), Tensor::zeros(&[d]))?;
        Ok(())
    }

    fn linear(&mut self, p: &str, w: &str, b: &str, d_in: usize, d_out: usize) -> Result<()> {
        let t = init::xavier_uniform(self.rng, d_in, d_out);
        self.add(format!("{p}.{w}"), t)?;
        self.add(format!("{p}.{b}"), Tensor::zeros(&[d_out]))?;
        Ok(())
    }

    fn attn(&mut self, p: &str, d: usize) -> Result<()> {
        for (w, b) in [("wq", "bq"), ("wk", "bk"), ("wv", "bv"), ("wo", "bo")] {
            self.linear(p, w, b, d, d)?;
        }
        Ok(())
    }

    fn ff(&mut self, p: &str, d: usize, d_ff: usize) -> Result<()> {
        self.linear(p, "w1", "b1", d, d_ff)?;
        self.linear(p, "w2", "b2", d_ff, d)
    }
}

impl Ids {
    fn resolve(store: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let id = |n: String| store.id(&n).map_err(Error::from);
        let ln = |p: &str| -> Result<LnIds> {
            Ok(LnIds {
                g: id(format!("{p}.g"))?,
                b: id(format!("{p}.b"))?,
            })
        };
        let attn = |p: &str| -> Result<AttnIds> {
            Ok(AttnIds {
                wq: id(format!("{p}.wq"))?,
                bq: id(format!("{p}.bq"))?,
                wk: id(format!("{p}.wk"))?,
                bk: id(format!("{p}.bk"))?,
                wv: id(format!("{p}.wv"))?,
                bv: id(format!("{p}.bv"))?,
                wo: id(format!("{p}.wo"))?,
                bo: id(format!("{p}.bo"))?,
            })
        };
        let ff = |p: &str| -> Result<FfIds> {
            Ok(FfIds {
                w1: id(format!("{p}.w1"))?,
                b1: id(format!("{p}.b1"))?,
                w2: id(format!("{p}.w2"))?,
                b2: id(format!("{p}.b2"))?,
            })
        };
        let mut enc = Vec::new();
        let mut dec = Vec::new();
        for l in 0..cfg.n_layers {
            enc.push(EncLayer {
                ln1: ln(&format!("enc.{l}.ln1"))?,
                attn: attn(&format!("enc.{l}.self"))?,
                ln2: ln(&format!("enc.{l}.ln2"))?,
                ff: ff(&format!("enc.{l}.ff"))?,
            });
            let rel = match cfg.decoder_scheme() {
                PeScheme::Rel => Some(id(format!("dec.{l}.self.rel_bias"))?),
                _ => None,
            };
            dec.push(DecLayer {
                ln1: ln(&format!("dec.{l}.ln1"))?,
                attn: attn(&format!("dec.{l}.self"))?,
                rel,
                ln2: ln(&format!("dec.{l}.ln2"))?,
                cross: attn(&format!("dec.{l}.cross"))?,
                ln3: ln(&format!("dec.{l}.ln3"))?,
                ff: ff(&format!("dec.{l}.ff"))?,
            });
        }
        let slot = match cfg.head {
            HeadKind::Insertion => Some((id("slot.w".into())?, id("slot.b".into())?)),
            HeadKind::L2r => None,
        };
        let fpe = match cfg.decoder_scheme() {
            PeScheme::Fpe => Some(FpeIds {
                p_b: id("fpe.p_b".into())?,
                p_e: id("fpe.p_e".into())?,
                w: id("fpe.w".into())?,
                b: id("fpe.b".into())?,
            }),
            _ => None,
        };
        Ok(Ids {
            embed: id("embed.token".into())?,
            out_b: id("out.b".into())?,
            enc,
            enc_ln: ln("enc.ln")?,
            dec,
            dec_ln: ln("dec.ln")?,
            slot,
            fpe,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    ids: Ids,
}

impl Model {
    /// Freshly initialized parameters drawn from the `init` stream of
    /// `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (d, v) = (config.d_model, config.vocab_size);
        let mut r = rng::stream(config.seed, "init");
        let mut it = Init {
            store: ParamStore::new(),
            rng: &mut r,
        };
        let t = init::normal(it.rng, &[v, d], 0.02);
        it.add("embed.token".into(), t)?;
        it.add("out.b".into(), Tensor::zeros(&[v]))?;
        for l in 0..config.n_layers {
            it.ln(&format!("enc.{l}.ln1"), d)?;
            it.attn(&format!("enc.{l}.self"), d)?;
            it.ln(&format!("enc.{l}.ln2"), d)?;
            it.ff(&format!("enc.{l}.ff"), d, config.d_ff)?;
        }
        it.ln("enc.ln", d)?;
        for l in 0..config.n_layers {
            it.ln(&format!("dec.{l}.ln1"), d)?;
            it.attn(&format!("dec.{l}.self"), d)?;
            if config.decoder_scheme() == PeScheme::Rel {
                it.add(
                    format!("dec.{l}.self.rel_bias"),
                    Tensor::zeros(&[config.n_heads, REL_RELATIONS]),
                )?;
            }
            it.ln(&format!("dec.{l}.ln2"), d)?;
            it.attn(&format!("dec.{l}.cross"), d)?;
            it.ln(&format!("dec.{l}.ln3"), d)?;
            it.ff(&format!("dec.{l}.ff"), d, config.d_ff)?;
        }
        it.ln("dec.ln", d)?;
        if config.head == HeadKind::Insertion {
            it.linear("slot", "w", "b", 2 * d, d)?;
        }
        if config.decoder_scheme() == PeScheme::Fpe {
            let t = init::normal(it.rng, &[1, d], 0.02);
            it.add("fpe.p_b".into(), t)?;
            let t = init::normal(it.rng, &[1, d], 0.02);
            it.add("fpe.p_e".into(), t)?;
            let mut w = init::normal(it.rng, &[2 * d, d], 0.01);
            for i in 0..d {
                w.data_mut()[i * d + i] += 0.5;
                w.data_mut()[(d + i) * d + i] += 0.5;
            }
            it.add("fpe.w".into(), w)?;
            let t = init::normal(it.rng, &[d], 0.01);
            it.add("fpe.b".into(), t)?;
        }
        let params = it.store;
        let ids = Ids::resolve(&params, &config)?;
        Ok(Self {
            config,
            params,
            ids,
        })
    }

    /// Builds the architecture for `config` and loads `ckpt` into it.
    pub fn from_checkpoint(config: ModelConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut m = Self::new(config)?;
        m.load_checkpoint(ckpt)?;
        Ok(m)
    }

    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let expected = self.params.len();
        let found = ckpt
            .entries()
            .iter()
            .filter(|(n, _)| !n.starts_with("adam.") && !n.starts_with("train."))
            .count();
        if found != expected {
            return Err(Error::CheckpointMismatch(format!(
                "{found} parameters in checkpoint, model has {expected}"
            )));
        }
        self.params.load_checkpoint(ckpt)?;
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        self.params.to_checkpoint()
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    pub fn scheme(&self) -> PeScheme {
        self.config.decoder_scheme()
    }

    pub fn param_id(&self, name: &str) -> Result<ParamId> {
        Ok(self.params.id(name)?)
    }

    /// A fresh, empty position store seeded with this model's FPE parameters.
    pub fn fpe_state(&self) -> Option<FpeState> {
        let f = self.ids.fpe?;
        let p = &self.params;
        Some(FpeState::new(
            p.value(f.p_b).data().to_vec(),
            p.value(f.p_e).data().to_vec(),
            p.value(f.w).clone(),
            p.value(f.b).data().to_vec(),
        ))
    }

    fn check_tokens(&self, tokens: &[Token]) -> Result<()> {
        for &t in tokens {
            if t as usize >= self.config.vocab_size {
                return Err(Error::TokenOutOfRange {
                    token: t,
                    vocab: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }

    fn embed(&self, g: &mut Graph, tokens: &[Token]) -> Var {
        let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let e = g.param(self.ids.embed);
        let x = g.gather_rows(e, &idx);
        g.scale(x, (self.config.d_model as f64).sqrt())
    }

    fn self_attn_proj(&self, g: &mut Graph, xn: Var, a: &AttnIds) -> (Var, Var, Var) {
        let q = g.linear(xn, a.wq, a.bq);
        let k = g.linear(xn, a.wk, a.bk);
        let v = g.linear(xn, a.wv, a.bv);
        (q, k, v)
    }

    fn feed_forward(&self, g: &mut Graph, x: Var, ln: LnIds, ff: &FfIds, tag: &'static str) -> Var {
        let prev = g.set_tag_get(tag);
        let xn = g.layer_norm(x, ln.g, ln.b, LN_EPS);
        let h = g.linear(xn, ff.w1, ff.b1);
        let h = g.gelu(h);
        let o = g.linear(h, ff.w2, ff.b2);
        g.set_tag(prev);
        g.add(x, o)
    }

    /// Encodes a batch of sources, padded with PAD to the longest one.
    /// Padding keys are masked out.
    pub(crate) fn encode_graph(&self, g: &mut Graph, srcs: &[&[Token]]) -> Result<(Var, Vec<MemSpan>)> {
        if srcs.is_empty() {
            return Err(Error::Empty("source batch"));
        }
        for s in srcs {
            if s.is_empty() {
                return Err(Error::EmptySource);
            }
            self.check_tokens(s)?;
        }
        let d = self.config.d_model;
        let p = srcs.iter().map(|s| s.len()).max().unwrap();
        let mut tokens = Vec::with_capacity(srcs.len() * p);
        let mut spans = Vec::with_capacity(srcs.len());
        let mut blocks = Vec::with_capacity(srcs.len());
        for (b, s) in srcs.iter().enumerate() {
            tokens.extend_from_slice(s);
            tokens.extend(std::iter::repeat_n(PAD, p - s.len()));
            spans.push(MemSpan {
                start: b * p,
                rows: p,
                len: s.len(),
            });
            let mut blk = AttnBlock::dense(b * p, p, b * p, p);
            if s.len() < p {
                blk.mask = Some((0..p * p).map(|i| i % p < s.len()).collect());
            }
            blocks.push(blk);
        }
        let layout = AttnLayout { blocks };
        let prev = g.set_tag_get("encoder");
        let x = self.embed(g, &tokens);
        let pos = abs_rows((0..srcs.len()).flat_map(|_| 0..p), d)?;
        let pos = g.constant(pos);
        let mut x = g.add(x, pos);
        for layer in &self.ids.enc {
            let xn = g.layer_norm(x, layer.ln1.g, layer.ln1.b, LN_EPS);
            let (q, k, v) = self.self_attn_proj(g, xn, &layer.attn);
            let a = g.attention(q, k, v, self.config.n_heads, layout.clone(), None)?;
            let o = g.linear(a, layer.attn.wo, layer.attn.bo);
            x = g.add(x, o);
            x = self.feed_forward(g, x, layer.ln2, &layer.ff, "encoder");
        }
        let x = g.layer_norm(x, self.ids.enc_ln.g, self.ids.enc_ln.b, LN_EPS);
        g.set_tag(prev);
        Ok((x, spans))
    }

    pub(crate) fn cross_kv(&self, g: &mut Graph, states: Var, spans: Vec<MemSpan>) -> MemVars {
        let prev = g.set_tag_get("decoder_cross_attn");
        let mut k = Vec::new();
        let mut v = Vec::new();
        for layer in &self.ids.dec {
            k.push(g.linear(states, layer.cross.wk, layer.cross.bk));
            v.push(g.linear(states, layer.cross.wv, layer.cross.bv));
        }
        g.set_tag(prev);
        MemVars { k, v, spans }
    }

    /// Encodes a batch inside `g` (whose trace, if enabled, records the work).
    pub fn encode_in(&self, g: &mut Graph, srcs: &[&[Token]]) -> Result<Memory> {
        let (states, spans) = self.encode_graph(g, srcs)?;
        let mv = self.cross_kv(g, states, spans);
        Ok(Memory {
            states: g.value(states).clone(),
            spans: mv.spans,
            k: mv.k.iter().map(|&x| g.value(x).clone()).collect(),
            v: mv.v.iter().map(|&x| g.value(x).clone()).collect(),
        })
    }

    /// Encodes one source: memory states are `[len_src × d_model]`.
    pub fn encode(&self, src: &[Token]) -> Result<Memory> {
        let mut g = Graph::inference(&self.params);
        self.encode_in(&mut g, &[src])
    }

    /// Packed decoder over the new rows of every segment. `pos`, if any, is
    /// added to the scaled token embeddings.
    pub(crate) fn decoder_stack(
        &self,
        g: &mut Graph,
        tokens: &[Token],
        pos: Option<Var>,
        segments: &[Segment<'_>],
        mem: &MemVars,
    ) -> Result<DecoderOutput> {
        self.check_tokens(tokens)?;
        let total: usize = segments.iter().map(|s| s.new_rows).sum();
        assert_eq!(total, tokens.len(), "segments must cover every token row");
        let prev = g.set_tag_get("decoder_self_attn");
        let mut x = self.embed(g, tokens);
        if let Some(p) = pos {
            x = g.add(x, p);
        }

        // Per-segment masks and relations are the same in every layer.
        let mut q_starts = Vec::with_capacity(segments.len());
        let mut self_blocks = Vec::with_capacity(segments.len());
        let mut cross_blocks = Vec::with_capacity(segments.len());
        let mut any_past = false;
        let mut row = 0;
        let mut k_row = 0;
        for seg in segments {
            let n_past = seg.keys.len() - seg.new_rows;
            let past_len = seg.past.map_or(0, |c| c.len());
            assert_eq!(n_past, past_len, "cached rows and key metadata disagree");
            any_past |= n_past > 0;
            q_starts.push(row);
            if seg.new_rows > 0 {
                let queries = &seg.keys[n_past..];
                let mut blk = AttnBlock::dense(row, seg.new_rows, k_row, seg.keys.len());
                blk.mask = match seg.mask {
                    MaskSpec::Kind(MaskKind::Full) => None,
                    MaskSpec::Kind(kind) => Some(build_mask(queries, &seg.keys, kind)),
                    MaskSpec::Explicit(m) => {
                        let expected = seg.new_rows * seg.keys.len();
                        if m.len() != expected {
                            return Err(Error::MaskShape {
                                expected,
                                found: m.len(),
                            });
                        }
                        Some(m.to_vec())
                    }
                };
                if self.scheme() == PeScheme::Rel {
                    blk.relation = Some(
                        queries
                            .iter()
                            .flat_map(|q| {
                                seg.keys
                                    .iter()
                                    .map(move |k| rel_index(rel_relation(q.surface, k.surface)))
                            })
                            .collect(),
                    );
                }
                self_blocks.push(blk);
                let span = mem.spans[seg.mem];
                let mut cb = AttnBlock::dense(row, seg.new_rows, span.start, span.rows);
                if span.len < span.rows {
                    cb.mask = Some(
                        (0..seg.new_rows * span.rows)
                            .map(|i| i % span.rows < span.len)
                            .collect(),
                    );
                }
                cross_blocks.push(cb);
            }
            row += seg.new_rows;
            k_row += seg.keys.len();
        }
        let self_layout = AttnLayout { blocks: self_blocks };
        let cross_layout = AttnLayout {
            blocks: cross_blocks,
        };

        let mut new_k = Vec::with_capacity(self.ids.dec.len());
        let mut new_v = Vec::with_capacity(self.ids.dec.len());
        for (l, layer) in self.ids.dec.iter().enumerate() {
            g.set_tag("decoder_self_attn");
            let xn = g.layer_norm(x, layer.ln1.g, layer.ln1.b, LN_EPS);
            let (q, k, v) = self.self_attn_proj(g, xn, &layer.attn);
            new_k.push(k);
            new_v.push(v);
            let (k_all, v_all) = if any_past {
                let mut kp = Vec::new();
                let mut vp = Vec::new();
                for (seg, &start) in segments.iter().zip(&q_starts) {
                    if let Some(c) = seg.past.filter(|c| !c.is_empty()) {
                        let (ck, cv) = c.layer_tensors(l);
                        kp.push(g.constant(ck));
                        vp.push(g.constant(cv));
                    }
                    if seg.new_rows > 0 {
                        let idx: Vec<usize> = (start..start + seg.new_rows).collect();
                        kp.push(g.gather_rows(k, &idx));
                        vp.push(g.gather_rows(v, &idx));
                    }
                }
                (g.concat_rows(&kp), g.concat_rows(&vp))
            } else {
                (k, v)
            };
            let bias = layer.rel.map(|id| g.param(id));
            let a = g.attention(q, k_all, v_all, self.config.n_heads, self_layout.clone(), bias)?;
            let o = g.linear(a, layer.attn.wo, layer.attn.bo);
            x = g.add(x, o);

            g.set_tag("decoder_cross_attn");
            let xn = g.layer_norm(x, layer.ln2.g, layer.ln2.b, LN_EPS);
            let q = g.linear(xn, layer.cross.wq, layer.cross.bq);
            let a = g.attention(q, mem.k[l], mem.v[l], self.config.n_heads, cross_layout.clone(), None)?;
            let o = g.linear(a, layer.cross.wo, layer.cross.bo);
            x = g.add(x, o);

            x = self.feed_forward(g, x, layer.ln3, &layer.ff, "feed_forward");
        }
        let hidden = g.layer_norm(x, self.ids.dec_ln.g, self.ids.dec_ln.b, LN_EPS);
        g.set_tag(prev);
        Ok(DecoderOutput {
            hidden,
            k: new_k,
            v: new_v,
        })
    }

    /// Slot log-probabilities for the given `(left row, right row)` pairs.
    pub(crate) fn slot_head(&self, g: &mut Graph, hidden: Var, pairs: &[(usize, usize)]) -> Result<Var> {
        let (w, b) = self.ids.slot.ok_or(Error::WrongHead("insertion"))?;
        let prev = g.set_tag_get("heads");
        let left: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let right: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let l = g.gather_rows(hidden, &left);
        let r = g.gather_rows(hidden, &right);
        let s = g.concat_cols(l, r);
        let s = g.linear(s, w, b);
        let out = self.project(g, s);
        g.set_tag(prev);
        Ok(out)
    }

    /// Next-token log-probabilities for every row of `hidden`.
    pub(crate) fn next_token_head(&self, g: &mut Graph, hidden: Var) -> Result<Var> {
        if self.config.head != HeadKind::L2r {
            return Err(Error::WrongHead("l2r"));
        }
        let prev = g.set_tag_get("heads");
        let out = self.project(g, hidden);
        g.set_tag(prev);
        Ok(out)
    }

    fn project(&self, g: &mut Graph, x: Var) -> Var {
        let e = g.param(self.ids.embed);
        let logits = g.matmul_bt(x, e);
        let ob = g.param(self.ids.out_b);
        let logits = g.add_row(logits, ob);
        g.log_softmax(logits)
    }

    /// Positional rows for a boundary-extended hypothesis in surface order.
    pub(crate) fn hypothesis_positions(
        &self,
        g: &mut Graph,
        hyp: &Hypothesis,
        fpe: Option<&FpeState>,
    ) -> Result<Option<Var>> {
        let d = self.config.d_model;
        let n = hyp.len();
        Ok(match self.scheme() {
            PeScheme::Abs => Some(g.constant(abs_rows(0..n + 2, d)?)),
            PeScheme::Rel => None,
            PeScheme::Fpe => {
                let fpe = fpe.ok_or_else(|| Error::Config("FPE decoding needs a position store".into()))?;
                let mut data = Vec::with_capacity((n + 2) * d);
                data.extend_from_slice(fpe.embedding(crate::posenc::PosRef::Begin)?);
                for &c in &hyp.created {
                    data.extend_from_slice(fpe.embedding(crate::posenc::PosRef::Node(c))?);
                }
                data.extend_from_slice(fpe.embedding(crate::posenc::PosRef::End)?);
                Some(g.constant(Tensor::matrix(n + 2, d, data)))
            }
        })
    }

    fn hyp_tokens(hyp: &Hypothesis) -> Vec<Token> {
        let mut t = Vec::with_capacity(hyp.len() + 2);
        t.push(BOS);
        t.extend_from_slice(&hyp.tokens);
        t.push(EOS);
        t
    }

    /// Full decoder forward over the boundary-extended hypothesis. `mask` is
    /// row-major `(n+2)²` in surface order; the result has `n + 2` rows.
    pub fn decoder_forward(
        &self,
        hyp: &Hypothesis,
        fpe: Option<&FpeState>,
        memory: &Memory,
        mask: &[bool],
    ) -> Result<Tensor> {
        let mut g = Graph::inference(&self.params);
        let h = self.decoder_forward_in(&mut g, hyp, fpe, memory, MaskSpec::Explicit(mask))?;
        Ok(g.value(h).clone())
    }

    pub(crate) fn decoder_forward_in(
        &self,
        g: &mut Graph,
        hyp: &Hypothesis,
        fpe: Option<&FpeState>,
        memory: &Memory,
        mask: MaskSpec<'_>,
    ) -> Result<Var> {
        if self.config.head != HeadKind::Insertion {
            return Err(Error::WrongHead("insertion"));
        }
        let n = hyp.len();
        if let MaskSpec::Explicit(m) = mask {
            if m.len() != (n + 2) * (n + 2) {
                return Err(Error::MaskShape {
                    expected: (n + 2) * (n + 2),
                    found: m.len(),
                });
            }
        }
        let pos = self.hypothesis_positions(g, hyp, fpe)?;
        let mv = memory.vars(g);
        let seg = Segment {
            new_rows: n + 2,
            keys: hyp.row_meta(),
            past: None,
            mask,
            mem: 0,
        };
        let out = self.decoder_stack(g, &Self::hyp_tokens(hyp), pos, &[seg], &mv)?;
        Ok(out.hidden)
    }

    /// Slot distributions from `n + 2` surface-ordered hidden rows.
    pub fn slot_logits(&self, hidden: &Tensor) -> Result<SlotPrediction> {
        let mut g = Graph::inference(&self.params);
        let h = g.constant(hidden.clone());
        let rows = hidden.rows();
        if rows < 2 {
            return Err(Error::Empty("hidden rows"));
        }
        let pairs: Vec<(usize, usize)> = (0..rows - 1).map(|s| (s, s + 1)).collect();
        let lp = self.slot_head(&mut g, h, &pairs)?;
        Ok(SlotPrediction {
            logp: g.value(lp).clone(),
        })
    }

    /// Causal forward of an L2R model over `BOS, prefix…`; row `i` is the
    /// distribution of the token after position `i`.
    pub fn l2r_logits(&self, prefix: &[Token], memory: &Memory) -> Result<Tensor> {
        let mut g = Graph::inference(&self.params);
        let lp = self.l2r_forward_in(&mut g, prefix, memory)?;
        Ok(g.value(lp).clone())
    }

    pub(crate) fn l2r_forward_in(&self, g: &mut Graph, prefix: &[Token], memory: &Memory) -> Result<Var> {
        if self.config.head != HeadKind::L2r {
            return Err(Error::WrongHead("l2r"));
        }
        let mv = memory.vars(g);
        let (tokens, pos, seg) = self.l2r_rows(g, prefix, 0)?;
        let out = self.decoder_stack(g, &tokens, Some(pos), &[seg], &mv)?;
        self.next_token_head(g, out.hidden)
    }

    pub(crate) fn l2r_rows(
        &self,
        g: &mut Graph,
        prefix: &[Token],
        mem: usize,
    ) -> Result<(Vec<Token>, Var, Segment<'static>)> {
        let mut tokens = Vec::with_capacity(prefix.len() + 1);
        tokens.push(BOS);
        tokens.extend_from_slice(prefix);
        let pos = g.constant(abs_rows(0..tokens.len(), self.config.d_model)?);
        let keys = (0..tokens.len())
            .map(|i| RowMeta { step: i, surface: i })
            .collect();
        let seg = Segment {
            new_rows: tokens.len(),
            keys,
            past: None,
            mask: MaskSpec::Kind(MaskKind::GenerationOrder),
            mem,
        };
        Ok((tokens, pos, seg))
    }

    /// Differentiable FPE rows for balanced-tree snapshots of the given
    /// sizes. For each size `n` the output has `n + 2` rows: `p_B`, the
    /// tokens in surface order, `p_E`. Also returns each token's depth.
    pub(crate) fn fpe_snapshot_rows(&self, g: &mut Graph, sizes: &[usize]) -> Result<(Var, Vec<Vec<usize>>)> {
        let f = self.ids.fpe.ok_or(Error::Config("model has no FPE parameters".into()))?;
        let prev = g.set_tag_get("fpe_linear");
        let pb = g.param(f.p_b);
        let pe = g.param(f.p_e);
        let mut table = g.concat_rows(&[pb, pe]);
        let mut table_len = 2;
        let plans: Vec<_> = sizes.iter().map(|&n| snapshot_plan(n)).collect();
        let mut where_: Vec<Vec<usize>> = sizes.iter().map(|&n| vec![0; n]).collect();
        let mut depths: Vec<Vec<usize>> = sizes.iter().map(|&n| vec![0; n]).collect();
        let max_depth = plans.iter().flatten().map(|p| p.depth).max().unwrap_or(0);
        for depth in 1..=max_depth {
            let mut left = Vec::new();
            let mut right = Vec::new();
            let mut owners = Vec::new();
            for (b, plan) in plans.iter().enumerate() {
                for node in plan.iter().filter(|n| n.depth == depth) {
                    let resolve = |bd: Boundary| match bd {
                        Boundary::Begin => 0,
                        Boundary::End => 1,
                        Boundary::Token(t) => where_[b][t],
                    };
                    left.push(resolve(node.left));
                    right.push(resolve(node.right));
                    owners.push((b, node.token));
                }
            }
            let l = g.gather_rows(table, &left);
            let r = g.gather_rows(table, &right);
            let x = g.concat_cols(l, r);
            let y = g.linear(x, f.w, f.b);
            for (i, &(b, t)) in owners.iter().enumerate() {
                where_[b][t] = table_len + i;
                depths[b][t] = depth;
            }
            table_len += owners.len();
            table = g.concat_rows(&[table, y]);
        }
        let mut idx = Vec::new();
        for w in &where_ {
            idx.push(0);
            idx.extend_from_slice(w);
            idx.push(1);
        }
        let rows = g.gather_rows(table, &idx);
        g.set_tag(prev);
        Ok((rows, depths))
    }
}

/// Extension trait so layer helpers can restore the caller's component tag.
trait TagExt {
    fn set_tag_get(&mut self, tag: &'static str) -> &'static str;
}

impl TagExt for Graph<'_> {
    fn set_tag_get(&mut self, tag: &'static str) -> &'static str {
        let prev = self.tag();
        self.set_tag(tag);
        prev
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(scheme: PeScheme, head: HeadKind) -> Model {
        Model::new(ModelConfig {
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 12,
            pe_scheme: scheme,
            head,
            seed: 7,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let c = ModelConfig {
            n_heads: 3,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
        let c = ModelConfig {
            vocab_size: 4,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn encode_is_deterministic_and_position_sensitive() {
        let m = small(PeScheme::Fpe, HeadKind::Insertion);
        let a = m.encode(&[5, 6]).unwrap();
        let b = m.encode(&[5, 6]).unwrap();
        assert_eq!(a.states, b.states);
        assert_eq!(a.instance(0).shape(), &[2, 8]);
        let c = m.encode(&[6, 5]).unwrap();
        assert!(a.states.max_abs_diff(&c.states) > 1e-6);
        assert!(matches!(m.encode(&[]), Err(Error::EmptySource)));
        assert!(matches!(m.encode(&[40]), Err(Error::TokenOutOfRange { .. })));
    }

    #[test]
    fn padding_does_not_change_memory() {
        let m = small(PeScheme::Rel, HeadKind::Insertion);
        let alone = m.encode(&[5, 6]).unwrap();
        let mut g = Graph::inference(&m.params);
        let both = m.encode_in(&mut g, &[&[5, 6], &[7, 8, 9, 10]]).unwrap();
        assert_eq!(both.instance(0), alone.instance(0));
    }

    #[test]
    fn slot_counts() {
        let m = small(PeScheme::Fpe, HeadKind::Insertion);
        let mem = m.encode(&[5, 6, 7]).unwrap();
        let mut fpe = m.fpe_state().unwrap();
        let empty = Hypothesis::new();
        let h = m
            .decoder_forward(&empty, Some(&fpe), &mem, &empty.mask(MaskKind::Full))
            .unwrap();
        assert_eq!(h.rows(), 2);
        assert_eq!(m.slot_logits(&h).unwrap().num_slots(), 1);
        let ids = fpe.embed_snapshot(3);
        let hyp = Hypothesis {
            tokens: vec![5, 6, 7],
            steps: vec![2, 1, 2],
            created: ids,
        };
        let h = m
            .decoder_forward(&hyp, Some(&fpe), &mem, &hyp.mask(MaskKind::GenerationOrder))
            .unwrap();
        assert_eq!(h.rows(), 5);
        let sp = m.slot_logits(&h).unwrap();
        assert_eq!(sp.num_slots(), 4);
        for s in 0..4 {
            assert!(substrate::graph::logsumexp(sp.slot(s)).abs() < 1e-9);
        }
        assert!(matches!(
            m.decoder_forward(&hyp, Some(&fpe), &mem, &[true; 3]),
            Err(Error::MaskShape { .. })
        ));
    }

    #[test]
    fn full_and_generation_order_masks_differ() {
        let m = small(PeScheme::Rel, HeadKind::Insertion);
        let mem = m.encode(&[5, 6, 7]).unwrap();
        let hyp = Hypothesis::from_parts(vec![5, 6, 7], vec![2, 1, 3]);
        let full = m.decoder_forward(&hyp, None, &mem, &hyp.mask(MaskKind::Full)).unwrap();
        let gen = m
            .decoder_forward(&hyp, None, &mem, &hyp.mask(MaskKind::GenerationOrder))
            .unwrap();
        assert!(full.max_abs_diff(&gen) > 1e-6);
    }

    #[test]
    fn l2r_rows_are_causal() {
        let m = small(PeScheme::Abs, HeadKind::L2r);
        let mem = m.encode(&[5, 6, 7]).unwrap();
        let a = m.l2r_logits(&[5], &mem).unwrap();
        let b = m.l2r_logits(&[5, 9], &mem).unwrap();
        assert_eq!(m.l2r_logits(&[], &mem).unwrap().rows(), 1);
        for i in 0..a.rows() {
            for (x, y) in a.row(i).iter().zip(b.row(i)) {
                assert!((x - y).abs() <= 1e-12);
            }
            let total: f64 = a.row(i).iter().map(|v| v.exp()).sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn snapshot_rows_match_position_store() {
        let m = small(PeScheme::Fpe, HeadKind::Insertion);
        let mut g = Graph::inference(&m.params);
        let (rows, depths) = m.fpe_snapshot_rows(&mut g, &[3, 6]).unwrap();
        let rows = g.value(rows).clone();
        assert_eq!(rows.rows(), 5 + 8);
        assert_eq!(depths[0], vec![2, 1, 2]);
        let mut fpe = m.fpe_state().unwrap();
        let ids = fpe.embed_snapshot(6);
        for (t, &id) in ids.iter().enumerate() {
            let want = &fpe.node(id).unwrap().embedding;
            for (x, y) in rows.row(5 + 1 + t).iter().zip(want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wrong_head_is_rejected() {
        let m = small(PeScheme::Abs, HeadKind::L2r);
        let mem = m.encode(&[5]).unwrap();
        let h = Hypothesis::new();
        assert!(matches!(
            m.decoder_forward(&h, None, &mem, &h.mask(MaskKind::Full)),
            Err(Error::WrongHead(_))
        ));
    }
}
