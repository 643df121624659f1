//! Decoding engines.
//!
//! Insertion decoding fills every slot of the hypothesis in parallel until
//! all slots choose END_OF_SLOT. In recompute mode each step runs the whole
//! decoder over the current hypothesis. In incremental mode only rows
//! created in the previous step go through the decoder; their keys and
//! values are appended to a [`DecoderCache`] and never recomputed. Under the
//! generation-order mask this gives the same hidden states as recomputing,
//! because a row only ever attends to rows created no later than itself.
//!
//! L2R decoding is beam search with a per-beam cache.
//!
//! Several instances decode together as one packed batch; a finished
//! instance is frozen and drops out of later steps.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use substrate::{Graph, MatmulRecord, Tensor};

use crate::error::{Error, Result};
use crate::flops::{count_flops, FlopsReport};
use crate::model::{DecoderCache, HeadKind, Hypothesis, MaskKind, MaskSpec, Memory, Model, RowMeta, Segment};
use crate::posenc::{abs_encoding, FpeState, PeScheme, PosRef};
use crate::vocab::{is_reserved, Token, BOS, END_OF_SLOT, EOS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Recompute,
    Incremental,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Recompute => "recompute",
            Mode::Incremental => "incremental",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recompute" => Ok(Mode::Recompute),
            "incremental" => Ok(Mode::Incremental),
            other => Err(Error::Config(format!("unknown decode mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOptions {
    pub mode: Mode,
    /// Subtracted from the END_OF_SLOT log-probability before the argmax.
    pub eos_penalty: f64,
    pub max_len: usize,
    pub max_steps: usize,
    pub mask: MaskKind,
    pub beam_size: usize,
    /// Record matmul shapes and report FLOPs.
    pub trace: bool,
    /// Keep every step's slot log-probabilities.
    pub record_slots: bool,
}

impl DecodeOptions {
    /// Incremental whenever the model allows it, recompute otherwise.
    pub fn for_model(model: &Model) -> Self {
        let mask = model.config.mask_kind();
        let reusable = model.config.head == HeadKind::L2r
            || (model.scheme().permits_reuse() && mask == MaskKind::GenerationOrder);
        let max_len = model.config.max_len;
        Self {
            mode: if reusable { Mode::Incremental } else { Mode::Recompute },
            eos_penalty: 0.0,
            max_len,
            max_steps: max_len + 2,
            mask,
            beam_size: 1,
            trace: false,
            record_slots: false,
        }
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }
}

#[derive(Clone, Debug)]
pub struct DecodeResult {
    pub tokens: Vec<Token>,
    /// Insertion step of each output token (position index for L2R).
    pub token_steps: Vec<usize>,
    pub n_steps: usize,
    pub out_len: usize,
    /// Batch wall time divided by batch size.
    pub wall_time: Duration,
    pub flops: Option<FlopsReport>,
    pub mode: Mode,
    /// Stopped because the output reached `max_len`.
    pub truncated: bool,
    /// Stopped because `max_steps` ran out.
    pub exhausted: bool,
    /// Slot log-probabilities of every step, if requested.
    pub step_slots: Vec<Tensor>,
    /// Sum of chosen log-probabilities (L2R only).
    pub log_prob: f64,
    /// Final position store (FPE only).
    pub fpe: Option<FpeState>,
}

/// Chooses, for every slot, a token to insert or nothing.
pub trait SlotPolicy {
    /// `logp` has one row per slot of `hyp`; `instance` indexes the batch.
    fn choose(&mut self, instance: usize, hyp: &Hypothesis, logp: &Tensor, eos_penalty: f64) -> Vec<Option<Token>>;
}

/// Argmax over END_OF_SLOT and the content ids, END_OF_SLOT penalized by β.
/// Ties go to the lower id.
pub fn greedy_slot_choice(row: &[f64], eos_penalty: f64) -> Option<Token> {
    let mut best = (END_OF_SLOT, row[END_OF_SLOT as usize] - eos_penalty);
    for (v, &lp) in row.iter().enumerate() {
        let v = v as Token;
        if !is_reserved(v) && lp > best.1 {
            best = (v, lp);
        }
    }
    (best.0 != END_OF_SLOT).then_some(best.0)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Greedy;

impl SlotPolicy for Greedy {
    fn choose(&mut self, _: usize, _: &Hypothesis, logp: &Tensor, eos_penalty: f64) -> Vec<Option<Token>> {
        (0..logp.rows())
            .map(|s| greedy_slot_choice(logp.row(s), eos_penalty))
            .collect()
    }
}

/// Ignores the model and inserts the middle token of each slot's missing
/// target span, producing the balanced-tree order.
#[derive(Clone, Debug)]
pub struct BalancedOracle {
    targets: Vec<Vec<Token>>,
    /// Per instance, the target index of each created token.
    index: Vec<Vec<usize>>,
}

impl BalancedOracle {
    pub fn new(targets: Vec<Vec<Token>>) -> Self {
        let index = vec![Vec::new(); targets.len()];
        Self { targets, index }
    }
}

impl SlotPolicy for BalancedOracle {
    fn choose(&mut self, instance: usize, hyp: &Hypothesis, _: &Tensor, _: f64) -> Vec<Option<Token>> {
        let t = &self.targets[instance];
        let index = &mut self.index[instance];
        let n = hyp.len();
        let at = |s: usize| index[hyp.created[s]];
        let mut out = Vec::with_capacity(n + 1);
        let mut fresh = Vec::new();
        for s in 0..=n {
            let lo = if s == 0 { 0 } else { at(s - 1) + 1 };
            let hi = if s == n { t.len() } else { at(s) };
            if lo < hi {
                let mid = lo + (hi - lo) / 2;
                fresh.push(mid);
                out.push(Some(t[mid]));
            } else {
                out.push(None);
            }
        }
        index.extend(fresh);
        out
    }
}

/// Rows of the decoder cache: BOS, EOS, then tokens by creation index.
fn cache_row(created: usize) -> usize {
    created + 2
}

struct InsertionState {
    hyp: Hypothesis,
    fpe: Option<FpeState>,
    cache: Option<DecoderCache>,
    /// Created ids not yet in the cache.
    pending: Vec<usize>,
    slot_memo: HashMap<(usize, usize), Vec<f64>>,
    n_steps: usize,
    done: bool,
    truncated: bool,
    exhausted: bool,
    step_slots: Vec<Tensor>,
}

fn position_row(model: &Model, st: &InsertionState, r: PosRef, surface: usize, out: &mut Vec<f64>) -> Result<()> {
    match model.scheme() {
        PeScheme::Abs => out.extend(abs_encoding(surface, model.d_model())?),
        PeScheme::Rel => {}
        PeScheme::Fpe => out.extend_from_slice(st.fpe.as_ref().expect("FPE state").embedding(r)?),
    }
    Ok(())
}

fn check_insertion_options(model: &Model, opts: &DecodeOptions) -> Result<()> {
    if model.config.head != HeadKind::Insertion {
        return Err(Error::WrongHead("insertion"));
    }
    if opts.mode == Mode::Incremental {
        if !model.scheme().permits_reuse() {
            return Err(Error::AbsIncremental);
        }
        if opts.mask != MaskKind::GenerationOrder {
            return Err(Error::Config("incremental decoding needs the generation-order mask".into()));
        }
    }
    Ok(())
}

/// Runs one packed batch of insertion decodes to completion.
pub fn decode_insertion_batch(
    model: &Model,
    srcs: &[&[Token]],
    opts: &DecodeOptions,
    policy: &mut dyn SlotPolicy,
) -> Result<Vec<DecodeResult>> {
    check_insertion_options(model, opts)?;
    let start = Instant::now();
    let d = model.d_model();
    let mut trace: Vec<MatmulRecord> = Vec::new();

    let memory = {
        let mut g = Graph::inference(&model.params);
        if opts.trace {
            g.enable_trace();
        }
        let m = model.encode_in(&mut g, srcs)?;
        trace.extend(g.take_trace());
        m
    };

    let mut states: Vec<InsertionState> = srcs
        .iter()
        .map(|_| InsertionState {
            hyp: Hypothesis::new(),
            fpe: model.fpe_state(),
            cache: (opts.mode == Mode::Incremental).then(|| DecoderCache::new(model.n_layers(), d)),
            pending: Vec::new(),
            slot_memo: HashMap::new(),
            n_steps: 0,
            done: false,
            truncated: false,
            exhausted: false,
            step_slots: Vec::new(),
        })
        .collect();

    let mut it = 0;
    while states.iter().any(|s| !s.done) {
        it += 1;
        let active: Vec<usize> = (0..states.len()).filter(|&i| !states[i].done).collect();
        let mut g = Graph::inference(&model.params);
        if opts.trace {
            g.enable_trace();
        }
        g.set_step(it);
        let preds = match opts.mode {
            Mode::Recompute => recompute_step(model, &mut g, &memory, &states, &active, opts.mask)?,
            Mode::Incremental => incremental_step(model, &mut g, &memory, &mut states, &active)?,
        };
        trace.extend(g.take_trace());
        drop(g);

        for (&i, logp) in active.iter().zip(preds) {
            let st = &mut states[i];
            st.n_steps = it;
            let choices = policy.choose(i, &st.hyp, &logp, opts.eos_penalty);
            if opts.record_slots {
                st.step_slots.push(logp);
            }
            let inserted = apply_insertions(st, &choices, it, opts.max_len)?;
            if inserted > 0 && model.scheme() == PeScheme::Fpe && opts.trace {
                trace.push(MatmulRecord {
                    tag: "fpe_linear",
                    step: it,
                    m: inserted,
                    k: 2 * d,
                    n: d,
                });
            }
            if inserted == 0 || st.truncated {
                st.done = true;
            } else if it >= opts.max_steps {
                st.done = true;
                st.exhausted = true;
            }
        }
    }

    let n = srcs.len();
    let wall = start.elapsed() / n as u32;
    let flops = opts.trace.then(|| count_flops(&trace).per_instance(n));
    Ok(states
        .into_iter()
        .map(|st| DecodeResult {
            out_len: st.hyp.len(),
            token_steps: st.hyp.steps.clone(),
            tokens: st.hyp.tokens,
            n_steps: st.n_steps,
            wall_time: wall,
            flops: flops.clone(),
            mode: opts.mode,
            truncated: st.truncated,
            exhausted: st.exhausted,
            step_slots: st.step_slots,
            log_prob: 0.0,
            fpe: st.fpe,
        })
        .collect())
}

/// Inserts the chosen tokens simultaneously; returns how many went in.
fn apply_insertions(st: &mut InsertionState, choices: &[Option<Token>], step: usize, max_len: usize) -> Result<usize> {
    let old = std::mem::take(&mut st.hyp);
    let n = old.len();
    assert_eq!(choices.len(), n + 1, "one choice per slot");
    let mut next_id = n;
    let mut room = max_len.saturating_sub(n);
    let mut hyp = Hypothesis {
        tokens: Vec::with_capacity(n + choices.len()),
        steps: Vec::with_capacity(n + choices.len()),
        created: Vec::with_capacity(n + choices.len()),
    };
    let mut inserted = 0;
    for (s, choice) in choices.iter().enumerate() {
        if let Some(tok) = *choice {
            if room == 0 {
                st.truncated = true;
            } else {
                if let Some(fpe) = st.fpe.as_mut() {
                    let left = if s == 0 { PosRef::Begin } else { PosRef::Node(old.created[s - 1]) };
                    let right = if s == n { PosRef::End } else { PosRef::Node(old.created[s]) };
                    let id = fpe.insert(left, right, step)?;
                    debug_assert_eq!(id, next_id);
                }
                hyp.tokens.push(tok);
                hyp.steps.push(step);
                hyp.created.push(next_id);
                st.pending.push(next_id);
                next_id += 1;
                room -= 1;
                inserted += 1;
            }
        }
        if s < n {
            hyp.tokens.push(old.tokens[s]);
            hyp.steps.push(old.steps[s]);
            hyp.created.push(old.created[s]);
        }
    }
    st.hyp = hyp;
    Ok(inserted)
}

fn recompute_step(
    model: &Model,
    g: &mut Graph,
    memory: &Memory,
    states: &[InsertionState],
    active: &[usize],
    mask: MaskKind,
) -> Result<Vec<Tensor>> {
    let mem = memory.vars(g);
    let mut tokens = Vec::new();
    let mut pos = Vec::new();
    let mut segments = Vec::with_capacity(active.len());
    let mut pairs = Vec::new();
    let mut row = 0;
    for &i in active {
        let st = &states[i];
        let n = st.hyp.len();
        tokens.push(BOS);
        tokens.extend_from_slice(&st.hyp.tokens);
        tokens.push(EOS);
        position_row(model, st, PosRef::Begin, 0, &mut pos)?;
        for (j, &c) in st.hyp.created.iter().enumerate() {
            position_row(model, st, PosRef::Node(c), j + 1, &mut pos)?;
        }
        position_row(model, st, PosRef::End, n + 1, &mut pos)?;
        segments.push(Segment {
            new_rows: n + 2,
            keys: st.hyp.row_meta(),
            past: None,
            mask: MaskSpec::Kind(mask),
            mem: i,
        });
        pairs.extend((0..=n).map(|s| (row + s, row + s + 1)));
        row += n + 2;
    }
    let pos = (!pos.is_empty()).then(|| g.constant(Tensor::matrix(row, model.d_model(), pos)));
    let out = model.decoder_stack(g, &tokens, pos, &segments, &mem)?;
    let logp = model.slot_head(g, out.hidden, &pairs)?;
    let lp = g.value(logp);
    let mut preds = Vec::with_capacity(active.len());
    let mut s0 = 0;
    for &i in active {
        let slots = states[i].hyp.len() + 1;
        preds.push(lp.select_rows(&(s0..s0 + slots).collect::<Vec<_>>()));
        s0 += slots;
    }
    Ok(preds)
}

/// Creation-ordered metadata of every cache row plus the pending rows.
fn incremental_keys(st: &InsertionState) -> (Vec<RowMeta>, Vec<(Token, PosRef, RowMeta)>) {
    let n = st.hyp.len();
    let total = n + 2;
    let mut meta = vec![RowMeta { step: 0, surface: 0 }; total];
    let mut info: Vec<(Token, PosRef)> = vec![(BOS, PosRef::Begin); total];
    meta[1] = RowMeta {
        step: 0,
        surface: n + 1,
    };
    info[1] = (EOS, PosRef::End);
    for (j, &c) in st.hyp.created.iter().enumerate() {
        meta[cache_row(c)] = RowMeta {
            step: st.hyp.steps[j],
            surface: j + 1,
        };
        info[cache_row(c)] = (st.hyp.tokens[j], PosRef::Node(c));
    }
    let cached = st.cache.as_ref().map_or(0, |c| c.len());
    let new: Vec<(Token, PosRef, RowMeta)> = (cached..total).map(|r| (info[r].0, info[r].1, meta[r])).collect();
    (meta, new)
}

fn incremental_step(
    model: &Model,
    g: &mut Graph,
    memory: &Memory,
    states: &mut [InsertionState],
    active: &[usize],
) -> Result<Vec<Tensor>> {
    let d = model.d_model();
    let mem = memory.vars(g);
    let mut tokens = Vec::new();
    let mut pos = Vec::new();
    let mut new_counts = Vec::with_capacity(active.len());
    let mut metas = Vec::with_capacity(active.len());
    for &i in active {
        let st = &states[i];
        let (keys, new) = incremental_keys(st);
        for &(tok, r, m) in &new {
            tokens.push(tok);
            position_row(model, st, r, m.surface, &mut pos)?;
        }
        new_counts.push(new.len());
        metas.push(keys);
    }
    let rows = tokens.len();
    let out = {
        let segments: Vec<Segment> = active
            .iter()
            .zip(metas)
            .zip(&new_counts)
            .map(|((&i, keys), &k)| Segment {
                new_rows: k,
                keys,
                past: states[i].cache.as_ref(),
                mask: MaskSpec::Kind(MaskKind::GenerationOrder),
                mem: i,
            })
            .collect();
        let pos = (!pos.is_empty()).then(|| g.constant(Tensor::matrix(rows, d, pos)));
        model.decoder_stack(g, &tokens, pos, &segments, &mem)?
    };

    // Freeze the new rows.
    let hidden = g.value(out.hidden).clone();
    let ks: Vec<Tensor> = out.k.iter().map(|&v| g.value(v).clone()).collect();
    let vs: Vec<Tensor> = out.v.iter().map(|&v| g.value(v).clone()).collect();
    let mut r0 = 0;
    for (&i, &k) in active.iter().zip(&new_counts) {
        let range = r0 * d..(r0 + k) * d;
        let kk: Vec<&[f64]> = ks.iter().map(|t| &t.data()[range.clone()]).collect();
        let vv: Vec<&[f64]> = vs.iter().map(|t| &t.data()[range.clone()]).collect();
        let st = &mut states[i];
        let (keys, _) = incremental_keys(st);
        let cache = st.cache.as_mut().expect("incremental cache");
        let steps: Vec<usize> = keys[cache.len()..cache.len() + k].iter().map(|m| m.step).collect();
        cache.append(&kk, &vv, &hidden.data()[range.clone()], &steps);
        st.pending.clear();
        r0 += k;
    }

    // Slots whose two boundary rows are unchanged keep their prediction.
    let mut needed: Vec<(usize, usize, usize)> = Vec::new();
    let mut h_rows = Vec::new();
    for &i in active {
        let st = &states[i];
        let cache = st.cache.as_ref().unwrap();
        for (l, r) in surface_pairs(&st.hyp) {
            if !st.slot_memo.contains_key(&(l, r)) {
                needed.push((i, l, r));
                h_rows.extend_from_slice(cache.hidden(l));
                h_rows.extend_from_slice(cache.hidden(r));
            }
        }
    }
    if !needed.is_empty() {
        let h = g.constant(Tensor::matrix(2 * needed.len(), d, h_rows));
        let pairs: Vec<(usize, usize)> = (0..needed.len()).map(|j| (2 * j, 2 * j + 1)).collect();
        let logp = model.slot_head(g, h, &pairs)?;
        let lp = g.value(logp);
        for (j, &(i, l, r)) in needed.iter().enumerate() {
            states[i].slot_memo.insert((l, r), lp.row(j).to_vec());
        }
    }
    let v = model.config.vocab_size;
    Ok(active
        .iter()
        .map(|&i| {
            let st = &states[i];
            let pairs = surface_pairs(&st.hyp);
            let mut data = Vec::with_capacity(pairs.len() * v);
            for p in &pairs {
                data.extend_from_slice(&st.slot_memo[p]);
            }
            Tensor::matrix(pairs.len(), v, data)
        })
        .collect())
}

/// Cache-row pairs bounding each slot, in surface order.
fn surface_pairs(hyp: &Hypothesis) -> Vec<(usize, usize)> {
    let mut rows = Vec::with_capacity(hyp.len() + 2);
    rows.push(0);
    rows.extend(hyp.created.iter().map(|&c| cache_row(c)));
    rows.push(1);
    rows.windows(2).map(|w| (w[0], w[1])).collect()
}

/// Extends `cache` with the decoder rows of `new` (tokens with their
/// positional input and metadata), attending to the cached rows plus the
/// new rows under the generation-order mask. Cached rows are untouched.
pub fn extend_cache(
    model: &Model,
    cache: &mut DecoderCache,
    cached_meta: &[RowMeta],
    new: &[(Token, RowMeta)],
    positions: Option<&[Vec<f64>]>,
    memory: &Memory,
) -> Result<()> {
    if model.scheme() == PeScheme::Abs && model.config.head == HeadKind::Insertion {
        return Err(Error::AbsIncremental);
    }
    if new.is_empty() {
        return Ok(());
    }
    assert_eq!(cached_meta.len(), cache.len(), "metadata for every cached row");
    let d = model.d_model();
    let mut g = Graph::inference(&model.params);
    let mem = memory.vars(&mut g);
    let tokens: Vec<Token> = new.iter().map(|t| t.0).collect();
    let mut keys = cached_meta.to_vec();
    keys.extend(new.iter().map(|t| t.1));
    let pos = positions.map(|p| {
        let data: Vec<f64> = p.iter().flatten().copied().collect();
        g.constant(Tensor::matrix(new.len(), d, data))
    });
    let seg = Segment {
        new_rows: new.len(),
        keys,
        past: Some(cache),
        mask: MaskSpec::Kind(MaskKind::GenerationOrder),
        mem: 0,
    };
    let out = model.decoder_stack(&mut g, &tokens, pos, &[seg], &mem)?;
    let k: Vec<&[f64]> = out.k.iter().map(|&v| g.value(v).data()).collect();
    let v: Vec<&[f64]> = out.v.iter().map(|&x| g.value(x).data()).collect();
    let steps: Vec<usize> = new.iter().map(|t| t.1.step).collect();
    cache.append(&k, &v, g.value(out.hidden).data(), &steps);
    Ok(())
}

/// One live beam: output so far, cumulative log-probability, scorer state.
#[derive(Clone, Debug)]
pub struct Beam<S> {
    pub tokens: Vec<Token>,
    pub score: f64,
    pub state: S,
}

/// Beam search over next-token distributions supplied by the caller.
#[derive(Clone, Debug)]
pub struct BeamSearch<S> {
    size: usize,
    max_len: usize,
    pub live: Vec<Beam<S>>,
    /// `(tokens, score, truncated)`.
    pub finished: Vec<(Vec<Token>, f64, bool)>,
}

impl<S: Clone> BeamSearch<S> {
    pub fn new(size: usize, max_len: usize, state: S) -> Self {
        assert!(size >= 1, "beam size must be positive");
        Self {
            size,
            max_len,
            live: vec![Beam {
                tokens: Vec::new(),
                score: 0.0,
                state,
            }],
            finished: Vec::new(),
        }
    }

    /// No live beam can still beat the best finished one.
    pub fn is_done(&self) -> bool {
        let best_live = self.live.iter().map(|b| b.score).fold(f64::NEG_INFINITY, f64::max);
        self.live.is_empty() || self.best().is_some_and(|(_, s, _)| s >= best_live)
    }

    pub fn best(&self) -> Option<(&[Token], f64, bool)> {
        self.finished
            .iter()
            .fold(None, |acc: Option<&(Vec<Token>, f64, bool)>, f| match acc {
                Some(a) if a.1 >= f.1 => Some(a),
                _ => Some(f),
            })
            .map(|f| (f.0.as_slice(), f.1, f.2))
    }

    /// Expands every live beam with its row of `logp` (one row per live
    /// beam, over the whole vocabulary).
    pub fn advance(&mut self, logp: &[&[f64]]) {
        assert_eq!(logp.len(), self.live.len());
        let mut cands: Vec<(f64, usize, Token)> = Vec::new();
        for (i, (beam, row)) in self.live.iter().zip(logp).enumerate() {
            for (v, &lp) in row.iter().enumerate() {
                let v = v as Token;
                if v == EOS || !is_reserved(v) {
                    cands.push((beam.score + lp, i, v));
                }
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut live = Vec::with_capacity(self.size);
        for (rank, &(score, i, v)) in cands.iter().enumerate() {
            if live.len() == self.size {
                break;
            }
            let parent = &self.live[i];
            if v == EOS {
                if rank < self.size {
                    self.finished.push((parent.tokens.clone(), score, false));
                }
                continue;
            }
            let mut tokens = parent.tokens.clone();
            tokens.push(v);
            if tokens.len() >= self.max_len {
                self.finished.push((tokens, score, true));
                continue;
            }
            live.push(Beam {
                tokens,
                score,
                state: parent.state.clone(),
            });
        }
        self.live = live;
    }
}

/// Batched L2R beam search with a per-beam cache.
pub fn decode_l2r_batch(model: &Model, srcs: &[&[Token]], opts: &DecodeOptions) -> Result<Vec<DecodeResult>> {
    if model.config.head != HeadKind::L2r {
        return Err(Error::WrongHead("l2r"));
    }
    let start = Instant::now();
    let d = model.d_model();
    let mut trace: Vec<MatmulRecord> = Vec::new();
    let memory = {
        let mut g = Graph::inference(&model.params);
        if opts.trace {
            g.enable_trace();
        }
        let m = model.encode_in(&mut g, srcs)?;
        trace.extend(g.take_trace());
        m
    };
    let empty = DecoderCache::new(model.n_layers(), d);
    let mut searches: Vec<BeamSearch<DecoderCache>> = srcs
        .iter()
        .map(|_| BeamSearch::new(opts.beam_size, opts.max_len.max(1), empty.clone()))
        .collect();
    let mut it = 0;
    loop {
        let active: Vec<usize> = (0..searches.len()).filter(|&i| !searches[i].is_done()).collect();
        if active.is_empty() {
            break;
        }
        it += 1;
        let mut g = Graph::inference(&model.params);
        if opts.trace {
            g.enable_trace();
        }
        g.set_step(it);
        let mem = memory.vars(&mut g);
        let mut tokens = Vec::new();
        let mut pos = Vec::new();
        let mut owners = Vec::new();
        for &i in &active {
            for (b, beam) in searches[i].live.iter().enumerate() {
                let t = beam.tokens.len();
                tokens.push(if t == 0 { BOS } else { beam.tokens[t - 1] });
                pos.extend(abs_encoding(t, d)?);
                owners.push((i, b));
            }
        }
        let (hidden, ks, vs, logp) = {
            let segments: Vec<Segment> = owners
                .iter()
                .map(|&(i, b)| {
                    let beam = &searches[i].live[b];
                    let t = beam.tokens.len();
                    Segment {
                        new_rows: 1,
                        keys: (0..=t).map(|j| RowMeta { step: j, surface: j }).collect(),
                        past: Some(&beam.state),
                        mask: MaskSpec::Kind(MaskKind::GenerationOrder),
                        mem: i,
                    }
                })
                .collect();
            let pos = g.constant(Tensor::matrix(owners.len(), d, pos));
            let out = model.decoder_stack(&mut g, &tokens, Some(pos), &segments, &mem)?;
            let lp = model.next_token_head(&mut g, out.hidden)?;
            (
                g.value(out.hidden).clone(),
                out.k.iter().map(|&x| g.value(x).clone()).collect::<Vec<_>>(),
                out.v.iter().map(|&x| g.value(x).clone()).collect::<Vec<_>>(),
                g.value(lp).clone(),
            )
        };
        trace.extend(g.take_trace());
        for (r, &(i, b)) in owners.iter().enumerate() {
            let kk: Vec<&[f64]> = ks.iter().map(|t| t.row(r)).collect();
            let vv: Vec<&[f64]> = vs.iter().map(|t| t.row(r)).collect();
            let beam = &mut searches[i].live[b];
            let t = beam.tokens.len();
            beam.state.append(&kk, &vv, hidden.row(r), &[t]);
        }
        let mut r = 0;
        for &i in &active {
            let n = searches[i].live.len();
            let rows: Vec<&[f64]> = (r..r + n).map(|j| logp.row(j)).collect();
            searches[i].advance(&rows);
            r += n;
        }
    }
    let n = srcs.len();
    let wall = start.elapsed() / n as u32;
    let flops = opts.trace.then(|| count_flops(&trace).per_instance(n));
    Ok(searches
        .into_iter()
        .map(|s| {
            let (tokens, score, truncated) = s
                .best()
                .map(|(t, sc, tr)| (t.to_vec(), sc, tr))
                .unwrap_or((Vec::new(), f64::NEG_INFINITY, true));
            let out_len = tokens.len();
            DecodeResult {
                token_steps: (1..=out_len).collect(),
                tokens,
                n_steps: out_len + 1,
                out_len,
                wall_time: wall,
                flops: flops.clone(),
                mode: Mode::Incremental,
                truncated,
                exhausted: false,
                step_slots: Vec::new(),
                log_prob: score,
                fpe: None,
            }
        })
        .collect())
}

/// Decodes one batch with the engine matching the model's head.
pub fn decode_many(model: &Model, srcs: &[&[Token]], opts: &DecodeOptions) -> Result<Vec<DecodeResult>> {
    match model.config.head {
        HeadKind::Insertion => decode_insertion_batch(model, srcs, opts, &mut Greedy),
        HeadKind::L2r => decode_l2r_batch(model, srcs, opts),
    }
}

/// Greedy parallel insertion decode of one source.
pub fn decode_insertion(model: &Model, src: &[Token], opts: &DecodeOptions) -> Result<DecodeResult> {
    Ok(decode_insertion_batch(model, &[src], opts, &mut Greedy)?.remove(0))
}

/// L2R beam search for one source.
pub fn decode_l2r(model: &Model, src: &[Token], beam_size: usize, max_len: usize) -> Result<DecodeResult> {
    let opts = DecodeOptions {
        beam_size,
        max_len,
        ..DecodeOptions::for_model(model)
    };
    Ok(decode_l2r_batch(model, &[src], &opts)?.remove(0))
}

pub fn decode(model: &Model, src: &[Token], opts: &DecodeOptions) -> Result<DecodeResult> {
    Ok(decode_many(model, &[src], opts)?.remove(0))
}

#[derive(Clone, Debug)]
pub struct BatchInfo {
    pub members: Vec<usize>,
    pub src_tokens: usize,
    pub wall: Duration,
}

#[derive(Clone, Debug)]
pub struct BatchOutput {
    /// In input order.
    pub results: Vec<DecodeResult>,
    pub batches: Vec<BatchInfo>,
}

/// Sorts instances by source length and packs them greedily so each batch
/// holds at most `budget` source tokens.
pub fn plan_batches(lens: &[usize], budget: usize) -> Result<Vec<Vec<usize>>> {
    for (id, &len) in lens.iter().enumerate() {
        if len > budget {
            return Err(Error::OverBudget { id, len, budget });
        }
    }
    let mut order: Vec<usize> = (0..lens.len()).collect();
    order.sort_by_key(|&i| (lens[i], i));
    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut used = 0;
    for i in order {
        match batches.last_mut() {
            Some(b) if used + lens[i] <= budget => {
                b.push(i);
                used += lens[i];
            }
            _ => {
                batches.push(vec![i]);
                used = lens[i];
            }
        }
    }
    Ok(batches)
}

/// Decodes every instance in budget-limited batches.
pub fn batch_decode(model: &Model, srcs: &[Vec<Token>], budget: usize, opts: &DecodeOptions) -> Result<BatchOutput> {
    let lens: Vec<usize> = srcs.iter().map(|s| s.len()).collect();
    let plan = plan_batches(&lens, budget)?;
    let mut results: Vec<Option<DecodeResult>> = vec![None; srcs.len()];
    let mut batches = Vec::with_capacity(plan.len());
    for members in plan {
        let batch: Vec<&[Token]> = members.iter().map(|&i| srcs[i].as_slice()).collect();
        let t = Instant::now();
        let out = decode_many(model, &batch, opts)?;
        let wall = t.elapsed();
        for (&i, r) in members.iter().zip(out) {
            results[i] = Some(r);
        }
        batches.push(BatchInfo {
            src_tokens: members.iter().map(|&i| lens[i]).sum(),
            members,
            wall,
        });
    }
    Ok(BatchOutput {
        results: results.into_iter().map(|r| r.expect("every instance decoded")).collect(),
        batches,
    })
}

/// `id<TAB>n_steps<TAB>out_len<TAB>wall_ms<TAB>tokens`.
pub fn format_result_line(id: usize, r: &DecodeResult) -> String {
    let toks: Vec<String> = r.tokens.iter().map(|t| t.to_string()).collect();
    format!(
        "{id}\t{}\t{}\t{:.3}\t{}",
        r.n_steps,
        r.out_len,
        r.wall_time.as_secs_f64() * 1e3,
        toks.join(" ")
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn greedy_choice_with_penalty() {
        let mut row = vec![f64::NEG_INFINITY; 8];
        row[END_OF_SLOT as usize] = -0.5;
        row[6] = -0.8;
        assert_eq!(greedy_slot_choice(&row, 0.0), None);
        assert_eq!(greedy_slot_choice(&row, 0.5), Some(6));
        // Reserved ids are never inserted.
        row[BOS as usize] = 0.0;
        assert_eq!(greedy_slot_choice(&row, 0.0), None);
    }

    #[test]
    fn batch_plan() {
        let plan = plan_batches(&[5, 2, 9, 3], 10).unwrap();
        assert_eq!(plan, vec![vec![1, 3, 0], vec![2]]);
        assert!(matches!(
            plan_batches(&[5, 12], 10),
            Err(Error::OverBudget { id: 1, len: 12, .. })
        ));
        assert_eq!(plan_batches(&[4, 4], 100).unwrap().len(), 1);
    }

    #[test]
    fn beam_matches_exhaustive_search() {
        // Vocabulary of 6: reserved 0..4 (EOS = 2), content 4 and 5.
        // Scores depend on the prefix; every sequence has length 3 then EOS.
        let table = |prefix: &[Token]| -> Vec<f64> {
            let mut row = vec![f64::NEG_INFINITY; 6];
            let h = prefix.iter().fold(7u32, |a, &t| a.wrapping_mul(31).wrapping_add(t));
            if prefix.len() == 3 {
                row[EOS as usize] = 0.0;
            } else {
                let p = 0.15 + 0.7 * ((h % 13) as f64 / 12.0);
                row[4] = p.ln();
                row[5] = (1.0 - p).ln();
            }
            row
        };
        let mut bs = BeamSearch::new(2, 10, ());
        while !bs.is_done() {
            let rows: Vec<Vec<f64>> = bs.live.iter().map(|b| table(&b.tokens)).collect();
            let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
            bs.advance(&refs);
        }
        let (best, score, _) = bs.best().unwrap();
        let mut exhaustive = (Vec::new(), f64::NEG_INFINITY);
        for a in [4, 5] {
            for b in [4, 5] {
                for c in [4, 5] {
                    let seq = vec![a, b, c];
                    let s: f64 = (0..3).map(|i| table(&seq[..i])[seq[i] as usize]).sum();
                    if s > exhaustive.1 {
                        exhaustive = (seq, s);
                    }
                }
            }
        }
        assert_eq!(best, exhaustive.0.as_slice());
        assert!((score - exhaustive.1).abs() < 1e-12);
    }
}
