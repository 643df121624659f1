//! Objectives and the optimization loop.
//!
//! Insertion models see one partial hypothesis per target: a uniformly sized,
//! uniformly chosen subset of the target tokens. Every gap ("slot") between
//! kept tokens is supervised with the tokens missing from it, weighted
//! towards the middle of the gap, so the model learns to fill gaps from the
//! centre outwards and finishes in about `log2(n)` parallel steps.

use std::ops::Range;

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use substrate::rng::{indexed_stream, Rng};
use substrate::{adam_step, AdamConfig, AdamState, Checkpoint, Graph, Tensor, Var};

use crate::data::Pair;
use crate::decoding::{batch_decode, DecodeOptions};
use crate::error::{Error, Result};
use crate::metrics::exact_match;
use crate::model::{HeadKind, MaskSpec, Model, RowMeta, Segment};
use crate::posenc::{abs_rows, snapshot_plan, PeScheme};
use crate::vocab::{Token, BOS, EOS, END_OF_SLOT};

/// A target with a sampled partial hypothesis.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainExample {
    pub src: Vec<Token>,
    pub tgt: Vec<Token>,
    /// Sorted indices of `tgt` present in the hypothesis.
    pub kept: Vec<usize>,
    /// Per slot, the range of `tgt` indices missing from it.
    pub spans: Vec<Range<usize>>,
}

impl TrainExample {
    pub fn new(src: Vec<Token>, tgt: Vec<Token>, kept: Vec<usize>) -> Self {
        let spans = spans_for(tgt.len(), &kept);
        Self {
            src,
            tgt,
            kept,
            spans,
        }
    }

    pub fn hypothesis_tokens(&self) -> Vec<Token> {
        self.kept.iter().map(|&i| self.tgt[i]).collect()
    }
}

/// Missing index ranges for each of the `kept.len() + 1` slots.
pub fn spans_for(t: usize, kept: &[usize]) -> Vec<Range<usize>> {
    let mut spans = Vec::with_capacity(kept.len() + 1);
    let mut start = 0;
    for &k in kept {
        spans.push(start..k);
        start = k + 1;
    }
    spans.push(start..t);
    spans
}

/// Draws `k` uniformly from `0..=t`, then a uniform `k`-subset.
pub fn sample_kept(t: usize, rng: &mut Rng) -> Vec<usize> {
    let k = rng.random_range(0..=t);
    let mut kept = sample(rng, t, k).into_vec();
    kept.sort_unstable();
    kept
}

pub fn sample_hypothesis(pair: &Pair, rng: &mut Rng) -> TrainExample {
    let kept = sample_kept(pair.tgt.len(), rng);
    TrainExample::new(pair.src.clone(), pair.tgt.clone(), kept)
}

/// Softmax of `−|i − (m−1)/2| / τ` over a span of length `m`.
pub fn binary_tree_weights(m: usize, tau: f64) -> Vec<f64> {
    assert!(m >= 1 && tau > 0.0, "binary_tree_weights needs m ≥ 1 and τ > 0");
    let c = (m as f64 - 1.0) / 2.0;
    let logits: Vec<f64> = (0..m).map(|i| -(i as f64 - c).abs() / tau).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Per slot, the supervised tokens and their weights. Empty slots are
/// supervised with END_OF_SLOT.
pub fn slot_targets(ex: &TrainExample, tau: f64) -> Vec<Vec<(Token, f64)>> {
    ex.spans
        .iter()
        .map(|span| {
            if span.is_empty() {
                vec![(END_OF_SLOT, 1.0)]
            } else {
                let w = binary_tree_weights(span.len(), tau);
                span.clone().zip(w).map(|(i, w)| (ex.tgt[i], w)).collect()
            }
        })
        .collect()
}

/// Slot-normalized loss from explicit slot log-probabilities.
pub fn insertion_loss_from_logp(logp: &[&[f64]], targets: &[Vec<(Token, f64)>]) -> f64 {
    assert_eq!(logp.len(), targets.len());
    let total: f64 = logp
        .iter()
        .zip(targets)
        .map(|(row, t)| t.iter().map(|&(y, w)| -w * row[y as usize]).sum::<f64>())
        .sum();
    total / targets.len() as f64
}

/// Loss hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub tau: f64,
    pub label_smoothing: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            label_smoothing: 0.1,
        }
    }
}

/// Mean loss over `examples` inside `g`, plus each example's own loss.
pub fn batch_loss(model: &Model, g: &mut Graph, examples: &[TrainExample], cfg: &LossConfig) -> Result<(Var, Vec<f64>)> {
    if examples.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let srcs: Vec<&[Token]> = examples.iter().map(|e| e.src.as_slice()).collect();
    let (states, spans) = model.encode_graph(g, &srcs)?;
    let mem = model.cross_kv(g, states, spans);
    let d = model.d_model();
    let v = model.config.vocab_size;
    let b = examples.len() as f64;

    let (logp, weights, ranges) = match model.config.head {
        HeadKind::Insertion => {
            let sizes: Vec<usize> = examples.iter().map(|e| e.kept.len()).collect();
            let mut tokens = Vec::new();
            let mut segments = Vec::with_capacity(examples.len());
            let mut pairs = Vec::new();
            let mut targets = Vec::new();
            let mut ranges = Vec::new();
            let mut row = 0;
            for (i, e) in examples.iter().enumerate() {
                let n = e.kept.len();
                let mut depth = vec![0; n];
                for node in snapshot_plan(n) {
                    depth[node.token] = node.depth;
                }
                tokens.push(BOS);
                tokens.extend(e.hypothesis_tokens());
                tokens.push(EOS);
                let mut keys = Vec::with_capacity(n + 2);
                keys.push(RowMeta { step: 0, surface: 0 });
                keys.extend((0..n).map(|j| RowMeta {
                    step: depth[j],
                    surface: j + 1,
                }));
                keys.push(RowMeta {
                    step: 0,
                    surface: n + 1,
                });
                segments.push(Segment {
                    new_rows: n + 2,
                    keys,
                    past: None,
                    mask: MaskSpec::Kind(model.config.mask_kind()),
                    mem: i,
                });
                let first = pairs.len();
                pairs.extend((0..=n).map(|s| (row + s, row + s + 1)));
                ranges.push(first..pairs.len());
                let t = slot_targets(e, cfg.tau);
                let scale = 1.0 / (t.len() as f64 * b);
                targets.extend(t.into_iter().map(|slot| (slot, scale)));
                row += n + 2;
            }
            let pos = match model.scheme() {
                PeScheme::Abs => Some(g.constant(abs_rows(sizes.iter().flat_map(|&n| 0..n + 2), d)?)),
                PeScheme::Rel => None,
                PeScheme::Fpe => Some(model.fpe_snapshot_rows(g, &sizes)?.0),
            };
            let out = model.decoder_stack(g, &tokens, pos, &segments, &mem)?;
            let logp = model.slot_head(g, out.hidden, &pairs)?;
            let mut w = vec![0.0; pairs.len() * v];
            for (r, (slot, scale)) in targets.iter().enumerate() {
                for &(y, wt) in slot {
                    w[r * v + y as usize] += wt * scale;
                }
            }
            (logp, w, ranges)
        }
        HeadKind::L2r => {
            let eps = cfg.label_smoothing;
            let mut tokens = Vec::new();
            let mut positions = Vec::new();
            let mut segments = Vec::with_capacity(examples.len());
            let mut w = Vec::new();
            let mut ranges = Vec::new();
            let mut row = 0;
            for (i, e) in examples.iter().enumerate() {
                let t = e.tgt.len();
                tokens.push(BOS);
                tokens.extend_from_slice(&e.tgt);
                positions.extend(0..=t);
                segments.push(Segment {
                    new_rows: t + 1,
                    keys: (0..=t).map(|j| RowMeta { step: j, surface: j }).collect(),
                    past: None,
                    mask: MaskSpec::Kind(model.config.mask_kind()),
                    mem: i,
                });
                let scale = 1.0 / ((t + 1) as f64 * b);
                for j in 0..=t {
                    let y = if j < t { e.tgt[j] } else { EOS };
                    let start = w.len();
                    w.extend(std::iter::repeat_n(eps / v as f64 * scale, v));
                    w[start + y as usize] += (1.0 - eps) * scale;
                }
                ranges.push(row..row + t + 1);
                row += t + 1;
            }
            let pos = g.constant(abs_rows(positions, d)?);
            let out = model.decoder_stack(g, &tokens, Some(pos), &segments, &mem)?;
            let logp = model.next_token_head(g, out.hidden)?;
            (logp, w, ranges)
        }
    };

    let lp = g.value(logp);
    let mut per_example = Vec::with_capacity(examples.len());
    for (i, r) in ranges.iter().enumerate() {
        let s: f64 = r
            .clone()
            .flat_map(|row| (0..v).map(move |c| (row, c)))
            .map(|(row, c)| -weights[row * v + c] * lp.row(row)[c])
            .sum();
        let s = s * b;
        if !s.is_finite() {
            return Err(Error::NonFiniteLoss(i));
        }
        per_example.push(s);
    }
    let rows = lp.rows();
    let ws = g.weighted_sum(logp, Tensor::matrix(rows, v, weights));
    Ok((g.scale(ws, -1.0), per_example))
}

/// Loss of one example under the model, without gradients.
pub fn example_loss(model: &Model, example: &TrainExample, cfg: &LossConfig) -> Result<f64> {
    let mut g = Graph::inference(&model.params);
    let (l, _) = batch_loss(model, &mut g, std::slice::from_ref(example), cfg)?;
    Ok(g.value(l).item())
}

/// Binary-tree insertion loss of one example (slot-normalized).
pub fn insertion_loss(model: &Model, example: &TrainExample, tau: f64) -> Result<f64> {
    if model.config.head != HeadKind::Insertion {
        return Err(Error::WrongHead("insertion"));
    }
    example_loss(
        model,
        example,
        &LossConfig {
            tau,
            label_smoothing: 0.0,
        },
    )
}

/// Label-smoothed next-token loss, averaged over the target and EOS.
pub fn l2r_loss(model: &Model, src: &[Token], tgt: &[Token], label_smoothing: f64) -> Result<f64> {
    if model.config.head != HeadKind::L2r {
        return Err(Error::WrongHead("l2r"));
    }
    let ex = TrainExample::new(src.to_vec(), tgt.to_vec(), Vec::new());
    example_loss(
        model,
        &ex,
        &LossConfig {
            tau: 1.0,
            label_smoothing,
        },
    )
}

/// Element-wise mean of checkpoints with identical names and shapes.
pub fn average_checkpoints(ckpts: &[Checkpoint]) -> Result<Checkpoint> {
    let first = ckpts.first().ok_or(Error::Empty("checkpoint list"))?;
    let mut out = Checkpoint::new();
    for (name, t) in first.entries() {
        let mut acc = t.clone();
        for c in &ckpts[1..] {
            let o = c
                .get(name)
                .ok_or_else(|| Error::CheckpointMismatch(format!("`{name}` missing")))?;
            if o.shape() != t.shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    o.shape(),
                    t.shape()
                )));
            }
            acc.add_assign(o);
        }
        acc.scale_assign(1.0 / ckpts.len() as f64);
        out.insert(name.clone(), acc);
    }
    for c in &ckpts[1..] {
        if c.len() != first.len() {
            return Err(Error::CheckpointMismatch("parameter sets differ".into()));
        }
    }
    Ok(out)
}

/// Loads the first `k` checkpoint files and averages them.
pub fn average_checkpoint_files<P: AsRef<std::path::Path>>(paths: &[P], k: usize) -> Result<Checkpoint> {
    if paths.len() < k || k == 0 {
        return Err(Error::Config(format!("need {k} checkpoints, got {}", paths.len())));
    }
    let ckpts = paths[..k]
        .iter()
        .map(|p| Checkpoint::load(p).map_err(Error::from))
        .collect::<Result<Vec<_>>>()?;
    average_checkpoints(&ckpts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub warmup: usize,
    pub peak_lr: f64,
    pub tau: f64,
    pub label_smoothing: f64,
    pub validate_every: usize,
    /// Number of best validation checkpoints to average at the end.
    pub average_best_k: usize,
    /// Dev pairs used for validation loss and exact match.
    pub dev_limit: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 32,
            warmup: 400,
            peak_lr: 5e-4,
            tau: 1.0,
            label_smoothing: 0.1,
            validate_every: 500,
            average_best_k: 5,
            dev_limit: 200,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(Error::Config("tau must be positive".into()));
        }
        if self.warmup == 0 || self.batch_size == 0 {
            return Err(Error::Config("warmup and batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            tau: self.tau,
            label_smoothing: self.label_smoothing,
        }
    }
}

/// Inverse square-root schedule with linear warmup; `step` counts from 1.
pub fn lr_at(step: usize, warmup: usize, peak: f64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup as f64;
    peak * (s / w).min((w / s).sqrt())
}

/// Model, optimizer state and step counter.
pub struct Trainer {
    pub model: Model,
    pub adam: AdamState,
    pub adam_config: AdamConfig,
    pub step: usize,
    pub config: TrainConfig,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::new(&model.params);
        Ok(Self {
            model,
            adam,
            adam_config: AdamConfig::default(),
            step: 0,
            config,
        })
    }

    /// The batch used at 0-based step `step`; a pure function of the seed.
    pub fn batch(&self, data: &[Pair], step: usize) -> Vec<TrainExample> {
        let mut rng = indexed_stream(self.config.seed, "batch", step as u64);
        (0..self.config.batch_size)
            .map(|_| {
                let p = &data[rng.random_range(0..data.len())];
                sample_hypothesis(p, &mut rng)
            })
            .collect()
    }

    /// One optimizer step on `examples` with learning rate `lr`.
    pub fn step_on(&mut self, examples: &[TrainExample], lr: f64) -> Result<f64> {
        self.model.params.zero_grad();
        let (loss, grads) = {
            let mut g = Graph::new(&self.model.params);
            let (l, _) = batch_loss(&self.model, &mut g, examples, &self.config.loss())?;
            (g.value(l).item(), g.backward(l))
        };
        grads.accumulate_into(&mut self.model.params);
        adam_step(&mut self.model.params, &mut self.adam, &self.adam_config, lr)?;
        self.step += 1;
        Ok(loss)
    }

    /// Samples the next batch and takes one scheduled step.
    pub fn train_step(&mut self, data: &[Pair]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Empty("training data"));
        }
        let batch = self.batch(data, self.step);
        let lr = lr_at(self.step + 1, self.config.warmup, self.config.peak_lr);
        self.step_on(&batch, lr)
    }

    /// Parameters, optimizer moments and step counter.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = self.model.checkpoint();
        self.adam.write_into(&self.model.params, &mut c);
        c.insert("train.step".into(), Tensor::scalar(self.step as f64));
        c
    }

    pub fn resume(mut model: Model, config: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        model.load_checkpoint(ckpt)?;
        let adam = AdamState::read_from(&model.params, ckpt)?;
        let step = ckpt
            .get("train.step")
            .ok_or_else(|| Error::CheckpointMismatch("no training step".into()))?
            .item() as usize;
        Ok(Self {
            model,
            adam,
            adam_config: AdamConfig::default(),
            step,
            config,
        })
    }
}

/// One line of the validation log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValidationRow {
    pub step: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_metric: f64,
}

pub const VALIDATION_HEADER: &str = "step,train_loss,dev_loss,dev_metric";

impl ValidationRow {
    pub fn csv(&self) -> String {
        format!("{},{:.6},{:.6},{:.6}", self.step, self.train_loss, self.dev_loss, self.dev_metric)
    }
}

pub struct TrainOutcome {
    /// The averaged best checkpoints, or the single best one if averaging
    /// scores lower on the dev set.
    pub model: Model,
    pub curve: Vec<ValidationRow>,
    /// Step at which the loss or a gradient became non-finite. The model is
    /// then the last validated one.
    pub diverged_at: Option<usize>,
    pub averaged: bool,
}

/// Dev loss on fixed sampled hypotheses and greedy exact match.
pub fn evaluate_dev(model: &Model, dev: &[Pair], cfg: &TrainConfig) -> Result<(f64, f64)> {
    let mut rng = indexed_stream(cfg.seed, "dev", 0);
    let examples: Vec<TrainExample> = dev.iter().map(|p| sample_hypothesis(p, &mut rng)).collect();
    let mut loss = 0.0;
    for chunk in examples.chunks(cfg.batch_size.max(1)) {
        let mut g = Graph::inference(&model.params);
        let (l, _) = batch_loss(model, &mut g, chunk, &cfg.loss())?;
        loss += g.value(l).item() * chunk.len() as f64;
    }
    loss /= examples.len().max(1) as f64;
    let srcs: Vec<Vec<Token>> = dev.iter().map(|p| p.src.clone()).collect();
    let opts = DecodeOptions::for_model(model);
    let out = batch_decode(model, &srcs, 1024, &opts)?;
    let hyps: Vec<Vec<Token>> = out.results.into_iter().map(|r| r.tokens).collect();
    let refs: Vec<Vec<Token>> = dev.iter().map(|p| p.tgt.clone()).collect();
    Ok((loss, exact_match(&hyps, &refs)?))
}

/// Full training run with periodic validation and best-k averaging.
pub fn train(
    model: Model,
    config: TrainConfig,
    data: &[Pair],
    dev: &[Pair],
    mut on_validate: impl FnMut(&ValidationRow),
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::Empty("training data"));
    }
    let dev = &dev[..dev.len().min(config.dev_limit)];
    let mut trainer = Trainer::new(model, config.clone())?;
    let mut curve = Vec::new();
    let mut best: Vec<(f64, f64, Checkpoint)> = Vec::new();
    let mut last_good = trainer.model.checkpoint();
    let mut diverged_at = None;
    let mut running = 0.0;
    let mut count = 0usize;
    while trainer.step < config.steps {
        match trainer.train_step(data) {
            Ok(l) => {
                running += l;
                count += 1;
            }
            Err(Error::NonFiniteLoss(_)) | Err(Error::Substrate(substrate::SubstrateError::NonFiniteGradient(_))) => {
                diverged_at = Some(trainer.step + 1);
                trainer.model.load_checkpoint(&last_good)?;
                break;
            }
            Err(e) => return Err(e),
        }
        let at_end = trainer.step == config.steps;
        if config.validate_every > 0 && (trainer.step % config.validate_every == 0 || at_end) && !dev.is_empty() {
            let (dev_loss, dev_metric) = evaluate_dev(&trainer.model, dev, &config)?;
            let row = ValidationRow {
                step: trainer.step,
                train_loss: running / count.max(1) as f64,
                dev_loss,
                dev_metric,
            };
            on_validate(&row);
            curve.push(row);
            running = 0.0;
            count = 0;
            last_good = trainer.model.checkpoint();
            best.push((dev_metric, -dev_loss, last_good.clone()));
            best.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.total_cmp(&a.1)));
            best.truncate(config.average_best_k.max(1));
        }
    }
    let mut model = trainer.model;
    let mut averaged = false;
    if diverged_at.is_none() && !best.is_empty() {
        model.load_checkpoint(&best[0].2)?;
        if best.len() > 1 {
            let ckpts: Vec<Checkpoint> = best.iter().map(|b| b.2.clone()).collect();
            let mut avg = model.clone();
            avg.load_checkpoint(&average_checkpoints(&ckpts)?)?;
            let (avg_loss, avg_metric) = evaluate_dev(&avg, dev, &config)?;
            if (avg_metric, -avg_loss) >= (best[0].0, best[0].1) {
                model = avg;
                averaged = true;
            }
        }
    }
    Ok(TrainOutcome {
        model,
        curve,
        diverged_at,
        averaged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use substrate::rng::stream;

    #[test]
    fn spans_partition_the_complement() {
        assert_eq!(spans_for(5, &[1, 3]), vec![0..1, 2..3, 4..5]);
        assert_eq!(spans_for(3, &[]), vec![0..3]);
        assert_eq!(spans_for(2, &[0, 1]), vec![0..0, 1..1, 2..2]);
    }

    #[test]
    fn tree_weights_oracle() {
        assert_eq!(binary_tree_weights(1, 1.0), vec![1.0]);
        // softmax(−1, 0, −1) evaluated independently.
        let e = (-1.0f64).exp();
        let z = 1.0 + 2.0 * e;
        let w = binary_tree_weights(3, 1.0);
        for (a, b) in w.iter().zip([e / z, 1.0 / z, e / z]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((w[0] - 0.21194).abs() < 5e-6 && (w[1] - 0.57612).abs() < 5e-6);
    }

    #[test]
    fn lr_schedule_peaks_at_warmup() {
        assert!((lr_at(400, 400, 5e-4) - 5e-4).abs() < 1e-18);
        assert!(lr_at(200, 400, 5e-4) < 5e-4);
        assert!((lr_at(1600, 400, 5e-4) - 2.5e-4).abs() < 1e-18);
    }

    #[test]
    fn sampling_edge_cases() {
        let mut rng = stream(1, "t");
        for _ in 0..50 {
            let k = sample_kept(6, &mut rng);
            assert!(k.windows(2).all(|w| w[0] < w[1]) && k.len() <= 6);
        }
        let ex = TrainExample::new(vec![4], vec![4, 5, 6], vec![0, 1, 2]);
        assert!(slot_targets(&ex, 1.0).iter().all(|t| t == &vec![(END_OF_SLOT, 1.0)]));
        let ex = TrainExample::new(vec![4], vec![4, 5, 6], vec![]);
        assert_eq!(ex.spans, vec![0..3]);
    }

    #[test]
    fn averaging() {
        let mut a = Checkpoint::new();
        a.insert("w".into(), Tensor::matrix(1, 2, vec![1.0, 2.0]));
        let mut b = Checkpoint::new();
        b.insert("w".into(), Tensor::matrix(1, 2, vec![3.0, -2.0]));
        let m = average_checkpoints(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(m.get("w").unwrap().data(), &[2.0, 0.0]);
        assert_eq!(average_checkpoints(&[a.clone(), a.clone()]).unwrap(), a);
        let mut c = Checkpoint::new();
        c.insert("w".into(), Tensor::zeros(&[3]));
        assert!(average_checkpoints(&[a, c]).is_err());
    }
}
