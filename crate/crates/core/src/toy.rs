//! A small deterministic decoder-only transformer with residual capture and
//! intervention hooks, used for desk-scale causal validation of operators.
//!
//! Each layer is pre-norm: `h += attn(norm(h)); h += mlp(norm(h))`, with
//! causal multi-head attention and a SiLU-gated MLP. Logits come from a final
//! RMS norm and the tied token embedding, scaled by `1/sqrt(d_model)`.
//! Weights are random and stay untrained.

use std::fmt::Write as _;

use nalgebra::DVector;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operator::{fit_cv, FitConfig, TransportOperator};
use crate::tensor_io::ActivationPairset;
use crate::Matrix;

const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub seed: u64,
    pub weight_scale: f64,
}

impl ToyModelConfig {
    /// vocab 64, d_model 32, 8 layers of 4 heads, d_ff 64, 64 positions.
    pub fn reference() -> Self {
        Self {
            vocab: 64,
            d_model: 32,
            n_layers: 8,
            n_heads: 4,
            d_ff: 64,
            max_seq: 64,
            seed: 3,
            weight_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("vocab", self.vocab),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.weight_scale.is_finite() && self.weight_scale > 0.0) {
            return Err(Error::InvalidConfig("weight_scale must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Layer {
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    w_gate: Matrix,
    w_up: Matrix,
    w_down: Matrix,
}

#[derive(Debug, Clone)]
pub struct ToyModel {
    cfg: ToyModelConfig,
    embed: Matrix,
    pos: Matrix,
    layers: Vec<Layer>,
}

/// Captured activations of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `seq × vocab`.
    pub logits: Matrix,
    /// Post-layer residual stream, one `seq × d_model` matrix per layer.
    pub residuals: Vec<Matrix>,
    /// Residual stream entering layer 0.
    pub embedded: Matrix,
    pub attn_out: Vec<Matrix>,
    pub mlp_out: Vec<Matrix>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionKind {
    None,
    ZeroDownstream,
    AtoPatch,
}

impl InterventionKind {
    pub fn label(self) -> &'static str {
        match self {
            InterventionKind::None => "unedited",
            InterventionKind::ZeroDownstream => "zero",
            InterventionKind::AtoPatch => "ato_patch",
        }
    }
}

/// Where and how to edit the residual stream during a forward pass.
///
/// Both edits act on the post-layer residual at `source_layer + leap`.
#[derive(Debug, Clone, Copy)]
pub struct InterventionSpec<'a> {
    pub kind: InterventionKind,
    pub source_layer: usize,
    pub leap: usize,
    pub positions: &'a [usize],
    pub operator: Option<&'a TransportOperator>,
}

impl<'a> InterventionSpec<'a> {
    pub fn none() -> Self {
        Self {
            kind: InterventionKind::None,
            source_layer: 0,
            leap: 0,
            positions: &[],
            operator: None,
        }
    }

    pub fn zero(source_layer: usize, leap: usize, positions: &'a [usize]) -> Self {
        Self {
            kind: InterventionKind::ZeroDownstream,
            source_layer,
            leap,
            positions,
            operator: None,
        }
    }

    pub fn ato_patch(
        source_layer: usize,
        leap: usize,
        positions: &'a [usize],
        operator: &'a TransportOperator,
    ) -> Self {
        Self {
            kind: InterventionKind::AtoPatch,
            source_layer,
            leap,
            positions,
            operator: Some(operator),
        }
    }

    pub fn target_layer(&self) -> usize {
        self.source_layer + self.leap
    }

    fn validate(&self, cfg: &ToyModelConfig, seq_len: usize) -> Result<()> {
        if self.kind == InterventionKind::None {
            return Ok(());
        }
        if self.leap == 0 || self.target_layer() >= cfg.n_layers {
            return Err(Error::InvalidConfig(format!(
                "layer {} + leap {} outside a {}-layer model",
                self.source_layer, self.leap, cfg.n_layers
            )));
        }
        if let Some(p) = self.positions.iter().find(|&&p| p >= seq_len) {
            return Err(Error::OutOfRange(format!(
                "position {p} outside a sequence of length {seq_len}"
            )));
        }
        if self.kind == InterventionKind::AtoPatch {
            let op = self
                .operator
                .ok_or_else(|| Error::InvalidConfig("ato_patch requires an operator".into()))?;
            if op.d_in() != cfg.d_model || op.d_out() != cfg.d_model {
                return Err(Error::DimensionMismatch(format!(
                    "operator is {}x{}, model width is {}",
                    op.d_out(),
                    op.d_in(),
                    cfg.d_model
                )));
            }
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            let z: f64 = rng.sample(StandardNormal);
            m[(r, c)] = z * std;
        }
    }
    m
}

fn rms_norm(h: &Matrix) -> Matrix {
    let mut out = h.clone();
    for mut row in out.row_iter_mut() {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
        row /= (ms + NORM_EPS).sqrt();
    }
    out
}

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for mut row in out.row_iter_mut() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

fn log_softmax_at(row: &[f64], index: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row[index] - lse
}

impl ToyModel {
    pub fn cfg(&self) -> &ToyModelConfig {
        &self.cfg
    }

    fn attention(&self, layer: &Layer, x: &Matrix) -> Matrix {
        let seq = x.nrows();
        let dh = self.cfg.d_model / self.cfg.n_heads;
        let q = x * &layer.wq;
        let k = x * &layer.wk;
        let v = x * &layer.wv;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut mixed = Matrix::zeros(seq, self.cfg.d_model);
        for h in 0..self.cfg.n_heads {
            let qh = q.columns(h * dh, dh);
            let kh = k.columns(h * dh, dh);
            let vh = v.columns(h * dh, dh);
            for i in 0..seq {
                let mut weights: Vec<f64> = (0..=i).map(|j| qh.row(i).dot(&kh.row(j)) * scale).collect();
                let max = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for w in &mut weights {
                    *w = (*w - max).exp();
                    sum += *w;
                }
                for (j, w) in weights.iter().enumerate() {
                    let coef = w / sum;
                    for c in 0..dh {
                        mixed[(i, h * dh + c)] += coef * vh[(j, c)];
                    }
                }
            }
        }
        mixed * &layer.wo
    }

    fn mlp(&self, layer: &Layer, x: &Matrix) -> Matrix {
        let mut gate = x * &layer.w_gate;
        let up = x * &layer.w_up;
        gate.zip_apply(&up, |g, u| *g = silu(*g) * u);
        gate * &layer.w_down
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::InvalidConfig("empty token sequence".into()));
        }
        if tokens.len() > self.cfg.max_seq {
            return Err(Error::OutOfRange(format!(
                "sequence of {} tokens exceeds max_seq {}",
                tokens.len(),
                self.cfg.max_seq
            )));
        }
        if let Some(t) = tokens.iter().find(|&&t| t >= self.cfg.vocab) {
            return Err(Error::OutOfRange(format!("token {t} outside vocab {}", self.cfg.vocab)));
        }
        Ok(())
    }

    pub fn forward(&self, tokens: &[usize]) -> Result<ForwardTrace> {
        self.forward_intervened(tokens, &InterventionSpec::none())
    }

    pub fn forward_intervened(&self, tokens: &[usize], spec: &InterventionSpec) -> Result<ForwardTrace> {
        self.check_tokens(tokens)?;
        spec.validate(&self.cfg, tokens.len())?;
        let d = self.cfg.d_model;
        let mut h = Matrix::from_fn(tokens.len(), d, |i, c| self.embed[(tokens[i], c)] + self.pos[(i, c)]);
        let embedded = h.clone();
        let mut residuals = Vec::with_capacity(self.cfg.n_layers);
        let mut attn_out = Vec::with_capacity(self.cfg.n_layers);
        let mut mlp_out = Vec::with_capacity(self.cfg.n_layers);
        let mut upstream: Option<Matrix> = None;

        for (m, layer) in self.layers.iter().enumerate() {
            let a = self.attention(layer, &rms_norm(&h));
            h += &a;
            let f = self.mlp(layer, &rms_norm(&h));
            h += &f;
            attn_out.push(a);
            mlp_out.push(f);

            match spec.kind {
                InterventionKind::None => {}
                InterventionKind::ZeroDownstream => {
                    if m == spec.target_layer() {
                        for &p in spec.positions {
                            h.row_mut(p).fill(0.0);
                        }
                    }
                }
                InterventionKind::AtoPatch => {
                    if m == spec.source_layer {
                        upstream = Some(h.select_rows(spec.positions.iter()));
                    }
                    if m == spec.target_layer() {
                        let op = spec.operator.expect("validated");
                        let src = upstream.as_ref().expect("source precedes target");
                        let patched = op.predict(src)?;
                        for (i, &p) in spec.positions.iter().enumerate() {
                            h.row_mut(p).copy_from(&patched.row(i));
                        }
                    }
                }
            }
            residuals.push(h.clone());
        }

        let logits = rms_norm(&h) * self.embed.transpose() / (d as f64).sqrt();
        Ok(ForwardTrace {
            logits,
            residuals,
            embedded,
            attn_out,
            mlp_out,
        })
    }

    /// Ancestral sample of `len` tokens from the unedited model.
    pub fn sample_sequence(&self, len: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
        if len == 0 || len > self.cfg.max_seq {
            return Err(Error::OutOfRange(format!("length {len} not in [1, {}]", self.cfg.max_seq)));
        }
        let mut tokens = vec![rng.random_range(0..self.cfg.vocab)];
        while tokens.len() < len {
            let trace = self.forward(&tokens)?;
            let last = trace.logits.nrows() - 1;
            let probs = softmax_rows(&trace.logits.rows(last, 1).into_owned());
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut next = self.cfg.vocab - 1;
            for (t, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    next = t;
                    break;
                }
            }
            tokens.push(next);
        }
        Ok(tokens)
    }

    /// `count` sequences sampled from the model, deterministic in `seed`.
    pub fn sample_corpus(&self, count: usize, len: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
        (0..count)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                self.sample_sequence(len, &mut rng)
            })
            .collect()
    }

    /// Same-token pairs `(residual[l], residual[l+k])` over every position.
    pub fn harvest_pairs(
        &self,
        sequences: &[Vec<usize>],
        source_layer: usize,
        leap: usize,
    ) -> Result<ActivationPairset> {
        if leap == 0 || source_layer + leap >= self.cfg.n_layers {
            return Err(Error::InvalidConfig(format!(
                "layer {source_layer} + leap {leap} outside a {}-layer model",
                self.cfg.n_layers
            )));
        }
        let traces: Vec<ForwardTrace> = sequences
            .par_iter()
            .map(|s| self.forward(s))
            .collect::<Result<_>>()?;
        let rows: usize = traces.iter().map(|t| t.logits.nrows()).sum();
        let d = self.cfg.d_model;
        let mut x = Matrix::zeros(rows, d);
        let mut y = Matrix::zeros(rows, d);
        let mut at = 0;
        for t in &traces {
            let n = t.logits.nrows();
            x.rows_mut(at, n).copy_from(&t.residuals[source_layer]);
            y.rows_mut(at, n).copy_from(&t.residuals[source_layer + leap]);
            at += n;
        }
        ActivationPairset::from_matrices(
            x,
            y,
            source_layer as u32,
            leap as u32,
            format!("toy-transformer seed={}", self.cfg.seed),
            Some(self.cfg.seed),
        )
    }
}

pub fn build_model(cfg: &ToyModelConfig) -> Result<ToyModel> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ws = cfg.weight_scale;
    let d = cfg.d_model;
    // token and position lookups have fan-in 1
    let embed = gaussian(&mut rng, cfg.vocab, d, ws);
    let pos = gaussian(&mut rng, cfg.max_seq, d, ws);
    let by_fan_in = |fan: usize| ws / (fan as f64).sqrt();
    let layers = (0..cfg.n_layers)
        .map(|_| Layer {
            wq: gaussian(&mut rng, d, d, by_fan_in(d)),
            wk: gaussian(&mut rng, d, d, by_fan_in(d)),
            wv: gaussian(&mut rng, d, d, by_fan_in(d)),
            wo: gaussian(&mut rng, d, d, by_fan_in(d)),
            w_gate: gaussian(&mut rng, d, cfg.d_ff, by_fan_in(d)),
            w_up: gaussian(&mut rng, d, cfg.d_ff, by_fan_in(d)),
            w_down: gaussian(&mut rng, cfg.d_ff, d, by_fan_in(cfg.d_ff)),
        })
        .collect();
    Ok(ToyModel {
        cfg: *cfg,
        embed,
        pos,
        layers,
    })
}

/// `exp` of the mean next-token negative log-likelihood over positions `1..n`.
pub fn perplexity(trace: &ForwardTrace, tokens: &[usize]) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(Error::InvalidConfig("perplexity needs at least 2 tokens".into()));
    }
    if trace.logits.nrows() != tokens.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} logit rows for {} tokens",
            trace.logits.nrows(),
            tokens.len()
        )));
    }
    let mut nll = 0.0;
    for i in 1..tokens.len() {
        let row: Vec<f64> = trace.logits.row(i - 1).iter().copied().collect();
        if tokens[i] >= row.len() {
            return Err(Error::OutOfRange(format!("token {} outside vocab", tokens[i])));
        }
        nll -= log_softmax_at(&row, tokens[i]);
    }
    Ok((nll / (tokens.len() - 1) as f64).exp())
}

/// Which positions each causal trial edits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionMode {
    /// This many distinct positions drawn uniformly from `1..len`.
    Random(usize),
    All,
}

impl PositionMode {
    pub fn label(&self) -> String {
        match self {
            PositionMode::Random(n) => format!("random{n}"),
            PositionMode::All => "all".to_string(),
        }
    }

    fn draw(&self, len: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        match *self {
            PositionMode::All => Ok((0..len).collect()),
            PositionMode::Random(n) => {
                if n == 0 || n > len.saturating_sub(1) {
                    return Err(Error::OutOfRange(format!(
                        "cannot draw {n} positions from 1..{len}"
                    )));
                }
                let mut p: Vec<usize> = index::sample(rng, len - 1, n).into_iter().map(|i| i + 1).collect();
                p.sort_unstable();
                Ok(p)
            }
        }
    }
}

/// Layer pair and position policy shared by all trials of a causal evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CausalSpec {
    pub source_layer: usize,
    pub leap: usize,
    pub positions: PositionMode,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CausalReport {
    pub source_layer: usize,
    pub leap: usize,
    pub positions_mode: String,
    pub n_sequences: usize,
    pub n_position_sets: usize,
    pub ppl_unedited: f64,
    pub ppl_ato: f64,
    pub ppl_zero: f64,
    /// `(ppl_ato − ppl_unedited) / (ppl_zero − ppl_unedited)`.
    pub degradation_ato: f64,
}

impl CausalReport {
    fn rows(&self) -> [(InterventionKind, f64, f64); 3] {
        [
            (InterventionKind::None, self.ppl_unedited, 0.0),
            (InterventionKind::AtoPatch, self.ppl_ato, self.degradation_ato),
            (InterventionKind::ZeroDownstream, self.ppl_zero, 1.0),
        ]
    }
}

/// `condition,k,positions_mode,mean_ppl,normalised_degradation`, three rows per report.
pub fn causal_reports_to_csv(reports: &[CausalReport]) -> String {
    let mut out = String::from("condition,k,positions_mode,mean_ppl,normalised_degradation\n");
    for r in reports {
        for (kind, ppl, deg) in r.rows() {
            let _ = writeln!(out, "{},{},{},{},{}", kind.label(), r.leap, r.positions_mode, ppl, deg);
        }
    }
    out
}

/// Perplexity of each sequence unedited, with the operator patched in, and
/// with the downstream residual zeroed, over seeded random position sets.
pub fn causal_eval(
    model: &ToyModel,
    operator: &TransportOperator,
    sequences: &[Vec<usize>],
    spec: &CausalSpec,
    n_position_sets: usize,
    seed: u64,
) -> Result<CausalReport> {
    if sequences.is_empty() {
        return Err(Error::InvalidConfig("no sequences to evaluate".into()));
    }
    if n_position_sets == 0 {
        return Err(Error::InvalidConfig("need at least one position set".into()));
    }
    let sets = if spec.positions == PositionMode::All { 1 } else { n_position_sets };
    let per_seq: Vec<(f64, f64, f64)> = sequences
        .par_iter()
        .enumerate()
        .map(|(i, tokens)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let base = perplexity(&model.forward(tokens)?, tokens)?;
            let (mut ato, mut zero) = (0.0, 0.0);
            for _ in 0..sets {
                let positions = spec.positions.draw(tokens.len(), &mut rng)?;
                let patch =
                    InterventionSpec::ato_patch(spec.source_layer, spec.leap, &positions, operator);
                ato += perplexity(&model.forward_intervened(tokens, &patch)?, tokens)?;
                let zeroed = InterventionSpec::zero(spec.source_layer, spec.leap, &positions);
                zero += perplexity(&model.forward_intervened(tokens, &zeroed)?, tokens)?;
            }
            Ok((base, ato / sets as f64, zero / sets as f64))
        })
        .collect::<Result<_>>()?;
    let n = per_seq.len() as f64;
    let ppl_unedited = per_seq.iter().map(|p| p.0).sum::<f64>() / n;
    let ppl_ato = per_seq.iter().map(|p| p.1).sum::<f64>() / n;
    let ppl_zero = per_seq.iter().map(|p| p.2).sum::<f64>() / n;
    let span = ppl_zero - ppl_unedited;
    if span <= 0.0 {
        log::warn!("zero intervention did not raise perplexity (span {span})");
    }
    Ok(CausalReport {
        source_layer: spec.source_layer,
        leap: spec.leap,
        positions_mode: spec.positions.label(),
        n_sequences: sequences.len(),
        n_position_sets: sets,
        ppl_unedited,
        ppl_ato,
        ppl_zero,
        degradation_ato: (ppl_ato - ppl_unedited) / span,
    })
}

/// End-to-end causal experiment: harvest same-token pairs from sampled text,
/// fit one operator per leap, then evaluate on fresh sequences. The target
/// layer is fixed and the source layer is `target_layer − k`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CausalProtocol {
    pub target_layer: usize,
    pub leaps: Vec<usize>,
    pub seq_len: usize,
    pub n_train_sequences: usize,
    pub n_eval_sequences: usize,
    pub train_seed: u64,
    pub eval_seed: u64,
    pub positions: PositionMode,
    pub n_position_sets: usize,
    pub position_seed: u64,
    #[serde(skip)]
    pub fit: FitConfig,
}

impl Default for CausalProtocol {
    fn default() -> Self {
        Self {
            target_layer: 6,
            leaps: vec![1, 2, 4],
            seq_len: 64,
            n_train_sequences: 64,
            n_eval_sequences: 20,
            train_seed: 100,
            eval_seed: 200,
            positions: PositionMode::Random(5),
            n_position_sets: 3,
            position_seed: 7,
            fit: FitConfig::default(),
        }
    }
}

impl CausalProtocol {
    pub fn validate(&self, model: &ToyModel) -> Result<()> {
        if self.leaps.is_empty() {
            return Err(Error::InvalidConfig("no leaps requested".into()));
        }
        if self.target_layer >= model.cfg.n_layers {
            return Err(Error::OutOfRange(format!(
                "target layer {} outside a {}-layer model",
                self.target_layer, model.cfg.n_layers
            )));
        }
        if let Some(k) = self.leaps.iter().find(|&&k| k == 0 || k > self.target_layer) {
            return Err(Error::OutOfRange(format!(
                "leap {k} does not fit below target layer {}",
                self.target_layer
            )));
        }
        if self.seq_len < 2 || self.seq_len > model.cfg.max_seq {
            return Err(Error::OutOfRange(format!(
                "sequence length {} not in [2, {}]",
                self.seq_len, model.cfg.max_seq
            )));
        }
        if self.n_train_sequences == 0 || self.n_eval_sequences == 0 {
            return Err(Error::InvalidConfig("sequence counts must be positive".into()));
        }
        self.fit.validate()
    }
}

/// One report per leap, in the order of `protocol.leaps`.
pub fn run_causal_protocol(model: &ToyModel, protocol: &CausalProtocol) -> Result<Vec<CausalReport>> {
    protocol.validate(model)?;
    let train = model.sample_corpus(protocol.n_train_sequences, protocol.seq_len, protocol.train_seed)?;
    let eval = model.sample_corpus(protocol.n_eval_sequences, protocol.seq_len, protocol.eval_seed)?;
    protocol
        .leaps
        .iter()
        .map(|&k| {
            let l = protocol.target_layer - k;
            let pairs = model.harvest_pairs(&train, l, k)?;
            let op = fit_cv(pairs.x(), pairs.y(), &protocol.fit)?;
            log::info!("leap {k}: layer {l} -> {}, alpha {}", l + k, op.alpha);
            let spec = CausalSpec {
                source_layer: l,
                leap: k,
                positions: protocol.positions,
            };
            causal_eval(model, &op, &eval, &spec, protocol.n_position_sets, protocol.position_seed)
        })
        .collect()
}

/// Upstream residual vector at `(layer, position)` of a trace.
pub fn residual_at(trace: &ForwardTrace, layer: usize, position: usize) -> DVector<f64> {
    trace.residuals[layer].row(position).transpose()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::FitStats;

    fn small() -> ToyModel {
        build_model(&ToyModelConfig {
            vocab: 16,
            d_model: 8,
            n_layers: 3,
            n_heads: 2,
            d_ff: 16,
            max_seq: 12,
            seed: 5,
            weight_scale: 1.0,
        })
        .unwrap()
    }

    fn identity_op(d: usize) -> TransportOperator {
        TransportOperator {
            t: Matrix::identity(d, d),
            b: DVector::zeros(d),
            rank: d,
            alpha: 0.0,
            x_mean: DVector::zeros(d),
            y_mean: DVector::zeros(d),
            fit_stats: FitStats::default(),
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = ToyModelConfig::reference();
        cfg.n_heads = 5;
        assert!(build_model(&cfg).is_err());
        cfg = ToyModelConfig::reference();
        cfg.vocab = 0;
        assert!(build_model(&cfg).is_err());
        cfg = ToyModelConfig::reference();
        cfg.weight_scale = 0.0;
        assert!(build_model(&cfg).is_err());
    }

    #[test]
    fn single_token_shapes() {
        let m = small();
        let t = m.forward(&[3]).unwrap();
        assert_eq!(t.logits.shape(), (1, 16));
        assert_eq!(t.residuals.len(), 3);
        assert!(m.forward(&[]).is_err());
        assert!(m.forward(&[16]).is_err());
        assert!(m.forward(&[0; 13]).is_err());
    }

    #[test]
    fn residual_identity() {
        let m = small();
        let t = m.forward(&[1, 5, 2, 9, 9, 0]).unwrap();
        let mut prev = t.embedded.clone();
        for l in 0..3 {
            let rebuilt = &prev + &t.attn_out[l] + &t.mlp_out[l];
            assert!((&rebuilt - &t.residuals[l]).abs().max() < 1e-12);
            prev = t.residuals[l].clone();
        }
    }

    #[test]
    fn none_matches_forward() {
        let m = small();
        let tokens = [4, 4, 1, 7, 3];
        assert_eq!(
            m.forward(&tokens).unwrap(),
            m.forward_intervened(&tokens, &InterventionSpec::none()).unwrap()
        );
    }

    #[test]
    fn zero_sets_target_rows() {
        let m = small();
        let tokens = [4, 4, 1, 7, 3];
        let pos = [1, 3];
        let t = m.forward_intervened(&tokens, &InterventionSpec::zero(0, 1, &pos)).unwrap();
        for &p in &pos {
            assert!(t.residuals[1].row(p).iter().all(|&v| v == 0.0));
        }
        assert!(t.residuals[1].row(0).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn ato_patch_replaces_target() {
        let m = small();
        let tokens = [2, 8, 8, 1, 0, 5];
        let pos = [2, 4];
        let mut op = identity_op(8);
        op.b = DVector::from_element(8, 0.5);
        let t = m
            .forward_intervened(&tokens, &InterventionSpec::ato_patch(0, 2, &pos, &op))
            .unwrap();
        for &p in &pos {
            let expect = op.predict_vector(&residual_at(&t, 0, p)).unwrap();
            assert!((residual_at(&t, 2, p) - expect).abs().max() < 1e-12);
        }
    }

    #[test]
    fn intervention_errors() {
        let m = small();
        let tokens = [1, 2, 3];
        let id = identity_op(8);
        let mut spec = InterventionSpec::ato_patch(0, 1, &[1], &id);
        spec.operator = None;
        assert!(m.forward_intervened(&tokens, &spec).is_err());
        let wrong = identity_op(4);
        assert!(m
            .forward_intervened(&tokens, &InterventionSpec::ato_patch(0, 1, &[1], &wrong))
            .is_err());
        assert!(m
            .forward_intervened(&tokens, &InterventionSpec::zero(1, 2, &[1]))
            .is_err());
        assert!(m
            .forward_intervened(&tokens, &InterventionSpec::zero(0, 1, &[3]))
            .is_err());
    }

    #[test]
    fn causal_masking() {
        let m = small();
        let a = m.forward(&[1, 2, 3, 4, 5, 6]).unwrap();
        let b = m.forward(&[1, 2, 3, 4, 0, 0]).unwrap();
        for i in 0..4 {
            assert!((a.logits.row(i) - b.logits.row(i)).abs().max() < 1e-9);
        }
    }

    #[test]
    fn uniform_logits_perplexity_is_vocab() {
        let trace = ForwardTrace {
            logits: Matrix::zeros(5, 16),
            residuals: vec![],
            embedded: Matrix::zeros(0, 0),
            attn_out: vec![],
            mlp_out: vec![],
        };
        let ppl = perplexity(&trace, &[0, 3, 9, 2, 15]).unwrap();
        assert!((ppl - 16.0).abs() < 1e-9);
        assert!(perplexity(&trace, &[1]).is_err());
    }

    #[test]
    fn confident_logits_perplexity_is_one() {
        let tokens = [0, 1, 2, 3];
        let logits = Matrix::from_fn(4, 4, |r, c| if c == (r + 1) % 4 { 60.0 } else { 0.0 });
        let trace = ForwardTrace {
            logits,
            residuals: vec![],
            embedded: Matrix::zeros(0, 0),
            attn_out: vec![],
            mlp_out: vec![],
        };
        assert!((perplexity(&trace, &tokens).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let l = Matrix::from_fn(3, 5, |r, c| (r as f64 - 1.0) * 30.0 + c as f64);
        let p = softmax_rows(&l);
        for row in p.row_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let m = small();
        let a = m.sample_corpus(3, 10, 77).unwrap();
        assert_eq!(a, m.sample_corpus(3, 10, 77).unwrap());
        assert!(a.iter().all(|s| s.len() == 10 && s.iter().all(|&t| t < 16)));
    }

    #[test]
    fn harvest_shapes() {
        let m = small();
        let seqs = m.sample_corpus(2, 6, 1).unwrap();
        let p = m.harvest_pairs(&seqs, 0, 2).unwrap();
        assert_eq!((p.n_rows(), p.d_model()), (12, 8));
        assert_eq!(p.meta().leap, 2);
        let t = m.forward(&seqs[1]).unwrap();
        assert_eq!(p.x().row(6 + 3), t.residuals[0].row(3));
        assert_eq!(p.y().row(6 + 3), t.residuals[2].row(3));
        assert!(m.harvest_pairs(&seqs, 1, 2).is_err());
    }

    #[test]
    fn position_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = PositionMode::Random(5).draw(64, &mut rng).unwrap();
        assert_eq!(p.len(), 5);
        assert!(p.windows(2).all(|w| w[0] < w[1]) && p[0] >= 1);
        assert!(PositionMode::Random(4).draw(4, &mut rng).is_err());
        assert_eq!(PositionMode::All.draw(3, &mut rng).unwrap(), vec![0, 1, 2]);
    }
}
