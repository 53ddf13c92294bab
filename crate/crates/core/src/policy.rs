//! Tiny audio-conditioned recurrent policy.
//!
//! The hidden state starts at `tanh(prompt_embedding[p] + mean(frames) . audio_proj)`
//! and advances one token at a time through a tanh cell; every state emits a
//! softmax over the vocabulary. Token `t` of a sequence is scored from the state
//! after consuming tokens `0..t`, so the first token (normally BOS) is scored too.
//!
//! Inference runs on plain vectors. Training rebuilds the same computation on a
//! [`Tape`] so gradients are exact.

use std::fmt;
use std::fs;
use std::ops::Deref;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::AudioClip;
use crate::autodiff::{log_softmax, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::synthgen::PROMPT_TEMPLATES;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const ANSWER: usize = 3;
pub const FIRST_LETTER: usize = 4;
pub const NUM_LETTERS: usize = 4;
pub const FIRST_FILLER: usize = FIRST_LETTER + NUM_LETTERS;
pub const MAX_DECODE_LEN: usize = 16;

pub fn letter_token(choice_index: usize) -> usize {
    assert!(choice_index < NUM_LETTERS, "only {NUM_LETTERS} choice letters");
    FIRST_LETTER + choice_index
}

pub fn letter_index(token: usize) -> Option<usize> {
    (FIRST_LETTER..FIRST_FILLER)
        .contains(&token)
        .then(|| token - FIRST_LETTER)
}

/// Response content: everything except BOS, EOS and PAD.
pub fn is_content_token(token: usize) -> bool {
    !matches!(token, PAD | BOS | EOS)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct TokenSeq(pub Vec<usize>);

impl Deref for TokenSeq {
    type Target = [usize];

    fn deref(&self) -> &[usize] {
        &self.0
    }
}

impl From<Vec<usize>> for TokenSeq {
    fn from(v: Vec<usize>) -> Self {
        Self(v)
    }
}

impl fmt::Display for TokenSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = self.0.iter().map(|&t| token_name(t)).collect();
        write!(f, "[{}]", names.join(" "))
    }
}

pub fn token_name(t: usize) -> String {
    match t {
        PAD => "<pad>".into(),
        BOS => "<bos>".into(),
        EOS => "<eos>".into(),
        ANSWER => "<answer>".into(),
        t if letter_index(t).is_some() => ((b'A' + (t - FIRST_LETTER) as u8) as char).to_string(),
        t => format!("f{}", t - FIRST_FILLER),
    }
}

/// `[BOS, ANSWER, letter, EOS]`.
pub fn canonical_answer(choice_index: usize) -> TokenSeq {
    TokenSeq(vec![BOS, ANSWER, letter_token(choice_index), EOS])
}

/// Template index of a prompt; unknown prompts fall back to a stable hash.
pub fn prompt_id(prompt: &str) -> usize {
    PROMPT_TEMPLATES
        .iter()
        .position(|t| *t == prompt)
        .unwrap_or_else(|| {
            let h = prompt
                .bytes()
                .fold(0xcbf29ce484222325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3));
            (h % PROMPT_TEMPLATES.len() as u64) as usize
        })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenDist(pub Vec<f64>);

impl TokenDist {
    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| {
            if x > bv {
                (i, x)
            } else {
                (bi, bv)
            }
        })
        .0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn random(rows: usize, cols: usize, std: f64, stream: &mut Stream) -> Self {
        let data = (0..rows * cols)
            .map(|_| std * stream.sample::<f64, _>(StandardNormal))
            .collect();
        Self { rows, cols, data }
    }

    /// `x . self` for a row vector `x` of length `rows`.
    pub fn left_mul(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(self.row(i)) {
                *o += xi * w;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyShape {
    pub vocab: usize,
    pub hidden: usize,
    pub feature_dim: usize,
    pub prompts: usize,
}

impl Default for PolicyShape {
    fn default() -> Self {
        Self {
            vocab: 32,
            hidden: 32,
            feature_dim: 16,
            prompts: PROMPT_TEMPLATES.len(),
        }
    }
}

pub const BLOCK_NAMES: [&str; 8] = [
    "token_embedding",
    "audio_proj",
    "prompt_embedding",
    "input_weights",
    "recurrent_weights",
    "hidden_bias",
    "output_proj",
    "output_bias",
];

/// All learnable weights. Also serves as the gradient record (same layout).
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub token_embedding: Matrix,
    pub audio_proj: Matrix,
    pub prompt_embedding: Matrix,
    pub input_weights: Matrix,
    pub recurrent_weights: Matrix,
    pub hidden_bias: Matrix,
    pub output_proj: Matrix,
    pub output_bias: Matrix,
}

impl PolicyParams {
    pub fn zeros(shape: PolicyShape) -> Self {
        let PolicyShape {
            vocab: v,
            hidden: h,
            feature_dim: d,
            prompts: p,
        } = shape;
        assert!(v >= FIRST_FILLER, "vocabulary must hold the special and letter tokens");
        Self {
            token_embedding: Matrix::zeros(v, h),
            audio_proj: Matrix::zeros(d, h),
            prompt_embedding: Matrix::zeros(p, h),
            input_weights: Matrix::zeros(h, h),
            recurrent_weights: Matrix::zeros(h, h),
            hidden_bias: Matrix::zeros(1, h),
            output_proj: Matrix::zeros(h, v),
            output_bias: Matrix::zeros(1, v),
        }
    }

    pub fn init(shape: PolicyShape, stream: &mut Stream) -> Self {
        let PolicyShape {
            vocab: v,
            hidden: h,
            feature_dim: d,
            prompts: p,
        } = shape;
        let mut params = Self::zeros(shape);
        let hs = 1.0 / (h as f64).sqrt();
        params.token_embedding = Matrix::random(v, h, 0.3, stream);
        params.audio_proj = Matrix::random(d, h, 0.3 / (d as f64).sqrt(), stream);
        params.prompt_embedding = Matrix::random(p, h, 0.1, stream);
        params.input_weights = Matrix::random(h, h, hs, stream);
        params.recurrent_weights = Matrix::random(h, h, 0.5 * hs, stream);
        params.output_proj = Matrix::random(h, v, hs, stream);
        params
    }

    pub fn shape(&self) -> PolicyShape {
        PolicyShape {
            vocab: self.output_bias.cols,
            hidden: self.hidden_bias.cols,
            feature_dim: self.audio_proj.rows,
            prompts: self.prompt_embedding.rows,
        }
    }

    pub fn vocab(&self) -> usize {
        self.output_bias.cols
    }

    pub fn hidden(&self) -> usize {
        self.hidden_bias.cols
    }

    pub fn blocks(&self) -> [(&'static str, &Matrix); 8] {
        [
            (BLOCK_NAMES[0], &self.token_embedding),
            (BLOCK_NAMES[1], &self.audio_proj),
            (BLOCK_NAMES[2], &self.prompt_embedding),
            (BLOCK_NAMES[3], &self.input_weights),
            (BLOCK_NAMES[4], &self.recurrent_weights),
            (BLOCK_NAMES[5], &self.hidden_bias),
            (BLOCK_NAMES[6], &self.output_proj),
            (BLOCK_NAMES[7], &self.output_bias),
        ]
    }

    pub fn blocks_mut(&mut self) -> [(&'static str, &mut Matrix); 8] {
        [
            (BLOCK_NAMES[0], &mut self.token_embedding),
            (BLOCK_NAMES[1], &mut self.audio_proj),
            (BLOCK_NAMES[2], &mut self.prompt_embedding),
            (BLOCK_NAMES[3], &mut self.input_weights),
            (BLOCK_NAMES[4], &mut self.recurrent_weights),
            (BLOCK_NAMES[5], &mut self.hidden_bias),
            (BLOCK_NAMES[6], &mut self.output_proj),
            (BLOCK_NAMES[7], &mut self.output_bias),
        ]
    }

    pub fn block(&self, name: &str) -> Option<&Matrix> {
        self.blocks().into_iter().find(|(n, _)| *n == name).map(|(_, m)| m)
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|(_, m)| m.data.len()).sum()
    }

    /// Flat view over all parameters in block order.
    pub fn flat(&self) -> Vec<f64> {
        self.blocks().iter().flat_map(|(_, m)| m.data.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.param_count());
        let mut it = values.iter();
        for (_, m) in self.blocks_mut() {
            for v in &mut m.data {
                *v = *it.next().unwrap();
            }
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.shape())
    }

    pub fn add_scaled(&mut self, other: &PolicyParams, scale: f64) {
        for ((_, a), (_, b)) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += scale * y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|(_, m)| m.data.iter().all(|v| v.is_finite()))
    }

    /// SHA-256 over the exact f64 bits of every block.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, m) in self.blocks() {
            h.update(name.as_bytes());
            for v in &m.data {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// Checkpoint bytes: per block `u32` name length, name, `u32` rows, `u32` cols,
    /// then `f32` values, all little-endian.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, m) in self.blocks() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.rows as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols as u32).to_le_bytes());
            for v in &m.data {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut cursor = 0usize;
        let mut take = |n: usize| -> std::result::Result<&[u8], String> {
            let s = bytes
                .get(cursor..cursor + n)
                .ok_or_else(|| format!("checkpoint truncated at byte {cursor}"))?;
            cursor += n;
            Ok(s)
        };
        let mut found: Vec<(String, Matrix)> = Vec::new();
        while found.len() < BLOCK_NAMES.len() {
            let len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(len)?.to_vec()).map_err(|e| e.to_string())?;
            let rows = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let cols = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let data = take(rows * cols * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            found.push((name, Matrix { rows, cols, data }));
        }
        if cursor != bytes.len() {
            return Err("trailing bytes after checkpoint blocks".into());
        }
        let mut get = |name: &str| -> std::result::Result<Matrix, String> {
            let i = found
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| format!("missing block `{name}`"))?;
            Ok(found.swap_remove(i).1)
        };
        let params = Self {
            token_embedding: get("token_embedding")?,
            audio_proj: get("audio_proj")?,
            prompt_embedding: get("prompt_embedding")?,
            input_weights: get("input_weights")?,
            recurrent_weights: get("recurrent_weights")?,
            hidden_bias: get("hidden_bias")?,
            output_proj: get("output_proj")?,
            output_bias: get("output_bias")?,
        };
        let expected = Self::zeros(params.shape());
        for ((name, a), (_, b)) in params.blocks().iter().zip(expected.blocks()) {
            if (a.rows, a.cols) != (b.rows, b.cols) {
                return Err(format!("block `{name}` has inconsistent shape"));
            }
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes).map_err(|reason| Error::InvalidField {
            field: path.display().to_string(),
            reason,
        })
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode_audio(params: &PolicyParams, clip: &AudioClip) -> Result<Vec<f64>> {
    if clip.feature_dim() != params.audio_proj.rows {
        return Err(Error::DimMismatch {
            expected: params.audio_proj.rows,
            got: clip.feature_dim(),
        });
    }
    Ok(params.audio_proj.left_mul(&clip.mean_frame()))
}

/// Prompt template plus pooled audio: everything the decoder is conditioned on.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub prompt_id: usize,
    pub mean_frame: Vec<f64>,
}

impl Conditioning {
    pub fn new(prompt_id: usize, clip: &AudioClip) -> Self {
        Self {
            prompt_id,
            mean_frame: clip.mean_frame(),
        }
    }
}

fn check_tokens(params: &PolicyParams, tokens: &[usize]) -> Result<()> {
    let vocab = params.vocab();
    match tokens.iter().find(|&&t| t >= vocab) {
        Some(&token) => Err(Error::TokenOutOfRange { token, vocab }),
        None => Ok(()),
    }
}

fn initial_state(params: &PolicyParams, prompt_id: usize, audio_h: &[f64]) -> Vec<f64> {
    params
        .prompt_embedding
        .row(prompt_id)
        .iter()
        .zip(audio_h)
        .map(|(p, a)| (p + a).tanh())
        .collect()
}

fn advance(params: &PolicyParams, h: &[f64], token: usize) -> Vec<f64> {
    let from_token = params
        .input_weights
        .left_mul(params.token_embedding.row(token));
    let from_state = params.recurrent_weights.left_mul(h);
    from_token
        .iter()
        .zip(&from_state)
        .zip(&params.hidden_bias.data)
        .map(|((a, b), c)| (a + b + c).tanh())
        .collect()
}

fn logits(params: &PolicyParams, h: &[f64]) -> Vec<f64> {
    let mut out = params.output_proj.left_mul(h);
    out.iter_mut()
        .zip(&params.output_bias.data)
        .for_each(|(o, b)| *o += b);
    out
}

/// Log-distributions at every position of `tokens` (position `t` predicts `tokens[t]`).
pub fn token_log_dists(
    params: &PolicyParams,
    prompt_id: usize,
    audio_h: &[f64],
    tokens: &[usize],
) -> Result<Vec<Vec<f64>>> {
    check_tokens(params, tokens)?;
    let mut h = initial_state(params, prompt_id, audio_h);
    let mut out = Vec::with_capacity(tokens.len());
    for (t, &tok) in tokens.iter().enumerate() {
        out.push(log_softmax(&logits(params, &h)));
        if t + 1 < tokens.len() {
            h = advance(params, &h, tok);
        }
    }
    Ok(out)
}

pub fn next_token_dist(
    params: &PolicyParams,
    prompt_id: usize,
    audio_h: &[f64],
    prefix: &[usize],
) -> Result<TokenDist> {
    check_tokens(params, prefix)?;
    let mut h = initial_state(params, prompt_id, audio_h);
    for &tok in prefix {
        h = advance(params, &h, tok);
    }
    Ok(TokenDist(
        log_softmax(&logits(params, &h)).into_iter().map(f64::exp).collect(),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceScore {
    pub avg_logprob: f64,
    pub per_token: Vec<f64>,
}

pub fn score_tokens(
    params: &PolicyParams,
    prompt_id: usize,
    audio_h: &[f64],
    tokens: &[usize],
) -> Result<SequenceScore> {
    if tokens.is_empty() {
        return Err(Error::InvalidField {
            field: "tokens".into(),
            reason: "cannot score an empty sequence".into(),
        });
    }
    let dists = token_log_dists(params, prompt_id, audio_h, tokens)?;
    let per_token: Vec<f64> = dists.iter().zip(tokens).map(|(d, &t)| d[t]).collect();
    Ok(SequenceScore {
        avg_logprob: per_token.iter().sum::<f64>() / per_token.len() as f64,
        per_token,
    })
}

pub fn sequence_logprob(
    params: &PolicyParams,
    prompt_id: usize,
    clip: &AudioClip,
    tokens: &[usize],
) -> Result<SequenceScore> {
    let audio_h = encode_audio(params, clip)?;
    score_tokens(params, prompt_id, &audio_h, tokens)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoding {
    Greedy,
    Sample { temperature: f64 },
}

impl Decoding {
    pub fn from_temperature(temperature: f64) -> Self {
        if temperature > 0.0 {
            Decoding::Sample { temperature }
        } else {
            Decoding::Greedy
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub tokens: TokenSeq,
    /// Untempered model log-probability of each emitted token.
    pub logprobs: Vec<f64>,
}

impl Decoded {
    pub fn avg_logprob(&self) -> f64 {
        self.logprobs.iter().sum::<f64>() / self.logprobs.len() as f64
    }
}

/// Ancestral decoding until EOS or [`MAX_DECODE_LEN`] tokens.
pub fn decode(
    params: &PolicyParams,
    prompt_id: usize,
    audio_h: &[f64],
    mode: Decoding,
    stream: &mut Stream,
) -> Decoded {
    let mut h = initial_state(params, prompt_id, audio_h);
    let mut tokens = Vec::new();
    let mut logprobs = Vec::new();
    loop {
        let z = logits(params, &h);
        let lp = log_softmax(&z);
        let tok = match mode {
            Decoding::Greedy => argmax(&lp),
            Decoding::Sample { temperature } => {
                let scaled: Vec<f64> = z.iter().map(|v| v / temperature).collect();
                sample_index(&log_softmax(&scaled), stream.random::<f64>())
            }
        };
        tokens.push(tok);
        logprobs.push(lp[tok]);
        if tok == EOS || tokens.len() >= MAX_DECODE_LEN {
            break;
        }
        h = advance(params, &h, tok);
    }
    Decoded {
        tokens: TokenSeq(tokens),
        logprobs,
    }
}

/// Argmax decoding; consumes no randomness.
pub fn greedy_decode(params: &PolicyParams, prompt_id: usize, audio_h: &[f64]) -> Decoded {
    let mut unused = crate::rng::rng_stream(0, "", "greedy");
    decode(params, prompt_id, audio_h, Decoding::Greedy, &mut unused)
}

fn sample_index(logp: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, lp) in logp.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    // rounding left u above the cumulative total
    logp.len() - 1
}

/// Every parameter block registered as a tape leaf.
#[derive(Debug, Clone, Copy)]
pub struct BoundParams {
    pub token_embedding: Var,
    pub audio_proj: Var,
    pub prompt_embedding: Var,
    pub input_weights: Var,
    pub recurrent_weights: Var,
    pub hidden_bias: Var,
    pub output_proj: Var,
    pub output_bias: Var,
}

impl BoundParams {
    pub fn bind(tape: &mut Tape, params: &PolicyParams) -> Self {
        let mut leaf = |m: &Matrix| tape.leaf(m.rows, m.cols, m.data.clone());
        Self {
            token_embedding: leaf(&params.token_embedding),
            audio_proj: leaf(&params.audio_proj),
            prompt_embedding: leaf(&params.prompt_embedding),
            input_weights: leaf(&params.input_weights),
            recurrent_weights: leaf(&params.recurrent_weights),
            hidden_bias: leaf(&params.hidden_bias),
            output_proj: leaf(&params.output_proj),
            output_bias: leaf(&params.output_bias),
        }
    }

    fn vars(&self) -> [Var; 8] {
        [
            self.token_embedding,
            self.audio_proj,
            self.prompt_embedding,
            self.input_weights,
            self.recurrent_weights,
            self.hidden_bias,
            self.output_proj,
            self.output_bias,
        ]
    }

    pub fn gradients(&self, tape: &Tape, grads: &Gradients, like: &PolicyParams) -> PolicyParams {
        let mut out = like.zeros_like();
        for ((_, m), v) in out.blocks_mut().into_iter().zip(self.vars()) {
            m.data = grads.of(tape, v);
        }
        out
    }

    /// Taped version of [`token_log_dists`]: one log-softmax node per position.
    pub fn token_log_dists(&self, tape: &mut Tape, cond: &Conditioning, tokens: &[usize]) -> Vec<Var> {
        let frame = tape.constant_vec(cond.mean_frame.clone());
        let audio_h = tape.vecmat(frame, self.audio_proj);
        let prompt = tape.row(self.prompt_embedding, cond.prompt_id);
        let pre = tape.add(prompt, audio_h);
        let mut h = tape.tanh(pre);
        let mut out = Vec::with_capacity(tokens.len());
        for (t, &tok) in tokens.iter().enumerate() {
            let z = tape.vecmat(h, self.output_proj);
            let z = tape.add(z, self.output_bias);
            out.push(tape.log_softmax(z));
            if t + 1 < tokens.len() {
                let emb = tape.row(self.token_embedding, tok);
                let a = tape.vecmat(emb, self.input_weights);
                let b = tape.vecmat(h, self.recurrent_weights);
                let s = tape.add(a, b);
                let s = tape.add(s, self.hidden_bias);
                h = tape.tanh(s);
            }
        }
        out
    }

    /// Taped mean log-probability of `tokens`.
    pub fn avg_logprob(&self, tape: &mut Tape, cond: &Conditioning, tokens: &[usize]) -> Var {
        let dists = self.token_log_dists(tape, cond, tokens);
        let picked: Vec<Var> = dists
            .iter()
            .zip(tokens)
            .map(|(&d, &t)| tape.pick(d, t))
            .collect();
        tape.mean_of(&picked)
    }
}

/// Evaluates `build` on a fresh tape with `params` bound as leaves and returns
/// the loss value with its exact gradient. `params` is not modified.
pub fn compute_gradients<F>(params: &PolicyParams, build: F) -> Result<(f64, PolicyParams)>
where
    F: FnOnce(&mut Tape, &BoundParams) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let loss = build(&mut tape, &bound)?;
    let grads = tape.backward(loss)?;
    Ok((tape.scalar(loss), bound.gradients(&tape, &grads, params)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_stream;

    fn random_params(seed: u64) -> PolicyParams {
        PolicyParams::init(PolicyShape::default(), &mut rng_stream(seed, "policy", "init"))
    }

    fn clip(frames: usize, seed: u64) -> AudioClip {
        let mut s = rng_stream(seed, "clip", "test");
        AudioClip::from_flat(16, (0..frames * 16).map(|_| s.random::<f32>() - 0.5).collect()).unwrap()
    }

    #[test]
    fn parameter_budget() {
        let p = random_params(0);
        assert!(p.param_count() < 50_000, "{}", p.param_count());
        assert!(p.is_finite());
    }

    #[test]
    fn zero_clip_encodes_to_zero() {
        let p = random_params(1);
        assert!(encode_audio(&p, &AudioClip::zeros(8, 16)).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoding_is_permutation_invariant() {
        let p = random_params(2);
        let c = clip(6, 3);
        let mut frames: Vec<Vec<f32>> = c.frames().map(<[f32]>::to_vec).collect();
        frames.reverse();
        frames.swap(0, 3);
        let permuted = AudioClip::from_frames(&frames).unwrap();
        let a = encode_audio(&p, &c).unwrap();
        let b = encode_audio(&p, &permuted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_frame_selects_projection_row() {
        let p = random_params(4);
        let mut frame = vec![0.0f32; 16];
        frame[5] = 1.0;
        let c = AudioClip::from_frames(&[frame]).unwrap();
        assert_eq!(encode_audio(&p, &c).unwrap(), p.audio_proj.row(5).to_vec());
    }

    #[test]
    fn wrong_feature_dim_rejected() {
        let p = random_params(4);
        assert!(matches!(
            encode_audio(&p, &AudioClip::zeros(3, 8)),
            Err(Error::DimMismatch { expected: 16, got: 8 })
        ));
    }

    #[test]
    fn zero_params_give_uniform() {
        let p = PolicyParams::zeros(PolicyShape::default());
        let d = next_token_dist(&p, 0, &[0.0; 32], &[BOS, 9]).unwrap();
        for &q in d.probs() {
            assert!((q - 1.0 / 32.0).abs() < 1e-15);
        }
        let s = score_tokens(&p, 0, &[0.0; 32], &[7]).unwrap();
        assert!((s.avg_logprob - (1.0f64 / 32.0).ln()).abs() < 1e-12);
        let long = score_tokens(&p, 1, &[0.0; 32], &[BOS, ANSWER, 5, 12, EOS]).unwrap();
        assert!((long.avg_logprob - (1.0f64 / 32.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn output_bump_moves_argmax() {
        let mut p = random_params(5);
        p.prompt_embedding.data[0] = 3.0;
        let audio_h = vec![0.0; 32];
        let before = next_token_dist(&p, 0, &audio_h, &[]).unwrap();
        // hidden unit 0 is tanh(3) > 0, so the bump raises token 17's logit
        p.output_proj.data[17] += 10.0;
        let after = next_token_dist(&p, 0, &audio_h, &[]).unwrap();
        assert_eq!(after.argmax(), 17);
        assert!(after.probs()[17] > before.probs()[17]);
        assert_eq!(after, next_token_dist(&p, 0, &audio_h, &[]).unwrap());
    }

    #[test]
    fn out_of_range_token_rejected() {
        let p = random_params(6);
        assert!(matches!(
            next_token_dist(&p, 0, &[0.0; 32], &[BOS, 40]),
            Err(Error::TokenOutOfRange { token: 40, vocab: 32 })
        ));
    }

    #[test]
    fn mean_matches_per_token() {
        let p = random_params(7);
        let s = sequence_logprob(&p, 2, &clip(5, 2), &[BOS, ANSWER, 6, EOS]).unwrap();
        let mean = s.per_token.iter().sum::<f64>() / 4.0;
        assert!((s.avg_logprob - mean).abs() < 1e-12);
    }

    #[test]
    fn taped_forward_matches_plain_forward() {
        let p = random_params(8);
        let c = clip(5, 4);
        let cond = Conditioning::new(3, &c);
        let tokens = [BOS, 9, ANSWER, 5, EOS];
        let plain = token_log_dists(&p, 3, &encode_audio(&p, &c).unwrap(), &tokens).unwrap();
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &p);
        let taped = bound.token_log_dists(&mut tape, &cond, &tokens);
        for (a, &b) in plain.iter().zip(&taped) {
            for (x, y) in a.iter().zip(tape.value(b)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn quadratic_loss_gradient() {
        let p = random_params(9);
        let (_, g) = compute_gradients(&p, |tape, b| {
            let sq = tape.mul(b.output_proj, b.output_proj);
            Ok(tape.sum(sq))
        })
        .unwrap();
        for (gv, pv) in g.output_proj.data.iter().zip(&p.output_proj.data) {
            assert_eq!(*gv, 2.0 * pv);
        }
        assert!(g.audio_proj.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn greedy_decoding_is_deterministic() {
        let p = random_params(10);
        let h = encode_audio(&p, &clip(4, 5)).unwrap();
        let a = decode(&p, 0, &h, Decoding::Greedy, &mut rng_stream(1, "x", "a"));
        let b = decode(&p, 0, &h, Decoding::Greedy, &mut rng_stream(2, "y", "b"));
        assert_eq!(a, b);
        assert!(a.tokens.len() <= MAX_DECODE_LEN);
    }

    #[test]
    fn checkpoint_layout_and_round_trip() {
        let p = random_params(11);
        let bytes = p.to_checkpoint_bytes();
        assert_eq!(&bytes[..4], &15u32.to_le_bytes());
        assert_eq!(&bytes[4..19], b"token_embedding");
        assert_eq!(&bytes[19..23], &32u32.to_le_bytes());
        assert_eq!(&bytes[23..27], &32u32.to_le_bytes());
        let back = PolicyParams::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(back.to_checkpoint_bytes(), bytes);
        assert!(PolicyParams::from_checkpoint_bytes(&bytes[..bytes.len() - 2]).is_err());
    }

    #[test]
    fn prompt_ids() {
        assert_eq!(prompt_id(PROMPT_TEMPLATES[2]), 2);
        let other = prompt_id("something else entirely");
        assert!(other < PROMPT_TEMPLATES.len());
        assert_eq!(other, prompt_id("something else entirely"));
    }
}
