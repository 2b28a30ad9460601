//! A small editable associative model standing in for a language model.
//!
//! A prompt `(subject, relation)` is encoded into a unit key
//! `k = normalize(tanh(M·[E_s; E_r]))`, passed through the edited layer
//! `h = W·k` whose rows live on the Poincaré ball, and decoded into vocabulary
//! logits `D·h`. Only `W` changes during editing; the embedding table and
//! mixing matrix are fixed at construction and the decoder after fitting.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::hyperbolic::{norm, project_coords, BallPoint, Curvature};
use crate::kg::{entities_of, relations_of, Triple};
use crate::request::Prompt;

pub const PARAPHRASE_SUFFIX: &str = "~para";
pub const PORTABILITY_SUFFIX: &str = "~port";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TokenKind {
    Entity,
    Relation,
    /// Rephrasing of `base`, embedded near it with relative perturbation `spread`.
    Alias { base: String, spread: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Token {
    pub name: String,
    #[serde(flatten)]
    pub kind: TokenKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<Token>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(tokens: Vec<Token>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("vocabulary must be non-empty".into()));
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.name.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate token `{}`", t.name)));
            }
        }
        for t in &tokens {
            if let TokenKind::Alias { base, .. } = &t.kind {
                if !index.contains_key(base) {
                    return Err(Error::Vocabulary(base.clone()));
                }
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Entities, relations, and two rephrasings per relation (`r~para`
    /// close to `r`, `r~port` further away).
    pub fn from_triples(triples: &[Triple], paraphrase_spread: f64, portability_spread: f64) -> Result<Self> {
        let mut tokens: Vec<Token> =
            entities_of(triples).into_iter().map(|name| Token { name, kind: TokenKind::Entity }).collect();
        let relations = relations_of(triples);
        tokens.extend(relations.iter().map(|r| Token { name: r.clone(), kind: TokenKind::Relation }));
        for r in &relations {
            tokens.push(Token {
                name: format!("{r}{PARAPHRASE_SUFFIX}"),
                kind: TokenKind::Alias { base: r.clone(), spread: paraphrase_spread },
            });
            tokens.push(Token {
                name: format!("{r}{PORTABILITY_SUFFIX}"),
                kind: TokenKind::Alias { base: r.clone(), spread: portability_spread },
            });
        }
        Vocab::new(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index.get(name).copied().ok_or_else(|| Error::Vocabulary(name.to_owned()))
    }

    pub fn token(&self, id: usize) -> &Token {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn entity_ids(&self) -> Vec<usize> {
        (0..self.tokens.len()).filter(|&i| self.tokens[i].kind == TokenKind::Entity).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Output width `m` of the edited layer (number of ball rows).
    pub hidden: usize,
    /// Key width `n` (dimension of each ball row).
    pub key_dim: usize,
    pub embed_dim: usize,
    /// Relative size of relation embeddings against subject embeddings.
    pub relation_scale: f64,
    /// Gain applied before the key nonlinearity.
    pub mixing_gain: f64,
    pub paraphrase_spread: f64,
    pub portability_spread: f64,
    pub curvature: Curvature,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 64,
            key_dim: 256,
            embed_dim: 128,
            relation_scale: 0.6,
            mixing_gain: 3.0,
            paraphrase_spread: 0.35,
            portability_spread: 0.9,
            curvature: Curvature::default(),
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub steps: usize,
    pub lr: f64,
    /// Rows of `W` are held within this fraction of the ball radius while fitting.
    pub row_radius: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig { steps: 1000, lr: 0.15, row_radius: 0.3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub steps: usize,
    pub final_loss: f64,
    pub accuracy: f64,
}

/// Mutable state of a model: the edited layer and the decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    weights: Array2<f64>,
    decoder: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    config: ModelConfig,
    vocab: Vocab,
    embed: Array2<f64>,
    mixing: Array2<f64>,
    weights: Array2<f64>,
    decoder: Array2<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng, shape: (usize, usize), scale: f64) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| rng.sample::<f64, _>(StandardNormal) * scale)
}

fn log_softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    logits.mapv(|x| x - lse)
}

impl ToyModel {
    pub fn new(vocab: Vocab, config: ModelConfig) -> Result<Self> {
        if config.hidden < 2 || config.key_dim < 2 || config.embed_dim < 1 {
            return Err(Error::InvalidArgument("model dims must satisfy m, n >= 2".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.embed_dim;
        let unit = 1.0 / (d as f64).sqrt();

        let mut embed = Array2::zeros((vocab.len(), d));
        for (i, t) in vocab.tokens().iter().enumerate() {
            let scale = match t.kind {
                TokenKind::Entity => unit,
                _ => unit * config.relation_scale,
            };
            let row = gaussian(&mut rng, (1, d), scale);
            embed.row_mut(i).assign(&row.row(0));
        }
        for (i, t) in vocab.tokens().iter().enumerate() {
            if let TokenKind::Alias { base, spread } = &t.kind {
                let base_row = embed.row(vocab.id(base)?).to_owned();
                let noise = gaussian(&mut rng, (1, d), unit * config.relation_scale * spread);
                embed.row_mut(i).assign(&(&base_row + &noise.row(0)));
            }
        }

        let mixing = gaussian(&mut rng, (config.key_dim, 2 * d), config.mixing_gain / ((2 * d) as f64).sqrt());

        let c = config.curvature;
        let mut weights = Array2::zeros((config.hidden, config.key_dim));
        for mut row in weights.rows_mut() {
            let dir = gaussian(&mut rng, (1, config.key_dim), 1.0);
            let n = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            let radius = 0.5 * c.radius() * rng.random::<f64>();
            row.assign(&(dir.row(0).mapv(|x| x * radius / n)));
        }
        let decoder = gaussian(&mut rng, (vocab.len(), config.hidden), 1.0 / (config.hidden as f64).sqrt());

        Ok(ToyModel { config, vocab, embed, mixing, weights, decoder })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn curvature(&self) -> Curvature {
        self.config.curvature
    }

    /// `(m, n)` of the edited layer.
    pub fn dims(&self) -> (usize, usize) {
        self.weights.dim()
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn decoder(&self) -> &Array2<f64> {
        &self.decoder
    }

    pub fn weight_rows(&self) -> Result<Vec<BallPoint>> {
        self.weights
            .rows()
            .into_iter()
            .map(|r| BallPoint::new(r.to_vec(), self.curvature()))
            .collect()
    }

    /// Replaces the edited layer; every row must be a valid ball point.
    pub fn set_weights(&mut self, weights: Array2<f64>) -> Result<()> {
        if weights.dim() != self.weights.dim() {
            return Err(Error::Config(format!(
                "weight shape {:?} does not match layer {:?}",
                weights.dim(),
                self.weights.dim()
            )));
        }
        let limit = self.curvature().max_norm();
        for (i, row) in weights.rows().into_iter().enumerate() {
            let n = norm(&row.to_vec());
            if !n.is_finite() || n > limit {
                return Err(Error::Domain(format!("row {i} has norm {n}, bound is {limit}")));
            }
        }
        self.weights = weights;
        Ok(())
    }

    /// Permutes decoder rows; used to check output equivariance.
    pub fn permute_decoder(&mut self, perm: &[usize]) -> Result<()> {
        if perm.len() != self.decoder.nrows() {
            return Err(Error::InvalidArgument("permutation length mismatch".into()));
        }
        self.decoder = self.decoder.select(Axis(0), perm);
        Ok(())
    }

    pub fn key(&self, prompt: &Prompt) -> Result<Array1<f64>> {
        let s = self.vocab.id(&prompt.subject)?;
        let r = self.vocab.id(&prompt.relation)?;
        let d = self.config.embed_dim;
        let mut input = Array1::zeros(2 * d);
        input.slice_mut(ndarray::s![..d]).assign(&self.embed.row(s));
        input.slice_mut(ndarray::s![d..]).assign(&self.embed.row(r));
        let k = self.mixing.dot(&input).mapv(f64::tanh);
        let n = k.dot(&k).sqrt();
        if n == 0.0 {
            return Ok(k);
        }
        Ok(k / n)
    }

    pub fn keys(&self, prompts: &[Prompt]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((prompts.len(), self.config.key_dim));
        for (i, p) in prompts.iter().enumerate() {
            out.row_mut(i).assign(&self.key(p)?);
        }
        Ok(out)
    }

    pub fn hidden_state(&self, prompt: &Prompt) -> Result<Array1<f64>> {
        Ok(self.weights.dot(&self.key(prompt)?))
    }

    pub fn logits_from_hidden(&self, hidden: &Array1<f64>) -> Array1<f64> {
        self.decoder.dot(hidden)
    }

    pub fn log_probs(&self, prompt: &Prompt) -> Result<Array1<f64>> {
        Ok(log_softmax(&self.logits_from_hidden(&self.hidden_state(prompt)?)))
    }

    /// Probability vector over the whole vocabulary.
    pub fn forward(&self, prompt: &Prompt) -> Result<Vec<f64>> {
        let lp = self.log_probs(prompt)?;
        let p: Vec<f64> = lp.iter().map(|x| x.exp()).collect();
        let total: f64 = p.iter().sum();
        Ok(p.into_iter().map(|x| x / total).collect())
    }

    /// `-log P(token | prompt)`.
    pub fn nll(&self, prompt: &Prompt, token: &str) -> Result<f64> {
        let id = self.vocab.id(token)?;
        Ok((-self.log_probs(prompt)?[id]).max(0.0))
    }

    /// Highest-scoring entity token (relations and aliases are never answers).
    pub fn top1_entity(&self, prompt: &Prompt) -> Result<String> {
        let lp = self.log_probs(prompt)?;
        let best = self
            .vocab
            .entity_ids()
            .into_iter()
            .max_by(|&a, &b| lp[a].total_cmp(&lp[b]).then(b.cmp(&a)))
            .ok_or_else(|| Error::InvalidArgument("vocabulary has no entities".into()))?;
        Ok(self.vocab.token(best).name.clone())
    }

    pub fn snapshot(&self) -> ModelState {
        ModelState { weights: self.weights.clone(), decoder: self.decoder.clone() }
    }

    pub fn restore(&mut self, state: &ModelState) -> Result<()> {
        if state.weights.dim() != self.weights.dim() || state.decoder.dim() != self.decoder.dim() {
            return Err(Error::Config("snapshot shape does not match model".into()));
        }
        self.weights = state.weights.clone();
        self.decoder = state.decoder.clone();
        Ok(())
    }

    /// Log-probabilities for a batch of keys with `W` supplied as a tape node.
    pub fn tape_log_probs(&self, tape: &mut Tape, weights: Var, keys: Var) -> Var {
        let decoder_t = tape.leaf(self.decoder.t().to_owned());
        self.tape_log_probs_with(tape, weights, keys, decoder_t)
    }

    fn tape_log_probs_with(&self, tape: &mut Tape, weights: Var, keys: Var, decoder_t: Var) -> Var {
        let wt = tape.transpose(weights);
        let hidden = tape.matmul(keys, wt);
        let logits = tape.matmul(hidden, decoder_t);
        tape.log_softmax_rows(logits)
    }

    /// Supervised fit of `W` and the decoder on `(prompt, answer)` pairs
    /// with Adam, holding rows of `W` within `row_radius` of the ball radius.
    pub fn fit(&mut self, examples: &[(Prompt, String)], fit: &FitConfig) -> Result<FitReport> {
        if examples.is_empty() {
            return Err(Error::InvalidArgument("nothing to fit".into()));
        }
        let prompts: Vec<Prompt> = examples.iter().map(|(p, _)| p.clone()).collect();
        let keys = self.keys(&prompts)?;
        let mut targets = Array2::zeros((examples.len(), self.vocab.len()));
        for (i, (_, t)) in examples.iter().enumerate() {
            targets[[i, self.vocab.id(t)?]] = 1.0;
        }
        let limit = fit.row_radius * self.curvature().radius();
        let mut adam = [Adam::new(self.weights.dim()), Adam::new(self.decoder.dim())];
        let mut last = f64::NAN;
        for step in 0..fit.steps {
            let mut tape = Tape::new();
            let w = tape.leaf(self.weights.clone());
            let dt = tape.leaf(self.decoder.t().to_owned());
            let k = tape.leaf(keys.clone());
            let lp = self.tape_log_probs_with(&mut tape, w, k, dt);
            let tgt = tape.leaf(targets.clone());
            let picked = tape.mul(lp, tgt);
            let total = tape.sum(picked);
            let loss = tape.scale(total, -1.0 / examples.len() as f64);
            last = tape.scalar_value(loss);
            if !last.is_finite() {
                return Err(Error::Diverged { step, loss: last });
            }
            let mut grads = tape.backward(loss);
            let gw = grads.take(w).expect("leaf gradient");
            let gd = grads.take(dt).expect("leaf gradient").reversed_axes();
            // cosine decay to a tenth of the base rate
            let t = step as f64 / fit.steps as f64;
            let lr = fit.lr * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * t).cos()));
            adam[0].step(&mut self.weights, &gw, lr);
            adam[1].step(&mut self.decoder, &gd, lr);
            for mut row in self.weights.rows_mut() {
                let n = row.dot(&row).sqrt();
                if n > limit {
                    row.mapv_inplace(|x| x * limit / n);
                }
            }
        }
        // guard against rounding past the interior bound
        let c = self.curvature();
        for mut row in self.weights.rows_mut() {
            let p = project_coords(&row.to_vec(), c);
            row.assign(&Array1::from(p));
        }
        let correct = examples
            .iter()
            .map(|(p, t)| self.top1_entity(p).map(|got| (&got == t) as usize))
            .sum::<Result<usize>>()?;
        Ok(FitReport { steps: fit.steps, final_loss: last, accuracy: correct as f64 / examples.len() as f64 })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            vocab: self.vocab.tokens.clone(),
            embed: Tensor::from(&self.embed),
            mixing: Tensor::from(&self.mixing),
            weights: Tensor::from(&self.weights),
            decoder: Tensor::from(&self.decoder),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!("unsupported checkpoint {} v{}", ck.format, ck.version)));
        }
        let vocab = Vocab::new(ck.vocab)?;
        let model = ToyModel {
            embed: ck.embed.into_array()?,
            mixing: ck.mixing.into_array()?,
            weights: ck.weights.into_array()?,
            decoder: ck.decoder.into_array()?,
            config: ck.config,
            vocab,
        };
        let (m, n) = (model.config.hidden, model.config.key_dim);
        let v = model.vocab.len();
        if model.weights.dim() != (m, n)
            || model.decoder.dim() != (v, m)
            || model.embed.dim() != (v, model.config.embed_dim)
            || model.mixing.dim() != (n, 2 * model.config.embed_dim)
        {
            return Err(Error::Config("checkpoint tensor shapes disagree with its config".into()));
        }
        model.weight_rows()?;
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string(&self.checkpoint())?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_checkpoint(serde_json::from_str(text)?)
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Central differences of `loss` with respect to every entry of `W`.
pub fn finite_diff_grad(model: &ToyModel, loss: impl Fn(&ToyModel) -> f64, step: f64) -> Result<Array2<f64>> {
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {step}")));
    }
    let mut probe = model.clone();
    let mut grad = Array2::zeros(model.dims());
    for i in 0..grad.nrows() {
        for j in 0..grad.ncols() {
            let orig = model.weights[[i, j]];
            probe.weights[[i, j]] = orig + step;
            let up = loss(&probe);
            probe.weights[[i, j]] = orig - step;
            let down = loss(&probe);
            probe.weights[[i, j]] = orig;
            grad[[i, j]] = (up - down) / (2.0 * step);
        }
    }
    Ok(grad)
}

struct Adam {
    m: Array2<f64>,
    v: Array2<f64>,
    t: i32,
}

impl Adam {
    fn new(shape: (usize, usize)) -> Self {
        Adam { m: Array2::zeros(shape), v: Array2::zeros(shape), t: 0 }
    }

    fn step(&mut self, param: &mut Array2<f64>, grad: &Array2<f64>, lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        self.m = &self.m * B1 + grad * (1.0 - B1);
        self.v = &self.v * B2 + &grad.mapv(|g| g * g) * (1.0 - B2);
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        ndarray::Zip::from(param).and(&self.m).and(&self.v).for_each(|p, &m, &v| {
            *p -= lr * (m / c1) / ((v / c2).sqrt() + 1e-8);
        });
    }
}

pub const CHECKPOINT_FORMAT: &str = "hyperedit-toy-model";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&Array2<f64>> for Tensor {
    fn from(a: &Array2<f64>) -> Self {
        Tensor { rows: a.nrows(), cols: a.ncols(), data: a.iter().copied().collect() }
    }
}

impl Tensor {
    pub fn into_array(self) -> Result<Array2<f64>> {
        Array2::from_shape_vec((self.rows, self.cols), self.data)
            .map_err(|e| Error::Config(format!("bad tensor shape: {e}")))
    }
}

/// Versioned on-disk container; floats round-trip bitwise through JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub vocab: Vec<Token>,
    pub embed: Tensor,
    pub mixing: Tensor,
    pub weights: Tensor,
    pub decoder: Tensor,
}

/// Row norms of the edited layer, for diagnostics.
pub fn row_norms(weights: &Array2<f64>) -> Vec<f64> {
    weights.rows().into_iter().map(|r| norm(&r.to_vec())).collect()
}
