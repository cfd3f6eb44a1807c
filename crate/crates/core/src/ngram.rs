//! Click n-gram embedding pretraining.
//!
//! An n-gram index `j` is encoded as `u = W_c[:, j] + b_c` (the one-hot
//! product without materializing the one-hot), decoded to logits
//! `v = W_o u + b_o`, and `ŷ = softmax(v)` is scored against every n-gram
//! within `w` positions of it in the same `(user, week)` sequence.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clickstream::{vocab_size, WeeklyInstance, MAX_ORDER};
use crate::error::{Error, Result};
use crate::numeric::matrix::axpy;
use crate::numeric::tape::{window_ce_logit_grad_acc, window_ce_value};
use crate::numeric::{dot, softmax, Matrix, OptimConfig, Optimizer, ParamId, ParamStore, Tape, Var};
use crate::persist::Envelope;

const MAGIC: [u8; 4] = *b"CDNG";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NGramConfig {
    /// Embedding dimension.
    pub m: usize,
    /// Context half-window.
    pub w: usize,
    pub epochs: usize,
    pub optim: OptimConfig,
    pub seed: u64,
    pub batch_size: usize,
    /// Use plain categorical cross-entropy instead of the two-sided objective.
    pub categorical: bool,
    /// Positions sampled per epoch; all when `None`.
    pub max_positions: Option<usize>,
    /// Positions used for the per-epoch objective; all when `None`.
    pub eval_positions: Option<usize>,
}

impl Default for NGramConfig {
    fn default() -> Self {
        Self {
            m: 64,
            w: 2,
            epochs: 5,
            optim: OptimConfig::default(),
            seed: 0,
            batch_size: 32,
            categorical: false,
            max_positions: None,
            eval_positions: None,
        }
    }
}

/// N-gram index sequences, one per `(user, week)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PretrainCorpus {
    n: usize,
    sequences: Vec<Vec<usize>>,
}

impl PretrainCorpus {
    pub fn new(n: usize, sequences: Vec<Vec<usize>>) -> Result<Self> {
        if n == 0 || n > MAX_ORDER {
            return Err(Error::Input(format!("n-gram order {n} out of range")));
        }
        let v = vocab_size(n);
        if let Some(bad) = sequences.iter().flatten().find(|&&g| g >= v) {
            return Err(Error::OutOfRange(format!("n-gram index {bad} for n = {n}")));
        }
        Ok(Self { n, sequences })
    }

    pub fn from_instances<'a>(n: usize, instances: impl IntoIterator<Item = &'a WeeklyInstance>) -> Result<Self> {
        let seqs = instances
            .into_iter()
            .filter(|i| !i.steps.is_empty())
            .map(|i| i.steps.iter().map(|s| s.ngram).collect())
            .collect();
        Self::new(n, seqs)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn sequences(&self) -> &[Vec<usize>] {
        &self.sequences
    }

    pub fn positions(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.positions() == 0
    }
}

/// Indices `t + i` for `-w ≤ i ≤ w`, `i ≠ 0`, that fall inside the sequence.
pub fn context_targets(seq: &[usize], t: usize, w: usize) -> Vec<usize> {
    let lo = t.saturating_sub(w);
    let hi = (t + w).min(seq.len().saturating_sub(1));
    (lo..=hi).filter(|&k| k != t).map(|k| seq[k]).collect()
}

type Rows = Vec<Vec<f64>>;

#[derive(Clone, Debug)]
pub struct NGramEmbeddingModel {
    n: usize,
    m: usize,
    store: ParamStore,
    w_c: ParamId,
    b_c: ParamId,
    w_o: ParamId,
    b_o: ParamId,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NGramTrainReport {
    /// Mean objective after each epoch.
    pub epoch_losses: Vec<f64>,
    pub initial_loss: f64,
    pub positions_per_epoch: usize,
}

impl NGramEmbeddingModel {
    pub fn new(n: usize, m: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_rng(n, m, &mut rng)
    }

    fn with_rng(n: usize, m: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if n == 0 || n > MAX_ORDER || m == 0 {
            return Err(Error::Input(format!("invalid model shape n = {n}, m = {m}")));
        }
        let v = vocab_size(n);
        let mut store = ParamStore::new();
        let w_c = store.add_glorot("W_c", m, v, rng);
        let b_c = store.add_zeros("b_c", m, 1);
        let w_o = store.add_glorot("W_o", v, m, rng);
        let b_o = store.add_zeros("b_o", v, 1);
        Ok(Self { n, m, store, w_c, b_c, w_o, b_o })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn vocab_size(&self) -> usize {
        vocab_size(self.n)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn w_c(&self) -> &Matrix {
        self.store.value(self.w_c)
    }

    pub fn b_c(&self) -> &Matrix {
        self.store.value(self.b_c)
    }

    pub fn w_o(&self) -> &Matrix {
        self.store.value(self.w_o)
    }

    pub fn b_o(&self) -> &Matrix {
        self.store.value(self.b_o)
    }

    /// `(W_c, b_c, W_o, b_o)` handles, in declaration order.
    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.w_c, self.b_c, self.w_o, self.b_o]
    }

    fn check_index(&self, idx: usize) -> Result<()> {
        if idx >= self.vocab_size() {
            return Err(Error::OutOfRange(format!("n-gram index {idx} ≥ {}", self.vocab_size())));
        }
        Ok(())
    }

    /// `W_c x + b_c` for the one-hot `x` of `idx`.
    pub fn encode(&self, idx: usize) -> Result<Vec<f64>> {
        self.check_index(idx)?;
        let wc = self.w_c();
        Ok(self.b_c().data().iter().enumerate().map(|(k, b)| wc.get(k, idx) + b).collect())
    }

    /// `ŷ = softmax(W_o u + b_o)` for the n-gram `idx`.
    pub fn predict(&self, idx: usize) -> Result<Vec<f64>> {
        let u = self.encode(idx)?;
        let mut logits = self.b_o().data().to_vec();
        self.w_o().matvec_acc(&u, &mut logits);
        Ok(softmax(&logits))
    }

    pub fn window_loss(&self, seq: &[usize], t: usize, w: usize) -> Result<f64> {
        self.window_loss_with(seq, t, w, false)
    }

    pub fn window_loss_with(&self, seq: &[usize], t: usize, w: usize, categorical: bool) -> Result<f64> {
        if t >= seq.len() {
            return Err(Error::OutOfRange(format!("position {t} in sequence of length {}", seq.len())));
        }
        let targets = context_targets(seq, t, w);
        for &g in &targets {
            self.check_index(g)?;
        }
        let probs = self.predict(seq[t])?;
        Ok(window_ce_value(&probs, &targets, categorical))
    }

    /// Records the loss of one position on `tape`.
    pub fn loss_tape(&self, tape: &mut Tape, center: usize, targets: &[usize], categorical: bool) -> Result<Var> {
        let col = tape.col(&self.store, self.w_c, center)?;
        let bias = tape.param(&self.store, self.b_c);
        let u = tape.add(col, bias)?;
        let logits = tape.linear(&self.store, &[(self.w_o, u)], Some(self.b_o))?;
        tape.window_ce(logits, targets, categorical)
    }

    /// Encodings and logits for several centers, reading `W_o` once.
    fn forward_batch(&self, centers: &[usize]) -> Result<(Rows, Rows)> {
        let us = centers.iter().map(|&c| self.encode(c)).collect::<Result<Vec<_>>>()?;
        let mut z = vec![self.b_o().data().to_vec(); centers.len()];
        let wo = self.w_o();
        for r in 0..wo.rows() {
            let row = wo.row(r);
            for (zb, u) in z.iter_mut().zip(&us) {
                zb[r] += dot(row, u);
            }
        }
        Ok((us, z))
    }

    /// Adds `scale · ∂/∂θ Σ window_loss` over `(center, targets)` items to the
    /// store's gradients. Same gradient as running [`Self::loss_tape`] per item.
    pub fn accumulate_batch_gradients(
        &mut self,
        batch: &[(usize, Vec<usize>)],
        scale: f64,
        categorical: bool,
    ) -> Result<()> {
        for (_, targets) in batch {
            for &g in targets {
                self.check_index(g)?;
            }
        }
        let centers: Vec<usize> = batch.iter().map(|b| b.0).collect();
        let (us, z) = self.forward_batch(&centers)?;
        let dz: Vec<Vec<f64>> = batch
            .iter()
            .zip(&z)
            .map(|((_, targets), zb)| {
                let mut d = vec![0.0; zb.len()];
                if !targets.is_empty() {
                    window_ce_logit_grad_acc(&softmax(zb), targets, categorical, scale, &mut d);
                }
                d
            })
            .collect();

        let mut du = vec![vec![0.0; self.m]; batch.len()];
        let wo = self.store.value(self.w_o);
        for r in 0..wo.rows() {
            let row = wo.row(r);
            for (d, dub) in dz.iter().zip(du.iter_mut()) {
                if d[r] != 0.0 {
                    axpy(d[r], row, dub);
                }
            }
        }
        let gwo = self.store.grad_mut(self.w_o);
        for r in 0..gwo.rows() {
            let grow = gwo.row_mut(r);
            for (d, u) in dz.iter().zip(&us) {
                if d[r] != 0.0 {
                    axpy(d[r], u, grow);
                }
            }
        }
        let gbo = self.store.grad_mut(self.b_o).data_mut();
        for d in &dz {
            axpy(1.0, d, gbo);
        }
        let gbc = self.store.grad_mut(self.b_c).data_mut();
        for d in &du {
            axpy(1.0, d, gbc);
        }
        let gwc = self.store.grad_mut(self.w_c);
        for (&c, d) in centers.iter().zip(&du) {
            for (k, dk) in d.iter().enumerate() {
                let v = gwc.get(k, c) + dk;
                gwc.set(k, c, v);
            }
        }
        Ok(())
    }

    /// Mean window loss over every position of the corpus.
    pub fn objective(&self, corpus: &PretrainCorpus, w: usize, categorical: bool) -> Result<f64> {
        let positions: Vec<(usize, usize)> = all_positions(corpus);
        self.objective_on(corpus, &positions, w, categorical)
    }

    fn objective_on(
        &self,
        corpus: &PretrainCorpus,
        positions: &[(usize, usize)],
        w: usize,
        categorical: bool,
    ) -> Result<f64> {
        if positions.is_empty() {
            return Err(Error::Input("empty corpus".into()));
        }
        let mut total = 0.0;
        for chunk in positions.chunks(64) {
            let centers: Vec<usize> = chunk.iter().map(|&(s, t)| corpus.sequences[s][t]).collect();
            let (_, z) = self.forward_batch(&centers)?;
            for (&(s, t), zb) in chunk.iter().zip(&z) {
                let targets = context_targets(&corpus.sequences[s], t, w);
                for &g in &targets {
                    self.check_index(g)?;
                }
                total += window_ce_value(&softmax(zb), &targets, categorical);
            }
        }
        Ok(total / positions.len() as f64)
    }

    /// `10^n × m` table whose row `j` is `encode(j)`.
    pub fn export_embeddings(&self) -> Matrix {
        let (v, m) = (self.vocab_size(), self.m);
        let wc = self.w_c();
        let bc = self.b_c().data();
        let mut out = Matrix::zeros(v, m);
        for j in 0..v {
            for (k, b) in bc.iter().enumerate() {
                out.set(j, k, wc.get(k, j) + b);
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        Envelope::new(MAGIC, vec![self.n as u64, self.m as u64]).with_store(&self.store).to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let env = Envelope::from_bytes(bytes, MAGIC)?;
        let n = env.header_at(0)? as usize;
        let m = env.header_at(1)? as usize;
        if n == 0 || n > MAX_ORDER || m == 0 {
            return Err(Error::Format(format!("invalid header n = {n}, m = {m}")));
        }
        let store = env.to_store();
        let v = vocab_size(n);
        let expect = [("W_c", (m, v)), ("b_c", (m, 1)), ("W_o", (v, m)), ("b_o", (v, 1))];
        if store.len() != expect.len() {
            return Err(Error::Format(format!("expected 4 tensors, found {}", store.len())));
        }
        for (id, (name, shape)) in store.ids().zip(expect) {
            if store.name(id) != name || store.value(id).shape() != shape {
                return Err(Error::Format(format!("tensor {} does not match {name} {shape:?}", store.name(id))));
            }
        }
        let ids: Vec<ParamId> = store.ids().collect();
        Ok(Self { n, m, store, w_c: ids[0], b_c: ids[1], w_o: ids[2], b_o: ids[3] })
    }

    /// Rows of `index, m floats`.
    pub fn embeddings_tsv(&self) -> String {
        let table = self.export_embeddings();
        crate::persist::tsv((0..table.rows()).map(|j| {
            std::iter::once(j.to_string()).chain(table.row(j).iter().map(|v| v.to_string())).collect::<Vec<_>>()
        }))
    }
}

fn all_positions(corpus: &PretrainCorpus) -> Vec<(usize, usize)> {
    corpus
        .sequences
        .iter()
        .enumerate()
        .flat_map(|(s, seq)| (0..seq.len()).map(move |t| (s, t)))
        .collect()
}

/// Trains embeddings with minibatch gradient steps over shuffled positions.
pub fn train_ngram_embeddings(
    corpus: &PretrainCorpus,
    config: &NGramConfig,
) -> Result<(NGramEmbeddingModel, NGramTrainReport)> {
    if corpus.is_empty() {
        return Err(Error::Input("pretraining corpus is empty".into()));
    }
    if config.w == 0 || config.m == 0 || config.batch_size == 0 {
        return Err(Error::Input("w, m and batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = NGramEmbeddingModel::with_rng(corpus.n, config.m, &mut rng)?;

    let trainable: Vec<(usize, usize)> = all_positions(corpus)
        .into_iter()
        .filter(|&(s, _)| corpus.sequences[s].len() > 1)
        .collect();
    let mut eval = all_positions(corpus);
    if let Some(k) = config.eval_positions {
        if k < eval.len() {
            eval.shuffle(&mut rng);
            eval.truncate(k);
            eval.sort_unstable();
        }
    }
    let initial_loss = model.objective_on(corpus, &eval, config.w, config.categorical)?;
    let per_epoch = config.max_positions.map_or(trainable.len(), |k| k.min(trainable.len()));

    let mut opt = Optimizer::new(config.optim, &model.store);
    let mut order = trainable;
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order[..per_epoch].chunks(config.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let items: Vec<(usize, Vec<usize>)> = batch
                .iter()
                .map(|&(s, t)| {
                    let seq = &corpus.sequences[s];
                    (seq[t], context_targets(seq, t, config.w))
                })
                .collect();
            model.accumulate_batch_gradients(&items, scale, config.categorical)?;
            opt.step(&mut model.store)?;
        }
        let loss = model.objective_on(corpus, &eval, config.w, config.categorical)?;
        if !loss.is_finite() {
            return Err(Error::Diverged("n-gram pretraining loss".into()));
        }
        epoch_losses.push(loss);
    }
    Ok((model, NGramTrainReport { epoch_losses, initial_loss, positions_per_epoch: per_epoch }))
}
