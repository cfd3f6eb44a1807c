//! Video embedding pretraining.
//!
//! A GRU reads the click n-gram embeddings of a single-video sequence and its
//! last hidden state is classified into a video label with
//! `softmax(W_v h + b_v)`. After training, each video's embedding is the point
//! of the ball `‖v‖₂ ≤ ρ` maximizing `p(c = i | v) = softmax(W_v v + b_v)_i`,
//! found by projected gradient ascent from `v = 0`. Without the ball the
//! maximum is unbounded whenever two rows of `W_v` differ.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clickstream::VideoSequence;
use crate::error::{Error, Result};
use crate::numeric::{
    log_softmax_at, norm, softmax, GruCellParams, Matrix, OptimConfig, Optimizer, ParamId, ParamStore, Tape, Var,
};
use crate::persist::Envelope;

const MAGIC: [u8; 4] = *b"CDVE";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VideoClassifierConfig {
    pub d_v: usize,
    pub epochs: usize,
    pub optim: OptimConfig,
    pub seed: u64,
    pub batch_size: usize,
    pub freeze_embeddings: bool,
    /// Sequences sampled per epoch; all when `None`.
    pub max_sequences: Option<usize>,
}

impl Default for VideoClassifierConfig {
    fn default() -> Self {
        Self {
            d_v: 32,
            epochs: 10,
            optim: OptimConfig::default(),
            seed: 0,
            batch_size: 32,
            freeze_embeddings: false,
            max_sequences: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractConfig {
    pub steps: usize,
    pub lr: f64,
    pub rho: f64,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self { steps: 500, lr: 0.5, rho: 3.0 }
    }
}

#[derive(Clone, Debug)]
pub struct VideoClassifier {
    num_videos: usize,
    store: ParamStore,
    emb: ParamId,
    gru: GruCellParams,
    w_v: ParamId,
    b_v: ParamId,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VideoTrainReport {
    pub initial_loss: f64,
    /// Mean cross-entropy over the training sequences after each epoch.
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
    pub sequences: usize,
}

impl VideoClassifier {
    /// New classifier whose n-gram table is a copy of `embeddings`.
    pub fn new(embeddings: &Matrix, num_videos: usize, d_v: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_rng(embeddings, num_videos, d_v, &mut rng)
    }

    fn with_rng(embeddings: &Matrix, num_videos: usize, d_v: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if embeddings.rows() == 0 || embeddings.cols() == 0 || num_videos == 0 || d_v == 0 {
            return Err(Error::Input("classifier dimensions must be positive".into()));
        }
        let mut store = ParamStore::new();
        let emb = store.add("ngram_emb", embeddings.clone());
        let gru = GruCellParams::register(&mut store, "gru", embeddings.cols(), d_v, rng);
        let w_v = store.add_glorot("W_v", num_videos, d_v, rng);
        let b_v = store.add_zeros("b_v", num_videos, 1);
        Ok(Self { num_videos, store, emb, gru, w_v, b_v })
    }

    pub fn num_videos(&self) -> usize {
        self.num_videos
    }

    pub fn d_v(&self) -> usize {
        self.gru.d_h
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn gru(&self) -> &GruCellParams {
        &self.gru
    }

    pub fn w_v(&self) -> &Matrix {
        self.store.value(self.w_v)
    }

    pub fn b_v(&self) -> &Matrix {
        self.store.value(self.b_v)
    }

    pub fn head_ids(&self) -> (ParamId, ParamId) {
        (self.w_v, self.b_v)
    }

    pub fn embedding_table(&self) -> &Matrix {
        self.store.value(self.emb)
    }

    fn embed(&self, idx: usize) -> Result<&[f64]> {
        let t = self.embedding_table();
        if idx >= t.rows() {
            return Err(Error::OutOfRange(format!("n-gram index {idx} ≥ {}", t.rows())));
        }
        Ok(t.row(idx))
    }

    /// Final GRU state over the sequence, from `h_0 = 0`.
    pub fn represent(&self, ngrams: &[usize]) -> Result<Vec<f64>> {
        if ngrams.is_empty() {
            return Err(Error::Input("cannot classify an empty sequence".into()));
        }
        let mut h = vec![0.0; self.gru.d_h];
        for &g in ngrams {
            h = self.gru.step(&self.store, self.embed(g)?, &h)?;
        }
        Ok(h)
    }

    pub fn head_logits(&self, v: &[f64]) -> Result<Vec<f64>> {
        crate::numeric::affine(v, self.w_v(), self.b_v().data())
    }

    /// `softmax(W_v h_last + b_v)`.
    pub fn classify(&self, ngrams: &[usize]) -> Result<Vec<f64>> {
        let h = self.represent(ngrams)?;
        Ok(softmax(&self.head_logits(&h)?))
    }

    /// Cross-entropy of `label` recorded on a tape.
    pub fn loss_tape(&self, tape: &mut Tape, ngrams: &[usize], label: usize) -> Result<Var> {
        if ngrams.is_empty() {
            return Err(Error::Input("cannot classify an empty sequence".into()));
        }
        let mut h = tape.input(vec![0.0; self.gru.d_h]);
        for &g in ngrams {
            let x = tape.row(&self.store, self.emb, g)?;
            h = self.gru.step_tape(tape, &self.store, x, h)?;
        }
        let logits = tape.linear(&self.store, &[(self.w_v, h)], Some(self.b_v))?;
        tape.cross_entropy(logits, label)
    }

    pub fn loss(&self, ngrams: &[usize], label: usize) -> Result<f64> {
        let h = self.represent(ngrams)?;
        let logits = self.head_logits(&h)?;
        if label >= logits.len() {
            return Err(Error::OutOfRange(format!("label {label} of {} videos", logits.len())));
        }
        Ok(-log_softmax_at(&logits, label))
    }

    fn mean_loss_and_accuracy(&self, data: &[&VideoSequence]) -> Result<(f64, f64)> {
        let mut loss = 0.0;
        let mut correct = 0usize;
        for s in data {
            let h = self.represent(&s.ngrams)?;
            let logits = self.head_logits(&h)?;
            loss -= log_softmax_at(&logits, s.video);
            let best = logits
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                .0;
            correct += usize::from(best == s.video);
        }
        let n = data.len() as f64;
        Ok((loss / n, correct as f64 / n))
    }
}

/// Trains the video-label classifier. Sequences labelled with the no-video
/// sentinel (`video ≥ num_videos`) are excluded.
pub fn train_video_classifier(
    sequences: &[VideoSequence],
    num_videos: usize,
    embeddings: &Matrix,
    config: &VideoClassifierConfig,
) -> Result<(VideoClassifier, VideoTrainReport)> {
    let data: Vec<&VideoSequence> =
        sequences.iter().filter(|s| s.video < num_videos && !s.ngrams.is_empty()).collect();
    let mut labels: Vec<usize> = data.iter().map(|s| s.video).collect();
    labels.sort_unstable();
    labels.dedup();
    if labels.len() < 2 {
        return Err(Error::Input(format!(
            "video classifier needs at least 2 distinct video labels, found {}",
            labels.len()
        )));
    }
    if config.batch_size == 0 {
        return Err(Error::Input("batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = VideoClassifier::with_rng(embeddings, num_videos, config.d_v, &mut rng)?;
    if config.freeze_embeddings {
        model.store.set_frozen(model.emb, true);
    }
    let (initial_loss, _) = model.mean_loss_and_accuracy(&data)?;
    let per_epoch = config.max_sequences.map_or(data.len(), |k| k.min(data.len()));
    let mut opt = Optimizer::new(config.optim, &model.store);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut accuracy = model.mean_loss_and_accuracy(&data)?.1;
    let mut tape = Tape::new();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order[..per_epoch].chunks(config.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            for &k in batch {
                tape.clear();
                let loss = model.loss_tape(&mut tape, &data[k].ngrams, data[k].video)?;
                tape.backward_seeded(loss, scale, &mut model.store)?;
            }
            opt.step(&mut model.store)?;
        }
        let (loss, acc) = model.mean_loss_and_accuracy(&data)?;
        if !loss.is_finite() {
            return Err(Error::Diverged("video classifier loss".into()));
        }
        epoch_losses.push(loss);
        accuracy = acc;
    }
    Ok((
        model,
        VideoTrainReport { initial_loss, epoch_losses, train_accuracy: accuracy, sequences: data.len() },
    ))
}

fn project(v: &mut [f64], rho: f64) {
    let n = norm(v);
    if n > rho {
        let k = rho / n;
        v.iter_mut().for_each(|x| *x *= k);
    }
}

/// Projected gradient ascent on `log softmax(W v + b)_target` over the ball
/// `‖v‖₂ ≤ ρ`, starting from zero. A step that would lower the objective is
/// halved until it does not.
pub fn maximize_class_probability(w: &Matrix, b: &[f64], target: usize, config: &ExtractConfig) -> Result<Vec<f64>> {
    if target >= w.rows() || b.len() != w.rows() {
        return Err(Error::OutOfRange(format!("class {target} of a {}-way head", w.rows())));
    }
    if !(config.rho > 0.0 && config.lr > 0.0) {
        return Err(Error::Input("extraction needs rho > 0 and lr > 0".into()));
    }
    let objective = |v: &[f64]| -> Result<f64> {
        Ok(log_softmax_at(&crate::numeric::affine(v, w, b)?, target))
    };
    let mut v = vec![0.0; w.cols()];
    let mut f = objective(&v)?;
    for _ in 0..config.steps {
        let p = softmax(&crate::numeric::affine(&v, w, b)?);
        // ∇ = Wᵀ (e_target − p)
        let mut resid: Vec<f64> = p.iter().map(|x| -x).collect();
        resid[target] += 1.0;
        let mut grad = vec![0.0; w.cols()];
        w.tmatvec_acc(&resid, &mut grad);
        if norm(&grad) < 1e-6 {
            break;
        }
        let mut lr = config.lr;
        let mut accepted = None;
        while lr > 1e-12 {
            let mut cand: Vec<f64> = v.iter().zip(&grad).map(|(x, g)| x + lr * g).collect();
            project(&mut cand, config.rho);
            let fc = objective(&cand)?;
            if !fc.is_finite() || cand.iter().any(|x| !x.is_finite()) {
                return Err(Error::Extraction { video: target.to_string(), reason: "non-finite iterate".into() });
            }
            if fc >= f {
                accepted = Some((cand, fc));
                break;
            }
            lr *= 0.5;
        }
        let Some((cand, fc)) = accepted else { break };
        let moved: f64 = cand.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        v = cand;
        f = fc;
        if moved < 1e-12 {
            break;
        }
    }
    Ok(v)
}

/// `v_max` for video `i`.
pub fn extract_video_embedding(classifier: &VideoClassifier, i: usize, config: &ExtractConfig) -> Result<Vec<f64>> {
    if i >= classifier.num_videos {
        return Err(Error::OutOfRange(format!("video {i} of {}", classifier.num_videos)));
    }
    maximize_class_probability(classifier.w_v(), classifier.b_v().data(), i, config)
}

/// One row per video plus a final zero row for the no-video sentinel.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoEmbeddingSet {
    pub table: Matrix,
    pub video_ids: Vec<String>,
}

impl VideoEmbeddingSet {
    pub fn num_videos(&self) -> usize {
        self.table.rows() - 1
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut env = Envelope::new(MAGIC, vec![self.num_videos() as u64, self.dim() as u64]);
        env.tensors.push(("video_emb".into(), self.table.clone()));
        env.strings = self.video_ids.clone();
        env.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut env = Envelope::from_bytes(bytes, MAGIC)?;
        let v = env.header_at(0)? as usize;
        let d = env.header_at(1)? as usize;
        if env.tensors.len() != 1 || env.tensors[0].1.shape() != (v + 1, d) || env.strings.len() != v {
            return Err(Error::Format("video embedding file does not match its header".into()));
        }
        let (_, table) = env.tensors.pop().expect("one tensor");
        Ok(Self { table, video_ids: env.strings })
    }

    /// Rows of `video_id, d_v floats`; the sentinel row is labelled `NO_VIDEO`.
    pub fn to_tsv(&self) -> String {
        crate::persist::tsv((0..self.table.rows()).map(|i| {
            let id = self.video_ids.get(i).map_or("NO_VIDEO", String::as_str).to_string();
            std::iter::once(id).chain(self.table.row(i).iter().map(|v| v.to_string())).collect::<Vec<_>>()
        }))
    }
}

pub fn build_embedding_set(
    classifier: &VideoClassifier,
    config: &ExtractConfig,
    video_ids: &[String],
) -> Result<VideoEmbeddingSet> {
    let v = classifier.num_videos;
    if video_ids.len() != v {
        return Err(Error::Input(format!("{} video ids for {v} classes", video_ids.len())));
    }
    let mut table = Matrix::zeros(v + 1, classifier.d_v());
    for (i, id) in video_ids.iter().enumerate() {
        let row = extract_video_embedding(classifier, i, config).map_err(|e| Error::Extraction {
            video: id.clone(),
            reason: e.to_string(),
        })?;
        table.row_mut(i).copy_from_slice(&row);
    }
    Ok(VideoEmbeddingSet { table, video_ids: video_ids.to_vec() })
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::numeric::gradcheck::{finite_difference, relative_error};
    use crate::numeric::matrix::sigmoid;

    fn seq(video: usize, ngrams: Vec<usize>) -> VideoSequence {
        VideoSequence { user_id: "u".into(), video, ngrams }
    }

    fn random_table(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        crate::numeric::glorot_uniform(rows, cols, &mut rng)
    }

    #[test]
    fn zero_head_is_uniform() {
        let mut c = VideoClassifier::new(&random_table(10, 3, 0), 4, 5, 1).unwrap();
        let (w, b) = c.head_ids();
        c.store_mut().value_mut(w).fill(0.0);
        c.store_mut().value_mut(b).fill(0.0);
        for p in c.classify(&[1, 2, 3]).unwrap() {
            assert!((p - 0.25).abs() < 1e-15);
        }
        assert!(c.classify(&[]).is_err());
    }

    #[test]
    fn single_step_matches_manual_composition() {
        let table = random_table(10, 3, 2);
        let c = VideoClassifier::new(&table, 3, 4, 3).unwrap();
        let h = c.gru().step(c.store(), table.row(7), &[0.0; 4]).unwrap();
        let manual = softmax(&crate::numeric::affine(&h, c.w_v(), c.b_v().data()).unwrap());
        let got = c.classify(&[7]).unwrap();
        for (a, b) in got.iter().zip(&manual) {
            assert!((a - b).abs() <= 1e-12);
        }
        assert!((got.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn order_matters() {
        let c = VideoClassifier::new(&random_table(10, 3, 4), 3, 4, 5).unwrap();
        let a = c.classify(&[1, 5, 9]).unwrap();
        let b = c.classify(&[9, 5, 1]).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut c = VideoClassifier::new(&random_table(10, 3, 6), 3, 4, 7).unwrap();
        let ngrams = [2, 8, 2, 5];
        let mut tape = Tape::new();
        let loss = c.loss_tape(&mut tape, &ngrams, 1).unwrap();
        tape.backward(loss, &mut c.store).unwrap();
        let analytic = c.store.flatten_grads();
        let probe = c.clone();
        let numeric = finite_difference(&mut c.store, 1e-6, |s| {
            let mut m = probe.clone();
            m.store.copy_values_from(s).unwrap();
            m.loss(&ngrams, 1).unwrap()
        });
        assert!(relative_error(&analytic, &numeric) <= 1e-5);
    }

    fn separable() -> Vec<VideoSequence> {
        let mut out = Vec::new();
        for k in 0..20 {
            out.push(seq(0, vec![1, 2, 3, 1, 2][..3 + k % 3].to_vec()));
            out.push(seq(1, vec![7, 8, 9, 7, 8][..3 + k % 3].to_vec()));
        }
        out.push(seq(2, vec![4, 4]));
        out
    }

    #[test]
    fn separable_videos_are_learned() {
        let table = random_table(10, 4, 8);
        let config = VideoClassifierConfig { d_v: 8, epochs: 20, optim: OptimConfig::adam(0.05), ..Default::default() };
        let (c, report) = train_video_classifier(&separable(), 2, &table, &config).unwrap();
        assert!(report.train_accuracy >= 0.99);
        assert_eq!(report.sequences, 40);
        assert!(report.epoch_losses.last().unwrap() <= &(report.initial_loss + 1e-6));

        let set = build_embedding_set(&c, &ExtractConfig::default(), &["a".into(), "b".into()]).unwrap();
        assert_eq!(set.table.shape(), (3, 8));
        assert!(set.table.row(2).iter().all(|x| *x == 0.0));
        for i in 0..2 {
            let p = softmax(&c.head_logits(set.table.row(i)).unwrap())[i];
            let p0 = softmax(&c.head_logits(&[0.0; 8]).unwrap())[i];
            assert!(p >= p0);
            assert!(p >= 0.99, "video {i}: {p}");
            assert!(norm(set.table.row(i)) <= 3.0 + 1e-12);
        }
    }

    #[test]
    fn classifier_needs_two_labels() {
        let table = random_table(10, 2, 0);
        let one = vec![seq(0, vec![1, 2]), seq(3, vec![2, 2])];
        assert!(matches!(
            train_video_classifier(&one, 3, &table, &VideoClassifierConfig::default()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn zero_epochs_and_determinism() {
        let table = random_table(10, 3, 1);
        let config = VideoClassifierConfig { d_v: 4, epochs: 0, seed: 9, ..Default::default() };
        let (c, _) = train_video_classifier(&separable(), 2, &table, &config).unwrap();
        let init = VideoClassifier::new(&table, 2, 4, 9).unwrap();
        assert_eq!(c.store.flatten_values(), init.store.flatten_values());
        let config = VideoClassifierConfig { epochs: 2, ..config };
        let (a, _) = train_video_classifier(&separable(), 2, &table, &config).unwrap();
        let (b, _) = train_video_classifier(&separable(), 2, &table, &config).unwrap();
        assert_eq!(a.store.flatten_values(), b.store.flatten_values());
    }

    fn grid_best(w: &Matrix, b: &[f64], i: usize, rho: f64) -> f64 {
        let mut best = 0.0f64;
        let k = 400;
        for a in 0..k {
            for r in 1..=k {
                let th = a as f64 / k as f64 * std::f64::consts::TAU;
                let rad = rho * r as f64 / k as f64;
                let v = [rad * th.cos(), rad * th.sin()];
                best = best.max(softmax(&crate::numeric::affine(&v, w, b).unwrap())[i]);
            }
        }
        best
    }

    #[test]
    fn identity_head_matches_grid_search() {
        let w = Matrix::identity(2);
        let b = [0.0, 0.0];
        let config = ExtractConfig { rho: 3.0, ..Default::default() };
        let v = maximize_class_probability(&w, &b, 0, &config).unwrap();
        let dir = [1.0 / 2f64.sqrt(), -1.0 / 2f64.sqrt()];
        assert!((v[0] - 3.0 * dir[0]).abs() < 1e-6 && (v[1] - 3.0 * dir[1]).abs() < 1e-6);
        let p = softmax(&crate::numeric::affine(&v, &w, &b).unwrap())[0];
        assert!((p - grid_best(&w, &b, 0, 3.0)).abs() < 1e-2);
        assert!((p - sigmoid(3.0 * 2f64.sqrt())).abs() < 1e-9);
    }

    #[test]
    fn identical_rows_stay_at_origin() {
        let w = Matrix::from_rows(&[vec![0.3, -0.2], vec![0.3, -0.2], vec![0.3, -0.2]]).unwrap();
        let v = maximize_class_probability(&w, &[0.1, 0.1, 0.1], 1, &ExtractConfig::default()).unwrap();
        assert_eq!(v, vec![0.0, 0.0]);
    }

    #[test]
    fn larger_ball_gives_higher_probability() {
        let w = Matrix::identity(2);
        let mut last = 0.0;
        for rho in [1.0, 2.0, 4.0] {
            let v = maximize_class_probability(&w, &[0.0, 0.0], 1, &ExtractConfig { rho, ..Default::default() })
                .unwrap();
            assert!(norm(&v) <= rho + 1e-12);
            let p = softmax(&v)[1];
            assert!(p > last);
            last = p;
        }
    }

    #[test]
    fn embedding_set_persistence() {
        let set = VideoEmbeddingSet {
            table: Matrix::from_rows(&[vec![1.0, 2.0], vec![-0.5, 0.25], vec![0.0, 0.0]]).unwrap(),
            video_ids: vec!["v0".into(), "v1".into()],
        };
        assert_eq!(VideoEmbeddingSet::from_bytes(&set.to_bytes()).unwrap(), set);
        let tsv = set.to_tsv();
        assert!(tsv.starts_with("v0\t1\t2\n"));
        assert!(tsv.ends_with("NO_VIDEO\t0\t0\n"));
    }

    proptest::proptest! {
        #[test]
        fn extraction_stays_in_ball_and_never_worsens(
            seed in 0u64..500,
            rho in 0.1f64..6.0,
            target in 0usize..4,
        ) {
            let w = random_table(4, 3, seed);
            let b = [0.1, -0.3, 0.0, 0.2];
            let v = maximize_class_probability(&w, &b, target, &ExtractConfig { rho, steps: 200, lr: 0.5 }).unwrap();
            proptest::prop_assert!(norm(&v) <= rho * (1.0 + 1e-12));
            let p = softmax(&crate::numeric::affine(&v, &w, &b).unwrap())[target];
            let p0 = softmax(&b)[target];
            proptest::prop_assert!(p >= p0);
        }
    }
}
