//! GRU dropout predictor trained with a within-user margin ranking loss.
//!
//! Each step's click n-gram embedding (concatenated with its video embedding
//! when the video branch is enabled) feeds a GRU from `h_0 = 0`; the dropout
//! probability is `σ(w_outᵀ h_last + b_out)`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clickstream::{vocab_size, WeeklyInstance, MAX_ORDER};
use crate::error::{Error, Result};
use crate::metrics::{auc, ScoredInstance};
use crate::numeric::{
    dot, glorot_uniform, sigmoid, GruCellParams, Matrix, OptimConfig, Optimizer, ParamId, ParamStore, Tape, Var,
};
use crate::persist::Envelope;

const MAGIC: [u8; 4] = *b"CDDP";

/// Which inputs a predictor uses and how its embedding tables start.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    /// Click n-grams, random initialization.
    #[serde(rename = "a")]
    Click,
    /// Click n-grams, pretrained initialization.
    #[serde(rename = "b")]
    ClickPretrained,
    /// Pretrained click n-grams plus randomly initialized videos.
    #[serde(rename = "c")]
    ClickPretrainedVideo,
    /// Pretrained click n-grams plus pretrained videos.
    #[serde(rename = "d")]
    ClickPretrainedVideoPretrained,
}

impl Variant {
    pub const ALL: [Variant; 4] =
        [Variant::Click, Variant::ClickPretrained, Variant::ClickPretrainedVideo, Variant::ClickPretrainedVideoPretrained];

    pub fn code(self) -> char {
        match self {
            Variant::Click => 'a',
            Variant::ClickPretrained => 'b',
            Variant::ClickPretrainedVideo => 'c',
            Variant::ClickPretrainedVideoPretrained => 'd',
        }
    }

    pub fn uses_video(self) -> bool {
        matches!(self, Variant::ClickPretrainedVideo | Variant::ClickPretrainedVideoPretrained)
    }

    pub fn pretrained_ngrams(self) -> bool {
        self != Variant::Click
    }

    pub fn pretrained_video(self) -> bool {
        self == Variant::ClickPretrainedVideoPretrained
    }

    pub fn description(self) -> &'static str {
        match self {
            Variant::Click => "click n-gram",
            Variant::ClickPretrained => "click n-gram (pretrained)",
            Variant::ClickPretrainedVideo => "click n-gram (pretrained) + video",
            Variant::ClickPretrainedVideoPretrained => "click n-gram (pretrained) + video (pretrained)",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.code())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| s.len() == 1 && s.starts_with(v.code()))
            .ok_or_else(|| Error::Input(format!("unknown variant {s:?}; expected a, b, c or d")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DropoutConfig {
    pub d_h: usize,
    /// N-gram embedding width when no pretrained table is supplied.
    pub m: usize,
    /// Video embedding width when no pretrained table is supplied.
    pub d_v: usize,
    pub epochs: usize,
    pub optim: OptimConfig,
    pub margin: f64,
    pub seed: u64,
    /// Pairs per minibatch.
    pub batch_size: usize,
    pub freeze_ngram: bool,
    pub freeze_video: bool,
}

impl Default for DropoutConfig {
    fn default() -> Self {
        Self {
            d_h: 64,
            m: 64,
            d_v: 32,
            epochs: 10,
            optim: OptimConfig::default(),
            margin: 0.5,
            seed: 0,
            batch_size: 64,
            freeze_ngram: false,
            freeze_video: false,
        }
    }
}

/// Optional pretrained tables. Ignored by variants that do not use them.
#[derive(Clone, Copy, Debug, Default)]
pub struct PretrainedTables<'a> {
    pub ngram: Option<&'a Matrix>,
    pub video: Option<&'a Matrix>,
}

#[derive(Clone, Debug)]
pub struct DropoutPredictor {
    variant: Variant,
    n: usize,
    num_videos: usize,
    store: ParamStore,
    ngram_emb: ParamId,
    video_emb: Option<ParamId>,
    gru: GruCellParams,
    w_out: ParamId,
    b_out: ParamId,
}

impl DropoutPredictor {
    pub fn new(
        variant: Variant,
        n: usize,
        num_videos: usize,
        tables: PretrainedTables<'_>,
        config: &DropoutConfig,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self::with_rng(variant, n, num_videos, tables, config, &mut rng)
    }

    fn with_rng(
        variant: Variant,
        n: usize,
        num_videos: usize,
        tables: PretrainedTables<'_>,
        config: &DropoutConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if n == 0 || n > MAX_ORDER || config.d_h == 0 {
            return Err(Error::Input(format!("invalid predictor shape n = {n}, d_h = {}", config.d_h)));
        }
        let v = vocab_size(n);
        let mut store = ParamStore::new();
        let ngram_table = if variant.pretrained_ngrams() {
            let t = tables
                .ngram
                .ok_or_else(|| Error::Input(format!("variant {variant} needs pretrained n-gram embeddings")))?;
            if t.rows() != v || t.cols() == 0 {
                return Err(Error::Dimension(format!("n-gram table is {:?}, expected {v} rows", t.shape())));
            }
            t.clone()
        } else {
            if config.m == 0 {
                return Err(Error::Input("m must be positive".into()));
            }
            glorot_uniform(v, config.m, rng)
        };
        let m = ngram_table.cols();
        let ngram_emb = store.add("ngram_emb", ngram_table);
        let video_emb = if variant.uses_video() {
            let table = if variant.pretrained_video() {
                let t = tables
                    .video
                    .ok_or_else(|| Error::Input(format!("variant {variant} needs pretrained video embeddings")))?;
                if t.rows() != num_videos + 1 || t.cols() == 0 {
                    return Err(Error::Dimension(format!(
                        "video table is {:?}, expected {} rows",
                        t.shape(),
                        num_videos + 1
                    )));
                }
                t.clone()
            } else {
                if config.d_v == 0 {
                    return Err(Error::Input("d_v must be positive".into()));
                }
                glorot_uniform(num_videos + 1, config.d_v, rng)
            };
            Some(store.add("video_emb", table))
        } else {
            None
        };
        let d_in = m + video_emb.map_or(0, |id| store.value(id).cols());
        let gru = GruCellParams::register(&mut store, "gru", d_in, config.d_h, rng);
        let w_out = store.add_glorot("w_out", config.d_h, 1, rng);
        let b_out = store.add_zeros("b_out", 1, 1);
        store.set_frozen(ngram_emb, config.freeze_ngram);
        if let Some(id) = video_emb {
            store.set_frozen(id, config.freeze_video);
        }
        Ok(Self { variant, n, num_videos, store, ngram_emb, video_emb, gru, w_out, b_out })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn output_ids(&self) -> (ParamId, ParamId) {
        (self.w_out, self.b_out)
    }

    pub fn video_table_id(&self) -> Option<ParamId> {
        self.video_emb
    }

    pub fn gru(&self) -> &GruCellParams {
        &self.gru
    }

    fn step_input(&self, ngram: usize, video: usize) -> Result<Vec<f64>> {
        let nt = self.store.value(self.ngram_emb);
        if ngram >= nt.rows() {
            return Err(Error::OutOfRange(format!("n-gram index {ngram} ≥ {}", nt.rows())));
        }
        let mut x = nt.row(ngram).to_vec();
        if let Some(id) = self.video_emb {
            let vt = self.store.value(id);
            if video >= vt.rows() {
                return Err(Error::OutOfRange(format!("video index {video} ≥ {}", vt.rows())));
            }
            x.extend_from_slice(vt.row(video));
        }
        Ok(x)
    }

    /// Dropout probability for one weekly instance.
    pub fn predict(&self, instance: &WeeklyInstance) -> Result<f64> {
        let mut h = vec![0.0; self.gru.d_h];
        for s in &instance.steps {
            let x = self.step_input(s.ngram, s.video)?;
            h = self.gru.step(&self.store, &x, &h)?;
        }
        let logit = dot(self.store.value(self.w_out).data(), &h) + self.store.value(self.b_out).data()[0];
        Ok(sigmoid(logit))
    }

    /// Records the dropout probability on a tape.
    pub fn predict_tape(&self, tape: &mut Tape, instance: &WeeklyInstance) -> Result<Var> {
        let mut h = tape.input(vec![0.0; self.gru.d_h]);
        for s in &instance.steps {
            let g = tape.row(&self.store, self.ngram_emb, s.ngram)?;
            let x = match self.video_emb {
                Some(id) => {
                    let v = tape.row(&self.store, id, s.video)?;
                    tape.concat(&[g, v])
                }
                None => g,
            };
            h = self.gru.step_tape(tape, &self.store, x, h)?;
        }
        let w = tape.param(&self.store, self.w_out);
        let z = tape.dot(w, h)?;
        let b = tape.param(&self.store, self.b_out);
        let logit = tape.add(z, b)?;
        Ok(tape.sigmoid(logit))
    }

    pub fn score(&self, instances: &[WeeklyInstance]) -> Result<Vec<ScoredInstance>> {
        instances
            .iter()
            .map(|i| {
                Ok(ScoredInstance {
                    user_id: i.user_id.clone(),
                    week: i.week,
                    score: self.predict(i)?,
                    label: i.label,
                })
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = vec![
            self.variant.code() as u64,
            self.n as u64,
            self.num_videos as u64,
            self.gru.d_h as u64,
        ];
        Envelope::new(MAGIC, header).with_store(&self.store).to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let env = Envelope::from_bytes(bytes, MAGIC)?;
        let code = char::from_u32(env.header_at(0)? as u32).unwrap_or('?');
        let variant: Variant = code.to_string().parse().map_err(|_| Error::Format(format!("bad variant {code:?}")))?;
        let n = env.header_at(1)? as usize;
        let num_videos = env.header_at(2)? as usize;
        let d_h = env.header_at(3)? as usize;
        if n == 0 || n > MAX_ORDER {
            return Err(Error::Format(format!("bad n-gram order {n}")));
        }
        let store = env.to_store();
        let find = |name: &str| store.find(name).ok_or_else(|| Error::Format(format!("missing tensor {name}")));
        let ngram_emb = find("ngram_emb")?;
        let video_emb = if variant.uses_video() { Some(find("video_emb")?) } else { None };
        let gru = GruCellParams::find(&store, "gru")?;
        let w_out = find("w_out")?;
        let b_out = find("b_out")?;
        let m = store.value(ngram_emb).cols();
        let d_v = video_emb.map_or(0, |id| store.value(id).cols());
        let expected_len = 3 + usize::from(video_emb.is_some()) + 9;
        if store.value(ngram_emb).rows() != vocab_size(n)
            || video_emb.is_some_and(|id| store.value(id).rows() != num_videos + 1)
            || gru.d_in != m + d_v
            || gru.d_h != d_h
            || store.value(w_out).shape() != (d_h, 1)
            || store.value(b_out).shape() != (1, 1)
            || store.len() != expected_len
        {
            return Err(Error::Format("predictor tensors do not match the header".into()));
        }
        Ok(Self { variant, n, num_videos, store, ngram_emb, video_emb, gru, w_out, b_out })
    }
}

/// Predictions as `user_id, week, P, label` rows.
pub fn predictions_tsv(scored: &[ScoredInstance]) -> String {
    crate::persist::tsv(scored.iter().map(|s| {
        [s.user_id.clone(), s.week.to_string(), s.score.to_string(), u8::from(s.label).to_string()]
    }))
}

/// Parses prediction rows written by [`predictions_tsv`].
pub fn parse_predictions_tsv(text: &str) -> Result<Vec<ScoredInstance>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || Error::Input(format!("prediction line {}: {line:?}", i + 1));
            if f.len() != 4 {
                return Err(bad());
            }
            let score: f64 = f[2].parse().map_err(|_| bad())?;
            if !score.is_finite() {
                return Err(bad());
            }
            Ok(ScoredInstance {
                user_id: f[0].to_string(),
                week: f[1].parse().map_err(|_| bad())?,
                score,
                label: match f[3] {
                    "1" => true,
                    "0" => false,
                    _ => return Err(bad()),
                },
            })
        })
        .collect()
}

/// `max(0, −(P_pos − P_neg) + M)`.
pub fn margin_loss(p_pos: f64, p_neg: f64, margin: f64) -> f64 {
    (-(p_pos - p_neg) + margin).max(0.0)
}

/// Indices of a positive instance and a negative instance of the same user.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RankingPair {
    pub pos: usize,
    pub neg: usize,
}

/// One pair per negative instance of every user that has a positive instance.
pub fn build_pairs(instances: &[WeeklyInstance]) -> Vec<RankingPair> {
    let mut by_user: BTreeMap<&str, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (k, inst) in instances.iter().enumerate() {
        let e = by_user.entry(inst.user_id.as_str()).or_default();
        if inst.label {
            e.0.push(k);
        } else {
            e.1.push(k);
        }
    }
    let mut pairs = Vec::new();
    for (pos, neg) in by_user.values() {
        for &p in pos {
            pairs.extend(neg.iter().map(|&n| RankingPair { pos: p, neg: n }));
        }
    }
    pairs
}

/// `(1/T) Σ margin_loss` over `pairs`.
pub fn pair_objective(
    model: &DropoutPredictor,
    instances: &[WeeklyInstance],
    pairs: &[RankingPair],
    margin: f64,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Input("no ranking pairs".into()));
    }
    let mut cache: BTreeMap<usize, f64> = BTreeMap::new();
    let mut total = 0.0;
    for p in pairs {
        let mut prob = |k: usize| -> Result<f64> {
            if let Some(v) = cache.get(&k) {
                return Ok(*v);
            }
            let v = model.predict(&instances[k])?;
            cache.insert(k, v);
            Ok(v)
        };
        let (pp, pn) = (prob(p.pos)?, prob(p.neg)?);
        total += margin_loss(pp, pn, margin);
    }
    Ok(total / pairs.len() as f64)
}

/// Accumulates `∂/∂θ` of the mean margin loss over `pairs` into the store.
/// Each distinct instance is run once.
pub fn accumulate_pair_gradients(
    model: &mut DropoutPredictor,
    instances: &[WeeklyInstance],
    pairs: &[RankingPair],
    margin: f64,
) -> Result<f64> {
    let mut tapes: BTreeMap<usize, (Tape, Var)> = BTreeMap::new();
    for p in pairs {
        for k in [p.pos, p.neg] {
            if let std::collections::btree_map::Entry::Vacant(e) = tapes.entry(k) {
                let mut tape = Tape::new();
                let out = model.predict_tape(&mut tape, &instances[k])?;
                e.insert((tape, out));
            }
        }
    }
    let scale = 1.0 / pairs.len() as f64;
    let mut seeds: BTreeMap<usize, f64> = BTreeMap::new();
    let mut loss = 0.0;
    for p in pairs {
        let (tp, vp) = &tapes[&p.pos];
        let (tn, vn) = &tapes[&p.neg];
        let arg = -(tp.scalar(*vp) - tn.scalar(*vn)) + margin;
        if arg > 0.0 {
            loss += arg * scale;
            *seeds.entry(p.pos).or_default() -= scale;
            *seeds.entry(p.neg).or_default() += scale;
        }
    }
    for (k, seed) in seeds {
        if seed != 0.0 {
            let (tape, out) = &tapes[&k];
            tape.backward_seeded(*out, seed, &mut model.store)?;
        }
    }
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DropoutTrainReport {
    pub pairs: usize,
    pub initial_loss: f64,
    /// Pair objective on the training set after each epoch.
    pub epoch_losses: Vec<f64>,
    /// Validation AUC after each epoch, when a validation set was given.
    pub validation_aucs: Vec<f64>,
    /// 1-based epoch whose parameters were kept (0 = initialization).
    pub selected_epoch: usize,
    pub final_loss: f64,
}

/// Trains a predictor on the ranking pairs of `instances`. With a validation
/// set holding both classes, the parameters of the epoch with the highest
/// validation AUC are returned.
pub fn train_dropout(
    variant: Variant,
    n: usize,
    num_videos: usize,
    instances: &[WeeklyInstance],
    tables: PretrainedTables<'_>,
    config: &DropoutConfig,
    validation: Option<&[WeeklyInstance]>,
) -> Result<(DropoutPredictor, DropoutTrainReport)> {
    let pairs = build_pairs(instances);
    if pairs.is_empty() {
        return Err(Error::Input("training data yields no ranking pairs".into()));
    }
    if config.batch_size == 0 || config.margin < 0.0 {
        return Err(Error::Input("batch_size must be positive and margin non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = DropoutPredictor::with_rng(variant, n, num_videos, tables, config, &mut rng)?;
    let validation = validation.filter(|v| {
        let pos = v.iter().filter(|i| i.label).count();
        pos > 0 && pos < v.len()
    });
    let initial_loss = pair_objective(&model, instances, &pairs, config.margin)?;
    let mut best: Option<(f64, usize, ParamStore)> = match validation {
        Some(v) => Some((auc(&model.score(v)?)?, 0, model.store.clone())),
        None => None,
    };
    let mut opt = Optimizer::new(config.optim, &model.store);
    let mut order = pairs.clone();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut validation_aucs = Vec::new();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            accumulate_pair_gradients(&mut model, instances, batch, config.margin)?;
            opt.step(&mut model.store)?;
        }
        let loss = pair_objective(&model, instances, &pairs, config.margin)?;
        if !loss.is_finite() {
            return Err(Error::Diverged("margin ranking loss".into()));
        }
        epoch_losses.push(loss);
        if let Some(v) = validation {
            let a = auc(&model.score(v)?)?;
            validation_aucs.push(a);
            if best.as_ref().is_some_and(|b| a > b.0) {
                best = Some((a, epoch, model.store.clone()));
            }
        }
    }
    let mut selected_epoch = config.epochs;
    if let Some((_, epoch, store)) = best {
        model.store.copy_values_from(&store)?;
        selected_epoch = epoch;
    }
    let final_loss = pair_objective(&model, instances, &pairs, config.margin)?;
    Ok((
        model,
        DropoutTrainReport {
            pairs: pairs.len(),
            initial_loss,
            epoch_losses,
            validation_aucs,
            selected_epoch,
            final_loss,
        },
    ))
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::clickstream::Step;
    use crate::numeric::gradcheck::{finite_difference, relative_error};
    use rand::Rng;

    fn inst(user: &str, week: usize, steps: &[(usize, usize)], label: bool) -> WeeklyInstance {
        WeeklyInstance {
            user_id: user.into(),
            week,
            steps: steps.iter().map(|&s| Step::from(s)).collect(),
            label,
        }
    }

    fn tiny_config() -> DropoutConfig {
        DropoutConfig { d_h: 4, m: 3, d_v: 2, batch_size: 4, ..Default::default() }
    }

    #[test]
    fn margin_loss_examples() {
        assert_eq!(margin_loss(0.9, 0.2, 0.5), 0.0);
        assert_eq!(margin_loss(0.5, 0.5, 0.5), 0.5);
        assert_eq!(margin_loss(0.2, 0.9, 0.5), 1.2);
    }

    #[test]
    fn empty_sequence_uses_bias_only() {
        let mut m = DropoutPredictor::new(Variant::Click, 1, 3, Default::default(), &tiny_config()).unwrap();
        let e = inst("u", 0, &[], false);
        assert_eq!(m.predict(&e).unwrap(), 0.5);
        let (w, b) = m.output_ids();
        m.store_mut().value_mut(w).fill(0.0);
        m.store_mut().value_mut(b).fill(1.3);
        let full = inst("u", 0, &[(1, 0), (4, 2)], false);
        assert_eq!(m.predict(&full).unwrap(), sigmoid(1.3));
    }

    #[test]
    fn two_steps_match_manual_composition() {
        let m = DropoutPredictor::new(Variant::ClickPretrainedVideo, 1, 3, PretrainedTables {
            ngram: Some(&Matrix::from_rows(&(0..10).map(|i| vec![i as f64 * 0.1, -0.2, 0.05]).collect::<Vec<_>>()).unwrap()),
            video: None,
        }, &tiny_config())
        .unwrap();
        let x = inst("u", 0, &[(2, 1), (7, 3)], false);
        let s = m.store();
        let ng = s.value(s.find("ngram_emb").unwrap());
        let vd = s.value(s.find("video_emb").unwrap());
        let x0: Vec<f64> = ng.row(2).iter().chain(vd.row(1)).copied().collect();
        let x1: Vec<f64> = ng.row(7).iter().chain(vd.row(3)).copied().collect();
        let h1 = m.gru().step(s, &x0, &[0.0; 4]).unwrap();
        let h2 = m.gru().step(s, &x1, &h1).unwrap();
        let (w, b) = m.output_ids();
        let mut z = s.value(b).data()[0];
        for k in 0..4 {
            z += s.value(w).data()[k] * h2[k];
        }
        let expected = 1.0 / (1.0 + (-z).exp());
        assert!((m.predict(&x).unwrap() - expected).abs() <= 1e-12);
        assert!(m.predict(&inst("u", 0, &[(2, 4)], false)).is_err());
    }

    #[test]
    fn pairs_follow_user_structure() {
        let data = vec![
            inst("a", 0, &[], false),
            inst("a", 1, &[], false),
            inst("a", 2, &[], true),
            inst("b", 0, &[], false),
            inst("b", 1, &[], false),
            inst("c", 0, &[], true),
        ];
        let pairs = build_pairs(&data);
        assert_eq!(pairs, vec![RankingPair { pos: 2, neg: 0 }, RankingPair { pos: 2, neg: 1 }]);
    }

    fn random_instances(rng: &mut ChaCha8Rng, users: usize) -> Vec<WeeklyInstance> {
        let mut out = Vec::new();
        for u in 0..users {
            let weeks = rng.gen_range(2..5);
            for w in 0..weeks {
                let len = rng.gen_range(0..5);
                let steps: Vec<(usize, usize)> = (0..len).map(|_| (rng.gen_range(0..10), rng.gen_range(0..4))).collect();
                out.push(inst(&format!("u{u}"), w, &steps, w + 1 == weeks && u % 3 != 0));
            }
        }
        out
    }

    #[test]
    fn pair_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = random_instances(&mut rng, 4);
        let pairs = build_pairs(&data);
        let table = glorot_uniform(10, 3, &mut rng);
        for variant in Variant::ALL {
            let video = glorot_uniform(4, 2, &mut rng);
            let tables = PretrainedTables { ngram: Some(&table), video: Some(&video) };
            let mut m = DropoutPredictor::new(variant, 1, 3, tables, &DropoutConfig { margin: 2.0, ..tiny_config() })
                .unwrap();
            accumulate_pair_gradients(&mut m, &data, &pairs, 2.0).unwrap();
            let analytic = m.store.flatten_grads();
            let probe = m.clone();
            let numeric = finite_difference(&mut m.store, 1e-6, |s| {
                let mut p = probe.clone();
                p.store.copy_values_from(s).unwrap();
                pair_objective(&p, &data, &pairs, 2.0).unwrap()
            });
            let err = relative_error(&analytic, &numeric);
            assert!(err <= 1e-5, "variant {variant}: {err}");
        }
    }

    #[test]
    fn satisfied_pairs_leave_parameters_unchanged() {
        let mut data = vec![inst("u", 0, &[(1, 0)], false), inst("u", 1, &[(2, 0), (3, 0)], false)];
        let config = DropoutConfig { margin: 0.0, optim: OptimConfig::sgd(0.5), epochs: 3, ..tiny_config() };
        let init = DropoutPredictor::new(Variant::Click, 1, 1, Default::default(), &config).unwrap();
        let higher = usize::from(init.predict(&data[1]).unwrap() > init.predict(&data[0]).unwrap());
        data[higher].label = true;
        let (trained, report) = train_dropout(Variant::Click, 1, 1, &data, Default::default(), &config, None).unwrap();
        assert_eq!(report.initial_loss, 0.0);
        assert_eq!(trained.store.flatten_values(), init.store.flatten_values());
    }

    #[test]
    fn zero_pairs_is_input_error() {
        let data = vec![inst("u", 0, &[], false)];
        assert!(matches!(
            train_dropout(Variant::Click, 1, 1, &data, Default::default(), &tiny_config(), None),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn variants_require_their_tables() {
        let c = tiny_config();
        assert!(DropoutPredictor::new(Variant::ClickPretrained, 1, 2, Default::default(), &c).is_err());
        let t = Matrix::zeros(10, 3);
        let tables = PretrainedTables { ngram: Some(&t), video: None };
        assert!(DropoutPredictor::new(Variant::ClickPretrainedVideoPretrained, 1, 2, tables, &c).is_err());
        assert!(DropoutPredictor::new(Variant::ClickPretrainedVideo, 1, 2, tables, &c).is_ok());
    }

    #[test]
    fn click_only_variants_ignore_video_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = random_instances(&mut rng, 6);
        let table = glorot_uniform(10, 3, &mut rng);
        let video_a = glorot_uniform(4, 2, &mut rng);
        let video_b = glorot_uniform(4, 2, &mut rng);
        for variant in [Variant::Click, Variant::ClickPretrained] {
            let mk = |v: &Matrix| {
                let tables = PretrainedTables { ngram: Some(&table), video: Some(v) };
                train_dropout(variant, 1, 3, &data, tables, &DropoutConfig { epochs: 2, ..tiny_config() }, None)
                    .unwrap()
                    .0
            };
            let (ma, mb) = (mk(&video_a), mk(&video_b));
            assert!(ma.video_table_id().is_none());
            for d in &data {
                let mut moved = d.clone();
                moved.steps.iter_mut().for_each(|s| s.video = (s.video + 1) % 4);
                let p = ma.predict(d).unwrap();
                assert_eq!(p, mb.predict(d).unwrap());
                assert_eq!(p, ma.predict(&moved).unwrap());
            }
        }
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = random_instances(&mut rng, 20);
        let config = DropoutConfig { epochs: 15, optim: OptimConfig::adam(0.01), ..tiny_config() };
        let (a, report) = train_dropout(Variant::Click, 1, 3, &data, Default::default(), &config, None).unwrap();
        assert!(report.final_loss < report.initial_loss);
        let (b, _) = train_dropout(Variant::Click, 1, 3, &data, Default::default(), &config, None).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        for d in &data {
            assert_eq!(a.predict(d).unwrap().to_bits(), a.predict(d).unwrap().to_bits());
        }
    }

    #[test]
    fn persistence_preserves_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data = random_instances(&mut rng, 5);
        let table = glorot_uniform(10, 3, &mut rng);
        let video = glorot_uniform(4, 2, &mut rng);
        for variant in Variant::ALL {
            let tables = PretrainedTables { ngram: Some(&table), video: Some(&video) };
            let m = DropoutPredictor::new(variant, 1, 3, tables, &tiny_config()).unwrap();
            let back = DropoutPredictor::from_bytes(&m.to_bytes()).unwrap();
            assert_eq!(back.variant(), variant);
            for d in &data {
                assert_eq!(m.predict(d).unwrap().to_bits(), back.predict(d).unwrap().to_bits());
            }
        }
    }

    #[test]
    fn predictions_tsv_round_trip() {
        let s = vec![
            ScoredInstance { user_id: "u1".into(), week: 3, score: 0.123456789012345, label: true },
            ScoredInstance { user_id: "u2".into(), week: 0, score: 1e-9, label: false },
        ];
        assert_eq!(parse_predictions_tsv(&predictions_tsv(&s)).unwrap(), s);
        assert!(parse_predictions_tsv("u\t1\tx\t0\n").is_err());
    }

    proptest::proptest! {
        #[test]
        fn margin_loss_depends_on_difference_only(
            p in 0.0f64..1.0, q in 0.0f64..1.0, shift in -0.5f64..0.5, m in 0.0f64..1.0,
        ) {
            let a = margin_loss(p, q, m);
            let b = margin_loss(p + shift, q + shift, m);
            proptest::prop_assert!((a - b).abs() <= 1e-12);
            proptest::prop_assert_eq!(a == 0.0, p >= q + m || (-(p - q) + m) <= 0.0);
        }
    }
}
