//! Synthetic clickstreams with planted engagement, difficulty and dropout.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Poisson};
use serde::{Deserialize, Serialize};

use crate::clickstream::{week_of, ClickEvent, ClickType, EventRecord, NUM_CLICK_TYPES, SECONDS_PER_WEEK};
use crate::error::{Error, Result};
use crate::metrics::spearman;

/// Click-type mix of an engaged learner (Play/Pause heavy).
pub const ENGAGED_PROFILE: [f64; NUM_CLICK_TYPES] = [0.08, 0.06, 0.04, 0.30, 0.20, 0.14, 0.06, 0.07, 0.02, 0.03];
/// Click-type mix of a struggling learner (SeekBwd/Stalled/Pause heavy).
pub const STRUGGLING_PROFILE: [f64; NUM_CLICK_TYPES] = [0.06, 0.04, 0.07, 0.12, 0.29, 0.04, 0.20, 0.01, 0.07, 0.10];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub users: usize,
    pub videos: usize,
    pub horizon: usize,
    pub seed: u64,
    pub course_start: i64,
    /// Beta(a, b) shape of per-user engagement.
    pub engagement_a: f64,
    pub engagement_b: f64,
    /// Beta(a, b) shape of per-video difficulty.
    pub difficulty_a: f64,
    pub difficulty_b: f64,
    /// Hazard weight on difficulty.
    pub alpha: f64,
    /// Hazard weight on engagement.
    pub beta: f64,
    /// Hazard intercept.
    pub gamma: f64,
    /// Weekly click volume rate.
    pub lambda: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            users: 5000,
            videos: 24,
            horizon: 8,
            seed: 0,
            course_start: 1_700_000_000,
            engagement_a: 2.0,
            engagement_b: 2.0,
            difficulty_a: 2.0,
            difficulty_b: 2.0,
            alpha: 4.0,
            beta: 2.0,
            gamma: -3.5,
            lambda: 40.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, why: &str| Err(Error::Input(format!("{f}: {why}")));
        if self.users == 0 {
            return bad("users", "must be at least 1");
        }
        if self.videos == 0 {
            return bad("videos", "must be at least 1");
        }
        if self.horizon == 0 {
            return bad("horizon", "must be at least 1");
        }
        for (name, v) in [
            ("engagement_a", self.engagement_a),
            ("engagement_b", self.engagement_b),
            ("difficulty_a", self.difficulty_a),
            ("difficulty_b", self.difficulty_b),
            ("lambda", self.lambda),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(name, "must be positive");
            }
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !v.is_finite() {
                return bad(name, "must be finite");
            }
        }
        let last = (self.horizon as i64).checked_mul(SECONDS_PER_WEEK).and_then(|s| s.checked_add(self.course_start));
        if self.course_start < 0 || last.is_none() {
            return bad("course_start", "out of range");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserTruth {
    pub user_id: String,
    pub engagement: f64,
    /// Last active week of a learner who dropped out; `None` for completers.
    pub dropout_week: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoTruth {
    pub video_id: String,
    pub difficulty: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub course_start: i64,
    pub horizon: usize,
    pub users: Vec<UserTruth>,
    pub videos: Vec<VideoTruth>,
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    /// Sorted by user id, then timestamp.
    pub events: Vec<ClickEvent>,
    pub truth: GroundTruth,
}

impl SyntheticCorpus {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(&EventRecord::from(e))?);
            out.push('\n');
        }
        Ok(out)
    }
}

pub fn logistic(x: f64) -> f64 {
    crate::numeric::sigmoid(x)
}

/// Click-type distribution for a video of difficulty `d`.
pub fn click_profile(d: f64) -> [f64; NUM_CLICK_TYPES] {
    let mut p = [0.0; NUM_CLICK_TYPES];
    for (k, slot) in p.iter_mut().enumerate() {
        *slot = (1.0 - d) * ENGAGED_PROFILE[k] + d * STRUGGLING_PROFILE[k];
    }
    p
}

/// A learner's personal syllabus: a random ordering of the catalog, repeated
/// when the course has more weeks than videos. Week `w` shows entry `w`.
pub fn syllabus<R: Rng>(rng: &mut R, videos: usize, horizon: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..videos).collect();
    order.shuffle(rng);
    order.iter().copied().cycle().take(horizon).collect()
}

fn pad(prefix: char, i: usize, count: usize) -> String {
    let width = count.saturating_sub(1).to_string().len().max(2);
    format!("{prefix}{i:0width$}")
}

fn user_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generates a corpus. Each active week has one video and at least one click.
pub fn generate(config: &SynthConfig) -> Result<SyntheticCorpus> {
    config.validate()?;
    let beta = |a, b| Beta::new(a, b).map_err(|e| Error::Input(format!("beta distribution: {e}")));
    let engagement_dist = beta(config.engagement_a, config.engagement_b)?;
    let difficulty_dist = beta(config.difficulty_a, config.difficulty_b)?;

    let mut rng = user_rng(config.seed, 0);
    let videos: Vec<VideoTruth> = (0..config.videos)
        .map(|v| VideoTruth { video_id: pad('v', v, config.videos), difficulty: difficulty_dist.sample(&mut rng) })
        .collect();
    let profiles = videos
        .iter()
        .map(|v| WeightedIndex::new(click_profile(v.difficulty)))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Input(format!("click profile: {e}")))?;

    let mut events = Vec::new();
    let mut users = Vec::with_capacity(config.users);
    for u in 0..config.users {
        let mut rng = user_rng(config.seed, u as u64 + 1);
        let user_id = pad('u', u, config.users.max(100_000));
        let e = engagement_dist.sample(&mut rng);
        let volume = Poisson::new(config.lambda * e).map_err(|err| Error::Input(format!("poisson: {err}")))?;
        let plan = syllabus(&mut rng, config.videos, config.horizon);
        let mut dropout_week = None;
        for (w, &v) in plan.iter().enumerate() {
            let count = 1 + volume.sample(&mut rng) as usize;
            let week_start = config.course_start + w as i64 * SECONDS_PER_WEEK;
            let mut offsets: Vec<i64> = (0..count).map(|_| rng.gen_range(0..SECONDS_PER_WEEK)).collect();
            offsets.sort_unstable();
            for off in offsets {
                let click_type = ClickType::ALL[profiles[v].sample(&mut rng)];
                events.push(ClickEvent {
                    user_id: user_id.clone(),
                    timestamp: week_start + off,
                    click_type,
                    video_id: click_type.has_video().then(|| videos[v].video_id.clone()),
                });
            }
            if w + 1 < config.horizon {
                let hazard = logistic(config.alpha * videos[v].difficulty - config.beta * e + config.gamma);
                if rng.gen::<f64>() < hazard {
                    dropout_week = Some(w);
                    break;
                }
            }
        }
        users.push(UserTruth { user_id, engagement: e, dropout_week });
    }
    Ok(SyntheticCorpus {
        events,
        truth: GroundTruth { course_start: config.course_start, horizon: config.horizon, users, videos },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SignalStatus {
    Ok,
    Failed { reasons: Vec<String> },
    InsufficientData { reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalReport {
    #[serde(flatten)]
    pub status: SignalStatus,
    pub events: usize,
    pub users: usize,
    pub user_weeks: usize,
    /// Spearman of per-video mean SeekBwd+Stalled fraction against difficulty.
    pub seek_stall_vs_difficulty: Option<f64>,
    /// Spearman of the watched video's difficulty against the dropout label,
    /// over user-weeks that could end in dropout.
    pub difficulty_vs_dropout: Option<f64>,
    pub engagement_vs_dropout: Option<f64>,
    pub dropout_rate: Option<f64>,
}

/// Minimum Spearman correlation between struggle clicks and difficulty.
pub const SEEK_STALL_THRESHOLD: f64 = 0.3;

/// Checks that the planted correlations are visible in `events`.
pub fn signal_check(events: &[ClickEvent], truth: &GroundTruth) -> SignalReport {
    let difficulty: BTreeMap<&str, f64> =
        truth.videos.iter().map(|v| (v.video_id.as_str(), v.difficulty)).collect();
    let outcome: BTreeMap<&str, (f64, Option<usize>)> =
        truth.users.iter().map(|u| (u.user_id.as_str(), (u.engagement, u.dropout_week))).collect();

    // Per (user, week): video, struggle clicks, all clicks.
    let mut weeks: BTreeMap<(&str, i64), (Option<&str>, usize, usize)> = BTreeMap::new();
    for e in events {
        let wk = week_of(e.timestamp, truth.course_start);
        let slot = weeks.entry((e.user_id.as_str(), wk)).or_insert((None, 0, 0));
        if let Some(v) = e.video_id.as_deref() {
            slot.0 = Some(v);
        }
        slot.1 += usize::from(matches!(e.click_type, ClickType::SeekBwd | ClickType::Stalled));
        slot.2 += 1;
    }

    let mut per_video: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    let (mut d_inst, mut e_inst, mut y_inst) = (Vec::new(), Vec::new(), Vec::new());
    for (&(user, wk), &(video, struggle, total)) in &weeks {
        let Some(video) = video else { continue };
        let entry = per_video.entry(video).or_default();
        entry.0 += struggle as f64 / total as f64;
        entry.1 += 1;
        let (Some(&d), Some(&(eng, drop))) = (difficulty.get(video), outcome.get(user)) else { continue };
        if wk < 0 || wk as usize + 1 >= truth.horizon {
            continue;
        }
        d_inst.push(d);
        e_inst.push(eng);
        y_inst.push(if drop == Some(wk as usize) { 1.0 } else { 0.0 });
    }
    let (mut vd, mut vf) = (Vec::new(), Vec::new());
    for (video, (sum, count)) in &per_video {
        if let Some(&d) = difficulty.get(video) {
            vd.push(d);
            vf.push(sum / *count as f64);
        }
    }

    let seek = spearman(&vd, &vf);
    let diff = spearman(&d_inst, &y_inst);
    let eng = spearman(&e_inst, &y_inst);
    let rate = (!y_inst.is_empty()).then(|| y_inst.iter().sum::<f64>() / y_inst.len() as f64);
    let status = match (seek, diff) {
        _ if events.is_empty() => SignalStatus::InsufficientData { reason: "corpus has no events".into() },
        (None, _) => SignalStatus::InsufficientData { reason: "fewer than two distinct videos with clicks".into() },
        (_, None) => SignalStatus::InsufficientData { reason: "dropout labels or difficulties are constant".into() },
        (Some(s), Some(d)) => {
            let mut reasons = Vec::new();
            if s <= SEEK_STALL_THRESHOLD {
                reasons.push(format!(
                    "SeekBwd+Stalled fraction vs difficulty Spearman {s:.3} ≤ {SEEK_STALL_THRESHOLD}"
                ));
            }
            if d <= 0.0 {
                reasons.push(format!("dropout does not increase with difficulty (Spearman {d:.3})"));
            }
            if reasons.is_empty() {
                SignalStatus::Ok
            } else {
                SignalStatus::Failed { reasons }
            }
        }
    };
    SignalReport {
        status,
        events: events.len(),
        users: outcome.len(),
        user_weeks: weeks.len(),
        seek_stall_vs_difficulty: seek,
        difficulty_vs_dropout: diff,
        engagement_vs_dropout: eng,
        dropout_rate: rate,
    }
}
