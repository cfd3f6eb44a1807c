//! Click events, weekly sessionization, click n-gram extraction and dropout
//! labels.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Read};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SECONDS_PER_WEEK: i64 = 604_800;
pub const NUM_CLICK_TYPES: usize = 10;
/// Largest supported n-gram order; the one-hot space is `10^n`.
pub const MAX_ORDER: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ClickType {
    Pageview = 0,
    Quiz = 1,
    Forum = 2,
    Play = 3,
    Pause = 4,
    SeekFwd = 5,
    SeekBwd = 6,
    RateFaster = 7,
    RateSlower = 8,
    Stalled = 9,
}

impl ClickType {
    pub const ALL: [ClickType; NUM_CLICK_TYPES] = [
        ClickType::Pageview,
        ClickType::Quiz,
        ClickType::Forum,
        ClickType::Play,
        ClickType::Pause,
        ClickType::SeekFwd,
        ClickType::SeekBwd,
        ClickType::RateFaster,
        ClickType::RateSlower,
        ClickType::Stalled,
    ];

    pub fn ordinal(self) -> usize {
        self as usize
    }

    pub fn from_ordinal(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ClickType::Pageview => "Pageview",
            ClickType::Quiz => "Quiz",
            ClickType::Forum => "Forum",
            ClickType::Play => "Play",
            ClickType::Pause => "Pause",
            ClickType::SeekFwd => "SeekFwd",
            ClickType::SeekBwd => "SeekBwd",
            ClickType::RateFaster => "RateFaster",
            ClickType::RateSlower => "RateSlower",
            ClickType::Stalled => "Stalled",
        }
    }

    /// Whether events of this type refer to a video.
    pub fn has_video(self) -> bool {
        !matches!(self, ClickType::Pageview | ClickType::Quiz | ClickType::Forum)
    }
}

impl fmt::Display for ClickType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClickType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown click type {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClickEvent {
    pub user_id: String,
    pub timestamp: i64,
    pub click_type: ClickType,
    pub video_id: Option<String>,
}

/// Wire form of one event, matching the JSONL schema.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRecord {
    pub user_id: String,
    pub timestamp: i64,
    pub click_type: String,
    pub video_id: Option<String>,
}

impl From<&ClickEvent> for EventRecord {
    fn from(e: &ClickEvent) -> Self {
        Self {
            user_id: e.user_id.clone(),
            timestamp: e.timestamp,
            click_type: e.click_type.name().to_string(),
            video_id: e.video_id.clone(),
        }
    }
}

pub fn vocab_size(n: usize) -> usize {
    NUM_CLICK_TYPES.pow(n as u32)
}

fn check_order(n: usize) -> Result<()> {
    if n == 0 || n > MAX_ORDER {
        return Err(Error::Input(format!("n-gram order must be in 1..={MAX_ORDER}, got {n}")));
    }
    Ok(())
}

/// Base-10 positional index of a click n-gram; the first click is the most
/// significant digit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NGramIndex {
    pub n: usize,
    pub index: usize,
}

impl NGramIndex {
    pub fn new(n: usize, index: usize) -> Result<Self> {
        check_order(n)?;
        if index >= vocab_size(n) {
            return Err(Error::OutOfRange(format!("n-gram index {index} for n = {n}")));
        }
        Ok(Self { n, index })
    }

    pub fn from_clicks(clicks: &[ClickType]) -> Result<Self> {
        Ok(Self { n: clicks.len(), index: ngram_to_index(clicks)? })
    }

    pub fn clicks(self) -> Vec<ClickType> {
        index_to_ngram(self.index, self.n).expect("validated on construction")
    }
}

pub fn ngram_to_index(clicks: &[ClickType]) -> Result<usize> {
    check_order(clicks.len())?;
    Ok(clicks.iter().fold(0, |acc, c| acc * NUM_CLICK_TYPES + c.ordinal()))
}

pub fn index_to_ngram(index: usize, n: usize) -> Result<Vec<ClickType>> {
    check_order(n)?;
    if index >= vocab_size(n) {
        return Err(Error::OutOfRange(format!("n-gram index {index} for n = {n}")));
    }
    let mut out = vec![ClickType::Pageview; n];
    let mut rest = index;
    for slot in out.iter_mut().rev() {
        *slot = ClickType::ALL[rest % NUM_CLICK_TYPES];
        rest /= NUM_CLICK_TYPES;
    }
    Ok(out)
}

/// Dense video indexing plus the course framing used for sessionization.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CourseVocab {
    /// Video ids in index order.
    pub video_ids: Vec<String>,
    pub n: usize,
    pub course_start: i64,
    pub horizon: usize,
    #[serde(skip)]
    lookup: BTreeMap<String, usize>,
}

impl CourseVocab {
    pub fn new(video_ids: Vec<String>, n: usize, course_start: i64, horizon: usize) -> Result<Self> {
        check_order(n)?;
        if horizon == 0 {
            return Err(Error::Input("horizon must be at least one week".into()));
        }
        let mut lookup = BTreeMap::new();
        for (i, v) in video_ids.iter().enumerate() {
            if lookup.insert(v.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate video id {v:?}")));
            }
        }
        Ok(Self { video_ids, n, course_start, horizon, lookup })
    }

    /// Rebuilds the lookup after deserialization.
    pub fn reindex(mut self) -> Result<Self> {
        let ids = std::mem::take(&mut self.video_ids);
        Self::new(ids, self.n, self.course_start, self.horizon)
    }

    pub fn num_videos(&self) -> usize {
        self.video_ids.len()
    }

    /// Sentinel index used for steps without a video.
    pub fn no_video(&self) -> usize {
        self.video_ids.len()
    }

    pub fn index_of(&self, video_id: &str) -> Option<usize> {
        self.lookup.get(video_id).copied()
    }

    pub fn to_json_map(&self) -> BTreeMap<String, usize> {
        self.lookup.clone()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParseOptions {
    pub n: usize,
    pub course_start: i64,
    pub horizon: usize,
}

impl Default for ParseOptions {
    fn default() -> Self {
        Self { n: 4, course_start: 0, horizon: 12 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Rejection {
    /// 1-based line (JSONL) or record (CSV, excluding the header) number.
    pub line: usize,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct ParseOutcome {
    pub events: Vec<ClickEvent>,
    pub vocab: CourseVocab,
    pub rejected: Vec<Rejection>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputFormat {
    Jsonl,
    Csv,
}

fn validate_record(
    user_id: String,
    timestamp: i64,
    click_type: &str,
    video_id: Option<String>,
    opts: &ParseOptions,
) -> std::result::Result<ClickEvent, String> {
    let click_type: ClickType = click_type.parse().map_err(|e: Error| e.to_string())?;
    if timestamp < opts.course_start {
        return Err(format!("timestamp {timestamp} precedes course start {}", opts.course_start));
    }
    let video_id = video_id.filter(|v| !v.is_empty());
    let video_id = if click_type.has_video() {
        match video_id {
            Some(v) => Some(v),
            None => return Err(format!("{click_type} event without video_id")),
        }
    } else {
        None
    };
    Ok(ClickEvent { user_id, timestamp, click_type, video_id })
}

fn parse_json_line(line: &str, opts: &ParseOptions) -> std::result::Result<ClickEvent, String> {
    let v: serde_json::Value = serde_json::from_str(line).map_err(|e| format!("invalid JSON: {e}"))?;
    let obj = v.as_object().ok_or("record is not a JSON object")?;
    let user_id = obj
        .get("user_id")
        .and_then(|u| u.as_str())
        .ok_or("missing or non-string user_id")?
        .to_string();
    let timestamp = match obj.get("timestamp") {
        Some(serde_json::Value::Number(n)) => n.as_i64().ok_or_else(|| format!("unparseable timestamp {n}"))?,
        Some(serde_json::Value::String(s)) => {
            s.trim().parse::<i64>().map_err(|_| format!("unparseable timestamp {s:?}"))?
        }
        Some(other) => return Err(format!("unparseable timestamp {other}")),
        None => return Err("missing timestamp".into()),
    };
    let click_type = obj.get("click_type").and_then(|c| c.as_str()).ok_or("missing or non-string click_type")?;
    let video_id = match obj.get("video_id") {
        None | Some(serde_json::Value::Null) => None,
        Some(serde_json::Value::String(s)) => Some(s.clone()),
        Some(other) => return Err(format!("video_id must be a string or null, got {other}")),
    };
    validate_record(user_id, timestamp, click_type, video_id, opts)
}

/// Parses click events, rejecting malformed records individually.
pub fn parse_events<R: Read>(reader: R, format: InputFormat, opts: &ParseOptions) -> Result<ParseOutcome> {
    check_order(opts.n)?;
    let mut events = Vec::new();
    let mut rejected = Vec::new();
    match format {
        InputFormat::Jsonl => {
            for (i, line) in std::io::BufReader::new(reader).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match parse_json_line(&line, opts) {
                    Ok(e) => events.push(e),
                    Err(reason) => rejected.push(Rejection { line: i + 1, reason }),
                }
            }
        }
        InputFormat::Csv => {
            let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
            let headers = rdr.headers()?.clone();
            let col = |name: &str| headers.iter().position(|h| h.trim() == name);
            let (Some(cu), Some(ct), Some(cc)) = (col("user_id"), col("timestamp"), col("click_type")) else {
                return Err(Error::Input("CSV header must contain user_id, timestamp, click_type".into()));
            };
            let cv = col("video_id");
            for (i, rec) in rdr.records().enumerate() {
                let line = i + 1;
                let rec = match rec {
                    Ok(r) => r,
                    Err(e) => {
                        rejected.push(Rejection { line, reason: e.to_string() });
                        continue;
                    }
                };
                let field = |k: usize| rec.get(k).map(str::trim);
                let parsed = (|| {
                    let user = field(cu).filter(|s| !s.is_empty()).ok_or("missing user_id")?;
                    let ts_raw = field(ct).ok_or("missing timestamp")?;
                    let ts = ts_raw.parse::<i64>().map_err(|_| format!("unparseable timestamp {ts_raw:?}"))?;
                    let ctype = field(cc).ok_or("missing click_type")?;
                    let video = cv.and_then(field).map(str::to_string);
                    validate_record(user.to_string(), ts, ctype, video, opts)
                })();
                match parsed {
                    Ok(e) => events.push(e),
                    Err(reason) => rejected.push(Rejection { line, reason }),
                }
            }
        }
    }
    // Stable: ties keep input order.
    events.sort_by(|a, b| a.user_id.cmp(&b.user_id).then(a.timestamp.cmp(&b.timestamp)));
    let mut ids: Vec<String> = events.iter().filter_map(|e| e.video_id.clone()).collect();
    ids.sort();
    ids.dedup();
    let vocab = CourseVocab::new(ids, opts.n, opts.course_start, opts.horizon)?;
    Ok(ParseOutcome { events, vocab, rejected })
}

/// Clicks of one user in one week, in time order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WeekClicks {
    pub week: usize,
    pub clicks: Vec<ClickEvent>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserWeeks {
    pub user_id: String,
    /// Active weeks only, ascending.
    pub weeks: Vec<WeekClicks>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sessions {
    pub users: Vec<UserWeeks>,
    /// Events at or beyond the horizon.
    pub dropped: usize,
}

pub fn week_of(timestamp: i64, course_start: i64) -> i64 {
    (timestamp - course_start).div_euclid(SECONDS_PER_WEEK)
}

/// Buckets events into `(user, week)` groups, dropping events past the horizon.
pub fn sessionize(events: &[ClickEvent], vocab: &CourseVocab) -> Sessions {
    let mut grouped: BTreeMap<&str, BTreeMap<usize, Vec<ClickEvent>>> = BTreeMap::new();
    let mut dropped = 0;
    for e in events {
        let w = week_of(e.timestamp, vocab.course_start);
        if w < 0 || w >= vocab.horizon as i64 {
            dropped += 1;
            continue;
        }
        grouped
            .entry(e.user_id.as_str())
            .or_default()
            .entry(w as usize)
            .or_default()
            .push(e.clone());
    }
    let users = grouped
        .into_iter()
        .map(|(u, weeks)| UserWeeks {
            user_id: u.to_string(),
            weeks: weeks.into_iter().map(|(week, clicks)| WeekClicks { week, clicks }).collect(),
        })
        .collect();
    Sessions { users, dropped }
}

/// One model input step: a click n-gram and the video of its last click.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct Step {
    pub ngram: usize,
    pub video: usize,
}

impl From<(usize, usize)> for Step {
    fn from((ngram, video): (usize, usize)) -> Self {
        Self { ngram, video }
    }
}

impl From<Step> for (usize, usize) {
    fn from(s: Step) -> Self {
        (s.ngram, s.video)
    }
}

fn video_index(e: &ClickEvent, vocab: &CourseVocab) -> Result<usize> {
    match &e.video_id {
        None => Ok(vocab.no_video()),
        Some(v) => vocab
            .index_of(v)
            .ok_or_else(|| Error::OutOfRange(format!("video {v:?} is not in the vocabulary"))),
    }
}

/// Overlapping (stride 1) click n-grams; `L` clicks give `max(0, L − n + 1)` steps.
pub fn extract_ngrams(clicks: &[ClickEvent], n: usize, vocab: &CourseVocab) -> Result<Vec<Step>> {
    check_order(n)?;
    if clicks.len() < n {
        return Ok(Vec::new());
    }
    let types: Vec<ClickType> = clicks.iter().map(|c| c.click_type).collect();
    types
        .windows(n)
        .zip(&clicks[n - 1..])
        .map(|(w, last)| {
            Ok(Step { ngram: ngram_to_index(w)?, video: video_index(last, vocab)? })
        })
        .collect()
}

/// A run of consecutive n-grams whose clicks all refer to one real video.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoSequence {
    pub user_id: String,
    pub video: usize,
    pub ngrams: Vec<usize>,
}

/// Splits one week's clicks into maximal runs of single-video windows.
/// Windows containing a video-less click or spanning two videos break runs.
pub fn video_sequences(
    user_id: &str,
    clicks: &[ClickEvent],
    n: usize,
    vocab: &CourseVocab,
) -> Result<Vec<VideoSequence>> {
    check_order(n)?;
    let mut out: Vec<VideoSequence> = Vec::new();
    if clicks.len() < n {
        return Ok(out);
    }
    let vids = clicks.iter().map(|c| video_index(c, vocab)).collect::<Result<Vec<_>>>()?;
    let types: Vec<ClickType> = clicks.iter().map(|c| c.click_type).collect();
    let mut current: Option<VideoSequence> = None;
    for start in 0..=clicks.len() - n {
        let window = &vids[start..start + n];
        let v = window[0];
        let pure = v != vocab.no_video() && window.iter().all(|&x| x == v);
        if !pure {
            out.extend(current.take());
            continue;
        }
        let idx = ngram_to_index(&types[start..start + n])?;
        match &mut current {
            Some(seq) if seq.video == v => seq.ngrams.push(idx),
            _ => {
                out.extend(current.take());
                current = Some(VideoSequence { user_id: user_id.to_string(), video: v, ngrams: vec![idx] });
            }
        }
    }
    out.extend(current);
    Ok(out)
}

/// One `(user, week)` training instance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeeklyInstance {
    pub user_id: String,
    pub week: usize,
    pub steps: Vec<Step>,
    /// Dropout after this week.
    pub label: bool,
}

/// Per-user active weeks with their extracted steps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserSteps {
    pub user_id: String,
    pub weeks: Vec<(usize, Vec<Step>)>,
}

/// Labels the last active week positive unless it is the final week of the
/// horizon; every other active week is negative.
pub fn assign_labels(users: Vec<UserSteps>, horizon: usize) -> Vec<WeeklyInstance> {
    let mut out = Vec::new();
    for u in users {
        let Some(last) = u.weeks.iter().map(|(w, _)| *w).max() else { continue };
        let dropped = last + 1 < horizon;
        for (week, steps) in u.weeks {
            out.push(WeeklyInstance {
                user_id: u.user_id.clone(),
                week,
                steps,
                label: dropped && week == last,
            });
        }
    }
    out
}

/// Ingested corpus ready for training.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Dataset {
    pub vocab: CourseVocab,
    pub instances: Vec<WeeklyInstance>,
    pub video_sequences: Vec<VideoSequence>,
    /// Events at or beyond the horizon that were discarded.
    pub dropped_events: usize,
}

impl Dataset {
    pub fn from_events(events: &[ClickEvent], vocab: CourseVocab) -> Result<Self> {
        let sessions = sessionize(events, &vocab);
        let n = vocab.n;
        let mut per_user = Vec::with_capacity(sessions.users.len());
        let mut video_seqs = Vec::new();
        for u in &sessions.users {
            let mut weeks = Vec::with_capacity(u.weeks.len());
            for w in &u.weeks {
                weeks.push((w.week, extract_ngrams(&w.clicks, n, &vocab)?));
                video_seqs.extend(video_sequences(&u.user_id, &w.clicks, n, &vocab)?);
            }
            per_user.push(UserSteps { user_id: u.user_id.clone(), weeks });
        }
        let instances = assign_labels(per_user, vocab.horizon);
        Ok(Self { vocab, instances, video_sequences: video_seqs, dropped_events: sessions.dropped })
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let mut d: Dataset = serde_json::from_str(s)?;
        d.vocab = d.vocab.reindex()?;
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let v = vocab_size(self.vocab.n);
        let nv = self.vocab.no_video();
        for inst in &self.instances {
            if inst.week >= self.vocab.horizon {
                return Err(Error::Input(format!("instance week {} beyond horizon", inst.week)));
            }
            if let Some(s) = inst.steps.iter().find(|s| s.ngram >= v || s.video > nv) {
                return Err(Error::OutOfRange(format!("step {s:?} for user {}", inst.user_id)));
            }
        }
        for s in &self.video_sequences {
            if s.video >= nv || s.ngrams.iter().any(|&g| g >= v) {
                return Err(Error::OutOfRange(format!("video sequence for user {}", s.user_id)));
            }
        }
        Ok(())
    }

    /// Distinct user ids in ascending order.
    pub fn users(&self) -> Vec<String> {
        let mut u: Vec<String> = self.instances.iter().map(|i| i.user_id.clone()).collect();
        u.dedup();
        u.sort();
        u.dedup();
        u
    }
}
