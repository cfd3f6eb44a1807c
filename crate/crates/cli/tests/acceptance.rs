//! Acceptance checks, one PASS/FAIL line each. Runs without the libtest
//! harness so the lines are always printed.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clickdrop::clickstream::{
    index_to_ngram, ngram_to_index, vocab_size, ClickType, CourseVocab, Dataset, Step, WeeklyInstance,
};
use clickdrop::dropout::{
    accumulate_pair_gradients, build_pairs, margin_loss, pair_objective, DropoutConfig, DropoutPredictor,
    PretrainedTables, Variant,
};
use clickdrop::experiment::{run_once, split_users, ExperimentConfig};
use clickdrop::metrics::auc_scores;
use clickdrop::ngram::{
    context_targets, train_ngram_embeddings, NGramConfig, NGramEmbeddingModel, PretrainCorpus,
};
use clickdrop::numeric::gradcheck::{finite_difference, relative_error};
use clickdrop::numeric::{glorot_uniform, softmax, Matrix, OptimConfig, ParamStore, Tape};
use clickdrop::persist::write_atomic;
use clickdrop::synth::{generate, SynthConfig};
use clickdrop::video::{extract_video_embedding, ExtractConfig, VideoClassifier, VideoEmbeddingSet};
use clickdrop_cli::run;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PUBLISHED_AUCS: &str = "0.740 / 0.757 / 0.784 / 0.783";

type Check = fn() -> Outcome;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn preset_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/experiment.json")
}

fn cli(args: &[&str]) -> i32 {
    run(std::iter::once("clickdrop").chain(args.iter().copied()))
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(path).expect("readable output")).expect("valid json")
}

fn synthetic_ordering() -> Outcome {
    println!(
        "    published AUCs ({PUBLISHED_AUCS}) come from a private MOOC click log and cannot be reproduced; \
         checking the ordering on the synthetic corpus instead"
    );
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    let preset = preset_path().display().to_string();
    let start = Instant::now();
    let code = cli(&["experiment", "--config", &preset, "--out", &out]);
    let elapsed = start.elapsed();
    if code != 0 {
        return outcome(false, format!("experiment exited with {code}"));
    }
    let report = read_json(&dir.path().join("report.json"));
    let mean = |v: &str| report["variants"][v]["mean_auc"].as_f64().unwrap_or(f64::NAN);
    let (a, b, c, d) = (mean("a"), mean("b"), mean("c"), mean("d"));
    let p_ca = report["comparisons"]
        .as_array()
        .into_iter()
        .flatten()
        .find(|x| x["a"] == "a" && x["b"] == "c")
        .and_then(|x| x["p_value"].as_f64())
        .unwrap_or(f64::NAN);
    let cfg = &report["config"]["synth"];
    let scale_ok = cfg["users"] == 5000 && cfg["videos"] == 24 && cfg["horizon"] == 8 && report["config"]["runs"] == 5;
    let pass = scale_ok && c > b && b > a && p_ca < 0.05 && elapsed < Duration::from_secs(20 * 60);
    outcome(
        pass,
        format!(
            "mean AUC a {a:.4} b {b:.4} c {c:.4} d {d:.4}; p(c vs a) {p_ca:.4}; {:.1} min",
            elapsed.as_secs_f64() / 60.0
        ),
    )
}

fn check_grad<M: Clone>(
    model: &mut M,
    store: fn(&mut M) -> &mut ParamStore,
    analytic: impl FnOnce(&mut M),
    value: impl Fn(&M) -> f64,
) -> f64 {
    store(model).zero_grads();
    analytic(model);
    let g = store(model).flatten_grads();
    let probe = model.clone();
    let numeric = finite_difference(store(model), 1e-6, |s| {
        let mut m = probe.clone();
        store(&mut m).copy_values_from(s).unwrap();
        value(&m)
    });
    relative_error(&g, &numeric)
}

fn random_instances(rng: &mut ChaCha8Rng) -> Vec<WeeklyInstance> {
    let mut out = Vec::new();
    for u in 0..3 {
        let weeks = rng.gen_range(2..4);
        for w in 0..weeks {
            let steps = (0..rng.gen_range(1..4))
                .map(|_| Step { ngram: rng.gen_range(0..10), video: rng.gen_range(0..4) })
                .collect();
            out.push(WeeklyInstance { user_id: format!("u{u}"), week: w, steps, label: w + 1 == weeks });
        }
    }
    out
}

fn gradient_suite() -> Outcome {
    const DRAWS: u64 = 100;
    let start = Instant::now();
    let mut worst = [0.0f64; 3];
    for draw in 0..DRAWS {
        let mut rng = ChaCha8Rng::seed_from_u64(draw);

        let mut ngram = NGramEmbeddingModel::new(1, 3, draw).unwrap();
        let seq: Vec<usize> = (0..rng.gen_range(2..7)).map(|_| rng.gen_range(0..10)).collect();
        let t = rng.gen_range(0..seq.len());
        let w = rng.gen_range(1..3);
        let targets = context_targets(&seq, t, w);
        let err = check_grad(
            &mut ngram,
            NGramEmbeddingModel::store_mut,
            |m| {
                let mut tape = Tape::new();
                let loss = m.loss_tape(&mut tape, seq[t], &targets, false).unwrap();
                tape.backward(loss, m.store_mut()).unwrap();
            },
            |m| m.window_loss(&seq, t, w).unwrap(),
        );
        worst[0] = worst[0].max(err);

        let table = glorot_uniform(10, 3, &mut rng);
        let mut clf = VideoClassifier::new(&table, 3, 4, draw).unwrap();
        let ngrams: Vec<usize> = (0..rng.gen_range(1..5)).map(|_| rng.gen_range(0..10)).collect();
        let label = rng.gen_range(0..3);
        let err = check_grad(
            &mut clf,
            VideoClassifier::store_mut,
            |m| {
                let mut tape = Tape::new();
                let loss = m.loss_tape(&mut tape, &ngrams, label).unwrap();
                tape.backward(loss, m.store_mut()).unwrap();
            },
            |m| m.loss(&ngrams, label).unwrap(),
        );
        worst[1] = worst[1].max(err);

        let data = random_instances(&mut rng);
        let pairs = build_pairs(&data);
        let video = glorot_uniform(4, 2, &mut rng);
        let variant = Variant::ALL[draw as usize % 4];
        let config = DropoutConfig { d_h: 4, m: 3, d_v: 2, seed: draw, ..DropoutConfig::default() };
        let tables = PretrainedTables { ngram: Some(&table), video: Some(&video) };
        let mut pred = DropoutPredictor::new(variant, 1, 3, tables, &config).unwrap();
        let margin = config.margin;
        let err = check_grad(
            &mut pred,
            DropoutPredictor::store_mut,
            |m| {
                accumulate_pair_gradients(m, &data, &pairs, margin).unwrap();
            },
            |m| pair_objective(m, &data, &pairs, margin).unwrap(),
        );
        worst[2] = worst[2].max(err);
    }
    let elapsed = start.elapsed();
    let pass = worst.iter().all(|e| *e <= 1e-5) && elapsed < Duration::from_secs(60);
    outcome(
        pass,
        format!(
            "{DRAWS} draws each; max rel err window {:.1e}, classifier {:.1e}, ranking {:.1e}; {:.2} s",
            worst[0],
            worst[1],
            worst[2],
            elapsed.as_secs_f64()
        ),
    )
}

fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut hits, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            hits += if si > sj {
                1.0
            } else if si == sj {
                0.5
            } else {
                0.0
            };
        }
    }
    hits / pairs
}

fn auc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut failures = 0;
    for case in 0..1000 {
        let len = rng.gen_range(2..80);
        let scores: Vec<f64> = (0..len)
            .map(|_| match case % 5 {
                0 => rng.gen::<f64>(),
                1 => rng.gen_range(0..4) as f64,
                2 => 0.5,
                3 => if rng.gen_bool(0.9) { 1.0 } else { rng.gen::<f64>() },
                _ => (rng.gen_range(0..20) as f64 * 0.1).exp(),
            })
            .collect();
        let mut labels: Vec<bool> = (0..len).map(|_| rng.gen_bool(0.3)).collect();
        labels[0] = true;
        labels[1] = false;
        let fast = auc_scores(&scores, &labels).unwrap();
        let err = (fast - brute_auc(&scores, &labels)).abs();
        worst = worst.max(err);
        if err > 1e-12 {
            failures += 1;
        }
    }
    outcome(failures == 0, format!("1000 cases, max |Δ| {worst:.1e}"))
}

fn index_round_trip() -> Outcome {
    let mut failures = 0;
    let mut checked = 0;
    let mut trip = |idx: usize, n: usize| {
        checked += 1;
        let clicks = index_to_ngram(idx, n).unwrap();
        let digits: Vec<usize> = clicks.iter().map(|c| ClickType::ordinal(*c)).collect();
        let base10 = digits.iter().fold(0, |acc, d| acc * 10 + d);
        if clicks.len() != n || base10 != idx || ngram_to_index(&clicks).unwrap() != idx {
            failures += 1;
        }
    };
    for n in 1..=3 {
        for idx in 0..vocab_size(n) {
            trip(idx, n);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10_000 {
        trip(rng.gen_range(0..vocab_size(4)), 4);
    }
    outcome(failures == 0, format!("{checked} indices, {failures} failures"))
}

fn grid_best(rho: f64, target: usize) -> f64 {
    let steps = 801;
    let mut best = 0.0f64;
    for i in 0..steps {
        for j in 0..steps {
            let x = -rho + 2.0 * rho * i as f64 / (steps - 1) as f64;
            let y = -rho + 2.0 * rho * j as f64 / (steps - 1) as f64;
            if x * x + y * y <= rho * rho {
                best = best.max(softmax(&[x, y])[target]);
            }
        }
    }
    best
}

fn extraction() -> Outcome {
    let table = glorot_uniform(10, 3, &mut ChaCha8Rng::seed_from_u64(5));
    let mut clf = VideoClassifier::new(&table, 2, 2, 5).unwrap();
    let (w, b) = clf.head_ids();
    clf.store_mut().set_value(w, Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
    clf.store_mut().set_value(b, Matrix::column(vec![0.0, 0.0])).unwrap();
    let mut worst = 0.0f64;
    let mut monotone = true;
    let mut probs = Vec::new();
    for i in 0..2 {
        let mut prev = 0.0;
        for rho in [1.0, 2.0, 4.0] {
            let v = extract_video_embedding(&clf, i, &ExtractConfig { rho, ..ExtractConfig::default() }).unwrap();
            let p = softmax(&v)[i];
            worst = worst.max((p - grid_best(rho, i)).abs());
            monotone &= p > prev;
            prev = p;
            if i == 0 {
                probs.push(format!("{p:.4}"));
            }
        }
    }
    outcome(
        worst <= 1e-2 && monotone,
        format!("p at rho 1/2/4: {}; max gap to grid {worst:.1e}", probs.join(" / ")),
    )
}

fn markov_pretraining() -> Outcome {
    let n = 2;
    let v = vocab_size(n);
    let succ = |j: usize| (37 * j + 11) % v;
    let sequences: Vec<Vec<usize>> = (0..20)
        .map(|s| {
            let mut seq = vec![(s * 5) % v];
            for _ in 1..25 {
                seq.push(succ(*seq.last().unwrap()));
            }
            seq
        })
        .collect();
    let corpus = PretrainCorpus::new(n, sequences.clone()).unwrap();
    let config = NGramConfig {
        m: 16,
        w: 1,
        epochs: 60,
        batch_size: corpus.positions(),
        optim: OptimConfig::adam(0.02),
        seed: 6,
        ..NGramConfig::default()
    };
    let (model, report) = train_ngram_embeddings(&corpus, &config).unwrap();
    let seen: std::collections::BTreeSet<usize> =
        sequences.iter().flat_map(|s| s[..s.len() - 1].iter().copied()).collect();
    let min_p = seen
        .iter()
        .map(|&j| model.predict(j).unwrap()[succ(j)])
        .fold(f64::INFINITY, f64::min);
    let mut losses = vec![report.initial_loss];
    losses.extend(&report.epoch_losses);
    let worst_rise = losses.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
    let uniform = 1.0 / v as f64;
    outcome(
        min_p >= 10.0 * uniform && worst_rise <= 1e-6,
        format!(
            "min successor p {min_p:.3} (uniform {uniform}); loss {:.3} -> {:.3}, largest epoch rise {worst_rise:.1e}",
            report.initial_loss,
            losses.last().unwrap()
        ),
    )
}

fn bits(xs: &[f64]) -> Vec<u64> {
    xs.iter().map(|x| x.to_bits()).collect()
}

fn determinism() -> Outcome {
    let small = [
        "--seed", "11",
        "--set", "synth.users=400",
        "--set", "n=2",
        "--set", "runs=2",
        "--set", "ngram.m=8",
        "--set", "ngram.epochs=2",
        "--set", "ngram.max_positions=3000",
        "--set", "video.d_v=4",
        "--set", "video.epochs=1",
        "--set", "video.max_sequences=500",
        "--set", "dropout.d_h=8",
        "--set", "dropout.epochs=2",
        "--set", "bootstrap_replicates=200",
    ];
    let (x, y) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [&x, &y] {
        let mut args = vec!["experiment", "--out"];
        let out = dir.path().display().to_string();
        args.push(&out);
        args.extend(small);
        if cli(&args) != 0 {
            return outcome(false, "experiment failed");
        }
    }
    let report_same = fs::read(x.path().join("report.json")).unwrap() == fs::read(y.path().join("report.json")).unwrap();

    let synth = SynthConfig { users: 300, seed: 12, ..SynthConfig::default() };
    let corpus = generate(&synth).unwrap();
    let ids = corpus.truth.videos.iter().map(|v| v.video_id.clone()).collect();
    let vocab = CourseVocab::new(ids, 2, corpus.truth.course_start, corpus.truth.horizon).unwrap();
    let dataset = Dataset::from_events(&corpus.events, vocab).unwrap();
    let split = split_users(&dataset.users(), 0.6, 0.2, 12);
    let pick = |users: &[String]| -> Vec<WeeklyInstance> {
        dataset.instances.iter().filter(|i| users.contains(&i.user_id)).cloned().collect()
    };
    let (train, val, test) = (pick(&split.train), pick(&split.validation), pick(&split.test));
    let mut config = ExperimentConfig::default();
    config.ngram = NGramConfig { m: 6, epochs: 1, max_positions: Some(2000), ..config.ngram };
    config.video.d_v = 3;
    config.video.epochs = 1;
    config.dropout.d_h = 5;
    config.dropout.epochs = 2;
    let art = run_once(&dataset, &train, &val, &test, &split.train, &config, 12).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut mismatches = Vec::new();
    let reload = |name: &str, bytes: Vec<u8>| -> Vec<u8> {
        let path = dir.path().join(name);
        write_atomic(&path, &bytes).unwrap();
        fs::read(&path).unwrap()
    };

    let ngram = NGramEmbeddingModel::from_bytes(&reload("ngram.bin", art.ngram_model.to_bytes())).unwrap();
    let ngram_same = (0..vocab_size(2))
        .all(|j| bits(&ngram.predict(j).unwrap()) == bits(&art.ngram_model.predict(j).unwrap()))
        && bits(ngram.export_embeddings().data()) == bits(art.ngram_model.export_embeddings().data());
    if !ngram_same {
        mismatches.push("n-gram model".to_string());
    }

    let videos = VideoEmbeddingSet::from_bytes(&reload("video.bin", art.video_embeddings.to_bytes())).unwrap();
    if bits(videos.table.data()) != bits(art.video_embeddings.table.data())
        || videos.video_ids != art.video_embeddings.video_ids
    {
        mismatches.push("video embeddings".to_string());
    }

    for (variant, model) in &art.predictors {
        let loaded = DropoutPredictor::from_bytes(&reload(&format!("p_{variant}.bin"), model.to_bytes())).unwrap();
        let same = test
            .iter()
            .all(|i| loaded.predict(i).unwrap().to_bits() == model.predict(i).unwrap().to_bits());
        if !same {
            mismatches.push(format!("predictor {variant}"));
        }
    }
    let formats = 2 + art.predictors.len();
    outcome(
        report_same && mismatches.is_empty(),
        format!(
            "report.json identical: {report_same}; {formats} saved models reloaded on {} test instances, mismatches: {}",
            test.len(),
            if mismatches.is_empty() { "none".to_string() } else { mismatches.join(", ") }
        ),
    )
}

fn margin_contract() -> Outcome {
    let cases = [((0.9, 0.2), 0.0), ((0.5, 0.5), 0.5), ((0.2, 0.9), 1.2)];
    let m = DropoutConfig::default().margin;
    let got: Vec<f64> = cases.iter().map(|((p, q), _)| margin_loss(*p, *q, m)).collect();
    let exact = cases.iter().zip(&got).all(|((_, want), g)| g == want);
    outcome(exact && m == 0.5, format!("default margin {m}; losses {got:?}"))
}

fn main() -> ExitCode {
    let criteria: [(&str, Check); 8] = [
        ("synthetic AUC ordering c > b > a", synthetic_ordering),
        ("gradient suite", gradient_suite),
        ("rank-sum AUC vs brute force", auc_oracle),
        ("n-gram index round trip", index_round_trip),
        ("video extraction vs grid oracle", extraction),
        ("pretraining on a Markov corpus", markov_pretraining),
        ("determinism and persistence", determinism),
        ("margin loss contract", margin_contract),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|s| s.parse().ok());
    let mut failed = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        let id = k + 1;
        if only.is_some_and(|o| o != id) {
            continue;
        }
        let o = check();
        println!("criterion {id} {}: {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
