//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Built without the libtest harness so the lines are
//! always visible under `cargo test`.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use statrs::distribution::{ChiSquared as ChiSquaredDist, ContinuousCDF};

use phrasebreak::cli::{dispatch, fewshot_experiment, RunManifest, MANIFEST_FILE};
use phrasebreak::corpus::{prepare_utterance, split_corpus, CorpusSplit, Utterance};
use phrasebreak::encoders::{pretrain, EncoderKind, Objective, PretrainConfig, Tokenizers};
use phrasebreak::evalstats::{
    chi_squared, evaluate, f_beta_half, kmeans, ks_statistic, sweep_threshold, wasserstein1, ContingencyTable,
};
use phrasebreak::model::{
    evaluate_at, train_two_stage, Checkpoint, PhrasingConfig, PhrasingModel, Sample, SpeakerMode, StageConfig,
    TrainConfig,
};
use phrasebreak::nn::{
    bilstm, bilstm_backward, embedding_backward, embedding_lookup, grad_check, grad_check_richardson, layer_norm, layer_norm_backward,
    linear, linear_backward, masked_bce_logits, Activation, BiLstmParams, ParamId, ParameterStore, Tensor,
};
use phrasebreak::rng::Stream;
use phrasebreak::speaker::{
    average_embeddings, table_of, train_adapter, Adapter, AdapterConfig, EmbeddingTable, Provenance,
};
use phrasebreak::synthgen::{gen_corpus, gen_speakers, oracle_psvm_embed, SpeakerStyle};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------
// AC1: metric reproduction

/// (precision, recall, F0.5) rows of the published result tables, duplicates
/// removed.
const PAPER_TRIPLES: [(f64, f64, f64); 38] = [
    (0.4309, 0.2402, 0.3719),
    (0.5644, 0.2917, 0.4755),
    (0.5212, 0.2723, 0.4406),
    (0.5276, 0.2947, 0.4556),
    (0.5322, 0.2912, 0.4566),
    (0.5832, 0.2650, 0.4702),
    (0.5167, 0.2696, 0.4367),
    (0.5469, 0.3054, 0.4722),
    (0.5168, 0.2438, 0.4222),
    (0.5721, 0.2828, 0.4750),
    (0.5624, 0.2826, 0.4695),
    (0.5691, 0.2906, 0.4776),
    (0.5476, 0.2857, 0.4627),
    (0.5619, 0.2992, 0.4780),
    (0.5854, 0.2737, 0.4768),
    (0.5808, 0.2742, 0.4746),
    (0.5801, 0.2957, 0.4865),
    (0.5714, 0.2763, 0.4708),
    (0.5769, 0.2781, 0.4748),
    (0.6238, 0.2773, 0.4991),
    (0.5826, 0.2919, 0.4858),
    (0.2869, 0.2312, 0.2737),
    (0.3433, 0.2364, 0.3148),
    (0.5864, 0.2585, 0.4678),
    (0.5828, 0.2674, 0.4715),
    (0.5802, 0.2835, 0.4798),
    (0.5826, 0.2920, 0.4859),
    (0.5922, 0.3012, 0.4963),
    (0.5893, 0.3085, 0.4986),
    (0.4957, 0.2410, 0.4092),
    (0.5579, 0.2554, 0.4511),
    (0.5457, 0.2954, 0.4666),
    (0.5970, 0.2831, 0.4886),
    (0.6053, 0.2965, 0.5010),
    (0.5535, 0.2920, 0.4695),
    (0.6055, 0.2997, 0.5029),
    (0.5537, 0.2806, 0.4635),
    (0.5949, 0.3061, 0.5004),
];

fn ac1() -> Outcome {
    let worst = PAPER_TRIPLES.iter().map(|&(p, r, f)| (f_beta_half(p, r) - f).abs()).fold(0.0, f64::max);
    check(worst < 5e-4, format!("{} triples, max |ΔF0.5| = {worst:.2e} (bound 5e-4)", PAPER_TRIPLES.len()))
}

// ---------------------------------------------------------------------------
// AC2: gradient checks

fn uniform(stream: Stream, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut rng = stream.rng();
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn away_from_zero(stream: Stream, n: usize) -> Vec<f64> {
    uniform(stream, n, -2.0, 2.0).into_iter().map(|v| if v.abs() < 0.05 { v + 0.1f64.copysign(v) } else { v }).collect()
}

fn t(shape: &[usize], v: Vec<f64>) -> Tensor<f64> {
    Tensor::from_vec(shape, v).unwrap()
}

fn dot(a: &Tensor<f64>, r: &[f64]) -> f64 {
    a.data().iter().zip(r).map(|(x, y)| x * y).sum()
}

/// Largest relative error over the feed-forward layers for one seed.
fn feedforward_errors(seed: u64) -> BTreeMap<&'static str, f64> {
    let s = Stream::new(seed).tag("ac2");
    let eps = 1e-5;
    let mut out = BTreeMap::new();

    // linear
    let (x, w, b) = (uniform(s.tag("x"), 12, -1.0, 1.0), uniform(s.tag("w"), 20, -1.0, 1.0), uniform(s.tag("b"), 5, -1.0, 1.0));
    let r = uniform(s.tag("r"), 15, -1.0, 1.0);
    let f = |x: &[f64], w: &[f64], b: &[f64]| dot(&linear(&t(&[3, 4], x.to_vec()), &t(&[4, 5], w.to_vec()), &t(&[5], b.to_vec())).unwrap(), &r);
    let (mut dw, mut db) = (Tensor::zeros(&[4, 5]), Tensor::zeros(&[5]));
    let dx = linear_backward(&t(&[3, 4], x.clone()), &t(&[4, 5], w.clone()), &t(&[3, 5], r.clone()), &mut dw, &mut db);
    let e = grad_check(&x, dx.data(), eps, |v| f(v, &w, &b))
        .max(grad_check(&w, dw.data(), eps, |v| f(&x, v, &b)))
        .max(grad_check(&b, db.data(), eps, |v| f(&x, &w, v)));
    out.insert("linear", e);

    // activations
    for (name, act) in [("gelu", Activation::Gelu), ("relu", Activation::Relu), ("sigmoid", Activation::Sigmoid)] {
        let x = away_from_zero(s.tag(name), 12);
        let fx = |v: &[f64]| dot(&act.forward(&t(&[3, 4], v.to_vec())), &r[..12]);
        let xt = t(&[3, 4], x.clone());
        let dx = act.backward(&xt, &act.forward(&xt), &t(&[3, 4], r[..12].to_vec()));
        out.insert(name, grad_check(&x, dx.data(), eps, fx));
    }

    // layer norm
    let x = uniform(s.tag("ln/x"), 15, -2.0, 2.0);
    let g = uniform(s.tag("ln/g"), 5, 0.5, 1.5);
    let bt = uniform(s.tag("ln/b"), 5, -0.5, 0.5);
    let f = |x: &[f64], g: &[f64], b: &[f64]| {
        dot(&layer_norm(&t(&[3, 5], x.to_vec()), &t(&[5], g.to_vec()), &t(&[5], b.to_vec()), 1e-5).unwrap().0, &r)
    };
    let (_, cache) = layer_norm(&t(&[3, 5], x.clone()), &t(&[5], g.clone()), &t(&[5], bt.clone()), 1e-5).unwrap();
    let (mut dg, mut dbt) = (Tensor::zeros(&[5]), Tensor::zeros(&[5]));
    let dx = layer_norm_backward(&cache, &t(&[5], g.clone()), &t(&[3, 5], r.clone()), &mut dg, &mut dbt);
    let e = grad_check(&x, dx.data(), eps, |v| f(v, &g, &bt))
        .max(grad_check(&g, dg.data(), eps, |v| f(&x, v, &bt)))
        .max(grad_check(&bt, dbt.data(), eps, |v| f(&x, &g, v)));
    out.insert("layer_norm", e);

    // embedding with a repeated id
    let table = uniform(s.tag("emb"), 18, -1.0, 1.0);
    let ids = [1usize, 4, 1, 0, 5];
    let f = |v: &[f64]| dot(&embedding_lookup(&t(&[6, 3], v.to_vec()), &ids).unwrap(), &r);
    let mut dt = Tensor::zeros(&[6, 3]);
    embedding_backward(&ids, &t(&[5, 3], r[..15].to_vec()), &mut dt);
    out.insert("embedding", grad_check(&table, dt.data(), eps, f));

    // masked BCE head on logits from a linear layer
    let h = uniform(s.tag("head/h"), 20, -1.0, 1.0);
    let w = uniform(s.tag("head/w"), 4, -1.0, 1.0);
    let b = uniform(s.tag("head/b"), 1, -0.5, 0.5);
    let labels = [true, false, false, true, false];
    let mask = [true, true, false, true, true];
    let f = |h: &[f64], w: &[f64], b: &[f64]| {
        let z = linear(&t(&[5, 4], h.to_vec()), &t(&[4, 1], w.to_vec()), &t(&[1], b.to_vec())).unwrap();
        masked_bce_logits(z.data(), &labels, &mask, 4).0
    };
    let z = linear(&t(&[5, 4], h.clone()), &t(&[4, 1], w.clone()), &t(&[1], b.clone())).unwrap();
    let (_, dz) = masked_bce_logits(z.data(), &labels, &mask, 4);
    let (mut dw, mut db) = (Tensor::zeros(&[4, 1]), Tensor::zeros(&[1]));
    let dh = linear_backward(&t(&[5, 4], h.clone()), &t(&[4, 1], w.clone()), &t(&[5, 1], dz), &mut dw, &mut db);
    let e = grad_check(&h, dh.data(), eps, |v| f(v, &w, &b))
        .max(grad_check(&w, dw.data(), eps, |v| f(&h, v, &b)))
        .max(grad_check(&b, db.data(), eps, |v| f(&h, &w, v)));
    out.insert("masked_bce_head", e);
    out
}

fn bilstm_error(seed: u64) -> f64 {
    let s = Stream::new(seed).tag("ac2/lstm");
    let mut store = ParameterStore::<f64>::new();
    let p = BiLstmParams::register(&mut store, "l", 3, 2, s.tag("init")).unwrap();
    for id in store.iter().map(|(id, _)| id).collect::<Vec<_>>() {
        let n = store.value(id).len();
        store.value_mut(id).data_mut().copy_from_slice(&uniform(s.tag("p").index(id.0 as u64), n, -0.8, 0.8));
    }
    let x = uniform(s.tag("x"), 15, -1.0, 1.0);
    let r = uniform(s.tag("r"), 20, -1.0, 1.0);
    let loss = |store: &ParameterStore<f64>, x: &[f64]| dot(&bilstm(&t(&[5, 3], x.to_vec()), store, &p).unwrap().0, &r);
    let (_, cache) = bilstm(&t(&[5, 3], x.clone()), &store, &p).unwrap();
    let mut grads = store.grad_buffer();
    let dx = bilstm_backward(&cache, &store, &p, &t(&[5, 4], r.clone()), &mut grads);
    let mut worst = grad_check(&x, dx.data(), 1e-5, |v| loss(&store, v));
    for id in store.iter().map(|(id, _)| id).collect::<Vec<ParamId>>() {
        let v0 = store.value(id).data().to_vec();
        let mut probe = store.clone();
        worst = worst.max(grad_check(&v0, grads.get(id).data(), 1e-5, |v| {
            probe.value_mut(id).data_mut().copy_from_slice(v);
            loss(&probe, &x)
        }));
    }
    worst
}

fn end_to_end_error(seed: u64, kind: EncoderKind, mode: SpeakerMode) -> (f64, String) {
    let styles = gen_speakers(3, 5, seed).unwrap();
    let utts = gen_corpus(&styles, 3, seed).unwrap();
    let utts: Vec<Utterance> = utts.iter().map(|u| prepare_utterance(u, 50.0)).collect();
    let tok = Tokenizers::train(&utts, 20, 5);
    let enc = tok.encoder_config(kind, 4, 1, 4);
    let utt = utts.iter().min_by_key(|u| u.words.len()).unwrap();
    let sample = Sample::from_utterance(&tok, &enc, utt).unwrap();
    let mut cfg = PhrasingConfig::new(enc, mode, 3);
    cfg.speaker_dim = 3;
    cfg.dropout = 0.3;
    let m32 = PhrasingModel::<f32>::new(cfg, seed).unwrap();
    let m = m32.cast::<f64>();
    let norm = sample.example.num_words();
    let stream = Stream::new(seed).tag("ac2/dropout");
    let mut grads = m.store.grad_buffer();
    m.loss_and_backward(&sample, None, norm, stream, &mut grads).unwrap();
    let mut worst = (0.0f64, String::new());
    for (id, p) in m.store.iter() {
        if !p.trainable {
            continue;
        }
        let x0 = p.value.data().to_vec();
        let mut probe = m.clone();
        let e = grad_check_richardson(&x0, grads.get(id).data(), 1e-4, |x| {
            probe.store.value_mut(id).data_mut().copy_from_slice(x);
            let mut g = probe.store.grad_buffer();
            probe.loss_and_backward(&sample, None, norm, stream, &mut g).unwrap()
        });
        if e > worst.0 {
            worst = (e, format!("seed {seed} {} {mode:?} {}", kind.as_str(), p.name));
        }
    }
    worst
}

fn ac2() -> Outcome {
    const SEEDS: u64 = 20;
    let mut ff: BTreeMap<&str, f64> = BTreeMap::new();
    let mut lstm = 0.0f64;
    let mut e2e = (0.0f64, String::new());
    for seed in 0..SEEDS {
        for (k, v) in feedforward_errors(seed) {
            let e = ff.entry(k).or_insert(0.0);
            *e = e.max(v);
        }
        lstm = lstm.max(bilstm_error(seed));
        for kind in [EncoderKind::Subword, EncoderKind::PhonemeMp] {
            for mode in [SpeakerMode::None, SpeakerMode::Frozen, SpeakerMode::Trainable] {
                let e = end_to_end_error(seed, kind, mode);
                if e.0 > e2e.0 {
                    e2e = e;
                }
            }
        }
    }
    let ff_worst = ff.values().copied().fold(0.0, f64::max);
    let parts: Vec<String> = ff.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    check(
        ff_worst < 1e-6 && lstm < 1e-4 && e2e.0 < 1e-3,
        format!(
            "{SEEDS} seeds; layers [{}] < 1e-6, bilstm {lstm:.1e} < 1e-4, end-to-end {:.1e} < 1e-3 (worst: {})",
            parts.join(", "),
            e2e.0,
            e2e.1
        ),
    )
}

// ---------------------------------------------------------------------------
// Shared desk-scale training setup for AC3-AC5

const DIM: usize = 16;

fn desk_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        stage1: StageConfig { epochs: 10, peak_lr: 3e-3 },
        stage2: StageConfig { epochs: 2, peak_lr: 3e-4 },
        eval_every: 100,
        seed,
        ..TrainConfig::default()
    }
}

struct Prepared {
    tok: Tokenizers,
    splits: Vec<CorpusSplit>,
}

fn prepared(utts: &[Utterance], unseen: &BTreeSet<u32>, holdout: usize) -> Prepared {
    let utts: Vec<Utterance> = utts.iter().map(|u| prepare_utterance(u, 50.0)).collect();
    let splits = split_corpus(&utts, unseen, (8, 1, 1), holdout, 1).unwrap();
    let tok = Tokenizers::train(&splits[0].utterances, 300, 50);
    Prepared { tok, splits }
}

impl Prepared {
    fn samples(&self, split: usize) -> Vec<Sample> {
        let enc = self.tok.encoder_config(EncoderKind::Subword, DIM, 1, DIM);
        self.splits[split].utterances.iter().map(|u| Sample::from_utterance(&self.tok, &enc, u).unwrap()).collect()
    }

    fn train(&self, mode: SpeakerMode, seed: u64, table: Option<&EmbeddingTable>) -> Checkpoint {
        let enc = self.tok.encoder_config(EncoderKind::Subword, DIM, 1, DIM);
        let n = self.splits[0].utterances.iter().map(|u| u.speaker_id as usize + 1).max().unwrap();
        let mut cfg = PhrasingConfig::new(enc, mode, n);
        cfg.speaker_dim = DIM;
        let mut m = PhrasingModel::<f32>::new(cfg, seed).unwrap();
        if let Some(t) = table {
            m.set_speaker_table(t).unwrap();
        }
        train_two_stage(&mut m, &self.samples(0), &self.samples(1), &desk_train_config(seed)).unwrap().best
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(", ")
}

// ---------------------------------------------------------------------------
// AC3: speaker conditioning on seen speakers

fn ac3() -> Outcome {
    let styles = gen_speakers(20, 5, 1).unwrap();
    let data = prepared(&gen_corpus(&styles, 200, 1).unwrap(), &BTreeSet::new(), 0);
    let test = data.samples(2);
    let (mut base, mut spk) = (Vec::new(), Vec::new());
    for seed in 0..3 {
        for (mode, acc) in [(SpeakerMode::None, &mut base), (SpeakerMode::Trainable, &mut spk)] {
            let ck = data.train(mode, seed, None);
            acc.push(evaluate_at(&ck.model().unwrap(), &test, ck.threshold).unwrap().f_half);
        }
    }
    let gap = mean(&spk) - mean(&base);
    check(
        gap >= 0.05,
        format!("test-seen F0.5 trainable [{}] vs baseline [{}]: mean gap {gap:.4} (need ≥ 0.05)", fmt(&spk), fmt(&base)),
    )
}

// ---------------------------------------------------------------------------
// AC4: few-shot adaptation to unseen speakers

const SEEN: u32 = 40;
const UNSEEN: u32 = 20;
const ORACLE_SEED: u64 = 7;
const ORACLE_NOISE: f64 = 1.0;

struct FewShotSetup {
    styles: Vec<SpeakerStyle>,
    data: Prepared,
    seen_table: EmbeddingTable,
}

fn utterance_embedding(styles: &[SpeakerStyle], u: &Utterance) -> Vec<f64> {
    let idx: usize = u.utterance_id.rsplit('_').next().unwrap().parse().unwrap();
    oracle_psvm_embed(&styles[u.speaker_id as usize], idx, DIM, ORACLE_NOISE, ORACLE_SEED).unwrap()
}

fn few_shot_setup() -> FewShotSetup {
    let styles = gen_speakers((SEEN + UNSEEN) as usize, 5, 1).unwrap();
    let mut utts = gen_corpus(&styles[..SEEN as usize], 100, 1).unwrap();
    utts.extend(gen_corpus(&styles[SEEN as usize..], 200, 1).unwrap());
    let unseen: BTreeSet<u32> = (SEEN..SEEN + UNSEEN).collect();
    let data = prepared(&utts, &unseen, 50);
    let mut per: BTreeMap<u32, Vec<Vec<f64>>> = BTreeMap::new();
    for u in &data.splits[0].utterances {
        per.entry(u.speaker_id).or_default().push(utterance_embedding(&styles, u));
    }
    let mut seen_table = EmbeddingTable::new(DIM, Provenance::OraclePsvm);
    for (s, v) in &per {
        seen_table.insert(*s, average_embeddings(v).unwrap().iter().map(|&x| x as f32).collect()).unwrap();
    }
    FewShotSetup { styles, data, seen_table }
}

fn adapter_pairs(raw: &EmbeddingTable, learned: &EmbeddingTable) -> Vec<(Vec<f32>, Vec<f32>)> {
    raw.entries.iter().map(|(s, e)| (e.clone(), learned.get(*s).unwrap().to_vec())).collect()
}

fn ac4(setup: &FewShotSetup, trainable_out: &mut Option<Checkpoint>) -> Outcome {
    let val_unseen: BTreeMap<u32, Vec<Vec<f64>>> = {
        let mut m: BTreeMap<u32, Vec<Vec<f64>>> = BTreeMap::new();
        for u in &setup.data.splits[3].utterances {
            m.entry(u.speaker_id).or_default().push(utterance_embedding(&setup.styles, u));
        }
        m
    };
    let test_utts = &setup.data.splits[4].utterances;
    let test = setup.data.samples(4);
    let (mut base, mut f1, mut f50, mut t50) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for seed in 0..3 {
        let b = setup.data.train(SpeakerMode::None, seed, None);
        base.push(evaluate_at(&b.model().unwrap(), &test, b.threshold).unwrap().f_half);

        let frozen = setup.data.train(SpeakerMode::Frozen, seed, Some(&setup.seen_table));
        let rows = fewshot_experiment(
            &frozen,
            &setup.data.tok,
            test_utts,
            &val_unseen,
            Provenance::OraclePsvm,
            &[1, 50],
            None,
            seed,
        )
        .unwrap();
        f1.push(rows[0].f_half);
        f50.push(rows[1].f_half);

        let trainable = setup.data.train(SpeakerMode::Trainable, seed, None);
        let pairs = adapter_pairs(&setup.seen_table, &table_of(&trainable).unwrap());
        let cfg = AdapterConfig { steps: 2000, lr: 1e-3, seed, ..AdapterConfig::default() };
        let adapter = train_adapter(&pairs, &cfg).unwrap().adapter;
        let rows = fewshot_experiment(
            &trainable,
            &setup.data.tok,
            test_utts,
            &val_unseen,
            Provenance::OraclePsvm,
            &[50],
            Some(&adapter),
            seed,
        )
        .unwrap();
        t50.push(rows[0].f_half);
        if seed == 0 {
            *trainable_out = Some(trainable);
        }
    }
    let ok = mean(&f50) > mean(&f1) && mean(&t50) > mean(&base);
    check(
        ok,
        format!(
            "test-unseen F0.5 frozen n=50 [{}] vs n=1 [{}]; trainable+adapter n=50 [{}] vs baseline [{}]",
            fmt(&f50),
            fmt(&f1),
            fmt(&t50),
            fmt(&base)
        ),
    )
}

// ---------------------------------------------------------------------------
// AC5: adapter contract

fn dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| f64::from(x - y).powi(2)).sum::<f64>().sqrt()
}

fn ac5(setup: &FewShotSetup, trainable: Option<&Checkpoint>) -> Outcome {
    let trainable = trainable.ok_or("no trainable checkpoint from the few-shot run")?;
    let pairs = adapter_pairs(&setup.seen_table, &table_of(trainable).unwrap());
    let held = pairs.len() / 5;
    let (fit, held_out) = pairs.split_at(pairs.len() - held);
    let cfg = AdapterConfig::default();
    let run = train_adapter(fit, &cfg).unwrap();
    let before = mean(&held_out.iter().map(|(e, t)| dist(e, t)).collect::<Vec<_>>());
    let after = mean(&held_out.iter().map(|(e, t)| dist(&run.adapter.adapt(e).unwrap(), t)).collect::<Vec<_>>());

    let identity: Vec<(Vec<f32>, Vec<f32>)> = setup.seen_table.entries.values().map(|e| (e.clone(), e.clone())).collect();
    let init = Adapter::new(DIM, cfg.hidden, Stream::new(cfg.seed).tag("adapter").tag("init")).unwrap();
    let mse0 = init.mse(&identity).unwrap();
    let mse1 = train_adapter(&identity, &cfg).unwrap().adapter.mse(&identity).unwrap();
    check(
        after < before && mse1 < 0.01 * mse0,
        format!(
            "held-out ({held} speakers) mean distance {before:.4} -> {after:.4}; identity MSE {mse0:.4} -> {mse1:.2e} \
             (ratio {:.1e}, need < 0.01); {} steps at lr {}",
            mse1 / mse0,
            cfg.steps,
            cfg.lr
        ),
    )
}

// ---------------------------------------------------------------------------
// AC6: oracle equivalences

fn brute_sweep(probs: &[f64], mask: &[bool], labels: &[bool]) -> (f64, f64) {
    let mut best = (-1.0, 0.0);
    for k in 0..=100 {
        let thr = k as f64 / 100.0;
        let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
        for i in 0..probs.len() {
            if !mask[i] {
                continue;
            }
            match (probs[i] > thr, labels[i]) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fn_ += 1.0,
                _ => {}
            }
        }
        let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        let f = if p + r > 0.0 { 1.25 * p * r / (0.25 * p + r) } else { 0.0 };
        if f > best.0 + 1e-12 {
            best = (f, thr);
        }
    }
    best
}

fn min_over_permutations(a: &[f64], b: &mut Vec<f64>, k: usize) -> f64 {
    if k == b.len() {
        return a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    }
    let mut best = f64::INFINITY;
    for i in k..b.len() {
        b.swap(k, i);
        best = best.min(min_over_permutations(a, b, k + 1));
        b.swap(k, i);
    }
    best
}

fn transport_w1(a: &[f64], b: &[f64]) -> f64 {
    let gcd = |mut x: usize, mut y: usize| {
        while y != 0 {
            (x, y) = (y, x % y);
        }
        x
    };
    let l = a.len() * b.len() / gcd(a.len(), b.len());
    let rep = |v: &[f64]| v.iter().flat_map(|&x| std::iter::repeat_n(x, l / v.len())).collect::<Vec<_>>();
    min_over_permutations(&rep(a), &mut rep(b), 0)
}

fn brute_ks(a: &[f64], b: &[f64]) -> f64 {
    let cdf = |v: &[f64], x: f64| v.iter().filter(|&&y| y <= x).count() as f64 / v.len() as f64;
    a.iter().chain(b).map(|&x| (cdf(a, x) - cdf(b, x)).abs()).fold(0.0, f64::max)
}

fn ac6() -> Outcome {
    let mut rng = Stream::new(6).tag("ac6").rng();
    let mut notes = Vec::new();
    let mut ok = true;

    let mut sweep_bad = 0;
    for _ in 0..100 {
        let n = rng.random_range(1..80);
        let probs: Vec<f64> = (0..n).map(|_| (rng.random_range(0.0..1.0f64) * 100.0).round() / 100.0).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        let mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.8)).collect();
        let r = sweep_threshold(&probs, &mask, &labels, 0.01);
        let (f, thr) = brute_sweep(&probs, &mask, &labels);
        let direct = evaluate(&probs, &mask, &labels, r.threshold);
        if (r.f_half - f.max(0.0)).abs() > 1e-12 || (f > 0.0 && r.threshold != thr) || direct != r {
            sweep_bad += 1;
        }
    }
    ok &= sweep_bad == 0;
    notes.push(format!("sweep mismatches {sweep_bad}/100"));

    let (mut w_err, mut ks_err) = (0.0f64, 0.0f64);
    let sizes = [(1, 1), (2, 2), (3, 3), (5, 5), (7, 7), (8, 8), (2, 4), (4, 8), (3, 6), (1, 8), (2, 3), (2, 6), (4, 2)];
    for (i, &(n, m)) in sizes.iter().cycle().take(60).enumerate() {
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut b: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..4.0)).collect();
        if i % 5 == 0 {
            b[0] = a[0];
        }
        w_err = w_err.max((wasserstein1(&a, &b).unwrap() - transport_w1(&a, &b)).abs());
        ks_err = ks_err.max((ks_statistic(&a, &b).unwrap() - brute_ks(&a, &b)).abs());
    }
    ok &= w_err < 1e-9 && ks_err < 1e-12;
    notes.push(format!("W1 max err {w_err:.1e}, KS max err {ks_err:.1e}"));

    let pts: Vec<Vec<f64>> = [0.0, 1.0, 10.0, 11.0].iter().map(|&x| vec![x]).collect();
    let mut brute = f64::INFINITY;
    for mask in 1u32..15 {
        let groups: [Vec<f64>; 2] = [
            (0..4).filter(|i| mask >> i & 1 == 1).map(|i| pts[i][0]).collect(),
            (0..4).filter(|i| mask >> i & 1 == 0).map(|i| pts[i][0]).collect(),
        ];
        let inertia: f64 = groups
            .iter()
            .map(|g| {
                let c = g.iter().sum::<f64>() / g.len() as f64;
                g.iter().map(|x| (x - c).powi(2)).sum::<f64>()
            })
            .sum();
        brute = brute.min(inertia);
    }
    let km = kmeans(&pts, 2, Stream::new(0), 100).unwrap();
    let km_ok = (km.inertia - brute).abs() < 1e-12 && km.assignments[0] == km.assignments[1]
        && km.assignments[2] == km.assignments[3]
        && km.assignments[0] != km.assignments[2];
    ok &= km_ok;
    notes.push(format!("k-means inertia {:.4} vs brute {brute:.4}", km.inertia));

    let c = chi_squared(&ContingencyTable::new(vec![vec![10, 20], vec![20, 10]])).unwrap();
    let chi_ok = (c.chi2 - 20.0 / 3.0).abs() < 1e-9
        && (c.cramers_v - 1.0 / 3.0).abs() < 1e-9
        && (c.p - 0.0098).abs() < 1e-3
        && c.df == 1;
    ok &= chi_ok;
    notes.push(format!("chi2 {:.4} V {:.4} p {:.4}", c.chi2, c.cramers_v, c.p));

    // p-values against an independent chi-squared survival function
    let mut p_err = 0.0f64;
    for _ in 0..200 {
        let (r, k) = (rng.random_range(2..5), rng.random_range(2..5));
        let counts: Vec<Vec<u64>> = (0..r).map(|_| (0..k).map(|_| rng.random_range(1..40)).collect()).collect();
        let c = chi_squared(&ContingencyTable::new(counts)).unwrap();
        let reference = ChiSquaredDist::new(c.df as f64).unwrap().sf(c.chi2);
        p_err = p_err.max((c.p - reference).abs() / reference.max(1e-300));
    }
    ok &= p_err < 1e-8;
    notes.push(format!("p vs statrs max rel err {p_err:.1e}"));
    check(ok, notes.join("; "))
}

// ---------------------------------------------------------------------------
// AC7: label-space consistency

fn ac7() -> Outcome {
    let styles = gen_speakers(10, 5, 3).unwrap();
    let utts: Vec<Utterance> = gen_corpus(&styles, 100, 3).unwrap().iter().map(|u| prepare_utterance(u, 50.0)).collect();
    let tok = Tokenizers::train(&utts, 300, 50);
    let mut bad = 0;
    for u in &utts {
        let counts: Vec<usize> = [EncoderKind::Subword, EncoderKind::Phoneme, EncoderKind::PhonemeMp]
            .iter()
            .map(|&k| {
                let ex = tok.example(k, u).unwrap();
                let finals = ex.word_final_positions();
                let labelled: Vec<bool> = finals.iter().map(|&t| ex.labels[t]).collect();
                let expect: Vec<bool> = u.rp_label.iter().copied().chain([false]).collect();
                if labelled != expect || ex.labels.iter().filter(|&&l| l).count() != u.rp_count() {
                    usize::MAX
                } else {
                    ex.num_words()
                }
            })
            .collect();
        if counts.iter().any(|&c| c != u.words.len()) {
            bad += 1;
        }
    }
    check(bad == 0, format!("{} utterances, {bad} with mismatched evaluated positions or labels", utts.len()))
}

// ---------------------------------------------------------------------------
// AC8: pretraining objectives

fn ac8() -> Outcome {
    let styles = gen_speakers(5, 5, 8).unwrap();
    let utts: Vec<Utterance> = gen_corpus(&styles, 100, 8).unwrap().iter().map(|u| prepare_utterance(u, 50.0)).collect();
    let tok = Tokenizers::train(&utts, 300, 50);
    let mut notes = Vec::new();
    let mut ok = true;
    for (kind, target) in [
        (EncoderKind::Phoneme, Objective::Mlm),
        (EncoderKind::PhonemeMp, Objective::SupMlm),
        (EncoderKind::PhonemePl, Objective::P2g),
    ] {
        let cfg = tok.encoder_config(kind, DIM, 1, DIM);
        let examples: Vec<_> = utts.iter().map(|u| tok.example(kind, u).unwrap()).collect();
        let p = pretrain(&cfg, &examples, &PretrainConfig::new(kind, 200, 0)).unwrap();
        let get = |v: &[(Objective, f64)]| v.iter().find(|(o, _)| *o == target).unwrap().1;
        let (a, b) = (get(&p.initial), get(&p.last));
        ok &= b < a;
        notes.push(format!("{} {} {a:.3} -> {b:.3}", kind.as_str(), target.as_str()));
    }
    let mut spans_ok = true;
    for u in &utts {
        let ex = tok.example(EncoderKind::PhonemePl, u).unwrap();
        let g = ex.grapheme_targets.as_ref().unwrap();
        let mut per_word: BTreeMap<usize, usize> = BTreeMap::new();
        for k in 0..ex.len() {
            if !ex.punct_mask[k] && *per_word.entry(ex.word_index[k]).or_insert(g[k]) != g[k] {
                spans_ok = false;
            }
        }
    }
    ok &= spans_ok;
    notes.push(format!("P2G targets constant per word: {spans_ok}"));
    check(ok, format!("{} utterances, 200 steps: {}", utts.len(), notes.join("; ")))
}

// ---------------------------------------------------------------------------
// AC9: end-to-end determinism through the command line

fn pipeline(root: &Path) -> Result<BTreeMap<String, RunManifest>, String> {
    std::env::set_current_dir(root).map_err(|e| e.to_string())?;
    let runs: [&[&str]; 4] = [
        &["synth", "--speakers", "5", "--utts", "40", "--seed", "3", "--out", "syn"],
        &["prepare", "--corpus", "syn/corpus.jsonl", "--embeddings", "syn/utterance_embeddings.tsv", "--seed", "3", "--out", "prep"],
        &["train", "--corpus", "prep", "--speaker-mode", "trainable", "--stage1-epochs", "2", "--stage2-epochs", "1", "--eval-every", "3", "--seed", "3", "--out", "model"],
        &["eval", "--ckpt", "model", "--corpus", "prep", "--split", "test_seen", "--sweep", "--out", "eval"],
    ];
    let mut out = BTreeMap::new();
    for args in runs {
        let argv: Vec<&str> = std::iter::once("phrasebreak").chain(args.iter().copied()).collect();
        let code = dispatch(argv);
        if code != 0 {
            return Err(format!("`{}` exited with {code}", args.join(" ")));
        }
        let dir = args[args.len() - 1];
        let text = std::fs::read_to_string(Path::new(dir).join(MANIFEST_FILE)).map_err(|e| e.to_string())?;
        out.insert(dir.to_string(), serde_json::from_str(&text).map_err(|e| e.to_string())?);
    }
    Ok(out)
}

fn ac9() -> Outcome {
    let cwd = std::env::current_dir().map_err(|e| e.to_string())?;
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = pipeline(a.path());
    let second = pipeline(b.path());
    std::env::set_current_dir(cwd).map_err(|e| e.to_string())?;
    let (first, second) = (first?, second?);
    let mut files = 0;
    for (dir, m) in &first {
        let n = &second[dir];
        if m.command != n.command || m.config_digest != n.config_digest {
            return Err(format!("{dir}: manifests differ in command or config"));
        }
        if m.checksums != n.checksums {
            let diff: Vec<&String> = m.checksums.keys().filter(|k| m.checksums.get(*k) != n.checksums.get(*k)).collect();
            return Err(format!("{dir}: artifacts differ: {diff:?}"));
        }
        files += m.checksums.len();
    }
    let key = |m: &BTreeMap<String, RunManifest>| m["model"].checksums["model.pbrk"].clone();
    Ok(format!(
        "synth -> prepare -> train -> eval twice: {files} artifacts byte-identical (model.pbrk {})",
        &key(&first)[..12]
    ))
}

// ---------------------------------------------------------------------------

fn run(name: &str, what: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail) = match &r {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("{name} {tag} [{secs:.1}s] {what}: {detail}");
    r.is_ok()
}

fn main() {
    // `cargo test -- <filter>` style arguments select criteria by name.
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |n: &str| filters.is_empty() || filters.iter().any(|f| n.contains(f.as_str()));
    let mut all = true;
    if wanted("AC1") {
        all &= run("AC1", "metric reproduction", ac1);
    }
    if wanted("AC2") {
        all &= run("AC2", "gradient correctness", ac2);
    }
    if wanted("AC3") {
        all &= run("AC3", "speaker conditioning", ac3);
    }
    if wanted("AC4") || wanted("AC5") {
        let setup = few_shot_setup();
        let mut trainable = None;
        if wanted("AC4") {
            all &= run("AC4", "few-shot adaptation", || ac4(&setup, &mut trainable));
        }
        if wanted("AC5") {
            if trainable.is_none() {
                trainable = Some(setup.data.train(SpeakerMode::Trainable, 0, None));
            }
            all &= run("AC5", "adapter contract", || ac5(&setup, trainable.as_ref()));
        }
    }
    if wanted("AC6") {
        all &= run("AC6", "oracle equivalences", ac6);
    }
    if wanted("AC7") {
        all &= run("AC7", "label-space consistency", ac7);
    }
    if wanted("AC8") {
        all &= run("AC8", "pretraining objectives", ac8);
    }
    if wanted("AC9") {
        all &= run("AC9", "determinism", ac9);
    }
    if !all {
        std::process::exit(1);
    }
}
