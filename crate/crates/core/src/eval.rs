//! Evaluation: confusion matrices, accuracy and log loss, per-class NCC
//! tables, the sound-retrieval experiment and the ablation grid runner.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{DatasetManifest, RunConfig, Split};
use crate::dsp::{normalized_cross_correlation, spectrogram_of, AudioClip, SpectrogramMode, StftParams};
use crate::encoder::FeatureEncoder;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::pipeline::{
    argmax, bank_from_clips, prepare_dataset, split_refs, synthesize_prediction, synthesize_true_residual, Model,
    ModelKind, PreparedClip,
};
use crate::synth::ClassSpectrogramBank;
use crate::tensor::{
    adam_step, glorot_uniform, keyed_rng, AdamConfig, AdamState, Gradients, Graph, ParamId, ParamStore, Tensor,
};

const PROB_FLOOR: f64 = 1e-15;

/// A rectangular table of strings with a header row.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(headers: &[&str]) -> Self {
        Self {
            headers: headers.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    fn lines(&self) -> impl Iterator<Item = &Vec<String>> {
        std::iter::once(&self.headers).chain(&self.rows)
    }

    pub fn to_csv(&self) -> String {
        let quote = |s: &String| {
            if s.contains([',', '"', '\n']) {
                format!("\"{}\"", s.replace('"', "\"\""))
            } else {
                s.clone()
            }
        };
        self.lines()
            .map(|r| r.iter().map(quote).collect::<Vec<_>>().join(",") + "\n")
            .collect()
    }

    pub fn to_tsv(&self) -> String {
        self.lines().map(|r| r.join("\t") + "\n").collect()
    }

    pub fn to_aligned(&self) -> String {
        let cols = self.lines().map(Vec::len).max().unwrap_or(0);
        let mut widths = vec![0; cols];
        for r in self.lines() {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.chars().count());
            }
        }
        let mut out = String::new();
        for r in self.lines() {
            let cells: Vec<String> = r.iter().zip(&widths).map(|(c, &w)| format!("{c:<w$}")).collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    /// `counts[i][j]` clips of true class `i` predicted as `j`.
    pub counts: Vec<Vec<usize>>,
    /// Rows scaled to sum to 1; empty rows stay zero.
    pub normalized: Vec<Vec<f64>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn table(&self, names: &[String], normalized: bool) -> Table {
        let mut headers = vec!["true\\pred".to_string()];
        headers.extend(names.iter().cloned());
        let mut t = Table {
            headers,
            rows: Vec::new(),
        };
        for (i, name) in names.iter().enumerate() {
            let mut row = vec![name.clone()];
            for j in 0..names.len() {
                row.push(if normalized {
                    format!("{:.3}", self.normalized[i][j])
                } else {
                    self.counts[i][j].to_string()
                });
            }
            t.push(row);
        }
        t
    }
}

pub fn confusion_matrix(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut counts = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if p >= num_classes || l >= num_classes {
            return Err(Error::invalid(format!(
                "class index {} out of range 0..{num_classes}",
                p.max(l)
            )));
        }
        counts[l][p] += 1;
    }
    let normalized = counts
        .iter()
        .map(|row| {
            let n: usize = row.iter().sum();
            row.iter()
                .map(|&c| if n == 0 { 0.0 } else { c as f64 / n as f64 })
                .collect()
        })
        .collect();
    Ok(ConfusionMatrix { counts, normalized })
}

/// Argmax accuracy and mean negative log-probability of the true class.
pub fn accuracy_and_logloss(probabilities: &[Vec<f64>], labels: &[usize]) -> Result<(f64, f64)> {
    if probabilities.len() != labels.len() || labels.is_empty() {
        return Err(Error::invalid(format!(
            "{} probability rows for {} labels",
            probabilities.len(),
            labels.len()
        )));
    }
    let (mut correct, mut loss) = (0usize, 0.0);
    for (i, (row, &l)) in probabilities.iter().zip(labels).enumerate() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&p| !(0.0..=1.0 + 1e-12).contains(&p)) {
            return Err(Error::invalid(format!("row {i} is not a distribution (sums to {sum})")));
        }
        if l >= row.len() {
            return Err(Error::invalid(format!("label {l} out of range 0..{}", row.len())));
        }
        if argmax(row) == l {
            correct += 1;
        }
        loss -= row[l].clamp(PROB_FLOOR, 1.0).ln();
    }
    let n = labels.len() as f64;
    Ok((correct as f64 / n, loss / n))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassNcc {
    pub class: String,
    pub pairs: usize,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NccReport {
    /// Classes in order of first appearance.
    pub classes: Vec<ClassNcc>,
    /// Mean of the class means.
    pub grand_average: f64,
}

impl NccReport {
    pub fn table(&self) -> Table {
        let mut t = Table::new(&["class", "pairs", "mean_ncc"]);
        for c in &self.classes {
            t.push(vec![c.class.clone(), c.pairs.to_string(), format!("{:.4}", c.mean)]);
        }
        t.push(vec![
            "average".into(),
            String::new(),
            format!("{:.4}", self.grand_average),
        ]);
        t
    }

    pub fn min_class_mean(&self) -> f64 {
        self.classes.iter().map(|c| c.mean).fold(f64::INFINITY, f64::min)
    }
}

/// `(class, original, generated)` triples in, per-class mean NCC out.
pub fn ncc_report(pairs: &[(String, AudioClip, AudioClip)]) -> Result<NccReport> {
    if pairs.is_empty() {
        return Err(Error::invalid("ncc report needs at least one pair"));
    }
    let mut order: Vec<String> = Vec::new();
    let mut acc: BTreeMap<String, (usize, f64)> = BTreeMap::new();
    for (class, original, generated) in pairs {
        let v = normalized_cross_correlation(original, generated)?;
        let e = acc.entry(class.clone()).or_insert_with(|| {
            order.push(class.clone());
            (0, 0.0)
        });
        e.0 += 1;
        e.1 += v;
    }
    let classes: Vec<ClassNcc> = order
        .into_iter()
        .map(|class| {
            let (n, s) = acc[&class];
            ClassNcc {
                class,
                pairs: n,
                mean: s / n as f64,
            }
        })
        .collect();
    let grand_average = classes.iter().map(|c| c.mean).sum::<f64>() / classes.len() as f64;
    Ok(NccReport { classes, grand_average })
}

/// Peak-normalized `size × size` image of a clip's magnitude spectrogram,
/// frequency along rows and time along columns, box-averaged.
pub fn spectrogram_image(clip: &AudioClip, params: StftParams, size: usize) -> Result<Vec<f64>> {
    if size == 0 {
        return Err(Error::invalid("image size must be positive"));
    }
    let frames = spectrogram_of(clip, params, SpectrogramMode::SqrtMagnitude)?.frames;
    let (t_len, bins) = (frames.rows(), frames.cols());
    if t_len == 0 {
        return Err(Error::invalid("clip shorter than one analysis window"));
    }
    let mut sum = vec![0.0; size * size];
    let mut count = vec![0usize; size * size];
    for t in 0..t_len {
        let x = t * size / t_len;
        for (b, &v) in frames.row(t).iter().enumerate() {
            let y = b * size / bins;
            sum[y * size + x] += v;
            count[y * size + x] += 1;
        }
    }
    let mut img: Vec<f64> = sum
        .iter()
        .zip(&count)
        .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect();
    if t_len < size || bins < size {
        for i in 0..size * size {
            if count[i] == 0 {
                let (y, x) = (i / size, i % size);
                let src_y = (y * bins / size).min(bins - 1) * size / bins;
                let src_x = (x * t_len / size).min(t_len - 1) * size / t_len;
                img[i] = img[src_y * size + src_x];
            }
        }
    }
    let peak = img.iter().fold(0.0f64, |m, &v| m.max(v));
    if peak > 0.0 {
        img.iter_mut().for_each(|v| *v /= peak);
    }
    Ok(img)
}

/// A labelled spectrogram image for the retrieval classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalItem {
    pub label: usize,
    pub image: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    pub synthesized_accuracy: f64,
    pub real_accuracy: f64,
    pub synthesized_count: usize,
    pub real_count: usize,
    pub epochs_run: usize,
}

impl RetrievalReport {
    pub fn gap(&self) -> f64 {
        self.real_accuracy - self.synthesized_accuracy
    }
}

/// Circularly shifts every row of every `size`-wide channel by `shift` columns.
fn roll_time(image: &[f64], size: usize, shift: usize) -> Vec<f64> {
    let mut out = vec![0.0; image.len()];
    for (src, dst) in image.chunks(size).zip(out.chunks_mut(size)) {
        for x in 0..size {
            dst[(x + shift) % size] = src[x];
        }
    }
    out
}

/// Spectrogram classifier: the encoder's convolution stages on one-channel
/// images, flattened into a linear class head.
struct RetrievalClassifier {
    store: ParamStore,
    encoder: FeatureEncoder,
    head_w: ParamId,
    head_b: ParamId,
}

impl RetrievalClassifier {
    fn new(config: &RunConfig) -> Result<Self> {
        let size = config.retrieval_size;
        let mut store = ParamStore::new();
        let mut rng = keyed_rng(config.seed, &[3, 0]);
        let encoder = FeatureEncoder::new(config.encoder(1, size, size), "retrieval.encoder", &mut store, &mut rng)?;
        let (d, c) = (encoder.map_len(), config.classes.len());
        let head_w = store.add("retrieval.head.w", glorot_uniform(&[d, c], d, c, &mut rng))?;
        let head_b = store.add("retrieval.head.b", Tensor::zeros(&[c]))?;
        Ok(Self {
            store,
            encoder,
            head_w,
            head_b,
        })
    }

    fn logits(
        &self,
        g: &mut Graph,
        p: &crate::tensor::BoundParams,
        items: &[&RetrievalItem],
    ) -> Result<crate::tensor::Var> {
        let images: Vec<Vec<f64>> = items.iter().map(|it| it.image.clone()).collect();
        let x = self.encoder.input(g, &images)?;
        let maps = self.encoder.feature_maps(g, p, x)?;
        let flat = g.reshape(maps, &[items.len(), self.encoder.map_len()])?;
        g.affine(flat, p.var(self.head_w), p.var(self.head_b))
    }

    fn train(&mut self, items: &[RetrievalItem], config: &RunConfig) -> Result<usize> {
        let mut adam = AdamState::new(
            &self.store,
            AdamConfig {
                lr: config.learning_rate,
                ..AdamConfig::default()
            },
        );
        let mut grads = Gradients::zeros_like(&self.store);
        let mut streak = 0;
        let mut epochs = 0;
        for epoch in 0..config.retrieval_epochs {
            epochs += 1;
            let mut order: Vec<usize> = (0..items.len()).collect();
            order.shuffle(&mut keyed_rng(config.seed, &[3, 1, epoch as u64]));
            let mut correct = 0;
            let mut shift_rng = keyed_rng(config.seed, &[3, 2, epoch as u64]);
            let shifted: Vec<RetrievalItem> = order
                .iter()
                .map(|&i| RetrievalItem {
                    label: items[i].label,
                    image: roll_time(
                        &items[i].image,
                        config.retrieval_size,
                        shift_rng.random_range(0..config.retrieval_size),
                    ),
                })
                .collect();
            for batch in shifted.chunks(config.batch_size) {
                let batch: Vec<&RetrievalItem> = batch.iter().collect();
                let labels: Vec<usize> = batch.iter().map(|it| it.label).collect();
                let mut g = Graph::new();
                let p = self.store.bind(&mut g);
                let logits = self.logits(&mut g, &p, &batch)?;
                let loss = g.cross_entropy_rows(logits, &labels)?;
                g.backward(loss)?;
                grads.reset();
                grads.accumulate(&g, &p);
                grads.clip_global_norm(config.clip_norm);
                adam_step(&mut self.store, &grads, &mut adam)?;
                let v = g.value(logits);
                let c = v.last_dim();
                correct += labels
                    .iter()
                    .enumerate()
                    .filter(|&(i, &l)| argmax(&v.data()[i * c..(i + 1) * c]) == l)
                    .count();
            }
            let acc = correct as f64 / items.len() as f64;
            streak = if acc >= config.early_stop_accuracy {
                streak + 1
            } else {
                0
            };
            if config.early_stop_patience > 0 && streak >= config.early_stop_patience {
                break;
            }
        }
        Ok(epochs)
    }

    fn accuracy(&self, items: &[RetrievalItem]) -> Result<f64> {
        if items.is_empty() {
            return Err(Error::invalid("no items to score"));
        }
        let mut correct = 0;
        for chunk in items.chunks(32) {
            let refs: Vec<&RetrievalItem> = chunk.iter().collect();
            let mut g = Graph::new();
            let p = self.store.bind_frozen(&mut g);
            let logits = self.logits(&mut g, &p, &refs)?;
            let v = g.value(logits);
            let c = v.last_dim();
            correct += chunk
                .iter()
                .enumerate()
                .filter(|(i, it)| argmax(&v.data()[i * c..(i + 1) * c]) == it.label)
                .count();
        }
        Ok(correct as f64 / items.len() as f64)
    }
}

/// Trains the spectrogram classifier on `train` (real clips only) and scores
/// it on `synthesized` and on `real_test`.
pub fn retrieval_experiment(
    train: &[RetrievalItem],
    synthesized: &[RetrievalItem],
    real_test: &[RetrievalItem],
    config: &RunConfig,
) -> Result<RetrievalReport> {
    let classes = config.classes.len();
    for (k, name) in config.classes.iter().enumerate() {
        if !train.iter().any(|it| it.label == k) {
            return Err(Error::Split(format!("class {name} has no real training spectrograms")));
        }
    }
    if let Some(it) = train
        .iter()
        .chain(synthesized)
        .chain(real_test)
        .find(|it| it.label >= classes)
    {
        return Err(Error::invalid(format!("label {} out of range 0..{classes}", it.label)));
    }
    let mut clf = RetrievalClassifier::new(config)?;
    let epochs_run = clf.train(train, config)?;
    Ok(RetrievalReport {
        synthesized_accuracy: clf.accuracy(synthesized)?,
        real_accuracy: clf.accuracy(real_test)?,
        synthesized_count: synthesized.len(),
        real_count: real_test.len(),
        epochs_run,
    })
}

/// One cell of the ablation grid: a model kind plus config overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationVariant {
    pub name: String,
    pub kind: ModelKind,
    pub overrides: Vec<String>,
}

/// Parses lines of the form `name: model=fslstm section.key=value ...`;
/// `#` starts a comment.
pub fn parse_ablation_grid(text: &str) -> Result<Vec<AblationVariant>> {
    let mut out: Vec<AblationVariant> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse { line: i + 1, message };
        let (name, rest) = line
            .split_once(':')
            .ok_or_else(|| err("expected `name: model=...`".into()))?;
        let name = name.trim().to_string();
        if name.is_empty() || out.iter().any(|v| v.name == name) {
            return Err(err(format!("empty or duplicate variant name {name:?}")));
        }
        let mut kind = None;
        let mut overrides = Vec::new();
        for tok in rest.split_whitespace() {
            match tok.strip_prefix("model=") {
                Some(m) => kind = Some(m.parse::<ModelKind>().map_err(|e| err(e.to_string()))?),
                None if tok.contains('=') && tok.contains('.') => overrides.push(tok.to_string()),
                None => return Err(err(format!("bad token {tok:?}"))),
            }
        }
        let kind = kind.ok_or_else(|| err("missing model=".into()))?;
        let mut probe = RunConfig::default();
        for o in &overrides {
            probe.apply_override(o).map_err(|e| err(e.to_string()))?;
        }
        out.push(AblationVariant { name, kind, overrides });
    }
    if out.is_empty() {
        return Err(Error::Parse {
            line: 0,
            message: "grid has no variants".into(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub kind: ModelKind,
    /// Test accuracy per seed, in seed order.
    pub accuracies: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    /// Rows in grid order.
    pub rows: Vec<AblationRow>,
    /// Variants that could not be built, with the reason.
    pub skipped: Vec<(String, String)>,
    pub seeds: Vec<u64>,
}

impl AblationTable {
    pub fn mean_of(&self, name: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.name == name).map(|r| r.mean)
    }

    /// Rows by decreasing mean accuracy, grid order among equals.
    pub fn ranked(&self) -> Vec<&AblationRow> {
        let mut r: Vec<&AblationRow> = self.rows.iter().collect();
        r.sort_by(|a, b| b.mean.total_cmp(&a.mean));
        r
    }

    pub fn table(&self) -> Table {
        let mut headers = vec!["rank".to_string(), "variant".into(), "model".into(), "mean_acc".into()];
        headers.extend(self.seeds.iter().map(|s| format!("seed_{s}")));
        let mut t = Table {
            headers,
            rows: Vec::new(),
        };
        for (i, r) in self.ranked().into_iter().enumerate() {
            let mut row = vec![
                (i + 1).to_string(),
                r.name.clone(),
                r.kind.name().into(),
                format!("{:.4}", r.mean),
            ];
            row.extend(r.accuracies.iter().map(|a| format!("{a:.4}")));
            t.push(row);
        }
        t
    }
}

/// Test accuracy of a model trained with `config` on the manifest's train split.
pub fn train_and_score(manifest: &DatasetManifest, config: &RunConfig, kind: ModelKind) -> Result<f64> {
    let clips = prepare_dataset(manifest, config)?;
    let train = split_refs(&clips, Split::Train);
    let test = split_refs(&clips, Split::Test);
    let bank = match kind {
        ModelKind::FsLstm => Some(bank_from_clips(&clips, config)?),
        ModelKind::Trn => None,
    };
    let mut model = Model::new(kind, config)?;
    model.train(&train, bank.as_ref(), |_| {})?;
    test_accuracy(&model, &test)
}

pub fn test_accuracy(model: &Model, clips: &[&PreparedClip]) -> Result<f64> {
    if clips.is_empty() {
        return Err(Error::Split("no clips to score".into()));
    }
    let preds = model.predict(clips)?;
    let correct = preds.iter().zip(clips).filter(|(p, c)| p.class == c.label).count();
    Ok(correct as f64 / clips.len() as f64)
}

/// Trains every variant once per seed. Variants whose configuration is
/// infeasible are reported through `notice` and listed as skipped.
pub fn ablation_run(
    grid: &[AblationVariant],
    base: &RunConfig,
    manifest: &DatasetManifest,
    seeds: &[u64],
    mut notice: impl FnMut(&str),
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::invalid("ablation needs at least one seed"));
    }
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    'variants: for v in grid {
        let mut cfg = base.clone();
        for o in &v.overrides {
            cfg.apply_override(o)?;
        }
        if let Err(e) = cfg.validate().and_then(|_| match v.kind {
            ModelKind::Trn => cfg.trn().validate(),
            ModelKind::FsLstm => cfg.fslstm().validate(),
        }) {
            notice(&format!("skipping variant {}: {e}", v.name));
            skipped.push((v.name.clone(), e.to_string()));
            continue;
        }
        let mut accuracies = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            cfg.seed = seed;
            match train_and_score(manifest, &cfg, v.kind) {
                Ok(a) => accuracies.push(a),
                Err(e @ Error::Config(_)) => {
                    notice(&format!("skipping variant {}: {e}", v.name));
                    skipped.push((v.name.clone(), e.to_string()));
                    continue 'variants;
                }
                Err(e) => return Err(e),
            }
        }
        let mean = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
        rows.push(AblationRow {
            name: v.name.clone(),
            kind: v.kind,
            accuracies,
            mean,
        });
    }
    Ok(AblationTable {
        rows,
        skipped,
        seeds: seeds.to_vec(),
    })
}

/// Confusion matrix plus accuracy and log loss of a model on `clips`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationReport {
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    pub log_loss: f64,
}

pub fn classification_report(model: &Model, clips: &[&PreparedClip]) -> Result<ClassificationReport> {
    if clips.is_empty() {
        return Err(Error::Split("no clips to classify".into()));
    }
    let preds = model.predict(clips)?;
    let labels: Vec<usize> = clips.iter().map(|c| c.label).collect();
    let classes: Vec<usize> = preds.iter().map(|p| p.class).collect();
    let probs: Vec<Vec<f64>> = preds.into_iter().map(|p| p.probabilities).collect();
    let (accuracy, log_loss) = accuracy_and_logloss(&probs, &labels)?;
    Ok(ClassificationReport {
        confusion: confusion_matrix(&classes, &labels, model.config.classes.len())?,
        accuracy,
        log_loss,
    })
}

/// NCC of model syntheses and of true-residual syntheses against the originals.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisReport {
    pub predicted: NccReport,
    pub true_residual: NccReport,
}

pub fn synthesis_report(
    model: &Model,
    clips: &[&PreparedClip],
    bank: &ClassSpectrogramBank,
) -> Result<SynthesisReport> {
    let cfg = &model.config;
    let preds = model.predict(clips)?;
    let mut predicted = Vec::with_capacity(clips.len());
    let mut truth = Vec::with_capacity(clips.len());
    for (p, c) in preds.iter().zip(clips) {
        let name = cfg.classes[c.label].clone();
        predicted.push((name.clone(), c.audio.clone(), synthesize_prediction(p, bank, cfg)?));
        truth.push((name, c.audio.clone(), synthesize_true_residual(c, bank, cfg)?));
    }
    Ok(SynthesisReport {
        predicted: ncc_report(&predicted)?,
        true_residual: ncc_report(&truth)?,
    })
}

/// Retrieval experiment on a model's syntheses of `test`, with the
/// classifier trained on the real audio of `train`.
pub fn model_retrieval(
    model: &Model,
    train: &[&PreparedClip],
    test: &[&PreparedClip],
    bank: &ClassSpectrogramBank,
) -> Result<RetrievalReport> {
    let cfg = &model.config;
    let params = cfg.stft_params()?;
    let item = |label: usize, audio: &AudioClip| -> Result<RetrievalItem> {
        Ok(RetrievalItem {
            label,
            image: spectrogram_image(audio, params, cfg.retrieval_size)?,
        })
    };
    let real_train = train
        .iter()
        .map(|c| item(c.label, &c.audio))
        .collect::<Result<Vec<_>>>()?;
    let real_test = test
        .iter()
        .map(|c| item(c.label, &c.audio))
        .collect::<Result<Vec<_>>>()?;
    let preds = model.predict(test)?;
    let synthesized = preds
        .iter()
        .zip(test)
        .map(|(p, c)| item(c.label, &synthesize_prediction(p, bank, cfg)?))
        .collect::<Result<Vec<_>>>()?;
    retrieval_experiment(&real_train, &synthesized, &real_test, cfg)
}

/// Two-column gnuplot-ready series: time in seconds, then one column per clip.
pub fn waveform_tsv(clips: &[&AudioClip]) -> Result<String> {
    let first = clips.first().ok_or_else(|| Error::invalid("no clips"))?;
    let n = clips.iter().map(|c| c.len()).min().unwrap_or(0);
    if clips.iter().any(|c| c.sample_rate != first.sample_rate) {
        return Err(Error::invalid("clips have different sample rates"));
    }
    let mut out = String::new();
    for i in 0..n {
        let _ = write!(out, "{:.6}", i as f64 / first.sample_rate as f64);
        for c in clips {
            let _ = write!(out, "\t{:.6}", c.samples[i]);
        }
        out.push('\n');
    }
    Ok(out)
}

/// `frame bin value` triples with a blank line between frames, for `splot ... with pm3d`.
pub fn spectrogram_tsv(frames: &Matrix) -> String {
    let mut out = String::new();
    for t in 0..frames.rows() {
        for (b, v) in frames.row(t).iter().enumerate() {
            let _ = writeln!(out, "{t}\t{b}\t{v:.6}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_predictions_give_identity() {
        let labels = [0, 1, 2, 2, 1];
        let cm = confusion_matrix(&labels, &labels, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(cm.normalized[i][j], if i == j { 1.0 } else { 0.0 });
            }
        }
        assert_eq!(cm.total(), 5);
    }

    #[test]
    fn constant_predictor_fills_one_column() {
        let labels = [0, 1, 2, 2, 3];
        let cm = confusion_matrix(&[2; 5], &labels, 4).unwrap();
        for (i, row) in cm.counts.iter().enumerate() {
            assert_eq!(row.iter().sum::<usize>(), labels.iter().filter(|&&l| l == i).count());
            assert!(row.iter().enumerate().all(|(j, &c)| j == 2 || c == 0));
        }
        assert!(confusion_matrix(&[4], &[0], 4).is_err());
        assert!(confusion_matrix(&[0, 1], &[0], 4).is_err());
    }

    #[test]
    fn uniform_and_one_hot_log_loss() {
        let uniform = vec![vec![1.0 / 12.0; 12]; 3];
        let (acc, ll) = accuracy_and_logloss(&uniform, &[0, 5, 11]).unwrap();
        assert!((ll - 12f64.ln()).abs() < 1e-12);
        assert!((acc - 1.0 / 3.0).abs() < 1e-12);
        let mut one_hot = vec![0.0; 12];
        one_hot[4] = 1.0;
        let (acc, ll) = accuracy_and_logloss(&[one_hot.clone()], &[4]).unwrap();
        assert_eq!(acc, 1.0);
        assert!(ll.abs() < 1e-12);
        let (_, ll) = accuracy_and_logloss(&[one_hot], &[3]).unwrap();
        assert!((ll + PROB_FLOOR.ln()).abs() < 1e-9);
        assert!(accuracy_and_logloss(&[vec![0.5, 0.6]], &[0]).is_err());
    }

    #[test]
    fn log_loss_falls_as_true_probability_rises() {
        let mut prev = f64::INFINITY;
        for k in 1..10 {
            let p = k as f64 / 10.0;
            let rest = (1.0 - p) / 3.0;
            let (_, ll) = accuracy_and_logloss(&[vec![rest, p, rest, rest]], &[1]).unwrap();
            assert!(ll < prev);
            prev = ll;
        }
    }

    fn tone(f: f64, phase: f64) -> AudioClip {
        AudioClip::new(
            (0..8000)
                .map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / 8000.0 + phase).sin())
                .collect(),
            8000,
        )
        .unwrap()
    }

    #[test]
    fn identical_pairs_score_one() {
        let pairs = vec![
            ("a".to_string(), tone(250.0, 0.0), tone(250.0, 0.0)),
            ("b".to_string(), tone(500.0, 1.0), tone(500.0, 1.0)),
        ];
        let r = ncc_report(&pairs).unwrap();
        assert_eq!(r.classes.len(), 2);
        for c in &r.classes {
            assert!((c.mean - 1.0).abs() < 1e-9);
        }
        assert!((r.grand_average - 1.0).abs() < 1e-9);
        assert!(r.table().to_aligned().contains("average"));
    }

    #[test]
    fn noise_scores_near_zero_on_average() {
        let mut means = Vec::new();
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = |rng: &mut ChaCha8Rng| {
                AudioClip::new((0..4000).map(|_| rng.random::<f64>() - 0.5).collect(), 8000).unwrap()
            };
            let a = noise(&mut rng);
            let b = noise(&mut rng);
            means.push(ncc_report(&[("n".into(), a, b)]).unwrap().grand_average);
        }
        let mean = means.iter().sum::<f64>() / means.len() as f64;
        assert!(mean.abs() < 0.1, "{mean}");
    }

    #[test]
    fn tables_render_in_three_formats() {
        let mut t = Table::new(&["a", "long header"]);
        t.push(vec!["x,y".into(), "1".into()]);
        assert_eq!(t.to_csv(), "a,long header\n\"x,y\",1\n");
        assert_eq!(t.to_tsv(), "a\tlong header\nx,y\t1\n");
        assert_eq!(t.to_aligned(), "a    long header\nx,y  1\n");
    }

    #[test]
    fn spectrogram_image_is_peak_normalized() {
        let img = spectrogram_image(&tone(1000.0, 0.0), StftParams::default(), 16).unwrap();
        assert_eq!(img.len(), 256);
        assert!((img.iter().cloned().fold(0.0, f64::max) - 1.0).abs() < 1e-12);
        let bin = 1000 * 256 / 8000;
        let row = bin * 16 / 129;
        let peak_row = (0..16)
            .max_by(|&a, &b| img[a * 16 + 3].total_cmp(&img[b * 16 + 3]))
            .unwrap();
        assert_eq!(peak_row, row);
        let small = spectrogram_image(&tone(1000.0, 0.0), StftParams::default(), 128).unwrap();
        assert!(small.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn roll_wraps_each_row() {
        let img: Vec<f64> = (0..8).map(f64::from).collect();
        assert_eq!(roll_time(&img, 4, 1), vec![3.0, 0.0, 1.0, 2.0, 7.0, 4.0, 5.0, 6.0]);
        assert_eq!(roll_time(&img, 4, 0), img);
    }

    #[test]
    fn grid_parsing() {
        let g = parse_ablation_grid("# comment\nbase: model=fslstm\nraw: model=fslstm video.input=raw  # no space-time\nq4: model=trn trn.max_scale=4\n").unwrap();
        assert_eq!(g.len(), 3);
        assert_eq!(g[1].overrides, vec!["video.input=raw".to_string()]);
        assert_eq!(g[2].kind, ModelKind::Trn);
        assert!(matches!(
            parse_ablation_grid("x: trn.max_scale=4"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_ablation_grid("a: model=trn\na: model=trn"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            parse_ablation_grid("a: model=trn bogus.key=1"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(parse_ablation_grid("\n# nothing\n").is_err());
    }

    #[test]
    fn infeasible_variant_is_skipped() {
        let grid = parse_ablation_grid("big: model=trn trn.max_scale=16").unwrap();
        let mut notes = Vec::new();
        let t = ablation_run(&grid, &RunConfig::default(), &DatasetManifest::default(), &[1], |n| {
            notes.push(n.to_string())
        })
        .unwrap();
        assert!(t.rows.is_empty());
        assert_eq!(t.skipped.len(), 1);
        assert!(notes[0].contains("big"));
    }

    #[test]
    fn ranking_is_stable() {
        let row = |name: &str, mean| AblationRow {
            name: name.into(),
            kind: ModelKind::Trn,
            accuracies: vec![mean],
            mean,
        };
        let t = AblationTable {
            rows: vec![row("a", 0.5), row("b", 0.9), row("c", 0.5)],
            skipped: vec![],
            seeds: vec![1],
        };
        let names: Vec<_> = t.ranked().iter().map(|r| r.name.clone()).collect();
        assert_eq!(names, ["b", "a", "c"]);
        assert_eq!(t.mean_of("c"), Some(0.5));
        assert!(t
            .table()
            .to_csv()
            .starts_with("rank,variant,model,mean_acc,seed_1\n1,b,trn"));
    }

    #[test]
    fn tsv_exports() {
        let a = tone(250.0, 0.0);
        let s = waveform_tsv(&[&a, &a]).unwrap();
        assert_eq!(s.lines().count(), 8000);
        assert_eq!(s.lines().next().unwrap().split('\t').count(), 3);
        let m = Matrix::from_fn(2, 3, |t, b| (t + b) as f64);
        assert_eq!(spectrogram_tsv(&m).lines().count(), 8);
    }
}
