use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::classifier::{continue_training, train_classifier, Classifier, ClassifierConfig};
use super::spec::{CorpusSource, ExperimentSpec, Variant};
use crate::contrastive::{init_encoder, pretrain_encoder, EncoderParams, PretrainConfig, PretrainReport};
use crate::error::{ensure, Error, Result};
use crate::image::{load_image, resize_bilinear, GrayImage};
use crate::metrics::{auc, make_splits};
use crate::phantom::{generate_corpus, read_manifest};
use crate::seed;
use crate::trainer::{enhance_image, train_dce};

/// Labeled images with stable sample identifiers.
#[derive(Debug, Clone)]
pub struct LabeledCorpus {
    pub name: String,
    pub ids: Vec<String>,
    pub images: Vec<GrayImage>,
    pub labels: Vec<bool>,
}

impl LabeledCorpus {
    fn subset(&self, idx: &[usize]) -> (Vec<GrayImage>, Vec<bool>, Vec<String>) {
        (
            idx.iter().map(|&i| self.images[i].clone()).collect(),
            idx.iter().map(|&i| self.labels[i]).collect(),
            idx.iter().map(|&i| self.ids[i].clone()).collect(),
        )
    }

    fn with_images(&self, images: Vec<GrayImage>) -> Self {
        Self {
            images,
            ..self.clone()
        }
    }
}

/// Loads or generates a corpus and resizes it to `side x side`.
pub fn load_corpus(source: &CorpusSource, count: usize, corpus_seed: u64, positive_fraction: f64, side: usize) -> Result<LabeledCorpus> {
    let resize = |img: GrayImage| {
        if img.dims() == (side, side) {
            Ok(img)
        } else {
            resize_bilinear(&img, side, side)
        }
    };
    let name = source.label();
    match source {
        CorpusSource::Phantom(_) => {
            let domain = source.phantom_domain()?.expect("phantom source has a domain");
            let samples = generate_corpus(count, corpus_seed, &domain, positive_fraction)?;
            let ids = samples
                .iter()
                .map(|s| format!("{}-{:016x}", domain.name, s.seed))
                .collect();
            let labels = samples.iter().map(|s| s.label).collect();
            let images = samples
                .into_par_iter()
                .map(|s| resize(s.image))
                .collect::<Result<Vec<_>>>()?;
            Ok(LabeledCorpus {
                name,
                ids,
                images,
                labels,
            })
        }
        CorpusSource::Directory(dir) => {
            let rows = read_manifest(&dir.join("manifest.csv"))?;
            ensure!(!rows.is_empty(), Parameter, "{}: empty manifest", dir.display());
            let images = rows
                .par_iter()
                .map(|r| load_image(dir.join(&r.file)).and_then(resize))
                .collect::<Result<Vec<_>>>()?;
            Ok(LabeledCorpus {
                name,
                ids: rows.iter().map(|r| format!("{}/{}", dir.display(), r.file)).collect(),
                images,
                labels: rows.iter().map(|r| r.label != 0).collect(),
            })
        }
    }
}

/// Training and evaluation sample sets of one stage; `overlap` must be 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub stage: String,
    pub train: usize,
    pub eval: usize,
    pub overlap: usize,
}

fn audit(stage: String, train: &[String], eval: &[String]) -> Result<AuditEntry> {
    let train_set: BTreeSet<&String> = train.iter().collect();
    let shared: Vec<&String> = eval.iter().filter(|id| train_set.contains(id)).collect();
    log::debug!("{stage}: train ids {train:?}");
    log::debug!("{stage}: eval ids {eval:?}");
    ensure!(
        shared.is_empty(),
        Parameter,
        "{stage}: {} evaluation samples also used for training, e.g. {}",
        shared.len(),
        shared[0]
    );
    Ok(AuditEntry {
        stage,
        train: train.len(),
        eval: eval.len(),
        overlap: 0,
    })
}

/// Scores on one evaluation set, with the identifiers needed to recompute
/// any metric afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSet {
    pub train_ids: Vec<String>,
    pub ids: Vec<String>,
    pub labels: Vec<bool>,
    pub scores: Vec<f64>,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotRecord {
    pub fraction: f64,
    pub result: ScoredSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodRecord {
    pub domain: String,
    pub zero_shot: ScoredSet,
    pub few_shot: Vec<FewShotRecord>,
}

/// Everything produced for one (variant, seed) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub variant: Variant,
    pub seed: u64,
    pub folds: Vec<ScoredSet>,
    pub ood: Vec<OodRecord>,
    pub audit: Vec<AuditEntry>,
    /// First and last epoch mean loss of the enhancer, when used.
    pub enhancer_loss: Option<(f64, f64)>,
    pub pretrain: Option<PretrainReport>,
    pub complete: bool,
}

impl SeedRun {
    pub fn in_distribution_auc(&self) -> f64 {
        self.folds.iter().map(|f| f.auc).sum::<f64>() / self.folds.len() as f64
    }
}

/// Mean and sample standard deviation over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub per_seed: Vec<f64>,
}

impl Stat {
    pub fn from_values(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            std,
            per_seed: values,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FractionStat {
    pub fraction: f64,
    pub auc: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodRow {
    pub domain: String,
    pub ood_zero: Stat,
    pub ood_fraction: Vec<FractionStat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub variant: Variant,
    pub in_distribution: Stat,
    pub ood: Vec<OodRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    /// What the reported standard deviations range over.
    pub std_over: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<VariantRow>,
    pub runs: Vec<SeedRun>,
}

impl ExperimentReport {
    pub fn row(&self, variant: Variant) -> Option<&VariantRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// `variant,domain,fraction,auc_mean,auc_std,seeds`, with the zero-shot
    /// result at fraction 0.
    pub fn few_shot_csv(&self) -> String {
        let mut out = String::from("variant,domain,fraction,auc_mean,auc_std,seeds\n");
        for row in &self.rows {
            for ood in &row.ood {
                let points = std::iter::once((0.0, &ood.ood_zero))
                    .chain(ood.ood_fraction.iter().map(|f| (f.fraction, &f.auc)));
                for (fraction, stat) in points {
                    out.push_str(&format!(
                        "{},{},{},{},{},{}\n",
                        row.variant,
                        ood.domain,
                        fraction,
                        stat.mean,
                        stat.std,
                        stat.per_seed.len()
                    ));
                }
            }
        }
        out
    }
}

/// Writes each (variant, seed) record as soon as a stage finishes, so an
/// interrupted run leaves readable partial results.
struct Sink<'a> {
    dir: Option<&'a Path>,
}

impl Sink<'_> {
    fn path(dir: &Path, run: &SeedRun) -> PathBuf {
        dir.join(format!("{}-seed{}.json", run.variant, run.seed))
    }

    fn persist(&self, run: &SeedRun) -> Result<()> {
        let Some(dir) = self.dir else {
            return Ok(());
        };
        let path = Self::path(dir, run);
        let tmp = path.with_extension("json.tmp");
        let text = serde_json::to_string_pretty(run).expect("run serializes");
        std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }
}

struct SeedData {
    id: LabeledCorpus,
    ood: Vec<LabeledCorpus>,
    pool: LabeledCorpus,
}

impl SeedData {
    fn load(spec: &ExperimentSpec, run_seed: u64) -> Result<Self> {
        let side = spec.encoder.input_side;
        let d = &spec.data;
        let corpus_seed = |role: &str, i: u64| seed::derive(run_seed, &[seed::tag("corpus"), seed::tag(role), i]);
        let id = load_corpus(&d.id, d.id_count, corpus_seed("id", 0), d.positive_fraction, side)?;
        let ood = d
            .ood
            .iter()
            .enumerate()
            .map(|(i, s)| load_corpus(s, d.ood_count, corpus_seed("ood", i as u64), d.positive_fraction, side))
            .collect::<Result<Vec<_>>>()?;
        let pool = load_corpus(
            &d.unlabeled,
            d.unlabeled_count,
            corpus_seed("unlabeled", 0),
            d.positive_fraction,
            side,
        )?;
        Ok(Self { id, ood, pool })
    }

    fn enhanced(&self, spec: &ExperimentSpec, run_seed: u64) -> Result<(Self, (f64, f64))> {
        let config = crate::trainer::TrainConfig {
            seed: run_seed,
            ..spec.dce.clone()
        };
        let (params, report) = train_dce(&self.pool.images, &config).map_err(Error::from)?;
        let totals = report.totals();
        let losses = match (totals.first(), totals.last()) {
            (Some(&a), Some(&b)) => (a, b),
            _ => (f64::NAN, f64::NAN),
        };
        let shift = spec.dce.shift;
        let apply = |c: &LabeledCorpus| -> Result<LabeledCorpus> {
            let images = c
                .images
                .par_iter()
                .map(|img| enhance_image(&params, img, shift))
                .collect::<Result<Vec<_>>>()?;
            Ok(c.with_images(images))
        };
        Ok((
            Self {
                id: apply(&self.id)?,
                ood: self.ood.iter().map(apply).collect::<Result<Vec<_>>>()?,
                pool: apply(&self.pool)?,
            },
            losses,
        ))
    }
}

fn stage_config(base: &ClassifierConfig, run_seed: u64, stage: &str) -> ClassifierConfig {
    ClassifierConfig {
        seed: seed::derive(run_seed, &[seed::tag("classifier"), seed::tag(stage)]),
        ..base.clone()
    }
}

fn score(classifier: &Classifier, corpus: &LabeledCorpus, idx: &[usize], train_ids: Vec<String>) -> Result<ScoredSet> {
    let (images, labels, ids) = corpus.subset(idx);
    let scores = classifier.predict(&images)?;
    let auc = auc(&scores, &labels)?;
    Ok(ScoredSet {
        train_ids,
        ids,
        labels,
        scores,
        auc,
    })
}

fn encoder_for(spec: &ExperimentSpec, variant: Variant, pool: &[GrayImage], run_seed: u64) -> Result<(EncoderParams, Option<PretrainReport>)> {
    let init_seed = seed::derive(run_seed, &[seed::tag("encoder")]);
    if variant.uses_pretraining() {
        let config = PretrainConfig {
            seed: init_seed,
            ..spec.pretrain.clone()
        };
        let (enc, report) = pretrain_encoder(pool, &spec.encoder, &config, None)?;
        Ok((enc, Some(report)))
    } else {
        Ok((init_encoder(&spec.encoder, init_seed)?, None))
    }
}

fn run_variant(
    spec: &ExperimentSpec,
    variant: Variant,
    run_seed: u64,
    data: &SeedData,
    enhancer_loss: Option<(f64, f64)>,
    sink: &Sink,
) -> Result<SeedRun> {
    let mut run = SeedRun {
        variant,
        seed: run_seed,
        folds: Vec::new(),
        ood: Vec::new(),
        audit: Vec::new(),
        enhancer_loss,
        pretrain: None,
        complete: false,
    };
    let all_eval: Vec<String> = data
        .id
        .ids
        .iter()
        .chain(data.ood.iter().flat_map(|c| c.ids.iter()))
        .cloned()
        .collect();
    if variant.uses_enhancement() || variant.uses_pretraining() {
        run.audit.push(audit("self-supervised pool".into(), &data.pool.ids, &all_eval)?);
    }
    let (encoder, pretrain) = encoder_for(spec, variant, &data.pool.images, run_seed)?;
    run.pretrain = pretrain;
    sink.persist(&run)?;

    let plan = make_splits(
        &data.id.labels,
        seed::derive(run_seed, &[seed::tag("id-split")]),
        &[],
        &spec.splits,
    )?;
    for (k, test_idx) in plan.folds.iter().enumerate() {
        let train_idx = plan.fold_train(k);
        let (images, labels, train_ids) = data.id.subset(&train_idx);
        let test_ids: Vec<String> = test_idx.iter().map(|&i| data.id.ids[i].clone()).collect();
        run.audit.push(audit(format!("fold {k}"), &train_ids, &test_ids)?);
        let config = stage_config(&spec.classifier, run_seed, &format!("fold{k}"));
        let (classifier, _) = train_classifier(encoder.clone(), &images, &labels, &config)?;
        run.folds.push(score(&classifier, &data.id, test_idx, train_ids)?);
        log::info!("{variant} seed {run_seed} fold {k}: auc {:.4}", run.folds[k].auc);
        sink.persist(&run)?;
    }

    let config = stage_config(&spec.classifier, run_seed, "in-distribution");
    let (base, _) = train_classifier(encoder, &data.id.images, &data.id.labels, &config)?;
    for (d, ood) in data.ood.iter().enumerate() {
        let oplan = make_splits(
            &ood.labels,
            seed::derive(run_seed, &[seed::tag("ood-split"), d as u64]),
            &spec.few_shot_fractions,
            &spec.splits,
        )?;
        let test_ids: Vec<String> = oplan.ood_test.iter().map(|&i| ood.ids[i].clone()).collect();
        let ood_train_ids: Vec<String> = oplan.ood_train.iter().map(|&i| ood.ids[i].clone()).collect();
        // zero-shot: the classifier has seen in-distribution data only
        let zero_train: Vec<String> = data.id.ids.clone();
        run.audit.push(audit(format!("{} zero-shot", ood.name), &zero_train, &test_ids)?);
        run.audit.push(audit(
            format!("{} zero-shot vs ood train", ood.name),
            &zero_train,
            &ood_train_ids,
        )?);
        let zero_shot = score(&base, ood, &oplan.ood_test, zero_train.clone())?;
        log::info!("{variant} seed {run_seed} {} zero-shot: auc {:.4}", ood.name, zero_shot.auc);
        let mut record = OodRecord {
            domain: ood.name.clone(),
            zero_shot,
            few_shot: Vec::new(),
        };
        for (fraction, subset) in &oplan.few_shot {
            let (images, labels, ids) = ood.subset(subset);
            let mut train_ids = zero_train.clone();
            train_ids.extend(ids);
            run.audit.push(audit(
                format!("{} few-shot {fraction}", ood.name),
                &train_ids,
                &test_ids,
            )?);
            let config = stage_config(&spec.few_shot, run_seed, &format!("few-shot-{d}-{fraction}"));
            let (adapted, _) = continue_training(base.clone(), &images, &labels, &config)?;
            let result = score(&adapted, ood, &oplan.ood_test, train_ids)?;
            log::info!(
                "{variant} seed {run_seed} {} few-shot {fraction}: auc {:.4}",
                ood.name,
                result.auc
            );
            record.few_shot.push(FewShotRecord {
                fraction: *fraction,
                result,
            });
        }
        run.ood.push(record);
        sink.persist(&run)?;
    }
    run.complete = true;
    sink.persist(&run)?;
    Ok(run)
}

fn aggregate(spec: &ExperimentSpec, runs: &[SeedRun]) -> Vec<VariantRow> {
    spec.variants
        .iter()
        .map(|&variant| {
            let mine: Vec<&SeedRun> = runs.iter().filter(|r| r.variant == variant).collect();
            let ood = (0..spec.data.ood.len())
                .map(|d| OodRow {
                    domain: mine[0].ood[d].domain.clone(),
                    ood_zero: Stat::from_values(mine.iter().map(|r| r.ood[d].zero_shot.auc).collect()),
                    ood_fraction: spec
                        .few_shot_fractions
                        .iter()
                        .enumerate()
                        .map(|(f, &fraction)| FractionStat {
                            fraction,
                            auc: Stat::from_values(mine.iter().map(|r| r.ood[d].few_shot[f].result.auc).collect()),
                        })
                        .collect(),
                })
                .collect();
            VariantRow {
                variant,
                in_distribution: Stat::from_values(mine.iter().map(|r| r.in_distribution_auc()).collect()),
                ood,
            }
        })
        .collect()
}

/// Runs every variant for every seed. When `out_dir` is given, per-run
/// records are written to it as stages complete.
pub fn run_experiment(spec: &ExperimentSpec, out_dir: Option<&Path>) -> Result<ExperimentReport> {
    spec.validate()?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let sink = Sink { dir: out_dir };
    let mut runs = Vec::new();
    for &run_seed in &spec.seeds {
        let raw = SeedData::load(spec, run_seed)?;
        let enhanced = if spec.variants.iter().any(|v| v.uses_enhancement()) {
            Some(raw.enhanced(spec, run_seed)?)
        } else {
            None
        };
        for &variant in &spec.variants {
            let (data, loss) = match (&enhanced, variant.uses_enhancement()) {
                (Some((e, loss)), true) => (e, Some(*loss)),
                _ => (&raw, None),
            };
            runs.push(run_variant(spec, variant, run_seed, data, loss, &sink)?);
        }
    }
    Ok(ExperimentReport {
        std_over: "seeds".into(),
        seeds: spec.seeds.clone(),
        rows: aggregate(spec, &runs),
        runs,
    })
}
