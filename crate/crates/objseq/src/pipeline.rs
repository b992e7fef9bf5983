//! End-to-end glue: dataset generation and loading, record resolution,
//! batch inference, and per-task evaluation of prediction files.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::builder::{
    apply_task_prefix, build_task_sample, BuildError, Entity, GroundedText, MarkerStyle, Task, TaskAnnotation,
    TaskPrefixes, TokenSeq,
};
use crate::data::{
    files, read_jsonl, write_jsonl, AnnotationRecord, DataError, DatasetManifest, SceneRecord,
};
use crate::decoding::SamplerConfig;
use crate::features::FeatureGrid;
use crate::metrics::{
    acc_at_05, bleu4, grounding_f1, iou, vqa_soft_accuracy, F1Average, F1Mode, GtInstance, MetricsError,
    PredInstance, IOU_THRESHOLD,
};
use crate::model::{ModelError, ModelParams, TrainData};
use crate::parser::{parse, validate, ParsedOutput};
use crate::scene::{generate_scene, scene_to_features, toy_word_vocab, GenConfig, Scene, SHAPES};
use crate::vocab::{BBox, UnifiedVocab, VocabError, VocabManifest, WordVocab};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{0}")]
    Invalid(String),
}

/// Generates a dataset directory: vocabulary manifest, scene geometry, and
/// per-task annotation files, plus a manifest with the seed and counts.
pub fn generate_dataset(
    dir: &Path,
    n_scenes: usize,
    seed: u64,
    gen_cfg: &GenConfig,
    n_bins: u32,
) -> Result<DatasetManifest, PipelineError> {
    let words = toy_word_vocab();
    let vocab = UnifiedVocab::new(words.n_text(), n_bins)?;
    let manifest = VocabManifest::new(vocab, &words);
    std::fs::create_dir_all(dir).map_err(|e| DataError::Io { path: dir.display().to_string(), source: e })?;
    let vocab_path = dir.join(files::VOCAB);
    std::fs::write(&vocab_path, manifest.to_json())
        .map_err(|e| DataError::Io { path: vocab_path.display().to_string(), source: e })?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scene_records = Vec::with_capacity(n_scenes);
    let mut by_task: BTreeMap<Task, Vec<AnnotationRecord>> = Task::ALL.iter().map(|&t| (t, Vec::new())).collect();
    for id in 0..n_scenes {
        let (scene, records) = generate_scene(&mut rng, gen_cfg, id as u64);
        scene_records.push(scene.to_record());
        for r in records {
            by_task.get_mut(&r.task).expect("all tasks present").push(r);
        }
    }
    write_jsonl(&dir.join(files::SCENES), &scene_records)?;
    let mut counts = BTreeMap::new();
    counts.insert("scenes".to_string(), n_scenes);
    for (task, records) in &by_task {
        write_jsonl(&dir.join(files::annotations(*task)), records)?;
        counts.insert(task.name().to_string(), records.len());
    }
    let ds_manifest = DatasetManifest {
        seed,
        n_scenes,
        grid: gen_cfg.grid,
        max_objects: gen_cfg.max_objects,
        counts,
    };
    let manifest_path = dir.join(files::MANIFEST);
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&ds_manifest).expect("manifest serializes"))
        .map_err(|e| DataError::Io { path: manifest_path.display().to_string(), source: e })?;
    Ok(ds_manifest)
}

/// A dataset directory loaded into memory, with per-scene feature grids.
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub vocab_manifest: VocabManifest,
    pub vocab: UnifiedVocab,
    pub words: WordVocab,
    pub grids: BTreeMap<u64, Arc<FeatureGrid>>,
    pub records: BTreeMap<Task, Vec<AnnotationRecord>>,
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, PipelineError> {
    let manifest_path = dir.join(files::MANIFEST);
    let manifest: DatasetManifest = serde_json::from_str(
        &std::fs::read_to_string(&manifest_path)
            .map_err(|e| DataError::Io { path: manifest_path.display().to_string(), source: e })?,
    )
    .map_err(|e| PipelineError::Invalid(format!("dataset manifest: {e}")))?;
    let vocab_path = dir.join(files::VOCAB);
    let vocab_manifest = VocabManifest::from_json(
        &std::fs::read_to_string(&vocab_path)
            .map_err(|e| DataError::Io { path: vocab_path.display().to_string(), source: e })?,
    )?;
    let vocab = vocab_manifest.vocab()?;
    let words = vocab_manifest.word_vocab()?;

    let scene_records: Vec<SceneRecord> = read_jsonl(&dir.join(files::SCENES))?;
    let mut grids = BTreeMap::new();
    for rec in &scene_records {
        let scene = Scene::from_record(rec)
            .ok_or_else(|| PipelineError::Invalid(format!("scene {} has unknown attributes", rec.scene_id)))?;
        grids.insert(rec.scene_id, Arc::new(scene_to_features(&scene, manifest.grid, manifest.grid)));
    }

    let mut records = BTreeMap::new();
    for task in Task::ALL {
        let path = dir.join(files::annotations(task));
        if path.exists() {
            records.insert(task, read_jsonl::<AnnotationRecord>(&path)?);
        }
    }
    Ok(Dataset { manifest, vocab_manifest, vocab, words, grids, records })
}

/// Resolves an annotation record against the vocabulary: words to ids,
/// entity boxes quantized. Unknown words are an error, not UNK; a dataset
/// and vocabulary that disagree should fail loudly.
pub fn record_to_annotation(
    rec: &AnnotationRecord,
    words: &WordVocab,
    vocab: &UnifiedVocab,
    image: Arc<FeatureGrid>,
) -> Result<TaskAnnotation, PipelineError> {
    let ids = encode_strict(&rec.words, words)?;
    let mut entities = Vec::with_capacity(rec.entities.len());
    for e in &rec.entities {
        let bbox = BBox::new(e.bbox[0], e.bbox[1], e.bbox[2], e.bbox[3])?;
        entities.push(Entity { start: e.start, end: e.end, quant: vocab.quantize_box(&bbox)? });
    }
    let text = GroundedText::new(ids, entities, vocab)?;
    let answer = encode_strict(&rec.answer, words)?;
    Ok(TaskAnnotation { image, text, answer })
}

fn encode_strict(words: &[String], vocab: &WordVocab) -> Result<Vec<u32>, PipelineError> {
    words
        .iter()
        .map(|w| vocab.lookup(w).ok_or_else(|| PipelineError::Data(DataError::UnknownWord(w.clone()))))
        .collect()
}

impl Dataset {
    pub fn grid_for(&self, scene_id: u64) -> Result<Arc<FeatureGrid>, PipelineError> {
        self.grids
            .get(&scene_id)
            .cloned()
            .ok_or_else(|| PipelineError::Invalid(format!("scene {scene_id} missing from scenes file")))
    }

    pub fn annotation(&self, rec: &AnnotationRecord) -> Result<TaskAnnotation, PipelineError> {
        record_to_annotation(rec, &self.words, &self.vocab, self.grid_for(rec.scene_id)?)
    }

    /// Builds the training pools for every downstream task present, plus
    /// pretrain annotations.
    pub fn train_data(&self, style: MarkerStyle) -> Result<TrainData, PipelineError> {
        let mut by_task = BTreeMap::new();
        for task in Task::DOWNSTREAM {
            if let Some(records) = self.records.get(&task) {
                let mut pool = Vec::with_capacity(records.len());
                for rec in records {
                    let ann = self.annotation(rec)?;
                    pool.push(build_task_sample(task, &ann, &self.vocab, style)?);
                }
                by_task.insert(task, pool);
            }
        }
        let mut pretrain = Vec::new();
        if let Some(records) = self.records.get(&Task::Pretrain) {
            for rec in records {
                pretrain.push(self.annotation(rec)?);
            }
        }
        let prefixes = TaskPrefixes::new(&self.words).ok();
        Ok(TrainData { by_task, pretrain, prefixes })
    }
}

/// Decodes one prediction per record of `task`, in record order. Nucleus
/// sampling derives a per-record generator from `seed`, so results do not
/// depend on thread scheduling.
pub fn infer_task(
    params: &ModelParams,
    ds: &Dataset,
    task: Task,
    cfg: &SamplerConfig,
    seed: u64,
    task_prefix: bool,
) -> Result<Vec<Vec<u32>>, PipelineError> {
    let records = ds
        .records
        .get(&task)
        .ok_or_else(|| PipelineError::Invalid(format!("dataset has no {} annotations", task.name())))?;
    let prefixes = if task_prefix {
        Some(TaskPrefixes::new(&ds.words)?)
    } else {
        None
    };
    let vocab = ds.vocab;
    let inputs: Vec<(Arc<FeatureGrid>, Vec<u32>)> = records
        .iter()
        .map(|rec| {
            let ann = ds.annotation(rec)?;
            let mut sample = build_task_sample(task, &ann, &vocab, MarkerStyle::OpenClose)?;
            if let Some(p) = &prefixes {
                sample = apply_task_prefix(sample, true, p);
            }
            Ok((sample.image, sample.input_text))
        })
        .collect::<Result<_, PipelineError>>()?;
    let preds: Vec<Result<Vec<u32>, PipelineError>> = inputs
        .par_iter()
        .enumerate()
        .map(|(i, (image, input_text))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let seq = params.generate(image, input_text, cfg, &mut rng)?;
            Ok(seq.to_ids(&vocab))
        })
        .collect();
    preds.into_iter().collect()
}

/// Evaluation results; fields stay `None` when the task does not use them.
#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub task: Option<Task>,
    pub n: usize,
    pub acc_at_05: Option<f64>,
    pub bleu4: Option<f64>,
    pub f1_all: Option<f64>,
    pub f1_loc: Option<f64>,
    pub vqa_acc: Option<f64>,
    pub exact_text_match: Option<f64>,
    pub syntactic_failure_rate: f64,
}

fn shape_label(words: &[u32], wv: &WordVocab) -> Option<String> {
    words
        .iter()
        .rev()
        .filter_map(|&id| wv.word_of(id))
        .find(|w| SHAPES.contains(w))
        .map(str::to_owned)
}

fn parse_or_none(ids: &[u32], vocab: &UnifiedVocab) -> (Option<ParsedOutput>, bool) {
    let seq = match TokenSeq::from_ids(ids, vocab) {
        Ok(s) => s,
        Err(_) => return (None, true),
    };
    let valid = validate(seq.tokens()).valid();
    match parse(&seq, vocab) {
        Ok(p) => (Some(p), !valid),
        Err(_) => (None, true),
    }
}

/// Scores a prediction file against the ground-truth records of one task.
pub fn evaluate_predictions(
    task: Task,
    records: &[AnnotationRecord],
    preds: &[Vec<u32>],
    manifest: &VocabManifest,
    f1_average: F1Average,
) -> Result<EvalReport, PipelineError> {
    if records.len() != preds.len() {
        return Err(PipelineError::Invalid(format!(
            "{} predictions for {} records",
            preds.len(),
            records.len()
        )));
    }
    if records.is_empty() {
        return Err(PipelineError::Invalid("nothing to evaluate".into()));
    }
    let vocab = manifest.vocab()?;
    let wv = manifest.word_vocab()?;

    let mut failures = 0usize;
    let parsed: Vec<Option<ParsedOutput>> = preds
        .iter()
        .map(|ids| {
            let (p, failed) = parse_or_none(ids, &vocab);
            failures += failed as usize;
            p
        })
        .collect();

    let mut report = EvalReport {
        task: Some(task),
        n: records.len(),
        syntactic_failure_rate: failures as f64 / records.len() as f64,
        ..EvalReport::default()
    };

    match task {
        Task::Refexp => {
            let mut pred_boxes = Vec::with_capacity(records.len());
            let mut gt_boxes = Vec::with_capacity(records.len());
            for (rec, p) in records.iter().zip(&parsed) {
                let e = rec
                    .entities
                    .first()
                    .ok_or_else(|| PipelineError::Invalid("refexp record without a box".into()))?;
                gt_boxes.push(BBox::new(e.bbox[0], e.bbox[1], e.bbox[2], e.bbox[3])?);
                pred_boxes.push(p.as_ref().and_then(|p| p.groundings.first()).and_then(|g| g.bbox(&vocab)));
            }
            report.acc_at_05 = Some(acc_at_05(&pred_boxes, &gt_boxes)?);
        }
        Task::PhraseGrounding | Task::GroundedCaptioning | Task::Pretrain => {
            let classes: Vec<String> = SHAPES.iter().map(|s| s.to_string()).collect();
            let mut gt_instances = Vec::with_capacity(records.len());
            let mut pred_instances = Vec::with_capacity(records.len());
            let mut aligned_hits = 0usize;
            let mut aligned_total = 0usize;
            let mut exact = 0usize;
            for (rec, p) in records.iter().zip(&parsed) {
                let gt_ids = encode_strict(&rec.words, &wv)?;
                let mut gts = Vec::new();
                for e in &rec.entities {
                    let b = BBox::new(e.bbox[0], e.bbox[1], e.bbox[2], e.bbox[3])?;
                    if let Some(label) = shape_label(&gt_ids[e.start..e.end], &wv) {
                        gts.push(GtInstance { label, boxes: vec![b] });
                    }
                }
                let mut pis = Vec::new();
                if let Some(p) = p {
                    exact += (p.text == gt_ids) as usize;
                    for g in &p.groundings {
                        if let Some(label) = shape_label(&p.text[g.start..g.end], &wv) {
                            pis.push(PredInstance { label, bbox: g.bbox(&vocab) });
                        }
                    }
                    // Span-identity alignment: walk ground-truth entities in
                    // order, consuming the next predicted group whose words
                    // repeat the entity's words; mis-repeated text disarrays
                    // the alignment and scores as misses.
                    let mut next = 0usize;
                    for e in &rec.entities {
                        aligned_total += 1;
                        let gt_words = &gt_ids[e.start..e.end];
                        let gt_box = BBox::new(e.bbox[0], e.bbox[1], e.bbox[2], e.bbox[3])?;
                        let found = (next..p.groundings.len())
                            .find(|&j| {
                                let g = &p.groundings[j];
                                &p.text[g.start..g.end] == gt_words
                            });
                        if let Some(j) = found {
                            next = j + 1;
                            if let Some(pb) = p.groundings[j].bbox(&vocab) {
                                if iou(&pb, &gt_box) > IOU_THRESHOLD {
                                    aligned_hits += 1;
                                }
                            }
                        }
                    }
                } else {
                    aligned_total += rec.entities.len();
                }
                gt_instances.push(gts);
                pred_instances.push(pis);
            }
            let all = grounding_f1(&pred_instances, &gt_instances, &classes, F1Mode::All, f1_average)?;
            let loc = grounding_f1(&pred_instances, &gt_instances, &classes, F1Mode::Loc, f1_average)?;
            report.f1_all = Some(all.f1);
            report.f1_loc = Some(loc.f1);
            report.exact_text_match = Some(exact as f64 / records.len() as f64);
            if aligned_total > 0 {
                report.acc_at_05 = Some(aligned_hits as f64 / aligned_total as f64);
            }
            if task == Task::GroundedCaptioning || task == Task::Pretrain {
                let cands: Vec<Vec<u32>> =
                    parsed.iter().map(|p| p.as_ref().map(|p| p.text.clone()).unwrap_or_default()).collect();
                let refs: Vec<Vec<u32>> =
                    records.iter().map(|r| encode_strict(&r.words, &wv)).collect::<Result<_, _>>()?;
                report.bleu4 = Some(bleu4(&cands, &refs)?);
            }
        }
        Task::Captioning => {
            let cands: Vec<Vec<u32>> =
                parsed.iter().map(|p| p.as_ref().map(|p| p.text.clone()).unwrap_or_default()).collect();
            let refs: Vec<Vec<u32>> =
                records.iter().map(|r| encode_strict(&r.words, &wv)).collect::<Result<_, _>>()?;
            let exact = cands.iter().zip(&refs).filter(|(c, r)| c == r).count();
            report.exact_text_match = Some(exact as f64 / records.len() as f64);
            report.bleu4 = Some(bleu4(&cands, &refs)?);
        }
        Task::Vqa => {
            let mut total = 0.0;
            for (rec, p) in records.iter().zip(&parsed) {
                let gt: String = rec.answer.join(" ");
                let answers: Vec<String> = vec![gt; 10];
                let pred_text = p
                    .as_ref()
                    .map(|p| wv.decode(&p.text).join(" "))
                    .unwrap_or_default();
                total += vqa_soft_accuracy(&pred_text, &answers)?;
            }
            report.vqa_acc = Some(total / records.len() as f64);
        }
    }
    Ok(report)
}
