//! Synthetic grounded scenes: colored shapes on a blank canvas, with derived
//! annotations for every task, and the grid-feature encoding the model sees.
//!
//! Object boxes snap to the feature-grid lattice and never overlap, so the
//! grid features determine every box exactly; scene -> annotation mappings
//! are deterministic functions of the sampled objects.

use rand::seq::index::sample as index_sample;
use rand::Rng;

use crate::builder::Task;
use crate::data::{AnnotationRecord, EntityRecord, ObjectRecord, SceneRecord};
use crate::features::FeatureGrid;
use crate::vocab::{BBox, WordVocab};

pub const SHAPES: [&str; 5] = ["circle", "square", "triangle", "star", "diamond"];
pub const SHAPES_PLURAL: [&str; 5] = ["circles", "squares", "triangles", "stars", "diamonds"];
pub const COLORS: [&str; 6] = ["red", "green", "blue", "yellow", "purple", "orange"];
pub const COUNT_WORDS: [&str; 5] = ["zero", "one", "two", "three", "four"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneObject {
    pub shape: usize,
    pub color: usize,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: u64,
    pub objects: Vec<SceneObject>,
}

#[derive(Debug, Clone, Copy)]
pub struct GenConfig {
    /// Lattice resolution; boxes have corners at multiples of `1 / grid`.
    pub grid: usize,
    pub max_objects: usize,
    /// Largest object extent, in cells.
    pub max_span_cells: usize,
    /// Counting questions emitted per scene.
    pub count_questions: usize,
    /// Also ask "what color is the <shape>" when some shape is unique.
    pub color_questions: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self { grid: 6, max_objects: 3, max_span_cells: 3, count_questions: 1, color_questions: true }
    }
}

/// Samples 1..=max_objects non-overlapping lattice-aligned objects with
/// pairwise-distinct (shape, color) attributes, and derives annotation
/// records for every task. Deterministic given the generator state.
pub fn generate_scene<R: Rng>(rng: &mut R, cfg: &GenConfig, scene_id: u64) -> (Scene, Vec<AnnotationRecord>) {
    let g = cfg.grid;
    let want = rng.random_range(1..=cfg.max_objects);
    let pair_ids = index_sample(rng, SHAPES.len() * COLORS.len(), want.min(SHAPES.len() * COLORS.len()));

    let mut occupied = vec![false; g * g];
    let mut objects = Vec::new();
    for pair in pair_ids.iter() {
        let mut placed = None;
        for _ in 0..50 {
            let w = rng.random_range(1..=cfg.max_span_cells.min(g));
            let h = rng.random_range(1..=cfg.max_span_cells.min(g));
            let x0 = rng.random_range(0..=g - w);
            let y0 = rng.random_range(0..=g - h);
            let cells: Vec<usize> =
                (y0..y0 + h).flat_map(|y| (x0..x0 + w).map(move |x| y * g + x)).collect();
            if cells.iter().all(|&c| !occupied[c]) {
                for &c in &cells {
                    occupied[c] = true;
                }
                placed = Some((x0, y0, w, h));
                break;
            }
        }
        let Some((x0, y0, w, h)) = placed else { continue };
        let bbox = BBox::new(
            x0 as f64 / g as f64,
            y0 as f64 / g as f64,
            (x0 + w) as f64 / g as f64,
            (y0 + h) as f64 / g as f64,
        )
        .expect("lattice boxes are valid");
        objects.push(SceneObject { shape: pair / COLORS.len(), color: pair % COLORS.len(), bbox });
    }
    let scene = Scene { id: scene_id, objects };
    let annotations = annotate(&scene, cfg, rng);
    (scene, annotations)
}

fn caption_order(objects: &[SceneObject]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..objects.len()).collect();
    order.sort_by(|&a, &b| {
        objects[a]
            .bbox
            .x_min
            .total_cmp(&objects[b].bbox.x_min)
            .then(objects[a].bbox.y_min.total_cmp(&objects[b].bbox.y_min))
            .then(a.cmp(&b))
    });
    order
}

fn annotate<R: Rng>(scene: &Scene, cfg: &GenConfig, rng: &mut R) -> Vec<AnnotationRecord> {
    let mut records = Vec::new();
    let id = scene.id;

    // Left-to-right caption "a red circle . a blue square ." with one entity
    // per object phrase.
    let mut caption: Vec<String> = Vec::new();
    let mut entities: Vec<EntityRecord> = Vec::new();
    for &oi in &caption_order(&scene.objects) {
        let o = &scene.objects[oi];
        let start = caption.len();
        caption.extend(["a".to_string(), COLORS[o.color].to_string(), SHAPES[o.shape].to_string()]);
        entities.push(EntityRecord { start, end: caption.len(), bbox: o.bbox.coords() });
        caption.push(".".to_string());
    }

    for task in [Task::GroundedCaptioning, Task::PhraseGrounding, Task::Pretrain] {
        records.push(AnnotationRecord {
            scene_id: id,
            task,
            words: caption.clone(),
            entities: entities.clone(),
            answer: vec![],
        });
    }
    records.push(AnnotationRecord {
        scene_id: id,
        task: Task::Captioning,
        words: caption.clone(),
        entities: vec![],
        answer: vec![],
    });

    // One query per object; distinct (color, shape) pairs make each query
    // unambiguous.
    for o in &scene.objects {
        let words = vec!["the".to_string(), COLORS[o.color].to_string(), SHAPES[o.shape].to_string()];
        records.push(AnnotationRecord {
            scene_id: id,
            task: Task::Refexp,
            words,
            entities: vec![EntityRecord { start: 0, end: 3, bbox: o.bbox.coords() }],
            answer: vec![],
        });
    }

    for _ in 0..cfg.count_questions {
        let shape = rng.random_range(0..SHAPES.len());
        let count = scene.objects.iter().filter(|o| o.shape == shape).count();
        records.push(AnnotationRecord {
            scene_id: id,
            task: Task::Vqa,
            words: vec!["how".into(), "many".into(), SHAPES_PLURAL[shape].into()],
            entities: vec![],
            answer: vec![COUNT_WORDS[count].to_string()],
        });
    }
    if cfg.color_questions {
        let unique: Vec<&SceneObject> = scene
            .objects
            .iter()
            .filter(|o| scene.objects.iter().filter(|p| p.shape == o.shape).count() == 1)
            .collect();
        if !unique.is_empty() {
            let o = unique[rng.random_range(0..unique.len())];
            records.push(AnnotationRecord {
                scene_id: id,
                task: Task::Vqa,
                words: vec!["what".into(), "color".into(), "is".into(), "the".into(), SHAPES[o.shape].into()],
                entities: vec![],
                answer: vec![COLORS[o.color].to_string()],
            });
        }
    }
    records
}

/// Per-cell feature layout: shape one-hot, color one-hot, background flag,
/// then the cell center's normalized coordinates.
pub fn feature_dim() -> usize {
    SHAPES.len() + COLORS.len() + 3
}

/// Rasterizes a scene onto an `h x w` grid. A cell carries the one-hot
/// class/color of the object covering its center (later objects on top) or
/// the background code, plus its own normalized center coordinates.
pub fn scene_to_features(scene: &Scene, h: usize, w: usize) -> FeatureGrid {
    let dim = feature_dim();
    let mut grid = FeatureGrid::zeros(h, w, dim);
    let bg = SHAPES.len() + COLORS.len();
    for y in 0..h {
        for x in 0..w {
            let cx = (x as f64 + 0.5) / w as f64;
            let cy = (y as f64 + 0.5) / h as f64;
            let covering = scene
                .objects
                .iter()
                .rev()
                .find(|o| o.bbox.x_min <= cx && cx < o.bbox.x_max && o.bbox.y_min <= cy && cy < o.bbox.y_max);
            let cell = grid.cell_mut(y, x);
            match covering {
                Some(o) => {
                    cell[o.shape] = 1.0;
                    cell[SHAPES.len() + o.color] = 1.0;
                }
                None => cell[bg] = 1.0,
            }
            cell[bg + 1] = cx;
            cell[bg + 2] = cy;
        }
    }
    grid
}

impl Scene {
    pub fn to_record(&self) -> SceneRecord {
        SceneRecord {
            scene_id: self.id,
            objects: self
                .objects
                .iter()
                .map(|o| ObjectRecord {
                    shape: SHAPES[o.shape].into(),
                    color: COLORS[o.color].into(),
                    bbox: o.bbox.coords(),
                })
                .collect(),
        }
    }

    pub fn from_record(rec: &SceneRecord) -> Option<Scene> {
        let mut objects = Vec::with_capacity(rec.objects.len());
        for o in &rec.objects {
            let shape = SHAPES.iter().position(|s| *s == o.shape)?;
            let color = COLORS.iter().position(|c| *c == o.color)?;
            let bbox = BBox::new(o.bbox[0], o.bbox[1], o.bbox[2], o.bbox[3]).ok()?;
            objects.push(SceneObject { shape, color, bbox });
        }
        Some(Scene { id: rec.scene_id, objects })
    }
}

/// The toy word list: scene vocabulary, question/answer words, task-prefix
/// words, and filler, sized so `n_text` lands on 64.
pub fn toy_words() -> Vec<String> {
    let mut words: Vec<&str> = Vec::new();
    words.extend(SHAPES);
    words.extend(SHAPES_PLURAL);
    words.extend(COLORS);
    words.extend(["a", "the", "."]);
    words.extend(["how", "many", "what", "color", "is"]);
    words.extend(COUNT_WORDS);
    words.extend(["visual", "grounding:", "phrase", "grounded", "captioning:", "image", "question", "answering:"]);
    words.push("donut");
    words.extend([
        "and", "of", "on", "in", "near", "above", "below", "left", "right", "top", "bottom", "small", "large",
        "cat", "dog", "tree", "house", "car", "boat", "sun", "moon", "fish",
    ]);
    debug_assert_eq!(words.len(), 60);
    debug_assert_eq!(
        words.iter().collect::<std::collections::HashSet<_>>().len(),
        words.len(),
        "duplicate toy words"
    );
    words.into_iter().map(String::from).collect()
}

/// Word vocabulary over [`toy_words`]; `n_text` = 64.
pub fn toy_word_vocab() -> WordVocab {
    let words = toy_words();
    let n_text = words.len() as u32 + crate::vocab::NUM_CONTROL;
    WordVocab::new(words, n_text).expect("toy word list is sized for its vocabulary")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn generation_is_deterministic() {
        let cfg = GenConfig::default();
        let mut a = ChaCha8Rng::seed_from_u64(42);
        let mut b = ChaCha8Rng::seed_from_u64(42);
        let (sa, ra) = generate_scene(&mut a, &cfg, 7);
        let (sb, rb) = generate_scene(&mut b, &cfg, 7);
        assert_eq!(sa, sb);
        assert_eq!(ra, rb);
    }

    #[test]
    fn entity_boxes_equal_object_boxes() {
        let cfg = GenConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for id in 0..50 {
            let (scene, records) = generate_scene(&mut rng, &cfg, id);
            let gc = records
                .iter()
                .find(|r| r.task == Task::GroundedCaptioning)
                .expect("grounded captioning record");
            assert_eq!(gc.entities.len(), scene.objects.len());
            for e in &gc.entities {
                assert!(
                    scene.objects.iter().any(|o| o.bbox.coords() == e.bbox),
                    "entity box {:?} not among objects",
                    e.bbox
                );
            }
        }
    }

    #[test]
    fn refexp_queries_are_unambiguous() {
        let cfg = GenConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for id in 0..100 {
            let (scene, records) = generate_scene(&mut rng, &cfg, id);
            for r in records.iter().filter(|r| r.task == Task::Refexp) {
                // Brute-force the query predicate over every scene object.
                let color = COLORS.iter().position(|c| *c == r.words[1]).unwrap();
                let shape = SHAPES.iter().position(|s| *s == r.words[2]).unwrap();
                let satisfying: Vec<_> = scene
                    .objects
                    .iter()
                    .filter(|o| o.color == color && o.shape == shape)
                    .collect();
                assert_eq!(satisfying.len(), 1, "scene {id}: query {:?}", r.words);
                assert_eq!(satisfying[0].bbox.coords(), r.entities[0].bbox);
            }
        }
    }

    #[test]
    fn objects_never_overlap() {
        let cfg = GenConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for id in 0..100 {
            let (scene, _) = generate_scene(&mut rng, &cfg, id);
            for (i, a) in scene.objects.iter().enumerate() {
                for b in &scene.objects[i + 1..] {
                    assert_eq!(crate::metrics::iou(&a.bbox, &b.bbox), 0.0);
                }
            }
        }
    }

    #[test]
    fn empty_scene_is_all_background() {
        let scene = Scene { id: 0, objects: vec![] };
        let grid = scene_to_features(&scene, 4, 4);
        let bg = SHAPES.len() + COLORS.len();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(grid.cell(y, x)[bg], 1.0);
            }
        }
    }

    #[test]
    fn full_canvas_object_covers_every_cell() {
        let scene = Scene {
            id: 0,
            objects: vec![SceneObject { shape: 2, color: 1, bbox: BBox::new(0.0, 0.0, 1.0, 1.0).unwrap() }],
        };
        let grid = scene_to_features(&scene, 4, 4);
        for y in 0..4 {
            for x in 0..4 {
                let cell = grid.cell(y, x);
                assert_eq!(cell[2], 1.0);
                assert_eq!(cell[SHAPES.len() + 1], 1.0);
                assert_eq!(cell[SHAPES.len() + COLORS.len()], 0.0);
            }
        }
    }

    #[test]
    fn containment_matches_geometric_oracle() {
        // Box over x cells 2..4 and y cells 1..4 on an 8x8 grid: exactly
        // those 6 cells are non-background.
        let bbox = BBox::new(2.0 / 8.0, 1.0 / 8.0, 4.0 / 8.0, 4.0 / 8.0).unwrap();
        let scene = Scene { id: 0, objects: vec![SceneObject { shape: 0, color: 0, bbox }] };
        let grid = scene_to_features(&scene, 8, 8);
        let bg = SHAPES.len() + COLORS.len();
        let mut covered = 0;
        for y in 0..8 {
            for x in 0..8 {
                let cx = (x as f64 + 0.5) / 8.0;
                let cy = (y as f64 + 0.5) / 8.0;
                let inside =
                    bbox.x_min <= cx && cx < bbox.x_max && bbox.y_min <= cy && cy < bbox.y_max;
                let is_object = grid.cell(y, x)[bg] == 0.0;
                assert_eq!(inside, is_object, "cell ({y},{x})");
                covered += is_object as usize;
            }
        }
        assert_eq!(covered, 6);
    }

    #[test]
    fn cell_coordinates_are_populated() {
        let scene = Scene { id: 0, objects: vec![] };
        let grid = scene_to_features(&scene, 2, 2);
        let bg = SHAPES.len() + COLORS.len();
        assert_eq!(grid.cell(0, 0)[bg + 1], 0.25);
        assert_eq!(grid.cell(0, 0)[bg + 2], 0.25);
        assert_eq!(grid.cell(1, 1)[bg + 1], 0.75);
        assert_eq!(grid.cell(1, 1)[bg + 2], 0.75);
    }

    #[test]
    fn scene_record_roundtrip() {
        let cfg = GenConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (scene, _) = generate_scene(&mut rng, &cfg, 9);
        let back = Scene::from_record(&scene.to_record()).unwrap();
        assert_eq!(back, scene);
    }

    #[test]
    fn toy_vocab_covers_annotation_words() {
        let wv = toy_word_vocab();
        assert_eq!(wv.n_text(), 64);
        let cfg = GenConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for id in 0..30 {
            let (_, records) = generate_scene(&mut rng, &cfg, id);
            for r in records {
                for w in r.words.iter().chain(r.answer.iter()) {
                    assert!(wv.lookup(w).is_some(), "word {w:?} missing");
                }
            }
        }
    }
}
