use std::path::Path;

use mafn_core::dataset::{self, Generated, MANIFEST};
use mafn_core::metrics;
use mafn_core::synth::{self, Entity, Position, SceneMeta, SceneSpec, Shape};
use mafn_core::text::Vocabulary;
use mafn_core::Error;

fn corpus(seed: u64, n: usize) -> Vec<Generated> {
    dataset::generate(seed, &[("train", n)], &SceneSpec::default(), &Vocabulary::standard()).unwrap()
}

#[test]
fn single_entity_scene_is_named_by_its_shape() {
    let vocab = Vocabulary::standard();
    for seed in 0..20 {
        let s = synth::generate_sample(seed, &SceneSpec::single_entity(48), &vocab).unwrap();
        assert_eq!(s.meta.entities.len(), 1);
        assert_eq!(s.meta.words, vec![s.meta.entities[0].shape.word().to_string()]);
        let mask: Vec<bool> = s.mask_bytes.iter().map(|&b| b == 255).collect();
        assert_eq!(mask, s.meta.entities[0].mask(48));
        assert_eq!((s.pixels.len(), s.mask_bytes.len()), (48 * 48 * 3, 48 * 48));
    }
}

#[test]
fn twin_red_circles_resolve_by_position() {
    let spec = SceneSpec {
        min_entities: 2,
        max_entities: 2,
        colors: vec![0],
        shapes: vec![Shape::Circle],
        positions: vec![Position::Left, Position::Right],
        ..SceneSpec::default()
    };
    let vocab = Vocabulary::standard();
    for seed in 0..20 {
        let s = synth::generate_sample(seed, &spec, &vocab).unwrap();
        let m = &s.meta;
        assert_eq!(&m.words[..2], &["red", "circle"]);
        let t = &m.entities[m.target];
        let other = &m.entities[1 - m.target];
        match m.words[2].as_str() {
            "left" => assert!(t.cx < other.cx),
            "right" => assert!(t.cx > other.cx),
            w => panic!("unexpected position word {w}"),
        }
    }
}

#[test]
fn same_seed_gives_identical_sample() {
    let vocab = Vocabulary::standard();
    let spec = SceneSpec::default();
    for seed in [0, 7, 123456789] {
        let a = synth::generate_sample(seed, &spec, &vocab).unwrap();
        let b = synth::generate_sample(seed, &spec, &vocab).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn every_expression_singles_out_its_target_mask() {
    for g in corpus(3, 200) {
        let m = &g.sample.meta;
        assert_eq!(m.resolve(&m.words), vec![m.target]);
        let mask: Vec<bool> = g.sample.mask_bytes.iter().map(|&b| b == 255).collect();
        let want: Vec<bool> = (0..m.size * m.size)
            .map(|i| {
                let (x, y) = (i % m.size, i / m.size);
                m.entities.iter().position(|e| e.contains(x, y)) == Some(m.target)
            })
            .collect();
        assert_eq!(mask, want);
        assert!(mask.contains(&true));
    }
}

#[test]
fn multi_entity_targets_share_an_attribute_with_a_distractor() {
    for g in corpus(4, 200) {
        let m = &g.sample.meta;
        if m.entities.len() < 2 {
            continue;
        }
        let t = &m.entities[m.target];
        assert!(m
            .entities
            .iter()
            .enumerate()
            .any(|(j, o)| j != m.target && (o.shape == t.shape || o.color == t.color)));
    }
}

#[test]
fn write_then_read_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let items = corpus(5, 10);
    let vocab = Vocabulary::standard();
    dataset::write_dataset(dir.path(), &vocab, &items).unwrap();
    let data = dataset::read_dataset(dir.path()).unwrap();
    assert_eq!(data.vocab, vocab);
    assert_eq!(data.samples.len(), 10);
    for (s, g) in data.samples.iter().zip(&items) {
        assert_eq!(s.image.data(), g.sample.image().data());
        assert_eq!(s.mask.data(), g.sample.mask().data());
        assert_eq!(s.record.tokens, g.sample.tokens);
        assert_eq!(s.record.meta, g.sample.meta);
    }
}

#[test]
fn truncated_mask_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    dataset::write_dataset(dir.path(), &Vocabulary::standard(), &corpus(6, 2)).unwrap();
    let pgm = dir.path().join("train/00001.pgm");
    let bytes = std::fs::read(&pgm).unwrap();
    std::fs::write(&pgm, &bytes[..bytes.len() / 2]).unwrap();
    let err = dataset::read_dataset(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Format { .. }));
    assert!(err.to_string().contains("00001.pgm"), "{err}");
}

#[test]
fn malformed_header_and_checksum_mismatch_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    dataset::write_dataset(dir.path(), &Vocabulary::standard(), &corpus(7, 2)).unwrap();
    let ppm = dir.path().join("train/00000.ppm");
    let mut bytes = std::fs::read(&ppm).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&ppm, &bytes).unwrap();
    let err = dataset::read_dataset(dir.path()).unwrap_err().to_string();
    assert!(err.contains("checksum"), "{err}");

    bytes[1] = b'3';
    std::fs::write(&ppm, &bytes).unwrap();
    let err = dataset::read_ppm(&ppm).unwrap_err().to_string();
    assert!(err.contains("00000.ppm"), "{err}");
}

fn absolutize(dir: &Path) {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).unwrap();
    let mut out = String::new();
    for line in text.lines() {
        let mut rec: dataset::SampleRecord = serde_json::from_str(line).unwrap();
        rec.image = dir.join(&rec.image).to_string_lossy().into_owned();
        rec.mask = dir.join(&rec.mask).to_string_lossy().into_owned();
        out.push_str(&serde_json::to_string(&rec).unwrap());
        out.push('\n');
    }
    std::fs::write(&path, out).unwrap();
}

#[test]
fn absolute_paths_of_a_moved_corpus_resolve_under_the_manifest() {
    let root = tempfile::tempdir().unwrap();
    let old = root.path().join("old");
    dataset::write_dataset(&old, &Vocabulary::standard(), &corpus(8, 3)).unwrap();
    absolutize(&old);
    assert_eq!(dataset::read_dataset(&old).unwrap().samples.len(), 3);
    let new = root.path().join("moved");
    std::fs::rename(&old, &new).unwrap();
    let data = dataset::read_dataset(&new).unwrap();
    assert_eq!(data.samples.len(), 3);
    assert!(data.samples[0].record.image.starts_with(old.to_str().unwrap()));
}

#[test]
fn empty_attribute_sets_are_rejected() {
    let vocab = Vocabulary::standard();
    let no_colors = SceneSpec {
        colors: vec![],
        ..SceneSpec::default()
    };
    let no_shapes = SceneSpec {
        shapes: vec![],
        ..SceneSpec::default()
    };
    assert!(matches!(synth::generate_sample(0, &no_colors, &vocab), Err(Error::Data(_))));
    assert!(matches!(synth::generate_sample(0, &no_shapes, &vocab), Err(Error::Data(_))));
}

fn entity(cx: f64, shape: Shape) -> Entity {
    Entity {
        shape,
        color: 0,
        cx,
        cy: 24.0,
        radius: 6.0,
        orientation: 0.0,
        rgb: [0.8, 0.1, 0.1],
    }
}

fn meta(entities: Vec<Entity>, candidates: Vec<usize>) -> SceneMeta {
    SceneMeta {
        size: 48,
        entities,
        target: candidates[0],
        words: vec![],
        candidates,
        margin: 3.0,
    }
}

/// Best mean IoU over every union of entity masks, scored with the metric code.
fn brute_ceiling(m: &SceneMeta) -> f64 {
    let masks: Vec<Vec<bool>> = m.entities.iter().map(|e| e.mask(m.size)).collect();
    let mut best = 0.0f64;
    for subset in 1u32..(1 << masks.len()) {
        let pred: Vec<bool> = (0..m.size * m.size)
            .map(|p| (0..masks.len()).any(|k| subset >> k & 1 == 1 && masks[k][p]))
            .collect();
        let mean = m
            .candidates
            .iter()
            .map(|&t| metrics::iou(&pred, &masks[t]))
            .sum::<f64>()
            / m.candidates.len() as f64;
        best = best.max(mean);
    }
    best
}

#[test]
fn blind_ceiling_matches_brute_force() {
    let single = meta(vec![entity(24.0, Shape::Circle)], vec![0]);
    assert_eq!(synth::blind_ceiling(&single), 1.0);
    let twins = meta(vec![entity(12.0, Shape::Circle), entity(36.0, Shape::Circle)], vec![0, 1]);
    assert!((synth::blind_ceiling(&twins) - 0.5).abs() < 1e-12);
    for g in corpus(9, 40) {
        let m = &g.sample.meta;
        assert!((synth::blind_ceiling(m) - brute_ceiling(m)).abs() < 1e-12);
    }
}

#[test]
fn default_corpus_leaves_room_for_language() {
    let items = corpus(0, 100);
    let mean = items.iter().map(|g| synth::blind_ceiling(&g.sample.meta)).sum::<f64>() / 100.0;
    assert!(mean < 0.6, "blind ceiling {mean}");
}
