use locret_core::corpus::{gen_corpus, Corpus, GenSpec};
use locret_core::encoders::{load_checkpoint, save_checkpoint, ModelConfig, ModelParams};
use locret_core::retrieval::{
    build_index, cross_modal_from_indexes, evaluate_lcmmr, lcmmr_from_index, load_index, mean_ap, save_index,
    Direction, EmbeddingIndex, IndexEntry, LcmmrReport, Modality, RANKS,
};
use ndarray::Array1;
use std::collections::BTreeSet;

fn setup(n: usize, seed: u64) -> (Corpus, ModelParams) {
    let c = gen_corpus(&GenSpec::standard(n, 3, 0.2, seed)).unwrap();
    let p = ModelParams::init(ModelConfig::desk(c.vocab.len(), c.max_len), seed).unwrap();
    (c, p)
}

#[test]
fn index_cardinalities() {
    let (c, p) = setup(30, 1);
    let lesions: usize = c
        .samples
        .iter()
        .map(|s| s.lesions().collect::<BTreeSet<_>>().len())
        .sum();
    assert_eq!(build_index(&p, &c, Modality::RegionQuery).unwrap().len(), lesions);
    assert_eq!(build_index(&p, &c, Modality::GlobalImage).unwrap().len(), c.len());
    assert_eq!(build_index(&p, &c, Modality::Report).unwrap().len(), c.len());
}

#[test]
fn index_from_reloaded_checkpoint_is_bit_identical() {
    let (c, p) = setup(20, 2);
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("model.ckpt");
    save_checkpoint(&p, &ckpt).unwrap();
    let again = load_checkpoint(&ckpt).unwrap();
    for m in [Modality::RegionQuery, Modality::GlobalImage, Modality::Report] {
        assert_eq!(build_index(&p, &c, m).unwrap(), build_index(&again, &c, m).unwrap());
    }
    let index = build_index(&p, &c, Modality::RegionQuery).unwrap();
    let path = dir.path().join("rq.idx");
    save_index(&index, &path).unwrap();
    let loaded = load_index(&path).unwrap();
    assert_eq!(loaded.entries, index.entries);
    assert_eq!(loaded.vectors, index.vectors.mapv(|v| v as f32 as f64));
}

#[test]
fn duplicated_patient_is_retrieved_first() {
    let (c, p) = setup(30, 3);
    let sick = c.samples.iter().find(|s| s.lesions().count() > 0).unwrap().clone();
    let mut twin = sick.clone();
    twin.id = format!("{}-twin", sick.id);
    let pair = c.with_samples(vec![sick, twin]);
    for mode in [Modality::RegionQuery, Modality::GlobalImage] {
        let r = evaluate_lcmmr(&p, &pair, mode).unwrap();
        assert_eq!(r.region.precision_at(1), Some(100.0));
    }
}

fn assert_rank_monotone(r: &LcmmrReport) {
    for k in RANKS {
        assert!(r.global.precision_at(k) >= r.region.precision_at(k), "{r:?}");
        assert!(r.global.hit_rate_at(k) >= r.region.hit_rate_at(k), "{r:?}");
    }
}

#[test]
fn global_level_dominates_region_level_at_every_cutoff() {
    let (c, p) = setup(60, 4);
    assert_rank_monotone(&evaluate_lcmmr(&p, &c, Modality::RegionQuery).unwrap());
    assert_rank_monotone(&evaluate_lcmmr(&p, &c, Modality::GlobalImage).unwrap());
    assert_rank_monotone(&lcmmr_from_index(&build_index(&p, &c, Modality::RegionQuery).unwrap(), &c).unwrap());
}

#[test]
fn average_precision_can_drop_when_relevance_is_relaxed() {
    let strict = vec![vec![true, false, false, false]];
    let relaxed = vec![vec![true, false, false, true]];
    assert_eq!(mean_ap(&strict).unwrap().map, 100.0);
    assert_eq!(mean_ap(&relaxed).unwrap().map, 75.0);
}

fn constant_index(c: &Corpus, m: Modality) -> EmbeddingIndex {
    let entries = c
        .samples
        .iter()
        .map(|s| IndexEntry {
            id: s.id.clone(),
            sample_id: s.id.clone(),
            condition: None,
            findings: s.findings.clone(),
        })
        .collect();
    EmbeddingIndex::from_rows(m, entries, vec![Array1::ones(4); c.len()]).unwrap()
}

#[test]
fn constant_embeddings_follow_the_id_tie_break() {
    let (c, _) = setup(10, 5);
    let images = constant_index(&c, Modality::GlobalImage);
    let reports = constant_index(&c, Modality::Report);
    let r = cross_modal_from_indexes(&images, &reports, &c.samples, Direction::Image2Report).unwrap();
    // Every gallery is sorted by id, so query i finds its pair at rank i + 1.
    assert_eq!(r.instance.hit_rate_at(1), Some(10.0));
    assert_eq!(r.instance.hit_rate_at(5), Some(50.0));
    assert_eq!(r.instance.hit_rate_at(10), Some(100.0));
}

#[test]
fn single_item_gallery_is_always_a_hit() {
    let (c, p) = setup(5, 6);
    let one = c.with_samples(vec![c.samples[0].clone()]);
    let images = build_index(&p, &one, Modality::GlobalImage).unwrap();
    let reports = build_index(&p, &one, Modality::Report).unwrap();
    for d in [Direction::Image2Report, Direction::Report2Image] {
        let r = cross_modal_from_indexes(&images, &reports, &one.samples, d).unwrap();
        assert_eq!(r.instance.hit_rate_at(1), Some(100.0));
    }
}
