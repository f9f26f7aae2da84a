mod common;

use std::sync::Arc;

use simreal::datasets::{preprocess_file, DatasetKind, DatasetSpec, Split};
use simreal::patch_index::*;
use simreal::Error;

use common::to_vec;

#[test]
fn stored_patches_are_their_own_nearest_neighbours() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = common::fixture(tmp.path(), 1, 3, 64, 2);
    let m = common::matcher(&fx);
    let index = m.index().clone();
    assert_eq!(index.len(), 3 * PATCHES_PER_IMAGE);
    for id in 0..index.len() {
        let hit = index.query_nearest(index.vector(id)).unwrap();
        assert_eq!(hit.distance, 0.0);
        assert_eq!(index.vector(hit.id), index.vector(id));
    }
}

#[test]
fn matching_a_real_image_returns_its_own_pixels() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = common::fixture(tmp.path(), 1, 2, 64, 3);
    let m = common::matcher(&fx);
    let real = DatasetSpec::new(&fx.layout.real, DatasetKind::Real, Split::Train);
    let (_, path) = real.list_images().unwrap().into_iter().next().unwrap();
    let img = preprocess_file(&path, fx.geometry.image).unwrap();
    let patches = extract_patch_batch(&img.batched().unwrap(), &fx.geometry).unwrap();
    let before = m.index().query_count();
    let matches = m.match_batch(&patches).unwrap();
    assert_eq!(m.index().query_count() - before, PATCHES_PER_IMAGE as u64);
    for (i, hit) in matches.iter().enumerate() {
        assert_eq!(hit.nearest.distance, 0.0);
        assert_eq!(to_vec(&hit.pixels), to_vec(&patches.get(i).unwrap()));
    }
}

#[test]
fn index_persists_and_reloads() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = common::fixture(tmp.path(), 1, 2, 64, 4);
    let m = common::matcher(&fx);
    let dir = tmp.path().join("index");
    m.index().save(&dir).unwrap();
    let back = PatchIndex::load(&dir).unwrap();
    assert_eq!(back.len(), m.index().len());
    assert_eq!(back.meta(), m.index().meta());
    assert_eq!(
        serde_json::to_string(&back.manifest()).unwrap(),
        serde_json::to_string(&m.index().manifest()).unwrap()
    );
    for id in 0..back.len() {
        assert_eq!(back.vector(id), m.index().vector(id));
        assert_eq!(back.provenance(id), m.index().provenance(id));
    }
}

#[test]
fn matcher_refuses_a_different_backbone() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = common::fixture(tmp.path(), 1, 1, 64, 5);
    let m = common::matcher(&fx);
    let other = Vgg16Features::random(common::BACKBONE_SEED + 1).unwrap();
    assert!(matches!(PatchMatcher::new(other, Arc::clone(m.index())), Err(Error::Config(_))));
}

#[test]
fn backbone_is_rebuilt_from_the_index_identifier() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = common::fixture(tmp.path(), 1, 1, 64, 6);
    let m = common::matcher(&fx);
    let vgg = Vgg16Features::for_index(&m.index().meta().backbone_id, None).unwrap();
    assert_eq!(vgg.id(), m.backbone().id());
    assert!(PatchMatcher::new(vgg, Arc::clone(m.index())).is_ok());
}
