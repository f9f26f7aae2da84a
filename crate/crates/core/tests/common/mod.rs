#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use candle_core::{Device, Tensor};
use simreal::datasets::{load_paired_split, DatasetKind, DatasetSpec, PairedSplit, Resolution, Split};
use simreal::fixtures::{write_fixture_datasets, FixtureLayout};
use simreal::patch_index::{build_index, PatchGeometry, PatchMatcher, Vgg16Features};

pub const BACKBONE_SEED: u64 = 7;

pub fn randn(seed: u64, shape: &[usize], std: f32) -> Tensor {
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0f32, std).unwrap();
    let n: usize = shape.iter().product();
    let v: Vec<f32> = (0..n).map(|_| dist.sample(&mut rng)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn to_vec(t: &Tensor) -> Vec<f32> {
    t.flatten_all().unwrap().to_vec1::<f32>().unwrap()
}

pub struct Fixture {
    pub layout: FixtureLayout,
    pub split: PairedSplit,
    pub geometry: PatchGeometry,
}

pub fn fixture(root: &Path, pairs: usize, real: usize, side: usize, seed: u64) -> Fixture {
    let res = Resolution::square(side);
    let layout = write_fixture_datasets(root, Split::Train, pairs, real, res, seed).unwrap();
    let split = load_paired_split(
        &DatasetSpec::new(&layout.synthetic, DatasetKind::Synthetic, Split::Train),
        &DatasetSpec::new(&layout.enhanced, DatasetKind::Enhanced, Split::Train),
        Split::Train,
    )
    .unwrap();
    Fixture {
        layout,
        split,
        geometry: PatchGeometry::scaled(res).unwrap(),
    }
}

pub fn matcher(fx: &Fixture) -> PatchMatcher {
    let vgg = Vgg16Features::random(BACKBONE_SEED).unwrap();
    let index = build_index(
        &DatasetSpec::new(&fx.layout.real, DatasetKind::Real, Split::Train),
        &vgg,
        &fx.geometry,
    )
    .unwrap();
    PatchMatcher::new(vgg, Arc::new(index)).unwrap()
}
