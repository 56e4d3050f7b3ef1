use glagan::nifti_io::{load_volume, save_volume};
use glagan::phantom::{drop_pets, generate_dataset, sample_seed, synthetic_atlas, PhantomSpec};
use glagan::{fuse_patches, normalize_intensity, tile_patches, Dataset, PatchGrid, Volume};
use proptest::prelude::*;

fn volume_strategy() -> impl Strategy<Value = Volume> {
    (1usize..4, 1usize..4, 1usize..4).prop_flat_map(|(a, b, c)| {
        let shape = [2 * a, 2 * b, 2 * c];
        prop::collection::vec(-5.0f32..5.0, shape.iter().product::<usize>())
            .prop_map(move |data| Volume::new(shape, data).unwrap())
    })
}

proptest! {
    #[test]
    fn tile_fuse_round_trip(v in volume_strategy(), k in prop::sample::select(vec![1usize, 2, 4, 8])) {
        let grid = PatchGrid::new(k).unwrap();
        let patches = tile_patches(&v, &grid).unwrap();
        prop_assert_eq!(patches.len(), k);
        let fused = fuse_patches(&patches, &grid).unwrap();
        prop_assert_eq!(fused.data(), v.data());
    }

    #[test]
    fn normalization_is_monotone_and_bounded(v in volume_strategy()) {
        let n = normalize_intensity(&v);
        prop_assert!(n.data().iter().all(|x| (0.0..=1.0).contains(x)));
        for i in 0..v.len() {
            for j in 0..v.len() {
                if v.data()[i] < v.data()[j] {
                    prop_assert!(n.data()[i] <= n.data()[j]);
                }
            }
        }
    }
}

#[test]
fn nifti_round_trip_keeps_data_and_spacing() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = Volume::from_fn([5, 6, 7], |i, j, k| (i * 42 + j * 7 + k) as f32 / 209.0 - 0.3);
    v.set_spacing([1.5, 2.0, 0.75]);
    for name in ["a.nii", "b.nii.gz"] {
        let path = dir.path().join(name);
        save_volume(&v, &path).unwrap();
        let back = load_volume(&path).unwrap();
        assert_eq!(back.data(), v.data());
        assert_eq!(back.spacing(), v.spacing());
    }
}

#[test]
fn phantom_dataset_round_trips_through_disk() {
    let spec = PhantomSpec { shape: [16; 3], r: 6, ..Default::default() };
    let mut samples = generate_dataset(5, 0.4, &spec).unwrap();
    drop_pets(&mut samples, 2, 0).unwrap();
    let (atlas, masks) = synthetic_atlas(&spec).unwrap();
    let ds = Dataset { samples, atlas, masks };
    let dir = tempfile::tempdir().unwrap();
    let seeds: Vec<u64> = (0..5).map(|i| sample_seed(&spec, i)).collect();
    ds.write(dir.path(), Some(&seeds), serde_json::to_value(&spec).unwrap()).unwrap();
    assert!(dir.path().join("sub-0000/mri.nii.gz").is_file());
    assert!(dir.path().join("masks_gm.nii.gz").is_file());
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back, ds);
    assert_eq!(back.paired().count(), 3);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["subjects"][1]["seed"], seeds[1]);
}
