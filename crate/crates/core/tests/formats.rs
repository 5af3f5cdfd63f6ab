use patchdiff::ct::Sinogram;
use patchdiff::denoiser::{ConvDenoiserConfig, Tensor};
use patchdiff::grid::Volume;
use patchdiff::io::{self, Checkpoint};
use patchdiff::training::{train, Dataset, TrainConfig, TrainState};
use proptest::prelude::*;

fn f32s(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()).prop_map(f64::from), n)
}

fn volume() -> impl Strategy<Value = Volume> {
    (1usize..5, 1usize..5, 1usize..5)
        .prop_flat_map(|(a, b, c)| f32s(a * b * c).prop_map(move |d| Volume::from_vec([a, b, c], d).unwrap()))
}

fn sinogram() -> impl Strategy<Value = Sinogram> {
    (1usize..4, 1usize..6, 1usize..3).prop_flat_map(|(v, d, z)| {
        f32s(v * d * z).prop_map(move |data| {
            let angles = (0..v).map(|i| (i as f32 * 0.37) as f64).collect();
            Sinogram::from_vec(angles, d, z, data).unwrap()
        })
    })
}

fn tensor() -> impl Strategy<Value = Tensor> {
    ("[a-z.0-9]{1,12}", prop::collection::vec(1usize..4, 0..4)).prop_flat_map(|(name, shape)| {
        let n = shape.iter().product();
        f32s(n).prop_map(move |data| Tensor { name: name.clone(), shape: shape.clone(), data })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn volume_round_trip(v in volume()) {
        let bytes = io::encode_volume(&v).unwrap();
        let back = io::decode_volume(&bytes).unwrap();
        prop_assert_eq!(&back, &v);
        prop_assert_eq!(io::encode_volume(&back).unwrap(), bytes);
    }

    #[test]
    fn sinogram_round_trip(s in sinogram()) {
        let bytes = io::encode_sinogram(&s).unwrap();
        let back = io::decode_sinogram(&bytes).unwrap();
        prop_assert_eq!(&back, &s);
        prop_assert_eq!(io::encode_sinogram(&back).unwrap(), bytes);
    }

    #[test]
    fn checkpoint_round_trip(raw in prop::collection::vec(tensor(), 0..4), ema in prop::collection::vec(tensor(), 0..3), config in "[ -~]{0,40}") {
        let ck = Checkpoint { config, raw, ema };
        let bytes = io::encode_checkpoint(&ck).unwrap();
        let back = io::decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(io::encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn truncated_files_are_rejected(v in volume(), cut in 1usize..20) {
        let bytes = io::encode_volume(&v).unwrap();
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(io::decode_volume(&bytes[..keep]).is_err());
    }
}

#[test]
fn files_on_disk_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let v = Volume::from_fn([3, 2, 4], |x, y, z| (x as f32 * 0.25 - y as f32 + z as f32 * 1.5) as f64);
    let p = dir.path().join("v.pdv");
    io::save_volume(&p, &v).unwrap();
    assert_eq!(io::load_volume(&p).unwrap(), v);
    let raw = dir.path().join("v.raw");
    std::fs::write(&raw, &std::fs::read(&p).unwrap()[20..]).unwrap();
    assert_eq!(io::import_raw(&raw, [3, 2, 4]).unwrap(), v);
    assert!(io::import_raw(&raw, [3, 2, 5]).is_err());
    assert!(io::load_volume(&dir.path().join("missing.pdv")).unwrap_err().is_io());
}

fn tiny() -> TrainConfig {
    TrainConfig {
        batch: 4,
        patch_size: 2,
        patches_per_volume: 2,
        net: ConvDenoiserConfig { width: 4, depth: 3, kernel: 3, embed_dim: 4, seed: 2, global_context: true },
        ..TrainConfig::default()
    }
}

#[test]
fn checkpoint_preserves_training_state_and_resume_is_bit_identical() {
    let vols: Vec<Volume> = (0..3).map(|s| Volume::from_fn([4, 4, 4], |x, y, z| ((x + 2 * y + s * z) % 5) as f64 / 5.0)).collect();
    let ds = Dataset::new(&vols, 2).unwrap();

    let straight_cfg = TrainConfig { steps: 6, ..tiny() };
    let mut straight = TrainState::new(straight_cfg.net.clone()).unwrap();
    train(&ds, &straight_cfg, &mut straight, |_, _| Ok(())).unwrap();

    let half_cfg = TrainConfig { steps: 3, ..tiny() };
    let mut half = TrainState::new(half_cfg.net.clone()).unwrap();
    train(&ds, &half_cfg, &mut half, |_, _| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.pdck");
    io::save_checkpoint(&path, &Checkpoint::from_state(&half, "patch_size = 2\n")).unwrap();
    let ck = io::load_checkpoint(&path).unwrap();
    assert_eq!(ck.config, "patch_size = 2\n");
    let mut resumed = ck.to_state(&half_cfg.net).unwrap();
    assert_eq!(resumed.step, 3);
    assert_eq!(resumed.net.params(), half.net.params());
    assert_eq!(resumed.ema, half.ema);
    assert_eq!(resumed.adam_v, half.adam_v);
    train(&ds, &straight_cfg, &mut resumed, |_, _| Ok(())).unwrap();

    assert_eq!(resumed.step, 6);
    assert_eq!(resumed.net.params(), straight.net.params());
    assert_eq!(resumed.ema, straight.ema);
    assert_eq!(resumed.adam_m, straight.adam_m);
}
