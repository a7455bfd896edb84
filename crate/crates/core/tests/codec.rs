use msfan_core::cubefile::{decode_cube, encode_cube, load_cube, save_cube, DType};
use msfan_core::dataset::{min_adjacent_correlation, split_sizes, synth_dataset, Dataset, Split};
use msfan_core::metrics::{psnr, psnr_live_mosaic};
use msfan_core::mosaic::*;
use msfan_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_cube(c: usize, h: usize, w: usize, seed: u64) -> SpectralCube {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SpectralCube::new(c, h, w, (0..c * h * w).map(|_| rng.gen()).collect()).unwrap()
}

fn shuffled_layout(seed: u64) -> MosaicLayout {
    use rand::seq::SliceRandom;
    let mut cells: Vec<Cell> = (0..BANDS).map(Cell::Band).collect();
    cells.extend([Cell::Dead, Cell::Dead]);
    cells.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut table = [[Cell::Dead; PATTERN]; PATTERN];
    for (i, c) in cells.into_iter().enumerate() {
        table[i / PATTERN][i % PATTERN] = c;
    }
    MosaicLayout::new(table).unwrap()
}

#[test]
fn sensor_geometries() {
    let layout = MosaicLayout::default();
    let m = cube_to_mosaic(&SpectralCube::zeros(14, 240, 480), &layout).unwrap();
    assert_eq!((m.height, m.width), (960, 1920));
    let m = cube_to_mosaic(&SpectralCube::zeros(14, 80, 160), &layout).unwrap();
    assert_eq!((m.height, m.width), (320, 640));
    let lr = downsample_cube(&SpectralCube::zeros(14, 240, 480), 3).unwrap();
    assert_eq!(lr.dims(), (14, 80, 160));
}

#[test]
fn constant_cube_fills_live_cells() {
    let layout = MosaicLayout::default();
    let m = cube_to_mosaic(&SpectralCube::filled(14, 3, 5, 0.7), &layout).unwrap();
    for y in 0..m.height {
        for x in 0..m.width {
            let want = if layout.is_dead(y % 4, x % 4) { 0.0 } else { 0.7 };
            assert_eq!(m.at(y, x), want);
        }
    }
}

#[test]
fn mosaic_to_cube_rejects_unaligned_dims() {
    let m = MosaicImage::new(6, 8, vec![0.0; 48]).unwrap();
    assert!(matches!(mosaic_to_cube(&m, &MosaicLayout::default()), Err(Error::Contract(_))));
}

#[test]
fn layout_needs_exactly_two_dead_cells() {
    let three = "0 1 2 3\n4 5 6 7\n8 9 10 11\n12 x x x\n";
    assert!(MosaicLayout::parse(three).is_err());
    let dup = "0 1 2 3\n4 5 6 7\n8 9 10 11\n12 12 x x\n";
    assert!(MosaicLayout::parse(dup).is_err());
    let ok = "x 1 2 3\n4 5 6 7\n8 9 10 11\n12 0 13 x\n";
    assert!(MosaicLayout::parse(ok).is_ok());
}

#[test]
fn layout_text_round_trips() {
    let l = shuffled_layout(4);
    assert_eq!(MosaicLayout::parse(&l.to_string()).unwrap(), l);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn codec_is_exact_inverse(h in 1usize..7, w in 1usize..7, seed in any::<u64>(), lseed in any::<u64>()) {
        let layout = shuffled_layout(lseed);
        let cube = random_cube(BANDS, h, w, seed);
        let m = cube_to_mosaic(&cube, &layout).unwrap();
        let back = mosaic_to_cube(&m, &layout).unwrap();
        prop_assert_eq!(&back, &cube);
        for y in 0..m.height {
            for x in 0..m.width {
                if layout.is_dead(y % 4, x % 4) {
                    prop_assert_eq!(m.at(y, x), 0.0);
                }
            }
        }
    }

    #[test]
    fn relabelled_layout_with_permuted_channels_gives_same_mosaic(seed in any::<u64>(), pseed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let layout = MosaicLayout::default();
        let mut perm: Vec<usize> = (0..BANDS).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(pseed));
        let cube = random_cube(BANDS, 3, 4, seed);
        // channel perm[k] of `moved` holds channel k of `cube`
        let mut moved = SpectralCube::zeros(BANDS, 3, 4);
        for k in 0..BANDS {
            moved.plane_mut(perm[k]).copy_from_slice(cube.plane(k));
        }
        let relabelled = layout.relabel(&perm).unwrap();
        prop_assert_eq!(
            cube_to_mosaic(&cube, &layout).unwrap(),
            cube_to_mosaic(&moved, &relabelled).unwrap()
        );
    }

    #[test]
    fn cube_file_round_trip(c in 1usize..15, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let cube = random_cube(c, h, w, seed);
        let bytes = encode_cube(&cube, DType::F64).unwrap();
        prop_assert_eq!(decode_cube(&bytes).unwrap(), cube);
    }
}

#[test]
fn hundred_cubes_round_trip_bit_exactly() {
    let layout = MosaicLayout::default();
    for seed in 0..100 {
        let cube = random_cube(BANDS, 5, 7, seed);
        let back = mosaic_to_cube(&cube_to_mosaic(&cube, &layout).unwrap(), &layout).unwrap();
        assert!(back.data.iter().zip(&cube.data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn cube_psnr_equals_live_mosaic_psnr() {
    for seed in 0..20 {
        let layout = shuffled_layout(seed);
        let a = random_cube(BANDS, 6, 5, seed);
        let b = random_cube(BANDS, 6, 5, seed + 1000);
        let cube = psnr(&a, &b, 1.0).unwrap();
        let ma = cube_to_mosaic(&a, &layout).unwrap();
        let mb = cube_to_mosaic(&b, &layout).unwrap();
        let live = psnr_live_mosaic(&ma, &mb, &layout, 1.0).unwrap();
        assert!((cube - live).abs() < 1e-10, "{cube} vs {live}");
    }
}

#[test]
fn downsample_properties() {
    let c = SpectralCube::filled(14, 6, 9, 0.25);
    let d = downsample_cube(&c, 3).unwrap();
    assert_eq!(d.dims(), (14, 2, 3));
    assert!(d.data.iter().all(|&v| v == 0.25));
    let r = random_cube(14, 12, 24, 3);
    assert!((downsample_cube(&r, 3).unwrap().mean() - r.mean()).abs() < 1e-12);
    assert!(downsample_cube(&r, 5).is_err());
}

#[test]
fn bicubic_reproduces_constants_and_smooth_data() {
    let c = SpectralCube::filled(14, 4, 5, 0.6);
    let up = bicubic_upsample_cube(&c, 3);
    assert_eq!(up.dims(), (14, 12, 15));
    assert!(up.data.iter().all(|&v| (v - 0.6).abs() < 1e-12));

    // linear data is reproduced exactly away from the clamped border
    let (h, w) = (8, 10);
    let f = |y: f64, x: f64| 0.1 + 0.03 * y + 0.02 * x;
    let mut ramp = SpectralCube::zeros(1, h, w);
    for y in 0..h {
        for x in 0..w {
            ramp.plane_mut(0)[y * w + x] = f(y as f64, x as f64);
        }
    }
    let up = bicubic_upsample_cube(&ramp, 3);
    for y in 6..3 * h - 6 {
        for x in 6..3 * w - 6 {
            let (sy, sx) = ((y as f64 + 0.5) / 3.0 - 0.5, (x as f64 + 0.5) / 3.0 - 0.5);
            assert!((up.at(0, y, x) - f(sy, sx)).abs() < 1e-12, "({y}, {x})");
        }
    }
}

#[test]
fn cube_files_handle_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.msic");
    let cube = random_cube(14, 4, 4, 1);
    save_cube(&cube, &path).unwrap();
    assert_eq!(load_cube(&path).unwrap(), cube);
    let bytes = std::fs::read(&path).unwrap();
    assert!(matches!(decode_cube(&bytes[..bytes.len() - 3]), Err(Error::Truncated { .. })));
    assert!(matches!(decode_cube(b"NOPE\x01\x00"), Err(Error::Format(_)) | Err(Error::Truncated { .. })));
    assert!(matches!(load_cube(dir.path().join("missing.msic")), Err(Error::Io { .. })));

    let u16s = SpectralCube::new(1, 1, 2, vec![1.0, 0.0]).unwrap();
    let bytes = encode_cube(&u16s, DType::U16).unwrap();
    assert_eq!(decode_cube(&bytes).unwrap().data, vec![1.0, 0.0]);
}

#[test]
fn synthetic_datasets() {
    assert_eq!(split_sizes(350), (300, 30, 20));
    assert_eq!(split_sizes(2), (2, 0, 0));
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let m = synth_dataset(4, 24, 36, 9, a.path()).unwrap();
    synth_dataset(4, 24, 36, 9, b.path()).unwrap();
    for id in m.ids(Split::Train).iter().chain(&m.ids(Split::Val)).chain(&m.ids(Split::Test)) {
        for sub in ["hr", "lr"] {
            let f = format!("{sub}/{id}.msic");
            assert_eq!(std::fs::read(a.path().join(&f)).unwrap(), std::fs::read(b.path().join(&f)).unwrap());
        }
    }
    let ds = Dataset::open(a.path()).unwrap();
    for s in &ds.manifest.samples {
        let (hr, lr) = ds.load_pair(&s.id).unwrap();
        assert_eq!(downsample_cube(&hr, 3).unwrap(), lr);
        assert!(min_adjacent_correlation(&hr) > 0.5);
        assert!(hr.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }
    assert!(synth_dataset(1, 20, 24, 0, a.path()).is_err());
}
