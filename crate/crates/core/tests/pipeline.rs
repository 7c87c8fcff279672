use approx::assert_relative_eq;
use luxmix::classical::{kkt_scale, kkt_violation, solve_nnls, unmix_one, DualBandParams, KKT_TOLERANCE};
use luxmix::config::RunConfig;
use luxmix::pipeline::{
    decode_cube, encode_cube, evaluate, load_cube, read_dataset, save_cube, split_dataset, unmix_cube, write_dataset,
    CubeKind, DataCube, Engine,
};
use luxmix::pipeline::preprocess::Mask;
use luxmix::simulate::{default_library, simulate_dataset, SimConfig};
use luxmix::spectral::{mix, AbundanceVector, WavelengthGrid};
use luxmix::Error;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_grid() -> WavelengthGrid {
    WavelengthGrid::uniform(500.0, 10.0, 7).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cube_bytes_round_trip(w in 1usize..6, h in 1usize..6, seed in any::<u64>()) {
        let grid = small_grid();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f32> = (0..w * h * grid.len()).map(|_| rand::Rng::random::<f32>(&mut rng) * 4096.0).collect();
        let cube = DataCube::new(w, h, grid, CubeKind::White, values).unwrap();
        let bytes = encode_cube(&cube);
        let back = decode_cube(&bytes, "mem").unwrap();
        prop_assert_eq!(&back, &cube);
        prop_assert_eq!(encode_cube(&back), bytes);
    }

    #[test]
    fn nnls_meets_kkt(seed in any::<u64>()) {
        let (m, k) = (30, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..m * k).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
        let y: Vec<f64> = (0..m).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
        let sol = solve_nnls(&a, m, k, &y).unwrap();
        prop_assert!(sol.z.iter().all(|v| *v >= 0.0));
        prop_assert!(kkt_violation(&a, m, k, &y, &sol.z) <= KKT_TOLERANCE * kkt_scale(&a, m, k, &y));
    }

    #[test]
    fn mix_is_linear(z1 in prop::collection::vec(0.0f64..3.0, 5), z2 in prop::collection::vec(0.0f64..3.0, 5), t in 0.0f64..2.0) {
        let lib = default_library(&WavelengthGrid::default()).unwrap();
        let sum: Vec<f64> = z1.iter().zip(&z2).map(|(a, b)| a + t * b).collect();
        let a = mix(&lib, &AbundanceVector::new(z1).unwrap()).unwrap();
        let b = mix(&lib, &AbundanceVector::new(z2).unwrap()).unwrap();
        let c = mix(&lib, &AbundanceVector::new(sum).unwrap()).unwrap();
        for i in 0..lib.m() {
            assert_relative_eq!(c.values()[i], a.values()[i] + t * b.values()[i], epsilon = 1e-12, max_relative = 1e-12);
        }
    }
}

#[test]
fn truncated_cube_names_the_missing_bytes() {
    let cube = DataCube::zeros(3, 2, small_grid(), CubeKind::Fluorescence);
    let bytes = encode_cube(&cube);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cut.hsc");
    std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
    match load_cube(&path) {
        Err(e @ Error::Format { .. }) => {
            let msg = e.to_string();
            assert!(msg.contains("truncated payload: needs 5 more bytes"), "{msg}");
            assert!(msg.contains("cut.hsc"), "{msg}");
        }
        other => panic!("expected a format error, got {other:?}"),
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_cube(&bad, "mem"), Err(Error::Format { offset: 0, .. })));
    bad = bytes.clone();
    bad.push(0);
    assert!(matches!(decode_cube(&bad, "mem"), Err(Error::Format { .. })));
}

#[test]
fn saved_cube_loads_identically() {
    let grid = small_grid();
    let values: Vec<f32> = (0..4 * 3 * grid.len()).map(|i| i as f32 * 0.25).collect();
    let cube = DataCube::new(4, 3, grid, CubeKind::Dark, values).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.hsc");
    save_cube(&cube, &p).unwrap();
    assert_eq!(load_cube(&p).unwrap(), cube);
}

fn baseline_engine() -> Engine {
    Engine::Baseline {
        lib: default_library(&WavelengthGrid::default()).unwrap(),
        params: DualBandParams { beta: 0.25, ..Default::default() },
    }
}

#[test]
fn evaluation_ignores_sample_order() {
    let data = simulate_dataset(&SimConfig::phantom(2, 3)).unwrap();
    let engine = baseline_engine();
    let a = evaluate(&engine, &data).unwrap();
    let mut shuffled = data.clone();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(4));
    let b = evaluate(&engine, &shuffled).unwrap();
    assert_eq!(a, b);
    assert!(a.pearson_r.unwrap() > 0.8);
}

#[test]
fn pixelwise_cube_unmixing_matches_per_sample_baseline() {
    let data = simulate_dataset(&SimConfig::phantom(1, 6)).unwrap();
    let (w, h) = (5, 4);
    let grid = data[0].grid().clone();
    let (mut fluo, mut white) = (
        DataCube::zeros(w, h, grid.clone(), CubeKind::Fluorescence),
        DataCube::zeros(w, h, grid.clone(), CubeKind::White),
    );
    // round the spectra through f32 first so both paths see the same input
    let mut pixels = Vec::new();
    for i in 0..w * h {
        let mut s = data[i].clone();
        let f: Vec<f64> = s.fluo.values().iter().map(|v| *v as f32 as f64).collect();
        let r: Vec<f64> = s.reflectance.values().iter().map(|v| *v as f32 as f64).collect();
        for b in 0..grid.len() {
            fluo.set(b, i % w, i / w, f[b] as f32);
            white.set(b, i % w, i / w, r[b] as f32);
        }
        s.fluo = luxmix::Spectrum::new(grid.clone(), f, s.fluo.role()).unwrap();
        s.reflectance = luxmix::Spectrum::new(grid.clone(), r, s.reflectance.role()).unwrap();
        pixels.push(s);
    }
    let engine = baseline_engine();
    let Engine::Baseline { lib, params } = &engine else { unreachable!() };
    let maps = unmix_cube(&fluo, &white, &Mask::full(w, h), &engine, 1).unwrap();
    assert!(maps.valid.iter().all(|v| *v));
    for (i, s) in pixels.iter().enumerate() {
        let want = unmix_one(s, lib, params).unwrap().z;
        for (j, v) in want.values().iter().enumerate() {
            assert_relative_eq!(maps.planes[j][i], *v, epsilon = 1e-12, max_relative = 1e-10);
        }
    }
}

#[test]
fn dataset_csv_round_trips() {
    let data = simulate_dataset(&SimConfig::phantom(1, 11)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.csv");
    write_dataset(&data, &p).unwrap();
    let back = read_dataset(&p).unwrap();
    assert_eq!(back.len(), data.len());
    for (a, b) in data.iter().zip(&back) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.c_ppix, b.c_ppix);
        assert_eq!(a.saturated, b.saturated);
        assert_eq!(a.fluo.values(), b.fluo.values());
        assert_eq!(a.reflectance.values(), b.reflectance.values());
    }
}

#[test]
fn split_is_seeded_and_disjoint() {
    let data = simulate_dataset(&SimConfig::phantom(4, 1)).unwrap();
    let (tr1, te1) = split_dataset(&data, 0.8, 9).unwrap();
    let (tr2, te2) = split_dataset(&data, 0.8, 9).unwrap();
    assert_eq!(tr1, tr2);
    assert_eq!(te1, te2);
    assert_eq!(tr1.len() + te1.len(), data.len());
    assert!(te1.iter().all(|t| tr1.iter().all(|s| s.id != t.id)));
}

#[test]
fn config_rejects_unknown_keys_and_derives_seeds() {
    assert!(RunConfig::from_json(r#"{"sim": {"bogus": 1}}"#, "cfg").is_err());
    let cfg = RunConfig::from_json("{}", "cfg").unwrap().resolve(17).unwrap();
    assert_eq!(cfg.seed, 17);
    assert_eq!(cfg.acusa.hu.seed, 18);
    assert_eq!(cfg.acusa.norm.seed, 19);
    let again = RunConfig::from_json(&cfg.to_json(), "cfg").unwrap();
    assert_eq!(again.to_json(), cfg.to_json());
}
