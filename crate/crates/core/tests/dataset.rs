use julkit::synthdata::{
    make_sample, mouth_height, oracle_mouth_opening, signal, DataConfig, Dataset, Identity, Sequence, MASK_ROW, SIZE,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn oracle_tracks_signal_over_256_frames() {
    let data = Dataset::generate(&DataConfig::default()).unwrap();
    for seq in &data.train {
        assert_eq!(seq.len(), 256);
        let measured: Vec<f64> = seq.frames.iter().map(|f| oracle_mouth_opening(f, &seq.identity)).collect();
        let r = pearson(&measured, &seq.signal);
        assert!(r > 0.95, "identity {}: r = {r}", seq.identity.seed);
        let mae = measured.iter().zip(&seq.signal).map(|(m, &a)| (m - mouth_height(a) as f64).abs()).sum::<f64>()
            / seq.len() as f64;
        assert!(mae < 1.0, "identity {}: mae = {mae}", seq.identity.seed);
    }
}

#[test]
fn generation_is_deterministic_and_identities_differ() {
    let cfg = DataConfig { train_identities: 2, train_frames: 20, test_frames: 16, ..Default::default() };
    let a = Dataset::generate(&cfg).unwrap();
    assert_eq!(a, Dataset::generate(&cfg).unwrap());
    let b = Dataset::generate(&DataConfig { seed: cfg.seed + 1, ..cfg.clone() }).unwrap();
    assert_ne!(a.test.identity.seed, b.test.identity.seed);
    let seeds: Vec<u64> = a.train.iter().map(|s| s.identity.seed).chain([a.test.identity.seed]).collect();
    assert!(seeds.iter().enumerate().all(|(i, s)| !seeds[..i].contains(s)));
    for seq in &a.train {
        for (t, &v) in seq.signal.iter().enumerate() {
            assert_eq!(v, signal(t, seq.identity.seed));
        }
    }
}

#[test]
fn masked_source_carries_no_signal() {
    let seq = Sequence::render(Identity::new(5), 40);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let first = make_sample(&seq, 0, &mut rng).unwrap();
    for t in 1..seq.len() {
        let s = make_sample(&seq, t, &mut rng).unwrap();
        assert_eq!(s.source, first.source, "frame {t}");
        let plane = SIZE * SIZE;
        for ch in 0..3 {
            let lo = ch * plane;
            assert_eq!(&s.source.data()[lo..lo + MASK_ROW * SIZE], &s.truth.data()[lo..lo + MASK_ROW * SIZE]);
            assert!(s.source.data()[lo + MASK_ROW * SIZE..lo + plane].iter().all(|&x| x == 0.0));
        }
    }
}

#[test]
fn dump_and_load_round_trip() {
    let cfg = DataConfig { train_identities: 2, train_frames: 16, test_frames: 16, ..Default::default() };
    let data = Dataset::generate(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    data.dump(dir.path()).unwrap();
    let index = std::fs::read_to_string(dir.path().join("index.csv")).unwrap();
    assert_eq!(index.lines().count(), 1 + 3 * 16);
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back.train.len(), 2);
    for (x, y) in data.train.iter().chain([&data.test]).zip(back.train.iter().chain([&back.test])) {
        assert_eq!(x.identity.seed, y.identity.seed);
        assert_eq!(x.signal, y.signal);
        for (f, g) in x.frames.iter().zip(&y.frames) {
            let worst = f.data().iter().zip(g.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(worst <= 0.5 / 255.0 + 1e-12, "8-bit quantization bound exceeded: {worst}");
        }
    }
}

#[test]
fn load_rejects_bad_index() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.csv"), "t,seed\n1,2\n").unwrap();
    assert!(Dataset::load(dir.path()).is_err());
    assert!(Dataset::load(&dir.path().join("missing")).is_err());
}
