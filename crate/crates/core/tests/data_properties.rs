use mcsv::data::{
    apply_reverb, convolve_truncated, generate_corpus, load_corpus, mix_at_snr, sample_view_pair,
    snr_gain, synthesize_corpus, synthetic_rir, AugmentPolicy, Augmenter, CorpusParams, NoiseBank,
    NoiseClass, F0_RANGE_HZ,
};
use mcsv::dsp::{rms, Waveform};
use mcsv::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SR: u32 = 16_000;

fn wave(samples: Vec<f64>) -> Waveform {
    Waveform::new(samples, SR).unwrap()
}

fn noise(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn measured_snr_db(signal: &[f64], mixed: &[f64]) -> f64 {
    let residual: Vec<f64> = mixed.iter().zip(signal).map(|(m, s)| m - s).collect();
    20.0 * (rms(signal) / rms(&residual)).log10()
}

fn overlaps(a: (usize, usize), b: (usize, usize)) -> bool {
    a.0 < b.1 && b.0 < a.1
}

#[test]
fn ten_second_utterance_yields_disjoint_views() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let utt = wave(noise(160_000, &mut rng));
    let (mut first_half, mut a_first) = (0, 0);
    for _ in 0..1000 {
        let p = sample_view_pair(&utt, "u", 2.0, &mut rng).unwrap();
        assert!(!overlaps(p.interval_a, p.interval_b));
        assert!(p.disjoint());
        assert_eq!(p.view_a.len(), 32_000);
        assert_eq!(p.view_b.len(), 32_000);
        assert!(p.interval_a.1 <= 160_000 && p.interval_b.1 <= 160_000);
        assert_eq!(
            p.view_a.samples(),
            &utt.samples()[p.interval_a.0..p.interval_a.1]
        );
        assert_eq!(p.utterance_id, "u");
        first_half += usize::from(p.interval_a.0.min(p.interval_b.0) < 64_000);
        a_first += usize::from(p.interval_a.0 < p.interval_b.0);
    }
    assert!((400..600).contains(&a_first), "{a_first}");
    assert!(first_half > 500, "{first_half}");
}

#[test]
fn four_second_utterance_has_one_placement() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let utt = wave(noise(64_000, &mut rng));
    let mut orders = [false; 2];
    for _ in 0..50 {
        let p = sample_view_pair(&utt, "u", 2.0, &mut rng).unwrap();
        let mut iv = [p.interval_a, p.interval_b];
        orders[usize::from(iv[0].0 == 0)] = true;
        iv.sort();
        assert_eq!(iv, [(0, 32_000), (32_000, 64_000)]);
    }
    assert_eq!(orders, [true, true]);
    let short = wave(noise(62_400, &mut rng));
    assert!(matches!(
        sample_view_pair(&short, "u", 2.0, &mut rng),
        Err(Error::TooShort { .. })
    ));
}

#[test]
fn mixing_gain_examples() {
    let ones = wave(vec![1.0; 100]);
    let alt = wave(
        (0..100)
            .map(|i| if i % 2 == 0 { 1.0 } else { -1.0 })
            .collect(),
    );
    assert!((snr_gain(&ones, &alt, 0.0).unwrap().0 - 1.0).abs() < 1e-15);
    let half = wave(vec![0.5; 100]);
    assert!((snr_gain(&ones, &half, 20.0).unwrap().0 - 0.2).abs() < 1e-15);
    assert!(matches!(
        mix_at_snr(&ones, &wave(vec![0.0; 10]), 5.0),
        Err(Error::ZeroRms(_))
    ));
    assert!(matches!(
        mix_at_snr(&wave(vec![0.0; 10]), &ones, 5.0),
        Err(Error::ZeroRms(_))
    ));
}

#[test]
fn mixing_hits_requested_snr_over_each_class_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (lo, hi) in [(13.0, 20.0), (5.0, 15.0), (0.0, 15.0)] {
        for _ in 0..200 {
            let s = wave(noise(rng.random_range(100..4000), &mut rng));
            let n = wave(noise(rng.random_range(50..6000), &mut rng));
            let snr = rng.random_range(lo..=hi);
            let mixed = mix_at_snr(&s, &n, snr).unwrap();
            assert_eq!(mixed.len(), s.len());
            assert!((measured_snr_db(s.samples(), mixed.samples()) - snr).abs() < 1e-9);
        }
    }
}

#[test]
fn speech_class_snrs_stay_in_range() {
    let bank = NoiseBank::generate(2, SR, 11).unwrap();
    let policy = AugmentPolicy {
        noise_classes: vec![NoiseClass::Speech],
        reverb_prob: 0.0,
        ..AugmentPolicy::default()
    };
    let aug = Augmenter::new(policy, bank).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = wave(noise(800, &mut rng));
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..10_000 {
        let (out, rec) = aug.augment_waveform(&s, &mut rng).unwrap();
        let rec = rec.unwrap();
        assert_eq!(rec.class, NoiseClass::Speech);
        assert!(!rec.reverb);
        let measured = measured_snr_db(s.samples(), out.samples());
        assert!((measured - rec.snr_db).abs() < 1e-9);
        assert!((13.0 - 1e-9..=20.0 + 1e-9).contains(&measured));
        lo = lo.min(measured);
        hi = hi.max(measured);
    }
    assert!(lo < 13.1 && hi > 19.9);
}

fn naive_convolution(x: &[f64], h: &[f64]) -> Vec<f64> {
    let mut full = vec![0.0; x.len() + h.len() - 1];
    for (i, a) in x.iter().enumerate() {
        for (j, b) in h.iter().enumerate() {
            full[i + j] += a * b;
        }
    }
    full.truncate(x.len());
    full
}

#[test]
fn reverb_matches_direct_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for len in [30, 500, 4000] {
        let x = noise(len, &mut rng);
        let rir = synthetic_rir(0.2, SR, &mut rng).unwrap();
        let h = &rir.samples()[..rir.len().min(len)];
        let direct = naive_convolution(&x, h);
        let fast = convolve_truncated(&x, h);
        for (a, b) in fast.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-9);
        }
        let out = apply_reverb(&wave(x.clone()), &wave(h.to_vec())).unwrap();
        let peak_in = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let peak_direct = direct.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let g = peak_in / peak_direct;
        for (a, b) in out.samples().iter().zip(&direct) {
            assert!((a - g * b).abs() < 1e-6);
        }
    }
}

#[test]
fn impulse_responses_that_only_delay() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = noise(1000, &mut rng);
    let out = apply_reverb(&wave(x.clone()), &wave(vec![1.0])).unwrap();
    assert_eq!(out.samples(), &x[..]);
    let k = 37;
    let mut delta = vec![0.0; k + 1];
    delta[k] = 1.0;
    let out = apply_reverb(&wave(x.clone()), &wave(delta)).unwrap();
    assert!(out.samples()[..k].iter().all(|&v| v == 0.0));
    let peak_in = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let peak_out = out.samples().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!((peak_in - peak_out).abs() < 1e-12);
    let g = peak_out / x[..1000 - k].iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for n in k..1000 {
        assert!((out.samples()[n] - g * x[n - k]).abs() < 1e-12);
    }
    assert!(apply_reverb(&wave(x.clone()), &wave(vec![0.5; 2000])).is_err());
}

#[test]
fn synthetic_rirs_decay() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for t60 in [0.1, 0.5] {
        let rir = synthetic_rir(t60, SR, &mut rng).unwrap();
        assert_eq!(rir.len(), (t60 * SR as f64).round() as usize);
        assert_eq!(rir.samples()[0], 1.0);
        let q = rir.len() / 4;
        assert!(rms(&rir.samples()[1..q]) > 10.0 * rms(&rir.samples()[3 * q..]));
    }
}

#[test]
fn disabled_policy_is_identity() {
    let bank = NoiseBank::generate(1, SR, 1).unwrap();
    let aug = Augmenter::new(AugmentPolicy::disabled(), bank).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let utt = wave(noise(80_000, &mut rng));
    let pair = sample_view_pair(&utt, "u", 2.0, &mut rng).unwrap();
    let out = aug.augment(pair.clone(), &mut rng).unwrap();
    assert_eq!(out.view_a, pair.view_a);
    assert_eq!(out.view_b, pair.view_b);
    let (w, rec) = aug.augment_waveform(&pair.view_a, &mut rng).unwrap();
    assert_eq!(w, pair.view_a);
    assert!(rec.is_none());
}

#[test]
fn augmentation_is_deterministic_and_independent_per_view() {
    let bank = NoiseBank::generate(2, SR, 1).unwrap();
    let aug = Augmenter::new(AugmentPolicy::default(), bank).unwrap();
    let utt = wave(noise(80_000, &mut ChaCha8Rng::seed_from_u64(9)));
    let run = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pair = sample_view_pair(&utt, "u", 2.0, &mut rng).unwrap();
        aug.augment(pair, &mut rng).unwrap()
    };
    let (a, b) = (run(10), run(10));
    assert_eq!(a.view_a, b.view_a);
    assert_eq!(a.view_b, b.view_b);
    assert_ne!(a.view_a, run(11).view_a);
    assert!(a.disjoint());
}

fn tiny(seed: u64) -> CorpusParams {
    CorpusParams {
        speakers: 2,
        utterances_per_speaker: 2,
        utterance_secs: 4.0,
        seed,
    }
}

fn files(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn corpus_generation_is_byte_identical() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_corpus(d1.path(), &tiny(7)).unwrap();
    generate_corpus(d2.path(), &tiny(7)).unwrap();
    let (f1, f2) = (files(d1.path()), files(d2.path()));
    assert_eq!(f1.len(), 6);
    assert_eq!(f1, f2);
    let d3 = tempfile::tempdir().unwrap();
    generate_corpus(d3.path(), &tiny(8)).unwrap();
    assert_ne!(f1, files(d3.path()));
}

#[test]
fn corpus_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let made = generate_corpus(dir.path(), &tiny(3)).unwrap();
    let back = load_corpus(dir.path()).unwrap();
    assert_eq!(back.utterances.len(), 4);
    for (a, b) in made.utterances.iter().zip(&back.utterances) {
        assert_eq!(a.entry, b.entry);
        assert_eq!(a.audio.len(), b.audio.len());
        let err = a
            .audio
            .samples()
            .iter()
            .zip(b.audio.samples())
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        assert!(err <= 1.0 / 32768.0);
    }
    assert_eq!(back.speakers, made.speakers);
}

#[test]
fn same_speaker_utterances_share_f0() {
    let c = synthesize_corpus(&CorpusParams {
        speakers: 4,
        utterances_per_speaker: 3,
        utterance_secs: 4.0,
        seed: 1,
    })
    .unwrap();
    assert_eq!(c.speakers.len(), 4);
    for u in &c.utterances {
        let p = c.speaker_params(&u.entry.speaker_id).unwrap();
        assert!((F0_RANGE_HZ.0..=F0_RANGE_HZ.1).contains(&p.f0));
        assert_eq!(u.audio.len(), 64_000);
    }
    let ids: std::collections::HashSet<_> = c.entries().map(|e| &e.utterance_id).collect();
    assert_eq!(ids.len(), 12);
    assert_ne!(c.utterances[0].audio, c.utterances[1].audio);
}

#[test]
fn corpus_preconditions() {
    assert!(synthesize_corpus(&CorpusParams {
        speakers: 1,
        ..tiny(0)
    })
    .is_err());
    assert!(synthesize_corpus(&CorpusParams {
        utterances_per_speaker: 1,
        ..tiny(0)
    })
    .is_err());
    let blocked = tempfile::NamedTempFile::new().unwrap();
    assert!(generate_corpus(&blocked.path().join("sub"), &tiny(0)).is_err());
}

#[test]
fn training_view_exposes_no_labels() {
    let c = synthesize_corpus(&tiny(2)).unwrap();
    let t = c.unlabeled();
    assert_eq!(t.len(), 4);
    for i in 0..t.len() {
        assert_eq!(t.id(i), c.utterances[i].entry.utterance_id);
        assert_eq!(t.audio(i), &c.utterances[i].audio);
    }
}

proptest! {
    #[test]
    fn achieved_snr_matches_request(seed in any::<u64>(), len in 10usize..2000, nlen in 1usize..3000,
                                    snr in -10.0f64..40.0, scale in 1e-3f64..1e3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s: Vec<f64> = noise(len, &mut rng).iter().map(|v| v * scale).collect();
        let n = noise(nlen, &mut rng);
        prop_assume!(rms(&s) > 0.0 && rms(&n) > 0.0);
        let mixed = mix_at_snr(&wave(s.clone()), &wave(n), snr).unwrap();
        prop_assert!((measured_snr_db(&s, mixed.samples()) - snr).abs() < 1e-9);
    }

    #[test]
    fn view_pairs_never_overlap(seed in any::<u64>(), len in 64_000usize..100_000, crop in 0.5f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let utt = wave(vec![0.25; len]);
        let p = sample_view_pair(&utt, "x", crop, &mut rng).unwrap();
        prop_assert!(!overlaps(p.interval_a, p.interval_b));
        prop_assert_eq!(p.view_a.len(), p.view_b.len());
    }
}
