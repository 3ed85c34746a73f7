use mfdconv::features::synth::{synth_clip, synth_generate};
use mfdconv::features::{logmel, AudioClip, DatasetIndex, LogMelConfig, LogMelExtractor, Split, SplitCounts, SynthConfig};
use mfdconv::features::index::ClipLabels;

fn sine(freq: f64, amp: f64, n: usize) -> AudioClip {
    let s = (0..n).map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / 16_000.0).sin()).collect();
    AudioClip::new(s, 16_000).unwrap()
}

/// Filter centers rebuilt from the HTK formula, independent of the crate.
fn htk_centers(n_mels: usize, f_max: f64) -> Vec<f64> {
    let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let top = mel(f_max);
    (1..=n_mels).map(|i| 700.0 * (10f64.powf(top * i as f64 / (n_mels + 1) as f64 / 2595.0) - 1.0)).collect()
}

#[test]
fn sine_peaks_in_the_nearest_centre_bin() {
    let cfg = LogMelConfig::default();
    let centers = htk_centers(cfg.n_mels, cfg.f_max);
    let ex = LogMelExtractor::new(cfg).unwrap();
    for (a, b) in centers.iter().zip(ex.filterbank().centers()) {
        assert!((a - b).abs() < 1e-9);
    }
    for freq in [440.0, 1000.0, 3000.0] {
        let nearest = (0..centers.len())
            .min_by(|&i, &j| (centers[i] - freq).abs().total_cmp(&(centers[j] - freq).abs()))
            .unwrap();
        let spec = ex.extract(&sine(freq, 0.5, 16_000)).unwrap();
        for t in 0..spec.n_frames() {
            let row = spec.frames.row(t);
            let arg = (0..row.len()).max_by(|&i, &j| row[i].total_cmp(&row[j])).unwrap();
            assert_eq!(arg, nearest, "{freq} Hz frame {t}");
        }
    }
}

#[test]
fn one_hop_delay_shifts_frames_by_one() {
    let cfg = LogMelConfig::default();
    let base: Vec<f64> = (0..12_000).map(|i| ((i as f64 * 0.013).sin() + (i as f64 * 0.0021).cos()) * 0.3).collect();
    let mut delayed = vec![0.0; cfg.hop];
    delayed.extend_from_slice(&base);
    let a = logmel(&AudioClip::new(base, 16_000).unwrap(), cfg).unwrap();
    let b = logmel(&AudioClip::new(delayed, 16_000).unwrap(), cfg).unwrap();
    assert_eq!(b.n_frames(), a.n_frames() + 1);
    for t in 0..a.n_frames() {
        for (x, y) in a.frames.row(t).iter().zip(b.frames.row(t + 1)) {
            assert!((x - y).abs() <= 1e-9);
        }
    }
}

#[test]
fn doubling_amplitude_quadruples_mel_energy() {
    let ex = LogMelExtractor::new(LogMelConfig::default()).unwrap();
    let noise: Vec<f64> = (0..8000).map(|i| ((i * 7919 % 1000) as f64 / 1000.0 - 0.5) * 0.4).collect();
    let one = ex.mel_power(&AudioClip::new(noise.clone(), 16_000).unwrap()).unwrap();
    let two = ex.mel_power(&AudioClip::new(noise.iter().map(|v| 2.0 * v).collect(), 16_000).unwrap()).unwrap();
    for (a, b) in one.data().iter().zip(two.data()) {
        assert!((b - 4.0 * a).abs() <= 1e-9 * b.abs().max(1e-30));
    }
}

#[test]
fn events_stand_out_by_six_db() {
    let cfg = SynthConfig {
        seed: 3,
        counts: SplitCounts::uniform(8),
        clip_seconds: 4.0,
        snr_db: (20.0, 20.0),
        events_per_clip: (1, 1),
        event_seconds: (1.0, 1.5),
        ..Default::default()
    };
    let mel = LogMelConfig::default();
    let ex = LogMelExtractor::new(mel).unwrap();
    for i in 0..8 {
        let clip = synth_clip(&cfg, Split::Strong, i).unwrap();
        let power = ex.mel_power(&clip.audio).unwrap();
        let e = &clip.events[0];
        let (mut inside, mut n_in, mut outside, mut n_out) = (0.0, 0, 0.0, 0);
        for t in 0..power.shape()[0] {
            let (lo, hi) = (t as f64 * mel.hop_seconds(), (t * mel.hop + mel.win) as f64 / 16_000.0);
            let energy: f64 = power.row(t).iter().sum();
            if lo >= e.onset && hi <= e.offset {
                inside += energy;
                n_in += 1;
            } else if hi <= e.onset || lo >= e.offset {
                outside += energy;
                n_out += 1;
            }
        }
        let db = 10.0 * ((inside / n_in as f64) / (outside / n_out as f64)).log10();
        assert!(db >= 6.0, "clip {i}: {db:.2} dB");
    }
}

#[test]
fn corpus_is_byte_identical_across_runs() {
    let cfg = SynthConfig { seed: 5, counts: SplitCounts::uniform(2), clip_seconds: 1.0, ..Default::default() };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let sa = synth_generate(&cfg, a.path()).unwrap();
    synth_generate(&cfg, b.path()).unwrap();
    for r in &sa.index.records {
        assert_eq!(std::fs::read(a.path().join(&r.path)).unwrap(), std::fs::read(b.path().join(&r.path)).unwrap());
    }
    for f in ["index.tsv", "classes.txt", "unlabeled_private.tsv", "corpus.json"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
    }
    let idx = DatasetIndex::read_dir(a.path()).unwrap();
    assert_eq!(idx, sa.index);
    assert_eq!(DatasetIndex::read_private(a.path()).unwrap(), sa.private);
    idx.check_duration(1.0).unwrap();
    for split in Split::ALL {
        assert_eq!(idx.count(split), 2);
    }
    assert!(idx.in_split(Split::Unlabeled).all(|r| r.labels == ClipLabels::None));
    assert!(idx.in_split(Split::Weak).all(|r| matches!(r.labels, ClipLabels::Weak(_))));
    let wav = mfdconv::features::load_wav(a.path().join(&idx.records[0].path)).unwrap();
    assert_eq!(wav.sample_rate, 16_000);
    assert_eq!(wav.samples.len(), 16_000);
}
