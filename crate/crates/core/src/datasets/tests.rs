use super::*;
use tempfile::TempDir;

fn write_fixture(root: &Path, videos: usize, frames: usize) {
    for v in 0..videos {
        let dir = root.join(format!("vid{v}"));
        std::fs::create_dir_all(dir.join("frames")).unwrap();
        std::fs::create_dir_all(dir.join("masks")).unwrap();
        for t in 0..frames {
            let name = format!("{t:05}.png");
            let rgb: Vec<u8> = (0..8 * 8 * 3).map(|i| (i * 7 + t) as u8).collect();
            io::write_rgb(&dir.join("frames").join(&name), 8, 8, &rgb).unwrap();
            let labels: Vec<u8> = (0..64).map(|i| (i % 3) as u8).collect();
            io::write_mask(&dir.join("masks").join(&name), 8, 8, &labels).unwrap();
        }
    }
}

fn records(n: usize) -> Vec<VideoRecord> {
    (0..n)
        .map(|i| VideoRecord {
            id: format!("v{i:02}"),
            frames: vec![],
            masks: vec![],
            height: 64,
            width: 64,
        })
        .collect()
}

fn record_of_len(n: usize) -> VideoRecord {
    VideoRecord {
        id: "v".into(),
        frames: vec![PathBuf::new(); n],
        masks: vec![PathBuf::new(); n],
        height: 64,
        width: 64,
    }
}

#[test]
fn empty_root_gives_no_videos() {
    let dir = TempDir::new().unwrap();
    assert!(load_dataset(dir.path()).unwrap().is_empty());
}

#[test]
fn fixture_counts_and_round_trip() {
    let dir = TempDir::new().unwrap();
    write_fixture(dir.path(), 2, 5);
    let recs = load_dataset(dir.path()).unwrap();
    assert_eq!(recs.len(), 2);
    assert!(recs.iter().all(|r| r.len() == 5 && r.masks.len() == 5));
    assert_eq!(recs[0].id, "vid0");
    assert_eq!((recs[0].height, recs[0].width), (8, 8));
    let labels = recs[1].load_mask(2, 8, 8).unwrap();
    assert_eq!(labels, (0..64).map(|i| (i % 3) as u8).collect::<Vec<_>>());
    let f = recs[0].load_frame(3, 8, 8).unwrap();
    assert_eq!(f.shape(), &[3, 8, 8]);
    // channel 1 of pixel 0 is byte 1 * 7 + 3
    assert_eq!(f.data()[64], 10.0 / 255.0);
    assert_eq!(recs[0].load_frame(0, 16, 16).unwrap().shape(), &[3, 16, 16]);
}

#[test]
fn missing_mask_names_the_frame() {
    let dir = TempDir::new().unwrap();
    write_fixture(dir.path(), 1, 3);
    std::fs::remove_file(dir.path().join("vid0/masks/00001.png")).unwrap();
    match load_dataset(dir.path()) {
        Err(Error::Ingestion { path, .. }) => assert!(path.ends_with("vid0/frames/00001.png")),
        other => panic!("expected ingestion error, got {other:?}"),
    }
}

#[test]
fn out_of_range_mask_value_is_rejected() {
    let dir = TempDir::new().unwrap();
    write_fixture(dir.path(), 1, 2);
    let bad = dir.path().join("vid0/masks/00001.png");
    let mut labels = vec![0u8; 64];
    labels[10] = 3;
    io::write_mask(&bad, 8, 8, &labels).unwrap();
    match load_dataset(dir.path()) {
        Err(Error::Ingestion { path, reason }) => {
            assert_eq!(path, bad);
            assert!(reason.contains('3'));
        }
        other => panic!("expected ingestion error, got {other:?}"),
    }
}

#[test]
fn rgb_mask_is_rejected() {
    let dir = TempDir::new().unwrap();
    write_fixture(dir.path(), 1, 1);
    io::write_rgb(&dir.path().join("vid0/masks/00000.png"), 8, 8, &[0; 192]).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Ingestion { .. })));
}

#[test]
fn split_sizes_follow_floor_rule() {
    assert_eq!(split_sizes(10), (7, 1, 2));
    assert_eq!(split_sizes(35), (25, 3, 7));
    assert_eq!(split_sizes(1), (1, 0, 0));
    assert_eq!(split_sizes(5), (4, 0, 1));
    let s = split(&records(10), 3).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 1, 2));
    let s = split(&records(35), 3).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (25, 3, 7));
}

#[test]
fn split_is_seeded_and_rejects_empty() {
    let r = records(20);
    assert_eq!(split(&r, 9).unwrap(), split(&r, 9).unwrap());
    assert_ne!(split(&r, 9).unwrap(), split(&r, 10).unwrap());
    assert!(matches!(split(&[], 0), Err(Error::Contract(_))));
    let s = split(&r, 9).unwrap();
    let back: Split = serde_json::from_str(&s.to_json()).unwrap();
    assert_eq!(back, s);
}

#[test]
fn window_counts() {
    let r = record_of_len(5);
    let w = sample_windows(&r, 4, 1).unwrap();
    assert_eq!(w.len(), 2);
    assert_eq!(w[1].frames(), 1..5);
    assert!(sample_windows(&r, 6, 1).unwrap().is_empty());
    assert_eq!(sample_windows(&r, 1, 1).unwrap().len(), 5);
    assert_eq!(sample_windows(&r, 2, 2).unwrap().len(), 2);
    assert!(matches!(sample_windows(&r, 0, 1), Err(Error::Contract(_))));
}

fn small_synth() -> SynthConfig {
    SynthConfig {
        seed: 5,
        videos: 2,
        frames: 6,
        resolution: 64,
        ..SynthConfig::default()
    }
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let cfg = small_synth();
    let ra = synth_generate(&cfg, a.path()).unwrap();
    synth_generate(&cfg, b.path()).unwrap();
    assert_eq!(ra.len(), 2);
    for r in &ra {
        for p in r.frames.iter().chain(&r.masks) {
            let rel = p.strip_prefix(a.path()).unwrap();
            assert_eq!(std::fs::read(p).unwrap(), std::fs::read(b.path().join(rel)).unwrap(), "{rel:?}");
        }
    }
    let loaded = load_dataset(a.path()).unwrap();
    assert_eq!(loaded, ra);
    let other = render_video(&SynthConfig { seed: 6, ..cfg }, 0).unwrap();
    assert_ne!(other, render_video(&small_synth(), 0).unwrap());
}

#[test]
fn synth_masks_are_exact_renders_of_labeled_tubes() {
    let cfg = SynthConfig {
        frames: 8,
        distractors: 2,
        ..small_synth()
    };
    for v in 0..2 {
        let video = render_video(&cfg, v).unwrap();
        for f in &video.frames {
            assert!(f.labels.iter().all(|&l| l <= 2));
            for class in 1..=2u8 {
                let colour = |p: usize| [f.rgb[3 * p], f.rgb[3 * p + 1], f.rgb[3 * p + 2]];
                let inside: Vec<usize> = (0..f.labels.len()).filter(|&p| f.labels[p] == class).collect();
                assert!(!inside.is_empty());
                let c = colour(inside[0]);
                assert!(inside.iter().all(|&p| colour(p) == c));
                assert!((0..f.labels.len()).filter(|&p| f.labels[p] != class).all(|p| colour(p) != c));
            }
        }
    }
}

#[test]
fn smooth_motion_is_bounded_by_step() {
    let cfg = SynthConfig {
        frames: 30,
        occluders: 0,
        distractors: 0,
        jump_probability: 0.0,
        motion_step: 1.5,
        resolution: 128,
        ..small_synth()
    };
    let centroid = |labels: &[u8], class: u8| {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
        for (p, &l) in labels.iter().enumerate() {
            if l == class {
                sx += (p % 128) as f64;
                sy += (p / 128) as f64;
                n += 1.0;
            }
        }
        (sx / n, sy / n)
    };
    for v in 0..2 {
        let video = render_video(&cfg, v).unwrap();
        // class 2 is drawn last so nothing covers it
        let track: Vec<(f64, f64)> = video.frames.iter().map(|f| centroid(&f.labels, 2)).collect();
        let mut moved = 0.0f64;
        for w in track.windows(2) {
            let d = ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt();
            assert!(d <= cfg.motion_step + 1.0, "displacement {d}");
            moved = moved.max(d);
        }
        assert!(moved > 0.5);
    }
}

#[test]
fn jumps_exceed_the_smooth_step() {
    let cfg = SynthConfig {
        frames: 30,
        occluders: 0,
        distractors: 0,
        jump_probability: 1.0,
        ..small_synth()
    };
    let video = render_video(&cfg, 0).unwrap();
    let count = |f: &SynthFrame| f.labels.iter().filter(|&&l| l == 2).count();
    let firsts: Vec<usize> = video.frames.iter().map(|f| f.labels.iter().position(|&l| l == 2).unwrap()).collect();
    assert!(video.frames.iter().all(|f| count(f) > 0));
    assert!(firsts.windows(2).any(|w| (w[0] as i64 - w[1] as i64).abs() > 64 * 8));
}

#[test]
fn synth_rejects_bad_resolution() {
    let cfg = SynthConfig {
        resolution: 100,
        ..SynthConfig::default()
    };
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
}
