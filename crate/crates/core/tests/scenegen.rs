use std::fs;
use std::path::Path;

use glassnorm::scenegen::io::{decode_normal_component, read_normal_png, read_normal_png_raw};
use glassnorm::scenegen::{
    generate_dataset, generate_samples, integrity_violations, load_sample, normals_from_depth, render, Appearance,
    Manifest, SceneSpec, Split,
};
use proptest::prelude::*;

fn angle_deg(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).clamp(-1.0, 1.0).acos().to_degrees()
}

#[test]
fn generated_samples_keep_their_guarantees() {
    for s in generate_samples(40, 11, 48).unwrap() {
        let v = integrity_violations(&s);
        assert!(v.is_empty(), "{v:?}");
        assert!(s.mask_transparent.count() > 0);
    }
}

#[test]
fn geometry_is_independent_of_materials() {
    let spec = SceneSpec::random(5, 48, 48);
    let mut redrawn = spec.clone();
    for (i, o) in redrawn.objects.iter_mut().enumerate() {
        if let Appearance::Transparent(_) | Appearance::Randomized { .. } = o.appearance {
            o.appearance = Appearance::Randomized { seed: 1000 + i as u64 };
        }
    }
    redrawn.background_seed ^= 0xFFFF;
    let (a, b) = (render(&spec).unwrap(), render(&redrawn).unwrap());
    assert_eq!(a.normal_gt, b.normal_gt);
    assert_eq!(a.depth, b.depth);
    assert_eq!(a.mask_fg, b.mask_fg);
    assert_eq!(a.mask_transparent, b.mask_transparent);
    assert_ne!(a.rgb, b.rgb);
}

/// Smooth interior pixels: the 3×3 neighbourhood lies on one primitive and
/// its analytic normals agree within a few degrees.
#[test]
fn depth_normals_agree_with_analytic_normals() {
    let mut errors = Vec::new();
    for s in generate_samples(10, 21, 64).unwrap() {
        let (w, h) = (s.camera.width, s.camera.height);
        let from_depth = normals_from_depth(&s);
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let n = s.normal_gt.get(y, x);
                let smooth = (-1..=1isize).all(|dy| {
                    (-1..=1isize).all(|dx| {
                        let (yy, xx) = ((y as isize + dy) as usize, (x as isize + dx) as usize);
                        s.mask_fg.get(yy, xx) && angle_deg(s.normal_gt.get(yy, xx), n) < 3.0
                    })
                });
                if let (true, Some(d)) = (smooth, from_depth[y * w + x]) {
                    errors.push(angle_deg(d, n));
                }
            }
        }
    }
    assert!(errors.len() > 1000);
    errors.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = errors[errors.len() / 2];
    assert!(median < 5.0, "median {median}");
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut entries: Vec<_> = walk(dir);
    entries.sort();
    for p in entries {
        out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
    }
    out
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn dataset_generation() {
    let m = Manifest::build(10, 0.8, 3, 32).unwrap();
    assert_eq!((m.split(Split::Train).count(), m.split(Split::Test).count()), (8, 2));

    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let manifest = generate_dataset(4, 0.5, a.path(), 77, 32).unwrap();
    generate_dataset(4, 0.5, b.path(), 77, 32).unwrap();
    assert_eq!(files(a.path()), files(b.path()));
    assert_eq!(Manifest::load(a.path()).unwrap(), manifest);

    for entry in &manifest.samples {
        let dir = a.path().join(&entry.name);
        let fresh = render(&manifest.spec(entry)).unwrap();
        let stored = read_normal_png_raw(&dir.join("gt_normal.png")).unwrap();
        let scratch = tempfile::tempdir().unwrap();
        glassnorm::scenegen::write_sample(scratch.path(), &fresh).unwrap();
        assert_eq!(
            fs::read(dir.join("gt_normal.png")).unwrap(),
            fs::read(scratch.path().join("gt_normal.png")).unwrap()
        );
        for (q, n) in stored.data().iter().zip(fresh.normal_gt.tensor().data()) {
            assert!((q - n).abs() <= 1.0 / 255.0 + 1e-12);
        }
        let loaded = load_sample(&dir).unwrap();
        assert_eq!(loaded.mask_fg, fresh.mask_fg);
        assert_eq!(loaded.mask_transparent, fresh.mask_transparent);
        assert_eq!(loaded.camera, fresh.camera);
        for (d, e) in loaded.depth.iter().zip(&fresh.depth) {
            assert!((d - e).abs() <= 0.5 / 65535.0 + 1e-12);
        }
        assert_eq!(read_normal_png(&dir.join("gt_normal.png")).unwrap(), loaded.normal_gt);
    }

    fs::remove_file(a.path().join("00000/depth.png")).unwrap();
    assert!(matches!(load_sample(&a.path().join("00000")), Err(glassnorm::Error::MissingFiles(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_scenes_are_valid(seed in any::<u64>(), half in 8usize..24) {
        let s = render(&SceneSpec::random(seed, 2 * half, 2 * half)).unwrap();
        let v = integrity_violations(&s);
        prop_assert!(v.is_empty(), "{:?}", v);
    }

    #[test]
    fn normal_png_quantization_within_half_step(n in -1.0f64..=1.0) {
        let q = glassnorm::scenegen::io::encode_normal_component(n);
        prop_assert!((decode_normal_component(q) - n).abs() <= 1.0 / 255.0 + 1e-12);
    }
}
