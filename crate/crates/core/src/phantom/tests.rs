use super::*;
use crate::dwimath::fit_tensor_lls;
use crate::evalmod::{evaluate, MaskRule};
use crate::fixel::{build_fixels, FixelConfig};
use crate::geom::{add, angle, norm, scale};

const N: usize = 48;

fn make(name: &str, seed: u64) -> PhantomDataset {
    generate(&PhantomSpec::preset(name, [N; 3], seed).unwrap()).unwrap()
}

#[test]
fn straight_noiseless_fa() {
    let d = make("straight", 1);
    let mut n_wm = 0;
    for (idx, &t) in d.labels.labels().iter().enumerate() {
        let fa = d.fa.data()[idx];
        match t {
            Tissue::Wm => {
                n_wm += 1;
                assert!((fa - 0.25).abs() < 1e-6, "WM FA {fa}");
                let e = d.tensors[idx].principal_dir().unwrap();
                assert!(axis_angle(e, [1.0, 0.0, 0.0]) < 1e-6);
            }
            Tissue::CorticalGm => assert!((fa - 0.15).abs() < 1e-6, "GM FA {fa}"),
            _ => assert!(fa < 1e-6, "{t:?} FA {fa}"),
        }
    }
    assert!(n_wm > 500);
    assert_eq!(d.bundles.len(), 1);
}

#[test]
fn crossing_overlap_has_lower_fa_and_dominant_axis() {
    let d = make("crossing-90", 2);
    let mut overlap = 0;
    for idx in 0..d.grid.n_voxels() {
        if d.fixels.count(idx) == 2 {
            overlap += 1;
            assert_eq!(d.labels.labels()[idx], Tissue::Wm);
            assert!(
                d.fa.data()[idx] < 0.25 - 0.05,
                "overlap FA {}",
                d.fa.data()[idx]
            );
            let e = d.tensors[idx].principal_dir().unwrap();
            assert!(axis_angle(e, [1.0, 0.0, 0.0]).to_degrees() < 1.0);
            let f = d.fixels.get(idx);
            assert!(axis_angle(f[0].dir, [1.0, 0.0, 0.0]) < 1e-9);
            assert!(axis_angle(f[1].dir, [0.0, 1.0, 0.0]) < 1e-9);
        }
    }
    assert!(overlap > 50, "{overlap}");
}

#[test]
fn curved_tangent_field_reproduces_centerline() {
    let d = make("curved", 3);
    let line = Centerline::new(&d.curves[0]).unwrap();
    let tv = d.tensor_volume();
    let field = |q: Point3| {
        let (v, _) = tv.interp_trilinear(q);
        DiffusionTensor([v[0], v[1], v[2], v[3], v[4], v[5]])
            .principal_dir()
            .unwrap()
    };
    let h = 0.2;
    let mut q = line.point(d.spec.cap_depth_vox);
    let mut u = line.tangent(d.spec.cap_depth_vox);
    let mut max_dev: f64 = 0.0;
    let end = line.length() - d.spec.cap_depth_vox;
    for _ in 0..10_000 {
        let align = |e: Vec3, u: Vec3| if dot(e, u) < 0.0 { scale(e, -1.0) } else { e };
        let k1 = align(field(q), u);
        let mid = add(q, scale(k1, h / 2.0));
        let k2 = align(field(mid), k1);
        q = add(q, scale(k2, h));
        u = k2;
        let tc = line.tube_coord(q).unwrap();
        max_dev = max_dev.max(tc.radial());
        if tc.s >= end {
            break;
        }
    }
    assert!(line.tube_coord(q).unwrap().s >= end - 0.5);
    assert!(max_dev < 0.5, "max deviation {max_dev}");
}

#[test]
fn ground_truth_respects_act_rules() {
    for name in PRESETS {
        let d = make(name, 4);
        for b in &d.bundles {
            assert!(!b.streamlines.is_empty());
            for s in &b.streamlines {
                let l: Vec<Tissue> = s.iter().map(|&p| d.labels.label_at_world(p)).collect();
                assert!(
                    l[0].is_gm() && l[l.len() - 1].is_gm(),
                    "{name}/{}: {:?}",
                    b.name,
                    (l[0], l[l.len() - 1])
                );
                assert!(
                    l.iter().all(|&t| t == Tissue::Wm || t.is_gm()),
                    "{name}: touches CSF/background"
                );
                assert!(l.contains(&Tissue::Wm));
                let steps: Vec<f64> = s.windows(2).map(|w| norm(sub(w[1], w[0]))).collect();
                assert!(
                    steps.iter().all(|&x| (x - 0.6).abs() < 0.02),
                    "{name} step spacing"
                );
                let (a, z) = (
                    d.grid.world_to_voxel(s[0]),
                    d.grid.world_to_voxel(*s.last().unwrap()),
                );
                let ci = |q: Point3| {
                    b.caps[d.grid.index(
                        q[0].round() as usize,
                        q[1].round() as usize,
                        q[2].round() as usize,
                    )]
                };
                assert_eq!((ci(a), ci(z)), (1, 2), "{name}");
            }
        }
        let kp = &d.keypoints;
        assert_eq!(kp.len(), 5);
        for skip in 0..5 {
            let q: Vec<Point3> = (0..5).filter(|&i| i != skip).map(|i| kp[i]).collect();
            assert!(
                tetra_volume(q[0], q[1], q[2], q[3]).abs() > 1.0,
                "{name}: keypoints coplanar"
            );
        }
    }
}

#[test]
fn branching_uses_subcortical_trunk_cap() {
    let d = make("branching", 5);
    assert!(d.labels.labels().contains(&Tissue::SubcorticalGm));
    let s = &d.bundles[0].streamlines[0];
    assert_eq!(d.labels.label_at_world(s[0]), Tissue::SubcorticalGm);
    assert_eq!(
        d.labels.label_at_world(*s.last().unwrap()),
        Tissue::CorticalGm
    );
}

#[test]
fn geometry_jitter_depends_on_seed() {
    let a = make("straight", 10);
    let b = make("straight", 11);
    let c = make("straight", 10);
    assert_ne!(a.curves[0].start, b.curves[0].start);
    assert_eq!(a.curves[0].start, c.curves[0].start);
    assert_eq!(a.fa.data(), c.fa.data());
    let shift = sub(a.curves[0].start, a.spec.bundles[0].curve.start);
    assert!(shift.iter().all(|x| x.abs() <= 1.5));
}

#[test]
fn ground_truth_self_evaluation() {
    let d = make("crossing-90", 6);
    let tracks = d.all_streamlines();
    let r = evaluate(&tracks, &d.grid, &d.regions(), &MaskRule::default(), None).unwrap();
    assert_eq!(r.unassigned, 0);
    for b in &r.bundles {
        assert!(b.overlap.dice >= 0.95, "{}: {}", b.name, b.overlap.dice);
    }
}

#[test]
fn built_fixels_match_truth() {
    for name in ["crossing-90", "curved"] {
        let d = make(name, 7);
        let built = build_fixels(d.all_streamlines(), &d.grid, &FixelConfig::default()).unwrap();
        let (mut total, mut good) = (0, 0);
        for idx in 0..d.grid.n_voxels() {
            if !d.bundles.iter().any(|b| b.mask[idx]) || d.fixels.count(idx) == 0 {
                continue;
            }
            total += 1;
            let ok = d.fixels.get(idx).iter().all(|t| {
                built
                    .get(idx)
                    .iter()
                    .any(|f| axis_angle(f.dir, t.dir).to_degrees() < 5.0)
            });
            good += usize::from(ok);
        }
        let frac = good as f64 / total as f64;
        assert!(frac >= 0.95, "{name}: {good}/{total}");
    }
}

#[test]
fn signal_simulation() {
    let scheme = GradientScheme::spiral(30, 500.0);
    let grid = Grid::axis_aligned([2, 1, 1], [1.0; 3], [0.0; 3]).unwrap();
    let d = prolate_tensor(1e-3, 0.25, normalize3([1.0, 2.0, -0.5]));
    let iso = DiffusionTensor::diag(1e-3, 1e-3, 1e-3);
    let sig = simulate_signals(&[d, iso], &grid, &scheme, 0.0, 0).unwrap();
    let fit = fit_signals(&sig, &scheme).unwrap();
    for (a, b) in fit[0].0.iter().zip(d.0) {
        assert!((a - b).abs() < 1e-10);
    }
    let v = sig.voxel(1);
    assert!(v[1..].iter().all(|&s| (s - v[1]).abs() < 1e-15));
    // Rician noise at SNR 20: FA bias over 1000 voxels stays small.
    let mut rng = rng::stream(1, Domain::Test, &[]);
    let mut sum = 0.0;
    for _ in 0..1000 {
        let (s0, s) = simulate_voxel(&[(1.0, d)], &scheme, 0.05, &mut rng);
        sum += fit_tensor_lls(&s, s0, &scheme).unwrap().tensor.fa();
    }
    let bias = sum / 1000.0 - 0.25;
    assert!(bias.abs() < 0.05, "bias {bias}");
}

fn normalize3(v: Vec3) -> Vec3 {
    crate::geom::normalize(v).unwrap()
}

#[test]
fn noisy_generation_is_deterministic() {
    let mut spec = PhantomSpec::preset("crossing-60", [40; 3], 9).unwrap();
    spec.noise_sigma = 0.08;
    let a = generate(&spec).unwrap();
    let b = generate(&spec).unwrap();
    assert_eq!(a.fa.data(), b.fa.data());
    assert_eq!(a.odf.data(), b.odf.data());
    let wm: Vec<f64> = a
        .labels
        .labels()
        .iter()
        .zip(a.fa.data())
        .filter(|(t, _)| **t == Tissue::Wm)
        .map(|(_, f)| *f)
        .collect();
    let mean = wm.iter().sum::<f64>() / wm.len() as f64;
    assert!(mean > 0.1 && mean < 0.45, "{mean}");
}

#[test]
fn save_and_load() {
    let d = make("crossing-90", 12);
    let dir = tempfile::tempdir().unwrap();
    let files = d.save(dir.path()).unwrap();
    assert!(files.iter().all(|f| f.exists()));
    let back = PhantomDataset::load(dir.path()).unwrap();
    assert_eq!(back.bundles.len(), 2);
    assert_eq!(back.labels.labels(), d.labels.labels());
    assert_eq!(back.keypoints, d.keypoints);
    assert_eq!(back.curves, d.curves);
    for (a, b) in back.bundles.iter().zip(&d.bundles) {
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.caps, b.caps);
        assert_eq!(a.streamlines.len(), b.streamlines.len());
    }
    for (a, b) in back.fa.data().iter().zip(d.fa.data()) {
        assert_eq!(*a, *b as f32 as f64);
    }
}

#[test]
fn spec_validation() {
    assert!(PhantomSpec::preset("spiral", [N; 3], 0).is_err());
    let mut s = PhantomSpec::preset("straight", [N; 3], 0).unwrap();
    s.bundles[0].radius_mm = 0.5;
    assert!(s.validate().is_err());
    let mut s = PhantomSpec::preset("straight", [N; 3], 0).unwrap();
    s.bundles[0].curve.start[1] = 0.5;
    assert!(s.validate().is_err());
    let j = r#"{"dims": [16, 16, 16], "surprise": true}"#;
    assert!(serde_json::from_str::<PhantomSpec>(j).is_err());
    let _ = angle([1.0, 0.0, 0.0], [0.0, 1.0, 0.0]);
}
